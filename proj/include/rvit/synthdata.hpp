#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rvit/rng.hpp"
#include "rvit/tensor.hpp"

namespace rvit {
namespace synth {

constexpr int kGridCells = 4;
constexpr int kCellPx = 8;
constexpr int kImageSize = kGridCells * kCellPx;
constexpr int kChannels = 3;

enum class ShapeKind : int { empty = 0, circle = 1, square = 2, triangle = 3 };
enum class ColorKind : int { red = 0, green = 1, blue = 2, yellow = 3 };

const char* shape_word(ShapeKind s);
const char* color_word(ColorKind c);

struct Cell {
  ShapeKind shape = ShapeKind::empty;
  ColorKind color = ColorKind::red;

  bool operator==(const Cell& o) const {
    if (shape != o.shape) return false;
    return shape == ShapeKind::empty || color == o.color;
  }
};

struct Scene {
  std::array<Cell, kGridCells * kGridCells> cells;

  Cell& at(int row, int col) { return cells[static_cast<size_t>(row) * kGridCells + col]; }
  const Cell& at(int row, int col) const {
    return cells[static_cast<size_t>(row) * kGridCells + col];
  }
  // Stable per-scene key used for the cross-split duplicate check.
  std::string canonical() const;
  bool operator==(const Scene& o) const { return cells == o.cells; }
};

// Closed-grammar vocabulary. Token ids are assigned in a fixed order, so the
// mapping is identical across runs and machines.
class Vocabulary {
 public:
  static Vocabulary build_default();

  int id(const std::string& token) const;
  const std::string& token(int tid) const;
  bool has(const std::string& token) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  int bos() const { return bos_; }
  int eos() const { return eos_; }
  int pad() const { return pad_; }
  int sep() const { return sep_; }
  // Ids a QA answer can take (shapes, "empty", colors), ascending.
  const std::vector<int>& answer_ids() const { return answer_ids_; }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::vector<int> answer_ids_;
  int bos_ = -1, eos_ = -1, pad_ = -1, sep_ = -1;
  void index_specials();
};

struct QaPair {
  std::string question_text;
  std::string answer_text;
  std::vector<int> question;
  int answer = -1;
};

struct Sample {
  uint64_t index = 0;
  Scene scene;
  Tensor<float> image;  // [32 x 32 x 3], values in {0, 1}
  std::string caption_text;
  std::vector<int> caption;
  std::vector<QaPair> qa;
};

Scene sample_scene(Rng& rng);
Tensor<float> render(const Scene& scene);
// Exact inverse of render for valid rendered images; throws if a cell's pixel
// pattern matches no shape. This is the guarantee that every QA answer is
// derivable from the image alone.
Scene scene_from_image(const Tensor<float>& image);

std::string caption_text(const Scene& scene);
std::vector<QaPair> make_qa(const Scene& scene, const Vocabulary& vocab, Rng& rng);
Sample generate_sample(uint64_t seed, uint64_t index, const Vocabulary& vocab);

// Answers a question about a scene by evaluating the grammar directly.
// Used by oracle model stubs and by QA construction.
int answer_from_scene(const Scene& scene, const std::vector<int>& question,
                      const Vocabulary& vocab);

// ---- training-row construction ----

// `target_mask[i]` marks token ids[i] as a prediction target (the logits one
// position to its left are supervised). Position 0 (BOS) is never a target.
struct TextRow {
  std::vector<int> ids;
  std::vector<bool> target_mask;
};

TextRow make_caption_row(const std::vector<int>& caption, const Vocabulary& vocab);
TextRow make_qa_row(const QaPair& qa, const Vocabulary& vocab, bool response_only = true);

// ---- dataset IO ----

struct SplitSpec {
  std::string name;
  uint64_t begin = 0;
  uint64_t count = 0;
};

std::vector<SplitSpec> default_splits();

// Writes manifest.jsonl, vocab.json, and one images_<split>.npy (|u1,
// [count x 32 x 32 x 3]) per split. Verifies index ranges are disjoint and
// that no scene appears in two splits; throws on violation.
void write_dataset(const std::string& dir, uint64_t seed, const std::vector<SplitSpec>& splits,
                   const Vocabulary& vocab);

struct DatasetRow {
  uint64_t index = 0;
  Tensor<float> image;
  std::string caption_text;
  std::vector<int> caption;
  std::vector<QaPair> qa;
};

struct Dataset {
  Vocabulary vocab;
  std::string split;
  std::vector<DatasetRow> rows;

  static Dataset load(const std::string& dir, const std::string& split);
};

// Exact-match accuracy of `answer_fn(image, question ids) -> answer id` over
// every QA pair in `rows`. Throws if there are no QA pairs.
double qa_accuracy(
    const std::function<int(const Tensor<float>&, const std::vector<int>&)>& answer_fn,
    const std::vector<DatasetRow>& rows);

}  // namespace synth
}  // namespace rvit
