#include "rvit/synthdata.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "rvit/serialize.hpp"

namespace rvit {
namespace synth {

namespace fs = std::filesystem;
using nlohmann::json;

const char* shape_word(ShapeKind s) {
  switch (s) {
    case ShapeKind::empty: return "empty";
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  throw std::logic_error("bad shape");
}

const char* color_word(ColorKind c) {
  switch (c) {
    case ColorKind::red: return "red";
    case ColorKind::green: return "green";
    case ColorKind::blue: return "blue";
    case ColorKind::yellow: return "yellow";
  }
  throw std::logic_error("bad color");
}

std::string Scene::canonical() const {
  std::string s;
  for (const Cell& cell : cells) {
    if (!s.empty()) s += ",";
    if (cell.shape == ShapeKind::empty) {
      s += "e";
    } else {
      s += color_word(cell.color)[0];
      s += shape_word(cell.shape)[0];
    }
  }
  return s;
}

// ---- vocabulary ----

namespace {

std::vector<std::string> grammar_tokens() {
  std::vector<std::string> t = {"<pad>", "<bos>", "<eos>", "<sep>",
                                "a",     "at",    "empty", "grid",
                                "what",  "shape", "color"};
  for (const char* w : {"circle", "square", "triangle"}) t.emplace_back(w);
  for (const char* w : {"red", "green", "blue", "yellow"}) t.emplace_back(w);
  for (int r = 0; r < kGridCells; ++r) t.push_back("row" + std::to_string(r));
  for (int c = 0; c < kGridCells; ++c) t.push_back("col" + std::to_string(c));
  return t;
}

std::vector<std::string> answer_words() {
  return {"circle", "square", "triangle", "empty", "red", "green", "blue", "yellow"};
}

}  // namespace

void Vocabulary::index_specials() {
  bos_ = id("<bos>");
  eos_ = id("<eos>");
  pad_ = id("<pad>");
  sep_ = id("<sep>");
  answer_ids_.clear();
  for (const std::string& w : answer_words()) answer_ids_.push_back(id(w));
  std::sort(answer_ids_.begin(), answer_ids_.end());
}

Vocabulary Vocabulary::build_default() {
  Vocabulary v;
  v.tokens_ = grammar_tokens();
  v.index_specials();
  return v;
}

int Vocabulary::id(const std::string& token) const {
  for (size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i] == token) return static_cast<int>(i);
  }
  throw std::out_of_range("unknown token: " + token);
}

const std::string& Vocabulary::token(int tid) const {
  if (tid < 0 || tid >= size()) throw std::out_of_range("token id out of range");
  return tokens_[static_cast<size_t>(tid)];
}

bool Vocabulary::has(const std::string& token) const {
  return std::find(tokens_.begin(), tokens_.end(), token) != tokens_.end();
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream ss(text);
  std::string tok;
  while (ss >> tok) ids.push_back(id(tok));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string s;
  for (int tid : ids) {
    if (!s.empty()) s += " ";
    s += token(tid);
  }
  return s;
}

void Vocabulary::save(const std::string& path) const {
  json j;
  j["tokens"] = tokens_;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  json j = json::parse(f);
  Vocabulary v;
  v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
  v.index_specials();
  return v;
}

// ---- scene sampling and rendering ----

Scene sample_scene(Rng& rng) {
  Scene s;
  for (Cell& cell : s.cells) {
    cell.shape = static_cast<ShapeKind>(rng.uniform_int(0, 3));
    cell.color = static_cast<ColorKind>(rng.uniform_int(0, 3));
  }
  return s;
}

namespace {

// Pixel masks on the 8x8 cell. Shapes have pairwise-distinct masks (and
// pixel counts: square 36, circle 32, triangle 24), so rendering is
// invertible.
bool mask_at(ShapeKind s, int r, int c) {
  switch (s) {
    case ShapeKind::empty:
      return false;
    case ShapeKind::square:
      return r >= 1 && r <= 6 && c >= 1 && c <= 6;
    case ShapeKind::circle: {
      const double dr = r - 3.5;
      const double dc = c - 3.5;
      return dr * dr + dc * dc <= 9.0;
    }
    case ShapeKind::triangle: {
      if (r < 1 || r > 6) return false;
      const int half = (r - 1) / 2;  // row pairs widen by one pixel each side
      return c >= 3 - half && c <= 4 + half;
    }
  }
  return false;
}

void color_rgb(ColorKind c, float rgb[3]) {
  rgb[0] = rgb[1] = rgb[2] = 0.0f;
  switch (c) {
    case ColorKind::red: rgb[0] = 1.0f; break;
    case ColorKind::green: rgb[1] = 1.0f; break;
    case ColorKind::blue: rgb[2] = 1.0f; break;
    case ColorKind::yellow: rgb[0] = rgb[1] = 1.0f; break;
  }
}

}  // namespace

Tensor<float> render(const Scene& scene) {
  Tensor<float> img({kImageSize, kImageSize, kChannels});
  for (int gr = 0; gr < kGridCells; ++gr) {
    for (int gc = 0; gc < kGridCells; ++gc) {
      const Cell& cell = scene.at(gr, gc);
      if (cell.shape == ShapeKind::empty) continue;
      float rgb[3];
      color_rgb(cell.color, rgb);
      for (int r = 0; r < kCellPx; ++r) {
        for (int c = 0; c < kCellPx; ++c) {
          if (!mask_at(cell.shape, r, c)) continue;
          const size_t base =
              (static_cast<size_t>(gr * kCellPx + r) * kImageSize + (gc * kCellPx + c)) *
              kChannels;
          for (int ch = 0; ch < kChannels; ++ch) img.at(base + ch) = rgb[ch];
        }
      }
    }
  }
  return img;
}

Scene scene_from_image(const Tensor<float>& image) {
  if (image.shape() != std::vector<int>{kImageSize, kImageSize, kChannels}) {
    throw std::invalid_argument("scene_from_image: expected [32x32x3], got " + image.shape_str());
  }
  Scene scene;
  for (int gr = 0; gr < kGridCells; ++gr) {
    for (int gc = 0; gc < kGridCells; ++gc) {
      bool lit[kCellPx][kCellPx] = {};
      float rgb[3] = {0, 0, 0};
      bool any = false;
      for (int r = 0; r < kCellPx; ++r) {
        for (int c = 0; c < kCellPx; ++c) {
          const size_t base =
              (static_cast<size_t>(gr * kCellPx + r) * kImageSize + (gc * kCellPx + c)) *
              kChannels;
          float mx = 0.0f;
          for (int ch = 0; ch < kChannels; ++ch) mx = std::max(mx, image.at(base + ch));
          if (mx > 0.5f) {
            lit[r][c] = true;
            any = true;
            for (int ch = 0; ch < kChannels; ++ch) rgb[ch] = image.at(base + ch);
          }
        }
      }
      Cell& cell = scene.at(gr, gc);
      if (!any) {
        cell.shape = ShapeKind::empty;
        continue;
      }
      bool matched = false;
      for (ShapeKind s : {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle}) {
        bool all = true;
        for (int r = 0; r < kCellPx && all; ++r) {
          for (int c = 0; c < kCellPx && all; ++c) {
            if (lit[r][c] != mask_at(s, r, c)) all = false;
          }
        }
        if (all) {
          cell.shape = s;
          matched = true;
          break;
        }
      }
      if (!matched) throw std::invalid_argument("scene_from_image: unrecognized shape pattern");
      const bool r_on = rgb[0] > 0.5f, g_on = rgb[1] > 0.5f, b_on = rgb[2] > 0.5f;
      if (r_on && g_on && !b_on) cell.color = ColorKind::yellow;
      else if (r_on && !g_on && !b_on) cell.color = ColorKind::red;
      else if (!r_on && g_on && !b_on) cell.color = ColorKind::green;
      else if (!r_on && !g_on && b_on) cell.color = ColorKind::blue;
      else throw std::invalid_argument("scene_from_image: unrecognized color");
    }
  }
  return scene;
}

// ---- text ----

std::string caption_text(const Scene& scene) {
  std::string s;
  for (int gr = 0; gr < kGridCells; ++gr) {
    for (int gc = 0; gc < kGridCells; ++gc) {
      const Cell& cell = scene.at(gr, gc);
      if (cell.shape == ShapeKind::empty) continue;
      if (!s.empty()) s += " <sep> ";
      s += "a ";
      s += color_word(cell.color);
      s += " ";
      s += shape_word(cell.shape);
      s += " at row" + std::to_string(gr) + " col" + std::to_string(gc);
    }
  }
  if (s.empty()) s = "empty grid";
  return s;
}

std::vector<QaPair> make_qa(const Scene& scene, const Vocabulary& vocab, Rng& rng) {
  std::vector<QaPair> out;
  auto push = [&](const std::string& kind, int gr, int gc, const std::string& answer) {
    QaPair qa;
    qa.question_text =
        "what " + kind + " at row" + std::to_string(gr) + " col" + std::to_string(gc);
    qa.answer_text = answer;
    qa.question = vocab.encode(qa.question_text);
    qa.answer = vocab.id(answer);
    out.push_back(std::move(qa));
  };

  // One shape question about any cell.
  {
    const int idx = static_cast<int>(rng.uniform_int(0, kGridCells * kGridCells - 1));
    const int gr = idx / kGridCells;
    const int gc = idx % kGridCells;
    push("shape", gr, gc, shape_word(scene.at(gr, gc).shape));
  }
  // One color question about a non-empty cell (skipped for an empty grid).
  std::vector<int> nonempty;
  for (int i = 0; i < kGridCells * kGridCells; ++i) {
    if (scene.cells[static_cast<size_t>(i)].shape != ShapeKind::empty) nonempty.push_back(i);
  }
  if (!nonempty.empty()) {
    const int idx = nonempty[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(nonempty.size()) - 1))];
    const int gr = idx / kGridCells;
    const int gc = idx % kGridCells;
    push("color", gr, gc, color_word(scene.at(gr, gc).color));
  }
  return out;
}

int answer_from_scene(const Scene& scene, const std::vector<int>& question,
                      const Vocabulary& vocab) {
  // Grammar: what {shape|color} at row{r} col{c}
  if (question.size() != 5 || question[0] != vocab.id("what") || question[2] != vocab.id("at")) {
    throw std::invalid_argument("malformed question: " + vocab.decode(question));
  }
  const std::string& kind = vocab.token(question[1]);
  const std::string& rw = vocab.token(question[3]);
  const std::string& cw = vocab.token(question[4]);
  if (rw.rfind("row", 0) != 0 || cw.rfind("col", 0) != 0) {
    throw std::invalid_argument("malformed question position");
  }
  const int gr = std::stoi(rw.substr(3));
  const int gc = std::stoi(cw.substr(3));
  const Cell& cell = scene.at(gr, gc);
  if (kind == "shape") return vocab.id(shape_word(cell.shape));
  if (kind == "color") {
    if (cell.shape == ShapeKind::empty) {
      throw std::invalid_argument("color question about an empty cell");
    }
    return vocab.id(color_word(cell.color));
  }
  throw std::invalid_argument("unknown question kind: " + kind);
}

Sample generate_sample(uint64_t seed, uint64_t index, const Vocabulary& vocab) {
  Rng rng(seed, "synth/sample", index);
  Sample s;
  s.index = index;
  s.scene = sample_scene(rng);
  s.image = render(s.scene);
  s.caption_text = caption_text(s.scene);
  s.caption = vocab.encode(s.caption_text);
  s.qa = make_qa(s.scene, vocab, rng);
  return s;
}

// ---- training rows ----

TextRow make_caption_row(const std::vector<int>& caption, const Vocabulary& vocab) {
  TextRow row;
  row.ids.push_back(vocab.bos());
  row.ids.insert(row.ids.end(), caption.begin(), caption.end());
  row.ids.push_back(vocab.eos());
  row.target_mask.assign(row.ids.size(), true);
  row.target_mask[0] = false;
  return row;
}

TextRow make_qa_row(const QaPair& qa, const Vocabulary& vocab, bool response_only) {
  TextRow row;
  row.ids.push_back(vocab.bos());
  row.ids.insert(row.ids.end(), qa.question.begin(), qa.question.end());
  row.ids.push_back(vocab.sep());
  const size_t answer_pos = row.ids.size();
  row.ids.push_back(qa.answer);
  row.ids.push_back(vocab.eos());
  row.target_mask.assign(row.ids.size(), false);
  if (response_only) {
    row.target_mask[answer_pos] = true;
    row.target_mask[answer_pos + 1] = true;
  } else {
    for (size_t i = 1; i < row.ids.size(); ++i) row.target_mask[i] = true;
  }
  return row;
}

// ---- dataset IO ----

std::vector<SplitSpec> default_splits() {
  return {{"train", 0, 8000}, {"val", 8000, 1000}, {"test", 9000, 1000}};
}

void write_dataset(const std::string& dir, uint64_t seed, const std::vector<SplitSpec>& splits,
                   const Vocabulary& vocab) {
  if (splits.empty()) throw std::invalid_argument("write_dataset: no splits");
  for (size_t i = 0; i < splits.size(); ++i) {
    for (size_t j = i + 1; j < splits.size(); ++j) {
      if (splits[i].name == splits[j].name) {
        throw std::invalid_argument("write_dataset: duplicate split name " + splits[i].name);
      }
      const uint64_t ai = splits[i].begin, bi = ai + splits[i].count;
      const uint64_t aj = splits[j].begin, bj = aj + splits[j].count;
      if (ai < bj && aj < bi) {
        throw std::invalid_argument("write_dataset: index ranges overlap for splits " +
                                    splits[i].name + " and " + splits[j].name);
      }
    }
  }
  fs::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.jsonl");
  if (!manifest) throw std::runtime_error("cannot open for write: " + dir + "/manifest.jsonl");

  std::vector<std::set<std::string>> canon(splits.size());
  for (size_t si = 0; si < splits.size(); ++si) {
    const SplitSpec& sp = splits[si];
    std::vector<uint8_t> pixels;
    pixels.reserve(static_cast<size_t>(sp.count) * kImageSize * kImageSize * kChannels);
    for (uint64_t k = 0; k < sp.count; ++k) {
      const Sample s = generate_sample(seed, sp.begin + k, vocab);
      canon[si].insert(s.scene.canonical());
      for (size_t p = 0; p < s.image.numel(); ++p) {
        pixels.push_back(static_cast<uint8_t>(std::lround(s.image.at(p) * 255.0f)));
      }
      json line;
      line["index"] = s.index;
      line["split"] = sp.name;
      line["caption"] = s.caption_text;
      json qa = json::array();
      for (const QaPair& p : s.qa) qa.push_back({{"q", p.question_text}, {"a", p.answer_text}});
      line["qa"] = qa;
      line["scene"] = s.scene.canonical();
      manifest << line.dump() << "\n";
    }
    write_npy_u8(dir + "/images_" + sp.name + ".npy",
                 {static_cast<int>(sp.count), kImageSize, kImageSize, kChannels}, pixels);
  }
  if (!manifest) throw std::runtime_error("manifest write failed");
  manifest.close();

  for (size_t i = 0; i < splits.size(); ++i) {
    for (size_t j = i + 1; j < splits.size(); ++j) {
      for (const std::string& c : canon[i]) {
        if (canon[j].count(c)) {
          throw std::runtime_error("write_dataset: scene appears in splits " + splits[i].name +
                                   " and " + splits[j].name + ": " + c);
        }
      }
    }
  }
  vocab.save(dir + "/vocab.json");
}

Dataset Dataset::load(const std::string& dir, const std::string& split) {
  Dataset ds;
  ds.vocab = Vocabulary::load(dir + "/vocab.json");
  ds.split = split;

  const NpyArray images = read_npy(dir + "/images_" + split + ".npy");
  if (images.descr != "|u1" || images.shape.size() != 4 || images.shape[1] != kImageSize ||
      images.shape[2] != kImageSize || images.shape[3] != kChannels) {
    throw std::runtime_error("unexpected image array layout in " + dir);
  }
  const size_t stride = static_cast<size_t>(kImageSize) * kImageSize * kChannels;

  std::ifstream manifest(dir + "/manifest.jsonl");
  if (!manifest) throw std::runtime_error("cannot open: " + dir + "/manifest.jsonl");
  std::string line;
  size_t pos = 0;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.at("split").get<std::string>() != split) continue;
    if (pos >= static_cast<size_t>(images.shape[0])) {
      throw std::runtime_error("manifest has more rows than image array for split " + split);
    }
    DatasetRow row;
    row.index = j.at("index").get<uint64_t>();
    row.caption_text = j.at("caption").get<std::string>();
    row.caption = ds.vocab.encode(row.caption_text);
    for (const auto& q : j.at("qa")) {
      QaPair qa;
      qa.question_text = q.at("q").get<std::string>();
      qa.answer_text = q.at("a").get<std::string>();
      qa.question = ds.vocab.encode(qa.question_text);
      qa.answer = ds.vocab.id(qa.answer_text);
      row.qa.push_back(std::move(qa));
    }
    row.image = Tensor<float>({kImageSize, kImageSize, kChannels});
    const uint8_t* src = reinterpret_cast<const uint8_t*>(images.raw.data()) + pos * stride;
    for (size_t p = 0; p < stride; ++p) row.image.at(p) = static_cast<float>(src[p]) / 255.0f;
    ds.rows.push_back(std::move(row));
    ++pos;
  }
  if (pos != static_cast<size_t>(images.shape[0])) {
    throw std::runtime_error("manifest rows and image array disagree for split " + split);
  }
  if (ds.rows.empty()) throw std::runtime_error("split not found or empty: " + split);
  return ds;
}

double qa_accuracy(
    const std::function<int(const Tensor<float>&, const std::vector<int>&)>& answer_fn,
    const std::vector<DatasetRow>& rows) {
  size_t total = 0, correct = 0;
  for (const DatasetRow& row : rows) {
    for (const QaPair& qa : row.qa) {
      ++total;
      if (answer_fn(row.image, qa.question) == qa.answer) ++correct;
    }
  }
  if (total == 0) throw std::invalid_argument("qa_accuracy: no QA pairs in dataset");
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace synth
}  // namespace rvit
