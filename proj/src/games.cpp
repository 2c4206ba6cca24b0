#include "mhfilm/games.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <stdexcept>

#include <json.hpp>

namespace mhfilm::games {

using json = nlohmann::ordered_json;

namespace {

const std::array<const char*, 5> kColorWords = {"red", "green", "blue",
                                                "yellow", "purple"};
const std::array<const char*, 4> kShapeWords = {"square", "circle", "triangle",
                                                "cross"};
const std::array<const char*, 2> kSizeWords = {"small", "large"};
const std::array<const char*, 4> kPosWords = {"left", "right", "top",
                                              "bottom"};
// grammatical but outside the attribute schema; always answered <n/a>
const std::array<const char*, 3> kOffSchemaWords = {"shiny", "dark", "fuzzy"};

template <class Words>
std::optional<int> word_index(const Words& words, const std::string& w) {
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (w == words[i]) return static_cast<int>(i);
  }
  return std::nullopt;
}

std::array<double, 3> color_rgb(Color c) {
  switch (c) {
    case Color::red: return {1, 0, 0};
    case Color::green: return {0, 1, 0};
    case Color::blue: return {0, 0, 1};
    case Color::yellow: return {1, 1, 0};
    case Color::purple: return {1, 0, 1};
  }
  return {0, 0, 0};
}

bool shape_pixel(ShapeKind k, int py, int px, int s) {
  switch (k) {
    case ShapeKind::square:
      return true;
    case ShapeKind::circle: {
      const double c = (s - 1) / 2.0;
      const double r = s / 2.0 - 0.1;
      const double dx = px - c, dy = py - c;
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::triangle:
      return py >= px;
    case ShapeKind::cross:
      return px == py || px + py == s - 1;
  }
  return false;
}

bool position_true(const std::string& pos, const GameObject& o, int grid) {
  if (pos == "left") return 2 * o.col < grid - 1;
  if (pos == "right") return 2 * o.col > grid - 1;
  if (pos == "top") return 2 * o.row < grid - 1;
  return 2 * o.row > grid - 1;  // bottom
}

struct ParsedQuestion {
  enum class Kind { attribute, phrase } kind = Kind::attribute;
  // attribute question: exactly one of these is set
  std::optional<Color> color;
  std::optional<ShapeKind> shape;
  std::optional<SizeKind> size;
  std::optional<std::string> pos;
  bool off_schema = false;
  // phrase: any subset of the optionals above, as a conjunction
};

ParsedQuestion parse_question(const std::vector<std::string>& q) {
  ParsedQuestion p;
  const auto fail = [&q]() -> ParsedQuestion {
    std::string s;
    for (const auto& t : q) s += t + " ";
    throw std::invalid_argument("unparseable question: " + s);
  };
  if (q.size() >= 2 && q[0] == "the") {
    p.kind = ParsedQuestion::Kind::phrase;
    std::size_t i = 1;
    if (i < q.size()) {
      if (auto s = word_index(kSizeWords, q[i])) {
        p.size = static_cast<SizeKind>(*s);
        ++i;
      }
    }
    if (i < q.size()) {
      if (auto c = word_index(kColorWords, q[i])) {
        p.color = static_cast<Color>(*c);
        ++i;
      }
    }
    if (i >= q.size()) return fail();
    if (auto s = word_index(kShapeWords, q[i])) {
      p.shape = static_cast<ShapeKind>(*s);
      ++i;
    } else if (q[i] == "thing") {
      ++i;
    } else {
      return fail();
    }
    if (i == q.size()) return p;
    if (i + 3 == q.size() && q[i] == "in" && q[i + 1] == "the" &&
        word_index(kPosWords, q[i + 2])) {
      p.pos = q[i + 2];
      return p;
    }
    return fail();
  }
  if (q.size() >= 3 && q[0] == "is" && q[1] == "it" && q.back() == "?") {
    if (q.size() == 4) {
      if (auto c = word_index(kColorWords, q[2])) {
        p.color = static_cast<Color>(*c);
        return p;
      }
      if (auto s = word_index(kSizeWords, q[2])) {
        p.size = static_cast<SizeKind>(*s);
        return p;
      }
      if (word_index(kOffSchemaWords, q[2])) {
        p.off_schema = true;
        return p;
      }
    }
    if (q.size() == 5 && q[2] == "a") {
      if (auto s = word_index(kShapeWords, q[3])) {
        p.shape = static_cast<ShapeKind>(*s);
        return p;
      }
    }
    if (q.size() == 6 && q[2] == "in" && q[3] == "the" &&
        word_index(kPosWords, q[4])) {
      p.pos = q[4];
      return p;
    }
  }
  return fail();
}

Answer eval_parsed(const ParsedQuestion& p, const GameObject& o, int grid) {
  if (p.off_schema) return Answer::na;
  bool ok = true;
  if (p.color) ok = ok && o.color == *p.color;
  if (p.shape) ok = ok && o.shape == *p.shape;
  if (p.size) ok = ok && o.size == *p.size;
  if (p.pos) ok = ok && position_true(*p.pos, o, grid);
  return ok ? Answer::yes : Answer::no;
}

GameObject make_object(int row, int col, Color color, ShapeKind shape,
                       SizeKind size, int grid, int cell) {
  GameObject o;
  o.category = static_cast<int>(shape);
  o.color = color;
  o.shape = shape;
  o.size = size;
  o.row = row;
  o.col = col;
  const int s_px = size == SizeKind::large ? cell : std::max(1, cell - 1);
  const int off = (cell - s_px) / 2;
  const int x0 = col * cell + off;
  const int y0 = row * cell + off;
  o.bbox = {static_cast<double>(x0), static_cast<double>(y0),
            static_cast<double>(s_px), static_cast<double>(s_px)};
  const std::size_t img = static_cast<std::size_t>(grid) * cell;
  o.mask.h = o.mask.w = img;
  o.mask.bits.assign(img * img, 0);
  for (int py = 0; py < s_px; ++py) {
    for (int px = 0; px < s_px; ++px) {
      if (shape_pixel(shape, py, px, s_px)) {
        o.mask.bits[(y0 + py) * img + (x0 + px)] = 1;
      }
    }
  }
  return o;
}

std::vector<QA> question_pool(bool with_off_schema) {
  std::vector<QA> pool;
  for (const char* c : kColorWords) pool.push_back({{"is", "it", c, "?"}, {}});
  for (const char* s : kShapeWords) {
    pool.push_back({{"is", "it", "a", s, "?"}, {}});
  }
  for (const char* s : kSizeWords) pool.push_back({{"is", "it", s, "?"}, {}});
  for (const char* p : kPosWords) {
    pool.push_back({{"is", "it", "in", "the", p, "?"}, {}});
  }
  if (with_off_schema) {
    for (const char* d : kOffSchemaWords) {
      pool.push_back({{"is", "it", d, "?"}, {}});
    }
  }
  return pool;
}

std::vector<std::size_t> filter_candidates(
    const std::vector<std::size_t>& candidates, const ParsedQuestion& p,
    Answer a, const std::vector<GameObject>& objects, int grid) {
  std::vector<std::size_t> kept;
  for (std::size_t i : candidates) {
    const Answer v = eval_parsed(p, objects[i], grid);
    if (v == Answer::na || v == a) kept.push_back(i);
  }
  return kept;
}

bool build_qa_dialogue(Game& g, const GenConfig& cfg, Rng& rng) {
  const int len = rng.range_int(cfg.dlg_min, cfg.dlg_max);
  std::vector<std::size_t> candidates(g.objects.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) candidates[i] = i;
  const GameObject& target = g.objects[static_cast<std::size_t>(g.target)];

  std::vector<QA> informative = question_pool(false);
  std::vector<QA> fillers = question_pool(true);
  for (int j = 0; j < len; ++j) {
    QA qa;
    if (candidates.size() > 1) {
      std::vector<QA> shuffled = informative;
      rng.shuffle(shuffled);
      bool found = false;
      for (const QA& cand_q : shuffled) {
        const ParsedQuestion p = parse_question(cand_q.question);
        const Answer a = eval_parsed(p, target, g.grid);
        auto kept = filter_candidates(candidates, p, a, g.objects, g.grid);
        if (kept.size() < candidates.size()) {
          qa.question = cand_q.question;
          qa.answer = a;
          candidates = std::move(kept);
          found = true;
          break;
        }
      }
      if (!found) return false;  // indistinguishable objects; retry the scene
    } else {
      const QA& pick = fillers[rng.below(fillers.size())];
      qa.question = pick.question;
      qa.answer = eval_parsed(parse_question(pick.question), target, g.grid);
    }
    g.dialogue.push_back(std::move(qa));
  }
  return candidates.size() == 1 &&
         candidates[0] == static_cast<std::size_t>(g.target);
}

bool build_referring_phrase(Game& g) {
  const GameObject& target = g.objects[static_cast<std::size_t>(g.target)];
  std::vector<std::string> applicable_pos;
  for (const char* p : kPosWords) {
    if (position_true(p, target, g.grid)) applicable_pos.push_back(p);
  }
  // combinations of (size, color, pos) around the shape noun, fewest
  // constraints first
  struct Combo {
    bool size, color, shape, pos;
  };
  std::vector<Combo> combos;
  for (int bits = 0; bits < 16; ++bits) {
    combos.push_back({(bits & 1) != 0, (bits & 2) != 0, (bits & 4) != 0,
                      (bits & 8) != 0});
  }
  std::stable_sort(combos.begin(), combos.end(),
                   [](const Combo& a, const Combo& b) {
                     const int ca = a.size + a.color + a.shape + a.pos;
                     const int cb = b.size + b.color + b.shape + b.pos;
                     return ca < cb;
                   });
  for (const Combo& c : combos) {
    std::vector<std::string> pos_options =
        c.pos ? applicable_pos : std::vector<std::string>{""};
    if (c.pos && pos_options.empty()) continue;
    for (const std::string& pos : pos_options) {
      std::vector<std::string> phrase = {"the"};
      if (c.size) phrase.push_back(to_string(target.size));
      if (c.color) phrase.push_back(to_string(target.color));
      phrase.push_back(c.shape ? to_string(target.shape) : "thing");
      if (c.pos) {
        phrase.push_back("in");
        phrase.push_back("the");
        phrase.push_back(pos);
      }
      QA qa{phrase, Answer::yes};
      const auto kept = consistent_set({qa}, g.objects, g.grid);
      if (kept.size() == 1 && kept[0] == static_cast<std::size_t>(g.target)) {
        g.dialogue.push_back(std::move(qa));
        return true;
      }
    }
  }
  return false;
}

}  // namespace

const char* to_string(Color c) { return kColorWords[static_cast<int>(c)]; }
const char* to_string(ShapeKind s) { return kShapeWords[static_cast<int>(s)]; }
const char* to_string(SizeKind s) { return kSizeWords[static_cast<int>(s)]; }

const char* to_string(Answer a) {
  switch (a) {
    case Answer::yes: return "yes";
    case Answer::no: return "no";
    case Answer::na: return "n/a";
  }
  return "n/a";
}

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "train";
}

double iou(const BBox& a, const BBox& b) {
  if (a.w <= 0 || a.h <= 0 || b.w <= 0 || b.h <= 0) {
    throw std::invalid_argument("iou: boxes must have positive extents");
  }
  const double ix =
      std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy =
      std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

std::vector<std::uint32_t> rle_encode(const Mask& m) {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t count = 0;
  for (std::uint8_t b : m.bits) {
    if (b == current) {
      ++count;
    } else {
      runs.push_back(count);
      current = b;
      count = 1;
    }
  }
  runs.push_back(count);
  return runs;
}

Mask rle_decode(std::size_t h, std::size_t w,
                const std::vector<std::uint32_t>& runs) {
  Mask m;
  m.h = h;
  m.w = w;
  m.bits.reserve(h * w);
  std::uint8_t current = 0;
  for (std::uint32_t r : runs) {
    m.bits.insert(m.bits.end(), r, current);
    current = current ? 0 : 1;
  }
  if (m.bits.size() != h * w) {
    throw std::invalid_argument("mask RLE length " +
                                std::to_string(m.bits.size()) +
                                " does not match " + std::to_string(h * w));
  }
  return m;
}

Split split_for_id(std::uint64_t id) {
  const std::uint64_t bucket = Rng::derive(0x5eedULL, id) % 10;
  if (bucket < 8) return Split::train;
  return bucket == 8 ? Split::valid : Split::test;
}

void assign_prefix_splits(std::vector<Game>& games, std::size_t n_train,
                          std::size_t n_valid, std::size_t n_test) {
  if (n_train + n_valid + n_test > games.size()) {
    throw std::invalid_argument("prefix split sizes exceed dataset size");
  }
  for (std::size_t i = 0; i < games.size(); ++i) {
    games[i].split = i < n_train                     ? Split::train
                     : i < n_train + n_valid         ? Split::valid
                     : i < n_train + n_valid + n_test ? Split::test
                                                      : Split::test;
  }
}

Game generate_game(std::uint64_t id, std::uint64_t master_seed,
                   const GenConfig& cfg) {
  if (cfg.grid < 2 || cfg.cell_px < 1) {
    throw std::invalid_argument("generator needs grid >= 2 and cell >= 1");
  }
  if (cfg.phi_min < 2 || cfg.phi_max > 8 || cfg.phi_min > cfg.phi_max) {
    throw std::invalid_argument("object count range must satisfy 2 <= min <= max <= 8");
  }
  if (cfg.phi_max > cfg.grid * cfg.grid) {
    throw std::invalid_argument("cannot place " + std::to_string(cfg.phi_max) +
                                " objects on a " + std::to_string(cfg.grid) +
                                "x" + std::to_string(cfg.grid) + " grid");
  }
  if (cfg.dlg_min < 0 || cfg.dlg_min > cfg.dlg_max) {
    throw std::invalid_argument("bad dialogue length range");
  }
  Rng rng(Rng::derive(master_seed, id));
  const int n_cells = cfg.grid * cfg.grid;
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    Game g;
    g.id = id;
    g.grid = cfg.grid;
    g.cell_px = cfg.cell_px;
    const int phi = rng.range_int(cfg.phi_min, cfg.phi_max);
    std::vector<int> cells(n_cells);
    for (int i = 0; i < n_cells; ++i) cells[i] = i;
    for (int i = 0; i < phi; ++i) {
      const int j = i + static_cast<int>(rng.below(n_cells - i));
      std::swap(cells[i], cells[j]);
    }
    for (int i = 0; i < phi; ++i) {
      const int row = cells[i] / cfg.grid;
      const int col = cells[i] % cfg.grid;
      g.objects.push_back(make_object(
          row, col, static_cast<Color>(rng.below(kNumColors)),
          static_cast<ShapeKind>(rng.below(kNumShapes)),
          rng.below(2) == 0 ? SizeKind::small : SizeKind::large, cfg.grid,
          cfg.cell_px));
    }
    g.target = static_cast<int>(rng.below(phi));
    const bool ok = cfg.dlg_max == 0 ? build_referring_phrase(g)
                                     : build_qa_dialogue(g, cfg, rng);
    if (ok) {
      g.split = split_for_id(id);
      return g;
    }
  }
  throw std::runtime_error("game generation failed after " +
                           std::to_string(cfg.max_attempts) +
                           " attempts for id " + std::to_string(id));
}

std::vector<Game> generate_dataset(std::uint64_t master_seed, std::size_t n,
                                   const GenConfig& cfg) {
  std::vector<Game> games;
  games.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    games.push_back(generate_game(i, master_seed, cfg));
  }
  return games;
}

Tensor render_image(const Game& g) {
  const std::size_t s = g.image_size();
  Tensor img(Shape{3, s, s});
  double* v = img.data();
  for (const GameObject& o : g.objects) {
    const auto rgb = color_rgb(o.color);
    for (std::size_t i = 0; i < s * s; ++i) {
      if (o.mask.bits[i]) {
        for (std::size_t c = 0; c < 3; ++c) v[c * s * s + i] = rgb[c];
      }
    }
  }
  return img;
}

Tensor render_crop(const Game& g, std::size_t obj) {
  const std::size_t s = g.image_size();
  const GameObject& o = g.objects.at(obj);
  const std::size_t bx = static_cast<std::size_t>(o.bbox.x);
  const std::size_t by = static_cast<std::size_t>(o.bbox.y);
  const std::size_t bw = static_cast<std::size_t>(o.bbox.w);
  const std::size_t bh = static_cast<std::size_t>(o.bbox.h);
  const auto rgb = color_rgb(o.color);
  Tensor crop(Shape{3, s, s});
  double* v = crop.data();
  for (std::size_t y = 0; y < s; ++y) {
    const std::size_t sy = by + (y * bh) / s;
    for (std::size_t x = 0; x < s; ++x) {
      const std::size_t sx = bx + (x * bw) / s;
      if (o.mask.bits[sy * s + sx]) {
        for (std::size_t c = 0; c < 3; ++c) v[c * s * s + y * s + x] = rgb[c];
      }
    }
  }
  return crop;
}

Tensor mask_channel(const Game& g, std::size_t obj) {
  const std::size_t s = g.image_size();
  const GameObject& o = g.objects.at(obj);
  Tensor m(Shape{1, s, s});
  for (std::size_t i = 0; i < s * s; ++i) {
    m.data()[i] = static_cast<double>(o.mask.bits[i]);
  }
  return m;
}

Tensor crop_mask_channel(const Game& g, std::size_t obj) {
  const std::size_t s = g.image_size();
  const GameObject& o = g.objects.at(obj);
  const double bx = o.bbox.x, by = o.bbox.y, bw = o.bbox.w, bh = o.bbox.h;
  Tensor m(Shape{1, s, s});
  // area-average resample of the bbox region to s x s
  for (std::size_t y = 0; y < s; ++y) {
    const double y_lo = by + bh * y / s;
    const double y_hi = by + bh * (y + 1) / s;
    for (std::size_t x = 0; x < s; ++x) {
      const double x_lo = bx + bw * x / s;
      const double x_hi = bx + bw * (x + 1) / s;
      double acc = 0.0;
      for (std::size_t py = static_cast<std::size_t>(std::floor(y_lo));
           py < static_cast<std::size_t>(std::ceil(y_hi)); ++py) {
        const double wy = std::min<double>(y_hi, py + 1) - std::max<double>(y_lo, py);
        if (wy <= 0) continue;
        for (std::size_t px = static_cast<std::size_t>(std::floor(x_lo));
             px < static_cast<std::size_t>(std::ceil(x_hi)); ++px) {
          const double wx =
              std::min<double>(x_hi, px + 1) - std::max<double>(x_lo, px);
          if (wx <= 0) continue;
          acc += wy * wx * o.mask.bits[py * s + px];
        }
      }
      m.data()[y * s + x] = acc / ((bh / s) * (bw / s));
    }
  }
  return m;
}

Answer oracle_truth(const std::vector<std::string>& question,
                    const GameObject& target, int grid) {
  return eval_parsed(parse_question(question), target, grid);
}

std::vector<std::size_t> consistent_set(const std::vector<QA>& dialogue,
                                        const std::vector<GameObject>& objects,
                                        int grid) {
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    bool ok = true;
    for (const QA& qa : dialogue) {
      const Answer v = eval_parsed(parse_question(qa.question), objects[i], grid);
      if (v == Answer::na || qa.answer == Answer::na) continue;
      if (v != qa.answer) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(i);
  }
  return kept;
}

// ---------------------------------------------------------------------------
// vocabulary

Vocabulary::Vocabulary() {
  id_to_token_ = {"<pad>", "<unk>", "<yes>", "<no>", "<n/a>", "<?>"};
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    token_to_id_[id_to_token_[i]] = static_cast<int>(i);
  }
}

int Vocabulary::id_of(const std::string& token) const {
  if (token == "?") return kQm;
  const auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  return id_to_token_.at(static_cast<std::size_t>(id));
}

int Vocabulary::answer_id(Answer a) const {
  switch (a) {
    case Answer::yes: return kYes;
    case Answer::no: return kNo;
    case Answer::na: return kNa;
  }
  return kNa;
}

void Vocabulary::add_token(const std::string& token) {
  if (token_to_id_.count(token)) return;
  token_to_id_[token] = static_cast<int>(id_to_token_.size());
  id_to_token_.push_back(token);
}

Vocabulary build_vocabulary(
    const std::vector<std::vector<std::string>>& corpus) {
  std::unordered_map<std::string, std::size_t> counts;
  std::vector<std::string> first_seen;
  for (const auto& sentence : corpus) {
    for (const auto& tok : sentence) {
      if (tok == "?") continue;  // reserved <?>
      if (counts[tok]++ == 0) first_seen.push_back(tok);
    }
  }
  Vocabulary v;
  for (const auto& tok : first_seen) {
    if (counts[tok] >= 3) v.add_token(tok);
  }
  return v;
}

Vocabulary vocabulary_from_games(const std::vector<Game>& games) {
  std::vector<std::vector<std::string>> corpus;
  for (const Game& g : games) {
    for (const QA& qa : g.dialogue) corpus.push_back(qa.question);
  }
  return build_vocabulary(corpus);
}

TokenizedDialogue tokenize_dialogue(const Game& g, const Vocabulary& vocab,
                                    DialogueView view) {
  if (g.dialogue.empty()) {
    throw std::invalid_argument("tokenize_dialogue: empty dialogue");
  }
  TokenizedDialogue out;
  const std::size_t d = g.dialogue.size();
  const auto push_q = [&](std::size_t j, bool is_last) {
    const std::size_t begin = out.ids.size();
    for (const auto& tok : g.dialogue[j].question) {
      out.ids.push_back(vocab.id_of(tok));
    }
    if (is_last) {
      out.last_q_begin = begin;
      out.last_q_end = out.ids.size();
    }
  };
  const auto push_a = [&](std::size_t j) {
    out.answer_positions.push_back(out.ids.size());
    out.ids.push_back(vocab.answer_id(g.dialogue[j].answer));
  };
  switch (view) {
    case DialogueView::last_question:
      push_q(d - 1, true);
      break;
    case DialogueView::oracle_context:
      for (std::size_t j = 0; j + 1 < d; ++j) {
        push_q(j, false);
        push_a(j);
      }
      push_q(d - 1, true);
      break;
    case DialogueView::full_with_answers:
      for (std::size_t j = 0; j < d; ++j) {
        push_q(j, j + 1 == d);
        push_a(j);
      }
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset io

namespace {

Color color_from_string(const std::string& s, int line) {
  if (auto i = word_index(kColorWords, s)) return static_cast<Color>(*i);
  throw std::runtime_error("dataset parse error at line " +
                           std::to_string(line) + ": unknown color '" + s +
                           "'");
}

ShapeKind shape_from_string(const std::string& s, int line) {
  if (auto i = word_index(kShapeWords, s)) return static_cast<ShapeKind>(*i);
  throw std::runtime_error("dataset parse error at line " +
                           std::to_string(line) + ": unknown shape '" + s +
                           "'");
}

Answer answer_from_string(const std::string& s, int line) {
  if (s == "yes") return Answer::yes;
  if (s == "no") return Answer::no;
  if (s == "n/a") return Answer::na;
  throw std::runtime_error("dataset parse error at line " +
                           std::to_string(line) + ": unknown answer '" + s +
                           "'");
}

Split split_from_string(const std::string& s, int line) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw std::runtime_error("dataset parse error at line " +
                           std::to_string(line) + ": unknown split '" + s +
                           "'");
}

void warn_unknown_fields(const json& j,
                         const std::vector<std::string>& known, int line,
                         const char* scope) {
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      std::fprintf(stderr,
                   "warning: dataset line %d: ignoring unknown %s field "
                   "'%s'\n",
                   line, scope, item.key().c_str());
    }
  }
}

}  // namespace

void save_games(const std::string& path, const std::vector<Game>& games) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const Game& g : games) {
    json j;
    j["id"] = g.id;
    j["grid"] = g.grid;
    j["cell"] = g.cell_px;
    json objs = json::array();
    for (const GameObject& o : g.objects) {
      json jo;
      jo["cat"] = o.category;
      jo["color"] = to_string(o.color);
      jo["shape"] = to_string(o.shape);
      jo["size"] = to_string(o.size);
      jo["row"] = o.row;
      jo["col"] = o.col;
      jo["bbox"] = {o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h};
      jo["mask_rle"] = rle_encode(o.mask);
      objs.push_back(std::move(jo));
    }
    j["objects"] = std::move(objs);
    j["target"] = g.target;
    json dlg = json::array();
    for (const QA& qa : g.dialogue) {
      dlg.push_back({{"q", qa.question}, {"a", to_string(qa.answer)}});
    }
    j["dialogue"] = std::move(dlg);
    j["split"] = to_string(g.split);
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<Game> load_games(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);
  std::vector<Game> games;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("dataset parse error at line " +
                               std::to_string(lineno) + ": " + e.what());
    }
    try {
      warn_unknown_fields(
          j, {"id", "grid", "cell", "objects", "target", "dialogue", "split"},
          lineno, "game");
      Game g;
      g.id = j.at("id").get<std::uint64_t>();
      g.grid = j.at("grid").get<int>();
      g.cell_px = j.at("cell").get<int>();
      const std::size_t s = g.image_size();
      for (const json& jo : j.at("objects")) {
        warn_unknown_fields(jo,
                            {"cat", "color", "shape", "size", "row", "col",
                             "bbox", "mask_rle"},
                            lineno, "object");
        GameObject o;
        o.category = jo.at("cat").get<int>();
        o.color = color_from_string(jo.at("color").get<std::string>(), lineno);
        o.shape = shape_from_string(jo.at("shape").get<std::string>(), lineno);
        o.size = jo.at("size").get<std::string>() == "small" ? SizeKind::small
                                                             : SizeKind::large;
        o.row = jo.at("row").get<int>();
        o.col = jo.at("col").get<int>();
        const auto bb = jo.at("bbox");
        o.bbox = {bb.at(0).get<double>(), bb.at(1).get<double>(),
                  bb.at(2).get<double>(), bb.at(3).get<double>()};
        o.mask = rle_decode(s, s, jo.at("mask_rle").get<std::vector<std::uint32_t>>());
        g.objects.push_back(std::move(o));
      }
      g.target = j.at("target").get<int>();
      if (g.target < 0 ||
          static_cast<std::size_t>(g.target) >= g.objects.size()) {
        throw std::runtime_error("target index out of range");
      }
      for (const json& jq : j.at("dialogue")) {
        warn_unknown_fields(jq, {"q", "a"}, lineno, "dialogue");
        QA qa;
        qa.question = jq.at("q").get<std::vector<std::string>>();
        qa.answer = answer_from_string(jq.at("a").get<std::string>(), lineno);
        g.dialogue.push_back(std::move(qa));
      }
      g.split = split_from_string(j.at("split").get<std::string>(), lineno);
      games.push_back(std::move(g));
    } catch (const std::runtime_error&) {
      throw;
    } catch (const std::exception& e) {
      throw std::runtime_error("dataset parse error at line " +
                               std::to_string(lineno) + ": " + e.what());
    }
  }
  return games;
}

}  // namespace mhfilm::games
