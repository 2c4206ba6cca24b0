#pragma once

// Grid-world referring games with exact truth oracles: generator, renderer,
// question semantics, brute-force consistency filter, IoU, vocabulary, and a
// JSON-lines dataset format.

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mhfilm/tensor.hpp"

namespace mhfilm::games {

enum class Color { red, green, blue, yellow, purple };
enum class ShapeKind { square, circle, triangle, cross };
enum class SizeKind { small, large };
enum class Answer { yes, no, na };
enum class Split { train, valid, test };

constexpr int kNumColors = 5;
constexpr int kNumShapes = 4;

const char* to_string(Color c);
const char* to_string(ShapeKind s);
const char* to_string(SizeKind s);
const char* to_string(Answer a);
const char* to_string(Split s);

struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
};

// intersection area over union area; boxes must have positive extents
double iou(const BBox& a, const BBox& b);

struct Mask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> bits;  // row-major, {0,1}
};

// alternating run lengths, zeros first
std::vector<std::uint32_t> rle_encode(const Mask& m);
Mask rle_decode(std::size_t h, std::size_t w,
                const std::vector<std::uint32_t>& runs);

struct GameObject {
  int category = 0;  // shape index
  Color color = Color::red;
  ShapeKind shape = ShapeKind::square;
  SizeKind size = SizeKind::large;
  int row = 0, col = 0;
  BBox bbox;  // pixels
  Mask mask;  // image resolution
};

struct QA {
  std::vector<std::string> question;
  Answer answer = Answer::na;
};

struct Game {
  std::uint64_t id = 0;
  int grid = 7;
  int cell_px = 4;
  std::vector<GameObject> objects;
  int target = 0;
  std::vector<QA> dialogue;
  Split split = Split::train;

  std::size_t image_size() const {
    return static_cast<std::size_t>(grid) * static_cast<std::size_t>(cell_px);
  }
};

struct GenConfig {
  int grid = 7;
  int cell_px = 4;
  int phi_min = 2;
  int phi_max = 5;
  int dlg_min = 3;  // dlg_max == 0 emits a single referring expression
  int dlg_max = 6;
  int max_attempts = 200;
};

// Deterministic given (id, master_seed): each game runs on its own derived
// stream, so any subset of ids can be generated in any order.
Game generate_game(std::uint64_t id, std::uint64_t master_seed,
                   const GenConfig& cfg);
std::vector<Game> generate_dataset(std::uint64_t master_seed, std::size_t n,
                                   const GenConfig& cfg);

Split split_for_id(std::uint64_t id);  // hash-based 80/10/10
void assign_prefix_splits(std::vector<Game>& games, std::size_t n_train,
                          std::size_t n_valid, std::size_t n_test);

Tensor render_image(const Game& g);                      // [3,H,W] in [0,1]
Tensor render_crop(const Game& g, std::size_t obj);      // [3,H,W] nearest
Tensor mask_channel(const Game& g, std::size_t obj);     // [1,H,W]
Tensor crop_mask_channel(const Game& g, std::size_t obj);  // [1,H,W] area avg

// Exact attribute/position check; <n/a> for grammatical questions about
// attributes outside the generator's schema. Throws on unparseable input.
Answer oracle_truth(const std::vector<std::string>& question,
                    const GameObject& target, int grid);

// All object indices whose attributes satisfy every recorded pair.
std::vector<std::size_t> consistent_set(const std::vector<QA>& dialogue,
                                        const std::vector<GameObject>& objects,
                                        int grid);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kYes = 2;
  static constexpr int kNo = 3;
  static constexpr int kNa = 4;
  static constexpr int kQm = 5;  // the '?' token

  Vocabulary();
  int id_of(const std::string& token) const;  // <unk> fallback
  const std::string& token_of(int id) const;
  std::size_t size() const { return id_to_token_.size(); }
  int answer_id(Answer a) const;
  void add_token(const std::string& token);

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// Tokens with at least three occurrences get ids; rarer words fall to <unk>.
Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& corpus);
Vocabulary vocabulary_from_games(const std::vector<Game>& games);

enum class DialogueView {
  full_with_answers,  // q1 a1 ... qD aD (Guesser / Pointer)
  oracle_context,     // q1 a1 ... q(D-1) a(D-1) qD  (answer withheld)
  last_question,      // qD only
};

struct TokenizedDialogue {
  std::vector<int> ids;
  std::size_t last_q_begin = 0;  // [begin, end) span of the final question
  std::size_t last_q_end = 0;
  std::vector<std::size_t> answer_positions;
};

TokenizedDialogue tokenize_dialogue(const Game& g, const Vocabulary& vocab,
                                    DialogueView view);

// JSON lines, UTF-8, LF. Images are re-rendered on load, not stored.
void save_games(const std::string& path, const std::vector<Game>& games);
std::vector<Game> load_games(const std::string& path);

}  // namespace mhfilm::games
