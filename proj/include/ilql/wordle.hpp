#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ilql/rng.hpp"

namespace ilql::wordle {

constexpr int kWordLen = 5;
constexpr int kMaxTurns = 6;

// Token ids: letters a..z are 0..25, then colors, then BOS.
constexpr int kTokenBlack = 26;
constexpr int kTokenYellow = 27;
constexpr int kTokenGreen = 28;
constexpr int kTokenBos = 29;
constexpr int kNumTokens = 30;

enum class Color : uint8_t { black, yellow, green };
using Feedback = std::array<Color, kWordLen>;

char color_char(Color c);
Color color_from_char(char c);
int color_token(Color c);
Color token_color(int token);
int letter_token(char c);
char token_letter(int token);
bool is_letter_token(int token);

// The 26 letter tokens: every legal agent action, ascending.
std::span<const int64_t> letter_tokens();

struct Vocab {
    std::vector<std::string> words;

    static Vocab from_words(std::vector<std::string> words);  // validates and indexes
    static Vocab load(const std::string& path);               // one word per line
    void save(const std::string& path) const;

    int64_t size() const { return static_cast<int64_t>(words.size()); }
    int index_of(const std::string& word) const;  // -1 when absent

  private:
    std::unordered_map<std::string, int> index_;
};

// Scoring rule: exact matches turn green first, then remaining answer letters are
// consumed left to right as yellows, so duplicate guess letters never over-count.
// score_guess applies the rule to equal-length lowercase words of any length;
// compute_feedback is the fixed five-letter wrapper the game uses.
std::vector<Color> score_guess(const std::string& guess, const std::string& answer);
Feedback compute_feedback(const std::string& guess, const std::string& answer);
bool all_green(const Feedback& fb);

struct GameState {
    std::string answer;
    std::vector<std::pair<std::string, Feedback>> history;
    bool done = false;
    bool won = false;

    int turns_taken() const { return static_cast<int>(history.size()); }
};

GameState reset(const Vocab& vocab, Rng& rng);
GameState reset_with_answer(std::string answer);

// Applies one guess and returns its reward: 0 for the correct word, -1 otherwise.
// The game ends on a win or after the sixth turn.
float step(GameState& game, const std::string& guess);

// True when the word could still be the answer given every feedback row so far.
bool consistent(const std::string& word, const GameState& game);

double game_return(const GameState& game);

// [BOS] then, per completed turn, five letter tokens followed by five color tokens.
std::vector<int> encode_episode(const GameState& game);
// Decision-point prefix: completed turns plus any letters of the current partial guess.
std::vector<int> encode_prefix(const GameState& game, const std::string& partial);

struct ParsedEpisode {
    std::vector<std::string> guesses;
    std::vector<Feedback> colors;
};
// Inverse of encode_episode; rejects malformed token sequences.
ParsedEpisode decode_episode(const std::vector<int>& tokens);

struct Trajectory {
    std::vector<int> tokens;
    std::vector<bool> action_mask;  // true at agent (letter) positions
    std::vector<float> rewards;     // nonzero only at guess-final letters
    bool done = true;
    std::string provenance;
    std::string answer;
};

Trajectory make_trajectory(const GameState& game, const std::string& provenance);
double trajectory_return(const Trajectory& t);
// Re-simulates the stored guesses against the stored answer; errors if any field of
// the trajectory disagrees with the simulation.
GameState replay(const Trajectory& t);

std::vector<Trajectory> load_trajectories(const std::string& path);
void save_trajectories(const std::string& path, const std::vector<Trajectory>& ts);

}  // namespace ilql::wordle
