#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ilql/rng.hpp"
#include "ilql/wordle.hpp"

namespace ilql::wordle {

enum class ScriptedPolicyKind { upper_bound, suboptimal, adversarial };
const char* policy_name(ScriptedPolicyKind kind);

// Words still consistent with every feedback row, as indices in vocab order.
std::vector<int> consistent_indices(const Vocab& vocab, const GameState& game);

// Expected reduction, in bits, of the uniform-posterior entropy over `candidates`
// when `guess` is played. The all-green outcome leaves zero entropy (game over).
double information_gain_bits(const std::string& guess,
                             const std::vector<std::string>& candidates);

// Argmax of information gain over the whole vocab; ties go to the guess with the
// higher chance of being the answer outright, then to vocab order.
std::string policy_upper_bound(const GameState& game, const Vocab& vocab);

// Fair coin: uniform over the vocab, or uniform over the consistent words
// (falling back to the whole vocab when none remain).
std::string policy_suboptimal(const GameState& game, const Vocab& vocab, Rng& rng);

// Plays like policy_upper_bound for two turns, then alternates replaying its first
// and second guesses (odd turns replay the first), read back from the history.
std::string policy_adversarial(const GameState& game, const Vocab& vocab);

std::string scripted_guess(ScriptedPolicyKind kind, const GameState& game,
                           const Vocab& vocab, Rng& rng);

// Plays one full game: the answer is drawn from rng, then the policy runs to
// completion. The trajectory is provenance-tagged with the policy name.
Trajectory run_scripted_episode(ScriptedPolicyKind kind, const Vocab& vocab, Rng& rng);

struct MixtureSpec {
    std::array<double, 3> proportions = {0.09, 0.455, 0.455};  // policy-kind order
    int64_t total = 0;
    uint64_t seed = 0;

    void validate() const;
    // round(p * total) per policy, remainder folded into the largest share.
    std::array<int64_t, 3> counts() const;
};

// Episodes grouped in policy-kind order; episode i draws from Rng::stream(seed, i)
// so any episode can be regenerated independently.
std::vector<Trajectory> generate_mixture(const MixtureSpec& spec, const Vocab& vocab);

// Keeps trajectories whose return ties or beats the k-th largest return, where
// k = max(1, round(pct * n / 100)). Input order is preserved.
std::vector<Trajectory> filter_top_percent(const std::vector<Trajectory>& data,
                                           double pct);

// One published color grid: the feedback rows of a game with the words withheld.
struct ColorRows {
    std::vector<Feedback> rows;
};

std::vector<ColorRows> strip_to_color_rows(const std::vector<Trajectory>& data);

std::vector<ColorRows> load_color_rows(const std::string& path);
void save_color_rows(const std::string& path, const std::vector<ColorRows>& grids);

struct RetrofitResult {
    bool feasible = false;
    std::string answer;
    std::vector<std::string> guesses;
};

// Finds (answer, guesses) reproducing the grid exactly, or reports infeasible.
// Given the answer the rows constrain each guess independently, so the search
// enumerates answers in vocab order, then samples uniformly among the answers
// that work and uniformly among each row's matching words.
RetrofitResult retrofit_rows(const ColorRows& grid, const Vocab& vocab, Rng& rng);

// Retrofits every feasible grid into a replayable trajectory (provenance
// "retrofit"; grids without a final all-green row stay unfinished games).
std::vector<Trajectory> retrofit_dataset(const std::vector<ColorRows>& grids,
                                         const Vocab& vocab, uint64_t seed);

// A third-turn decision point whose first two guesses match policy_upper_bound:
// the probe asks whether a Q function prefers the fresh informative first letter
// over re-typing the opening guess.
struct Probe {
    std::vector<int> tokens;    // BOS + two full turns
    int oracle_token = 0;       // first letter of policy_upper_bound's third guess
    int adversarial_token = 0;  // first letter of the game's first guess
};

// Extracts deduplicated probes from episodes with at least two completed,
// non-winning turns opened exactly as policy_upper_bound would have opened.
// Probes where the two action tokens coincide are dropped.
std::vector<Probe> make_probes(const std::vector<Trajectory>& data, const Vocab& vocab);

std::vector<Probe> load_probes(const std::string& path);
void save_probes(const std::string& path, const std::vector<Probe>& probes);

uint64_t fnv1a64_file(const std::string& path);

struct DatasetManifest {
    std::string source;  // "synthetic" or "retrofit"
    std::string vocab_hash;
    uint64_t seed = 0;
    std::array<double, 3> proportions = {0, 0, 0};
    int64_t total = 0;
    std::vector<std::pair<std::string, int64_t>> counts;  // per provenance tag
};

DatasetManifest make_manifest(const std::string& source, const std::string& vocab_path,
                              uint64_t seed, const std::array<double, 3>& proportions,
                              const std::vector<Trajectory>& data);
void save_manifest(const std::string& path, const DatasetManifest& m);

}  // namespace ilql::wordle
