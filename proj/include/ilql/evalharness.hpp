#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ilql/datagen.hpp"
#include "ilql/decode.hpp"
#include "ilql/model.hpp"
#include "ilql/wordle.hpp"

namespace ilql {

struct EvalReport {
    int64_t games = 0;
    double mean_return = 0.0;
    double stderr_mean = 0.0;  // sample stdev (n-1) over sqrt(games)
    double entropy_nats = 0.0;  // mean over games of nll / letter count
    std::array<int64_t, 7> solve_hist{};  // [k]: solved on turn k+1; [6]: unsolved
};

// Rolls one game from the given fresh state; rng is the game's private stream.
using PlayFn = std::function<DecodeResult(wordle::GameState, Rng&)>;

// n_games rollouts, one derived rng stream per game (answer draw included), so
// reports are reproducible and games are order-independent.
EvalReport evaluate_policy(const wordle::Vocab& vocab, const PlayFn& play,
                           int64_t n_games, uint64_t seed);

// Fraction of probes whose (min of the twin Q heads) value prefers the oracle
// action over the replayed one at the probe's decision point.
double q_preference(const Weights& value, const std::vector<wordle::Probe>& probes);

struct SuiteCell {
    std::string algo;
    bool has_tau = false;
    double tau = 0.0;
    bool has_pct = false;
    double pct = 0.0;
    bool has_beta = false;
    BetaPoint beta;
    EvalReport report;
    bool best = false;  // best mean return within the algorithm, ties to smaller beta
};

struct SuiteResult {
    std::vector<SuiteCell> rows;
    std::vector<std::string> skipped;  // cells whose checkpoint was absent
};

// Grid config (JSON file): {"vocab", "games", "seed", "behavior",
//   "ilql": {"checkpoints": {"<tau>": dir, ...}, "betas": [4, 8, 16, "inf"]},
//   "single_step": {"checkpoint": dir, "betas": [...]},
//   "filtered_bc": {"checkpoints": {"<pct>": dir, ...}},
//   "bc": {"checkpoint": dir}}
// Every section is optional; absent checkpoints produce skip notes, not errors.
// All cells decode greedily, sharing the seed so game sets are paired.
SuiteResult run_suite(const std::string& grid_json_path);

void save_suite_csv(const std::string& path, const SuiteResult& result);

}  // namespace ilql
