#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ilql/model.hpp"
#include "ilql/rng.hpp"
#include "ilql/tensor.hpp"
#include "ilql/wordle.hpp"

namespace ilql {

// How behavior logits and learned values combine into an acting policy.
struct ExtractionSpec {
    double beta = 0.0;    // advantage multiplier; 0 decodes the behavior policy alone
    bool beta_inf = false;  // act greedily on the Q function, ignoring the behavior model
    bool greedy = true;
    double temperature = 1.0;  // sampling only
    double top_p = 1.0;        // sampling only; 1 disables the nucleus filter
};

// log softmax(pi_logits) + beta * (q - v); with beta_inf the q row is returned as
// the score vector unchanged.
Tensor<float> extract_logits(const Tensor<float>& pi_logits, const Tensor<float>& q,
                             float v, const ExtractionSpec& spec);

struct Selection {
    int token = -1;
    double logp = 0.0;  // under the distribution actually decoded from
};

// Picks among `legal` token ids only. Greedy takes the argmax with ties to the
// lowest id and reports logp under the masked softmax of the raw scores; sampling
// applies temperature, then the nucleus filter, then draws from rng.
Selection select_token(const Tensor<float>& scores, std::span<const int64_t> legal,
                       const ExtractionSpec& spec, Rng* rng);

struct PolicyModels {
    const Weights* pi_beta = nullptr;  // lm head; unused when beta_inf
    const Weights* value = nullptr;    // value heads; unused when beta == 0
};

struct DecodeResult {
    wordle::GameState game;
    double episode_return = 0.0;
    double nll = 0.0;  // summed -logp of the chosen letters
    int64_t actions = 0;
};

// Plays the game to completion, choosing every letter with the extracted policy
// and appending the environment's color tokens after each guess. Skips the value
// forward when beta == 0 and the behavior forward when beta_inf.
DecodeResult decode_episode(wordle::GameState game, const PolicyModels& models,
                            const ExtractionSpec& spec, Rng& rng);

struct BetaPoint {
    double beta = 0.0;
    bool inf = false;
};

struct BetaSweepRow {
    BetaPoint beta;
    int64_t games = 0;
    double mean_return = 0.0;
    double stderr_mean = 0.0;
    double entropy_nats = 0.0;  // mean over games of nll / letter count
};

// Sampling decode at each beta, fresh games per row from per-game seed streams.
std::vector<BetaSweepRow> beta_sweep(const wordle::Vocab& vocab, const PolicyModels& models,
                                     std::span<const BetaPoint> betas, int64_t games,
                                     uint64_t seed);

void save_beta_sweep_csv(const std::string& path, const std::vector<BetaSweepRow>& rows);

}  // namespace ilql
