#include "ilql/decode.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ilql/error.hpp"

namespace ilql {

using wordle::GameState;
using wordle::Vocab;

Tensor<float> extract_logits(const Tensor<float>& pi_logits, const Tensor<float>& q,
                             float v, const ExtractionSpec& spec) {
    if (spec.beta_inf) return q;
    require(pi_logits.rank() == 1, ErrorKind::shape, "behavior logits must be a vector");
    require(shape_eq(pi_logits.shape, q.shape), ErrorKind::shape,
            "behavior logits and Q row disagree in size");
    const int64_t n = pi_logits.numel();
    float m = -INFINITY;
    for (int64_t i = 0; i < n; ++i) m = std::max(m, pi_logits.data[static_cast<size_t>(i)]);
    double z = 0.0;
    for (int64_t i = 0; i < n; ++i)
        z += std::exp(static_cast<double>(pi_logits.data[static_cast<size_t>(i)]) - m);
    const auto log_z = static_cast<float>(std::log(z));
    Tensor<float> out(pi_logits.shape);
    for (int64_t i = 0; i < n; ++i) {
        const auto si = static_cast<size_t>(i);
        out.data[si] = (pi_logits.data[si] - m - log_z) +
                       static_cast<float>(spec.beta) * (q.data[si] - v);
    }
    return out;
}

namespace {

// Masked log-probabilities of `legal` under scores/temperature, in legal order.
std::vector<double> masked_log_probs(const Tensor<float>& scores,
                                     std::span<const int64_t> legal, double temperature) {
    std::vector<double> lp(legal.size());
    double m = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < legal.size(); ++i) {
        lp[i] = static_cast<double>(scores.data[static_cast<size_t>(legal[i])]) / temperature;
        m = std::max(m, lp[i]);
    }
    double z = 0.0;
    for (double& x : lp) z += std::exp(x - m);
    const double log_z = m + std::log(z);
    for (double& x : lp) x -= log_z;
    return lp;
}

}  // namespace

Selection select_token(const Tensor<float>& scores, std::span<const int64_t> legal,
                       const ExtractionSpec& spec, Rng* rng) {
    require(!legal.empty(), ErrorKind::domain, "no legal tokens to choose from");
    require(scores.rank() == 1, ErrorKind::shape, "scores must be a vector");
    for (int64_t t : legal)
        require(t >= 0 && t < scores.numel(), ErrorKind::domain,
                "legal token outside the score vector");

    if (spec.greedy) {
        size_t best = 0;
        for (size_t i = 1; i < legal.size(); ++i)
            if (scores.data[static_cast<size_t>(legal[i])] >
                scores.data[static_cast<size_t>(legal[best])])
                best = i;
        std::vector<double> lp = masked_log_probs(scores, legal, 1.0);
        return {static_cast<int>(legal[best]), lp[best]};
    }

    require(rng != nullptr, ErrorKind::state, "sampling needs an rng");
    require(spec.temperature > 0.0, ErrorKind::domain, "temperature must be positive");
    require(spec.top_p > 0.0 && spec.top_p <= 1.0, ErrorKind::domain,
            "top_p must lie in (0, 1]");
    std::vector<double> lp = masked_log_probs(scores, legal, spec.temperature);

    // Nucleus filter: keep the smallest high-probability prefix reaching top_p.
    std::vector<size_t> order(legal.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return lp[a] > lp[b]; });
    size_t kept = order.size();
    if (spec.top_p < 1.0) {
        double cum = 0.0;
        for (size_t i = 0; i < order.size(); ++i) {
            cum += std::exp(lp[order[i]]);
            if (cum >= spec.top_p) {
                kept = i + 1;
                break;
            }
        }
    }
    double z = 0.0;
    for (size_t i = 0; i < kept; ++i) z += std::exp(lp[order[i]]);

    const double u = rng->uniform01() * z;
    double cum = 0.0;
    size_t chosen = kept - 1;
    for (size_t i = 0; i < kept; ++i) {
        cum += std::exp(lp[order[i]]);
        if (u < cum) {
            chosen = i;
            break;
        }
    }
    const size_t pick = order[chosen];
    return {static_cast<int>(legal[pick]), lp[pick] - std::log(z)};
}

DecodeResult decode_episode(GameState game, const PolicyModels& models,
                            const ExtractionSpec& spec, Rng& rng) {
    require(!game.done, ErrorKind::state, "decode: game is already over");
    const bool need_pi = !spec.beta_inf;
    const bool need_value = spec.beta_inf || spec.beta != 0.0;
    require(!need_pi || models.pi_beta != nullptr, ErrorKind::state,
            "decode: behavior checkpoint required");
    require(!need_value || models.value != nullptr, ErrorKind::state,
            "decode: value checkpoint required");
    if (need_pi && need_value)
        require(models.pi_beta->config.vocab_size == models.value->config.vocab_size,
                ErrorKind::state, "decode: models disagree on the token set");

    std::vector<IncrementalForward> fwds;
    if (need_pi) fwds.emplace_back(*models.pi_beta);
    if (need_value) fwds.emplace_back(*models.value);
    IncrementalForward* lm = need_pi ? &fwds[0] : nullptr;
    IncrementalForward* val = need_value ? &fwds[need_pi ? 1 : 0] : nullptr;

    auto push_all = [&](int token) {
        for (IncrementalForward& f : fwds) f.push(token);
    };
    for (int tok : wordle::encode_episode(game)) push_all(tok);

    DecodeResult out;
    const int64_t vocab_size =
        need_pi ? models.pi_beta->config.vocab_size : models.value->config.vocab_size;
    while (!game.done) {
        std::string word;
        for (int k = 0; k < wordle::kWordLen; ++k) {
            Tensor<float> scores;
            if (spec.beta_inf) {
                IncrementalForward::ValueRow row = val->values_last();
                scores = min_target_q(row.q1, row.q2);
            } else if (spec.beta == 0.0) {
                scores = extract_logits(lm->lm_logits_last(),
                                        Tensor<float>(Shape{vocab_size}), 0.0f, spec);
            } else {
                IncrementalForward::ValueRow row = val->values_last();
                scores = extract_logits(lm->lm_logits_last(), min_target_q(row.q1, row.q2),
                                        row.v, spec);
            }
            Selection sel = select_token(scores, wordle::letter_tokens(), spec, &rng);
            out.nll -= sel.logp;
            ++out.actions;
            word.push_back(wordle::token_letter(sel.token));
            push_all(sel.token);
        }
        step(game, word);
        if (!game.done)
            for (const wordle::Color c : game.history.back().second)
                push_all(wordle::color_token(c));
    }
    out.episode_return = game_return(game);
    out.game = std::move(game);
    return out;
}

std::vector<BetaSweepRow> beta_sweep(const Vocab& vocab, const PolicyModels& models,
                                     std::span<const BetaPoint> betas, int64_t games,
                                     uint64_t seed) {
    require(!betas.empty(), ErrorKind::domain, "beta list is empty");
    require(games >= 1, ErrorKind::domain, "need at least one game per beta");
    std::vector<BetaSweepRow> rows;
    for (const BetaPoint& b : betas) {
        ExtractionSpec spec;
        spec.beta = b.beta;
        spec.beta_inf = b.inf;
        spec.greedy = false;
        BetaSweepRow row;
        row.beta = b;
        row.games = games;
        double sum = 0.0, sum_sq = 0.0, ent = 0.0;
        for (int64_t g = 0; g < games; ++g) {
            Rng rng = Rng::stream(seed, static_cast<uint64_t>(g));
            GameState game = reset(vocab, rng);
            DecodeResult res = decode_episode(std::move(game), models, spec, rng);
            sum += res.episode_return;
            sum_sq += res.episode_return * res.episode_return;
            ent += res.nll / static_cast<double>(res.actions);
        }
        const auto n = static_cast<double>(games);
        row.mean_return = sum / n;
        row.entropy_nats = ent / n;
        if (games > 1) {
            const double var = std::max(0.0, (sum_sq - sum * sum / n) / (n - 1.0));
            row.stderr_mean = std::sqrt(var / n);
        }
        rows.push_back(row);
    }
    return rows;
}

void save_beta_sweep_csv(const std::string& path, const std::vector<BetaSweepRow>& rows) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::io, "cannot write sweep csv: " + path);
    out << "beta,games,mean_return,stderr,entropy_nats\n";
    for (const BetaSweepRow& r : rows) {
        char buf[160];
        if (r.beta.inf)
            std::snprintf(buf, sizeof buf, "inf,%lld,%.9g,%.9g,%.9g",
                          static_cast<long long>(r.games), r.mean_return, r.stderr_mean,
                          r.entropy_nats);
        else
            std::snprintf(buf, sizeof buf, "%.9g,%lld,%.9g,%.9g,%.9g", r.beta.beta,
                          static_cast<long long>(r.games), r.mean_return, r.stderr_mean,
                          r.entropy_nats);
        out << buf << "\n";
    }
    require(out.good(), ErrorKind::io, "failed writing sweep csv: " + path);
}

}  // namespace ilql
