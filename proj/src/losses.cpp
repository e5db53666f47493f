#include "ilql/losses.hpp"

#include <algorithm>
#include <cmath>

#include "ilql/error.hpp"

namespace ilql {

namespace {

constexpr int kTurnStride = 2 * wordle::kWordLen;  // letters + colors per turn

std::vector<int> episode_tokens(const ActionBatch& b, int64_t e) {
    const int64_t begin = b.tokens.offsets[static_cast<size_t>(e)];
    const int64_t end = b.tokens.offsets[static_cast<size_t>(e) + 1];
    std::vector<int> toks;
    toks.reserve(static_cast<size_t>(end - begin));
    for (int64_t i = begin; i < end; ++i)
        toks.push_back(static_cast<int>(b.tokens.tokens[static_cast<size_t>(i)]));
    return toks;
}

// Episode index owning each action, in construction order.
std::vector<int64_t> action_episodes(const ActionBatch& b) {
    std::vector<int64_t> out;
    out.reserve(static_cast<size_t>(b.count()));
    int64_t e = 0;
    for (int64_t a = 0; a < b.count(); ++a) {
        while (b.hist_rows[static_cast<size_t>(a)] >=
               b.tokens.offsets[static_cast<size_t>(e) + 1])
            ++e;
        out.push_back(e);
    }
    return out;
}

template <typename T>
NodeId constant_vec(Graph<T>& g, std::span<const float> values, const std::string& label) {
    Tensor<T> t({static_cast<int64_t>(values.size())});
    for (size_t i = 0; i < values.size(); ++i) t.data[i] = static_cast<T>(values[i]);
    return g.constant(std::move(t), label);
}

template <typename T>
NodeId constant_vec(Graph<T>& g, const std::vector<double>& values,
                    const std::string& label) {
    Tensor<T> t({static_cast<int64_t>(values.size())});
    for (size_t i = 0; i < values.size(); ++i) t.data[i] = static_cast<T>(values[i]);
    return g.constant(std::move(t), label);
}

// Head-averaged conservatism term: alpha * mean over actions of the average NLL of
// a_i under softmax(Q1) and softmax(Q2).
template <typename T>
NodeId cql_term_node(Graph<T>& g, const ForwardNodes& f, const ActionBatch& b,
                     double alpha) {
    NodeId ce1 = g.cross_entropy(g.gather_rows(f.q1, b.hist_rows), b.actions);
    NodeId ce2 = g.cross_entropy(g.gather_rows(f.q2, b.hist_rows), b.actions);
    return g.scaled(g.reduce_mean(g.scaled(g.add(ce1, ce2), 0.5)), alpha);
}

// Expectile fit of V toward a per-action constant target.
template <typename T>
NodeId v_fit_node(Graph<T>& g, const ForwardNodes& f, const ActionBatch& b,
                  std::span<const float> target_at_action, double tau,
                  const std::string& label) {
    NodeId target = constant_vec(g, target_at_action, label);
    NodeId v_at = g.gather_rows(f.v, b.hist_rows);
    return g.reduce_mean(g.expectile(g.sub(target, v_at), tau));
}

void check_value_heads(const ForwardNodes& f) {
    require(f.q1 >= 0 && f.q2 >= 0 && f.v >= 0, ErrorKind::state,
            "loss needs a value-head forward");
}

}  // namespace

ActionBatch make_action_batch(const std::vector<wordle::Trajectory>& data,
                              std::span<const int64_t> ids) {
    ActionBatch b;
    for (int64_t id : ids) {
        require(id >= 0 && id < static_cast<int64_t>(data.size()), ErrorKind::domain,
                "episode index out of range");
        const wordle::Trajectory& t = data[static_cast<size_t>(id)];
        const auto len = static_cast<int64_t>(t.tokens.size());
        require(t.action_mask.size() == t.tokens.size() &&
                    t.rewards.size() == t.tokens.size(),
                ErrorKind::shape, "trajectory fields disagree in length");
        const int64_t off = b.tokens.total();
        b.tokens.add_episode(t.tokens);

        int64_t last_action = -1;
        for (int64_t i = len - 1; i >= 0; --i)
            if (t.action_mask[static_cast<size_t>(i)]) {
                last_action = i;
                break;
            }
        for (int64_t i = 1; i < len; ++i) {
            if (!t.action_mask[static_cast<size_t>(i)]) continue;
            const int64_t in_turn = (i - 1) % kTurnStride;  // 0..4 letters, 5..9 colors
            require(in_turn < wordle::kWordLen, ErrorKind::state,
                    "action mask set on an environment token");
            b.hist_rows.push_back(off + i - 1);
            b.actions.push_back(t.tokens[static_cast<size_t>(i)]);
            b.rewards.push_back(t.rewards[static_cast<size_t>(i)]);
            if (i == last_action && t.done) {
                b.succ_rows.push_back(-1);
            } else if (in_turn < wordle::kWordLen - 1) {
                b.succ_rows.push_back(off + i);
            } else {
                require(i + wordle::kWordLen < len, ErrorKind::shape,
                        "guess-final letter lacks its color tokens");
                b.succ_rows.push_back(off + i + wordle::kWordLen);
            }
        }
    }
    require(b.count() > 0, ErrorKind::domain, "batch has no agent actions");
    return b;
}

ValueTargets compute_value_targets(const ActionBatch& batch, const Weights& target,
                                   const Weights* online,
                                   std::span<const int64_t> action_set) {
    require(!action_set.empty(), ErrorKind::domain, "bootstrap action set is empty");
    const int64_t n_eps = batch.tokens.episodes();
    std::vector<ValueForward> tgt(static_cast<size_t>(n_eps));
    std::vector<ValueForward> onl(online ? static_cast<size_t>(n_eps) : 0);
    for (int64_t e = 0; e < n_eps; ++e) {
        std::vector<int> toks = episode_tokens(batch, e);
        tgt[static_cast<size_t>(e)] = forward_value(target, toks);
        if (online) onl[static_cast<size_t>(e)] = forward_value(*online, toks);
    }

    const std::vector<int64_t> owner = action_episodes(batch);
    const int64_t n = batch.count();
    ValueTargets out;
    out.tgt_min_q.resize(static_cast<size_t>(n));
    out.tgt_mean_q.resize(static_cast<size_t>(n));
    out.max_next.resize(static_cast<size_t>(n), 0.0f);
    out.lse_next.resize(static_cast<size_t>(n), 0.0f);
    if (online) out.v_next.resize(static_cast<size_t>(n), 0.0f);

    for (int64_t a = 0; a < n; ++a) {
        const auto ai = static_cast<size_t>(a);
        const int64_t e = owner[ai];
        const int64_t base = batch.tokens.offsets[static_cast<size_t>(e)];
        const ValueForward& tf = tgt[static_cast<size_t>(e)];
        const int64_t hist = batch.hist_rows[ai] - base;
        const int64_t act = batch.actions[ai];
        const float q1 = tf.q1.at(hist, act);
        const float q2 = tf.q2.at(hist, act);
        out.tgt_min_q[ai] = std::min(q1, q2);
        out.tgt_mean_q[ai] = 0.5f * (q1 + q2);

        if (batch.succ_rows[ai] < 0) continue;
        const int64_t succ = batch.succ_rows[ai] - base;
        if (online) out.v_next[ai] = onl[static_cast<size_t>(e)].v.data[static_cast<size_t>(succ)];
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t tok : action_set)
            mx = std::max(mx, static_cast<double>(std::min(tf.q1.at(succ, tok),
                                                           tf.q2.at(succ, tok))));
        double z = 0.0;
        for (int64_t tok : action_set)
            z += std::exp(static_cast<double>(std::min(tf.q1.at(succ, tok),
                                                       tf.q2.at(succ, tok))) -
                          mx);
        out.max_next[ai] = static_cast<float>(mx);
        out.lse_next[ai] = static_cast<float>(mx + std::log(z));
    }
    return out;
}

std::vector<float> behavior_log_probs(const Weights& lm, const ActionBatch& batch) {
    require(lm.config.head == HeadKind::lm, ErrorKind::state,
            "behavior log-probs need an lm-head model");
    const std::vector<int64_t> owner = action_episodes(batch);
    std::vector<LmForward> fwd(static_cast<size_t>(batch.tokens.episodes()));
    for (int64_t e = 0; e < batch.tokens.episodes(); ++e)
        fwd[static_cast<size_t>(e)] = forward_lm(lm, episode_tokens(batch, e));

    std::vector<float> out(static_cast<size_t>(batch.count()));
    for (int64_t a = 0; a < batch.count(); ++a) {
        const auto ai = static_cast<size_t>(a);
        const int64_t e = owner[ai];
        const int64_t hist =
            batch.hist_rows[ai] - batch.tokens.offsets[static_cast<size_t>(e)];
        const Tensor<float>& logits = fwd[static_cast<size_t>(e)].logits;
        const int64_t vocab = logits.cols();
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t v = 0; v < vocab; ++v)
            mx = std::max(mx, static_cast<double>(logits.at(hist, v)));
        double z = 0.0;
        for (int64_t v = 0; v < vocab; ++v)
            z += std::exp(static_cast<double>(logits.at(hist, v)) - mx);
        const double logp =
            static_cast<double>(logits.at(hist, batch.actions[ai])) - mx - std::log(z);
        out[ai] = static_cast<float>(logp);
    }
    return out;
}

std::vector<float> awr_weights(const Weights& value, const ActionBatch& batch,
                               double beta, double w_max) {
    require(value.config.head == HeadKind::value, ErrorKind::state,
            "advantage weights need a value-head model");
    require(beta >= 0.0 && w_max > 0.0, ErrorKind::domain,
            "advantage weighting needs beta >= 0 and a positive clip");
    const std::vector<int64_t> owner = action_episodes(batch);
    std::vector<ValueForward> fwd(static_cast<size_t>(batch.tokens.episodes()));
    for (int64_t e = 0; e < batch.tokens.episodes(); ++e)
        fwd[static_cast<size_t>(e)] = forward_value(value, episode_tokens(batch, e));

    std::vector<float> out(static_cast<size_t>(batch.count()));
    for (int64_t a = 0; a < batch.count(); ++a) {
        const auto ai = static_cast<size_t>(a);
        const int64_t e = owner[ai];
        const int64_t hist =
            batch.hist_rows[ai] - batch.tokens.offsets[static_cast<size_t>(e)];
        const ValueForward& f = fwd[static_cast<size_t>(e)];
        const double q = std::min(f.q1.at(hist, batch.actions[ai]),
                                  f.q2.at(hist, batch.actions[ai]));
        const double v = f.v.data[static_cast<size_t>(hist)];
        out[ai] = static_cast<float>(std::min(std::exp(beta * (q - v)), w_max));
    }
    return out;
}

template <typename T>
LossNodes build_ilql_loss(Graph<T>& g, const ForwardNodes& f, const ActionBatch& batch,
                          const ValueTargets& targets, const ValueLossConfig& cfg) {
    check_value_heads(f);
    require(targets.v_next.size() == static_cast<size_t>(batch.count()), ErrorKind::shape,
            "TD needs V(h_{i+1}) for every action");
    require(cfg.tau >= 0.5 && cfg.tau < 1.0, ErrorKind::domain,
            "expectile must lie in [0.5, 1)");
    require(cfg.alpha >= 0.0 && cfg.gamma > 0.0 && cfg.gamma <= 1.0, ErrorKind::domain,
            "need alpha >= 0 and gamma in (0, 1]");

    std::vector<double> td(static_cast<size_t>(batch.count()));
    for (size_t i = 0; i < td.size(); ++i)
        td[i] = batch.rewards[i] + cfg.gamma * targets.v_next[i];
    NodeId td_target = constant_vec(g, td, "td_target");

    NodeId q1_at = g.gather_pairs(f.q1, batch.hist_rows, batch.actions);
    NodeId q2_at = g.gather_pairs(f.q2, batch.hist_rows, batch.actions);
    LossNodes out;
    out.q_term = g.reduce_mean(g.add(g.square(g.sub(td_target, q1_at)),
                                     g.square(g.sub(td_target, q2_at))));
    out.v_term = v_fit_node(g, f, batch, targets.tgt_min_q, cfg.tau, "tgt_min_q");
    out.cql_term = cql_term_node(g, f, batch, cfg.alpha);
    out.total = g.add(g.add(out.q_term, out.v_term), out.cql_term);
    return out;
}

template <typename T>
LossNodes build_per_token_cql_loss(Graph<T>& g, const ForwardNodes& f,
                                   const ActionBatch& batch, const ValueTargets& targets,
                                   const ValueLossConfig& cfg) {
    check_value_heads(f);
    require(targets.max_next.size() == static_cast<size_t>(batch.count()),
            ErrorKind::shape, "hard-max bootstrap missing");
    require(cfg.alpha >= 0.0 && cfg.gamma > 0.0 && cfg.gamma <= 1.0, ErrorKind::domain,
            "need alpha >= 0 and gamma in (0, 1]");

    std::vector<double> td(static_cast<size_t>(batch.count()));
    for (size_t i = 0; i < td.size(); ++i)
        td[i] = batch.rewards[i] +
                (batch.succ_rows[i] < 0 ? 0.0 : cfg.gamma * targets.max_next[i]);
    NodeId td_target = constant_vec(g, td, "td_target");

    NodeId q1_at = g.gather_pairs(f.q1, batch.hist_rows, batch.actions);
    NodeId q2_at = g.gather_pairs(f.q2, batch.hist_rows, batch.actions);
    LossNodes out;
    out.q_term = g.reduce_mean(g.add(g.square(g.sub(td_target, q1_at)),
                                     g.square(g.sub(td_target, q2_at))));
    out.v_term = v_fit_node(g, f, batch, targets.tgt_mean_q, 0.5, "tgt_mean_q");
    out.cql_term = cql_term_node(g, f, batch, cfg.alpha);
    out.total = g.add(g.add(out.q_term, out.v_term), out.cql_term);
    return out;
}

template <typename T>
LossNodes build_psi_loss(Graph<T>& g, const ForwardNodes& f, const ActionBatch& batch,
                         const ValueTargets& targets, std::span<const float> log_pi_beta,
                         const PsiLossConfig& cfg) {
    check_value_heads(f);
    require(log_pi_beta.size() == static_cast<size_t>(batch.count()), ErrorKind::shape,
            "behavior log-probs missing");
    require(targets.lse_next.size() == static_cast<size_t>(batch.count()),
            ErrorKind::shape, "soft-max bootstrap missing");
    require(cfg.reward_scale > 0.0 && cfg.huber_delta > 0.0, ErrorKind::domain,
            "need a positive reward scale and Huber width");

    std::vector<double> target(static_cast<size_t>(batch.count()));
    for (size_t i = 0; i < target.size(); ++i)
        target[i] = batch.rewards[i] / cfg.reward_scale + log_pi_beta[i] +
                    (batch.succ_rows[i] < 0 ? 0.0 : cfg.gamma * targets.lse_next[i]);
    NodeId soft_target = constant_vec(g, target, "soft_target");

    NodeId q1_at = g.gather_pairs(f.q1, batch.hist_rows, batch.actions);
    NodeId q2_at = g.gather_pairs(f.q2, batch.hist_rows, batch.actions);
    NodeId h1 = g.huber(g.sub(soft_target, q1_at), cfg.huber_delta);
    NodeId h2 = g.huber(g.sub(soft_target, q2_at), cfg.huber_delta);
    LossNodes out;
    out.q_term = g.reduce_mean(g.scaled(g.add(h1, h2), 0.5));
    out.v_term = v_fit_node(g, f, batch, targets.tgt_mean_q, 0.5, "tgt_mean_q");
    out.total = g.add(out.q_term, out.v_term);
    return out;
}

template <typename T>
LossNodes build_bc_loss(Graph<T>& g, const ForwardNodes& f, const ActionBatch& batch) {
    require(f.lm_logits >= 0, ErrorKind::state, "behavior cloning needs an lm head");
    LossNodes out;
    out.total = g.reduce_mean(
        g.cross_entropy(g.gather_rows(f.lm_logits, batch.hist_rows), batch.actions));
    return out;
}

template <typename T>
LossNodes build_awr_loss(Graph<T>& g, const ForwardNodes& f, const ActionBatch& batch,
                         std::span<const float> weights) {
    require(f.lm_logits >= 0, ErrorKind::state, "weighted cloning needs an lm head");
    require(weights.size() == static_cast<size_t>(batch.count()), ErrorKind::shape,
            "one weight per action required");
    NodeId ce = g.cross_entropy(g.gather_rows(f.lm_logits, batch.hist_rows), batch.actions);
    LossNodes out;
    out.total = g.reduce_mean(g.mul(ce, constant_vec(g, weights, "awr_weights")));
    return out;
}

template LossNodes build_ilql_loss<float>(Graph<float>&, const ForwardNodes&,
                                          const ActionBatch&, const ValueTargets&,
                                          const ValueLossConfig&);
template LossNodes build_ilql_loss<double>(Graph<double>&, const ForwardNodes&,
                                           const ActionBatch&, const ValueTargets&,
                                           const ValueLossConfig&);
template LossNodes build_per_token_cql_loss<float>(Graph<float>&, const ForwardNodes&,
                                                   const ActionBatch&, const ValueTargets&,
                                                   const ValueLossConfig&);
template LossNodes build_per_token_cql_loss<double>(Graph<double>&, const ForwardNodes&,
                                                    const ActionBatch&,
                                                    const ValueTargets&,
                                                    const ValueLossConfig&);
template LossNodes build_psi_loss<float>(Graph<float>&, const ForwardNodes&,
                                         const ActionBatch&, const ValueTargets&,
                                         std::span<const float>, const PsiLossConfig&);
template LossNodes build_psi_loss<double>(Graph<double>&, const ForwardNodes&,
                                          const ActionBatch&, const ValueTargets&,
                                          std::span<const float>, const PsiLossConfig&);
template LossNodes build_bc_loss<float>(Graph<float>&, const ForwardNodes&,
                                        const ActionBatch&);
template LossNodes build_bc_loss<double>(Graph<double>&, const ForwardNodes&,
                                         const ActionBatch&);
template LossNodes build_awr_loss<float>(Graph<float>&, const ForwardNodes&,
                                         const ActionBatch&, std::span<const float>);
template LossNodes build_awr_loss<double>(Graph<double>&, const ForwardNodes&,
                                          const ActionBatch&, std::span<const float>);

}  // namespace ilql
