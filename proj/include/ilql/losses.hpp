#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ilql/graph.hpp"
#include "ilql/model.hpp"
#include "ilql/wordle.hpp"

namespace ilql {

// A minibatch of episodes plus the bookkeeping for their agent-action positions.
// Row indices are global rows into the concatenated trunk output: the history row
// of an action is the row of the token right before it, and the successor row is
// the action's own row (mid-guess) or the row of the turn's final color token.
struct ActionBatch {
    TokenBatch tokens;
    std::vector<int64_t> hist_rows;
    std::vector<int64_t> succ_rows;  // -1 when the action ends the episode
    std::vector<int64_t> actions;
    std::vector<float> rewards;

    int64_t count() const { return static_cast<int64_t>(actions.size()); }
};

ActionBatch make_action_batch(const std::vector<wordle::Trajectory>& data,
                              std::span<const int64_t> ids);

// Bootstrap quantities evaluated outside the autodiff graph; every loss treats
// them as constants. Successor entries are zero for terminal actions.
struct ValueTargets {
    std::vector<float> tgt_min_q;   // min of the target Q heads at (h_i, a_i)
    std::vector<float> tgt_mean_q;  // mean of the target Q heads at (h_i, a_i)
    std::vector<float> v_next;      // online V(h_{i+1}); empty unless online given
    std::vector<float> max_next;    // max over action_set of the min-target-Q row
    std::vector<float> lse_next;    // log-sum-exp over action_set of that row
};

// `online` may be null when no loss needs V(h_{i+1}). action_set lists the token
// ids the bootstrap max / log-sum-exp range over (the agent's legal actions).
ValueTargets compute_value_targets(const ActionBatch& batch, const Weights& target,
                                   const Weights* online,
                                   std::span<const int64_t> action_set);

// log pi_beta(a_i | h_i) under a frozen behavior model, one entry per action.
std::vector<float> behavior_log_probs(const Weights& lm, const ActionBatch& batch);

// Clipped advantage weights min(exp(beta * (min(Q1,Q2) - V)), w_max) from a frozen
// value checkpoint, one entry per action.
std::vector<float> awr_weights(const Weights& value, const ActionBatch& batch,
                               double beta, double w_max);

// Component breakdown; -1 marks terms a loss does not have. All present terms are
// scalars and total is their sum.
struct LossNodes {
    NodeId total = -1;
    NodeId q_term = -1;    // TD / Huber fitting term
    NodeId v_term = -1;    // expectile value-fitting term
    NodeId cql_term = -1;  // conservatism term, reported with its weight applied
};

struct ValueLossConfig {
    double tau = 0.8;     // 0.5 recovers the single-step objective
    double alpha = 1e-4;  // conservatism weight
    double gamma = 0.99;
};

struct PsiLossConfig {
    double reward_scale = 1.0;  // divides the reward inside the residual
    double huber_delta = 1.0;
    double gamma = 0.99;
};

// Mean over agent-action positions of: squared TD error against r + gamma*V(h_{i+1})
// for both Q heads (summed), the tau-expectile of min-target-Q minus V, and the
// alpha-weighted NLL of the action under each Q head's softmax (head-averaged).
template <typename T>
LossNodes build_ilql_loss(Graph<T>& g, const ForwardNodes& f, const ActionBatch& batch,
                          const ValueTargets& targets, const ValueLossConfig& cfg);

// Same shape as the combined loss above, but the bootstrap is the hard max of the
// min-target-Q row at the successor, and V fits the head-mean at expectile 0.5.
template <typename T>
LossNodes build_per_token_cql_loss(Graph<T>& g, const ForwardNodes& f,
                                   const ActionBatch& batch, const ValueTargets& targets,
                                   const ValueLossConfig& cfg);

// Huber (head-averaged) of r/c + log pi_beta + gamma*logsumexp(min-target-Q row)
// minus Q, plus the same expectile-0.5 value fit used by the hard-max loss.
template <typename T>
LossNodes build_psi_loss(Graph<T>& g, const ForwardNodes& f, const ActionBatch& batch,
                         const ValueTargets& targets, std::span<const float> log_pi_beta,
                         const PsiLossConfig& cfg);

// Mean cross-entropy of the next-token logits at agent-action positions only.
template <typename T>
LossNodes build_bc_loss(Graph<T>& g, const ForwardNodes& f, const ActionBatch& batch);

// Advantage-weighted cross-entropy; weights come from awr_weights.
template <typename T>
LossNodes build_awr_loss(Graph<T>& g, const ForwardNodes& f, const ActionBatch& batch,
                         std::span<const float> weights);

}  // namespace ilql
