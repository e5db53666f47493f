#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ilql/graph.hpp"
#include "ilql/rng.hpp"
#include "ilql/tensor.hpp"

namespace ilql {

enum class HeadKind { lm, value };

// Pre-norm GPT blocks with learned absolute positions. Defaults are the desk-scale
// benchmark model; vocab 30 covers letters + colors + BOS.
struct ModelConfig {
    int64_t vocab_size = 30;
    int64_t n_layers = 4;
    int64_t d_model = 64;
    int64_t n_heads = 4;
    int64_t d_ff = 256;
    int64_t max_seq_len = 64;
    double dropout = 0.1;
    HeadKind head = HeadKind::lm;

    void validate() const;
    int64_t head_dim() const { return d_model / n_heads; }
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

// Named parameters in a fixed canonical order (creation order == io order == update
// order). The LM head is a single linear layer; value heads are two-layer ReLU MLPs
// with hidden width 2*d_model, twin Q heads plus a scalar V head.
struct Weights {
    ModelConfig config;
    std::vector<std::string> order;
    std::unordered_map<std::string, Tensor<float>> params;

    Tensor<float>& at(const std::string& name);
    const Tensor<float>& at(const std::string& name) const;
    void add(const std::string& name, Tensor<float> t);
};

Weights init_weights(const ModelConfig& cfg, uint64_t seed);

// target <- (1 - rate) * target + rate * online, for every parameter.
void polyak_update(Weights& target, const Weights& online, double rate);

// Elementwise min of the twin Q outputs.
Tensor<float> min_target_q(const Tensor<float>& q1, const Tensor<float>& q2);

// Episodes concatenated back to back; no padding rows anywhere.
struct TokenBatch {
    std::vector<int64_t> tokens;
    std::vector<int64_t> positions;
    std::vector<int64_t> offsets{0};  // episode start rows; back() == total()

    void add_episode(std::span<const int> toks);
    int64_t total() const { return offsets.back(); }
    int64_t episodes() const { return static_cast<int64_t>(offsets.size()) - 1; }
};

struct ForwardNodes {
    NodeId trunk = -1;      // [N, d_model] after the final layernorm
    NodeId lm_logits = -1;  // [N, vocab] (lm head)
    NodeId q1 = -1, q2 = -1;  // [N, vocab] (value head)
    NodeId v = -1;            // [N] (value head)
};

// Builds the differentiable forward over a ragged batch. training enables dropout
// masks drawn from rng (eval forwards pass training=false).
template <typename T>
ForwardNodes build_forward(Graph<T>& g, const ModelConfig& cfg, const TokenBatch& batch,
                           bool training = false, Rng* rng = nullptr);

// Bind graph inputs to the stored float parameters (no copies).
Graph<float>::Bindings bind_weights(const Weights& w);
// Materialize a typed copy for T != float graphs (64-bit verification).
template <typename T>
std::unordered_map<std::string, Tensor<T>> convert_weights(const Weights& w);

// Straight-line single-sequence forwards, eval mode. Written independently of the
// graph path; the two routes are held together by tests.
struct LmForward {
    Tensor<float> logits;  // [T, vocab]
};
struct ValueForward {
    Tensor<float> q1, q2;  // [T, vocab]
    Tensor<float> v;       // [T]
};
LmForward forward_lm(const Weights& w, std::span<const int> tokens);
ValueForward forward_value(const Weights& w, std::span<const int> tokens);

// Grow-only eval-mode forward with per-layer key/value caches, for rollouts where
// the history only ever extends. Agrees with forward_lm / forward_value on every
// prefix; pushing past max_seq_len is an error.
class IncrementalForward {
  public:
    explicit IncrementalForward(const Weights& w);

    void reset();
    void push(int token);
    int64_t size() const { return n_; }

    // Heads applied to the latest position only.
    Tensor<float> lm_logits_last() const;  // [vocab]
    struct ValueRow {
        Tensor<float> q1, q2;  // [vocab]
        float v = 0.0f;
    };
    ValueRow values_last() const;

  private:
    const Weights* w_;
    int64_t n_ = 0;
    std::vector<std::vector<float>> k_cache_, v_cache_;  // per layer, packed [n, d]
    std::vector<float> last_;                            // trunk row before the final norm
};

// Checkpoint directory: manifest.json plus one raw little-endian float32 file per
// parameter, in canonical order.
struct CheckpointMeta {
    uint64_t seed = 0;
    int64_t step = 0;
    std::string train_config_json;  // empty when not produced by training
};

void save_checkpoint(const std::string& dir, const Weights& w, const CheckpointMeta& meta);

struct LoadedCheckpoint {
    Weights weights;
    CheckpointMeta meta;
};
LoadedCheckpoint load_checkpoint(const std::string& dir);

}  // namespace ilql
