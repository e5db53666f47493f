#include "ilql/model.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ilql {

void ModelConfig::validate() const {
    require(vocab_size > 0, ErrorKind::domain, "model: vocab_size must be positive");
    require(n_layers > 0, ErrorKind::domain, "model: n_layers must be positive");
    require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, ErrorKind::domain,
            "model: d_model must be a positive multiple of n_heads");
    require(d_ff > 0, ErrorKind::domain, "model: d_ff must be positive");
    require(max_seq_len > 0, ErrorKind::domain, "model: max_seq_len must be positive");
    require(dropout >= 0.0 && dropout < 1.0, ErrorKind::domain,
            "model: dropout must lie in [0,1)");
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.vocab_size == b.vocab_size && a.n_layers == b.n_layers &&
           a.d_model == b.d_model && a.n_heads == b.n_heads && a.d_ff == b.d_ff &&
           a.max_seq_len == b.max_seq_len && a.dropout == b.dropout && a.head == b.head;
}

Tensor<float>& Weights::at(const std::string& name) {
    auto it = params.find(name);
    require(it != params.end(), ErrorKind::state, "unknown parameter '" + name + "'");
    return it->second;
}

const Tensor<float>& Weights::at(const std::string& name) const {
    auto it = params.find(name);
    require(it != params.end(), ErrorKind::state, "unknown parameter '" + name + "'");
    return it->second;
}

void Weights::add(const std::string& name, Tensor<float> t) {
    require(!params.count(name), ErrorKind::state, "duplicate parameter '" + name + "'");
    order.push_back(name);
    params.emplace(name, std::move(t));
}

namespace {

std::vector<std::pair<std::string, Shape>> param_spec(const ModelConfig& cfg) {
    int64_t d = cfg.d_model;
    std::vector<std::pair<std::string, Shape>> out;
    out.push_back({"wte", {cfg.vocab_size, d}});
    out.push_back({"wpe", {cfg.max_seq_len, d}});
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        std::string p = "blocks." + std::to_string(i) + ".";
        out.push_back({p + "ln1.g", {d}});
        out.push_back({p + "ln1.b", {d}});
        out.push_back({p + "attn.w_qkv", {d, 3 * d}});
        out.push_back({p + "attn.b_qkv", {3 * d}});
        out.push_back({p + "attn.w_o", {d, d}});
        out.push_back({p + "attn.b_o", {d}});
        out.push_back({p + "ln2.g", {d}});
        out.push_back({p + "ln2.b", {d}});
        out.push_back({p + "mlp.w_fc", {d, cfg.d_ff}});
        out.push_back({p + "mlp.b_fc", {cfg.d_ff}});
        out.push_back({p + "mlp.w_proj", {cfg.d_ff, d}});
        out.push_back({p + "mlp.b_proj", {d}});
    }
    out.push_back({"lnf.g", {d}});
    out.push_back({"lnf.b", {d}});
    if (cfg.head == HeadKind::lm) {
        out.push_back({"head.lm.w", {d, cfg.vocab_size}});
    } else {
        for (const char* h : {"q1", "q2", "v"}) {
            std::string p = std::string("head.") + h + ".";
            int64_t width = std::strcmp(h, "v") == 0 ? 1 : cfg.vocab_size;
            out.push_back({p + "w_fc", {d, 2 * d}});
            out.push_back({p + "b_fc", {2 * d}});
            out.push_back({p + "w_out", {2 * d, width}});
            out.push_back({p + "b_out", {width}});
        }
    }
    return out;
}

bool is_gain(const std::string& name) { return name.ends_with(".g"); }
bool is_bias(const std::string& name) {
    return name.ends_with(".b") || name.find(".b_") != std::string::npos;
}

}  // namespace

Weights init_weights(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Weights w;
    w.config = cfg;
    Rng rng(seed);
    for (auto& [name, shape] : param_spec(cfg)) {
        Tensor<float> t(shape);
        if (is_gain(name)) {
            for (auto& x : t.data) x = 1.0f;
        } else if (is_bias(name)) {
            // zeros
        } else {
            for (auto& x : t.data) x = static_cast<float>(rng.normal() * 0.02);
        }
        w.add(name, std::move(t));
    }
    return w;
}

void polyak_update(Weights& target, const Weights& online, double rate) {
    require(rate >= 0.0 && rate <= 1.0, ErrorKind::domain,
            "polyak: rate must lie in [0,1], got " + std::to_string(rate));
    require(target.order == online.order, ErrorKind::state,
            "polyak: parameter sets differ");
    float a = static_cast<float>(1.0 - rate);
    float b = static_cast<float>(rate);
    for (const std::string& name : target.order) {
        Tensor<float>& t = target.at(name);
        const Tensor<float>& o = online.at(name);
        require(shape_eq(t.shape, o.shape), ErrorKind::shape,
                "polyak: shape mismatch for '" + name + "'");
        for (int64_t i = 0; i < t.numel(); ++i) t.data[i] = a * t.data[i] + b * o.data[i];
    }
}

Tensor<float> min_target_q(const Tensor<float>& q1, const Tensor<float>& q2) {
    require(shape_eq(q1.shape, q2.shape), ErrorKind::shape,
            "min_target_q: shapes " + shape_str(q1.shape) + " vs " + shape_str(q2.shape));
    Tensor<float> out(q1.shape);
    for (int64_t i = 0; i < q1.numel(); ++i)
        out.data[i] = q1.data[i] < q2.data[i] ? q1.data[i] : q2.data[i];
    return out;
}

void TokenBatch::add_episode(std::span<const int> toks) {
    require(!toks.empty(), ErrorKind::domain, "batch: empty episode");
    for (size_t i = 0; i < toks.size(); ++i) {
        tokens.push_back(toks[i]);
        positions.push_back(static_cast<int64_t>(i));
    }
    offsets.push_back(offsets.back() + static_cast<int64_t>(toks.size()));
}

template <typename T>
ForwardNodes build_forward(Graph<T>& g, const ModelConfig& cfg, const TokenBatch& batch,
                           bool training, Rng* rng) {
    cfg.validate();
    require(batch.episodes() > 0, ErrorKind::domain, "forward: empty batch");
    for (int64_t b = 0; b < batch.episodes(); ++b) {
        int64_t len = batch.offsets[b + 1] - batch.offsets[b];
        require(len <= cfg.max_seq_len, ErrorKind::domain,
                "forward: episode of " + std::to_string(len) +
                    " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    bool drop = training && cfg.dropout > 0.0;
    require(!drop || rng != nullptr, ErrorKind::state,
            "forward: training mode needs an rng for dropout");

    std::unordered_map<std::string, NodeId> in;
    for (auto& [name, shape] : param_spec(cfg)) in[name] = g.input(name, shape);

    int64_t d = cfg.d_model, dh = cfg.head_dim();
    auto dropout = [&](NodeId x) -> NodeId {
        if (!drop) return x;
        Tensor<T> mask(g.shape_of(x));
        T scale = static_cast<T>(1.0 / (1.0 - cfg.dropout));
        for (auto& m : mask.data)
            m = rng->uniform01() >= cfg.dropout ? scale : T(0);
        return g.mul(x, g.constant(std::move(mask), "dropout"));
    };
    auto ln_affine = [&](NodeId x, const std::string& prefix) {
        return g.add(g.mul(g.layernorm(x), in[prefix + ".g"]), in[prefix + ".b"]);
    };

    // Causal masks shared across layers/heads for each episode length.
    std::unordered_map<int64_t, NodeId> causal;
    auto causal_mask = [&](int64_t len) {
        auto it = causal.find(len);
        if (it != causal.end()) return it->second;
        Tensor<T> m(Shape{len, len});
        for (int64_t i = 0; i < len; ++i)
            for (int64_t j = i + 1; j < len; ++j) m.at(i, j) = T(-1e9);
        NodeId id = g.constant(std::move(m), "causal");
        causal.emplace(len, id);
        return id;
    };

    NodeId h = g.add(g.embed(in["wte"], batch.tokens, "tok_emb"),
                     g.embed(in["wpe"], batch.positions, "pos_emb"));
    h = dropout(h);

    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int64_t layer = 0; layer < cfg.n_layers; ++layer) {
        std::string p = "blocks." + std::to_string(layer) + ".";
        NodeId x = ln_affine(h, p + "ln1");
        NodeId qkv = g.add(g.matmul(x, in[p + "attn.w_qkv"]), in[p + "attn.b_qkv"]);
        std::vector<NodeId> ep_ctx;
        for (int64_t b = 0; b < batch.episodes(); ++b) {
            int64_t off = batch.offsets[b], len = batch.offsets[b + 1] - off;
            std::vector<int64_t> rows(static_cast<size_t>(len));
            for (int64_t i = 0; i < len; ++i) rows[static_cast<size_t>(i)] = off + i;
            NodeId eq = g.gather_rows(qkv, std::move(rows));
            std::vector<NodeId> heads;
            for (int64_t k = 0; k < cfg.n_heads; ++k) {
                NodeId q = g.slice_cols(eq, k * dh, dh);
                NodeId key = g.slice_cols(eq, d + k * dh, dh);
                NodeId val = g.slice_cols(eq, 2 * d + k * dh, dh);
                NodeId scores = g.scaled(g.matmul(q, key, false, true), inv_sqrt_dh);
                NodeId probs = g.softmax(g.add(scores, causal_mask(len)));
                heads.push_back(g.matmul(probs, val));
            }
            ep_ctx.push_back(g.concat_cols(heads));
        }
        NodeId ctx = g.concat_rows(ep_ctx);
        NodeId proj = g.add(g.matmul(ctx, in[p + "attn.w_o"]), in[p + "attn.b_o"]);
        h = g.add(h, dropout(proj));

        NodeId x2 = ln_affine(h, p + "ln2");
        NodeId fc = g.gelu(g.add(g.matmul(x2, in[p + "mlp.w_fc"]), in[p + "mlp.b_fc"]));
        NodeId mp = g.add(g.matmul(fc, in[p + "mlp.w_proj"]), in[p + "mlp.b_proj"]);
        h = g.add(h, dropout(mp));
    }

    ForwardNodes out;
    out.trunk = ln_affine(h, "lnf");
    if (cfg.head == HeadKind::lm) {
        out.lm_logits = g.matmul(out.trunk, in["head.lm.w"], false, false, "lm_logits");
    } else {
        auto mlp_head = [&](const std::string& name) {
            std::string p = "head." + name + ".";
            NodeId hid = g.relu(g.add(g.matmul(out.trunk, in[p + "w_fc"]), in[p + "b_fc"]));
            return g.add(g.matmul(hid, in[p + "w_out"]), in[p + "b_out"]);
        };
        out.q1 = mlp_head("q1");
        out.q2 = mlp_head("q2");
        out.v = g.reshape(mlp_head("v"), {batch.total()});
    }
    return out;
}

template ForwardNodes build_forward<float>(Graph<float>&, const ModelConfig&,
                                           const TokenBatch&, bool, Rng*);
template ForwardNodes build_forward<double>(Graph<double>&, const ModelConfig&,
                                            const TokenBatch&, bool, Rng*);

Graph<float>::Bindings bind_weights(const Weights& w) {
    Graph<float>::Bindings b;
    for (auto& [name, t] : w.params) b[name] = &t;
    return b;
}

template <typename T>
std::unordered_map<std::string, Tensor<T>> convert_weights(const Weights& w) {
    std::unordered_map<std::string, Tensor<T>> out;
    for (auto& [name, t] : w.params) {
        Tensor<T> c(t.shape);
        for (int64_t i = 0; i < t.numel(); ++i) c.data[i] = static_cast<T>(t.data[i]);
        out.emplace(name, std::move(c));
    }
    return out;
}

template std::unordered_map<std::string, Tensor<float>> convert_weights<float>(
    const Weights&);
template std::unordered_map<std::string, Tensor<double>> convert_weights<double>(
    const Weights&);

namespace {

inline float gelu_ref(float x) {
    const float c = 0.7978845608028654f;
    float u = c * (x + 0.044715f * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

void ln_affine_rows(Tensor<float>& x, const Tensor<float>& gain, const Tensor<float>& bias) {
    int64_t rows = x.shape[0], d = x.shape[1];
    for (int64_t i = 0; i < rows; ++i) {
        float* r = x.data.data() + i * d;
        float mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += r[j];
        mean /= static_cast<float>(d);
        float var = 0;
        for (int64_t j = 0; j < d; ++j) {
            float dx = r[j] - mean;
            var += dx * dx;
        }
        var /= static_cast<float>(d);
        float rstd = 1.0f / std::sqrt(var + 1e-5f);
        for (int64_t j = 0; j < d; ++j)
            r[j] = (r[j] - mean) * rstd * gain.data[j] + bias.data[j];
    }
}

// x [rows, in] -> [rows, out] through w [in, out] plus bias.
Tensor<float> linear(const Tensor<float>& x, const Tensor<float>& w,
                     const Tensor<float>* bias) {
    Tensor<float> out(Shape{x.shape[0], w.shape[1]});
    gemm<float>(false, false, x.shape[0], w.shape[1], x.shape[1], x.data.data(),
                w.data.data(), out.data.data());
    if (bias)
        for (int64_t i = 0; i < out.shape[0]; ++i)
            for (int64_t j = 0; j < out.shape[1]; ++j) out.at(i, j) += bias->data[j];
    return out;
}

Tensor<float> trunk_forward(const Weights& w, std::span<const int> tokens) {
    const ModelConfig& cfg = w.config;
    int64_t t = static_cast<int64_t>(tokens.size());
    require(t > 0, ErrorKind::domain, "forward: empty token sequence");
    require(t <= cfg.max_seq_len, ErrorKind::domain,
            "forward: sequence of " + std::to_string(t) + " tokens exceeds max_seq_len " +
                std::to_string(cfg.max_seq_len));
    int64_t d = cfg.d_model, dh = cfg.head_dim();
    const Tensor<float>& wte = w.at("wte");
    const Tensor<float>& wpe = w.at("wpe");
    for (int tok : tokens)
        require(tok >= 0 && tok < cfg.vocab_size, ErrorKind::domain,
                "forward: token " + std::to_string(tok) + " outside vocab");

    Tensor<float> h(Shape{t, d});
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < d; ++j)
            h.at(i, j) = wte.at(tokens[static_cast<size_t>(i)], j) + wpe.at(i, j);

    float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<float> probs(static_cast<size_t>(t));
    for (int64_t layer = 0; layer < cfg.n_layers; ++layer) {
        std::string p = "blocks." + std::to_string(layer) + ".";
        Tensor<float> x = h;
        ln_affine_rows(x, w.at(p + "ln1.g"), w.at(p + "ln1.b"));
        Tensor<float> qkv = linear(x, w.at(p + "attn.w_qkv"), &w.at(p + "attn.b_qkv"));
        Tensor<float> ctx(Shape{t, d});
        for (int64_t k = 0; k < cfg.n_heads; ++k) {
            int64_t qo = k * dh, ko = d + k * dh, vo = 2 * d + k * dh;
            for (int64_t i = 0; i < t; ++i) {
                // Causal attention: row i sees positions 0..i only.
                float m = -INFINITY;
                for (int64_t j = 0; j <= i; ++j) {
                    float s = 0;
                    for (int64_t c = 0; c < dh; ++c)
                        s += qkv.at(i, qo + c) * qkv.at(j, ko + c);
                    probs[static_cast<size_t>(j)] = s * inv_sqrt_dh;
                    if (probs[static_cast<size_t>(j)] > m) m = probs[static_cast<size_t>(j)];
                }
                float z = 0;
                for (int64_t j = 0; j <= i; ++j) {
                    probs[static_cast<size_t>(j)] = std::exp(probs[static_cast<size_t>(j)] - m);
                    z += probs[static_cast<size_t>(j)];
                }
                for (int64_t c = 0; c < dh; ++c) {
                    float acc = 0;
                    for (int64_t j = 0; j <= i; ++j)
                        acc += probs[static_cast<size_t>(j)] * qkv.at(j, vo + c);
                    ctx.at(i, qo + c) = acc / z;
                }
            }
        }
        Tensor<float> proj = linear(ctx, w.at(p + "attn.w_o"), &w.at(p + "attn.b_o"));
        for (int64_t i = 0; i < h.numel(); ++i) h.data[i] += proj.data[i];

        Tensor<float> x2 = h;
        ln_affine_rows(x2, w.at(p + "ln2.g"), w.at(p + "ln2.b"));
        Tensor<float> fc = linear(x2, w.at(p + "mlp.w_fc"), &w.at(p + "mlp.b_fc"));
        for (auto& v : fc.data) v = gelu_ref(v);
        Tensor<float> mp = linear(fc, w.at(p + "mlp.w_proj"), &w.at(p + "mlp.b_proj"));
        for (int64_t i = 0; i < h.numel(); ++i) h.data[i] += mp.data[i];
    }
    ln_affine_rows(h, w.at("lnf.g"), w.at("lnf.b"));
    return h;
}

Tensor<float> mlp_head_forward(const Weights& w, const Tensor<float>& trunk,
                               const std::string& name) {
    std::string p = "head." + name + ".";
    Tensor<float> hid = linear(trunk, w.at(p + "w_fc"), &w.at(p + "b_fc"));
    for (auto& v : hid.data)
        if (v < 0) v = 0;
    return linear(hid, w.at(p + "w_out"), &w.at(p + "b_out"));
}

}  // namespace

LmForward forward_lm(const Weights& w, std::span<const int> tokens) {
    require(w.config.head == HeadKind::lm, ErrorKind::state,
            "forward_lm: checkpoint has no lm head");
    Tensor<float> trunk = trunk_forward(w, tokens);
    return {linear(trunk, w.at("head.lm.w"), nullptr)};
}

namespace {

// out[j] += sum_k x[k] * w[k, j], accumulated in ascending k like the gemm kernel.
void row_linear(const float* x, const Tensor<float>& w, const Tensor<float>* bias,
                float* out) {
    const int64_t in = w.shape[0], n = w.shape[1];
    for (int64_t j = 0; j < n; ++j) out[j] = bias ? bias->data[static_cast<size_t>(j)] : 0.0f;
    for (int64_t k = 0; k < in; ++k) {
        const float xk = x[k];
        const float* wrow = w.data.data() + k * n;
        for (int64_t j = 0; j < n; ++j) out[j] += xk * wrow[j];
    }
}

void ln_affine_row(std::vector<float>& x, const Tensor<float>& gain,
                   const Tensor<float>& bias) {
    const auto d = static_cast<int64_t>(x.size());
    float mean = 0;
    for (float v : x) mean += v;
    mean /= static_cast<float>(d);
    float var = 0;
    for (float v : x) {
        float dx = v - mean;
        var += dx * dx;
    }
    var /= static_cast<float>(d);
    float rstd = 1.0f / std::sqrt(var + 1e-5f);
    for (int64_t j = 0; j < d; ++j)
        x[static_cast<size_t>(j)] = (x[static_cast<size_t>(j)] - mean) * rstd *
                                        gain.data[static_cast<size_t>(j)] +
                                    bias.data[static_cast<size_t>(j)];
}

}  // namespace

IncrementalForward::IncrementalForward(const Weights& w) : w_(&w) {
    w.config.validate();
    k_cache_.resize(static_cast<size_t>(w.config.n_layers));
    v_cache_.resize(static_cast<size_t>(w.config.n_layers));
}

void IncrementalForward::reset() {
    n_ = 0;
    for (auto& c : k_cache_) c.clear();
    for (auto& c : v_cache_) c.clear();
    last_.clear();
}

void IncrementalForward::push(int token) {
    const ModelConfig& cfg = w_->config;
    require(n_ < cfg.max_seq_len, ErrorKind::domain,
            "forward: sequence of " + std::to_string(n_ + 1) +
                " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    require(token >= 0 && token < cfg.vocab_size, ErrorKind::domain,
            "forward: token " + std::to_string(token) + " outside vocab");
    const int64_t d = cfg.d_model, dh = cfg.head_dim();
    const int64_t pos = n_;

    std::vector<float> h(static_cast<size_t>(d));
    for (int64_t j = 0; j < d; ++j)
        h[static_cast<size_t>(j)] = w_->at("wte").at(token, j) + w_->at("wpe").at(pos, j);

    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<float> x, qkv(static_cast<size_t>(3 * d)), ctx(static_cast<size_t>(d));
    std::vector<float> probs(static_cast<size_t>(pos) + 1);
    std::vector<float> tmp(static_cast<size_t>(d));
    std::vector<float> fc(static_cast<size_t>(cfg.d_ff));
    for (int64_t layer = 0; layer < cfg.n_layers; ++layer) {
        std::string p = "blocks." + std::to_string(layer) + ".";
        x = h;
        ln_affine_row(x, w_->at(p + "ln1.g"), w_->at(p + "ln1.b"));
        row_linear(x.data(), w_->at(p + "attn.w_qkv"), &w_->at(p + "attn.b_qkv"), qkv.data());

        auto& kc = k_cache_[static_cast<size_t>(layer)];
        auto& vc = v_cache_[static_cast<size_t>(layer)];
        kc.insert(kc.end(), qkv.begin() + d, qkv.begin() + 2 * d);
        vc.insert(vc.end(), qkv.begin() + 2 * d, qkv.begin() + 3 * d);

        for (int64_t k = 0; k < cfg.n_heads; ++k) {
            const int64_t qo = k * dh, ho = k * dh;
            float m = -INFINITY;
            for (int64_t j = 0; j <= pos; ++j) {
                const float* krow = kc.data() + j * d + ho;
                float s = 0;
                for (int64_t c = 0; c < dh; ++c) s += qkv[static_cast<size_t>(qo + c)] * krow[c];
                probs[static_cast<size_t>(j)] = s * inv_sqrt_dh;
                if (probs[static_cast<size_t>(j)] > m) m = probs[static_cast<size_t>(j)];
            }
            float z = 0;
            for (int64_t j = 0; j <= pos; ++j) {
                probs[static_cast<size_t>(j)] = std::exp(probs[static_cast<size_t>(j)] - m);
                z += probs[static_cast<size_t>(j)];
            }
            for (int64_t c = 0; c < dh; ++c) {
                float acc = 0;
                for (int64_t j = 0; j <= pos; ++j)
                    acc += probs[static_cast<size_t>(j)] * vc[static_cast<size_t>(j * d + ho + c)];
                ctx[static_cast<size_t>(ho + c)] = acc / z;
            }
        }
        row_linear(ctx.data(), w_->at(p + "attn.w_o"), &w_->at(p + "attn.b_o"), tmp.data());
        for (int64_t j = 0; j < d; ++j) h[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];

        x = h;
        ln_affine_row(x, w_->at(p + "ln2.g"), w_->at(p + "ln2.b"));
        row_linear(x.data(), w_->at(p + "mlp.w_fc"), &w_->at(p + "mlp.b_fc"), fc.data());
        for (float& v : fc) v = gelu_ref(v);
        row_linear(fc.data(), w_->at(p + "mlp.w_proj"), &w_->at(p + "mlp.b_proj"), tmp.data());
        for (int64_t j = 0; j < d; ++j) h[static_cast<size_t>(j)] += tmp[static_cast<size_t>(j)];
    }
    last_ = std::move(h);
    ++n_;
}

Tensor<float> IncrementalForward::lm_logits_last() const {
    require(w_->config.head == HeadKind::lm, ErrorKind::state,
            "forward_lm: checkpoint has no lm head");
    require(n_ > 0, ErrorKind::state, "forward: no tokens pushed");
    std::vector<float> x = last_;
    ln_affine_row(x, w_->at("lnf.g"), w_->at("lnf.b"));
    Tensor<float> out(Shape{w_->config.vocab_size});
    row_linear(x.data(), w_->at("head.lm.w"), nullptr, out.data.data());
    return out;
}

IncrementalForward::ValueRow IncrementalForward::values_last() const {
    require(w_->config.head == HeadKind::value, ErrorKind::state,
            "forward_value: checkpoint has no value heads");
    require(n_ > 0, ErrorKind::state, "forward: no tokens pushed");
    std::vector<float> x = last_;
    ln_affine_row(x, w_->at("lnf.g"), w_->at("lnf.b"));
    auto head = [&](const std::string& name, int64_t out_dim, float* out) {
        std::string p = "head." + name + ".";
        std::vector<float> hid(static_cast<size_t>(2 * w_->config.d_model));
        row_linear(x.data(), w_->at(p + "w_fc"), &w_->at(p + "b_fc"), hid.data());
        for (float& v : hid)
            if (v < 0) v = 0;
        const Tensor<float>& w_out = w_->at(p + "w_out");
        require(w_out.shape[1] == out_dim, ErrorKind::shape, "head width mismatch");
        row_linear(hid.data(), w_out, &w_->at(p + "b_out"), out);
    };
    ValueRow row;
    row.q1 = Tensor<float>(Shape{w_->config.vocab_size});
    row.q2 = Tensor<float>(Shape{w_->config.vocab_size});
    head("q1", w_->config.vocab_size, row.q1.data.data());
    head("q2", w_->config.vocab_size, row.q2.data.data());
    float v = 0;
    head("v", 1, &v);
    row.v = v;
    return row;
}

ValueForward forward_value(const Weights& w, std::span<const int> tokens) {
    require(w.config.head == HeadKind::value, ErrorKind::state,
            "forward_value: checkpoint has no value heads");
    Tensor<float> trunk = trunk_forward(w, tokens);
    ValueForward out;
    out.q1 = mlp_head_forward(w, trunk, "q1");
    out.q2 = mlp_head_forward(w, trunk, "q2");
    Tensor<float> v = mlp_head_forward(w, trunk, "v");
    out.v = Tensor<float>(Shape{trunk.shape[0]});
    for (int64_t i = 0; i < trunk.shape[0]; ++i) out.v.data[i] = v.at(i, 0);
    return out;
}

namespace {

std::string param_file_name(const std::string& name) {
    std::string f = name;
    for (char& c : f)
        if (c == '.') c = '_';
    return f + ".bin";
}

json config_to_json(const ModelConfig& cfg) {
    return json{{"vocab_size", cfg.vocab_size}, {"n_layers", cfg.n_layers},
                {"d_model", cfg.d_model},       {"n_heads", cfg.n_heads},
                {"d_ff", cfg.d_ff},             {"max_seq_len", cfg.max_seq_len},
                {"dropout", cfg.dropout},
                {"head", cfg.head == HeadKind::lm ? "lm" : "value"}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int64_t>();
    cfg.n_layers = j.at("n_layers").get<int64_t>();
    cfg.d_model = j.at("d_model").get<int64_t>();
    cfg.n_heads = j.at("n_heads").get<int64_t>();
    cfg.d_ff = j.at("d_ff").get<int64_t>();
    cfg.max_seq_len = j.at("max_seq_len").get<int64_t>();
    cfg.dropout = j.at("dropout").get<double>();
    std::string head = j.at("head").get<std::string>();
    require(head == "lm" || head == "value", ErrorKind::io,
            "checkpoint: unknown head kind '" + head + "'");
    cfg.head = head == "lm" ? HeadKind::lm : HeadKind::value;
    cfg.validate();
    return cfg;
}

}  // namespace

void save_checkpoint(const std::string& dir, const Weights& w, const CheckpointMeta& meta) {
    fs::create_directories(dir);
    json params = json::array();
    for (const std::string& name : w.order) {
        const Tensor<float>& t = w.at(name);
        std::string file = param_file_name(name);
        params.push_back({{"name", name}, {"shape", t.shape}, {"file", file}});
        std::ofstream out(fs::path(dir) / file, std::ios::binary);
        require(out.good(), ErrorKind::io, "checkpoint: cannot write " + file);
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        require(out.good(), ErrorKind::io, "checkpoint: short write on " + file);
    }
    json manifest{{"format_version", 1},
                  {"model", config_to_json(w.config)},
                  {"seed", meta.seed},
                  {"step", meta.step},
                  {"params", params}};
    manifest["train_config"] =
        meta.train_config_json.empty() ? json() : json::parse(meta.train_config_json);
    std::ofstream out(fs::path(dir) / "manifest.json");
    require(out.good(), ErrorKind::io, "checkpoint: cannot write manifest.json in " + dir);
    out << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    require(in.good(), ErrorKind::io, "checkpoint: cannot open " + dir + "/manifest.json");
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        fail(ErrorKind::io, "checkpoint: bad manifest.json: " + std::string(e.what()));
    }
    require(manifest.at("format_version").get<int>() == 1, ErrorKind::io,
            "checkpoint: unsupported format_version");
    LoadedCheckpoint lc;
    ModelConfig cfg = config_from_json(manifest.at("model"));
    lc.weights.config = cfg;
    lc.meta.seed = manifest.value("seed", uint64_t{0});
    lc.meta.step = manifest.value("step", int64_t{0});
    if (manifest.contains("train_config") && !manifest["train_config"].is_null())
        lc.meta.train_config_json = manifest["train_config"].dump();

    std::unordered_map<std::string, Shape> listed;
    std::unordered_map<std::string, std::string> files;
    for (const json& p : manifest.at("params")) {
        std::string name = p.at("name").get<std::string>();
        listed[name] = p.at("shape").get<Shape>();
        files[name] = p.at("file").get<std::string>();
    }
    for (auto& [name, shape] : param_spec(cfg)) {
        auto it = listed.find(name);
        require(it != listed.end(), ErrorKind::io,
                "checkpoint: parameter '" + name + "' missing from manifest");
        require(shape_eq(it->second, shape), ErrorKind::io,
                "checkpoint: parameter '" + name + "' has shape " + shape_str(it->second) +
                    ", expected " + shape_str(shape));
        std::ifstream pf(fs::path(dir) / files[name], std::ios::binary | std::ios::ate);
        require(pf.good(), ErrorKind::io,
                "checkpoint: missing file for parameter '" + name + "'");
        std::streamsize bytes = pf.tellg();
        Tensor<float> t(shape);
        require(bytes == static_cast<std::streamsize>(t.data.size() * sizeof(float)),
                ErrorKind::io, "checkpoint: parameter '" + name + "' has " +
                                   std::to_string(bytes) + " bytes, expected " +
                                   std::to_string(t.data.size() * sizeof(float)));
        pf.seekg(0);
        pf.read(reinterpret_cast<char*>(t.data.data()), bytes);
        require(pf.good(), ErrorKind::io, "checkpoint: short read on parameter '" + name + "'");
        lc.weights.add(name, std::move(t));
    }
    require(listed.size() == lc.weights.order.size(), ErrorKind::io,
            "checkpoint: manifest lists unknown extra parameters");
    return lc;
}

}  // namespace ilql
