// End-to-end acceptance gate. Runs eight checks spanning the library and the CLI
// binary and prints exactly one PASS/FAIL line per check. Usage:
//
//   test_acceptance <path-to-ilql-cli>
//
// The in-process checks (gradients, oracle equivalence, extraction identities,
// retrofit soundness) link against the library directly; the benchmark checks
// (lava reproduction, method ordering, diversity trade-off, determinism) shell out
// to the CLI so the command-line surface is exercised end to end. Everything runs
// from a scratch directory next to the binary; artifacts are left behind for
// inspection.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ilql/datagen.hpp"
#include "ilql/decode.hpp"
#include "ilql/losses.hpp"
#include "ilql/model.hpp"
#include "ilql/rng.hpp"
#include "ilql/wordle.hpp"
#include "ilql/wordlist.hpp"

using namespace ilql;
using namespace ilql::wordle;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Benchmark constants (the 20-word mixture used by checks 4, 5, and 6).
// ---------------------------------------------------------------------------

constexpr uint64_t kVocabSeed = 9;     // 20-word sample of the built-in pool
constexpr uint64_t kDataSeed = 1;      // 5,000-episode mixture
constexpr int64_t kEpisodes = 5000;
constexpr double kBenchAlpha = 0.05;   // conservatism weight for both value arms
constexpr const char* kDecodeBeta = "8";  // extraction tilt for the paired eval
constexpr int64_t kEvalGames = 1024;
constexpr uint64_t kEvalSeed = 17;
constexpr int64_t kSweepGames = 512;
constexpr int64_t kDiversityGames = 500;
constexpr uint64_t kDiversitySeed = 23;

// Model and optimizer shared by every trained arm: the budget is fixed across
// algorithms so the comparisons are like for like.
const char* kBenchModel = R"({"vocab_size": 30, "n_layers": 2, "d_model": 32,
  "n_heads": 4, "d_ff": 64, "max_seq_len": 64, "dropout": 0.0, "head": "value"})";
constexpr const char* kBenchLr = "0.0003";
constexpr const char* kBenchBatch = "32";
constexpr const char* kBenchSteps = "3000";

// ---------------------------------------------------------------------------
// Harness plumbing.
// ---------------------------------------------------------------------------

std::string g_cli;
fs::path g_work;
int g_cmd_counter = 0;

struct Fail {
    std::string msg;
};

void require_that(bool ok, const std::string& msg) {
    if (!ok) throw Fail{msg};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    require_that(in.good(), "cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool files_equal(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

CliResult run_cli(const std::string& args) {
    fs::path out = g_work / ("cmd_" + std::to_string(g_cmd_counter) + ".out");
    fs::path err = g_work / ("cmd_" + std::to_string(g_cmd_counter) + ".err");
    ++g_cmd_counter;
    std::string cmd = '"' + g_cli + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                      err.string() + '"';
    int rc = std::system(cmd.c_str());
    CliResult r;
    r.code = (rc == -1) ? -1 : (WIFEXITED(rc) ? WEXITSTATUS(rc) : -2);
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

json run_cli_json(const std::string& args) {
    CliResult r = run_cli(args);
    require_that(r.code == 0, "CLI failed (" + std::to_string(r.code) + "): " + args +
                                  "\n  stderr: " + r.err);
    return json::parse(r.out);
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

// Columns of a results CSV keyed by header name, one vector per column.
std::map<std::string, std::vector<std::string>> read_csv(const fs::path& p) {
    std::ifstream in(p);
    require_that(in.good(), "cannot open " + p.string());
    std::string line;
    require_that(static_cast<bool>(std::getline(in, line)), "empty CSV " + p.string());
    std::vector<std::string> names;
    {
        std::istringstream hs(line);
        std::string cell;
        while (std::getline(hs, cell, ',')) names.push_back(cell);
    }
    std::map<std::string, std::vector<std::string>> cols;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        size_t i = 0;
        while (std::getline(ls, cell, ',')) {
            require_that(i < names.size(), "ragged CSV row in " + p.string());
            cols[names[i]].push_back(cell);
            ++i;
        }
        for (; i < names.size(); ++i) cols[names[i]].push_back("");
    }
    return cols;
}

// ---------------------------------------------------------------------------
// Shared model/data recipes for the in-process checks.
// ---------------------------------------------------------------------------

ModelConfig tiny_config(int64_t d_model, int64_t d_ff, HeadKind head) {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = d_model;
    cfg.n_heads = 2;
    cfg.d_ff = d_ff;
    cfg.max_seq_len = 64;
    cfg.dropout = 0.0;
    cfg.head = head;
    return cfg;
}

Vocab pool_vocab(size_t n, uint64_t seed) {
    std::vector<std::string> pool = builtin_words();
    Rng rng(seed);
    rng.shuffle(pool);
    pool.resize(n);
    std::sort(pool.begin(), pool.end());
    return Vocab::from_words(std::move(pool));
}

std::vector<Trajectory> oracle_check_data() {
    MixtureSpec spec;
    spec.total = 60;
    spec.seed = 404;
    return generate_mixture(spec, pool_vocab(12, 2718));
}

std::vector<int> episode_tokens_of(const ActionBatch& b, int64_t e) {
    std::vector<int> toks;
    for (int64_t i = b.tokens.offsets[static_cast<size_t>(e)];
         i < b.tokens.offsets[static_cast<size_t>(e) + 1]; ++i)
        toks.push_back(static_cast<int>(b.tokens.tokens[static_cast<size_t>(i)]));
    return toks;
}

std::vector<int64_t> owners_of(const ActionBatch& b) {
    std::vector<int64_t> out;
    int64_t e = 0;
    for (int64_t a = 0; a < b.count(); ++a) {
        while (b.hist_rows[static_cast<size_t>(a)] >=
               b.tokens.offsets[static_cast<size_t>(e) + 1])
            ++e;
        out.push_back(e);
    }
    return out;
}

double row_nll(const Tensor<float>& logits, int64_t row, int64_t target) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t v = 0; v < logits.cols(); ++v)
        mx = std::max(mx, static_cast<double>(logits.at(row, v)));
    double z = 0.0;
    for (int64_t v = 0; v < logits.cols(); ++v)
        z += std::exp(static_cast<double>(logits.at(row, v)) - mx);
    return -(static_cast<double>(logits.at(row, target)) - mx - std::log(z));
}

double expectile_pen(double u, double tau) {
    double w = u < 0 ? 1.0 - tau : tau;
    return w * u * u;
}

double huber_pen(double u, double delta) {
    double a = std::abs(u);
    return a <= delta ? 0.5 * u * u : delta * (a - 0.5 * delta);
}

struct LossParts {
    double q = 0.0, v = 0.0, cql = 0.0, total = 0.0;
};

enum class LossKind { ilql, hard_max, psi, bc, awr };
constexpr LossKind kAllLosses[] = {LossKind::ilql, LossKind::hard_max, LossKind::psi,
                                   LossKind::bc, LossKind::awr};

const char* loss_name(LossKind k) {
    switch (k) {
        case LossKind::ilql: return "ilql";
        case LossKind::hard_max: return "per-token-cql";
        case LossKind::psi: return "psi";
        case LossKind::bc: return "bc";
        case LossKind::awr: return "awr";
    }
    return "?";
}

// Straight-line per-action recomputation of every loss from the non-graph forward
// passes; the production path batches the same math through the autodiff graph.
LossParts loop_oracle(LossKind kind, const Weights& w, const ActionBatch& b,
                      const ValueTargets& t, const ValueLossConfig& vcfg,
                      const PsiLossConfig& pcfg, std::span<const float> log_pi_beta,
                      std::span<const float> weights) {
    std::vector<ValueForward> vf;
    std::vector<LmForward> lf;
    for (int64_t e = 0; e < b.tokens.episodes(); ++e) {
        if (kind == LossKind::bc || kind == LossKind::awr)
            lf.push_back(forward_lm(w, episode_tokens_of(b, e)));
        else
            vf.push_back(forward_value(w, episode_tokens_of(b, e)));
    }
    std::vector<int64_t> owner = owners_of(b);
    const auto n = static_cast<size_t>(b.count());
    LossParts out;
    for (size_t a = 0; a < n; ++a) {
        const int64_t e = owner[a];
        const int64_t row = b.hist_rows[a] - b.tokens.offsets[static_cast<size_t>(e)];
        const int64_t act = b.actions[a];
        const bool terminal = b.succ_rows[a] < 0;
        if (kind == LossKind::bc) {
            out.total += row_nll(lf[static_cast<size_t>(e)].logits, row, act);
            continue;
        }
        if (kind == LossKind::awr) {
            out.total += weights[a] * row_nll(lf[static_cast<size_t>(e)].logits, row, act);
            continue;
        }
        const ValueForward& f = vf[static_cast<size_t>(e)];
        const double q1 = f.q1.at(row, act);
        const double q2 = f.q2.at(row, act);
        const double v = f.v.data[static_cast<size_t>(row)];
        if (kind == LossKind::ilql) {
            double td = b.rewards[a] + vcfg.gamma * t.v_next[a];
            out.q += (td - q1) * (td - q1) + (td - q2) * (td - q2);
            out.v += expectile_pen(t.tgt_min_q[a] - v, vcfg.tau);
            out.cql += 0.5 * (row_nll(f.q1, row, act) + row_nll(f.q2, row, act));
        } else if (kind == LossKind::hard_max) {
            double td = b.rewards[a] + (terminal ? 0.0 : vcfg.gamma * t.max_next[a]);
            out.q += (td - q1) * (td - q1) + (td - q2) * (td - q2);
            out.v += expectile_pen(t.tgt_mean_q[a] - v, 0.5);
            out.cql += 0.5 * (row_nll(f.q1, row, act) + row_nll(f.q2, row, act));
        } else {
            double target = b.rewards[a] / pcfg.reward_scale + log_pi_beta[a] +
                            (terminal ? 0.0 : pcfg.gamma * t.lse_next[a]);
            out.q += 0.5 * (huber_pen(target - q1, pcfg.huber_delta) +
                            huber_pen(target - q2, pcfg.huber_delta));
            out.v += expectile_pen(t.tgt_mean_q[a] - v, 0.5);
        }
    }
    out.q /= static_cast<double>(n);
    out.v /= static_cast<double>(n);
    out.cql = vcfg.alpha * out.cql / static_cast<double>(n);
    if (kind == LossKind::bc || kind == LossKind::awr) {
        out.total /= static_cast<double>(n);
    } else if (kind == LossKind::psi) {
        out.total = out.q + out.v;
        out.cql = 0.0;
    } else {
        out.total = out.q + out.v + out.cql;
    }
    return out;
}

LossNodes build_loss(LossKind kind, Graph<double>& g, const ForwardNodes& f,
                     const ActionBatch& b, const ValueTargets& t,
                     const ValueLossConfig& vcfg, const PsiLossConfig& pcfg,
                     std::span<const float> log_pi_beta, std::span<const float> weights) {
    switch (kind) {
        case LossKind::ilql: return build_ilql_loss(g, f, b, t, vcfg);
        case LossKind::hard_max: return build_per_token_cql_loss(g, f, b, t, vcfg);
        case LossKind::psi: return build_psi_loss(g, f, b, t, log_pi_beta, pcfg);
        case LossKind::bc: return build_bc_loss(g, f, b);
        case LossKind::awr: return build_awr_loss(g, f, b, weights);
    }
    throw Fail{"unknown loss kind"};
}

// Independent feedback oracle: enumerate every 3^n coloring and keep the unique
// one satisfying the rules stated set-wise (greens forced; per letter, yellow
// count = min of non-green guess and answer occurrences, leftmost first).
std::vector<Color> oracle_feedback(const std::string& guess, const std::string& answer) {
    const size_t n = guess.size();
    size_t total = 1;
    for (size_t i = 0; i < n; ++i) total *= 3;

    auto valid = [&](const std::vector<Color>& fb) {
        for (size_t i = 0; i < n; ++i)
            if ((fb[i] == Color::green) != (guess[i] == answer[i])) return false;
        for (char c = 'a'; c <= 'z'; ++c) {
            std::vector<size_t> spots;
            int avail = 0;
            for (size_t i = 0; i < n; ++i) {
                if (guess[i] == c && guess[i] != answer[i]) spots.push_back(i);
                if (answer[i] == c && guess[i] != answer[i]) ++avail;
            }
            size_t want = std::min(spots.size(), static_cast<size_t>(avail));
            for (size_t k = 0; k < spots.size(); ++k) {
                Color expect = k < want ? Color::yellow : Color::black;
                if (fb[spots[k]] != expect) return false;
            }
        }
        return true;
    };

    std::vector<Color> found;
    int matches = 0;
    for (size_t code = 0; code < total; ++code) {
        std::vector<Color> fb(n);
        size_t rest = code;
        for (size_t i = 0; i < n; ++i) {
            fb[i] = static_cast<Color>(rest % 3);
            rest /= 3;
        }
        if (valid(fb)) {
            found = fb;
            ++matches;
        }
    }
    require_that(matches == 1,
                 "feedback rules admit " + std::to_string(matches) + " colorings for " +
                     guess + "/" + answer);
    return found;
}

std::string word_from_code(size_t code, size_t len, int alphabet) {
    std::string w(len, 'a');
    for (size_t i = 0; i < len; ++i) {
        w[i] = static_cast<char>('a' + code % static_cast<size_t>(alphabet));
        code /= static_cast<size_t>(alphabet);
    }
    return w;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite: 64-bit finite differences on every loss.
// ---------------------------------------------------------------------------

std::string check_gradients() {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<Trajectory> data = oracle_check_data();
    // The losses are C1 but not C2 (expectile, Huber, the head nonlinearity), so a
    // pre-activation sitting within eps of a kink makes the central difference
    // diverge from the exact gradient no matter how small eps gets relative to the
    // 1e-4 bound. These seeds were checked to keep every unit clear of a kink
    // across the whole eps window 1e-5..4e-5; any gradient bug still fails at
    // every seed, so the choice conditions the numerics without hiding defects.
    Weights online = init_weights(tiny_config(8, 16, HeadKind::value), 1211);
    Weights target = init_weights(tiny_config(8, 16, HeadKind::value), 1212);
    Weights lm = init_weights(tiny_config(8, 16, HeadKind::lm), 1213);
    Rng rng(83);

    ValueLossConfig vcfg;
    vcfg.tau = 0.8;
    vcfg.alpha = 0.05;
    PsiLossConfig pcfg;

    double worst = 0.0;
    int64_t checked = 0;
    for (LossKind kind : kAllLosses) {
        std::vector<int64_t> ids;
        for (int i = 0; i < 2; ++i)
            ids.push_back(static_cast<int64_t>(rng.uniform_int(data.size())));
        ActionBatch b = make_action_batch(data, ids);
        ValueTargets t = compute_value_targets(b, target, &online, letter_tokens());
        std::vector<float> logpb = behavior_log_probs(lm, b);
        std::vector<float> w = awr_weights(online, b, 4.0, 20.0);

        const Weights& model =
            (kind == LossKind::bc || kind == LossKind::awr) ? lm : online;
        Graph<double> g;
        ForwardNodes f = build_forward(g, model.config, b.tokens, false);
        LossNodes loss = build_loss(kind, g, f, b, t, vcfg, pcfg, logpb, w);
        auto wd = convert_weights<double>(model);
        Graph<double>::Bindings bind;
        for (auto& [name, tensor] : wd) bind[name] = &tensor;
        // Step size sits in the middle of the verified kink-free window, where
        // cancellation noise is also still two decades under the bound.
        FdReport rep = finite_difference_check(g, loss.total, bind, {}, 3e-5);
        require_that(rep.checked > 0, std::string(loss_name(kind)) + ": nothing checked");
        require_that(rep.max_rel_err < 1e-4,
                     fmt("%s: max rel err %.3e at %s[%lld]", loss_name(kind),
                         rep.max_rel_err, rep.worst.input.c_str(),
                         static_cast<long long>(rep.worst.index)));
        worst = std::max(worst, rep.max_rel_err);
        checked += rep.checked;
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    require_that(secs < 120.0, fmt("gradient suite took %.1fs (budget 120s)", secs));
    return fmt("5 losses, %lld partials, max rel err %.2e",
               static_cast<long long>(checked), worst);
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence: batched losses vs per-action loops, env vs enumeration.
// ---------------------------------------------------------------------------

std::string check_oracles() {
    std::vector<Trajectory> data = oracle_check_data();
    Weights online = init_weights(tiny_config(16, 32, HeadKind::value), 7);
    Weights target = init_weights(tiny_config(16, 32, HeadKind::value), 8);
    Weights lm = init_weights(tiny_config(16, 32, HeadKind::lm), 9);
    Rng rng(23);

    ValueLossConfig vcfg;
    vcfg.tau = 0.8;
    vcfg.alpha = 0.05;
    PsiLossConfig pcfg;
    pcfg.reward_scale = 2.0;

    double max_diff = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int64_t> ids;
        const int k = 2 + static_cast<int>(rng.uniform_int(3));
        for (int i = 0; i < k; ++i)
            ids.push_back(static_cast<int64_t>(rng.uniform_int(data.size())));
        ActionBatch b = make_action_batch(data, ids);
        ValueTargets t = compute_value_targets(b, target, &online, letter_tokens());
        std::vector<float> logpb = behavior_log_probs(lm, b);
        std::vector<float> w = awr_weights(online, b, 4.0, 20.0);

        for (LossKind kind : kAllLosses) {
            const Weights& model =
                (kind == LossKind::bc || kind == LossKind::awr) ? lm : online;
            LossParts want = loop_oracle(kind, model, b, t, vcfg, pcfg, logpb, w);

            Graph<double> g;
            ForwardNodes f = build_forward(g, model.config, b.tokens, false);
            LossNodes loss = build_loss(kind, g, f, b, t, vcfg, pcfg, logpb, w);
            auto wd = convert_weights<double>(model);
            Graph<double>::Bindings bind;
            for (auto& [name, tensor] : wd) bind[name] = &tensor;

            std::vector<std::pair<NodeId, double>> parts{{loss.total, want.total}};
            if (kind == LossKind::ilql || kind == LossKind::hard_max ||
                kind == LossKind::psi) {
                parts.emplace_back(loss.q_term, want.q);
                parts.emplace_back(loss.v_term, want.v);
            }
            if (kind == LossKind::ilql || kind == LossKind::hard_max)
                parts.emplace_back(loss.cql_term, want.cql);
            for (auto& [node, expected] : parts) {
                double got = g.evaluate(node, bind).data[0];
                double diff = std::abs(got - expected);
                max_diff = std::max(max_diff, diff);
                require_that(diff < 1e-5, fmt("trial %d %s: |graph - loop| = %.3e", trial,
                                              loss_name(kind), diff));
            }
        }
    }

    // Environment half: exhaustive over the length-3/alphabet-3 square, then 1e5
    // random 5-letter pairs with alphabets small enough to stress duplicates.
    int64_t pairs = 0;
    for (size_t gi = 0; gi < 27; ++gi) {
        for (size_t ai = 0; ai < 27; ++ai) {
            std::string g = word_from_code(gi, 3, 3);
            std::string a = word_from_code(ai, 3, 3);
            require_that(score_guess(g, a) == oracle_feedback(g, a),
                         "feedback mismatch on " + g + "/" + a);
            ++pairs;
        }
    }
    Rng frng(97);
    for (int i = 0; i < 100000; ++i) {
        const int alphabet = 3 + static_cast<int>(frng.uniform_int(24));
        std::string g(5, 'a'), a(5, 'a');
        for (int k = 0; k < 5; ++k) {
            g[static_cast<size_t>(k)] =
                static_cast<char>('a' + frng.uniform_int(static_cast<uint64_t>(alphabet)));
            a[static_cast<size_t>(k)] =
                static_cast<char>('a' + frng.uniform_int(static_cast<uint64_t>(alphabet)));
        }
        require_that(score_guess(g, a) == oracle_feedback(g, a),
                     "feedback mismatch on " + g + "/" + a);
        ++pairs;
    }
    return fmt("50 batches x 5 losses, max |graph - loop| %.2e; %lld feedback pairs",
               max_diff, static_cast<long long>(pairs));
}

// ---------------------------------------------------------------------------
// 3. Extraction identities on real forward passes.
// ---------------------------------------------------------------------------

Tensor<float> row_of(const Tensor<float>& m, int64_t row) {
    Tensor<float> out(Shape{m.cols()});
    for (int64_t c = 0; c < m.cols(); ++c)
        out.data[static_cast<size_t>(c)] = m.at(row, c);
    return out;
}

std::string check_extraction() {
    std::vector<Trajectory> data = oracle_check_data();
    Weights value = init_weights(tiny_config(16, 32, HeadKind::value), 21);
    Weights lm_a = init_weights(tiny_config(16, 32, HeadKind::lm), 22);
    Weights lm_b = init_weights(tiny_config(16, 32, HeadKind::lm), 23);
    Rng rng(51);
    std::vector<int64_t> legal(letter_tokens().begin(), letter_tokens().end());

    double max_kl = 0.0;
    for (int ctx = 0; ctx < 40; ++ctx) {
        const auto e = static_cast<int64_t>(rng.uniform_int(data.size()));
        const std::vector<int64_t> one{e};
        ActionBatch b = make_action_batch(data, one);
        const auto pick = static_cast<size_t>(rng.uniform_int(b.hist_rows.size()));
        const int64_t row = b.hist_rows[pick];
        std::vector<int> toks = episode_tokens_of(b, 0);

        ValueForward vf = forward_value(value, toks);
        LmForward la = forward_lm(lm_a, toks);
        LmForward lb = forward_lm(lm_b, toks);
        Tensor<float> pi_a = row_of(la.logits, row);
        Tensor<float> pi_b = row_of(lb.logits, row);
        Tensor<float> q = min_target_q(row_of(vf.q1, row), row_of(vf.q2, row));
        const float v = vf.v.data[static_cast<size_t>(row)];

        // At beta = 0 the extraction is exactly the behavior policy.
        ExtractionSpec zero;
        zero.beta = 0.0;
        Tensor<float> s0 = extract_logits(pi_a, Tensor<float>(Shape{kNumTokens}), 0.0f, zero);
        auto dist = [&](const Tensor<float>& scores) {
            std::vector<double> lp(legal.size());
            double m = -std::numeric_limits<double>::infinity();
            for (size_t i = 0; i < legal.size(); ++i) {
                lp[i] = scores.data[static_cast<size_t>(legal[i])];
                m = std::max(m, lp[i]);
            }
            double z = 0.0;
            for (double& x : lp) z += std::exp(x - m);
            for (double& x : lp) x = std::exp(x - m) / z;
            return lp;
        };
        std::vector<double> extracted = dist(s0);
        std::vector<double> behavior = dist(pi_a);
        double kl = 0.0;
        for (size_t i = 0; i < extracted.size(); ++i)
            if (extracted[i] > 0.0) kl += extracted[i] * std::log(extracted[i] / behavior[i]);
        max_kl = std::max(max_kl, std::abs(kl));
        require_that(std::abs(kl) < 1e-9, fmt("beta=0 KL %.3e at context %d", kl, ctx));

        // At beta = inf the selection ignores the behavior model entirely.
        ExtractionSpec inf;
        inf.beta_inf = true;
        Selection ia = select_token(extract_logits(pi_a, q, v, inf), legal, inf, nullptr);
        Selection ib = select_token(extract_logits(pi_b, q, v, inf), legal, inf, nullptr);
        require_that(ia.token == ib.token && ia.logp == ib.logp,
                     fmt("beta=inf selection depends on the behavior model at context %d",
                         ctx));

        // Shifting V by a constant never changes the greedy selection.
        for (double beta : {0.5, 4.0, 32.0}) {
            ExtractionSpec spec;
            spec.beta = beta;
            Selection base = select_token(extract_logits(pi_a, q, v, spec), legal, spec,
                                          nullptr);
            Selection shifted = select_token(extract_logits(pi_a, q, v + 3.75f, spec),
                                             legal, spec, nullptr);
            require_that(base.token == shifted.token,
                         fmt("V-shift changed the selection at context %d beta %.1f", ctx,
                             beta));
        }
    }
    return fmt("40 contexts: max beta=0 KL %.2e; inf/V-shift selections invariant",
               max_kl);
}

// ---------------------------------------------------------------------------
// 4. Lava reproduction on the 20-word benchmark (drives the CLI).
// ---------------------------------------------------------------------------

struct Bench {
    fs::path dir, vocab, data, probes;
    fs::path ck_ilql, ck_ss, ck_bc, ck_fbc10, ck_fbc30, ck_fbc50;
    bool trained = false;
    double ilql_mean = 0.0, ilql_se = 0.0, ss_mean = 0.0, ss_se = 0.0;
} g_bench;

void write_train_config(const fs::path& p, const std::string& algo, double tau,
                        const std::string& head) {
    std::ofstream out(p);
    out << "{\n  \"algo\": \"" << algo << "\", \"tau\": " << tau
        << ", \"alpha\": " << kBenchAlpha << ", \"gamma\": 0.99, \"polyak\": 0.005,\n"
        << "  \"lr\": " << kBenchLr << ", \"batch_size\": " << kBenchBatch
        << ", \"max_steps\": " << kBenchSteps << ", \"seed\": 0,\n"
        << "  \"eval_every\": 300, \"early_stop\": false, \"min_steps\": 100,\n"
        << "  \"model\": " << kBenchModel << "\n}\n";
    std::string fixed = slurp(p);
    size_t at = fixed.find("\"head\": \"value\"");
    require_that(at != std::string::npos, "template misses the head field");
    if (head != "value") {
        fixed.replace(at, std::string("\"head\": \"value\"").size(),
                      "\"head\": \"" + head + "\"");
        std::ofstream rewrite(p);
        rewrite << fixed;
    }
}

std::string check_lava() {
    auto t0 = std::chrono::steady_clock::now();
    Bench& B = g_bench;
    B.dir = g_work / "bench";
    fs::create_directories(B.dir);
    B.vocab = B.dir / "vocab.txt";
    B.data = B.dir / "mixture.jsonl";
    B.probes = B.dir / "probes.jsonl";
    B.ck_ilql = B.dir / "ck_ilql";
    B.ck_ss = B.dir / "ck_single_step";
    B.ck_bc = B.dir / "ck_bc";
    B.ck_fbc10 = B.dir / "ck_fbc10";
    B.ck_fbc30 = B.dir / "ck_fbc30";
    B.ck_fbc50 = B.dir / "ck_fbc50";

    run_cli_json(fmt("gen-vocab --size 20 --seed %llu --out \"%s\"",
                     static_cast<unsigned long long>(kVocabSeed), B.vocab.c_str()));
    run_cli_json(fmt("gen-synthetic --vocab \"%s\" --total %lld --seed %llu --out \"%s\"",
                     B.vocab.c_str(), static_cast<long long>(kEpisodes),
                     static_cast<unsigned long long>(kDataSeed), B.data.c_str()));
    json probes = run_cli_json(fmt("gen-probes --data \"%s\" --vocab \"%s\" --out \"%s\"",
                                   B.data.c_str(), B.vocab.c_str(), B.probes.c_str()));
    require_that(probes["probes"].get<int64_t>() >= 3, "too few turn-3 probes");

    fs::path cfg_ilql = B.dir / "cfg_ilql.json";
    fs::path cfg_ss = B.dir / "cfg_single_step.json";
    fs::path cfg_bc = B.dir / "cfg_bc.json";
    write_train_config(cfg_ilql, "ilql", 0.8, "value");
    write_train_config(cfg_ss, "single_step", 0.5, "value");
    write_train_config(cfg_bc, "bc", 0.8, "lm");

    run_cli_json(fmt("train --algo ilql --data \"%s\" --config \"%s\" --out \"%s\"",
                     B.data.c_str(), cfg_ilql.c_str(), B.ck_ilql.c_str()));
    run_cli_json(fmt("train --algo single-step --data \"%s\" --config \"%s\" --out \"%s\"",
                     B.data.c_str(), cfg_ss.c_str(), B.ck_ss.c_str()));
    run_cli_json(fmt("train --algo bc --data \"%s\" --config \"%s\" --out \"%s\"",
                     B.data.c_str(), cfg_bc.c_str(), B.ck_bc.c_str()));
    B.trained = true;

    // Paired greedy evaluation: same behavior model and eval seed, values differ.
    json ev_ilql = run_cli_json(
        fmt("eval --pi-beta \"%s\" --value \"%s\" --vocab \"%s\" --beta %s --games %lld "
            "--seed %llu",
            B.ck_bc.c_str(), B.ck_ilql.c_str(), B.vocab.c_str(), kDecodeBeta,
            static_cast<long long>(kEvalGames), static_cast<unsigned long long>(kEvalSeed)));
    json ev_ss = run_cli_json(
        fmt("eval --pi-beta \"%s\" --value \"%s\" --vocab \"%s\" --beta %s --games %lld "
            "--seed %llu",
            B.ck_bc.c_str(), B.ck_ss.c_str(), B.vocab.c_str(), kDecodeBeta,
            static_cast<long long>(kEvalGames), static_cast<unsigned long long>(kEvalSeed)));
    B.ilql_mean = ev_ilql["mean_return"].get<double>();
    B.ilql_se = ev_ilql["stderr"].get<double>();
    B.ss_mean = ev_ss["mean_return"].get<double>();
    B.ss_se = ev_ss["stderr"].get<double>();

    json dq = run_cli_json(fmt("diagnose-q --value-a \"%s\" --value-b \"%s\" --probes \"%s\"",
                               B.ck_ilql.c_str(), B.ck_ss.c_str(), B.probes.c_str()));
    const double qp_ilql = dq["value_a"].get<double>();
    const double qp_ss = dq["value_b"].get<double>();

    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    require_that(B.ilql_mean - 2.0 * B.ilql_se > B.ss_mean + 2.0 * B.ss_se,
                 fmt("2-stderr intervals overlap: ilql %.3f+-%.3f vs single-step %.3f+-%.3f",
                     B.ilql_mean, B.ilql_se, B.ss_mean, B.ss_se));
    require_that(qp_ilql - qp_ss >= 0.10,
                 fmt("q_preference gap %.3f < 0.10 (ilql %.2f, single-step %.2f)",
                     qp_ilql - qp_ss, qp_ilql, qp_ss));
    require_that(secs < 3600.0, fmt("lava benchmark took %.0fs (budget 3600s)", secs));
    return fmt("ilql %.3f+-%.3f > single-step %.3f+-%.3f; q_pref %.2f vs %.2f (%.0fs)",
               B.ilql_mean, B.ilql_se, B.ss_mean, B.ss_se, qp_ilql, qp_ss, secs);
}

// ---------------------------------------------------------------------------
// 5. Method ordering through the sweep command.
// ---------------------------------------------------------------------------

std::string check_ordering() {
    Bench& B = g_bench;
    require_that(B.trained, "benchmark arms unavailable (lava check failed earlier)");

    fs::path cfg_bc = B.dir / "cfg_bc.json";
    run_cli_json(fmt("train --algo filtered-bc --data \"%s\" --config \"%s\" --pct 10 "
                     "--out \"%s\"",
                     B.data.c_str(), cfg_bc.c_str(), B.ck_fbc10.c_str()));
    run_cli_json(fmt("train --algo filtered-bc --data \"%s\" --config \"%s\" --pct 30 "
                     "--out \"%s\"",
                     B.data.c_str(), cfg_bc.c_str(), B.ck_fbc30.c_str()));
    run_cli_json(fmt("train --algo filtered-bc --data \"%s\" --config \"%s\" --pct 50 "
                     "--out \"%s\"",
                     B.data.c_str(), cfg_bc.c_str(), B.ck_fbc50.c_str()));

    fs::path grid = B.dir / "grid.json";
    {
        json g{{"vocab", B.vocab.string()},
               {"games", kSweepGames},
               {"seed", kEvalSeed},
               {"behavior", B.ck_bc.string()},
               {"ilql", {{"checkpoints", {{"0.8", B.ck_ilql.string()}}},
                         {"betas", json::array({4, 8})}}},
               {"single_step", {{"checkpoint", B.ck_ss.string()},
                                {"betas", json::array({4, 8})}}},
               {"filtered_bc", {{"checkpoints", {{"10", B.ck_fbc10.string()},
                                                 {"30", B.ck_fbc30.string()},
                                                 {"50", B.ck_fbc50.string()}}}}},
               {"bc", {{"checkpoint", B.ck_bc.string()}}}};
        std::ofstream out(grid);
        out << g.dump(2) << "\n";
    }
    fs::path suite = B.dir / "suite.csv";
    json sw = run_cli_json(fmt("sweep --grid \"%s\" --out \"%s\"", grid.c_str(),
                               suite.c_str()));
    require_that(sw["skipped"].empty(), "sweep skipped cells: " + sw["skipped"].dump());

    auto cols = read_csv(suite);
    struct Cell {
        double mean = 0.0, se = 0.0;
        bool seen = false;
    };
    std::map<std::string, Cell> best;
    for (size_t i = 0; i < cols["algo"].size(); ++i) {
        if (cols["best"][i] != "1") continue;
        Cell& c = best[cols["algo"][i]];
        c.mean = std::stod(cols["mean_return"][i]);
        c.se = std::stod(cols["stderr"][i]);
        c.seen = true;
    }
    for (const char* algo : {"ilql", "single_step", "filtered_bc", "bc"})
        require_that(best[algo].seen, std::string("no best row for ") + algo);

    auto ordered = [](const Cell& hi, const Cell& lo) {
        if (hi.mean >= lo.mean) return true;
        return lo.mean - hi.mean <= std::sqrt(hi.se * hi.se + lo.se * lo.se);
    };
    require_that(ordered(best["ilql"], best["single_step"]),
                 fmt("ilql %.3f below single-step %.3f beyond 1 stderr",
                     best["ilql"].mean, best["single_step"].mean));
    require_that(ordered(best["single_step"], best["filtered_bc"]),
                 fmt("single-step %.3f below filtered-bc %.3f beyond 1 stderr",
                     best["single_step"].mean, best["filtered_bc"].mean));
    require_that(ordered(best["filtered_bc"], best["bc"]),
                 fmt("filtered-bc %.3f below bc %.3f beyond 1 stderr",
                     best["filtered_bc"].mean, best["bc"].mean));
    return fmt("ilql %.3f >= single-step %.3f >= filtered-bc %.3f >= bc %.3f",
               best["ilql"].mean, best["single_step"].mean, best["filtered_bc"].mean,
               best["bc"].mean);
}

// ---------------------------------------------------------------------------
// 6. Diversity trade-off: sampled entropy falls with beta, return does not.
// ---------------------------------------------------------------------------

std::string check_diversity() {
    Bench& B = g_bench;
    require_that(B.trained, "benchmark arms unavailable (lava check failed earlier)");

    fs::path csv = B.dir / "beta_sweep.csv";
    run_cli_json(fmt("beta-sweep --vocab \"%s\" --pi-beta \"%s\" --value \"%s\" "
                     "--betas 0,4,32 --games %lld --seed %llu --out \"%s\"",
                     B.vocab.c_str(), B.ck_bc.c_str(), B.ck_ilql.c_str(),
                     static_cast<long long>(kDiversityGames),
                     static_cast<unsigned long long>(kDiversitySeed), csv.c_str()));
    auto cols = read_csv(csv);
    require_that(cols["beta"].size() == 3, "expected three beta rows");
    std::vector<double> ent, ret;
    for (size_t i = 0; i < 3; ++i) {
        ent.push_back(std::stod(cols["entropy_nats"][i]));
        ret.push_back(std::stod(cols["mean_return"][i]));
    }
    require_that(ent[1] <= ent[0] + 1e-9 && ent[2] <= ent[1] + 1e-9,
                 fmt("entropy not non-increasing: %.4f, %.4f, %.4f", ent[0], ent[1],
                     ent[2]));
    require_that(ret[2] >= ret[0],
                 fmt("return at beta=32 (%.3f) below beta=0 (%.3f)", ret[2], ret[0]));
    return fmt("entropy %.3f >= %.3f >= %.3f nats; return %.3f -> %.3f", ent[0], ent[1],
               ent[2], ret[0], ret[2]);
}

// ---------------------------------------------------------------------------
// 7. Retrofit soundness on scripted-policy grids.
// ---------------------------------------------------------------------------

std::string check_retrofit() {
    Vocab vocab = pool_vocab(50, 3141);
    MixtureSpec spec;
    spec.total = 1000;
    spec.seed = 77;
    std::vector<Trajectory> source = generate_mixture(spec, vocab);
    std::vector<ColorRows> grids = strip_to_color_rows(source);
    require_that(grids.size() == 1000, "expected 1000 grids");

    std::vector<Trajectory> retro = retrofit_dataset(grids, vocab, 123);
    const double feasible =
        static_cast<double>(retro.size()) / static_cast<double>(grids.size());
    require_that(feasible >= 0.99, fmt("only %.1f%% of grids feasible", 100.0 * feasible));

    // Outputs preserve grid order, so pair each with the next matching source grid.
    size_t gi = 0;
    for (const Trajectory& t : retro) {
        require_that(t.provenance == "retrofit", "wrong provenance " + t.provenance);
        std::vector<ColorRows> got = strip_to_color_rows({t});
        while (gi < grids.size() && got[0].rows != grids[gi].rows) ++gi;
        require_that(gi < grids.size(), "retrofit produced rows absent from the input");
        ++gi;
        (void)replay(t);  // throws if the guesses do not re-simulate exactly
    }
    return fmt("%.1f%% feasible (%zu/1000), all replays exact", 100.0 * feasible,
               retro.size());
}

// ---------------------------------------------------------------------------
// 8. Determinism of repeated CLI invocations.
// ---------------------------------------------------------------------------

// The training log keeps a wall-clock column by design, so checkpoint determinism
// is judged on weights, metadata, and the validation log instead.
void compare_checkpoints(const fs::path& a, const fs::path& b) {
    int compared = 0;
    for (const auto& entry : fs::directory_iterator(a)) {
        const std::string name = entry.path().filename().string();
        if (name == "train_log.csv") continue;
        require_that(files_equal(entry.path(), b / name),
                     "checkpoint file differs across reruns: " + name);
        ++compared;
    }
    require_that(compared > 3, "checkpoint comparison saw too few files");
}

std::string check_determinism() {
    fs::path dir = g_work / "determinism";
    fs::create_directories(dir);
    int pairs = 0;

    auto twice = [&](const std::string& args_tpl, const std::string& out_a,
                     const std::string& out_b) {
        run_cli_json(args_tpl + " --out \"" + out_a + '"');
        run_cli_json(args_tpl + " --out \"" + out_b + '"');
    };

    fs::path va = dir / "vocab_a.txt", vb = dir / "vocab_b.txt";
    twice("gen-vocab --size 12 --seed 3", va.string(), vb.string());
    require_that(files_equal(va, vb), "gen-vocab output differs");
    ++pairs;

    fs::path da = dir / "data_a.jsonl", db = dir / "data_b.jsonl";
    twice(fmt("gen-synthetic --vocab \"%s\" --total 200 --seed 4", va.c_str()),
          da.string(), db.string());
    require_that(files_equal(da, db), "gen-synthetic JSONL differs");
    require_that(files_equal(da.string() + ".manifest.json", db.string() + ".manifest.json"),
                 "dataset manifest differs");
    ++pairs;

    fs::path ra = dir / "rows_a.jsonl", rb = dir / "rows_b.jsonl";
    twice(fmt("gen-rows --data \"%s\"", da.c_str()), ra.string(), rb.string());
    require_that(files_equal(ra, rb), "gen-rows output differs");
    ++pairs;

    fs::path fa = dir / "retro_a.jsonl", fb = dir / "retro_b.jsonl";
    twice(fmt("retrofit --rows \"%s\" --vocab \"%s\" --seed 6", ra.c_str(), va.c_str()),
          fa.string(), fb.string());
    require_that(files_equal(fa, fb), "retrofit output differs");
    ++pairs;

    fs::path pa = dir / "probes_a.jsonl", pb = dir / "probes_b.jsonl";
    twice(fmt("gen-probes --data \"%s\" --vocab \"%s\"", da.c_str(), va.c_str()),
          pa.string(), pb.string());
    require_that(files_equal(pa, pb), "gen-probes output differs");
    ++pairs;

    fs::path cfg = dir / "cfg.json";
    {
        std::ofstream out(cfg);
        out << R"({"tau": 0.8, "alpha": 0.01, "gamma": 0.99, "polyak": 0.005,
  "lr": 0.0003, "batch_size": 8, "max_steps": 40, "seed": 2, "eval_every": 20,
  "early_stop": false, "min_steps": 10,
  "model": {"vocab_size": 30, "n_layers": 1, "d_model": 16, "n_heads": 2,
            "d_ff": 32, "max_seq_len": 64, "dropout": 0.1, "head": "value"}})";
    }
    fs::path ca = dir / "ck_a", cb = dir / "ck_b";
    twice(fmt("train --algo ilql --data \"%s\" --config \"%s\"", da.c_str(), cfg.c_str()),
          ca.string(), cb.string());
    compare_checkpoints(ca, cb);
    ++pairs;

    json e1 = run_cli_json(fmt("eval --value \"%s\" --vocab \"%s\" --beta inf --games 64 "
                               "--seed 9",
                               ca.c_str(), va.c_str()));
    json e2 = run_cli_json(fmt("eval --value \"%s\" --vocab \"%s\" --beta inf --games 64 "
                               "--seed 9",
                               ca.c_str(), va.c_str()));
    require_that(e1.dump() == e2.dump(), "eval report differs across reruns");
    ++pairs;

    // A sampled sweep is the most fragile artifact: every rng draw must replay.
    fs::path bs_cfg = dir / "cfg_bc.json";
    {
        std::string c = slurp(cfg);
        size_t at = c.find("\"head\": \"value\"");
        c.replace(at, std::string("\"head\": \"value\"").size(), "\"head\": \"lm\"");
        std::ofstream out(bs_cfg);
        out << c;
    }
    fs::path ba = dir / "ck_bc";
    run_cli_json(fmt("train --algo bc --data \"%s\" --config \"%s\" --out \"%s\"",
                     da.c_str(), bs_cfg.c_str(), ba.c_str()));
    fs::path sa = dir / "sweep_a.csv", sb = dir / "sweep_b.csv";
    twice(fmt("beta-sweep --vocab \"%s\" --pi-beta \"%s\" --value \"%s\" --betas 0,2 "
              "--games 32 --seed 10",
              va.c_str(), ba.c_str(), ca.c_str()),
          sa.string(), sb.string());
    require_that(files_equal(sa, sb), "beta-sweep CSV differs");
    ++pairs;

    return fmt("%d artifact pairs byte-identical", pairs);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2 || argc > 3) {
        std::fprintf(stderr, "usage: %s <path-to-ilql-cli> [criteria like 1,4,8]\n",
                     argv[0]);
        return 2;
    }
    g_cli = argv[1];
    if (!fs::exists(g_cli)) {
        std::fprintf(stderr, "no such binary: %s\n", g_cli.c_str());
        return 2;
    }
    g_work = fs::current_path() / "acceptance_work";
    std::error_code ec;
    fs::remove_all(g_work, ec);
    fs::create_directories(g_work);

    struct Check {
        const char* name;
        std::function<std::string()> body;
    };
    const Check checks[] = {
        {"gradient-suite", check_gradients},
        {"oracle-equivalence", check_oracles},
        {"extraction-identities", check_extraction},
        {"lava-reproduction", check_lava},
        {"method-ordering", check_ordering},
        {"diversity-tradeoff", check_diversity},
        {"retrofit-soundness", check_retrofit},
        {"determinism", check_determinism},
    };

    bool selected[8];
    std::fill(std::begin(selected), std::end(selected), argc < 3);
    if (argc == 3) {
        for (const char* p = argv[2]; *p; ++p)
            if (*p >= '1' && *p <= '8') selected[*p - '1'] = true;
    }

    int failures = 0;
    for (size_t i = 0; i < std::size(checks); ++i) {
        if (!selected[i]) continue;
        auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = true;
        try {
            detail = checks[i].body();
        } catch (const Fail& f) {
            ok = false;
            detail = f.msg;
        } catch (const std::exception& e) {
            ok = false;
            detail = std::string("unexpected error: ") + e.what();
        }
        double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %zu/8 %-22s %s (%.1fs)\n", ok ? "PASS" : "FAIL", i + 1,
                    checks[i].name, detail.c_str(), secs);
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    if (failures > 0) {
        std::printf("ACCEPTANCE: %d of 8 criteria failed\n", failures);
        return 1;
    }
    std::printf("ACCEPTANCE: all 8 criteria satisfied\n");
    return 0;
}
