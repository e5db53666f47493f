#include "ilql/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "ilql/adamw.hpp"
#include "ilql/datagen.hpp"
#include "ilql/error.hpp"

namespace ilql {

using nlohmann::json;
using wordle::Trajectory;

Algo algo_from_string(const std::string& s) {
    if (s == "ilql") return Algo::ilql;
    if (s == "single-step" || s == "single_step") return Algo::single_step;
    if (s == "cql") return Algo::cql;
    if (s == "psi") return Algo::psi;
    if (s == "bc") return Algo::bc;
    if (s == "filtered-bc" || s == "filtered_bc") return Algo::filtered_bc;
    if (s == "awr") return Algo::awr;
    fail(ErrorKind::domain, "unknown algorithm: " + s);
}

const char* algo_name(Algo a) {
    switch (a) {
        case Algo::ilql: return "ilql";
        case Algo::single_step: return "single-step";
        case Algo::cql: return "cql";
        case Algo::psi: return "psi";
        case Algo::bc: return "bc";
        case Algo::filtered_bc: return "filtered-bc";
        case Algo::awr: return "awr";
    }
    fail(ErrorKind::domain, "unknown algorithm id");
}

bool algo_uses_value_head(Algo a) {
    switch (a) {
        case Algo::ilql:
        case Algo::single_step:
        case Algo::cql:
        case Algo::psi: return true;
        case Algo::bc:
        case Algo::filtered_bc:
        case Algo::awr: return false;
    }
    fail(ErrorKind::domain, "unknown algorithm id");
}

void TrainConfig::validate() const {
    require(tau >= 0.5 && tau < 1.0, ErrorKind::domain, "tau must lie in [0.5, 1)");
    require(alpha >= 0.0, ErrorKind::domain, "alpha must be nonnegative");
    require(gamma > 0.0 && gamma <= 1.0, ErrorKind::domain, "gamma must lie in (0, 1]");
    require(polyak > 0.0 && polyak <= 1.0, ErrorKind::domain,
            "polyak rate must lie in (0, 1]");
    require(lr > 0.0, ErrorKind::domain, "learning rate must be positive");
    require(batch_size >= 1 && max_steps >= 1 && eval_every >= 1, ErrorKind::domain,
            "batch size, step budget and eval cadence must be positive");
    require(filter_pct > 0.0 && filter_pct <= 100.0, ErrorKind::domain,
            "filter percentage must be in (0, 100]");
    require(psi_reward_scale > 0.0, ErrorKind::domain, "reward scale must be positive");
    require(awr_beta >= 0.0 && awr_clip > 0.0, ErrorKind::domain,
            "awr needs beta >= 0 and a positive clip");
    require(min_steps >= 0, ErrorKind::domain, "min_steps must be nonnegative");
    model.validate();
}

namespace {

json model_to_json(const ModelConfig& m) {
    return json{{"vocab_size", m.vocab_size}, {"n_layers", m.n_layers},
                {"d_model", m.d_model},       {"n_heads", m.n_heads},
                {"d_ff", m.d_ff},             {"max_seq_len", m.max_seq_len},
                {"dropout", m.dropout},
                {"head", m.head == HeadKind::lm ? "lm" : "value"}};
}

ModelConfig model_from_json(const json& j, ModelConfig base) {
    if (j.contains("vocab_size")) base.vocab_size = j.at("vocab_size").get<int64_t>();
    if (j.contains("n_layers")) base.n_layers = j.at("n_layers").get<int64_t>();
    if (j.contains("d_model")) base.d_model = j.at("d_model").get<int64_t>();
    if (j.contains("n_heads")) base.n_heads = j.at("n_heads").get<int64_t>();
    if (j.contains("d_ff")) base.d_ff = j.at("d_ff").get<int64_t>();
    if (j.contains("max_seq_len")) base.max_seq_len = j.at("max_seq_len").get<int64_t>();
    if (j.contains("dropout")) base.dropout = j.at("dropout").get<double>();
    if (j.contains("head"))
        base.head = j.at("head").get<std::string>() == "lm" ? HeadKind::lm : HeadKind::value;
    return base;
}

}  // namespace

std::string TrainConfig::to_json() const {
    json j{{"tau", tau},
           {"alpha", alpha},
           {"gamma", gamma},
           {"polyak", polyak},
           {"lr", lr},
           {"batch_size", batch_size},
           {"max_steps", max_steps},
           {"seed", seed},
           {"eval_every", eval_every},
           {"filter_pct", filter_pct},
           {"psi_reward_scale", psi_reward_scale},
           {"awr_beta", awr_beta},
           {"awr_clip", awr_clip},
           {"early_stop", early_stop},
           {"min_steps", min_steps},
           {"model", model_to_json(model)}};
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    require(!j.is_discarded() && j.is_object(), ErrorKind::io,
            "training config is not a JSON object");
    TrainConfig c;
    if (j.contains("tau")) c.tau = j.at("tau").get<double>();
    if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
    if (j.contains("gamma")) c.gamma = j.at("gamma").get<double>();
    if (j.contains("polyak")) c.polyak = j.at("polyak").get<double>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int64_t>();
    if (j.contains("max_steps")) c.max_steps = j.at("max_steps").get<int64_t>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("eval_every")) c.eval_every = j.at("eval_every").get<int64_t>();
    if (j.contains("filter_pct")) c.filter_pct = j.at("filter_pct").get<double>();
    if (j.contains("psi_reward_scale"))
        c.psi_reward_scale = j.at("psi_reward_scale").get<double>();
    if (j.contains("awr_beta")) c.awr_beta = j.at("awr_beta").get<double>();
    if (j.contains("awr_clip")) c.awr_clip = j.at("awr_clip").get<double>();
    if (j.contains("early_stop")) c.early_stop = j.at("early_stop").get<bool>();
    if (j.contains("min_steps")) c.min_steps = j.at("min_steps").get<int64_t>();
    if (j.contains("model")) c.model = model_from_json(j.at("model"), c.model);
    return c;
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "cannot open training config: " + path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    return from_json(text);
}

bool is_validation_episode(int64_t index) {
    return mix64(static_cast<uint64_t>(index)) % 10 == 0;
}

namespace {

struct StepLoss {
    double total = 0.0, q = 0.0, v = 0.0, cql = 0.0;
};

// Per-action constants a supervised loss needs, sliced per episode once up front.
struct Precomputed {
    std::vector<std::vector<float>> per_episode;  // indexed like the dataset

    std::vector<float> slice(std::span<const int64_t> ids) const {
        std::vector<float> out;
        for (int64_t id : ids)
            for (float x : per_episode[static_cast<size_t>(id)]) out.push_back(x);
        return out;
    }
};

double node_value(const Graph<float>::Run& run, NodeId id) {
    if (id < 0) return 0.0;
    return static_cast<double>(run.value(id).data[0]);
}

double scalar_of(const Tensor<float>& t) { return static_cast<double>(t.data[0]); }

void check_finite(const StepLoss& l, int64_t step) {
    auto check = [&](double x, const char* what) {
        if (!std::isfinite(x))
            fail(ErrorKind::numeric, std::string("non-finite ") + what + " at step " +
                                         std::to_string(step));
    };
    check(l.q, "q term");
    check(l.v, "v term");
    check(l.cql, "conservatism term");
    check(l.total, "loss");
}

class CsvWriter {
  public:
    CsvWriter(const std::string& path, const std::string& header) : out_(path) {
        require(out_.good(), ErrorKind::io, "cannot write " + path);
        out_ << header << "\n";
    }
    void row(std::initializer_list<double> values) {
        bool first = true;
        for (double v : values) {
            if (!first) out_ << ",";
            first = false;
            char buf[40];
            if (v == std::floor(v) && std::abs(v) < 1e15)
                std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(v));
            else
                std::snprintf(buf, sizeof buf, "%.9g", v);
            out_ << buf;
        }
        out_ << "\n";
        out_.flush();
    }

  private:
    std::ofstream out_;
};

}  // namespace

TrainResult train(Algo algo, const std::vector<Trajectory>& data, const TrainConfig& cfg_in,
                  const std::string& out_dir, const Weights* behavior,
                  const Weights* value) {
    TrainConfig cfg = cfg_in;
    if (algo == Algo::single_step) cfg.tau = 0.5;  // single-step is this objective by definition
    cfg.model.head = algo_uses_value_head(algo) ? HeadKind::value : HeadKind::lm;
    cfg.validate();
    require(!data.empty(), ErrorKind::domain, "training dataset is empty");
    require(algo != Algo::psi || behavior != nullptr, ErrorKind::state,
            "psi training needs a behavior checkpoint");
    require(algo != Algo::awr || value != nullptr, ErrorKind::state,
            "awr training needs a value checkpoint");

    std::filesystem::create_directories(out_dir);

    std::vector<Trajectory> working =
        algo == Algo::filtered_bc ? wordle::filter_top_percent(data, cfg.filter_pct) : data;
    std::vector<int64_t> train_ids, val_ids;
    for (int64_t i = 0; i < static_cast<int64_t>(working.size()); ++i)
        (is_validation_episode(i) ? val_ids : train_ids).push_back(i);
    require(!train_ids.empty(), ErrorKind::domain, "no training episodes after the split");

    // Frozen-model quantities never change during training: compute once per episode.
    Precomputed log_pi, weights_awr;
    if (algo == Algo::psi) {
        log_pi.per_episode.resize(working.size());
        for (size_t i = 0; i < working.size(); ++i) {
            const int64_t id[1] = {static_cast<int64_t>(i)};
            log_pi.per_episode[i] = behavior_log_probs(*behavior, make_action_batch(working, id));
        }
    }
    if (algo == Algo::awr) {
        weights_awr.per_episode.resize(working.size());
        for (size_t i = 0; i < working.size(); ++i) {
            const int64_t id[1] = {static_cast<int64_t>(i)};
            weights_awr.per_episode[i] =
                awr_weights(*value, make_action_batch(working, id), cfg.awr_beta, cfg.awr_clip);
        }
    }

    Weights online = init_weights(cfg.model, cfg.seed);
    Weights target = online;  // value algorithms track a Polyak copy
    AdamState opt;
    AdamwConfig opt_cfg;
    opt_cfg.lr = cfg.lr;

    const bool value_head = algo_uses_value_head(algo);
    const bool needs_v_next = algo == Algo::ilql || algo == Algo::single_step;
    ValueLossConfig vcfg{cfg.tau, cfg.alpha, cfg.gamma};
    PsiLossConfig pcfg{cfg.psi_reward_scale, 1.0, cfg.gamma};

    // Loss over a fixed episode set, eval mode (no dropout), one graph per chunk,
    // aggregated as a mean over all agent actions.
    auto dataset_loss = [&](const std::vector<int64_t>& ids) {
        double sum = 0.0;
        int64_t actions = 0;
        for (size_t begin = 0; begin < ids.size();
             begin += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(ids.size(), begin + static_cast<size_t>(cfg.batch_size));
            std::span<const int64_t> chunk(ids.data() + begin, end - begin);
            ActionBatch batch = make_action_batch(working, chunk);
            Graph<float> g;
            ForwardNodes f = build_forward<float>(g, cfg.model, batch.tokens, false, nullptr);
            LossNodes loss;
            ValueTargets targets;
            if (value_head)
                targets = compute_value_targets(batch, target, needs_v_next ? &online : nullptr,
                                                wordle::letter_tokens());
            std::vector<float> aux;
            switch (algo) {
                case Algo::ilql:
                case Algo::single_step:
                    loss = build_ilql_loss(g, f, batch, targets, vcfg);
                    break;
                case Algo::cql:
                    loss = build_per_token_cql_loss(g, f, batch, targets, vcfg);
                    break;
                case Algo::psi:
                    aux = log_pi.slice(chunk);
                    loss = build_psi_loss(g, f, batch, targets, aux, pcfg);
                    break;
                case Algo::bc:
                case Algo::filtered_bc:
                    loss = build_bc_loss(g, f, batch);
                    break;
                case Algo::awr:
                    aux = weights_awr.slice(chunk);
                    loss = build_awr_loss(g, f, batch, aux);
                    break;
            }
            sum += scalar_of(g.evaluate(loss.total, bind_weights(online))) *
                   static_cast<double>(batch.count());
            actions += batch.count();
        }
        return sum / static_cast<double>(actions);
    };

    CsvWriter train_log(out_dir + "/train_log.csv",
                        "step,total_loss,q_loss,v_loss,cql_loss,grad_norm,wall_ms");
    CsvWriter val_log(out_dir + "/val_log.csv", "step,train_loss,val_loss");

    TrainResult result;
    double window_sum = 0.0;
    int64_t window_n = 0;
    int64_t step = 0;
    std::vector<int64_t> order;
    size_t cursor = 0;
    int64_t epoch = 0;

    while (step < cfg.max_steps) {
        if (cursor >= order.size()) {
            order = train_ids;
            Rng shuffle_rng = Rng::stream(cfg.seed, 0x5e9a11ull + static_cast<uint64_t>(epoch));
            shuffle_rng.shuffle(order);
            cursor = 0;
            ++epoch;
        }
        const size_t take = std::min(static_cast<size_t>(cfg.batch_size), order.size() - cursor);
        std::span<const int64_t> ids(order.data() + cursor, take);
        cursor += take;
        ++step;

        const auto t0 = std::chrono::steady_clock::now();
        ActionBatch batch = make_action_batch(working, ids);
        ValueTargets targets;
        if (value_head)
            targets = compute_value_targets(batch, target, needs_v_next ? &online : nullptr,
                                            wordle::letter_tokens());

        Rng drop_rng = Rng::stream(cfg.seed, 0xd407ull * 0x10000ull + static_cast<uint64_t>(step));
        Graph<float> g;
        ForwardNodes f = build_forward<float>(g, cfg.model, batch.tokens, true, &drop_rng);
        LossNodes loss;
        std::vector<float> aux;
        switch (algo) {
            case Algo::ilql:
            case Algo::single_step:
                loss = build_ilql_loss(g, f, batch, targets, vcfg);
                break;
            case Algo::cql:
                loss = build_per_token_cql_loss(g, f, batch, targets, vcfg);
                break;
            case Algo::psi:
                aux = log_pi.slice(ids);
                loss = build_psi_loss(g, f, batch, targets, aux, pcfg);
                break;
            case Algo::bc:
            case Algo::filtered_bc:
                loss = build_bc_loss(g, f, batch);
                break;
            case Algo::awr:
                aux = weights_awr.slice(ids);
                loss = build_awr_loss(g, f, batch, aux);
                break;
        }

        Graph<float>::Run run = g.gradient(loss.total, bind_weights(online));
        StepLoss l{node_value(run, loss.total), node_value(run, loss.q_term),
                   node_value(run, loss.v_term), node_value(run, loss.cql_term)};
        check_finite(l, step);
        adamw_step(opt, opt_cfg, online.order, online.params, run.grads);
        if (value_head) polyak_update(target, online, cfg.polyak);

        const double wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        train_log.row({static_cast<double>(step), l.total, l.q, l.v, l.cql,
                       grad_norm(online.order, run.grads), wall_ms});
        window_sum += l.total;
        ++window_n;
        result.final_loss = l.total;

        if (step % cfg.eval_every == 0 && !val_ids.empty()) {
            const double train_avg = window_sum / static_cast<double>(window_n);
            const double val = dataset_loss(val_ids);
            val_log.row({static_cast<double>(step), train_avg, val});
            window_sum = 0.0;
            window_n = 0;
            const bool supervised = algo == Algo::bc || algo == Algo::filtered_bc;
            if (supervised && cfg.early_stop && step >= cfg.min_steps && val > train_avg) {
                result.early_stopped = true;
                break;
            }
        }
    }

    result.steps_run = step;
    result.weights = online;
    CheckpointMeta meta;
    meta.seed = cfg.seed;
    meta.step = step;
    json meta_cfg = json::parse(cfg.to_json());
    meta_cfg["algo"] = algo_name(algo);
    meta.train_config_json = meta_cfg.dump(2);
    save_checkpoint(out_dir, online, meta);
    return result;
}

}  // namespace ilql
