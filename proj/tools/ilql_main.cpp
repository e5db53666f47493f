#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ilql/datagen.hpp"
#include "ilql/decode.hpp"
#include "ilql/error.hpp"
#include "ilql/evalharness.hpp"
#include "ilql/model.hpp"
#include "ilql/rng.hpp"
#include "ilql/trainer.hpp"
#include "ilql/wordle.hpp"
#include "ilql/wordlist.hpp"

namespace {

using ilql::ErrorKind;
using json = nlohmann::json;

void print_json(const json& j) { std::printf("%s\n", j.dump().c_str()); }

ilql::BetaPoint parse_beta_arg(const std::string& s) {
    ilql::BetaPoint b;
    if (s == "inf") {
        b.inf = true;
        return b;
    }
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    ilql::require(!s.empty() && end == s.c_str() + s.size() && std::isfinite(v) && v >= 0.0,
                  ErrorKind::domain, "bad beta value: " + s);
    b.beta = v;
    return b;
}

json beta_to_json(const ilql::BetaPoint& b) {
    if (b.inf) return json("inf");
    return json(b.beta);
}

ilql::LoadedCheckpoint load_typed(const std::string& dir, ilql::HeadKind want) {
    ilql::LoadedCheckpoint ck = ilql::load_checkpoint(dir);
    ilql::require(ck.weights.config.head == want, ErrorKind::state,
                  std::string(want == ilql::HeadKind::value ? "expected a value checkpoint: "
                                                            : "expected a behavior checkpoint: ") +
                      dir);
    return ck;
}

json report_json(const ilql::EvalReport& rep) {
    return json{{"games", rep.games},
                {"mean_return", rep.mean_return},
                {"stderr", rep.stderr_mean},
                {"entropy_nats", rep.entropy_nats},
                {"solve_hist", rep.solve_hist}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"offline RL for token-level Wordle agents"};
    app.require_subcommand(1);

    // gen-vocab
    struct {
        int64_t size = 0;
        uint64_t seed = 0;
        std::string out;
    } gv;
    auto* sc_gv = app.add_subcommand("gen-vocab", "Sample a word list from the built-in pool");
    sc_gv->add_option("--size", gv.size, "number of words")->required();
    sc_gv->add_option("--seed", gv.seed, "sampling seed");
    sc_gv->add_option("--out", gv.out, "output path, one word per line")->required();
    sc_gv->callback([&] {
        const std::vector<std::string>& pool = ilql::builtin_words();
        ilql::require(gv.size > 0, ErrorKind::domain, "vocab size must be positive");
        ilql::require(gv.size <= static_cast<int64_t>(pool.size()), ErrorKind::domain,
                      "vocab size exceeds the built-in pool of " +
                          std::to_string(pool.size()) + " words");
        std::vector<std::string> words = pool;
        ilql::Rng rng(gv.seed);
        rng.shuffle(words);
        words.resize(static_cast<size_t>(gv.size));
        std::sort(words.begin(), words.end());
        ilql::wordle::Vocab::from_words(std::move(words)).save(gv.out);
        print_json({{"words", gv.size}, {"out", gv.out}});
    });

    // gen-synthetic
    struct {
        std::string vocab;
        int64_t total = 0;
        std::vector<double> props = {0.09, 0.455, 0.455};
        uint64_t seed = 0;
        std::string out;
    } gs;
    auto* sc_gs = app.add_subcommand("gen-synthetic", "Generate a scripted-policy mixture dataset");
    sc_gs->add_option("--vocab", gs.vocab, "vocab file")->required();
    sc_gs->add_option("--total", gs.total, "episode count")->required();
    sc_gs->add_option("--props", gs.props, "upper-bound,suboptimal,adversarial proportions")
        ->delimiter(',')
        ->expected(1, 3);
    sc_gs->add_option("--seed", gs.seed, "dataset seed");
    sc_gs->add_option("--out", gs.out, "output JSONL path")->required();
    sc_gs->callback([&] {
        ilql::require(gs.props.size() == 3, ErrorKind::domain,
                      "--props needs exactly three comma-separated values");
        ilql::wordle::Vocab vocab = ilql::wordle::Vocab::load(gs.vocab);
        ilql::wordle::MixtureSpec spec;
        spec.proportions = {gs.props[0], gs.props[1], gs.props[2]};
        spec.total = gs.total;
        spec.seed = gs.seed;
        std::vector<ilql::wordle::Trajectory> data = ilql::wordle::generate_mixture(spec, vocab);
        ilql::wordle::save_trajectories(gs.out, data);
        ilql::wordle::DatasetManifest man =
            ilql::wordle::make_manifest("synthetic", gs.vocab, gs.seed, spec.proportions, data);
        ilql::wordle::save_manifest(gs.out + ".manifest.json", man);
        json counts = json::object();
        for (const auto& [tag, n] : man.counts) counts[tag] = n;
        print_json({{"episodes", static_cast<int64_t>(data.size())},
                    {"counts", counts},
                    {"out", gs.out}});
    });

    // gen-rows
    struct {
        std::string data;
        std::string out;
    } gr;
    auto* sc_gr = app.add_subcommand("gen-rows", "Strip episodes down to published color grids");
    sc_gr->add_option("--data", gr.data, "trajectory JSONL")->required();
    sc_gr->add_option("--out", gr.out, "color-grid JSONL path")->required();
    sc_gr->callback([&] {
        std::vector<ilql::wordle::Trajectory> data = ilql::wordle::load_trajectories(gr.data);
        std::vector<ilql::wordle::ColorRows> grids = ilql::wordle::strip_to_color_rows(data);
        ilql::wordle::save_color_rows(gr.out, grids);
        print_json({{"grids", static_cast<int64_t>(grids.size())}, {"out", gr.out}});
    });

    // retrofit
    struct {
        std::string rows;
        std::string vocab;
        uint64_t seed = 0;
        std::string out;
    } rf;
    auto* sc_rf = app.add_subcommand("retrofit", "Rebuild playable episodes from color grids");
    sc_rf->add_option("--rows", rf.rows, "color-grid JSONL")->required();
    sc_rf->add_option("--vocab", rf.vocab, "vocab file")->required();
    sc_rf->add_option("--seed", rf.seed, "sampling seed");
    sc_rf->add_option("--out", rf.out, "output JSONL path")->required();
    sc_rf->callback([&] {
        std::vector<ilql::wordle::ColorRows> grids = ilql::wordle::load_color_rows(rf.rows);
        ilql::wordle::Vocab vocab = ilql::wordle::Vocab::load(rf.vocab);
        std::vector<ilql::wordle::Trajectory> data =
            ilql::wordle::retrofit_dataset(grids, vocab, rf.seed);
        ilql::wordle::save_trajectories(rf.out, data);
        ilql::wordle::DatasetManifest man =
            ilql::wordle::make_manifest("retrofit", rf.vocab, rf.seed, {0.0, 0.0, 0.0}, data);
        ilql::wordle::save_manifest(rf.out + ".manifest.json", man);
        print_json({{"grids", static_cast<int64_t>(grids.size())},
                    {"retrofitted", static_cast<int64_t>(data.size())},
                    {"out", rf.out}});
    });

    // gen-probes
    struct {
        std::string data;
        std::string vocab;
        std::string out;
    } gp;
    auto* sc_gp = app.add_subcommand("gen-probes", "Extract third-turn value probes");
    sc_gp->add_option("--data", gp.data, "trajectory JSONL")->required();
    sc_gp->add_option("--vocab", gp.vocab, "vocab file")->required();
    sc_gp->add_option("--out", gp.out, "probe JSONL path")->required();
    sc_gp->callback([&] {
        std::vector<ilql::wordle::Trajectory> data = ilql::wordle::load_trajectories(gp.data);
        ilql::wordle::Vocab vocab = ilql::wordle::Vocab::load(gp.vocab);
        std::vector<ilql::wordle::Probe> probes = ilql::wordle::make_probes(data, vocab);
        ilql::wordle::save_probes(gp.out, probes);
        print_json({{"episodes", static_cast<int64_t>(data.size())},
                    {"probes", static_cast<int64_t>(probes.size())},
                    {"out", gp.out}});
    });

    // train
    struct {
        std::string algo;
        std::string data;
        std::string config;
        std::string out;
        std::string pi_beta;
        std::string value;
        double tau = 0.0;
        double alpha = 0.0;
        double pct = 0.0;
        uint64_t seed = 0;
    } tr;
    auto* sc_tr = app.add_subcommand("train", "Train one algorithm on a dataset");
    sc_tr->add_option("--algo", tr.algo, "ilql|single-step|cql|psi|bc|filtered-bc|awr")
        ->required();
    sc_tr->add_option("--data", tr.data, "trajectory JSONL")->required();
    auto* opt_tau = sc_tr->add_option("--tau", tr.tau, "expectile");
    auto* opt_alpha = sc_tr->add_option("--alpha", tr.alpha, "conservatism weight");
    auto* opt_pct = sc_tr->add_option("--pct", tr.pct, "filtered-bc keep percentage");
    auto* opt_seed = sc_tr->add_option("--seed", tr.seed, "training seed");
    sc_tr->add_option("--config", tr.config, "TrainConfig JSON file");
    sc_tr->add_option("--out", tr.out, "checkpoint directory")->required();
    sc_tr->add_option("--pi-beta", tr.pi_beta, "behavior checkpoint (psi)");
    sc_tr->add_option("--value", tr.value, "frozen value checkpoint (awr)");
    sc_tr->callback([&] {
        ilql::Algo algo = ilql::algo_from_string(tr.algo);
        ilql::TrainConfig cfg = tr.config.empty()
                                    ? ilql::TrainConfig{}
                                    : ilql::TrainConfig::from_json_file(tr.config);
        if (opt_tau->count() > 0) cfg.tau = tr.tau;
        if (opt_alpha->count() > 0) cfg.alpha = tr.alpha;
        if (opt_pct->count() > 0) cfg.filter_pct = tr.pct;
        if (opt_seed->count() > 0) cfg.seed = tr.seed;
        std::vector<ilql::wordle::Trajectory> data = ilql::wordle::load_trajectories(tr.data);
        std::optional<ilql::LoadedCheckpoint> behavior;
        std::optional<ilql::LoadedCheckpoint> value;
        if (!tr.pi_beta.empty()) behavior = load_typed(tr.pi_beta, ilql::HeadKind::lm);
        if (!tr.value.empty()) value = load_typed(tr.value, ilql::HeadKind::value);
        ilql::TrainResult res =
            ilql::train(algo, data, cfg, tr.out, behavior ? &behavior->weights : nullptr,
                        value ? &value->weights : nullptr);
        print_json({{"algo", ilql::algo_name(algo)},
                    {"episodes", static_cast<int64_t>(data.size())},
                    {"steps", res.steps_run},
                    {"final_loss", res.final_loss},
                    {"early_stopped", res.early_stopped},
                    {"out", tr.out}});
    });

    // eval
    struct {
        std::string pi_beta;
        std::string value;
        std::string vocab;
        std::string beta = "0";
        int64_t games = 256;
        uint64_t seed = 0;
    } ev;
    auto* sc_ev = app.add_subcommand("eval", "Greedy rollouts of an extracted policy");
    sc_ev->add_option("--pi-beta", ev.pi_beta, "behavior checkpoint");
    sc_ev->add_option("--value", ev.value, "value checkpoint");
    sc_ev->add_option("--vocab", ev.vocab, "vocab file (answer pool)")->required();
    sc_ev->add_option("--beta", ev.beta, "advantage multiplier, or inf");
    sc_ev->add_option("--games", ev.games, "rollout count");
    sc_ev->add_option("--seed", ev.seed, "evaluation seed");
    sc_ev->callback([&] {
        ilql::BetaPoint beta = parse_beta_arg(ev.beta);
        ilql::wordle::Vocab vocab = ilql::wordle::Vocab::load(ev.vocab);
        bool need_pi = !beta.inf;
        bool need_value = beta.inf || beta.beta != 0.0;
        std::optional<ilql::LoadedCheckpoint> pi;
        std::optional<ilql::LoadedCheckpoint> val;
        if (need_pi) {
            ilql::require(!ev.pi_beta.empty(), ErrorKind::domain,
                          "finite beta needs --pi-beta");
            pi = load_typed(ev.pi_beta, ilql::HeadKind::lm);
        }
        if (need_value) {
            ilql::require(!ev.value.empty(), ErrorKind::domain,
                          "nonzero beta needs --value");
            val = load_typed(ev.value, ilql::HeadKind::value);
        }
        ilql::PolicyModels models;
        if (pi) models.pi_beta = &pi->weights;
        if (val) models.value = &val->weights;
        ilql::ExtractionSpec spec;
        spec.beta = beta.inf ? 0.0 : beta.beta;
        spec.beta_inf = beta.inf;
        ilql::EvalReport rep = ilql::evaluate_policy(
            vocab,
            [&](ilql::wordle::GameState game, ilql::Rng& rng) {
                return ilql::decode_episode(std::move(game), models, spec, rng);
            },
            ev.games, ev.seed);
        json out = report_json(rep);
        out["beta"] = beta_to_json(beta);
        print_json(out);
    });

    // sweep
    struct {
        std::string grid;
        std::string out = "suite.csv";
    } sw;
    auto* sc_sw = app.add_subcommand("sweep", "Evaluate the full checkpoint grid");
    sc_sw->add_option("--grid", sw.grid, "grid config JSON")->required();
    sc_sw->add_option("--out", sw.out, "suite CSV path");
    sc_sw->callback([&] {
        ilql::SuiteResult result = ilql::run_suite(sw.grid);
        ilql::save_suite_csv(sw.out, result);
        json best = json::array();
        for (const ilql::SuiteCell& c : result.rows) {
            if (!c.best) continue;
            json row{{"algo", c.algo}, {"mean_return", c.report.mean_return}};
            if (c.has_tau) row["tau"] = c.tau;
            if (c.has_pct) row["pct"] = c.pct;
            if (c.has_beta) row["beta"] = beta_to_json(c.beta);
            best.push_back(std::move(row));
        }
        print_json({{"rows", static_cast<int64_t>(result.rows.size())},
                    {"skipped", result.skipped},
                    {"best", best},
                    {"out", sw.out}});
    });

    // beta-sweep
    struct {
        std::string vocab;
        std::string pi_beta;
        std::string value;
        std::string betas = "0,1,2,4,8,16,inf";
        int64_t games = 256;
        uint64_t seed = 0;
        std::string out;
    } bs;
    auto* sc_bs = app.add_subcommand("beta-sweep", "Sampled rollouts across a beta range");
    sc_bs->add_option("--vocab", bs.vocab, "vocab file")->required();
    sc_bs->add_option("--pi-beta", bs.pi_beta, "behavior checkpoint")->required();
    sc_bs->add_option("--value", bs.value, "value checkpoint");
    sc_bs->add_option("--betas", bs.betas, "comma-separated betas, inf allowed");
    sc_bs->add_option("--games", bs.games, "rollouts per beta");
    sc_bs->add_option("--seed", bs.seed, "evaluation seed");
    sc_bs->add_option("--out", bs.out, "CSV path")->required();
    sc_bs->callback([&] {
        std::vector<ilql::BetaPoint> betas;
        std::string token;
        for (size_t i = 0; i <= bs.betas.size(); ++i) {
            if (i == bs.betas.size() || bs.betas[i] == ',') {
                ilql::require(!token.empty(), ErrorKind::domain, "empty beta entry");
                betas.push_back(parse_beta_arg(token));
                token.clear();
            } else {
                token.push_back(bs.betas[i]);
            }
        }
        bool need_value = false;
        for (const ilql::BetaPoint& b : betas) need_value |= (b.inf || b.beta != 0.0);
        ilql::wordle::Vocab vocab = ilql::wordle::Vocab::load(bs.vocab);
        ilql::LoadedCheckpoint pi = load_typed(bs.pi_beta, ilql::HeadKind::lm);
        std::optional<ilql::LoadedCheckpoint> val;
        if (need_value) {
            ilql::require(!bs.value.empty(), ErrorKind::domain, "nonzero betas need --value");
            val = load_typed(bs.value, ilql::HeadKind::value);
        }
        ilql::PolicyModels models;
        models.pi_beta = &pi.weights;
        if (val) models.value = &val->weights;
        std::vector<ilql::BetaSweepRow> rows =
            ilql::beta_sweep(vocab, models, betas, bs.games, bs.seed);
        ilql::save_beta_sweep_csv(bs.out, rows);
        print_json({{"points", static_cast<int64_t>(rows.size())}, {"out", bs.out}});
    });

    // diagnose-q
    struct {
        std::string value_a;
        std::string value_b;
        std::string probes;
    } dq;
    auto* sc_dq = app.add_subcommand("diagnose-q", "Compare two value functions on probes");
    sc_dq->add_option("--value-a", dq.value_a, "value checkpoint A")->required();
    sc_dq->add_option("--value-b", dq.value_b, "value checkpoint B")->required();
    sc_dq->add_option("--probes", dq.probes, "probe JSONL")->required();
    sc_dq->callback([&] {
        std::vector<ilql::wordle::Probe> probes = ilql::wordle::load_probes(dq.probes);
        ilql::LoadedCheckpoint a = load_typed(dq.value_a, ilql::HeadKind::value);
        ilql::LoadedCheckpoint b = load_typed(dq.value_b, ilql::HeadKind::value);
        double pa = ilql::q_preference(a.weights, probes);
        double pb = ilql::q_preference(b.weights, probes);
        print_json({{"probes", static_cast<int64_t>(probes.size())},
                    {"value_a", pa},
                    {"value_b", pb},
                    {"gap", pa - pb}});
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() != 0) {
            json err{{"error", "usage"}, {"message", e.what()}};
            std::fprintf(stderr, "%s\n", err.dump().c_str());
        }
        return app.exit(e);
    } catch (const ilql::Error& e) {
        json err{{"error", ilql::error_kind_name(e.kind())}, {"message", e.what()}};
        std::fprintf(stderr, "%s\n", err.dump().c_str());
        return 1;
    } catch (const std::exception& e) {
        json err{{"error", "internal"}, {"message", e.what()}};
        std::fprintf(stderr, "%s\n", err.dump().c_str());
        return 1;
    }
    return 0;
}
