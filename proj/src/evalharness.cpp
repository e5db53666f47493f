#include "ilql/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <utility>

#include "json.hpp"

#include "ilql/error.hpp"

namespace ilql {

using nlohmann::json;

EvalReport evaluate_policy(const wordle::Vocab& vocab, const PlayFn& play,
                           int64_t n_games, uint64_t seed) {
    require(n_games > 0, ErrorKind::domain, "evaluate_policy needs at least one game");
    EvalReport rep;
    rep.games = n_games;
    std::vector<double> returns;
    returns.reserve(static_cast<size_t>(n_games));
    double entropy_sum = 0.0;
    int64_t entropy_games = 0;
    for (int64_t g = 0; g < n_games; ++g) {
        Rng rng = Rng::stream(seed, static_cast<uint64_t>(g));
        wordle::GameState game = wordle::reset(vocab, rng);
        DecodeResult res = play(std::move(game), rng);
        require(res.game.done, ErrorKind::state, "policy left the game unfinished");
        returns.push_back(res.episode_return);
        if (res.actions > 0) {
            entropy_sum += res.nll / static_cast<double>(res.actions);
            ++entropy_games;
        }
        if (res.game.won) {
            rep.solve_hist[static_cast<size_t>(res.game.turns_taken() - 1)] += 1;
        } else {
            rep.solve_hist[wordle::kMaxTurns] += 1;
        }
    }
    double sum = 0.0;
    for (double r : returns) sum += r;
    rep.mean_return = sum / static_cast<double>(n_games);
    if (n_games > 1) {
        double ss = 0.0;
        for (double r : returns) {
            double d = r - rep.mean_return;
            ss += d * d;
        }
        rep.stderr_mean = std::sqrt(ss / static_cast<double>(n_games - 1)) /
                          std::sqrt(static_cast<double>(n_games));
    }
    if (entropy_games > 0) {
        rep.entropy_nats = entropy_sum / static_cast<double>(entropy_games);
    }
    return rep;
}

double q_preference(const Weights& value, const std::vector<wordle::Probe>& probes) {
    require(!probes.empty(), ErrorKind::domain, "q_preference needs at least one probe");
    require(value.config.head == HeadKind::value, ErrorKind::state,
            "q_preference needs a value-head checkpoint");
    int64_t preferred = 0;
    for (const wordle::Probe& p : probes) {
        ValueForward vf = forward_value(value, p.tokens);
        int64_t last = static_cast<int64_t>(p.tokens.size()) - 1;
        auto min_q = [&](int tok) {
            return std::min(vf.q1.at(last, tok), vf.q2.at(last, tok));
        };
        if (min_q(p.oracle_token) > min_q(p.adversarial_token)) ++preferred;
    }
    return static_cast<double>(preferred) / static_cast<double>(probes.size());
}

namespace {

std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

BetaPoint parse_beta(const json& v) {
    BetaPoint b;
    if (v.is_string()) {
        require(v.get<std::string>() == "inf", ErrorKind::domain,
                "beta entries must be numbers or \"inf\"");
        b.inf = true;
        return b;
    }
    require(v.is_number(), ErrorKind::domain, "beta entries must be numbers or \"inf\"");
    b.beta = v.get<double>();
    require(b.beta >= 0.0, ErrorKind::domain, "beta must be nonnegative");
    return b;
}

std::vector<BetaPoint> beta_list(const json& section, std::vector<BetaPoint> fallback) {
    if (!section.contains("betas")) return fallback;
    std::vector<BetaPoint> out;
    for (const json& v : section.at("betas")) out.push_back(parse_beta(v));
    require(!out.empty(), ErrorKind::domain, "betas list is empty");
    return out;
}

// (numeric key, checkpoint dir) pairs of a {"<num>": dir} object, ascending by key.
std::vector<std::pair<double, std::string>> sorted_entries(const json& obj) {
    require(obj.is_object(), ErrorKind::domain, "checkpoints must map numbers to dirs");
    std::vector<std::pair<double, std::string>> v;
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        double key = 0.0;
        try {
            key = std::stod(it.key());
        } catch (const std::exception&) {
            fail(ErrorKind::domain, "checkpoint keys must be numeric, got: " + it.key());
        }
        v.emplace_back(key, it.value().get<std::string>());
    }
    std::sort(v.begin(), v.end());
    return v;
}

void mark_best(std::vector<SuiteCell>& rows) {
    auto beta_key = [](const SuiteCell& c) {
        if (!c.has_beta) return 0.0;
        return c.beta.inf ? std::numeric_limits<double>::infinity() : c.beta.beta;
    };
    std::map<std::string, size_t> best;
    for (size_t i = 0; i < rows.size(); ++i) {
        auto [it, fresh] = best.emplace(rows[i].algo, i);
        if (fresh) continue;
        const SuiteCell& cur = rows[it->second];
        const SuiteCell& cand = rows[i];
        if (cand.report.mean_return > cur.report.mean_return ||
            (cand.report.mean_return == cur.report.mean_return &&
             beta_key(cand) < beta_key(cur))) {
            it->second = i;
        }
    }
    for (const auto& [algo, idx] : best) rows[idx].best = true;
}

}  // namespace

SuiteResult run_suite(const std::string& grid_json_path) {
    std::ifstream in(grid_json_path);
    require(in.good(), ErrorKind::io, "cannot open grid config: " + grid_json_path);
    json grid;
    in >> grid;
    require(grid.is_object(), ErrorKind::domain, "grid config must be a JSON object");
    require(grid.contains("vocab"), ErrorKind::domain, "grid config needs a vocab path");
    wordle::Vocab vocab = wordle::Vocab::load(grid.at("vocab").get<std::string>());
    int64_t games = grid.value("games", int64_t{512});
    uint64_t seed = grid.value("seed", uint64_t{0});
    require(games > 0, ErrorKind::domain, "grid config needs a positive game count");

    SuiteResult out;
    std::map<std::string, LoadedCheckpoint> cache;  // stable addresses across inserts
    auto have = [](const std::string& dir) {
        return std::filesystem::exists(std::filesystem::path(dir) / "manifest.json");
    };
    auto load = [&](const std::string& dir, HeadKind want) -> const Weights& {
        auto it = cache.find(dir);
        if (it == cache.end()) it = cache.emplace(dir, load_checkpoint(dir)).first;
        require(it->second.weights.config.head == want, ErrorKind::state,
                std::string(want == HeadKind::value ? "expected a value checkpoint: "
                                                    : "expected a behavior checkpoint: ") +
                    dir);
        return it->second.weights;
    };

    const Weights* behavior = nullptr;
    std::string behavior_dir = grid.value("behavior", std::string());
    if (!behavior_dir.empty()) {
        if (have(behavior_dir)) {
            behavior = &load(behavior_dir, HeadKind::lm);
        } else {
            out.skipped.push_back("behavior: missing checkpoint " + behavior_dir);
        }
    }

    auto run_cell = [&](SuiteCell cell, PolicyModels models, ExtractionSpec spec) {
        cell.report = evaluate_policy(
            vocab,
            [&models, &spec](wordle::GameState game, Rng& rng) {
                return decode_episode(std::move(game), models, spec, rng);
            },
            games, seed);
        out.rows.push_back(std::move(cell));
    };

    if (grid.contains("ilql")) {
        const json& sec = grid.at("ilql");
        std::vector<BetaPoint> betas =
            beta_list(sec, {{4.0, false}, {8.0, false}, {16.0, false}, {0.0, true}});
        for (const auto& [tau, dir] : sorted_entries(sec.at("checkpoints"))) {
            if (!have(dir)) {
                out.skipped.push_back("ilql tau=" + fmt_num(tau) + ": missing checkpoint " + dir);
                continue;
            }
            const Weights& value = load(dir, HeadKind::value);
            for (const BetaPoint& b : betas) {
                SuiteCell cell;
                cell.algo = "ilql";
                cell.has_tau = true;
                cell.tau = tau;
                cell.has_beta = true;
                cell.beta = b;
                ExtractionSpec spec;
                PolicyModels models;
                models.value = &value;
                if (b.inf) {
                    spec.beta_inf = true;
                } else {
                    if (behavior == nullptr) {
                        out.skipped.push_back("ilql tau=" + fmt_num(tau) + " beta=" +
                                              fmt_num(b.beta) + ": missing behavior checkpoint");
                        continue;
                    }
                    spec.beta = b.beta;
                    models.pi_beta = behavior;
                }
                run_cell(cell, models, spec);
            }
        }
    }

    if (grid.contains("single_step")) {
        const json& sec = grid.at("single_step");
        std::vector<BetaPoint> betas =
            beta_list(sec, {{4.0, false}, {8.0, false}, {16.0, false}});
        std::string dir = sec.at("checkpoint").get<std::string>();
        if (!have(dir)) {
            out.skipped.push_back("single-step: missing checkpoint " + dir);
        } else {
            const Weights& value = load(dir, HeadKind::value);
            for (const BetaPoint& b : betas) {
                SuiteCell cell;
                cell.algo = "single-step";
                cell.has_beta = true;
                cell.beta = b;
                ExtractionSpec spec;
                PolicyModels models;
                models.value = &value;
                if (b.inf) {
                    spec.beta_inf = true;
                } else {
                    if (behavior == nullptr) {
                        out.skipped.push_back("single-step beta=" + fmt_num(b.beta) +
                                              ": missing behavior checkpoint");
                        continue;
                    }
                    spec.beta = b.beta;
                    models.pi_beta = behavior;
                }
                run_cell(cell, models, spec);
            }
        }
    }

    if (grid.contains("filtered_bc")) {
        for (const auto& [pct, dir] : sorted_entries(grid.at("filtered_bc").at("checkpoints"))) {
            if (!have(dir)) {
                out.skipped.push_back("filtered-bc pct=" + fmt_num(pct) +
                                      ": missing checkpoint " + dir);
                continue;
            }
            SuiteCell cell;
            cell.algo = "filtered-bc";
            cell.has_pct = true;
            cell.pct = pct;
            PolicyModels models;
            models.pi_beta = &load(dir, HeadKind::lm);
            run_cell(cell, models, ExtractionSpec{});  // beta 0: behavior policy alone
        }
    }

    if (grid.contains("bc")) {
        std::string dir = grid.at("bc").at("checkpoint").get<std::string>();
        if (!have(dir)) {
            out.skipped.push_back("bc: missing checkpoint " + dir);
        } else {
            SuiteCell cell;
            cell.algo = "bc";
            PolicyModels models;
            models.pi_beta = &load(dir, HeadKind::lm);
            run_cell(cell, models, ExtractionSpec{});
        }
    }

    mark_best(out.rows);
    return out;
}

void save_suite_csv(const std::string& path, const SuiteResult& result) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    require(f != nullptr, ErrorKind::io, "cannot write " + path);
    std::fprintf(f, "algo,tau,pct,beta,games,mean_return,stderr,entropy_nats,best\n");
    for (const SuiteCell& c : result.rows) {
        std::fprintf(f, "%s,", c.algo.c_str());
        if (c.has_tau) std::fprintf(f, "%.9g", c.tau);
        std::fputc(',', f);
        if (c.has_pct) std::fprintf(f, "%.9g", c.pct);
        std::fputc(',', f);
        if (c.has_beta) {
            if (c.beta.inf) {
                std::fputs("inf", f);
            } else {
                std::fprintf(f, "%.9g", c.beta.beta);
            }
        }
        std::fprintf(f, ",%lld,%.9g,%.9g,%.9g,%d\n", static_cast<long long>(c.report.games),
                     c.report.mean_return, c.report.stderr_mean, c.report.entropy_nats,
                     c.best ? 1 : 0);
    }
    std::fclose(f);
}

}  // namespace ilql
