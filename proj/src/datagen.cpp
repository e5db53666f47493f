#include "ilql/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

#include "ilql/error.hpp"

namespace ilql::wordle {

using nlohmann::json;

const char* policy_name(ScriptedPolicyKind kind) {
    switch (kind) {
        case ScriptedPolicyKind::upper_bound: return "upper_bound";
        case ScriptedPolicyKind::suboptimal: return "suboptimal";
        case ScriptedPolicyKind::adversarial: return "adversarial";
    }
    fail(ErrorKind::domain, "unknown policy kind");
}

std::vector<int> consistent_indices(const Vocab& vocab, const GameState& game) {
    std::vector<int> out;
    for (int i = 0; i < vocab.size(); ++i)
        if (consistent(vocab.words[i], game)) out.push_back(i);
    return out;
}

namespace {

int feedback_pattern(const Feedback& fb) {
    int id = 0;
    for (Color c : fb) id = id * 3 + static_cast<int>(c);
    return id;
}

constexpr int kNumPatterns = 243;  // 3^5

}  // namespace

double information_gain_bits(const std::string& guess,
                             const std::vector<std::string>& candidates) {
    require(!candidates.empty(), ErrorKind::domain,
            "information gain needs at least one candidate");
    std::array<int, kNumPatterns> cell{};
    for (const std::string& answer : candidates)
        ++cell[feedback_pattern(compute_feedback(guess, answer))];
    const double n = static_cast<double>(candidates.size());
    double expected = 0.0;  // E[posterior entropy]; singleton and all-green cells add 0
    for (int count : cell)
        if (count > 1) expected += (count / n) * std::log2(static_cast<double>(count));
    return std::log2(n) - expected;
}

std::string policy_upper_bound(const GameState& game, const Vocab& vocab) {
    require(!game.done, ErrorKind::state, "policy queried on a finished game");
    std::vector<std::string> candidates;
    for (int i : consistent_indices(vocab, game)) candidates.push_back(vocab.words[i]);
    require(!candidates.empty(), ErrorKind::state,
            "no vocab word is consistent with the history");
    int best = -1;
    double best_gain = 0.0, best_solve = 0.0;
    for (int i = 0; i < vocab.size(); ++i) {
        const std::string& guess = vocab.words[i];
        double gain = information_gain_bits(guess, candidates);
        double solve = consistent(guess, game) ? 1.0 / candidates.size() : 0.0;
        if (best < 0 || gain > best_gain || (gain == best_gain && solve > best_solve)) {
            best = i;
            best_gain = gain;
            best_solve = solve;
        }
    }
    return vocab.words[best];
}

std::string policy_suboptimal(const GameState& game, const Vocab& vocab, Rng& rng) {
    require(!game.done, ErrorKind::state, "policy queried on a finished game");
    if (!rng.coin()) return vocab.words[rng.uniform_int(static_cast<uint64_t>(vocab.size()))];
    std::vector<int> pool = consistent_indices(vocab, game);
    if (pool.empty()) return vocab.words[rng.uniform_int(static_cast<uint64_t>(vocab.size()))];
    return vocab.words[pool[rng.uniform_int(pool.size())]];
}

std::string policy_adversarial(const GameState& game, const Vocab& vocab) {
    require(!game.done, ErrorKind::state, "policy queried on a finished game");
    const int turn = game.turns_taken() + 1;
    if (turn <= 2) return policy_upper_bound(game, vocab);
    return game.history[turn % 2 == 1 ? 0 : 1].first;
}

std::string scripted_guess(ScriptedPolicyKind kind, const GameState& game,
                           const Vocab& vocab, Rng& rng) {
    switch (kind) {
        case ScriptedPolicyKind::upper_bound: return policy_upper_bound(game, vocab);
        case ScriptedPolicyKind::suboptimal: return policy_suboptimal(game, vocab, rng);
        case ScriptedPolicyKind::adversarial: return policy_adversarial(game, vocab);
    }
    fail(ErrorKind::domain, "unknown policy kind");
}

Trajectory run_scripted_episode(ScriptedPolicyKind kind, const Vocab& vocab, Rng& rng) {
    GameState game = reset(vocab, rng);
    while (!game.done) step(game, scripted_guess(kind, game, vocab, rng));
    return make_trajectory(game, policy_name(kind));
}

void MixtureSpec::validate() const {
    double sum = 0.0;
    int nonzero = 0;
    for (double p : proportions) {
        require(p >= 0.0, ErrorKind::domain, "mixture proportions must be nonnegative");
        sum += p;
        if (p > 0.0) ++nonzero;
    }
    require(std::abs(sum - 1.0) <= 1e-9, ErrorKind::domain,
            "mixture proportions must sum to 1");
    require(total >= nonzero, ErrorKind::domain,
            "mixture total is smaller than the number of policies with nonzero share");
}

std::array<int64_t, 3> MixtureSpec::counts() const {
    validate();
    std::array<int64_t, 3> n{};
    int64_t assigned = 0;
    for (size_t i = 0; i < n.size(); ++i) {
        n[i] = std::llround(proportions[i] * static_cast<double>(total));
        assigned += n[i];
    }
    size_t largest = std::distance(
        proportions.begin(), std::max_element(proportions.begin(), proportions.end()));
    n[largest] += total - assigned;
    require(n[largest] >= 0, ErrorKind::domain, "mixture rounding left a negative count");
    return n;
}

std::vector<Trajectory> generate_mixture(const MixtureSpec& spec, const Vocab& vocab) {
    const std::array<int64_t, 3> n = spec.counts();
    std::vector<Trajectory> out;
    out.reserve(static_cast<size_t>(spec.total));
    int64_t episode = 0;
    for (size_t k = 0; k < n.size(); ++k) {
        const auto kind = static_cast<ScriptedPolicyKind>(k);
        for (int64_t i = 0; i < n[k]; ++i, ++episode) {
            Rng rng = Rng::stream(spec.seed, static_cast<uint64_t>(episode));
            out.push_back(run_scripted_episode(kind, vocab, rng));
        }
    }
    return out;
}

std::vector<Trajectory> filter_top_percent(const std::vector<Trajectory>& data,
                                           double pct) {
    require(pct > 0.0 && pct <= 100.0, ErrorKind::domain,
            "filter percentage must be in (0, 100]");
    require(!data.empty(), ErrorKind::domain, "cannot filter an empty dataset");
    std::vector<double> returns;
    returns.reserve(data.size());
    for (const Trajectory& t : data) returns.push_back(trajectory_return(t));
    const auto n = static_cast<int64_t>(returns.size());
    const int64_t keep =
        std::max<int64_t>(1, std::llround(pct * static_cast<double>(n) / 100.0));
    std::nth_element(returns.begin(), returns.begin() + (keep - 1), returns.end(),
                     std::greater<>());
    const double threshold = returns[keep - 1];
    std::vector<Trajectory> out;
    for (const Trajectory& t : data)
        if (trajectory_return(t) >= threshold) out.push_back(t);
    return out;
}

std::vector<ColorRows> strip_to_color_rows(const std::vector<Trajectory>& data) {
    std::vector<ColorRows> out;
    out.reserve(data.size());
    for (const Trajectory& t : data) {
        ColorRows grid;
        for (const Feedback& fb : decode_episode(t.tokens).colors) grid.rows.push_back(fb);
        out.push_back(std::move(grid));
    }
    return out;
}

std::vector<ColorRows> load_color_rows(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "cannot open color-rows file: " + path);
    std::vector<ColorRows> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        require(!j.is_discarded() && j.is_object() && j.contains("rows"), ErrorKind::io,
                "malformed color-rows line: " + path);
        ColorRows grid;
        for (const json& row : j.at("rows")) {
            require(row.is_array() && row.size() == kWordLen, ErrorKind::io,
                    "color row is not five colors: " + path);
            Feedback fb;
            for (int i = 0; i < kWordLen; ++i) {
                const std::string s = row[i].get<std::string>();
                require(s.size() == 1, ErrorKind::io, "bad color symbol: " + s);
                fb[i] = color_from_char(s[0]);
            }
            grid.rows.push_back(fb);
        }
        out.push_back(std::move(grid));
    }
    return out;
}

void save_color_rows(const std::string& path, const std::vector<ColorRows>& grids) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::io, "cannot write color-rows file: " + path);
    for (const ColorRows& grid : grids) {
        json rows = json::array();
        for (const Feedback& fb : grid.rows) {
            json row = json::array();
            for (Color c : fb) row.push_back(std::string(1, color_char(c)));
            rows.push_back(row);
        }
        out << json{{"rows", rows}}.dump() << "\n";
    }
    require(out.good(), ErrorKind::io, "failed writing color-rows file: " + path);
}

RetrofitResult retrofit_rows(const ColorRows& grid, const Vocab& vocab, Rng& rng) {
    const auto turns = static_cast<int>(grid.rows.size());
    if (turns < 1 || turns > kMaxTurns) return {};
    for (int i = 0; i < turns; ++i)
        if (all_green(grid.rows[i]) && i != turns - 1) return {};

    // Rows are independent once the answer is fixed, so feasibility per answer is
    // just "every row has at least one matching word".
    std::vector<int> feasible;
    std::vector<std::vector<std::vector<int>>> options;  // per feasible answer, per row
    for (int a = 0; a < vocab.size(); ++a) {
        std::vector<std::vector<int>> rows_for_answer;
        bool ok = true;
        for (int r = 0; r < turns && ok; ++r) {
            std::vector<int> matches;
            for (int w = 0; w < vocab.size(); ++w)
                if (compute_feedback(vocab.words[w], vocab.words[a]) == grid.rows[r])
                    matches.push_back(w);
            if (matches.empty()) ok = false;
            else rows_for_answer.push_back(std::move(matches));
        }
        if (ok) {
            feasible.push_back(a);
            options.push_back(std::move(rows_for_answer));
        }
    }
    if (feasible.empty()) return {};

    const auto pick = rng.uniform_int(feasible.size());
    RetrofitResult result;
    result.feasible = true;
    result.answer = vocab.words[feasible[static_cast<size_t>(pick)]];
    for (const std::vector<int>& matches : options[static_cast<size_t>(pick)]) {
        const auto j = rng.uniform_int(matches.size());
        result.guesses.push_back(vocab.words[matches[static_cast<size_t>(j)]]);
    }
    return result;
}

std::vector<Trajectory> retrofit_dataset(const std::vector<ColorRows>& grids,
                                         const Vocab& vocab, uint64_t seed) {
    std::vector<Trajectory> out;
    for (size_t g = 0; g < grids.size(); ++g) {
        Rng rng = Rng::stream(seed, static_cast<uint64_t>(g));
        RetrofitResult r = retrofit_rows(grids[g], vocab, rng);
        if (!r.feasible) continue;
        GameState game = reset_with_answer(r.answer);
        for (size_t i = 0; i < r.guesses.size(); ++i) {
            require(!game.done, ErrorKind::state, "retrofit produced a move after game end");
            step(game, r.guesses[i]);
            require(game.history.back().second == grids[g].rows[i], ErrorKind::state,
                    "retrofit row failed re-simulation");
        }
        out.push_back(make_trajectory(game, "retrofit"));
    }
    return out;
}

std::vector<Probe> make_probes(const std::vector<Trajectory>& data, const Vocab& vocab) {
    std::vector<Probe> out;
    std::vector<std::vector<int>> seen;
    for (const Trajectory& t : data) {
        ParsedEpisode ep = decode_episode(t.tokens);
        if (ep.guesses.size() < 2) continue;
        if (all_green(ep.colors[0]) || all_green(ep.colors[1])) continue;

        GameState game = reset_with_answer(t.answer);
        if (policy_upper_bound(game, vocab) != ep.guesses[0]) continue;
        step(game, ep.guesses[0]);
        if (policy_upper_bound(game, vocab) != ep.guesses[1]) continue;
        step(game, ep.guesses[1]);

        Probe probe;
        probe.oracle_token = letter_token(policy_upper_bound(game, vocab)[0]);
        probe.adversarial_token = letter_token(ep.guesses[0][0]);
        if (probe.oracle_token == probe.adversarial_token) continue;
        probe.tokens = encode_episode(game);
        if (std::find(seen.begin(), seen.end(), probe.tokens) != seen.end()) continue;
        seen.push_back(probe.tokens);
        out.push_back(std::move(probe));
    }
    return out;
}

std::vector<Probe> load_probes(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "cannot open probes file: " + path);
    std::vector<Probe> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        require(!j.is_discarded() && j.is_object(), ErrorKind::io,
                "malformed probe line: " + path);
        Probe probe;
        probe.tokens = j.at("tokens").get<std::vector<int>>();
        probe.oracle_token = j.at("oracle").get<int>();
        probe.adversarial_token = j.at("adversarial").get<int>();
        require(is_letter_token(probe.oracle_token) &&
                    is_letter_token(probe.adversarial_token) &&
                    probe.oracle_token != probe.adversarial_token,
                ErrorKind::domain, "probe actions must be two distinct letters");
        out.push_back(std::move(probe));
    }
    return out;
}

void save_probes(const std::string& path, const std::vector<Probe>& probes) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::io, "cannot write probes file: " + path);
    for (const Probe& p : probes) {
        out << json{{"adversarial", p.adversarial_token},
                    {"oracle", p.oracle_token},
                    {"tokens", p.tokens}}
                   .dump()
            << "\n";
    }
    require(out.good(), ErrorKind::io, "failed writing probes file: " + path);
}

uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "cannot open file for hashing: " + path);
    uint64_t h = 14695981039346656037ull;
    char c;
    while (in.get(c)) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ull;
    }
    return h;
}

DatasetManifest make_manifest(const std::string& source, const std::string& vocab_path,
                              uint64_t seed, const std::array<double, 3>& proportions,
                              const std::vector<Trajectory>& data) {
    DatasetManifest m;
    m.source = source;
    char buf[32];
    std::snprintf(buf, sizeof buf, "fnv1a64:%016llx",
                  static_cast<unsigned long long>(fnv1a64_file(vocab_path)));
    m.vocab_hash = buf;
    m.seed = seed;
    m.proportions = proportions;
    m.total = static_cast<int64_t>(data.size());
    for (const Trajectory& t : data) {
        auto it = std::find_if(m.counts.begin(), m.counts.end(),
                               [&](const auto& kv) { return kv.first == t.provenance; });
        if (it == m.counts.end()) m.counts.emplace_back(t.provenance, 1);
        else ++it->second;
    }
    std::sort(m.counts.begin(), m.counts.end());
    return m;
}

void save_manifest(const std::string& path, const DatasetManifest& m) {
    json counts = json::object();
    for (const auto& [tag, n] : m.counts) counts[tag] = n;
    json j{{"source", m.source},
           {"vocab_hash", m.vocab_hash},
           {"seed", m.seed},
           {"proportions", m.proportions},
           {"total", m.total},
           {"counts", counts}};
    std::ofstream out(path);
    require(out.good(), ErrorKind::io, "cannot write manifest: " + path);
    out << j.dump(2) << "\n";
    require(out.good(), ErrorKind::io, "failed writing manifest: " + path);
}

}  // namespace ilql::wordle
