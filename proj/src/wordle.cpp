#include "ilql/wordle.hpp"

#include <fstream>

#include "ilql/error.hpp"
#include "json.hpp"

using nlohmann::json;

namespace ilql::wordle {

char color_char(Color c) {
    switch (c) {
        case Color::black: return 'B';
        case Color::yellow: return 'Y';
        case Color::green: return 'G';
    }
    return '?';
}

Color color_from_char(char c) {
    switch (c) {
        case 'B': return Color::black;
        case 'Y': return Color::yellow;
        case 'G': return Color::green;
    }
    fail(ErrorKind::domain, std::string("unknown color letter '") + c + "'");
}

int color_token(Color c) {
    switch (c) {
        case Color::black: return kTokenBlack;
        case Color::yellow: return kTokenYellow;
        case Color::green: return kTokenGreen;
    }
    return -1;
}

Color token_color(int token) {
    switch (token) {
        case kTokenBlack: return Color::black;
        case kTokenYellow: return Color::yellow;
        case kTokenGreen: return Color::green;
    }
    fail(ErrorKind::domain, "token " + std::to_string(token) + " is not a color");
}

int letter_token(char c) {
    require(c >= 'a' && c <= 'z', ErrorKind::domain,
            std::string("letter token: '") + c + "' is not a lowercase letter");
    return c - 'a';
}

char token_letter(int token) {
    require(is_letter_token(token), ErrorKind::domain,
            "token " + std::to_string(token) + " is not a letter");
    return static_cast<char>('a' + token);
}

bool is_letter_token(int token) { return token >= 0 && token < 26; }

std::span<const int64_t> letter_tokens() {
    static const std::vector<int64_t> letters = [] {
        std::vector<int64_t> v(26);
        for (int i = 0; i < 26; ++i) v[static_cast<size_t>(i)] = i;
        return v;
    }();
    return letters;
}

namespace {

void validate_word(const std::string& w, const char* what) {
    require(w.size() == kWordLen, ErrorKind::domain,
            std::string(what) + " '" + w + "' must have exactly 5 letters");
    for (char c : w)
        require(c >= 'a' && c <= 'z', ErrorKind::domain,
                std::string(what) + " '" + w + "' must be lowercase a-z");
}

}  // namespace

Vocab Vocab::from_words(std::vector<std::string> words) {
    require(!words.empty(), ErrorKind::domain, "vocab: no words");
    Vocab v;
    v.words = std::move(words);
    for (size_t i = 0; i < v.words.size(); ++i) {
        validate_word(v.words[i], "vocab word");
        auto [it, fresh] = v.index_.emplace(v.words[i], static_cast<int>(i));
        (void)it;
        require(fresh, ErrorKind::domain, "vocab: duplicate word '" + v.words[i] + "'");
    }
    return v;
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "vocab: cannot open " + path);
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        words.push_back(line);
    }
    return from_words(std::move(words));
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path);
    require(out.good(), ErrorKind::io, "vocab: cannot write " + path);
    for (const std::string& w : words) out << w << "\n";
}

int Vocab::index_of(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? -1 : it->second;
}

std::vector<Color> score_guess(const std::string& guess, const std::string& answer) {
    require(!guess.empty() && guess.size() == answer.size(), ErrorKind::domain,
            "score_guess needs equal-length nonempty words");
    for (char c : guess)
        require(c >= 'a' && c <= 'z', ErrorKind::domain, "guess must be lowercase a-z");
    for (char c : answer)
        require(c >= 'a' && c <= 'z', ErrorKind::domain, "answer must be lowercase a-z");
    const size_t n = guess.size();
    std::vector<Color> fb(n, Color::black);
    int remaining[26] = {0};
    for (size_t i = 0; i < n; ++i) {
        if (guess[i] == answer[i])
            fb[i] = Color::green;
        else
            remaining[answer[i] - 'a'] += 1;
    }
    for (size_t i = 0; i < n; ++i) {
        if (fb[i] == Color::green) continue;
        int c = guess[i] - 'a';
        if (remaining[c] > 0) {
            fb[i] = Color::yellow;
            remaining[c] -= 1;
        }
    }
    return fb;
}

Feedback compute_feedback(const std::string& guess, const std::string& answer) {
    validate_word(guess, "guess");
    validate_word(answer, "answer");
    std::vector<Color> v = score_guess(guess, answer);
    Feedback fb;
    std::copy(v.begin(), v.end(), fb.begin());
    return fb;
}

bool all_green(const Feedback& fb) {
    for (Color c : fb)
        if (c != Color::green) return false;
    return true;
}

GameState reset(const Vocab& vocab, Rng& rng) {
    GameState g;
    g.answer = vocab.words[rng.uniform_int(static_cast<uint64_t>(vocab.size()))];
    return g;
}

GameState reset_with_answer(std::string answer) {
    validate_word(answer, "answer");
    GameState g;
    g.answer = std::move(answer);
    return g;
}

float step(GameState& game, const std::string& guess) {
    require(!game.done, ErrorKind::state, "step: game is already over");
    Feedback fb = compute_feedback(guess, game.answer);
    game.history.emplace_back(guess, fb);
    if (all_green(fb)) {
        game.done = true;
        game.won = true;
        return 0.0f;
    }
    if (game.turns_taken() >= kMaxTurns) game.done = true;
    return -1.0f;
}

bool consistent(const std::string& word, const GameState& game) {
    for (const auto& [guess, fb] : game.history)
        if (compute_feedback(guess, word) != fb) return false;
    return true;
}

double game_return(const GameState& game) {
    double r = 0;
    for (const auto& [guess, fb] : game.history)
        if (!all_green(fb)) r -= 1.0;
    return r;
}

std::vector<int> encode_episode(const GameState& game) {
    std::vector<int> out{kTokenBos};
    for (const auto& [guess, fb] : game.history) {
        for (char c : guess) out.push_back(letter_token(c));
        for (Color c : fb) out.push_back(color_token(c));
    }
    return out;
}

std::vector<int> encode_prefix(const GameState& game, const std::string& partial) {
    require(partial.size() < kWordLen, ErrorKind::domain,
            "prefix: partial guess must have fewer than 5 letters");
    std::vector<int> out = encode_episode(game);
    for (char c : partial) out.push_back(letter_token(c));
    return out;
}

ParsedEpisode decode_episode(const std::vector<int>& tokens) {
    require(!tokens.empty() && tokens[0] == kTokenBos, ErrorKind::domain,
            "decode: episode must start with BOS");
    require((tokens.size() - 1) % 10 == 0, ErrorKind::domain,
            "decode: episode length must be 1 + 10 per turn, got " +
                std::to_string(tokens.size()));
    size_t turns = (tokens.size() - 1) / 10;
    require(turns >= 1 && turns <= kMaxTurns, ErrorKind::domain,
            "decode: turn count " + std::to_string(turns) + " outside 1..6");
    ParsedEpisode ep;
    size_t p = 1;
    for (size_t t = 0; t < turns; ++t) {
        std::string guess;
        for (int i = 0; i < kWordLen; ++i) guess.push_back(token_letter(tokens[p++]));
        Feedback fb;
        for (int i = 0; i < kWordLen; ++i) fb[static_cast<size_t>(i)] = token_color(tokens[p++]);
        ep.guesses.push_back(std::move(guess));
        ep.colors.push_back(fb);
    }
    return ep;
}

Trajectory make_trajectory(const GameState& game, const std::string& provenance) {
    require(!game.history.empty(), ErrorKind::domain, "trajectory: no turns played");
    Trajectory t;
    t.tokens = encode_episode(game);
    t.action_mask.assign(t.tokens.size(), false);
    t.rewards.assign(t.tokens.size(), 0.0f);
    size_t p = 1;
    for (const auto& [guess, fb] : game.history) {
        (void)guess;
        for (int i = 0; i < kWordLen; ++i) t.action_mask[p + static_cast<size_t>(i)] = true;
        t.rewards[p + kWordLen - 1] = all_green(fb) ? 0.0f : -1.0f;
        p += 10;
    }
    t.done = game.done;
    t.provenance = provenance;
    t.answer = game.answer;
    return t;
}

double trajectory_return(const Trajectory& t) {
    double r = 0;
    for (float x : t.rewards) r += x;
    return r;
}

GameState replay(const Trajectory& t) {
    ParsedEpisode ep = decode_episode(t.tokens);
    GameState game = reset_with_answer(t.answer);
    for (size_t i = 0; i < ep.guesses.size(); ++i) {
        step(game, ep.guesses[i]);
        require(game.history.back().second == ep.colors[i], ErrorKind::domain,
                "replay: color row " + std::to_string(i) +
                    " disagrees with simulated feedback");
    }
    Trajectory fresh = make_trajectory(game, t.provenance);
    require(fresh.tokens == t.tokens, ErrorKind::domain, "replay: token mismatch");
    require(fresh.action_mask == t.action_mask, ErrorKind::domain,
            "replay: action mask mismatch");
    require(fresh.rewards == t.rewards, ErrorKind::domain, "replay: reward mismatch");
    require(fresh.done == t.done, ErrorKind::domain, "replay: done flag mismatch");
    return game;
}

std::vector<Trajectory> load_trajectories(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "trajectories: cannot open " + path);
    std::vector<Trajectory> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            fail(ErrorKind::io, path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
        }
        Trajectory t;
        try {
            t.tokens = j.at("tokens").get<std::vector<int>>();
            t.action_mask = j.at("action_mask").get<std::vector<bool>>();
            t.rewards = j.at("rewards").get<std::vector<float>>();
            t.done = j.at("done").get<bool>();
            t.provenance = j.at("provenance").get<std::string>();
            t.answer = j.at("answer").get<std::string>();
        } catch (const json::exception& e) {
            fail(ErrorKind::io,
                 path + ":" + std::to_string(lineno) + ": bad trajectory: " + e.what());
        }
        require(t.action_mask.size() == t.tokens.size() &&
                    t.rewards.size() == t.tokens.size(),
                ErrorKind::io, path + ":" + std::to_string(lineno) +
                                   ": field lengths disagree with tokens");
        out.push_back(std::move(t));
    }
    return out;
}

void save_trajectories(const std::string& path, const std::vector<Trajectory>& ts) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::io, "trajectories: cannot write " + path);
    for (const Trajectory& t : ts) {
        json j{{"tokens", t.tokens},     {"action_mask", t.action_mask},
               {"rewards", t.rewards},   {"done", t.done},
               {"provenance", t.provenance}, {"answer", t.answer}};
        out << j.dump() << "\n";
    }
}

}  // namespace ilql::wordle
