#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "ilql/datagen.hpp"
#include "ilql/trainer.hpp"
#include "ilql/wordlist.hpp"

using namespace ilql;
using namespace ilql::wordle;

namespace {

namespace fs = std::filesystem;

Vocab tiny_vocab() {
    std::vector<std::string> pool = builtin_words();
    Rng rng(2718);
    rng.shuffle(pool);
    pool.resize(12);
    std::sort(pool.begin(), pool.end());
    return Vocab::from_words(std::move(pool));
}

std::vector<Trajectory> mixture_data(int64_t total, uint64_t seed) {
    MixtureSpec spec;
    spec.total = total;
    spec.seed = seed;
    return generate_mixture(spec, tiny_vocab());
}

ModelConfig tiny_model() {
    ModelConfig m;
    m.n_layers = 1;
    m.d_model = 16;
    m.n_heads = 2;
    m.d_ff = 32;
    m.max_seq_len = 64;
    m.dropout = 0.0;
    return m;
}

TrainConfig short_config() {
    TrainConfig cfg;
    cfg.model = tiny_model();
    cfg.lr = 1e-4;
    cfg.batch_size = 8;
    cfg.max_steps = 30;
    cfg.eval_every = 10;
    cfg.early_stop = false;
    cfg.seed = 5;
    return cfg;
}

fs::path fresh_dir(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("ilql_trainer_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// CSV rows without the wall-clock column, which legitimately differs across runs.
std::vector<std::string> stable_rows(const fs::path& file) {
    std::ifstream in(file);
    REQUIRE(in.good());
    std::vector<std::string> rows;
    std::string line;
    while (std::getline(in, line)) {
        size_t cut = line.rfind(',');
        rows.push_back(line.substr(0, cut));
    }
    return rows;
}

std::vector<std::vector<double>> csv_numbers(const fs::path& file) {
    std::ifstream in(file);
    REQUIRE(in.good());
    std::vector<std::vector<double>> rows;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(std::move(row));
    }
    return rows;
}

bool same_weights(const Weights& a, const Weights& b) {
    if (a.order != b.order) return false;
    for (const std::string& name : a.order) {
        const Tensor<float>& ta = a.params.at(name);
        const Tensor<float>& tb = b.params.at(name);
        if (ta.shape != tb.shape || ta.data != tb.data) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("single-step training is the expectile-0.5 objective, bit for bit") {
    std::vector<Trajectory> data = mixture_data(16, 31);
    TrainConfig as_ilql = short_config();
    as_ilql.tau = 0.5;
    TrainConfig as_single = short_config();
    as_single.tau = 0.8;  // must be ignored: the objective pins 0.5 itself

    fs::path dir_a = fresh_dir("ilql_tau05");
    fs::path dir_b = fresh_dir("single");
    TrainResult a = train(Algo::ilql, data, as_ilql, dir_a.string());
    TrainResult b = train(Algo::single_step, data, as_single, dir_b.string());

    CHECK(a.final_loss == b.final_loss);
    CHECK(a.steps_run == b.steps_run);
    CHECK(same_weights(a.weights, b.weights));
    CHECK(stable_rows(dir_a / "train_log.csv") == stable_rows(dir_b / "train_log.csv"));

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("filtering at one hundred percent reproduces plain cloning") {
    std::vector<Trajectory> data = mixture_data(16, 32);
    TrainConfig cfg = short_config();
    cfg.filter_pct = 100.0;

    fs::path dir_a = fresh_dir("bc");
    fs::path dir_b = fresh_dir("fbc100");
    TrainResult a = train(Algo::bc, data, cfg, dir_a.string());
    TrainResult b = train(Algo::filtered_bc, data, cfg, dir_b.string());

    CHECK(a.final_loss == b.final_loss);
    CHECK(same_weights(a.weights, b.weights));
    CHECK(stable_rows(dir_a / "train_log.csv") == stable_rows(dir_b / "train_log.csv"));

    // a sharper filter keeps fewer episodes and diverges from plain cloning
    TrainConfig half = cfg;
    half.filter_pct = 50.0;
    fs::path dir_c = fresh_dir("fbc50");
    TrainResult c = train(Algo::filtered_bc, data, half, dir_c.string());
    CHECK(!same_weights(a.weights, c.weights));

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    fs::remove_all(dir_c);
}

TEST_CASE("repeated runs with one seed are identical and a new seed differs") {
    std::vector<Trajectory> data = mixture_data(16, 33);
    TrainConfig cfg = short_config();
    fs::path dir_a = fresh_dir("det_a");
    fs::path dir_b = fresh_dir("det_b");
    TrainResult a = train(Algo::bc, data, cfg, dir_a.string());
    TrainResult b = train(Algo::bc, data, cfg, dir_b.string());
    CHECK(a.final_loss == b.final_loss);
    CHECK(same_weights(a.weights, b.weights));
    CHECK(stable_rows(dir_a / "train_log.csv") == stable_rows(dir_b / "train_log.csv"));

    TrainConfig other = cfg;
    other.seed = 6;
    fs::path dir_c = fresh_dir("det_c");
    TrainResult c = train(Algo::bc, data, other, dir_c.string());
    CHECK(!same_weights(a.weights, c.weights));

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    fs::remove_all(dir_c);
}

TEST_CASE("the combined objective falls over a long run on fifty episodes") {
    std::vector<Trajectory> data = mixture_data(50, 34);
    TrainConfig cfg;
    cfg.model = tiny_model();
    cfg.lr = 1e-4;
    cfg.batch_size = 16;
    cfg.max_steps = 2000;
    cfg.eval_every = 500;
    cfg.early_stop = false;
    cfg.seed = 1;

    fs::path dir = fresh_dir("long_ilql");
    TrainResult res = train(Algo::ilql, data, cfg, dir.string());
    CHECK(res.steps_run == 2000);

    std::vector<std::vector<double>> rows = csv_numbers(dir / "train_log.csv");
    REQUIRE(rows.size() == 2000);
    const double first = rows.front()[1];
    const double last = rows.back()[1];
    CHECK(last < first);

    // windowed means make the comparison robust to single-batch noise
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 50; ++i) {
        head += rows[static_cast<size_t>(i)][1];
        tail += rows[rows.size() - 1 - static_cast<size_t>(i)][1];
    }
    CHECK(tail < head);

    // grad norms stay finite and positive throughout
    for (const auto& r : rows) {
        CHECK(std::isfinite(r[5]));
        CHECK(r[5] > 0.0);
    }
    fs::remove_all(dir);
}

TEST_CASE("validation split holds out a stable one-in-ten subset") {
    int held = 0;
    for (int64_t i = 0; i < 1000; ++i) {
        bool v = is_validation_episode(i);
        CHECK(v == is_validation_episode(i));
        held += v ? 1 : 0;
    }
    CHECK(held > 60);
    CHECK(held < 140);
}

TEST_CASE("early stopping fires once validation loss crosses the training window") {
    // Stack the deck: held-out indices get random-guess games, the rest get
    // clean scripted games, so cloning overfits the train split immediately.
    Vocab vocab = tiny_vocab();
    Rng rng(35);
    std::vector<Trajectory> data;
    for (int64_t i = 0; i < 24; ++i) {
        if (is_validation_episode(i)) {
            GameState g = reset(vocab, rng);
            while (!g.done)
                (void)step(g, vocab.words[rng.uniform_int(static_cast<uint64_t>(vocab.size()))]);
            data.push_back(make_trajectory(g, "noise"));
        } else {
            data.push_back(run_scripted_episode(ScriptedPolicyKind::upper_bound, vocab, rng));
        }
    }

    TrainConfig cfg = short_config();
    cfg.lr = 1e-3;
    cfg.max_steps = 400;
    cfg.eval_every = 10;
    cfg.min_steps = 20;
    cfg.early_stop = true;

    fs::path dir = fresh_dir("early");
    TrainResult res = train(Algo::bc, data, cfg, dir.string());
    CHECK(res.early_stopped);
    CHECK(res.steps_run < cfg.max_steps);
    CHECK(res.steps_run >= cfg.min_steps);

    // with the brake disabled the run goes the distance
    cfg.early_stop = false;
    fs::path dir2 = fresh_dir("early_off");
    TrainResult full = train(Algo::bc, data, cfg, dir2.string());
    CHECK(!full.early_stopped);
    CHECK(full.steps_run == cfg.max_steps);

    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("logs, checkpoint metadata, and head selection") {
    std::vector<Trajectory> data = mixture_data(16, 36);
    TrainConfig cfg = short_config();
    cfg.model.head = HeadKind::lm;  // trainer must override per algorithm

    fs::path dir = fresh_dir("meta");
    TrainResult res = train(Algo::ilql, data, cfg, dir.string());

    std::ifstream tl(dir / "train_log.csv");
    std::string header;
    std::getline(tl, header);
    CHECK(header == "step,total_loss,q_loss,v_loss,cql_loss,grad_norm,wall_ms");
    std::ifstream vl(dir / "val_log.csv");
    std::getline(vl, header);
    CHECK(header == "step,train_loss,val_loss");

    std::vector<std::vector<double>> rows = csv_numbers(dir / "train_log.csv");
    REQUIRE(static_cast<int64_t>(rows.size()) == res.steps_run);
    CHECK(rows.front()[0] == 1.0);
    CHECK(rows.back()[0] == static_cast<double>(res.steps_run));
    // value-head run populates every component column
    for (const auto& r : rows) {
        CHECK(r[1] == doctest::Approx(r[2] + r[3] + r[4]).epsilon(1e-5));
        CHECK(r[4] >= 0.0);
    }

    LoadedCheckpoint ck = load_checkpoint(dir.string());
    CHECK(ck.weights.config.head == HeadKind::value);
    CHECK(ck.meta.step == res.steps_run);
    CHECK(ck.meta.seed == cfg.seed);
    CHECK(ck.meta.train_config_json.find("\"algo\":\"ilql\"") != std::string::npos);
    CHECK(same_weights(ck.weights, res.weights));

    // cloning saves an lm head even if the config asked for value
    TrainConfig bc_cfg = short_config();
    bc_cfg.model.head = HeadKind::value;
    fs::path dir2 = fresh_dir("meta_bc");
    (void)train(Algo::bc, data, bc_cfg, dir2.string());
    CHECK(load_checkpoint(dir2.string()).weights.config.head == HeadKind::lm);

    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("configuration round trip and argument validation") {
    TrainConfig cfg = short_config();
    cfg.tau = 0.9;
    cfg.alpha = 0.01;
    cfg.filter_pct = 30.0;
    cfg.awr_beta = 4.0;
    TrainConfig back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.tau == cfg.tau);
    CHECK(back.alpha == cfg.alpha);
    CHECK(back.lr == cfg.lr);
    CHECK(back.batch_size == cfg.batch_size);
    CHECK(back.max_steps == cfg.max_steps);
    CHECK(back.seed == cfg.seed);
    CHECK(back.filter_pct == cfg.filter_pct);
    CHECK(back.awr_beta == cfg.awr_beta);
    CHECK(back.early_stop == cfg.early_stop);
    CHECK(back.model.d_model == cfg.model.d_model);
    CHECK(back.model.head == cfg.model.head);

    CHECK_THROWS_AS((void)TrainConfig::from_json_file("/nonexistent/cfg.json"), Error);
    CHECK_THROWS_AS((void)TrainConfig::from_json("not json"), Error);

    std::vector<Trajectory> data = mixture_data(12, 37);
    TrainConfig bad = short_config();
    bad.tau = 1.5;
    fs::path dir = fresh_dir("bad");
    CHECK_THROWS_AS((void)train(Algo::ilql, data, bad, dir.string()), Error);

    // frozen-model requirements
    CHECK_THROWS_AS((void)train(Algo::psi, data, short_config(), dir.string()), Error);
    CHECK_THROWS_AS((void)train(Algo::awr, data, short_config(), dir.string()), Error);
    std::vector<Trajectory> empty;
    CHECK_THROWS_AS((void)train(Algo::bc, empty, short_config(), dir.string()), Error);
    fs::remove_all(dir);
}

TEST_CASE("algorithm names parse both spellings and round trip") {
    for (Algo a : {Algo::ilql, Algo::single_step, Algo::cql, Algo::psi, Algo::bc,
                   Algo::filtered_bc, Algo::awr})
        CHECK(algo_from_string(algo_name(a)) == a);
    CHECK(algo_from_string("single_step") == Algo::single_step);
    CHECK(algo_from_string("filtered_bc") == Algo::filtered_bc);
    CHECK_THROWS_AS((void)algo_from_string("dqn"), Error);
    CHECK(algo_uses_value_head(Algo::ilql));
    CHECK(algo_uses_value_head(Algo::psi));
    CHECK(!algo_uses_value_head(Algo::bc));
    CHECK(!algo_uses_value_head(Algo::awr));
}
