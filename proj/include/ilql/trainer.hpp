#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ilql/losses.hpp"
#include "ilql/model.hpp"
#include "ilql/wordle.hpp"

namespace ilql {

enum class Algo { ilql, single_step, cql, psi, bc, filtered_bc, awr };

Algo algo_from_string(const std::string& s);
const char* algo_name(Algo a);
bool algo_uses_value_head(Algo a);

struct TrainConfig {
    double tau = 0.8;
    double alpha = 1e-4;
    double gamma = 0.99;
    double polyak = 0.005;
    double lr = 1e-5;
    int64_t batch_size = 64;
    int64_t max_steps = 2000;
    uint64_t seed = 0;
    int64_t eval_every = 100;  // validation cadence, in steps
    double filter_pct = 100.0;
    double psi_reward_scale = 1.0;
    double awr_beta = 8.0;
    double awr_clip = 20.0;
    bool early_stop = true;    // supervised algorithms stop once val loss > train loss
    int64_t min_steps = 200;   // no early stop before this many steps
    ModelConfig model;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
    static TrainConfig from_json_file(const std::string& path);
};

struct TrainResult {
    Weights weights;
    int64_t steps_run = 0;
    double final_loss = 0.0;
    bool early_stopped = false;
};

// Runs the full loop for one algorithm: shuffled minibatches, AdamW, and (for value
// heads) a Polyak-averaged target copy refreshed after every step. Writes into
// out_dir: the final checkpoint, train_log.csv
// (step,total_loss,q_loss,v_loss,cql_loss,grad_norm,wall_ms) and val_log.csv
// (step,train_loss,val_loss). behavior is required for psi, value for awr.
TrainResult train(Algo algo, const std::vector<wordle::Trajectory>& data,
                  const TrainConfig& cfg, const std::string& out_dir,
                  const Weights* behavior = nullptr, const Weights* value = nullptr);

// True for the episodes held out for validation (one in ten by index hash).
bool is_validation_episode(int64_t index);

}  // namespace ilql
