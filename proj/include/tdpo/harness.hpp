#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tdpo/trainer.hpp"

namespace tdpo::harness {

/// Full experiment description: data/context split, diffusion and reward
/// settings, trainer configuration and evaluation protocol. Parsed from a
/// flat key=value file; unknown keys are a hard error.
struct ExperimentConfig {
    std::string run_name = "run";
    std::string output_dir = "runs";
    std::vector<std::uint64_t> seeds = {42};

    train::TrainerConfig trainer;

    // diffusion / policy network
    std::size_t timesteps = 20;
    double beta_min = 0.02;
    double beta_max = 0.45;
    double sigma_floor = 1e-4;
    std::vector<std::size_t> denoiser_hidden = {64, 64, 64};
    std::size_t t_embed_dim = 16;
    std::size_t ctx_embed_dim = 16;
    std::size_t lora_rank = 4;
    double lora_scale = 1.0;

    // pretraining
    std::uint64_t pretrain_seed = 1;
    std::size_t pretrain_steps = 6000;
    std::size_t pretrain_batch = 128;
    double pretrain_lr = 1e-3;
    double context_dropout = 0.1;

    // rewards
    rewards::Kind train_reward = rewards::Kind::direction;
    std::vector<rewards::Kind> eval_rewards = {rewards::Kind::fidelity,
                                               rewards::Kind::radius};
    std::uint64_t encoder_seed = 2;
    std::size_t encoder_width = 128;
    bool misaligned_critic_encoder = false;
    std::size_t reward_fit_model_samples = 3072;
    std::size_t reward_fit_box_samples = 1024;
    std::size_t reward_fit_steps = 4000;

    // critic
    std::size_t critic_width_divisor = 4;
    double critic_clip_range = 0.2;
    std::uint64_t critic_seed = 3;

    // evaluation protocol
    std::size_t eval_cadence = 1;  // epochs between eval rows; 0 disables
    std::size_t eval_samples = 256;

    // data
    std::size_t train_angles = 8;
    ad::Dtype dtype = ad::Dtype::f64;

    void validate() const;
    /// normalized echo of every key, sorted, one "key=value" per line
    std::vector<std::string> echo() const;
};

/// Parse a config file. Empty file yields the defaults. Errors carry line
/// numbers; unknown keys name the key.
ExperimentConfig load_config(const std::string& path);

/// Apply one "key=value" override (the CLI flag path).
void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);

struct EvalRow {
    std::size_t epoch = 0;
    std::size_t queries = 0;
    std::string context_set;  // "train" | "unseen"
    std::string reward_kind;
    double mean = 0.0;
    double std_dev = 0.0;
    std::size_t n = 0;
};

/// Mean/std of the analytic reward oracles over N fresh rollouts at the
/// configured guidance scale. Never touches parameters or the query counter.
std::vector<EvalRow> cross_reward_eval(const ddpm::Denoiser& policy,
                                       const ddpm::NoiseSchedule& sched,
                                       const std::vector<rewards::Kind>& kinds,
                                       const ad::Tensor& context_set,
                                       const std::string& context_tag, std::size_t n,
                                       double guidance_scale, std::uint64_t seed,
                                       std::size_t epoch, std::size_t queries,
                                       std::size_t workers = 1);

/// Error thrown by a failed pipeline stage; carries the stage tag.
struct StageError : std::runtime_error {
    std::string stage;
    StageError(std::string st, const std::string& what)
        : std::runtime_error("[" + st + "] " + what), stage(std::move(st)) {}
};

ad::Tensor contexts_from_angles(const std::vector<double>& angles);

/// Pretrain the base model on the mixture and write shared/pretrain.tdpr.
ddpm::Denoiser stage_pretrain(const ExperimentConfig& cfg, const std::string& run_dir);
ddpm::Denoiser load_pretrained(const ExperimentConfig& cfg, const std::string& run_dir);

/// Fit the training reward head against its analytic target and write
/// shared/rewards.tdpr.
rewards::RewardModel stage_fit_rewards(const ExperimentConfig& cfg,
                                       const ddpm::Denoiser& pretrained,
                                       const std::string& run_dir);
rewards::RewardModel load_rewards(const ExperimentConfig& cfg, const std::string& run_dir);

struct SeedRunResult {
    std::uint64_t seed = 0;
    std::string dir;
    std::vector<train::EpochMetrics> epochs;
    std::vector<EvalRow> eval_rows;
};

/// Finetune one seed into run_dir/seed<k>/ (metrics.csv, eval.csv,
/// neuron_events.jsonl, checkpoints/, manifest.txt).
SeedRunResult stage_finetune(const ExperimentConfig& cfg, std::uint64_t seed,
                             const std::string& run_dir);

/// All stages for every configured seed; returns the run directory.
std::string run_experiment(const ExperimentConfig& cfg);

/// Long-format plot data over completed run directories:
/// run,seed,epoch,queries,metric,value plus mean/std aggregate rows.
/// Missing directories are skipped with a warning line on stderr.
std::string emit_plot_data(const std::vector<std::string>& run_dirs);

}  // namespace tdpo::harness
