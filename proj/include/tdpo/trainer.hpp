#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tdpo/critic.hpp"
#include "tdpo/diffusion.hpp"
#include "tdpo/neuron.hpp"
#include "tdpo/rewards.hpp"

namespace tdpo::train {

enum class Mode { tdpo, tdpo_r, ddpo_batch, ddpo_highfreq };
Mode mode_from_string(const std::string& s);
std::string mode_name(Mode m);
bool mode_uses_critic(Mode m);

struct TrainerConfig {
    Mode mode = Mode::tdpo_r;
    std::size_t epochs = 40;
    std::size_t batch_size = 8;
    std::size_t samples_per_epoch = 256;
    /// minibatch gradients accumulated per optimizer step; ddpo-batch
    /// stretches this over all timesteps (accumulation x T)
    std::size_t grad_accumulation = 16;
    double policy_lr = 1e-4;
    double policy_clip = 1e-4;
    double critic_lr = 1e-4;
    double max_grad_norm = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 1e-4;
    std::size_t reset_frequency = 10;  // F, epochs between resets (tdpo-r)
    double dormant_tau = 0.0;
    neuron::Strategy reset_strategy = neuron::Strategy::active;
    std::string reset_target = "critic";  // or "policy-adapter"
    double kl_coef = 0.0;
    double guidance_scale = 5.0;
    bool standardize_temporal = true;
    /// weight the transition x_t -> x_{t-1} by the temporal reward of the
    /// post-action state x_{t-1}; off = pre-action ablation
    bool weight_post_action = true;
    std::uint64_t seed = 42;
    std::size_t workers = 1;
    std::size_t probe_size = 256;
    std::size_t checkpoint_every = 0;  // 0 = final checkpoint only

    std::size_t batches_per_timestep() const { return samples_per_epoch / batch_size; }
    void validate() const;
};

/// One epoch of rollouts under the epoch-start policy, with rewards, the
/// critic's collection-time predictions (both the clipping anchor and the
/// temporal-reward residuals), and optional pretrained-policy log
/// probabilities for the KL baseline.
struct EpochBatch {
    std::vector<ddpm::Trajectory> trajectories;
    /// p_old[i][s]: collection-time critic prediction at state x_s, s in [0, T]
    std::vector<std::vector<double>> critic_p_old;
    /// standardized (or raw) policy weights per trajectory and transition
    std::vector<std::vector<double>> weights;
    /// adapter-free log probabilities, index t in [1, T]; empty unless KL is on
    std::vector<std::vector<double>> logp_pre;
    double reward_mean = 0.0;
    double reward_std = 0.0;
};

struct StepMetric {
    std::size_t epoch = 0;
    std::size_t step = 0;  // global policy optimizer step index
    int timestep = -1;     // -1 on epoch summary rows
    Mode mode = Mode::tdpo;
    double reward_mean = 0.0, reward_std = 0.0;
    double temporal_mean = 0.0;
    double policy_loss = 0.0;
    double critic_loss = 0.0;  // NaN when no critic
    double ratio_mean = 0.0;
    double dormant_pct = 0.0;  // NaN until measured / no critic
    int reset_fired = 0;
};

struct EpochMetrics {
    double reward_mean = 0.0, reward_std = 0.0;
    double policy_loss_mean = 0.0;
    double critic_loss_mean = 0.0;
    double ratio_mean = 0.0;
    double temporal_mean = 0.0;
    double dormant_pct = 0.0;               // NaN when no critic
    /// smallest dormant-set overlap between consecutive within-sweep
    /// measurements (nearby update steps, same probe batch)
    std::optional<double> overlap_pct;
    double dormant_before_reset = 0.0, dormant_after_reset = 0.0;  // NaN unless reset fired
    bool reset_fired = false;
    std::size_t policy_updates = 0, critic_updates = 0;
};

/// Raised when an importance ratio becomes non-finite.
struct EpochAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Clipped importance-sampled surrogate for one timestep slice. `weights`
/// are gradient-detached temporal rewards (or the final reward in the
/// timestep-independent modes). `logp_pre` adds the KL penalty when
/// kl_coef > 0.
ad::Var policy_loss_at_timestep(const ddpm::Denoiser& policy,
                                const ddpm::NoiseSchedule& sched, const ad::Tensor& x_prev,
                                const ad::Tensor& x_t, std::size_t t, const ad::Tensor& ctx,
                                const std::vector<double>& logp_old,
                                const std::vector<double>& weights, double eps_clip,
                                double guidance_scale, double kl_coef = 0.0,
                                const std::vector<double>* logp_pre = nullptr,
                                std::vector<double>* ratios_out = nullptr);

class Trainer {
public:
    Trainer(TrainerConfig cfg, ddpm::Denoiser& policy, ddpm::NoiseSchedule sched,
            const rewards::RewardModel& reward_model, critic::CriticState* critic,
            const ad::Tensor& train_contexts);

    EpochBatch collect_epoch(std::size_t epoch_index);

    /// One update at timestep t over the accumulation spans of the epoch
    /// batch (per-timestep modes only).
    void per_timestep_update(const EpochBatch& batch, std::size_t t, std::size_t epoch_index);

    EpochMetrics run_epoch(std::size_t epoch_index);

    /// Runs all configured epochs; `on_epoch` fires after each one (for
    /// evaluation hooks).
    std::vector<EpochMetrics> train(
        const std::function<void(std::size_t, const EpochMetrics&)>& on_epoch = {});

    // update accounting
    std::size_t policy_updates_total() const { return policy_updates_total_; }
    std::size_t critic_updates_total() const { return critic_updates_total_; }
    std::size_t reward_queries() const { return reward_queries_; }

    const std::vector<StepMetric>& step_metrics() const { return step_metrics_; }
    const std::vector<neuron::ResetEvent>& reset_events() const { return reset_events_; }

    /// When set, metrics rows / reset events / checkpoints are written under
    /// this directory as they are produced.
    void set_output_dir(const std::string& dir);

    ad::AdamW& policy_optimizer() { return policy_opt_; }
    ad::AdamW* critic_optimizer() { return critic_opt_ ? &*critic_opt_ : nullptr; }

    std::vector<neuron::ModuleHook> critic_module_hooks();
    std::vector<neuron::ModuleHook> adapter_module_hooks();

    /// Critic dormant percentage over a probe built from the given batch;
    /// also returns per-module activation scores.
    double measure_critic_dormancy(const EpochBatch& batch,
                                   std::vector<std::vector<double>>* scores_out = nullptr,
                                   std::vector<bool>* dormant_out = nullptr);

private:
    EpochBatch sample_probe_batch(std::uint64_t stream);
    void update_sweep_tdpo(const EpochBatch& batch, std::size_t epoch_index,
                           EpochMetrics& em);
    void update_sweep_ddpo(const EpochBatch& batch, std::size_t epoch_index,
                           EpochMetrics& em);
    void apply_reset(std::size_t epoch_index, EpochMetrics& em, const EpochBatch& batch);
    void emit_step_row(const StepMetric& row);
    void write_event(const neuron::ResetEvent& ev, double before, double after,
                     std::optional<double> overlap);
    void maybe_checkpoint(std::size_t epoch_index, bool final);

    TrainerConfig cfg_;
    ddpm::Denoiser& policy_;
    ddpm::NoiseSchedule sched_;
    const rewards::RewardModel& reward_;
    critic::CriticState* critic_;
    ad::Tensor train_contexts_;
    ad::AdamW policy_opt_;
    std::optional<ad::AdamW> critic_opt_;

    std::size_t policy_updates_total_ = 0;
    std::size_t critic_updates_total_ = 0;
    std::size_t reward_queries_ = 0;
    std::vector<StepMetric> step_metrics_;
    std::vector<neuron::ResetEvent> reset_events_;
    double last_dormant_pct_;
    std::string out_dir_;
    bool metrics_header_written_ = false;
};

}  // namespace tdpo::train
