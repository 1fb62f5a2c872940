#include "tdpo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "tdpo/checkpoint.hpp"
#include "tdpo/io.hpp"

namespace tdpo::train {

using ad::Tensor;
using ad::Var;

namespace {
constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
}

Mode mode_from_string(const std::string& s) {
    if (s == "tdpo") return Mode::tdpo;
    if (s == "tdpo-r") return Mode::tdpo_r;
    if (s == "ddpo-batch") return Mode::ddpo_batch;
    if (s == "ddpo-highfreq") return Mode::ddpo_highfreq;
    throw std::invalid_argument("unknown trainer mode: " + s);
}

std::string mode_name(Mode m) {
    switch (m) {
        case Mode::tdpo: return "tdpo";
        case Mode::tdpo_r: return "tdpo-r";
        case Mode::ddpo_batch: return "ddpo-batch";
        case Mode::ddpo_highfreq: return "ddpo-highfreq";
    }
    return "?";
}

bool mode_uses_critic(Mode m) { return m == Mode::tdpo || m == Mode::tdpo_r; }

void TrainerConfig::validate() const {
    if (batch_size == 0 || samples_per_epoch == 0)
        throw std::invalid_argument("trainer: batch size and samples must be positive");
    if (samples_per_epoch % batch_size != 0)
        throw std::invalid_argument("trainer: samples_per_epoch must divide into batches");
    if (grad_accumulation == 0)
        throw std::invalid_argument("trainer: grad_accumulation must be >= 1");
    std::size_t bpt = samples_per_epoch / batch_size;
    if (mode == Mode::ddpo_batch || mode == Mode::ddpo_highfreq) {
        // minibatch-major sweep; accumulation spans mixed timesteps
    } else if (bpt % grad_accumulation != 0) {
        throw std::invalid_argument(
            "trainer: batches per timestep must be a multiple of grad_accumulation");
    }
    if (mode == Mode::tdpo_r && reset_frequency < 1)
        throw std::invalid_argument("trainer: reset frequency must be >= 1 for tdpo-r");
    if (kl_coef < 0.0) throw std::invalid_argument("trainer: kl_coef must be >= 0");
    if (dormant_tau < 0.0) throw std::invalid_argument("trainer: dormant_tau must be >= 0");
    if (reset_target != "critic" && reset_target != "policy-adapter")
        throw std::invalid_argument("trainer: unknown reset target " + reset_target);
}

Var policy_loss_at_timestep(const ddpm::Denoiser& policy, const ddpm::NoiseSchedule& sched,
                            const Tensor& x_prev, const Tensor& x_t, std::size_t t,
                            const Tensor& ctx, const std::vector<double>& logp_old,
                            const std::vector<double>& weights, double eps_clip,
                            double guidance_scale, double kl_coef,
                            const std::vector<double>* logp_pre,
                            std::vector<double>* ratios_out) {
    std::size_t B = x_prev.rows();
    if (logp_old.size() != B || weights.size() != B)
        throw std::invalid_argument("policy_loss: slice field mismatch");

    Var logp = ddpm::transition_log_prob_rows(policy, sched, x_prev, x_t, t, ctx,
                                              guidance_scale);
    Tensor lp_old = Tensor::zeros({B});
    for (std::size_t i = 0; i < B; ++i) lp_old[i] = logp_old[i];
    Var ratio = ad::exp_(ad::sub(logp, Var::constant(lp_old)));
    for (double r : ratio.value().data)
        if (!std::isfinite(r))
            throw EpochAbort("non-finite importance ratio at timestep " + std::to_string(t));
    if (ratios_out) *ratios_out = ratio.value().data;

    Tensor w = Tensor::zeros({B});
    for (std::size_t i = 0; i < B; ++i) w[i] = weights[i];
    Var w_const = Var::constant(w);
    Var surr = ad::mul(ratio, w_const);
    Var surr_clipped = ad::mul(ad::clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip), w_const);
    Var loss = ad::neg(ad::mean(ad::minimum(surr, surr_clipped)));

    if (kl_coef > 0.0) {
        if (!logp_pre || logp_pre->size() != B)
            throw std::invalid_argument("policy_loss: KL term requires logp_pre");
        Tensor lp_pre = Tensor::zeros({B});
        for (std::size_t i = 0; i < B; ++i) lp_pre[i] = (*logp_pre)[i];
        Var kl = ad::mean(ad::sub(logp, Var::constant(lp_pre)));
        loss = ad::add(loss, ad::scale(kl, kl_coef));
    }
    return loss;
}

Trainer::Trainer(TrainerConfig cfg, ddpm::Denoiser& policy, ddpm::NoiseSchedule sched,
                 const rewards::RewardModel& reward_model, critic::CriticState* critic,
                 const Tensor& train_contexts)
    : cfg_(std::move(cfg)),
      policy_(policy),
      sched_(std::move(sched)),
      reward_(reward_model),
      critic_(critic),
      train_contexts_(train_contexts),
      policy_opt_({}, {}),
      last_dormant_pct_(kNan) {
    cfg_.validate();
    if (!policy_.has_adapter())
        throw std::invalid_argument("trainer: policy must carry a low-rank adapter");
    if (mode_uses_critic(cfg_.mode) && !critic_)
        throw std::invalid_argument("trainer: mode requires a critic");

    ad::AdamW::Options popt;
    popt.lr = cfg_.policy_lr;
    popt.beta1 = cfg_.adam_beta1;
    popt.beta2 = cfg_.adam_beta2;
    popt.eps = cfg_.adam_eps;
    popt.weight_decay = cfg_.weight_decay;
    popt.max_grad_norm = cfg_.max_grad_norm;
    policy_opt_ = ad::AdamW(policy_.adapter_params(), popt);

    if (critic_) {
        ad::AdamW::Options copt = popt;
        copt.lr = cfg_.critic_lr;
        critic_opt_.emplace(critic_->params(), copt);
    }
}

EpochBatch Trainer::collect_epoch(std::size_t epoch_index) {
    std::size_t n = cfg_.samples_per_epoch;
    std::size_t T = sched_.T;
    Rng ctx_rng = Rng::stream(cfg_.seed, 1000 + epoch_index);

    Tensor ctxs = Tensor::zeros({n, 2});
    std::size_t n_ctx = train_contexts_.rows();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t k = static_cast<std::size_t>(
            ctx_rng.uniform_int(0, static_cast<std::int64_t>(n_ctx) - 1));
        ctxs.at(i, 0) = train_contexts_.at(k, 0);
        ctxs.at(i, 1) = train_contexts_.at(k, 1);
    }
    std::vector<std::uint64_t> seeds(n);
    std::uint64_t base = mix_seed(cfg_.seed) + 7919 * (epoch_index + 1);
    for (std::size_t i = 0; i < n; ++i) seeds[i] = ddpm::derive_trajectory_seed(base, i);

    EpochBatch batch;
    batch.trajectories = ddpm::sample_trajectories(policy_, sched_, ctxs,
                                                   cfg_.guidance_scale, seeds, cfg_.workers);

    // final rewards from the fitted head; these are the counted queries
    Tensor x0s = Tensor::zeros({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        x0s.at(i, 0) = batch.trajectories[i].x[0][0];
        x0s.at(i, 1) = batch.trajectories[i].x[0][1];
    }
    std::vector<double> rewards_v = reward_.reward_batch(x0s, ctxs);
    reward_queries_ += n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        batch.trajectories[i].final_reward = rewards_v[i];
        mean += rewards_v[i];
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double r : rewards_v) var += (r - mean) * (r - mean);
    batch.reward_mean = mean;
    batch.reward_std = std::sqrt(var / static_cast<double>(n));

    if (critic_) {
        // collection-time critic predictions at every state, batched over
        // the whole epoch per timestep
        batch.critic_p_old.assign(n, std::vector<double>(T + 1, 0.0));
        Tensor xs = Tensor::zeros({n, 2});
        for (std::size_t s = 0; s <= T; ++s) {
            for (std::size_t i = 0; i < n; ++i) {
                xs.at(i, 0) = batch.trajectories[i].x[s][0];
                xs.at(i, 1) = batch.trajectories[i].x[s][1];
            }
            std::vector<int> ts(n, static_cast<int>(s));
            std::vector<double> p = critic_->predict_values(xs, ts, ctxs);
            for (std::size_t i = 0; i < n; ++i) batch.critic_p_old[i][s] = p[i];
        }
    }

    // per-transition policy weights
    batch.weights.assign(n, std::vector<double>(T + 1, 0.0));
    for (std::size_t t = 1; t <= T; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            double w;
            if (critic_) {
                std::size_t s = cfg_.weight_post_action ? t - 1 : t;
                w = batch.trajectories[i].final_reward - batch.critic_p_old[i][s];
                batch.trajectories[i].temporal[t] = w;
            } else {
                w = batch.trajectories[i].final_reward;
                batch.trajectories[i].temporal[t] = w;
            }
            batch.weights[i][t] = w;
        }
        if (cfg_.standardize_temporal) {
            double m = 0.0;
            for (std::size_t i = 0; i < n; ++i) m += batch.weights[i][t];
            m /= static_cast<double>(n);
            double v = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double d = batch.weights[i][t] - m;
                v += d * d;
            }
            double sd = std::sqrt(v / static_cast<double>(n));
            for (std::size_t i = 0; i < n; ++i)
                batch.weights[i][t] = (batch.weights[i][t] - m) / (sd + 1e-8);
        }
    }

    if (cfg_.kl_coef > 0.0) {
        ad::NoGradGuard ng;
        batch.logp_pre.assign(n, std::vector<double>(T + 1, 0.0));
        policy_.set_adapter_enabled(false);
        Tensor xp = Tensor::zeros({n, 2}), xt = Tensor::zeros({n, 2});
        for (std::size_t t = 1; t <= T; ++t) {
            for (std::size_t i = 0; i < n; ++i) {
                xp.at(i, 0) = batch.trajectories[i].x[t - 1][0];
                xp.at(i, 1) = batch.trajectories[i].x[t - 1][1];
                xt.at(i, 0) = batch.trajectories[i].x[t][0];
                xt.at(i, 1) = batch.trajectories[i].x[t][1];
            }
            Var lp = ddpm::transition_log_prob_rows(policy_, sched_, xp, xt, t, ctxs,
                                                    cfg_.guidance_scale);
            for (std::size_t i = 0; i < n; ++i) batch.logp_pre[i][t] = lp.value()[i];
        }
        policy_.set_adapter_enabled(true);
    }
    return batch;
}

namespace {

struct Slice {
    Tensor x_prev, x_t, ctx;
    std::vector<double> logp_old, weights, logp_pre;
    std::vector<double> raw_temporal;
};

Slice make_slice(const EpochBatch& batch, std::size_t t, std::size_t lo, std::size_t hi,
                 bool with_pre) {
    std::size_t B = hi - lo;
    Slice s;
    s.x_prev = Tensor::zeros({B, 2});
    s.x_t = Tensor::zeros({B, 2});
    s.ctx = Tensor::zeros({B, 2});
    s.logp_old.resize(B);
    s.weights.resize(B);
    s.raw_temporal.resize(B);
    if (with_pre) s.logp_pre.resize(B);
    for (std::size_t k = 0; k < B; ++k) {
        const ddpm::Trajectory& tr = batch.trajectories[lo + k];
        s.x_prev.at(k, 0) = tr.x[t - 1][0];
        s.x_prev.at(k, 1) = tr.x[t - 1][1];
        s.x_t.at(k, 0) = tr.x[t][0];
        s.x_t.at(k, 1) = tr.x[t][1];
        s.ctx.at(k, 0) = tr.context[0];
        s.ctx.at(k, 1) = tr.context[1];
        s.logp_old[k] = tr.log_prob[t];
        s.weights[k] = batch.weights[lo + k][t];
        s.raw_temporal[k] = tr.temporal[t];
        if (with_pre) s.logp_pre[k] = batch.logp_pre[lo + k][t];
    }
    return s;
}

}  // namespace

void Trainer::per_timestep_update(const EpochBatch& batch, std::size_t t,
                                  std::size_t epoch_index) {
    std::size_t bpt = cfg_.batches_per_timestep();
    std::size_t accum = cfg_.grad_accumulation;
    bool kl = cfg_.kl_coef > 0.0;

    double span_policy_loss = 0.0, span_critic_loss = 0.0, span_ratio = 0.0,
           span_temporal = 0.0;
    std::size_t span_count = 0;

    policy_opt_.zero_grad();
    if (critic_opt_) critic_opt_->zero_grad();

    for (std::size_t mb = 0; mb < bpt; ++mb) {
        std::size_t lo = mb * cfg_.batch_size, hi = lo + cfg_.batch_size;
        Slice s = make_slice(batch, t, lo, hi, kl);
        std::vector<double> ratios;
        Var ploss = policy_loss_at_timestep(policy_, sched_, s.x_prev, s.x_t, t, s.ctx,
                                            s.logp_old, s.weights, cfg_.policy_clip,
                                            cfg_.guidance_scale, cfg_.kl_coef,
                                            kl ? &s.logp_pre : nullptr, &ratios);
        ad::backward(ploss);
        span_policy_loss += ploss.value()[0];
        for (double r : ratios) span_ratio += r;
        for (double w : s.raw_temporal) span_temporal += w;

        if (critic_) {
            critic::CriticBatch cb;
            cb.states = s.x_prev;
            cb.ts.assign(cfg_.batch_size, static_cast<int>(t - 1));
            cb.contexts = s.ctx;
            cb.final_rewards.resize(cfg_.batch_size);
            std::vector<double> p_old(cfg_.batch_size);
            for (std::size_t k = 0; k < cfg_.batch_size; ++k) {
                cb.final_rewards[k] = batch.trajectories[lo + k].final_reward;
                p_old[k] = batch.critic_p_old[lo + k][t - 1];
            }
            cb.p_old = std::move(p_old);
            Var closs = critic_loss(*critic_, cb);
            ad::backward(closs);
            span_critic_loss += closs.value()[0];
        }
        ++span_count;

        if (span_count == accum) {
            double inv = 1.0 / static_cast<double>(accum);
            policy_opt_.scale_grads(inv);
            policy_opt_.step();
            policy_opt_.zero_grad();
            ++policy_updates_total_;
            if (critic_opt_) {
                critic_opt_->scale_grads(inv);
                critic_opt_->step();
                critic_opt_->zero_grad();
                ++critic_updates_total_;
            }

            StepMetric row;
            row.epoch = epoch_index;
            row.step = policy_updates_total_;
            row.timestep = static_cast<int>(t);
            row.mode = cfg_.mode;
            row.reward_mean = batch.reward_mean;
            row.reward_std = batch.reward_std;
            row.temporal_mean = span_temporal / double(accum * cfg_.batch_size);
            row.policy_loss = span_policy_loss * inv;
            row.critic_loss = critic_ ? span_critic_loss * inv : kNan;
            row.ratio_mean = span_ratio / double(accum * cfg_.batch_size);
            row.dormant_pct = last_dormant_pct_;
            emit_step_row(row);
            span_policy_loss = span_critic_loss = span_ratio = span_temporal = 0.0;
            span_count = 0;
        }
    }
}

void Trainer::update_sweep_tdpo(const EpochBatch& batch, std::size_t epoch_index,
                                EpochMetrics& em) {
    std::size_t before_p = policy_updates_total_;
    std::size_t before_c = critic_updates_total_;
    std::size_t T = sched_.T;
    // dormant-set stability is tracked between nearby update steps within
    // the sweep, on the fixed epoch batch, so consecutive measurements see
    // the same probe and differ only through parameter movement
    std::vector<std::size_t> marks{T, (2 * T) / 3, T / 3, 1};
    std::vector<bool> prev;
    std::optional<double> min_overlap;
    auto measure = [&] {
        std::vector<bool> now;
        measure_critic_dormancy(batch, nullptr, &now);
        if (!prev.empty()) {
            auto ov = neuron::overlap_percentage(prev, now);
            if (ov.has_value() && (!min_overlap || *ov < *min_overlap)) min_overlap = *ov;
        }
        prev = std::move(now);
    };
    if (critic_) measure();  // pre-sweep state
    for (std::size_t t = T; t >= 1; --t) {
        per_timestep_update(batch, t, epoch_index);
        if (critic_ && t != T &&
            std::find(marks.begin(), marks.end(), t) != marks.end())
            measure();
    }
    em.overlap_pct = min_overlap;
    em.policy_updates = policy_updates_total_ - before_p;
    em.critic_updates = critic_updates_total_ - before_c;
}

void Trainer::update_sweep_ddpo(const EpochBatch& batch, std::size_t epoch_index,
                                EpochMetrics& em) {
    std::size_t before_p = policy_updates_total_;
    std::size_t bpt = cfg_.batches_per_timestep();
    std::size_t T = sched_.T;
    std::size_t accum = cfg_.mode == Mode::ddpo_batch ? cfg_.grad_accumulation * T
                                                      : cfg_.grad_accumulation;
    bool kl = cfg_.kl_coef > 0.0;

    double span_policy_loss = 0.0, span_ratio = 0.0, span_temporal = 0.0;
    std::size_t span_count = 0;
    policy_opt_.zero_grad();

    // minibatch-major sweep: accumulation spans run over mixed timesteps
    for (std::size_t mb = 0; mb < bpt; ++mb) {
        std::size_t lo = mb * cfg_.batch_size, hi = lo + cfg_.batch_size;
        for (std::size_t t = T; t >= 1; --t) {
            Slice s = make_slice(batch, t, lo, hi, kl);
            std::vector<double> ratios;
            Var ploss = policy_loss_at_timestep(policy_, sched_, s.x_prev, s.x_t, t, s.ctx,
                                                s.logp_old, s.weights, cfg_.policy_clip,
                                                cfg_.guidance_scale, cfg_.kl_coef,
                                                kl ? &s.logp_pre : nullptr, &ratios);
            ad::backward(ploss);
            span_policy_loss += ploss.value()[0];
            for (double r : ratios) span_ratio += r;
            for (double w : s.raw_temporal) span_temporal += w;
            ++span_count;

            if (span_count == accum) {
                double inv = 1.0 / static_cast<double>(accum);
                policy_opt_.scale_grads(inv);
                policy_opt_.step();
                policy_opt_.zero_grad();
                ++policy_updates_total_;

                StepMetric row;
                row.epoch = epoch_index;
                row.step = policy_updates_total_;
                row.timestep = static_cast<int>(t);
                row.mode = cfg_.mode;
                row.reward_mean = batch.reward_mean;
                row.reward_std = batch.reward_std;
                row.temporal_mean = span_temporal / double(accum * cfg_.batch_size);
                row.policy_loss = span_policy_loss * inv;
                row.critic_loss = kNan;
                row.ratio_mean = span_ratio / double(accum * cfg_.batch_size);
                row.dormant_pct = kNan;
                emit_step_row(row);
                span_policy_loss = span_ratio = span_temporal = 0.0;
                span_count = 0;
            }
        }
    }
    em.policy_updates = policy_updates_total_ - before_p;
    em.critic_updates = 0;
}

double Trainer::measure_critic_dormancy(const EpochBatch& batch,
                                        std::vector<std::vector<double>>* scores_out,
                                        std::vector<bool>* dormant_out) {
    if (!critic_) return kNan;
    std::size_t T = sched_.T;
    std::size_t want = cfg_.probe_size;
    std::size_t n = batch.trajectories.size();
    // spread the probe across trajectories first, then noise levels, so the
    // embeddings cover many contexts and rollouts rather than a few full
    // chains
    std::vector<std::pair<std::size_t, std::size_t>> idx;  // (trajectory, state)
    idx.reserve(want);
    for (std::size_t s_rank = 0; s_rank < T && idx.size() < want; ++s_rank)
        for (std::size_t i = 0; i < n && idx.size() < want; ++i) {
            std::size_t s = (s_rank * 7919) % T;  // stratified-ish state order
            idx.emplace_back(i, s);
        }

    Tensor xs = Tensor::zeros({idx.size(), 2});
    Tensor cs = Tensor::zeros({idx.size(), 2});
    std::vector<int> ts(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const ddpm::Trajectory& tr = batch.trajectories[idx[k].first];
        xs.at(k, 0) = tr.x[idx[k].second][0];
        xs.at(k, 1) = tr.x[idx[k].second][1];
        cs.at(k, 0) = tr.context[0];
        cs.at(k, 1) = tr.context[1];
        ts[k] = static_cast<int>(idx[k].second);
    }
    std::vector<Tensor> acts = critic_->hidden_activations(xs, ts, cs);
    std::vector<bool> dormant_all;
    std::size_t dormant_n = 0, total_n = 0;
    if (scores_out) scores_out->clear();
    for (const Tensor& a : acts) {
        neuron::ScoreResult sr = neuron::activation_scores(a);
        std::vector<bool> active = neuron::classify(sr.scores, cfg_.dormant_tau);
        for (bool v : active) {
            dormant_all.push_back(!v);
            if (!v) ++dormant_n;
            ++total_n;
        }
        if (scores_out) scores_out->push_back(std::move(sr.scores));
    }
    if (dormant_out) *dormant_out = dormant_all;
    return 100.0 * static_cast<double>(dormant_n) / static_cast<double>(total_n);
}

std::vector<neuron::ModuleHook> Trainer::critic_module_hooks() {
    std::vector<neuron::ModuleHook> hooks;
    if (!critic_) return hooks;
    auto& layers = critic_->layers();
    for (std::size_t m = 0; m + 1 < layers.size(); ++m) {
        neuron::ModuleHook h;
        h.id = "critic/layer." + std::to_string(m);
        h.in_W = layers[m].W;
        h.in_b = layers[m].b;
        h.out_W = layers[m + 1].W;
        h.in_w_init = layers[m].w_init;
        h.in_b_init = layers[m].b_init;
        h.out_w_init = layers[m + 1].w_init;
        hooks.push_back(h);
    }
    return hooks;
}

std::vector<neuron::ModuleHook> Trainer::adapter_module_hooks() {
    std::vector<neuron::ModuleHook> hooks;
    auto& adapters = policy_.adapters();
    for (std::size_t m = 0; m < adapters.size(); ++m) {
        neuron::ModuleHook h;
        h.id = "policy/adapter." + std::to_string(m);
        h.in_W = adapters[m].A;
        h.out_W = adapters[m].B;
        h.in_w_init = adapters[m].a_init;
        h.out_w_init = adapters[m].b_init;
        hooks.push_back(h);
    }
    return hooks;
}

EpochBatch Trainer::sample_probe_batch(std::uint64_t stream) {
    std::size_t T = sched_.T;
    // enough rollouts that each contributes only a handful of states
    std::size_t n_probe = std::max<std::size_t>((cfg_.probe_size + 3) / 4,
                                                (cfg_.probe_size + T - 1) / T);
    Rng probe_ctx_rng = Rng::stream(cfg_.seed, stream);
    Tensor ctxs = Tensor::zeros({n_probe, 2});
    std::size_t n_ctx = train_contexts_.rows();
    for (std::size_t i = 0; i < n_probe; ++i) {
        std::size_t k = static_cast<std::size_t>(
            probe_ctx_rng.uniform_int(0, static_cast<std::int64_t>(n_ctx) - 1));
        ctxs.at(i, 0) = train_contexts_.at(k, 0);
        ctxs.at(i, 1) = train_contexts_.at(k, 1);
    }
    std::vector<std::uint64_t> seeds(n_probe);
    std::uint64_t base = mix_seed(cfg_.seed) ^ mix_seed(stream);
    for (std::size_t i = 0; i < n_probe; ++i) seeds[i] = ddpm::derive_trajectory_seed(base, i);
    EpochBatch probe_batch;
    probe_batch.trajectories = ddpm::sample_trajectories(policy_, sched_, ctxs,
                                                         cfg_.guidance_scale, seeds,
                                                         cfg_.workers);
    return probe_batch;
}

void Trainer::apply_reset(std::size_t epoch_index, EpochMetrics& em, const EpochBatch&) {
    // fresh probe rollouts at reset time so scores reflect the current
    // sampling distribution
    EpochBatch probe_batch = sample_probe_batch(6000 + epoch_index);

    if (cfg_.reset_target == "critic") {
        std::vector<std::vector<double>> scores;
        double before = measure_critic_dormancy(probe_batch, &scores);
        auto hooks = critic_module_hooks();
        Rng reset_rng = Rng::stream(cfg_.seed, 5000 + epoch_index);
        neuron::ResetEvent ev = neuron::reset_parameters(
            hooks, scores, cfg_.reset_strategy, cfg_.dormant_tau, reset_rng,
            critic_opt_ ? &*critic_opt_ : nullptr, epoch_index, "critic",
            5000 + epoch_index);
        double after = measure_critic_dormancy(probe_batch);
        em.dormant_before_reset = before;
        em.dormant_after_reset = after;
        reset_events_.push_back(ev);
        write_event(ev, before, after, em.overlap_pct);
    } else {
        // policy adapter: neurons are the rows of the low-rank bottleneck,
        // activation |h . A_n| measured on fresh denoiser inputs
        auto hooks = adapter_module_hooks();
        if (hooks.empty()) return;
        std::size_t T = sched_.T;
        std::size_t n_probe = probe_batch.trajectories.size();
        std::size_t n_inputs = std::min<std::size_t>(cfg_.probe_size,
                                                     n_probe * (T + 1));
        std::vector<std::vector<double>> scores;
        {
            ad::NoGradGuard ng;
            Tensor xs = Tensor::zeros({n_inputs, 2});
            Tensor cs = Tensor::zeros({n_inputs, 2});
            std::vector<int> ts(n_inputs);
            std::size_t k = 0;
            for (std::size_t i = 0; i < n_probe && k < n_inputs; ++i)
                for (std::size_t s = 0; s <= T && k < n_inputs; ++s, ++k) {
                    xs.at(k, 0) = probe_batch.trajectories[i].x[s][0];
                    xs.at(k, 1) = probe_batch.trajectories[i].x[s][1];
                    cs.at(k, 0) = probe_batch.trajectories[i].context[0];
                    cs.at(k, 1) = probe_batch.trajectories[i].context[1];
                    ts[k] = static_cast<int>(s);
                }
            std::vector<Tensor> acts = policy_.adapter_bottleneck_activations(xs, ts, cs);
            for (const Tensor& a : acts)
                scores.push_back(neuron::activation_scores(a).scores);
        }
        Rng reset_rng = Rng::stream(cfg_.seed, 5000 + epoch_index);
        neuron::ResetEvent ev = neuron::reset_parameters(
            hooks, scores, cfg_.reset_strategy, cfg_.dormant_tau, reset_rng, &policy_opt_,
            epoch_index, "policy-adapter", 5000 + epoch_index);
        reset_events_.push_back(ev);
        em.dormant_before_reset = kNan;
        em.dormant_after_reset = kNan;
        write_event(ev, kNan, kNan, std::nullopt);
    }
    em.reset_fired = true;
}

EpochMetrics Trainer::run_epoch(std::size_t epoch_index) {
    EpochMetrics em;
    em.dormant_pct = kNan;
    em.dormant_before_reset = kNan;
    em.dormant_after_reset = kNan;

    EpochBatch batch = collect_epoch(epoch_index);
    em.reward_mean = batch.reward_mean;
    em.reward_std = batch.reward_std;

    std::size_t rows_before = step_metrics_.size();
    if (mode_uses_critic(cfg_.mode))
        update_sweep_tdpo(batch, epoch_index, em);
    else
        update_sweep_ddpo(batch, epoch_index, em);

    // aggregate the step rows of this epoch
    double pl = 0.0, cl = 0.0, rm = 0.0, tm = 0.0;
    std::size_t nrows = step_metrics_.size() - rows_before;
    for (std::size_t i = rows_before; i < step_metrics_.size(); ++i) {
        pl += step_metrics_[i].policy_loss;
        if (!std::isnan(step_metrics_[i].critic_loss)) cl += step_metrics_[i].critic_loss;
        rm += step_metrics_[i].ratio_mean;
        tm += step_metrics_[i].temporal_mean;
    }
    if (nrows > 0) {
        em.policy_loss_mean = pl / double(nrows);
        em.critic_loss_mean = mode_uses_critic(cfg_.mode) ? cl / double(nrows) : kNan;
        em.ratio_mean = rm / double(nrows);
        em.temporal_mean = tm / double(nrows);
    } else {
        em.critic_loss_mean = kNan;
    }

    if (critic_ && mode_uses_critic(cfg_.mode)) {
        // common-random-number probe: fixed contexts and noise seeds under
        // the current policy, so the percentage series is comparable
        // across epochs
        EpochBatch probe = sample_probe_batch(/*fixed_stream=*/9000);
        em.dormant_pct = measure_critic_dormancy(probe);
        last_dormant_pct_ = em.dormant_pct;
    }

    if (cfg_.mode == Mode::tdpo_r && cfg_.reset_frequency > 0 &&
        epoch_index % cfg_.reset_frequency == 0) {
        apply_reset(epoch_index, em, batch);
    }

    StepMetric summary;
    summary.epoch = epoch_index;
    summary.step = policy_updates_total_;
    summary.timestep = -1;
    summary.mode = cfg_.mode;
    summary.reward_mean = em.reward_mean;
    summary.reward_std = em.reward_std;
    summary.temporal_mean = em.temporal_mean;
    summary.policy_loss = em.policy_loss_mean;
    summary.critic_loss = em.critic_loss_mean;
    summary.ratio_mean = em.ratio_mean;
    summary.dormant_pct = em.dormant_pct;
    summary.reset_fired = em.reset_fired ? 1 : 0;
    emit_step_row(summary);
    return em;
}

std::vector<EpochMetrics> Trainer::train(
    const std::function<void(std::size_t, const EpochMetrics&)>& on_epoch) {
    std::vector<EpochMetrics> all;
    all.reserve(cfg_.epochs);
    for (std::size_t e = 1; e <= cfg_.epochs; ++e) {
        EpochMetrics em = run_epoch(e);
        if (cfg_.checkpoint_every > 0 && e % cfg_.checkpoint_every == 0)
            maybe_checkpoint(e, false);
        if (on_epoch) on_epoch(e, em);
        all.push_back(std::move(em));
    }
    maybe_checkpoint(cfg_.epochs, true);
    return all;
}

void Trainer::set_output_dir(const std::string& dir) {
    out_dir_ = dir;
    if (!out_dir_.empty()) std::filesystem::create_directories(out_dir_);
}

void Trainer::emit_step_row(const StepMetric& row) {
    step_metrics_.push_back(row);
    if (out_dir_.empty()) return;
    std::ofstream os(out_dir_ + "/metrics.csv", std::ios::app);
    if (!metrics_header_written_) {
        // the file may pre-exist across trainer instances; only write the
        // header when the file is empty
        os.seekp(0, std::ios::end);
        if (os.tellp() == 0)
            os << "epoch,step,timestep,mode,reward_mean,reward_std,temporal_reward_mean,"
                  "policy_loss,critic_loss,ratio_mean,dormant_pct,reset_fired\n";
        metrics_header_written_ = true;
    }
    os << row.epoch << ',' << row.step << ',' << row.timestep << ',' << mode_name(row.mode)
       << ',' << io::fmt(row.reward_mean) << ',' << io::fmt(row.reward_std) << ','
       << io::fmt(row.temporal_mean) << ',' << io::fmt(row.policy_loss) << ','
       << io::fmt(row.critic_loss) << ',' << io::fmt(row.ratio_mean) << ','
       << io::fmt(row.dormant_pct) << ',' << row.reset_fired << '\n';
}

void Trainer::write_event(const neuron::ResetEvent& ev, double before, double after,
                          std::optional<double> overlap) {
    if (out_dir_.empty()) return;
    nlohmann::json j;
    j["epoch"] = ev.epoch;
    j["target"] = ev.target;
    j["strategy"] = neuron::strategy_name(ev.strategy);
    nlohmann::json counts = nlohmann::json::object();
    for (std::size_t m = 0; m < ev.module_ids.size(); ++m)
        counts[ev.module_ids[m]] = ev.reset_counts[m];
    j["module_counts"] = counts;
    j["total_reset"] = ev.total_reset();
    if (!std::isnan(before)) j["dormant_pct_before"] = before;
    if (!std::isnan(after)) j["dormant_pct_after"] = after;
    if (overlap.has_value()) j["overlap_pct"] = *overlap;
    j["rng_stream"] = ev.rng_stream;
    std::ofstream os(out_dir_ + "/neuron_events.jsonl", std::ios::app);
    os << j.dump() << '\n';
}

void Trainer::maybe_checkpoint(std::size_t epoch_index, bool final) {
    if (out_dir_.empty()) return;
    std::map<std::string, Tensor> st = policy_.state_dict();
    if (critic_) {
        auto cst = critic_->state_dict();
        st.insert(cst.begin(), cst.end());
    }
    std::filesystem::create_directories(out_dir_ + "/checkpoints");
    char name[64];
    if (final)
        std::snprintf(name, sizeof(name), "final.tdpr");
    else
        std::snprintf(name, sizeof(name), "epoch_%04zu.tdpr", epoch_index);
    ad::save_checkpoint(out_dir_ + "/checkpoints/" + name, st);
}

}  // namespace tdpo::train
