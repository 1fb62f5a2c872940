#include "tdpo/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "tdpo/checkpoint.hpp"
#include "tdpo/io.hpp"

namespace fs = std::filesystem;

namespace tdpo::harness {

using ad::Tensor;

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing data");
        return d;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad numeric value '" + v + "' for " + key);
    }
}

std::size_t parse_size(const std::string& v, const std::string& key) {
    double d = parse_double(v, key);
    if (d < 0 || d != std::floor(d))
        throw std::invalid_argument("config: " + key + " must be a non-negative integer");
    return static_cast<std::size_t>(d);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw std::invalid_argument("config: " + key + " must be 0/1");
}

std::string kinds_to_string(const std::vector<rewards::Kind>& ks) {
    std::string out;
    for (std::size_t i = 0; i < ks.size(); ++i)
        out += (i ? "," : "") + rewards::kind_name(ks[i]);
    return out;
}

std::string widths_to_string(const std::vector<std::size_t>& ws) {
    std::string out;
    for (std::size_t i = 0; i < ws.size(); ++i)
        out += (i ? "," : "") + std::to_string(ws[i]);
    return out;
}

std::string seeds_to_string(const std::vector<std::uint64_t>& ss) {
    std::string out;
    for (std::size_t i = 0; i < ss.size(); ++i)
        out += (i ? "," : "") + std::to_string(ss[i]);
    return out;
}

}  // namespace

void ExperimentConfig::validate() const {
    trainer.validate();
    std::set<rewards::Kind> seen;
    for (rewards::Kind k : eval_rewards) {
        if (k == train_reward)
            throw std::invalid_argument(
                "config: train reward duplicated in the evaluation-only set");
        if (!seen.insert(k).second)
            throw std::invalid_argument("config: duplicate evaluation reward");
    }
    if (seeds.empty()) throw std::invalid_argument("config: no seeds");
    if (train_angles < 1) throw std::invalid_argument("config: train_angles must be >= 1");
    if (timesteps < 1) throw std::invalid_argument("config: denoising_timesteps must be >= 1");
    if (context_dropout < 0.0 || context_dropout >= 1.0)
        throw std::invalid_argument("config: context_dropout must be in [0, 1)");
}

namespace {

// single source of truth for the key set: appliers keyed by Table-style names
struct KeyTable {
    std::map<std::string,
             std::function<void(ExperimentConfig&, const std::string&)>>
        set;
    KeyTable() {
        auto& m = set;
        m["run_name"] = [](auto& c, const std::string& v) { c.run_name = v; };
        m["output_dir"] = [](auto& c, const std::string& v) { c.output_dir = v; };
        m["seed"] = [](auto& c, const std::string& v) {
            c.seeds = {static_cast<std::uint64_t>(parse_size(v, "seed"))};
        };
        m["seeds"] = [](auto& c, const std::string& v) {
            c.seeds.clear();
            for (const std::string& part : split(v, ','))
                c.seeds.push_back(static_cast<std::uint64_t>(parse_size(trim(part), "seeds")));
        };
        m["mode"] = [](auto& c, const std::string& v) {
            c.trainer.mode = train::mode_from_string(v);
        };
        m["epochs"] = [](auto& c, const std::string& v) {
            c.trainer.epochs = parse_size(v, "epochs");
        };
        m["denoising_timesteps"] = [](auto& c, const std::string& v) {
            c.timesteps = parse_size(v, "denoising_timesteps");
        };
        m["beta_min"] = [](auto& c, const std::string& v) {
            c.beta_min = parse_double(v, "beta_min");
        };
        m["beta_max"] = [](auto& c, const std::string& v) {
            c.beta_max = parse_double(v, "beta_max");
        };
        m["sigma_floor"] = [](auto& c, const std::string& v) {
            c.sigma_floor = parse_double(v, "sigma_floor");
        };
        m["guidance_scale"] = [](auto& c, const std::string& v) {
            c.trainer.guidance_scale = parse_double(v, "guidance_scale");
        };
        m["policy_learning_rate"] = [](auto& c, const std::string& v) {
            c.trainer.policy_lr = parse_double(v, "policy_learning_rate");
        };
        m["policy_clipping_range"] = [](auto& c, const std::string& v) {
            c.trainer.policy_clip = parse_double(v, "policy_clipping_range");
        };
        m["critic_learning_rate"] = [](auto& c, const std::string& v) {
            c.trainer.critic_lr = parse_double(v, "critic_learning_rate");
        };
        m["critic_clipping_range"] = [](auto& c, const std::string& v) {
            c.critic_clip_range = parse_double(v, "critic_clipping_range");
        };
        m["maximum_gradient_norm"] = [](auto& c, const std::string& v) {
            c.trainer.max_grad_norm = parse_double(v, "maximum_gradient_norm");
        };
        m["optimizer_weight_decay"] = [](auto& c, const std::string& v) {
            c.trainer.weight_decay = parse_double(v, "optimizer_weight_decay");
        };
        m["optimizer_beta1"] = [](auto& c, const std::string& v) {
            c.trainer.adam_beta1 = parse_double(v, "optimizer_beta1");
        };
        m["optimizer_beta2"] = [](auto& c, const std::string& v) {
            c.trainer.adam_beta2 = parse_double(v, "optimizer_beta2");
        };
        m["optimizer_epsilon"] = [](auto& c, const std::string& v) {
            c.trainer.adam_eps = parse_double(v, "optimizer_epsilon");
        };
        m["samples_per_epoch"] = [](auto& c, const std::string& v) {
            c.trainer.samples_per_epoch = parse_size(v, "samples_per_epoch");
        };
        m["training_batch_size"] = [](auto& c, const std::string& v) {
            c.trainer.batch_size = parse_size(v, "training_batch_size");
        };
        m["gradient_accumulation_steps"] = [](auto& c, const std::string& v) {
            c.trainer.grad_accumulation = parse_size(v, "gradient_accumulation_steps");
        };
        m["neuron_dormant_threshold"] = [](auto& c, const std::string& v) {
            c.trainer.dormant_tau = parse_double(v, "neuron_dormant_threshold");
        };
        m["neuron_reset_frequency"] = [](auto& c, const std::string& v) {
            c.trainer.reset_frequency = parse_size(v, "neuron_reset_frequency");
        };
        m["reset_strategy"] = [](auto& c, const std::string& v) {
            c.trainer.reset_strategy = neuron::strategy_from_string(v);
        };
        m["reset_target"] = [](auto& c, const std::string& v) {
            c.trainer.reset_target = v;
        };
        m["kl_coefficient"] = [](auto& c, const std::string& v) {
            c.trainer.kl_coef = parse_double(v, "kl_coefficient");
        };
        m["standardize_temporal_rewards"] = [](auto& c, const std::string& v) {
            c.trainer.standardize_temporal = parse_bool(v, "standardize_temporal_rewards");
        };
        m["weight_post_action"] = [](auto& c, const std::string& v) {
            c.trainer.weight_post_action = parse_bool(v, "weight_post_action");
        };
        m["workers"] = [](auto& c, const std::string& v) {
            c.trainer.workers = std::max<std::size_t>(1, parse_size(v, "workers"));
        };
        m["probe_size"] = [](auto& c, const std::string& v) {
            c.trainer.probe_size = parse_size(v, "probe_size");
        };
        m["checkpoint_every"] = [](auto& c, const std::string& v) {
            c.trainer.checkpoint_every = parse_size(v, "checkpoint_every");
        };
        m["train_reward"] = [](auto& c, const std::string& v) {
            c.train_reward = rewards::kind_from_string(v);
        };
        m["eval_rewards"] = [](auto& c, const std::string& v) {
            c.eval_rewards.clear();
            for (const std::string& part : split(v, ','))
                c.eval_rewards.push_back(rewards::kind_from_string(trim(part)));
        };
        m["encoder_seed"] = [](auto& c, const std::string& v) {
            c.encoder_seed = static_cast<std::uint64_t>(parse_size(v, "encoder_seed"));
        };
        m["encoder_width"] = [](auto& c, const std::string& v) {
            c.encoder_width = parse_size(v, "encoder_width");
        };
        m["misaligned_critic_encoder"] = [](auto& c, const std::string& v) {
            c.misaligned_critic_encoder = parse_bool(v, "misaligned_critic_encoder");
        };
        m["reward_fit_model_samples"] = [](auto& c, const std::string& v) {
            c.reward_fit_model_samples = parse_size(v, "reward_fit_model_samples");
        };
        m["reward_fit_box_samples"] = [](auto& c, const std::string& v) {
            c.reward_fit_box_samples = parse_size(v, "reward_fit_box_samples");
        };
        m["reward_fit_steps"] = [](auto& c, const std::string& v) {
            c.reward_fit_steps = parse_size(v, "reward_fit_steps");
        };
        m["critic_width_divisor"] = [](auto& c, const std::string& v) {
            c.critic_width_divisor = parse_size(v, "critic_width_divisor");
        };
        m["critic_seed"] = [](auto& c, const std::string& v) {
            c.critic_seed = static_cast<std::uint64_t>(parse_size(v, "critic_seed"));
        };
        m["eval_cadence"] = [](auto& c, const std::string& v) {
            c.eval_cadence = parse_size(v, "eval_cadence");
        };
        m["eval_samples"] = [](auto& c, const std::string& v) {
            c.eval_samples = parse_size(v, "eval_samples");
        };
        m["train_angles"] = [](auto& c, const std::string& v) {
            c.train_angles = parse_size(v, "train_angles");
        };
        m["pretrain_seed"] = [](auto& c, const std::string& v) {
            c.pretrain_seed = static_cast<std::uint64_t>(parse_size(v, "pretrain_seed"));
        };
        m["pretrain_steps"] = [](auto& c, const std::string& v) {
            c.pretrain_steps = parse_size(v, "pretrain_steps");
        };
        m["pretrain_batch"] = [](auto& c, const std::string& v) {
            c.pretrain_batch = parse_size(v, "pretrain_batch");
        };
        m["pretrain_lr"] = [](auto& c, const std::string& v) {
            c.pretrain_lr = parse_double(v, "pretrain_lr");
        };
        m["context_dropout"] = [](auto& c, const std::string& v) {
            c.context_dropout = parse_double(v, "context_dropout");
        };
        m["lora_rank"] = [](auto& c, const std::string& v) {
            c.lora_rank = parse_size(v, "lora_rank");
        };
        m["lora_scale"] = [](auto& c, const std::string& v) {
            c.lora_scale = parse_double(v, "lora_scale");
        };
        m["denoiser_hidden"] = [](auto& c, const std::string& v) {
            c.denoiser_hidden.clear();
            for (const std::string& part : split(v, ','))
                c.denoiser_hidden.push_back(parse_size(trim(part), "denoiser_hidden"));
        };
        m["t_embed_dim"] = [](auto& c, const std::string& v) {
            c.t_embed_dim = parse_size(v, "t_embed_dim");
        };
        m["ctx_embed_dim"] = [](auto& c, const std::string& v) {
            c.ctx_embed_dim = parse_size(v, "ctx_embed_dim");
        };
        m["dtype"] = [](auto& c, const std::string& v) {
            if (v == "f64")
                c.dtype = ad::Dtype::f64;
            else if (v == "f32")
                c.dtype = ad::Dtype::f32;
            else
                throw std::invalid_argument("config: dtype must be f64 or f32");
        };
    }
};

const KeyTable& key_table() {
    static KeyTable t;
    return t;
}

}  // namespace

void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    auto it = key_table().set.find(key);
    if (it == key_table().set.end())
        throw std::invalid_argument("config: unknown key '" + key + "'");
    it->second(cfg, value);
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open " + path);
    ExperimentConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                        ": expected key=value");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        try {
            apply_override(cfg, key, value);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("config: line " + std::to_string(lineno) + ": " +
                                        e.what());
        }
    }
    cfg.validate();
    return cfg;
}

std::vector<std::string> ExperimentConfig::echo() const {
    std::vector<std::string> out;
    out.push_back("beta_max=" + io::fmt(beta_max));
    out.push_back("beta_min=" + io::fmt(beta_min));
    out.push_back("checkpoint_every=" + std::to_string(trainer.checkpoint_every));
    out.push_back("context_dropout=" + io::fmt(context_dropout));
    out.push_back("critic_clipping_range=" + io::fmt(critic_clip_range));
    out.push_back("critic_learning_rate=" + io::fmt(trainer.critic_lr));
    out.push_back("critic_seed=" + std::to_string(critic_seed));
    out.push_back("critic_width_divisor=" + std::to_string(critic_width_divisor));
    out.push_back("ctx_embed_dim=" + std::to_string(ctx_embed_dim));
    out.push_back("denoiser_hidden=" + widths_to_string(denoiser_hidden));
    out.push_back("denoising_timesteps=" + std::to_string(timesteps));
    out.push_back("dtype=" + std::string(dtype == ad::Dtype::f64 ? "f64" : "f32"));
    out.push_back("encoder_seed=" + std::to_string(encoder_seed));
    out.push_back("encoder_width=" + std::to_string(encoder_width));
    out.push_back("epochs=" + std::to_string(trainer.epochs));
    out.push_back("eval_cadence=" + std::to_string(eval_cadence));
    out.push_back("eval_rewards=" + kinds_to_string(eval_rewards));
    out.push_back("eval_samples=" + std::to_string(eval_samples));
    out.push_back("gradient_accumulation_steps=" + std::to_string(trainer.grad_accumulation));
    out.push_back("guidance_scale=" + io::fmt(trainer.guidance_scale));
    out.push_back("kl_coefficient=" + io::fmt(trainer.kl_coef));
    out.push_back("lora_rank=" + std::to_string(lora_rank));
    out.push_back("lora_scale=" + io::fmt(lora_scale));
    out.push_back("maximum_gradient_norm=" + io::fmt(trainer.max_grad_norm));
    out.push_back("misaligned_critic_encoder=" +
                  std::string(misaligned_critic_encoder ? "1" : "0"));
    out.push_back("mode=" + train::mode_name(trainer.mode));
    out.push_back("neuron_dormant_threshold=" + io::fmt(trainer.dormant_tau));
    out.push_back("neuron_reset_frequency=" + std::to_string(trainer.reset_frequency));
    out.push_back("optimizer_beta1=" + io::fmt(trainer.adam_beta1));
    out.push_back("optimizer_beta2=" + io::fmt(trainer.adam_beta2));
    out.push_back("optimizer_epsilon=" + io::fmt(trainer.adam_eps));
    out.push_back("optimizer_weight_decay=" + io::fmt(trainer.weight_decay));
    out.push_back("output_dir=" + output_dir);
    out.push_back("policy_clipping_range=" + io::fmt(trainer.policy_clip));
    out.push_back("policy_learning_rate=" + io::fmt(trainer.policy_lr));
    out.push_back("pretrain_batch=" + std::to_string(pretrain_batch));
    out.push_back("pretrain_lr=" + io::fmt(pretrain_lr));
    out.push_back("pretrain_seed=" + std::to_string(pretrain_seed));
    out.push_back("pretrain_steps=" + std::to_string(pretrain_steps));
    out.push_back("probe_size=" + std::to_string(trainer.probe_size));
    out.push_back("reset_strategy=" + neuron::strategy_name(trainer.reset_strategy));
    out.push_back("reset_target=" + trainer.reset_target);
    out.push_back("reward_fit_box_samples=" + std::to_string(reward_fit_box_samples));
    out.push_back("reward_fit_model_samples=" + std::to_string(reward_fit_model_samples));
    out.push_back("reward_fit_steps=" + std::to_string(reward_fit_steps));
    out.push_back("run_name=" + run_name);
    out.push_back("samples_per_epoch=" + std::to_string(trainer.samples_per_epoch));
    out.push_back("seeds=" + seeds_to_string(seeds));
    out.push_back("sigma_floor=" + io::fmt(sigma_floor));
    out.push_back("standardize_temporal_rewards=" +
                  std::string(trainer.standardize_temporal ? "1" : "0"));
    out.push_back("t_embed_dim=" + std::to_string(t_embed_dim));
    out.push_back("train_angles=" + std::to_string(train_angles));
    out.push_back("train_reward=" + rewards::kind_name(train_reward));
    out.push_back("training_batch_size=" + std::to_string(trainer.batch_size));
    out.push_back("weight_post_action=" +
                  std::string(trainer.weight_post_action ? "1" : "0"));
    out.push_back("workers=" + std::to_string(trainer.workers));
    return out;
}

Tensor contexts_from_angles(const std::vector<double>& angles) {
    Tensor out = Tensor::zeros({angles.size(), 2});
    for (std::size_t i = 0; i < angles.size(); ++i) {
        out.at(i, 0) = std::cos(angles[i]);
        out.at(i, 1) = std::sin(angles[i]);
    }
    return out;
}

namespace {

ddpm::Denoiser::Config denoiser_config(const ExperimentConfig& cfg) {
    ddpm::Denoiser::Config dc;
    dc.hidden_widths = cfg.denoiser_hidden;
    dc.t_embed_dim = cfg.t_embed_dim;
    dc.ctx_embed_dim = cfg.ctx_embed_dim;
    dc.dtype = cfg.dtype;
    return dc;
}

ddpm::NoiseSchedule schedule_of(const ExperimentConfig& cfg) {
    return ddpm::make_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max, cfg.sigma_floor);
}

data::MixtureSpec mixture_of(const ExperimentConfig& cfg) {
    data::MixtureSpec mix;
    mix.n_modes = cfg.train_angles;
    return mix;
}

}  // namespace

ddpm::Denoiser stage_pretrain(const ExperimentConfig& cfg, const std::string& run_dir) {
    try {
        ddpm::Denoiser den = ddpm::Denoiser::create(denoiser_config(cfg), cfg.pretrain_seed);
        ddpm::NoiseSchedule sched = schedule_of(cfg);
        data::MixtureSpec mix = mixture_of(cfg);
        ad::AdamW::Options opts;
        opts.lr = cfg.pretrain_lr;
        opts.weight_decay = cfg.trainer.weight_decay;
        opts.max_grad_norm = 0.0;
        ad::AdamW opt(den.base_params(), opts);
        Rng data_rng = Rng::stream(cfg.pretrain_seed, 11);
        Rng step_rng = Rng::stream(cfg.pretrain_seed, 12);
        for (std::size_t step = 1; step <= cfg.pretrain_steps; ++step) {
            if (step == cfg.pretrain_steps / 2) opt.options().lr = cfg.pretrain_lr / 3.0;
            if (step == (4 * cfg.pretrain_steps) / 5)
                opt.options().lr = cfg.pretrain_lr / 10.0;
            Tensor x0, ctx;
            data::draw_batch(mix, cfg.pretrain_batch, data_rng, x0, ctx);
            ddpm::pretrain_step(den, opt, x0, ctx, sched, cfg.context_dropout, step_rng);
        }
        fs::create_directories(run_dir + "/shared");
        ad::save_checkpoint(run_dir + "/shared/pretrain.tdpr", den.state_dict());
        return den;
    } catch (const std::exception& e) {
        throw StageError("pretrain", e.what());
    }
}

ddpm::Denoiser load_pretrained(const ExperimentConfig& cfg, const std::string& run_dir) {
    std::string path = run_dir + "/shared/pretrain.tdpr";
    if (!fs::exists(path))
        throw StageError("pretrain", "missing checkpoint " + path +
                                         " (run the pretrain stage first)");
    ddpm::Denoiser den = ddpm::Denoiser::create(denoiser_config(cfg), cfg.pretrain_seed);
    den.load_state_dict(ad::load_checkpoint(path));
    return den;
}

rewards::RewardModel stage_fit_rewards(const ExperimentConfig& cfg,
                                       const ddpm::Denoiser& pretrained,
                                       const std::string& run_dir) {
    try {
        ddpm::NoiseSchedule sched = schedule_of(cfg);
        data::MixtureSpec mix = mixture_of(cfg);
        auto enc = std::make_shared<rewards::Encoder>(cfg.encoder_seed, cfg.encoder_width,
                                                      16, cfg.dtype);
        rewards::FitDataset ds = rewards::build_fit_dataset(
            pretrained, sched, mix, cfg.reward_fit_model_samples, cfg.reward_fit_box_samples,
            cfg.trainer.guidance_scale, cfg.encoder_seed + 101, cfg.trainer.workers);
        rewards::FitOptions fo;
        fo.max_steps = cfg.reward_fit_steps;
        rewards::RewardModel model =
            rewards::fit_reward_head(enc, cfg.train_reward, ds, cfg.encoder_seed + 7, fo);
        std::map<std::string, Tensor> st;
        model.to_state(st);
        fs::create_directories(run_dir + "/shared");
        ad::save_checkpoint(run_dir + "/shared/rewards.tdpr", st);
        return model;
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError("fit-rewards", e.what());
    }
}

rewards::RewardModel load_rewards(const ExperimentConfig& cfg, const std::string& run_dir) {
    std::string path = run_dir + "/shared/rewards.tdpr";
    if (!fs::exists(path))
        throw StageError("fit-rewards", "missing checkpoint " + path +
                                            " (run the fit-rewards stage first)");
    auto enc = std::make_shared<rewards::Encoder>(cfg.encoder_seed, cfg.encoder_width, 16,
                                                  cfg.dtype);
    return rewards::RewardModel::from_state(ad::load_checkpoint(path), cfg.train_reward,
                                            enc);
}

std::vector<EvalRow> cross_reward_eval(const ddpm::Denoiser& policy,
                                       const ddpm::NoiseSchedule& sched,
                                       const std::vector<rewards::Kind>& kinds,
                                       const Tensor& context_set,
                                       const std::string& context_tag, std::size_t n,
                                       double guidance_scale, std::uint64_t seed,
                                       std::size_t epoch, std::size_t queries,
                                       std::size_t workers) {
    if (n < 1) throw std::invalid_argument("cross_reward_eval: need n >= 1");
    Rng ctx_rng = Rng::stream(seed, 21);
    std::size_t k_ctx = context_set.rows();
    Tensor ctxs = Tensor::zeros({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t k = static_cast<std::size_t>(
            ctx_rng.uniform_int(0, static_cast<std::int64_t>(k_ctx) - 1));
        ctxs.at(i, 0) = context_set.at(k, 0);
        ctxs.at(i, 1) = context_set.at(k, 1);
    }
    std::vector<std::uint64_t> seeds(n);
    for (std::size_t i = 0; i < n; ++i)
        seeds[i] = ddpm::derive_trajectory_seed(mix_seed(seed) + 13, i);
    auto trajectories =
        ddpm::sample_trajectories(policy, sched, ctxs, guidance_scale, seeds, workers);

    std::vector<EvalRow> rows;
    for (rewards::Kind kind : kinds) {
        double mean = 0.0;
        std::vector<double> vals(n);
        for (std::size_t i = 0; i < n; ++i) {
            double x[2] = {trajectories[i].x[0][0], trajectories[i].x[0][1]};
            double c[2] = {ctxs.at(i, 0), ctxs.at(i, 1)};
            vals[i] = rewards::analytic_reward(kind, x, c);
            mean += vals[i];
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        EvalRow row;
        row.epoch = epoch;
        row.queries = queries;
        row.context_set = context_tag;
        row.reward_kind = rewards::kind_name(kind);
        row.mean = mean;
        row.std_dev = std::sqrt(var / static_cast<double>(n));
        row.n = n;
        rows.push_back(row);
    }
    return rows;
}

namespace {

void write_eval_rows(const std::string& path, const std::vector<EvalRow>& rows,
                     bool& header_done) {
    std::ofstream os(path, std::ios::app);
    if (!header_done) {
        os.seekp(0, std::ios::end);
        if (os.tellp() == 0) os << "epoch,queries,context_set,reward_kind,mean,std,n\n";
        header_done = true;
    }
    for (const EvalRow& r : rows)
        os << r.epoch << ',' << r.queries << ',' << r.context_set << ',' << r.reward_kind
           << ',' << io::fmt(r.mean) << ',' << io::fmt(r.std_dev) << ',' << r.n << '\n';
}

void write_manifest(const ExperimentConfig& cfg, const std::string& seed_dir,
                    std::uint64_t seed) {
    std::vector<std::string> lines;
    for (const std::string& l : cfg.echo()) lines.push_back("config." + l);
    lines.push_back("run.seed=" + std::to_string(seed));
    std::vector<std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(seed_dir))
        if (entry.is_regular_file() && entry.path().filename() != "manifest.txt")
            files.push_back(fs::relative(entry.path(), seed_dir).string());
    std::sort(files.begin(), files.end());
    for (const std::string& f : files) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(
                          ad::content_hash_file(seed_dir + "/" + f)));
        lines.push_back("hash." + f + "=" + buf);
    }
    std::ofstream os(seed_dir + "/manifest.txt", std::ios::trunc);
    for (const std::string& l : lines) os << l << '\n';
}

}  // namespace

SeedRunResult stage_finetune(const ExperimentConfig& cfg, std::uint64_t seed,
                             const std::string& run_dir) {
    try {
        ddpm::Denoiser policy = load_pretrained(cfg, run_dir);
        rewards::RewardModel reward = load_rewards(cfg, run_dir);
        ddpm::NoiseSchedule sched = schedule_of(cfg);
        data::MixtureSpec mix = mixture_of(cfg);

        policy.attach_adapter(cfg.lora_rank, cfg.lora_scale, mix_seed(seed) + 501);

        std::unique_ptr<critic::CriticState> critic_state;
        if (train::mode_uses_critic(cfg.trainer.mode)) {
            std::shared_ptr<const rewards::Encoder> enc;
            if (cfg.misaligned_critic_encoder)
                enc = std::make_shared<rewards::Encoder>(cfg.encoder_seed + 9999,
                                                         cfg.encoder_width / 2, 16,
                                                         cfg.dtype);
            else
                enc = reward.encoder;
            critic::CriticState::Config ccfg;
            ccfg.width_divisor = cfg.critic_width_divisor;
            ccfg.dtype = cfg.dtype;
            ccfg.clip_range = cfg.critic_clip_range;
            critic_state = std::make_unique<critic::CriticState>(
                enc, ccfg, mix_seed(cfg.critic_seed) ^ mix_seed(seed));
        }

        Tensor train_ctx = contexts_from_angles(mix.mode_angles());
        Tensor unseen_ctx = contexts_from_angles(mix.bisecting_angles());

        train::TrainerConfig tcfg = cfg.trainer;
        tcfg.seed = seed;
        train::Trainer trainer(tcfg, policy, sched, reward, critic_state.get(), train_ctx);

        // each finetune owns its seed directory outright; a rerun must
        // reproduce the tree byte-for-byte rather than append to it
        std::string seed_dir = run_dir + "/seed" + std::to_string(seed);
        fs::remove_all(seed_dir);
        fs::create_directories(seed_dir);
        trainer.set_output_dir(seed_dir);

        SeedRunResult result;
        result.seed = seed;
        result.dir = seed_dir;

        std::vector<rewards::Kind> kinds{cfg.train_reward};
        for (rewards::Kind k : cfg.eval_rewards) kinds.push_back(k);
        bool eval_header = false;
        auto run_eval = [&](std::size_t epoch) {
            std::uint64_t eval_seed = mix_seed(seed) ^ (0xE7A1ULL + epoch);
            auto rows_train = cross_reward_eval(policy, sched, kinds, train_ctx, "train",
                                                cfg.eval_samples, tcfg.guidance_scale,
                                                eval_seed, epoch, trainer.reward_queries(),
                                                tcfg.workers);
            auto rows_unseen = cross_reward_eval(policy, sched, kinds, unseen_ctx, "unseen",
                                                 cfg.eval_samples, tcfg.guidance_scale,
                                                 eval_seed + 1, epoch,
                                                 trainer.reward_queries(), tcfg.workers);
            write_eval_rows(seed_dir + "/eval.csv", rows_train, eval_header);
            write_eval_rows(seed_dir + "/eval.csv", rows_unseen, eval_header);
            for (auto& r : rows_train) result.eval_rows.push_back(r);
            for (auto& r : rows_unseen) result.eval_rows.push_back(r);
        };

        if (cfg.eval_cadence > 0) run_eval(0);  // pretrained baseline row
        result.epochs = trainer.train([&](std::size_t epoch, const train::EpochMetrics&) {
            if (cfg.eval_cadence > 0 && epoch % cfg.eval_cadence == 0) run_eval(epoch);
        });

        write_manifest(cfg, seed_dir, seed);
        return result;
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError("finetune", e.what());
    }
}

std::string run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    std::string run_dir = cfg.output_dir + "/" + cfg.run_name;
    fs::create_directories(run_dir);

    ddpm::Denoiser pretrained = fs::exists(run_dir + "/shared/pretrain.tdpr")
                                    ? load_pretrained(cfg, run_dir)
                                    : stage_pretrain(cfg, run_dir);
    if (!fs::exists(run_dir + "/shared/rewards.tdpr"))
        stage_fit_rewards(cfg, pretrained, run_dir);

    for (std::uint64_t seed : cfg.seeds) stage_finetune(cfg, seed, run_dir);
    return run_dir;
}

namespace {

struct PlotRow {
    std::string run;
    std::string seed;  // number, "mean" or "std"
    std::size_t epoch;
    std::size_t queries;
    std::string metric;
    double value;
};

}  // namespace

std::string emit_plot_data(const std::vector<std::string>& run_dirs) {
    std::vector<PlotRow> rows;
    // (run, epoch, metric) -> per-seed values for the aggregate rows
    std::map<std::tuple<std::string, std::size_t, std::string>,
             std::pair<std::size_t, std::vector<double>>>
        groups;

    for (const std::string& dir : run_dirs) {
        if (!fs::exists(dir)) {
            std::cerr << "plot-data: skipping missing run directory " << dir << "\n";
            continue;
        }
        std::string run = fs::path(dir).filename().string();
        std::vector<std::string> seed_dirs;
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_directory() &&
                entry.path().filename().string().rfind("seed", 0) == 0)
                seed_dirs.push_back(entry.path().string());
        std::sort(seed_dirs.begin(), seed_dirs.end());

        for (const std::string& sd : seed_dirs) {
            std::string seed = fs::path(sd).filename().string().substr(4);
            // eval rows
            std::ifstream ev(sd + "/eval.csv");
            std::string line;
            if (ev) {
                std::getline(ev, line);  // header
                while (std::getline(ev, line)) {
                    if (line.empty()) continue;
                    auto f = split(line, ',');
                    if (f.size() != 7) continue;
                    PlotRow r;
                    r.run = run;
                    r.seed = seed;
                    r.epoch = parse_size(f[0], "epoch");
                    r.queries = parse_size(f[1], "queries");
                    r.metric = f[2] + "/" + f[3] + "_mean";
                    r.value = parse_double(f[4], "mean");
                    rows.push_back(r);
                    auto& g = groups[{run, r.epoch, r.metric}];
                    g.first = r.queries;
                    g.second.push_back(r.value);
                }
            }
            // per-epoch training reward from the metrics summary rows
            std::ifstream ms(sd + "/metrics.csv");
            if (ms) {
                std::getline(ms, line);
                while (std::getline(ms, line)) {
                    if (line.empty()) continue;
                    auto f = split(line, ',');
                    if (f.size() < 12 || f[2] != "-1") continue;
                    PlotRow r;
                    r.run = run;
                    r.seed = seed;
                    r.epoch = parse_size(f[0], "epoch");
                    r.queries = 0;
                    r.metric = "train/reward_mean";
                    r.value = parse_double(f[4], "reward_mean");
                    rows.push_back(r);
                    auto& g = groups[{run, r.epoch, r.metric}];
                    g.second.push_back(r.value);
                    // dormant percentage when present
                    if (!f[10].empty()) {
                        PlotRow d;
                        d.run = run;
                        d.seed = seed;
                        d.epoch = r.epoch;
                        d.queries = 0;
                        d.metric = "train/dormant_pct";
                        d.value = parse_double(f[10], "dormant_pct");
                        rows.push_back(d);
                        groups[{run, d.epoch, d.metric}].second.push_back(d.value);
                    }
                }
            }
        }
    }

    std::ostringstream os;
    os << "run,seed,epoch,queries,metric,value\n";
    for (const PlotRow& r : rows)
        os << r.run << ',' << r.seed << ',' << r.epoch << ',' << r.queries << ','
           << r.metric << ',' << io::fmt(r.value) << '\n';
    for (const auto& [key, g] : groups) {
        const auto& [run, epoch, metric] = key;
        const std::vector<double>& vals = g.second;
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        double sd = std::sqrt(var / static_cast<double>(vals.size()));
        os << run << ",mean," << epoch << ',' << g.first << ',' << metric << ','
           << io::fmt(mean) << '\n';
        os << run << ",std," << epoch << ',' << g.first << ',' << metric << ','
           << io::fmt(sd) << '\n';
    }
    return os.str();
}

}  // namespace tdpo::harness
