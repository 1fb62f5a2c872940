// Command-line front end: pretraining, reward fitting, finetuning,
// evaluation, neuron reports, plot data and the ablation grid.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "tdpo/checkpoint.hpp"
#include "tdpo/harness.hpp"
#include "tdpo/io.hpp"

namespace fs = std::filesystem;
using namespace tdpo;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

// every leftover --key=value token overrides a config key
void apply_cli_overrides(harness::ExperimentConfig& cfg, const std::vector<std::string>& extras) {
    for (const std::string& tok : extras) {
        if (tok.rfind("--", 0) != 0)
            throw std::invalid_argument("unexpected argument '" + tok +
                                        "' (overrides look like --key=value)");
        std::size_t eq = tok.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("override '" + tok + "' is missing '=value'");
        harness::apply_override(cfg, tok.substr(2, eq - 2), tok.substr(eq + 1));
    }
}

harness::ExperimentConfig load(const std::string& config_path,
                               const std::vector<std::string>& extras) {
    harness::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = harness::load_config(config_path);
    apply_cli_overrides(cfg, extras);
    cfg.validate();
    return cfg;
}

std::string run_dir_of(const harness::ExperimentConfig& cfg) {
    return cfg.output_dir + "/" + cfg.run_name;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy diffusion RL lab: temporal-reward policy optimization"};
    app.require_subcommand(1);

    std::string config_path;
    std::string checkpoint_path;
    std::string modes_csv = "tdpo,tdpo-r,ddpo-batch,ddpo-highfreq";
    std::string out_path;
    std::vector<std::string> plot_dirs;
    bool with_pretrain = false, with_fit = false;

    auto add_config_opt = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config file (key=value lines)");
        sub->allow_extras();
    };

    CLI::App* cmd_pre = app.add_subcommand("pretrain", "train the base diffusion model");
    add_config_opt(cmd_pre);
    CLI::App* cmd_fit = app.add_subcommand("fit-rewards", "fit the training reward head");
    add_config_opt(cmd_fit);
    CLI::App* cmd_fin = app.add_subcommand("finetune", "run the RL finetuning stages");
    add_config_opt(cmd_fin);
    cmd_fin->add_flag("--pretrain", with_pretrain,
                      "run the pretrain stage first when the checkpoint is missing");
    cmd_fin->add_flag("--fit-rewards", with_fit,
                      "run the reward-fitting stage first when missing");
    CLI::App* cmd_eval = app.add_subcommand("eval", "evaluate a policy checkpoint");
    add_config_opt(cmd_eval);
    cmd_eval->add_option("--checkpoint", checkpoint_path, "adapter checkpoint to evaluate");
    CLI::App* cmd_neuron =
        app.add_subcommand("neuron-report", "activation-score report for a critic checkpoint");
    add_config_opt(cmd_neuron);
    cmd_neuron->add_option("--checkpoint", checkpoint_path, "checkpoint with critic tensors");
    CLI::App* cmd_plot = app.add_subcommand("plot-data", "tidy CSV across run directories");
    cmd_plot->add_option("dirs", plot_dirs, "completed run directories");
    cmd_plot->add_option("--out", out_path, "write to a file instead of stdout");
    CLI::App* cmd_ablate = app.add_subcommand("ablate", "grid of modes x seeds");
    add_config_opt(cmd_ablate);
    cmd_ablate->add_option("--modes", modes_csv, "comma-separated trainer modes");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmd_pre->parsed()) {
            auto cfg = load(config_path, cmd_pre->remaining());
            harness::stage_pretrain(cfg, run_dir_of(cfg));
            std::cout << "pretrained model written to " << run_dir_of(cfg)
                      << "/shared/pretrain.tdpr\n";
            return kExitOk;
        }
        if (cmd_fit->parsed()) {
            auto cfg = load(config_path, cmd_fit->remaining());
            auto den = harness::load_pretrained(cfg, run_dir_of(cfg));
            auto model = harness::stage_fit_rewards(cfg, den, run_dir_of(cfg));
            std::cout << "fitted " << rewards::kind_name(model.kind)
                      << " head, holdout rmse " << model.fit_rmse << "\n";
            return kExitOk;
        }
        if (cmd_fin->parsed()) {
            auto cfg = load(config_path, cmd_fin->remaining());
            std::string dir = run_dir_of(cfg);
            if (!fs::exists(dir + "/shared/pretrain.tdpr")) {
                if (!with_pretrain)
                    throw harness::StageError(
                        "finetune", "no pretrained checkpoint; pass --pretrain to build one");
                harness::stage_pretrain(cfg, dir);
            }
            if (!fs::exists(dir + "/shared/rewards.tdpr")) {
                if (!with_fit)
                    throw harness::StageError(
                        "finetune", "no fitted rewards; pass --fit-rewards to build them");
                harness::stage_fit_rewards(cfg, harness::load_pretrained(cfg, dir), dir);
            }
            for (std::uint64_t seed : cfg.seeds) {
                auto res = harness::stage_finetune(cfg, seed, dir);
                double last = res.epochs.empty() ? 0.0 : res.epochs.back().reward_mean;
                std::cout << "seed " << seed << ": " << res.epochs.size()
                          << " epochs, final mean reward " << io::fmt(last) << " -> "
                          << res.dir << "\n";
            }
            return kExitOk;
        }
        if (cmd_eval->parsed()) {
            auto cfg = load(config_path, cmd_eval->remaining());
            auto policy = harness::load_pretrained(cfg, run_dir_of(cfg));
            if (!checkpoint_path.empty()) {
                policy.attach_adapter(cfg.lora_rank, cfg.lora_scale, 0);
                policy.load_state_dict(ad::load_checkpoint(checkpoint_path));
            }
            auto sched = ddpm::make_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max,
                                             cfg.sigma_floor);
            data::MixtureSpec mix;
            mix.n_modes = cfg.train_angles;
            std::vector<rewards::Kind> kinds{cfg.train_reward};
            for (auto k : cfg.eval_rewards) kinds.push_back(k);
            std::cout << "epoch,queries,context_set,reward_kind,mean,std,n\n";
            for (const auto& [angles, tag] :
                 {std::pair{mix.mode_angles(), std::string("train")},
                  std::pair{mix.bisecting_angles(), std::string("unseen")}}) {
                auto rows = harness::cross_reward_eval(
                    policy, sched, kinds, harness::contexts_from_angles(angles), tag,
                    cfg.eval_samples, cfg.trainer.guidance_scale, cfg.seeds[0], 0, 0,
                    cfg.trainer.workers);
                for (const auto& r : rows)
                    std::cout << r.epoch << ',' << r.queries << ',' << r.context_set << ','
                              << r.reward_kind << ',' << io::fmt(r.mean) << ','
                              << io::fmt(r.std_dev) << ',' << r.n << "\n";
            }
            return kExitOk;
        }
        if (cmd_neuron->parsed()) {
            auto cfg = load(config_path, cmd_neuron->remaining());
            if (checkpoint_path.empty())
                throw std::invalid_argument("neuron-report needs --checkpoint");
            auto enc = std::make_shared<rewards::Encoder>(cfg.encoder_seed,
                                                          cfg.encoder_width, 16, cfg.dtype);
            critic::CriticState::Config ccfg;
            ccfg.width_divisor = cfg.critic_width_divisor;
            critic::CriticState cs(enc, ccfg, cfg.critic_seed);
            cs.load_state_dict(ad::load_checkpoint(checkpoint_path));

            // probe on mixture data embedded at a spread of timesteps
            Rng rng = Rng::stream(cfg.seeds[0], 33);
            data::MixtureSpec mix;
            mix.n_modes = cfg.train_angles;
            ad::Tensor xs, cs_ctx;
            data::draw_batch(mix, cfg.trainer.probe_size, rng, xs, cs_ctx);
            std::vector<int> ts(cfg.trainer.probe_size);
            for (std::size_t i = 0; i < ts.size(); ++i)
                ts[i] = static_cast<int>(i % cfg.timesteps);
            auto acts = cs.hidden_activations(xs, ts, cs_ctx);
            nlohmann::json out = nlohmann::json::array();
            for (std::size_t m = 0; m < acts.size(); ++m) {
                auto rep = neuron::make_report("critic/layer." + std::to_string(m), acts[m],
                                               cfg.trainer.dormant_tau, "mixture-probe");
                nlohmann::json j;
                j["module"] = rep.module_id;
                j["neurons"] = rep.neuron_count;
                j["tau"] = rep.tau;
                j["dormant_pct"] = rep.dormant_pct;
                j["degenerate"] = rep.degenerate;
                j["scores"] = rep.scores;
                out.push_back(j);
            }
            std::cout << out.dump(2) << "\n";
            return kExitOk;
        }
        if (cmd_plot->parsed()) {
            std::string csv = harness::emit_plot_data(plot_dirs);
            if (out_path.empty()) {
                std::cout << csv;
            } else {
                std::ofstream os(out_path, std::ios::trunc);
                os << csv;
            }
            return kExitOk;
        }
        if (cmd_ablate->parsed()) {
            auto cfg = load(config_path, cmd_ablate->remaining());
            std::string base_name = cfg.run_name;
            std::vector<std::string> cells;
            std::string cur;
            for (char ch : modes_csv) {
                if (ch == ',') {
                    cells.push_back(cur);
                    cur.clear();
                } else
                    cur += ch;
            }
            cells.push_back(cur);

            // one pretrained model and reward head shared by every cell
            std::string shared_dir = cfg.output_dir + "/" + base_name + "-shared";
            if (!fs::exists(shared_dir + "/shared/pretrain.tdpr"))
                harness::stage_pretrain(cfg, shared_dir);
            if (!fs::exists(shared_dir + "/shared/rewards.tdpr"))
                harness::stage_fit_rewards(cfg, harness::load_pretrained(cfg, shared_dir),
                                           shared_dir);

            std::cout << "mode,seed,final_reward_mean,dir\n";
            for (const std::string& mode : cells) {
                harness::ExperimentConfig cell = cfg;
                cell.trainer.mode = train::mode_from_string(mode);
                cell.run_name = base_name + "-" + mode;
                std::string dir = run_dir_of(cell);
                fs::create_directories(dir + "/shared");
                for (const char* f : {"pretrain.tdpr", "rewards.tdpr"})
                    fs::copy_file(shared_dir + "/shared/" + std::string(f),
                                  dir + "/shared/" + std::string(f),
                                  fs::copy_options::overwrite_existing);
                for (std::uint64_t seed : cell.seeds) {
                    auto res = harness::stage_finetune(cell, seed, dir);
                    double last = res.epochs.empty() ? 0.0 : res.epochs.back().reward_mean;
                    std::cout << mode << ',' << seed << ',' << io::fmt(last) << ','
                              << res.dir << "\n";
                }
            }
            return kExitOk;
        }
    } catch (const harness::StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStage;
    }
    return kExitOk;
}
