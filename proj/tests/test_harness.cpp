#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "tdpo/checkpoint.hpp"
#include "tdpo/harness.hpp"

namespace fs = std::filesystem;
using namespace tdpo;
using namespace tdpo::harness;

namespace {

std::string write_tmp_config(const std::string& body, const std::string& name) {
    std::string path = (fs::temp_directory_path() / name).string();
    std::ofstream os(path, std::ios::trunc);
    os << body;
    return path;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// a config small enough for an end-to-end pipeline test
ExperimentConfig tiny_config(const std::string& out_dir) {
    ExperimentConfig cfg;
    cfg.run_name = "tiny";
    cfg.output_dir = out_dir;
    cfg.seeds = {5};
    cfg.timesteps = 4;
    cfg.denoiser_hidden = {16, 16};
    cfg.t_embed_dim = 4;
    cfg.ctx_embed_dim = 8;
    cfg.pretrain_steps = 200;
    cfg.pretrain_batch = 64;
    cfg.reward_fit_model_samples = 768;
    cfg.reward_fit_box_samples = 256;
    cfg.reward_fit_steps = 2000;
    cfg.eval_samples = 32;
    cfg.trainer.epochs = 2;
    cfg.trainer.samples_per_epoch = 16;
    cfg.trainer.batch_size = 4;
    cfg.trainer.grad_accumulation = 2;
    cfg.trainer.probe_size = 32;
    cfg.trainer.mode = train::Mode::tdpo_r;
    cfg.trainer.reset_frequency = 2;
    return cfg;
}

}  // namespace

TEST_CASE("empty config file yields the default experiment") {
    std::string path = write_tmp_config("", "tdpo_cfg_empty.cfg");
    ExperimentConfig cfg = load_config(path);
    CHECK(cfg.trainer.mode == train::Mode::tdpo_r);
    CHECK(cfg.timesteps == 20);
    CHECK(cfg.trainer.reset_frequency == 10);
    CHECK(cfg.trainer.dormant_tau == 0.0);
    CHECK(cfg.trainer.guidance_scale == 5.0);
    CHECK(cfg.trainer.policy_clip == 1e-4);
    fs::remove(path);
}

TEST_CASE("config keys parse and unknown keys are hard errors") {
    std::string path = write_tmp_config(
        "# comment\n"
        "neuron_reset_frequency=10\n"
        "mode=ddpo-batch\n"
        "policy_learning_rate=3e-4\n"
        "seeds=1, 2, 3\n"
        "eval_rewards=fidelity\n",
        "tdpo_cfg_keys.cfg");
    ExperimentConfig cfg = load_config(path);
    CHECK(cfg.trainer.reset_frequency == 10);
    CHECK(cfg.trainer.mode == train::Mode::ddpo_batch);
    CHECK(cfg.trainer.policy_lr == 3e-4);
    CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2, 3});
    fs::remove(path);

    std::string bad = write_tmp_config("unknown_key=1\n", "tdpo_cfg_bad.cfg");
    try {
        load_config(bad);
        FAIL("expected an unknown-key error");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("unknown_key") != std::string::npos);
        CHECK(msg.find("line 1") != std::string::npos);
    }
    fs::remove(bad);

    std::string noeq = write_tmp_config("epochs\n", "tdpo_cfg_noeq.cfg");
    CHECK_THROWS_AS(load_config(noeq), std::invalid_argument);
    fs::remove(noeq);
}

TEST_CASE("config invariants are enforced") {
    std::string dup = write_tmp_config(
        "train_reward=direction\neval_rewards=direction,fidelity\n",
        "tdpo_cfg_dup.cfg");
    CHECK_THROWS_AS(load_config(dup), std::invalid_argument);
    fs::remove(dup);

    ExperimentConfig cfg;
    CHECK_THROWS_AS(apply_override(cfg, "dtype", "f16"), std::invalid_argument);
    apply_override(cfg, "dtype", "f32");
    CHECK(cfg.dtype == ad::Dtype::f32);
}

TEST_CASE("config echo is sorted and stable") {
    ExperimentConfig cfg;
    auto lines = cfg.echo();
    auto sorted = lines;
    std::sort(sorted.begin(), sorted.end());
    CHECK(lines == sorted);
}

TEST_CASE("full pipeline on a tiny experiment") {
    std::string out_dir = (fs::temp_directory_path() / "tdpo_harness_e2e").string();
    fs::remove_all(out_dir);
    ExperimentConfig cfg = tiny_config(out_dir);
    std::string run_dir = run_experiment(cfg);

    SUBCASE("artifact tree is complete") {
        CHECK(fs::exists(run_dir + "/shared/pretrain.tdpr"));
        CHECK(fs::exists(run_dir + "/shared/rewards.tdpr"));
        std::string sd = run_dir + "/seed5";
        CHECK(fs::exists(sd + "/metrics.csv"));
        CHECK(fs::exists(sd + "/eval.csv"));
        CHECK(fs::exists(sd + "/manifest.txt"));
        CHECK(fs::exists(sd + "/checkpoints/final.tdpr"));
        CHECK(fs::exists(sd + "/neuron_events.jsonl"));  // reset fires at epoch 2
    }

    SUBCASE("eval rows include a pretrained baseline and both context sets") {
        std::string ev = slurp(run_dir + "/seed5/eval.csv");
        CHECK(ev.find("0,0,train,direction") != std::string::npos);
        CHECK(ev.find(",unseen,fidelity,") != std::string::npos);
    }

    SUBCASE("reward query accounting: queries = epoch * samples_per_epoch") {
        std::ifstream is(run_dir + "/seed5/eval.csv");
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::size_t c1 = line.find(',');
            std::size_t c2 = line.find(',', c1 + 1);
            std::size_t epoch = std::stoul(line.substr(0, c1));
            std::size_t queries = std::stoul(line.substr(c1 + 1, c2 - c1 - 1));
            CHECK(queries == epoch * cfg.trainer.samples_per_epoch);
        }
    }

    SUBCASE("rerun reproduces the seed tree byte-for-byte") {
        std::string first_metrics = slurp(run_dir + "/seed5/metrics.csv");
        std::string first_eval = slurp(run_dir + "/seed5/eval.csv");
        std::string first_manifest = slurp(run_dir + "/seed5/manifest.txt");
        stage_finetune(cfg, 5, run_dir);
        CHECK(slurp(run_dir + "/seed5/metrics.csv") == first_metrics);
        CHECK(slurp(run_dir + "/seed5/eval.csv") == first_eval);
        CHECK(slurp(run_dir + "/seed5/manifest.txt") == first_manifest);
    }

    SUBCASE("plot data is byte-stable and aggregates seeds") {
        std::string a = emit_plot_data({run_dir});
        std::string b = emit_plot_data({run_dir});
        CHECK(a == b);
        CHECK(a.find("run,seed,epoch,queries,metric,value") == 0);
        CHECK(a.find("tiny,5,") != std::string::npos);
        CHECK(a.find("tiny,mean,") != std::string::npos);
        CHECK(a.find("tiny,std,") != std::string::npos);
        CHECK(a.find("train/direction_mean") != std::string::npos);
    }

    fs::remove_all(out_dir);
}

TEST_CASE("cross_reward_eval purity and determinism") {
    std::string out_dir = (fs::temp_directory_path() / "tdpo_harness_eval").string();
    fs::remove_all(out_dir);
    ExperimentConfig cfg = tiny_config(out_dir);
    cfg.run_name = "evalcase";
    std::string run_dir = cfg.output_dir + "/" + cfg.run_name;
    ddpm::Denoiser den = stage_pretrain(cfg, run_dir);
    auto sched = ddpm::make_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max,
                                     cfg.sigma_floor);
    data::MixtureSpec mix;
    auto train_ctx = contexts_from_angles(mix.mode_angles());
    auto unseen_ctx = contexts_from_angles(mix.bisecting_angles());

    std::uint64_t hash_before = 0;
    for (const auto& [k, t] : den.state_dict()) hash_before ^= ad::content_hash(t);

    std::vector<rewards::Kind> kinds{rewards::Kind::direction, rewards::Kind::fidelity};
    auto rows1 = cross_reward_eval(den, sched, kinds, train_ctx, "train", 64, 1.0, 7, 3,
                                   48);
    auto rows2 = cross_reward_eval(den, sched, kinds, train_ctx, "train", 64, 1.0, 7, 3,
                                   48);
    std::uint64_t hash_after = 0;
    for (const auto& [k, t] : den.state_dict()) hash_after ^= ad::content_hash(t);
    CHECK(hash_before == hash_after);  // evaluation never updates parameters

    REQUIRE(rows1.size() == 2);
    CHECK(rows1[0].mean == rows2[0].mean);  // same seed, same snapshot
    CHECK(rows1[0].reward_kind == "direction");
    CHECK(rows1[0].context_set == "train");
    CHECK(rows1[0].n == 64);

    auto unseen_rows = cross_reward_eval(den, sched, kinds, unseen_ctx, "unseen", 16, 1.0,
                                         9, 0, 0);
    CHECK(unseen_rows[0].context_set == "unseen");
    for (const auto& r : unseen_rows) CHECK(std::isfinite(r.mean));

    CHECK_THROWS_AS(cross_reward_eval(den, sched, kinds, train_ctx, "train", 0, 1.0, 7, 0,
                                      0),
                    std::invalid_argument);
    fs::remove_all(out_dir);
}

TEST_CASE("plot data skips missing run directories") {
    std::string csv = emit_plot_data({"/nonexistent/run/dir"});
    CHECK(csv == "run,seed,epoch,queries,metric,value\n");
}
