#include "tdpo/neuron.hpp"

#include <cmath>
#include <stdexcept>

namespace tdpo::neuron {

ScoreResult activation_scores(const ad::Tensor& activations) {
    std::size_t B = activations.rows(), N = activations.cols();
    if (B == 0 || N == 0)
        throw std::invalid_argument("activation_scores: empty probe batch");
    ScoreResult out;
    out.scores.assign(N, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
        double acc = 0.0;
        for (std::size_t i = 0; i < B; ++i) acc += std::abs(activations.at(i, n));
        out.scores[n] = acc / static_cast<double>(B);
    }
    double module_mean = 0.0;
    for (double s : out.scores) module_mean += s;
    module_mean /= static_cast<double>(N);
    if (module_mean == 0.0) {
        out.degenerate = true;  // all-zero activations: scores stay 0
        return out;
    }
    for (double& s : out.scores) s /= module_mean;
    return out;
}

std::vector<bool> classify(const std::vector<double>& scores, double tau) {
    if (tau < 0.0) throw std::invalid_argument("classify: tau must be >= 0");
    std::vector<bool> active(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) active[i] = scores[i] > tau;
    return active;
}

std::vector<bool> build_mask(const std::vector<double>& scores) {
    std::vector<bool> mask(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) mask[i] = scores[i] > 0.0;
    return mask;
}

double dormant_percentage(const std::vector<bool>& active_states) {
    if (active_states.empty())
        throw std::invalid_argument("dormant_percentage: no neurons");
    std::size_t dormant = 0;
    for (bool a : active_states)
        if (!a) ++dormant;
    return 100.0 * static_cast<double>(dormant) / static_cast<double>(active_states.size());
}

std::optional<double> overlap_percentage(const std::vector<bool>& prev_dormant,
                                         const std::vector<bool>& curr_dormant) {
    if (prev_dormant.size() != curr_dormant.size())
        throw std::invalid_argument("overlap_percentage: index spaces differ");
    std::size_t prev_n = 0, inter = 0, curr_n = 0;
    for (std::size_t i = 0; i < prev_dormant.size(); ++i) {
        if (prev_dormant[i]) ++prev_n;
        if (curr_dormant[i]) ++curr_n;
        if (prev_dormant[i] && curr_dormant[i]) ++inter;
    }
    if (prev_n == 0) {
        if (curr_n == 0) return 100.0;
        return std::nullopt;
    }
    return 100.0 * static_cast<double>(inter) / static_cast<double>(prev_n);
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "active") return Strategy::active;
    if (s == "dormant") return Strategy::dormant;
    if (s == "all") return Strategy::all;
    throw std::invalid_argument("unknown reset strategy: " + s);
}

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::active: return "active";
        case Strategy::dormant: return "dormant";
        case Strategy::all: return "all";
    }
    return "?";
}

NeuronReport make_report(const std::string& module_id, const ad::Tensor& activations,
                         double tau, const std::string& probe_descriptor) {
    NeuronReport r;
    r.module_id = module_id;
    r.neuron_count = activations.cols();
    ScoreResult sr = activation_scores(activations);
    r.scores = std::move(sr.scores);
    r.degenerate = sr.degenerate;
    r.tau = tau;
    r.active = classify(r.scores, tau);
    r.dormant_pct = dormant_percentage(r.active);
    r.probe_descriptor = probe_descriptor;
    return r;
}

namespace {

void zero_moments(ad::AdamW* opt, const ad::Var& p, const std::vector<std::size_t>& entries) {
    if (!opt || entries.empty()) return;
    if (auto idx = opt->index_of(p)) opt->reset_moments(*idx, entries);
}

}  // namespace

ResetEvent reset_parameters(std::vector<ModuleHook>& modules,
                            const std::vector<std::vector<double>>& scores, Strategy strategy,
                            double tau, Rng& rng, ad::AdamW* optimizer, std::size_t epoch,
                            const std::string& target, std::uint64_t rng_stream_id) {
    if (scores.size() != modules.size())
        throw std::invalid_argument("reset_parameters: one score vector per module required");

    ResetEvent ev;
    ev.epoch = epoch;
    ev.target = target;
    ev.strategy = strategy;
    ev.rng_stream = rng_stream_id;

    for (std::size_t m = 0; m < modules.size(); ++m) {
        ModuleHook& mod = modules[m];
        std::size_t N = mod.neuron_count();
        if (scores[m].size() != N)
            throw std::invalid_argument("reset_parameters: score length mismatch in module " +
                                        mod.id);
        std::vector<bool> mask = build_mask(scores[m]);
        std::vector<bool> selected(N, false);
        switch (strategy) {
            case Strategy::active:
                selected = mask;
                break;
            case Strategy::dormant: {
                std::vector<bool> active = classify(scores[m], tau);
                for (std::size_t n = 0; n < N; ++n) selected[n] = !active[n];
                break;
            }
            case Strategy::all:
                selected.assign(N, true);
                break;
        }

        ad::Tensor& in_w = mod.in_W.value();
        ad::Tensor& out_w = mod.out_W.value();
        if (out_w.rows() != N)
            throw std::invalid_argument("reset_parameters: outgoing rows mismatch in module " +
                                        mod.id);
        std::vector<std::size_t> in_entries, b_entries, out_entries;
        std::size_t count = 0;
        for (std::size_t n = 0; n < N; ++n) {
            if (!selected[n]) continue;
            ++count;
            for (std::size_t i = 0; i < in_w.rows(); ++i) {
                std::size_t e = i * in_w.cols() + n;
                in_w[e] = mod.in_w_init.draw(rng);
                in_entries.push_back(e);
            }
            if (mod.in_b.defined()) {
                mod.in_b.value()[n] = mod.in_b_init.draw(rng);
                b_entries.push_back(n);
            }
            for (std::size_t j = 0; j < out_w.cols(); ++j) {
                std::size_t e = n * out_w.cols() + j;
                out_w[e] = mod.out_w_init.draw(rng);
                out_entries.push_back(e);
            }
        }
        in_w.round_to_dtype();
        out_w.round_to_dtype();
        if (mod.in_b.defined()) mod.in_b.value().round_to_dtype();
        zero_moments(optimizer, mod.in_W, in_entries);
        if (mod.in_b.defined()) zero_moments(optimizer, mod.in_b, b_entries);
        zero_moments(optimizer, mod.out_W, out_entries);

        ev.module_ids.push_back(mod.id);
        ev.masks.push_back(std::move(mask));
        ev.reset_counts.push_back(count);
    }
    return ev;
}

}  // namespace tdpo::neuron
