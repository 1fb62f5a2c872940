#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tdpo/optim.hpp"

namespace tdpo::neuron {

/// Per-neuron activation scores for one module: mean absolute activation
/// normalized by the module-wide mean. Scores average to 1 unless every
/// activation is zero, which is flagged as a degenerate report.
struct ScoreResult {
    std::vector<double> scores;
    bool degenerate = false;
};

/// `activations` is (probe batch, neurons), post-nonlinearity.
ScoreResult activation_scores(const ad::Tensor& activations);

/// true = active (score strictly above tau).
std::vector<bool> classify(const std::vector<double>& scores, double tau);

/// Reset mask with the strict zero threshold, independent of tau.
std::vector<bool> build_mask(const std::vector<double>& scores);

double dormant_percentage(const std::vector<bool>& active_states);

/// 100 |prev ∩ curr| / |prev|. Empty prev with empty curr is 100; empty
/// prev with non-empty curr has no defined value and is reported missing.
std::optional<double> overlap_percentage(const std::vector<bool>& prev_dormant,
                                         const std::vector<bool>& curr_dormant);

enum class Strategy { active, dormant, all };
Strategy strategy_from_string(const std::string& s);
std::string strategy_name(Strategy s);

/// Wiring of one resettable module: neuron n owns column n of the incoming
/// weight (plus its bias entry when present) and row n of the outgoing
/// weight.
struct ModuleHook {
    std::string id;
    ad::Var in_W;
    ad::Var in_b;  // may be undefined (adapter bottlenecks have no bias)
    ad::Var out_W;
    ad::InitSpec in_w_init, in_b_init, out_w_init;

    std::size_t neuron_count() const { return in_W.value().cols(); }
};

struct NeuronReport {
    std::string module_id;
    std::size_t neuron_count = 0;
    std::vector<double> scores;
    double tau = 0.0;
    std::vector<bool> active;
    bool degenerate = false;
    double dormant_pct = 0.0;
    std::string probe_descriptor;
};

NeuronReport make_report(const std::string& module_id, const ad::Tensor& activations,
                         double tau, const std::string& probe_descriptor);

struct ResetEvent {
    std::size_t epoch = 0;
    std::string target;  // "critic" or "policy-adapter"
    Strategy strategy = Strategy::active;
    std::vector<std::string> module_ids;
    std::vector<std::vector<bool>> masks;  // strict-zero masks per module
    std::vector<std::size_t> reset_counts;
    std::uint64_t rng_stream = 0;

    std::size_t total_reset() const {
        std::size_t n = 0;
        for (std::size_t c : reset_counts) n += c;
        return n;
    }
};

/// Redraw the incoming column/bias entry and outgoing row of every selected
/// neuron from the stored init specs; selection is score > 0 for the active
/// strategy, score <= tau for the dormant strategy, everyone for all.
/// Matching optimizer moments are zeroed; unselected weights stay
/// bit-identical.
ResetEvent reset_parameters(std::vector<ModuleHook>& modules,
                            const std::vector<std::vector<double>>& scores, Strategy strategy,
                            double tau, Rng& rng, ad::AdamW* optimizer, std::size_t epoch,
                            const std::string& target, std::uint64_t rng_stream_id = 0);

}  // namespace tdpo::neuron
