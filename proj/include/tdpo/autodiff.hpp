#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "tdpo/tensor.hpp"

namespace tdpo::ad {

/// One vertex of a define-by-run computation graph. Nodes own their value;
/// gradient buffers exist only on nodes that require grad. Graphs are
/// rebuilt every step, so nodes hold shared ownership of their parents and
/// the whole expression is released when the root handle goes out of scope.
struct Node {
    Tensor value;
    Tensor grad;  // allocated iff requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Pulls this node's gradient into the parents' accumulators.
    std::function<void(Node&)> backward;
};

/// Cheap handle to a graph node. Parameters are long-lived Vars that get
/// re-used as leaves of each step's fresh graph.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Var constant(Tensor t);
    static Var parameter(Tensor t);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& grad() { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool rg);
    void zero_grad();

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// While alive, ops produce value-only nodes (no gradient buffers, no
/// backward closures, no retained parents). Used for sampling and other
/// inference-only passes. Nestable; thread-local.
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// ---- elementwise / structural ops ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double k);
Var add_rowvec(const Var& mat, const Var& row);   // (B,n) + (n,) broadcast
Var matmul(const Var& a, const Var& b);           // (m,k) x (k,n)
Var tanh_(const Var& a);
Var relu(const Var& a);
Var exp_(const Var& a);
Var square(const Var& a);
Var clamp(const Var& a, double lo, double hi);    // zero gradient outside [lo,hi]
Var minimum(const Var& a, const Var& b);          // ties route gradient to a
Var maximum(const Var& a, const Var& b);          // ties route gradient to a
Var concat_cols(std::span<const Var> parts);      // (B,n_i) -> (B, sum n_i)
Var sum(const Var& a);                            // scalar
Var mean(const Var& a);                           // scalar
Var sum_rows(const Var& a);                       // (B,n) -> (B,)

/// Sum over all entries of the isotropic Gaussian log density
/// log N(x; mean, std^2 I). Differentiable w.r.t. x, mean and std.
Var gaussian_log_density(const Var& x, const Var& mean, const Var& std_dev);

/// Per-row Gaussian log density with a fixed std: (B,d),(B,d) -> (B,).
Var gaussian_log_density_rows(const Var& x, const Var& mean, double std_dev);

/// Run reverse-mode accumulation from a scalar root. Leaf gradients are NOT
/// cleared first, so repeated calls accumulate (gradient accumulation spans).
void backward(const Var& root);

/// d(root)/d(p) for each p. Zeroes the accumulators first, checks that the
/// root is scalar and every parameter is reachable from it.
std::vector<Tensor> gradient(const Var& root, const std::vector<Var>& params);

/// Max over all parameter entries of
/// |analytic - central difference| / (|analytic| + 1e-12).
/// `make_expr` must rebuild the expression deterministically from the current
/// parameter values. Returns +inf if either side is NaN.
double finite_difference_check(const std::function<Var()>& make_expr,
                               const std::vector<Var>& params, double step);

}  // namespace tdpo::ad
