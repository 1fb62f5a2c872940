#include "tdpo/autodiff.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace tdpo::ad {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

thread_local int g_no_grad_depth = 0;

std::shared_ptr<Node> make_node(Tensor value, std::vector<std::shared_ptr<Node>> parents) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (g_no_grad_depth == 0) {
        n->parents = std::move(parents);
        for (const auto& p : n->parents)
            if (p->requires_grad) n->requires_grad = true;
        if (n->requires_grad) n->grad = Tensor::zeros(n->value.shape, n->value.dtype);
    }
    return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

Dtype common_dtype(const Tensor& a, const Tensor& b) {
    return (a.dtype == Dtype::f32 || b.dtype == Dtype::f32) ? Dtype::f32 : Dtype::f64;
}

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Var Var::constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return Var(std::move(n));
}

Var Var::parameter(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    n->grad = Tensor::zeros(n->value.shape, n->value.dtype);
    return Var(std::move(n));
}

void Var::set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    if (rg && node_->grad.size() != node_->value.size())
        node_->grad = Tensor::zeros(node_->value.shape, node_->value.dtype);
}

void Var::zero_grad() {
    if (node_->requires_grad)
        for (double& g : node_->grad.data) g = 0.0;
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "add");
    Tensor out = Tensor::zeros(a.value().shape, common_dtype(a.value(), b.value()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    out.round_to_dtype();
    auto n = make_node(std::move(out), {a.ptr(), b.ptr()});
    if (n->requires_grad)
        n->backward = [](Node& self) {
            for (int k = 0; k < 2; ++k) {
                Node& p = *self.parents[k];
                if (!p.requires_grad) continue;
                for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
            }
        };
    return Var(n);
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "sub");
    Tensor out = Tensor::zeros(a.value().shape, common_dtype(a.value(), b.value()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    out.round_to_dtype();
    auto n = make_node(std::move(out), {a.ptr(), b.ptr()});
    if (n->requires_grad)
        n->backward = [](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            if (pa.requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
            if (pb.requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        };
    return Var(n);
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "mul");
    Tensor out = Tensor::zeros(a.value().shape, common_dtype(a.value(), b.value()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    out.round_to_dtype();
    auto n = make_node(std::move(out), {a.ptr(), b.ptr()});
    if (n->requires_grad)
        n->backward = [](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            if (pa.requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pa.grad[i] += self.grad[i] * pb.value[i];
            if (pb.requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    pb.grad[i] += self.grad[i] * pa.value[i];
        };
    return Var(n);
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double k) {
    Tensor out = Tensor::zeros(a.value().shape, a.value().dtype);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * a.value()[i];
    out.round_to_dtype();
    auto n = make_node(std::move(out), {a.ptr()});
    if (n->requires_grad)
        n->backward = [k](Node& self) {
            Node& p = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += k * self.grad[i];
        };
    return Var(n);
}

Var add_rowvec(const Var& mat, const Var& row) {
    const Tensor& m = mat.value();
    const Tensor& r = row.value();
    if (m.cols() != r.size())
        throw std::invalid_argument("add_rowvec: width mismatch");
    Tensor out = Tensor::zeros(m.shape, common_dtype(m, r));
    std::size_t B = m.rows(), n = m.cols();
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = m.data[i * n + j] + r[j];
    out.round_to_dtype();
    auto node = make_node(std::move(out), {mat.ptr(), row.ptr()});
    if (node->requires_grad)
        node->backward = [B, n](Node& self) {
            Node& pm = *self.parents[0];
            Node& pr = *self.parents[1];
            if (pm.requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) pm.grad[i] += self.grad[i];
            if (pr.requires_grad)
                for (std::size_t i = 0; i < B; ++i)
                    for (std::size_t j = 0; j < n; ++j) pr.grad[j] += self.grad.data[i * n + j];
        };
    return Var(node);
}

Var matmul(const Var& a, const Var& b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.cols() != B.rows())
        throw std::invalid_argument("matmul: incompatible shapes " + A.shape_str() + " x " +
                                    B.shape_str());
    std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    Tensor out = Tensor::zeros({m, n}, common_dtype(A, B));
    const double* pa = A.data.data();
    const double* pb = B.data.data();
    double* po = out.data.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* orow = po + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            const double* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    out.round_to_dtype();
    auto node = make_node(std::move(out), {a.ptr(), b.ptr()});
    if (node->requires_grad)
        node->backward = [m, k, n](Node& self) {
            Node& pa_ = *self.parents[0];
            Node& pb_ = *self.parents[1];
            const double* g = self.grad.data.data();
            if (pa_.requires_grad) {
                // dA = G * B^T
                const double* bv = pb_.value.data.data();
                double* ga = pa_.grad.data.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        double gv = g[i * n + j];
                        if (gv == 0.0) continue;
                        double* garow = ga + i * k;
                        for (std::size_t kk = 0; kk < k; ++kk)
                            garow[kk] += gv * bv[kk * n + j];
                    }
            }
            if (pb_.requires_grad) {
                // dB = A^T * G
                const double* av = pa_.value.data.data();
                double* gb = pb_.grad.data.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* arow = av + i * k;
                    const double* grow = g + i * n;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        double avk = arow[kk];
                        if (avk == 0.0) continue;
                        double* gbrow = gb + kk * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += avk * grow[j];
                    }
                }
            }
        };
    return Var(node);
}

namespace {

template <typename F, typename DF>
Var unary_op(const Var& a, F f, DF df) {
    Tensor out = Tensor::zeros(a.value().shape, a.value().dtype);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.value()[i]);
    out.round_to_dtype();
    auto n = make_node(std::move(out), {a.ptr()});
    if (n->requires_grad)
        n->backward = [df](Node& self) {
            Node& p = *self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                p.grad[i] += self.grad[i] * df(p.value[i], self.value[i]);
        };
    return Var(n);
}

}  // namespace

Var tanh_(const Var& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp_(const Var& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var square(const Var& a) {
    return unary_op(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(const Var& a, double lo, double hi) {
    return unary_op(
        a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

namespace {

Var select_op(const Var& a, const Var& b, bool take_min) {
    check_same_shape(a.value(), b.value(), take_min ? "minimum" : "maximum");
    Tensor out = Tensor::zeros(a.value().shape, common_dtype(a.value(), b.value()));
    // pick[i] = 0 when a is selected; ties select a so the unclipped branch
    // of PPO-style losses carries the gradient at the boundary
    std::vector<std::uint8_t> pick(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double av = a.value()[i], bv = b.value()[i];
        bool take_b = take_min ? (bv < av) : (bv > av);
        pick[i] = take_b ? 1 : 0;
        out[i] = take_b ? bv : av;
    }
    auto n = make_node(std::move(out), {a.ptr(), b.ptr()});
    if (n->requires_grad)
        n->backward = [pick = std::move(pick)](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                Node& dst = pick[i] ? pb : pa;
                if (dst.requires_grad) dst.grad[i] += self.grad[i];
            }
        };
    return Var(n);
}

}  // namespace

Var minimum(const Var& a, const Var& b) { return select_op(a, b, true); }
Var maximum(const Var& a, const Var& b) { return select_op(a, b, false); }

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    std::size_t B = parts[0].value().rows();
    std::size_t total = 0;
    Dtype dt = Dtype::f64;
    for (const Var& p : parts) {
        if (p.value().rows() != B)
            throw std::invalid_argument("concat_cols: row count mismatch");
        total += p.value().cols();
        if (p.value().dtype == Dtype::f32) dt = Dtype::f32;
    }
    Tensor out = Tensor::zeros({B, total}, dt);
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::size_t w = p.value().cols();
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = 0; j < w; ++j)
                out.data[i * total + off + j] = p.value().data[i * w + j];
        parents.push_back(p.ptr());
        offsets.push_back(off);
        off += w;
    }
    auto n = make_node(std::move(out), std::move(parents));
    if (n->requires_grad)
        n->backward = [B, total, offsets](Node& self) {
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                Node& p = *self.parents[k];
                if (!p.requires_grad) continue;
                std::size_t w = p.value.cols();
                for (std::size_t i = 0; i < B; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        p.grad.data[i * w + j] += self.grad.data[i * total + offsets[k] + j];
            }
        };
    return Var(n);
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    Tensor out = Tensor::scalar(s, a.value().dtype);
    out.round_to_dtype();
    auto n = make_node(std::move(out), {a.ptr()});
    if (n->requires_grad)
        n->backward = [](Node& self) {
            Node& p = *self.parents[0];
            double g = self.grad[0];
            for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
        };
    return Var(n);
}

Var mean(const Var& a) {
    std::size_t n_items = a.value().size();
    if (n_items == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n_items));
}

Var sum_rows(const Var& a) {
    std::size_t B = a.value().rows(), n = a.value().cols();
    Tensor out = Tensor::zeros({B}, a.value().dtype);
    for (std::size_t i = 0; i < B; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a.value().data[i * n + j];
        out[i] = s;
    }
    out.round_to_dtype();
    auto node = make_node(std::move(out), {a.ptr()});
    if (node->requires_grad)
        node->backward = [B, n](Node& self) {
            Node& p = *self.parents[0];
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t j = 0; j < n; ++j) p.grad.data[i * n + j] += self.grad[i];
        };
    return Var(node);
}

Var gaussian_log_density(const Var& x, const Var& mean_v, const Var& std_dev) {
    check_same_shape(x.value(), mean_v.value(), "gaussian_log_density");
    if (!std_dev.value().is_scalar())
        throw std::invalid_argument("gaussian_log_density: std must be scalar");
    double sd = std_dev.value()[0];
    if (sd <= 0.0) throw std::invalid_argument("gaussian_log_density: std must be positive");
    std::size_t d = x.value().size();
    double inv_var = 1.0 / (sd * sd);
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double z = x.value()[i] - mean_v.value()[i];
        acc += z * z;
    }
    double val = -0.5 * static_cast<double>(d) * kLogTwoPi -
                 static_cast<double>(d) * std::log(sd) - 0.5 * acc * inv_var;
    Tensor out = Tensor::scalar(val, common_dtype(x.value(), mean_v.value()));
    out.round_to_dtype();
    auto n = make_node(std::move(out), {x.ptr(), mean_v.ptr(), std_dev.ptr()});
    if (n->requires_grad)
        n->backward = [d, sd, inv_var](Node& self) {
            Node& px = *self.parents[0];
            Node& pm = *self.parents[1];
            Node& ps = *self.parents[2];
            double g = self.grad[0];
            for (std::size_t i = 0; i < d; ++i) {
                double z = px.value[i] - pm.value[i];
                if (px.requires_grad) px.grad[i] += g * (-z * inv_var);
                if (pm.requires_grad) pm.grad[i] += g * (z * inv_var);
            }
            if (ps.requires_grad) {
                double acc2 = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    double z = px.value[i] - pm.value[i];
                    acc2 += z * z;
                }
                ps.grad[0] += g * (-static_cast<double>(d) / sd + acc2 * inv_var / sd);
            }
        };
    return Var(n);
}

Var gaussian_log_density_rows(const Var& x, const Var& mean_v, double std_dev) {
    check_same_shape(x.value(), mean_v.value(), "gaussian_log_density_rows");
    if (std_dev <= 0.0)
        throw std::invalid_argument("gaussian_log_density_rows: std must be positive");
    std::size_t B = x.value().rows(), d = x.value().cols();
    double inv_var = 1.0 / (std_dev * std_dev);
    double base = -0.5 * static_cast<double>(d) * kLogTwoPi -
                  static_cast<double>(d) * std::log(std_dev);
    Tensor out = Tensor::zeros({B}, common_dtype(x.value(), mean_v.value()));
    for (std::size_t i = 0; i < B; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double z = x.value().data[i * d + j] - mean_v.value().data[i * d + j];
            acc += z * z;
        }
        out[i] = base - 0.5 * acc * inv_var;
    }
    out.round_to_dtype();
    auto n = make_node(std::move(out), {x.ptr(), mean_v.ptr()});
    if (n->requires_grad)
        n->backward = [B, d, inv_var](Node& self) {
            Node& px = *self.parents[0];
            Node& pm = *self.parents[1];
            for (std::size_t i = 0; i < B; ++i) {
                double g = self.grad[i];
                if (g == 0.0) continue;
                for (std::size_t j = 0; j < d; ++j) {
                    double z = px.value.data[i * d + j] - pm.value.data[i * d + j];
                    if (px.requires_grad) px.grad.data[i * d + j] += g * (-z * inv_var);
                    if (pm.requires_grad) pm.grad.data[i * d + j] += g * (z * inv_var);
                }
            }
        };
    return Var(n);
}

namespace {

// Reverse post-order over parent edges: processing the list front-to-back
// visits every node before any of its ancestors.
std::vector<Node*> topo_from(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    std::reverse(order.begin(), order.end());
    return order;
}

}  // namespace

void backward(const Var& root) {
    if (!root.value().is_scalar())
        throw std::invalid_argument("backward: root must be scalar, got " +
                                    root.value().shape_str());
    if (!root.requires_grad()) return;
    std::vector<Node*> order = topo_from(root.node());
    // fresh pass: clear interior accumulators but keep leaves (they may be
    // accumulating across microbatches)
    for (Node* n : order)
        if (n != root.node() && n->backward)
            for (double& g : n->grad.data) g = 0.0;
    root.node()->grad.fill(1.0);
    for (Node* n : order)
        if (n->backward) n->backward(*n);
}

std::vector<Tensor> gradient(const Var& root, const std::vector<Var>& params) {
    if (!root.value().is_scalar())
        throw std::invalid_argument("gradient: root must be scalar, got " +
                                    root.value().shape_str());
    std::vector<Node*> reachable = topo_from(root.node());
    std::unordered_set<Node*> in_graph(reachable.begin(), reachable.end());
    for (const Var& p : params) {
        if (!p.requires_grad())
            throw std::invalid_argument("gradient: parameter does not require grad");
        if (!in_graph.count(p.node()))
            throw std::invalid_argument("gradient: parameter not in graph");
    }
    for (Node* n : reachable)
        for (double& g : n->grad.data) g = 0.0;
    root.node()->grad.fill(1.0);
    for (Node* n : reachable)
        if (n->backward) n->backward(*n);
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const Var& p : params) out.push_back(p.grad());
    return out;
}

double finite_difference_check(const std::function<Var()>& make_expr,
                               const std::vector<Var>& params, double step) {
    Var root = make_expr();
    std::vector<Tensor> analytic = gradient(root, params);
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& val = const_cast<Var&>(params[pi]).value();
        for (std::size_t i = 0; i < val.size(); ++i) {
            double saved = val[i];
            val[i] = saved + step;
            double fplus = make_expr().value()[0];
            val[i] = saved - step;
            double fminus = make_expr().value()[0];
            val[i] = saved;
            double fd = (fplus - fminus) / (2.0 * step);
            double a = analytic[pi][i];
            if (std::isnan(fd) || std::isnan(a))
                return std::numeric_limits<double>::infinity();
            double err = std::abs(a - fd) / (std::abs(a) + 1e-12);
            if (err > worst) worst = err;
        }
    }
    return worst;
}

}  // namespace tdpo::ad
