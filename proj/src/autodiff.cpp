#include "selfdetr/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "selfdetr/kernels.hpp"

namespace selfdetr::ad {

namespace {

thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_next_id{1};

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> value, bool requires_grad) {
    if (shape.empty() || shape.size() > 3)
        throw DimensionError("arrays must have 1 to 3 axes, got " + shape_string(shape));
    if (shape_size(shape) != value.size())
        throw DimensionError("value count " + std::to_string(value.size()) +
                             " does not match shape " + shape_string(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return node;
}

// Creates the result of an operation. History is only kept when recording is
// on and some input needs a gradient.
DiffArray make_result(Shape shape, std::vector<double> value, std::vector<DiffArray> inputs,
                      std::function<void(Node&)> backward_fn) {
    bool needs = false;
    if (t_grad_enabled)
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    auto node = new_node(std::move(shape), std::move(value), needs);
    if (needs) {
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.node());
        node->backward_fn = std::move(backward_fn);
    }
    return DiffArray(std::move(node));
}

inline Node& input(Node& self, std::size_t i) { return *self.inputs[i]; }

void require_same_shape(const DiffArray& a, const DiffArray& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                             " vs " + shape_string(b.shape()));
}

Shape with_last_axis(const Shape& s, std::size_t n) {
    Shape out = s;
    out.back() = n;
    return out;
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

std::vector<double>& Node::ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

DiffArray DiffArray::constant(Shape shape, std::vector<double> values) {
    return DiffArray(new_node(std::move(shape), std::move(values), false));
}

DiffArray DiffArray::parameter(Shape shape, std::vector<double> values) {
    return DiffArray(new_node(std::move(shape), std::move(values), true));
}

DiffArray DiffArray::zeros(Shape shape, bool requires_grad) {
    std::vector<double> v(shape_size(shape), 0.0);
    return DiffArray(new_node(std::move(shape), std::move(v), requires_grad));
}

DiffArray DiffArray::full(Shape shape, double value) {
    std::vector<double> v(shape_size(shape), value);
    return DiffArray(new_node(std::move(shape), std::move(v), false));
}

DiffArray DiffArray::scalar(double value) { return constant({1}, {value}); }

DiffArray DiffArray::identity(std::size_t n) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return constant({n, n}, std::move(v));
}

std::size_t DiffArray::rows() const {
    const auto& s = shape();
    std::size_t r = 1;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
    return r;
}

std::size_t DiffArray::cols() const { return shape().back(); }

double DiffArray::item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar " + shape_string(shape()));
    return node_->value[0];
}

std::vector<double> DiffArray::grad() const {
    if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
    return node_->grad;
}

DiffArray DiffArray::detach() const { return constant(shape(), node_->value); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

DiffArray custom_op(Shape shape, std::vector<double> values, std::vector<DiffArray> inputs,
                    std::function<void(Node&)> backward_fn) {
    return make_result(std::move(shape), std::move(values), std::move(inputs), std::move(backward_fn));
}

Tape Tape::record(const DiffArray& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const Node*> seen;
    std::vector<std::shared_ptr<Node>> stack{root.node()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto node = std::move(stack.back());
        stack.pop_back();
        for (const auto& in : node->inputs)
            if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
        tape.order_.push_back(std::move(node));
    }
    // Inputs are always created before their consumers, so creation order is
    // a topological order.
    std::sort(tape.order_.begin(), tape.order_.end(),
              [](const auto& a, const auto& b) { return a->id < b->id; });
    return tape;
}

void Tape::replay(double seed) const {
    if (order_.empty()) return;
    auto& root_grad = order_.back()->ensure_grad();
    for (auto& g : root_grad) g += seed;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node& node = **it;
        if (node.backward_fn && !node.grad.empty()) node.backward_fn(node);
    }
}

void backward(const DiffArray& root, double seed) { Tape::record(root).replay(seed); }

// ---- linear algebra ------------------------------------------------------

DiffArray matmul(const DiffArray& a, const DiffArray& b) {
    if (b.shape().size() != 2 || a.cols() != b.shape()[0])
        throw DimensionError("matmul: " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.shape()[1];
    std::vector<double> out(m * n);
    kernels::gemm_nn(m, n, k, a.values(), b.values(), out, false);
    return make_result(with_last_axis(a.shape(), n), std::move(out), {a, b}, [m, n, k](Node& self) {
        Node& na = input(self, 0);
        Node& nb = input(self, 1);
        if (na.requires_grad) kernels::gemm_nt(m, k, n, self.grad, nb.value, na.ensure_grad(), true);
        if (nb.requires_grad) kernels::gemm_tn(k, n, m, na.value, self.grad, nb.ensure_grad(), true);
    });
}

DiffArray matmul_nt(const DiffArray& a, const DiffArray& b) {
    if (b.shape().size() != 2 || a.cols() != b.cols())
        throw DimensionError("matmul_nt: " + shape_string(a.shape()) + " * " +
                             shape_string(b.shape()) + "^T");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    std::vector<double> out(m * n);
    kernels::gemm_nt(m, n, k, a.values(), b.values(), out, false);
    return make_result(with_last_axis(a.shape(), n), std::move(out), {a, b}, [m, n, k](Node& self) {
        Node& na = input(self, 0);
        Node& nb = input(self, 1);
        if (na.requires_grad) kernels::gemm_nn(m, k, n, self.grad, nb.value, na.ensure_grad(), true);
        if (nb.requires_grad) kernels::gemm_tn(n, k, m, self.grad, na.value, nb.ensure_grad(), true);
    });
}

DiffArray transpose(const DiffArray& a) {
    if (a.shape().size() != 2) throw DimensionError("transpose expects a matrix");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    const auto v = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
    return make_result({n, m}, std::move(out), {a}, [m, n](Node& self) {
        auto& g = input(self, 0).ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    });
}

// ---- elementwise ---------------------------------------------------------

DiffArray add(const DiffArray& a, const DiffArray& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            Node& in = input(self, k);
            if (!in.requires_grad) continue;
            auto& g = in.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

DiffArray sub(const DiffArray& a, const DiffArray& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        if (input(self, 0).requires_grad) {
            auto& g = input(self, 0).ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (input(self, 1).requires_grad) {
            auto& g = input(self, 1).ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

DiffArray mul(const DiffArray& a, const DiffArray& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        Node& na = input(self, 0);
        Node& nb = input(self, 1);
        if (na.requires_grad) {
            auto& g = na.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.value[i];
        }
        if (nb.requires_grad) {
            auto& g = nb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.value[i];
        }
    });
}

DiffArray scale(const DiffArray& a, double s) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (auto& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
        auto& g = input(self, 0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

DiffArray add_scalar(const DiffArray& a, double s) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (auto& v : out) v += s;
    return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
        auto& g = input(self, 0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

DiffArray add_row_bias(const DiffArray& x, const DiffArray& bias) {
    const std::size_t m = x.rows(), n = x.cols();
    if (bias.size() != n)
        throw DimensionError("add_row_bias: bias " + shape_string(bias.shape()) + " for " +
                             shape_string(x.shape()));
    std::vector<double> out(x.values().begin(), x.values().end());
    const auto b = bias.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
    return make_result(x.shape(), std::move(out), {x, bias}, [m, n](Node& self) {
        if (input(self, 0).requires_grad) {
            auto& g = input(self, 0).ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (input(self, 1).requires_grad) {
            auto& g = input(self, 1).ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
        }
    });
}

DiffArray relu(const DiffArray& x) {
    std::vector<double> out(x.values().begin(), x.values().end());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& g = input(self, 0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (self.value[i] > 0.0) g[i] += self.grad[i];
    });
}

DiffArray sigmoid(const DiffArray& x) {
    std::vector<double> out(x.size());
    const auto v = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-v[i]));
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& g = input(self, 0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = self.value[i];
            g[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

DiffArray abs(const DiffArray& x) {
    std::vector<double> out(x.values().begin(), x.values().end());
    for (auto& v : out) v = std::fabs(v);
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        Node& in = input(self, 0);
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = in.value[i] > 0.0 ? 1.0 : (in.value[i] < 0.0 ? -1.0 : 0.0);
            g[i] += s * self.grad[i];
        }
    });
}

// ---- row-wise ------------------------------------------------------------

DiffArray softmax_rows(const DiffArray& x, double scale) {
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    kernels::softmax_rows(m, n, scale, x.values(), out);
    return make_result(x.shape(), std::move(out), {x}, [m, n, scale](Node& self) {
        kernels::softmax_rows_backward(m, n, scale, self.value, self.grad,
                                       input(self, 0).ensure_grad());
    });
}

DiffArray layer_norm(const DiffArray& x, const DiffArray& gain, const DiffArray& bias, double eps) {
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n || bias.size() != n)
        throw DimensionError("layer_norm: affine parameters do not match channel axis");
    std::vector<double> xhat(m * n), inv_std(m);
    kernels::layer_norm_rows(m, n, eps, x.values(), xhat, inv_std);
    std::vector<double> out(m * n);
    const auto gv = gain.values();
    const auto bv = bias.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    return make_result(
        x.shape(), std::move(out), {x, gain, bias},
        [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            Node& nx = input(self, 0);
            Node& ng = input(self, 1);
            Node& nb = input(self, 2);
            if (nx.requires_grad)
                kernels::layer_norm_rows_backward(m, n, xhat, inv_std, ng.value, self.grad,
                                                  nx.ensure_grad());
            if (ng.requires_grad) {
                auto& g = ng.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * xhat[i * n + j];
            }
            if (nb.requires_grad) {
                auto& g = nb.ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
            }
        });
}

DiffArray elementwise_sqrt(const DiffArray& x) {
    std::vector<double> out(x.size());
    const auto v = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (v[i] < 0.0 || std::isnan(v[i]))
            throw DomainError("elementwise_sqrt: negative entry " + std::to_string(v[i]));
        out[i] = std::sqrt(v[i]);
    }
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        Node& in = input(self, 0);
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] / (2.0 * std::sqrt(in.value[i] + 1e-12));
    });
}

DiffArray row_normalize(const DiffArray& x, double eps) {
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(x.values().begin(), x.values().end());
    std::vector<double> denom(m);
    std::vector<char> floored(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += out[i * n + j];
        floored[i] = !(s > eps);
        denom[i] = floored[i] ? eps : s;
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= denom[i];
    }
    return make_result(x.shape(), std::move(out), {x},
                       [m, n, denom = std::move(denom), floored = std::move(floored)](Node& self) {
                           auto& g = input(self, 0).ensure_grad();
                           for (std::size_t i = 0; i < m; ++i) {
                               double dot = 0.0;
                               if (!floored[i])
                                   for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
                               for (std::size_t j = 0; j < n; ++j) g[i * n + j] += (self.grad[i * n + j] - dot) / denom[i];
                           }
                       });
}

DiffArray kl_rows(const DiffArray& p, const DiffArray& q, double eps) {
    require_same_shape(p, q, "kl_rows");
    const std::size_t m = p.rows(), n = p.cols();
    const auto pv = p.values();
    const auto qv = q.values();
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double pij = pv[i * n + j];
            row += pij * std::log((pij + eps) / (qv[i * n + j] + eps));
        }
        total += row;
    }
    const double inv_m = 1.0 / static_cast<double>(m);
    return make_result({1}, {total * inv_m}, {p, q}, [eps, inv_m](Node& self) {
        const double g0 = self.grad[0] * inv_m;
        Node& np = input(self, 0);
        Node& nq = input(self, 1);
        if (np.requires_grad) {
            auto& g = np.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double pi = np.value[i];
                g[i] += g0 * (std::log((pi + eps) / (nq.value[i] + eps)) + pi / (pi + eps));
            }
        }
        if (nq.requires_grad) {
            auto& g = nq.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * np.value[i] / (nq.value[i] + eps);
        }
    });
}

// ---- reductions and reshaping -----------------------------------------------

DiffArray sum(const DiffArray& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return make_result({1}, {s}, {x}, [](Node& self) {
        auto& g = input(self, 0).ensure_grad();
        for (auto& gi : g) gi += self.grad[0];
    });
}

DiffArray mean(const DiffArray& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

DiffArray average(std::span<const DiffArray> xs) {
    if (xs.empty()) throw DimensionError("average of an empty list");
    std::vector<double> out(xs[0].size(), 0.0);
    for (const auto& x : xs) {
        require_same_shape(xs[0], x, "average");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += x.values()[i];
    }
    const double inv = 1.0 / static_cast<double>(xs.size());
    for (auto& v : out) v *= inv;
    return make_result(xs[0].shape(), std::move(out), {xs.begin(), xs.end()}, [inv](Node& self) {
        for (auto& in : self.inputs) {
            if (!in->requires_grad) continue;
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += inv * self.grad[i];
        }
    });
}

DiffArray add_all(std::span<const DiffArray> xs) {
    double s = 0.0;
    for (const auto& x : xs) s += x.item();
    return make_result({1}, {s}, {xs.begin(), xs.end()}, [](Node& self) {
        for (auto& in : self.inputs)
            if (in->requires_grad) in->ensure_grad()[0] += self.grad[0];
    });
}

DiffArray slice_cols(const DiffArray& x, std::size_t begin, std::size_t count) {
    const std::size_t m = x.rows(), n = x.cols();
    if (begin + count > n) throw DimensionError("slice_cols out of range");
    std::vector<double> out(m * count);
    const auto v = x.values();
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * n + begin), count,
                    out.begin() + static_cast<std::ptrdiff_t>(i * count));
    return make_result(with_last_axis(x.shape(), count), std::move(out), {x},
                       [m, n, begin, count](Node& self) {
                           auto& g = input(self, 0).ensure_grad();
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < count; ++j)
                                   g[i * n + begin + j] += self.grad[i * count + j];
                       });
}

DiffArray concat_cols(std::span<const DiffArray> parts) {
    if (parts.empty()) throw DimensionError("concat_cols of an empty list");
    const std::size_t m = parts[0].rows();
    std::vector<std::size_t> offsets;
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.rows() != m) throw DimensionError("concat_cols: row count mismatch");
        offsets.push_back(n);
        n += p.cols();
    }
    std::vector<double> out(m * n);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const std::size_t c = parts[k].cols();
        const auto v = parts[k].values();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) out[i * n + offsets[k] + j] = v[i * c + j];
    }
    return make_result(with_last_axis(parts[0].shape(), n), std::move(out),
                       {parts.begin(), parts.end()}, [m, n, offsets](Node& self) {
                           for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                               Node& in = *self.inputs[k];
                               if (!in.requires_grad) continue;
                               const std::size_t c = in.shape.back();
                               auto& g = in.ensure_grad();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < c; ++j)
                                       g[i * c + j] += self.grad[i * n + offsets[k] + j];
                           }
                       });
}

DiffArray gather_rows(const DiffArray& x, std::span<const std::size_t> rows) {
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(rows.size() * n);
    const auto v = x.values();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= m) throw DimensionError("gather_rows index out of range");
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(rows[r] * n), n,
                    out.begin() + static_cast<std::ptrdiff_t>(r * n));
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return make_result({idx.size(), n}, std::move(out), {x}, [n, idx](Node& self) {
        auto& g = input(self, 0).ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += self.grad[r * n + j];
    });
}

// ---- fused losses ------------------------------------------------------------

DiffArray cross_entropy_rows(const DiffArray& logits, std::span<const std::size_t> targets,
                             std::span<const double> weights) {
    const std::size_t m = logits.rows(), n = logits.cols();
    if (targets.size() != m || weights.size() != m)
        throw DimensionError("cross_entropy_rows: targets/weights must have one entry per row");
    std::vector<double> prob(m * n);
    kernels::softmax_rows(m, n, 1.0, logits.values(), prob);
    double wsum = 0.0, loss = 0.0;
    const auto x = logits.values();
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i] >= n) throw DimensionError("cross_entropy_rows: target out of range");
        double mx = x[i * n];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
        double lse = 0.0;
        for (std::size_t j = 0; j < n; ++j) lse += std::exp(x[i * n + j] - mx);
        lse = mx + std::log(lse);
        loss += weights[i] * (lse - x[i * n + targets[i]]);
        wsum += weights[i];
    }
    const double inv_w = wsum > 0.0 ? 1.0 / wsum : 0.0;
    std::vector<std::size_t> t(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    return make_result({1}, {loss * inv_w}, {logits},
                       [m, n, inv_w, t = std::move(t), w = std::move(w),
                        prob = std::move(prob)](Node& self) {
                           auto& g = input(self, 0).ensure_grad();
                           const double g0 = self.grad[0] * inv_w;
                           for (std::size_t i = 0; i < m; ++i) {
                               const double c = g0 * w[i];
                               for (std::size_t j = 0; j < n; ++j)
                                   g[i * n + j] += c * (prob[i * n + j] - (j == t[i] ? 1.0 : 0.0));
                           }
                       });
}

DiffArray interval_iou_rows(const DiffArray& pred, std::span<const double> target) {
    const std::size_t k = pred.rows();
    if (pred.cols() != 2 || target.size() != 2 * k)
        throw DimensionError("interval_iou_rows expects (k x 2) predictions and 2k targets");
    std::vector<double> out(k);
    const auto p = pred.values();
    for (std::size_t i = 0; i < k; ++i) {
        const double ps = p[2 * i] - 0.5 * p[2 * i + 1], pe = p[2 * i] + 0.5 * p[2 * i + 1];
        const double ts = target[2 * i] - 0.5 * target[2 * i + 1];
        const double te = target[2 * i] + 0.5 * target[2 * i + 1];
        const double inter = std::max(0.0, std::min(pe, te) - std::max(ps, ts));
        const double uni = (pe - ps) + (te - ts) - inter;
        out[i] = uni > 0.0 ? inter / uni : 0.0;
    }
    std::vector<double> tgt(target.begin(), target.end());
    return make_result({k}, std::move(out), {pred}, [k, tgt = std::move(tgt)](Node& self) {
        Node& in = input(self, 0);
        auto& g = in.ensure_grad();
        for (std::size_t i = 0; i < k; ++i) {
            const double c = in.value[2 * i], w = in.value[2 * i + 1];
            const double ps = c - 0.5 * w, pe = c + 0.5 * w;
            const double ts = tgt[2 * i] - 0.5 * tgt[2 * i + 1];
            const double te = tgt[2 * i] + 0.5 * tgt[2 * i + 1];
            const double inter = std::max(0.0, std::min(pe, te) - std::max(ps, ts));
            const double uni = (pe - ps) + (te - ts) - inter;
            if (uni <= 0.0) continue;
            // d inter / d(pe, ps) and d union / d(pe, ps).
            double di_pe = 0.0, di_ps = 0.0;
            if (inter > 0.0) {
                di_pe = pe < te ? 1.0 : 0.0;
                di_ps = ps > ts ? -1.0 : 0.0;
            }
            const double du_pe = 1.0 - di_pe, du_ps = -1.0 - di_ps;
            const double inv_u2 = 1.0 / (uni * uni);
            const double d_pe = (di_pe * uni - inter * du_pe) * inv_u2;
            const double d_ps = (di_ps * uni - inter * du_ps) * inv_u2;
            const double gi = self.grad[i];
            g[2 * i] += gi * (d_pe + d_ps);
            g[2 * i + 1] += gi * 0.5 * (d_pe - d_ps);
        }
    });
}

DiffArray center_columns(const DiffArray& x) {
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(x.values().begin(), x.values().end());
    for (std::size_t j = 0; j < n; ++j) {
        double mu = 0.0;
        for (std::size_t i = 0; i < m; ++i) mu += out[i * n + j];
        mu /= static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) out[i * n + j] -= mu;
    }
    return make_result(x.shape(), std::move(out), {x}, [m, n](Node& self) {
        auto& g = input(self, 0).ensure_grad();
        for (std::size_t j = 0; j < n; ++j) {
            double mu = 0.0;
            for (std::size_t i = 0; i < m; ++i) mu += self.grad[i * n + j];
            mu /= static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i) g[i * n + j] += self.grad[i * n + j] - mu;
        }
    });
}

DiffArray composite_norm(const DiffArray& x) {
    const std::size_t m = x.rows(), n = x.cols();
    const auto v = x.values();
    std::vector<double> col(n, 0.0), row(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double a = std::fabs(v[i * n + j]);
            col[j] += a;
            row[i] += a;
        }
    const auto jmax = static_cast<std::size_t>(std::max_element(col.begin(), col.end()) - col.begin());
    const auto imax = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    const double n1 = col[jmax], ninf = row[imax];
    const double out = std::sqrt(n1 * ninf);
    return make_result({1}, {out}, {x}, [m, n, jmax, imax, n1, ninf, out](Node& self) {
        if (out <= 0.0) return;
        Node& in = input(self, 0);
        auto& g = in.ensure_grad();
        const double c = self.grad[0] / (2.0 * out);
        auto sign = [](double a) { return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0); };
        for (std::size_t i = 0; i < m; ++i) g[i * n + jmax] += c * ninf * sign(in.value[i * n + jmax]);
        for (std::size_t j = 0; j < n; ++j) g[imax * n + j] += c * n1 * sign(in.value[imax * n + j]);
    });
}

// ---- optimization ----------------------------------------------------------

void AdamState::reset(std::span<const DiffArray> params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
        m.emplace_back(p.size(), 0.0);
        v.emplace_back(p.size(), 0.0);
    }
    step = 0;
}

void adam_step(std::span<DiffArray> params, AdamState& state, const AdamOptions& options) {
    if (state.m.size() != params.size()) throw DimensionError("adam_step: state/parameter count mismatch");
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (state.m[k].size() != params[k].size())
            throw DimensionError("adam_step: state shape mismatch for parameter " + std::to_string(k));
        for (double g : params[k].node()->grad)
            if (!std::isfinite(g)) throw DivergenceError("adam_step: non-finite gradient in parameter " +
                                                         std::to_string(k));
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(options.beta1, t);
    const double bc2 = 1.0 - std::pow(options.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& grad = params[k].node()->grad;
        if (grad.empty()) continue;  // no gradient reached this parameter
        auto values = params[k].mutable_values();
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = grad[i];
            m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * g;
            v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            values[i] -= options.lr * mhat / (std::sqrt(vhat) + options.eps);
        }
    }
}

// ---- verification ----------------------------------------------------------

GradCheckResult grad_check(const ScalarFn& f, const DiffArray& x, double h) {
    std::vector<double> point(x.values().begin(), x.values().end());
    GradCheckResult result;
    {
        auto probe = DiffArray::parameter(x.shape(), point);
        auto y = f(probe);
        if (y.size() != 1) throw DimensionError("grad_check requires a scalar function");
        backward(y);
        result.analytic = probe.grad();
    }
    NoGradGuard no_grad;
    result.numeric.resize(point.size());
    for (std::size_t i = 0; i < point.size(); ++i) {
        auto plus = point;
        auto minus = point;
        plus[i] += h;
        minus[i] -= h;
        const double fp = f(DiffArray::constant(x.shape(), std::move(plus))).item();
        const double fm = f(DiffArray::constant(x.shape(), std::move(minus))).item();
        result.numeric[i] = (fp - fm) / (2.0 * h);
        const double err = std::fabs(result.analytic[i] - result.numeric[i]) /
                           std::max(1.0, std::fabs(result.analytic[i]));
        result.max_rel_error = std::max(result.max_rel_error, err);
    }
    return result;
}

}  // namespace selfdetr::ad
