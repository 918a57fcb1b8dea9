#include "xrc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>
#include <utility>

namespace xrc {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void require_2d(const std::vector<std::size_t>& shape) {
    if (shape.size() != 2) throw TensorError("expected a 2-d tensor, got shape " + shape_str(shape));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Builds a result node; the graph edge is dropped when no input needs a gradient.
Tensor make_result(std::vector<std::size_t> shape, std::vector<double> value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return Tensor(std::move(node));
}

bool wants(const NodePtr& p) { return p->requires_grad; }

// Reverse topological order over nodes that require grad.
std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    std::reverse(order.begin(), order.end());
    return order;
}

}  // namespace

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw TensorError("matrix value count does not match shape");
}

std::vector<double>& Node::grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::constant(std::vector<std::size_t> shape, std::vector<double> values) {
    require_2d(shape);
    if (product(shape) != values.size())
        throw TensorError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
}

Tensor Tensor::constant(const Matrix& m) { return constant({m.rows, m.cols}, m.data); }

Tensor Tensor::parameter(std::vector<std::size_t> shape, std::vector<double> values, std::string name) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    t.node_->name = std::move(name);
    return t;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    auto n = product(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double v) { return constant({1, 1}, {v}); }

std::size_t Tensor::rows() const {
    require_2d(node_->shape);
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    require_2d(node_->shape);
    return node_->shape[1];
}

double Tensor::item() const {
    if (size() != 1) throw TensorError("item() on a tensor with " + std::to_string(size()) + " elements");
    return node_->value[0];
}

Matrix Tensor::to_matrix() const { return Matrix(rows(), cols(), node_->value); }

const std::vector<double>& Tensor::grad() const {
    if (node_->is_leaf()) {
        if (!node_->requires_grad) throw TensorError("gradient requested for a constant tensor");
        return node_->grad_buffer();
    }
    if (!node_->retain)
        throw TensorError("gradient not retained for intermediate tensor '" + node_->name + "'");
    if (node_->grad.empty()) throw TensorError("backward has not been run for tensor '" + node_->name + "'");
    return node_->grad;
}

Matrix Tensor::grad_matrix() const { return Matrix(rows(), cols(), grad()); }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor& Tensor::retain_grad() {
    node_->retain = true;
    return *this;
}

Tensor Tensor::detach() const { return constant(node_->shape, node_->value); }

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return make_result(a.shape(), std::move(out), {a.ptr(), b.ptr()}, [](Node& self) {
        for (auto& p : self.parents) {
            if (!wants(p)) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return make_result(a.shape(), std::move(out), {a.ptr(), b.ptr()}, [](Node& self) {
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_result(a.shape(), std::move(out), {a.ptr(), b.ptr()}, [](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (wants(pa)) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (wants(pb)) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
    return make_result(a.shape(), std::move(out), {a.ptr()}, [s](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

Tensor mul_constant(const Tensor& x, std::span<const double> factors) {
    if (factors.size() != x.size()) throw TensorError("mul_constant: factor count mismatch");
    std::vector<double> f(factors.begin(), factors.end());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * f[i];
    return make_result(x.shape(), std::move(out), {x.ptr()}, [f = std::move(f)](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * f[i];
    });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    const std::size_t n = x.rows(), d = x.cols();
    if (bias.rows() != 1 || bias.cols() != d) throw TensorError("add_row_bias: bias must be 1x" + std::to_string(d));
    std::vector<double> out(x.value());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bias.value()[j];
    return make_result(x.shape(), std::move(out), {x.ptr(), bias.ptr()}, [n, d](Node& self) {
        if (wants(self.parents[0])) {
            auto& g = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants(self.parents[1])) {
            auto& g = self.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
        }
    });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > 0.0 ? x.value()[i] : 0.0;
    return make_result(x.shape(), std::move(out), {x.ptr()}, [](Node& self) {
        auto& p = self.parents[0];
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p->value[i] > 0.0) g[i] += self.grad[i];
    });
}

Tensor square(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * x.value()[i];
    return make_result(x.shape(), std::move(out), {x.ptr()}, [](Node& self) {
        auto& p = self.parents[0];
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * p->value[i] * self.grad[i];
    });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.value()) s += v;
    return make_result({1, 1}, {s}, {x.ptr()}, [](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (double& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw TensorError("mean of an empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw TensorError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const double* av = a.value().data();
    const double* bv = b.value().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = av[i * k + p];
            if (s == 0.0) continue;
            const double* brow = bv + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
        }
    }
    return make_result({m, n}, std::move(out), {a.ptr(), b.ptr()}, [m, k, n](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const double* gc = self.grad.data();
        if (wants(pa)) {
            auto& ga = pa->grad_buffer();
            const double* bv = pb->value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* brow = bv + p * n;
                    const double* grow = gc + i * n;
                    for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                    ga[i * k + p] += s;
                }
        }
        if (wants(pb)) {
            auto& gb = pb->grad_buffer();
            const double* av = pa->value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double s = av[i * k + p];
                    if (s == 0.0) continue;
                    double* gbrow = gb.data() + p * n;
                    const double* grow = gc + i * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += s * grow[j];
                }
        }
    });
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k)
        throw TensorError("matmul_bt: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    std::vector<double> out(m * n, 0.0);
    const double* av = a.value().data();
    const double* bv = b.value().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += av[i * k + p] * bv[j * k + p];
            out[i * n + j] = s;
        }
    return make_result({m, n}, std::move(out), {a.ptr(), b.ptr()}, [m, k, n](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const double* gc = self.grad.data();
        if (wants(pa)) {
            auto& ga = pa->grad_buffer();
            const double* bv = pb->value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double g = gc[i * n + j];
                    if (g == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += g * bv[j * k + p];
                }
        }
        if (wants(pb)) {
            auto& gb = pb->grad_buffer();
            const double* av = pa->value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double g = gc[i * n + j];
                    if (g == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += g * av[i * k + p];
                }
        }
    });
}

// ---- normalizations ------------------------------------------------------------

namespace {

std::vector<double> softmax_forward(const std::vector<double>& scores, const double* mask, std::size_t n,
                                    std::size_t d) {
    std::vector<double> out(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* s = scores.data() + i * d;
        double* o = out.data() + i * d;
        double mx = -std::numeric_limits<double>::infinity();
        bool any_valid = mask == nullptr;
        for (std::size_t j = 0; j < d; ++j) {
            const double m = mask ? mask[i * d + j] : 0.0;
            if (mask && m > kMaskValue / 2) any_valid = true;
            mx = std::max(mx, s[j] + m);
        }
        if (!any_valid) throw TensorError("softmax_rows: row " + std::to_string(i) + " is fully masked");
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double m = mask ? mask[i * d + j] : 0.0;
            o[j] = std::exp(s[j] + m - mx);
            z += o[j];
        }
        for (std::size_t j = 0; j < d; ++j) o[j] /= z;
    }
    return out;
}

void softmax_backward(Node& self, std::size_t n, std::size_t d) {
    auto& p = self.parents[0];
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
        const double* a = self.value.data() + i * d;
        const double* ga = self.grad.data() + i * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += a[j] * ga[j];
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += a[j] * (ga[j] - dot);
    }
}

}  // namespace

Tensor softmax_rows(const Tensor& scores, const Tensor& mask) {
    require_same_shape(scores, mask, "softmax_rows");
    const std::size_t n = scores.rows(), d = scores.cols();
    auto out = softmax_forward(scores.value(), mask.value().data(), n, d);
    // The mask is treated as a constant.
    return make_result(scores.shape(), std::move(out), {scores.ptr()},
                       [n, d](Node& self) { softmax_backward(self, n, d); });
}

Tensor softmax_rows(const Tensor& scores) {
    const std::size_t n = scores.rows(), d = scores.cols();
    auto out = softmax_forward(scores.value(), nullptr, n, d);
    return make_result(scores.shape(), std::move(out), {scores.ptr()},
                       [n, d](Node& self) { softmax_backward(self, n, d); });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
    const std::size_t n = x.rows(), d = x.cols();
    if (gain.size() != d || shift.size() != d) throw TensorError("layer_norm_rows: gain/shift width mismatch");
    std::vector<double> xhat(n * d), inv(n), out(n * d);
    const auto& xv = x.value();
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xv[i * d + j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xv[i * d + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        inv[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (xv[i * d + j] - mu) * inv[i];
            out[i * d + j] = gain.value()[j] * xhat[i * d + j] + shift.value()[j];
        }
    }
    return make_result(x.shape(), std::move(out), {x.ptr(), gain.ptr(), shift.ptr()},
                       [n, d, xhat = std::move(xhat), inv = std::move(inv)](Node& self) {
                           auto& px = self.parents[0];
                           auto& pg = self.parents[1];
                           auto& ps = self.parents[2];
                           const double* gy = self.grad.data();
                           if (wants(pg)) {
                               auto& gg = pg->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < d; ++j) gg[j] += gy[i * d + j] * xhat[i * d + j];
                           }
                           if (wants(ps)) {
                               auto& gs = ps->grad_buffer();
                               for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < d; ++j) gs[j] += gy[i * d + j];
                           }
                           if (wants(px)) {
                               auto& gx = px->grad_buffer();
                               const auto& gain = pg->value;
                               std::vector<double> dxhat(d);
                               for (std::size_t i = 0; i < n; ++i) {
                                   double m1 = 0.0, m2 = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       dxhat[j] = gy[i * d + j] * gain[j];
                                       m1 += dxhat[j];
                                       m2 += dxhat[j] * xhat[i * d + j];
                                   }
                                   m1 /= static_cast<double>(d);
                                   m2 /= static_cast<double>(d);
                                   for (std::size_t j = 0; j < d; ++j)
                                       gx[i * d + j] += inv[i] * (dxhat[j] - m1 - xhat[i * d + j] * m2);
                               }
                           }
                       });
}

// ---- reshaping -------------------------------------------------------------------

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    const std::size_t n = x.rows(), d = x.cols();
    if (begin >= end || end > d) throw TensorError("slice_cols: invalid column range");
    const std::size_t w = end - begin;
    std::vector<double> out(n * w);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.value()[i * d + begin + j];
    return make_result({n, w}, std::move(out), {x.ptr()}, [n, d, w, begin](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * d + begin + j] += self.grad[i * w + j];
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw TensorError("concat_cols: no inputs");
    const std::size_t n = parts[0].rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    std::vector<NodePtr> parents;
    for (const auto& p : parts) {
        if (p.rows() != n) throw TensorError("concat_cols: row count mismatch");
        widths.push_back(p.cols());
        total += p.cols();
        parents.push_back(p.ptr());
    }
    std::vector<double> out(n * total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const std::size_t w = widths[k];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = parts[k].value()[i * w + j];
        off += w;
    }
    return make_result({n, total}, std::move(out), std::move(parents), [n, total, widths](Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            const std::size_t w = widths[k];
            if (wants(self.parents[k])) {
                auto& g = self.parents[k]->grad_buffer();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * total + off + j];
            }
            off += w;
        }
    });
}

Tensor select_row(const Tensor& x, std::size_t row) {
    const std::size_t n = x.rows(), d = x.cols();
    if (row >= n) throw TensorError("select_row: row out of range");
    std::vector<double> out(x.value().begin() + static_cast<std::ptrdiff_t>(row * d),
                            x.value().begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
    return make_result({1, d}, std::move(out), {x.ptr()}, [row, d](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t j = 0; j < d; ++j) g[row * d + j] += self.grad[j];
    });
}

Tensor head_rows(const Tensor& x, std::size_t count) {
    const std::size_t n = x.rows(), d = x.cols();
    if (count > n) throw TensorError("head_rows: requested more rows than available");
    std::vector<double> out(x.value().begin(), x.value().begin() + static_cast<std::ptrdiff_t>(count * d));
    return make_result({count, d}, std::move(out), {x.ptr()}, [](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw TensorError("stack_rows: no inputs");
    const std::size_t d = rows[0].size();
    std::vector<double> out;
    out.reserve(rows.size() * d);
    std::vector<NodePtr> parents;
    for (const auto& r : rows) {
        if (r.size() != d) throw TensorError("stack_rows: width mismatch");
        out.insert(out.end(), r.value().begin(), r.value().end());
        parents.push_back(r.ptr());
    }
    return make_result({rows.size(), d}, std::move(out), std::move(parents), [d](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            if (!wants(self.parents[k])) continue;
            auto& g = self.parents[k]->grad_buffer();
            for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[k * d + j];
        }
    });
}

Tensor mean_of_rows(const Tensor& x, std::span<const std::size_t> rows) {
    const std::size_t n = x.rows(), d = x.cols();
    if (rows.empty()) throw TensorError("mean_of_rows: empty row set");
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<double> out(d, 0.0);
    for (auto r : idx) {
        if (r >= n) throw TensorError("mean_of_rows: row out of range");
        for (std::size_t j = 0; j < d; ++j) out[j] += x.value()[r * d + j];
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (double& v : out) v *= inv;
    return make_result({1, d}, std::move(out), {x.ptr()}, [idx = std::move(idx), d, inv](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto r : idx)
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[j] * inv;
    });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
    const std::size_t v = table.rows(), d = table.cols();
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    std::vector<double> out(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= v)
            throw TensorError("gather_rows: id " + std::to_string(idx[i]) + " out of range " + std::to_string(v));
        std::copy_n(table.value().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return make_result({ids.size(), d}, std::move(out), {table.ptr()}, [idx = std::move(idx), d](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
    });
}

// ---- losses --------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
    const std::size_t k = logits.size();
    if (label >= k) throw TensorError("cross_entropy: label " + std::to_string(label) + " out of range");
    const auto& z = logits.value();
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    return make_result({1, 1}, {lse - z[label]}, {logits.ptr()}, [k, label, lse](Node& self) {
        auto& p = self.parents[0];
        auto& g = p->grad_buffer();
        for (std::size_t c = 0; c < k; ++c) {
            const double prob = std::exp(p->value[c] - lse);
            g[c] += self.grad[0] * (prob - (c == label ? 1.0 : 0.0));
        }
    });
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
    if (p.size() != q.size())
        throw TensorError("kl_divergence: length mismatch " + std::to_string(p.size()) + " vs " + std::to_string(q.size()));
    static constexpr double kFloor = 1e-12;
    auto check = [](const Tensor& t, const char* which) {
        double s = 0.0;
        for (double v : t.value()) {
            if (v < 0.0) throw TensorError(std::string("kl_divergence: negative entry in ") + which);
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6) throw TensorError(std::string("kl_divergence: ") + which + " does not sum to 1");
    };
    check(p, "p");
    check(q, "q");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pi = p.value()[i];
        if (pi > 0.0) kl += pi * (std::log(pi) - std::log(std::max(q.value()[i], kFloor)));
    }
    return make_result({1, 1}, {kl}, {p.ptr(), q.ptr()}, [](Node& self) {
        auto& pp = self.parents[0];
        auto& pq = self.parents[1];
        const double g = self.grad[0];
        if (wants(pp)) {
            auto& gp = pp->grad_buffer();
            for (std::size_t i = 0; i < gp.size(); ++i) {
                const double pi = pp->value[i];
                if (pi > 0.0) gp[i] += g * (std::log(pi) + 1.0 - std::log(std::max(pq->value[i], kFloor)));
            }
        }
        if (wants(pq)) {
            auto& gq = pq->grad_buffer();
            for (std::size_t i = 0; i < gq.size(); ++i)
                if (pq->value[i] > kFloor) gq[i] -= g * pp->value[i] / pq->value[i];
        }
    });
}

// ---- reverse pass ------------------------------------------------------------------------

void backward(const Tensor& loss) {
    Node* root = loss.node();
    if (!root) throw TensorError("backward on an undefined tensor");
    if (root->value.size() != 1)
        throw TensorError("backward requires a scalar loss, got " + std::to_string(root->value.size()) + " elements");
    if (root->backward_done) throw TensorError("backward already run on this graph; call reset_graph first");
    if (!root->requires_grad) throw TensorError("loss does not depend on any parameter");

    auto order = topo_order(root);
    for (Node* n : order)
        if (n->retain) n->grad_buffer();
    root->grad_buffer()[0] += 1.0;
    for (Node* n : order) {
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    for (Node* n : order) {
        if (!n->is_leaf() && !n->retain) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
    root->backward_done = true;
}

void reset_graph(const Tensor& loss) {
    Node* root = loss.node();
    if (!root) return;
    for (Node* n : topo_order(root)) {
        if (!n->is_leaf()) n->grad.clear();
        n->backward_done = false;
    }
}

// ---- gradient checking ---------------------------------------------------------------------

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
    if (analytic.size() != numeric.size()) throw TensorError("relative_error: length mismatch");
    double diff = 0.0, na = 0.0, nf = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        na = std::max(na, std::abs(analytic[i]));
        nf = std::max(nf, std::abs(numeric[i]));
    }
    return diff / std::max({na, nf, 1e-8});
}

GradReport gradient_check(const std::function<Tensor()>& build_loss, std::vector<Tensor> params,
                          const GradCheckOptions& opts) {
    GradReport report;
    report.tolerance = opts.tolerance;
    for (auto& p : params) p.zero_grad();
    {
        Tensor loss = build_loss();
        backward(loss);
    }
    for (auto& p : params) {
        ParamGradReport pr;
        pr.name = p.name();
        pr.analytic = p.grad();
        if (!opts.corrupt_param.empty() && pr.name == opts.corrupt_param && !pr.analytic.empty())
            pr.analytic[0] += opts.corrupt_offset;
        pr.numeric.resize(p.size());
        auto& values = p.mutable_value();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + opts.step;
            const double up = build_loss().item();
            values[i] = saved - opts.step;
            const double down = build_loss().item();
            values[i] = saved;
            pr.numeric[i] = (up - down) / (2.0 * opts.step);
        }
        pr.rel_error = relative_error(pr.analytic, pr.numeric);
        if (report.worst_param.empty() || pr.rel_error > report.max_rel_error) {
            report.max_rel_error = pr.rel_error;
            report.worst_param = pr.name;
        }
        report.params.push_back(std::move(pr));
    }
    for (auto& p : params) p.zero_grad();
    return report;
}

}  // namespace xrc
