#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace xrc {

/// Additive mask value for forbidden attention positions.
inline constexpr double kMaskValue = -1e9;

class TensorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Plain row-major matrix with no gradient bookkeeping.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> values);

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

    bool operator==(const Matrix&) const = default;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the reverse-mode graph. Graphs are rebuilt on every forward
// pass; parameters are long-lived leaves shared between graphs.
struct Node {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;
    std::string name;
    bool requires_grad = false;
    bool retain = false;
    bool backward_done = false;

    bool is_leaf() const { return parents.empty(); }
    std::size_t size() const { return value.size(); }
    // Allocates the gradient buffer on first use.
    std::vector<double>& grad_buffer();
};

/// Handle to a node of the differentiation graph.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor constant(std::vector<std::size_t> shape, std::vector<double> values);
    static Tensor constant(const Matrix& m);
    static Tensor parameter(std::vector<std::size_t> shape, std::vector<double> values, std::string name);
    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor scalar(double v);

    bool defined() const { return static_cast<bool>(node_); }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rows() const;
    std::size_t cols() const;
    std::size_t size() const { return node_->value.size(); }
    const std::string& name() const { return node_->name; }

    const std::vector<double>& value() const { return node_->value; }
    std::vector<double>& mutable_value() { return node_->value; }
    double item() const;
    double at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }
    Matrix to_matrix() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient after backward. Throws for intermediates not flagged with retain_grad().
    const std::vector<double>& grad() const;
    Matrix grad_matrix() const;
    void zero_grad();
    Tensor& retain_grad();
    Tensor detach() const;

    Node* node() const { return node_.get(); }
    const NodePtr& ptr() const { return node_; }

private:
    NodePtr node_;
};

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ
Tensor matmul_bt(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// x (N×d) plus a bias row (1×d) broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Row-wise softmax of scores + mask. Mask entries are 0 or kMaskValue;
/// a row with every entry masked is rejected.
Tensor softmax_rows(const Tensor& scores, const Tensor& mask);
Tensor softmax_rows(const Tensor& scores);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-5);

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor select_row(const Tensor& x, std::size_t row);
Tensor stack_rows(const std::vector<Tensor>& rows);
/// Mean of the listed rows of x, as a 1×cols tensor.
Tensor mean_of_rows(const Tensor& x, std::span<const std::size_t> rows);
/// Rows of table selected by ids.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
/// First n rows of x.
Tensor head_rows(const Tensor& x, std::size_t n);
/// Elementwise multiply by a constant (no gradient to the constant).
Tensor mul_constant(const Tensor& x, std::span<const double> factors);

/// −log softmax(logits)[label] for a 1×K logits row.
Tensor cross_entropy(const Tensor& logits, std::size_t label);
/// Σ p ln(p / max(q, 1e-12)) with 0·ln 0 = 0.
Tensor kl_divergence(const Tensor& p, const Tensor& q);

// ---- reverse pass --------------------------------------------------------

/// Populates gradients of every leaf requiring grad and of retained intermediates.
/// Leaf gradients accumulate across calls; intermediates are freed unless retained.
void backward(const Tensor& loss);
/// Clears intermediate gradients and the backward flag so the graph can be reused.
void reset_graph(const Tensor& loss);

// ---- gradient checking ---------------------------------------------------

struct ParamGradReport {
    std::string name;
    std::vector<double> analytic;
    std::vector<double> numeric;
    double rel_error = 0.0;
};

struct GradReport {
    std::vector<ParamGradReport> params;
    double max_rel_error = 0.0;
    std::string worst_param;
    double tolerance = 1e-4;

    bool passed() const { return max_rel_error <= tolerance; }
};

/// |a − f| / max(|a|, |f|, 1e-8), using max-abs norms over the tensor.
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Test hook: adds this offset to the first analytic entry of the named parameter.
    std::string corrupt_param;
    double corrupt_offset = 0.0;
};

/// Compares analytic gradients of build_loss() against central differences for
/// every element of every listed parameter. build_loss must rebuild its graph.
GradReport gradient_check(const std::function<Tensor()>& build_loss, std::vector<Tensor> params,
                          const GradCheckOptions& opts = {});

}  // namespace xrc
