#pragma once

#include "caml/errors.hpp"
#include "caml/rng.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace caml {

// Reverse-mode automatic differentiation over dense row-major float64
// matrices. Every value in the project is a [rows x cols] matrix; scalars
// are 1x1. Ops record their inputs and a pull-style backward closure; a
// call to backward() on a scalar root walks the recorded graph in reverse
// topological order and accumulates gradients into every reachable node
// that requires them.

class TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

class TensorNode {
public:
    int rows = 0;
    int cols = 0;
    std::vector<double> values;
    std::vector<double> grad; // empty means "absent"
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<NodePtr> inputs;
    std::function<void(TensorNode&)> backprop;

    size_t size() const { return values.size(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
    }
};

// Value-semantic handle to a graph node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor zeros(int rows, int cols, bool requires_grad = false);
    static Tensor full(int rows, int cols, double value, bool requires_grad = false);
    static Tensor from(int rows, int cols, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    int rows() const { return node_->rows; }
    int cols() const { return node_->cols; }
    size_t size() const { return node_->values.size(); }

    double at(int r, int c) const { return node_->values[static_cast<size_t>(r) * node_->cols + c]; }
    double item() const;

    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<double>& grad() { return node_->grad; }
    const std::vector<double>& grad() const { return node_->grad; }
    double grad_at(int r, int c) const { return node_->grad[static_cast<size_t>(r) * node_->cols + c]; }

    void zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }
    void clear_grad() { node_->grad.clear(); }

    TensorNode* node() const { return node_.get(); }
    const NodePtr& ptr() const { return node_; }

    std::string shape_str() const;

private:
    NodePtr node_;
};

// While a NoGradGuard is alive, ops do not record the tape and outputs do
// not require grad. Used for frozen-teacher forward passes and decoding.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_mode_enabled();

// Populates gradients of all requires_grad ancestors of a scalar root.
// Repeated calls without clearing accumulate.
void backward(const Tensor& root);

// ---- forward ops ----

Tensor matmul(const Tensor& a, const Tensor& b);
// Same-shape elementwise add, or b broadcast when b is [1 x cols].
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b); // elementwise
Tensor scale(const Tensor& a, double c);
Tensor transpose(const Tensor& a);
Tensor relu(const Tensor& a);
// Row-wise layer normalization with affine gain/bias ([1 x cols] each).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
// Elementwise multiply by a precomputed mask (0 or 1/keep_prob entries).
// The mask must not require grad; supplying masks externally keeps runs
// reproducible under a seed.
Tensor dropout_mask_apply(const Tensor& x, const Tensor& mask);
Tensor concat(const std::vector<Tensor>& parts, int axis); // 0 = rows, 1 = cols
Tensor slice(const Tensor& x, int row_begin, int row_end, int col_begin, int col_end);
// Mean over rows of -log(probs[i, target_i]).
Tensor cross_entropy(const Tensor& probs, std::span<const int> targets);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// out[i, 0] = x[i, ids[i]]
Tensor gather_cols(const Tensor& x, std::span<const int> ids);
// out[k, :] = x[ids[k], :]
Tensor select_rows(const Tensor& x, std::span<const int> ids);

// Constant dropout mask with entries 0 (probability rate) or 1/(1 - rate).
Tensor make_dropout_mask(int rows, int cols, double rate, Rng& rng);

} // namespace caml
