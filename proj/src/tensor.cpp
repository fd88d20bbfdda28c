#include "caml/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace caml {

namespace {

thread_local bool g_grad_mode = true;

NodePtr make_node(int rows, int cols) {
    auto n = std::make_shared<TensorNode>();
    n->rows = rows;
    n->cols = cols;
    n->values.assign(static_cast<size_t>(rows) * cols, 0.0);
    return n;
}

std::string shape_of(const TensorNode& n) {
    return std::to_string(n.rows) + "x" + std::to_string(n.cols);
}

void check_finite(const TensorNode& n, const char* op) {
    for (double v : n.values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("op '") + op + "' produced a non-finite value");
        }
    }
}

// Wires up the result node: finite check, tape recording when grad mode
// is on and any input requires grad.
Tensor finish(NodePtr out, const char* op, std::vector<NodePtr> inputs,
              std::function<void(TensorNode&)> backprop) {
    out->op = op;
    check_finite(*out, op);
    bool track = false;
    if (g_grad_mode) {
        for (const auto& in : inputs) {
            if (in->requires_grad) {
                track = true;
                break;
            }
        }
    }
    if (track) {
        out->requires_grad = true;
        out->inputs = std::move(inputs);
        out->backprop = std::move(backprop);
    }
    return Tensor(std::move(out));
}

void require_same_shape(const TensorNode& a, const TensorNode& b, const char* op) {
    if (a.rows != b.rows || a.cols != b.cols) {
        throw ShapeError(std::string(op) + ": shapes " + shape_of(a) + " and " + shape_of(b) +
                         " do not match");
    }
}

} // namespace

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
    auto n = make_node(rows, cols);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(int rows, int cols, double value, bool requires_grad) {
    auto n = make_node(rows, cols);
    std::fill(n->values.begin(), n->values.end(), value);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::from(int rows, int cols, std::vector<double> values, bool requires_grad) {
    if (values.size() != static_cast<size_t>(rows) * cols) {
        throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
    auto n = make_node(rows, cols);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from(1, 1, {value}, requires_grad);
}

double Tensor::item() const {
    if (size() != 1) {
        throw UsageError("Tensor::item: tensor has shape " + shape_str() + ", expected 1x1");
    }
    return node_->values[0];
}

std::string Tensor::shape_str() const {
    return shape_of(*node_);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_mode) {
    g_grad_mode = false;
}

NoGradGuard::~NoGradGuard() {
    g_grad_mode = prev_;
}

bool grad_mode_enabled() {
    return g_grad_mode;
}

void backward(const Tensor& root) {
    if (root.size() != 1) {
        throw UsageError("backward: root must be scalar, got shape " + root.shape_str());
    }
    if (!root.requires_grad()) {
        return; // nothing reachable requires grad
    }

    // Iterative post-order DFS for the reverse topological order.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* node;
        size_t next_input;
    };
    std::vector<Frame> stack;
    stack.push_back({root.node(), 0});
    visited.insert(root.node());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_input < f.node->inputs.size()) {
            TensorNode* in = f.node->inputs[f.next_input++].get();
            if (in->requires_grad && !visited.count(in)) {
                visited.insert(in);
                stack.push_back({in, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // Each pass runs on clean buffers so that one call contributes exactly
    // d(root)/d(node); pre-existing gradients (previous passes, other batch
    // samples) are added back afterwards.
    std::vector<std::pair<TensorNode*, std::vector<double>>> stash;
    for (TensorNode* n : order) {
        if (!n->grad.empty()) {
            stash.emplace_back(n, std::move(n->grad));
            n->grad.clear();
        }
    }
    root.node()->ensure_grad();
    root.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backprop) {
            n->backprop(*n);
        }
    }
    for (auto& [n, prior] : stash) {
        n->ensure_grad();
        for (size_t i = 0; i < prior.size(); ++i) {
            n->grad[i] += prior[i];
        }
    }
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    const TensorNode& an = *a.node();
    const TensorNode& bn = *b.node();
    if (an.cols != bn.rows) {
        throw ShapeError("matmul: shapes " + shape_of(an) + " and " + shape_of(bn) +
                         " do not conform");
    }
    const int m = an.rows, k = an.cols, n = bn.cols;
    auto out = make_node(m, n);
    const double* A = an.values.data();
    const double* B = bn.values.data();
    double* C = out->values.data();
    for (int i = 0; i < m; ++i) {
        const double* Ai = A + static_cast<size_t>(i) * k;
        double* Ci = C + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = Ai[p];
            const double* Bp = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                Ci[j] += aip * Bp[j];
            }
        }
    }
    auto back = [a = a.ptr(), b = b.ptr(), m, k, n](TensorNode& self) {
        const double* G = self.grad.data();
        if (a->requires_grad) {
            a->ensure_grad();
            double* dA = a->grad.data();
            const double* B = b->values.data();
            // dA = G * B^T
            for (int i = 0; i < m; ++i) {
                const double* Gi = G + static_cast<size_t>(i) * n;
                double* dAi = dA + static_cast<size_t>(i) * k;
                for (int p = 0; p < k; ++p) {
                    const double* Bp = B + static_cast<size_t>(p) * n;
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += Gi[j] * Bp[j];
                    dAi[p] += acc;
                }
            }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            double* dB = b->grad.data();
            const double* A = a->values.data();
            // dB = A^T * G
            for (int p = 0; p < k; ++p) {
                double* dBp = dB + static_cast<size_t>(p) * n;
                for (int i = 0; i < m; ++i) {
                    const double aip = A[static_cast<size_t>(i) * k + p];
                    const double* Gi = G + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) dBp[j] += aip * Gi[j];
                }
            }
        }
    };
    return finish(std::move(out), "matmul", {a.ptr(), b.ptr()}, std::move(back));
}

Tensor add(const Tensor& a, const Tensor& b) {
    const TensorNode& an = *a.node();
    const TensorNode& bn = *b.node();
    const bool broadcast = (bn.rows == 1 && an.cols == bn.cols && an.rows != 1);
    if (!broadcast) {
        require_same_shape(an, bn, "add");
    }
    auto out = make_node(an.rows, an.cols);
    const size_t n = an.values.size();
    for (size_t i = 0; i < n; ++i) {
        out->values[i] = an.values[i] + bn.values[broadcast ? i % an.cols : i];
    }
    auto back = [a = a.ptr(), b = b.ptr(), broadcast](TensorNode& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            if (broadcast) {
                const int cols = self.cols;
                for (size_t i = 0; i < self.grad.size(); ++i) b->grad[i % cols] += self.grad[i];
            } else {
                for (size_t i = 0; i < self.grad.size(); ++i) b->grad[i] += self.grad[i];
            }
        }
    };
    return finish(std::move(out), "add", {a.ptr(), b.ptr()}, std::move(back));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const TensorNode& an = *a.node();
    const TensorNode& bn = *b.node();
    require_same_shape(an, bn, "mul");
    auto out = make_node(an.rows, an.cols);
    for (size_t i = 0; i < an.values.size(); ++i) {
        out->values[i] = an.values[i] * bn.values[i];
    }
    auto back = [a = a.ptr(), b = b.ptr()](TensorNode& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i] * b->values[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) b->grad[i] += self.grad[i] * a->values[i];
        }
    };
    return finish(std::move(out), "mul", {a.ptr(), b.ptr()}, std::move(back));
}

Tensor scale(const Tensor& a, double c) {
    const TensorNode& an = *a.node();
    auto out = make_node(an.rows, an.cols);
    for (size_t i = 0; i < an.values.size(); ++i) out->values[i] = an.values[i] * c;
    auto back = [a = a.ptr(), c](TensorNode& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += self.grad[i] * c;
        }
    };
    return finish(std::move(out), "scale", {a.ptr()}, std::move(back));
}

Tensor transpose(const Tensor& a) {
    const TensorNode& an = *a.node();
    auto out = make_node(an.cols, an.rows);
    for (int i = 0; i < an.rows; ++i) {
        for (int j = 0; j < an.cols; ++j) {
            out->values[static_cast<size_t>(j) * an.rows + i] =
                an.values[static_cast<size_t>(i) * an.cols + j];
        }
    }
    auto back = [a = a.ptr()](TensorNode& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int i = 0; i < self.rows; ++i) {
            for (int j = 0; j < self.cols; ++j) {
                a->grad[static_cast<size_t>(j) * self.rows + i] +=
                    self.grad[static_cast<size_t>(i) * self.cols + j];
            }
        }
    };
    return finish(std::move(out), "transpose", {a.ptr()}, std::move(back));
}

Tensor relu(const Tensor& a) {
    const TensorNode& an = *a.node();
    auto out = make_node(an.rows, an.cols);
    for (size_t i = 0; i < an.values.size(); ++i) {
        out->values[i] = an.values[i] > 0.0 ? an.values[i] : 0.0;
    }
    auto back = [a = a.ptr()](TensorNode& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            if (a->values[i] > 0.0) a->grad[i] += self.grad[i];
        }
    };
    return finish(std::move(out), "relu", {a.ptr()}, std::move(back));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const TensorNode& xn = *x.node();
    if (gain.rows() != 1 || gain.cols() != xn.cols || bias.rows() != 1 || bias.cols() != xn.cols) {
        throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(xn.cols) +
                         ", got " + gain.shape_str() + " and " + bias.shape_str());
    }
    const int R = xn.rows, C = xn.cols;
    auto out = make_node(R, C);
    // Cache per-row mean and 1/sqrt(var + eps) for the backward pass.
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(R) * 2);
    for (int i = 0; i < R; ++i) {
        const double* row = xn.values.data() + static_cast<size_t>(i) * C;
        double mean = 0.0;
        for (int j = 0; j < C; ++j) mean += row[j];
        mean /= C;
        double var = 0.0;
        for (int j = 0; j < C; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= C;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[i * 2] = mean;
        (*stats)[i * 2 + 1] = inv;
        double* orow = out->values.data() + static_cast<size_t>(i) * C;
        for (int j = 0; j < C; ++j) {
            orow[j] = (row[j] - mean) * inv * gain.values()[j] + bias.values()[j];
        }
    }
    auto back = [x = x.ptr(), g = gain.ptr(), b = bias.ptr(), stats, R, C](TensorNode& self) {
        for (int i = 0; i < R; ++i) {
            const double mean = (*stats)[i * 2];
            const double inv = (*stats)[i * 2 + 1];
            const double* xrow = x->values.data() + static_cast<size_t>(i) * C;
            const double* grow = self.grad.data() + static_cast<size_t>(i) * C;
            if (g->requires_grad) {
                g->ensure_grad();
                for (int j = 0; j < C; ++j) {
                    g->grad[j] += grow[j] * (xrow[j] - mean) * inv;
                }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int j = 0; j < C; ++j) b->grad[j] += grow[j];
            }
            if (x->requires_grad) {
                x->ensure_grad();
                double* dxrow = x->grad.data() + static_cast<size_t>(i) * C;
                // dxhat = dy * gain; reduce to the two row sums needed.
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int j = 0; j < C; ++j) {
                    const double dxhat = grow[j] * g->values[j];
                    const double xhat = (xrow[j] - mean) * inv;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for (int j = 0; j < C; ++j) {
                    const double dxhat = grow[j] * g->values[j];
                    const double xhat = (xrow[j] - mean) * inv;
                    dxrow[j] += inv * (dxhat - sum_dxhat / C - xhat * sum_dxhat_xhat / C);
                }
            }
        }
    };
    return finish(std::move(out), "layer_norm", {x.ptr(), gain.ptr(), bias.ptr()}, std::move(back));
}

namespace {

void softmax_row(const double* in, double* out, int n) {
    double mx = in[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        out[j] = std::exp(in[j] - mx);
        sum += out[j];
    }
    for (int j = 0; j < n; ++j) out[j] /= sum;
}

} // namespace

Tensor softmax_rows(const Tensor& x) {
    const TensorNode& xn = *x.node();
    const int R = xn.rows, C = xn.cols;
    auto out = make_node(R, C);
    for (int i = 0; i < R; ++i) {
        softmax_row(xn.values.data() + static_cast<size_t>(i) * C,
                    out->values.data() + static_cast<size_t>(i) * C, C);
    }
    auto back = [x = x.ptr(), R, C](TensorNode& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int i = 0; i < R; ++i) {
            const double* p = self.values.data() + static_cast<size_t>(i) * C;
            const double* g = self.grad.data() + static_cast<size_t>(i) * C;
            double dot = 0.0;
            for (int j = 0; j < C; ++j) dot += p[j] * g[j];
            double* dx = x->grad.data() + static_cast<size_t>(i) * C;
            for (int j = 0; j < C; ++j) dx[j] += p[j] * (g[j] - dot);
        }
    };
    return finish(std::move(out), "softmax", {x.ptr()}, std::move(back));
}

Tensor log_softmax_rows(const Tensor& x) {
    const TensorNode& xn = *x.node();
    const int R = xn.rows, C = xn.cols;
    auto out = make_node(R, C);
    for (int i = 0; i < R; ++i) {
        const double* row = xn.values.data() + static_cast<size_t>(i) * C;
        double* orow = out->values.data() + static_cast<size_t>(i) * C;
        double mx = row[0];
        for (int j = 1; j < C; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < C; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        for (int j = 0; j < C; ++j) orow[j] = row[j] - lse;
    }
    auto back = [x = x.ptr(), R, C](TensorNode& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int i = 0; i < R; ++i) {
            const double* lp = self.values.data() + static_cast<size_t>(i) * C;
            const double* g = self.grad.data() + static_cast<size_t>(i) * C;
            double gsum = 0.0;
            for (int j = 0; j < C; ++j) gsum += g[j];
            double* dx = x->grad.data() + static_cast<size_t>(i) * C;
            for (int j = 0; j < C; ++j) dx[j] += g[j] - std::exp(lp[j]) * gsum;
        }
    };
    return finish(std::move(out), "log_softmax", {x.ptr()}, std::move(back));
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    const TensorNode& tn = *table.node();
    for (int id : ids) {
        if (id < 0 || id >= tn.rows) {
            throw UsageError("embedding_lookup: id " + std::to_string(id) +
                             " out of range [0, " + std::to_string(tn.rows) + ")");
        }
    }
    const int C = tn.cols;
    auto out = make_node(static_cast<int>(ids.size()), C);
    for (size_t i = 0; i < ids.size(); ++i) {
        const double* src = tn.values.data() + static_cast<size_t>(ids[i]) * C;
        std::copy(src, src + C, out->values.data() + i * C);
    }
    std::vector<int> idcopy(ids.begin(), ids.end());
    auto back = [t = table.ptr(), idcopy, C](TensorNode& self) {
        if (!t->requires_grad) return;
        t->ensure_grad();
        for (size_t i = 0; i < idcopy.size(); ++i) {
            const double* g = self.grad.data() + i * C;
            double* dst = t->grad.data() + static_cast<size_t>(idcopy[i]) * C;
            for (int j = 0; j < C; ++j) dst[j] += g[j];
        }
    };
    return finish(std::move(out), "embedding_lookup", {table.ptr()}, std::move(back));
}

Tensor dropout_mask_apply(const Tensor& x, const Tensor& mask) {
    if (mask.requires_grad()) {
        throw UsageError("dropout_mask_apply: mask must not require grad");
    }
    require_same_shape(*x.node(), *mask.node(), "dropout_mask_apply");
    return mul(x, mask);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) {
        throw UsageError("concat: empty input list");
    }
    if (axis != 0 && axis != 1) {
        throw UsageError("concat: axis must be 0 or 1");
    }
    const int R0 = parts[0].rows(), C0 = parts[0].cols();
    int R = R0, C = C0;
    for (size_t i = 1; i < parts.size(); ++i) {
        if (axis == 0) {
            if (parts[i].cols() != C0) {
                throw ShapeError("concat(rows): column mismatch " + parts[i].shape_str() +
                                 " vs " + parts[0].shape_str());
            }
            R += parts[i].rows();
        } else {
            if (parts[i].rows() != R0) {
                throw ShapeError("concat(cols): row mismatch " + parts[i].shape_str() + " vs " +
                                 parts[0].shape_str());
            }
            C += parts[i].cols();
        }
    }
    auto out = make_node(R, C);
    std::vector<NodePtr> inputs;
    inputs.reserve(parts.size());
    for (const auto& p : parts) inputs.push_back(p.ptr());
    if (axis == 0) {
        size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p.values().begin(), p.values().end(), out->values.begin() + off);
            off += p.size();
        }
    } else {
        int coff = 0;
        for (const auto& p : parts) {
            for (int i = 0; i < R; ++i) {
                std::copy(p.values().begin() + static_cast<size_t>(i) * p.cols(),
                          p.values().begin() + static_cast<size_t>(i + 1) * p.cols(),
                          out->values.begin() + static_cast<size_t>(i) * C + coff);
            }
            coff += p.cols();
        }
    }
    auto back = [ins = inputs, axis, C](TensorNode& self) {
        if (axis == 0) {
            size_t off = 0;
            for (const auto& in : ins) {
                if (in->requires_grad) {
                    in->ensure_grad();
                    for (size_t i = 0; i < in->values.size(); ++i) {
                        in->grad[i] += self.grad[off + i];
                    }
                }
                off += in->values.size();
            }
        } else {
            int coff = 0;
            for (const auto& in : ins) {
                if (in->requires_grad) {
                    in->ensure_grad();
                    for (int i = 0; i < in->rows; ++i) {
                        for (int j = 0; j < in->cols; ++j) {
                            in->grad[static_cast<size_t>(i) * in->cols + j] +=
                                self.grad[static_cast<size_t>(i) * C + coff + j];
                        }
                    }
                }
                coff += in->cols;
            }
        }
    };
    return finish(std::move(out), "concat", std::move(inputs), std::move(back));
}

Tensor slice(const Tensor& x, int row_begin, int row_end, int col_begin, int col_end) {
    const TensorNode& xn = *x.node();
    if (row_begin < 0 || row_end > xn.rows || row_begin >= row_end || col_begin < 0 ||
        col_end > xn.cols || col_begin >= col_end) {
        throw ShapeError("slice: window [" + std::to_string(row_begin) + ", " +
                         std::to_string(row_end) + ") x [" + std::to_string(col_begin) + ", " +
                         std::to_string(col_end) + ") invalid for " + shape_of(xn));
    }
    const int R = row_end - row_begin, C = col_end - col_begin;
    auto out = make_node(R, C);
    for (int i = 0; i < R; ++i) {
        const double* src =
            xn.values.data() + static_cast<size_t>(row_begin + i) * xn.cols + col_begin;
        std::copy(src, src + C, out->values.data() + static_cast<size_t>(i) * C);
    }
    auto back = [x = x.ptr(), row_begin, col_begin, R, C](TensorNode& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int i = 0; i < R; ++i) {
            double* dst =
                x->grad.data() + static_cast<size_t>(row_begin + i) * x->cols + col_begin;
            const double* g = self.grad.data() + static_cast<size_t>(i) * C;
            for (int j = 0; j < C; ++j) dst[j] += g[j];
        }
    };
    return finish(std::move(out), "slice", {x.ptr()}, std::move(back));
}

Tensor cross_entropy(const Tensor& probs, std::span<const int> targets) {
    const TensorNode& pn = *probs.node();
    if (static_cast<int>(targets.size()) != pn.rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_of(pn));
    }
    for (int t : targets) {
        if (t < 0 || t >= pn.cols) {
            throw UsageError("cross_entropy: target " + std::to_string(t) + " out of range");
        }
    }
    const int R = pn.rows;
    auto out = make_node(1, 1);
    double acc = 0.0;
    for (int i = 0; i < R; ++i) {
        acc += -std::log(pn.values[static_cast<size_t>(i) * pn.cols + targets[i]]);
    }
    out->values[0] = acc / R;
    std::vector<int> tcopy(targets.begin(), targets.end());
    auto back = [p = probs.ptr(), tcopy, R](TensorNode& self) {
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double g = self.grad[0];
        for (int i = 0; i < R; ++i) {
            const size_t idx = static_cast<size_t>(i) * p->cols + tcopy[i];
            p->grad[idx] += -g / (R * p->values[idx]);
        }
    };
    return finish(std::move(out), "cross_entropy", {probs.ptr()}, std::move(back));
}

Tensor sum_all(const Tensor& x) {
    const TensorNode& xn = *x.node();
    auto out = make_node(1, 1);
    double acc = 0.0;
    for (double v : xn.values) acc += v;
    out->values[0] = acc;
    auto back = [x = x.ptr()](TensorNode& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const double g = self.grad[0];
        for (double& d : x->grad) d += g;
    };
    return finish(std::move(out), "sum_all", {x.ptr()}, std::move(back));
}

Tensor mean_all(const Tensor& x) {
    const TensorNode& xn = *x.node();
    auto out = make_node(1, 1);
    double acc = 0.0;
    for (double v : xn.values) acc += v;
    const double n = static_cast<double>(xn.values.size());
    out->values[0] = acc / n;
    auto back = [x = x.ptr(), n](TensorNode& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const double g = self.grad[0] / n;
        for (double& d : x->grad) d += g;
    };
    return finish(std::move(out), "mean_all", {x.ptr()}, std::move(back));
}

Tensor gather_cols(const Tensor& x, std::span<const int> ids) {
    const TensorNode& xn = *x.node();
    if (static_cast<int>(ids.size()) != xn.rows) {
        throw ShapeError("gather_cols: " + std::to_string(ids.size()) + " ids for " +
                         shape_of(xn));
    }
    for (int id : ids) {
        if (id < 0 || id >= xn.cols) {
            throw UsageError("gather_cols: id " + std::to_string(id) + " out of range");
        }
    }
    auto out = make_node(xn.rows, 1);
    for (int i = 0; i < xn.rows; ++i) {
        out->values[i] = xn.values[static_cast<size_t>(i) * xn.cols + ids[i]];
    }
    std::vector<int> idcopy(ids.begin(), ids.end());
    auto back = [x = x.ptr(), idcopy](TensorNode& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < idcopy.size(); ++i) {
            x->grad[i * x->cols + idcopy[i]] += self.grad[i];
        }
    };
    return finish(std::move(out), "gather_cols", {x.ptr()}, std::move(back));
}

Tensor select_rows(const Tensor& x, std::span<const int> ids) {
    const TensorNode& xn = *x.node();
    for (int id : ids) {
        if (id < 0 || id >= xn.rows) {
            throw UsageError("select_rows: row " + std::to_string(id) + " out of range");
        }
    }
    const int C = xn.cols;
    auto out = make_node(static_cast<int>(ids.size()), C);
    for (size_t i = 0; i < ids.size(); ++i) {
        const double* src = xn.values.data() + static_cast<size_t>(ids[i]) * C;
        std::copy(src, src + C, out->values.data() + i * C);
    }
    std::vector<int> idcopy(ids.begin(), ids.end());
    auto back = [x = x.ptr(), idcopy, C](TensorNode& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < idcopy.size(); ++i) {
            const double* g = self.grad.data() + i * C;
            double* dst = x->grad.data() + static_cast<size_t>(idcopy[i]) * C;
            for (int j = 0; j < C; ++j) dst[j] += g[j];
        }
    };
    return finish(std::move(out), "select_rows", {x.ptr()}, std::move(back));
}

Tensor make_dropout_mask(int rows, int cols, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw UsageError("make_dropout_mask: rate must be in [0, 1), got " + std::to_string(rate));
    }
    Tensor m = Tensor::zeros(rows, cols, false);
    const double keep = 1.0 / (1.0 - rate);
    for (double& v : m.values()) {
        v = rng.uniform() < rate ? 0.0 : keep;
    }
    return m;
}

} // namespace caml
