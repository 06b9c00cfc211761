#include "roadkf/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace roadkf::ad {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
Eigen::Map<MatRM> as_mat(Tensor& t) { return {t.v.data(), t.rows, t.cols}; }
Eigen::Map<const MatRM> as_mat(const Tensor& t) {
    return {t.v.data(), t.rows, t.cols};
}

std::string shape_str(const Tensor& t) {
    return "[" + std::to_string(t.rows) + "," + std::to_string(t.cols) + "]";
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                shape_str(a) + " and " + shape_str(b));
}

double sigmoid_(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Reshape without clearing surviving elements. Safe inside the tape because
// every op writes its full output and backward() zeroes gradients itself.
void reshape_noclear(Tensor& t, int r, int c) {
    t.rows = r;
    t.cols = c;
    t.v.resize(static_cast<std::size_t>(r) * c);
}

}  // namespace

Tensor::Tensor(int r, int c, std::vector<double> data)
    : rows(r), cols(c), v(std::move(data)) {
    if (static_cast<std::size_t>(r) * c != v.size()) {
        throw std::invalid_argument("Tensor: data size does not match shape");
    }
}

void Tensor::resize(int r, int c) {
    rows = r;
    cols = c;
    v.assign(static_cast<std::size_t>(r) * c, 0.0);
}

Tape::Node& Tape::push(Op op, int rows, int cols) {
    if (used_ == static_cast<int>(nodes_.size())) {
        nodes_.emplace_back();
    }
    Node& n = nodes_[used_++];
    n.op = op;
    n.a = n.b = n.c = -1;
    n.i0 = n.i1 = n.i2 = n.i3 = 0;
    n.d0 = n.d1 = 0.0;
    n.needs_grad = false;
    reshape_noclear(n.val, rows, cols);
    reshape_noclear(n.grad, rows, cols);
    n.aux.rows = 0;
    n.aux.cols = 0;
    n.aux.v.clear();
    return n;
}

void Tape::check(Value v) const {
    if (v.id < 0 || v.id >= used_) {
        throw std::invalid_argument("Tape: dangling value handle");
    }
}

Value Tape::input(const Tensor& t) {
    Node& n = push(Op::Leaf, t.rows, t.cols);
    n.val = t;
    n.needs_grad = true;
    return {used_ - 1};
}

Value Tape::constant(const Tensor& t) {
    Node& n = push(Op::Leaf, t.rows, t.cols);
    n.val = t;
    return {used_ - 1};
}

Value Tape::constant_scalar(double x) {
    Tensor t(1, 1);
    t.v[0] = x;
    return constant(t);
}

// Broadcast kind of b against a: 0 same shape, 1 row [1,C], 2 scalar [1,1].
static int broadcast_kind(const Tensor& a, const Tensor& b) {
    if (b.rows == 1 && b.cols == 1 && !(a.rows == 1 && a.cols == 1)) return 2;
    if (a.rows == b.rows && a.cols == b.cols) return 0;
    if (b.rows == 1 && b.cols == a.cols) return 1;
    return -1;
}

Value Tape::add(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    const int kind = broadcast_kind(ta, tb);
    if (kind < 0) shape_error("add", ta, tb);
    Node& n = push(Op::Add, ta.rows, ta.cols);
    n.a = a.id;
    n.b = b.id;
    n.i0 = kind;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    const Tensor& xa = val(a.id);
    const Tensor& xb = val(b.id);
    for (int i = 0; i < xa.rows; ++i) {
        for (int j = 0; j < xa.cols; ++j) {
            const double bb = kind == 2 ? xb.v[0] : kind == 1 ? xb.at(0, j) : xb.at(i, j);
            n.val.at(i, j) = xa.at(i, j) + bb;
        }
    }
    return {used_ - 1};
}

Value Tape::sub(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    const int kind = broadcast_kind(ta, tb);
    if (kind < 0) shape_error("sub", ta, tb);
    Node& n = push(Op::Sub, ta.rows, ta.cols);
    n.a = a.id;
    n.b = b.id;
    n.i0 = kind;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    const Tensor& xa = val(a.id);
    const Tensor& xb = val(b.id);
    for (int i = 0; i < xa.rows; ++i) {
        for (int j = 0; j < xa.cols; ++j) {
            const double bb = kind == 2 ? xb.v[0] : kind == 1 ? xb.at(0, j) : xb.at(i, j);
            n.val.at(i, j) = xa.at(i, j) - bb;
        }
    }
    return {used_ - 1};
}

Value Tape::mul(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    const int kind = broadcast_kind(ta, tb);
    if (kind < 0) shape_error("mul", ta, tb);
    Node& n = push(Op::Mul, ta.rows, ta.cols);
    n.a = a.id;
    n.b = b.id;
    n.i0 = kind;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    const Tensor& xa = val(a.id);
    const Tensor& xb = val(b.id);
    for (int i = 0; i < xa.rows; ++i) {
        for (int j = 0; j < xa.cols; ++j) {
            const double bb = kind == 2 ? xb.v[0] : kind == 1 ? xb.at(0, j) : xb.at(i, j);
            n.val.at(i, j) = xa.at(i, j) * bb;
        }
    }
    return {used_ - 1};
}

Value Tape::div(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    const int kind = broadcast_kind(ta, tb);
    if (kind < 0) shape_error("div", ta, tb);
    Node& n = push(Op::Div, ta.rows, ta.cols);
    n.a = a.id;
    n.b = b.id;
    n.i0 = kind;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    const Tensor& xa = val(a.id);
    const Tensor& xb = val(b.id);
    for (int i = 0; i < xa.rows; ++i) {
        for (int j = 0; j < xa.cols; ++j) {
            const double bb = kind == 2 ? xb.v[0] : kind == 1 ? xb.at(0, j) : xb.at(i, j);
            n.val.at(i, j) = xa.at(i, j) / bb;
        }
    }
    return {used_ - 1};
}

Value Tape::add_scalar(Value a, double c) {
    check(a);
    const Tensor& ta = val(a.id);
    Node& n = push(Op::AddScalar, ta.rows, ta.cols);
    n.a = a.id;
    n.d0 = c;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = 0; i < xa.size(); ++i) n.val.v[i] = xa.v[i] + c;
    return {used_ - 1};
}

Value Tape::mul_scalar(Value a, double c) {
    check(a);
    const Tensor& ta = val(a.id);
    Node& n = push(Op::MulScalar, ta.rows, ta.cols);
    n.a = a.id;
    n.d0 = c;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = 0; i < xa.size(); ++i) n.val.v[i] = xa.v[i] * c;
    return {used_ - 1};
}

Value Tape::matmul(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    if (ta.cols != tb.rows) shape_error("matmul", ta, tb);
    Node& n = push(Op::MatMul, ta.rows, tb.cols);
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    const Tensor& xa = val(a.id);
    const Tensor& xb = val(b.id);
    as_mat(n.val).noalias() = as_mat(xa) * as_mat(xb);
    return {used_ - 1};
}

Value Tape::transpose(Value a) {
    check(a);
    const Tensor& ta = val(a.id);
    Node& n = push(Op::Transpose, ta.cols, ta.rows);
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = 0; i < xa.rows; ++i) {
        for (int j = 0; j < xa.cols; ++j) n.val.at(j, i) = xa.at(i, j);
    }
    return {used_ - 1};
}

Value Tape::exp(Value a) {
    check(a);
    const Tensor& ta = val(a.id);
    Node& n = push(Op::Exp, ta.rows, ta.cols);
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = 0; i < xa.size(); ++i) n.val.v[i] = std::exp(xa.v[i]);
    return {used_ - 1};
}

Value Tape::log(Value a) {
    check(a);
    const Tensor& ta = val(a.id);
    Node& n = push(Op::Log, ta.rows, ta.cols);
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = 0; i < xa.size(); ++i) n.val.v[i] = std::log(xa.v[i]);
    return {used_ - 1};
}

Value Tape::tanh(Value a) {
    check(a);
    const Tensor& ta = val(a.id);
    Node& n = push(Op::Tanh, ta.rows, ta.cols);
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = 0; i < xa.size(); ++i) n.val.v[i] = std::tanh(xa.v[i]);
    return {used_ - 1};
}

Value Tape::sigmoid(Value a) {
    check(a);
    const Tensor& ta = val(a.id);
    Node& n = push(Op::Sigmoid, ta.rows, ta.cols);
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = 0; i < xa.size(); ++i) n.val.v[i] = sigmoid_(xa.v[i]);
    return {used_ - 1};
}

Value Tape::silu(Value a) {
    check(a);
    const Tensor& ta = val(a.id);
    Node& n = push(Op::Silu, ta.rows, ta.cols);
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = 0; i < xa.size(); ++i) n.val.v[i] = xa.v[i] * sigmoid_(xa.v[i]);
    return {used_ - 1};
}

Value Tape::clamp(Value a, double lo, double hi) {
    check(a);
    const Tensor& ta = val(a.id);
    Node& n = push(Op::Clamp, ta.rows, ta.cols);
    n.a = a.id;
    n.d0 = lo;
    n.d1 = hi;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = 0; i < xa.size(); ++i) n.val.v[i] = std::clamp(xa.v[i], lo, hi);
    return {used_ - 1};
}

Value Tape::softmax_rows(Value a) {
    check(a);
    const Tensor& ta = val(a.id);
    Node& n = push(Op::SoftmaxRows, ta.rows, ta.cols);
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = 0; i < xa.rows; ++i) {
        double m = xa.at(i, 0);
        for (int j = 1; j < xa.cols; ++j) m = std::max(m, xa.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < xa.cols; ++j) {
            const double e = std::exp(xa.at(i, j) - m);
            n.val.at(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < xa.cols; ++j) n.val.at(i, j) /= sum;
    }
    return {used_ - 1};
}

Value Tape::mean_rows(Value a) {
    check(a);
    const Tensor& ta = val(a.id);
    Node& n = push(Op::MeanRows, 1, ta.cols);
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int j = 0; j < xa.cols; ++j) {
        double s = 0.0;
        for (int i = 0; i < xa.rows; ++i) s += xa.at(i, j);
        n.val.at(0, j) = s / xa.rows;
    }
    return {used_ - 1};
}

Value Tape::mean_all(Value a) {
    check(a);
    Node& n = push(Op::MeanAll, 1, 1);
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    double s = 0.0;
    for (double x : xa.v) s += x;
    n.val.v[0] = s / xa.size();
    return {used_ - 1};
}

Value Tape::sum_all(Value a) {
    check(a);
    Node& n = push(Op::SumAll, 1, 1);
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    double s = 0.0;
    for (double x : xa.v) s += x;
    n.val.v[0] = s;
    return {used_ - 1};
}

Value Tape::concat_cols(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    if (ta.rows != tb.rows) shape_error("concat_cols", ta, tb);
    const int a_cols = ta.cols;  // push below may reallocate node storage
    Node& n = push(Op::ConcatCols, ta.rows, ta.cols + tb.cols);
    n.a = a.id;
    n.b = b.id;
    n.i0 = a_cols;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    const Tensor& xa = val(a.id);
    const Tensor& xb = val(b.id);
    for (int i = 0; i < xa.rows; ++i) {
        for (int j = 0; j < xa.cols; ++j) n.val.at(i, j) = xa.at(i, j);
        for (int j = 0; j < xb.cols; ++j) n.val.at(i, xa.cols + j) = xb.at(i, j);
    }
    return {used_ - 1};
}

Value Tape::concat_rows(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    if (ta.cols != tb.cols) shape_error("concat_rows", ta, tb);
    const int a_rows = ta.rows;  // push below may reallocate node storage
    Node& n = push(Op::ConcatRows, ta.rows + tb.rows, ta.cols);
    n.a = a.id;
    n.b = b.id;
    n.i0 = a_rows;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    const Tensor& xa = val(a.id);
    const Tensor& xb = val(b.id);
    for (int i = 0; i < xa.rows; ++i)
        for (int j = 0; j < xa.cols; ++j) n.val.at(i, j) = xa.at(i, j);
    for (int i = 0; i < xb.rows; ++i)
        for (int j = 0; j < xb.cols; ++j) n.val.at(xa.rows + i, j) = xb.at(i, j);
    return {used_ - 1};
}

Value Tape::slice(Value a, int r0, int r1, int c0, int c1) {
    check(a);
    const Tensor& ta = val(a.id);
    if (r0 < 0 || r1 > ta.rows || c0 < 0 || c1 > ta.cols || r0 >= r1 || c0 >= c1) {
        throw std::invalid_argument("slice: bounds [" + std::to_string(r0) + "," +
                                    std::to_string(r1) + ")x[" + std::to_string(c0) +
                                    "," + std::to_string(c1) + ") invalid for " +
                                    shape_str(ta));
    }
    Node& n = push(Op::Slice, r1 - r0, c1 - c0);
    n.a = a.id;
    n.i0 = r0;
    n.i1 = r1;
    n.i2 = c0;
    n.i3 = c1;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = r0; i < r1; ++i)
        for (int j = c0; j < c1; ++j) n.val.at(i - r0, j - c0) = xa.at(i, j);
    return {used_ - 1};
}

Value Tape::repeat_rows(Value a, int count) {
    check(a);
    const Tensor& ta = val(a.id);
    if (ta.rows != 1) {
        throw std::invalid_argument("repeat_rows: expected a [1,C] row, got " +
                                    shape_str(ta));
    }
    Node& n = push(Op::RepeatRows, count, ta.cols);
    n.a = a.id;
    n.needs_grad = nodes_[a.id].needs_grad;
    const Tensor& xa = val(a.id);
    for (int i = 0; i < count; ++i)
        for (int j = 0; j < xa.cols; ++j) n.val.at(i, j) = xa.at(0, j);
    return {used_ - 1};
}

Value Tape::batchnorm(Value x, Value gamma, Value beta, Tensor* running_mean,
                      Tensor* running_var, bool train, double momentum,
                      double eps) {
    check(x);
    check(gamma);
    check(beta);
    const Tensor& tx = val(x.id);
    const int C = tx.cols;
    if (val(gamma.id).size() != C || val(beta.id).size() != C) {
        shape_error("batchnorm", tx, val(gamma.id));
    }
    if (!running_mean || !running_var || running_mean->size() != C ||
        running_var->size() != C) {
        throw std::invalid_argument("batchnorm: running statistics missing");
    }

    Node& n = push(train ? Op::BatchNormTrain : Op::BatchNormEval, tx.rows, C);
    n.a = x.id;
    n.b = gamma.id;
    n.c = beta.id;
    n.d0 = eps;
    n.needs_grad = nodes_[x.id].needs_grad || nodes_[gamma.id].needs_grad ||
                   nodes_[beta.id].needs_grad;
    n.aux.resize(2, C);  // row 0: mean used, row 1: var used

    const Tensor& xx = val(x.id);
    const Tensor& g = val(gamma.id);
    const Tensor& b = val(beta.id);
    const int N = xx.rows;
    for (int j = 0; j < C; ++j) {
        double mu, var;
        if (train) {
            double s = 0.0;
            for (int i = 0; i < N; ++i) s += xx.at(i, j);
            mu = s / N;
            double sq = 0.0;
            for (int i = 0; i < N; ++i) {
                const double d = xx.at(i, j) - mu;
                sq += d * d;
            }
            var = sq / N;
            running_mean->v[j] = (1.0 - momentum) * running_mean->v[j] + momentum * mu;
            running_var->v[j] = (1.0 - momentum) * running_var->v[j] + momentum * var;
        } else {
            mu = running_mean->v[j];
            var = running_var->v[j];
        }
        n.aux.at(0, j) = mu;
        n.aux.at(1, j) = var;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < N; ++i) {
            n.val.at(i, j) = g.v[j] * (xx.at(i, j) - mu) * inv + b.v[j];
        }
    }
    return {used_ - 1};
}

Value Tape::solve2x2(Value S, Value B) {
    check(S);
    check(B);
    const Tensor& ts = val(S.id);
    const Tensor& tb = val(B.id);
    if (ts.rows != 2 || ts.cols != 2 || tb.rows != 2) shape_error("solve2x2", ts, tb);
    const double det = ts.at(0, 0) * ts.at(1, 1) - ts.at(0, 1) * ts.at(1, 0);
    const double scale =
        std::max({std::abs(ts.at(0, 0)), std::abs(ts.at(1, 1)), 1e-30});
    if (!(std::abs(det) > 1e-14 * scale * scale)) {
        throw std::runtime_error("solve2x2: singular matrix");
    }
    Node& n = push(Op::Solve2x2, 2, tb.cols);
    n.a = S.id;
    n.b = B.id;
    n.needs_grad = nodes_[S.id].needs_grad || nodes_[B.id].needs_grad;
    const Tensor& s = val(S.id);
    const Tensor& bm = val(B.id);
    const double inv00 = s.at(1, 1) / det, inv01 = -s.at(0, 1) / det;
    const double inv10 = -s.at(1, 0) / det, inv11 = s.at(0, 0) / det;
    for (int j = 0; j < bm.cols; ++j) {
        n.val.at(0, j) = inv00 * bm.at(0, j) + inv01 * bm.at(1, j);
        n.val.at(1, j) = inv10 * bm.at(0, j) + inv11 * bm.at(1, j);
    }
    return {used_ - 1};
}

Value Tape::diag2(Value s) {
    check(s);
    const Tensor& ts = val(s.id);
    if (ts.size() != 2) {
        throw std::invalid_argument("diag2: expected 2 elements, got " + shape_str(ts));
    }
    Node& n = push(Op::Diag2, 2, 2);
    n.a = s.id;
    n.needs_grad = nodes_[s.id].needs_grad;
    n.val.fill(0.0);
    n.val.at(0, 0) = val(s.id).v[0];
    n.val.at(1, 1) = val(s.id).v[1];
    return {used_ - 1};
}

Value Tape::cross_entropy(Value probs, int target) {
    check(probs);
    const Tensor& tp = val(probs.id);
    if (tp.rows != 1 || target < 0 || target >= tp.cols) {
        throw std::invalid_argument("cross_entropy: target " + std::to_string(target) +
                                    " invalid for " + shape_str(tp));
    }
    Node& n = push(Op::CrossEntropy, 1, 1);
    n.a = probs.id;
    n.i0 = target;
    n.needs_grad = nodes_[probs.id].needs_grad;
    n.val.v[0] = -std::log(val(probs.id).at(0, target));
    return {used_ - 1};
}

Value Tape::squared_error(Value a, Value b) {
    check(a);
    check(b);
    const Tensor& ta = val(a.id);
    const Tensor& tb = val(b.id);
    if (ta.rows != tb.rows || ta.cols != tb.cols) shape_error("squared_error", ta, tb);
    Node& n = push(Op::SquaredError, 1, 1);
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = nodes_[a.id].needs_grad || nodes_[b.id].needs_grad;
    const Tensor& xa = val(a.id);
    const Tensor& xb = val(b.id);
    double s = 0.0;
    for (int i = 0; i < xa.size(); ++i) {
        const double d = xa.v[i] - xb.v[i];
        s += d * d;
    }
    n.val.v[0] = s;
    return {used_ - 1};
}

const Tensor& Tape::value(Value v) const {
    check(v);
    return nodes_[v.id].val;
}

const Tensor& Tape::grad(Value v) const {
    check(v);
    return nodes_[v.id].grad;
}

double Tape::scalar(Value v) const {
    check(v);
    if (nodes_[v.id].val.size() != 1) {
        throw std::invalid_argument("scalar: value is not 1x1");
    }
    return nodes_[v.id].val.v[0];
}

void Tape::reset() { used_ = 0; }

void Tape::backward(Value loss) {
    check(loss);
    if (nodes_[loss.id].val.size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar");
    }
    for (int i = 0; i <= loss.id; ++i) nodes_[i].grad.fill(0.0);
    nodes_[loss.id].grad.v[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        if (!nodes_[id].needs_grad || nodes_[id].op == Op::Leaf) continue;
        backward_node(id);
    }
}

void Tape::backward_node(int id) {
    Node& n = nodes_[id];
    const Tensor& G = n.grad;
    auto ga = [&]() -> Tensor& { return nodes_[n.a].grad; };
    auto gb = [&]() -> Tensor& { return nodes_[n.b].grad; };
    const bool need_a = n.a >= 0 && nodes_[n.a].needs_grad;
    const bool need_b = n.b >= 0 && nodes_[n.b].needs_grad;

    // Accumulate G into grad(b) respecting the broadcast kind, with sign.
    auto reduce_into_b = [&](double sign, const Tensor* factor) {
        Tensor& g = gb();
        const int kind = n.i0;
        for (int i = 0; i < G.rows; ++i) {
            for (int j = 0; j < G.cols; ++j) {
                const double f = factor ? factor->at(i, j) : 1.0;
                const double v = sign * G.at(i, j) * f;
                if (kind == 2) g.v[0] += v;
                else if (kind == 1) g.at(0, j) += v;
                else g.at(i, j) += v;
            }
        }
    };

    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Add: {
            if (need_a)
                for (int i = 0; i < G.size(); ++i) ga().v[i] += G.v[i];
            if (need_b) reduce_into_b(1.0, nullptr);
            break;
        }
        case Op::Sub: {
            if (need_a)
                for (int i = 0; i < G.size(); ++i) ga().v[i] += G.v[i];
            if (need_b) reduce_into_b(-1.0, nullptr);
            break;
        }
        case Op::Mul: {
            const Tensor& xa = nodes_[n.a].val;
            const Tensor& xb = nodes_[n.b].val;
            const int kind = n.i0;
            if (need_a) {
                Tensor& g = ga();
                for (int i = 0; i < G.rows; ++i) {
                    for (int j = 0; j < G.cols; ++j) {
                        const double bb = kind == 2 ? xb.v[0]
                                        : kind == 1 ? xb.at(0, j) : xb.at(i, j);
                        g.at(i, j) += G.at(i, j) * bb;
                    }
                }
            }
            if (need_b) reduce_into_b(1.0, &xa);
            break;
        }
        case Op::Div: {
            const Tensor& xa = nodes_[n.a].val;
            const Tensor& xb = nodes_[n.b].val;
            const int kind = n.i0;
            if (need_a) {
                Tensor& g = ga();
                for (int i = 0; i < G.rows; ++i) {
                    for (int j = 0; j < G.cols; ++j) {
                        const double bb = kind == 2 ? xb.v[0]
                                        : kind == 1 ? xb.at(0, j) : xb.at(i, j);
                        g.at(i, j) += G.at(i, j) / bb;
                    }
                }
            }
            if (need_b) {
                Tensor& g = gb();
                for (int i = 0; i < G.rows; ++i) {
                    for (int j = 0; j < G.cols; ++j) {
                        const double bb = kind == 2 ? xb.v[0]
                                        : kind == 1 ? xb.at(0, j) : xb.at(i, j);
                        const double v = -G.at(i, j) * xa.at(i, j) / (bb * bb);
                        if (kind == 2) g.v[0] += v;
                        else if (kind == 1) g.at(0, j) += v;
                        else g.at(i, j) += v;
                    }
                }
            }
            break;
        }
        case Op::AddScalar: {
            if (need_a)
                for (int i = 0; i < G.size(); ++i) ga().v[i] += G.v[i];
            break;
        }
        case Op::MulScalar: {
            if (need_a)
                for (int i = 0; i < G.size(); ++i) ga().v[i] += G.v[i] * n.d0;
            break;
        }
        case Op::MatMul: {
            const Tensor& xa = nodes_[n.a].val;
            const Tensor& xb = nodes_[n.b].val;
            if (need_a)  // dA += G B^T
                as_mat(ga()).noalias() += as_mat(G) * as_mat(xb).transpose();
            if (need_b)  // dB += A^T G
                as_mat(gb()).noalias() += as_mat(xa).transpose() * as_mat(G);
            break;
        }
        case Op::Transpose: {
            if (need_a) {
                Tensor& g = ga();
                for (int i = 0; i < G.rows; ++i)
                    for (int j = 0; j < G.cols; ++j) g.at(j, i) += G.at(i, j);
            }
            break;
        }
        case Op::Exp: {
            if (need_a)
                for (int i = 0; i < G.size(); ++i) ga().v[i] += G.v[i] * n.val.v[i];
            break;
        }
        case Op::Log: {
            if (need_a) {
                const Tensor& xa = nodes_[n.a].val;
                for (int i = 0; i < G.size(); ++i) ga().v[i] += G.v[i] / xa.v[i];
            }
            break;
        }
        case Op::Tanh: {
            if (need_a)
                for (int i = 0; i < G.size(); ++i)
                    ga().v[i] += G.v[i] * (1.0 - n.val.v[i] * n.val.v[i]);
            break;
        }
        case Op::Sigmoid: {
            if (need_a)
                for (int i = 0; i < G.size(); ++i)
                    ga().v[i] += G.v[i] * n.val.v[i] * (1.0 - n.val.v[i]);
            break;
        }
        case Op::Silu: {
            if (need_a) {
                const Tensor& xa = nodes_[n.a].val;
                for (int i = 0; i < G.size(); ++i) {
                    const double s = sigmoid_(xa.v[i]);
                    ga().v[i] += G.v[i] * s * (1.0 + xa.v[i] * (1.0 - s));
                }
            }
            break;
        }
        case Op::Clamp: {
            if (need_a) {
                const Tensor& xa = nodes_[n.a].val;
                for (int i = 0; i < G.size(); ++i) {
                    if (xa.v[i] > n.d0 && xa.v[i] < n.d1) ga().v[i] += G.v[i];
                }
            }
            break;
        }
        case Op::SoftmaxRows: {
            if (need_a) {
                Tensor& g = ga();
                for (int i = 0; i < G.rows; ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < G.cols; ++j) dot += G.at(i, j) * n.val.at(i, j);
                    for (int j = 0; j < G.cols; ++j) {
                        g.at(i, j) += (G.at(i, j) - dot) * n.val.at(i, j);
                    }
                }
            }
            break;
        }
        case Op::MeanRows: {
            if (need_a) {
                Tensor& g = ga();
                const double inv = 1.0 / g.rows;
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < g.cols; ++j) g.at(i, j) += G.at(0, j) * inv;
            }
            break;
        }
        case Op::MeanAll: {
            if (need_a) {
                Tensor& g = ga();
                const double inv = G.v[0] / g.size();
                for (int i = 0; i < g.size(); ++i) g.v[i] += inv;
            }
            break;
        }
        case Op::SumAll: {
            if (need_a) {
                Tensor& g = ga();
                for (int i = 0; i < g.size(); ++i) g.v[i] += G.v[0];
            }
            break;
        }
        case Op::ConcatCols: {
            const int ac = n.i0;
            if (need_a) {
                Tensor& g = ga();
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < ac; ++j) g.at(i, j) += G.at(i, j);
            }
            if (need_b) {
                Tensor& g = gb();
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < g.cols; ++j) g.at(i, j) += G.at(i, ac + j);
            }
            break;
        }
        case Op::ConcatRows: {
            const int ar = n.i0;
            if (need_a) {
                Tensor& g = ga();
                for (int i = 0; i < ar; ++i)
                    for (int j = 0; j < g.cols; ++j) g.at(i, j) += G.at(i, j);
            }
            if (need_b) {
                Tensor& g = gb();
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < g.cols; ++j) g.at(i, j) += G.at(ar + i, j);
            }
            break;
        }
        case Op::Slice: {
            if (need_a) {
                Tensor& g = ga();
                for (int i = n.i0; i < n.i1; ++i)
                    for (int j = n.i2; j < n.i3; ++j)
                        g.at(i, j) += G.at(i - n.i0, j - n.i2);
            }
            break;
        }
        case Op::RepeatRows: {
            if (need_a) {
                Tensor& g = ga();
                for (int i = 0; i < G.rows; ++i)
                    for (int j = 0; j < G.cols; ++j) g.at(0, j) += G.at(i, j);
            }
            break;
        }
        case Op::BatchNormTrain: {
            const Tensor& xx = nodes_[n.a].val;
            const Tensor& gam = nodes_[n.b].val;
            const int N = xx.rows, C = xx.cols;
            const bool need_g = nodes_[n.b].needs_grad;
            const bool need_beta = n.c >= 0 && nodes_[n.c].needs_grad;
            for (int j = 0; j < C; ++j) {
                const double mu = n.aux.at(0, j);
                const double var = n.aux.at(1, j);
                const double inv = 1.0 / std::sqrt(var + n.d0);
                double sum_g = 0.0, sum_gx = 0.0;
                for (int i = 0; i < N; ++i) {
                    const double xh = (xx.at(i, j) - mu) * inv;
                    sum_g += G.at(i, j);
                    sum_gx += G.at(i, j) * xh;
                }
                if (need_beta) nodes_[n.c].grad.v[j] += sum_g;
                if (need_g) nodes_[n.b].grad.v[j] += sum_gx;
                if (need_a) {
                    // dx = gamma*inv/N * (N*G - sum_g - xhat*sum_gx)
                    Tensor& g = ga();
                    const double k = gam.v[j] * inv / N;
                    for (int i = 0; i < N; ++i) {
                        const double xh = (xx.at(i, j) - mu) * inv;
                        g.at(i, j) += k * (N * G.at(i, j) - sum_g - xh * sum_gx);
                    }
                }
            }
            break;
        }
        case Op::BatchNormEval: {
            const Tensor& xx = nodes_[n.a].val;
            const Tensor& gam = nodes_[n.b].val;
            const int N = xx.rows, C = xx.cols;
            const bool need_g = nodes_[n.b].needs_grad;
            const bool need_beta = n.c >= 0 && nodes_[n.c].needs_grad;
            for (int j = 0; j < C; ++j) {
                const double mu = n.aux.at(0, j);
                const double inv = 1.0 / std::sqrt(n.aux.at(1, j) + n.d0);
                for (int i = 0; i < N; ++i) {
                    if (need_a) ga().at(i, j) += G.at(i, j) * gam.v[j] * inv;
                    if (need_g)
                        nodes_[n.b].grad.v[j] += G.at(i, j) * (xx.at(i, j) - mu) * inv;
                    if (need_beta) nodes_[n.c].grad.v[j] += G.at(i, j);
                }
            }
            break;
        }
        case Op::Solve2x2: {
            const Tensor& s = nodes_[n.a].val;
            const double det = s.at(0, 0) * s.at(1, 1) - s.at(0, 1) * s.at(1, 0);
            const double inv00 = s.at(1, 1) / det, inv01 = -s.at(1, 0) / det;
            const double inv10 = -s.at(0, 1) / det, inv11 = s.at(0, 0) / det;
            // Rows of S^-T applied to G: dB = S^-T G.
            const int m = G.cols;
            Tensor dB(2, m);
            for (int j = 0; j < m; ++j) {
                dB.at(0, j) = inv00 * G.at(0, j) + inv01 * G.at(1, j);
                dB.at(1, j) = inv10 * G.at(0, j) + inv11 * G.at(1, j);
            }
            if (need_b) {
                Tensor& g = gb();
                for (int i = 0; i < dB.size(); ++i) g.v[i] += dB.v[i];
            }
            if (nodes_[n.a].needs_grad) {
                // dS = -dB X^T
                Tensor& g = ga();
                for (int r = 0; r < 2; ++r) {
                    for (int c = 0; c < 2; ++c) {
                        double acc = 0.0;
                        for (int j = 0; j < m; ++j) acc += dB.at(r, j) * n.val.at(c, j);
                        g.at(r, c) -= acc;
                    }
                }
            }
            break;
        }
        case Op::Diag2: {
            if (need_a) {
                ga().v[0] += G.at(0, 0);
                ga().v[1] += G.at(1, 1);
            }
            break;
        }
        case Op::CrossEntropy: {
            if (need_a) {
                const Tensor& p = nodes_[n.a].val;
                ga().at(0, n.i0) -= G.v[0] / p.at(0, n.i0);
            }
            break;
        }
        case Op::SquaredError: {
            const Tensor& xa = nodes_[n.a].val;
            const Tensor& xb = nodes_[n.b].val;
            for (int i = 0; i < xa.size(); ++i) {
                const double d = 2.0 * (xa.v[i] - xb.v[i]) * G.v[0];
                if (need_a) ga().v[i] += d;
                if (need_b) gb().v[i] -= d;
            }
            break;
        }
    }
}

void adam_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
               AdamState& state, const AdamConfig& cfg) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("adam_step: params/grads size mismatch");
    }
    if (state.slots.size() < params.size()) state.slots.resize(params.size());
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& w = *params[p];
        const Tensor& g = *grads[p];
        if (w.rows != g.rows || w.cols != g.cols) {
            throw std::invalid_argument("adam_step: parameter/gradient shape mismatch");
        }
        AdamSlot& slot = state.slots[p];
        if (slot.m.size() != w.size()) {
            slot.m.resize(w.rows, w.cols);
            slot.v.resize(w.rows, w.cols);
        }
        for (int i = 0; i < w.size(); ++i) {
            const double gi =
                cfg.decoupled_decay ? g.v[i] : g.v[i] + cfg.weight_decay * w.v[i];
            slot.m.v[i] = cfg.beta1 * slot.m.v[i] + (1.0 - cfg.beta1) * gi;
            slot.v.v[i] = cfg.beta2 * slot.v.v[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = slot.m.v[i] / bc1;
            const double vhat = slot.v.v[i] / bc2;
            double step = cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            if (cfg.decoupled_decay) step += cfg.lr * cfg.weight_decay * w.v[i];
            w.v[i] -= step;
        }
    }
}

}  // namespace roadkf::ad
