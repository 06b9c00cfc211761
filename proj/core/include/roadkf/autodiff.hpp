#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

// Reverse-mode autodiff over dense 2-D f64 tensors. Define-by-run: a Tape is
// rebuilt every step; reset() keeps node storage so buffers are reused across
// iterations. Single-threaded per tape; summation order is fixed so results
// are bit-reproducible.

namespace roadkf::ad {

struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
    Tensor(int r, int c, std::vector<double> data);

    double& at(int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; }
    double at(int i, int j) const { return v[static_cast<std::size_t>(i) * cols + j]; }
    int size() const { return rows * cols; }
    void fill(double x) { std::fill(v.begin(), v.end(), x); }
    void resize(int r, int c);
};

/// Handle to a node on a tape.
struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
  public:
    /// Leaf with gradient tracking (parameters, differentiable inputs).
    Value input(const Tensor& t);
    /// Leaf excluded from gradient accumulation.
    Value constant(const Tensor& t);
    Value constant_scalar(double x);

    // Elementwise arithmetic. The second operand may be same-shape, a [1,C]
    // row broadcast over rows, or a [1,1] scalar.
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value div(Value a, Value b);
    Value add_scalar(Value a, double c);
    Value mul_scalar(Value a, double c);

    Value matmul(Value a, Value b);
    Value transpose(Value a);

    Value exp(Value a);
    Value log(Value a);
    Value tanh(Value a);
    Value sigmoid(Value a);
    Value silu(Value a);
    Value clamp(Value a, double lo, double hi);  // zero gradient outside

    Value softmax_rows(Value a);
    Value mean_rows(Value a);  // [N,C] -> [1,C]
    Value mean_all(Value a);   // [N,C] -> [1,1]
    Value sum_all(Value a);    // [N,C] -> [1,1]

    Value concat_cols(Value a, Value b);
    Value concat_rows(Value a, Value b);
    Value slice(Value a, int r0, int r1, int c0, int c1);  // half-open
    Value repeat_rows(Value a, int n);  // [1,C] -> [n,C]

    /// Batch normalization over rows (per-column statistics). In train mode
    /// the running statistics are updated in place with the given momentum;
    /// in eval mode they are read only.
    Value batchnorm(Value x, Value gamma, Value beta, Tensor* running_mean,
                    Tensor* running_var, bool train, double momentum = 0.1,
                    double eps = 1e-5);

    /// X = S^-1 B for a 2x2 S and [2,n] B.
    Value solve2x2(Value S, Value B);
    /// [1,2] (or [2,1]) vector -> [2,2] diagonal matrix.
    Value diag2(Value s);

    /// -log(p[target]) for a [1,N] probability row.
    Value cross_entropy(Value probs, int target);
    /// Sum of squared differences, scalar output.
    Value squared_error(Value a, Value b);

    /// Reverse sweep from a scalar loss; gradients accumulate additively
    /// into every tracked node. Throws if loss is not scalar.
    void backward(Value loss);

    const Tensor& value(Value v) const;
    const Tensor& grad(Value v) const;
    double scalar(Value v) const;

    /// Drop all nodes but keep their buffers for reuse.
    void reset();
    int size() const { return used_; }

  private:
    enum class Op : std::uint8_t {
        Leaf, MatMul, Add, Sub, Mul, Div, Exp, Log, Tanh, Sigmoid, Silu,
        Clamp, SoftmaxRows, MeanRows, MeanAll, SumAll, ConcatCols, ConcatRows,
        Slice, Transpose, RepeatRows, BatchNormTrain, BatchNormEval, Solve2x2,
        Diag2, CrossEntropy, SquaredError, AddScalar, MulScalar,
    };

    struct Node {
        Tensor val;
        Tensor grad;
        Tensor aux;  // op-specific saved forward state
        Op op = Op::Leaf;
        int a = -1;
        int b = -1;
        int c = -1;  // third operand (batchnorm beta)
        int i0 = 0, i1 = 0, i2 = 0, i3 = 0;
        double d0 = 0.0, d1 = 0.0;
        bool needs_grad = false;
    };

    Node& push(Op op, int rows, int cols);
    Tensor& val(int id) { return nodes_[id].val; }
    const Tensor& val(int id) const { return nodes_[id].val; }
    void check(Value v) const;
    void backward_node(int id);

    std::vector<Node> nodes_;
    int used_ = 0;
};

struct AdamConfig {
    double lr = 0.001;
    double weight_decay = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool decoupled_decay = true;  // decay applied to weights directly
};

/// Optimizer state for one parameter tensor.
struct AdamSlot {
    Tensor m;
    Tensor v;
};

struct AdamState {
    std::vector<AdamSlot> slots;
    long long t = 0;
};

/// One Adam step over a parameter set. Gradients are consumed as given;
/// state slots are created on first use.
void adam_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
               AdamState& state, const AdamConfig& cfg = {});

}  // namespace roadkf::ad
