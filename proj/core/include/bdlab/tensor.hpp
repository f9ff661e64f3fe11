#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bdlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind {
    leaf,
    matmul,
    add,
    sub,
    mul,
    scale,
    add_scalar,
    add_bias,
    conv2d,
    relu,
    sigmoid,
    tanh,
    max_pool,
    avg_pool,
    reshape,
    select_channel,
    concat_rows,
    stamp,
    sum,
    mean,
    square,
    softmax_cross_entropy,
    bce_with_logits,
};

const char* op_name(OpKind op);

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty == absent
    bool requires_grad = false;
    OpKind op = OpKind::leaf;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs that require grad.
    std::function<void(Node&)> backward;
};

} // namespace detail

// Reference-counted handle onto a graph node. Copies alias the same storage;
// use detach() for an independent value.
//
// The scalar type is a template parameter only so that gradient checks can run
// the exact same op code in double precision. Everything else uses Tensor.
template <typename T>
class BasicTensor {
public:
    using value_type = T;
    using NodeT = detail::Node<T>;

    BasicTensor() = default;
    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);
    explicit BasicTensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

    static BasicTensor zeros(Shape shape, bool requires_grad = false);
    static BasicTensor full(Shape shape, T value, bool requires_grad = false);
    static BasicTensor scalar(T value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t i) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const T> data() const;
    // Writable view; meant for leaves (optimizer updates, projections, clamps).
    std::span<T> mutable_data();
    T item() const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const T> grad() const;
    void zero_grad();
    void clear_grad();

    bool is_leaf() const;
    OpKind op() const;

    // New leaf with copied storage and no history.
    BasicTensor detach() const;

    const std::shared_ptr<NodeT>& node() const { return node_; }

private:
    std::shared_ptr<NodeT> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <typename To, typename From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& x, bool requires_grad = false);

// Topologically ordered record of the graph reachable from a root.
template <typename T>
class BasicTape {
public:
    struct Record {
        OpKind op;
        std::vector<std::size_t> inputs; // indices into records()
        std::size_t output;
    };

    static BasicTape record(const BasicTensor<T>& root);

    const std::vector<Record>& records() const { return records_; }
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(root)/d(root) = 1, clears stale interior gradients, then runs
    // every recorded backward exactly once in reverse topological order.
    void run_backward();

private:
    std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
    std::vector<Record> records_;
};

using Tape = BasicTape<float>;

// While alive, ops on this thread record no graph (inference, metric passes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Populates grad() on every requires_grad leaf reachable from loss. Leaf
// gradients accumulate across calls; call zero_grad() to reset.
template <typename T>
void backward(const BasicTensor<T>& loss);

enum class Activation { relu, sigmoid, tanh };

template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value);
// x: [B x N] with bias [N], or [B x C x H x W] with bias [C].
template <typename T> BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias);
// x: [C x H x W] or [B x C x H x W]; kernel: [Cout x Cin x kh x kw].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernel, std::size_t stride,
                      std::size_t padding);
template <typename T> BasicTensor<T> activation(const BasicTensor<T>& x, Activation kind);
template <typename T> BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> tanh(const BasicTensor<T>& x);
// Non-overlapping window pooling over the last two dims of [B x C x H x W].
template <typename T> BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t window);
template <typename T> BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t window);
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
// [B x ...] -> [B x prod(...)]
template <typename T> BasicTensor<T> flatten(const BasicTensor<T>& x);
// Slice index c of dim 1: [B x N] -> [B], [B x C x H x W] -> [B x H x W].
template <typename T> BasicTensor<T> select_channel(const BasicTensor<T>& x, std::size_t channel);
// Stacks [1 x ...] or [r_i x ...] tensors with equal trailing dims along dim 0.
template <typename T> BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& rows);
// (1 - mask) * x + mask * pattern, with mask [H x W] shared by every channel
// and pattern [C x H x W] shared by every batch item. x: [B x C x H x W].
template <typename T>
BasicTensor<T> stamp(const BasicTensor<T>& x, const BasicTensor<T>& mask, const BasicTensor<T>& pattern);
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> square(const BasicTensor<T>& x);
// Mean over the batch of -log softmax(logits)[label]; logits [B x C].
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);
// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, std::span<const T> targets);

// Row-wise max-subtracted softmax of a [rows x cols] buffer; no graph.
template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t cols);

struct GradcheckResult {
    // max_i |numeric_i - analytic_i| / max(|numeric_i|, |analytic_i|, floor)
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::vector<double> analytic;
    std::vector<double> numeric;
};

// Central differences (f(x+h) - f(x-h)) / 2h per coordinate of x, compared
// against backward(). f must be scalar-valued; x is not modified.
template <typename T>
GradcheckResult finite_diff_gradcheck(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
                                      const BasicTensor<T>& x, double step);

} // namespace bdlab
