#include "bdlab/tensor.hpp"

#include "bdlab/errors.hpp"
#include "gemm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace bdlab {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << " x ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

const char* op_name(OpKind op) {
    switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::add_bias: return "add_bias";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::max_pool: return "max_pool";
    case OpKind::avg_pool: return "avg_pool";
    case OpKind::reshape: return "reshape";
    case OpKind::select_channel: return "select_channel";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::stamp: return "stamp";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::square: return "square";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::bce_with_logits: return "bce_with_logits";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad) {
    for (std::size_t e : shape) {
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    }
    node_ = std::make_shared<NodeT>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
    return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->shape;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t i) const {
    const Shape& s = shape();
    if (i >= s.size()) throw IndexError("dimension " + std::to_string(i) + " out of range for " + shape_str(s));
    return s[i];
}

template <typename T>
std::size_t BasicTensor<T>::numel() const {
    return shape_numel(shape());
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->data;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->data;
}

template <typename T>
T BasicTensor<T>::item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
    return node_ && node_->requires_grad;
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool on) {
    if (!node_) throw ContractError("use of undefined tensor");
    if (node_->op != OpKind::leaf) throw ContractError("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
    return node_ && !node_->grad.empty();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return node_->grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void BasicTensor<T>::clear_grad() {
    if (node_) node_->grad.clear();
}

template <typename T>
bool BasicTensor<T>::is_leaf() const {
    return node_ && node_->op == OpKind::leaf;
}

template <typename T>
OpKind BasicTensor<T>::op() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_->op;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return BasicTensor(shape(), node_->data, false);
}

template <typename To, typename From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& x, bool requires_grad) {
    std::vector<To> out(x.data().begin(), x.data().end());
    return BasicTensor<To>(x.shape(), std::move(out), requires_grad);
}

// ---------------------------------------------------------------------------
// Grad mode

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
    g_grad_enabled = previous_;
}

bool grad_enabled() {
    return g_grad_enabled;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
BasicTape<T> BasicTape<T>::record(const BasicTensor<T>& root) {
    using NodeT = detail::Node<T>;
    BasicTape tape;
    std::unordered_map<const NodeT*, std::size_t> index;
    // Iterative post-order DFS; each node is appended after all its inputs.
    std::vector<std::pair<std::shared_ptr<NodeT>, std::size_t>> stack;
    std::unordered_map<const NodeT*, bool> visiting;
    stack.emplace_back(root.node(), 0);
    visiting[root.node().get()] = true;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            const auto& child = node->inputs[next++];
            if (!child->requires_grad) continue;
            if (index.count(child.get()) || visiting.count(child.get())) continue;
            visiting[child.get()] = true;
            stack.emplace_back(child, 0);
            continue;
        }
        Record rec{node->op, {}, tape.nodes_.size()};
        for (const auto& in : node->inputs) {
            auto it = index.find(in.get());
            if (it != index.end()) rec.inputs.push_back(it->second);
        }
        index[node.get()] = tape.nodes_.size();
        tape.nodes_.push_back(node);
        tape.records_.push_back(std::move(rec));
        stack.pop_back();
    }
    return tape;
}

template <typename T>
void BasicTape<T>::run_backward() {
    if (nodes_.empty()) return;
    for (auto& node : nodes_) {
        if (node->op != OpKind::leaf) node->grad.assign(node->data.size(), T(0));
        else if (node->grad.size() != node->data.size()) node->grad.assign(node->data.size(), T(0));
    }
    auto& root = nodes_.back();
    root->grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
    // Interior buffers are scratch space; only leaves keep gradients.
    for (auto& node : nodes_) {
        if (node->op != OpKind::leaf) {
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
    if (!loss.defined()) throw ContractError("backward on undefined tensor");
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    auto tape = BasicTape<T>::record(loss);
    tape.run_backward();
}

// ---------------------------------------------------------------------------
// Op helpers

namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
BasicTensor<T> make_result(OpKind op, Shape shape, std::vector<T> data,
                           std::vector<NodePtr<T>> inputs,
                           std::function<void(detail::Node<T>&)> bw) {
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs = false;
    if (grad_enabled())
        for (const auto& in : inputs) needs = needs || in->requires_grad;
    node->requires_grad = needs;
    if (needs) {
        node->inputs = std::move(inputs);
        node->backward = std::move(bw);
    }
    return BasicTensor<T>(std::move(node));
}

template <typename T>
std::vector<T>& grad_buffer(detail::Node<T>& n) {
    if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), T(0));
    return n.grad;
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<T> out(m * n);
    detail::gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
    auto an = a.node(), bn = b.node();
    return make_result<T>(OpKind::matmul, {m, n}, std::move(out), {an, bn}, [an, bn, m, n, k](detail::Node<T>& self) {
        if (an->requires_grad) {
            // dA = dC * B^T
            detail::gemm<T>(false, true, m, k, n, self.grad.data(), bn->data.data(), grad_buffer(*an).data(), true);
        }
        if (bn->requires_grad) {
            // dB = A^T * dC
            detail::gemm<T>(true, false, k, n, m, an->data.data(), self.grad.data(), grad_buffer(*bn).data(), true);
        }
    });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(OpKind::add, a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& self) {
        for (auto* in : {an.get(), bn.get()}) {
            if (!in->requires_grad) continue;
            auto& g = grad_buffer(*in);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    std::vector<T> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(OpKind::sub, a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& self) {
        if (an->requires_grad) {
            auto& g = grad_buffer(*an);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = grad_buffer(*bn);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    std::vector<T> out(a.numel());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(OpKind::mul, a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& self) {
        if (an->requires_grad) {
            auto& g = grad_buffer(*an);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            auto& g = grad_buffer(*bn);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
        }
    });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= factor;
    auto an = a.node();
    return make_result<T>(OpKind::scale, a.shape(), std::move(out), {an}, [an, factor](detail::Node<T>& self) {
        auto& g = grad_buffer(*an);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v += value;
    auto an = a.node();
    return make_result<T>(OpKind::add_scalar, a.shape(), std::move(out), {an}, [an](detail::Node<T>& self) {
        auto& g = grad_buffer(*an);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
    if (bias.rank() != 1) throw DimensionError("bias must be rank 1, got " + shape_str(bias.shape()));
    std::size_t outer = 0, channels = 0, inner = 0;
    if (x.rank() == 2) {
        outer = x.dim(0);
        channels = x.dim(1);
        inner = 1;
    } else if (x.rank() == 4) {
        outer = x.dim(0);
        channels = x.dim(1);
        inner = x.dim(2) * x.dim(3);
    } else {
        throw DimensionError("add_bias expects [B x N] or [B x C x H x W], got " + shape_str(x.shape()));
    }
    if (bias.dim(0) != channels) {
        throw DimensionError("bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    auto bd = bias.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < channels; ++c) {
            T* row = out.data() + (o * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) row[i] += bd[c];
        }
    auto xn = x.node(), bn = bias.node();
    return make_result<T>(OpKind::add_bias, x.shape(), std::move(out), {xn, bn},
                          [xn, bn, outer, channels, inner](detail::Node<T>& self) {
                              if (xn->requires_grad) {
                                  auto& g = grad_buffer(*xn);
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                              }
                              if (bn->requires_grad) {
                                  auto& g = grad_buffer(*bn);
                                  for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t c = 0; c < channels; ++c) {
                                          const T* row = self.grad.data() + (o * channels + c) * inner;
                                          T acc = 0;
                                          for (std::size_t i = 0; i < inner; ++i) acc += row[i];
                                          g[c] += acc;
                                      }
                              }
                          });
}

// ---------------------------------------------------------------------------
// Convolution (im2col + gemm)

namespace {

struct ConvGeometry {
    std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
    std::size_t col_rows() const { return cin * kh * kw; }
    std::size_t col_cols() const { return oh * ow; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                T* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.col_cols();
                for (std::size_t oi = 0; oi < g.oh; ++oi) {
                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t oj = 0; oj < g.ow; ++oj) {
                        const std::ptrdiff_t jj =
                            static_cast<std::ptrdiff_t>(oj * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<std::ptrdiff_t>(g.h) &&
                                            jj < static_cast<std::ptrdiff_t>(g.w);
                        row[oi * g.ow + oj] = inside ? img[(c * g.h + ii) * g.w + jj] : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.col_cols();
                for (std::size_t oi = 0; oi < g.oh; ++oi) {
                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    for (std::size_t oj = 0; oj < g.ow; ++oj) {
                        const std::ptrdiff_t jj =
                            static_cast<std::ptrdiff_t>(oj * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        img[(c * g.h + ii) * g.w + jj] += row[oi * g.ow + oj];
                    }
                }
            }
}

} // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x_in, const BasicTensor<T>& kernel, std::size_t stride,
                      std::size_t padding) {
    const bool unbatched = x_in.rank() == 3;
    if (!unbatched && x_in.rank() != 4) {
        throw DimensionError("conv2d expects [C x H x W] or [B x C x H x W], got " + shape_str(x_in.shape()));
    }
    if (kernel.rank() != 4) throw DimensionError("conv2d kernel must be [Cout x Cin x kh x kw]");
    if (stride == 0) throw ConfigError("conv2d stride must be positive");
    const BasicTensor<T> x = unbatched ? reshape(x_in, {1, x_in.dim(0), x_in.dim(1), x_in.dim(2)}) : x_in;
    ConvGeometry g{};
    g.batch = x.dim(0);
    g.cin = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.cout = kernel.dim(0);
    g.kh = kernel.dim(2);
    g.kw = kernel.dim(3);
    g.stride = stride;
    g.pad = padding;
    if (kernel.dim(1) != g.cin) {
        throw DimensionError("conv2d kernel " + shape_str(kernel.shape()) + " does not match input " +
                             shape_str(x.shape()));
    }
    const std::size_t span_h = g.h + 2 * g.pad, span_w = g.w + 2 * g.pad;
    if (span_h < g.kh || span_w < g.kw || (span_h - g.kh) % stride != 0 || (span_w - g.kw) % stride != 0) {
        throw ConfigError("conv2d output extent is not integral for input " + shape_str(x.shape()) + ", kernel " +
                          shape_str(kernel.shape()) + ", stride " + std::to_string(stride) + ", padding " +
                          std::to_string(padding));
    }
    g.oh = (span_h - g.kh) / stride + 1;
    g.ow = (span_w - g.kw) / stride + 1;

    const std::size_t in_sz = g.cin * g.h * g.w;
    const std::size_t col_sz = g.col_rows() * g.col_cols();
    const std::size_t out_sz = g.cout * g.col_cols();
    auto cols = std::make_shared<std::vector<T>>(g.batch * col_sz);
    std::vector<T> out(g.batch * out_sz);
    const T* xd = x.data().data();
    const T* kd = kernel.data().data();
    for (std::size_t b = 0; b < g.batch; ++b) {
        T* cb = cols->data() + b * col_sz;
        im2col(xd + b * in_sz, g, cb);
        detail::gemm<T>(false, false, g.cout, g.col_cols(), g.col_rows(), kd, cb, out.data() + b * out_sz, false);
    }
    auto xn = x.node(), kn = kernel.node();
    Shape out_shape = unbatched ? Shape{g.cout, g.oh, g.ow} : Shape{g.batch, g.cout, g.oh, g.ow};
    if (!xn->requires_grad && !kn->requires_grad) cols.reset();
    return make_result<T>(OpKind::conv2d, std::move(out_shape), std::move(out), {xn, kn},
                          [xn, kn, g, cols, in_sz, col_sz, out_sz](detail::Node<T>& self) {
                              std::vector<T> dcols(col_sz);
                              for (std::size_t b = 0; b < g.batch; ++b) {
                                  const T* gy = self.grad.data() + b * out_sz;
                                  if (kn->requires_grad) {
                                      detail::gemm<T>(false, true, g.cout, g.col_rows(), g.col_cols(), gy,
                                                      cols->data() + b * col_sz, grad_buffer(*kn).data(), true);
                                  }
                                  if (xn->requires_grad) {
                                      detail::gemm<T>(true, false, g.col_rows(), g.col_cols(), g.cout, kn->data.data(),
                                                      gy, dcols.data(), false);
                                      col2im_add(dcols.data(), g, grad_buffer(*xn).data() + b * in_sz);
                                  }
                              }
                          });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    auto xn = x.node();
    return make_result<T>(OpKind::relu, x.shape(), std::move(out), {xn}, [xn](detail::Node<T>& self) {
        auto& g = grad_buffer(*xn);
        // Subgradient at 0 is 0.
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xn->data[i] > T(0)) g[i] += self.grad[i];
    });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
    std::vector<T> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = xd[i];
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    auto xn = x.node();
    return make_result<T>(OpKind::sigmoid, x.shape(), std::move(out), {xn}, [xn](detail::Node<T>& self) {
        auto& g = grad_buffer(*xn);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = self.data[i];
            g[i] += self.grad[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
    std::vector<T> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xd[i]);
    auto xn = x.node();
    return make_result<T>(OpKind::tanh, x.shape(), std::move(out), {xn}, [xn](detail::Node<T>& self) {
        auto& g = grad_buffer(*xn);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T t = self.data[i];
            g[i] += self.grad[i] * (T(1) - t * t);
        }
    });
}

template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& x, Activation kind) {
    switch (kind) {
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
    }
    throw ConfigError("unknown activation");
}

// ---------------------------------------------------------------------------
// Pooling

namespace {

void check_pool(const Shape& s, std::size_t window, const char* op) {
    if (s.size() != 4) throw DimensionError(std::string(op) + " expects [B x C x H x W], got " + shape_str(s));
    if (window == 0 || s[2] % window != 0 || s[3] % window != 0) {
        throw ConfigError(std::string(op) + ": window " + std::to_string(window) + " does not tile " + shape_str(s));
    }
}

} // namespace

template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t window) {
    check_pool(x.shape(), window, "max_pool2d");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h / window, ow = w / window;
    std::vector<T> out(planes * oh * ow);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    auto xd = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = p * h * w + (i * window) * w + j * window;
                for (std::size_t a = 0; a < window; ++a)
                    for (std::size_t b = 0; b < window; ++b) {
                        const std::size_t idx = p * h * w + (i * window + a) * w + j * window + b;
                        if (xd[idx] > xd[best]) best = idx;
                    }
                const std::size_t o = (p * oh + i) * ow + j;
                out[o] = xd[best];
                (*argmax)[o] = best;
            }
    auto xn = x.node();
    return make_result<T>(OpKind::max_pool, {x.dim(0), x.dim(1), oh, ow}, std::move(out), {xn},
                          [xn, argmax](detail::Node<T>& self) {
                              auto& g = grad_buffer(*xn);
                              for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*argmax)[o]] += self.grad[o];
                          });
}

template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t window) {
    check_pool(x.shape(), window, "avg_pool2d");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = h / window, ow = w / window;
    const T inv = T(1) / static_cast<T>(window * window);
    std::vector<T> out(planes * oh * ow, T(0));
    auto xd = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                T acc = 0;
                for (std::size_t a = 0; a < window; ++a)
                    for (std::size_t b = 0; b < window; ++b) acc += xd[p * h * w + (i * window + a) * w + j * window + b];
                out[(p * oh + i) * ow + j] = acc * inv;
            }
    auto xn = x.node();
    return make_result<T>(OpKind::avg_pool, {x.dim(0), x.dim(1), oh, ow}, std::move(out), {xn},
                          [xn, planes, h, w, oh, ow, window, inv](detail::Node<T>& self) {
                              auto& g = grad_buffer(*xn);
                              for (std::size_t p = 0; p < planes; ++p)
                                  for (std::size_t i = 0; i < oh; ++i)
                                      for (std::size_t j = 0; j < ow; ++j) {
                                          const T v = self.grad[(p * oh + i) * ow + j] * inv;
                                          for (std::size_t a = 0; a < window; ++a)
                                              for (std::size_t b = 0; b < window; ++b)
                                                  g[p * h * w + (i * window + a) * w + j * window + b] += v;
                                      }
                          });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    auto xn = x.node();
    return make_result<T>(OpKind::reshape, std::move(shape), std::move(out), {xn}, [xn](detail::Node<T>& self) {
        auto& g = grad_buffer(*xn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
    if (x.rank() < 2) throw DimensionError("flatten expects a batch dimension, got " + shape_str(x.shape()));
    return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

template <typename T>
BasicTensor<T> select_channel(const BasicTensor<T>& x, std::size_t channel) {
    if (x.rank() < 2) throw DimensionError("select_channel expects rank >= 2, got " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), channels = x.dim(1);
    if (channel >= channels) {
        throw IndexError("channel " + std::to_string(channel) + " out of range for " + shape_str(x.shape()));
    }
    const std::size_t inner = x.numel() / (batch * channels);
    Shape out_shape{batch};
    for (std::size_t i = 2; i < x.rank(); ++i) out_shape.push_back(x.dim(i));
    std::vector<T> out(batch * inner);
    auto xd = x.data();
    for (std::size_t b = 0; b < batch; ++b)
        std::copy_n(xd.data() + (b * channels + channel) * inner, inner, out.data() + b * inner);
    auto xn = x.node();
    return make_result<T>(OpKind::select_channel, std::move(out_shape), std::move(out), {xn},
                          [xn, batch, channels, inner, channel](detail::Node<T>& self) {
                              auto& g = grad_buffer(*xn);
                              for (std::size_t b = 0; b < batch; ++b)
                                  for (std::size_t i = 0; i < inner; ++i)
                                      g[(b * channels + channel) * inner + i] += self.grad[b * inner + i];
                          });
}

template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& rows) {
    if (rows.empty()) throw ContractError("concat_rows needs at least one tensor");
    Shape tail(rows.front().shape().begin() + 1, rows.front().shape().end());
    std::size_t total = 0;
    std::vector<NodePtr<T>> inputs;
    for (const auto& r : rows) {
        Shape t(r.shape().begin() + 1, r.shape().end());
        if (t != tail) throw DimensionError("concat_rows trailing shape mismatch: " + shape_str(r.shape()));
        total += r.dim(0);
        inputs.push_back(r.node());
    }
    Shape out_shape{total};
    out_shape.insert(out_shape.end(), tail.begin(), tail.end());
    std::vector<T> out;
    out.reserve(shape_numel(out_shape));
    for (const auto& r : rows) out.insert(out.end(), r.data().begin(), r.data().end());
    auto captured = inputs;
    return make_result<T>(OpKind::concat_rows, std::move(out_shape), std::move(out), std::move(inputs),
                          [captured](detail::Node<T>& self) {
                              std::size_t offset = 0;
                              for (const auto& in : captured) {
                                  const std::size_t n = in->data.size();
                                  if (in->requires_grad) {
                                      auto& g = grad_buffer(*in);
                                      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
                                  }
                                  offset += n;
                              }
                          });
}

template <typename T>
BasicTensor<T> stamp(const BasicTensor<T>& x, const BasicTensor<T>& mask, const BasicTensor<T>& pattern) {
    if (x.rank() != 4) throw DimensionError("stamp expects [B x C x H x W] input, got " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (mask.shape() != Shape{h, w}) {
        throw DimensionError("stamp mask " + shape_str(mask.shape()) + " must be [" + std::to_string(h) + " x " +
                             std::to_string(w) + "]");
    }
    if (pattern.shape() != Shape{channels, h, w}) {
        throw DimensionError("stamp pattern " + shape_str(pattern.shape()) + " does not match input " +
                             shape_str(x.shape()));
    }
    const std::size_t plane = h * w;
    std::vector<T> out(x.numel());
    auto xd = x.data(), md = mask.data(), pd = pattern.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t idx = (b * channels + c) * plane + i;
                out[idx] = (T(1) - md[i]) * xd[idx] + md[i] * pd[c * plane + i];
            }
    auto xn = x.node(), mn = mask.node(), pn = pattern.node();
    return make_result<T>(OpKind::stamp, x.shape(), std::move(out), {xn, mn, pn},
                          [xn, mn, pn, batch, channels, plane](detail::Node<T>& self) {
                              for (std::size_t b = 0; b < batch; ++b)
                                  for (std::size_t c = 0; c < channels; ++c)
                                      for (std::size_t i = 0; i < plane; ++i) {
                                          const std::size_t idx = (b * channels + c) * plane + i;
                                          const T gy = self.grad[idx];
                                          const T m = mn->data[i];
                                          if (xn->requires_grad) grad_buffer(*xn)[idx] += gy * (T(1) - m);
                                          if (mn->requires_grad)
                                              grad_buffer(*mn)[i] += gy * (pn->data[c * plane + i] - xn->data[idx]);
                                          if (pn->requires_grad) grad_buffer(*pn)[c * plane + i] += gy * m;
                                      }
                          });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    auto xn = x.node();
    return make_result<T>(OpKind::sum, {1}, {acc}, {xn}, [xn](detail::Node<T>& self) {
        auto& g = grad_buffer(*xn);
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    const T inv = T(1) / static_cast<T>(x.numel());
    auto xn = x.node();
    return make_result<T>(OpKind::mean, {1}, {acc * inv}, {xn}, [xn, inv](detail::Node<T>& self) {
        auto& g = grad_buffer(*xn);
        for (auto& v : g) v += self.grad[0] * inv;
    });
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& x) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= v;
    auto xn = x.node();
    return make_result<T>(OpKind::square, x.shape(), std::move(out), {xn}, [xn](detail::Node<T>& self) {
        auto& g = grad_buffer(*xn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * T(2) * xn->data[i];
    });
}

template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t cols) {
    if (cols == 0 || logits.size() % cols != 0) throw DimensionError("softmax_rows: ragged input");
    std::vector<T> out(logits.size());
    for (std::size_t r = 0; r < logits.size() / cols; ++r) {
        const T* row = logits.data() + r * cols;
        T* dst = out.data() + r * cols;
        const T mx = *std::max_element(row, row + cols);
        T total = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            dst[c] = std::exp(row[c] - mx);
            total += dst[c];
        }
        for (std::size_t c = 0; c < cols; ++c) dst[c] /= total;
    }
    return out;
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw DimensionError("softmax_cross_entropy expects [B x C], got " + shape_str(logits.shape()));
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != batch) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                             std::to_string(batch));
    }
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= classes) {
            throw IndexError("label " + std::to_string(l) + " out of range [0, " + std::to_string(classes) + ")");
        }
    }
    auto ld = logits.data();
    auto probs = std::make_shared<std::vector<T>>(softmax_rows<T>(ld, classes));
    T total = 0;
    for (std::size_t b = 0; b < batch; ++b) {
        const T* row = ld.data() + b * classes;
        const T mx = *std::max_element(row, row + classes);
        T z = 0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
        total += std::log(z) + mx - row[labels[b]];
    }
    const T inv = T(1) / static_cast<T>(batch);
    std::vector<int> lab(labels.begin(), labels.end());
    auto ln = logits.node();
    return make_result<T>(OpKind::softmax_cross_entropy, {1}, {total * inv}, {ln},
                          [ln, probs, lab = std::move(lab), batch, classes, inv](detail::Node<T>& self) {
                              auto& g = grad_buffer(*ln);
                              const T up = self.grad[0] * inv;
                              for (std::size_t b = 0; b < batch; ++b)
                                  for (std::size_t c = 0; c < classes; ++c) {
                                      const T onehot = static_cast<int>(c) == lab[b] ? T(1) : T(0);
                                      g[b * classes + c] += up * ((*probs)[b * classes + c] - onehot);
                                  }
                          });
}

template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, std::span<const T> targets) {
    const std::size_t n = logits.numel();
    if (targets.size() != n) {
        throw DimensionError("bce_with_logits: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(n) + " logits");
    }
    auto zd = logits.data();
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T z = zd[i];
        // log(1 + e^z) - y z, written to avoid overflow.
        total += std::max(z, T(0)) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    const T inv = T(1) / static_cast<T>(n);
    std::vector<T> tgt(targets.begin(), targets.end());
    auto zn = logits.node();
    return make_result<T>(OpKind::bce_with_logits, {1}, {total * inv}, {zn},
                          [zn, tgt = std::move(tgt), inv](detail::Node<T>& self) {
                              auto& g = grad_buffer(*zn);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  const T z = zn->data[i];
                                  const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
                                  g[i] += self.grad[0] * inv * (s - tgt[i]);
                              }
                          });
}

// ---------------------------------------------------------------------------
// Gradient check

template <typename T>
GradcheckResult finite_diff_gradcheck(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
                                      const BasicTensor<T>& x, double step) {
    constexpr double floor = 1e-7;
    BasicTensor<T> probe = x.detach();
    probe.set_requires_grad(true);
    BasicTensor<T> out = f(probe);
    if (out.numel() != 1) throw ContractError("gradcheck requires a scalar-valued function");
    GradcheckResult result;
    result.analytic.assign(x.numel(), 0.0);
    if (out.requires_grad()) {
        backward(out);
        if (probe.has_grad()) {
            auto g = probe.grad();
            for (std::size_t i = 0; i < g.size(); ++i) result.analytic[i] = static_cast<double>(g[i]);
        }
    }
    result.numeric.assign(x.numel(), 0.0);
    BasicTensor<T> shifted = x.detach();
    auto sd = shifted.mutable_data();
    for (std::size_t i = 0; i < sd.size(); ++i) {
        const T orig = sd[i];
        sd[i] = static_cast<T>(orig + step);
        const double plus = static_cast<double>(f(shifted).item());
        sd[i] = static_cast<T>(orig - step);
        const double minus = static_cast<double>(f(shifted).item());
        sd[i] = orig;
        result.numeric[i] = (plus - minus) / (2.0 * step);
        const double diff = std::abs(result.numeric[i] - result.analytic[i]);
        const double denom = std::max({std::abs(result.numeric[i]), std::abs(result.analytic[i]), floor});
        result.max_abs_error = std::max(result.max_abs_error, diff);
        result.max_rel_error = std::max(result.max_rel_error, diff / denom);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Instantiations

#define BDLAB_INSTANTIATE(T)                                                                                      \
    template class BasicTensor<T>;                                                                                \
    template class BasicTape<T>;                                                                                  \
    template void backward<T>(const BasicTensor<T>&);                                                             \
    template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                              \
    template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
    template BasicTensor<T> sub<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
    template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
    template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                                   \
    template BasicTensor<T> add_scalar<T>(const BasicTensor<T>&, T);                                              \
    template BasicTensor<T> add_bias<T>(const BasicTensor<T>&, const BasicTensor<T>&);                            \
    template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t, std::size_t);    \
    template BasicTensor<T> activation<T>(const BasicTensor<T>&, Activation);                                     \
    template BasicTensor<T> relu<T>(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> sigmoid<T>(const BasicTensor<T>&);                                                    \
    template BasicTensor<T> tanh<T>(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> max_pool2d<T>(const BasicTensor<T>&, std::size_t);                                    \
    template BasicTensor<T> avg_pool2d<T>(const BasicTensor<T>&, std::size_t);                                    \
    template BasicTensor<T> reshape<T>(const BasicTensor<T>&, Shape);                                             \
    template BasicTensor<T> flatten<T>(const BasicTensor<T>&);                                                    \
    template BasicTensor<T> select_channel<T>(const BasicTensor<T>&, std::size_t);                                \
    template BasicTensor<T> concat_rows<T>(const std::vector<BasicTensor<T>>&);                                   \
    template BasicTensor<T> stamp<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);        \
    template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                                        \
    template BasicTensor<T> mean<T>(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> square<T>(const BasicTensor<T>&);                                                     \
    template BasicTensor<T> softmax_cross_entropy<T>(const BasicTensor<T>&, std::span<const int>);                \
    template BasicTensor<T> bce_with_logits<T>(const BasicTensor<T>&, std::span<const T>);                        \
    template std::vector<T> softmax_rows<T>(std::span<const T>, std::size_t);                                     \
    template GradcheckResult finite_diff_gradcheck<T>(const std::function<BasicTensor<T>(const BasicTensor<T>&)>&, \
                                                      const BasicTensor<T>&, double);

BDLAB_INSTANTIATE(float)
BDLAB_INSTANTIATE(double)

#undef BDLAB_INSTANTIATE

template BasicTensor<double> tensor_cast<double, float>(const BasicTensor<float>&, bool);
template BasicTensor<float> tensor_cast<float, double>(const BasicTensor<double>&, bool);
template BasicTensor<float> tensor_cast<float, float>(const BasicTensor<float>&, bool);
template BasicTensor<double> tensor_cast<double, double>(const BasicTensor<double>&, bool);

} // namespace bdlab
