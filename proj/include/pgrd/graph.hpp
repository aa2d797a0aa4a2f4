// Reverse-mode autodiff over a fixed operation set.
//
// A Graph is a tape: apply() evaluates eagerly, records the op and its
// inputs, and the node order is by construction a topological order.
// backward() walks the tape once in reverse, accumulating gradients over
// fan-out. The op set is exactly what the two networks need; there is no
// general broadcasting and no dynamic shape inference.
#pragma once

#include "pgrd/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pgrd {

enum class Op {
  kInput,
  kAdd,
  kScale,
  kConcatChannels,
  kMatmul,
  kConv3x3,
  kConv1x1,
  kRelu,
  kSilu,
  kUpsample2x,
  kAvgPool2x,
  kSoftmaxChannels,
  kCrossEntropyWithLogits,
  kMse,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kAdd: return "add";
    case Op::kScale: return "scale";
    case Op::kConcatChannels: return "concat-channels";
    case Op::kMatmul: return "matmul";
    case Op::kConv3x3: return "conv2d-3x3";
    case Op::kConv1x1: return "conv2d-1x1";
    case Op::kRelu: return "relu";
    case Op::kSilu: return "silu";
    case Op::kUpsample2x: return "nearest-upsample-2x";
    case Op::kAvgPool2x: return "avgpool-2x";
    case Op::kSoftmaxChannels: return "softmax-channels";
    case Op::kCrossEntropyWithLogits: return "cross-entropy-with-logits";
    case Op::kMse: return "mse";
  }
  return "?";
}

// Ops with a registered gradient rule (everything except kInput).
inline const std::vector<Op>& registered_ops() {
  static const std::vector<Op> ops = {
      Op::kAdd,         Op::kScale,      Op::kConcatChannels,
      Op::kMatmul,      Op::kConv3x3,    Op::kConv1x1,
      Op::kRelu,        Op::kSilu,       Op::kUpsample2x,
      Op::kAvgPool2x,   Op::kSoftmaxChannels,
      Op::kCrossEntropyWithLogits,       Op::kMse,
  };
  return ops;
}

template <typename S>
class Graph {
  static_assert(std::is_floating_point_v<S>);

 public:
  struct Node {
    Op op = Op::kInput;
    std::vector<int> inputs;
    S attr = S(0);  // scale factor for kScale, unused otherwise
    Tensor<S> value;
    bool requires_grad = false;
  };

  using GradientMap = std::unordered_map<int, Tensor<S>>;

  int input(Tensor<S> value) {
    if (!value.all_finite()) {
      throw std::invalid_argument("input: non-finite values rejected");
    }
    Node n;
    n.op = Op::kInput;
    n.requires_grad = value.requires_grad();
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int apply(Op op, std::span<const int> inputs, S attr = S(0)) {
    if (op == Op::kInput) {
      throw std::invalid_argument("apply: use input() for leaf tensors");
    }
    std::vector<const Tensor<S>*> ins;
    ins.reserve(inputs.size());
    bool needs_grad = false;
    for (int id : inputs) {
      check_id(id);
      ins.push_back(&nodes_[static_cast<std::size_t>(id)].value);
      needs_grad = needs_grad || nodes_[static_cast<std::size_t>(id)].requires_grad;
    }
    if (op == Op::kCrossEntropyWithLogits) {
      if (inputs.size() == 2 &&
          nodes_[static_cast<std::size_t>(inputs[1])].requires_grad) {
        throw std::invalid_argument(
            "cross-entropy-with-logits: target must not require gradients");
      }
    }
    Node n;
    n.op = op;
    n.inputs.assign(inputs.begin(), inputs.end());
    n.attr = attr;
    n.value = eval(op, attr, ins);
    n.requires_grad = needs_grad;
    if (!n.value.all_finite()) {
      throw std::runtime_error(std::string(op_name(op)) +
                               ": produced non-finite values");
    }
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int apply(Op op, std::initializer_list<int> inputs, S attr = S(0)) {
    return apply(op, std::span<const int>(inputs.begin(), inputs.size()), attr);
  }

  const Tensor<S>& value(int id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)].value;
  }

  const Node& node(int id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)];
  }

  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  // Gradients of a scalar loss w.r.t. every grad-requiring node reachable
  // from it. Leaves without requires_grad receive no entry.
  GradientMap backward(int loss) const {
    check_id(loss);
    if (nodes_[static_cast<std::size_t>(loss)].value.size() != 1) {
      throw std::invalid_argument(
          "backward: loss node must be scalar, has shape " +
          shape_str(nodes_[static_cast<std::size_t>(loss)].value.shape()));
    }
    std::vector<Tensor<S>> grads(nodes_.size());
    std::vector<bool> has_grad(nodes_.size(), false);
    grads[static_cast<std::size_t>(loss)] = Tensor<S>::scalar(S(1));
    has_grad[static_cast<std::size_t>(loss)] = true;

    for (int id = loss; id >= 0; --id) {
      const auto& n = nodes_[static_cast<std::size_t>(id)];
      if (!has_grad[static_cast<std::size_t>(id)] || n.op == Op::kInput) continue;
      std::vector<const Tensor<S>*> ins;
      ins.reserve(n.inputs.size());
      for (int in_id : n.inputs) ins.push_back(&nodes_[static_cast<std::size_t>(in_id)].value);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const int in_id = n.inputs[k];
        if (!nodes_[static_cast<std::size_t>(in_id)].requires_grad) continue;
        if (!has_grad[static_cast<std::size_t>(in_id)]) {
          grads[static_cast<std::size_t>(in_id)] =
              Tensor<S>::zeros(nodes_[static_cast<std::size_t>(in_id)].value.shape());
          has_grad[static_cast<std::size_t>(in_id)] = true;
        }
        accumulate(n, ins, grads[static_cast<std::size_t>(id)],
                   static_cast<int>(k), grads[static_cast<std::size_t>(in_id)]);
      }
    }

    GradientMap out;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      if (has_grad[id] && nodes_[id].requires_grad) {
        if (!grads[id].all_finite()) {
          throw std::runtime_error("backward: non-finite gradient at node " +
                                   std::to_string(id) + " (" +
                                   op_name(nodes_[id].op) + ")");
        }
        out.emplace(static_cast<int>(id), std::move(grads[id]));
      }
    }
    return out;
  }

  // Finite-difference support: mutate a leaf in place, then replay the tape.
  Tensor<S>& mutable_input_value(int id) {
    check_id(id);
    if (nodes_[static_cast<std::size_t>(id)].op != Op::kInput) {
      throw std::invalid_argument("mutable_input_value: node is not an input");
    }
    return nodes_[static_cast<std::size_t>(id)].value;
  }

  void recompute(int from = 0) {
    for (std::size_t id = static_cast<std::size_t>(from); id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.op == Op::kInput) continue;
      std::vector<const Tensor<S>*> ins;
      ins.reserve(n.inputs.size());
      for (int in_id : n.inputs) ins.push_back(&nodes_[static_cast<std::size_t>(in_id)].value);
      n.value = eval(n.op, n.attr, ins);
    }
  }

  // Smallest |x| seen at any relu input; used to flag non-differentiable
  // evaluation points in the gradient checker.
  double min_abs_relu_input() const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& n : nodes_) {
      if (n.op != Op::kRelu) continue;
      const auto& x = nodes_[static_cast<std::size_t>(n.inputs[0])].value;
      best = std::min(best, static_cast<double>(x.array().abs().minCoeff()));
    }
    return best;
  }

  std::vector<int> leaf_ids(bool grad_only = true) const {
    std::vector<int> out;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      if (nodes_[id].op == Op::kInput && (!grad_only || nodes_[id].requires_grad)) {
        out.push_back(static_cast<int>(id));
      }
    }
    return out;
  }

  // Forward kernel dispatch, usable standalone (no tape).
  static Tensor<S> eval(Op op, S attr, std::span<const Tensor<S>* const> ins) {
    switch (op) {
      case Op::kInput: break;
      case Op::kAdd: return eval_add(arity(op, ins, 2));
      case Op::kScale: return eval_scale(arity(op, ins, 1), attr);
      case Op::kConcatChannels: return eval_concat(ins);
      case Op::kMatmul: return eval_matmul(arity(op, ins, 2));
      case Op::kConv3x3: return eval_conv(arity(op, ins, 3), 3);
      case Op::kConv1x1: return eval_conv(arity(op, ins, 3), 1);
      case Op::kRelu: return eval_relu(arity(op, ins, 1));
      case Op::kSilu: return eval_silu(arity(op, ins, 1));
      case Op::kUpsample2x: return eval_upsample(arity(op, ins, 1));
      case Op::kAvgPool2x: return eval_avgpool(arity(op, ins, 1));
      case Op::kSoftmaxChannels: return eval_softmax(arity(op, ins, 1));
      case Op::kCrossEntropyWithLogits: return eval_cross_entropy(arity(op, ins, 2));
      case Op::kMse: return eval_mse(arity(op, ins, 2));
    }
    throw std::invalid_argument("eval: unsupported op");
  }

 private:
  using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowMap = Eigen::Map<RowMat>;
  using ConstRowMap = Eigen::Map<const RowMat>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  void check_id(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) {
      throw std::out_of_range("graph: node id " + std::to_string(id) +
                              " out of range");
    }
  }

  static std::span<const Tensor<S>* const> arity(Op op,
                                                 std::span<const Tensor<S>* const> ins,
                                                 std::size_t n) {
    if (ins.size() != n) {
      throw std::invalid_argument(std::string(op_name(op)) + ": expects " +
                                  std::to_string(n) + " inputs, got " +
                                  std::to_string(ins.size()));
    }
    return ins;
  }

  static void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                  shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
    }
  }

  static void require_rank4(const char* op, const Tensor<S>& t) {
    if (t.rank() != 4) {
      throw std::invalid_argument(std::string(op) + ": expects a [B,C,H,W] tensor, got " +
                                  shape_str(t.shape()));
    }
  }

  // ---- forward kernels ----

  static Tensor<S> eval_add(std::span<const Tensor<S>* const> ins) {
    const auto& a = *ins[0];
    const auto& b = *ins[1];
    require_same_shape("add", a, b);
    Tensor<S> out(a.shape());
    out.array() = a.array() + b.array();
    return out;
  }

  static Tensor<S> eval_scale(std::span<const Tensor<S>* const> ins, S alpha) {
    const auto& a = *ins[0];
    Tensor<S> out(a.shape());
    out.array() = a.array() * alpha;
    return out;
  }

  static Tensor<S> eval_concat(std::span<const Tensor<S>* const> ins) {
    if (ins.size() < 2) {
      throw std::invalid_argument("concat-channels: expects at least 2 inputs");
    }
    int channels = 0;
    for (const auto* t : ins) {
      require_rank4("concat-channels", *t);
      if (t->dim(0) != ins[0]->dim(0) || t->dim(2) != ins[0]->dim(2) ||
          t->dim(3) != ins[0]->dim(3)) {
        throw std::invalid_argument("concat-channels: shape mismatch " +
                                    shape_str(ins[0]->shape()) + " vs " +
                                    shape_str(t->shape()));
      }
      channels += t->dim(1);
    }
    const int B = ins[0]->dim(0), H = ins[0]->dim(2), W = ins[0]->dim(3);
    Tensor<S> out({B, channels, H, W});
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int b = 0; b < B; ++b) {
      std::int64_t c_off = 0;
      for (const auto* t : ins) {
        const std::int64_t n = static_cast<std::int64_t>(t->dim(1)) * plane;
        std::memcpy(out.data() + (static_cast<std::int64_t>(b) * channels) * plane +
                        c_off * plane,
                    t->data() + static_cast<std::int64_t>(b) * n,
                    static_cast<std::size_t>(n) * sizeof(S));
        c_off += t->dim(1);
      }
    }
    return out;
  }

  static Tensor<S> eval_matmul(std::span<const Tensor<S>* const> ins) {
    const auto& a = *ins[0];
    const auto& b = *ins[1];
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
      throw std::invalid_argument("matmul: incompatible shapes " +
                                  shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
    }
    Tensor<S> out({a.dim(0), b.dim(1)});
    RowMap(out.data(), a.dim(0), b.dim(1)) =
        ConstRowMap(a.data(), a.dim(0), a.dim(1)) *
        ConstRowMap(b.data(), b.dim(0), b.dim(1));
    return out;
  }

  // conv2d, stride 1; k=3 uses zero padding 1, k=1 has no padding.
  // Inputs: x [B,Ci,H,W], w [Co,Ci,k,k], bias [Co].
  static Tensor<S> eval_conv(std::span<const Tensor<S>* const> ins, int k) {
    const auto& x = *ins[0];
    const auto& w = *ins[1];
    const auto& bias = *ins[2];
    const char* name = k == 3 ? "conv2d-3x3" : "conv2d-1x1";
    require_rank4(name, x);
    if (w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != k || w.dim(3) != k) {
      throw std::invalid_argument(std::string(name) + ": weight shape " +
                                  shape_str(w.shape()) + " incompatible with input " +
                                  shape_str(x.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != w.dim(0)) {
      throw std::invalid_argument(std::string(name) + ": bias shape " +
                                  shape_str(bias.shape()) + " must be [" +
                                  std::to_string(w.dim(0)) + "]");
    }
    const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor<S> out({B, Co, H, W});
    ConstRowMap wmat(w.data(), Co, Ci * k * k);
    Eigen::Map<const Vec> bvec(bias.data(), Co);
    for (int b = 0; b < B; ++b) {
      RowMap y(out.data() + static_cast<std::int64_t>(b) * Co * hw, Co, hw);
      if (k == 1) {
        ConstRowMap xmat(x.data() + static_cast<std::int64_t>(b) * Ci * hw, Ci, hw);
        y.noalias() = wmat * xmat;
      } else {
        RowMat col = im2col3x3(x, b);
        y.noalias() = wmat * col;
      }
      y.colwise() += bvec;
    }
    return out;
  }

  static RowMat im2col3x3(const Tensor<S>& x, int b) {
    const int Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    RowMat col = RowMat::Zero(Ci * 9, static_cast<std::int64_t>(H) * W);
    for (int ci = 0; ci < Ci; ++ci) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const int row = (ci * 3 + ky) * 3 + kx;
          const int ox0 = std::max(0, 1 - kx);
          const int ox1 = std::min(W, W + 1 - kx);
          if (ox1 <= ox0) continue;
          for (int oy = 0; oy < H; ++oy) {
            const int iy = oy + ky - 1;
            if (iy < 0 || iy >= H) continue;
            std::memcpy(col.data() + (static_cast<std::int64_t>(row) * H * W) +
                            (static_cast<std::int64_t>(oy) * W) + ox0,
                        x.data() + x.index4(b, ci, iy, ox0 + kx - 1),
                        static_cast<std::size_t>(ox1 - ox0) * sizeof(S));
          }
        }
      }
    }
    return col;
  }

  static void col2im3x3_add(const RowMat& dcol, Tensor<S>& dx, int b) {
    const int Ci = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
    for (int ci = 0; ci < Ci; ++ci) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const int row = (ci * 3 + ky) * 3 + kx;
          const int ox0 = std::max(0, 1 - kx);
          const int ox1 = std::min(W, W + 1 - kx);
          if (ox1 <= ox0) continue;
          for (int oy = 0; oy < H; ++oy) {
            const int iy = oy + ky - 1;
            if (iy < 0 || iy >= H) continue;
            Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> dst(
                dx.data() + dx.index4(b, ci, iy, ox0 + kx - 1), ox1 - ox0);
            Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> src(
                dcol.data() + (static_cast<std::int64_t>(row) * H * W) +
                    (static_cast<std::int64_t>(oy) * W) + ox0,
                ox1 - ox0);
            dst += src;
          }
        }
      }
    }
  }

  static Tensor<S> eval_relu(std::span<const Tensor<S>* const> ins) {
    const auto& x = *ins[0];
    Tensor<S> out(x.shape());
    out.array() = x.array().max(S(0));
    return out;
  }

  static Tensor<S> eval_silu(std::span<const Tensor<S>* const> ins) {
    const auto& x = *ins[0];
    Tensor<S> out(x.shape());
    out.array() = x.array() / (S(1) + (-x.array()).exp());
    return out;
  }

  static Tensor<S> eval_upsample(std::span<const Tensor<S>* const> ins) {
    const auto& x = *ins[0];
    require_rank4("nearest-upsample-2x", x);
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<S> out({B, C, 2 * H, 2 * W});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
          for (int x2 = 0; x2 < 2 * W; ++x2)
            out.at4(b, c, y, x2) = x.at4(b, c, y / 2, x2 / 2);
    return out;
  }

  static Tensor<S> eval_avgpool(std::span<const Tensor<S>* const> ins) {
    const auto& x = *ins[0];
    require_rank4("avgpool-2x", x);
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0) {
      throw std::invalid_argument("avgpool-2x: spatial dims must be even, got " +
                                  shape_str(x.shape()));
    }
    Tensor<S> out({B, C, H / 2, W / 2});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H / 2; ++y)
          for (int x2 = 0; x2 < W / 2; ++x2)
            out.at4(b, c, y, x2) =
                (x.at4(b, c, 2 * y, 2 * x2) + x.at4(b, c, 2 * y, 2 * x2 + 1) +
                 x.at4(b, c, 2 * y + 1, 2 * x2) + x.at4(b, c, 2 * y + 1, 2 * x2 + 1)) /
                S(4);
    return out;
  }

  static Tensor<S> eval_softmax(std::span<const Tensor<S>* const> ins) {
    const auto& x = *ins[0];
    require_rank4("softmax-channels", x);
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor<S> out(x.shape());
    for (int b = 0; b < B; ++b) {
      const S* xp = x.data() + static_cast<std::int64_t>(b) * C * hw;
      S* op = out.data() + static_cast<std::int64_t>(b) * C * hw;
      for (std::int64_t p = 0; p < hw; ++p) {
        S m = xp[p];
        for (int c = 1; c < C; ++c) m = std::max(m, xp[c * hw + p]);
        S z = S(0);
        for (int c = 0; c < C; ++c) {
          const S e = std::exp(xp[c * hw + p] - m);
          op[c * hw + p] = e;
          z += e;
        }
        for (int c = 0; c < C; ++c) op[c * hw + p] /= z;
      }
    }
    return out;
  }

  // Mean over pixels of -sum_c target_c * log softmax(logits)_c.
  static Tensor<S> eval_cross_entropy(std::span<const Tensor<S>* const> ins) {
    const auto& logits = *ins[0];
    const auto& target = *ins[1];
    require_rank4("cross-entropy-with-logits", logits);
    require_same_shape("cross-entropy-with-logits", logits, target);
    const int B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    double total = 0.0;
    for (int b = 0; b < B; ++b) {
      const S* lp = logits.data() + static_cast<std::int64_t>(b) * C * hw;
      const S* tp = target.data() + static_cast<std::int64_t>(b) * C * hw;
      for (std::int64_t p = 0; p < hw; ++p) {
        double m = lp[p];
        for (int c = 1; c < C; ++c) m = std::max(m, static_cast<double>(lp[c * hw + p]));
        double z = 0.0;
        for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(lp[c * hw + p]) - m);
        const double logz = std::log(z) + m;
        for (int c = 0; c < C; ++c) {
          total -= static_cast<double>(tp[c * hw + p]) *
                   (static_cast<double>(lp[c * hw + p]) - logz);
        }
      }
    }
    return Tensor<S>::scalar(static_cast<S>(total / (static_cast<double>(B) * hw)));
  }

  static Tensor<S> eval_mse(std::span<const Tensor<S>* const> ins) {
    const auto& a = *ins[0];
    const auto& b = *ins[1];
    require_same_shape("mse", a, b);
    const double sum = (a.array().template cast<double>() -
                        b.array().template cast<double>())
                           .square()
                           .sum();
    return Tensor<S>::scalar(static_cast<S>(sum / static_cast<double>(a.size())));
  }

  // ---- backward kernels ----
  // Adds the contribution of `node`'s gradient g to input slot k.

  static void accumulate(const Node& node, std::span<const Tensor<S>* const> ins,
                         const Tensor<S>& g, int k, Tensor<S>& acc) {
    switch (node.op) {
      case Op::kAdd:
        acc.array() += g.array();
        return;
      case Op::kScale:
        acc.array() += g.array() * node.attr;
        return;
      case Op::kConcatChannels: {
        const int B = node.value.dim(0), H = node.value.dim(2), W = node.value.dim(3);
        const std::int64_t plane = static_cast<std::int64_t>(H) * W;
        std::int64_t c_off = 0;
        for (int j = 0; j < k; ++j) c_off += ins[static_cast<std::size_t>(j)]->dim(1);
        const int Ck = ins[static_cast<std::size_t>(k)]->dim(1);
        const int Cout = node.value.dim(1);
        for (int b = 0; b < B; ++b) {
          Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> dst(
              acc.data() + static_cast<std::int64_t>(b) * Ck * plane, Ck * plane);
          Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> src(
              g.data() + (static_cast<std::int64_t>(b) * Cout + c_off) * plane,
              Ck * plane);
          dst += src;
        }
        return;
      }
      case Op::kMatmul: {
        const auto& a = *ins[0];
        const auto& b = *ins[1];
        ConstRowMap gm(g.data(), a.dim(0), b.dim(1));
        if (k == 0) {
          RowMap(acc.data(), a.dim(0), a.dim(1)).noalias() +=
              gm * ConstRowMap(b.data(), b.dim(0), b.dim(1)).transpose();
        } else {
          RowMap(acc.data(), b.dim(0), b.dim(1)).noalias() +=
              ConstRowMap(a.data(), a.dim(0), a.dim(1)).transpose() * gm;
        }
        return;
      }
      case Op::kConv3x3:
        conv_backward(ins, g, k, acc, 3);
        return;
      case Op::kConv1x1:
        conv_backward(ins, g, k, acc, 1);
        return;
      case Op::kRelu: {
        const auto& x = *ins[0];
        acc.array() += g.array() * (x.array() > S(0)).template cast<S>();
        return;
      }
      case Op::kSilu: {
        const auto& x = *ins[0];
        auto sig = (S(1) + (-x.array()).exp()).inverse();
        acc.array() += g.array() * sig * (S(1) + x.array() * (S(1) - sig));
        return;
      }
      case Op::kUpsample2x: {
        const auto& x = *ins[0];
        const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
              for (int x2 = 0; x2 < 2 * W; ++x2)
                acc.at4(b, c, y / 2, x2 / 2) += g.at4(b, c, y, x2);
        return;
      }
      case Op::kAvgPool2x: {
        const auto& x = *ins[0];
        const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
              for (int x2 = 0; x2 < W; ++x2)
                acc.at4(b, c, y, x2) += g.at4(b, c, y / 2, x2 / 2) / S(4);
        return;
      }
      case Op::kSoftmaxChannels: {
        const auto& y = node.value;
        const int B = y.dim(0), C = y.dim(1), H = y.dim(2), W = y.dim(3);
        const std::int64_t hw = static_cast<std::int64_t>(H) * W;
        for (int b = 0; b < B; ++b) {
          const S* yp = y.data() + static_cast<std::int64_t>(b) * C * hw;
          const S* gp = g.data() + static_cast<std::int64_t>(b) * C * hw;
          S* ap = acc.data() + static_cast<std::int64_t>(b) * C * hw;
          for (std::int64_t p = 0; p < hw; ++p) {
            S dot = S(0);
            for (int c = 0; c < C; ++c) dot += gp[c * hw + p] * yp[c * hw + p];
            for (int c = 0; c < C; ++c)
              ap[c * hw + p] += yp[c * hw + p] * (gp[c * hw + p] - dot);
          }
        }
        return;
      }
      case Op::kCrossEntropyWithLogits: {
        // gradient defined for the logits input only
        if (k != 0) return;
        const auto& logits = *ins[0];
        const auto& target = *ins[1];
        const int B = logits.dim(0), C = logits.dim(1), H = logits.dim(2),
                  W = logits.dim(3);
        const std::int64_t hw = static_cast<std::int64_t>(H) * W;
        const S gscale = g[0] / static_cast<S>(static_cast<double>(B) * hw);
        const Tensor<S>* lp = ins[0];
        Tensor<S> sm = eval_softmax(std::span<const Tensor<S>* const>(&lp, 1));
        acc.array() += (sm.array() - target.array()) * gscale;
        return;
      }
      case Op::kMse: {
        const auto& a = *ins[0];
        const auto& b = *ins[1];
        const S sign = k == 0 ? S(1) : S(-1);
        const S gscale = g[0] * S(2) / static_cast<S>(a.size());
        acc.array() += sign * gscale * (a.array() - b.array());
        return;
      }
      case Op::kInput:
        return;
    }
  }

  static void conv_backward(std::span<const Tensor<S>* const> ins, const Tensor<S>& g,
                            int k, Tensor<S>& acc, int ksize) {
    const auto& x = *ins[0];
    const auto& w = *ins[1];
    const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    ConstRowMap wmat(w.data(), Co, Ci * ksize * ksize);
    for (int b = 0; b < B; ++b) {
      ConstRowMap gy(g.data() + static_cast<std::int64_t>(b) * Co * hw, Co, hw);
      if (k == 2) {
        Eigen::Map<Vec>(acc.data(), Co).noalias() += gy.rowwise().sum();
      } else if (k == 1) {
        if (ksize == 1) {
          ConstRowMap xmat(x.data() + static_cast<std::int64_t>(b) * Ci * hw, Ci, hw);
          RowMap(acc.data(), Co, Ci).noalias() += gy * xmat.transpose();
        } else {
          RowMat col = im2col3x3(x, b);
          RowMap(acc.data(), Co, Ci * 9).noalias() += gy * col.transpose();
        }
      } else {
        if (ksize == 1) {
          RowMap(acc.data() + static_cast<std::int64_t>(b) * Ci * hw, Ci, hw)
              .noalias() += wmat.transpose() * gy;
        } else {
          RowMat dcol = wmat.transpose() * gy;
          col2im3x3_add(dcol, acc, b);
        }
      }
    }
  }

  std::vector<Node> nodes_;
};

// Lightweight handle so network code reads like expressions.
template <typename S>
struct Value {
  Graph<S>* graph = nullptr;
  int id = -1;
  const Tensor<S>& tensor() const { return graph->value(id); }
};

template <typename S>
Value<S> constant(Graph<S>& g, Tensor<S> t) {
  t.set_requires_grad(false);
  return {&g, g.input(std::move(t))};
}

template <typename S>
Value<S> param(Graph<S>& g, Tensor<S> t) {
  t.set_requires_grad(true);
  return {&g, g.input(std::move(t))};
}

template <typename S>
Value<S> add(Value<S> a, Value<S> b) {
  return {a.graph, a.graph->apply(Op::kAdd, {a.id, b.id})};
}
template <typename S>
Value<S> scale(Value<S> a, S alpha) {
  return {a.graph, a.graph->apply(Op::kScale, {a.id}, alpha)};
}
template <typename S>
Value<S> concat_channels(std::span<const Value<S>> vs) {
  std::vector<int> ids;
  ids.reserve(vs.size());
  for (const auto& v : vs) ids.push_back(v.id);
  return {vs[0].graph, vs[0].graph->apply(Op::kConcatChannels,
                                          std::span<const int>(ids))};
}
template <typename S>
Value<S> concat_channels(std::initializer_list<Value<S>> vs) {
  return concat_channels(std::span<const Value<S>>(vs.begin(), vs.size()));
}
template <typename S>
Value<S> matmul(Value<S> a, Value<S> b) {
  return {a.graph, a.graph->apply(Op::kMatmul, {a.id, b.id})};
}
template <typename S>
Value<S> conv3x3(Value<S> x, Value<S> w, Value<S> bias) {
  return {x.graph, x.graph->apply(Op::kConv3x3, {x.id, w.id, bias.id})};
}
template <typename S>
Value<S> conv1x1(Value<S> x, Value<S> w, Value<S> bias) {
  return {x.graph, x.graph->apply(Op::kConv1x1, {x.id, w.id, bias.id})};
}
template <typename S>
Value<S> relu(Value<S> x) {
  return {x.graph, x.graph->apply(Op::kRelu, {x.id})};
}
template <typename S>
Value<S> silu(Value<S> x) {
  return {x.graph, x.graph->apply(Op::kSilu, {x.id})};
}
template <typename S>
Value<S> upsample2x(Value<S> x) {
  return {x.graph, x.graph->apply(Op::kUpsample2x, {x.id})};
}
template <typename S>
Value<S> avgpool2x(Value<S> x) {
  return {x.graph, x.graph->apply(Op::kAvgPool2x, {x.id})};
}
template <typename S>
Value<S> softmax_channels(Value<S> x) {
  return {x.graph, x.graph->apply(Op::kSoftmaxChannels, {x.id})};
}
template <typename S>
Value<S> cross_entropy_with_logits(Value<S> logits, Value<S> target) {
  return {logits.graph,
          logits.graph->apply(Op::kCrossEntropyWithLogits, {logits.id, target.id})};
}
template <typename S>
Value<S> mse(Value<S> a, Value<S> b) {
  return {a.graph, a.graph->apply(Op::kMse, {a.id, b.id})};
}

}  // namespace pgrd
