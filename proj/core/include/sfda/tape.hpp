#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "sfda/errors.hpp"
#include "sfda/tensor.hpp"

namespace sfda {

enum class OpKind {
  kAdd,
  kSub,
  kMul,
  kScale,
  kBiasAdd,
  kMatmul,
  kBatchedMatmul,
  kConv2d,
  kAvgPool2d,
  kGlobalAvgPool,
  kRelu,
  kGelu,
  kSoftmax,
  kLogSoftmax,
  kLog,
  kExp,
  kXLogX,
  kSum,
  kMean,
  kLayerNorm,
  kBatchNorm,
  kReshape,
  kTranspose,
  kConcat,
  kGatherRows,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kBiasAdd: return "bias_add";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kBatchedMatmul: return "batched_matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kAvgPool2d: return "avg_pool2d";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kRelu: return "relu";
    case OpKind::kGelu: return "gelu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kXLogX: return "xlogx";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kBatchNorm: return "batch_norm";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kConcat: return "concat";
    case OpKind::kGatherRows: return "gather_rows";
  }
  return "?";
}

/// Thread-local switch for gradient recording. Evaluation passes run inside
/// a NoGradScope so they leave no tape behind.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool enabled = true;
    return enabled;
  }
};

class NoGradScope {
 public:
  NoGradScope() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradScope() { GradMode::set(prev_); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool prev_;
};

/// Define-by-run tape. Ops append nodes in execution order, which is a
/// topological order of the DAG; backward() replays the closures in reverse
/// so every node is visited exactly once, then clears the tape.
template <class S>
class Tape {
 public:
  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  void record(OpKind kind, std::function<void()> backward_fn) {
    nodes_.push_back(Node{kind, std::move(backward_fn)});
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void run_backward(Tensor<S> loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward: loss must be a scalar tensor");
    }
    if (nodes_.empty()) {
      throw ContractError("backward: tape is empty");
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward: loss does not require gradients");
    }
    loss.grad()[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->fn();
    }
    clear();
  }

 private:
  struct Node {
    OpKind kind;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
};

template <class S>
void backward(const Tensor<S>& loss) {
  Tape<S>::active().run_backward(loss);
}

}  // namespace sfda
