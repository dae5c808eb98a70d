#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vmrfa/errors.hpp"
#include "vmrfa/tensor.hpp"

namespace vmrfa {

// Learning-rate group a parameter belongs to during optimization.
enum class LrGroup { backbone, head };

// A trainable tensor with a persistent gradient buffer. Gradients accumulate
// across backward passes until zero_grad() is called.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  LrGroup group = LrGroup::head;

  Parameter() = default;
  Parameter(std::string name_, Tensor value_, LrGroup group_)
      : name(std::move(name_)),
        value(std::move(value_)),
        grad(value.shape()),
        group(group_) {
    value.requires_grad = true;
  }

  void zero_grad() { grad.fill(0.0f); }
};

class Graph;
struct Var;

using BackwardFn = std::function<void(Graph&, int self_id)>;

// One reverse-mode tape node: the op that produced a value, the ids of its
// inputs, and a closure holding whatever the backward rule needs.
struct ComputationRecord {
  const char* op = "leaf";
  std::vector<int> inputs;
  Tensor value;
  Tensor grad;  // allocated lazily during backward
  bool needs_grad = false;
  BackwardFn backward;
  Parameter* param = nullptr;  // set for parameter leaves
};

// Lightweight handle to a node on a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
  std::int64_t numel() const { return value().numel(); }
  // Gradient of the scalar root w.r.t. this node; valid after backward().
  const Tensor& grad() const;
};

// Reverse-mode tape. Nodes are appended in forward order, so ids form a
// topological order of the DAG and backward is a single reverse sweep.
// A graph is single-shot: backward() consumes it.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  ComputationRecord& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const ComputationRecord& node(int id) const {
    return nodes_[static_cast<std::size_t>(id)];
  }

  Var value(Tensor t, bool needs_grad = false) {
    ComputationRecord rec;
    rec.op = "leaf";
    rec.needs_grad = grad_enabled_ && (needs_grad || t.requires_grad);
    rec.value = std::move(t);
    return push(std::move(rec));
  }

  Var param(Parameter& p) {
    ComputationRecord rec;
    rec.op = "param";
    rec.needs_grad = grad_enabled_;
    rec.value = p.value;
    rec.param = &p;
    return push(std::move(rec));
  }

  Var record(const char* op, Tensor value, std::vector<int> inputs, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (int id : inputs) needs = needs || node(id).needs_grad;
    }
    ComputationRecord rec;
    rec.op = op;
    rec.inputs = std::move(inputs);
    rec.value = std::move(value);
    rec.needs_grad = needs;
    if (needs) rec.backward = std::move(fn);
    return push(std::move(rec));
  }

  // Accumulation buffer for a node's gradient, allocated on first touch.
  Tensor& grad_buffer(int id) {
    ComputationRecord& rec = node(id);
    if (rec.grad.empty()) rec.grad = Tensor(rec.value.shape());
    return rec.grad;
  }

  void accumulate_grad(int id, const Tensor& g) {
    if (!node(id).needs_grad) return;
    Tensor& buf = grad_buffer(id);
    check_same_shape(buf, g, "accumulate_grad");
    float* dst = buf.data();
    const float* src = g.data();
    const std::int64_t n = buf.numel();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
  }

  // Propagates d(root)/d(node) to every reachable node and adds leaf
  // gradients into their bound Parameters. Single use per graph.
  void backward(Var root) {
    if (root.graph != this) {
      fail<ContractError>("backward: root belongs to a different graph");
    }
    if (!grad_enabled_) {
      fail<ContractError>("backward: graph was built with gradients disabled");
    }
    if (consumed_) {
      fail<ContractError>("backward: tape already consumed; run a new forward pass");
    }
    if (node(root.id).value.numel() != 1) {
      fail<ContractError>("backward: root must be scalar, got shape ",
                          shape_str(node(root.id).value.shape()));
    }
    consumed_ = true;
    grad_buffer(root.id)[0] = 1.0f;
    for (int id = root.id; id >= 0; --id) {
      ComputationRecord& rec = node(id);
      if (!rec.needs_grad || rec.grad.empty()) continue;
      if (rec.param != nullptr) {
        float* dst = rec.param->grad.data();
        const float* src = rec.grad.data();
        const std::int64_t n = rec.grad.numel();
        for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
      } else if (rec.backward) {
        rec.backward(*this, id);
      }
    }
  }

  bool consumed() const { return consumed_; }

 private:
  Var push(ComputationRecord rec) {
    nodes_.push_back(std::move(rec));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<ComputationRecord> nodes_;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return graph->node(id).value; }

inline const Tensor& Var::grad() const {
  const ComputationRecord& rec = graph->node(id);
  if (rec.grad.empty()) {
    fail<ContractError>("gradient not populated for node produced by '", rec.op, "'");
  }
  return rec.grad;
}

inline void check_same_graph(Var a, Var b, const char* op) {
  if (a.graph != b.graph) {
    fail<ContractError>(op, ": operands recorded on different graphs");
  }
}

}  // namespace vmrfa
