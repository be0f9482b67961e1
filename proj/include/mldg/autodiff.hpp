#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mldg/param_store.hpp"
#include "mldg/tensor.hpp"

namespace mldg {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

enum class GradMode { enabled, disabled };

// Tape for reverse-mode differentiation. Nodes are appended in evaluation
// order, so the node vector is already a topological order. A graph
// supports exactly one backward pass.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  explicit Graph(GradMode mode = GradMode::enabled) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Binds a parameter. Trainable entries become gradient leaves unless the
  // graph runs with gradients disabled. Binding the same name twice returns
  // the same node.
  Var param(const ParamStore& store, std::string_view name);

  // Gradient per trainable parameter bound into this graph. Frozen
  // parameters never get an entry.
  Gradients backward(Var loss);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  Var emit(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
           BackwardFn backward);
  Var emit(std::string_view op, Tensor value, std::span<const Var> inputs,
           BackwardFn backward);
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t input(std::size_t id, std::size_t k) const { return nodes_[id].inputs[k]; }
  std::size_t input_count(std::size_t id) const { return nodes_[id].inputs.size(); }
  // Gradient slot of an input, allocated on first use. Only call for nodes
  // that require gradients.
  Tensor& grad_slot(std::size_t id);

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
    std::string param_name;
  };

  void check_live(std::string_view op) const;

  GradMode mode_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> bound_params_;
};

// Differentiable ops. Matrices are row-major; rank-1 tensors act as rows.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
// a (n x m) plus row vector (1 x m or [m]) broadcast over rows.
Var add_row(Var a, Var row);
Var gelu(Var a);
Var tanh(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
// Mean over rows: (n x m) -> (1 x m).
Var mean_rows(Var a);
// Scalar element a[r, c].
Var pick(Var a, std::size_t r, std::size_t c);
Var sum(Var a);
// Arithmetic mean of scalar nodes.
Var mean_of(std::span<const Var> scalars);

}  // namespace mldg
