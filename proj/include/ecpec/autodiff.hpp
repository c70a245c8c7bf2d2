#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Graph owns every node created during one forward pass. Values are
// computed eagerly; backward closures only run when Graph::backward is
// called, so inference can build a graph and simply drop it.

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace ecpec {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ParameterStore;
class GradStore;

namespace ad {

class Graph;

class Var {
 public:
  Var() = default;

  int id() const { return id_; }
  Graph* graph() const { return graph_; }
  bool valid() const { return graph_ != nullptr; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  friend class Graph;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);

  // Leaf bound to a named array of `store`. Repeated lookups of the same
  // name within one graph return the same node.
  Var parameter(const ParameterStore& store, const std::string& name);

  // Node whose gradient is propagated by `backward`. `parents` only decides
  // whether the node needs a gradient at all.
  Var make(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var make(Matrix value, std::span<const Var> parents, Backward backward);

  const Matrix& value(int id) const { return nodes_[id].value; }
  const Matrix& grad(int id) const { return nodes_[id].grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  void accumulate(int id, const Matrix& delta);

  // Seeds a 1x1 root with 1.
  void backward(Var root);
  void backward(Var root, const Matrix& seed);

  // Adds parameter gradients into `grads` (creating zero entries as needed).
  void collect(GradStore& grads) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::map<std::string, int> params_;
};

// Arithmetic.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var div(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_row(Var a, Var row);    // broadcast 1xC over rows
Var outer_sum(Var col, Var row_col);  // out(i,j) = col(i) + row_col(j); both Nx1

// Nonlinearities.
Var relu(Var a);
Var gelu(Var a);  // tanh approximation
Var tanh(Var a);
Var sigmoid(Var a);

// Row-wise softmax. Entries with mask == false get exactly zero weight and
// a fully masked row yields a zero row.
Var softmax_rows(Var a);
Var softmax_rows(Var a, const Mask& allowed);
Var log_softmax_rows(Var a, const Mask* allowed = nullptr);

Var layer_norm_rows(Var a, Var gamma, Var beta, double eps = 1e-5);

// Shape manipulation.
Var concat_cols(std::span<const Var> parts);
Var concat_cols(Var a, Var b);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
Var gather_rows(Var table, std::span<const int> rows);
Var pick(Var a, Eigen::Index row, Eigen::Index col);  // 1x1
Var select_cols(Var a, std::span<const int> cols);

// Reductions.
Var sum(Var a);
Var mean(Var a);
Var col_sums(Var a);  // 1xC

// Losses. Both return 1x1.
Var bce_with_logits(Var logits, std::span<const double> targets);  // mean over entries
Var cross_entropy(Var logits_row, int target, const Mask* allowed = nullptr);

}  // namespace ad
}  // namespace ecpec
