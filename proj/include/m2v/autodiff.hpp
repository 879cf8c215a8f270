#pragma once

#include "m2v/common.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace m2v {

class ParamStore;
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  /// Gradient of the last backward() target; zeros if the node did not influence it.
  Matrix grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Records one forward pass over the fixed operator set and replays it backwards.
class Tape {
 public:
  struct Node;
  using Backward = std::function<void(Tape&, const Node&)>;

  struct Node {
    Matrix value;
    Matrix grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<int> parents;
    Backward backward;
    ParamStore* store = nullptr;  // set for parameter leaves
    std::string param_name;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Differentiable input whose gradient can be read after backward().
  Var leaf(Matrix value);
  /// Parameter leaf; backward() adds its gradient into the store's buffer.
  Var param(ParamStore& store, const std::string& name);

  Var push(Matrix value, std::vector<int> parents, Backward backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
  void backward(Var loss);

  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const Matrix& value(int id) const { return node(id).value; }
  bool requires_grad(int id) const { return node(id).requires_grad; }

  /// grad(id) += g, skipped for nodes that do not require gradients.
  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

/// Differentiable primitives. Shape mismatches throw std::invalid_argument.
namespace ops {

Var matmul(Var a, Var b);
/// Constant left operand (normalized adjacency); shared to avoid copies.
Var matmul(std::shared_ptr<const Matrix> left, Var b);
Var add_bias(Var x, Var bias);
Var relu(Var x);
Var mul(Var a, Var b);
Var add(Var a, Var b);
Var scale(Var a, double c);
Var sum(Var a);
/// Σ(mask ⊙ (pred − target))² / max(Σ mask, 1); differentiable in pred only.
Var masked_mse(Var pred, const Matrix& target, const Matrix& mask);
/// n x 1 column of row Euclidean norms; the gradient at a zero row is zero.
Var l2_row_norms(Var x);
Var concat_rows(Var top, Var bottom);
Var slice_rows(Var x, std::span<const Eigen::Index> rows);
Var row_range(Var x, Eigen::Index begin, Eigen::Index count);

}  // namespace ops

}  // namespace m2v
