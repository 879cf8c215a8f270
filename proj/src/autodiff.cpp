#include "m2v/autodiff.hpp"

#include "m2v/params.hpp"

#include <sstream>

namespace m2v {

namespace {

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_str(a) << " and " << shape_str(b);
  throw std::invalid_argument(os.str());
}

void same_tape(Var a, Var b, const char* op) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(id_); }

Matrix Var::grad() const {
  const auto& n = tape_->node(id_);
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::invalid_argument("scalar(): value is " + shape_str(v));
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::leaf(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(ParamStore& store, const std::string& name) {
  Node n;
  n.value = store.value(name);
  n.requires_grad = true;
  n.store = &store;
  n.param_name = name;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::push(Matrix value, std::vector<int> parents, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) n.requires_grad = n.requires_grad || requires_grad(p);
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss is on another tape");
  if (loss.value().size() != 1) {
    throw std::invalid_argument("backward: loss must be 1x1, got " + shape_str(loss.value()));
  }
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[static_cast<std::size_t>(loss.id())].requires_grad) return;
  nodes_[static_cast<std::size_t>(loss.id())].grad = Matrix::Ones(1, 1);
  for (int i = loss.id(); i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n);
    if (n.store != nullptr) n.store->grad(n.param_name) += n.grad;
  }
}

namespace ops {

Var matmul(Var a, Var b) {
  same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) shape_error("matmul", a.value(), b.value());
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->push(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, const Tape::Node& n) {
    if (t.requires_grad(ia)) t.accumulate(ia, n.grad * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * n.grad);
  });
}

Var matmul(std::shared_ptr<const Matrix> left, Var b) {
  if (left->cols() != b.rows()) shape_error("matmul", *left, b.value());
  const int ib = b.id();
  Matrix out = (*left) * b.value();
  return b.tape()->push(std::move(out), {ib}, [ib, left](Tape& t, const Tape::Node& n) {
    t.accumulate(ib, left->transpose() * n.grad);
  });
}

Var add_bias(Var x, Var bias) {
  same_tape(x, bias, "add_bias");
  if (bias.rows() != 1 || bias.cols() != x.cols()) shape_error("add_bias", x.value(), bias.value());
  const int ix = x.id();
  const int ib = bias.id();
  Matrix out = x.value().rowwise() + bias.value().row(0);
  return x.tape()->push(std::move(out), {ix, ib}, [ix, ib](Tape& t, const Tape::Node& n) {
    t.accumulate(ix, n.grad);
    if (t.requires_grad(ib)) t.accumulate(ib, n.grad.colwise().sum());
  });
}

Var relu(Var x) {
  const int ix = x.id();
  Matrix out = x.value().cwiseMax(0.0);
  return x.tape()->push(std::move(out), {ix}, [ix](Tape& t, const Tape::Node& n) {
    // Subgradient at exactly zero is taken as 0.
    t.accumulate(ix, (t.value(ix).array() > 0.0).select(n.grad, 0.0).matrix());
  });
}

Var mul(Var a, Var b) {
  same_tape(a, b, "mul");
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("mul", a.value(), b.value());
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->push(a.value().cwiseProduct(b.value()), {ia, ib},
                        [ia, ib](Tape& t, const Tape::Node& n) {
                          if (t.requires_grad(ia)) t.accumulate(ia, n.grad.cwiseProduct(t.value(ib)));
                          if (t.requires_grad(ib)) t.accumulate(ib, n.grad.cwiseProduct(t.value(ia)));
                        });
}

Var add(Var a, Var b) {
  same_tape(a, b, "add");
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("add", a.value(), b.value());
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->push(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, const Tape::Node& n) {
    t.accumulate(ia, n.grad);
    t.accumulate(ib, n.grad);
  });
}

Var scale(Var a, double c) {
  const int ia = a.id();
  return a.tape()->push(a.value() * c, {ia},
                        [ia, c](Tape& t, const Tape::Node& n) { t.accumulate(ia, n.grad * c); });
}

Var sum(Var a) {
  const int ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->push(std::move(out), {ia}, [ia](Tape& t, const Tape::Node& n) {
    const Matrix& v = t.value(ia);
    t.accumulate(ia, Matrix::Constant(v.rows(), v.cols(), n.grad(0, 0)));
  });
}

Var masked_mse(Var pred, const Matrix& target, const Matrix& mask) {
  const Matrix& p = pred.value();
  if (p.rows() != target.rows() || p.cols() != target.cols()) shape_error("masked_mse", p, target);
  if (p.rows() != mask.rows() || p.cols() != mask.cols()) shape_error("masked_mse", p, mask);
  const double denom = std::max(mask.sum(), 1.0);
  Matrix diff = mask.cwiseProduct(p - target);
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / denom;
  const int ip = pred.id();
  auto scaled = std::make_shared<Matrix>(diff.cwiseProduct(mask) * (2.0 / denom));
  return pred.tape()->push(std::move(out), {ip}, [ip, scaled](Tape& t, const Tape::Node& n) {
    t.accumulate(ip, *scaled * n.grad(0, 0));
  });
}

Var l2_row_norms(Var x) {
  const int ix = x.id();
  Matrix out = x.value().rowwise().norm();
  return x.tape()->push(std::move(out), {ix}, [ix](Tape& t, const Tape::Node& n) {
    const Matrix& v = t.value(ix);
    Matrix g = Matrix::Zero(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      const double norm = v.row(i).norm();
      if (norm > 0.0) g.row(i) = v.row(i) * (n.grad(i, 0) / norm);
    }
    t.accumulate(ix, g);
  });
}

Var concat_rows(Var top, Var bottom) {
  same_tape(top, bottom, "concat_rows");
  if (top.cols() != bottom.cols()) shape_error("concat_rows", top.value(), bottom.value());
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top.value();
  out.bottomRows(bottom.rows()) = bottom.value();
  const int it = top.id();
  const int ib = bottom.id();
  const Eigen::Index split = top.rows();
  return top.tape()->push(std::move(out), {it, ib}, [it, ib, split](Tape& t, const Tape::Node& n) {
    if (t.requires_grad(it)) t.accumulate(it, n.grad.topRows(split));
    if (t.requires_grad(ib)) t.accumulate(ib, n.grad.bottomRows(n.grad.rows() - split));
  });
}

Var slice_rows(Var x, std::span<const Eigen::Index> rows) {
  const Matrix& v = x.value();
  Matrix out(static_cast<Eigen::Index>(rows.size()), v.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= v.rows()) {
      throw std::invalid_argument("slice_rows: row " + std::to_string(rows[k]) + " outside " +
                                  shape_str(v));
    }
    out.row(static_cast<Eigen::Index>(k)) = v.row(rows[k]);
  }
  const int ix = x.id();
  std::vector<Eigen::Index> idx(rows.begin(), rows.end());
  return x.tape()->push(std::move(out), {ix}, [ix, idx = std::move(idx)](Tape& t, const Tape::Node& n) {
    const Matrix& v = t.value(ix);
    Matrix g = Matrix::Zero(v.rows(), v.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) g.row(idx[k]) += n.grad.row(static_cast<Eigen::Index>(k));
    t.accumulate(ix, g);
  });
}

Var row_range(Var x, Eigen::Index begin, Eigen::Index count) {
  const Matrix& v = x.value();
  if (begin < 0 || count < 0 || begin + count > v.rows()) {
    throw std::invalid_argument("row_range: [" + std::to_string(begin) + ", +" +
                                std::to_string(count) + ") outside " + shape_str(v));
  }
  const int ix = x.id();
  Matrix out = v.middleRows(begin, count);
  return x.tape()->push(std::move(out), {ix}, [ix, begin, count](Tape& t, const Tape::Node& n) {
    const Matrix& v = t.value(ix);
    Matrix g = Matrix::Zero(v.rows(), v.cols());
    g.middleRows(begin, count) = n.grad;
    t.accumulate(ix, g);
  });
}

}  // namespace ops

}  // namespace m2v
