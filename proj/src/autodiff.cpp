#include "ecpec/autodiff.hpp"

#include "ecpec/params.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace ecpec::ad {

namespace {

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

Graph& graph_of(Var a) {
  require(a.valid(), "autodiff: invalid variable");
  return *a.graph();
}

Graph& graph_of(Var a, Var b) {
  require(a.valid() && b.valid() && a.graph() == b.graph(), "autodiff: variables from different graphs");
  return *a.graph();
}

}  // namespace

const Matrix& Var::value() const { return graph_->value(id_); }

Var Graph::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, false});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::parameter(const ParameterStore& store, const std::string& name) {
  auto it = params_.find(name);
  if (it != params_.end()) return Var(this, it->second);
  nodes_.push_back(Node{store.get(name), Matrix(), nullptr, true});
  int id = static_cast<int>(nodes_.size() - 1);
  params_.emplace(name, id);
  return Var(this, id);
}

Var Graph::make(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return make(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
}

Var Graph::make(Matrix value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
  nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Graph::accumulate(int id, const Matrix& delta) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = delta;
  } else {
    n.grad += delta;
  }
}

void Graph::backward(Var root) {
  require(root.rows() == 1 && root.cols() == 1, "backward: root must be a scalar");
  backward(root, Matrix::Ones(1, 1));
}

void Graph::backward(Var root, const Matrix& seed) {
  require(root.graph() == this, "backward: root from another graph");
  require(seed.rows() == root.rows() && seed.cols() == root.cols(), "backward: seed shape mismatch");
  accumulate(root.id(), seed);
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.backward && n.grad.size() != 0) n.backward(*this, id);
  }
}

void Graph::collect(GradStore& grads) const {
  for (const auto& [name, id] : params_) {
    const Node& n = nodes_[id];
    Matrix& g = grads.at(name, n.value.rows(), n.value.cols());
    if (n.grad.size() != 0) g += n.grad;
  }
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  int ia = a.id(), ib = b.id();
  return g.make(a.value() * b.value(), {a, b}, [ia, ib](Graph& g, int self) {
    const Matrix& up = g.grad(self);
    if (g.requires_grad(ia)) g.accumulate(ia, up * g.value(ib).transpose());
    if (g.requires_grad(ib)) g.accumulate(ib, g.value(ia).transpose() * up);
  });
}

Var matmul_nt(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch");
  int ia = a.id(), ib = b.id();
  return g.make(a.value() * b.value().transpose(), {a, b}, [ia, ib](Graph& g, int self) {
    const Matrix& up = g.grad(self);
    if (g.requires_grad(ia)) g.accumulate(ia, up * g.value(ib));
    if (g.requires_grad(ib)) g.accumulate(ib, up.transpose() * g.value(ia));
  });
}

Var transpose(Var a) {
  Graph& g = graph_of(a);
  int ia = a.id();
  return g.make(a.value().transpose(), {a}, [ia](Graph& g, int self) {
    g.accumulate(ia, g.grad(self).transpose());
  });
}

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  int ia = a.id(), ib = b.id();
  return g.make(a.value() + b.value(), {a, b}, [ia, ib](Graph& g, int self) {
    g.accumulate(ia, g.grad(self));
    g.accumulate(ib, g.grad(self));
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  int ia = a.id(), ib = b.id();
  return g.make(a.value() - b.value(), {a, b}, [ia, ib](Graph& g, int self) {
    g.accumulate(ia, g.grad(self));
    if (g.requires_grad(ib)) g.accumulate(ib, -g.grad(self));
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  int ia = a.id(), ib = b.id();
  return g.make(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Graph& g, int self) {
    const Matrix& up = g.grad(self);
    if (g.requires_grad(ia)) g.accumulate(ia, up.cwiseProduct(g.value(ib)));
    if (g.requires_grad(ib)) g.accumulate(ib, up.cwiseProduct(g.value(ia)));
  });
}

Var div(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "div: shape mismatch");
  int ia = a.id(), ib = b.id();
  return g.make(a.value().cwiseQuotient(b.value()), {a, b}, [ia, ib](Graph& g, int self) {
    const Matrix& up = g.grad(self);
    const Matrix& bv = g.value(ib);
    if (g.requires_grad(ia)) g.accumulate(ia, up.cwiseQuotient(bv));
    if (g.requires_grad(ib)) {
      Matrix d = -up.cwiseProduct(g.value(ia)).cwiseQuotient(bv.cwiseProduct(bv));
      g.accumulate(ib, d);
    }
  });
}

Var scale(Var a, double s) {
  Graph& g = graph_of(a);
  int ia = a.id();
  return g.make(a.value() * s, {a}, [ia, s](Graph& g, int self) { g.accumulate(ia, g.grad(self) * s); });
}

Var add_scalar(Var a, double s) {
  Graph& g = graph_of(a);
  int ia = a.id();
  Matrix v = a.value().array() + s;
  return g.make(std::move(v), {a}, [ia](Graph& g, int self) { g.accumulate(ia, g.grad(self)); });
}

Var add_row(Var a, Var row) {
  Graph& g = graph_of(a, row);
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: bias shape mismatch");
  int ia = a.id(), ir = row.id();
  Matrix v = a.value().rowwise() + row.value().row(0);
  return g.make(std::move(v), {a, row}, [ia, ir](Graph& g, int self) {
    g.accumulate(ia, g.grad(self));
    if (g.requires_grad(ir)) g.accumulate(ir, g.grad(self).colwise().sum());
  });
}

Var outer_sum(Var col, Var other) {
  Graph& g = graph_of(col, other);
  require(col.cols() == 1 && other.cols() == 1, "outer_sum: expects column vectors");
  int ic = col.id(), io = other.id();
  Matrix v(col.rows(), other.rows());
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    for (Eigen::Index j = 0; j < v.cols(); ++j) v(i, j) = col.value()(i, 0) + other.value()(j, 0);
  return g.make(std::move(v), {col, other}, [ic, io](Graph& g, int self) {
    const Matrix& up = g.grad(self);
    if (g.requires_grad(ic)) g.accumulate(ic, up.rowwise().sum());
    if (g.requires_grad(io)) g.accumulate(io, up.colwise().sum().transpose());
  });
}

// ---------------------------------------------------------------------------

Var relu(Var a) {
  Graph& g = graph_of(a);
  int ia = a.id();
  Matrix v = a.value().cwiseMax(0.0);
  return g.make(std::move(v), {a}, [ia](Graph& g, int self) {
    Matrix d = (g.value(ia).array() > 0.0).cast<double>().matrix().cwiseProduct(g.grad(self));
    g.accumulate(ia, d);
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  Graph& g = graph_of(a);
  int ia = a.id();
  Matrix v = a.value().unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  return g.make(std::move(v), {a}, [ia](Graph& g, int self) {
    Matrix d = g.value(ia).unaryExpr([](double x) {
      double u = kGeluC * (x + kGeluA * x * x * x);
      double t = std::tanh(u);
      double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    });
    g.accumulate(ia, d.cwiseProduct(g.grad(self)));
  });
}

Var tanh(Var a) {
  Graph& g = graph_of(a);
  int ia = a.id();
  Matrix v = a.value().array().tanh().matrix();
  return g.make(std::move(v), {a}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    Matrix d = (1.0 - y.array().square()).matrix().cwiseProduct(g.grad(self));
    g.accumulate(ia, d);
  });
}

Var sigmoid(Var a) {
  Graph& g = graph_of(a);
  int ia = a.id();
  Matrix v = a.value().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  });
  return g.make(std::move(v), {a}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    Matrix d = (y.array() * (1.0 - y.array())).matrix().cwiseProduct(g.grad(self));
    g.accumulate(ia, d);
  });
}

// ---------------------------------------------------------------------------

namespace {

Matrix softmax_value(const Matrix& x, const Mask* allowed) {
  Matrix y = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if (!allowed || (*allowed)(i, j)) mx = std::max(mx, x(i, j));
    if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
    double z = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (allowed && !(*allowed)(i, j)) continue;
      y(i, j) = std::exp(x(i, j) - mx);
      z += y(i, j);
    }
    y.row(i) /= z;
  }
  return y;
}

}  // namespace

Var softmax_rows(Var a) {
  Graph& g = graph_of(a);
  int ia = a.id();
  return g.make(softmax_value(a.value(), nullptr), {a}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& up = g.grad(self);
    Matrix d = y.cwiseProduct(up);
    Eigen::VectorXd dots = d.rowwise().sum();
    d -= y.cwiseProduct(dots.replicate(1, y.cols()));
    g.accumulate(ia, d);
  });
}

Var softmax_rows(Var a, const Mask& allowed) {
  Graph& g = graph_of(a);
  require(allowed.rows() == a.rows() && allowed.cols() == a.cols(), "softmax_rows: mask shape mismatch");
  int ia = a.id();
  // Masked entries have y == 0, so the standard Jacobian already gives them
  // zero gradient.
  return g.make(softmax_value(a.value(), &allowed), {a}, [ia](Graph& g, int self) {
    const Matrix& y = g.value(self);
    const Matrix& up = g.grad(self);
    Matrix d = y.cwiseProduct(up);
    Eigen::VectorXd dots = d.rowwise().sum();
    d -= y.cwiseProduct(dots.replicate(1, y.cols()));
    g.accumulate(ia, d);
  });
}

Var log_softmax_rows(Var a, const Mask* allowed) {
  Graph& g = graph_of(a);
  if (allowed) require(allowed->rows() == a.rows() && allowed->cols() == a.cols(), "log_softmax_rows: mask shape");
  int ia = a.id();
  Matrix p = softmax_value(a.value(), allowed);
  Matrix v(a.rows(), a.cols());
  const double ninf = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    double mx = ninf;
    for (Eigen::Index j = 0; j < v.cols(); ++j)
      if (!allowed || (*allowed)(i, j)) mx = std::max(mx, a.value()(i, j));
    double z = 0.0;
    for (Eigen::Index j = 0; j < v.cols(); ++j)
      if (!allowed || (*allowed)(i, j)) z += std::exp(a.value()(i, j) - mx);
    double lse = mx + std::log(z);
    for (Eigen::Index j = 0; j < v.cols(); ++j)
      v(i, j) = (!allowed || (*allowed)(i, j)) ? a.value()(i, j) - lse : ninf;
  }
  return g.make(std::move(v), {a}, [ia, p = std::move(p)](Graph& g, int self) {
    Matrix up = g.grad(self);
    // Masked outputs are -inf constants; ignore any gradient sent to them.
    const Matrix& y = g.value(self);
    for (Eigen::Index i = 0; i < up.rows(); ++i)
      for (Eigen::Index j = 0; j < up.cols(); ++j)
        if (std::isinf(y(i, j))) up(i, j) = 0.0;
    Eigen::VectorXd s = up.rowwise().sum();
    Matrix d = up - p.cwiseProduct(s.replicate(1, p.cols()));
    g.accumulate(ia, d);
  });
}

Var layer_norm_rows(Var a, Var gamma, Var beta, double eps) {
  Graph& g = graph_of(a, gamma);
  require(gamma.rows() == 1 && gamma.cols() == a.cols() && beta.rows() == 1 && beta.cols() == a.cols(),
          "layer_norm_rows: gain/bias shape mismatch");
  const Eigen::Index n = a.rows(), d = a.cols();
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mu = a.value().row(i).mean();
    double var = (a.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (a.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix v = xhat.array().rowwise() * gamma.value().row(0).array();
  v.rowwise() += beta.value().row(0);
  int ia = a.id(), igm = gamma.id(), ib = beta.id();
  return g.make(std::move(v), {a, gamma, beta},
                [ia, igm, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, int self) {
                  const Matrix& up = g.grad(self);
                  const Eigen::Index dd = up.cols();
                  if (g.requires_grad(igm)) g.accumulate(igm, up.cwiseProduct(xhat).colwise().sum());
                  if (g.requires_grad(ib)) g.accumulate(ib, up.colwise().sum());
                  if (g.requires_grad(ia)) {
                    Matrix gx = up.array().rowwise() * g.value(igm).row(0).array();
                    Matrix dx(up.rows(), dd);
                    for (Eigen::Index i = 0; i < up.rows(); ++i) {
                      double m1 = gx.row(i).mean();
                      double m2 = gx.row(i).cwiseProduct(xhat.row(i)).mean();
                      dx.row(i) = (gx.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i);
                    }
                    g.accumulate(ia, dx);
                  }
                });
}

// ---------------------------------------------------------------------------

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Graph& g = graph_of(parts[0]);
  Eigen::Index rows = parts[0].rows(), cols = 0;
  for (const Var& p : parts) {
    require(p.graph() == &g && p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    layout.emplace_back(p.id(), off);
    off += p.cols();
  }
  return g.make(std::move(v), parts, [layout](Graph& g, int self) {
    const Matrix& up = g.grad(self);
    for (const auto& [id, o] : layout)
      if (g.requires_grad(id)) g.accumulate(id, up.middleCols(o, g.value(id).cols()));
  });
}

Var concat_cols(Var a, Var b) {
  Var parts[] = {a, b};
  return concat_cols(parts);
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Graph& g = graph_of(parts[0]);
  Eigen::Index cols = parts[0].cols(), rows = 0;
  for (const Var& p : parts) {
    require(p.graph() == &g && p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    layout.emplace_back(p.id(), off);
    off += p.rows();
  }
  return g.make(std::move(v), parts, [layout](Graph& g, int self) {
    const Matrix& up = g.grad(self);
    for (const auto& [id, o] : layout)
      if (g.requires_grad(id)) g.accumulate(id, up.middleRows(o, g.value(id).rows()));
  });
}

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  Graph& g = graph_of(a);
  require(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows: out of range");
  int ia = a.id();
  Eigen::Index rows = a.rows(), cols = a.cols();
  return g.make(a.value().middleRows(begin, count), {a}, [ia, begin, count, rows, cols](Graph& g, int self) {
    Matrix d = Matrix::Zero(rows, cols);
    d.middleRows(begin, count) = g.grad(self);
    g.accumulate(ia, d);
  });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  Graph& g = graph_of(a);
  require(begin >= 0 && count >= 0 && begin + count <= a.cols(), "slice_cols: out of range");
  int ia = a.id();
  Eigen::Index rows = a.rows(), cols = a.cols();
  return g.make(a.value().middleCols(begin, count), {a}, [ia, begin, count, rows, cols](Graph& g, int self) {
    Matrix d = Matrix::Zero(rows, cols);
    d.middleCols(begin, count) = g.grad(self);
    g.accumulate(ia, d);
  });
}

Var gather_rows(Var table, std::span<const int> rows) {
  Graph& g = graph_of(table);
  Matrix v(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < table.rows(), "gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = table.value().row(rows[i]);
  }
  int it = table.id();
  std::vector<int> idx(rows.begin(), rows.end());
  Eigen::Index trows = table.rows();
  return g.make(std::move(v), {table}, [it, idx = std::move(idx), trows](Graph& g, int self) {
    const Matrix& up = g.grad(self);
    Matrix d = Matrix::Zero(trows, up.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += up.row(static_cast<Eigen::Index>(i));
    g.accumulate(it, d);
  });
}

Var pick(Var a, Eigen::Index row, Eigen::Index col) {
  Graph& g = graph_of(a);
  require(row >= 0 && row < a.rows() && col >= 0 && col < a.cols(), "pick: out of range");
  int ia = a.id();
  Eigen::Index rows = a.rows(), cols = a.cols();
  Matrix v(1, 1);
  v(0, 0) = a.value()(row, col);
  return g.make(std::move(v), {a}, [ia, row, col, rows, cols](Graph& g, int self) {
    Matrix d = Matrix::Zero(rows, cols);
    d(row, col) = g.grad(self)(0, 0);
    g.accumulate(ia, d);
  });
}

Var select_cols(Var a, std::span<const int> cols) {
  Graph& g = graph_of(a);
  Matrix v(a.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    require(cols[j] >= 0 && cols[j] < a.cols(), "select_cols: index out of range");
    v.col(static_cast<Eigen::Index>(j)) = a.value().col(cols[j]);
  }
  int ia = a.id();
  std::vector<int> idx(cols.begin(), cols.end());
  Eigen::Index rows = a.rows(), acols = a.cols();
  return g.make(std::move(v), {a}, [ia, idx = std::move(idx), rows, acols](Graph& g, int self) {
    const Matrix& up = g.grad(self);
    Matrix d = Matrix::Zero(rows, acols);
    for (std::size_t j = 0; j < idx.size(); ++j) d.col(idx[j]) += up.col(static_cast<Eigen::Index>(j));
    g.accumulate(ia, d);
  });
}

Var sum(Var a) {
  Graph& g = graph_of(a);
  int ia = a.id();
  Eigen::Index rows = a.rows(), cols = a.cols();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return g.make(std::move(v), {a}, [ia, rows, cols](Graph& g, int self) {
    g.accumulate(ia, Matrix::Constant(rows, cols, g.grad(self)(0, 0)));
  });
}

Var mean(Var a) {
  require(a.value().size() > 0, "mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var col_sums(Var a) {
  Graph& g = graph_of(a);
  int ia = a.id();
  Eigen::Index rows = a.rows();
  return g.make(a.value().colwise().sum(), {a}, [ia, rows](Graph& g, int self) {
    g.accumulate(ia, g.grad(self).replicate(rows, 1));
  });
}

// ---------------------------------------------------------------------------

Var bce_with_logits(Var logits, std::span<const double> targets) {
  Graph& g = graph_of(logits);
  const Matrix& x = logits.value();
  require(static_cast<std::size_t>(x.size()) == targets.size() && !targets.empty(), "bce_with_logits: size mismatch");
  double total = 0.0;
  const double n = static_cast<double>(targets.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    double z = x.data()[k], y = targets[static_cast<std::size_t>(k)];
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Matrix v(1, 1);
  v(0, 0) = total / n;
  int il = logits.id();
  std::vector<double> y(targets.begin(), targets.end());
  return g.make(std::move(v), {logits}, [il, y = std::move(y), n](Graph& g, int self) {
    const Matrix& x = g.value(il);
    Matrix d(x.rows(), x.cols());
    double up = g.grad(self)(0, 0);
    for (Eigen::Index k = 0; k < x.size(); ++k) {
      double z = x.data()[k];
      double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      d.data()[k] = up * (s - y[static_cast<std::size_t>(k)]) / n;
    }
    g.accumulate(il, d);
  });
}

Var cross_entropy(Var logits_row, int target, const Mask* allowed) {
  require(logits_row.rows() == 1, "cross_entropy: expects a single row");
  require(target >= 0 && target < logits_row.cols(), "cross_entropy: target out of range");
  if (allowed) require((*allowed)(0, target), "cross_entropy: target is masked");
  return scale(pick(log_softmax_rows(logits_row, allowed), 0, target), -1.0);
}

}  // namespace ecpec::ad
