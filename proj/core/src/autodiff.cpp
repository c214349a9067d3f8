#include "coeforge/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "coeforge/errors.hpp"

namespace coeforge::ad {

namespace {

const Matrix kEmpty;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InputError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, false, {}});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(Matrix value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, true, {}});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::external(const Matrix& value, bool requires_grad) {
  nodes_.push_back(Node{{}, &value, {}, requires_grad, {}});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.alias != nullptr ? *n.alias : n.value;
}

const Matrix& Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.grad.size() == 0 ? kEmpty : n.grad;
}

double Tape::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.rows() != 1 || m.cols() != 1) throw InputError("scalar: node is not 1x1");
  return m(0, 0);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn backward) {
  bool tracked = false;
  for (Var in : inputs) tracked = tracked || nodes_[in.id].requires_grad;
  nodes_.push_back(Node{std::move(value), nullptr, {}, tracked, tracked ? std::move(backward) : BackwardFn{}});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var root) {
  for (Node& n : nodes_) n.grad.resize(0, 0);
  const Matrix& rv = value(root);
  if (rv.rows() != 1 || rv.cols() != 1) throw InputError("backward: root must be 1x1");
  if (!std::isfinite(rv(0, 0))) throw InternalError("backward: non-finite loss value");
  if (!nodes_[root.id].requires_grad) return;
  nodes_[root.id].grad = Matrix::Ones(1, 1);
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0 || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

Var matmul(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.rows()) throw InputError("matmul: inner dimension mismatch");
  Matrix out = av * bv;
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

Var add(Tape& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "add");
  Matrix out = t.value(a) + t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "sub");
  Matrix out = t.value(a) - t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

Var scale(Tape& t, Var a, double factor) {
  Matrix out = factor * t.value(a);
  return t.record(std::move(out), {a}, [a, factor](Tape& tp, const Matrix& g) { tp.accumulate(a, factor * g); });
}

Var low_rank_update(Tape& t, Var w, Var down, Var up, double factor) {
  const Matrix& dv = t.value(down);
  const Matrix& uv = t.value(up);
  if (dv.rows() != t.value(w).rows() || uv.cols() != t.value(w).cols() || dv.cols() != uv.rows()) {
    throw InputError("low_rank_update: factor shapes do not match weight");
  }
  Matrix out = t.value(w) + factor * (dv * uv);
  return t.record(std::move(out), {w, down, up}, [w, down, up, factor](Tape& tp, const Matrix& g) {
    tp.accumulate(w, g);
    if (tp.requires_grad(down)) tp.accumulate(down, factor * (g * tp.value(up).transpose()));
    if (tp.requires_grad(up)) tp.accumulate(up, factor * (tp.value(down).transpose() * g));
  });
}

Var concat_rows(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw InputError("concat_rows: no parts");
  const Eigen::Index cols = t.value(parts[0]).cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw InputError("concat_rows: width mismatch");
    rows += t.value(p).rows();
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (Var p : parts) {
    const Matrix& pv = t.value(p);
    out.middleRows(offset, pv.rows()) = pv;
    offset += pv.rows();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [owned](Tape& tp, const Matrix& g) {
    Eigen::Index off = 0;
    for (Var p : owned) {
      const Eigen::Index r = tp.value(p).rows();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleRows(off, r));
      off += r;
    }
  });
}

Var slice_rows(Tape& t, Var a, Eigen::Index start, Eigen::Index count) {
  const Matrix& av = t.value(a);
  if (start < 0 || count < 0 || start + count > av.rows()) throw InputError("slice_rows: out of range");
  Matrix out = av.middleRows(start, count);
  return t.record(std::move(out), {a}, [a, start, count](Tape& tp, const Matrix& g) {
    const Matrix& src = tp.value(a);
    Matrix full = Matrix::Zero(src.rows(), src.cols());
    full.middleRows(start, count) = g;
    tp.accumulate(a, full);
  });
}

Var gather_rows(Tape& t, Var table, std::span<const TokenId> ids) {
  const Matrix& tv = t.value(table);
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw InputError("gather_rows: id " + std::to_string(ids[i]) + " out of range [0, " +
                       std::to_string(tv.rows()) + ")");
    }
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<TokenId> owned(ids.begin(), ids.end());
  return t.record(std::move(out), {table}, [table, owned](Tape& tp, const Matrix& g) {
    const Matrix& src = tp.value(table);
    Matrix full = Matrix::Zero(src.rows(), src.cols());
    for (std::size_t i = 0; i < owned.size(); ++i) full.row(owned[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accumulate(table, full);
  });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = t.value(x);
  const Matrix& gv = t.value(gain);
  const Matrix& bv = t.value(bias);
  const Eigen::Index n = xv.cols();
  if (gv.cols() != n || bv.cols() != n || gv.rows() != 1 || bv.rows() != 1) {
    throw InputError("layer_norm: gain/bias must be 1xC");
  }
  Matrix xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gv.row(0).array()).rowwise() + bv.row(0).array();
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Matrix& g) {
                    const Matrix& gv2 = tp.value(gain);
                    if (tp.requires_grad(gain)) tp.accumulate(gain, (g.array() * xhat.array()).colwise().sum().matrix());
                    if (tp.requires_grad(bias)) tp.accumulate(bias, g.colwise().sum());
                    if (tp.requires_grad(x)) {
                      Matrix dxhat = g.array().rowwise() * gv2.row(0).array();
                      Matrix dx(dxhat.rows(), dxhat.cols());
                      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                        const double m1 = dxhat.row(r).mean();
                        const double m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(dxhat.cols());
                        dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                      }
                      tp.accumulate(x, dx);
                    }
                  });
}

namespace {
constexpr double kGeluAlpha = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace

Var gelu(Tape& t, Var x) {
  constexpr double kAlpha = kGeluAlpha;
  constexpr double kCubic = kGeluCubic;
  const Matrix& xv = t.value(x);
  Matrix th = (kAlpha * (xv.array() + kCubic * xv.array().cube())).tanh();
  Matrix out = 0.5 * xv.array() * (1.0 + th.array());
  return t.record(std::move(out), {x}, [x, th = std::move(th)](Tape& tp, const Matrix& g) {
    const auto xa = tp.value(x).array();
    const auto ta = th.array();
    Matrix d = 0.5 * (1.0 + ta) + 0.5 * xa * (1.0 - ta.square()) * kGeluAlpha * (1.0 + 3.0 * kGeluCubic * xa.square());
    tp.accumulate(x, (g.array() * d.array()).matrix());
  });
}

Var causal_attention(Tape& t, Var q, Var k, Var v, int heads) {
  const Matrix& qv = t.value(q);
  const Matrix& kv = t.value(k);
  const Matrix& vv = t.value(v);
  const Eigen::Index len = qv.rows();
  const Eigen::Index width = qv.cols();
  if (heads <= 0 || width % heads != 0) throw InputError("causal_attention: width not divisible by heads");
  require_same_shape(qv, kv, "causal_attention");
  require_same_shape(qv, vv, "causal_attention");
  const Eigen::Index hd = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  Matrix out(len, width);
  for (int h = 0; h < heads; ++h) {
    Matrix s = inv_sqrt * (qv.middleCols(h * hd, hd) * kv.middleCols(h * hd, hd).transpose());
    for (Eigen::Index i = 0; i < len; ++i) {
      const double mx = s.row(i).head(i + 1).maxCoeff();
      double z = 0.0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        s(i, j) = std::exp(s(i, j) - mx);
        z += s(i, j);
      }
      s.row(i).head(i + 1) /= z;
      s.row(i).tail(len - i - 1).setZero();
    }
    out.middleCols(h * hd, hd) = s * vv.middleCols(h * hd, hd);
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return t.record(std::move(out), {q, k, v},
                  [q, k, v, heads, hd, inv_sqrt, probs = std::move(probs)](Tape& tp, const Matrix& g) {
                    const Matrix& qv2 = tp.value(q);
                    const Matrix& kv2 = tp.value(k);
                    const Matrix& vv2 = tp.value(v);
                    Matrix dq = Matrix::Zero(qv2.rows(), qv2.cols());
                    Matrix dk = Matrix::Zero(kv2.rows(), kv2.cols());
                    Matrix dv = Matrix::Zero(vv2.rows(), vv2.cols());
                    for (int h = 0; h < heads; ++h) {
                      const Matrix& p = probs[static_cast<std::size_t>(h)];
                      const auto gh = g.middleCols(h * hd, hd);
                      dv.middleCols(h * hd, hd) = p.transpose() * gh;
                      Matrix dp = gh * vv2.middleCols(h * hd, hd).transpose();
                      Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
                      Matrix ds = p.array() * (dp.array().colwise() - row_dot.array());
                      ds *= inv_sqrt;
                      dq.middleCols(h * hd, hd) = ds * kv2.middleCols(h * hd, hd);
                      dk.middleCols(h * hd, hd) = ds.transpose() * qv2.middleCols(h * hd, hd);
                    }
                    tp.accumulate(q, dq);
                    tp.accumulate(k, dk);
                    tp.accumulate(v, dv);
                  });
}

Var target_log_prob(Tape& t, Var logits, std::span<const TokenId> targets) {
  const Matrix& lv = t.value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != lv.rows()) {
    throw InputError("target_log_prob: one target per logits row required");
  }
  Matrix probs(lv.rows(), lv.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    const TokenId tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= lv.cols()) throw InputError("target_log_prob: target id out of range");
    const double mx = lv.row(r).maxCoeff();
    probs.row(r) = (lv.row(r).array() - mx).exp();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    total += lv(r, tgt) - mx - std::log(z);
  }
  std::vector<TokenId> owned(targets.begin(), targets.end());
  Matrix out(1, 1);
  out(0, 0) = total;
  return t.record(std::move(out), {logits},
                  [logits, owned, probs = std::move(probs)](Tape& tp, const Matrix& g) {
                    Matrix d = -g(0, 0) * probs;
                    for (std::size_t r = 0; r < owned.size(); ++r) d(static_cast<Eigen::Index>(r), owned[r]) += g(0, 0);
                    tp.accumulate(logits, d);
                  });
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

Var log_sigmoid(Tape& t, Var x) {
  const Matrix& xv = t.value(x);
  Matrix out = xv.unaryExpr([](double z) { return -softplus(-z); });
  return t.record(std::move(out), {x}, [x](Tape& tp, const Matrix& g) {
    // d/dz log sigmoid(z) = sigmoid(-z)
    Matrix d = tp.value(x).unaryExpr([](double z) {
      return z >= 0.0 ? std::exp(-z) / (1.0 + std::exp(-z)) : 1.0 / (1.0 + std::exp(z));
    });
    tp.accumulate(x, (g.array() * d.array()).matrix());
  });
}

Var sum(Tape& t, Var a) {
  Matrix out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.record(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    const Matrix& av = tp.value(a);
    tp.accumulate(a, Matrix::Constant(av.rows(), av.cols(), g(0, 0)));
  });
}

Var sum(Tape& t, std::span<const Var> scalars) {
  Matrix out = Matrix::Zero(1, 1);
  for (Var s : scalars) {
    if (t.value(s).size() != 1) throw InputError("sum: expected 1x1 terms");
    out(0, 0) += t.value(s)(0, 0);
  }
  std::vector<Var> owned(scalars.begin(), scalars.end());
  return t.record(std::move(out), scalars, [owned](Tape& tp, const Matrix& g) {
    for (Var s : owned) tp.accumulate(s, g);
  });
}

}  // namespace coeforge::ad
