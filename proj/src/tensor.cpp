#include "kws/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace kws {

namespace {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimension must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
    throw std::invalid_argument("data length " + std::to_string(data_.size()) +
                                " does not match shape " + kws::shape_str(shape_));
  }
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

int Tensor::rows() const {
  if (rank() == 1) return 1;
  if (rank() == 2) return shape_[0];
  throw std::logic_error("rows() on tensor of rank " + std::to_string(rank()));
}

int Tensor::cols() const {
  if (rank() == 1) return shape_[0];
  if (rank() == 2) return shape_[1];
  throw std::logic_error("cols() on tensor of rank " + std::to_string(rank()));
}

std::string Tensor::shape_str() const { return kws::shape_str(shape_); }

std::vector<double>& Tensor::grad() {
  if (grad_.empty()) grad_.assign(data_.size(), 0.0);
  return grad_;
}

void Tensor::zero_grad() { grad_.assign(data_.size(), 0.0); }

std::string shape_str(std::span<const int> shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void mm_nn(const double* a, const double* b, double* c, int m, int k, int p, bool acc) {
  if (!acc) std::fill(c, c + static_cast<size_t>(m) * p, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* ci = c + static_cast<size_t>(i) * p;
    for (int kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      const double* bk = b + static_cast<size_t>(kk) * p;
      for (int j = 0; j < p; ++j) ci[j] += av * bk[j];
    }
  }
}

void mm_nt(const double* a, const double* b, double* c, int m, int k, int p, bool acc) {
  // C[m x p] = A[m x k] * B[p x k]^T
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* ci = c + static_cast<size_t>(i) * p;
    for (int j = 0; j < p; ++j) {
      const double* bj = b + static_cast<size_t>(j) * k;
      double s = 0.0;
      for (int kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
      ci[j] = acc ? ci[j] + s : s;
    }
  }
}

void mm_tn(const double* a, const double* b, double* c, int m, int k, int p, bool acc) {
  // C[m x p] = A[k x m]^T * B[k x p]
  if (!acc) std::fill(c, c + static_cast<size_t>(m) * p, 0.0);
  for (int kk = 0; kk < k; ++kk) {
    const double* ak = a + static_cast<size_t>(kk) * m;
    const double* bk = b + static_cast<size_t>(kk) * p;
    for (int i = 0; i < m; ++i) {
      const double av = ak[i];
      double* ci = c + static_cast<size_t>(i) * p;
      for (int j = 0; j < p; ++j) ci[j] += av * bk[j];
    }
  }
}

double log_sum_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

Tape::Id Tape::push(Tensor value, bool needs_grad) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.grad.assign(static_cast<size_t>(n.value.numel()), 0.0);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

void Tape::set_back(Id id, std::function<void(Tape&)> fn) {
  nodes_[static_cast<size_t>(id)].back = std::move(fn);
}

Tape::Id Tape::constant(Tensor v) { return push(std::move(v), false); }

Tape::Id Tape::param(const Tensor& p) {
  Id id = push(p, true);
  nodes_[static_cast<size_t>(id)].param = &p;
  param_ids_.push_back(id);
  return id;
}

const std::vector<double>& Tape::grad(Id id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.needs_grad) throw std::logic_error("grad requested for a node that does not track gradients");
  return n.grad;
}

std::vector<Tape::ParamGrad> Tape::param_grads() const {
  std::vector<ParamGrad> out;
  out.reserve(param_ids_.size());
  for (Id id : param_ids_) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    out.push_back({n.param, &n.grad});
  }
  return out;
}

Tape::Id Tape::add(Id a, Id b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) {
    throw std::invalid_argument("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  Tensor out(ta.shape());
  const std::int64_t n = ta.numel();
  for (std::int64_t i = 0; i < n; ++i) out.at(i) = ta.at(i) + tb.at(i);
  Id o = push(std::move(out), needs(a) || needs(b));
  if (needs(o)) {
    set_back(o, [a, b, o](Tape& t) {
      const auto& go = t.grad_mut(o);
      if (t.needs(a)) {
        auto& ga = t.grad_mut(a);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (t.needs(b)) {
        auto& gb = t.grad_mut(b);
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return o;
}

Tape::Id Tape::sub(Id a, Id b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) {
    throw std::invalid_argument("sub: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  Tensor out(ta.shape());
  const std::int64_t n = ta.numel();
  for (std::int64_t i = 0; i < n; ++i) out.at(i) = ta.at(i) - tb.at(i);
  Id o = push(std::move(out), needs(a) || needs(b));
  if (needs(o)) {
    set_back(o, [a, b, o](Tape& t) {
      const auto& go = t.grad_mut(o);
      if (t.needs(a)) {
        auto& ga = t.grad_mut(a);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (t.needs(b)) {
        auto& gb = t.grad_mut(b);
        for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return o;
}

Tape::Id Tape::mul(Id a, Id b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) {
    throw std::invalid_argument("mul: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  Tensor out(ta.shape());
  const std::int64_t n = ta.numel();
  for (std::int64_t i = 0; i < n; ++i) out.at(i) = ta.at(i) * tb.at(i);
  Id o = push(std::move(out), needs(a) || needs(b));
  if (needs(o)) {
    set_back(o, [a, b, o](Tape& t) {
      const auto& go = t.grad_mut(o);
      const Tensor& va = t.val(a);
      const Tensor& vb = t.val(b);
      if (t.needs(a)) {
        auto& ga = t.grad_mut(a);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * vb.at(static_cast<std::int64_t>(i));
      }
      if (t.needs(b)) {
        auto& gb = t.grad_mut(b);
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * va.at(static_cast<std::int64_t>(i));
      }
    });
  }
  return o;
}

Tape::Id Tape::scale(Id a, double s) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  const std::int64_t n = ta.numel();
  for (std::int64_t i = 0; i < n; ++i) out.at(i) = ta.at(i) * s;
  Id o = push(std::move(out), needs(a));
  if (needs(o)) {
    set_back(o, [a, o, s](Tape& t) {
      const auto& go = t.grad_mut(o);
      auto& ga = t.grad_mut(a);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
    });
  }
  return o;
}

Tape::Id Tape::add_row_bias(Id x, Id bias) {
  const Tensor& tx = val(x);
  const Tensor& tb = val(bias);
  if (tb.rank() != 1 || tb.dim(0) != tx.cols()) {
    throw std::invalid_argument("add_row_bias: bias " + tb.shape_str() + " does not match " + tx.shape_str());
  }
  const int m = tx.rows(), c = tx.cols();
  Tensor out(tx.shape());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) out.at(static_cast<std::int64_t>(i) * c + j) = tx.at(static_cast<std::int64_t>(i) * c + j) + tb.at(j);
  Id o = push(std::move(out), needs(x) || needs(bias));
  if (needs(o)) {
    set_back(o, [x, bias, o, m, c](Tape& t) {
      const auto& go = t.grad_mut(o);
      if (t.needs(x)) {
        auto& gx = t.grad_mut(x);
        for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (t.needs(bias)) {
        auto& gb = t.grad_mut(bias);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += go[static_cast<size_t>(i) * c + j];
      }
    });
  }
  return o;
}

Tape::Id Tape::sigmoid(Id a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  const std::int64_t n = ta.numel();
  for (std::int64_t i = 0; i < n; ++i) out.at(i) = stable_sigmoid(ta.at(i));
  Id o = push(std::move(out), needs(a));
  if (needs(o)) {
    set_back(o, [a, o](Tape& t) {
      const auto& go = t.grad_mut(o);
      const Tensor& y = t.val(o);
      auto& ga = t.grad_mut(a);
      for (size_t i = 0; i < go.size(); ++i) {
        const double yi = y.at(static_cast<std::int64_t>(i));
        ga[i] += go[i] * yi * (1.0 - yi);
      }
    });
  }
  return o;
}

Tape::Id Tape::swish(Id a) {
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  const std::int64_t n = ta.numel();
  for (std::int64_t i = 0; i < n; ++i) out.at(i) = ta.at(i) * stable_sigmoid(ta.at(i));
  Id o = push(std::move(out), needs(a));
  if (needs(o)) {
    set_back(o, [a, o](Tape& t) {
      const auto& go = t.grad_mut(o);
      const Tensor& x = t.val(a);
      auto& ga = t.grad_mut(a);
      for (size_t i = 0; i < go.size(); ++i) {
        const double s = stable_sigmoid(x.at(static_cast<std::int64_t>(i)));
        ga[i] += go[i] * s * (1.0 + x.at(static_cast<std::int64_t>(i)) * (1.0 - s));
      }
    });
  }
  return o;
}

Tape::Id Tape::glu_cols(Id a) {
  const Tensor& ta = val(a);
  if (ta.cols() % 2 != 0) {
    throw std::invalid_argument("glu_cols: odd column count in " + ta.shape_str());
  }
  const int m = ta.rows(), c = ta.cols() / 2;
  Tensor out({m, c});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j)
      out.at(i, j) = ta.at(i, j) * stable_sigmoid(ta.at(i, j + c));
  Id o = push(std::move(out), needs(a));
  if (needs(o)) {
    set_back(o, [a, o, m, c](Tape& t) {
      const auto& go = t.grad_mut(o);
      const Tensor& x = t.val(a);
      auto& ga = t.grad_mut(a);
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < c; ++j) {
          const double g = go[static_cast<size_t>(i) * c + j];
          const double av = x.at(i, j);
          const double s = stable_sigmoid(x.at(i, j + c));
          ga[static_cast<size_t>(i) * (2 * c) + j] += g * s;
          ga[static_cast<size_t>(i) * (2 * c) + j + c] += g * av * s * (1.0 - s);
        }
      }
    });
  }
  return o;
}

Tape::Id Tape::reshape(Id a, std::vector<int> shape) {
  const Tensor& ta = val(a);
  if (shape_numel(shape) != ta.numel()) {
    throw std::invalid_argument("reshape: cannot view " + ta.shape_str() + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), ta.vec());
  Id o = push(std::move(out), needs(a));
  if (needs(o)) {
    set_back(o, [a, o](Tape& t) {
      const auto& go = t.grad_mut(o);
      auto& ga = t.grad_mut(a);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return o;
}

Tape::Id Tape::slice_rows(Id a, int r0, int r1) {
  const Tensor& ta = val(a);
  const int m = ta.rows(), c = ta.cols();
  if (r0 < 0 || r1 > m || r0 >= r1) {
    throw std::invalid_argument("slice_rows: invalid range [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ") for " + ta.shape_str());
  }
  Tensor out({r1 - r0, c});
  std::copy(ta.data() + static_cast<size_t>(r0) * c, ta.data() + static_cast<size_t>(r1) * c, out.data());
  Id o = push(std::move(out), needs(a));
  if (needs(o)) {
    set_back(o, [a, o, r0, c](Tape& t) {
      const auto& go = t.grad_mut(o);
      auto& ga = t.grad_mut(a);
      for (size_t i = 0; i < go.size(); ++i) ga[static_cast<size_t>(r0) * c + i] += go[i];
    });
  }
  return o;
}

Tape::Id Tape::slice_cols(Id a, int c0, int c1) {
  const Tensor& ta = val(a);
  const int m = ta.rows(), c = ta.cols();
  if (c0 < 0 || c1 > c || c0 >= c1) {
    throw std::invalid_argument("slice_cols: invalid range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for " + ta.shape_str());
  }
  const int w = c1 - c0;
  Tensor out({m, w});
  for (int i = 0; i < m; ++i)
    std::copy(ta.data() + static_cast<size_t>(i) * c + c0, ta.data() + static_cast<size_t>(i) * c + c1,
              out.data() + static_cast<size_t>(i) * w);
  Id o = push(std::move(out), needs(a));
  if (needs(o)) {
    set_back(o, [a, o, c0, c, w, m](Tape& t) {
      const auto& go = t.grad_mut(o);
      auto& ga = t.grad_mut(a);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) ga[static_cast<size_t>(i) * c + c0 + j] += go[static_cast<size_t>(i) * w + j];
    });
  }
  return o;
}

Tape::Id Tape::concat_cols(std::span<const Id> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int m = val(parts[0]).rows();
  int total = 0;
  bool ng = false;
  for (Id p : parts) {
    if (val(p).rows() != m) {
      throw std::invalid_argument("concat_cols: row mismatch " + val(parts[0]).shape_str() + " vs " +
                                  val(p).shape_str());
    }
    total += val(p).cols();
    ng = ng || needs(p);
  }
  Tensor out({m, total});
  int off = 0;
  for (Id p : parts) {
    const Tensor& tp = val(p);
    const int w = tp.cols();
    for (int i = 0; i < m; ++i)
      std::copy(tp.data() + static_cast<size_t>(i) * w, tp.data() + static_cast<size_t>(i + 1) * w,
                out.data() + static_cast<size_t>(i) * total + off);
    off += w;
  }
  std::vector<Id> ps(parts.begin(), parts.end());
  Id o = push(std::move(out), ng);
  if (needs(o)) {
    set_back(o, [ps, o, m, total](Tape& t) {
      const auto& go = t.grad_mut(o);
      int off2 = 0;
      for (Id p : ps) {
        const int w = t.val(p).cols();
        if (t.needs(p)) {
          auto& gp = t.grad_mut(p);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              gp[static_cast<size_t>(i) * w + j] += go[static_cast<size_t>(i) * total + off2 + j];
        }
        off2 += w;
      }
    });
  }
  return o;
}

Tape::Id Tape::gather_rows(Id table, std::vector<int> ids) {
  const Tensor& tt = val(table);
  const int rows = tt.rows(), c = tt.cols();
  for (int id : ids) {
    if (id < 0 || id >= rows) {
      throw std::out_of_range("gather_rows: id " + std::to_string(id) + " outside table " + tt.shape_str());
    }
  }
  Tensor out({static_cast<int>(ids.size()), c});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(tt.data() + static_cast<size_t>(ids[i]) * c, tt.data() + static_cast<size_t>(ids[i] + 1) * c,
              out.data() + i * c);
  Id o = push(std::move(out), needs(table));
  if (needs(o)) {
    set_back(o, [table, o, ids = std::move(ids), c](Tape& t) {
      const auto& go = t.grad_mut(o);
      auto& gt = t.grad_mut(table);
      for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < c; ++j) gt[static_cast<size_t>(ids[i]) * c + j] += go[i * c + j];
    });
  }
  return o;
}

Tape::Id Tape::sum(Id a) {
  const Tensor& ta = val(a);
  double s = 0.0;
  for (std::int64_t i = 0; i < ta.numel(); ++i) s += ta.at(i);
  Id o = push(Tensor::scalar(s), needs(a));
  if (needs(o)) {
    set_back(o, [a, o](Tape& t) {
      const double g = t.grad_mut(o)[0];
      auto& ga = t.grad_mut(a);
      for (auto& v : ga) v += g;
    });
  }
  return o;
}

Tape::Id Tape::mean(Id a) {
  const Tensor& ta = val(a);
  const double inv = 1.0 / static_cast<double>(ta.numel());
  double s = 0.0;
  for (std::int64_t i = 0; i < ta.numel(); ++i) s += ta.at(i);
  Id o = push(Tensor::scalar(s * inv), needs(a));
  if (needs(o)) {
    set_back(o, [a, o, inv](Tape& t) {
      const double g = t.grad_mut(o)[0] * inv;
      auto& ga = t.grad_mut(a);
      for (auto& v : ga) v += g;
    });
  }
  return o;
}

Tape::Id Tape::weighted_sum(std::span<const Id> scalars, std::span<const double> coeff) {
  if (scalars.size() != coeff.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  double s = 0.0;
  bool ng = false;
  for (size_t i = 0; i < scalars.size(); ++i) {
    const Tensor& v = val(scalars[i]);
    if (v.numel() != 1) throw std::invalid_argument("weighted_sum: non-scalar input " + v.shape_str());
    s += coeff[i] * v.at(0);
    ng = ng || needs(scalars[i]);
  }
  std::vector<Id> ids(scalars.begin(), scalars.end());
  std::vector<double> cs(coeff.begin(), coeff.end());
  Id o = push(Tensor::scalar(s), ng);
  if (needs(o)) {
    set_back(o, [ids, cs, o](Tape& t) {
      const double g = t.grad_mut(o)[0];
      for (size_t i = 0; i < ids.size(); ++i)
        if (t.needs(ids[i])) t.grad_mut(ids[i])[0] += g * cs[i];
    });
  }
  return o;
}

Tape::Id Tape::matmul(Id a, Id b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.cols() != tb.rows()) {
    throw std::invalid_argument("matmul: dimension mismatch " + ta.shape_str() + " * " + tb.shape_str());
  }
  const int m = ta.rows(), k = ta.cols(), p = tb.cols();
  Tensor out({m, p});
  mm_nn(ta.data(), tb.data(), out.data(), m, k, p, false);
  Id o = push(std::move(out), needs(a) || needs(b));
  if (needs(o)) {
    set_back(o, [a, b, o, m, k, p](Tape& t) {
      const auto& go = t.grad_mut(o);
      if (t.needs(a)) mm_nt(go.data(), t.val(b).data(), t.grad_mut(a).data(), m, p, k, true);
      if (t.needs(b)) mm_tn(t.val(a).data(), go.data(), t.grad_mut(b).data(), k, m, p, true);
    });
  }
  return o;
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.cols() != tb.cols()) {
    throw std::invalid_argument("matmul_nt: dimension mismatch " + ta.shape_str() + " * " + tb.shape_str() + "^T");
  }
  const int m = ta.rows(), k = ta.cols(), p = tb.rows();
  Tensor out({m, p});
  mm_nt(ta.data(), tb.data(), out.data(), m, k, p, false);
  Id o = push(std::move(out), needs(a) || needs(b));
  if (needs(o)) {
    set_back(o, [a, b, o, m, k, p](Tape& t) {
      const auto& go = t.grad_mut(o);
      // dA += dC * B ; dB += dC^T * A
      if (t.needs(a)) mm_nn(go.data(), t.val(b).data(), t.grad_mut(a).data(), m, p, k, true);
      if (t.needs(b)) mm_tn(go.data(), t.val(a).data(), t.grad_mut(b).data(), p, m, k, true);
    });
  }
  return o;
}

Tape::Id Tape::softmax_rows(Id a) {
  const Tensor& ta = val(a);
  const int m = ta.rows(), c = ta.cols();
  for (std::int64_t i = 0; i < ta.numel(); ++i) {
    if (std::isnan(ta.at(i))) throw std::invalid_argument("softmax_rows: NaN input");
  }
  Tensor out(ta.shape());
  for (int i = 0; i < m; ++i) {
    const double* xi = ta.data() + static_cast<size_t>(i) * c;
    double* yi = out.data() + static_cast<size_t>(i) * c;
    double mx = xi[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      z += yi[j];
    }
    const double inv = 1.0 / z;
    for (int j = 0; j < c; ++j) yi[j] *= inv;
  }
  Id o = push(std::move(out), needs(a));
  if (needs(o)) {
    set_back(o, [a, o, m, c](Tape& t) {
      const auto& go = t.grad_mut(o);
      const Tensor& y = t.val(o);
      auto& ga = t.grad_mut(a);
      for (int i = 0; i < m; ++i) {
        const double* yi = y.data() + static_cast<size_t>(i) * c;
        const double* gi = go.data() + static_cast<size_t>(i) * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += gi[j] * yi[j];
        for (int j = 0; j < c; ++j) ga[static_cast<size_t>(i) * c + j] += yi[j] * (gi[j] - dot);
      }
    });
  }
  return o;
}

Tape::Id Tape::layer_norm_rows(Id x, Id gamma, Id beta, double eps) {
  const Tensor& tx = val(x);
  const int m = tx.rows(), c = tx.cols();
  const Tensor& tg = val(gamma);
  const Tensor& tb = val(beta);
  if (tg.numel() != c || tb.numel() != c) {
    throw std::invalid_argument("layer_norm_rows: affine shape " + tg.shape_str() + "/" + tb.shape_str() +
                                " does not match " + tx.shape_str());
  }
  Tensor out(tx.shape());
  std::vector<double> inv_std(static_cast<size_t>(m));
  std::vector<double> meanv(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const double* xi = tx.data() + static_cast<size_t>(i) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += xi[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    meanv[static_cast<size_t>(i)] = mu;
    inv_std[static_cast<size_t>(i)] = is;
    double* yi = out.data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) yi[j] = tg.at(j) * ((xi[j] - mu) * is) + tb.at(j);
  }
  Id o = push(std::move(out), needs(x) || needs(gamma) || needs(beta));
  if (needs(o)) {
    set_back(o, [x, gamma, beta, o, m, c, meanv = std::move(meanv), inv_std = std::move(inv_std)](Tape& t) {
      const auto& go = t.grad_mut(o);
      const Tensor& tx2 = t.val(x);
      const Tensor& tg2 = t.val(gamma);
      for (int i = 0; i < m; ++i) {
        const double* xi = tx2.data() + static_cast<size_t>(i) * c;
        const double* gi = go.data() + static_cast<size_t>(i) * c;
        const double mu = meanv[static_cast<size_t>(i)];
        const double is = inv_std[static_cast<size_t>(i)];
        if (t.needs(gamma)) {
          auto& gg = t.grad_mut(gamma);
          for (int j = 0; j < c; ++j) gg[static_cast<size_t>(j)] += gi[j] * ((xi[j] - mu) * is);
        }
        if (t.needs(beta)) {
          auto& gb = t.grad_mut(beta);
          for (int j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += gi[j];
        }
        if (t.needs(x)) {
          auto& gx = t.grad_mut(x);
          // dxhat = dy*gamma; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          double s1 = 0.0, s2 = 0.0;
          for (int j = 0; j < c; ++j) {
            const double dxh = gi[j] * tg2.at(j);
            const double xh = (xi[j] - mu) * is;
            s1 += dxh;
            s2 += dxh * xh;
          }
          s1 /= c;
          s2 /= c;
          for (int j = 0; j < c; ++j) {
            const double dxh = gi[j] * tg2.at(j);
            const double xh = (xi[j] - mu) * is;
            gx[static_cast<size_t>(i) * c + j] += is * (dxh - s1 - xh * s2);
          }
        }
      }
    });
  }
  return o;
}

Tape::Id Tape::depthwise_conv1d_same(Id x, Id w, Id b) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  const Tensor& tb = val(b);
  const int n = tx.rows(), d = tx.cols();
  const int kk = tw.rows();
  if (tw.cols() != d || tb.numel() != d) {
    throw std::invalid_argument("depthwise_conv1d: kernel " + tw.shape_str() + " / bias " + tb.shape_str() +
                                " do not match input " + tx.shape_str());
  }
  if (kk % 2 == 0) throw std::invalid_argument("depthwise_conv1d: kernel size must be odd");
  const int pad = (kk - 1) / 2;
  Tensor out(tx.shape());
  for (int t0 = 0; t0 < n; ++t0) {
    double* yo = out.data() + static_cast<size_t>(t0) * d;
    for (int j = 0; j < d; ++j) yo[j] = tb.at(j);
    for (int j0 = 0; j0 < kk; ++j0) {
      const int src = t0 + j0 - pad;
      if (src < 0 || src >= n) continue;
      const double* xs = tx.data() + static_cast<size_t>(src) * d;
      const double* ws = tw.data() + static_cast<size_t>(j0) * d;
      for (int j = 0; j < d; ++j) yo[j] += xs[j] * ws[j];
    }
  }
  Id o = push(std::move(out), needs(x) || needs(w) || needs(b));
  if (needs(o)) {
    set_back(o, [x, w, b, o, n, d, kk, pad](Tape& t) {
      const auto& go = t.grad_mut(o);
      const Tensor& tx2 = t.val(x);
      const Tensor& tw2 = t.val(w);
      for (int t0 = 0; t0 < n; ++t0) {
        const double* gy = go.data() + static_cast<size_t>(t0) * d;
        if (t.needs(b)) {
          auto& gb = t.grad_mut(b);
          for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += gy[j];
        }
        for (int j0 = 0; j0 < kk; ++j0) {
          const int src = t0 + j0 - pad;
          if (src < 0 || src >= n) continue;
          if (t.needs(x)) {
            auto& gx = t.grad_mut(x);
            const double* ws = tw2.data() + static_cast<size_t>(j0) * d;
            for (int j = 0; j < d; ++j) gx[static_cast<size_t>(src) * d + j] += gy[j] * ws[j];
          }
          if (t.needs(w)) {
            auto& gw = t.grad_mut(w);
            const double* xs = tx2.data() + static_cast<size_t>(src) * d;
            for (int j = 0; j < d; ++j) gw[static_cast<size_t>(j0) * d + j] += gy[j] * xs[j];
          }
        }
      }
    });
  }
  return o;
}

Tape::Id Tape::cross_entropy_logits(Id logits, int label) {
  const Tensor& tz = val(logits);
  const int c = static_cast<int>(tz.numel());
  if (tz.rank() == 2 && tz.rows() != 1) {
    throw std::invalid_argument("cross_entropy_logits: expected a single row, got " + tz.shape_str());
  }
  if (label < 0 || label >= c) {
    throw std::out_of_range("cross_entropy_logits: label " + std::to_string(label) + " out of range");
  }
  double mx = tz.at(0);
  for (int j = 1; j < c; ++j) mx = std::max(mx, tz.at(j));
  double z = 0.0;
  for (int j = 0; j < c; ++j) z += std::exp(tz.at(j) - mx);
  const double lse = mx + std::log(z);
  Id o = push(Tensor::scalar(lse - tz.at(label)), needs(logits));
  if (needs(o)) {
    set_back(o, [logits, o, label, c, mx, z](Tape& t) {
      const double g = t.grad_mut(o)[0];
      const Tensor& tz2 = t.val(logits);
      auto& gl = t.grad_mut(logits);
      for (int j = 0; j < c; ++j) {
        const double p = std::exp(tz2.at(j) - mx) / z;
        gl[static_cast<size_t>(j)] += g * (p - (j == label ? 1.0 : 0.0));
      }
    });
  }
  return o;
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<int> extend_with_blanks(const std::vector<int>& target, int blank) {
  std::vector<int> ext(2 * target.size() + 1, blank);
  for (size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  return ext;
}

// Row-wise log-softmax of raw logits.
Tensor log_probs_of(const Tensor& logits) {
  const int n = logits.rows(), c = logits.cols();
  Tensor lp(logits.shape());
  for (int t = 0; t < n; ++t) {
    const double* x = logits.data() + static_cast<size_t>(t) * c;
    double* y = lp.data() + static_cast<size_t>(t) * c;
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < c; ++j) y[j] = x[j] - lse;
  }
  return lp;
}

// alpha[t][s]: log-prob of all paths emitting ext[0..s] after frames 0..t,
// including the emission at frame t. The skip transition j-2 -> j is only
// legal when ext[j] is a symbol distinct from ext[j-2].
double ctc_alpha(const Tensor& lp, const std::vector<int>& ext, int blank,
                 std::vector<double>* alpha_out) {
  const int n = lp.rows();
  const int s = static_cast<int>(ext.size());
  std::vector<double> alpha(static_cast<size_t>(n) * s, kNegInf);
  alpha[0 * s + 0] = lp.at(0, ext[0]);
  if (s > 1) alpha[0 * s + 1] = lp.at(0, ext[1]);
  for (int t = 1; t < n; ++t) {
    for (int j = 0; j < s; ++j) {
      double v = alpha[static_cast<size_t>(t - 1) * s + j];
      if (j > 0) v = log_sum_exp(v, alpha[static_cast<size_t>(t - 1) * s + j - 1]);
      if (j > 1 && ext[static_cast<size_t>(j)] != blank &&
          ext[static_cast<size_t>(j)] != ext[static_cast<size_t>(j - 2)]) {
        v = log_sum_exp(v, alpha[static_cast<size_t>(t - 1) * s + j - 2]);
      }
      alpha[static_cast<size_t>(t) * s + j] = v + lp.at(t, ext[static_cast<size_t>(j)]);
    }
  }
  double total = alpha[static_cast<size_t>(n - 1) * s + s - 1];
  if (s > 1) total = log_sum_exp(total, alpha[static_cast<size_t>(n - 1) * s + s - 2]);
  if (alpha_out) *alpha_out = std::move(alpha);
  return total;
}

}  // namespace

double ctc_forward_value(const Tensor& logits, const std::vector<int>& target, int blank) {
  if (target.empty()) throw std::invalid_argument("ctc: empty target");
  for (int v : target) {
    if (v < 0 || v >= logits.cols() || v == blank) {
      throw std::invalid_argument("ctc: target symbol " + std::to_string(v) + " invalid for " +
                                  logits.shape_str());
    }
  }
  const Tensor lp = log_probs_of(logits);
  const std::vector<int> ext = extend_with_blanks(target, blank);
  const double logp = ctc_alpha(lp, ext, blank, nullptr);
  return -logp;  // +inf when no alignment exists
}

Tape::Id Tape::ctc_loss(Id logits, const std::vector<int>& target, int blank) {
  const Tensor& tz = val(logits);
  const int n = tz.rows(), c = tz.cols();
  if (blank < 0 || blank >= c) throw std::invalid_argument("ctc_loss: blank index out of range");
  if (target.empty()) throw std::invalid_argument("ctc_loss: empty target");
  const int l = static_cast<int>(target.size());
  if (2 * l + 1 > n) {
    throw std::invalid_argument("ctc_loss: infeasible alignment, target needs " +
                                std::to_string(2 * l + 1) + " frames but audio has " + std::to_string(n));
  }
  for (int v : target) {
    if (v < 0 || v >= c || v == blank) {
      throw std::invalid_argument("ctc_loss: target symbol " + std::to_string(v) + " invalid");
    }
  }

  const Tensor lp = log_probs_of(tz);
  const std::vector<int> ext = extend_with_blanks(target, blank);
  const int s = static_cast<int>(ext.size());
  std::vector<double> alpha;
  const double logp = ctc_alpha(lp, ext, blank, &alpha);
  const double loss = -logp;

  Id o = push(Tensor::scalar(loss), needs(logits));
  if (needs(o)) {
    // beta[t][s]: log-prob of completing the extended target from state s,
    // excluding the emission at frame t.
    std::vector<double> beta(static_cast<size_t>(n) * s, kNegInf);
    beta[static_cast<size_t>(n - 1) * s + s - 1] = 0.0;
    if (s > 1) beta[static_cast<size_t>(n - 1) * s + s - 2] = 0.0;
    for (int t = n - 2; t >= 0; --t) {
      for (int j = s - 1; j >= 0; --j) {
        double v = beta[static_cast<size_t>(t + 1) * s + j] + lp.at(t + 1, ext[static_cast<size_t>(j)]);
        if (j + 1 < s) {
          v = log_sum_exp(v, beta[static_cast<size_t>(t + 1) * s + j + 1] +
                                 lp.at(t + 1, ext[static_cast<size_t>(j + 1)]));
        }
        if (j + 2 < s && ext[static_cast<size_t>(j)] != ext[static_cast<size_t>(j + 2)] &&
            ext[static_cast<size_t>(j + 2)] != blank) {
          v = log_sum_exp(v, beta[static_cast<size_t>(t + 1) * s + j + 2] +
                                 lp.at(t + 1, ext[static_cast<size_t>(j + 2)]));
        }
        beta[static_cast<size_t>(t) * s + j] = v;
      }
    }
    // d(-logP)/d(logit[t][k]) = softmax[t][k] - gamma[t][k]/P with
    // gamma[t][k] = sum over states labelled k of exp(alpha+beta).
    Tensor gmat(tz.shape());
    for (int t = 0; t < n; ++t) {
      std::vector<double> lg(static_cast<size_t>(c), kNegInf);
      for (int j = 0; j < s; ++j) {
        const double ab = alpha[static_cast<size_t>(t) * s + j] + beta[static_cast<size_t>(t) * s + j];
        lg[static_cast<size_t>(ext[static_cast<size_t>(j)])] =
            log_sum_exp(lg[static_cast<size_t>(ext[static_cast<size_t>(j)])], ab);
      }
      for (int k = 0; k < c; ++k) {
        const double y = std::exp(lp.at(t, k));
        const double post = std::exp(lg[static_cast<size_t>(k)] - logp);
        gmat.at(t, k) = y - post;
      }
    }
    set_back(o, [logits, o, gmat = std::move(gmat)](Tape& t) {
      const double g = t.grad_mut(o)[0];
      auto& gl = t.grad_mut(logits);
      for (size_t i = 0; i < gl.size(); ++i) gl[i] += g * gmat.at(static_cast<std::int64_t>(i));
    });
  }
  return o;
}

double ctc_brute_force(const Tensor& logits, const std::vector<int>& target, int blank,
                       std::int64_t max_paths) {
  const int n = logits.rows(), c = logits.cols();
  std::int64_t paths = 1;
  for (int t = 0; t < n; ++t) {
    paths *= c;
    if (paths > max_paths) {
      throw std::invalid_argument("ctc_brute_force: instance too large, " + std::to_string(c) + "^" +
                                  std::to_string(n) + " paths");
    }
  }
  const Tensor lp = log_probs_of(logits);
  std::vector<int> path(static_cast<size_t>(n), 0);
  double total = kNegInf;
  std::vector<int> collapsed;
  collapsed.reserve(static_cast<size_t>(n));
  for (std::int64_t idx = 0; idx < paths; ++idx) {
    std::int64_t r = idx;
    for (int t = 0; t < n; ++t) {
      path[static_cast<size_t>(t)] = static_cast<int>(r % c);
      r /= c;
    }
    // Collapse: merge repeats, then drop blanks.
    collapsed.clear();
    int prev = -1;
    for (int t = 0; t < n; ++t) {
      const int sym = path[static_cast<size_t>(t)];
      if (sym != prev && sym != blank) collapsed.push_back(sym);
      prev = sym;
    }
    if (collapsed != target) continue;
    double lpath = 0.0;
    for (int t = 0; t < n; ++t) lpath += lp.at(t, path[static_cast<size_t>(t)]);
    total = log_sum_exp(total, lpath);
  }
  return -total;
}

void Tape::backward(Id loss) {
  Node& ln = nodes_[static_cast<size_t>(loss)];
  if (ln.value.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + ln.value.shape_str());
  }
  if (!ln.needs_grad) return;
  ln.grad[0] = 1.0;
  for (Id i = loss; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.needs_grad && n.back) n.back(*this);
  }
}

}  // namespace kws
