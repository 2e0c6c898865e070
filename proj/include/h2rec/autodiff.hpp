#pragma once

// A small tape-based reverse-mode differentiation engine over dense 2-D
// matrices. Everything is templated on the scalar type so the same model
// code runs in float for training and in double for gradient checking.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace h2rec {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Mat<float>;
using MatD = Mat<double>;

template <typename S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Ordered, name-addressable set of parameters. Iteration order is insertion
/// order and is part of the checkpoint contract.
template <typename S>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<S>& add(std::string name, Mat<S> init) {
    for (const auto& p : params_) {
      if (p->name == name) throw std::invalid_argument("duplicate parameter: " + name);
    }
    auto p = std::make_unique<Parameter<S>>();
    p->name = std::move(name);
    p->value = std::move(init);
    p->zero_grad();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<S>* find(std::string_view name) {
    for (auto& p : params_) {
      if (p->name == name) return p.get();
    }
    return nullptr;
  }
  const Parameter<S>* find(std::string_view name) const {
    for (const auto& p : params_) {
      if (p->name == name) return p.get();
    }
    return nullptr;
  }
  Parameter<S>& get(std::string_view name) {
    if (auto* p = find(name)) return *p;
    throw std::out_of_range("unknown parameter: " + std::string(name));
  }
  const Parameter<S>& get(std::string_view name) const {
    if (const auto* p = find(name)) return *p;
    throw std::out_of_range("unknown parameter: " + std::string(name));
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t size() const { return params_.size(); }
  Parameter<S>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<S>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
};

namespace ad {

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S scalar() const { return value()(0, 0); }
};

/// Contiguous run of rows belonging to one sequence.
struct Segment {
  int start = 0;
  int len = 0;
};

template <typename S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Var<S> push(Mat<S> value, Backward back, bool needs_grad) {
    nodes_.push_back(Node{std::move(value), Mat<S>(), std::move(back), needs_grad});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<S>& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  /// Gradient buffer of a node, zero-initialized on first access.
  Mat<S>& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var<S> root) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw std::invalid_argument("backward() needs a scalar root");
    }
    grad(root.id).setConstant(S(1));
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.size() == 0 || !n.back) continue;
      n.back(*this, id);
    }
  }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    Backward back;
    bool needs_grad = false;
  };
  // Deque so references returned by value() survive later pushes.
  std::deque<Node> nodes_;
};

namespace detail {
inline void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}
template <typename S>
bool any_grad(std::initializer_list<Var<S>> vs) {
  for (const auto& v : vs) {
    if (v.tape->needs_grad(v.id)) return true;
  }
  return false;
}
}  // namespace detail

template <typename S>
Var<S> constant(Tape<S>& t, Mat<S> v) {
  return t.push(std::move(v), nullptr, false);
}

/// Free input that receives a gradient (for input-sensitivity checks).
template <typename S>
Var<S> variable(Tape<S>& t, Mat<S> v) {
  return t.push(std::move(v), nullptr, true);
}

template <typename S>
Var<S> scalar_constant(Tape<S>& t, S v) {
  Mat<S> m(1, 1);
  m(0, 0) = v;
  return constant(t, std::move(m));
}

/// Whole parameter as a node; gradients flow into Parameter::grad.
template <typename S>
Var<S> param(Tape<S>& t, Parameter<S>& p) {
  Parameter<S>* pp = &p;
  return t.push(p.value, [pp](Tape<S>& tp, int self) { pp->grad += tp.grad(self); }, true);
}

/// Row lookup into a parameter table. Negative indices produce zero rows.
template <typename S>
Var<S> lookup(Tape<S>& t, Parameter<S>& table, std::span<const int> idx) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  Mat<S> out(n, table.value.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const int i = idx[r];
    if (i < 0) {
      out.row(r).setZero();
    } else {
      detail::check(i < table.value.rows(), "lookup index out of range");
      out.row(r) = table.value.row(i);
    }
  }
  Parameter<S>* pp = &table;
  std::vector<int> keep(idx.begin(), idx.end());
  return t.push(
      std::move(out),
      [pp, keep = std::move(keep)](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        for (std::size_t r = 0; r < keep.size(); ++r) {
          if (keep[r] >= 0) pp->grad.row(keep[r]) += g.row(static_cast<Eigen::Index>(r));
        }
      },
      true);
}

/// Row gather from a node. Negative indices produce zero rows.
template <typename S>
Var<S> gather_rows(Var<S> a, std::span<const int> idx) {
  Tape<S>& t = *a.tape;
  const Mat<S>& av = a.value();
  const auto n = static_cast<Eigen::Index>(idx.size());
  Mat<S> out(n, av.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const int i = idx[r];
    if (i < 0) {
      out.row(r).setZero();
    } else {
      detail::check(i < av.rows(), "gather index out of range");
      out.row(r) = av.row(i);
    }
  }
  std::vector<int> keep(idx.begin(), idx.end());
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid, keep = std::move(keep)](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        Mat<S>& ga = tp.grad(aid);
        for (std::size_t r = 0; r < keep.size(); ++r) {
          if (keep[r] >= 0) ga.row(keep[r]) += g.row(static_cast<Eigen::Index>(r));
        }
      },
      t.needs_grad(aid));
}

template <typename S>
Var<S> stop_gradient(Var<S> a) {
  return constant(*a.tape, Mat<S>(a.value()));
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::check(a.cols() == b.rows(), "matmul shape mismatch");
  Tape<S>& t = *a.tape;
  Mat<S> out;
  out.noalias() = a.value() * b.value();
  const int aid = a.id, bid = b.id;
  return t.push(
      std::move(out),
      [aid, bid](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        if (tp.needs_grad(aid)) tp.grad(aid).noalias() += g * tp.value(bid).transpose();
        if (tp.needs_grad(bid)) tp.grad(bid).noalias() += tp.value(aid).transpose() * g;
      },
      detail::any_grad({a, b}));
}

/// a * b^T
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  detail::check(a.cols() == b.cols(), "matmul_nt shape mismatch");
  Tape<S>& t = *a.tape;
  Mat<S> out;
  out.noalias() = a.value() * b.value().transpose();
  const int aid = a.id, bid = b.id;
  return t.push(
      std::move(out),
      [aid, bid](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        if (tp.needs_grad(aid)) tp.grad(aid).noalias() += g * tp.value(bid);
        if (tp.needs_grad(bid)) tp.grad(bid).noalias() += g.transpose() * tp.value(aid);
      },
      detail::any_grad({a, b}));
}

template <typename S>
Var<S> transpose(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().transpose();
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid](Tape<S>& tp, int self) { tp.grad(aid) += tp.grad(self).transpose(); },
      t.needs_grad(aid));
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add shape mismatch");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value() + b.value();
  const int aid = a.id, bid = b.id;
  return t.push(
      std::move(out),
      [aid, bid](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        if (tp.needs_grad(aid)) tp.grad(aid) += g;
        if (tp.needs_grad(bid)) tp.grad(bid) += g;
      },
      detail::any_grad({a, b}));
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub shape mismatch");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value() - b.value();
  const int aid = a.id, bid = b.id;
  return t.push(
      std::move(out),
      [aid, bid](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        if (tp.needs_grad(aid)) tp.grad(aid) += g;
        if (tp.needs_grad(bid)) tp.grad(bid) -= g;
      },
      detail::any_grad({a, b}));
}

template <typename S>
Var<S> hadamard(Var<S> a, Var<S> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard shape mismatch");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().cwiseProduct(b.value());
  const int aid = a.id, bid = b.id;
  return t.push(
      std::move(out),
      [aid, bid](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        if (tp.needs_grad(aid)) tp.grad(aid) += g.cwiseProduct(tp.value(bid));
        if (tp.needs_grad(bid)) tp.grad(bid) += g.cwiseProduct(tp.value(aid));
      },
      detail::any_grad({a, b}));
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value() * c;
  const int aid = a.id;
  return t.push(
      std::move(out), [aid, c](Tape<S>& tp, int self) { tp.grad(aid) += tp.grad(self) * c; },
      t.needs_grad(aid));
}

/// a + broadcast(b) where b is 1 x cols.
template <typename S>
Var<S> add_rowvec(Var<S> a, Var<S> b) {
  detail::check(b.rows() == 1 && b.cols() == a.cols(), "add_rowvec shape mismatch");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().rowwise() + b.value().row(0);
  const int aid = a.id, bid = b.id;
  return t.push(
      std::move(out),
      [aid, bid](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        if (tp.needs_grad(aid)) tp.grad(aid) += g;
        if (tp.needs_grad(bid)) tp.grad(bid) += g.colwise().sum();
      },
      detail::any_grad({a, b}));
}

/// Row r of a multiplied by w(r, 0).
template <typename S>
Var<S> row_scale(Var<S> a, Var<S> w) {
  detail::check(w.cols() == 1 && w.rows() == a.rows(), "row_scale shape mismatch");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().array().colwise() * w.value().col(0).array();
  const int aid = a.id, wid = w.id;
  return t.push(
      std::move(out),
      [aid, wid](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        if (tp.needs_grad(aid)) {
          tp.grad(aid).array() += g.array().colwise() * tp.value(wid).col(0).array();
        }
        if (tp.needs_grad(wid)) {
          tp.grad(wid).col(0) += g.cwiseProduct(tp.value(aid)).rowwise().sum();
        }
      },
      detail::any_grad({a, w}));
}

template <typename S>
Var<S> slice(Var<S> a, Eigen::Index r0, Eigen::Index nr, Eigen::Index c0, Eigen::Index nc) {
  detail::check(r0 >= 0 && c0 >= 0 && r0 + nr <= a.rows() && c0 + nc <= a.cols(),
                "slice out of range");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().block(r0, c0, nr, nc);
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid, r0, nr, c0, nc](Tape<S>& tp, int self) {
        tp.grad(aid).block(r0, c0, nr, nc) += tp.grad(self);
      },
      t.needs_grad(aid));
}

template <typename S>
Var<S> col(Var<S> a, Eigen::Index j) {
  return slice(a, 0, a.rows(), j, 1);
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  detail::check(!parts.empty(), "concat_rows of nothing");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  bool needs = false;
  for (const auto& p : parts) {
    detail::check(p.cols() == cols, "concat_rows column mismatch");
    rows += p.rows();
    needs = needs || t.needs_grad(p.id);
  }
  Mat<S> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id, r);
    r += p.rows();
  }
  return t.push(
      std::move(out),
      [spans = std::move(spans)](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        for (const auto& [id, r0] : spans) {
          if (tp.needs_grad(id)) tp.grad(id) += g.middleRows(r0, tp.value(id).rows());
        }
      },
      needs);
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  detail::check(!parts.empty(), "concat_cols of nothing");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  bool needs = false;
  for (const auto& p : parts) {
    detail::check(p.rows() == rows, "concat_cols row mismatch");
    cols += p.cols();
    needs = needs || t.needs_grad(p.id);
  }
  Mat<S> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    spans.emplace_back(p.id, c);
    c += p.cols();
  }
  return t.push(
      std::move(out),
      [spans = std::move(spans)](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        for (const auto& [id, c0] : spans) {
          if (tp.needs_grad(id)) tp.grad(id) += g.middleCols(c0, tp.value(id).cols());
        }
      },
      needs);
}

template <typename S>
Var<S> tanh(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().array().tanh().matrix();
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid](Tape<S>& tp, int self) {
        const Mat<S>& y = tp.value(self);
        tp.grad(aid).array() += tp.grad(self).array() * (S(1) - y.array().square());
      },
      t.needs_grad(aid));
}

template <typename S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().cwiseMax(S(0));
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid](Tape<S>& tp, int self) {
        const Mat<S>& x = tp.value(aid);
        tp.grad(aid).array() += (x.array() > S(0)).select(tp.grad(self).array(), S(0));
      },
      t.needs_grad(aid));
}

/// GELU, tanh approximation.
template <typename S>
Var<S> gelu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const S k = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const S c = static_cast<S>(0.044715);
  const auto& x = a.value().array();
  Mat<S> out = (S(0.5) * x * (S(1) + (k * (x + c * x.cube())).tanh())).matrix();
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid, k, c](Tape<S>& tp, int self) {
        const auto& x = tp.value(aid).array();
        const auto th = (k * (x + c * x.cube())).tanh().eval();
        const auto d = (S(0.5) * (S(1) + th) +
                        S(0.5) * x * (S(1) - th.square()) * k * (S(1) + S(3) * c * x.square()))
                           .eval();
        tp.grad(aid).array() += tp.grad(self).array() * d;
      },
      t.needs_grad(aid));
}

/// Inverted dropout. Identity when p == 0.
template <typename S, typename Rng>
Var<S> dropout(Var<S> a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  Tape<S>& t = *a.tape;
  Mat<S> mask(a.rows(), a.cols());
  std::bernoulli_distribution keep(1.0 - p);
  const S inv = static_cast<S>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? inv : S(0);
  Mat<S> out = a.value().cwiseProduct(mask);
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid, mask = std::move(mask)](Tape<S>& tp, int self) {
        tp.grad(aid) += tp.grad(self).cwiseProduct(mask);
      },
      t.needs_grad(aid));
}

/// Row-wise softmax.
template <typename S>
Var<S> softmax_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const S m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid](Tape<S>& tp, int self) {
        const Mat<S>& y = tp.value(self);
        const Mat<S>& g = tp.grad(self);
        Mat<S> gy = g.cwiseProduct(y);
        auto dots = gy.rowwise().sum().eval();
        Mat<S> d = gy - (y.array().colwise() * dots.col(0).array()).matrix();
        tp.grad(aid) += d;
      },
      t.needs_grad(aid));
}

/// Row-wise log-sum-exp, optionally restricted to entries with mask != 0.
/// mask is row-major with the same shape as a. Returns rows x 1.
template <typename S>
Var<S> logsumexp_rows(Var<S> a, const std::vector<std::uint8_t>* mask = nullptr) {
  Tape<S>& t = *a.tape;
  const Mat<S>& av = a.value();
  const Eigen::Index n = av.rows(), m = av.cols();
  if (mask) detail::check(mask->size() == static_cast<std::size_t>(n * m), "mask shape mismatch");
  Mat<S> out(n, 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index c = 0; c < m; ++c) {
      if (!mask || (*mask)[r * m + c]) mx = std::max(mx, av(r, c));
    }
    detail::check(std::isfinite(static_cast<double>(mx)), "logsumexp over an empty row");
    S acc = 0;
    for (Eigen::Index c = 0; c < m; ++c) {
      if (!mask || (*mask)[r * m + c]) acc += std::exp(av(r, c) - mx);
    }
    out(r, 0) = mx + std::log(acc);
  }
  const int aid = a.id;
  std::vector<std::uint8_t> keep = mask ? *mask : std::vector<std::uint8_t>();
  return t.push(
      std::move(out),
      [aid, keep = std::move(keep)](Tape<S>& tp, int self) {
        const Mat<S>& x = tp.value(aid);
        const Mat<S>& y = tp.value(self);
        const Mat<S>& g = tp.grad(self);
        Mat<S>& ga = tp.grad(aid);
        const Eigen::Index m = x.cols();
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          for (Eigen::Index c = 0; c < m; ++c) {
            if (keep.empty() || keep[r * m + c]) ga(r, c) += g(r, 0) * std::exp(x(r, c) - y(r, 0));
          }
        }
      },
      t.needs_grad(aid));
}

/// Layer normalization over each row with affine gamma/beta (1 x cols).
template <typename S>
Var<S> layer_norm(Var<S> a, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  detail::check(gamma.cols() == a.cols() && beta.cols() == a.cols(), "layer_norm shape mismatch");
  Tape<S>& t = *a.tape;
  const Mat<S>& x = a.value();
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<S> xhat(n, d);
  Mat<S> rstd(n, 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    rstd(r, 0) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * rstd(r, 0);
  }
  Mat<S> out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  const int aid = a.id, gid = gamma.id, bid = beta.id;
  return t.push(
      std::move(out),
      [aid, gid, bid, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        if (tp.needs_grad(gid)) tp.grad(gid) += g.cwiseProduct(xhat).colwise().sum();
        if (tp.needs_grad(bid)) tp.grad(bid) += g.colwise().sum();
        if (tp.needs_grad(aid)) {
          const Mat<S>& gm = tp.value(gid);
          Mat<S> gx = (g.array().rowwise() * gm.row(0).array()).matrix();
          const S dd = static_cast<S>(gx.cols());
          Mat<S>& ga = tp.grad(aid);
          for (Eigen::Index r = 0; r < gx.rows(); ++r) {
            const S mean_g = gx.row(r).sum() / dd;
            const S mean_gx = gx.row(r).dot(xhat.row(r)) / dd;
            ga.row(r).array() +=
                rstd(r, 0) * (gx.row(r).array() - mean_g - xhat.row(r).array() * mean_gx);
          }
        }
      },
      detail::any_grad({a, gamma, beta}));
}

/// Rows scaled to unit L2 norm (norm computed as sqrt(|x|^2 + eps)).
template <typename S>
Var<S> normalize_rows(Var<S> a, S eps = S(1e-12)) {
  Tape<S>& t = *a.tape;
  const Mat<S>& x = a.value();
  Mat<S> norms = (x.rowwise().squaredNorm().array() + eps).sqrt().matrix();
  Mat<S> out = (x.array().colwise() / norms.col(0).array()).matrix();
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid, norms = std::move(norms)](Tape<S>& tp, int self) {
        const Mat<S>& y = tp.value(self);
        const Mat<S>& g = tp.grad(self);
        auto dots = g.cwiseProduct(y).rowwise().sum().eval();
        Mat<S> d = g - (y.array().colwise() * dots.col(0).array()).matrix();
        tp.grad(aid).array() += d.array().colwise() / norms.col(0).array();
      },
      t.needs_grad(aid));
}

/// Per-row dot product, rows x 1.
template <typename S>
Var<S> rowdot(Var<S> a, Var<S> b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "rowdot shape mismatch");
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().cwiseProduct(b.value()).rowwise().sum();
  const int aid = a.id, bid = b.id;
  return t.push(
      std::move(out),
      [aid, bid](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        if (tp.needs_grad(aid)) {
          tp.grad(aid).array() += tp.value(bid).array().colwise() * g.col(0).array();
        }
        if (tp.needs_grad(bid)) {
          tp.grad(bid).array() += tp.value(aid).array().colwise() * g.col(0).array();
        }
      },
      detail::any_grad({a, b}));
}

/// Elementwise log(sigmoid(x)), numerically stable.
template <typename S>
Var<S> log_sigmoid(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().unaryExpr([](S x) {
    return x >= S(0) ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
  });
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid](Tape<S>& tp, int self) {
        const Mat<S> sig_neg = tp.value(aid).unaryExpr([](S x) {
          // sigmoid(-x)
          return x >= S(0) ? std::exp(-x) / (S(1) + std::exp(-x)) : S(1) / (S(1) + std::exp(x));
        });
        tp.grad(aid) += tp.grad(self).cwiseProduct(sig_neg);
      },
      t.needs_grad(aid));
}

template <typename S>
Var<S> sum(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid](Tape<S>& tp, int self) { tp.grad(aid).array() += tp.grad(self)(0, 0); },
      t.needs_grad(aid));
}

template <typename S>
Var<S> mean(Var<S> a) {
  detail::check(a.value().size() > 0, "mean of empty node");
  return scale(sum(a), S(1) / static_cast<S>(a.value().size()));
}

/// Column means: rows x cols -> 1 x cols.
template <typename S>
Var<S> mean_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  const S inv = S(1) / static_cast<S>(a.rows());
  Mat<S> out = a.value().colwise().sum() * inv;
  const int aid = a.id;
  return t.push(
      std::move(out),
      [aid, inv](Tape<S>& tp, int self) {
        tp.grad(aid).rowwise() += tp.grad(self).row(0) * inv;
      },
      t.needs_grad(aid));
}

/// Scaled dot-product attention applied independently to each segment of
/// rows and each head. Q, K and V share the row layout; head h uses columns
/// [h*dh, (h+1)*dh). With causal set, row i of a segment attends to rows
/// <= i of the same segment.
template <typename S>
Var<S> segment_attention(Var<S> q, Var<S> k, Var<S> v, const std::vector<Segment>& segs,
                         int heads, bool causal) {
  detail::check(q.rows() == k.rows() && k.rows() == v.rows(), "attention row mismatch");
  detail::check(q.cols() == k.cols(), "attention q/k width mismatch");
  detail::check(heads > 0 && q.cols() % heads == 0 && v.cols() % heads == 0,
                "attention width not divisible by heads");
  Tape<S>& t = *q.tape;
  const Eigen::Index dh = q.cols() / heads;
  const Eigen::Index dv = v.cols() / heads;
  const S sc = S(1) / std::sqrt(static_cast<S>(dh));
  const Mat<S>& Q = q.value();
  const Mat<S>& K = k.value();
  const Mat<S>& V = v.value();
  Mat<S> out = Mat<S>::Zero(Q.rows(), v.cols());
  auto probs = std::make_shared<std::vector<Mat<S>>>();
  probs->reserve(segs.size() * static_cast<std::size_t>(heads));
  for (const auto& s : segs) {
    for (int h = 0; h < heads; ++h) {
      Mat<S> a;
      a.noalias() = Q.block(s.start, h * dh, s.len, dh) * K.block(s.start, h * dh, s.len, dh).transpose();
      a *= sc;
      for (int i = 0; i < s.len; ++i) {
        const int visible = causal ? i + 1 : s.len;
        const S mx = a.row(i).head(visible).maxCoeff();
        a.row(i).head(visible) = (a.row(i).head(visible).array() - mx).exp().matrix();
        a.row(i).tail(s.len - visible).setZero();
        a.row(i) /= a.row(i).sum();
      }
      out.block(s.start, h * dv, s.len, dv).noalias() = a * V.block(s.start, h * dv, s.len, dv);
      probs->push_back(std::move(a));
    }
  }
  const int qid = q.id, kid = k.id, vid = v.id;
  return t.push(
      std::move(out),
      [qid, kid, vid, segs, heads, dh, dv, sc, probs](Tape<S>& tp, int self) {
        const Mat<S>& g = tp.grad(self);
        const Mat<S>& Q = tp.value(qid);
        const Mat<S>& K = tp.value(kid);
        const Mat<S>& V = tp.value(vid);
        const bool nq = tp.needs_grad(qid), nk = tp.needs_grad(kid), nv = tp.needs_grad(vid);
        std::size_t pi = 0;
        for (const auto& s : segs) {
          for (int h = 0; h < heads; ++h, ++pi) {
            const Mat<S>& a = (*probs)[pi];
            const auto go = g.block(s.start, h * dv, s.len, dv);
            if (nv) tp.grad(vid).block(s.start, h * dv, s.len, dv).noalias() += a.transpose() * go;
            if (!nq && !nk) continue;
            Mat<S> da;
            da.noalias() = go * V.block(s.start, h * dv, s.len, dv).transpose();
            auto dots = da.cwiseProduct(a).rowwise().sum().eval();
            Mat<S> ds = a.cwiseProduct((da.array().colwise() - dots.col(0).array()).matrix());
            ds *= sc;
            if (nq) tp.grad(qid).block(s.start, h * dh, s.len, dh).noalias() += ds * K.block(s.start, h * dh, s.len, dh);
            if (nk) tp.grad(kid).block(s.start, h * dh, s.len, dh).noalias() += ds.transpose() * Q.block(s.start, h * dh, s.len, dh);
          }
        }
      },
      detail::any_grad({q, k, v}));
}

}  // namespace ad
}  // namespace h2rec
