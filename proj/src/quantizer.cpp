#include "h2rec/quantizer.hpp"

#include "h2rec/io.hpp"
#include "h2rec/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <map>
#include <numeric>
#include <thread>

namespace h2rec {

namespace {

constexpr char kCodebookMagic[4] = {'S', 'C', 'B', 'K'};
constexpr char kRqWeightsMagic[4] = {'S', 'R', 'Q', 'W'};

double sqdist(const double* a, const double* b, Eigen::Index d) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < d; ++j) {
    const double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

template <typename S>
ad::Var<S> mse(ad::Var<S> a, ad::Var<S> b) {
  auto d = ad::sub(a, b);
  return ad::mean(ad::hadamard(d, d));
}

}  // namespace

int threads_from_env() {
  if (const char* v = std::getenv("H2REC_THREADS")) {
    try {
      const auto n = io::parse_int(v);
      if (n >= 1) return static_cast<int>(n);
    } catch (const Error&) {
    }
  }
  return 1;
}

MatF kmeans(const MatF& points, int k, int iters, Rng& rng) {
  if (k <= 0) throw Error("kmeans: K must be positive");
  const Eigen::Index m = points.rows(), d = points.cols();
  if (m < 1) throw Error("kmeans: no points");
  const MatD x = points.cast<double>();
  MatD c(k, d);

  // k-means++ seeding.
  std::vector<double> best(static_cast<std::size_t>(m), std::numeric_limits<double>::infinity());
  std::uniform_int_distribution<Eigen::Index> any(0, m - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::Index pick = any(rng);
  for (int j = 0; j < k; ++j) {
    if (j > 0) {
      double total = 0.0;
      for (double b : best) total += b;
      if (total <= 0.0) {
        pick = any(rng);
      } else {
        double r = unit(rng) * total;
        pick = m - 1;
        for (Eigen::Index i = 0; i < m; ++i) {
          r -= best[static_cast<std::size_t>(i)];
          if (r < 0.0) {
            pick = i;
            break;
          }
        }
      }
    }
    c.row(j) = x.row(pick);
    for (Eigen::Index i = 0; i < m; ++i) {
      best[static_cast<std::size_t>(i)] =
          std::min(best[static_cast<std::size_t>(i)], sqdist(x.row(i).data(), c.row(j).data(), d));
    }
  }

  std::vector<int> assign(static_cast<std::size_t>(m), -1);
  std::vector<double> dist(static_cast<std::size_t>(m), 0.0);
  for (int it = 0; it < std::max(1, iters); ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < m; ++i) {
      int arg = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        const double dd = sqdist(x.row(i).data(), c.row(j).data(), d);
        if (dd < bd) {
          bd = dd;
          arg = j;
        }
      }
      if (assign[static_cast<std::size_t>(i)] != arg) changed = true;
      assign[static_cast<std::size_t>(i)] = arg;
      dist[static_cast<std::size_t>(i)] = bd;
    }
    if (!changed && it > 0) break;

    MatD sums = MatD::Zero(k, d);
    std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < m; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (int j = 0; j < k; ++j) {
      if (counts[static_cast<std::size_t>(j)] > 0) {
        c.row(j) = sums.row(j) / static_cast<double>(counts[static_cast<std::size_t>(j)]);
        continue;
      }
      // Empty cluster: take over the point farthest from its centroid.
      Eigen::Index far = 0;
      for (Eigen::Index i = 1; i < m; ++i) {
        if (dist[static_cast<std::size_t>(i)] > dist[static_cast<std::size_t>(far)]) far = i;
      }
      c.row(j) = x.row(far);
      dist[static_cast<std::size_t>(far)] = 0.0;
    }
  }
  return c.cast<float>();
}

int nearest_code(const float* x, const MatF& book) {
  int arg = 0;
  float bd = std::numeric_limits<float>::infinity();
  const Eigen::Index d = book.cols();
  for (Eigen::Index j = 0; j < book.rows(); ++j) {
    const float* c = book.row(j).data();
    float s = 0.0F;
    for (Eigen::Index t = 0; t < d; ++t) {
      const float diff = x[t] - c[t];
      s += diff * diff;
    }
    if (s < bd) {
      bd = s;
      arg = static_cast<int>(j);
    }
  }
  return arg;
}

std::pair<SemanticId, std::vector<float>> quantize_residual(std::span<const float> x, const Codebooks& cb) {
  if (cb.mechanism != Mechanism::kRq && cb.mechanism != Mechanism::kVq) {
    throw Error("quantize_residual: needs rq (or single-level vq) codebooks");
  }
  if (static_cast<int>(x.size()) != cb.dim) {
    throw Error("quantize_residual: input has dimension " + std::to_string(x.size()) + ", codebooks expect " +
                std::to_string(cb.dim));
  }
  std::vector<float> r(x.begin(), x.end());
  SemanticId codes;
  for (int l = 0; l < cb.levels; ++l) {
    const MatF& book = cb.books[static_cast<std::size_t>(l)];
    const int c = nearest_code(r.data(), book);
    codes.push_back(c);
    for (int j = 0; j < cb.dim; ++j) r[static_cast<std::size_t>(j)] -= book(c, j);
  }
  return {codes, r};
}

Codebooks train_vq(const MatF& x, int k, int iters, Rng& rng) {
  Codebooks cb;
  cb.mechanism = Mechanism::kVq;
  cb.levels = 1;
  cb.size = k;
  cb.dim = static_cast<int>(x.cols());
  cb.books.push_back(kmeans(x, k, iters, rng));
  return cb;
}

Codebooks train_pq(const MatF& x, int levels, int k, int iters, Rng& rng) {
  if (levels < 1 || x.cols() % levels != 0) {
    throw Error("pq: input dimension " + std::to_string(x.cols()) + " is not divisible by L=" + std::to_string(levels));
  }
  Codebooks cb;
  cb.mechanism = Mechanism::kPq;
  cb.levels = levels;
  cb.size = k;
  cb.dim = static_cast<int>(x.cols()) / levels;
  for (int l = 0; l < levels; ++l) {
    MatF sub = x.middleCols(static_cast<Eigen::Index>(l) * cb.dim, cb.dim);
    cb.books.push_back(kmeans(sub, k, iters, rng));
  }
  return cb;
}

Codebooks RqVaeModel::codebooks() const {
  Codebooks cb;
  cb.mechanism = Mechanism::kRq;
  cb.levels = levels;
  cb.size = size;
  cb.dim = cfg.d_code;
  for (int l = 0; l < levels; ++l) cb.books.push_back(params.get("codebook." + std::to_string(l)).value);
  return cb;
}

MatF RqVaeModel::encode(const MatF& x) const {
  if (x.cols() != d_in) throw Error("rq-vae encode: input dimension mismatch");
  MatF h = (x * params.get("enc.w1").value).rowwise() + params.get("enc.b1").value.row(0);
  h = h.cwiseMax(0.0F);
  MatF z = (h * params.get("enc.w2").value).rowwise() + params.get("enc.b2").value.row(0);
  return z;
}

template <typename S>
RqForward<S> rqvae_forward(ad::Tape<S>& tape, ParamStore<S>& params, ad::Var<S> x, int levels,
                           double beta, const std::vector<SemanticId>* frozen_codes) {
  using namespace ad;
  auto linear = [&](Var<S> in, const std::string& w, const std::string& b) {
    return add_rowvec(matmul(in, param(tape, params.get(w))), param(tape, params.get(b)));
  };
  RqForward<S> out;
  out.z = linear(relu(linear(x, "enc.w1", "enc.b1")), "enc.w2", "enc.b2");
  const Eigen::Index n = x.rows();
  if (frozen_codes && static_cast<Eigen::Index>(frozen_codes->size()) != n) {
    throw Error("rqvae_forward: frozen code count mismatch");
  }
  out.codes.assign(static_cast<std::size_t>(n), SemanticId());
  Var<S> residual = out.z;
  Var<S> quantized = constant(tape, Mat<S>(Mat<S>::Zero(n, out.z.cols())));
  Var<S> cb_loss = scalar_constant(tape, S(0));
  Var<S> commit = scalar_constant(tape, S(0));
  for (int l = 0; l < levels; ++l) {
    Parameter<S>& book = params.get("codebook." + std::to_string(l));
    std::vector<int> idx(static_cast<std::size_t>(n));
    const Mat<S>& r = residual.value();
    for (Eigen::Index i = 0; i < n; ++i) {
      int c = 0;
      if (frozen_codes) {
        c = (*frozen_codes)[static_cast<std::size_t>(i)][static_cast<std::size_t>(l)];
      } else {
        S bd = std::numeric_limits<S>::infinity();
        for (Eigen::Index j = 0; j < book.value.rows(); ++j) {
          const S dd = (r.row(i) - book.value.row(j)).squaredNorm();
          if (dd < bd) {
            bd = dd;
            c = static_cast<int>(j);
          }
        }
      }
      idx[static_cast<std::size_t>(i)] = c;
      out.codes[static_cast<std::size_t>(i)].push_back(c);
    }
    Var<S> e = lookup(tape, book, idx);
    cb_loss = add(cb_loss, mse(stop_gradient(residual), e));
    commit = add(commit, mse(residual, stop_gradient(e)));
    quantized = add(quantized, e);
    residual = sub(residual, stop_gradient(e));
  }
  // Straight-through: forward uses the quantized vector, backward treats the
  // quantizer as identity.
  Var<S> zq = add(out.z, stop_gradient(sub(quantized, out.z)));
  out.recon = linear(relu(linear(zq, "dec.w1", "dec.b1")), "dec.w2", "dec.b2");
  out.recon_loss = mse(out.recon, x);
  out.codebook_loss = cb_loss;
  out.commit_loss = commit;
  out.total = add(add(out.recon_loss, cb_loss), scale(commit, static_cast<S>(beta)));
  return out;
}

template RqForward<float> rqvae_forward(ad::Tape<float>&, ParamStore<float>&, ad::Var<float>, int, double,
                                        const std::vector<SemanticId>*);
template RqForward<double> rqvae_forward(ad::Tape<double>&, ParamStore<double>&, ad::Var<double>, int, double,
                                         const std::vector<SemanticId>*);

RqVaeModel init_rqvae(int d_in, int levels, int k, const RqVaeConfig& cfg, Rng& rng) {
  if (d_in < 1 || levels < 1 || k < 1 || cfg.d_code < 1 || cfg.hidden < 1) {
    throw Error("rq-vae: sizes must be positive");
  }
  RqVaeModel m;
  m.cfg = cfg;
  m.d_in = d_in;
  m.levels = levels;
  m.size = k;
  const int h = cfg.hidden;
  auto dense = [&](int fan_in, int fan_out) {
    std::normal_distribution<float> g(0.0F, std::sqrt(2.0F / static_cast<float>(fan_in)));
    MatF w(fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = g(rng);
    return w;
  };
  auto identity_pair = [&](int d) {
    if (h < 2 * d) throw Error("rq-vae identity init needs hidden >= 2 * dim");
    MatF w1 = MatF::Zero(d, h), w2 = MatF::Zero(h, d);
    for (int i = 0; i < d; ++i) {
      w1(i, i) = 1.0F;
      w1(i, d + i) = -1.0F;
      w2(i, i) = 1.0F;
      w2(d + i, i) = -1.0F;
    }
    return std::pair{w1, w2};
  };
  if (cfg.identity_init) {
    if (cfg.d_code != d_in) throw Error("rq-vae identity init needs d_code == input dimension");
    auto [e1, e2] = identity_pair(d_in);
    auto [d1, d2] = identity_pair(d_in);
    m.params.add("enc.w1", e1);
    m.params.add("enc.b1", MatF::Zero(1, h));
    m.params.add("enc.w2", e2);
    m.params.add("enc.b2", MatF::Zero(1, cfg.d_code));
    m.params.add("dec.w1", d1);
    m.params.add("dec.b1", MatF::Zero(1, h));
    m.params.add("dec.w2", d2);
    m.params.add("dec.b2", MatF::Zero(1, d_in));
  } else {
    m.params.add("enc.w1", dense(d_in, h));
    m.params.add("enc.b1", MatF::Zero(1, h));
    m.params.add("enc.w2", dense(h, cfg.d_code));
    m.params.add("enc.b2", MatF::Zero(1, cfg.d_code));
    m.params.add("dec.w1", dense(cfg.d_code, h));
    m.params.add("dec.b1", MatF::Zero(1, h));
    m.params.add("dec.w2", dense(h, d_in));
    m.params.add("dec.b2", MatF::Zero(1, d_in));
  }
  for (int l = 0; l < levels; ++l) m.params.add("codebook." + std::to_string(l), MatF::Zero(k, cfg.d_code));
  return m;
}

namespace {

/// Greedy residuals of z at every level: out[l] holds the input to level l.
std::vector<MatF> level_residuals(const MatF& z, const RqVaeModel& m) {
  std::vector<MatF> out;
  MatF r = z;
  for (int l = 0; l < m.levels; ++l) {
    out.push_back(r);
    const MatF& book = m.params.get("codebook." + std::to_string(l)).value;
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
      const int c = nearest_code(r.row(i).data(), book);
      r.row(i) -= book.row(c);
    }
  }
  return out;
}

}  // namespace

RqLoss evaluate_rqvae(const RqVaeModel& model, const MatF& x) {
  ad::Tape<float> tape;
  auto& params = const_cast<ParamStore<float>&>(model.params);
  auto fwd = rqvae_forward(tape, params, ad::constant(tape, MatF(x)), model.levels, model.cfg.beta);
  RqLoss l;
  l.recon = fwd.recon_loss.scalar();
  l.codebook = fwd.codebook_loss.scalar();
  l.commit = fwd.commit_loss.scalar();
  l.total = fwd.total.scalar();
  return l;
}

RqVaeModel train_rqvae(const MatF& x, int levels, int k, const RqVaeConfig& cfg, Rng& rng, RqTrainLog* log) {
  if (x.rows() < 1) throw Error("train_rqvae: empty input");
  if (!x.allFinite()) throw Error("train_rqvae: input has NaN/Inf");
  RqVaeModel model = init_rqvae(static_cast<int>(x.cols()), levels, k, cfg, rng);
  Adam<float> opt(model.params, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, 0.0});
  const Eigen::Index n = x.rows();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<Eigen::Index>(std::max(1, cfg.batch_size));
  bool initialized = false;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::int64_t>> usage(static_cast<std::size_t>(levels),
                                                 std::vector<std::int64_t>(static_cast<std::size_t>(k), 0));
    RqLoss acc;
    for (Eigen::Index start = 0; start < n; start += bs) {
      const Eigen::Index len = std::min(bs, n - start);
      MatF xb(len, x.cols());
      for (Eigen::Index i = 0; i < len; ++i) xb.row(i) = x.row(order[static_cast<std::size_t>(start + i)]);

      if (!initialized) {
        // Codebooks start as k-means centroids of the first batch's residuals.
        MatF r = model.encode(xb);
        for (int l = 0; l < levels; ++l) {
          auto& book = model.params.get("codebook." + std::to_string(l)).value;
          book = kmeans(r, k, cfg.kmeans_iters, rng);
          for (Eigen::Index i = 0; i < r.rows(); ++i) r.row(i) -= book.row(nearest_code(r.row(i).data(), book));
        }
        initialized = true;
      }

      model.params.zero_grad();
      ad::Tape<float> tape;
      auto fwd = rqvae_forward(tape, model.params, ad::constant(tape, std::move(xb)), levels, cfg.beta);
      tape.backward(fwd.total);
      opt.step();
      const double w = static_cast<double>(len) / static_cast<double>(n);
      acc.recon += w * fwd.recon_loss.scalar();
      acc.codebook += w * fwd.codebook_loss.scalar();
      acc.commit += w * fwd.commit_loss.scalar();
      acc.total += w * fwd.total.scalar();
      for (const auto& sid : fwd.codes) {
        for (int l = 0; l < levels; ++l) ++usage[static_cast<std::size_t>(l)][static_cast<std::size_t>(sid[static_cast<std::size_t>(l)])];
      }
    }
    if (!std::isfinite(acc.total)) {
      throw Error("rq-vae training diverged (loss is not finite) at epoch " + std::to_string(epoch));
    }
    int reset = 0;
    if (epoch + 1 < cfg.epochs) {
      // Dead codes are re-seeded to residuals of random items at that level.
      const auto residuals = level_residuals(model.encode(x), model);
      std::uniform_int_distribution<Eigen::Index> any(0, n - 1);
      for (int l = 0; l < levels; ++l) {
        auto& book = model.params.get("codebook." + std::to_string(l)).value;
        for (int c = 0; c < k; ++c) {
          if (usage[static_cast<std::size_t>(l)][static_cast<std::size_t>(c)] == 0) {
            book.row(c) = residuals[static_cast<std::size_t>(l)].row(any(rng));
            ++reset;
          }
        }
      }
    }
    if (log) {
      log->epochs.push_back(acc);
      log->dead_codes_reset.push_back(reset);
    }
  }
  return model;
}

SidAssignment assign_sids(const Quantizer& q, const MatF& x, int threads) {
  const Codebooks& cb = q.codebooks;
  if (static_cast<int>(cb.books.size()) != cb.levels || cb.levels < 1) throw Error("assign_sids: malformed codebooks");
  MatF input;
  switch (cb.mechanism) {
    case Mechanism::kVq:
      if (cb.levels != 1) throw Error("assign_sids: vq codebooks must have exactly one level");
      if (x.cols() != cb.dim) throw Error("assign_sids: vq codebook dimension does not match the input");
      input = x;
      break;
    case Mechanism::kPq:
      if (x.cols() != static_cast<Eigen::Index>(cb.levels) * cb.dim) {
        throw Error("assign_sids: pq sub-vector layout does not match the input dimension");
      }
      input = x;
      break;
    case Mechanism::kRq:
      if (!q.rqvae) throw Error("assign_sids: rq needs a trained RQ-VAE encoder");
      input = q.rqvae->encode(x);
      if (input.cols() != cb.dim) throw Error("assign_sids: rq codebook dimension mismatch");
      break;
  }
  SidAssignment a;
  a.mechanism = cb.mechanism;
  a.levels = cb.levels;
  a.codebook_size = cb.size;
  a.codes.assign(static_cast<std::size_t>(x.rows()), SemanticId());

  auto work = [&](Eigen::Index lo, Eigen::Index hi) {
    for (Eigen::Index i = lo; i < hi; ++i) {
      const float* row = input.row(i).data();
      if (cb.mechanism == Mechanism::kPq) {
        SemanticId sid;
        for (int l = 0; l < cb.levels; ++l) {
          sid.push_back(nearest_code(row + static_cast<std::ptrdiff_t>(l) * cb.dim, cb.books[static_cast<std::size_t>(l)]));
        }
        a.codes[static_cast<std::size_t>(i)] = std::move(sid);
      } else {
        a.codes[static_cast<std::size_t>(i)] =
            quantize_residual(std::span<const float>(row, static_cast<std::size_t>(cb.dim)), cb).first;
      }
    }
  };
  const int nt = std::max(1, threads > 0 ? threads : threads_from_env());
  if (nt == 1 || x.rows() < 2 * nt) {
    work(0, x.rows());
  } else {
    std::vector<std::thread> pool;
    const Eigen::Index chunk = (x.rows() + nt - 1) / nt;
    for (int t = 0; t < nt; ++t) {
      const Eigen::Index lo = t * chunk, hi = std::min(x.rows(), lo + chunk);
      if (lo < hi) pool.emplace_back(work, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  return a;
}

double collision_rate(const SidAssignment& a) {
  if (a.codes.empty()) throw Error("collision_rate: empty assignment");
  std::map<SemanticId, std::size_t> counts;
  for (const auto& c : a.codes) ++counts[c];
  std::size_t collided = 0;
  for (const auto& [sid, n] : counts) {
    if (n > 1) collided += n;
  }
  return static_cast<double>(collided) / static_cast<double>(a.codes.size());
}

std::size_t distinct_tuples(const SidAssignment& a) {
  std::map<SemanticId, std::size_t> counts;
  for (const auto& c : a.codes) ++counts[c];
  return counts.size();
}

double utilization_rate(const SidAssignment& a) {
  if (a.codes.empty()) throw Error("utilization_rate: empty assignment");
  const double capacity = std::pow(static_cast<double>(a.codebook_size), static_cast<double>(a.levels));
  return static_cast<double>(distinct_tuples(a)) / capacity;
}

double item_utilization_rate(const SidAssignment& a) {
  if (a.codes.empty()) throw Error("item_utilization_rate: empty assignment");
  const double capacity = std::pow(static_cast<double>(a.codebook_size), static_cast<double>(a.levels));
  return static_cast<double>(a.codes.size()) / capacity;
}

void save_quantizer(const Quantizer& q, const std::filesystem::path& path) {
  const Codebooks& cb = q.codebooks;
  auto os = io::open_out(path, true);
  io::write_bytes(os, std::string_view(kCodebookMagic, 4));
  io::write_u8(os, static_cast<std::uint8_t>(cb.mechanism));
  io::write_u32(os, static_cast<std::uint32_t>(cb.levels));
  io::write_u32(os, static_cast<std::uint32_t>(cb.size));
  io::write_u32(os, static_cast<std::uint32_t>(cb.dim));
  for (const auto& b : cb.books) io::write_f32s(os, b.data(), static_cast<std::size_t>(b.size()));
  if (cb.mechanism == Mechanism::kRq) {
    if (!q.rqvae) throw Error("save_quantizer: rq codebooks without encoder/decoder weights");
    const RqVaeModel& m = *q.rqvae;
    io::write_bytes(os, std::string_view(kRqWeightsMagic, 4));
    io::write_u32(os, static_cast<std::uint32_t>(m.d_in));
    io::write_u32(os, static_cast<std::uint32_t>(m.cfg.hidden));
    io::write_u32(os, static_cast<std::uint32_t>(m.cfg.d_code));
    io::write_f32(os, static_cast<float>(m.cfg.beta));
    for (const char* name : {"enc.w1", "enc.b1", "enc.w2", "enc.b2", "dec.w1", "dec.b1", "dec.w2", "dec.b2"}) {
      const MatF& v = m.params.get(name).value;
      io::write_f32s(os, v.data(), static_cast<std::size_t>(v.size()));
    }
  }
}

Quantizer load_quantizer(const std::filesystem::path& path) {
  auto is = io::open_in(path, true);
  const std::string src = path.string();
  if (io::read_bytes(is, 4) != std::string_view(kCodebookMagic, 4)) throw Error(src + ": bad magic, expected SCBK");
  Quantizer q;
  Codebooks& cb = q.codebooks;
  const auto tag = io::read_u8(is);
  if (tag > 2) throw Error(src + ": unknown mechanism tag " + std::to_string(tag));
  cb.mechanism = static_cast<Mechanism>(tag);
  cb.levels = static_cast<int>(io::read_u32(is));
  cb.size = static_cast<int>(io::read_u32(is));
  cb.dim = static_cast<int>(io::read_u32(is));
  if (cb.levels < 1 || cb.size < 1 || cb.dim < 1) throw Error(src + ": invalid codebook shape");
  for (int l = 0; l < cb.levels; ++l) {
    MatF b(cb.size, cb.dim);
    io::read_f32s(is, b.data(), static_cast<std::size_t>(b.size()));
    cb.books.push_back(std::move(b));
  }
  if (cb.mechanism == Mechanism::kRq) {
    if (io::read_bytes(is, 4) != std::string_view(kRqWeightsMagic, 4)) throw Error(src + ": missing SRQW section");
    RqVaeConfig cfg;
    const int d_in = static_cast<int>(io::read_u32(is));
    cfg.hidden = static_cast<int>(io::read_u32(is));
    cfg.d_code = static_cast<int>(io::read_u32(is));
    cfg.beta = io::read_f32(is);
    if (cfg.d_code != cb.dim) throw Error(src + ": SRQW d_code disagrees with codebooks");
    RqVaeModel m;
    m.cfg = cfg;
    m.d_in = d_in;
    m.levels = cb.levels;
    m.size = cb.size;
    const int h = cfg.hidden;
    const std::vector<std::tuple<const char*, int, int>> shapes = {
        {"enc.w1", d_in, h},        {"enc.b1", 1, h}, {"enc.w2", h, cfg.d_code}, {"enc.b2", 1, cfg.d_code},
        {"dec.w1", cfg.d_code, h},  {"dec.b1", 1, h}, {"dec.w2", h, d_in},       {"dec.b2", 1, d_in}};
    for (const auto& [name, r, c] : shapes) {
      MatF v(r, c);
      io::read_f32s(is, v.data(), static_cast<std::size_t>(v.size()));
      m.params.add(name, std::move(v));
    }
    for (int l = 0; l < cb.levels; ++l) m.params.add("codebook." + std::to_string(l), cb.books[static_cast<std::size_t>(l)]);
    q.rqvae = std::move(m);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw Error(src + ": trailing bytes");
  return q;
}

}  // namespace h2rec
