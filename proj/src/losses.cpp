#include "h2rec/losses.hpp"

#include "h2rec/io.hpp"

#include <algorithm>
#include <iomanip>
#include <map>

namespace h2rec {

template <typename S>
ad::Var<S> rec_loss(ad::Var<S> pos, ad::Var<S> neg) {
  using namespace ad;
  if (pos.cols() != 1 || pos.rows() != neg.rows() || neg.cols() < 1) throw Error("rec_loss: shape mismatch");
  Var<S> ones = constant(*pos.tape, Mat<S>(Mat<S>::Ones(1, neg.cols())));
  Var<S> diff = sub(matmul(pos, ones), neg);
  return scale(mean(log_sigmoid(diff)), S(-1));
}

template <typename S>
ad::Var<S> pairwise_alignment_loss(ad::Var<S> e_sid, ad::Var<S> e_hid, double tau) {
  using namespace ad;
  if (e_sid.rows() < 2) throw Error("pairwise_alignment_loss: needs at least 2 items");
  if (e_sid.rows() != e_hid.rows() || e_sid.cols() != e_hid.cols()) throw Error("pairwise_alignment_loss: shape mismatch");
  if (!(tau > 0.0)) throw Error("pairwise_alignment_loss: tau must be positive");
  const S inv = static_cast<S>(1.0 / tau);
  Var<S> ns = normalize_rows(e_sid), nh = normalize_rows(e_hid);
  Var<S> sim = scale(matmul_nt(ns, nh), inv);
  const auto n = static_cast<std::size_t>(e_sid.rows());
  std::vector<std::uint8_t> off(n * n, 1);
  for (std::size_t i = 0; i < n; ++i) off[i * n + i] = 0;
  Var<S> pos = scale(rowdot(ns, nh), inv);
  return mean(sub(logsumexp_rows(sim, &off), pos));
}

std::vector<ItemId> alignment_pool(const std::vector<std::vector<ItemId>>& sequences, std::size_t cap, Rng& rng) {
  std::vector<ItemId> pool;
  std::map<ItemId, bool> seen;
  for (const auto& s : sequences) {
    for (ItemId it : s) {
      if (seen.emplace(it, true).second) pool.push_back(it);
    }
  }
  if (cap > 0 && pool.size() > cap) {
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
    std::vector<ItemId> kept;
    kept.reserve(cap);
    for (std::size_t i : idx) kept.push_back(pool[i]);
    pool = std::move(kept);
  }
  return pool;
}

namespace {

bool prefix_equal(const SemanticId& a, const SemanticId& b, int p) {
  for (int l = 0; l < p; ++l) {
    if (a[static_cast<std::size_t>(l)] != b[static_cast<std::size_t>(l)]) return false;
  }
  return true;
}

void check_thresholds(const std::vector<SemanticId>& sids, int p, int o) {
  if (o < 0) throw Error("positive sets: window o must be non-negative");
  if (p < 0) throw Error("positive sets: p must be non-negative");
  if (p > 0 && !sids.empty() && p > static_cast<int>(sids.front().size())) {
    throw Error("positive sets: p exceeds the number of code levels");
  }
}

}  // namespace

std::vector<ItemId> build_positive_set(ItemId i, const std::vector<std::vector<ItemId>>& sequences,
                                       const std::vector<ItemId>& pool, const std::vector<SemanticId>& sids, int p,
                                       int o) {
  check_thresholds(sids, p, o);
  std::vector<ItemId> out{i};
  auto add = [&](ItemId k) {
    if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
  };
  if (p > 0) {
    const SemanticId& si = sids.at(static_cast<std::size_t>(i));
    for (ItemId k : pool) {
      if (prefix_equal(si, sids.at(static_cast<std::size_t>(k)), p)) add(k);
    }
  }
  for (const auto& seq : sequences) {
    const auto n = static_cast<std::ptrdiff_t>(seq.size());
    for (std::ptrdiff_t t = 0; t < n; ++t) {
      if (seq[static_cast<std::size_t>(t)] != i) continue;
      for (std::ptrdiff_t u = std::max<std::ptrdiff_t>(0, t - o); u <= std::min(n - 1, t + o); ++u) {
        const ItemId k = seq[static_cast<std::size_t>(u)];
        if (std::find(pool.begin(), pool.end(), k) != pool.end()) add(k);
      }
    }
  }
  return out;
}

PositiveSets build_positive_sets(const std::vector<ItemId>& pool, const std::vector<std::vector<ItemId>>& sequences,
                                 const std::vector<SemanticId>& sids, int p, int o) {
  check_thresholds(sids, p, o);
  PositiveSets ps;
  ps.pool = pool;
  const std::size_t n = pool.size();
  ps.mask.assign(n * n, 0);
  std::map<ItemId, std::size_t> index;
  for (std::size_t i = 0; i < n; ++i) {
    if (!index.emplace(pool[i], i).second) throw Error("positive sets: duplicate pool item");
    ps.mask[i * n + i] = 1;
  }
  if (p > 0) {
    std::map<std::vector<std::int32_t>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) {
      const SemanticId& s = sids.at(static_cast<std::size_t>(pool[i]));
      groups[std::vector<std::int32_t>(s.begin(), s.begin() + p)].push_back(i);
    }
    for (const auto& [key, members] : groups) {
      for (std::size_t a : members) {
        for (std::size_t b : members) ps.mask[a * n + b] = 1;
      }
    }
  }
  if (o > 0) {
    for (const auto& seq : sequences) {
      const auto len = static_cast<std::ptrdiff_t>(seq.size());
      for (std::ptrdiff_t t = 0; t < len; ++t) {
        const auto a = index.find(seq[static_cast<std::size_t>(t)]);
        if (a == index.end()) continue;
        for (std::ptrdiff_t u = std::max<std::ptrdiff_t>(0, t - o); u <= std::min(len - 1, t + o); ++u) {
          const auto b = index.find(seq[static_cast<std::size_t>(u)]);
          if (b != index.end()) ps.mask[a->second * n + b->second] = 1;
        }
      }
    }
  }
  return ps;
}

template <typename S>
ad::Var<S> code_guided_alignment_loss(ad::Var<S> e_sid, ad::Var<S> e_hid, const std::vector<std::uint8_t>& positives,
                                      double tau) {
  using namespace ad;
  const auto n = static_cast<std::size_t>(e_sid.rows());
  if (n == 0) throw Error("code_guided_alignment_loss: empty batch");
  if (e_sid.rows() != e_hid.rows() || e_sid.cols() != e_hid.cols()) throw Error("code_guided_alignment_loss: shape mismatch");
  if (positives.size() != n * n) throw Error("code_guided_alignment_loss: positive mask shape mismatch");
  if (!(tau > 0.0)) throw Error("code_guided_alignment_loss: tau must be positive");
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t k = 0; k < n; ++k) any = any || positives[i * n + k];
    if (!any) throw Error("code_guided_alignment_loss: anchor " + std::to_string(i) + " has no positives");
  }
  const S inv = static_cast<S>(1.0 / tau);
  Var<S> ns = normalize_rows(e_sid), nh = normalize_rows(e_hid);
  auto direction = [&](Var<S> anchors, Var<S> others) {
    Var<S> sim = scale(matmul_nt(anchors, others), inv);
    return mean(sub(logsumexp_rows(sim), logsumexp_rows(sim, &positives)));
  };
  return add(direction(ns, nh), direction(nh, ns));
}

template <typename S>
ad::Var<S> masked_granularity_loss(ad::Var<S> u, ad::Var<S> u_masked, double tau) {
  using namespace ad;
  if (u.rows() < 1) throw Error("masked_granularity_loss: needs at least one user");
  if (u.rows() != u_masked.rows() || u.cols() != u_masked.cols()) throw Error("masked_granularity_loss: shape mismatch");
  if (!(tau > 0.0)) throw Error("masked_granularity_loss: tau must be positive");
  const S inv = static_cast<S>(1.0 / tau);
  Var<S> a = normalize_rows(u), b = normalize_rows(u_masked);
  Var<S> pos = scale(rowdot(a, b), inv);
  Var<S> d1 = mean(sub(logsumexp_rows(scale(matmul_nt(a, b), inv)), pos));
  Var<S> d2 = mean(sub(logsumexp_rows(scale(matmul_nt(b, a), inv)), pos));
  return add(d1, d2);
}

LossReport total_loss(double l_rec, double l_ca, double l_msg, double beta, double gamma) {
  if (beta < 0.0 || gamma < 0.0) throw Error("loss weights beta and gamma must be non-negative");
  LossReport r;
  r.l_rec = l_rec;
  r.l_ca = l_ca;
  r.l_msg = l_msg;
  r.beta = beta;
  r.gamma = gamma;
  r.total = l_rec + beta * l_ca + gamma * l_msg;
  return r;
}

template <typename S>
ad::Var<S> weighted_total(ad::Var<S> l_rec, const ad::Var<S>* l_ca, const ad::Var<S>* l_msg, double beta,
                          double gamma) {
  if (beta < 0.0 || gamma < 0.0) throw Error("loss weights beta and gamma must be non-negative");
  ad::Var<S> total = l_rec;
  if (l_ca) total = ad::add(total, ad::scale(*l_ca, static_cast<S>(beta)));
  if (l_msg) total = ad::add(total, ad::scale(*l_msg, static_cast<S>(gamma)));
  return total;
}

LossLog::LossLog(const std::filesystem::path& path, bool append) {
  if (append && std::filesystem::exists(path)) {
    out_.open(path, std::ios::app);
    if (!out_) throw Error("cannot open for appending: " + path.string());
  } else {
    out_ = io::open_out(path);
    out_ << "step,l_rec,l_ca,l_msg,total\n";
  }
  out_ << std::setprecision(9);
}

void LossLog::append(std::int64_t step, const LossReport& r) {
  out_ << step << ',' << r.l_rec << ',' << r.l_ca << ',' << r.l_msg << ',' << r.total << '\n';
}

#define H2REC_INSTANTIATE_LOSSES(S)                                                                           \
  template ad::Var<S> rec_loss(ad::Var<S>, ad::Var<S>);                                                       \
  template ad::Var<S> pairwise_alignment_loss(ad::Var<S>, ad::Var<S>, double);                                \
  template ad::Var<S> code_guided_alignment_loss(ad::Var<S>, ad::Var<S>, const std::vector<std::uint8_t>&,    \
                                                 double);                                                     \
  template ad::Var<S> masked_granularity_loss(ad::Var<S>, ad::Var<S>, double);                                \
  template ad::Var<S> weighted_total(ad::Var<S>, const ad::Var<S>*, const ad::Var<S>*, double, double);

H2REC_INSTANTIATE_LOSSES(float)
H2REC_INSTANTIATE_LOSSES(double)

#undef H2REC_INSTANTIATE_LOSSES

}  // namespace h2rec
