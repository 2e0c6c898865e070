#pragma once

#include "h2rec/autodiff.hpp"
#include "h2rec/data.hpp"
#include "h2rec/semantics.hpp"

#include <filesystem>
#include <fstream>
#include <vector>

namespace h2rec {

/// Mean of -log sigmoid(pos - neg) over every (row, negative) pair.
/// pos is R x 1, neg is R x n_neg.
template <typename S>
ad::Var<S> rec_loss(ad::Var<S> pos, ad::Var<S> neg);

/// One-to-one InfoNCE between SID and HID item embeddings whose denominator
/// holds only the other items (j != i). Needs at least two rows.
template <typename S>
ad::Var<S> pairwise_alignment_loss(ad::Var<S> e_sid, ad::Var<S> e_hid, double tau);

/// Anchor i of the item pool with its positives given as pool indices.
struct PositiveSets {
  std::vector<ItemId> pool;            // distinct item ids, anchors in this order
  std::vector<std::uint8_t> mask;      // pool x pool, mask[i * P + k] = 1 iff pool[k] in P(i)

  std::size_t size() const { return pool.size(); }
  bool contains(std::size_t i, std::size_t k) const { return mask[i * pool.size() + k] != 0; }
};

/// Positives of anchor item i: itself, pool items sharing its first p codes,
/// and pool items within distance o of an occurrence of i in any sequence.
std::vector<ItemId> build_positive_set(ItemId i, const std::vector<std::vector<ItemId>>& sequences,
                                       const std::vector<ItemId>& pool, const std::vector<SemanticId>& sids, int p,
                                       int o);

/// Positive sets for every pool member at once.
PositiveSets build_positive_sets(const std::vector<ItemId>& pool, const std::vector<std::vector<ItemId>>& sequences,
                                 const std::vector<SemanticId>& sids, int p, int o);

/// Distinct items of the sequences in first-appearance order, uniformly
/// subsampled to at most cap (order preserved).
std::vector<ItemId> alignment_pool(const std::vector<std::vector<ItemId>>& sequences, std::size_t cap, Rng& rng);

/// One-to-many alignment in both directions (SID anchors vs HID items, then
/// HID anchors vs SID items). The denominator covers the whole pool.
template <typename S>
ad::Var<S> code_guided_alignment_loss(ad::Var<S> e_sid, ad::Var<S> e_hid, const std::vector<std::uint8_t>& positives,
                                      double tau);

/// Symmetric InfoNCE between user vectors and their masked-granularity
/// counterparts; the denominator includes the matching pair.
template <typename S>
ad::Var<S> masked_granularity_loss(ad::Var<S> u, ad::Var<S> u_masked, double tau);

struct LossReport {
  double l_rec = 0.0;
  double l_ca = 0.0;
  double l_msg = 0.0;
  double total = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
};

/// total = l_rec + beta * l_ca + gamma * l_msg. Negative weights are errors.
LossReport total_loss(double l_rec, double l_ca, double l_msg, double beta, double gamma);

/// Differentiable counterpart of total_loss; absent terms are skipped.
template <typename S>
ad::Var<S> weighted_total(ad::Var<S> l_rec, const ad::Var<S>* l_ca, const ad::Var<S>* l_msg, double beta,
                          double gamma);

/// Per-step loss log, `step,l_rec,l_ca,l_msg,total`.
class LossLog {
 public:
  /// append keeps existing rows (resumed runs) instead of truncating.
  explicit LossLog(const std::filesystem::path& path, bool append = false);
  void append(std::int64_t step, const LossReport& r);

 private:
  std::ofstream out_;
};

}  // namespace h2rec
