#pragma once

#include "h2rec/autodiff.hpp"
#include "h2rec/data.hpp"
#include "h2rec/semantics.hpp"

#include <optional>
#include <string>
#include <vector>

namespace h2rec {

struct ModelConfig {
  int n_items = 0;
  int d = 64;
  int levels = 4;          // L
  int codebook_size = 128; // K
  int max_len = 50;        // T, also the positional table size
  int layers = 2;
  int heads = 2;
  int ffn_mult = 4;
  double dropout = 0.2;
  /// Std of item, code and positional embeddings at init.
  double emb_std = 0.05;
  /// Restrict cross attention to keys at or before the query position.
  bool causal_cross = true;

  bool no_fn = false;     // alpha fixed to 1/L
  bool no_mca = false;    // fused sequence = HID sequence
  bool hid_only = false;  // score with the HID branch only
  bool sid_only = false;  // score with the SID branch only

  bool uses_sid() const { return !hid_only; }
  bool uses_hid() const { return !sid_only; }
  bool uses_cross() const { return !no_mca && !hid_only && !sid_only; }
  void validate() const;
};

/// Valid positions of a left-padded batch packed row by row. Row r belongs
/// to sequence seq_of_row[r]; rows of one sequence are contiguous and in
/// chronological order.
struct FlatBatch {
  int num_sequences = 0;
  std::vector<int> items;
  std::vector<int> seq_of_row;
  std::vector<int> position;  // 0-based offset within its sequence
  std::vector<ad::Segment> segments;
  std::vector<int> last_row;  // per sequence
  std::vector<int> targets;   // per row, empty for inference batches
  std::vector<int> negatives; // rows x n_neg
  int n_neg = 0;

  std::size_t rows() const { return items.size(); }
};

FlatBatch flatten(const Batch& batch);

struct ForwardOptions {
  bool train = false;
  /// Also encode a view with one granularity level replaced by the mask
  /// token (0-based level); -1 skips it.
  int mask_level = -1;
  Rng* rng = nullptr;  // dropout source, required when train and dropout > 0
};

template <typename S>
struct ForwardOutput {
  std::optional<ad::Var<S>> scores;  // s, B x L (absent under no_fn)
  ad::Var<S> alpha;                  // B x L
  ad::Var<S> alpha_rows;             // rows x L
  std::vector<ad::Var<S>> granularity;
  std::optional<ad::Var<S>> e_hid;
  std::optional<ad::Var<S>> e_sid;
  std::optional<ad::Var<S>> e_fused;
  std::optional<ad::Var<S>> h_sid;  // encoder output per row
  std::optional<ad::Var<S>> h_hid;
  std::optional<ad::Var<S>> u_sid;  // B x d at the last valid row
  std::optional<ad::Var<S>> u_hid;
  std::optional<ad::Var<S>> u_sid_masked;
};

/// Dual-branch sequential recommender. Parameters (right-multiplied, in x out):
///   hid.emb (|V|+1) x d, last row is the pad row and stays zero
///   code.emb.<l> K x d
///   fusion.w1 (d+L) x d, fusion.b1, fusion.w2 d x L, fusion.b2, fusion.b_prior
///   xattn.wq xattn.wk xattn.wv d x d
///   mask_token 1 x d
///   enc_sid.* / enc_hid.* causal transformer encoders
template <typename S>
class H2RecModel {
 public:
  H2RecModel(ModelConfig cfg, std::vector<SemanticId> sids);

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  const std::vector<SemanticId>& sids() const { return sids_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

  /// Random init of every parameter; b_prior descends from +0.5 to -0.5.
  void init_parameters(Rng& rng);

  /// One L-long list of rows x d lookups; items < 0 give zero rows.
  std::vector<ad::Var<S>> granularity_sequences(ad::Tape<S>& tape, std::span<const int> items);

  /// Returns (s, alpha) for the anchors e_last (B x d).
  std::pair<ad::Var<S>, ad::Var<S>> fusion_weights(ad::Tape<S>& tape, ad::Var<S> e_last);

  /// Convex combination of the granularity sequences with per-row weights.
  static ad::Var<S> fuse_sid_sequence(const std::vector<ad::Var<S>>& gran, ad::Var<S> alpha_rows);

  /// Single-head cross attention from HID queries into each granularity,
  /// weighted by alpha per row, plus the HID residual.
  ad::Var<S> cross_attention(ad::Tape<S>& tape, ad::Var<S> e_hid, const std::vector<ad::Var<S>>& gran,
                             ad::Var<S> alpha_rows, const std::vector<ad::Segment>& segs);

  /// Causal transformer over the rows. Returns per-row hidden states.
  ad::Var<S> encode_sequence(ad::Tape<S>& tape, const std::string& which, ad::Var<S> x, const FlatBatch& fb,
                             const ForwardOptions& opt);

  /// Copy of gran with level m replaced by the broadcast mask token.
  std::vector<ad::Var<S>> masked_view(ad::Tape<S>& tape, const std::vector<ad::Var<S>>& gran, int m);

  /// Item-level SID embedding sum_l alpha(r, l) * code.emb.<l>[c_l(item r)].
  ad::Var<S> item_sid_embeddings(ad::Tape<S>& tape, std::span<const int> items, ad::Var<S> alpha_rows);

  ForwardOutput<S> forward(ad::Tape<S>& tape, const FlatBatch& fb, const ForwardOptions& opt);

  /// Scores rows x 1 of items[r] against row r's hidden state.
  ad::Var<S> score_rows(ad::Tape<S>& tape, const ForwardOutput<S>& out, std::span<const int> items);

  /// Inference: score each sequence's candidates (one list per sequence).
  std::vector<std::vector<double>> score_candidates(const Batch& inputs,
                                                    const std::vector<std::vector<ItemId>>& candidates);

  /// Scores from final user vectors; the building block of score_candidates.
  static double score(const Mat<S>& alpha_row, const Mat<S>* u_sid, const Mat<S>* u_hid, ItemId item,
                      const ParamStore<S>& params, const std::vector<SemanticId>& sids, int levels);

 private:
  ad::Var<S> linear(ad::Tape<S>& tape, ad::Var<S> x, const std::string& w, const std::string& b);
  const std::vector<int>& level_codes(int l) const { return codes_by_level_[static_cast<std::size_t>(l)]; }

  ModelConfig cfg_;
  std::vector<SemanticId> sids_;
  std::vector<std::vector<int>> codes_by_level_;  // L x n_items
  ParamStore<S> params_;
};

/// Copies every parameter value into another precision.
template <typename To, typename From>
void copy_params(const ParamStore<From>& from, ParamStore<To>& to) {
  for (std::size_t i = 0; i < from.size(); ++i) {
    to.get(from[i].name).value = from[i].value.template cast<To>();
  }
}

}  // namespace h2rec
