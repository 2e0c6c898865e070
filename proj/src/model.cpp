#include "h2rec/model.hpp"

#include "h2rec/io.hpp"

#include <cmath>

namespace h2rec {

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw Error("model config: " + what);
  };
  need(n_items >= 1, "n_items must be positive");
  need(d >= 1, "d must be positive");
  need(levels >= 1, "L must be positive");
  need(codebook_size >= 1, "K must be positive");
  need(max_len >= 1, "max_len must be positive");
  need(layers >= 0, "layers must be non-negative");
  need(heads >= 1 && d % heads == 0, "d must be divisible by heads");
  need(ffn_mult >= 1, "ffn_mult must be positive");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  need(emb_std > 0.0, "emb_std must be positive");
  need(!(hid_only && sid_only), "hid_only and sid_only are mutually exclusive");
}

FlatBatch flatten(const Batch& batch) {
  FlatBatch fb;
  fb.num_sequences = batch.batch_size;
  fb.n_neg = batch.targets.empty() ? 0 : batch.n_neg;
  const bool with_targets = !batch.targets.empty();
  for (int b = 0; b < batch.batch_size; ++b) {
    const int start = static_cast<int>(fb.items.size());
    int pos = 0;
    for (int t = 0; t < batch.max_len; ++t) {
      if (!batch.valid(b, t)) continue;
      fb.items.push_back(batch.item(b, t));
      fb.seq_of_row.push_back(b);
      fb.position.push_back(pos++);
      if (with_targets) {
        fb.targets.push_back(batch.target(b, t));
        for (int k = 0; k < batch.n_neg; ++k) fb.negatives.push_back(batch.negative(b, t, k));
      }
    }
    if (pos == 0) throw Error("batch sequence " + std::to_string(b) + " has no valid positions");
    fb.segments.push_back({start, pos});
    fb.last_row.push_back(start + pos - 1);
  }
  return fb;
}

template <typename S>
H2RecModel<S>::H2RecModel(ModelConfig cfg, std::vector<SemanticId> sids) : cfg_(std::move(cfg)), sids_(std::move(sids)) {
  cfg_.validate();
  if (cfg_.uses_sid()) {
    if (static_cast<int>(sids_.size()) != cfg_.n_items) {
      throw Error("model: have SIDs for " + std::to_string(sids_.size()) + " items but the catalog has " +
                  std::to_string(cfg_.n_items));
    }
  }
  codes_by_level_.assign(static_cast<std::size_t>(cfg_.levels), std::vector<int>(sids_.size(), 0));
  for (std::size_t i = 0; i < sids_.size(); ++i) {
    if (static_cast<int>(sids_[i].size()) != cfg_.levels) {
      throw Error("model: item " + std::to_string(i) + " has " + std::to_string(sids_[i].size()) +
                  " codes, expected L=" + std::to_string(cfg_.levels));
    }
    for (int l = 0; l < cfg_.levels; ++l) {
      const int c = sids_[i][static_cast<std::size_t>(l)];
      if (c < 0 || c >= cfg_.codebook_size) throw Error("model: code out of range for item " + std::to_string(i));
      codes_by_level_[static_cast<std::size_t>(l)][i] = c;
    }
  }

  const int d = cfg_.d, L = cfg_.levels;
  auto zeros = [](int r, int c) { return Mat<S>(Mat<S>::Zero(r, c)); };
  params_.add("hid.emb", zeros(cfg_.n_items + 1, d));
  for (int l = 0; l < L; ++l) params_.add("code.emb." + std::to_string(l), zeros(cfg_.codebook_size, d));
  params_.add("fusion.w1", zeros(d + L, d));
  params_.add("fusion.b1", zeros(1, d));
  params_.add("fusion.w2", zeros(d, L));
  params_.add("fusion.b2", zeros(1, L));
  params_.add("fusion.b_prior", zeros(1, L));
  params_.add("xattn.wq", zeros(d, d));
  params_.add("xattn.wk", zeros(d, d));
  params_.add("xattn.wv", zeros(d, d));
  params_.add("mask_token", zeros(1, d));
  for (const std::string enc : {"enc_sid", "enc_hid"}) {
    params_.add(enc + ".pos", zeros(cfg_.max_len, d));
    for (int i = 0; i < cfg_.layers; ++i) {
      const std::string p = enc + ".l" + std::to_string(i) + ".";
      params_.add(p + "ln1.g", Mat<S>(Mat<S>::Ones(1, d)));
      params_.add(p + "ln1.b", zeros(1, d));
      for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) params_.add(p + w, zeros(d, d));
      params_.add(p + "ln2.g", Mat<S>(Mat<S>::Ones(1, d)));
      params_.add(p + "ln2.b", zeros(1, d));
      params_.add(p + "ffn.w1", zeros(d, d * cfg_.ffn_mult));
      params_.add(p + "ffn.b1", zeros(1, d * cfg_.ffn_mult));
      params_.add(p + "ffn.w2", zeros(d * cfg_.ffn_mult, d));
      params_.add(p + "ffn.b2", zeros(1, d));
    }
    params_.add(enc + ".ln_f.g", Mat<S>(Mat<S>::Ones(1, d)));
    params_.add(enc + ".ln_f.b", zeros(1, d));
  }
}

template <typename S>
void H2RecModel<S>::init_parameters(Rng& rng) {
  auto fill = [&](const std::string& name, double std) {
    std::normal_distribution<double> g(0.0, std);
    Mat<S>& v = params_.get(name).value;
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<S>(g(rng));
  };
  const int d = cfg_.d, L = cfg_.levels;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  fill("hid.emb", cfg_.emb_std);
  params_.get("hid.emb").value.row(cfg_.n_items).setZero();
  for (int l = 0; l < L; ++l) fill("code.emb." + std::to_string(l), cfg_.emb_std);
  fill("fusion.w1", 1.0 / std::sqrt(static_cast<double>(d + L)));
  params_.get("fusion.b1").value.setZero();
  fill("fusion.w2", 0.1 * inv_sqrt_d);
  params_.get("fusion.b2").value.setZero();
  Mat<S>& prior = params_.get("fusion.b_prior").value;
  for (int l = 0; l < L; ++l) {
    prior(0, l) = L == 1 ? S(0) : static_cast<S>(0.5 - static_cast<double>(l) / (L - 1));
  }
  for (const char* w : {"xattn.wq", "xattn.wk", "xattn.wv"}) fill(w, inv_sqrt_d);
  fill("mask_token", cfg_.emb_std);
  for (const std::string enc : {"enc_sid", "enc_hid"}) {
    fill(enc + ".pos", cfg_.emb_std);
    for (int i = 0; i < cfg_.layers; ++i) {
      const std::string p = enc + ".l" + std::to_string(i) + ".";
      for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) fill(p + w, inv_sqrt_d);
      fill(p + "ffn.w1", inv_sqrt_d);
      fill(p + "ffn.w2", 1.0 / std::sqrt(static_cast<double>(d * cfg_.ffn_mult)));
      params_.get(p + "ln1.g").value.setOnes();
      params_.get(p + "ln2.g").value.setOnes();
      for (const char* b : {"ln1.b", "ln2.b", "ffn.b1", "ffn.b2"}) params_.get(p + b).value.setZero();
    }
    params_.get(enc + ".ln_f.g").value.setOnes();
    params_.get(enc + ".ln_f.b").value.setZero();
  }
}

template <typename S>
ad::Var<S> H2RecModel<S>::linear(ad::Tape<S>& tape, ad::Var<S> x, const std::string& w, const std::string& b) {
  return ad::add_rowvec(ad::matmul(x, ad::param(tape, params_.get(w))), ad::param(tape, params_.get(b)));
}

template <typename S>
std::vector<ad::Var<S>> H2RecModel<S>::granularity_sequences(ad::Tape<S>& tape, std::span<const int> items) {
  std::vector<ad::Var<S>> out;
  std::vector<int> idx(items.size());
  for (int l = 0; l < cfg_.levels; ++l) {
    const auto& codes = level_codes(l);
    for (std::size_t r = 0; r < items.size(); ++r) {
      const int it = items[r];
      if (it < 0 || it == cfg_.n_items) {
        idx[r] = -1;
      } else if (it > cfg_.n_items || static_cast<std::size_t>(it) >= codes.size()) {
        throw Error("missing SID for item " + std::to_string(it));
      } else {
        idx[r] = codes[static_cast<std::size_t>(it)];
      }
    }
    out.push_back(ad::lookup(tape, params_.get("code.emb." + std::to_string(l)), std::span<const int>(idx)));
  }
  return out;
}

template <typename S>
std::pair<ad::Var<S>, ad::Var<S>> H2RecModel<S>::fusion_weights(ad::Tape<S>& tape, ad::Var<S> e_last) {
  using namespace ad;
  const Eigen::Index n = e_last.rows();
  Var<S> prior = param(tape, params_.get("fusion.b_prior"));
  Var<S> ones = constant(tape, Mat<S>(Mat<S>::Ones(n, 1)));
  Var<S> prior_rows = matmul(ones, prior);
  Var<S> h = tanh(linear(tape, concat_cols<S>({e_last, prior_rows}), "fusion.w1", "fusion.b1"));
  Var<S> s = add_rowvec(linear(tape, h, "fusion.w2", "fusion.b2"), prior);
  return {s, softmax_rows(s)};
}

template <typename S>
ad::Var<S> H2RecModel<S>::fuse_sid_sequence(const std::vector<ad::Var<S>>& gran, ad::Var<S> alpha_rows) {
  if (gran.empty() || static_cast<Eigen::Index>(gran.size()) != alpha_rows.cols()) {
    throw Error("fuse_sid_sequence: alpha has " + std::to_string(alpha_rows.cols()) + " columns for " +
                std::to_string(gran.size()) + " levels");
  }
  ad::Var<S> acc = ad::row_scale(gran[0], ad::col(alpha_rows, 0));
  for (std::size_t l = 1; l < gran.size(); ++l) {
    acc = ad::add(acc, ad::row_scale(gran[l], ad::col(alpha_rows, static_cast<Eigen::Index>(l))));
  }
  return acc;
}

template <typename S>
ad::Var<S> H2RecModel<S>::cross_attention(ad::Tape<S>& tape, ad::Var<S> e_hid, const std::vector<ad::Var<S>>& gran,
                                          ad::Var<S> alpha_rows, const std::vector<ad::Segment>& segs) {
  using namespace ad;
  Var<S> wq = param(tape, params_.get("xattn.wq"));
  Var<S> wk = param(tape, params_.get("xattn.wk"));
  Var<S> wv = param(tape, params_.get("xattn.wv"));
  Var<S> q = matmul(e_hid, wq);
  Var<S> out = e_hid;
  for (std::size_t l = 0; l < gran.size(); ++l) {
    Var<S> att = segment_attention(q, matmul(gran[l], wk), matmul(gran[l], wv), segs, 1, cfg_.causal_cross);
    out = add(out, row_scale(att, col(alpha_rows, static_cast<Eigen::Index>(l))));
  }
  return out;
}

template <typename S>
ad::Var<S> H2RecModel<S>::encode_sequence(ad::Tape<S>& tape, const std::string& which, ad::Var<S> x,
                                          const FlatBatch& fb, const ForwardOptions& opt) {
  using namespace ad;
  for (int p : fb.position) {
    if (p >= cfg_.max_len) throw Error("encode_sequence: position beyond max_len");
  }
  const bool drop = opt.train && cfg_.dropout > 0.0;
  if (drop && !opt.rng) throw Error("encode_sequence: dropout needs an rng");
  auto maybe_drop = [&](Var<S> v) { return drop ? dropout(v, cfg_.dropout, *opt.rng) : v; };
  auto P = [&](const std::string& name) { return param(tape, params_.get(which + "." + name)); };

  Var<S> h = add(x, lookup(tape, params_.get(which + ".pos"), std::span<const int>(fb.position)));
  h = maybe_drop(h);
  for (int i = 0; i < cfg_.layers; ++i) {
    const std::string l = "l" + std::to_string(i) + ".";
    Var<S> a = layer_norm(h, P(l + "ln1.g"), P(l + "ln1.b"));
    Var<S> att = segment_attention(matmul(a, P(l + "attn.wq")), matmul(a, P(l + "attn.wk")),
                                   matmul(a, P(l + "attn.wv")), fb.segments, cfg_.heads, true);
    h = add(h, maybe_drop(matmul(att, P(l + "attn.wo"))));
    Var<S> b = layer_norm(h, P(l + "ln2.g"), P(l + "ln2.b"));
    Var<S> f = gelu(add_rowvec(matmul(b, P(l + "ffn.w1")), P(l + "ffn.b1")));
    f = add_rowvec(matmul(f, P(l + "ffn.w2")), P(l + "ffn.b2"));
    h = add(h, maybe_drop(f));
  }
  return layer_norm(h, P("ln_f.g"), P("ln_f.b"));
}

template <typename S>
std::vector<ad::Var<S>> H2RecModel<S>::masked_view(ad::Tape<S>& tape, const std::vector<ad::Var<S>>& gran, int m) {
  if (m < 0 || m >= static_cast<int>(gran.size())) {
    throw Error("masked_view: level " + std::to_string(m) + " outside [0, " + std::to_string(gran.size()) + ")");
  }
  std::vector<ad::Var<S>> out = gran;
  ad::Var<S> ones = ad::constant(tape, Mat<S>(Mat<S>::Ones(gran[0].rows(), 1)));
  out[static_cast<std::size_t>(m)] = ad::matmul(ones, ad::param(tape, params_.get("mask_token")));
  return out;
}

template <typename S>
ad::Var<S> H2RecModel<S>::item_sid_embeddings(ad::Tape<S>& tape, std::span<const int> items, ad::Var<S> alpha_rows) {
  for (int it : items) {
    if (it < 0 || it >= cfg_.n_items) throw Error("cannot score item " + std::to_string(it) + " (pad or out of range)");
  }
  return fuse_sid_sequence(granularity_sequences(tape, items), alpha_rows);
}

template <typename S>
ForwardOutput<S> H2RecModel<S>::forward(ad::Tape<S>& tape, const FlatBatch& fb, const ForwardOptions& opt) {
  using namespace ad;
  ForwardOutput<S> out;
  const int B = fb.num_sequences, L = cfg_.levels;
  const std::span<const int> items(fb.items);
  Var<S> e_hid = lookup(tape, params_.get("hid.emb"), items);
  out.e_hid = e_hid;
  out.alpha = constant(tape, Mat<S>(Mat<S>::Constant(B, L, S(1) / static_cast<S>(L))));
  if (cfg_.uses_sid()) {
    out.granularity = granularity_sequences(tape, items);
    if (!cfg_.no_fn) {
      auto [s, alpha] = fusion_weights(tape, gather_rows(e_hid, std::span<const int>(fb.last_row)));
      out.scores = s;
      out.alpha = alpha;
    }
    out.alpha_rows = gather_rows(out.alpha, std::span<const int>(fb.seq_of_row));
    out.e_sid = fuse_sid_sequence(out.granularity, out.alpha_rows);
    out.h_sid = encode_sequence(tape, "enc_sid", *out.e_sid, fb, opt);
    out.u_sid = gather_rows(*out.h_sid, std::span<const int>(fb.last_row));
    if (opt.mask_level >= 0) {
      auto view = masked_view(tape, out.granularity, opt.mask_level);
      Var<S> hm = encode_sequence(tape, "enc_sid", fuse_sid_sequence(view, out.alpha_rows), fb, opt);
      out.u_sid_masked = gather_rows(hm, std::span<const int>(fb.last_row));
    }
  } else {
    out.alpha_rows = gather_rows(out.alpha, std::span<const int>(fb.seq_of_row));
  }
  if (cfg_.uses_hid()) {
    Var<S> fused = cfg_.uses_cross() ? cross_attention(tape, e_hid, out.granularity, out.alpha_rows, fb.segments) : e_hid;
    out.e_fused = fused;
    out.h_hid = encode_sequence(tape, "enc_hid", fused, fb, opt);
    out.u_hid = gather_rows(*out.h_hid, std::span<const int>(fb.last_row));
  }
  return out;
}

template <typename S>
ad::Var<S> H2RecModel<S>::score_rows(ad::Tape<S>& tape, const ForwardOutput<S>& out, std::span<const int> items) {
  using namespace ad;
  std::optional<Var<S>> total;
  if (cfg_.uses_sid()) {
    total = rowdot(*out.h_sid, item_sid_embeddings(tape, items, out.alpha_rows));
  }
  if (cfg_.uses_hid()) {
    for (int it : items) {
      if (it < 0 || it >= cfg_.n_items) throw Error("cannot score item " + std::to_string(it) + " (pad or out of range)");
    }
    Var<S> h = rowdot(*out.h_hid, lookup(tape, params_.get("hid.emb"), items));
    total = total ? add(*total, h) : h;
  }
  return *total;
}

template <typename S>
double H2RecModel<S>::score(const Mat<S>& alpha_row, const Mat<S>* u_sid, const Mat<S>* u_hid, ItemId item,
                            const ParamStore<S>& params, const std::vector<SemanticId>& sids, int levels) {
  double s = 0.0;
  if (u_sid) {
    Mat<S> e = Mat<S>::Zero(1, u_sid->cols());
    const SemanticId& sid = sids.at(static_cast<std::size_t>(item));
    for (int l = 0; l < levels; ++l) {
      e += alpha_row(0, l) * params.get("code.emb." + std::to_string(l)).value.row(sid[static_cast<std::size_t>(l)]);
    }
    s += static_cast<double>(e.row(0).dot(u_sid->row(0)));
  }
  if (u_hid) s += static_cast<double>(params.get("hid.emb").value.row(item).dot(u_hid->row(0)));
  return s;
}

template <typename S>
std::vector<std::vector<double>> H2RecModel<S>::score_candidates(const Batch& inputs,
                                                                 const std::vector<std::vector<ItemId>>& candidates) {
  if (static_cast<int>(candidates.size()) != inputs.batch_size) throw Error("score_candidates: one list per sequence");
  const FlatBatch fb = flatten(inputs);
  ad::Tape<S> tape;
  const ForwardOutput<S> out = forward(tape, fb, ForwardOptions{});
  std::vector<std::vector<double>> scores(candidates.size());
  for (std::size_t b = 0; b < candidates.size(); ++b) {
    const auto bi = static_cast<Eigen::Index>(b);
    Mat<S> alpha = out.alpha.value().row(bi);
    Mat<S> us, uh;
    if (out.u_sid) us = out.u_sid->value().row(bi);
    if (out.u_hid) uh = out.u_hid->value().row(bi);
    for (ItemId it : candidates[b]) {
      if (it < 0 || it >= cfg_.n_items) throw Error("cannot score item " + std::to_string(it) + " (pad or out of range)");
      scores[b].push_back(score(alpha, out.u_sid ? &us : nullptr, out.u_hid ? &uh : nullptr, it, params_, sids_,
                                cfg_.levels));
    }
  }
  return scores;
}

template class H2RecModel<float>;
template class H2RecModel<double>;

}  // namespace h2rec
