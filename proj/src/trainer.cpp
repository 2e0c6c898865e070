#include "h2rec/trainer.hpp"

#include "h2rec/io.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

namespace h2rec {

// ---------------------------------------------------------------- config

namespace {

template <typename T>
void read_field(const nlohmann::json& v, const std::string& key, T& out) {
  auto bad = [&](const char* want) { throw Error("config key '" + key + "' must be " + want); };
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) bad("a boolean");
    out = v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) bad("a string");
    out = v.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      bad("a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) bad("an integer");
    out = v.get<T>();
  } else {
    if (!v.is_number()) bad("a number");
    out = v.get<T>();
  }
}

#define H2REC_TRAIN_FIELDS(X)                                                                              \
  X(epochs) X(lr) X(batch_size) X(max_len) X(d) X(L) X(K) X(p) X(o) X(beta) X(gamma) X(tau) X(n_neg)     \
  X(seed) X(no_fn) X(no_mca) X(no_ca) X(no_msg) X(hid_only) X(sid_only) X(patience) X(layers) X(heads)   \
  X(dropout) X(clip_norm) X(eval_negatives) X(pool_cap) X(emb_std) X(rescale_init) X(hid_init)          \
  X(alignment) X(causal_cross)

}  // namespace

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw Error("invalid config: " + what);
  };
  need(epochs >= 1, "epochs must be >= 1");
  need(lr > 0.0, "lr must be positive");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(max_len >= 1, "max_len must be >= 1");
  need(d >= 1 && L >= 1 && K >= 1, "d, L and K must be positive");
  need(p >= 1 && p <= L, "p must lie in [1, L]");
  need(o >= 0, "o must be non-negative");
  need(beta >= 0.0 && gamma >= 0.0, "beta and gamma must be non-negative");
  need(tau > 0.0, "tau must be positive");
  need(n_neg >= 1, "n_neg must be >= 1");
  need(patience >= 1, "patience must be >= 1");
  need(layers >= 0 && heads >= 1 && d % heads == 0, "d must be divisible by heads");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  need(clip_norm >= 0.0, "clip_norm must be non-negative");
  need(eval_negatives >= 0, "eval_negatives must be non-negative (0 = full catalog)");
  need(pool_cap >= 2, "pool_cap must be >= 2");
  need(emb_std > 0.0, "emb_std must be positive");
  need(hid_init == "semantic" || hid_init == "random", "hid_init must be 'semantic' or 'random'");
  need(alignment == "code_guided" || alignment == "pairwise", "alignment must be 'code_guided' or 'pairwise'");
  need(!(hid_only && sid_only), "hid_only and sid_only are mutually exclusive");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
#define H2REC_PUT(f) j[#f] = f;
  H2REC_TRAIN_FIELDS(H2REC_PUT)
#undef H2REC_PUT
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("config must be a JSON object");
  TrainConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    bool known = false;
#define H2REC_GET(f)               \
  if (key == #f) {                 \
    read_field(it.value(), key, c.f); \
    known = true;                  \
  }
    H2REC_TRAIN_FIELDS(H2REC_GET)
#undef H2REC_GET
    if (!known) throw Error("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": invalid JSON: " + e.what());
  }
  try {
    return from_json(j);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

std::string TrainConfig::hash() const { return io::hex64(io::fnv1a64(to_json().dump())); }

ModelConfig TrainConfig::model_config(std::int32_t n_items) const {
  ModelConfig m;
  m.n_items = n_items;
  m.d = d;
  m.levels = L;
  m.codebook_size = K;
  m.max_len = max_len;
  m.layers = layers;
  m.heads = heads;
  m.dropout = dropout;
  m.emb_std = emb_std;
  m.causal_cross = causal_cross;
  m.no_fn = no_fn;
  m.no_mca = no_mca;
  m.hid_only = hid_only;
  m.sid_only = sid_only;
  return m;
}

// ---------------------------------------------------------------- init

std::vector<MatF> project_codebooks(const Codebooks& cb, int d) {
  if (static_cast<int>(cb.books.size()) != cb.levels) throw Error("project_codebooks: malformed codebooks");
  std::vector<MatF> out;
  if (cb.dim == d) return cb.books;
  const Eigen::Index rows = static_cast<Eigen::Index>(cb.levels) * cb.size;
  if (cb.dim < d) {
    for (const auto& b : cb.books) {
      MatF t = MatF::Zero(cb.size, d);
      t.leftCols(cb.dim) = b;
      out.push_back(std::move(t));
    }
    return out;
  }
  Eigen::MatrixXd stacked(rows, cb.dim);
  for (int l = 0; l < cb.levels; ++l) {
    stacked.middleRows(static_cast<Eigen::Index>(l) * cb.size, cb.size) =
        cb.books[static_cast<std::size_t>(l)].cast<double>();
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(stacked, Eigen::ComputeThinV);
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(cb.dim, d);
  const Eigen::MatrixXd& v = svd.matrixV();
  for (int k = 0; k < d && k < v.cols(); ++k) {
    Eigen::VectorXd c = v.col(k);
    Eigen::Index arg = 0;
    c.cwiseAbs().maxCoeff(&arg);
    if (c(arg) < 0) c = -c;
    basis.col(k) = c;
  }
  for (int l = 0; l < cb.levels; ++l) {
    out.push_back((cb.books[static_cast<std::size_t>(l)].cast<double>() * basis).cast<float>());
  }
  return out;
}

namespace {

double rms(const MatF& m) {
  return m.size() ? std::sqrt(static_cast<double>(m.squaredNorm()) / static_cast<double>(m.size())) : 0.0;
}

}  // namespace

H2RecModel<float> init_model(const SplitDataset& split, const SemanticMatrix& semantic, const SidAssignment& sids,
                             const Codebooks& codebooks, const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::int32_t n = split.n_items;
  const ModelConfig mc = cfg.model_config(n);
  if (cfg.hid_init == "semantic" && semantic.count() != n) {
    throw Error("semantic matrix has " + std::to_string(semantic.count()) + " rows but the catalog has " +
                std::to_string(n) + " items");
  }
  if (mc.uses_sid()) {
    if (static_cast<std::int32_t>(sids.codes.size()) != n) {
      throw Error("SID file covers " + std::to_string(sids.codes.size()) + " items but the catalog has " +
                  std::to_string(n));
    }
    if (sids.levels != cfg.L || sids.codebook_size != cfg.K) {
      throw Error("SIDs are " + std::to_string(sids.levels) + "x" + std::to_string(sids.codebook_size) +
                  " but the config asks for L=" + std::to_string(cfg.L) + " K=" + std::to_string(cfg.K));
    }
    if (codebooks.levels != cfg.L || codebooks.size != cfg.K) throw Error("codebook shape disagrees with L/K");
  }
  H2RecModel<float> model(mc, mc.uses_sid() ? sids.codes : std::vector<SemanticId>());
  model.init_parameters(rng);

  if (cfg.hid_init == "semantic") {
    const ReducedMatrix red = reduce_dims(semantic, cfg.d);
    MatF e = red.values;
    if (cfg.rescale_init) {
      const double r = rms(e);
      if (r > 0.0) e *= static_cast<float>(cfg.emb_std / r);
    }
    auto& table = model.params().get("hid.emb").value;
    table.topRows(n) = e;
    table.row(n).setZero();
  }
  if (mc.uses_sid()) {
    auto tables = project_codebooks(codebooks, cfg.d);
    if (cfg.rescale_init) {
      double sq = 0.0, cnt = 0.0;
      for (const auto& t : tables) {
        sq += static_cast<double>(t.squaredNorm());
        cnt += static_cast<double>(t.size());
      }
      const double r = cnt > 0 ? std::sqrt(sq / cnt) : 0.0;
      if (r > 0.0) {
        for (auto& t : tables) t *= static_cast<float>(cfg.emb_std / r);
      }
    }
    for (int l = 0; l < cfg.L; ++l) {
      model.params().get("code.emb." + std::to_string(l)).value = tables[static_cast<std::size_t>(l)];
    }
  }
  return model;
}

// ---------------------------------------------------------------- losses per batch

template <typename S>
StepLosses<S> compute_losses(ad::Tape<S>& tape, H2RecModel<S>& model, const FlatBatch& fb, const TrainConfig& cfg,
                             Rng& rng, bool train, int mask_level) {
  using namespace ad;
  const ModelConfig& mc = model.config();
  if (fb.targets.size() != fb.rows()) throw Error("compute_losses: batch has no targets");
  const bool ca = !cfg.no_ca && mc.uses_sid();
  const bool msg = !cfg.no_msg && mc.uses_sid();
  if (msg && mask_level < 0) mask_level = std::uniform_int_distribution<int>(0, mc.levels - 1)(rng);

  ForwardOptions fo;
  fo.train = train;
  fo.mask_level = msg ? mask_level : -1;
  fo.rng = &rng;
  StepLosses<S> out{Var<S>{}, Var<S>{}, std::nullopt, std::nullopt, model.forward(tape, fb, fo)};
  const ForwardOutput<S>& f = out.forward;

  Var<S> pos = model.score_rows(tape, f, std::span<const int>(fb.targets));
  std::vector<Var<S>> negs;
  std::vector<int> col(fb.rows());
  for (int k = 0; k < fb.n_neg; ++k) {
    for (std::size_t r = 0; r < fb.rows(); ++r) col[r] = fb.negatives[r * static_cast<std::size_t>(fb.n_neg) + static_cast<std::size_t>(k)];
    negs.push_back(model.score_rows(tape, f, std::span<const int>(col)));
  }
  out.l_rec = rec_loss(pos, negs.size() == 1 ? negs[0] : concat_cols(negs));

  if (ca) {
    std::vector<std::vector<ItemId>> seqs;
    for (const auto& s : fb.segments) {
      seqs.emplace_back(fb.items.begin() + s.start, fb.items.begin() + s.start + s.len);
    }
    const std::vector<ItemId> pool = alignment_pool(seqs, static_cast<std::size_t>(cfg.pool_cap), rng);
    const bool pairwise = cfg.alignment == "pairwise";
    if (pool.size() >= (pairwise ? 2U : 1U)) {
      Var<S> ones = constant(tape, Mat<S>(Mat<S>::Ones(static_cast<Eigen::Index>(pool.size()), 1)));
      Var<S> alpha_pool = matmul(ones, mean_rows(f.alpha));
      const std::span<const int> items(pool);
      Var<S> e_sid = model.item_sid_embeddings(tape, items, alpha_pool);
      Var<S> e_hid = lookup(tape, model.params().get("hid.emb"), items);
      if (pairwise) {
        out.l_ca = pairwise_alignment_loss(e_sid, e_hid, cfg.tau);
      } else {
        const PositiveSets ps = build_positive_sets(pool, seqs, model.sids(), cfg.p, cfg.o);
        out.l_ca = code_guided_alignment_loss(e_sid, e_hid, ps.mask, cfg.tau);
      }
    }
  }
  if (msg) out.l_msg = masked_granularity_loss(*f.u_sid, *f.u_sid_masked, cfg.tau);
  out.total = weighted_total(out.l_rec, out.l_ca ? &*out.l_ca : nullptr, out.l_msg ? &*out.l_msg : nullptr, cfg.beta,
                             cfg.gamma);
  return out;
}

template StepLosses<float> compute_losses(ad::Tape<float>&, H2RecModel<float>&, const FlatBatch&, const TrainConfig&,
                                          Rng&, bool, int);
template StepLosses<double> compute_losses(ad::Tape<double>&, H2RecModel<double>&, const FlatBatch&,
                                           const TrainConfig&, Rng&, bool, int);

// ---------------------------------------------------------------- trainer

Scorer model_scorer(H2RecModel<float>& model) {
  return [&model](std::span<const std::span<const ItemId>> inputs, const std::vector<std::vector<ItemId>>& cands) {
    const Batch b = make_input_batch(inputs, model.config().max_len, model.config().n_items);
    return model.score_candidates(b, cands);
  };
}

namespace {

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  return seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1;
}

std::vector<MatF> snapshot(const ParamStore<float>& ps) {
  std::vector<MatF> out;
  for (std::size_t i = 0; i < ps.size(); ++i) out.push_back(ps[i].value);
  return out;
}

}  // namespace

Trainer::Trainer(H2RecModel<float>& m, const SplitDataset& s, const PopularityPartition& p, TrainConfig c)
    : model(m),
      split(s),
      part(p),
      cfg(std::move(c)),
      adam(m.params(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm}),
      rng(cfg.seed ^ 0xD1B54A32D192ED03ULL) {
  cfg.validate();
  if (m.config().n_items != s.n_items) throw Error("trainer: model and split disagree on the catalog size");
}

LossReport Trainer::step(const Batch& batch) {
  const FlatBatch fb = flatten(batch);
  model.params().zero_grad();
  ad::Tape<float> tape;
  auto sl = compute_losses(tape, model, fb, cfg, rng, true);
  const LossReport rep =
      total_loss(sl.l_rec.scalar(), sl.l_ca ? sl.l_ca->scalar() : 0.0, sl.l_msg ? sl.l_msg->scalar() : 0.0,
                 sl.l_ca ? cfg.beta : 0.0, sl.l_msg ? cfg.gamma : 0.0);
  if (!std::isfinite(sl.total.scalar())) {
    std::ostringstream os;
    os << "training diverged at step " << state.step << " (epoch " << state.next_epoch << "): l_rec=" << rep.l_rec
       << " l_ca=" << rep.l_ca << " l_msg=" << rep.l_msg;
    throw Error(os.str());
  }
  tape.backward(sl.total);
  adam.step();
  ++state.step;
  return rep;
}

MetricsReport Trainer::validate() const {
  EvalOptions eo;
  eo.n_negatives = cfg.eval_negatives;
  eo.seed = cfg.seed;
  eo.validation = true;
  return evaluate(split, part, model_scorer(model), eo);
}

namespace {

nlohmann::ordered_json epoch_json(const EpochLog& e) {
  return {{"epoch", e.epoch},     {"l_rec", e.l_rec},       {"l_ca", e.l_ca},
          {"l_msg", e.l_msg},     {"total", e.total},       {"val_hit_at_10", e.val_hit},
          {"val_ndcg_at_10", e.val_ndcg}, {"improved", e.improved}};
}

}  // namespace

const TrainState& Trainer::run(const TrainOptions& opt) {
  std::optional<LossLog> log;
  if (opt.loss_csv) log.emplace(*opt.loss_csv, state.next_epoch > 0);
  int ran = 0;
  while (state.next_epoch < cfg.epochs && !state.stopped) {
    if (opt.max_epochs_this_run >= 0 && ran >= opt.max_epochs_this_run) return state;
    const auto t0 = std::chrono::steady_clock::now();
    const int epoch = state.next_epoch;
    BatchStream stream(split, BatchOptions{cfg.max_len, cfg.batch_size, cfg.n_neg}, epoch_seed(cfg.seed, epoch));
    EpochLog el;
    el.epoch = epoch;
    int steps = 0;
    while (auto b = stream.next()) {
      const LossReport r = step(*b);
      if (opt.first_loss && state.step == 1) *opt.first_loss = r.total;
      if (log) log->append(state.step - 1, r);
      el.l_rec += r.l_rec;
      el.l_ca += r.l_ca;
      el.l_msg += r.l_msg;
      el.total += r.total;
      ++steps;
    }
    if (steps > 0) {
      el.l_rec /= steps;
      el.l_ca /= steps;
      el.l_msg /= steps;
      el.total /= steps;
    }
    const MetricsReport val = validate();
    el.val_hit = val.group("overall").hit;
    el.val_ndcg = val.group("overall").ndcg;
    el.improved = el.val_ndcg > state.best_ndcg;
    if (el.improved) {
      state.best_ndcg = el.val_ndcg;
      state.best_epoch = epoch;
      state.bad_epochs = 0;
      best_params = snapshot(model.params());
    } else if (++state.bad_epochs >= cfg.patience) {
      state.stopped = true;
    }
    el.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.history.push_back(el);
    state.next_epoch = epoch + 1;
    ++ran;
    if (opt.epoch_json) {
      nlohmann::ordered_json arr = nlohmann::ordered_json::array();
      for (const auto& e : state.history) arr.push_back(epoch_json(e));
      auto os = io::open_out(*opt.epoch_json);
      os << arr.dump(2) << '\n';
    }
    if (opt.checkpoint) save_checkpoint(*opt.checkpoint, *this);
    if (opt.on_epoch) opt.on_epoch(el);
  }
  if (!best_params.empty()) {
    for (std::size_t i = 0; i < model.params().size(); ++i) model.params()[i].value = best_params[i];
  }
  return state;
}

// ---------------------------------------------------------------- gradient check

std::string to_string(LossTerm t) {
  switch (t) {
    case LossTerm::kRec:
      return "l_rec";
    case LossTerm::kCa:
      return "l_ca";
    case LossTerm::kMsg:
      return "l_msg";
    case LossTerm::kTotal:
      return "total";
  }
  return "?";
}

std::string param_group(const std::string& name) {
  if (name == "hid.emb") return "E_hid";
  if (name.rfind("code.emb.", 0) == 0) return "E_C";
  if (name.rfind("fusion.", 0) == 0) return "fusion";
  if (name.rfind("xattn.", 0) == 0) return "cross_attention";
  if (name == "mask_token") return "mask_token";
  if (name.rfind("enc_sid.", 0) == 0) return "encoder_sid";
  if (name.rfind("enc_hid.", 0) == 0) return "encoder_hid";
  return "other";
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.max_len = 4;
  c.L = 2;
  c.K = 4;
  c.d = 8;
  c.p = 1;
  c.o = 1;
  c.layers = 1;
  c.heads = 2;
  c.dropout = 0.0;
  c.n_neg = 2;
  c.batch_size = 2;
  c.emb_std = 0.5;
  return c;
}

GradCheckReport grad_check(const TrainConfig& cfg_small, LossTerm term, std::uint64_t seed, double h,
                           int coords_per_group, double tol) {
  TrainConfig cfg = cfg_small;
  cfg.dropout = 0.0;
  cfg.validate();
  Rng rng(seed);
  const std::int32_t n_items = 3 * cfg.max_len + 4;
  SplitDataset split;
  split.n_items = n_items;
  std::uniform_int_distribution<ItemId> any_item(0, n_items - 1);
  for (int u = 0; u < 2; ++u) {
    SplitUser su;
    su.user = u;
    for (int t = 0; t < cfg.max_len + 2; ++t) su.history.push_back(any_item(rng));
    split.users.push_back(std::move(su));
  }
  std::vector<SemanticId> sids(static_cast<std::size_t>(n_items));
  std::uniform_int_distribution<int> any_code(0, cfg.K - 1);
  for (auto& s : sids) {
    for (int l = 0; l < cfg.L; ++l) s.push_back(any_code(rng));
  }
  H2RecModel<double> model(cfg.model_config(n_items), sids);
  model.init_parameters(rng);
  // Move every parameter off its structured init so no gradient is trivially zero.
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    auto& v = model.params()[i].value;
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] += jitter(rng);
  }
  model.params().get("hid.emb").value.row(n_items).setZero();

  BatchStream stream(split, BatchOptions{cfg.max_len, 2, cfg.n_neg}, seed + 1);
  const FlatBatch fb = flatten(*stream.next());
  const int mask_level = std::uniform_int_distribution<int>(0, cfg.L - 1)(rng);

  auto loss_of = [&](bool backward) {
    ad::Tape<double> tape;
    Rng pool_rng(seed + 2);
    auto sl = compute_losses(tape, model, fb, cfg, pool_rng, false, mask_level);
    ad::Var<double> v = sl.total;
    switch (term) {
      case LossTerm::kRec:
        v = sl.l_rec;
        break;
      case LossTerm::kCa:
        if (!sl.l_ca) throw Error("grad_check: l_ca is disabled in this config");
        v = *sl.l_ca;
        break;
      case LossTerm::kMsg:
        if (!sl.l_msg) throw Error("grad_check: l_msg is disabled in this config");
        v = *sl.l_msg;
        break;
      case LossTerm::kTotal:
        break;
    }
    if (backward) {
      model.params().zero_grad();
      tape.backward(v);
    }
    return v.scalar();
  };

  GradCheckReport rep;
  rep.term = term;
  rep.loss = loss_of(true);
  std::vector<MatD> analytic;
  for (std::size_t i = 0; i < model.params().size(); ++i) analytic.push_back(model.params()[i].grad);

  std::vector<std::string> group_names;
  std::map<std::string, std::vector<std::pair<std::size_t, Eigen::Index>>> all, nonzero;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const std::string g = param_group(model.params()[i].name);
    if (!all.count(g)) group_names.push_back(g);
    for (Eigen::Index k = 0; k < analytic[i].size(); ++k) {
      all[g].emplace_back(i, k);
      if (std::abs(analytic[i].data()[k]) > 1e-10) nonzero[g].emplace_back(i, k);
    }
  }
  rep.ok = true;
  for (const auto& g : group_names) {
    std::set<std::pair<std::size_t, Eigen::Index>> picked;
    auto& nz = nonzero[g];
    auto& every = all[g];
    const std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(coords_per_group), every.size());
    // Half of the probes land on coordinates the loss touches, the rest anywhere.
    std::shuffle(nz.begin(), nz.end(), rng);
    for (std::size_t i = 0; i < nz.size() && picked.size() < (want + 1) / 2; ++i) picked.insert(nz[i]);
    std::shuffle(every.begin(), every.end(), rng);
    for (std::size_t i = 0; i < every.size() && picked.size() < want; ++i) picked.insert(every[i]);

    GradCheckGroup gr;
    gr.name = g;
    for (const auto& [pi, k] : picked) {
      double& x = model.params()[pi].value.data()[k];
      const double x0 = x;
      x = x0 + h;
      const double lp = loss_of(false);
      x = x0 - h;
      const double lm = loss_of(false);
      x = x0;
      const double num = (lp - lm) / (2.0 * h);
      const double ana = analytic[pi].data()[k];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6});
      ++gr.coords;
      if (rel >= gr.max_rel) {
        gr.max_rel = rel;
        gr.worst = model.params()[pi].name + "[" + std::to_string(k) + "]";
      }
    }
    rep.max_rel = std::max(rep.max_rel, gr.max_rel);
    if (gr.max_rel > tol) rep.ok = false;
    rep.groups.push_back(gr);
  }
  return rep;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[4] = {'H', '2', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_tensor(std::ostream& os, const std::string& name, const MatF& m) {
  io::write_u32(os, static_cast<std::uint32_t>(name.size()));
  io::write_bytes(os, name);
  io::write_u32(os, 2);
  io::write_u32(os, static_cast<std::uint32_t>(m.rows()));
  io::write_u32(os, static_cast<std::uint32_t>(m.cols()));
  io::write_f32s(os, m.data(), static_cast<std::size_t>(m.size()));
}

std::pair<std::string, MatF> read_tensor(std::istream& is) {
  const auto len = io::read_u32(is);
  if (len > 4096) throw Error("checkpoint: implausible tensor name length");
  std::string name = io::read_bytes(is, len);
  const auto rank = io::read_u32(is);
  if (rank != 2) throw Error("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank) + ", expected 2");
  const auto r = io::read_u32(is), c = io::read_u32(is);
  MatF m(r, c);
  io::read_f32s(is, m.data(), static_cast<std::size_t>(m.size()));
  return {std::move(name), std::move(m)};
}

void write_section(std::ostream& os, const char* tag, const std::vector<std::pair<std::string, const MatF*>>& ts) {
  io::write_bytes(os, std::string_view(tag, 4));
  io::write_u32(os, static_cast<std::uint32_t>(ts.size()));
  for (const auto& [n, m] : ts) write_tensor(os, n, *m);
}

std::vector<std::pair<std::string, MatF>> read_section(std::istream& is) {
  const auto n = io::read_u32(is);
  std::vector<std::pair<std::string, MatF>> out;
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(read_tensor(is));
  return out;
}

nlohmann::ordered_json state_json(const TrainState& s) {
  nlohmann::ordered_json h = nlohmann::ordered_json::array();
  for (const auto& e : s.history) h.push_back(epoch_json(e));
  return {{"next_epoch", s.next_epoch}, {"step", s.step},           {"best_ndcg", s.best_ndcg},
          {"best_epoch", s.best_epoch}, {"bad_epochs", s.bad_epochs}, {"stopped", s.stopped},
          {"history", h}};
}

TrainState state_from_json(const nlohmann::json& j) {
  TrainState s;
  s.next_epoch = j.at("next_epoch").get<int>();
  s.step = j.at("step").get<std::int64_t>();
  s.best_ndcg = j.at("best_ndcg").get<double>();
  s.best_epoch = j.at("best_epoch").get<int>();
  s.bad_epochs = j.at("bad_epochs").get<int>();
  s.stopped = j.at("stopped").get<bool>();
  for (const auto& e : j.at("history")) {
    EpochLog el;
    el.epoch = e.at("epoch").get<int>();
    el.l_rec = e.at("l_rec").get<double>();
    el.l_ca = e.at("l_ca").get<double>();
    el.l_msg = e.at("l_msg").get<double>();
    el.total = e.at("total").get<double>();
    el.val_hit = e.at("val_hit_at_10").get<double>();
    el.val_ndcg = e.at("val_ndcg_at_10").get<double>();
    el.improved = e.at("improved").get<bool>();
    s.history.push_back(el);
  }
  return s;
}

void write_checkpoint(const std::filesystem::path& path, const H2RecModel<float>& model, const TrainConfig& cfg,
                      const Trainer* trainer, const nlohmann::json& meta) {
  auto os = io::open_out(path, true);
  io::write_bytes(os, std::string_view(kMagic, 4));
  io::write_u32(os, kVersion);
  const auto& ps = model.params();
  std::vector<std::pair<std::string, const MatF*>> ts;
  for (std::size_t i = 0; i < ps.size(); ++i) ts.emplace_back(ps[i].name, &ps[i].value);
  write_section(os, "PARM", ts);
  nlohmann::ordered_json j;
  j["config"] = cfg.to_json();
  j["config_hash"] = cfg.hash();
  j["n_items"] = model.config().n_items;
  if (trainer) {
    ts.clear();
    const auto& m = trainer->adam.first_moments();
    const auto& v = trainer->adam.second_moments();
    for (std::size_t i = 0; i < ps.size(); ++i) ts.emplace_back("m/" + ps[i].name, &m[i]);
    for (std::size_t i = 0; i < ps.size(); ++i) ts.emplace_back("v/" + ps[i].name, &v[i]);
    write_section(os, "ADAM", ts);
    if (!trainer->best_params.empty()) {
      ts.clear();
      for (std::size_t i = 0; i < ps.size(); ++i) ts.emplace_back("best/" + ps[i].name, &trainer->best_params[i]);
      write_section(os, "BEST", ts);
    }
    std::ostringstream rs;
    rs << trainer->rng;
    j["adam_steps"] = trainer->adam.steps();
    j["rng_state"] = rs.str();
    j["state"] = state_json(trainer->state);
  }
  j["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  const auto& sids = model.sids();
  io::write_bytes(os, "SIDS");
  io::write_u32(os, static_cast<std::uint32_t>(sids.size()));
  io::write_u32(os, static_cast<std::uint32_t>(model.config().levels));
  for (const auto& s : sids) {
    for (auto c : s) io::write_u32(os, static_cast<std::uint32_t>(c));
  }
  const std::string text = j.dump();
  io::write_bytes(os, "META");
  io::write_u32(os, static_cast<std::uint32_t>(text.size()));
  io::write_bytes(os, text);
  if (!os) throw Error("failed writing checkpoint " + path.string());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer, const nlohmann::json& meta) {
  write_checkpoint(path, trainer.model, trainer.cfg, &trainer, meta);
}

void save_model(const std::filesystem::path& path, const H2RecModel<float>& model, const TrainConfig& cfg,
                const nlohmann::json& meta) {
  write_checkpoint(path, model, cfg, nullptr, meta);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("checkpoint not found: " + path.string());
  auto is = io::open_in(path, true);
  const std::string src = path.string();
  Checkpoint ck;
  try {
    if (io::read_bytes(is, 4) != std::string_view(kMagic, 4)) throw Error("bad magic, expected H2CK");
    const auto version = io::read_u32(is);
    if (version != kVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
    bool have_meta = false;
    std::vector<std::pair<std::string, MatF>> adam;
    while (is.peek() != std::char_traits<char>::eof()) {
      const std::string tag = io::read_bytes(is, 4);
      if (tag == "PARM") {
        ck.params = read_section(is);
      } else if (tag == "ADAM") {
        adam = read_section(is);
      } else if (tag == "BEST") {
        for (auto& [n, m] : read_section(is)) ck.best_params.push_back(std::move(m));
      } else if (tag == "SIDS") {
        const auto n = io::read_u32(is), L = io::read_u32(is);
        ck.sids.assign(n, SemanticId(L));
        for (auto& s : ck.sids) {
          for (auto& c : s) c = static_cast<std::int32_t>(io::read_u32(is));
        }
      } else if (tag == "META") {
        const auto len = io::read_u32(is);
        const nlohmann::json j = nlohmann::json::parse(io::read_bytes(is, len));
        ck.config = TrainConfig::from_json(j.at("config"));
        ck.config_hash = j.at("config_hash").get<std::string>();
        ck.n_items = j.at("n_items").get<std::int32_t>();
        if (j.contains("state")) {
          ck.state = state_from_json(j.at("state"));
          ck.adam_steps = j.at("adam_steps").get<std::int64_t>();
          ck.rng_state = j.at("rng_state").get<std::string>();
        }
        ck.meta = j.value("meta", nlohmann::json::object());
        have_meta = true;
      } else {
        throw Error("unknown section '" + tag + "'");
      }
    }
    if (ck.params.empty() || !have_meta) throw Error("missing PARM or META section");
    if (!adam.empty()) {
      if (adam.size() != 2 * ck.params.size()) throw Error("ADAM section size mismatch");
      for (std::size_t i = 0; i < ck.params.size(); ++i) ck.adam_m.push_back(adam[i].second);
      for (std::size_t i = 0; i < ck.params.size(); ++i) ck.adam_v.push_back(adam[ck.params.size() + i].second);
    }
    if (ck.config.hash() != ck.config_hash) throw Error("stored config hash does not match its config");
  } catch (const nlohmann::json::exception& e) {
    throw Error(src + ": malformed checkpoint metadata: " + e.what());
  } catch (const Error& e) {
    throw Error(src + ": " + e.what());
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.config_hash != cfg.hash()) {
    throw Error(path.string() + ": config hash mismatch (checkpoint " + ck.config_hash + ", supplied " + cfg.hash() +
                ")");
  }
  return ck;
}

H2RecModel<float> model_from_checkpoint(const Checkpoint& ck) {
  const ModelConfig mc = ck.config.model_config(ck.n_items);
  H2RecModel<float> model(mc, ck.sids);
  auto& ps = model.params();
  if (ck.params.size() != ps.size()) throw Error("checkpoint parameter count does not match the model");
  for (const auto& [name, value] : ck.params) {
    auto* p = ps.find(name);
    if (!p) throw Error("checkpoint has unknown parameter '" + name + "'");
    if (p->value.rows() != value.rows() || p->value.cols() != value.cols()) {
      throw Error("checkpoint parameter '" + name + "' has the wrong shape");
    }
    p->value = value;
  }
  return model;
}

void resume(Trainer& trainer, const Checkpoint& ck) {
  if (ck.config_hash != trainer.cfg.hash()) throw Error("resume: config hash mismatch");
  if (ck.rng_state.empty()) throw Error("resume: checkpoint carries no training state");
  auto& ps = trainer.model.params();
  if (ck.params.size() != ps.size()) throw Error("resume: parameter count mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ck.params[i].first != ps[i].name) throw Error("resume: parameter order mismatch at " + ps[i].name);
    ps[i].value = ck.params[i].second;
  }
  trainer.adam.first_moments() = ck.adam_m;
  trainer.adam.second_moments() = ck.adam_v;
  trainer.adam.set_steps(ck.adam_steps);
  trainer.best_params = ck.best_params;
  trainer.state = ck.state;
  std::istringstream rs(ck.rng_state);
  rs >> trainer.rng;
  if (!rs) throw Error("resume: corrupt rng state");
}

}  // namespace h2rec
