#include "h2rec/io.hpp"
#include "h2rec/quantizer.hpp"
#include "h2rec/trainer.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

namespace h2rec {
namespace {

TEST(GradCheck, EveryTermAndGroupWithinTolerance) {
  for (LossTerm term : {LossTerm::kRec, LossTerm::kCa, LossTerm::kMsg, LossTerm::kTotal}) {
    const GradCheckReport r = grad_check(tiny_config(), term, 7);
    EXPECT_TRUE(r.ok) << to_string(term);
    EXPECT_LE(r.max_rel, 1e-3) << to_string(term);
    std::set<std::string> groups;
    for (const auto& g : r.groups) {
      groups.insert(g.name);
      EXPECT_GE(g.coords, g.name == "mask_token" ? 8 : 10) << g.name;  // d = 8 coordinates in total
      EXPECT_LE(g.max_rel, 1e-3) << to_string(term) << " " << g.name << " worst " << g.worst;
    }
    for (const char* g : {"E_hid", "E_C", "fusion", "cross_attention", "mask_token", "encoder_sid", "encoder_hid"}) {
      EXPECT_TRUE(groups.count(g)) << g;
    }
  }
}

TEST(GradCheck, OtherSeedsAndVariants) {
  TrainConfig c = tiny_config();
  c.alignment = "pairwise";
  EXPECT_TRUE(grad_check(c, LossTerm::kTotal, 8).ok);
  c = tiny_config();
  c.no_fn = true;
  c.no_mca = true;
  EXPECT_TRUE(grad_check(c, LossTerm::kTotal, 9).ok);
  c = tiny_config();
  c.no_ca = true;
  EXPECT_THROW(grad_check(c, LossTerm::kCa, 9), Error);
}

// Tiny split where every item has the same SID and each user has one sequence.
struct TinyWorld {
  TrainConfig cfg = tiny_config();
  SplitDataset split;
  std::vector<SemanticId> sids;

  explicit TinyWorld(int users) {
    split.n_items = 10;
    for (int u = 0; u < users; ++u) {
      SplitUser su;
      su.user = u;
      for (int t = 0; t < 7; ++t) su.history.push_back((3 * u + t) % 10);
      split.users.push_back(std::move(su));
    }
    sids.assign(10, SemanticId{1, 2});
  }

  FlatBatch batch(std::uint64_t seed) const {
    BatchStream stream(split, BatchOptions{cfg.max_len, static_cast<int>(split.users.size()), cfg.n_neg}, seed);
    return flatten(*stream.next());
  }
};

double max_abs_grad(const ParamStore<double>& ps) {
  double m = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i].grad.size()) m = std::max(m, ps[i].grad.cwiseAbs().maxCoeff());
  }
  return m;
}

TEST(GradCheck, ZeroLossTermsHaveZeroGradients) {
  // Identical SIDs put the whole pool in every anchor's positive set, and a
  // single sequence makes the MSG batch one user: both terms vanish.
  TinyWorld w(1);
  w.cfg.p = 2;
  H2RecModel<double> m(w.cfg.model_config(10), w.sids);
  Rng rng(1);
  m.init_parameters(rng);
  const FlatBatch fb = w.batch(2);
  for (int which = 0; which < 2; ++which) {
    ad::Tape<double> t;
    Rng pool(3);
    auto sl = compute_losses(t, m, fb, w.cfg, pool, false, 0);
    ad::Var<double> v = which == 0 ? *sl.l_ca : *sl.l_msg;
    EXPECT_NEAR(v.scalar(), 0.0, 1e-12);
    m.params().zero_grad();
    t.backward(v);
    EXPECT_LT(max_abs_grad(m.params()), 1e-12) << (which == 0 ? "l_ca" : "l_msg");
  }
}

TEST(GradCheck, PriorPerturbationMovesTheLoss) {
  TinyWorld w(2);
  w.sids = {{0, 1}, {0, 2}, {1, 3}, {2, 0}, {3, 1}, {0, 0}, {1, 1}, {2, 2}, {3, 3}, {1, 0}};
  H2RecModel<double> m(w.cfg.model_config(10), w.sids);
  Rng rng(4);
  m.init_parameters(rng);
  const FlatBatch fb = w.batch(5);
  auto loss = [&] {
    ad::Tape<double> t;
    Rng pool(6);
    return compute_losses(t, m, fb, w.cfg, pool, false, 1).total.scalar();
  };
  const double base = loss();
  m.params().get("fusion.b_prior").value(0, 0) += 1e-3;
  const double up = loss();
  EXPECT_GT(std::abs(up - base), 1e-9);
}

TEST(Config, GridAndStrictJson) {
  for (double v : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}) {
    TrainConfig c;
    c.beta = v;
    c.gamma = v;
    c.tau = v;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  }
  for (int p = 1; p <= 4; ++p) {
    TrainConfig c;
    c.p = p;
    EXPECT_NO_THROW(c.validate());
  }
  TrainConfig bad;
  bad.p = 5;
  EXPECT_THROW(bad.validate(), Error);
  bad = TrainConfig{};
  bad.beta = -0.1;
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json{{"betta", 0.5}}), Error);
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json{{"beta", "high"}}), Error);
  EXPECT_EQ(TrainConfig::from_json(nlohmann::json{{"beta", 0.7}}).beta, 0.7);
  TrainConfig a, b;
  b.gamma = 0.4;
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(a.hash(), TrainConfig{}.hash());
}

TEST(Init, CodebooksCopiedExactlyAtModelWidth) {
  Codebooks cb;
  cb.levels = 2;
  cb.size = 3;
  cb.dim = 4;
  Rng rng(1);
  std::normal_distribution<float> n(0.f, 1.f);
  for (int l = 0; l < 2; ++l) {
    MatF b(3, 4);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = n(rng);
    cb.books.push_back(b);
  }
  const auto same = project_codebooks(cb, 4);
  for (int l = 0; l < 2; ++l) EXPECT_TRUE(same[static_cast<std::size_t>(l)] == cb.books[static_cast<std::size_t>(l)]);
  const auto wide = project_codebooks(cb, 6);
  EXPECT_TRUE(wide[0].leftCols(4) == cb.books[0]);
  EXPECT_EQ(wide[0].rightCols(2).norm(), 0.0f);
  const auto narrow = project_codebooks(cb, 2);
  EXPECT_EQ(narrow[0].cols(), 2);
}

struct SmallWorld {
  SplitDataset split;
  SemanticMatrix semantic;
  PopularityPartition part;
  SidAssignment sids;
  Codebooks codebooks;
  TrainConfig cfg;

  SmallWorld() {
    SynthConfig sc;
    sc.n_users = 120;
    sc.n_items = 60;
    sc.n_clusters = 4;
    sc.d_sem = 8;
    sc.avg_len = 8;
    Rng rng(5);
    SyntheticData sd = synthesize_dataset(sc, rng);
    split = leave_one_out_split(sd.dataset);
    semantic = sd.semantic;
    part = popularity_partition(split);
    cfg.d = 8;
    cfg.L = 2;
    cfg.K = 4;
    cfg.p = 1;
    cfg.o = 1;
    cfg.max_len = 10;
    cfg.layers = 1;
    cfg.batch_size = 32;
    cfg.epochs = 3;
    cfg.patience = 100;
    cfg.pool_cap = 32;
    cfg.eval_negatives = 20;
    // The SID-level trainer only needs a consistent 2x4 quantizer here.
    codebooks = train_pq(semantic.values, 2, 4, 10, rng);
    Quantizer q;
    q.codebooks = codebooks;
    sids = assign_sids(q, semantic.values);
  }

  H2RecModel<float> model(std::uint64_t seed) const {
    Rng rng(seed);
    return init_model(split, semantic, sids, codebooks, cfg, rng);
  }
};

std::vector<std::string> csv_rows(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) rows.push_back(line);
  return rows;
}

TEST(Init, SameSeedSameParametersAndSemanticRows) {
  SmallWorld w;
  const H2RecModel<float> a = w.model(3), b = w.model(3), c = w.model(4);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    EXPECT_TRUE(a.params()[i].value == b.params()[i].value) << a.params()[i].name;
    any_diff |= !(a.params()[i].value == c.params()[i].value);
  }
  EXPECT_TRUE(any_diff);
  // HID rows are the reduced semantic rows up to one global scale.
  const ReducedMatrix red = reduce_dims(w.semantic, 8);
  const MatF& hid = a.params().get("hid.emb").value;
  EXPECT_EQ(hid.row(60).norm(), 0.0f);
  for (int i = 0; i < 60; i += 7) {
    const double cosv = hid.row(i).cast<double>().dot(red.values.row(i).cast<double>()) /
                        (hid.row(i).cast<double>().norm() * red.values.row(i).cast<double>().norm());
    EXPECT_NEAR(cosv, 1.0, 1e-5);
  }
}

TEST(Init, RandomHidInitIgnoresSemantics) {
  SmallWorld w;
  w.cfg.hid_init = "random";
  const H2RecModel<float> a = w.model(3);
  const ReducedMatrix red = reduce_dims(w.semantic, 8);
  EXPECT_GT((a.params().get("hid.emb").value.topRows(60) - red.values).norm(), 1e-3);
}

TEST(Init, MismatchedArtifactsAreErrors) {
  SmallWorld w;
  Rng rng(1);
  SidAssignment short_sids = w.sids;
  short_sids.codes.pop_back();
  EXPECT_THROW(init_model(w.split, w.semantic, short_sids, w.codebooks, w.cfg, rng), Error);
  TrainConfig wrong = w.cfg;
  wrong.K = 8;
  EXPECT_THROW(init_model(w.split, w.semantic, w.sids, w.codebooks, wrong, rng), Error);
  SemanticMatrix small{MatF(w.semantic.values.topRows(10))};
  EXPECT_THROW(init_model(w.split, small, w.sids, w.codebooks, w.cfg, rng), Error);
}

TEST(Training, StartsNearLn2AndImproves) {
  SmallWorld w;
  w.cfg.epochs = 2;
  w.cfg.no_ca = true;
  w.cfg.no_msg = true;
  H2RecModel<float> m = w.model(1);
  Trainer tr(m, w.split, w.part, w.cfg);
  double first = 0.0;
  TrainOptions opt;
  opt.first_loss = &first;
  const TrainState& st = tr.run(opt);
  EXPECT_NEAR(first, std::log(2.0), 0.1);
  ASSERT_EQ(st.history.size(), 2u);
  EXPECT_LT(st.history[0].l_rec, first);
  EXPECT_LT(st.history[1].total, first);
}

TEST(Training, FullObjectiveDecreasesAndIsDeterministic) {
  SmallWorld w;
  w.cfg.epochs = 6;
  w.cfg.lr = 5e-3;
  testing::TempDir dir;
  std::vector<std::vector<std::string>> logs;
  for (int run = 0; run < 2; ++run) {
    H2RecModel<float> m = w.model(1);
    Trainer tr(m, w.split, w.part, w.cfg);
    TrainOptions opt;
    opt.loss_csv = dir / ("l" + std::to_string(run) + ".csv");
    const TrainState& st = tr.run(opt);
    // Per-batch alignment pools and mask levels make single steps noisy; compare epoch means.
    EXPECT_LT(st.history.back().total, st.history.front().total);
    EXPECT_GT(st.history[0].l_ca, 0.0);
    EXPECT_GT(st.history[0].l_msg, 0.0);
    logs.push_back(csv_rows(*opt.loss_csv));
  }
  EXPECT_FALSE(logs[0].empty());
  EXPECT_EQ(logs[0], logs[1]);
}

TEST(Training, EarlyStoppingKeepsTheBestEpoch) {
  SmallWorld w;
  w.cfg.epochs = 6;
  w.cfg.patience = 1;
  w.cfg.lr = 0.05;
  H2RecModel<float> m = w.model(2);
  Trainer tr(m, w.split, w.part, w.cfg);
  const TrainState& st = tr.run();
  double best = -1.0;
  for (const auto& e : st.history) best = std::max(best, e.val_ndcg);
  EXPECT_EQ(st.best_ndcg, best);
  EXPECT_EQ(st.history[static_cast<std::size_t>(st.best_epoch)].val_ndcg, best);
  // The restored parameters reproduce the best validation score.
  EXPECT_NEAR(tr.validate().group("overall").ndcg, best, 1e-12);
}

TEST(Checkpoint, ResumeContinuesTheSameTrajectory) {
  SmallWorld w;
  testing::TempDir dir;
  std::vector<std::string> straight;
  {
    H2RecModel<float> m = w.model(1);
    Trainer tr(m, w.split, w.part, w.cfg);
    TrainOptions opt;
    opt.loss_csv = dir / "straight.csv";
    tr.run(opt);
    straight = csv_rows(dir / "straight.csv");
  }
  std::size_t first_part = 0;
  {
    H2RecModel<float> m = w.model(1);
    Trainer tr(m, w.split, w.part, w.cfg);
    TrainOptions opt;
    opt.loss_csv = dir / "part1.csv";
    opt.checkpoint = dir / "ck.h2ck";
    opt.max_epochs_this_run = 1;
    tr.run(opt);
    first_part = csv_rows(dir / "part1.csv").size();
  }
  std::vector<std::string> resumed;
  {
    const Checkpoint ck = load_checkpoint(dir / "ck.h2ck", w.cfg);
    EXPECT_EQ(ck.state.next_epoch, 1);
    H2RecModel<float> m = w.model(99);
    Trainer tr(m, w.split, w.part, w.cfg);
    resume(tr, ck);
    TrainOptions opt;
    opt.loss_csv = dir / "part2.csv";
    tr.run(opt);
    resumed = csv_rows(dir / "part2.csv");
  }
  ASSERT_EQ(first_part + resumed.size(), straight.size());
  for (std::size_t i = 0; i < resumed.size(); ++i) {
    std::stringstream a(straight[first_part + i]), b(resumed[i]);
    std::string fa, fb;
    while (std::getline(a, fa, ',') && std::getline(b, fb, ',')) {
      EXPECT_NEAR(std::stod(fa), std::stod(fb), 1e-6) << "row " << i;
    }
  }
}

TEST(Checkpoint, CorruptMagicAndHashMismatch) {
  SmallWorld w;
  w.cfg.epochs = 1;
  testing::TempDir dir;
  H2RecModel<float> m = w.model(1);
  Trainer tr(m, w.split, w.part, w.cfg);
  TrainOptions opt;
  opt.checkpoint = dir / "ck.h2ck";
  tr.run(opt);
  const Checkpoint ck = load_checkpoint(dir / "ck.h2ck");
  EXPECT_EQ(ck.config_hash, w.cfg.hash());
  EXPECT_EQ(ck.sids, w.sids.codes);
  const H2RecModel<float> back = model_from_checkpoint(ck);
  EXPECT_EQ(back.params().size(), m.params().size());

  TrainConfig other = w.cfg;
  other.beta = 0.9;
  try {
    load_checkpoint(dir / "ck.h2ck", other);
    FAIL() << "hash mismatch accepted";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("hash"), std::string::npos);
  }
  std::string bytes = testing::slurp(dir / "ck.h2ck");
  bytes[1] = 'X';
  testing::spit(dir / "bad.h2ck", bytes);
  EXPECT_THROW(load_checkpoint(dir / "bad.h2ck"), Error);
  testing::spit(dir / "cut.h2ck", testing::slurp(dir / "ck.h2ck").substr(0, 40));
  EXPECT_THROW(load_checkpoint(dir / "cut.h2ck"), Error);
}

TEST(Ablation, SwitchesHoldDuringTraining) {
  SmallWorld w;
  w.cfg.epochs = 1;
  w.cfg.no_fn = true;
  w.cfg.no_mca = true;
  H2RecModel<float> m = w.model(1);
  Trainer tr(m, w.split, w.part, w.cfg);
  tr.run();
  BatchStream stream(w.split, BatchOptions{w.cfg.max_len, 16, 1}, 3);
  const FlatBatch fb = flatten(*stream.next());
  ad::Tape<float> t;
  const ForwardOutput<float> out = m.forward(t, fb, {});
  EXPECT_TRUE(out.alpha.value() == MatF(MatF::Constant(16, 2, 0.5f)));
  EXPECT_TRUE(out.e_fused->value() == out.e_hid->value());
}

TEST(Ablation, HidOnlyNeverTouchesSidParameters) {
  SmallWorld w;
  w.cfg.epochs = 1;
  w.cfg.hid_only = true;
  w.cfg.no_ca = true;
  w.cfg.no_msg = true;
  H2RecModel<float> m = w.model(1);
  const MatF code_before = m.params().get("code.emb.0").value;
  const MatF enc_before = m.params().get("enc_sid.pos").value;
  Trainer tr(m, w.split, w.part, w.cfg);
  const TrainState& st = tr.run();
  EXPECT_EQ(st.history[0].l_ca, 0.0);
  EXPECT_EQ(st.history[0].l_msg, 0.0);
  EXPECT_TRUE(m.params().get("code.emb.0").value == code_before);
  EXPECT_TRUE(m.params().get("enc_sid.pos").value == enc_before);
}

}  // namespace
}  // namespace h2rec
