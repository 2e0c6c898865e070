// End-to-end acceptance harness: one PASS/FAIL line per criterion.
//
//   acceptance [--workdir DIR] [--only N[,N...]]
//
// Trained runs for the directional criteria are cached under
// DIR/runs/<variant>/seed<N> keyed by config hash, so a rerun only retrains
// what changed.

#include "h2rec/cli.hpp"
#include "h2rec/io.hpp"
#include "h2rec/losses.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace h2rec;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_text(p)); }

int failures = 0;

void verdict(int id, const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << " " << id << " " << name << ": " << detail << std::endl;
}

MatD gaussian(int r, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// ---------------------------------------------------------------- 1

void gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  bool ok = true;
  std::string where = "-";
  for (LossTerm term : {LossTerm::kRec, LossTerm::kCa, LossTerm::kMsg, LossTerm::kTotal}) {
    for (std::uint64_t seed : {1, 2, 3}) {
      const GradCheckReport r = grad_check(tiny_config(), term, seed);
      ok = ok && r.ok;
      for (const auto& g : r.groups) {
        if (g.max_rel > worst) {
          worst = g.max_rel;
          where = to_string(term) + "/" + g.name + " " + g.worst;
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  verdict(1, "gradient suite", ok && worst <= 1e-3 && secs < 60.0,
          "max rel err " + fmt("%.2e", worst) + " at " + where + " (tol 1e-3), " + fmt("%.1f", secs) + " s (< 60 s)");
}

// ---------------------------------------------------------------- 2

void loss_identities() {
  std::vector<std::string> bad;
  {
    // Zero fusion net and zero prior: s = 0 and alpha is uniform.
    ModelConfig mc;
    mc.n_items = 4;
    mc.d = 8;
    mc.levels = 4;
    mc.codebook_size = 2;
    H2RecModel<double> m(mc, std::vector<SemanticId>(4, SemanticId{0, 1, 0, 1}));
    ad::Tape<double> t;
    const auto alpha = m.fusion_weights(t, ad::constant(t, gaussian(3, 8, 1))).second.value();
    if ((alpha.array() - 0.25).abs().maxCoeff() > 1e-12) bad.push_back("uniform alpha");
  }
  {
    ad::Tape<double> t;
    const int n = 6;
    const std::vector<std::uint8_t> all(n * n, 1);
    const double l = code_guided_alignment_loss(ad::constant(t, gaussian(n, 8, 2)), ad::constant(t, gaussian(n, 8, 3)),
                                                all, 0.1)
                         .scalar();
    if (std::abs(l) > 1e-9) bad.push_back("L_CA full set = " + fmt("%.3g", l));
  }
  {
    ad::Tape<double> t;
    const double l =
        masked_granularity_loss(ad::constant(t, gaussian(1, 8, 4)), ad::constant(t, gaussian(1, 8, 5)), 0.1).scalar();
    if (std::abs(l) > 1e-12) bad.push_back("L_MSG N=1 = " + fmt("%.3g", l));
  }
  {
    ad::Tape<double> t;
    const double l = rec_loss(ad::constant(t, MatD(MatD::Constant(5, 1, 0.7))),
                              ad::constant(t, MatD(MatD::Constant(5, 3, 0.7))))
                         .scalar();
    if (std::abs(l - std::log(2.0)) > 1e-6) bad.push_back("L_rec equal scores = " + fmt("%.9f", l));
  }
  {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int i = 0; i < 100; ++i) {
      const double a = u(rng), b = u(rng), c = u(rng), beta = u(rng), gamma = u(rng);
      const LossReport r = total_loss(a, b, c, beta, gamma);
      if (r.total != a + beta * b + gamma * c) {
        bad.push_back("total not linear");
        break;
      }
      ad::Tape<double> t;
      auto va = ad::scalar_constant(t, a), vb = ad::scalar_constant(t, b), vc = ad::scalar_constant(t, c);
      if (std::abs(weighted_total(va, &vb, &vc, beta, gamma).scalar() - r.total) > 1e-12) {
        bad.push_back("weighted_total differs");
        break;
      }
    }
  }
  std::string detail = "uniform alpha, L_CA=0, L_MSG=0, L_rec=ln2 (1e-6), linear total";
  if (!bad.empty()) {
    detail = "violations:";
    for (const auto& b : bad) detail += " [" + b + "]";
  }
  verdict(2, "loss identities", bad.empty(), detail);
}

// ---------------------------------------------------------------- 3

void architecture() {
  ModelConfig mc;
  mc.n_items = 12;
  mc.d = 8;
  mc.levels = 3;
  mc.codebook_size = 4;
  mc.max_len = 8;
  mc.layers = 2;
  mc.dropout = 0.0;
  std::vector<SemanticId> sids;
  for (int i = 0; i < 12; ++i) sids.push_back({i % 4, (i / 4) % 4, (i * 7) % 4});
  auto build = [&] {
    H2RecModel<double> m(mc, sids);
    Rng rng(5);
    m.init_parameters(rng);
    return m;
  };
  H2RecModel<double> m = build();
  std::vector<std::string> bad;

  const std::vector<std::vector<ItemId>> seqs = {{0, 5, 9, 2, 7, 11, 3, 1}, {4, 4, 8}};
  std::vector<std::span<const ItemId>> spans(seqs.begin(), seqs.end());
  const FlatBatch fb = flatten(make_input_batch(spans, 8, 12));

  {
    H2RecModel<double> z = build();
    z.params().get("xattn.wv").value.setZero();
    ad::Tape<double> t;
    const auto out = z.forward(t, fb, {});
    if (!(out.e_fused->value() == out.e_hid->value())) bad.push_back("W^V=0 changes E^f");
  }
  {
    ad::Tape<double> t;
    const std::vector<int> items = {0, 1, 2, 3, 4};
    const auto gran = m.granularity_sequences(t, items);
    for (int l = 0; l < 3; ++l) {
      MatD a = MatD::Zero(5, 3);
      a.col(l).setOnes();
      if (!(H2RecModel<double>::fuse_sid_sequence(gran, ad::constant(t, a)).value() ==
            gran[static_cast<std::size_t>(l)].value())) {
        bad.push_back("one-hot alpha level " + std::to_string(l));
      }
    }
  }
  int probes = 0;
  {
    const FlatBatch one = flatten(make_input_batch(std::vector<std::span<const ItemId>>{spans[0]}, 8, 12));
    std::mt19937_64 prng(17);
    std::uniform_int_distribution<int> pos(0, 7);
    const MatD x = gaussian(8, 8, 6);
    for (int trial = 0; trial < 5; ++trial) {
      const int p = pos(prng);
      MatD y = x;
      y.row(p) += gaussian(1, 8, 50 + static_cast<std::uint64_t>(trial));
      bool ok = true;
      for (const char* enc : {"enc_sid", "enc_hid"}) {
        ad::Tape<double> t;
        const MatD a = m.encode_sequence(t, enc, ad::constant(t, x), one, {}).value();
        const MatD b = m.encode_sequence(t, enc, ad::constant(t, y), one, {}).value();
        for (int r = 0; r < p; ++r) ok = ok && a.row(r) == b.row(r);
        ok = ok && (a.row(p) - b.row(p)).norm() > 1e-9;
      }
      probes += ok;
    }
    if (probes != 5) bad.push_back("causality " + std::to_string(probes) + "/5");
  }
  std::string detail = "W^V=0 gives E^f == E^hid bitwise, one-hot alpha exact, causality " + std::to_string(probes) +
                       "/5 positions";
  if (!bad.empty()) {
    detail = "violations:";
    for (const auto& b : bad) detail += " [" + b + "]";
  }
  verdict(3, "architecture", bad.empty(), detail);
}

// ---------------------------------------------------------------- 4

double level1_purity(const SidAssignment& a, const std::vector<int>& cluster) {
  std::map<int, std::map<int, int>> by_code;
  for (std::size_t i = 0; i < a.codes.size(); ++i) ++by_code[a.codes[i][0]][cluster[i]];
  int majority = 0;
  for (const auto& [code, counts] : by_code) {
    int m = 0;
    for (const auto& [c, n] : counts) m = std::max(m, n);
    majority += m;
  }
  return static_cast<double>(majority) / static_cast<double>(a.codes.size());
}

void quantizer() {
  std::vector<std::string> bad;
  Rng rng(42);
  {
    // Residual quantization against books that contain the zero code.
    Codebooks cb;
    cb.mechanism = Mechanism::kRq;
    cb.levels = 4;
    cb.size = 16;
    cb.dim = 6;
    for (int l = 0; l < 4; ++l) {
      MatF b = gaussian(16, 6, 100 + static_cast<std::uint64_t>(l)).cast<float>() * std::pow(0.5f, static_cast<float>(l));
      b.row(0).setZero();
      cb.books.push_back(b);
    }
    const MatF x = gaussian(1000, 6, 7).cast<float>();
    int violations = 0;
    for (int i = 0; i < 1000; ++i) {
      std::vector<float> r(x.row(i).data(), x.row(i).data() + 6);
      MatF row = x.row(i);
      double prev = row.norm();
      for (int l = 0; l < 4; ++l) {
        Codebooks one = cb;
        one.levels = 1;
        one.books = {cb.books[static_cast<std::size_t>(l)]};
        r = quantize_residual(r, one).second;
        const double now = Eigen::Map<const Eigen::VectorXf>(r.data(), 6).norm();
        violations += now > prev + 1e-6;
        prev = now;
      }
    }
    if (violations) bad.push_back(std::to_string(violations) + " residual norm increases");
  }
  {
    // Brute-force collision and utilization on random assignments.
    std::mt19937_64 g(3);
    std::uniform_int_distribution<int> code(0, 3);
    for (int round = 0; round < 20; ++round) {
      SidAssignment a{Mechanism::kRq, 2, 4, {}};
      for (int i = 0; i < 12; ++i) a.codes.push_back({code(g), code(g)});
      std::set<SemanticId> distinct(a.codes.begin(), a.codes.end());
      int colliding = 0;
      for (std::size_t i = 0; i < a.codes.size(); ++i) {
        int same = 0;
        for (std::size_t j = 0; j < a.codes.size(); ++j) same += a.codes[i] == a.codes[j];
        colliding += same > 1;
      }
      const double coll_bf = static_cast<double>(colliding) / 12.0;
      const double util_bf = static_cast<double>(distinct.size()) / 16.0;  // K^L tuples
      if (std::abs(collision_rate(a) - coll_bf) > 1e-12 || std::abs(utilization_rate(a) - util_bf) > 1e-12 ||
          distinct_tuples(a) != distinct.size()) {
        bad.push_back("code stats differ from brute force");
        break;
      }
    }
  }
  {
    const MatF x = gaussian(30, 5, 8).cast<float>();
    const MatF all = kmeans(x, 30, 25, rng);
    double worst = 0.0;
    for (int i = 0; i < 30; ++i) worst = std::max(worst, static_cast<double>((all.row(nearest_code(x.row(i).data(), all)) - x.row(i)).norm()));
    const MatF one = kmeans(x, 1, 25, rng);
    const double mean_err = (one.row(0) - x.colwise().mean()).cwiseAbs().maxCoeff();
    if (worst > 1e-6) bad.push_back("k-means K=M error " + fmt("%.2e", worst));
    if (mean_err > 1e-6) bad.push_back("k-means K=1 error " + fmt("%.2e", mean_err));
  }
  double purity = 0.0;
  {
    SynthConfig sc;
    sc.n_users = 20;
    sc.noise = 0.0;
    Rng srng(42);
    const SyntheticData sd = synthesize_dataset(sc, srng);
    QuantizerOptions qo;
    qo.levels = 3;
    qo.size = 32;
    qo.rq.epochs = 50;
    const QuantizerResult q = build_quantizer(sd.semantic, qo);
    purity = level1_purity(q.sids, sd.cluster);
    if (purity < 0.95) bad.push_back("level-1 purity " + fmt("%.3f", purity));
  }
  std::string detail = "residual norms non-increasing on 1000 inputs, stats match brute force, k-means closed forms, "
                       "purity " + fmt("%.3f", purity) + " (K=32)";
  if (!bad.empty()) {
    detail = "violations:";
    for (const auto& b : bad) detail += " [" + b + "]";
  }
  verdict(4, "quantizer", bad.empty(), detail);
}

// ---------------------------------------------------------------- 5 and 6

struct Seesaw {
  fs::path dir;
  std::optional<PreparedData> data;
  std::optional<QuantizerResult> quant;
  double setup_seconds = 0.0;
  std::map<std::string, std::vector<MetricsReport>> reports;
  std::map<std::string, double> train_seconds;

  void setup() {
    if (data) return;
    const auto t0 = Clock::now();
    Rng rng(42);
    SyntheticData sd = synthesize_dataset(SynthConfig{}, rng);
    data = prepare_in_memory(std::move(sd.dataset), std::move(sd.semantic));
    QuantizerOptions qo;
    qo.seed = 42;
    quant = build_quantizer(*data->semantic, qo);
    setup_seconds = seconds_since(t0);
  }

  const std::vector<MetricsReport>& runs(const std::string& variant) {
    auto it = reports.find(variant);
    if (it != reports.end()) return it->second;
    std::vector<MetricsReport> out;
    double secs = 0.0;
    for (std::uint64_t seed : {42, 43, 44}) {
      TrainConfig cfg;
      cfg.seed = seed;
      cfg = apply_variant(cfg, variant);
      const fs::path run_dir = dir / "runs" / variant / ("seed" + std::to_string(seed));
      const fs::path manifest = run_dir / "manifest.json";
      if (fs::exists(manifest) && read_json(manifest).value("config_hash", "") == cfg.hash() &&
          fs::exists(run_dir / "train_seconds.txt")) {
        out.push_back(MetricsReport::from_json(read_json(run_dir / "metrics.json")));
        std::ifstream(run_dir / "train_seconds.txt") >> secs;
        train_seconds[variant] += secs;
        continue;
      }
      setup();
      fs::remove_all(run_dir);
      const auto t0 = Clock::now();
      out.push_back(train_and_evaluate(*data, quant->sids, quant->quantizer.codebooks, cfg, run_dir).test);
      secs = seconds_since(t0);
      std::ofstream(run_dir / "train_seconds.txt") << secs << '\n';
      train_seconds[variant] += secs;
      std::cerr << "  trained " << variant << " seed " << seed << " in " << fmt("%.0f", secs) << " s" << std::endl;
    }
    return reports[variant] = std::move(out);
  }

  double mean(const std::string& variant, const std::string& group, bool ndcg) {
    double s = 0.0;
    const auto& rs = runs(variant);
    for (const auto& r : rs) s += ndcg ? r.group(group).ndcg : r.group(group).hit;
    return s / static_cast<double>(rs.size());
  }
};

void seesaw(Seesaw& s) {
  const double full_h = s.mean("full", "head", false), full_t = s.mean("full", "tail", false);
  const double hid_h = s.mean("hid_only", "head", false), hid_t = s.mean("hid_only", "tail", false);
  const double sid_h = s.mean("sid_only", "head", false), sid_t = s.mean("sid_only", "tail", false);
  const double full_n = s.mean("full", "overall", true), hid_n = s.mean("hid_only", "overall", true),
               sid_n = s.mean("sid_only", "overall", true);
  // Seed 42 alone for (a) and (b), the three-seed mean for (c).
  const MetricsReport& hid42 = s.runs("hid_only")[0];
  const MetricsReport& sid42 = s.runs("sid_only")[0];
  const bool a = hid42.group("head").hit > sid42.group("head").hit;
  const bool b = sid42.group("tail").hit > hid42.group("tail").hit;
  const bool c = full_h >= std::max(hid_h, sid_h) - 0.01 && full_t >= std::max(hid_t, sid_t) - 0.01 &&
                 full_n > hid_n && full_n > sid_n;
  double secs = s.setup_seconds;
  for (const char* v : {"full", "hid_only", "sid_only"}) secs += s.train_seconds[v];
  const bool in_time = secs <= 15 * 60;
  std::ostringstream d;
  d << "(a) seed42 head H@10 hid " << fmt("%.4f", hid42.group("head").hit) << " vs sid "
    << fmt("%.4f", sid42.group("head").hit) << (a ? " ok" : " NO") << "; (b) seed42 tail H@10 sid "
    << fmt("%.4f", sid42.group("tail").hit) << " vs hid " << fmt("%.4f", hid42.group("tail").hit) << (b ? " ok" : " NO")
    << "; (c) 3-seed head H@10 full/hid/sid " << fmt("%.4f", full_h) << "/" << fmt("%.4f", hid_h) << "/"
    << fmt("%.4f", sid_h) << ", tail " << fmt("%.4f", full_t) << "/" << fmt("%.4f", hid_t) << "/" << fmt("%.4f", sid_t)
    << ", overall N@10 " << fmt("%.4f", full_n) << "/" << fmt("%.4f", hid_n) << "/" << fmt("%.4f", sid_n)
    << (c ? " ok" : " NO") << "; wall " << fmt("%.0f", secs) << " s" << (in_time ? " ok" : " (> 900 s)");
  verdict(5, "seesaw", a && b && c && in_time, d.str());
}

void component_ablations(Seesaw& s) {
  const double full_tail = s.mean("full", "tail", true), full_head = s.mean("full", "head", true);
  const double no_ca_tail = s.mean("no_ca", "tail", true), no_mca_head = s.mean("no_mca", "head", true);
  const double d_ca = full_tail - no_ca_tail, d_mca = full_head - no_mca_head;
  const bool ok = d_ca > 0.005 && d_mca > 0.005;
  verdict(6, "component ablations", ok,
          "tail N@10 drop without L_CA " + fmt("%+.4f", d_ca) + " (need > 0.005), head N@10 drop without MCA " +
              fmt("%+.4f", d_mca) + " (need > 0.005), 3-seed means");
}

// ---------------------------------------------------------------- 7

void random_and_oracle() {
  SynthConfig sc;
  sc.n_users = 3000;
  Rng rng(42);
  const SyntheticData sd = synthesize_dataset(sc, rng);
  const PreparedData data = prepare_in_memory(sd.dataset, sd.semantic);
  auto gen = std::make_shared<std::mt19937_64>(7);
  Scorer random = [gen](std::span<const std::span<const ItemId>>, const std::vector<std::vector<ItemId>>& cands) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::vector<double>> out;
    for (const auto& c : cands) {
      std::vector<double> s(c.size());
      for (auto& x : s) x = u(*gen);
      out.push_back(std::move(s));
    }
    return out;
  };
  Scorer oracle = [](std::span<const std::span<const ItemId>>, const std::vector<std::vector<ItemId>>& cands) {
    std::vector<std::vector<double>> out;
    for (const auto& c : cands) {
      std::vector<double> s(c.size(), 0.0);
      s[0] = 1.0;  // the held-out item leads every candidate list
      out.push_back(std::move(s));
    }
    return out;
  };
  EvalOptions eo;
  eo.seed = 42;
  const MetricsReport r = evaluate(data.split, data.partition, random, eo);
  const MetricsReport o = evaluate(data.split, data.partition, oracle, eo);
  const auto& g = r.group("overall");
  const bool ok = g.n >= 2000 && std::abs(g.hit - 0.1) <= 0.02 && std::abs(g.ndcg - 0.0454) <= 0.01 &&
                  o.group("overall").hit == 1.0 && o.group("overall").ndcg == 1.0;
  verdict(7, "random and oracle scorers", ok,
          "random H@10 " + fmt("%.4f", g.hit) + " (0.1 +- 0.02), N@10 " + fmt("%.4f", g.ndcg) + " (0.0454 +- 0.01) over " +
              std::to_string(g.n) + " users; oracle H@10 " + fmt("%.4f", o.group("overall").hit) + " N@10 " +
              fmt("%.4f", o.group("overall").ndcg));
}

// ---------------------------------------------------------------- 8

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "h2rec");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

void determinism(const fs::path& work) {
  std::string diff;
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream(root / "synth.json") << R"({"n_users": 300, "n_items": 300, "d_sem": 32})";
    std::ofstream(root / "train.json")
        << R"({"epochs": 3, "d": 16, "L": 3, "K": 16, "max_len": 20, "layers": 1, "batch_size": 128})";
  }
  for (const char* name : {"a", "b"}) {
    const fs::path d = root / name;
    const bool ok =
        cli({"synth", "--config", (root / "synth.json").string(), "--out", (d / "data").string(), "--seed", "42"}) == 0 &&
        cli({"train-quantizer", "--emb", (d / "data" / "semantic.semb").string(), "--L", "3", "--K", "16",
             "--epochs", "20", "--out", (d / "q").string()}) == 0 &&
        cli({"train", "--config", (root / "train.json").string(), "--data", (d / "data").string(), "--sids",
             (d / "q" / "sids.tsv").string(), "--out", (d / "run").string(), "--seed", "42"}) == 0 &&
        cli({"report", "--runs", (d / "run").string(), "--out", (d / "report").string()}) == 0;
    if (!ok) diff = "pipeline failed";
  }
  int compared = 0;
  if (diff.empty()) {
    for (const char* f : {"report/report.json", "report/report.csv", "run/metrics.json", "run/metrics.csv",
                          "run/losses.csv", "run/epochs.json", "run/model.h2ck", "q/sids.tsv", "q/quantizer.scbk",
                          "data/interactions.tsv", "data/semantic.semb"}) {
      ++compared;
      if (read_text(root / "a" / f) != read_text(root / "b" / f)) diff += std::string(" ") + f;
    }
  }
  verdict(8, "determinism", diff.empty(),
          diff.empty() ? std::to_string(compared) + " artifacts byte-identical across two seed-42 pipelines"
                       : "differs:" + diff);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  fs::path work = fs::temp_directory_path() / "h2rec_acceptance";
  std::string only;
  app.add_option("--workdir", work, "cache and scratch directory");
  app.add_option("--only", only, "comma-separated criterion numbers");
  CLI11_PARSE(app, argc, argv);

  std::set<int> pick;
  for (auto part : io::split(only, ',')) {
    if (!part.empty()) pick.insert(std::stoi(std::string(part)));
  }
  auto want = [&](int id) { return pick.empty() || pick.count(id) > 0; };
  try {
    fs::create_directories(work);
    Seesaw s;
    s.dir = work;
    if (want(1)) gradients();
    if (want(2)) loss_identities();
    if (want(3)) architecture();
    if (want(4)) quantizer();
    if (want(5)) seesaw(s);
    if (want(6)) component_ablations(s);
    if (want(7)) random_and_oracle();
    if (want(8)) determinism(work);
  } catch (const std::exception& e) {
    std::cout << "FAIL harness: " << e.what() << std::endl;
    return 2;
  }
  return failures == 0 ? 0 : 1;
}
