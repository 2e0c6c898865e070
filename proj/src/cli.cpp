#include "h2rec/cli.hpp"

#include "h2rec/io.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

namespace h2rec {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- synth config

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error("synth config must be a JSON object");
  SynthConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    auto as_int = [&](int& out) {
      if (!v.is_number_integer()) throw Error("synth config key '" + k + "' must be an integer");
      out = v.get<int>();
    };
    auto as_double = [&](double& out) {
      if (!v.is_number()) throw Error("synth config key '" + k + "' must be a number");
      out = v.get<double>();
    };
    if (k == "n_users") as_int(c.n_users);
    else if (k == "n_items") as_int(c.n_items);
    else if (k == "zipf_s") as_double(c.zipf_s);
    else if (k == "n_clusters") as_int(c.n_clusters);
    else if (k == "avg_len") as_double(c.avg_len);
    else if (k == "d_sem") as_int(c.d_sem);
    else if (k == "noise") as_double(c.noise);
    else if (k == "stay_prob") as_double(c.stay_prob);
    else if (k == "max_seq_len") as_int(c.max_seq_len);
    else throw Error("unknown synth config key '" + k + "'");
  }
  return c;
}

nlohmann::ordered_json synth_config_to_json(const SynthConfig& c) {
  return {{"n_users", c.n_users},       {"n_items", c.n_items}, {"zipf_s", c.zipf_s},
          {"n_clusters", c.n_clusters}, {"avg_len", c.avg_len}, {"d_sem", c.d_sem},
          {"noise", c.noise},           {"stay_prob", c.stay_prob}, {"max_seq_len", c.max_seq_len}};
}

// ---------------------------------------------------------------- data dirs

namespace {

nlohmann::json read_json(const fs::path& p) {
  auto is = io::open_in(p);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error(p.string() + ": invalid JSON: " + e.what());
  }
}

void write_json(const fs::path& p, const nlohmann::ordered_json& j) {
  auto os = io::open_out(p);
  os << j.dump(2) << '\n';
}

void write_text(const fs::path& p, const std::string& s) {
  auto os = io::open_out(p);
  os << s;
}

/// Reindexes a freshly loaded dataset so item ids equal the integers written
/// in the file (the file already holds dense ids).
Dataset restore_dense_ids(Dataset ds, std::int32_t n_items, const std::string& src) {
  std::vector<ItemId> to_file(ds.item_raw_ids.size());
  for (std::size_t i = 0; i < ds.item_raw_ids.size(); ++i) {
    const auto v = io::parse_int(ds.item_raw_ids[i]);
    if (v < 0 || v >= n_items) throw Error(src + ": item id " + std::to_string(v) + " outside the catalog");
    to_file[i] = static_cast<ItemId>(v);
  }
  for (auto& u : ds.users) {
    for (auto& it : u.items) it = to_file[static_cast<std::size_t>(it)];
  }
  ds.n_items = n_items;
  ds.item_raw_ids.resize(static_cast<std::size_t>(n_items));
  for (std::int32_t i = 0; i < n_items; ++i) ds.item_raw_ids[static_cast<std::size_t>(i)] = std::to_string(i);
  return ds;
}

void write_popularity(const PopularityPartition& part, const fs::path& p) {
  auto os = io::open_out(p);
  os << "item,count,head,bucket\n";
  for (std::size_t i = 0; i < part.counts.size(); ++i) {
    os << i << ',' << part.counts[i] << ',' << static_cast<int>(part.is_head[i]) << ',' << part.bucket[i] + 1 << '\n';
  }
}

}  // namespace

PreparedData prepare_in_memory(Dataset ds, std::optional<SemanticMatrix> semantic) {
  PreparedData d;
  d.split = leave_one_out_split(ds);
  d.partition = popularity_partition(d.split);
  d.dataset = std::move(ds);
  if (semantic && semantic->count() != d.dataset.n_items) {
    throw Error("semantic matrix has " + std::to_string(semantic->count()) + " rows but the catalog has " +
                std::to_string(d.dataset.n_items) + " items");
  }
  d.semantic = std::move(semantic);
  return d;
}

PreparedData load_data_dir(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.json";
  if (!fs::exists(manifest)) throw Error("not a data directory (no manifest.json): " + dir.string());
  const auto m = read_json(manifest);
  if (!m.contains("n_items")) throw Error(manifest.string() + ": missing n_items");
  const auto n_items = m.at("n_items").get<std::int32_t>();
  const fs::path inter = dir / "interactions.tsv";
  Dataset ds = restore_dense_ids(load_interactions(inter, 3), n_items, inter.string());
  std::optional<SemanticMatrix> sem;
  if (fs::exists(dir / "semantic.semb")) sem = load_semantic_matrix(dir / "semantic.semb", n_items);
  return prepare_in_memory(std::move(ds), std::move(sem));
}

void write_manifest(const fs::path& dir, const std::string& command, const nlohmann::ordered_json& extra,
                    const std::vector<fs::path>& artifacts) {
  nlohmann::ordered_json j;
  j["command"] = command;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  nlohmann::ordered_json a = nlohmann::ordered_json::object();
  for (const auto& p : artifacts) a[p.lexically_relative(dir).generic_string()] = io::file_checksum(p);
  j["artifacts"] = a;
  write_json(dir / "manifest.json", j);
}

// ---------------------------------------------------------------- quantizer

QuantizerResult build_quantizer(const SemanticMatrix& semantic, const QuantizerOptions& opt) {
  if (opt.levels < 1 || opt.size < 1) throw Error("quantizer: L and K must be positive");
  Rng rng(opt.seed);
  QuantizerResult r;
  switch (opt.mechanism) {
    case Mechanism::kVq:
      if (opt.levels != 1) throw Error("vq uses a single codebook; pass --L 1");
      r.quantizer.codebooks = train_vq(semantic.values, opt.size, opt.kmeans_iters, rng);
      break;
    case Mechanism::kPq:
      r.quantizer.codebooks = train_pq(semantic.values, opt.levels, opt.size, opt.kmeans_iters, rng);
      break;
    case Mechanism::kRq: {
      RqVaeConfig rc = opt.rq;
      rc.kmeans_iters = opt.kmeans_iters;
      r.quantizer.rqvae = train_rqvae(semantic.values, opt.levels, opt.size, rc, rng, &r.log);
      r.quantizer.codebooks = r.quantizer.rqvae->codebooks();
      break;
    }
  }
  r.sids = assign_sids(r.quantizer, semantic.values);
  r.stats = {{"mechanism", to_string(opt.mechanism)},
             {"L", opt.levels},
             {"K", opt.size},
             {"items", r.sids.codes.size()},
             {"distinct_tuples", distinct_tuples(r.sids)},
             {"collision_rate", collision_rate(r.sids)},
             {"utilization_rate", utilization_rate(r.sids)},
             {"item_utilization_rate", item_utilization_rate(r.sids)}};
  if (!r.log.epochs.empty()) {
    const RqLoss& last = r.log.epochs.back();
    r.stats["final_loss"] = {{"recon", last.recon}, {"codebook", last.codebook}, {"commit", last.commit},
                             {"total", last.total}};
  }
  return r;
}

// ---------------------------------------------------------------- training runs

TrainConfig apply_variant(TrainConfig cfg, const std::string& variant) {
  if (variant == "full") {
  } else if (variant == "no_fn") {
    cfg.no_fn = true;
  } else if (variant == "no_ca") {
    cfg.no_ca = true;
  } else if (variant == "no_mca") {
    cfg.no_mca = true;
  } else if (variant == "no_msg") {
    cfg.no_msg = true;
  } else if (variant == "hid_only") {
    // Plain ID baseline: no semantic signal anywhere, including the init.
    cfg.hid_only = true;
    cfg.no_ca = true;
    cfg.no_msg = true;
    cfg.hid_init = "random";
  } else if (variant == "sid_only") {
    cfg.sid_only = true;
    cfg.no_ca = true;
  } else {
    throw Error("unknown ablation variant '" + variant + "'");
  }
  cfg.validate();
  return cfg;
}

namespace {

RunResult train_impl(const PreparedData& data, const SidAssignment& sids, const Codebooks& codebooks,
                     const TrainConfig& cfg, const std::optional<fs::path>& out_dir, bool resume_run,
                     std::ostream* progress) {
  Rng init_rng(cfg.seed);
  static const SemanticMatrix kEmpty;
  const SemanticMatrix& sem = data.semantic ? *data.semantic : kEmpty;
  if (cfg.hid_init == "semantic" && !data.semantic) throw Error("hid_init=semantic needs semantic.semb in the data dir");
  H2RecModel<float> model = init_model(data.split, sem, sids, codebooks, cfg, init_rng);
  Trainer trainer(model, data.split, data.partition, cfg);
  TrainOptions opt;
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_json(*out_dir / "config.json", cfg.to_json());
    opt.loss_csv = *out_dir / "losses.csv";
    opt.checkpoint = *out_dir / "checkpoint.h2ck";
    opt.epoch_json = *out_dir / "epochs.json";
    if (resume_run && fs::exists(*opt.checkpoint)) resume(trainer, load_checkpoint(*opt.checkpoint, cfg));
  }
  if (progress) {
    opt.on_epoch = [progress](const EpochLog& e) {
      *progress << "epoch " << e.epoch << " loss " << std::fixed << std::setprecision(4) << e.total << " val N@10 "
                << e.val_ndcg << (e.improved ? " *" : "") << '\n'
                << std::defaultfloat;
    };
  }
  RunResult rr;
  rr.state = trainer.run(opt);
  EvalOptions eo;
  eo.n_negatives = cfg.eval_negatives;
  eo.seed = cfg.seed;
  rr.test = evaluate(data.split, data.partition, model_scorer(model), eo);
  if (out_dir) {
    save_model(*out_dir / "model.h2ck", model, cfg);
    write_report(rr.test, *out_dir / "metrics.json", *out_dir / "metrics.csv");
    write_manifest(*out_dir, "train",
                   {{"config_hash", cfg.hash()}, {"seed", cfg.seed}, {"best_epoch", rr.state.best_epoch}},
                   {*out_dir / "config.json", *out_dir / "losses.csv", *out_dir / "epochs.json",
                    *out_dir / "model.h2ck", *out_dir / "metrics.json", *out_dir / "metrics.csv"});
  }
  return rr;
}

}  // namespace

RunResult train_and_evaluate(const PreparedData& data, const SidAssignment& sids, const Codebooks& codebooks,
                             const TrainConfig& cfg, const std::optional<fs::path>& out_dir) {
  return train_impl(data, sids, codebooks, cfg, out_dir, false, nullptr);
}

// ---------------------------------------------------------------- command line

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto part : io::split(s, ',')) {
    std::string t(part);
    t.erase(0, t.find_first_not_of(' '));
    t.erase(t.find_last_not_of(' ') + 1);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

/// One CLI option per TrainConfig field, merged over a config file.
struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, bool> flags;
  std::optional<fs::path> file;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "flat JSON TrainConfig")->check(CLI::ExistingFile);
    const auto defaults = TrainConfig{}.to_json();
    for (auto it = defaults.begin(); it != defaults.end(); ++it) {
      const std::string& key = it.key();
      if (it.value().is_boolean()) {
        app->add_flag("--" + key, flags[key], "set " + key);
      } else {
        app->add_option("--" + key, values[key], "override " + key);
      }
    }
  }

  TrainConfig resolve(std::optional<std::uint64_t> seed_override) const {
    nlohmann::json j = nlohmann::json::object();
    if (file) {
      j = read_json(*file);
      if (!j.is_object()) throw Error(file->string() + ": config must be a JSON object");
      try {
        TrainConfig::from_json(j);
      } catch (const Error& e) {
        throw Error(file->string() + ": " + e.what());
      }
    }
    if (const char* env = std::getenv("H2REC_SEED")) j["seed"] = static_cast<std::uint64_t>(io::parse_int(env));
    const auto defaults = TrainConfig{}.to_json();
    for (const auto& [key, v] : values) {
      if (v.empty()) continue;
      const auto& def = defaults.at(key);
      try {
        if (def.is_string()) {
          j[key] = v;
        } else if (def.is_number_integer()) {
          j[key] = io::parse_int(v);
        } else {
          std::size_t used = 0;
          const double x = std::stod(v, &used);
          if (used != v.size()) throw std::invalid_argument(v);
          j[key] = x;
        }
      } catch (const std::exception&) {
        throw Error("--" + key + ": cannot parse '" + v + "'");
      }
    }
    for (const auto& [key, on] : flags) {
      if (on) j[key] = true;
    }
    if (seed_override) j["seed"] = *seed_override;
    return TrainConfig::from_json(j);
  }
};

struct SidArtifacts {
  SidAssignment sids;
  Codebooks codebooks;
};

SidArtifacts load_sid_artifacts(const fs::path& sids_path, const std::optional<fs::path>& quantizer_path) {
  SidArtifacts a;
  a.sids = load_sids(sids_path);
  const fs::path q = quantizer_path ? *quantizer_path : sids_path.parent_path() / "quantizer.scbk";
  a.codebooks = load_quantizer(q).codebooks;
  if (a.codebooks.levels != a.sids.levels || a.codebooks.size != a.sids.codebook_size) {
    throw Error(q.string() + ": codebooks do not match the SID file's L/K");
  }
  return a;
}

void print_table(std::ostream& out, const std::string& title, const Breakdown& b) {
  out << title << '\n' << format_table(b);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-branch sequential recommender with semantic IDs"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "ingest a TSV interaction log into a data directory");
  fs::path p_inter, p_out;
  std::optional<fs::path> p_emb;
  int p_min_len = 3;
  prepare->add_option("--interactions", p_inter, "user<TAB>item<TAB>timestamp lines")->required();
  prepare->add_option("--out", p_out, "output data directory")->required();
  prepare->add_option("--emb", p_emb, "SEMB matrix indexed by integer raw item id");
  prepare->add_option("--min-len", p_min_len, "drop users with fewer interactions");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic long-tail dataset");
  std::optional<fs::path> s_cfg;
  fs::path s_out;
  std::uint64_t s_seed = 42;
  synth->add_option("--config", s_cfg, "synthetic generator JSON")->check(CLI::ExistingFile);
  synth->add_option("--out", s_out, "output data directory")->required();
  synth->add_option("--seed", s_seed, "generator seed");

  // train-quantizer
  auto* tq = app.add_subcommand("train-quantizer", "learn codebooks and assign semantic IDs");
  fs::path q_emb, q_out;
  std::string q_mech = "rq";
  QuantizerOptions q_opt;
  tq->add_option("--emb", q_emb, "SEMB semantic matrix")->required()->check(CLI::ExistingFile);
  tq->add_option("--mech", q_mech, "vq | pq | rq");
  tq->add_option("--L", q_opt.levels, "code levels");
  tq->add_option("--K", q_opt.size, "codebook size");
  tq->add_option("--out", q_out, "output directory")->required();
  tq->add_option("--d-code", q_opt.rq.d_code, "RQ-VAE latent width");
  tq->add_option("--hidden", q_opt.rq.hidden, "RQ-VAE hidden width");
  tq->add_option("--epochs", q_opt.rq.epochs, "RQ-VAE epochs");
  tq->add_option("--lr", q_opt.rq.lr, "RQ-VAE learning rate");
  tq->add_option("--batch-size", q_opt.rq.batch_size, "RQ-VAE batch size");
  tq->add_option("--commit-beta", q_opt.rq.beta, "commitment weight");
  tq->add_option("--kmeans-iters", q_opt.kmeans_iters, "Lloyd iterations");
  tq->add_option("--seed", q_opt.seed, "seed");

  // assign-sids
  auto* as = app.add_subcommand("assign-sids", "assign semantic IDs with a trained quantizer");
  fs::path a_q, a_emb, a_out;
  as->add_option("--quantizer", a_q, "quantizer.scbk")->required()->check(CLI::ExistingFile);
  as->add_option("--emb", a_emb, "SEMB semantic matrix")->required()->check(CLI::ExistingFile);
  as->add_option("--out", a_out, "SID TSV output")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model and evaluate it on the test split");
  ConfigFlags t_flags;
  fs::path t_data, t_sids, t_out;
  std::optional<fs::path> t_quant;
  bool t_resume = false;
  t_flags.attach(tr);
  tr->add_option("--data", t_data, "data directory")->required();
  tr->add_option("--sids", t_sids, "SID TSV")->required();
  tr->add_option("--quantizer", t_quant, "quantizer.scbk (default: next to --sids)");
  tr->add_option("--out", t_out, "run directory")->required();
  tr->add_flag("--resume", t_resume, "continue from <out>/checkpoint.h2ck");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "evaluate a trained model");
  fs::path e_ckpt;
  std::optional<fs::path> e_data, e_out;
  int e_neg = 99;
  std::optional<std::uint64_t> e_seed;
  bool e_full = false, e_valid = false;
  ev->add_option("--ckpt", e_ckpt, "model.h2ck")->required();
  ev->add_option("--data", e_data, "data directory (default: recorded in the run manifest)");
  ev->add_option("--negatives", e_neg, "sampled negatives per user");
  ev->add_flag("--full-catalog", e_full, "rank against every item outside the history");
  ev->add_flag("--validation", e_valid, "rank the validation target");
  ev->add_option("--seed", e_seed, "negative-sampling seed (default: training seed)");
  ev->add_option("--out", e_out, "write metrics.json / metrics.csv here");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train the full model and its ablations over several seeds");
  ConfigFlags b_flags;
  fs::path b_data, b_sids, b_out;
  std::optional<fs::path> b_quant;
  std::string b_variants = "no_fn,no_ca,no_mca,no_msg,hid_only,sid_only", b_seeds = "42,43,44";
  b_flags.attach(ab);
  ab->add_option("--data", b_data, "data directory")->required();
  ab->add_option("--sids", b_sids, "SID TSV")->required();
  ab->add_option("--quantizer", b_quant, "quantizer.scbk (default: next to --sids)");
  ab->add_option("--variants", b_variants, "comma-separated variants (full is always run)");
  ab->add_option("--seeds", b_seeds, "comma-separated seeds");
  ab->add_option("--out", b_out, "output directory")->required();

  // report
  auto* rp = app.add_subcommand("report", "merge per-seed metrics into one table");
  std::vector<fs::path> r_runs;
  std::optional<fs::path> r_out;
  rp->add_option("--runs", r_runs, "run directories or metrics.json files")->required();
  rp->add_option("--out", r_out, "write report.json / report.csv here");

  std::vector<std::string> argv_store = args;
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return e.get_exit_code() != 0 ? e.get_exit_code() : 2;
  }

  try {
    if (prepare->parsed()) {
      Dataset ds = load_interactions(p_inter, p_min_len);
      std::optional<SemanticMatrix> sem;
      if (p_emb) {
        // Rows are indexed by the integer raw item id; reorder to dense ids.
        const SemanticMatrix raw = load_semantic_matrix(*p_emb);
        SemanticMatrix m;
        m.values.resize(ds.n_items, raw.dim());
        for (std::int32_t i = 0; i < ds.n_items; ++i) {
          const auto rid = io::parse_int(ds.item_raw_ids[static_cast<std::size_t>(i)]);
          if (rid < 0 || rid >= raw.count()) {
            throw Error(p_emb->string() + ": no row for raw item id " + std::to_string(rid));
          }
          m.values.row(i) = raw.values.row(rid);
        }
        sem = std::move(m);
      }
      fs::create_directories(p_out);
      write_interactions(ds, p_out / "interactions.tsv");
      write_remap(ds.user_raw_ids, p_out / "users.tsv");
      write_remap(ds.item_raw_ids, p_out / "items.tsv");
      std::vector<fs::path> arts = {p_out / "interactions.tsv", p_out / "users.tsv", p_out / "items.tsv"};
      if (sem) {
        save_semantic_matrix(*sem, p_out / "semantic.semb");
        arts.push_back(p_out / "semantic.semb");
      }
      const PreparedData d = prepare_in_memory(ds, sem);
      write_popularity(d.partition, p_out / "popularity.csv");
      arts.push_back(p_out / "popularity.csv");
      write_manifest(p_out, "prepare",
                     {{"n_items", ds.n_items},
                      {"n_users", ds.users.size()},
                      {"n_interactions", ds.num_interactions()},
                      {"n_head", d.partition.num_head()}},
                     arts);
      out << "prepared " << ds.users.size() << " users, " << ds.n_items << " items, " << ds.num_interactions()
          << " interactions -> " << p_out.string() << '\n';
    } else if (synth->parsed()) {
      const SynthConfig sc = s_cfg ? synth_config_from_json(read_json(*s_cfg)) : SynthConfig{};
      Rng rng(s_seed);
      const SyntheticData sd = synthesize_dataset(sc, rng);
      fs::create_directories(s_out);
      write_interactions(sd.dataset, s_out / "interactions.tsv");
      save_semantic_matrix(sd.semantic, s_out / "semantic.semb");
      write_clusters(sd.cluster, s_out / "clusters.tsv");
      const PreparedData d = prepare_in_memory(sd.dataset, sd.semantic);
      write_popularity(d.partition, s_out / "popularity.csv");
      write_manifest(s_out, "synth",
                     {{"n_items", sd.dataset.n_items},
                      {"n_users", sd.dataset.users.size()},
                      {"n_interactions", sd.dataset.num_interactions()},
                      {"seed", s_seed},
                      {"config", synth_config_to_json(sc)}},
                     {s_out / "interactions.tsv", s_out / "semantic.semb", s_out / "clusters.tsv",
                      s_out / "popularity.csv"});
      out << "synthesized " << sd.dataset.users.size() << " users, " << sd.dataset.n_items << " items -> "
          << s_out.string() << '\n';
    } else if (tq->parsed()) {
      q_opt.mechanism = parse_mechanism(q_mech);
      const SemanticMatrix sem = load_semantic_matrix(q_emb);
      const QuantizerResult r = build_quantizer(sem, q_opt);
      fs::create_directories(q_out);
      save_quantizer(r.quantizer, q_out / "quantizer.scbk");
      save_sids(r.sids, q_out / "sids.tsv");
      write_json(q_out / "quantizer_stats.json", r.stats);
      std::vector<fs::path> arts = {q_out / "quantizer.scbk", q_out / "sids.tsv", q_out / "quantizer_stats.json"};
      if (!r.log.epochs.empty()) {
        std::ostringstream os;
        os << std::setprecision(9) << "epoch,recon,codebook,commit,total,dead_codes_reset\n";
        for (std::size_t e = 0; e < r.log.epochs.size(); ++e) {
          const auto& l = r.log.epochs[e];
          os << e << ',' << l.recon << ',' << l.codebook << ',' << l.commit << ',' << l.total << ','
             << r.log.dead_codes_reset[e] << '\n';
        }
        write_text(q_out / "quantizer_losses.csv", os.str());
        arts.push_back(q_out / "quantizer_losses.csv");
      }
      write_manifest(q_out, "train-quantizer", {{"seed", q_opt.seed}, {"emb", io::file_checksum(q_emb)}}, arts);
      out << "quantizer " << q_mech << " " << q_opt.levels << "x" << q_opt.size << ": collision "
          << r.stats["collision_rate"].get<double>() << ", utilization " << r.stats["utilization_rate"].get<double>()
          << " -> " << q_out.string() << '\n';
    } else if (as->parsed()) {
      const Quantizer q = load_quantizer(a_q);
      const SemanticMatrix sem = load_semantic_matrix(a_emb);
      const SidAssignment sids = assign_sids(q, sem.values);
      save_sids(sids, a_out);
      out << "assigned " << sids.codes.size() << " SIDs, collision " << collision_rate(sids) << " -> "
          << a_out.string() << '\n';
    } else if (tr->parsed()) {
      const TrainConfig cfg = t_flags.resolve(std::nullopt);
      const PreparedData data = load_data_dir(t_data);
      const SidArtifacts sa = load_sid_artifacts(t_sids, t_quant);
      const RunResult rr = train_impl(data, sa.sids, sa.codebooks, cfg, t_out, t_resume, &out);
      nlohmann::ordered_json rm = read_json(t_out / "manifest.json");
      rm["data"] = fs::absolute(t_data).lexically_normal().string();
      write_json(t_out / "manifest.json", rm);
      print_table(out, "test (" + std::to_string(cfg.eval_negatives) + " negatives, seed " + std::to_string(cfg.seed) + ")",
                  group_breakdown({rr.test}));
    } else if (ev->parsed()) {
      const Checkpoint ck = load_checkpoint(e_ckpt);
      fs::path data_dir;
      if (e_data) {
        data_dir = *e_data;
      } else {
        const fs::path m = e_ckpt.parent_path() / "manifest.json";
        if (!fs::exists(m) || !read_json(m).contains("data")) {
          throw Error("no --data given and " + m.string() + " does not record one");
        }
        data_dir = read_json(m).at("data").get<std::string>();
      }
      const PreparedData data = load_data_dir(data_dir);
      H2RecModel<float> model = model_from_checkpoint(ck);
      EvalOptions eo;
      eo.n_negatives = e_full ? 0 : e_neg;
      eo.seed = e_seed ? *e_seed : ck.config.seed;
      eo.validation = e_valid;
      const MetricsReport r = evaluate(data.split, data.partition, model_scorer(model), eo);
      if (e_out) write_report(r, *e_out / "metrics.json", *e_out / "metrics.csv");
      print_table(out, e_full ? "full-catalog ranking" : std::to_string(e_neg) + " sampled negatives",
                  group_breakdown({r}));
    } else if (ab->parsed()) {
      const TrainConfig base = b_flags.resolve(std::nullopt);
      const PreparedData data = load_data_dir(b_data);
      const SidArtifacts sa = load_sid_artifacts(b_sids, b_quant);
      std::vector<std::string> variants = {"full"};
      for (const auto& v : split_list(b_variants)) {
        if (std::find(variants.begin(), variants.end(), v) == variants.end()) variants.push_back(v);
      }
      std::vector<std::uint64_t> seeds;
      for (const auto& s : split_list(b_seeds)) seeds.push_back(static_cast<std::uint64_t>(io::parse_int(s)));
      if (seeds.empty()) throw Error("--seeds is empty");
      for (const auto& v : variants) apply_variant(base, v);  // validate names before any training

      std::ostringstream csv;
      csv << std::setprecision(9)
          << "variant,overall_hit,overall_ndcg,tail_hit,tail_ndcg,head_hit,head_ndcg,"
             "overall_hit_std,overall_ndcg_std,tail_hit_std,tail_ndcg_std,head_hit_std,head_ndcg_std\n";
      nlohmann::ordered_json summary = nlohmann::ordered_json::object();
      std::vector<fs::path> arts;
      for (const auto& v : variants) {
        std::vector<MetricsReport> reps;
        for (std::uint64_t seed : seeds) {
          TrainConfig c = apply_variant(base, v);
          c.seed = seed;
          const fs::path dir = b_out / v / ("seed" + std::to_string(seed));
          out << "== " << v << " seed " << seed << '\n';
          reps.push_back(train_impl(data, sa.sids, sa.codebooks, c, dir, false, &out).test);
          arts.push_back(dir / "metrics.json");
        }
        const Breakdown b = group_breakdown(reps);
        const auto &o = b.group("overall"), &t = b.group("tail"), &h = b.group("head");
        csv << v << ',' << o.hit_mean << ',' << o.ndcg_mean << ',' << t.hit_mean << ',' << t.ndcg_mean << ','
            << h.hit_mean << ',' << h.ndcg_mean << ',' << o.hit_std << ',' << o.ndcg_std << ',' << t.hit_std << ','
            << t.ndcg_std << ',' << h.hit_std << ',' << h.ndcg_std << '\n';
        summary[v] = b.to_json();
      }
      write_text(b_out / "ablation.csv", csv.str());
      write_json(b_out / "ablation.json", summary);
      arts.push_back(b_out / "ablation.csv");
      arts.push_back(b_out / "ablation.json");
      write_manifest(b_out, "ablate", {{"config_hash", base.hash()}, {"seeds", seeds}}, arts);
      out << csv.str();
    } else if (rp->parsed()) {
      std::vector<MetricsReport> reps;
      std::vector<fs::path> files;
      for (const auto& r : r_runs) {
        const fs::path f = fs::is_directory(r) ? r / "metrics.json" : r;
        if (!fs::exists(f)) throw Error("missing metrics file: " + f.string());
        reps.push_back(MetricsReport::from_json(read_json(f)));
        files.push_back(f);
      }
      const Breakdown b = group_breakdown(reps);
      if (r_out) {
        fs::create_directories(*r_out);
        write_json(*r_out / "report.json", b.to_json());
        write_text(*r_out / "report.csv", b.to_csv());
      }
      print_table(out, "mean +- std over " + std::to_string(reps.size()) + " runs", b);
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << '\n';
    return 1;
  }
  return 0;
}

}  // namespace h2rec
