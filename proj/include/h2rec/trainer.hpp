#pragma once

#include "h2rec/eval.hpp"
#include "h2rec/losses.hpp"
#include "h2rec/model.hpp"
#include "h2rec/optim.hpp"
#include "h2rec/quantizer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace h2rec {

struct TrainConfig {
  int epochs = 200;
  double lr = 1e-3;
  int batch_size = 256;
  int max_len = 50;
  int d = 64;
  int L = 4;
  int K = 128;
  int p = 3;
  int o = 3;
  double beta = 0.5;
  double gamma = 0.3;
  double tau = 0.1;
  int n_neg = 1;
  std::uint64_t seed = 42;
  bool no_fn = false;
  bool no_mca = false;
  bool no_ca = false;
  bool no_msg = false;
  bool hid_only = false;
  bool sid_only = false;
  int patience = 10;

  int layers = 2;
  int heads = 2;
  double dropout = 0.2;
  double clip_norm = 5.0;
  int eval_negatives = 99;
  int pool_cap = 256;
  double emb_std = 0.05;
  /// Rescale the artifact-initialized tables so their entries have emb_std.
  bool rescale_init = true;
  /// "semantic" (reduced semantic matrix) or "random".
  std::string hid_init = "semantic";
  /// "code_guided" (one-to-many) or "pairwise" (one-to-one).
  std::string alignment = "code_guided";
  bool causal_cross = true;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Unknown keys and wrongly typed values are errors; missing keys keep
  /// their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
  /// FNV-1a of the canonical JSON form, hex encoded.
  std::string hash() const;
  ModelConfig model_config(std::int32_t n_items) const;
};

/// Builds the model and seeds its tables from the semantic artifacts: the HID
/// table from the reduced semantic matrix, the code tables from the
/// quantizer codebooks (SVD-projected when widths differ).
H2RecModel<float> init_model(const SplitDataset& split, const SemanticMatrix& semantic, const SidAssignment& sids,
                             const Codebooks& codebooks, const TrainConfig& cfg, Rng& rng);

/// Code tables in model width: exact copy when dim == d, otherwise the
/// stacked codebooks projected onto their top-d right singular vectors
/// (zero-padded when dim < d).
std::vector<MatF> project_codebooks(const Codebooks& cb, int d);

template <typename S>
struct StepLosses {
  ad::Var<S> total;
  ad::Var<S> l_rec;
  std::optional<ad::Var<S>> l_ca;
  std::optional<ad::Var<S>> l_msg;
  ForwardOutput<S> forward;
};

/// All training objectives for one batch. mask_level < 0 samples it from rng.
template <typename S>
StepLosses<S> compute_losses(ad::Tape<S>& tape, H2RecModel<S>& model, const FlatBatch& fb, const TrainConfig& cfg,
                             Rng& rng, bool train, int mask_level = -1);

struct EpochLog {
  int epoch = 0;
  double l_rec = 0.0, l_ca = 0.0, l_msg = 0.0, total = 0.0;  // means over the epoch's steps
  double val_hit = 0.0, val_ndcg = 0.0;
  double seconds = 0.0;
  bool improved = false;
};

struct TrainState {
  int next_epoch = 0;
  std::int64_t step = 0;
  double best_ndcg = -1.0;
  int best_epoch = -1;
  int bad_epochs = 0;
  bool stopped = false;
  std::vector<EpochLog> history;
};

struct TrainOptions {
  std::optional<std::filesystem::path> loss_csv;     // per-step losses
  std::optional<std::filesystem::path> checkpoint;   // rewritten after each epoch
  std::optional<std::filesystem::path> epoch_json;   // per-epoch summaries
  /// Stop after this many epochs in this call (resume testing); -1 = no limit.
  int max_epochs_this_run = -1;
  std::function<void(const EpochLog&)> on_epoch;
  /// Value of the first step's total loss (before any update) is stored here.
  double* first_loss = nullptr;
};

struct Trainer {
  Trainer(H2RecModel<float>& model, const SplitDataset& split, const PopularityPartition& part, TrainConfig cfg);

  /// Runs epochs until early stopping or the budget; restores the best
  /// validation parameters at the end.
  const TrainState& run(const TrainOptions& opt = {});

  /// One optimization step; returns the step's loss report.
  LossReport step(const Batch& batch);

  MetricsReport validate() const;

  H2RecModel<float>& model;
  const SplitDataset& split;
  const PopularityPartition& part;
  TrainConfig cfg;
  Adam<float> adam;
  Rng rng;
  TrainState state;
  std::vector<MatF> best_params;
};

/// Scorer backed by a model (evaluation mode).
Scorer model_scorer(H2RecModel<float>& model);

enum class LossTerm { kRec, kCa, kMsg, kTotal };
std::string to_string(LossTerm t);

struct GradCheckGroup {
  std::string name;
  int coords = 0;
  double max_rel = 0.0;
  std::string worst;  // parameter[index] of the largest error
};

struct GradCheckReport {
  LossTerm term = LossTerm::kTotal;
  std::vector<GradCheckGroup> groups;
  double max_rel = 0.0;
  bool ok = false;
  double loss = 0.0;
};

/// Central finite differences in double precision against the analytic
/// gradient on a tiny random instance (2 users, T = max_len). Coordinates
/// are drawn per parameter group.
GradCheckReport grad_check(const TrainConfig& cfg_small, LossTerm term, std::uint64_t seed, double h = 1e-3,
                           int coords_per_group = 10, double tol = 1e-3);

/// Parameter group used in gradient-check reports.
std::string param_group(const std::string& name);

/// Tiny config used by the gradient check and tests: T=4, L=2, K=4, d=8.
TrainConfig tiny_config();

struct Checkpoint {
  TrainConfig config;
  std::string config_hash;
  std::int32_t n_items = 0;
  std::vector<SemanticId> sids;
  std::vector<std::pair<std::string, MatF>> params;
  std::vector<MatF> adam_m, adam_v;
  std::int64_t adam_steps = 0;
  std::vector<MatF> best_params;
  TrainState state;
  std::string rng_state;
  nlohmann::json meta;  // free-form extras (data paths)
};

/// `H2CK` magic, then sections. PARM: u32 count, per tensor u32 name
/// length, name, u32 rank, u32 dims, f32 data. ADAM and BEST reuse the
/// tensor layout. SIDS: u32 items, u32 L, codes. META: u32 length + JSON.
void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer, const nlohmann::json& meta = {});
void save_model(const std::filesystem::path& path, const H2RecModel<float>& model, const TrainConfig& cfg,
                const nlohmann::json& meta = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Also refuses a checkpoint whose config hash differs from cfg's.
Checkpoint load_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg);

H2RecModel<float> model_from_checkpoint(const Checkpoint& ck);
/// Restores parameters, optimizer, rng and progress into a trainer.
void resume(Trainer& trainer, const Checkpoint& ck);

}  // namespace h2rec
