#pragma once

#include "h2rec/data.hpp"
#include "h2rec/eval.hpp"
#include "h2rec/quantizer.hpp"
#include "h2rec/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace h2rec {

/// Entry point of the `h2rec` binary. Returns the process exit code; errors
/// are reported as one `error: ...` line on err.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Pipeline building blocks shared by the CLI and the acceptance harness.

SynthConfig synth_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json synth_config_to_json(const SynthConfig& c);

/// A prepared data directory: interactions.tsv (dense ids) plus, when
/// present, semantic.semb.
struct PreparedData {
  Dataset dataset;
  SplitDataset split;
  PopularityPartition partition;
  std::optional<SemanticMatrix> semantic;
};

PreparedData load_data_dir(const std::filesystem::path& dir);
PreparedData prepare_in_memory(Dataset ds, std::optional<SemanticMatrix> semantic);

struct QuantizerOptions {
  Mechanism mechanism = Mechanism::kRq;
  int levels = 4;
  int size = 128;
  int kmeans_iters = 25;
  RqVaeConfig rq;
  std::uint64_t seed = 42;
};

struct QuantizerResult {
  Quantizer quantizer;
  SidAssignment sids;
  RqTrainLog log;
  nlohmann::ordered_json stats;  // collision / utilization summary
};

QuantizerResult build_quantizer(const SemanticMatrix& semantic, const QuantizerOptions& opt);

struct RunResult {
  MetricsReport test;
  TrainState state;
};

/// Trains one model and evaluates it on the test split. When out_dir is
/// given the run's artifacts are written there.
RunResult train_and_evaluate(const PreparedData& data, const SidAssignment& sids, const Codebooks& codebooks,
                             const TrainConfig& cfg, const std::optional<std::filesystem::path>& out_dir = {});

/// Config changes of one ablation variant (full, no_fn, no_ca, no_mca,
/// no_msg, hid_only, sid_only).
TrainConfig apply_variant(TrainConfig cfg, const std::string& variant);

/// `path -> checksum` manifest with the command, config hash and seed.
void write_manifest(const std::filesystem::path& dir, const std::string& command, const nlohmann::ordered_json& extra,
                    const std::vector<std::filesystem::path>& artifacts);

}  // namespace h2rec
