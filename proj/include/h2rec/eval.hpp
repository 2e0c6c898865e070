#pragma once

#include "h2rec/data.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace h2rec {

/// 1 + number of other candidates scoring at least as high as the target
/// (ties count against the target).
int rank_of_target(std::span<const double> scores, std::span<const ItemId> candidates, ItemId target);

double hit_at_k(int rank, int k = 10);
/// 1 / log2(rank + 1) inside the cutoff, else 0.
double ndcg_at_k(int rank, int k = 10);

struct GroupMetrics {
  std::string name;
  double hit = 0.0;   // mean H@k
  double ndcg = 0.0;  // mean N@k
  std::int64_t n = 0;
};

/// Groups in fixed order: overall, head, tail, bucket1..bucketN with
/// bucket1 the least popular slice. Users are grouped by their target item.
struct MetricsReport {
  int k = 10;
  int n_negatives = 99;  // 0 = full catalog
  std::uint64_t seed = 0;
  std::vector<GroupMetrics> groups;

  const GroupMetrics& group(const std::string& name) const;
  nlohmann::ordered_json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Scores one candidate list per input sequence.
using Scorer = std::function<std::vector<std::vector<double>>(std::span<const std::span<const ItemId>> inputs,
                                                              const std::vector<std::vector<ItemId>>& candidates)>;

struct EvalOptions {
  int n_negatives = 99;  // <= 0 ranks against the full catalog
  std::uint64_t seed = 0;
  int k = 10;
  bool validation = false;  // rank the validation target instead of the test target
  int batch_size = 256;
};

/// Candidates are the target plus n_negatives distinct items drawn
/// uniformly from outside the user's whole history.
MetricsReport evaluate(const SplitDataset& split, const PopularityPartition& part, const Scorer& scorer,
                       const EvalOptions& opt);

struct GroupSummary {
  std::string name;
  double hit_mean = 0.0, hit_std = 0.0;
  double ndcg_mean = 0.0, ndcg_std = 0.0;
  std::int64_t n = 0;  // per-run count (identical across runs on one split)
};

/// Mean and sample standard deviation per group across runs.
struct Breakdown {
  std::vector<std::uint64_t> seeds;
  std::vector<GroupSummary> groups;

  const GroupSummary& group(const std::string& name) const;
  std::string to_csv() const;
  nlohmann::ordered_json to_json() const;
};

Breakdown group_breakdown(const std::vector<MetricsReport>& reports);

/// Overall / Tail / Head rows of H@k and N@k as an aligned text table.
std::string format_table(const Breakdown& b, int k = 10);

void write_report(const MetricsReport& r, const std::filesystem::path& json_path,
                  const std::filesystem::path& csv_path);

}  // namespace h2rec
