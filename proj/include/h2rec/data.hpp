#pragma once

#include "h2rec/semantics.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace h2rec {

using ItemId = std::int32_t;
using Rng = std::mt19937_64;

struct UserSequence {
  std::int32_t user = 0;
  std::vector<ItemId> items;  // chronological
};

struct Dataset {
  std::int32_t n_items = 0;
  std::vector<UserSequence> users;
  std::vector<std::string> user_raw_ids;  // indexed by dense user id
  std::vector<std::string> item_raw_ids;  // indexed by dense item id

  std::size_t num_interactions() const;
};

/// Reads `user<TAB>item<TAB>timestamp` lines. Users with fewer than min_len
/// interactions are dropped, then users and items are remapped densely in
/// order of first appearance. Sequences are sorted by timestamp, ties by
/// file order.
Dataset load_interactions(const std::filesystem::path& path, int min_len = 3);
Dataset parse_interactions(std::istream& in, int min_len = 3, const std::string& source = "<input>");

/// Writes dense ids with the position in the sequence as timestamp.
void write_interactions(const Dataset& ds, const std::filesystem::path& path);
/// `raw_id<TAB>dense_index` per line.
void write_remap(const std::vector<std::string>& raw_ids, const std::filesystem::path& path);

/// One user's chronological history and the leave-one-out views over it.
struct SplitUser {
  std::int32_t user = 0;
  std::vector<ItemId> history;

  std::size_t n() const { return history.size(); }
  std::span<const ItemId> train_input() const { return {history.data(), n() - 2}; }
  std::span<const ItemId> train_targets() const { return {history.data() + 1, n() - 2}; }
  /// Train inputs and targets together (every position used in training).
  std::span<const ItemId> train_prefix() const { return {history.data(), n() - 1}; }
  std::span<const ItemId> valid_input() const { return {history.data(), n() - 2}; }
  ItemId valid_target() const { return history[n() - 2]; }
  std::span<const ItemId> test_input() const { return {history.data(), n() - 1}; }
  ItemId test_target() const { return history[n() - 1]; }
};

struct SplitDataset {
  std::int32_t n_items = 0;
  std::vector<SplitUser> users;
};

SplitDataset leave_one_out_split(const Dataset& ds);

struct PopularityPartition {
  std::vector<std::int64_t> counts;  // per item, train portion only
  std::vector<std::uint8_t> is_head;
  std::vector<ItemId> head_items;    // most popular first
  /// Popularity bucket per item, 0 = least popular, n_buckets-1 = most.
  std::vector<int> bucket;
  int n_buckets = 0;
  double head_fraction = 0.2;

  std::size_t num_head() const { return head_items.size(); }
};

/// Head = ceil(head_fraction * |V|) items by train count, ties to the lower
/// index. Buckets are equal-size slices of the same popularity order.
PopularityPartition popularity_partition(const SplitDataset& split, double head_fraction = 0.2,
                                         int n_buckets = 5);

/// B x T left-padded batch, most recent item at column T-1.
struct Batch {
  int batch_size = 0;
  int max_len = 0;
  int n_neg = 0;
  ItemId pad = 0;
  std::vector<std::int32_t> users;
  std::vector<ItemId> sequences;      // B*T
  std::vector<std::uint8_t> pad_mask; // B*T, 1 = real item
  std::vector<ItemId> targets;        // B*T, pad where no target
  std::vector<ItemId> negatives;      // B*T*n_neg, pad where no target
  std::vector<int> last_valid_pos;    // B

  ItemId item(int b, int t) const { return sequences[static_cast<std::size_t>(b) * max_len + t]; }
  bool valid(int b, int t) const { return pad_mask[static_cast<std::size_t>(b) * max_len + t] != 0; }
  ItemId target(int b, int t) const { return targets[static_cast<std::size_t>(b) * max_len + t]; }
  ItemId negative(int b, int t, int k) const {
    return negatives[(static_cast<std::size_t>(b) * max_len + t) * n_neg + k];
  }
  int length(int b) const;
};

/// Keeps the most recent max_len items.
std::span<const ItemId> truncate_recent(std::span<const ItemId> seq, int max_len);

struct BatchOptions {
  int max_len = 50;
  int batch_size = 256;
  int n_neg = 1;
};

/// One epoch of training batches over the train prefixes. User order is
/// shuffled from `seed`; negatives are uniform over the catalog minus the
/// aligned target.
class BatchStream {
 public:
  BatchStream(const SplitDataset& split, BatchOptions opts, std::uint64_t seed);

  std::optional<Batch> next();
  std::size_t num_batches() const;

 private:
  const SplitDataset* split_;
  BatchOptions opts_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Inference batch over arbitrary input sequences (no targets/negatives).
Batch make_input_batch(std::span<const std::span<const ItemId>> inputs, int max_len, ItemId pad);

struct SynthConfig {
  int n_users = 2000;
  int n_items = 1000;
  double zipf_s = 1.2;
  int n_clusters = 20;
  double avg_len = 12.0;
  int d_sem = 64;
  double noise = 0.1;
  double stay_prob = 0.8;
  int max_seq_len = 200;
};

struct SyntheticData {
  Dataset dataset;
  SemanticMatrix semantic;
  std::vector<int> cluster;          // ground-truth cluster per item
  std::vector<double> popularity;    // unnormalized Zipf weight per item
};

/// Cluster-sticky Markov walk over Zipf-popular items with clustered
/// semantic vectors.
SyntheticData synthesize_dataset(const SynthConfig& cfg, Rng& rng);
void write_clusters(const std::vector<int>& cluster, const std::filesystem::path& path);

}  // namespace h2rec
