#include "h2rec/data.hpp"

#include "h2rec/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

namespace h2rec {

std::size_t Dataset::num_interactions() const {
  std::size_t n = 0;
  for (const auto& u : users) n += u.items.size();
  return n;
}

namespace {

struct RawEvent {
  std::int64_t timestamp;
  std::size_t line;
  std::string item;
};

}  // namespace

Dataset parse_interactions(std::istream& in, int min_len, const std::string& source) {
  std::vector<std::string> user_order;
  std::unordered_map<std::string, std::size_t> user_index;
  std::vector<std::vector<RawEvent>> events;

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = io::split(line, '\t');
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
      throw Error(source + ":" + std::to_string(lineno) + ": expected user<TAB>item<TAB>timestamp");
    }
    std::int64_t ts = 0;
    try {
      ts = io::parse_int(fields[2]);
    } catch (const Error& e) {
      throw Error(source + ":" + std::to_string(lineno) + ": bad timestamp: " + e.what());
    }
    std::string user(fields[0]);
    auto [it, inserted] = user_index.try_emplace(user, user_order.size());
    if (inserted) {
      user_order.push_back(user);
      events.emplace_back();
    }
    events[it->second].push_back(RawEvent{ts, lineno, std::string(fields[1])});
  }

  Dataset ds;
  std::unordered_map<std::string, ItemId> item_index;
  // Users are visited in order of first appearance, and within a user the
  // items in file order, so item ids follow first appearance among kept
  // interactions.
  std::vector<std::size_t> kept;
  for (std::size_t u = 0; u < events.size(); ++u) {
    if (static_cast<int>(events[u].size()) >= min_len) kept.push_back(u);
  }
  // Item remap by first appearance in the file over kept users.
  std::vector<std::pair<std::size_t, const std::string*>> first_seen;
  for (auto u : kept) {
    for (const auto& e : events[u]) first_seen.emplace_back(e.line, &e.item);
  }
  std::sort(first_seen.begin(), first_seen.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [ln, item] : first_seen) {
    if (item_index.try_emplace(*item, static_cast<ItemId>(ds.item_raw_ids.size())).second) {
      ds.item_raw_ids.push_back(*item);
    }
  }

  for (auto u : kept) {
    auto& ev = events[u];
    std::stable_sort(ev.begin(), ev.end(),
                     [](const RawEvent& a, const RawEvent& b) { return a.timestamp < b.timestamp; });
    UserSequence seq;
    seq.user = static_cast<std::int32_t>(ds.users.size());
    seq.items.reserve(ev.size());
    for (const auto& e : ev) seq.items.push_back(item_index.at(e.item));
    ds.user_raw_ids.push_back(user_order[u]);
    ds.users.push_back(std::move(seq));
  }
  ds.n_items = static_cast<std::int32_t>(ds.item_raw_ids.size());
  if (ds.users.empty()) {
    throw Error(source + ": no users with at least " + std::to_string(min_len) + " interactions");
  }
  return ds;
}

Dataset load_interactions(const std::filesystem::path& path, int min_len) {
  auto in = io::open_in(path);
  return parse_interactions(in, min_len, path.string());
}

void write_interactions(const Dataset& ds, const std::filesystem::path& path) {
  auto os = io::open_out(path);
  for (const auto& u : ds.users) {
    for (std::size_t t = 0; t < u.items.size(); ++t) {
      os << u.user << '\t' << u.items[t] << '\t' << t << '\n';
    }
  }
}

void write_remap(const std::vector<std::string>& raw_ids, const std::filesystem::path& path) {
  auto os = io::open_out(path);
  for (std::size_t i = 0; i < raw_ids.size(); ++i) os << raw_ids[i] << '\t' << i << '\n';
}

SplitDataset leave_one_out_split(const Dataset& ds) {
  SplitDataset split;
  split.n_items = ds.n_items;
  split.users.reserve(ds.users.size());
  for (const auto& u : ds.users) {
    if (u.items.size() < 3) {
      throw Error("user " + std::to_string(u.user) + " has " + std::to_string(u.items.size()) +
                  " interactions; leave-one-out needs at least 3");
    }
    split.users.push_back(SplitUser{u.user, u.items});
  }
  return split;
}

PopularityPartition popularity_partition(const SplitDataset& split, double head_fraction,
                                         int n_buckets) {
  if (!(head_fraction > 0.0 && head_fraction < 1.0)) {
    throw Error("head_fraction must lie in (0, 1)");
  }
  if (n_buckets < 1) throw Error("n_buckets must be positive");
  const auto n = static_cast<std::size_t>(split.n_items);
  PopularityPartition part;
  part.head_fraction = head_fraction;
  part.n_buckets = n_buckets;
  part.counts.assign(n, 0);
  for (const auto& u : split.users) {
    for (ItemId i : u.train_prefix()) ++part.counts[static_cast<std::size_t>(i)];
  }
  std::vector<ItemId> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](ItemId a, ItemId b) {
    return part.counts[static_cast<std::size_t>(a)] > part.counts[static_cast<std::size_t>(b)];
  });
  const auto n_head = static_cast<std::size_t>(std::ceil(head_fraction * static_cast<double>(n) - 1e-9));
  part.is_head.assign(n, 0);
  part.head_items.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(n_head, n)));
  for (ItemId i : part.head_items) part.is_head[static_cast<std::size_t>(i)] = 1;

  // order[0] is the most popular; bucket n_buckets-1 takes the first slice.
  part.bucket.assign(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto slice = static_cast<int>(r * static_cast<std::size_t>(n_buckets) / n);
    part.bucket[static_cast<std::size_t>(order[r])] = n_buckets - 1 - slice;
  }
  return part;
}

int Batch::length(int b) const {
  int len = 0;
  for (int t = 0; t < max_len; ++t) len += valid(b, t) ? 1 : 0;
  return len;
}

std::span<const ItemId> truncate_recent(std::span<const ItemId> seq, int max_len) {
  if (static_cast<int>(seq.size()) <= max_len) return seq;
  return seq.subspan(seq.size() - static_cast<std::size_t>(max_len));
}

namespace {

Batch empty_batch(int b, int t, int n_neg, ItemId pad) {
  Batch batch;
  batch.batch_size = b;
  batch.max_len = t;
  batch.n_neg = n_neg;
  batch.pad = pad;
  const auto cells = static_cast<std::size_t>(b) * static_cast<std::size_t>(t);
  batch.users.assign(static_cast<std::size_t>(b), -1);
  batch.sequences.assign(cells, pad);
  batch.pad_mask.assign(cells, 0);
  batch.targets.assign(cells, pad);
  batch.negatives.assign(cells * static_cast<std::size_t>(n_neg), pad);
  batch.last_valid_pos.assign(static_cast<std::size_t>(b), t - 1);
  return batch;
}

}  // namespace

BatchStream::BatchStream(const SplitDataset& split, BatchOptions opts, std::uint64_t seed)
    : split_(&split), opts_(opts), rng_(seed) {
  if (opts.max_len < 2) throw Error("max_len must be at least 2");
  if (opts.batch_size < 1) throw Error("batch_size must be positive");
  if (opts.n_neg < 1) throw Error("n_neg must be positive");
  order_.resize(split.users.size());
  std::iota(order_.begin(), order_.end(), 0);
  std::shuffle(order_.begin(), order_.end(), rng_);
}

std::size_t BatchStream::num_batches() const {
  const auto b = static_cast<std::size_t>(opts_.batch_size);
  return (order_.size() + b - 1) / b;
}

std::optional<Batch> BatchStream::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(opts_.batch_size));
  const int b_count = static_cast<int>(end - cursor_);
  const int T = opts_.max_len;
  const ItemId pad = split_->n_items;
  Batch batch = empty_batch(b_count, T, opts_.n_neg, pad);
  if (split_->n_items < 2) throw Error("negative sampling needs at least 2 items");
  std::uniform_int_distribution<ItemId> pick(0, split_->n_items - 2);
  for (int b = 0; b < b_count; ++b) {
    const SplitUser& u = split_->users[order_[cursor_ + static_cast<std::size_t>(b)]];
    batch.users[static_cast<std::size_t>(b)] = u.user;
    const auto input = truncate_recent(u.train_input(), T);
    const auto targets = truncate_recent(u.train_targets(), T);
    const int len = static_cast<int>(input.size());
    const int off = T - len;
    for (int j = 0; j < len; ++j) {
      const auto cell = static_cast<std::size_t>(b) * static_cast<std::size_t>(T) + static_cast<std::size_t>(off + j);
      batch.sequences[cell] = input[static_cast<std::size_t>(j)];
      batch.pad_mask[cell] = 1;
      const ItemId tgt = targets[static_cast<std::size_t>(j)];
      batch.targets[cell] = tgt;
      for (int k = 0; k < opts_.n_neg; ++k) {
        // Uniform over the n_items - 1 non-target items.
        ItemId neg = pick(rng_);
        if (neg >= tgt) ++neg;
        batch.negatives[cell * static_cast<std::size_t>(opts_.n_neg) + static_cast<std::size_t>(k)] = neg;
      }
    }
  }
  cursor_ = end;
  return batch;
}

Batch make_input_batch(std::span<const std::span<const ItemId>> inputs, int max_len, ItemId pad) {
  const int b_count = static_cast<int>(inputs.size());
  Batch batch = empty_batch(b_count, max_len, 1, pad);
  for (int b = 0; b < b_count; ++b) {
    const auto seq = truncate_recent(inputs[static_cast<std::size_t>(b)], max_len);
    if (seq.empty()) throw Error("input sequence is empty");
    const int off = max_len - static_cast<int>(seq.size());
    for (std::size_t j = 0; j < seq.size(); ++j) {
      const auto cell = static_cast<std::size_t>(b) * static_cast<std::size_t>(max_len) + static_cast<std::size_t>(off) + j;
      batch.sequences[cell] = seq[j];
      batch.pad_mask[cell] = 1;
    }
  }
  return batch;
}

SyntheticData synthesize_dataset(const SynthConfig& cfg, Rng& rng) {
  if (cfg.n_users < 1 || cfg.n_items < 2 || cfg.n_clusters < 1 || cfg.d_sem < 1) {
    throw Error("synthesize_dataset: sizes must be positive (n_items >= 2)");
  }
  if (cfg.n_clusters > cfg.n_items) throw Error("synthesize_dataset: n_clusters exceeds n_items");
  if (cfg.avg_len < 3.0) throw Error("synthesize_dataset: avg_len must be at least 3");
  if (cfg.zipf_s < 0.0 || cfg.noise < 0.0 || cfg.stay_prob < 0.0 || cfg.stay_prob > 1.0) {
    throw Error("synthesize_dataset: invalid zipf_s / noise / stay_prob");
  }
  const auto n_items = static_cast<std::size_t>(cfg.n_items);
  const auto n_clusters = static_cast<std::size_t>(cfg.n_clusters);

  SyntheticData out;
  // Cluster membership: the first n_clusters items of a random order seed
  // one cluster each so none is empty.
  std::vector<std::size_t> perm(n_items);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  out.cluster.assign(n_items, 0);
  std::uniform_int_distribution<int> any_cluster(0, cfg.n_clusters - 1);
  for (std::size_t r = 0; r < n_items; ++r) {
    out.cluster[perm[r]] = r < n_clusters ? static_cast<int>(r) : any_cluster(rng);
  }

  // Zipf weight by a random popularity rank.
  std::shuffle(perm.begin(), perm.end(), rng);
  out.popularity.assign(n_items, 0.0);
  for (std::size_t r = 0; r < n_items; ++r) {
    out.popularity[perm[r]] = 1.0 / std::pow(static_cast<double>(r + 1), cfg.zipf_s);
  }

  std::normal_distribution<double> gauss(0.0, 1.0);
  MatD centroids(static_cast<Eigen::Index>(n_clusters), cfg.d_sem);
  for (Eigen::Index i = 0; i < centroids.size(); ++i) centroids.data()[i] = gauss(rng);
  out.semantic.values.resize(cfg.n_items, cfg.d_sem);
  for (std::size_t i = 0; i < n_items; ++i) {
    for (int j = 0; j < cfg.d_sem; ++j) {
      const double noise = cfg.noise > 0.0 ? cfg.noise * gauss(rng) : 0.0;
      out.semantic.values(static_cast<Eigen::Index>(i), j) =
          static_cast<float>(centroids(out.cluster[i], j) + noise);
    }
  }

  std::vector<std::vector<std::size_t>> members(n_clusters);
  std::vector<double> mass(n_clusters, 0.0);
  for (std::size_t i = 0; i < n_items; ++i) {
    members[static_cast<std::size_t>(out.cluster[i])].push_back(i);
    mass[static_cast<std::size_t>(out.cluster[i])] += out.popularity[i];
  }
  std::vector<std::discrete_distribution<std::size_t>> within;
  for (std::size_t c = 0; c < n_clusters; ++c) {
    std::vector<double> w;
    for (auto i : members[c]) w.push_back(out.popularity[i]);
    within.emplace_back(w.begin(), w.end());
  }
  std::discrete_distribution<std::size_t> pick_cluster(mass.begin(), mass.end());
  // Jump target excludes the current cluster when there is another one.
  std::vector<std::discrete_distribution<std::size_t>> jump;
  for (std::size_t c = 0; c < n_clusters; ++c) {
    std::vector<double> w = mass;
    if (n_clusters > 1) w[c] = 0.0;
    jump.emplace_back(w.begin(), w.end());
  }
  std::bernoulli_distribution stay(cfg.stay_prob);
  std::geometric_distribution<int> extra(1.0 / (cfg.avg_len - 3.0 + 1.0));

  Dataset& ds = out.dataset;
  ds.n_items = cfg.n_items;
  for (std::size_t i = 0; i < n_items; ++i) ds.item_raw_ids.push_back(std::to_string(i));
  for (int u = 0; u < cfg.n_users; ++u) {
    const int len = std::min(cfg.max_seq_len, 3 + extra(rng));
    UserSequence seq;
    seq.user = u;
    std::size_t c = pick_cluster(rng);
    for (int t = 0; t < len; ++t) {
      if (t > 0 && !stay(rng)) c = jump[c](rng);
      seq.items.push_back(static_cast<ItemId>(members[c][within[c](rng)]));
    }
    ds.user_raw_ids.push_back(std::to_string(u));
    ds.users.push_back(std::move(seq));
  }
  return out;
}

void write_clusters(const std::vector<int>& cluster, const std::filesystem::path& path) {
  auto os = io::open_out(path);
  for (std::size_t i = 0; i < cluster.size(); ++i) os << i << '\t' << cluster[i] << '\n';
}

}  // namespace h2rec
