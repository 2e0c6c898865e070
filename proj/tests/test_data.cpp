#include "h2rec/data.hpp"
#include "h2rec/io.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

namespace h2rec {
namespace {

Dataset parse(const std::string& text, int min_len = 3) {
  std::istringstream is(text);
  return parse_interactions(is, min_len);
}

Dataset make_dataset(std::int32_t n_items, std::vector<std::vector<ItemId>> seqs) {
  Dataset ds;
  ds.n_items = n_items;
  for (std::size_t u = 0; u < seqs.size(); ++u) {
    ds.users.push_back({static_cast<std::int32_t>(u), std::move(seqs[u])});
    ds.user_raw_ids.push_back(std::to_string(u));
  }
  for (std::int32_t i = 0; i < n_items; ++i) ds.item_raw_ids.push_back(std::to_string(i));
  return ds;
}

TEST(Ingest, SortsByTimestamp) {
  const Dataset ds = parse("u\ta\t5\nu\tb\t1\nu\tc\t3\n");
  ASSERT_EQ(ds.users.size(), 1u);
  std::vector<std::string> order;
  for (ItemId it : ds.users[0].items) order.push_back(ds.item_raw_ids[static_cast<std::size_t>(it)]);
  EXPECT_EQ(order, (std::vector<std::string>{"b", "c", "a"}));
}

TEST(Ingest, TimestampTiesKeepFileOrder) {
  const Dataset ds = parse("u\tx\t1\nu\ty\t1\nu\tz\t0\n");
  std::vector<std::string> order;
  for (ItemId it : ds.users[0].items) order.push_back(ds.item_raw_ids[static_cast<std::size_t>(it)]);
  EXPECT_EQ(order, (std::vector<std::string>{"z", "x", "y"}));
}

TEST(Ingest, ShortUsersDropped) {
  const Dataset ds = parse("u\ta\t1\nu\tb\t2\nv\ta\t1\nv\tb\t2\nv\tc\t3\n");
  ASSERT_EQ(ds.users.size(), 1u);
  EXPECT_EQ(ds.user_raw_ids[0], "v");
}

TEST(Ingest, DenseContiguousIds) {
  const Dataset ds = parse("u\tq\t1\nu\tr\t2\nu\ts\t3\nv\ts\t1\nv\tt\t2\nv\tq\t3\n");
  EXPECT_EQ(ds.n_items, 4);
  std::set<ItemId> seen;
  for (const auto& u : ds.users) seen.insert(u.items.begin(), u.items.end());
  EXPECT_EQ(seen, (std::set<ItemId>{0, 1, 2, 3}));
}

TEST(Ingest, MalformedLineReportsLineNumber) {
  try {
    parse("u\ta\t1\nu\tb\n");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse("u\ta\tnot-a-number\nu\tb\t1\nu\tc\t2\n"), Error);
}

TEST(Ingest, EmptyAfterFilteringIsError) {
  EXPECT_THROW(parse("u\ta\t1\n"), Error);
  EXPECT_THROW(parse(""), Error);
}

TEST(Ingest, WriteThenLoadRoundTrip) {
  testing::TempDir dir;
  const Dataset ds = make_dataset(5, {{0, 1, 2, 3}, {4, 3, 2}});
  write_interactions(ds, dir / "i.tsv");
  const Dataset back = load_interactions(dir / "i.tsv");
  ASSERT_EQ(back.users.size(), 2u);
  EXPECT_EQ(back.users[0].items.size(), 4u);
  EXPECT_EQ(back.users[1].items.size(), 3u);
}

TEST(Split, FourItemExample) {
  const SplitDataset s = leave_one_out_split(make_dataset(4, {{0, 1, 2, 3}}));
  const SplitUser& u = s.users[0];
  EXPECT_EQ(std::vector<ItemId>(u.train_input().begin(), u.train_input().end()), (std::vector<ItemId>{0, 1}));
  EXPECT_EQ(std::vector<ItemId>(u.train_targets().begin(), u.train_targets().end()), (std::vector<ItemId>{1, 2}));
  EXPECT_EQ(std::vector<ItemId>(u.valid_input().begin(), u.valid_input().end()), (std::vector<ItemId>{0, 1}));
  EXPECT_EQ(u.valid_target(), 2);
  EXPECT_EQ(std::vector<ItemId>(u.test_input().begin(), u.test_input().end()), (std::vector<ItemId>{0, 1, 2}));
  EXPECT_EQ(u.test_target(), 3);
}

TEST(Split, MinimalThreeItemCase) {
  const SplitDataset s = leave_one_out_split(make_dataset(3, {{0, 1, 2}}));
  const SplitUser& u = s.users[0];
  ASSERT_EQ(u.train_input().size(), 1u);
  EXPECT_EQ(u.train_input()[0], 0);
  EXPECT_EQ(u.train_targets()[0], 1);
  EXPECT_EQ(u.valid_target(), 1);
  EXPECT_EQ(u.test_target(), 2);
}

TEST(Split, TooShortIsError) { EXPECT_THROW(leave_one_out_split(make_dataset(3, {{0, 1}})), Error); }

TEST(Split, ReconstructsEverySyntheticSequence) {
  Rng rng(3);
  SynthConfig cfg;
  cfg.n_users = 200;
  cfg.n_items = 100;
  const SyntheticData sd = synthesize_dataset(cfg, rng);
  const SplitDataset s = leave_one_out_split(sd.dataset);
  ASSERT_EQ(s.users.size(), sd.dataset.users.size());
  for (std::size_t u = 0; u < s.users.size(); ++u) {
    std::vector<ItemId> rebuilt(s.users[u].train_prefix().begin(), s.users[u].train_prefix().end());
    rebuilt.back() = s.users[u].valid_target();
    rebuilt.push_back(s.users[u].test_target());
    EXPECT_EQ(rebuilt, sd.dataset.users[u].items);
  }
}

TEST(Partition, HeadIsTopTwentyPercent) {
  SplitDataset s;
  s.n_items = 10;
  const std::vector<int> counts = {9, 8, 7, 6, 5, 4, 3, 2, 1, 0};
  for (int i = 0; i < 10; ++i) {
    for (int c = 0; c < counts[static_cast<std::size_t>(i)]; ++c) s.users.push_back({0, {i, i, 0}});
  }
  // Each user contributes its first item twice to the train prefix [i, i].
  const PopularityPartition p = popularity_partition(s);
  EXPECT_EQ(p.num_head(), 2u);
  EXPECT_EQ(p.head_items, (std::vector<ItemId>{0, 1}));
}

TEST(Partition, TiesGoToLowerIndex) {
  SplitDataset s;
  s.n_items = 10;
  const PopularityPartition p = popularity_partition(s);
  EXPECT_EQ(p.head_items, (std::vector<ItemId>{0, 1}));
  EXPECT_TRUE(p.is_head[0] && p.is_head[1] && !p.is_head[2]);
}

TEST(Partition, InvariantsOnSyntheticData) {
  Rng rng(11);
  SynthConfig cfg;
  cfg.n_users = 300;
  cfg.n_items = 97;
  const SplitDataset s = leave_one_out_split(synthesize_dataset(cfg, rng).dataset);
  const PopularityPartition p = popularity_partition(s);
  EXPECT_EQ(p.num_head(), static_cast<std::size_t>(std::ceil(0.2 * 97)));
  std::size_t heads = 0;
  for (auto h : p.is_head) heads += h;
  EXPECT_EQ(heads, p.num_head());
  // Buckets are monotone in popularity: every item of bucket b is at least
  // as popular as every item of bucket b-1.
  for (std::size_t i = 0; i < p.counts.size(); ++i) {
    for (std::size_t j = 0; j < p.counts.size(); ++j) {
      if (p.bucket[i] > p.bucket[j]) {
        EXPECT_GE(p.counts[i], p.counts[j]);
      }
    }
  }
  // Counts come from the train prefix only.
  std::vector<std::int64_t> oracle(97, 0);
  for (const auto& u : s.users) {
    for (ItemId it : u.train_prefix()) ++oracle[static_cast<std::size_t>(it)];
  }
  EXPECT_EQ(p.counts, oracle);
  EXPECT_THROW(popularity_partition(s, 1.0), Error);
  EXPECT_THROW(popularity_partition(s, 0.0), Error);
}

TEST(Partition, ZipfHeadCarriesMajorityOfMass) {
  // Independent oracle: sample Zipf(1.2) counts directly and sum the top 20%.
  Rng rng(5);
  const int n = 1000;
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 1.0 / std::pow(i + 1.0, 1.2);
  std::discrete_distribution<int> zipf(w.begin(), w.end());
  std::vector<std::int64_t> counts(n, 0);
  for (int k = 0; k < 20000; ++k) ++counts[static_cast<std::size_t>(zipf(rng))];
  std::vector<std::int64_t> sorted = counts;
  std::sort(sorted.rbegin(), sorted.rend());
  const auto total = std::accumulate(sorted.begin(), sorted.end(), std::int64_t{0});
  const auto head = std::accumulate(sorted.begin(), sorted.begin() + 200, std::int64_t{0});
  ASSERT_GT(static_cast<double>(head) / static_cast<double>(total), 0.5);

  // The synthetic generator's own partition shows the same concentration.
  Rng rng2(5);
  SynthConfig cfg;
  const SplitDataset s = leave_one_out_split(synthesize_dataset(cfg, rng2).dataset);
  const PopularityPartition p = popularity_partition(s);
  std::int64_t head_mass = 0, all = 0;
  for (std::size_t i = 0; i < p.counts.size(); ++i) {
    all += p.counts[i];
    if (p.is_head[i]) head_mass += p.counts[i];
  }
  EXPECT_GT(static_cast<double>(head_mass) / static_cast<double>(all), 0.5);
}

TEST(Batches, RecencyTruncation) {
  const std::vector<ItemId> seq = {1, 2, 3};
  const auto kept = truncate_recent(seq, 2);
  EXPECT_EQ(std::vector<ItemId>(kept.begin(), kept.end()), (std::vector<ItemId>{2, 3}));
}

TEST(Batches, TargetsAlignAndNegativesExcludeTarget) {
  Rng rng(2);
  SynthConfig cfg;
  cfg.n_users = 150;
  cfg.n_items = 40;
  const SplitDataset s = leave_one_out_split(synthesize_dataset(cfg, rng).dataset);
  BatchOptions opt;
  opt.max_len = 6;
  opt.batch_size = 32;
  opt.n_neg = 3;
  for (std::uint64_t epoch = 0; epoch < 3; ++epoch) {
    BatchStream bs(s, opt, epoch);
    while (auto b = bs.next()) {
      EXPECT_EQ(b->max_len, 6);
      for (int r = 0; r < b->batch_size; ++r) {
        const SplitUser& u = s.users[static_cast<std::size_t>(b->users[static_cast<std::size_t>(r)])];
        const auto inputs = truncate_recent(u.train_input(), 6);
        const auto targets = truncate_recent(u.train_targets(), 6);
        const int off = 6 - static_cast<int>(inputs.size());
        for (int t = 0; t < 6; ++t) {
          if (t < off) {
            EXPECT_FALSE(b->valid(r, t));
            EXPECT_EQ(b->item(r, t), b->pad);
            continue;
          }
          ASSERT_TRUE(b->valid(r, t));
          EXPECT_EQ(b->item(r, t), inputs[static_cast<std::size_t>(t - off)]);
          EXPECT_EQ(b->target(r, t), targets[static_cast<std::size_t>(t - off)]);
          for (int k = 0; k < 3; ++k) {
            EXPECT_NE(b->negative(r, t, k), b->target(r, t));
            EXPECT_GE(b->negative(r, t, k), 0);
            EXPECT_LT(b->negative(r, t, k), s.n_items);
          }
        }
      }
    }
  }
}

TEST(Batches, SameSeedSameStream) {
  Rng rng(4);
  SynthConfig cfg;
  cfg.n_users = 100;
  cfg.n_items = 30;
  const SplitDataset s = leave_one_out_split(synthesize_dataset(cfg, rng).dataset);
  BatchOptions opt;
  opt.batch_size = 16;
  BatchStream a(s, opt, 9), b(s, opt, 9);
  for (;;) {
    auto x = a.next();
    auto y = b.next();
    ASSERT_EQ(x.has_value(), y.has_value());
    if (!x) break;
    EXPECT_EQ(x->sequences, y->sequences);
    EXPECT_EQ(x->negatives, y->negatives);
    EXPECT_EQ(x->users, y->users);
  }
}

TEST(Batches, InputBatchIsLeftPadded) {
  const std::vector<ItemId> a = {4, 5, 6}, b = {7};
  const std::vector<std::span<const ItemId>> in = {a, b};
  const Batch batch = make_input_batch(in, 4, 99);
  EXPECT_EQ(batch.sequences, (std::vector<ItemId>{99, 4, 5, 6, 99, 99, 99, 7}));
  EXPECT_EQ(batch.last_valid_pos, (std::vector<int>{3, 3}));
}

TEST(Synthetic, SameSeedSameDataset) {
  SynthConfig cfg;
  cfg.n_users = 100;
  cfg.n_items = 50;
  Rng r1(8), r2(8);
  const SyntheticData a = synthesize_dataset(cfg, r1), b = synthesize_dataset(cfg, r2);
  ASSERT_EQ(a.dataset.users.size(), b.dataset.users.size());
  for (std::size_t u = 0; u < a.dataset.users.size(); ++u) EXPECT_EQ(a.dataset.users[u].items, b.dataset.users[u].items);
  EXPECT_TRUE(a.semantic.values == b.semantic.values);
  EXPECT_EQ(a.cluster, b.cluster);
}

TEST(Synthetic, NoiseFreeClustersShareVectors) {
  SynthConfig cfg;
  cfg.n_users = 50;
  cfg.n_items = 60;
  cfg.noise = 0.0;
  Rng rng(1);
  const SyntheticData sd = synthesize_dataset(cfg, rng);
  for (int i = 0; i < cfg.n_items; ++i) {
    for (int j = i + 1; j < cfg.n_items; ++j) {
      if (sd.cluster[static_cast<std::size_t>(i)] == sd.cluster[static_cast<std::size_t>(j)]) {
        EXPECT_TRUE(sd.semantic.values.row(i) == sd.semantic.values.row(j));
      }
    }
  }
}

TEST(Synthetic, SingleClusterStaysInNoiseBall) {
  SynthConfig cfg;
  cfg.n_users = 50;
  cfg.n_items = 40;
  cfg.n_clusters = 1;
  cfg.noise = 0.05;
  Rng rng(1);
  const SyntheticData sd = synthesize_dataset(cfg, rng);
  const Eigen::RowVectorXf mean = sd.semantic.values.colwise().mean();
  const double centroid_norm = mean.norm();
  for (int i = 0; i < cfg.n_items; ++i) {
    EXPECT_LT((sd.semantic.values.row(i) - mean).norm(), 0.5 * centroid_norm);
  }
}

TEST(Synthetic, SequencesRespectLimits) {
  SynthConfig cfg;
  cfg.n_users = 300;
  cfg.n_items = 80;
  cfg.max_seq_len = 20;
  Rng rng(12);
  const SyntheticData sd = synthesize_dataset(cfg, rng);
  EXPECT_EQ(sd.semantic.count(), 80);
  EXPECT_EQ(sd.semantic.dim(), cfg.d_sem);
  double total = 0;
  for (const auto& u : sd.dataset.users) {
    EXPECT_GE(u.items.size(), 3u);
    EXPECT_LE(u.items.size(), 20u);
    total += static_cast<double>(u.items.size());
  }
  EXPECT_NEAR(total / static_cast<double>(sd.dataset.users.size()), cfg.avg_len, 3.0);
  SynthConfig bad = cfg;
  bad.n_items = 0;
  EXPECT_THROW(synthesize_dataset(bad, rng), Error);
}

}  // namespace
}  // namespace h2rec
