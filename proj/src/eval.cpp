#include "h2rec/eval.hpp"

#include "h2rec/io.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace h2rec {

int rank_of_target(std::span<const double> scores, std::span<const ItemId> candidates, ItemId target) {
  if (scores.size() != candidates.size()) throw Error("rank_of_target: score/candidate count mismatch");
  std::size_t t = candidates.size();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i] == target) {
      t = i;
      break;
    }
  }
  if (t == candidates.size()) throw Error("rank_of_target: target " + std::to_string(target) + " is not a candidate");
  int rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != t && scores[i] >= scores[t]) ++rank;
  }
  return rank;
}

double hit_at_k(int rank, int k) { return rank >= 1 && rank <= k ? 1.0 : 0.0; }

double ndcg_at_k(int rank, int k) {
  return rank >= 1 && rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

const GroupMetrics& MetricsReport::group(const std::string& name) const {
  for (const auto& g : groups) {
    if (g.name == name) return g;
  }
  throw Error("metrics report has no group '" + name + "'");
}

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["k"] = k;
  j["protocol"] = n_negatives > 0 ? std::to_string(n_negatives) + " sampled negatives" : std::string("full catalog");
  j["n_negatives"] = n_negatives;
  j["seed"] = seed;
  nlohmann::ordered_json gs = nlohmann::ordered_json::object();
  for (const auto& g : groups) {
    gs[g.name] = {{"hit", g.hit}, {"ndcg", g.ndcg}, {"n", g.n}};
  }
  j["groups"] = gs;
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    r.k = j.at("k").get<int>();
    r.n_negatives = j.at("n_negatives").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    // Iteration order of a plain json object is sorted; rebuild canonical order.
    std::vector<std::string> names;
    for (auto it = j.at("groups").begin(); it != j.at("groups").end(); ++it) names.push_back(it.key());
    std::vector<std::string> order = {"overall", "head", "tail"};
    std::vector<std::string> buckets;
    for (const auto& n : names) {
      if (n.rfind("bucket", 0) == 0) buckets.push_back(n);
    }
    std::sort(buckets.begin(), buckets.end(), [](const std::string& a, const std::string& b) {
      return std::stoi(a.substr(6)) < std::stoi(b.substr(6));
    });
    order.insert(order.end(), buckets.begin(), buckets.end());
    for (const auto& n : order) {
      const auto& g = j.at("groups").at(n);
      r.groups.push_back({n, g.at("hit").get<double>(), g.at("ndcg").get<double>(), g.at("n").get<std::int64_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed metrics report: ") + e.what());
  }
  return r;
}

namespace {

std::vector<ItemId> sample_negatives(const std::vector<ItemId>& history_sorted, std::int32_t n_items, int n,
                                     Rng& rng) {
  const auto allowed = static_cast<std::int64_t>(n_items) - static_cast<std::int64_t>(history_sorted.size());
  if (allowed < n) {
    throw Error("cannot draw " + std::to_string(n) + " negatives: only " + std::to_string(allowed) +
                " items lie outside the user's history");
  }
  std::uniform_int_distribution<ItemId> pick(0, n_items - 1);
  std::vector<ItemId> out;
  std::vector<ItemId> taken;  // sorted
  while (static_cast<int>(out.size()) < n) {
    const ItemId c = pick(rng);
    if (std::binary_search(history_sorted.begin(), history_sorted.end(), c)) continue;
    auto pos = std::lower_bound(taken.begin(), taken.end(), c);
    if (pos != taken.end() && *pos == c) continue;
    taken.insert(pos, c);
    out.push_back(c);
  }
  return out;
}

}  // namespace

MetricsReport evaluate(const SplitDataset& split, const PopularityPartition& part, const Scorer& scorer,
                       const EvalOptions& opt) {
  if (opt.k < 1) throw Error("evaluate: k must be positive");
  if (static_cast<std::int32_t>(part.bucket.size()) != split.n_items) throw Error("evaluate: partition/catalog mismatch");
  MetricsReport rep;
  rep.k = opt.k;
  rep.n_negatives = std::max(0, opt.n_negatives);
  rep.seed = opt.seed;
  rep.groups.push_back({"overall", 0, 0, 0});
  rep.groups.push_back({"head", 0, 0, 0});
  rep.groups.push_back({"tail", 0, 0, 0});
  for (int b = 0; b < part.n_buckets; ++b) rep.groups.push_back({"bucket" + std::to_string(b + 1), 0, 0, 0});

  Rng rng(opt.seed);
  const std::size_t bs = static_cast<std::size_t>(std::max(1, opt.batch_size));
  for (std::size_t start = 0; start < split.users.size(); start += bs) {
    const std::size_t end = std::min(split.users.size(), start + bs);
    std::vector<std::span<const ItemId>> inputs;
    std::vector<std::vector<ItemId>> cands;
    std::vector<ItemId> targets;
    for (std::size_t u = start; u < end; ++u) {
      const SplitUser& su = split.users[u];
      const ItemId target = opt.validation ? su.valid_target() : su.test_target();
      inputs.push_back(opt.validation ? su.valid_input() : su.test_input());
      std::vector<ItemId> hist = su.history;
      std::sort(hist.begin(), hist.end());
      hist.erase(std::unique(hist.begin(), hist.end()), hist.end());
      std::vector<ItemId> c{target};
      if (opt.n_negatives > 0) {
        auto neg = sample_negatives(hist, split.n_items, opt.n_negatives, rng);
        c.insert(c.end(), neg.begin(), neg.end());
      } else {
        for (ItemId i = 0; i < split.n_items; ++i) {
          if (!std::binary_search(hist.begin(), hist.end(), i)) c.push_back(i);
        }
      }
      cands.push_back(std::move(c));
      targets.push_back(target);
    }
    const auto scores = scorer(std::span<const std::span<const ItemId>>(inputs), cands);
    if (scores.size() != cands.size()) throw Error("evaluate: scorer returned the wrong number of lists");
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const int rank = rank_of_target(scores[i], cands[i], targets[i]);
      for (double s : scores[i]) {
        if (!std::isfinite(s)) throw Error("evaluate: scorer produced a non-finite score");
      }
      const double h = hit_at_k(rank, opt.k), n = ndcg_at_k(rank, opt.k);
      const auto item = static_cast<std::size_t>(targets[i]);
      auto bump = [&](GroupMetrics& g) {
        g.hit += h;
        g.ndcg += n;
        ++g.n;
      };
      bump(rep.groups[0]);
      bump(rep.groups[part.is_head[item] ? 1 : 2]);
      bump(rep.groups[3 + static_cast<std::size_t>(part.bucket[item])]);
    }
  }
  for (auto& g : rep.groups) {
    if (g.n > 0) {
      g.hit /= static_cast<double>(g.n);
      g.ndcg /= static_cast<double>(g.n);
    }
  }
  return rep;
}

const GroupSummary& Breakdown::group(const std::string& name) const {
  for (const auto& g : groups) {
    if (g.name == name) return g;
  }
  throw Error("breakdown has no group '" + name + "'");
}

Breakdown group_breakdown(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw Error("group_breakdown: needs at least one report");
  Breakdown b;
  for (const auto& r : reports) b.seeds.push_back(r.seed);
  const auto m = static_cast<double>(reports.size());
  for (std::size_t gi = 0; gi < reports[0].groups.size(); ++gi) {
    GroupSummary s;
    s.name = reports[0].groups[gi].name;
    s.n = reports[0].groups[gi].n;
    std::vector<double> hs, ns;
    for (const auto& r : reports) {
      if (r.groups.size() != reports[0].groups.size() || r.groups[gi].name != s.name) {
        throw Error("group_breakdown: reports have different group layouts");
      }
      hs.push_back(r.groups[gi].hit);
      ns.push_back(r.groups[gi].ndcg);
    }
    auto stats = [m](const std::vector<double>& v, double& mean, double& sd) {
      mean = 0.0;
      for (double x : v) mean += x;
      mean /= m;
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      sd = v.size() > 1 ? std::sqrt(ss / (m - 1.0)) : 0.0;
    };
    stats(hs, s.hit_mean, s.hit_std);
    stats(ns, s.ndcg_mean, s.ndcg_std);
    b.groups.push_back(s);
  }
  return b;
}

std::string Breakdown::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "group,n,hit_mean,hit_std,ndcg_mean,ndcg_std\n";
  for (const auto& g : groups) {
    os << g.name << ',' << g.n << ',' << g.hit_mean << ',' << g.hit_std << ',' << g.ndcg_mean << ',' << g.ndcg_std
       << '\n';
  }
  return os.str();
}

nlohmann::ordered_json Breakdown::to_json() const {
  nlohmann::ordered_json j;
  j["seeds"] = seeds;
  nlohmann::ordered_json gs = nlohmann::ordered_json::object();
  for (const auto& g : groups) {
    gs[g.name] = {{"n", g.n},
                  {"hit_mean", g.hit_mean},
                  {"hit_std", g.hit_std},
                  {"ndcg_mean", g.ndcg_mean},
                  {"ndcg_std", g.ndcg_std}};
  }
  j["groups"] = gs;
  return j;
}

std::string format_table(const Breakdown& b, int k) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(9) << "group" << std::right << std::setw(18) << ("H@" + std::to_string(k))
     << std::setw(18) << ("N@" + std::to_string(k)) << std::setw(8) << "n" << '\n';
  for (const char* name : {"overall", "tail", "head"}) {
    const auto& g = b.group(name);
    std::ostringstream h, n;
    h << std::fixed << std::setprecision(4) << g.hit_mean << " +- " << g.hit_std;
    n << std::fixed << std::setprecision(4) << g.ndcg_mean << " +- " << g.ndcg_std;
    os << std::left << std::setw(9) << name << std::right << std::setw(18) << h.str() << std::setw(18) << n.str()
       << std::setw(8) << g.n << '\n';
  }
  return os.str();
}

void write_report(const MetricsReport& r, const std::filesystem::path& json_path,
                  const std::filesystem::path& csv_path) {
  {
    auto os = io::open_out(json_path);
    os << r.to_json().dump(2) << '\n';
  }
  auto os = io::open_out(csv_path);
  os << std::setprecision(9) << "group,n,hit,ndcg\n";
  for (const auto& g : r.groups) os << g.name << ',' << g.n << ',' << g.hit << ',' << g.ndcg << '\n';
}

}  // namespace h2rec
