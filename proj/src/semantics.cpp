#include "h2rec/semantics.hpp"

#include "h2rec/io.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <sstream>

namespace h2rec {

namespace {
constexpr char kSembMagic[4] = {'S', 'E', 'M', 'B'};
}

SemanticMatrix load_semantic_matrix(const std::filesystem::path& path) {
  auto is = io::open_in(path, true);
  const std::string magic = io::read_bytes(is, 4);
  if (magic != std::string_view(kSembMagic, 4)) throw Error(path.string() + ": bad magic, expected SEMB");
  const std::uint32_t count = io::read_u32(is);
  const std::uint32_t dim = io::read_u32(is);
  if (dim == 0) throw Error(path.string() + ": zero dimension");
  SemanticMatrix m;
  m.values.resize(count, dim);
  io::read_f32s(is, m.values.data(), static_cast<std::size_t>(count) * dim);
  if (is.peek() != std::char_traits<char>::eof()) throw Error(path.string() + ": trailing bytes after matrix data");
  if (!m.values.allFinite()) throw Error(path.string() + ": NaN or Inf entries");
  return m;
}

SemanticMatrix load_semantic_matrix(const std::filesystem::path& path, std::int64_t catalog_size) {
  SemanticMatrix m = load_semantic_matrix(path);
  if (m.count() != catalog_size) {
    throw Error(path.string() + ": has " + std::to_string(m.count()) + " rows but the catalog has " +
                std::to_string(catalog_size) + " items");
  }
  return m;
}

void save_semantic_matrix(const SemanticMatrix& m, const std::filesystem::path& path) {
  if (!m.values.allFinite()) throw Error("refusing to save a semantic matrix with NaN/Inf");
  auto os = io::open_out(path, true);
  io::write_bytes(os, std::string_view(kSembMagic, 4));
  io::write_u32(os, static_cast<std::uint32_t>(m.count()));
  io::write_u32(os, static_cast<std::uint32_t>(m.dim()));
  io::write_f32s(os, m.values.data(), static_cast<std::size_t>(m.values.size()));
}

ReducedMatrix reduce_dims(const SemanticMatrix& m, int d) {
  if (d < 1 || d > m.dim()) {
    throw Error("reduce_dims: d=" + std::to_string(d) + " outside [1, " + std::to_string(m.dim()) + "]");
  }
  if (m.count() < 1) throw Error("reduce_dims: empty matrix");
  const MatD x = m.values.cast<double>();
  ReducedMatrix out;
  Eigen::RowVectorXd mu = x.colwise().mean();
  out.mean.assign(mu.data(), mu.data() + mu.size());
  const MatD centered = x.rowwise() - mu;

  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  out.singular_values.assign(sv.data(), sv.data() + sv.size());
  double total = 0.0;
  for (double s : out.singular_values) total += s * s;

  const Eigen::MatrixXd& v = svd.matrixV();
  out.basis.resize(m.dim(), d);
  for (int k = 0; k < d; ++k) {
    Eigen::VectorXd col = k < v.cols() ? Eigen::VectorXd(v.col(k)) : Eigen::VectorXd::Zero(m.dim());
    Eigen::Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col(arg) < 0) col = -col;
    out.basis.col(k) = col;
    const double s = k < sv.size() ? sv(k) : 0.0;
    out.explained_variance.push_back(total > 0.0 ? s * s / total : 0.0);
  }
  const double smax = sv.size() > 0 ? sv(0) : 0.0;
  out.scale = smax > 0.0 ? smax / std::sqrt(static_cast<double>(m.count())) : 1.0;
  const MatD proj = (centered * out.basis) / out.scale;
  out.values = proj.cast<float>();
  return out;
}

std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::kVq:
      return "vq";
    case Mechanism::kPq:
      return "pq";
    case Mechanism::kRq:
      return "rq";
  }
  return "?";
}

Mechanism parse_mechanism(std::string_view s) {
  if (s == "vq") return Mechanism::kVq;
  if (s == "pq") return Mechanism::kPq;
  if (s == "rq") return Mechanism::kRq;
  throw Error("unknown quantization mechanism '" + std::string(s) + "' (expected vq|pq|rq)");
}

void save_sids(const SidAssignment& a, const std::filesystem::path& path) {
  auto os = io::open_out(path);
  os << "#L=" << a.levels << " K=" << a.codebook_size << " mech=" << to_string(a.mechanism) << '\n';
  for (std::size_t i = 0; i < a.codes.size(); ++i) {
    os << i;
    for (auto c : a.codes[i]) os << '\t' << c;
    os << '\n';
  }
}

SidAssignment load_sids(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  const std::string src = path.string();
  std::string line;
  if (!std::getline(is, line) || line.empty()) throw Error(src + ": no items");
  SidAssignment a;
  {
    if (line.back() == '\r') line.pop_back();
    if (line.rfind("#L=", 0) != 0) throw Error(src + ":1: expected header '#L=<L> K=<K> mech=<m>'");
    std::istringstream hs(line.substr(1));
    std::string tok;
    bool have_l = false, have_k = false, have_m = false;
    while (hs >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw Error(src + ":1: malformed header token '" + tok + "'");
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "L") {
        a.levels = static_cast<int>(io::parse_int(val));
        have_l = true;
      } else if (key == "K") {
        a.codebook_size = static_cast<int>(io::parse_int(val));
        have_k = true;
      } else if (key == "mech") {
        a.mechanism = parse_mechanism(val);
        have_m = true;
      } else {
        throw Error(src + ":1: unknown header key '" + key + "'");
      }
    }
    if (!have_l || !have_k || !have_m || a.levels < 1 || a.codebook_size < 1) {
      throw Error(src + ":1: header must declare positive L, K and mech");
    }
  }
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = io::split(line, '\t');
    const std::string where = src + ":" + std::to_string(lineno) + ": ";
    if (static_cast<int>(fields.size()) != a.levels + 1) {
      throw Error(where + "expected " + std::to_string(a.levels) + " codes, got " +
                  std::to_string(static_cast<int>(fields.size()) - 1));
    }
    const auto item = io::parse_int(fields[0]);
    if (item != static_cast<std::int64_t>(a.codes.size())) {
      throw Error(where + "items must be listed densely in order, expected " + std::to_string(a.codes.size()));
    }
    SemanticId sid;
    for (int l = 0; l < a.levels; ++l) {
      const auto c = io::parse_int(fields[static_cast<std::size_t>(l) + 1]);
      if (c < 0 || c >= a.codebook_size) {
        throw Error(where + "code " + std::to_string(c) + " outside [0, " + std::to_string(a.codebook_size) + ")");
      }
      sid.push_back(static_cast<std::int32_t>(c));
    }
    a.codes.push_back(std::move(sid));
  }
  if (a.codes.empty()) throw Error(src + ": no items");
  return a;
}

}  // namespace h2rec
