#pragma once

#include "h2rec/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace h2rec {

/// Dense per-item semantic embeddings, one row per item.
struct SemanticMatrix {
  MatF values;

  std::int64_t count() const { return values.rows(); }
  std::int64_t dim() const { return values.cols(); }
};

/// Output of reduce_dims: projected rows plus the spectrum that produced them.
struct ReducedMatrix {
  MatF values;
  /// Singular values of the centered input, descending (all of them).
  std::vector<double> singular_values;
  /// Fraction of total variance explained by each retained component.
  std::vector<double> explained_variance;
  /// d_llm x d projection basis (right singular vectors, sign-normalized).
  MatD basis;
  /// Per-column mean subtracted before projection.
  std::vector<double> mean;
  /// Divisor applied after projection (largest singular value / sqrt(rows)).
  double scale = 1.0;
};

/// `SEMB` binary: magic, u32 count, u32 dim, count*dim f32, row-major.
SemanticMatrix load_semantic_matrix(const std::filesystem::path& path);
/// Same, and the row count must equal the catalog size.
SemanticMatrix load_semantic_matrix(const std::filesystem::path& path, std::int64_t catalog_size);
void save_semantic_matrix(const SemanticMatrix& m, const std::filesystem::path& path);

/// Mean-centered truncated SVD onto the top-d right singular directions,
/// divided by sigma_max / sqrt(rows) so no column has std above 1.
/// Each basis vector's largest-magnitude entry is made positive.
ReducedMatrix reduce_dims(const SemanticMatrix& m, int d);

enum class Mechanism : std::uint8_t { kVq = 0, kPq = 1, kRq = 2 };

std::string to_string(Mechanism m);
Mechanism parse_mechanism(std::string_view s);

/// L-tuple of code indices, each in [0, K).
using SemanticId = std::vector<std::int32_t>;

struct SidAssignment {
  Mechanism mechanism = Mechanism::kRq;
  int levels = 0;
  int codebook_size = 0;
  std::vector<SemanticId> codes;  // one per item

  std::size_t size() const { return codes.size(); }
};

/// TSV with header `#L=<L> K=<K> mech=<m>` then `item<TAB>c1<TAB>...<TAB>cL`.
void save_sids(const SidAssignment& a, const std::filesystem::path& path);
SidAssignment load_sids(const std::filesystem::path& path);

}  // namespace h2rec
