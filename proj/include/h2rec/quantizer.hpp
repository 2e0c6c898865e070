#pragma once

#include "h2rec/autodiff.hpp"
#include "h2rec/data.hpp"
#include "h2rec/semantics.hpp"

#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

namespace h2rec {

/// Per-level codebooks. For pq each level owns a contiguous slice of the
/// input of width dim; for vq there is a single level over the whole input.
struct Codebooks {
  Mechanism mechanism = Mechanism::kRq;
  int levels = 0;
  int size = 0;  // K
  int dim = 0;   // d_code
  std::vector<MatF> books;  // levels x (K x dim)
};

struct RqVaeConfig {
  int d_code = 32;
  int hidden = 128;
  double beta = 0.25;  // commitment weight
  int epochs = 200;
  double lr = 1e-3;
  int batch_size = 256;
  int kmeans_iters = 25;
  /// Encoder/decoder start as exact identities (needs d_code == d_in and
  /// hidden >= 2 * d_in).
  bool identity_init = false;
};

/// Encoder (d_in -> hidden -> d_code) and decoder (d_code -> hidden -> d_in)
/// MLPs with ReLU, plus residual codebooks. Parameter names:
/// enc.w1 enc.b1 enc.w2 enc.b2 dec.w1 dec.b1 dec.w2 dec.b2 codebook.<l>.
struct RqVaeModel {
  RqVaeConfig cfg;
  int d_in = 0;
  int levels = 0;
  int size = 0;
  ParamStore<float> params;

  Codebooks codebooks() const;
  /// Encoder output for every row.
  MatF encode(const MatF& x) const;
};

struct RqLoss {
  double recon = 0.0;
  double codebook = 0.0;
  double commit = 0.0;  // unweighted
  double total = 0.0;   // recon + codebook + beta * commit
};

struct RqTrainLog {
  std::vector<RqLoss> epochs;
  std::vector<int> dead_codes_reset;  // per epoch, summed over levels
};

/// Output of one differentiable RQ-VAE pass.
template <typename S>
struct RqForward {
  ad::Var<S> z;
  ad::Var<S> recon;
  ad::Var<S> recon_loss;
  ad::Var<S> codebook_loss;
  ad::Var<S> commit_loss;
  ad::Var<S> total;
  std::vector<SemanticId> codes;
};

/// Differentiable forward pass with straight-through quantization. When
/// frozen_codes is given those codes are used instead of nearest-centroid
/// search.
template <typename S>
RqForward<S> rqvae_forward(ad::Tape<S>& tape, ParamStore<S>& params, ad::Var<S> x, int levels,
                           double beta, const std::vector<SemanticId>* frozen_codes = nullptr);

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are
/// re-seeded to the point farthest from its assigned centroid.
MatF kmeans(const MatF& points, int k, int iters, Rng& rng);

/// Index of the nearest row of book (squared L2), ties to the lower index.
int nearest_code(const float* x, const MatF& book);

/// Greedy residual quantization: returns the codes and the final residual.
std::pair<SemanticId, std::vector<float>> quantize_residual(std::span<const float> x, const Codebooks& cb);

Codebooks train_vq(const MatF& x, int k, int iters, Rng& rng);
Codebooks train_pq(const MatF& x, int levels, int k, int iters, Rng& rng);
RqVaeModel init_rqvae(int d_in, int levels, int k, const RqVaeConfig& cfg, Rng& rng);
RqVaeModel train_rqvae(const MatF& x, int levels, int k, const RqVaeConfig& cfg, Rng& rng,
                       RqTrainLog* log = nullptr);
/// Loss decomposition of the model on x with nearest-centroid codes.
RqLoss evaluate_rqvae(const RqVaeModel& model, const MatF& x);

/// A trained quantizer of any mechanism; rq carries its encoder.
struct Quantizer {
  Codebooks codebooks;
  std::optional<RqVaeModel> rqvae;
};

/// Semantic IDs for every row of x. Collisions are kept as-is.
/// threads <= 0 reads H2REC_THREADS (default 1).
SidAssignment assign_sids(const Quantizer& q, const MatF& x, int threads = 0);

/// Fraction of items whose full tuple is shared with at least one other.
double collision_rate(const SidAssignment& a);
/// Distinct used tuples / K^L.
double utilization_rate(const SidAssignment& a);
/// Item count / K^L (the capacity-fill variant).
double item_utilization_rate(const SidAssignment& a);
std::size_t distinct_tuples(const SidAssignment& a);

/// `SCBK` magic, u8 mechanism, u32 L, u32 K, u32 d_code, L*K*d_code f32;
/// rq appends an `SRQW` section with the encoder/decoder weights.
void save_quantizer(const Quantizer& q, const std::filesystem::path& path);
Quantizer load_quantizer(const std::filesystem::path& path);

int threads_from_env();

}  // namespace h2rec
