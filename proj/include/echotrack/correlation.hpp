#pragma once

#include <array>

#include "echotrack/backbone.hpp"
#include "echotrack/layers.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

struct CorrConfig {
  std::size_t window = 9;  // r
  std::size_t dim = 32;    // D, tokens are 3D wide

  static constexpr std::array<std::size_t, 3> levels{1, 2, 4};

  void validate() const;
  std::size_t token_width() const { return levels.size() * dim; }
};

/// Standardizes every channel over the spatial extent of each frame:
/// [T x h x w x d] -> same shape, zero mean and unit variance per (t, channel).
/// The variance guard is 1e-10, small enough that rescaling a channel does not
/// move the result.
Tensor normalize_level(const Tensor& f);

/// r x r windows at one-cell spacing around centers given in input pixels
/// (divided by `stride` to reach level cells), bilinear with zero outside.
///   map [h x w x d],     centers [N x 2]     -> [N x r x r x d]
///   map [T x h x w x d], centers [T x N x 2] -> [T x N x r x r x d]
Tensor sample_windows(const Tensor& map, const Tensor& centers, std::size_t stride, std::size_t r);

/// q [N x r x r x d], f [T x N x r x r x d] -> [T x N x r x r x r x r],
/// entry (t,n,i,j,u,v) = cos(q[n,i,j], f[t,n,u,v]) with a 1e-8 norm guard.
Tensor cosine_corr4d(const Tensor& q, const Tensor& f);

/// flatten(r^4) -> linear(4D) -> relu -> linear(D), applied per (t, n).
struct CorrEncoder {
  Dense hidden, output;

  CorrEncoder() = default;
  CorrEncoder(ParamStore& store, const std::string& name, std::size_t r, std::size_t dim, Rng& rng);
  /// c [T x N x r x r x r x r] -> [T x N x D]
  Tensor operator()(const Tensor& c) const;
};

/// Per-video state that does not change across refinement iterations.
struct CorrContext {
  std::array<Tensor, 3> maps;     // normalized levels 1, 2, 4
  std::array<Tensor, 3> queries;  // [N x r x r x d] query windows per level
  std::array<std::size_t, 3> strides{};
};

class CorrelationTokens {
 public:
  CorrelationTokens(ParamStore& store, const CorrConfig& cfg, Rng& rng);

  /// queries [N x 2] in input pixels, sampled on frame t_q.
  CorrContext prepare(const FeaturePyramid& pyramid, const Tensor& queries, std::size_t t_q) const;
  /// trajectories [T x N x 2] -> tokens [T x N x 3D]
  Tensor operator()(const CorrContext& ctx, const Tensor& trajectories) const;

  Tensor build(const FeaturePyramid& pyramid, const Tensor& queries, std::size_t t_q,
               const Tensor& trajectories) const {
    return (*this)(prepare(pyramid, queries, t_q), trajectories);
  }
  const CorrConfig& config() const { return cfg_; }

 private:
  CorrConfig cfg_;
  std::array<CorrEncoder, 3> encoders_;
};

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
