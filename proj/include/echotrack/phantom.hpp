#pragma once

// Synthetic ring-shaped "myocardium" with speckle texture that moves with the
// tissue. The deformation is a similarity about the ring center plus a
// translation toward the apex, so trajectories and strain are closed-form.

#include <cstdint>
#include <vector>

#include "echotrack/tensor.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

struct PhantomSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t frames = 16;
  std::size_t points = 16;
  double amplitude = 0.18;  // peak fractional shortening a
  double inner_radius = 14;
  double outer_radius = 26;
  double grain = 1.5;   // speckle low-pass sigma, pixels
  double noise = 0.02;  // additive Gaussian sigma
  double span_degrees = 70;  // points cover [-span, span] around the apex
  bool translate = true;
  double center_dx = 0;  // ring center relative to the image center
  double center_dy = 0;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument.
  void validate() const;
  /// a * R_outer * pi / T: the largest allowed L1 step of any point between frames.
  double displacement_bound() const;
};

struct PhantomSample {
  Tensor video;         // [T x H x W x 1] in [0, 1]
  Tensor trajectories;  // [T x N x 2] ground truth (x, y)
  Tensor queries;       // [N x 2] == trajectories[0]
  std::size_t query_frame = 0;
  std::vector<std::size_t> wall_order;  // polyline order of the points
};

/// s(t) = 1 - a sin^2(pi t / (T - 1)); 1 when T == 1.
double phantom_scale(const PhantomSpec& spec, std::size_t t);
/// Apex-ward shift a * (R_inner / 2) * sin^2(pi t / (T - 1)), 0 when translate is off.
double phantom_shift(const PhantomSpec& spec, std::size_t t);

/// Analytic trajectories only (no image synthesis, no locality check).
Tensor phantom_trajectories(const PhantomSpec& spec);

/// Full sample. Uses `seed` for texture and noise; throws if the spec is
/// invalid or the trajectories break the displacement bound.
PhantomSample generate(const PhantomSpec& spec, std::uint64_t seed);
inline PhantomSample generate(const PhantomSpec& spec) { return generate(spec, spec.seed); }

/// Largest L1 step between consecutive frames over all points of [T x N x 2].
double max_step(const Tensor& trajectories);

/// Per-sample variation for datasets: amplitude drawn from [0.5 a, 1.2 a]
/// (capped at 0.3) and the ring center jittered by up to +-2 px, all from
/// (base.seed, index). The returned spec carries its own seed.
PhantomSpec dataset_spec(const PhantomSpec& base, std::size_t index);

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
