#include "echotrack/model.hpp"

#include <cmath>
#include <stdexcept>

namespace echotrack {
inline namespace ECHOTRACK_ABI {

void ModelConfig::validate() const {
  backbone.validate();
  corr.validate();
  refiner.validate();
}

Tracker::Tracker(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      rng_(seed),
      backbone_(store_, cfg_.backbone, rng_),
      corr_(store_, cfg_.corr, rng_),
      refiner_(store_, cfg_.refiner, cfg_.corr.token_width(), rng_) {}

TrackResult Tracker::track(const Tensor& video, const Tensor& queries, std::size_t t_q,
                           std::size_t iterations) const {
  if (video.rank() != 4 || video.extent(0) == 0) {
    throw std::invalid_argument("track: video must be [T,H,W,C] with T >= 1, got " + to_string(video.shape()));
  }
  if (queries.rank() != 2 || queries.extent(1) != 2 || queries.extent(0) == 0) {
    throw std::invalid_argument("track: queries must be a non-empty [N,2], got " + to_string(queries.shape()));
  }
  const std::size_t frames = video.extent(0), n = queries.extent(0);
  if (t_q >= frames) throw std::invalid_argument("track: query frame " + std::to_string(t_q) + " out of range");
  const auto q = queries.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = q[2 * i], y = q[2 * i + 1];
    if (!std::isfinite(x) || !std::isfinite(y) || x < 0 || y < 0 || x > static_cast<double>(video.extent(2) - 1) ||
        y > static_cast<double>(video.extent(1) - 1)) {
      throw std::invalid_argument("track: query " + std::to_string(i) + " lies outside the frame");
    }
  }

  TrackResult out;
  out.initial = ops::repeat_leading(queries, frames);
  if (iterations == 0) return out;

  auto pyramid = backbone_(video);
  auto ctx = corr_.prepare(pyramid, queries, t_q);
  NeighborIndex nbr = knn(queries.detach(), cfg_.refiner.neighbors);
  Tensor state = out.initial;
  for (std::size_t it = 0; it < iterations; ++it) {
    if (cfg_.refiner.recompute_neighbors && it > 0) {
      nbr = knn(ops::reshape(ops::index_select(state.detach(), 0, std::vector<std::size_t>{t_q}), {n, 2}),
                cfg_.refiner.neighbors);
    }
    auto tokens = corr_(ctx, state);
    auto delta = refiner_(tokens, ops::sub(state, out.initial), nbr);
    state = ops::add(state, delta);
    out.updates.push_back(delta);
    out.iterations.push_back(state);
  }
  return out;
}

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
