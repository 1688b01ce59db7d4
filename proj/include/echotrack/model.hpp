#pragma once

#include <cstdint>
#include <vector>

#include "echotrack/backbone.hpp"
#include "echotrack/correlation.hpp"
#include "echotrack/refiner.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

struct ModelConfig {
  BackboneConfig backbone;
  CorrConfig corr;
  RefinerConfig refiner;

  void validate() const;
};

struct TrackResult {
  Tensor initial;                  // [T x N x 2], queries broadcast over time
  std::vector<Tensor> iterations;  // one state per refinement iteration
  std::vector<Tensor> updates;     // the residual added at each iteration

  const Tensor& final_state() const { return iterations.empty() ? initial : iterations.back(); }
};

/// Backbone, correlation tokens and refiner bound to one parameter store.
/// Modules hold handles into the store, so a Tracker is not copyable.
class Tracker {
 public:
  Tracker(const ModelConfig& cfg, std::uint64_t seed);
  Tracker(const Tracker&) = delete;
  Tracker& operator=(const Tracker&) = delete;

  /// video [T x H x W x C], queries [N x 2] (x, y) in pixels on frame t_q.
  TrackResult track(const Tensor& video, const Tensor& queries, std::size_t t_q) const {
    return track(video, queries, t_q, cfg_.refiner.iterations);
  }
  TrackResult track(const Tensor& video, const Tensor& queries, std::size_t t_q,
                    std::size_t iterations) const;

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const ModelConfig& config() const { return cfg_; }
  const Backbone& backbone() const { return backbone_; }
  const CorrelationTokens& correlation() const { return corr_; }
  const Refiner& refiner() const { return refiner_; }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  Rng rng_;
  Backbone backbone_;
  CorrelationTokens corr_;
  Refiner refiner_;
};

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
