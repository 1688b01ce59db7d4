#pragma once

#include <array>
#include <string>
#include <vector>

#include "echotrack/layers.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

enum class BackboneVariant { itsm, btsm, fuse_add, fuse_cat, plain };

std::string to_string(BackboneVariant v);
/// Accepts "iTSM", "bTSM", "fuse-add", "fuse-cat", "plain" (case-insensitive).
BackboneVariant parse_backbone_variant(const std::string& name);

struct BackboneConfig {
  BackboneVariant variant = BackboneVariant::itsm;
  std::array<std::size_t, 4> widths{16, 32, 48, 64};
  std::array<std::size_t, 4> strides{2, 4, 8, 16};
  double shift_fraction = 0.125;
  std::size_t in_channels = 1;

  /// Throws std::invalid_argument. Each stride must be a multiple of the
  /// previous one so every block downsamples by an integer factor.
  void validate() const;
};

/// Per-level feature maps, level l (1-based) is [T x ceil(H/k_l) x ceil(W/k_l) x d_l].
struct FeaturePyramid {
  std::array<Tensor, 4> maps;
  std::array<std::size_t, 4> strides{};

  const Tensor& level(std::size_t l) const { return maps.at(l - 1); }
  std::size_t stride(std::size_t l) const { return strides.at(l - 1); }
};

/// Zero-filled channel shift along time: the first floor(d*fraction) channels
/// take their value from frame t+1, the next floor(d*fraction) from frame t-1.
Tensor temporal_shift(const Tensor& f, double shift_fraction);

/// temporal_shift followed by a learnable 1x1 channel mix (identity at init).
struct TemporalShift {
  Conv mix;
  double fraction = 0.125;

  TemporalShift() = default;
  TemporalShift(ParamStore& store, const std::string& name, std::size_t channels, double fraction);
  Tensor operator()(const Tensor& f) const;
};

struct ResidualBlock {
  Conv conv1, conv2, skip;
  bool project = false;

  ResidualBlock() = default;
  ResidualBlock(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout,
                std::size_t stride, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

class Backbone {
 public:
  Backbone(ParamStore& store, const BackboneConfig& cfg, Rng& rng);

  /// video [T x H x W x C] -> pyramid. Frames are the batch axis of every conv.
  FeaturePyramid operator()(const Tensor& video) const;
  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  Conv stem_;
  std::array<ResidualBlock, 4> blocks_;
  std::vector<TemporalShift> shifts_;
  std::array<Conv, 4> fuse_;
};

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
