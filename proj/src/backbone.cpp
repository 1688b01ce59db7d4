#include "echotrack/backbone.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

namespace echotrack {
inline namespace ECHOTRACK_ABI {

std::string to_string(BackboneVariant v) {
  switch (v) {
    case BackboneVariant::itsm: return "iTSM";
    case BackboneVariant::btsm: return "bTSM";
    case BackboneVariant::fuse_add: return "fuse-add";
    case BackboneVariant::fuse_cat: return "fuse-cat";
    case BackboneVariant::plain: return "plain";
  }
  return "?";
}

BackboneVariant parse_backbone_variant(const std::string& name) {
  std::string s = name;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "itsm") return BackboneVariant::itsm;
  if (s == "btsm") return BackboneVariant::btsm;
  if (s == "fuse-add") return BackboneVariant::fuse_add;
  if (s == "fuse-cat") return BackboneVariant::fuse_cat;
  if (s == "plain") return BackboneVariant::plain;
  throw std::invalid_argument("backbone: unknown variant '" + name + "'");
}

void BackboneConfig::validate() const {
  if (in_channels != 1 && in_channels != 3) {
    throw std::invalid_argument("backbone: input must have 1 or 3 channels, got " +
                                std::to_string(in_channels));
  }
  if (!(shift_fraction > 0.0 && shift_fraction <= 0.5)) {
    throw std::invalid_argument("backbone: shift_fraction must lie in (0, 0.5]");
  }
  std::size_t prev = 1;
  for (std::size_t l = 0; l < 4; ++l) {
    if (widths[l] == 0) throw std::invalid_argument("backbone: zero channel width");
    if (strides[l] < prev || strides[l] % prev != 0) {
      throw std::invalid_argument("backbone: strides must be non-decreasing multiples of each other");
    }
    prev = strides[l];
  }
}

Tensor temporal_shift(const Tensor& f, double shift_fraction) {
  const std::size_t d = f.extent(f.rank() - 1);
  const auto c = static_cast<std::size_t>(std::floor(static_cast<double>(d) * shift_fraction));
  if (c == 0) return f;
  auto y = ops::time_shift(f, -1, 0, c);
  return ops::time_shift(y, 1, c, 2 * c);
}

TemporalShift::TemporalShift(ParamStore& store, const std::string& name, std::size_t channels,
                             double fraction_)
    : mix(Conv::identity(store, name + ".mix", channels)), fraction(fraction_) {}

Tensor TemporalShift::operator()(const Tensor& f) const { return mix(temporal_shift(f, fraction)); }

ResidualBlock::ResidualBlock(ParamStore& store, const std::string& name, std::size_t cin,
                             std::size_t cout, std::size_t stride, Rng& rng)
    : conv1(store, name + ".conv1", 3, cin, cout, stride, rng),
      conv2(store, name + ".conv2", 3, cout, cout, 1, rng, 0.5),
      project(cin != cout || stride != 1) {
  if (project) skip = Conv(store, name + ".skip", 1, cin, cout, stride, rng, 0.5);
}

Tensor ResidualBlock::operator()(const Tensor& x) const {
  auto h = conv2(ops::relu(conv1(x)));
  return ops::relu(ops::add(h, project ? skip(x) : x));
}

Backbone::Backbone(ParamStore& store, const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  stem_ = Conv(store, "backbone.stem", 3, cfg_.in_channels, cfg_.widths[0], 1, rng);
  std::size_t prev_width = cfg_.widths[0];
  std::size_t prev_stride = 1;
  for (std::size_t l = 0; l < 4; ++l) {
    blocks_[l] = ResidualBlock(store, "backbone.block" + std::to_string(l), prev_width,
                               cfg_.widths[l], cfg_.strides[l] / prev_stride, rng);
    prev_width = cfg_.widths[l];
    prev_stride = cfg_.strides[l];
  }
  const std::size_t shifted_levels = cfg_.variant == BackboneVariant::itsm   ? 3
                                     : cfg_.variant == BackboneVariant::btsm ? 4
                                                                             : 0;
  for (std::size_t l = 0; l < shifted_levels; ++l) {
    shifts_.emplace_back(store, "backbone.tsm" + std::to_string(l), cfg_.widths[l],
                         cfg_.shift_fraction);
  }
  if (cfg_.variant == BackboneVariant::fuse_cat) {
    for (std::size_t l = 0; l < 4; ++l) {
      fuse_[l] = Conv(store, "backbone.fuse" + std::to_string(l), 1, 3 * cfg_.widths[l],
                      cfg_.widths[l], 1, rng);
    }
  }
}

FeaturePyramid Backbone::operator()(const Tensor& video) const {
  if (video.rank() != 4) {
    throw ShapeError("backbone: expected video [T,H,W,C], got " + to_string(video.shape()));
  }
  if (video.extent(0) == 0) throw std::invalid_argument("backbone: video has no frames");
  if (video.extent(3) != cfg_.in_channels) {
    throw ShapeError("backbone: video has " + std::to_string(video.extent(3)) +
                     " channels, config expects " + std::to_string(cfg_.in_channels));
  }
  FeaturePyramid out;
  out.strides = cfg_.strides;
  Tensor x = ops::relu(stem_(video));
  for (std::size_t l = 0; l < 4; ++l) {
    x = blocks_[l](x);
    switch (cfg_.variant) {
      case BackboneVariant::plain:
        out.maps[l] = x;
        break;
      case BackboneVariant::itsm:
        if (l < 3) x = shifts_[l](x);
        out.maps[l] = x;
        break;
      case BackboneVariant::btsm:
        out.maps[l] = shifts_[l](x);
        break;
      case BackboneVariant::fuse_add:
      case BackboneVariant::fuse_cat: {
        const std::size_t d = cfg_.widths[l];
        auto prev = ops::time_shift(x, 1, 0, d);
        auto next = ops::time_shift(x, -1, 0, d);
        out.maps[l] = cfg_.variant == BackboneVariant::fuse_add
                          ? ops::add(ops::add(prev, x), next)
                          : fuse_[l](ops::concat_lastdim({prev, x, next}));
        break;
      }
    }
  }
  return out;
}

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
