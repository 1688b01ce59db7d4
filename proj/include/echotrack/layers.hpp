#pragma once

// Small parameter bundles shared by the backbone, correlation encoder and
// refiner. Each bundle registers its tensors in a ParamStore on construction.

#include <string>

#include "echotrack/ops.hpp"
#include "echotrack/params.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

struct Conv {
  Tensor weight;  // [k x k x Cin x Cout]
  Tensor bias;    // [Cout]
  std::size_t stride = 1;

  Conv() = default;
  /// He-normal weights scaled by `gain`, zero bias.
  Conv(ParamStore& store, const std::string& name, std::size_t kernel, std::size_t cin,
       std::size_t cout, std::size_t stride, Rng& rng, double gain = 1.0);
  /// 1x1 convolution initialized to the identity map (cin == cout).
  static Conv identity(ParamStore& store, const std::string& name, std::size_t channels);

  Tensor operator()(const Tensor& x) const;
};

struct Dense {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  Dense() = default;
  /// Uniform(+-gain/sqrt(in)) weights, zero bias.
  Dense(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
        double gain = 1.0);

  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
  std::size_t in() const { return weight.extent(0); }
  std::size_t out() const { return weight.extent(1); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t width);

  Tensor operator()(const Tensor& x) const { return ops::layer_norm_lastdim(x, gain, bias); }
};

/// Multi-head scaled dot-product attention.
/// queries [B x Lq x W] attend to keys/values [B x Lk x W] -> [B x Lq x W].
struct Attention {
  Dense query, key, value, output;
  std::size_t heads = 1;

  Attention() = default;
  Attention(ParamStore& store, const std::string& name, std::size_t width, std::size_t heads,
            Rng& rng);

  Tensor operator()(const Tensor& queries, const Tensor& context) const;
};

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
