#include "echotrack/layers.hpp"

#include <cmath>

namespace echotrack {
inline namespace ECHOTRACK_ABI {

Conv::Conv(ParamStore& store, const std::string& name, std::size_t kernel, std::size_t cin,
           std::size_t cout, std::size_t stride_, Rng& rng, double gain)
    : stride(stride_) {
  const double fan_in = static_cast<double>(kernel * kernel * cin);
  weight = store.add_normal(name + ".w", {kernel, kernel, cin, cout}, gain * std::sqrt(2.0 / fan_in), rng);
  bias = store.add_constant(name + ".b", {cout}, 0.0);
}

Conv Conv::identity(ParamStore& store, const std::string& name, std::size_t channels) {
  Conv c;
  Tensor w = Tensor::zeros({1, 1, channels, channels});
  for (std::size_t i = 0; i < channels; ++i) w.mutable_data()[i * channels + i] = real(1);
  c.weight = store.add(name + ".w", w);
  c.bias = store.add_constant(name + ".b", {channels}, 0.0);
  c.stride = 1;
  return c;
}

Tensor Conv::operator()(const Tensor& x) const {
  return ops::add_bias(ops::conv2d(x, weight, stride), bias);
}

Dense::Dense(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
             double gain) {
  weight = store.add_uniform(name + ".w", {in, out}, gain / std::sqrt(static_cast<double>(in)), rng);
  bias = store.add_constant(name + ".b", {out}, 0.0);
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, std::size_t width) {
  gain = store.add_constant(name + ".gain", {width}, 1.0);
  bias = store.add_constant(name + ".bias", {width}, 0.0);
}

Attention::Attention(ParamStore& store, const std::string& name, std::size_t width,
                     std::size_t heads_, Rng& rng)
    : query(store, name + ".q", width, width, rng),
      key(store, name + ".k", width, width, rng),
      value(store, name + ".v", width, width, rng),
      output(store, name + ".o", width, width, rng),
      heads(heads_) {
  if (heads == 0 || width % heads != 0) {
    throw std::invalid_argument("attention: width " + std::to_string(width) +
                                " is not divisible by " + std::to_string(heads) + " heads");
  }
}

namespace {

// [B, L, W] -> [B*H, L, W/H]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.extent(0), l = x.extent(1), w = x.extent(2);
  auto y = ops::reshape(x, {b, l, heads, w / heads});
  y = ops::permute(y, {0, 2, 1, 3});
  return ops::reshape(y, {b * heads, l, w / heads});
}

// [B*H, L, dh] -> [B, L, H*dh]
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  const std::size_t l = x.extent(1), dh = x.extent(2);
  auto y = ops::reshape(x, {batch, heads, l, dh});
  y = ops::permute(y, {0, 2, 1, 3});
  return ops::reshape(y, {batch, l, heads * dh});
}

}  // namespace

Tensor Attention::operator()(const Tensor& queries, const Tensor& context) const {
  if (queries.rank() != 3 || context.rank() != 3 || queries.extent(0) != context.extent(0)) {
    throw ShapeError("attention: expected [B,Lq,W] and [B,Lk,W], got " + to_string(queries.shape()) +
                     " and " + to_string(context.shape()));
  }
  const std::size_t batch = queries.extent(0);
  const std::size_t width = queries.extent(2);
  auto q = split_heads(query(queries), heads);
  auto k = split_heads(key(context), heads);
  auto v = split_heads(value(context), heads);
  const real temperature = real(1) / std::sqrt(static_cast<real>(width / heads));
  auto weights = ops::softmax_lastdim(ops::scale(ops::bmm(q, k, true), temperature));
  return output(merge_heads(ops::bmm(weights, v), batch, heads));
}

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
