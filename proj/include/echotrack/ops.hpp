#pragma once

// Differentiable kernels. Every function records a backward rule on the active
// tape when at least one operand requires gradients. There is no implicit
// broadcasting: operands of binary elementwise ops must have equal shapes, and
// the only broadcasts are the explicitly named ones (scale, add_bias, ...).

#include <cstddef>
#include <span>
#include <vector>

#include "echotrack/tensor.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {
namespace ops {

enum class Elementwise { add, sub, mul, relu, scale };

/// Dispatcher over the elementwise family. `b` is ignored for unary kinds,
/// `factor` is only read by `scale`.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b = {}, real factor = 1);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, real factor);
Tensor abs(const Tensor& x);

/// x[..., P] + bias[P]
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// a[M x K] . b[K x P]
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[..., K] . w[K x P] (+ bias[P]); leading axes are treated as rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

/// Batched product a[B x M x K] . b[B x K x P], or a . b^T with b[B x P x K]
/// when `transpose_b` is set.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

/// 2-D convolution, "same" zero padding of (k-1)/2, then stride.
/// x is [H x W x Cin] or [B x H x W x Cin]; w is [kh x kw x Cin x Cout].
/// Output extent is ceil(H/stride) x ceil(W/stride) x Cout.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1);

Tensor softmax_lastdim(const Tensor& x);

/// Normalizes each row of the last axis to zero mean and unit variance
/// (eps inside the square root), then applies the optional affine gain/bias.
Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gain = {}, const Tensor& bias = {},
                          real eps = real(1e-5));

/// x / sqrt(|x|^2 + eps^2) along the last axis; all-zero rows map to zero.
Tensor l2_normalize_lastdim(const Tensor& x, real eps = real(1e-8));

/// Bilinear interpolation with zero outside the map. `coords` holds (x, y)
/// pairs in cell units: x indexes the W axis, y the H axis.
/// map [H x W x d] with coords [P x 2] -> [P x d], or
/// map [B x H x W x d] with coords [B x P x 2] -> [B x P x d].
Tensor bilinear_sample(const Tensor& map, const Tensor& coords);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::span<const std::size_t> axes);
Tensor permute(const Tensor& x, std::initializer_list<std::size_t> axes);
Tensor concat_lastdim(std::span<const Tensor> parts);
Tensor concat_lastdim(std::initializer_list<Tensor> parts);
Tensor slice_lastdim(const Tensor& x, std::size_t begin, std::size_t end);

/// Gathers slices along `axis`; indices may repeat.
Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices);

/// Tiles x along a new leading axis: [...] -> [times x ...].
Tensor repeat_leading(const Tensor& x, std::size_t times);

/// Moves channels [channel_begin, channel_end) of a [T x ... x d] tensor by
/// `offset` frames along axis 0: out[t] = x[t - offset] for those channels,
/// zero where t - offset falls outside [0, T). Other channels pass through.
Tensor time_shift(const Tensor& x, std::ptrdiff_t offset, std::size_t channel_begin,
                  std::size_t channel_end);

}  // namespace ops
}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
