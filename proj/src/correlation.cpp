#include "echotrack/correlation.hpp"

#include <cmath>
#include <stdexcept>

namespace echotrack {
inline namespace ECHOTRACK_ABI {

void CorrConfig::validate() const {
  if (window < 3 || window % 2 == 0) {
    throw std::invalid_argument("correlation: window must be odd and at least 3, got " +
                                std::to_string(window));
  }
  if (dim == 0) throw std::invalid_argument("correlation: token dim must be positive");
}

Tensor normalize_level(const Tensor& f) {
  if (f.rank() != 4) throw ShapeError("normalize_level: expected [T,h,w,d], got " + to_string(f.shape()));
  const std::size_t t = f.extent(0), h = f.extent(1), w = f.extent(2), d = f.extent(3);
  auto y = ops::reshape(ops::permute(f, {0, 3, 1, 2}), {t, d, h * w});
  y = ops::layer_norm_lastdim(y, {}, {}, real(1e-10));
  return ops::permute(ops::reshape(y, {t, d, h, w}), {0, 2, 3, 1});
}

namespace {

// centers [..., P, 2] in pixels -> [..., P*r*r, 2] in level cells
Tensor window_coords(const Tensor& centers, std::size_t stride, std::size_t r) {
  const std::size_t axis = centers.rank() - 2;
  const std::size_t points = centers.extent(axis);
  const std::size_t cells = r * r;
  std::vector<std::size_t> repeat(points * cells);
  for (std::size_t p = 0; p < points; ++p) {
    for (std::size_t c = 0; c < cells; ++c) repeat[p * cells + c] = p;
  }
  auto base = ops::index_select(ops::scale(centers, real(1) / static_cast<real>(stride)), axis, repeat);
  Tensor offsets = Tensor::zeros(base.shape());
  auto o = offsets.mutable_data();
  const std::size_t rows = base.numel() / 2;
  const auto half = static_cast<real>(r / 2);
  for (std::size_t k = 0; k < rows; ++k) {
    const std::size_t cell = k % cells;
    o[2 * k] = static_cast<real>(cell % r) - half;
    o[2 * k + 1] = static_cast<real>(cell / r) - half;
  }
  return ops::add(base, offsets);
}

}  // namespace

Tensor sample_windows(const Tensor& map, const Tensor& centers, std::size_t stride, std::size_t r) {
  if (centers.rank() < 2 || centers.extent(centers.rank() - 1) != 2 || centers.rank() + 1 != map.rank()) {
    throw ShapeError("sample_windows: map " + to_string(map.shape()) + " incompatible with centers " +
                     to_string(centers.shape()));
  }
  const std::size_t d = map.extent(map.rank() - 1);
  auto values = ops::bilinear_sample(map, window_coords(centers, stride, r));
  Shape out = centers.shape();
  out.pop_back();
  out.insert(out.end(), {r, r, d});
  return ops::reshape(values, out);
}

Tensor cosine_corr4d(const Tensor& q, const Tensor& f) {
  if (q.rank() != 4 || f.rank() != 5 || q.extent(1) != q.extent(2) || f.extent(1) != q.extent(0) ||
      f.extent(2) != q.extent(1) || f.extent(3) != q.extent(2) || f.extent(4) != q.extent(3)) {
    throw ShapeError("cosine_corr4d: expected q [N,r,r,d] and f [T,N,r,r,d], got " + to_string(q.shape()) +
                     " and " + to_string(f.shape()));
  }
  const std::size_t t = f.extent(0), n = q.extent(0), r = q.extent(1), d = q.extent(3);
  auto qn = ops::l2_normalize_lastdim(ops::reshape(q, {n, r * r, d}));
  qn = ops::reshape(ops::repeat_leading(qn, t), {t * n, r * r, d});
  auto fn = ops::l2_normalize_lastdim(ops::reshape(f, {t * n, r * r, d}));
  return ops::reshape(ops::bmm(qn, fn, true), {t, n, r, r, r, r});
}

CorrEncoder::CorrEncoder(ParamStore& store, const std::string& name, std::size_t r, std::size_t dim,
                         Rng& rng)
    : hidden(store, name + ".hidden", r * r * r * r, 4 * dim, rng, std::sqrt(2.0)),
      output(store, name + ".out", 4 * dim, dim, rng) {}

Tensor CorrEncoder::operator()(const Tensor& c) const {
  const std::size_t t = c.extent(0), n = c.extent(1);
  auto flat = ops::reshape(c, {t, n, c.numel() / (t * n)});
  return output(ops::relu(hidden(flat)));
}

CorrelationTokens::CorrelationTokens(ParamStore& store, const CorrConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  for (std::size_t k = 0; k < 3; ++k) {
    encoders_[k] = CorrEncoder(store, "corr.level" + std::to_string(CorrConfig::levels[k]), cfg_.window,
                               cfg_.dim, rng);
  }
}

CorrContext CorrelationTokens::prepare(const FeaturePyramid& pyramid, const Tensor& queries,
                                       std::size_t t_q) const {
  if (queries.rank() != 2 || queries.extent(1) != 2) {
    throw ShapeError("correlation: queries must be [N,2], got " + to_string(queries.shape()));
  }
  CorrContext ctx;
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t l = CorrConfig::levels[k];
    const auto& raw = pyramid.level(l);
    if (t_q >= raw.extent(0)) throw std::invalid_argument("correlation: query frame out of range");
    ctx.maps[k] = normalize_level(raw);
    ctx.strides[k] = pyramid.stride(l);
    Shape frame(raw.shape().begin() + 1, raw.shape().end());
    auto query_map = ops::reshape(ops::index_select(ctx.maps[k], 0, std::vector<std::size_t>{t_q}), frame);
    ctx.queries[k] = sample_windows(query_map, queries, ctx.strides[k], cfg_.window);
  }
  return ctx;
}

Tensor CorrelationTokens::operator()(const CorrContext& ctx, const Tensor& trajectories) const {
  std::array<Tensor, 3> parts;
  for (std::size_t k = 0; k < 3; ++k) {
    auto windows = sample_windows(ctx.maps[k], trajectories, ctx.strides[k], cfg_.window);
    parts[k] = encoders_[k](cosine_corr4d(ctx.queries[k], windows));
  }
  return ops::concat_lastdim(parts);
}

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
