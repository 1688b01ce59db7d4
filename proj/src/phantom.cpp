#include "echotrack/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "echotrack/ops.hpp"
#include "echotrack/params.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

namespace {

constexpr double kBackground = 0.05;
constexpr double kTissue = 0.5;
constexpr double kContrast = 0.15;

struct Point {
  double x, y;
};

Point center_of(const PhantomSpec& s) {
  return {(static_cast<double>(s.width) - 1) / 2 + s.center_dx, (static_cast<double>(s.height) - 1) / 2 + s.center_dy};
}

double cycle_phase(const PhantomSpec& s, std::size_t t) {
  if (s.frames < 2) return 0;
  const double v = std::sin(std::numbers::pi * static_cast<double>(t) / static_cast<double>(s.frames - 1));
  return v * v;
}

// material point -> position at frame t
Point deform(const PhantomSpec& s, std::size_t t, Point m) {
  const Point c = center_of(s);
  const double k = phantom_scale(s, t);
  return {c.x + k * (m.x - c.x), c.y + k * (m.y - c.y) - phantom_shift(s, t)};
}

Point undeform(const PhantomSpec& s, std::size_t t, Point p) {
  const Point c = center_of(s);
  const double k = phantom_scale(s, t);
  return {c.x + (p.x - c.x) / k, c.y + (p.y + phantom_shift(s, t) - c.y) / k};
}

std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0) return {1.0};
  const auto radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  return k;
}

// Zero-mean, unit-variance low-pass noise on an h x w grid (reflecting edges).
std::vector<double> speckle(std::size_t h, std::size_t w, double sigma, Rng& rng) {
  std::vector<double> a(h * w), b(h * w);
  for (auto& v : a) v = rng.normal();
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  const int H = static_cast<int>(h), W = static_cast<int>(w);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      for (int d = -r; d <= r; ++d) acc += k[d + r] * a[y * W + reflect(x + d, W)];
      b[y * W + x] = acc;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      for (int d = -r; d <= r; ++d) acc += k[d + r] * b[reflect(y + d, H) * W + x];
      a[y * W + x] = acc;
    }
  double mean = 0, var = 0;
  for (auto v : a) mean += v;
  mean /= static_cast<double>(a.size());
  for (auto v : a) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(a.size()));
  for (auto& v : a) v = sd > 0 ? (v - mean) / sd : 0;
  return a;
}

double sample_clamped(const std::vector<double>& g, std::size_t h, std::size_t w, Point p) {
  const double x = std::clamp(p.x, 0.0, static_cast<double>(w - 1));
  const double y = std::clamp(p.y, 0.0, static_cast<double>(h - 1));
  const auto x0 = std::min(static_cast<std::size_t>(x), w - 1), y0 = std::min(static_cast<std::size_t>(y), h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  return (1 - fy) * ((1 - fx) * g[y0 * w + x0] + fx * g[y0 * w + x1]) +
         fy * ((1 - fx) * g[y1 * w + x0] + fx * g[y1 * w + x1]);
}

std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

void PhantomSpec::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("phantom: " + why); };
  if (frames < 2) fail("at least 2 frames are required");
  if (points < 1) fail("at least 1 point is required");
  if (height < 8 || width < 8) fail("frames must be at least 8x8");
  if (!(amplitude >= 0 && amplitude <= 0.3)) fail("amplitude must lie in [0, 0.3]");
  if (!(inner_radius > 0 && outer_radius > inner_radius)) fail("need 0 < inner radius < outer radius");
  if (!(grain >= 0) || !(noise >= 0)) fail("grain and noise must be non-negative");
  if (!(span_degrees > 0 && span_degrees < 180)) fail("span must lie in (0, 180) degrees");
  const Point c = center_of(*this);
  const double reach = outer_radius + amplitude * inner_radius / 2;
  if (c.x - outer_radius < 0 || c.x + outer_radius > static_cast<double>(width - 1) || c.y - reach < 0 ||
      c.y + outer_radius > static_cast<double>(height - 1)) {
    fail("ring does not fit inside the frame");
  }
}

double PhantomSpec::displacement_bound() const {
  return amplitude * outer_radius * std::numbers::pi / static_cast<double>(frames);
}

double phantom_scale(const PhantomSpec& spec, std::size_t t) { return 1 - spec.amplitude * cycle_phase(spec, t); }

double phantom_shift(const PhantomSpec& spec, std::size_t t) {
  return spec.translate ? spec.amplitude * spec.inner_radius / 2 * cycle_phase(spec, t) : 0.0;
}

Tensor phantom_trajectories(const PhantomSpec& spec) {
  const std::size_t T = spec.frames, N = spec.points;
  const Point c = center_of(spec);
  const double rho = (spec.inner_radius + spec.outer_radius) / 2;
  const double span = spec.span_degrees * std::numbers::pi / 180;
  Buffer v(T * N * 2);
  for (std::size_t i = 0; i < N; ++i) {
    const double phi = N == 1 ? 0.0 : -span + 2 * span * static_cast<double>(i) / static_cast<double>(N - 1);
    const Point m{c.x + rho * std::sin(phi), c.y - rho * std::cos(phi)};
    for (std::size_t t = 0; t < T; ++t) {
      const Point p = deform(spec, t, m);
      v[(t * N + i) * 2] = static_cast<real>(p.x);
      v[(t * N + i) * 2 + 1] = static_cast<real>(p.y);
    }
  }
  return Tensor({T, N, 2}, std::move(v));
}

double max_step(const Tensor& traj) {
  const std::size_t T = traj.extent(0), N = traj.extent(1);
  double worst = 0;
  for (std::size_t t = 0; t + 1 < T; ++t)
    for (std::size_t i = 0; i < N; ++i) {
      const double dx = traj.at({t + 1, i, 0}) - traj.at({t, i, 0});
      const double dy = traj.at({t + 1, i, 1}) - traj.at({t, i, 1});
      worst = std::max(worst, std::abs(dx) + std::abs(dy));
    }
  return worst;
}

PhantomSample generate(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  PhantomSample out;
  out.trajectories = phantom_trajectories(spec);
  const double step = max_step(out.trajectories);
  if (step > spec.displacement_bound() + 1e-9) {
    throw std::invalid_argument("phantom: inter-frame displacement " + std::to_string(step) +
                                " px exceeds the locality bound " + std::to_string(spec.displacement_bound()));
  }
  const std::size_t T = spec.frames, H = spec.height, W = spec.width, N = spec.points;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < N * 2; ++k) {
      const double v = out.trajectories.data()[t * N * 2 + k];
      const double limit = static_cast<double>((k % 2 == 0 ? W : H) - 1);
      if (v < 0 || v > limit) throw std::invalid_argument("phantom: trajectory leaves the frame");
    }
  out.queries = ops::reshape(ops::index_select(out.trajectories, 0, std::vector<std::size_t>{0}), {N, 2});
  out.query_frame = 0;
  out.wall_order.resize(N);
  for (std::size_t i = 0; i < N; ++i) out.wall_order[i] = i;

  Rng rng(seed);
  const auto texture = speckle(H, W, spec.grain, rng);
  const Point c = center_of(spec);
  Buffer video(T * H * W);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const Point m = undeform(spec, t, {static_cast<double>(x), static_cast<double>(y)});
        const double r = std::hypot(m.x - c.x, m.y - c.y);
        double v = kBackground;
        if (r >= spec.inner_radius && r <= spec.outer_radius) v = kTissue + kContrast * sample_clamped(texture, H, W, m);
        if (spec.noise > 0) v += spec.noise * rng.normal();
        video[(t * H + y) * W + x] = static_cast<real>(std::clamp(v, 0.0, 1.0));
      }
  out.video = Tensor({T, H, W, 1}, std::move(video));
  return out;
}

PhantomSpec dataset_spec(const PhantomSpec& base, std::size_t index) {
  PhantomSpec s = base;
  s.seed = mix(base.seed ^ mix(static_cast<std::uint64_t>(index) + 1));
  Rng rng(s.seed);
  s.amplitude = std::min(0.3, base.amplitude * rng.uniform(0.5, 1.2));
  s.center_dx = base.center_dx + rng.uniform(-2, 2);
  s.center_dy = base.center_dy + rng.uniform(-2, 2);
  return s;
}

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
