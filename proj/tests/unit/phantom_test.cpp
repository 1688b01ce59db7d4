#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "echotrack/ops.hpp"
#include "echotrack/phantom.hpp"

namespace echotrack {
namespace {

double polyline_length(const Tensor& traj, std::size_t t) {
  double len = 0;
  for (std::size_t i = 0; i + 1 < traj.extent(1); ++i) {
    len += std::hypot(traj.at({t, i + 1, 0}) - traj.at({t, i, 0}), traj.at({t, i + 1, 1}) - traj.at({t, i, 1}));
  }
  return len;
}

TEST(Phantom, SpecValidation) {
  PhantomSpec s;
  EXPECT_NO_THROW(s.validate());
  auto broken = [&](auto edit) {
    PhantomSpec b;
    edit(b);
    EXPECT_THROW(generate(b), std::invalid_argument);
  };
  broken([](PhantomSpec& b) { b.frames = 1; });
  broken([](PhantomSpec& b) { b.points = 0; });
  broken([](PhantomSpec& b) { b.amplitude = 0.31; });
  broken([](PhantomSpec& b) { b.amplitude = -0.01; });
  broken([](PhantomSpec& b) { b.inner_radius = 30; });
  broken([](PhantomSpec& b) { b.outer_radius = 40; });
  broken([](PhantomSpec& b) { b.noise = -1; });
}

TEST(Phantom, ZeroAmplitudeIsStatic) {
  PhantomSpec s;
  s.amplitude = 0;
  auto sample = generate(s, 3);
  const auto& g = sample.trajectories;
  for (std::size_t t = 0; t < s.frames; ++t) {
    for (std::size_t k = 0; k < s.points * 2; ++k) EXPECT_EQ(g.data()[t * s.points * 2 + k], g.data()[k]);
    EXPECT_NEAR(polyline_length(g, t), polyline_length(g, 0), 1e-12);
  }
}

TEST(Phantom, SameSeedIsBitIdentical) {
  PhantomSpec s;
  auto a = generate(s, 7);
  auto b = generate(s, 7);
  ASSERT_EQ(a.video.shape(), b.video.shape());
  EXPECT_EQ(std::memcmp(a.video.data().data(), b.video.data().data(), a.video.numel() * sizeof(real)), 0);
  EXPECT_EQ(std::memcmp(a.trajectories.data().data(), b.trajectories.data().data(),
                        a.trajectories.numel() * sizeof(real)),
            0);
  auto c = generate(s, 8);
  EXPECT_NE(std::memcmp(a.video.data().data(), c.video.data().data(), a.video.numel() * sizeof(real)), 0);
}

TEST(Phantom, ShapesAndQueryFrame) {
  PhantomSpec s;
  auto sample = generate(s, 1);
  EXPECT_EQ(sample.video.shape(), (Shape{16, 64, 64, 1}));
  EXPECT_EQ(sample.trajectories.shape(), (Shape{16, 16, 2}));
  EXPECT_EQ(sample.query_frame, 0u);
  for (std::size_t k = 0; k < 32; ++k) EXPECT_EQ(sample.queries.data()[k], sample.trajectories.data()[k]);
  for (auto v : sample.video.data()) {
    ASSERT_GE(v, 0);
    ASSERT_LE(v, 1);
  }
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(sample.wall_order[i], i);
  // points run left to right over the apex
  for (std::size_t i = 0; i + 1 < 16; ++i) EXPECT_LT(sample.queries.at({i, 0}), sample.queries.at({i + 1, 0}));
}

TEST(Phantom, ScaleOnlyStrainIsAnalytic) {
  PhantomSpec s;
  s.translate = false;
  s.frames = 9;  // odd, so the peak sits exactly on a frame
  auto g = phantom_trajectories(s);
  double min_len = polyline_length(g, 0);
  for (std::size_t t = 0; t < s.frames; ++t) min_len = std::min(min_len, polyline_length(g, t));
  const double gls = 100 * (min_len - polyline_length(g, 0)) / polyline_length(g, 0);
  EXPECT_NEAR(gls, -18.0, 0.1);
  EXPECT_NEAR(gls, (phantom_scale(s, 4) - 1) * 100, 1e-9);
}

TEST(Phantom, TranslationDoesNotChangeStrain) {
  PhantomSpec s;
  s.frames = 9;
  auto moving = phantom_trajectories(s);
  s.translate = false;
  auto still = phantom_trajectories(s);
  for (std::size_t t = 0; t < 9; ++t) EXPECT_NEAR(polyline_length(moving, t), polyline_length(still, t), 1e-9);
}

TEST(Phantom, DisplacementStaysLocal) {
  PhantomSpec base;
  for (std::size_t frames : {8u, 9u, 16u, 32u}) {
    base.frames = frames;
    for (std::size_t i = 0; i < 25; ++i) {
      auto s = dataset_spec(base, i);
      auto g = generate(s).trajectories;
      EXPECT_LE(max_step(g), s.displacement_bound()) << "T " << frames << " sample " << i;
    }
  }
}

TEST(Phantom, ScaleOnlyMotionCanBreakTheBound) {
  PhantomSpec s;
  s.translate = false;
  s.points = 15;  // puts points at +-40 and +-50 degrees
  EXPECT_GT(max_step(phantom_trajectories(s)), s.displacement_bound());
  EXPECT_THROW(generate(s), std::invalid_argument);
}

TEST(Phantom, CycleCloses) {
  PhantomSpec base;
  for (std::size_t i = 0; i < 10; ++i) {
    auto g = phantom_trajectories(dataset_spec(base, i));
    const std::size_t last = base.frames - 1;
    double d = 0;
    for (std::size_t n = 0; n < base.points; ++n)
      d += std::abs(g.at({last, n, 0}) - g.at({0, n, 0})) + std::abs(g.at({last, n, 1}) - g.at({0, n, 1}));
    EXPECT_LT(d, 1e-6);
  }
}

TEST(Phantom, TextureRidesWithTissue) {
  PhantomSpec s;
  s.noise = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto sample = generate(s, seed);
    for (std::size_t i = 0; i < s.points; ++i) {
      double first = 0;
      for (std::size_t t = 0; t < s.frames; ++t) {
        auto frame = ops::reshape(ops::index_select(sample.video, 0, std::vector<std::size_t>{t}), {64, 64, 1});
        Tensor at({1, 2}, {sample.trajectories.at({t, i, 0}), sample.trajectories.at({t, i, 1})});
        const double v = ops::bilinear_sample(frame, at).item();
        if (t == 0) first = v;
        EXPECT_NEAR(v, first, 0.05) << "seed " << seed << " point " << i << " frame " << t;
      }
    }
  }
}

TEST(Phantom, DatasetSpecsVaryAndAreReproducible) {
  PhantomSpec base;
  auto a = dataset_spec(base, 3);
  auto b = dataset_spec(base, 3);
  auto c = dataset_spec(base, 4);
  EXPECT_EQ(a.seed, b.seed);
  EXPECT_EQ(a.amplitude, b.amplitude);
  EXPECT_NE(a.seed, c.seed);
  EXPECT_NE(a.amplitude, c.amplitude);
  for (std::size_t i = 0; i < 50; ++i) {
    auto s = dataset_spec(base, i);
    EXPECT_GE(s.amplitude, 0.5 * base.amplitude);
    EXPECT_LE(s.amplitude, 1.2 * base.amplitude);
    EXPECT_LE(std::abs(s.center_dx), 2);
  }
}

}  // namespace
}  // namespace echotrack
