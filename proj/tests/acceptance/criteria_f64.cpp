#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>

#include "acceptance.hpp"
#include "echotrack/correlation.hpp"
#include "echotrack/evalkit.hpp"
#include "echotrack/refiner.hpp"
#include "echotrack/training.hpp"
#include "support/gradcheck.hpp"
#include "support/probes.hpp"

static_assert(sizeof(echotrack::real) == 8, "this translation unit must be built in double precision");

namespace acceptance {
namespace {

using namespace echotrack;
using testing::gradient_error;
using testing::projected;
using testing::random_tensor;

constexpr double kOpTolerance = 1e-4;
constexpr double kEndToEndTolerance = 1e-3;
constexpr double kGradientSeconds = 120;
constexpr double kOracleTolerance = 1e-6;
constexpr double kLossTolerance = 1e-9;
constexpr double kLocalityTolerance = 1e-6;
constexpr double kFullJointTolerance = 1e-5;

std::string fmt(const char* f, double a) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

using Inputs = std::vector<Tensor>;

struct OpCase {
  const char* name;
  testing::Builder f;
  Inputs inputs;
};

std::vector<OpCase> op_cases() {
  std::vector<OpCase> c;
  auto rt = [](Shape s, std::uint64_t seed, double lo = -1, double hi = 1) { return random_tensor(s, seed, lo, hi); };
  c.push_back({"add", [](const Inputs& in) { return ops::add(in[0], in[1]); }, {rt({3, 4}, 1), rt({3, 4}, 2)}});
  c.push_back({"sub", [](const Inputs& in) { return ops::sub(in[0], in[1]); }, {rt({3, 4}, 3), rt({3, 4}, 4)}});
  c.push_back({"mul", [](const Inputs& in) { return ops::mul(in[0], in[1]); }, {rt({3, 4}, 5), rt({3, 4}, 6)}});
  c.push_back({"relu", [](const Inputs& in) { return ops::relu(in[0]); }, {rt({5, 4}, 7)}});
  c.push_back({"scale", [](const Inputs& in) { return ops::scale(in[0], real(-1.7)); }, {rt({5, 3}, 8)}});
  c.push_back({"elementwise", [](const Inputs& in) { return ops::elementwise(ops::Elementwise::mul, in[0], in[1]); },
               {rt({2, 3}, 9), rt({2, 3}, 10)}});
  c.push_back({"abs", [](const Inputs& in) { return ops::abs(in[0]); }, {rt({4, 4}, 11)}});
  c.push_back({"add_bias", [](const Inputs& in) { return ops::add_bias(in[0], in[1]); }, {rt({2, 3, 4}, 12), rt({4}, 13)}});
  c.push_back({"sum", [](const Inputs& in) { return ops::sum(ops::mul(in[0], in[0])); }, {rt({3, 5}, 14)}});
  c.push_back({"mean", [](const Inputs& in) { return ops::mean(ops::mul(in[0], in[0])); }, {rt({3, 5}, 15)}});
  c.push_back({"matmul", [](const Inputs& in) { return ops::matmul(in[0], in[1]); }, {rt({4, 5}, 16), rt({5, 3}, 17)}});
  c.push_back({"linear", [](const Inputs& in) { return ops::linear(in[0], in[1], in[2]); },
               {rt({2, 3, 4}, 18), rt({4, 6}, 19), rt({6}, 20)}});
  c.push_back({"bmm", [](const Inputs& in) { return ops::bmm(in[0], in[1]); }, {rt({2, 3, 4}, 21), rt({2, 4, 5}, 22)}});
  c.push_back({"bmm_transposed", [](const Inputs& in) { return ops::bmm(in[0], in[1], true); },
               {rt({2, 3, 4}, 23), rt({2, 5, 4}, 24)}});
  c.push_back({"conv2d", [](const Inputs& in) { return ops::conv2d(in[0], in[1], 1); },
               {rt({5, 5, 2}, 25), rt({3, 3, 2, 3}, 26)}});
  c.push_back({"conv2d_stride2", [](const Inputs& in) { return ops::conv2d(in[0], in[1], 2); },
               {rt({2, 6, 6, 2}, 27), rt({3, 3, 2, 3}, 28)}});
  c.push_back({"softmax_lastdim", [](const Inputs& in) { return ops::softmax_lastdim(in[0]); }, {rt({3, 7}, 29, -3, 3)}});
  c.push_back({"layer_norm_lastdim", [](const Inputs& in) { return ops::layer_norm_lastdim(in[0], in[1], in[2]); },
               {rt({3, 7}, 30, -2, 2), rt({7}, 31, 0.5, 1.5), rt({7}, 32)}});
  c.push_back({"l2_normalize_lastdim", [](const Inputs& in) { return ops::l2_normalize_lastdim(in[0]); }, {rt({4, 5}, 33)}});
  c.push_back({"bilinear_sample", [](const Inputs& in) { return ops::bilinear_sample(in[0], in[1]); },
               {rt({6, 7, 3}, 34), rt({9, 2}, 35, 0.3, 4.7)}});
  c.push_back({"bilinear_sample_batched", [](const Inputs& in) { return ops::bilinear_sample(in[0], in[1]); },
               {rt({2, 5, 5, 2}, 36), rt({2, 4, 2}, 37, -0.7, 4.6)}});
  c.push_back({"reshape", [](const Inputs& in) { return ops::mul(ops::reshape(in[0], {6, 4}), in[1]); },
               {rt({2, 3, 4}, 38), rt({6, 4}, 39)}});
  c.push_back({"permute", [](const Inputs& in) { return ops::permute(in[0], {2, 0, 1}); }, {rt({2, 3, 4}, 40)}});
  c.push_back({"concat_lastdim", [](const Inputs& in) { return ops::concat_lastdim({in[0], in[1]}); },
               {rt({3, 2}, 41), rt({3, 5}, 42)}});
  c.push_back({"slice_lastdim", [](const Inputs& in) { return ops::slice_lastdim(in[0], 1, 4); }, {rt({3, 6}, 43)}});
  c.push_back({"index_select",
               [](const Inputs& in) {
                 const std::vector<std::size_t> idx{3, 0, 3};
                 return ops::index_select(in[0], 1, idx);
               },
               {rt({3, 4, 2}, 44)}});
  c.push_back({"repeat_leading", [](const Inputs& in) { return ops::repeat_leading(in[0], 3); }, {rt({2, 3}, 45)}});
  c.push_back({"time_shift",
               [](const Inputs& in) { return ops::time_shift(ops::time_shift(in[0], 1, 0, 2), -1, 2, 4); },
               {rt({4, 2, 5}, 46)}});
  c.push_back({"cosine_corr4d", [](const Inputs& in) { return cosine_corr4d(in[0], in[1]); },
               {rt({2, 3, 3, 3}, 47), rt({2, 2, 3, 3, 3}, 48)}});
  c.push_back({"sample_windows",
               [](const Inputs& in) { return sample_windows(in[0], in[1], 2, 3); },
               {rt({2, 6, 6, 2}, 49), rt({2, 2, 2}, 50, 1.3, 8.7)}});
  return c;
}

ModelConfig micro_model() {
  ModelConfig cfg;
  cfg.backbone.widths = {4, 4, 6, 6};
  cfg.corr.window = 3;
  cfg.corr.dim = 4;
  cfg.refiner.mode = ReasoningMode::knp;
  cfg.refiner.neighbors = 2;
  cfg.refiner.blocks = 1;
  cfg.refiner.heads = 2;
  cfg.refiner.width = 12;
  cfg.refiner.latents = 3;
  cfg.refiner.iterations = 2;
  return cfg;
}

Verdict gradients() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0;
  std::string worst_name;
  std::size_t count = 0;
  for (auto& c : op_cases()) {
    const double e = gradient_error(projected(c.f, 1000 + count), c.inputs);
    ++count;
    if (!(e <= worst)) {
      worst = e;
      worst_name = c.name;
    }
  }

  Tracker model(micro_model(), 11);
  Rng rng(12);
  for (auto [name, p] : model.params().entries())
    for (auto& v : p.mutable_data()) v += static_cast<real>(rng.uniform(-0.05, 0.05));
  auto video = testing::random_video(4, 8, 8, 1, 13);
  Tensor queries({2, 2}, {2.3, 3.6, 5.2, 4.4});
  auto gt = random_tensor({4, 2, 2}, 14, 0, 8, false);
  auto loss = [&](const Inputs&) {
    auto res = model.track(video, queries, 0);
    return loss_eq2(res.iterations, gt, 0.8);
  };
  Inputs params;
  for (const auto& [name, p] : model.params().entries()) params.push_back(p);
  const double e2e = gradient_error(loss, params);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const bool ok = worst <= kOpTolerance && e2e <= kEndToEndTolerance && seconds < kGradientSeconds;
  std::string d = std::to_string(count) + " op cases, worst rel err " + fmt("%.2e", worst) + " (" + worst_name +
                  ", tol 1e-4); end-to-end micro model " + fmt("%.2e", e2e) + " over " +
                  std::to_string(params.size()) + " parameter tensors (tol 1e-3); " + fmt("%.1f s", seconds) +
                  " (limit 120 s)";
  return {1, ok, d};
}

// Six nested loops over (t, n, i, j, u, v) with a plain channel dot product.
std::vector<double> corr_reference(const Tensor& q, const Tensor& f) {
  const std::size_t t_n = f.extent(0), n = q.extent(0), r = q.extent(1), d = q.extent(3);
  std::vector<double> out;
  for (std::size_t t = 0; t < t_n; ++t)
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j)
          for (std::size_t u = 0; u < r; ++u)
            for (std::size_t v = 0; v < r; ++v) {
              double dot = 0, qq = 0, ff = 0;
              for (std::size_t c = 0; c < d; ++c) {
                const double a = q.at({p, i, j, c});
                const double b = f.at({t, p, u, v, c});
                dot += a * b;
                qq += a * a;
                ff += b * b;
              }
              out.push_back(dot / (std::sqrt(qq + 1e-16) * std::sqrt(ff + 1e-16)));
            }
  return out;
}

Verdict correlation() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t r = 3 + 2 * (seed % 3);
    auto q = random_tensor({2, r, r, 4}, seed, -1, 1, false);
    auto f = random_tensor({3, 2, r, r, 4}, seed + 1000, -1, 1, false);
    auto c = cosine_corr4d(q, f);
    auto ref = corr_reference(q, f);
    if (c.numel() != ref.size()) return {2, false, "shape mismatch against the reference"};
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(c.data()[i] - ref[i]));
  }

  std::size_t probes = 0, misses = 0;
  for (std::size_t r : {5u, 7u, 9u}) {
    const long reach = static_cast<long>(r - 1) / 2 - 1;
    auto map = random_tensor({24, 24, 8}, 10 + r, -1, 1, false);
    const real cx = 12, cy = 11;
    auto q = sample_windows(map, Tensor({1, 2}, {cx, cy}), 1, r);
    const std::size_t mid = r / 2;
    for (long du = -reach; du <= reach; ++du) {
      for (long dv = -reach; dv <= reach; ++dv) {
        Tensor centers({1, 1, 2}, {cx - static_cast<real>(dv), cy - static_cast<real>(du)});
        auto c = cosine_corr4d(q, sample_windows(ops::reshape(map, {1, 24, 24, 8}), centers, 1, r));
        std::size_t bu = 0, bv = 0;
        real best = -2;
        for (std::size_t u = 0; u < r; ++u)
          for (std::size_t v = 0; v < r; ++v)
            if (c.at({0, 0, mid, mid, u, v}) > best) {
              best = c.at({0, 0, mid, mid, u, v});
              bu = u;
              bv = v;
            }
        ++probes;
        if (static_cast<long>(bu) != static_cast<long>(mid) + du || static_cast<long>(bv) != static_cast<long>(mid) + dv ||
            std::abs(best - 1) > 1e-12)
          ++misses;
      }
    }
  }
  const bool ok = worst <= kOracleTolerance && misses == 0;
  return {2, ok,
          "50 instances, max |diff| vs six-loop reference " + fmt("%.2e", worst) + " (tol 1e-6); localization " +
              std::to_string(probes - misses) + "/" + std::to_string(probes) + " offsets for r in {5,7,9}"};
}

Verdict receptive_fields() {
  struct Bounds {
    BackboneVariant variant;
    long reach[4];
  };
  const Bounds table[] = {{BackboneVariant::plain, {0, 0, 0, 0}},
                          {BackboneVariant::btsm, {1, 1, 1, 1}},
                          {BackboneVariant::fuse_add, {1, 1, 1, 1}},
                          {BackboneVariant::fuse_cat, {1, 1, 1, 1}},
                          {BackboneVariant::itsm, {1, 2, 3, 3}}};
  std::size_t checks = 0, wrong = 0;
  std::string first_failure;
  for (const auto& b : table) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      BackboneConfig cfg;
      cfg.variant = b.variant;
      cfg.widths = {8, 8, 12, 16};
      cfg.strides = {2, 4, 8, 8};
      cfg.shift_fraction = 0.25;
      ParamStore store;
      Rng rng(100 + seed);
      Backbone net(store, cfg, rng);
      auto reach = testing::receptive_field(net, testing::random_video(9, 16, 16, 1, seed), 4, seed);
      for (std::size_t l = 0; l < 4; ++l) {
        ++checks;
        if (reach[l].first != -b.reach[l] || reach[l].second != b.reach[l]) {
          ++wrong;
          if (first_failure.empty())
            first_failure = "; first failure " + to_string(b.variant) + " level " + std::to_string(l + 1);
        }
      }
    }
  }
  return {3, wrong == 0,
          std::to_string(checks - wrong) + "/" + std::to_string(checks) +
              " (variant, seed, level) reaches exact: plain 0, bTSM/fuse +-1, iTSM +-1/+-2/+-3/+-3" + first_failure};
}

Verdict loss_arithmetic() {
  auto gt = random_tensor({4, 3, 2}, 2, 0, 30, false);
  std::vector<Tensor> states;
  for (double o : {2.0, -2.0, 2.0, 2.0}) {
    Tensor s = gt.detach();
    for (auto& v : s.mutable_data()) v += static_cast<real>(o);
    states.push_back(s);
  }
  const double value = loss_eq2(states, gt, 0.8).item();
  double worst_identity = 0;
  for (std::size_t m = 1; m <= 8; ++m) {
    for (double gamma : {0.3, 0.5, 0.8, 0.99}) {
      double total = 0;
      for (double w : eq2_weights(m, gamma)) total += w;
      worst_identity =
          std::max(worst_identity, std::abs(total - (1 - std::pow(gamma, m)) / (static_cast<double>(m) * (1 - gamma))));
    }
  }
  const bool ok = std::abs(value - 1.476) <= kLossTolerance && worst_identity <= 1e-12;
  return {4, ok,
          "m=4, gamma=0.8, uniform error 2.0 -> " + fmt("%.12f", value) + " (expect 1.476, tol 1e-9); weight-sum identity max dev " +
              fmt("%.1e", worst_identity) + " over m 1..8"};
}

RefinerConfig locality_refiner(ReasoningMode mode, std::size_t k, std::size_t blocks) {
  RefinerConfig cfg;
  cfg.mode = mode;
  cfg.neighbors = k;
  cfg.blocks = blocks;
  cfg.heads = 2;
  cfg.width = 8;
  cfg.latents = 3;
  return cfg;
}

Verdict locality() {
  double worst = 0;
  std::size_t meaningful = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng pick(seed);
    const std::size_t n = 6 + pick.below(6), t = 2 + pick.below(4), k = 2 + pick.below(3);
    ParamStore store;
    Rng rng(seed + 50);
    Refiner ref(store, locality_refiner(ReasoningMode::knp, k, 1), 6, rng);
    auto pts = random_tensor({n, 2}, seed + 1, 0, 40, false);
    auto nbr = knn(pts, k);
    auto tokens = random_tensor({t, n, 6}, seed + 2, -1, 1, false);
    auto offsets = random_tensor({t, n, 2}, seed + 3, -2, 2, false);
    auto base = ref(tokens, offsets, nbr);
    const std::size_t i = pick.below(n);
    std::set<std::size_t> keep(nbr.row(i).begin(), nbr.row(i).end());
    keep.insert(i);
    auto masked = tokens.detach();
    for (std::size_t f = 0; f < t; ++f)
      for (std::size_t j = 0; j < n; ++j)
        if (!keep.count(j))
          for (std::size_t c = 0; c < 6; ++c) masked.mutable_data()[(f * n + j) * 6 + c] = 0;
    auto probe = ref(masked, offsets, nbr);
    double moved = 0;
    for (std::size_t f = 0; f < t; ++f)
      for (std::size_t c = 0; c < 2; ++c) worst = std::max(worst, std::abs(probe.at({f, i, c}) - base.at({f, i, c})));
    for (std::size_t q = 0; q < base.numel(); ++q) moved = std::max(moved, std::abs(base.data()[q] - probe.data()[q]));
    if (moved > 1e-9) ++meaningful;
  }

  const std::size_t n = 6;
  ParamStore sa, sb;
  Rng ra(7), rb(7);
  Refiner knp(sa, locality_refiner(ReasoningMode::knp, n, 3), 6, ra);
  Refiner full(sb, locality_refiner(ReasoningMode::full_joint, n, 3), 6, rb);
  auto pts = random_tensor({n, 2}, 8, 0, 30, false);
  auto tokens = random_tensor({3, n, 6}, 9, -1, 1, false);
  auto offsets = random_tensor({3, n, 2}, 10, -1, 1, false);
  auto a = knp(tokens, offsets, knn(pts, n));
  auto b = full(tokens, offsets, knn(pts, n));
  double gap = 0;
  for (std::size_t q = 0; q < a.numel(); ++q) gap = std::max(gap, std::abs(a.data()[q] - b.data()[q]));

  const bool ok = worst <= kLocalityTolerance && meaningful > 0 && gap <= kFullJointTolerance;
  return {5, ok,
          "10 configs, max deviation of the probed point " + fmt("%.2e", worst) + " (tol 1e-6, " +
              std::to_string(meaningful) + " configs where masking moved other points); knp K=N vs full-joint " +
              fmt("%.2e", gap) + " (tol 1e-5)"};
}

Verdict metrics() {
  std::vector<std::string> failed;
  auto check = [&](bool ok, const char* what) {
    if (!ok) failed.push_back(what);
  };
  auto near = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };

  auto ref = random_tensor({6, 5, 2}, 2, 10, 200, false);
  Tensor pred = ref.detach();
  for (std::size_t k = 0; k < pred.numel(); k += 2) pred.mutable_data()[k] += 1.5;
  auto ev = make_eval_frame(pred, ref, 256, 256);
  check(delta_accuracy(ev, 1) == 0 && delta_accuracy(ev, 2) == 100 && delta_accuracy(ev, 4) == 100, "delta offset");
  check(near(delta_avg(ev), 66.67, 0.005), "delta_avg offset");
  auto same = make_eval_frame(ref, ref, 256, 256);
  check(delta_avg(same) == 100 && mte(same) == 0, "perfect tracking");

  check(median({1, 2, 9}) == 2.0 && median({1, 3}) == 2.0, "median rules");
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> v(n);
    for (auto& x : v) x = std::round(rng.uniform(0, 20) * 8) / 8;
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    const double expect = n % 2 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2;
    if (median(v) != expect) {
      check(false, "median sort oracle");
      break;
    }
  }

  PhantomSpec s;
  s.translate = false;
  s.frames = 9;
  std::vector<std::size_t> order(s.points);
  for (std::size_t i = 0; i < s.points; ++i) order[i] = i;
  const double g = gls(phantom_trajectories(s), order).peak;
  check(s.amplitude == 0.18 && near(g, -18.0, 0.1), "GLS analytic phantom");

  auto a = agreement({{1, 0}, {-1, 0}, {2, 0}});
  check(near(a.mu, 0.667, 5e-4) && near(a.sigma, 1.528, 5e-4) && near(a.mad, 1.333, 5e-4), "agreement hand case");
  auto r = test_retest({{-16, -18}});
  check(near(r.mad, 2.0, 5e-4) && near(r.cv, 8.32, 5e-3), "test-retest hand case");

  std::string d = "delta 0/100/100 avg " + fmt("%.2f", delta_avg(ev)) + ", GLS " + fmt("%.2f%%", g) + ", agreement " +
                  fmt("mu %.3f", a.mu) + fmt(" sigma %.3f", a.sigma) + fmt(" MAD %.3f", a.mad) + ", test-retest" +
                  fmt(" MAD %.3f", r.mad) + fmt(" CV %.2f%%", r.cv);
  for (const auto& f : failed) d += "; FAILED " + f;
  return {7, failed.empty(), d};
}

}  // namespace

std::vector<Verdict> run_f64(const Selection& only) {
  std::vector<Verdict> out;
  if (selected(only, 1)) out.push_back(gradients());
  if (selected(only, 2)) out.push_back(correlation());
  if (selected(only, 3)) out.push_back(receptive_fields());
  if (selected(only, 4)) out.push_back(loss_arithmetic());
  if (selected(only, 5)) out.push_back(locality());
  if (selected(only, 7)) out.push_back(metrics());
  return out;
}

}  // namespace acceptance
