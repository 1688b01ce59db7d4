#include "echotrack/evalkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "echotrack/ops.hpp"
#include "echotrack/parallel.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

namespace {

void require_trajectories(const Tensor& t, const char* what) {
  if (t.rank() != 3 || t.extent(2) != 2) {
    throw ShapeError(std::string("eval: ") + what + " must be [T, N, 2], got " + to_string(t.shape()));
  }
}

std::vector<double> rescaled(const Tensor& t, double sx, double sy) {
  std::vector<double> out(t.numel());
  const auto v = t.data();
  for (std::size_t k = 0; k < out.size(); k += 2) {
    out[k] = v[k] * sx;
    out[k + 1] = v[k + 1] * sy;
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0;
  const double m = mean_of(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

class ThreadScope {
 public:
  explicit ThreadScope(std::size_t n) : previous_(thread_count()) { set_thread_count(n); }
  ~ThreadScope() { set_thread_count(previous_); }

 private:
  std::size_t previous_;
};

Scores score(const EvalFrame& ev) {
  Scores s;
  s.d1 = delta_accuracy(ev, 1);
  s.d2 = delta_accuracy(ev, 2);
  s.d4 = delta_accuracy(ev, 4);
  s.davg = (s.d1 + s.d2 + s.d4) / 3;
  s.mte = mte(ev);
  return s;
}

void append(EvalFrame& into, const EvalFrame& part) {
  into.points = part.points;
  into.frames += part.frames;
  into.pred.insert(into.pred.end(), part.pred.begin(), part.pred.end());
  into.ref.insert(into.ref.end(), part.ref.begin(), part.ref.end());
  into.valid.insert(into.valid.end(), part.valid.begin(), part.valid.end());
  into.scale_x = part.scale_x;
  into.scale_y = part.scale_y;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::size_t EvalFrame::valid_count() const { return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true)); }

EvalFrame make_eval_frame(const Tensor& pred, const Tensor& ref, std::size_t height, std::size_t width,
                          std::vector<bool> valid) {
  require_trajectories(pred, "prediction");
  require_trajectories(ref, "reference");
  if (pred.shape() != ref.shape()) {
    throw ShapeError("eval: prediction " + to_string(pred.shape()) + " vs reference " + to_string(ref.shape()));
  }
  if (height == 0 || width == 0) throw std::invalid_argument("eval: frame size must be positive");
  EvalFrame ev;
  ev.frames = pred.extent(0);
  ev.points = pred.extent(1);
  ev.scale_x = kEvalGrid / static_cast<double>(width);
  ev.scale_y = kEvalGrid / static_cast<double>(height);
  ev.pred = rescaled(pred, ev.scale_x, ev.scale_y);
  ev.ref = rescaled(ref, ev.scale_x, ev.scale_y);
  if (valid.empty()) valid.assign(ev.frames * ev.points, true);
  if (valid.size() != ev.frames * ev.points) throw ShapeError("eval: validity mask must hold T*N entries");
  ev.valid = std::move(valid);
  return ev;
}

std::vector<double> point_errors(const EvalFrame& ev) {
  std::vector<double> out;
  out.reserve(ev.valid.size());
  for (std::size_t k = 0; k < ev.valid.size(); ++k) {
    if (!ev.valid[k]) continue;
    out.push_back(std::abs(ev.pred[2 * k] - ev.ref[2 * k]) + std::abs(ev.pred[2 * k + 1] - ev.ref[2 * k + 1]));
  }
  if (out.empty()) throw std::invalid_argument("eval: no valid trajectory points");
  return out;
}

double delta_accuracy(const EvalFrame& ev, double x) {
  const auto err = point_errors(ev);
  const auto hits = std::count_if(err.begin(), err.end(), [x](double e) { return e < x; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(err.size());
}

double delta_avg(const EvalFrame& ev) { return (delta_accuracy(ev, 1) + delta_accuracy(ev, 2) + delta_accuracy(ev, 4)) / 3; }

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: empty input");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return (lower + upper) / 2;
}

double mte(const EvalFrame& ev) { return median(point_errors(ev)); }

AitReport ait(const Tracker& tracker, const std::vector<TrackInput>& videos, std::size_t threads) {
  if (videos.empty()) throw std::invalid_argument("ait: no videos");
  ThreadScope scope(std::max<std::size_t>(1, threads));
  NoGradGuard no_grad;
  const auto run = [&](const TrackInput& in) { return tracker.track(in.video, in.queries, in.query_frame); };
  run(videos.front());
  double total = 0;
  for (const auto& in : videos) {
    const auto start = std::chrono::steady_clock::now();
    auto out = run(in);
    total += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!out.final_state().defined()) throw std::runtime_error("ait: tracker returned nothing");
  }
  AitReport r;
  r.seconds = total / static_cast<double>(videos.size());
  r.videos = videos.size();
  r.window = tracker.config().corr.window;
  r.neighbors = tracker.config().refiner.neighbors;
  r.iterations = tracker.config().refiner.iterations;
  r.threads = std::max<std::size_t>(1, threads);
  return r;
}

GlsSeries gls(const Tensor& traj, const std::vector<std::size_t>& wall_order, double pixel_spacing,
              std::size_t ed_frame) {
  require_trajectories(traj, "trajectory");
  const std::size_t T = traj.extent(0), N = traj.extent(1);
  if (wall_order.size() < 2) throw std::invalid_argument("gls: at least 2 wall points are required");
  for (auto i : wall_order)
    if (i >= N) throw std::invalid_argument("gls: wall order refers to point " + std::to_string(i));
  if (ed_frame >= T) throw std::invalid_argument("gls: end-diastole frame out of range");
  if (!(pixel_spacing > 0)) throw std::invalid_argument("gls: pixel spacing must be positive");
  GlsSeries s;
  s.ed_frame = ed_frame;
  s.lengths.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    double len = 0;
    for (std::size_t k = 0; k + 1 < wall_order.size(); ++k) {
      const std::size_t a = wall_order[k], b = wall_order[k + 1];
      len += std::hypot(traj.at({t, b, 0}) - traj.at({t, a, 0}), traj.at({t, b, 1}) - traj.at({t, a, 1}));
    }
    s.lengths[t] = len * pixel_spacing;
  }
  const double ed = s.lengths[ed_frame];
  if (!(ed > 0)) throw std::invalid_argument("gls: wall length at end-diastole is zero");
  s.peak = 100 * (*std::min_element(s.lengths.begin(), s.lengths.end()) - ed) / ed;
  return s;
}

Agreement agreement(const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.size() < 2) throw std::invalid_argument("agreement: at least 2 pairs are required");
  std::vector<double> method, reference, d, ad;
  for (const auto& [m, r] : pairs) {
    method.push_back(m);
    reference.push_back(r);
    d.push_back(m - r);
    ad.push_back(std::abs(m - r));
  }
  Agreement a;
  a.method = {mean_of(method), sample_sd(method)};
  a.reference = {mean_of(reference), sample_sd(reference)};
  a.mu = mean_of(d);
  a.sigma = sample_sd(d);
  a.mad = mean_of(ad);
  a.pairs = pairs.size();
  return a;
}

TestRetest test_retest(const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("test-retest: no pairs");
  double abs_sum = 0, sq_sum = 0, grand = 0;
  for (const auto& [a, b] : pairs) {
    abs_sum += std::abs(a - b);
    sq_sum += (a - b) * (a - b);
    grand += a + b;
  }
  const double n = static_cast<double>(pairs.size());
  grand /= 2 * n;
  if (grand == 0) throw std::invalid_argument("test-retest: grand mean is zero, CV undefined");
  TestRetest r;
  r.mad = abs_sum / n;
  r.cv = 100 * std::sqrt(sq_sum / n / 2) / std::abs(grand);
  r.pairs = pairs.size();
  return r;
}

HeldOutReport evaluate_held_out(const Tracker& tracker, const PhantomSpec& spec, std::size_t count) {
  if (count == 0) throw std::invalid_argument("eval: no held-out clips requested");
  NoGradGuard no_grad;
  EvalFrame model, still;
  for (std::size_t i = 0; i < count; ++i) {
    auto sample = generate(dataset_spec(spec, i));
    auto res = tracker.track(sample.video, sample.queries, sample.query_frame);
    append(model, make_eval_frame(res.final_state(), sample.trajectories, spec.height, spec.width));
    append(still, make_eval_frame(res.initial, sample.trajectories, spec.height, spec.width));
  }
  return {score(model), score(still), count};
}

std::string to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::window: return "window";
    case AblationAxis::temporal: return "temporal";
    case AblationAxis::reasoning: return "reasoning";
  }
  return "?";
}

AblationAxis parse_ablation_axis(const std::string& name) {
  if (name == "window") return AblationAxis::window;
  if (name == "temporal") return AblationAxis::temporal;
  if (name == "reasoning") return AblationAxis::reasoning;
  throw std::invalid_argument("ablate: unknown axis '" + name + "' (expected window, temporal or reasoning)");
}

std::vector<std::string> default_variants(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::window: return {"5", "7", "9", "11"};
    case AblationAxis::temporal: return {"fuse-add", "fuse-cat", "bTSM", "iTSM"};
    case AblationAxis::reasoning: return {"full-joint", "cross-attention", "knp"};
  }
  return {};
}

ModelConfig apply_variant(const ModelConfig& base, AblationAxis axis, const std::string& variant) {
  ModelConfig cfg = base;
  switch (axis) {
    case AblationAxis::window: {
      std::size_t used = 0;
      long r = 0;
      try {
        r = std::stol(variant, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != variant.size() || r < 3 || r % 2 == 0) {
        throw std::invalid_argument("ablate: window variant must be an odd integer >= 3, got '" + variant + "'");
      }
      cfg.corr.window = static_cast<std::size_t>(r);
      break;
    }
    case AblationAxis::temporal:
      cfg.backbone.variant = parse_backbone_variant(variant);
      break;
    case AblationAxis::reasoning:
      cfg.refiner.mode = parse_reasoning_mode(variant);
      break;
  }
  cfg.validate();
  return cfg;
}

AblationSettings micro_ablation_settings() {
  AblationSettings s;
  s.base.backbone.widths = {8, 8, 12, 12};
  s.base.corr.dim = 8;
  s.base.refiner.width = 24;
  s.base.refiner.heads = 2;
  s.base.refiner.blocks = 1;
  s.base.refiner.neighbors = 4;
  s.base.refiner.iterations = 2;
  s.train.epochs = 1;
  s.train.lr = 1e-3;
  s.train.deterministic = true;
  s.data.height = s.data.width = 48;
  s.data.inner_radius = 10;
  s.data.outer_radius = 18;
  s.data.frames = 6;
  s.data.points = 6;
  s.held_out = s.data;
  s.held_out.seed = 0x4e1d0u;
  s.train_samples = 4;
  s.eval_samples = 2;
  return s;
}

std::vector<AblationRow> ablation_run(AblationAxis axis, const AblationSettings& settings,
                                      const std::function<void(const AblationRow&)>& on_row) {
  const auto variants = settings.variants.empty() ? default_variants(axis) : settings.variants;
  std::vector<ModelConfig> configs;
  for (const auto& v : variants) configs.push_back(apply_variant(settings.base, axis, v));
  std::vector<TrackInput> timing;
  for (std::size_t i = 0; i < settings.eval_samples; ++i) {
    auto sample = generate(dataset_spec(settings.held_out, i));
    timing.push_back({sample.video, sample.queries, sample.query_frame});
  }
  std::vector<AblationRow> rows;
  for (std::size_t k = 0; k < variants.size(); ++k) {
    Tracker model(configs[k], settings.model_seed);
    auto trained = train(model, settings.train, phantom_source(settings.data), settings.train_samples);
    AblationRow row;
    row.variant = variants[k];
    row.scores = evaluate_held_out(model, settings.held_out, settings.eval_samples).model;
    row.ait = ait(model, timing);
    row.final_loss = trained.epoch_losses.empty() ? 0 : trained.epoch_losses.back();
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant,delta_1,delta_2,delta_4,mte,ait_s,delta_avg,window,neighbors,iterations\n";
  for (const auto& r : rows) {
    os << r.variant << ',' << fixed(r.scores.d1, 2) << ',' << fixed(r.scores.d2, 2) << ',' << fixed(r.scores.d4, 2)
       << ',' << fixed(r.scores.mte, 3) << ',' << fixed(r.ait.seconds, 4) << ',' << fixed(r.scores.davg, 2) << ','
       << r.ait.window << ',' << r.ait.neighbors << ',' << r.ait.iterations << '\n';
  }
  return os.str();
}

std::string ablation_markdown(AblationAxis axis, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "| " << to_string(axis) << " | δ¹ | δ² | δ⁴ | MTE | AIT (s) |\n";
  os << "|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    os << "| " << r.variant << " | " << fixed(r.scores.d1, 2) << " | " << fixed(r.scores.d2, 2) << " | "
       << fixed(r.scores.d4, 2) << " | " << fixed(r.scores.mte, 3) << " | " << fixed(r.ait.seconds, 4) << " |\n";
  }
  if (axis == AblationAxis::window && !rows.empty()) {
    os << "\nAIT non-decreasing with window size: " << (ait_non_decreasing(rows) ? "yes" : "no")
       << " (expected, not enforced)\n";
  }
  return os.str();
}

bool ait_non_decreasing(const std::vector<AblationRow>& rows) {
  for (std::size_t k = 1; k < rows.size(); ++k)
    if (rows[k].ait.seconds < rows[k - 1].ait.seconds) return false;
  return true;
}

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
