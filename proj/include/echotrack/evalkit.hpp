#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "echotrack/model.hpp"
#include "echotrack/training.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

inline constexpr double kEvalGrid = 256;

/// Predicted and reference trajectories on the 256 x 256 evaluation grid.
struct EvalFrame {
  std::size_t frames = 0, points = 0;
  std::vector<double> pred;  // [T x N x 2], x then y
  std::vector<double> ref;
  std::vector<bool> valid;   // [T x N]
  double scale_x = 1, scale_y = 1;

  std::size_t valid_count() const;
};

/// Rescales [T x N x 2] pixel trajectories from an H x W frame. An empty
/// mask means every point is valid.
EvalFrame make_eval_frame(const Tensor& pred, const Tensor& ref, std::size_t height, std::size_t width,
                          std::vector<bool> valid = {});

/// L1 error of every valid (t, n) pair, in evaluation-grid pixels.
std::vector<double> point_errors(const EvalFrame& ev);

/// Percent of valid pairs with L1 error strictly below x.
double delta_accuracy(const EvalFrame& ev, double x);
/// Mean of delta_accuracy over x in {1, 2, 4}.
double delta_avg(const EvalFrame& ev);

double median(std::vector<double> values);
double mte(const EvalFrame& ev);

struct TrackInput {
  Tensor video;
  Tensor queries;
  std::size_t query_frame = 0;
};

struct AitReport {
  double seconds = 0;  // mean wall clock per video
  std::size_t videos = 0;
  std::size_t window = 0, neighbors = 0, iterations = 0;
  std::size_t threads = 1;
};

/// Runs videos[0] once untimed, then times a full track() of every video.
AitReport ait(const Tracker& tracker, const std::vector<TrackInput>& videos, std::size_t threads = 1);

struct GlsSeries {
  std::vector<double> lengths;
  std::size_t ed_frame = 0;
  double peak = 0;  // percent
};

/// Wall polyline length per frame and peak strain relative to ed_frame.
GlsSeries gls(const Tensor& traj, const std::vector<std::size_t>& wall_order, double pixel_spacing = 1,
              std::size_t ed_frame = 0);

struct ArmStats {
  double mean = 0, sd = 0;
};

struct Agreement {
  ArmStats method, reference;
  double mu = 0, sigma = 0, mad = 0;
  std::size_t pairs = 0;
};

/// pairs are (method, reference).
Agreement agreement(const std::vector<std::pair<double, double>>& pairs);

struct TestRetest {
  double mad = 0;
  double cv = 0;  // percent, within-subject
  std::size_t pairs = 0;
};

TestRetest test_retest(const std::vector<std::pair<double, double>>& pairs);

// ------------------------------------------------------------ held-out scoring

struct Scores {
  double d1 = 0, d2 = 0, d4 = 0, davg = 0, mte = 0;
};

struct HeldOutReport {
  Scores model;
  Scores baseline;  // queries held still for every frame
  std::size_t clips = 0;
};

/// Tracks clips dataset_spec(spec, 0..count-1) and pools every (clip, t, n).
HeldOutReport evaluate_held_out(const Tracker& tracker, const PhantomSpec& spec, std::size_t count);

// ------------------------------------------------------------------ ablation

enum class AblationAxis { window, temporal, reasoning };

std::string to_string(AblationAxis axis);
AblationAxis parse_ablation_axis(const std::string& name);
std::vector<std::string> default_variants(AblationAxis axis);

/// `base` with one axis set to `variant`; throws std::invalid_argument for
/// names the axis does not know.
ModelConfig apply_variant(const ModelConfig& base, AblationAxis axis, const std::string& variant);

struct AblationSettings {
  ModelConfig base;
  TrainConfig train;
  PhantomSpec data;      // training clips come from dataset_spec(data, i)
  PhantomSpec held_out;  // evaluation clips
  std::size_t train_samples = 8;
  std::size_t eval_samples = 4;
  std::uint64_t model_seed = 0;
  std::vector<std::string> variants;  // empty runs default_variants
};

struct AblationRow {
  std::string variant;
  Scores scores;
  AitReport ait;
  double final_loss = 0;
};

AblationSettings micro_ablation_settings();

std::vector<AblationRow> ablation_run(AblationAxis axis, const AblationSettings& settings,
                                      const std::function<void(const AblationRow&)>& on_row = {});

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string ablation_markdown(AblationAxis axis, const std::vector<AblationRow>& rows);

/// True when AIT never drops as the listed rows go on.
bool ait_non_decreasing(const std::vector<AblationRow>& rows);

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
