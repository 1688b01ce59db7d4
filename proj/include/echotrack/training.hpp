#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "echotrack/model.hpp"
#include "echotrack/phantom.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

struct TrainConfig {
  double lr = 5e-4;
  double gamma = 0.8;
  std::size_t epochs = 10;
  std::size_t batch_size = 1;
  std::size_t clip_frames = 0;        // 0 keeps every frame
  std::size_t points_per_sample = 0;  // 0 keeps every point
  double weight_decay = 1e-4;
  double warmup_fraction = 0.1;
  double divergence_factor = 10;
  std::uint64_t seed = 0;
  bool deterministic = false;
  // Stand-in augmentation (horizontal flip + intensity jitter). This is a
  // placeholder for data variety, not the motion augmentation of the
  // original training recipe.
  bool augment = false;

  void validate() const;
};

/// Per-iteration weights gamma^(m-i) / m for i = 1..m.
std::vector<double> eq2_weights(std::size_t m, double gamma);

/// sum_i w_i * mean|states[i] - gt| over (t, n, coord).
Tensor loss_eq2(const std::vector<Tensor>& states, const Tensor& gt, double gamma);

/// Linear ramp lr/25 -> lr over the first warmup_fraction of steps, then
/// cosine decay to lr/100 at the last step.
double one_cycle_lr(double lr, std::size_t step, std::size_t total_steps, double warmup_fraction = 0.1);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct OptimState {
  std::size_t step = 0;
  std::vector<Tensor> m;  // mirrors the parameter store order and shapes
  std::vector<Tensor> v;

  static OptimState zeros_like(const ParamStore& params);
};

/// One decoupled-weight-decay Adam update from the gradients held by
/// `params`. Throws std::runtime_error naming the first parameter with a
/// non-finite gradient, before anything is modified.
void adamw_step(ParamStore& params, OptimState& state, const AdamWConfig& cfg, double lr);

/// One supervised example as the model sees it.
struct Clip {
  Tensor video;  // [T x H x W x C]
  Tensor gt;     // [T x N x 2]
  std::size_t query_frame = 0;
};

/// Produces clip `index` of a dataset; must be deterministic.
using ClipSource = std::function<Clip(std::size_t index)>;

/// Clips from dataset_spec(spec, index).
ClipSource phantom_source(const PhantomSpec& spec);

struct StepInfo {
  std::size_t step;
  std::size_t total_steps;
  std::size_t epoch;
  double loss;
  double lr;
};

struct TrainResult {
  std::vector<double> epoch_losses;  // mean sample loss per epoch run
  std::vector<double> step_losses;
  std::size_t steps_per_epoch = 0;
  std::size_t total_steps = 0;
};

struct TrainOptions {
  OptimState* state = nullptr;  // resume from / write back to; fresh if null
  std::size_t stop_after_epoch = 0;  // 0 runs to cfg.epochs
  std::function<void(const StepInfo&)> on_step;
};

/// Trains `model` in place. Sample order, clip windows, point subsets and
/// augmentation are drawn from (cfg.seed, epoch), so a resumed run replays the
/// schedule exactly. Throws std::runtime_error on divergence or NaN.
TrainResult train(Tracker& model, const TrainConfig& cfg, const ClipSource& source, std::size_t sample_count,
                  const TrainOptions& options = {});

/// Applies window / subset / augmentation choices of one training draw.
Clip prepare_clip(const Clip& clip, const TrainConfig& cfg, Rng& rng);

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
