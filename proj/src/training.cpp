#include "echotrack/training.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <exception>
#include <mutex>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <thread>

#include "echotrack/parallel.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

namespace {

std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t count) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(mix(seed ^ mix(0x5eed0000 + epoch)));
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

// Single-producer, single-consumer hand-off with a fixed capacity.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
};

class DeterministicScope {
 public:
  explicit DeterministicScope(bool on) : previous_(deterministic()) {
    if (on) set_deterministic(true);
  }
  ~DeterministicScope() { set_deterministic(previous_); }

 private:
  bool previous_;
};

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("train: learning rate must be positive");
  if (!(gamma > 0 && gamma <= 1)) throw std::invalid_argument("train: gamma must lie in (0, 1]");
  if (batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
  if (!(weight_decay >= 0)) throw std::invalid_argument("train: weight decay must be non-negative");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw std::invalid_argument("train: warmup fraction must lie in [0, 1)");
  if (!(divergence_factor > 1)) throw std::invalid_argument("train: divergence factor must exceed 1");
}

std::vector<double> eq2_weights(std::size_t m, double gamma) {
  std::vector<double> w(m);
  for (std::size_t i = 1; i <= m; ++i) w[i - 1] = std::pow(gamma, static_cast<double>(m - i)) / static_cast<double>(m);
  return w;
}

Tensor loss_eq2(const std::vector<Tensor>& states, const Tensor& gt, double gamma) {
  if (states.empty()) throw std::invalid_argument("loss: at least one iteration is required");
  const auto w = eq2_weights(states.size(), gamma);
  Tensor total;
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (states[i].shape() != gt.shape()) {
      throw ShapeError("loss: prediction " + to_string(states[i].shape()) + " vs ground truth " + to_string(gt.shape()));
    }
    auto term = ops::scale(ops::mean(ops::abs(ops::sub(states[i], gt))), static_cast<real>(w[i]));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

double one_cycle_lr(double lr, std::size_t step, std::size_t total_steps, double warmup_fraction) {
  const double start = lr / 25, floor = lr / 100;
  if (total_steps <= 1) return start;
  const auto warm = static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
  if (step < warm) return start + (lr - start) * static_cast<double>(step) / static_cast<double>(warm);
  const std::size_t span = total_steps - 1 > warm ? total_steps - 1 - warm : 1;
  const double progress = std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(span));
  return floor + (lr - floor) * 0.5 * (1 + std::cos(std::numbers::pi * progress));
}

OptimState OptimState::zeros_like(const ParamStore& params) {
  OptimState s;
  for (const auto& [name, p] : params.entries()) {
    s.m.push_back(Tensor::zeros(p.shape()));
    s.v.push_back(Tensor::zeros(p.shape()));
  }
  return s;
}

void adamw_step(ParamStore& params, OptimState& state, const AdamWConfig& cfg, double lr) {
  const auto& entries = params.entries();
  if (state.m.size() != entries.size() || state.v.size() != entries.size()) {
    throw std::invalid_argument("adamw: optimizer state does not match the parameter store");
  }
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (state.m[k].shape() != entries[k].second.shape() || state.v[k].shape() != entries[k].second.shape()) {
      throw ShapeError("adamw: moment shape mismatch for '" + entries[k].first + "'");
    }
    for (auto g : entries[k].second.grad_data()) {
      if (!std::isfinite(g)) throw std::runtime_error("adamw: non-finite gradient in parameter '" + entries[k].first + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1 - std::pow(cfg.beta1, t), c2 = 1 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Tensor p = entries[k].second;
    auto w = p.mutable_data();
    auto g = p.grad_data();
    auto m = state.m[k].mutable_data();
    auto v = state.v[k].mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      double wi = static_cast<double>(w[i]) * (1 - lr * cfg.weight_decay);
      const double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * gi * gi;
      wi -= lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
      m[i] = static_cast<real>(mi);
      v[i] = static_cast<real>(vi);
      w[i] = static_cast<real>(wi);
    }
  }
}

ClipSource phantom_source(const PhantomSpec& spec) {
  return [spec](std::size_t index) {
    auto sample = generate(dataset_spec(spec, index));
    return Clip{sample.video, sample.trajectories, sample.query_frame};
  };
}

Clip prepare_clip(const Clip& clip, const TrainConfig& cfg, Rng& rng) {
  const std::size_t T = clip.video.extent(0), N = clip.gt.extent(1);
  Clip out = clip;
  if (cfg.clip_frames > 0 && cfg.clip_frames < T) {
    const std::size_t start = rng.below(T - cfg.clip_frames + 1);
    std::vector<std::size_t> frames(cfg.clip_frames);
    for (std::size_t i = 0; i < frames.size(); ++i) frames[i] = start + i;
    out.video = ops::index_select(out.video, 0, frames);
    out.gt = ops::index_select(out.gt, 0, frames);
    out.query_frame = 0;
  }
  if (cfg.points_per_sample > 0 && cfg.points_per_sample < N) {
    std::vector<std::size_t> all(N);
    for (std::size_t i = 0; i < N; ++i) all[i] = i;
    for (std::size_t i = 0; i < cfg.points_per_sample; ++i) std::swap(all[i], all[i + rng.below(N - i)]);
    all.resize(cfg.points_per_sample);
    std::sort(all.begin(), all.end());
    out.gt = ops::index_select(out.gt, 1, all);
  }
  if (cfg.augment) {
    const bool flip = rng.uniform() < 0.5;
    const double gain = rng.uniform(0.8, 1.2), bias = rng.uniform(-0.05, 0.05);
    out.video = out.video.detach();
    out.gt = out.gt.detach();
    const std::size_t H = out.video.extent(1), W = out.video.extent(2), C = out.video.extent(3);
    auto v = out.video.mutable_data();
    if (flip) {
      for (std::size_t row = 0; row < out.video.extent(0) * H; ++row)
        for (std::size_t x = 0; x < W / 2; ++x)
          for (std::size_t c = 0; c < C; ++c) std::swap(v[(row * W + x) * C + c], v[(row * W + W - 1 - x) * C + c]);
      auto g = out.gt.mutable_data();
      for (std::size_t k = 0; k < g.size(); k += 2) g[k] = static_cast<real>(W - 1) - g[k];
    }
    for (auto& x : v) x = static_cast<real>(std::clamp(gain * x + bias, 0.0, 1.0));
  }
  return out;
}

TrainResult train(Tracker& model, const TrainConfig& cfg, const ClipSource& source, std::size_t sample_count,
                  const TrainOptions& options) {
  cfg.validate();
  if (sample_count < cfg.batch_size) throw std::invalid_argument("train: fewer samples than one batch");
  DeterministicScope scope(cfg.deterministic);

  TrainResult result;
  result.steps_per_epoch = (sample_count + cfg.batch_size - 1) / cfg.batch_size;
  result.total_steps = result.steps_per_epoch * cfg.epochs;
  OptimState local;
  OptimState& state = options.state ? *options.state : local;
  if (state.m.empty()) state = OptimState::zeros_like(model.params());
  const std::size_t last_epoch =
      options.stop_after_epoch > 0 ? std::min(options.stop_after_epoch, cfg.epochs) : cfg.epochs;
  const std::size_t end_step = result.steps_per_epoch * last_epoch;
  const std::size_t first_step = state.step;
  if (first_step >= end_step) return result;

  // (step, batch slot) -> sample draw, produced ahead of the optimizer
  struct Item {
    std::size_t step;
    Clip clip;
  };
  BoundedQueue<Item> queue(4);
  std::exception_ptr producer_error;
  std::thread producer([&] {
    try {
      std::vector<std::size_t> order;
      std::size_t order_epoch = static_cast<std::size_t>(-1);
      for (std::size_t step = first_step; step < end_step; ++step) {
        const std::size_t epoch = step / result.steps_per_epoch;
        if (epoch != order_epoch) {
          order = epoch_order(cfg.seed, epoch, sample_count);
          order_epoch = epoch;
        }
        const std::size_t begin = (step % result.steps_per_epoch) * cfg.batch_size;
        const std::size_t end = std::min(begin + cfg.batch_size, sample_count);
        for (std::size_t pos = begin; pos < end; ++pos) {
          Rng rng(mix(cfg.seed ^ mix((epoch << 32) + pos + 1)));
          if (!queue.push(Item{step, prepare_clip(source(order[pos]), cfg, rng)})) return;
        }
      }
    } catch (...) {
      producer_error = std::current_exception();
    }
    queue.close();
  });
  struct Joiner {
    BoundedQueue<Item>& q;
    std::thread& t;
    ~Joiner() {
      q.close();
      if (t.joinable()) t.join();
    }
  } joiner{queue, producer};

  AdamWConfig adam;
  adam.weight_decay = cfg.weight_decay;
  double first_loss = -1;
  double epoch_sum = 0;
  std::size_t epoch_count = 0;
  for (std::size_t step = first_step; step < end_step; ++step) {
    const std::size_t epoch = step / result.steps_per_epoch;
    const std::size_t begin = (step % result.steps_per_epoch) * cfg.batch_size;
    const std::size_t batch = std::min(begin + cfg.batch_size, sample_count) - begin;
    model.params().zero_grad();
    double step_loss = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      auto item = queue.pop();
      if (!item) {
        if (producer_error) std::rethrow_exception(producer_error);
        throw std::runtime_error("train: data producer stopped early");
      }
      const Clip& clip = item->clip;
      const auto queries = ops::reshape(
          ops::index_select(clip.gt, 0, std::vector<std::size_t>{clip.query_frame}), {clip.gt.extent(1), 2});
      Tape tape;
      auto res = model.track(clip.video, queries, clip.query_frame);
      auto loss = loss_eq2(res.iterations, clip.gt, cfg.gamma);
      const double value = loss.item();
      if (!std::isfinite(value)) throw std::runtime_error("train: loss became non-finite at step " + std::to_string(step));
      tape.backward(ops::scale(loss, real(1) / static_cast<real>(batch)));
      step_loss += value / static_cast<double>(batch);
      epoch_sum += value;
      ++epoch_count;
    }
    if (first_loss < 0) first_loss = step_loss;
    if (step_loss > cfg.divergence_factor * first_loss) {
      throw std::runtime_error("train: loss " + std::to_string(step_loss) + " at step " + std::to_string(step) +
                               " exceeds " + std::to_string(cfg.divergence_factor) + "x the initial loss " +
                               std::to_string(first_loss));
    }
    const double lr = one_cycle_lr(cfg.lr, step, result.total_steps, cfg.warmup_fraction);
    adamw_step(model.params(), state, adam, lr);
    result.step_losses.push_back(step_loss);
    if (options.on_step) options.on_step({step, result.total_steps, epoch, step_loss, lr});
    if ((step + 1) % result.steps_per_epoch == 0 || step + 1 == end_step) {
      result.epoch_losses.push_back(epoch_sum / static_cast<double>(epoch_count));
      epoch_sum = 0;
      epoch_count = 0;
    }
  }
  model.params().zero_grad();
  return result;
}

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
