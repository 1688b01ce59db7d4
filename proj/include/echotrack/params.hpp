#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "echotrack/tensor.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

/// Seeded generator whose output is identical across standard libraries:
/// only the engine comes from <random>, the distributions are computed here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0;
};

/// Ordered, named set of learnable tensors. Registration order is the
/// serialization order.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor value);
  Tensor add_normal(const std::string& name, Shape shape, double stddev, Rng& rng);
  Tensor add_uniform(const std::string& name, Shape shape, double bound, Rng& rng);
  Tensor add_constant(const std::string& name, Shape shape, double value);

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  bool contains(const std::string& name) const;
  Tensor get(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
