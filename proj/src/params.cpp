#include "echotrack/params.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace echotrack {
inline namespace ECHOTRACK_ABI {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

Tensor ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("param store: duplicate name '" + name + "'");
  value.set_requires_grad(true);
  entries_.emplace_back(name, value);
  return value;
}

Tensor ParamStore::add_normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  Buffer v(numel(shape));
  for (auto& x : v) x = static_cast<real>(stddev * rng.normal());
  return add(name, Tensor(std::move(shape), std::move(v)));
}

Tensor ParamStore::add_uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
  Buffer v(numel(shape));
  for (auto& x : v) x = static_cast<real>(rng.uniform(-bound, bound));
  return add(name, Tensor(std::move(shape), std::move(v)));
}

Tensor ParamStore::add_constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), static_cast<real>(value)));
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return true;
  }
  return false;
}

Tensor ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("param store: no parameter named '" + name + "'");
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
