#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "echotrack/io.hpp"
#include "echotrack/model.hpp"
#include "echotrack/phantom.hpp"
#include "echotrack/training.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

/// Everything a run depends on. The JSON form nests "model" (backbone, corr,
/// refiner), "train", "phantom" and "data"; unknown keys are rejected and
/// absent keys keep the defaults below.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PhantomSpec phantom;
  std::size_t train_samples = 200;
  std::size_t eval_samples = 20;
  std::uint64_t held_out_seed = 999;
  std::uint64_t seed = 0;  // model initialization and training draws

  RunConfig();
  void validate() const;
  /// Phantom spec of the held-out set: same geometry, disjoint seed stream.
  PhantomSpec held_out() const;
};

/// Throws FormatError naming the offending key path.
RunConfig parse_run_config(const std::string& json_text);
/// Fully resolved, stable key order, two-space indent, trailing newline.
std::string dump_run_config(const RunConfig& cfg);

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
