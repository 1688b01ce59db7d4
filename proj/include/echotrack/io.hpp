#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "echotrack/params.hpp"
#include "echotrack/training.hpp"

namespace echotrack {

/// Malformed or mismatched input file.
class FormatError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline namespace ECHOTRACK_ABI {

inline constexpr std::uint16_t kContainerVersion = 1;

/// "EMT2" | u16 version | u8 dtype | u8 rank | rank x u64 extents | payload,
/// all little-endian. Values are written in the build's own precision.
void write_container(std::ostream& out, const Tensor& t);
std::string encode_container(const Tensor& t);

/// Accepts f32 and f64 payloads and converts to `real`.
Tensor read_container(std::istream& in);
Tensor decode_container(const std::string& bytes);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Parameters plus (optionally) optimizer moments and the loss history.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> params;
  std::optional<OptimState> optim;
  std::vector<double> epoch_losses;
};

Checkpoint capture(const ParamStore& params, const OptimState* optim = nullptr,
                   std::vector<double> epoch_losses = {});

/// Text index ("EMT2-WEIGHTS 1", metadata and one line per entry) followed
/// by the concatenated containers.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into `params`. Every parameter must be present
/// with the same shape; extra entries are an error too.
void restore(const Checkpoint& ckpt, ParamStore& params, OptimState* optim = nullptr);

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames it into place.
void write_file(const std::filesystem::path& path, const std::string& bytes);

/// "t,i,x,y" rows with six decimals.
std::string trajectories_csv(const Tensor& traj);
/// Parses "x,y" rows (an optional header line is skipped) into [N x 2].
Tensor parse_queries_csv(const std::string& text);

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
