#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "echotrack/layers.hpp"

namespace echotrack {
inline namespace ECHOTRACK_ABI {

enum class ReasoningMode { knp, full_joint, cross_attention };

std::string to_string(ReasoningMode m);
/// Accepts "knp", "full-joint", "cross-attention".
ReasoningMode parse_reasoning_mode(const std::string& name);

struct RefinerConfig {
  std::size_t neighbors = 10;  // K
  std::size_t iterations = 4;  // m
  std::size_t blocks = 3;
  std::size_t heads = 4;
  std::size_t width = 96;
  ReasoningMode mode = ReasoningMode::knp;
  std::size_t latents = 8;  // cross-attention mode only
  bool recompute_neighbors = false;

  void validate() const;
};

/// Row i lists K point indices: i itself first, then the nearest others by
/// Euclidean distance (ties by ascending index), padded with i when N <= K.
struct NeighborIndex {
  std::size_t points = 0;
  std::size_t k = 0;
  std::vector<std::size_t> indices;

  std::span<const std::size_t> row(std::size_t i) const { return {indices.data() + i * k, k}; }
};

/// positions [N x 2]
NeighborIndex knn(const Tensor& positions, std::size_t k);

/// Sinusoidal encoding [T x width]: sin/cos pairs at geometric frequencies.
Tensor time_encoding(std::size_t frames, std::size_t width);

class Refiner {
 public:
  Refiner(ParamStore& store, const RefinerConfig& cfg, std::size_t token_width, Rng& rng);

  /// tokens [T x N x token_width], offsets (position - query) [T x N x 2]
  /// -> residual update [T x N x 2]
  Tensor operator()(const Tensor& tokens, const Tensor& offsets, const NeighborIndex& nbr) const;

  const RefinerConfig& config() const { return cfg_; }
  const Dense& head() const { return head_; }

 private:
  struct Block {
    LayerNorm time_norm, joint_norm, mlp_norm;
    Attention time_attn, joint_attn;
    std::optional<Attention> read_attn;  // cross-attention mode: latents read the points
    Dense mlp_in, mlp_out;
  };

  Tensor joint(const Block& b, const Tensor& h, const NeighborIndex& nbr) const;

  RefinerConfig cfg_;
  Dense token_proj_, offset_proj_;
  std::vector<Block> blocks_;
  Tensor latents_;
  LayerNorm head_norm_;
  Dense head_;
};

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
