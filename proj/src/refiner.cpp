#include "echotrack/refiner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace echotrack {
inline namespace ECHOTRACK_ABI {

std::string to_string(ReasoningMode m) {
  switch (m) {
    case ReasoningMode::knp: return "knp";
    case ReasoningMode::full_joint: return "full-joint";
    case ReasoningMode::cross_attention: return "cross-attention";
  }
  return "?";
}

ReasoningMode parse_reasoning_mode(const std::string& name) {
  if (name == "knp") return ReasoningMode::knp;
  if (name == "full-joint") return ReasoningMode::full_joint;
  if (name == "cross-attention") return ReasoningMode::cross_attention;
  throw std::invalid_argument("refiner: unknown reasoning mode '" + name + "'");
}

void RefinerConfig::validate() const {
  if (neighbors == 0) throw std::invalid_argument("refiner: K must be at least 1");
  if (iterations == 0) throw std::invalid_argument("refiner: iterations must be at least 1");
  if (blocks == 0) throw std::invalid_argument("refiner: at least one block is required");
  if (heads == 0 || width == 0 || width % heads != 0) {
    throw std::invalid_argument("refiner: width " + std::to_string(width) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (mode == ReasoningMode::cross_attention && latents == 0) {
    throw std::invalid_argument("refiner: cross-attention needs at least one latent");
  }
}

NeighborIndex knn(const Tensor& positions, std::size_t k) {
  if (positions.rank() != 2 || positions.extent(1) != 2) {
    throw ShapeError("knn: expected [N,2], got " + to_string(positions.shape()));
  }
  const std::size_t n = positions.extent(0);
  if (n == 0) throw std::invalid_argument("knn: no points");
  if (k == 0) throw std::invalid_argument("knn: K must be at least 1");
  NeighborIndex out{n, k, std::vector<std::size_t>(n * k)};
  const auto p = positions.data();
  std::vector<std::size_t> order(n);
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = static_cast<double>(p[2 * j]) - p[2 * i];
      const double dy = static_cast<double>(p[2 * j + 1]) - p[2 * i + 1];
      dist[j] = dx * dx + dy * dy;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (a == i || b == i) return a == i && b != i;
      return dist[a] < dist[b];
    });
    for (std::size_t c = 0; c < k; ++c) out.indices[i * k + c] = c < n ? order[c] : i;
  }
  return out;
}

Tensor time_encoding(std::size_t frames, std::size_t width) {
  Tensor out = Tensor::zeros({frames, width});
  auto d = out.mutable_data();
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t c = 0; c < width; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(c / 2 * 2) / static_cast<double>(width));
      const double a = static_cast<double>(t) * freq;
      d[t * width + c] = static_cast<real>(c % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  }
  return out;
}

Refiner::Refiner(ParamStore& store, const RefinerConfig& cfg, std::size_t token_width, Rng& rng)
    : cfg_(cfg) {
  cfg_.validate();
  const std::size_t w = cfg_.width;
  token_proj_ = Dense(store, "refiner.embed.tokens", token_width, w, rng);
  offset_proj_ = Dense(store, "refiner.embed.offset", 2, w, rng);
  if (cfg_.mode == ReasoningMode::cross_attention) {
    latents_ = store.add_normal("refiner.latents", {cfg_.latents, w}, 1.0, rng);
  }
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    const std::string name = "refiner.block" + std::to_string(b);
    Block blk;
    blk.time_norm = LayerNorm(store, name + ".time_norm", w);
    blk.time_attn = Attention(store, name + ".time_attn", w, cfg_.heads, rng);
    blk.joint_norm = LayerNorm(store, name + ".joint_norm", w);
    blk.joint_attn = Attention(store, name + ".joint_attn", w, cfg_.heads, rng);
    if (cfg_.mode == ReasoningMode::cross_attention) {
      blk.read_attn = Attention(store, name + ".read_attn", w, cfg_.heads, rng);
    }
    blk.mlp_norm = LayerNorm(store, name + ".mlp_norm", w);
    blk.mlp_in = Dense(store, name + ".mlp_in", w, 2 * w, rng);
    blk.mlp_out = Dense(store, name + ".mlp_out", 2 * w, w, rng);
    blocks_.push_back(std::move(blk));
  }
  head_norm_ = LayerNorm(store, "refiner.head_norm", w);
  head_ = Dense(store, "refiner.head", w, 2, rng, 0.01);
}

Tensor Refiner::joint(const Block& b, const Tensor& h, const NeighborIndex& nbr) const {
  const std::size_t t = h.extent(0), n = h.extent(1), w = h.extent(2);
  switch (cfg_.mode) {
    case ReasoningMode::knp: {
      auto context = ops::reshape(ops::index_select(h, 1, nbr.indices), {t * n, nbr.k, w});
      return ops::reshape(b.joint_attn(ops::reshape(h, {t * n, 1, w}), context), {t, n, w});
    }
    case ReasoningMode::full_joint:
      return b.joint_attn(h, h);
    case ReasoningMode::cross_attention: {
      auto lat = ops::repeat_leading(latents_, t);
      lat = ops::add(lat, (*b.read_attn)(lat, h));
      return b.joint_attn(h, lat);
    }
  }
  return {};
}

Tensor Refiner::operator()(const Tensor& tokens, const Tensor& offsets, const NeighborIndex& nbr) const {
  if (tokens.rank() != 3 || offsets.rank() != 3 || offsets.extent(2) != 2 ||
      tokens.extent(0) != offsets.extent(0) || tokens.extent(1) != offsets.extent(1)) {
    throw ShapeError("refiner: tokens " + to_string(tokens.shape()) + " and offsets " +
                     to_string(offsets.shape()) + " disagree");
  }
  const std::size_t t = tokens.extent(0), n = tokens.extent(1), w = cfg_.width;
  if (cfg_.mode == ReasoningMode::knp && nbr.points != n) {
    throw ShapeError("refiner: neighbor index covers " + std::to_string(nbr.points) + " points, tokens have " +
                     std::to_string(n));
  }
  auto enc = time_encoding(t, w);
  std::vector<std::size_t> frame_of(t * n);
  for (std::size_t k = 0; k < t * n; ++k) frame_of[k] = k / n;
  auto time = ops::reshape(ops::index_select(enc, 0, frame_of), {t, n, w});

  auto x = ops::add(ops::add(token_proj_(tokens), offset_proj_(offsets)), time);
  for (const auto& b : blocks_) {
    auto h = ops::permute(b.time_norm(x), {1, 0, 2});
    x = ops::add(x, ops::permute(b.time_attn(h, h), {1, 0, 2}));
    x = ops::add(x, joint(b, b.joint_norm(x), nbr));
    x = ops::add(x, b.mlp_out(ops::relu(b.mlp_in(b.mlp_norm(x)))));
  }
  return head_(head_norm_(x));
}

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
