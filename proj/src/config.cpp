#include "echotrack/config.hpp"

#include <json.hpp>
#include <set>

namespace echotrack {
inline namespace ECHOTRACK_ABI {

namespace {

using Json = nlohmann::ordered_json;

// Reads fields out of one JSON object and remembers which keys were used, so
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw FormatError("config: '" + label() + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& field) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      field = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw FormatError("config: '" + at(key) + "' has the wrong type");
    }
  }

  void read_size(const char* key, std::size_t& field) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_number_unsigned()) throw FormatError("config: '" + at(key) + "' must be a non-negative integer");
    field = it->get<std::size_t>();
  }

  Section child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    static const Json empty = Json::object();
    return Section(it == j_.end() ? empty : *it, at(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw FormatError("config: unknown key '" + at(it.key()) + "'");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }
  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <std::size_t N>
void read_array(Section& s, const char* key, std::array<std::size_t, N>& field) {
  std::vector<std::size_t> v(field.begin(), field.end());
  s.read(key, v);
  if (v.size() != N) throw FormatError(std::string("config: '") + key + "' needs " + std::to_string(N) + " entries");
  std::copy(v.begin(), v.end(), field.begin());
}

}  // namespace

RunConfig::RunConfig() {
  phantom.frames = 8;
  phantom.points = 8;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  phantom.validate();
  held_out().validate();
  if (train_samples < train.batch_size) throw std::invalid_argument("config: train_samples below the batch size");
}

PhantomSpec RunConfig::held_out() const {
  PhantomSpec s = phantom;
  s.seed = held_out_seed;
  return s;
}

namespace {

RunConfig parse_unchecked(const std::string& json_text) {
  Json root;
  try {
    root = Json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  RunConfig cfg;
  Section top(root, "");
  top.read("seed", cfg.seed);
  {
    auto m = top.child("model");
    auto b = m.child("backbone");
    std::string variant = to_string(cfg.model.backbone.variant);
    b.read("variant", variant);
    cfg.model.backbone.variant = parse_backbone_variant(variant);
    read_array(b, "widths", cfg.model.backbone.widths);
    read_array(b, "strides", cfg.model.backbone.strides);
    b.read("shift_fraction", cfg.model.backbone.shift_fraction);
    b.read_size("in_channels", cfg.model.backbone.in_channels);
    b.finish();
    auto c = m.child("corr");
    c.read_size("window", cfg.model.corr.window);
    c.read_size("dim", cfg.model.corr.dim);
    c.finish();
    auto r = m.child("refiner");
    std::string mode = to_string(cfg.model.refiner.mode);
    r.read("mode", mode);
    cfg.model.refiner.mode = parse_reasoning_mode(mode);
    r.read_size("neighbors", cfg.model.refiner.neighbors);
    r.read_size("iterations", cfg.model.refiner.iterations);
    r.read_size("blocks", cfg.model.refiner.blocks);
    r.read_size("heads", cfg.model.refiner.heads);
    r.read_size("width", cfg.model.refiner.width);
    r.read_size("latents", cfg.model.refiner.latents);
    r.read("recompute_neighbors", cfg.model.refiner.recompute_neighbors);
    r.finish();
    m.finish();
  }
  {
    auto t = top.child("train");
    t.read("lr", cfg.train.lr);
    t.read("gamma", cfg.train.gamma);
    t.read_size("epochs", cfg.train.epochs);
    t.read_size("batch_size", cfg.train.batch_size);
    t.read_size("clip_frames", cfg.train.clip_frames);
    t.read_size("points_per_sample", cfg.train.points_per_sample);
    t.read("weight_decay", cfg.train.weight_decay);
    t.read("warmup_fraction", cfg.train.warmup_fraction);
    t.read("divergence_factor", cfg.train.divergence_factor);
    t.read("deterministic", cfg.train.deterministic);
    t.read("augment", cfg.train.augment);
    t.finish();
  }
  {
    auto p = top.child("phantom");
    p.read_size("height", cfg.phantom.height);
    p.read_size("width", cfg.phantom.width);
    p.read_size("frames", cfg.phantom.frames);
    p.read_size("points", cfg.phantom.points);
    p.read("amplitude", cfg.phantom.amplitude);
    p.read("inner_radius", cfg.phantom.inner_radius);
    p.read("outer_radius", cfg.phantom.outer_radius);
    p.read("grain", cfg.phantom.grain);
    p.read("noise", cfg.phantom.noise);
    p.read("span_degrees", cfg.phantom.span_degrees);
    p.read("translate", cfg.phantom.translate);
    p.read("center_dx", cfg.phantom.center_dx);
    p.read("center_dy", cfg.phantom.center_dy);
    p.read("seed", cfg.phantom.seed);
    p.finish();
  }
  {
    auto d = top.child("data");
    d.read_size("train_samples", cfg.train_samples);
    d.read_size("eval_samples", cfg.eval_samples);
    d.read("held_out_seed", cfg.held_out_seed);
    d.finish();
  }
  top.finish();
  cfg.train.seed = cfg.seed;
  return cfg;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  try {
    auto cfg = parse_unchecked(json_text);
    cfg.validate();
    return cfg;
  } catch (const FormatError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
}

std::string dump_run_config(const RunConfig& cfg) {
  Json j;
  j["seed"] = cfg.seed;
  const auto& b = cfg.model.backbone;
  j["model"]["backbone"] = {{"variant", to_string(b.variant)},
                            {"widths", b.widths},
                            {"strides", b.strides},
                            {"shift_fraction", b.shift_fraction},
                            {"in_channels", b.in_channels}};
  j["model"]["corr"] = {{"window", cfg.model.corr.window}, {"dim", cfg.model.corr.dim}};
  const auto& r = cfg.model.refiner;
  j["model"]["refiner"] = {{"mode", to_string(r.mode)},   {"neighbors", r.neighbors}, {"iterations", r.iterations},
                           {"blocks", r.blocks},          {"heads", r.heads},         {"width", r.width},
                           {"latents", r.latents},        {"recompute_neighbors", r.recompute_neighbors}};
  const auto& t = cfg.train;
  j["train"] = {{"lr", t.lr},
                {"gamma", t.gamma},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"clip_frames", t.clip_frames},
                {"points_per_sample", t.points_per_sample},
                {"weight_decay", t.weight_decay},
                {"warmup_fraction", t.warmup_fraction},
                {"divergence_factor", t.divergence_factor},
                {"deterministic", t.deterministic},
                {"augment", t.augment}};
  const auto& p = cfg.phantom;
  j["phantom"] = {{"height", p.height},
                  {"width", p.width},
                  {"frames", p.frames},
                  {"points", p.points},
                  {"amplitude", p.amplitude},
                  {"inner_radius", p.inner_radius},
                  {"outer_radius", p.outer_radius},
                  {"grain", p.grain},
                  {"noise", p.noise},
                  {"span_degrees", p.span_degrees},
                  {"translate", p.translate},
                  {"center_dx", p.center_dx},
                  {"center_dy", p.center_dy},
                  {"seed", p.seed}};
  j["data"] = {{"train_samples", cfg.train_samples},
               {"eval_samples", cfg.eval_samples},
               {"held_out_seed", cfg.held_out_seed}};
  return j.dump(2) + "\n";
}

RunConfig load_run_config(const std::filesystem::path& path) {
  try {
    return parse_run_config(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
