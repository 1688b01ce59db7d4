#include "echotrack/io.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace echotrack {
inline namespace ECHOTRACK_ABI {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'T', '2'};
constexpr const char* kWeightsHeader = "EMT2-WEIGHTS 1";

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
  const auto bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const unsigned char* p) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

class Cursor {
 public:
  Cursor(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  const unsigned char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw FormatError(what_ + ": truncated");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(std::uint8_t code) {
  switch (code) {
    case static_cast<std::uint8_t>(DType::f32): return 4;
    case static_cast<std::uint8_t>(DType::f64): return 8;
  }
  throw FormatError("container: unknown dtype code " + std::to_string(code));
}

std::string key_for(const std::string& kind, const std::string& name) { return kind + ":" + name; }

}  // namespace

std::string encode_container(const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument("container: undefined tensor");
  if (t.rank() > 255) throw std::invalid_argument("container: rank above 255");
  std::string out(kMagic, 4);
  put_le<std::uint16_t>(out, kContainerVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(kRealDType));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) put_le<std::uint64_t>(out, e);
  out.reserve(out.size() + t.numel() * sizeof(real));
  for (auto v : t.data()) put_le<real>(out, v);
  return out;
}

void write_container(std::ostream& out, const Tensor& t) {
  const auto bytes = encode_container(t);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor decode_container(const std::string& bytes) {
  Cursor c(bytes, "container");
  if (std::memcmp(c.take(4), kMagic, 4) != 0) throw FormatError("container: bad magic (expected EMT2)");
  const auto version = get_le<std::uint16_t>(c.take(2));
  if (version != kContainerVersion) throw FormatError("container: unsupported version " + std::to_string(version));
  const auto dtype = *c.take(1);
  const std::size_t width = dtype_size(dtype);
  const auto rank = *c.take(1);
  Shape shape(rank);
  std::size_t count = 1;
  for (auto& e : shape) {
    e = get_le<std::uint64_t>(c.take(8));
    if (e != 0 && count > (std::size_t(1) << 40) / e) throw FormatError("container: extents too large");
    count *= e;
  }
  if (c.remaining() != count * width) {
    throw FormatError("container: payload holds " + std::to_string(c.remaining()) + " bytes, extents " +
                      to_string(shape) + " need " + std::to_string(count * width));
  }
  Buffer data(count);
  const unsigned char* p = c.take(count * width);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = width == 4 ? static_cast<real>(get_le<float>(p + 4 * i)) : static_cast<real>(get_le<double>(p + 8 * i));
  }
  return Tensor(std::move(shape), std::move(data));
}

Tensor read_container(std::istream& in) {
  std::ostringstream os;
  os << in.rdbuf();
  return decode_container(os.str());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) { write_file(path, encode_container(t)); }

Tensor load_tensor(const std::filesystem::path& path) {
  try {
    return decode_container(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Checkpoint capture(const ParamStore& params, const OptimState* optim, std::vector<double> epoch_losses) {
  Checkpoint c;
  for (const auto& [name, p] : params.entries()) c.params.emplace_back(name, p.detach());
  if (optim && !optim->m.empty()) {
    OptimState s;
    s.step = optim->step;
    for (const auto& t : optim->m) s.m.push_back(t.detach());
    for (const auto& t : optim->v) s.v.push_back(t.detach());
    c.optim = std::move(s);
  }
  c.epoch_losses = std::move(epoch_losses);
  return c;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::pair<std::string, std::string>> blobs;
  for (const auto& [name, t] : ckpt.params) blobs.emplace_back(key_for("param", name), encode_container(t));
  if (ckpt.optim) {
    if (ckpt.optim->m.size() != ckpt.params.size() || ckpt.optim->v.size() != ckpt.params.size()) {
      throw std::invalid_argument("checkpoint: optimizer state does not match the parameters");
    }
    for (std::size_t k = 0; k < ckpt.params.size(); ++k) {
      blobs.emplace_back(key_for("adam.m", ckpt.params[k].first), encode_container(ckpt.optim->m[k]));
      blobs.emplace_back(key_for("adam.v", ckpt.params[k].first), encode_container(ckpt.optim->v[k]));
    }
  }
  std::ostringstream index;
  index << kWeightsHeader << '\n';
  if (ckpt.optim) index << "step " << ckpt.optim->step << '\n';
  for (double l : ckpt.epoch_losses) index << "loss " << std::setprecision(17) << l << '\n';
  for (const auto& [key, blob] : blobs) {
    if (key.find_first_of(" \n") != std::string::npos) throw std::invalid_argument("checkpoint: bad entry name '" + key + "'");
    index << "entry " << key << ' ' << blob.size() << '\n';
  }
  index << "end\n";
  std::string out = index.str();
  for (const auto& [key, blob] : blobs) out += blob;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  const auto header_end = bytes.find("\nend\n");
  if (bytes.rfind(std::string(kWeightsHeader) + "\n", 0) != 0 || header_end == std::string::npos) {
    throw FormatError("checkpoint: missing EMT2-WEIGHTS 1 index");
  }
  std::istringstream index(bytes.substr(0, header_end + 1));
  std::string line;
  std::getline(index, line);
  std::vector<std::pair<std::string, std::size_t>> entries;
  std::optional<std::size_t> step;
  Checkpoint c;
  while (std::getline(index, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "step") {
      std::size_t s;
      if (!(ls >> s)) throw FormatError("checkpoint: bad step line");
      step = s;
    } else if (kind == "loss") {
      double l;
      if (!(ls >> l)) throw FormatError("checkpoint: bad loss line");
      c.epoch_losses.push_back(l);
    } else if (kind == "entry") {
      std::string key;
      std::size_t size;
      if (!(ls >> key >> size)) throw FormatError("checkpoint: bad entry line '" + line + "'");
      entries.emplace_back(key, size);
    } else {
      throw FormatError("checkpoint: unknown index line '" + line + "'");
    }
  }
  std::size_t pos = header_end + 5;
  std::vector<std::pair<std::string, Tensor>> m, v;
  for (const auto& [key, size] : entries) {
    if (bytes.size() - pos < size) throw FormatError("checkpoint: truncated at entry " + key);
    Tensor t = decode_container(bytes.substr(pos, size));
    pos += size;
    const auto colon = key.find(':');
    const auto kind = key.substr(0, colon), name = key.substr(colon + 1);
    if (colon == std::string::npos) throw FormatError("checkpoint: bad entry key " + key);
    if (kind == "param") c.params.emplace_back(name, t);
    else if (kind == "adam.m") m.emplace_back(name, t);
    else if (kind == "adam.v") v.emplace_back(name, t);
    else throw FormatError("checkpoint: unknown entry kind " + kind);
  }
  if (pos != bytes.size()) throw FormatError("checkpoint: trailing bytes after the last entry");
  if (!m.empty() || step) {
    if (!step || m.size() != c.params.size() || v.size() != c.params.size()) {
      throw FormatError("checkpoint: incomplete optimizer state");
    }
    OptimState s;
    s.step = *step;
    for (std::size_t k = 0; k < c.params.size(); ++k) {
      if (m[k].first != c.params[k].first || v[k].first != c.params[k].first) {
        throw FormatError("checkpoint: optimizer entries out of order at " + c.params[k].first);
      }
      s.m.push_back(m[k].second);
      s.v.push_back(v[k].second);
    }
    c.optim = std::move(s);
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void restore(const Checkpoint& ckpt, ParamStore& params, OptimState* optim) {
  const auto& entries = params.entries();
  if (ckpt.params.size() != entries.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.params.size()) + " parameters, the model has " +
                      std::to_string(entries.size()));
  }
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& [name, p] = entries[k];
    const auto& [cname, ct] = ckpt.params[k];
    if (cname != name) throw FormatError("checkpoint parameter '" + cname + "' where the model expects '" + name + "'");
    if (ct.shape() != p.shape()) {
      throw FormatError("checkpoint parameter '" + name + "' has shape " + to_string(ct.shape()) + ", model needs " +
                        to_string(p.shape()));
    }
  }
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Tensor p = entries[k].second;
    std::copy(ckpt.params[k].second.data().begin(), ckpt.params[k].second.data().end(), p.mutable_data().begin());
  }
  if (optim) {
    if (ckpt.optim) {
      optim->step = ckpt.optim->step;
      optim->m.clear();
      optim->v.clear();
      for (const auto& t : ckpt.optim->m) optim->m.push_back(t.detach());
      for (const auto& t : ckpt.optim->v) optim->v.push_back(t.detach());
    } else {
      *optim = OptimState{};
    }
  }
}

std::string trajectories_csv(const Tensor& traj) {
  if (traj.rank() != 3 || traj.extent(2) != 2) throw ShapeError("csv: trajectories must be [T, N, 2]");
  std::string out = "t,i,x,y\n";
  char buf[96];
  for (std::size_t t = 0; t < traj.extent(0); ++t)
    for (std::size_t i = 0; i < traj.extent(1); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.6f,%.6f\n", t, i, static_cast<double>(traj.at({t, i, 0})),
                    static_cast<double>(traj.at({t, i, 1})));
      out += buf;
    }
  return out;
}

Tensor parse_queries_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<real> v;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    double x, y;
    std::string rest;
    if (!(ls >> x >> y) || (ls >> rest)) {
      if (lineno == 1 && v.empty()) continue;  // header
      throw FormatError("queries csv: line " + std::to_string(lineno) + " is not 'x,y'");
    }
    v.push_back(static_cast<real>(x));
    v.push_back(static_cast<real>(y));
  }
  if (v.empty()) throw FormatError("queries csv: no points");
  const std::size_t n = v.size() / 2;
  return Tensor({n, 2}, std::move(v));
}

}  // namespace ECHOTRACK_ABI
}  // namespace echotrack
