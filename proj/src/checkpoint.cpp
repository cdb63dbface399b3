#include "swp/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include <unistd.h>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "swp/error.hpp"

namespace swp::checkpoint {
namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1, "byte");
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string str(const char* what) { return raw(u32(), what); }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }
  std::size_t position() const noexcept { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(fmt::format("checkpoint truncated: need {} bytes for {} at offset {}, {} left", n, what, pos_,
                                    bytes_.size() - pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

struct Record {
  std::string name;
  nn::Domain domain;
  const Tensor* tensor;
};

nn::Domain value_domain(const nn::Layer& layer) {
  switch (layer.kind()) {
    case nn::LayerKind::SpatialConv: return nn::Domain::spatial;
    case nn::LayerKind::WinogradConv: return nn::Domain::winograd;
    default: return nn::Domain::other;
  }
}

// Record layout of a model: names, expected domain flags and tensors.
std::vector<Record> records_of(const nn::Model& model) {
  std::vector<Record> out;
  for (std::size_t i = 0; i < model.size(); ++i) {
    const nn::Layer& layer = model.layer(i);
    for (const nn::Param* p : layer.params()) {
      const std::string base = std::to_string(i) + "." + p->name;
      out.push_back({base, value_domain(layer), &p->value});
      if (p->masked()) out.push_back({base + ".mask", nn::Domain::mask, &p->mask});
      if (!p->velocity.empty()) out.push_back({base + ".velocity", nn::Domain::other, &p->velocity});
    }
  }
  return out;
}

std::string instance_to_string(const WinogradInstance& inst) {
  std::string s = std::to_string(inst.m) + " " + std::to_string(inst.n);
  for (const auto& p : inst.points) s += " " + to_string(p);
  return s;
}

WinogradInstance instance_from_string(const std::string& text) {
  std::istringstream in(text);
  WinogradInstance inst;
  if (!(in >> inst.m >> inst.n)) throw FormatError("checkpoint instance '" + text + "' is malformed");
  std::string tok;
  try {
    while (in >> tok) inst.points.push_back(parse_rational(tok));
    inst.validate();
  } catch (const std::exception& e) {
    throw FormatError("checkpoint instance '" + text + "': " + e.what());
  }
  return inst;
}

std::string shape_to_metadata(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

Shape shape_from_metadata(const std::string& text) {
  Shape s;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find('x', start), text.size());
    const std::string part = text.substr(start, end - start);
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
      throw FormatError("checkpoint input shape '" + text + "' is malformed");
    s.push_back(std::stoi(part));
    start = end + 1;
  }
  return s;
}

void check_metadata(const Metadata& metadata) {
  for (const auto& [key, value] : metadata) {
    if (key.empty() || key.find_first_of("=\n") != std::string::npos)
      throw ConfigError("checkpoint metadata key '" + key + "' is empty or contains '=' or a newline");
    if (value.find('\n') != std::string::npos)
      throw ConfigError("checkpoint metadata value for '" + key + "' contains a newline");
  }
}

}  // namespace

std::optional<WinogradInstance> model_instance(const nn::Model& model) {
  std::optional<WinogradInstance> found;
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (model.layer(i).kind() != nn::LayerKind::WinogradConv) continue;
    const auto& inst = static_cast<const nn::WinogradConv&>(model.layer(i)).transforms().instance();
    if (found && !(*found == inst)) throw ConfigError("Winograd layers use different instances");
    found = inst;
  }
  return found;
}

std::vector<std::uint8_t> serialize(const nn::Model& model, const Metadata& metadata) {
  check_metadata(metadata);
  Metadata meta = metadata;
  meta[kTopologyKey] = model.topology();
  meta[kInputShapeKey] = shape_to_metadata(model.input_shape());
  if (const auto inst = model_instance(model)) meta[kInstanceKey] = instance_to_string(*inst);

  const auto records = records_of(model);
  Writer w;
  w.raw(std::string(kMagic, 4));
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    w.str(r.name);
    w.u8(static_cast<std::uint8_t>(r.domain));
    w.u8(static_cast<std::uint8_t>(r.tensor->rank()));
    for (int d : r.tensor->shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : r.tensor->values()) w.f32(v);
  }
  std::string block;
  for (const auto& [key, value] : meta) block += key + "=" + value + "\n";
  w.str(block);
  return w.take();
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const std::string magic = r.raw(4, "magic");
  if (magic != std::string(kMagic, 4)) throw FormatError("not a checkpoint: bad magic '" + magic + "'");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError(fmt::format("unsupported checkpoint version {} (this build reads {})", version, kVersion));

  struct Loaded {
    nn::Domain domain;
    Tensor tensor;
  };
  std::map<std::string, Loaded> loaded;
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.str("record name");
    const std::uint8_t domain = r.u8();
    if (domain > 3) throw FormatError(fmt::format("record '{}' has unknown domain flag {}", name, domain));
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int>(r.u32());
      numel *= static_cast<std::size_t>(d);
    }
    if (numel > (bytes.size() - r.position()) / 4)
      throw FormatError(fmt::format("checkpoint truncated: record '{}' needs {} floats", name, numel));
    std::vector<float> data(numel);
    for (auto& v : data) v = r.f32();
    if (!loaded.emplace(name, Loaded{static_cast<nn::Domain>(domain), Tensor(shape, std::move(data))}).second)
      throw FormatError("duplicate checkpoint record '" + name + "'");
  }
  const std::string block = r.str("metadata");
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint metadata");

  Checkpoint out;
  std::istringstream lines(block);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) throw FormatError("malformed metadata line '" + line + "'");
    out.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const char* key : {kTopologyKey, kInputShapeKey})
    if (!out.metadata.count(key)) throw FormatError(std::string("checkpoint metadata lacks '") + key + "'");

  const auto inst_it = out.metadata.find(kInstanceKey);
  const WinogradInstance instance = inst_it != out.metadata.end() ? instance_from_string(inst_it->second)
                                                                  : WinogradInstance::with_default_points(6, 3);
  try {
    out.model = nn::build_model(out.metadata[kTopologyKey], shape_from_metadata(out.metadata[kInputShapeKey]), 0,
                                instance);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint topology is invalid: ") + e.what());
  }

  std::set<std::string> expected;
  for (const auto& rec : records_of(out.model)) {
    expected.insert(rec.name);
    const auto it = loaded.find(rec.name);
    if (it == loaded.end()) throw FormatError("checkpoint lacks record '" + rec.name + "'");
    if (it->second.domain != rec.domain)
      throw FormatError(fmt::format("record '{}' has domain flag {}, layer type requires {}", rec.name,
                                    static_cast<int>(it->second.domain), static_cast<int>(rec.domain)));
    if (it->second.tensor.shape() != rec.tensor->shape())
      throw FormatError("record '" + rec.name + "' has shape " + shape_to_string(it->second.tensor.shape()) +
                        ", topology requires " + shape_to_string(rec.tensor->shape()));
    *const_cast<Tensor*>(rec.tensor) = std::move(it->second.tensor);
  }
  for (const auto& [name, rec] : loaded)
    if (!expected.count(name)) throw FormatError("checkpoint record '" + name + "' does not match the topology");
  return out;
}

void save(const std::filesystem::path& path, const nn::Model& model, const Metadata& metadata) {
  const auto bytes = serialize(model, metadata);
  auto tmp = path;
  tmp += fmt::format(".tmp{}", ::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Checkpoint load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return deserialize(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::string model_hash(const nn::Model& model) { return sha256_hex(serialize(model)); }

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

void restore_rng(std::mt19937_64& rng, const std::string& state) {
  std::istringstream in(state);
  std::mt19937_64 r;
  if (!(in >> r)) throw FormatError("malformed RNG state");
  rng = r;
}

}  // namespace swp::checkpoint
