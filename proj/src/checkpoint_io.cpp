#include "reclab/checkpoint_io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "reclab/errors.hpp"

namespace reclab {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host order");

namespace {

constexpr char kMagic[4] = {'R', 'C', 'L', 'B'};
constexpr std::size_t kPreamble = 16;
const char* const kDtype = sizeof(Real) == 8 ? "f64" : "f32";

struct Segment {
  std::string name;
  const Tensor* tensor;
};

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

std::string shape_field(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

Shape parse_shape(const std::string& f) {
  if (f == "scalar") return {};
  Shape s;
  std::stringstream ss(f);
  std::string item;
  while (std::getline(ss, item, 'x')) s.push_back(static_cast<std::size_t>(std::stoull(item)));
  return s;
}

void write_file(const std::string& path, KeyValues header, const std::vector<Segment>& segments) {
  std::string payload;
  header["n_segments"] = std::to_string(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const Tensor& t = *segments[i].tensor;
    const std::size_t bytes = t.size() * sizeof(Real);
    const std::size_t offset = payload.size();
    payload.append(reinterpret_cast<const char*>(t.values().data()), bytes);
    header["segment." + std::to_string(i)] = segments[i].name + "|" + kDtype + "|" + std::to_string(offset) + "|" +
                                             std::to_string(bytes) + "|" +
                                             std::to_string(crc32_of(payload.data() + offset, bytes)) + "|" +
                                             shape_field(t.shape());
  }
  const std::string text = format_key_values(header);
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  put_u32(out, crc32_of(text.data(), text.size()));
  out += text;
  out += payload;

  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw MissingInputError("cannot write '" + tmp + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw MissingInputError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, target);
}

struct Parsed {
  KeyValues header;
  std::vector<std::pair<std::string, Tensor>> segments;
};

const std::string& need(const KeyValues& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("checkpoint header lacks '" + key + "'");
  return it->second;
}

Parsed read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInputError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string data = ss.str();

  if (data.size() < 4) {
    if (data.size() > 0 && std::memcmp(data.data(), kMagic, data.size()) == 0) throw TruncationError(path + ": truncated inside the preamble");
    throw FormatError(path + ": not an RCLB file");
  }
  if (std::memcmp(data.data(), kMagic, 4) != 0) throw FormatError(path + ": not an RCLB file");
  if (data.size() < kPreamble) throw TruncationError(path + ": truncated inside the preamble");
  const std::uint32_t version = get_u32(data, 4);
  if (version != kCheckpointVersion) {
    throw VersionError(path + ": format version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  }
  const std::size_t header_len = get_u32(data, 8);
  if (data.size() < kPreamble + header_len) throw TruncationError(path + ": truncated inside the header");
  const std::string text = data.substr(kPreamble, header_len);
  if (crc32_of(text.data(), text.size()) != get_u32(data, 12)) throw ChecksumError(path + ": header checksum mismatch");

  Parsed p;
  try {
    p.header = parse_key_values(text);
  } catch (const ConfigError& e) {
    throw FormatError(path + ": malformed header: " + e.what());
  }
  const std::size_t payload_at = kPreamble + header_len;
  const std::size_t payload_size = data.size() - payload_at;
  std::size_t n = 0;
  try {
    n = std::stoull(need(p.header, "n_segments"));
  } catch (const std::logic_error&) {
    throw FormatError(path + ": bad n_segments");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::string entry = need(p.header, "segment." + std::to_string(i));
    std::vector<std::string> fields;
    std::stringstream es(entry);
    std::string item;
    while (std::getline(es, item, '|')) fields.push_back(item);
    if (fields.size() != 6) throw FormatError(path + ": malformed directory entry " + std::to_string(i));
    const std::string& name = fields[0];
    if (fields[1] != kDtype) throw FormatError(path + ": segment '" + name + "' has dtype " + fields[1] + ", this build reads " + kDtype);
    std::size_t offset = 0, bytes = 0;
    std::uint32_t crc = 0;
    Shape shape;
    try {
      offset = std::stoull(fields[2]);
      bytes = std::stoull(fields[3]);
      crc = static_cast<std::uint32_t>(std::stoul(fields[4]));
      shape = parse_shape(fields[5]);
    } catch (const std::logic_error&) {
      throw FormatError(path + ": malformed directory entry for '" + name + "'");
    }
    if (bytes != shape_size(shape) * sizeof(Real)) throw FormatError(path + ": segment '" + name + "' size does not match its shape");
    if (offset > payload_size || bytes > payload_size - offset) {
      throw TruncationError(path + ": segment '" + name + "' extends past the end of the file");
    }
    const char* src = data.data() + payload_at + offset;
    if (crc32_of(src, bytes) != crc) throw ChecksumError(path + ": checksum mismatch in segment '" + name + "'");
    Tensor t(shape);
    if (bytes > 0) std::memcpy(t.values().data(), src, bytes);
    p.segments.emplace_back(name, std::move(t));
  }
  return p;
}

FileKind parse_file_kind(const std::string& s) {
  if (s == "checkpoint") return FileKind::checkpoint;
  if (s == "full") return FileKind::full_delta;
  if (s == "adapter") return FileKind::adapter_delta;
  throw FormatError("unknown checkpoint kind '" + s + "'");
}

std::uint64_t header_u64(const KeyValues& kv, const std::string& key) {
  try {
    return std::stoull(need(kv, key));
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint header key '" + key + "' is not a number");
  }
}

ModelConfig header_model(const KeyValues& kv) {
  try {
    return read_model_config(kv, "model");
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint model config: ") + e.what());
  }
}

}  // namespace

const char* file_kind_name(FileKind k) {
  switch (k) {
    case FileKind::checkpoint: return "checkpoint";
    case FileKind::full_delta: return "full";
    case FileKind::adapter_delta: return "adapter";
  }
  return "?";
}

std::uint32_t crc32_of(const void* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Checkpoint& ckpt) {
  KeyValues h;
  h["kind"] = file_kind_name(FileKind::checkpoint);
  write_model_config(cfg, "model", h);
  h["lineage"] = ckpt.lineage;
  h["domain"] = ckpt.domain_id;
  h["step"] = std::to_string(ckpt.step);
  h["seed"] = std::to_string(ckpt.seed);
  h["optim.step"] = std::to_string(ckpt.optim.step);
  std::vector<Segment> segs;
  for (const auto& [name, t] : ckpt.params.segments()) segs.push_back({"param/" + name, &t});
  for (const auto& [name, t] : ckpt.optim.m.segments()) segs.push_back({"adam.m/" + name, &t});
  for (const auto& [name, t] : ckpt.optim.v.segments()) segs.push_back({"adam.v/" + name, &t});
  write_file(path, std::move(h), segs);
}

void save_delta(const std::string& path, const ModelConfig& cfg, const AdaptedWeights& delta) {
  KeyValues h;
  h["kind"] = file_kind_name(delta.kind == DeltaKind::full ? FileKind::full_delta : FileKind::adapter_delta);
  write_model_config(cfg, "model", h);
  h["source_task"] = delta.source_task;
  h["source_checkpoint"] = delta.source_checkpoint;
  std::vector<Segment> segs;
  for (const auto& [name, t] : delta.segments.segments()) segs.push_back({name, &t});
  write_file(path, std::move(h), segs);
}

std::variant<LoadedCheckpoint, LoadedDelta> load_file(const std::string& path) {
  Parsed p = read_file(path);
  const FileKind kind = parse_file_kind(need(p.header, "kind"));
  const ModelConfig cfg = header_model(p.header);
  if (kind == FileKind::checkpoint) {
    LoadedCheckpoint out;
    out.config = cfg;
    Checkpoint& c = out.checkpoint;
    c.lineage = need(p.header, "lineage");
    c.domain_id = need(p.header, "domain");
    c.step = header_u64(p.header, "step");
    c.seed = header_u64(p.header, "seed");
    c.optim.step = header_u64(p.header, "optim.step");
    for (auto& [name, t] : p.segments) {
      if (name.rfind("param/", 0) == 0) c.params.add(name.substr(6), std::move(t));
      else if (name.rfind("adam.m/", 0) == 0) c.optim.m.add(name.substr(7), std::move(t));
      else if (name.rfind("adam.v/", 0) == 0) c.optim.v.add(name.substr(7), std::move(t));
      else throw FormatError(path + ": unexpected segment '" + name + "' in a checkpoint");
    }
    return out;
  }
  LoadedDelta out;
  out.config = cfg;
  out.delta.kind = kind == FileKind::full_delta ? DeltaKind::full : DeltaKind::adapter;
  out.delta.source_task = need(p.header, "source_task");
  out.delta.source_checkpoint = need(p.header, "source_checkpoint");
  for (auto& [name, t] : p.segments) out.delta.segments.add(name, std::move(t));
  return out;
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  auto v = load_file(path);
  if (auto* c = std::get_if<LoadedCheckpoint>(&v)) return std::move(*c);
  throw FormatError(path + ": holds adapted weights, not a checkpoint");
}

LoadedDelta load_delta(const std::string& path) {
  auto v = load_file(path);
  if (auto* d = std::get_if<LoadedDelta>(&v)) return std::move(*d);
  throw FormatError(path + ": holds a checkpoint, not adapted weights");
}

}  // namespace reclab
