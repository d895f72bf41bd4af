#include "gvsl/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "gvsl/errors.hpp"

namespace gvsl::io {

static_assert(std::endian::native == std::endian::little, "gvsl file formats assume a little-endian host");

namespace {

constexpr char kVolumeMagic[4] = {'G', 'V', 'O', 'L'};
constexpr char kCheckpointMagic[4] = {'G', 'V', 'C', 'K'};
constexpr std::string_view kAdamM = "@adam.m/";
constexpr std::string_view kAdamV = "@adam.v/";

class Writer {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&value);
    buf_.append(p, sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str16(const std::string& s) {
    if (s.size() > 0xFFFF) throw FormatError("name too long for checkpoint: " + s.substr(0, 40));
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void str32(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& data, std::string what) : data_(data), what_(std::move(what)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str16() { return str(get<std::uint16_t>()); }
  std::string str32() { return str(get<std::uint32_t>()); }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

  void need(std::size_t n) const {
    if (n > remaining()) throw FormatError(what_ + ": truncated file");
  }

 private:
  const std::string& data_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const char* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto step = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(p), step);
    p += step;
    n -= step;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::I32: return 4;
  }
  throw FormatError("unknown dtype");
}

struct VolumeHeader {
  DType dtype = DType::F64;
  std::uint32_t z = 0, y = 0, x = 0, channels = 0;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};

  std::uint64_t count() const { return std::uint64_t{channels} * z * y * x; }
};

std::string encode_volume(const VolumeHeader& h, const std::vector<double>& values) {
  Writer w;
  w.bytes(kVolumeMagic, 4);
  w.put<std::uint16_t>(kVolumeVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(h.dtype));
  w.put<std::uint32_t>(h.z);
  w.put<std::uint32_t>(h.y);
  w.put<std::uint32_t>(h.x);
  for (double s : h.spacing) w.put<double>(s);
  w.put<std::uint32_t>(h.channels);
  w.buffer().reserve(kVolumeHeaderBytes + values.size() * dtype_size(h.dtype));
  switch (h.dtype) {
    case DType::F64: w.bytes(values.data(), values.size() * sizeof(double)); break;
    case DType::F32:
      for (double v : values) w.put<float>(static_cast<float>(v));
      break;
    case DType::I32:
      for (double v : values) w.put<std::int32_t>(static_cast<std::int32_t>(v));
      break;
  }
  return std::move(w.buffer());
}

std::pair<VolumeHeader, std::vector<double>> decode_volume(const fs::path& path, const ReadLimits& limits) {
  const std::string data = read_file(path);
  const std::string what = path.string();
  Reader r(data, what);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kVolumeMagic, 4) != 0) throw FormatError(what + ": not a volume file (bad magic)");
  const auto version = r.get<std::uint16_t>();
  if (version != kVolumeVersion) {
    throw CompatibilityError(what + ": unsupported volume version " + std::to_string(version));
  }
  VolumeHeader h;
  const auto dtype = r.get<std::uint16_t>();
  if (dtype > 2) throw FormatError(what + ": unknown dtype " + std::to_string(dtype));
  h.dtype = static_cast<DType>(dtype);
  h.z = r.get<std::uint32_t>();
  h.y = r.get<std::uint32_t>();
  h.x = r.get<std::uint32_t>();
  for (double& s : h.spacing) s = r.get<double>();
  h.channels = r.get<std::uint32_t>();
  if (h.z == 0 || h.y == 0 || h.x == 0 || h.channels == 0) throw FormatError(what + ": zero extent in header");
  for (double s : h.spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw FormatError(what + ": invalid spacing in header");
  }
  const std::uint64_t count = h.count();
  const std::uint64_t bytes = count * dtype_size(h.dtype);
  if (bytes / dtype_size(h.dtype) != count || bytes > limits.max_payload_bytes) {
    throw FormatError(what + ": header payload size exceeds the read limit");
  }
  if (bytes != r.remaining()) {
    throw FormatError(what + ": payload is " + std::to_string(r.remaining()) + " bytes, header implies " +
                      std::to_string(bytes));
  }
  std::vector<double> values(static_cast<std::size_t>(count));
  switch (h.dtype) {
    case DType::F64: r.bytes(values.data(), bytes); break;
    case DType::F32:
      for (auto& v : values) v = r.get<float>();
      break;
    case DType::I32:
      for (auto& v : values) v = r.get<std::int32_t>();
      break;
  }
  return {h, std::move(values)};
}

std::uint32_t checked_u32(std::int64_t v) {
  if (v < 1 || v > std::int64_t{0xFFFFFFFF}) throw FormatError("extent out of range for volume file");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

// ---------------------------------------------------------------------------

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return std::move(ss).str();
}

void atomic_write(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::random_device rd;
  fs::path tmp = path;
  tmp += ".tmp" + hex32(rd());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("write failed: " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

std::string bytes_checksum(const std::string& bytes) { return hex32(crc32_of(bytes.data(), bytes.size())); }

std::string file_checksum(const fs::path& path) { return bytes_checksum(read_file(path)); }

// ---------------------------------------------------------------------------

void write_volume(const fs::path& path, const Volume& volume, DType dtype) {
  if (volume.data.rank() != 4) throw ShapeError("volume data must be [C,Z,Y,X]");
  VolumeHeader h;
  h.dtype = dtype;
  h.channels = checked_u32(volume.data.dim(0));
  h.z = checked_u32(volume.data.dim(1));
  h.y = checked_u32(volume.data.dim(2));
  h.x = checked_u32(volume.data.dim(3));
  h.spacing = volume.spacing;
  atomic_write(path, encode_volume(h, volume.data.storage()));
}

Volume read_volume(const fs::path& path, const ReadLimits& limits) {
  auto [h, values] = decode_volume(path, limits);
  return Volume(Tensor({h.channels, h.z, h.y, h.x}, std::move(values)), h.spacing);
}

void write_labels(const fs::path& path, const LabelGrid& labels) {
  labels.grid.validate();
  if (labels.labels.size() != static_cast<std::size_t>(labels.grid.voxels())) {
    throw ShapeError("label count does not match grid");
  }
  VolumeHeader h;
  h.dtype = DType::I32;
  h.channels = 1;
  h.z = checked_u32(labels.grid.z);
  h.y = checked_u32(labels.grid.y);
  h.x = checked_u32(labels.grid.x);
  std::vector<double> values(labels.labels.begin(), labels.labels.end());
  atomic_write(path, encode_volume(h, values));
}

LabelGrid read_labels(const fs::path& path, const ReadLimits& limits) {
  auto [h, values] = decode_volume(path, limits);
  if (h.dtype != DType::I32 || h.channels != 1) throw FormatError(path.string() + ": not a label volume");
  LabelGrid out;
  out.grid = {h.z, h.y, h.x};
  out.labels.assign(values.size(), 0);
  for (std::size_t i = 0; i < values.size(); ++i) out.labels[i] = static_cast<std::int32_t>(values[i]);
  return out;
}

void write_dvf(const fs::path& path, const geometry::Dvf& dvf) {
  if (dvf.field.rank() != 4 || dvf.field.dim(0) != 3) throw ShapeError("displacement field must be [3,Z,Y,X]");
  write_volume(path, Volume(dvf.field, dvf.spacing), DType::F64);
}

geometry::Dvf read_dvf(const fs::path& path, const ReadLimits& limits) {
  Volume v = read_volume(path, limits);
  if (v.channels() != 3) throw FormatError(path.string() + ": displacement field needs 3 channels");
  return geometry::Dvf(std::move(v.data), v.spacing);
}

// ---------------------------------------------------------------------------

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  // Gather tensors, including optimiser moments, in a stable order.
  std::vector<std::pair<std::string, const Tensor*>> table;
  for (const auto& [name, t] : ck.tensors) {
    if (name.starts_with('@')) throw FormatError("tensor names may not start with '@': " + name);
    table.emplace_back(name, &t);
  }
  for (const auto& [name, st] : ck.adam) {
    table.emplace_back(std::string(kAdamM) + name, &st.m);
    table.emplace_back(std::string(kAdamV) + name, &st.v);
  }

  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.str32(ck.arch.dump());
  w.put<std::uint64_t>(ck.iteration);
  w.str32(ck.rng_state);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(table.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : table) {
    w.str16(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t->rank()));
    for (auto d : t->shape()) w.put<std::uint32_t>(checked_u32(d));
    w.put<std::uint64_t>(offset);
    offset += static_cast<std::uint64_t>(t->numel());
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.adam.size()));
  for (const auto& [name, st] : ck.adam) {
    w.str16(name);
    w.put<std::uint64_t>(st.t);
  }
  w.put<std::uint64_t>(ck.history.size());
  for (const auto& row : ck.history) {
    w.put<double>(row.ncc);
    w.put<double>(row.smooth);
    w.put<double>(row.mse);
    w.put<double>(row.total);
  }
  w.put<std::uint64_t>(offset);
  for (const auto& [name, t] : table) w.bytes(t->data().data(), t->storage().size() * sizeof(double));
  const std::uint32_t crc = crc32_of(w.buffer().data(), w.buffer().size());
  w.put<std::uint32_t>(crc);
  atomic_write(path, w.buffer());
}

Checkpoint load_checkpoint(const fs::path& path, const ReadLimits& limits) {
  const std::string data = read_file(path);
  const std::string what = path.string();
  if (data.size() < 4 + 2 + 4) throw FormatError(what + ": truncated checkpoint");
  if (std::memcmp(data.data(), kCheckpointMagic, 4) != 0) throw FormatError(what + ": not a checkpoint (bad magic)");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, data.data() + data.size() - 4, 4);
  if (crc32_of(data.data(), data.size() - 4) != stored_crc) throw FormatError(what + ": checksum mismatch");

  Reader r(data, what);
  r.str(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw CompatibilityError(what + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  try {
    ck.arch = nlohmann::json::parse(r.str32());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": bad architecture descriptor: " + e.what());
  }
  ck.iteration = r.get<std::uint64_t>();
  ck.rng_state = r.str32();

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  const auto count = r.get<std::uint32_t>();
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str16();
    const auto rank = r.get<std::uint8_t>();
    if (rank < 1 || rank > 5) throw FormatError(what + ": bad rank for tensor " + e.name);
    for (int d = 0; d < rank; ++d) {
      const auto ext = r.get<std::uint32_t>();
      if (ext == 0) throw FormatError(what + ": zero extent for tensor " + e.name);
      e.shape.push_back(ext);
    }
    e.offset = r.get<std::uint64_t>();
    entries.push_back(std::move(e));
  }
  std::map<std::string, std::uint64_t> steps;
  const auto adam_count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < adam_count; ++i) {
    std::string name = r.str16();
    steps[name] = r.get<std::uint64_t>();
  }
  const auto rows = r.get<std::uint64_t>();
  if (rows > r.remaining() / (4 * sizeof(double))) throw FormatError(what + ": history length exceeds file size");
  ck.history.resize(static_cast<std::size_t>(rows));
  for (auto& row : ck.history) {
    row.ncc = r.get<double>();
    row.smooth = r.get<double>();
    row.mse = r.get<double>();
    row.total = r.get<double>();
  }
  const auto total = r.get<std::uint64_t>();
  if (total > limits.max_payload_bytes / sizeof(double) || total * sizeof(double) + 4 != r.remaining()) {
    throw FormatError(what + ": payload size does not match header");
  }
  const std::size_t base = r.position();
  for (const auto& e : entries) {
    const auto n = static_cast<std::uint64_t>(numel(e.shape));
    if (e.offset > total || n > total - e.offset) throw FormatError(what + ": tensor " + e.name + " out of range");
    std::vector<double> values(static_cast<std::size_t>(n));
    std::memcpy(values.data(), data.data() + base + e.offset * sizeof(double), n * sizeof(double));
    Tensor t(e.shape, std::move(values));
    if (e.name.starts_with(kAdamM)) {
      ck.adam[e.name.substr(kAdamM.size())].m = std::move(t);
    } else if (e.name.starts_with(kAdamV)) {
      ck.adam[e.name.substr(kAdamV.size())].v = std::move(t);
    } else {
      ck.tensors.emplace(e.name, std::move(t));
    }
  }
  for (auto& [name, st] : ck.adam) {
    auto it = steps.find(name);
    if (it == steps.end() || st.m.empty() || st.v.empty()) {
      throw FormatError(what + ": incomplete optimiser state for " + name);
    }
    st.t = it->second;
  }
  if (steps.size() != ck.adam.size()) throw FormatError(what + ": optimiser state without moments");
  return ck;
}

void check_compatible(const Checkpoint& ck, const std::map<std::string, Shape>& expected) {
  for (const auto& [name, shape] : expected) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw CompatibilityError("architecture mismatch: checkpoint lacks tensor " + name);
    if (it->second.shape() != shape) {
      throw CompatibilityError("architecture mismatch: tensor " + name + " has shape " +
                               to_string(it->second.shape()) + ", expected " + to_string(shape));
    }
  }
  for (const auto& [name, t] : ck.tensors) {
    if (!expected.contains(name)) {
      throw CompatibilityError("architecture mismatch: checkpoint has unexpected tensor " + name);
    }
  }
}

// ---------------------------------------------------------------------------

std::vector<const ManifestEntry*> DatasetManifest::split(const std::string& name) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == name) out.push_back(&e);
  }
  return out;
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
  nlohmann::json j;
  j["format"] = "gvsl-dataset";
  j["version"] = 1;
  j["seed"] = m.seed;
  j["config"] = m.config;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : m.entries) {
    j["entries"].push_back({{"id", e.id},
                            {"volume", e.volume},
                            {"labels", e.labels},
                            {"gt_dvf", e.gt_dvf},
                            {"gt_affine", e.gt_affine.flatten()},
                            {"split", e.split},
                            {"seed", e.seed},
                            {"checksums", e.checksums}});
  }
  atomic_write(path, j.dump(2) + "\n");
}

DatasetManifest read_manifest(const fs::path& path, bool verify) {
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    const nlohmann::json j = nlohmann::json::parse(read_file(path));
    if (j.value("format", std::string{}) != "gvsl-dataset") throw FormatError(path.string() + ": not a dataset manifest");
    if (j.at("version").get<int>() != 1) throw CompatibilityError(path.string() + ": unsupported manifest version");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.value("config", nlohmann::json::object());
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.id = je.at("id").get<std::string>();
      e.volume = je.at("volume").get<std::string>();
      e.labels = je.at("labels").get<std::string>();
      e.gt_dvf = je.at("gt_dvf").get<std::string>();
      e.gt_affine = geometry::AffineParams::from_flat(je.at("gt_affine").get<std::vector<double>>());
      e.split = je.at("split").get<std::string>();
      e.seed = je.value("seed", std::uint64_t{0});
      e.checksums = je.value("checksums", std::map<std::string, std::string>{});
      if (e.split != "train" && e.split != "val" && e.split != "test") {
        throw FormatError(path.string() + ": entry " + e.id + " has unknown split " + e.split);
      }
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed manifest: " + e.what());
  }
  if (verify) {
    for (const auto& e : m.entries) {
      for (const auto& [key, rel] :
           {std::pair{"volume", e.volume}, std::pair{"labels", e.labels}, std::pair{"gt_dvf", e.gt_dvf}}) {
        const fs::path p = m.resolve(rel);
        if (!fs::exists(p)) throw IoError("manifest references missing file " + p.string());
        auto it = e.checksums.find(key);
        if (it != e.checksums.end() && file_checksum(p) != it->second) {
          throw FormatError("checksum mismatch for " + p.string());
        }
      }
    }
  }
  return m;
}

}  // namespace gvsl::io
