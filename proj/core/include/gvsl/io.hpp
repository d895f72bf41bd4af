#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gvsl/geometry.hpp"
#include "gvsl/graph.hpp"
#include "gvsl/optim.hpp"
#include "gvsl/volume.hpp"

namespace gvsl::io {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Volume files
//
// Little-endian layout, 48-byte header:
//   0  char[4]  magic "GVOL"
//   4  u16      version (1)
//   6  u16      dtype (0 = f32, 1 = f64, 2 = i32)
//   8  u32[3]   extents Z, Y, X
//   20 f64[3]   spacing x, y, z
//   44 u32      channel count
// followed by channels * Z * Y * X values in C order (x fastest, channel
// slowest).

enum class DType : std::uint16_t { F32 = 0, F64 = 1, I32 = 2 };

constexpr std::uint16_t kVolumeVersion = 1;
constexpr std::size_t kVolumeHeaderBytes = 48;

struct ReadLimits {
  /// Reads refuse headers that claim more payload than this.
  std::uint64_t max_payload_bytes = std::uint64_t{1} << 32;
};

void write_volume(const fs::path& path, const Volume& volume, DType dtype = DType::F64);
Volume read_volume(const fs::path& path, const ReadLimits& limits = {});

void write_labels(const fs::path& path, const LabelGrid& labels);
LabelGrid read_labels(const fs::path& path, const ReadLimits& limits = {});

void write_dvf(const fs::path& path, const geometry::Dvf& dvf);
geometry::Dvf read_dvf(const fs::path& path, const ReadLimits& limits = {});

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian layout:
//   char[4] "GVCK", u16 version
//   u32 + bytes      architecture descriptor (JSON text)
//   u64              iteration counter
//   u32 + bytes      random generator state
//   u32 tensor count, then per tensor:
//       u16 + bytes name, u8 rank, u32[rank] extents, u64 offset (in values)
//   u32 optimiser-state count, then per entry:
//       u16 + bytes parameter name, u64 step counter
//       (moments are stored as tensors "@adam.m/<name>" and "@adam.v/<name>")
//   u64 history rows, then rows * 4 f64 (ncc, smooth, mse, total)
//   u64 value count, then the f64 payload
//   u32 CRC-32 of every preceding byte

constexpr std::uint16_t kCheckpointVersion = 1;

struct HistoryRow {
  double ncc = 0.0;
  double smooth = 0.0;
  double mse = 0.0;
  double total = 0.0;
  friend bool operator==(const HistoryRow&, const HistoryRow&) = default;
};

struct Checkpoint {
  nlohmann::json arch;
  std::uint64_t iteration = 0;
  std::string rng_state;
  ad::TensorMap tensors;
  std::map<std::string, ad::AdamState> adam;
  std::vector<HistoryRow> history;
};

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const fs::path& path, const ReadLimits& limits = {});

/// Throws CompatibilityError naming the first tensor whose presence or shape
/// differs from `expected`.
void check_compatible(const Checkpoint& checkpoint, const std::map<std::string, Shape>& expected);

// ---------------------------------------------------------------------------
// Dataset manifests (JSON text). Paths are relative to the manifest's
// directory.

struct ManifestEntry {
  std::string id;
  std::string volume;
  std::string labels;
  std::string gt_dvf;
  geometry::AffineParams gt_affine;
  std::string split;  // "train", "val" or "test"
  std::uint64_t seed = 0;
  std::map<std::string, std::string> checksums;  // keyed by "volume", "labels", "gt_dvf"
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<ManifestEntry> entries;
  fs::path root;  // directory holding the manifest; not serialised

  std::vector<const ManifestEntry*> split(const std::string& name) const;
  fs::path resolve(const std::string& relative) const { return root / relative; }
};

void write_manifest(const fs::path& path, const DatasetManifest& manifest);
/// Parses a manifest; with `verify`, checks every referenced file exists and
/// matches its recorded checksum.
DatasetManifest read_manifest(const fs::path& path, bool verify = true);

// ---------------------------------------------------------------------------
// Helpers

/// CRC-32 of a file's bytes, as 8 lowercase hex digits.
std::string file_checksum(const fs::path& path);
std::string bytes_checksum(const std::string& bytes);

/// Writes through a temporary sibling and renames it into place.
void atomic_write(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);

}  // namespace gvsl::io
