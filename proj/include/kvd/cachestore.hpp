#pragma once

// On-disk formats. All integers and floats are little-endian.
//
// CacheFile (30-byte header):
//   "KVD1" | version u16 | config hash u64 | n_layers u16 | n_heads u16 |
//   head_dim u16 | sink_count u16 | k u32 | origin N u32
//   positions (sinks + k) × u32 | scores k × f32 |
//   per layer: keys then values, (sinks + k) × d_model f32 row-major.
//
// Checkpoint:
//   "KVDC" | version u16 | kind u8 | config hash u64 | step i64 |
//   tensor section | optimizer section
//   section: count u32, then per tensor: name length u16, name bytes,
//   rank u8, dims u32 × rank, data f32.

#include <cstdint>
#include <string>

#include "kvd/compressor.hpp"
#include "kvd/config.hpp"
#include "kvd/model.hpp"

namespace kvd {

inline constexpr std::uint16_t kCacheFileVersion = 1;
inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::size_t kCacheHeaderBytes = 30;

// Requires positions shared across layers and one score per kept row.
// Written to a temporary file and renamed into place. Returns bytes written.
std::size_t save_cache(const CompressedCache& cache, const ModelConfig& config, const std::string& path);

// Throws FormatError on bad magic, version, config hash, sizes or a
// truncated payload; IoError when the file cannot be read.
CompressedCache load_cache(const std::string& path, const ModelConfig& config);

// Exact file size save_cache produces.
std::size_t cache_file_size(const ModelConfig& config, std::size_t sinks, std::size_t k);

enum class CheckpointKind : std::uint8_t { Base = 1, Adapter = 2 };

struct Checkpoint {
    CheckpointKind kind = CheckpointKind::Base;
    std::uint64_t config_hash = 0;
    std::int64_t step = 0;
    ParamMap tensors;
    ParamMap optimizer;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Typed wrappers that check kind and config hash.
void save_base(const BaseParams& params, const std::string& path);
BaseParams load_base(const std::string& path, const ModelConfig& config);
void save_adapters(const AdapterSet& adapters, const std::string& path);
AdapterSet load_adapters(const std::string& path, const ModelConfig& config);

// Writes `bytes` to `path` via a sibling temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace kvd
