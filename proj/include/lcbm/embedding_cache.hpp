#pragma once

#include <filesystem>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "lcbm/errors.hpp"

namespace lcbm {

struct CacheKey {
  std::string image_id;
  std::size_t patch_index = 0;
  std::string oracle_id;

  std::string str() const;
};

class CacheCorruptError : public IoError {
 public:
  using IoError::IoError;
};

// Content-addressed on-disk store of embedding vectors. One file per key:
//   "LCBMEMB1" | u32 key length | key bytes | u32 dim | dim x f64 | u32 crc32
// all little-endian; the CRC covers every preceding byte. A stored key that
// differs from the requested one (oracle version change, hash collision) is a
// miss. Readers run concurrently; writers are serialized and atomic.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path dir);

  void put(const CacheKey& key, const std::vector<double>& vec);
  // nullopt on a miss; CacheCorruptError when the checksum fails.
  std::optional<std::vector<double>> get(const CacheKey& key) const;
  void erase(const CacheKey& key);

  std::filesystem::path path_for(const CacheKey& key) const;
  std::size_t entry_count() const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  mutable std::shared_mutex mu_;
};

}  // namespace lcbm
