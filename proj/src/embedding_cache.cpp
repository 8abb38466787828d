#include "lcbm/embedding_cache.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>

#include "le_bytes.hpp"
#include "lcbm/rng.hpp"

namespace lcbm {
namespace {

using detail::crc;
using detail::get_le;
using detail::put_le;

constexpr char kMagic[8] = {'L', 'C', 'B', 'M', 'E', 'M', 'B', '1'};

}  // namespace

std::string CacheKey::str() const {
  return image_id + "|" + std::to_string(patch_index) + "|" + oracle_id;
}

EmbeddingCache::EmbeddingCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create cache directory " + dir_.string());
}

std::filesystem::path EmbeddingCache::path_for(const CacheKey& key) const {
  const std::string k = key.str();
  std::ostringstream name;
  name << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(k.data(), k.size())
       << ".emb";
  return dir_ / name.str();
}

void EmbeddingCache::put(const CacheKey& key, const std::vector<double>& vec) {
  const std::string k = key.str();
  std::string rec(kMagic, sizeof kMagic);
  put_le(rec, k.size(), 4);
  rec += k;
  put_le(rec, vec.size(), 4);
  for (double v : vec) put_le(rec, std::bit_cast<std::uint64_t>(v), 8);
  put_le(rec, crc(rec, rec.size()), 4);

  std::unique_lock lock(mu_);
  const auto final_path = path_for(key);
  auto tmp = final_path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write cache entry " + tmp.string());
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  std::filesystem::rename(tmp, final_path);
}

std::optional<std::vector<double>> EmbeddingCache::get(const CacheKey& key) const {
  std::shared_lock lock(mu_);
  const auto path = path_for(key);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::string rec((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto corrupt = [&](const char* why) {
    return CacheCorruptError("corrupt cache entry " + path.string() + ": " + why);
  };
  if (rec.size() < sizeof kMagic + 12 || std::memcmp(rec.data(), kMagic, sizeof kMagic) != 0)
    throw corrupt("bad header");
  std::size_t pos = sizeof kMagic;
  const auto klen = get_le(rec, pos, 4);
  pos += 4;
  if (pos + klen + 8 > rec.size()) throw corrupt("truncated key");
  const std::string stored_key = rec.substr(pos, klen);
  pos += klen;
  const auto dim = get_le(rec, pos, 4);
  pos += 4;
  if (pos + dim * 8 + 4 != rec.size()) throw corrupt("length mismatch");
  const auto stored_crc = static_cast<std::uint32_t>(get_le(rec, pos + dim * 8, 4));
  if (stored_crc != crc(rec, pos + dim * 8)) throw corrupt("checksum mismatch");
  if (stored_key != key.str()) return std::nullopt;
  std::vector<double> vec(dim);
  for (std::size_t i = 0; i < dim; ++i)
    vec[i] = std::bit_cast<double>(get_le(rec, pos + 8 * i, 8));
  return vec;
}

void EmbeddingCache::erase(const CacheKey& key) {
  std::unique_lock lock(mu_);
  std::error_code ec;
  std::filesystem::remove(path_for(key), ec);
}

std::size_t EmbeddingCache::entry_count() const {
  std::shared_lock lock(mu_);
  std::size_t n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir_))
    if (e.path().extension() == ".emb") ++n;
  return n;
}

}  // namespace lcbm
