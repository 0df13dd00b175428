#include "modality_embed.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <mutex>

#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace bfm::embed {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

std::string normalize_modality_name(std::string_view raw) {
  std::string_view s = trim(raw);
  const auto dot = s.rfind('.');
  if (dot != std::string_view::npos && dot > 0) s = trim(s.substr(0, dot));
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (out.empty()) fail(ErrorCode::InvalidName, "modality name '" + std::string(raw) + "' is empty");
  return out;
}

std::vector<double> hash_seeded_vector(const std::string& canonical, int dim) {
  CounterRng rng = CounterRng::stream(stable_hash(canonical), {static_cast<std::uint64_t>(dim)});
  std::vector<double> v(static_cast<std::size_t>(dim));
  double norm2 = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v) x *= inv;
  return v;
}

EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open embedding table " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, "embedding table " + path.string() + ": " + e.what());
  }
  if (!doc.is_object()) fail(ErrorCode::FormatError, "embedding table must be a JSON object");

  EmbeddingTable table;
  std::optional<std::size_t> dim;
  for (const auto& [key, value] : doc.items()) {
    if (!value.is_array()) fail(ErrorCode::FormatError, "entry '" + key + "' is not an array");
    std::vector<double> vec;
    for (const auto& x : value) {
      if (!x.is_number()) fail(ErrorCode::FormatError, "entry '" + key + "' has a non-number");
      vec.push_back(x.get<double>());
    }
    if (dim && *dim != vec.size())
      fail(ErrorCode::DimensionMismatch, "entry '" + key + "' has dimension " +
                                             std::to_string(vec.size()) + ", expected " +
                                             std::to_string(*dim));
    dim = vec.size();
    table[normalize_modality_name(key)] = std::move(vec);
  }
  return table;
}

EmbeddingSource make_source(SourceMode mode, int dim,
                            std::optional<std::filesystem::path> table_path,
                            bool allow_fallback) {
  if (dim <= 0) fail(ErrorCode::RangeError, "embedding dimension must be positive");
  EmbeddingSource src;
  src.mode = mode;
  src.dim = dim;
  src.allow_fallback = allow_fallback;
  src.table_path = std::move(table_path);
  if (mode == SourceMode::Table) {
    if (!src.table_path) fail(ErrorCode::ConfigError, "table mode needs a table path");
    src.table = load_embedding_table(*src.table_path);
    for (const auto& [name, vec] : src.table) {
      if (static_cast<int>(vec.size()) != dim)
        fail(ErrorCode::DimensionMismatch, "table vectors have dimension " +
                                               std::to_string(vec.size()) + ", configured " +
                                               std::to_string(dim));
    }
  }
  return src;
}

std::optional<std::vector<double>> EmbeddingCache::find(const std::string& key) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void EmbeddingCache::insert(const std::string& key, const std::vector<double>& value) {
  std::unique_lock lock(mutex_);
  entries_.emplace(key, value);
}

std::size_t EmbeddingCache::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

ModalityEmbedding embed_modality(std::string_view name, const EmbeddingSource& src,
                                 EmbeddingCache* cache) {
  ModalityEmbedding out;
  out.name = normalize_modality_name(name);
  // Cache key includes the dimension so one cache can serve several sources.
  const std::string key = out.name + "#" + std::to_string(src.dim) +
                          (src.mode == SourceMode::Table ? "#table" : "#hash");
  if (cache) {
    if (auto hit = cache->find(key)) {
      out.vector = std::move(*hit);
      return out;
    }
  }
  if (src.mode == SourceMode::HashSeeded) {
    out.vector = hash_seeded_vector(out.name, src.dim);
  } else {
    auto it = src.table.find(out.name);
    if (it != src.table.end()) {
      out.vector = it->second;
    } else if (src.allow_fallback) {
      out.vector = hash_seeded_vector(out.name, src.dim);
    } else {
      fail(ErrorCode::UnknownModality, "modality '" + out.name + "' not in embedding table");
    }
  }
  if (cache) cache->insert(key, out.vector);
  return out;
}

}  // namespace bfm::embed
