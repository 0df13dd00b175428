#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

namespace bfm::embed {

// Lowercase, trim, drop one trailing ".ext". Throws InvalidName when the
// result is empty. Shared by corpus scanning and embedding lookup.
std::string normalize_modality_name(std::string_view raw);

using EmbeddingTable = std::map<std::string, std::vector<double>>;

enum class SourceMode { HashSeeded, Table };

struct EmbeddingSource {
  SourceMode mode = SourceMode::HashSeeded;
  std::optional<std::filesystem::path> table_path;
  int dim = 64;
  // Table mode only: use the hash-seeded vector for names missing from the
  // table instead of failing with UnknownModality.
  bool allow_fallback = false;
  EmbeddingTable table;
};

struct ModalityEmbedding {
  std::string name;
  std::vector<double> vector;
};

// Keys are normalized on load; all vectors must share one dimension.
EmbeddingTable load_embedding_table(const std::filesystem::path& path);

// Opens the table (if any) and checks its dimension against `dim`.
EmbeddingSource make_source(SourceMode mode, int dim,
                            std::optional<std::filesystem::path> table_path = std::nullopt,
                            bool allow_fallback = false);

// Unit-norm standard-normal draw seeded by stable_hash(canonical name).
std::vector<double> hash_seeded_vector(const std::string& canonical, int dim);

// Concurrent readers, per-key insertion under an exclusive lock. A racing
// double-compute is harmless because values are deterministic.
class EmbeddingCache {
 public:
  std::optional<std::vector<double>> find(const std::string& key) const;
  void insert(const std::string& key, const std::vector<double>& value);
  std::size_t size() const;

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::vector<double>> entries_;
};

ModalityEmbedding embed_modality(std::string_view name, const EmbeddingSource& src,
                                 EmbeddingCache* cache);

}  // namespace bfm::embed
