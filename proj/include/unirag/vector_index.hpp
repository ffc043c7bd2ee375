#pragma once

// Exact-scan vector store over unit-normalized corpus embeddings, with a
// versioned on-disk bundle and a fingerprinted query-embedding cache.
// Retrieval is a full cosine scan: at desk scale correctness dominates, and
// exactness is what the recall benchmarks lean on.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "unirag/embed.hpp"
#include "unirag/errors.hpp"
#include "unirag/hashing.hpp"
#include "unirag/numkit.hpp"
#include "unirag/serialize.hpp"

namespace unirag {

inline constexpr const char* kIndexFormatName = "unirag.index";
inline constexpr int kIndexFormatVersion = 1;
inline constexpr double kUnitNormSlack = 1e-9;

struct CorpusItem {
  std::string id;
  Style style = Style::text;
  std::string content;
  Vec embedding;
  std::map<std::string, std::string> metadata;

  bool operator==(const CorpusItem& other) const = default;
};

struct ScoredItem {
  CorpusItem item;
  double score = 0.0;
};

// Ranked retrieval result: scores non-increasing, ties broken by lower id,
// length min(k, corpus size).
struct EvidenceSet {
  std::vector<ScoredItem> items;
  std::size_t k = 0;
};

class VectorIndex {
 public:
  VectorIndex() = default;

  static VectorIndex build(std::vector<CorpusItem> items) {
    VectorIndex index;
    for (auto& item : items) index.add(std::move(item));
    return index;
  }

  // The first item fixes the dimension; every later one must match it and
  // arrive unit-normalized under a fresh id.
  void add(CorpusItem item) {
    if (item.id.empty()) {
      throw Error(ErrorKind::EmptyInput, "add: corpus item id is empty");
    }
    if (by_id_.count(item.id) != 0) {
      throw Error(ErrorKind::DuplicateId,
                  "add: duplicate corpus id '" + item.id + "'");
    }
    if (item.embedding.empty()) {
      throw Error(ErrorKind::DimensionMismatch,
                  "add: item '" + item.id + "' has an empty embedding");
    }
    if (!items_.empty() && item.embedding.size() != dimension()) {
      throw Error(ErrorKind::DimensionMismatch,
                  "add: item '" + item.id + "' has " +
                      std::to_string(item.embedding.size()) +
                      " dims, index holds " + std::to_string(dimension()));
    }
    const double n = norm(item.embedding);
    if (std::abs(n - 1.0) > kUnitNormSlack) {
      throw Error(ErrorKind::NotNormalized,
                  "add: item '" + item.id + "' has norm " + std::to_string(n) +
                      ", expected a unit vector");
    }
    by_id_.emplace(item.id, items_.size());
    items_.push_back(std::move(item));
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::size_t dimension() const {
    return items_.empty() ? 0 : items_.front().embedding.size();
  }
  const std::vector<CorpusItem>& items() const { return items_; }

  const CorpusItem* find(const std::string& id) const {
    const auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &items_[it->second];
  }

  // Immutable copy for concurrent readers; writers keep the original.
  std::shared_ptr<const VectorIndex> snapshot() const {
    return std::make_shared<const VectorIndex>(*this);
  }

  std::uint32_t checksum() const { return crc32_of_doubles(flat_embeddings()); }

  // Bundle layout: manifest.json + embeddings.f64 (little-endian doubles in
  // item order) + metadata.ndjson (one record per item, same order). Both
  // payload files carry a crc in the manifest so any flipped byte is caught.
  void save(const std::filesystem::path& dir) const {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    const auto blob = flat_embeddings();
    write_f64_blob(dir / "embeddings.f64", blob);

    std::string meta;
    for (const auto& item : items_) {
      nlohmann::json rec{
          {"id", item.id},
          {"style", std::string(to_string(item.style))},
          {"content", item.content},
          {"metadata", item.metadata},
      };
      meta += rec.dump();
      meta += '\n';
    }
    write_text_file(dir / "metadata.ndjson", meta);

    nlohmann::json manifest{
        {"format", kIndexFormatName},
        {"version", kIndexFormatVersion},
        {"dimension", dimension()},
        {"count", size()},
        {"crc32", to_hex(crc32_of_doubles(blob))},
        {"meta_crc32", to_hex(crc32_of_bytes(meta))},
    };
    write_text_file(dir / "manifest.json", manifest.dump());
  }

  static VectorIndex load(const std::filesystem::path& dir) {
    const auto doc = read_manifest(dir / "manifest.json", kIndexFormatName,
                                   kIndexFormatVersion);
    std::size_t dim = 0;
    std::size_t count = 0;
    std::string blob_crc;
    std::string meta_crc;
    try {
      dim = doc.at("dimension").get<std::size_t>();
      count = doc.at("count").get<std::size_t>();
      blob_crc = doc.at("crc32").get<std::string>();
      meta_crc = doc.at("meta_crc32").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorKind::ChecksumMismatch,
                  "index manifest missing fields: " + dir.string());
    }
    if (count > 0 && dim == 0) {
      throw Error(ErrorKind::ChecksumMismatch,
                  "index manifest declares items of dimension 0: " +
                      dir.string());
    }

    const auto blob = read_f64_blob(dir / "embeddings.f64", count * dim);
    if (to_hex(crc32_of_doubles(blob)) != blob_crc) {
      throw Error(ErrorKind::ChecksumMismatch,
                  "index embedding blob crc mismatch: " + dir.string());
    }
    const auto meta = read_text_file(dir / "metadata.ndjson");
    if (to_hex(crc32_of_bytes(meta)) != meta_crc) {
      throw Error(ErrorKind::ChecksumMismatch,
                  "index metadata crc mismatch: " + dir.string());
    }

    VectorIndex index;
    std::size_t line_start = 0;
    for (std::size_t i = 0; i < count; ++i) {
      const auto line_end = meta.find('\n', line_start);
      if (line_end == std::string::npos) {
        throw Error(ErrorKind::ChecksumMismatch,
                    "index metadata has " + std::to_string(i) +
                        " records, manifest declares " + std::to_string(count));
      }
      CorpusItem item;
      try {
        const auto rec = nlohmann::json::parse(
            meta.substr(line_start, line_end - line_start));
        item.id = rec.at("id").get<std::string>();
        item.style = style_from_string(rec.at("style").get<std::string>());
        item.content = rec.at("content").get<std::string>();
        item.metadata =
            rec.at("metadata").get<std::map<std::string, std::string>>();
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::ChecksumMismatch,
                    "index metadata record " + std::to_string(i) +
                        " is malformed (" + std::string(e.what()) + ")");
      }
      item.embedding.assign(blob.begin() + static_cast<std::ptrdiff_t>(i * dim),
                            blob.begin() +
                                static_cast<std::ptrdiff_t>((i + 1) * dim));
      index.add(std::move(item));
      line_start = line_end + 1;
    }
    return index;
  }

 private:
  std::vector<double> flat_embeddings() const {
    std::vector<double> out;
    out.reserve(size() * dimension());
    for (const auto& item : items_) {
      out.insert(out.end(), item.embedding.begin(), item.embedding.end());
    }
    return out;
  }

  std::vector<CorpusItem> items_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

// Exact top-k by cosine similarity: score every item, keep the k best with
// ties broken by lower id. partial_sort keeps the scan O(n log k).
inline EvidenceSet top_k(const VectorIndex& index, const Vec& query,
                         std::size_t k) {
  if (index.empty()) {
    throw Error(ErrorKind::EmptyIndex, "top_k: index has no items");
  }
  if (k < 1) {
    throw Error(ErrorKind::InvalidConfig, "top_k: k must be >= 1");
  }
  if (query.size() != index.dimension()) {
    throw Error(ErrorKind::DimensionMismatch,
                "top_k: query has " + std::to_string(query.size()) +
                    " dims, index holds " +
                    std::to_string(index.dimension()));
  }
  const auto& items = index.items();
  std::vector<double> scores(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    scores[i] = cosine_sim(query, items[i].embedding);
  }
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t keep = std::min(k, items.size());
  const auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return items[a].id < items[b].id;
  };
  std::partial_sort(order.begin(),
                    order.begin() + static_cast<std::ptrdiff_t>(keep),
                    order.end(), better);

  EvidenceSet out;
  out.k = k;
  out.items.reserve(keep);
  for (std::size_t r = 0; r < keep; ++r) {
    out.items.push_back(ScoredItem{items[order[r]], scores[order[r]]});
  }
  return out;
}

// Embedding memo keyed by what determines the provider's output: payload,
// style, provider name, and the full embedder config fingerprint, so a
// provider or config change can never serve a stale vector. Thread-safe;
// concurrent misses recompute the same deterministic value.
class QueryCache {
 public:
  static std::uint64_t fingerprint(const Query& q, const Embedder& embedder) {
    std::uint64_t h = fnv1a64(q.payload);
    h = fnv1a64(to_string(q.style), h);
    h = fnv1a64(embedder.name(), h);
    h = fnv1a64(std::to_string(embedder.config().fingerprint()), h);
    return h;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return entries_.size();
  }

  std::size_t hits() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return hits_;
  }

  void clear() {
    std::lock_guard<std::mutex> lock(mutex_);
    entries_.clear();
    hits_ = 0;
  }

  friend Embedding cached_embed(QueryCache& cache, const Query& q,
                                const Embedder& embedder);

 private:
  mutable std::mutex mutex_;
  std::unordered_map<std::uint64_t, Embedding> entries_;
  std::size_t hits_ = 0;
};

// Returns the cached embedding on a fingerprint hit, otherwise computes,
// stores, and returns it. Provider errors propagate and are never cached.
inline Embedding cached_embed(QueryCache& cache, const Query& q,
                              const Embedder& embedder) {
  const std::uint64_t key = QueryCache::fingerprint(q, embedder);
  {
    std::lock_guard<std::mutex> lock(cache.mutex_);
    const auto it = cache.entries_.find(key);
    if (it != cache.entries_.end()) {
      ++cache.hits_;
      return it->second;
    }
  }
  Embedding fresh = embedder.embed(q);
  {
    std::lock_guard<std::mutex> lock(cache.mutex_);
    cache.entries_.insert_or_assign(key, fresh);
  }
  return fresh;
}

}  // namespace unirag
