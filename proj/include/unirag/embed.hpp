#pragma once

#include <atomic>
#include <cctype>
#include <cstdint>
#include <map>
#include <memory>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "unirag/errors.hpp"
#include "unirag/hashing.hpp"
#include "unirag/numkit.hpp"
#include "unirag/rng.hpp"

namespace unirag {

// Query styles the retrieval system understands.
enum class Style {
  text,
  image,
  sketch,
  art,
  lowres,
  audio_transcript,
};

inline constexpr Style kAllStyles[] = {
    Style::text,   Style::image,  Style::sketch,
    Style::art,    Style::lowres, Style::audio_transcript,
};

inline std::string_view to_string(Style s) {
  switch (s) {
    case Style::text: return "text";
    case Style::image: return "image";
    case Style::sketch: return "sketch";
    case Style::art: return "art";
    case Style::lowres: return "lowres";
    case Style::audio_transcript: return "audio_transcript";
  }
  return "unknown";
}

inline Style style_from_string(std::string_view s) {
  for (Style st : kAllStyles) {
    if (to_string(st) == s) return st;
  }
  throw Error(ErrorKind::UnsupportedStyle, "unknown style '" + std::string(s) + "'");
}

struct Query {
  std::string id;
  Style style = Style::text;
  std::string payload;
};

// A point in the shared latent space, tagged with where it came from.
struct Embedding {
  Vec vector;
  std::string style_tag;
  std::string provider;
};

enum class ProviderKind { synthetic, hashed_text, external };

inline std::string_view to_string(ProviderKind p) {
  switch (p) {
    case ProviderKind::synthetic: return "synthetic";
    case ProviderKind::hashed_text: return "hashed_text";
    case ProviderKind::external: return "external";
  }
  return "unknown";
}

inline ProviderKind provider_from_string(std::string_view s) {
  if (s == "synthetic") return ProviderKind::synthetic;
  if (s == "hashed_text") return ProviderKind::hashed_text;
  if (s == "external") return ProviderKind::external;
  throw Error(ErrorKind::InvalidConfig, "unknown provider '" + std::string(s) + "'");
}

struct EmbedderConfig {
  std::size_t dimension = 64;
  ProviderKind provider = ProviderKind::synthetic;
  std::uint64_t seed = 42;
  // Synthetic provider: additive Gaussian noise scale and the fraction of
  // latent directions every style leaves untouched. Styles stay mutually
  // legible through that shared slice; the rest rotates per style.
  double noise_scale = 0.05;
  double style_overlap = 0.375;
  // External provider transport settings.
  std::string endpoint_host = "127.0.0.1";
  int endpoint_port = 8601;
  std::string endpoint_path = "/v1/embed";
  int timeout_ms = 5000;
  int max_retries = 2;
  int max_in_flight = 4;

  void validate() const {
    if (dimension < 2) {
      throw Error(ErrorKind::InvalidConfig, "embedder dimension must be >= 2");
    }
    if (noise_scale < 0.0) {
      throw Error(ErrorKind::InvalidConfig, "noise_scale must be >= 0");
    }
    if (style_overlap < 0.0 || style_overlap > 1.0) {
      throw Error(ErrorKind::InvalidConfig, "style_overlap must be in [0, 1]");
    }
    if (timeout_ms <= 0 || max_retries < 0 || max_in_flight < 1) {
      throw Error(ErrorKind::InvalidConfig, "bad external transport settings");
    }
  }

  // Stable fingerprint over every field that changes embedding values.
  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a64("embedder_config");
    h = fnv1a64(std::to_string(dimension), h);
    h = fnv1a64(to_string(provider), h);
    h = fnv1a64(std::to_string(seed), h);
    h = fnv1a64(std::to_string(noise_scale), h);
    h = fnv1a64(std::to_string(style_overlap), h);
    if (provider == ProviderKind::external) {
      h = fnv1a64(endpoint_host, h);
      h = fnv1a64(std::to_string(endpoint_port), h);
      h = fnv1a64(endpoint_path, h);
    }
    return h;
  }

  bool operator==(const EmbedderConfig&) const = default;
};

class Embedder {
 public:
  explicit Embedder(EmbedderConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
  }
  virtual ~Embedder() = default;

  virtual Embedding embed(const Query& q) const = 0;
  virtual std::string_view name() const = 0;

  // Parameter checksum; anything trainable must never change it.
  virtual std::uint32_t checksum() const = 0;

  virtual std::vector<Embedding> embed_batch(const std::vector<Query>& qs) const {
    std::vector<Embedding> out;
    out.reserve(qs.size());
    for (std::size_t i = 0; i < qs.size(); ++i) {
      try {
        out.push_back(embed(qs[i]));
      } catch (const Error& e) {
        throw Error(e.kind(), "embed_batch: item " + std::to_string(i) + " (" +
                                  qs[i].id + "): " + e.raw_message());
      }
    }
    return out;
  }

  const EmbedderConfig& config() const { return cfg_; }

  // Number of embed calls served; lets tests prove a cache absorbed work.
  std::uint64_t calls() const { return calls_.load(std::memory_order_relaxed); }

 protected:
  void count_call() const { calls_.fetch_add(1, std::memory_order_relaxed); }

  EmbedderConfig cfg_;

 private:
  mutable std::atomic<std::uint64_t> calls_{0};
};

// Deterministic stand-in for a foundation encoder. Concepts are seeded unit
// Gaussians; each style applies an orthogonal transform that fixes a shared
// subspace and rotates the complement, then additive seeded noise.
class SyntheticEmbedder final : public Embedder {
 public:
  explicit SyntheticEmbedder(EmbedderConfig cfg) : Embedder(std::move(cfg)) {
    const std::size_t d = cfg_.dimension;
    const std::size_t shared =
        static_cast<std::size_t>(cfg_.style_overlap * static_cast<double>(d) + 0.5);

    Rng basis_rng(cfg_.seed, "style_basis");
    Mat basis = Mat::gaussian(d, d, basis_rng, 1.0);
    orthonormalize_rows(basis);

    for (std::size_t si = 0; si < std::size(kAllStyles); ++si) {
      const std::size_t free_dims = d - shared;
      Mat rot = Mat::identity(free_dims);
      if (free_dims > 0) {
        Rng rot_rng(cfg_.seed, "style_rotation", si);
        rot = Mat::gaussian(free_dims, free_dims, rot_rng, 1.0);
        orthonormalize_rows(rot);
      }
      // T = B^T * blockdiag(I_shared, R) * B, applied as x -> T x.
      Mat block = Mat::identity(d);
      for (std::size_t i = 0; i < free_dims; ++i) {
        for (std::size_t j = 0; j < free_dims; ++j) {
          block.at(shared + i, shared + j) = rot.at(i, j);
        }
      }
      const Mat tmp = matmul(block, basis);
      transforms_[kAllStyles[si]] = matmul_tn(basis, tmp);
    }
  }

  std::string_view name() const override { return "synthetic"; }

  Embedding embed(const Query& q) const override {
    count_call();
    if (q.payload.empty()) {
      throw Error(ErrorKind::EmptyInput, "synthetic embed: empty payload");
    }
    const Mat& t = transforms_.at(q.style);
    const Vec base = base_vector(concept_token(q.payload));
    Vec v = mat_vec(t, base);
    if (cfg_.noise_scale > 0.0) {
      const Vec eps = noise_vector(q.payload, q.style);
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] += cfg_.noise_scale * eps[i];
      }
    }
    return Embedding{normalized(v), std::string(to_string(q.style)),
                     std::string(name())};
  }

  std::uint32_t checksum() const override {
    Crc32 crc;
    for (Style s : kAllStyles) {
      const Mat& t = transforms_.at(s);
      crc.update(t.data.data(), t.data.size() * sizeof(double));
    }
    return crc.value();
  }

  // The slice of the payload before '#' names the concept; the rest only
  // varies the noise draw.
  static std::string concept_token(const std::string& payload) {
    const auto pos = payload.find('#');
    return pos == std::string::npos ? payload : payload.substr(0, pos);
  }

  const Mat& style_transform(Style s) const { return transforms_.at(s); }

  Vec base_vector(const std::string& concept_name) const {
    Rng rng(cfg_.seed, "concept_base", fnv1a64(concept_name));
    Vec v(cfg_.dimension);
    for (auto& x : v) x = rng.next_gaussian();
    return normalized(v);
  }

  Vec noise_vector(const std::string& payload, Style style) const {
    Rng rng(cfg_.seed, "noise",
            mix64(fnv1a64(payload) ^ static_cast<std::uint64_t>(style)));
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.dimension));
    Vec v(cfg_.dimension);
    for (auto& x : v) x = scale * rng.next_gaussian();
    return v;
  }

 private:
  std::map<Style, Mat> transforms_;
};

// Bag-of-words hashing for real text. Tokens are lowercased alphanumeric
// runs; each lands in a signed bucket.
class HashedTextEmbedder final : public Embedder {
 public:
  explicit HashedTextEmbedder(EmbedderConfig cfg) : Embedder(std::move(cfg)) {}

  std::string_view name() const override { return "hashed_text"; }

  Embedding embed(const Query& q) const override {
    count_call();
    if (q.style != Style::text && q.style != Style::audio_transcript) {
      throw Error(ErrorKind::UnsupportedStyle,
                  "hashed_text embed: style '" + std::string(to_string(q.style)) +
                      "' has no textual payload");
    }
    if (q.payload.empty()) {
      throw Error(ErrorKind::EmptyInput, "hashed_text embed: empty payload");
    }
    const auto tokens = tokenize_words(q.payload);
    if (tokens.empty()) {
      throw Error(ErrorKind::UnsupportedStyle,
                  "hashed_text embed: payload has no tokens");
    }
    Vec v(cfg_.dimension, 0.0);
    for (const auto& tok : tokens) {
      const std::uint64_t h = mix64(cfg_.seed ^ fnv1a64(tok));
      const std::size_t bucket = static_cast<std::size_t>(h % cfg_.dimension);
      const double sign = (h >> 63) ? -1.0 : 1.0;
      v[bucket] += sign;
    }
    return Embedding{normalized(v), std::string(to_string(q.style)),
                     std::string(name())};
  }

  std::uint32_t checksum() const override {
    Crc32 crc;
    const std::uint64_t s = cfg_.seed;
    const std::uint64_t d = cfg_.dimension;
    crc.update(&s, sizeof(s));
    crc.update(&d, sizeof(d));
    return crc.value();
  }

  static std::vector<std::string> tokenize_words(const std::string& payload) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : payload) {
      const auto uc = static_cast<unsigned char>(c);
      if (std::isalnum(uc)) {
        cur.push_back(static_cast<char>(std::tolower(uc)));
      } else if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }
};

// Remote embedding service speaking JSON over HTTP:
//   POST {path} {"input": ["...", ...], "dimension": d}
//   -> {"embeddings": [[...], ...]}
class ExternalEmbedder final : public Embedder {
 public:
  explicit ExternalEmbedder(EmbedderConfig cfg)
      : Embedder(std::move(cfg)),
        in_flight_(std::make_unique<std::counting_semaphore<>>(
            cfg_.max_in_flight)) {}

  std::string_view name() const override { return "external"; }

  Embedding embed(const Query& q) const override {
    if (q.payload.empty()) {
      throw Error(ErrorKind::EmptyInput, "external embed: empty payload");
    }
    auto rows = post_batch({q.payload});
    return Embedding{std::move(rows[0]), std::string(to_string(q.style)),
                     std::string(name())};
  }

  std::vector<Embedding> embed_batch(const std::vector<Query>& qs) const override {
    if (qs.empty()) return {};
    std::vector<std::string> payloads;
    payloads.reserve(qs.size());
    for (std::size_t i = 0; i < qs.size(); ++i) {
      if (qs[i].payload.empty()) {
        throw Error(ErrorKind::EmptyInput,
                    "embed_batch: item " + std::to_string(i) + " (" + qs[i].id +
                        "): empty payload");
      }
      payloads.push_back(qs[i].payload);
    }
    auto rows = post_batch(payloads);
    std::vector<Embedding> out;
    out.reserve(qs.size());
    for (std::size_t i = 0; i < qs.size(); ++i) {
      out.push_back(Embedding{std::move(rows[i]),
                              std::string(to_string(qs[i].style)),
                              std::string(name())});
    }
    return out;
  }

  std::uint32_t checksum() const override {
    Crc32 crc;
    crc.update(cfg_.endpoint_host);
    crc.update(cfg_.endpoint_path);
    return crc.value();
  }

 private:
  std::vector<Vec> post_batch(const std::vector<std::string>& payloads) const {
    count_call();
    in_flight_->acquire();
    struct Release {
      std::counting_semaphore<>* s;
      ~Release() { s->release(); }
    } release{in_flight_.get()};

    nlohmann::json req;
    req["input"] = payloads;
    req["dimension"] = cfg_.dimension;
    const std::string body = req.dump();

    std::string last_failure = "no attempt made";
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      httplib::Client client(cfg_.endpoint_host, cfg_.endpoint_port);
      client.set_connection_timeout(0, cfg_.timeout_ms * 1000);
      client.set_read_timeout(0, cfg_.timeout_ms * 1000);
      auto res = client.Post(cfg_.endpoint_path, body, "application/json");
      if (!res) {
        last_failure = "transport error (" + httplib::to_string(res.error()) + ")";
        continue;
      }
      if (res->status >= 500) {
        last_failure = "server status " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw Error(ErrorKind::ProviderUnavailable,
                    "embedding service rejected request with status " +
                        std::to_string(res->status));
      }
      return parse_rows(res->body, payloads.size());
    }
    throw Error(ErrorKind::ProviderUnavailable,
                "embedding service unreachable after " +
                    std::to_string(cfg_.max_retries + 1) + " attempts: " +
                    last_failure);
  }

  std::vector<Vec> parse_rows(const std::string& body, std::size_t expect) const {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::ProviderUnavailable,
                  std::string("embedding service returned malformed JSON: ") +
                      e.what());
    }
    if (!doc.contains("embeddings") || !doc["embeddings"].is_array() ||
        doc["embeddings"].size() != expect) {
      throw Error(ErrorKind::ProviderUnavailable,
                  "embedding service response missing embeddings");
    }
    std::vector<Vec> rows;
    rows.reserve(expect);
    for (const auto& row : doc["embeddings"]) {
      if (!row.is_array() || row.size() != cfg_.dimension) {
        throw Error(ErrorKind::DimensionMismatch,
                    "embedding service returned dimension " +
                        std::to_string(row.is_array() ? row.size() : 0) +
                        ", expected " + std::to_string(cfg_.dimension));
      }
      Vec v;
      v.reserve(cfg_.dimension);
      for (const auto& x : row) {
        if (!x.is_number()) {
          throw Error(ErrorKind::ProviderUnavailable,
                      "embedding service returned non-numeric component");
        }
        v.push_back(x.get<double>());
      }
      if (!all_finite(v)) {
        throw Error(ErrorKind::ProviderUnavailable,
                    "embedding service returned non-finite component");
      }
      rows.push_back(normalized(v));
    }
    return rows;
  }

  std::unique_ptr<std::counting_semaphore<>> in_flight_;
};

inline std::unique_ptr<Embedder> make_embedder(const EmbedderConfig& cfg) {
  cfg.validate();
  switch (cfg.provider) {
    case ProviderKind::synthetic:
      return std::make_unique<SyntheticEmbedder>(cfg);
    case ProviderKind::hashed_text:
      return std::make_unique<HashedTextEmbedder>(cfg);
    case ProviderKind::external:
      return std::make_unique<ExternalEmbedder>(cfg);
  }
  throw Error(ErrorKind::InvalidConfig, "unknown provider");
}

// Mean then renormalize; the standard late-fusion rule for multi-query
// inputs. All inputs must share a dimension.
inline Embedding fuse_multi_query(const std::vector<Embedding>& parts) {
  if (parts.empty()) {
    throw Error(ErrorKind::EmptyInput, "fuse_multi_query: no inputs");
  }
  const std::size_t d = parts[0].vector.size();
  Vec acc(d, 0.0);
  std::string style_tag;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].vector.size() != d) {
      throw Error(ErrorKind::DimensionMismatch,
                  "fuse_multi_query: input " + std::to_string(i) + " has " +
                      std::to_string(parts[i].vector.size()) +
                      " dims, expected " + std::to_string(d));
    }
    for (std::size_t j = 0; j < d; ++j) acc[j] += parts[i].vector[j];
    if (i > 0) style_tag += "+";
    style_tag += parts[i].style_tag;
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (auto& x : acc) x *= inv;
  return Embedding{normalized(acc), style_tag, parts[0].provider};
}

}  // namespace unirag
