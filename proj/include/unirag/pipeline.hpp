#pragma once

// The per-query feature path shared by indexing, evaluation, and
// generation: embed the query, select and adapt prompts from the bank,
// tokenize, compose, and run the frozen encoder. Every consumer goes
// through here so retrieval, benchmarks, and generation all see identical
// features, and each stage's wall-clock is recorded for latency reports.

#include <chrono>
#include <cstdint>
#include <string>

#include "unirag/embed.hpp"
#include "unirag/encoder.hpp"
#include "unirag/errors.hpp"
#include "unirag/hashing.hpp"
#include "unirag/numkit.hpp"
#include "unirag/prompt_bank.hpp"
#include "unirag/trainer.hpp"
#include "unirag/vector_index.hpp"

namespace unirag {

// Everything a deployment needs to rebuild the system deterministically.
struct SystemConfig {
  EmbedderConfig embedder;
  BankConfig bank;
  EncoderConfig encoder;
  TrainConfig train;
  std::uint64_t seed = 42;  // bank initialization; train.seed governs shuffles

  void validate() const {
    embedder.validate();
    bank.validate();
    encoder.validate();
    train.validate();
    if (embedder.dimension != bank.dimension ||
        bank.dimension != encoder.dimension) {
      throw Error(ErrorKind::InvalidConfig,
                  "system dimensions disagree: embedder " +
                      std::to_string(embedder.dimension) + ", bank " +
                      std::to_string(bank.dimension) + ", encoder " +
                      std::to_string(encoder.dimension));
    }
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = embedder.fingerprint();
    h = fnv1a64(std::to_string(encoder.fingerprint()), h);
    h = fnv1a64(std::to_string(bank.entries), h);
    h = fnv1a64(std::to_string(bank.select_n), h);
    h = fnv1a64(std::to_string(bank.experts), h);
    h = fnv1a64(std::to_string(bank.rank), h);
    h = fnv1a64(std::to_string(bank.top_e), h);
    h = fnv1a64(std::to_string(bank.dimension), h);
    h = fnv1a64(std::to_string(train.margin), h);
    h = fnv1a64(std::to_string(train.lambda), h);
    h = fnv1a64(std::to_string(train.lr), h);
    h = fnv1a64(std::to_string(train.weight_decay), h);
    h = fnv1a64(std::to_string(train.epochs), h);
    h = fnv1a64(std::to_string(train.batch), h);
    h = fnv1a64(std::to_string(train.warmup_epochs), h);
    h = fnv1a64(std::to_string(train.seed), h);
    h = fnv1a64(std::to_string(seed), h);
    return h;
  }

  bool operator==(const SystemConfig&) const = default;
};

// Wall-clock per pipeline stage, milliseconds. top_k_ms stays zero until a
// retrieval consumer fills it in.
struct StageTimings {
  double embed_ms = 0.0;
  double bank_ms = 0.0;
  double encode_ms = 0.0;
  double top_k_ms = 0.0;
};

struct PipelineResult {
  Embedding embedding;
  Selection selection;
  Vec feature;
  StageTimings timings;
};

// Non-owning bundle of the live components; cache is optional.
struct Pipeline {
  const Bank& bank;
  const FrozenEncoder& encoder;
  const Tokenizer& tokenizer;
  const Embedder& embedder;
  QueryCache* cache = nullptr;
};

namespace detail {

inline double ms_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - start)
      .count();
}

}  // namespace detail

// Feature for a query whose embedding is already known (cache hits, fused
// multi-query inputs, precomputed stores). The embed stage reads as zero.
inline PipelineResult feature_from_embedding(const Pipeline& p, const Query& q,
                                             Embedding embedding) {
  PipelineResult out;
  out.embedding = std::move(embedding);

  auto t0 = std::chrono::steady_clock::now();
  auto adapted =
      retrieve_adapted(p.bank, out.embedding.vector, p.bank.config().select_n);
  out.selection = std::move(adapted.selection);
  out.timings.bank_ms = detail::ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  const auto content = p.tokenizer.tokenize(q, out.embedding.vector);
  const auto seq = compose(p.encoder.cls(), adapted.prompts, content,
                           p.encoder.config().token_num);
  out.feature =
      p.encoder.encode(seq, adapted.prompts, p.encoder.config().insertion);
  out.timings.encode_ms = detail::ms_since(t0);
  return out;
}

// Full path from a raw query; goes through the cache when one is attached.
inline PipelineResult query_feature(const Pipeline& p, const Query& q) {
  const auto t0 = std::chrono::steady_clock::now();
  Embedding embedding = p.cache != nullptr
                            ? cached_embed(*p.cache, q, p.embedder)
                            : p.embedder.embed(q);
  const double embed_ms = detail::ms_since(t0);
  PipelineResult out = feature_from_embedding(p, q, std::move(embedding));
  out.timings.embed_ms = embed_ms;
  return out;
}

}  // namespace unirag
