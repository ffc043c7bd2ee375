#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "unirag/embed.hpp"
#include "unirag/errors.hpp"
#include "unirag/hashing.hpp"
#include "unirag/numkit.hpp"
#include "unirag/rng.hpp"

namespace unirag {

// Where adapted prompts enter the encoder: only at the input (shallow) or
// re-injected at every layer input (deep).
enum class Insertion { shallow, deep };

inline std::string_view to_string(Insertion ins) {
  return ins == Insertion::shallow ? "shallow" : "deep";
}

inline Insertion insertion_from_string(std::string_view s) {
  if (s == "shallow") return Insertion::shallow;
  if (s == "deep") return Insertion::deep;
  throw Error(ErrorKind::InvalidConfig,
              "unknown insertion mode: '" + std::string(s) + "'");
}

enum class Activation { tanh_map, identity_map };

struct EncoderConfig {
  std::size_t layers = 4;
  std::size_t dimension = 64;
  Insertion insertion = Insertion::deep;
  std::size_t token_num = 4;   // repetitions per selected prompt
  std::size_t max_len = 40;    // content token cap
  std::size_t patch_count = 8; // content tokens per provider-derived payload
  std::uint64_t seed = 42;

  void validate() const {
    if (layers < 1) throw Error(ErrorKind::InvalidConfig, "encoder layers < 1");
    if (dimension < 2) throw Error(ErrorKind::InvalidConfig, "encoder dimension < 2");
    if (token_num < 1) throw Error(ErrorKind::InvalidConfig, "token_num < 1");
    if (max_len < 1) throw Error(ErrorKind::InvalidConfig, "max_len < 1");
    if (patch_count < 1) throw Error(ErrorKind::InvalidConfig, "patch_count < 1");
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a64("encoder");
    h = fnv1a64(std::to_string(layers), h);
    h = fnv1a64(std::to_string(dimension), h);
    h = fnv1a64(to_string(insertion), h);
    h = fnv1a64(std::to_string(token_num), h);
    h = fnv1a64(std::to_string(max_len), h);
    h = fnv1a64(std::to_string(patch_count), h);
    h = fnv1a64(std::to_string(seed), h);
    return h;
  }

  bool operator==(const EncoderConfig&) const = default;
};

struct TokenLayout {
  std::size_t prompt_count = 0;   // distinct prompts
  std::size_t token_num = 1;      // repetitions of each
  std::size_t content_count = 0;

  std::size_t prompt_tokens() const { return prompt_count * token_num; }
  std::size_t total() const { return 1 + prompt_tokens() + content_count; }

  bool operator==(const TokenLayout&) const = default;
};

// Composed encoder input: row 0 is the CLS slot, then the prompt block,
// then content tokens.
struct TokenSequence {
  Mat tokens;  // layout.total() rows, d columns
  TokenLayout layout;
};

// Turns a raw query into content token vectors. Synthetic payloads carry no
// real text, so their content tokens are fixed projections of the query's
// own embedding (a stand-in for image patches); textual providers hash words
// instead and pad the sequence to max_len with zero vectors.
class Tokenizer {
 public:
  Tokenizer(EncoderConfig cfg, ProviderKind provider)
      : cfg_(cfg), provider_(provider) {
    cfg_.validate();
    if (provider_ == ProviderKind::synthetic) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.dimension));
      const std::size_t count = std::min(cfg_.patch_count, cfg_.max_len);
      patch_maps_.reserve(count);
      for (std::size_t j = 0; j < count; ++j) {
        Rng rng(cfg_.seed, "patch_map", j);
        patch_maps_.push_back(
            Mat::gaussian(cfg_.dimension, cfg_.dimension, rng, scale));
      }
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  ProviderKind provider() const { return provider_; }

  // query_embedding: the query's prototype embedding; required (and used)
  // only on the synthetic patch path.
  std::vector<Vec> tokenize(const Query& q, const Vec& query_embedding) const {
    if (provider_ == ProviderKind::synthetic) {
      if (query_embedding.size() != cfg_.dimension) {
        throw Error(ErrorKind::DimensionMismatch,
                    "tokenize: embedding has " +
                        std::to_string(query_embedding.size()) +
                        " dims, expected " + std::to_string(cfg_.dimension));
      }
      std::vector<Vec> out;
      out.reserve(patch_maps_.size());
      for (const auto& map : patch_maps_) {
        out.push_back(normalized(mat_vec(map, query_embedding)));
      }
      return out;
    }
    if (q.style != Style::text && q.style != Style::audio_transcript) {
      throw Error(ErrorKind::UnsupportedStyle,
                  "tokenize: style '" + std::string(to_string(q.style)) +
                      "' has no textual payload under provider '" +
                      std::string(to_string(provider_)) + "'");
    }
    const auto words = HashedTextEmbedder::tokenize_words(q.payload);
    std::vector<Vec> out;
    out.reserve(cfg_.max_len);
    const std::size_t used = std::min(words.size(), cfg_.max_len);
    for (std::size_t i = 0; i < used; ++i) {
      Vec v(cfg_.dimension, 0.0);
      const std::uint64_t h = mix64(cfg_.seed ^ fnv1a64(words[i]));
      v[static_cast<std::size_t>(h % cfg_.dimension)] = (h >> 63) ? -1.0 : 1.0;
      out.push_back(std::move(v));
    }
    out.resize(cfg_.max_len, Vec(cfg_.dimension, 0.0));
    return out;
  }

 private:
  EncoderConfig cfg_;
  ProviderKind provider_;
  std::vector<Mat> patch_maps_;
};

inline TokenSequence compose(const Vec& cls, const std::vector<Vec>& prompts,
                             const std::vector<Vec>& content,
                             std::size_t token_num) {
  if (token_num < 1) {
    throw Error(ErrorKind::InvalidConfig, "compose: token_num < 1");
  }
  const std::size_t d = cls.size();
  for (const auto& p : prompts) {
    if (p.size() != d) {
      throw Error(ErrorKind::DimensionMismatch,
                  "compose: prompt has " + std::to_string(p.size()) +
                      " dims, CLS has " + std::to_string(d));
    }
  }
  for (const auto& c : content) {
    if (c.size() != d) {
      throw Error(ErrorKind::DimensionMismatch,
                  "compose: content token has " + std::to_string(c.size()) +
                      " dims, CLS has " + std::to_string(d));
    }
  }
  TokenSequence seq;
  seq.layout = TokenLayout{prompts.size(), token_num, content.size()};
  seq.tokens = Mat(seq.layout.total(), d);
  double* row = seq.tokens.row(0);
  std::copy(cls.begin(), cls.end(), row);
  std::size_t r = 1;
  for (const auto& p : prompts) {
    for (std::size_t t = 0; t < token_num; ++t, ++r) {
      std::copy(p.begin(), p.end(), seq.tokens.row(r));
    }
  }
  for (const auto& c : content) {
    std::copy(c.begin(), c.end(), seq.tokens.row(r++));
  }
  return seq;
}

struct LayerWeights {
  Mat wq;  // d x d, attention query projection
  Mat wk;  // d x d, attention key projection
  Mat w1;  // d x d, channel map in
  Mat w2;  // d x d, channel map out

  bool operator==(const LayerWeights&) const = default;
};

// Everything backward needs from one layer's forward pass.
struct LayerTrace {
  Mat x_in;  // T x d, layer input after any prompt re-injection
  Mat q;     // T x d
  Mat k;     // T x d
  Mat attn;  // T x T, row-stochastic
  Mat h;     // T x d, activation output
};

struct EncodeTrace {
  std::vector<LayerTrace> layers;
  Vec pre_norm_cls;  // CLS row before the final unit-normalization
  TokenLayout layout;
  Insertion insertion = Insertion::shallow;
};

// Token mixer with immutable seeded weights. Each layer attends over all
// tokens (single head, frozen projections, values are the raw tokens) and
// passes the mix through a two-matrix channel map around the activation,
// with a residual connection. The CLS row of the last layer, unit-normalized,
// is the feature.
class FrozenEncoder {
 public:
  static FrozenEncoder seeded(const EncoderConfig& cfg) {
    cfg.validate();
    FrozenEncoder enc;
    enc.cfg_ = cfg;
    enc.act_ = Activation::tanh_map;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.dimension));
    Rng cls_rng(cfg.seed, "enc_cls");
    enc.cls_.resize(cfg.dimension);
    for (auto& v : enc.cls_) v = scale * cls_rng.next_gaussian();
    enc.layers_.reserve(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      LayerWeights w;
      Rng wq_rng(cfg.seed, "enc_wq", l);
      Rng wk_rng(cfg.seed, "enc_wk", l);
      Rng w1_rng(cfg.seed, "enc_w1", l);
      Rng w2_rng(cfg.seed, "enc_w2", l);
      w.wq = Mat::gaussian(cfg.dimension, cfg.dimension, wq_rng, scale);
      w.wk = Mat::gaussian(cfg.dimension, cfg.dimension, wk_rng, scale);
      w.w1 = Mat::gaussian(cfg.dimension, cfg.dimension, w1_rng, scale);
      w.w2 = Mat::gaussian(cfg.dimension, cfg.dimension, w2_rng, scale);
      enc.layers_.push_back(std::move(w));
    }
    return enc;
  }

  static FrozenEncoder with_weights(EncoderConfig cfg, Vec cls,
                                    std::vector<LayerWeights> layers,
                                    Activation act) {
    cfg.validate();
    if (layers.size() != cfg.layers) {
      throw Error(ErrorKind::ShapeMismatch,
                  "with_weights: " + std::to_string(layers.size()) +
                      " layers for config of " + std::to_string(cfg.layers));
    }
    if (cls.size() != cfg.dimension) {
      throw Error(ErrorKind::DimensionMismatch, "with_weights: CLS dimension");
    }
    for (const auto& w : layers) {
      for (const Mat* m : {&w.wq, &w.wk, &w.w1, &w.w2}) {
        if (m->rows != cfg.dimension || m->cols != cfg.dimension) {
          throw Error(ErrorKind::ShapeMismatch,
                      "with_weights: layer matrices must be d x d");
        }
      }
    }
    FrozenEncoder enc;
    enc.cfg_ = cfg;
    enc.act_ = act;
    enc.cls_ = std::move(cls);
    enc.layers_ = std::move(layers);
    return enc;
  }

  const EncoderConfig& config() const { return cfg_; }
  Activation activation() const { return act_; }
  const Vec& cls() const { return cls_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }

  std::uint32_t checksum() const {
    Crc32 crc;
    auto feed = [&](const Vec& v) {
      crc.update(v.data(), v.size() * sizeof(double));
    };
    feed(cls_);
    for (const auto& w : layers_) {
      feed(w.wq.data);
      feed(w.wk.data);
      feed(w.w1.data);
      feed(w.w2.data);
    }
    return crc.value();
  }

  Vec encode(const TokenSequence& seq, const std::vector<Vec>& prompts,
             Insertion insertion) const {
    return run(seq, prompts, insertion, nullptr);
  }

  Vec encode(const TokenSequence& seq, const std::vector<Vec>& prompts) const {
    return run(seq, prompts, cfg_.insertion, nullptr);
  }

  Vec encode_traced(const TokenSequence& seq, const std::vector<Vec>& prompts,
                    Insertion insertion, EncodeTrace& trace) const {
    return run(seq, prompts, insertion, &trace);
  }

 private:
  Vec run(const TokenSequence& seq, const std::vector<Vec>& prompts,
          Insertion insertion, EncodeTrace* trace) const {
    const std::size_t d = cfg_.dimension;
    if (seq.tokens.cols != d || seq.tokens.rows != seq.layout.total()) {
      throw Error(ErrorKind::ShapeMismatch, "encode: malformed token sequence");
    }
    if (prompts.size() != seq.layout.prompt_count) {
      throw Error(ErrorKind::ShapeMismatch,
                  "encode: " + std::to_string(prompts.size()) +
                      " prompts for a layout of " +
                      std::to_string(seq.layout.prompt_count));
    }
    if (trace) {
      trace->layers.clear();
      trace->layers.reserve(layers_.size());
      trace->layout = seq.layout;
      trace->insertion = insertion;
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Mat x = seq.tokens;
    const std::size_t t_total = x.rows;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (l > 0 && insertion == Insertion::deep) {
        std::size_t r = 1;
        for (const auto& p : prompts) {
          for (std::size_t t = 0; t < seq.layout.token_num; ++t, ++r) {
            std::copy(p.begin(), p.end(), x.row(r));
          }
        }
      }
      const auto& w = layers_[l];
      Mat q = matmul(x, w.wq);
      Mat k = matmul(x, w.wk);
      Mat attn = matmul_nt(q, k);
      for (auto& v : attn.data) v *= inv_sqrt_d;
      Vec row_buf(t_total);
      for (std::size_t i = 0; i < t_total; ++i) {
        std::copy(attn.row(i), attn.row(i) + t_total, row_buf.begin());
        const Vec soft = softmax(row_buf);
        std::copy(soft.begin(), soft.end(), attn.row(i));
      }
      const Mat mixed = matmul(attn, x);
      Mat h = matmul(mixed, w.w1);
      if (act_ == Activation::tanh_map) {
        for (auto& v : h.data) v = std::tanh(v);
      }
      Mat y = matmul(h, w.w2);
      for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += x.data[i];
      if (trace) {
        trace->layers.push_back(LayerTrace{std::move(x), std::move(q),
                                           std::move(k), std::move(attn),
                                           std::move(h)});
      }
      x = std::move(y);
    }
    Vec z(x.row(0), x.row(0) + d);
    if (trace) trace->pre_norm_cls = z;
    return normalized(z);
  }

  EncoderConfig cfg_;
  Activation act_ = Activation::tanh_map;
  Vec cls_;
  std::vector<LayerWeights> layers_;
};

}  // namespace unirag
