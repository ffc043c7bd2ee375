#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "unirag/errors.hpp"
#include "unirag/numkit.hpp"
#include "unirag/rng.hpp"
#include "unirag/serialize.hpp"

namespace unirag {

// One low-rank expert: the adapted prompt adds P * A * B on top of P.
struct ExpertAdapter {
  Mat a;  // d x r
  Mat b;  // r x d

  bool operator==(const ExpertAdapter&) const = default;
};

struct PromptEntry {
  Vec key;          // what queries match against
  Vec base_prompt;  // the prompt value experts adapt
  Mat router;       // d x K, probed with the base prompt
  std::vector<ExpertAdapter> experts;

  bool operator==(const PromptEntry&) const = default;
};

struct BankConfig {
  std::size_t entries = 16;    // N
  std::size_t select_n = 4;    // prompts fetched per query
  std::size_t experts = 4;     // K
  std::size_t rank = 4;        // r
  std::size_t top_e = 2;       // experts kept per adaptation
  std::size_t dimension = 64;  // d

  void validate() const {
    if (entries < 1) throw Error(ErrorKind::InvalidConfig, "bank entries < 1");
    if (dimension < 2) throw Error(ErrorKind::InvalidConfig, "bank dimension < 2");
    if (select_n < 1 || select_n > entries) {
      throw Error(ErrorKind::InvalidConfig,
                  "select_n must be in [1, entries], got " +
                      std::to_string(select_n));
    }
    if (experts < 1) throw Error(ErrorKind::InvalidConfig, "experts < 1");
    if (rank < 1) throw Error(ErrorKind::InvalidConfig, "rank < 1");
    if (top_e < 1) throw Error(ErrorKind::InvalidConfig, "top_e < 1");
  }

  bool operator==(const BankConfig&) const = default;
};

// Which entries a query selected, best first. Ties go to the lower index so
// selection is a pure function of the scores.
struct Selection {
  std::vector<std::size_t> indices;
  Vec scores;
};

inline constexpr int kBankFormatVersion = 1;
inline constexpr const char* kBankFormatName = "unirag.bank";

// Serialization order shared by parameter and gradient buffers:
// all keys, all prompts, all routers, then per entry per expert A then B.
inline void flatten_entries(const std::vector<PromptEntry>& entries,
                            std::vector<double>& out) {
  for (const auto& e : entries) out.insert(out.end(), e.key.begin(), e.key.end());
  for (const auto& e : entries) {
    out.insert(out.end(), e.base_prompt.begin(), e.base_prompt.end());
  }
  for (const auto& e : entries) {
    out.insert(out.end(), e.router.data.begin(), e.router.data.end());
  }
  for (const auto& e : entries) {
    for (const auto& ex : e.experts) {
      out.insert(out.end(), ex.a.data.begin(), ex.a.data.end());
      out.insert(out.end(), ex.b.data.begin(), ex.b.data.end());
    }
  }
}

inline void unflatten_entries(const std::vector<double>& flat,
                              std::vector<PromptEntry>& entries) {
  std::size_t pos = 0;
  auto take = [&](double* dst, std::size_t n) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
              flat.begin() + static_cast<std::ptrdiff_t>(pos + n), dst);
    pos += n;
  };
  for (auto& e : entries) take(e.key.data(), e.key.size());
  for (auto& e : entries) take(e.base_prompt.data(), e.base_prompt.size());
  for (auto& e : entries) take(e.router.data.data(), e.router.data.size());
  for (auto& e : entries) {
    for (auto& ex : e.experts) {
      take(ex.a.data.data(), ex.a.data.size());
      take(ex.b.data.data(), ex.b.data.size());
    }
  }
}

class Bank {
 public:
  Bank() = default;

  // Keys and prompts are unit-scale Gaussians; adapters start silent
  // (B = 0) so a fresh bank adapts every prompt to itself exactly.
  static Bank init(const BankConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Bank bank;
    bank.cfg_ = cfg;
    bank.seed_ = seed;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.dimension));
    bank.entries_.reserve(cfg.entries);
    for (std::size_t i = 0; i < cfg.entries; ++i) {
      PromptEntry entry;
      Rng key_rng(seed, "bank_key", i);
      Rng prompt_rng(seed, "bank_prompt", i);
      Rng router_rng(seed, "bank_router", i);
      entry.key.resize(cfg.dimension);
      entry.base_prompt.resize(cfg.dimension);
      for (auto& v : entry.key) v = scale * key_rng.next_gaussian();
      for (auto& v : entry.base_prompt) v = scale * prompt_rng.next_gaussian();
      entry.router = Mat::gaussian(cfg.dimension, cfg.experts, router_rng, 0.01);
      entry.experts.reserve(cfg.experts);
      for (std::size_t k = 0; k < cfg.experts; ++k) {
        Rng a_rng(seed, "bank_expert_a", i * cfg.experts + k);
        ExpertAdapter ad;
        ad.a = Mat::gaussian(cfg.dimension, cfg.rank, a_rng, scale);
        ad.b = Mat(cfg.rank, cfg.dimension);  // zero: silent until trained
        entry.experts.push_back(std::move(ad));
      }
      bank.entries_.push_back(std::move(entry));
    }
    return bank;
  }

  const BankConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t revision() const { return revision_; }
  void bump_revision() { ++revision_; }

  const std::vector<PromptEntry>& entries() const { return entries_; }
  std::vector<PromptEntry>& mutable_entries() { return entries_; }

  std::size_t param_count() const {
    const auto& c = cfg_;
    return c.entries *
           (2 * c.dimension + c.dimension * c.experts +
            c.experts * 2 * c.dimension * c.rank);
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(param_count());
    flatten_entries(entries_, out);
    return out;
  }

  void unflatten(const std::vector<double>& flat) {
    if (flat.size() != param_count()) {
      throw Error(ErrorKind::ShapeMismatch,
                  "unflatten: " + std::to_string(flat.size()) + " values for " +
                      std::to_string(param_count()) + " parameters");
    }
    unflatten_entries(flat, entries_);
    ++revision_;
  }

  std::uint32_t checksum() const { return crc32_of_doubles(flatten()); }

  // Immutable copy for readers while training mutates the original.
  std::shared_ptr<const Bank> snapshot() const {
    return std::make_shared<const Bank>(*this);
  }

  // Not every manifest field binds to the blob length (seed, select_n, and
  // top_e shape behavior, not storage), so the config line carries its own
  // crc; a flipped digit anywhere in the manifest is then always caught.
  static std::string config_line(const BankConfig& cfg, std::uint64_t seed) {
    return "entries=" + std::to_string(cfg.entries) +
           ";select_n=" + std::to_string(cfg.select_n) +
           ";experts=" + std::to_string(cfg.experts) +
           ";rank=" + std::to_string(cfg.rank) +
           ";top_e=" + std::to_string(cfg.top_e) +
           ";dimension=" + std::to_string(cfg.dimension) +
           ";seed=" + std::to_string(seed);
  }

  void save(const std::filesystem::path& dir) const {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    const auto blob = flatten();
    write_f64_blob(dir / "params.f64", blob);
    nlohmann::json manifest{
        {"format", kBankFormatName},
        {"version", kBankFormatVersion},
        {"entries", cfg_.entries},
        {"select_n", cfg_.select_n},
        {"experts", cfg_.experts},
        {"rank", cfg_.rank},
        {"top_e", cfg_.top_e},
        {"dimension", cfg_.dimension},
        {"seed", seed_},
        {"crc32", to_hex(crc32_of_doubles(blob))},
        {"config_crc32", to_hex(crc32_of_bytes(config_line(cfg_, seed_)))},
    };
    write_text_file(dir / "manifest.json", manifest.dump());
  }

  static Bank load(const std::filesystem::path& dir) {
    const auto doc =
        read_manifest(dir / "manifest.json", kBankFormatName, kBankFormatVersion);
    Bank bank;
    std::string stored_cfg_crc;
    std::string stored;
    try {
      bank.cfg_.entries = doc.at("entries").get<std::size_t>();
      bank.cfg_.select_n = doc.at("select_n").get<std::size_t>();
      bank.cfg_.experts = doc.at("experts").get<std::size_t>();
      bank.cfg_.rank = doc.at("rank").get<std::size_t>();
      bank.cfg_.top_e = doc.at("top_e").get<std::size_t>();
      bank.cfg_.dimension = doc.at("dimension").get<std::size_t>();
      bank.seed_ = doc.at("seed").get<std::uint64_t>();
      stored_cfg_crc = doc.at("config_crc32").get<std::string>();
      stored = doc.at("crc32").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorKind::ChecksumMismatch,
                  "bank manifest missing fields: " + dir.string());
    }
    const auto actual_cfg_crc =
        to_hex(crc32_of_bytes(config_line(bank.cfg_, bank.seed_)));
    if (stored_cfg_crc != actual_cfg_crc) {
      throw Error(ErrorKind::ChecksumMismatch,
                  "bank config crc32 " + actual_cfg_crc + " != manifest " +
                      stored_cfg_crc);
    }
    bank.cfg_.validate();

    // Shape the entries, then overwrite every parameter from the blob.
    Bank shaped = Bank::init(bank.cfg_, bank.seed_);
    const auto blob = read_f64_blob(dir / "params.f64", shaped.param_count());
    const auto actual = to_hex(crc32_of_doubles(blob));
    if (stored != actual) {
      throw Error(ErrorKind::ChecksumMismatch,
                  "bank blob crc32 " + actual + " != manifest " + stored);
    }
    shaped.unflatten(blob);
    shaped.revision_ = 0;
    return shaped;
  }

  bool operator==(const Bank& other) const {
    return cfg_ == other.cfg_ && seed_ == other.seed_ &&
           entries_ == other.entries_;
  }

 private:
  BankConfig cfg_;
  std::vector<PromptEntry> entries_;
  std::uint64_t seed_ = 0;
  std::uint64_t revision_ = 0;
};

// Top-n entries by key similarity to the query embedding. Cosine makes the
// choice invariant to positive rescaling of the query.
inline Selection select_prompts(const Bank& bank, const Vec& e_q, std::size_t n) {
  if (bank.entries().empty()) {
    throw Error(ErrorKind::EmptyBank, "select_prompts: bank has no entries");
  }
  if (e_q.size() != bank.config().dimension) {
    throw Error(ErrorKind::DimensionMismatch,
                "select_prompts: query has " + std::to_string(e_q.size()) +
                    " dims, bank expects " +
                    std::to_string(bank.config().dimension));
  }
  if (n < 1 || n > bank.entries().size()) {
    throw Error(ErrorKind::InvalidConfig,
                "select_prompts: n must be in [1, " +
                    std::to_string(bank.entries().size()) + "], got " +
                    std::to_string(n));
  }
  Vec scores(bank.entries().size());
  for (std::size_t i = 0; i < bank.entries().size(); ++i) {
    scores[i] = cosine_sim(e_q, bank.entries()[i].key);
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (scores[x] != scores[y]) return scores[x] > scores[y];
    return x < y;
  });
  Selection sel;
  sel.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  sel.scores.reserve(n);
  for (std::size_t i : sel.indices) sel.scores.push_back(scores[i]);
  return sel;
}

// Mixture weights over an entry's experts: softmax of the base prompt probed
// through the router, sparsified to the strongest top_e and renormalized.
// Renormalizing a softmax subset equals a softmax over the kept logits, so
// that is what gets computed. Zeros elsewhere.
inline Vec route(const PromptEntry& entry, std::size_t top_e) {
  const std::size_t k = entry.experts.size();
  if (k == 0) {
    throw Error(ErrorKind::EmptyBank, "route: entry has no experts");
  }
  if (top_e < 1) {
    throw Error(ErrorKind::InvalidConfig, "route: top_e < 1");
  }
  const Vec logits = vec_mat(entry.base_prompt, entry.router);
  const std::size_t keep = std::min(top_e, k);
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (logits[x] != logits[y]) return logits[x] > logits[y];
    return x < y;
  });
  Vec kept_logits(keep);
  for (std::size_t i = 0; i < keep; ++i) kept_logits[i] = logits[order[i]];
  const Vec kept_weights = softmax(kept_logits);
  Vec alpha(k, 0.0);
  for (std::size_t i = 0; i < keep; ++i) alpha[order[i]] = kept_weights[i];
  return alpha;
}

// P' = P + sum_k alpha_k * (P A_k B_k). With the mixture summing to one this
// equals mixing (P + P A_k B_k) terms, and it keeps silent adapters exact:
// all-zero B leaves the prompt bit-identical.
inline Vec adapt_prompt(const PromptEntry& entry, const Vec& alpha) {
  if (alpha.size() != entry.experts.size()) {
    throw Error(ErrorKind::ShapeMismatch,
                "adapt_prompt: " + std::to_string(alpha.size()) +
                    " weights for " + std::to_string(entry.experts.size()) +
                    " experts");
  }
  Vec out = entry.base_prompt;
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    if (alpha[k] == 0.0) continue;
    const Vec delta =
        rowvec_matmul(entry.base_prompt, entry.experts[k].a, entry.experts[k].b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += alpha[k] * delta[i];
  }
  return out;
}

struct AdaptedPrompts {
  Selection selection;
  std::vector<Vec> prompts;  // one adapted prompt per selected entry
};

inline AdaptedPrompts retrieve_adapted(const Bank& bank, const Vec& e_q,
                                       std::size_t n) {
  AdaptedPrompts out;
  out.selection = select_prompts(bank, e_q, n);
  out.prompts.reserve(out.selection.indices.size());
  for (std::size_t idx : out.selection.indices) {
    const auto& entry = bank.entries()[idx];
    out.prompts.push_back(adapt_prompt(entry, route(entry, bank.config().top_e)));
  }
  return out;
}

}  // namespace unirag
