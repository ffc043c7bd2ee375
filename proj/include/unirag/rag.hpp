#pragma once

// Retrieval-grounded generation: renders the model input as three fixed
// blocks, "PROMPT:" (system instruction), "EVIDENCE:" (ranked items, each
// "[rank] (score=..., style=..., id=...) content"), and "QUERY:", then
// obtains the response from a generation backend. One offline echo stub keeps the whole
// path testable; one adapter speaks the chat-completions wire format.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "unirag/errors.hpp"
#include "unirag/pipeline.hpp"
#include "unirag/vector_index.hpp"

namespace unirag {

struct SystemPrompt {
  std::string text =
      "You are a patient STEM educator. Ground every statement in the "
      "evidence items provided, cite their ids, and say plainly when the "
      "evidence does not cover the question.";
  std::string id = "default-educator";
  int version = 1;

  void validate() const {
    if (text.empty()) {
      throw Error(ErrorKind::EmptyInput, "system prompt text is empty");
    }
  }

  bool operator==(const SystemPrompt&) const = default;
};

// Rendering is a pure function of (prompt, evidence, query, budget); the
// three sections always appear once each, in order.
struct GenerationContext {
  std::string prompt_section;
  std::string evidence_section;
  std::string query_section;
  std::string rendered;
  std::vector<std::string> rendered_item_ids;  // audit: what made the budget
  bool degraded = false;                       // true iff no evidence rendered
};

inline constexpr std::size_t kDefaultEvidenceBudget = 4000;

inline std::string render_evidence_item(std::size_t rank,
                                        const ScoredItem& scored) {
  char head[128];
  std::snprintf(head, sizeof(head), "[%zu] (score=%.6f, style=%s, id=",
                rank, scored.score,
                std::string(to_string(scored.item.style)).c_str());
  return std::string(head) + scored.item.id + ") " + scored.item.content +
         "\n";
}

// Items enter in rank order until the character budget is exhausted; an item
// is rendered whole or not at all, and lower ranks are dropped first.
inline GenerationContext build_context(
    const SystemPrompt& prompt, const EvidenceSet& evidence, const Query& q,
    std::size_t evidence_char_budget = kDefaultEvidenceBudget) {
  prompt.validate();
  if (q.payload.empty()) {
    throw Error(ErrorKind::EmptyQuery, "build_context: query payload is empty");
  }
  GenerationContext ctx;
  ctx.prompt_section = "PROMPT:\n" + prompt.text + "\n";

  ctx.evidence_section = "EVIDENCE:\n";
  std::size_t spent = 0;
  for (std::size_t r = 0; r < evidence.items.size(); ++r) {
    const auto line = render_evidence_item(r + 1, evidence.items[r]);
    if (spent + line.size() > evidence_char_budget) break;
    ctx.evidence_section += line;
    ctx.rendered_item_ids.push_back(evidence.items[r].item.id);
    spent += line.size();
  }
  ctx.degraded = ctx.rendered_item_ids.empty();

  ctx.query_section = "QUERY:\n(style=" + std::string(to_string(q.style)) +
                      ") " + q.payload + "\n";
  ctx.rendered = ctx.prompt_section + "\n" + ctx.evidence_section + "\n" +
                 ctx.query_section;
  return ctx;
}

struct GenerationResult {
  std::string text;
  std::string backend;
  std::size_t attempts = 0;
  double latency_ms = 0.0;
  std::size_t prompt_chars = 0;
  std::size_t completion_chars = 0;
};

// A backend performs exactly one attempt; retry policy lives in generate()
// so every backend inherits the same transient-failure handling.
class GenerationBackend {
 public:
  virtual ~GenerationBackend() = default;
  virtual GenerationResult attempt(const GenerationContext& ctx) = 0;
  virtual std::string_view id() const = 0;
};

// Offline stub: the response is the rendered context, verbatim. Makes the
// full answer path deterministic and assertable without a model server.
class EchoBackend final : public GenerationBackend {
 public:
  GenerationResult attempt(const GenerationContext& ctx) override {
    GenerationResult r;
    r.text = ctx.rendered;
    r.backend = std::string(id());
    return r;
  }
  std::string_view id() const override { return "echo"; }
};

struct RetryPolicy {
  int max_retries = 2;     // attempts = max_retries + 1
  int backoff_ms = 50;     // doubles per retry
  bool sleep_enabled = true;

  void validate() const {
    if (max_retries < 0 || backoff_ms < 0) {
      throw Error(ErrorKind::InvalidConfig, "retry policy must be >= 0");
    }
  }

  bool operator==(const RetryPolicy&) const = default;
};

// Transient failures (backend unavailable, timeout) retry with exponential
// backoff; rejections are permanent and surface immediately.
inline GenerationResult generate(const GenerationContext& ctx,
                                 GenerationBackend& backend,
                                 const RetryPolicy& policy = {}) {
  policy.validate();
  const auto t0 = std::chrono::steady_clock::now();
  int backoff = policy.backoff_ms;
  for (int attempt = 0;; ++attempt) {
    try {
      GenerationResult r = backend.attempt(ctx);
      r.attempts = static_cast<std::size_t>(attempt) + 1;
      r.latency_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
      r.prompt_chars = ctx.rendered.size();
      r.completion_chars = r.text.size();
      if (r.backend.empty()) r.backend = std::string(backend.id());
      return r;
    } catch (const Error& e) {
      const bool transient = e.kind() == ErrorKind::BackendUnavailable ||
                             e.kind() == ErrorKind::Timeout;
      if (!transient || attempt >= policy.max_retries) throw;
      if (policy.sleep_enabled && backoff > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
      }
      backoff *= 2;
    }
  }
}

struct BackendConfig {
  std::string model = "local-edu-model";
  std::string host = "127.0.0.1";
  int port = 8602;
  std::string path = "/v1/chat/completions";
  std::string api_key;  // empty -> no Authorization header
  double temperature = 0.0;
  int timeout_ms = 10000;
  int max_in_flight = 4;

  void validate() const {
    if (model.empty() || host.empty() || path.empty()) {
      throw Error(ErrorKind::InvalidConfig, "backend endpoint incomplete");
    }
    if (timeout_ms <= 0 || max_in_flight < 1) {
      throw Error(ErrorKind::InvalidConfig, "bad backend transport settings");
    }
  }

  bool operator==(const BackendConfig&) const = default;
};

// De-facto chat-completions wire format: system + user messages, first
// choice's message content taken as the answer.
class ChatCompletionsBackend final : public GenerationBackend {
 public:
  explicit ChatCompletionsBackend(BackendConfig cfg)
      : cfg_(std::move(cfg)),
        in_flight_(std::make_unique<std::counting_semaphore<>>(
            cfg_.max_in_flight)) {
    cfg_.validate();
  }

  std::string_view id() const override { return "chat_completions"; }

  GenerationResult attempt(const GenerationContext& ctx) override {
    in_flight_->acquire();
    struct Release {
      std::counting_semaphore<>* s;
      ~Release() { s->release(); }
    } release{in_flight_.get()};

    nlohmann::json req{
        {"model", cfg_.model},
        {"messages",
         nlohmann::json::array(
             {nlohmann::json{{"role", "system"},
                             {"content", ctx.prompt_section}},
              nlohmann::json{{"role", "user"},
                             {"content",
                              ctx.evidence_section + "\n" + ctx.query_section}}})},
        {"temperature", cfg_.temperature},
    };

    httplib::Client client(cfg_.host, cfg_.port);
    client.set_connection_timeout(0, cfg_.timeout_ms * 1000);
    client.set_read_timeout(0, cfg_.timeout_ms * 1000);
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) {
      headers.emplace("Authorization", "Bearer " + cfg_.api_key);
    }
    const auto res =
        client.Post(cfg_.path, headers, req.dump(), "application/json");
    if (!res) {
      const auto err = res.error();
      if (err == httplib::Error::ConnectionTimeout ||
          err == httplib::Error::Read || err == httplib::Error::Write) {
        throw Error(ErrorKind::Timeout,
                    "chat backend timed out (" + httplib::to_string(err) + ")");
      }
      throw Error(ErrorKind::BackendUnavailable,
                  "chat backend unreachable (" + httplib::to_string(err) + ")");
    }
    if (res->status >= 500 || res->status == 429) {
      throw Error(ErrorKind::BackendUnavailable,
                  "chat backend status " + std::to_string(res->status));
    }
    if (res->status != 200) {
      throw Error(ErrorKind::BackendRejected,
                  "chat backend rejected the request with status " +
                      std::to_string(res->status));
    }
    GenerationResult out;
    try {
      const auto doc = nlohmann::json::parse(res->body);
      out.text = doc.at("choices").at(0).at("message").at("content")
                     .get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::BackendRejected,
                  "chat backend returned an unparsable body: " +
                      std::string(e.what()));
    }
    out.backend = std::string(id());
    return out;
  }

 private:
  BackendConfig cfg_;
  std::unique_ptr<std::counting_semaphore<>> in_flight_;
};

struct AnswerOutcome {
  GenerationResult result;
  EvidenceSet evidence;
  GenerationContext context;
  StageTimings timings;
};

// The full serving path: embed (through the cache when attached), adapt
// prompts, encode, retrieve, render, generate. Every failure is re-tagged
// with the stage it surfaced in.
inline AnswerOutcome answer(const Query& q, const VectorIndex& index,
                            const Pipeline& p, const SystemPrompt& prompt,
                            std::size_t k, GenerationBackend& backend,
                            const RetryPolicy& policy = {},
                            std::size_t evidence_char_budget =
                                kDefaultEvidenceBudget) {
  AnswerOutcome out;
  auto t0 = std::chrono::steady_clock::now();

  Embedding embedding;
  try {
    embedding = p.cache != nullptr ? cached_embed(*p.cache, q, p.embedder)
                                   : p.embedder.embed(q);
  } catch (const Error& e) {
    throw e.with_stage(Stage::embed);
  }
  out.timings.embed_ms = detail::ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  AdaptedPrompts adapted;
  try {
    adapted =
        retrieve_adapted(p.bank, embedding.vector, p.bank.config().select_n);
  } catch (const Error& e) {
    throw e.with_stage(Stage::bank);
  }
  out.timings.bank_ms = detail::ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  Vec feature;
  try {
    const auto content = p.tokenizer.tokenize(q, embedding.vector);
    const auto seq = compose(p.encoder.cls(), adapted.prompts, content,
                             p.encoder.config().token_num);
    feature =
        p.encoder.encode(seq, adapted.prompts, p.encoder.config().insertion);
  } catch (const Error& e) {
    throw e.with_stage(Stage::encode);
  }
  out.timings.encode_ms = detail::ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  try {
    out.evidence = top_k(index, feature, k);
  } catch (const Error& e) {
    throw e.with_stage(Stage::retrieval);
  }
  out.timings.top_k_ms = detail::ms_since(t0);

  try {
    out.context = build_context(prompt, out.evidence, q, evidence_char_budget);
  } catch (const Error& e) {
    throw e.with_stage(Stage::context);
  }

  try {
    out.result = generate(out.context, backend, policy);
  } catch (const Error& e) {
    throw e.with_stage(Stage::generate);
  }
  return out;
}

}  // namespace unirag
