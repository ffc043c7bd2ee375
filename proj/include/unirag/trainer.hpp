#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "unirag/embed.hpp"
#include "unirag/encoder.hpp"
#include "unirag/errors.hpp"
#include "unirag/numkit.hpp"
#include "unirag/prompt_bank.hpp"
#include "unirag/rng.hpp"
#include "unirag/serialize.hpp"

namespace unirag {

// Anchor is the query; positive is its retrieval target (same concept, any
// style); negative comes from a different concept.
struct Triplet {
  Query anchor;
  Query positive;
  Query negative;
};

struct TrainConfig {
  double margin = 0.2;      // triplet hinge margin
  double lambda = 0.5;      // weight of the key-alignment term
  double lr = 1e-5;
  double weight_decay = 0.01;
  std::size_t epochs = 20;
  std::size_t batch = 24;
  std::size_t warmup_epochs = 2;
  std::uint64_t seed = 42;

  void validate() const {
    if (!(margin > 0.0)) throw Error(ErrorKind::InvalidConfig, "margin must be > 0");
    if (lambda < 0.0) throw Error(ErrorKind::InvalidConfig, "lambda must be >= 0");
    // lr = 0 is allowed as the degenerate no-op run; only negatives are invalid.
    if (lr < 0.0) throw Error(ErrorKind::InvalidConfig, "lr must be >= 0");
    if (weight_decay < 0.0) {
      throw Error(ErrorKind::InvalidConfig, "weight_decay must be >= 0");
    }
    if (batch < 1) throw Error(ErrorKind::InvalidConfig, "batch must be >= 1");
  }

  bool operator==(const TrainConfig&) const = default;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

inline double triplet_loss(const Vec& x_f, const Vec& x_r, const Vec& x_h,
                           double margin) {
  return std::max(0.0, margin + cosine_dist(x_f, x_r) - cosine_dist(x_f, x_h));
}

inline double key_alignment_loss(const Bank& bank, const Vec& e_q,
                                 const Selection& sel) {
  if (sel.indices.empty()) {
    throw Error(ErrorKind::EmptyInput, "key_alignment_loss: empty selection");
  }
  double sum = 0.0;
  for (std::size_t idx : sel.indices) {
    sum += cosine_dist(e_q, bank.entries()[idx].key);
  }
  return sum;
}

// Everything forward records about one query's trip through the pipeline.
struct SampleTrace {
  Vec embedding;             // E, frozen input to selection and tokenizing
  Selection selection;
  std::vector<Vec> alphas;   // routing weights per selected entry
  std::vector<Vec> adapted;  // adapted prompts, selection order
  EncodeTrace encode;
  Vec feature;               // unit-normalized CLS output
};

struct TripletTrace {
  SampleTrace anchor;
  SampleTrace positive;
  SampleTrace negative;
  double d_pos = 0.0;
  double d_neg = 0.0;
  double hinge = 0.0;  // max(0, margin + d_pos - d_neg)
};

struct BatchTape {
  std::vector<TripletTrace> items;
  double loss = 0.0;
  double margin = 0.0;
  double lambda = 0.0;
  std::uint64_t bank_revision = 0;
};

// Gradient buffers shaped exactly like the bank's trainable tensors.
struct GradientSet {
  std::vector<PromptEntry> entries;

  static GradientSet zeros_like(const Bank& bank) {
    GradientSet g;
    g.entries = bank.entries();
    for (auto& e : g.entries) {
      std::fill(e.key.begin(), e.key.end(), 0.0);
      std::fill(e.base_prompt.begin(), e.base_prompt.end(), 0.0);
      e.router.fill(0.0);
      for (auto& ex : e.experts) {
        ex.a.fill(0.0);
        ex.b.fill(0.0);
      }
    }
    return g;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    flatten_entries(entries, out);
    return out;
  }
};

inline SampleTrace trace_feature(const Query& q, const Bank& bank,
                                 const FrozenEncoder& enc, const Tokenizer& tok,
                                 const Embedder& emb) {
  SampleTrace s;
  s.embedding = emb.embed(q).vector;
  s.selection = select_prompts(bank, s.embedding, bank.config().select_n);
  s.alphas.reserve(s.selection.indices.size());
  s.adapted.reserve(s.selection.indices.size());
  for (std::size_t idx : s.selection.indices) {
    const auto& entry = bank.entries()[idx];
    s.alphas.push_back(route(entry, bank.config().top_e));
    s.adapted.push_back(adapt_prompt(entry, s.alphas.back()));
  }
  const auto content = tok.tokenize(q, s.embedding);
  const auto seq =
      compose(enc.cls(), s.adapted, content, enc.config().token_num);
  s.feature = enc.encode_traced(seq, s.adapted, enc.config().insertion, s.encode);
  return s;
}

inline BatchTape forward(const std::vector<Triplet>& batch, const Bank& bank,
                         const FrozenEncoder& enc, const Tokenizer& tok,
                         const Embedder& emb, const TrainConfig& cfg) {
  if (batch.empty()) {
    throw Error(ErrorKind::EmptyInput, "forward: empty batch");
  }
  BatchTape tape;
  tape.margin = cfg.margin;
  tape.lambda = cfg.lambda;
  tape.bank_revision = bank.revision();
  tape.items.reserve(batch.size());
  double total = 0.0;
  for (const auto& t : batch) {
    TripletTrace tt;
    tt.anchor = trace_feature(t.anchor, bank, enc, tok, emb);
    tt.positive = trace_feature(t.positive, bank, enc, tok, emb);
    tt.negative = trace_feature(t.negative, bank, enc, tok, emb);
    tt.d_pos = cosine_dist(tt.anchor.feature, tt.positive.feature);
    tt.d_neg = cosine_dist(tt.anchor.feature, tt.negative.feature);
    tt.hinge = std::max(0.0, cfg.margin + tt.d_pos - tt.d_neg);
    total += tt.hinge +
             cfg.lambda * key_alignment_loss(bank, tt.anchor.embedding,
                                             tt.anchor.selection);
    tape.items.push_back(std::move(tt));
  }
  tape.loss = total / static_cast<double>(batch.size());
  if (!std::isfinite(tape.loss)) {
    throw Error(ErrorKind::NonFiniteLoss, "forward: loss is not finite");
  }
  return tape;
}

namespace detail {

// d cosine_sim(u, v) / du, exact for non-unit vectors.
inline Vec cosine_sim_grad(const Vec& u, const Vec& v) {
  const double nu = norm(u);
  const double nv = norm(v);
  const double sim = dot(u, v) / (nu * nv);
  Vec g(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    g[i] = v[i] / (nu * nv) - sim * u[i] / (nu * nu);
  }
  return g;
}

// Backward through the encoder's layer stack. d_out is the gradient with
// respect to the pre-normalization CLS row; returns gradients for the
// distinct adapted prompts in selection order, accumulating over every
// repetition and (under deep insertion) every re-injection site.
inline std::vector<Vec> encoder_backward(const FrozenEncoder& enc,
                                         const EncodeTrace& trace,
                                         const Vec& d_out) {
  const std::size_t d = enc.config().dimension;
  const std::size_t t_total = trace.layout.total();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Vec> d_prompts(trace.layout.prompt_count, Vec(d, 0.0));

  Mat dy(t_total, d);
  std::copy(d_out.begin(), d_out.end(), dy.row(0));

  auto accumulate_prompt_rows = [&](const Mat& dx) {
    std::size_t r = 1;
    for (std::size_t p = 0; p < trace.layout.prompt_count; ++p) {
      for (std::size_t t = 0; t < trace.layout.token_num; ++t, ++r) {
        const double* src = dx.row(r);
        for (std::size_t i = 0; i < d; ++i) d_prompts[p][i] += src[i];
      }
    }
  };

  for (std::size_t li = trace.layers.size(); li-- > 0;) {
    const auto& lt = trace.layers[li];
    const auto& w = enc.layers()[li];
    // y = x + h * w2
    Mat dx = dy;
    Mat dh = matmul_nt(dy, w.w2);
    if (enc.activation() == Activation::tanh_map) {
      for (std::size_t i = 0; i < dh.data.size(); ++i) {
        dh.data[i] *= 1.0 - lt.h.data[i] * lt.h.data[i];
      }
    }
    // h = act(mixed * w1), mixed = attn * x
    const Mat dmixed = matmul_nt(dh, w.w1);
    Mat dattn = matmul_nt(dmixed, lt.x_in);
    matmul_tn_acc(lt.attn, dmixed, dx);
    // attn rows are softmax(scores); scores = q * k^T / sqrt(d)
    for (std::size_t i = 0; i < t_total; ++i) {
      const double* a = lt.attn.row(i);
      double* da = dattn.row(i);
      double inner = 0.0;
      for (std::size_t j = 0; j < t_total; ++j) inner += da[j] * a[j];
      for (std::size_t j = 0; j < t_total; ++j) {
        da[j] = a[j] * (da[j] - inner) * inv_sqrt_d;
      }
    }
    const Mat dq = matmul(dattn, lt.k);
    const Mat dk = matmul_tn(dattn, lt.q);
    matmul_nt_acc(dq, w.wq, dx);
    matmul_nt_acc(dk, w.wk, dx);

    if (li > 0 && trace.insertion == Insertion::deep) {
      // This layer's prompt rows came from re-injection, not from below.
      accumulate_prompt_rows(dx);
      std::size_t r = 1;
      const std::size_t stop = 1 + trace.layout.prompt_tokens();
      for (; r < stop; ++r) std::fill(dx.row(r), dx.row(r) + d, 0.0);
    }
    dy = std::move(dx);
  }
  accumulate_prompt_rows(dy);
  return d_prompts;
}

// Backward through routing + adaptation for one selected entry. d_prompt_out
// is the gradient with respect to the adapted prompt P'.
inline void adapt_backward(const PromptEntry& entry, const Vec& alpha,
                           const Vec& d_prompt_out, PromptEntry& grad) {
  const std::size_t d = entry.base_prompt.size();
  const std::size_t n_experts = entry.experts.size();
  Vec d_prompt = d_prompt_out;  // direct P term of P' = P + sum alpha * delta
  Vec d_alpha(n_experts, 0.0);
  for (std::size_t k = 0; k < n_experts; ++k) {
    if (alpha[k] == 0.0) continue;
    const auto& ex = entry.experts[k];
    const std::size_t r = ex.a.cols;
    const Vec u = vec_mat(entry.base_prompt, ex.a);  // P * A_k
    Vec delta(d, 0.0);                               // u * B_k
    for (std::size_t rr = 0; rr < r; ++rr) {
      const double* brow = ex.b.row(rr);
      for (std::size_t j = 0; j < d; ++j) delta[j] += u[rr] * brow[j];
    }
    d_alpha[k] = dot(d_prompt_out, delta);
    // d delta = alpha_k * d_prompt_out
    Vec du(r, 0.0);
    auto& gb = grad.experts[k].b;
    for (std::size_t rr = 0; rr < r; ++rr) {
      const double* brow = ex.b.row(rr);
      double* gbrow = gb.row(rr);
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dd = alpha[k] * d_prompt_out[j];
        gbrow[j] += u[rr] * dd;
        acc += brow[j] * dd;
      }
      du[rr] = acc;
    }
    auto& ga = grad.experts[k].a;
    for (std::size_t i = 0; i < d; ++i) {
      const double* arow = ex.a.row(i);
      double* garow = ga.row(i);
      double acc = 0.0;
      for (std::size_t rr = 0; rr < r; ++rr) {
        garow[rr] += entry.base_prompt[i] * du[rr];
        acc += arow[rr] * du[rr];
      }
      d_prompt[i] += acc;
    }
  }
  // Routing: alpha = softmax over the retained logits, logits = P * router.
  // Dropped experts got no weight, so their logits get no gradient.
  double inner = 0.0;
  for (std::size_t k = 0; k < n_experts; ++k) inner += d_alpha[k] * alpha[k];
  Vec d_logits(n_experts, 0.0);
  for (std::size_t k = 0; k < n_experts; ++k) {
    if (alpha[k] != 0.0) d_logits[k] = alpha[k] * (d_alpha[k] - inner);
  }
  for (std::size_t i = 0; i < d; ++i) {
    const double* rrow = entry.router.row(i);
    double* grrow = grad.router.row(i);
    double acc = 0.0;
    for (std::size_t k = 0; k < n_experts; ++k) {
      grrow[k] += entry.base_prompt[i] * d_logits[k];
      acc += rrow[k] * d_logits[k];
    }
    d_prompt[i] += acc;
  }
  for (std::size_t i = 0; i < d; ++i) grad.base_prompt[i] += d_prompt[i];
}

// Full path from a feature gradient back to the bank tensors one sample used.
inline void sample_backward(const SampleTrace& s, const Vec& d_feature,
                            const Bank& bank, const FrozenEncoder& enc,
                            GradientSet& grads) {
  // Unit-normalization backward: u = z / |z|.
  const Vec& z = s.encode.pre_norm_cls;
  const Vec& u = s.feature;
  const double len = norm(z);
  double along = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) along += d_feature[i] * u[i];
  Vec dz(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    dz[i] = (d_feature[i] - along * u[i]) / len;
  }
  const auto d_prompts = encoder_backward(enc, s.encode, dz);
  for (std::size_t j = 0; j < s.selection.indices.size(); ++j) {
    const std::size_t idx = s.selection.indices[j];
    adapt_backward(bank.entries()[idx], s.alphas[j], d_prompts[j],
                   grads.entries[idx]);
  }
}

}  // namespace detail

inline GradientSet backward(const BatchTape& tape, const Bank& bank,
                            const FrozenEncoder& enc) {
  if (tape.bank_revision != bank.revision()) {
    throw Error(ErrorKind::StaleTape,
                "backward: bank revision " + std::to_string(bank.revision()) +
                    " differs from tape revision " +
                    std::to_string(tape.bank_revision));
  }
  GradientSet grads = GradientSet::zeros_like(bank);
  const double scale = 1.0 / static_cast<double>(tape.items.size());
  for (const auto& tt : tape.items) {
    if (tt.hinge > 0.0) {
      // loss += scale * (margin + d(a,p) - d(a,n)); d = 1 - cosine_sim here
      // only through its gradient, computed exactly.
      const Vec g_ap_a = detail::cosine_sim_grad(tt.anchor.feature,
                                                 tt.positive.feature);
      const Vec g_ap_p = detail::cosine_sim_grad(tt.positive.feature,
                                                 tt.anchor.feature);
      const Vec g_an_a = detail::cosine_sim_grad(tt.anchor.feature,
                                                 tt.negative.feature);
      const Vec g_an_n = detail::cosine_sim_grad(tt.negative.feature,
                                                 tt.anchor.feature);
      const std::size_t d = g_ap_a.size();
      Vec d_anchor(d), d_positive(d), d_negative(d);
      for (std::size_t i = 0; i < d; ++i) {
        d_anchor[i] = scale * (-g_ap_a[i] + g_an_a[i]);
        d_positive[i] = scale * (-g_ap_p[i]);
        d_negative[i] = scale * (g_an_n[i]);
      }
      detail::sample_backward(tt.anchor, d_anchor, bank, enc, grads);
      detail::sample_backward(tt.positive, d_positive, bank, enc, grads);
      detail::sample_backward(tt.negative, d_negative, bank, enc, grads);
    }
    if (tape.lambda != 0.0) {
      // Key-alignment term: keys move toward the anchor embedding. Selection
      // itself is treated as constant, so this is the only key gradient.
      const Vec& e = tt.anchor.embedding;
      for (std::size_t idx : tt.anchor.selection.indices) {
        const Vec g = detail::cosine_sim_grad(bank.entries()[idx].key, e);
        auto& gk = grads.entries[idx].key;
        for (std::size_t i = 0; i < gk.size(); ++i) {
          gk[i] += scale * tape.lambda * (-g[i]);
        }
      }
    }
  }
  return grads;
}

// Linear warmup to the base rate, then cosine decay reaching exactly 0 at
// total_steps.
inline double schedule_lr(double base, std::size_t step, std::size_t total_steps,
                          std::size_t warmup_steps) {
  if (total_steps == 0 || step >= total_steps) return 0.0;
  const std::size_t warmup = std::min(warmup_steps, total_steps);
  if (step < warmup) {
    return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(total_steps - warmup);
  return base * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

inline void optimizer_step(std::vector<double>& params,
                           const std::vector<double>& grads, AdamWState& state,
                           double lr_now, double weight_decay) {
  if (params.size() != grads.size()) {
    throw Error(ErrorKind::ShapeMismatch,
                "optimizer_step: " + std::to_string(grads.size()) +
                    " gradients for " + std::to_string(params.size()) +
                    " parameters");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) {
    throw Error(ErrorKind::ShapeMismatch, "optimizer_step: stale state shape");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = kAdamBeta1 * state.m[i] + (1.0 - kAdamBeta1) * grads[i];
    state.v[i] = kAdamBeta2 * state.v[i] + (1.0 - kAdamBeta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= lr_now * (m_hat / (std::sqrt(v_hat) + kAdamEps) +
                           weight_decay * params[i]);
  }
}

struct EpochStats {
  std::size_t epoch = 0;   // 1-based
  double mean_loss = 0.0;  // mean per-triplet loss across the epoch
  double lr = 0.0;         // rate applied at the epoch's first step
};

struct TrainResult {
  std::vector<EpochStats> history;
};

inline TrainResult train(const std::vector<Triplet>& dataset, Bank& bank,
                         const FrozenEncoder& enc, const Tokenizer& tok,
                         const Embedder& emb, const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result;
  if (cfg.epochs == 0) return result;
  if (dataset.empty()) {
    throw Error(ErrorKind::EmptyInput, "train: empty dataset");
  }
  const std::size_t n = dataset.size();
  const std::size_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;
  const std::size_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;

  AdamWState state;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t global_step = 0;
  result.history.reserve(cfg.epochs);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(cfg.seed, "train_shuffle", epoch);
    for (std::size_t i = n; i-- > 1;) {
      std::swap(order[i], order[shuffle_rng.next_below(i + 1)]);
    }
    double loss_sum = 0.0;
    double epoch_lr = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, n - start);
      std::vector<Triplet> batch;
      batch.reserve(count);
      for (std::size_t i = 0; i < count; ++i) {
        batch.push_back(dataset[order[start + i]]);
      }
      const BatchTape tape = forward(batch, bank, enc, tok, emb, cfg);
      const GradientSet grads = backward(tape, bank, enc);
      const double lr_now =
          schedule_lr(cfg.lr, global_step, total_steps, warmup_steps);
      if (start == 0) epoch_lr = lr_now;
      auto params = bank.flatten();
      optimizer_step(params, grads.flatten(), state, lr_now, cfg.weight_decay);
      bank.unflatten(params);
      loss_sum += tape.loss * static_cast<double>(count);
      ++global_step;
    }
    result.history.push_back(
        EpochStats{epoch + 1, loss_sum / static_cast<double>(n), epoch_lr});
  }
  return result;
}

inline void write_history_csv(const std::filesystem::path& path,
                              const TrainResult& result) {
  std::string out = "epoch,mean_loss,lr\n";
  char line[96];
  for (const auto& row : result.history) {
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g\n", row.epoch,
                  row.mean_loss, row.lr);
    out += line;
  }
  write_text_file(path, out);
}

}  // namespace unirag
