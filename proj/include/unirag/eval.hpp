#pragma once

// Synthetic multi-style retrieval benchmarks: a generator that lays one
// target item per (concept, style) plus independent query draws, recall@k
// scoring against the known concept map, the full style-direction grid with
// fused multi-query cells and stage latencies, and the ablation runner.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "unirag/embed.hpp"
#include "unirag/errors.hpp"
#include "unirag/hashing.hpp"
#include "unirag/pipeline.hpp"
#include "unirag/serialize.hpp"
#include "unirag/trainer.hpp"
#include "unirag/vector_index.hpp"

namespace unirag {

struct SynthBenchConfig {
  std::size_t concepts = 32;
  std::vector<Style> styles = {Style::image, Style::sketch, Style::art,
                               Style::lowres};
  double noise_scale = 0.05;
  std::size_t queries_per_cell = 8;
  std::size_t dimension = 64;
  std::uint64_t seed = 42;

  void validate() const {
    if (concepts < 2) {
      throw Error(ErrorKind::InvalidConfig, "bench needs >= 2 concepts");
    }
    if (styles.size() < 2) {
      throw Error(ErrorKind::InvalidConfig, "bench needs >= 2 styles");
    }
    for (std::size_t i = 0; i < styles.size(); ++i) {
      for (std::size_t j = i + 1; j < styles.size(); ++j) {
        if (styles[i] == styles[j]) {
          throw Error(ErrorKind::InvalidConfig, "bench styles repeat");
        }
      }
    }
    if (queries_per_cell < 1) {
      throw Error(ErrorKind::InvalidConfig, "bench needs >= 1 query per cell");
    }
    if (dimension < 2) {
      throw Error(ErrorKind::InvalidConfig, "bench dimension must be >= 2");
    }
    if (noise_scale < 0.0) {
      throw Error(ErrorKind::InvalidConfig, "bench noise_scale must be >= 0");
    }
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a64("unirag.bench");
    h = fnv1a64(std::to_string(concepts), h);
    for (Style s : styles) h = fnv1a64(to_string(s), h);
    h = fnv1a64(std::to_string(noise_scale), h);
    h = fnv1a64(std::to_string(queries_per_cell), h);
    h = fnv1a64(std::to_string(dimension), h);
    h = fnv1a64(std::to_string(seed), h);
    return h;
  }

  bool operator==(const SynthBenchConfig&) const = default;
};

struct BenchQuery {
  Query query;
  std::string concept_name;
};

// Raw benchmark material: target queries that become corpus items once
// featurized, and evaluation draws with independent noise. Ground truth is
// positional: the query's concept under the cell's target style.
struct Bench {
  SynthBenchConfig cfg;
  std::vector<BenchQuery> targets;              // one per (concept, style)
  std::map<Style, std::vector<BenchQuery>> queries;  // per query style
};

inline std::string bench_concept(std::size_t i) {
  return "c" + std::to_string(i);
}

inline std::string bench_item_id(const std::string& concept_name, Style s) {
  return "item:" + concept_name + ":" + std::string(to_string(s));
}

// The same-concept corpus item in the target style.
inline std::string truth_item_id(const BenchQuery& q, Style target) {
  return bench_item_id(q.concept_name, target);
}

inline Bench gen_bench(const SynthBenchConfig& cfg) {
  cfg.validate();
  Bench bench;
  bench.cfg = cfg;
  for (std::size_t c = 0; c < cfg.concepts; ++c) {
    const auto concept_name = bench_concept(c);
    for (Style s : cfg.styles) {
      BenchQuery target;
      target.query = Query{bench_item_id(concept_name, s), s,
                           concept_name + "#item"};
      target.concept_name = concept_name;
      bench.targets.push_back(std::move(target));
    }
  }
  for (Style s : cfg.styles) {
    auto& per_style = bench.queries[s];
    per_style.reserve(cfg.concepts * cfg.queries_per_cell);
    for (std::size_t c = 0; c < cfg.concepts; ++c) {
      const auto concept_name = bench_concept(c);
      for (std::size_t j = 0; j < cfg.queries_per_cell; ++j) {
        BenchQuery bq;
        bq.query = Query{"q:" + std::string(to_string(s)) + ":" +
                             concept_name + ":" + std::to_string(j),
                         s, concept_name + "#q" + std::to_string(j)};
        bq.concept_name = concept_name;
        per_style.push_back(std::move(bq));
      }
    }
  }
  return bench;
}

// 1 iff the truth item sits within the first k ranks. The corpus is
// consulted so a truth id that could never be retrieved fails loudly
// instead of silently scoring zero.
inline int recall_at_k(const VectorIndex& corpus, const EvidenceSet& ranked,
                       const std::string& truth_id, std::size_t k) {
  if (corpus.find(truth_id) == nullptr) {
    throw Error(ErrorKind::UnknownTruthId,
                "recall_at_k: truth id '" + truth_id + "' not in the corpus");
  }
  const std::size_t horizon = std::min(k, ranked.items.size());
  for (std::size_t r = 0; r < horizon; ++r) {
    if (ranked.items[r].item.id == truth_id) return 1;
  }
  return 0;
}

struct CellMetrics {
  double r1 = 0.0;
  double r5 = 0.0;
  std::size_t queries = 0;
};

struct StageLatency {
  double mean_ms = 0.0;
  double p95_ms = 0.0;
};

struct RecallReport {
  // Keyed by (query style label, target style label); fused cells label the
  // query side with the member styles joined by '+'.
  std::map<std::pair<std::string, std::string>, CellMetrics> grid;
  std::map<std::string, StageLatency> stage_latency;
  StageLatency end_to_end;
  std::uint64_t fingerprint = 0;

  double mean_r1(bool diagonal) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [key, cell] : grid) {
      const bool is_diag = key.first == key.second;
      if (is_diag != diagonal) continue;
      sum += cell.r1;
      ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  }
};

namespace detail {

inline StageLatency summarize_ms(std::vector<double> samples) {
  StageLatency out;
  if (samples.empty()) return out;
  double sum = 0.0;
  for (double s : samples) sum += s;
  out.mean_ms = sum / static_cast<double>(samples.size());
  std::sort(samples.begin(), samples.end());
  const auto rank = static_cast<std::size_t>(
      std::min<double>(static_cast<double>(samples.size()) - 1.0,
                       0.95 * static_cast<double>(samples.size())));
  out.p95_ms = samples[rank];
  return out;
}

struct LatencyLog {
  std::vector<double> embed, bank, encode, topk, total;

  void record(const StageTimings& t, double total_ms) {
    embed.push_back(t.embed_ms);
    bank.push_back(t.bank_ms);
    encode.push_back(t.encode_ms);
    topk.push_back(t.top_k_ms);
    total.push_back(total_ms);
  }
};

}  // namespace detail

// One exact-retrieval index per target style, embeddings being the pipeline
// features of the target items under the CURRENT bank. Rebuilt per run so a
// trained bank is measured through its own features.
inline std::map<Style, VectorIndex> build_style_indexes(const Pipeline& p,
                                                        const Bench& bench) {
  std::map<Style, VectorIndex> indexes;
  for (const auto& target : bench.targets) {
    auto result = query_feature(p, target.query);
    CorpusItem item;
    item.id = target.query.id;
    item.style = target.query.style;
    item.content = target.query.payload;
    item.metadata = {{"concept", target.concept_name}};
    item.embedding = std::move(result.feature);
    indexes[target.query.style].add(std::move(item));
  }
  return indexes;
}

// Every (query style -> target style) direction plus, per target, one fused
// cell mixing the j-th draws of all other styles by mean embedding fusion.
inline RecallReport run_grid(const Pipeline& p, const Bench& bench) {
  bench.cfg.validate();
  const auto indexes = build_style_indexes(p, bench);
  RecallReport report;
  report.fingerprint =
      fnv1a64(std::to_string(bench.cfg.fingerprint()),
              fnv1a64(std::to_string(p.bank.checksum()),
                      fnv1a64(std::to_string(p.encoder.checksum()))));
  detail::LatencyLog log;

  const auto score_cell_inner = [&](const std::string& q_label, Style target,
                                    const std::vector<BenchQuery>& cell_queries,
                                    const std::vector<Embedding>* fused) {
    const auto& index = indexes.at(target);
    CellMetrics cell;
    for (std::size_t i = 0; i < cell_queries.size(); ++i) {
      const auto& bq = cell_queries[i];
      const auto t0 = std::chrono::steady_clock::now();
      PipelineResult result =
          fused != nullptr
              ? feature_from_embedding(p, bq.query, (*fused)[i])
              : query_feature(p, bq.query);
      const auto t1 = std::chrono::steady_clock::now();
      const auto ev = top_k(index, result.feature, 5);
      result.timings.top_k_ms =
          std::chrono::duration<double, std::milli>(
              std::chrono::steady_clock::now() - t1)
              .count();
      log.record(result.timings, detail::ms_since(t0));

      const auto truth = truth_item_id(bq, target);
      cell.r1 += recall_at_k(index, ev, truth, 1);
      cell.r5 += recall_at_k(index, ev, truth, 5);
      ++cell.queries;
    }
    if (cell.queries > 0) {
      cell.r1 /= static_cast<double>(cell.queries);
      cell.r5 /= static_cast<double>(cell.queries);
    }
    report.grid[{q_label, std::string(to_string(target))}] = cell;
  };
  // Failures name the cell they surfaced in so a bad run is diagnosable.
  const auto score_cell = [&](const std::string& q_label, Style target,
                              const std::vector<BenchQuery>& cell_queries,
                              const std::vector<Embedding>* fused) {
    try {
      score_cell_inner(q_label, target, cell_queries, fused);
    } catch (const Error& e) {
      throw Error(e.kind(), "grid cell " + q_label + "->" +
                                std::string(to_string(target)) + ": " +
                                e.raw_message());
    }
  };

  for (Style qs : bench.cfg.styles) {
    for (Style ts : bench.cfg.styles) {
      score_cell(std::string(to_string(qs)), ts, bench.queries.at(qs), nullptr);
    }
  }

  // Fused cells need >= 2 member styles to be a genuine multi-query input.
  if (bench.cfg.styles.size() >= 3) {
    for (Style ts : bench.cfg.styles) {
      std::vector<Style> members;
      std::string label;
      for (Style qs : bench.cfg.styles) {
        if (qs == ts) continue;
        if (!label.empty()) label += "+";
        label += to_string(qs);
        members.push_back(qs);
      }
      std::vector<BenchQuery> fused_queries;
      std::vector<Embedding> fused_embeddings;
      const std::size_t per_style = bench.queries.at(members[0]).size();
      for (std::size_t i = 0; i < per_style; ++i) {
        std::vector<Embedding> parts;
        parts.reserve(members.size());
        for (Style qs : members) {
          const auto& bq = bench.queries.at(qs)[i];
          parts.push_back(p.cache != nullptr
                              ? cached_embed(*p.cache, bq.query, p.embedder)
                              : p.embedder.embed(bq.query));
        }
        const auto& base = bench.queries.at(members[0])[i];
        BenchQuery fused_q;
        fused_q.query = Query{"fused:" + label + ":" + base.query.id,
                              members[0], base.query.payload};
        fused_q.concept_name = base.concept_name;
        fused_queries.push_back(std::move(fused_q));
        fused_embeddings.push_back(fuse_multi_query(parts));
      }
      score_cell(label, ts, fused_queries, &fused_embeddings);
    }
  }

  report.stage_latency["embed"] = detail::summarize_ms(log.embed);
  report.stage_latency["bank"] = detail::summarize_ms(log.bank);
  report.stage_latency["encode"] = detail::summarize_ms(log.encode);
  report.stage_latency["top_k"] = detail::summarize_ms(log.topk);
  report.end_to_end = detail::summarize_ms(log.total);
  return report;
}

// Fresh triplets in a namespace disjoint from the benchmark draws: anchors
// and positives share a concept across independently drawn styles and
// noise, negatives come from a different concept.
inline std::vector<Triplet> build_triplets(const Bench& bench,
                                           std::size_t count,
                                           std::uint64_t seed) {
  if (count == 0) {
    throw Error(ErrorKind::EmptyInput, "build_triplets: count must be >= 1");
  }
  const auto& styles = bench.cfg.styles;
  Rng rng(seed, "bench_triplets");
  std::vector<Triplet> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = rng.next_below(bench.cfg.concepts);
    std::size_t c_neg = rng.next_below(bench.cfg.concepts);
    while (c_neg == c) c_neg = rng.next_below(bench.cfg.concepts);
    const auto tag = std::to_string(i);
    Triplet t;
    t.anchor = Query{"t:a:" + tag, styles[rng.next_below(styles.size())],
                     bench_concept(c) + "#train_a" + tag};
    t.positive = Query{"t:p:" + tag, styles[rng.next_below(styles.size())],
                       bench_concept(c) + "#train_p" + tag};
    t.negative = Query{"t:n:" + tag, styles[rng.next_below(styles.size())],
                       bench_concept(c_neg) + "#train_n" + tag};
    out.push_back(std::move(t));
  }
  return out;
}

struct AblationRow {
  std::string axis;
  std::string value;
  double diag_r1 = 0.0;
  double offdiag_r1 = 0.0;
};

enum class AblationAxis { insertion_depth, token_num, bank_size };

inline std::string_view to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::insertion_depth: return "insertion_depth";
    case AblationAxis::token_num: return "token_num";
    case AblationAxis::bank_size: return "bank_size";
  }
  throw Error(ErrorKind::InvalidConfig, "unknown ablation axis");
}

// One full train + grid evaluation per axis value, everything else pinned.
inline std::vector<AblationRow> run_ablation(AblationAxis axis,
                                             const std::vector<std::string>& values,
                                             const Bench& bench,
                                             const SystemConfig& base,
                                             std::size_t triplet_count) {
  if (values.empty()) {
    throw Error(ErrorKind::InvalidConfig, "run_ablation: no axis values");
  }
  base.validate();
  std::vector<AblationRow> rows;
  for (const auto& value : values) {
    SystemConfig cfg = base;
    try {
      switch (axis) {
        case AblationAxis::insertion_depth:
          cfg.encoder.insertion = insertion_from_string(value);
          break;
        case AblationAxis::token_num:
          cfg.encoder.token_num = static_cast<std::size_t>(std::stoul(value));
          break;
        case AblationAxis::bank_size:
          cfg.bank.entries = static_cast<std::size_t>(std::stoul(value));
          if (cfg.bank.select_n > cfg.bank.entries) {
            cfg.bank.select_n = cfg.bank.entries;
          }
          break;
      }
    } catch (const std::exception& e) {
      throw Error(ErrorKind::InvalidConfig,
                  "run_ablation: bad value '" + value + "' for axis " +
                      std::string(to_string(axis)) + ": " + e.what());
    }
    cfg.validate();

    const auto embedder = make_embedder(cfg.embedder);
    const Tokenizer tokenizer(cfg.encoder, cfg.embedder.provider);
    const auto encoder = FrozenEncoder::seeded(cfg.encoder);
    Bank bank = Bank::init(cfg.bank, cfg.seed);
    const auto dataset = build_triplets(bench, triplet_count, cfg.seed);
    train(dataset, bank, encoder, tokenizer, *embedder, cfg.train);

    const Pipeline p{bank, encoder, tokenizer, *embedder, nullptr};
    const auto report = run_grid(p, bench);
    AblationRow row;
    row.axis = std::string(to_string(axis));
    row.value = value;
    row.diag_r1 = report.mean_r1(true);
    row.offdiag_r1 = report.mean_r1(false);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_fingerprint(std::uint64_t fp) { return to_hex(fp); }

inline void write_ablation_csv(const std::filesystem::path& path,
                               const std::vector<AblationRow>& rows) {
  std::string text = "axis,value,diag_r1,offdiag_r1\n";
  char buf[160];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g\n", row.axis.c_str(),
                  row.value.c_str(), row.diag_r1, row.offdiag_r1);
    text += buf;
  }
  write_text_file(path, text);
}

inline void write_recall_csv(const std::filesystem::path& path,
                             const RecallReport& report) {
  std::string text = "query_style,target_style,r1,r5,queries,fingerprint\n";
  char buf[192];
  for (const auto& [key, cell] : report.grid) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g,%zu,%s\n",
                  key.first.c_str(), key.second.c_str(), cell.r1, cell.r5,
                  cell.queries, format_fingerprint(report.fingerprint).c_str());
    text += buf;
  }
  write_text_file(path, text);
}

inline void write_latency_csv(const std::filesystem::path& path,
                              const RecallReport& report) {
  std::string text = "stage,mean_ms,p95_ms,fingerprint\n";
  char buf[160];
  for (const auto& [stage, lat] : report.stage_latency) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%s\n", stage.c_str(),
                  lat.mean_ms, lat.p95_ms,
                  format_fingerprint(report.fingerprint).c_str());
    text += buf;
  }
  std::snprintf(buf, sizeof(buf), "end_to_end,%.6f,%.6f,%s\n",
                report.end_to_end.mean_ms, report.end_to_end.p95_ms,
                format_fingerprint(report.fingerprint).c_str());
  text += buf;
  write_text_file(path, text);
}

// The Table-style grid: rows are query styles (fused rows last), columns are
// target styles, each cell R@1/R@5.
inline std::string render_markdown_grid(const RecallReport& report) {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  for (const auto& [key, cell] : report.grid) {
    if (std::find(row_labels.begin(), row_labels.end(), key.first) ==
        row_labels.end()) {
      row_labels.push_back(key.first);
    }
    if (std::find(col_labels.begin(), col_labels.end(), key.second) ==
        col_labels.end()) {
      col_labels.push_back(key.second);
    }
  }
  // Single styles first, fused labels (containing '+') after.
  std::stable_partition(row_labels.begin(), row_labels.end(),
                        [](const std::string& l) {
                          return l.find('+') == std::string::npos;
                        });

  std::string text =
      "Recall grid (R@1 / R@5), config " +
      format_fingerprint(report.fingerprint) + "\n\n";
  text += "| query \\ target |";
  for (const auto& c : col_labels) text += " " + c + " |";
  text += "\n|---|";
  for (std::size_t i = 0; i < col_labels.size(); ++i) text += "---|";
  text += "\n";
  char buf[64];
  for (const auto& r : row_labels) {
    text += "| " + r + " |";
    for (const auto& c : col_labels) {
      const auto it = report.grid.find({r, c});
      if (it == report.grid.end()) {
        text += " - |";
        continue;
      }
      std::snprintf(buf, sizeof(buf), " %.3f / %.3f |", it->second.r1,
                    it->second.r5);
      text += buf;
    }
    text += "\n";
  }
  return text;
}

inline void write_markdown_grid(const std::filesystem::path& path,
                                const RecallReport& report) {
  write_text_file(path, render_markdown_grid(report));
}

}  // namespace unirag
