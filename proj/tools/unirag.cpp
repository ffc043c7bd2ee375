// unirag: one binary for the desk-scale pipeline: corpus indexing, bank
// training, retrieval queries, grounded answering, evaluation, and bank
// inspection. Configuration resolves as overrides > environment > file >
// defaults; exit codes: 0 success, 2 config, 3 I/O or integrity, 4
// validation, 5 backend.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "unirag/config.hpp"
#include "unirag/rag.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Fully wired components for one run. A bank directory, when given, replaces
// the seeded init bank (its own stored shape governs selection).
struct System {
  unirag::RunConfig cfg;
  std::unique_ptr<unirag::Embedder> embedder;
  std::unique_ptr<unirag::Tokenizer> tokenizer;
  unirag::FrozenEncoder encoder;
  unirag::Bank bank;
  unirag::QueryCache cache;

  explicit System(const unirag::RunConfig& rc,
                  const std::optional<fs::path>& bank_dir = {})
      : cfg(rc),
        encoder(unirag::FrozenEncoder::seeded(rc.system.encoder)),
        bank(bank_dir ? unirag::Bank::load(*bank_dir)
                      : unirag::Bank::init(rc.system.bank, rc.system.seed)) {
    if (bank.config().dimension != rc.system.encoder.dimension) {
      throw unirag::Error(
          unirag::ErrorKind::InvalidConfig,
          "loaded bank dimension " + std::to_string(bank.config().dimension) +
              " does not match the configured encoder dimension " +
              std::to_string(rc.system.encoder.dimension));
    }
    embedder = unirag::make_embedder(rc.system.embedder);
    tokenizer = std::make_unique<unirag::Tokenizer>(
        rc.system.encoder, rc.system.embedder.provider);
  }

  unirag::Pipeline pipeline() {
    return unirag::Pipeline{bank, encoder, *tokenizer, *embedder, &cache};
  }
};

std::string require_string(const json& doc, const char* field,
                           const std::string& where) {
  if (!doc.contains(field) || !doc[field].is_string()) {
    throw unirag::Error(unirag::ErrorKind::ShapeMismatch,
                        where + ": missing string field \"" + field + "\"");
  }
  return doc[field].get<std::string>();
}

// Newline-delimited JSON corpus: {"id", "style", "content"} plus optional
// "embedding" (unit vector in feature space) and "metadata" (string map).
std::vector<unirag::CorpusItem> read_corpus(const fs::path& path) {
  const std::string text = unirag::read_text_file(path);
  std::vector<unirag::CorpusItem> items;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where =
        path.filename().string() + ":" + std::to_string(line_no);
    json doc;
    try {
      doc = json::parse(line);
    } catch (const json::exception& e) {
      throw unirag::Error(unirag::ErrorKind::ShapeMismatch,
                          where + ": not valid JSON: " + e.what());
    }
    unirag::CorpusItem item;
    item.id = require_string(doc, "id", where);
    item.style = unirag::style_from_string(require_string(doc, "style", where));
    item.content = require_string(doc, "content", where);
    if (doc.contains("embedding")) {
      if (!doc["embedding"].is_array()) {
        throw unirag::Error(unirag::ErrorKind::ShapeMismatch,
                            where + ": \"embedding\" must be an array");
      }
      item.embedding = doc["embedding"].get<unirag::Vec>();
    }
    if (doc.contains("metadata")) {
      for (const auto& [k, v] : doc["metadata"].items()) {
        if (!v.is_string()) {
          throw unirag::Error(unirag::ErrorKind::ShapeMismatch,
                              where + ": metadata values must be strings");
        }
        item.metadata[k] = v.get<std::string>();
      }
    }
    items.push_back(std::move(item));
  }
  return items;
}

unirag::Query query_from_json(const json& doc, const std::string& where) {
  unirag::Query q;
  if (doc.contains("id") && doc["id"].is_string()) {
    q.id = doc["id"].get<std::string>();
  }
  q.style = unirag::style_from_string(require_string(doc, "style", where));
  q.payload = require_string(doc, "payload", where);
  return q;
}

// Triplet file: one JSON object per line with anchor/positive/negative
// queries, each {"style", "payload", optional "id"}.
std::vector<unirag::Triplet> read_triplets(const fs::path& path) {
  const std::string text = unirag::read_text_file(path);
  std::vector<unirag::Triplet> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where =
        path.filename().string() + ":" + std::to_string(line_no);
    json doc;
    try {
      doc = json::parse(line);
    } catch (const json::exception& e) {
      throw unirag::Error(unirag::ErrorKind::ShapeMismatch,
                          where + ": not valid JSON: " + e.what());
    }
    for (const char* part : {"anchor", "positive", "negative"}) {
      if (!doc.contains(part) || !doc[part].is_object()) {
        throw unirag::Error(unirag::ErrorKind::ShapeMismatch,
                            where + ": missing object field \"" +
                                std::string(part) + "\"");
      }
    }
    unirag::Triplet t;
    t.anchor = query_from_json(doc["anchor"], where);
    t.positive = query_from_json(doc["positive"], where);
    t.negative = query_from_json(doc["negative"], where);
    out.push_back(std::move(t));
  }
  return out;
}

json query_to_json(const unirag::Query& q) {
  return json{{"id", q.id},
              {"style", std::string(unirag::to_string(q.style))},
              {"payload", q.payload}};
}

// Items lacking a precomputed embedding are run through the full pipeline so
// stored vectors live in the same feature space queries are matched in.
unirag::VectorIndex build_index(System& sys,
                                std::vector<unirag::CorpusItem> items,
                                unirag::VectorIndex index = {}) {
  const auto p = sys.pipeline();
  for (auto& item : items) {
    if (item.embedding.empty()) {
      const unirag::Query q{item.id, item.style, item.content};
      item.embedding = unirag::query_feature(p, q).feature;
    }
    index.add(std::move(item));
  }
  return index;
}

void print_evidence(const unirag::EvidenceSet& ev) {
  std::printf("%-4s %-28s %-10s %s\n", "rank", "id", "score", "style");
  for (std::size_t i = 0; i < ev.items.size(); ++i) {
    const auto& s = ev.items[i];
    std::printf("%-4zu %-28s %.6f   %s\n", i + 1, s.item.id.c_str(), s.score,
                std::string(unirag::to_string(s.item.style)).c_str());
  }
}

json evidence_to_json(const unirag::EvidenceSet& ev) {
  json rows = json::array();
  for (std::size_t i = 0; i < ev.items.size(); ++i) {
    const auto& s = ev.items[i];
    rows.push_back({{"rank", i + 1},
                    {"id", s.item.id},
                    {"score", s.score},
                    {"style", std::string(unirag::to_string(s.item.style))}});
  }
  return json{{"schema_version", 1}, {"results", rows}};
}

unirag::Query cli_query(const std::string& text, const std::string& file,
                        const std::string& style) {
  if (text.empty() == file.empty()) {
    throw unirag::Error(unirag::ErrorKind::InvalidConfig,
                        "provide exactly one of --text or --file");
  }
  unirag::Query q;
  q.id = "cli-query";
  q.style = unirag::style_from_string(style);
  q.payload = text.empty() ? unirag::read_text_file(file) : text;
  while (!q.payload.empty() &&
         (q.payload.back() == '\n' || q.payload.back() == '\r')) {
    q.payload.pop_back();
  }
  return q;
}

int cmd_index_build(System& sys, const fs::path& corpus, const fs::path& out) {
  const auto index = build_index(sys, read_corpus(corpus));
  fs::create_directories(out);
  index.save(out);
  std::printf("indexed %zu items (dimension=%zu, checksum=%s) -> %s\n",
              index.size(), index.dimension(),
              unirag::to_hex(index.checksum()).c_str(), out.c_str());
  return 0;
}

int cmd_index_add(System& sys, const fs::path& index_dir,
                  const fs::path& corpus, const fs::path& out) {
  auto index = unirag::VectorIndex::load(index_dir);
  const std::size_t before = index.size();
  index = build_index(sys, read_corpus(corpus), std::move(index));
  fs::create_directories(out);
  index.save(out);
  std::printf("added %zu items (total %zu, checksum=%s) -> %s\n",
              index.size() - before, index.size(),
              unirag::to_hex(index.checksum()).c_str(), out.c_str());
  return 0;
}

int cmd_index_stats(const fs::path& index_dir) {
  const auto index = unirag::VectorIndex::load(index_dir);
  std::printf("count      %zu\n", index.size());
  std::printf("dimension  %zu\n", index.dimension());
  std::printf("checksum   %s\n", unirag::to_hex(index.checksum()).c_str());
  return 0;
}

int cmd_train(System& sys, const std::string& data, const fs::path& out,
              std::string history) {
  std::vector<unirag::Triplet> dataset;
  if (!data.empty()) {
    dataset = read_triplets(data);
    std::printf("training on %zu triplets from %s\n", dataset.size(),
                data.c_str());
  } else {
    const auto bench = unirag::gen_bench(sys.cfg.eval.bench);
    dataset = unirag::build_triplets(bench, sys.cfg.eval.triplet_count,
                                     sys.cfg.system.seed);
    std::printf("training on %zu synthetic triplets\n", dataset.size());
  }

  const auto result =
      unirag::train(dataset, sys.bank, sys.encoder, *sys.tokenizer,
                    *sys.embedder, sys.cfg.system.train);

  fs::create_directories(out);
  sys.bank.save(out);
  if (history.empty()) history = (out / "loss_history.csv").string();
  unirag::write_history_csv(history, result);

  if (result.history.empty()) {
    std::printf("final mean loss: n/a (0 epochs)\n");
  } else {
    std::printf("final mean loss: %.17g\n", result.history.back().mean_loss);
  }
  std::printf("bank checksum %s -> %s\n",
              unirag::to_hex(sys.bank.checksum()).c_str(), out.c_str());
  std::printf("loss history -> %s\n", history.c_str());
  return 0;
}

int cmd_query(System& sys, const fs::path& index_dir, const unirag::Query& q,
              std::size_t k, const std::string& format) {
  const auto index = unirag::VectorIndex::load(index_dir);
  const auto p = sys.pipeline();
  const auto feature = unirag::query_feature(p, q).feature;
  const auto ev = unirag::top_k(index, feature, k);
  if (format == "json") {
    std::printf("%s\n", evidence_to_json(ev).dump(2).c_str());
  } else if (format == "table") {
    print_evidence(ev);
  } else {
    throw unirag::Error(unirag::ErrorKind::InvalidConfig,
                        "--format must be 'table' or 'json', got '" + format +
                            "'");
  }
  return 0;
}

int cmd_rag(System& sys, const fs::path& index_dir, const unirag::Query& q,
            std::size_t k, bool show_evidence) {
  const auto index = unirag::VectorIndex::load(index_dir);
  const auto p = sys.pipeline();

  std::unique_ptr<unirag::GenerationBackend> backend;
  if (sys.cfg.rag.backend == "live") {
    backend =
        std::make_unique<unirag::ChatCompletionsBackend>(sys.cfg.rag.chat);
  } else {
    backend = std::make_unique<unirag::EchoBackend>();
  }

  const auto out = unirag::answer(q, index, p, sys.cfg.rag.prompt(), k,
                                  *backend, sys.cfg.rag.retry,
                                  sys.cfg.rag.evidence_char_budget);
  std::printf("%s\n", out.result.text.c_str());
  if (show_evidence) {
    std::printf("\n-- evidence (k=%zu, backend=%s, attempts=%zu) --\n",
                out.evidence.k, out.result.backend.c_str(),
                out.result.attempts);
    print_evidence(out.evidence);
  }
  return 0;
}

int cmd_eval_grid(System& sys, const fs::path& out) {
  const auto bench = unirag::gen_bench(sys.cfg.eval.bench);
  const auto p = sys.pipeline();
  const auto report = unirag::run_grid(p, bench);
  fs::create_directories(out);
  unirag::write_recall_csv(out / "recall.csv", report);
  unirag::write_latency_csv(out / "latency.csv", report);
  unirag::write_markdown_grid(out / "grid.md", report);
  std::printf("grid over %zu styles x %zu concepts (fingerprint %s)\n",
              sys.cfg.eval.bench.styles.size(), sys.cfg.eval.bench.concepts,
              unirag::format_fingerprint(report.fingerprint).c_str());
  std::printf("mean R@1 same-style .... %.4f\n", report.mean_r1(true));
  std::printf("mean R@1 cross-style ... %.4f\n", report.mean_r1(false));
  std::printf("reports -> %s\n", out.c_str());
  return 0;
}

unirag::AblationAxis axis_from_string(const std::string& s) {
  if (s == "insertion_depth") return unirag::AblationAxis::insertion_depth;
  if (s == "token_num") return unirag::AblationAxis::token_num;
  if (s == "bank_size") return unirag::AblationAxis::bank_size;
  throw unirag::Error(unirag::ErrorKind::InvalidConfig,
                      "--axis must be insertion_depth, token_num, or "
                      "bank_size, got '" +
                          s + "'");
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string piece;
  while (std::getline(in, piece, ',')) {
    if (!piece.empty()) out.push_back(piece);
  }
  return out;
}

int cmd_eval_ablation(const unirag::RunConfig& cfg, const std::string& axis,
                      const std::string& values, const fs::path& out) {
  const auto bench = unirag::gen_bench(cfg.eval.bench);
  const auto rows =
      unirag::run_ablation(axis_from_string(axis), split_csv(values), bench,
                           cfg.system, cfg.eval.triplet_count);
  fs::create_directories(out);
  unirag::write_ablation_csv(out / "ablation.csv", rows);
  std::printf("%-18s %-10s %-10s %s\n", "axis", "value", "diag_r1",
              "offdiag_r1");
  for (const auto& row : rows) {
    std::printf("%-18s %-10s %.4f     %.4f\n", row.axis.c_str(),
                row.value.c_str(), row.diag_r1, row.offdiag_r1);
  }
  std::printf("report -> %s\n", (out / "ablation.csv").c_str());
  return 0;
}

int cmd_bank_inspect(const fs::path& bank_dir) {
  const auto bank = unirag::Bank::load(bank_dir);
  const auto& cfg = bank.config();

  double min_norm = 0.0, max_norm = 0.0, sum_norm = 0.0;
  bool first = true;
  std::size_t nonzero_b = 0, total_b = 0;
  for (const auto& entry : bank.entries()) {
    const double n = unirag::norm(entry.key);
    if (first || n < min_norm) min_norm = n;
    if (first || n > max_norm) max_norm = n;
    sum_norm += n;
    first = false;
    for (const auto& expert : entry.experts) {
      ++total_b;
      for (const double v : expert.b.data) {
        if (v != 0.0) {
          ++nonzero_b;
          break;
        }
      }
    }
  }
  const double mean_norm =
      cfg.entries > 0 ? sum_norm / static_cast<double>(cfg.entries) : 0.0;

  std::printf("entries     %zu\n", cfg.entries);
  std::printf("experts     %zu\n", cfg.experts);
  std::printf("rank        %zu\n", cfg.rank);
  std::printf("dimension   %zu\n", cfg.dimension);
  std::printf("select_n    %zu\n", cfg.select_n);
  std::printf("top_e       %zu\n", cfg.top_e);
  std::printf("parameters  %zu\n", bank.param_count());
  std::printf("checksum    %s\n", unirag::to_hex(bank.checksum()).c_str());
  std::printf("key norms   min=%.6f mean=%.6f max=%.6f\n", min_norm,
              mean_norm, max_norm);
  if (nonzero_b == 0) {
    std::printf("adapters    all B factors zero (untrained)\n");
  } else {
    std::printf("adapters    %zu of %zu B factors nonzero (trained)\n",
                nonzero_b, total_b);
  }
  return 0;
}

int cmd_synth(const unirag::RunConfig& cfg, const fs::path& out) {
  const auto bench = unirag::gen_bench(cfg.eval.bench);
  fs::create_directories(out);

  std::string corpus;
  for (const auto& bq : bench.targets) {
    corpus += json{{"id", bq.query.id},
                   {"style", std::string(unirag::to_string(bq.query.style))},
                   {"content", bq.query.payload},
                   {"metadata", {{"concept", bq.concept_name}}}}
                  .dump() +
              "\n";
  }
  unirag::write_text_file(out / "corpus.ndjson", corpus);

  const auto triplets = unirag::build_triplets(bench, cfg.eval.triplet_count,
                                               cfg.system.seed);
  std::string lines;
  for (const auto& t : triplets) {
    lines += json{{"anchor", query_to_json(t.anchor)},
                  {"positive", query_to_json(t.positive)},
                  {"negative", query_to_json(t.negative)}}
                 .dump() +
             "\n";
  }
  unirag::write_text_file(out / "triplets.ndjson", lines);

  std::printf("wrote %zu corpus items and %zu triplets -> %s\n",
              bench.targets.size(), triplets.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"style-conditioned retrieval with a trainable prompt bank"};
  app.require_subcommand(1);
  app.fallthrough(true);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path,
                 "Config file (TOML-style key/value)");
  app.add_option("--set", overrides,
                 "Override a config key, e.g. --set bank.entries=8");

  // index
  auto* index_cmd = app.add_subcommand("index", "Build and inspect indexes");
  index_cmd->require_subcommand(1);
  std::string ix_corpus, ix_dir, ix_out;
  auto* ix_build = index_cmd->add_subcommand("build", "Embed a corpus file");
  ix_build->add_option("--corpus", ix_corpus, "Corpus NDJSON")->required();
  ix_build->add_option("--out", ix_out, "Output directory")->required();
  auto* ix_add = index_cmd->add_subcommand("add", "Add items to an index");
  ix_add->add_option("--index", ix_dir, "Existing index")->required();
  ix_add->add_option("--corpus", ix_corpus, "Corpus NDJSON")->required();
  ix_add->add_option("--out", ix_out, "Output directory")->required();
  auto* ix_stats = index_cmd->add_subcommand("stats", "Print index summary");
  ix_stats->add_option("--index", ix_dir, "Index directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the prompt bank");
  std::string tr_data, tr_out, tr_history;
  train_cmd->add_option("--data", tr_data,
                        "Triplet NDJSON (default: synthetic bench)");
  train_cmd->add_option("--out", tr_out, "Output bank directory")->required();
  train_cmd->add_option("--history", tr_history,
                        "Loss history CSV path (default: <out>/loss_history.csv)");

  // query
  auto* query_cmd = app.add_subcommand("query", "Retrieve top-k evidence");
  std::string q_index, q_text, q_file, q_style = "text", q_format = "table";
  std::size_t q_k = 0;
  query_cmd->add_option("--index", q_index, "Index directory")->required();
  query_cmd->add_option("--text", q_text, "Query payload");
  query_cmd->add_option("--file", q_file, "Read query payload from a file");
  query_cmd->add_option("--style", q_style, "Query style tag");
  query_cmd->add_option("--k", q_k, "Results to return (default from config)");
  query_cmd->add_option("--format", q_format, "table | json");

  // rag
  auto* rag_cmd = app.add_subcommand("rag", "Answer with retrieved evidence");
  std::string r_index, r_text, r_file, r_style = "text", r_backend;
  std::size_t r_k = 0;
  bool r_show = false;
  rag_cmd->add_option("--index", r_index, "Index directory")->required();
  rag_cmd->add_option("--text", r_text, "Query payload");
  rag_cmd->add_option("--file", r_file, "Read query payload from a file");
  rag_cmd->add_option("--style", r_style, "Query style tag");
  rag_cmd->add_option("--k", r_k, "Evidence items (default from config)");
  rag_cmd->add_option("--backend", r_backend, "stub | live");
  rag_cmd->add_flag("--show-evidence", r_show, "Print the evidence set");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Recall grid and ablations");
  eval_cmd->require_subcommand(1);
  std::string ev_out, ev_bank, ev_axis, ev_values;
  auto* ev_grid = eval_cmd->add_subcommand("grid", "Style x style recall grid");
  ev_grid->add_option("--out", ev_out, "Report directory")->required();
  ev_grid->add_option("--bank", ev_bank, "Trained bank to evaluate");
  auto* ev_abl = eval_cmd->add_subcommand("ablation", "Sweep one design axis");
  ev_abl->add_option("--axis", ev_axis,
                     "insertion_depth | token_num | bank_size")
      ->required();
  ev_abl->add_option("--values", ev_values, "Comma-separated axis values")
      ->required();
  ev_abl->add_option("--out", ev_out, "Report directory")->required();

  // bank
  auto* bank_cmd = app.add_subcommand("bank", "Inspect saved banks");
  bank_cmd->require_subcommand(1);
  std::string b_dir;
  auto* b_inspect = bank_cmd->add_subcommand("inspect", "Print bank summary");
  b_inspect->add_option("--bank", b_dir, "Bank directory")->required();

  // synth
  auto* synth_cmd =
      app.add_subcommand("synth", "Write the synthetic corpus and triplets");
  std::string s_out;
  synth_cmd->add_option("--out", s_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    unirag::ConfigLayers layers;
    if (!config_path.empty()) layers.file = config_path;
    layers.env = unirag::collect_env();
    layers.overrides = overrides;
    // Dedicated flags are the most specific layer; they land last.
    if (query_cmd->parsed() && q_k > 0) {
      layers.overrides.push_back("index.top_k=" + std::to_string(q_k));
    }
    if (rag_cmd->parsed()) {
      if (r_k > 0) {
        layers.overrides.push_back("index.top_k=" + std::to_string(r_k));
      }
      if (!r_backend.empty()) {
        layers.overrides.push_back("rag.backend=" + r_backend);
      }
    }
    const unirag::RunConfig cfg = unirag::load_run_config(layers);

    if (ix_build->parsed()) {
      System sys(cfg);
      return cmd_index_build(sys, ix_corpus, ix_out);
    }
    if (ix_add->parsed()) {
      System sys(cfg);
      return cmd_index_add(sys, ix_dir, ix_corpus, ix_out);
    }
    if (ix_stats->parsed()) return cmd_index_stats(ix_dir);
    if (train_cmd->parsed()) {
      System sys(cfg);
      return cmd_train(sys, tr_data, tr_out, tr_history);
    }
    if (query_cmd->parsed()) {
      System sys(cfg);
      return cmd_query(sys, q_index, cli_query(q_text, q_file, q_style),
                       cfg.index.top_k, q_format);
    }
    if (rag_cmd->parsed()) {
      System sys(cfg);
      return cmd_rag(sys, r_index, cli_query(r_text, r_file, r_style),
                     cfg.index.top_k, r_show);
    }
    if (ev_grid->parsed()) {
      System sys(cfg, ev_bank.empty()
                          ? std::optional<fs::path>{}
                          : std::optional<fs::path>{ev_bank});
      return cmd_eval_grid(sys, ev_out);
    }
    if (ev_abl->parsed()) return cmd_eval_ablation(cfg, ev_axis, ev_values, ev_out);
    if (b_inspect->parsed()) return cmd_bank_inspect(b_dir);
    if (synth_cmd->parsed()) return cmd_synth(cfg, s_out);

    std::fprintf(stderr, "error: no subcommand selected\n");
    return 2;
  } catch (const unirag::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return unirag::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
}
