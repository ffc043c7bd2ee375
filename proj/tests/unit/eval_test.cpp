#include "unirag/eval.hpp"

#include <gtest/gtest.h>

#include <memory>
#include <string>
#include <vector>

#include "support/oracles.hpp"
#include "support/testutil.hpp"
#include "support/tolerances.hpp"

namespace unirag {
namespace {

SynthBenchConfig small_bench_config() {
  SynthBenchConfig cfg;
  cfg.concepts = 8;
  cfg.styles = {Style::image, Style::sketch, Style::art};
  cfg.noise_scale = 0.05;
  cfg.queries_per_cell = 2;
  cfg.dimension = 16;
  cfg.seed = 5;
  return cfg;
}

// A compact but fully wired system around a bench config.
struct System {
  SystemConfig cfg;
  std::unique_ptr<Embedder> embedder;
  std::unique_ptr<Tokenizer> tokenizer;
  FrozenEncoder encoder;
  Bank bank;

  explicit System(const SynthBenchConfig& bench_cfg, std::uint64_t seed = 77)
      : encoder(FrozenEncoder::seeded(make_encoder_config(bench_cfg, seed))),
        bank(Bank::init(make_bank_config(bench_cfg), seed + 1)) {
    cfg.embedder.dimension = bench_cfg.dimension;
    cfg.embedder.seed = bench_cfg.seed;
    cfg.embedder.noise_scale = bench_cfg.noise_scale;
    cfg.bank = make_bank_config(bench_cfg);
    cfg.encoder = make_encoder_config(bench_cfg, seed);
    cfg.train.epochs = 1;
    cfg.train.batch = 2;
    cfg.train.lr = 1e-3;
    cfg.seed = seed + 1;
    embedder = make_embedder(cfg.embedder);
    tokenizer = std::make_unique<Tokenizer>(cfg.encoder, cfg.embedder.provider);
  }

  static EncoderConfig make_encoder_config(const SynthBenchConfig& bench_cfg,
                                           std::uint64_t seed) {
    EncoderConfig e;
    e.layers = 2;
    e.dimension = bench_cfg.dimension;
    e.token_num = 2;
    e.max_len = 6;
    e.patch_count = 3;
    e.seed = seed;
    return e;
  }

  static BankConfig make_bank_config(const SynthBenchConfig& bench_cfg) {
    BankConfig b;
    b.entries = 6;
    b.select_n = 2;
    b.experts = 2;
    b.rank = 2;
    b.top_e = 1;
    b.dimension = bench_cfg.dimension;
    return b;
  }

  Pipeline pipeline(QueryCache* cache = nullptr) const {
    return Pipeline{bank, encoder, *tokenizer, *embedder, cache};
  }
};

TEST(BenchGen, CountsMatchTheGrid) {
  SynthBenchConfig cfg;
  cfg.concepts = 2;
  cfg.styles = {Style::text, Style::image};
  cfg.queries_per_cell = 3;
  cfg.dimension = 8;
  const auto bench = gen_bench(cfg);
  EXPECT_EQ(bench.targets.size(), 4u);  // 2 concepts x 2 styles
  ASSERT_EQ(bench.queries.size(), 2u);
  EXPECT_EQ(bench.queries.at(Style::text).size(), 6u);
  EXPECT_EQ(bench.queries.at(Style::image).size(), 6u);
}

TEST(BenchGen, ZeroNoiseMakesQueriesEqualTheirTargets) {
  auto cfg = small_bench_config();
  cfg.noise_scale = 0.0;
  const auto bench = gen_bench(cfg);
  EmbedderConfig emb_cfg;
  emb_cfg.dimension = cfg.dimension;
  emb_cfg.seed = cfg.seed;
  emb_cfg.noise_scale = 0.0;
  const auto embedder = make_embedder(emb_cfg);
  for (const auto& [style, queries] : bench.queries) {
    for (const auto& bq : queries) {
      const Query target{bench_item_id(bq.concept_name, style), style,
                         bq.concept_name + "#item"};
      EXPECT_EQ(embedder->embed(bq.query).vector,
                embedder->embed(target).vector);
    }
  }
}

TEST(BenchGen, SeededGenerationIsReproducible) {
  const auto a = gen_bench(small_bench_config());
  const auto b = gen_bench(small_bench_config());
  ASSERT_EQ(a.targets.size(), b.targets.size());
  for (std::size_t i = 0; i < a.targets.size(); ++i) {
    EXPECT_EQ(a.targets[i].query.id, b.targets[i].query.id);
    EXPECT_EQ(a.targets[i].query.payload, b.targets[i].query.payload);
    EXPECT_EQ(a.targets[i].concept_name, b.targets[i].concept_name);
  }
  for (const auto& [style, queries] : a.queries) {
    const auto& other = b.queries.at(style);
    ASSERT_EQ(queries.size(), other.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
      EXPECT_EQ(queries[i].query.id, other[i].query.id);
      EXPECT_EQ(queries[i].query.payload, other[i].query.payload);
    }
  }
}

TEST(BenchGen, RejectsDegenerateConfigs) {
  auto cfg = small_bench_config();
  cfg.concepts = 1;
  EXPECT_THROW(gen_bench(cfg), Error);
  cfg = small_bench_config();
  cfg.styles = {Style::image};
  EXPECT_THROW(gen_bench(cfg), Error);
  cfg = small_bench_config();
  cfg.styles = {Style::image, Style::image};
  EXPECT_THROW(gen_bench(cfg), Error);
  cfg = small_bench_config();
  cfg.queries_per_cell = 0;
  EXPECT_THROW(gen_bench(cfg), Error);
  cfg = small_bench_config();
  cfg.noise_scale = -0.1;
  EXPECT_THROW(gen_bench(cfg), Error);
}

VectorIndex tiny_corpus() {
  VectorIndex index;
  for (const char* id : {"one", "two", "three", "four"}) {
    CorpusItem item;
    item.id = id;
    Vec e(4, 0.0);
    e[static_cast<std::size_t>(index.size())] = 1.0;
    item.embedding = e;
    index.add(item);
  }
  return index;
}

EvidenceSet ranked_list(const VectorIndex& index,
                        const std::vector<std::string>& ids) {
  EvidenceSet ev;
  ev.k = ids.size();
  double score = 1.0;
  for (const auto& id : ids) {
    ev.items.push_back(ScoredItem{*index.find(id), score});
    score -= 0.1;
  }
  return ev;
}

TEST(RecallAtK, RankArithmetic) {
  const auto index = tiny_corpus();
  const auto top = ranked_list(index, {"two", "one", "three"});
  EXPECT_EQ(recall_at_k(index, top, "two", 1), 1);
  EXPECT_EQ(recall_at_k(index, top, "two", 5), 1);
  EXPECT_EQ(recall_at_k(index, top, "three", 1), 0);
  EXPECT_EQ(recall_at_k(index, top, "three", 5), 1);
  EXPECT_EQ(recall_at_k(index, top, "four", 5), 0);  // present, unranked
}

TEST(RecallAtK, UnknownTruthIdFailsLoudly) {
  const auto index = tiny_corpus();
  const auto top = ranked_list(index, {"one"});
  try {
    recall_at_k(index, top, "ghost", 1);
    FAIL() << "expected unknown truth rejection";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnknownTruthId);
  }
}

TEST(RecallAtK, AggregateMatchesRecountOracle) {
  const std::size_t d = 12;
  Rng rng(33, "recount");
  std::vector<CorpusItem> items;
  for (int i = 0; i < 40; ++i) {
    CorpusItem item;
    item.id = "i" + std::to_string(i);
    Vec v(d);
    for (auto& x : v) x = rng.next_gaussian();
    item.embedding = normalized(v);
    items.push_back(std::move(item));
  }
  const auto index = VectorIndex::build(items);

  std::vector<std::vector<std::string>> ranked_ids;
  std::vector<std::string> truth_ids;
  double aggregate = 0.0;
  for (int q = 0; q < 100; ++q) {
    Vec v(d);
    for (auto& x : v) x = rng.next_gaussian();
    const auto ev = top_k(index, normalized(v), 5);
    std::vector<std::string> ids;
    for (const auto& si : ev.items) ids.push_back(si.item.id);
    ranked_ids.push_back(ids);
    const std::string truth = "i" + std::to_string(rng.next_below(40));
    truth_ids.push_back(truth);
    aggregate += recall_at_k(index, ev, truth, 5);
  }
  aggregate /= 100.0;
  EXPECT_DOUBLE_EQ(aggregate,
                   oracle::o_recall_recount(ranked_ids, truth_ids, 5));
}

TEST(Grid, ZeroNoiseDiagonalIsExact) {
  auto cfg = small_bench_config();
  cfg.noise_scale = 0.0;
  const auto bench = gen_bench(cfg);
  System sys(cfg);
  sys.cfg.embedder.noise_scale = 0.0;
  sys.embedder = make_embedder(sys.cfg.embedder);

  const auto report = run_grid(sys.pipeline(), bench);
  for (Style s : cfg.styles) {
    const auto label = std::string(to_string(s));
    const auto& cell = report.grid.at({label, label});
    EXPECT_EQ(cell.r1, 1.0) << label;
    EXPECT_EQ(cell.r5, 1.0) << label;
  }
}

TEST(Grid, FourStylesGiveTwelveOffDiagonalCells) {
  auto cfg = small_bench_config();
  cfg.styles = {Style::image, Style::sketch, Style::art, Style::lowres};
  cfg.concepts = 4;
  cfg.queries_per_cell = 1;
  const auto bench = gen_bench(cfg);
  System sys(cfg);
  const auto report = run_grid(sys.pipeline(), bench);

  std::size_t off_diag = 0;
  std::size_t diag = 0;
  std::size_t fused = 0;
  for (const auto& [key, cell] : report.grid) {
    if (key.first.find('+') != std::string::npos) {
      ++fused;
      continue;
    }
    (key.first == key.second ? diag : off_diag) += 1;
  }
  EXPECT_EQ(off_diag, 12u);
  EXPECT_EQ(diag, 4u);
  EXPECT_EQ(fused, 4u);  // one fused row per target style
  EXPECT_TRUE(report.grid.count({"sketch+art+lowres", "image"}));
}

TEST(Grid, RecallBoundsAndOrderingHoldEverywhere) {
  const auto cfg = small_bench_config();
  const auto bench = gen_bench(cfg);
  System sys(cfg);
  const auto report = run_grid(sys.pipeline(), bench);
  ASSERT_FALSE(report.grid.empty());
  for (const auto& [key, cell] : report.grid) {
    EXPECT_GE(cell.r1, 0.0);
    EXPECT_LE(cell.r1, cell.r5) << key.first << "->" << key.second;
    EXPECT_LE(cell.r5, 1.0);
    EXPECT_EQ(cell.queries, cfg.concepts * cfg.queries_per_cell);
  }
}

TEST(Grid, SeededReportsAreIdentical) {
  const auto cfg = small_bench_config();
  const auto bench = gen_bench(cfg);
  System sys_a(cfg);
  System sys_b(cfg);
  const auto a = run_grid(sys_a.pipeline(), bench);
  const auto b = run_grid(sys_b.pipeline(), bench);
  EXPECT_EQ(a.fingerprint, b.fingerprint);
  ASSERT_EQ(a.grid.size(), b.grid.size());
  for (const auto& [key, cell] : a.grid) {
    const auto& other = b.grid.at(key);
    EXPECT_EQ(cell.r1, other.r1);
    EXPECT_EQ(cell.r5, other.r5);
  }
}

TEST(Grid, StageMeansAccountForTheEndToEndTime) {
  const auto cfg = small_bench_config();
  const auto bench = gen_bench(cfg);
  System sys(cfg);
  const auto report = run_grid(sys.pipeline(), bench);
  double stage_sum = 0.0;
  for (const auto& [stage, lat] : report.stage_latency) {
    EXPECT_GE(lat.mean_ms, 0.0) << stage;
    stage_sum += lat.mean_ms;
  }
  EXPECT_GT(report.end_to_end.mean_ms, 0.0);
  EXPECT_LE(stage_sum, report.end_to_end.mean_ms * tol::kLatencySlack);
}

TEST(Grid, AttachedCacheAbsorbsTheSecondRun) {
  const auto cfg = small_bench_config();
  const auto bench = gen_bench(cfg);
  System sys(cfg);
  QueryCache cache;
  const auto p = sys.pipeline(&cache);
  run_grid(p, bench);
  const auto calls_after_first = sys.embedder->calls();
  run_grid(p, bench);
  EXPECT_EQ(sys.embedder->calls(), calls_after_first);
}

TEST(Triplets, SeededBuildIsStructurallySound) {
  const auto bench = gen_bench(small_bench_config());
  const auto a = build_triplets(bench, 50, 9);
  const auto b = build_triplets(bench, 50, 9);
  ASSERT_EQ(a.size(), 50u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].anchor.payload, b[i].anchor.payload);
    EXPECT_EQ(a[i].positive.style, b[i].positive.style);
    EXPECT_EQ(a[i].negative.payload, b[i].negative.payload);

    const auto concept_of = [](const Query& q) {
      return q.payload.substr(0, q.payload.find('#'));
    };
    EXPECT_EQ(concept_of(a[i].anchor), concept_of(a[i].positive));
    EXPECT_NE(concept_of(a[i].anchor), concept_of(a[i].negative));
    // Training draws must not reuse benchmark noise draws.
    EXPECT_NE(a[i].anchor.payload.find("#train_"), std::string::npos);
  }
  EXPECT_THROW(build_triplets(bench, 0, 9), Error);
}

TEST(Ablation, SingleValueGivesSingleRow) {
  auto cfg = small_bench_config();
  cfg.concepts = 4;
  cfg.queries_per_cell = 1;
  const auto bench = gen_bench(cfg);
  System sys(cfg);
  const auto rows =
      run_ablation(AblationAxis::token_num, {"1"}, bench, sys.cfg, 4);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].axis, "token_num");
  EXPECT_EQ(rows[0].value, "1");
}

TEST(Ablation, InsertionDepthIsIndifferentAtOneLayer) {
  auto cfg = small_bench_config();
  cfg.concepts = 4;
  cfg.queries_per_cell = 1;
  const auto bench = gen_bench(cfg);
  System sys(cfg);
  sys.cfg.encoder.layers = 1;
  const auto rows = run_ablation(AblationAxis::insertion_depth,
                                 {"shallow", "deep"}, bench, sys.cfg, 4);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].diag_r1, rows[1].diag_r1);
  EXPECT_EQ(rows[0].offdiag_r1, rows[1].offdiag_r1);
}

TEST(Ablation, BankSizeRowsAreRecorded) {
  auto cfg = small_bench_config();
  cfg.concepts = 4;
  cfg.queries_per_cell = 1;
  const auto bench = gen_bench(cfg);
  System sys(cfg);
  const auto rows =
      run_ablation(AblationAxis::bank_size, {"2", "4"}, bench, sys.cfg, 4);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].value, "2");
  EXPECT_EQ(rows[1].value, "4");
  for (const auto& row : rows) {
    EXPECT_GE(row.diag_r1, 0.0);
    EXPECT_LE(row.diag_r1, 1.0);
  }
}

TEST(Ablation, RejectsEmptyOrMalformedValues) {
  const auto cfg = small_bench_config();
  const auto bench = gen_bench(cfg);
  System sys(cfg);
  EXPECT_THROW(run_ablation(AblationAxis::token_num, {}, bench, sys.cfg, 4),
               Error);
  EXPECT_THROW(
      run_ablation(AblationAxis::token_num, {"many"}, bench, sys.cfg, 4),
      Error);
  EXPECT_THROW(run_ablation(AblationAxis::insertion_depth, {"sideways"}, bench,
                            sys.cfg, 4),
               Error);
}

TEST(Reports, FilesCarryTheGridAndFingerprint) {
  auto cfg = small_bench_config();
  cfg.concepts = 4;
  cfg.queries_per_cell = 1;
  const auto bench = gen_bench(cfg);
  System sys(cfg);
  const auto report = run_grid(sys.pipeline(), bench);

  testutil::TempDir dir("reports");
  write_recall_csv(dir.file("recall.csv"), report);
  write_latency_csv(dir.file("latency.csv"), report);
  write_markdown_grid(dir.file("grid.md"), report);

  const auto recall = testutil::read_file(dir.file("recall.csv"));
  EXPECT_EQ(recall.substr(0, recall.find('\n')),
            "query_style,target_style,r1,r5,queries,fingerprint");
  EXPECT_NE(recall.find(format_fingerprint(report.fingerprint)),
            std::string::npos);
  EXPECT_NE(recall.find("image,sketch,"), std::string::npos);

  const auto latency = testutil::read_file(dir.file("latency.csv"));
  EXPECT_EQ(latency.substr(0, latency.find('\n')),
            "stage,mean_ms,p95_ms,fingerprint");
  for (const char* stage : {"embed", "bank", "encode", "top_k", "end_to_end"}) {
    EXPECT_NE(latency.find(stage), std::string::npos) << stage;
  }

  const auto grid = testutil::read_file(dir.file("grid.md"));
  EXPECT_NE(grid.find("| query \\ target |"), std::string::npos);
  EXPECT_NE(grid.find(format_fingerprint(report.fingerprint)),
            std::string::npos);
  EXPECT_NE(grid.find("sketch+art"), std::string::npos);
}

}  // namespace
}  // namespace unirag
