#pragma once

// Layered run configuration. A TOML-style key/value file, a fixed set of
// environment variables, and dotted command-line overrides resolve into one
// RunConfig; precedence is overrides > environment > file > defaults. The
// parser is strict: unknown sections, unknown keys, malformed values, and
// version drift are errors, never warnings.

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "unirag/errors.hpp"
#include "unirag/eval.hpp"
#include "unirag/pipeline.hpp"
#include "unirag/rag.hpp"

namespace unirag {

inline constexpr int kConfigVersion = 1;

struct IndexSettings {
  std::size_t top_k = 5;

  void validate() const {
    if (top_k < 1) {
      throw Error(ErrorKind::InvalidConfig, "index top_k must be >= 1");
    }
  }

  bool operator==(const IndexSettings&) const = default;
};

// Live mode must be pointed at a model explicitly (file, environment, or
// flag); a blank model is the "never configured" sentinel.
inline BackendConfig unconfigured_backend() {
  BackendConfig c;
  c.model.clear();
  return c;
}

struct RagSettings {
  std::string backend = "stub";  // "stub" | "live"
  BackendConfig chat = unconfigured_backend();
  RetryPolicy retry;
  std::size_t evidence_char_budget = kDefaultEvidenceBudget;
  std::string prompt_text = SystemPrompt{}.text;

  void validate() const {
    if (backend != "stub" && backend != "live") {
      throw Error(ErrorKind::InvalidConfig,
                  "rag backend must be 'stub' or 'live', got '" + backend +
                      "'");
    }
    retry.validate();
    if (prompt_text.empty()) {
      throw Error(ErrorKind::InvalidConfig, "rag prompt_text is empty");
    }
    if (backend == "live") {
      if (chat.model.empty()) {
        throw Error(ErrorKind::InvalidConfig,
                    "rag backend 'live' has no model configured; set "
                    "UNIRAG_CHAT_MODEL or [rag] model in the config file");
      }
      chat.validate();
    } else if (chat.timeout_ms <= 0 || chat.max_in_flight < 1) {
      throw Error(ErrorKind::InvalidConfig, "bad backend transport settings");
    }
  }

  SystemPrompt prompt() const {
    SystemPrompt sp;
    sp.text = prompt_text;
    return sp;
  }

  bool operator==(const RagSettings&) const = default;
};

struct EvalSettings {
  SynthBenchConfig bench;
  std::size_t triplet_count = 96;

  void validate() const {
    bench.validate();
    if (triplet_count < 1) {
      throw Error(ErrorKind::InvalidConfig, "eval triplet_count must be >= 1");
    }
  }

  bool operator==(const EvalSettings&) const = default;
};

struct RunConfig {
  SystemConfig system;
  IndexSettings index;
  RagSettings rag;
  EvalSettings eval;

  void validate() const {
    system.validate();
    index.validate();
    rag.validate();
    eval.validate();
    if (eval.bench.dimension != system.embedder.dimension) {
      throw Error(ErrorKind::InvalidConfig,
                  "bench dimension diverged from the system dimension");
    }
  }

  bool operator==(const RunConfig&) const = default;
};

// The bench records which latent space it describes; those fields follow the
// embedder instead of being configured twice.
inline void finalize(RunConfig& cfg) {
  cfg.eval.bench.dimension = cfg.system.embedder.dimension;
  cfg.eval.bench.noise_scale = cfg.system.embedder.noise_scale;
  cfg.eval.bench.seed = cfg.system.embedder.seed;
}

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Cut a trailing comment; '#' inside a quoted value does not count.
inline std::string strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (c == '\\' && quoted) {
      ++i;
      continue;
    }
    if (c == '"') quoted = !quoted;
    if (c == '#' && !quoted) return std::string(line.substr(0, i));
  }
  return std::string(line);
}

inline std::string unescape_quoted(std::string_view raw,
                                   const std::string& where) {
  // raw includes the surrounding quotes; nothing may follow the closer.
  if (raw.size() < 2 || raw.front() != '"') {
    throw Error(ErrorKind::InvalidConfig,
                "config: unterminated string (" + where + ")");
  }
  std::string out;
  std::size_t i = 1;
  while (i < raw.size()) {
    const char c = raw[i];
    if (c == '"') {
      if (i + 1 != raw.size()) {
        throw Error(ErrorKind::InvalidConfig,
                    "config: trailing characters after string (" + where +
                        ")");
      }
      return out;
    }
    if (c == '\\') {
      if (i + 1 >= raw.size()) {
        throw Error(ErrorKind::InvalidConfig,
                    "config: dangling escape (" + where + ")");
      }
      const char esc = raw[i + 1];
      switch (esc) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        default:
          throw Error(ErrorKind::InvalidConfig,
                      std::string("config: unsupported escape '\\") + esc +
                          "' (" + where + ")");
      }
      i += 2;
      continue;
    }
    out += c;
    ++i;
  }
  throw Error(ErrorKind::InvalidConfig,
              "config: unterminated string (" + where + ")");
}

inline std::string as_string(const std::string& value,
                             const std::string& where) {
  if (!value.empty() && value.front() == '"') {
    return unescape_quoted(value, where);
  }
  return value;
}

inline std::string escape_quoted(std::string_view s) {
  std::string out = "\"";
  for (const char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  out += '"';
  return out;
}

inline std::uint64_t as_u64(const std::string& value,
                            const std::string& where) {
  const std::string v = as_string(value, where);
  if (v.empty() || v[0] == '-' || v[0] == '+') {
    throw Error(ErrorKind::InvalidConfig,
                "config: expected an unsigned integer, got '" + v + "' (" +
                    where + ")");
  }
  errno = 0;
  char* end = nullptr;
  const unsigned long long parsed = std::strtoull(v.c_str(), &end, 10);
  if (errno != 0 || end == v.c_str() || *end != '\0') {
    throw Error(ErrorKind::InvalidConfig,
                "config: expected an unsigned integer, got '" + v + "' (" +
                    where + ")");
  }
  return static_cast<std::uint64_t>(parsed);
}

inline std::size_t as_size(const std::string& value,
                           const std::string& where) {
  return static_cast<std::size_t>(as_u64(value, where));
}

inline int as_int(const std::string& value, const std::string& where) {
  const std::string v = as_string(value, where);
  errno = 0;
  char* end = nullptr;
  const long parsed = std::strtol(v.c_str(), &end, 10);
  if (errno != 0 || end == v.c_str() || *end != '\0' || v.empty()) {
    throw Error(ErrorKind::InvalidConfig,
                "config: expected an integer, got '" + v + "' (" + where +
                    ")");
  }
  return static_cast<int>(parsed);
}

inline double as_double(const std::string& value, const std::string& where) {
  const std::string v = as_string(value, where);
  errno = 0;
  char* end = nullptr;
  const double parsed = std::strtod(v.c_str(), &end);
  if (errno != 0 || end == v.c_str() || *end != '\0' || v.empty() ||
      !std::isfinite(parsed)) {
    throw Error(ErrorKind::InvalidConfig,
                "config: expected a finite number, got '" + v + "' (" + where +
                    ")");
  }
  return parsed;
}

inline std::vector<Style> as_styles(const std::string& value,
                                    const std::string& where) {
  const std::string v = as_string(value, where);
  std::vector<Style> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto comma = v.find(',', start);
    const auto piece =
        trim(v.substr(start, comma == std::string::npos ? std::string::npos
                                                        : comma - start));
    if (!piece.empty()) {
      try {
        out.push_back(style_from_string(piece));
      } catch (const Error&) {
        throw Error(ErrorKind::InvalidConfig,
                    "config: unknown style '" + piece + "' (" + where + ")");
      }
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) {
    throw Error(ErrorKind::InvalidConfig,
                "config: style list is empty (" + where + ")");
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// One key in one section; the shared vocabulary for files, environment
// bindings, and command-line overrides.
inline void apply_kv(RunConfig& cfg, const std::string& section,
                     const std::string& key, const std::string& value,
                     const std::string& where) {
  using detail::as_double;
  using detail::as_int;
  using detail::as_size;
  using detail::as_string;
  using detail::as_styles;
  using detail::as_u64;

  const auto unknown = [&]() -> void {
    const std::string qualified =
        section.empty() ? key : section + "." + key;
    throw Error(ErrorKind::InvalidConfig,
                "config: unknown key '" + qualified + "' (" + where + ")");
  };

  if (section.empty()) {
    if (key == "seed") {
      cfg.system.seed = as_u64(value, where);
    } else if (key == "config_version") {
      if (as_int(value, where) != kConfigVersion) {
        throw Error(ErrorKind::VersionMismatch,
                    "config: version " + as_string(value, where) +
                        " is not the supported version " +
                        std::to_string(kConfigVersion) + " (" + where + ")");
      }
    } else {
      unknown();
    }
    return;
  }

  if (section == "embedder") {
    auto& e = cfg.system.embedder;
    if (key == "dimension") e.dimension = as_size(value, where);
    else if (key == "provider") {
      try {
        e.provider = provider_from_string(as_string(value, where));
      } catch (const Error& err) {
        throw Error(ErrorKind::InvalidConfig,
                    "config: " + err.raw_message() + " (" + where + ")");
      }
    } else if (key == "seed") e.seed = as_u64(value, where);
    else if (key == "noise_scale") e.noise_scale = as_double(value, where);
    else if (key == "style_overlap") e.style_overlap = as_double(value, where);
    else if (key == "endpoint_host") e.endpoint_host = as_string(value, where);
    else if (key == "endpoint_port") e.endpoint_port = as_int(value, where);
    else if (key == "endpoint_path") e.endpoint_path = as_string(value, where);
    else if (key == "timeout_ms") e.timeout_ms = as_int(value, where);
    else if (key == "max_retries") e.max_retries = as_int(value, where);
    else if (key == "max_in_flight") e.max_in_flight = as_int(value, where);
    else unknown();
    return;
  }

  if (section == "bank") {
    auto& b = cfg.system.bank;
    if (key == "entries") b.entries = as_size(value, where);
    else if (key == "select_n") b.select_n = as_size(value, where);
    else if (key == "experts") b.experts = as_size(value, where);
    else if (key == "rank") b.rank = as_size(value, where);
    else if (key == "top_e") b.top_e = as_size(value, where);
    else if (key == "dimension") b.dimension = as_size(value, where);
    else unknown();
    return;
  }

  if (section == "encoder") {
    auto& n = cfg.system.encoder;
    if (key == "layers") n.layers = as_size(value, where);
    else if (key == "dimension") n.dimension = as_size(value, where);
    else if (key == "insertion") {
      try {
        n.insertion = insertion_from_string(as_string(value, where));
      } catch (const Error& err) {
        throw Error(ErrorKind::InvalidConfig,
                    "config: " + err.raw_message() + " (" + where + ")");
      }
    } else if (key == "token_num") n.token_num = as_size(value, where);
    else if (key == "max_len") n.max_len = as_size(value, where);
    else if (key == "patch_count") n.patch_count = as_size(value, where);
    else if (key == "seed") n.seed = as_u64(value, where);
    else unknown();
    return;
  }

  if (section == "trainer") {
    auto& t = cfg.system.train;
    if (key == "margin") t.margin = as_double(value, where);
    else if (key == "lambda") t.lambda = as_double(value, where);
    else if (key == "lr") t.lr = as_double(value, where);
    else if (key == "weight_decay") t.weight_decay = as_double(value, where);
    else if (key == "epochs") t.epochs = as_size(value, where);
    else if (key == "batch") t.batch = as_size(value, where);
    else if (key == "warmup_epochs") t.warmup_epochs = as_size(value, where);
    else if (key == "seed") t.seed = as_u64(value, where);
    else unknown();
    return;
  }

  if (section == "index") {
    if (key == "top_k") cfg.index.top_k = as_size(value, where);
    else unknown();
    return;
  }

  if (section == "rag") {
    auto& r = cfg.rag;
    if (key == "backend") r.backend = as_string(value, where);
    else if (key == "model") r.chat.model = as_string(value, where);
    else if (key == "host") r.chat.host = as_string(value, where);
    else if (key == "port") r.chat.port = as_int(value, where);
    else if (key == "path") r.chat.path = as_string(value, where);
    else if (key == "api_key") r.chat.api_key = as_string(value, where);
    else if (key == "temperature") r.chat.temperature = as_double(value, where);
    else if (key == "timeout_ms") r.chat.timeout_ms = as_int(value, where);
    else if (key == "max_in_flight") r.chat.max_in_flight = as_int(value, where);
    else if (key == "max_retries") r.retry.max_retries = as_int(value, where);
    else if (key == "backoff_ms") r.retry.backoff_ms = as_int(value, where);
    else if (key == "evidence_budget")
      r.evidence_char_budget = as_size(value, where);
    else if (key == "prompt_text") r.prompt_text = as_string(value, where);
    else unknown();
    return;
  }

  if (section == "eval") {
    auto& v = cfg.eval;
    if (key == "concepts") v.bench.concepts = as_size(value, where);
    else if (key == "styles") v.bench.styles = as_styles(value, where);
    else if (key == "queries_per_cell")
      v.bench.queries_per_cell = as_size(value, where);
    else if (key == "triplet_count") v.triplet_count = as_size(value, where);
    else unknown();
    return;
  }

  throw Error(ErrorKind::InvalidConfig,
              "config: unknown section '[" + section + "]' (" + where + ")");
}

// Applies file text onto cfg; no finalize and no validate, callers layer.
inline void apply_config_text(RunConfig& cfg, const std::string& text,
                              const std::string& source) {
  static const std::vector<std::string> kSections = {
      "embedder", "bank", "encoder", "trainer", "index", "rag", "eval"};
  std::istringstream in(text);
  std::string raw;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    const std::string line = detail::trim(detail::strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw Error(ErrorKind::InvalidConfig,
                    "config: malformed section header '" + line + "' (" +
                        where + ")");
      }
      const std::string name = detail::trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& s : kSections) known |= s == name;
      if (!known) {
        throw Error(ErrorKind::InvalidConfig,
                    "config: unknown section '[" + name + "]' (" + where +
                        ")");
      }
      section = name;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::InvalidConfig,
                  "config: expected 'key = value', got '" + line + "' (" +
                      where + ")");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw Error(ErrorKind::InvalidConfig,
                  "config: expected 'key = value', got '" + line + "' (" +
                      where + ")");
    }
    apply_kv(cfg, section, key, value, where);
  }
}

// Fixed roster of recognized environment variables.
struct EnvBinding {
  const char* name;
  const char* section;
  const char* key;
};

inline constexpr EnvBinding kEnvBindings[] = {
    {"UNIRAG_SEED", "", "seed"},
    {"UNIRAG_CHAT_MODEL", "rag", "model"},
    {"UNIRAG_CHAT_HOST", "rag", "host"},
    {"UNIRAG_CHAT_PORT", "rag", "port"},
    {"UNIRAG_CHAT_PATH", "rag", "path"},
    {"UNIRAG_CHAT_API_KEY", "rag", "api_key"},
    {"UNIRAG_EMBED_HOST", "embedder", "endpoint_host"},
    {"UNIRAG_EMBED_PORT", "embedder", "endpoint_port"},
    {"UNIRAG_EMBED_PATH", "embedder", "endpoint_path"},
};

inline void apply_env(RunConfig& cfg,
                      const std::map<std::string, std::string>& env) {
  for (const auto& binding : kEnvBindings) {
    const auto it = env.find(binding.name);
    if (it == env.end()) continue;
    apply_kv(cfg, binding.section, binding.key, it->second,
             std::string("environment ") + binding.name);
  }
}

inline std::map<std::string, std::string> collect_env() {
  std::map<std::string, std::string> out;
  for (const auto& binding : kEnvBindings) {
    if (const char* v = std::getenv(binding.name)) out[binding.name] = v;
  }
  return out;
}

// Dotted override, e.g. "bank.entries=8" or "seed=7".
inline void apply_override(RunConfig& cfg, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorKind::InvalidConfig,
                "config: override must look like section.key=value, got '" +
                    spec + "'");
  }
  const std::string path = detail::trim(spec.substr(0, eq));
  const std::string value = detail::trim(spec.substr(eq + 1));
  if (value.empty()) {
    throw Error(ErrorKind::InvalidConfig,
                "config: override '" + spec + "' has no value");
  }
  const auto dot = path.find('.');
  const std::string section =
      dot == std::string::npos ? "" : path.substr(0, dot);
  const std::string key =
      dot == std::string::npos ? path : path.substr(dot + 1);
  apply_kv(cfg, section, key, value, "override '" + spec + "'");
}

struct ConfigLayers {
  std::optional<std::filesystem::path> file;
  std::map<std::string, std::string> env;
  std::vector<std::string> overrides;
};

inline RunConfig load_run_config(const ConfigLayers& layers) {
  RunConfig cfg;
  if (layers.file) {
    apply_config_text(cfg, read_text_file(*layers.file),
                      layers.file->string());
  }
  apply_env(cfg, layers.env);
  for (const auto& o : layers.overrides) apply_override(cfg, o);
  finalize(cfg);
  cfg.validate();
  return cfg;
}

inline RunConfig parse_config(const std::string& text,
                              const std::string& source = "config") {
  RunConfig cfg;
  apply_config_text(cfg, text, source);
  finalize(cfg);
  cfg.validate();
  return cfg;
}

// Full, explicit dump; parse_config(write_config(cfg)) reproduces cfg.
inline std::string write_config(const RunConfig& cfg) {
  using detail::escape_quoted;
  using detail::format_double;
  std::ostringstream out;
  out << "# unirag run configuration\n";
  out << "config_version = " << kConfigVersion << "\n";
  out << "seed = " << cfg.system.seed << "\n";

  const auto& e = cfg.system.embedder;
  out << "\n[embedder]\n";
  out << "dimension = " << e.dimension << "\n";
  out << "provider = " << escape_quoted(to_string(e.provider)) << "\n";
  out << "seed = " << e.seed << "\n";
  out << "noise_scale = " << format_double(e.noise_scale) << "\n";
  out << "style_overlap = " << format_double(e.style_overlap) << "\n";
  out << "endpoint_host = " << escape_quoted(e.endpoint_host) << "\n";
  out << "endpoint_port = " << e.endpoint_port << "\n";
  out << "endpoint_path = " << escape_quoted(e.endpoint_path) << "\n";
  out << "timeout_ms = " << e.timeout_ms << "\n";
  out << "max_retries = " << e.max_retries << "\n";
  out << "max_in_flight = " << e.max_in_flight << "\n";

  const auto& b = cfg.system.bank;
  out << "\n[bank]\n";
  out << "entries = " << b.entries << "\n";
  out << "select_n = " << b.select_n << "\n";
  out << "experts = " << b.experts << "\n";
  out << "rank = " << b.rank << "\n";
  out << "top_e = " << b.top_e << "\n";
  out << "dimension = " << b.dimension << "\n";

  const auto& n = cfg.system.encoder;
  out << "\n[encoder]\n";
  out << "layers = " << n.layers << "\n";
  out << "dimension = " << n.dimension << "\n";
  out << "insertion = " << escape_quoted(to_string(n.insertion)) << "\n";
  out << "token_num = " << n.token_num << "\n";
  out << "max_len = " << n.max_len << "\n";
  out << "patch_count = " << n.patch_count << "\n";
  out << "seed = " << n.seed << "\n";

  const auto& t = cfg.system.train;
  out << "\n[trainer]\n";
  out << "margin = " << format_double(t.margin) << "\n";
  out << "lambda = " << format_double(t.lambda) << "\n";
  out << "lr = " << format_double(t.lr) << "\n";
  out << "weight_decay = " << format_double(t.weight_decay) << "\n";
  out << "epochs = " << t.epochs << "\n";
  out << "batch = " << t.batch << "\n";
  out << "warmup_epochs = " << t.warmup_epochs << "\n";
  out << "seed = " << t.seed << "\n";

  out << "\n[index]\n";
  out << "top_k = " << cfg.index.top_k << "\n";

  const auto& r = cfg.rag;
  out << "\n[rag]\n";
  out << "backend = " << escape_quoted(r.backend) << "\n";
  if (!r.chat.model.empty()) {
    out << "model = " << escape_quoted(r.chat.model) << "\n";
  }
  out << "host = " << escape_quoted(r.chat.host) << "\n";
  out << "port = " << r.chat.port << "\n";
  out << "path = " << escape_quoted(r.chat.path) << "\n";
  if (!r.chat.api_key.empty()) {
    out << "api_key = " << escape_quoted(r.chat.api_key) << "\n";
  }
  out << "temperature = " << format_double(r.chat.temperature) << "\n";
  out << "timeout_ms = " << r.chat.timeout_ms << "\n";
  out << "max_in_flight = " << r.chat.max_in_flight << "\n";
  out << "max_retries = " << r.retry.max_retries << "\n";
  out << "backoff_ms = " << r.retry.backoff_ms << "\n";
  out << "evidence_budget = " << r.evidence_char_budget << "\n";
  out << "prompt_text = " << escape_quoted(r.prompt_text) << "\n";

  const auto& v = cfg.eval;
  out << "\n[eval]\n";
  out << "concepts = " << v.bench.concepts << "\n";
  std::string styles;
  for (const Style s : v.bench.styles) {
    if (!styles.empty()) styles += ",";
    styles += to_string(s);
  }
  out << "styles = " << escape_quoted(styles) << "\n";
  out << "queries_per_cell = " << v.bench.queries_per_cell << "\n";
  out << "triplet_count = " << v.triplet_count << "\n";
  return out.str();
}

inline void save_config(const RunConfig& cfg,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error(ErrorKind::IoFailure,
                "cannot write config file " + path.string());
  }
  out << write_config(cfg);
  if (!out) {
    throw Error(ErrorKind::IoFailure,
                "failed writing config file " + path.string());
  }
}

}  // namespace unirag
