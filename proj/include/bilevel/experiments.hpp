#pragma once

// Experiment harness: configuration, presets, CSV and manifest output, and the
// bounds-compare / tune / sweep / validate subcommands.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>
#include <zlib.h>

#include "bilevel/composite.hpp"
#include "bilevel/dfo.hpp"
#include "bilevel/errors.hpp"
#include "bilevel/idx.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/upper_problems.hpp"

namespace bilevel {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

inline constexpr double kUnbounded = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// CSV

/// Shortest decimal text carrying 17 significant digits, so that parsing it
/// back yields the identical double.
inline std::string format_double(double v) { return fmt::format("{:.17g}", v); }

inline double parse_double(const std::string& s) {
  if (s.empty()) throw FormatError("empty numeric field", 0);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw FormatError("bad numeric field '" + s + "'", 0);
  return v;
}

inline std::size_t parse_size(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw FormatError("bad integer field '" + s + "'", 0);
  }
  return static_cast<std::size_t>(std::stoull(s));
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError("CSV has no column '" + name + "'", 0);
    return static_cast<std::size_t>(it - header.begin());
  }
  bool has_column(const std::string& name) const {
    return std::find(header.begin(), header.end(), name) != header.end();
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

/// Plain comma-separated file without quoting; every row must match the header width.
inline CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header", 0);
  table.header = split_csv_line(line);
  std::size_t offset = line.size() + 1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != table.header.size()) {
      throw FormatError(path.string() + ": row width differs from the header", offset);
    }
    offset += line.size() + 1;
    table.rows.push_back(std::move(fields));
  }
  return table;
}

inline std::string join_csv(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i > 0) out += ',';
    out += fields[i];
  }
  return out;
}

inline void write_csv(const fs::path& path, const CsvTable& table) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << join_csv(table.header) << '\n';
  for (const auto& row : table.rows) out << join_csv(row) << '\n';
  if (!out) throw ConfigError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// RunLog CSV

inline const std::vector<std::string>& runlog_header() {
  static const std::vector<std::string> header{"eval_index", "theta1", "theta2", "F",
                                               "certified", "cum_fista_iters", "delta",
                                               "step_type"};
  return header;
}

inline CsvTable runlog_table(const RunLog& log) {
  CsvTable table{runlog_header(), {}};
  for (const auto& r : log.records) {
    if (r.theta.size() != 2) throw ConfigError("RunLog CSV holds two-dimensional theta only");
    table.rows.push_back({std::to_string(r.eval_index), format_double(r.theta(0)),
                          format_double(r.theta(1)), format_double(r.objective),
                          r.certified ? "1" : "0", std::to_string(r.cum_fista_iters),
                          format_double(r.delta), to_string(r.step_type)});
  }
  return table;
}

inline void write_runlog(const fs::path& path, const RunLog& log) {
  write_csv(path, runlog_table(log));
}

inline RunLog read_runlog(const fs::path& path) {
  const CsvTable table = read_csv(path);
  if (table.header != runlog_header()) {
    throw FormatError(path.string() + ": not a RunLog CSV", 0);
  }
  RunLog log;
  for (const auto& row : table.rows) {
    if (row[4] != "0" && row[4] != "1") throw FormatError("bad certified flag '" + row[4] + "'", 0);
    log.records.push_back(RunLogRecord{parse_size(row[0]),
                                       Vector{{parse_double(row[1]), parse_double(row[2])}},
                                       parse_double(row[3]), row[4] == "1", parse_size(row[5]),
                                       parse_double(row[6]), step_type_from_string(row[7])});
  }
  return log;
}

inline const char* to_string(ConsumeRole role) {
  switch (role) {
    case ConsumeRole::model: return "model";
    case ConsumeRole::acceptance_base: return "acceptance_base";
    case ConsumeRole::acceptance_trial: return "acceptance_trial";
  }
  return "unknown";
}

/// Largest per-task certificate of a consumed evaluation; infinity when any
/// task lacks one.
inline double max_certificate(const ConsumedEvaluation& c) {
  double worst = 0.0;
  for (const auto& cert : c.certificates) {
    if (!cert) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, *cert);
  }
  return worst;
}

inline CsvTable consumed_table(const std::vector<ConsumedEvaluation>& consumed) {
  CsvTable table{{"iteration", "role", "theta1", "theta2", "radius", "demanded_epsilon",
                  "max_certificate", "F", "accepted"},
                 {}};
  for (const auto& c : consumed) {
    table.rows.push_back({std::to_string(c.iteration), to_string(c.role), format_double(c.theta(0)),
                          format_double(c.theta(1)), format_double(c.radius),
                          format_double(c.demanded_epsilon), format_double(max_certificate(c)),
                          format_double(c.objective), c.accepted ? "1" : "0"});
  }
  return table;
}

/// Number of consumed evaluations whose certificates exceed the accuracy
/// demanded when they were consumed.
inline std::size_t accuracy_violations(const std::vector<ConsumedEvaluation>& consumed) {
  return static_cast<std::size_t>(
      std::count_if(consumed.begin(), consumed.end(),
                    [](const ConsumedEvaluation& c) { return max_certificate(c) > c.demanded_epsilon; }));
}

/// Accepted trials whose F exceeds the base F they were compared against.
inline std::size_t acceptance_violations(const std::vector<ConsumedEvaluation>& consumed) {
  std::size_t bad = 0;
  for (std::size_t i = 1; i < consumed.size(); ++i) {
    const auto& trial = consumed[i];
    const auto& base = consumed[i - 1];
    if (trial.role != ConsumeRole::acceptance_trial || !trial.accepted) continue;
    if (base.role != ConsumeRole::acceptance_base || base.iteration != trial.iteration ||
        trial.objective > base.objective) {
      ++bad;
    }
  }
  return bad;
}

/// True when the F values of trial_accepted records never increase.
inline bool accepted_objectives_nonincreasing(const RunLog& log) {
  double last = std::numeric_limits<double>::infinity();
  for (const auto& r : log.records) {
    if (r.step_type != StepType::trial_accepted) continue;
    if (r.objective > last) return false;
    last = r.objective;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Configuration

/// Dynamic accuracy or a fixed FISTA iteration count.
struct Variant {
  std::optional<std::size_t> fixed_K;

  bool dynamic() const { return !fixed_K.has_value(); }
  std::string name() const { return fixed_K ? "K" + std::to_string(*fixed_K) : "dynamic"; }
  static Variant from_name(const std::string& s) {
    if (s == "dynamic") return Variant{};
    if (s.size() > 1 && s[0] == 'K') {
      const std::size_t k = parse_size(s.substr(1));
      if (k == 0) throw ConfigError("variant K must be positive");
      return Variant{k};
    }
    throw ConfigError("unknown variant '" + s + "'");
  }
  bool operator==(const Variant&) const = default;
};

enum class Scale { desk, paper };

inline const char* to_string(Scale s) { return s == Scale::desk ? "desk" : "paper"; }

inline Scale scale_from_string(const std::string& s) {
  if (s == "desk") return Scale::desk;
  if (s == "paper") return Scale::paper;
  throw ConfigError("scale must be 'desk' or 'paper', got '" + s + "'");
}

struct ExperimentConfig {
  Scale scale = Scale::desk;
  SolverConfig solver;

  // Upper-level problem.
  double alpha1 = 1e-8;
  double alpha2 = 1.0;
  std::vector<int> digits{0, 1};

  // Data. The split seed is solver.seed.
  fs::path images;
  fs::path labels;
  SplitSpec split;

  // Experiments.
  std::vector<Variant> variants;
  std::vector<double> sweep_theta2{-3, -2, -1, 0, 1, 2, 3};
  std::size_t validate_K = 2000;
  fs::path learned_thetas;  // empty: use sweep or tune outputs in the output directory

  // bounds-compare instance.
  std::uint64_t lasso_seed = 0;
  std::size_t lasso_rows = 100;
  std::size_t lasso_cols = 200;
  Vector lasso_theta = Vector::Constant(2, 10.0);
  double lasso_spectral_sq = 1.96e4 - 10.0;  // 0 keeps the generated scale
  std::size_t bounds_iterations = 500;
  std::size_t oracle_iterations = 100000;

  SplitSpec split_spec() const {
    SplitSpec s = split;
    s.seed = solver.seed;
    return s;
  }

  void validate() const {
    solver.validate();
    if (solver.theta0.size() != 2) throw ConfigError("experiments use two hyperparameters");
    if (!(alpha1 >= 0.0) || !(alpha2 >= 0.0)) throw ConfigError("alpha1 and alpha2 must be >= 0");
    if (digits.empty()) throw ConfigError("digits must not be empty");
    for (int d : digits) {
      if (d < 0 || d > 9) throw ConfigError("digits must lie in 0..9");
    }
    if (variants.empty()) throw ConfigError("variants must not be empty");
    if (validate_K == 0) throw ConfigError("validate_K must be positive");
    if (lasso_theta.size() != 2) throw ConfigError("lasso_theta must have 2 entries");
    if (bounds_iterations == 0 || oracle_iterations == 0) {
      throw ConfigError("bounds_iterations and oracle_iterations must be positive");
    }
    if (!(lasso_spectral_sq >= 0.0)) throw ConfigError("lasso_spectral_sq must be >= 0");
  }
};

/// Desk scale: digits 0-1, N = 500, N~ = 200, 4x4 pooling, budget 40.
inline ExperimentConfig desk_preset() {
  ExperimentConfig cfg;
  cfg.scale = Scale::desk;
  cfg.solver.eval_budget = 40;
  cfg.solver.acceptance_fraction = 0.1;
  cfg.digits = {0, 1};
  cfg.split.train_size = 500;
  cfg.split.test_size = 200;
  cfg.split.validation_train_size = 500;
  cfg.split.validation_test_size = 200;
  cfg.split.downsample_factor = 4;
  cfg.variants = {Variant{}, Variant{20}, Variant{200}, Variant{2000}};
  return cfg;
}

/// Full configuration: c = 100, budget 80, delta_min = 1e-5, theta0 = [1, 1],
/// alpha1 = 1e-8, alpha2 = 1, N = 5000, N~ = 1000, digits 0-5, K in {20, 200, 2000}.
inline ExperimentConfig paper_preset() {
  ExperimentConfig cfg;
  cfg.scale = Scale::paper;
  cfg.solver.c = 100.0;
  cfg.solver.eval_budget = 80;
  cfg.solver.delta_min = 1e-5;
  cfg.solver.theta0 = Vector::Constant(2, 1.0);
  cfg.solver.acceptance_fraction = 0.1;
  cfg.alpha1 = 1e-8;
  cfg.alpha2 = 1.0;
  cfg.digits = {0, 1, 2, 3, 4, 5};
  cfg.split.train_size = 5000;
  cfg.split.test_size = 1000;
  cfg.split.validation_train_size = 5000;
  cfg.split.validation_test_size = 1000;
  cfg.split.downsample_factor = 1;
  cfg.variants = {Variant{}, Variant{20}, Variant{200}, Variant{2000}};
  return cfg;
}

inline ExperimentConfig preset(Scale s) { return s == Scale::desk ? desk_preset() : paper_preset(); }

namespace detail {

inline Vector json_vector(const Json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError("'" + key + "' must be an array of numbers");
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ConfigError("'" + key + "' must be an array of numbers");
    out(static_cast<Eigen::Index>(i)) = v[i].get<double>();
  }
  return out;
}

inline double json_number(const Json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("'" + key + "' must be a number");
  return v.get<double>();
}

inline std::size_t json_count(const Json& v, const std::string& key) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw ConfigError("'" + key + "' must be a nonnegative integer");
  }
  return v.get<std::size_t>();
}

inline bool json_bool(const Json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError("'" + key + "' must be true or false");
  return v.get<bool>();
}

inline std::string json_string(const Json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("'" + key + "' must be a string");
  return v.get<std::string>();
}

inline Json to_json(const Vector& v) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline fs::path resolve(const fs::path& p, const fs::path& base) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

}  // namespace detail

/// Apply a flat JSON object on top of `cfg`. Relative data paths resolve
/// against `base_dir`. Unknown keys are an error.
inline void apply_json(ExperimentConfig& cfg, const Json& doc, const fs::path& base_dir = {}) {
  using namespace detail;
  if (!doc.is_object()) throw ConfigError("configuration must be a JSON object");
  SolverConfig& s = cfg.solver;
  for (const auto& [key, v] : doc.items()) {
    if (key == "scale") {
      if (scale_from_string(json_string(v, key)) != cfg.scale) {
        throw ConfigError("configuration 'scale' conflicts with the selected preset");
      }
    } else if (key == "delta0") { s.delta0 = json_number(v, key);
    } else if (key == "delta_min") { s.delta_min = json_number(v, key);
    } else if (key == "delta_max") { s.params.delta_max = json_number(v, key);
    } else if (key == "eta1") { s.params.eta1 = json_number(v, key);
    } else if (key == "eta2") { s.params.eta2 = json_number(v, key);
    } else if (key == "gamma_dec") { s.params.gamma_dec = json_number(v, key);
    } else if (key == "gamma_inc") { s.params.gamma_inc = json_number(v, key);
    } else if (key == "c") { s.c = json_number(v, key);
    } else if (key == "eps_max") { s.eps_max = json_number(v, key);
    } else if (key == "eval_budget") { s.eval_budget = json_count(v, key);
    } else if (key == "mode") {
      const std::string mode = json_string(v, key);
      if (mode == "dynamic") {
        s.mode = AccuracyMode::dynamic;
      } else if (mode == "fixed") {
        s.mode = AccuracyMode::fixed;
      } else {
        throw ConfigError("'mode' must be 'dynamic' or 'fixed'");
      }
    } else if (key == "fixed_K") { s.fixed_K = json_count(v, key);
    } else if (key == "theta0") { s.theta0 = json_vector(v, key);
    } else if (key == "bounds_lo") { s.bounds_lo = json_vector(v, key);
    } else if (key == "bounds_hi") { s.bounds_hi = json_vector(v, key);
    } else if (key == "seed") { s.seed = json_count(v, key);
    } else if (key == "acceptance_fraction") { s.acceptance_fraction = json_number(v, key);
    } else if (key == "certify_fixed") { s.certify_fixed = json_bool(v, key);
    } else if (key == "audit_model") { s.audit_model = json_bool(v, key);
    } else if (key == "fista_max_iterations") { s.fista_max_iterations = json_count(v, key);
    } else if (key == "alpha1") { cfg.alpha1 = json_number(v, key);
    } else if (key == "alpha2") { cfg.alpha2 = json_number(v, key);
    } else if (key == "digits") {
      if (!v.is_array()) throw ConfigError("'digits' must be an array of integers");
      cfg.digits.clear();
      for (const auto& d : v) cfg.digits.push_back(static_cast<int>(json_count(d, key)));
    } else if (key == "images") { cfg.images = resolve(json_string(v, key), base_dir);
    } else if (key == "labels") { cfg.labels = resolve(json_string(v, key), base_dir);
    } else if (key == "train_size") { cfg.split.train_size = json_count(v, key);
    } else if (key == "test_size") { cfg.split.test_size = json_count(v, key);
    } else if (key == "validation_train_size") { cfg.split.validation_train_size = json_count(v, key);
    } else if (key == "validation_test_size") { cfg.split.validation_test_size = json_count(v, key);
    } else if (key == "downsample_factor") { cfg.split.downsample_factor = json_count(v, key);
    } else if (key == "normalize") { cfg.split.normalize = json_bool(v, key);
    } else if (key == "variants") {
      if (!v.is_array()) throw ConfigError("'variants' must be an array");
      cfg.variants.clear();
      for (const auto& item : v) {
        if (item.is_string()) {
          cfg.variants.push_back(Variant::from_name(item.get<std::string>()));
        } else {
          const std::size_t k = json_count(item, key);
          if (k == 0) throw ConfigError("variant K must be positive");
          cfg.variants.push_back(Variant{k});
        }
      }
    } else if (key == "sweep_theta2") {
      const Vector starts = json_vector(v, key);
      cfg.sweep_theta2.assign(starts.data(), starts.data() + starts.size());
    } else if (key == "validate_K") { cfg.validate_K = json_count(v, key);
    } else if (key == "learned_thetas") { cfg.learned_thetas = resolve(json_string(v, key), base_dir);
    } else if (key == "lasso_seed") { cfg.lasso_seed = json_count(v, key);
    } else if (key == "lasso_rows") { cfg.lasso_rows = json_count(v, key);
    } else if (key == "lasso_cols") { cfg.lasso_cols = json_count(v, key);
    } else if (key == "lasso_theta") { cfg.lasso_theta = json_vector(v, key);
    } else if (key == "lasso_spectral_sq") { cfg.lasso_spectral_sq = json_number(v, key);
    } else if (key == "bounds_iterations") { cfg.bounds_iterations = json_count(v, key);
    } else if (key == "oracle_iterations") { cfg.oracle_iterations = json_count(v, key);
    } else {
      throw ConfigError("unknown configuration key '" + key + "'");
    }
  }
  if (doc.contains("mode") && !doc.contains("variants")) {
    cfg.variants = {s.mode == AccuracyMode::dynamic ? Variant{} : Variant{s.fixed_K}};
  }
}

/// Parse configuration text on top of the preset for `scale`.
inline ExperimentConfig parse_config(const std::string& text, Scale scale,
                                     const fs::path& base_dir = {}) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg = preset(scale);
  apply_json(cfg, doc, base_dir);
  cfg.validate();
  return cfg;
}

/// The scale named in a configuration document, if any.
inline std::optional<Scale> scale_in(const std::string& text) {
  try {
    const Json doc = Json::parse(text);
    if (doc.is_object() && doc.contains("scale")) {
      return scale_from_string(detail::json_string(doc["scale"], "scale"));
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  return std::nullopt;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// The effective configuration as a flat JSON object (the same keys apply_json reads).
inline Json to_json(const ExperimentConfig& cfg) {
  using detail::to_json;
  const SolverConfig& s = cfg.solver;
  Json j;
  j["scale"] = to_string(cfg.scale);
  j["delta0"] = s.delta0;
  j["delta_min"] = s.delta_min;
  j["delta_max"] = s.params.delta_max;
  j["eta1"] = s.params.eta1;
  j["eta2"] = s.params.eta2;
  j["gamma_dec"] = s.params.gamma_dec;
  j["gamma_inc"] = s.params.gamma_inc;
  j["c"] = s.c;
  j["eps_max"] = s.eps_max;
  j["eval_budget"] = s.eval_budget;
  j["mode"] = s.mode == AccuracyMode::dynamic ? "dynamic" : "fixed";
  j["fixed_K"] = s.fixed_K;
  j["theta0"] = to_json(s.theta0);
  j["bounds_lo"] = to_json(s.bounds_lo);
  j["bounds_hi"] = to_json(s.bounds_hi);
  j["seed"] = s.seed;
  j["acceptance_fraction"] = s.acceptance_fraction;
  j["certify_fixed"] = s.certify_fixed;
  j["audit_model"] = s.audit_model;
  j["fista_max_iterations"] = s.fista_max_iterations;
  j["alpha1"] = cfg.alpha1;
  j["alpha2"] = cfg.alpha2;
  j["digits"] = cfg.digits;
  j["images"] = cfg.images.string();
  j["labels"] = cfg.labels.string();
  j["train_size"] = cfg.split.train_size;
  j["test_size"] = cfg.split.test_size;
  j["validation_train_size"] = cfg.split.validation_train_size;
  j["validation_test_size"] = cfg.split.validation_test_size;
  j["downsample_factor"] = cfg.split.downsample_factor;
  j["normalize"] = cfg.split.normalize;
  Json variants = Json::array();
  for (const auto& v : cfg.variants) variants.push_back(v.name());
  j["variants"] = variants;
  j["sweep_theta2"] = cfg.sweep_theta2;
  j["validate_K"] = cfg.validate_K;
  j["learned_thetas"] = cfg.learned_thetas.string();
  j["lasso_seed"] = cfg.lasso_seed;
  j["lasso_rows"] = cfg.lasso_rows;
  j["lasso_cols"] = cfg.lasso_cols;
  j["lasso_theta"] = to_json(cfg.lasso_theta);
  j["lasso_spectral_sq"] = cfg.lasso_spectral_sq;
  j["bounds_iterations"] = cfg.bounds_iterations;
  j["oracle_iterations"] = cfg.oracle_iterations;
  return j;
}

// ---------------------------------------------------------------------------
// Manifest

/// zlib CRC-32 of a file's bytes.
inline std::uint32_t file_crc32(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  uLong crc = crc32(0L, Z_NULL, 0);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto n = in.gcount();
    if (n > 0) crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

/// manifest.json: subcommand, seed, effective configuration, input file
/// checksums and the list of emitted files.
inline void write_manifest(const fs::path& out_dir, const std::string& subcommand,
                           const ExperimentConfig& cfg, const std::vector<fs::path>& inputs,
                           const std::vector<std::string>& outputs, const std::string& status) {
  Json m;
  m["subcommand"] = subcommand;
  m["status"] = status;
  m["seed"] = cfg.solver.seed;
  m["config"] = to_json(cfg);
  Json files = Json::array();
  for (const auto& p : inputs) {
    files.push_back({{"path", p.string()},
                     {"bytes", fs::file_size(p)},
                     {"crc32", fmt::format("{:08x}", file_crc32(p))}});
  }
  m["inputs"] = files;
  m["outputs"] = outputs;
  std::ofstream out(out_dir / "manifest.json");
  out << m.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Shared helpers

/// Run job(i) for i in [0, n) on up to hardware_concurrency threads. Every job
/// runs; the first exception (by index) is rethrown afterwards.
template <class Job>
void parallel_for(std::size_t n, const Job& job) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads =
      std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct MnistPool {
  RawImages images;
  RawLabels labels;
};

inline MnistPool load_pool(const ExperimentConfig& cfg) {
  if (cfg.images.empty() || cfg.labels.empty()) {
    throw ConfigError("configure 'images' and 'labels' (IDX files)");
  }
  MnistPool pool{read_idx_images(cfg.images), read_idx_labels(cfg.labels)};
  if (pool.images.count != pool.labels.values.size()) {
    throw SizeError("image and label files hold different counts");
  }
  if (cfg.split.total() > pool.images.count) {
    throw SizeError(fmt::format("split needs {} images but the pool holds {}", cfg.split.total(),
                                pool.images.count));
  }
  return pool;
}

inline ElasticNetBilevel tuning_problem(const ExperimentConfig& cfg, const MnistPool& pool) {
  std::vector<BinaryTask> tasks;
  for (int d : cfg.digits) tasks.push_back(make_binary_task(pool.images, pool.labels, d, cfg.split_spec()));
  return ElasticNetBilevel(std::move(tasks), cfg.alpha1, cfg.alpha2);
}

inline SolverConfig variant_config(const SolverConfig& base, const Variant& v) {
  SolverConfig s = base;
  s.mode = v.dynamic() ? AccuracyMode::dynamic : AccuracyMode::fixed;
  if (v.fixed_K) s.fixed_K = *v.fixed_K;
  return s;
}

/// Outcome of one solver run; `error` is set when the run failed and `log`
/// then holds the partial log.
struct VariantRun {
  Variant variant;
  Vector theta0;
  std::optional<SolverResult> result;
  RunLog log;
  std::string error;
};

inline VariantRun run_variant(const ElasticNetBilevel& upper, const SolverConfig& base,
                              const Variant& v) {
  VariantRun run{v, base.theta0, std::nullopt, {}, {}};
  try {
    run.result = run_solver(upper, variant_config(base, v));
    run.log = run.result->log;
  } catch (const SolverFailure& e) {
    run.log = e.log();
    run.error = e.what();
  }
  return run;
}

inline const char* to_string(StopReason r) { return r == StopReason::budget ? "budget" : "radius"; }

/// Write the RunLog (and, for completed runs, the consumption audit) of a run.
inline std::vector<std::string> write_run(const fs::path& dir, const std::string& prefix,
                                          const VariantRun& run) {
  fs::create_directories(dir);
  const std::string name = run.variant.name();
  std::vector<std::string> files{prefix + "runlog_" + name + ".csv"};
  write_runlog(dir / files.back(), run.log);
  if (run.result) {
    files.push_back(prefix + "consumed_" + name + ".csv");
    write_csv(dir / files.back(), consumed_table(run.result->consumed));
  }
  return files;
}

/// Rethrow the first failed run as a SolverFailure after outputs were written.
inline void throw_if_failed(const std::vector<VariantRun>& runs) {
  for (const auto& r : runs) {
    if (!r.error.empty()) {
      throw SolverFailure(r.variant.name() + " run failed: " + r.error, r.log);
    }
  }
}

inline Json sizes_json(const ExperimentConfig& cfg) {
  return {{"scale", to_string(cfg.scale)},
          {"digits", cfg.digits},
          {"train_size", cfg.split.train_size},
          {"test_size", cfg.split.test_size},
          {"validation_train_size", cfg.split.validation_train_size},
          {"validation_test_size", cfg.split.validation_test_size},
          {"downsample_factor", cfg.split.downsample_factor},
          {"eval_budget", cfg.solver.eval_budget}};
}

// ---------------------------------------------------------------------------
// bounds-compare

struct BoundsRow {
  std::size_t iter;
  double true_err_sq;
  double apriori_bound;
  double aposteriori_bound;
};

struct BoundsCompareResult {
  double mu = 0.0;
  double lipschitz = 0.0;
  double init_dist_sq = 0.0;
  double oracle_certificate = 0.0;
  std::vector<BoundsRow> rows;

  bool aposteriori_dominates() const {
    return std::all_of(rows.begin(), rows.end(),
                       [](const BoundsRow& r) { return r.true_err_sq <= r.aposteriori_bound; });
  }
  bool apriori_dominates() const {
    return std::all_of(rows.begin(), rows.end(),
                       [](const BoundsRow& r) { return r.true_err_sq <= r.apriori_bound; });
  }
};

/// Strongly convex LASSO instance: per-iteration true squared error against an oracle
/// solve, the a priori rate bound and the a posteriori certificate.
inline BoundsCompareResult bounds_compare(const ExperimentConfig& cfg) {
  LassoInstance inst = generate_lasso_instance(cfg.lasso_seed, static_cast<Eigen::Index>(cfg.lasso_rows),
                                               static_cast<Eigen::Index>(cfg.lasso_cols));
  if (cfg.lasso_spectral_sq > 0.0) rescale_to_spectral_sq(inst, cfg.lasso_spectral_sq);
  const LassoProblem problem =
      lasso_problem(inst.a, inst.b, HyperPoint::unbounded(cfg.lasso_theta));

  const LowerSolution oracle =
      fista_solve(problem, inst.w0, Termination::fixed(cfg.oracle_iterations, true));
  if (!oracle.certificate || !(*oracle.certificate <= 1e-20)) {
    throw SolverError(fmt::format("bounds-compare: oracle solve certified only {}",
                                  oracle.certificate.value_or(kUnbounded)));
  }

  BoundsCompareResult out;
  out.mu = problem.mu();
  out.lipschitz = problem.lipschitz();
  out.oracle_certificate = *oracle.certificate;
  out.init_dist_sq = (inst.w0 - oracle.w).squaredNorm();
  const double kappa = out.lipschitz / out.mu;
  Termination term = Termination::fixed(cfg.bounds_iterations, true);
  fista_solve(problem, inst.w0, term, [&](const IterationInfo& info) {
    out.rows.push_back(BoundsRow{info.iteration, (info.w - oracle.w).squaredNorm(),
                                 apriori_bound(kappa, out.init_dist_sq, info.iteration),
                                 info.certificate.value()});
  });
  return out;
}

inline BoundsCompareResult cmd_bounds_compare(const ExperimentConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const BoundsCompareResult res = bounds_compare(cfg);
  CsvTable table{{"iter", "true_err_sq", "apriori_bound", "aposteriori_bound"}, {}};
  for (const auto& r : res.rows) {
    table.rows.push_back({std::to_string(r.iter), format_double(r.true_err_sq),
                          format_double(r.apriori_bound), format_double(r.aposteriori_bound)});
  }
  write_csv(out_dir / "bounds_compare.csv", table);

  const BoundsRow& last = res.rows.back();
  Json summary{{"mu", res.mu},
               {"lipschitz", res.lipschitz},
               {"kappa", res.lipschitz / res.mu},
               {"init_dist_sq", res.init_dist_sq},
               {"oracle_iterations", cfg.oracle_iterations},
               {"oracle_certificate", res.oracle_certificate},
               {"iterations", last.iter},
               {"aposteriori_dominates_true_error", res.aposteriori_dominates()},
               {"apriori_dominates_true_error", res.apriori_dominates()},
               {"final_aposteriori_below_apriori", last.aposteriori_bound < last.apriori_bound},
               {"final_true_err_sq", last.true_err_sq},
               {"final_aposteriori_over_true", last.aposteriori_bound / last.true_err_sq},
               {"final_apriori_over_true", last.apriori_bound / last.true_err_sq},
               {"final_apriori_over_aposteriori", last.apriori_bound / last.aposteriori_bound}};
  std::ofstream(out_dir / "bounds_summary.json") << summary.dump(2) << '\n';
  write_manifest(out_dir, "bounds-compare", cfg, {},
                 {"bounds_compare.csv", "bounds_summary.json"}, "ok");
  return res;
}

// ---------------------------------------------------------------------------
// tune

inline CsvTable tune_summary_table(const std::vector<VariantRun>& runs) {
  CsvTable table{{"variant", "theta1", "theta2", "final_F", "cum_fista_iters", "eval_count",
                  "iterations", "stop_reason", "accuracy_violations", "acceptance_violations",
                  "logged_accepted_F_monotone", "max_interpolation_error"},
                 {}};
  for (const auto& r : runs) {
    if (!r.result) continue;
    const SolverResult& s = *r.result;
    table.rows.push_back({r.variant.name(), format_double(s.final_point.theta(0)),
                          format_double(s.final_point.theta(1)), format_double(s.final_objective),
                          std::to_string(s.cum_fista_iters), std::to_string(s.eval_count),
                          std::to_string(s.iterations), to_string(s.reason),
                          std::to_string(accuracy_violations(s.consumed)),
                          std::to_string(acceptance_violations(s.consumed)),
                          accepted_objectives_nonincreasing(s.log) ? "1" : "0",
                          format_double(s.max_interpolation_error)});
  }
  return table;
}

/// Dynamic accuracy and each fixed-K variant from theta0 on the configured
/// digits. Writes one RunLog per variant, the consumption audits,
/// tune_summary.csv, tune_summary.json and the manifest. Failed runs still
/// get their partial RunLog before the failure is rethrown.
inline std::vector<VariantRun> cmd_tune(const ExperimentConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const MnistPool pool = load_pool(cfg);
  const ElasticNetBilevel upper = tuning_problem(cfg, pool);

  std::vector<VariantRun> runs(cfg.variants.size());
  parallel_for(runs.size(), [&](std::size_t i) {
    runs[i] = run_variant(upper, cfg.solver, cfg.variants[i]);
  });

  std::vector<std::string> outputs;
  for (const auto& r : runs) {
    for (auto& f : write_run(out_dir, "", r)) outputs.push_back(std::move(f));
  }
  write_csv(out_dir / "tune_summary.csv", tune_summary_table(runs));
  outputs.push_back("tune_summary.csv");

  Json summary{{"sizes", sizes_json(cfg)}, {"variants", Json::array()}};
  for (const auto& r : runs) {
    Json v{{"variant", r.variant.name()}, {"status", r.error.empty() ? "ok" : r.error}};
    if (r.result) {
      v["theta"] = detail::to_json(r.result->final_point.theta);
      v["final_F"] = r.result->final_objective;
      v["cum_fista_iters"] = r.result->cum_fista_iters;
    }
    summary["variants"].push_back(v);
  }
  std::ofstream(out_dir / "tune_summary.json") << summary.dump(2) << '\n';
  outputs.push_back("tune_summary.json");

  const bool failed = std::any_of(runs.begin(), runs.end(), [](const auto& r) { return !r.error.empty(); });
  write_manifest(out_dir, "tune", cfg, {cfg.images, cfg.labels}, outputs, failed ? "failed" : "ok");
  throw_if_failed(runs);
  return runs;
}

// ---------------------------------------------------------------------------
// sweep

struct SpreadRow {
  Variant variant;
  double theta1 = 0.0;
  double theta2 = 0.0;

  double max() const { return std::max(theta1, theta2); }
};

/// max - min of the final theta coordinates over the starting points, per variant.
inline std::vector<SpreadRow> sweep_spread(const std::vector<VariantRun>& runs,
                                           const std::vector<Variant>& variants) {
  std::vector<SpreadRow> out;
  for (const auto& v : variants) {
    Vector lo = Vector::Constant(2, kUnbounded);
    Vector hi = Vector::Constant(2, -kUnbounded);
    for (const auto& r : runs) {
      if (!(r.variant == v) || !r.result) continue;
      lo = lo.cwiseMin(r.result->final_point.theta);
      hi = hi.cwiseMax(r.result->final_point.theta);
    }
    out.push_back(SpreadRow{v, hi(0) - lo(0), hi(1) - lo(1)});
  }
  return out;
}

inline std::string start_label(double theta2) { return fmt::format("{:g}", theta2); }

/// cmd_tune repeated from theta0 = [theta0_1, s] for every s in sweep_theta2,
/// parallel across (start, variant). Writes per-start RunLogs under
/// sweep/theta2_<s>/, sweep_finals.csv and sweep_spread.csv (rows theta1,
/// theta2 and max; one column per variant).
inline std::vector<VariantRun> cmd_sweep(const ExperimentConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const MnistPool pool = load_pool(cfg);
  const ElasticNetBilevel upper = tuning_problem(cfg, pool);

  std::vector<SolverConfig> starts;
  for (double s : cfg.sweep_theta2) {
    SolverConfig sc = cfg.solver;
    sc.theta0 = Vector{{cfg.solver.theta0(0), s}};
    sc.validate();
    starts.push_back(sc);
  }
  const std::size_t nv = cfg.variants.size();
  std::vector<VariantRun> runs(starts.size() * nv);
  parallel_for(runs.size(), [&](std::size_t i) {
    runs[i] = run_variant(upper, starts[i / nv], cfg.variants[i % nv]);
  });

  std::vector<std::string> outputs;
  CsvTable finals{{"variant", "theta2_start", "theta1", "theta2", "final_F", "cum_fista_iters",
                   "eval_count", "accuracy_violations"},
                  {}};
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    const std::string sub = "sweep/theta2_" + start_label(r.theta0(1)) + "/";
    for (auto& f : write_run(out_dir / sub, "", r)) outputs.push_back(sub + f);
    if (!r.result) continue;
    finals.rows.push_back({r.variant.name(), format_double(r.theta0(1)),
                           format_double(r.result->final_point.theta(0)),
                           format_double(r.result->final_point.theta(1)),
                           format_double(r.result->final_objective),
                           std::to_string(r.result->cum_fista_iters),
                           std::to_string(r.result->eval_count),
                           std::to_string(accuracy_violations(r.result->consumed))});
  }
  write_csv(out_dir / "sweep_finals.csv", finals);
  outputs.push_back("sweep_finals.csv");

  const auto spread = sweep_spread(runs, cfg.variants);
  CsvTable table{{"quantity"}, {{"theta1"}, {"theta2"}, {"max"}}};
  for (const auto& s : spread) {
    table.header.push_back(s.variant.name());
    table.rows[0].push_back(format_double(s.theta1));
    table.rows[1].push_back(format_double(s.theta2));
    table.rows[2].push_back(format_double(s.max()));
  }
  write_csv(out_dir / "sweep_spread.csv", table);
  outputs.push_back("sweep_spread.csv");

  Json summary{{"sizes", sizes_json(cfg)}, {"starts_theta2", cfg.sweep_theta2}};
  std::ofstream(out_dir / "sweep_summary.json") << summary.dump(2) << '\n';
  outputs.push_back("sweep_summary.json");

  const bool failed = std::any_of(runs.begin(), runs.end(), [](const auto& r) { return !r.error.empty(); });
  write_manifest(out_dir, "sweep", cfg, {cfg.images, cfg.labels}, outputs, failed ? "failed" : "ok");
  throw_if_failed(runs);
  return runs;
}

// ---------------------------------------------------------------------------
// validate

struct LearnedTheta {
  std::string label;
  Vector theta;
};

/// Learned hyperparameters from a tune_summary.csv (label = variant) or a
/// sweep_finals.csv (label = variant@theta2_start).
inline std::vector<LearnedTheta> read_learned_thetas(const fs::path& path) {
  const CsvTable t = read_csv(path);
  const std::size_t cv = t.column("variant");
  const std::size_t c1 = t.column("theta1");
  const std::size_t c2 = t.column("theta2");
  const bool sweep = t.has_column("theta2_start");
  std::vector<LearnedTheta> out;
  for (const auto& row : t.rows) {
    std::string label = row[cv];
    if (sweep) label += "@" + start_label(parse_double(row[t.column("theta2_start")]));
    out.push_back(LearnedTheta{label, Vector{{parse_double(row[c1]), parse_double(row[c2])}}});
  }
  if (out.empty()) throw ConfigError(path.string() + " holds no learned hyperparameters");
  return out;
}

/// The configured learned_thetas file, else sweep_finals.csv or
/// tune_summary.csv in the output directory.
inline fs::path learned_thetas_path(const ExperimentConfig& cfg, const fs::path& out_dir) {
  if (!cfg.learned_thetas.empty()) return cfg.learned_thetas;
  for (const char* name : {"sweep_finals.csv", "tune_summary.csv"}) {
    if (fs::exists(out_dir / name)) return out_dir / name;
  }
  throw ConfigError("validate: no learned hyperparameters; run tune or sweep first or set 'learned_thetas'");
}

struct ValidationEntry {
  std::string label;
  Vector theta;
  int digit;
  double accuracy;
  double majority_rate;
};

/// Share of the more frequent class among the test labels.
inline double majority_rate(const BinaryTask& task) {
  const double positive = (task.test_labels.array() == 1).cast<double>().mean();
  return std::max(positive, 1.0 - positive);
}

/// Train each validation task with K fixed FISTA iterations from w = 0 at
/// every learned theta and measure test accuracy.
inline std::vector<ValidationEntry> validate_thetas(const ExperimentConfig& cfg, const MnistPool& pool,
                                                    const std::vector<LearnedTheta>& thetas) {
  const std::vector<BinaryTask> tasks = validation_tasks(pool.images, pool.labels, cfg.split_spec());
  std::vector<double> spectral(tasks.size());
  for (std::size_t d = 0; d < tasks.size(); ++d) spectral[d] = spectral_norm_sq(tasks[d].features);
  std::vector<ValidationEntry> out(thetas.size() * tasks.size());
  parallel_for(out.size(), [&](std::size_t i) {
    const LearnedTheta& lt = thetas[i / tasks.size()];
    const std::size_t d = i % tasks.size();
    const auto problem = elastic_net_problem(tasks[d], HyperPoint::unbounded(lt.theta), spectral[d]);
    const LowerSolution sol =
        fista_solve(problem, Vector::Zero(tasks[d].dim()), Termination::fixed(cfg.validate_K));
    out[i] = ValidationEntry{lt.label, lt.theta, tasks[d].digit, test_accuracy(sol.w, tasks[d]),
                             majority_rate(tasks[d])};
  });
  return out;
}

/// Writes validation.csv (one row per theta and digit) and
/// validation_matrix.csv (digit rows, one accuracy column per theta).
inline std::vector<ValidationEntry> cmd_validate(const ExperimentConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const fs::path source = learned_thetas_path(cfg, out_dir);
  const std::vector<LearnedTheta> thetas = read_learned_thetas(source);
  const MnistPool pool = load_pool(cfg);
  const auto entries = validate_thetas(cfg, pool, thetas);

  CsvTable long_table{{"label", "theta1", "theta2", "digit", "accuracy", "majority_rate"}, {}};
  for (const auto& e : entries) {
    long_table.rows.push_back({e.label, format_double(e.theta(0)), format_double(e.theta(1)),
                               std::to_string(e.digit), format_double(e.accuracy),
                               format_double(e.majority_rate)});
  }
  write_csv(out_dir / "validation.csv", long_table);

  CsvTable matrix{{"digit", "majority_rate"}, {}};
  for (const auto& t : thetas) matrix.header.push_back(t.label);
  for (int d = 0; d < 10; ++d) {
    std::vector<std::string> row{std::to_string(d)};
    for (const auto& e : entries) {
      if (e.digit != d) continue;
      if (row.size() == 1) row.push_back(format_double(e.majority_rate));
      row.push_back(format_double(e.accuracy));
    }
    matrix.rows.push_back(std::move(row));
  }
  write_csv(out_dir / "validation_matrix.csv", matrix);
  write_manifest(out_dir, "validate", cfg, {cfg.images, cfg.labels, source},
                 {"validation.csv", "validation_matrix.csv"}, "ok");
  return entries;
}

}  // namespace bilevel
