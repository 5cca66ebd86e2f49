// Copyright 2026 The dpfair Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Config-driven experiment runner behind the `dpfair` command line tool.
// Needs nlohmann/json and OpenSSL (SHA-256) in addition to Eigen.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "dpfair/data.hpp"
#include "dpfair/errors.hpp"
#include "dpfair/mitigate.hpp"
#include "dpfair/model.hpp"
#include "dpfair/parallel.hpp"
#include "dpfair/privacy.hpp"
#include "dpfair/risk.hpp"
#include "dpfair/train.hpp"

namespace dpfair {

inline constexpr const char* kVersion = "0.1.0";

struct DatasetBlock {
  std::optional<SyntheticSpec> synthetic;
  std::optional<CsvSchema> csv;
  std::string csv_path;
  std::optional<StandardizeScope> standardize;
  std::optional<double> resample_ratio;
  std::uint64_t resample_seed = 0;
  bool project_unit_ball = false;
};

struct PrivacyBlock {
  std::optional<double> epsilon;
  double delta = 1e-5;
  std::optional<double> sigma;
  double clip_bound = 0.1;
};

enum class SweepAxis { kEpsilon, kClip, kGamma };

inline const char* to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::kEpsilon: return "epsilon";
    case SweepAxis::kClip: return "C";
    case SweepAxis::kGamma: return "gamma";
  }
  return "?";
}

struct SweepBlock {
  std::optional<SweepAxis> axis;
  std::vector<double> values;
};

struct ExperimentConfig {
  DatasetBlock dataset;
  TrainConfig train;  // model and train blocks
  PrivacyBlock privacy;
  std::optional<MitigationConfig> mitigation;
  SweepBlock sweep;
  Index mc_reps = 100;
  std::uint64_t mc_seed = 0;
  std::string output;
  std::filesystem::path base_dir;  // relative csv paths resolve here
  nlohmann::json source;           // effective config, hashed into the manifest
};

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

// Typed access to one JSON object with dotted field paths in errors.
// finish() rejects keys that were never read.
class Block {
 public:
  Block(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  Block child(const std::string& key) {
    used_.insert(key);
    if (!has(key)) throw ConfigError(field(key), "required block is missing");
    return Block(j_.at(key), field(key));
  }

  template <typename T>
  std::optional<T> optional(const std::string& key) {
    used_.insert(key);
    if (!has(key)) return std::nullopt;
    return convert<T>(j_.at(key), field(key));
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    auto v = optional<T>(key);
    return v ? *v : fallback;
  }

  template <typename T>
  T required(const std::string& key) {
    auto v = optional<T>(key);
    if (!v) throw ConfigError(field(key), "required key is missing");
    return *v;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!used_.count(item.key())) throw ConfigError(field(item.key()), "unknown key");
    }
  }

 private:
  template <typename T>
  static T convert(const nlohmann::json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where, "expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(where, "expected a number");
      return v.get<double>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < 0 &&
                                     !v.is_number_unsigned())) {
        throw ConfigError(where, "expected a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      if (!v.is_array()) throw ConfigError(where, "expected a list of strings");
      T out;
      for (const auto& e : v) out.push_back(convert<std::string>(e, where));
      return out;
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) throw ConfigError(where, "expected a list of numbers");
      T out;
      for (const auto& e : v) out.push_back(convert<double>(e, where));
      return out;
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline DecompositionMode parse_decomposition(const std::string& s, const std::string& field) {
  if (s == "off") return DecompositionMode::off();
  if (s == "full" || s == "full_batch") return DecompositionMode::full_batch();
  const std::string prefix = s.rfind("mc:", 0) == 0 ? "mc:" : (s.rfind("minibatch_mc:", 0) == 0 ? "minibatch_mc:" : "");
  if (!prefix.empty()) {
    const std::string digits = s.substr(prefix.size());
    if (!digits.empty() && std::all_of(digits.begin(), digits.end(), ::isdigit)) {
      const int m = std::stoi(digits);
      if (m >= 1) return DecompositionMode::minibatch_mc(m);
    }
  }
  if (s == "mc" || s == "minibatch_mc") return DecompositionMode::minibatch_mc(16);
  throw ConfigError(field, "expected off, full or mc:M, got '" + s + "'");
}

template <typename Fn>
auto field_guard(const std::string& field, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(field, e.what());
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j,
                                     const std::filesystem::path& base_dir = {}) {
  ExperimentConfig cfg;
  cfg.source = j;
  cfg.base_dir = base_dir;
  detail::Block root(j, "");

  // dataset
  {
    auto ds = root.child("dataset");
    const bool has_synth = ds.has("synthetic");
    const bool has_csv = ds.has("csv");
    if (has_synth == has_csv) {
      throw ConfigError("dataset", "exactly one of 'synthetic' or 'csv' must be given");
    }
    if (has_synth) {
      auto s = ds.child("synthetic");
      SyntheticSpec spec;
      spec.n_a = s.get<Index>("n_a", spec.n_a);
      spec.n_b = s.get<Index>("n_b", spec.n_b);
      spec.dim = s.get<Index>("dim", spec.dim);
      spec.norm_scale_a = s.get<double>("norm_scale_a", spec.norm_scale_a);
      spec.norm_scale_b = s.get<double>("norm_scale_b", spec.norm_scale_b);
      spec.seed = s.get<std::uint64_t>("seed", spec.seed);
      s.finish();
      if (spec.n_a < 1) throw ConfigError("dataset.synthetic.n_a", "must be >= 1");
      if (spec.n_b < 1) throw ConfigError("dataset.synthetic.n_b", "must be >= 1");
      if (spec.dim < 1) throw ConfigError("dataset.synthetic.dim", "must be >= 1");
      if (!(spec.norm_scale_a > 0.0)) throw ConfigError("dataset.synthetic.norm_scale_a", "must be > 0");
      if (!(spec.norm_scale_b > 0.0)) throw ConfigError("dataset.synthetic.norm_scale_b", "must be > 0");
      cfg.dataset.synthetic = spec;
    } else {
      ds.optional<bool>("synthetic");  // mark as read
      auto c = ds.child("csv");
      CsvSchema schema;
      cfg.dataset.csv_path = c.required<std::string>("path");
      schema.feature_cols = c.required<std::vector<std::string>>("feature_cols");
      if (schema.feature_cols.empty()) throw ConfigError("dataset.csv.feature_cols", "must not be empty");
      schema.label_col = c.required<std::string>("label_col");
      schema.group_col = c.required<std::string>("group_col");
      schema.positive_label = c.optional<std::string>("positive_label");
      schema.group_value = c.optional<std::string>("group_value");
      schema.regression = c.get<bool>("regression", false);
      c.finish();
      cfg.dataset.csv = schema;
    }
    if (!has_csv) ds.optional<bool>("csv");
    const auto scope = ds.get<std::string>("standardize", "none");
    if (scope == "global") {
      cfg.dataset.standardize = StandardizeScope::kGlobal;
    } else if (scope == "per_group") {
      cfg.dataset.standardize = StandardizeScope::kPerGroup;
    } else if (scope != "none") {
      throw ConfigError("dataset.standardize", "expected none, global or per_group");
    }
    cfg.dataset.resample_ratio = ds.optional<double>("resample_ratio");
    cfg.dataset.resample_seed = ds.get<std::uint64_t>("resample_seed", 0);
    cfg.dataset.project_unit_ball = ds.get<bool>("project_unit_ball", false);
    ds.finish();
  }

  // model
  {
    auto m = root.child("model");
    auto& t = cfg.train;
    t.family = detail::field_guard("model.family",
                                   [&] { return parse_family(m.required<std::string>("family")); });
    t.classes = m.get<Index>("classes", 2);
    t.hidden = m.get<Index>("hidden", 16);
    t.activation = detail::field_guard(
        "model.activation", [&] { return parse_activation(m.get<std::string>("activation", "tanh")); });
    t.init_scale = m.get<double>("init_scale", 0.1);
    m.finish();
    if (t.family != Family::kLinearL2 && t.classes < 2) {
      throw ConfigError("model.classes", "classifiers need >= 2 classes");
    }
    if (t.family == Family::kMlp1 && t.hidden < 1) throw ConfigError("model.hidden", "must be >= 1");
  }

  // train
  {
    auto tr = root.child("train");
    auto& t = cfg.train;
    const auto mech = tr.get<std::string>("mechanism", "dpsgd");
    if (mech == "dpsgd") {
      t.mechanism = Mechanism::kDpSgd;
    } else if (mech == "sgd") {
      t.mechanism = Mechanism::kSgd;
    } else if (mech == "output_perturbation") {
      t.mechanism = Mechanism::kOutputPerturbation;
    } else {
      throw ConfigError("train.mechanism", "expected sgd, dpsgd or output_perturbation");
    }
    t.learning_rate = tr.get<double>("learning_rate", 1e-4);
    t.iterations = tr.get<Index>("iterations", 100);
    const auto scheme = tr.get<std::string>("batch_scheme", "poisson");
    if (scheme == "poisson") {
      t.batch_scheme = BatchScheme::kPoisson;
    } else if (scheme == "fixed") {
      t.batch_scheme = BatchScheme::kFixed;
    } else {
      throw ConfigError("train.batch_scheme", "expected poisson or fixed");
    }
    t.q = tr.get<double>("q", 0.01);
    t.batch_size = tr.get<Index>("batch_size", 32);
    t.lambda = tr.get<double>("lambda", 1.0);
    t.decomposition = detail::parse_decomposition(tr.get<std::string>("decomposition", "off"),
                                                  "train.decomposition");
    t.trace_every = tr.get<Index>("trace_every", 1);
    tr.finish();
    if (!(t.learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be > 0");
    if (t.iterations < 1) throw ConfigError("train.iterations", "must be >= 1");
    if (!(t.q >= 0.0 && t.q <= 1.0)) throw ConfigError("train.q", "must lie in [0, 1]");
    if (t.batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
    if (t.trace_every < 1) throw ConfigError("train.trace_every", "must be >= 1");
    if (t.mechanism == Mechanism::kOutputPerturbation) {
      if (!(t.lambda > 0.0)) throw ConfigError("train.lambda", "output perturbation needs lambda > 0");
      if (t.family == Family::kMlp1) {
        throw ConfigError("model.family", "output perturbation needs a convex family");
      }
      if (t.decomposition.enabled()) {
        throw ConfigError("train.decomposition", "only available for sgd and dpsgd");
      }
    }
  }

  // privacy
  if (root.has("privacy")) {
    auto p = root.child("privacy");
    cfg.privacy.epsilon = p.optional<double>("epsilon");
    cfg.privacy.delta = p.get<double>("delta", 1e-5);
    cfg.privacy.sigma = p.optional<double>("sigma");
    cfg.privacy.clip_bound = p.get<double>("clip_bound", 0.1);
    p.finish();
  } else {
    root.optional<bool>("privacy");
  }
  {
    const auto& pr = cfg.privacy;
    if (!(pr.delta > 0.0 && pr.delta < 1.0)) throw ConfigError("privacy.delta", "must lie in (0, 1)");
    if (pr.epsilon && !(*pr.epsilon > 0.0)) throw ConfigError("privacy.epsilon", "must be > 0");
    if (pr.sigma && !(*pr.sigma >= 0.0)) throw ConfigError("privacy.sigma", "must be >= 0");
    if (!(pr.clip_bound > 0.0)) throw ConfigError("privacy.clip_bound", "must be > 0");
    // An epsilon sweep supplies epsilon per point.
    const bool epsilon_swept = j.contains("sweep") && j["sweep"].is_object() &&
                               j["sweep"].value("axis", "") == "epsilon";
    if (cfg.train.mechanism != Mechanism::kSgd && !pr.epsilon && !pr.sigma && !epsilon_swept) {
      throw ConfigError("privacy", "one of epsilon or sigma must be set");
    }
  }

  // mitigation
  if (root.has("mitigation")) {
    auto mb = root.child("mitigation");
    MitigationConfig mc;
    mc.gamma1 = mb.get<double>("gamma1", mc.gamma1);
    mc.gamma2 = mb.get<double>("gamma2", mc.gamma2);
    mc.surrogate = parse_surrogate(mb.get<std::string>("surrogate", "boundary_score"));
    mb.finish();
    mc.validate();
    if (cfg.train.mechanism == Mechanism::kOutputPerturbation) {
      throw ConfigError("mitigation", "applies to sgd and dpsgd only");
    }
    if (mc.surrogate == Surrogate::kBoundaryScore && cfg.train.family == Family::kLinearL2) {
      throw ConfigError("mitigation.surrogate", "boundary_score needs a classifier family");
    }
    cfg.mitigation = mc;
  } else {
    root.optional<bool>("mitigation");
  }

  // sweep
  if (root.has("sweep")) {
    auto s = root.child("sweep");
    const auto axis = s.required<std::string>("axis");
    if (axis == "epsilon") {
      cfg.sweep.axis = SweepAxis::kEpsilon;
    } else if (axis == "C" || axis == "clip_bound") {
      cfg.sweep.axis = SweepAxis::kClip;
    } else if (axis == "gamma") {
      cfg.sweep.axis = SweepAxis::kGamma;
    } else {
      throw ConfigError("sweep.axis", "expected epsilon, C or gamma");
    }
    cfg.sweep.values = s.required<std::vector<double>>("values");
    s.finish();
    if (cfg.sweep.values.empty()) throw ConfigError("sweep.values", "must not be empty");
    for (double v : cfg.sweep.values) {
      const bool ok = cfg.sweep.axis == SweepAxis::kGamma ? v >= 0.0 : v > 0.0;
      if (!ok) throw ConfigError("sweep.values", "value out of range for the axis");
    }
    if (cfg.sweep.axis == SweepAxis::kGamma && cfg.train.family == Family::kLinearL2 &&
        !(cfg.mitigation && cfg.mitigation->surrogate == Surrogate::kTrace)) {
      throw ConfigError("sweep.axis", "gamma sweep on linear_l2 needs the trace surrogate");
    }
  } else {
    root.optional<bool>("sweep");
  }

  // mc
  if (root.has("mc")) {
    auto mcb = root.child("mc");
    cfg.mc_reps = mcb.get<Index>("reps", cfg.mc_reps);
    cfg.mc_seed = mcb.get<std::uint64_t>("seed", cfg.mc_seed);
    mcb.finish();
  } else {
    root.optional<bool>("mc");
  }
  if (cfg.mc_reps < 1) throw ConfigError("mc.reps", "must be >= 1");
  cfg.train.seed = cfg.mc_seed;
  cfg.train.clip_bound = cfg.privacy.clip_bound;
  cfg.train.delta = cfg.privacy.delta;

  cfg.output = root.get<std::string>("output", "");
  root.finish();
  return cfg;
}

inline nlohmann::json read_config_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Hashing and formatting

inline std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

inline std::string config_hash(const nlohmann::json& config) { return sha256_hex(config.dump()); }

inline std::string dataset_hash(const GroupedDataset& ds) {
  std::string buf;
  auto put = [&buf](const void* p, std::size_t n) {
    buf.append(static_cast<const char*>(p), n);
  };
  const std::uint64_t n = ds.size();
  const std::uint64_t d = ds.dim();
  put(&n, sizeof n);
  put(&d, sizeof d);
  for (Index i = 0; i < ds.size(); ++i) {
    for (Index j = 0; j < ds.dim(); ++j) {
      const double v = ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      put(&v, sizeof v);
    }
  }
  put(ds.labels.data(), sizeof(double) * ds.size());
  put(ds.groups.data(), sizeof(int) * ds.groups.size());
  for (const auto& name : ds.group_names) buf += name + '\n';
  return sha256_hex(buf);
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// ---------------------------------------------------------------------------
// Single run

inline GroupedDataset build_dataset(const ExperimentConfig& cfg) {
  const auto& b = cfg.dataset;
  GroupedDataset ds;
  if (b.synthetic) {
    ds = synth_two_group(*b.synthetic);
  } else {
    CsvSchema schema = *b.csv;
    if (cfg.train.family == Family::kLinearL2 && !schema.positive_label) schema.regression = true;
    std::filesystem::path path = b.csv_path;
    if (path.is_relative() && !cfg.base_dir.empty()) path = cfg.base_dir / path;
    ds = load_csv(path.string(), schema);
  }
  if (b.resample_ratio) ds = resample_ratio(ds, *b.resample_ratio, b.resample_seed);
  if (b.standardize) ds = standardize(std::move(ds), *b.standardize);
  if (b.project_unit_ball) ds = project_unit_ball(std::move(ds));
  if (cfg.train.family != Family::kLinearL2 &&
      static_cast<Index>(std::max(ds.num_classes, 0)) > cfg.train.classes) {
    throw ConfigError("model.classes", "dataset has " + std::to_string(ds.num_classes) +
                                           " classes, model has " +
                                           std::to_string(cfg.train.classes));
  }
  return ds;
}

struct GroupMetrics {
  std::string group;
  double fraction = 1.0;
  double input_norm_mean = 0.0;
  double grad_norm = 0.0;              // ||g_{D_a}||
  double mean_sample_grad_norm = 0.0;  // mean_i ||g_i||
  double trace = 0.0;
  double boundary_mean = std::numeric_limits<double>::quiet_NaN();
};

inline GroupMetrics group_metrics(const Model& m, const GroupedDataset& ds,
                                  const IndexList& rows, std::string name) {
  GroupMetrics g;
  g.group = std::move(name);
  g.fraction = static_cast<double>(rows.size()) / static_cast<double>(ds.size());
  const auto grads = per_sample_grad(m, ds, rows);
  g.grad_norm = grads.mean().norm();
  const auto norms = grads.norms();
  g.mean_sample_grad_norm = norms.mean();
  for (Index i : rows) g.input_norm_mean += ds.features.row(static_cast<Eigen::Index>(i)).norm();
  g.input_norm_mean /= static_cast<double>(rows.size());
  g.trace = hessian_trace(m, ds, rows);
  if (m.is_classifier()) g.boundary_mean = boundary_score(m, ds, rows).mean;
  return g;
}

struct DecompositionRecord {
  DecompositionRow row;
  double eps_so_far = 0.0;
  std::optional<double> penalty_total;
  double penalty_clip = 0.0;
  double penalty_noise = 0.0;
};

struct RunOutcome {
  RiskReport risk;
  std::vector<GroupMetrics> metrics;  // population first, at the rep-0 private model
  double sigma = 0.0;
  double epsilon_spent = 0.0;
  std::string dataset_hash;
  std::string config_hash;
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline std::string risk_csv(const RiskReport& r) {
  std::ostringstream out;
  out << kRiskCsvHeader << '\n';
  auto line = [&](const GroupRisk& g) {
    out << csv_field(g.name) << ',' << fmt(g.risk) << ',' << fmt(g.xi) << ',' << g.mc_runs << ','
        << fmt(g.mc_std_error) << '\n';
  };
  line(r.population);
  for (const auto& g : r.groups) line(g);
  return out.str();
}

inline std::string accountant_csv(const std::vector<AccountantRow>& rows) {
  std::ostringstream out;
  out << kAccountantCsvHeader << '\n';
  for (const auto& r : rows) {
    out << r.step << ',' << fmt(r.q) << ',' << fmt(r.sigma) << ',' << r.alpha_star << ','
        << fmt(r.epsilon) << ',' << fmt(r.delta) << '\n';
  }
  return out.str();
}

inline std::string trace_csv(const std::vector<TraceRecord>& rows) {
  std::ostringstream out;
  out << kTraceCsvHeader << '\n';
  for (const auto& r : rows) {
    if (std::isnan(r.loss_population)) continue;  // iterations between trace points
    out << r.iter << ',' << r.batch_size << ',' << fmt(r.loss_population) << ','
        << fmt(r.epsilon_so_far) << '\n';
  }
  return out.str();
}

inline std::string decomposition_csv(const std::vector<DecompositionRecord>& rows,
                                     bool with_penalty) {
  std::ostringstream out;
  out << kDecompositionCsvHeader;
  if (with_penalty) out << ",penalty_total,penalty_clip_part,penalty_noise_part";
  out << '\n';
  for (const auto& rec : rows) {
    const auto& r = rec.row;
    if (r.skipped) continue;
    out << r.iter << ',' << csv_field(r.group_name) << ',' << fmt(r.nonprivate) << ','
        << fmt(r.clip) << ',' << fmt(r.noise) << ',' << fmt(r.g_norm_group) << ','
        << fmt(r.g_norm_pop) << ',' << fmt(r.trace) << ',' << fmt(r.boundary_mean) << ','
        << fmt(rec.eps_so_far);
    if (with_penalty) {
      out << ',' << fmt(rec.penalty_total.value_or(0.0)) << ',' << fmt(rec.penalty_clip) << ','
          << fmt(rec.penalty_noise);
    }
    out << '\n';
  }
  return out.str();
}

inline nlohmann::json metrics_json(const std::vector<GroupMetrics>& metrics) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& g : metrics) {
    nlohmann::json o;
    o["group"] = g.group;
    o["fraction"] = g.fraction;
    o["input_norm_mean"] = g.input_norm_mean;
    o["grad_norm"] = g.grad_norm;
    o["mean_sample_grad_norm"] = g.mean_sample_grad_norm;
    o["trace"] = g.trace;
    o["boundary_mean"] = std::isnan(g.boundary_mean) ? nlohmann::json() : nlohmann::json(g.boundary_mean);
    arr.push_back(o);
  }
  return arr;
}

}  // namespace detail

// Executes one experiment and writes manifest.json, risk.csv,
// accountant.csv, trace.csv and (when enabled) decomposition.csv into
// cfg.output. `jobs` bounds the Monte-Carlo worker pool.
inline RunOutcome run_experiment(const ExperimentConfig& cfg, unsigned jobs = 1) {
  namespace fs = std::filesystem;
  if (cfg.output.empty()) throw ConfigError("output", "no output directory given");
  const GroupedDataset ds = build_dataset(cfg);
  RunOutcome outcome;
  outcome.dataset_hash = dataset_hash(ds);
  outcome.config_hash = config_hash(cfg.source);

  const TrainConfig& tc = cfg.train;
  const std::uint64_t seed = cfg.mc_seed;
  std::vector<AccountantRow> accountant_log;
  std::vector<TraceRecord> trace;
  std::vector<DecompositionRecord> decomposition;
  std::vector<std::string> notes;
  Model reference;
  Model first;

  if (tc.mechanism == Mechanism::kOutputPerturbation) {
    OutputPerturbation mech(ds, tc.family, tc.family == Family::kLinearL2 ? 1 : tc.classes,
                            tc.lambda, cfg.privacy.epsilon.value_or(1.0), cfg.privacy.delta,
                            cfg.privacy.sigma);
    outcome.sigma = mech.sigma();
    reference = mech.optimum();
    first = mech.sample(seed);
    outcome.epsilon_spent = std::numeric_limits<double>::infinity();
    if (mech.sigma() > 0.0) {
      RdpAccountant acct(1.0, mech.sigma(), cfg.privacy.delta);
      acct.step();
      accountant_log.push_back(acct.row());
      outcome.epsilon_spent = acct.spent().epsilon;
    }
    TraceRecord rec;
    rec.batch_size = ds.size();
    rec.loss_population = loss_mean(reference, ds);
    rec.epsilon_so_far = outcome.epsilon_spent;
    trace.push_back(rec);
    if (!cfg.dataset.project_unit_ball) {
      notes.push_back("inputs not projected to the unit ball; sigma acts as an experimental knob");
    }
    outcome.risk = excessive_risk_mc(
        ds, reference, [&](std::uint64_t s) { return mech.sample(s); }, cfg.mc_reps, seed, jobs);
  } else {
    TrainConfig priv = tc;
    const bool is_private = tc.mechanism == Mechanism::kDpSgd;
    if (is_private) {
      priv.sigma = cfg.privacy.sigma
                       ? *cfg.privacy.sigma
                       : sigma_for_epsilon(tc.sampling_probability(ds.size()), tc.iterations,
                                           cfg.privacy.delta, *cfg.privacy.epsilon);
    } else {
      priv.sigma = 0.0;
    }
    outcome.sigma = priv.sigma;
    if (is_private && tc.batch_scheme == BatchScheme::kFixed) {
      notes.push_back("fixed batch scheme: accountant uses q = batch_size / n");
    }
    TrainConfig ref_cfg = priv;
    ref_cfg.mechanism = Mechanism::kSgd;
    reference = train(ref_cfg, ds).model;

    TrainOptions options;
    const bool mitigate = cfg.mitigation && cfg.mitigation->active();
    if (mitigate) {
      options.extra_gradient = penalty_extra_gradient(ds, cfg.privacy.clip_bound, *cfg.mitigation);
      notes.push_back(
          "mitigation penalty gradient is computed on the full data without clipping or noise; "
          "the reported epsilon covers the data gradient only");
    }
    TrainOptions first_options = options;
    Rng decomposition_rng(seed ^ 0xdec0de5eedULL);
    if (tc.decomposition.enabled()) {
      DecompositionParams params;
      params.eta = tc.learning_rate;
      params.clip_bound = is_private ? cfg.privacy.clip_bound : 1e100;
      params.sigma = priv.sigma;
      params.mode = tc.decomposition;
      params.scheme = tc.batch_scheme;
      params.q = tc.q;
      params.batch_size = tc.batch_size;
      first_options.on_step = [&, params](Index t, const Model& current, const IndexList&) {
        if (t % tc.trace_every != 0) return;
        auto rows = decompose_step(current, ds, params, decomposition_rng);
        std::optional<PenaltyValue> pen;
        if (mitigate) pen = penalty_value(current, ds, cfg.privacy.clip_bound, *cfg.mitigation);
        for (auto& r : rows) {
          DecompositionRecord rec;
          r.iter = t;
          rec.row = r;
          if (pen) {
            const auto a = static_cast<std::size_t>(r.group);
            rec.penalty_clip = pen->group_clip[a];
            rec.penalty_noise = pen->group_noise[a];
            rec.penalty_total = rec.penalty_clip + rec.penalty_noise;
          }
          decomposition.push_back(rec);
        }
      };
    }
    TrainResult run0 = train(priv, ds, first_options);
    first = run0.model;
    accountant_log = run0.accountant_log;
    trace = run0.trace.records;
    for (auto& rec : decomposition) {
      rec.eps_so_far = rec.row.iter == 0 ? 0.0 : trace[rec.row.iter - 1].epsilon_so_far;
    }
    outcome.epsilon_spent = accountant_log.empty()
                                ? (is_private ? std::numeric_limits<double>::infinity() : 0.0)
                                : accountant_log.back().epsilon;
    outcome.risk = excessive_risk_mc(
        ds, reference,
        [&](std::uint64_t s) {
          if (s == seed) return first;
          TrainConfig rep = priv;
          rep.seed = s;
          return train(rep, ds, options).model;
        },
        cfg.mc_reps, seed, jobs);
  }

  outcome.metrics.push_back(group_metrics(first, ds, ds.all_indices(), "population"));
  for (int g = 0; g < ds.num_groups(); ++g) {
    outcome.metrics.push_back(
        group_metrics(first, ds, ds.group_indices(g), ds.group_names[static_cast<std::size_t>(g)]));
  }

  const fs::path dir = cfg.output;
  fs::create_directories(dir);
  detail::write_text(dir / "risk.csv", detail::risk_csv(outcome.risk));
  detail::write_text(dir / "accountant.csv", detail::accountant_csv(accountant_log));
  detail::write_text(dir / "trace.csv", detail::trace_csv(trace));
  if (tc.decomposition.enabled()) {
    detail::write_text(dir / "decomposition.csv",
                       detail::decomposition_csv(
                           decomposition, cfg.mitigation && cfg.mitigation->active()));
  }

  nlohmann::json manifest;
  manifest["version"] = kVersion;
  manifest["config"] = cfg.source;
  manifest["config_hash"] = outcome.config_hash;
  manifest["dataset_hash"] = outcome.dataset_hash;
  manifest["seed"] = seed;
  nlohmann::json groups = nlohmann::json::array();
  for (int g = 0; g < ds.num_groups(); ++g) {
    groups.push_back({{"name", ds.group_names[static_cast<std::size_t>(g)]},
                      {"size", ds.group_indices(g).size()}});
  }
  manifest["dataset"] = {{"n", ds.size()}, {"d", ds.dim()}, {"groups", groups}};
  nlohmann::json summary;
  summary["mechanism"] = tc.mechanism == Mechanism::kOutputPerturbation
                             ? "output_perturbation"
                             : (tc.mechanism == Mechanism::kDpSgd ? "dpsgd" : "sgd");
  summary["epsilon_target"] =
      cfg.privacy.epsilon ? nlohmann::json(*cfg.privacy.epsilon) : nlohmann::json();
  summary["epsilon_spent"] =
      std::isfinite(outcome.epsilon_spent) ? nlohmann::json(outcome.epsilon_spent) : nlohmann::json();
  summary["delta"] = cfg.privacy.delta;
  summary["sigma"] = outcome.sigma;
  summary["clip_bound"] = cfg.privacy.clip_bound;
  summary["gamma1"] = cfg.mitigation ? cfg.mitigation->gamma1 : 0.0;
  summary["gamma2"] = cfg.mitigation ? cfg.mitigation->gamma2 : 0.0;
  summary["max_xi"] = outcome.risk.max_xi();
  summary["mc_runs"] = outcome.risk.population.mc_runs;
  summary["excluded_runs"] = outcome.risk.excluded_runs;
  summary["std_error_defined"] = outcome.risk.population.std_error_defined;
  manifest["summary"] = summary;
  manifest["group_metrics"] = detail::metrics_json(outcome.metrics);
  manifest["notes"] = notes;
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return outcome;
}

// Recomputes the config hash from the stored config copy.
inline bool manifest_consistent(const nlohmann::json& manifest) {
  return manifest.contains("config") && manifest.contains("config_hash") &&
         config_hash(manifest.at("config")) == manifest.at("config_hash").get<std::string>();
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepPointResult {
  Index point = 0;
  double value = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string message;
  RunOutcome outcome;
};

struct SweepOutcome {
  std::vector<SweepPointResult> points;
  Index succeeded() const {
    return static_cast<Index>(std::count_if(points.begin(), points.end(),
                                            [](const auto& p) { return p.ok; }));
  }
};

inline constexpr const char* kSweepCsvHeader = "point,axis,axis_value,seed,group,metric,value";

// Config for sweep point i: the axis value substituted, seed = base + i,
// output in <output>/point_<i>, no sweep block.
inline nlohmann::json sweep_point_config(const ExperimentConfig& cfg, Index i) {
  nlohmann::json j = cfg.source;
  j.erase("sweep");
  const double v = cfg.sweep.values.at(i);
  switch (*cfg.sweep.axis) {
    case SweepAxis::kEpsilon:
      j["privacy"]["epsilon"] = v;
      j["privacy"].erase("sigma");
      break;
    case SweepAxis::kClip:
      j["privacy"]["clip_bound"] = v;
      break;
    case SweepAxis::kGamma:
      j["mitigation"]["gamma1"] = v;
      j["mitigation"]["gamma2"] = v;
      break;
  }
  j["mc"]["seed"] = cfg.mc_seed + i;
  j["output"] = (std::filesystem::path(cfg.output) / ("point_" + std::to_string(i))).string();
  return j;
}

inline SweepOutcome run_sweep(const ExperimentConfig& cfg, unsigned jobs = 1) {
  namespace fs = std::filesystem;
  if (!cfg.sweep.axis) throw ConfigError("sweep", "config has no sweep block");
  if (cfg.output.empty()) throw ConfigError("output", "no output directory given");
  SweepOutcome result;
  result.points.resize(cfg.sweep.values.size());
  parallel_for(cfg.sweep.values.size(), jobs, [&](std::size_t i) {
    auto& p = result.points[i];
    p.point = i;
    p.value = cfg.sweep.values[i];
    p.seed = cfg.mc_seed + i;
    try {
      const auto point = parse_config(sweep_point_config(cfg, i), cfg.base_dir);
      p.outcome = run_experiment(point, 1);
      p.ok = true;
    } catch (const std::exception& e) {
      p.message = e.what();
    }
  });

  std::ostringstream table;
  table << kSweepCsvHeader << '\n';
  std::ostringstream status;
  status << "point,axis_value,seed,status,message\n";
  const std::string axis = to_string(*cfg.sweep.axis);
  for (const auto& p : result.points) {
    status << p.point << ',' << fmt(p.value) << ',' << p.seed << ',' << (p.ok ? "ok" : "failed")
           << ',' << csv_field(p.message) << '\n';
    if (!p.ok) continue;
    auto emit = [&](const std::string& group, const char* metric, double v) {
      table << p.point << ',' << axis << ',' << fmt(p.value) << ',' << p.seed << ','
            << csv_field(group) << ',' << metric << ',' << fmt(v) << '\n';
    };
    const auto& r = p.outcome.risk;
    emit("population", "sigma", p.outcome.sigma);
    emit("population", "epsilon_spent", p.outcome.epsilon_spent);
    emit("population", "max_xi", r.max_xi());
    std::vector<const GroupRisk*> rows{&r.population};
    for (const auto& g : r.groups) rows.push_back(&g);
    for (const GroupRisk* g : rows) {
      emit(g->name, "R", g->risk);
      emit(g->name, "xi", g->xi);
      emit(g->name, "stderr", g->mc_std_error);
      emit(g->name, "loss_private_mean", g->loss_private_mean);
      emit(g->name, "loss_nonprivate", g->loss_nonprivate);
    }
    for (const auto& m : p.outcome.metrics) {
      emit(m.group, "grad_norm", m.grad_norm);
      emit(m.group, "mean_sample_grad_norm", m.mean_sample_grad_norm);
      emit(m.group, "input_norm_mean", m.input_norm_mean);
      emit(m.group, "trace", m.trace);
      emit(m.group, "boundary_mean", m.boundary_mean);
    }
  }
  fs::create_directories(cfg.output);
  detail::write_text(fs::path(cfg.output) / "sweep.csv", table.str());
  detail::write_text(fs::path(cfg.output) / "sweep_status.csv", status.str());
  return result;
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRun {
  std::string run_id;
  std::filesystem::path dir;
  nlohmann::json manifest;
};

// Each argument is a run directory (holding manifest.json) or a sweep
// directory whose point_* subdirectories hold manifests.
inline std::vector<ReportRun> collect_runs(const std::vector<std::string>& dirs) {
  namespace fs = std::filesystem;
  if (dirs.empty()) throw ConfigError("report", "no run directories given");
  std::vector<ReportRun> runs;
  auto load = [&](const fs::path& dir, const std::string& id) {
    std::ifstream in(dir / "manifest.json");
    ReportRun r{id, dir, {}};
    try {
      r.manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("report", "unreadable manifest in '" + dir.string() + "': " + e.what());
    }
    if (!manifest_consistent(r.manifest)) {
      throw ConfigError("report", "config hash mismatch in '" + dir.string() + "'");
    }
    runs.push_back(std::move(r));
  };
  for (const auto& d : dirs) {
    const fs::path dir(d);
    if (fs::exists(dir / "manifest.json")) {
      load(dir, d);
      continue;
    }
    std::vector<fs::path> subs;
    if (fs::is_directory(dir)) {
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory() && fs::exists(e.path() / "manifest.json")) subs.push_back(e.path());
      }
    }
    if (subs.empty()) throw ConfigError("report", "no manifest found under '" + d + "'");
    std::sort(subs.begin(), subs.end());
    for (const auto& s : subs) load(s, (fs::path(d) / s.filename()).string());
  }
  const auto& hash = runs.front().manifest.at("dataset_hash");
  for (const auto& r : runs) {
    if (r.manifest.at("dataset_hash") != hash) {
      throw ConfigError("report", "dataset hash of '" + r.run_id + "' differs from '" +
                                      runs.front().run_id + "'");
    }
  }
  return runs;
}

inline constexpr const char* kReportRiskHeader =
    "run_id,mechanism,epsilon_target,epsilon_spent,sigma,clip_bound,gamma1,gamma2,group,R,xi,"
    "mc_runs,stderr";
inline constexpr const char* kReportMetricsHeader = "run_id,group,metric,value";
inline constexpr const char* kReportDecompositionHeader = "run_id,iter,group,metric,value";
inline constexpr const char* kReportTraceHeader =
    "run_id,iter,batch_size,loss_population,epsilon_so_far";

namespace detail {

inline std::vector<std::vector<std::string>> read_csv_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_csv_records(buffer.str());
}

inline std::string json_cell(const nlohmann::json& v) {
  if (v.is_null()) return "nan";
  if (v.is_number()) return fmt(v.get<double>());
  return csv_field(v.is_string() ? v.get<std::string>() : v.dump());
}

}  // namespace detail

// Joins runs into long-format tables: report_risk.csv,
// report_group_metrics.csv, report_decomposition.csv, report_trace.csv.
inline void write_report(const std::vector<std::string>& dirs, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const auto runs = collect_runs(dirs);
  std::ostringstream risk, metrics, decomposition, trace;
  risk << kReportRiskHeader << '\n';
  metrics << kReportMetricsHeader << '\n';
  decomposition << kReportDecompositionHeader << '\n';
  trace << kReportTraceHeader << '\n';
  for (const auto& run : runs) {
    const auto id = csv_field(run.run_id);
    const auto& s = run.manifest.at("summary");
    const std::string prefix = id + ',' + detail::json_cell(s.at("mechanism")) + ',' +
                               detail::json_cell(s.at("epsilon_target")) + ',' +
                               detail::json_cell(s.at("epsilon_spent")) + ',' +
                               detail::json_cell(s.at("sigma")) + ',' +
                               detail::json_cell(s.at("clip_bound")) + ',' +
                               detail::json_cell(s.at("gamma1")) + ',' +
                               detail::json_cell(s.at("gamma2"));
    auto rows = detail::read_csv_file(run.dir / "risk.csv");
    for (std::size_t r = 1; r < rows.size(); ++r) {
      risk << prefix;
      for (const auto& cell : rows[r]) risk << ',' << csv_field(cell);
      risk << '\n';
    }
    for (const auto& g : run.manifest.at("group_metrics")) {
      for (const auto& item : g.items()) {
        if (item.key() == "group") continue;
        metrics << id << ',' << csv_field(g.at("group").get<std::string>()) << ',' << item.key()
                << ',' << detail::json_cell(item.value()) << '\n';
      }
    }
    rows = detail::read_csv_file(run.dir / "decomposition.csv");
    for (std::size_t r = 1; r < rows.size(); ++r) {
      for (std::size_t c = 2; c < rows[r].size() && c < rows[0].size(); ++c) {
        decomposition << id << ',' << rows[r][0] << ',' << csv_field(rows[r][1]) << ','
                      << rows[0][c] << ',' << rows[r][c] << '\n';
      }
    }
    rows = detail::read_csv_file(run.dir / "trace.csv");
    for (std::size_t r = 1; r < rows.size(); ++r) {
      trace << id;
      for (const auto& cell : rows[r]) trace << ',' << cell;
      trace << '\n';
    }
  }
  fs::create_directories(out_dir);
  detail::write_text(fs::path(out_dir) / "report_risk.csv", risk.str());
  detail::write_text(fs::path(out_dir) / "report_group_metrics.csv", metrics.str());
  detail::write_text(fs::path(out_dir) / "report_decomposition.csv", decomposition.str());
  detail::write_text(fs::path(out_dir) / "report_trace.csv", trace.str());
}

}  // namespace dpfair
