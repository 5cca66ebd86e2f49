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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "dpfair/errors.hpp"

namespace dpfair {

using Index = std::size_t;
using IndexList = std::vector<Index>;
using Rng = std::mt19937_64;

// The sample space (X, A, Y): one row per individual. `labels` holds class ids
// in [0, num_classes) for classifiers, or real targets when num_classes == 0.
struct GroupedDataset {
  Eigen::MatrixXd features;
  Eigen::VectorXd labels;
  std::vector<int> groups;
  std::vector<std::string> group_names;
  std::vector<std::string> label_names;
  int num_classes = 2;

  Index size() const { return static_cast<Index>(features.rows()); }
  Index dim() const { return static_cast<Index>(features.cols()); }
  int num_groups() const { return static_cast<int>(group_names.size()); }

  IndexList all_indices() const {
    IndexList idx(size());
    std::iota(idx.begin(), idx.end(), Index{0});
    return idx;
  }

  IndexList group_indices(int group) const {
    IndexList idx;
    for (Index i = 0; i < size(); ++i) {
      if (groups[i] == group) idx.push_back(i);
    }
    return idx;
  }

  // p_a = |D_a| / |D|
  double group_fraction(int group) const {
    return static_cast<double>(group_indices(group).size()) /
           static_cast<double>(size());
  }

  void validate() const {
    const auto n = features.rows();
    if (n < 1) throw DomainError("dataset is empty");
    if (labels.size() != n || static_cast<Eigen::Index>(groups.size()) != n) {
      throw ShapeError("features, labels and groups must have equal length");
    }
    std::vector<bool> seen(group_names.size(), false);
    for (int g : groups) {
      if (g < 0 || g >= num_groups()) {
        throw DomainError("group id " + std::to_string(g) + " out of range");
      }
      seen[static_cast<std::size_t>(g)] = true;
    }
    for (std::size_t g = 0; g < seen.size(); ++g) {
      if (!seen[g]) {
        throw DomainError("group '" + group_names[g] + "' has no samples");
      }
    }
    if (num_classes > 0) {
      for (Eigen::Index i = 0; i < n; ++i) {
        const double y = labels[i];
        if (y < 0 || y >= num_classes || y != std::floor(y)) {
          throw DomainError("label at row " + std::to_string(i) +
                            " is not a class id");
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvSchema {
  std::vector<std::string> feature_cols;
  std::string label_col;
  std::string group_col;
  // When set, the label is binarized: rows equal to this value are class 1.
  std::optional<std::string> positive_label;
  // When set, groups are binarized: this value is group 0, everything else is
  // group 1 named "Non-<value>".
  std::optional<std::string> group_value;
  // Labels are parsed as real targets (linear_l2) instead of class ids.
  bool regression = false;
};

namespace detail {

// RFC-4180 record splitter: quoted fields, doubled quotes, CRLF endings.
inline std::vector<std::vector<std::string>> parse_csv_records(
    const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    if (!(record.size() == 1 && record[0].empty())) {
      records.push_back(std::move(record));
    }
    record.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"' && !field_started) {
      in_quotes = true;
      field_started = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\r') {
      // swallowed; the following '\n' ends the record
    } else if (c == '\n') {
      end_record();
    } else {
      field.push_back(c);
      field_started = true;
    }
  }
  if (in_quotes) throw ParseError("unterminated quoted field at end of file");
  if (!field.empty() || !record.empty()) end_record();
  return records;
}

inline std::size_t find_column(const std::vector<std::string>& header,
                               const std::string& name) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) {
    throw SchemaError("missing column '" + name + "'");
  }
  return static_cast<std::size_t>(it - header.begin());
}

inline double parse_real(const std::string& cell, std::size_t row,
                         const std::string& column) {
  std::size_t consumed = 0;
  double value = 0.0;
  try {
    value = std::stod(cell, &consumed);
  } catch (const std::exception&) {
    consumed = 0;
  }
  while (consumed < cell.size() &&
         std::isspace(static_cast<unsigned char>(cell[consumed]))) {
    ++consumed;
  }
  if (cell.empty() || consumed != cell.size()) {
    throw ParseError("non-numeric value '" + cell + "' in column '" + column +
                     "' at row " + std::to_string(row));
  }
  return value;
}

// Order-of-first-appearance dense encoder.
class DenseEncoder {
 public:
  int encode(const std::string& value) {
    auto [it, inserted] = ids_.try_emplace(value, static_cast<int>(names_.size()));
    if (inserted) names_.push_back(value);
    return it->second;
  }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> names_;
};

}  // namespace detail

inline GroupedDataset parse_csv(const std::string& text,
                                const CsvSchema& schema) {
  auto records = detail::parse_csv_records(text);
  if (records.empty()) throw DomainError("empty CSV: no header row");
  const auto& header = records.front();
  if (schema.label_col.empty()) throw SchemaError("schema has no label_col");
  if (schema.group_col.empty()) throw SchemaError("schema has no group_col");
  if (schema.feature_cols.empty()) {
    throw SchemaError("schema lists no feature columns");
  }
  std::vector<std::size_t> feature_pos;
  for (const auto& name : schema.feature_cols) {
    feature_pos.push_back(detail::find_column(header, name));
  }
  const auto label_pos = detail::find_column(header, schema.label_col);
  const auto group_pos = detail::find_column(header, schema.group_col);

  const std::size_t n = records.size() - 1;
  if (n == 0) throw DomainError("empty CSV: header but no data rows");

  GroupedDataset ds;
  ds.features.resize(static_cast<Eigen::Index>(n),
                     static_cast<Eigen::Index>(feature_pos.size()));
  ds.labels.resize(static_cast<Eigen::Index>(n));
  ds.groups.resize(n);

  detail::DenseEncoder label_enc;
  detail::DenseEncoder group_enc;
  if (schema.group_value) {
    group_enc.encode(*schema.group_value);
    group_enc.encode("Non-" + *schema.group_value);
  }
  if (schema.positive_label) {
    label_enc.encode("not " + *schema.positive_label);
    label_enc.encode(*schema.positive_label);
  }

  for (std::size_t r = 0; r < n; ++r) {
    const auto& rec = records[r + 1];
    if (rec.size() != header.size()) {
      throw ParseError("row " + std::to_string(r) + " has " +
                       std::to_string(rec.size()) + " fields, header has " +
                       std::to_string(header.size()));
    }
    const auto row = static_cast<Eigen::Index>(r);
    for (std::size_t j = 0; j < feature_pos.size(); ++j) {
      ds.features(row, static_cast<Eigen::Index>(j)) = detail::parse_real(
          rec[feature_pos[j]], r, schema.feature_cols[j]);
    }
    const auto& label_cell = rec[label_pos];
    if (schema.regression) {
      ds.labels[row] = detail::parse_real(label_cell, r, schema.label_col);
    } else if (schema.positive_label) {
      ds.labels[row] = label_cell == *schema.positive_label ? 1.0 : 0.0;
    } else {
      ds.labels[row] = label_enc.encode(label_cell);
    }
    const auto& group_cell = rec[group_pos];
    if (schema.group_value) {
      ds.groups[r] = group_cell == *schema.group_value ? 0 : 1;
    } else {
      ds.groups[r] = group_enc.encode(group_cell);
    }
  }
  ds.group_names = group_enc.names();
  if (schema.regression) {
    ds.num_classes = 0;
  } else {
    ds.label_names = label_enc.names();
    ds.num_classes = static_cast<int>(ds.label_names.size());
  }
  // Binarized groups may leave one side empty; drop unused trailing names.
  if (schema.group_value) {
    const bool has_other =
        std::find(ds.groups.begin(), ds.groups.end(), 1) != ds.groups.end();
    if (!has_other) ds.group_names.resize(1);
  }
  ds.validate();
  return ds;
}

inline GroupedDataset load_csv(const std::string& path,
                               const CsvSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_csv(buffer.str(), schema);
}

// ---------------------------------------------------------------------------
// Standardization

enum class StandardizeScope { kGlobal, kPerGroup };

namespace detail {

// Zero mean and unit population variance on `rows`; constant columns map to 0.
inline void standardize_rows(Eigen::MatrixXd& x, const IndexList& rows) {
  if (rows.empty()) return;
  const double count = static_cast<double>(rows.size());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    double mean = 0.0;
    for (Index r : rows) mean += x(static_cast<Eigen::Index>(r), j);
    mean /= count;
    double var = 0.0;
    for (Index r : rows) {
      const double c = x(static_cast<Eigen::Index>(r), j) - mean;
      var += c * c;
    }
    var /= count;
    const bool constant = var <= 1e-24 * (1.0 + mean * mean);
    const double inv_sd = constant ? 0.0 : 1.0 / std::sqrt(var);
    for (Index r : rows) {
      auto& v = x(static_cast<Eigen::Index>(r), j);
      v = constant ? 0.0 : (v - mean) * inv_sd;
    }
  }
}

}  // namespace detail

inline GroupedDataset standardize(GroupedDataset ds, StandardizeScope scope) {
  if (scope == StandardizeScope::kGlobal) {
    detail::standardize_rows(ds.features, ds.all_indices());
  } else {
    for (int g = 0; g < ds.num_groups(); ++g) {
      detail::standardize_rows(ds.features, ds.group_indices(g));
    }
  }
  return ds;
}

// Projects every feature row onto the unit L2 ball.
inline GroupedDataset project_unit_ball(GroupedDataset ds) {
  for (Eigen::Index i = 0; i < ds.features.rows(); ++i) {
    const double norm = ds.features.row(i).norm();
    if (norm > 1.0) ds.features.row(i) /= norm;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic two-group data

struct SyntheticSpec {
  Index n_a = 500;
  Index n_b = 500;
  Index dim = 10;
  double norm_scale_a = 1.0;
  double norm_scale_b = 1.0;
  std::uint64_t seed = 0;
};

// Gaussian features, group a scaled by norm_scale_a and group b by
// norm_scale_b. Labels come from a unit-Gaussian linear teacher drawn once
// per seed: class 1 when the margin is positive.
inline GroupedDataset synth_two_group(const SyntheticSpec& spec) {
  if (spec.n_a < 1 || spec.n_b < 1) throw DomainError("group sizes must be >= 1");
  if (spec.dim < 1) throw DomainError("dimension must be >= 1");
  if (!(spec.norm_scale_a > 0) || !(spec.norm_scale_b > 0)) {
    throw DomainError("norm scales must be positive");
  }
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(spec.dim);
  Eigen::VectorXd teacher(d);
  for (Eigen::Index j = 0; j < d; ++j) teacher[j] = normal(rng);

  const Index n = spec.n_a + spec.n_b;
  GroupedDataset ds;
  ds.features.resize(static_cast<Eigen::Index>(n), d);
  ds.labels.resize(static_cast<Eigen::Index>(n));
  ds.groups.resize(n);
  ds.group_names = {"a", "b"};
  ds.label_names = {"0", "1"};
  ds.num_classes = 2;
  for (Index i = 0; i < n; ++i) {
    const bool in_a = i < spec.n_a;
    const double scale = in_a ? spec.norm_scale_a : spec.norm_scale_b;
    const auto row = static_cast<Eigen::Index>(i);
    for (Eigen::Index j = 0; j < d; ++j) {
      ds.features(row, j) = scale * normal(rng);
    }
    ds.labels[row] = ds.features.row(row).dot(teacher) > 0.0 ? 1.0 : 0.0;
    ds.groups[i] = in_a ? 0 : 1;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Mini-batch sampling

struct BatchPlan {
  double q = 0.01;
  std::uint64_t seed = 0;
  Index iterations = 1;

  void validate() const {
    if (!(q >= 0.0 && q <= 1.0)) throw DomainError("q must lie in [0, 1]");
    if (iterations < 1) throw DomainError("iteration count must be >= 1");
  }
};

// Each of the n indices is included independently with probability q.
inline IndexList poisson_batch(Index n, double q, Rng& rng) {
  if (!(q >= 0.0 && q <= 1.0)) throw DomainError("q must lie in [0, 1]");
  IndexList batch;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (Index i = 0; i < n; ++i) {
    if (unif(rng) < q) batch.push_back(i);
  }
  return batch;
}

// Exactly min(size, n) distinct indices, sorted.
inline IndexList fixed_batch(Index n, Index size, Rng& rng) {
  IndexList all(n);
  std::iota(all.begin(), all.end(), Index{0});
  IndexList batch;
  batch.reserve(std::min(size, n));
  std::sample(all.begin(), all.end(), std::back_inserter(batch),
              static_cast<std::ptrdiff_t>(size), rng);
  return batch;
}

// Returns a dataset with |D_b| / |D_a| = target_ratio (within one sample) by
// subsampling group b without replacement. Group a rows are kept untouched.
inline GroupedDataset resample_ratio(const GroupedDataset& ds,
                                     double target_ratio, std::uint64_t seed) {
  if (ds.num_groups() != 2) {
    throw DomainError("resample_ratio needs exactly two groups");
  }
  const auto rows_a = ds.group_indices(0);
  const auto rows_b = ds.group_indices(1);
  const double max_ratio = static_cast<double>(rows_b.size()) /
                           static_cast<double>(rows_a.size());
  if (!(target_ratio > 0.0) || target_ratio > max_ratio + 1e-12) {
    std::ostringstream msg;
    msg << "ratio " << target_ratio
        << " not achievable without upsampling; max achievable ratio is "
        << max_ratio;
    throw DomainError(msg.str());
  }
  const auto keep_b = static_cast<Index>(std::llround(
      target_ratio * static_cast<double>(rows_a.size())));
  if (keep_b < 1) throw DomainError("ratio leaves group b empty");

  Rng rng(seed);
  IndexList chosen;
  std::sample(rows_b.begin(), rows_b.end(), std::back_inserter(chosen),
              static_cast<std::ptrdiff_t>(std::min(keep_b, rows_b.size())), rng);
  std::vector<bool> keep(ds.size(), false);
  for (Index i : rows_a) keep[i] = true;
  for (Index i : chosen) keep[i] = true;

  IndexList rows;
  for (Index i = 0; i < ds.size(); ++i) {
    if (keep[i]) rows.push_back(i);
  }
  GroupedDataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), ds.features.cols());
  out.labels.resize(static_cast<Eigen::Index>(rows.size()));
  out.groups.resize(rows.size());
  for (Index r = 0; r < rows.size(); ++r) {
    const auto src = static_cast<Eigen::Index>(rows[r]);
    out.features.row(static_cast<Eigen::Index>(r)) = ds.features.row(src);
    out.labels[static_cast<Eigen::Index>(r)] = ds.labels[src];
    out.groups[r] = ds.groups[rows[r]];
  }
  out.group_names = ds.group_names;
  out.label_names = ds.label_names;
  out.num_classes = ds.num_classes;
  return out;
}

}  // namespace dpfair
