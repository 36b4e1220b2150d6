#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "tpu/numerics.hpp"

namespace tpu {

struct ContinuousOutcome {
  double y = 0.0;
};
struct BinaryOutcome {
  int y = 0;
};
struct SurvivalOutcome {
  double time = 0.0;
  int status = 0;  // 1 = event observed
};
using Outcome = std::variant<ContinuousOutcome, BinaryOutcome, SurvivalOutcome>;

enum class OutcomeKind { Continuous, Binary, Survival };

OutcomeKind kind_of(const Outcome& o) noexcept;
std::string_view to_string(OutcomeKind k) noexcept;

struct Subject {
  Outcome outcome;
  Vector z;                // cheap covariates, auxiliaries included
  std::optional<Vector> x; // expensive covariates, present iff r == 1
  int r = 0;
  double pi = 1.0;
  int stratum = 0;         // design stratum index, 0 under MCAR
};

struct McarDesign {
  std::size_t n2 = 0;
};

/// Per-stratum Phase-II counts; stratum membership is Subject::stratum.
struct StratifiedDesign {
  std::vector<std::size_t> sampled;
};

using Design = std::variant<McarDesign, StratifiedDesign>;

/// Column names carried along for CSV export and reporting.
struct ColumnNames {
  std::vector<std::string> outcome;  // {"y"} or {"time","status"}
  std::vector<std::string> z;
  std::vector<std::string> x;
  std::vector<bool> z_is_aux;
  std::string r = "r";
  std::string pi = "pi";
  std::string stratum;  // empty when not stored
};

/// Immutable two-phase dataset. Construction validates the per-subject invariants.
class TwoPhaseDataset {
 public:
  TwoPhaseDataset(std::vector<Subject> subjects, int x_dim, int z_dim, Design design,
                  ColumnNames names = {});

  const std::vector<Subject>& subjects() const noexcept { return subjects_; }
  const Subject& operator[](std::size_t i) const { return subjects_[i]; }
  std::size_t size() const noexcept { return subjects_.size(); }
  int x_dim() const noexcept { return x_dim_; }
  int z_dim() const noexcept { return z_dim_; }
  const Design& design() const noexcept { return design_; }
  const ColumnNames& names() const noexcept { return names_; }
  OutcomeKind outcome_kind() const noexcept { return kind_; }
  std::size_t complete_cases() const noexcept;
  int stratum_count() const noexcept;

  /// Throws InsufficientCompleteCases when fewer than `needed` subjects have r = 1.
  void require_complete_cases(std::size_t needed) const;

 private:
  std::vector<Subject> subjects_;
  int x_dim_;
  int z_dim_;
  Design design_;
  ColumnNames names_;
  OutcomeKind kind_ = OutcomeKind::Continuous;
};

/// Fills pi from the design: n2/n under MCAR, n_h/N_h within each stratum.
TwoPhaseDataset compute_design_weights(const TwoPhaseDataset& data, const Design& design);

/// Read-only alias of a subset of subjects.
class SampleView {
 public:
  SampleView(const TwoPhaseDataset& data, std::vector<std::size_t> indices)
      : data_(&data), idx_(std::move(indices)) {}

  std::size_t size() const noexcept { return idx_.size(); }
  bool empty() const noexcept { return idx_.empty(); }
  const Subject& operator[](std::size_t k) const { return (*data_)[idx_[k]]; }
  std::size_t index(std::size_t k) const { return idx_[k]; }
  const std::vector<std::size_t>& indices() const noexcept { return idx_; }
  const TwoPhaseDataset& dataset() const noexcept { return *data_; }

 private:
  const TwoPhaseDataset* data_;
  std::vector<std::size_t> idx_;
};

struct SplitViews {
  SampleView subsample;
  SampleView full;
};

SplitViews split(const TwoPhaseDataset& data);

struct CsvSchema {
  OutcomeKind outcome = OutcomeKind::Continuous;
  std::vector<std::string> outcome_cols;  // defaults to y / time,status when empty
  std::vector<std::string> z_cols;
  std::vector<std::string> aux_cols;      // subset of z_cols flagged as auxiliary
  std::vector<std::string> x_cols;
  std::string r_col = "r";
  std::optional<std::string> pi_col;
  std::optional<std::string> stratum_col;
  std::optional<Design> design;           // used when pi_col is absent
};

TwoPhaseDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);
TwoPhaseDataset parse_csv(const std::string& text, const CsvSchema& schema);

/// Writes outcome, z, x, r, pi (and stratum when named) columns using the
/// shortest round-trip representation of every number.
std::string to_csv(const TwoPhaseDataset& data);
void write_csv(const TwoPhaseDataset& data, const std::filesystem::path& path);

}  // namespace tpu
