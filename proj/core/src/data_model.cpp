#include "tpu/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace tpu {

OutcomeKind kind_of(const Outcome& o) noexcept {
  return static_cast<OutcomeKind>(o.index());
}

std::string_view to_string(OutcomeKind k) noexcept {
  switch (k) {
    case OutcomeKind::Continuous: return "continuous";
    case OutcomeKind::Binary: return "binary";
    case OutcomeKind::Survival: return "survival";
  }
  return "unknown";
}

namespace {

void validate_subject(const Subject& s, std::size_t i, int x_dim, int z_dim, OutcomeKind kind) {
  const auto where = " (subject " + std::to_string(i) + ")";
  require(kind_of(s.outcome) == kind, ErrorCode::SchemaMismatch, "mixed outcome types" + where);
  if (const auto* b = std::get_if<BinaryOutcome>(&s.outcome)) {
    require(b->y == 0 || b->y == 1, ErrorCode::SchemaMismatch, "binary outcome not in {0,1}" + where);
  }
  if (const auto* sv = std::get_if<SurvivalOutcome>(&s.outcome)) {
    require(sv->time >= 0.0 && std::isfinite(sv->time), ErrorCode::SchemaMismatch,
            "survival time must be finite and >= 0" + where);
    require(sv->status == 0 || sv->status == 1, ErrorCode::SchemaMismatch,
            "status not in {0,1}" + where);
  }
  require(s.z.size() == z_dim, ErrorCode::DimensionMismatch, "z dimension" + where);
  require(s.r == 0 || s.r == 1, ErrorCode::InvalidArgument, "r must be 0 or 1" + where);
  require(s.x.has_value() == (s.r == 1), ErrorCode::InconsistentMissingness,
          "x present iff r = 1" + where);
  if (s.x) require(s.x->size() == x_dim, ErrorCode::DimensionMismatch, "x dimension" + where);
  require(s.pi > 0.0 && s.pi <= 1.0, ErrorCode::NonPositiveWeight, "pi must lie in (0,1]" + where);
}

}  // namespace

TwoPhaseDataset::TwoPhaseDataset(std::vector<Subject> subjects, int x_dim, int z_dim, Design design,
                                 ColumnNames names)
    : subjects_(std::move(subjects)),
      x_dim_(x_dim),
      z_dim_(z_dim),
      design_(std::move(design)),
      names_(std::move(names)) {
  require(x_dim >= 1, ErrorCode::InvalidArgument, "x_dim must be >= 1");
  require(z_dim >= 0, ErrorCode::InvalidArgument, "z_dim must be >= 0");
  if (!subjects_.empty()) kind_ = kind_of(subjects_.front().outcome);
  for (std::size_t i = 0; i < subjects_.size(); ++i) {
    validate_subject(subjects_[i], i, x_dim_, z_dim_, kind_);
  }
  if (names_.outcome.empty()) {
    names_.outcome = kind_ == OutcomeKind::Survival ? std::vector<std::string>{"time", "status"}
                                                    : std::vector<std::string>{"y"};
  }
  if (names_.z.empty()) {
    for (int j = 0; j < z_dim_; ++j) names_.z.push_back("z" + std::to_string(j + 1));
  }
  if (names_.x.empty()) {
    for (int j = 0; j < x_dim_; ++j) names_.x.push_back("x" + std::to_string(j + 1));
  }
  if (names_.z_is_aux.size() != static_cast<std::size_t>(z_dim_)) names_.z_is_aux.assign(z_dim_, false);
}

std::size_t TwoPhaseDataset::complete_cases() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(subjects_.begin(), subjects_.end(), [](const Subject& s) { return s.r == 1; }));
}

int TwoPhaseDataset::stratum_count() const noexcept {
  int h = 0;
  for (const auto& s : subjects_) h = std::max(h, s.stratum + 1);
  return h;
}

void TwoPhaseDataset::require_complete_cases(std::size_t needed) const {
  const auto have = complete_cases();
  require(have >= needed, ErrorCode::InsufficientCompleteCases,
          "need " + std::to_string(needed) + " complete cases, have " + std::to_string(have));
}

TwoPhaseDataset compute_design_weights(const TwoPhaseDataset& data, const Design& design) {
  std::vector<Subject> subjects = data.subjects();
  const std::size_t n = subjects.size();
  require(n > 0, ErrorCode::InvalidArgument, "empty dataset");
  if (const auto* mcar = std::get_if<McarDesign>(&design)) {
    require(mcar->n2 >= 1 && mcar->n2 <= n, ErrorCode::OverSampledStratum,
            "MCAR subsample size must lie in [1, n]");
    const double pi = static_cast<double>(mcar->n2) / static_cast<double>(n);
    for (auto& s : subjects) {
      s.pi = pi;
      s.stratum = 0;
    }
  } else {
    const auto& strat = std::get<StratifiedDesign>(design);
    const std::size_t h_count = strat.sampled.size();
    require(h_count >= 1, ErrorCode::InvalidArgument, "stratified design needs at least one stratum");
    std::vector<std::size_t> sizes(h_count, 0);
    for (const auto& s : subjects) {
      require(s.stratum >= 0 && static_cast<std::size_t>(s.stratum) < h_count,
              ErrorCode::InvalidArgument, "subject stratum outside the design");
      ++sizes[s.stratum];
    }
    for (std::size_t h = 0; h < h_count; ++h) {
      require(sizes[h] > 0, ErrorCode::EmptyStratum, "stratum " + std::to_string(h) + " is empty");
      require(strat.sampled[h] <= sizes[h], ErrorCode::OverSampledStratum,
              "stratum " + std::to_string(h) + " samples more subjects than it has");
      require(strat.sampled[h] >= 1, ErrorCode::NonPositiveWeight,
              "stratum " + std::to_string(h) + " has no Phase-II subjects");
    }
    for (auto& s : subjects) {
      s.pi = static_cast<double>(strat.sampled[s.stratum]) / static_cast<double>(sizes[s.stratum]);
    }
  }
  return TwoPhaseDataset(std::move(subjects), data.x_dim(), data.z_dim(), design, data.names());
}

SplitViews split(const TwoPhaseDataset& data) {
  std::vector<std::size_t> sub;
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    all[i] = i;
    if (data[i].r == 1) sub.push_back(i);
  }
  return {SampleView(data, std::move(sub)), SampleView(data, std::move(all))};
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  cells.push_back(cell);
  return cells;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

double parse_number(const std::string& cell, const std::string& col, std::size_t row) {
  const std::string t = trim(cell);
  double v = 0.0;
  const auto* first = t.data();
  const auto* last = t.data() + t.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  require(ec == std::errc() && ptr == last && !t.empty(), ErrorCode::SchemaMismatch,
          "column '" + col + "' row " + std::to_string(row) + ": not a number: '" + t + "'");
  return v;
}

int parse_indicator(const std::string& cell, const std::string& col, std::size_t row) {
  const double v = parse_number(cell, col, row);
  require(v == 0.0 || v == 1.0, ErrorCode::SchemaMismatch,
          "column '" + col + "' row " + std::to_string(row) + ": expected 0 or 1");
  return static_cast<int>(v);
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

TwoPhaseDataset parse_csv(const std::string& text, const CsvSchema& schema) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::SchemaMismatch, "missing header");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // BOM
  const auto header = split_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t j = 0; j < header.size(); ++j) col[trim(header[j])] = j;

  auto find = [&](const std::string& name) {
    auto it = col.find(name);
    require(it != col.end(), ErrorCode::SchemaMismatch, "missing column '" + name + "'");
    return it->second;
  };

  std::vector<std::string> outcome_cols = schema.outcome_cols;
  if (outcome_cols.empty()) {
    outcome_cols = schema.outcome == OutcomeKind::Survival ? std::vector<std::string>{"time", "status"}
                                                           : std::vector<std::string>{"y"};
  }
  require(outcome_cols.size() == (schema.outcome == OutcomeKind::Survival ? 2u : 1u),
          ErrorCode::SchemaMismatch, "wrong number of outcome columns");
  require(!schema.x_cols.empty(), ErrorCode::SchemaMismatch, "no expensive covariate columns");

  std::vector<std::size_t> oc, zc, xc;
  for (const auto& c : outcome_cols) oc.push_back(find(c));
  for (const auto& c : schema.z_cols) zc.push_back(find(c));
  for (const auto& c : schema.x_cols) xc.push_back(find(c));
  const std::size_t rc = find(schema.r_col);
  std::optional<std::size_t> pc, sc;
  if (schema.pi_col) pc = find(*schema.pi_col);
  if (schema.stratum_col) sc = find(*schema.stratum_col);
  for (const auto& a : schema.aux_cols) {
    require(std::find(schema.z_cols.begin(), schema.z_cols.end(), a) != schema.z_cols.end(),
            ErrorCode::SchemaMismatch, "auxiliary column '" + a + "' is not among the z columns");
  }

  std::vector<Subject> subjects;
  std::map<std::string, int> stratum_ids;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    require(cells.size() == header.size(), ErrorCode::SchemaMismatch,
            "row " + std::to_string(row) + " has " + std::to_string(cells.size()) + " cells, header has " +
                std::to_string(header.size()));
    Subject s;
    switch (schema.outcome) {
      case OutcomeKind::Continuous:
        s.outcome = ContinuousOutcome{parse_number(cells[oc[0]], outcome_cols[0], row)};
        break;
      case OutcomeKind::Binary:
        s.outcome = BinaryOutcome{parse_indicator(cells[oc[0]], outcome_cols[0], row)};
        break;
      case OutcomeKind::Survival: {
        const double t = parse_number(cells[oc[0]], outcome_cols[0], row);
        require(t >= 0.0, ErrorCode::SchemaMismatch, "negative survival time at row " + std::to_string(row));
        s.outcome = SurvivalOutcome{t, parse_indicator(cells[oc[1]], outcome_cols[1], row)};
        break;
      }
    }
    s.z.resize(static_cast<Eigen::Index>(zc.size()));
    for (std::size_t j = 0; j < zc.size(); ++j) s.z[j] = parse_number(cells[zc[j]], schema.z_cols[j], row);
    s.r = parse_indicator(cells[rc], schema.r_col, row);
    std::size_t present = 0;
    for (auto j : xc) present += trim(cells[j]).empty() ? 0 : 1;
    if (s.r == 1) {
      require(present == xc.size(), ErrorCode::InconsistentMissingness,
              "row " + std::to_string(row) + ": r = 1 but an expensive covariate is empty");
      Vector x(static_cast<Eigen::Index>(xc.size()));
      for (std::size_t j = 0; j < xc.size(); ++j) x[j] = parse_number(cells[xc[j]], schema.x_cols[j], row);
      s.x = std::move(x);
    } else {
      require(present == 0, ErrorCode::InconsistentMissingness,
              "row " + std::to_string(row) + ": r = 0 but an expensive covariate is present");
    }
    if (pc) {
      s.pi = parse_number(cells[*pc], *schema.pi_col, row);
      require(s.pi > 0.0 && s.pi <= 1.0, ErrorCode::NonPositiveWeight,
              "row " + std::to_string(row) + ": pi must lie in (0,1]");
    }
    if (sc) {
      const std::string key = trim(cells[*sc]);
      auto [it, inserted] = stratum_ids.emplace(key, static_cast<int>(stratum_ids.size()));
      s.stratum = it->second;
    }
    subjects.push_back(std::move(s));
  }
  require(!subjects.empty(), ErrorCode::SchemaMismatch, "no data rows");

  // Map string stratum labels onto indices sorted by label so the numbering is stable.
  if (sc) {
    std::vector<std::string> labels;
    for (const auto& [k, v] : stratum_ids) labels.push_back(k);
    std::map<int, int> remap;
    for (std::size_t h = 0; h < labels.size(); ++h) remap[stratum_ids[labels[h]]] = static_cast<int>(h);
    for (auto& s : subjects) s.stratum = remap[s.stratum];
  }

  ColumnNames names;
  names.outcome = outcome_cols;
  names.z = schema.z_cols;
  names.x = schema.x_cols;
  for (const auto& z : schema.z_cols) {
    names.z_is_aux.push_back(std::find(schema.aux_cols.begin(), schema.aux_cols.end(), z) !=
                             schema.aux_cols.end());
  }
  names.r = schema.r_col;
  names.pi = schema.pi_col.value_or("pi");
  names.stratum = schema.stratum_col.value_or("");

  const int x_dim = static_cast<int>(xc.size());
  const int z_dim = static_cast<int>(zc.size());

  Design design = McarDesign{0};
  if (!pc) {
    require(schema.design.has_value(), ErrorCode::SchemaMismatch,
            "no pi column and no design to compute it from");
    design = *schema.design;
    if (auto* m = std::get_if<McarDesign>(&design); m && m->n2 == 0) {
      m->n2 = static_cast<std::size_t>(std::count_if(subjects.begin(), subjects.end(),
                                                     [](const Subject& s) { return s.r == 1; }));
    }
    if (auto* st = std::get_if<StratifiedDesign>(&design); st && st->sampled.empty()) {
      int h_count = 0;
      for (const auto& s : subjects) h_count = std::max(h_count, s.stratum + 1);
      st->sampled.assign(h_count, 0);
      for (const auto& s : subjects) st->sampled[s.stratum] += s.r;
    }
    TwoPhaseDataset provisional(std::move(subjects), x_dim, z_dim, design, names);
    return compute_design_weights(provisional, design);
  }
  if (sc) {
    int h_count = 0;
    for (const auto& s : subjects) h_count = std::max(h_count, s.stratum + 1);
    StratifiedDesign st;
    st.sampled.assign(h_count, 0);
    for (const auto& s : subjects) st.sampled[s.stratum] += s.r;
    design = st;
  } else {
    design = McarDesign{static_cast<std::size_t>(std::count_if(
        subjects.begin(), subjects.end(), [](const Subject& s) { return s.r == 1; }))};
  }
  return TwoPhaseDataset(std::move(subjects), x_dim, z_dim, design, names);
}

TwoPhaseDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str(), schema);
}

std::string to_csv(const TwoPhaseDataset& data) {
  const auto& names = data.names();
  std::ostringstream out;
  std::vector<std::string> header = names.outcome;
  header.insert(header.end(), names.z.begin(), names.z.end());
  header.insert(header.end(), names.x.begin(), names.x.end());
  header.push_back(names.r);
  header.push_back(names.pi);
  if (!names.stratum.empty()) header.push_back(names.stratum);
  for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
  out << '\n';
  for (const auto& s : data.subjects()) {
    std::visit(
        [&](const auto& o) {
          using T = std::decay_t<decltype(o)>;
          if constexpr (std::is_same_v<T, ContinuousOutcome>) out << format_number(o.y);
          if constexpr (std::is_same_v<T, BinaryOutcome>) out << o.y;
          if constexpr (std::is_same_v<T, SurvivalOutcome>) out << format_number(o.time) << ',' << o.status;
        },
        s.outcome);
    for (Eigen::Index j = 0; j < s.z.size(); ++j) out << ',' << format_number(s.z[j]);
    for (int j = 0; j < data.x_dim(); ++j) {
      out << ',';
      if (s.x) out << format_number((*s.x)[j]);
    }
    out << ',' << s.r << ',' << format_number(s.pi);
    if (!names.stratum.empty()) out << ',' << s.stratum;
    out << '\n';
  }
  return out.str();
}

void write_csv(const TwoPhaseDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << to_csv(data);
}

}  // namespace tpu
