#include "cli.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tpu/data_model.hpp"
#include "tpu/parallel.hpp"
#include "tpu/simulation.hpp"
#include "tpu/update_engine.hpp"

namespace tpu::cli {

using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// config <-> json

json to_json(const RunConfig& c) {
  json j;
  j["command"] = c.command;
  if (c.command == "simulate") {
    j["scenario"] = c.scenario;
    j["model"] = c.model;
    j["design"] = c.design;
    j["rho"] = c.rho;
    j["reps"] = c.reps;
    j["emit_csv"] = c.emit_csv;
    j["emit_rep"] = c.emit_rep;
  } else {
    j["data"] = c.data;
    j["model"] = c.model;
    j["outcome"] = c.outcome;
    j["expensive"] = c.expensive;
    j["aux"] = c.aux;
    j["adjust"] = c.adjust;
    j["r"] = c.r_col;
    j["pi"] = c.pi_col;
    j["design_file"] = c.design_file;
    j["intercept"] = c.intercept;
  }
  j["methods"] = c.methods;
  j["boot"] = c.boot;
  j["lambda"] = c.lambda;
  j["penalty"] = c.penalty;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["format"] = c.format;
  return j;
}

template <typename T>
void get_if_present(const json& j, const char* key, T& dst) {
  if (j.contains(key)) j.at(key).get_to(dst);
}

RunConfig from_json(const json& j) {
  RunConfig c;
  get_if_present(j, "command", c.command);
  get_if_present(j, "scenario", c.scenario);
  get_if_present(j, "model", c.model);
  get_if_present(j, "design", c.design);
  get_if_present(j, "rho", c.rho);
  get_if_present(j, "reps", c.reps);
  get_if_present(j, "emit_csv", c.emit_csv);
  get_if_present(j, "emit_rep", c.emit_rep);
  get_if_present(j, "data", c.data);
  get_if_present(j, "outcome", c.outcome);
  get_if_present(j, "expensive", c.expensive);
  get_if_present(j, "aux", c.aux);
  get_if_present(j, "adjust", c.adjust);
  get_if_present(j, "r", c.r_col);
  get_if_present(j, "pi", c.pi_col);
  get_if_present(j, "design_file", c.design_file);
  get_if_present(j, "intercept", c.intercept);
  get_if_present(j, "methods", c.methods);
  get_if_present(j, "boot", c.boot);
  get_if_present(j, "lambda", c.lambda);
  get_if_present(j, "penalty", c.penalty);
  get_if_present(j, "seed", c.seed);
  get_if_present(j, "out", c.out);
  get_if_present(j, "format", c.format);
  return c;
}

RunConfig load_sidecar(const std::string& path, const std::string& expected_command) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, "invalid config: " + std::string(e.what()));
  }
  const json& cfg = j.contains("config") ? j.at("config") : j;
  RunConfig c;
  try {
    c = from_json(cfg);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, "invalid config: " + std::string(e.what()));
  }
  require(c.command == expected_command, ErrorCode::InvalidArgument,
          "invalid config: sidecar was written by '" + c.command + "'");
  return c;
}

// ---------------------------------------------------------------------------
// helpers

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::StudyAborted: return kStudyAborted;
    case ErrorCode::NonConvergence:
    case ErrorCode::SingularJacobian:
    case ErrorCode::RankDeficient:
    case ErrorCode::Separation:
    case ErrorCode::NoEvents:
    case ErrorCode::ZeroDensity:
    case ErrorCode::UnderflowDenominator:
    case ErrorCode::TooManyFailures:
    case ErrorCode::SingularMiddleBlock:
    case ErrorCode::DegenerateSample:
    case ErrorCode::NotSymmetric:
      return kEstimationFailure;
    default:
      return kConfigError;
  }
}

std::string default_extension(const std::string& format) { return format == "md" ? "md" : format; }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::Io, "cannot write " + path);
  f << text;
  require(static_cast<bool>(f), ErrorCode::Io, "write failed for " + path);
}

std::string sidecar_path(const std::string& out) { return out + ".sidecar.json"; }

void check_common(const RunConfig& c) {
  require(c.format == "csv" || c.format == "md" || c.format == "json", ErrorCode::InvalidArgument,
          "invalid format: expected csv, md or json");
  require(c.boot >= 2, ErrorCode::InvalidArgument, "invalid boot: must be at least 2");
  (void)parse_penalty_scaling(c.penalty);
  require(!c.lambda.empty(), ErrorCode::InvalidArgument, "invalid lambda: grid must not be empty");
  for (std::size_t i = 0; i < c.lambda.size(); ++i) {
    require(c.lambda[i] >= 0.0, ErrorCode::InvalidArgument, "invalid lambda: values must be non-negative");
    require(i == 0 || c.lambda[i] > c.lambda[i - 1], ErrorCode::InvalidArgument,
            "invalid lambda: grid must be strictly ascending");
  }
}

json base_sidecar(const RunConfig& c) {
  json j;
  j["tool"] = "tpupdate";
  j["version"] = TPU_VERSION;
  j["config"] = to_json(c);
  return j;
}

// ---------------------------------------------------------------------------
// simulate

ScenarioConfig scenario_from(const RunConfig& c) {
  ScenarioConfig s;
  std::string expected;
  if (c.scenario == "s1") {
    expected = "linear";
  } else if (c.scenario == "s2") {
    expected = "logistic";
  } else if (c.scenario == "s3") {
    expected = "cox";
  } else if (c.scenario == "two-cov-1") {
    s.setting = CovariateSetting::TwoCovariateI;
  } else if (c.scenario == "two-cov-2") {
    s.setting = CovariateSetting::TwoCovariateII;
  } else {
    fail(ErrorCode::InvalidArgument, "invalid scenario: '" + c.scenario + "'");
  }
  std::string model = c.model;
  if (!expected.empty()) {
    require(model.empty() || model == expected, ErrorCode::InvalidArgument,
            "invalid model: scenario " + c.scenario + " uses the " + expected + " model");
    model = expected;
  }
  require(!model.empty(), ErrorCode::InvalidArgument, "invalid model: required for two-covariate scenarios");
  s.model = parse_model_kind(model);
  require(c.design == "mcar" || c.design == "mar", ErrorCode::InvalidArgument, "invalid design: expected mcar or mar");
  s.design = c.design == "mar" ? SamplingScheme::Mar : SamplingScheme::Mcar;
  s.rho = c.rho;
  s.reps = c.reps;
  s.B = c.boot;
  s.lambda_grid = c.lambda;
  s.seed = c.seed;
  s.penalty = parse_penalty_scaling(c.penalty);
  s.threads = worker_count();
  s.validate();
  return s;
}

std::string study_json(const StudyResult& res) {
  json j;
  j["rows"] = json::array();
  for (const auto& r : res.rows) {
    for (std::size_t k = 0; k < r.coef.size(); ++k) {
      const auto e = static_cast<Eigen::Index>(k);
      j["rows"].push_back({{"method", r.method}, {"coef", r.coef[k]}, {"bias", r.bias[e]}, {"ssd", r.ssd[e]},
                           {"ese", r.ese[e]}, {"cp", r.cp[e]}, {"re", r.re[e]}});
    }
  }
  j["calibration"] = {{"sigma_e", res.calibration.sigma_e}, {"tau", res.calibration.tau}};
  j["failed_reps"] = res.failed_reps;
  return j.dump(2) + "\n";
}

int cmd_simulate(RunConfig c, std::ostream& out, std::ostream& log) {
  check_common(c);
  ScenarioConfig sc = scenario_from(c);
  if (c.methods.empty()) c.methods = available_methods(sc);
  if (c.out.empty()) c.out = "simulate." + default_extension(c.format);
  const Calibration cal = calibrate(sc);
  log << "calibration: sigma_e=" << std::setprecision(10) << cal.sigma_e;
  if (sc.model == ModelKind::Cox) log << " tau=" << cal.tau << " censoring=" << cal.censoring_rate;
  log << "\n";

  json side = base_sidecar(c);
  side["seeds"] = {{"base_seed", c.seed},
                   {"data_stream", "replicate index"},
                   {"bootstrap_stream", "reps + replicate * boot + b"}};
  side["calibration"] = {{"sigma_e", cal.sigma_e}, {"tau", cal.tau}, {"censoring_rate", cal.censoring_rate}};
  side["penalty_scaling"] = c.penalty;

  if (!c.emit_csv.empty()) {
    std::vector<std::string> warnings;
    const auto data = generate(sc, c.emit_rep, cal, &warnings);
    for (const auto& w : warnings) log << "warning: " << w << "\n";
    write_csv(data, c.emit_csv);
    log << "wrote replicate " << c.emit_rep << " to " << c.emit_csv << "\n";
    side["emitted"] = c.emit_csv;
    write_text(sidecar_path(c.emit_csv), side.dump(2) + "\n");
    return kOk;
  }

  const StudyResult res = run_study(sc, c.methods);
  for (const auto& w : res.warnings) log << "warning: " << w << "\n";

  // Selected lambda per working spec, tallied over replicates.
  json lam = json::object();
  for (std::size_t s = 0; s < res.spec_labels.size(); ++s) {
    std::map<double, std::size_t> tally;
    for (const auto& rep : res.lambdas) ++tally[rep[s]];
    json t = json::array();
    std::ostringstream line;
    line << "lambda selected for " << res.spec_labels[s] << ":";
    for (const auto& [v, k] : tally) {
      t.push_back({{"lambda", v}, {"replicates", k}});
      line << " " << v << " x" << k;
    }
    lam[res.spec_labels[s]] = t;
    log << line.str() << "\n";
  }
  side["lambda_selected"] = lam;
  side["failed_reps"] = res.failed_reps;
  side["warnings"] = res.warnings.size();

  std::string table;
  if (c.format == "csv") table = metrics_csv(res.rows);
  else if (c.format == "md") table = metrics_markdown(res.rows);
  else table = study_json(res);
  write_text(c.out, table);
  write_text(sidecar_path(c.out), side.dump(2) + "\n");
  out << table;
  return kOk;
}

// ---------------------------------------------------------------------------
// analyze

std::optional<Design> design_from_file(const std::string& path, std::optional<std::string>& stratum_col) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open design file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaMismatch, "invalid design file: " + std::string(e.what()));
  }
  const std::string type = j.value("type", "");
  if (type == "mcar") return McarDesign{j.value("n2", std::size_t{0})};
  if (type == "stratified") {
    require(j.contains("stratum_col"), ErrorCode::SchemaMismatch, "stratified design file needs stratum_col");
    stratum_col = j.at("stratum_col").get<std::string>();
    StratifiedDesign st;
    if (j.contains("sampled")) st.sampled = j.at("sampled").get<std::vector<std::size_t>>();
    return st;
  }
  fail(ErrorCode::SchemaMismatch, "invalid design file: type must be mcar or stratified");
}

int cmd_analyze(RunConfig c, std::ostream& out, std::ostream& log) {
  check_common(c);
  require(!c.data.empty(), ErrorCode::InvalidArgument, "invalid data: a CSV path is required");
  require(!c.model.empty(), ErrorCode::InvalidArgument, "invalid model: required");
  const ModelKind kind = parse_model_kind(c.model);
  require(!c.expensive.empty(), ErrorCode::InvalidArgument, "invalid expensive: at least one column is required");
  if (c.methods.empty()) c.methods = {"original", "default", "optimal"};
  // the original estimate is always reported, first
  if (std::find(c.methods.begin(), c.methods.end(), "original") == c.methods.end()) {
    c.methods.insert(c.methods.begin(), "original");
  }
  if (c.out.empty()) c.out = "analyze." + default_extension(c.format);

  CsvSchema schema;
  schema.outcome = outcome_kind_for(kind);
  schema.outcome_cols = c.outcome;
  schema.x_cols = c.expensive;
  schema.z_cols = c.adjust;
  for (const auto& a : c.aux) {
    require(std::find(c.adjust.begin(), c.adjust.end(), a) == c.adjust.end(), ErrorCode::InvalidArgument,
            "invalid aux: column '" + a + "' is also an adjustment covariate");
    schema.z_cols.push_back(a);
  }
  schema.aux_cols = c.aux;
  schema.r_col = c.r_col;
  require(c.pi_col.empty() || c.design_file.empty(), ErrorCode::InvalidArgument,
          "invalid design: give either --pi or --design-file");
  if (!c.pi_col.empty()) schema.pi_col = c.pi_col;
  if (!c.design_file.empty()) schema.design = design_from_file(c.design_file, schema.stratum_col);
  const TwoPhaseDataset data = load_csv(c.data, schema);
  log << "loaded " << data.size() << " subjects, " << data.complete_cases() << " complete cases\n";

  // Working specs from the method labels.
  const int zdim = data.z_dim();
  std::vector<int> all_z(static_cast<std::size_t>(zdim));
  for (int j = 0; j < zdim; ++j) all_z[static_cast<std::size_t>(j)] = j;
  std::vector<int> adjust_cols(c.adjust.size());
  for (std::size_t j = 0; j < c.adjust.size(); ++j) adjust_cols[j] = static_cast<int>(j);

  UpdateProblem problem;
  problem.model.kind = kind;
  problem.model.layout.intercept = c.intercept && kind != ModelKind::Cox;
  problem.model.layout.use_x = true;
  problem.model.layout.z_cols = adjust_cols;
  problem.penalty = parse_penalty_scaling(c.penalty);
  const std::vector<double> grid = kind == ModelKind::Logistic ? c.lambda : std::vector<double>{0.0};

  std::map<std::string, int> index;
  auto spec_for = [&](const std::string& label) -> int {
    if (auto it = index.find(label); it != index.end()) return it->second;
    require(zdim > 0, ErrorCode::InvalidArgument, "invalid methods: working models need --aux or --adjust columns");
    WorkingSpec ws;
    ws.label = label;
    if (label == "default") {
      ws.kind = DefaultWorking{all_z};
    } else if (label == "optimal") {
      ws.kind = PhiStarWorking{KernelRecipe{all_z, std::nullopt}, grid};
    } else if (label == "linear") {
      ws.kind = PhiStarWorking{NormalLinearRecipe{all_z}, grid};
    } else {
      fail(ErrorCode::InvalidArgument, "invalid methods: unknown method '" + label + "'");
    }
    const int k = static_cast<int>(problem.specs.size());
    problem.specs.push_back(std::move(ws));
    index[label] = k;
    return k;
  };
  std::vector<MethodSpec> methods;
  std::set<std::string> singles;
  bool has_joint = false;
  for (const auto& m : c.methods) {
    MethodSpec ms{m, {}};
    if (m != "original") {
      std::stringstream ss(m);
      std::string part;
      while (std::getline(ss, part, '+')) ms.specs.push_back(spec_for(part));
      if (ms.specs.size() == 1) singles.insert(m);
      else has_joint = true;
    }
    methods.push_back(std::move(ms));
  }
  if (singles.size() >= 2 && !has_joint) {
    MethodSpec joint{"", {}};
    for (const auto& m : c.methods) {
      if (singles.count(m)) {
        joint.label += (joint.label.empty() ? "" : "+") + m;
        joint.specs.push_back(index.at(m));
      }
    }
    methods.push_back(std::move(joint));
  }

  AnalysisConfig ac;
  ac.B = c.boot;
  ac.seed = c.seed;
  ac.threads = worker_count();
  const AnalysisResult res = analyze(data, problem, methods, ac);
  for (std::size_t s = 0; s < res.lambdas.size(); ++s) {
    log << "lambda selected for " << problem.specs[s].label << ": " << res.lambdas[s].lambda
        << (res.lambdas[s].all_outliers ? " (every grid value showed outliers)" : "") << "\n";
  }
  if (res.boot_failures) log << "warning: " << res.boot_failures << " bootstrap replicates dropped\n";

  const auto labels = problem.model.layout.labels(data.names());
  struct Row {
    std::string method, coef;
    double est, se, z, p;
  };
  std::vector<Row> rows;
  for (const auto& m : res.methods) {
    for (Eigen::Index k = 0; k < m.estimate.size(); ++k) {
      const double se = m.se[k];
      const double z = m.estimate[k] / se;
      rows.push_back({m.label, labels[static_cast<std::size_t>(k)], m.estimate[k], se, z,
                      std::erfc(std::abs(z) / std::sqrt(2.0))});
    }
  }
  std::ostringstream table;
  if (c.format == "json") {
    json j = json::array();
    for (const auto& r : rows) {
      j.push_back({{"method", r.method}, {"coef", r.coef}, {"estimate", r.est}, {"se", r.se}, {"z", r.z},
                   {"p_value", r.p}});
    }
    table << j.dump(2) << "\n";
  } else if (c.format == "csv") {
    table << "method,coef,estimate,se,z,p_value\n" << std::setprecision(17);
    for (const auto& r : rows) {
      table << r.method << ',' << r.coef << ',' << r.est << ',' << r.se << ',' << r.z << ',' << r.p << '\n';
    }
  } else {
    table << "| Method | Coef | Est | SE | z | p-value |\n|:--|:--|--:|--:|--:|--:|\n";
    for (const auto& r : rows) {
      table << "| " << r.method << " | " << r.coef << " | " << std::fixed << std::setprecision(3) << r.est << " | "
            << r.se << " | " << std::setprecision(2) << r.z << " | " << std::scientific << std::setprecision(2)
            << r.p << std::defaultfloat << " |\n";
    }
  }
  json side = base_sidecar(c);
  side["seeds"] = {{"base_seed", c.seed}, {"bootstrap_stream", "b"}};
  side["penalty_scaling"] = c.penalty;
  json lam = json::object();
  for (std::size_t s = 0; s < res.lambdas.size(); ++s) lam[problem.specs[s].label] = res.lambdas[s].lambda;
  side["lambda_selected"] = lam;
  side["bootstrap_failures"] = res.boot_failures;
  write_text(c.out, table.str());
  write_text(sidecar_path(c.out), side.dump(2) + "\n");
  out << table.str();
  return kOk;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& log) {
  CLI::App app{"Two-phase update estimation: simulation studies and data analysis", "tpupdate"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(TPU_VERSION));

  RunConfig sim;
  sim.command = "simulate";
  std::string sim_config, sim_lambda, sim_methods;
  auto* s = app.add_subcommand("simulate", "Run a simulation study and write its metric table");
  s->add_option("--scenario", sim.scenario, "s1, s2, s3, two-cov-1 or two-cov-2");
  s->add_option("--model", sim.model, "linear, logistic or cox");
  s->add_option("--design", sim.design, "mcar or mar");
  s->add_option("--rho", sim.rho, "Corr(X, X*)");
  s->add_option("--reps", sim.reps, "Monte Carlo replicates");
  s->add_option("--boot", sim.boot, "bootstrap replicates per dataset");
  s->add_option("--lambda", sim_lambda, "comma-separated penalty grid");
  s->add_option("--methods", sim_methods, "comma-separated method labels");
  s->add_option("--penalty", sim.penalty, "averaged or literal");
  s->add_option("--seed", sim.seed, "base seed");
  auto* sim_out = s->add_option("--out", sim.out, "output path");
  s->add_option("--format", sim.format, "csv, md or json");
  s->add_option("--emit-csv", sim.emit_csv, "write one replicate's dataset as CSV and exit");
  s->add_option("--emit-rep", sim.emit_rep, "replicate dumped by --emit-csv");
  s->add_option("--config", sim_config, "rerun from a JSON sidecar");

  RunConfig an;
  an.command = "analyze";
  std::string an_config, an_lambda, an_methods, an_outcome, an_expensive, an_aux, an_adjust;
  bool no_intercept = false;
  auto* a = app.add_subcommand("analyze", "Run the estimator menu on a two-phase CSV");
  a->add_option("--data", an.data, "CSV path");
  a->add_option("--model", an.model, "linear, logistic or cox");
  a->add_option("--outcome", an_outcome, "outcome column(s): y, or time,status");
  a->add_option("--expensive", an_expensive, "Phase-II covariate columns");
  a->add_option("--aux", an_aux, "auxiliary columns (working models only)");
  a->add_option("--adjust", an_adjust, "cheap covariates in the outcome model");
  a->add_option("--r", an.r_col, "selection indicator column");
  a->add_option("--pi", an.pi_col, "selection probability column");
  a->add_option("--design-file", an.design_file, "JSON design description used to compute pi");
  a->add_option("--methods", an_methods, "comma-separated method labels");
  a->add_option("--boot", an.boot, "bootstrap replicates");
  a->add_option("--lambda", an_lambda, "comma-separated penalty grid");
  a->add_option("--penalty", an.penalty, "averaged or literal");
  a->add_flag("--no-intercept", no_intercept, "drop the intercept (linear/logistic)");
  a->add_option("--seed", an.seed, "base seed");
  auto* an_out = a->add_option("--out", an.out, "output path");
  a->add_option("--format", an.format, "csv, md or json");
  a->add_option("--config", an_config, "rerun from a JSON sidecar");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, log);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    auto parse_lambda = [](const std::string& text, std::vector<double>& dst) {
      if (text.empty()) return;
      dst.clear();
      for (const auto& p : split_list(text)) {
        try {
          std::size_t used = 0;
          dst.push_back(std::stod(p, &used));
          require(used == p.size(), ErrorCode::InvalidArgument, "");
        } catch (const std::exception&) {
          fail(ErrorCode::InvalidArgument, "invalid lambda: '" + p + "' is not a number");
        }
      }
    };
    if (s->parsed()) {
      RunConfig c = sim;
      parse_lambda(sim_lambda, c.lambda);
      if (!sim_methods.empty()) c.methods = split_list(sim_methods);
      if (!sim_config.empty()) {
        c = load_sidecar(sim_config, "simulate");
        if (sim_out->count()) c.out = sim.out;
      }
      return cmd_simulate(c, out, log);
    }
    RunConfig c = an;
    parse_lambda(an_lambda, c.lambda);
    if (!an_methods.empty()) c.methods = split_list(an_methods);
    if (!an_outcome.empty()) c.outcome = split_list(an_outcome);
    c.expensive = split_list(an_expensive);
    c.aux = split_list(an_aux);
    c.adjust = split_list(an_adjust);
    c.intercept = !no_intercept;
    if (!an_config.empty()) {
      c = load_sidecar(an_config, "analyze");
      if (an_out->count()) c.out = an.out;
    }
    return cmd_analyze(c, out, log);
  } catch (const Error& e) {
    log << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kConfigError;
  }
}

}  // namespace tpu::cli
