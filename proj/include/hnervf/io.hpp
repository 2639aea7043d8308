#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "hnervf/dataset.hpp"
#include "hnervf/errors.hpp"
#include "hnervf/estimation.hpp"
#include "hnervf/prediction.hpp"
#include "hnervf/simulation.hpp"

namespace hnervf::io {

using nlohmann::json;

// -------------------------------------------------------------------------
// Number formatting
// -------------------------------------------------------------------------

/// 17 significant digits: enough to reproduce any double exactly.
inline std::string format_exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_fixed(double v, int decimals = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

// -------------------------------------------------------------------------
// CSV
// -------------------------------------------------------------------------

/// Header names for the cluster id and response, and prefixes of the
/// numbered regression (x1..xp) and variance (z1..zq) covariates.
struct ColumnMapping {
  std::string cluster = "cluster_id";
  std::string response = "y";
  std::string x_prefix = "x";
  std::string z_prefix = "z";
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t k = 0; k <= line.size(); ++k) {
    if (k == line.size() || line[k] == ',') {
      out.push_back(trim(line.substr(start, k - start)));
      start = k + 1;
    }
  }
  return out;
}

/// Index k >= 1 if `name` is prefix followed by a positive integer.
inline std::optional<int> numbered(std::string_view name, std::string_view prefix) {
  if (name.size() <= prefix.size() || name.substr(0, prefix.size()) != prefix) {
    return std::nullopt;
  }
  const std::string_view digits = name.substr(prefix.size());
  int k = 0;
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), k);
  if (ec != std::errc() || ptr != digits.data() + digits.size() || k < 1 || digits[0] == '0') {
    return std::nullopt;
  }
  return k;
}

inline double parse_number(std::string_view cell, std::size_t line, const std::string& column,
                           const std::string& source) {
  double v = 0.0;
  std::string_view s = cell;
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw Error(ErrorKind::parse, source + ":" + std::to_string(line) + ": column '" + column +
                                      "' is not a finite number: '" + std::string(cell) + "'");
  }
  return v;
}

/// Resolves numbered columns prefix1..prefixK; they must be consecutive.
inline std::vector<std::size_t> numbered_columns(const std::vector<std::string>& header,
                                                 const std::string& prefix,
                                                 std::vector<bool>& used) {
  std::map<int, std::size_t> found;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (auto k = numbered(header[c], prefix)) {
      if (!found.emplace(*k, c).second) {
        throw Error(ErrorKind::schema, "duplicate column '" + header[c] + "'");
      }
      used[c] = true;
    }
  }
  std::vector<std::size_t> cols;
  int expected = 1;
  for (const auto& [k, c] : found) {
    if (k != expected) {
      throw Error(ErrorKind::schema, "missing column '" + prefix + std::to_string(expected) + "'");
    }
    cols.push_back(c);
    ++expected;
  }
  if (cols.empty()) {
    throw Error(ErrorKind::schema, "missing column '" + prefix + "1'");
  }
  return cols;
}

}  // namespace detail

/// Reads `cluster_id,y,x1..xp,z1..zq`. Clusters are ordered by first
/// appearance; rows of a cluster keep file order even when its rows are not
/// contiguous.
inline ClusteredDataset read_csv(std::istream& in, const ColumnMapping& map = {},
                                 const std::string& source = "<input>") {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    for (auto f : detail::split_fields(line)) header.emplace_back(f);
    break;
  }
  if (header.empty()) throw Error(ErrorKind::parse, source + ": missing header line");

  std::vector<bool> used(header.size(), false);
  auto find = [&](const std::string& name) {
    std::optional<std::size_t> at;
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (header[c] == name) {
        if (at) throw Error(ErrorKind::schema, "duplicate column '" + name + "'");
        at = c;
      }
    }
    if (!at) throw Error(ErrorKind::schema, "missing column '" + name + "'");
    used[*at] = true;
    return *at;
  };
  const std::size_t id_col = find(map.cluster);
  const std::size_t y_col = find(map.response);
  const auto x_cols = detail::numbered_columns(header, map.x_prefix, used);
  const auto z_cols = detail::numbered_columns(header, map.z_prefix, used);
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (!used[c]) throw Error(ErrorKind::schema, "unexpected column '" + header[c] + "'");
  }
  const auto p = static_cast<Eigen::Index>(x_cols.size());
  const auto q = static_cast<Eigen::Index>(z_cols.size());

  struct Rows {
    std::vector<double> y, x, z;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Rows> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_fields(line);
    if (fields.size() != header.size()) {
      throw Error(ErrorKind::parse, source + ":" + std::to_string(line_no) + ": expected " +
                                        std::to_string(header.size()) + " fields, found " +
                                        std::to_string(fields.size()));
    }
    const std::string id(fields[id_col]);
    if (id.empty()) {
      throw Error(ErrorKind::parse, source + ":" + std::to_string(line_no) + ": empty cluster id");
    }
    auto [it, inserted] = rows.try_emplace(id);
    if (inserted) order.push_back(id);
    Rows& r = it->second;
    r.y.push_back(detail::parse_number(fields[y_col], line_no, header[y_col], source));
    for (auto c : x_cols) r.x.push_back(detail::parse_number(fields[c], line_no, header[c], source));
    for (auto c : z_cols) r.z.push_back(detail::parse_number(fields[c], line_no, header[c], source));
  }
  if (order.empty()) throw Error(ErrorKind::parse, source + ": no data rows");

  std::vector<Cluster> clusters;
  clusters.reserve(order.size());
  for (const auto& id : order) {
    const Rows& r = rows.at(id);
    const auto n = static_cast<Eigen::Index>(r.y.size());
    Cluster c;
    c.id = id;
    c.y = Eigen::Map<const VectorXd>(r.y.data(), n);
    c.X = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        r.x.data(), n, p);
    c.Z = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        r.z.data(), n, q);
    clusters.push_back(std::move(c));
  }
  try {
    return ClusteredDataset(std::move(clusters), p, q);
  } catch (const Error& e) {
    throw Error(ErrorKind::schema, source + ": " + e.what());
  }
}

inline ClusteredDataset ingest(const std::string& path, const ColumnMapping& map = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::parse, "cannot open data file '" + path + "'");
  return read_csv(in, map, path);
}

inline void write_csv(std::ostream& out, const ClusteredDataset& data,
                      const ColumnMapping& map = {}) {
  out << map.cluster << ',' << map.response;
  for (Eigen::Index k = 1; k <= data.p(); ++k) out << ',' << map.x_prefix << k;
  for (Eigen::Index k = 1; k <= data.q(); ++k) out << ',' << map.z_prefix << k;
  out << '\n';
  for (const auto& c : data.clusters()) {
    for (Eigen::Index j = 0; j < c.size(); ++j) {
      out << c.id << ',' << format_exact(c.y(j));
      for (Eigen::Index k = 0; k < data.p(); ++k) out << ',' << format_exact(c.X(j, k));
      for (Eigen::Index k = 0; k < data.q(); ++k) out << ',' << format_exact(c.Z(j, k));
      out << '\n';
    }
  }
}

// -------------------------------------------------------------------------
// Run configuration
// -------------------------------------------------------------------------

enum class StudyKind { eblup_mse, mse_estimator };

struct StudyConfig {
  StudyKind kind = StudyKind::eblup_mse;
  std::vector<EffectDistribution> models{EffectDistribution::M1};
  std::string design = "constant";  // "constant" or "grouped"
  std::size_t m = 20;
  Eigen::Index n = 8;
  int groups = 4;
  int areas_per_group = 5;
  double beta0 = 1.0, beta1 = 0.8, tau = 1.2, gamma0 = 1.0, gamma1 = -0.4;
  double x_lo = 0.0, x_hi = 2.0, z_lo = 0.0, z_hi = 5.0;
  ChiVariant chi = ChiVariant::chi_squared;
  std::size_t replications = 10000;
  std::size_t mse_replications = 10000;
  std::size_t estimator_replications = 5000;
  unsigned threads = 0;
  double max_failure_rate = 0.01;

  DgpConfig dgp(EffectDistribution d, std::uint64_t seed) const {
    DgpConfig c = design == "grouped" ? DgpConfig::grouped_design(groups, areas_per_group)
                                      : DgpConfig::constant_design(m, n);
    c.beta0 = beta0;
    c.beta1 = beta1;
    c.tau = tau;
    c.gamma0 = gamma0;
    c.gamma1 = gamma1;
    c.x_lo = x_lo;
    c.x_hi = x_hi;
    c.z_lo = z_lo;
    c.z_hi = z_hi;
    c.chi = chi;
    c.distribution = d;
    c.seed = seed;
    return c;
  }
};

struct OutputNames {
  std::string fit_report = "fit.json";
  std::string predict_report = "predict.csv";
  std::string study_report = "study.csv";
};

struct RunConfig {
  std::string variance_function = "exponential";
  FitOptions fit;
  std::map<std::string, VectorXd> targets;
  StudyConfig study;
  OutputNames output;
  std::uint64_t seed = 20240607;
};

/// Study defaults for the named presets.
inline StudyConfig study_preset(const std::string& name) {
  StudyConfig s;
  s.models = all_distributions();
  if (name == "fig1") {
    s.kind = StudyKind::eblup_mse;
    s.gamma1 = -0.4;
  } else if (name == "fig2") {
    s.kind = StudyKind::eblup_mse;
    s.gamma1 = 0.0;
  } else if (name == "table1") {
    s.kind = StudyKind::mse_estimator;
    s.design = "grouped";
  } else if (name == "custom") {
    s.models = {EffectDistribution::M1};
  } else {
    throw Error(ErrorKind::schema, "unknown preset '" + name + "'");
  }
  return s;
}

namespace detail {

inline void reject_unknown(const json& obj, std::initializer_list<const char*> allowed,
                           const std::string& where) {
  if (!obj.is_object()) throw Error(ErrorKind::schema, where + " must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw Error(ErrorKind::schema, "unknown config key '" + where + "." + it.key() + "'");
  }
}

template <class T>
T get_as(const json& j, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorKind::schema, "config value '" + where + "' has the wrong type");
  }
}

inline VectorXd get_vector(const json& j, const std::string& where) {
  const auto v = get_as<std::vector<double>>(j, where);
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::pair<double, double> get_range(const json& j, const std::string& where) {
  const auto v = get_as<std::vector<double>>(j, where);
  if (v.size() != 2) throw Error(ErrorKind::schema, "'" + where + "' must have two entries");
  return {v[0], v[1]};
}

inline std::size_t get_count(const json& j, const std::string& where) {
  const auto v = get_as<long long>(j, where);
  if (v < 1) throw Error(ErrorKind::schema, "'" + where + "' must be a positive integer");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

/// Overlays a parsed JSON config on `base`. Unknown keys are rejected.
inline RunConfig parse_run_config(const json& j, RunConfig base = {}) {
  using detail::get_as;
  RunConfig cfg = std::move(base);
  if (j.is_null()) return cfg;
  detail::reject_unknown(j, {"variance_function", "fit", "targets", "study", "output", "seed"},
                         "config");
  if (j.contains("variance_function")) {
    cfg.variance_function = get_as<std::string>(j["variance_function"], "variance_function");
    variance_function_by_name(cfg.variance_function);
  }
  if (j.contains("seed")) cfg.seed = get_as<std::uint64_t>(j["seed"], "seed");

  if (j.contains("fit")) {
    const json& f = j["fit"];
    detail::reject_unknown(f,
                           {"gamma_init", "max_newton_iters", "newton_tol", "tau2_truncation",
                            "bias_formula", "kurtosis_coefficient"},
                           "fit");
    if (f.contains("gamma_init")) {
      if (f["gamma_init"].is_string()) {
        if (f["gamma_init"].get<std::string>() != "auto") {
          throw Error(ErrorKind::schema, "fit.gamma_init must be \"auto\" or an array");
        }
        cfg.fit.gamma_init.reset();
      } else {
        cfg.fit.gamma_init = detail::get_vector(f["gamma_init"], "fit.gamma_init");
      }
    }
    if (f.contains("max_newton_iters")) {
      cfg.fit.max_newton_iters = get_as<int>(f["max_newton_iters"], "fit.max_newton_iters");
    }
    if (f.contains("newton_tol")) cfg.fit.newton_tol = get_as<double>(f["newton_tol"], "fit.newton_tol");
    if (f.contains("tau2_truncation")) {
      cfg.fit.tau2_truncation = get_as<bool>(f["tau2_truncation"], "fit.tau2_truncation");
    }
    if (f.contains("bias_formula")) {
      const auto s = get_as<std::string>(f["bias_formula"], "fit.bias_formula");
      if (s == "published") {
        cfg.fit.bias_formula = BiasFormula::published;
      } else if (s == "rederived") {
        cfg.fit.bias_formula = BiasFormula::rederived;
      } else {
        throw Error(ErrorKind::schema, "fit.bias_formula must be \"published\" or \"rederived\"");
      }
    }
    if (f.contains("kurtosis_coefficient")) {
      const auto s = get_as<std::string>(f["kurtosis_coefficient"], "fit.kurtosis_coefficient");
      if (s == "exact") {
        cfg.fit.kurtosis_coefficient = KurtosisCoefficient::exact;
      } else if (s == "published") {
        cfg.fit.kurtosis_coefficient = KurtosisCoefficient::published;
      } else {
        throw Error(ErrorKind::schema,
                    "fit.kurtosis_coefficient must be \"exact\" or \"published\"");
      }
    }
    cfg.fit.validate();
  }

  if (j.contains("targets")) {
    const json& t = j["targets"];
    if (!t.is_object()) throw Error(ErrorKind::schema, "targets must be an object");
    for (auto it = t.begin(); it != t.end(); ++it) {
      cfg.targets[it.key()] = detail::get_vector(it.value(), "targets." + it.key());
    }
  }

  if (j.contains("study")) {
    const json& s = j["study"];
    detail::reject_unknown(
        s,
        {"kind", "models", "design", "m", "n", "groups", "areas_per_group", "beta", "tau",
         "gamma", "x_range", "z_range", "chi_variant", "replications", "mse_replications",
         "estimator_replications", "threads", "max_failure_rate"},
        "study");
    StudyConfig& st = cfg.study;
    if (s.contains("kind")) {
      const auto k = get_as<std::string>(s["kind"], "study.kind");
      if (k == "eblup_mse") {
        st.kind = StudyKind::eblup_mse;
      } else if (k == "mse_estimator") {
        st.kind = StudyKind::mse_estimator;
      } else {
        throw Error(ErrorKind::schema, "study.kind must be \"eblup_mse\" or \"mse_estimator\"");
      }
    }
    if (s.contains("models")) {
      st.models.clear();
      for (const auto& name : get_as<std::vector<std::string>>(s["models"], "study.models")) {
        try {
          st.models.push_back(distribution_by_name(name));
        } catch (const Error& e) {
          throw Error(ErrorKind::schema, e.what());
        }
      }
      if (st.models.empty()) throw Error(ErrorKind::schema, "study.models is empty");
    }
    if (s.contains("design")) {
      st.design = get_as<std::string>(s["design"], "study.design");
      if (st.design != "constant" && st.design != "grouped") {
        throw Error(ErrorKind::schema, "study.design must be \"constant\" or \"grouped\"");
      }
    }
    if (s.contains("m")) st.m = detail::get_count(s["m"], "study.m");
    if (s.contains("n")) st.n = static_cast<Eigen::Index>(detail::get_count(s["n"], "study.n"));
    if (s.contains("groups")) st.groups = static_cast<int>(detail::get_count(s["groups"], "study.groups"));
    if (s.contains("areas_per_group")) {
      st.areas_per_group =
          static_cast<int>(detail::get_count(s["areas_per_group"], "study.areas_per_group"));
    }
    if (s.contains("beta")) std::tie(st.beta0, st.beta1) = detail::get_range(s["beta"], "study.beta");
    if (s.contains("gamma")) {
      std::tie(st.gamma0, st.gamma1) = detail::get_range(s["gamma"], "study.gamma");
    }
    if (s.contains("tau")) st.tau = get_as<double>(s["tau"], "study.tau");
    if (s.contains("x_range")) std::tie(st.x_lo, st.x_hi) = detail::get_range(s["x_range"], "study.x_range");
    if (s.contains("z_range")) std::tie(st.z_lo, st.z_hi) = detail::get_range(s["z_range"], "study.z_range");
    if (s.contains("chi_variant")) {
      const auto c = get_as<std::string>(s["chi_variant"], "study.chi_variant");
      if (c == "chi_squared") {
        st.chi = ChiVariant::chi_squared;
      } else if (c == "chi") {
        st.chi = ChiVariant::chi;
      } else {
        throw Error(ErrorKind::schema, "study.chi_variant must be \"chi_squared\" or \"chi\"");
      }
    }
    if (s.contains("replications")) st.replications = detail::get_count(s["replications"], "study.replications");
    if (s.contains("mse_replications")) {
      st.mse_replications = detail::get_count(s["mse_replications"], "study.mse_replications");
    }
    if (s.contains("estimator_replications")) {
      st.estimator_replications =
          detail::get_count(s["estimator_replications"], "study.estimator_replications");
    }
    if (s.contains("threads")) st.threads = static_cast<unsigned>(detail::get_count(s["threads"], "study.threads"));
    if (s.contains("max_failure_rate")) {
      st.max_failure_rate = get_as<double>(s["max_failure_rate"], "study.max_failure_rate");
      if (!(st.max_failure_rate >= 0.0 && st.max_failure_rate <= 1.0)) {
        throw Error(ErrorKind::schema, "study.max_failure_rate must lie in [0, 1]");
      }
    }
    if (!(st.tau > 0.0)) throw Error(ErrorKind::schema, "study.tau must be positive");
  }

  if (j.contains("output")) {
    const json& o = j["output"];
    detail::reject_unknown(o, {"fit_report", "predict_report", "study_report"}, "output");
    if (o.contains("fit_report")) cfg.output.fit_report = get_as<std::string>(o["fit_report"], "output.fit_report");
    if (o.contains("predict_report")) {
      cfg.output.predict_report = get_as<std::string>(o["predict_report"], "output.predict_report");
    }
    if (o.contains("study_report")) {
      cfg.output.study_report = get_as<std::string>(o["study_report"], "output.study_report");
    }
  }
  return cfg;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::parse, "cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::parse, "config '" + path + "': " + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = {}) {
  return parse_run_config(read_json_file(path), std::move(base));
}

/// One target vector per cluster: configured ones by id, covariate means
/// otherwise.
inline std::vector<VectorXd> resolve_targets(const RunConfig& cfg, const ClusteredDataset& data) {
  std::vector<VectorXd> out;
  out.reserve(data.m());
  std::size_t matched = 0;
  for (const auto& c : data.clusters()) {
    auto it = cfg.targets.find(c.id);
    if (it == cfg.targets.end()) {
      out.push_back(c.x_mean());
      continue;
    }
    if (it->second.size() != data.p()) {
      throw Error(ErrorKind::schema, "target for cluster '" + c.id + "' has the wrong length");
    }
    out.push_back(it->second);
    ++matched;
  }
  if (matched != cfg.targets.size()) {
    throw Error(ErrorKind::schema, "targets name clusters that are not in the data");
  }
  return out;
}

// -------------------------------------------------------------------------
// Reports
// -------------------------------------------------------------------------

inline json to_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline json to_json(const MatrixXd& M) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) rows.push_back(to_json(VectorXd(M.row(r).transpose())));
  return rows;
}

inline json fit_report(const FitResult& fit, const ClusteredDataset& data,
                       const std::string& variance_function) {
  json j;
  j["variance_function"] = variance_function;
  j["dimensions"] = {{"m", data.m()}, {"N", data.N()}, {"p", data.p()}, {"q", data.q()}};
  j["estimates"] = {{"beta", to_json(fit.params.beta)},
                    {"gamma", to_json(fit.params.gamma)},
                    {"tau2", fit.params.tau2}};
  if (fit.omega) {
    std::vector<std::string> order;
    for (Eigen::Index k = 1; k <= data.p(); ++k) order.push_back("beta" + std::to_string(k));
    for (Eigen::Index k = 1; k <= data.q(); ++k) order.push_back("gamma" + std::to_string(k));
    order.push_back("tau2");
    j["omega"] = {{"order", order}, {"matrix", to_json(fit.omega->full)}};
  }
  if (fit.bias) {
    j["bias"] = {{"beta", to_json(fit.bias->b_beta)},
                 {"gamma", to_json(fit.bias->b_gamma)},
                 {"tau2", fit.bias->b_tau},
                 {"formula", fit.options.bias_formula == BiasFormula::published ? "published"
                                                                               : "rederived"}};
  }
  if (fit.kurtosis) {
    j["kurtosis"] = {{"kappa_v", fit.kurtosis->kappa_v},
                     {"kappa_eps", fit.kurtosis->kappa_eps},
                     {"coefficient", fit.options.kurtosis_coefficient == KurtosisCoefficient::exact
                                         ? "exact"
                                         : "published"}};
  } else {
    j["kurtosis"] = nullptr;
    j["kurtosis_note"] = fit.kurtosis_note;
  }
  j["diagnostics"] = {{"beta_ols", to_json(fit.beta_ols)},
                      {"gamma_init", to_json(fit.gamma_solve.gamma_init)},
                      {"newton_iterations", fit.gamma_solve.iterations},
                      {"gamma_residual", fit.gamma_solve.residual_norm},
                      {"tau2_raw", fit.tau2.raw},
                      {"tau2_truncated", fit.tau2.truncated},
                      {"variance_floored", fit.variance_floored}};
  return j;
}

/// Display table of the parameter estimates (two decimals).
inline void print_estimates(std::ostream& out, const FitResult& fit) {
  out << "parameter   estimate\n";
  for (Eigen::Index k = 0; k < fit.params.beta.size(); ++k) {
    out << "beta" << k + 1 << "       " << format_fixed(fit.params.beta(k)) << '\n';
  }
  for (Eigen::Index k = 0; k < fit.params.gamma.size(); ++k) {
    out << "gamma" << k + 1 << "      " << format_fixed(fit.params.gamma(k)) << '\n';
  }
  out << "tau2        " << format_fixed(fit.params.tau2) << (fit.tau2.truncated ? " (truncated)" : "")
      << '\n';
}

inline std::string row_flags(const MseRow& r) {
  std::string f;
  auto add = [&](const char* s) {
    if (!f.empty()) f += ';';
    f += s;
  };
  if (r.tau2_degenerate) add("tau2_zero");
  if (r.kurtosis_fallback) add("kurtosis_fallback");
  if (r.clipped) add("clipped");
  return f;
}

inline void write_predict_csv(std::ostream& out, const MseReport& rep) {
  out << "cluster_id,n,sample_mean,eblup,smse,naive_smse,dif,mse,naive_mse,r1_plugin,r1_bias,"
         "r1_corrected,r2,r31,flags\n";
  for (const auto& r : rep.rows) {
    out << r.cluster_id << ',' << r.n << ',' << format_exact(r.sample_mean) << ','
        << format_exact(r.eblup) << ',' << format_exact(r.smse()) << ','
        << format_exact(r.naive_smse()) << ',' << format_exact(r.dif) << ','
        << format_exact(r.mse) << ',' << format_exact(r.naive_mse) << ','
        << format_exact(r.r1_plugin) << ',' << format_exact(r.r1_bias) << ','
        << format_exact(r.r1_corrected) << ',' << format_exact(r.r2) << ','
        << format_exact(r.r31) << ',' << row_flags(r) << '\n';
  }
}

inline void print_predict_table(std::ostream& out, const MseReport& rep) {
  out << "area  n   mean    EBLUP   SMSE   naive   dif\n";
  for (const auto& r : rep.rows) {
    out << r.cluster_id << "  " << r.n << "  " << format_fixed(r.sample_mean) << "  "
        << format_fixed(r.eblup) << "  " << format_fixed(r.smse()) << "  "
        << format_fixed(r.naive_smse()) << "  " << format_fixed(r.dif) << '\n';
  }
}

/// Long format: model,area,n,method,mse.
inline void write_eblup_study_csv(std::ostream& out,
                                  const std::vector<EblupStudyResult>& results) {
  out << "model,area,n,method,mse\n";
  for (const auto& res : results) {
    const char* model = to_string(res.config.distribution);
    for (Eigen::Index i = 0; i < res.mse_hnervf.size(); ++i) {
      const auto n = res.config.sizes[static_cast<std::size_t>(i)];
      out << model << ',' << i + 1 << ',' << n << ",HNERVF," << format_exact(res.mse_hnervf(i))
          << '\n';
      out << model << ',' << i + 1 << ',' << n << ",NER," << format_exact(res.mse_ner(i)) << '\n';
    }
  }
}

/// Long format: model,group,statistic,value with statistic in {RB, CV, RBN}
/// (percentages, group means).
inline void write_estimator_study_csv(std::ostream& out,
                                      const std::vector<MseEstimatorStudyResult>& results) {
  out << "model,group,statistic,value\n";
  for (const auto& res : results) {
    const char* model = to_string(res.config.distribution);
    for (const auto& g : res.groups) {
      out << model << ",G" << g.group << ",RB," << format_exact(g.rb) << '\n';
      out << model << ",G" << g.group << ",CV," << format_exact(g.cv) << '\n';
      out << model << ",G" << g.group << ",RBN," << format_exact(g.rbn) << '\n';
    }
  }
}

/// Per-area detail of the estimator study (fractions, not percentages).
inline void write_estimator_area_csv(std::ostream& out,
                                     const std::vector<MseEstimatorStudyResult>& results) {
  out << "model,area,group,n,true_mse,rb,cv,rbn,cvn\n";
  for (const auto& res : results) {
    const char* model = to_string(res.config.distribution);
    for (Eigen::Index i = 0; i < res.true_mse.size(); ++i) {
      const auto k = static_cast<std::size_t>(i);
      const int group = res.config.groups.empty() ? 1 : res.config.groups[k];
      out << model << ',' << i + 1 << ",G" << group << ',' << res.config.sizes[k] << ','
          << format_exact(res.true_mse(i)) << ',' << format_exact(res.rb(i)) << ','
          << format_exact(res.cv(i)) << ',' << format_exact(res.rbn(i)) << ','
          << format_exact(res.cvn(i)) << '\n';
    }
  }
}

/// Group table in the RB / CV / RBN layout with two decimals.
inline void print_estimator_table(std::ostream& out,
                                  const std::vector<MseEstimatorStudyResult>& results) {
  if (results.empty()) return;
  out << "Model";
  for (const auto& g : results.front().groups) {
    out << " | G" << g.group << ": RB CV RBN";
  }
  out << '\n';
  for (const auto& res : results) {
    out << to_string(res.config.distribution);
    for (const auto& g : res.groups) {
      out << " | " << format_fixed(g.rb) << ' ' << format_fixed(g.cv) << ' '
          << format_fixed(g.rbn);
    }
    out << '\n';
  }
}

}  // namespace hnervf::io
