#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hnervf/errors.hpp"
#include "hnervf/estimation.hpp"
#include "hnervf/io.hpp"
#include "hnervf/prediction.hpp"
#include "hnervf/simulation.hpp"

namespace hnervf::cli {

enum ExitCode : int {
  ok = 0,
  usage = 1,
  parse_failure = 2,
  schema_failure = 3,
  estimation_failure = 4,
  study_failure = 5,
  io_failure = 6,
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::parse: return parse_failure;
    case ErrorKind::schema:
    case ErrorKind::registry:
    case ErrorKind::shape: return schema_failure;
    case ErrorKind::study_failure: return study_failure;
    default: return estimation_failure;
  }
}

struct CommandArgs {
  std::string data;
  std::optional<std::string> config;
  std::string out = ".";
  std::string preset = "custom";
};

namespace detail {

inline std::ofstream open_output(const std::string& dir, const std::string& name) {
  std::filesystem::create_directories(dir);
  const auto path = std::filesystem::path(dir) / name;
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot write '" + path.string() + "'");
  return out;
}

template <class Body>
int guarded(const char* command, std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const Error& e) {
    err << command << ": " << (e.stage().empty() ? "" : e.stage() + ": ") << to_string(e.kind())
        << " error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::ios_base::failure& e) {
    err << command << ": " << e.what() << '\n';
    return io_failure;
  } catch (const std::filesystem::filesystem_error& e) {
    err << command << ": " << e.what() << '\n';
    return io_failure;
  }
}

inline io::RunConfig load_config(const CommandArgs& args, io::RunConfig base = {}) {
  if (!args.config) return base;
  return io::load_run_config(*args.config, std::move(base));
}

}  // namespace detail

/// Fits the model and writes the fit report.
inline int cmd_fit(const CommandArgs& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  return detail::guarded("fit", err, [&] {
    const io::RunConfig cfg = detail::load_config(args);
    const ClusteredDataset data = io::ingest(args.data);
    const FitResult res = fit(data, variance_function_by_name(cfg.variance_function), cfg.fit);
    auto f = detail::open_output(args.out, cfg.output.fit_report);
    f << io::fit_report(res, data, cfg.variance_function).dump(2) << '\n';
    io::print_estimates(out, res);
    if (!res.kurtosis_note.empty()) err << "fit: warning: " << res.kurtosis_note << '\n';
    return static_cast<int>(ok);
  });
}

/// Fits the model, then writes per-area EBLUPs and MSE estimates.
inline int cmd_predict(const CommandArgs& args, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  return detail::guarded("predict", err, [&] {
    const io::RunConfig cfg = detail::load_config(args);
    const ClusteredDataset data = io::ingest(args.data);
    const auto targets = io::resolve_targets(cfg, data);
    const FitResult res = fit(data, variance_function_by_name(cfg.variance_function), cfg.fit);
    const MseReport rep = predict_all(res, data, targets);
    {
      auto f = detail::open_output(args.out, cfg.output.fit_report);
      f << io::fit_report(res, data, cfg.variance_function).dump(2) << '\n';
    }
    auto f = detail::open_output(args.out, cfg.output.predict_report);
    io::write_predict_csv(f, rep);
    io::print_predict_table(out, rep);
    if (rep.kurtosis_fallback) {
      err << "predict: warning: kurtosis unavailable (" << rep.kurtosis_note
          << "); cross term evaluated at kappa = (3, 3)\n";
    }
    return static_cast<int>(ok);
  });
}

/// Runs a simulation study and writes long-format tables.
inline int cmd_simulate(const CommandArgs& args, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
  return detail::guarded("simulate", err, [&] {
    io::RunConfig base;
    base.study = io::study_preset(args.preset);
    const io::RunConfig cfg = detail::load_config(args, base);
    const io::StudyConfig& st = cfg.study;

    StudyOptions opts;
    opts.fit = cfg.fit;
    opts.threads = st.threads;
    opts.max_failure_rate = st.max_failure_rate;

    nlohmann::json meta;
    meta["preset"] = args.preset;
    meta["seed"] = cfg.seed;
    meta["models"] = nlohmann::json::array();

    if (st.kind == io::StudyKind::eblup_mse) {
      std::vector<EblupStudyResult> results;
      for (auto d : st.models) {
        results.push_back(run_eblup_mse_study(st.dgp(d, cfg.seed), st.replications, opts));
        meta["models"].push_back({{"model", to_string(d)},
                                  {"replications", results.back().replications},
                                  {"failed", results.back().failed}});
        out << to_string(d) << ": areas where HNERVF MSE < NER MSE: "
            << (results.back().mse_hnervf.array() < results.back().mse_ner.array()).count()
            << " of " << results.back().mse_hnervf.size() << '\n';
      }
      auto f = detail::open_output(args.out, cfg.output.study_report);
      io::write_eblup_study_csv(f, results);
    } else {
      std::vector<MseEstimatorStudyResult> results;
      for (auto d : st.models) {
        results.push_back(run_mse_estimator_study(st.dgp(d, cfg.seed), st.mse_replications,
                                                  st.estimator_replications, opts));
        const auto& r = results.back();
        meta["models"].push_back({{"model", to_string(d)},
                                  {"mse_replications", r.mse_replications},
                                  {"estimator_replications", r.estimator_replications},
                                  {"failed_mse_stage", r.failed_mse_stage},
                                  {"failed_estimator_stage", r.failed_estimator_stage}});
      }
      auto f = detail::open_output(args.out, cfg.output.study_report);
      io::write_estimator_study_csv(f, results);
      auto a = detail::open_output(args.out, "study_areas.csv");
      io::write_estimator_area_csv(a, results);
      io::print_estimator_table(out, results);
    }
    auto m = detail::open_output(args.out, "study_meta.json");
    m << meta.dump(2) << '\n';
    return static_cast<int>(ok);
  });
}

/// Parses argv and dispatches to a subcommand.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Nested error regression with variance functions: fit, predict, simulate"};
  app.require_subcommand(1);
  CommandArgs args;

  auto* fit_cmd = app.add_subcommand("fit", "Estimate parameters and write fit.json");
  auto* predict_cmd = app.add_subcommand("predict", "Fit, then write EBLUPs and MSE estimates");
  for (auto* sub : {fit_cmd, predict_cmd}) {
    sub->add_option("--data", args.data, "CSV with cluster_id,y,x1..xp,z1..zq")->required();
    sub->add_option("--config", args.config, "JSON run configuration");
    sub->add_option("--out", args.out, "Output directory");
  }
  auto* sim_cmd = app.add_subcommand("simulate", "Run a simulation study");
  sim_cmd->add_option("--preset", args.preset, "fig1, fig2, table1 or custom")
      ->check(CLI::IsMember({"fig1", "fig2", "table1", "custom"}));
  sim_cmd->add_option("--config", args.config, "JSON run configuration");
  sim_cmd->add_option("--out", args.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? static_cast<int>(ok) : static_cast<int>(usage);
  }
  if (fit_cmd->parsed()) return cmd_fit(args, out, err);
  if (predict_cmd->parsed()) return cmd_predict(args, out, err);
  return cmd_simulate(args, out, err);
}

}  // namespace hnervf::cli
