// bilevel-tune <subcommand> --config <path> [--out <dir>] [--seed <int>] [--scale desk|paper]
//
// Exit codes: 0 success, 2 configuration or input error, 3 solver error
// (outputs of the failed run are written before exiting).

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "bilevel/experiments.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitSolver = 3;

void print_tune(const std::vector<bilevel::VariantRun>& runs) {
  for (const auto& r : runs) {
    const auto& s = *r.result;
    fmt::print("{:>8}  theta = ({:+.4f}, {:+.4f})  F = {:.6f}  fista = {}  evals = {}\n",
               r.variant.name(), s.final_point.theta(0), s.final_point.theta(1),
               s.final_objective, s.cum_fista_iters, s.eval_count);
  }
}

}  // namespace

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  CLI::App app{"Bilevel hyperparameter tuning experiments"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string out_dir = "results";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> scale_name;
  for (const char* name : {"bounds-compare", "tune", "sweep", "validate"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON configuration file")->required();
    sub->add_option("--out", out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", seed, "seed for data splits (overrides the configuration)");
    sub->add_option("--scale", scale_name, "preset: desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const fs::path config_file(config_path);
    const std::string text = bilevel::read_text(config_file);
    bilevel::Scale scale = bilevel::Scale::desk;
    if (scale_name) {
      scale = bilevel::scale_from_string(*scale_name);
    } else if (auto named = bilevel::scale_in(text)) {
      scale = *named;
    }
    std::string body = text;
    if (scale_name) {
      auto doc = bilevel::Json::parse(text);
      doc.erase("scale");
      body = doc.dump();
    }
    bilevel::ExperimentConfig cfg =
        bilevel::parse_config(body, scale, fs::absolute(config_file).parent_path());
    if (seed) cfg.solver.seed = *seed;

    const fs::path out(out_dir);
    if (command == "bounds-compare") {
      const auto res = bilevel::cmd_bounds_compare(cfg, out);
      const auto& last = res.rows.back();
      fmt::print("mu = {}  L = {:.6g}  kappa = {:.6g}\n", res.mu, res.lipschitz,
                 res.lipschitz / res.mu);
      fmt::print("iteration {}: true {:.3e}  a posteriori {:.3e}  a priori {:.3e}\n", last.iter,
                 last.true_err_sq, last.aposteriori_bound, last.apriori_bound);
      fmt::print("a posteriori dominates: {}  a priori dominates: {}\n",
                 res.aposteriori_dominates(), res.apriori_dominates());
    } else if (command == "tune") {
      print_tune(bilevel::cmd_tune(cfg, out));
    } else if (command == "sweep") {
      const auto runs = bilevel::cmd_sweep(cfg, out);
      for (const auto& s : bilevel::sweep_spread(runs, cfg.variants)) {
        fmt::print("{:>8}  spread theta1 = {:.4f}  theta2 = {:.4f}\n", s.variant.name(), s.theta1,
                   s.theta2);
      }
    } else {
      const auto entries = bilevel::cmd_validate(cfg, out);
      fmt::print("{} accuracies written\n", entries.size());
    }
    fmt::print("outputs in {}\n", out.string());
    return 0;
  } catch (const bilevel::SolverError& e) {
    std::cerr << "solver error: " << e.what() << '\n';
    return kExitSolver;
  } catch (const bilevel::Error& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const bilevel::Json::exception& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  }
}
