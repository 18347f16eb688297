// Command-line front end of the benchmark harness.

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dcpref/bench.hpp"
#include "dcpref/errors.hpp"
#include "dcpref/report.hpp"

int main(int argc, char** argv) {
  using namespace dcpref;
  CLI::App app{"Active preference-learning benchmarks"};
  app.require_subcommand(1);
  CLI::App* run = app.add_subcommand("run", "run a seeded experiment and write CSV/SVG outputs");

  std::string config_path, function = "2d", dataset, itinerary_path, coefficients_path, out = "bench_out";
  std::vector<std::string> models{"dgp1", "random"}, acqs{"pi"};
  int scenarios = 10, budget = 50, reps = 500, threads = 0, max_iterations = 0;
  std::uint64_t seed = 1;
  double zeta = 1e-4;
  std::string termination = "threshold_or_budget";

  run->add_option("--config", config_path, "JSON file mirroring the experiment config; flags given explicitly override it");
  run->add_option("--function", function, "latent function: 2d, 4d or 6d");
  run->add_option("--dataset", dataset, "use a dataset instead of a latent function (itinerary)");
  run->add_option("--itinerary-file", itinerary_path, "itinerary CSV (default: bundled synthetic file)");
  run->add_option("--coefficients", coefficients_path, "itinerary coefficient JSON (default: published values)");
  run->add_option("--model", models, "gp, dgp1, dgp5 or random; repeat or comma-separate")->delimiter(',');
  run->add_option("--acq", acqs, "pi or ucb; repeat or comma-separate")->delimiter(',');
  run->add_option("--scenarios", scenarios, "starting scenarios");
  run->add_option("--budget", budget, "queries per run");
  run->add_option("--baseline-reps", reps, "random-baseline repetitions per scenario");
  run->add_option("--seed", seed, "experiment seed");
  run->add_option("--threads", threads, "worker threads (0: all cores)");
  run->add_option("--zeta", zeta, "probability-improvement stopping threshold");
  run->add_option("--termination", termination, "threshold_or_budget or incumbent_in_pool");
  run->add_option("--max-iterations", max_iterations, "Adam iteration cap per fit (0: default)");
  run->add_option("--out", out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      if (!f) throw ConfigurationError("cannot open " + config_path);
      std::stringstream ss;
      ss << f.rdbuf();
      cfg = experiment_config_from_json(ss.str());
    }
    auto given = [&](const char* name) { return run->count(name) > 0 || config_path.empty(); };
    if (given("--function")) cfg.function = function;
    if (given("--dataset")) cfg.dataset = dataset;
    if (given("--itinerary-file")) cfg.itinerary_path = itinerary_path;
    if (given("--coefficients")) cfg.coefficients_path = coefficients_path;
    if (given("--model") || given("--acq") || cfg.methods.empty()) {
      cfg.methods.clear();
      for (const auto& m : models) {
        if (m == "random") {
          cfg.methods.push_back(method_from_label("random"));
          continue;
        }
        for (const auto& a : acqs) cfg.methods.push_back(method_from_label(m + "+" + a));
      }
    }
    if (given("--scenarios")) cfg.scenarios = scenarios;
    if (given("--budget")) cfg.budget = budget;
    if (given("--baseline-reps")) cfg.baseline_reps = reps;
    if (given("--seed")) cfg.seed = seed;
    if (given("--threads")) cfg.threads = threads;
    if (given("--zeta")) cfg.zeta = zeta;
    if (given("--termination")) {
      if (termination == "incumbent_in_pool") {
        cfg.termination = TerminationRule::incumbent_in_pool;
      } else if (termination == "threshold_or_budget") {
        cfg.termination = TerminationRule::threshold_or_budget;
      } else {
        throw ConfigurationError("unknown termination rule '" + termination + "'");
      }
    }
    if (run->count("--max-iterations") && max_iterations > 0) cfg.max_iterations = max_iterations;
    if (run->count("--out") || cfg.output_dir.empty()) cfg.output_dir = out;
    cfg.validate();

    const Problem problem = make_problem(cfg);
    std::cerr << problem.name << ": " << problem.instances.size() << " instances, " << problem.nest_count
              << " nests\n";
    const BenchmarkResult result = run_benchmark(cfg);
    write_outputs(result, problem);

    const MethodCurve* baseline = result.curve("random");
    for (const auto& c : result.curves) {
      std::cout << c.method << ": mean gap at t=" << cfg.budget << " is " << format_double(c.points.back().mean);
      if (baseline && c.method != "random") {
        std::vector<double> mean;
        for (const auto& p : c.points) mean.push_back(p.mean);
        const auto t = first_reaching(mean, baseline->points.back().mean);
        std::cout << "; reaches the random baseline's final gap at t=" << (t ? std::to_string(*t) : "never");
      }
      std::cout << '\n';
    }
    for (const auto& r : result.runs)
      if (!r.error.empty()) std::cerr << "scenario " << r.scenario << " " << r.method << " failed: " << r.error << '\n';
    std::cout << "outputs written to " << cfg.output_dir << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
