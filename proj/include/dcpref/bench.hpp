#pragma once

// Benchmark harness: seeded experiments over the synthetic latent functions
// or the itinerary bundle, a random-search baseline, relative-gap curves and
// their CSV/SVG outputs.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dcpref/acquisition.hpp"
#include "dcpref/active_loop.hpp"
#include "dcpref/surrogate.hpp"

namespace dcpref {

struct MethodSpec {
  bool random = false;
  SurrogateKind surrogate = SurrogateKind::dgp1;
  AcquisitionKind acquisition = AcquisitionKind::pi;

  /// "random" or e.g. "dgp1+pi".
  std::string label() const;
};

struct ExperimentConfig {
  std::string function = "2d";  // 2d, 4d or 6d; ignored when dataset is set
  std::string dataset;          // "itinerary" or empty
  std::string itinerary_path;   // empty: bundled synthetic file
  std::string coefficients_path;  // empty: bundled published coefficients
  std::vector<MethodSpec> methods;
  int scenarios = 10;
  int budget = 50;
  int baseline_reps = 500;
  std::uint64_t seed = 1;
  int threads = 0;  // 0: hardware concurrency
  double zeta = 1e-4;
  TerminationRule termination = TerminationRule::threshold_or_budget;
  std::optional<int> max_iterations;  // Adam iteration cap per fit
  std::string output_dir;

  /// Throws ConfigurationError.
  void validate() const;
};

/// Reads a JSON object whose keys mirror ExperimentConfig. `methods` is a
/// list of labels such as "gp+pi", "dgp5+ucb" or "random".
ExperimentConfig experiment_config_from_json(const std::string& text);
MethodSpec method_from_label(const std::string& label);

/// Mixes a parent seed with a stream index into an independent child seed.
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream);

struct Problem {
  std::string name;
  std::vector<Instance> instances;
  int nest_count = 0;
  std::vector<double> metric;          // value used for the relative gap
  std::vector<double> oracle_utility;  // utilities the comparator perturbs
  std::vector<double> lambdas;         // true nest scales
  double metric_max = 0.0;
  double metric_min = 0.0;

  double gap(InstanceId id) const;
  NestConfig nests() const;
};

/// Builds the instance pool, ground truth and true nest scales. Latent
/// function scales are drawn once from the experiment seed.
Problem make_problem(const ExperimentConfig& config);

/// A session after two-phase initialization, shared by every method.
struct Scenario {
  int index = 0;
  std::uint64_t seed = 0;
  InstanceId x_best = 0;
  std::vector<InstanceId> unlabeled;
};

Scenario make_scenario(const Problem& problem, const ExperimentConfig& config, int index);

struct RunResult {
  int scenario = 0;
  std::string method;
  std::vector<double> gaps;  // gap after queries 1..budget, padded after early stop
  std::vector<QueryRecord> trace;
  std::string error;         // non-empty when the run failed
};

/// Runs one model method from the scenario's initialized state.
RunResult run_method(const Problem& problem, const ExperimentConfig& config, const Scenario& scenario,
                     const MethodSpec& method);

/// Mean gap per query over `reps` random-search repetitions: each query
/// compares a uniformly drawn uncompared instance with the current best and
/// keeps the winner.
std::vector<double> random_baseline(const Problem& problem, const Scenario& scenario, int budget, int reps);

struct CurvePoint {
  int t = 0;
  double mean = 0.0;
  double sd = 0.0;
  int runs = 0;
};

struct MethodCurve {
  std::string method;
  std::vector<CurvePoint> points;  // exactly `budget` rows
};

struct BenchmarkResult {
  ExperimentConfig config;
  std::vector<RunResult> runs;  // scenario-major, methods in config order
  std::vector<MethodCurve> curves;

  const MethodCurve* curve(const std::string& method) const;
};

BenchmarkResult run_benchmark(const ExperimentConfig& config);

/// First query index t (1-based) whose value is at or below `target`, or
/// nullopt when never reached.
std::optional<int> first_reaching(const std::vector<double>& curve, double target);

void write_runs_csv(std::ostream& out, const BenchmarkResult& result);
void write_curves_csv(std::ostream& out, const BenchmarkResult& result);
void write_traces_csv(std::ostream& out, const BenchmarkResult& result, const Problem& problem);
/// Writes runs.csv, curves.csv, traces.csv and curves.svg into config.output_dir.
void write_outputs(const BenchmarkResult& result, const Problem& problem);

}  // namespace dcpref
