#include "dcpref/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <thread>

#include <nlohmann/json.hpp>

#include "dcpref/errors.hpp"
#include "dcpref/itinerary.hpp"
#include "dcpref/latent_functions.hpp"
#include "dcpref/report.hpp"

namespace dcpref {

namespace {

constexpr std::uint64_t kLambdaStream = 0x6c616d626461ULL;
constexpr std::uint64_t kInitOracleStream = 1;
constexpr std::uint64_t kRandomStream = 2;

void run_pool(std::size_t tasks, int threads, const std::function<void(std::size_t)>& work) {
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(tasks)));
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < tasks; i = next++) work(i);
  };
  if (n == 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  for (int k = 0; k < n; ++k) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

LoopConfig loop_config(const ExperimentConfig& config, const MethodSpec& method, std::uint64_t seed) {
  LoopConfig lc;
  lc.surrogate = method.surrogate;
  lc.acquisition = method.acquisition;
  lc.zeta = config.zeta;
  lc.budget = config.budget;
  lc.seed = seed;
  lc.termination = config.termination;
  if (config.max_iterations) lc.surrogate_config.adam.max_iterations = *config.max_iterations;
  return lc;
}

std::vector<double> pad_gaps(const Problem& problem, InstanceId start, const std::vector<QueryRecord>& trace,
                             int budget) {
  std::vector<double> gaps;
  InstanceId best = start;
  for (int t = 0; t < budget; ++t) {
    if (static_cast<std::size_t>(t) < trace.size()) best = trace[static_cast<std::size_t>(t)].x_best;
    gaps.push_back(problem.gap(best));
  }
  return gaps;
}

}  // namespace

std::string MethodSpec::label() const {
  if (random) return "random";
  return to_string(surrogate) + "+" + to_string(acquisition);
}

MethodSpec method_from_label(const std::string& label) {
  MethodSpec m;
  if (label == "random") {
    m.random = true;
    return m;
  }
  const auto plus = label.find('+');
  if (plus == std::string::npos) throw ConfigurationError("method '" + label + "' must look like model+acquisition");
  try {
    m.surrogate = surrogate_kind_from_string(label.substr(0, plus));
    m.acquisition = acquisition_kind_from_string(label.substr(plus + 1));
  } catch (const Error& e) {
    throw ConfigurationError("method '" + label + "': " + e.what());
  }
  return m;
}

void ExperimentConfig::validate() const {
  if (scenarios < 1) throw ConfigurationError("scenarios must be at least 1");
  if (budget < 1) throw ConfigurationError("budget must be at least 1");
  if (baseline_reps < 1) throw ConfigurationError("baseline repetitions must be at least 1");
  if (methods.empty()) throw ConfigurationError("at least one method is required");
  if (zeta < 0.0) throw ConfigurationError("zeta must be non-negative");
  if (!dataset.empty() && dataset != "itinerary") throw ConfigurationError("unknown dataset '" + dataset + "'");
  if (dataset.empty()) latent_spec(function);
  if (max_iterations && *max_iterations < 1) throw ConfigurationError("max_iterations must be positive");
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
  ExperimentConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ConfigurationError("experiment config must be a JSON object");
    static const std::vector<std::string> known{"function", "dataset", "itinerary_path", "coefficients_path",
                                                "methods", "scenarios", "budget", "baseline_reps", "seed",
                                                "threads", "zeta", "termination", "max_iterations", "output_dir"};
    for (const auto& [key, _] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw ConfigurationError("unknown config key '" + key + "'");
      }
    }
    c.function = j.value("function", c.function);
    c.dataset = j.value("dataset", c.dataset);
    c.itinerary_path = j.value("itinerary_path", c.itinerary_path);
    c.coefficients_path = j.value("coefficients_path", c.coefficients_path);
    for (const auto& m : j.value("methods", std::vector<std::string>{})) c.methods.push_back(method_from_label(m));
    c.scenarios = j.value("scenarios", c.scenarios);
    c.budget = j.value("budget", c.budget);
    c.baseline_reps = j.value("baseline_reps", c.baseline_reps);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    c.zeta = j.value("zeta", c.zeta);
    const std::string term = j.value("termination", std::string("threshold_or_budget"));
    if (term == "threshold_or_budget") {
      c.termination = TerminationRule::threshold_or_budget;
    } else if (term == "incumbent_in_pool") {
      c.termination = TerminationRule::incumbent_in_pool;
    } else {
      throw ConfigurationError("unknown termination rule '" + term + "'");
    }
    if (j.contains("max_iterations")) c.max_iterations = j.at("max_iterations").get<int>();
    c.output_dir = j.value("output_dir", c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError(std::string("invalid experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t stream) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(parent ^ mix(stream + 0x632be59bd9b4e019ULL));
}

double Problem::gap(InstanceId id) const {
  const double range = metric_max - metric_min;
  if (range <= 0.0) return 0.0;
  return (metric_max - metric.at(static_cast<std::size_t>(id))) / range;
}

NestConfig Problem::nests() const {
  NestConfig n;
  n.lambdas = lambdas;
  for (const auto& inst : instances) n.membership.push_back(inst.nest_id);
  return n;
}

Problem make_problem(const ExperimentConfig& config) {
  Problem p;
  if (config.dataset == "itinerary") {
    const std::string path =
        config.itinerary_path.empty() ? std::string(DCPREF_DATA_DIR) + "/itineraries_synthetic.csv" : config.itinerary_path;
    const auto its = load_itineraries(path);
    const auto coeffs =
        config.coefficients_path.empty() ? ItineraryCoefficients::published() : load_coefficients(config.coefficients_path);
    const auto prob = nl_choice_prob(its, coeffs);
    p.name = "itinerary";
    p.instances = itinerary_instances(its);
    p.nest_count = kItineraryNestCount;
    for (std::size_t i = 0; i < its.size(); ++i) {
      p.metric.push_back(std::log(prob[i]));
      p.oracle_utility.push_back(utility(its[i], coeffs));
    }
    p.lambdas.assign(kItineraryNestCount, coeffs.logsum);
  } else {
    const auto spec = latent_spec(config.function);
    Grid grid = build_grid(spec);
    Rng rng(derive_seed(config.seed, kLambdaStream));
    p.name = spec.name;
    p.instances = std::move(grid.instances);
    p.nest_count = grid.nest_count;
    p.metric = grid.values;
    p.oracle_utility = std::move(grid.values);
    p.lambdas = sample_lambdas(grid.nest_center_value, rng);
  }
  if (p.instances.empty()) throw ConfigurationError("problem has no instances");
  p.metric_max = *std::max_element(p.metric.begin(), p.metric.end());
  p.metric_min = *std::min_element(p.metric.begin(), p.metric.end());
  return p;
}

namespace {

Session initialized_session(const Problem& problem, const ExperimentConfig& config, const MethodSpec& method,
                            std::uint64_t scenario_seed, NestedLogitOracle& oracle) {
  Session s(problem.instances, problem.nest_count, loop_config(config, method, scenario_seed));
  s.initialize(oracle);
  return s;
}

}  // namespace

Scenario make_scenario(const Problem& problem, const ExperimentConfig& config, int index) {
  Scenario sc;
  sc.index = index;
  sc.seed = derive_seed(config.seed, static_cast<std::uint64_t>(index));
  NestedLogitOracle oracle(problem.oracle_utility, problem.nests(), derive_seed(sc.seed, kInitOracleStream));
  MethodSpec any;
  const Session s = initialized_session(problem, config, any, sc.seed, oracle);
  sc.x_best = s.x_best();
  sc.unlabeled = s.unlabeled();
  return sc;
}

RunResult run_method(const Problem& problem, const ExperimentConfig& config, const Scenario& scenario,
                     const MethodSpec& method) {
  RunResult r;
  r.scenario = scenario.index;
  r.method = method.label();
  if (method.random) throw InvalidParameter("the random baseline is run by random_baseline");
  NestedLogitOracle oracle(problem.oracle_utility, problem.nests(), derive_seed(scenario.seed, kInitOracleStream));
  Session s = initialized_session(problem, config, method, scenario.seed, oracle);
  try {
    s.run(oracle);
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.trace = s.trace();
  r.gaps = pad_gaps(problem, scenario.x_best, r.trace, config.budget);
  return r;
}

std::vector<double> random_baseline(const Problem& problem, const Scenario& scenario, int budget, int reps) {
  std::vector<double> sum(static_cast<std::size_t>(budget), 0.0);
  const NestConfig nests = problem.nests();
  for (int rep = 0; rep < reps; ++rep) {
    const std::uint64_t seed = derive_seed(derive_seed(scenario.seed, kRandomStream), static_cast<std::uint64_t>(rep));
    NestedLogitOracle oracle(problem.oracle_utility, nests, derive_seed(seed, 0));
    Rng rng(derive_seed(seed, 1));
    std::vector<InstanceId> pool = scenario.unlabeled;
    InstanceId best = scenario.x_best;
    for (int t = 0; t < budget; ++t) {
      if (!pool.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        const std::size_t k = pick(rng);
        const InstanceId cand = pool[k];
        pool[k] = pool.back();
        pool.pop_back();
        best = oracle.respond(cand, best);
      }
      sum[static_cast<std::size_t>(t)] += problem.gap(best);
    }
  }
  for (double& v : sum) v /= reps;
  return sum;
}

const MethodCurve* BenchmarkResult::curve(const std::string& method) const {
  for (const auto& c : curves)
    if (c.method == method) return &c;
  return nullptr;
}

BenchmarkResult run_benchmark(const ExperimentConfig& config) {
  config.validate();
  const Problem problem = make_problem(config);
  const int threads = resolve_threads(config.threads);

  std::vector<Scenario> scenarios(static_cast<std::size_t>(config.scenarios));
  run_pool(scenarios.size(), threads, [&](std::size_t i) {
    scenarios[i] = make_scenario(problem, config, static_cast<int>(i));
  });

  const std::size_t n_methods = config.methods.size();
  BenchmarkResult result;
  result.config = config;
  result.runs.resize(scenarios.size() * n_methods);
  run_pool(result.runs.size(), threads, [&](std::size_t task) {
    const Scenario& sc = scenarios[task / n_methods];
    const MethodSpec& m = config.methods[task % n_methods];
    RunResult r;
    if (m.random) {
      r.scenario = sc.index;
      r.method = m.label();
      r.gaps = random_baseline(problem, sc, config.budget, config.baseline_reps);
    } else {
      try {
        r = run_method(problem, config, sc, m);
      } catch (const std::exception& e) {
        r.scenario = sc.index;
        r.method = m.label();
        r.error = e.what();
      }
    }
    result.runs[task] = std::move(r);
  });

  for (const auto& m : config.methods) {
    MethodCurve c;
    c.method = m.label();
    for (int t = 1; t <= config.budget; ++t) {
      CurvePoint pt;
      pt.t = t;
      double sum = 0.0, sq = 0.0;
      for (const auto& r : result.runs) {
        if (r.method != c.method || r.gaps.size() < static_cast<std::size_t>(t)) continue;
        const double g = r.gaps[static_cast<std::size_t>(t - 1)];
        sum += g;
        sq += g * g;
        ++pt.runs;
      }
      if (pt.runs > 0) {
        pt.mean = sum / pt.runs;
        pt.sd = pt.runs > 1 ? std::sqrt(std::max(0.0, (sq - pt.runs * pt.mean * pt.mean) / (pt.runs - 1))) : 0.0;
      } else {
        pt.mean = std::nan("");
      }
      c.points.push_back(pt);
    }
    result.curves.push_back(std::move(c));
  }
  return result;
}

std::optional<int> first_reaching(const std::vector<double>& curve, double target) {
  for (std::size_t t = 0; t < curve.size(); ++t)
    if (curve[t] <= target) return static_cast<int>(t) + 1;
  return std::nullopt;
}

void write_runs_csv(std::ostream& out, const BenchmarkResult& result) {
  out << "scenario,method,t,gap\n";
  for (const auto& r : result.runs) {
    for (std::size_t t = 0; t < r.gaps.size(); ++t) {
      out << r.scenario << ',' << r.method << ',' << t + 1 << ',' << format_double(r.gaps[t]) << '\n';
    }
  }
}

void write_curves_csv(std::ostream& out, const BenchmarkResult& result) {
  out << "method,t,mean_gap,sd_gap,runs\n";
  for (const auto& c : result.curves) {
    for (const auto& p : c.points) {
      out << c.method << ',' << p.t << ',' << format_double(p.mean) << ',' << format_double(p.sd) << ','
          << p.runs << '\n';
    }
  }
}

void write_traces_csv(std::ostream& out, const BenchmarkResult& result, const Problem& problem) {
  out << "seed,method,acquisition,step,candidate_id,incumbent_id,pi_value,outcome,best_true_value\n";
  for (const auto& r : result.runs) {
    if (r.trace.empty()) continue;
    const MethodSpec m = method_from_label(r.method);
    const std::uint64_t seed = derive_seed(result.config.seed, static_cast<std::uint64_t>(r.scenario));
    for (const auto& q : r.trace) {
      out << seed << ',' << to_string(m.surrogate) << ',' << to_string(m.acquisition) << ',' << q.step << ','
          << q.candidate << ',' << q.incumbent << ',' << format_double(q.acquisition_value) << ','
          << (q.winner == q.candidate ? "candidate" : "incumbent") << ','
          << format_double(problem.metric[static_cast<std::size_t>(q.x_best)]) << '\n';
    }
  }
}

void write_outputs(const BenchmarkResult& result, const Problem& problem) {
  namespace fs = std::filesystem;
  const fs::path dir = result.config.output_dir.empty() ? fs::path(".") : fs::path(result.config.output_dir);
  fs::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw ConfigurationError("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("runs.csv");
    write_runs_csv(f, result);
  }
  {
    auto f = open("curves.csv");
    write_curves_csv(f, result);
  }
  {
    auto f = open("traces.csv");
    write_traces_csv(f, result, problem);
  }
  {
    auto f = open("failures.csv");
    f << "scenario,method,error\n";
    for (const auto& r : result.runs) {
      if (r.error.empty()) continue;
      std::string msg = r.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      f << r.scenario << ',' << r.method << ',' << msg << '\n';
    }
  }
  {
    std::vector<Series> series;
    for (const auto& c : result.curves) {
      Series s;
      s.label = c.method;
      for (const auto& p : c.points) {
        s.x.push_back(p.t);
        s.y.push_back(p.mean);
      }
      series.push_back(std::move(s));
    }
    ChartOptions opt;
    opt.title = problem.name + ": mean relative gap over " + std::to_string(result.config.scenarios) + " scenarios";
    auto f = open("curves.svg");
    write_svg_chart(f, series, opt);
  }
}

}  // namespace dcpref
