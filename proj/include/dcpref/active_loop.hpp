#pragma once

// The active-learning session: two-phase initialization, the per-query step
// (fit, score, ask, update) and the query trace.

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "dcpref/acquisition.hpp"
#include "dcpref/choice.hpp"
#include "dcpref/pref_graph.hpp"
#include "dcpref/surrogate.hpp"

namespace dcpref {

class Oracle {
 public:
  virtual ~Oracle() = default;
  /// Returns the preferred one of the two instances.
  virtual InstanceId respond(InstanceId a, InstanceId b) = 0;
  /// Ground-truth value, when the oracle knows it.
  virtual std::optional<double> true_value(InstanceId) const { return std::nullopt; }
};

/// Stochastic comparator: a beats b with the nested-logit pairwise
/// probability of the true values, drawn afresh on every call.
class NestedLogitOracle final : public Oracle {
 public:
  NestedLogitOracle(std::vector<double> truth, NestConfig nests, std::uint64_t seed);
  InstanceId respond(InstanceId a, InstanceId b) override;
  std::optional<double> true_value(InstanceId id) const override;
  double win_probability(InstanceId a, InstanceId b) const;

 private:
  std::vector<double> truth_;
  NestConfig nests_;
  Rng rng_;
};

enum class TerminationRule {
  threshold_or_budget,  // stop when no candidate reaches zeta or the budget is spent
  incumbent_in_pool,    // additionally stop when the incumbent outscores every candidate
};

struct LoopConfig {
  SurrogateKind surrogate = SurrogateKind::dgp1;
  AcquisitionKind acquisition = AcquisitionKind::pi;
  double zeta = 1e-4;  // lower threshold on probability improvement
  int budget = 50;     // maximum number of active queries
  std::uint64_t seed = 0;
  TerminationRule termination = TerminationRule::threshold_or_budget;
  SurrogateConfig surrogate_config;
};

enum class QueryPhase { phase1, phase2, active };

struct QueryPair {
  InstanceId first = 0;
  InstanceId second = 0;
  QueryPhase phase = QueryPhase::phase1;
};

struct QueryRecord {
  int step = 0;
  InstanceId candidate = 0;
  InstanceId incumbent = 0;
  double acquisition_value = 0.0;
  InstanceId winner = 0;
  InstanceId x_best = 0;
  double elapsed_seconds = 0.0;
  std::optional<double> best_true_value;
};

enum class SessionStatus { initializing, active, converged, exhausted };

/// Outcome of fitting and scoring without touching the session.
struct Proposal {
  bool terminate = false;
  SessionStatus terminal_status = SessionStatus::active;
  InstanceId candidate = -1;
  InstanceId incumbent = -1;
  double value = 0.0;
  int step = 0;
  double elapsed_seconds = 0.0;
  std::shared_ptr<Surrogate> surrogate;
  Rng rng_after;
};

class Session {
 public:
  /// Instance ids must be 0..n-1 in order. Throws ConfigurationError when a
  /// nest has fewer than two instances.
  Session(std::vector<Instance> instances, int nest_count, LoopConfig config);

  // Two-phase initialization, one comparison at a time.
  std::optional<QueryPair> pending_init_query() const;
  void answer_init(InstanceId winner);
  bool initialized() const { return status_ != SessionStatus::initializing; }
  void initialize(Oracle& oracle);

  /// Fits the surrogate and picks the next query. Leaves the session unchanged.
  Proposal propose() const;
  /// Applies the oracle's answer to a proposal from propose().
  void commit(const Proposal& proposal, InstanceId winner, std::optional<double> best_true_value = std::nullopt);
  /// Marks the session terminated as decided by a proposal.
  void conclude(const Proposal& proposal);

  /// One query of the active loop. Returns false once the session has terminated.
  bool step(Oracle& oracle);
  /// Steps until termination; returns the trace.
  const std::vector<QueryRecord>& run(Oracle& oracle);

  SessionStatus status() const { return status_; }
  const LoopConfig& config() const { return config_; }
  const std::vector<Instance>& instances() const { return instances_; }
  const NestConfig& nests() const { return nests_; }
  const Eigen::MatrixXd& standardized_features() const { return features_; }
  const std::vector<InstanceId>& labeled() const { return labeled_; }
  std::vector<InstanceId> unlabeled() const;
  const ComparisonSet& comparisons() const { return comparisons_; }
  const PreferenceChain& chain() const { return chain_; }
  InstanceId x_best() const;
  const std::vector<QueryRecord>& trace() const { return trace_; }
  const Surrogate* surrogate() const { return surrogate_.get(); }
  int init_comparison_count() const { return init_comparisons_; }

 private:
  void finish_initialization();
  void add_labeled(InstanceId id);

  LoopConfig config_;
  std::vector<Instance> instances_;
  NestConfig nests_;
  Eigen::MatrixXd features_;
  Rng rng_;
  SessionStatus status_ = SessionStatus::initializing;

  // initialization state
  std::vector<QueryPair> phase1_;
  std::size_t phase1_next_ = 0;
  std::vector<InstanceId> phase2_pending_;  // winners not yet inserted
  std::vector<InstanceId> phase2_order_;    // sorted, most preferred first
  std::size_t phase2_pos_ = 0;
  int init_comparisons_ = 0;

  std::vector<InstanceId> labeled_;
  std::vector<bool> is_labeled_;
  ComparisonSet comparisons_;
  PreferenceChain chain_;
  std::vector<QueryRecord> trace_;
  std::shared_ptr<Surrogate> surrogate_;
};

}  // namespace dcpref
