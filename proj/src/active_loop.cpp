#include "dcpref/active_loop.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <cmath>
#include <string>

#include "dcpref/errors.hpp"

namespace dcpref {

NestedLogitOracle::NestedLogitOracle(std::vector<double> truth, NestConfig nests, std::uint64_t seed)
    : truth_(std::move(truth)), nests_(std::move(nests)), rng_(seed) {
  nests_.validate();
  if (truth_.size() != nests_.membership.size()) {
    throw InvalidParameter("oracle truth does not match nest membership");
  }
}

double NestedLogitOracle::win_probability(InstanceId a, InstanceId b) const {
  const auto r = pairwise_log_prob(truth_.at(static_cast<std::size_t>(a)), truth_.at(static_cast<std::size_t>(b)),
                                   nests_.nest_of(a), nests_.nest_of(b), nests_.lambdas);
  return std::exp(r.value);
}

InstanceId NestedLogitOracle::respond(InstanceId a, InstanceId b) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  return unit(rng_) < win_probability(a, b) ? a : b;
}

std::optional<double> NestedLogitOracle::true_value(InstanceId id) const {
  return truth_.at(static_cast<std::size_t>(id));
}

Session::Session(std::vector<Instance> instances, int nest_count, LoopConfig config)
    : config_(std::move(config)), instances_(std::move(instances)), rng_(config_.seed) {
  if (instances_.empty()) throw ConfigurationError("session needs at least one instance");
  if (nest_count < 1) throw ConfigurationError("session needs at least one nest");
  if (config_.budget < 0) throw ConfigurationError("budget must be non-negative");
  if (config_.zeta < 0.0) throw ConfigurationError("zeta must be non-negative");
  const auto n = static_cast<Eigen::Index>(instances_.size());
  const Eigen::Index p = instances_.front().features.size();
  nests_.lambdas.assign(static_cast<std::size_t>(nest_count), 1.0);
  std::vector<std::vector<InstanceId>> members(static_cast<std::size_t>(nest_count));
  for (Eigen::Index i = 0; i < n; ++i) {
    const Instance& inst = instances_[static_cast<std::size_t>(i)];
    if (inst.id != i) throw ConfigurationError("instance ids must be 0..n-1 in order");
    if (inst.features.size() != p) throw ConfigurationError("instances differ in feature dimension");
    if (inst.nest_id < 0 || inst.nest_id >= nest_count) {
      throw ConfigurationError("instance " + std::to_string(i) + " has an unknown nest");
    }
    nests_.membership.push_back(inst.nest_id);
    members[static_cast<std::size_t>(inst.nest_id)].push_back(inst.id);
  }
  for (int m = 0; m < nest_count; ++m) {
    if (members[static_cast<std::size_t>(m)].size() < 2) {
      throw ConfigurationError("nest " + std::to_string(m) + " has fewer than two instances");
    }
  }

  // Per-feature standardization over the whole pool.
  features_.resize(n, p);
  for (Eigen::Index i = 0; i < n; ++i) features_.row(i) = instances_[static_cast<std::size_t>(i)].features.transpose();
  for (Eigen::Index c = 0; c < p; ++c) {
    const double mean = features_.col(c).mean();
    const double sd = std::sqrt((features_.col(c).array() - mean).square().mean());
    features_.col(c) = (features_.col(c).array() - mean) / (sd > 0.0 ? sd : 1.0);
  }

  is_labeled_.assign(static_cast<std::size_t>(n), false);
  for (int m = 0; m < nest_count; ++m) {
    auto pool = members[static_cast<std::size_t>(m)];
    std::shuffle(pool.begin(), pool.end(), rng_);
    phase1_.push_back({pool[0], pool[1], QueryPhase::phase1});
  }
}

std::optional<QueryPair> Session::pending_init_query() const {
  if (status_ != SessionStatus::initializing) return std::nullopt;
  if (phase1_next_ < phase1_.size()) return phase1_[phase1_next_];
  return QueryPair{phase2_pending_.front(), phase2_order_[phase2_pos_], QueryPhase::phase2};
}

void Session::add_labeled(InstanceId id) {
  if (!is_labeled_[static_cast<std::size_t>(id)]) {
    is_labeled_[static_cast<std::size_t>(id)] = true;
    labeled_.push_back(id);
  }
}

void Session::answer_init(InstanceId winner) {
  const auto pending = pending_init_query();
  if (!pending) throw InvalidState("initialization is already complete");
  if (winner != pending->first && winner != pending->second) {
    throw InvalidParameter("winner " + std::to_string(winner) + " is not part of the outstanding pair");
  }
  const InstanceId loser = winner == pending->first ? pending->second : pending->first;
  comparisons_.push_back({winner, loser});
  ++init_comparisons_;
  add_labeled(pending->first);
  add_labeled(pending->second);

  if (pending->phase == QueryPhase::phase1) {
    phase2_pending_.push_back(winner);
    if (++phase1_next_ == phase1_.size()) {
      phase2_order_.push_back(phase2_pending_.front());
      phase2_pending_.erase(phase2_pending_.begin());
      phase2_pos_ = 0;
    }
  } else {
    // Linear insertion from the top of the current order.
    const InstanceId w = phase2_pending_.front();
    if (winner == w) {
      phase2_order_.insert(phase2_order_.begin() + static_cast<std::ptrdiff_t>(phase2_pos_), w);
      phase2_pending_.erase(phase2_pending_.begin());
      phase2_pos_ = 0;
    } else if (++phase2_pos_ == phase2_order_.size()) {
      phase2_order_.push_back(w);
      phase2_pending_.erase(phase2_pending_.begin());
      phase2_pos_ = 0;
    }
  }
  if (phase1_next_ == phase1_.size() && phase2_pending_.empty()) finish_initialization();
}

void Session::finish_initialization() {
  chain_ = build_initial_chain(comparisons_, nests_, rng_);
  status_ = config_.budget == 0 || unlabeled().empty() ? SessionStatus::exhausted : SessionStatus::active;
}

void Session::initialize(Oracle& oracle) {
  while (auto q = pending_init_query()) answer_init(oracle.respond(q->first, q->second));
}

std::vector<InstanceId> Session::unlabeled() const {
  std::vector<InstanceId> out;
  for (std::size_t i = 0; i < is_labeled_.size(); ++i)
    if (!is_labeled_[i]) out.push_back(static_cast<InstanceId>(i));
  return out;
}

InstanceId Session::x_best() const { return chain_.top(); }

Proposal Session::propose() const {
  if (status_ == SessionStatus::initializing) throw InvalidState("session is still initializing");
  Proposal out;
  out.rng_after = rng_;
  out.step = static_cast<int>(trace_.size()) + 1;
  const std::vector<InstanceId> pool = unlabeled();
  if (status_ != SessionStatus::active || static_cast<int>(trace_.size()) >= config_.budget || pool.empty()) {
    out.terminate = true;
    out.terminal_status = status_ == SessionStatus::converged ? SessionStatus::converged : SessionStatus::exhausted;
    return out;
  }

  const auto start = std::chrono::steady_clock::now();
  std::shared_ptr<Surrogate> model =
      surrogate_ ? std::shared_ptr<Surrogate>(surrogate_->clone())
                 : std::shared_ptr<Surrogate>(make_surrogate(config_.surrogate, config_.surrogate_config, config_.seed));
  FitData data{&features_, labeled_, &chain_, &nests_};
  model->fit(data);
  const SurrogateState& st = model->state();

  const InstanceId q = chain_.top();
  const int qi = st.index_of(q);
  const double sigma_star = std::sqrt(std::max(st.covariance(qi, qi), 0.0));
  Eigen::MatrixXd xu(static_cast<Eigen::Index>(pool.size()), features_.cols());
  for (std::size_t i = 0; i < pool.size(); ++i) xu.row(static_cast<Eigen::Index>(i)) = features_.row(pool[i]);
  Eigen::VectorXd mean, var;
  model->predict(xu, mean, var);

  const int p = static_cast<int>(features_.cols());
  const NestId q_nest = nests_.nest_of(q);
  double delta = 1.0;
  if (config_.acquisition == AcquisitionKind::ucb) delta = draw_delta(out.rng_after);
  auto score = [&](double mu, double sigma, NestId nest) {
    if (config_.acquisition == AcquisitionKind::pi) {
      AcquisitionInput in;
      in.mu_i = mu;
      in.sigma_i = sigma;
      in.mu_max = st.mu_max;
      in.sigma_star = sigma_star;
      in.lambda_m = nest == q_nest ? st.lambdas[static_cast<std::size_t>(nest)] : 1.0;
      return prob_improvement(in);
    }
    return adaptive_ucb(mu, sigma, out.step, p, delta);
  };

  double best = -std::numeric_limits<double>::infinity();
  InstanceId best_id = -1;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    const double v = score(mean(k), std::sqrt(var(k)), nests_.nest_of(pool[i]));
    if (v > best) {
      best = v;
      best_id = pool[i];
    }
  }
  out.candidate = best_id;
  out.incumbent = q;
  out.value = best;
  out.surrogate = std::move(model);
  out.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (config_.acquisition == AcquisitionKind::pi && best < config_.zeta) {
    out.terminate = true;
    out.terminal_status = SessionStatus::converged;
  }
  if (config_.termination == TerminationRule::incumbent_in_pool) {
    Eigen::VectorXd qm, qv;
    model = out.surrogate;
    model->predict(features_.row(q), qm, qv);
    if (score(qm(0), sigma_star, q_nest) >= best) {
      out.terminate = true;
      out.terminal_status = SessionStatus::converged;
    }
  }
  return out;
}

void Session::commit(const Proposal& proposal, InstanceId winner, std::optional<double> best_true_value) {
  if (status_ != SessionStatus::active) throw InvalidState("session is not accepting answers");
  if (proposal.terminate) throw InvalidState("proposal terminates the session");
  if (proposal.step != static_cast<int>(trace_.size()) + 1 || proposal.incumbent != chain_.top()) {
    throw InvalidState("proposal is stale");
  }
  if (winner != proposal.candidate && winner != proposal.incumbent) {
    throw InvalidParameter("winner " + std::to_string(winner) + " is not part of the outstanding pair");
  }
  const bool candidate_wins = winner == proposal.candidate;
  const InstanceId loser = candidate_wins ? proposal.incumbent : proposal.candidate;
  chain_ = extend_chain(chain_, proposal.candidate, candidate_wins);
  comparisons_.push_back({winner, loser});
  add_labeled(proposal.candidate);
  surrogate_ = proposal.surrogate;
  rng_ = proposal.rng_after;

  QueryRecord rec;
  rec.step = proposal.step;
  rec.candidate = proposal.candidate;
  rec.incumbent = proposal.incumbent;
  rec.acquisition_value = proposal.value;
  rec.winner = winner;
  rec.x_best = chain_.top();
  rec.elapsed_seconds = proposal.elapsed_seconds;
  rec.best_true_value = best_true_value;
  trace_.push_back(rec);
  if (static_cast<int>(trace_.size()) >= config_.budget || unlabeled().empty()) status_ = SessionStatus::exhausted;
}

void Session::conclude(const Proposal& proposal) {
  if (!proposal.terminate) throw InvalidState("proposal does not terminate the session");
  if (status_ == SessionStatus::initializing) throw InvalidState("session is still initializing");
  if (proposal.surrogate) surrogate_ = proposal.surrogate;
  status_ = proposal.terminal_status;
}

bool Session::step(Oracle& oracle) {
  if (status_ != SessionStatus::active) return false;
  const Proposal prop = propose();
  if (prop.terminate) {
    conclude(prop);
    return false;
  }
  const InstanceId winner = oracle.respond(prop.candidate, prop.incumbent);
  // x_best after this answer is known before committing
  const InstanceId next_best = winner == prop.candidate ? prop.candidate : prop.incumbent;
  commit(prop, winner, oracle.true_value(next_best));
  return status_ == SessionStatus::active;
}

const std::vector<QueryRecord>& Session::run(Oracle& oracle) {
  if (status_ == SessionStatus::initializing) initialize(oracle);
  while (step(oracle)) {
  }
  return trace_;
}

}  // namespace dcpref
