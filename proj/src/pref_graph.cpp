#include "dcpref/pref_graph.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <unordered_map>

#include "dcpref/errors.hpp"

namespace dcpref {

InstanceId PreferenceChain::top() const {
  if (main_path.empty()) throw InvalidState("preference chain is empty");
  return main_path.front();
}

bool PreferenceChain::contains(InstanceId id) const {
  if (std::find(main_path.begin(), main_path.end(), id) != main_path.end()) return true;
  return std::any_of(offsprings.begin(), offsprings.end(),
                     [id](const Relation& r) { return r.loser == id; });
}

std::vector<InstanceId> PreferenceChain::members() const {
  std::vector<InstanceId> out = main_path;
  for (const auto& r : offsprings) out.push_back(r.loser);
  return out;
}

PreferenceChain chain_from_selected_arcs(const ComparisonSet& d, const std::vector<Relation>& selected) {
  if (selected.empty()) throw InvalidState("no arcs selected for the initial chain");
  std::vector<InstanceId> cand;
  std::map<InstanceId, InstanceId> loser_of;
  for (const auto& r : selected) {
    cand.push_back(r.winner);
    loser_of[r.winner] = r.loser;
  }
  std::sort(cand.begin(), cand.end());
  const std::set<InstanceId> cand_set(cand.begin(), cand.end());

  std::map<InstanceId, std::vector<InstanceId>> succ;
  std::map<InstanceId, int> indeg;
  for (InstanceId c : cand) indeg[c] = 0;
  for (const auto& r : d) {
    if (cand_set.count(r.winner) && cand_set.count(r.loser)) {
      auto& s = succ[r.winner];
      if (std::find(s.begin(), s.end(), r.loser) == s.end()) {
        s.push_back(r.loser);
        ++indeg[r.loser];
      }
    }
  }
  // Kahn order, smallest id first among ready nodes.
  std::set<InstanceId> ready;
  for (auto [c, k] : indeg)
    if (k == 0) ready.insert(c);
  std::vector<InstanceId> order;
  while (!ready.empty()) {
    const InstanceId c = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(c);
    for (InstanceId s : succ[c])
      if (--indeg[s] == 0) ready.insert(s);
  }
  if (order.size() != cand.size()) throw InvalidState("comparison digraph contains a cycle");

  // Longest path ending at each node; ties keep the first (smallest) predecessor.
  std::map<InstanceId, int> len;
  std::map<InstanceId, InstanceId> pred;
  for (InstanceId c : order) len[c] = 1;
  for (InstanceId c : order) {
    std::vector<InstanceId> next = succ[c];
    std::sort(next.begin(), next.end());
    for (InstanceId s : next) {
      if (len[c] + 1 > len[s]) {
        len[s] = len[c] + 1;
        pred[s] = c;
      }
    }
  }
  InstanceId end = order.front();
  for (InstanceId c : order)
    if (len[c] > len[end] || (len[c] == len[end] && c < end)) end = c;

  PreferenceChain chain;
  for (InstanceId c = end;;) {
    chain.main_path.push_back(c);
    auto it = pred.find(c);
    if (it == pred.end()) break;
    c = it->second;
  }
  std::reverse(chain.main_path.begin(), chain.main_path.end());

  const std::vector<InstanceId> path = chain.main_path;
  for (std::size_t i = 0; i < path.size(); ++i) {
    const InstanceId loser = loser_of[path[i]];
    if (chain.contains(loser)) continue;
    if (i + 1 == path.size()) {
      chain.main_path.push_back(loser);
    } else {
      chain.offsprings.push_back({path[i], loser});
    }
  }
  return chain;
}

PreferenceChain build_initial_chain(const ComparisonSet& d, const NestConfig& nests, Rng& rng) {
  if (d.empty()) throw InvalidState("cannot build a preference chain from an empty comparison set");
  std::vector<Relation> selected;
  for (NestId m = 0; m < nests.nest_count(); ++m) {
    std::vector<Relation> within;
    for (const auto& r : d) {
      if (nests.nest_of(r.winner) == m && nests.nest_of(r.loser) == m) within.push_back(r);
    }
    if (within.empty()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, within.size() - 1);
    selected.push_back(within[pick(rng)]);
  }
  if (selected.empty()) throw InvalidState("comparison set has no within-nest arc");
  return chain_from_selected_arcs(d, selected);
}

PreferenceChain extend_chain(const PreferenceChain& chain, InstanceId new_id, bool new_beats_top) {
  if (chain.contains(new_id)) {
    throw InvalidParameter("instance " + std::to_string(new_id) + " is already in the chain");
  }
  PreferenceChain out = chain;
  if (new_beats_top) {
    out.main_path.insert(out.main_path.begin(), new_id);
  } else {
    out.offsprings.push_back({chain.top(), new_id});
  }
  return out;
}

CompiledChain compile_chain(const PreferenceChain& chain, std::span<const InstanceId> local_ids,
                            const NestConfig& nests) {
  std::unordered_map<InstanceId, int> local;
  for (std::size_t i = 0; i < local_ids.size(); ++i) local[local_ids[i]] = static_cast<int>(i);
  auto at = [&](InstanceId id) {
    auto it = local.find(id);
    if (it == local.end()) {
      throw InvalidParameter("chain member " + std::to_string(id) + " has no utility");
    }
    return it->second;
  };
  CompiledChain out;
  const auto& p = chain.main_path;
  std::size_t i = 0;
  for (; i + 3 <= p.size(); i += 3) {
    out.triplets.push_back({{at(p[i]), at(p[i + 1]), at(p[i + 2])},
                            {nests.nest_of(p[i]), nests.nest_of(p[i + 1]), nests.nest_of(p[i + 2])}});
  }
  if (p.size() - i == 2) {
    out.pairs.push_back({{at(p[i]), at(p[i + 1])}, {nests.nest_of(p[i]), nests.nest_of(p[i + 1])}});
  }
  for (const auto& r : chain.offsprings) {
    out.pairs.push_back(
        {{at(r.winner), at(r.loser)}, {nests.nest_of(r.winner), nests.nest_of(r.loser)}});
  }
  return out;
}

ChainLikelihood evaluate_chain(const CompiledChain& compiled, const Eigen::VectorXd& u,
                               std::span<const double> lambdas) {
  ChainLikelihood out;
  out.grad_u = Eigen::VectorXd::Zero(u.size());
  out.grad_lambda = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(lambdas.size()));
  for (const auto& t : compiled.triplets) {
    const auto r = triplet_log_prob({u(t.idx[0]), u(t.idx[1]), u(t.idx[2])}, t.nest, lambdas);
    out.value += r.value;
    for (int k = 0; k < 3; ++k) out.grad_u(t.idx[k]) += r.d_u[k];
    if (r.lambda_nest >= 0) out.grad_lambda(r.lambda_nest) += r.d_lambda;
  }
  for (const auto& pr : compiled.pairs) {
    const auto r = pairwise_log_prob(u(pr.idx[0]), u(pr.idx[1]), pr.nest[0], pr.nest[1], lambdas);
    out.value += r.value;
    out.grad_u(pr.idx[0]) += r.d_ui;
    out.grad_u(pr.idx[1]) += r.d_uj;
    if (r.lambda_nest >= 0) out.grad_lambda(r.lambda_nest) += r.d_lambda;
  }
  return out;
}

ChainLikelihood chain_log_likelihood(const PreferenceChain& chain, const Eigen::VectorXd& u,
                                     const NestConfig& nests) {
  std::vector<InstanceId> ids(static_cast<std::size_t>(u.size()));
  std::iota(ids.begin(), ids.end(), 0);
  return evaluate_chain(compile_chain(chain, ids, nests), u, nests.lambdas);
}

}  // namespace dcpref
