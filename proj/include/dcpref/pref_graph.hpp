#pragma once

// Comparison digraph and the preference-chain approximation of its likelihood.

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dcpref/choice.hpp"

namespace dcpref {

struct Relation {
  InstanceId winner = 0;
  InstanceId loser = 0;
  bool operator==(const Relation&) const = default;
};

using ComparisonSet = std::vector<Relation>;

/// Main path (most preferred first) plus offspring arcs (parent on the main
/// path beats the offspring). A parent may carry several offspring arcs once
/// the chain has been extended.
struct PreferenceChain {
  std::vector<InstanceId> main_path;
  std::vector<Relation> offsprings;

  InstanceId top() const;
  bool contains(InstanceId id) const;
  std::vector<InstanceId> members() const;
  bool operator==(const PreferenceChain&) const = default;
};

/// Deterministic core of the initial construction: `selected` holds one arc
/// per nest (winner first). The longest directed path in `d` among the
/// winners becomes the main path; losers hang under their winners, except the
/// loser of the lowest main-path node, which extends the path.
PreferenceChain chain_from_selected_arcs(const ComparisonSet& d, const std::vector<Relation>& selected);

/// Picks one random within-nest arc per nest from `d` and builds the chain.
/// Throws InvalidState if `d` is empty or has no within-nest arc.
PreferenceChain build_initial_chain(const ComparisonSet& d, const NestConfig& nests, Rng& rng);

/// Records the answer of comparing `new_id` against the chain top.
PreferenceChain extend_chain(const PreferenceChain& chain, InstanceId new_id, bool new_beats_top);

/// Factor list of the chain likelihood in a local index space.
struct CompiledChain {
  struct Triplet {
    std::array<int, 3> idx;
    std::array<NestId, 3> nest;
  };
  struct Pair {
    std::array<int, 2> idx;
    std::array<NestId, 2> nest;
  };
  std::vector<Triplet> triplets;
  std::vector<Pair> pairs;
};

/// `local_ids[k]` is the instance whose utility sits at position k.
CompiledChain compile_chain(const PreferenceChain& chain, std::span<const InstanceId> local_ids,
                            const NestConfig& nests);

struct ChainLikelihood {
  double value = 0.0;
  Eigen::VectorXd grad_u;
  Eigen::VectorXd grad_lambda;  // one entry per nest
};

ChainLikelihood evaluate_chain(const CompiledChain& compiled, const Eigen::VectorXd& u,
                               std::span<const double> lambdas);

/// log P(P|u) with `u` indexed by instance id.
ChainLikelihood chain_log_likelihood(const PreferenceChain& chain, const Eigen::VectorXd& u,
                                     const NestConfig& nests);

}  // namespace dcpref
