#include "dcpref/surrogate.hpp"

#include "dcpref/dgp_surrogate.hpp"
#include "dcpref/errors.hpp"
#include "dcpref/gp_surrogate.hpp"
#include "dcpref/linalg.hpp"

namespace dcpref {

std::string to_string(SurrogateKind kind) {
  switch (kind) {
    case SurrogateKind::gp:
      return "gp";
    case SurrogateKind::dgp1:
      return "dgp1";
    case SurrogateKind::dgp5:
      return "dgp5";
  }
  return "unknown";
}

SurrogateKind surrogate_kind_from_string(const std::string& name) {
  if (name == "gp") return SurrogateKind::gp;
  if (name == "dgp1") return SurrogateKind::dgp1;
  if (name == "dgp5") return SurrogateKind::dgp5;
  throw ConfigurationError("unknown surrogate '" + name + "' (expected gp, dgp1 or dgp5)");
}

int SurrogateState::index_of(InstanceId id) const {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return static_cast<int>(i);
  throw InvalidParameter("instance " + std::to_string(id) + " is not labeled");
}

std::unique_ptr<Surrogate> make_surrogate(SurrogateKind kind, const SurrogateConfig& config, std::uint64_t seed) {
  switch (kind) {
    case SurrogateKind::gp:
      return std::make_unique<GpSurrogate>(config);
    case SurrogateKind::dgp1:
    case SurrogateKind::dgp5: {
      DgpConfig dgp;
      dgp.hidden_dim = kind == SurrogateKind::dgp1 ? 1 : 5;
      return std::make_unique<DgpSurrogate>(dgp, config, seed);
    }
  }
  throw ConfigurationError("unknown surrogate kind");
}

namespace detail {

Eigen::MatrixXd chain_hessian(const CompiledChain& compiled, const Eigen::VectorXd& u,
                              std::span<const double> lambdas, double step) {
  const Eigen::Index n = u.size();
  Eigen::MatrixXd h(n, n);
  Eigen::VectorXd up = u;
  for (Eigen::Index k = 0; k < n; ++k) {
    up(k) = u(k) + step;
    const Eigen::VectorXd gp = evaluate_chain(compiled, up, lambdas).grad_u;
    up(k) = u(k) - step;
    const Eigen::VectorXd gm = evaluate_chain(compiled, up, lambdas).grad_u;
    up(k) = u(k);
    h.col(k) = (gp - gm) / (2.0 * step);
  }
  return symmetrize(h);
}

}  // namespace detail

}  // namespace dcpref
