#pragma once

// Airline itinerary choice model: linear utilities, the six-nest structure
// (stop type x time of day), nested-logit choice probabilities and a CSV
// loader for itinerary bundles.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dcpref/choice.hpp"

namespace dcpref {

inline constexpr int kItineraryFeatureCount = 17;
inline constexpr int kItineraryNestCount = 6;

/// Column names in file order (after the leading `id` column).
const std::array<std::string, kItineraryFeatureCount>& itinerary_feature_names();

struct ItineraryCoefficients {
  std::array<double, 8> time_period{};  // periods 2..9
  std::array<double, 4> carrier{};      // carriers 2..5
  double equipment2 = 0.0;
  double high_yield_fare = 0.0;
  double low_yield_fare = 0.0;
  double elapsed_time = 0.0;
  double non_stop = 0.0;
  double logsum = 1.0;  // lambda shared by every nest

  /// The published estimates bundled as the default.
  static ItineraryCoefficients published();
  /// Coefficients in feature-column order.
  Eigen::VectorXd as_vector() const;
  void validate() const;

  bool operator==(const ItineraryCoefficients&) const = default;
};

ItineraryCoefficients coefficients_from_json(const std::string& text);
std::string coefficients_to_json(const ItineraryCoefficients& c);
ItineraryCoefficients load_coefficients(const std::string& path);

enum class TimeOfDay { morning = 0, afternoon = 1, evening = 2 };

/// Maps departure periods 1..9 to a time-of-day bucket. Period 1 is the
/// reference period (no dummy set).
struct TimeBuckets {
  std::array<TimeOfDay, 10> of_period{TimeOfDay::morning,   TimeOfDay::morning,   TimeOfDay::morning,
                                      TimeOfDay::morning,   TimeOfDay::morning,   TimeOfDay::afternoon,
                                      TimeOfDay::afternoon, TimeOfDay::afternoon, TimeOfDay::evening,
                                      TimeOfDay::evening};
};

/// Nest ids: 0..2 non-stop morning/afternoon/evening, 3..5 with stops.
NestId itinerary_nest(bool non_stop, TimeOfDay tod);

struct Itinerary {
  int id = 0;
  Eigen::VectorXd features = Eigen::VectorXd::Zero(kItineraryFeatureCount);
  int period = 1;  // 1..9
  bool non_stop = false;
  NestId nest = 0;
};

/// Checks dummy exclusivity and 0/1 coding, then derives period and nest.
/// Throws ValidationError.
Itinerary make_itinerary(int id, const Eigen::VectorXd& features, const TimeBuckets& buckets = {});

double utility(const Itinerary& it, const ItineraryCoefficients& c);

enum class NestNormalization {
  standard,  // nest weights exp(lambda*G_m) / sum_m' exp(lambda*G_m')
  literal,   // nest weights exp(lambda*G_m) / sum_m' exp(G_m')
};

/// Nested-logit probabilities with one shared lambda, where
/// G_m = log sum_{i in m} exp(U_i / lambda). Throws ConfigurationError if
/// any of the `nest_count` nests is empty.
std::vector<double> nested_logit_probabilities(const std::vector<double>& utilities,
                                               const std::vector<NestId>& nest_of, int nest_count,
                                               double lambda,
                                               NestNormalization mode = NestNormalization::standard);

std::vector<double> nl_choice_prob(const std::vector<Itinerary>& its, const ItineraryCoefficients& c,
                                   NestNormalization mode = NestNormalization::standard);

/// Parses a CSV with header `id,<feature names>`. An empty stream yields an
/// empty list. Malformed rows raise ParseError; invariant violations raise
/// ValidationError.
std::vector<Itinerary> parse_itineraries(std::istream& in, const TimeBuckets& buckets = {});
std::vector<Itinerary> load_itineraries(const std::string& path, const TimeBuckets& buckets = {});
void write_itineraries(std::ostream& out, const std::vector<Itinerary>& its);

/// Synthetic bundle drawn from fixed feature marginals; every nest receives
/// at least two itineraries.
std::vector<Itinerary> generate_synthetic_itineraries(int count, std::uint64_t seed);

/// Instances (id, raw features, nest) ready for a Session.
std::vector<Instance> itinerary_instances(const std::vector<Itinerary>& its);

}  // namespace dcpref
