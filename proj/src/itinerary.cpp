#include "dcpref/itinerary.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dcpref/errors.hpp"

namespace dcpref {

namespace {

constexpr int kFirstCarrier = 8;
constexpr int kEquipment = 12;
constexpr int kHighFare = 13;
constexpr int kLowFare = 14;
constexpr int kElapsed = 15;
constexpr int kNonStop = 16;

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_double(const std::string& s, double& v) {
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(v);
}

bool is_blank(const std::string& line) {
  return line.find_first_not_of(" \t\r") == std::string::npos;
}

}  // namespace

const std::array<std::string, kItineraryFeatureCount>& itinerary_feature_names() {
  static const std::array<std::string, kItineraryFeatureCount> names{
      "tp2",      "tp3",      "tp4",      "tp5",      "tp6",    "tp7",
      "tp8",      "tp9",      "carrier2", "carrier3", "carrier4", "carrier5",
      "equip2",   "high_yield_fare", "low_yield_fare", "elapsed_time", "non_stop"};
  return names;
}

ItineraryCoefficients ItineraryCoefficients::published() {
  ItineraryCoefficients c;
  c.time_period = {0.082, 0.104, 0.069, 0.110, 0.204, 0.259, 0.265, -0.076};
  c.carrier = {0.095, 0.500, 0.435, -0.508};
  c.equipment2 = 0.379;
  c.high_yield_fare = -0.001;
  c.low_yield_fare = -0.001;
  c.elapsed_time = -0.005;
  c.non_stop = -3.090;
  c.logsum = 0.792;
  return c;
}

Eigen::VectorXd ItineraryCoefficients::as_vector() const {
  Eigen::VectorXd beta(kItineraryFeatureCount);
  for (int k = 0; k < 8; ++k) beta(k) = time_period[static_cast<std::size_t>(k)];
  for (int k = 0; k < 4; ++k) beta(kFirstCarrier + k) = carrier[static_cast<std::size_t>(k)];
  beta(kEquipment) = equipment2;
  beta(kHighFare) = high_yield_fare;
  beta(kLowFare) = low_yield_fare;
  beta(kElapsed) = elapsed_time;
  beta(kNonStop) = non_stop;
  return beta;
}

void ItineraryCoefficients::validate() const {
  if (!(logsum > 0.0 && logsum <= 1.0)) throw ValidationError("logsum parameter must lie in (0, 1]");
  if (!as_vector().allFinite()) throw ValidationError("coefficients must be finite");
}

ItineraryCoefficients coefficients_from_json(const std::string& text) {
  ItineraryCoefficients c;
  try {
    const auto j = nlohmann::json::parse(text);
    for (int p = 2; p <= 9; ++p) c.time_period[static_cast<std::size_t>(p - 2)] = j.at("time_period").at(std::to_string(p)).get<double>();
    for (int k = 2; k <= 5; ++k) c.carrier[static_cast<std::size_t>(k - 2)] = j.at("carrier").at(std::to_string(k)).get<double>();
    c.equipment2 = j.at("equipment_type_2").get<double>();
    c.high_yield_fare = j.at("high_yield_fare").get<double>();
    c.low_yield_fare = j.at("low_yield_fare").get<double>();
    c.elapsed_time = j.at("elapsed_time").get<double>();
    c.non_stop = j.at("non_stop").get<double>();
    c.logsum = j.at("logsum").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError(std::string("invalid coefficient file: ") + e.what());
  }
  c.validate();
  return c;
}

std::string coefficients_to_json(const ItineraryCoefficients& c) {
  nlohmann::ordered_json j;
  for (int p = 2; p <= 9; ++p) j["time_period"][std::to_string(p)] = c.time_period[static_cast<std::size_t>(p - 2)];
  for (int k = 2; k <= 5; ++k) j["carrier"][std::to_string(k)] = c.carrier[static_cast<std::size_t>(k - 2)];
  j["equipment_type_2"] = c.equipment2;
  j["high_yield_fare"] = c.high_yield_fare;
  j["low_yield_fare"] = c.low_yield_fare;
  j["elapsed_time"] = c.elapsed_time;
  j["non_stop"] = c.non_stop;
  j["logsum"] = c.logsum;
  return j.dump(2) + "\n";
}

ItineraryCoefficients load_coefficients(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open coefficient file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return coefficients_from_json(ss.str());
}

NestId itinerary_nest(bool non_stop, TimeOfDay tod) {
  return (non_stop ? 0 : 3) + static_cast<int>(tod);
}

Itinerary make_itinerary(int id, const Eigen::VectorXd& features, const TimeBuckets& buckets) {
  if (features.size() != kItineraryFeatureCount) {
    throw ValidationError("itinerary " + std::to_string(id) + " must have " +
                          std::to_string(kItineraryFeatureCount) + " features");
  }
  const auto& names = itinerary_feature_names();
  auto check_binary = [&](int k) {
    if (features(k) != 0.0 && features(k) != 1.0) {
      throw ValidationError("itinerary " + std::to_string(id) + ": " + names[static_cast<std::size_t>(k)] +
                            " must be 0 or 1");
    }
  };
  for (int k = 0; k < kHighFare; ++k) check_binary(k);
  check_binary(kNonStop);
  if (features.segment(0, 8).sum() > 1.0) {
    throw ValidationError("itinerary " + std::to_string(id) + " sets more than one time-period dummy");
  }
  if (features.segment(kFirstCarrier, 4).sum() > 1.0) {
    throw ValidationError("itinerary " + std::to_string(id) + " sets more than one carrier dummy");
  }
  Itinerary it;
  it.id = id;
  it.features = features;
  it.period = 1;
  for (int k = 0; k < 8; ++k)
    if (features(k) == 1.0) it.period = k + 2;
  it.non_stop = features(kNonStop) == 1.0;
  it.nest = itinerary_nest(it.non_stop, buckets.of_period[static_cast<std::size_t>(it.period)]);
  return it;
}

double utility(const Itinerary& it, const ItineraryCoefficients& c) {
  return it.features.dot(c.as_vector());
}

std::vector<double> nested_logit_probabilities(const std::vector<double>& utilities,
                                               const std::vector<NestId>& nest_of, int nest_count,
                                               double lambda, NestNormalization mode) {
  check_lambda(lambda);
  if (utilities.size() != nest_of.size()) throw InvalidParameter("utilities and nests differ in length");
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> peak(static_cast<std::size_t>(nest_count), ninf);
  for (std::size_t i = 0; i < utilities.size(); ++i) {
    const NestId m = nest_of[i];
    if (m < 0 || m >= nest_count) throw InvalidParameter("unknown nest id " + std::to_string(m));
    peak[static_cast<std::size_t>(m)] = std::max(peak[static_cast<std::size_t>(m)], utilities[i] / lambda);
  }
  std::vector<double> acc(static_cast<std::size_t>(nest_count), 0.0);
  for (std::size_t i = 0; i < utilities.size(); ++i) {
    const auto m = static_cast<std::size_t>(nest_of[i]);
    acc[m] += std::exp(utilities[i] / lambda - peak[m]);
  }
  std::vector<double> gamma(static_cast<std::size_t>(nest_count));
  for (int m = 0; m < nest_count; ++m) {
    if (acc[static_cast<std::size_t>(m)] == 0.0) throw ConfigurationError("nest " + std::to_string(m) + " is empty");
    gamma[static_cast<std::size_t>(m)] = peak[static_cast<std::size_t>(m)] + std::log(acc[static_cast<std::size_t>(m)]);
  }
  const double scale = mode == NestNormalization::standard ? lambda : 1.0;
  double top = ninf;
  for (double g : gamma) top = std::max(top, scale * g);
  double denom = 0.0;
  for (double g : gamma) denom += std::exp(scale * g - top);
  const double log_denom = top + std::log(denom);

  std::vector<double> out(utilities.size());
  for (std::size_t i = 0; i < utilities.size(); ++i) {
    const double g = gamma[static_cast<std::size_t>(nest_of[i])];
    out[i] = std::exp(lambda * g - log_denom + utilities[i] / lambda - g);
  }
  return out;
}

std::vector<double> nl_choice_prob(const std::vector<Itinerary>& its, const ItineraryCoefficients& c,
                                   NestNormalization mode) {
  std::vector<double> u;
  std::vector<NestId> nest;
  for (const auto& it : its) {
    u.push_back(utility(it, c));
    nest.push_back(it.nest);
  }
  return nested_logit_probabilities(u, nest, kItineraryNestCount, c.logsum, mode);
}

std::vector<Itinerary> parse_itineraries(std::istream& in, const TimeBuckets& buckets) {
  std::vector<Itinerary> out;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::set<int> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    const auto cells = split_csv_line(line);
    if (!have_header) {
      const auto& names = itinerary_feature_names();
      bool ok = cells.size() == names.size() + 1 && cells[0] == "id";
      for (std::size_t k = 0; ok && k < names.size(); ++k) ok = cells[k + 1] == names[k];
      if (!ok) throw ParseError(line_no, "unexpected header");
      have_header = true;
      continue;
    }
    if (cells.size() != kItineraryFeatureCount + 1) {
      throw ParseError(line_no, "expected " + std::to_string(kItineraryFeatureCount + 1) + " columns, got " +
                                    std::to_string(cells.size()));
    }
    double idv = 0.0;
    if (!parse_double(cells[0], idv) || idv != std::floor(idv)) throw ParseError(line_no, "invalid id '" + cells[0] + "'");
    Eigen::VectorXd f(kItineraryFeatureCount);
    for (int k = 0; k < kItineraryFeatureCount; ++k) {
      double v = 0.0;
      if (!parse_double(cells[static_cast<std::size_t>(k + 1)], v)) {
        throw ParseError(line_no, "invalid value '" + cells[static_cast<std::size_t>(k + 1)] + "' in column " +
                                      itinerary_feature_names()[static_cast<std::size_t>(k)]);
      }
      f(k) = v;
    }
    const int id = static_cast<int>(idv);
    if (!seen.insert(id).second) throw ValidationError("duplicate itinerary id " + std::to_string(id));
    out.push_back(make_itinerary(id, f, buckets));
  }
  return out;
}

std::vector<Itinerary> load_itineraries(const std::string& path, const TimeBuckets& buckets) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open itinerary file " + path);
  return parse_itineraries(in, buckets);
}

void write_itineraries(std::ostream& out, const std::vector<Itinerary>& its) {
  out << "id";
  for (const auto& name : itinerary_feature_names()) out << ',' << name;
  out << '\n';
  for (const auto& it : its) {
    out << it.id;
    for (int k = 0; k < kItineraryFeatureCount; ++k) out << ',' << format_number(it.features(k));
    out << '\n';
  }
}

std::vector<Itinerary> generate_synthetic_itineraries(int count, std::uint64_t seed) {
  if (count < 2 * kItineraryNestCount) {
    throw InvalidParameter("a synthetic bundle needs at least two itineraries per nest");
  }
  Rng rng(seed);
  std::uniform_int_distribution<int> period_dist(1, 9);
  std::bernoulli_distribution non_stop_dist(0.3);
  std::discrete_distribution<int> carrier_dist({0.30, 0.20, 0.20, 0.15, 0.15});
  std::bernoulli_distribution equip_dist(0.4);
  std::uniform_int_distribution<int> high_fare(250, 1200);
  std::uniform_int_distribution<int> low_fare(80, 450);
  std::normal_distribution<double> direct_time(150.0, 40.0);
  std::normal_distribution<double> connect_time(300.0, 80.0);

  // Periods representative of each bucket, used to seed every nest.
  const std::array<int, 3> bucket_period{2, 6, 9};
  const TimeBuckets buckets;
  std::vector<Itinerary> out;
  for (int i = 0; i < count; ++i) {
    int period = period_dist(rng);
    bool non_stop = non_stop_dist(rng);
    if (i < 2 * kItineraryNestCount) {
      const int nest = i / 2;
      non_stop = nest < 3;
      period = bucket_period[static_cast<std::size_t>(nest % 3)];
    }
    Eigen::VectorXd f = Eigen::VectorXd::Zero(kItineraryFeatureCount);
    if (period >= 2) f(period - 2) = 1.0;
    const int carrier = carrier_dist(rng) + 1;
    if (carrier >= 2) f(kFirstCarrier + carrier - 2) = 1.0;
    f(kEquipment) = equip_dist(rng) ? 1.0 : 0.0;
    f(kHighFare) = high_fare(rng);
    f(kLowFare) = low_fare(rng);
    const double minutes = non_stop ? std::clamp(direct_time(rng), 60.0, 360.0)
                                    : std::clamp(connect_time(rng), 120.0, 720.0);
    f(kElapsed) = std::round(minutes);
    f(kNonStop) = non_stop ? 1.0 : 0.0;
    out.push_back(make_itinerary(i + 1, f, buckets));
  }
  return out;
}

std::vector<Instance> itinerary_instances(const std::vector<Itinerary>& its) {
  std::vector<Instance> out;
  out.reserve(its.size());
  for (std::size_t i = 0; i < its.size(); ++i) {
    out.push_back({static_cast<InstanceId>(i), its[i].features, its[i].nest});
  }
  return out;
}

}  // namespace dcpref
