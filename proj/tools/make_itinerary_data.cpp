// Regenerates the bundled synthetic itinerary file and coefficient file.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dcpref/itinerary.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write the synthetic itinerary bundle"};
  int count = 543;
  std::uint64_t seed = 20180501;
  std::string csv_out = "itineraries_synthetic.csv";
  std::string coeff_out;
  app.add_option("--count", count, "number of itineraries");
  app.add_option("--seed", seed, "generator seed");
  app.add_option("--out", csv_out, "CSV destination");
  app.add_option("--coefficients-out", coeff_out, "also write the published coefficients as JSON");
  CLI11_PARSE(app, argc, argv);
  try {
    const auto its = dcpref::generate_synthetic_itineraries(count, seed);
    std::ofstream f(csv_out, std::ios::binary);
    dcpref::write_itineraries(f, its);
    if (!coeff_out.empty()) {
      std::ofstream c(coeff_out, std::ios::binary);
      c << dcpref::coefficients_to_json(dcpref::ItineraryCoefficients::published());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
