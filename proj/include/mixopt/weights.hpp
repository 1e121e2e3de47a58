#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixopt/common.hpp"

namespace mixopt {

enum class Provenance { uniform, human, dro_instant, dro_averaged };

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::uniform: return "uniform";
    case Provenance::human: return "human";
    case Provenance::dro_instant: return "dro_instant";
    case Provenance::dro_averaged: return "dro_averaged";
  }
  return "?";
}

/// A point on the k-simplex.
struct MixtureWeights {
  std::vector<double> alpha;
  Provenance provenance = Provenance::uniform;
};

inline void validate_simplex(const std::vector<double>& alpha, double tol = 1e-12) {
  if (alpha.empty()) throw validation_error("empty weight vector");
  KahanSum sum;
  for (double a : alpha) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw validation_error("weights must be finite and >= 0");
    sum.add(a);
  }
  if (std::abs(sum.value() - 1.0) > tol) {
    throw validation_error("weights must sum to 1 (got " + format_double(sum.value()) + ")");
  }
}

inline std::vector<double> renormalized(std::vector<double> alpha) {
  KahanSum sum;
  for (double a : alpha) sum.add(a);
  const double s = sum.value();
  if (!(s > 0.0)) throw validation_error("cannot normalize non-positive weight vector");
  for (double& a : alpha) a /= s;
  return alpha;
}

/// Samples an index with probability alpha[i], by CDF inversion.
inline std::size_t sample_categorical(Rng& rng, const std::vector<double>& alpha) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    acc += alpha[i];
    if (u < acc) return i;
  }
  return alpha.size() - 1;
}

/// weights.json: a flat {domain_name: weight} object.
inline void save_weights(const std::filesystem::path& path, const MixtureWeights& w,
                         const std::vector<std::string>& names) {
  if (w.alpha.size() != names.size()) throw validation_error("weights/names length mismatch");
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < names.size(); ++i) j[names[i]] = w.alpha[i];
  std::ofstream out(path);
  if (!out) throw validation_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Loads weights for the given domain order; every name must be present.
inline MixtureWeights load_weights(const std::filesystem::path& path,
                                   const std::vector<std::string>& names, Provenance provenance) {
  std::ifstream in(path);
  if (!in) throw validation_error("weights file not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("malformed weights file " + path.string() + ": " + e.what());
  }
  MixtureWeights w;
  w.provenance = provenance;
  for (const auto& name : names) {
    if (!j.contains(name)) {
      throw validation_error("weights file " + path.string() + " missing domain '" + name + "'");
    }
    w.alpha.push_back(j.at(name).get<double>());
  }
  if (j.size() != names.size()) {
    throw validation_error("weights file " + path.string() + " lists unknown domains");
  }
  validate_simplex(w.alpha, 1e-9);
  return w;
}

}  // namespace mixopt
