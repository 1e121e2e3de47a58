#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixopt/common.hpp"
#include "mixopt/dataset.hpp"

namespace mixopt {

enum class NormScheme { gaussian, bounds };

inline NormScheme norm_scheme_from_string(const std::string& s) {
  if (s == "gaussian") return NormScheme::gaussian;
  if (s == "bounds") return NormScheme::bounds;
  throw validation_error("unknown normalization scheme '" + s + "'");
}

inline std::string to_string(NormScheme s) {
  return s == NormScheme::gaussian ? "gaussian" : "bounds";
}

constexpr double kMinStd = 1e-8;

/// Per-domain, per-action-dimension normalization parameters. Both parameter
/// sets are always fitted; `scheme` selects which one apply/invert use.
struct NormalizationStats {
  NormScheme scheme = NormScheme::gaussian;
  int domain_id = -1;
  Vec mean;  // population mean
  Vec stddev;  // population std, clamped below at kMinStd
  Vec min;
  Vec max;

  std::size_t dims() const { return mean.size(); }
};

inline NormalizationStats fit_normalizer(const Domain& domain, NormScheme scheme) {
  if (domain.size() == 0) {
    throw validation_error("cannot fit normalizer on empty domain '" + domain.name + "'");
  }
  const std::size_t d_a = domain.action_dim;
  NormalizationStats st;
  st.scheme = scheme;
  st.domain_id = domain.id;
  st.mean.assign(d_a, 0.0);
  st.stddev.assign(d_a, 0.0);
  st.min.assign(d_a, std::numeric_limits<double>::infinity());
  st.max.assign(d_a, -std::numeric_limits<double>::infinity());

  const double n = static_cast<double>(domain.size());
  for (std::size_t j = 0; j < d_a; ++j) {
    KahanSum sum;
    for (const auto& t : domain.trajectories) {
      for (const auto& a : t.actions) {
        sum.add(a[j]);
        st.min[j] = std::min(st.min[j], a[j]);
        st.max[j] = std::max(st.max[j], a[j]);
      }
    }
    st.mean[j] = sum.value() / n;
    KahanSum sq;
    for (const auto& t : domain.trajectories) {
      for (const auto& a : t.actions) {
        const double d = a[j] - st.mean[j];
        sq.add(d * d);
      }
    }
    st.stddev[j] = std::max(kMinStd, std::sqrt(sq.value() / n));
  }
  return st;
}

inline void check_dims(const NormalizationStats& st, std::size_t d_a) {
  if (st.dims() != d_a) {
    throw validation_error("normalizer dimension " + std::to_string(st.dims()) +
                           " does not match action dimension " + std::to_string(d_a));
  }
}

inline Vec apply_normalizer(const Vec& action, const NormalizationStats& st) {
  check_dims(st, action.size());
  Vec out(action.size());
  for (std::size_t j = 0; j < action.size(); ++j) {
    if (st.scheme == NormScheme::gaussian) {
      out[j] = (action[j] - st.mean[j]) / st.stddev[j];
    } else {
      const double range = st.max[j] - st.min[j];
      out[j] = range > 0.0 ? 2.0 * (action[j] - st.min[j]) / range - 1.0 : 0.0;
    }
  }
  return out;
}

inline Vec invert_normalizer(const Vec& normalized, const NormalizationStats& st) {
  check_dims(st, normalized.size());
  Vec out(normalized.size());
  for (std::size_t j = 0; j < normalized.size(); ++j) {
    if (st.scheme == NormScheme::gaussian) {
      out[j] = normalized[j] * st.stddev[j] + st.mean[j];
    } else {
      const double range = st.max[j] - st.min[j];
      out[j] = range > 0.0 ? (normalized[j] + 1.0) * 0.5 * range + st.min[j] : st.min[j];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Uniform binning over [-R, R], shared across action dimensions (actions are
// already normalized per domain). Bin b covers [edge[b], edge[b+1]), values
// outside the range are clipped.
// ---------------------------------------------------------------------------

struct Discretizer {
  int bins = 256;
  double clip = 5.0;  // R
  Vec edges;          // bins + 1, uniform over [-R, R]
};

inline Discretizer fit_discretizer(int bins, double clip) {
  if (bins < 2) throw validation_error("bin count must be >= 2");
  if (!(clip > 0.0)) throw validation_error("clip range must be positive");
  Discretizer d;
  d.bins = bins;
  d.clip = clip;
  d.edges.resize(static_cast<std::size_t>(bins) + 1);
  const double width = 2.0 * clip / bins;
  for (int i = 0; i <= bins; ++i) d.edges[static_cast<std::size_t>(i)] = -clip + width * i;
  d.edges.front() = -clip;
  d.edges.back() = clip;
  return d;
}

inline double bin_width(const Discretizer& d) { return 2.0 * d.clip / d.bins; }

inline int discretize_value(double v, const Discretizer& d) {
  const double width = bin_width(d);
  const double clipped = std::clamp(v, -d.clip, d.clip);
  int b = static_cast<int>(std::floor((clipped + d.clip) / width));
  return std::clamp(b, 0, d.bins - 1);
}

inline double undiscretize_value(int b, const Discretizer& d) {
  return -d.clip + (static_cast<double>(b) + 0.5) * bin_width(d);
}

inline std::vector<int> discretize(const Vec& action, const Discretizer& d) {
  std::vector<int> out(action.size());
  for (std::size_t j = 0; j < action.size(); ++j) out[j] = discretize_value(action[j], d);
  return out;
}

inline Vec undiscretize(const std::vector<int>& bins, const Discretizer& d) {
  Vec out(bins.size());
  for (std::size_t j = 0; j < bins.size(); ++j) out[j] = undiscretize_value(bins[j], d);
  return out;
}

// ---------------------------------------------------------------------------
// Prepared (normalized + binned) training data, flattened per domain.
// ---------------------------------------------------------------------------

struct PreparedDomain {
  int id = 0;
  std::string name;
  std::size_t n = 0;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::size_t n_bins = 0;
  std::vector<double> states;        // n x d_s, row-major
  std::vector<std::uint16_t> bins;   // n x d_a, row-major

  const double* state(std::size_t i) const { return states.data() + i * state_dim; }
  const std::uint16_t* action_bins(std::size_t i) const { return bins.data() + i * action_dim; }
};

inline PreparedDomain prepare_domain(const Domain& domain, const NormalizationStats& st,
                                     const Discretizer& disc) {
  if (disc.bins > 65535) throw validation_error("bin count exceeds 16-bit storage");
  PreparedDomain p;
  p.id = domain.id;
  p.name = domain.name;
  p.state_dim = domain.state_dim;
  p.action_dim = domain.action_dim;
  p.n_bins = static_cast<std::size_t>(disc.bins);
  p.n = domain.size();
  p.states.reserve(p.n * p.state_dim);
  p.bins.reserve(p.n * p.action_dim);
  for (const auto& t : domain.trajectories) {
    for (std::size_t i = 0; i < t.length(); ++i) {
      p.states.insert(p.states.end(), t.states[i].begin(), t.states[i].end());
      const Vec norm = apply_normalizer(t.actions[i], st);
      for (double v : norm) {
        p.bins.push_back(static_cast<std::uint16_t>(discretize_value(v, disc)));
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Serialization. One norm_stats.json per dataset, holding every domain's
// record plus the binning settings and the preprocessing content hash.
// ---------------------------------------------------------------------------

struct PreprocessSettings {
  NormScheme scheme = NormScheme::gaussian;
  int bins = 256;
  double clip = 5.0;
  double val_fraction = 0.05;
  std::uint64_t split_seed = 0;
};

/// Content hash over the preprocessing settings and the dataset identity.
/// Stage outputs carry this hash and refuse to combine when it differs.
inline std::string preprocess_hash(const PreprocessSettings& s, const std::vector<Domain>& domains) {
  nlohmann::json j;
  j["scheme"] = to_string(s.scheme);
  j["bins"] = s.bins;
  j["clip"] = s.clip;
  j["val_fraction"] = s.val_fraction;
  j["split_seed"] = s.split_seed;
  auto doms = nlohmann::json::array();
  for (const auto& d : domains) {
    doms.push_back({{"name", d.name},
                    {"d_s", d.state_dim},
                    {"d_a", d.action_dim},
                    {"pairs", d.size()}});
  }
  j["domains"] = doms;
  return to_hex(fnv1a64(j.dump()));
}

inline nlohmann::json stats_to_json(const NormalizationStats& st) {
  return nlohmann::json{{"scheme", to_string(st.scheme)}, {"domain_id", st.domain_id},
                        {"mean", st.mean},               {"std", st.stddev},
                        {"min", st.min},                 {"max", st.max}};
}

inline NormalizationStats stats_from_json(const nlohmann::json& j) {
  NormalizationStats st;
  st.scheme = norm_scheme_from_string(j.at("scheme").get<std::string>());
  st.domain_id = j.at("domain_id").get<int>();
  st.mean = j.at("mean").get<Vec>();
  st.stddev = j.at("std").get<Vec>();
  st.min = j.at("min").get<Vec>();
  st.max = j.at("max").get<Vec>();
  return st;
}

struct PreprocessArtifact {
  PreprocessSettings settings;
  std::string hash;
  std::vector<std::string> domain_names;           // manifest order
  std::vector<NormalizationStats> domain_stats;    // manifest order
};

inline nlohmann::json preprocess_to_json(const PreprocessArtifact& a) {
  nlohmann::json j;
  j["version"] = 1;
  j["scheme"] = to_string(a.settings.scheme);
  j["bins"] = a.settings.bins;
  j["clip"] = a.settings.clip;
  j["val_fraction"] = a.settings.val_fraction;
  j["split_seed"] = a.settings.split_seed;
  j["hash"] = a.hash;
  auto doms = nlohmann::json::array();
  for (std::size_t i = 0; i < a.domain_names.size(); ++i) {
    auto rec = stats_to_json(a.domain_stats[i]);
    rec["name"] = a.domain_names[i];
    doms.push_back(rec);
  }
  j["domains"] = doms;
  return j;
}

inline PreprocessArtifact preprocess_from_json(const nlohmann::json& j) {
  PreprocessArtifact a;
  a.settings.scheme = norm_scheme_from_string(j.at("scheme").get<std::string>());
  a.settings.bins = j.at("bins").get<int>();
  a.settings.clip = j.at("clip").get<double>();
  a.settings.val_fraction = j.at("val_fraction").get<double>();
  a.settings.split_seed = j.at("split_seed").get<std::uint64_t>();
  a.hash = j.at("hash").get<std::string>();
  for (const auto& rec : j.at("domains")) {
    a.domain_names.push_back(rec.at("name").get<std::string>());
    a.domain_stats.push_back(stats_from_json(rec));
  }
  return a;
}

inline void save_preprocess(const std::filesystem::path& path, const PreprocessArtifact& a) {
  std::ofstream out(path);
  if (!out) throw validation_error("cannot write " + path.string());
  out << preprocess_to_json(a).dump(2) << '\n';
}

inline PreprocessArtifact load_preprocess(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw validation_error("preprocess artifact not found: " + path.string());
  nlohmann::json j;
  in >> j;
  return preprocess_from_json(j);
}

}  // namespace mixopt
