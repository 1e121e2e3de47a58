#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mixopt/common.hpp"

namespace mixopt {

using Vec = std::vector<double>;

/// One episode: equal-length state and action sequences.
struct Trajectory {
  std::vector<Vec> states;   // T x d_s
  std::vector<Vec> actions;  // T x d_a

  std::size_t length() const { return states.size(); }
};

/// A named group of trajectories sharing state/action dimensions.
struct Domain {
  int id = 0;
  std::string name;
  std::vector<Trajectory> trajectories;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;

  /// Total state-action pairs.
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.length();
    return n;
  }
};

struct ManifestEntry {
  std::string name;
  std::string path;  // relative to the manifest
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::size_t n_trajectories = 0;
};

struct Manifest {
  int version = 1;
  std::vector<ManifestEntry> domains;
};

struct SplitSpec {
  double val_fraction = 0.05;  // in (0, 1)
  std::uint64_t seed = 0;
};

namespace detail {

inline void validate_trajectory(const Trajectory& t, const std::string& domain,
                                std::size_t index, std::size_t d_s, std::size_t d_a) {
  if (t.states.empty() || t.states.size() != t.actions.size()) {
    throw validation_error("domain '" + domain + "' trajectory " + std::to_string(index) +
                           ": states/actions length mismatch or empty");
  }
  for (std::size_t i = 0; i < t.states.size(); ++i) {
    if (t.states[i].size() != d_s || t.actions[i].size() != d_a) {
      throw validation_error("domain '" + domain + "' trajectory " + std::to_string(index) +
                             ": dimension mismatch at step " + std::to_string(i));
    }
    if (!all_finite(t.states[i]) || !all_finite(t.actions[i])) {
      throw validation_error("domain '" + domain + "' trajectory " + std::to_string(index) +
                             ": non-finite value at step " + std::to_string(i));
    }
  }
}

}  // namespace detail

inline void validate_domain(const Domain& d) {
  if (d.trajectories.empty()) return;  // empty domains are valid (subset output)
  for (std::size_t i = 0; i < d.trajectories.size(); ++i) {
    detail::validate_trajectory(d.trajectories[i], d.name, i, d.state_dim, d.action_dim);
  }
}

// ---------------------------------------------------------------------------
// On-disk format.
//
//   manifest.json   {"version":1,"domains":[{name,path,d_s,d_a,n_trajectories}]}
//   <name>.jsonl    one trajectory per line: {"actions":[[..]..],"states":[[..]..]}
//
// Numbers are written in shortest round-trip decimal form, so a load/save
// cycle is byte-identical.
// ---------------------------------------------------------------------------

inline nlohmann::json trajectory_to_json(const Trajectory& t) {
  return nlohmann::json{{"states", t.states}, {"actions", t.actions}};
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  t.states = j.at("states").get<std::vector<Vec>>();
  t.actions = j.at("actions").get<std::vector<Vec>>();
  return t;
}

inline void save_dataset(const std::filesystem::path& dir, const std::vector<Domain>& domains) {
  std::filesystem::create_directories(dir);
  nlohmann::json mf;
  mf["version"] = 1;
  mf["domains"] = nlohmann::json::array();
  for (const auto& d : domains) {
    mf["domains"].push_back({{"name", d.name},
                             {"path", d.name + ".jsonl"},
                             {"d_s", d.state_dim},
                             {"d_a", d.action_dim},
                             {"n_trajectories", d.trajectories.size()}});
    std::ofstream out(dir / (d.name + ".jsonl"));
    if (!out) throw validation_error("cannot write " + (dir / (d.name + ".jsonl")).string());
    for (const auto& t : d.trajectories) {
      out << trajectory_to_json(t).dump() << '\n';
    }
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw validation_error("cannot write " + (dir / "manifest.json").string());
  out << mf.dump(2) << '\n';
}

inline std::pair<Manifest, std::vector<Domain>> load_manifest(const std::filesystem::path& path) {
  const std::filesystem::path mf_path =
      std::filesystem::is_directory(path) ? path / "manifest.json" : path;
  std::ifstream in(mf_path);
  if (!in) throw validation_error("manifest not found: " + mf_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("malformed manifest " + mf_path.string() + ": " + e.what());
  }

  Manifest mf;
  mf.version = j.at("version").get<int>();
  if (mf.version != 1) {
    throw validation_error("unsupported manifest version " + std::to_string(mf.version));
  }

  std::vector<Domain> domains;
  const auto base = mf_path.parent_path();
  for (const auto& je : j.at("domains")) {
    ManifestEntry e;
    e.name = je.at("name").get<std::string>();
    e.path = je.at("path").get<std::string>();
    e.state_dim = je.at("d_s").get<std::size_t>();
    e.action_dim = je.at("d_a").get<std::size_t>();
    e.n_trajectories = je.at("n_trajectories").get<std::size_t>();
    for (const auto& prev : mf.domains) {
      if (prev.name == e.name) throw validation_error("duplicate domain name '" + e.name + "'");
    }
    mf.domains.push_back(e);

    Domain d;
    d.id = static_cast<int>(domains.size());
    d.name = e.name;
    d.state_dim = e.state_dim;
    d.action_dim = e.action_dim;
    std::ifstream df(base / e.path);
    if (!df) throw validation_error("domain file missing: " + (base / e.path).string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(df, line)) {
      if (line.empty()) continue;
      nlohmann::json jt;
      try {
        jt = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& ex) {
        throw validation_error("domain '" + e.name + "' trajectory " + std::to_string(line_no) +
                               ": parse error: " + ex.what());
      }
      Trajectory t = trajectory_from_json(jt);
      detail::validate_trajectory(t, e.name, line_no, e.state_dim, e.action_dim);
      d.trajectories.push_back(std::move(t));
      ++line_no;
    }
    if (d.trajectories.size() != e.n_trajectories) {
      throw validation_error("domain '" + e.name + "': manifest declares " +
                             std::to_string(e.n_trajectories) + " trajectories, file has " +
                             std::to_string(d.trajectories.size()));
    }
    domains.push_back(std::move(d));
  }
  return {mf, domains};
}

// ---------------------------------------------------------------------------
// Train/validation split, at trajectory granularity.
// ---------------------------------------------------------------------------

inline std::pair<Domain, Domain> split_train_val(const Domain& domain, const SplitSpec& spec) {
  if (!(spec.val_fraction > 0.0 && spec.val_fraction < 1.0)) {
    throw validation_error("val_fraction must be in (0,1)");
  }
  const std::size_t n = domain.trajectories.size();
  if (n < 2) {
    throw validation_error("domain '" + domain.name +
                           "' has fewer than 2 trajectories; cannot hold out validation data");
  }
  std::size_t n_val = static_cast<std::size_t>(std::ceil(spec.val_fraction * static_cast<double>(n)));
  n_val = std::max<std::size_t>(1, std::min(n_val, n - 1));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(domain.id)));
  rng.shuffle(order);

  std::vector<bool> in_val(n, false);
  for (std::size_t i = 0; i < n_val; ++i) in_val[order[i]] = true;

  Domain train, val;
  train.id = val.id = domain.id;
  train.name = val.name = domain.name;
  train.state_dim = val.state_dim = domain.state_dim;
  train.action_dim = val.action_dim = domain.action_dim;
  for (std::size_t i = 0; i < n; ++i) {
    (in_val[i] ? val : train).trajectories.push_back(domain.trajectories[i]);
  }
  return {train, val};
}

// ---------------------------------------------------------------------------
// Synthetic suites.
//
// All generators are pure functions of (kind, seed, sizes). States follow a
// smooth AR(1) process; action maps are fixed random features of the state.
// ---------------------------------------------------------------------------

enum class SuiteKind { noise_pair, operator_tiers, multimodal };

inline SuiteKind suite_kind_from_string(const std::string& s) {
  if (s == "noise_pair") return SuiteKind::noise_pair;
  if (s == "operator_tiers") return SuiteKind::operator_tiers;
  if (s == "multimodal") return SuiteKind::multimodal;
  throw validation_error("unknown suite kind '" + s + "'");
}

inline std::string to_string(SuiteKind k) {
  switch (k) {
    case SuiteKind::noise_pair: return "noise_pair";
    case SuiteKind::operator_tiers: return "operator_tiers";
    case SuiteKind::multimodal: return "multimodal";
  }
  return "?";
}

/// Latent dimension of the synthetic state processes; the full state is the
/// latent vector concatenated with the previous action.
constexpr std::size_t kLatentDim = 4;

namespace detail {

/// Fixed random linear features used by the synthetic action maps.
struct StateActionMap {
  std::vector<Vec> w;  // d_a x d_s
  Vec b;               // d_a

  static StateActionMap make(std::size_t d_s, std::size_t d_a, Rng& rng) {
    StateActionMap m;
    m.w.assign(d_a, Vec(d_s));
    m.b.assign(d_a, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_s));
    for (std::size_t j = 0; j < d_a; ++j) {
      for (std::size_t i = 0; i < d_s; ++i) m.w[j][i] = rng.normal() * scale;
      m.b[j] = 0.25 * rng.normal();
    }
    return m;
  }

  double feature(const Vec& s, std::size_t j) const {
    double z = m_dot(w[j], s) + b[j];
    return z;
  }

 private:
  static double m_dot(const Vec& a, const Vec& b) {
    double r = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) r += a[i] * b[i];
    return r;
  }
};

/// AR(1) state sequence: s_{t+1} = 0.9 s_t + 0.3 xi, stationary std ~0.69.
inline std::vector<Vec> make_states(std::size_t steps, std::size_t d_s, Rng& rng) {
  std::vector<Vec> states(steps, Vec(d_s));
  for (std::size_t i = 0; i < d_s; ++i) states[0][i] = 0.7 * rng.normal();
  for (std::size_t t = 1; t < steps; ++t) {
    for (std::size_t i = 0; i < d_s; ++i) {
      states[t][i] = 0.9 * states[t - 1][i] + 0.3 * rng.normal();
    }
  }
  return states;
}

/// Chops a stream of `pairs` state-action steps into trajectories of varying
/// length so the domain has exactly `pairs` state-action pairs. States and
/// trajectory lengths come from `state_rng` only, so two domains built from
/// equal state seeds see identical states.
template <typename ActionFn>
inline Domain make_domain(int id, const std::string& name, std::size_t d_s, std::size_t d_a,
                          std::size_t pairs, Rng& state_rng, ActionFn&& action_of) {
  Domain d;
  d.id = id;
  d.name = name;
  d.state_dim = d_s;
  d.action_dim = d_a;
  std::size_t remaining = pairs;
  while (remaining > 0) {
    std::size_t len = std::min<std::size_t>(remaining, 30 + state_rng.index(31));
    Trajectory t;
    t.states = make_states(len, d_s, state_rng);
    t.actions.reserve(len);
    for (const auto& s : t.states) t.actions.push_back(action_of(s));
    d.trajectories.push_back(std::move(t));
    remaining -= len;
  }
  return d;
}

/// Domains whose state is [latent, previous action]. Latent sequences and
/// trajectory lengths come from `latent_seed` alone, so domains built with
/// the same latent seed share them; the lagged-action block is the domain's
/// own. The action function sees the latent vector plus a noise stream.
template <typename ActionFn>
inline Domain make_lagged_domain(int id, const std::string& name, std::size_t d_a,
                                 std::size_t pairs, std::uint64_t latent_seed, Rng& action_rng,
                                 ActionFn&& action_of) {
  Domain d;
  d.id = id;
  d.name = name;
  d.state_dim = kLatentDim + d_a;
  d.action_dim = d_a;
  Rng latent_rng(latent_seed);
  std::size_t remaining = pairs;
  while (remaining > 0) {
    std::size_t len = std::min<std::size_t>(remaining, 30 + latent_rng.index(31));
    const auto latents = make_states(len, kLatentDim, latent_rng);
    Trajectory t;
    Vec prev_action(d_a, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
      Vec s(d.state_dim);
      std::copy(latents[i].begin(), latents[i].end(), s.begin());
      std::copy(prev_action.begin(), prev_action.end(), s.begin() + kLatentDim);
      Vec a = action_of(latents[i], action_rng);
      prev_action = a;
      t.states.push_back(std::move(s));
      t.actions.push_back(std::move(a));
    }
    d.trajectories.push_back(std::move(t));
    remaining -= len;
  }
  return d;
}

}  // namespace detail

/// Builds one of the built-in synthetic suites. `sizes` gives the number of
/// state-action pairs per domain; a single entry is broadcast to all domains.
inline std::vector<Domain> generate_synthetic_suite(SuiteKind kind, std::uint64_t seed,
                                                    std::vector<std::size_t> sizes) {
  const std::size_t k = kind == SuiteKind::operator_tiers ? 6 : 2;
  if (sizes.size() == 1) sizes.assign(k, sizes[0]);
  if (sizes.size() != k) {
    throw validation_error("suite '" + to_string(kind) + "' needs " + std::to_string(k) +
                           " sizes, got " + std::to_string(sizes.size()));
  }
  for (std::size_t s : sizes) {
    if (s == 0) throw validation_error("domain sizes must be positive");
  }

  std::vector<Domain> out;
  switch (kind) {
    case SuiteKind::noise_pair: {
      // Domain "scripted": a bounded smooth response to the latent state plus
      // small observation noise, spiced with rare unpredictable outlier
      // spikes the way teleoperated actuation data is. The typical action
      // magnitude stays far below the extremes set by the spikes. Domain
      // "noise": the same latent state sequences with i.i.d. standard normal
      // actions, unpredictable by construction. States are the latent
      // process concatenated with the domain's own previous action, so a
      // policy can treat the two domains independently.
      const std::size_t d_a = 4;
      Rng map_rng(mix_seed(seed, str_tag("map")));
      auto map = detail::StateActionMap::make(kLatentDim, d_a, map_rng);
      Rng scripted_rng(mix_seed(seed, str_tag("scripted")));
      auto scripted = [&](const Vec& z, Rng& rng) {
        Vec a(d_a);
        for (std::size_t j = 0; j < d_a; ++j) {
          const double f = map.feature(z, j);
          a[j] = 0.05 * std::tanh(2.0 * f) + 0.01 * rng.normal();
          if (rng.uniform() < 0.002) {
            a[j] += (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.4, 1.0);
          }
        }
        return a;
      };
      out.push_back(detail::make_lagged_domain(0, "scripted", d_a, sizes[0],
                                               mix_seed(seed, str_tag("states")), scripted_rng,
                                               scripted));
      Rng noise_rng(mix_seed(seed, str_tag("noise")));
      auto noise = [&](const Vec&, Rng& rng) {
        Vec a(d_a);
        for (std::size_t j = 0; j < d_a; ++j) a[j] = rng.normal();
        return a;
      };
      out.push_back(detail::make_lagged_domain(1, "noise", d_a, sizes[1],
                                               mix_seed(seed, str_tag("states")), noise_rng,
                                               noise));
      break;
    }
    case SuiteKind::operator_tiers: {
      // Six domains share one smooth latent->action map; what differs is the
      // additive execution noise, two domains per tier.
      const std::size_t d_a = 4;
      const double tier_noise[3] = {0.01, 0.08, 0.35};
      const char* tier_name[3] = {"better", "okay", "worse"};
      Rng map_rng(mix_seed(seed, str_tag("map")));
      auto map = detail::StateActionMap::make(kLatentDim, d_a, map_rng);
      int id = 0;
      for (int tier = 0; tier < 3; ++tier) {
        for (int rep = 1; rep <= 2; ++rep) {
          std::string name = std::string(tier_name[tier]) + "_" + std::to_string(rep);
          Rng rng(mix_seed(seed, str_tag(name)));
          const double sigma = tier_noise[tier];
          auto op = [&](const Vec& z, Rng& noise_rng) {
            Vec a(d_a);
            for (std::size_t j = 0; j < d_a; ++j) {
              a[j] = 0.1 * std::tanh(2.0 * map.feature(z, j)) + sigma * noise_rng.normal();
            }
            return a;
          };
          out.push_back(detail::make_lagged_domain(id, name, d_a, sizes[id],
                                                   mix_seed(seed, str_tag(name + "_states")), rng,
                                                   op));
          ++id;
        }
      }
      break;
    }
    case SuiteKind::multimodal: {
      const std::size_t d_s = 4, d_a = 2;
      Rng rng_m(mix_seed(seed, str_tag("bimodal")));
      auto bimodal = [&](const Vec&) {
        Vec a(d_a);
        for (std::size_t j = 0; j < d_a; ++j) {
          const double mode = rng_m.uniform() < 0.5 ? -1.5 : 1.5;
          a[j] = mode + 0.1 * rng_m.normal();
        }
        return a;
      };
      out.push_back(detail::make_domain(0, "bimodal", d_s, d_a, sizes[0], rng_m, bimodal));
      Rng rng_u(mix_seed(seed, str_tag("unimodal")));
      auto unimodal = [&](const Vec&) {
        Vec a(d_a);
        for (std::size_t j = 0; j < d_a; ++j) a[j] = 0.1 * rng_u.normal();
        return a;
      };
      out.push_back(detail::make_domain(1, "unimodal", d_s, d_a, sizes[1], rng_u, unimodal));
      break;
    }
  }
  for (const auto& d : out) validate_domain(d);
  return out;
}

/// The deterministic part of the noise_pair "scripted" action map (applied to
/// the latent block of a state), exposed so tests can measure residuals.
inline Vec noise_pair_scripted_mean(const Vec& state, std::uint64_t seed) {
  const std::size_t d_a = 4;
  Rng map_rng(mix_seed(seed, str_tag("map")));
  auto map = detail::StateActionMap::make(kLatentDim, d_a, map_rng);
  const Vec z(state.begin(), state.begin() + kLatentDim);
  Vec a(d_a);
  for (std::size_t j = 0; j < d_a; ++j) {
    const double f = map.feature(z, j);
    a[j] = 0.05 * std::tanh(2.0 * f);
  }
  return a;
}

/// Same for operator_tiers: the shared noiseless map.
inline Vec operator_tiers_mean(const Vec& state, std::uint64_t seed) {
  const std::size_t d_a = 4;
  Rng map_rng(mix_seed(seed, str_tag("map")));
  auto map = detail::StateActionMap::make(kLatentDim, d_a, map_rng);
  const Vec z(state.begin(), state.begin() + kLatentDim);
  Vec a(d_a);
  for (std::size_t j = 0; j < d_a; ++j) a[j] = 0.1 * std::tanh(2.0 * map.feature(z, j));
  return a;
}

}  // namespace mixopt
