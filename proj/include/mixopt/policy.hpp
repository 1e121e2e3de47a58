#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixopt/common.hpp"

namespace mixopt {

/// Dense layer, weights row-major (out x in).
struct Layer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> w;
  std::vector<double> b;

  static Layer zeros(std::size_t in, std::size_t out) {
    Layer l;
    l.in = in;
    l.out = out;
    l.w.assign(in * out, 0.0);
    l.b.assign(out, 0.0);
    return l;
  }
};

/// ReLU MLP mapping a state to d_a independent categorical heads of B logits
/// each; output layer width is exactly d_a * B.
struct PolicyParams {
  std::size_t d_s = 0;
  std::size_t d_a = 0;
  std::size_t bins = 0;
  std::vector<std::size_t> hidden;
  std::vector<Layer> layers;  // hidden layers then the logit layer
  std::uint64_t init_seed = 0;

  std::size_t logit_width() const { return d_a * bins; }
  bool same_shape(const PolicyParams& o) const {
    return d_s == o.d_s && d_a == o.d_a && bins == o.bins && hidden == o.hidden;
  }
};

/// Fan-in-scaled normal weights, zero biases.
inline PolicyParams init_policy(std::size_t d_s, std::size_t d_a, std::size_t bins,
                                const std::vector<std::size_t>& hidden, std::uint64_t seed) {
  if (d_s == 0 || d_a == 0 || bins < 2) throw validation_error("invalid policy dimensions");
  PolicyParams p;
  p.d_s = d_s;
  p.d_a = d_a;
  p.bins = bins;
  p.hidden = hidden;
  p.init_seed = seed;
  Rng rng(mix_seed(seed, str_tag("init")));
  std::size_t in = d_s;
  for (std::size_t h : hidden) {
    Layer l = Layer::zeros(in, h);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& w : l.w) w = scale * rng.normal();
    p.layers.push_back(std::move(l));
    in = h;
  }
  Layer out = Layer::zeros(in, p.logit_width());
  const double scale = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& w : out.w) w = scale * rng.normal();
  p.layers.push_back(std::move(out));
  return p;
}

/// Reusable forward/backward buffers.
struct PolicyWorkspace {
  std::vector<std::vector<double>> post;   // per-layer outputs; back() = logits
  std::vector<std::vector<double>> delta;  // per-layer backprop buffers

  void resize(const PolicyParams& p) {
    post.resize(p.layers.size());
    delta.resize(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      post[l].assign(p.layers[l].out, 0.0);
      delta[l].assign(p.layers[l].out, 0.0);
    }
  }
};

/// Forward pass; leaves logits in ws.post.back().
inline void forward(const PolicyParams& p, const double* state, PolicyWorkspace& ws) {
  const double* x = state;
  std::size_t x_len = p.d_s;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const Layer& layer = p.layers[l];
    std::vector<double>& y = ws.post[l];
    const bool is_output = (l + 1 == p.layers.size());
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double* wr = layer.w.data() + o * layer.in;
      double z = layer.b[o];
      for (std::size_t i = 0; i < x_len; ++i) z += wr[i] * x[i];
      y[o] = is_output ? z : (z > 0.0 ? z : 0.0);
    }
    x = y.data();
    x_len = layer.out;
  }
}

inline double log_sum_exp(const double* v, std::size_t n) {
  double m = v[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, v[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

/// Sum over heads of categorical negative log-likelihood, straight from
/// logits. Always >= 0; equals d_a*ln(B) at uniform logits.
inline double nll_from_logits(const double* logits, const std::uint16_t* bins, std::size_t d_a,
                              std::size_t B) {
  double total = 0.0;
  for (std::size_t d = 0; d < d_a; ++d) {
    const double* head = logits + d * B;
    if (bins[d] >= B) throw validation_error("action bin out of range");
    total += log_sum_exp(head, B) - head[bins[d]];
  }
  return total;
}

inline double nll(const PolicyParams& p, const double* state, const std::uint16_t* bins,
                  PolicyWorkspace& ws) {
  forward(p, state, ws);
  return nll_from_logits(ws.post.back().data(), bins, p.d_a, p.bins);
}

/// Convenience overload for tests and small callers.
inline double nll(const PolicyParams& p, const std::vector<double>& state,
                  const std::vector<std::uint16_t>& bins) {
  PolicyWorkspace ws;
  ws.resize(p);
  return nll(p, state.data(), bins.data(), ws);
}

struct Gradient {
  std::vector<Layer> layers;  // same shapes as the policy; w/b hold partials

  void resize(const PolicyParams& p) {
    layers.clear();
    for (const auto& l : p.layers) layers.push_back(Layer::zeros(l.in, l.out));
  }
  void zero() {
    for (auto& l : layers) {
      std::fill(l.w.begin(), l.w.end(), 0.0);
      std::fill(l.b.begin(), l.b.end(), 0.0);
    }
  }
};

struct BatchExample {
  const double* state = nullptr;
  const std::uint16_t* bins = nullptr;
};

/// Gradient of (sum_j w_j nll_j) / (sum_j w_j) by exact backpropagation.
/// Returns the weighted mean loss.
inline double grad_nll(const PolicyParams& p, std::span<const BatchExample> batch,
                       std::span<const double> weights, Gradient& grad, PolicyWorkspace& ws) {
  if (batch.empty() || batch.size() != weights.size()) {
    throw validation_error("batch/weights size mismatch");
  }
  double weight_sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw validation_error("weights must be finite and >= 0");
    weight_sum += w;
  }
  if (weight_sum <= 0.0) throw validation_error("weights sum to zero");

  grad.resize(p);
  grad.zero();
  const std::size_t n_layers = p.layers.size();
  double loss = 0.0;

  for (std::size_t j = 0; j < batch.size(); ++j) {
    const double wj = weights[j] / weight_sum;
    if (wj == 0.0) continue;
    forward(p, batch[j].state, ws);
    const std::vector<double>& logits = ws.post.back();

    // Output deltas: wj * (softmax - onehot) per head.
    std::vector<double>& dout = ws.delta.back();
    for (std::size_t d = 0; d < p.d_a; ++d) {
      const double* head = logits.data() + d * p.bins;
      if (batch[j].bins[d] >= p.bins) throw validation_error("action bin out of range");
      const double lse = log_sum_exp(head, p.bins);
      loss += wj * (lse - head[batch[j].bins[d]]);
      double* dh = dout.data() + d * p.bins;
      for (std::size_t i = 0; i < p.bins; ++i) dh[i] = wj * std::exp(head[i] - lse);
      dh[batch[j].bins[d]] -= wj;
    }

    // Backward through the stack.
    for (std::size_t l = n_layers; l-- > 0;) {
      const Layer& layer = p.layers[l];
      Layer& g = grad.layers[l];
      const double* x = l == 0 ? batch[j].state : ws.post[l - 1].data();
      const std::vector<double>& delta = ws.delta[l];
      for (std::size_t o = 0; o < layer.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        g.b[o] += d;
        double* gw = g.w.data() + o * layer.in;
        for (std::size_t i = 0; i < layer.in; ++i) gw[i] += d * x[i];
      }
      if (l == 0) break;
      std::vector<double>& dprev = ws.delta[l - 1];
      const std::vector<double>& prev_post = ws.post[l - 1];
      for (std::size_t i = 0; i < layer.in; ++i) {
        if (prev_post[i] <= 0.0) {  // ReLU gate
          dprev[i] = 0.0;
          continue;
        }
        double s = 0.0;
        for (std::size_t o = 0; o < layer.out; ++o) {
          s += delta[o] * layer.w[o * layer.in + i];
        }
        dprev[i] = s;
      }
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Adam with bias correction and a cosine learning-rate decay to zero.
// ---------------------------------------------------------------------------

struct AdamState {
  double base_lr = 2e-4;
  std::int64_t total_steps = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;  // completed steps
  std::vector<Layer> m;
  std::vector<Layer> v;
};

inline AdamState init_adam(const PolicyParams& p, double base_lr, std::int64_t total_steps) {
  AdamState s;
  s.base_lr = base_lr;
  s.total_steps = std::max<std::int64_t>(1, total_steps);
  for (const auto& l : p.layers) {
    s.m.push_back(Layer::zeros(l.in, l.out));
    s.v.push_back(Layer::zeros(l.in, l.out));
  }
  return s;
}

inline double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

inline double current_lr(const AdamState& s) { return cosine_lr(s.base_lr, s.step, s.total_steps); }

inline void adam_step(PolicyParams& p, AdamState& s, const Gradient& grad) {
  if (s.m.size() != p.layers.size() || grad.layers.size() != p.layers.size()) {
    throw validation_error("optimizer/gradient shape mismatch");
  }
  for (const auto& g : grad.layers) {
    if (!all_finite(g.w) || !all_finite(g.b)) {
      throw numerical_error("non-finite gradient at optimizer step " + std::to_string(s.step));
    }
  }
  const double lr = current_lr(s);
  s.step += 1;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));

  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto update = [&](std::vector<double>& theta, std::vector<double>& m, std::vector<double>& v,
                      const std::vector<double>& g) {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        theta[i] -= lr * mhat / (std::sqrt(vhat) + s.eps);
      }
    };
    update(p.layers[l].w, s.m[l].w, s.v[l].w, grad.layers[l].w);
    update(p.layers[l].b, s.m[l].b, s.v[l].b, grad.layers[l].b);
  }
  for (const auto& l : p.layers) {
    if (!all_finite(l.w) || !all_finite(l.b)) {
      throw numerical_error("non-finite parameter after optimizer step " + std::to_string(s.step));
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON dump of parameters, optimizer state and step counter.
// Doubles use shortest round-trip encoding, so reloads are bit-exact.
// ---------------------------------------------------------------------------

inline nlohmann::json layer_to_json(const Layer& l) {
  return nlohmann::json{{"in", l.in}, {"out", l.out}, {"w", l.w}, {"b", l.b}};
}

inline Layer layer_from_json(const nlohmann::json& j) {
  Layer l;
  l.in = j.at("in").get<std::size_t>();
  l.out = j.at("out").get<std::size_t>();
  l.w = j.at("w").get<std::vector<double>>();
  l.b = j.at("b").get<std::vector<double>>();
  if (l.w.size() != l.in * l.out || l.b.size() != l.out) {
    throw validation_error("corrupt layer in checkpoint");
  }
  return l;
}

inline nlohmann::json policy_to_json(const PolicyParams& p) {
  nlohmann::json j;
  j["d_s"] = p.d_s;
  j["d_a"] = p.d_a;
  j["bins"] = p.bins;
  j["hidden"] = p.hidden;
  j["init_seed"] = p.init_seed;
  auto layers = nlohmann::json::array();
  for (const auto& l : p.layers) layers.push_back(layer_to_json(l));
  j["layers"] = layers;
  return j;
}

inline PolicyParams policy_from_json(const nlohmann::json& j) {
  PolicyParams p;
  p.d_s = j.at("d_s").get<std::size_t>();
  p.d_a = j.at("d_a").get<std::size_t>();
  p.bins = j.at("bins").get<std::size_t>();
  p.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  p.init_seed = j.at("init_seed").get<std::uint64_t>();
  for (const auto& jl : j.at("layers")) p.layers.push_back(layer_from_json(jl));
  return p;
}

inline nlohmann::json adam_to_json(const AdamState& s) {
  nlohmann::json j;
  j["base_lr"] = s.base_lr;
  j["total_steps"] = s.total_steps;
  j["beta1"] = s.beta1;
  j["beta2"] = s.beta2;
  j["eps"] = s.eps;
  j["step"] = s.step;
  auto m = nlohmann::json::array();
  for (const auto& l : s.m) m.push_back(layer_to_json(l));
  auto v = nlohmann::json::array();
  for (const auto& l : s.v) v.push_back(layer_to_json(l));
  j["m"] = m;
  j["v"] = v;
  return j;
}

inline AdamState adam_from_json(const nlohmann::json& j) {
  AdamState s;
  s.base_lr = j.at("base_lr").get<double>();
  s.total_steps = j.at("total_steps").get<std::int64_t>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps = j.at("eps").get<double>();
  s.step = j.at("step").get<std::int64_t>();
  for (const auto& jl : j.at("m")) s.m.push_back(layer_from_json(jl));
  for (const auto& jl : j.at("v")) s.v.push_back(layer_from_json(jl));
  return s;
}

struct Checkpoint {
  std::int64_t step = 0;
  PolicyParams policy;
  AdamState adam;
  std::string preprocess_hash;
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  nlohmann::json j;
  j["kind"] = "mixopt_checkpoint";
  j["version"] = 1;
  j["step"] = c.step;
  j["preprocess_hash"] = c.preprocess_hash;
  j["policy"] = policy_to_json(c.policy);
  j["adam"] = adam_to_json(c.adam);
  std::ofstream out(path);
  if (!out) throw validation_error("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw validation_error("checkpoint not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  if (j.value("kind", "") != "mixopt_checkpoint" || j.value("version", 0) != 1) {
    throw validation_error("not a recognized checkpoint: " + path.string());
  }
  Checkpoint c;
  c.step = j.at("step").get<std::int64_t>();
  c.preprocess_hash = j.at("preprocess_hash").get<std::string>();
  c.policy = policy_from_json(j.at("policy"));
  c.adam = adam_from_json(j.at("adam"));
  return c;
}

}  // namespace mixopt
