#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mixopt/common.hpp"
#include "mixopt/policy.hpp"
#include "mixopt/preprocess.hpp"
#include "mixopt/weights.hpp"

namespace mixopt {

struct TrainConfig {
  std::int64_t total_steps = 2000;
  std::int64_t eval_interval = 200;  // must divide total_steps
  std::int64_t batch_size = 256;
  double lr = 2e-4;
  std::uint64_t seed = 0;
  double overfit_delta = 0.1;  // nats
  std::int64_t eval_subset = 2048;
  std::vector<std::size_t> hidden = {256, 256};
};

inline void validate(const TrainConfig& c) {
  if (c.total_steps <= 0 || c.eval_interval <= 0 || c.batch_size <= 0 || c.eval_subset <= 0) {
    throw validation_error("training step/batch counts must be positive");
  }
  if (c.total_steps % c.eval_interval != 0) {
    throw validation_error("eval_interval must divide total_steps");
  }
  if (!(c.overfit_delta > 0.0)) throw validation_error("overfit_delta must be positive");
  if (!(c.lr > 0.0)) throw validation_error("learning rate must be positive");
}

struct CheckpointRecord {
  std::int64_t step = 0;
  std::vector<double> train_loss;  // per domain
  std::vector<double> val_loss;    // per domain
  std::string checkpoint_path;
};

struct ReferenceRun {
  std::vector<std::string> domain_names;
  std::vector<CheckpointRecord> records;
};

/// Size-proportional mixture: alpha_i = size_i / sum_j size_j.
inline MixtureWeights uniform_weights(const std::vector<std::size_t>& sizes) {
  if (sizes.empty()) throw validation_error("no domains");
  double total = 0.0;
  for (std::size_t s : sizes) {
    if (s == 0) throw validation_error("domain with zero size");
    total += static_cast<double>(s);
  }
  MixtureWeights w;
  w.provenance = Provenance::uniform;
  for (std::size_t s : sizes) w.alpha.push_back(static_cast<double>(s) / total);
  return w;
}

inline MixtureWeights uniform_weights(const std::vector<Domain>& domains) {
  std::vector<std::size_t> sizes;
  for (const auto& d : domains) sizes.push_back(d.size());
  return uniform_weights(sizes);
}

inline MixtureWeights uniform_weights(const std::vector<PreparedDomain>& domains) {
  std::vector<std::size_t> sizes;
  for (const auto& d : domains) sizes.push_back(d.n);
  return uniform_weights(sizes);
}

/// Mean NLL of `policy` over the given examples of one prepared domain.
inline double mean_nll(const PolicyParams& policy, const PreparedDomain& d,
                       const std::vector<std::size_t>& indices, PolicyWorkspace& ws) {
  if (indices.empty()) throw validation_error("empty evaluation subset");
  KahanSum sum;
  for (std::size_t i : indices) {
    sum.add(nll(policy, d.state(i), d.action_bins(i), ws));
  }
  return sum.value() / static_cast<double>(indices.size());
}

namespace detail {

/// Frozen evaluation subset: the first min(cap, n) positions of a seeded
/// shuffle, so per-domain curves are comparable across steps.
inline std::vector<std::size_t> eval_subset_indices(std::size_t n, std::int64_t cap,
                                                    std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  if (static_cast<std::size_t>(cap) < n) idx.resize(static_cast<std::size_t>(cap));
  return idx;
}

}  // namespace detail

/// Trains the reference policy on the size-proportional mixture, logging
/// per-domain train/val losses and writing a checkpoint at every eval
/// interval. Batches sample a domain by mixture weight, then an example
/// uniformly inside the domain.
inline ReferenceRun train_reference(const std::vector<PreparedDomain>& train,
                                    const std::vector<PreparedDomain>& val,
                                    const TrainConfig& cfg,
                                    const std::filesystem::path& out_dir,
                                    const std::string& preprocess_hash) {
  validate(cfg);
  if (train.empty() || train.size() != val.size()) {
    throw validation_error("train/val domain lists must be non-empty and aligned");
  }
  const std::size_t k = train.size();
  const std::size_t d_s = train[0].state_dim;
  const std::size_t d_a = train[0].action_dim;
  const std::size_t bins = train[0].n_bins;
  for (const auto& d : train) {
    if (d.state_dim != d_s || d.action_dim != d_a || d.n_bins != bins || d.n == 0) {
      throw validation_error("inconsistent prepared domains");
    }
  }
  std::filesystem::create_directories(out_dir);

  const MixtureWeights mix = uniform_weights(train);
  PolicyParams policy =
      init_policy(d_s, d_a, bins, cfg.hidden, mix_seed(cfg.seed, str_tag("ref_policy")));
  AdamState adam = init_adam(policy, cfg.lr, cfg.total_steps);
  PolicyWorkspace ws;
  ws.resize(policy);
  Gradient grad;

  std::vector<std::vector<std::size_t>> train_eval(k), val_eval(k);
  for (std::size_t i = 0; i < k; ++i) {
    train_eval[i] = detail::eval_subset_indices(
        train[i].n, cfg.eval_subset, mix_seed(cfg.seed, str_tag("eval_train_" + train[i].name)));
    val_eval[i] = detail::eval_subset_indices(
        val[i].n, cfg.eval_subset, mix_seed(cfg.seed, str_tag("eval_val_" + val[i].name)));
  }

  Rng batch_rng(mix_seed(cfg.seed, str_tag("ref_batch")));
  std::vector<BatchExample> batch(static_cast<std::size_t>(cfg.batch_size));
  const std::vector<double> ones(static_cast<std::size_t>(cfg.batch_size), 1.0);

  ReferenceRun run;
  for (const auto& d : train) run.domain_names.push_back(d.name);

  for (std::int64_t step = 1; step <= cfg.total_steps; ++step) {
    for (auto& ex : batch) {
      const std::size_t dom = sample_categorical(batch_rng, mix.alpha);
      const std::size_t idx = batch_rng.index(train[dom].n);
      ex.state = train[dom].state(idx);
      ex.bins = train[dom].action_bins(idx);
    }
    const double loss = grad_nll(policy, batch, ones, grad, ws);
    if (!std::isfinite(loss)) {
      throw numerical_error("non-finite training loss at step " + std::to_string(step));
    }
    adam_step(policy, adam, grad);

    if (step % cfg.eval_interval == 0) {
      CheckpointRecord rec;
      rec.step = step;
      for (std::size_t i = 0; i < k; ++i) {
        rec.train_loss.push_back(mean_nll(policy, train[i], train_eval[i], ws));
        rec.val_loss.push_back(mean_nll(policy, val[i], val_eval[i], ws));
      }
      if (!all_finite(rec.train_loss) || !all_finite(rec.val_loss)) {
        throw numerical_error("non-finite evaluation loss at step " + std::to_string(step));
      }
      const auto ckpt_path = out_dir / ("ckpt_" + std::to_string(step) + ".json");
      save_checkpoint(ckpt_path, Checkpoint{step, policy, adam, preprocess_hash});
      rec.checkpoint_path = ckpt_path.string();
      run.records.push_back(std::move(rec));
    }
  }
  return run;
}

struct CheckpointSelection {
  std::int64_t step = 0;
  std::size_t record_index = 0;
  bool first_record_violates = false;
};

/// Picks the latest checkpoint before any domain's validation-train gap first
/// exceeds delta. Once a domain has violated, all later steps are excluded,
/// even if the gap dips back down.
inline CheckpointSelection select_checkpoint(const std::vector<CheckpointRecord>& records,
                                             double delta) {
  if (records.empty()) throw validation_error("no checkpoint records");
  CheckpointSelection sel;
  for (std::size_t r = 0; r < records.size(); ++r) {
    bool ok = true;
    for (std::size_t i = 0; i < records[r].train_loss.size(); ++i) {
      if (records[r].val_loss[i] - records[r].train_loss[i] > delta) {
        ok = false;
        break;
      }
    }
    if (!ok) {
      if (r == 0) {
        sel.step = records[0].step;
        sel.record_index = 0;
        sel.first_record_violates = true;
      }
      return sel;
    }
    sel.step = records[r].step;
    sel.record_index = r;
  }
  return sel;
}

/// records.csv: one row per (step, domain).
inline void save_records_csv(const std::filesystem::path& path, const ReferenceRun& run) {
  std::ofstream out(path);
  if (!out) throw validation_error("cannot write " + path.string());
  out << "step,domain,train_loss,val_loss\n";
  for (const auto& rec : run.records) {
    for (std::size_t i = 0; i < run.domain_names.size(); ++i) {
      out << rec.step << ',' << run.domain_names[i] << ',' << format_double(rec.train_loss[i])
          << ',' << format_double(rec.val_loss[i]) << '\n';
    }
  }
}

}  // namespace mixopt
