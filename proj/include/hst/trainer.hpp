#pragma once

// AdamW training loop, evaluation, finite-difference gradient checking and
// the frozen-weight audit.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hst/checkpoint.hpp"
#include "hst/data.hpp"
#include "hst/model.hpp"

namespace hst {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  bool cosine_decay = false;
  std::size_t checkpoint_every = 0;  // steps; 0 = only at the end
  std::uint64_t seed = 0;            // data order

  void validate() const {
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
      throw ConfigError("train.learning_rate must be finite and non-negative");
    if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.betas must lie in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  }
};

/// Decoupled-weight-decay Adam over the trainable entries of a ParamStore.
template <class T>
class AdamW {
 public:
  AdamW(const ParamStore<T>& store, const TrainConfig& cfg) : cfg_(cfg) {
    for (const auto& [name, p] : store)
      if (p.trainable) slots_.emplace(name, Moments{Buffer<T>(p.value.numel(), T(0)), Buffer<T>(p.value.numel(), T(0))});
  }

  std::uint64_t steps() const { return t_; }

  std::vector<std::string> managed_names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : slots_) out.push_back(n);
    return out;
  }

  /// One update at learning rate `lr`. Parameters without a gradient buffer
  /// (unreached in the graph) are treated as having a zero gradient.
  void step(ParamStore<T>& store, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (auto& [name, slot] : slots_) {
      auto& p = store.at(name);
      auto w = p.value.data();
      const bool has_grad = p.value.has_grad();
      auto g = p.value.grad();
      const T decay = p.decay ? static_cast<T>(lr * cfg_.weight_decay) : T(0);
      const T step_size = static_cast<T>(lr / bc1);
      const T root_bc2 = static_cast<T>(std::sqrt(bc2));
      const T eps = static_cast<T>(cfg_.adam_eps);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T gi = has_grad ? g[i] : T(0);
        w[i] -= decay * w[i];
        slot.m[i] = b1 * slot.m[i] + (T(1) - b1) * gi;
        slot.v[i] = b2 * slot.v[i] + (T(1) - b2) * gi * gi;
        w[i] -= step_size * slot.m[i] / (std::sqrt(slot.v[i]) / root_bc2 + eps);
      }
    }
  }

  /// Moments as a checkpoint ("adam.m.<name>", "adam.v.<name>"); step = t.
  Checkpoint state(std::uint64_t config_hash) const {
    Checkpoint c{config_hash, t_, {}};
    for (const auto& [name, slot] : slots_) {
      Shape s{slot.m.size()};
      c.entries.emplace("adam.m." + name, to_record(Tensor<T>(s, std::span<const T>(slot.m))));
      c.entries.emplace("adam.v." + name, to_record(Tensor<T>(s, std::span<const T>(slot.v))));
    }
    return c;
  }

  void load_state(const Checkpoint& c) {
    if (c.entries.size() != 2 * slots_.size())
      throw AuditError("optimizer state has " + std::to_string(c.entries.size()) + " entries, expected " +
                       std::to_string(2 * slots_.size()));
    for (auto& [name, slot] : slots_) {
      for (auto [prefix, buf] : {std::pair{"adam.m.", &slot.m}, std::pair{"adam.v.", &slot.v}}) {
        auto it = c.entries.find(prefix + name);
        if (it == c.entries.end()) throw AuditError("optimizer state is missing '" + std::string(prefix) + name + "'");
        Tensor<T> tmp({buf->size()});
        from_record(it->second, tmp, it->first);
        std::copy(tmp.data().begin(), tmp.data().end(), buf->begin());
      }
    }
    t_ = c.step;
  }

 private:
  struct Moments {
    Buffer<T> m, v;
  };
  TrainConfig cfg_;
  std::map<std::string, Moments> slots_;
  std::uint64_t t_ = 0;
};

struct StepResult {
  double loss = 0;
  std::size_t correct = 0;
  std::size_t count = 0;
  double accuracy() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0; }
};

template <class T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t c = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const T* row = logits.ptr() + i * c;
    hits += static_cast<int>(std::max_element(row, row + c) - row) == labels[i];
  }
  return hits;
}

/// One line of the metrics stream.
struct MetricRecord {
  std::uint64_t step = 0;
  double loss = 0;
  double accuracy = 0;
  double lr = 0;
  std::size_t trainable_param_count = 0;

  std::string str() const {
    std::ostringstream os;
    os.precision(9);
    os << "step=" << step << " loss=" << loss << " accuracy=" << accuracy << " lr=" << lr
       << " trainable_param_count=" << trainable_param_count;
    return os.str();
  }
};

template <class T>
class Trainer {
 public:
  Trainer(HSTModel<T>& model, const TrainConfig& cfg, std::uint64_t total_steps = 0)
      : model_(model), cfg_(cfg), total_steps_(total_steps), opt_(model.params(), cfg) {
    cfg_.validate();
  }

  const TrainConfig& config() const { return cfg_; }
  AdamW<T>& optimizer() { return opt_; }
  const AdamW<T>& optimizer() const { return opt_; }
  std::uint64_t steps() const { return opt_.steps(); }

  double lr_at(std::uint64_t step) const {
    if (!cfg_.cosine_decay || total_steps_ == 0) return cfg_.learning_rate;
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps_));
    return 0.5 * cfg_.learning_rate * (1.0 + std::cos(std::numbers::pi * frac));
  }

  /// Forward, cross-entropy, backward and one AdamW update. A non-finite
  /// loss or gradient aborts before any parameter is touched.
  StepResult step(const Tensor<T>& images, std::span<const int> labels) {
    auto& store = model_.params();
    StepResult r;
    {
      Tape<T> tape;
      TapeScope<T> scope(tape);
      auto logits = model_.forward_classify(images);
      auto loss = cross_entropy(logits, labels);
      r.loss = static_cast<double>(loss.item());
      r.correct = count_correct(logits, labels);
      r.count = labels.size();
      if (!std::isfinite(r.loss)) numeric_failure("non-finite loss", false);
      tape.backward(loss);
    }
    for (const auto& [name, p] : store)
      if (p.value.has_grad() && !all_finite<T>(p.value.grad())) numeric_failure("non-finite gradient", true);
    opt_.step(store, lr_at(opt_.steps()));
    store.zero_grads();
    return r;
  }

  MetricRecord metrics(const StepResult& r) const {
    return {opt_.steps(), r.loss, r.accuracy(), lr_at(opt_.steps() - 1), model_.param_report().total_trainable};
  }

 private:
  [[noreturn]] void numeric_failure(const std::string& what, bool grads) {
    std::vector<std::string> bad;
    for (const auto& [name, p] : model_.params()) {
      const bool v = !all_finite<T>(p.value.data());
      const bool g = grads && p.value.has_grad() && !all_finite<T>(p.value.grad());
      if (v || g) bad.push_back(name + (v ? " (value)" : " (grad)"));
    }
    if (bad.empty()) bad.push_back("logits");
    std::string msg = what + " at step " + std::to_string(opt_.steps() + 1) + "; offending tensors:";
    for (const auto& b : bad) msg += " " + b;
    model_.params().zero_grads();
    throw NumericError(msg, bad);
  }

  HSTModel<T>& model_;
  TrainConfig cfg_;
  std::uint64_t total_steps_;
  AdamW<T> opt_;
};

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  std::size_t count = 0;
};

/// Deterministic in-order evaluation with recording disabled.
template <class T>
EvalResult evaluate(const HSTModel<T>& model, const data::Dataset& ds, std::size_t batch_size = 64) {
  NoGradScope<T> no_grad;
  EvalResult r;
  double loss_sum = 0;
  std::size_t hits = 0;
  for (const auto& idx : data::batches(ds.count, std::min(batch_size, ds.count), 0, 0, false)) {
    auto b = data::load_batch<T>(ds, idx);
    auto logits = model.forward_classify(b.images);
    loss_sum += static_cast<double>(cross_entropy(logits, std::span<const int>(b.labels)).item()) *
                static_cast<double>(idx.size());
    hits += count_correct(logits, std::span<const int>(b.labels));
  }
  r.count = ds.count;
  r.loss = loss_sum / static_cast<double>(ds.count);
  r.accuracy = static_cast<double>(hits) / static_cast<double>(ds.count);
  return r;
}

/// Runs steps [trainer.steps(), epochs * batches_per_epoch). The batch for a
/// global step depends only on (seed, step), so resuming mid-run replays the
/// uninterrupted schedule. `on_step` may return false to stop early.
template <class T>
void train_loop(Trainer<T>& trainer, const data::Dataset& ds,
                const std::function<bool(const StepResult&, std::uint64_t)>& on_step) {
  const auto& cfg = trainer.config();
  const std::size_t per_epoch = (ds.count + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total = per_epoch * cfg.epochs;
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::vector<std::size_t>> order;
  while (trainer.steps() < total) {
    const std::uint64_t s = trainer.steps();
    const std::size_t epoch = s / per_epoch;
    if (epoch != cached_epoch) {
      order = data::batches(ds.count, cfg.batch_size, cfg.seed, epoch);
      cached_epoch = epoch;
    }
    auto b = data::load_batch<T>(ds, order[s % per_epoch]);
    auto r = trainer.step(b.images, std::span<const int>(b.labels));
    if (on_step && !on_step(r, trainer.steps())) return;
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  std::optional<double> analytic;  // empty: the scalar is frozen and has no gradient
  std::optional<double> numeric;
  std::optional<double> rel_error;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  std::size_t checked = 0;  // entries with a numeric comparison
};

/// |a - n| / max(|a|, |n|, floor). Below the floor the comparison is
/// absolute: central differences at h = 1e-4 on an O(1) loss carry about
/// 1e-10 of rounding noise, which would swamp gradients near 1e-8.
inline double grad_rel_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Uniform sample of `count` trainable scalars (name, flat index), without
/// replacement, sorted for reproducible reporting.
template <class T>
std::vector<std::pair<std::string, std::size_t>> sample_trainable_scalars(const ParamStore<T>& store, std::size_t count,
                                                                          std::uint64_t seed) {
  std::vector<std::pair<std::string, std::size_t>> offsets;
  std::size_t total = 0;
  for (const auto& [name, p] : store)
    if (p.trainable) {
      offsets.emplace_back(name, total);
      total += p.value.numel();
    }
  count = std::min(count, total);
  std::vector<std::size_t> picks(total);
  for (std::size_t i = 0; i < total; ++i) picks[i] = i;
  auto rng = substream(seed, "grad_check");
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, total - 1);
    std::swap(picks[i], picks[d(rng)]);
  }
  picks.resize(count);
  std::sort(picks.begin(), picks.end());
  std::vector<std::pair<std::string, std::size_t>> out;
  for (auto flat : picks) {
    auto it = std::upper_bound(offsets.begin(), offsets.end(), flat,
                               [](std::size_t f, const auto& o) { return f < o.second; });
    --it;
    out.emplace_back(it->first, flat - it->second);
  }
  return out;
}

/// Central-difference check of `loss_fn` (which must build its graph from
/// the store's tensors) at the given scalars. Frozen scalars are reported
/// without numbers.
template <class F>
GradCheckReport grad_check(ParamStore<double>& store, F&& loss_fn,
                           const std::vector<std::pair<std::string, std::size_t>>& scalars, double h = 1e-4,
                           double floor = 1e-6) {
  store.zero_grads();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckReport rep;
  NoGradScope<double> no_grad;
  for (const auto& [name, idx] : scalars) {
    auto& p = store.at(name);
    GradCheckEntry e{name, idx, {}, {}, {}};
    if (!p.trainable) {
      rep.entries.push_back(e);
      continue;
    }
    e.analytic = p.value.has_grad() ? p.value.grad()[idx] : 0.0;
    const double orig = p.value[idx];
    p.value[idx] = orig + h;
    const double up = loss_fn().item();
    p.value[idx] = orig - h;
    const double down = loss_fn().item();
    p.value[idx] = orig;
    e.numeric = (up - down) / (2 * h);
    e.rel_error = grad_rel_error(*e.analytic, *e.numeric, floor);
    rep.max_rel_error = std::max(rep.max_rel_error, *e.rel_error);
    ++rep.checked;
    rep.entries.push_back(e);
  }
  store.zero_grads();
  return rep;
}

/// Classification-loss check on `subset_size` uniformly sampled trainable scalars.
inline GradCheckReport grad_check(HSTModel<double>& model, const Tensor<double>& images, std::span<const int> labels,
                                  std::size_t subset_size, std::uint64_t seed, double h = 1e-4) {
  auto scalars = sample_trainable_scalars(model.params(), subset_size, seed);
  return grad_check(
      model.params(), [&] { return cross_entropy(model.forward_classify(images), labels); }, scalars, h);
}

// ---------------------------------------------------------------------------
// Freeze audit

struct FreezeAudit {
  std::vector<std::string> violations;         // frozen parameters whose bytes changed
  std::vector<std::string> changed_trainable;  // trainable parameters that moved
  bool ok() const { return violations.empty(); }
};

/// Compares two checkpoints of one model given its frozen-name set.
inline FreezeAudit audit_freeze(const std::set<std::string>& frozen, const Checkpoint& before,
                                const Checkpoint& after) {
  if (before.config_hash != after.config_hash) throw AuditError("checkpoints come from different configurations");
  if (before.entries.size() != after.entries.size())
    throw AuditError("checkpoint manifests differ in size (" + std::to_string(before.entries.size()) + " vs " +
                     std::to_string(after.entries.size()) + ")");
  for (const auto& n : frozen)
    if (!before.entries.count(n)) throw AuditError("frozen parameter '" + n + "' missing from checkpoint");
  FreezeAudit a;
  for (const auto& [name, rb] : before.entries) {
    auto it = after.entries.find(name);
    if (it == after.entries.end()) throw AuditError("parameter '" + name + "' missing from second checkpoint");
    const auto& ra = it->second;
    if (ra.dtype != rb.dtype || ra.shape != rb.shape)
      throw AuditError("parameter '" + name + "' changed dtype or shape between checkpoints");
    if (ra.bytes == rb.bytes) continue;
    (frozen.count(name) ? a.violations : a.changed_trainable).push_back(name);
  }
  return a;
}

/// Frozen set from the model's declared freeze policy: every backbone weight
/// outside the policy manifest. Independent of the live trainable flags, so a
/// weight that was unfrozen by mistake is still audited as frozen.
template <class T>
std::set<std::string> declared_frozen(const HSTModel<T>& model) {
  const auto& manifest = model.backbone_manifest();
  std::set<std::string> out;
  for (const auto& [name, _] : model.params())
    if (name.rfind("backbone.", 0) == 0 && std::find(manifest.begin(), manifest.end(), name) == manifest.end())
      out.insert(name);
  return out;
}

template <class T>
FreezeAudit audit_freeze(const HSTModel<T>& model, const Checkpoint& before, const Checkpoint& after) {
  for (const auto& [name, _] : model.params())
    if (!before.entries.count(name)) throw AuditError("checkpoint manifest does not match the model at '" + name + "'");
  return audit_freeze(declared_frozen(model), before, after);
}

}  // namespace hst
