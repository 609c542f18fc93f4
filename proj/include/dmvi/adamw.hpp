#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dmvi/autodiff.hpp"
#include "dmvi/tensor.hpp"

namespace dmvi {

using GradientSet = std::vector<std::pair<std::string, Tensor>>;

// Named trainable tensors with per-parameter AdamW state. Iteration order is
// insertion order and therefore deterministic.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor m;  // first moment
    Tensor v;  // second moment
    long step = 0;
  };

  Tensor& add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter: " + name);
    index_[name] = entries_.size();
    Tensor m(init.rows(), init.cols());
    Tensor v(init.rows(), init.cols());
    entries_.push_back(Entry{name, std::move(init), std::move(m), std::move(v), 0});
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second];
  }
  const Entry& entry(const std::string& name) const {
    return const_cast<ParamStore*>(this)->entry(name);
  }

  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }

  std::size_t size() const { return entries_.size(); }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Parameters registered on a tape for one evaluation. With track=false the
// parameters enter as constants and backward skips them entirely.
struct Bound {
  Tape* tape = nullptr;
  ParamStore* store = nullptr;
  std::vector<Var> leaves;  // aligned with store entries

  Var operator[](const std::string& name) const {
    auto& st = *store;
    for (std::size_t i = 0; i < st.entries().size(); ++i)
      if (st.entries()[i].name == name) return leaves[i];
    throw ConfigError("unbound parameter: " + name);
  }

  // Gradients aligned with the store's entry order (zeros if untouched).
  GradientSet grads() const {
    GradientSet out;
    out.reserve(leaves.size());
    for (std::size_t i = 0; i < leaves.size(); ++i)
      out.emplace_back(store->entries()[i].name, tape->gradient(leaves[i]));
    return out;
  }
};

inline Bound bind(Tape& tape, ParamStore& store, bool track = true) {
  Bound b;
  b.tape = &tape;
  b.store = &store;
  b.leaves.reserve(store.size());
  for (auto& e : store.entries())
    b.leaves.push_back(track ? tape.leaf(e.value) : tape.constant(e.value));
  return b;
}

// Evaluate a scalar function of the parameters and return its value with the
// exact reverse-mode gradient. Throws NumericError naming the offending
// parameter if the value or any gradient is non-finite.
template <class F>
std::pair<double, GradientSet> evaluate_with_gradient(F&& f, ParamStore& params) {
  Tape tape;
  Bound bound = bind(tape, params, true);
  Var out = f(tape, bound);
  if (tape.value(out).size() != 1)
    throw ConfigError("evaluate_with_gradient expects a scalar-valued function");
  double value = tape.value(out).item();
  if (!std::isfinite(value)) throw NumericError("non-finite objective value");
  tape.backward(out);
  GradientSet grads = bound.grads();
  for (const auto& [name, g] : grads)
    if (!g.all_finite()) throw NumericError("non-finite gradient for parameter " + name);
  return {value, std::move(grads)};
}

struct AdamwConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Decoupled weight decay applied multiplicatively before the adaptive update,
// bias-corrected moments. Gradients are matched to parameters by name so the
// update is invariant to gradient ordering.
inline void adamw_step(ParamStore& params, const GradientSet& grads,
                       const AdamwConfig& cfg) {
  for (const auto& [name, g] : grads) {
    auto& e = params.entry(name);
    if (!e.value.same_shape(g))
      throw ConfigError("gradient shape mismatch for parameter " + name);
    if (!g.all_finite())
      throw NumericError("non-finite gradient for parameter " + name);
    e.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
    for (std::size_t k = 0; k < e.value.size(); ++k) {
      double& w = e.value.values[k];
      w *= 1.0 - cfg.lr * cfg.weight_decay;
      double gk = g.values[k];
      e.m.values[k] = cfg.beta1 * e.m.values[k] + (1.0 - cfg.beta1) * gk;
      e.v.values[k] = cfg.beta2 * e.v.values[k] + (1.0 - cfg.beta2) * gk * gk;
      double mhat = e.m.values[k] / bc1;
      double vhat = e.v.values[k] / bc2;
      w -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

inline void adamw_step(ParamStore& params, const GradientSet& grads, double lr,
                       double beta1, double beta2, double eps,
                       double weight_decay) {
  adamw_step(params, grads, AdamwConfig{lr, beta1, beta2, eps, weight_decay});
}

}  // namespace dmvi
