#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <variant>
#include <vector>

#include "dmvi/autodiff.hpp"
#include "dmvi/rng.hpp"
#include "dmvi/tensor.hpp"

namespace dmvi {

inline constexpr double kLogTwoPi = 1.8378770664093453;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Normal {
  double mean = 0.0;
  double sigma = 1.0;
  Normal() = default;
  Normal(double m, double s) : mean(m), sigma(s) {
    if (!(sigma > 0.0)) throw ConfigError("Normal: sigma must be > 0");
  }
  double log_prob(double x) const {
    double z = (x - mean) / sigma;
    return -0.5 * z * z - std::log(sigma) - 0.5 * kLogTwoPi;
  }
  double sample(RngStream& rng) const { return mean + sigma * rng.normal(); }
};

// Out-of-support queries return -inf rather than throwing, so mixture and
// Monte Carlo estimators stay total.
struct HalfNormal {
  double sigma = 1.0;
  HalfNormal() = default;
  explicit HalfNormal(double s) : sigma(s) {
    if (!(sigma > 0.0)) throw ConfigError("HalfNormal: sigma must be > 0");
  }
  double log_prob(double x) const {
    if (x < 0.0) return kNegInf;
    double z = x / sigma;
    return std::numbers::ln2 - 0.5 * z * z - std::log(sigma) - 0.5 * kLogTwoPi;
  }
  double sample(RngStream& rng) const { return std::abs(sigma * rng.normal()); }
};

struct MvNormalDiag {
  std::vector<double> mean;
  std::vector<double> sigma;
  MvNormalDiag() = default;
  MvNormalDiag(std::vector<double> m, std::vector<double> s)
      : mean(std::move(m)), sigma(std::move(s)) {
    if (mean.size() != sigma.size())
      throw ConfigError("MvNormalDiag: mean/sigma length mismatch");
    for (double v : sigma)
      if (!(v > 0.0)) throw ConfigError("MvNormalDiag: sigma must be > 0");
  }
  std::size_t dim() const { return mean.size(); }
  double log_prob(std::span<const double> x) const {
    if (x.size() != dim()) throw ConfigError("MvNormalDiag: dimension mismatch");
    double lp = 0.0;
    for (std::size_t i = 0; i < dim(); ++i) {
      double z = (x[i] - mean[i]) / sigma[i];
      lp += -0.5 * z * z - std::log(sigma[i]) - 0.5 * kLogTwoPi;
    }
    return lp;
  }
  void sample(RngStream& rng, std::span<double> out) const {
    for (std::size_t i = 0; i < dim(); ++i)
      out[i] = mean[i] + sigma[i] * rng.normal();
  }
};

struct MixtureDiag {
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::vector<std::vector<double>> sigmas;
  MixtureDiag() = default;
  MixtureDiag(std::vector<double> w, std::vector<std::vector<double>> m,
              std::vector<std::vector<double>> s)
      : weights(std::move(w)), means(std::move(m)), sigmas(std::move(s)) {
    if (weights.size() != means.size() || weights.size() != sigmas.size())
      throw ConfigError("MixtureDiag: component count mismatch");
    double total = 0.0;
    for (double wk : weights) {
      if (wk < 0.0) throw ConfigError("MixtureDiag: negative weight");
      total += wk;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw ConfigError("MixtureDiag: weights must sum to 1");
    for (const auto& s2 : sigmas)
      for (double v : s2)
        if (!(v > 0.0)) throw ConfigError("MixtureDiag: sigma must be > 0");
  }
  std::size_t components() const { return weights.size(); }
  std::size_t dim() const { return means.empty() ? 0 : means[0].size(); }

  double log_prob(std::span<const double> x) const {
    double mx = kNegInf;
    std::vector<double> terms(components());
    for (std::size_t k = 0; k < components(); ++k) {
      double lp = weights[k] > 0.0 ? std::log(weights[k]) : kNegInf;
      for (std::size_t i = 0; i < dim(); ++i) {
        double z = (x[i] - means[k][i]) / sigmas[k][i];
        lp += -0.5 * z * z - std::log(sigmas[k][i]) - 0.5 * kLogTwoPi;
      }
      terms[k] = lp;
      mx = std::fmax(mx, lp);
    }
    if (mx == kNegInf) return kNegInf;
    double s = 0.0;
    for (double t : terms) s += std::exp(t - mx);
    return mx + std::log(s);
  }

  int sample_component(RngStream& rng) const {
    double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t k = 0; k < components(); ++k) {
      acc += weights[k];
      if (u < acc) return static_cast<int>(k);
    }
    return static_cast<int>(components()) - 1;
  }

  void sample(RngStream& rng, std::span<double> out) const {
    int k = sample_component(rng);
    for (std::size_t i = 0; i < dim(); ++i)
      out[i] = means[k][i] + sigmas[k][i] * rng.normal();
  }
};

using Distribution = std::variant<Normal, HalfNormal, MvNormalDiag, MixtureDiag>;

inline std::size_t dist_dim(const Distribution& d) {
  return std::visit(
      [](const auto& v) -> std::size_t {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Normal> || std::is_same_v<T, HalfNormal>)
          return 1;
        else
          return v.dim();
      },
      d);
}

inline double log_prob(const Distribution& d, const Tensor& x) {
  return std::visit(
      [&](const auto& v) -> double {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Normal> || std::is_same_v<T, HalfNormal>)
          return v.log_prob(x.item());
        else
          return v.log_prob(std::span<const double>(x.values));
      },
      d);
}

// n i.i.d. draws, one per row.
inline Tensor sample(const Distribution& d, RngStream& rng, int n) {
  if (n < 1) throw ConfigError("sample: n must be >= 1");
  std::size_t dim = dist_dim(d);
  Tensor out(n, dim);
  for (int i = 0; i < n; ++i) {
    std::span<double> row(&out.values[i * dim], dim);
    std::visit(
        [&](const auto& v) {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, Normal> || std::is_same_v<T, HalfNormal>)
            row[0] = v.sample(rng);
          else
            v.sample(rng, row);
        },
        d);
  }
  return out;
}

// ---- tape-side densities (unconstrained-space model building blocks) ----

// Elementwise normal log-density; operands broadcast like binary ops.
inline Var normal_logpdf(Var x, Var mean, Var sigma) {
  Var z = div(sub(x, mean), sigma);
  return sub(mul_scalar(square(z), -0.5),
             add_scalar(log(sigma), 0.5 * kLogTwoPi));
}

inline Var normal_logpdf(Var x, double mean, double sigma) {
  Var z = mul_scalar(add_scalar(x, -mean), 1.0 / sigma);
  return add_scalar(mul_scalar(square(z), -0.5),
                    -std::log(sigma) - 0.5 * kLogTwoPi);
}

// Valid on x > 0 (unconstrained-space callers evaluate it at exp(xi)).
inline Var half_normal_logpdf(Var x, double sigma) {
  Var z = mul_scalar(x, 1.0 / sigma);
  return add_scalar(mul_scalar(square(z), -0.5),
                    std::numbers::ln2 - std::log(sigma) - 0.5 * kLogTwoPi);
}

}  // namespace dmvi
