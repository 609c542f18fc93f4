#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dmvi/adamw.hpp"
#include "dmvi/autodiff.hpp"
#include "dmvi/rng.hpp"
#include "dmvi/tensor.hpp"

namespace dmvi {

// Score network: dense(hidden) -> gelu -> layer norm -> dropout -> dense(out).
// The gelu activation is fixed; the time index enters as a sinusoidal
// embedding concatenated to the input.
struct MlpConfig {
  int input_dim = 0;  // sample dim + time embedding dim
  int hidden_dim = 256;
  int output_dim = 0;
  double dropout_rate = 0.1;
  bool layer_norm = true;
  int time_embedding_dim = 16;
};

inline MlpConfig make_score_config(int sample_dim, int hidden_dim = 256,
                                   double dropout_rate = 0.1) {
  MlpConfig cfg;
  cfg.time_embedding_dim = 16;
  cfg.input_dim = sample_dim + cfg.time_embedding_dim;
  cfg.hidden_dim = hidden_dim;
  cfg.output_dim = sample_dim;
  cfg.dropout_rate = dropout_rate;
  if (cfg.hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
  return cfg;
}

// Hidden weights truncated-normal (std 0.01), final layer zero so the
// initial score is the zero map.
inline void init_score_params(ParamStore& params, const MlpConfig& cfg,
                              RngStream& rng, const std::string& prefix = "score.") {
  Tensor w1(cfg.input_dim, cfg.hidden_dim);
  for (double& v : w1.values) v = 0.01 * rng.truncated_normal();
  params.add(prefix + "w1", std::move(w1));
  params.add(prefix + "b1", Tensor(1, cfg.hidden_dim));
  if (cfg.layer_norm) {
    params.add(prefix + "ln_gain", Tensor(1, cfg.hidden_dim, 1.0));
    params.add(prefix + "ln_bias", Tensor(1, cfg.hidden_dim));
  }
  params.add(prefix + "w2", Tensor(cfg.hidden_dim, cfg.output_dim));
  params.add(prefix + "b2", Tensor(1, cfg.output_dim));
}

// Sinusoidal embedding of normalized time t/T, one row per entry of t.
// Geometric frequencies 1 .. 1e4 over dim/2 sin/cos pairs.
inline Tensor time_embedding(const std::vector<int>& t, int total_steps, int dim) {
  int half = dim / 2;
  Tensor out(t.size(), dim);
  for (std::size_t i = 0; i < t.size(); ++i) {
    double tau = static_cast<double>(t[i]) / static_cast<double>(total_steps);
    for (int k = 0; k < half; ++k) {
      double freq = std::exp(std::log(1e4) * k / std::max(1, half - 1));
      out.at(i, k) = std::sin(freq * tau);
      out.at(i, half + k) = std::cos(freq * tau);
    }
  }
  return out;
}

// Inverted-dropout mask: entries are 0 or 1/(1-rate).
inline Tensor dropout_mask(std::size_t rows, std::size_t cols, double rate,
                           RngStream& rng) {
  Tensor mask(rows, cols);
  double keep = 1.0 - rate;
  for (double& v : mask.values) v = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
  return mask;
}

// Forward pass for a batch of rows, each conditioned on its own time index.
// Dropout is drawn from rng only in train mode; with train_mode off the
// output is a deterministic function of (xi, t, params).
inline Var score_forward(Tape& tape, const Bound& params, const MlpConfig& cfg,
                         Var xi, const std::vector<int>& t, int total_steps,
                         bool train_mode, RngStream& rng,
                         const std::string& prefix = "score.") {
  const Tensor& x = tape.value(xi);
  if (static_cast<int>(x.cols()) != cfg.output_dim)
    throw ConfigError("score_forward: input dim does not match output_dim");
  if (x.rows() != t.size())
    throw ConfigError("score_forward: one time index per input row required");
  Var emb = tape.constant(time_embedding(t, total_steps, cfg.time_embedding_dim));
  Var h = concat_cols(xi, emb);
  h = add(matmul(h, params[prefix + "w1"]), params[prefix + "b1"]);
  h = gelu(h);
  if (cfg.layer_norm) {
    h = layer_norm_rows(h);
    h = add(mul(h, params[prefix + "ln_gain"]), params[prefix + "ln_bias"]);
  }
  if (train_mode && cfg.dropout_rate > 0.0) {
    Var mask = tape.constant(
        dropout_mask(x.rows(), cfg.hidden_dim, cfg.dropout_rate, rng));
    h = mul(h, mask);
  }
  return add(matmul(h, params[prefix + "w2"]), params[prefix + "b2"]);
}

}  // namespace dmvi
