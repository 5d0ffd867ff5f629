/**
 * @file model.hpp
 * @brief Configuration, weight layout and initialization of the recurrent VAE.
 *
 * Layout (K = latent_dim for 2-bar models, conductor_dim for 4-bar models):
 *   embed        E x V          token embedding shared by encoder and decoder
 *   enc_fwd/bwd  GRU E -> He    bidirectional encoder
 *   mu, log_var  2He -> Z       posterior heads
 *   dec_init     K -> Hd        decoder initial state (tanh)
 *   dec          GRU (E+K) -> Hd
 *   out          Hd -> V        logits
 *   cond_init    Z -> C         (4-bar only) conductor initial state (tanh)
 *   conductor    GRU Z -> C     (4-bar only) one output per bar
 */

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "duet/genmodel/rng.hpp"
#include "duet/melody.hpp"

namespace duet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  int bars = 2;
  int vocab = kVocabSize;
  int embed_dim = 32;
  int enc_hidden = 128;
  int latent_dim = 16;
  int dec_hidden = 128;
  int conductor_dim = 64;
  std::uint64_t seed = 0;

  bool hierarchical() const { return bars == 4; }
  int sequence_length() const { return bars * kStepsPerBar; }
  /// Width of the vector conditioning each decoder step.
  int condition_dim() const { return hierarchical() ? conductor_dim : latent_dim; }

  void validate() const {
    if (bars != 2 && bars != 4) throw std::invalid_argument("bars must be 2 or 4");
    if (vocab < 2 || embed_dim < 1 || enc_hidden < 1 || latent_dim < 1 || dec_hidden < 1 || conductor_dim < 1) {
      throw std::invalid_argument("model dimensions must be >= 1 (vocab >= 2)");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LatentCode {
  Vector mu;
  Vector log_var;
};

inline constexpr double kLogVarClamp = 10.0;

/// Imitation/improvisation controls of the partner.
struct PartnerParams {
  double temperature = 1.0;
  double similarity = 0.9;
  /// Also scale the prior draw by the temperature.
  bool temperature_scales_latent = false;

  static constexpr double kLowTemperature = 0.5;
  static constexpr double kHighTemperature = 1.5;
  static constexpr double kLowSimilarity = 0.3;
  static constexpr double kHighSimilarity = 0.9;

  void validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    if (!(similarity >= 0.0 && similarity <= 1.0)) throw std::invalid_argument("similarity must be in [0, 1]");
  }

  bool operator==(const PartnerParams&) const = default;
};

struct GruWeights {
  Matrix w;  ///< 3H x In, gate order: update, reset, candidate
  Matrix u;  ///< 3H x H
  Matrix b;  ///< 3H x 1
};

struct Affine {
  Matrix w;
  Matrix b;
};

struct Params {
  Matrix embed;
  GruWeights enc_fwd, enc_bwd;
  Affine mu, log_var;
  Affine dec_init;
  GruWeights dec;
  Affine out;
  Affine cond_init;
  GruWeights conductor;
  bool hierarchical = false;

  /// Visits every tensor in a fixed order with its name.
  template <typename F>
  void for_each(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit_impl(*this, f);
  }

  /// Same layout, all zeros.
  Params zeros_like() const {
    Params z = *this;
    z.for_each([](const std::string&, Matrix& m) { m.setZero(); });
    return z;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& p, F& f) {
    auto gru = [&](const char* name, auto& g) {
      f(std::string(name) + ".w", g.w);
      f(std::string(name) + ".u", g.u);
      f(std::string(name) + ".b", g.b);
    };
    auto affine = [&](const char* name, auto& a) {
      f(std::string(name) + ".w", a.w);
      f(std::string(name) + ".b", a.b);
    };
    f(std::string("embed"), p.embed);
    gru("enc_fwd", p.enc_fwd);
    gru("enc_bwd", p.enc_bwd);
    affine("mu", p.mu);
    affine("log_var", p.log_var);
    affine("dec_init", p.dec_init);
    gru("dec", p.dec);
    affine("out", p.out);
    if (p.hierarchical) {
      affine("cond_init", p.cond_init);
      gru("conductor", p.conductor);
    }
  }
};

/// KL weight ramps linearly from `start` to `end` over `ramp_steps` updates.
struct BetaSchedule {
  double start = 0.0;
  double end = 0.2;
  std::uint64_t ramp_steps = 2000;

  double at(std::uint64_t step) const {
    if (ramp_steps == 0 || step >= ramp_steps) return end;
    return start + (end - start) * static_cast<double>(step) / static_cast<double>(ramp_steps);
  }
};

struct ModelState {
  ModelConfig config;
  Params weights;
  Params adam_m;
  Params adam_v;
  std::uint64_t step = 0;
  BetaSchedule beta;
};

namespace detail {

inline Params shaped_params(const ModelConfig& c) {
  const int V = c.vocab, E = c.embed_dim, He = c.enc_hidden, Z = c.latent_dim, Hd = c.dec_hidden;
  const int K = c.condition_dim(), C = c.conductor_dim;
  auto gru = [](int in, int hidden) {
    return GruWeights{Matrix::Zero(3 * hidden, in), Matrix::Zero(3 * hidden, hidden), Matrix::Zero(3 * hidden, 1)};
  };
  auto affine = [](int in, int outputs) { return Affine{Matrix::Zero(outputs, in), Matrix::Zero(outputs, 1)}; };
  Params p;
  p.hierarchical = c.hierarchical();
  p.embed = Matrix::Zero(E, V);
  p.enc_fwd = gru(E, He);
  p.enc_bwd = gru(E, He);
  p.mu = affine(2 * He, Z);
  p.log_var = affine(2 * He, Z);
  p.dec_init = affine(K, Hd);
  p.dec = gru(E + K, Hd);
  p.out = affine(Hd, V);
  if (p.hierarchical) {
    p.cond_init = affine(Z, C);
    p.conductor = gru(Z, C);
  }
  return p;
}

}  // namespace detail

/// Weights uniform in +-1/sqrt(fan_in) (embedding +-0.1), biases zero, drawn
/// from the counter-based stream seeded by config.seed.
inline ModelState init_model(const ModelConfig& config) {
  config.validate();
  ModelState state;
  state.config = config;
  state.weights = detail::shaped_params(config);
  CounterRng rng(config.seed, /*stream=*/0x1417);
  state.weights.for_each([&](const std::string& name, Matrix& m) {
    if (name.ends_with(".b")) return;
    const double scale = name == "embed" ? 0.1 : 1.0 / std::sqrt(static_cast<double>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-scale, scale);
    }
  });
  state.adam_m = state.weights.zeros_like();
  state.adam_v = state.weights.zeros_like();
  return state;
}

inline std::size_t param_count(const Params& p) {
  std::size_t n = 0;
  p.for_each([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

inline std::size_t param_count(const ModelConfig& config) { return param_count(detail::shaped_params(config)); }

}  // namespace duet
