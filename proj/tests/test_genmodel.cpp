/**
 * @file test_genmodel.cpp
 * @brief Recurrent VAE: initialization, latent math, decoding, gradients,
 *        checkpoints, response rule and the Markov partner.
 */

#include "duet/genmodel.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "support/generators.hpp"
#include "support/gradcheck.hpp"

namespace duet {
namespace {

ModelConfig small_config(int bars = 2) {
  ModelConfig c;
  c.bars = bars;
  c.embed_dim = 8;
  c.enc_hidden = 12;
  c.latent_dim = 4;
  c.dec_hidden = 12;
  c.conductor_dim = 6;
  c.seed = 5;
  return c;
}

bool same_weights(const Params& a, const Params& b) {
  std::vector<const Matrix*> xs, ys;
  a.for_each([&](const std::string&, const Matrix& m) { xs.push_back(&m); });
  b.for_each([&](const std::string&, const Matrix& m) { ys.push_back(&m); });
  if (xs.size() != ys.size()) return false;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i]->rows() != ys[i]->rows() || xs[i]->cols() != ys[i]->cols()) return false;
    if (std::memcmp(xs[i]->data(), ys[i]->data(), sizeof(double) * xs[i]->size()) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// init_model / param_count

TEST(InitModel, Deterministic) {
  const auto a = init_model(small_config());
  const auto b = init_model(small_config());
  EXPECT_TRUE(same_weights(a.weights, b.weights));
  auto other = small_config();
  other.seed = 6;
  EXPECT_FALSE(same_weights(a.weights, init_model(other).weights));
  EXPECT_EQ(a.step, 0u);
}

TEST(InitModel, RejectsBadConfig) {
  auto c = small_config();
  c.bars = 3;
  EXPECT_THROW(init_model(c), std::invalid_argument);
  c = small_config();
  c.latent_dim = 0;
  EXPECT_THROW(init_model(c), std::invalid_argument);
}

TEST(ParamCount, HandCountedTinyConfig) {
  ModelConfig c;
  c.vocab = 5;
  c.embed_dim = c.enc_hidden = c.latent_dim = c.dec_hidden = c.conductor_dim = 2;
  // embed 2x5; two encoder GRUs (6x2 + 6x2 + 6); mu and log_var (2x4 + 2);
  // dec_init (2x2 + 2); decoder GRU (6x4 + 6x2 + 6); out (5x2 + 5).
  const std::size_t flat = 10 + 2 * 30 + 2 * 10 + 6 + 42 + 15;
  EXPECT_EQ(flat, 153u);
  EXPECT_EQ(param_count(c), flat);
  // Conductor adds cond_init (2x2 + 2) and a GRU (6x2 + 6x2 + 6).
  c.bars = 4;
  EXPECT_EQ(param_count(c), flat + 6 + 30);
}

TEST(ParamCount, GrowsWithEveryDimension) {
  for (int bars : {2, 4}) {
    const auto base = small_config(bars);
    const auto n = param_count(base);
    for (int field = 0; field < 6; ++field) {
      auto c = base;
      int* dims[] = {&c.vocab, &c.embed_dim, &c.enc_hidden, &c.latent_dim, &c.dec_hidden, &c.conductor_dim};
      *dims[field] += 1;
      if (field == 5 && bars == 2) {
        EXPECT_EQ(param_count(c), n);  // conductor unused at 2 bars
      } else {
        EXPECT_GT(param_count(c), n) << "field " << field << " bars " << bars;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// encode / reparameterize / kl

TEST(Encode, ShapesAndPurity) {
  const auto state = init_model(small_config());
  CounterRng rng(1);
  const auto seq = testing::random_valid_sequence(rng, 2);
  const auto a = encode(state, seq);
  const auto b = encode(state, seq);
  EXPECT_EQ(a.mu.size(), 4);
  EXPECT_EQ(a.log_var.size(), 4);
  EXPECT_EQ(a.mu, b.mu);
  EXPECT_EQ(a.log_var, b.log_var);
  EXPECT_THROW(encode(state, MelodySequence(4)), ShapeError);
}

TEST(Encode, LogVarClamped) {
  auto state = init_model(small_config());
  state.weights.log_var.b.setConstant(50.0);
  const auto code = encode(state, MelodySequence(2));
  EXPECT_DOUBLE_EQ(code.log_var.maxCoeff(), kLogVarClamp);
}

TEST(Encode, MuRespondsToWeightPerturbationLikeFiniteDifference) {
  // d mu_0 / d (mu.b_0) is exactly 1; through a hidden weight it matches a
  // central difference of the forward pass.
  auto state = init_model(small_config());
  const auto seq = tokenize({{60, 0, 4}, {64, 4, 4}}, 2, 0);
  const double eps = 1e-6;
  auto bumped = state;
  bumped.weights.mu.b(0) += eps;
  EXPECT_NEAR((encode(bumped, seq).mu(0) - encode(state, seq).mu(0)) / eps, 1.0, 1e-8);

  auto up = state, down = state;
  up.weights.enc_fwd.u(0, 0) += eps;
  down.weights.enc_fwd.u(0, 0) -= eps;
  const double fd = (encode(up, seq).mu(1) - encode(down, seq).mu(1)) / (2 * eps);
  auto up2 = state, down2 = state;
  up2.weights.enc_fwd.u(0, 0) += 2 * eps;
  down2.weights.enc_fwd.u(0, 0) -= 2 * eps;
  const double fd2 = (encode(up2, seq).mu(1) - encode(down2, seq).mu(1)) / (4 * eps);
  EXPECT_NEAR(fd, fd2, 1e-6 * std::max(1.0, std::abs(fd)));
}

TEST(Reparameterize, Identities) {
  LatentCode code{Vector::Constant(3, 0.7), Vector::Constant(3, -1.0)};
  EXPECT_EQ(reparameterize(code, Vector::Zero(3)), code.mu);
  const LatentCode unit{Vector::Zero(3), Vector::Zero(3)};
  const Vector n = (Vector(3) << 0.1, -2.0, 3.5).finished();
  EXPECT_EQ(reparameterize(unit, n), n);
  EXPECT_THROW(reparameterize(unit, Vector::Zero(2)), ShapeError);
}

TEST(Reparameterize, MonteCarloMoments) {
  const LatentCode code{(Vector(2) << 1.5, -0.5).finished(), (Vector(2) << 0.8, -1.2).finished()};
  CounterRng rng(404);
  const int N = 10000;
  Vector sum = Vector::Zero(2), sq = Vector::Zero(2);
  for (int i = 0; i < N; ++i) {
    const Vector noise = (Vector(2) << rng.normal(), rng.normal()).finished();
    const Vector z = reparameterize(code, noise);
    sum += z;
    sq += z.cwiseProduct(z);
  }
  for (int d = 0; d < 2; ++d) {
    const double sd = std::exp(0.5 * code.log_var(d));
    const double mean = sum(d) / N;
    const double var = sq(d) / N - mean * mean;
    EXPECT_NEAR(mean, code.mu(d), 3 * sd / std::sqrt(N));
    EXPECT_NEAR(std::sqrt(var), sd, 0.03 * sd);
  }
}

double kl_by_quadrature(double mu, double log_var) {
  // KL(q || p) = integral q(x) (log q(x) - log p(x)) dx on a wide grid.
  const double sd = std::exp(0.5 * log_var);
  const double lo = std::min(mu - 12 * sd, -12.0), hi = std::max(mu + 12 * sd, 12.0);
  const int n = 200000;
  const double dx = (hi - lo) / n;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = lo + (i + 0.5) * dx;
    const double log_q = -0.5 * std::log(2 * std::numbers::pi) - 0.5 * log_var - 0.5 * (x - mu) * (x - mu) / (sd * sd);
    const double log_p = -0.5 * std::log(2 * std::numbers::pi) - 0.5 * x * x;
    total += std::exp(log_q) * (log_q - log_p) * dx;
  }
  return total;
}

TEST(KlDivergence, ClosedFormValues) {
  EXPECT_DOUBLE_EQ(kl_divergence({Vector::Zero(4), Vector::Zero(4)}), 0.0);
  EXPECT_DOUBLE_EQ(kl_divergence({Vector::Constant(1, 1.0), Vector::Zero(1)}), 0.5);
}

TEST(KlDivergence, MatchesQuadratureAndIsNonNegative) {
  CounterRng rng(12);
  for (int i = 0; i < 6; ++i) {
    const double mu = rng.uniform(-2, 2), lv = rng.uniform(-2, 2);
    EXPECT_NEAR(kl_divergence({Vector::Constant(1, mu), Vector::Constant(1, lv)}), kl_by_quadrature(mu, lv), 1e-6);
  }
  for (int i = 0; i < 1000; ++i) {
    Vector mu(5), lv(5);
    for (int d = 0; d < 5; ++d) {
      mu(d) = rng.uniform(-5, 5);
      lv(d) = rng.uniform(-kLogVarClamp, kLogVarClamp);
    }
    ASSERT_GE(kl_divergence({mu, lv}), 0.0);
  }
}

// ---------------------------------------------------------------------------
// decode

TEST(MaskedSoftmax, EqualLogitsGiveUniformOverUnmasked) {
  Vector logits = Vector::Constant(6, 0.3);
  logits(kHoldCode) = kMasked;
  for (double t : {0.1, 1.0, 7.0}) {
    const Vector p = masked_softmax(logits, t);
    EXPECT_DOUBLE_EQ(p(kHoldCode), 0.0);
    for (int i = 0; i < 6; ++i) {
      if (i != kHoldCode) {
        EXPECT_NEAR(p(i), 0.2, 1e-15);
      }
    }
  }
  EXPECT_THROW(masked_softmax(logits, 0.0), std::invalid_argument);
}

TEST(MaskedSoftmax, EntropyNonDecreasingInTemperature) {
  CounterRng rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    Vector logits(kVocabSize);
    for (auto& v : logits) v = rng.uniform(-4, 4);
    const double h05 = entropy(masked_softmax(logits, 0.5));
    const double h10 = entropy(masked_softmax(logits, 1.0));
    const double h15 = entropy(masked_softmax(logits, 1.5));
    ASSERT_LE(h05, h10 + 1e-12);
    ASSERT_LE(h10, h15 + 1e-12);
  }
}

TEST(Decode, OutputsAreValidSequences) {
  for (int bars : {2, 4}) {
    auto state = init_model(small_config(bars));
    // Bias towards HOLD so the mask has work to do.
    state.weights.out.b(kHoldCode) = 5.0;
    CounterRng rng(3);
    for (int i = 0; i < 50; ++i) {
      Vector z(4);
      for (auto& v : z) v = rng.normal();
      const auto out = decode(state, z, 1.5, DecodeMode::Sample, rng);
      ASSERT_EQ(static_cast<int>(out.codes.size()), bars * kStepsPerBar);
      ASSERT_NO_THROW(out.sequence());
      ASSERT_EQ(out.logits.size(), out.codes.size());
      ASSERT_EQ(out.logits[0](kHoldCode), kMasked);
    }
  }
}

TEST(Decode, TinyTemperatureSamplingEqualsGreedy) {
  const auto state = init_model(small_config());
  CounterRng rng(8);
  for (int i = 0; i < 20; ++i) {
    Vector z(4);
    for (auto& v : z) v = 2 * rng.normal();
    const auto greedy = decode(state, z, 1.0, DecodeMode::Greedy, rng);
    const auto sampled = decode(state, z, 1e-6, DecodeMode::Sample, rng);
    ASSERT_EQ(greedy.codes, sampled.codes);
  }
}

TEST(Decode, TeacherModeFollowsInputs) {
  const auto state = init_model(small_config(4));
  CounterRng rng(2);
  const auto seq = testing::random_valid_sequence(rng, 4).codes();
  const auto out = decode(state, Vector::Zero(4), 1.0, DecodeMode::Teacher, rng, seq);
  EXPECT_EQ(out.codes, seq);
  EXPECT_THROW(decode(state, Vector::Zero(4), 0.0, DecodeMode::Greedy, rng), std::invalid_argument);
  EXPECT_THROW(decode(state, Vector::Zero(3), 1.0, DecodeMode::Greedy, rng), ShapeError);
}

// ---------------------------------------------------------------------------
// elbo_loss

class GradientCheck : public ::testing::TestWithParam<std::tuple<int, int>> {};

TEST_P(GradientCheck, AnalyticMatchesCentralDifferences) {
  const auto [bars, batch_size] = GetParam();
  auto state = init_model(testing::tiny_config(bars));
  // Larger weights than the default init so every gate operates away from zero.
  state.weights.for_each([](const std::string&, Matrix& m) { m *= 2.5; });
  CounterRng rng(17 + bars);
  std::vector<std::vector<int>> batch;
  for (int b = 0; b < batch_size; ++b) batch.push_back(testing::random_codes(rng, bars * kStepsPerBar, 5));
  for (const auto& check : testing::check_gradients(state, batch, 0.7, 1234)) {
    EXPECT_LE(check.relative_error, 1e-4) << check.name << " |g|=" << check.analytic_norm;
    EXPECT_GT(check.analytic_norm, 0.0) << check.name;
  }
}

INSTANTIATE_TEST_SUITE_P(TinyConfigs, GradientCheck,
                         ::testing::Values(std::make_tuple(2, 1), std::make_tuple(2, 3), std::make_tuple(4, 1)));

TEST(ElboLoss, BetaZeroIsPureReconstruction) {
  const auto state = init_model(small_config());
  const auto batch = to_code_batch(testing::toy_corpus(4, 2, 1));
  CounterRng r1(5), r2(5);
  const auto a = elbo_loss(state, batch, 0.0, r1);
  const auto b = elbo_loss(state, batch, 0.3, r2);
  EXPECT_DOUBLE_EQ(a.loss, a.reconstruction);
  EXPECT_DOUBLE_EQ(b.loss, b.reconstruction + 0.3 * b.kl);
  EXPECT_DOUBLE_EQ(a.reconstruction, b.reconstruction);
}

TEST(ElboLoss, DuplicatedBatchKeepsMeanLoss) {
  const auto state = init_model(small_config());
  const auto base = to_code_batch(testing::toy_corpus(3, 2, 2));
  auto doubled = base;
  doubled.insert(doubled.end(), base.begin(), base.end());
  CounterRng rng(9);
  Matrix noise(4, 3);
  for (auto& v : noise.reshaped()) v = rng.normal();
  Matrix noise2(4, 6);
  noise2 << noise, noise;
  const auto one = elbo_loss(state, base, 0.2, noise, {0.0});
  const auto two = elbo_loss(state, doubled, 0.2, noise2, {0.0});
  EXPECT_NEAR(one.loss, two.loss, 1e-12 * one.loss);
  EXPECT_THROW(elbo_loss(state, base, 0.2, noise2, {0.0}), ShapeError);
}

TEST(ElboLoss, GradientsClippedToUnitNorm) {
  auto state = init_model(small_config());
  state.weights.out.w *= 40.0;
  const auto batch = to_code_batch(testing::toy_corpus(8, 2, 3));
  CounterRng rng(4);
  const auto r = elbo_loss(state, batch, 0.1, rng);
  EXPECT_GT(r.grad_norm, 1.0);
  EXPECT_NEAR(global_norm(r.grads), 1.0, 1e-9);
}

TEST(ElboLoss, DivergenceIsReported) {
  auto state = init_model(small_config());
  state.weights.out.w(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto batch = to_code_batch(testing::toy_corpus(2, 2, 3));
  CounterRng rng(4);
  EXPECT_THROW(elbo_loss(state, batch, 0.1, rng), TrainingDivergence);
  EXPECT_THROW(elbo_loss(state, {}, 0.1, rng), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// train

MelodyDataset dataset_of(std::vector<MelodySequence> seqs, int bars) {
  MelodyDataset ds;
  ds.bars = bars;
  ds.sequences = std::move(seqs);
  return ds;
}

TEST(Train, ZeroEpochsIsNoOp) {
  auto state = init_model(small_config());
  const auto before = state;
  TrainOptions opt;
  opt.epochs = 0;
  const auto report = train(state, dataset_of(testing::toy_corpus(10, 2, 1), 2), opt);
  EXPECT_TRUE(report.step_loss.empty());
  EXPECT_EQ(state.step, 0u);
  EXPECT_TRUE(same_weights(state.weights, before.weights));
}

TEST(Train, ReproducibleAndFinite) {
  TrainOptions opt;
  opt.epochs = 3;
  opt.batch_size = 8;
  opt.learning_rate = 3e-3;
  const auto ds = dataset_of(testing::toy_corpus(40, 2, 1), 2);
  auto a = init_model(small_config());
  auto b = init_model(small_config());
  const auto ra = train(a, ds, opt);
  train(b, ds, opt);
  EXPECT_TRUE(same_weights(a.weights, b.weights));
  EXPECT_EQ(a.step, 15u);
  for (double kl : ra.step_kl) EXPECT_GE(kl, 0.0);
  a.weights.for_each([](const std::string&, const Matrix& m) { EXPECT_TRUE(m.allFinite()); });
  EXPECT_THROW(train(a, dataset_of({}, 4), opt), ShapeError);
}

TEST(BetaSchedule, LinearRamp) {
  BetaSchedule s{0.0, 0.2, 100};
  EXPECT_DOUBLE_EQ(s.at(0), 0.0);
  EXPECT_DOUBLE_EQ(s.at(50), 0.1);
  EXPECT_DOUBLE_EQ(s.at(100), 0.2);
  EXPECT_DOUBLE_EQ(s.at(1000), 0.2);
}

// ---------------------------------------------------------------------------
// checkpoint

TEST(Checkpoint, RoundTripWithinFloatPrecision) {
  for (int bars : {2, 4}) {
    auto state = init_model(small_config(bars));
    state.step = 42;
    state.beta.ramp_steps = 77;
    std::stringstream ss;
    save_checkpoint(ss, state);
    EXPECT_EQ(ss.str().substr(0, 5), "MVAE1");
    const auto back = load_checkpoint(ss);
    EXPECT_EQ(back.config, state.config);
    EXPECT_EQ(back.step, 42u);
    EXPECT_EQ(back.beta.ramp_steps, 77u);
    std::vector<const Matrix*> xs, ys;
    state.weights.for_each([&](const std::string&, const Matrix& m) { xs.push_back(&m); });
    back.weights.for_each([&](const std::string&, const Matrix& m) { ys.push_back(&m); });
    ASSERT_EQ(xs.size(), ys.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      EXPECT_TRUE(xs[i]->cast<float>().cast<double>() == *ys[i]);
    }
    // Saving what was loaded is byte-stable.
    std::stringstream again;
    save_checkpoint(again, back);
    EXPECT_EQ(again.str(), ss.str());
  }
}

TEST(Checkpoint, ValidatesShapesAndTruncation) {
  const auto state = init_model(small_config());
  std::stringstream ss;
  save_checkpoint(ss, state);
  std::string bytes = ss.str();

  std::string truncated = bytes.substr(0, bytes.size() - 10);
  std::stringstream t(truncated);
  EXPECT_THROW(load_checkpoint(t), CheckpointError);

  // Claim a different embed_dim in the header: tensor shapes no longer match.
  std::string wrong = bytes;
  wrong[5 + 8] = static_cast<char>(9);
  std::stringstream w(wrong);
  EXPECT_THROW(load_checkpoint(w), CheckpointError);

  std::stringstream junk("MVAE2....");
  EXPECT_THROW(load_checkpoint(junk), CheckpointError);
}

// ---------------------------------------------------------------------------
// respond

TEST(Respond, FullSimilarityTinyTemperatureIsDeterministic) {
  const auto state = init_model(small_config());
  const auto input = testing::toy_corpus(1, 2, 4)[0];
  CounterRng r1(1), r2(999);
  const PartnerParams p{1e-6, 1.0};
  const auto a = respond(state, input, p, r1);
  const auto b = respond(state, input, p, r2);
  EXPECT_EQ(a, b);
  CounterRng unused;
  EXPECT_EQ(a.codes(), decode(state, encode(state, input).mu, 1.0, DecodeMode::Greedy, unused).codes);
}

TEST(Respond, ZeroSimilarityIgnoresInput) {
  const auto state = init_model(small_config());
  const auto inputs = testing::toy_corpus(2, 2, 5);
  ASSERT_NE(inputs[0], inputs[1]);
  CounterRng r1(7), r2(7);
  const PartnerParams p{1.0, 0.0};
  EXPECT_EQ(respond(state, inputs[0], p, r1), respond(state, inputs[1], p, r2));
}

TEST(Respond, ValidatesParams) {
  const auto state = init_model(small_config());
  CounterRng rng;
  EXPECT_THROW(respond(state, MelodySequence(2), {0.0, 0.5}, rng), std::invalid_argument);
  EXPECT_THROW(respond(state, MelodySequence(2), {1.0, 1.5}, rng), std::invalid_argument);
  EXPECT_THROW(respond(state, MelodySequence(4), {1.0, 0.5}, rng), ShapeError);
}

TEST(EditDistance, Basics) {
  EXPECT_DOUBLE_EQ(normalized_edit_distance({1, 2, 3, 4}, {1, 2, 3, 4}), 0.0);
  EXPECT_DOUBLE_EQ(normalized_edit_distance({1, 2, 3, 4}, {1, 9, 3, 4}), 0.25);
  EXPECT_DOUBLE_EQ(normalized_edit_distance({1, 2, 3, 4}, {2, 3, 4, 5}), 0.5);
  EXPECT_DOUBLE_EQ(token_entropy({3, 3, 3, 3}), 0.0);
  EXPECT_NEAR(token_entropy({1, 2, 1, 2}), std::log(2.0), 1e-15);
}

// ---------------------------------------------------------------------------
// markov

TEST(Markov, DegenerateRestCorpus) {
  const auto stats = build_markov_stats(dataset_of({MelodySequence(2), MelodySequence(2)}, 2), 1);
  CounterRng rng(3);
  const auto input = testing::toy_corpus(1, 2, 1)[0];
  const auto out = markov_respond(input, stats, rng);
  EXPECT_EQ(out, MelodySequence(2));
  EXPECT_EQ(out.length(), input.length());
}

TEST(Markov, OutputsValidAndSameLength) {
  const auto stats = build_markov_stats(dataset_of(testing::toy_corpus(50, 4, 2), 4), 2);
  CounterRng rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto input = testing::random_valid_sequence(rng, 4);
    const auto out = markov_respond(input, stats, rng);
    ASSERT_EQ(out.length(), 64);
  }
  EXPECT_THROW(markov_respond(MelodySequence(2), MarkovStats{}, rng), std::invalid_argument);
}

TEST(Markov, EmpiricalFrequenciesMatchSmoothedProbabilities) {
  const auto stats = build_markov_stats(dataset_of(testing::toy_corpus(30, 2, 6), 2), 1);
  // Context: last input token. Draw the first response token many times.
  auto input_codes = std::vector<int>(32, kRestCode);
  input_codes[31] = Token::note_on(60).code();
  const auto input = MelodySequence::from_codes(2, input_codes);
  const auto expected = markov_next_distribution(stats, {input_codes[31]}, 0);

  std::vector<double> freq(kVocabSize, 0.0);
  const int N = 10000;
  for (int i = 0; i < N; ++i) {
    CounterRng rng(100, i);
    ++freq[markov_respond(input, stats, rng)[0].code()];
  }
  for (int c = 0; c < kVocabSize; ++c) {
    const double p = expected[c];
    EXPECT_NEAR(freq[c] / N, p, 4 * std::sqrt(p * (1 - p) / N) + 1e-12) << "code " << c;
  }
  EXPECT_EQ(expected[kHoldCode], 0.0);
}

}  // namespace
}  // namespace duet
