// Copyright 2026 The DEFT Toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "deft/policy.hpp"
#include "deft/simenv.hpp"

using namespace deft;
using namespace deft::policy;

namespace {

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); }

// ELBO written out from its definition: standardize, encode, reparameterize,
// decode, squared error plus beta * closed-form KL.
double reference_elbo(const CvaeParams& p, const ParamVector& t, const Eigen::VectorXd& c, const Eigen::VectorXd& eps) {
  const Eigen::VectorXd ts = (t - p.target.mean).cwiseQuotient(p.target.scale);
  const Eigen::VectorXd cs = (c - p.context.mean).cwiseQuotient(p.context.scale);
  Eigen::VectorXd enc_in(ts.size() + cs.size());
  enc_in << ts, cs;
  const Eigen::VectorXd enc = nn::forward(p.encoder, enc_in).col(0);
  const int l = p.latent_dim;
  double kl = 0.0;
  Eigen::VectorXd z(l);
  for (int i = 0; i < l; ++i) {
    const double m = enc[i], lv = enc[l + i];
    kl += 0.5 * (m * m + std::exp(lv) - 1.0 - lv);
    z[i] = m + std::exp(0.5 * lv) * eps[i];
  }
  Eigen::VectorXd dec_in(l + cs.size());
  dec_in << z, cs;
  const Eigen::VectorXd y = nn::forward(p.decoder, dec_in).col(0);
  return (y - ts).squaredNorm() + p.beta * kl;
}

CvaeParams random_cvae(std::mt19937_64& rng, Eigen::Index cdim, int l, int hidden) {
  CvaeParams p = make_cvae(cdim, l, hidden, 0.1, rng);
  std::uniform_real_distribution<double> u(0.5, 2.0), m(-1.0, 1.0);
  // Seeded, so each test process sees the same instances.
  for (Eigen::Index i = 0; i < p.encoder.hidden.bias.size(); ++i) p.encoder.hidden.bias[i] = m(rng);
  for (Eigen::Index i = 0; i < cdim; ++i) {
    p.context.mean[i] = m(rng);
    p.context.scale[i] = u(rng);
  }
  for (int i = 0; i < kParamDim; ++i) {
    p.target.mean[i] = m(rng);
    p.target.scale[i] = u(rng);
  }
  return p;
}

FeatureVector features_const(double v, int dim = 4) { return FeatureVector::Constant(dim, v); }

PolicyConfig small_config(int epochs = 1500) {
  PolicyConfig c;
  c.hidden = 32;
  c.epochs = epochs;
  c.learning_rate = 3e-3;
  return c;
}

}  // namespace

// --- ELBO -------------------------------------------------------------------------

TEST(Elbo, KlZeroForStandardPosterior) {
  std::mt19937_64 rng(1);
  CvaeParams p = make_cvae(5, 2, 8, 0.1, rng);
  p.encoder.output.weight.setZero();
  p.encoder.output.bias.setZero();
  const auto r = elbo_loss(p, ParamVector::Zero(), Eigen::VectorXd::Zero(5), Eigen::VectorXd::Zero(2));
  EXPECT_EQ(r.kl, 0.0);
  EXPECT_EQ(kl_to_standard_normal(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(3)), 0.0);
}

TEST(Elbo, KlClosedFormHalf) {
  std::mt19937_64 rng(2);
  CvaeParams p = make_cvae(3, 1, 8, 0.1, rng);
  p.encoder.output.weight.setZero();
  p.encoder.output.bias << 1.0, 0.0;  // mean 1, log-variance 0
  const auto r = elbo_loss(p, ParamVector::Zero(), Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(1));
  EXPECT_NEAR(r.kl, 0.5, 1e-15);
}

TEST(Elbo, KlNonNegative) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int i = 0; i < 1000; ++i) {
    Eigen::VectorXd m(3), lv(3);
    for (int j = 0; j < 3; ++j) {
      m[j] = n(rng);
      lv[j] = n(rng);
    }
    EXPECT_GE(kl_to_standard_normal(m, lv), 0.0);
  }
}

TEST(Elbo, LossMatchesReference) {
  std::mt19937_64 rng(4);
  const CvaeParams p = random_cvae(rng, 7, 3, 10);
  const ParamVector t = ParamVector::Random();
  const Eigen::VectorXd c = Eigen::VectorXd::Random(7), eps = Eigen::VectorXd::Random(3);
  EXPECT_NEAR(elbo_loss(p, t, c, eps).loss, reference_elbo(p, t, c, eps), 1e-12);
}

TEST(Elbo, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  const double h = 1e-5;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    CvaeParams p = random_cvae(rng, 6, 2, 8);
    const ParamVector t = ParamVector::Random();
    const Eigen::VectorXd c = Eigen::VectorXd::Random(6), eps = Eigen::VectorXd::Random(2);
    const auto r = elbo_loss(p, t, c, eps);
    const Eigen::VectorXd w = flatten(p);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      Eigen::VectorXd a = w, b = w;
      a[i] += h;
      b[i] -= h;
      CvaeParams pa = p, pb = p;
      assign(pa, a);
      assign(pb, b);
      worst = std::max(worst, rel_err(r.grad[i], (reference_elbo(pa, t, c, eps) - reference_elbo(pb, t, c, eps)) / (2 * h)));
    }
    for (int i = 0; i < kParamDim; ++i) {
      ParamVector a = t, b = t;
      a[i] += h;
      b[i] -= h;
      worst = std::max(worst, rel_err(r.grad_target[i], (reference_elbo(p, a, c, eps) - reference_elbo(p, b, c, eps)) / (2 * h)));
    }
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      Eigen::VectorXd a = c, b = c;
      a[i] += h;
      b[i] -= h;
      worst = std::max(worst, rel_err(r.grad_context[i], (reference_elbo(p, t, a, eps) - reference_elbo(p, t, b, eps)) / (2 * h)));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Elbo, DimensionMismatch) {
  std::mt19937_64 rng(6);
  const CvaeParams p = make_cvae(5, 2, 8, 0.1, rng);
  EXPECT_THROW(elbo_loss(p, ParamVector::Zero(), Eigen::VectorXd::Zero(4), Eigen::VectorXd::Zero(2)), Error);
  EXPECT_THROW(elbo_loss(p, ParamVector::Zero(), Eigen::VectorXd::Zero(5), Eigen::VectorXd::Zero(3)), Error);
}

// --- Training ------------------------------------------------------------------------

TEST(TrainCvae, SingleEliteOverfits) {
  EliteSample e{features_const(0.3), GraspParams::from_vector(ParamVector::LinSpaced(0.0, 1.0)),
                ParamVector::LinSpaced(-0.05, 0.05)};
  PolicyConfig cfg;
  cfg.epochs = 3000;
  const std::vector<EliteSample> elites{e};
  const auto out = train_cvae(elites, cfg);
  const Eigen::VectorXd c = context_vector(e.features, e.prior);
  const auto [mean, logvar] = encode(out.params, e.residual, c);
  EXPECT_LT((decode(out.params, mean, c) - e.residual).squaredNorm(), 1e-3);
}

TEST(TrainCvae, LossCurveMonotoneAndDeterministic) {
  std::mt19937_64 rng(7);
  std::vector<EliteSample> elites;
  for (int i = 0; i < 10; ++i) {
    elites.push_back({FeatureVector::Random(4), GraspParams::from_vector(ParamVector::Random()), ParamVector::Random() * 0.05});
  }
  const auto a = train_cvae(elites, small_config(400));
  const auto b = train_cvae(elites, small_config(400));
  EXPECT_EQ(a.trace.loss, b.trace.loss);
  for (std::size_t i = 1; i < a.trace.loss.size(); ++i) EXPECT_LE(a.trace.loss[i], a.trace.loss[i - 1]);
  EXPECT_LT(a.trace.loss.back(), a.trace.loss.front());
}

TEST(TrainCvae, EmptyElitesRejected) {
  try {
    train_cvae({}, PolicyConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEmptyDataset);
  }
  EXPECT_THROW(train_mlp_head({}, PolicyConfig{}), Error);
  PolicyConfig direct;
  direct.head = HeadType::kDirectVae;
  EXPECT_THROW(train_policy({}, direct), Error);
}

TEST(TrainCvae, MeanResidualInsideEliteEnvelope) {
  // Ten elites from a biased synthetic session: residuals clustered around the negated bias.
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<EliteSample> elites;
  for (int i = 0; i < 10; ++i) {
    ParamVector r;
    for (int j = 0; j < kParamDim; ++j) r[j] = 0.02 * n(rng);
    r[0] -= 0.03;
    r[5] += 0.15;
    FeatureVector f(4);
    for (int j = 0; j < 4; ++j) f[j] = n(rng);
    elites.push_back({f, GraspParams::from_vector(ParamVector::Constant(0.1)), r});
  }
  const auto out = train_cvae(elites, small_config());
  ParamVector lo = elites[0].residual, hi = elites[0].residual;
  for (const auto& e : elites) {
    lo = lo.cwiseMin(e.residual);
    hi = hi.cwiseMax(e.residual);
  }
  ParamVector mean = ParamVector::Zero();
  for (const auto& e : elites) mean += act_mean(out.params, e.features, e.prior);
  mean /= 10.0;
  for (int j = 0; j < kParamDim; ++j) {
    EXPECT_GE(mean[j], lo[j]) << j;
    EXPECT_LE(mean[j], hi[j]) << j;
  }
}

TEST(TrainCvae, ResidualTracksPosition) {
  // δμx = -0.5 * (object x - 0.45): a negative relationship the policy should reproduce.
  const simenv::FeatureSynthesizer synth(8, 3, 0.0);
  simenv::TaskSpec spec;
  std::vector<EliteSample> elites;
  std::vector<double> xs;
  for (int i = 0; i < 10; ++i) {
    const auto inst = simenv::make_instance(spec, 100 + i);
    ParamVector r = ParamVector::Zero();
    r[0] = -0.5 * (inst.object_position.x() - 0.45);
    elites.push_back({synth.features(inst), inst.optimum, r});
  }
  const auto out = train_cvae(elites, small_config(2000));
  std::mt19937_64 rng(1);
  double sx = 0, sd = 0, sxd = 0;
  const int n = 200;
  for (int i = 0; i < n; ++i) {
    const auto inst = simenv::make_instance(spec, 5000 + i);
    const double d = act(out.params, synth.features(inst), inst.optimum, rng)[0];
    const double x = inst.object_position.x();
    sx += x;
    sd += d;
    sxd += x * d;
  }
  const double cov = sxd / n - (sx / n) * (sd / n);
  EXPECT_LT(cov, 0.0);
}

// --- Acting ------------------------------------------------------------------------

TEST(Act, DecoderIgnoringZIsDeterministic) {
  std::mt19937_64 rng(9);
  CvaeParams p = make_cvae(4 + kParamDim, 1, 8, 0.1, rng);
  p.decoder.hidden.weight.col(0).setZero();  // the z input column
  const FeatureVector f = features_const(0.2);
  const GraspParams xi;
  std::mt19937_64 a(1), b(2);
  const ParamVector ra = act(p, f, xi, a), rb = act(p, f, xi, b);
  EXPECT_EQ(ra, rb);
  EXPECT_EQ(ra, act_mean(p, f, xi));
}

TEST(Act, FixedSeedIdentical) {
  std::mt19937_64 rng(10);
  const CvaeParams p = make_cvae(4 + kParamDim, 3, 8, 0.1, rng);
  std::mt19937_64 a(5), b(5);
  EXPECT_EQ(act(p, features_const(0.1), GraspParams{}, a), act(p, features_const(0.1), GraspParams{}, b));
}

TEST(Act, DimensionMismatch) {
  std::mt19937_64 rng(11);
  const CvaeParams p = make_cvae(4 + kParamDim, 2, 8, 0.1, rng);
  EXPECT_THROW(act(p, features_const(0.1, 5), GraspParams{}, rng), Error);
}

// --- MLP head ------------------------------------------------------------------------

TEST(MlpHeadTest, BimodalAveragesModes) {
  ParamVector r = ParamVector::Constant(0.04);
  std::vector<EliteSample> elites;
  for (int i = 0; i < 10; ++i) elites.push_back({features_const(0.5), GraspParams{}, i % 2 ? r : ParamVector(-r)});
  const auto out = train_mlp_head(elites, small_config());
  EXPECT_LT(act_mlp(out.head, features_const(0.5), GraspParams{}).norm(), 0.05 * r.norm());
}

TEST(MlpHeadTest, SingleEliteReproduced) {
  const EliteSample e{features_const(0.7), GraspParams::from_vector(ParamVector::Constant(0.2)), ParamVector::LinSpaced(-0.1, 0.1)};
  const std::vector<EliteSample> elites{e};
  const auto out = train_mlp_head(elites, small_config(500));
  EXPECT_LT((act_mlp(out.head, e.features, e.prior) - e.residual).squaredNorm(), 1e-3);
}

// --- Direct head -----------------------------------------------------------------------

TEST(DirectHead, SingleEliteOverfits) {
  const EliteSample e{features_const(-0.3), GraspParams::from_vector(ParamVector::Constant(0.4)), ParamVector::Constant(0.01)};
  PolicyConfig cfg;
  cfg.head = HeadType::kDirectVae;
  cfg.epochs = 3000;
  const std::vector<EliteSample> elites{e};
  const auto p = train_policy(elites, cfg);
  ASSERT_TRUE(p.cvae.has_value());
  const ParamVector target = e.prior.to_vector() + e.residual;
  const Eigen::VectorXd c = context_vector(e.features, e.prior);
  const auto [mean, logvar] = encode(*p.cvae, target, c);
  EXPECT_LT((decode(*p.cvae, mean, c) - target).squaredNorm(), 1e-3);
}

// --- Weight files ------------------------------------------------------------------------

TEST(WeightFile, RoundTripForEveryHead) {
  std::mt19937_64 rng(12);
  std::vector<EliteSample> elites;
  for (int i = 0; i < 10; ++i) {
    elites.push_back({FeatureVector::Random(4), GraspParams::from_vector(ParamVector::Random()), ParamVector::Random() * 0.05});
  }
  const auto path = (std::filesystem::temp_directory_path() / "deft_policy_test.json").string();
  for (HeadType head : {HeadType::kCvae, HeadType::kMlp, HeadType::kDirectVae}) {
    PolicyConfig cfg = small_config(50);
    cfg.head = head;
    const auto p = train_policy(elites, cfg);
    save_policy(p, path);
    const auto back = load_policy(path);
    EXPECT_EQ(back.head(), head);
    std::mt19937_64 a(1), b(1);
    EXPECT_EQ(p.propose(elites[0].features, elites[0].prior, a).to_vector(),
              back.propose(elites[0].features, elites[0].prior, b).to_vector());
  }
  std::filesystem::remove(path);
}

TEST(WeightFile, RejectsForeignFormat) {
  EXPECT_THROW(policy_from_json(nlohmann::json{{"format", "other"}, {"version", 1}}), Error);
}

TEST(Standardizer, ZeroSpreadKeepsUnitScale) {
  Eigen::MatrixXd x(2, 3);
  x << 1, 2, 3, 5, 5, 5;
  const auto s = Standardizer::fit(x);
  EXPECT_NEAR(s.scale[0], std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_EQ(s.scale[1], 1.0);
  EXPECT_LT((s.invert(s.apply(x).col(2)) - x.col(2)).norm(), 1e-15);
}
