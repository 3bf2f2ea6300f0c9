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
#pragma once

// Residual policies distilled from elite episodes: a conditional VAE over
// residuals (the default), a deterministic MLP regressor, and a conditional
// VAE over absolute grasp parameters. All inputs and targets are z-scored
// with training-set statistics that travel with the weights.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deft/affordance.hpp"
#include "deft/common.hpp"
#include "deft/nn.hpp"
#include "json.hpp"

namespace deft::policy {

using affordance::GraspParams;

enum class HeadType { kCvae, kMlp, kDirectVae };

inline const char* to_string(HeadType h) {
  switch (h) {
    case HeadType::kCvae: return "cvae";
    case HeadType::kMlp: return "mlp";
    case HeadType::kDirectVae: return "direct-vae";
  }
  return "cvae";
}

inline HeadType head_from_string(const std::string& s) {
  if (s == "cvae") return HeadType::kCvae;
  if (s == "mlp") return HeadType::kMlp;
  if (s == "direct-vae" || s == "direct") return HeadType::kDirectVae;
  throw Error(ErrorKind::kConfig, "unknown policy head '" + s + "'");
}

struct PolicyConfig {
  int latent_dim = 4;
  int hidden = 64;
  double beta = 0.1;
  double learning_rate = 1e-3;
  int epochs = 2000;
  std::uint64_t seed = 0;
  HeadType head = HeadType::kCvae;
  int noise_samples = 8;  // fixed reparameterization draws per training pair

  void validate() const {
    if (latent_dim < 1 || hidden < 1 || epochs < 0 || noise_samples < 1) {
      throw Error(ErrorKind::kConfig, "policy config: sizes must be positive");
    }
    if (!(beta > 0.0) || !(learning_rate > 0.0)) {
      throw Error(ErrorKind::kConfig, "policy config: beta and learning rate must be positive");
    }
  }
};

/// Per-dimension z-scoring. Dimensions with (near) zero spread keep scale 1.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;

  static Standardizer fit(const Eigen::MatrixXd& columns) {
    Standardizer s;
    const double n = static_cast<double>(columns.cols());
    s.mean = columns.rowwise().mean();
    const Eigen::VectorXd var = (columns.colwise() - s.mean).array().square().rowwise().sum() / n;
    s.scale = var.cwiseSqrt();
    for (Eigen::Index i = 0; i < s.scale.size(); ++i) {
      if (!(s.scale[i] > 1e-8)) s.scale[i] = 1.0;
    }
    return s;
  }

  static Standardizer identity(Eigen::Index dim) {
    return {Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim)};
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    return (x.colwise() - mean).array().colwise() / scale.array();
  }

  Eigen::VectorXd invert(const Eigen::VectorXd& y) const { return y.cwiseProduct(scale) + mean; }
};

/// Concatenation of image features and the flattened prior grasp.
inline Eigen::VectorXd context_vector(const FeatureVector& features, const GraspParams& xi) {
  Eigen::VectorXd c(features.size() + kParamDim);
  c << features, xi.to_vector();
  return c;
}

struct CvaeParams {
  nn::Mlp encoder;  // [target; context] -> [mean; log-variance] (2L)
  nn::Mlp decoder;  // [z; context] -> target
  int latent_dim = 1;
  double beta = 0.1;
  Standardizer context;
  Standardizer target;

  Eigen::Index context_dim() const { return context.mean.size(); }
  Eigen::Index size() const { return encoder.size() + decoder.size(); }
};

inline CvaeParams make_cvae(Eigen::Index context_dim, int latent_dim, int hidden, double beta, std::mt19937_64& rng) {
  CvaeParams p;
  p.encoder = nn::make_mlp(kParamDim + context_dim, hidden, 2 * latent_dim, rng);
  p.decoder = nn::make_mlp(latent_dim + context_dim, hidden, kParamDim, rng);
  p.latent_dim = latent_dim;
  p.beta = beta;
  p.context = Standardizer::identity(context_dim);
  p.target = Standardizer::identity(kParamDim);
  return p;
}

inline Eigen::VectorXd flatten(const CvaeParams& p) {
  Eigen::VectorXd v(p.size());
  Eigen::Index at = 0;
  nn::pack(p.encoder, v, at);
  nn::pack(p.decoder, v, at);
  return v;
}

inline void assign(CvaeParams& p, const Eigen::VectorXd& v) {
  Eigen::Index at = 0;
  nn::unpack(p.encoder, v, at);
  nn::unpack(p.decoder, v, at);
}

struct ElboResult {
  double loss = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  Eigen::VectorXd grad;          // w.r.t. flatten(params)
  Eigen::VectorXd grad_target;   // w.r.t. the raw target (single-sample form only)
  Eigen::VectorXd grad_context;  // w.r.t. the raw context (single-sample form only)
};

/// Mean ELBO loss over columns of already-standardized targets/contexts.
/// `noise` holds the standard-normal draws for the reparameterized latent.
inline ElboResult elbo_batch(const CvaeParams& p, const Eigen::MatrixXd& targets, const Eigen::MatrixXd& contexts,
                             const Eigen::MatrixXd& noise, bool want_grad = true) {
  const Eigen::Index n = targets.cols();
  const int l = p.latent_dim;
  if (contexts.cols() != n || noise.cols() != n || noise.rows() != l || targets.rows() != kParamDim ||
      contexts.rows() != p.context_dim()) {
    throw Error(ErrorKind::kDimensionMismatch, "elbo: batch shapes disagree");
  }
  Eigen::MatrixXd enc_in(kParamDim + contexts.rows(), n);
  enc_in << targets, contexts;
  nn::MlpCache enc_cache;
  const Eigen::MatrixXd enc_out = nn::forward(p.encoder, enc_in, &enc_cache);
  const Eigen::MatrixXd mu = enc_out.topRows(l);
  const Eigen::MatrixXd logvar = enc_out.bottomRows(l);
  const Eigen::MatrixXd sigma = (0.5 * logvar.array()).exp().matrix();
  const Eigen::MatrixXd z = mu + sigma.cwiseProduct(noise);

  Eigen::MatrixXd dec_in(l + contexts.rows(), n);
  dec_in << z, contexts;
  nn::MlpCache dec_cache;
  const Eigen::MatrixXd y = nn::forward(p.decoder, dec_in, &dec_cache);

  const Eigen::MatrixXd diff = y - targets;
  const double inv_n = 1.0 / static_cast<double>(n);
  ElboResult out;
  out.reconstruction = diff.squaredNorm() * inv_n;
  out.kl = 0.5 * (mu.array().square() + logvar.array().exp() - 1.0 - logvar.array()).sum() * inv_n;
  out.loss = out.reconstruction + p.beta * out.kl;
  if (!want_grad) return out;

  CvaeParams g;
  g.encoder = nn::zeros_like(p.encoder);
  g.decoder = nn::zeros_like(p.decoder);
  const Eigen::MatrixXd gy = 2.0 * inv_n * diff;
  const Eigen::MatrixXd g_dec_in = nn::backward(p.decoder, dec_cache, gy, g.decoder);
  const Eigen::MatrixXd gz = g_dec_in.topRows(l);
  Eigen::MatrixXd g_enc_out(2 * l, n);
  g_enc_out.topRows(l) = gz + p.beta * inv_n * mu;
  g_enc_out.bottomRows(l) =
      (gz.array() * noise.array() * 0.5 * sigma.array() + p.beta * inv_n * 0.5 * (logvar.array().exp() - 1.0))
          .matrix();
  const Eigen::MatrixXd g_enc_in = nn::backward(p.encoder, enc_cache, g_enc_out, g.encoder);

  out.grad = flatten(g);
  out.grad_target = (g_enc_in.topRows(kParamDim) - gy).rowwise().sum();
  out.grad_context = (g_enc_in.bottomRows(contexts.rows()) + g_dec_in.bottomRows(contexts.rows())).rowwise().sum();
  return out;
}

/// Single-sample ELBO on raw (unstandardized) target and context.
inline ElboResult elbo_loss(const CvaeParams& p, const ParamVector& target, const Eigen::VectorXd& context,
                            const Eigen::VectorXd& noise) {
  if (context.size() != p.context_dim() || noise.size() != p.latent_dim) {
    throw Error(ErrorKind::kDimensionMismatch, "elbo_loss: dimension mismatch");
  }
  const Eigen::MatrixXd t = p.target.apply(target);
  const Eigen::MatrixXd c = p.context.apply(context);
  ElboResult r = elbo_batch(p, t, c, noise);
  r.grad_target = r.grad_target.cwiseQuotient(p.target.scale);
  r.grad_context = r.grad_context.cwiseQuotient(p.context.scale);
  return r;
}

inline double kl_to_standard_normal(const Eigen::VectorXd& mean, const Eigen::VectorXd& logvar) {
  return 0.5 * (mean.array().square() + logvar.array().exp() - 1.0 - logvar.array()).sum();
}

/// Posterior mean and log-variance for a raw target/context pair.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> encode(const CvaeParams& p, const ParamVector& target,
                                                          const Eigen::VectorXd& context) {
  Eigen::VectorXd in(kParamDim + p.context_dim());
  in << p.target.apply(target), p.context.apply(context);
  const Eigen::MatrixXd out = nn::forward(p.encoder, in);
  return {out.col(0).head(p.latent_dim), out.col(0).tail(p.latent_dim)};
}

/// Decoded raw target for latent z.
inline ParamVector decode(const CvaeParams& p, const Eigen::VectorXd& z, const Eigen::VectorXd& context) {
  if (context.size() != p.context_dim() || z.size() != p.latent_dim) {
    throw Error(ErrorKind::kDimensionMismatch, "decode: dimension mismatch");
  }
  Eigen::VectorXd in(p.latent_dim + p.context_dim());
  in << z, p.context.apply(context);
  const Eigen::MatrixXd y = nn::forward(p.decoder, in);
  return p.target.invert(y.col(0));
}

// ---------------------------------------------------------------------------
// Training data and heads

/// One elite episode: the observation features, the prior grasp, and the residual that was executed.
struct EliteSample {
  FeatureVector features;
  GraspParams prior;
  ParamVector residual = ParamVector::Zero();
};

namespace detail {

inline void check_elites(std::span<const EliteSample> elites) {
  if (elites.empty()) throw Error(ErrorKind::kEmptyDataset, "policy training: no elite samples");
  const Eigen::Index f = elites.front().features.size();
  for (const auto& e : elites) {
    if (e.features.size() != f) throw Error(ErrorKind::kDimensionMismatch, "policy training: inconsistent features");
  }
}

inline Eigen::MatrixXd contexts_of(std::span<const EliteSample> elites) {
  const Eigen::Index f = elites.front().features.size();
  Eigen::MatrixXd c(f + kParamDim, static_cast<Eigen::Index>(elites.size()));
  for (std::size_t i = 0; i < elites.size(); ++i) c.col(i) = context_vector(elites[i].features, elites[i].prior);
  return c;
}

inline Eigen::MatrixXd targets_of(std::span<const EliteSample> elites, bool absolute) {
  Eigen::MatrixXd t(kParamDim, static_cast<Eigen::Index>(elites.size()));
  for (std::size_t i = 0; i < elites.size(); ++i) {
    t.col(i) = absolute ? ParamVector(elites[i].prior.to_vector() + elites[i].residual) : elites[i].residual;
  }
  return t;
}

}  // namespace detail

struct CvaeTraining {
  CvaeParams params;
  nn::TrainTrace trace;
};

/// Fits a conditional VAE; `absolute` switches the target from the residual to prior + residual.
inline CvaeTraining train_cvae(std::span<const EliteSample> elites, const PolicyConfig& cfg, bool absolute = false) {
  cfg.validate();
  detail::check_elites(elites);
  const Eigen::MatrixXd raw_c = detail::contexts_of(elites);
  const Eigen::MatrixXd raw_t = detail::targets_of(elites, absolute);

  std::mt19937_64 rng(cfg.seed);
  CvaeTraining out;
  out.params = make_cvae(raw_c.rows(), cfg.latent_dim, cfg.hidden, cfg.beta, rng);
  out.params.context = Standardizer::fit(raw_c);
  out.params.target = Standardizer::fit(raw_t);

  const Eigen::Index n = raw_c.cols();
  const Eigen::Index s = cfg.noise_samples;
  const Eigen::MatrixXd c1 = out.params.context.apply(raw_c);
  const Eigen::MatrixXd t1 = out.params.target.apply(raw_t);
  Eigen::MatrixXd contexts(c1.rows(), n * s);
  Eigen::MatrixXd targets(kParamDim, n * s);
  for (Eigen::Index k = 0; k < s; ++k) {
    contexts.middleCols(k * n, n) = c1;
    targets.middleCols(k * n, n) = t1;
  }
  Eigen::MatrixXd noise(cfg.latent_dim, n * s);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = normal(rng);

  CvaeParams scratch = out.params;
  auto objective = [&](const Eigen::VectorXd& v, Eigen::VectorXd& g) {
    assign(scratch, v);
    ElboResult r = elbo_batch(scratch, targets, contexts, noise);
    g = std::move(r.grad);
    return r.loss;
  };
  Eigen::VectorXd v = flatten(out.params);
  out.trace = nn::minimize(v, objective, cfg.epochs, cfg.learning_rate);
  assign(out.params, v);
  return out;
}

/// Deterministic regressor context -> residual.
struct MlpHead {
  nn::Mlp net;
  Standardizer context;
  Standardizer target;
};

struct MlpTraining {
  MlpHead head;
  nn::TrainTrace trace;
};

inline double mlp_objective(const MlpHead& h, const Eigen::MatrixXd& targets, const Eigen::MatrixXd& contexts,
                            Eigen::VectorXd* grad) {
  nn::MlpCache cache;
  const Eigen::MatrixXd y = nn::forward(h.net, contexts, &cache);
  const Eigen::MatrixXd diff = y - targets;
  const double inv_n = 1.0 / static_cast<double>(targets.cols());
  if (grad) {
    nn::Mlp g = nn::zeros_like(h.net);
    nn::backward(h.net, cache, 2.0 * inv_n * diff, g);
    grad->resize(g.size());
    Eigen::Index at = 0;
    nn::pack(g, *grad, at);
  }
  return diff.squaredNorm() * inv_n;
}

inline MlpTraining train_mlp_head(std::span<const EliteSample> elites, const PolicyConfig& cfg) {
  cfg.validate();
  detail::check_elites(elites);
  const Eigen::MatrixXd raw_c = detail::contexts_of(elites);
  const Eigen::MatrixXd raw_t = detail::targets_of(elites, false);
  std::mt19937_64 rng(cfg.seed);
  MlpTraining out;
  out.head.net = nn::make_mlp(raw_c.rows(), cfg.hidden, kParamDim, rng);
  out.head.context = Standardizer::fit(raw_c);
  out.head.target = Standardizer::fit(raw_t);
  const Eigen::MatrixXd c = out.head.context.apply(raw_c);
  const Eigen::MatrixXd t = out.head.target.apply(raw_t);

  MlpHead scratch = out.head;
  auto objective = [&](const Eigen::VectorXd& v, Eigen::VectorXd& g) {
    Eigen::Index at = 0;
    nn::unpack(scratch.net, v, at);
    return mlp_objective(scratch, t, c, &g);
  };
  Eigen::VectorXd v(out.head.net.size());
  Eigen::Index at = 0;
  nn::pack(out.head.net, v, at);
  out.trace = nn::minimize(v, objective, cfg.epochs, cfg.learning_rate);
  at = 0;
  nn::unpack(out.head.net, v, at);
  return out;
}

inline ParamVector act_mlp(const MlpHead& h, const FeatureVector& features, const GraspParams& xi) {
  const Eigen::VectorXd c = context_vector(features, xi);
  if (c.size() != h.context.mean.size()) throw Error(ErrorKind::kDimensionMismatch, "act_mlp: feature dimension");
  const Eigen::MatrixXd y = nn::forward(h.net, h.context.apply(c));
  return h.target.invert(y.col(0));
}

/// Residual for (features, ξ) with z drawn from N(0, I).
inline ParamVector act(const CvaeParams& p, const FeatureVector& features, const GraspParams& xi, std::mt19937_64& rng) {
  const Eigen::VectorXd c = context_vector(features, xi);
  if (c.size() != p.context_dim()) throw Error(ErrorKind::kDimensionMismatch, "act: feature dimension");
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(p.latent_dim);
  for (int i = 0; i < p.latent_dim; ++i) z[i] = normal(rng);
  return decode(p, z, c);
}

/// Residual at z = 0.
inline ParamVector act_mean(const CvaeParams& p, const FeatureVector& features, const GraspParams& xi) {
  return decode(p, Eigen::VectorXd::Zero(p.latent_dim), context_vector(features, xi));
}

inline GraspParams act_direct(const CvaeParams& p, const FeatureVector& features, const GraspParams& xi,
                              std::mt19937_64& rng) {
  return GraspParams::from_vector(act(p, features, xi, rng));
}

// ---------------------------------------------------------------------------
// Trained policy bundle and weight files

inline constexpr int kPolicyFormatVersion = 1;

struct TrainedPolicy {
  PolicyConfig config;
  std::optional<CvaeParams> cvae;  // kCvae and kDirectVae
  std::optional<MlpHead> mlp;      // kMlp
  std::vector<double> loss_curve;

  HeadType head() const { return config.head; }

  /// Grasp to execute for an observation with prior ξ.
  GraspParams propose(const FeatureVector& features, const GraspParams& xi, std::mt19937_64& rng) const {
    switch (config.head) {
      case HeadType::kCvae:
        return GraspParams::from_vector(xi.to_vector() + act(*cvae, features, xi, rng));
      case HeadType::kMlp:
        return GraspParams::from_vector(xi.to_vector() + act_mlp(*mlp, features, xi));
      case HeadType::kDirectVae:
        return act_direct(*cvae, features, xi, rng);
    }
    return xi;
  }
};

inline TrainedPolicy train_policy(std::span<const EliteSample> elites, const PolicyConfig& cfg) {
  TrainedPolicy p;
  p.config = cfg;
  if (cfg.head == HeadType::kMlp) {
    auto t = train_mlp_head(elites, cfg);
    p.mlp = std::move(t.head);
    p.loss_curve = std::move(t.trace.loss);
  } else {
    auto t = train_cvae(elites, cfg, cfg.head == HeadType::kDirectVae);
    p.cvae = std::move(t.params);
    p.loss_curve = std::move(t.trace.loss);
  }
  return p;
}

inline nlohmann::json to_json(const PolicyConfig& c) {
  return {{"latent_dim", c.latent_dim}, {"hidden", c.hidden},   {"beta", c.beta},
          {"learning_rate", c.learning_rate}, {"epochs", c.epochs}, {"seed", c.seed},
          {"head", to_string(c.head)},  {"noise_samples", c.noise_samples}};
}

inline PolicyConfig policy_config_from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.beta = j.value("beta", c.beta);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.head = head_from_string(j.value("head", std::string("cvae")));
  c.noise_samples = j.value("noise_samples", c.noise_samples);
  return c;
}

inline nlohmann::json to_json(const Standardizer& s) { return {{"mean", to_std(s.mean)}, {"scale", to_std(s.scale)}}; }

inline Standardizer standardizer_from_json(const nlohmann::json& j) {
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto s = j.at("scale").get<std::vector<double>>();
  if (m.size() != s.size()) throw Error(ErrorKind::kParse, "standardizer: size mismatch");
  const auto n = static_cast<Eigen::Index>(m.size());
  return {Eigen::Map<const Eigen::VectorXd>(m.data(), n), Eigen::Map<const Eigen::VectorXd>(s.data(), n)};
}

inline nlohmann::json to_json(const TrainedPolicy& p) {
  nlohmann::json j{{"format", "deft-policy"},
                   {"version", kPolicyFormatVersion},
                   {"config", to_json(p.config)},
                   {"loss_curve", p.loss_curve}};
  if (p.cvae) {
    j["normalization"] = {{"context", to_json(p.cvae->context)}, {"target", to_json(p.cvae->target)}};
    j["latent_dim"] = p.cvae->latent_dim;
    j["beta"] = p.cvae->beta;
    j["weights"] = {{"encoder", nn::to_json(p.cvae->encoder)}, {"decoder", nn::to_json(p.cvae->decoder)}};
  } else if (p.mlp) {
    j["normalization"] = {{"context", to_json(p.mlp->context)}, {"target", to_json(p.mlp->target)}};
    j["weights"] = {{"net", nn::to_json(p.mlp->net)}};
  }
  return j;
}

inline TrainedPolicy policy_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "deft-policy") throw Error(ErrorKind::kParse, "not a policy file");
    if (j.at("version").get<int>() != kPolicyFormatVersion) {
      throw Error(ErrorKind::kParse, "unsupported policy file version");
    }
    TrainedPolicy p;
    p.config = policy_config_from_json(j.at("config"));
    p.loss_curve = j.value("loss_curve", std::vector<double>{});
    const auto& norm = j.at("normalization");
    if (p.config.head == HeadType::kMlp) {
      MlpHead h{nn::mlp_from_json(j.at("weights").at("net")), standardizer_from_json(norm.at("context")),
                standardizer_from_json(norm.at("target"))};
      p.mlp = std::move(h);
    } else {
      CvaeParams c;
      c.encoder = nn::mlp_from_json(j.at("weights").at("encoder"));
      c.decoder = nn::mlp_from_json(j.at("weights").at("decoder"));
      c.latent_dim = j.at("latent_dim").get<int>();
      c.beta = j.at("beta").get<double>();
      c.context = standardizer_from_json(norm.at("context"));
      c.target = standardizer_from_json(norm.at("target"));
      p.cvae = std::move(c);
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("policy file: ") + e.what());
  }
}

inline void save_policy(const TrainedPolicy& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write policy file " + path);
  out << to_json(p).dump() << '\n';
}

inline TrainedPolicy load_policy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open policy file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, path + ": " + e.what());
  }
  return policy_from_json(j);
}

}  // namespace deft::policy
