// End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
// the exit status is the number of failures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "fd_check.hpp"
#include "lsd/analysis.hpp"
#include "lsd/autoencoder.hpp"
#include "lsd/diffusion.hpp"
#include "lsd/probe.hpp"
#include "lsd/training.hpp"

using namespace lsd;
namespace ag = lsd::ag;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
  void note(const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what;
  }
};

Tensor randn(std::vector<std::int64_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
  return t;
}

struct Masks {
  std::vector<std::uint8_t> residue;
  std::vector<std::uint8_t> attend;
};

Masks toy_masks(std::int64_t B, std::int64_t L, std::int64_t n_res) {
  Masks m;
  m.residue.assign(static_cast<std::size_t>(B * L), 0);
  m.attend.assign(static_cast<std::size_t>(B * L), 0);
  for (std::int64_t b = 0; b < B; ++b) {
    m.attend[b * L] = 1;
    for (std::int64_t i = 0; i < n_res; ++i) {
      m.residue[b * L + 1 + i] = 1;
      m.attend[b * L + 1 + i] = 1;
    }
    m.attend[b * L + 1 + n_res] = 1;
  }
  return m;
}

std::vector<seqdata::TokenSequence> random_sequences(std::size_t n, std::size_t min_len,
                                                     std::size_t max_len, std::uint64_t seed) {
  Rng rng(seed);
  const std::string letters = seqdata::Vocab::letters();
  std::vector<seqdata::TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = min_len + rng.index(max_len - min_len + 1);
    std::string s;
    for (std::size_t j = 0; j < len; ++j) s += letters[rng.index(20)];
    out.push_back(seqdata::tokenize(s, "s" + std::to_string(i)));
  }
  return out;
}

nn::BlockConfig toy_block() {
  nn::BlockConfig cfg;
  cfg.channels = 32;
  cfg.heads = 4;
  cfg.layers = 2;
  return cfg;
}

double dataset_reconstruction_ce(const ae::Autoencoder& model,
                                 const seqdata::TokenBatch& batch) {
  auto& store = const_cast<nn::ParamStore&>(model.params());
  nn::Tape tape(store, false);
  ag::Var z = model.encode_var(tape, batch);
  ag::Var logits = model.decode_var(tape, z, batch.residue_mask, batch.attend_mask);
  return ae::Autoencoder::reconstruction_loss(logits, batch.tokens, batch.residue_mask).item();
}

// Reconstruction CE restricted to strongly noised positions, with frozen
// noise draws so the same corruption is scored before and after training.
double noised_ce(const ae::Autoencoder& model, const seqdata::TokenBatch& batch,
                 std::uint64_t noise_seed, double threshold) {
  Rng rng(noise_seed);
  const std::size_t rows = batch.residue_mask.size();
  std::vector<double> t_a(rows, 0.0);
  std::vector<double> weights(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!batch.residue_mask[i]) continue;
    t_a[i] = std::clamp(ae::amplitude_quantile(rng.uniform()), 1e-6, 1.0 - 1e-6);
    const double s = std::sin(kPi * t_a[i] / 2.0);
    weights[i] = (t_a[i] > threshold) ? s * s : 0.0;
  }
  const std::int64_t d = model.block_config().channels;
  Tensor eps({batch.rows, batch.padded_len, d});
  for (std::int64_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();

  auto& store = const_cast<nn::ParamStore&>(model.params());
  nn::Tape tape(store, false);
  ag::Var z = model.encode_var(tape, batch);
  auto [noised, unused] = ae::Autoencoder::noise_mask(z, t_a, eps, batch.residue_mask);
  (void)unused;
  ag::Var logits = model.decode_var(tape, noised, batch.residue_mask, batch.attend_mask);
  return ae::Autoencoder::reconstruction_loss(logits, batch.tokens, batch.residue_mask, &weights)
      .item();
}

// ---- criteria ----

Outcome criterion_schedule() {
  Outcome out;
  const auto start = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double t = rng.uniform();
    const auto s = diff::schedule(t);
    worst = std::max(worst, std::fabs(s.alpha * s.alpha + s.sigma * s.sigma - 1.0));
    const double z = rng.normal(), eps = rng.normal();
    const double z_t = s.alpha * z + s.sigma * eps;
    const double v_t = -s.sigma * z + s.alpha * eps;
    worst = std::max(worst, std::fabs(s.alpha * z_t - s.sigma * v_t - z));
    worst = std::max(worst, std::fabs(s.sigma * z_t + s.alpha * v_t - eps));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.require(worst < 1e-10, "max identity error " + std::to_string(worst));
  out.require(secs < 1.0, "runtime " + std::to_string(secs) + " s");
  return out;
}

Outcome criterion_loss_fixtures() {
  Outcome out;
  Tensor logits = Tensor::zeros({1, 3, 20});
  const double ce =
      ag::cross_entropy(ag::leaf(logits), {4, 0, 19}, {1.0, 1.0, 1.0}).item();
  out.require(std::fabs(ce - std::log(20.0)) < 1e-9, "uniform CE != ln 20");

  ae::MomentSummary m;
  m.count = 100;
  m.mu.assign(4, 0.0);
  m.var.assign(4, 1.0);
  out.require(std::fabs(ae::kl_norm_univariate(m)) < 1e-9, "KL(0,1) != 0");
  m.mu.assign(4, 1.0);
  out.require(std::fabs(ae::kl_norm_univariate(m) - 0.5) < 1e-9, "KL(mu=1) != 0.5");
  m.mu.assign(4, 0.0);
  m.var.assign(4, std::exp(1.0));
  out.require(std::fabs(ae::kl_norm_univariate(m) - (std::exp(1.0) - 2.0) / 2.0) < 1e-9,
              "KL(var=e) != (e-2)/2");

  std::vector<double> r2;
  const double s = std::sqrt(2.0);
  for (int sa : {-1, 1})
    for (int sb : {-1, 1}) {
      r2.push_back(sa * s);
      r2.push_back(sb * s);
    }
  const double multi = ag::kl_norm_multivariate_rows(ag::leaf(Tensor({4, 2}, r2))).item();
  out.require(std::fabs(multi - (1.0 - std::log(2.0)) / 2.0) < 1e-6,
              "multivariate fixture != (1-ln2)/2");

  std::vector<double> rows;
  for (int sa : {-1, 1})
    for (int sb : {-1, 1})
      for (int sc : {-1, 1}) {
        rows.push_back(sa * 1.3);
        rows.push_back(sb * 0.7);
        rows.push_back(sc * 1.0);
      }
  Tensor diag({8, 3}, rows);
  const double uni_d = ag::kl_norm_univariate_rows(ag::leaf(diag)).item();
  const double multi_d = ag::kl_norm_multivariate_rows(ag::leaf(diag)).item();
  out.require(std::fabs(uni_d - multi_d) < 1e-6, "uni/multi diagonal disagreement");
  return out;
}

Outcome criterion_gradients() {
  Outcome out;
  const auto start = std::chrono::steady_clock::now();
  Rng rng(301);
  auto check = [&](const std::string& name, const Tensor& x,
                   const std::function<ag::Var(const ag::Var&)>& f) {
    ag::Var in = ag::leaf(x, true);
    ag::backward(f(in));
    Tensor fd = test::fd_gradient([&](const Tensor& p) { return f(ag::leaf(p)).item(); }, x);
    const double err = test::grad_rel_err(in.grad(), fd);
    out.require(err < 1e-4, name + " rel err " + std::to_string(err));
  };

  auto masks = toy_masks(1, 6, 4);
  std::vector<int> tokens = {21, 3, 7, 3, 11, 22};
  std::vector<double> weights = {0.0, 1.0, 0.4, 1.0, 0.8, 0.0};
  std::vector<double> unit = {0.0, 1.0, 1.0, 1.0, 1.0, 0.0};

  check("weighted CE", randn({1, 6, 20}, rng), [&](const ag::Var& v) {
    return ag::cross_entropy(v, tokens, weights);
  });
  check("unweighted CE", randn({1, 6, 20}, rng), [&](const ag::Var& v) {
    return ag::cross_entropy(v, tokens, unit);
  });
  check("univariate KL", randn({1, 6, 8}, rng), [&](const ag::Var& v) {
    return ae::Autoencoder::norm_loss(v, masks.residue, ae::NormForm::Univariate);
  });
  // Full-rank covariance needs clearly more residue rows than dimensions.
  auto wide = toy_masks(4, 6, 4);
  check("multivariate KL", randn({4, 6, 8}, rng), [&](const ag::Var& v) {
    return ae::Autoencoder::norm_loss(v, wide.residue, ae::NormForm::Multivariate);
  });
  check("token norm", randn({1, 6, 8}, rng), [&](const ag::Var& v) {
    return ae::Autoencoder::token_norm_loss(v, tokens, masks.residue);
  });
  Tensor v_target = randn({1, 6, 8}, rng);
  check("v-prediction mse", randn({1, 6, 8}, rng), [&](const ag::Var& v) {
    return diff::weighted_v_mse(v, v_target, masks.residue, 0.37);
  });

  // Transformer block, unconditioned and conditioned, input and parameters.
  nn::BlockConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  for (bool conditioned : {false, true}) {
    cfg.conditioned = conditioned;
    nn::ParamStore store;
    Rng init(7);
    nn::Tower tower("blk", cfg);
    tower.init_params(store, init);
    if (conditioned) {
      // Move the zero-init modulation off the identity point.
      Tensor& mod = store.get("blk.block0.mod");
      for (std::int64_t i = 0; i < mod.size(); ++i) mod[i] = 0.05 * init.normal();
    }
    auto m4 = toy_masks(1, 4, 2);
    Tensor cvec = randn({1, 8}, rng);
    auto forward = [&](nn::Tape& tape, const ag::Var& x) {
      std::optional<ag::Var> cond;
      if (conditioned) cond = ag::leaf(cvec);
      return ag::sum_all(ag::silu(tower.forward(tape, x, m4.attend, cond)));
    };
    Tensor x0 = randn({1, 4, 8}, rng);
    {
      nn::Tape tape(store, false);
      ag::Var in = ag::leaf(x0, true);
      ag::backward(forward(tape, in));
      Tensor fd = test::fd_gradient(
          [&](const Tensor& p) {
            nn::Tape t2(store, false);
            return forward(t2, ag::leaf(p)).item();
          },
          x0);
      const double err = test::grad_rel_err(in.grad(), fd);
      out.require(err < 1e-4, std::string(conditioned ? "cond" : "uncond") +
                                  " block input rel err " + std::to_string(err));
    }
    for (const std::string pname :
         conditioned ? std::vector<std::string>{"blk.block0.wq", "blk.block0.mod"}
                     : std::vector<std::string>{"blk.block0.wq", "blk.block0.ffn.w1"}) {
      nn::Tape tape(store, true);
      ag::backward(forward(tape, ag::leaf(x0)));
      Tensor analytic = tape.grad(pname);
      Tensor param = store.get(pname);
      Tensor fd = test::fd_gradient(
          [&](const Tensor& p) {
            store.get(pname) = p;
            nn::Tape t2(store, false);
            const double v = forward(t2, ag::leaf(x0)).item();
            return v;
          },
          param);
      store.get(pname) = param;
      const double err = test::grad_rel_err(analytic, fd);
      out.require(err < 1e-4, pname + " rel err " + std::to_string(err));
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.require(secs < 60.0, "runtime " + std::to_string(secs) + " s");
  return out;
}

Outcome criterion_sampler() {
  Outcome out;
  // F(t) = t + sin(pi t)/pi; the quantile must invert it.
  for (double u : {0.25, 0.5, 0.8183}) {
    const double q = ae::amplitude_quantile(u);
    const double f = q + std::sin(kPi * q) / kPi;
    out.require(std::fabs(f - u) < 1e-6,
                "F(quantile(" + std::to_string(u) + ")) off by " + std::to_string(f - u));
  }
  out.require(std::fabs(ae::amplitude_quantile(0.5 + 1.0 / kPi) - 0.5) < 1e-6,
              "median quantile != 0.5");

  const int n = 1000000;
  Rng rng(401);
  std::vector<double> samples(n);
  double mean = 0.0;
  for (int i = 0; i < n; ++i) {
    samples[static_cast<std::size_t>(i)] = ae::amplitude_quantile(rng.uniform());
    mean += samples[static_cast<std::size_t>(i)];
  }
  mean /= n;
  const double expect = 0.5 - 2.0 / (kPi * kPi);
  out.require(std::fabs(mean - expect) < 0.002,
              "sample mean " + std::to_string(mean) + " vs " + std::to_string(expect));

  std::sort(samples.begin(), samples.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    const double t = samples[static_cast<std::size_t>(i)];
    const double cdf = t + std::sin(kPi * t) / kPi;
    ks = std::max(ks, std::fabs(cdf - static_cast<double>(i + 1) / n));
    ks = std::max(ks, std::fabs(cdf - static_cast<double>(i) / n));
  }
  out.require(ks < 0.002, "KS statistic " + std::to_string(ks));
  return out;
}

Outcome criterion_estimator_equivalence() {
  Outcome out;
  nn::BlockConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  diff::DiffusionModel model(cfg, 77);  // frozen at random init
  auto masks = toy_masks(1, 6, 4);
  Rng zrng(78);
  const Tensor z = randn({1, 6, 8}, zrng);
  const double n_elems = 4.0 * 8.0;

  auto estimate = [&](diff::TSampling mode, std::uint64_t seed, double& mean_out,
                      double& se_out) {
    const int n = 1000000;
    Rng rng(seed);
    double acc = 0.0, acc_sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const auto draw = diff::sample_training_t(mode, rng);
      Tensor eps = randn({1, 6, 8}, rng);
      const auto sample = diff::make_sample(z, draw.t, eps);
      Tensor v_hat = model.predict_v(sample.z_t, draw.t, masks.residue, masks.attend);
      double sq = 0.0;
      for (std::size_t r = 0; r < masks.residue.size(); ++r) {
        if (!masks.residue[r]) continue;
        for (std::int64_t j = 0; j < 8; ++j) {
          const std::int64_t idx = static_cast<std::int64_t>(r) * 8 + j;
          const double dlt = v_hat[idx] - sample.v_t[idx];
          sq += dlt * dlt;
        }
      }
      const double value = draw.loss_scale * 0.5 * sq / n_elems;
      acc += value;
      acc_sq += value * value;
    }
    mean_out = acc / n;
    se_out = std::sqrt((acc_sq / n - mean_out * mean_out) / n);
  };

  double mu_u, se_u, mu_i, se_i;
  estimate(diff::TSampling::Uniform, 501, mu_u, se_u);
  estimate(diff::TSampling::Importance, 502, mu_i, se_i);
  const double gap = std::fabs(mu_u - mu_i);
  const double limit = 3.0 * std::sqrt(se_u * se_u + se_i * se_i);
  out.require(gap < limit, "estimator gap " + std::to_string(gap) + " vs 3 SE " +
                               std::to_string(limit));
  out.note("uniform " + std::to_string(mu_u) + ", importance " + std::to_string(mu_i));
  return out;
}

Outcome criterion_adaln_identity() {
  Outcome out;
  nn::BlockConfig cfg;
  cfg.channels = 16;
  cfg.heads = 2;
  cfg.layers = 3;
  cfg.conditioned = true;
  nn::ParamStore store;
  Rng init(601);
  nn::Tower tower("trunk", cfg);
  tower.init_params(store, init);
  Rng rng(602);
  auto masks = toy_masks(2, 7, 4);
  for (int trial = 0; trial < 8; ++trial) {
    Tensor x = randn({2, 7, 16}, rng);
    Tensor cvec = randn({16}, rng);
    nn::Tape tape(store, false);
    Tensor y = tower.forward(tape, ag::leaf(x), masks.attend, ag::leaf(cvec)).val();
    for (std::int64_t i = 0; i < x.size(); ++i)
      if (y[i] != x[i]) {
        out.require(false, "trunk output differs from input at flat index " +
                               std::to_string(i));
        return out;
      }
  }
  return out;
}

Outcome criterion_tn_overfit() {
  Outcome out;
  const auto start = std::chrono::steady_clock::now();
  auto data = random_sequences(64, 12, 20, 701);
  ae::RegimeConfig rc;  // defaults: LSD-TN, univariate
  rc.norm_weight = 5.0;
  ae::Autoencoder model(toy_block(), rc, 702);
  train::TrainConfig tc;
  tc.steps = 2000;
  tc.batch_size = 32;
  tc.padded_len = 24;
  tc.lr = 1e-3;
  tc.weight_decay = 0.0;
  tc.log_every = 500;
  tc.seed = 703;
  train::AdamW opt(tc.optimizer());
  auto metrics = train::train_autoencoder(model, data, tc, opt);

  auto batch = seqdata::pad_batch(data, tc.padded_len);
  const double ce = dataset_reconstruction_ce(model, batch);
  out.require(ce < 0.1, "reconstruction CE " + std::to_string(ce));

  ae::LatentBatch latents = model.encode(batch);
  const std::int64_t L = batch.padded_len, d = latents.d();
  double worst_mu = 0.0, worst_var = 0.0;
  for (int type = 0; type < seqdata::Vocab::kNumResidues; ++type) {
    std::vector<std::uint8_t> subset(batch.residue_mask.size(), 0);
    std::int64_t occurrences = 0;
    for (std::size_t i = 0; i < subset.size(); ++i)
      if (batch.residue_mask[i] && batch.tokens[i] == type) {
        subset[i] = 1;
        ++occurrences;
      }
    if (occurrences < 10) continue;
    auto m = ae::moments(latents.z, subset);
    for (std::int64_t j = 0; j < d; ++j) {
      worst_mu = std::max(worst_mu, std::fabs(m.mu[static_cast<std::size_t>(j)]));
      worst_var = std::max(worst_var, std::fabs(m.var[static_cast<std::size_t>(j)] - 1.0));
    }
  }
  (void)L;
  out.require(worst_mu < 0.3, "max |mu_i| " + std::to_string(worst_mu));
  out.require(worst_var < 0.3, "max |var_i - 1| " + std::to_string(worst_var));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.require(secs < 600.0, "runtime " + std::to_string(secs) + " s");
  out.note("CE " + std::to_string(ce) + " after " + std::to_string(tc.steps) + " steps, " +
           std::to_string(secs) + " s");
  return out;
}

Outcome criterion_nm_denoising() {
  Outcome out;
  auto data = random_sequences(64, 12, 20, 801);
  ae::RegimeConfig rc;
  rc.regime = ae::Regime::LsdNm;
  ae::Autoencoder model(toy_block(), rc, 802);
  auto batch = seqdata::pad_batch(data, 24);
  const double before = noised_ce(model, batch, 811, 0.8);

  train::TrainConfig tc;
  tc.steps = 5000;
  tc.batch_size = 32;
  tc.padded_len = 24;
  tc.lr = 1e-3;
  tc.weight_decay = 0.0;
  tc.log_every = 1000;
  tc.seed = 803;
  train::AdamW opt(tc.optimizer());
  train::train_autoencoder(model, data, tc, opt);

  const double after = noised_ce(model, batch, 811, 0.8);
  const double drop = (before - after) / before;
  out.require(drop >= 0.30, "weighted CE drop " + std::to_string(drop * 100) + "%");
  out.note("noised CE " + std::to_string(before) + " -> " + std::to_string(after));
  return out;
}

Outcome criterion_diffusion_training() {
  Outcome out;
  auto data = random_sequences(32, 10, 16, 901);
  ae::Autoencoder encoder(toy_block(), ae::RegimeConfig{}, 902);
  diff::DiffusionModel model(toy_block(), 903);

  // Frozen evaluation draws scored before and after training.
  auto eval_loss = [&](const diff::DiffusionModel& m) {
    auto batch = seqdata::pad_batch(data, 20);
    ae::LatentBatch latents = encoder.encode(batch);
    Rng rng(911);
    double acc = 0.0;
    const int n_draws = 64;
    for (int i = 0; i < n_draws; ++i) {
      const auto draw = diff::sample_training_t(diff::TSampling::Importance, rng);
      Tensor eps = randn(latents.z.shape(), rng);
      auto& store = const_cast<nn::ParamStore&>(m.params());
      nn::Tape tape(store, false);
      acc += m.diffusion_loss(tape, latents.z, draw.t, eps, latents.residue_mask,
                              latents.attend_mask, draw.loss_scale)
                 .item();
    }
    return acc / n_draws;
  };
  const double untrained = eval_loss(model);

  train::TrainConfig tc;
  tc.steps = 2000;
  tc.batch_size = 16;
  tc.padded_len = 20;
  tc.lr = 1e-3;
  tc.weight_decay = 0.0;
  tc.log_every = 500;
  tc.seed = 904;
  train::AdamW opt(tc.optimizer());
  train::train_diffusion(model, encoder, data, tc, opt);
  const double trained = eval_loss(model);
  out.require(trained <= 0.8 * untrained,
              "loss " + std::to_string(untrained) + " -> " + std::to_string(trained));
  out.note("loss " + std::to_string(untrained) + " -> " + std::to_string(trained));

  Rng rng(912);
  auto masks = toy_masks(1, 8, 5);
  Tensor z = randn({1, 8, 32}, rng);
  Tensor mean0 = model.mean_representation(z, 0.0, masks.residue, masks.attend);
  Tensor score0 = model.score_representation(z, 0.0, masks.residue, masks.attend);
  for (std::int64_t i = 0; i < z.size(); ++i)
    if (mean0[i] != score0[i]) {
      out.require(false, "score vs mean representation differ at t=0");
      break;
    }
  return out;
}

Outcome criterion_mlm_masking() {
  Outcome out;
  auto data = random_sequences(40, 250, 254, 1001);
  auto batch = seqdata::pad_batch(data, 256);
  Rng rng(1002);
  std::int64_t seen = 0, masked = 0;
  while (seen < 1000000) {
    auto [corrupted, indicator] = ae::mlm_mask(batch, 0.15, rng);
    for (std::size_t i = 0; i < indicator.size(); ++i) {
      if (!batch.residue_mask[i]) continue;
      ++seen;
      if (indicator[i]) {
        ++masked;
        if (corrupted.tokens[i] != seqdata::Vocab::kMask)
          out.require(false, "masked position without MASK token");
      }
    }
  }
  const double fraction = static_cast<double>(masked) / static_cast<double>(seen);
  out.require(std::fabs(fraction - 0.15) < 0.002,
              "mask fraction " + std::to_string(fraction));

  // Loss must ignore unmasked positions: make unmasked logits adversarially
  // wrong and masked logits perfect, in both orders.
  auto small = seqdata::pad_batch(random_sequences(4, 8, 12, 1003), 16);
  Rng mrng(1004);
  auto [corrupted, indicator] = ae::mlm_mask(small, 0.4, mrng);
  std::vector<double> mask_weights(indicator.begin(), indicator.end());
  Tensor good({small.rows, small.padded_len, 20});
  Tensor sabotaged = good;
  for (std::int64_t r = 0; r < small.rows * small.padded_len; ++r) {
    if (!small.residue_mask[r]) continue;
    const int truth = small.tokens[static_cast<std::size_t>(r)];
    good[r * 20 + truth] = 30.0;
    sabotaged[r * 20 + (indicator[static_cast<std::size_t>(r)] ? truth : (truth + 7) % 20)] = 30.0;
  }
  const double loss_good =
      ag::cross_entropy(ag::leaf(good), small.tokens, mask_weights).item();
  const double loss_sab =
      ag::cross_entropy(ag::leaf(sabotaged), small.tokens, mask_weights).item();
  out.require(loss_good == loss_sab, "masked loss reacted to unmasked logits");
  out.require(loss_good < 1e-9, "perfect masked logits should reach ~0 loss");
  return out;
}

Outcome criterion_probe_oracles() {
  Outcome out;
  // Separable classification.
  Rng rng(1101);
  auto clusters = [&](std::int64_t per_class, std::uint64_t seed) {
    Rng r(seed);
    probe::FeatureMatrix fm;
    fm.x = Tensor({per_class * 3, 4});
    for (int c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < per_class; ++i) {
        const std::int64_t row = c * per_class + i;
        for (std::int64_t j = 0; j < 4; ++j)
          fm.x[row * 4 + j] = r.normal() + (j == c ? 6.0 : 0.0);
        fm.labels.push_back(c);
      }
    return fm;
  };
  probe::ProbeConfig pc;
  pc.lr = 5e-3;
  pc.max_epochs = 150;
  pc.seed = 1102;
  auto cls = probe::train_probe(clusters(60, 1103), probe::TaskKind::Classification, 3, pc);
  const double acc = probe::accuracy(cls, clusters(40, 1104));
  out.require(acc >= 0.95, "classification accuracy " + std::to_string(acc));

  // Monotone regression.
  auto monotone = [&](std::uint64_t seed) {
    Rng r(seed);
    probe::FeatureMatrix fm;
    fm.x = Tensor({240, 3});
    for (std::int64_t i = 0; i < 240; ++i) {
      double s = 0.0;
      for (std::int64_t j = 0; j < 3; ++j) {
        fm.x[i * 3 + j] = r.normal();
        s += fm.x[i * 3 + j];
      }
      fm.labels.push_back(std::tanh(s) + 0.3 * s);
    }
    return fm;
  };
  probe::ProbeConfig rc;
  rc.lr = 3e-3;
  rc.max_epochs = 300;
  rc.seed = 1105;
  auto reg = probe::train_probe(monotone(1106), probe::TaskKind::Regression, 0, rc);
  const double rho = probe::regression_spearman(reg, monotone(1107));
  out.require(rho >= 0.99, "regression spearman " + std::to_string(rho));

  out.require(probe::spearman_rho({1, 2, 3, 4, 5}, {1, 2, 3, 5, 4}) == 0.9,
              "5-element fixture != 0.9 exactly");

  // Pair features are twice the encoder width.
  nn::BlockConfig cfg;
  cfg.channels = 16;
  cfg.heads = 2;
  cfg.layers = 1;
  ae::Autoencoder encoder(cfg, ae::RegimeConfig{}, 1108);
  probe::FeatureConfig fc;
  fc.padded_len = 16;
  std::vector<probe::ProbeExample> pairs = {{"MKVA", "ACDE", 1.0, true}};
  auto fm = probe::build_features(pairs, encoder, nullptr, fc);
  out.require(fm.x.dim(1) == 32, "pair feature width " + std::to_string(fm.x.dim(1)));
  (void)rng;
  return out;
}

Outcome criterion_attention_fractions(const ae::Autoencoder* trained) {
  Outcome out;
  // Analytic uniform case: 100 residues, BOS and EOS, equal weight everywhere.
  const std::int64_t L = 102;
  std::vector<std::uint8_t> residue(L, 0), attend(L, 1);
  for (std::int64_t p = 1; p <= 100; ++p) residue[p] = 1;
  Tensor w({1, 1, L, L});
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = 1.0 / static_cast<double>(L);
  auto f = analysis::fractions_from_weights(w, residue, attend);
  out.require(std::fabs(f.context - 99.0 / 102.0) < 1e-9, "uniform context fraction");
  out.require(std::fabs(f.local - 1.0 / 102.0) < 1e-9, "uniform local fraction");
  out.require(std::fabs(f.edge - 2.0 / 102.0) < 1e-9, "uniform edge fraction");

  // Trained toy model: partition must be exhaustive.
  auto data = random_sequences(8, 12, 20, 1201);
  std::vector<seqdata::TokenBatch> batches = {seqdata::pad_batch(data, 24)};
  auto layers = analysis::encoder_attention_fractions(*trained, batches);
  std::string trend = "context by layer:";
  for (const auto& lf : layers) {
    out.require(std::fabs(lf.context + lf.local + lf.edge - 1.0) < 1e-6,
                "layer fractions do not sum to 1");
    trend += " " + std::to_string(lf.context);
  }
  out.note(trend + " (directional trend reported, not asserted)");
  return out;
}

Outcome criterion_determinism() {
  Outcome out;
  auto data = random_sequences(12, 8, 14, 1301);
  train::TrainConfig tc;
  tc.steps = 25;
  tc.batch_size = 4;
  tc.padded_len = 16;
  tc.lr = 1e-3;
  tc.log_every = 1;
  tc.seed = 1302;
  nn::BlockConfig cfg;
  cfg.channels = 16;
  cfg.heads = 2;
  cfg.layers = 1;

  auto run = [&](const std::string& path) {
    ae::Autoencoder model(cfg, ae::RegimeConfig{}, 1303);
    train::AdamW opt(tc.optimizer());
    auto metrics = train::train_autoencoder(model, data, tc, opt);
    train::write_metrics(path + ".tsv", metrics);
    train::CheckpointMeta meta;
    meta.config_text = "acceptance determinism run\n";
    meta.seed = tc.seed;
    meta.step = tc.steps;
    meta.last_loss = metrics.back().total;
    train::save_checkpoint(path + ".bin", model.params(), &opt, meta);
  };
  const std::string base = (fs::temp_directory_path() / "lsd_acceptance_run").string();
  run(base + "_a");
  run(base + "_b");
  auto slurp = [](const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };
  out.require(slurp(base + "_a.tsv") == slurp(base + "_b.tsv"),
              "metrics differ between identical runs");
  out.require(slurp(base + "_a.bin") == slurp(base + "_b.bin"),
              "checkpoints differ between identical runs");

  // save -> load -> save round trip.
  ae::Autoencoder reload(cfg, ae::RegimeConfig{}, 1);
  train::AdamW opt2{train::AdamWConfig{}};
  train::CheckpointMeta meta = train::load_checkpoint(base + "_a.bin", reload.params(), &opt2);
  train::save_checkpoint(base + "_c.bin", reload.params(), &opt2, meta);
  out.require(slurp(base + "_a.bin") == slurp(base + "_c.bin"),
              "save/load/save is not byte-identical");
  for (const char* suffix : {"_a.tsv", "_b.tsv", "_a.bin", "_b.bin", "_c.bin"})
    fs::remove(base + suffix);
  return out;
}

}  // namespace

int main() {
  int failures = 0;
  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria;

  criteria.emplace_back("schedule and rotation identities", criterion_schedule);
  criteria.emplace_back("analytic loss fixtures", criterion_loss_fixtures);
  criteria.emplace_back("finite-difference gradient checks", criterion_gradients);
  criteria.emplace_back("amplitude sampler distribution", criterion_sampler);
  criteria.emplace_back("importance vs uniform estimator", criterion_estimator_equivalence);
  criteria.emplace_back("conditioned trunk identity at init", criterion_adaln_identity);
  criteria.emplace_back("token-norm toy overfit", criterion_tn_overfit);
  criteria.emplace_back("noise-masking denoising gain", criterion_nm_denoising);
  criteria.emplace_back("diffusion toy training", criterion_diffusion_training);
  criteria.emplace_back("masking statistics and loss isolation", criterion_mlm_masking);
  criteria.emplace_back("probe oracles", criterion_probe_oracles);
  criteria.emplace_back("attention fraction partition", [] {
    auto data = random_sequences(64, 12, 20, 701);
    ae::Autoencoder model(toy_block(), ae::RegimeConfig{}, 702);
    train::TrainConfig tc;
    tc.steps = 200;
    tc.batch_size = 32;
    tc.padded_len = 24;
    tc.lr = 1e-3;
    tc.log_every = 100;
    tc.seed = 1401;
    train::AdamW opt(tc.optimizer());
    train::train_autoencoder(model, data, tc, opt);
    return criterion_attention_fractions(&model);
  });
  criteria.emplace_back("determinism and persistence", criterion_determinism);

  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out.pass = false;
      out.note(std::string("exception: ") + e.what());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %2zu: %s (%.1f s)%s%s\n", out.pass ? "PASS" : "FAIL", i + 1,
                criteria[i].first.c_str(), secs, out.detail.empty() ? "" : " -- ",
                out.detail.c_str());
    std::fflush(stdout);
    if (!out.pass) ++failures;
  }
  if (failures == 0)
    std::printf("all %zu criteria passed\n", criteria.size());
  else
    std::printf("%d criteria FAILED\n", failures);
  return failures;
}
