#include "lsd/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "lsd/autoencoder.hpp"
#include "lsd/errors.hpp"

namespace lsd::diff {

namespace {
constexpr double kPi = std::numbers::pi;
constexpr double kTrainTClamp = 1e-5;
}  // namespace

NoiseState schedule(double t) {
  if (t < 0.0 || t > 1.0)
    throw ConfigError("schedule: t=" + std::to_string(t) + " outside [0,1]");
  return NoiseState{t, std::cos(kPi * t / 2.0), std::sin(kPi * t / 2.0)};
}

DiffusionSample make_sample(const Tensor& z, double t, const Tensor& eps) {
  if (!z.same_shape(eps)) throw ShapeError("make_sample: eps shape mismatch");
  DiffusionSample s;
  s.z = z;
  s.eps = eps;
  s.state = schedule(t);
  s.z_t = Tensor(z.shape());
  s.v_t = Tensor(z.shape());
  for (std::int64_t i = 0; i < z.size(); ++i) {
    s.z_t[i] = s.state.alpha * z[i] + s.state.sigma * eps[i];
    s.v_t[i] = -s.state.sigma * z[i] + s.state.alpha * eps[i];
  }
  return s;
}

TDraw sample_training_t(TSampling mode, Rng& rng) {
  const double u = rng.uniform();
  double t, scale;
  if (mode == TSampling::Uniform) {
    t = u;
    const double c = std::cos(kPi * t / 2.0);
    scale = c * c;
  } else {
    t = ae::amplitude_quantile(u);
    scale = 0.5;
  }
  t = std::min(std::max(t, kTrainTClamp), 1.0 - kTrainTClamp);
  if (mode == TSampling::Uniform) {
    const double c = std::cos(kPi * t / 2.0);
    scale = c * c;
  }
  return {t, scale};
}

Tensor epsilon_from_v(const Tensor& z_t, const Tensor& v_hat, double t) {
  if (!z_t.same_shape(v_hat)) throw ShapeError("epsilon_from_v: shape mismatch");
  const NoiseState s = schedule(t);
  Tensor eps(z_t.shape());
  for (std::int64_t i = 0; i < eps.size(); ++i)
    eps[i] = s.sigma * z_t[i] + s.alpha * v_hat[i];
  return eps;
}

ag::Var weighted_v_mse(const ag::Var& v_hat, const Tensor& v_target,
                       const std::vector<std::uint8_t>& residue_mask, double scale) {
  if (!v_hat.val().same_shape(v_target)) throw ShapeError("weighted_v_mse: shape mismatch");
  const std::int64_t d = v_target.dim(-1);
  const std::int64_t rows = v_target.size() / d;
  std::vector<double> keep(static_cast<std::size_t>(rows), 0.0);
  std::int64_t n = 0;
  for (std::int64_t r = 0; r < rows; ++r)
    if (residue_mask[static_cast<std::size_t>(r)]) {
      keep[static_cast<std::size_t>(r)] = 1.0;
      ++n;
    }
  if (n == 0) throw NumericError("weighted_v_mse: empty residue mask");
  ag::Var diff = ag::mask_rows(ag::sub(v_hat, ag::constant(v_target)), keep);
  return ag::scale(ag::sum_all(ag::square(diff)),
                   scale / (2.0 * static_cast<double>(n * d)));
}

DiffusionModel::DiffusionModel(nn::BlockConfig cfg, std::uint64_t init_seed)
    : cfg_(cfg), tower_("diff", [&] {
        cfg.conditioned = true;
        return cfg;
      }()) {
  cfg_.conditioned = true;
  Rng rng(Rng::mix(init_seed, 0xd1ff));
  const std::int64_t d = cfg_.channels;
  Tensor bos = nn::init_embedding(1, d, rng);
  Tensor eos = nn::init_embedding(1, d, rng);
  store_.add("diff.bos", Tensor({d}, bos.vec()));
  store_.add("diff.eos", Tensor({d}, eos.vec()));
  tower_.init_params(store_, rng);
  nn::init_affine_layernorm(store_, "diff.final", d);
  store_.add("diff.head", nn::init_linear(d, d, rng));
}

ag::Var DiffusionModel::embed_input(nn::Tape& tape, const ag::Var& z,
                                    const std::vector<std::uint8_t>& residue_mask,
                                    const std::vector<std::uint8_t>& attend_mask) const {
  const Tensor& v = z.val();
  if (v.ndim() != 3 || v.dim(2) != cfg_.channels)
    throw ShapeError("DiffusionModel: latent shape " + v.shape_str() + " mismatch");
  const std::int64_t B = v.dim(0), L = v.dim(1);
  std::vector<double> keep(static_cast<std::size_t>(B * L), 0.0);
  std::vector<std::int64_t> bos_rows, eos_rows;
  for (std::int64_t r = 0; r < B * L; ++r) {
    if (residue_mask[static_cast<std::size_t>(r)])
      keep[static_cast<std::size_t>(r)] = 1.0;
    else if (attend_mask[static_cast<std::size_t>(r)])
      (r % L == 0 ? bos_rows : eos_rows).push_back(r);
  }
  ag::Var x = ag::mask_rows(z, keep);
  x = ag::add_at_rows(x, bos_rows, tape["diff.bos"]);
  return ag::add_at_rows(x, eos_rows, tape["diff.eos"]);
}

ag::Var DiffusionModel::predict_v_var(nn::Tape& tape, const ag::Var& z_t, double t,
                                      const std::vector<std::uint8_t>& residue_mask,
                                      const std::vector<std::uint8_t>& attend_mask,
                                      std::vector<Tensor>* attn_capture) const {
  ag::Var x = embed_input(tape, z_t, residue_mask, attend_mask);
  ag::Var cond = nn::time_embedding(tape, tower_.time_prefix(), t, cfg_.channels);
  x = tower_.forward(tape, x, attend_mask, cond, attn_capture);
  x = nn::affine_layernorm(tape, "diff.final", x);
  return ag::matmul(x, tape["diff.head"]);
}

Tensor DiffusionModel::predict_v(const Tensor& z_t, double t,
                                 const std::vector<std::uint8_t>& residue_mask,
                                 const std::vector<std::uint8_t>& attend_mask,
                                 std::vector<Tensor>* attn_capture) const {
  nn::Tape tape(const_cast<nn::ParamStore&>(store_), false);
  return predict_v_var(tape, ag::leaf(z_t), t, residue_mask, attend_mask, attn_capture).val();
}

ag::Var DiffusionModel::diffusion_loss(nn::Tape& tape, const Tensor& z, double t,
                                       const Tensor& eps,
                                       const std::vector<std::uint8_t>& residue_mask,
                                       const std::vector<std::uint8_t>& attend_mask,
                                       double loss_scale) const {
  DiffusionSample s = make_sample(z, t, eps);
  if (loss_scale < 0.0) loss_scale = s.state.alpha * s.state.alpha;
  ag::Var v_hat = predict_v_var(tape, ag::leaf(s.z_t), t, residue_mask, attend_mask);
  return weighted_v_mse(v_hat, s.v_t, residue_mask, loss_scale);
}

Tensor DiffusionModel::mean_representation(const Tensor& z, double t,
                                           const std::vector<std::uint8_t>& residue_mask,
                                           const std::vector<std::uint8_t>& attend_mask) const {
  const NoiseState s = schedule(t);
  Tensor scaled = z;
  for (std::int64_t i = 0; i < scaled.size(); ++i) scaled[i] *= s.alpha;
  return predict_v(scaled, t, residue_mask, attend_mask);
}

Tensor DiffusionModel::score_representation(const Tensor& z, double t,
                                            const std::vector<std::uint8_t>& residue_mask,
                                            const std::vector<std::uint8_t>& attend_mask) const {
  const NoiseState s = schedule(t);
  Tensor rep = mean_representation(z, t, residue_mask, attend_mask);
  if (s.sigma != 0.0)
    for (std::int64_t i = 0; i < rep.size(); ++i) rep[i] += s.sigma * z[i];
  return rep;
}

Tensor DiffusionModel::tweedie_score(const Tensor& z_t, double t,
                                     const std::vector<std::uint8_t>& residue_mask,
                                     const std::vector<std::uint8_t>& attend_mask) const {
  const NoiseState s = schedule(t);
  if (s.sigma == 0.0)
    throw NumericError(
        "tweedie_score: singular at t=0; use score_representation for small t");
  Tensor eps_hat =
      epsilon_from_v(z_t, predict_v(z_t, t, residue_mask, attend_mask), t);
  for (std::int64_t i = 0; i < eps_hat.size(); ++i) eps_hat[i] = -eps_hat[i] / s.sigma;
  return eps_hat;
}

}  // namespace lsd::diff
