#pragma once

#include <cstdint>
#include <vector>

#include "lsd/autograd.hpp"
#include "lsd/nnkernel.hpp"
#include "lsd/rng.hpp"

namespace lsd::diff {

// Variance-preserving cosine schedule: alpha = cos(pi t/2), sigma = sin(pi t/2).
struct NoiseState {
  double t;
  double alpha;
  double sigma;
};

NoiseState schedule(double t);

struct DiffusionSample {
  Tensor z;
  Tensor eps;
  NoiseState state;
  Tensor z_t;  // alpha z + sigma eps
  Tensor v_t;  // -sigma z + alpha eps
};

DiffusionSample make_sample(const Tensor& z, double t, const Tensor& eps);

enum class TSampling { Uniform, Importance };

// Training-time draw of t with its loss scale. Both modes estimate the same
// expectation E_{t~U} cos^2(pi t/2) * (residual): uniform mode scales by
// cos^2(pi t/2); importance mode draws t ~ 2 cos^2(pi t/2) and scales by 1/2.
struct TDraw {
  double t;
  double loss_scale;
};
TDraw sample_training_t(TSampling mode, Rng& rng);

// eps_hat = sigma z_t + alpha v_hat (exact when v_hat = v_t).
Tensor epsilon_from_v(const Tensor& z_t, const Tensor& v_hat, double t);

// scale/2 * mean over residue elements of |v_hat - v_t|^2.
ag::Var weighted_v_mse(const ag::Var& v_hat, const Tensor& v_target,
                       const std::vector<std::uint8_t>& residue_mask, double scale);

// Time-conditioned transformer (adaLN-zero) on the latent space with its own
// BOS/EOS embeddings and a layernorm + linear output head.
class DiffusionModel {
 public:
  DiffusionModel(nn::BlockConfig cfg, std::uint64_t init_seed);

  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  const nn::BlockConfig& block_config() const { return cfg_; }
  const nn::Tower& tower() const { return tower_; }

  ag::Var predict_v_var(nn::Tape& tape, const ag::Var& z_t, double t,
                        const std::vector<std::uint8_t>& residue_mask,
                        const std::vector<std::uint8_t>& attend_mask,
                        std::vector<Tensor>* attn_capture = nullptr) const;
  Tensor predict_v(const Tensor& z_t, double t, const std::vector<std::uint8_t>& residue_mask,
                   const std::vector<std::uint8_t>& attend_mask,
                   std::vector<Tensor>* attn_capture = nullptr) const;

  // L_D for one (z, t, eps) triple; loss_scale < 0 selects cos^2(pi t/2).
  ag::Var diffusion_loss(nn::Tape& tape, const Tensor& z, double t, const Tensor& eps,
                         const std::vector<std::uint8_t>& residue_mask,
                         const std::vector<std::uint8_t>& attend_mask,
                         double loss_scale = -1.0) const;

  // v̄_t(z) = Diffusion(cos(pi t/2) z, t); consumes no randomness.
  Tensor mean_representation(const Tensor& z, double t,
                             const std::vector<std::uint8_t>& residue_mask,
                             const std::vector<std::uint8_t>& attend_mask) const;

  // v̄_t(z) + sin(pi t/2) z; at t=0 identical to mean_representation.
  Tensor score_representation(const Tensor& z, double t,
                              const std::vector<std::uint8_t>& residue_mask,
                              const std::vector<std::uint8_t>& attend_mask) const;

  // -eps_hat / sin(pi t/2); singular at t=0 (use score_representation there).
  Tensor tweedie_score(const Tensor& z_t, double t,
                       const std::vector<std::uint8_t>& residue_mask,
                       const std::vector<std::uint8_t>& attend_mask) const;

 private:
  ag::Var embed_input(nn::Tape& tape, const ag::Var& z,
                      const std::vector<std::uint8_t>& residue_mask,
                      const std::vector<std::uint8_t>& attend_mask) const;

  nn::BlockConfig cfg_;
  nn::ParamStore store_;
  nn::Tower tower_;
};

}  // namespace lsd::diff
