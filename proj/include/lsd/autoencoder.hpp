#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lsd/autograd.hpp"
#include "lsd/nnkernel.hpp"
#include "lsd/rng.hpp"
#include "lsd/seqdata.hpp"

namespace lsd::ae {

enum class Regime { LsdTn, LsdNm, Mlm };
enum class NormForm { Univariate, Multivariate };
enum class NmSampling { Uniform, Amplitude };

std::string regime_name(Regime r);
Regime regime_from_name(const std::string& name);

struct RegimeConfig {
  Regime regime = Regime::LsdTn;
  NormForm norm_form = NormForm::Univariate;
  double norm_weight = 1.0;  // lambda balancing reconstruction vs normalization
  NmSampling nm_sampling = NmSampling::Amplitude;
  double mlm_rate = 0.15;

  void validate() const {
    if (norm_weight < 0.0) throw ConfigError("RegimeConfig: norm_weight must be >= 0");
    if (mlm_rate <= 0.0 || mlm_rate >= 1.0)
      throw ConfigError("RegimeConfig: mlm_rate must be in (0,1)");
  }
};

struct LatentBatch {
  Tensor z;  // (B, L, d)
  std::vector<std::uint8_t> residue_mask;
  std::vector<std::uint8_t> attend_mask;
  std::vector<int> tokens;
  std::int64_t d() const { return z.dim(2); }
  std::int64_t rows() const { return z.dim(0); }
  std::int64_t padded_len() const { return z.dim(1); }
};

struct MomentSummary {
  std::vector<double> mu;
  std::vector<double> var;  // biased (1/N) estimator
  std::int64_t count = 0;
};

// Per-coordinate moments over the selected flat (row*len + pos) positions.
MomentSummary moments(const Tensor& z, const std::vector<std::uint8_t>& subset_mask);

// (1/2d) sum_i (mu_i^2 + var_i - log var_i - 1), variance floored at 1e-8.
double kl_norm_univariate(const MomentSummary& m, double var_floor = 1e-8);

// Inverse CDF of p(t) = 2 cos^2(pi t / 2); F(t) = t + sin(pi t)/pi, solved by
// bisection to 1e-10.
double amplitude_quantile(double u);
std::vector<double> sample_position_times(std::size_t n, NmSampling mode, Rng& rng);

// MLM corruption: each residue position independently replaced by MASK with
// probability rate. Non-residue positions are never touched.
std::pair<seqdata::TokenBatch, std::vector<std::uint8_t>> mlm_mask(
    const seqdata::TokenBatch& batch, double rate, Rng& rng);

struct LossBreakdown {
  ag::Var total;
  ag::Var reconstruction;
  ag::Var normalization;  // undefined Var for MLM (reported as 0)
  double reconstruction_value = 0.0;
  double normalization_value = 0.0;
  double total_value = 0.0;
};

// Encoder/decoder pair plus the regime losses. The MLM regime trivializes the
// decoder to a projection head.
class Autoencoder {
 public:
  Autoencoder(nn::BlockConfig cfg, RegimeConfig regime, std::uint64_t init_seed);

  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  const nn::BlockConfig& block_config() const { return cfg_; }
  const RegimeConfig& regime() const { return regime_; }

  // Deterministic map to the latent space; final layer norm applied.
  // attn_capture, when non-null, receives one (B,H,L,L) record per layer.
  ag::Var encode_var(nn::Tape& tape, const seqdata::TokenBatch& batch,
                     std::vector<Tensor>* attn_capture = nullptr) const;
  LatentBatch encode(const seqdata::TokenBatch& batch) const;

  // Token logits (B, L, 20). Edge/pad positions are produced but carry no loss.
  ag::Var decode_var(nn::Tape& tape, const ag::Var& latents,
                     const std::vector<std::uint8_t>& residue_mask,
                     const std::vector<std::uint8_t>& attend_mask) const;
  Tensor decode(const LatentBatch& latents) const;

  // Weighted mean cross-entropy over residue positions; weights default to 1.
  static ag::Var reconstruction_loss(const ag::Var& logits, const std::vector<int>& tokens,
                                     const std::vector<std::uint8_t>& residue_mask,
                                     const std::vector<double>* weights = nullptr);

  // Mean univariate KL over amino-acid types with >= 2 occurrences in the batch.
  static ag::Var token_norm_loss(const ag::Var& latents, const std::vector<int>& tokens,
                                 const std::vector<std::uint8_t>& residue_mask);

  // Pooled normalization loss over all residue positions.
  static ag::Var norm_loss(const ag::Var& latents, const std::vector<std::uint8_t>& residue_mask,
                           NormForm form);

  // z -> cos(pi t/2) z + sin(pi t/2) eps per residue position; weights are
  // sin^2(pi t/2) on residues and 0 elsewhere. Training-time only.
  static std::pair<ag::Var, std::vector<double>> noise_mask(const ag::Var& latents,
                                                            const std::vector<double>& t_a,
                                                            const Tensor& eps,
                                                            const std::vector<std::uint8_t>& residue_mask);

  // One training loss evaluation for the active regime.
  LossBreakdown regime_loss(nn::Tape& tape, const seqdata::TokenBatch& batch, Rng& rng) const;

 private:
  nn::BlockConfig cfg_;
  RegimeConfig regime_;
  nn::ParamStore store_;
  nn::Tower encoder_;
  std::optional<nn::Tower> decoder_;
};

}  // namespace lsd::ae
