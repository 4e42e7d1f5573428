#include "lsd/autoencoder.hpp"

#include <cmath>
#include <numbers>

namespace lsd::ae {

namespace {
constexpr double kPi = std::numbers::pi;
}

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::LsdTn: return "lsd-tn";
    case Regime::LsdNm: return "lsd-nm";
    case Regime::Mlm: return "mlm";
  }
  throw ConfigError("regime_name: bad regime");
}

Regime regime_from_name(const std::string& name) {
  if (name == "lsd-tn") return Regime::LsdTn;
  if (name == "lsd-nm") return Regime::LsdNm;
  if (name == "mlm") return Regime::Mlm;
  throw ConfigError("unknown regime: " + name);
}

MomentSummary moments(const Tensor& z, const std::vector<std::uint8_t>& subset_mask) {
  if (z.ndim() != 3) throw ShapeError("moments: expected (B,L,d)");
  const std::int64_t d = z.dim(2);
  const std::int64_t rows = z.size() / d;
  if (static_cast<std::int64_t>(subset_mask.size()) != rows)
    throw ShapeError("moments: subset mask length mismatch");
  MomentSummary m;
  m.mu.assign(static_cast<std::size_t>(d), 0.0);
  m.var.assign(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t r = 0; r < rows; ++r)
    if (subset_mask[static_cast<std::size_t>(r)]) {
      ++m.count;
      for (std::int64_t i = 0; i < d; ++i) m.mu[static_cast<std::size_t>(i)] += z[r * d + i];
    }
  if (m.count < 2) throw NumericError("moments: insufficient sample (need >= 2 positions)");
  for (auto& v : m.mu) v /= static_cast<double>(m.count);
  for (std::int64_t r = 0; r < rows; ++r)
    if (subset_mask[static_cast<std::size_t>(r)])
      for (std::int64_t i = 0; i < d; ++i) {
        const double c = z[r * d + i] - m.mu[static_cast<std::size_t>(i)];
        m.var[static_cast<std::size_t>(i)] += c * c;
      }
  for (auto& v : m.var) v /= static_cast<double>(m.count);
  return m;
}

double kl_norm_univariate(const MomentSummary& m, double var_floor) {
  const std::size_t d = m.mu.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    if (!std::isfinite(m.mu[i]) || !std::isfinite(m.var[i]))
      throw NumericError("kl_norm_univariate: non-finite moments");
    loss += m.mu[i] * m.mu[i] + m.var[i] - std::log(std::max(m.var[i], var_floor)) - 1.0;
  }
  return loss / (2.0 * static_cast<double>(d));
}

double amplitude_quantile(double u) {
  if (u <= 0.0) return 0.0;
  if (u >= 1.0) return 1.0;
  double lo = 0.0, hi = 1.0;
  // F is strictly increasing on [0,1]; bisect until the bracket closes.
  while (hi - lo > 1e-10) {
    const double mid = 0.5 * (lo + hi);
    const double f = mid + std::sin(kPi * mid) / kPi;
    (f < u ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<double> sample_position_times(std::size_t n, NmSampling mode, Rng& rng) {
  std::vector<double> out(n);
  for (auto& t : out) {
    const double u = rng.uniform();
    t = (mode == NmSampling::Uniform) ? u : amplitude_quantile(u);
    t = std::min(std::max(t, 1e-12), 1.0 - 1e-12);
  }
  return out;
}

std::pair<seqdata::TokenBatch, std::vector<std::uint8_t>> mlm_mask(
    const seqdata::TokenBatch& batch, double rate, Rng& rng) {
  if (rate <= 0.0 || rate >= 1.0) throw ConfigError("mlm_mask: rate must be in (0,1)");
  seqdata::TokenBatch masked = batch;
  std::vector<std::uint8_t> indicator(batch.tokens.size(), 0);
  for (std::size_t i = 0; i < batch.tokens.size(); ++i)
    if (batch.residue_mask[i] && rng.uniform() < rate) {
      masked.tokens[i] = seqdata::Vocab::kMask;
      indicator[i] = 1;
    }
  return {std::move(masked), std::move(indicator)};
}

Autoencoder::Autoencoder(nn::BlockConfig cfg, RegimeConfig regime, std::uint64_t init_seed)
    : cfg_(cfg), regime_(regime), encoder_("enc", cfg) {
  if (cfg.conditioned) throw ConfigError("Autoencoder: towers are unconditioned");
  regime_.validate();
  Rng rng(Rng::mix(init_seed, 0x5ae));
  const std::int64_t d = cfg_.channels;
  store_.add("embed", nn::init_embedding(seqdata::Vocab::kSize, d, rng));
  encoder_.init_params(store_, rng);
  nn::init_affine_layernorm(store_, "enc.final", d);
  if (regime_.regime != Regime::Mlm) {
    decoder_.emplace("dec", cfg_);
    Tensor bos = nn::init_embedding(1, d, rng);
    Tensor eos = nn::init_embedding(1, d, rng);
    store_.add("dec.bos", Tensor({d}, bos.vec()));
    store_.add("dec.eos", Tensor({d}, eos.vec()));
    decoder_->init_params(store_, rng);
    nn::init_affine_layernorm(store_, "dec.final", d);
  }
  store_.add("head", nn::init_linear(d, seqdata::Vocab::kNumResidues, rng));
}

ag::Var Autoencoder::encode_var(nn::Tape& tape, const seqdata::TokenBatch& batch,
                                std::vector<Tensor>* attn_capture) const {
  ag::Var x = ag::embedding(tape["embed"], batch.tokens, batch.rows, batch.padded_len);
  x = encoder_.forward(tape, x, batch.attend_mask, std::nullopt, attn_capture);
  return nn::affine_layernorm(tape, "enc.final", x);
}

LatentBatch Autoencoder::encode(const seqdata::TokenBatch& batch) const {
  nn::Tape tape(const_cast<nn::ParamStore&>(store_), false);
  ag::Var z = encode_var(tape, batch);
  return LatentBatch{z.val(), batch.residue_mask, batch.attend_mask, batch.tokens};
}

ag::Var Autoencoder::decode_var(nn::Tape& tape, const ag::Var& latents,
                                const std::vector<std::uint8_t>& residue_mask,
                                const std::vector<std::uint8_t>& attend_mask) const {
  const Tensor& z = latents.val();
  if (z.ndim() != 3 || z.dim(2) != cfg_.channels)
    throw ShapeError("decode: latent shape " + z.shape_str() + " does not match config");
  if (regime_.regime == Regime::Mlm) return ag::matmul(latents, tape["head"]);

  const std::int64_t B = z.dim(0), L = z.dim(1);
  // The decoder sees its own learned BOS/EOS at the edge slots; incoming
  // latents there are not part of the representation.
  std::vector<double> keep(static_cast<std::size_t>(B * L), 0.0);
  std::vector<std::int64_t> bos_rows, eos_rows;
  for (std::int64_t r = 0; r < B * L; ++r) {
    if (residue_mask[static_cast<std::size_t>(r)]) {
      keep[static_cast<std::size_t>(r)] = 1.0;
    } else if (attend_mask[static_cast<std::size_t>(r)]) {
      (r % L == 0 ? bos_rows : eos_rows).push_back(r);
    }
  }
  ag::Var x = ag::mask_rows(latents, keep);
  x = ag::add_at_rows(x, bos_rows, tape["dec.bos"]);
  x = ag::add_at_rows(x, eos_rows, tape["dec.eos"]);
  x = decoder_->forward(tape, x, attend_mask);
  x = nn::affine_layernorm(tape, "dec.final", x);
  return ag::matmul(x, tape["head"]);
}

Tensor Autoencoder::decode(const LatentBatch& latents) const {
  nn::Tape tape(const_cast<nn::ParamStore&>(store_), false);
  return decode_var(tape, ag::leaf(latents.z), latents.residue_mask, latents.attend_mask).val();
}

ag::Var Autoencoder::reconstruction_loss(const ag::Var& logits, const std::vector<int>& tokens,
                                         const std::vector<std::uint8_t>& residue_mask,
                                         const std::vector<double>* weights) {
  std::vector<double> w(tokens.size(), 0.0);
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (residue_mask[i]) w[i] = weights ? (*weights)[i] : 1.0;
  return ag::cross_entropy(logits, tokens, w);
}

ag::Var Autoencoder::token_norm_loss(const ag::Var& latents, const std::vector<int>& tokens,
                                     const std::vector<std::uint8_t>& residue_mask) {
  std::vector<std::vector<std::int64_t>> groups(seqdata::Vocab::kNumResidues);
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (residue_mask[i]) groups[static_cast<std::size_t>(tokens[i])].push_back(
        static_cast<std::int64_t>(i));
  ag::Var sum;
  int used = 0;
  for (const auto& g : groups) {
    if (g.size() < 2) continue;  // variance undefined for singleton/absent types
    ag::Var term = ag::kl_norm_univariate_rows(ag::gather_rows(latents, g));
    sum = sum.defined() ? ag::add(sum, term) : term;
    ++used;
  }
  if (used == 0) throw NumericError("token_norm_loss: no amino-acid type has >= 2 occurrences");
  return ag::scale(sum, 1.0 / static_cast<double>(used));
}

ag::Var Autoencoder::norm_loss(const ag::Var& latents,
                               const std::vector<std::uint8_t>& residue_mask, NormForm form) {
  std::vector<std::int64_t> rows;
  for (std::size_t i = 0; i < residue_mask.size(); ++i)
    if (residue_mask[i]) rows.push_back(static_cast<std::int64_t>(i));
  ag::Var gathered = ag::gather_rows(latents, rows);
  return form == NormForm::Univariate ? ag::kl_norm_univariate_rows(gathered)
                                      : ag::kl_norm_multivariate_rows(gathered);
}

std::pair<ag::Var, std::vector<double>> Autoencoder::noise_mask(
    const ag::Var& latents, const std::vector<double>& t_a, const Tensor& eps,
    const std::vector<std::uint8_t>& residue_mask) {
  const Tensor& z = latents.val();
  const std::int64_t d = z.dim(-1);
  const std::int64_t rows = z.size() / d;
  if (static_cast<std::int64_t>(t_a.size()) != rows ||
      static_cast<std::int64_t>(residue_mask.size()) != rows)
    throw ShapeError("noise_mask: per-position time/mask length mismatch");
  if (!z.same_shape(eps)) throw ShapeError("noise_mask: eps shape mismatch");

  std::vector<double> cos_keep(static_cast<std::size_t>(rows), 1.0);
  std::vector<double> weights(static_cast<std::size_t>(rows), 0.0);
  Tensor noise = Tensor::zeros(z.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    if (!residue_mask[static_cast<std::size_t>(r)]) continue;
    const double t = t_a[static_cast<std::size_t>(r)];
    if (t <= 0.0 || t >= 1.0)
      throw NumericError("noise_mask: t_a=" + std::to_string(t) + " outside (0,1)");
    const double c = std::cos(kPi * t / 2.0), s = std::sin(kPi * t / 2.0);
    cos_keep[static_cast<std::size_t>(r)] = c;
    weights[static_cast<std::size_t>(r)] = s * s;
    for (std::int64_t j = 0; j < d; ++j) noise[r * d + j] = s * eps[r * d + j];
  }
  ag::Var noised = ag::add(ag::mask_rows(latents, cos_keep), ag::constant(std::move(noise)));
  return {noised, weights};
}

LossBreakdown Autoencoder::regime_loss(nn::Tape& tape, const seqdata::TokenBatch& batch,
                                       Rng& rng) const {
  LossBreakdown out;
  switch (regime_.regime) {
    case Regime::LsdTn: {
      ag::Var z = encode_var(tape, batch);
      ag::Var logits = decode_var(tape, z, batch.residue_mask, batch.attend_mask);
      out.reconstruction = reconstruction_loss(logits, batch.tokens, batch.residue_mask);
      out.normalization = token_norm_loss(z, batch.tokens, batch.residue_mask);
      out.total = ag::add(out.reconstruction, ag::scale(out.normalization, regime_.norm_weight));
      break;
    }
    case Regime::LsdNm: {
      ag::Var z = encode_var(tape, batch);
      const std::int64_t rows = batch.rows * batch.padded_len;
      std::vector<double> t_a(static_cast<std::size_t>(rows), 0.5);
      for (std::int64_t r = 0; r < rows; ++r)
        if (batch.residue_mask[static_cast<std::size_t>(r)]) {
          const double u = rng.uniform();
          double t = regime_.nm_sampling == NmSampling::Uniform ? u : amplitude_quantile(u);
          t_a[static_cast<std::size_t>(r)] = std::min(std::max(t, 1e-12), 1.0 - 1e-12);
        }
      Tensor eps(z.val().shape());
      for (std::int64_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
      auto [noised, weights] = noise_mask(z, t_a, eps, batch.residue_mask);
      ag::Var logits = decode_var(tape, noised, batch.residue_mask, batch.attend_mask);
      out.reconstruction =
          reconstruction_loss(logits, batch.tokens, batch.residue_mask, &weights);
      out.normalization = norm_loss(z, batch.residue_mask, regime_.norm_form);
      out.total = ag::add(out.reconstruction, ag::scale(out.normalization, regime_.norm_weight));
      break;
    }
    case Regime::Mlm: {
      auto [masked, indicator] = mlm_mask(batch, regime_.mlm_rate, rng);
      bool any = false;
      for (auto m : indicator) any = any || m;
      if (!any) return out;  // degenerate draw: caller skips this step
      ag::Var z = encode_var(tape, masked);
      ag::Var logits = decode_var(tape, z, batch.residue_mask, batch.attend_mask);
      std::vector<double> w(indicator.size(), 0.0);
      for (std::size_t i = 0; i < indicator.size(); ++i) w[i] = indicator[i] ? 1.0 : 0.0;
      out.reconstruction = ag::cross_entropy(logits, batch.tokens, w);
      out.total = out.reconstruction;
      break;
    }
  }
  out.reconstruction_value = out.reconstruction.defined() ? out.reconstruction.item() : 0.0;
  out.normalization_value = out.normalization.defined() ? out.normalization.item() : 0.0;
  out.total_value = out.total.defined() ? out.total.item() : 0.0;
  return out;
}

}  // namespace lsd::ae
