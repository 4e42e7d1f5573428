#include "lsd/nnkernel.hpp"

#include <algorithm>
#include <cmath>

namespace lsd::nn {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (has(name)) throw ConfigError("ParamStore: duplicate parameter " + name);
  names_.push_back(name);
  return tensors_.emplace(name, std::move(init)).first->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ConfigError("ParamStore: unknown parameter " + name);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ConfigError("ParamStore: unknown parameter " + name);
  return it->second;
}

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& name : names_) n += get(name).size();
  return n;
}

ag::Var Tape::operator[](const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  ag::Var v = ag::leaf(store_->get(name), train_);
  bound_.emplace(name, v);
  return v;
}

Tensor Tape::grad(const std::string& name) const {
  auto it = bound_.find(name);
  if (it == bound_.end() || !it->second.node()->grad_ready)
    return Tensor::zeros(store_->get(name).shape());
  return it->second.grad();
}

Tensor init_linear(std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
  Tensor w({fan_in, fan_out});
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = s * rng.normal();
  return w;
}

Tensor init_embedding(std::int64_t rows, std::int64_t d, Rng& rng) {
  Tensor w({rows, d});
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = s * rng.normal();
  return w;
}

ag::Var affine_layernorm(Tape& tape, const std::string& prefix, const ag::Var& x) {
  return ag::add_rowvec(ag::mul_rowvec(ag::layernorm(x), tape[prefix + ".gain"]),
                        tape[prefix + ".bias"]);
}

void init_affine_layernorm(ParamStore& store, const std::string& prefix, std::int64_t d) {
  store.add(prefix + ".gain", Tensor::full({d}, 1.0));
  store.add(prefix + ".bias", Tensor::zeros({d}));
}

ag::Var swiglu_ffn(Tape& tape, const std::string& prefix, const ag::Var& x) {
  ag::Var gate = ag::silu(ag::matmul(x, tape[prefix + ".w1"]));
  ag::Var lin = ag::matmul(x, tape[prefix + ".w2"]);
  return ag::matmul(ag::mul(gate, lin), tape[prefix + ".w3"]);
}

Tensor time_features(double t, std::int64_t d) {
  if (t < 0.0 || t > 1.0)
    throw ConfigError("time_features: t=" + std::to_string(t) + " outside [0,1]");
  const std::int64_t half = d / 2;
  Tensor f({d});
  for (std::int64_t j = 0; j < half; ++j) {
    // Log-spaced frequencies from 1 to 1000 over the unit interval.
    const double omega =
        std::pow(1000.0, half > 1 ? static_cast<double>(j) / static_cast<double>(half - 1) : 0.0);
    f[j] = std::sin(t * omega);
    f[half + j] = std::cos(t * omega);
  }
  if (d % 2 == 1) f[d - 1] = t;
  return f;
}

ag::Var time_embedding(Tape& tape, const std::string& prefix, double t, std::int64_t d) {
  ag::Var feat = ag::constant(Tensor({1, d}, time_features(t, d).vec()));
  ag::Var h = ag::silu(ag::matmul(feat, tape[prefix + ".w1"]));
  return ag::reshape(ag::matmul(h, tape[prefix + ".w2"]), {d});
}

namespace {

void init_block(ParamStore& store, const std::string& prefix, const BlockConfig& cfg, Rng& rng) {
  const std::int64_t d = cfg.channels;
  init_affine_layernorm(store, prefix + ".ln1", d);
  init_affine_layernorm(store, prefix + ".ln2", d);
  store.add(prefix + ".wq", init_linear(d, d, rng));
  store.add(prefix + ".wk", init_linear(d, d, rng));
  store.add(prefix + ".wv", init_linear(d, d, rng));
  store.add(prefix + ".wo", init_linear(d, d, rng));
  store.add(prefix + ".ffn.w1", init_linear(d, cfg.ffn_hidden(), rng));
  store.add(prefix + ".ffn.w2", init_linear(d, cfg.ffn_hidden(), rng));
  store.add(prefix + ".ffn.w3", init_linear(cfg.ffn_hidden(), d, rng));
  if (cfg.conditioned) store.add(prefix + ".mod", Tensor::zeros({d, 6 * d}));
}

}  // namespace

ag::Var transformer_block(Tape& tape, const std::string& prefix, const BlockConfig& cfg,
                          const ag::Var& x, const std::vector<std::uint8_t>& attend_mask,
                          const std::vector<std::int64_t>& positions,
                          const std::optional<ag::Var>& condition, Tensor* attn_capture) {
  if (cfg.conditioned != condition.has_value())
    throw ConfigError(cfg.conditioned ? "transformer_block: conditioned block needs a condition"
                                      : "transformer_block: condition supplied to "
                                        "unconditioned block");
  const std::int64_t d = cfg.channels;

  ag::Var s1, h1, g1, s2, h2, g2;
  if (condition) {
    ag::Var c = ag::reshape(*condition, {1, d});
    ag::Var mod = ag::reshape(ag::matmul(ag::silu(c), tape[prefix + ".mod"]), {6 * d});
    s1 = ag::slice_lastdim(mod, 0, d);
    h1 = ag::slice_lastdim(mod, d, d);
    g1 = ag::slice_lastdim(mod, 2 * d, d);
    s2 = ag::slice_lastdim(mod, 3 * d, d);
    h2 = ag::slice_lastdim(mod, 4 * d, d);
    g2 = ag::slice_lastdim(mod, 5 * d, d);
  }

  ag::Var a = affine_layernorm(tape, prefix + ".ln1", x);
  if (condition) a = ag::add_rowvec(ag::mul_rowvec(a, ag::add_scalar(s1, 1.0)), h1);
  ag::Var q = ag::rope(ag::split_heads(ag::matmul(a, tape[prefix + ".wq"]), cfg.heads),
                       positions, cfg.rope_base);
  ag::Var k = ag::rope(ag::split_heads(ag::matmul(a, tape[prefix + ".wk"]), cfg.heads),
                       positions, cfg.rope_base);
  ag::Var v = ag::split_heads(ag::matmul(a, tape[prefix + ".wv"]), cfg.heads);
  ag::Var attn = ag::merge_heads(ag::attention(q, k, v, attend_mask, attn_capture));
  attn = ag::matmul(attn, tape[prefix + ".wo"]);
  if (condition) attn = ag::mul_rowvec(attn, g1);
  ag::Var h = ag::add(x, attn);

  ag::Var f = affine_layernorm(tape, prefix + ".ln2", h);
  if (condition) f = ag::add_rowvec(ag::mul_rowvec(f, ag::add_scalar(s2, 1.0)), h2);
  ag::Var ffn = swiglu_ffn(tape, prefix + ".ffn", f);
  if (condition) ffn = ag::mul_rowvec(ffn, g2);
  return ag::add(h, ffn);
}

Tower::Tower(std::string prefix, BlockConfig cfg) : prefix_(std::move(prefix)), cfg_(cfg) {
  cfg_.validate();
}

void Tower::init_params(ParamStore& store, Rng& rng) const {
  const std::int64_t d = cfg_.channels;
  if (cfg_.conditioned) {
    store.add(time_prefix() + ".w1", init_linear(d, d, rng));
    store.add(time_prefix() + ".w2", init_linear(d, d, rng));
  }
  for (int l = 0; l < cfg_.layers; ++l)
    init_block(store, prefix_ + ".block" + std::to_string(l), cfg_, rng);
}

ag::Var Tower::forward(Tape& tape, ag::Var x, const std::vector<std::uint8_t>& attend_mask,
                       const std::optional<ag::Var>& condition,
                       std::vector<Tensor>* attn_capture) const {
  const Tensor& v = x.val();
  if (v.ndim() != 3 || v.dim(2) != cfg_.channels)
    throw ShapeError("Tower: expected (B,L," + std::to_string(cfg_.channels) + "), got " +
                     v.shape_str());
  std::vector<std::int64_t> positions(static_cast<std::size_t>(v.dim(1)));
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int64_t>(i);
  for (int l = 0; l < cfg_.layers; ++l) {
    Tensor record;
    x = transformer_block(tape, prefix_ + ".block" + std::to_string(l), cfg_, x, attend_mask,
                          positions, condition, attn_capture ? &record : nullptr);
    if (attn_capture) attn_capture->push_back(std::move(record));
  }
  return x;
}

}  // namespace lsd::nn
