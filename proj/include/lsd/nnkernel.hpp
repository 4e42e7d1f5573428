#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lsd/autograd.hpp"
#include "lsd/errors.hpp"
#include "lsd/rng.hpp"
#include "lsd/tensor.hpp"

namespace lsd::nn {

struct BlockConfig {
  std::int64_t channels = 256;
  int heads = 16;
  int layers = 6;
  bool conditioned = false;
  double rope_base = 10000.0;

  // SwiGLU hidden width: 8/3 * d rounded down to a multiple of the head count.
  std::int64_t ffn_hidden() const {
    std::int64_t h = (8 * channels) / 3;
    h -= h % heads;
    return h > 0 ? h : heads;
  }

  void validate() const {
    if (channels <= 0 || heads <= 0 || layers <= 0)
      throw ConfigError("BlockConfig: channels/heads/layers must be positive");
    if (channels % heads != 0)
      throw ConfigError("BlockConfig: channels not divisible by heads");
    if ((channels / heads) % 2 != 0)
      throw ConfigError("BlockConfig: head dimension must be even for RoPE");
  }
};

// Named parameter tensors with deterministic iteration order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return tensors_.count(name) > 0; }
  const std::vector<std::string>& names() const { return names_; }
  std::int64_t total_size() const;

 private:
  std::vector<std::string> names_;
  std::map<std::string, Tensor> tensors_;
};

// Binds store tensors to tape leaves for one forward/backward pass.
class Tape {
 public:
  Tape(ParamStore& store, bool train) : store_(&store), train_(train) {}
  ag::Var operator[](const std::string& name);
  // Gradient of a bound parameter after backward(); zeros if it never
  // received a gradient.
  Tensor grad(const std::string& name) const;

 private:
  ParamStore* store_;
  bool train_;
  std::map<std::string, ag::Var> bound_;
};

// Standard-normal init scaled by 1/sqrt(fan_in).
Tensor init_linear(std::int64_t fan_in, std::int64_t fan_out, Rng& rng);
Tensor init_embedding(std::int64_t rows, std::int64_t d, Rng& rng);

// (swish(x W1) ⊙ (x W2)) W3, no biases.
ag::Var swiglu_ffn(Tape& tape, const std::string& prefix, const ag::Var& x);

// Sinusoidal featurization of t in [0,1] followed by a two-layer MLP.
Tensor time_features(double t, std::int64_t d);
ag::Var time_embedding(Tape& tape, const std::string& prefix, double t, std::int64_t d);

// Pre-LN residual block; condition present iff cfg.conditioned (adaLN-zero,
// gates zero-initialized so the conditioned block is the identity at init).
ag::Var transformer_block(Tape& tape, const std::string& prefix, const BlockConfig& cfg,
                          const ag::Var& x, const std::vector<std::uint8_t>& attend_mask,
                          const std::vector<std::int64_t>& positions,
                          const std::optional<ag::Var>& condition,
                          Tensor* attn_capture = nullptr);

// A stack of `layers` blocks. Does not include a final norm or head.
class Tower {
 public:
  Tower(std::string prefix, BlockConfig cfg);
  void init_params(ParamStore& store, Rng& rng) const;

  // attn_capture, when non-null, receives one (B,H,L,L) record per layer.
  ag::Var forward(Tape& tape, ag::Var x, const std::vector<std::uint8_t>& attend_mask,
                  const std::optional<ag::Var>& condition = std::nullopt,
                  std::vector<Tensor>* attn_capture = nullptr) const;

  const BlockConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }
  std::string time_prefix() const { return prefix_ + ".time"; }

 private:
  std::string prefix_;
  BlockConfig cfg_;
};

// layernorm with learned gain/bias stored under prefix.
ag::Var affine_layernorm(Tape& tape, const std::string& prefix, const ag::Var& x);
void init_affine_layernorm(ParamStore& store, const std::string& prefix, std::int64_t d);

}  // namespace lsd::nn
