#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lsd/autoencoder.hpp"
#include "lsd/diffusion.hpp"
#include "lsd/nnkernel.hpp"
#include "lsd/seqdata.hpp"

namespace lsd::train {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adam with decoupled weight decay. Moments are kept per parameter name so
// the state can be checkpointed alongside the parameters.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps() const { return step_; }
  void set_steps(std::int64_t s) { step_ = s; }

  void step(nn::ParamStore& store, nn::Tape& tape);

  std::map<std::string, Tensor>& first_moments() { return m_; }
  std::map<std::string, Tensor>& second_moments() { return v_; }

 private:
  AdamWConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

struct CheckpointMeta {
  std::string config_text;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  double last_loss = 0.0;
};

std::uint64_t fnv1a(const std::string& s);

// Versioned binary format; parameters and optimizer moments by name. Loading
// requires the target store to hold the same names and shapes.
void save_checkpoint(const std::string& path, const nn::ParamStore& store, const AdamW* opt,
                     const CheckpointMeta& meta);
CheckpointMeta load_checkpoint(const std::string& path, nn::ParamStore& store, AdamW* opt);
// Header only; lets callers rebuild the model before loading the tensors.
CheckpointMeta read_checkpoint_meta(const std::string& path);

struct MetricsRow {
  std::int64_t step = 0;
  double total = 0.0;
  double reconstruction = 0.0;
  double normalization = 0.0;
};

void write_metrics(const std::string& path, const std::vector<MetricsRow>& rows);

struct TrainConfig {
  std::int64_t steps = 1000;
  std::int64_t batch_size = 8;
  std::int64_t padded_len = seqdata::kDefaultPaddedLen;
  double lr = 1e-3;
  double weight_decay = 1e-3;
  std::uint64_t seed = 0;
  std::int64_t log_every = 100;
  diff::TSampling t_sampling = diff::TSampling::Importance;

  void validate() const;
  AdamWConfig optimizer() const {
    AdamWConfig c;
    c.lr = lr;
    c.weight_decay = weight_decay;
    return c;
  }
};

// "tiny" (32/4/2), "s" (256/16/6), "m" (512/16/6).
nn::BlockConfig block_preset(const std::string& name);

// Epoch-shuffled minibatch loop over the tokenized dataset. Throws
// NumericError when the loss goes non-finite. Returns one metrics row per
// log_every steps plus the final step.
std::vector<MetricsRow> train_autoencoder(ae::Autoencoder& model,
                                          const std::vector<seqdata::TokenSequence>& data,
                                          const TrainConfig& cfg, AdamW& opt);

// Diffusion training on latents from a frozen encoder; one t per step.
std::vector<MetricsRow> train_diffusion(diff::DiffusionModel& model,
                                        const ae::Autoencoder& encoder,
                                        const std::vector<seqdata::TokenSequence>& data,
                                        const TrainConfig& cfg, AdamW& opt);

}  // namespace lsd::train
