#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lsd/autoencoder.hpp"
#include "lsd/diffusion.hpp"
#include "lsd/training.hpp"

namespace lsd::probe {

enum class TaskKind { Regression, Classification };

struct ProbeExample {
  std::string sequence;
  std::string sequence_b;  // empty unless the task scores a pair
  double label = 0.0;
  bool is_train = true;
};

// Tab-separated rows: sequence[<TAB>sequence_b]<TAB>label<TAB>split with
// split in {train, test}. Column count fixes whether the task is paired.
struct ProbeDataset {
  std::vector<ProbeExample> examples;
  bool paired = false;

  std::vector<ProbeExample> split(bool train) const;
};

ProbeDataset load_probe_dataset(const std::string& path);
ProbeDataset parse_probe_dataset(std::istream& is, const std::string& origin);

enum class RepSource { Encoder, Diffusion };

struct FeatureConfig {
  RepSource source = RepSource::Encoder;
  double t = 0.0;  // diffusion representation time
  std::int64_t padded_len = seqdata::kDefaultPaddedLen;
  std::int64_t batch_size = 16;
};

// One row per example: the latent mean-pooled over residue positions, width d
// for single sequences and 2d (concatenated pools) for pairs. Features are
// deterministic; diffusion uses the noise-free mean representation.
struct FeatureMatrix {
  Tensor x;  // (N, f)
  std::vector<double> labels;
};

FeatureMatrix build_features(const std::vector<ProbeExample>& examples,
                             const ae::Autoencoder& encoder,
                             const diff::DiffusionModel* diffusion,
                             const FeatureConfig& cfg);

struct ProbeConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::int64_t batch_size = 64;
  std::int64_t max_epochs = 200;
  std::int64_t patience = 10;
  double min_delta = 1e-6;
  std::uint64_t seed = 0;
};

// One hidden layer of the input width with silu, trained with AdamW.
// Regression uses mean squared error, classification mean cross-entropy.
class ProbeModel {
 public:
  ProbeModel(TaskKind kind, std::int64_t in_dim, std::int64_t out_dim, std::uint64_t seed);

  TaskKind kind() const { return kind_; }
  std::int64_t out_dim() const { return out_dim_; }
  nn::ParamStore& params() { return store_; }

  // Regression: (N,1) predictions. Classification: (N,C) logits.
  Tensor forward(const Tensor& x) const;
  ag::Var forward_var(nn::Tape& tape, const ag::Var& x) const;
  ag::Var loss(nn::Tape& tape, const Tensor& x, const std::vector<double>& labels) const;

 private:
  TaskKind kind_;
  std::int64_t in_dim_;
  std::int64_t out_dim_;
  nn::ParamStore store_;
};

ProbeModel train_probe(const FeatureMatrix& train, TaskKind kind, std::int64_t num_classes,
                       const ProbeConfig& cfg);

// Fraction of argmax matches (classification).
double accuracy(const ProbeModel& model, const FeatureMatrix& data);
// Spearman rank correlation of predictions vs labels (regression).
double regression_spearman(const ProbeModel& model, const FeatureMatrix& data);

// Rank correlation with average ranks for ties; throws NumericError when
// either side has zero rank variance.
double spearman_rho(const std::vector<double>& a, const std::vector<double>& b);

struct SweepPoint {
  double t = 0.0;
  double mean = 0.0;
  double stdev = 0.0;
  std::vector<double> per_seed;
};

// Trains seeds-many probes per t on diffusion representations and reports the
// test metric (accuracy or Spearman) as mean and standard deviation.
std::vector<SweepPoint> probe_sweep(const ProbeDataset& dataset, const ae::Autoencoder& encoder,
                                    const diff::DiffusionModel& diffusion,
                                    const std::vector<double>& t_grid, int seeds,
                                    TaskKind kind, std::int64_t num_classes,
                                    const ProbeConfig& probe_cfg, const FeatureConfig& feat_cfg);

void write_sweep(const std::string& path, const std::vector<SweepPoint>& points);

}  // namespace lsd::probe
