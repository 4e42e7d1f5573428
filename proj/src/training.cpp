#include "lsd/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>

#include "lsd/errors.hpp"

namespace lsd::train {

void AdamW::step(nn::ParamStore& store, nn::Tape& tape) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (const auto& name : store.names()) {
    Tensor& p = store.get(name);
    const Tensor g = tape.grad(name);
    auto mit = m_.find(name);
    if (mit == m_.end()) {
      mit = m_.emplace(name, Tensor::zeros(p.shape())).first;
      v_.emplace(name, Tensor::zeros(p.shape()));
    }
    Tensor& m = mit->second;
    Tensor& v = v_.at(name);
    if (!m.same_shape(p))
      throw ShapeError("AdamW: moment shape mismatch for " + name);
    for (std::int64_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= cfg_.lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay * p[i]);
    }
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

constexpr char kMagic[8] = {'L', 'S', 'D', 'C', 'K', 'P', 'T', '1'};

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put(std::ostream& os, T v) {
  put_bytes(os, &v, sizeof(v));
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  put_bytes(os, s.data(), s.size());
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_string(os, name);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) put<std::int64_t>(os, t.dim(i));
  put_bytes(os, t.data(), static_cast<std::size_t>(t.size()) * sizeof(double));
}

void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw IoError(std::string("checkpoint truncated while reading ") + what);
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v;
  get_bytes(is, &v, sizeof(v), what);
  return v;
}

std::string get_string(std::istream& is, const char* what) {
  const auto n = get<std::uint64_t>(is, what);
  if (n > (1ULL << 32)) throw IoError(std::string("checkpoint corrupt: ") + what);
  std::string s(n, '\0');
  get_bytes(is, s.data(), n, what);
  return s;
}

Tensor get_tensor_body(std::istream& is) {
  const auto ndim = get<std::uint32_t>(is, "tensor rank");
  if (ndim > 8) throw IoError("checkpoint corrupt: tensor rank");
  std::vector<std::int64_t> shape(ndim);
  for (auto& d : shape) d = get<std::int64_t>(is, "tensor shape");
  Tensor t(shape);
  get_bytes(is, t.data(), static_cast<std::size_t>(t.size()) * sizeof(double),
            "tensor data");
  return t;
}

void read_named_tensors(std::istream& is, std::uint64_t count,
                        const std::function<Tensor&(const std::string&)>& target) {
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = get_string(is, "tensor name");
    Tensor t = get_tensor_body(is);
    Tensor& dst = target(name);
    if (!dst.same_shape(t))
      throw ShapeError("checkpoint: shape mismatch for " + name + ": file " +
                       t.shape_str() + " vs model " + dst.shape_str());
    dst = std::move(t);
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const nn::ParamStore& store, const AdamW* opt,
                     const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  put_bytes(os, kMagic, sizeof(kMagic));
  put_string(os, meta.config_text);
  put<std::uint64_t>(os, fnv1a(meta.config_text));
  put<std::uint64_t>(os, meta.seed);
  put<std::int64_t>(os, meta.step);
  put<double>(os, meta.last_loss);
  put<std::uint64_t>(os, store.names().size());
  for (const auto& name : store.names()) put_tensor(os, name, store.get(name));
  const std::uint64_t opt_steps = opt ? static_cast<std::uint64_t>(opt->steps()) : 0;
  put<std::uint64_t>(os, opt_steps);
  const std::uint64_t nopt =
      opt ? const_cast<AdamW*>(opt)->first_moments().size() : 0;
  put<std::uint64_t>(os, nopt);
  if (opt) {
    auto* mut = const_cast<AdamW*>(opt);
    for (const auto& [name, m] : mut->first_moments()) {
      put_tensor(os, name, m);
      put_tensor(os, name, mut->second_moments().at(name));
    }
  }
  if (!os) throw IoError("checkpoint write failed: " + path);
}

namespace {

CheckpointMeta read_meta_body(std::istream& is, const std::string& path) {
  char magic[8];
  get_bytes(is, magic, sizeof(magic), "magic");
  if (!std::equal(magic, magic + 8, kMagic))
    throw IoError("not a checkpoint file: " + path);
  CheckpointMeta meta;
  meta.config_text = get_string(is, "config");
  const auto hash = get<std::uint64_t>(is, "config hash");
  if (hash != fnv1a(meta.config_text))
    throw IoError("checkpoint corrupt: config hash mismatch");
  meta.seed = get<std::uint64_t>(is, "seed");
  meta.step = get<std::int64_t>(is, "step");
  meta.last_loss = get<double>(is, "loss");
  return meta;
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  return read_meta_body(is, path);
}

CheckpointMeta load_checkpoint(const std::string& path, nn::ParamStore& store, AdamW* opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  CheckpointMeta meta = read_meta_body(is, path);
  const auto nparams = get<std::uint64_t>(is, "parameter count");
  if (nparams != store.names().size())
    throw ShapeError("checkpoint: parameter count mismatch");
  read_named_tensors(is, nparams, [&](const std::string& name) -> Tensor& {
    if (!store.has(name)) throw ShapeError("checkpoint: unknown parameter " + name);
    return store.get(name);
  });
  const auto opt_steps = get<std::uint64_t>(is, "optimizer step");
  const auto nopt = get<std::uint64_t>(is, "optimizer moment count");
  if (opt) {
    opt->set_steps(static_cast<std::int64_t>(opt_steps));
    opt->first_moments().clear();
    opt->second_moments().clear();
    for (std::uint64_t i = 0; i < nopt; ++i) {
      const std::string name = get_string(is, "moment name");
      Tensor m = get_tensor_body(is);
      const std::string name2 = get_string(is, "moment name");
      if (name2 != name) throw IoError("checkpoint corrupt: moment pairing");
      Tensor v = get_tensor_body(is);
      if (!store.has(name) || !store.get(name).same_shape(m) || !m.same_shape(v))
        throw ShapeError("checkpoint: moment shape mismatch for " + name);
      opt->first_moments().emplace(name, std::move(m));
      opt->second_moments().emplace(name, std::move(v));
    }
  } else {
    for (std::uint64_t i = 0; i < nopt; ++i) {
      get_string(is, "moment name");
      get_tensor_body(is);
      get_string(is, "moment name");
      get_tensor_body(is);
    }
  }
  return meta;
}

void write_metrics(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open metrics file: " + path);
  os << "step\ttotal\treconstruction\tnormalization\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld\t%.12g\t%.12g\t%.12g\n",
                  static_cast<long long>(r.step), r.total, r.reconstruction,
                  r.normalization);
    os << buf;
  }
  if (!os) throw IoError("metrics write failed: " + path);
}

void TrainConfig::validate() const {
  if (steps <= 0) throw ConfigError("TrainConfig: steps must be positive");
  if (batch_size <= 0) throw ConfigError("TrainConfig: batch_size must be positive");
  if (padded_len < 3) throw ConfigError("TrainConfig: padded_len too small");
  if (lr <= 0.0) throw ConfigError("TrainConfig: lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
  if (log_every <= 0) throw ConfigError("TrainConfig: log_every must be positive");
}

nn::BlockConfig block_preset(const std::string& name) {
  nn::BlockConfig cfg;
  if (name == "tiny") {
    cfg.channels = 32;
    cfg.heads = 4;
    cfg.layers = 2;
  } else if (name == "s") {
    cfg.channels = 256;
    cfg.heads = 16;
    cfg.layers = 6;
  } else if (name == "m") {
    cfg.channels = 512;
    cfg.heads = 16;
    cfg.layers = 6;
  } else {
    throw ConfigError("unknown model preset: " + name + " (expected tiny|s|m)");
  }
  return cfg;
}

namespace {

// Serves seed-shuffled epochs of minibatch index lists forever.
class BatchCursor {
 public:
  BatchCursor(std::size_t n, std::int64_t batch_size, std::uint64_t seed)
      : n_(n), batch_size_(static_cast<std::size_t>(batch_size)), seed_(seed) {
    if (n_ == 0) throw ConfigError("training requires a non-empty dataset");
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }

  std::vector<std::size_t> next() {
    if (pos_ >= n_) {
      ++epoch_;
      reshuffle();
      pos_ = 0;
    }
    const std::size_t end = std::min(pos_ + batch_size_, n_);
    std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                   order_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return batch;
  }

 private:
  void reshuffle() {
    Rng rng = Rng::substream(seed_, 0xe70c5ULL + epoch_);
    std::shuffle(order_.begin(), order_.end(), rng.engine());
  }

  std::size_t n_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

std::vector<seqdata::TokenSequence> select(const std::vector<seqdata::TokenSequence>& data,
                                           const std::vector<std::size_t>& idx) {
  std::vector<seqdata::TokenSequence> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data[i]);
  return out;
}

struct LossBreakdownView {
  double reconstruction;
  double normalization;
};

void check_finite(double value, const char* what, std::int64_t step,
                  const LossBreakdownView& parts) {
  if (std::isfinite(value)) return;
  throw NumericError(std::string(what) + ": non-finite loss at step " +
                     std::to_string(step) + " (reconstruction=" +
                     std::to_string(parts.reconstruction) + ", normalization=" +
                     std::to_string(parts.normalization) + ")");
}

}  // namespace

std::vector<MetricsRow> train_autoencoder(ae::Autoencoder& model,
                                          const std::vector<seqdata::TokenSequence>& data,
                                          const TrainConfig& cfg, AdamW& opt) {
  cfg.validate();
  BatchCursor cursor(data.size(), cfg.batch_size, cfg.seed);
  std::vector<MetricsRow> metrics;
  std::int64_t skipped = 0;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    auto batch = seqdata::pad_batch(select(data, cursor.next()), cfg.padded_len);
    Rng step_rng = Rng::substream(cfg.seed, 0x10ad5ULL + static_cast<std::uint64_t>(step));
    nn::Tape tape(model.params(), true);
    ae::LossBreakdown loss = model.regime_loss(tape, batch, step_rng);
    if (!loss.total.defined()) {
      // MLM batch where the mask touched nothing; draw another batch.
      if (++skipped > 10000)
        throw NumericError("train_autoencoder: every batch produced an empty mask");
      --step;
      continue;
    }
    check_finite(loss.total_value, "train_autoencoder", step,
                 {loss.reconstruction_value, loss.normalization_value});
    if (step % cfg.log_every == 0 || step == cfg.steps - 1)
      metrics.push_back({step, loss.total_value, loss.reconstruction_value,
                         loss.normalization_value});
    ag::backward(loss.total);
    opt.step(model.params(), tape);
  }
  return metrics;
}

std::vector<MetricsRow> train_diffusion(diff::DiffusionModel& model,
                                        const ae::Autoencoder& encoder,
                                        const std::vector<seqdata::TokenSequence>& data,
                                        const TrainConfig& cfg, AdamW& opt) {
  cfg.validate();
  if (encoder.block_config().channels != model.block_config().channels)
    throw ConfigError("train_diffusion: encoder and diffusion widths differ");
  BatchCursor cursor(data.size(), cfg.batch_size, cfg.seed);
  std::vector<MetricsRow> metrics;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    auto batch = seqdata::pad_batch(select(data, cursor.next()), cfg.padded_len);
    ae::LatentBatch latents = encoder.encode(batch);
    Rng step_rng = Rng::substream(cfg.seed, 0xd1ffULL + static_cast<std::uint64_t>(step));
    const diff::TDraw draw = diff::sample_training_t(cfg.t_sampling, step_rng);
    Tensor eps(latents.z.shape());
    for (std::int64_t i = 0; i < eps.size(); ++i) eps[i] = step_rng.normal();
    nn::Tape tape(model.params(), true);
    ag::Var loss = model.diffusion_loss(tape, latents.z, draw.t, eps, latents.residue_mask,
                                        latents.attend_mask, draw.loss_scale);
    const double value = loss.item();
    check_finite(value, "train_diffusion", step, {value, 0.0});
    if (step % cfg.log_every == 0 || step == cfg.steps - 1)
      metrics.push_back({step, value, value, 0.0});
    ag::backward(loss);
    opt.step(model.params(), tape);
  }
  return metrics;
}

}  // namespace lsd::train
