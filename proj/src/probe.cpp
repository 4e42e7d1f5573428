#include "lsd/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "lsd/errors.hpp"

namespace lsd::probe {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

}  // namespace

std::vector<ProbeExample> ProbeDataset::split(bool train) const {
  std::vector<ProbeExample> out;
  for (const auto& e : examples)
    if (e.is_train == train) out.push_back(e);
  return out;
}

ProbeDataset parse_probe_dataset(std::istream& is, const std::string& origin) {
  ProbeDataset ds;
  std::string line;
  std::size_t lineno = 0;
  int expected_cols = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cols = split_tabs(line);
    const int n = static_cast<int>(cols.size());
    if (n != 3 && n != 4)
      throw ParseError(origin + ":" + std::to_string(lineno) +
                       ": expected 3 or 4 tab-separated columns, got " + std::to_string(n));
    if (expected_cols == 0) {
      expected_cols = n;
      ds.paired = (n == 4);
    } else if (n != expected_cols) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": inconsistent column count");
    }
    ProbeExample e;
    e.sequence = cols[0];
    if (ds.paired) e.sequence_b = cols[1];
    const std::string& label = cols[ds.paired ? 2 : 1];
    try {
      std::size_t used = 0;
      e.label = std::stod(label, &used);
      if (used != label.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": bad label '" + label + "'");
    }
    const std::string& split = cols[ds.paired ? 3 : 2];
    if (split == "train")
      e.is_train = true;
    else if (split == "test")
      e.is_train = false;
    else
      throw ParseError(origin + ":" + std::to_string(lineno) + ": split must be train|test, got '" +
                       split + "'");
    ds.examples.push_back(std::move(e));
  }
  if (ds.examples.empty()) throw ParseError(origin + ": empty probe dataset");
  return ds;
}

ProbeDataset load_probe_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open probe dataset: " + path);
  return parse_probe_dataset(is, path);
}

namespace {

// Mean-pool latent rows over residue positions, one vector per sequence.
void pool_into(const Tensor& z, const std::vector<std::uint8_t>& residue_mask,
               Tensor& out, std::int64_t out_row, std::int64_t col_offset) {
  const std::int64_t B = z.dim(0), L = z.dim(1), d = z.dim(2);
  const std::int64_t width = out.dim(1);
  for (std::int64_t b = 0; b < B; ++b) {
    double count = 0.0;
    for (std::int64_t p = 0; p < L; ++p) {
      if (!residue_mask[b * L + p]) continue;
      count += 1.0;
      for (std::int64_t j = 0; j < d; ++j)
        out[(out_row + b) * width + col_offset + j] += z[(b * L + p) * d + j];
    }
    if (count == 0.0) throw NumericError("build_features: sequence with no residues");
    for (std::int64_t j = 0; j < d; ++j)
      out[(out_row + b) * width + col_offset + j] /= count;
  }
}

void featurize_column(const std::vector<std::string>& sequences, const ae::Autoencoder& encoder,
                      const diff::DiffusionModel* diffusion, const FeatureConfig& cfg,
                      Tensor& out, std::int64_t col_offset) {
  const std::int64_t n = static_cast<std::int64_t>(sequences.size());
  for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
    const std::int64_t stop = std::min(start + cfg.batch_size, n);
    std::vector<seqdata::TokenSequence> chunk;
    for (std::int64_t i = start; i < stop; ++i)
      chunk.push_back(seqdata::tokenize(sequences[static_cast<std::size_t>(i)]));
    auto batch = seqdata::pad_batch(chunk, cfg.padded_len);
    ae::LatentBatch latents = encoder.encode(batch);
    if (cfg.source == RepSource::Diffusion) {
      if (!diffusion) throw ConfigError("build_features: diffusion source without a model");
      latents.z = diffusion->mean_representation(latents.z, cfg.t, latents.residue_mask,
                                                 latents.attend_mask);
    }
    pool_into(latents.z, latents.residue_mask, out, start, col_offset);
  }
}

}  // namespace

FeatureMatrix build_features(const std::vector<ProbeExample>& examples,
                             const ae::Autoencoder& encoder,
                             const diff::DiffusionModel* diffusion, const FeatureConfig& cfg) {
  if (examples.empty()) throw ConfigError("build_features: no examples");
  const bool paired = !examples.front().sequence_b.empty();
  const std::int64_t d = encoder.block_config().channels;
  const std::int64_t n = static_cast<std::int64_t>(examples.size());
  FeatureMatrix fm;
  fm.x = Tensor::zeros({n, paired ? 2 * d : d});
  fm.labels.reserve(static_cast<std::size_t>(n));
  std::vector<std::string> primary, secondary;
  for (const auto& e : examples) {
    primary.push_back(e.sequence);
    if (paired) secondary.push_back(e.sequence_b);
    fm.labels.push_back(e.label);
  }
  featurize_column(primary, encoder, diffusion, cfg, fm.x, 0);
  if (paired) featurize_column(secondary, encoder, diffusion, cfg, fm.x, d);
  return fm;
}

ProbeModel::ProbeModel(TaskKind kind, std::int64_t in_dim, std::int64_t out_dim,
                       std::uint64_t seed)
    : kind_(kind), in_dim_(in_dim), out_dim_(out_dim) {
  if (in_dim <= 0 || out_dim <= 0) throw ConfigError("ProbeModel: bad dimensions");
  Rng rng(Rng::mix(seed, 0x9208eULL));
  store_.add("w1", nn::init_linear(in_dim, in_dim, rng));
  store_.add("b1", Tensor::zeros({in_dim}));
  store_.add("w2", nn::init_linear(in_dim, out_dim, rng));
  store_.add("b2", Tensor::zeros({out_dim}));
}

ag::Var ProbeModel::forward_var(nn::Tape& tape, const ag::Var& x) const {
  ag::Var h = ag::silu(ag::add_rowvec(ag::matmul(x, tape["w1"]), tape["b1"]));
  return ag::add_rowvec(ag::matmul(h, tape["w2"]), tape["b2"]);
}

Tensor ProbeModel::forward(const Tensor& x) const {
  auto& store = const_cast<nn::ParamStore&>(store_);
  nn::Tape tape(store, false);
  return forward_var(tape, ag::constant(x)).val();
}

ag::Var ProbeModel::loss(nn::Tape& tape, const Tensor& x, const std::vector<double>& labels) const {
  const std::int64_t n = x.dim(0);
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw ShapeError("ProbeModel::loss: label count mismatch");
  ag::Var out = forward_var(tape, ag::constant(x));
  if (kind_ == TaskKind::Regression) {
    Tensor target({n, 1});
    for (std::int64_t i = 0; i < n; ++i) target[i] = labels[static_cast<std::size_t>(i)];
    return ag::scale(ag::sum_all(ag::square(ag::sub(out, ag::constant(target)))),
                     1.0 / static_cast<double>(n));
  }
  std::vector<int> targets(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double lab = labels[static_cast<std::size_t>(i)];
    const int cls = static_cast<int>(std::llround(lab));
    if (std::fabs(lab - cls) > 1e-9 || cls < 0 || cls >= out_dim_)
      throw ConfigError("classification label out of range: " + std::to_string(lab));
    targets[static_cast<std::size_t>(i)] = cls;
  }
  return ag::cross_entropy(ag::reshape(out, {n, 1, out_dim_}), targets,
                           std::vector<double>(static_cast<std::size_t>(n), 1.0));
}

ProbeModel train_probe(const FeatureMatrix& train, TaskKind kind, std::int64_t num_classes,
                       const ProbeConfig& cfg) {
  const std::int64_t n = train.x.dim(0);
  const std::int64_t f = train.x.dim(1);
  const std::int64_t out_dim = (kind == TaskKind::Regression) ? 1 : num_classes;
  if (kind == TaskKind::Classification && num_classes < 2)
    throw ConfigError("train_probe: classification needs >= 2 classes");
  ProbeModel model(kind, f, out_dim, cfg.seed);
  train::AdamWConfig acfg;
  acfg.lr = cfg.lr;
  acfg.weight_decay = cfg.weight_decay;
  train::AdamW opt(acfg);

  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::int64_t bad_epochs = 0;
  for (std::int64_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Rng rng = Rng::substream(cfg.seed, 0xe90c4ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_loss = 0.0;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      const std::int64_t stop = std::min(start + cfg.batch_size, n);
      const std::int64_t bs = stop - start;
      Tensor xb({bs, f});
      std::vector<double> yb(static_cast<std::size_t>(bs));
      for (std::int64_t i = 0; i < bs; ++i) {
        const std::size_t src = order[static_cast<std::size_t>(start + i)];
        for (std::int64_t j = 0; j < f; ++j)
          xb[i * f + j] = train.x[static_cast<std::int64_t>(src) * f + j];
        yb[static_cast<std::size_t>(i)] = train.labels[src];
      }
      nn::Tape tape(model.params(), true);
      ag::Var loss = model.loss(tape, xb, yb);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw NumericError("train_probe: non-finite loss at epoch " + std::to_string(epoch));
      epoch_loss += value * static_cast<double>(bs);
      ag::backward(loss);
      opt.step(model.params(), tape);
    }
    epoch_loss /= static_cast<double>(n);
    if (epoch_loss < best - cfg.min_delta) {
      best = epoch_loss;
      bad_epochs = 0;
    } else if (++bad_epochs >= cfg.patience) {
      break;
    }
  }
  return model;
}

double accuracy(const ProbeModel& model, const FeatureMatrix& data) {
  const Tensor out = model.forward(data.x);
  const std::int64_t n = out.dim(0), c = out.dim(1);
  if (n == 0) throw NumericError("accuracy: empty evaluation set");
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t arg = 0;
    for (std::int64_t j = 1; j < c; ++j)
      if (out[i * c + j] > out[i * c + arg]) arg = j;
    if (arg == static_cast<std::int64_t>(std::llround(data.labels[static_cast<std::size_t>(i)])))
      ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

double regression_spearman(const ProbeModel& model, const FeatureMatrix& data) {
  const Tensor out = model.forward(data.x);
  std::vector<double> preds(out.vec().begin(), out.vec().end());
  return spearman_rho(preds, data.labels);
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("spearman_rho: length mismatch");
  if (a.size() < 2) throw NumericError("spearman_rho: need at least two points");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double num = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0)
    throw NumericError("spearman_rho: zero rank variance (constant input)");
  return num / std::sqrt(va * vb);
}

std::vector<SweepPoint> probe_sweep(const ProbeDataset& dataset, const ae::Autoencoder& encoder,
                                    const diff::DiffusionModel& diffusion,
                                    const std::vector<double>& t_grid, int seeds,
                                    TaskKind kind, std::int64_t num_classes,
                                    const ProbeConfig& probe_cfg, const FeatureConfig& feat_cfg) {
  if (seeds < 1) throw ConfigError("probe_sweep: seeds must be >= 1");
  if (t_grid.empty()) throw ConfigError("probe_sweep: empty t grid");
  const auto train_set = dataset.split(true);
  const auto test_set = dataset.split(false);
  if (train_set.empty() || test_set.empty())
    throw ConfigError("probe_sweep: both train and test splits are required");
  std::vector<SweepPoint> points;
  for (double t : t_grid) {
    FeatureConfig fc = feat_cfg;
    fc.source = RepSource::Diffusion;
    fc.t = t;
    const FeatureMatrix ftrain = build_features(train_set, encoder, &diffusion, fc);
    const FeatureMatrix ftest = build_features(test_set, encoder, &diffusion, fc);
    SweepPoint point;
    point.t = t;
    for (int s = 0; s < seeds; ++s) {
      ProbeConfig pc = probe_cfg;
      pc.seed = Rng::mix(probe_cfg.seed, static_cast<std::uint64_t>(s));
      ProbeModel model = train_probe(ftrain, kind, num_classes, pc);
      const double metric = (kind == TaskKind::Classification) ? accuracy(model, ftest)
                                                               : regression_spearman(model, ftest);
      point.per_seed.push_back(metric);
    }
    double mean = 0.0;
    for (double m : point.per_seed) mean += m;
    mean /= static_cast<double>(seeds);
    double var = 0.0;
    for (double m : point.per_seed) var += (m - mean) * (m - mean);
    point.mean = mean;
    point.stdev = seeds > 1 ? std::sqrt(var / static_cast<double>(seeds - 1)) : 0.0;
    points.push_back(std::move(point));
  }
  return points;
}

void write_sweep(const std::string& path, const std::vector<SweepPoint>& points) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open sweep output: " + path);
  os << "t\tmean\tstdev\tseeds\n";
  char buf[160];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%.6g\t%.12g\t%.12g\t%zu\n", p.t, p.mean, p.stdev,
                  p.per_seed.size());
    os << buf;
  }
  if (!os) throw IoError("sweep write failed: " + path);
}

}  // namespace lsd::probe
