#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "lsd/analysis.hpp"
#include "lsd/autoencoder.hpp"
#include "lsd/config.hpp"
#include "lsd/diffusion.hpp"
#include "lsd/probe.hpp"
#include "lsd/seqdata.hpp"
#include "lsd/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace lsd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 64;
constexpr int kExitConfig = 65;
constexpr int kExitIo = 66;
constexpr int kExitRuntime = 70;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "key=value config file");
  cmd->add_option("--set", opts.overrides, "config override key=value (repeatable)");
  cmd->add_option("--seed", opts.seed, "master random seed")
      ->each([&](const std::string&) { opts.seed_set = true; });
}

config::Config resolve_config(const CommonOpts& opts) {
  config::Config cfg;
  if (!opts.config_path.empty()) cfg = config::Config::from_file(opts.config_path);
  for (const auto& kv : opts.overrides) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opts.seed_set) cfg.set("seed", std::to_string(opts.seed));
  return cfg;
}

nn::BlockConfig block_from_config(const config::Config& cfg) {
  nn::BlockConfig block = train::block_preset(cfg.get_string("model.preset", "tiny"));
  block.channels = cfg.get_int("model.channels", block.channels);
  block.heads = static_cast<int>(cfg.get_int("model.heads", block.heads));
  block.layers = static_cast<int>(cfg.get_int("model.layers", block.layers));
  block.rope_base = cfg.get_double("model.rope_base", block.rope_base);
  block.validate();
  return block;
}

ae::RegimeConfig regime_from_config(const config::Config& cfg) {
  ae::RegimeConfig rc;
  rc.regime = ae::regime_from_name(cfg.get_string("regime.name", "lsd-tn"));
  const std::string form = cfg.get_string("regime.norm_form", "univariate");
  if (form == "univariate")
    rc.norm_form = ae::NormForm::Univariate;
  else if (form == "multivariate")
    rc.norm_form = ae::NormForm::Multivariate;
  else
    throw ConfigError("regime.norm_form must be univariate|multivariate, got '" + form + "'");
  rc.norm_weight = cfg.get_double("regime.norm_weight", rc.norm_weight);
  const std::string sampling = cfg.get_string("regime.nm_sampling", "amplitude");
  if (sampling == "amplitude")
    rc.nm_sampling = ae::NmSampling::Amplitude;
  else if (sampling == "uniform")
    rc.nm_sampling = ae::NmSampling::Uniform;
  else
    throw ConfigError("regime.nm_sampling must be amplitude|uniform, got '" + sampling + "'");
  rc.mlm_rate = cfg.get_double("regime.mlm_rate", rc.mlm_rate);
  rc.validate();
  return rc;
}

train::TrainConfig train_from_config(const config::Config& cfg) {
  train::TrainConfig tc;
  tc.steps = cfg.get_int("train.steps", tc.steps);
  tc.batch_size = cfg.get_int("train.batch_size", tc.batch_size);
  tc.padded_len = cfg.get_int("train.padded_len", tc.padded_len);
  tc.lr = cfg.get_double("train.lr", tc.lr);
  tc.weight_decay = cfg.get_double("train.weight_decay", tc.weight_decay);
  tc.log_every = cfg.get_int("train.log_every", tc.log_every);
  tc.seed = cfg.get_uint("seed", 0);
  const std::string ts = cfg.get_string("train.t_sampling", "importance");
  if (ts == "importance")
    tc.t_sampling = diff::TSampling::Importance;
  else if (ts == "uniform")
    tc.t_sampling = diff::TSampling::Uniform;
  else
    throw ConfigError("train.t_sampling must be importance|uniform, got '" + ts + "'");
  tc.validate();
  return tc;
}

// Canonical config snapshot stored inside checkpoints.
config::Config materialize(const config::Config& cfg, const nn::BlockConfig& block) {
  config::Config out = cfg;
  out.set("model.channels", std::to_string(block.channels));
  out.set("model.heads", std::to_string(block.heads));
  out.set("model.layers", std::to_string(block.layers));
  return out;
}

std::vector<seqdata::TokenSequence> load_fasta_dataset(const std::string& path,
                                                       std::size_t* dropped_out = nullptr) {
  auto records = seqdata::parse_fasta_file(path);
  auto [kept, dropped] = seqdata::filter_dataset(records);
  if (dropped_out) *dropped_out = dropped;
  if (kept.empty()) throw ParseError(path + ": no usable sequences after filtering");
  return kept;
}

std::uint64_t hash_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot hash artifact: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return train::fnv1a(ss.str());
}

void write_manifest(const fs::path& dir, const std::string& command,
                    const config::Config& cfg, const std::vector<std::string>& artifacts) {
  json m;
  m["command"] = command;
  m["config"] = json::object();
  for (const auto& [k, v] : cfg.entries()) m["config"][k] = v;
  m["seed"] = cfg.get_uint("seed", 0);
  m["artifacts"] = json::object();
  for (const auto& a : artifacts)
    m["artifacts"][fs::path(a).filename().string()] = hash_file(a);
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << m.dump(2) << "\n";
}

ae::Autoencoder load_autoencoder(const std::string& path, config::Config* cfg_out = nullptr) {
  train::CheckpointMeta meta = train::read_checkpoint_meta(path);
  std::istringstream is(meta.config_text);
  config::Config cfg = config::Config::parse(is, path + " (embedded config)");
  ae::Autoencoder model(block_from_config(cfg), regime_from_config(cfg), 0);
  train::load_checkpoint(path, model.params(), nullptr);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

diff::DiffusionModel load_diffusion(const std::string& path, config::Config* cfg_out = nullptr) {
  train::CheckpointMeta meta = train::read_checkpoint_meta(path);
  std::istringstream is(meta.config_text);
  config::Config cfg = config::Config::parse(is, path + " (embedded config)");
  diff::DiffusionModel model(block_from_config(cfg), 0);
  train::load_checkpoint(path, model.params(), nullptr);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

probe::TaskKind task_from_name(const std::string& name) {
  if (name == "regression") return probe::TaskKind::Regression;
  if (name == "classification") return probe::TaskKind::Classification;
  throw ConfigError("--task must be regression|classification, got '" + name + "'");
}

int run_prepare_data(const std::string& input, const std::string& output) {
  std::size_t dropped = 0;
  auto kept = load_fasta_dataset(input, &dropped);
  std::ofstream os(output, std::ios::trunc);
  if (!os) throw IoError("cannot open output: " + output);
  for (const auto& seq : kept) os << '>' << seq.id << '\n' << seqdata::detokenize(seq) << '\n';
  if (!os) throw IoError("write failed: " + output);
  std::cout << "kept " << kept.size() << " sequences, dropped " << dropped << "\n";
  return kExitOk;
}

int run_train_ae(const CommonOpts& opts, const std::string& data, const std::string& out_dir) {
  config::Config cfg = resolve_config(opts);
  nn::BlockConfig block = block_from_config(cfg);
  ae::RegimeConfig regime = regime_from_config(cfg);
  train::TrainConfig tc = train_from_config(cfg);
  cfg = materialize(cfg, block);

  auto dataset = load_fasta_dataset(data);
  ae::Autoencoder model(block, regime, Rng::mix(tc.seed, 0x1417ULL));
  train::AdamW opt(tc.optimizer());
  auto metrics = train::train_autoencoder(model, dataset, tc, opt);

  fs::create_directories(out_dir);
  const std::string ckpt = (fs::path(out_dir) / "checkpoint.bin").string();
  const std::string mpath = (fs::path(out_dir) / "metrics.tsv").string();
  train::CheckpointMeta meta;
  meta.config_text = cfg.render();
  meta.seed = tc.seed;
  meta.step = tc.steps;
  meta.last_loss = metrics.back().total;
  train::save_checkpoint(ckpt, model.params(), &opt, meta);
  train::write_metrics(mpath, metrics);
  write_manifest(out_dir, "train-ae", cfg, {ckpt, mpath});
  std::cout << "final loss " << metrics.back().total << " after " << tc.steps << " steps\n";
  return kExitOk;
}

int run_train_diff(const CommonOpts& opts, const std::string& ae_ckpt, const std::string& data,
                   const std::string& out_dir) {
  config::Config ae_cfg;
  ae::Autoencoder encoder = load_autoencoder(ae_ckpt, &ae_cfg);
  config::Config cfg = resolve_config(opts);
  // The diffusion stack inherits the encoder architecture unless overridden.
  for (const char* key : {"model.preset", "model.channels", "model.heads", "model.layers"})
    if (!cfg.has(key) && ae_cfg.has(key)) cfg.set(key, ae_cfg.get_string(key));
  nn::BlockConfig block = block_from_config(cfg);
  train::TrainConfig tc = train_from_config(cfg);
  cfg = materialize(cfg, block);

  auto dataset = load_fasta_dataset(data);
  diff::DiffusionModel model(block, Rng::mix(tc.seed, 0xd1f2ULL));
  train::AdamW opt(tc.optimizer());
  auto metrics = train::train_diffusion(model, encoder, dataset, tc, opt);

  fs::create_directories(out_dir);
  const std::string ckpt = (fs::path(out_dir) / "checkpoint.bin").string();
  const std::string mpath = (fs::path(out_dir) / "metrics.tsv").string();
  train::CheckpointMeta meta;
  meta.config_text = cfg.render();
  meta.seed = tc.seed;
  meta.step = tc.steps;
  meta.last_loss = metrics.back().total;
  train::save_checkpoint(ckpt, model.params(), &opt, meta);
  train::write_metrics(mpath, metrics);
  write_manifest(out_dir, "train-diff", cfg, {ckpt, mpath});
  std::cout << "final loss " << metrics.back().total << " after " << tc.steps << " steps\n";
  return kExitOk;
}

probe::FeatureConfig feature_config(const config::Config& cfg) {
  probe::FeatureConfig fc;
  fc.padded_len = cfg.get_int("train.padded_len", fc.padded_len);
  return fc;
}

int run_probe(const CommonOpts& opts, const std::string& ae_ckpt, const std::string& diff_ckpt,
              double t, const std::string& data, const std::string& task, std::int64_t classes,
              const std::string& out_path) {
  config::Config ae_cfg;
  ae::Autoencoder encoder = load_autoencoder(ae_ckpt, &ae_cfg);
  config::Config cfg = resolve_config(opts);
  probe::TaskKind kind = task_from_name(task);
  probe::ProbeDataset dataset = probe::load_probe_dataset(data);

  probe::FeatureConfig fc = feature_config(ae_cfg);
  std::optional<diff::DiffusionModel> dmodel;
  if (!diff_ckpt.empty()) {
    dmodel.emplace(load_diffusion(diff_ckpt));
    fc.source = probe::RepSource::Diffusion;
    fc.t = t;
  }
  auto train_set = dataset.split(true);
  auto test_set = dataset.split(false);
  if (train_set.empty() || test_set.empty())
    throw ConfigError("probe dataset needs both train and test rows");
  const diff::DiffusionModel* dptr = dmodel ? &*dmodel : nullptr;
  probe::FeatureMatrix ftrain = probe::build_features(train_set, encoder, dptr, fc);
  probe::FeatureMatrix ftest = probe::build_features(test_set, encoder, dptr, fc);

  probe::ProbeConfig pc;
  pc.lr = cfg.get_double("probe.lr", pc.lr);
  pc.max_epochs = cfg.get_int("probe.max_epochs", pc.max_epochs);
  pc.seed = cfg.get_uint("seed", 0);
  probe::ProbeModel model = probe::train_probe(ftrain, kind, classes, pc);
  const double metric = (kind == probe::TaskKind::Classification)
                            ? probe::accuracy(model, ftest)
                            : probe::regression_spearman(model, ftest);
  const char* metric_name =
      (kind == probe::TaskKind::Classification) ? "accuracy" : "spearman";
  if (!out_path.empty()) {
    std::ofstream os(out_path, std::ios::trunc);
    if (!os) throw IoError("cannot open probe output: " + out_path);
    os << "metric\tvalue\tt\tsource\n"
       << metric_name << '\t' << metric << '\t' << fc.t << '\t'
       << (dptr ? "diffusion" : "encoder") << "\n";
  }
  std::cout << metric_name << " " << metric << "\n";
  return kExitOk;
}

int run_sweep(const CommonOpts& opts, const std::string& ae_ckpt, const std::string& diff_ckpt,
              const std::string& data, const std::string& task, std::int64_t classes,
              const std::vector<double>& t_grid, int seeds, const std::string& out_path) {
  config::Config ae_cfg;
  ae::Autoencoder encoder = load_autoencoder(ae_ckpt, &ae_cfg);
  diff::DiffusionModel dmodel = load_diffusion(diff_ckpt);
  config::Config cfg = resolve_config(opts);
  probe::ProbeDataset dataset = probe::load_probe_dataset(data);
  probe::ProbeConfig pc;
  pc.lr = cfg.get_double("probe.lr", pc.lr);
  pc.max_epochs = cfg.get_int("probe.max_epochs", pc.max_epochs);
  pc.seed = cfg.get_uint("seed", 0);
  auto points = probe::probe_sweep(dataset, encoder, dmodel, t_grid, seeds,
                                   task_from_name(task), classes, pc, feature_config(ae_cfg));
  probe::write_sweep(out_path, points);
  for (const auto& p : points)
    std::cout << "t=" << p.t << " mean=" << p.mean << " stdev=" << p.stdev << "\n";
  return kExitOk;
}

int run_attention(const std::string& ae_ckpt, const std::string& diff_ckpt, double t,
                  const std::string& data, const std::string& out_path) {
  config::Config ae_cfg;
  ae::Autoencoder encoder = load_autoencoder(ae_ckpt, &ae_cfg);
  auto dataset = load_fasta_dataset(data);
  const std::int64_t padded_len = ae_cfg.get_int("train.padded_len", seqdata::kDefaultPaddedLen);
  std::vector<seqdata::TokenBatch> batches;
  for (std::size_t start = 0; start < dataset.size(); start += 16) {
    const std::size_t stop = std::min(start + 16, dataset.size());
    batches.push_back(seqdata::pad_batch(
        {dataset.begin() + static_cast<std::ptrdiff_t>(start),
         dataset.begin() + static_cast<std::ptrdiff_t>(stop)},
        padded_len));
  }
  std::vector<analysis::AttentionFractions> layers;
  if (diff_ckpt.empty()) {
    layers = analysis::encoder_attention_fractions(encoder, batches);
  } else {
    diff::DiffusionModel dmodel = load_diffusion(diff_ckpt);
    layers = analysis::diffusion_attention_fractions(dmodel, encoder, batches, t);
  }
  analysis::write_attention_report(out_path, layers);
  for (std::size_t i = 0; i < layers.size(); ++i)
    std::cout << "layer " << i << " context=" << layers[i].context
              << " local=" << layers[i].local << " edge=" << layers[i].edge << "\n";
  return kExitOk;
}

int run_export(const std::string& ae_ckpt, const std::string& data, const std::string& out_path) {
  config::Config ae_cfg;
  ae::Autoencoder encoder = load_autoencoder(ae_ckpt, &ae_cfg);
  auto dataset = load_fasta_dataset(data);
  analysis::export_embeddings(out_path, encoder, dataset,
                              ae_cfg.get_int("train.padded_len", seqdata::kDefaultPaddedLen));
  std::cout << "wrote " << out_path << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent sequence autoencoder and diffusion toolkit"};
  app.require_subcommand(1);

  std::string input, output, data, out_dir, ae_ckpt, diff_ckpt, task = "regression", out_path;
  std::int64_t classes = 2;
  double t = 0.0;
  int seeds = 5;
  std::vector<double> t_grid;
  CommonOpts train_ae_opts, train_diff_opts, probe_opts, sweep_opts;

  auto* prep = app.add_subcommand("prepare-data", "filter a FASTA file to model-ready sequences");
  prep->add_option("--input", input, "input FASTA")->required();
  prep->add_option("--output", output, "filtered FASTA output")->required();

  auto* tae = app.add_subcommand("train-ae", "train the sequence autoencoder");
  tae->add_option("--data", data, "training FASTA")->required();
  tae->add_option("--out", out_dir, "output directory")->required();
  add_common(tae, train_ae_opts);

  auto* tdf = app.add_subcommand("train-diff", "train the latent diffusion model");
  tdf->add_option("--ae-checkpoint", ae_ckpt, "frozen autoencoder checkpoint")->required();
  tdf->add_option("--data", data, "training FASTA")->required();
  tdf->add_option("--out", out_dir, "output directory")->required();
  add_common(tdf, train_diff_opts);

  auto* prb = app.add_subcommand("probe", "train and score a property probe");
  prb->add_option("--ae-checkpoint", ae_ckpt, "autoencoder checkpoint")->required();
  prb->add_option("--diff-checkpoint", diff_ckpt, "diffusion checkpoint (optional)");
  prb->add_option("--t", t, "diffusion representation time")->check(CLI::Range(0.0, 1.0));
  prb->add_option("--data", data, "probe dataset (TSV)")->required();
  prb->add_option("--task", task, "regression|classification");
  prb->add_option("--classes", classes, "class count for classification");
  prb->add_option("--out", out_path, "result TSV");
  add_common(prb, probe_opts);

  auto* swp = app.add_subcommand("sweep", "probe metric across diffusion times");
  swp->add_option("--ae-checkpoint", ae_ckpt, "autoencoder checkpoint")->required();
  swp->add_option("--diff-checkpoint", diff_ckpt, "diffusion checkpoint")->required();
  swp->add_option("--data", data, "probe dataset (TSV)")->required();
  swp->add_option("--task", task, "regression|classification");
  swp->add_option("--classes", classes, "class count for classification");
  swp->add_option("--t-grid", t_grid, "diffusion times to evaluate")->required();
  swp->add_option("--seeds", seeds, "probes per grid point");
  swp->add_option("--out", out_path, "sweep table output")->required();
  add_common(swp, sweep_opts);

  auto* att = app.add_subcommand("analyze-attention", "attention mass split per layer");
  att->add_option("--ae-checkpoint", ae_ckpt, "autoencoder checkpoint")->required();
  att->add_option("--diff-checkpoint", diff_ckpt, "diffusion checkpoint (optional)");
  att->add_option("--t", t, "diffusion time")->check(CLI::Range(0.0, 1.0));
  att->add_option("--data", data, "FASTA input")->required();
  att->add_option("--out", out_path, "report TSV")->required();

  auto* exp = app.add_subcommand("export-embeddings", "per-residue latent vectors as TSV");
  exp->add_option("--ae-checkpoint", ae_ckpt, "autoencoder checkpoint")->required();
  exp->add_option("--data", data, "FASTA input")->required();
  exp->add_option("--out", out_path, "embedding TSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (prep->parsed()) return run_prepare_data(input, output);
    if (tae->parsed()) return run_train_ae(train_ae_opts, data, out_dir);
    if (tdf->parsed()) return run_train_diff(train_diff_opts, ae_ckpt, data, out_dir);
    if (prb->parsed())
      return run_probe(probe_opts, ae_ckpt, diff_ckpt, t, data, task, classes, out_path);
    if (swp->parsed())
      return run_sweep(sweep_opts, ae_ckpt, diff_ckpt, data, task, classes, t_grid, seeds,
                       out_path);
    if (att->parsed()) return run_attention(ae_ckpt, diff_ckpt, t, data, out_path);
    if (exp->parsed()) return run_export(ae_ckpt, data, out_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
