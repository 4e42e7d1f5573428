#include "lsd/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "lsd/errors.hpp"

namespace lsd::analysis {

void FractionAccumulator::add(const Tensor& weights,
                              const std::vector<std::uint8_t>& residue_mask,
                              const std::vector<std::uint8_t>& attend_mask) {
  if (weights.ndim() != 4 || weights.dim(2) != weights.dim(3))
    throw ShapeError("attention fractions: expected (B,H,L,L) weights, got " +
                     weights.shape_str());
  const std::int64_t B = weights.dim(0), H = weights.dim(1), L = weights.dim(2);
  if (static_cast<std::int64_t>(residue_mask.size()) != B * L ||
      static_cast<std::int64_t>(attend_mask.size()) != B * L)
    throw ShapeError("attention fractions: mask length mismatch");
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t q = 0; q < L; ++q) {
        if (!residue_mask[b * L + q]) continue;
        double c = 0.0, l = 0.0, e = 0.0;
        for (std::int64_t k = 0; k < L; ++k) {
          const double w = weights[((b * H + h) * L + q) * L + k];
          if (k == q)
            l += w;
          else if (residue_mask[b * L + k])
            c += w;
          else if (attend_mask[b * L + k])
            e += w;
          else if (w != 0.0)
            throw NumericError("attention fractions: nonzero weight on a padded key");
        }
        context += c;
        local += l;
        edge += e;
        count += 1.0;
      }
}

AttentionFractions FractionAccumulator::value() const {
  if (count == 0.0) throw NumericError("attention fractions: no residue queries seen");
  return {context / count, local / count, edge / count};
}

AttentionFractions fractions_from_weights(const Tensor& weights,
                                          const std::vector<std::uint8_t>& residue_mask,
                                          const std::vector<std::uint8_t>& attend_mask) {
  FractionAccumulator acc;
  acc.add(weights, residue_mask, attend_mask);
  return acc.value();
}

namespace {

std::vector<AttentionFractions> finalize(std::vector<FractionAccumulator>& acc) {
  std::vector<AttentionFractions> out;
  out.reserve(acc.size());
  for (const auto& a : acc) out.push_back(a.value());
  return out;
}

}  // namespace

std::vector<AttentionFractions> encoder_attention_fractions(
    const ae::Autoencoder& model, const std::vector<seqdata::TokenBatch>& batches) {
  if (batches.empty()) throw ConfigError("encoder_attention_fractions: no batches");
  std::vector<FractionAccumulator> acc(static_cast<std::size_t>(model.block_config().layers));
  auto& store = const_cast<nn::ParamStore&>(model.params());
  for (const auto& batch : batches) {
    nn::Tape tape(store, false);
    std::vector<Tensor> capture;
    model.encode_var(tape, batch, &capture);
    if (capture.size() != acc.size())
      throw ShapeError("encoder_attention_fractions: capture count mismatch");
    for (std::size_t layer = 0; layer < capture.size(); ++layer)
      acc[layer].add(capture[layer], batch.residue_mask, batch.attend_mask);
  }
  return finalize(acc);
}

std::vector<AttentionFractions> diffusion_attention_fractions(
    const diff::DiffusionModel& model, const ae::Autoencoder& encoder,
    const std::vector<seqdata::TokenBatch>& batches, double t) {
  if (batches.empty()) throw ConfigError("diffusion_attention_fractions: no batches");
  std::vector<FractionAccumulator> acc(static_cast<std::size_t>(model.block_config().layers));
  const double alpha = diff::schedule(t).alpha;
  for (const auto& batch : batches) {
    ae::LatentBatch latents = encoder.encode(batch);
    Tensor scaled = latents.z;
    for (std::int64_t i = 0; i < scaled.size(); ++i) scaled[i] *= alpha;
    std::vector<Tensor> capture;
    model.predict_v(scaled, t, latents.residue_mask, latents.attend_mask, &capture);
    if (capture.size() != acc.size())
      throw ShapeError("diffusion_attention_fractions: capture count mismatch");
    for (std::size_t layer = 0; layer < capture.size(); ++layer)
      acc[layer].add(capture[layer], latents.residue_mask, latents.attend_mask);
  }
  return finalize(acc);
}

void write_attention_report(const std::string& path,
                            const std::vector<AttentionFractions>& layers) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open attention report: " + path);
  os << "layer\tcontext\tlocal\tedge\n";
  char buf[160];
  for (std::size_t i = 0; i < layers.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.12g\t%.12g\t%.12g\n", i, layers[i].context,
                  layers[i].local, layers[i].edge);
    os << buf;
  }
  if (!os) throw IoError("attention report write failed: " + path);
}

void export_embeddings(const std::string& path, const ae::Autoencoder& encoder,
                       const std::vector<seqdata::TokenSequence>& data,
                       std::int64_t padded_len, std::int64_t batch_size) {
  if (data.empty()) throw ConfigError("export_embeddings: empty dataset");
  if (batch_size <= 0) throw ConfigError("export_embeddings: batch_size must be positive");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open embedding output: " + path);
  const std::int64_t d = encoder.block_config().channels;
  os << "id\tposition\taa";
  for (std::int64_t j = 0; j < d; ++j) os << "\tz" << j;
  os << "\n";
  char buf[64];
  const std::int64_t n = static_cast<std::int64_t>(data.size());
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t stop = std::min(start + batch_size, n);
    std::vector<seqdata::TokenSequence> chunk(data.begin() + start, data.begin() + stop);
    auto batch = seqdata::pad_batch(chunk, padded_len);
    ae::LatentBatch latents = encoder.encode(batch);
    const std::int64_t L = batch.padded_len;
    for (std::int64_t b = 0; b < stop - start; ++b) {
      const auto& seq = chunk[static_cast<std::size_t>(b)];
      for (std::size_t p = 0; p < seq.residues.size(); ++p) {
        const std::int64_t row = b * L + 1 + static_cast<std::int64_t>(p);
        os << seq.id << '\t' << p << '\t'
           << seqdata::Vocab::to_letter(seq.residues[p]);
        for (std::int64_t j = 0; j < d; ++j) {
          std::snprintf(buf, sizeof(buf), "\t%.12g", latents.z[row * d + j]);
          os << buf;
        }
        os << '\n';
      }
    }
  }
  if (!os) throw IoError("embedding write failed: " + path);
}

}  // namespace lsd::analysis
