#pragma once

#include <string>
#include <vector>

#include "lsd/autoencoder.hpp"
#include "lsd/diffusion.hpp"

namespace lsd::analysis {

// Post-softmax attention mass split over key groups, averaged over heads and
// residue-position queries. "local" is the query's own position, "edge" the
// BOS/EOS slots, "context" the remaining residue keys. Sums to 1.
struct AttentionFractions {
  double context = 0.0;
  double local = 0.0;
  double edge = 0.0;
};

// Running aggregate so fractions can be averaged across batches per layer.
struct FractionAccumulator {
  double context = 0.0;
  double local = 0.0;
  double edge = 0.0;
  double count = 0.0;  // (batch row, head, residue query) triples

  void add(const Tensor& weights, const std::vector<std::uint8_t>& residue_mask,
           const std::vector<std::uint8_t>& attend_mask);
  AttentionFractions value() const;
};

AttentionFractions fractions_from_weights(const Tensor& weights,
                                          const std::vector<std::uint8_t>& residue_mask,
                                          const std::vector<std::uint8_t>& attend_mask);

// Per-layer fractions of the encoder stack over the given batches.
std::vector<AttentionFractions> encoder_attention_fractions(
    const ae::Autoencoder& model, const std::vector<seqdata::TokenBatch>& batches);

// Per-layer fractions of the diffusion stack applied to encoder latents at
// noise level t (deterministic input scaling, no sampled noise).
std::vector<AttentionFractions> diffusion_attention_fractions(
    const diff::DiffusionModel& model, const ae::Autoencoder& encoder,
    const std::vector<seqdata::TokenBatch>& batches, double t);

void write_attention_report(const std::string& path,
                            const std::vector<AttentionFractions>& layers);

// One row per residue position: sequence id, position, amino acid letter and
// the latent coordinates.
void export_embeddings(const std::string& path, const ae::Autoencoder& encoder,
                       const std::vector<seqdata::TokenSequence>& data,
                       std::int64_t padded_len = seqdata::kDefaultPaddedLen,
                       std::int64_t batch_size = 16);

}  // namespace lsd::analysis
