#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lsd/errors.hpp"

namespace lsd::seqdata {

// 20 canonical amino acids in alphabetical one-letter order, ids 0..19.
// Specials sit above the residue range and never appear under a residue mask.
struct Vocab {
  static constexpr int kNumResidues = 20;
  static constexpr int kPad = 20;
  static constexpr int kBos = 21;
  static constexpr int kEos = 22;
  static constexpr int kMask = 23;
  static constexpr int kSize = 24;

  static const std::string& letters();  // "ACDEFGHIKLMNPQRSTVWY"
  // Canonical letter (case-insensitive) -> id, or nullopt.
  static std::optional<int> to_id(char letter);
  static char to_letter(int id);  // residue ids only
};

struct NonCanonicalError : ParseError {
  NonCanonicalError(char letter, std::size_t position)
      : ParseError(std::string("non-canonical amino acid '") + letter + "' at position " +
                   std::to_string(position)),
        letter(letter),
        position(position) {}
  char letter;
  std::size_t position;
};

struct TokenSequence {
  std::vector<int> residues;  // each in [0, 19]
  std::string id;
};

struct FastaRecord {
  std::string id;
  std::string sequence;
};

struct TokenBatch {
  std::int64_t rows = 0;
  std::int64_t padded_len = 0;
  std::vector<int> tokens;              // rows * padded_len
  std::vector<std::uint8_t> residue_mask;  // true on residue slots only
  std::vector<std::uint8_t> attend_mask;   // residues + BOS/EOS, never PAD
  std::vector<std::int64_t> lengths;    // residues per row

  int token(std::int64_t r, std::int64_t p) const { return tokens[r * padded_len + p]; }
  std::int64_t residue_count() const;
};

inline constexpr std::int64_t kMaxResidues = 254;
inline constexpr std::int64_t kDefaultPaddedLen = 256;

// Header lines start '>'; record id is the first whitespace-delimited word.
// Sequence data before any header is a parse error carrying the line number.
std::vector<FastaRecord> parse_fasta(std::istream& in);
std::vector<FastaRecord> parse_fasta_file(const std::string& path);

// Case-insensitive canonical tokenization; anything else throws NonCanonicalError.
TokenSequence tokenize(const std::string& sequence, std::string id = {});
std::string detokenize(const TokenSequence& seq);

// Drops over-length and non-canonical records.
std::pair<std::vector<TokenSequence>, std::size_t> filter_dataset(
    const std::vector<FastaRecord>& records, std::int64_t max_residues = kMaxResidues);

// Row layout: [BOS | residues | EOS | PAD...]. padded_len must fit the longest
// sequence plus the two edge slots.
TokenBatch pad_batch(const std::vector<TokenSequence>& seqs,
                     std::int64_t padded_len = kDefaultPaddedLen);

}  // namespace lsd::seqdata
