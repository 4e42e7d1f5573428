#include "lsd/seqdata.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <sstream>

namespace lsd::seqdata {

const std::string& Vocab::letters() {
  static const std::string kLetters = "ACDEFGHIKLMNPQRSTVWY";
  return kLetters;
}

std::optional<int> Vocab::to_id(char letter) {
  const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(letter)));
  const auto pos = letters().find(u);
  if (pos == std::string::npos) return std::nullopt;
  return static_cast<int>(pos);
}

char Vocab::to_letter(int id) {
  if (id < 0 || id >= kNumResidues)
    throw ShapeError("Vocab::to_letter: id " + std::to_string(id) + " is not a residue");
  return letters()[static_cast<std::size_t>(id)];
}

std::int64_t TokenBatch::residue_count() const {
  std::int64_t n = 0;
  for (auto m : residue_mask) n += m ? 1 : 0;
  return n;
}

std::vector<FastaRecord> parse_fasta(std::istream& in) {
  std::vector<FastaRecord> records;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '>') {
      std::string id = line.substr(1);
      const auto ws = id.find_first_of(" \t");
      if (ws != std::string::npos) id = id.substr(0, ws);
      records.push_back({std::move(id), {}});
      have_header = true;
    } else {
      if (!have_header)
        throw ParseError("FASTA: sequence data before any header at line " +
                         std::to_string(lineno));
      for (char c : line)
        if (!std::isspace(static_cast<unsigned char>(c))) records.back().sequence += c;
    }
  }
  return records;
}

std::vector<FastaRecord> parse_fasta_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open FASTA file: " + path);
  return parse_fasta(in);
}

TokenSequence tokenize(const std::string& sequence, std::string id) {
  if (sequence.empty()) throw ParseError("tokenize: empty sequence");
  TokenSequence out;
  out.id = std::move(id);
  out.residues.reserve(sequence.size());
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    const auto tok = Vocab::to_id(sequence[i]);
    if (!tok) throw NonCanonicalError(sequence[i], i);
    out.residues.push_back(*tok);
  }
  return out;
}

std::string detokenize(const TokenSequence& seq) {
  std::string s;
  s.reserve(seq.residues.size());
  for (int id : seq.residues) s += Vocab::to_letter(id);
  return s;
}

std::pair<std::vector<TokenSequence>, std::size_t> filter_dataset(
    const std::vector<FastaRecord>& records, std::int64_t max_residues) {
  std::vector<TokenSequence> kept;
  std::size_t dropped = 0;
  for (const auto& rec : records) {
    if (rec.sequence.empty() ||
        static_cast<std::int64_t>(rec.sequence.size()) > max_residues) {
      ++dropped;
      continue;
    }
    try {
      kept.push_back(tokenize(rec.sequence, rec.id));
    } catch (const NonCanonicalError&) {
      ++dropped;
    }
  }
  return {std::move(kept), dropped};
}

TokenBatch pad_batch(const std::vector<TokenSequence>& seqs, std::int64_t padded_len) {
  TokenBatch batch;
  batch.rows = static_cast<std::int64_t>(seqs.size());
  batch.padded_len = padded_len;
  batch.tokens.assign(static_cast<std::size_t>(batch.rows * padded_len), Vocab::kPad);
  batch.residue_mask.assign(static_cast<std::size_t>(batch.rows * padded_len), 0);
  batch.attend_mask.assign(static_cast<std::size_t>(batch.rows * padded_len), 0);
  for (std::int64_t r = 0; r < batch.rows; ++r) {
    const auto& seq = seqs[static_cast<std::size_t>(r)];
    const std::int64_t n = static_cast<std::int64_t>(seq.residues.size());
    if (n == 0) throw ShapeError("pad_batch: empty sequence at row " + std::to_string(r));
    if (n + 2 > padded_len)
      throw ShapeError("pad_batch: sequence of length " + std::to_string(n) +
                       " does not fit padded_len " + std::to_string(padded_len));
    const std::int64_t off = r * padded_len;
    batch.tokens[off] = Vocab::kBos;
    batch.attend_mask[off] = 1;
    for (std::int64_t i = 0; i < n; ++i) {
      const int tok = seq.residues[static_cast<std::size_t>(i)];
      if (tok < 0 || tok >= Vocab::kNumResidues)
        throw ShapeError("pad_batch: non-residue token id " + std::to_string(tok));
      batch.tokens[off + 1 + i] = tok;
      batch.residue_mask[off + 1 + i] = 1;
      batch.attend_mask[off + 1 + i] = 1;
    }
    batch.tokens[off + 1 + n] = Vocab::kEos;
    batch.attend_mask[off + 1 + n] = 1;
    batch.lengths.push_back(n);
  }
  return batch;
}

}  // namespace lsd::seqdata
