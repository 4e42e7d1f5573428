#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "lsd/rng.hpp"
#include "lsd/seqdata.hpp"

using namespace lsd;
using namespace lsd::seqdata;

TEST_CASE("parse_fasta basic records") {
  std::istringstream one(">a\nMKV\n");
  auto r = parse_fasta(one);
  REQUIRE(r.size() == 1);
  CHECK(r[0].id == "a");
  CHECK(r[0].sequence == "MKV");

  std::istringstream multi(">a\nMK\nV\n>b\nGG\n");
  r = parse_fasta(multi);
  REQUIRE(r.size() == 2);
  CHECK(r[0].sequence == "MKV");
  CHECK(r[1].id == "b");
  CHECK(r[1].sequence == "GG");

  std::istringstream headerless("MKV\n");
  CHECK_THROWS_WITH_AS(parse_fasta(headerless),
                       "FASTA: sequence data before any header at line 1", ParseError);
}

TEST_CASE("parse_fasta header id stops at whitespace, blank lines skipped") {
  std::istringstream in(">sp|P1 some description\n\nAC\nDE\n");
  auto r = parse_fasta(in);
  REQUIRE(r.size() == 1);
  CHECK(r[0].id == "sp|P1");
  CHECK(r[0].sequence == "ACDE");
}

TEST_CASE("tokenize canonical, case and errors") {
  auto t = tokenize("ACD");
  CHECK(t.residues == std::vector<int>{0, 1, 2});
  CHECK(tokenize("acd").residues == std::vector<int>{0, 1, 2});

  try {
    tokenize("ACX");
    FAIL("expected NonCanonicalError");
  } catch (const NonCanonicalError& e) {
    CHECK(e.letter == 'X');
    CHECK(e.position == 2);
  }
  CHECK_THROWS_AS(tokenize(""), ParseError);
  // Selenocysteine/pyrrolysine count as non-canonical here.
  CHECK_THROWS_AS(tokenize("MUK"), NonCanonicalError);
  CHECK_THROWS_AS(tokenize("MOK"), NonCanonicalError);
}

TEST_CASE("tokenize round trip uppercases") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s;
    const auto n = 1 + rng.index(60);
    for (std::uint64_t i = 0; i < n; ++i) {
      char c = Vocab::letters()[rng.index(20)];
      if (rng.uniform() < 0.5) c = static_cast<char>(std::tolower(c));
      s += c;
    }
    std::string upper = s;
    for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    CHECK(detokenize(tokenize(s)) == upper);
  }
}

TEST_CASE("filter_dataset length and alphabet rules") {
  std::vector<FastaRecord> recs;
  recs.push_back({"ok254", std::string(254, 'A')});
  recs.push_back({"too_long", std::string(255, 'A')});
  recs.push_back({"noncanon", "MKXV"});
  recs.push_back({"ok", "MKV"});
  auto [kept, dropped] = filter_dataset(recs);
  REQUIRE(kept.size() == 2);
  CHECK(dropped == 2);
  CHECK(kept[0].id == "ok254");
  CHECK(kept[1].id == "ok");

  // Idempotence: a second pass drops nothing.
  std::vector<FastaRecord> again;
  for (const auto& k : kept) again.push_back({k.id, detokenize(k)});
  auto [kept2, dropped2] = filter_dataset(again);
  CHECK(kept2.size() == kept.size());
  CHECK(dropped2 == 0);
}

TEST_CASE("pad_batch layout and masks") {
  auto batch = pad_batch({tokenize("MK")});
  CHECK(batch.rows == 1);
  CHECK(batch.padded_len == 256);
  CHECK(batch.token(0, 0) == Vocab::kBos);
  CHECK(batch.token(0, 1) == tokenize("M").residues[0]);
  CHECK(batch.token(0, 2) == tokenize("K").residues[0]);
  CHECK(batch.token(0, 3) == Vocab::kEos);
  for (std::int64_t p = 4; p < 256; ++p) CHECK(batch.token(0, p) == Vocab::kPad);
  CHECK(batch.residue_count() == 2);
  CHECK(batch.attend_mask[0] == 1);
  CHECK(batch.attend_mask[3] == 1);
  CHECK(batch.attend_mask[4] == 0);
  CHECK(batch.residue_mask[0] == 0);
  CHECK(batch.residue_mask[3] == 0);
}

TEST_CASE("pad_batch full-length and boundary cases") {
  auto full = pad_batch({tokenize(std::string(254, 'G'))});
  CHECK(full.residue_count() == 254);
  // No PAD slots remain.
  for (std::int64_t p = 0; p < 256; ++p) CHECK(full.attend_mask[p] == 1);

  CHECK_THROWS_AS(pad_batch({tokenize(std::string(255, 'G'))}), ShapeError);

  auto empty = pad_batch({});
  CHECK(empty.rows == 0);
  CHECK(empty.padded_len == 256);
  CHECK(empty.tokens.empty());
}

TEST_CASE("pad_batch mask sum equals total residue count") {
  Rng rng(9);
  std::vector<TokenSequence> seqs;
  std::int64_t total = 0;
  for (int i = 0; i < 8; ++i) {
    std::string s;
    const auto n = 1 + rng.index(40);
    total += static_cast<std::int64_t>(n);
    for (std::uint64_t j = 0; j < n; ++j) s += Vocab::letters()[rng.index(20)];
    seqs.push_back(tokenize(s));
  }
  auto batch = pad_batch(seqs, 64);
  CHECK(batch.residue_count() == total);
  // Tokens under the residue mask stay in residue range; specials outside it.
  for (std::int64_t r = 0; r < batch.rows; ++r)
    for (std::int64_t p = 0; p < batch.padded_len; ++p) {
      const int tok = batch.token(r, p);
      if (batch.residue_mask[r * batch.padded_len + p])
        CHECK((tok >= 0 && tok < Vocab::kNumResidues));
      else
        CHECK(tok >= Vocab::kNumResidues);
    }
}
