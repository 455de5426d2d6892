#include <gtest/gtest.h>

#include <cstdlib>
#include <cstring>
#include <fstream>

#include "fixtures.hpp"
#include "knnqe/error.hpp"
#include "knnqe/interchange.hpp"
#include "knnqe/random.hpp"

namespace knnqe {
namespace {

using namespace interchange;
using testing::TempDir;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Two sentences with 3 and 4 tokens, dim 8.
Bundle seven_token_bundle() {
  SeededRng rng(3);
  Bundle b;
  ManifestEntry a;
  a.sentence_id = "a";
  a.source_text = "src a";
  a.target_text = "tgt a";
  a.token_ids = {5, 6, 7};
  a.vec_row_start = 0;
  a.embedding_row = 0;
  ManifestEntry c = a;
  c.sentence_id = "b";
  c.token_ids = {1, 2, 3, 4};
  c.vec_row_start = 3;
  c.embedding_row = 1;
  b.sentences = {a, c};
  b.vectors = testing::gaussian_tensor(rng, 8, 7);
  return b;
}

bool has_code(const ValidationReport& r, const std::string& code) {
  for (const auto& v : r) {
    if (v.code == code) return true;
  }
  return false;
}

TEST(Tensor, HeaderLayoutIsLittleEndianAndNineteenBytes) {
  TempDir dir;
  Tensor t(3, std::vector<float>{1, 2, 3, 4, 5, 6});
  write_tensor(dir / "t.kqe", t);
  const std::string bytes = slurp(dir / "t.kqe");
  ASSERT_EQ(bytes.size(), 19u + 6 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "KQE1");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 1);
  EXPECT_EQ(bytes[7], 3);
  EXPECT_EQ(bytes[11], 2);
  const auto h = read_tensor_header(dir / "t.kqe");
  EXPECT_EQ(h.dim, 3u);
  EXPECT_EQ(h.count, 2u);
}

TEST(Tensor, RoundTripIsByteIdentical) {
  TempDir dir;
  SeededRng rng(1);
  write_tensor(dir / "a.kqe", testing::gaussian_tensor(rng, 5, 11));
  const Tensor back = read_tensor(dir / "a.kqe");
  write_tensor(dir / "b.kqe", back);
  EXPECT_EQ(slurp(dir / "a.kqe"), slurp(dir / "b.kqe"));
}

TEST(Tensor, RejectsTruncatedBadMagicZeroDimAndNonFinite) {
  TempDir dir;
  Tensor t(2, std::vector<float>{1, 2, 3, 4});
  write_tensor(dir / "ok.kqe", t);
  const std::string good = slurp(dir / "ok.kqe");

  spit(dir / "short.kqe", good.substr(0, good.size() - 1));
  EXPECT_THROW(read_tensor(dir / "short.kqe"), ValidationError);

  std::string magic = good;
  magic[0] = 'X';
  spit(dir / "magic.kqe", magic);
  EXPECT_THROW(read_tensor(dir / "magic.kqe"), ValidationError);

  std::string zero = good;
  zero[7] = zero[8] = zero[9] = zero[10] = 0;
  spit(dir / "zero.kqe", zero);
  EXPECT_THROW(read_tensor(dir / "zero.kqe"), ValidationError);

  std::string nan = good;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + 19, &q, 4);
  spit(dir / "nan.kqe", nan);
  EXPECT_THROW(read_tensor(dir / "nan.kqe"), ValidationError);
}

TEST(Tensor, MissingFileIsIoErrorNotValidation) {
  TempDir dir;
  EXPECT_THROW(read_tensor(dir / "absent.kqe"), IoError);
}

TEST(Tensor, DiskFullIsDistinct) {
  if (!fs::exists("/dev/full")) GTEST_SKIP() << "/dev/full not available";
  Tensor t(2, std::vector<float>{1, 2});
  EXPECT_THROW(write_tensor("/dev/full", t), DiskFull);
}

TEST(Manifest, RoundTripKeepsOptionalFields) {
  TempDir dir;
  auto b = seven_token_bundle();
  b.sentences[0].side = Side::kTest;
  b.sentences[0].token_probs = std::vector<double>{0.5, 0.25, 1.0};
  b.sentences[1].system = "sysA";
  b.sentences[1].domain = "news";
  write_manifest(dir / "m.jsonl", b.sentences);
  const auto back = read_manifest(dir / "m.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].side, Side::kTest);
  EXPECT_EQ(*back[0].token_probs, (std::vector<double>{0.5, 0.25, 1.0}));
  EXPECT_EQ(*back[1].system, "sysA");
  EXPECT_EQ(*back[1].domain, "news");
  EXPECT_FALSE(back[0].system.has_value());
  EXPECT_EQ(back[1].token_ids, (std::vector<std::int64_t>{1, 2, 3, 4}));
}

TEST(Manifest, MalformedLineIsNamed) {
  TempDir dir;
  spit(dir / "m.jsonl", "{\"sentence_id\": \"a\"}\n");
  try {
    read_manifest(dir / "m.jsonl");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos) << e.what();
  }
}

TEST(ValidateBundle, WellFormedBundleHasNoViolations) {
  TempDir dir;
  const auto paths = testing::write_bundle(seven_token_bundle(), dir.path(), "b");
  const fs::path tensors[] = {paths.vectors};
  EXPECT_TRUE(validate_bundle(paths.manifest, tensors).empty());
}

TEST(ValidateBundle, RowCountMismatch) {
  TempDir dir;
  auto b = seven_token_bundle();
  b.sentences[1].token_ids.push_back(9);  // manifest now attributes 8 rows
  const auto paths = testing::write_bundle(b, dir.path(), "b");
  const fs::path tensors[] = {paths.vectors};
  EXPECT_TRUE(has_code(validate_bundle(paths.manifest, tensors), "row count mismatch"));
}

TEST(ValidateBundle, ProbabilityOutOfRange) {
  TempDir dir;
  auto b = seven_token_bundle();
  b.sentences[0].token_probs = std::vector<double>{0.5, 1.5, 0.1};
  const auto paths = testing::write_bundle(b, dir.path(), "b");
  const fs::path tensors[] = {paths.vectors};
  EXPECT_TRUE(has_code(validate_bundle(paths.manifest, tensors), "probability out of range"));
}

TEST(ValidateBundle, OtherViolations) {
  auto b = seven_token_bundle();
  const TensorHeader h{8, 7};
  {
    auto x = b.sentences;
    x[1].sentence_id = "a";
    EXPECT_TRUE(has_code(validate_entries(x, h, std::nullopt), "duplicate sentence_id"));
  }
  {
    auto x = b.sentences;
    x[0].token_probs = std::vector<double>{0.5};
    EXPECT_TRUE(has_code(validate_entries(x, h, std::nullopt), "probability length mismatch"));
  }
  {
    auto x = b.sentences;
    x[1].vec_row_start = 0;
    EXPECT_TRUE(has_code(validate_entries(x, h, std::nullopt), "vec_row_start not increasing"));
  }
  {
    auto x = b.sentences;
    x[1].embedding_row = 5;
    EXPECT_TRUE(has_code(validate_entries(x, h, TensorHeader{4, 2}), "embedding row out of range"));
  }
  {
    auto x = b.sentences;
    x[0].token_ids[0] = -1;
    EXPECT_TRUE(has_code(validate_entries(x, h, std::nullopt), "token id out of range"));
  }
}

TEST(ValidateBundle, TruncatedTensorIsAViolationAndMissingFileThrows) {
  TempDir dir;
  const auto paths = testing::write_bundle(seven_token_bundle(), dir.path(), "b");
  const std::string bytes = slurp(paths.vectors);
  spit(paths.vectors, bytes.substr(0, bytes.size() - 4));
  const fs::path tensors[] = {paths.vectors};
  EXPECT_FALSE(validate_bundle(paths.manifest, tensors).empty());
  const fs::path missing[] = {dir / "nope.kqe"};
  EXPECT_THROW(validate_bundle(paths.manifest, missing), IoError);
}

TEST(ValidateBundle, LoadBundleThrowsOnViolations) {
  TempDir dir;
  auto b = seven_token_bundle();
  b.sentences[1].token_ids.push_back(9);
  const auto paths = testing::write_bundle(b, dir.path(), "b");
  EXPECT_THROW(load_bundle(paths.manifest, paths.vectors), ValidationError);
}

TEST(ScoreTable, ReadsThreeRows) {
  TempDir dir;
  spit(dir / "bleu.tsv", "system\tdomain\tseg_id\tscore\nA\tnews\t1\t0.5\nA\tnews\t2\t0.25\nB\tnews\t1\t1e-3\n");
  const auto f = read_score_table(dir / "bleu.tsv");
  EXPECT_EQ(f.name, "bleu");
  ASSERT_EQ(f.scores.size(), 3u);
  EXPECT_EQ(f.scores.at({"B", "news", "1"}), 1e-3);
}

TEST(ScoreTable, ExtraColumnsAnyOrder) {
  TempDir dir;
  spit(dir / "x.tsv", "score\tnote\tseg_id\tdomain\tsystem\n0.5\thi\tq7\tted\tS\n");
  const auto f = read_score_table(dir / "x.tsv");
  EXPECT_EQ(f.scores.at({"S", "ted", "q7"}), 0.5);
}

TEST(ScoreTable, DuplicateKeyIsAnError) {
  TempDir dir;
  spit(dir / "x.tsv", "system\tdomain\tseg_id\tscore\nsysA\tnews\t7\t1\nsysA\tnews\t7\t2\n");
  EXPECT_THROW(read_score_table(dir / "x.tsv"), ValidationError);
}

TEST(ScoreTable, NonNumericScoreNamesTheRow) {
  TempDir dir;
  spit(dir / "x.tsv", "system\tdomain\tseg_id\tscore\nA\tn\t1\t0.1\nA\tn\t2\tabc\n");
  try {
    read_score_table(dir / "x.tsv");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos) << e.what();
  }
}

TEST(ScoreTable, NanAndMissingColumnRejected) {
  TempDir dir;
  spit(dir / "x.tsv", "system\tdomain\tseg_id\tscore\nA\tn\t1\tnan\n");
  EXPECT_THROW(read_score_table(dir / "x.tsv"), ValidationError);
  spit(dir / "y.tsv", "system\tseg_id\tscore\nA\t1\t0.3\n");
  EXPECT_THROW(read_score_table(dir / "y.tsv"), ValidationError);
}

TEST(ScoreTable, WriteReadRoundTripIsExact) {
  TempDir dir;
  ScoreFragment f{"m", Polarity::kHigherIsBetter, {}};
  SeededRng rng(2);
  for (int i = 0; i < 50; ++i) f.scores[{"s", "d", std::to_string(i)}] = rng.uniform() * 1e3 - 500;
  write_score_table(dir / "m.tsv", f);
  EXPECT_EQ(read_score_table(dir / "m.tsv").scores, f.scores);
}

ScoreFragment fragment(const std::string& name, int from, int to) {
  ScoreFragment f{name, Polarity::kHigherIsBetter, {}};
  for (int i = from; i < to; ++i) f.scores[{"sys", "news", std::to_string(i)}] = i;
  return f;
}

TEST(AlignTables, SameKeysNothingDropped) {
  const ScoreFragment t[] = {fragment("h", 0, 100), fragment("rb", 0, 100)};
  const auto m = align_tables(t);
  EXPECT_EQ(m.rows(), 100u);
  for (const auto& d : m.dropped) EXPECT_TRUE(d.keys.empty());
}

TEST(AlignTables, SubsetDropsFromTheLargerTable) {
  const ScoreFragment t[] = {fragment("h", 0, 100), fragment("rb", 10, 100)};
  const auto m = align_tables(t);
  EXPECT_EQ(m.rows(), 90u);
  std::size_t dropped_h = 0, dropped_rb = 0;
  for (const auto& d : m.dropped) (d.table == "h" ? dropped_h : dropped_rb) += d.keys.size();
  EXPECT_EQ(dropped_h, 10u);
  EXPECT_EQ(dropped_rb, 0u);
}

TEST(AlignTables, DisjointKeysAreAnError) {
  const ScoreFragment t[] = {fragment("h", 0, 10), fragment("rb", 10, 20)};
  EXPECT_THROW(align_tables(t), DataError);
}

TEST(AlignTables, NeedsTwoUniquelyNamedTables) {
  const ScoreFragment one[] = {fragment("h", 0, 10)};
  EXPECT_THROW(align_tables(one), InvalidArgument);
  const ScoreFragment dup[] = {fragment("h", 0, 10), fragment("h", 0, 10)};
  EXPECT_THROW(align_tables(dup), InvalidArgument);
}

TEST(AlignTables, InputOrderChangesOnlyColumnOrder) {
  const ScoreFragment a[] = {fragment("h", 0, 50), fragment("x", 5, 60), fragment("y", 3, 40)};
  const ScoreFragment b[] = {a[2], a[0], a[1]};
  const auto ma = align_tables(a);
  const auto mb = align_tables(b);
  EXPECT_EQ(ma.keys, mb.keys);
  for (const auto& name : {"h", "x", "y"}) {
    const auto ca = ma.column(name);
    const auto cb = mb.column(name);
    EXPECT_TRUE(std::equal(ca.begin(), ca.end(), cb.begin(), cb.end()));
  }
}

TEST(DataDir, RelativePathsResolveAgainstEnvironment) {
  TempDir dir;
  ::setenv("KNNQE_DATA_DIR", dir.path().c_str(), 1);
  EXPECT_EQ(resolve_input_path("x/y.tsv"), dir / "x/y.tsv");
  EXPECT_EQ(resolve_input_path("/abs/y.tsv"), fs::path("/abs/y.tsv"));
  ::unsetenv("KNNQE_DATA_DIR");
  EXPECT_EQ(resolve_input_path("x/y.tsv"), fs::path("x/y.tsv"));
}

}  // namespace
}  // namespace knnqe
