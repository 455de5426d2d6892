#pragma once

// On-disk formats shared by every module: the KQE1 tensor file, the JSONL
// sentence manifest and TSV score tables. Other modules touch the disk only
// through the functions declared here.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnqe/polarity.hpp"

namespace knnqe::interchange {

namespace fs = std::filesystem;

inline constexpr char kTensorMagic[4] = {'K', 'Q', 'E', '1'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 1;
inline constexpr std::size_t kTensorHeaderSize = 19;

// Relative paths are resolved against $KNNQE_DATA_DIR when it is set.
fs::path resolve_input_path(const fs::path& path);

struct TensorHeader {
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
};

// Row-major float32 matrix. Owns its payload; rows are 4-byte aligned.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::uint32_t dim, std::uint64_t count);
  Tensor(std::uint32_t dim, std::vector<float> values);

  std::uint32_t dim() const { return dim_; }
  std::uint64_t count() const { return count_; }
  bool empty() const { return count_ == 0; }

  std::span<const float> row(std::uint64_t i) const {
    return {values_.data() + i * dim_, dim_};
  }
  std::span<float> row(std::uint64_t i) { return {values_.data() + i * dim_, dim_}; }
  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::uint32_t dim_ = 0;
  std::uint64_t count_ = 0;
  std::vector<float> values_;
};

// Parses and checks only the 19-byte header plus the file size.
// Throws IoError when unreadable, ValidationError when malformed.
TensorHeader read_tensor_header(const fs::path& path);

// Full read with every invariant checked (size, dim > 0, finite payload).
Tensor read_tensor(const fs::path& path);

void write_tensor(const fs::path& path, const Tensor& tensor);

// Serialises into a caller-owned byte buffer; used for composite files.
std::vector<char> encode_tensor(const Tensor& tensor);
// Decodes a tensor from the front of `bytes`; returns bytes consumed.
std::size_t decode_tensor(std::span<const char> bytes, Tensor& out, const std::string& what);

enum class Side { kTrain, kTest };

struct ManifestEntry {
  std::string sentence_id;
  Side side = Side::kTrain;
  std::string source_text;
  std::string target_text;
  std::vector<std::int64_t> token_ids;
  std::optional<std::vector<double>> token_probs;
  std::uint64_t vec_row_start = 0;
  std::uint64_t embedding_row = 0;
  std::optional<std::string> system;
  std::optional<std::string> domain;
};

// Throws ValidationError naming the line for malformed JSON or missing fields.
std::vector<ManifestEntry> read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, std::span<const ManifestEntry> entries);

struct Violation {
  std::string code;     // stable short tag, e.g. "row count mismatch"
  std::string message;  // human-readable detail
};

using ValidationReport = std::vector<Violation>;

// Checks a manifest against its token-vector tensor and, optionally, the
// sentence-embedding tensor. Content problems are returned as violations;
// unreadable files throw IoError.
ValidationReport validate_bundle(const fs::path& manifest_path,
                                 std::span<const fs::path> tensor_paths);

// Same checks on already-loaded data.
ValidationReport validate_entries(std::span<const ManifestEntry> entries,
                                  const TensorHeader& vectors,
                                  const std::optional<TensorHeader>& embeddings);

struct Bundle {
  std::vector<ManifestEntry> sentences;
  Tensor vectors;
  std::optional<Tensor> embeddings;

  // Rows attributed to sentence i.
  std::uint64_t row_end(std::size_t i) const;
};

// Validates, then loads. Any violation throws ValidationError listing them.
Bundle load_bundle(const fs::path& manifest_path, const fs::path& vectors_path,
                   const std::optional<fs::path>& embeddings_path = std::nullopt);

std::string format_violations(const ValidationReport& report);

// ---- Score tables -------------------------------------------------------

struct SegmentKey {
  std::string system;
  std::string domain;
  std::string seg_id;

  friend auto operator<=>(const SegmentKey&, const SegmentKey&) = default;
  friend bool operator==(const SegmentKey&, const SegmentKey&) = default;
};

std::string to_string(const SegmentKey& key);

// One metric's scores; the name comes from the table's file stem.
struct ScoreFragment {
  std::string name;
  Polarity polarity = Polarity::kHigherIsBetter;
  std::map<SegmentKey, double> scores;
};

ScoreFragment read_score_table(const fs::path& path);
void write_score_table(const fs::path& path, const ScoreFragment& fragment);

struct DroppedKeys {
  std::string table;
  std::vector<SegmentKey> keys;
};

// Aligned score columns. Rows are sorted by key, so the row set and order do
// not depend on the order of the input tables.
struct ScoreMatrix {
  std::vector<SegmentKey> keys;
  std::vector<std::string> names;
  std::vector<Polarity> polarity;
  std::vector<std::vector<double>> columns;
  std::vector<DroppedKeys> dropped;

  std::size_t rows() const { return keys.size(); }
  // Throws InvalidArgument for an unknown column name.
  std::size_t column_index(const std::string& name) const;
  std::span<const double> column(const std::string& name) const {
    return columns[column_index(name)];
  }
  bool has_column(const std::string& name) const;

  // Sub-matrix restricted to the given rows (indices into keys).
  ScoreMatrix select_rows(std::span<const std::size_t> rows) const;
};

// Inner join on (system, domain, seg_id). Needs at least two tables.
ScoreMatrix align_tables(std::span<const ScoreFragment> tables);

// Shortest round-trip decimal formatting used by every TSV writer.
std::string format_double(double value);

}  // namespace knnqe::interchange
