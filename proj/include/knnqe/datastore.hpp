#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnqe/interchange.hpp"

namespace knnqe {

namespace fs = std::filesystem;

// One datastore entry: the decoder state that produced `token_id` at
// `position` of training sentence `sentence_idx`.
struct TokenRecord {
  std::uint64_t vec_row = 0;
  std::uint32_t token_id = 0;
  std::uint64_t sentence_idx = 0;
  std::uint32_t position = 0;

  friend bool operator==(const TokenRecord&, const TokenRecord&) = default;
};

inline constexpr std::size_t kTokenRecordBytes = 24;
inline constexpr int kDatastoreFormatVersion = 1;

struct SentenceRecord {
  std::string sentence_id;
  std::string target_text;
  std::uint64_t embedding_row = 0;
  std::uint32_t token_count = 0;

  friend bool operator==(const SentenceRecord&, const SentenceRecord&) = default;
};

struct TokenView {
  std::span<const float> vector;
  std::uint32_t token_id;
  std::uint64_t sentence_idx;
  std::uint32_t position;
};

struct BuildOptions {
  // Test-side manifests are refused unless this is set (self-retrieval runs).
  bool allow_test_side = false;
  // Name of the manifest the store came from, recorded in meta.json.
  std::string source_name;
};

struct Provenance {
  std::string source;
  double fraction = 1.0;
  std::optional<std::uint64_t> seed;
};

// Immutable token datastore. Copies share the underlying buffers.
class Datastore {
 public:
  // Builds from a loaded, validated bundle and writes the directory `out`
  // (vectors.kqe, entries.kqe, sentences.jsonl, meta.json and, when the
  // bundle has sentence embeddings, embeddings.kqe).
  static Datastore build(const interchange::Bundle& bundle, const fs::path& out,
                         const BuildOptions& options = {});

  // Builds in memory only.
  static Datastore from_bundle(const interchange::Bundle& bundle, const BuildOptions& options = {});

  static Datastore open(const fs::path& dir);

  void save(const fs::path& dir) const;

  // Keeps round(fraction * sentence_count) sentences (at least one), chosen as
  // the prefix of a seeded permutation, so larger fractions contain smaller ones.
  Datastore sample(double fraction, std::uint64_t seed) const;

  std::uint32_t dim() const { return vectors_->dim(); }
  std::uint64_t token_count() const { return entries_->size(); }
  std::uint64_t sentence_count() const { return sentences_->size(); }

  TokenView get_token(std::uint64_t idx) const;
  const SentenceRecord& get_sentence(std::uint64_t sentence_idx) const;

  std::span<const float> vector(std::uint64_t idx) const { return vectors_->row((*entries_)[idx].vec_row); }
  const TokenRecord& entry(std::uint64_t idx) const { return (*entries_)[idx]; }
  std::span<const TokenRecord> entries() const { return *entries_; }
  std::span<const SentenceRecord> sentences() const { return *sentences_; }
  const interchange::Tensor& vectors() const { return *vectors_; }
  const interchange::Tensor* embeddings() const { return embeddings_.get(); }
  const Provenance& provenance() const { return provenance_; }

 private:
  Datastore() = default;

  std::shared_ptr<const interchange::Tensor> vectors_;
  std::shared_ptr<const std::vector<TokenRecord>> entries_;
  std::shared_ptr<const std::vector<SentenceRecord>> sentences_;
  std::shared_ptr<const interchange::Tensor> embeddings_;
  Provenance provenance_;
};

// Number of sentences sample() keeps out of `count`.
std::uint64_t sample_size(double fraction, std::uint64_t count);

// Entry table codec, exposed for format tests.
std::vector<char> encode_entries(std::span<const TokenRecord> entries);
std::vector<TokenRecord> decode_entries(std::span<const char> bytes);

}  // namespace knnqe
