#include "knnqe/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "knnqe/error.hpp"
#include "knnqe/random.hpp"
#include "mapped_file.hpp"

namespace knnqe {

using nlohmann::json;

namespace {


void store_u64(char* p, std::uint64_t v) { std::memcpy(p, &v, 8); }
void store_u32(char* p, std::uint32_t v) { std::memcpy(p, &v, 4); }
std::uint64_t load_u64(const char* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return v;
}
std::uint32_t load_u32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}

std::string sentences_jsonl(std::span<const SentenceRecord> sentences) {
  std::string out;
  for (const auto& s : sentences) {
    json obj = {{"sentence_id", s.sentence_id},
                {"target_text", s.target_text},
                {"embedding_row", s.embedding_row},
                {"token_count", s.token_count}};
    out += obj.dump();
    out += '\n';
  }
  return out;
}

std::string read_text(const fs::path& path) {
  detail::MappedFile file(path);
  return std::string(file.bytes().data(), file.size());
}

}  // namespace

std::vector<char> encode_entries(std::span<const TokenRecord> entries) {
  std::vector<char> bytes(entries.size() * kTokenRecordBytes);
  char* p = bytes.data();
  for (const auto& e : entries) {
    store_u64(p, e.vec_row);
    store_u32(p + 8, e.token_id);
    store_u64(p + 12, e.sentence_idx);
    store_u32(p + 20, e.position);
    p += kTokenRecordBytes;
  }
  return bytes;
}

std::vector<TokenRecord> decode_entries(std::span<const char> bytes) {
  if (bytes.size() % kTokenRecordBytes != 0) {
    throw ValidationError("entry table size " + std::to_string(bytes.size()) +
                          " is not a multiple of " + std::to_string(kTokenRecordBytes));
  }
  std::vector<TokenRecord> entries(bytes.size() / kTokenRecordBytes);
  const char* p = bytes.data();
  for (auto& e : entries) {
    e.vec_row = load_u64(p);
    e.token_id = load_u32(p + 8);
    e.sentence_idx = load_u64(p + 12);
    e.position = load_u32(p + 20);
    p += kTokenRecordBytes;
  }
  return entries;
}

std::uint64_t sample_size(double fraction, std::uint64_t count) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw InvalidArgument("sample fraction must be in (0, 1], got " + interchange::format_double(fraction));
  }
  const auto n = static_cast<std::uint64_t>(std::llround(fraction * static_cast<double>(count)));
  return std::clamp<std::uint64_t>(n, 1, count);
}

Datastore Datastore::from_bundle(const interchange::Bundle& bundle, const BuildOptions& options) {
  if (bundle.sentences.empty() || bundle.vectors.count() == 0) {
    throw DataError("empty datastore refused");
  }
  std::optional<interchange::TensorHeader> emb;
  if (bundle.embeddings) emb = interchange::TensorHeader{bundle.embeddings->dim(), bundle.embeddings->count()};
  const auto report = interchange::validate_entries(
      bundle.sentences, {bundle.vectors.dim(), bundle.vectors.count()}, emb);
  if (!report.empty()) {
    throw ValidationError("cannot build datastore:\n" + interchange::format_violations(report));
  }

  auto entries = std::make_shared<std::vector<TokenRecord>>();
  auto sentences = std::make_shared<std::vector<SentenceRecord>>();
  entries->reserve(bundle.vectors.count());
  sentences->reserve(bundle.sentences.size());
  for (std::size_t s = 0; s < bundle.sentences.size(); ++s) {
    const auto& line = bundle.sentences[s];
    if (line.side != interchange::Side::kTrain && !options.allow_test_side) {
      throw ValidationError("sentence '" + line.sentence_id +
                            "' is test-side; datastores are built from training data");
    }
    if (line.token_ids.size() > UINT32_MAX) throw ValidationError("sentence too long: " + line.sentence_id);
    sentences->push_back({line.sentence_id, line.target_text, line.embedding_row,
                          static_cast<std::uint32_t>(line.token_ids.size())});
    for (std::size_t i = 0; i < line.token_ids.size(); ++i) {
      entries->push_back({line.vec_row_start + i, static_cast<std::uint32_t>(line.token_ids[i]), s,
                          static_cast<std::uint32_t>(i)});
    }
  }

  Datastore store;
  store.vectors_ = std::make_shared<const interchange::Tensor>(bundle.vectors);
  store.entries_ = std::move(entries);
  store.sentences_ = std::move(sentences);
  if (bundle.embeddings) store.embeddings_ = std::make_shared<const interchange::Tensor>(*bundle.embeddings);
  store.provenance_.source = options.source_name;
  return store;
}

Datastore Datastore::build(const interchange::Bundle& bundle, const fs::path& out, const BuildOptions& options) {
  Datastore store = from_bundle(bundle, options);
  store.save(out);
  return store;
}

void Datastore::save(const fs::path& dir) const {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

  interchange::write_tensor(dir / "vectors.kqe", *vectors_);
  detail::write_file(dir / "entries.kqe", encode_entries(*entries_));
  detail::write_file(dir / "sentences.jsonl", sentences_jsonl(*sentences_));
  if (embeddings_) {
    interchange::write_tensor(dir / "embeddings.kqe", *embeddings_);
  } else {
    fs::remove(dir / "embeddings.kqe", ec);
  }

  json provenance = {{"source", provenance_.source}, {"fraction", provenance_.fraction}};
  provenance["seed"] = provenance_.seed ? json(*provenance_.seed) : json(nullptr);
  json meta = {{"format_version", kDatastoreFormatVersion},
               {"dim", dim()},
               {"token_count", token_count()},
               {"sentence_count", sentence_count()},
               {"has_embeddings", embeddings_ != nullptr},
               {"provenance", provenance}};
  detail::write_file(dir / "meta.json", meta.dump(2) + "\n");
}

Datastore Datastore::open(const fs::path& input_dir) {
  const fs::path dir = interchange::resolve_input_path(input_dir);
  if (!fs::is_directory(dir)) throw IoError("datastore directory not found: " + dir.string());

  json meta;
  try {
    meta = json::parse(read_text(dir / "meta.json"));
  } catch (const json::exception& e) {
    throw ValidationError(dir.string() + "/meta.json: " + e.what());
  }

  Datastore store;
  store.vectors_ = std::make_shared<const interchange::Tensor>(interchange::read_tensor(dir / "vectors.kqe"));
  {
    detail::MappedFile file(dir / "entries.kqe");
    store.entries_ = std::make_shared<const std::vector<TokenRecord>>(decode_entries(file.bytes()));
  }
  auto sentences = std::make_shared<std::vector<SentenceRecord>>();
  {
    std::istringstream in(read_text(dir / "sentences.jsonl"));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        const json obj = json::parse(line);
        sentences->push_back({obj.at("sentence_id").get<std::string>(), obj.at("target_text").get<std::string>(),
                              obj.at("embedding_row").get<std::uint64_t>(),
                              obj.at("token_count").get<std::uint32_t>()});
      } catch (const json::exception& e) {
        throw ValidationError(dir.string() + "/sentences.jsonl line " + std::to_string(line_no) + ": " + e.what());
      }
    }
  }
  store.sentences_ = std::move(sentences);
  if (fs::exists(dir / "embeddings.kqe")) {
    store.embeddings_ =
        std::make_shared<const interchange::Tensor>(interchange::read_tensor(dir / "embeddings.kqe"));
  }

  try {
    const auto& prov = meta.at("provenance");
    store.provenance_.source = prov.value("source", std::string{});
    store.provenance_.fraction = prov.value("fraction", 1.0);
    if (prov.contains("seed") && !prov["seed"].is_null()) store.provenance_.seed = prov["seed"].get<std::uint64_t>();
    if (meta.at("token_count").get<std::uint64_t>() != store.token_count() ||
        meta.at("sentence_count").get<std::uint64_t>() != store.sentence_count() ||
        meta.at("dim").get<std::uint32_t>() != store.dim()) {
      throw ValidationError(dir.string() + ": meta.json counts disagree with the stored tables");
    }
  } catch (const json::exception& e) {
    throw ValidationError(dir.string() + "/meta.json: " + e.what());
  }

  for (const auto& e : *store.entries_) {
    if (e.vec_row >= store.vectors_->count() || e.sentence_idx >= store.sentences_->size() ||
        e.position >= (*store.sentences_)[e.sentence_idx].token_count) {
      throw ValidationError(dir.string() + ": entry table references rows or sentences that do not exist");
    }
  }
  if (store.entries_->empty()) throw DataError("empty datastore refused");
  return store;
}

Datastore Datastore::sample(double fraction, std::uint64_t seed) const {
  const std::uint64_t n_sent = sentence_count();
  const std::uint64_t keep_n = sample_size(fraction, n_sent);

  SeededRng rng(seed);
  std::vector<std::uint64_t> order = rng.permutation(n_sent);
  order.resize(keep_n);
  std::sort(order.begin(), order.end());

  // Entries are grouped by sentence in build order; locate each sentence's run.
  std::vector<std::uint64_t> first_entry(n_sent + 1, 0);
  for (const auto& e : *entries_) ++first_entry[e.sentence_idx + 1];
  for (std::uint64_t s = 0; s < n_sent; ++s) first_entry[s + 1] += first_entry[s];

  std::uint64_t kept_tokens = 0;
  for (auto s : order) kept_tokens += first_entry[s + 1] - first_entry[s];

  interchange::Tensor vecs(dim(), kept_tokens);
  auto entries = std::make_shared<std::vector<TokenRecord>>();
  auto sentences = std::make_shared<std::vector<SentenceRecord>>();
  entries->reserve(kept_tokens);
  sentences->reserve(keep_n);

  std::uint64_t row = 0;
  for (std::uint64_t new_idx = 0; new_idx < keep_n; ++new_idx) {
    const std::uint64_t s = order[new_idx];
    sentences->push_back((*sentences_)[s]);
    for (std::uint64_t i = first_entry[s]; i < first_entry[s + 1]; ++i) {
      const TokenRecord& src = (*entries_)[i];
      const auto v = vectors_->row(src.vec_row);
      std::copy(v.begin(), v.end(), vecs.row(row).begin());
      entries->push_back({row, src.token_id, new_idx, src.position});
      ++row;
    }
  }

  Datastore out;
  out.vectors_ = std::make_shared<const interchange::Tensor>(std::move(vecs));
  out.entries_ = std::move(entries);
  out.sentences_ = std::move(sentences);
  out.embeddings_ = embeddings_;
  out.provenance_ = provenance_;
  out.provenance_.fraction = provenance_.fraction * fraction;
  out.provenance_.seed = seed;
  return out;
}

TokenView Datastore::get_token(std::uint64_t idx) const {
  if (idx >= token_count()) {
    throw InvalidArgument("token index " + std::to_string(idx) + " out of range (token_count " +
                          std::to_string(token_count()) + ")");
  }
  const TokenRecord& e = (*entries_)[idx];
  return {vectors_->row(e.vec_row), e.token_id, e.sentence_idx, e.position};
}

const SentenceRecord& Datastore::get_sentence(std::uint64_t sentence_idx) const {
  if (sentence_idx >= sentence_count()) {
    throw InvalidArgument("sentence index " + std::to_string(sentence_idx) + " out of range (sentence_count " +
                          std::to_string(sentence_count()) + ")");
  }
  return (*sentences_)[sentence_idx];
}

}  // namespace knnqe
