#include "knnqe/interchange.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string_view>
#include <unordered_set>

#include "json.hpp"
#include "knnqe/error.hpp"
#include "mapped_file.hpp"

static_assert(std::endian::native == std::endian::little,
              "the KQE1 payload is read with memcpy and assumes a little-endian host");

namespace knnqe::interchange {

using nlohmann::json;

fs::path resolve_input_path(const fs::path& path) {
  if (path.is_absolute()) return path;
  if (const char* dir = std::getenv("KNNQE_DATA_DIR"); dir != nullptr && *dir != '\0') {
    return fs::absolute(fs::path(dir) / path);
  }
  return path;
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(std::uint32_t dim, std::uint64_t count)
    : dim_(dim), count_(count), values_(static_cast<std::size_t>(dim) * count, 0.0f) {}

Tensor::Tensor(std::uint32_t dim, std::vector<float> values) : dim_(dim), values_(std::move(values)) {
  if (dim == 0) throw InvalidArgument("tensor dim must be positive");
  if (values_.size() % dim != 0) {
    throw InvalidArgument("tensor value count " + std::to_string(values_.size()) +
                          " is not a multiple of dim " + std::to_string(dim));
  }
  count_ = values_.size() / dim;
}

namespace {

template <typename T>
T load_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void store_le(char* p, T v) {
  std::memcpy(p, &v, sizeof(T));
}

// Header fields plus a problem description; empty problem means valid.
struct ParsedHeader {
  TensorHeader header;
  std::string problem;
};

ParsedHeader parse_header(std::span<const char> bytes, bool exact_size) {
  ParsedHeader out;
  if (bytes.size() < kTensorHeaderSize) {
    out.problem = "file shorter than the 19-byte header";
    return out;
  }
  if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
    out.problem = "bad magic (expected KQE1)";
    return out;
  }
  const auto version = load_le<std::uint16_t>(bytes.data() + 4);
  if (version != kTensorVersion) {
    out.problem = "unsupported version " + std::to_string(version);
    return out;
  }
  const auto dtype = static_cast<std::uint8_t>(bytes[6]);
  if (dtype != kDtypeFloat32) {
    out.problem = "unsupported dtype " + std::to_string(dtype);
    return out;
  }
  out.header.dim = load_le<std::uint32_t>(bytes.data() + 7);
  out.header.count = load_le<std::uint64_t>(bytes.data() + 11);
  if (out.header.dim == 0) {
    out.problem = "dim must be positive";
    return out;
  }
  const std::uint64_t payload = static_cast<std::uint64_t>(out.header.dim) * out.header.count * 4;
  if (out.header.count != 0 && payload / out.header.count / 4 != out.header.dim) {
    out.problem = "dim*count overflows";
    return out;
  }
  const std::uint64_t expected = kTensorHeaderSize + payload;
  const bool size_ok = exact_size ? bytes.size() == expected : bytes.size() >= expected;
  if (!size_ok) {
    out.problem = "size mismatch: header implies " + std::to_string(expected) +
                  " bytes, found " + std::to_string(bytes.size());
  }
  return out;
}

// Index of the first non-finite float in the payload, if any.
std::optional<std::uint64_t> first_non_finite(const char* payload, std::uint64_t n) {
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto v = load_le<float>(payload + i * 4);
    if (!std::isfinite(v)) return i;
  }
  return std::nullopt;
}

}  // namespace

TensorHeader read_tensor_header(const fs::path& path) {
  const fs::path resolved = resolve_input_path(path);
  detail::MappedFile file(resolved);
  const ParsedHeader parsed = parse_header(file.bytes(), true);
  if (!parsed.problem.empty()) {
    throw ValidationError(resolved.string() + ": " + parsed.problem);
  }
  return parsed.header;
}

std::size_t decode_tensor(std::span<const char> bytes, Tensor& out, const std::string& what) {
  const ParsedHeader parsed = parse_header(bytes, false);
  if (!parsed.problem.empty()) throw ValidationError(what + ": " + parsed.problem);
  const std::uint64_t n = static_cast<std::uint64_t>(parsed.header.dim) * parsed.header.count;
  const char* payload = bytes.data() + kTensorHeaderSize;
  if (auto bad = first_non_finite(payload, n)) {
    throw ValidationError(what + ": non-finite value at row " +
                          std::to_string(*bad / parsed.header.dim));
  }
  Tensor t(parsed.header.dim, parsed.header.count);
  if (n > 0) std::memcpy(t.values().data(), payload, n * 4);
  out = std::move(t);
  return kTensorHeaderSize + n * 4;
}

Tensor read_tensor(const fs::path& path) {
  const fs::path resolved = resolve_input_path(path);
  detail::MappedFile file(resolved);
  Tensor t;
  const std::size_t used = decode_tensor(file.bytes(), t, resolved.string());
  if (used != file.size()) {
    throw ValidationError(resolved.string() + ": size mismatch: header implies " +
                          std::to_string(used) + " bytes, found " + std::to_string(file.size()));
  }
  return t;
}

std::vector<char> encode_tensor(const Tensor& tensor) {
  if (tensor.dim() == 0) throw InvalidArgument("cannot write a tensor with dim 0");
  for (float v : tensor.values()) {
    if (!std::isfinite(v)) throw InvalidArgument("cannot write a tensor with non-finite values");
  }
  const std::size_t n = tensor.values().size();
  std::vector<char> bytes(kTensorHeaderSize + n * 4);
  std::memcpy(bytes.data(), kTensorMagic, 4);
  store_le<std::uint16_t>(bytes.data() + 4, kTensorVersion);
  bytes[6] = static_cast<char>(kDtypeFloat32);
  store_le<std::uint32_t>(bytes.data() + 7, tensor.dim());
  store_le<std::uint64_t>(bytes.data() + 11, tensor.count());
  if (n > 0) std::memcpy(bytes.data() + kTensorHeaderSize, tensor.values().data(), n * 4);
  return bytes;
}

void write_tensor(const fs::path& path, const Tensor& tensor) {
  detail::write_file(path, encode_tensor(tensor));
}

// ---- Manifest -------------------------------------------------------------

namespace {

std::string side_name(Side s) { return s == Side::kTrain ? "train" : "test"; }

template <typename T>
T require_field(const json& obj, const char* key, std::size_t line_no) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ValidationError("manifest line " + std::to_string(line_no) + ": missing field '" + key + "'");
  }
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ValidationError("manifest line " + std::to_string(line_no) + ": field '" + key +
                          "' has the wrong type");
  }
}

ManifestEntry parse_manifest_line(std::string_view text, std::size_t line_no) {
  json obj;
  try {
    obj = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError("manifest line " + std::to_string(line_no) + ": malformed JSON (" +
                          e.what() + ")");
  }
  if (!obj.is_object()) {
    throw ValidationError("manifest line " + std::to_string(line_no) + ": not a JSON object");
  }
  ManifestEntry e;
  e.sentence_id = require_field<std::string>(obj, "sentence_id", line_no);
  const auto side = require_field<std::string>(obj, "side", line_no);
  if (side == "train") {
    e.side = Side::kTrain;
  } else if (side == "test") {
    e.side = Side::kTest;
  } else {
    throw ValidationError("manifest line " + std::to_string(line_no) + ": side must be train or test");
  }
  e.source_text = require_field<std::string>(obj, "source_text", line_no);
  e.target_text = require_field<std::string>(obj, "target_text", line_no);

  const auto& ids = obj.find("token_ids");
  if (ids == obj.end() || !ids->is_array()) {
    throw ValidationError("manifest line " + std::to_string(line_no) + ": token_ids must be a list");
  }
  e.token_ids.reserve(ids->size());
  for (const auto& v : *ids) {
    if (!v.is_number_integer()) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": token_ids must be integers");
    }
    e.token_ids.push_back(v.get<std::int64_t>());
  }
  if (auto probs = obj.find("token_probs"); probs != obj.end() && !probs->is_null()) {
    if (!probs->is_array()) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": token_probs must be a list");
    }
    std::vector<double> p;
    p.reserve(probs->size());
    for (const auto& v : *probs) {
      if (!v.is_number()) {
        throw ValidationError("manifest line " + std::to_string(line_no) + ": token_probs must be numbers");
      }
      p.push_back(v.get<double>());
    }
    e.token_probs = std::move(p);
  }
  e.vec_row_start = require_field<std::uint64_t>(obj, "vec_row_start", line_no);
  e.embedding_row = require_field<std::uint64_t>(obj, "embedding_row", line_no);
  if (auto s = obj.find("system"); s != obj.end() && s->is_string()) e.system = s->get<std::string>();
  if (auto d = obj.find("domain"); d != obj.end() && d->is_string()) e.domain = d->get<std::string>();
  return e;
}

std::vector<std::string_view> split_lines(std::span<const char> bytes) {
  std::vector<std::string_view> lines;
  std::string_view all(bytes.data(), bytes.size());
  std::size_t pos = 0;
  while (pos < all.size()) {
    std::size_t end = all.find('\n', pos);
    if (end == std::string_view::npos) end = all.size();
    std::string_view line = all.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    pos = end + 1;
  }
  return lines;
}

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t'; });
}

}  // namespace

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  const fs::path resolved = resolve_input_path(path);
  detail::MappedFile file(resolved);
  std::vector<ManifestEntry> entries;
  std::size_t line_no = 0;
  for (std::string_view line : split_lines(file.bytes())) {
    ++line_no;
    if (is_blank(line)) continue;
    entries.push_back(parse_manifest_line(line, line_no));
  }
  return entries;
}

void write_manifest(const fs::path& path, std::span<const ManifestEntry> entries) {
  std::string out;
  for (const auto& e : entries) {
    json obj = json::object();
    obj["sentence_id"] = e.sentence_id;
    obj["side"] = side_name(e.side);
    obj["source_text"] = e.source_text;
    obj["target_text"] = e.target_text;
    obj["token_ids"] = e.token_ids;
    if (e.token_probs) obj["token_probs"] = *e.token_probs;
    obj["vec_row_start"] = e.vec_row_start;
    obj["embedding_row"] = e.embedding_row;
    if (e.system) obj["system"] = *e.system;
    if (e.domain) obj["domain"] = *e.domain;
    out += obj.dump();
    out += '\n';
  }
  detail::write_file(path, out);
}

// ---- Validation -----------------------------------------------------------

ValidationReport validate_entries(std::span<const ManifestEntry> entries, const TensorHeader& vectors,
                                  const std::optional<TensorHeader>& embeddings) {
  ValidationReport report;
  auto add = [&report](std::string code, std::string message) {
    report.push_back({std::move(code), std::move(message)});
  };

  std::unordered_set<std::string> ids;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const std::string where = "sentence '" + e.sentence_id + "' (line " + std::to_string(i + 1) + ")";
    if (!ids.insert(e.sentence_id).second) {
      add("duplicate sentence_id", where + " repeats an earlier sentence_id");
    }
    if (e.token_ids.empty()) {
      add("empty segment", where + " has no tokens");
    }
    if (i == 0 && e.vec_row_start != 0) {
      add("vec_row_start not zero", where + " starts at row " + std::to_string(e.vec_row_start));
    }
    if (i > 0 && e.vec_row_start <= entries[i - 1].vec_row_start) {
      add("vec_row_start not increasing",
          where + " has vec_row_start " + std::to_string(e.vec_row_start) +
              " <= previous " + std::to_string(entries[i - 1].vec_row_start));
    }
    const std::uint64_t end = i + 1 < entries.size() ? entries[i + 1].vec_row_start : vectors.count;
    const std::uint64_t rows = end >= e.vec_row_start ? end - e.vec_row_start : 0;
    if (rows != e.token_ids.size()) {
      add("row count mismatch", where + " has " + std::to_string(e.token_ids.size()) +
                                    " token ids but " + std::to_string(rows) + " tensor rows");
    }
    for (auto id : e.token_ids) {
      if (id < 0 || id > static_cast<std::int64_t>(UINT32_MAX)) {
        add("token id out of range", where + " has token id " + std::to_string(id));
        break;
      }
    }
    if (e.token_probs) {
      if (e.token_probs->size() != e.token_ids.size()) {
        add("probability length mismatch", where + " has " + std::to_string(e.token_probs->size()) +
                                                " probabilities for " +
                                                std::to_string(e.token_ids.size()) + " tokens");
      }
      for (double p : *e.token_probs) {
        if (!(p >= 0.0 && p <= 1.0)) {
          add("probability out of range", where + " has token probability " + format_double(p));
          break;
        }
      }
    }
    if (embeddings && e.embedding_row >= embeddings->count) {
      add("embedding row out of range", where + " points at embedding row " +
                                            std::to_string(e.embedding_row) + " of " +
                                            std::to_string(embeddings->count));
    }
  }
  if (entries.empty() && vectors.count != 0) {
    add("row count mismatch", "manifest is empty but the tensor has " + std::to_string(vectors.count) + " rows");
  }
  return report;
}

namespace {

// Header and payload checks for one tensor file, without copying it.
std::optional<TensorHeader> check_tensor_file(const fs::path& path, ValidationReport& report) {
  detail::MappedFile file(path);
  const ParsedHeader parsed = parse_header(file.bytes(), true);
  if (!parsed.problem.empty()) {
    report.push_back({"bad tensor file", path.string() + ": " + parsed.problem});
    return std::nullopt;
  }
  const std::uint64_t n = static_cast<std::uint64_t>(parsed.header.dim) * parsed.header.count;
  if (auto bad = first_non_finite(file.bytes().data() + kTensorHeaderSize, n)) {
    report.push_back({"non-finite value", path.string() + ": row " + std::to_string(*bad / parsed.header.dim)});
  }
  return parsed.header;
}

}  // namespace

ValidationReport validate_bundle(const fs::path& manifest_path, std::span<const fs::path> tensor_paths) {
  if (tensor_paths.empty() || tensor_paths.size() > 2) {
    throw InvalidArgument("validate_bundle expects the token-vector tensor and optionally an embedding tensor");
  }
  ValidationReport report;
  std::vector<ManifestEntry> entries;
  bool manifest_ok = true;
  try {
    entries = read_manifest(manifest_path);
  } catch (const ValidationError& e) {
    report.push_back({"malformed manifest", e.what()});
    manifest_ok = false;
  }
  std::optional<TensorHeader> vectors = check_tensor_file(resolve_input_path(tensor_paths[0]), report);
  std::optional<TensorHeader> embeddings;
  if (tensor_paths.size() == 2) {
    embeddings = check_tensor_file(resolve_input_path(tensor_paths[1]), report);
  }
  if (manifest_ok && vectors) {
    ValidationReport content = validate_entries(entries, *vectors, embeddings);
    report.insert(report.end(), content.begin(), content.end());
  }
  return report;
}

std::string format_violations(const ValidationReport& report) {
  std::string out;
  for (const auto& v : report) {
    out += v.code;
    out += ": ";
    out += v.message;
    out += '\n';
  }
  return out;
}

std::uint64_t Bundle::row_end(std::size_t i) const {
  return i + 1 < sentences.size() ? sentences[i + 1].vec_row_start : vectors.count();
}

Bundle load_bundle(const fs::path& manifest_path, const fs::path& vectors_path,
                   const std::optional<fs::path>& embeddings_path) {
  std::vector<fs::path> tensors{vectors_path};
  if (embeddings_path) tensors.push_back(*embeddings_path);
  ValidationReport report = validate_bundle(manifest_path, tensors);
  if (!report.empty()) {
    throw ValidationError("invalid bundle " + manifest_path.string() + ":\n" + format_violations(report));
  }
  Bundle b;
  b.sentences = read_manifest(manifest_path);
  b.vectors = read_tensor(vectors_path);
  if (embeddings_path) b.embeddings = read_tensor(*embeddings_path);
  return b;
}

// ---- Score tables ---------------------------------------------------------

std::string to_string(const SegmentKey& key) {
  return "(" + key.system + ", " + key.domain + ", " + key.seg_id + ")";
}

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t end = line.find('\t', pos);
    if (end == std::string_view::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, end - pos));
    pos = end + 1;
  }
  return out;
}

}  // namespace

ScoreFragment read_score_table(const fs::path& path) {
  const fs::path resolved = resolve_input_path(path);
  detail::MappedFile file(resolved);
  const auto lines = split_lines(file.bytes());
  const std::string where = resolved.string();
  if (lines.empty() || is_blank(lines[0])) throw ValidationError(where + ": missing header row");

  const auto header = split_tabs(lines[0]);
  auto find_col = [&](std::string_view name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw ValidationError(where + ": missing required column '" + std::string(name) + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_sys = find_col("system");
  const std::size_t c_dom = find_col("domain");
  const std::size_t c_seg = find_col("seg_id");
  const std::size_t c_score = find_col("score");
  const std::size_t needed = std::max({c_sys, c_dom, c_seg, c_score}) + 1;

  ScoreFragment frag;
  frag.name = resolved.stem().string();
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (is_blank(lines[i])) continue;
    const std::string row = "row " + std::to_string(i + 1);
    const auto cells = split_tabs(lines[i]);
    if (cells.size() < needed) throw ValidationError(where + ": " + row + " has too few columns");
    const std::string_view text = cells[c_score];
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
      throw ValidationError(where + ": " + row + ": score '" + std::string(text) + "' is not a number");
    }
    if (!std::isfinite(value)) {
      throw ValidationError(where + ": " + row + ": score must be finite");
    }
    SegmentKey key{std::string(cells[c_sys]), std::string(cells[c_dom]), std::string(cells[c_seg])};
    auto [it, inserted] = frag.scores.emplace(std::move(key), value);
    if (!inserted) {
      throw ValidationError(where + ": " + row + ": duplicate key " + to_string(it->first));
    }
  }
  return frag;
}

void write_score_table(const fs::path& path, const ScoreFragment& fragment) {
  auto check = [](const std::string& s) {
    if (s.find_first_of("\t\n\r") != std::string::npos) {
      throw InvalidArgument("score table field contains a tab or newline: '" + s + "'");
    }
  };
  std::string out = "system\tdomain\tseg_id\tscore\n";
  for (const auto& [key, score] : fragment.scores) {
    check(key.system);
    check(key.domain);
    check(key.seg_id);
    if (!std::isfinite(score)) {
      throw InvalidArgument("refusing to write non-finite score for " + to_string(key));
    }
    out += key.system + '\t' + key.domain + '\t' + key.seg_id + '\t' + format_double(score) + '\n';
  }
  detail::write_file(path, out);
}

std::size_t ScoreMatrix::column_index(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw InvalidArgument("no score column named '" + name + "'");
  return static_cast<std::size_t>(it - names.begin());
}

bool ScoreMatrix::has_column(const std::string& name) const {
  return std::find(names.begin(), names.end(), name) != names.end();
}

ScoreMatrix ScoreMatrix::select_rows(std::span<const std::size_t> rows) const {
  ScoreMatrix out;
  out.names = names;
  out.polarity = polarity;
  out.columns.resize(columns.size());
  out.keys.reserve(rows.size());
  for (std::size_t r : rows) out.keys.push_back(keys.at(r));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    out.columns[c].reserve(rows.size());
    for (std::size_t r : rows) out.columns[c].push_back(columns[c][r]);
  }
  return out;
}

ScoreMatrix align_tables(std::span<const ScoreFragment> tables) {
  if (tables.size() < 2) throw InvalidArgument("align_tables needs at least two tables");
  std::set<std::string> seen;
  for (const auto& t : tables) {
    if (!seen.insert(t.name).second) throw InvalidArgument("score table name '" + t.name + "' appears twice");
  }

  ScoreMatrix m;
  for (const auto& [key, _] : tables[0].scores) {
    bool everywhere = std::all_of(tables.begin() + 1, tables.end(),
                                  [&key](const ScoreFragment& t) { return t.scores.contains(key); });
    if (everywhere) m.keys.push_back(key);
  }
  if (m.keys.empty()) throw DataError("score tables share no (system, domain, seg_id) keys");

  for (const auto& t : tables) {
    m.names.push_back(t.name);
    m.polarity.push_back(t.polarity);
    std::vector<double> col;
    col.reserve(m.keys.size());
    for (const auto& key : m.keys) col.push_back(t.scores.at(key));
    m.columns.push_back(std::move(col));

    DroppedKeys dropped{t.name, {}};
    for (const auto& [key, _] : t.scores) {
      if (!std::binary_search(m.keys.begin(), m.keys.end(), key)) dropped.keys.push_back(key);
    }
    m.dropped.push_back(std::move(dropped));
  }
  return m;
}

}  // namespace knnqe::interchange
