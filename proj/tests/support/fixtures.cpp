#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unistd.h>

namespace knnqe::testing {

using interchange::Bundle;
using interchange::ManifestEntry;
using interchange::Side;
using interchange::Tensor;

TempDir::TempDir() {
  static int counter = 0;
  const auto base = fs::temp_directory_path();
  for (;;) {
    path_ = base / ("knnqe-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    if (fs::create_directory(path_)) break;
  }
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

double gaussian(SeededRng& rng) {
  // Box-Muller; 1 - u keeps the log argument away from zero.
  const double u = 1.0 - rng.uniform();
  const double v = rng.uniform();
  return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * std::numbers::pi * v);
}

Tensor gaussian_tensor(SeededRng& rng, std::uint32_t dim, std::uint64_t count, double sd) {
  Tensor t(dim, count);
  for (float& x : t.values()) x = static_cast<float>(sd * gaussian(rng));
  return t;
}

namespace {

ManifestEntry make_entry(const std::string& id, Side side, std::size_t tokens, std::uint32_t vocab,
                         std::uint64_t row_start, std::uint64_t embedding_row, SeededRng& rng) {
  ManifestEntry e;
  e.sentence_id = id;
  e.side = side;
  e.source_text = "source " + id;
  e.target_text = "target " + id;
  for (std::size_t t = 0; t < tokens; ++t) e.token_ids.push_back(static_cast<std::int64_t>(rng.below(vocab)));
  e.vec_row_start = row_start;
  e.embedding_row = embedding_row;
  return e;
}

}  // namespace

Bundle random_bundle(SeededRng& rng, const BundleSpec& spec) {
  Bundle b;
  std::uint64_t rows = 0;
  for (std::size_t s = 0; s < spec.sentences; ++s) {
    const std::size_t n = spec.min_tokens + rng.below(spec.max_tokens - spec.min_tokens + 1);
    auto e = make_entry(spec.id_prefix + std::to_string(s), spec.side, n, spec.vocab, rows, s, rng);
    if (spec.probs) {
      e.token_probs.emplace();
      for (std::size_t t = 0; t < n; ++t) e.token_probs->push_back(rng.uniform());
    }
    rows += n;
    b.sentences.push_back(std::move(e));
  }
  b.vectors = gaussian_tensor(rng, spec.dim, rows);
  if (spec.embeddings) b.embeddings = gaussian_tensor(rng, spec.embedding_dim, spec.sentences);
  return b;
}

Bundle bundle_from_vectors(SeededRng& rng, Tensor vectors, std::size_t tokens_per_sentence, std::uint32_t vocab,
                           Side side) {
  Bundle b;
  const std::uint64_t n = vectors.count();
  std::uint64_t row = 0;
  std::size_t s = 0;
  while (row < n) {
    const std::uint64_t len = std::min<std::uint64_t>(tokens_per_sentence, n - row);
    b.sentences.push_back(make_entry("s" + std::to_string(s), side, len, vocab, row, s, rng));
    row += len;
    ++s;
  }
  b.vectors = std::move(vectors);
  return b;
}

Datastore store_from_vectors(SeededRng& rng, Tensor vectors, std::size_t tokens_per_sentence, std::uint32_t vocab) {
  return Datastore::from_bundle(bundle_from_vectors(rng, std::move(vectors), tokens_per_sentence, vocab));
}

BundlePaths write_bundle(const Bundle& bundle, const fs::path& dir, const std::string& stem) {
  BundlePaths paths{dir / (stem + ".jsonl"), dir / (stem + ".vectors.kqe"), std::nullopt};
  interchange::write_manifest(paths.manifest, bundle.sentences);
  interchange::write_tensor(paths.vectors, bundle.vectors);
  if (bundle.embeddings) {
    paths.embeddings = dir / (stem + ".embeddings.kqe");
    interchange::write_tensor(*paths.embeddings, *bundle.embeddings);
  }
  return paths;
}

PlantedFixture make_planted(const PlantedSpec& spec) {
  SeededRng rng(spec.seed);
  const std::uint64_t train_rows = spec.train_sentences * spec.train_tokens;
  auto train = bundle_from_vectors(rng, gaussian_tensor(rng, spec.dim, train_rows), spec.train_tokens, 1000);
  const Tensor anchors = train.vectors;

  PlantedFixture f{Datastore::from_bundle(train), {}, {}};
  Tensor test_vectors(spec.dim, spec.test_segments * spec.test_tokens);
  std::uint64_t row = 0;
  for (std::size_t s = 0; s < spec.test_segments; ++s) {
    const std::string id = "t" + std::to_string(s);
    const double q = rng.uniform();
    f.quality[id] = q;
    auto e = make_entry(id, Side::kTest, spec.test_tokens, 1000, row, s, rng);
    const double noisy_q = q + spec.prob_noise * gaussian(rng);
    e.token_probs.emplace();
    for (std::size_t t = 0; t < spec.test_tokens; ++t, ++row) {
      const auto anchor = anchors.row(rng.below(anchors.count()));
      std::vector<double> dir(spec.dim);
      double norm = 0.0;
      for (double& d : dir) {
        d = gaussian(rng);
        norm += d * d;
      }
      norm = std::sqrt(norm);
      const double radius =
          std::max(0.0, spec.offset_scale * (1.0 - q) * (1.0 + spec.token_jitter * gaussian(rng)));
      auto out = test_vectors.row(row);
      for (std::uint32_t d = 0; d < spec.dim; ++d) {
        out[d] = static_cast<float>(anchor[d] + radius * dir[d] / norm);
      }
      e.token_probs->push_back(std::clamp(noisy_q + 0.05 * gaussian(rng), 0.0, 1.0));
    }
    f.test.sentences.push_back(std::move(e));
  }
  f.test.vectors = std::move(test_vectors);
  return f;
}

Tensor blob_tensor(SeededRng& rng, std::uint32_t dim, std::uint64_t count, std::size_t blobs, double centre_sd,
                   double blob_sd) {
  const Tensor centres = gaussian_tensor(rng, dim, blobs, centre_sd);
  Tensor t(dim, count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto c = centres.row(rng.below(blobs));
    auto r = t.row(i);
    for (std::uint32_t d = 0; d < dim; ++d) r[d] = static_cast<float>(c[d] + blob_sd * gaussian(rng));
  }
  return t;
}

Tensor mixture_tensor(SeededRng& rng, const MixtureSpec& spec, std::uint64_t count) {
  const std::uint32_t ld = spec.latent_dim;
  const Tensor map = gaussian_tensor(rng, ld, spec.dim, 1.0 / std::sqrt(static_cast<double>(ld)));
  const Tensor centres = gaussian_tensor(rng, ld, spec.components, spec.centre_sd);
  Tensor t(spec.dim, count);
  std::vector<double> z(ld);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto c = centres.row(rng.below(spec.components));
    for (std::uint32_t l = 0; l < ld; ++l) z[l] = c[l] + spec.component_sd * gaussian(rng);
    auto r = t.row(i);
    for (std::uint32_t d = 0; d < spec.dim; ++d) {
      const auto a = map.row(d);
      double s = 0.0;
      for (std::uint32_t l = 0; l < ld; ++l) s += a[l] * z[l];
      r[d] = static_cast<float>(s + spec.noise_sd * gaussian(rng));
    }
  }
  return t;
}

}  // namespace knnqe::testing
