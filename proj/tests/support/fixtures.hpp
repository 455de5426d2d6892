#pragma once

// Synthetic data shared by the unit tests and the acceptance suite.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "knnqe/datastore.hpp"
#include "knnqe/interchange.hpp"
#include "knnqe/random.hpp"

namespace knnqe::testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

double gaussian(SeededRng& rng);

// Tensor with i.i.d. N(0, sd) entries.
interchange::Tensor gaussian_tensor(SeededRng& rng, std::uint32_t dim, std::uint64_t count, double sd = 1.0);

struct BundleSpec {
  std::size_t sentences = 10;
  std::size_t min_tokens = 1;
  std::size_t max_tokens = 6;
  std::uint32_t dim = 8;
  std::uint32_t vocab = 50;
  interchange::Side side = interchange::Side::kTrain;
  bool probs = false;
  bool embeddings = false;
  std::uint32_t embedding_dim = 4;
  std::string id_prefix = "s";
};

interchange::Bundle random_bundle(SeededRng& rng, const BundleSpec& spec);

// Wraps existing vectors into sentences of `tokens_per_sentence` rows with
// random token ids (the last sentence takes the remainder).
interchange::Bundle bundle_from_vectors(SeededRng& rng, interchange::Tensor vectors, std::size_t tokens_per_sentence,
                                        std::uint32_t vocab, interchange::Side side = interchange::Side::kTrain);

Datastore store_from_vectors(SeededRng& rng, interchange::Tensor vectors, std::size_t tokens_per_sentence = 8,
                             std::uint32_t vocab = 1000);

struct BundlePaths {
  fs::path manifest;
  fs::path vectors;
  std::optional<fs::path> embeddings;
};

BundlePaths write_bundle(const interchange::Bundle& bundle, const fs::path& dir, const std::string& stem);

// Planted-quality fixture: each test segment has a quality q in [0, 1] and
// its token vectors sit at distance proportional to (1 - q) from a datastore
// entry. Token probabilities follow a noisier copy of q.
struct PlantedSpec {
  std::uint64_t seed = 7;
  std::size_t train_sentences = 400;
  std::size_t train_tokens = 8;
  std::size_t test_segments = 200;
  std::size_t test_tokens = 6;
  std::uint32_t dim = 32;
  double offset_scale = 3.0;
  double token_jitter = 0.15;  // relative spread of per-token offsets
  double prob_noise = 0.35;    // sd of the noise added to q for probabilities
};

struct PlantedFixture {
  Datastore store;
  interchange::Bundle test;
  std::map<std::string, double> quality;  // seg_id -> planted q
};

PlantedFixture make_planted(const PlantedSpec& spec = {});

// Vectors drawn from `blobs` Gaussian blobs with well separated centres.
interchange::Tensor blob_tensor(SeededRng& rng, std::uint32_t dim, std::uint64_t count, std::size_t blobs,
                                double centre_sd, double blob_sd);

// Vectors with low intrinsic dimension: a Gaussian mixture in `latent_dim`
// dimensions mapped linearly into `dim`, plus isotropic noise.
struct MixtureSpec {
  std::uint32_t dim = 256;
  std::uint32_t latent_dim = 32;
  std::size_t components = 2000;
  double centre_sd = 1.0;
  double component_sd = 0.3;
  double noise_sd = 0.05;
};
interchange::Tensor mixture_tensor(SeededRng& rng, const MixtureSpec& spec, std::uint64_t count);

}  // namespace knnqe::testing
