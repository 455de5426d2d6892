#pragma once

// k-nearest-neighbour search over datastore vectors under Euclidean
// distance. ExactIndex is the reference; IvfIndex probes only the clusters
// nearest to each query.
//
// Both indexes score candidates with a blocked matrix product and then
// re-rank every candidate that could still belong to the top k (given the
// float32 rounding bound of that product) with a direct double-precision L2.
// Results are therefore exact, ties going to the lower entry index.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "knnqe/datastore.hpp"
#include "knnqe/interchange.hpp"

namespace knnqe {

struct Neighbor {
  std::uint64_t entry = 0;
  double distance = 0.0;
  std::uint32_t token_id = 0;
  std::uint64_t sentence_idx = 0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct NeighborSet {
  std::uint64_t query_token_index = 0;
  std::vector<Neighbor> neighbors;

  friend bool operator==(const NeighborSet&, const NeighborSet&) = default;
};

// Euclidean distance accumulated in double.
double l2_distance(std::span<const float> a, std::span<const float> b);

enum class SearchMode { kExact, kIvf };

std::string_view to_string(SearchMode mode);

class ExactIndex {
 public:
  // Keeps a reference to `store`, which must outlive the index.
  explicit ExactIndex(const Datastore& store);

  NeighborSet search(std::span<const float> query, std::size_t k) const;
  // threads = 0 uses every available core.
  std::vector<NeighborSet> search_batch(std::span<const std::span<const float>> queries, std::size_t k,
                                        unsigned threads = 0) const;

  const Datastore& store() const { return *store_; }

 private:
  const Datastore* store_;
  std::vector<double> mean_;
  std::vector<float> centered_;  // token_count x dim, entry order
  std::vector<float> norms_;     // squared norms of centered rows
  double max_norm_ = 0.0;
};

NeighborSet search_exact(const Datastore& store, std::span<const float> query, std::size_t k);

struct IvfOptions {
  std::size_t max_iterations = 25;
  // 0 trains k-means on every vector; otherwise on a seeded subsample.
  std::size_t max_train_points = 0;
};

class IvfIndex {
 public:
  static IvfIndex build(const Datastore& store, std::size_t n_clusters, std::uint64_t seed,
                        const IvfOptions& options = {});
  // Reads ivf.kqe written by save(); `store` must be the one it was built on.
  static IvfIndex load(const fs::path& path, const Datastore& store);
  void save(const fs::path& path) const;

  std::size_t n_clusters() const { return centroids_.count(); }
  const interchange::Tensor& centroids() const { return centroids_; }
  std::span<const std::uint32_t> assignments() const { return assignments_; }
  std::span<const std::uint64_t> cluster_entries(std::size_t cluster) const;
  std::size_t iterations_run() const { return iterations_; }

  NeighborSet search(const Datastore& store, std::span<const float> query, std::size_t k,
                     std::size_t probe_count) const;
  std::vector<NeighborSet> search_batch(const Datastore& store, std::span<const std::span<const float>> queries,
                                        std::size_t k, std::size_t probe_count, unsigned threads = 0) const;

 private:
  IvfIndex() = default;
  void prepare(const Datastore& store);

  interchange::Tensor centroids_;              // raw coordinates, canonical form
  std::vector<std::uint32_t> assignments_;     // entry -> cluster
  std::size_t iterations_ = 0;

  // Derived from the above plus the store; rebuilt on load.
  std::uint64_t token_count_ = 0;
  std::vector<double> mean_;
  std::vector<float> centered_centroids_;
  std::vector<float> centroid_norms_;
  std::vector<std::uint64_t> offsets_;   // cluster -> first slot in order_
  std::vector<std::uint64_t> order_;     // slot -> entry
  std::vector<float> residuals_;         // slot x dim, x - centroid
  std::vector<float> residual_norms_;
  std::vector<double> max_residual_norm_;
};

IvfIndex build_ivf(const Datastore& store, std::size_t n_clusters, std::uint64_t seed,
                   const IvfOptions& options = {});
NeighborSet search_ivf(const IvfIndex& index, const Datastore& store, std::span<const float> query,
                       std::size_t k, std::size_t probe_count);

struct SearchOptions {
  SearchMode mode = SearchMode::kExact;
  std::size_t probes = 1;
  unsigned threads = 0;
};

// Dispatches between exact and IVF search for one datastore. The exact index
// is built on first use.
class Searcher {
 public:
  explicit Searcher(const Datastore& store, const IvfIndex* ivf = nullptr);

  // Fails on the first bad query with an error naming its batch index.
  std::vector<NeighborSet> search_batch(std::span<const std::span<const float>> queries, std::size_t k,
                                        const SearchOptions& options) const;
  NeighborSet search(std::span<const float> query, std::size_t k, const SearchOptions& options) const;

 private:
  const ExactIndex& exact() const;

  const Datastore* store_;
  const IvfIndex* ivf_;
  mutable std::once_flag exact_once_;
  mutable std::unique_ptr<ExactIndex> exact_;
};

std::vector<NeighborSet> search_batch(const Datastore& store, const IvfIndex* ivf,
                                      std::span<const std::span<const float>> queries, std::size_t k,
                                      const SearchOptions& options);

// Row spans over a row-major tensor, for batch calls.
std::vector<std::span<const float>> rows_of(const interchange::Tensor& tensor);

}  // namespace knnqe
