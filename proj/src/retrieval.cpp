#include "knnqe/retrieval.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>

#include "knnqe/error.hpp"
#include "knnqe/random.hpp"
#include "mapped_file.hpp"

namespace knnqe {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

constexpr std::size_t kQueryBlock = 256;
constexpr std::size_t kEntryBlock = 1024;
constexpr std::size_t kIvfQueryBlock = 8192;
constexpr double kInf = std::numeric_limits<double>::infinity();

// Worst-case error of a float32 key of the form |x|^2 - 2 q.x (plus the
// single roundings of the centred inputs), for |q| + |x| <= scale. Twice the
// textbook gamma_n bound.
double rounding_slack(std::size_t dim, double scale) {
  return static_cast<double>(dim + 8) * 0x1.0p-23 * scale * scale;
}

// Smallest float that is >= value.
float round_up(double value) {
  if (value == kInf) return std::numeric_limits<float>::infinity();
  float f = static_cast<float>(value);
  if (static_cast<double>(f) < value) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return f;
}

double squared_norm(const float* v, std::size_t dim) {
  double s = 0.0;
  for (std::size_t i = 0; i < dim; ++i) s += static_cast<double>(v[i]) * v[i];
  return s;
}

// Tracks every entry whose key interval [key - slack, key + slack] can still
// reach the k smallest true keys seen so far.
class Collector {
 public:
  explicit Collector(std::size_t k) : k_(k), prune_at_(8 * k + 64) { heap_.reserve(k); }

  // Float threshold below which a key with this slack must be offered.
  float gate(double slack) const { return round_up(upper_ + slack); }

  void offer(double key, double slack, std::uint64_t entry) {
    const double lo = key - slack;
    if (lo > upper_) return;
    const double hi = key + slack;
    if (heap_.size() < k_) {
      heap_.push_back(hi);
      std::push_heap(heap_.begin(), heap_.end());
      if (heap_.size() == k_) upper_ = heap_.front();
    } else if (hi < heap_.front()) {
      std::pop_heap(heap_.begin(), heap_.end());
      heap_.back() = hi;
      std::push_heap(heap_.begin(), heap_.end());
      upper_ = heap_.front();
    }
    candidates_.push_back({lo, entry});
    if (candidates_.size() >= prune_at_) prune();
  }

  NeighborSet finish(const Datastore& store, std::span<const float> query, std::uint64_t query_index) {
    prune();
    std::vector<std::pair<double, std::uint64_t>> exact;
    exact.reserve(candidates_.size());
    for (const auto& [lo, entry] : candidates_) {
      exact.emplace_back(l2_distance(query, store.vector(entry)), entry);
    }
    const std::size_t take = std::min(k_, exact.size());
    std::partial_sort(exact.begin(), exact.begin() + static_cast<std::ptrdiff_t>(take), exact.end());
    NeighborSet out;
    out.query_token_index = query_index;
    out.neighbors.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
      const TokenRecord& rec = store.entry(exact[i].second);
      out.neighbors.push_back({exact[i].second, exact[i].first, rec.token_id, rec.sentence_idx});
    }
    return out;
  }

 private:
  void prune() {
    const double upper = upper_;
    std::erase_if(candidates_, [upper](const auto& c) { return c.first > upper; });
    prune_at_ = std::max(2 * candidates_.size(), 8 * k_ + 64);
  }

  std::size_t k_;
  std::size_t prune_at_;
  std::vector<double> heap_;  // max-heap of the k smallest upper bounds
  double upper_ = kInf;
  std::vector<std::pair<double, std::uint64_t>> candidates_;
};

void check_k(const Datastore& store, std::size_t k) {
  if (k == 0) throw InvalidArgument("k must be at least 1");
  if (k > store.token_count()) {
    throw InvalidArgument("k = " + std::to_string(k) + " exceeds the datastore token count " +
                          std::to_string(store.token_count()));
  }
}

void check_queries(const Datastore& store, std::span<const std::span<const float>> queries) {
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (queries[i].size() != store.dim()) {
      throw InvalidArgument("query " + std::to_string(i) + ": dimension " + std::to_string(queries[i].size()) +
                            " does not match datastore dimension " + std::to_string(store.dim()));
    }
    for (float v : queries[i]) {
      if (!std::isfinite(v)) throw InvalidArgument("query " + std::to_string(i) + ": non-finite value");
    }
  }
}

unsigned resolve_threads(unsigned threads) {
  if (threads != 0) return threads;
  return std::max(1u, std::thread::hardware_concurrency());
}

// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each, one
// thread per chunk. Rethrows the first failure.
template <typename Fn>
void parallel_chunks(std::size_t n, unsigned threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(resolve_threads(threads), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t step = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = std::min(n, w * step);
    const std::size_t end = std::min(n, begin + step);
    pool.emplace_back([&, w, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// fl(x - mean) with a single rounding.
void center_into(std::span<const float> x, const std::vector<double>& mean, float* out) {
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(static_cast<double>(x[i]) - mean[i]);
}

std::vector<double> mean_of(const Datastore& store) {
  std::vector<double> mean(store.dim(), 0.0);
  for (std::uint64_t i = 0; i < store.token_count(); ++i) {
    const auto v = store.vector(i);
    for (std::size_t d = 0; d < v.size(); ++d) mean[d] += v[d];
  }
  for (double& m : mean) m /= static_cast<double>(store.token_count());
  return mean;
}

}  // namespace

double l2_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

std::string_view to_string(SearchMode mode) { return mode == SearchMode::kExact ? "exact" : "ivf"; }

std::vector<std::span<const float>> rows_of(const interchange::Tensor& tensor) {
  std::vector<std::span<const float>> rows;
  rows.reserve(tensor.count());
  for (std::uint64_t i = 0; i < tensor.count(); ++i) rows.push_back(tensor.row(i));
  return rows;
}

// ---- Exact ------------------------------------------------------------------

ExactIndex::ExactIndex(const Datastore& store) : store_(&store), mean_(mean_of(store)) {
  const std::size_t dim = store.dim();
  const std::uint64_t n = store.token_count();
  centered_.resize(n * dim);
  norms_.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    float* row = centered_.data() + i * dim;
    center_into(store.vector(i), mean_, row);
    const double sq = squared_norm(row, dim);
    norms_[i] = static_cast<float>(sq);
    max_norm_ = std::max(max_norm_, std::sqrt(sq));
  }
}

std::vector<NeighborSet> ExactIndex::search_batch(std::span<const std::span<const float>> queries, std::size_t k,
                                                  unsigned threads) const {
  check_k(*store_, k);
  check_queries(*store_, queries);
  const std::size_t dim = store_->dim();
  const std::uint64_t n = store_->token_count();
  std::vector<NeighborSet> results(queries.size());

  parallel_chunks(queries.size(), threads, [&](std::size_t begin, std::size_t end) {
    RowMatrix qblock;
    RowMatrix tile;
    std::vector<double> slack;
    for (std::size_t q0 = begin; q0 < end; q0 += kQueryBlock) {
      const std::size_t nq = std::min(kQueryBlock, end - q0);
      qblock.resize(static_cast<Eigen::Index>(nq), static_cast<Eigen::Index>(dim));
      slack.resize(nq);
      std::vector<Collector> collectors(nq, Collector(k));
      for (std::size_t i = 0; i < nq; ++i) {
        float* row = qblock.data() + i * dim;
        center_into(queries[q0 + i], mean_, row);
        slack[i] = rounding_slack(dim, std::sqrt(squared_norm(row, dim)) + max_norm_);
      }
      for (std::uint64_t e0 = 0; e0 < n; e0 += kEntryBlock) {
        const std::size_t ne = static_cast<std::size_t>(std::min<std::uint64_t>(kEntryBlock, n - e0));
        ConstRowMap xs(centered_.data() + e0 * dim, static_cast<Eigen::Index>(ne), static_cast<Eigen::Index>(dim));
        tile.noalias() = qblock * xs.transpose();
        const float* norms = norms_.data() + e0;
        for (std::size_t i = 0; i < nq; ++i) {
          Collector& col = collectors[i];
          const float* dots = tile.data() + i * ne;
          float gate = col.gate(slack[i]);
          for (std::size_t j = 0; j < ne; ++j) {
            const float key = norms[j] - 2.0f * dots[j];
            if (key <= gate) {
              col.offer(key, slack[i], e0 + j);
              gate = col.gate(slack[i]);
            }
          }
        }
      }
      for (std::size_t i = 0; i < nq; ++i) {
        results[q0 + i] = collectors[i].finish(*store_, queries[q0 + i], q0 + i);
      }
    }
  });
  return results;
}

NeighborSet ExactIndex::search(std::span<const float> query, std::size_t k) const {
  const std::span<const float> one[] = {query};
  auto r = search_batch(one, k, 1);
  r[0].query_token_index = 0;
  return std::move(r[0]);
}

NeighborSet search_exact(const Datastore& store, std::span<const float> query, std::size_t k) {
  return ExactIndex(store).search(query, k);
}

// ---- IVF --------------------------------------------------------------------

namespace {

// Nearest centroid (lowest index on ties) for each listed entry, computed on
// centred coordinates. Returns how many assignments changed.
std::size_t assign_points(const Datastore& store, const std::vector<double>& mean,
                          std::span<const std::uint64_t> points, const RowMatrix& centroids,
                          const std::vector<float>& centroid_norms, std::vector<std::uint32_t>& assign) {
  const std::size_t dim = store.dim();
  const std::size_t n_clusters = static_cast<std::size_t>(centroids.rows());
  RowMatrix block;
  RowMatrix tile;
  std::size_t changed = 0;
  for (std::size_t p0 = 0; p0 < points.size(); p0 += kQueryBlock) {
    const std::size_t np = std::min(kQueryBlock, points.size() - p0);
    block.resize(static_cast<Eigen::Index>(np), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < np; ++i) center_into(store.vector(points[p0 + i]), mean, block.data() + i * dim);
    tile.noalias() = block * centroids.transpose();
    for (std::size_t i = 0; i < np; ++i) {
      const float* dots = tile.data() + i * n_clusters;
      std::uint32_t best = 0;
      float best_key = centroid_norms[0] - 2.0f * dots[0];
      for (std::size_t c = 1; c < n_clusters; ++c) {
        const float key = centroid_norms[c] - 2.0f * dots[c];
        if (key < best_key) {
          best_key = key;
          best = static_cast<std::uint32_t>(c);
        }
      }
      if (assign[p0 + i] != best) {
        assign[p0 + i] = best;
        ++changed;
      }
    }
  }
  return changed;
}

std::vector<float> row_norms(const RowMatrix& m) {
  std::vector<float> norms(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    norms[static_cast<std::size_t>(r)] = static_cast<float>(squared_norm(m.data() + r * m.cols(), m.cols()));
  }
  return norms;
}

}  // namespace

IvfIndex IvfIndex::build(const Datastore& store, std::size_t n_clusters, std::uint64_t seed,
                         const IvfOptions& options) {
  const std::uint64_t n = store.token_count();
  const std::size_t dim = store.dim();
  if (n_clusters == 0) throw InvalidArgument("n_clusters must be at least 1");
  if (n_clusters > n) {
    throw InvalidArgument("n_clusters = " + std::to_string(n_clusters) + " exceeds the token count " +
                          std::to_string(n));
  }
  if (n_clusters > UINT32_MAX) throw InvalidArgument("too many clusters");
  if (options.max_iterations == 0) throw InvalidArgument("max_iterations must be at least 1");

  SeededRng rng(seed);
  const std::vector<double> mean = mean_of(store);

  std::vector<std::uint64_t> train;
  if (options.max_train_points > 0 && options.max_train_points < n) {
    const std::size_t m = std::max<std::size_t>(options.max_train_points, n_clusters);
    train = rng.permutation(n);
    train.resize(m);
    std::sort(train.begin(), train.end());
  } else {
    train.resize(n);
    std::iota(train.begin(), train.end(), std::uint64_t{0});
  }

  // k-means++ seeding: each new centroid is a training point drawn with
  // probability proportional to its squared distance to the nearest centroid
  // chosen so far.
  RowMatrix centroids(static_cast<Eigen::Index>(n_clusters), static_cast<Eigen::Index>(dim));
  {
    const auto m = static_cast<Eigen::Index>(train.size());
    RowMatrix points(m, static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < m; ++i) {
      center_into(store.vector(train[static_cast<std::size_t>(i)]), mean, points.data() + i * dim);
    }
    std::vector<double> nearest(train.size(), std::numeric_limits<double>::infinity());
    auto pick = static_cast<Eigen::Index>(rng.below(train.size()));
    for (std::size_t c = 0; c < n_clusters; ++c) {
      const auto row = static_cast<Eigen::Index>(c);
      centroids.row(row) = points.row(pick);
      if (c + 1 == n_clusters) break;
      const Eigen::VectorXf d2 = (points.rowwise() - centroids.row(row)).rowwise().squaredNorm();
      double total = 0.0;
      for (std::size_t i = 0; i < train.size(); ++i) {
        nearest[i] = std::min(nearest[i], static_cast<double>(d2[static_cast<Eigen::Index>(i)]));
        total += nearest[i];
      }
      if (!(total > 0.0)) {
        // Fewer distinct points than clusters; the empty-cluster rule below
        // deals with the duplicates.
        pick = static_cast<Eigen::Index>(rng.below(train.size()));
        continue;
      }
      const double target = rng.uniform() * total;
      double run = 0.0;
      pick = m - 1;
      for (Eigen::Index i = 0; i < m; ++i) {
        run += nearest[static_cast<std::size_t>(i)];
        if (run > target) {
          pick = i;
          break;
        }
      }
    }
  }

  std::vector<std::uint32_t> assign(train.size(), UINT32_MAX);
  std::vector<double> sums(n_clusters * dim);
  std::vector<std::uint64_t> counts(n_clusters);
  std::vector<float> centered(dim);
  std::size_t iterations = 0;

  for (std::size_t iter = 0; iter < options.max_iterations; ++iter) {
    const std::size_t changed = assign_points(store, mean, train, centroids, row_norms(centroids), assign);
    ++iterations;
    if (iter > 0 && changed == 0) break;

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < train.size(); ++i) {
      center_into(store.vector(train[i]), mean, centered.data());
      double* s = sums.data() + assign[i] * dim;
      for (std::size_t d = 0; d < dim; ++d) s[d] += centered[d];
      ++counts[assign[i]];
    }
    auto set_mean = [&](std::size_t c) {
      for (std::size_t d = 0; d < dim; ++d) {
        centroids(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(d)) =
            static_cast<float>(sums[c * dim + d] / static_cast<double>(counts[c]));
      }
    };
    for (std::size_t c = 0; c < n_clusters; ++c) {
      if (counts[c] > 0) set_mean(c);
    }

    // Empty clusters take the farthest member of the current largest cluster.
    for (std::size_t e = 0; e < n_clusters; ++e) {
      if (counts[e] != 0) continue;
      const auto largest = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      if (counts[largest] < 2) break;
      std::size_t far_i = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < train.size(); ++i) {
        if (assign[i] != largest) continue;
        center_into(store.vector(train[i]), mean, centered.data());
        double d2 = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
          const double diff = static_cast<double>(centered[d]) -
                              centroids(static_cast<Eigen::Index>(largest), static_cast<Eigen::Index>(d));
          d2 += diff * diff;
        }
        if (d2 > far_d) {
          far_d = d2;
          far_i = i;
        }
      }
      center_into(store.vector(train[far_i]), mean, centered.data());
      assign[far_i] = static_cast<std::uint32_t>(e);
      counts[e] = 1;
      for (std::size_t d = 0; d < dim; ++d) {
        sums[e * dim + d] = centered[d];
        sums[largest * dim + d] -= centered[d];
      }
      --counts[largest];
      set_mean(e);
      set_mean(largest);
    }
  }

  IvfIndex index;
  index.iterations_ = iterations;
  index.centroids_ = interchange::Tensor(static_cast<std::uint32_t>(dim), n_clusters);
  for (std::size_t c = 0; c < n_clusters; ++c) {
    auto row = index.centroids_.row(c);
    for (std::size_t d = 0; d < dim; ++d) {
      row[d] = static_cast<float>(
          static_cast<double>(centroids(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(d))) + mean[d]);
    }
  }

  // Final assignment of every entry against the canonical centroids.
  RowMatrix canonical(static_cast<Eigen::Index>(n_clusters), static_cast<Eigen::Index>(dim));
  for (std::size_t c = 0; c < n_clusters; ++c) center_into(index.centroids_.row(c), mean, canonical.data() + c * dim);
  std::vector<std::uint64_t> all(n);
  std::iota(all.begin(), all.end(), std::uint64_t{0});
  index.assignments_.assign(n, UINT32_MAX);
  assign_points(store, mean, all, canonical, row_norms(canonical), index.assignments_);

  index.prepare(store);
  return index;
}

void IvfIndex::prepare(const Datastore& store) {
  const std::size_t dim = store.dim();
  const std::size_t n_clusters = centroids_.count();
  token_count_ = store.token_count();
  if (centroids_.dim() != dim) throw ValidationError("IVF centroid dimension does not match the datastore");
  if (assignments_.size() != token_count_) throw ValidationError("IVF assignment count does not match the datastore");

  mean_ = mean_of(store);
  centered_centroids_.resize(n_clusters * dim);
  centroid_norms_.resize(n_clusters);
  for (std::size_t c = 0; c < n_clusters; ++c) {
    float* row = centered_centroids_.data() + c * dim;
    center_into(centroids_.row(c), mean_, row);
    centroid_norms_[c] = static_cast<float>(squared_norm(row, dim));
  }

  offsets_.assign(n_clusters + 1, 0);
  for (std::uint32_t a : assignments_) {
    if (a >= n_clusters) throw ValidationError("IVF assignment references a missing cluster");
    ++offsets_[a + 1];
  }
  for (std::size_t c = 0; c < n_clusters; ++c) offsets_[c + 1] += offsets_[c];
  order_.resize(token_count_);
  std::vector<std::uint64_t> fill(offsets_.begin(), offsets_.end() - 1);
  for (std::uint64_t i = 0; i < token_count_; ++i) order_[fill[assignments_[i]]++] = i;

  residuals_.resize(token_count_ * dim);
  residual_norms_.resize(token_count_);
  max_residual_norm_.assign(n_clusters, 0.0);
  for (std::size_t c = 0; c < n_clusters; ++c) {
    const auto centroid = centroids_.row(c);
    for (std::uint64_t slot = offsets_[c]; slot < offsets_[c + 1]; ++slot) {
      const auto x = store.vector(order_[slot]);
      float* r = residuals_.data() + slot * dim;
      for (std::size_t d = 0; d < dim; ++d) {
        r[d] = static_cast<float>(static_cast<double>(x[d]) - static_cast<double>(centroid[d]));
      }
      const double sq = squared_norm(r, dim);
      residual_norms_[slot] = static_cast<float>(sq);
      max_residual_norm_[c] = std::max(max_residual_norm_[c], std::sqrt(sq));
    }
  }
}

std::span<const std::uint64_t> IvfIndex::cluster_entries(std::size_t cluster) const {
  if (cluster >= n_clusters()) throw InvalidArgument("cluster index out of range");
  return {order_.data() + offsets_[cluster], offsets_[cluster + 1] - offsets_[cluster]};
}

void IvfIndex::save(const fs::path& path) const {
  std::vector<char> bytes = interchange::encode_tensor(centroids_);
  const std::uint64_t n = assignments_.size();
  const std::size_t at = bytes.size();
  bytes.resize(at + 8 + n * 4);
  std::memcpy(bytes.data() + at, &n, 8);
  if (n > 0) std::memcpy(bytes.data() + at + 8, assignments_.data(), n * 4);
  detail::write_file(path, bytes);
}

IvfIndex IvfIndex::load(const fs::path& input_path, const Datastore& store) {
  const fs::path path = interchange::resolve_input_path(input_path);
  detail::MappedFile file(path);
  IvfIndex index;
  const std::size_t used = interchange::decode_tensor(file.bytes(), index.centroids_, path.string());
  if (file.size() < used + 8) throw ValidationError(path.string() + ": missing assignment array");
  std::uint64_t n = 0;
  std::memcpy(&n, file.bytes().data() + used, 8);
  if (file.size() != used + 8 + n * 4) {
    throw ValidationError(path.string() + ": assignment array size does not match its count");
  }
  index.assignments_.resize(n);
  if (n > 0) std::memcpy(index.assignments_.data(), file.bytes().data() + used + 8, n * 4);
  if (index.centroids_.count() == 0) throw ValidationError(path.string() + ": no centroids");
  index.prepare(store);
  return index;
}

std::vector<NeighborSet> IvfIndex::search_batch(const Datastore& store,
                                                std::span<const std::span<const float>> queries, std::size_t k,
                                                std::size_t probe_count, unsigned threads) const {
  check_k(store, k);
  if (store.token_count() != token_count_ || store.dim() != centroids_.dim()) {
    throw InvalidArgument("IVF index was built for a different datastore");
  }
  const std::size_t n_clusters = centroids_.count();
  if (probe_count < 1 || probe_count > n_clusters) {
    throw InvalidArgument("probe_count must be in [1, " + std::to_string(n_clusters) + "], got " +
                          std::to_string(probe_count));
  }
  check_queries(store, queries);
  const std::size_t dim = store.dim();
  std::vector<NeighborSet> results(queries.size());
  ConstRowMap centroid_map(centered_centroids_.data(), static_cast<Eigen::Index>(n_clusters),
                           static_cast<Eigen::Index>(dim));

  parallel_chunks(queries.size(), threads, [&](std::size_t begin, std::size_t end) {
    RowMatrix qblock;
    RowMatrix coarse;
    RowMatrix residual_q;
    RowMatrix tile;
    std::vector<std::pair<float, std::uint32_t>> ranked(n_clusters);
    std::vector<std::vector<std::uint32_t>> by_cluster(n_clusters);
    std::vector<double> qc_norm;

    for (std::size_t q0 = begin; q0 < end; q0 += kIvfQueryBlock) {
      const std::size_t nq = std::min(kIvfQueryBlock, end - q0);
      qblock.resize(static_cast<Eigen::Index>(nq), static_cast<Eigen::Index>(dim));
      for (std::size_t i = 0; i < nq; ++i) center_into(queries[q0 + i], mean_, qblock.data() + i * dim);
      coarse.noalias() = qblock * centroid_map.transpose();

      for (auto& list : by_cluster) list.clear();
      for (std::size_t i = 0; i < nq; ++i) {
        const float* dots = coarse.data() + i * n_clusters;
        for (std::size_t c = 0; c < n_clusters; ++c) {
          ranked[c] = {centroid_norms_[c] - 2.0f * dots[c], static_cast<std::uint32_t>(c)};
        }
        const auto head = ranked.begin() + static_cast<std::ptrdiff_t>(std::min(probe_count, n_clusters));
        std::nth_element(ranked.begin(), head, ranked.end());
        std::sort(ranked.begin(), head);
        // Probe further clusters when the nearest ones hold fewer than k entries.
        std::uint64_t covered = 0;
        for (std::size_t p = 0; p < n_clusters && (p < probe_count || covered < k); ++p) {
          if (p == probe_count) std::sort(head, ranked.end());
          const std::uint32_t c = ranked[p].second;
          by_cluster[c].push_back(static_cast<std::uint32_t>(i));
          covered += offsets_[c + 1] - offsets_[c];
        }
      }

      std::vector<Collector> collectors(nq, Collector(k));
      for (std::size_t c = 0; c < n_clusters; ++c) {
        const auto& members = by_cluster[c];
        const std::uint64_t first = offsets_[c];
        const std::size_t size = offsets_[c + 1] - first;
        if (members.empty() || size == 0) continue;
        const auto centroid = centroids_.row(c);
        residual_q.resize(static_cast<Eigen::Index>(members.size()), static_cast<Eigen::Index>(dim));
        qc_norm.resize(members.size());
        for (std::size_t m = 0; m < members.size(); ++m) {
          const auto q = queries[q0 + members[m]];
          float* row = residual_q.data() + m * dim;
          for (std::size_t d = 0; d < dim; ++d) {
            row[d] = static_cast<float>(static_cast<double>(q[d]) - static_cast<double>(centroid[d]));
          }
          qc_norm[m] = squared_norm(row, dim);
        }
        ConstRowMap rs(residuals_.data() + first * dim, static_cast<Eigen::Index>(size),
                       static_cast<Eigen::Index>(dim));
        tile.noalias() = residual_q * rs.transpose();
        const float* norms = residual_norms_.data() + first;
        const std::uint64_t* entries = order_.data() + first;
        for (std::size_t m = 0; m < members.size(); ++m) {
          Collector& col = collectors[members[m]];
          const double slack = rounding_slack(dim, std::sqrt(qc_norm[m]) + max_residual_norm_[c]);
          const float qn = static_cast<float>(qc_norm[m]);
          const float* dots = tile.data() + m * size;
          float gate = col.gate(slack);
          for (std::size_t j = 0; j < size; ++j) {
            const float key = qn + norms[j] - 2.0f * dots[j];
            if (key <= gate) {
              col.offer(key, slack, entries[j]);
              gate = col.gate(slack);
            }
          }
        }
      }
      for (std::size_t i = 0; i < nq; ++i) {
        results[q0 + i] = collectors[i].finish(store, queries[q0 + i], q0 + i);
      }
    }
  });
  return results;
}

NeighborSet IvfIndex::search(const Datastore& store, std::span<const float> query, std::size_t k,
                             std::size_t probe_count) const {
  const std::span<const float> one[] = {query};
  auto r = search_batch(store, one, k, probe_count, 1);
  return std::move(r[0]);
}

IvfIndex build_ivf(const Datastore& store, std::size_t n_clusters, std::uint64_t seed, const IvfOptions& options) {
  return IvfIndex::build(store, n_clusters, seed, options);
}

NeighborSet search_ivf(const IvfIndex& index, const Datastore& store, std::span<const float> query, std::size_t k,
                       std::size_t probe_count) {
  return index.search(store, query, k, probe_count);
}

// ---- Dispatch ---------------------------------------------------------------

Searcher::Searcher(const Datastore& store, const IvfIndex* ivf) : store_(&store), ivf_(ivf) {}

const ExactIndex& Searcher::exact() const {
  std::call_once(exact_once_, [this] { exact_ = std::make_unique<ExactIndex>(*store_); });
  return *exact_;
}

std::vector<NeighborSet> Searcher::search_batch(std::span<const std::span<const float>> queries, std::size_t k,
                                                const SearchOptions& options) const {
  if (queries.empty()) {
    check_k(*store_, k);
    return {};
  }
  if (options.mode == SearchMode::kIvf) {
    if (ivf_ == nullptr) throw InvalidArgument("IVF search requested but no IVF index is loaded");
    return ivf_->search_batch(*store_, queries, k, options.probes, options.threads);
  }
  return exact().search_batch(queries, k, options.threads);
}

NeighborSet Searcher::search(std::span<const float> query, std::size_t k, const SearchOptions& options) const {
  const std::span<const float> one[] = {query};
  auto r = search_batch(one, k, options);
  return std::move(r[0]);
}

std::vector<NeighborSet> search_batch(const Datastore& store, const IvfIndex* ivf,
                                      std::span<const std::span<const float>> queries, std::size_t k,
                                      const SearchOptions& options) {
  return Searcher(store, ivf).search_batch(queries, k, options);
}

}  // namespace knnqe
