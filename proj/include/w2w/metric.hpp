// Embedding heads, symmetric InfoNCE, and recall@k retrieval evaluation.
#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "w2w/ops.hpp"
#include "w2w/params.hpp"

namespace w2w {

enum class View { ground, aerial };

template <typename T>
struct Embedding {
  Tensor<T> vector;  // 1 x E, unit norm
  std::size_t source_id = 0;
  View view = View::ground;
};

// Global average pool over tokens -> affine -> L2 normalization.
template <typename T>
class EmbeddingHead {
 public:
  EmbeddingHead() = default;
  EmbeddingHead(const std::string& prefix, std::size_t channels, std::size_t dim, ParamStore<T>& store, Rng& rng)
      : weight_(store.normal(prefix + ".w", {channels, dim}, std::sqrt(1.0 / channels), rng)),
        bias_(store.zeros(prefix + ".b", {dim})) {}

  Tensor<T> operator()(const Tensor<T>& tokens) const {
    const Tensor<T> pooled = global_avg_pool(tokens);
    return l2_normalize_rows(linear(reshape(pooled, {1, pooled.size()}), weight_, bias_));
  }

 private:
  Tensor<T> weight_, bias_;
};

// Row i of each side is a matched pair; every other row is a negative.
template <typename T>
Tensor<T> infonce(const Tensor<T>& ground, const Tensor<T>& aerial, T temperature) {
  if (!(temperature > T(0))) throw ConfigError("temperature must be positive");
  if (ground.rank() != 2 || ground.shape() != aerial.shape()) {
    throw DimensionError("infonce: embeddings " + shape_str(ground.shape()) + " vs " + shape_str(aerial.shape()));
  }
  std::vector<std::size_t> targets(ground.dim(0));
  std::iota(targets.begin(), targets.end(), std::size_t{0});
  const Tensor<T> logits = scale(matmul(ground, transpose(aerial)), T(1) / temperature);
  const Tensor<T> rows = cross_entropy(logits, targets);
  const Tensor<T> cols = cross_entropy(transpose(logits), targets);
  return scale(add(rows, cols), T(0.5));
}

struct RetrievalReport {
  std::size_t queries = 0;
  std::size_t references = 0;
  std::vector<std::size_t> ks;    // requested cut-offs, ascending
  std::vector<std::size_t> hits;  // per k
  std::size_t percent_k = 1;      // ceil(0.01 * references)
  std::size_t percent_hits = 0;
  std::vector<std::vector<std::size_t>> ranking;  // query -> reference ids, best first
  std::vector<std::size_t> truth_rank;            // 0-based rank of the true reference

  double rate(std::size_t hit_count) const {
    return queries == 0 ? 0.0 : static_cast<double>(hit_count) / static_cast<double>(queries);
  }
  double recall(std::size_t k) const {
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (ks[i] == k) return rate(hits[i]);
    throw std::out_of_range("recall: k=" + std::to_string(k) + " not evaluated");
  }
  double recall_percent() const { return rate(percent_hits); }

  std::string to_text() const {
    std::ostringstream os;
    os << "queries " << queries << ", references " << references << '\n';
    os << std::left << std::setw(8) << "metric" << std::right << std::setw(8) << "hits" << std::setw(8)
       << "total" << std::setw(10) << "rate" << '\n';
    auto row = [&](const std::string& name, std::size_t h) {
      os << std::left << std::setw(8) << name << std::right << std::setw(8) << h << std::setw(8) << queries
         << std::setw(10) << std::fixed << std::setprecision(4) << rate(h) << '\n';
    };
    for (std::size_t i = 0; i < ks.size(); ++i) row("R@" + std::to_string(ks[i]), hits[i]);
    row("R@1%", percent_hits);
    return os.str();
  }

  // Columns k,hits,total,rate; the top-1% row uses k = "1%".
  std::string to_csv() const {
    std::ostringstream os;
    os << "k,hits,total,rate\n";
    for (std::size_t i = 0; i < ks.size(); ++i)
      os << ks[i] << ',' << hits[i] << ',' << queries << ',' << std::setprecision(6) << rate(hits[i]) << '\n';
    os << "1%," << percent_hits << ',' << queries << ',' << std::setprecision(6) << rate(percent_hits) << '\n';
    return os.str();
  }
};

// Ranks references by descending dot product (ties: lower reference id).
// `ground` is Q x E, `aerial` R x E, truth[q] the matching reference id.
template <typename T>
RetrievalReport recall_at_k(const Tensor<T>& ground, const Tensor<T>& aerial, const std::vector<std::size_t>& truth,
                            std::vector<std::size_t> ks = {1, 5, 10}) {
  if (ground.rank() != 2 || aerial.rank() != 2 || ground.dim(1) != aerial.dim(1)) {
    throw DimensionError("recall_at_k: embeddings " + shape_str(ground.shape()) + " vs " + shape_str(aerial.shape()));
  }
  const std::size_t q = ground.dim(0), r = aerial.dim(0), e = ground.dim(1);
  if (truth.size() != q) throw DimensionError("recall_at_k: truth must cover every query");
  std::sort(ks.begin(), ks.end());
  RetrievalReport rep;
  rep.queries = q;
  rep.references = r;
  rep.ks = ks;
  rep.hits.assign(ks.size(), 0);
  rep.percent_k = static_cast<std::size_t>(std::ceil(0.01 * static_cast<double>(r)));
  std::vector<double> score(r);
  for (std::size_t i = 0; i < q; ++i) {
    if (truth[i] >= r) {
      throw std::out_of_range("recall_at_k: truth id " + std::to_string(truth[i]) + " out of range for " +
                              std::to_string(r) + " references");
    }
    for (std::size_t j = 0; j < r; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < e; ++t) s += static_cast<double>(ground[i * e + t]) * aerial[j * e + t];
      score[j] = s;
    }
    std::vector<std::size_t> order(r);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    const auto pos = static_cast<std::size_t>(std::find(order.begin(), order.end(), truth[i]) - order.begin());
    for (std::size_t t = 0; t < ks.size(); ++t)
      if (pos < ks[t]) ++rep.hits[t];
    if (pos < rep.percent_k) ++rep.percent_hits;
    rep.truth_rank.push_back(pos);
    rep.ranking.push_back(std::move(order));
  }
  return rep;
}

}  // namespace w2w
