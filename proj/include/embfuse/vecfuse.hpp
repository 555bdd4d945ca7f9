// SPDX-License-Identifier: Apache-2.0
//
// Embedding combination operators: addition, element-wise multiplication,
// concatenation, round-robin interleaving and per-sample random interleaving,
// over single vectors and over whole sample-aligned matrices.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "embfuse/rng.hpp"

namespace embfuse {

using EmbeddingVector = std::vector<float>;
using VectorView = std::span<const float>;

enum class FusionMethod { kAdd, kMultiply, kConcat, kInterleave, kRandomInterleave };

inline constexpr FusionMethod kAllFusionMethods[] = {
    FusionMethod::kAdd, FusionMethod::kMultiply, FusionMethod::kConcat,
    FusionMethod::kInterleave, FusionMethod::kRandomInterleave};

/// Report suffix used in combination names: "added", "multiplied", "concat",
/// "interleaved", "randomlycombined".
std::string_view method_suffix(FusionMethod method);

/// Accepts either the report suffix or the short verb ("add", "multiply",
/// "interleave", "random-interleave"). Throws ConfigError otherwise.
FusionMethod parse_method(std::string_view text);

/// Accumulator precision for Add/Multiply folds. Storage is always f32.
enum class Accumulation { kFloat, kDouble };

/// Dense, row-major, sample-keyed embedding table from one encoder.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;

  /// Validates shape, id uniqueness and finiteness of every value.
  EmbeddingMatrix(std::string model_id, std::vector<std::string> sample_ids, std::size_t dim,
                  std::vector<float> values);

  const std::string& model_id() const noexcept { return model_id_; }
  const std::vector<std::string>& sample_ids() const noexcept { return sample_ids_; }
  std::size_t rows() const noexcept { return sample_ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  std::span<const float> values() const noexcept { return values_; }
  std::span<const float> row(std::size_t i) const noexcept {
    return std::span<const float>(values_).subspan(i * dim_, dim_);
  }

  std::optional<std::size_t> find(std::string_view sample_id) const;

  /// Rows selected by index, in the given order, keeping this model id.
  EmbeddingMatrix select(std::span<const std::size_t> row_indices) const;

  friend bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b);

 private:
  std::string model_id_;
  std::vector<std::string> sample_ids_;
  std::size_t dim_ = 0;
  std::vector<float> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Which encoders to combine and how. A single source with no method is the
/// standalone (pass-through) evaluation.
struct FusionSpec {
  std::vector<std::string> sources;
  std::optional<FusionMethod> method;
  std::uint64_t seed = 0;

  bool standalone() const noexcept { return !method.has_value(); }

  /// Throws ConfigError on empty or duplicate sources, a method on a single
  /// source, or a multi-source spec without a method.
  void validate() const;
};

std::vector<float> fuse_add(std::span<const VectorView> vecs,
                            Accumulation acc = Accumulation::kFloat);
std::vector<float> fuse_multiply(std::span<const VectorView> vecs,
                                 Accumulation acc = Accumulation::kFloat);
std::vector<float> fuse_interleave(std::span<const VectorView> vecs);
std::vector<float> fuse_concat(std::span<const VectorView> vecs);

/// Uniform Fisher-Yates permutation of fuse_concat(vecs), driven by
/// sample_rng. Requires equal dims like the other positional operators.
std::vector<float> fuse_random_interleave(std::span<const VectorView> vecs, Rng& sample_rng);

/// Seed of the per-sample stream used by random interleaving.
std::uint64_t sample_stream_seed(std::uint64_t fusion_seed, std::string_view sample_id);

/// Output dimension of `method` over sources of the given dims.
std::size_t fused_dim(FusionMethod method, std::span<const std::size_t> dims);

/// Applies the spec row by row. Every matrix must carry the same sample ids
/// in the same order and the matrices must be given in spec.sources order.
/// Rows may be split across `threads` workers; output is identical for any
/// thread count.
EmbeddingMatrix fuse_matrix(std::span<const EmbeddingMatrix> matrices, const FusionSpec& spec,
                            unsigned threads = 1);

/// Source order used in report labels: alphabetical, except that the
/// HateBERT/BERTweet pair is printed "hatebert bertweet" as in the published
/// result tables.
std::vector<std::string> canonical_source_order(std::vector<std::string> sources);

/// "bert bertweet hatebert concat", "hatebert", ...
std::string combination_name(std::span<const std::string> sources,
                             std::optional<FusionMethod> method);
std::string combination_name(const FusionSpec& spec);

}  // namespace embfuse
