// SPDX-License-Identifier: Apache-2.0

#include "embfuse/vecfuse.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>
#include <thread>

#include "embfuse/errors.hpp"

namespace embfuse {

namespace {

void require_sources(std::span<const VectorView> vecs) {
  if (vecs.size() < 2) {
    throw ConfigError("fusion needs at least two source vectors, got " +
                      std::to_string(vecs.size()));
  }
}

std::size_t common_dim(std::span<const VectorView> vecs) {
  require_sources(vecs);
  const std::size_t d = vecs[0].size();
  for (std::size_t k = 1; k < vecs.size(); ++k) {
    if (vecs[k].size() != d) {
      throw DimMismatch("source " + std::to_string(k) + " has dim " +
                        std::to_string(vecs[k].size()) + ", expected " + std::to_string(d));
    }
  }
  return d;
}

// The *_into kernels write a fully sized output row; callers check shapes.

void add_into(std::span<const VectorView> vecs, Accumulation acc, std::span<float> out) {
  const std::size_t d = out.size();
  if (acc == Accumulation::kDouble) {
    for (std::size_t i = 0; i < d; ++i) {
      double s = vecs[0][i];
      for (std::size_t k = 1; k < vecs.size(); ++k) s += vecs[k][i];
      out[i] = static_cast<float>(s);
    }
    return;
  }
  std::copy(vecs[0].begin(), vecs[0].end(), out.begin());
  for (std::size_t k = 1; k < vecs.size(); ++k) {
    const float* src = vecs[k].data();
    for (std::size_t i = 0; i < d; ++i) out[i] += src[i];
  }
}

void multiply_into(std::span<const VectorView> vecs, Accumulation acc, std::span<float> out) {
  const std::size_t d = out.size();
  if (acc == Accumulation::kDouble) {
    for (std::size_t i = 0; i < d; ++i) {
      double p = vecs[0][i];
      for (std::size_t k = 1; k < vecs.size(); ++k) p *= vecs[k][i];
      out[i] = static_cast<float>(p);
    }
    return;
  }
  std::copy(vecs[0].begin(), vecs[0].end(), out.begin());
  for (std::size_t k = 1; k < vecs.size(); ++k) {
    const float* src = vecs[k].data();
    for (std::size_t i = 0; i < d; ++i) out[i] *= src[i];
  }
}

void concat_into(std::span<const VectorView> vecs, std::span<float> out) {
  auto it = out.begin();
  for (const auto& v : vecs) it = std::copy(v.begin(), v.end(), it);
}

void interleave_into(std::span<const VectorView> vecs, std::span<float> out) {
  const std::size_t k = vecs.size();
  for (std::size_t j = 0; j < k; ++j) {
    const VectorView v = vecs[j];
    for (std::size_t i = 0; i < v.size(); ++i) out[i * k + j] = v[i];
  }
}

void random_interleave_into(std::span<const VectorView> vecs, Rng& rng, std::span<float> out) {
  concat_into(vecs, out);
  shuffle(out, rng);
}

void fuse_row(std::span<const VectorView> vecs, FusionMethod method, Rng* rng,
              std::span<float> out) {
  switch (method) {
    case FusionMethod::kAdd: add_into(vecs, Accumulation::kFloat, out); return;
    case FusionMethod::kMultiply: multiply_into(vecs, Accumulation::kFloat, out); return;
    case FusionMethod::kConcat: concat_into(vecs, out); return;
    case FusionMethod::kInterleave: interleave_into(vecs, out); return;
    case FusionMethod::kRandomInterleave: random_interleave_into(vecs, *rng, out); return;
  }
  throw ConfigError("unknown fusion method");
}

}  // namespace

std::string_view method_suffix(FusionMethod method) {
  switch (method) {
    case FusionMethod::kAdd: return "added";
    case FusionMethod::kMultiply: return "multiplied";
    case FusionMethod::kConcat: return "concat";
    case FusionMethod::kInterleave: return "interleaved";
    case FusionMethod::kRandomInterleave: return "randomlycombined";
  }
  throw ConfigError("unknown fusion method");
}

FusionMethod parse_method(std::string_view text) {
  if (text == "add" || text == "added" || text == "addition") return FusionMethod::kAdd;
  if (text == "multiply" || text == "multiplied" || text == "multiplication")
    return FusionMethod::kMultiply;
  if (text == "concat" || text == "concatenate" || text == "concatenation")
    return FusionMethod::kConcat;
  if (text == "interleave" || text == "interleaved") return FusionMethod::kInterleave;
  if (text == "random-interleave" || text == "random_interleave" ||
      text == "randomlycombined")
    return FusionMethod::kRandomInterleave;
  throw ConfigError("unknown fusion method '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// EmbeddingMatrix

EmbeddingMatrix::EmbeddingMatrix(std::string model_id, std::vector<std::string> sample_ids,
                                 std::size_t dim, std::vector<float> values)
    : model_id_(std::move(model_id)),
      sample_ids_(std::move(sample_ids)),
      dim_(dim),
      values_(std::move(values)) {
  if (dim_ == 0) throw ShapeError("embedding dim must be positive");
  if (values_.size() != sample_ids_.size() * dim_) {
    throw ShapeError("matrix '" + model_id_ + "' has " + std::to_string(values_.size()) +
                     " values, expected " + std::to_string(sample_ids_.size()) + " x " +
                     std::to_string(dim_));
  }
  index_.reserve(sample_ids_.size());
  for (std::size_t i = 0; i < sample_ids_.size(); ++i) {
    if (!index_.emplace(sample_ids_[i], i).second) {
      throw ValidationError("matrix '" + model_id_ + "' repeats sample id '" + sample_ids_[i] +
                            "'");
    }
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      throw ValidationError("matrix '" + model_id_ + "' has a non-finite value in row '" +
                            sample_ids_[i / dim_] + "'");
    }
  }
}

std::optional<std::size_t> EmbeddingMatrix::find(std::string_view sample_id) const {
  auto it = index_.find(std::string(sample_id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

EmbeddingMatrix EmbeddingMatrix::select(std::span<const std::size_t> row_indices) const {
  std::vector<std::string> ids;
  std::vector<float> values;
  ids.reserve(row_indices.size());
  values.reserve(row_indices.size() * dim_);
  for (std::size_t r : row_indices) {
    if (r >= rows()) throw ShapeError("row index out of range");
    ids.push_back(sample_ids_[r]);
    auto src = row(r);
    values.insert(values.end(), src.begin(), src.end());
  }
  return EmbeddingMatrix(model_id_, std::move(ids), dim_, std::move(values));
}

bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  if (a.model_id_ != b.model_id_ || a.dim_ != b.dim_ || a.sample_ids_ != b.sample_ids_) {
    return false;
  }
  // Bitwise: -0.0f and 0.0f are different files.
  return a.values_.size() == b.values_.size() &&
         std::equal(a.values_.begin(), a.values_.end(), b.values_.begin(),
                    [](float x, float y) {
                      return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
                    });
}

// ---------------------------------------------------------------------------
// FusionSpec

void FusionSpec::validate() const {
  if (sources.empty()) throw ConfigError("fusion spec has no sources");
  std::set<std::string> seen;
  for (const auto& s : sources) {
    if (s.empty()) throw ConfigError("fusion spec has an empty model id");
    if (!seen.insert(s).second) throw ConfigError("fusion spec repeats source '" + s + "'");
  }
  if (sources.size() == 1 && method) {
    throw ConfigError("a single source '" + sources[0] + "' cannot be combined with " +
                      std::string(method_suffix(*method)));
  }
  if (sources.size() > 1 && !method) {
    throw ConfigError("a fusion of " + std::to_string(sources.size()) +
                      " sources needs a combination method");
  }
}

// ---------------------------------------------------------------------------
// Vector operators

std::vector<float> fuse_add(std::span<const VectorView> vecs, Accumulation acc) {
  std::vector<float> out(common_dim(vecs));
  add_into(vecs, acc, out);
  return out;
}

std::vector<float> fuse_multiply(std::span<const VectorView> vecs, Accumulation acc) {
  std::vector<float> out(common_dim(vecs));
  multiply_into(vecs, acc, out);
  return out;
}

std::vector<float> fuse_interleave(std::span<const VectorView> vecs) {
  std::vector<float> out(common_dim(vecs) * vecs.size());
  interleave_into(vecs, out);
  return out;
}

std::vector<float> fuse_concat(std::span<const VectorView> vecs) {
  require_sources(vecs);
  std::size_t total = 0;
  for (const auto& v : vecs) total += v.size();
  std::vector<float> out(total);
  concat_into(vecs, out);
  return out;
}

std::vector<float> fuse_random_interleave(std::span<const VectorView> vecs, Rng& sample_rng) {
  std::vector<float> out(common_dim(vecs) * vecs.size());
  random_interleave_into(vecs, sample_rng, out);
  return out;
}

std::uint64_t sample_stream_seed(std::uint64_t fusion_seed, std::string_view sample_id) {
  return derive_seed(fusion_seed, sample_id);
}

std::size_t fused_dim(FusionMethod method, std::span<const std::size_t> dims) {
  if (dims.empty()) return 0;
  switch (method) {
    case FusionMethod::kAdd:
    case FusionMethod::kMultiply:
      return dims[0];
    case FusionMethod::kConcat:
    case FusionMethod::kInterleave:
    case FusionMethod::kRandomInterleave: {
      std::size_t total = 0;
      for (auto d : dims) total += d;
      return total;
    }
  }
  throw ConfigError("unknown fusion method");
}

// ---------------------------------------------------------------------------
// Matrix fusion

EmbeddingMatrix fuse_matrix(std::span<const EmbeddingMatrix> matrices, const FusionSpec& spec,
                            unsigned threads) {
  spec.validate();
  if (matrices.size() != spec.sources.size()) {
    throw ConfigError("fusion spec names " + std::to_string(spec.sources.size()) +
                      " sources but " + std::to_string(matrices.size()) +
                      " matrices were given");
  }
  for (std::size_t k = 0; k < matrices.size(); ++k) {
    if (matrices[k].model_id() != spec.sources[k]) {
      throw ConfigError("matrix " + std::to_string(k) + " is '" + matrices[k].model_id() +
                        "' but the spec expects '" + spec.sources[k] + "'");
    }
  }
  const auto& ids = matrices[0].sample_ids();
  for (std::size_t k = 1; k < matrices.size(); ++k) {
    const auto& other = matrices[k].sample_ids();
    if (other.size() != ids.size()) {
      throw AlignmentError("'" + matrices[k].model_id() + "' has " +
                           std::to_string(other.size()) + " rows, '" +
                           matrices[0].model_id() + "' has " + std::to_string(ids.size()));
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (other[i] != ids[i]) {
        throw AlignmentError("row " + std::to_string(i) + " is '" + other[i] + "' in '" +
                             matrices[k].model_id() + "' but '" + ids[i] + "' in '" +
                             matrices[0].model_id() + "'");
      }
    }
  }

  const std::string name = combination_name(spec);
  if (spec.standalone()) {
    const auto& m = matrices[0];
    return EmbeddingMatrix(name, m.sample_ids(), m.dim(),
                           std::vector<float>(m.values().begin(), m.values().end()));
  }

  const FusionMethod method = *spec.method;
  std::vector<std::size_t> dims;
  for (const auto& m : matrices) dims.push_back(m.dim());
  if (method != FusionMethod::kConcat) {
    for (std::size_t k = 1; k < dims.size(); ++k) {
      if (dims[k] != dims[0]) {
        throw DimMismatch("'" + matrices[k].model_id() + "' has dim " + std::to_string(dims[k]) +
                          ", '" + matrices[0].model_id() + "' has dim " +
                          std::to_string(dims[0]));
      }
    }
  }
  const std::size_t out_dim = fused_dim(method, dims);
  const std::size_t n = ids.size();
  std::vector<float> values(n * out_dim);

  auto work = [&](std::size_t begin, std::size_t end) {
    std::vector<VectorView> row_views(matrices.size());
    for (std::size_t i = begin; i < end; ++i) {
      for (std::size_t k = 0; k < matrices.size(); ++k) row_views[k] = matrices[k].row(i);
      std::span<float> out(values.data() + i * out_dim, out_dim);
      if (method == FusionMethod::kRandomInterleave) {
        Rng rng(sample_stream_seed(spec.seed, ids[i]));
        fuse_row(row_views, method, &rng, out);
      } else {
        fuse_row(row_views, method, nullptr, out);
      }
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    work(0, n);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(n, begin + chunk);
      if (begin >= end) break;
      pool.emplace_back(work, begin, end);
    }
  }
  return EmbeddingMatrix(name, ids, out_dim, std::move(values));
}

// ---------------------------------------------------------------------------
// Naming

std::vector<std::string> canonical_source_order(std::vector<std::string> sources) {
  std::sort(sources.begin(), sources.end());
  if (sources.size() == 2 && sources[0] == "bertweet" && sources[1] == "hatebert") {
    std::swap(sources[0], sources[1]);
  }
  return sources;
}

std::string combination_name(std::span<const std::string> sources,
                             std::optional<FusionMethod> method) {
  auto ordered = canonical_source_order({sources.begin(), sources.end()});
  std::string name;
  for (const auto& s : ordered) {
    if (!name.empty()) name += ' ';
    name += s;
  }
  if (method) {
    name += ' ';
    name += method_suffix(*method);
  }
  return name;
}

std::string combination_name(const FusionSpec& spec) {
  return combination_name(spec.sources, spec.method);
}

}  // namespace embfuse
