// SPDX-License-Identifier: Apache-2.0
//
// Dataset manifests, the EMBF embedding file format, and alignment of
// per-encoder matrices to manifest order.
//
// EMBF v1 (all integers little-endian):
//
//   offset  size          field
//   0       4             magic "EMBF" (45 4D 42 46)
//   4       2             version (u16) = 1
//   6       2             model_id byte length L (u16)
//   8       L             model_id, UTF-8
//   8+L     4             dim (u32)
//   12+L    8             count (u64)
//   20+L    ...           count x { u16 id byte length, UTF-8 id bytes }
//   ...     count*dim*4   f32 payload, row-major
//   end-4   4             CRC-32 (IEEE) of every byte after the magic

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "embfuse/vecfuse.hpp"

namespace embfuse {

inline constexpr std::uint16_t kEmbfVersion = 1;

/// CRC-32 with the IEEE 802.3 polynomial (as used by zip/png).
std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t crc = 0);

/// Serialized EMBF bytes for `matrix`.
std::vector<std::uint8_t> encode_embf(const EmbeddingMatrix& matrix);
EmbeddingMatrix decode_embf(std::span<const std::uint8_t> bytes);

/// Writes through a temporary file and an atomic rename.
void write_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& matrix);
EmbeddingMatrix read_embeddings(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// CSV (RFC 4180)

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> row_lines;  // physical line on which each row starts

  /// Column index or nullopt.
  std::optional<std::size_t> column(std::string_view name) const;
};

/// Throws SchemaError ("row N (line L): ...") on ragged rows or unterminated
/// quotes. An empty input yields an empty table with no header.
CsvTable parse_csv(std::string_view text);
CsvTable read_csv(const std::filesystem::path& path);
std::string format_csv(const CsvTable& table);

// ---------------------------------------------------------------------------
// Manifest

enum class Split { kTrain, kDev, kTest };

std::string_view split_name(Split split);
/// Accepts exactly "train", "dev", "test".
std::optional<Split> parse_split(std::string_view text);

struct ManifestRecord {
  std::string id;
  std::string text;
  int label = 0;
  Split split = Split::kTrain;
  std::optional<std::string> clean_text;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::vector<std::string> label_names;

  /// Per-label counts for one split, indexed like label_names.
  std::vector<std::size_t> class_counts(Split split) const;
  std::size_t size(Split split) const;
};

/// Builds a manifest from a table with columns id,text,label,split (others
/// are ignored apart from an optional clean_text). Labels are mapped through
/// `label_names` when given; otherwise all-integer labels are used as class
/// indices and any other labels are numbered in first-seen order.
DatasetManifest manifest_from_table(const CsvTable& table,
                                    const std::vector<std::string>* label_names = nullptr);

DatasetManifest load_manifest(const std::filesystem::path& path,
                              const std::optional<std::filesystem::path>& label_names_path = {});

/// One label name per line.
std::vector<std::string> load_label_names(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Alignment

struct AlignedSplit {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<EmbeddingMatrix> matrices;  // same order as the input matrices
};

/// Rows for the records of `splits`, in manifest order. Ids that a matrix
/// holds beyond those records are dropped. Throws AlignmentError naming the
/// model and the missing ids.
AlignedSplit align(const DatasetManifest& manifest, std::span<const EmbeddingMatrix> matrices,
                   std::span<const Split> splits);
AlignedSplit align(const DatasetManifest& manifest, std::span<const EmbeddingMatrix> matrices,
                   Split split);

/// Reorders every matrix to the row order of the first one. Throws
/// AlignmentError if the id sets differ.
std::vector<EmbeddingMatrix> align_to_first(std::span<const EmbeddingMatrix> matrices);

}  // namespace embfuse
