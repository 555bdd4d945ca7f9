// SPDX-License-Identifier: Apache-2.0

#include "embfuse/embstore.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "byte_io.hpp"
#include "embfuse/errors.hpp"

namespace embfuse {

namespace {

constexpr std::uint8_t kMagic[4] = {0x45, 0x4D, 0x42, 0x46};

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes, std::uint32_t crc) {
  // zlib takes uInt lengths; feed in chunks for very large payloads.
  uLong c = crc;
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    c = ::crc32(c, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

// ---------------------------------------------------------------------------
// EMBF

std::vector<std::uint8_t> encode_embf(const EmbeddingMatrix& matrix) {
  if (matrix.dim() > 0xFFFFFFFFu) throw ValidationError("dim does not fit in u32");
  for (float v : matrix.values()) {
    if (!std::isfinite(v)) throw ValidationError("matrix '" + matrix.model_id() + "' is not finite");
  }
  ByteWriter w;
  w.put_raw(kMagic);
  w.put_u16(kEmbfVersion);
  w.put_string16(matrix.model_id(), "model id");
  w.put_u32(static_cast<std::uint32_t>(matrix.dim()));
  w.put_u64(matrix.rows());
  for (const auto& id : matrix.sample_ids()) w.put_string16(id, "sample id");
  for (float v : matrix.values()) w.put_f32(v);
  const std::uint32_t crc = crc32(w.view().subspan(4));
  w.put_u32(crc);
  return w.take();
}

EmbeddingMatrix decode_embf(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 6 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw FormatError("not an EMBF file (bad magic or too short)");
  }
  ByteReader r(bytes, 4, "EMBF");
  const auto version = static_cast<std::uint16_t>(r.get_le(2));
  if (version == 0) throw FormatError("EMBF version 0 is invalid");
  if (version > kEmbfVersion) {
    throw VersionError("EMBF version " + std::to_string(version) + " is newer than supported " +
                       std::to_string(kEmbfVersion));
  }
  if (bytes.size() < 4 + 2 + 4) throw FormatError("EMBF file is truncated");
  const auto body = bytes.subspan(4, bytes.size() - 8);
  const std::uint32_t stored = load_u32_le(bytes.last<4>());
  if (crc32(body) != stored) throw ChecksumError("EMBF checksum mismatch");

  ByteReader body_reader(bytes.first(bytes.size() - 4), 6, "EMBF");
  std::string model_id = body_reader.get_string16();
  const auto dim = static_cast<std::size_t>(body_reader.get_le(4));
  const std::uint64_t count = body_reader.get_le(8);
  if (dim == 0) throw FormatError("EMBF dim is zero");
  // Each id costs at least 2 bytes, each row dim*4.
  if (count > body_reader.remaining() / 2) throw FormatError("EMBF count exceeds file size");
  std::vector<std::string> ids;
  ids.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) ids.push_back(body_reader.get_string16());
  if (body_reader.remaining() != count * dim * 4) {
    throw FormatError("EMBF payload is " + std::to_string(body_reader.remaining()) +
                      " bytes, expected " + std::to_string(count * dim * 4));
  }
  std::vector<float> values(count * dim);
  for (auto& v : values) v = body_reader.get_f32();
  try {
    return EmbeddingMatrix(std::move(model_id), std::move(ids), dim, std::move(values));
  } catch (const ValidationError& e) {
    throw FormatError(std::string("EMBF content is invalid: ") + e.what());
  }
}

void write_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& matrix) {
  write_file_atomic(path, encode_embf(matrix));
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  return decode_embf(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// CSV

std::optional<std::size_t> CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  return std::nullopt;
}

CsvTable parse_csv(std::string_view text) {
  CsvTable table;
  if (text.size() >= 3 && text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);

  std::vector<std::vector<std::string>> records;
  std::vector<std::size_t> lines;
  std::vector<std::string> record;
  std::string field;
  std::size_t line = 1;
  std::size_t record_line = 1;
  bool in_quotes = false;
  bool field_was_quoted = false;
  bool record_open = false;

  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_was_quoted = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    lines.push_back(record_line);
    record.clear();
    record_open = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (!record_open) {
      record_open = true;
      record_line = line;
    }
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      if (!field.empty() || field_was_quoted) {
        throw SchemaError("row " + std::to_string(records.size()) + " (line " +
                          std::to_string(line) + "): stray quote inside unquoted field");
      }
      in_quotes = true;
      field_was_quoted = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      // CRLF: handled at the '\n'.
    } else if (c == '\n') {
      end_record();
      ++line;
    } else {
      if (field_was_quoted) {
        throw SchemaError("row " + std::to_string(records.size()) + " (line " +
                          std::to_string(line) + "): text after closing quote");
      }
      field.push_back(c);
    }
  }
  if (in_quotes) {
    throw SchemaError("row " + std::to_string(records.size()) + " (line " +
                      std::to_string(record_line) + "): unterminated quoted field");
  }
  if (record_open) end_record();

  if (records.empty()) return table;
  table.header = std::move(records[0]);
  for (std::size_t r = 1; r < records.size(); ++r) {
    // A lone empty field is a blank line.
    if (records[r].size() == 1 && records[r][0].empty()) continue;
    if (records[r].size() != table.header.size()) {
      throw SchemaError("row " + std::to_string(r) + " (line " + std::to_string(lines[r]) +
                        "): expected " + std::to_string(table.header.size()) + " fields, got " +
                        std::to_string(records[r].size()));
    }
    table.rows.push_back(std::move(records[r]));
    table.row_lines.push_back(lines[r]);
  }
  return table;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str());
}

std::string format_csv(const CsvTable& table) {
  std::string out;
  auto put_row = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out.push_back(',');
      const auto& f = row[i];
      const bool quote = f.find_first_of(",\"\r\n") != std::string::npos;
      if (!quote) {
        out += f;
        continue;
      }
      out.push_back('"');
      for (char c : f) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
      }
      out.push_back('"');
    }
    out.push_back('\n');
  };
  if (!table.header.empty()) put_row(table.header);
  for (const auto& row : table.rows) put_row(row);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  return "?";
}

std::optional<Split> parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "dev") return Split::kDev;
  if (text == "test") return Split::kTest;
  return std::nullopt;
}

std::vector<std::size_t> DatasetManifest::class_counts(Split split) const {
  std::vector<std::size_t> counts(label_names.size(), 0);
  for (const auto& r : records) {
    if (r.split == split) ++counts[static_cast<std::size_t>(r.label)];
  }
  return counts;
}

std::size_t DatasetManifest::size(Split split) const {
  return static_cast<std::size_t>(std::count_if(
      records.begin(), records.end(), [&](const ManifestRecord& r) { return r.split == split; }));
}

DatasetManifest manifest_from_table(const CsvTable& table,
                                    const std::vector<std::string>* label_names) {
  DatasetManifest m;
  if (table.header.empty()) {
    if (label_names) m.label_names = *label_names;
    return m;
  }
  const auto id_col = table.column("id");
  const auto text_col = table.column("text");
  const auto label_col = table.column("label");
  const auto split_col = table.column("split");
  const auto clean_col = table.column("clean_text");
  for (auto [col, name] : {std::pair{id_col, "id"}, std::pair{text_col, "text"},
                           std::pair{label_col, "label"}, std::pair{split_col, "split"}}) {
    if (!col) throw SchemaError(std::string("manifest is missing column '") + name + "'");
  }

  const auto where = [&](std::size_t r) {
    return "row " + std::to_string(r + 1) + " (line " + std::to_string(table.row_lines[r]) + ")";
  };

  // Label mapping.
  std::map<std::string, int> label_index;
  if (label_names) {
    m.label_names = *label_names;
    for (std::size_t i = 0; i < label_names->size(); ++i) {
      label_index.emplace((*label_names)[i], static_cast<int>(i));
    }
  } else {
    bool all_int = !table.rows.empty();
    int max_label = -1;
    for (const auto& row : table.rows) {
      const auto& s = row[*label_col];
      int v = 0;
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (s.empty() || ec != std::errc{} || p != s.data() + s.size() || v < 0 || v > 65535) {
        all_int = false;
        break;
      }
      max_label = std::max(max_label, v);
    }
    if (all_int) {
      for (int i = 0; i <= max_label; ++i) {
        m.label_names.push_back(std::to_string(i));
        label_index.emplace(std::to_string(i), i);
      }
    } else {
      for (const auto& row : table.rows) {
        const auto& s = row[*label_col];
        if (label_index.emplace(s, static_cast<int>(m.label_names.size())).second) {
          m.label_names.push_back(s);
        }
      }
    }
  }

  std::unordered_map<std::string, std::size_t> seen;
  m.records.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    ManifestRecord rec;
    rec.id = row[*id_col];
    if (rec.id.empty()) throw SchemaError(where(r) + ": empty id");
    if (!seen.emplace(rec.id, r).second) {
      throw DuplicateIdError(where(r) + ": duplicate id '" + rec.id + "'");
    }
    rec.text = row[*text_col];
    auto li = label_index.find(row[*label_col]);
    if (li == label_index.end()) {
      throw SchemaError(where(r) + ": unknown label '" + row[*label_col] + "'");
    }
    rec.label = li->second;
    const auto split = parse_split(row[*split_col]);
    if (!split) {
      throw SchemaError(where(r) + ": split '" + row[*split_col] +
                        "' is not one of train, dev, test");
    }
    rec.split = *split;
    if (clean_col) rec.clean_text = row[*clean_col];
    m.records.push_back(std::move(rec));
  }
  return m;
}

std::vector<std::string> load_label_names(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  return names;
}

DatasetManifest load_manifest(const std::filesystem::path& path,
                              const std::optional<std::filesystem::path>& label_names_path) {
  const CsvTable table = read_csv(path);
  if (label_names_path) {
    const auto names = load_label_names(*label_names_path);
    return manifest_from_table(table, &names);
  }
  return manifest_from_table(table);
}

// ---------------------------------------------------------------------------
// Alignment

AlignedSplit align(const DatasetManifest& manifest, std::span<const EmbeddingMatrix> matrices,
                   std::span<const Split> splits) {
  AlignedSplit out;
  for (const auto& r : manifest.records) {
    if (std::find(splits.begin(), splits.end(), r.split) == splits.end()) continue;
    out.ids.push_back(r.id);
    out.labels.push_back(r.label);
  }
  for (const auto& m : matrices) {
    std::vector<std::size_t> rows;
    std::vector<std::string> missing;
    rows.reserve(out.ids.size());
    for (const auto& id : out.ids) {
      if (auto i = m.find(id)) {
        rows.push_back(*i);
      } else {
        missing.push_back(id);
      }
    }
    if (!missing.empty()) {
      std::string list;
      for (std::size_t i = 0; i < missing.size() && i < 10; ++i) {
        list += (i ? ", " : "") + missing[i];
      }
      if (missing.size() > 10) list += ", ... (" + std::to_string(missing.size()) + " total)";
      throw AlignmentError("'" + m.model_id() + "' lacks " + std::to_string(missing.size()) +
                           " manifest id(s): " + list);
    }
    out.matrices.push_back(m.select(rows));
  }
  return out;
}

AlignedSplit align(const DatasetManifest& manifest, std::span<const EmbeddingMatrix> matrices,
                   Split split) {
  const Split one[] = {split};
  return align(manifest, matrices, one);
}

std::vector<EmbeddingMatrix> align_to_first(std::span<const EmbeddingMatrix> matrices) {
  std::vector<EmbeddingMatrix> out;
  if (matrices.empty()) return out;
  const auto& ids = matrices[0].sample_ids();
  out.push_back(matrices[0]);
  for (std::size_t k = 1; k < matrices.size(); ++k) {
    const auto& m = matrices[k];
    std::vector<std::size_t> rows;
    rows.reserve(ids.size());
    for (const auto& id : ids) {
      auto i = m.find(id);
      if (!i) {
        throw AlignmentError("'" + m.model_id() + "' has no row for id '" + id + "' found in '" +
                             matrices[0].model_id() + "'");
      }
      rows.push_back(*i);
    }
    if (m.rows() != ids.size()) {
      for (const auto& id : m.sample_ids()) {
        if (!matrices[0].find(id)) {
          throw AlignmentError("'" + matrices[0].model_id() + "' has no row for id '" + id +
                               "' found in '" + m.model_id() + "'");
        }
      }
    }
    out.push_back(m.select(rows));
  }
  return out;
}

}  // namespace embfuse
