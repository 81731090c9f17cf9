#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "treednn/error.hpp"
#include "treednn/layers.hpp"
#include "treednn/model.hpp"

// TreeBundle container, all integers little-endian:
//
//   "TDNN" | version u16 (=1) | section count u32
//   section*:
//     role u8 (0 trunk, 1 branch) | name len u16 | name | spec len u32 | spec
//     | param count u64 | params f32[count] in byte-wise name order
//     | CRC-32 u32 over every preceding byte of the section
//
// The trunk section comes first; each branch section plus the trunk section
// reconstructs one complete task model.
namespace treednn::bundle {

inline constexpr char kMagic[4] = {'T', 'D', 'N', 'N'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 10;

enum class Role : std::uint8_t { kTrunk = 0, kBranch = 1 };

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = ::crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

// Fixed per-section bytes besides the name, spec text and parameter payload.
inline constexpr std::size_t kSectionFixedBytes = 1 + 2 + 4 + 8 + 4;

inline std::size_t section_size(std::size_t name_len, std::size_t spec_len, std::uint64_t params) {
  return kSectionFixedBytes + name_len + spec_len + 4 * params;
}

namespace detail {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::size_t size() const { return bytes_.size(); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

inline std::uint64_t get_le(const std::uint8_t* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

inline void write_section(Writer& w, Role role, const std::string& name, const std::string& spec,
                          const std::vector<Param*>& params) {
  const std::size_t start = w.size();
  if (name.size() > 0xFFFF) throw FormatError("section name too long: " + name);
  w.u8(static_cast<std::uint8_t>(role));
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.raw(name);
  w.u32(static_cast<std::uint32_t>(spec.size()));
  w.raw(spec);
  const auto ordered = sorted_by_name(params);
  w.u64(param_count(ordered));
  for (const Param* p : ordered)
    for (float v : p->value.data()) w.f32(v);
  w.u32(crc32_of(std::span<const std::uint8_t>(w.bytes()).subspan(start)));
}

}  // namespace detail

inline std::string trunk_spec_text(const Trunk& trunk) {
  std::ostringstream os;
  os << "input=";
  for (std::size_t i = 0; i < trunk.input_shape().size(); ++i) os << (i ? "," : "") << trunk.input_shape()[i];
  os << '\n' << specs_to_text(trunk.specs());
  return os.str();
}

inline std::string branch_spec_text(const Branch& branch) {
  return "classes=" + std::to_string(branch.num_classes()) + "\n" + specs_to_text(branch.specs());
}

inline std::vector<std::uint8_t> encode(const TreeModel& model) {
  detail::Writer w;
  w.raw(std::string_view(kMagic, 4));
  w.u16(kVersion);
  w.u32(static_cast<std::uint32_t>(1 + model.k()));
  detail::write_section(w, Role::kTrunk, "trunk", trunk_spec_text(model.trunk()), model.trunk().parameters());
  for (const auto& b : model.branches()) {
    detail::write_section(w, Role::kBranch, b.task_id(), branch_spec_text(b), b.parameters());
  }
  return std::move(w.bytes());
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

// Writes the model as a TreeBundle; returns the number of bytes written.
inline std::size_t serialize_split(const TreeModel& model, const std::string& path) {
  const auto bytes = encode(model);
  write_file(path, bytes);
  return bytes.size();
}

// ---------------------------------------------------------------------------
// Reading.

// Random-access byte source (a file on disk or an in-memory image).
class Source {
 public:
  virtual ~Source() = default;
  virtual std::size_t size() const = 0;
  virtual void read(std::size_t offset, std::span<std::uint8_t> out) const = 0;

  std::vector<std::uint8_t> read(std::size_t offset, std::size_t n) const {
    std::vector<std::uint8_t> out(n);
    read(offset, out);
    return out;
  }
};

class MemorySource final : public Source {
 public:
  explicit MemorySource(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}
  std::size_t size() const override { return bytes_.size(); }
  void read(std::size_t offset, std::span<std::uint8_t> out) const override {
    if (offset > bytes_.size() || out.size() > bytes_.size() - offset) throw FormatError("read past end of bundle");
    std::memcpy(out.data(), bytes_.data() + offset, out.size());
  }

 private:
  std::vector<std::uint8_t> bytes_;
};

class FileSource final : public Source {
 public:
  explicit FileSource(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open bundle: " + path);
    in_.seekg(0, std::ios::end);
    size_ = static_cast<std::size_t>(in_.tellg());
  }
  std::size_t size() const override { return size_; }
  void read(std::size_t offset, std::span<std::uint8_t> out) const override {
    if (offset > size_ || out.size() > size_ - offset) throw FormatError("read past end of bundle " + path_);
    in_.clear();
    in_.seekg(std::streamoff(offset));
    in_.read(reinterpret_cast<char*>(out.data()), std::streamsize(out.size()));
    if (!in_) throw IoError("read failed: " + path_);
  }

 private:
  std::string path_;
  mutable std::ifstream in_;
  std::size_t size_ = 0;
};

struct SectionEntry {
  std::size_t ordinal = 0;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool corrupt = false;  // framing could not be parsed or CRC failed
  Role role = Role::kBranch;
  std::string name;
  std::string spec_text;
  std::uint64_t param_count = 0;
  std::string error;
};

struct Index {
  std::uint32_t declared_sections = 0;
  std::vector<SectionEntry> sections;
  bool resynchronized = false;  // framing was damaged; sections were located by CRC scan

  const SectionEntry& trunk() const {
    if (sections.empty() || sections[0].corrupt || sections[0].role != Role::kTrunk) {
      if (!sections.empty() && sections[0].corrupt) {
        throw ChecksumError("trunk section is corrupt: " + sections[0].error);
      }
      throw FormatError("bundle has no trunk section");
    }
    return sections[0];
  }

  const SectionEntry& branch(const std::string& task) const {
    for (const auto& s : sections)
      if (!s.corrupt && s.role == Role::kBranch && s.name == task) return s;
    throw LookupError("bundle has no branch '" + task + "'");
  }

  std::vector<std::string> task_ids() const {
    std::vector<std::string> out;
    for (const auto& s : sections)
      if (!s.corrupt && s.role == Role::kBranch) out.push_back(s.name);
    return out;
  }
};

namespace detail {

inline bool plausible_text(std::span<const std::uint8_t> bytes, bool allow_newline) {
  for (std::uint8_t c : bytes) {
    if (c == '\n' && allow_newline) continue;
    if (c < 0x20 || c == 0x7F) return false;
  }
  return true;
}

// Parses the section framing at `offset`; nullopt if it cannot be a section.
inline std::optional<SectionEntry> frame_at(const Source& src, std::size_t offset) {
  const std::size_t end = src.size();
  auto fits = [&](std::size_t at, std::size_t n) { return at <= end && n <= end - at; };
  if (!fits(offset, 3)) return std::nullopt;
  const auto head = src.read(offset, 3);
  if (head[0] > 1) return std::nullopt;
  SectionEntry e;
  e.offset = offset;
  e.role = static_cast<Role>(head[0]);
  const std::size_t name_len = get_le(head.data() + 1, 2);
  std::size_t at = offset + 3;
  if (name_len == 0 || !fits(at, name_len + 4)) return std::nullopt;
  const auto name = src.read(at, name_len);
  if (!plausible_text(name, false)) return std::nullopt;
  e.name.assign(name.begin(), name.end());
  at += name_len;
  const std::size_t spec_len = get_le(src.read(at, 4).data(), 4);
  at += 4;
  if (!fits(at, spec_len) || !fits(at + spec_len, 8)) return std::nullopt;
  const auto spec = src.read(at, spec_len);
  if (!plausible_text(spec, true)) return std::nullopt;
  e.spec_text.assign(spec.begin(), spec.end());
  at += spec_len;
  e.param_count = get_le(src.read(at, 8).data(), 8);
  at += 8;
  if (e.param_count > (end - at) / 4 || !fits(at + 4 * e.param_count, 4)) return std::nullopt;
  e.size = section_size(name_len, spec_len, e.param_count);
  return e;
}

inline bool crc_ok(const Source& src, const SectionEntry& e) {
  const auto bytes = src.read(e.offset, e.size);
  const std::uint32_t stored = static_cast<std::uint32_t>(get_le(bytes.data() + e.size - 4, 4));
  return crc32_of(std::span<const std::uint8_t>(bytes).first(e.size - 4)) == stored;
}

// Locates sections by checksum alone. A damaged region between two valid
// sections is reported as one corrupt section.
inline std::vector<SectionEntry> resync_scan(const Source& src) {
  std::vector<SectionEntry> out;
  auto valid_at = [&](std::size_t p) -> std::optional<SectionEntry> {
    auto e = frame_at(src, p);
    if (e && crc_ok(src, *e)) return e;
    return std::nullopt;
  };
  std::size_t p = kHeaderSize;
  while (p < src.size()) {
    if (auto e = valid_at(p)) {
      e->ordinal = out.size();
      p = e->offset + e->size;
      out.push_back(std::move(*e));
      continue;
    }
    std::size_t q = p + 1;
    while (q < src.size() && !valid_at(q)) ++q;
    SectionEntry bad;
    bad.ordinal = out.size();
    bad.offset = p;
    bad.size = q - p;
    bad.corrupt = true;
    bad.role = out.empty() ? Role::kTrunk : Role::kBranch;
    bad.error = "section " + std::to_string(bad.ordinal) + " at offset " + std::to_string(p) +
                ": damaged framing or checksum mismatch";
    out.push_back(std::move(bad));
    p = q;
  }
  return out;
}

}  // namespace detail

// Reads the header and walks the section framing without touching parameter
// payloads. If the framing is inconsistent, falls back to a checksum scan so
// that damage stays confined to the section that holds it.
inline Index read_index(const Source& src) {
  if (src.size() < kHeaderSize) throw FormatError("bundle shorter than its header");
  const auto header = src.read(0, kHeaderSize);
  if (std::memcmp(header.data(), kMagic, 4) != 0) throw FormatError("bad magic: not a TreeBundle");
  const auto version = detail::get_le(header.data() + 4, 2);
  if (version != kVersion) throw FormatError("unsupported bundle version " + std::to_string(version));
  Index index;
  index.declared_sections = static_cast<std::uint32_t>(detail::get_le(header.data() + 6, 4));

  std::size_t p = kHeaderSize;
  bool framed = index.declared_sections >= 1;
  for (std::uint32_t i = 0; framed && i < index.declared_sections; ++i) {
    auto e = detail::frame_at(src, p);
    if (!e || (i == 0) != (e->role == Role::kTrunk)) {
      framed = false;
      break;
    }
    e->ordinal = i;
    p = e->offset + e->size;
    index.sections.push_back(std::move(*e));
  }
  if (framed && p == src.size()) return index;

  index.sections = detail::resync_scan(src);
  index.resynchronized = true;
  if (index.sections.size() != index.declared_sections) {
    // The count field itself is not covered by a section checksum.
    bool any_corrupt = false;
    for (const auto& s : index.sections) any_corrupt = any_corrupt || s.corrupt;
    if (!any_corrupt) {
      throw FormatError("header declares " + std::to_string(index.declared_sections) + " sections, found " +
                        std::to_string(index.sections.size()));
    }
  }
  return index;
}

struct SectionStatus {
  std::size_t ordinal = 0;
  std::string name;
  bool ok = false;
  std::string error;
};

// Checks every section's CRC independently.
inline std::vector<SectionStatus> verify(const Source& src) {
  const Index index = read_index(src);
  std::vector<SectionStatus> out;
  for (const auto& s : index.sections) {
    SectionStatus st{s.ordinal, s.name, !s.corrupt, s.error};
    if (st.ok && !detail::crc_ok(src, s)) {
      st.ok = false;
      st.error = "section " + std::to_string(s.ordinal) + " '" + s.name + "': checksum mismatch";
    }
    out.push_back(std::move(st));
  }
  return out;
}

struct LoadedSection {
  SectionEntry entry;
  std::vector<float> params;
};

// Reads one section in full and validates its checksum.
inline LoadedSection load_section(const Source& src, const SectionEntry& e) {
  if (e.corrupt) throw ChecksumError(e.error);
  const auto bytes = src.read(e.offset, e.size);
  const auto stored = static_cast<std::uint32_t>(detail::get_le(bytes.data() + e.size - 4, 4));
  if (crc32_of(std::span<const std::uint8_t>(bytes).first(e.size - 4)) != stored) {
    throw ChecksumError("section " + std::to_string(e.ordinal) + " '" + e.name + "': checksum mismatch");
  }
  LoadedSection out{e, std::vector<float>(e.param_count)};
  const std::uint8_t* payload = bytes.data() + (e.size - 4 - 4 * e.param_count);
  for (std::uint64_t i = 0; i < e.param_count; ++i) {
    out.params[i] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(payload + 4 * i, 4)));
  }
  return out;
}

namespace detail {

inline std::pair<std::string, std::string> split_first_line(const std::string& text, const char* key) {
  const auto nl = text.find('\n');
  const std::string first = text.substr(0, nl);
  const std::string prefix = std::string(key) + "=";
  if (first.rfind(prefix, 0) != 0) throw FormatError("section spec must start with '" + prefix + "'");
  return {first.substr(prefix.size()), nl == std::string::npos ? std::string() : text.substr(nl + 1)};
}

inline void assign_params(const std::vector<Param*>& params, const LoadedSection& s) {
  const auto ordered = sorted_by_name(params);
  if (param_count(ordered) != s.params.size()) {
    throw FormatError("section '" + s.entry.name + "' holds " + std::to_string(s.params.size()) +
                      " values, architecture needs " + std::to_string(param_count(ordered)));
  }
  std::size_t at = 0;
  for (Param* p : ordered) {
    auto dst = p->value.mutable_data();
    std::copy_n(s.params.begin() + std::ptrdiff_t(at), dst.size(), dst.begin());
    at += dst.size();
  }
}

}  // namespace detail

inline Trunk decode_trunk(const LoadedSection& s) {
  if (s.entry.role != Role::kTrunk) throw FormatError("section '" + s.entry.name + "' is not a trunk");
  auto [shape_text, body] = detail::split_first_line(s.entry.spec_text, "input");
  Shape input;
  std::istringstream is(shape_text);
  std::string tok;
  while (std::getline(is, tok, ',')) input.push_back(treednn::detail::parse_size(tok, shape_text));
  Trunk trunk = build_trunk(input, specs_from_text(body), 0);
  detail::assign_params(trunk.parameters(), s);
  return trunk;
}

inline Branch decode_branch(const LoadedSection& s) {
  if (s.entry.role != Role::kBranch) throw FormatError("section '" + s.entry.name + "' is not a branch");
  auto [classes, body] = detail::split_first_line(s.entry.spec_text, "classes");
  BranchSpec spec{s.entry.name, specs_from_text(body), treednn::detail::parse_size(classes, classes)};
  Branch branch = build_branch(spec, 0);
  detail::assign_params(branch.parameters(), s);
  return branch;
}

// Full load of every section into a TreeModel.
inline TreeModel load(const Source& src) {
  const Index index = read_index(src);
  Trunk trunk = decode_trunk(load_section(src, index.trunk()));
  std::vector<Branch> branches;
  for (std::size_t i = 1; i < index.sections.size(); ++i) {
    branches.push_back(decode_branch(load_section(src, index.sections[i])));
  }
  return TreeModel(std::move(trunk), std::move(branches));
}

inline TreeModel load_file(const std::string& path) { return load(FileSource(path)); }

}  // namespace treednn::bundle
