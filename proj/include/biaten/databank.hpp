#pragma once

// Feature banks and binary weight files.
//
// All formats are little-endian and versioned. Reals are stored as IEEE-754
// float32 and widened to double on load.
//
// FBNK (feature bank, version 1)
//   char[4] "FBNK" | u32 version | u32 n_domains | u64 n_samples | u32 C | u8 has_labels
//   per domain: u16 name_len | name (UTF-8) | u32 d_backbone | f32[n_samples*d_backbone]
//   if has_labels: u32[n_samples]
//
// SHED (source heads, version 1)
//   char[4] "SHED" | u32 version | u32 n_heads | u32 d_k | u32 C
//   per head: u16 name_len | name | u32 d_backbone | f32 bn_eps
//             f32 bottleneck_weight[d_backbone*d_k] | f32 bottleneck_bias[d_k]
//             f32 bn_scale[d_k] | f32 bn_shift[d_k]
//             f32 bn_running_mean[d_k] | f32 bn_running_var[d_k]
//             f32 classifier_weight[C*d_k] | f32 classifier_bias[C]
//
// BATN (attention ensemble parameters, version 1)
//   char[4] "BATN" | u32 version | u8 mode (0 bi-level, 1 single-level)
//   u32 heads | u32 n_domains | u32 d_k | u32 C | u32 d_emb
//   per head: [f32 W_O[C*d_emb] in bi-level mode] | f32 W_F[d_k*d_emb]
//             f32 W_QF[n_domains*d_k*d_emb]
//
// Files are written to "<path>.tmp" and renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "biaten/bi_aten.hpp"
#include "biaten/errors.hpp"
#include "biaten/numerics.hpp"
#include "biaten/objectives.hpp"
#include "biaten/source_heads.hpp"

namespace biaten {

inline constexpr std::uint32_t kBankVersion = 1;
inline constexpr std::uint32_t kHeadsVersion = 1;
inline constexpr std::uint32_t kParamsVersion = 1;

struct DomainFeatures {
  std::string name;
  Matrix features;  // n_samples x d_backbone

  bool operator==(const DomainFeatures&) const = default;
};

struct FeatureBank {
  std::size_t num_classes = 0;
  std::vector<DomainFeatures> domains;
  std::optional<Labels> labels;

  std::size_t num_domains() const { return domains.size(); }
  std::size_t num_samples() const { return domains.empty() ? 0 : domains.front().features.rows(); }

  bool operator==(const FeatureBank&) const = default;
};

inline void validate_bank(const FeatureBank& bank) {
  detail::require(!bank.domains.empty(), "bank: no domains");
  detail::require(bank.num_classes > 0, "bank: class count must be positive");
  for (const auto& d : bank.domains) {
    detail::require(d.features.rows() == bank.num_samples(),
                    "bank: domain '" + d.name + "' is not sample-aligned");
    detail::require(d.features.cols() > 0, "bank: domain '" + d.name + "' has no features");
    require_finite(d.features.flat(), "bank domain '" + d.name + "'");
  }
  if (bank.labels) {
    detail::require(bank.labels->size() == bank.num_samples(), "bank: label count mismatch");
    for (auto y : *bank.labels) detail::require(y < bank.num_classes, "bank: label out of range");
  }
}

// Heads must line up with the bank domain by domain.
inline void check_bank_heads(const FeatureBank& bank, const std::vector<SourceHead>& heads) {
  validate_heads(heads);
  detail::require(bank.num_domains() == heads.size(),
                  "bank has " + std::to_string(bank.num_domains()) + " domains but " +
                      std::to_string(heads.size()) + " heads were given");
  detail::require(bank.num_classes == heads.front().num_classes(),
                  "bank class count " + std::to_string(bank.num_classes) +
                      " != classifier outputs " + std::to_string(heads.front().num_classes()));
  for (std::size_t i = 0; i < heads.size(); ++i)
    detail::require(bank.domains[i].features.cols() == heads[i].d_backbone(),
                    "domain " + std::to_string(i) + ": bank d_backbone " +
                        std::to_string(bank.domains[i].features.cols()) + " != head d_backbone " +
                        std::to_string(heads[i].d_backbone()));
}

namespace detail {

class ByteWriter {
 public:
  void raw(std::string_view bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { little(v); }
  void u32(std::uint32_t v) { little(v); }
  void u64(std::uint64_t v) { little(v); }
  void f32(double v) { little(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f32s(std::span<const double> values) {
    for (double v : values) f32(v);
  }
  void name(const std::string& s) {
    require(s.size() <= UINT16_MAX, "name longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s);
  }
  const std::string& bytes() const { return buf_; }

 private:
  template <typename T>
  void little(T v) {
    for (std::size_t b = 0; b < sizeof(T); ++b) buf_.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  void magic(std::string_view expected) {
    if (bytes_.size() < expected.size() || bytes_.substr(0, expected.size()) != expected)
      throw BadMagicError(source_ + ": bad magic, expected \"" + std::string(expected) + "\"");
    pos_ = expected.size();
  }
  void version(std::uint32_t expected) {
    const auto v = u32();
    if (v != expected)
      throw VersionMismatchError(source_ + ": version " + std::to_string(v) + ", expected " +
                                 std::to_string(expected));
  }
  std::uint8_t u8() { return little<std::uint8_t>(); }
  std::uint16_t u16() { return little<std::uint16_t>(); }
  std::uint32_t u32() { return little<std::uint32_t>(); }
  std::uint64_t u64() { return little<std::uint64_t>(); }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  void f32s(std::span<double> out) {
    need(out.size() * 4);
    for (double& v : out) v = f32();
  }
  Matrix matrix(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    f32s(m.flat());
    return m;
  }
  Vector vector(std::size_t len) {
    Vector v(len);
    f32s(v);
    return v;
  }
  std::string name() {
    const auto len = u16();
    need(len);
    std::string s(bytes_.substr(pos_, len));
    pos_ += len;
    return s;
  }
  void finish() {
    if (pos_ != bytes_.size())
      throw InconsistentCountsError(source_ + ": " + std::to_string(bytes_.size() - pos_) +
                                    " trailing bytes after the declared contents");
  }
  void need(std::uint64_t count) {
    if (count > bytes_.size() - pos_)
      throw TruncatedFileError(source_ + ": truncated at byte " + std::to_string(pos_));
  }
  // Rejects declared sizes that cannot fit in the remaining bytes before
  // anything is allocated for them.
  void plausible(std::uint64_t elements, std::uint64_t bytes_each, const char* what) {
    if (bytes_each != 0 && elements > (bytes_.size() - pos_) / bytes_each)
      throw TruncatedFileError(source_ + ": " + what + " exceeds the file size");
  }

 private:
  template <typename T>
  T little() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b)
      v |= static_cast<T>(static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

// Writes `contents` to a temporary sibling and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// FBNK

inline std::string encode_bank(const FeatureBank& bank) {
  validate_bank(bank);
  detail::ByteWriter w;
  w.raw("FBNK");
  w.u32(kBankVersion);
  w.u32(static_cast<std::uint32_t>(bank.num_domains()));
  w.u64(bank.num_samples());
  w.u32(static_cast<std::uint32_t>(bank.num_classes));
  w.u8(bank.labels ? 1 : 0);
  for (const auto& d : bank.domains) {
    w.name(d.name);
    w.u32(static_cast<std::uint32_t>(d.features.cols()));
    w.f32s(d.features.flat());
  }
  if (bank.labels)
    for (auto y : *bank.labels) w.u32(y);
  return w.bytes();
}

inline FeatureBank decode_bank(std::string_view bytes, const std::string& source = "FBNK") {
  detail::ByteReader r(bytes, source);
  r.magic("FBNK");
  r.version(kBankVersion);
  FeatureBank bank;
  const auto n_domains = r.u32();
  const auto n_samples = r.u64();
  bank.num_classes = r.u32();
  const auto has_labels = r.u8();
  if (n_domains == 0) throw InconsistentCountsError(source + ": zero domains");
  if (bank.num_classes == 0) throw InconsistentCountsError(source + ": zero classes");
  if (has_labels > 1) throw InconsistentCountsError(source + ": has_labels flag must be 0 or 1");
  for (std::uint32_t i = 0; i < n_domains; ++i) {
    DomainFeatures d;
    d.name = r.name();
    const auto d_backbone = r.u32();
    if (d_backbone == 0) throw InconsistentCountsError(source + ": zero-width domain '" + d.name + "'");
    r.plausible(n_samples, std::uint64_t{4} * d_backbone, "feature block");
    d.features = r.matrix(n_samples, d_backbone);
    bank.domains.push_back(std::move(d));
  }
  if (has_labels) {
    r.plausible(n_samples, 4, "label block");
    Labels labels(n_samples);
    for (auto& y : labels) {
      y = r.u32();
      if (y >= bank.num_classes)
        throw InconsistentCountsError(source + ": label " + std::to_string(y) + " >= C");
    }
    bank.labels = std::move(labels);
  }
  r.finish();
  return bank;
}

inline void write_bank(const std::filesystem::path& path, const FeatureBank& bank) {
  write_file_atomic(path, encode_bank(bank));
}

inline FeatureBank read_bank(const std::filesystem::path& path) {
  return decode_bank(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// SHED

inline std::string encode_heads(const std::vector<SourceHead>& heads) {
  validate_heads(heads);
  detail::ByteWriter w;
  w.raw("SHED");
  w.u32(kHeadsVersion);
  w.u32(static_cast<std::uint32_t>(heads.size()));
  w.u32(static_cast<std::uint32_t>(heads.front().d_k()));
  w.u32(static_cast<std::uint32_t>(heads.front().num_classes()));
  for (const auto& h : heads) {
    w.name(h.domain_name);
    w.u32(static_cast<std::uint32_t>(h.d_backbone()));
    w.f32(h.bn.eps);
    w.f32s(h.bottleneck_weight.flat());
    w.f32s(h.bottleneck_bias);
    w.f32s(h.bn_scale);
    w.f32s(h.bn_shift);
    w.f32s(h.bn.running_mean);
    w.f32s(h.bn.running_var);
    w.f32s(h.classifier_weight.flat());
    w.f32s(h.classifier_bias);
  }
  return w.bytes();
}

inline std::vector<SourceHead> decode_heads(std::string_view bytes, const std::string& source = "SHED") {
  detail::ByteReader r(bytes, source);
  r.magic("SHED");
  r.version(kHeadsVersion);
  const auto n_heads = r.u32();
  const auto d_k = r.u32();
  const auto classes = r.u32();
  if (n_heads == 0 || d_k == 0 || classes == 0)
    throw InconsistentCountsError(source + ": head count, d_k and C must be positive");
  std::vector<SourceHead> heads;
  for (std::uint32_t i = 0; i < n_heads; ++i) {
    SourceHead h;
    h.domain_name = r.name();
    const auto d_backbone = r.u32();
    if (d_backbone == 0) throw InconsistentCountsError(source + ": zero d_backbone");
    h.bn.eps = r.f32();
    r.plausible(std::uint64_t{d_backbone} * d_k, 4, "bottleneck weight");
    h.bottleneck_weight = r.matrix(d_backbone, d_k);
    h.bottleneck_bias = r.vector(d_k);
    h.bn_scale = r.vector(d_k);
    h.bn_shift = r.vector(d_k);
    h.bn.running_mean = r.vector(d_k);
    h.bn.running_var = r.vector(d_k);
    r.plausible(std::uint64_t{classes} * d_k, 4, "classifier weight");
    h.classifier_weight = r.matrix(classes, d_k);
    h.classifier_bias = r.vector(classes);
    for (double v : h.bn.running_var)
      if (!(v > 0.0)) throw InconsistentCountsError(source + ": non-positive running variance");
    heads.push_back(std::move(h));
  }
  r.finish();
  return heads;
}

inline void write_heads(const std::filesystem::path& path, const std::vector<SourceHead>& heads) {
  write_file_atomic(path, encode_heads(heads));
}

inline std::vector<SourceHead> read_heads(const std::filesystem::path& path) {
  return decode_heads(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// BATN

inline std::string encode_params(const BiAtenParams& p, std::size_t classes) {
  validate_params(p);
  detail::ByteWriter w;
  w.raw("BATN");
  w.u32(kParamsVersion);
  w.u8(p.mode == EnsembleMode::kBiAten ? 0 : 1);
  w.u32(static_cast<std::uint32_t>(p.heads()));
  w.u32(static_cast<std::uint32_t>(p.domains()));
  w.u32(static_cast<std::uint32_t>(p.d_k()));
  w.u32(static_cast<std::uint32_t>(classes));
  w.u32(static_cast<std::uint32_t>(p.d_emb()));
  for (std::size_t h = 0; h < p.heads(); ++h) {
    if (p.mode == EnsembleMode::kBiAten) w.f32s(p.w_o[h].flat());
    w.f32s(p.w_f[h].flat());
    w.f32s(p.w_qf[h].flat());
  }
  return w.bytes();
}

inline BiAtenParams decode_params(std::string_view bytes, const std::string& source = "BATN") {
  detail::ByteReader r(bytes, source);
  r.magic("BATN");
  r.version(kParamsVersion);
  BiAtenParams p;
  const auto mode = r.u8();
  if (mode > 1) throw InconsistentCountsError(source + ": unknown ensemble mode");
  p.mode = mode == 0 ? EnsembleMode::kBiAten : EnsembleMode::kAten;
  const auto heads = r.u32();
  const auto domains = r.u32();
  const auto d_k = r.u32();
  const auto classes = r.u32();
  const auto d_emb = r.u32();
  if (heads == 0 || domains == 0 || d_k == 0 || classes == 0 || d_emb == 0)
    throw InconsistentCountsError(source + ": every dimension must be positive");
  for (std::uint32_t h = 0; h < heads; ++h) {
    r.plausible(std::uint64_t{domains} * d_k * d_emb, 4, "attention transforms");
    if (p.mode == EnsembleMode::kBiAten) p.w_o.push_back(r.matrix(classes, d_emb));
    p.w_f.push_back(r.matrix(d_k, d_emb));
    p.w_qf.push_back(r.matrix(std::size_t{domains} * d_k, d_emb));
  }
  r.finish();
  return p;
}

inline void write_params(const std::filesystem::path& path, const BiAtenParams& p, std::size_t classes) {
  write_file_atomic(path, encode_params(p, classes));
}

inline BiAtenParams read_params(const std::filesystem::path& path) {
  return decode_params(detail::read_file(path), path.string());
}

}  // namespace biaten
