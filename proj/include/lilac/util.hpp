#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lilac {

/// Base class for every typed error raised by the library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace lilac

namespace lilac::util {

/// Deterministic 64-bit RNG (splitmix64 core). The uniform/normal mappings
/// are hand-rolled so streams do not depend on the C++ standard library
/// implementation; identical seeds give identical streams everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1), 53 bits of entropy.
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (two draws per call, no cached spare).
  double normal();
  /// Uniform integer in [lo, hi], inclusive. Rejection sampled, unbiased.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  /// Derives an independent stream id from two values (for per-item seeding).
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b);

 private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Content digests (FNV-1a, 64-bit). Integrity fingerprints, not crypto.
// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(const void* data, std::size_t len,
                      std::uint64_t seed = 0xcbf29ce484222325ull);
std::string hex64(std::uint64_t v);
std::uint64_t file_digest(const std::filesystem::path& p);

// ---------------------------------------------------------------------------
// Base64 (RFC 4648, with padding).
// ---------------------------------------------------------------------------

std::string base64_encode(const unsigned char* data, std::size_t n);
std::vector<unsigned char> base64_decode(std::string_view s);

// ---------------------------------------------------------------------------
// Little-endian binary buffers.
// ---------------------------------------------------------------------------

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void bytes(const void* p, std::size_t n) { raw(p, n); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::string& buffer() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  void raw(const void* p, std::size_t n) {
    buf_.append(static_cast<const char*>(p), n);
  }
  std::string buf_;
};

/// Bounds-checked reader; throws lilac::Error("truncated ...") on overrun.
class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return get<float>(); }
  double f64() { return get<double>(); }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  template <typename T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw Error("truncated payload");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// File helpers.
// ---------------------------------------------------------------------------

void write_file(const std::filesystem::path& p, std::string_view bytes);
std::string read_file(const std::filesystem::path& p);

// ---------------------------------------------------------------------------
// Worker pool helper.
// ---------------------------------------------------------------------------

/// Resolves a thread-count request: explicit value wins, else LILAC_THREADS,
/// else hardware concurrency. Always >= 1.
int resolve_threads(int requested);

/// Runs fn(i) for i in [0, n). Work items must be independent and write only
/// to their own slot; callers must reduce slot results in index order so
/// outputs never depend on scheduling.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace lilac::util
