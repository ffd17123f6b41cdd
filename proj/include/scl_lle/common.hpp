#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace scl_lle {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto exit codes (config/usage -> 2,
// everything else -> 1).
// ---------------------------------------------------------------------------

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Small hashing utilities: FNV-1a for stream labels, SHA-1 for content
// hashes recorded in run manifests.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

inline std::uint32_t rotl32(std::uint32_t x, int r) {
  return (x << r) | (x >> (32 - r));
}

}  // namespace detail

class Sha1 {
 public:
  Sha1() { reset(); }

  void reset() {
    h_ = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
    buf_len_ = 0;
    total_ = 0;
  }

  void update(const void* data, std::size_t len) {
    total_ += len;
    updateRaw(static_cast<const unsigned char*>(data), len);
  }

  std::string hex_digest() {
    std::uint64_t bit_len = total_ * 8;
    unsigned char pad = 0x80;
    updateRaw(&pad, 1);
    unsigned char zero = 0;
    while (buf_len_ != 56) updateRaw(&zero, 1);
    unsigned char len_be[8];
    for (int i = 0; i < 8; ++i)
      len_be[i] = static_cast<unsigned char>(bit_len >> (56 - 8 * i));
    updateRaw(len_be, 8);
    static const char* k = "0123456789abcdef";
    std::string out;
    out.reserve(40);
    for (std::uint32_t w : h_) {
      for (int i = 7; i >= 0; --i) out.push_back(k[(w >> (4 * i)) & 0xF]);
    }
    return out;
  }

  static std::string hex(const void* data, std::size_t len) {
    Sha1 s;
    s.update(data, len);
    return s.hex_digest();
  }

  static std::string hex(std::string_view s) { return hex(s.data(), s.size()); }

 private:
  void updateRaw(const unsigned char* p, std::size_t len) {
    while (len > 0) {
      std::size_t take = std::min<std::size_t>(64 - buf_len_, len);
      std::copy(p, p + take, buf_.begin() + static_cast<long>(buf_len_));
      buf_len_ += take;
      p += take;
      len -= take;
      if (buf_len_ == 64) {
        process_block(buf_.data());
        buf_len_ = 0;
      }
    }
  }

  void process_block(const unsigned char* p) {
    std::uint32_t w[80];
    for (int i = 0; i < 16; ++i) {
      w[i] = (std::uint32_t(p[4 * i]) << 24) | (std::uint32_t(p[4 * i + 1]) << 16) |
             (std::uint32_t(p[4 * i + 2]) << 8) | std::uint32_t(p[4 * i + 3]);
    }
    for (int i = 16; i < 80; ++i)
      w[i] = detail::rotl32(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    std::uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4];
    for (int i = 0; i < 80; ++i) {
      std::uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6u;
      }
      std::uint32_t tmp = detail::rotl32(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = detail::rotl32(b, 30);
      b = a;
      a = tmp;
    }
    h_[0] += a;
    h_[1] += b;
    h_[2] += c;
    h_[3] += d;
    h_[4] += e;
  }

  std::array<std::uint32_t, 5> h_{};
  std::array<unsigned char, 64> buf_{};
  std::size_t buf_len_ = 0;
  std::uint64_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Parallelism cap. SCL_LLE_THREADS limits worker count for the per-file
// parallel loops used by the CLI; 0/unset means hardware concurrency.
// ---------------------------------------------------------------------------

inline unsigned max_threads() {
  if (const char* env = std::getenv("SCL_LLE_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1u : hc;
}

// Static work split; each worker owns a contiguous index range so reductions
// done per-range stay deterministic when merged in range order.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
  unsigned workers = std::min<std::size_t>(max_threads(), n == 0 ? 1 : n);
  if (workers <= 1 || n <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::size_t chunk = (n + workers - 1) / workers;
  for (unsigned t = 0; t < workers; ++t) {
    std::size_t lo = t * chunk;
    std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

inline std::string version_string() { return "0.1.0"; }

}  // namespace scl_lle
