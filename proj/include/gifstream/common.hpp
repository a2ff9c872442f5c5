#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <functional>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gifstream {

/// Malformed or truncated file/bitstream data.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Coded payload failed an integrity check (count/footer/state desync).
class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A model handed to the encoder failed validation.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Vec3f = std::array<float, 3>;

// ---------------------------------------------------------------------------
// Deterministic RNG (splitmix64). All randomized behaviour in the library is
// derived from explicit seeds through this generator so results are exactly
// reproducible run to run.
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_double() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

  float uniform(float lo, float hi) {
    return lo + (hi - lo) * (float)next_double();
  }

  // Uniform integer in [0, n), n > 0.
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller.
  float normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = next_double();
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = (float)(r * std::sin(a));
    has_spare_ = true;
    return (float)(r * std::cos(a));
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  float spare_ = 0.f;
};

// Derives an independent sub-seed for a named stream of draws.
inline uint64_t sub_seed(uint64_t seed, uint64_t tag) {
  Rng r(seed ^ (tag * 0xd1342543de82ef95ull));
  return r.next_u64();
}

// ---------------------------------------------------------------------------
// Little-endian byte IO. Floats are stored bit-exact via their IEEE-754 bits.
// ---------------------------------------------------------------------------
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) {
    buf_.push_back((uint8_t)(v & 0xff));
    buf_.push_back((uint8_t)(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back((uint8_t)(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back((uint8_t)(v >> (8 * i)));
  }
  void i32(int32_t v) { u32((uint32_t)v); }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void bytes(std::span<const uint8_t> b) {
    buf_.insert(buf_.end(), b.begin(), b.end());
  }
  void ascii(const std::string& s) {
    buf_.insert(buf_.end(), s.begin(), s.end());
  }

  void patch_u64(size_t pos, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_[pos + i] = (uint8_t)(v >> (8 * i));
  }

  size_t size() const { return buf_.size(); }
  const std::vector<uint8_t>& data() const { return buf_; }
  std::vector<uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}

  uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = (uint16_t)(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= (uint32_t)data_[pos_ + i] << (8 * i);
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (uint64_t)data_[pos_ + i] << (8 * i);
    pos_ += 8;
    return v;
  }
  int32_t i32() { return (int32_t)u32(); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const uint8_t> bytes(size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  size_t pos() const { return pos_; }
  size_t remaining() const { return data_.size() - pos_; }
  void seek(size_t p) {
    if (p > data_.size()) throw FormatError("seek past end of data");
    pos_ = p;
  }

 private:
  void need(size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError("truncated data");
  }
  std::span<const uint8_t> data_;
  size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Worker-thread cap. GIFSTREAM_THREADS limits parallel sections (0 = auto);
// parallelized loops must write disjoint outputs so results do not depend on
// the thread count.
// ---------------------------------------------------------------------------
namespace detail {
inline std::atomic<int>& thread_cap_storage() {
  static std::atomic<int> cap{-1};
  return cap;
}
}  // namespace detail

inline void set_thread_cap(int n) { detail::thread_cap_storage().store(n); }

inline int thread_cap() {
  int cap = detail::thread_cap_storage().load();
  if (cap < 0) {
    cap = 0;
    if (const char* env = std::getenv("GIFSTREAM_THREADS")) {
      cap = std::max(0, std::atoi(env));
    }
    detail::thread_cap_storage().store(cap);
  }
  if (cap == 0) {
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : (int)hw;
  }
  return cap;
}

// Splits [0, count) into contiguous ranges, one per worker. The first
// exception thrown by any worker is rethrown on the calling thread.
inline void parallel_for(size_t count,
                         const std::function<void(size_t, size_t)>& fn) {
  size_t workers = (size_t)thread_cap();
  if (workers <= 1 || count < 256) {
    fn(0, count);
    return;
  }
  workers = std::min(workers, (count + 255) / 256);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr error;
  std::mutex error_mutex;
  size_t chunk = (count + workers - 1) / workers;
  for (size_t w = 0; w < workers; ++w) {
    size_t begin = w * chunk;
    size_t end = std::min(count, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace gifstream
