#pragma once

// Shared error types, deterministic RNG streams, and small utilities used
// across the library. Everything here is header-only and dependency-free.

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nestfact {

// Raised on malformed, inconsistent, or missing data. CLI maps it to exit code 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised on invalid configuration (bad field, missing key, out-of-range value).
// CLI maps it to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when an estimator diverges or a numeric routine leaves its domain.
// CLI maps it to exit code 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; decorrelates nearby seed values.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b));
}

// Deterministic substream: the same (seed, stream, step) always yields the
// same engine state, so any stage can be replayed without serializing RNGs.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t step = 0) {
  return Rng(mix64(mix64(seed, stream), step));
}

// Stable stream tags (log-friendly, avoids magic numbers at call sites).
namespace rng_stream {
inline constexpr std::uint64_t kInit = 0x01;
inline constexpr std::uint64_t kMinibatch = 0x02;
inline constexpr std::uint64_t kSample = 0x03;
inline constexpr std::uint64_t kEval = 0x04;
inline constexpr std::uint64_t kSplit = 0x05;
inline constexpr std::uint64_t kUnitDemand = 0x06;
inline constexpr std::uint64_t kGenerator = 0x07;
inline constexpr std::uint64_t kBootstrap = 0x08;
inline constexpr std::uint64_t kHalton = 0x09;
inline constexpr std::uint64_t kElasticity = 0x0a;
}  // namespace rng_stream

// FNV-1a over bytes; used for config hashes in run manifests.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Minimal dense row-major matrix. Rows are handed out as spans so numeric
// kernels can stay allocation-free; heavier linear algebra goes through Eigen.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool empty() const { return data_.empty(); }
  std::size_t size() const { return data_.size(); }

  double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

  std::span<double> row(int r) { return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)}; }
  std::span<const double> row(int r) const { return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

// Bidirectional mapping between external string identifiers and dense indices.
class IdTable {
 public:
  int intern(const std::string& id) {
    auto it = index_.find(id);
    if (it != index_.end()) return it->second;
    int idx = static_cast<int>(ids_.size());
    ids_.push_back(id);
    index_.emplace(ids_.back(), idx);
    return idx;
  }
  int lookup(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? -1 : it->second;
  }
  const std::string& name(int idx) const { return ids_.at(static_cast<std::size_t>(idx)); }
  int size() const { return static_cast<int>(ids_.size()); }
  const std::vector<std::string>& names() const { return ids_; }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, int> index_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace nestfact
