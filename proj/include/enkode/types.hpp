#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace enkode {

using Point2 = Eigen::Vector2d;
using Vec2 = Eigen::Vector2d;

/// Row-per-point storage for sets of 2-D points or vectors.
using Points = Eigen::Matrix<double, Eigen::Dynamic, 2>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Query outside the rectangular domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Missing or non-finite data in a gridded field.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file (CSV, config, model record).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long epoch) : Error(what), epoch_(epoch) {}
  long epoch() const noexcept { return epoch_; }

 private:
  long epoch_;
};

/// Gram matrix could not be factorized even after the maximum jitter.
class FitError : public Error {
 public:
  using Error::Error;
};

/// No free candidate location remains.
class BudgetExhaustedError : public Error {
 public:
  using Error::Error;
};

class AggregationError : public Error {
 public:
  using Error::Error;
};

/// splitmix64 finalizer; used to derive independent seeds from a base seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return mix_seed(mix_seed(base) ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

}  // namespace enkode
