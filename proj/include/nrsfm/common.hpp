#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nrsfm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// P x 2 image coordinates, one row per landmark.
using Measurement = Eigen::Matrix<double, Eigen::Dynamic, 2>;
/// P x 3 world coordinates, one row per landmark.
using Shape = Eigen::Matrix<double, Eigen::Dynamic, 3>;
/// Diagonal of the visibility selector; true = observed.
using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

using Matrix32 = Eigen::Matrix<double, 3, 2>;

enum class Activation { Soft, Relu };
enum class Projection { Orthogonal, WeakPerspective };

enum class ErrorCode {
  InvalidArgument,
  DimensionMismatch,
  RankDeficient,
  NonFinite,
  Io,
  Parse,
  Version,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool ok, ErrorCode code, const std::string& what) {
  if (!ok) fail(code, what);
}

const char* to_string(Activation a);
const char* to_string(Projection p);
Activation parse_activation(const std::string& s);
Projection parse_projection(const std::string& s);

inline Mask all_visible(Eigen::Index points) {
  return Mask::Constant(points, true);
}

}  // namespace nrsfm
