#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace ilrec {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatXd = MatX<double>;
using VecXd = VecX<double>;
using MatXi = Eigen::MatrixXi;
using VecXi = Eigen::VectorXi;

// Token vocabulary layout shared by the whole pipeline: two reserved control
// tokens followed by the b identifier digits.
inline constexpr int kSepToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kTokenOffset = 2;

inline constexpr int vocab_size_for_base(int b) { return b + kTokenOffset; }
inline constexpr int digit_to_token(int digit) { return digit + kTokenOffset; }
inline constexpr int token_to_digit(int token) { return token - kTokenOffset; }

// Invalid configuration, malformed input files, unusable CLI invocations.
// The CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failures and violated runtime assertions; exit code 1.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

}  // namespace ilrec
