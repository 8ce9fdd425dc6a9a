#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

/// Small dense-network toolkit: batched forward passes with a recorded tape,
/// reverse-mode gradients, Adam, and the probability helpers the policy and
/// discriminators share.
namespace crowdiv::nn {

/// Row-major so parameter blocks serialize in row-major order directly.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

enum class Activation : std::uint8_t { relu = 0, tanh = 1, identity = 2 };

const char* to_string(Activation a);

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DenseLayer {
  Matrix weight;  ///< out x in
  Vector bias;    ///< out
  Activation activation = Activation::identity;

  int input_dim() const { return static_cast<int>(weight.cols()); }
  int output_dim() const { return static_cast<int>(weight.rows()); }
};

/// Activations recorded by a forward pass, consumed by backward().
struct Tape {
  std::vector<Matrix> inputs;   ///< input of each layer
  std::vector<Matrix> outputs;  ///< post-activation output of each layer
};

class DenseNet {
 public:
  DenseNet() = default;
  /// dims = {input, hidden..., output}; one activation per layer.
  DenseNet(std::vector<int> dims, std::vector<Activation> activations);

  int input_dim() const;
  int output_dim() const;
  std::size_t num_layers() const { return layers_.size(); }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  /// Rows of x are samples.
  Matrix forward(const Matrix& x) const;
  Matrix forward(const Matrix& x, Tape& tape) const;

  /// Accumulates dL/dparams into `grads` (same shape as *this) and returns dL/dx.
  Matrix backward(const Tape& tape, const Matrix& grad_output, DenseNet& grads) const;

  /// Orthogonal init scaled by `hidden_gain` for all but the last layer,
  /// `output_gain` for the last; zero biases.
  void initialize(Rng& rng, double hidden_gain, double output_gain);
  void set_zero();
  DenseNet zeros_like() const;

  std::vector<std::span<double>> parameter_spans();
  std::vector<std::span<const double>> parameter_spans() const;
  std::size_t parameter_count() const;
  bool all_finite() const;

 private:
  std::vector<DenseLayer> layers_;
};

/// Fills `m` with a (semi-)orthogonal matrix scaled by gain.
void orthogonal_init(Matrix& m, double gain, Rng& rng);

/// Row-wise softmax, numerically stabilized.
Matrix softmax_rows(const Matrix& logits);

/// Log-density of a diagonal Gaussian, summed over dimensions.
double diag_gaussian_log_prob(std::span<const double> x, std::span<const double> mean,
                              std::span<const double> log_std);

/// KL(N(m1, s1) || N(m2, s2)) for diagonal Gaussians.
double diag_gaussian_kl(std::span<const double> mean1, std::span<const double> std1,
                        std::span<const double> mean2, std::span<const double> std2);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(std::size_t n, double lr) : m(n, 0.0), v(n, 0.0), learning_rate(lr) {}
};

/// Bias-corrected Adam, descending the gradient. params and grads must have
/// matching span sizes; the state covers their concatenation.
void adam_step(std::span<const std::span<double>> params,
               std::span<const std::span<const double>> grads, AdamState& state);

std::size_t total_size(std::span<const std::span<double>> spans);

}  // namespace crowdiv::nn
