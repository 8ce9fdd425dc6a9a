#pragma once

#include <span>
#include <vector>

#include "crowdiv/nn.hpp"

namespace crowdiv::nn {

/// Architecture descriptor shared by the policy, value and discriminators.
struct NetworkShape {
  int k_frames = 3;
  int n_beams = 72;
  int num_tokens = 5;  ///< M
  int embed_dim = 32;
  int scan_hidden1 = 512;
  int scan_hidden2 = 256;
  int head_hidden = 128;
  int disc_hidden = 128;
  double v_max = 1.0;
  double w_max = 1.0;

  static constexpr int kExtraDim = 4;  ///< goal distance, bearing, v, w
  static constexpr int kActionDim = 2;

  int scan_dim() const { return k_frames * n_beams; }
  int feature_dim() const { return scan_dim() + kExtraDim; }
  int head_input_dim() const { return scan_hidden2 + kExtraDim + embed_dim; }

  bool operator==(const NetworkShape&) const = default;
  void validate() const;
};

/// All trainable parameters: token embedding, Gaussian policy, value
/// function, and the q(z|s,a) / q(z|s) discriminators.
struct NetworkParams {
  NetworkShape shape;
  Matrix embedding;  ///< num_tokens x embed_dim
  DenseNet policy_backbone;
  DenseNet policy_head;
  Matrix log_std;  ///< 1 x 2, state independent
  DenseNet value_backbone;
  DenseNet value_head;
  DenseNet disc_sa;
  DenseNet disc_s;

  /// Zero-valued parameters with the right shapes.
  static NetworkParams zeros(const NetworkShape& shape);
  /// Orthogonal hidden layers, 0.01-scaled policy output, N(0, embed_std)
  /// embedding.
  static NetworkParams initialized(const NetworkShape& shape, Rng& rng, double log_std_init,
                                   double embed_std = 0.1);

  void set_zero();

  // Optimizer groups. The policy group owns the embedding and log_std.
  std::vector<std::span<double>> policy_group();
  std::vector<std::span<double>> value_group();
  std::vector<std::span<double>> disc_sa_group();
  std::vector<std::span<double>> disc_s_group();
  std::vector<std::span<const double>> policy_group() const;
  std::vector<std::span<const double>> value_group() const;
  std::vector<std::span<const double>> disc_sa_group() const;
  std::vector<std::span<const double>> disc_s_group() const;
  /// Every parameter block in serialization order.
  std::vector<std::span<double>> all_spans();
  std::vector<std::span<const double>> all_spans() const;

  bool all_finite() const;
};

struct PolicyTape {
  Tape backbone;
  Tape head;
  Matrix pre_squash;  ///< B x 2, head outputs before squashing
  std::vector<int> tokens;
};

struct PolicyOutput {
  Matrix mean;  ///< B x 2, inside the action box
  Eigen::Vector2d log_std;
};

/// Batched policy: rows of `features` are flattened observations.
PolicyOutput policy_forward(const NetworkParams& p, const Matrix& features,
                            std::span<const int> tokens, PolicyTape* tape = nullptr);

/// Accumulates gradients of L (given dL/dmean and dL/dlog_std) into the
/// policy group of `grads`, including embedding rows of the batch tokens.
void policy_backward(const NetworkParams& p, const PolicyTape& tape, const Matrix& grad_mean,
                     const Eigen::Vector2d& grad_log_std, NetworkParams& grads);

struct ValueTape {
  Tape backbone;
  Tape head;
};

/// Value estimates; the token embedding enters as a constant input.
Vector value_forward(const NetworkParams& p, const Matrix& features, std::span<const int> tokens,
                     ValueTape* tape = nullptr);
void value_backward(const NetworkParams& p, const ValueTape& tape, const Vector& grad_value,
                    NetworkParams& grads);

/// [features | action] rows for q(z|s,a).
Matrix state_action_input(const Matrix& features, const Matrix& actions);

/// Softmax posterior over tokens, one row per input.
Matrix discriminator_forward(const DenseNet& net, const Matrix& input, Tape* tape = nullptr);

struct CrossEntropyResult {
  double loss = 0.0;      ///< mean over the batch
  double accuracy = 0.0;  ///< argmax == label
};

/// Mean cross-entropy of `net` on (input, labels); when `grads` is non-null
/// accumulates the gradient of the mean loss into it.
CrossEntropyResult discriminator_cross_entropy(const DenseNet& net, const Matrix& input,
                                               std::span<const int> labels,
                                               DenseNet* grads = nullptr);

/// Stacks feature vectors into a matrix.
Matrix stack_rows(std::span<const std::vector<double>> rows);

}  // namespace crowdiv::nn
