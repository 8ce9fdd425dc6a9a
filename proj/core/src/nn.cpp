#include "crowdiv/nn.hpp"

#include <cmath>
#include <numbers>

namespace crowdiv::nn {

const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

DenseNet::DenseNet(std::vector<int> dims, std::vector<Activation> activations) {
  if (dims.size() < 2 || activations.size() != dims.size() - 1) {
    throw std::invalid_argument("DenseNet: need dims.size() == activations.size() + 1 >= 2");
  }
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    if (dims[i] < 1 || dims[i + 1] < 1) throw std::invalid_argument("DenseNet: dims must be >= 1");
    DenseLayer layer;
    layer.weight = Matrix::Zero(dims[i + 1], dims[i]);
    layer.bias = Vector::Zero(dims[i + 1]);
    layer.activation = activations[i];
    layers_.push_back(std::move(layer));
  }
}

int DenseNet::input_dim() const { return layers_.empty() ? 0 : layers_.front().input_dim(); }
int DenseNet::output_dim() const { return layers_.empty() ? 0 : layers_.back().output_dim(); }

namespace {

void activate(Matrix& z, Activation a) {
  switch (a) {
    case Activation::relu: z = z.cwiseMax(0.0); break;
    case Activation::tanh: z = z.array().tanh().matrix(); break;
    case Activation::identity: break;
  }
}

// grad w.r.t. pre-activation given grad w.r.t. output and the output itself.
Matrix activation_backward(const Matrix& grad_out, const Matrix& out, Activation a) {
  switch (a) {
    case Activation::relu: return (out.array() > 0.0).select(grad_out, 0.0);
    case Activation::tanh: return (grad_out.array() * (1.0 - out.array().square())).matrix();
    case Activation::identity: return grad_out;
  }
  return grad_out;
}

}  // namespace

Matrix DenseNet::forward(const Matrix& x) const {
  Matrix h = x;
  for (const auto& layer : layers_) {
    if (h.cols() != layer.input_dim()) {
      throw std::invalid_argument("DenseNet::forward: input has " + std::to_string(h.cols()) +
                                  " columns, layer expects " + std::to_string(layer.input_dim()));
    }
    Matrix z = h * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    activate(z, layer.activation);
    h = std::move(z);
  }
  return h;
}

Matrix DenseNet::forward(const Matrix& x, Tape& tape) const {
  tape.inputs.clear();
  tape.outputs.clear();
  Matrix h = x;
  for (const auto& layer : layers_) {
    if (h.cols() != layer.input_dim()) {
      throw std::invalid_argument("DenseNet::forward: input has " + std::to_string(h.cols()) +
                                  " columns, layer expects " + std::to_string(layer.input_dim()));
    }
    tape.inputs.push_back(h);
    Matrix z = h * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    activate(z, layer.activation);
    tape.outputs.push_back(z);
    h = std::move(z);
  }
  return h;
}

Matrix DenseNet::backward(const Tape& tape, const Matrix& grad_output, DenseNet& grads) const {
  if (tape.inputs.size() != layers_.size()) {
    throw std::logic_error("DenseNet::backward: tape does not match network");
  }
  Matrix g = grad_output;
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const DenseLayer& layer = layers_[li];
    DenseLayer& gl = grads.layers_[li];
    const Matrix dz = activation_backward(g, tape.outputs[li], layer.activation);
    gl.weight.noalias() += dz.transpose() * tape.inputs[li];
    gl.bias.noalias() += dz.colwise().sum().transpose();
    g = dz * layer.weight;
  }
  return g;
}

void orthogonal_init(Matrix& m, double gain, Rng& rng) {
  const Eigen::Index rows = m.rows(), cols = m.cols();
  const Eigen::Index big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd a(big, small);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index j = 0; j < small; ++j) {
    for (Eigen::Index i = 0; i < big; ++i) a(i, j) = n(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  // Sign fix so the distribution is uniform over orthogonal matrices.
  const Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < small; ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  if (rows >= cols) {
    m = q * gain;
  } else {
    m = q.transpose() * gain;
  }
}

void DenseNet::initialize(Rng& rng, double hidden_gain, double output_gain) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const double gain = (i + 1 == layers_.size()) ? output_gain : hidden_gain;
    orthogonal_init(layers_[i].weight, gain, rng);
    layers_[i].bias.setZero();
  }
}

void DenseNet::set_zero() {
  for (auto& l : layers_) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

DenseNet DenseNet::zeros_like() const {
  DenseNet z = *this;
  z.set_zero();
  return z;
}

std::vector<std::span<double>> DenseNet::parameter_spans() {
  std::vector<std::span<double>> out;
  for (auto& l : layers_) {
    out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return out;
}

std::vector<std::span<const double>> DenseNet::parameter_spans() const {
  std::vector<std::span<const double>> out;
  for (const auto& l : layers_) {
    out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return out;
}

std::size_t DenseNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

bool DenseNet::all_finite() const {
  for (const auto& l : layers_) {
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

double diag_gaussian_log_prob(std::span<const double> x, std::span<const double> mean,
                              std::span<const double> log_std) {
  double lp = 0.0;
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = (x[i] - mean[i]) * std::exp(-log_std[i]);
    lp += -0.5 * z * z - log_std[i] - half_log_2pi;
  }
  return lp;
}

double diag_gaussian_kl(std::span<const double> mean1, std::span<const double> std1,
                        std::span<const double> mean2, std::span<const double> std2) {
  double kl = 0.0;
  for (std::size_t i = 0; i < mean1.size(); ++i) {
    const double var1 = std1[i] * std1[i];
    const double var2 = std2[i] * std2[i];
    const double dm = mean1[i] - mean2[i];
    kl += std::log(std2[i] / std1[i]) + (var1 + dm * dm) / (2.0 * var2) - 0.5;
  }
  return kl;
}

std::size_t total_size(std::span<const std::span<double>> spans) {
  std::size_t n = 0;
  for (const auto& s : spans) n += s.size();
  return n;
}

void adam_step(std::span<const std::span<double>> params,
               std::span<const std::span<const double>> grads, AdamState& state) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: group mismatch");
  const std::size_t n = total_size(params);
  if (state.m.size() != n || state.v.size() != n) {
    throw std::invalid_argument("adam_step: state size " + std::to_string(state.m.size()) +
                                " does not match parameter count " + std::to_string(n));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  std::size_t k = 0;
  for (std::size_t s = 0; s < params.size(); ++s) {
    if (params[s].size() != grads[s].size()) {
      throw std::invalid_argument("adam_step: span size mismatch");
    }
    for (std::size_t i = 0; i < params[s].size(); ++i, ++k) {
      const double g = grads[s][i];
      state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
      state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
      const double m_hat = state.m[k] / bc1;
      const double v_hat = state.v[k] / bc2;
      params[s][i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

}  // namespace crowdiv::nn
