#include "crowdiv/models.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace crowdiv::nn {

namespace {

constexpr double kProbFloor = 1e-8;

void require(bool ok, const char* field, const char* what) {
  if (!ok) throw std::invalid_argument(std::string(field) + ": " + what);
}

void append(std::vector<std::span<double>>& out, DenseNet& net) {
  for (auto s : net.parameter_spans()) out.push_back(s);
}
void append(std::vector<std::span<const double>>& out, const DenseNet& net) {
  for (auto s : net.parameter_spans()) out.push_back(s);
}
std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<const double> span_of(const Matrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

void check_tokens(const NetworkShape& shape, std::span<const int> tokens, Eigen::Index rows) {
  if (static_cast<Eigen::Index>(tokens.size()) != rows) {
    throw std::invalid_argument("token count " + std::to_string(tokens.size()) +
                                " does not match batch size " + std::to_string(rows));
  }
  for (int z : tokens) {
    if (z < 0 || z >= shape.num_tokens) {
      throw std::out_of_range("token " + std::to_string(z) + " outside [0, " +
                              std::to_string(shape.num_tokens) + ")");
    }
  }
}

void check_features(const NetworkShape& shape, const Matrix& features) {
  if (features.cols() != shape.feature_dim()) {
    throw std::invalid_argument("feature width " + std::to_string(features.cols()) +
                                " does not match network input " +
                                std::to_string(shape.feature_dim()));
  }
}

// [backbone(scan) | extra features | embedding(token)]
Matrix head_input(const NetworkShape& shape, const Matrix& backbone_out, const Matrix& features,
                  const Matrix& embedding, std::span<const int> tokens) {
  const Eigen::Index b = features.rows();
  Matrix in(b, shape.head_input_dim());
  in.leftCols(shape.scan_hidden2) = backbone_out;
  in.middleCols(shape.scan_hidden2, NetworkShape::kExtraDim) =
      features.rightCols(NetworkShape::kExtraDim);
  for (Eigen::Index r = 0; r < b; ++r) {
    in.row(r).rightCols(shape.embed_dim) = embedding.row(tokens[static_cast<std::size_t>(r)]);
  }
  return in;
}

}  // namespace

void NetworkShape::validate() const {
  require(k_frames >= 1, "k_frames", "must be >= 1");
  require(n_beams >= 1, "n_beams", "must be >= 1");
  require(num_tokens >= 1, "M", "must be >= 1");
  require(embed_dim >= 1, "embed_dim", "must be >= 1");
  require(scan_hidden1 >= 1 && scan_hidden2 >= 1, "scan_hidden", "must be >= 1");
  require(head_hidden >= 1, "head_hidden", "must be >= 1");
  require(disc_hidden >= 1, "disc_hidden", "must be >= 1");
  require(v_max > 0.0, "v_max", "must be > 0");
  require(w_max > 0.0, "w_max", "must be > 0");
}

NetworkParams NetworkParams::zeros(const NetworkShape& s) {
  s.validate();
  using A = Activation;
  NetworkParams p;
  p.shape = s;
  p.embedding = Matrix::Zero(s.num_tokens, s.embed_dim);
  p.policy_backbone = DenseNet({s.scan_dim(), s.scan_hidden1, s.scan_hidden2}, {A::tanh, A::tanh});
  p.policy_head = DenseNet({s.head_input_dim(), s.head_hidden, NetworkShape::kActionDim},
                           {A::tanh, A::identity});
  p.log_std = Matrix::Zero(1, NetworkShape::kActionDim);
  p.value_backbone = DenseNet({s.scan_dim(), s.scan_hidden1, s.scan_hidden2}, {A::tanh, A::tanh});
  p.value_head = DenseNet({s.head_input_dim(), s.head_hidden, 1}, {A::tanh, A::identity});
  p.disc_sa = DenseNet({s.feature_dim() + NetworkShape::kActionDim, s.disc_hidden, s.disc_hidden,
                        s.num_tokens},
                       {A::relu, A::relu, A::identity});
  p.disc_s = DenseNet({s.feature_dim(), s.disc_hidden, s.disc_hidden, s.num_tokens},
                      {A::relu, A::relu, A::identity});
  return p;
}

NetworkParams NetworkParams::initialized(const NetworkShape& s, Rng& rng, double log_std_init,
                                         double embed_std) {
  NetworkParams p = zeros(s);
  const double root2 = std::sqrt(2.0);
  std::normal_distribution<double> emb(0.0, embed_std);
  for (Eigen::Index i = 0; i < p.embedding.size(); ++i) p.embedding.data()[i] = emb(rng);
  p.policy_backbone.initialize(rng, root2, root2);
  p.policy_head.initialize(rng, root2, 0.01);
  p.log_std.setConstant(log_std_init);
  p.value_backbone.initialize(rng, root2, root2);
  p.value_head.initialize(rng, root2, 1.0);
  p.disc_sa.initialize(rng, root2, 0.01);
  p.disc_s.initialize(rng, root2, 0.01);
  return p;
}

void NetworkParams::set_zero() {
  embedding.setZero();
  policy_backbone.set_zero();
  policy_head.set_zero();
  log_std.setZero();
  value_backbone.set_zero();
  value_head.set_zero();
  disc_sa.set_zero();
  disc_s.set_zero();
}

std::vector<std::span<double>> NetworkParams::policy_group() {
  std::vector<std::span<double>> out{span_of(embedding)};
  append(out, policy_backbone);
  append(out, policy_head);
  out.push_back(span_of(log_std));
  return out;
}
std::vector<std::span<const double>> NetworkParams::policy_group() const {
  std::vector<std::span<const double>> out{span_of(embedding)};
  append(out, policy_backbone);
  append(out, policy_head);
  out.push_back(span_of(log_std));
  return out;
}
std::vector<std::span<double>> NetworkParams::value_group() {
  std::vector<std::span<double>> out;
  append(out, value_backbone);
  append(out, value_head);
  return out;
}
std::vector<std::span<const double>> NetworkParams::value_group() const {
  std::vector<std::span<const double>> out;
  append(out, value_backbone);
  append(out, value_head);
  return out;
}
std::vector<std::span<double>> NetworkParams::disc_sa_group() { return disc_sa.parameter_spans(); }
std::vector<std::span<const double>> NetworkParams::disc_sa_group() const {
  return disc_sa.parameter_spans();
}
std::vector<std::span<double>> NetworkParams::disc_s_group() { return disc_s.parameter_spans(); }
std::vector<std::span<const double>> NetworkParams::disc_s_group() const {
  return disc_s.parameter_spans();
}

std::vector<std::span<double>> NetworkParams::all_spans() {
  auto out = policy_group();
  for (auto s : value_group()) out.push_back(s);
  for (auto s : disc_sa_group()) out.push_back(s);
  for (auto s : disc_s_group()) out.push_back(s);
  return out;
}
std::vector<std::span<const double>> NetworkParams::all_spans() const {
  auto out = policy_group();
  for (auto s : value_group()) out.push_back(s);
  for (auto s : disc_sa_group()) out.push_back(s);
  for (auto s : disc_s_group()) out.push_back(s);
  return out;
}

bool NetworkParams::all_finite() const {
  for (auto s : all_spans()) {
    for (double v : s) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

PolicyOutput policy_forward(const NetworkParams& p, const Matrix& features,
                            std::span<const int> tokens, PolicyTape* tape) {
  const auto& s = p.shape;
  check_features(s, features);
  check_tokens(s, tokens, features.rows());
  const Matrix scans = features.leftCols(s.scan_dim());
  Matrix backbone_out = tape ? p.policy_backbone.forward(scans, tape->backbone)
                             : p.policy_backbone.forward(scans);
  const Matrix in = head_input(s, backbone_out, features, p.embedding, tokens);
  Matrix pre = tape ? p.policy_head.forward(in, tape->head) : p.policy_head.forward(in);

  PolicyOutput out;
  out.mean.resize(pre.rows(), 2);
  out.mean.col(0) = (s.v_max * 0.5 * (pre.col(0).array().tanh() + 1.0)).matrix();
  out.mean.col(1) = (s.w_max * pre.col(1).array().tanh()).matrix();
  out.log_std = Eigen::Vector2d(p.log_std(0, 0), p.log_std(0, 1));
  if (tape) {
    tape->pre_squash = std::move(pre);
    tape->tokens.assign(tokens.begin(), tokens.end());
  }
  return out;
}

void policy_backward(const NetworkParams& p, const PolicyTape& tape, const Matrix& grad_mean,
                     const Eigen::Vector2d& grad_log_std, NetworkParams& grads) {
  const auto& s = p.shape;
  const Matrix& pre = tape.pre_squash;
  Matrix g_pre(pre.rows(), 2);
  const Eigen::ArrayXd t0 = pre.col(0).array().tanh();
  const Eigen::ArrayXd t1 = pre.col(1).array().tanh();
  g_pre.col(0) = (grad_mean.col(0).array() * s.v_max * 0.5 * (1.0 - t0.square())).matrix();
  g_pre.col(1) = (grad_mean.col(1).array() * s.w_max * (1.0 - t1.square())).matrix();

  const Matrix g_in = p.policy_head.backward(tape.head, g_pre, grads.policy_head);
  const Matrix g_backbone = g_in.leftCols(s.scan_hidden2);
  p.policy_backbone.backward(tape.backbone, g_backbone, grads.policy_backbone);
  const auto g_emb = g_in.rightCols(s.embed_dim);
  for (Eigen::Index r = 0; r < g_in.rows(); ++r) {
    grads.embedding.row(tape.tokens[static_cast<std::size_t>(r)]) += g_emb.row(r);
  }
  grads.log_std(0, 0) += grad_log_std(0);
  grads.log_std(0, 1) += grad_log_std(1);
}

Vector value_forward(const NetworkParams& p, const Matrix& features, std::span<const int> tokens,
                     ValueTape* tape) {
  const auto& s = p.shape;
  check_features(s, features);
  check_tokens(s, tokens, features.rows());
  const Matrix scans = features.leftCols(s.scan_dim());
  const Matrix backbone_out = tape ? p.value_backbone.forward(scans, tape->backbone)
                                   : p.value_backbone.forward(scans);
  const Matrix in = head_input(s, backbone_out, features, p.embedding, tokens);
  const Matrix out = tape ? p.value_head.forward(in, tape->head) : p.value_head.forward(in);
  return out.col(0);
}

void value_backward(const NetworkParams& p, const ValueTape& tape, const Vector& grad_value,
                    NetworkParams& grads) {
  const Matrix g_out = grad_value;
  const Matrix g_in = p.value_head.backward(tape.head, g_out, grads.value_head);
  p.value_backbone.backward(tape.backbone, g_in.leftCols(p.shape.scan_hidden2),
                            grads.value_backbone);
}

Matrix state_action_input(const Matrix& features, const Matrix& actions) {
  if (features.rows() != actions.rows()) {
    throw std::invalid_argument("state_action_input: row mismatch");
  }
  Matrix in(features.rows(), features.cols() + actions.cols());
  in << features, actions;
  return in;
}

Matrix discriminator_forward(const DenseNet& net, const Matrix& input, Tape* tape) {
  if (input.cols() != net.input_dim()) {
    throw std::invalid_argument("discriminator input width " + std::to_string(input.cols()) +
                                " does not match " + std::to_string(net.input_dim()));
  }
  return softmax_rows(tape ? net.forward(input, *tape) : net.forward(input));
}

CrossEntropyResult discriminator_cross_entropy(const DenseNet& net, const Matrix& input,
                                               std::span<const int> labels, DenseNet* grads) {
  if (static_cast<Eigen::Index>(labels.size()) != input.rows()) {
    throw std::invalid_argument("discriminator_cross_entropy: label count mismatch");
  }
  Tape tape;
  const Matrix probs = discriminator_forward(net, input, grads ? &tape : nullptr);
  const Eigen::Index b = input.rows();
  CrossEntropyResult res;
  Matrix g_logits = probs;
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < b; ++r) {
    const int z = labels[static_cast<std::size_t>(r)];
    if (z < 0 || z >= probs.cols()) throw std::out_of_range("discriminator label out of range");
    const double pz = probs(r, z);
    res.loss -= std::log(std::max(pz, kProbFloor));
    Eigen::Index arg = 0;
    probs.row(r).maxCoeff(&arg);
    if (arg == z) ++correct;
    if (pz >= kProbFloor) {
      g_logits(r, z) -= 1.0;
    } else {
      // Floored log is constant in the logits.
      g_logits.row(r).setZero();
    }
  }
  res.loss /= static_cast<double>(b);
  res.accuracy = static_cast<double>(correct) / static_cast<double>(b);
  if (!std::isfinite(res.loss)) throw NumericError("discriminator loss is not finite");
  if (grads) {
    g_logits /= static_cast<double>(b);
    net.backward(tape, g_logits, *grads);
  }
  return res;
}

Matrix stack_rows(std::span<const std::vector<double>> rows) {
  if (rows.empty()) return Matrix(0, 0);
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows.front().size()) throw std::invalid_argument("stack_rows: ragged rows");
    m.row(static_cast<Eigen::Index>(r)) =
        Eigen::Map<const Eigen::RowVectorXd>(rows[r].data(), static_cast<Eigen::Index>(rows[r].size()));
  }
  return m;
}

}  // namespace crowdiv::nn
