#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsep/distributions.hpp"
#include "rsep/observation.hpp"
#include "rsep/rng.hpp"

namespace rsep {

/// Shape of the shared actor-critic. Ownship and intruder rows go through
/// separate two-layer LeakyReLU encoders; intruder embeddings are pooled by
/// multi-head attention with the ownship embedding as query; the
/// concatenation feeds a policy head and a value head.
struct NetConfig {
  int max_intruders = 5;
  int enc_width = 64;
  int heads = 4;
  int head_dim = 16;
  int trunk_width = 64;
  double leaky_slope = 0.01;
  // Intruder x/y enter the intruder encoder relative to the ownship, scaled
  // by these gains (in normalized units).
  double rel_gain_x = 5.0;
  double rel_gain_y = 8.0;

  int attn_width() const { return heads * head_dim; }
  int hidden_width() const { return enc_width + attn_width(); }

  bool operator==(const NetConfig&) const = default;
};

enum ParamBlock : int {
  kOwnW0 = 0, kOwnB0, kOwnW1, kOwnB1,
  kIntW0, kIntB0, kIntW1, kIntB1,
  kAttQ, kAttK, kAttV,
  kPiW0, kPiB0, kPiW1, kPiB1,
  kValW0, kValB0, kValW1, kValB1,
  kParamBlockCount
};

struct BlockSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  Eigen::Index offset = 0;
  Eigen::Index size() const { return static_cast<Eigen::Index>(rows) * cols; }
};

inline std::vector<BlockSpec> param_layout(const NetConfig& c) {
  const int w = c.enc_width, a = c.attn_width(), h = c.hidden_width(), t = c.trunk_width;
  std::vector<BlockSpec> b = {
      {"own.w0", w, kStateCols}, {"own.b0", w, 1}, {"own.w1", w, w}, {"own.b1", w, 1},
      {"int.w0", w, kStateCols}, {"int.b0", w, 1}, {"int.w1", w, w}, {"int.b1", w, 1},
      {"att.q", a, w},           {"att.k", a, w},  {"att.v", a, w},
      {"pi.w0", t, h},           {"pi.b0", t, 1},  {"pi.w1", kActionCount, t}, {"pi.b1", kActionCount, 1},
      {"v.w0", t, h},            {"v.b0", t, 1},   {"v.w1", 1, t},             {"v.b1", 1, 1},
  };
  Eigen::Index off = 0;
  for (auto& s : b) {
    s.offset = off;
    off += s.size();
  }
  return b;
}

/// All weights in one contiguous vector; blocks are column-major views.
/// Gradients use the same type and layout.
class NetParams {
 public:
  NetParams() = default;
  explicit NetParams(const NetConfig& cfg) : cfg_(cfg), layout_(param_layout(cfg)) {
    data_ = Eigen::VectorXd::Zero(layout_.back().offset + layout_.back().size());
  }

  template <class Urbg>
  static NetParams initialized(const NetConfig& cfg, Urbg& rng) {
    NetParams p(cfg);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int b = 0; b < kParamBlockCount; ++b) {
      const auto& s = p.layout_[static_cast<std::size_t>(b)];
      if (s.cols == 1) continue;  // biases start at zero
      double scale = std::sqrt(2.0 / static_cast<double>(s.cols));
      if (b == kAttQ || b == kAttK || b == kAttV) scale = std::sqrt(1.0 / static_cast<double>(s.cols));
      if (b == kPiW1) scale *= 0.01;
      if (b == kValW1) scale *= 0.1;
      auto m = p.block(b);
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * normal(rng);
    }
    return p;
  }

  const NetConfig& config() const { return cfg_; }
  const std::vector<BlockSpec>& layout() const { return layout_; }
  Eigen::VectorXd& flat() { return data_; }
  const Eigen::VectorXd& flat() const { return data_; }
  Eigen::Index size() const { return data_.size(); }

  Eigen::Map<Eigen::MatrixXd> block(int b) {
    const auto& s = layout_.at(static_cast<std::size_t>(b));
    return {data_.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<const Eigen::MatrixXd> block(int b) const {
    const auto& s = layout_.at(static_cast<std::size_t>(b));
    return {data_.data() + s.offset, s.rows, s.cols};
  }

  NetParams zeros_like() const { return NetParams(cfg_); }

  /// FNV-1a over the raw bytes; used to certify frozen parameters.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(data_.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(data_.size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  NetConfig cfg_;
  std::vector<BlockSpec> layout_;
  Eigen::VectorXd data_;
};

/// Activations recorded by a batched forward pass. Samples are columns.
/// Valid intruder rows are packed: sample b owns columns
/// [int_start[b], int_start[b+1]) of the intruder matrices.
struct ForwardTape {
  int batch = 0;
  std::vector<int> int_start;
  std::vector<int> int_row;  // state-matrix row (1..m) of each packed column
  Eigen::MatrixXd x_own, z0_own, a0_own, z1_own, e_own;
  Eigen::MatrixXd x_int, z0_int, a0_int, z1_int, e_int;
  Eigen::MatrixXd query, key, val, attn, context;
  Eigen::MatrixXd hidden;
  Eigen::MatrixXd z_pi, a_pi, z_v, a_v;
  Eigen::MatrixXd logits;     // kActionCount x B
  Eigen::RowVectorXd value;   // 1 x B

  ActionDistribution distribution(int b) const { return ActionDistribution::from_logits(logits.col(b)); }
};

namespace detail {

inline Eigen::MatrixXd leaky(const Eigen::MatrixXd& z, double slope) {
  return z.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
}

inline Eigen::MatrixXd leaky_backward(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& z, double slope) {
  return dy.binaryExpr(z, [slope](double g, double v) { return v > 0.0 ? g : slope * g; });
}

inline void encode(const NetParams& p, int w0, const Eigen::MatrixXd& x, Eigen::MatrixXd& z0, Eigen::MatrixXd& a0,
                   Eigen::MatrixXd& z1, Eigen::MatrixXd& e) {
  const double s = p.config().leaky_slope;
  z0.noalias() = p.block(w0) * x;
  z0.colwise() += p.block(w0 + 1).col(0);
  a0 = leaky(z0, s);
  z1.noalias() = p.block(w0 + 2) * a0;
  z1.colwise() += p.block(w0 + 3).col(0);
  e = leaky(z1, s);
}

// Backprop through one encoder; accumulates parameter gradients when
// `grad` is set and returns d loss / d input.
inline Eigen::MatrixXd encode_backward(const NetParams& p, int w0, const Eigen::MatrixXd& x, const Eigen::MatrixXd& z0,
                                       const Eigen::MatrixXd& a0, const Eigen::MatrixXd& z1, const Eigen::MatrixXd& de,
                                       NetParams* grad) {
  const double s = p.config().leaky_slope;
  const Eigen::MatrixXd dz1 = leaky_backward(de, z1, s);
  const Eigen::MatrixXd da0 = p.block(w0 + 2).transpose() * dz1;
  const Eigen::MatrixXd dz0 = leaky_backward(da0, z0, s);
  if (grad) {
    grad->block(w0 + 2).noalias() += dz1 * a0.transpose();
    grad->block(w0 + 3).col(0) += dz1.rowwise().sum();
    grad->block(w0).noalias() += dz0 * x.transpose();
    grad->block(w0 + 1).col(0) += dz0.rowwise().sum();
  }
  return p.block(w0).transpose() * dz0;
}

inline void check_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw std::runtime_error(std::string("diffnet: non-finite ") + what);
}

}  // namespace detail

/// Batched forward pass on normalized state matrices.
inline ForwardTape forward(const NetParams& p, std::span<const StateMatrix> inputs) {
  const NetConfig& c = p.config();
  ForwardTape t;
  t.batch = static_cast<int>(inputs.size());
  const int B = t.batch;
  t.int_start.assign(static_cast<std::size_t>(B) + 1, 0);
  for (int b = 0; b < B; ++b) {
    const auto& s = inputs[static_cast<std::size_t>(b)];
    if (s.values.rows() != 1 + c.max_intruders || s.values.cols() != kStateCols ||
        s.max_intruders() != c.max_intruders)
      throw std::invalid_argument("diffnet::forward: state matrix shape does not match network config");
    t.int_start[static_cast<std::size_t>(b) + 1] = t.int_start[static_cast<std::size_t>(b)] + s.valid_intruders();
  }
  const int N = t.int_start.back();

  t.x_own.resize(kStateCols, B);
  t.x_int.resize(kStateCols, N);
  t.int_row.resize(static_cast<std::size_t>(N));
  for (int b = 0; b < B; ++b) {
    const auto& s = inputs[static_cast<std::size_t>(b)];
    t.x_own.col(b) = s.values.row(0).transpose();
    int col = t.int_start[static_cast<std::size_t>(b)];
    for (int r = 1; r <= c.max_intruders; ++r) {
      if (!s.row_valid(r)) continue;
      t.x_int.col(col) = s.values.row(r).transpose();
      t.x_int(kColX, col) = c.rel_gain_x * (s.values(r, kColX) - s.values(0, kColX));
      t.x_int(kColY, col) = c.rel_gain_y * (s.values(r, kColY) - s.values(0, kColY));
      t.int_row[static_cast<std::size_t>(col)] = r;
      ++col;
    }
  }

  detail::encode(p, kOwnW0, t.x_own, t.z0_own, t.a0_own, t.z1_own, t.e_own);
  detail::encode(p, kIntW0, t.x_int, t.z0_int, t.a0_int, t.z1_int, t.e_int);

  t.query.noalias() = p.block(kAttQ) * t.e_own;
  t.key.noalias() = p.block(kAttK) * t.e_int;
  t.val.noalias() = p.block(kAttV) * t.e_int;
  t.attn = Eigen::MatrixXd::Zero(c.heads, N);
  t.context = Eigen::MatrixXd::Zero(c.attn_width(), B);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c.head_dim));
  for (int b = 0; b < B; ++b) {
    const int lo = t.int_start[static_cast<std::size_t>(b)], hi = t.int_start[static_cast<std::size_t>(b) + 1];
    if (lo == hi) continue;
    for (int h = 0; h < c.heads; ++h) {
      const int r0 = h * c.head_dim;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = lo; j < hi; ++j) {
        const double sc = t.query.col(b).segment(r0, c.head_dim).dot(t.key.col(j).segment(r0, c.head_dim)) * inv_sqrt;
        t.attn(h, j) = sc;
        mx = std::max(mx, sc);
      }
      double z = 0.0;
      for (int j = lo; j < hi; ++j) {
        t.attn(h, j) = std::exp(t.attn(h, j) - mx);
        z += t.attn(h, j);
      }
      for (int j = lo; j < hi; ++j) {
        t.attn(h, j) /= z;
        t.context.col(b).segment(r0, c.head_dim) += t.attn(h, j) * t.val.col(j).segment(r0, c.head_dim);
      }
    }
  }

  t.hidden.resize(c.hidden_width(), B);
  t.hidden.topRows(c.enc_width) = t.e_own;
  t.hidden.bottomRows(c.attn_width()) = t.context;

  t.z_pi.noalias() = p.block(kPiW0) * t.hidden;
  t.z_pi.colwise() += p.block(kPiB0).col(0);
  t.a_pi = detail::leaky(t.z_pi, c.leaky_slope);
  t.logits.noalias() = p.block(kPiW1) * t.a_pi;
  t.logits.colwise() += p.block(kPiB1).col(0);

  t.z_v.noalias() = p.block(kValW0) * t.hidden;
  t.z_v.colwise() += p.block(kValB0).col(0);
  t.a_v = detail::leaky(t.z_v, c.leaky_slope);
  Eigen::MatrixXd v = p.block(kValW1) * t.a_v;
  v.colwise() += p.block(kValB1).col(0);
  t.value = v.row(0);

  detail::check_finite(t.logits, "policy logits");
  detail::check_finite(t.value, "value");
  return t;
}

inline ForwardTape forward(const NetParams& p, const StateMatrix& input) {
  return forward(p, std::span<const StateMatrix>(&input, 1));
}

/// Reverse pass. `d_logits` (kActionCount x B) and `d_value` (1 x B) are
/// the loss sensitivities at the outputs. Parameter gradients are added
/// into `grad`; input gradients (w.r.t. the normalized matrices, zero on
/// masked rows) are written to `d_inputs` when requested.
inline void backward(const NetParams& p, const ForwardTape& t, const Eigen::MatrixXd& d_logits,
                     const Eigen::RowVectorXd& d_value, NetParams* grad, std::vector<Eigen::MatrixXd>* d_inputs) {
  const NetConfig& c = p.config();
  const int B = t.batch;
  if (d_logits.rows() != kActionCount || d_logits.cols() != B || d_value.cols() != B)
    throw std::invalid_argument("diffnet::backward: output sensitivity shape mismatch");

  Eigen::MatrixXd dz_pi = detail::leaky_backward(p.block(kPiW1).transpose() * d_logits, t.z_pi, c.leaky_slope);
  Eigen::MatrixXd dz_v = detail::leaky_backward(p.block(kValW1).transpose() * d_value, t.z_v, c.leaky_slope);
  Eigen::MatrixXd d_hidden = p.block(kPiW0).transpose() * dz_pi;
  d_hidden.noalias() += p.block(kValW0).transpose() * dz_v;
  if (grad) {
    grad->block(kPiW1).noalias() += d_logits * t.a_pi.transpose();
    grad->block(kPiB1).col(0) += d_logits.rowwise().sum();
    grad->block(kPiW0).noalias() += dz_pi * t.hidden.transpose();
    grad->block(kPiB0).col(0) += dz_pi.rowwise().sum();
    grad->block(kValW1).noalias() += d_value * t.a_v.transpose();
    grad->block(kValB1)(0, 0) += d_value.sum();
    grad->block(kValW0).noalias() += dz_v * t.hidden.transpose();
    grad->block(kValB0).col(0) += dz_v.rowwise().sum();
  }

  Eigen::MatrixXd de_own = d_hidden.topRows(c.enc_width);
  const Eigen::MatrixXd d_ctx = d_hidden.bottomRows(c.attn_width());

  const int N = static_cast<int>(t.x_int.cols());
  Eigen::MatrixXd d_query = Eigen::MatrixXd::Zero(c.attn_width(), B);
  Eigen::MatrixXd d_key = Eigen::MatrixXd::Zero(c.attn_width(), N);
  Eigen::MatrixXd d_val = Eigen::MatrixXd::Zero(c.attn_width(), N);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c.head_dim));
  for (int b = 0; b < B; ++b) {
    const int lo = t.int_start[static_cast<std::size_t>(b)], hi = t.int_start[static_cast<std::size_t>(b) + 1];
    if (lo == hi) continue;
    for (int h = 0; h < c.heads; ++h) {
      const int r0 = h * c.head_dim;
      const auto dc = d_ctx.col(b).segment(r0, c.head_dim);
      double weighted = 0.0;
      for (int j = lo; j < hi; ++j) {
        const double da = dc.dot(t.val.col(j).segment(r0, c.head_dim));
        weighted += t.attn(h, j) * da;
        d_val.col(j).segment(r0, c.head_dim) += t.attn(h, j) * dc;
      }
      for (int j = lo; j < hi; ++j) {
        const double da = dc.dot(t.val.col(j).segment(r0, c.head_dim));
        const double ds = t.attn(h, j) * (da - weighted) * inv_sqrt;
        d_query.col(b).segment(r0, c.head_dim) += ds * t.key.col(j).segment(r0, c.head_dim);
        d_key.col(j).segment(r0, c.head_dim) += ds * t.query.col(b).segment(r0, c.head_dim);
      }
    }
  }
  if (grad) {
    grad->block(kAttQ).noalias() += d_query * t.e_own.transpose();
    grad->block(kAttK).noalias() += d_key * t.e_int.transpose();
    grad->block(kAttV).noalias() += d_val * t.e_int.transpose();
  }
  de_own.noalias() += p.block(kAttQ).transpose() * d_query;
  Eigen::MatrixXd de_int = p.block(kAttK).transpose() * d_key;
  de_int.noalias() += p.block(kAttV).transpose() * d_val;

  const Eigen::MatrixXd dx_own =
      detail::encode_backward(p, kOwnW0, t.x_own, t.z0_own, t.a0_own, t.z1_own, de_own, grad);
  const Eigen::MatrixXd dx_int =
      detail::encode_backward(p, kIntW0, t.x_int, t.z0_int, t.a0_int, t.z1_int, de_int, grad);

  if (!d_inputs) return;
  d_inputs->assign(static_cast<std::size_t>(B), Eigen::MatrixXd::Zero(1 + c.max_intruders, kStateCols));
  for (int b = 0; b < B; ++b) {
    auto& g = (*d_inputs)[static_cast<std::size_t>(b)];
    g.row(0) = dx_own.col(b).transpose();
    for (int j = t.int_start[static_cast<std::size_t>(b)]; j < t.int_start[static_cast<std::size_t>(b) + 1]; ++j) {
      const int r = t.int_row[static_cast<std::size_t>(j)];
      g.row(r) = dx_int.col(j).transpose();
      g(r, kColX) = c.rel_gain_x * dx_int(kColX, j);
      g(r, kColY) = c.rel_gain_y * dx_int(kColY, j);
      g(0, kColX) -= c.rel_gain_x * dx_int(kColX, j);
      g(0, kColY) -= c.rel_gain_y * dx_int(kColY, j);
    }
  }
}

/// A network bundled with the feature scaling it was trained with.
struct PolicyNet {
  NetParams params;
  Normalizer normalizer;
};

struct ValueAndGradient {
  double value = 0.0;
  Eigen::MatrixXd gradient;  // physical units, (1+m) x 6
};

/// dV/dS in physical units for a batch of (unnormalized) state matrices.
inline std::vector<ValueAndGradient> input_gradients(const PolicyNet& net, std::span<const StateMatrix> states) {
  std::vector<StateMatrix> norm;
  norm.reserve(states.size());
  for (const auto& s : states) norm.push_back(net.normalizer.normalize(s));
  const ForwardTape t = forward(net.params, norm);
  std::vector<Eigen::MatrixXd> d_in;
  backward(net.params, t, Eigen::MatrixXd::Zero(kActionCount, t.batch), Eigen::RowVectorXd::Ones(t.batch), nullptr,
           &d_in);
  std::vector<ValueAndGradient> out(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    out[i].value = t.value(static_cast<Eigen::Index>(i));
    out[i].gradient = net.normalizer.to_physical_gradient(d_in[i], states[i]);
    detail::check_finite(out[i].gradient, "input gradient");
  }
  return out;
}

inline ValueAndGradient input_gradient(const PolicyNet& net, const StateMatrix& state) {
  return input_gradients(net, std::span<const StateMatrix>(&state, 1)).front();
}

/// Value and action distribution for one physical state matrix.
struct PolicyOutput {
  ActionDistribution dist;
  double value = 0.0;
};

inline std::vector<PolicyOutput> evaluate(const PolicyNet& net, std::span<const StateMatrix> states) {
  std::vector<StateMatrix> norm;
  norm.reserve(states.size());
  for (const auto& s : states) norm.push_back(net.normalizer.normalize(s));
  const ForwardTape t = forward(net.params, norm);
  std::vector<PolicyOutput> out(states.size());
  for (int b = 0; b < t.batch; ++b) out[static_cast<std::size_t>(b)] = {t.distribution(b), t.value(b)};
  return out;
}

/// Sensitivity of a loss w.r.t. logits given its sensitivity w.r.t. the
/// log-probabilities: dz = dlogp - p * sum(dlogp).
inline Eigen::Vector3d logits_from_logprob_grad(const ActionDistribution& d, const Eigen::Vector3d& d_logp) {
  const double s = d_logp.sum();
  Eigen::Vector3d dz;
  for (int a = 0; a < kActionCount; ++a) dz(a) = d_logp(a) - d.prob[static_cast<std::size_t>(a)] * s;
  return dz;
}

/// Same, from the sensitivity w.r.t. the probabilities: dz = p * (dp - <p, dp>).
inline Eigen::Vector3d logits_from_prob_grad(const ActionDistribution& d, const Eigen::Vector3d& d_prob) {
  double inner = 0.0;
  for (int a = 0; a < kActionCount; ++a) inner += d.prob[static_cast<std::size_t>(a)] * d_prob(a);
  Eigen::Vector3d dz;
  for (int a = 0; a < kActionCount; ++a) dz(a) = d.prob[static_cast<std::size_t>(a)] * (d_prob(a) - inner);
  return dz;
}

}  // namespace rsep
