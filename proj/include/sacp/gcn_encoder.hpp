#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sacp/arch_ir.hpp"
#include "sacp/error.hpp"

namespace sacp {

/// Symmetric-normalized propagation matrix D^-1/2 (A_sym + I) D^-1/2.
using AdjacencyOperator = Eigen::MatrixXd;
using Embedding = Eigen::RowVectorXd;

inline AdjacencyOperator normalize_adjacency(std::size_t num_nodes, std::span<const Edge> edges) {
  if (num_nodes == 0) throw ValidationError("cannot normalize the adjacency of an empty graph");
  const auto n = static_cast<Eigen::Index>(num_nodes);
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
  for (const auto &[s, t] : edges) {
    if (s >= num_nodes || t >= num_nodes) throw ValidationError("edge endpoint out of range");
    a(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t)) = 1.0;
    a(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s)) = 1.0;
  }
  const Eigen::VectorXd inv_sqrt = a.rowwise().sum().cwiseSqrt().cwiseInverse();
  return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

inline AdjacencyOperator normalize_adjacency(const ArchGraph &arch) {
  return normalize_adjacency(arch.size(), arch.edges());
}

/// Two graph-convolution weight matrices, d -> h -> e.
struct EncoderParams {
  static constexpr int kVersion = 1;
  Eigen::MatrixXd w1;
  Eigen::MatrixXd w2;

  std::array<Eigen::Index, 3> dims() const { return {w1.rows(), w1.cols(), w2.cols()}; }
};

inline bool operator==(const EncoderParams &a, const EncoderParams &b) {
  return a.dims() == b.dims() && a.w1 == b.w1 && a.w2 == b.w2;
}

inline void check_dims(std::span<const std::int64_t> dims) {
  if (dims.size() != 3) throw ValidationError("encoder dims must be [d, h, e]");
  for (auto v : dims)
    if (v < 1) throw ValidationError("encoder dims must be positive");
}

/// Glorot-uniform init, U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
inline EncoderParams init_params(std::span<const std::int64_t> dims, std::uint64_t seed) {
  check_dims(dims);
  std::mt19937_64 rng(seed);
  auto glorot = [&](std::int64_t rows, std::int64_t cols) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = u(rng);
    return m;
  };
  EncoderParams p;
  p.w1 = glorot(dims[0], dims[1]);
  p.w2 = glorot(dims[1], dims[2]);
  return p;
}

inline EncoderParams init_params(std::initializer_list<std::int64_t> dims, std::uint64_t seed) {
  return init_params(std::span<const std::int64_t>(dims.begin(), dims.size()), seed);
}

/// Mean over node rows.
inline Embedding readout(const Eigen::MatrixXd &node_states) {
  if (node_states.rows() == 0) throw ValidationError("readout of an empty node set");
  return node_states.colwise().mean();
}

/// Intermediates kept for the backward pass.
struct ForwardPass {
  Eigen::MatrixXd propagated_input; // A X
  Eigen::MatrixXd hidden_pre;       // A X W1
  Eigen::MatrixXd hidden;           // relu(A X W1)
  Eigen::MatrixXd propagated_hidden; // A H1
  Eigen::MatrixXd output;           // A H1 W2
  Embedding embedding;
};

/// H1 = relu(A X W1), H2 = A H1 W2, z = mean rows of H2.
inline ForwardPass forward(const EncoderParams &params, const AdjacencyOperator &adj, const Eigen::MatrixXd &features) {
  if (features.cols() != params.w1.rows())
    throw ValidationError("feature width " + std::to_string(features.cols()) + " does not match encoder input " +
                          std::to_string(params.w1.rows()));
  if (adj.rows() != features.rows() || adj.cols() != features.rows())
    throw ValidationError("adjacency and feature matrix disagree on the node count");
  if (params.w1.cols() != params.w2.rows()) throw ValidationError("encoder weight shapes do not chain");
  ForwardPass f;
  f.propagated_input = adj * features;
  f.hidden_pre = f.propagated_input * params.w1;
  f.hidden = f.hidden_pre.cwiseMax(0.0);
  f.propagated_hidden = adj * f.hidden;
  f.output = f.propagated_hidden * params.w2;
  f.embedding = readout(f.output);
  return f;
}

inline Embedding encode(const EncoderParams &params, const AdjacencyOperator &adj, const Eigen::MatrixXd &features) {
  return forward(params, adj, features).embedding;
}

struct EncoderGradients {
  Eigen::MatrixXd w1;
  Eigen::MatrixXd w2;

  static EncoderGradients zeros_like(const EncoderParams &p) {
    return {Eigen::MatrixXd::Zero(p.w1.rows(), p.w1.cols()), Eigen::MatrixXd::Zero(p.w2.rows(), p.w2.cols())};
  }
  EncoderGradients &operator+=(const EncoderGradients &o) {
    w1 += o.w1;
    w2 += o.w2;
    return *this;
  }
};

/// Accumulates dLoss/dW into `grads` given dLoss/dz for one forward pass.
inline void backward(const EncoderParams &params, const AdjacencyOperator &adj, const ForwardPass &f,
                     const Embedding &grad_embedding, EncoderGradients &grads) {
  const auto n = static_cast<double>(f.output.rows());
  // dz/dH2 spreads the gradient evenly over rows; sum_rows(A H1)^T g / n.
  const Eigen::RowVectorXd col_sum = f.propagated_hidden.colwise().sum();
  grads.w2.noalias() += col_sum.transpose() * grad_embedding / n;
  // d(A H1) = (1/n) 1 g W2^T; dH1 = A^T d(A H1), A symmetric.
  const Eigen::RowVectorXd row_grad = grad_embedding * params.w2.transpose() / n;
  const Eigen::VectorXd adj_col_sum = adj.colwise().sum().transpose();
  Eigen::MatrixXd grad_hidden = adj_col_sum * row_grad;
  grad_hidden = grad_hidden.cwiseProduct((f.hidden_pre.array() > 0.0).cast<double>().matrix());
  grads.w1.noalias() += f.propagated_input.transpose() * grad_hidden;
}

// Checkpoint document: {"version": 1, "dims": [d, h, e], "weights": [w1, w2]},
// each matrix flattened row-major.

inline std::string save_checkpoint(const EncoderParams &params) {
  nlohmann::ordered_json doc;
  doc["version"] = EncoderParams::kVersion;
  const auto dims = params.dims();
  doc["dims"] = {dims[0], dims[1], dims[2]};
  auto flatten = [](const Eigen::MatrixXd &m) {
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
    return v;
  };
  doc["weights"] = {flatten(params.w1), flatten(params.w2)};
  return doc.dump() + "\n";
}

inline EncoderParams load_checkpoint(const std::string &text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error &e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("version")) throw ValidationError("checkpoint has no version field");
  const auto version = doc["version"];
  if (!version.is_number_integer() || version.get<int>() != EncoderParams::kVersion)
    throw ValidationError("checkpoint version " + version.dump() + " is not supported (expected " +
                          std::to_string(EncoderParams::kVersion) + ")");
  std::vector<std::int64_t> dims;
  std::vector<std::vector<double>> weights;
  try {
    dims = doc.at("dims").get<std::vector<std::int64_t>>();
    weights = doc.at("weights").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(std::string("checkpoint fields malformed: ") + e.what());
  }
  check_dims(dims);
  if (weights.size() != 2) throw ValidationError("checkpoint must hold two weight matrices");
  auto unflatten = [](const std::vector<double> &v, std::int64_t rows, std::int64_t cols) {
    if (static_cast<std::int64_t>(v.size()) != rows * cols)
      throw ValidationError("checkpoint weight matrix has " + std::to_string(v.size()) + " values, dims imply " +
                            std::to_string(rows * cols));
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) {
        const double x = v[static_cast<std::size_t>(i * cols + j)];
        if (!std::isfinite(x)) throw ValidationError("checkpoint holds a non-finite weight");
        m(i, j) = x;
      }
    return m;
  };
  EncoderParams p;
  p.w1 = unflatten(weights[0], dims[0], dims[1]);
  p.w2 = unflatten(weights[1], dims[1], dims[2]);
  return p;
}

/// Encoder input for one configuration of `arch`.
inline Eigen::MatrixXd config_features(const ArchGraph &arch, std::span<const ChannelMask> masks) {
  return build_feature_matrix(arch, masks).rows;
}

} // namespace sacp
