#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "sacp/contrastive.hpp"

namespace sacp {

struct GradCheckOptions {
  std::int64_t input_width = 6;
  std::int64_t hidden_width = 5;
  std::int64_t embedding_width = 4;
  std::size_t nodes = 8;
  std::size_t pairs = 4;
  double step = 1e-5;
  LossSettings loss{};
  /// Negative control: perturbs one analytic entry so the check must fail.
  bool corrupt = false;
};

struct GradCheckReport {
  /// ||analytic - numeric|| / max(||analytic||, ||numeric||) per matrix.
  double rel_error_w1 = 0.0;
  double rel_error_w2 = 0.0;
  /// Largest entrywise |analytic - numeric|.
  double max_abs_error = 0.0;

  double max_rel_error() const { return std::max(rel_error_w1, rel_error_w2); }
  bool passed(double tolerance = 1e-4) const { return max_rel_error() < tolerance; }
};

/// Random toy instance: a DAG on `nodes` vertices (i -> j for i < j with
/// probability 0.4, plus a spine i -> i+1), features in {+1, -1, 0}.
struct GradCheckInstance {
  EncoderParams params;
  AdjacencyOperator adjacency;
  GraphPairBatch batch;
};

inline GradCheckInstance make_gradcheck_instance(std::uint64_t seed, const GradCheckOptions &o) {
  if (o.nodes < 1 || o.pairs < 2) throw ValidationError("gradcheck needs >= 1 node and >= 2 pairs");
  GradCheckInstance inst;
  inst.params = init_params({o.input_width, o.hidden_width, o.embedding_width}, derive_seed(seed, "params"));
  std::mt19937_64 rng(derive_seed(seed, "instance"));
  std::bernoulli_distribution coin(0.4);
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < o.nodes; ++i)
    for (std::size_t j = i + 1; j < o.nodes; ++j)
      if (j == i + 1 || coin(rng)) edges.emplace_back(i, j);
  inst.adjacency = normalize_adjacency(o.nodes, edges);
  std::uniform_int_distribution<int> ternary(-1, 1);
  auto features = [&] {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(o.nodes), o.input_width);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = ternary(rng);
    return x;
  };
  for (std::size_t p = 0; p < o.pairs; ++p) {
    inst.batch.anchors.push_back(features());
    inst.batch.contrasts.push_back(features());
    inst.batch.labels.push_back(p % 2 == 0 ? 1 : 0);
  }
  return inst;
}

/// Central finite differences of L_total against the analytic gradient.
inline GradCheckReport gradcheck(const GradCheckInstance &inst, const GradCheckOptions &o,
                                 LossTerm term = LossTerm::total) {
  auto analytic = loss_gradients(inst.params, inst.adjacency, inst.batch, o.loss, term).grads;
  if (o.corrupt) analytic.w1(0, 0) += 1e-2 * (1.0 + std::abs(analytic.w1(0, 0)));

  auto loss_at = [&](const EncoderParams &p) {
    auto r = loss_gradients(p, inst.adjacency, inst.batch, o.loss, term).loss;
    return term == LossTerm::total ? r.total : term == LossTerm::positive ? r.l_pos : r.l_neg;
  };
  GradCheckReport report;
  auto check = [&](Eigen::MatrixXd EncoderParams::*field, const Eigen::MatrixXd &grad) {
    EncoderParams p = inst.params;
    Eigen::MatrixXd numeric(grad.rows(), grad.cols());
    for (Eigen::Index i = 0; i < grad.rows(); ++i)
      for (Eigen::Index j = 0; j < grad.cols(); ++j) {
        const double orig = (p.*field)(i, j);
        (p.*field)(i, j) = orig + o.step;
        const double up = loss_at(p);
        (p.*field)(i, j) = orig - o.step;
        const double down = loss_at(p);
        (p.*field)(i, j) = orig;
        numeric(i, j) = (up - down) / (2.0 * o.step);
      }
    const double diff = (grad - numeric).norm();
    const double scale = std::max({grad.norm(), numeric.norm(), 1e-300});
    report.max_abs_error = std::max(report.max_abs_error, (grad - numeric).cwiseAbs().maxCoeff());
    return diff / scale;
  };
  report.rel_error_w1 = check(&EncoderParams::w1, analytic.w1);
  report.rel_error_w2 = check(&EncoderParams::w2, analytic.w2);
  return report;
}

inline GradCheckReport gradcheck(std::uint64_t seed, const GradCheckOptions &o = {}) {
  return gradcheck(make_gradcheck_instance(seed, o), o);
}

} // namespace sacp
