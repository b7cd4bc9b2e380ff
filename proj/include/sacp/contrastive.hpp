#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sacp/config_space.hpp"
#include "sacp/gcn_encoder.hpp"
#include "sacp/rng.hpp"
#include "sacp/weight_summaries.hpp"

namespace sacp {

/// N anchor embeddings against N contrast embeddings; labels[i] is 1 for an
/// anchor-positive pair, 0 for an anchor-negative pair.
struct PairBatch {
  Eigen::MatrixXd anchors;
  Eigen::MatrixXd contrasts;
  std::vector<int> labels;
  double temperature = 0.5;
  double epsilon = 1e-8;
};

struct PairLoss {
  Eigen::VectorXd per_pair;
  double l_pos = 0.0;
  double l_neg = 0.0;
  double total = 0.0;
};

enum class LossTerm { total, positive, negative };

/// (z1 . z2^T) / temperature.
inline Eigen::MatrixXd scaled_sim(const Eigen::MatrixXd &z1, const Eigen::MatrixXd &z2, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
  if (z1.cols() != z2.cols()) throw ValidationError("embedding widths differ");
  return (z1 * z2.transpose()) / temperature;
}

namespace detail {

inline void check_batch(const PairBatch &b) {
  if (b.anchors.rows() != b.contrasts.rows() || static_cast<std::size_t>(b.anchors.rows()) != b.labels.size())
    throw ValidationError("pair batch components have different lengths");
  if (b.anchors.rows() == 0) throw ValidationError("empty pair batch");
  for (int y : b.labels)
    if (y != 0 && y != 1) throw ValidationError("pair labels must be 0 or 1");
  if (!(b.epsilon >= 0.0)) throw ValidationError("epsilon must be nonnegative");
}

inline std::pair<std::size_t, std::size_t> label_counts(const std::vector<int> &labels) {
  std::size_t pos = 0;
  for (int y : labels) pos += (y == 1);
  return {pos, labels.size() - pos};
}

} // namespace detail

/// Per-pair loss -log(exp(s_ii - m_i) / (sum_j exp(s_ij - m_i) + eps)) with m_i
/// the row maximum, averaged separately over positive and negative pairs.
/// With `require_both`, an empty positive or negative set is an error;
/// otherwise the empty side contributes 0.
inline PairLoss pair_loss(const PairBatch &batch, bool require_both = false) {
  detail::check_batch(batch);
  const auto s = scaled_sim(batch.anchors, batch.contrasts, batch.temperature);
  const auto n = s.rows();
  PairLoss out;
  out.per_pair.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = s.row(i).maxCoeff();
    const double denom = (s.row(i).array() - m).exp().sum() + batch.epsilon;
    out.per_pair(i) = -((s(i, i) - m) - std::log(denom));
  }
  const auto [np, nn] = detail::label_counts(batch.labels);
  if (require_both && (np == 0 || nn == 0)) throw ValidationError("batch needs both positive and negative pairs");
  for (Eigen::Index i = 0; i < n; ++i) (batch.labels[i] ? out.l_pos : out.l_neg) += out.per_pair(i);
  if (np) out.l_pos /= static_cast<double>(np);
  if (nn) out.l_neg /= static_cast<double>(nn);
  out.total = out.l_pos + out.l_neg;
  return out;
}

struct EmbeddingGradients {
  Eigen::MatrixXd anchors;
  Eigen::MatrixXd contrasts;
};

/// Exact gradient of the chosen loss term with respect to both embedding
/// sets. The row maximum is differentiated as a selector, which matters
/// only when eps > 0.
inline EmbeddingGradients pair_loss_gradients(const PairBatch &batch, LossTerm term = LossTerm::total) {
  detail::check_batch(batch);
  const auto s = scaled_sim(batch.anchors, batch.contrasts, batch.temperature);
  const auto n = s.rows();
  const auto [np, nn] = detail::label_counts(batch.labels);
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool positive = batch.labels[i] == 1;
    double w = 0.0;
    if (positive && np && term != LossTerm::negative) w = 1.0 / static_cast<double>(np);
    if (!positive && nn && term != LossTerm::positive) w = 1.0 / static_cast<double>(nn);
    if (w == 0.0) continue;
    Eigen::Index arg = 0;
    const double m = s.row(i).maxCoeff(&arg);
    const Eigen::RowVectorXd e = (s.row(i).array() - m).exp().matrix();
    const double sum = e.sum();
    const double denom = sum + batch.epsilon;
    Eigen::RowVectorXd row = e / denom;
    row(i) -= 1.0;
    row(arg) += 1.0 - sum / denom;
    g.row(i) = w * row;
  }
  return {g * batch.contrasts / batch.temperature, g.transpose() * batch.anchors / batch.temperature};
}

struct LossSettings {
  double temperature = 0.5;
  double epsilon = 1e-8;
};

/// Anchor and contrast graphs (feature matrices over one shared adjacency).
struct GraphPairBatch {
  std::vector<Eigen::MatrixXd> anchors;
  std::vector<Eigen::MatrixXd> contrasts;
  std::vector<int> labels;
};

struct BatchGradients {
  PairLoss loss;
  EncoderGradients grads;
};

/// Loss and exact weight gradients through the encoder for one batch.
inline BatchGradients loss_gradients(const EncoderParams &params, const AdjacencyOperator &adj,
                                     const GraphPairBatch &batch, const LossSettings &settings,
                                     LossTerm term = LossTerm::total, bool require_both = false) {
  const auto n = batch.anchors.size();
  if (batch.contrasts.size() != n || batch.labels.size() != n)
    throw ValidationError("graph pair batch components have different lengths");
  const auto e = params.w2.cols();
  std::vector<ForwardPass> fa, fc;
  fa.reserve(n);
  fc.reserve(n);
  PairBatch pb{Eigen::MatrixXd(static_cast<Eigen::Index>(n), e), Eigen::MatrixXd(static_cast<Eigen::Index>(n), e),
               batch.labels, settings.temperature, settings.epsilon};
  for (std::size_t i = 0; i < n; ++i) {
    fa.push_back(forward(params, adj, batch.anchors[i]));
    fc.push_back(forward(params, adj, batch.contrasts[i]));
    pb.anchors.row(static_cast<Eigen::Index>(i)) = fa.back().embedding;
    pb.contrasts.row(static_cast<Eigen::Index>(i)) = fc.back().embedding;
  }
  BatchGradients out{pair_loss(pb, require_both), EncoderGradients::zeros_like(params)};
  if (!std::isfinite(out.loss.total)) throw RuntimeFailure("contrastive loss became non-finite");
  const auto ge = pair_loss_gradients(pb, term);
  for (std::size_t i = 0; i < n; ++i) {
    backward(params, adj, fa[i], ge.anchors.row(static_cast<Eigen::Index>(i)), out.grads);
    backward(params, adj, fc[i], ge.contrasts.row(static_cast<Eigen::Index>(i)), out.grads);
  }
  if (!out.grads.w1.allFinite() || !out.grads.w2.allFinite()) throw RuntimeFailure("non-finite gradient");
  return out;
}

/// Adaptive moment estimation over both weight matrices.
class AdamOptimizer {
public:
  explicit AdamOptimizer(const EncoderParams &like, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8)
      : lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(eps), m_(EncoderGradients::zeros_like(like)),
        v_(EncoderGradients::zeros_like(like)) {}

  void step(EncoderParams &params, const EncoderGradients &g) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    update(params.w1, g.w1, m_.w1, v_.w1, c1, c2);
    update(params.w2, g.w2, m_.w2, v_.w2, c1, c2);
  }

  std::uint64_t steps() const { return t_; }

private:
  void update(Eigen::MatrixXd &w, const Eigen::MatrixXd &g, Eigen::MatrixXd &m, Eigen::MatrixXd &v, double c1,
              double c2) const {
    m = b1_ * m + (1.0 - b1_) * g;
    v = b2_ * v + (1.0 - b2_) * g.cwiseProduct(g);
    w.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
  }

  double lr_, b1_, b2_, eps_;
  EncoderGradients m_, v_;
  std::uint64_t t_ = 0;
};

struct TripletSpec {
  PruningConfig anchor;
  PruningConfig positive;
  PruningConfig negative;
};

/// Anchor keeps its pool masks (materialized with `anchor_policy` when the
/// pool carries none); positive takes l1 masks, negative random masks, both
/// at the anchor's rates.
inline std::vector<TripletSpec> build_triplets(const CandidatePool &pool, const ArchGraph &arch,
                                               const WeightSummaries &summaries, std::uint64_t seed,
                                               MaskPolicy anchor_policy = MaskPolicy::l1) {
  if (pool.configs.empty()) throw ValidationError("cannot build triplets from an empty pool");
  std::vector<TripletSpec> out;
  out.reserve(pool.configs.size());
  for (const auto &cfg : pool.configs) {
    TripletSpec t;
    if (cfg.masks.empty()) {
      t.anchor = materialize_masks(cfg.vector, arch, anchor_policy, &summaries, mask_seed(pool.seed, cfg.id));
      t.anchor.id = cfg.id;
    } else {
      validate_config(cfg, arch);
      t.anchor = cfg;
    }
    t.positive = materialize_masks(cfg.vector, arch, MaskPolicy::l1, &summaries, 0);
    t.negative = materialize_masks(cfg.vector, arch, MaskPolicy::random, nullptr, derive_seed(seed, "negative", cfg.id));
    t.positive.id = t.negative.id = cfg.id;
    out.push_back(std::move(t));
  }
  return out;
}

struct TrainConfig {
  int epochs = 15;
  int batch_size = 32;
  double temperature = 0.5;
  double epsilon = 1e-8;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double l_pos = 0.0;
  double l_neg = 0.0;
  double wall_time = 0.0;
};

struct TrainResult {
  EncoderParams params;
  std::vector<EpochRecord> history;
};

inline void validate_train_config(const TrainConfig &c) {
  if (c.epochs < 1) throw ValidationError("epochs must be >= 1");
  if (c.batch_size < 2) throw ValidationError("batch size must be >= 2");
  if (!(c.temperature > 0.0)) throw ValidationError("temperature must be positive");
  if (!(c.epsilon >= 0.0)) throw ValidationError("epsilon must be nonnegative");
  if (!(c.learning_rate >= 0.0)) throw ValidationError("learning rate must be nonnegative");
}

/// Fixed batch layout for one epoch: triplet order is a seeded shuffle, each
/// chunk of batch_size triplets contributes its first half as
/// anchor-positive pairs and the rest as anchor-negative pairs.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t triplets, int batch_size, std::uint64_t seed,
                                                           int epoch) {
  std::vector<std::size_t> order(triplets);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, "epoch", static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start + 2 <= triplets; start += bs)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(triplets, start + bs)));
  return out;
}

inline GraphPairBatch assemble_batch(const ArchGraph &arch, std::span<const TripletSpec> triplets,
                                     std::span<const std::size_t> members) {
  GraphPairBatch b;
  const auto half = members.size() / 2;
  for (std::size_t k = 0; k < members.size(); ++k) {
    const auto &t = triplets[members[k]];
    const bool positive = k < half;
    b.anchors.push_back(config_features(arch, t.anchor.masks));
    b.contrasts.push_back(config_features(arch, positive ? t.positive.masks : t.negative.masks));
    b.labels.push_back(positive ? 1 : 0);
  }
  return b;
}

/// Optimizes L_total with Adam over epochs x batches. Deterministic per
/// config.seed. Throws RuntimeFailure if the loss diverges.
inline TrainResult train(EncoderParams params, const ArchGraph &arch, std::span<const TripletSpec> triplets,
                         const TrainConfig &config) {
  validate_train_config(config);
  if (triplets.size() < 2) throw ValidationError("training needs at least two triplets");
  if (params.w1.rows() != max_width(arch)) throw ValidationError("encoder input width does not match the arch");
  const auto adj = normalize_adjacency(arch);
  const LossSettings settings{config.temperature, config.epsilon};
  AdamOptimizer opt(params, config.learning_rate);
  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    const auto batches = epoch_batches(triplets.size(), config.batch_size, config.seed, epoch);
    for (const auto &members : batches) {
      auto batch = assemble_batch(arch, triplets, members);
      auto step = loss_gradients(params, adj, batch, settings, LossTerm::total, true);
      opt.step(params, step.grads);
      if (!params.w1.allFinite() || !params.w2.allFinite()) throw RuntimeFailure("encoder weights diverged");
      rec.mean_loss += step.loss.total;
      rec.l_pos += step.loss.l_pos;
      rec.l_neg += step.loss.l_neg;
    }
    const auto nb = static_cast<double>(batches.size());
    rec.mean_loss /= nb;
    rec.l_pos /= nb;
    rec.l_neg /= nb;
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
  }
  result.params = std::move(params);
  return result;
}

/// Mean L_total over one pass with the epoch-`epoch` batch layout, no updates.
inline double evaluate_loss(const EncoderParams &params, const ArchGraph &arch, std::span<const TripletSpec> triplets,
                            const TrainConfig &config, int epoch = 1) {
  const auto adj = normalize_adjacency(arch);
  const LossSettings settings{config.temperature, config.epsilon};
  double total = 0.0;
  const auto batches = epoch_batches(triplets.size(), config.batch_size, config.seed, epoch);
  for (const auto &members : batches)
    total += loss_gradients(params, adj, assemble_batch(arch, triplets, members), settings, LossTerm::total, true)
                 .loss.total;
  return total / static_cast<double>(batches.size());
}

} // namespace sacp
