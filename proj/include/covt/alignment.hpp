#pragma once

// The four loss heads aligning visual-token hidden states with expert
// targets, the Hungarian matching over dice/focal costs, and the joint
// loss combiner.

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <vector>

#include "covt/config.hpp"
#include "covt/errors.hpp"
#include "covt/experts.hpp"
#include "covt/hungarian.hpp"
#include "covt/projection.hpp"
#include "covt/tensor.hpp"

namespace covt {

constexpr double kDiceEps = 1e-6;

// ---- scalar forms ---------------------------------------------------------

inline double dice_loss(const Mat& pred, const Mat& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw ShapeMismatch("dice_loss");
  double inter = pred.cwiseProduct(gt).sum();
  return 1.0 - 2.0 * inter / (pred.sum() + gt.sum() + kDiceEps);
}

inline double focal_loss(const Mat& pred, const Mat& gt, double gamma_f,
                         bool symmetric = false) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw ShapeMismatch("focal_loss");
  const double lo = 1e-7, hi = 1.0 - 1e-7;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    double p = std::min(hi, std::max(lo, pred(i)));
    double t = gt(i);
    acc += -std::pow(1.0 - p, gamma_f) * t * std::log(p);
    if (symmetric) acc += -std::pow(p, gamma_f) * (1.0 - t) * std::log(1.0 - p);
  }
  return acc / static_cast<double>(pred.size());
}

struct LossParts {
  std::optional<double> seg, depth, edge, dino;

  std::optional<double> get(Group g) const {
    switch (g) {
      case Group::Seg: return seg;
      case Group::Depth: return depth;
      case Group::Edge: return edge;
      case Group::Dino: return dino;
    }
    return std::nullopt;
  }
};

// L = L_ce + gamma * (sum over groups of lambda_g * L_g); absent parts are 0.
inline double total_loss(double ce, const LossParts& parts, const CovtConfig& cfg) {
  double visual = 0.0;
  if (parts.seg) visual += cfg.lambda_seg * *parts.seg;
  if (parts.depth) visual += cfg.lambda_depth * *parts.depth;
  if (parts.edge) visual += cfg.lambda_edge * *parts.edge;
  if (parts.dino) visual += cfg.lambda_dino * *parts.dino;
  return ce + cfg.gamma * visual;
}

// ---- tape forms -----------------------------------------------------------

// 1 - 2*sum(pred.*gt) / (sum(pred) + sum(gt) + eps), pred differentiable.
inline ad::Var dice_loss_op(ad::Tape& tape, ad::Var pred, const Mat& gt) {
  const Mat& p = tape.val(pred);
  if (p.rows() != gt.rows() || p.cols() != gt.cols()) throw ShapeMismatch("dice_loss");
  ad::Var inter = tape.sum(tape.hadamard(pred, tape.constant(gt)));
  ad::Var den = tape.affine(tape.sum(pred), 1.0, gt.sum() + kDiceEps);
  return tape.affine(tape.div11(inter, den), -2.0, 1.0);
}

struct AlignmentOutput {
  Group head;
  double loss = 0.0;
  ad::Var loss_var;                  // differentiable loss on the tape
  std::vector<Mat> reconstruction;   // masks / [depth] / [edge] / feature grids
  std::optional<std::vector<int>> match;  // seg only
};

constexpr double kPadCost = 1e6;  // sentinel for padded gt columns

// Prompt-conditioned toy mask decoding: sigmoid(prompt . dense_embedding).
inline ad::Var decode_mask_op(ad::Tape& tape, ad::Var prompt, const Mat& dense_embedding) {
  note_decoder_invocation();
  return tape.sigmoid(tape.matmul(prompt, tape.constant(dense_embedding)));
}

// seg_hiddens: n_tok x hidden_dim. gt_masks must already be filtered.
inline AlignmentOutput seg_head_loss(ad::Tape& tape, ad::Var seg_hiddens,
                                     const Mat& dense_embedding,
                                     const std::vector<MaskInfo>& gt_masks,
                                     const ProjectionHead& proj, const CovtConfig& cfg) {
  const int n_tok = static_cast<int>(tape.val(seg_hiddens).rows());
  const int n_gt = static_cast<int>(gt_masks.size());
  if (n_gt == 0) throw EmptyTargets("no ground-truth masks after filtering");
  if (n_gt > n_tok) throw ShapeMismatch("more gt masks than seg tokens");

  std::vector<ad::Var> pred;
  std::vector<Mat> gt_flat;
  for (const auto& m : gt_masks) {
    Mat flat(1, m.mask.size());
    int k = 0;
    for (Eigen::Index r = 0; r < m.mask.rows(); ++r)
      for (Eigen::Index c = 0; c < m.mask.cols(); ++c) flat(0, k++) = m.mask(r, c);
    gt_flat.push_back(std::move(flat));
  }
  for (int i = 0; i < n_tok; ++i) {
    ad::Var prompt = proj.project(tape, tape.slice_rows(seg_hiddens, i, 1));
    pred.push_back(decode_mask_op(tape, prompt, dense_embedding));
  }

  Mat cost(n_tok, n_tok);
  for (int i = 0; i < n_tok; ++i) {
    const Mat& pm = tape.val(pred[i]);
    for (int j = 0; j < n_tok; ++j) {
      if (j < n_gt) {
        cost(i, j) = dice_loss(pm, gt_flat[j]) +
                     cfg.match_alpha * focal_loss(pm, gt_flat[j], cfg.focal_gamma,
                                                  cfg.symmetric_focal);
      } else {
        cost(i, j) = kPadCost;
      }
    }
  }
  std::vector<int> sigma = hungarian_match(cost);

  ad::Var loss = tape.constant(Mat::Zero(1, 1));
  for (int i = 0; i < n_tok; ++i) {
    int j = sigma[i];
    if (j >= n_gt) continue;  // padded column, excluded from the loss
    ad::Var pair = tape.add(
        dice_loss_op(tape, pred[i], gt_flat[j]),
        tape.affine(tape.focal(pred[i], gt_flat[j], cfg.focal_gamma, cfg.symmetric_focal),
                    cfg.match_alpha, 0.0));
    loss = tape.add(loss, pair);
  }

  AlignmentOutput out;
  out.head = Group::Seg;
  out.loss_var = loss;
  out.loss = tape.val(loss)(0, 0);
  out.match = sigma;
  for (int i = 0; i < n_tok; ++i) out.reconstruction.push_back(tape.val(pred[i]));
  return out;
}

// depth_hiddens: n_tok x hidden_dim; taps: one HW x c feature map per token.
// Each token reconstructs a softmax depth map against its tap; maps are
// averaged and compared (L1 on the pixel simplex) with the sum-normalized
// ground truth.
inline AlignmentOutput depth_head_loss(ad::Tape& tape, ad::Var depth_hiddens,
                                       const std::vector<Mat>& taps, const Mat& gt_depth,
                                       const ProjectionHead& proj, const CovtConfig& cfg) {
  (void)cfg;
  const int n_tok = static_cast<int>(tape.val(depth_hiddens).rows());
  if (static_cast<int>(taps.size()) != n_tok)
    throw ShapeMismatch("depth taps: expected " + std::to_string(n_tok));
  const Eigen::Index hw = taps[0].rows();
  if (gt_depth.size() != hw) throw ShapeMismatch("gt depth size");

  std::vector<ad::Var> maps;
  AlignmentOutput out;
  out.head = Group::Depth;
  for (int i = 0; i < n_tok; ++i) {
    ad::Var prompt = proj.project(tape, tape.slice_rows(depth_hiddens, i, 1));
    ad::Var scores = tape.matmul_nt(prompt, tape.constant(taps[i]));  // 1 x HW
    maps.push_back(tape.row_softmax(scores));
  }
  ad::Var mean_map = maps[0];
  for (int i = 1; i < n_tok; ++i) mean_map = tape.add(mean_map, maps[i]);
  mean_map = tape.affine(mean_map, 1.0 / n_tok, 0.0);

  Mat gt_flat(1, hw);
  int k = 0;
  for (Eigen::Index r = 0; r < gt_depth.rows(); ++r)
    for (Eigen::Index c = 0; c < gt_depth.cols(); ++c) gt_flat(0, k++) = gt_depth(r, c);
  double gt_sum = gt_flat.sum();
  if (gt_sum <= 0) throw InvalidValue("gt depth must have positive sum");
  gt_flat /= gt_sum;

  out.loss_var = tape.abs_sum_diff(mean_map, tape.constant(gt_flat));
  out.loss = tape.val(out.loss_var)(0, 0);
  for (auto& m : maps) out.reconstruction.push_back(tape.val(m));
  out.reconstruction.push_back(tape.val(mean_map));  // last entry: aggregate
  return out;
}

// edge_hiddens: n_tok x hidden_dim; taps: one c x HW feature map per token.
// Each projected token acts as a 1x1 convolution kernel over its tap;
// responses are averaged, sigmoid-normalized and L1-compared per pixel.
inline AlignmentOutput edge_head_loss(ad::Tape& tape, ad::Var edge_hiddens,
                                      const std::vector<Mat>& taps, const Mat& gt_edge,
                                      const ProjectionHead& proj, const CovtConfig& cfg) {
  (void)cfg;
  const int n_tok = static_cast<int>(tape.val(edge_hiddens).rows());
  if (static_cast<int>(taps.size()) != n_tok)
    throw ShapeMismatch("edge taps: expected " + std::to_string(n_tok));
  const Eigen::Index hw = taps[0].cols();
  if (gt_edge.size() != hw) throw ShapeMismatch("gt edge size");
  if (taps[0].rows() != proj.mapped_dim())
    throw ShapeMismatch("edge kernel dim vs tap channels");

  std::vector<ad::Var> maps;
  for (int i = 0; i < n_tok; ++i) {
    ad::Var kernel = proj.project(tape, tape.slice_rows(edge_hiddens, i, 1));
    maps.push_back(tape.matmul(kernel, tape.constant(taps[i])));  // 1 x HW
  }
  ad::Var mean_map = maps[0];
  for (int i = 1; i < n_tok; ++i) mean_map = tape.add(mean_map, maps[i]);
  ad::Var agg = tape.sigmoid(tape.affine(mean_map, 1.0 / n_tok, 0.0));

  Mat gt_flat(1, hw);
  int k = 0;
  for (Eigen::Index r = 0; r < gt_edge.rows(); ++r)
    for (Eigen::Index c = 0; c < gt_edge.cols(); ++c) gt_flat(0, k++) = gt_edge(r, c);

  AlignmentOutput out;
  out.head = Group::Edge;
  out.loss_var = tape.abs_mean_diff(agg, tape.constant(gt_flat));
  out.loss = tape.val(out.loss_var)(0, 0);
  for (auto& m : maps) out.reconstruction.push_back(tape.val(m));
  out.reconstruction.push_back(tape.val(agg));
  return out;
}

// dino_hiddens: n_tok x hidden_dim; each hidden projects to a P x d grid
// compared to the expert patch grid under MSE; mean over tokens.
inline AlignmentOutput dino_head_loss(ad::Tape& tape, ad::Var dino_hiddens,
                                      const Mat& gt_features, const ProjectionHead& proj,
                                      const CovtConfig& cfg) {
  (void)cfg;
  const int n_tok = static_cast<int>(tape.val(dino_hiddens).rows());
  if (proj.query_count() != gt_features.rows() || proj.mapped_dim() != gt_features.cols())
    throw ShapeMismatch("dino grid vs gt features");

  AlignmentOutput out;
  out.head = Group::Dino;
  ad::Var loss = tape.constant(Mat::Zero(1, 1));
  ad::Var gt = tape.constant(gt_features);
  for (int i = 0; i < n_tok; ++i) {
    ad::Var grid = proj.project(tape, tape.slice_rows(dino_hiddens, i, 1));
    loss = tape.add(loss, tape.sq_mean_diff(grid, gt));
    out.reconstruction.push_back(tape.val(grid));
  }
  out.loss_var = tape.affine(loss, 1.0 / n_tok, 0.0);
  out.loss = tape.val(out.loss_var)(0, 0);
  return out;
}

// Tape counterpart of total_loss for training.
inline ad::Var total_loss_op(ad::Tape& tape, ad::Var ce,
                             const std::vector<std::pair<Group, ad::Var>>& parts,
                             const CovtConfig& cfg) {
  ad::Var total = ce;
  for (const auto& [g, v] : parts)
    total = tape.add(total, tape.affine(v, cfg.gamma * cfg.lambda(g), 0.0));
  return total;
}

}  // namespace covt
