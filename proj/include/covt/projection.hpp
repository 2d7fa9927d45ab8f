#pragma once

// Projection heads mapping backbone hidden states into expert prompt or
// feature spaces: linear map, cross-attention against a learnable query
// bank, then two dense layers.

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "covt/errors.hpp"
#include "covt/rng.hpp"
#include "covt/tensor.hpp"

namespace covt {

enum class TargetSpace { SegPrompt, DepthPrompt, EdgeKernel, DinoFeature };

inline const char* target_space_name(TargetSpace s) {
  switch (s) {
    case TargetSpace::SegPrompt: return "seg_prompt";
    case TargetSpace::DepthPrompt: return "depth_prompt";
    case TargetSpace::EdgeKernel: return "edge_kernel";
    case TargetSpace::DinoFeature: return "dino_feature";
  }
  return "?";
}

class ProjectionHead {
 public:
  ProjectionHead() = default;

  ProjectionHead(TargetSpace space, int hidden_dim, int mapped_dim, int query_count,
                 Rng& rng)
      : space_(space), hidden_dim_(hidden_dim), mapped_dim_(mapped_dim),
        query_count_(query_count) {
    auto init = [&rng](int r, int c, double scale) {
      ad::Mat m(r, c);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = scale * rnd_normal(rng);
      return m;
    };
    std::string p = std::string("proj.") + target_space_name(space) + ".";
    double hs = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    double ms = 1.0 / std::sqrt(static_cast<double>(mapped_dim));
    W_ = ad::Parameter(p + "W", init(hidden_dim, mapped_dim, hs));
    b_ = ad::Parameter(p + "b", ad::Mat::Zero(1, mapped_dim));
    q_ = ad::Parameter(p + "q", init(query_count, mapped_dim, 1.0));
    d1_W_ = ad::Parameter(p + "d1_W", init(mapped_dim, mapped_dim, ms));
    d1_b_ = ad::Parameter(p + "d1_b", ad::Mat::Zero(1, mapped_dim));
    d2_W_ = ad::Parameter(p + "d2_W", init(mapped_dim, mapped_dim, ms));
    d2_b_ = ad::Parameter(p + "d2_b", ad::Mat::Zero(1, mapped_dim));
  }

  // hiddens: n x hidden_dim -> query_count x mapped_dim
  ad::Var project(ad::Tape& tape, ad::Var hiddens) const {
    if (tape.val(hiddens).cols() != hidden_dim_ || tape.val(hiddens).rows() < 1)
      throw ShapeMismatch("project: expected n x " + std::to_string(hidden_dim_));
    ad::Var zm = tape.add_rowvec(tape.matmul(hiddens, tape.param(cp(W_))), tape.param(cp(b_)));
    ad::Var scores = tape.affine(tape.matmul_nt(tape.param(cp(q_)), zm),
                                 1.0 / std::sqrt(static_cast<double>(mapped_dim_)), 0.0);
    ad::Var attn = tape.matmul(tape.row_softmax(scores), zm);
    ad::Var h1 = tape.gelu(
        tape.add_rowvec(tape.matmul(attn, tape.param(cp(d1_W_))), tape.param(cp(d1_b_))));
    return tape.add_rowvec(tape.matmul(h1, tape.param(cp(d2_W_))), tape.param(cp(d2_b_)));
  }

  ad::Mat project_values(const ad::Mat& hiddens) const {
    ad::Tape tape(false);
    return tape.val(project(tape, tape.constant(hiddens)));
  }

  // Attention weights for the given inputs (row per query), for tests.
  ad::Mat attention_weights(const ad::Mat& hiddens) const {
    ad::Tape tape(false);
    ad::Var h = tape.constant(hiddens);
    ad::Var zm = tape.add_rowvec(tape.matmul(h, tape.param(cp(W_))), tape.param(cp(b_)));
    ad::Var scores = tape.affine(tape.matmul_nt(tape.param(cp(q_)), zm),
                                 1.0 / std::sqrt(static_cast<double>(mapped_dim_)), 0.0);
    return tape.val(tape.row_softmax(scores));
  }

  TargetSpace space() const { return space_; }
  int hidden_dim() const { return hidden_dim_; }
  int mapped_dim() const { return mapped_dim_; }
  int query_count() const { return query_count_; }

  std::vector<ad::Parameter*> params() {
    return {&W_, &b_, &q_, &d1_W_, &d1_b_, &d2_W_, &d2_b_};
  }

 private:
  // Tape::param takes a mutable reference; projection application never
  // mutates values, only records gradient leaves.
  static ad::Parameter& cp(const ad::Parameter& p) {
    return const_cast<ad::Parameter&>(p);
  }

  TargetSpace space_ = TargetSpace::SegPrompt;
  int hidden_dim_ = 0, mapped_dim_ = 0, query_count_ = 0;
  ad::Parameter W_, b_, q_, d1_W_, d1_b_, d2_W_, d2_b_;
};

}  // namespace covt
