#pragma once

// Curriculum trainer: teacher-forced language loss plus the visual alignment
// heads, AdamW over two learning-rate groups (adapters vs projections) with
// warmup and cosine decay, staged data scheduling, and checkpointing.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "covt/alignment.hpp"
#include "covt/backbone.hpp"
#include "covt/checkpoint.hpp"
#include "covt/config.hpp"
#include "covt/datapipe.hpp"
#include "covt/errors.hpp"
#include "covt/experts.hpp"
#include "covt/projection.hpp"
#include "covt/tensor.hpp"

namespace covt {

// Stage for a zero-based global step: consecutive blocks of stage_steps.
inline int stage_schedule(const CovtConfig& cfg, long step) {
  long acc = 0;
  for (int s = 0; s < 4; ++s) {
    acc += cfg.stage_steps[s];
    if (step < acc) return s + 1;
  }
  return 4;
}

// Warmup-then-cosine multiplier in (0, 1].
inline double lr_schedule(const CovtConfig& cfg, long step) {
  const double total = static_cast<double>(cfg.total_steps());
  const double warmup = std::max(1.0, cfg.warmup_ratio * total);
  double t = static_cast<double>(step);
  if (t < warmup) return (t + 1.0) / warmup;
  double progress = (t - warmup) / std::max(1.0, total - warmup);
  return 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

struct StepMetrics {
  long step = 0;
  int stage = 0;
  double total = 0, ce = 0;
  std::optional<double> seg, depth, edge, dino;
  double grad_norm = 0;
  double lr_mult = 0;
};

struct SampleLoss {
  ad::Var total;
  double ce = 0;
  LossParts parts;
  std::optional<AlignmentOutput> seg, depth, edge, dino;
  std::vector<int> ids;
};

class Trainer {
 public:
  Trainer(const CovtConfig& cfg, std::vector<TrainingRecord> records,
          std::string cache_dir)
      : cfg_(cfg),
        records_(std::move(records)),
        cache_dir_(std::move(cache_dir)),
        backbone_(cfg, static_cast<std::uint64_t>(cfg.seed)) {
    backbone_.apply_low_rank_adapters(cfg.adapter_rank, cfg.adapter_alpha);
    Rng rng = derive_rng(static_cast<std::uint64_t>(cfg.seed), "projections");
    const int g = cfg.image_size / kPatchPixels;
    seg_head_ = ProjectionHead(TargetSpace::SegPrompt, cfg.hidden_dim, kExpertChannels, 1, rng);
    depth_head_ = ProjectionHead(TargetSpace::DepthPrompt, cfg.hidden_dim, kExpertChannels, 1, rng);
    edge_head_ = ProjectionHead(TargetSpace::EdgeKernel, cfg.hidden_dim, kExpertChannels, 1, rng);
    dino_head_ = ProjectionHead(TargetSpace::DinoFeature, cfg.hidden_dim, kPatchFeatureDim,
                                g * g, rng);
    for (const auto& r : records_) by_stage_[r.stage].push_back(&r);
  }

  ToyBackbone& backbone() { return backbone_; }
  const CovtConfig& config() const { return cfg_; }
  ProjectionHead& head(Group g) {
    switch (g) {
      case Group::Seg: return seg_head_;
      case Group::Depth: return depth_head_;
      case Group::Edge: return edge_head_;
      case Group::Dino: return dino_head_;
    }
    throw InvalidValue("group");
  }

  std::vector<ad::Parameter*> projection_params() {
    std::vector<ad::Parameter*> out;
    for (ProjectionHead* h : {&seg_head_, &depth_head_, &edge_head_, &dino_head_})
      for (ad::Parameter* p : h->params()) out.push_back(p);
    return out;
  }

  const CachedSample& cached(const std::string& sample_id) {
    auto it = cache_.find(sample_id);
    if (it == cache_.end())
      it = cache_.emplace(sample_id, read_expert_cache(cache_dir_ + "/" + sample_id)).first;
    return it->second;
  }

  // Teacher-forced joint loss for one record.
  SampleLoss sample_loss(ad::Tape& tape, const TrainingRecord& rec) {
    const Vocab& vocab = backbone_.vocab();
    const CachedSample& cs = cached(rec.sample_id);

    std::vector<int> q_ids = vocab.encode(rec.question);
    std::vector<int> ids = q_ids;
    for (int id : vocab.encode(rec.answer)) ids.push_back(id);
    ids.push_back(vocab.eos_id());
    parse_sample(vocab, ids);  // reject malformed thought structure up front

    ForwardResult fr = backbone_.forward(tape, ids, cs.image);

    SampleLoss out;
    out.ids = ids;
    std::vector<int> rows, targets;
    for (size_t p = q_ids.size(); p < ids.size(); ++p) {
      rows.push_back(static_cast<int>(p) - 1);
      targets.push_back(ids[p]);
    }
    ad::Var ce = tape.cross_entropy_mean(fr.logits, rows, targets);
    out.ce = tape.val(ce)(0, 0);
    if (!std::isfinite(out.ce)) throw NonFiniteLoss("ce");

    // Gather hidden states of the visual tokens, per group, in index order.
    std::map<Group, std::vector<std::pair<int, int>>> slots;  // group -> (index, pos)
    for (size_t p = 0; p < ids.size(); ++p)
      if (auto info = vocab.visual_info(ids[p]))
        slots[info->group].emplace_back(info->index, static_cast<int>(p));

    auto group_hiddens = [&](Group g) {
      std::vector<ad::Var> rows_v;
      for (const auto& [idx, pos] : slots[g])
        rows_v.push_back(tape.slice_rows(fr.hiddens, pos, 1));
      return tape.concat_rows(rows_v);
    };

    std::vector<std::pair<Group, ad::Var>> parts;
    auto check_finite = [](double v, const char* name) {
      if (!std::isfinite(v)) throw NonFiniteLoss(name);
    };
    if (slots.count(Group::Seg)) {
      // With token dropout there may be fewer seg tokens than masks; keep the
      // largest masks (the filter already sorted them by area, descending).
      std::vector<MaskInfo> gt = cs.targets.masks;
      if (gt.size() > slots[Group::Seg].size()) gt.resize(slots[Group::Seg].size());
      out.seg = seg_head_loss(tape, group_hiddens(Group::Seg), cs.targets.seg_embedding,
                              gt, seg_head_, cfg_);
      check_finite(out.seg->loss, "seg");
      out.parts.seg = out.seg->loss;
      parts.emplace_back(Group::Seg, out.seg->loss_var);
    }
    if (slots.count(Group::Depth)) {
      std::vector<Mat> taps;
      for (const auto& [idx, pos] : slots[Group::Depth])
        taps.push_back(cs.targets.depth_taps[idx]);
      out.depth = depth_head_loss(tape, group_hiddens(Group::Depth), taps,
                                  cs.targets.depth, depth_head_, cfg_);
      check_finite(out.depth->loss, "depth");
      out.parts.depth = out.depth->loss;
      parts.emplace_back(Group::Depth, out.depth->loss_var);
    }
    if (slots.count(Group::Edge)) {
      std::vector<Mat> taps;
      for (const auto& [idx, pos] : slots[Group::Edge])
        taps.push_back(cs.targets.edge_taps[idx]);
      out.edge = edge_head_loss(tape, group_hiddens(Group::Edge), taps, cs.targets.edge,
                                edge_head_, cfg_);
      check_finite(out.edge->loss, "edge");
      out.parts.edge = out.edge->loss;
      parts.emplace_back(Group::Edge, out.edge->loss_var);
    }
    if (slots.count(Group::Dino)) {
      out.dino = dino_head_loss(tape, group_hiddens(Group::Dino), cs.targets.patch_features,
                                dino_head_, cfg_);
      check_finite(out.dino->loss, "dino");
      out.parts.dino = out.dino->loss;
      parts.emplace_back(Group::Dino, out.dino->loss_var);
    }

    out.total = total_loss_op(tape, ce, parts, cfg_);
    if (!std::isfinite(tape.val(out.total)(0, 0))) throw NonFiniteLoss("total");
    return out;
  }

  // One optimization step over a batch of records. Returns averaged metrics.
  StepMetrics train_step(long step, const std::vector<const TrainingRecord*>& batch) {
    if (batch.empty()) throw InvalidValue("empty batch");
    for (ad::Parameter* p : trainable_params()) p->zero_grad();

    StepMetrics m;
    m.step = step;
    m.stage = stage_schedule(cfg_, step);
    const double inv = 1.0 / static_cast<double>(batch.size());
    auto acc = [inv](std::optional<double>& dst, const std::optional<double>& src) {
      if (src) dst = dst.value_or(0.0) + inv * *src;
    };
    for (const TrainingRecord* rec : batch) {
      ad::Tape tape;
      SampleLoss sl = sample_loss(tape, *rec);
      tape.backward(tape.affine(sl.total, inv, 0.0));
      m.total += inv * tape.val(sl.total)(0, 0);
      m.ce += inv * sl.ce;
      acc(m.seg, sl.parts.seg);
      acc(m.depth, sl.parts.depth);
      acc(m.edge, sl.parts.edge);
      acc(m.dino, sl.parts.dino);
    }

    double sq = 0.0;
    for (ad::Parameter* p : trainable_params()) sq += p->grad.squaredNorm();
    m.grad_norm = std::sqrt(sq);
    if (!std::isfinite(m.grad_norm)) throw NonFiniteLoss("grad_norm");

    m.lr_mult = lr_schedule(cfg_, step);
    adamw_update(backbone_.adapter_params(), cfg_.lr_adapter * m.lr_mult, step);
    adamw_update(projection_params(), cfg_.lr_projection * m.lr_mult, step);
    return m;
  }

  // Runs the staged schedule from state_.step to the end, writing metrics and
  // stage checkpoints under out_dir.
  std::vector<StepMetrics> train(const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::ofstream metrics(out_dir + "/metrics.jsonl",
                          state_.step == 0 ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoFailure("cannot write " + out_dir + "/metrics.jsonl");

    std::vector<StepMetrics> history;
    const long total = cfg_.total_steps();
    for (long step = state_.step; step < total; ++step) {
      int stage = stage_schedule(cfg_, step);
      StepMetrics m = train_step(step, next_batch(stage));
      history.push_back(m);
      metrics << metrics_json(m).dump() << "\n";
      state_.step = step + 1;

      long acc = 0;
      for (int s = 0; s < 4; ++s) {
        acc += cfg_.stage_steps[s];
        if (state_.step == acc)
          save_checkpoint(out_dir + "/stage" + std::to_string(s + 1), backbone_,
                          projection_params(), cfg_, state_);
      }
    }
    save_checkpoint(out_dir + "/final", backbone_, projection_params(), cfg_, state_);
    return history;
  }

  void save(const std::string& dir) {
    save_checkpoint(dir, backbone_, projection_params(), cfg_, state_);
  }
  void load(const std::string& dir) {
    state_ = load_checkpoint(dir, backbone_, projection_params());
  }

  const CheckpointState& state() const { return state_; }

  std::vector<const TrainingRecord*> next_batch(int stage) {
    auto it = by_stage_.find(stage);
    if (it == by_stage_.end() || it->second.empty())
      throw InvalidValue("no records for stage " + std::to_string(stage));
    std::vector<const TrainingRecord*> batch;
    long& cur = state_.cursors[stage - 1];
    for (int i = 0; i < cfg_.batch_size; ++i) {
      batch.push_back(it->second[cur % it->second.size()]);
      ++cur;
    }
    return batch;
  }

  std::vector<ad::Parameter*> trainable_params() {
    std::vector<ad::Parameter*> out = backbone_.adapter_params();
    for (ad::Parameter* p : projection_params()) out.push_back(p);
    return out;
  }

  static nlohmann::json metrics_json(const StepMetrics& m) {
    nlohmann::json j{{"step", m.step},       {"stage", m.stage},
                     {"total", m.total},     {"ce", m.ce},
                     {"grad_norm", m.grad_norm}, {"lr_mult", m.lr_mult}};
    if (m.seg) j["seg"] = *m.seg;
    if (m.depth) j["depth"] = *m.depth;
    if (m.edge) j["edge"] = *m.edge;
    if (m.dino) j["dino"] = *m.dino;
    return j;
  }

 private:
  void adamw_update(const std::vector<ad::Parameter*>& params, double lr, long step) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.1;
    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    for (ad::Parameter* p : params) {
      if (!p->trainable) continue;
      p->m = b1 * p->m + (1.0 - b1) * p->grad;
      p->v = (b2 * p->v.array() + (1.0 - b2) * p->grad.array().square()).matrix();
      Eigen::ArrayXXd mhat = p->m.array() / c1;
      Eigen::ArrayXXd vhat = p->v.array() / c2;
      p->value.array() -= lr * (mhat / (vhat.sqrt() + eps) + wd * p->value.array());
    }
  }

  CovtConfig cfg_;
  std::vector<TrainingRecord> records_;
  std::string cache_dir_;
  ToyBackbone backbone_;
  ProjectionHead seg_head_, depth_head_, edge_head_, dino_head_;
  std::map<int, std::vector<const TrainingRecord*>> by_stage_;
  std::map<std::string, CachedSample> cache_;
  CheckpointState state_;
};

}  // namespace covt
