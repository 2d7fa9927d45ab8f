#pragma once

// Toy autoregressive multimodal backbone: patch-embedded image prefix,
// causal decoder stack, tied special-token vocabulary, optional low-rank
// adapters, and greedy generation that captures hidden states at
// visual-token positions.

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "covt/config.hpp"
#include "covt/errors.hpp"
#include "covt/rng.hpp"
#include "covt/tensor.hpp"
#include "covt/tokenizer.hpp"

namespace covt {

constexpr int kMaxSeq = 256;

struct ThoughtSlot {
  int position;        // index into token_ids
  Group group;
  int index_in_group;
  Eigen::VectorXd hidden;  // final-layer hidden at that position
};

struct ThoughtChain {
  std::vector<int> token_ids;
  std::vector<ThoughtSlot> visual_slots;
};

struct ForwardResult {
  ad::Var logits;   // n_text x vocab
  ad::Var hiddens;  // n_text x hidden_dim (post final layer norm)
};

struct LowRankAdapter {
  ad::Parameter A, B;
};

class ToyBackbone {
 public:
  ToyBackbone(const CovtConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), vocab_(cfg.token_schema) {
    Rng rng(fnv1a("backbone", seed));
    const int d = cfg.hidden_dim;
    const int v = vocab_.size();
    patch_px_ = kPatchPixelsPerSide * kPatchPixelsPerSide;
    n_patches_ = (cfg.image_size / kPatchPixelsPerSide) *
                 (cfg.image_size / kPatchPixelsPerSide);

    auto init = [&rng](const std::string& name, int r, int c, double scale) {
      ad::Mat m(r, c);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = scale * rnd_normal(rng);
      return ad::Parameter(name, std::move(m));
    };
    auto zeros = [](const std::string& name, int r, int c) {
      return ad::Parameter(name, ad::Mat::Zero(r, c));
    };
    auto ones = [](const std::string& name, int r, int c) {
      return ad::Parameter(name, ad::Mat::Ones(r, c));
    };

    tok_embed_ = init("base.tok_embed", v, d, 0.02);
    pos_embed_ = init("base.pos_embed", kMaxSeq, d, 0.02);
    patch_W_ = init("base.patch_W", patch_px_, d, 0.05);
    patch_b_ = zeros("base.patch_b", 1, d);
    lm_W_ = init("base.lm_W", v, d, 0.02);
    lnf_g_ = ones("base.lnf_g", 1, d);
    lnf_b_ = zeros("base.lnf_b", 1, d);
    for (int l = 0; l < cfg.layer_count; ++l) {
      std::string p = "layer" + std::to_string(l) + ".";
      double s = 1.0 / std::sqrt(static_cast<double>(d));
      Layer lay;
      lay.ln1_g = ones(p + "ln1_g", 1, d);
      lay.ln1_b = zeros(p + "ln1_b", 1, d);
      lay.Wq = init(p + "Wq", d, d, s);
      lay.bq = zeros(p + "bq", 1, d);
      lay.Wk = init(p + "Wk", d, d, s);
      lay.bk = zeros(p + "bk", 1, d);
      lay.Wv = init(p + "Wv", d, d, s);
      lay.bv = zeros(p + "bv", 1, d);
      lay.Wo = init(p + "Wo", d, d, s);
      lay.bo = zeros(p + "bo", 1, d);
      lay.ln2_g = ones(p + "ln2_g", 1, d);
      lay.ln2_b = zeros(p + "ln2_b", 1, d);
      lay.W1 = init(p + "W1", d, 4 * d, s);
      lay.b1 = zeros(p + "b1", 1, 4 * d);
      lay.W2 = init(p + "W2", 4 * d, d, 0.5 * s);
      lay.b2 = zeros(p + "b2", 1, d);
      layers_.push_back(std::move(lay));
    }
  }

  static constexpr int kPatchPixelsPerSide = 8;

  const Vocab& vocab() const { return vocab_; }
  const CovtConfig& config() const { return cfg_; }
  int n_patches() const { return n_patches_; }

  // Returns next-token logits and final-layer hidden states for every text
  // position. The image is consumed as a causal prefix of patch embeddings.
  ForwardResult forward(ad::Tape& tape, const std::vector<int>& ids,
                        const ad::Mat& image) {
    if (ids.empty()) throw ShapeMismatch("forward: empty token sequence");
    if (image.rows() != cfg_.image_size || image.cols() != cfg_.image_size)
      throw ShapeMismatch("forward: image is " + std::to_string(image.rows()) + "x" +
                          std::to_string(image.cols()) + ", expected " +
                          std::to_string(cfg_.image_size));
    const int n_text = static_cast<int>(ids.size());
    const int n = n_patches_ + n_text;
    if (n > kMaxSeq)
      throw ShapeMismatch("forward: sequence length " + std::to_string(n) +
                          " exceeds " + std::to_string(kMaxSeq));

    // image prefix: one row of flattened pixels per patch
    const int g = cfg_.image_size / kPatchPixelsPerSide;
    ad::Mat patches(n_patches_, patch_px_);
    for (int pr = 0; pr < g; ++pr)
      for (int pc = 0; pc < g; ++pc) {
        int k = 0;
        for (int r = 0; r < kPatchPixelsPerSide; ++r)
          for (int c = 0; c < kPatchPixelsPerSide; ++c)
            patches(pr * g + pc, k++) =
                image(pr * kPatchPixelsPerSide + r, pc * kPatchPixelsPerSide + c);
      }
    ad::Var img_embed = tape.add_rowvec(
        tape.matmul(tape.constant(patches), eff(tape, "base.patch_W", patch_W_)),
        tape.param(patch_b_));
    ad::Var tok = tape.embed(tape.param(tok_embed_), ids);
    ad::Var x = tape.concat_rows({img_embed, tok});
    x = tape.add(x, tape.slice_rows(tape.param(pos_embed_), 0, n));

    ad::Mat mask = ad::Mat::Zero(n, n);
    for (int r = 0; r < n; ++r)
      for (int c = r + 1; c < n; ++c) mask(r, c) = -1e30;

    const int heads = cfg_.head_count;
    const int dh = cfg_.hidden_dim / heads;
    for (auto& lay : layers_) {
      ad::Var h = tape.layer_norm(x, tape.param(lay.ln1_g), tape.param(lay.ln1_b));
      ad::Var q = tape.add_rowvec(tape.matmul(h, eff(tape, lay.Wq.name, lay.Wq)),
                                  tape.param(lay.bq));
      ad::Var k = tape.add_rowvec(tape.matmul(h, eff(tape, lay.Wk.name, lay.Wk)),
                                  tape.param(lay.bk));
      ad::Var v = tape.add_rowvec(tape.matmul(h, eff(tape, lay.Wv.name, lay.Wv)),
                                  tape.param(lay.bv));
      std::vector<ad::Var> head_outs;
      for (int hd = 0; hd < heads; ++hd) {
        ad::Var qh = tape.slice_cols(q, hd * dh, dh);
        ad::Var kh = tape.slice_cols(k, hd * dh, dh);
        ad::Var vh = tape.slice_cols(v, hd * dh, dh);
        ad::Var scores = tape.affine(tape.matmul_nt(qh, kh),
                                     1.0 / std::sqrt(static_cast<double>(dh)), 0.0);
        ad::Var prob = tape.row_softmax(tape.add_const(scores, mask));
        head_outs.push_back(tape.matmul(prob, vh));
      }
      ad::Var attn = tape.concat_cols(head_outs);
      ad::Var proj = tape.add_rowvec(tape.matmul(attn, eff(tape, lay.Wo.name, lay.Wo)),
                                     tape.param(lay.bo));
      x = tape.add(x, proj);
      ad::Var h2 = tape.layer_norm(x, tape.param(lay.ln2_g), tape.param(lay.ln2_b));
      ad::Var m1 = tape.gelu(tape.add_rowvec(
          tape.matmul(h2, eff(tape, lay.W1.name, lay.W1)), tape.param(lay.b1)));
      ad::Var m2 = tape.add_rowvec(tape.matmul(m1, eff(tape, lay.W2.name, lay.W2)),
                                   tape.param(lay.b2));
      x = tape.add(x, m2);
    }
    ad::Var hn = tape.layer_norm(x, tape.param(lnf_g_), tape.param(lnf_b_));
    ad::Var text_h = tape.slice_rows(hn, n_patches_, n_text);
    ad::Var logits = tape.matmul_nt(text_h, eff(tape, "base.lm_W", lm_W_));
    return {logits, text_h};
  }

  std::pair<ad::Mat, ad::Mat> forward_values(const std::vector<int>& ids,
                                             const ad::Mat& image) {
    ad::Tape tape(false);
    ForwardResult r = forward(tape, ids, image);
    return {tape.val(r.logits), tape.val(r.hiddens)};
  }

  // Greedy decoding. Visual-token hidden states are captured at the token's
  // own position; expert decoders are never touched here.
  ThoughtChain generate_with_visual_thoughts(const std::vector<int>& prompt_ids,
                                             const ad::Mat& image, int max_len) {
    if (prompt_ids.empty()) throw ShapeMismatch("generate: empty prompt");
    if (max_len < static_cast<int>(prompt_ids.size()))
      throw ShapeMismatch("generate: max_len shorter than the prompt");
    ThoughtChain chain;
    chain.token_ids = prompt_ids;

    std::map<std::pair<int, int>, int> seen;  // (group, index) -> count
    for (int id : prompt_ids) {
      if (auto info = vocab_.visual_info(id))
        bump_budget(seen, *info);
    }

    bool capture_pending = false;
    std::optional<VisualTokenInfo> pending_info;
    for (;;) {
      auto [logits, hiddens] = forward_values(chain.token_ids, image);
      int last = static_cast<int>(chain.token_ids.size()) - 1;
      if (capture_pending) {
        ThoughtSlot slot;
        slot.position = last;
        slot.group = pending_info->group;
        slot.index_in_group = pending_info->index;
        slot.hidden = hiddens.row(last).transpose();
        chain.visual_slots.push_back(std::move(slot));
        capture_pending = false;
      }
      if (static_cast<int>(chain.token_ids.size()) >= max_len) break;
      int next = 0;
      logits.row(last).maxCoeff(&next);
      if (auto info = vocab_.visual_info(next)) {
        bump_budget(seen, *info);
        capture_pending = true;
        pending_info = info;
      }
      chain.token_ids.push_back(next);
      if (next == vocab_.eos_id() && !capture_pending) break;
    }
    // Trailing visual token at max_len or before eos: capture via one more pass.
    if (capture_pending) {
      auto [logits, hiddens] = forward_values(chain.token_ids, image);
      int last = static_cast<int>(chain.token_ids.size()) - 1;
      ThoughtSlot slot;
      slot.position = last;
      slot.group = pending_info->group;
      slot.index_in_group = pending_info->index;
      slot.hidden = hiddens.row(last).transpose();
      chain.visual_slots.push_back(std::move(slot));
    }
    return chain;
  }

  // Installs low-rank adapters on every weight matrix; freezes the base.
  void apply_low_rank_adapters(int rank, double alpha) {
    if (rank <= 0) throw InvalidValue("adapter rank");
    adapters_.clear();
    for (ad::Parameter* p : adapted_targets()) {
      int m = static_cast<int>(p->value.rows());
      int n = static_cast<int>(p->value.cols());
      if (rank > std::min(m, n))
        throw RankTooLarge(p->name + ": rank " + std::to_string(rank) + " > min(" +
                           std::to_string(m) + "," + std::to_string(n) + ")");
      Rng rng(fnv1a(p->name, 0x10ad0000u + static_cast<std::uint64_t>(rank)));
      ad::Mat a(m, rank);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < rank; ++j)
          a(i, j) = rnd_normal(rng) / static_cast<double>(rank);
      LowRankAdapter lr;
      lr.A = ad::Parameter(p->name + ".lora_A", std::move(a));
      lr.B = ad::Parameter(p->name + ".lora_B", ad::Mat::Zero(rank, n));
      adapters_.emplace(p->name, std::move(lr));
    }
    adapter_scale_ = alpha / static_cast<double>(rank);
    for (ad::Parameter* p : base_params()) p->trainable = false;
  }

  bool has_adapters() const { return !adapters_.empty(); }
  double adapter_scale() const { return adapter_scale_; }

  std::vector<ad::Parameter*> base_params() {
    std::vector<ad::Parameter*> out = {&tok_embed_, &pos_embed_, &patch_W_,
                                       &patch_b_, &lm_W_, &lnf_g_, &lnf_b_};
    for (auto& lay : layers_) {
      for (ad::Parameter* p : {&lay.ln1_g, &lay.ln1_b, &lay.Wq, &lay.bq, &lay.Wk,
                               &lay.bk, &lay.Wv, &lay.bv, &lay.Wo, &lay.bo,
                               &lay.ln2_g, &lay.ln2_b, &lay.W1, &lay.b1, &lay.W2,
                               &lay.b2})
        out.push_back(p);
    }
    return out;
  }

  std::vector<ad::Parameter*> adapter_params() {
    std::vector<ad::Parameter*> out;
    for (auto& [name, lr] : adapters_) {
      out.push_back(&lr.A);
      out.push_back(&lr.B);
    }
    return out;
  }

 private:
  struct Layer {
    ad::Parameter ln1_g, ln1_b, Wq, bq, Wk, bk, Wv, bv, Wo, bo;
    ad::Parameter ln2_g, ln2_b, W1, b1, W2, b2;
  };

  std::vector<ad::Parameter*> adapted_targets() {
    std::vector<ad::Parameter*> out = {&patch_W_, &lm_W_};
    for (auto& lay : layers_)
      for (ad::Parameter* p : {&lay.Wq, &lay.Wk, &lay.Wv, &lay.Wo, &lay.W1, &lay.W2})
        out.push_back(p);
    return out;
  }

  // Effective weight: base, or base + scale * A * B when adapted.
  ad::Var eff(ad::Tape& tape, const std::string& name, ad::Parameter& base) {
    auto it = adapters_.find(name);
    if (it == adapters_.end()) return tape.param(base);
    ad::Var delta = tape.matmul(tape.param(it->second.A), tape.param(it->second.B));
    return tape.add(tape.param(base), tape.affine(delta, adapter_scale_, 0.0));
  }

  static void bump_budget(std::map<std::pair<int, int>, int>& seen,
                          const VisualTokenInfo& info) {
    int& count = seen[{static_cast<int>(info.group), info.index}];
    if (++count > 1)
      throw BudgetExceeded("duplicate visual token " + std::string(group_name(info.group)) +
                           "_" + std::to_string(info.index));
  }

  CovtConfig cfg_;
  Vocab vocab_;
  int patch_px_ = 0, n_patches_ = 0;
  ad::Parameter tok_embed_, pos_embed_, patch_W_, patch_b_, lm_W_, lnf_g_, lnf_b_;
  std::vector<Layer> layers_;
  std::map<std::string, LowRankAdapter> adapters_;
  double adapter_scale_ = 0.0;
};

}  // namespace covt
