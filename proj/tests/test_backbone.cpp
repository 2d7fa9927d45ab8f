#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "covt/backbone.hpp"
#include "test_support.hpp"

using namespace covt;
using ad::Mat;

namespace {

CovtConfig tiny_config() {
  CovtConfig cfg;
  cfg.hidden_dim = 16;
  cfg.image_size = 16;  // 2x2 = 4 image patches
  cfg.layer_count = 2;
  cfg.head_count = 4;
  return cfg;
}

Mat test_image(int size, unsigned seed) {
  Rng rng(seed);
  Mat img(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) img(r, c) = rnd_u01(rng);
  return img;
}

ad::Parameter* find_param(ToyBackbone& bb, const std::string& name) {
  for (ad::Parameter* p : bb.base_params())
    if (p->name == name) return p;
  return nullptr;
}

}  // namespace

TEST_CASE("vocabulary layout and round trips") {
  Vocab v(TokenSchema::defaults());
  CHECK(v.size() == 512 + 3 + 20);
  CHECK(v.pad_id() == 0);
  CHECK(v.unk_id() == 1);
  CHECK(v.eos_id() == 2);
  CHECK(v.token(v.image_id()) == "<image>");

  // Visual literals form one contiguous block after the specials.
  int first = v.visual_id(Group::Seg, 0);
  CHECK(first == v.think_close_id() + 1);
  int expect = first;
  for (Group g : {Group::Seg, Group::Depth, Group::Edge, Group::Dino})
    for (int i = 0; i < v.schema().count(g); ++i) {
      CHECK(v.visual_id(g, i) == expect);
      auto info = v.visual_info(expect);
      REQUIRE(info.has_value());
      CHECK(info->group == g);
      CHECK(info->index == i);
      ++expect;
    }
  CHECK(!v.visual_info(v.eos_id()).has_value());
  CHECK(!v.visual_info(first - 1).has_value());

  auto ids = v.encode("<image> how many shapes ? <think> <seg_0><seg_1> </think> 2 .");
  CHECK(ids[0] == v.image_id());
  CHECK(ids[5] == v.think_open_id());
  CHECK(ids[6] == v.visual_id(Group::Seg, 0));
  CHECK(ids[7] == v.visual_id(Group::Seg, 1));
  CHECK(ids[8] == v.think_close_id());
  CHECK(v.id("zzzunknown") == v.unk_id());
  std::string text = v.decode(ids);
  CHECK(v.encode(text) == ids);
}

TEST_CASE("forward shapes, determinism, and input validation") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 7);
  Mat img = test_image(cfg.image_size, 1);
  std::vector<int> ids = bb.vocab().encode("how many shapes are in the image ?");

  auto [l1, h1] = bb.forward_values(ids, img);
  CHECK(l1.rows() == static_cast<int>(ids.size()));
  CHECK(l1.cols() == bb.vocab().size());
  CHECK(h1.rows() == static_cast<int>(ids.size()));
  CHECK(h1.cols() == cfg.hidden_dim);

  auto [l2, h2] = bb.forward_values(ids, img);
  CHECK(l1 == l2);  // bitwise deterministic
  CHECK(h1 == h2);

  CHECK_THROWS_AS(bb.forward_values({}, img), ShapeMismatch);
  CHECK_THROWS_AS(bb.forward_values(ids, Mat::Zero(8, 8)), ShapeMismatch);
}

TEST_CASE("causality: a later token never changes earlier positions") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 11);
  Mat img = test_image(cfg.image_size, 2);
  std::vector<int> ids = {5, 9, 30, 41, 12, 7};
  auto [l1, h1] = bb.forward_values(ids, img);
  for (int pos = 1; pos < 6; ++pos) {
    std::vector<int> mod = ids;
    mod[pos] = 99;
    auto [l2, h2] = bb.forward_values(mod, img);
    for (int r = 0; r < pos; ++r) {
      CHECK(l1.row(r) == l2.row(r));
      CHECK(h1.row(r) == h2.row(r));
    }
    CHECK(l1.row(pos) != l2.row(pos));
  }
}

TEST_CASE("the image prefix conditions the text logits") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 13);
  std::vector<int> ids = {5, 9, 30};
  auto [la, ha] = bb.forward_values(ids, test_image(cfg.image_size, 3));
  auto [lb, hb] = bb.forward_values(ids, test_image(cfg.image_size, 4));
  CHECK((la - lb).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("sequence log-likelihood matches a log-sum-exp oracle") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 17);
  Mat img = test_image(cfg.image_size, 5);
  std::vector<int> ids = {10, 33, 34, 42, 2};

  ad::Tape tape;
  ForwardResult fr = bb.forward(tape, ids, img);
  std::vector<int> rows, targets;
  for (size_t p = 1; p < ids.size(); ++p) {
    rows.push_back(static_cast<int>(p) - 1);
    targets.push_back(ids[p]);
  }
  double ce = tape.val(tape.cross_entropy_mean(fr.logits, rows, targets))(0, 0);

  // Oracle: direct softmax log-probabilities from the raw logit values.
  const Mat& L = tape.val(fr.logits);
  long double logp = 0.0L;
  for (size_t p = 1; p < ids.size(); ++p) {
    int r = static_cast<int>(p) - 1;
    long double mx = L.row(r).maxCoeff();
    long double z = 0.0L;
    for (int c = 0; c < L.cols(); ++c) z += std::exp(static_cast<long double>(L(r, c)) - mx);
    logp += static_cast<long double>(L(r, ids[p])) - mx - std::log(z);
  }
  double oracle_ce = static_cast<double>(-logp / static_cast<long double>(rows.size()));
  CHECK(ce == doctest::Approx(oracle_ce).epsilon(1e-12));
}

TEST_CASE("parameter gradients match finite differences") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 19);
  Mat img = test_image(cfg.image_size, 6);
  std::vector<int> ids = {10, 33, 34, 2};
  std::vector<int> rows = {0, 1, 2}, targets = {33, 34, 2};

  auto loss_of = [&]() {
    ad::Tape t(false);
    ForwardResult fr = bb.forward(t, ids, img);
    return t.val(t.cross_entropy_mean(fr.logits, rows, targets))(0, 0);
  };

  for (ad::Parameter* p : bb.base_params()) p->zero_grad();
  ad::Tape tape;
  ForwardResult fr = bb.forward(tape, ids, img);
  tape.backward(tape.cross_entropy_mean(fr.logits, rows, targets));

  for (const char* name : {"layer0.Wq", "layer1.W2", "base.patch_W", "base.lnf_g"}) {
    ad::Parameter* p = find_param(bb, name);
    REQUIRE(p != nullptr);
    Mat fd = testutil::finite_diff(
        [&](const Mat& pv) {
          Mat orig = p->value;
          p->value = pv;
          double l = loss_of();
          p->value = orig;
          return l;
        },
        p->value);
    CHECK_MESSAGE(testutil::rel_err(p->grad, fd) < 1e-4, name);
  }
}

TEST_CASE("low-rank adapters are exactly the identity at initialization") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 23);
  Mat img = test_image(cfg.image_size, 7);
  std::vector<int> ids = {10, 33, 34, 2};
  auto [l1, h1] = bb.forward_values(ids, img);
  bb.apply_low_rank_adapters(4, 8.0);
  CHECK(bb.has_adapters());
  CHECK(bb.adapter_scale() == 2.0);
  auto [l2, h2] = bb.forward_values(ids, img);
  CHECK(l1 == l2);
  CHECK(h1 == h2);
}

TEST_CASE("adapters train while the base stays frozen") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 29);
  bb.apply_low_rank_adapters(4, 8.0);
  Mat img = test_image(cfg.image_size, 8);
  std::vector<int> ids = {10, 33, 34, 2};

  for (ad::Parameter* p : bb.base_params()) p->zero_grad();
  for (ad::Parameter* p : bb.adapter_params()) p->zero_grad();
  ad::Tape tape;
  ForwardResult fr = bb.forward(tape, ids, img);
  tape.backward(tape.cross_entropy_mean(fr.logits, {0, 1, 2}, {33, 34, 2}));

  for (ad::Parameter* p : bb.base_params()) {
    CHECK(!p->trainable);
    CHECK_MESSAGE(p->grad.cwiseAbs().maxCoeff() == 0.0, p->name);
  }
  double b_norm = 0.0;
  for (ad::Parameter* p : bb.adapter_params()) {
    CHECK(p->trainable);
    if (p->name.size() > 7 && p->name.substr(p->name.size() - 7) == ".lora_B")
      b_norm += p->grad.cwiseAbs().sum();
  }
  CHECK(b_norm > 0.0);  // B receives signal immediately
}

TEST_CASE("adapter gradients match finite differences") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 31);
  bb.apply_low_rank_adapters(3, 6.0);
  // Move B off zero so A also gets gradient.
  Rng rng(99);
  for (ad::Parameter* p : bb.adapter_params())
    if (p->name.find(".lora_B") != std::string::npos)
      for (int i = 0; i < p->value.size(); ++i) p->value(i) = 0.1 * rnd_normal(rng);

  Mat img = test_image(cfg.image_size, 9);
  std::vector<int> ids = {10, 33, 34, 2};
  auto loss_of = [&]() {
    ad::Tape t(false);
    ForwardResult fr = bb.forward(t, ids, img);
    return t.val(t.cross_entropy_mean(fr.logits, {0, 1, 2}, {33, 34, 2}))(0, 0);
  };

  for (ad::Parameter* p : bb.adapter_params()) p->zero_grad();
  ad::Tape tape;
  ForwardResult fr = bb.forward(tape, ids, img);
  tape.backward(tape.cross_entropy_mean(fr.logits, {0, 1, 2}, {33, 34, 2}));

  int checked = 0;
  for (ad::Parameter* p : bb.adapter_params()) {
    if (p->name.find("layer0.Wq") == std::string::npos &&
        p->name.find("base.lm_W") == std::string::npos)
      continue;
    Mat fd = testutil::finite_diff(
        [&](const Mat& pv) {
          Mat orig = p->value;
          p->value = pv;
          double l = loss_of();
          p->value = orig;
          return l;
        },
        p->value);
    CHECK_MESSAGE(testutil::rel_err(p->grad, fd) < 1e-4, p->name);
    ++checked;
  }
  CHECK(checked == 4);
}

TEST_CASE("rank larger than a weight dimension is rejected") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 37);
  CHECK_THROWS_AS(bb.apply_low_rank_adapters(17, 32.0), RankTooLarge);
  CHECK_THROWS_AS(bb.apply_low_rank_adapters(0, 32.0), InvalidValue);
}

TEST_CASE("generation captures visual hiddens at the emitting position") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 41);
  Mat img = test_image(cfg.image_size, 10);
  const Vocab& v = bb.vocab();
  std::vector<int> prompt = v.encode("<image> how many shapes ?");

  // Rig the output head so greedy decoding must emit <seg_0> next: zero all
  // logits, then point the target row along the prompt's final hidden state.
  ad::Parameter* lm = find_param(bb, "base.lm_W");
  REQUIRE(lm != nullptr);
  {
    auto [pl, ph] = bb.forward_values(prompt, img);
    Eigen::RowVectorXd h_last = ph.row(ph.rows() - 1);
    lm->value.setZero();
    lm->value.row(v.visual_id(Group::Seg, 0)) = 100.0 * h_last / h_last.squaredNorm();
  }

  ThoughtChain chain = bb.generate_with_visual_thoughts(
      prompt, img, static_cast<int>(prompt.size()) + 1);
  REQUIRE(chain.token_ids.size() == prompt.size() + 1);
  CHECK(chain.token_ids.back() == v.visual_id(Group::Seg, 0));
  REQUIRE(chain.visual_slots.size() == 1);
  const ThoughtSlot& slot = chain.visual_slots[0];
  CHECK(slot.position == static_cast<int>(prompt.size()));
  CHECK(slot.group == Group::Seg);
  CHECK(slot.index_in_group == 0);

  // Re-running the forward pass on the finished chain reproduces the
  // captured hidden vector exactly.
  auto [logits, hiddens] = bb.forward_values(chain.token_ids, img);
  CHECK((hiddens.row(slot.position).transpose() - slot.hidden).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("re-emitting a visual token during generation exceeds the budget") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 43);
  Mat img = test_image(cfg.image_size, 11);
  const Vocab& v = bb.vocab();
  // The prompt already used <depth_2>; rig decoding to emit it again.
  std::vector<int> prompt = v.encode("<image> how many <depth_2> shapes ?");
  ad::Parameter* lm = find_param(bb, "base.lm_W");
  auto [pl, ph] = bb.forward_values(prompt, img);
  Eigen::RowVectorXd h_last = ph.row(ph.rows() - 1);
  lm->value.setZero();
  lm->value.row(v.visual_id(Group::Depth, 2)) = 100.0 * h_last / h_last.squaredNorm();
  CHECK_THROWS_AS(bb.generate_with_visual_thoughts(
                      prompt, img, static_cast<int>(prompt.size()) + 3),
                  BudgetExceeded);
}

TEST_CASE("a duplicate visual token in the prompt itself is rejected") {
  CovtConfig cfg = tiny_config();
  ToyBackbone bb(cfg, 47);
  Mat img = test_image(cfg.image_size, 12);
  const Vocab& v = bb.vocab();
  std::vector<int> prompt = v.encode("<image> <seg_3> <seg_3>");
  CHECK_THROWS_AS(bb.generate_with_visual_thoughts(prompt, img, 20), BudgetExceeded);
  CHECK_THROWS_AS(bb.generate_with_visual_thoughts(prompt, img, 1), ShapeMismatch);
}
