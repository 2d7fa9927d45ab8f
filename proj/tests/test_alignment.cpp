#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "covt/alignment.hpp"
#include "test_support.hpp"

using namespace covt;
using ad::Mat;

namespace {

CovtConfig small_cfg(int image_size = 16) {
  return validate_config(
      {{"hidden_dim", "8"}, {"image_size", std::to_string(image_size)}});
}

std::vector<MaskInfo> as_masks(const std::vector<Mat>& ms) {
  std::vector<MaskInfo> out;
  for (const auto& m : ms) {
    MaskInfo mi;
    mi.mask = m;
    mi.area = static_cast<int>(m.sum());
    mi.stability = 1.0;
    out.push_back(mi);
  }
  return out;
}

}  // namespace

TEST_CASE("dice loss spot values") {
  Mat ones = Mat::Ones(4, 4);
  CHECK(dice_loss(ones, ones) == doctest::Approx(0.0).epsilon(1e-6));

  Mat a = Mat::Zero(2, 2), b = Mat::Zero(2, 2);
  a(0, 0) = 1;
  b(1, 1) = 1;
  CHECK(dice_loss(a, b) == doctest::Approx(1.0).epsilon(1e-6));

  // all-ones pred vs top-row gt: 1 - 2*2/(4+2) = 1/3
  Mat pred = Mat::Ones(2, 2);
  Mat gt = Mat::Zero(2, 2);
  gt(0, 0) = gt(0, 1) = 1;
  CHECK(dice_loss(pred, gt) == doctest::Approx(1.0 / 3.0).epsilon(1e-6));

  CHECK_THROWS_AS(dice_loss(Mat::Ones(2, 2), Mat::Ones(3, 3)), ShapeMismatch);
}

TEST_CASE("dice symmetry under simultaneous pixel permutation") {
  Rng rng(23);
  Mat pred(1, 12), gt(1, 12);
  for (int i = 0; i < 12; ++i) {
    pred(0, i) = rnd_u01(rng);
    gt(0, i) = rnd_int(rng, 0, 1);
  }
  Mat pp(1, 12), gp(1, 12);
  std::vector<int> order(12);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (int i = 0; i < 12; ++i) {
    pp(0, i) = pred(0, order[i]);
    gp(0, i) = gt(0, order[i]);
  }
  CHECK(dice_loss(pred, gt) == doctest::Approx(dice_loss(pp, gp)).epsilon(1e-12));
}

TEST_CASE("focal loss spot values") {
  Mat pred = Mat::Constant(2, 2, 0.7);
  Mat zeros = Mat::Zero(2, 2);
  CHECK(focal_loss(pred, zeros, 2.0) == 0.0);

  Mat conf = Mat::Constant(2, 2, 1.0 - 1e-7);
  Mat ones = Mat::Ones(2, 2);
  CHECK(focal_loss(conf, ones, 2.0) == doctest::Approx(0.0).epsilon(1e-10));

  // single pixel p=0.5, t=1, gamma=2: 0.25 * ln 2
  Mat half = Mat::Constant(1, 1, 0.5);
  Mat one = Mat::Ones(1, 1);
  CHECK(focal_loss(half, one, 2.0) ==
        doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("total_loss combines parts per the joint formula") {
  auto cfg = small_cfg();
  LossParts parts{1.0, 1.0, 1.0, 1.0};
  CHECK(total_loss(1.0, parts, cfg) == 5.0);

  cfg.gamma = 0.0;
  CHECK(total_loss(0.7, parts, cfg) == 0.7);

  cfg.gamma = 1.0;
  cfg.lambda_seg = 1.0;
  cfg.lambda_depth = 2.0;
  cfg.lambda_edge = 0.0;
  cfg.lambda_dino = 1.0;
  LossParts p2{0.5, 0.25, 9.0, 0.1};
  CHECK(total_loss(0.3, p2, cfg) == doctest::Approx(1.4).epsilon(1e-12));

  // absent parts contribute zero
  LossParts p3;
  p3.depth = 0.25;
  CHECK(total_loss(0.3, p3, cfg) == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("total_loss linear in each part with slope gamma*lambda") {
  auto cfg = small_cfg();
  cfg.gamma = 0.7;
  cfg.lambda_depth = 1.3;
  LossParts base{0.2, 0.4, 0.1, 0.9};
  double l0 = total_loss(1.0, base, cfg);
  LossParts bumped = base;
  *bumped.depth += 1.0;
  double l1 = total_loss(1.0, bumped, cfg);
  CHECK(l1 - l0 == doctest::Approx(0.7 * 1.3).epsilon(1e-12));
}

TEST_CASE("seg head: rigged decoder recovers a shuffled ground truth") {
  auto cfg = small_cfg();
  cfg.hidden_dim = 8;
  const int hw = 16 * 16;
  Rng rng(31);

  // gt masks: three horizontal bands
  std::vector<Mat> bands;
  for (int k = 0; k < 3; ++k) {
    Mat m = Mat::Zero(16, 16);
    for (int r = 5 * k; r < 5 * k + 4; ++r)
      for (int c = 0; c < 16; ++c) m(r, c) = 1.0;
    bands.push_back(m);
  }
  auto gt = as_masks(bands);

  // Rig a dense embedding so each of the first three prompts reproduces one
  // band (shuffled), remaining prompts produce empty-ish masks. We exploit
  // the controllable structure: dense embedding row i = +-large on band b.
  // Instead of reaching inside the projection we run the real head and only
  // check the padding rule and matching invariance properties below; the
  // exact-recovery case uses a direct decode with hand-built prompts.
  Mat dense(3, hw);
  for (int j = 0; j < 3; ++j) {
    int b = (j + 1) % 3;  // shuffle
    int k = 0;
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c) dense(j, k++) = bands[b](r, c) > 0.5 ? 30.0 : -30.0;
  }
  // prompt i = one-hot selecting row i of the rigged embedding
  ad::Tape tape;
  std::vector<Mat> decoded;
  for (int i = 0; i < 3; ++i) {
    Mat prompt = Mat::Zero(1, 3);
    prompt(0, i) = 1.0;
    decoded.push_back(tape.val(decode_mask_op(tape, tape.constant(prompt), dense)));
  }
  // cost + Hungarian must recover the shuffle with near-zero loss
  Mat cost(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      Mat gtf(1, hw);
      int k = 0;
      for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c) gtf(0, k++) = bands[j](r, c);
      cost(i, j) = dice_loss(decoded[i], gtf) +
                   cfg.match_alpha * focal_loss(decoded[i], gtf, cfg.focal_gamma);
    }
  auto sigma = hungarian_match(cost);
  CHECK(sigma[0] == 1);
  CHECK(sigma[1] == 2);
  CHECK(sigma[2] == 0);
  double matched = 0;
  for (int i = 0; i < 3; ++i) matched += cost(i, sigma[i]);
  CHECK(matched < 1e-4);
}

TEST_CASE("seg head: padding rule matches fewer gt masks than tokens") {
  auto cfg = small_cfg();
  Rng rng(41);
  ProjectionHead proj(TargetSpace::SegPrompt, cfg.hidden_dim, kExpertChannels, 1, rng);
  Mat dense = testutil::random_mat(rng, kExpertChannels, 16 * 16);
  std::vector<Mat> gt_masks;
  for (int k = 0; k < 3; ++k) {
    Mat m = Mat::Zero(16, 16);
    for (int r = 0; r < 16; ++r)
      for (int c = 5 * k; c < 5 * k + 4; ++c) m(r, c) = 1.0;
    gt_masks.push_back(m);
  }
  ad::Tape tape;
  Mat hiddens = testutil::random_mat(rng, 8, cfg.hidden_dim);
  auto out = seg_head_loss(tape, tape.constant(hiddens), dense, as_masks(gt_masks),
                           proj, cfg);
  REQUIRE(out.match.has_value());
  int matched = 0;
  for (int j : *out.match)
    if (j < 3) ++matched;
  CHECK(matched == 3);
  CHECK(out.reconstruction.size() == 8);
  CHECK(std::isfinite(out.loss));
  CHECK(out.loss >= 0.0);
}

TEST_CASE("seg head equals the exhaustive-injection oracle on a 2-rectangle scene") {
  auto cfg = small_cfg();
  Rng rng(43);
  ProjectionHead proj(TargetSpace::SegPrompt, cfg.hidden_dim, kExpertChannels, 1, rng);
  Mat dense = testutil::random_mat(rng, kExpertChannels, 16 * 16);
  std::vector<Mat> gt_masks;
  for (int k = 0; k < 2; ++k) {
    Mat m = Mat::Zero(16, 16);
    for (int r = 2 + 8 * k; r < 7 + 8 * k; ++r)
      for (int c = 3; c < 12; ++c) m(r, c) = 1.0;
    gt_masks.push_back(m);
  }
  const int n_tok = 3;
  Mat hiddens = testutil::random_mat(rng, n_tok, cfg.hidden_dim);
  ad::Tape tape;
  auto out = seg_head_loss(tape, tape.constant(hiddens), dense, as_masks(gt_masks),
                           proj, cfg);

  // oracle: best injection of gt masks into predictions, brute force
  std::vector<Mat> preds;
  for (int i = 0; i < n_tok; ++i) {
    Mat prompt = proj.project_values(hiddens.row(i));
    ad::Tape t2(false);
    preds.push_back(
        t2.val(t2.sigmoid(t2.matmul(t2.constant(prompt), t2.constant(dense)))));
  }
  auto flat = [](const Mat& m) {
    Mat f(1, m.size());
    int k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f(0, k++) = m(r, c);
    return f;
  };
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> toks = {0, 1, 2};
  std::sort(toks.begin(), toks.end());
  do {
    // assign gt j to token toks[j]
    double c = 0;
    for (int j = 0; j < 2; ++j) {
      Mat g = flat(gt_masks[j]);
      c += dice_loss(preds[toks[j]], g) +
           cfg.match_alpha * focal_loss(preds[toks[j]], g, cfg.focal_gamma);
    }
    best = std::min(best, c);
  } while (std::next_permutation(toks.begin(), toks.end()));
  CHECK(out.loss == doctest::Approx(best).epsilon(1e-9));
}

TEST_CASE("seg head: permuting gt order changes sigma but not the loss") {
  auto cfg = small_cfg();
  Rng rng(47);
  ProjectionHead proj(TargetSpace::SegPrompt, cfg.hidden_dim, kExpertChannels, 1, rng);
  Mat dense = testutil::random_mat(rng, kExpertChannels, 16 * 16);
  std::vector<Mat> gt_masks;
  for (int k = 0; k < 3; ++k) {
    Mat m = Mat::Zero(16, 16);
    for (int r = 5 * k; r < 5 * k + 4; ++r)
      for (int c = 1; c < 15; ++c) m(r, c) = 1.0;
    gt_masks.push_back(m);
  }
  Mat hiddens = testutil::random_mat(rng, 8, cfg.hidden_dim);

  ad::Tape t1;
  auto o1 = seg_head_loss(t1, t1.constant(hiddens), dense, as_masks(gt_masks), proj, cfg);
  std::vector<Mat> swapped = {gt_masks[2], gt_masks[0], gt_masks[1]};
  ad::Tape t2;
  auto o2 = seg_head_loss(t2, t2.constant(hiddens), dense, as_masks(swapped), proj, cfg);
  CHECK(o1.loss == doctest::Approx(o2.loss).epsilon(1e-9));
}

TEST_CASE("seg head rejects empty targets") {
  auto cfg = small_cfg();
  Rng rng(53);
  ProjectionHead proj(TargetSpace::SegPrompt, cfg.hidden_dim, kExpertChannels, 1, rng);
  ad::Tape tape;
  Mat hiddens = testutil::random_mat(rng, 8, cfg.hidden_dim);
  CHECK_THROWS_AS(seg_head_loss(tape, tape.constant(hiddens),
                                testutil::random_mat(rng, kExpertChannels, 256), {},
                                proj, cfg),
                  EmptyTargets);
}

TEST_CASE("depth head: constant features give the uniform map; maps live on the simplex") {
  auto cfg = small_cfg(16);
  Rng rng(59);
  ProjectionHead proj(TargetSpace::DepthPrompt, cfg.hidden_dim, kExpertChannels, 1, rng);
  const int hw = 16 * 16;

  SUBCASE("constant feature map") {
    std::vector<Mat> taps(4, Mat::Ones(hw, kExpertChannels));
    Mat gt = Mat::Constant(16, 16, 0.5);
    ad::Tape tape;
    auto out = depth_head_loss(tape, tape.constant(testutil::random_mat(rng, 4, 8)),
                               taps, gt, proj, cfg);
    for (int i = 0; i < 4; ++i) {
      CHECK(out.reconstruction[i].minCoeff() ==
            doctest::Approx(1.0 / hw).epsilon(1e-12));
      CHECK(out.reconstruction[i].maxCoeff() ==
            doctest::Approx(1.0 / hw).epsilon(1e-12));
    }
    CHECK(out.loss == doctest::Approx(0.0).epsilon(1e-9));
  }

  SUBCASE("random inputs: every map sums to one") {
    for (int t = 0; t < 20; ++t) {
      std::vector<Mat> taps;
      for (int i = 0; i < 4; ++i)
        taps.push_back(testutil::random_mat(rng, hw, kExpertChannels));
      Mat gt = Mat::Constant(16, 16, 0.3) +
               testutil::random_mat(rng, 16, 16, 0.05).cwiseAbs();
      ad::Tape tape;
      auto out = depth_head_loss(tape, tape.constant(testutil::random_mat(rng, 4, 8)),
                                 taps, gt, proj, cfg);
      for (int i = 0; i < 4; ++i) {
        CHECK(out.reconstruction[i].sum() == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(out.reconstruction[i].minCoeff() >= 0.0);
      }
    }
  }

  SUBCASE("2x2 toy case against a scalar softmax oracle") {
    auto cfg2 = small_cfg(16);
    std::vector<Mat> taps;
    for (int i = 0; i < 4; ++i) taps.push_back(testutil::random_mat(rng, 4, kExpertChannels));
    Mat gt = Mat::Constant(2, 2, 0.4);
    gt(0, 0) = 1.2;
    Mat hiddens = testutil::random_mat(rng, 4, 8);
    ad::Tape tape;
    auto out = depth_head_loss(tape, tape.constant(hiddens), taps, gt, proj, cfg2);

    // oracle: scalar softmax per token, average, L1 against sum-normalized gt
    double gts = gt.sum();
    std::vector<double> gtn = {gt(0, 0) / gts, gt(0, 1) / gts, gt(1, 0) / gts,
                               gt(1, 1) / gts};
    std::vector<double> mean_map(4, 0.0);
    for (int i = 0; i < 4; ++i) {
      Mat prompt = proj.project_values(hiddens.row(i));
      std::vector<double> scores(4);
      for (int p = 0; p < 4; ++p) {
        double s = 0;
        for (int ch = 0; ch < kExpertChannels; ++ch) s += prompt(0, ch) * taps[i](p, ch);
        scores[p] = s;
      }
      double mx = *std::max_element(scores.begin(), scores.end());
      double z = 0;
      for (double& s : scores) {
        s = std::exp(s - mx);
        z += s;
      }
      for (int p = 0; p < 4; ++p) mean_map[p] += scores[p] / z / 4.0;
    }
    double l1 = 0;
    for (int p = 0; p < 4; ++p) l1 += std::abs(mean_map[p] - gtn[p]);
    CHECK(out.loss == doctest::Approx(l1).epsilon(1e-9));
  }
}

TEST_CASE("edge head: zero kernels, selection kernels, and a dot-product oracle") {
  auto cfg = small_cfg(16);
  Rng rng(61);
  const int hw = 16;

  SUBCASE("zero kernel gives sigmoid(0)=0.5 everywhere") {
    // hand-built kernel path, bypassing the projection
    std::vector<Mat> taps(4, testutil::random_mat(rng, kExpertChannels, hw));
    ad::Tape tape;
    ad::Var zed = tape.matmul(tape.constant(Mat::Zero(1, kExpertChannels)),
                              tape.constant(taps[0]));
    Mat half = tape.val(tape.sigmoid(zed));
    CHECK(half.minCoeff() == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(half.maxCoeff() == doctest::Approx(0.5).epsilon(1e-12));
  }

  SUBCASE("one-hot kernel selects a channel exactly") {
    Mat tap = testutil::random_mat(rng, kExpertChannels, hw);
    Mat kernel = Mat::Zero(1, kExpertChannels);
    kernel(0, 5) = 1.0;
    ad::Tape tape;
    Mat resp = tape.val(tape.matmul(tape.constant(kernel), tape.constant(tap)));
    CHECK(testutil::rel_err(resp, tap.row(5)) < 1e-12);
  }

  SUBCASE("3-channel 4x4 case against a per-pixel dot-product oracle") {
    auto cfg2 = small_cfg(16);
    ProjectionHead proj(TargetSpace::EdgeKernel, cfg2.hidden_dim, kExpertChannels, 1, rng);
    std::vector<Mat> taps;
    for (int i = 0; i < 4; ++i)
      taps.push_back(testutil::random_mat(rng, kExpertChannels, 16));
    Mat gt(4, 4);
    for (int i = 0; i < 16; ++i) gt(i / 4, i % 4) = rnd_u01(rng);
    Mat hiddens = testutil::random_mat(rng, 4, cfg2.hidden_dim);
    ad::Tape tape;
    auto out = edge_head_loss(tape, tape.constant(hiddens), taps, gt, proj, cfg2);

    double l1 = 0;
    for (int px = 0; px < 16; ++px) {
      double acc = 0;
      for (int i = 0; i < 4; ++i) {
        Mat kernel = proj.project_values(hiddens.row(i));
        double dot = 0;
        for (int ch = 0; ch < kExpertChannels; ++ch) dot += kernel(0, ch) * taps[i](ch, px);
        acc += dot;
      }
      double e = 1.0 / (1.0 + std::exp(-acc / 4.0));
      l1 += std::abs(e - gt(px / 4, px % 4));
    }
    l1 /= 16.0;
    CHECK(out.loss == doctest::Approx(l1).epsilon(1e-9));
  }
}

TEST_CASE("dino head: rigged identity, unit constant error, scalar oracle") {
  auto cfg = small_cfg();
  Rng rng(67);
  const int P = 2, d = 3;
  ProjectionHead proj(TargetSpace::DinoFeature, cfg.hidden_dim, d, P, rng);
  Mat hiddens = testutil::random_mat(rng, 4, cfg.hidden_dim);

  SUBCASE("projection output equal to gt gives zero") {
    Mat gt = proj.project_values(hiddens.row(0));
    ad::Tape tape;
    auto out = dino_head_loss(tape, tape.constant(hiddens.row(0)), gt, proj, cfg);
    CHECK(out.loss == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("gt zero vs output ones gives one") {
    // direct MSE semantics on a rigged constant grid
    ad::Tape tape;
    ad::Var grid = tape.constant(Mat::Ones(P, d));
    ad::Var l = tape.sq_mean_diff(grid, tape.constant(Mat::Zero(P, d)));
    CHECK(tape.val(l)(0, 0) == doctest::Approx(1.0));
  }

  SUBCASE("random grid against a scalar mean-square oracle") {
    Mat gt = testutil::random_mat(rng, P, d);
    ad::Tape tape;
    auto out = dino_head_loss(tape, tape.constant(hiddens), gt, proj, cfg);
    double acc = 0;
    for (int i = 0; i < 4; ++i) {
      Mat g = proj.project_values(hiddens.row(i));
      double mse = 0;
      for (int r = 0; r < P; ++r)
        for (int c = 0; c < d; ++c) {
          double diff = g(r, c) - gt(r, c);
          mse += diff * diff;
        }
      acc += mse / (P * d);
    }
    CHECK(out.loss == doctest::Approx(acc / 4.0).epsilon(1e-9));
  }
}

TEST_CASE("all four heads: analytic gradients through projection match finite differences") {
  auto cfg = small_cfg(16);
  Rng rng(71);
  const int hw16 = 16 * 16;

  auto fd_check = [&](auto&& build, const Mat& hiddens, double tol = 1e-4) {
    ad::Tape tape;
    ad::Var h = tape.input(hiddens);
    ad::Var loss = build(tape, h);
    tape.backward(loss);
    Mat analytic = tape.grad(h);
    Mat fd = testutil::finite_diff(
        [&](const Mat& hp) {
          ad::Tape t2(false);
          return t2.val(build(t2, t2.constant(hp)))(0, 0);
        },
        hiddens);
    CHECK(testutil::rel_err(analytic, fd) < tol);
  };

  SUBCASE("seg") {
    ProjectionHead proj(TargetSpace::SegPrompt, cfg.hidden_dim, kExpertChannels, 1, rng);
    Mat dense = testutil::random_mat(rng, kExpertChannels, hw16);
    std::vector<Mat> gt_masks;
    for (int k = 0; k < 2; ++k) {
      Mat m = Mat::Zero(16, 16);
      for (int r = 6 * k; r < 6 * k + 5; ++r)
        for (int c = 0; c < 16; ++c) m(r, c) = 1.0;
      gt_masks.push_back(m);
    }
    auto masks = as_masks(gt_masks);
    Mat hiddens = testutil::random_mat(rng, 3, cfg.hidden_dim);
    fd_check(
        [&](ad::Tape& t, ad::Var h) {
          return seg_head_loss(t, h, dense, masks, proj, cfg).loss_var;
        },
        hiddens);
  }
  SUBCASE("depth") {
    ProjectionHead proj(TargetSpace::DepthPrompt, cfg.hidden_dim, kExpertChannels, 1, rng);
    std::vector<Mat> taps;
    for (int i = 0; i < 4; ++i) taps.push_back(testutil::random_mat(rng, hw16, kExpertChannels));
    Mat gt = Mat::Constant(16, 16, 0.3).cwiseAbs();
    Mat hiddens = testutil::random_mat(rng, 4, cfg.hidden_dim);
    fd_check(
        [&](ad::Tape& t, ad::Var h) {
          return depth_head_loss(t, h, taps, gt, proj, cfg).loss_var;
        },
        hiddens, 2e-4);
  }
  SUBCASE("edge") {
    ProjectionHead proj(TargetSpace::EdgeKernel, cfg.hidden_dim, kExpertChannels, 1, rng);
    std::vector<Mat> taps;
    for (int i = 0; i < 4; ++i) taps.push_back(testutil::random_mat(rng, kExpertChannels, hw16));
    Mat gt = Mat::Zero(16, 16);
    gt(3, 4) = 1.0;
    Mat hiddens = testutil::random_mat(rng, 4, cfg.hidden_dim);
    fd_check(
        [&](ad::Tape& t, ad::Var h) {
          return edge_head_loss(t, h, taps, gt, proj, cfg).loss_var;
        },
        hiddens, 2e-4);
  }
  SUBCASE("dino") {
    const int P = 4, d = 5;
    ProjectionHead proj(TargetSpace::DinoFeature, cfg.hidden_dim, d, P, rng);
    Mat gt = testutil::random_mat(rng, P, d);
    Mat hiddens = testutil::random_mat(rng, 4, cfg.hidden_dim);
    fd_check(
        [&](ad::Tape& t, ad::Var h) {
          return dino_head_loss(t, h, gt, proj, cfg).loss_var;
        },
        hiddens);
  }
}
