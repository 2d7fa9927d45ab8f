#pragma once

// Expert-target provisioning: deterministic toy experts (segmentation masks,
// depth, edge, patch features), the mask quality filter, adapter contracts
// for real experts, and the on-disk expert cache.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <atomic>
#include <utility>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "covt/config.hpp"
#include "covt/errors.hpp"
#include "covt/pgm.hpp"
#include "covt/rng.hpp"

namespace covt {

using Mat = Eigen::MatrixXd;

// Counts prompt-conditioned mask-decoder invocations. Inference must keep
// this at zero; training and explicit decoding increment it.
inline std::atomic<long>& decoder_invocation_counter() {
  static std::atomic<long> counter{0};
  return counter;
}
inline void note_decoder_invocation() { ++decoder_invocation_counter(); }
inline long decoder_invocations() { return decoder_invocation_counter().load(); }
inline void reset_decoder_invocations() { decoder_invocation_counter() = 0; }

constexpr int kExpertChannels = 16;  // c, prompt-space feature width
constexpr int kPatchPixels = 8;      // toy patch edge length
constexpr int kTapCount = 4;
constexpr int kPatchFeatureDim = 16;  // d

struct ShapeSpec {
  enum Kind { Rect, Disk } kind;
  double cx, cy;       // center, pixel coordinates
  double size;         // half-extent (rect) or radius (disk)
  double depth;        // smaller is closer
  double intensity;    // fill value in [0,1]
};

struct SyntheticScene {
  std::vector<ShapeSpec> shapes;
  double background_depth = 1.0;
  double background_intensity = 0.1;
};

struct MaskInfo {
  Mat mask;  // H x W, entries 0/1
  int area = 0;
  double stability = 1.0;
};

struct ExpertTargets {
  std::vector<MaskInfo> masks;
  Mat depth;            // H x W, nonnegative
  Mat edge;             // H x W in [0,1]
  Mat patch_features;   // P x d
  std::vector<Mat> depth_taps;  // kTapCount maps, HW x c
  std::vector<Mat> edge_taps;   // kTapCount maps, c x HW
  Mat seg_embedding;    // c x HW dense embedding
};

namespace detail {

// Per-pixel feature bank: coordinate ramps, intensity powers, and seeded
// 3x3 filter responses. Channels 0-9 are shared; 10-15 depend on
// (family, tap) so each tap index carries a distinct view of the image.
inline Mat pixel_features(const Mat& image, std::uint64_t family, int tap) {
  const int h = static_cast<int>(image.rows());
  const int w = static_cast<int>(image.cols());
  Mat feat(h * w, kExpertChannels);

  Rng rng(fnv1a("tap", (family << 8) ^ static_cast<std::uint64_t>(tap)));
  // three seeded 3x3 kernels
  double k[3][9];
  for (auto& kk : k)
    for (double& x : kk) x = rnd_normal(rng);

  auto conv3 = [&](int r, int c, const double* kk) {
    double acc = 0.0;
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        int rr = std::clamp(r + dr, 0, h - 1);
        int cc = std::clamp(c + dc, 0, w - 1);
        acc += kk[(dr + 1) * 3 + (dc + 1)] * image(rr, cc);
      }
    return acc;
  };

  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double x = static_cast<double>(c) / w - 0.5;
      double y = static_cast<double>(r) / h - 0.5;
      double I = image(r, c);
      double blur = 0.0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc)
          blur += image(std::clamp(r + dr, 0, h - 1), std::clamp(c + dc, 0, w - 1));
      blur /= 9.0;
      double c0 = conv3(r, c, k[0]);
      double c1 = conv3(r, c, k[1]);
      double c2 = conv3(r, c, k[2]);
      int row = r * w + c;
      feat(row, 0) = 1.0;
      feat(row, 1) = x;
      feat(row, 2) = y;
      feat(row, 3) = x * x;
      feat(row, 4) = y * y;
      feat(row, 5) = x * y;
      feat(row, 6) = I;
      feat(row, 7) = I * I;
      feat(row, 8) = I * x;
      feat(row, 9) = I * y;
      feat(row, 10) = c0;
      feat(row, 11) = c1;
      feat(row, 12) = c2;
      feat(row, 13) = c0 * c0;
      feat(row, 14) = blur;
      feat(row, 15) = blur * blur;
    }
  }
  return feat;
}

inline bool covers(const ShapeSpec& s, int r, int c) {
  double dx = c - s.cx;
  double dy = r - s.cy;
  if (s.kind == ShapeSpec::Rect)
    return std::abs(dx) <= s.size && std::abs(dy) <= 0.75 * s.size;
  return dx * dx + dy * dy <= s.size * s.size;
}

}  // namespace detail

inline void validate_scene(const SyntheticScene& scene, const CovtConfig& cfg) {
  if (scene.shapes.size() > 8)
    throw InvalidScene("more than 8 shapes (" + std::to_string(scene.shapes.size()) + ")");
  for (const auto& s : scene.shapes) {
    if (s.cx < 0 || s.cx >= cfg.image_size || s.cy < 0 || s.cy >= cfg.image_size)
      throw InvalidScene("shape center outside the image");
    if (s.size <= 0) throw InvalidScene("nonpositive shape size");
    if (s.depth < 0) throw InvalidScene("negative shape depth");
  }
  if (scene.background_depth < 0) throw InvalidScene("negative background depth");
}

// Recomputes the derived feature maps from an image. Used both at render
// time and when loading from the cache (taps are never stored).
inline void attach_derived_features(const Mat& image, ExpertTargets& t) {
  t.seg_embedding = detail::pixel_features(image, /*family=*/0, /*tap=*/0).transpose();
  t.depth_taps.clear();
  t.edge_taps.clear();
  for (int i = 0; i < kTapCount; ++i) {
    t.depth_taps.push_back(detail::pixel_features(image, 1, i));
    t.edge_taps.push_back(detail::pixel_features(image, 2, i).transpose());
  }
}

inline std::pair<Mat, ExpertTargets> render_scene(const SyntheticScene& scene,
                                                  const CovtConfig& cfg) {
  validate_scene(scene, cfg);
  const int s = cfg.image_size;
  Mat image = Mat::Constant(s, s, scene.background_intensity);
  Mat depth = Mat::Constant(s, s, scene.background_depth);
  Eigen::MatrixXi winner = Eigen::MatrixXi::Constant(s, s, -1);

  for (int r = 0; r < s; ++r) {
    for (int c = 0; c < s; ++c) {
      for (int i = 0; i < static_cast<int>(scene.shapes.size()); ++i) {
        const auto& sh = scene.shapes[i];
        if (!detail::covers(sh, r, c)) continue;
        if (winner(r, c) < 0 || sh.depth < scene.shapes[winner(r, c)].depth) {
          winner(r, c) = i;
          depth(r, c) = sh.depth;
          image(r, c) = sh.intensity;
        }
      }
    }
  }

  ExpertTargets t;
  for (int i = 0; i < static_cast<int>(scene.shapes.size()); ++i) {
    MaskInfo m;
    m.mask = Mat::Zero(s, s);
    for (int r = 0; r < s; ++r)
      for (int c = 0; c < s; ++c)
        if (winner(r, c) == i) m.mask(r, c) = 1.0;
    m.area = static_cast<int>(m.mask.sum());
    m.stability = 1.0;  // toy masks are exact
    if (m.area >= 1) t.masks.push_back(std::move(m));
  }

  t.depth = depth;
  t.edge = Mat::Zero(s, s);
  for (const auto& m : t.masks) {
    for (int r = 0; r < s; ++r) {
      for (int c = 0; c < s; ++c) {
        if (m.mask(r, c) < 0.5) continue;
        bool boundary = r == 0 || r == s - 1 || c == 0 || c == s - 1 ||
                        m.mask(r - 1, c) < 0.5 || m.mask(r + 1, c) < 0.5 ||
                        m.mask(r, c - 1) < 0.5 || m.mask(r, c + 1) < 0.5;
        if (boundary) t.edge(r, c) = 1.0;
      }
    }
  }

  const int g = s / kPatchPixels;
  t.patch_features = Mat(g * g, kPatchFeatureDim);
  for (int pr = 0; pr < g; ++pr) {
    for (int pc = 0; pc < g; ++pc) {
      double mean =
          image.block(pr * kPatchPixels, pc * kPatchPixels, kPatchPixels, kPatchPixels)
              .mean();
      t.patch_features.row(pr * g + pc).setConstant(mean);
    }
  }

  attach_derived_features(image, t);
  return {image, t};
}

// Quality filter: drop tiny or unstable masks, sort by area descending
// (ties by bounding box), keep at most eight.
inline std::vector<MaskInfo> filter_masks(std::vector<MaskInfo> masks, int image_size) {
  const double min_area = 0.001 * image_size * image_size;
  std::vector<MaskInfo> kept;
  for (auto& m : masks) {
    if (m.area < min_area || m.stability < 0.5) continue;
    kept.push_back(std::move(m));
  }
  auto bbox = [](const Mat& m) {
    int h = static_cast<int>(m.rows()), w = static_cast<int>(m.cols());
    int r0 = h, c0 = w, r1 = -1, c1 = -1;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        if (m(r, c) > 0.5) {
          r0 = std::min(r0, r);
          c0 = std::min(c0, c);
          r1 = std::max(r1, r);
          c1 = std::max(c1, c);
        }
    return std::array<int, 4>{r0, c0, r1, c1};
  };
  std::stable_sort(kept.begin(), kept.end(), [&](const MaskInfo& a, const MaskInfo& b) {
    if (a.area != b.area) return a.area > b.area;
    return bbox(a.mask) < bbox(b.mask);
  });
  if (kept.size() > 8) kept.resize(8);
  return kept;
}

struct ExpertContract {
  std::string name;
  int tap_count = 0;
  int channels = kExpertChannels;
  bool needs_dense_embedding = false;
  bool needs_mask_decoder = false;
  bool needs_final_map = false;
  bool patch_grid = false;
  std::string notes;
};

// Declares the artifacts a real expert adapter must supply for one group.
inline ExpertContract external_expert_contract(const std::string& name) {
  ExpertContract c;
  c.name = name;
  if (name == "seg") {
    c.needs_dense_embedding = true;
    c.needs_mask_decoder = true;
    c.notes = "decoder maps (prompt, dense_embedding) -> mask in [0,1]^(HxW); each token prompts one mask";
  } else if (name == "depth") {
    c.tap_count = kTapCount;
    c.needs_final_map = true;
    c.notes = "4 intermediate feature maps; tap 3 is the final-layer feature; final depth map as ground truth";
  } else if (name == "edge") {
    c.tap_count = kTapCount;
    c.needs_final_map = true;
    c.notes = "4 intermediate feature maps; final edge map as ground truth";
  } else if (name == "dino") {
    c.patch_grid = true;
    c.notes = "P x d patch feature grid";
  } else {
    throw UnknownExpert(name);
  }
  return c;
}

// ---- expert cache ----------------------------------------------------------

constexpr double kDepthQuantScale = 16000.0;  // 16-bit PGM quantization
constexpr double kImageQuantScale = 65535.0;

inline void write_patch_features(const std::string& path, const Mat& feats) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoFailure("cannot write " + path);
  std::int32_t p = static_cast<std::int32_t>(feats.rows());
  std::int32_t d = static_cast<std::int32_t>(feats.cols());
  out.write(reinterpret_cast<const char*>(&p), 4);
  out.write(reinterpret_cast<const char*>(&d), 4);
  for (std::int32_t r = 0; r < p; ++r)
    for (std::int32_t c = 0; c < d; ++c) {
      float f = static_cast<float>(feats(r, c));
      out.write(reinterpret_cast<const char*>(&f), 4);
    }
  if (!out) throw IoFailure("write failed for " + path);
}

inline Mat read_patch_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoFailure("cannot read " + path);
  std::int32_t p = 0, d = 0;
  in.read(reinterpret_cast<char*>(&p), 4);
  in.read(reinterpret_cast<char*>(&d), 4);
  if (!in || p <= 0 || d <= 0) throw IoFailure(path + ": bad feature header");
  Mat feats(p, d);
  for (std::int32_t r = 0; r < p; ++r)
    for (std::int32_t c = 0; c < d; ++c) {
      float f = 0;
      in.read(reinterpret_cast<char*>(&f), 4);
      feats(r, c) = f;
    }
  if (!in) throw IoFailure(path + ": truncated features");
  return feats;
}

inline void write_expert_cache(const std::string& dir, const Mat& image,
                               const ExpertTargets& t) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoFailure("cannot create " + dir);
  write_pgm(dir + "/image.pgm", image * kImageQuantScale, 65535);
  for (size_t i = 0; i < t.masks.size(); ++i)
    write_pgm(dir + "/mask_" + std::to_string(i) + ".pgm", t.masks[i].mask, 1);
  write_pgm(dir + "/depth.pgm", t.depth * kDepthQuantScale, 65535);
  write_pgm(dir + "/edge.pgm", t.edge * 65535.0, 65535);
  write_patch_features(dir + "/features.bin", t.patch_features);
}

struct CachedSample {
  Mat image;
  ExpertTargets targets;
};

inline CachedSample read_expert_cache(const std::string& dir) {
  if (!std::filesystem::exists(dir + "/image.pgm"))
    throw MissingExpertCache(dir);
  CachedSample s;
  PgmImage img = read_pgm(dir + "/image.pgm");
  s.image = img.values / kImageQuantScale;
  for (int i = 0;; ++i) {
    std::string p = dir + "/mask_" + std::to_string(i) + ".pgm";
    if (!std::filesystem::exists(p)) break;
    MaskInfo m;
    m.mask = read_pgm(p).values;
    m.area = static_cast<int>(m.mask.sum());
    m.stability = 1.0;
    s.targets.masks.push_back(std::move(m));
  }
  s.targets.depth = read_pgm(dir + "/depth.pgm").values / kDepthQuantScale;
  s.targets.edge = read_pgm(dir + "/edge.pgm").values / 65535.0;
  s.targets.patch_features = read_patch_features(dir + "/features.bin");
  attach_derived_features(s.image, s.targets);
  return s;
}

}  // namespace covt
