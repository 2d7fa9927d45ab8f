#pragma once

// Curriculum data pipeline: synthetic scene sampling, question/answer
// templating across the four curriculum stages, visual-thought formatting
// and strict parsing, and JSONL dataset construction with an expert cache.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "covt/config.hpp"
#include "covt/errors.hpp"
#include "covt/experts.hpp"
#include "covt/rng.hpp"
#include "covt/tokenizer.hpp"

namespace covt {

struct TrainingRecord {
  std::string sample_id;
  int stage = 0;
  std::string image_ref;  // cache-relative, e.g. "s000003/image.pgm"
  std::string question;
  std::string answer;
  std::vector<std::string> groups;  // group names present in the thought block
};

// Per-group token subsets carried by a formatted sample.
using GroupSubset = std::vector<std::vector<int>>;  // schema order

inline GroupSubset full_subset(const TokenSchema& schema) {
  GroupSubset s;
  for (const auto& gs : schema.groups) {
    std::vector<int> idx(gs.count);
    for (int i = 0; i < gs.count; ++i) idx[i] = i;
    s.push_back(std::move(idx));
  }
  return s;
}

// Random dropout for the final stage: per group draw a subset size uniformly
// from {0..k}, then a uniform subset of that size, kept in ascending order.
inline GroupSubset dropout_subset(const TokenSchema& schema, Rng& rng) {
  GroupSubset s;
  for (const auto& gs : schema.groups) {
    int keep = rnd_int(rng, 0, gs.count);
    std::vector<int> pool(gs.count);
    for (int i = 0; i < gs.count; ++i) pool[i] = i;
    for (int i = 0; i < keep; ++i) {  // partial Fisher-Yates
      int j = rnd_int(rng, i, gs.count - 1);
      std::swap(pool[i], pool[j]);
    }
    pool.resize(keep);
    std::sort(pool.begin(), pool.end());
    s.push_back(std::move(pool));
  }
  return s;
}

inline std::string subset_literals(const TokenSchema& schema, const GroupSubset& subset) {
  std::string out;
  for (size_t g = 0; g < schema.groups.size(); ++g)
    for (int i : subset[g]) {
      if (!out.empty()) out += ' ';
      out += schema.literal(schema.groups[g].group, i);
    }
  return out;
}

struct FormattedSample {
  std::string question;
  std::string answer;
  GroupSubset subset;
};

// Stage templating:
//   1: literals are appended to the question; the model answers directly.
//   2: the model reproduces the full literal sequence as its whole answer.
//   3: the answer opens with a complete <think> block, then the text answer.
//   4: like 3 with a random per-group token subset.
inline FormattedSample format_stage(int stage, const TokenSchema& schema,
                                    const std::string& question_core,
                                    const std::string& answer_text, Rng& rng) {
  FormattedSample f;
  switch (stage) {
    case 1:
      f.subset = full_subset(schema);
      f.question = "<image> " + subset_literals(schema, f.subset) + " " + question_core;
      f.answer = answer_text;
      break;
    case 2:
      f.subset = full_subset(schema);
      f.question = "<image> generate the visual thinking tokens for this image .";
      f.answer = subset_literals(schema, f.subset);
      break;
    case 3:
      f.subset = full_subset(schema);
      f.question = "<image> " + question_core;
      f.answer = "<think> " + subset_literals(schema, f.subset) + " </think> " + answer_text;
      break;
    case 4: {
      f.subset = dropout_subset(schema, rng);
      f.question = "<image> " + question_core;
      std::string lits = subset_literals(schema, f.subset);
      f.answer = "<think>" + (lits.empty() ? std::string() : " " + lits) + " </think> " +
                 answer_text;
      break;
    }
    default:
      throw UnknownStage(std::to_string(stage));
  }
  return f;
}

struct ParsedSample {
  GroupSubset subset;                         // indices present, per group
  std::vector<std::pair<Group, int>> order;   // emission order
  bool has_think = false;
};

// Strict validation of a token sequence's visual-thought structure: group
// blocks must follow schema order, indices ascend within a group, nothing
// repeats, and when a <think> block exists all visual tokens live inside it.
inline ParsedSample parse_sample(const Vocab& vocab, const std::vector<int>& ids) {
  const TokenSchema& schema = vocab.schema();
  ParsedSample out;
  out.subset.resize(schema.groups.size());

  auto group_rank = [&](Group g) {
    for (size_t i = 0; i < schema.groups.size(); ++i)
      if (schema.groups[i].group == g) return static_cast<int>(i);
    return -1;
  };

  int think_open = -1, think_close = -1;
  for (size_t p = 0; p < ids.size(); ++p) {
    if (ids[p] == vocab.think_open_id()) {
      if (think_open >= 0)
        throw MalformedThought("position " + std::to_string(p) + ": repeated <think>");
      think_open = static_cast<int>(p);
    } else if (ids[p] == vocab.think_close_id()) {
      if (think_open < 0)
        throw MalformedThought("position " + std::to_string(p) +
                               ": </think> before <think>");
      if (think_close >= 0)
        throw MalformedThought("position " + std::to_string(p) + ": repeated </think>");
      think_close = static_cast<int>(p);
    }
  }
  if (think_open >= 0 && think_close < 0)
    throw MalformedThought("unclosed <think> block");
  out.has_think = think_open >= 0;

  int cur_rank = -1, last_index = -1;
  for (size_t p = 0; p < ids.size(); ++p) {
    auto info = vocab.visual_info(ids[p]);
    if (!info) continue;
    if (out.has_think &&
        (static_cast<int>(p) < think_open || static_cast<int>(p) > think_close))
      throw MalformedThought("position " + std::to_string(p) +
                             ": visual token outside the <think> block");
    int rank = group_rank(info->group);
    if (rank < cur_rank)
      throw MalformedThought("position " + std::to_string(p) + ": group " +
                             group_name(info->group) + " out of schema order");
    if (rank == cur_rank && info->index <= last_index)
      throw MalformedThought("position " + std::to_string(p) + ": token index " +
                             std::to_string(info->index) +
                             (info->index == last_index ? " repeated" : " out of order"));
    cur_rank = rank;
    last_index = info->index;
    out.subset[rank].push_back(info->index);
    out.order.emplace_back(info->group, info->index);
  }
  return out;
}

// ---- scene and question sampling -------------------------------------------

inline SyntheticScene random_scene(const CovtConfig& cfg, Rng& rng) {
  SyntheticScene scene;
  const double s = cfg.image_size;
  int n = rnd_int(rng, 1, 3);
  // Distinct intensity bands keep shapes separable for the toy experts.
  std::vector<double> bands = {0.35, 0.55, 0.75, 0.95};
  for (int i = static_cast<int>(bands.size()) - 1; i > 0; --i)
    std::swap(bands[i], bands[rnd_int(rng, 0, i)]);
  for (int i = 0; i < n; ++i) {
    ShapeSpec sh;
    sh.kind = rnd_u01(rng) < 0.5 ? ShapeSpec::Rect : ShapeSpec::Disk;
    double margin = 0.2 * s;
    sh.cx = rnd_uniform(rng, margin, s - margin);
    sh.cy = rnd_uniform(rng, margin, s - margin);
    sh.size = rnd_uniform(rng, 0.08 * s, 0.18 * s);
    sh.depth = 0.2 + 0.7 * (i + rnd_u01(rng)) / n;  // distinct depth slots
    sh.intensity = bands[i];
    scene.shapes.push_back(sh);
  }
  return scene;
}

struct QaPair {
  std::string question_core;
  std::string answer_text;
};

inline QaPair make_qa(const SyntheticScene& scene, Rng& rng) {
  QaPair qa;
  if (rnd_u01(rng) < 0.5) {
    qa.question_core = "how many shapes are in the image ?";
    qa.answer_text = std::to_string(scene.shapes.size()) + " .";
  } else {
    qa.question_core = "what kind of shape is closest to the camera ?";
    const ShapeSpec* best = nullptr;
    for (const auto& sh : scene.shapes)
      if (!best || sh.depth < best->depth) best = &sh;
    qa.answer_text = std::string(best->kind == ShapeSpec::Rect ? "rect" : "disk") + " .";
  }
  return qa;
}

// ---- JSONL serialization ----------------------------------------------------

inline nlohmann::json record_to_json(const TrainingRecord& r) {
  return nlohmann::json{{"sample_id", r.sample_id}, {"stage", r.stage},
                        {"image_ref", r.image_ref}, {"question", r.question},
                        {"answer", r.answer},       {"groups", r.groups}};
}

inline TrainingRecord record_from_json(const nlohmann::json& j) {
  TrainingRecord r;
  for (const char* key : {"sample_id", "stage", "image_ref", "question", "answer"})
    if (!j.contains(key)) throw MissingField(std::string("record ") + key);
  r.sample_id = j.at("sample_id").get<std::string>();
  r.stage = j.at("stage").get<int>();
  if (r.stage < 1 || r.stage > 4) throw UnknownStage(std::to_string(r.stage));
  r.image_ref = j.at("image_ref").get<std::string>();
  r.question = j.at("question").get<std::string>();
  r.answer = j.at("answer").get<std::string>();
  if (j.contains("groups"))
    r.groups = j.at("groups").get<std::vector<std::string>>();
  return r;
}

inline void write_records(const std::string& path, const std::vector<TrainingRecord>& recs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoFailure("cannot write " + path);
  for (const auto& r : recs) out << record_to_json(r).dump() << "\n";
}

inline std::vector<TrainingRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot read " + path);
  std::vector<TrainingRecord> recs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw IoFailure(path + ":" + std::to_string(lineno) + ": bad JSON");
    recs.push_back(record_from_json(j));
  }
  return recs;
}

// ---- dataset construction ---------------------------------------------------

// Builds `count` records, cycling through `stages`. Consecutive records share
// one underlying scene across the stage cycle, mirroring how the curriculum
// reformats the same example for each stage. Deterministic in cfg.seed.
inline std::vector<TrainingRecord> build_dataset(const CovtConfig& cfg, int count,
                                                 const std::vector<int>& stages,
                                                 const std::string& cache_dir,
                                                 const std::string& jsonl_path) {
  if (count <= 0) throw InvalidValue("dataset size");
  if (stages.empty()) throw InvalidValue("stage list");
  for (int s : stages)
    if (s < 1 || s > 4) throw UnknownStage(std::to_string(s));

  std::vector<TrainingRecord> recs;
  for (int i = 0; i < count; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%06d", i);
    std::string sample_id = buf;
    const int scene_index = i / static_cast<int>(stages.size());
    Rng rng = derive_rng(static_cast<std::uint64_t>(cfg.seed),
                         "scene/" + std::to_string(scene_index));

    SyntheticScene scene = random_scene(cfg, rng);
    auto [image, targets] = render_scene(scene, cfg);
    targets.masks = filter_masks(std::move(targets.masks), cfg.image_size);
    write_expert_cache(cache_dir + "/" + sample_id, image, targets);

    QaPair qa = make_qa(scene, rng);
    int stage = stages[i % stages.size()];
    FormattedSample f = format_stage(stage, cfg.token_schema, qa.question_core,
                                     qa.answer_text, rng);
    TrainingRecord r;
    r.sample_id = sample_id;
    r.stage = stage;
    r.image_ref = sample_id + "/image.pgm";
    r.question = f.question;
    r.answer = f.answer;
    for (size_t g = 0; g < cfg.token_schema.groups.size(); ++g)
      if (!f.subset[g].empty())
        r.groups.push_back(cfg.token_schema.groups[g].literal_prefix);
    recs.push_back(std::move(r));
  }
  std::filesystem::create_directories(
      std::filesystem::path(jsonl_path).parent_path().string().empty()
          ? "."
          : std::filesystem::path(jsonl_path).parent_path().string());
  write_records(jsonl_path, recs);
  return recs;
}

}  // namespace covt
