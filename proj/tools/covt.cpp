// covt: chain-of-visual-thought toolkit.
//   build-data  synthesize a curriculum dataset plus its expert cache
//   train       run the staged trainer over a JSONL dataset
//   infer       answer a question about an image, thoughts stay latent
//   decode      render a saved thought chain into dense prediction files

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "covt/alignment.hpp"
#include "covt/backbone.hpp"
#include "covt/checkpoint.hpp"
#include "covt/datapipe.hpp"
#include "covt/pgm.hpp"
#include "covt/trainer.hpp"

namespace {

using covt::Mat;

struct GlobalFlags {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<long> seed;
};

covt::CovtConfig load_config(const GlobalFlags& g) {
  if (g.config_path.empty()) throw covt::MissingField("--config");
  covt::CovtConfig cfg = covt::load_config_file(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

std::string cache_root(const std::string& flag_value, const std::string& fallback) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("COVT_CACHE"); env && *env) return env;
  return fallback;
}

// Loaded model bundle for infer/decode: backbone + heads from a checkpoint.
struct Model {
  covt::CovtConfig cfg;
  std::unique_ptr<covt::Trainer> trainer;
};

Model load_model(const std::string& ckpt) {
  Model m;
  m.cfg = covt::load_config_file(ckpt + "/config.cfg");
  m.trainer = std::make_unique<covt::Trainer>(m.cfg, std::vector<covt::TrainingRecord>{},
                                              std::string());
  m.trainer->load(ckpt);
  return m;
}

Mat load_image(const std::string& path, int expected_size) {
  covt::PgmImage pgm = covt::read_pgm(path);
  if (pgm.values.rows() != expected_size || pgm.values.cols() != expected_size)
    throw covt::ShapeMismatch(path + ": expected " + std::to_string(expected_size) +
                              "x" + std::to_string(expected_size));
  return pgm.values / static_cast<double>(pgm.maxval);
}

Mat unflatten(const Mat& row, int h, int w) {
  Mat out(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) out(r, c) = row(0, r * w + c);
  return out;
}

int cmd_build_data(const GlobalFlags& g, int count, const std::vector<int>& stages,
                   const std::string& cache_flag) {
  covt::CovtConfig cfg = load_config(g);
  std::string cache = cache_root(cache_flag, g.out_dir + "/cache");
  auto recs = covt::build_dataset(cfg, count, stages, cache, g.out_dir + "/data.jsonl");
  std::cout << "wrote " << recs.size() << " records to " << g.out_dir
            << "/data.jsonl and " << recs.size() << " cache dirs under " << cache << "\n";
  return 0;
}

int cmd_train(const GlobalFlags& g, const std::string& data_path,
              const std::string& cache_flag, const std::string& resume) {
  covt::CovtConfig cfg = load_config(g);
  auto records = covt::read_records(data_path);
  std::string cache = cache_root(
      cache_flag, std::filesystem::path(data_path).parent_path().string() + "/cache");
  covt::Trainer trainer(cfg, std::move(records), cache);
  if (!resume.empty()) trainer.load(resume);
  auto history = trainer.train(g.out_dir);
  if (!history.empty())
    std::cout << "trained " << history.size() << " steps, final total loss "
              << history.back().total << "\n";
  std::cout << "checkpoints under " << g.out_dir << "\n";
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& image_path,
              const std::string& question, bool show_thoughts,
              const std::string& save_chain) {
  Model m = load_model(ckpt);
  covt::ToyBackbone& bb = m.trainer->backbone();
  const covt::Vocab& vocab = bb.vocab();
  Mat image = load_image(image_path, m.cfg.image_size);

  covt::reset_decoder_invocations();
  std::vector<int> prompt = vocab.encode("<image> " + question);
  int max_len = std::min(covt::kMaxSeq - bb.n_patches(),
                         static_cast<int>(prompt.size()) + 64);
  covt::ThoughtChain chain = bb.generate_with_visual_thoughts(prompt, image, max_len);

  // Printable answer: generated tokens, with the thought block elided by
  // default and the trailing <eos> dropped.
  std::vector<int> shown;
  bool in_think = false;
  for (size_t p = prompt.size(); p < chain.token_ids.size(); ++p) {
    int id = chain.token_ids[p];
    if (id == vocab.eos_id()) break;
    if (id == vocab.think_open_id()) in_think = true;
    bool hide = !show_thoughts && (in_think || vocab.visual_info(id).has_value());
    if (!hide) shown.push_back(id);
    if (id == vocab.think_close_id()) in_think = false;
  }
  std::cout << "answer: " << vocab.decode(shown) << "\n";
  std::cout << "visual slots: " << chain.visual_slots.size() << "\n";
  std::cout << "decoder invocations: " << covt::decoder_invocations() << "\n";

  if (!save_chain.empty()) {
    nlohmann::json j;
    j["sample"] = std::filesystem::path(image_path).stem().string();
    j["question"] = question;
    j["token_ids"] = chain.token_ids;
    std::vector<std::string> toks;
    for (int id : chain.token_ids) toks.push_back(vocab.token(id));
    j["tokens"] = toks;
    j["visual_slots"] = nlohmann::json::array();
    for (const auto& slot : chain.visual_slots) {
      std::vector<double> hidden(slot.hidden.data(),
                                 slot.hidden.data() + slot.hidden.size());
      j["visual_slots"].push_back({{"position", slot.position},
                                   {"group", covt::group_name(slot.group)},
                                   {"index", slot.index_in_group},
                                   {"hidden", hidden}});
    }
    std::ofstream out(save_chain, std::ios::binary);
    if (!out) throw covt::IoFailure("cannot write " + save_chain);
    out << j.dump(2) << "\n";
    std::cout << "chain saved to " << save_chain << "\n";
  }
  return 0;
}

int cmd_decode(const GlobalFlags& g, const std::string& chain_path,
               const std::string& ckpt, const std::string& cache_sample,
               const std::string& image_path) {
  Model m = load_model(ckpt);
  const int size = m.cfg.image_size;

  std::ifstream in(chain_path);
  if (!in) throw covt::IoFailure("cannot read " + chain_path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw covt::IoFailure(chain_path + ": bad JSON");
  std::string sample = j.value("sample", std::string("chain"));
  if (!j.contains("visual_slots") || j["visual_slots"].empty())
    throw covt::NoVisualSlots(chain_path);

  // Expert feature source: cached sample dir, or derived from a raw image.
  covt::ExpertTargets feats;
  if (!cache_sample.empty()) {
    covt::CachedSample cs = covt::read_expert_cache(cache_sample);
    feats = std::move(cs.targets);
  } else if (!image_path.empty()) {
    covt::attach_derived_features(load_image(image_path, size), feats);
  } else {
    throw covt::MissingExpertArtifacts("pass --cache SAMPLE_DIR or --image PGM");
  }

  struct Slot {
    covt::Group group;
    int index;
    Eigen::VectorXd hidden;
  };
  std::vector<Slot> slots;
  for (const auto& js : j["visual_slots"]) {
    Slot s;
    auto gname = js.at("group").get<std::string>();
    auto grp = covt::group_from_name(gname);
    if (!grp) throw covt::InvalidValue("chain group " + gname);
    s.group = *grp;
    s.index = js.at("index").get<int>();
    auto hv = js.at("hidden").get<std::vector<double>>();
    if (static_cast<int>(hv.size()) != m.cfg.hidden_dim)
      throw covt::ShapeMismatch("chain hidden width " + std::to_string(hv.size()));
    s.hidden = Eigen::Map<const Eigen::VectorXd>(hv.data(), hv.size());
    slots.push_back(std::move(s));
  }

  std::filesystem::create_directories(g.out_dir);
  covt::ad::Tape tape(false);
  auto hidden_row = [&](const Slot& s) {
    return tape.constant(s.hidden.transpose());
  };

  int written = 0;
  // Segmentation: one mask file per token.
  int seg_i = 0;
  for (const auto& s : slots) {
    if (s.group != covt::Group::Seg) continue;
    covt::ad::Var prompt = m.trainer->head(covt::Group::Seg).project(tape, hidden_row(s));
    Mat mask = tape.val(covt::decode_mask_op(tape, prompt, feats.seg_embedding));
    covt::write_pgm(g.out_dir + "/" + sample + "_seg_" + std::to_string(seg_i++) + ".pgm",
                    unflatten(mask, size, size) * 255.0, 255);
    ++written;
  }

  // Depth: averaged softmax maps, scaled off the pixel simplex into 16 bits.
  std::vector<const Slot*> depth_slots;
  for (const auto& s : slots)
    if (s.group == covt::Group::Depth) depth_slots.push_back(&s);
  if (!depth_slots.empty()) {
    Mat mean = Mat::Zero(1, size * size);
    for (const Slot* s : depth_slots) {
      covt::ad::Var prompt = m.trainer->head(covt::Group::Depth).project(tape, hidden_row(*s));
      covt::ad::Var map = tape.row_softmax(
          tape.matmul_nt(prompt, tape.constant(feats.depth_taps[s->index])));
      mean += tape.val(map);
    }
    mean /= static_cast<double>(depth_slots.size());
    covt::write_pgm(g.out_dir + "/" + sample + "_depth_0.pgm",
                    unflatten(mean, size, size) * (size * size * 32768.0), 65535);
    ++written;
  }

  // Edge: averaged 1x1-conv responses through a sigmoid.
  std::vector<const Slot*> edge_slots;
  for (const auto& s : slots)
    if (s.group == covt::Group::Edge) edge_slots.push_back(&s);
  if (!edge_slots.empty()) {
    Mat mean = Mat::Zero(1, size * size);
    for (const Slot* s : edge_slots) {
      covt::ad::Var kernel = m.trainer->head(covt::Group::Edge).project(tape, hidden_row(*s));
      mean += tape.val(tape.matmul(kernel, tape.constant(feats.edge_taps[s->index])));
    }
    mean /= static_cast<double>(edge_slots.size());
    Mat edge = (1.0 / (1.0 + (-mean.array()).exp())).matrix();
    covt::write_pgm(g.out_dir + "/" + sample + "_edge_0.pgm",
                    unflatten(edge, size, size) * 65535.0, 65535);
    ++written;
  }

  // Dino: mean projected patch grid as a flat binary feature file.
  std::vector<const Slot*> dino_slots;
  for (const auto& s : slots)
    if (s.group == covt::Group::Dino) dino_slots.push_back(&s);
  if (!dino_slots.empty()) {
    covt::ProjectionHead& head = m.trainer->head(covt::Group::Dino);
    Mat mean = Mat::Zero(head.query_count(), head.mapped_dim());
    for (const Slot* s : dino_slots)
      mean += tape.val(head.project(tape, hidden_row(*s)));
    mean /= static_cast<double>(dino_slots.size());
    covt::write_patch_features(g.out_dir + "/" + sample + "_dino_features.bin", mean);
    ++written;
  }

  std::cout << "decoded " << written << " artifact(s) for " << slots.size()
            << " slot(s) into " << g.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chain-of-visual-thought toolkit"};
  app.require_subcommand(1);

  GlobalFlags g;
  long seed_flag = 0;
  bool seed_set = false;
  app.add_option("--config", g.config_path, "configuration file (key = value)");
  app.add_option("--out", g.out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", seed_flag, "seed override");

  auto* build = app.add_subcommand("build-data", "synthesize a dataset + expert cache");
  int count = 0;
  std::vector<int> stages = {1, 2, 3, 4};
  std::string cache_flag;
  build->add_option("--n", count, "number of records")
      ->required()
      ->check(CLI::PositiveNumber);
  build->add_option("--stages", stages, "curriculum stages to cycle through");
  build->add_option("--cache", cache_flag, "expert cache root");

  auto* train = app.add_subcommand("train", "run the staged trainer");
  std::string data_path, train_cache, resume;
  train->add_option("--data", data_path, "JSONL dataset")->required();
  train->add_option("--cache", train_cache, "expert cache root");
  train->add_option("--resume", resume, "checkpoint directory to resume from");

  auto* infer = app.add_subcommand("infer", "answer a question about an image");
  std::string ckpt, image_path, question, save_chain;
  bool show_thoughts = false;
  infer->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  infer->add_option("--image", image_path, "input PGM image")->required();
  infer->add_option("--question", question, "question text")->required();
  infer->add_flag("--show-thoughts", show_thoughts, "print the thought block");
  infer->add_option("--save-chain", save_chain, "save the thought chain as JSON");

  auto* decode = app.add_subcommand("decode", "render a saved chain into images");
  std::string chain_path, dec_ckpt, dec_cache, dec_image;
  decode->add_option("--chain", chain_path, "saved thought chain JSON")->required();
  decode->add_option("--ckpt", dec_ckpt, "checkpoint directory")->required();
  decode->add_option("--cache", dec_cache, "cached sample directory");
  decode->add_option("--image", dec_image, "raw PGM image as the feature source");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (seed_opt->count() > 0) {
    g.seed = seed_flag;
    (void)seed_set;
  }

  try {
    if (build->parsed()) return cmd_build_data(g, count, stages, cache_flag);
    if (train->parsed()) return cmd_train(g, data_path, train_cache, resume);
    if (infer->parsed())
      return cmd_infer(ckpt, image_path, question, show_thoughts, save_chain);
    if (decode->parsed())
      return cmd_decode(g, chain_path, dec_ckpt, dec_cache, dec_image);
  } catch (const covt::Error& e) {
    std::cerr << "error [" << e.kind << "] " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
