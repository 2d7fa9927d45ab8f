#pragma once

// Checkpoint directory layout:
//   config.cfg       model + run configuration
//   manifest.txt     one line per tensor: <section> <name> <rows> <cols>
//   base.bin         frozen backbone weights, raw doubles in manifest order
//   adapters.bin     low-rank adapter weights
//   projections.bin  projection-head weights
//   moments.bin      Adam moments (m then v) for every trainable tensor
//   state.txt        step counter and per-stage data cursors

#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "covt/backbone.hpp"
#include "covt/config.hpp"
#include "covt/errors.hpp"
#include "covt/tensor.hpp"

namespace covt {

struct CheckpointState {
  long step = 0;
  std::array<long, 4> cursors = {0, 0, 0, 0};
};

namespace detail {

inline void write_mats(std::ofstream& out, const std::vector<ad::Parameter*>& params,
                       bool moments) {
  for (const ad::Parameter* p : params) {
    if (moments) {
      out.write(reinterpret_cast<const char*>(p->m.data()),
                static_cast<std::streamsize>(p->m.size() * sizeof(double)));
      out.write(reinterpret_cast<const char*>(p->v.data()),
                static_cast<std::streamsize>(p->v.size() * sizeof(double)));
    } else {
      out.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
  }
}

inline void read_mats(std::ifstream& in, const std::string& path,
                      const std::vector<ad::Parameter*>& params, bool moments) {
  for (ad::Parameter* p : params) {
    if (moments) {
      in.read(reinterpret_cast<char*>(p->m.data()),
              static_cast<std::streamsize>(p->m.size() * sizeof(double)));
      in.read(reinterpret_cast<char*>(p->v.data()),
              static_cast<std::streamsize>(p->v.size() * sizeof(double)));
    } else {
      in.read(reinterpret_cast<char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
    if (!in) throw IoFailure(path + ": truncated while reading " + p->name);
  }
  in.peek();
  if (!in.eof()) throw IoFailure(path + ": trailing data");
}

}  // namespace detail

inline void save_checkpoint(const std::string& dir, ToyBackbone& backbone,
                            const std::vector<ad::Parameter*>& projection_params,
                            const CovtConfig& cfg, const CheckpointState& state) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoFailure("cannot create checkpoint dir " + dir);
  save_config_file(cfg, dir + "/config.cfg");

  auto base = backbone.base_params();
  auto adapters = backbone.adapter_params();
  std::ofstream manifest(dir + "/manifest.txt", std::ios::binary);
  if (!manifest) throw IoFailure("cannot write " + dir + "/manifest.txt");
  auto emit = [&manifest](const char* section, const std::vector<ad::Parameter*>& ps) {
    for (const ad::Parameter* p : ps)
      manifest << section << " " << p->name << " " << p->value.rows() << " "
               << p->value.cols() << "\n";
  };
  emit("base", base);
  emit("adapters", adapters);
  emit("projections", projection_params);

  auto dump = [&dir](const char* file, const std::vector<ad::Parameter*>& ps,
                     bool moments) {
    std::ofstream out(dir + "/" + file, std::ios::binary);
    if (!out) throw IoFailure("cannot write " + dir + "/" + file);
    detail::write_mats(out, ps, moments);
    if (!out) throw IoFailure("write failed for " + dir + "/" + file);
  };
  dump("base.bin", base, false);
  dump("adapters.bin", adapters, false);
  dump("projections.bin", projection_params, false);
  std::vector<ad::Parameter*> trainable = adapters;
  trainable.insert(trainable.end(), projection_params.begin(), projection_params.end());
  dump("moments.bin", trainable, true);

  std::ofstream st(dir + "/state.txt", std::ios::binary);
  if (!st) throw IoFailure("cannot write " + dir + "/state.txt");
  st << "step " << state.step << "\n";
  st << "cursors " << state.cursors[0] << " " << state.cursors[1] << " "
     << state.cursors[2] << " " << state.cursors[3] << "\n";
}

// Loads weights and optimizer state into an already-constructed model whose
// shapes must match the manifest exactly.
inline CheckpointState load_checkpoint(const std::string& dir, ToyBackbone& backbone,
                                       const std::vector<ad::Parameter*>& projection_params) {
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest) throw IoFailure("cannot read " + dir + "/manifest.txt");

  auto base = backbone.base_params();
  auto adapters = backbone.adapter_params();
  auto section_params = [&](const std::string& section) -> std::vector<ad::Parameter*>* {
    if (section == "base") return &base;
    if (section == "adapters") return &adapters;
    if (section == "projections")
      return const_cast<std::vector<ad::Parameter*>*>(&projection_params);
    return nullptr;
  };

  // The manifest must list every parameter of each section, in order.
  std::string section, name;
  long rows = 0, cols = 0;
  std::array<size_t, 3> next = {0, 0, 0};
  while (manifest >> section >> name >> rows >> cols) {
    auto* params = section_params(section);
    if (!params) throw IoFailure(dir + ": unknown manifest section " + section);
    size_t idx = section == "base" ? 0 : section == "adapters" ? 1 : 2;
    if (next[idx] >= params->size())
      throw ShapeMismatch(dir + ": unexpected extra tensor " + name);
    ad::Parameter* p = (*params)[next[idx]++];
    if (p->name != name)
      throw ShapeMismatch(dir + ": expected tensor " + p->name + ", manifest has " + name);
    if (p->value.rows() != rows || p->value.cols() != cols)
      throw ShapeMismatch(dir + ": " + name + " is " + std::to_string(p->value.rows()) +
                          "x" + std::to_string(p->value.cols()) + ", checkpoint has " +
                          std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (next[0] != base.size() || next[1] != adapters.size() ||
      next[2] != projection_params.size())
    throw ShapeMismatch(dir + ": manifest is missing tensors");

  auto slurp = [&dir](const char* file, const std::vector<ad::Parameter*>& ps,
                      bool moments) {
    std::ifstream in(dir + "/" + file, std::ios::binary);
    if (!in) throw IoFailure("cannot read " + dir + "/" + file);
    detail::read_mats(in, dir + "/" + file, ps, moments);
  };
  slurp("base.bin", base, false);
  slurp("adapters.bin", adapters, false);
  slurp("projections.bin", projection_params, false);
  std::vector<ad::Parameter*> trainable = adapters;
  trainable.insert(trainable.end(), projection_params.begin(), projection_params.end());
  slurp("moments.bin", trainable, true);

  std::ifstream st(dir + "/state.txt");
  if (!st) throw IoFailure("cannot read " + dir + "/state.txt");
  CheckpointState state;
  std::string key;
  while (st >> key) {
    if (key == "step") {
      st >> state.step;
    } else if (key == "cursors") {
      for (long& c : state.cursors) st >> c;
    } else {
      throw IoFailure(dir + "/state.txt: unknown key " + key);
    }
  }
  return state;
}

}  // namespace covt
