#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "covt/errors.hpp"

namespace covt {

enum class Group { Seg = 0, Depth = 1, Edge = 2, Dino = 3 };

inline const char* group_name(Group g) {
  switch (g) {
    case Group::Seg: return "seg";
    case Group::Depth: return "depth";
    case Group::Edge: return "edge";
    case Group::Dino: return "dino";
  }
  return "?";
}

inline std::optional<Group> group_from_name(const std::string& s) {
  if (s == "seg") return Group::Seg;
  if (s == "depth") return Group::Depth;
  if (s == "edge") return Group::Edge;
  if (s == "dino") return Group::Dino;
  return std::nullopt;
}

struct GroupSpec {
  Group group;
  int count;
  std::string literal_prefix;
};

// The vocabulary extension: ordered token groups and their literal grammar.
struct TokenSchema {
  std::vector<GroupSpec> groups;

  static TokenSchema defaults() {
    return TokenSchema{{{Group::Seg, 8, "seg"},
                        {Group::Depth, 4, "depth"},
                        {Group::Edge, 4, "edge"},
                        {Group::Dino, 4, "dino"}}};
  }

  int total_budget() const {
    int n = 0;
    for (const auto& g : groups) n += g.count;
    return n;
  }

  int count(Group g) const {
    for (const auto& gs : groups)
      if (gs.group == g) return gs.count;
    return 0;
  }

  std::string literal(Group g, int index) const {
    for (const auto& gs : groups)
      if (gs.group == g) {
        if (index < 0 || index >= gs.count)
          throw InvalidValue("token index " + std::to_string(index) +
                             " out of range for group " + gs.literal_prefix);
        return "<" + gs.literal_prefix + "_" + std::to_string(index) + ">";
      }
    throw InvalidValue(std::string("unknown group ") + group_name(g));
  }

  // All literals in schema order (group order, index order within a group).
  std::vector<std::string> all_literals() const {
    std::vector<std::string> out;
    for (const auto& gs : groups)
      for (int i = 0; i < gs.count; ++i)
        out.push_back("<" + gs.literal_prefix + "_" + std::to_string(i) + ">");
    return out;
  }

  void validate() const {
    if (groups.empty()) throw InvalidValue("token_schema: no groups");
    for (size_t i = 0; i < groups.size(); ++i) {
      if (groups[i].count <= 0)
        throw InvalidValue("token_schema: zero count for group " +
                           groups[i].literal_prefix);
      for (size_t j = i + 1; j < groups.size(); ++j) {
        if (groups[i].literal_prefix == groups[j].literal_prefix ||
            groups[i].group == groups[j].group)
          throw InvalidValue("token_schema: duplicate group " +
                             groups[i].literal_prefix);
      }
    }
  }

  std::string serialize() const {
    std::string s;
    for (const auto& g : groups) {
      if (!s.empty()) s += ",";
      s += g.literal_prefix + ":" + std::to_string(g.count);
    }
    return s;
  }

  static TokenSchema parse(const std::string& text) {
    TokenSchema schema;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      auto colon = item.find(':');
      if (colon == std::string::npos)
        throw InvalidValue("token_schema: expected name:count, got '" + item + "'");
      std::string name = item.substr(0, colon);
      auto g = group_from_name(name);
      if (!g) throw InvalidValue("token_schema: unknown group '" + name + "'");
      int count = 0;
      try {
        count = std::stoi(item.substr(colon + 1));
      } catch (const std::exception&) {
        throw InvalidValue("token_schema: bad count in '" + item + "'");
      }
      schema.groups.push_back({*g, count, name});
    }
    schema.validate();
    return schema;
  }
};

struct CovtConfig {
  TokenSchema token_schema = TokenSchema::defaults();
  int hidden_dim = 0;   // required
  int image_size = 0;   // required
  double gamma = 1.0;
  double lambda_seg = 1.0;
  double lambda_depth = 1.0;
  double lambda_edge = 1.0;
  double lambda_dino = 1.0;
  double focal_gamma = 2.0;
  double match_alpha = 1.0;
  bool symmetric_focal = false;
  int adapter_rank = 16;
  double adapter_alpha = 32.0;
  double lr_adapter = 5e-5;
  double lr_projection = 1e-5;
  double warmup_ratio = 0.05;
  std::array<long, 4> stage_steps = {4000, 3000, 3000, 5000};
  int batch_size = 4;
  long seed = 0;
  int layer_count = 2;
  int head_count = 4;

  double lambda(Group g) const {
    switch (g) {
      case Group::Seg: return lambda_seg;
      case Group::Depth: return lambda_depth;
      case Group::Edge: return lambda_edge;
      case Group::Dino: return lambda_dino;
    }
    return 0.0;
  }

  long total_steps() const {
    long n = 0;
    for (long s : stage_steps) n += s;
    return n;
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw InvalidValue(key);
    return d;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    throw InvalidValue(key);
  }
}

inline long parse_long(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    long n = std::stol(v, &pos);
    if (pos != v.size()) throw InvalidValue(key);
    return n;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    throw InvalidValue(key);
  }
}

}  // namespace detail

// Validates a raw key/value map, fills defaults, rejects bad values.
inline CovtConfig validate_config(const std::map<std::string, std::string>& raw) {
  CovtConfig cfg;
  if (!raw.count("hidden_dim")) throw MissingField("hidden_dim");
  if (!raw.count("image_size")) throw MissingField("image_size");

  auto need_nonneg = [](const std::string& key, double v) {
    if (!std::isfinite(v) || v < 0) throw InvalidValue(key);
    return v;
  };
  auto need_pos_int = [](const std::string& key, long v) {
    if (v <= 0) throw InvalidValue(key);
    return static_cast<int>(v);
  };

  for (const auto& [key, val] : raw) {
    if (key == "hidden_dim") {
      cfg.hidden_dim = need_pos_int(key, detail::parse_long(key, val));
    } else if (key == "image_size") {
      cfg.image_size = need_pos_int(key, detail::parse_long(key, val));
    } else if (key == "token_schema") {
      cfg.token_schema = TokenSchema::parse(val);
    } else if (key == "gamma") {
      cfg.gamma = need_nonneg(key, detail::parse_double(key, val));
    } else if (key == "lambda_seg") {
      cfg.lambda_seg = need_nonneg(key, detail::parse_double(key, val));
    } else if (key == "lambda_depth") {
      cfg.lambda_depth = need_nonneg(key, detail::parse_double(key, val));
    } else if (key == "lambda_edge") {
      cfg.lambda_edge = need_nonneg(key, detail::parse_double(key, val));
    } else if (key == "lambda_dino") {
      cfg.lambda_dino = need_nonneg(key, detail::parse_double(key, val));
    } else if (key == "focal_gamma") {
      cfg.focal_gamma = need_nonneg(key, detail::parse_double(key, val));
    } else if (key == "match_alpha") {
      cfg.match_alpha = need_nonneg(key, detail::parse_double(key, val));
    } else if (key == "symmetric_focal") {
      if (val == "true" || val == "1") cfg.symmetric_focal = true;
      else if (val == "false" || val == "0") cfg.symmetric_focal = false;
      else throw InvalidValue(key);
    } else if (key == "adapter_rank") {
      cfg.adapter_rank = need_pos_int(key, detail::parse_long(key, val));
    } else if (key == "adapter_alpha") {
      double a = detail::parse_double(key, val);
      if (!std::isfinite(a) || a <= 0) throw InvalidValue(key);
      cfg.adapter_alpha = a;
    } else if (key == "lr_adapter") {
      double a = detail::parse_double(key, val);
      if (!std::isfinite(a) || a <= 0) throw InvalidValue(key);
      cfg.lr_adapter = a;
    } else if (key == "lr_projection") {
      double a = detail::parse_double(key, val);
      if (!std::isfinite(a) || a <= 0) throw InvalidValue(key);
      cfg.lr_projection = a;
    } else if (key == "warmup_ratio") {
      double a = detail::parse_double(key, val);
      if (!std::isfinite(a) || a < 0 || a >= 1) throw InvalidValue(key);
      cfg.warmup_ratio = a;
    } else if (key == "stage_steps") {
      std::stringstream ss(val);
      std::string item;
      std::vector<long> steps;
      while (std::getline(ss, item, ',')) steps.push_back(detail::parse_long(key, item));
      if (steps.size() != 4) throw InvalidValue(key);
      for (size_t i = 0; i < 4; ++i) {
        if (steps[i] <= 0) throw InvalidValue(key);
        cfg.stage_steps[i] = steps[i];
      }
    } else if (key == "batch_size") {
      cfg.batch_size = need_pos_int(key, detail::parse_long(key, val));
    } else if (key == "seed") {
      cfg.seed = detail::parse_long(key, val);
    } else if (key == "layer_count") {
      cfg.layer_count = need_pos_int(key, detail::parse_long(key, val));
    } else if (key == "head_count") {
      cfg.head_count = need_pos_int(key, detail::parse_long(key, val));
    } else {
      throw InvalidValue(key);
    }
  }

  if (cfg.hidden_dim % cfg.head_count != 0) throw InvalidValue("head_count");
  if (cfg.image_size % 8 != 0) throw InvalidValue("image_size");
  cfg.token_schema.validate();
  return cfg;
}

inline std::string serialize_config(const CovtConfig& cfg) {
  std::ostringstream os;
  os << "hidden_dim = " << cfg.hidden_dim << "\n";
  os << "image_size = " << cfg.image_size << "\n";
  os << "token_schema = " << cfg.token_schema.serialize() << "\n";
  os << "gamma = " << detail::fmt_double(cfg.gamma) << "\n";
  os << "lambda_seg = " << detail::fmt_double(cfg.lambda_seg) << "\n";
  os << "lambda_depth = " << detail::fmt_double(cfg.lambda_depth) << "\n";
  os << "lambda_edge = " << detail::fmt_double(cfg.lambda_edge) << "\n";
  os << "lambda_dino = " << detail::fmt_double(cfg.lambda_dino) << "\n";
  os << "focal_gamma = " << detail::fmt_double(cfg.focal_gamma) << "\n";
  os << "match_alpha = " << detail::fmt_double(cfg.match_alpha) << "\n";
  os << "symmetric_focal = " << (cfg.symmetric_focal ? "true" : "false") << "\n";
  os << "adapter_rank = " << cfg.adapter_rank << "\n";
  os << "adapter_alpha = " << detail::fmt_double(cfg.adapter_alpha) << "\n";
  os << "lr_adapter = " << detail::fmt_double(cfg.lr_adapter) << "\n";
  os << "lr_projection = " << detail::fmt_double(cfg.lr_projection) << "\n";
  os << "warmup_ratio = " << detail::fmt_double(cfg.warmup_ratio) << "\n";
  os << "stage_steps = " << cfg.stage_steps[0] << "," << cfg.stage_steps[1] << ","
     << cfg.stage_steps[2] << "," << cfg.stage_steps[3] << "\n";
  os << "batch_size = " << cfg.batch_size << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "layer_count = " << cfg.layer_count << "\n";
  os << "head_count = " << cfg.head_count << "\n";
  return os.str();
}

// Flat `key = value` text, `#` comments, blank lines ignored.
inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> raw;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    return s.substr(a, b - a + 1);
  };
  while (std::getline(ss, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidValue("config line " + std::to_string(lineno) + ": expected key = value");
    raw[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return raw;
}

inline CovtConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoFailure("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return validate_config(parse_config_text(ss.str()));
}

inline void save_config_file(const CovtConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoFailure("cannot write config file " + path);
  out << serialize_config(cfg);
}

}  // namespace covt
