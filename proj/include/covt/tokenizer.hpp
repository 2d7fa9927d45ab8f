#pragma once

// Toy vocabulary: a fixed 512-entry base word list plus the special tokens
// (<image>, <think>, </think>) and the visual-token literals appended as a
// contiguous block after the base vocabulary.

#include <cctype>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "covt/config.hpp"
#include "covt/errors.hpp"

namespace covt {

constexpr int kBaseVocab = 512;

struct VisualTokenInfo {
  Group group;
  int index;
};

class Vocab {
 public:
  explicit Vocab(const TokenSchema& schema) : schema_(schema) {
    static const char* kWords[] = {
        "<pad>", "<unk>", "<eos>", "there", "are", "is", "the", "a", "an", "in",
        "image", "shapes", "shape", "how", "many", "what", "kind", "of",
        "closest", "to", "camera", "this", "for", "generate", "visual",
        "thinking", "tokens", "rect", "disk", "none", "answer", "question",
        "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "?", ".", ",", ":",
    };
    for (const char* w : kWords) push(w);
    while (static_cast<int>(id_to_tok_.size()) < kBaseVocab)
      push("w" + std::to_string(id_to_tok_.size()));
    image_id_ = push("<image>");
    think_open_id_ = push("<think>");
    think_close_id_ = push("</think>");
    first_visual_id_ = static_cast<int>(id_to_tok_.size());
    for (const auto& gs : schema_.groups)
      for (int i = 0; i < gs.count; ++i) {
        visual_info_.push_back({gs.group, i});
        push(schema_.literal(gs.group, i));
      }
  }

  int size() const { return static_cast<int>(id_to_tok_.size()); }
  int pad_id() const { return 0; }
  int unk_id() const { return 1; }
  int eos_id() const { return 2; }
  int image_id() const { return image_id_; }
  int think_open_id() const { return think_open_id_; }
  int think_close_id() const { return think_close_id_; }

  int id(const std::string& tok) const {
    auto it = tok_to_id_.find(tok);
    return it == tok_to_id_.end() ? unk_id() : it->second;
  }

  const std::string& token(int id) const { return id_to_tok_.at(id); }

  std::optional<VisualTokenInfo> visual_info(int id) const {
    if (id < first_visual_id_ || id >= first_visual_id_ + static_cast<int>(visual_info_.size()))
      return std::nullopt;
    return visual_info_[id - first_visual_id_];
  }

  int visual_id(Group g, int index) const { return id(schema_.literal(g, index)); }

  // Whitespace-separated words; `<...>` runs are matched as special tokens
  // even when adjacent to each other.
  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    size_t i = 0;
    while (i < text.size()) {
      if (std::isspace(static_cast<unsigned char>(text[i]))) {
        ++i;
        continue;
      }
      if (text[i] == '<') {
        size_t close = text.find('>', i);
        if (close != std::string::npos) {
          std::string cand = text.substr(i, close - i + 1);
          auto it = tok_to_id_.find(cand);
          if (it != tok_to_id_.end()) {
            ids.push_back(it->second);
            i = close + 1;
            continue;
          }
        }
      }
      size_t end = i;
      while (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end])) &&
             text[end] != '<')
        ++end;
      ids.push_back(id(text.substr(i, end - i)));
      i = end;
    }
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int t : ids) {
      const std::string& s = token(t);
      bool special = !s.empty() && s[0] == '<';
      if (!out.empty() && !special && out.back() != '>') out += ' ';
      if (!out.empty() && !special && out.back() == '>') out += ' ';
      out += s;
    }
    return out;
  }

  const TokenSchema& schema() const { return schema_; }

 private:
  int push(const std::string& tok) {
    int id = static_cast<int>(id_to_tok_.size());
    id_to_tok_.push_back(tok);
    tok_to_id_[tok] = id;
    return id;
  }

  TokenSchema schema_;
  std::vector<std::string> id_to_tok_;
  std::unordered_map<std::string, int> tok_to_id_;
  std::vector<VisualTokenInfo> visual_info_;
  int image_id_ = 0, think_open_id_ = 0, think_close_id_ = 0, first_visual_id_ = 0;
};

}  // namespace covt
