#pragma once

// Byte-level tokenizer: ids 0..255 are raw bytes, followed by BOS and EOS.

#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

#include "alct/errors.hpp"

namespace alct {

class ByteTokenizer {
 public:
  static constexpr int kBos = 256;
  static constexpr int kEos = 257;
  static constexpr int kVocabSize = 258;

  static std::vector<int> encode(std::string_view text, bool add_bos = false) {
    std::vector<int> ids;
    ids.reserve(text.size() + 1);
    if (add_bos) ids.push_back(kBos);
    for (unsigned char c : text) ids.push_back(int(c));
    return ids;
  }

  /// Drops special tokens.
  static std::string decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      check(id);
      if (id < 256) out.push_back(char(id));
    }
    return out;
  }

  /// Printable rendering of a single token for reports.
  static std::string display(int id) {
    check(id);
    if (id == kBos) return "<bos>";
    if (id == kEos) return "<eos>";
    if (id == '\n') return "\\n";
    if (id == '\t') return "\\t";
    if (id < 32 || id >= 127) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "<%02x>", id);
      return buf;
    }
    return std::string(1, char(id));
  }

 private:
  static void check(int id) {
    if (id < 0 || id >= kVocabSize) throw InvalidInput("token id outside the byte vocabulary: " + std::to_string(id));
  }
};

}  // namespace alct
