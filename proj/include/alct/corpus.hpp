#pragma once

// Token corpus container and deterministic training windows.
//
// File layout (little-endian): "ALCT", u32 version, u32 vocab_size,
// u64 token count, then u32 token ids.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "alct/errors.hpp"

namespace alct {

namespace io {

static_assert(std::endian::native == std::endian::little, "only little-endian hosts are supported");

template <class U>
void write_pod(std::ostream& out, const U& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U read_pod(std::istream& in, const std::string& what) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw FormatError("truncated file while reading " + what);
  return v;
}

}  // namespace io

struct Corpus {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t vocab_size = 0;
  std::vector<std::uint32_t> tokens;

  std::size_t size() const { return tokens.size(); }
};

inline void write_corpus(const std::string& path, const Corpus& corpus) {
  for (auto id : corpus.tokens) {
    if (id >= corpus.vocab_size) throw InvalidInput("token id " + std::to_string(id) + " >= vocab_size");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out.write("ALCT", 4);
  io::write_pod(out, Corpus::kVersion);
  io::write_pod(out, corpus.vocab_size);
  io::write_pod(out, std::uint64_t(corpus.tokens.size()));
  out.write(reinterpret_cast<const char*>(corpus.tokens.data()), std::streamsize(corpus.tokens.size() * 4));
  if (!out) throw Error("failed writing " + path);
}

inline Corpus read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open corpus " + path);
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || std::memcmp(magic.data(), "ALCT", 4) != 0) throw FormatError(path + ": not a corpus file (bad magic)");
  const auto version = io::read_pod<std::uint32_t>(in, "version");
  if (version != Corpus::kVersion) throw FormatError(path + ": unsupported corpus version " + std::to_string(version));
  Corpus c;
  c.vocab_size = io::read_pod<std::uint32_t>(in, "vocab_size");
  const auto count = io::read_pod<std::uint64_t>(in, "token count");
  if (c.vocab_size == 0) throw FormatError(path + ": vocab_size is zero");
  if (count == 0) throw FormatError(path + ": empty payload");
  c.tokens.resize(count);
  in.read(reinterpret_cast<char*>(c.tokens.data()), std::streamsize(count * 4));
  if (!in) throw FormatError(path + ": payload shorter than the header claims");
  for (auto id : c.tokens) {
    if (id >= c.vocab_size) throw FormatError(path + ": token id " + std::to_string(id) + " >= vocab_size");
  }
  return c;
}

/// Non-overlapping windows of `length` tokens; each epoch visits every
/// window once, in file order or in a permutation fixed by (seed, epoch).
class WindowSampler {
 public:
  struct State {
    std::uint64_t epoch = 0;
    std::uint64_t cursor = 0;
  };

  WindowSampler(const Corpus& corpus, int length, std::uint64_t seed, bool shuffle = true)
      : corpus_(&corpus), length_(length), seed_(seed), shuffle_(shuffle) {
    if (length < 2) throw InvalidInput("window length must be >= 2");
    n_windows_ = corpus.size() / std::size_t(length);
    if (n_windows_ == 0) throw InvalidInput("corpus shorter than one window");
    build_order();
  }

  std::size_t window_count() const { return n_windows_; }
  const State& state() const { return state_; }

  void set_state(State s) {
    if (s.cursor > n_windows_) throw InvalidInput("sampler cursor out of range");
    state_ = s;
    build_order();
  }

  std::vector<int> window(std::size_t index) const {
    const auto begin = corpus_->tokens.begin() + std::ptrdiff_t(index * std::size_t(length_));
    return std::vector<int>(begin, begin + length_);
  }

  std::vector<std::vector<int>> next_batch(int batch_size) {
    std::vector<std::vector<int>> out;
    out.reserve(std::size_t(batch_size));
    for (int b = 0; b < batch_size; ++b) {
      if (state_.cursor == n_windows_) {
        ++state_.epoch;
        state_.cursor = 0;
        build_order();
      }
      out.push_back(window(order_[state_.cursor++]));
    }
    return out;
  }

 private:
  void build_order() {
    order_.resize(n_windows_);
    std::iota(order_.begin(), order_.end(), std::size_t(0));
    if (shuffle_) {
      std::mt19937_64 rng(seed_ ^ (0x9E3779B97F4A7C15ull * (state_.epoch + 1)));
      std::shuffle(order_.begin(), order_.end(), rng);
    }
  }

  const Corpus* corpus_;
  int length_;
  std::uint64_t seed_;
  bool shuffle_;
  std::size_t n_windows_ = 0;
  std::vector<std::size_t> order_;
  State state_;
};

/// Deterministic synthetic text mixing predictable prose with arithmetic
/// facts, so token difficulty spans from trivially predictable word endings
/// to random operand digits.
inline std::string synthetic_text(std::size_t bytes, std::uint64_t seed) {
  static const std::array<const char*, 16> subjects{"the cat", "a dog",   "the bird", "my friend", "the old man", "a child",
                                                    "the farmer", "her sister", "the teacher", "a robot", "the king",
                                                    "our team", "the baker", "a student", "the doctor", "his uncle"};
  static const std::array<const char*, 12> verbs{"sees", "likes", "finds", "paints", "carries", "counts",
                                                 "visits", "opens", "cleans", "builds", "reads", "sells"};
  static const std::array<const char*, 12> objects{"the red box", "a green apple", "the small house", "two books",
                                                   "the long road", "a blue door",   "the garden",      "three cups",
                                                   "the river",     "a wooden chair", "the letter",     "some bread"};
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t n) { return std::size_t(rng() % n); };
  std::string out;
  out.reserve(bytes + 64);
  while (out.size() < bytes) {
    switch (pick(3)) {
      case 0: {
        out += subjects[pick(subjects.size())];
        out += ' ';
        out += verbs[pick(verbs.size())];
        out += ' ';
        out += objects[pick(objects.size())];
        out += ". ";
        break;
      }
      case 1: {
        const int a = int(pick(90)) + 10, b = int(pick(90)) + 10;
        out += std::to_string(a) + "+" + std::to_string(b) + "=" + std::to_string(a + b) + "; ";
        break;
      }
      default: {
        const int a = int(pick(9)) + 1, b = int(pick(9)) + 1;
        out += std::to_string(a) + "*" + std::to_string(b) + "=" + std::to_string(a * b) + "; ";
        break;
      }
    }
    if (pick(8) == 0) out += '\n';
  }
  out.resize(bytes);
  return out;
}

}  // namespace alct
