// Token-file IO and synthetic corpus generation.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "reslab/tensor.hpp"

namespace reslab {

struct Domain {
  std::string name;
  std::vector<uint32_t> tokens;
  double weight = 0.0;
};

struct Corpus {
  std::vector<Domain> domains;
  void validate(int vocab) const;
};

// Token file layout: 16-byte header (magic "RTK1", u32 version, u32 vocab,
// u32 token count) followed by little-endian u32 ids.
inline constexpr uint32_t kTokenFileVersion = 1;

void write_tokens(const std::string& path, const std::vector<uint32_t>& tokens,
                  uint32_t vocab);

struct TokenFile {
  std::vector<uint32_t> tokens;
  uint32_t vocab = 0;
};
TokenFile read_tokens(const std::string& path);

// Byte-level vocabulary: 256 byte values plus BOS, EOS, PAD.
inline constexpr int kByteVocab = 259;
inline constexpr uint32_t kBos = 256, kEos = 257, kPad = 258;

std::vector<uint32_t> encode_bytes(const std::string& text);
std::string decode_bytes(const std::vector<uint32_t>& tokens);

// Deterministic synthetic domains.
std::vector<uint32_t> gen_repeat(int64_t size, int period, uint64_t seed,
                                 int vocab = kByteVocab);
std::vector<uint32_t> gen_markov(int64_t size,
                                 const std::vector<std::vector<double>>& transition,
                                 uint64_t seed);

// Default 8-state chain used by gen_mixture; rows sum to 1.
std::vector<std::vector<double>> default_markov_chain(uint64_t seed, int states = 8);

// Seven domains with the web-corpus proportions used by the sampler:
// 0.5 / 0.2 / 0.1 / 0.05 x 4.
Corpus gen_mixture(int64_t tokens_per_domain, uint64_t seed);

}  // namespace reslab
