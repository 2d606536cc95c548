#include "reslab/corpus.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace reslab {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

// Uniform double in [0, 1) from the top 53 bits; stable across stdlibs.
double unit_uniform(std::mt19937_64& rng) {
  return double(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

void Corpus::validate(int vocab) const {
  double sum = 0;
  for (const auto& d : domains) {
    if (d.weight < 0)
      throw ConfigError("corpus: negative weight for domain " + d.name);
    sum += d.weight;
    if (d.weight > 0 && d.tokens.empty())
      throw DataError("corpus: domain " + d.name + " is empty but has weight");
    for (uint32_t t : d.tokens)
      if (t >= uint32_t(vocab))
        throw DataError("corpus: token " + std::to_string(t) + " in domain " +
                        d.name + " exceeds vocab " + std::to_string(vocab));
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("corpus: weights sum to " + std::to_string(sum) +
                      ", expected 1");
}

void write_tokens(const std::string& path, const std::vector<uint32_t>& tokens,
                  uint32_t vocab) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("write_tokens: cannot open " + path);
  os.write("RTK1", 4);
  put_u32(os, kTokenFileVersion);
  put_u32(os, vocab);
  put_u32(os, static_cast<uint32_t>(tokens.size()));
  for (uint32_t t : tokens) put_u32(os, t);
  if (!os) throw DataError("write_tokens: write failed for " + path);
}

TokenFile read_tokens(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("read_tokens: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RTK1", 4) != 0)
    throw DataError("read_tokens: bad magic in " + path);
  uint32_t version = get_u32(is);
  if (version != kTokenFileVersion)
    throw DataError("read_tokens: unsupported version " +
                    std::to_string(version) + " in " + path);
  TokenFile f;
  f.vocab = get_u32(is);
  uint32_t count = get_u32(is);
  f.tokens.resize(count);
  for (uint32_t i = 0; i < count; ++i) f.tokens[i] = get_u32(is);
  if (!is) throw DataError("read_tokens: truncated file " + path);
  for (uint32_t t : f.tokens)
    if (t >= f.vocab)
      throw DataError("read_tokens: token " + std::to_string(t) +
                      " exceeds declared vocab in " + path);
  return f;
}

std::vector<uint32_t> encode_bytes(const std::string& text) {
  std::vector<uint32_t> out;
  out.reserve(text.size() + 2);
  out.push_back(kBos);
  for (unsigned char c : text) out.push_back(c);
  out.push_back(kEos);
  return out;
}

std::string decode_bytes(const std::vector<uint32_t>& tokens) {
  std::string out;
  for (uint32_t t : tokens)
    if (t < 256) out.push_back(static_cast<char>(t));
  return out;
}

std::vector<uint32_t> gen_repeat(int64_t size, int period, uint64_t seed,
                                 int vocab) {
  if (period < 1) throw ConfigError("gen_repeat: period must be >= 1");
  if (size < period) throw ConfigError("gen_repeat: size below one period");
  std::mt19937_64 rng(seed);
  std::vector<uint32_t> pattern(period);
  for (auto& t : pattern) t = uint32_t(rng() % uint64_t(vocab));
  std::vector<uint32_t> out(size);
  for (int64_t i = 0; i < size; ++i) out[i] = pattern[i % period];
  return out;
}

std::vector<uint32_t> gen_markov(int64_t size,
                                 const std::vector<std::vector<double>>& transition,
                                 uint64_t seed) {
  size_t s = transition.size();
  if (s < 2) throw ConfigError("gen_markov: need at least 2 states");
  for (const auto& row : transition) {
    if (row.size() != s)
      throw ConfigError("gen_markov: transition matrix must be square");
    double sum = 0;
    for (double p : row) {
      if (p < 0) throw ConfigError("gen_markov: negative transition probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ConfigError("gen_markov: transition row does not sum to 1");
  }
  std::mt19937_64 rng(seed);
  std::vector<uint32_t> out(size);
  uint32_t state = uint32_t(rng() % s);
  for (int64_t i = 0; i < size; ++i) {
    out[i] = state;
    double u = unit_uniform(rng);
    double acc = 0;
    uint32_t next = uint32_t(s) - 1;
    for (size_t j = 0; j < s; ++j) {
      acc += transition[state][j];
      if (u < acc) {
        next = uint32_t(j);
        break;
      }
    }
    state = next;
  }
  return out;
}

std::vector<std::vector<double>> default_markov_chain(uint64_t seed, int states) {
  // Dirichlet-like rows: exponential draws, normalized. Sharpen the diagonal
  // so sequences have learnable short-range structure.
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> m(states, std::vector<double>(states));
  for (int i = 0; i < states; ++i) {
    double sum = 0;
    for (int j = 0; j < states; ++j) {
      double e = -std::log(1.0 - unit_uniform(rng));
      if (j == (i + 1) % states) e += 4.0;
      m[i][j] = e;
      sum += e;
    }
    for (int j = 0; j < states; ++j) m[i][j] /= sum;
  }
  return m;
}

Corpus gen_mixture(int64_t tokens_per_domain, uint64_t seed) {
  struct Spec {
    const char* name;
    double weight;
  };
  static const Spec specs[] = {
      {"commoncrawl", 0.50}, {"c4", 0.20},    {"github", 0.10},
      {"books", 0.05},       {"arxiv", 0.05}, {"wikipedia", 0.05},
      {"stackexchange", 0.05},
  };
  Corpus c;
  uint64_t ds = seed;
  for (const auto& sp : specs) {
    Domain d;
    d.name = sp.name;
    d.weight = sp.weight;
    // Vary chain size per domain for distinct entropy profiles.
    int states = 4 + int(ds % 5) * 2;
    d.tokens = gen_markov(tokens_per_domain, default_markov_chain(ds + 17, states),
                          ds + 31);
    c.domains.push_back(std::move(d));
    ds += 101;
  }
  return c;
}

}  // namespace reslab
