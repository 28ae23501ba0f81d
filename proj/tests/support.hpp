#pragma once

// Shared fixtures for the unit tests: small random models and probe sets.

#include "lsdm/corpus.hpp"
#include "lsdm/model.hpp"
#include "lsdm/rng.hpp"
#include "lsdm/train.hpp"

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace lsdm::testing {

inline ModelConfig small_config(int layers = 2, int d_model = 16, int vocab = 25, int d_ff = 32) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d_model;
  c.n_heads = 4;
  c.d_ff = d_ff;
  c.vocab_size = vocab;
  c.max_seq = 24;
  return c;
}

// init_params gives tiny residual contributions; inflate them so the layers
// actually matter in gradient and tracing checks.
inline ModelParams random_model(const ModelConfig& c, std::uint64_t seed, float scale = 6.0f) {
  auto p = init_params(c, seed);
  for (auto& L : p.layers) {
    L.w_proj *= scale;
    L.w_out *= scale;
    L.w_fc *= scale;
  }
  p.tok_embedding *= scale;
  return p;
}

inline Vocabulary word_vocab() {
  return Vocabulary({".", "a", "at", "because", "cat", "dog", "engineer", "he", "home", "late", "nurse",
                     "park", "ran", "said", "she", "so", "stayed", "teacher", "the", "to", "was", "went",
                     "worked", "pilot", "that"});
}

inline std::vector<BiasProbe> some_probes(const Vocabulary& v, int n) {
  const std::vector<std::string> templ{"the {} said that", "the {} worked late because", "the {} went home so",
                                       "a {} ran to the park because", "the {} was at home so"};
  const std::vector<std::string> occ{"nurse", "engineer", "teacher", "pilot"};
  std::vector<BiasProbe> out;
  for (int i = 0; out.size() < static_cast<std::size_t>(n); ++i)
    out.push_back(make_probe(v, templ[i % templ.size()], occ[(i / templ.size()) % occ.size()]));
  return out;
}

inline TokenIds random_tokens(int n, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> u(0, vocab - 1);
  TokenIds t(n);
  for (auto& x : t) x = u(rng);
  return t;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("lsdm_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace lsdm::testing
