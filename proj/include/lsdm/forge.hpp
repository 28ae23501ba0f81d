#pragma once

// Automatic bias-sentence generation: sample continuations of "the {occ}",
// filter by perplexity, keep the sentences with the largest he/she gap.

#include "lsdm/corpus.hpp"
#include "lsdm/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace lsdm {

enum class PplDirection { highest, lowest };
std::string to_string(PplDirection d);
PplDirection ppl_direction_from_string(const std::string& s);

struct ForgeConfig {
  std::vector<int> lengths{8, 9, 10, 11};  // d, counted including the prompt
  int fan_out = 600;
  int ppl_keep = 50;
  int bias_keep = 5;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  PplDirection direction = PplDirection::highest;

  void validate() const;
};

struct ForgeSentence {
  std::string occupation;
  int d = 0;
  TokenIds tokens;
  std::string text;
  double p_gb = 0.0;
  double ppl = 0.0;
};

struct ForgeSkip {
  std::string occupation;
  std::string reason;
};

struct ForgeResult {
  std::vector<ForgeSentence> sentences;  // occupation-major, then d, then rank
  std::vector<ForgeSkip> skipped;
};

// f sequences of exactly d tokens, each starting with "the {occupation}".
std::vector<TokenIds> sample_continuations(const ModelParams& params, const Vocabulary& vocab,
                                           const std::string& occupation, int d, int f, double temperature,
                                           std::uint64_t seed);

struct Ranked {
  std::size_t index;  // into the input list
  double score;
};

// Sorted by perplexity in `direction`, ties by index; first `keep` returned.
std::vector<Ranked> rank_perplexity(const ModelParams& params, const std::vector<TokenIds>& sentences,
                                    std::size_t keep, PplDirection direction);

// Next-token P(gb) after each sentence; top k, ties by index.
std::vector<Ranked> select_top_bias(const ModelParams& params, const std::vector<TokenIds>& sentences,
                                    std::size_t k, int he_id, int she_id);

ForgeResult build_bias_corpus(const ModelParams& params, const Vocabulary& vocab,
                              const std::vector<std::string>& occupations, const ForgeConfig& config);

// JSON lines {occupation, d, text, p_gb}.
std::string forge_jsonl(const ForgeResult& result);
std::string forge_manifest(const ForgeResult& result, const ForgeConfig& config,
                           const std::string& config_echo = "");
void write_forge_corpus(const std::filesystem::path& corpus_path, const std::filesystem::path& manifest_path,
                        const ForgeResult& result, const ForgeConfig& config, const std::string& config_echo = "");

struct ForgeRecord {
  std::string occupation;
  int d = 0;
  std::string text;
  double p_gb = 0.0;
};
std::vector<ForgeRecord> load_forge_corpus(const std::filesystem::path& path);

}  // namespace lsdm
