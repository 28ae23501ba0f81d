#pragma once

// Tokenization, occupation lexicon, bias probes and the synthetic corpora that
// give desk-scale experiments a known ground-truth bias.

#include "lsdm/model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace lsdm {

// ---------------------------------------------------------------------------
// Tokenizer

// Lowercases and splits on whitespace; punctuation characters become their own
// words. Throws std::invalid_argument on characters outside [a-z'.,!?;:].
std::vector<std::string> split_words(std::string_view text);

class Vocabulary {
 public:
  Vocabulary() = default;
  // Words must be unique and non-empty.
  explicit Vocabulary(std::vector<std::string> words);

  int size() const { return static_cast<int>(words_.size()); }
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  int id(const std::string& word) const;  // throws std::out_of_range
  const std::string& word(int id) const;
  const std::vector<std::string>& words() const { return words_; }

  TokenIds tokenize(std::string_view text) const;
  std::string detokenize(std::span<const int> ids) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// Sorted, deduplicated word list covering every sentence.
std::vector<std::string> collect_words(const std::vector<std::string>& sentences);

// ---------------------------------------------------------------------------
// Lexicon and templates

enum class GenderLabel { female, male, neutral };

std::string to_string(GenderLabel g);
GenderLabel gender_label_from_string(const std::string& s);

struct LexiconEntry {
  std::string surface;
  GenderLabel label;
};

struct Lexicon {
  std::vector<LexiconEntry> entries;

  std::size_t count(GenderLabel label) const;
  bool contains(const std::string& surface) const;
  std::vector<LexiconEntry> with_label(GenderLabel label) const;
  std::vector<LexiconEntry> gendered() const;
  // First n entries of each label, in file order.
  Lexicon take(std::size_t n_female, std::size_t n_male, std::size_t n_neutral) const;
};

// TSV "surface<TAB>label"; '#' comments and blank lines skipped. Errors carry
// the source name and line number.
Lexicon parse_lexicon(std::string_view text, const std::string& source = "<lexicon>");
Lexicon load_lexicon(const std::filesystem::path& path);
std::string format_lexicon(const Lexicon& lexicon);

struct TemplateSet {
  std::vector<std::string> templates;
  std::string instantiate(std::size_t i, const std::string& occupation) const;
};

inline constexpr std::string_view kPlaceholder = "{}";

// One template per line, each with exactly one "{}".
TemplateSet parse_templates(std::string_view text, const std::string& source = "<templates>");
TemplateSet load_templates(const std::filesystem::path& path);

std::filesystem::path default_data_dir();

// ---------------------------------------------------------------------------
// Probes

struct Span {
  int begin = 0;
  int end = 0;  // exclusive
  int size() const { return end - begin; }
  bool operator==(const Span&) const = default;
};

struct BiasProbe {
  std::string template_text;
  std::string occupation;
  std::string text;
  TokenIds tokens;
  Span occupation_span;
  int he_id = -1;
  int she_id = -1;
};

// First occurrence of `needle` inside `haystack`.
std::optional<Span> find_span(std::span<const int> haystack, std::span<const int> needle);

BiasProbe make_probe(const Vocabulary& vocab, const std::string& templ, const std::string& occupation);

// Probe over free text; the span is the first occurrence of the occupation.
BiasProbe probe_from_text(const Vocabulary& vocab, const std::string& text, const std::string& occupation);

// Every (template, occupation) pair, template-major.
std::vector<BiasProbe> make_probes(const Vocabulary& vocab, const TemplateSet& templates,
                                   const std::vector<std::string>& occupations);

// JSON-lines {template, occupation, text}.
void write_probe_dataset(const std::filesystem::path& path, const std::vector<BiasProbe>& probes);
std::vector<BiasProbe> load_probe_dataset(const std::filesystem::path& path, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SynthEntryStats {
  std::string occupation;
  GenderLabel label;
  int she = 0;
  int he = 0;
  int other = 0;  // continuation with a non-pronoun subject
  double she_fraction() const { return she + he > 0 ? static_cast<double>(she) / (she + he) : 0.0; }
};

struct SynthOptions {
  // Probability that the clause after the template starts with a neutral noun
  // phrase rather than a pronoun.
  double other_subject_prob = 0.2;
};

struct SynthCorpus {
  std::vector<std::string> sentences;
  std::vector<SynthEntryStats> stats;  // lexicon order
};

// For each lexicon entry, `sentences_per_entry` sentences "template(occ) X tail ."
// where X is "she" with probability bias_ratio for female-skewed entries
// (mirrored for male-skewed, 0.5 for neutral) unless a neutral noun phrase is
// drawn. Deterministic per seed.
SynthCorpus synth_biased_corpus(const Lexicon& lexicon, double bias_ratio, int sentences_per_entry,
                                std::uint64_t seed, const TemplateSet& templates,
                                const SynthOptions& options = {});

// Occupation-free sentences ("the dog ran to the park .") used for capability
// probing and second-moment statistics.
std::vector<std::string> synth_neutral_corpus(int n_sentences, std::uint64_t seed);

// Builds training sequences: each sentence, preceded with probability
// `pair_prob` by another random sentence when the pair fits in max_len.
std::vector<TokenIds> pack_sequences(const std::vector<TokenIds>& sentences, int max_len,
                                     double pair_prob, std::uint64_t seed);

// Plain text, one sentence per line.
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);
std::vector<std::string> read_lines(const std::filesystem::path& path);

std::vector<TokenIds> tokenize_all(const Vocabulary& vocab, const std::vector<std::string>& lines);

}  // namespace lsdm
