#include "lsdm/corpus.hpp"

#include "lsdm/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace lsdm {

// ---------------------------------------------------------------------------
// Tokenizer

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    char ch = text[i];
    if (ch >= 'A' && ch <= 'Z') ch = static_cast<char>(ch - 'A' + 'a');
    if ((ch >= 'a' && ch <= 'z') || ch == '\'') {
      cur.push_back(ch);
    } else if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
      flush();
    } else if (ch == '.' || ch == ',' || ch == '!' || ch == '?' || ch == ';' || ch == ':') {
      flush();
      out.emplace_back(1, ch);
    } else {
      std::ostringstream os;
      os << "character '" << text[i] << "' at offset " << i << " is outside the corpus alphabet";
      throw std::invalid_argument(os.str());
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i].empty()) throw std::invalid_argument("vocabulary: empty word");
    if (!index_.emplace(words_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("vocabulary: duplicate word '" + words_[i] + "'");
  }
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw std::out_of_range("word '" + word + "' not in vocabulary");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " out of range");
  return words_[id];
}

TokenIds Vocabulary::tokenize(std::string_view text) const {
  TokenIds ids;
  for (const auto& w : split_words(text)) {
    auto it = index_.find(w);
    if (it == index_.end()) throw std::invalid_argument("word '" + w + "' not in vocabulary");
    ids.push_back(it->second);
  }
  return ids;
}

std::string Vocabulary::detokenize(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += word(ids[i]);
  }
  return out;
}

std::vector<std::string> collect_words(const std::vector<std::string>& sentences) {
  std::set<std::string> words;
  for (const auto& s : sentences)
    for (auto& w : split_words(s)) words.insert(std::move(w));
  return {words.begin(), words.end()};
}

// ---------------------------------------------------------------------------
// Lexicon and templates

std::string to_string(GenderLabel g) {
  switch (g) {
    case GenderLabel::female: return "female";
    case GenderLabel::male: return "male";
    case GenderLabel::neutral: return "neutral";
  }
  return "?";
}

GenderLabel gender_label_from_string(const std::string& s) {
  if (s == "female") return GenderLabel::female;
  if (s == "male") return GenderLabel::male;
  if (s == "neutral") return GenderLabel::neutral;
  throw std::invalid_argument("unknown gender label '" + s + "'");
}

std::size_t Lexicon::count(GenderLabel label) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const auto& e) { return e.label == label; }));
}

bool Lexicon::contains(const std::string& surface) const {
  return std::any_of(entries.begin(), entries.end(),
                     [&](const auto& e) { return e.surface == surface; });
}

std::vector<LexiconEntry> Lexicon::with_label(GenderLabel label) const {
  std::vector<LexiconEntry> out;
  for (const auto& e : entries)
    if (e.label == label) out.push_back(e);
  return out;
}

std::vector<LexiconEntry> Lexicon::gendered() const {
  std::vector<LexiconEntry> out;
  for (const auto& e : entries)
    if (e.label != GenderLabel::neutral) out.push_back(e);
  return out;
}

Lexicon Lexicon::take(std::size_t n_female, std::size_t n_male, std::size_t n_neutral) const {
  Lexicon out;
  std::size_t f = 0, m = 0, n = 0;
  for (const auto& e : entries) {
    std::size_t& used = e.label == GenderLabel::female ? f : e.label == GenderLabel::male ? m : n;
    const std::size_t cap =
        e.label == GenderLabel::female ? n_female : e.label == GenderLabel::male ? n_male : n_neutral;
    if (used < cap) {
      out.entries.push_back(e);
      ++used;
    }
  }
  if (f < n_female || m < n_male || n < n_neutral)
    throw std::invalid_argument("lexicon has too few entries for the requested subset");
  return out;
}

Lexicon parse_lexicon(std::string_view text, const std::string& source) {
  Lexicon lex;
  std::set<std::string> seen;
  std::istringstream is{std::string(text)};
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& why) {
    throw std::runtime_error(source + ":" + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      fail("expected 'surface<TAB>label'");
    std::string surface = line.substr(0, tab);
    const std::string label = line.substr(tab + 1);
    if (surface.empty()) fail("empty surface form");
    std::vector<std::string> words;
    try {
      words = split_words(surface);
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
    std::string canonical;
    for (const auto& w : words) canonical += (canonical.empty() ? "" : " ") + w;
    GenderLabel g{};
    try {
      g = gender_label_from_string(label);
    } catch (const std::invalid_argument& e) {
      fail(e.what());
    }
    if (!seen.insert(canonical).second) fail("duplicate surface form '" + canonical + "'");
    lex.entries.push_back({canonical, g});
  }
  if (lex.entries.empty()) throw std::runtime_error(source + ": lexicon is empty");
  return lex;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return os;
}

std::size_t count_placeholders(const std::string& t) {
  std::size_t n = 0;
  for (auto p = t.find(kPlaceholder); p != std::string::npos; p = t.find(kPlaceholder, p + 2)) ++n;
  return n;
}

}  // namespace

Lexicon load_lexicon(const std::filesystem::path& path) {
  return parse_lexicon(read_file(path), path.string());
}

std::string format_lexicon(const Lexicon& lexicon) {
  std::string out = "# surface\tlabel (female | male | neutral)\n";
  for (const auto& e : lexicon.entries) out += e.surface + "\t" + to_string(e.label) + "\n";
  return out;
}

std::string TemplateSet::instantiate(std::size_t i, const std::string& occupation) const {
  std::string t = templates.at(i);
  const auto p = t.find(kPlaceholder);
  if (p == std::string::npos || count_placeholders(t) != 1)
    throw std::invalid_argument("template must contain exactly one placeholder: " + t);
  return t.replace(p, kPlaceholder.size(), occupation);
}

TemplateSet parse_templates(std::string_view text, const std::string& source) {
  TemplateSet set;
  std::istringstream is{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (count_placeholders(line) != 1)
      throw std::runtime_error(source + ":" + std::to_string(lineno) +
                               ": template must contain exactly one placeholder");
    set.templates.push_back(line);
  }
  if (set.templates.empty()) throw std::runtime_error(source + ": no templates");
  return set;
}

TemplateSet load_templates(const std::filesystem::path& path) {
  return parse_templates(read_file(path), path.string());
}

std::filesystem::path default_data_dir() { return LSDM_DATA_DIR; }

// ---------------------------------------------------------------------------
// Probes

std::optional<Span> find_span(std::span<const int> haystack, std::span<const int> needle) {
  if (needle.empty() || needle.size() > haystack.size()) return std::nullopt;
  for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    if (std::equal(needle.begin(), needle.end(), haystack.begin() + static_cast<long>(i)))
      return Span{static_cast<int>(i), static_cast<int>(i + needle.size())};
  }
  return std::nullopt;
}

BiasProbe make_probe(const Vocabulary& vocab, const std::string& templ, const std::string& occupation) {
  const auto n = count_placeholders(templ);
  if (n != 1) {
    throw std::invalid_argument("make_probe: template has " + std::to_string(n) +
                                " placeholders, expected 1: " + templ);
  }
  BiasProbe p;
  p.template_text = templ;
  p.occupation = occupation;
  TemplateSet one{{templ}};
  p.text = one.instantiate(0, occupation);
  p.tokens = vocab.tokenize(p.text);
  const auto prefix_len = vocab.tokenize(templ.substr(0, templ.find(kPlaceholder))).size();
  const auto occ = vocab.tokenize(occupation);
  if (occ.empty()) throw std::invalid_argument("make_probe: empty occupation");
  p.occupation_span = {static_cast<int>(prefix_len), static_cast<int>(prefix_len + occ.size())};
  p.he_id = vocab.id("he");
  p.she_id = vocab.id("she");
  return p;
}

BiasProbe probe_from_text(const Vocabulary& vocab, const std::string& text, const std::string& occupation) {
  BiasProbe p;
  p.occupation = occupation;
  p.text = text;
  p.tokens = vocab.tokenize(text);
  const auto occ = vocab.tokenize(occupation);
  const auto span = find_span(p.tokens, occ);
  if (!span) throw std::invalid_argument("occupation '" + occupation + "' not found in '" + text + "'");
  p.occupation_span = *span;
  p.he_id = vocab.id("he");
  p.she_id = vocab.id("she");
  return p;
}

std::vector<BiasProbe> make_probes(const Vocabulary& vocab, const TemplateSet& templates,
                                   const std::vector<std::string>& occupations) {
  std::vector<BiasProbe> out;
  for (const auto& t : templates.templates)
    for (const auto& o : occupations) out.push_back(make_probe(vocab, t, o));
  return out;
}

void write_probe_dataset(const std::filesystem::path& path, const std::vector<BiasProbe>& probes) {
  auto os = open_out(path);
  for (const auto& p : probes) {
    nlohmann::ordered_json j;
    j["template"] = p.template_text;
    j["occupation"] = p.occupation;
    j["text"] = p.text;
    os << j.dump() << "\n";
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<BiasProbe> load_probe_dataset(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open probe dataset " + path.string());
  std::vector<BiasProbe> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      BiasProbe p = make_probe(vocab, j.at("template").get<std::string>(),
                               j.at("occupation").get<std::string>());
      if (j.contains("text") && j.at("text").get<std::string>() != p.text)
        throw std::runtime_error("text does not match template instantiation");
      out.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

namespace {

const std::vector<std::string> kTails = {"was busy",    "had to work",   "felt sick",     "wanted to rest",
                                         "was happy",   "lost the keys", "missed the bus", "needed help"};
const std::vector<std::string> kOtherSubjects = {"the dog", "the cat", "the car", "the phone"};

template <class C>
const auto& pick(const C& c, Rng& rng) {
  return c[static_cast<std::size_t>(uniform01(rng) * static_cast<double>(c.size()))];
}

}  // namespace

SynthCorpus synth_biased_corpus(const Lexicon& lexicon, double bias_ratio, int sentences_per_entry,
                                std::uint64_t seed, const TemplateSet& templates,
                                const SynthOptions& options) {
  if (lexicon.entries.empty()) throw std::invalid_argument("synth_biased_corpus: empty lexicon");
  if (!(bias_ratio >= 0.5 && bias_ratio <= 1.0))
    throw std::invalid_argument("synth_biased_corpus: bias_ratio must be in [0.5, 1]");
  if (sentences_per_entry < 1) throw std::invalid_argument("synth_biased_corpus: sentences_per_entry < 1");
  if (templates.templates.empty()) throw std::invalid_argument("synth_biased_corpus: no templates");

  SynthCorpus out;
  for (std::size_t e = 0; e < lexicon.entries.size(); ++e) {
    const auto& entry = lexicon.entries[e];
    Rng rng(derive_seed(seed, {0x5e17, e}));
    const double p_she = entry.label == GenderLabel::female ? bias_ratio
                         : entry.label == GenderLabel::male ? 1.0 - bias_ratio
                                                            : 0.5;
    SynthEntryStats st{entry.surface, entry.label};
    for (int s = 0; s < sentences_per_entry; ++s) {
      const std::size_t t = static_cast<std::size_t>(uniform01(rng) * templates.templates.size());
      std::string sentence = templates.instantiate(t, entry.surface) + " ";
      if (uniform01(rng) < options.other_subject_prob) {
        sentence += pick(kOtherSubjects, rng);
        ++st.other;
      } else if (uniform01(rng) < p_she) {
        sentence += "she";
        ++st.she;
      } else {
        sentence += "he";
        ++st.he;
      }
      sentence += " " + pick(kTails, rng) + " .";
      out.sentences.push_back(std::move(sentence));
    }
    out.stats.push_back(st);
  }
  return out;
}

std::vector<std::string> synth_neutral_corpus(int n_sentences, std::uint64_t seed) {
  struct Verb {
    const char* word;
    const char* prep;
    std::vector<std::string> places;
  };
  static const std::vector<std::string> animals = {"dog", "cat", "bird", "horse", "fox", "rabbit"};
  static const std::vector<Verb> verbs = {
      {"ran", "to", {"park", "river", "house"}},
      {"swam", "in", {"lake", "river", "pool"}},
      {"slept", "on", {"bed", "sofa", "grass"}},
      {"sat", "under", {"tree", "table", "bridge"}},
      {"jumped", "over", {"fence", "wall", "log"}},
      {"walked", "to", {"park", "house", "shop"}},
  };
  if (n_sentences < 0) throw std::invalid_argument("synth_neutral_corpus: negative count");
  Rng rng(derive_seed(seed, {0x4e07}));
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(n_sentences));
  for (int s = 0; s < n_sentences; ++s) {
    const std::size_t a = static_cast<std::size_t>(uniform01(rng) * animals.size());
    // Each animal mostly keeps to two habitual verbs.
    std::size_t v = uniform01(rng) < 0.8 ? (a + (uniform01(rng) < 0.5 ? 0 : 1)) % verbs.size()
                                         : static_cast<std::size_t>(uniform01(rng) * verbs.size());
    const Verb& verb = verbs[v];
    out.push_back("the " + animals[a] + " " + verb.word + " " + verb.prep + " the " +
                  pick(verb.places, rng) + " .");
  }
  return out;
}

std::vector<TokenIds> pack_sequences(const std::vector<TokenIds>& sentences, int max_len,
                                     double pair_prob, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x9ac4}));
  std::vector<TokenIds> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) {
    if (static_cast<int>(s.size()) > max_len)
      throw std::invalid_argument("pack_sequences: sentence longer than max_len");
    const bool pair = uniform01(rng) < pair_prob;
    const auto& other = sentences[static_cast<std::size_t>(uniform01(rng) * sentences.size())];
    if (pair && static_cast<int>(other.size() + s.size()) <= max_len) {
      TokenIds seq = other;
      seq.insert(seq.end(), s.begin(), s.end());
      out.push_back(std::move(seq));
    } else {
      out.push_back(s);
    }
  }
  return out;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  auto os = open_out(path);
  for (const auto& l : lines) os << l << "\n";
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

std::vector<TokenIds> tokenize_all(const Vocabulary& vocab, const std::vector<std::string>& lines) {
  std::vector<TokenIds> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(vocab.tokenize(l));
  return out;
}

}  // namespace lsdm
