#include "lsdm/forge.hpp"

#include "lsdm/generate.hpp"
#include "lsdm/rng.hpp"
#include "lsdm/trace.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace lsdm {

std::string to_string(PplDirection d) { return d == PplDirection::highest ? "highest" : "lowest"; }

PplDirection ppl_direction_from_string(const std::string& s) {
  if (s == "highest") return PplDirection::highest;
  if (s == "lowest") return PplDirection::lowest;
  throw std::invalid_argument("perplexity direction must be 'highest' or 'lowest', got '" + s + "'");
}

void ForgeConfig::validate() const {
  if (lengths.empty()) throw std::invalid_argument("forge: no lengths");
  for (int d : lengths)
    if (d < 2) throw std::invalid_argument("forge: lengths must be >= 2");
  if (bias_keep < 0 || ppl_keep < bias_keep || fan_out < ppl_keep)
    throw std::invalid_argument("forge: need bias_keep <= ppl_keep <= fan_out");
}

std::vector<TokenIds> sample_continuations(const ModelParams& params, const Vocabulary& vocab,
                                           const std::string& occupation, int d, int f, double temperature,
                                           std::uint64_t seed) {
  const TokenIds prompt = vocab.tokenize("the " + occupation);
  if (d <= static_cast<int>(prompt.size()))
    throw std::invalid_argument("forge: length " + std::to_string(d) + " does not exceed the prompt");
  if (d > params.config.max_seq) throw std::invalid_argument("forge: length exceeds max_seq");
  if (f < 0) throw std::invalid_argument("forge: negative fan-out");
  Rng rng(seed);
  std::vector<TokenIds> out;
  out.reserve(static_cast<std::size_t>(f));
  for (int i = 0; i < f; ++i) out.push_back(sample_sequence(params, prompt, d, temperature, rng));
  return out;
}

namespace {

std::vector<Ranked> top_k(std::vector<Ranked> scored, std::size_t keep, bool descending) {
  std::stable_sort(scored.begin(), scored.end(), [&](const Ranked& a, const Ranked& b) {
    return descending ? a.score > b.score : a.score < b.score;
  });
  scored.resize(keep);
  return scored;
}

}  // namespace

std::vector<Ranked> rank_perplexity(const ModelParams& params, const std::vector<TokenIds>& sentences,
                                    std::size_t keep, PplDirection direction) {
  if (sentences.empty()) throw std::invalid_argument("rank_perplexity: empty input");
  if (keep > sentences.size()) throw std::invalid_argument("rank_perplexity: keep exceeds input size");
  std::vector<Ranked> scored;
  scored.reserve(sentences.size());
  for (std::size_t i = 0; i < sentences.size(); ++i)
    scored.push_back({i, sequence_perplexity(params, sentences[i])});
  return top_k(std::move(scored), keep, direction == PplDirection::highest);
}

std::vector<Ranked> select_top_bias(const ModelParams& params, const std::vector<TokenIds>& sentences,
                                    std::size_t k, int he_id, int she_id) {
  if (sentences.empty()) throw std::invalid_argument("select_top_bias: empty input");
  if (k > sentences.size()) throw std::invalid_argument("select_top_bias: k exceeds input size");
  std::vector<Ranked> scored;
  scored.reserve(sentences.size());
  BiasProbe probe;
  probe.he_id = he_id;
  probe.she_id = she_id;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto res = forward(params, sentences[i]);
    const auto dist = next_token_distribution(res.logits.row(res.logits.rows() - 1).transpose());
    scored.push_back({i, pronoun_probs(dist, probe).gb()});
  }
  return top_k(std::move(scored), k, true);
}

ForgeResult build_bias_corpus(const ModelParams& params, const Vocabulary& vocab,
                              const std::vector<std::string>& occupations, const ForgeConfig& config) {
  config.validate();
  if (occupations.empty()) throw std::invalid_argument("forge: no occupations");
  const int he = vocab.id("he"), she = vocab.id("she");
  ForgeResult result;
  for (std::size_t o = 0; o < occupations.size(); ++o) {
    std::vector<ForgeSentence> kept;
    try {
      for (int d : config.lengths) {
        const auto seed = derive_seed(config.seed, {o, static_cast<std::uint64_t>(d)});
        const auto pool = sample_continuations(params, vocab, occupations[o], d, config.fan_out,
                                               config.temperature, seed);
        const auto by_ppl = rank_perplexity(params, pool, static_cast<std::size_t>(config.ppl_keep),
                                            config.direction);
        std::vector<TokenIds> survivors;
        for (const auto& r : by_ppl) survivors.push_back(pool[r.index]);
        const auto chosen =
            select_top_bias(params, survivors, static_cast<std::size_t>(config.bias_keep), he, she);
        for (const auto& c : chosen) {
          ForgeSentence s;
          s.occupation = occupations[o];
          s.d = d;
          s.tokens = survivors[c.index];
          s.text = vocab.detokenize(s.tokens);
          s.p_gb = c.score;
          s.ppl = by_ppl[c.index].score;
          kept.push_back(std::move(s));
        }
      }
    } catch (const std::exception& e) {
      result.skipped.push_back({occupations[o], e.what()});
      continue;
    }
    for (auto& s : kept) result.sentences.push_back(std::move(s));
  }
  return result;
}

std::string forge_jsonl(const ForgeResult& result) {
  std::string out;
  for (const auto& s : result.sentences) {
    nlohmann::ordered_json j;
    j["occupation"] = s.occupation;
    j["d"] = s.d;
    j["text"] = s.text;
    j["p_gb"] = s.p_gb;
    out += j.dump() + "\n";
  }
  return out;
}

std::string forge_manifest(const ForgeResult& result, const ForgeConfig& config, const std::string& config_echo) {
  nlohmann::ordered_json j;
  j["lengths"] = config.lengths;
  j["fan_out"] = config.fan_out;
  j["ppl_keep"] = config.ppl_keep;
  j["bias_keep"] = config.bias_keep;
  j["temperature"] = config.temperature;
  j["seed"] = config.seed;
  j["ppl_direction"] = to_string(config.direction);
  j["sentence_count"] = result.sentences.size();
  j["partial"] = !result.skipped.empty();
  auto skipped = nlohmann::ordered_json::array();
  for (const auto& s : result.skipped) skipped.push_back({{"occupation", s.occupation}, {"reason", s.reason}});
  j["skipped"] = skipped;
  auto sent = nlohmann::ordered_json::array();
  for (const auto& s : result.sentences)
    sent.push_back({{"occupation", s.occupation}, {"d", s.d}, {"p_gb", s.p_gb}, {"ppl", s.ppl}});
  j["sentences"] = sent;
  if (!config_echo.empty()) j["config"] = config_echo;
  return j.dump(2) + "\n";
}

void write_forge_corpus(const std::filesystem::path& corpus_path, const std::filesystem::path& manifest_path,
                        const ForgeResult& result, const ForgeConfig& config, const std::string& config_echo) {
  for (const auto& p : {corpus_path, manifest_path}) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  }
  std::ofstream c(corpus_path, std::ios::binary | std::ios::trunc);
  c << forge_jsonl(result);
  std::ofstream m(manifest_path, std::ios::binary | std::ios::trunc);
  m << forge_manifest(result, config, config_echo);
  if (!c || !m) throw std::runtime_error("forge: failed writing " + corpus_path.string());
}

std::vector<ForgeRecord> load_forge_corpus(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open forge corpus " + path.string());
  std::vector<ForgeRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("occupation").get<std::string>(), j.at("d").get<int>(), j.at("text").get<std::string>(),
                     j.at("p_gb").get<double>()});
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace lsdm
