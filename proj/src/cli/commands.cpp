#include "lsdm/cli/commands.hpp"

#include "lsdm/corpus.hpp"
#include "lsdm/eval.hpp"
#include "lsdm/rng.hpp"
#include "lsdm/trace.hpp"
#include "lsdm/weights_io.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "json.hpp"

namespace lsdm::cli {

using nlohmann::json;

namespace {

std::uint64_t need_seed(const std::optional<std::uint64_t>& seed, const char* cmd) {
  if (!seed) throw UsageError(std::string(cmd) + ": --seed is required");
  return *seed;
}

void need_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw UsageError(what + ": no path given");
  if (!fs::exists(p)) throw std::runtime_error("missing " + what + ": " + p.string());
}

// Reloads a written weight file; a corrupt write fails the command.
void verify_weights(const fs::path& p, const ModelParams& params) {
  if (!(load_weights(p).params.config == params.config)) throw std::runtime_error("weight file failed to reload: " + p.string());
}

fs::path or_default(const fs::path& p, const fs::path& fallback) { return p.empty() ? fallback : p; }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::vector<std::string> occupations_of(const std::vector<LexiconEntry>& entries) {
  std::vector<std::string> out;
  for (const auto& e : entries) out.push_back(e.surface);
  return out;
}

// Every sentence a probe set might be built from, so the vocabulary covers
// held-out templates too.
std::vector<std::string> template_sentences(const TemplateSet& t, const Lexicon& lex) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < t.templates.size(); ++i)
    for (const auto& e : lex.entries) out.push_back(t.instantiate(i, e.surface) + " he she");
  return out;
}

std::pair<std::string, fs::path> split_named(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
    throw UsageError("expected NAME=PATH, got '" + spec + "'");
  return {spec.substr(0, eq), fs::path(spec.substr(eq + 1))};
}

std::string layers_tag(const std::string& layers) {
  std::string s = layers;
  std::replace(s.begin(), s.end(), ',', '-');
  return s;
}

json config_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model}, {"n_heads", c.n_heads}, {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq}, {"activation", to_string(c.activation)}};
}

}  // namespace

TrainOutput cmd_train(const TrainCommand& c) {
  const auto seed = need_seed(c.seed, "train");
  const Layout out{c.out};
  const fs::path data = default_data_dir();

  const auto lexicon = load_lexicon(or_default(c.lexicon, data / "lexicon.tsv"))
                           .take(c.n_female, c.n_male, c.n_neutral);
  const auto train_t = load_templates(or_default(c.train_templates, data / "templates_train.txt"));
  const auto heldout_t = load_templates(or_default(c.heldout_templates, data / "templates_heldout.txt"));

  SynthOptions so;
  so.other_subject_prob = c.other_subject_prob;
  const auto biased =
      synth_biased_corpus(lexicon, c.bias_ratio, c.sentences_per_entry, derive_seed(seed, {1}), train_t, so);
  const auto neutral = synth_neutral_corpus(c.neutral_sentences, derive_seed(seed, {2}));
  const auto heldout_neutral = synth_neutral_corpus(c.heldout_neutral_sentences, derive_seed(seed, {3}));
  const auto covariance = synth_neutral_corpus(c.covariance_sentences, derive_seed(seed, {4}));

  std::vector<std::string> all = biased.sentences;
  for (const auto* part : {&neutral, &heldout_neutral, &covariance}) all.insert(all.end(), part->begin(), part->end());
  for (const auto* t : {&train_t, &heldout_t}) {
    auto s = template_sentences(*t, lexicon);
    all.insert(all.end(), s.begin(), s.end());
  }
  const Vocabulary vocab(collect_words(all));

  ModelConfig cfg = c.model;
  cfg.vocab_size = vocab.size();
  cfg.validate();

  std::vector<std::string> train_text = biased.sentences;
  train_text.insert(train_text.end(), neutral.begin(), neutral.end());
  const auto seqs = pack_sequences(tokenize_all(vocab, train_text), cfg.max_seq, c.pair_prob, derive_seed(seed, {5}));

  TrainHyper hyper = c.hyper;
  hyper.seed = derive_seed(seed, {6});
  const auto res = train_toy(seqs, cfg, hyper);

  const fs::path weights = out.weights() / (c.name + ".bin");
  fs::create_directories(out.weights());
  save_weights(weights, res.params, vocab.words());
  verify_weights(weights, res.params);

  fs::create_directories(out.corpora());
  write_text(out.corpora() / "lexicon.tsv", format_lexicon(lexicon));
  write_lines(out.corpora() / "train_biased.txt", biased.sentences);
  write_lines(out.corpora() / "train_neutral.txt", neutral);
  write_lines(out.corpora() / "heldout_neutral.txt", heldout_neutral);
  write_lines(out.corpora() / "covariance.txt", covariance);

  const auto gendered = occupations_of(lexicon.gendered());
  const auto neutral_occ = occupations_of(lexicon.with_label(GenderLabel::neutral));
  write_probe_dataset(out.corpora() / "probes_train.jsonl", make_probes(vocab, train_t, gendered));
  write_probe_dataset(out.corpora() / "probes_heldout.jsonl", make_probes(vocab, heldout_t, gendered));
  write_probe_dataset(out.corpora() / "probes_neutral.jsonl", make_probes(vocab, heldout_t, neutral_occ));

  json stats = json::array();
  for (const auto& s : biased.stats)
    stats.push_back({{"occupation", s.occupation}, {"label", to_string(s.label)}, {"she", s.she}, {"he", s.he},
                     {"other", s.other}, {"she_fraction", s.she_fraction()}});
  json manifest = {{"model", config_json(cfg)},
                   {"seed", seed},
                   {"train_seed", hyper.seed},
                   {"steps", hyper.steps},
                   {"freeze_embeddings", hyper.freeze_embeddings},
                   {"sequences", seqs.size()},
                   {"initial_loss", res.initial_loss},
                   {"final_loss", res.final_loss},
                   {"synth_stats", stats},
                   {"config", c.config_echo}};
  write_text(out.weights() / (c.name + ".manifest.json"), manifest.dump(2) + "\n");

  return {weights, res.initial_loss, res.final_loss};
}

TraceOutput cmd_trace(const TraceCommand& c) {
  const auto seed = need_seed(c.seed, "trace");
  const Layout out{c.out};
  need_file(c.model, "model weights");
  const fs::path probes_path = or_default(c.probes, out.corpora() / "probes_heldout.jsonl");
  need_file(probes_path, "probe dataset");
  if (c.corrupt != "all" && c.corrupt != "occupation")
    throw UsageError("--corrupt must be 'all' or 'occupation'");

  const auto wf = load_weights(c.model);
  const Vocabulary vocab(wf.vocab);
  auto probes = load_probe_dataset(probes_path, vocab);
  if (c.max_probes > 0 && static_cast<std::size_t>(c.max_probes) < probes.size()) probes.resize(c.max_probes);

  std::vector<Site> components;
  for (const auto& s : c.components) components.push_back(site_from_string(s));
  std::vector<Site> severed;
  for (const auto& s : c.severed) {
    const Site v = site_from_string(s);
    if (v != Site::mlp_m && v != Site::attn_a) throw UsageError("--severed takes mlp or attn");
    severed.push_back(v);
  }

  TraceOptions base;
  base.noise.multiplier = c.noise_multiplier;
  base.noise.seed = derive_seed(seed, {0x7ace});
  base.occupation_only = c.corrupt == "occupation";

  TraceOutput result;
  json summary = {{"model", c.model.string()}, {"probes", probes.size()}, {"noise_multiplier", c.noise_multiplier},
                  {"corrupt", c.corrupt}, {"seed", seed}, {"grids", json::array()}, {"config", c.config_echo}};
  fs::create_directories(out.traces());

  auto record = [&](const TraceGrid& g, const std::string& stem) {
    const fs::path p = out.traces() / stem;
    std::string title = to_string(g.component) + " (window " + std::to_string(g.window) + ")";
    if (g.severed) title += ", " + to_string(*g.severed) + " severed";
    emit_grid(g, p, title);
    result.grids.push_back(fs::path(p.string() + ".csv"));
    result.ate = g.ate;
    json rc = json::array();
    for (int n : g.row_counts) rc.push_back(n);
    summary["grids"].push_back({{"stem", stem}, {"component", to_string(g.component)}, {"window", g.window},
                                {"severed", g.severed ? to_string(*g.severed) : ""}, {"ate", g.ate},
                                {"row_counts", rc}});
    std::cerr << "trace " << stem << ": ate " << g.ate << "\n";
  };

  for (Site comp : components) {
    TraceOptions opt = base;
    opt.window = comp == Site::hidden_h ? 1 : c.window;
    record(trace_grid(wf.params, probes, comp, opt), to_string(comp));
  }
  for (Site sev : severed) {
    for (Site comp : components) {
      if (comp == sev) continue;
      TraceOptions opt = base;
      opt.window = comp == Site::hidden_h ? 1 : c.window;
      record(severed_trace(wf.params, probes, sev, comp, opt), to_string(comp) + "_severed_" + to_string(sev));
    }
  }
  write_text(out.traces() / "summary.json", summary.dump(2) + "\n");
  return result;
}

ForgeOutput cmd_forge(const ForgeCommand& c) {
  const auto seed = need_seed(c.seed, "forge");
  const Layout out{c.out};
  need_file(c.model, "model weights");
  const fs::path lex_path = or_default(c.lexicon, out.corpora() / "lexicon.tsv");
  need_file(lex_path, "lexicon");

  const auto wf = load_weights(c.model);
  const Vocabulary vocab(wf.vocab);
  auto occupations = occupations_of(load_lexicon(lex_path).gendered());
  if (c.max_occupations > 0 && static_cast<std::size_t>(c.max_occupations) < occupations.size())
    occupations.resize(c.max_occupations);

  ForgeConfig cfg = c.forge;
  cfg.seed = seed;
  cfg.direction = ppl_direction_from_string(c.direction);
  cfg.validate();

  const auto result = build_bias_corpus(wf.params, vocab, occupations, cfg);
  ForgeOutput o{out.corpora() / "forge.jsonl", out.corpora() / "forge_manifest.json", result.sentences.size(),
                result.skipped.size()};
  write_forge_corpus(o.corpus, o.manifest, result, cfg, c.config_echo);
  if (load_forge_corpus(o.corpus).size() != result.sentences.size())
    throw std::runtime_error("forge corpus failed to reload: " + o.corpus.string());
  for (const auto& s : result.skipped) std::cerr << "forge: skipped " << s.occupation << ": " << s.reason << "\n";
  if (result.sentences.empty()) throw std::runtime_error("forge produced no sentences");
  return o;
}

EditOutput cmd_edit(const EditCommand& c) {
  const auto seed = need_seed(c.seed, "edit");
  const Layout out{c.out};
  need_file(c.model, "model weights");
  const fs::path corpus_path = or_default(c.corpus, out.corpora() / "forge.jsonl");
  const fs::path cov_path = or_default(c.covariance_corpus, out.corpora() / "covariance.txt");
  need_file(corpus_path, "bias corpus");
  need_file(cov_path, "covariance corpus");

  const auto wf = load_weights(c.model);
  const Vocabulary vocab(wf.vocab);

  EditPlan plan;
  plan.layers = placement_layers(c.layers, wf.params.config.n_layers);
  for (const auto& r : load_forge_corpus(corpus_path)) plan.texts.push_back(probe_from_text(vocab, r.text, r.occupation));
  plan.covariance_corpus = tokenize_all(vocab, read_lines(cov_path));
  plan.prefixes = sample_prefixes(wf.params, c.prefix_count, c.prefix_min, c.prefix_max, vocab.id("the"),
                                  vocab.id("."), derive_seed(seed, {0xed17}));
  plan.v_star = c.v_star;
  plan.cov_max_samples = c.cov_max_samples;
  plan.cov_scale = c.cov_scale;
  plan.ridge_factor = c.ridge_factor;
  plan.reread_m_original = c.reread_m_original;
  plan.validate(wf.params.config);

  const auto result = apply_lsdm(wf.params, plan);

  const std::string name = c.name.empty() ? "lsdm_" + layers_tag(c.layers) : c.name;
  EditOutput o{out.edits() / (name + ".bin"), out.edits() / (name + ".jsonl"), result.report};
  fs::create_directories(out.edits());
  save_weights(o.weights, result.params, wf.vocab);
  verify_weights(o.weights, result.params);
  write_text(o.report, result.report.to_jsonl());

  json layers = json::array();
  for (int l : plan.layers) layers.push_back(l);
  json prefixes = json::array();
  for (const auto& p : plan.prefixes) prefixes.push_back(vocab.detokenize(p));
  json manifest = {{"model", c.model.string()}, {"corpus", corpus_path.string()}, {"texts", plan.texts.size()},
                   {"layers", layers}, {"prefixes", prefixes}, {"seed", seed}, {"config", c.config_echo}};
  write_text(out.edits() / (name + ".manifest.json"), manifest.dump(2) + "\n");
  return o;
}

EvalOutput cmd_eval(const EvalCommand& c) {
  const auto seed = need_seed(c.seed, "eval");
  const Layout out{c.out};
  need_file(c.model, "model weights");
  const auto wf = load_weights(c.model);
  const Vocabulary vocab(wf.vocab);

  std::vector<std::pair<std::string, fs::path>> datasets;
  if (c.datasets.empty()) {
    datasets = {{"heldout", out.corpora() / "probes_heldout.jsonl"}, {"neutral", out.corpora() / "probes_neutral.jsonl"}};
  } else {
    for (const auto& s : c.datasets) datasets.push_back(split_named(s));
  }
  std::vector<std::pair<std::string, std::vector<BiasProbe>>> probe_sets;
  for (const auto& [name, path] : datasets) {
    need_file(path, "probe dataset '" + name + "'");
    probe_sets.emplace_back(name, load_probe_dataset(path, vocab));
  }
  const fs::path cap_path = or_default(c.capability_corpus, out.corpora() / "heldout_neutral.txt");
  need_file(cap_path, "capability corpus");
  const auto cap_corpus = tokenize_all(vocab, read_lines(cap_path));

  std::vector<std::pair<std::string, ModelParams>> candidates;
  candidates.emplace_back("None", wf.params);
  if (c.baselines) {
    const fs::path corpus_path = or_default(c.corpus, out.corpora() / "forge.jsonl");
    need_file(corpus_path, "bias corpus");
    std::vector<BiasProbe> texts;
    for (const auto& r : load_forge_corpus(corpus_path)) texts.push_back(probe_from_text(vocab, r.text, r.occupation));
    const auto layers = placement_layers(c.baseline_layers, wf.params.config.n_layers);
    TrainHyper h = c.baseline;
    h.seed = derive_seed(seed, {0xba5e});
    candidates.emplace_back("FT", ft_baseline(wf.params, texts, layers, h));
    candidates.emplace_back("CDA", cda_baseline(wf.params, texts, layers, h));
  }
  for (const auto& spec : c.lsdm) {
    const auto [name, path] = split_named(spec);
    need_file(path, "edited weights '" + name + "'");
    auto ew = load_weights(path);
    if (ew.vocab != wf.vocab || !(ew.params.config == wf.params.config))
      throw std::runtime_error("edited weights '" + name + "' do not match the base model");
    candidates.emplace_back(name, std::move(ew.params));
  }

  EvalReport report;
  for (const auto& [alg, params] : candidates) {
    for (const auto& [ds, probes] : probe_sets)
      report.add_row({alg, ds, eval_bias_dataset(wf.params, params, probes)});
    report.set_capability(alg, capability_probe(params, cap_corpus));
    std::cerr << "eval: " << alg << " done\n";
  }
  const fs::path stem = out.reports() / c.name;
  emit_report(report, stem);
  if (!(load_report(fs::path(stem.string() + ".json")) == report)) throw std::runtime_error("report failed to reload");
  return {fs::path(stem.string() + ".md"), fs::path(stem.string() + ".json")};
}

EvalOutput cmd_report(const ReportCommand& c) {
  if (c.inputs.empty()) throw UsageError("report: at least one --input is required");
  EvalReport merged;
  for (const auto& p : c.inputs) {
    need_file(p, "report");
    merged.merge(load_report(p));
  }
  const fs::path stem = Layout{c.out}.reports() / c.name;
  emit_report(merged, stem);
  if (!(load_report(fs::path(stem.string() + ".json")) == merged)) throw std::runtime_error("report failed to reload");
  return {fs::path(stem.string() + ".md"), fs::path(stem.string() + ".json")};
}

}  // namespace lsdm::cli
