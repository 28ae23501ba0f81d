// Flag and config-file parsing for the lsdm executable.

#include "lsdm/cli/commands.hpp"

#include <iostream>

#include "CLI11.hpp"

namespace lsdm::cli {

namespace {

void add_seed(CLI::App* sub, std::optional<std::uint64_t>& seed) {
  sub->add_option("--seed", seed, "Master seed; every random stream is derived from it")->required();
}

void add_model_config(CLI::App* sub, ModelConfig& m) {
  sub->add_option("--n-layers", m.n_layers, "Transformer blocks")->capture_default_str();
  sub->add_option("--d-model", m.d_model, "Residual width")->capture_default_str();
  sub->add_option("--n-heads", m.n_heads, "Attention heads")->capture_default_str();
  sub->add_option("--d-ff", m.d_ff, "MLP hidden width")->capture_default_str();
  sub->add_option("--max-seq", m.max_seq, "Context length")->capture_default_str();
}

void add_hyper(CLI::App* sub, TrainHyper& h, const std::string& prefix) {
  sub->add_option("--" + prefix + "steps", h.steps, "Optimizer steps")->capture_default_str();
  sub->add_option("--" + prefix + "batch", h.batch, "Sequences per step")->capture_default_str();
  sub->add_option("--" + prefix + "lr", h.learning_rate, "Adam learning rate")->capture_default_str();
  sub->add_option("--" + prefix + "clip", h.clip_norm, "Global gradient norm clip, 0 disables")->capture_default_str();
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Gender-bias causal tracing and least-squares MLP debiasing on a toy transformer"};
  app.set_config("--config", "", "INI config; [section] names match subcommands");
  app.require_subcommand(1);
  int workers = 1;
  app.add_option("--workers", workers, "Worker threads; computation is serial, so only 1 is accepted")
      ->capture_default_str()
      ->check(CLI::Range(1, 1));

  TrainCommand train;
  auto* t = app.add_subcommand("train", "Synthesize the biased corpus and train the toy model");
  t->add_option("--out", train.out, "Run directory")->capture_default_str();
  t->add_option("--name", train.name, "Weight file stem under weights/")->capture_default_str();
  add_seed(t, train.seed);
  t->add_option("--lexicon", train.lexicon, "Occupation lexicon TSV (default: shipped)");
  t->add_option("--train-templates", train.train_templates, "Training templates (default: shipped)");
  t->add_option("--heldout-templates", train.heldout_templates, "Held-out templates (default: shipped)");
  t->add_option("--n-female", train.n_female, "Female-skewed occupations used")->capture_default_str();
  t->add_option("--n-male", train.n_male, "Male-skewed occupations used")->capture_default_str();
  t->add_option("--n-neutral", train.n_neutral, "Neutral occupations used")->capture_default_str();
  t->add_option("--bias-ratio", train.bias_ratio, "Stereotyped pronoun rate")->capture_default_str();
  t->add_option("--sentences-per-entry", train.sentences_per_entry)->capture_default_str();
  t->add_option("--other-subject-prob", train.other_subject_prob, "Rate of non-pronoun continuations")
      ->capture_default_str();
  t->add_option("--neutral-sentences", train.neutral_sentences, "Occupation-free training sentences")
      ->capture_default_str();
  t->add_option("--heldout-neutral-sentences", train.heldout_neutral_sentences, "Capability probe sentences")
      ->capture_default_str();
  t->add_option("--covariance-sentences", train.covariance_sentences, "Second-moment corpus size")
      ->capture_default_str();
  t->add_option("--pair-prob", train.pair_prob, "Chance a sequence packs two sentences")->capture_default_str();
  t->add_option("--freeze-embeddings", train.hyper.freeze_embeddings, "Keep embeddings at their initialization")
      ->capture_default_str();
  add_model_config(t, train.model);
  add_hyper(t, train.hyper, "");

  TraceCommand trace;
  auto* tr = app.add_subcommand("trace", "Causal tracing grids over a probe dataset");
  tr->add_option("--out", trace.out, "Run directory")->capture_default_str();
  tr->add_option("--model", trace.model, "Weight file")->required();
  tr->add_option("--probes", trace.probes, "Probe JSONL (default: corpora/probes_heldout.jsonl)");
  tr->add_option("--component", trace.components, "hidden, mlp and/or attn")->capture_default_str();
  tr->add_option("--severed", trace.severed, "Also trace with mlp or attn severed");
  tr->add_option("--window", trace.window, "Layers restored around each cell (mlp/attn)")->capture_default_str();
  tr->add_option("--noise-multiplier", trace.noise_multiplier, "Noise std in units of embedding std")
      ->capture_default_str();
  tr->add_option("--corrupt", trace.corrupt, "Corrupt all tokens or only the occupation")
      ->check(CLI::IsMember({"all", "occupation"}))
      ->capture_default_str();
  tr->add_option("--max-probes", trace.max_probes, "Use the first N probes, 0 = all")->capture_default_str();
  add_seed(tr, trace.seed);

  ForgeCommand forge;
  auto* fo = app.add_subcommand("forge", "Generate the bias sentence corpus");
  fo->add_option("--out", forge.out, "Run directory")->capture_default_str();
  fo->add_option("--model", forge.model, "Weight file")->required();
  fo->add_option("--lexicon", forge.lexicon, "Lexicon TSV (default: corpora/lexicon.tsv)");
  fo->add_option("--lengths", forge.forge.lengths, "Sequence lengths d, prompt included")->capture_default_str();
  fo->add_option("--fan-out", forge.forge.fan_out, "Samples per (occupation, d)")->capture_default_str();
  fo->add_option("--ppl-keep", forge.forge.ppl_keep, "Kept after the perplexity filter")->capture_default_str();
  fo->add_option("--bias-keep", forge.forge.bias_keep, "Kept after the bias filter")->capture_default_str();
  fo->add_option("--temperature", forge.forge.temperature)->capture_default_str();
  fo->add_option("--direction", forge.direction, "Perplexity filter keeps highest or lowest")
      ->check(CLI::IsMember({"highest", "lowest"}))
      ->capture_default_str();
  fo->add_option("--max-occupations", forge.max_occupations, "Use the first N gendered entries, 0 = all")
      ->capture_default_str();
  add_seed(fo, forge.seed);

  EditCommand edit;
  auto* ed = app.add_subcommand("edit", "Apply the least-squares debias edit");
  ed->add_option("--out", edit.out, "Run directory")->capture_default_str();
  ed->add_option("--model", edit.model, "Weight file")->required();
  ed->add_option("--corpus", edit.corpus, "Bias corpus (default: corpora/forge.jsonl)");
  ed->add_option("--covariance-corpus", edit.covariance_corpus, "Unrelated text (default: corpora/covariance.txt)");
  ed->add_option("--layers", edit.layers, "bottom, middle, top or a comma list")->capture_default_str();
  ed->add_option("--name", edit.name, "Output stem under edits/ (default: lsdm_<layers>)");
  ed->add_option("--prefix-count", edit.prefix_count, "Prefixes including the empty one")->capture_default_str();
  ed->add_option("--prefix-min", edit.prefix_min)->capture_default_str();
  ed->add_option("--prefix-max", edit.prefix_max)->capture_default_str();
  ed->add_option("--v-steps", edit.v_star.steps, "Adam steps for each target vector")->capture_default_str();
  ed->add_option("--v-lr", edit.v_star.learning_rate)->capture_default_str();
  ed->add_option("--cov-max-samples", edit.cov_max_samples)->capture_default_str();
  ed->add_option("--cov-scale", edit.cov_scale, "Weight of the preservation term")->capture_default_str();
  ed->add_option("--ridge-factor", edit.ridge_factor)->capture_default_str();
  ed->add_option("--reread", edit.reread_m_original, "Re-read layer outputs from the partially edited model")
      ->capture_default_str();
  add_seed(ed, edit.seed);

  EvalCommand eval;
  auto* ev = app.add_subcommand("eval", "Compare the base model, baselines and edits");
  ev->add_option("--out", eval.out, "Run directory")->capture_default_str();
  ev->add_option("--model", eval.model, "Base weight file")->required();
  ev->add_option("--lsdm", eval.lsdm, "Edited weights as NAME=PATH, repeatable");
  ev->add_option("--dataset", eval.datasets, "Probe set as NAME=PATH (default: heldout and neutral)");
  ev->add_option("--capability-corpus", eval.capability_corpus, "Default: corpora/heldout_neutral.txt");
  ev->add_option("--corpus", eval.corpus, "Bias corpus for FT/CDA (default: corpora/forge.jsonl)");
  ev->add_option("--baselines", eval.baselines, "Include the FT and CDA rows")->capture_default_str();
  ev->add_option("--baseline-layers", eval.baseline_layers, "Layers the baselines may train")->capture_default_str();
  add_hyper(ev, eval.baseline, "baseline-");
  ev->add_option("--name", eval.name, "Report stem under reports/")->capture_default_str();
  add_seed(ev, eval.seed);

  ReportCommand report;
  auto* rp = app.add_subcommand("report", "Merge eval reports");
  rp->add_option("--out", report.out, "Run directory")->capture_default_str();
  rp->add_option("--input", report.inputs, "Report JSON, repeatable")->required()->check(CLI::ExistingFile);
  rp->add_option("--name", report.name)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (t->parsed()) {
      train.config_echo = t->config_to_str(true, false);
      const auto o = cmd_train(train);
      std::cout << o.weights.string() << "\nloss " << o.initial_loss << " -> " << o.final_loss << "\n";
    } else if (tr->parsed()) {
      trace.config_echo = tr->config_to_str(true, false);
      for (const auto& p : cmd_trace(trace).grids) std::cout << p.string() << "\n";
    } else if (fo->parsed()) {
      forge.config_echo = fo->config_to_str(true, false);
      const auto o = cmd_forge(forge);
      std::cout << o.corpus.string() << "\n" << o.sentences << " sentences, " << o.skipped << " skipped\n";
    } else if (ed->parsed()) {
      edit.config_echo = ed->config_to_str(true, false);
      const auto o = cmd_edit(edit);
      std::cout << o.weights.string() << "\n" << o.report.string() << "\n";
    } else if (ev->parsed()) {
      eval.config_echo = ev->config_to_str(true, false);
      std::cout << cmd_eval(eval).markdown.string() << "\n";
    } else if (rp->parsed()) {
      std::cout << cmd_report(report).markdown.string() << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace lsdm::cli
