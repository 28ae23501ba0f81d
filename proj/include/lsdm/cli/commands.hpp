#pragma once

// Pipeline subcommands as library calls. The executable only parses flags and
// config files into these structs.

#include "lsdm/editor.hpp"
#include "lsdm/forge.hpp"
#include "lsdm/model.hpp"
#include "lsdm/train.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lsdm::cli {

namespace fs = std::filesystem;

// Fixed output layout under the run directory.
struct Layout {
  fs::path root;
  fs::path weights() const { return root / "weights"; }
  fs::path traces() const { return root / "traces"; }
  fs::path corpora() const { return root / "corpora"; }
  fs::path edits() const { return root / "edits"; }
  fs::path reports() const { return root / "reports"; }
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainCommand {
  fs::path out = ".";
  std::string name = "toy";
  std::optional<std::uint64_t> seed;
  fs::path lexicon;          // default: shipped lexicon
  fs::path train_templates;  // default: shipped training templates
  fs::path heldout_templates;
  int n_female = 10;
  int n_male = 10;
  int n_neutral = 4;
  double bias_ratio = 0.85;
  int sentences_per_entry = 200;
  double other_subject_prob = 0.2;
  int neutral_sentences = 2000;
  int heldout_neutral_sentences = 500;
  int covariance_sentences = 3000;
  double pair_prob = 0.5;
  ModelConfig model;
  TrainHyper hyper = default_hyper();
  std::string config_echo;

  static TrainHyper default_hyper() {
    TrainHyper h;
    h.steps = 3000;
    h.freeze_embeddings = true;
    return h;
  }
};

struct TrainOutput {
  fs::path weights;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

TrainOutput cmd_train(const TrainCommand& c);

struct TraceCommand {
  fs::path out = ".";
  fs::path model;
  fs::path probes;  // default: corpora/probes_heldout.jsonl
  std::vector<std::string> components{"hidden", "mlp", "attn"};
  std::vector<std::string> severed;  // mlp and/or attn
  int window = 10;                   // mlp/attn; hidden always uses 1
  double noise_multiplier = 3.0;
  std::string corrupt = "all";       // all | occupation
  int max_probes = 0;                // 0 = all
  std::optional<std::uint64_t> seed;
  std::string config_echo;
};

struct TraceOutput {
  std::vector<fs::path> grids;  // csv paths
  double ate = 0.0;
};

TraceOutput cmd_trace(const TraceCommand& c);

struct ForgeCommand {
  fs::path out = ".";
  fs::path model;
  fs::path lexicon;  // default: corpora/lexicon.tsv
  ForgeConfig forge;
  std::string direction = "highest";
  int max_occupations = 0;  // 0 = every gendered entry
  std::optional<std::uint64_t> seed;
  std::string config_echo;
};

struct ForgeOutput {
  fs::path corpus;
  fs::path manifest;
  std::size_t sentences = 0;
  std::size_t skipped = 0;
};

ForgeOutput cmd_forge(const ForgeCommand& c);

struct EditCommand {
  fs::path out = ".";
  fs::path model;
  fs::path corpus;             // default: corpora/forge.jsonl
  fs::path covariance_corpus;  // default: corpora/covariance.txt
  std::string layers = "bottom";
  std::string name;  // default: lsdm_<layers>
  int prefix_count = 5;
  int prefix_min = 2;
  int prefix_max = 10;
  VStarOptions v_star{40, 0.1};
  long cov_max_samples = 100000;
  double cov_scale = 1.0;
  double ridge_factor = 1e-6;
  bool reread_m_original = true;
  std::optional<std::uint64_t> seed;
  std::string config_echo;
};

struct EditOutput {
  fs::path weights;
  fs::path report;
  EditReport edit_report;
};

EditOutput cmd_edit(const EditCommand& c);

struct EvalCommand {
  fs::path out = ".";
  fs::path model;
  std::vector<std::string> lsdm;      // NAME=PATH
  std::vector<std::string> datasets;  // NAME=PATH; default heldout + neutral probes
  fs::path capability_corpus;         // default: corpora/heldout_neutral.txt
  fs::path corpus;                    // forge corpus for FT/CDA; default corpora/forge.jsonl
  bool baselines = true;
  std::string baseline_layers = "bottom";
  TrainHyper baseline = default_baseline();
  std::string name = "eval";
  std::optional<std::uint64_t> seed;
  std::string config_echo;

  static TrainHyper default_baseline() {
    TrainHyper h;
    h.steps = 300;
    h.batch = 8;
    h.learning_rate = 1e-3;
    return h;
  }
};

struct EvalOutput {
  fs::path markdown;
  fs::path json;
};

EvalOutput cmd_eval(const EvalCommand& c);

struct ReportCommand {
  fs::path out = ".";
  std::vector<fs::path> inputs;
  std::string name = "summary";
};

EvalOutput cmd_report(const ReportCommand& c);

// Parses argv, runs the subcommand, maps errors to exit codes
// (0 ok, 1 runtime failure, 2 usage).
int run(int argc, char** argv);

}  // namespace lsdm::cli
