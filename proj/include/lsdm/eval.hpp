#pragma once

// Bias and capability metrics, the fine-tuning baselines, and report output.

#include "lsdm/corpus.hpp"
#include "lsdm/model.hpp"
#include "lsdm/train.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lsdm {

double p_sp(const ModelParams& params, const BiasProbe& probe);

struct BiasMetrics {
  double mean_p_gb = 0.0;
  double mean_p_sp = 0.0;
  double cross_ppl = 0.0;
  int n = 0;
  bool operator==(const BiasMetrics&) const = default;
};

inline constexpr int kContinuationTokens = 10;

// p_gb and p_sp under `candidate`; cross_ppl is the perplexity under
// `original` of each probe extended greedily by `candidate`.
BiasMetrics eval_bias_dataset(const ModelParams& original, const ModelParams& candidate,
                              const std::vector<BiasProbe>& probes, int continuation_tokens = kContinuationTokens);

// Swapped he/she probabilities.
Eigen::VectorXd cda_target(const Eigen::VectorXd& dist, int he_id, int she_id);

enum class Baseline { ft, cda };
std::string to_string(Baseline b);

struct BaselineResult {
  ModelParams params;
  std::vector<double> losses;  // per step, before the update
};

// Name of the W_proj tensor for a layer, as used by visit_tensors.
std::string w_proj_name(int layer);

// Fine-tunes only W_proj of `layers` so the next-token distribution after
// each text matches the averaged (ft) or swapped (cda) target computed once
// from the starting model.
BaselineResult fine_tune_baseline(const ModelParams& params, const std::vector<BiasProbe>& texts,
                                  const std::vector<int>& layers, Baseline kind, const TrainHyper& hyper);
ModelParams ft_baseline(const ModelParams& params, const std::vector<BiasProbe>& texts,
                        const std::vector<int>& layers, const TrainHyper& hyper);
ModelParams cda_baseline(const ModelParams& params, const std::vector<BiasProbe>& texts,
                         const std::vector<int>& layers, const TrainHyper& hyper);

// Metrics on neutral-occupation probes; throws if any probe's occupation is in
// `edited_occupations` or the probe set is empty.
std::pair<BiasMetrics, BiasMetrics> neutral_generalization(const ModelParams& original, const ModelParams& edited,
                                                           const std::vector<BiasProbe>& neutral_probes,
                                                           const std::vector<std::string>& edited_occupations);

// Top-1 next-token accuracy over every predicted position.
double capability_probe(const ModelParams& params, const std::vector<TokenIds>& corpus);

struct EvalRow {
  std::string algorithm;
  std::string dataset;
  BiasMetrics metrics;
  bool operator==(const EvalRow&) const = default;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<std::pair<std::string, double>> capability;  // per algorithm

  // Throw on a duplicate (algorithm, dataset) or algorithm.
  void add_row(EvalRow row);
  void set_capability(const std::string& algorithm, double accuracy);
  const EvalRow* find(const std::string& algorithm, const std::string& dataset) const;
  std::optional<double> capability_of(const std::string& algorithm) const;
  // Rows and capabilities of `other` appended; duplicates throw.
  void merge(const EvalReport& other);
  bool operator==(const EvalReport&) const = default;
};

std::string report_markdown(const EvalReport& report);
std::string report_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

// Writes <stem>.md and <stem>.json.
void emit_report(const EvalReport& report, const std::filesystem::path& stem);
EvalReport load_report(const std::filesystem::path& json_path);

}  // namespace lsdm
