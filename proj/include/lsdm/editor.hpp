#pragma once

// Least-squares debias edit of the MLP output projections.
//
// For each edited layer the new weight minimises
//   |W E - V|^2 + |W P - W0 P|^2
// where the columns of E are debias keys, V their target outputs and P P^T
// the second moment of keys drawn from unrelated text.

#include "lsdm/corpus.hpp"
#include "lsdm/model.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace lsdm {

struct KeySet {
  int layer = 0;
  Eigen::MatrixXd keys;  // d_ff x n
  std::vector<std::pair<std::string, std::string>> sources;  // (occupation, text)
};

struct SecondMoment {
  int layer = 0;
  Eigen::MatrixXd C;  // d_ff x d_ff
  long sample_count = 0;
};

struct TargetSet {
  int layer = 0;  // l_e
  Eigen::MatrixXd v_star;      // d_model x n
  Eigen::MatrixXd m_original;  // d_model x n
  Eigen::MatrixXd r_star;      // v_star - m_original
};

struct VStarOptions {
  int steps = 40;
  double learning_rate = 0.05;
};

struct EditPlan {
  std::vector<int> layers;             // R, strictly ascending; back() is l_e
  std::vector<BiasProbe> texts;        // edit sentences with occupation spans
  std::vector<TokenIds> prefixes;      // s_j; the first is usually empty
  std::vector<TokenIds> covariance_corpus;
  VStarOptions v_star;
  long cov_max_samples = 100000;
  double cov_scale = 1.0;
  double ridge_factor = 1e-6;  // lambda = ridge_factor * trace(C) / d_ff
  bool reread_m_original = true;

  void validate(const ModelConfig& config) const;
  int target_layer() const { return layers.back(); }
};

// Index of the last occupation token once `prefix` is prepended.
int key_position(const BiasProbe& text, const TokenIds& prefix);

// Mean over prefixes of the MLP key (and output) at the last occupation token.
struct KeyAndOutput {
  Eigen::VectorXd key;     // d_ff
  Eigen::VectorXd output;  // d_model, m at the same site
};
KeyAndOutput collect_key_and_output(const ModelParams& params, const BiasProbe& text, int layer,
                                    const std::vector<TokenIds>& prefixes);
Eigen::VectorXd collect_key(const ModelParams& params, const BiasProbe& text, int layer,
                            const std::vector<TokenIds>& prefixes);
KeySet collect_keys(const ModelParams& params, const std::vector<BiasProbe>& texts, int layer,
                    const std::vector<TokenIds>& prefixes);

// C = sum of k k^T over up to max_samples token positions, in corpus order.
SecondMoment second_moment(const ModelParams& params, const std::vector<TokenIds>& corpus, int layer,
                           long max_samples);

// Next-token distribution with P(he) and P(she) both replaced by their mean.
Eigen::VectorXd debias_target(const Eigen::VectorXd& dist, int he_id, int she_id);
Eigen::VectorXd debias_target(const ModelParams& params, const BiasProbe& text);

// One v* problem: the same text under several prefixes, a shared target.
struct VStarProblem {
  int layer = 0;
  std::vector<TokenIds> sequences;  // prefix + text
  std::vector<int> positions;       // last occupation token in each sequence
  Eigen::VectorXd target;           // o*
};

VStarProblem make_v_star_problem(const ModelParams& params, const BiasProbe& text, int layer,
                                 const std::vector<TokenIds>& prefixes);

// Mean soft cross-entropy -sum o* log p over the sequences, with m at
// (layer, position) set to z, and its gradient with respect to z.
std::pair<double, Eigen::VectorXd> v_star_loss_and_grad(const Weights<double>& params,
                                                        const VStarProblem& problem,
                                                        const Eigen::VectorXd& z);

struct VStarResult {
  Eigen::VectorXd z;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// Adam on z from `init`; returns the best iterate seen.
VStarResult optimize_v_star(const Weights<double>& params, const VStarProblem& problem,
                            const Eigen::VectorXd& init, const VStarOptions& options);

// m_hat for layer l: m_original_at_l + r* / (l_e - l + 1).
Eigen::MatrixXd spread_target(const Eigen::MatrixXd& m_original_at_l, const Eigen::MatrixXd& r_star,
                              int layer, int target_layer);

// (V E^T - W0 E E^T)(E E^T + C + ridge I)^{-1} via a symmetric solve in 64-bit.
// Throws std::runtime_error when the system is numerically singular.
Eigen::MatrixXd solve_delta(const Eigen::MatrixXd& W0, const Eigen::MatrixXd& E, const Eigen::MatrixXd& V,
                            const Eigen::MatrixXd& C, double ridge = 0.0);

// |W (E E^T + C) - (V E^T + W0 C)|_F, the normal-equation residual (ridge excluded).
double normal_residual(const Eigen::MatrixXd& W, const Eigen::MatrixXd& W0, const Eigen::MatrixXd& E,
                       const Eigen::MatrixXd& V, const Eigen::MatrixXd& C);

struct LayerEditReport {
  int layer = 0;
  double delta_fro = 0.0;
  double residual = 0.0;
  double ridge_lambda = 0.0;
  int key_count = 0;
  int target_count = 0;
  long sample_count = 0;
  double mean_r_star_norm = 0.0;
};

struct EditReport {
  int target_layer = 0;
  double mean_v_star_initial_loss = 0.0;
  double mean_v_star_final_loss = 0.0;
  std::vector<LayerEditReport> layers;

  std::string to_jsonl() const;
};

struct EditResult {
  ModelParams params;
  EditReport report;
};

// Input params are never modified; the edited copy is returned only if every
// layer succeeded.
EditResult apply_lsdm(const ModelParams& params, const EditPlan& plan);

// Layer placements used by the ablation: a third of the stack, at least one layer.
std::vector<int> placement_layers(const std::string& placement, int n_layers);

// Short prefixes sampled from the model: lengths uniform in [min_len, max_len],
// each started from `start_id` and closed with `end_id`. The empty prefix comes first.
std::vector<TokenIds> sample_prefixes(const ModelParams& params, int count, int min_len, int max_len,
                                      int start_id, int end_id, std::uint64_t seed);

}  // namespace lsdm
