#pragma once

// Three-run causal tracing: clean, corrupted-embedding, and corrupted-with-
// restoration passes, aggregated into AIE grids.

#include "lsdm/corpus.hpp"
#include "lsdm/model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lsdm {

struct PronounProbs {
  double he = 0.0;
  double she = 0.0;
  double gb() const { return std::abs(he - she); }
  double sp() const { return he + she; }
};

PronounProbs pronoun_probs(const Eigen::VectorXd& dist, const BiasProbe& probe);
PronounProbs pronoun_probs(const ModelParams& params, const BiasProbe& probe);

// |P(he) - P(she)| after the probe's last token.
double p_gb(const ModelParams& params, const BiasProbe& probe);

struct NoiseSpec {
  double multiplier = 3.0;
  std::uint64_t seed = 0;
  std::optional<Span> span;  // tokens to corrupt; all when empty
};

// Adds N(0, (multiplier * embedding_std)^2) to every coordinate of the rows
// in the span.
Mat<float> corrupt_embeddings(const Mat<float>& embeddings, const NoiseSpec& noise,
                              double embedding_std);

struct EffectSample {
  double p_clean_gb = 0.0;
  double p_corrupt_gb = 0.0;
  double p_restored_gb = 0.0;
  double te = 0.0;
  double ie = 0.0;
};

// Clean and corrupted runs of one probe, reused across many restorations.
struct TraceContext {
  const ModelParams* params = nullptr;
  BiasProbe probe;
  ActivationRecord<float> clean;
  ActivationRecord<float> corrupt;
  Mat<float> corrupted_embedding;
  std::vector<int> corrupted_rows;
  double p_clean_gb = 0.0;
  double p_corrupt_gb = 0.0;
};

TraceContext prepare_trace(const ModelParams& params, const BiasProbe& probe, const NoiseSpec& noise,
                           double embedding_std);

// P(gb) of the corrupted run with `spec` applied on top. Embedding patches in
// `spec` take precedence over the corruption at the same row.
double restored_p_gb(const TraceContext& ctx, const InterventionSpec& spec);

EffectSample effect(const TraceContext& ctx, const InterventionSpec& spec);

// Convenience wrapper: spec patches are expected to carry clean-run values.
EffectSample three_run(const ModelParams& params, const BiasProbe& probe, const NoiseSpec& noise,
                       const InterventionSpec& spec);

// Layers restored by a window centred on `layer`, clipped to [0, n_layers).
// window 10 gives [l-4, l+5].
std::pair<int, int> window_bounds(int layer, int window, int n_layers);

enum class TokenRole { first, occupation, middle, last };
inline constexpr int kRoleCount = 4;
std::string to_string(TokenRole r);
TokenRole token_role(const BiasProbe& probe, int token);

struct TraceGrid {
  Site component = Site::hidden_h;
  int window = 1;
  std::optional<Site> severed;
  std::vector<std::string> rows;  // role labels
  Eigen::MatrixXd aie;            // rows x n_layers
  std::vector<int> row_counts;    // probes contributing to each row
  double ate = 0.0;
  int n_probes = 0;
};

struct TraceOptions {
  int window = 10;
  NoiseSpec noise;
  bool occupation_only = false;  // corrupt each probe's occupation span only
};

// Restoring `component` at token i over the window around each layer. Probe p
// draws its noise from derive_seed(noise.seed, {p}).
TraceGrid trace_grid(const ModelParams& params, const std::vector<BiasProbe>& probes, Site component,
                     const TraceOptions& options);

// As trace_grid, but the `sever` component (mlp_m or attn_a) at the restored
// token is frozen to its corrupted-run value at every layer.
TraceGrid severed_trace(const ModelParams& params, const std::vector<BiasProbe>& probes, Site sever,
                        Site restore_component, const TraceOptions& options);

// Per-probe IE for one cell, used by trace_grid and handy as an oracle.
double cell_ie(const TraceContext& ctx, Site component, int token, int layer, int window,
               std::optional<Site> sever = std::nullopt);

// Writes <stem>.csv and <stem>.svg. Throws before writing if any value is not
// finite.
std::string grid_csv(const TraceGrid& grid);
std::string grid_svg(const TraceGrid& grid, const std::string& title);
void emit_grid(const TraceGrid& grid, const std::filesystem::path& stem, const std::string& title = "");

}  // namespace lsdm
