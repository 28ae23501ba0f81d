#include "lsdm/trace.hpp"

#include "lsdm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace lsdm {

PronounProbs pronoun_probs(const Eigen::VectorXd& dist, const BiasProbe& probe) {
  if (probe.he_id < 0 || probe.she_id < 0 || probe.he_id >= dist.size() || probe.she_id >= dist.size())
    throw std::out_of_range("pronoun ids outside the distribution");
  return {dist(probe.he_id), dist(probe.she_id)};
}

PronounProbs pronoun_probs(const ModelParams& params, const BiasProbe& probe) {
  const auto out = forward(params, probe.tokens);
  return pronoun_probs(next_token_distribution(out.logits.row(out.logits.rows() - 1).transpose()), probe);
}

double p_gb(const ModelParams& params, const BiasProbe& probe) { return pronoun_probs(params, probe).gb(); }

namespace {

double last_row_gb(const Mat<float>& logits, const BiasProbe& probe) {
  return pronoun_probs(next_token_distribution(logits.row(logits.rows() - 1).transpose()), probe).gb();
}

Span noise_span(const NoiseSpec& noise, int n) {
  Span s = noise.span.value_or(Span{0, n});
  if (s.begin < 0 || s.end > n || s.begin > s.end) throw std::out_of_range("noise span outside sequence");
  return s;
}

}  // namespace

Mat<float> corrupt_embeddings(const Mat<float>& embeddings, const NoiseSpec& noise,
                              double embedding_std) {
  if (!(noise.multiplier >= 0.0)) throw std::invalid_argument("noise multiplier must be >= 0");
  Mat<float> out = embeddings;
  if (noise.multiplier == 0.0) return out;
  const Span s = noise_span(noise, static_cast<int>(embeddings.rows()));
  Rng rng(noise.seed);
  std::normal_distribution<double> gauss(0.0, noise.multiplier * embedding_std);
  for (int i = s.begin; i < s.end; ++i)
    for (int j = 0; j < out.cols(); ++j) out(i, j) = static_cast<float>(out(i, j) + gauss(rng));
  return out;
}

TraceContext prepare_trace(const ModelParams& params, const BiasProbe& probe, const NoiseSpec& noise,
                           double embedding_std) {
  TraceContext ctx;
  ctx.params = &params;
  ctx.probe = probe;
  auto clean = forward(params, probe.tokens);
  ctx.p_clean_gb = last_row_gb(clean.logits, probe);
  ctx.clean = std::move(clean.record);

  ctx.corrupted_embedding = corrupt_embeddings(ctx.clean.embedding, noise, embedding_std);
  if (noise.multiplier > 0.0) {
    const Span s = noise_span(noise, static_cast<int>(probe.tokens.size()));
    for (int i = s.begin; i < s.end; ++i) ctx.corrupted_rows.push_back(i);
  }
  InterventionSpec noise_spec;
  for (int i : ctx.corrupted_rows)
    noise_spec.set_vector(Site::embedding, 0, i,
                          ctx.corrupted_embedding.row(i).transpose().cast<double>());
  auto corrupt = forward(params, probe.tokens, &noise_spec);
  ctx.p_corrupt_gb = last_row_gb(corrupt.logits, probe);
  ctx.corrupt = std::move(corrupt.record);
  return ctx;
}

double restored_p_gb(const TraceContext& ctx, const InterventionSpec& spec) {
  InterventionSpec full = spec;
  for (int i : ctx.corrupted_rows) {
    if (spec.contains(Site::embedding, 0, i)) continue;
    full.set_vector(Site::embedding, 0, i, ctx.corrupted_embedding.row(i).transpose().cast<double>());
  }
  const auto out = forward(*ctx.params, ctx.probe.tokens, &full);
  return last_row_gb(out.logits, ctx.probe);
}

EffectSample effect(const TraceContext& ctx, const InterventionSpec& spec) {
  EffectSample e;
  e.p_clean_gb = ctx.p_clean_gb;
  e.p_corrupt_gb = ctx.p_corrupt_gb;
  e.p_restored_gb = restored_p_gb(ctx, spec);
  e.te = e.p_clean_gb - e.p_corrupt_gb;
  e.ie = e.p_restored_gb - e.p_corrupt_gb;
  return e;
}

EffectSample three_run(const ModelParams& params, const BiasProbe& probe, const NoiseSpec& noise,
                       const InterventionSpec& spec) {
  const auto ctx = prepare_trace(params, probe, noise, embedding_std(params));
  return effect(ctx, spec);
}

std::pair<int, int> window_bounds(int layer, int window, int n_layers) {
  if (window < 1) throw std::invalid_argument("window must be >= 1");
  if (layer < 0 || layer >= n_layers) throw std::out_of_range("window centre outside the model");
  const int below = (window - 1) / 2;
  const int above = window - 1 - below;
  return {std::max(0, layer - below), std::min(n_layers - 1, layer + above)};
}

std::string to_string(TokenRole r) {
  switch (r) {
    case TokenRole::first: return "first";
    case TokenRole::occupation: return "occupation";
    case TokenRole::middle: return "middle";
    case TokenRole::last: return "last";
  }
  return "?";
}

TokenRole token_role(const BiasProbe& probe, int token) {
  const int n = static_cast<int>(probe.tokens.size());
  if (token < 0 || token >= n) throw std::out_of_range("token outside probe");
  if (token >= probe.occupation_span.begin && token < probe.occupation_span.end) return TokenRole::occupation;
  if (token == n - 1) return TokenRole::last;
  if (token == 0) return TokenRole::first;
  return TokenRole::middle;
}

double cell_ie(const TraceContext& ctx, Site component, int token, int layer, int window,
               std::optional<Site> sever) {
  const int L = ctx.params->config.n_layers;
  if (component == Site::embedding) throw std::invalid_argument("cannot trace the embedding site");
  const auto [lo, hi] = window_bounds(layer, window, L);
  InterventionSpec spec;
  spec.restore_window(ctx.clean, component, lo, hi, token);
  if (sever) {
    if (*sever != Site::mlp_m && *sever != Site::attn_a)
      throw std::invalid_argument("only mlp_m or attn_a can be severed");
    if (*sever == component) throw std::invalid_argument("severed component equals the restored one");
    for (int l = 0; l < L; ++l) spec.freeze_to(ctx.corrupt, *sever, l, token);
  }
  return restored_p_gb(ctx, spec) - ctx.p_corrupt_gb;
}

namespace {

TraceGrid run_grid(const ModelParams& params, const std::vector<BiasProbe>& probes, Site component,
                   std::optional<Site> sever, const TraceOptions& opt) {
  if (probes.empty()) throw std::invalid_argument("trace: empty probe list");
  if (component == Site::hidden_h && opt.window != 1)
    throw std::invalid_argument("trace: hidden_h is traced with window 1");
  if (component == Site::embedding || component == Site::mlp_key_k)
    throw std::invalid_argument("trace: component must be hidden_h, mlp_m or attn_a");
  window_bounds(0, opt.window, params.config.n_layers);

  const int L = params.config.n_layers;
  const double emb_std = embedding_std(params);
  TraceGrid g;
  g.component = component;
  g.window = opt.window;
  g.severed = sever;
  for (int r = 0; r < kRoleCount; ++r) g.rows.push_back(to_string(static_cast<TokenRole>(r)));
  g.aie = Eigen::MatrixXd::Zero(kRoleCount, L);
  g.row_counts.assign(kRoleCount, 0);
  g.n_probes = static_cast<int>(probes.size());

  double te_sum = 0.0;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    NoiseSpec noise = opt.noise;
    noise.seed = derive_seed(opt.noise.seed, {p});
    if (opt.occupation_only) noise.span = probes[p].occupation_span;
    const auto ctx = prepare_trace(params, probes[p], noise, emb_std);
    te_sum += ctx.p_clean_gb - ctx.p_corrupt_gb;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(kRoleCount, L);
    std::vector<int> counts(kRoleCount, 0);
    const int n = static_cast<int>(probes[p].tokens.size());
    for (int i = 0; i < n; ++i) {
      const int r = static_cast<int>(token_role(probes[p], i));
      ++counts[r];
      for (int l = 0; l < L; ++l) sums(r, l) += cell_ie(ctx, component, i, l, opt.window, sever);
    }
    for (int r = 0; r < kRoleCount; ++r) {
      if (!counts[r]) continue;
      g.aie.row(r) += sums.row(r) / counts[r];
      ++g.row_counts[r];
    }
  }
  for (int r = 0; r < kRoleCount; ++r)
    if (g.row_counts[r]) g.aie.row(r) /= g.row_counts[r];
  g.ate = te_sum / static_cast<double>(probes.size());
  return g;
}

}  // namespace

TraceGrid trace_grid(const ModelParams& params, const std::vector<BiasProbe>& probes, Site component,
                     const TraceOptions& options) {
  return run_grid(params, probes, component, std::nullopt, options);
}

TraceGrid severed_trace(const ModelParams& params, const std::vector<BiasProbe>& probes, Site sever,
                        Site restore_component, const TraceOptions& options) {
  return run_grid(params, probes, restore_component, sever, options);
}

}  // namespace lsdm
