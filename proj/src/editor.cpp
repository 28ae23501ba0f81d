#include "lsdm/editor.hpp"

#include "lsdm/generate.hpp"
#include "lsdm/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lsdm {

void EditPlan::validate(const ModelConfig& config) const {
  if (layers.empty()) throw std::invalid_argument("edit plan: no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 0 || layers[i] >= config.n_layers)
      throw std::invalid_argument("edit plan: layer " + std::to_string(layers[i]) + " outside the model");
    if (i && layers[i] <= layers[i - 1]) throw std::invalid_argument("edit plan: layers must be strictly ascending");
  }
  if (texts.empty()) throw std::invalid_argument("edit plan: no edit texts");
  if (prefixes.empty()) throw std::invalid_argument("edit plan: at least one prefix (possibly empty) is required");
  if (covariance_corpus.empty()) throw std::invalid_argument("edit plan: empty covariance corpus");
  if (cov_max_samples < 1) throw std::invalid_argument("edit plan: cov_max_samples must be >= 1");
  if (!(cov_scale >= 0.0)) throw std::invalid_argument("edit plan: cov_scale must be >= 0");
  if (!(ridge_factor >= 0.0)) throw std::invalid_argument("edit plan: ridge_factor must be >= 0");
  if (v_star.steps < 0) throw std::invalid_argument("edit plan: negative v* steps");
}

int key_position(const BiasProbe& text, const TokenIds& prefix) {
  if (text.occupation_span.size() <= 0) throw std::invalid_argument("edit text has an empty occupation span");
  return static_cast<int>(prefix.size()) + text.occupation_span.end - 1;
}

namespace {

TokenIds with_prefix(const TokenIds& prefix, const TokenIds& tokens, int max_seq) {
  TokenIds seq = prefix;
  seq.insert(seq.end(), tokens.begin(), tokens.end());
  if (static_cast<int>(seq.size()) > max_seq)
    throw std::invalid_argument("prefix pushes sequence past max_seq (" + std::to_string(seq.size()) + " > " +
                                std::to_string(max_seq) + ")");
  return seq;
}

}  // namespace

KeyAndOutput collect_key_and_output(const ModelParams& params, const BiasProbe& text, int layer,
                                    const std::vector<TokenIds>& prefixes) {
  const auto& cfg = params.config;
  if (prefixes.empty()) throw std::invalid_argument("collect_key: need at least one prefix");
  if (layer < 0 || layer >= cfg.n_layers) throw std::out_of_range("collect_key: layer outside the model");
  KeyAndOutput out{Eigen::VectorXd::Zero(cfg.d_ff), Eigen::VectorXd::Zero(cfg.d_model)};
  for (const auto& prefix : prefixes) {
    const auto seq = with_prefix(prefix, text.tokens, cfg.max_seq);
    const int pos = key_position(text, prefix);
    const auto res = forward(params, seq);
    out.key += res.record.k[layer].row(pos).transpose().cast<double>();
    out.output += res.record.m[layer].row(pos).transpose().cast<double>();
  }
  out.key /= static_cast<double>(prefixes.size());
  out.output /= static_cast<double>(prefixes.size());
  return out;
}

Eigen::VectorXd collect_key(const ModelParams& params, const BiasProbe& text, int layer,
                            const std::vector<TokenIds>& prefixes) {
  return collect_key_and_output(params, text, layer, prefixes).key;
}

KeySet collect_keys(const ModelParams& params, const std::vector<BiasProbe>& texts, int layer,
                    const std::vector<TokenIds>& prefixes) {
  KeySet ks;
  ks.layer = layer;
  ks.keys.resize(params.config.d_ff, static_cast<Eigen::Index>(texts.size()));
  for (std::size_t i = 0; i < texts.size(); ++i) {
    ks.keys.col(static_cast<Eigen::Index>(i)) = collect_key(params, texts[i], layer, prefixes);
    ks.sources.emplace_back(texts[i].occupation, texts[i].text);
  }
  if (!ks.keys.allFinite()) throw std::runtime_error("collect_keys: non-finite key");
  return ks;
}

SecondMoment second_moment(const ModelParams& params, const std::vector<TokenIds>& corpus, int layer,
                           long max_samples) {
  if (corpus.empty()) throw std::invalid_argument("second_moment: empty corpus");
  if (layer < 0 || layer >= params.config.n_layers) throw std::out_of_range("second_moment: layer outside the model");
  SecondMoment sm;
  sm.layer = layer;
  sm.C = Eigen::MatrixXd::Zero(params.config.d_ff, params.config.d_ff);
  for (const auto& seq : corpus) {
    if (sm.sample_count >= max_samples) break;
    if (seq.empty()) continue;
    const auto res = forward(params, seq);
    const long take = std::min<long>(static_cast<long>(seq.size()), max_samples - sm.sample_count);
    const Eigen::MatrixXd K = res.record.k[layer].topRows(take).cast<double>();
    sm.C.noalias() += K.transpose() * K;
    sm.sample_count += take;
  }
  if (sm.sample_count == 0) throw std::runtime_error("second_moment: no samples collected");
  // GEMM blocking can leave the two triangles a few ulps apart.
  sm.C = (0.5 * (sm.C + sm.C.transpose())).eval();
  return sm;
}

Eigen::VectorXd debias_target(const Eigen::VectorXd& dist, int he_id, int she_id) {
  if (he_id < 0 || she_id < 0 || he_id >= dist.size() || she_id >= dist.size() || he_id == she_id)
    throw std::invalid_argument("debias_target: bad pronoun ids");
  Eigen::VectorXd o = dist;
  const double mean = 0.5 * (dist(he_id) + dist(she_id));
  o(he_id) = mean;
  o(she_id) = mean;
  return o;
}

Eigen::VectorXd debias_target(const ModelParams& params, const BiasProbe& text) {
  const auto res = forward(params, text.tokens);
  return debias_target(next_token_distribution(res.logits.row(res.logits.rows() - 1).transpose()), text.he_id,
                       text.she_id);
}

VStarProblem make_v_star_problem(const ModelParams& params, const BiasProbe& text, int layer,
                                 const std::vector<TokenIds>& prefixes) {
  if (layer < 0 || layer >= params.config.n_layers) throw std::out_of_range("v*: layer outside the model");
  if (prefixes.empty()) throw std::invalid_argument("v*: need at least one prefix");
  VStarProblem p;
  p.layer = layer;
  for (const auto& prefix : prefixes) {
    p.sequences.push_back(with_prefix(prefix, text.tokens, params.config.max_seq));
    p.positions.push_back(key_position(text, prefix));
  }
  p.target = debias_target(params, text);
  return p;
}

std::pair<double, Eigen::VectorXd> v_star_loss_and_grad(const Weights<double>& params,
                                                        const VStarProblem& problem,
                                                        const Eigen::VectorXd& z) {
  if (problem.sequences.empty()) throw std::invalid_argument("v*: empty problem");
  double loss = 0.0;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.config.d_model);
  ForwardCache<double> cache;
  const double mass = problem.target.sum();
  for (std::size_t j = 0; j < problem.sequences.size(); ++j) {
    InterventionSpec spec;
    spec.set_vector(Site::mlp_m, problem.layer, problem.positions[j], z);
    forward_cached(params, problem.sequences[j], &spec, cache);
    const auto n = cache.logits.rows();
    const Eigen::VectorXd logp = log_softmax(cache.logits.row(n - 1).transpose());
    loss -= problem.target.dot(logp);
    Mat<double> dlogits = Mat<double>::Zero(n, cache.logits.cols());
    dlogits.row(n - 1) = (logp.array().exp() * mass - problem.target.array()).matrix().transpose();
    const Mat<double> dh = backward<double>(params, cache, dlogits, nullptr, problem.layer);
    grad += dh.row(problem.positions[j]).transpose();
  }
  const double N = static_cast<double>(problem.sequences.size());
  return {loss / N, grad / N};
}

VStarResult optimize_v_star(const Weights<double>& params, const VStarProblem& problem,
                            const Eigen::VectorXd& init, const VStarOptions& options) {
  if (init.size() != params.config.d_model) throw std::invalid_argument("v*: init has the wrong dimension");
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  VStarResult r;
  Eigen::VectorXd z = init;
  auto [loss, g] = v_star_loss_and_grad(params, problem, z);
  if (!std::isfinite(loss)) throw std::runtime_error("v*: non-finite loss at init");
  r.z = z;
  r.initial_loss = r.final_loss = loss;
  Eigen::VectorXd m = Eigen::VectorXd::Zero(z.size()), v = Eigen::VectorXd::Zero(z.size());
  for (int t = 1; t <= options.steps; ++t) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseProduct(g);
    const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
    z.array() -= options.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    std::tie(loss, g) = v_star_loss_and_grad(params, problem, z);
    if (!std::isfinite(loss) || !g.allFinite()) throw std::runtime_error("v*: diverged at step " + std::to_string(t));
    if (loss < r.final_loss) {
      r.final_loss = loss;
      r.z = z;
    }
  }
  return r;
}

Eigen::MatrixXd spread_target(const Eigen::MatrixXd& m_original_at_l, const Eigen::MatrixXd& r_star, int layer,
                              int target_layer) {
  if (layer > target_layer) throw std::invalid_argument("spread_target: layer above the target layer");
  if (m_original_at_l.rows() != r_star.rows() || m_original_at_l.cols() != r_star.cols())
    throw std::invalid_argument("spread_target: shape mismatch");
  return m_original_at_l + r_star / static_cast<double>(target_layer - layer + 1);
}

Eigen::MatrixXd solve_delta(const Eigen::MatrixXd& W0, const Eigen::MatrixXd& E, const Eigen::MatrixXd& V,
                            const Eigen::MatrixXd& C, double ridge) {
  const auto d = W0.rows(), f = W0.cols();
  if (E.rows() != f || V.rows() != d || V.cols() != E.cols() || C.rows() != f || C.cols() != f)
    throw std::invalid_argument("solve_delta: inconsistent shapes");
  if (ridge < 0) throw std::invalid_argument("solve_delta: negative ridge");
  const Eigen::MatrixXd EEt = E * E.transpose();
  Eigen::MatrixXd A = EEt + C;
  A.diagonal().array() += ridge;
  const Eigen::MatrixXd rhs = (V * E.transpose() - W0 * EEt).transpose();

  constexpr double min_rcond = 1e-15;
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() == Eigen::Success && llt.rcond() > min_rcond) return llt.solve(rhs).transpose();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  const double rc = ldlt.info() == Eigen::Success ? ldlt.rcond() : 0.0;
  if (rc <= min_rcond) {
    std::ostringstream os;
    os << "solve_delta: singular system (reciprocal condition estimate " << rc << ")";
    throw std::runtime_error(os.str());
  }
  return ldlt.solve(rhs).transpose();
}

double normal_residual(const Eigen::MatrixXd& W, const Eigen::MatrixXd& W0, const Eigen::MatrixXd& E,
                       const Eigen::MatrixXd& V, const Eigen::MatrixXd& C) {
  const Eigen::MatrixXd EEt = E * E.transpose();
  return (W * (EEt + C) - (V * E.transpose() + W0 * C)).norm();
}

std::string EditReport::to_jsonl() const {
  std::string out;
  for (const auto& l : layers) {
    nlohmann::ordered_json j;
    j["layer"] = l.layer;
    j["target_layer"] = target_layer;
    j["delta_fro"] = l.delta_fro;
    j["residual"] = l.residual;
    j["key_count"] = l.key_count;
    j["target_count"] = l.target_count;
    j["ridge_lambda"] = l.ridge_lambda;
    j["sample_count"] = l.sample_count;
    j["mean_r_star_norm"] = l.mean_r_star_norm;
    j["v_star_initial_loss"] = mean_v_star_initial_loss;
    j["v_star_final_loss"] = mean_v_star_final_loss;
    out += j.dump() + "\n";
  }
  return out;
}

EditResult apply_lsdm(const ModelParams& params, const EditPlan& plan) {
  const auto& cfg = params.config;
  plan.validate(cfg);
  const int le = plan.target_layer();
  const auto n = static_cast<Eigen::Index>(plan.texts.size());

  // v* per text on the unedited model
  const Weights<double> wd = params.cast<double>();
  TargetSet ts;
  ts.layer = le;
  ts.v_star.resize(cfg.d_model, n);
  ts.m_original.resize(cfg.d_model, n);
  EditReport report;
  report.target_layer = le;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& text = plan.texts[static_cast<std::size_t>(i)];
    const auto ko = collect_key_and_output(params, text, le, plan.prefixes);
    const auto problem = make_v_star_problem(params, text, le, plan.prefixes);
    const auto vs = optimize_v_star(wd, problem, ko.output, plan.v_star);
    ts.v_star.col(i) = vs.z;
    ts.m_original.col(i) = ko.output;
    report.mean_v_star_initial_loss += vs.initial_loss / static_cast<double>(n);
    report.mean_v_star_final_loss += vs.final_loss / static_cast<double>(n);
  }
  ts.r_star = ts.v_star - ts.m_original;
  const double mean_r = ts.r_star.colwise().norm().mean();

  ModelParams work = params;
  for (int l : plan.layers) {
    Eigen::MatrixXd E(cfg.d_ff, n), M(cfg.d_model, n);
    const ModelParams& source = plan.reread_m_original ? work : params;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& text = plan.texts[static_cast<std::size_t>(i)];
      E.col(i) = collect_key(work, text, l, plan.prefixes);
      M.col(i) = collect_key_and_output(source, text, l, plan.prefixes).output;
    }
    const Eigen::MatrixXd V = spread_target(M, ts.r_star, l, le);
    auto sm = second_moment(work, plan.covariance_corpus, l, plan.cov_max_samples);
    const Eigen::MatrixXd C = plan.cov_scale * sm.C;
    const double lambda = plan.ridge_factor * C.trace() / cfg.d_ff;
    const Eigen::MatrixXd W0 = work.layers[l].w_proj.cast<double>();
    const Eigen::MatrixXd delta = solve_delta(W0, E, V, C, lambda);
    const Eigen::MatrixXd W = W0 + delta;
    if (!W.allFinite()) throw std::runtime_error("apply_lsdm: non-finite update at layer " + std::to_string(l));

    LayerEditReport lr;
    lr.layer = l;
    lr.delta_fro = delta.norm();
    lr.residual = normal_residual(W, W0, E, V, C);
    lr.ridge_lambda = lambda;
    lr.key_count = static_cast<int>(n);
    lr.target_count = static_cast<int>(V.cols());
    lr.sample_count = sm.sample_count;
    lr.mean_r_star_norm = mean_r;
    report.layers.push_back(lr);

    work.layers[l].w_proj = W.cast<float>();
  }
  return {std::move(work), std::move(report)};
}

std::vector<int> placement_layers(const std::string& placement, int n_layers) {
  if (n_layers < 1) throw std::invalid_argument("placement: model has no layers");
  const int k = std::max(1, static_cast<int>(std::lround(n_layers / 3.0)));
  int start = 0;
  if (placement == "bottom")
    start = 0;
  else if (placement == "middle")
    start = (n_layers - k) / 2;
  else if (placement == "top")
    start = n_layers - k;
  else {
    // explicit comma list
    std::vector<int> out;
    std::stringstream ss(placement);
    std::string item;
    while (std::getline(ss, item, ',')) {
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(item, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != item.size())
        throw std::invalid_argument("placement: expected bottom|middle|top or a layer list, got '" + placement + "'");
      out.push_back(v);
    }
    if (out.empty()) throw std::invalid_argument("placement: empty layer list");
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out[i] < 0 || out[i] >= n_layers) throw std::invalid_argument("placement: layer outside the model");
      if (i && out[i] <= out[i - 1]) throw std::invalid_argument("placement: layers must be strictly ascending");
    }
    return out;
  }
  std::vector<int> out;
  for (int l = start; l < start + k; ++l) out.push_back(l);
  return out;
}

std::vector<TokenIds> sample_prefixes(const ModelParams& params, int count, int min_len, int max_len,
                                      int start_id, int end_id, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("sample_prefixes: count must be >= 1");
  if (min_len < 2 || max_len < min_len) throw std::invalid_argument("sample_prefixes: bad length range");
  std::vector<TokenIds> out{TokenIds{}};
  for (int j = 1; j < count; ++j) {
    Rng rng(derive_seed(seed, {0x9f, static_cast<std::uint64_t>(j)}));
    const int len = min_len + static_cast<int>(uniform01(rng) * (max_len - min_len + 1));
    TokenIds p = sample_sequence(params, {start_id}, len - 1, 1.0, rng);
    p.push_back(end_id);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace lsdm
