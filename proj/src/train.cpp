#include "lsdm/train.hpp"

#include "lsdm/rng.hpp"

#include <algorithm>
#include <cmath>

namespace lsdm {

TrainingDiverged::TrainingDiverged(int s)
    : std::runtime_error("training diverged: non-finite loss at step " + std::to_string(s)), step(s) {}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams w = ModelParams::zeros(config);
  Rng rng(derive_seed(seed, {0x1417}));
  const float residual_std = 0.02f / std::sqrt(2.0f * static_cast<float>(config.n_layers));
  visit_tensors(w, [&](const std::string& name, auto& t) {
    using TT = std::decay_t<decltype(t)>;
    if constexpr (TT::ColsAtCompileTime == 1) {
      if (name.ends_with(".gain") || name.ends_with("gain")) t.setOnes();
    } else {
      const bool residual = name.ends_with("w_out") || name.ends_with("w_proj");
      std::normal_distribution<float> dist(0.0f, residual ? residual_std : 0.02f);
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
    }
  });
  return w;
}

namespace {

// Accumulates gradients of the summed token NLL (scaled by `scale`) for one
// sequence; returns the summed NLL.
double accumulate_sequence(const ModelParams& params, const TokenIds& seq, float scale,
                           ModelParams& grads, ForwardCache<float>& cache) {
  forward_cached(params, seq, nullptr, cache);
  const Eigen::Index n = static_cast<Eigen::Index>(seq.size());
  Mat<float> dlogits = Mat<float>::Zero(n, params.config.vocab_size);
  double nll = 0.0;
  for (Eigen::Index t = 0; t + 1 < n; ++t) {
    const auto row = cache.logits.row(t);
    const float mx = row.maxCoeff();
    Eigen::RowVectorXf e = (row.array() - mx).exp();
    const float sum = e.sum();
    nll -= static_cast<double>(row(seq[t + 1]) - mx - std::log(sum));
    e /= sum;
    e(seq[t + 1]) -= 1.0f;
    dlogits.row(t) = e * scale;
  }
  backward(params, cache, dlogits, &grads, -1);
  return nll;
}

}  // namespace

double corpus_loss(const ModelParams& params, std::span<const TokenIds> corpus) {
  double nll = 0.0;
  long count = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    const auto [s, c] = sequence_nll(params, seq);
    nll += s;
    count += c;
  }
  if (count == 0) throw std::invalid_argument("corpus_loss: no predictable tokens");
  return nll / static_cast<double>(count);
}

AdamOptimizer::AdamOptimizer(const ModelParams& shape, const TrainHyper& hyper,
                             std::function<bool(const std::string&)> trainable)
    : hyper_(hyper),
      trainable_(std::move(trainable)),
      m_(ModelParams::zeros(shape.config)),
      v_(ModelParams::zeros(shape.config)) {}

double AdamOptimizer::step(ModelParams& params, ModelParams& grads) {
  auto p = tensor_spans(params);
  auto g = tensor_spans(grads);
  auto m = tensor_spans(m_);
  auto v = tensor_spans(v_);
  double sq = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (trainable_ && !trainable_(g[i].first)) continue;
    for (float x : g[i].second) sq += static_cast<double>(x) * x;
  }
  const double norm = std::sqrt(sq);
  const double clip =
      hyper_.clip_norm > 0.0 && norm > hyper_.clip_norm ? hyper_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
  const float b1 = static_cast<float>(hyper_.beta1);
  const float b2 = static_cast<float>(hyper_.beta2);
  const float step_size = static_cast<float>(hyper_.learning_rate / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(hyper_.adam_eps);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (trainable_ && !trainable_(p[i].first)) continue;
    auto& pi = p[i].second;
    auto& gi = g[i].second;
    auto& mi = m[i].second;
    auto& vi = v[i].second;
    for (std::size_t j = 0; j < pi.size(); ++j) {
      const float gj = gi[j] * static_cast<float>(clip);
      mi[j] = b1 * mi[j] + (1.0f - b1) * gj;
      vi[j] = b2 * vi[j] + (1.0f - b2) * gj * gj;
      pi[j] -= step_size * mi[j] / (std::sqrt(vi[j] * inv_bc2) + eps);
    }
  }
  return norm;
}

TrainResult train_toy(const std::vector<TokenIds>& corpus, const ModelConfig& config,
                      const TrainHyper& hyper) {
  if (corpus.empty()) throw std::invalid_argument("train_toy: empty corpus");
  if (hyper.steps < 0 || hyper.batch < 1) throw std::invalid_argument("train_toy: bad hyperparameters");
  for (const auto& seq : corpus) validate_tokens(config, seq);

  TrainResult result;
  result.params = init_params(config, hyper.seed);
  const std::size_t eval_n = std::min<std::size_t>(corpus.size(), 256);
  const std::span<const TokenIds> eval_slice(corpus.data(), eval_n);
  result.initial_loss = corpus_loss(result.params, eval_slice);

  std::function<bool(const std::string&)> trainable;
  if (hyper.freeze_embeddings)
    trainable = [](const std::string& name) { return name != "tok_embedding" && name != "pos_embedding"; };
  AdamOptimizer opt(result.params, hyper, trainable);
  Rng rng(derive_seed(hyper.seed, {0xba7c4}));
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  ModelParams grads = ModelParams::zeros(config);
  ForwardCache<float> cache;
  result.batch_losses.reserve(hyper.steps);
  for (int step = 0; step < hyper.steps; ++step) {
    std::vector<std::size_t> idx(hyper.batch);
    for (auto& i : idx) i = pick(rng);
    long tokens = 0;
    for (auto i : idx) tokens += static_cast<long>(corpus[i].size()) - 1;
    if (tokens <= 0) continue;
    visit_tensors(grads, [](const std::string&, auto& t) { t.setZero(); });
    double nll = 0.0;
    const float scale = 1.0f / static_cast<float>(tokens);
    try {
      for (auto i : idx) nll += accumulate_sequence(result.params, corpus[i], scale, grads, cache);
    } catch (const NonFiniteError&) {
      throw TrainingDiverged(step);
    }
    const double loss = nll / static_cast<double>(tokens);
    if (!std::isfinite(loss)) throw TrainingDiverged(step);
    result.batch_losses.push_back(loss);
    opt.step(result.params, grads);
    if (!all_finite(result.params)) throw TrainingDiverged(step);
  }
  result.final_loss = corpus_loss(result.params, eval_slice);
  if (!std::isfinite(result.final_loss)) throw TrainingDiverged(hyper.steps);
  return result;
}

}  // namespace lsdm
