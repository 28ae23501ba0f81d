#pragma once

#include "lsdm/model.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsdm {

struct TrainHyper {
  int steps = 1500;
  int batch = 16;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
  // Adam constants are fixed so runs stay reproducible.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm clip; 0 disables
  // Keep token and position embeddings at their random initialization, so
  // token attributes have to be stored in the layer weights.
  bool freeze_embeddings = false;
};

struct TrainResult {
  ModelParams params;
  double initial_loss = 0.0;  // mean token cross-entropy on the evaluation slice
  double final_loss = 0.0;
  std::vector<double> batch_losses;
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(int step);
  int step;
};

// GPT-2 style initialization: N(0, 0.02) weights, residual projections scaled
// by 1/sqrt(2 L), unit norm gains.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Mean next-token cross-entropy over every predicted position of `corpus`.
double corpus_loss(const ModelParams& params, std::span<const TokenIds> corpus);

// Flat views over every tensor, in visit_tensors order.
template <class T>
std::vector<std::pair<std::string, std::span<T>>> tensor_spans(Weights<T>& w) {
  std::vector<std::pair<std::string, std::span<T>>> out;
  visit_tensors(w, [&](const std::string& name, auto& t) {
    out.emplace_back(name, std::span<T>(t.data(), static_cast<std::size_t>(t.size())));
  });
  return out;
}

// Adam over a Weights<float>; tensors rejected by `trainable` are never touched.
class AdamOptimizer {
 public:
  AdamOptimizer(const ModelParams& shape, const TrainHyper& hyper,
                std::function<bool(const std::string&)> trainable = nullptr);
  // Applies one update; returns the pre-clip global gradient norm over
  // trainable tensors.
  double step(ModelParams& params, ModelParams& grads);

 private:
  TrainHyper hyper_;
  std::function<bool(const std::string&)> trainable_;
  ModelParams m_, v_;
  long t_ = 0;
};

// Trains from init_params(config, hyper.seed) on next-token cross-entropy.
// Deterministic for a fixed seed. Throws TrainingDiverged on a non-finite loss.
TrainResult train_toy(const std::vector<TokenIds>& corpus, const ModelConfig& config,
                      const TrainHyper& hyper);

}  // namespace lsdm
