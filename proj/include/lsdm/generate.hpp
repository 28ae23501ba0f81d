#pragma once

#include "lsdm/model.hpp"
#include "lsdm/rng.hpp"

namespace lsdm {

// Draws from softmax(logits / temperature). temperature <= 0 selects the
// argmax (lowest id on ties).
int sample_token(const Eigen::VectorXd& logits, double temperature, Rng& rng);

// Extends `prompt` one sampled token at a time until it holds `length` tokens.
TokenIds sample_sequence(const ModelParams& params, TokenIds prompt, int length, double temperature,
                         Rng& rng);

// Appends `n_new` greedy tokens (clipped at max_seq).
TokenIds greedy_continue(const ModelParams& params, TokenIds prompt, int n_new);

}  // namespace lsdm
