#include "lsdm/generate.hpp"

#include <algorithm>
#include <stdexcept>

namespace lsdm {

int sample_token(const Eigen::VectorXd& logits, double temperature, Rng& rng) {
  if (logits.size() == 0) throw std::invalid_argument("sample_token: empty logits");
  if (temperature <= 0.0) {
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    return static_cast<int>(best);
  }
  const Eigen::VectorXd p = next_token_distribution(logits / temperature);
  const double u = uniform01(rng);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    acc += p(i);
    if (u < acc) return static_cast<int>(i);
  }
  // u landed in the rounding gap above the accumulated mass.
  Eigen::Index last = p.size() - 1;
  while (last > 0 && p(last) == 0.0) --last;
  return static_cast<int>(last);
}

TokenIds sample_sequence(const ModelParams& params, TokenIds prompt, int length, double temperature,
                         Rng& rng) {
  if (prompt.empty()) throw std::invalid_argument("sample_sequence: empty prompt");
  if (length > params.config.max_seq)
    throw std::invalid_argument("sample_sequence: length exceeds max_seq");
  while (static_cast<int>(prompt.size()) < length) {
    const auto out = forward(params, prompt);
    const Eigen::VectorXd row = out.logits.row(out.logits.rows() - 1).transpose().cast<double>();
    prompt.push_back(sample_token(row, temperature, rng));
  }
  return prompt;
}

TokenIds greedy_continue(const ModelParams& params, TokenIds prompt, int n_new) {
  Rng unused(0);
  const int length = std::min<int>(params.config.max_seq, static_cast<int>(prompt.size()) + n_new);
  return sample_sequence(params, std::move(prompt), length, 0.0, unused);
}

}  // namespace lsdm
