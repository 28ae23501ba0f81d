#pragma once

// Decoder-only pre-norm transformer with hook points at every residual-stream
// site. Everything is templated on the scalar so the same code path serves
// 32-bit inference/training and 64-bit gradient work.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace lsdm {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using TokenIds = std::vector<int>;

enum class Activation { gelu, relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 0;
  int max_seq = 32;
  double norm_epsilon = 1e-5;
  Activation activation = Activation::gelu;

  int head_dim() const { return d_model / n_heads; }
  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct LayerWeights {
  Vec<T> ln1_gain, ln1_bias;
  Mat<T> w_query, w_key, w_value;  // d_model x d_model
  Mat<T> w_out;                    // attention output projection
  Vec<T> ln2_gain, ln2_bias;
  Mat<T> w_fc;    // d_ff x d_model
  Mat<T> w_proj;  // d_model x d_ff
};

template <class T>
struct Weights {
  ModelConfig config;
  Mat<T> tok_embedding;  // vocab x d_model; also the unembedding
  Mat<T> pos_embedding;  // max_seq x d_model
  std::vector<LayerWeights<T>> layers;
  Vec<T> final_gain, final_bias;

  static Weights zeros(const ModelConfig& config);

  template <class U>
  Weights<U> cast() const;
};

using ModelParams = Weights<float>;

// Calls f(name, tensor) for every tensor in a fixed order. `tensor` is a Mat<T>
// or Vec<T> (const if W is const). The order defines the on-disk layout.
template <class W, class F>
void visit_tensors(W& w, F&& f) {
  f(std::string("tok_embedding"), w.tok_embedding);
  f(std::string("pos_embedding"), w.pos_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    f(p + "ln1.gain", L.ln1_gain);
    f(p + "ln1.bias", L.ln1_bias);
    f(p + "attn.w_query", L.w_query);
    f(p + "attn.w_key", L.w_key);
    f(p + "attn.w_value", L.w_value);
    f(p + "attn.w_out", L.w_out);
    f(p + "ln2.gain", L.ln2_gain);
    f(p + "ln2.bias", L.ln2_bias);
    f(p + "mlp.w_fc", L.w_fc);
    f(p + "mlp.w_proj", L.w_proj);
  }
  f(std::string("final_norm.gain"), w.final_gain);
  f(std::string("final_norm.bias"), w.final_bias);
}

template <class T>
bool all_finite(const Weights<T>& w);

// ---------------------------------------------------------------------------
// Activations and interventions

template <class T>
struct ActivationRecord {
  Mat<T> embedding;               // token + position embedding (residual input)
  std::vector<Mat<T>> h, a, m, k;  // per layer; h/a/m are n x d_model, k is n x d_ff

  int n_tokens() const { return static_cast<int>(embedding.rows()); }
  int n_layers() const { return static_cast<int>(h.size()); }
};

enum class Site { embedding, attn_a, mlp_key_k, mlp_m, hidden_h };

std::string to_string(Site s);
Site site_from_string(const std::string& s);

enum class PatchAction { restore, freeze, set };

struct Patch {
  Site site = Site::hidden_h;
  int layer = 0;  // ignored (kept 0) for Site::embedding
  int token = 0;
  PatchAction action = PatchAction::set;
  Eigen::VectorXd value;
};

// Reads the vector recorded at (site, layer, token).
template <class T>
Eigen::VectorXd site_value(const ActivationRecord<T>& rec, Site site, int layer, int token);

class InterventionSpec {
 public:
  // Throws std::invalid_argument if (site, layer, token) is already patched.
  void add(Patch p);
  void set_vector(Site site, int layer, int token, Eigen::VectorXd value);

  template <class T>
  void restore_from(const ActivationRecord<T>& rec, Site site, int layer, int token) {
    add({site, layer, token, PatchAction::restore, site_value(rec, site, layer, token)});
  }
  template <class T>
  void freeze_to(const ActivationRecord<T>& rec, Site site, int layer, int token) {
    add({site, layer, token, PatchAction::freeze, site_value(rec, site, layer, token)});
  }
  // Restores layers [first, last] inclusive at one token.
  template <class T>
  void restore_window(const ActivationRecord<T>& rec, Site site, int first, int last, int token) {
    for (int l = first; l <= last; ++l) restore_from(rec, site, l, token);
  }

  bool contains(Site site, int layer, int token) const;
  bool empty() const { return patches_.empty(); }
  std::size_t size() const { return patches_.size(); }
  const std::vector<Patch>& patches() const { return patches_; }

  // Bounds and dimension checks against a model and sequence length.
  void validate(const ModelConfig& config, int n_tokens) const;

 private:
  std::vector<Patch> patches_;
  std::set<std::tuple<int, int, int>> keys_;
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(Site site, int layer, int token);
  Site site;
  int layer;
  int token;
};

// ---------------------------------------------------------------------------
// Forward / backward

template <class T>
struct ForwardCache {
  struct Layer {
    Mat<T> ln1_hat;
    Vec<T> ln1_rstd;
    Mat<T> q, k, v;
    std::vector<Mat<T>> probs;  // per head, n x n
    Mat<T> attn;                // concatenated head outputs
    Mat<T> ln2_hat;
    Vec<T> ln2_rstd;
    Mat<T> pre;  // MLP pre-activation
    // Rows overwritten by a patch, indexed by Site value.
    std::array<std::vector<int>, 5> patched;
  };
  TokenIds tokens;
  ActivationRecord<T> record;
  std::vector<int> patched_embedding_rows;
  std::vector<Layer> layers;
  Mat<T> final_hat;
  Vec<T> final_rstd;
  Mat<T> logits;
};

template <class T>
struct ForwardResult {
  Mat<T> logits;  // n x vocab
  ActivationRecord<T> record;
};

void validate_tokens(const ModelConfig& config, std::span<const int> tokens);

template <class T>
ForwardResult<T> forward(const Weights<T>& w, std::span<const int> tokens,
                         const InterventionSpec* spec = nullptr);

// Same as forward() but keeps every intermediate needed by backward().
template <class T>
void forward_cached(const Weights<T>& w, std::span<const int> tokens,
                    const InterventionSpec* spec, ForwardCache<T>& cache);

// Backpropagates dlogits. Parameter gradients for layers above `stop_layer`,
// the final norm and the unembedding (plus the input embeddings when
// stop_layer == -1) are accumulated into `grads` if non-null. Returns the
// gradient with respect to h[stop_layer] (the embedding output when -1).
// Rows overwritten by patches pass no gradient into the computation they
// replaced.
template <class T>
Mat<T> backward(const Weights<T>& w, const ForwardCache<T>& cache, const Mat<T>& dlogits,
                Weights<T>* grads, int stop_layer = -1);

// Max-shifted softmax computed in 64-bit. Throws on non-finite input.
template <class Derived>
Eigen::VectorXd next_token_distribution(const Eigen::MatrixBase<Derived>& logits) {
  Eigen::VectorXd x = logits.template cast<double>();
  if (!x.allFinite()) throw std::invalid_argument("next_token_distribution: non-finite logits");
  const double mx = x.maxCoeff();
  Eigen::VectorXd e = (x.array() - mx).exp();
  return e / e.sum();
}

// log-softmax, 64-bit, max-shifted.
template <class Derived>
Eigen::VectorXd log_softmax(const Eigen::MatrixBase<Derived>& logits) {
  Eigen::VectorXd x = logits.template cast<double>();
  const double mx = x.maxCoeff();
  const double lse = mx + std::log((x.array() - mx).exp().sum());
  return x.array() - lse;
}

// exp(mean NLL of tokens[1..]). Throws std::invalid_argument if len < 2.
double sequence_perplexity(const ModelParams& params, std::span<const int> tokens);

// Sum of NLL over tokens[1..] and the number of predicted tokens.
std::pair<double, int> sequence_nll(const ModelParams& params, std::span<const int> tokens);

float embedding_std(const ModelParams& params);

}  // namespace lsdm
