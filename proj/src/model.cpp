#include "lsdm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace lsdm {

std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("invalid model config: ") + what);
  };
  require(n_layers >= 1, "n_layers must be >= 1");
  require(d_model >= 1, "d_model must be >= 1");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(d_ff >= 1, "d_ff must be >= 1");
  require(vocab_size >= 1, "vocab_size must be >= 1");
  require(max_seq >= 1, "max_seq must be >= 1");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(norm_epsilon > 0.0 && std::isfinite(norm_epsilon), "norm_epsilon must be > 0");
}

template <class T>
Weights<T> Weights<T>::zeros(const ModelConfig& config) {
  config.validate();
  Weights<T> w;
  w.config = config;
  const int d = config.d_model;
  w.tok_embedding = Mat<T>::Zero(config.vocab_size, d);
  w.pos_embedding = Mat<T>::Zero(config.max_seq, d);
  w.layers.resize(config.n_layers);
  for (auto& L : w.layers) {
    L.ln1_gain = Vec<T>::Zero(d);
    L.ln1_bias = Vec<T>::Zero(d);
    L.w_query = Mat<T>::Zero(d, d);
    L.w_key = Mat<T>::Zero(d, d);
    L.w_value = Mat<T>::Zero(d, d);
    L.w_out = Mat<T>::Zero(d, d);
    L.ln2_gain = Vec<T>::Zero(d);
    L.ln2_bias = Vec<T>::Zero(d);
    L.w_fc = Mat<T>::Zero(config.d_ff, d);
    L.w_proj = Mat<T>::Zero(d, config.d_ff);
  }
  w.final_gain = Vec<T>::Zero(d);
  w.final_bias = Vec<T>::Zero(d);
  return w;
}

template <class T>
template <class U>
Weights<U> Weights<T>::cast() const {
  Weights<U> out;
  out.config = config;
  out.tok_embedding = tok_embedding.template cast<U>();
  out.pos_embedding = pos_embedding.template cast<U>();
  out.layers.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& s = layers[l];
    auto& t = out.layers[l];
    t.ln1_gain = s.ln1_gain.template cast<U>();
    t.ln1_bias = s.ln1_bias.template cast<U>();
    t.w_query = s.w_query.template cast<U>();
    t.w_key = s.w_key.template cast<U>();
    t.w_value = s.w_value.template cast<U>();
    t.w_out = s.w_out.template cast<U>();
    t.ln2_gain = s.ln2_gain.template cast<U>();
    t.ln2_bias = s.ln2_bias.template cast<U>();
    t.w_fc = s.w_fc.template cast<U>();
    t.w_proj = s.w_proj.template cast<U>();
  }
  out.final_gain = final_gain.template cast<U>();
  out.final_bias = final_bias.template cast<U>();
  return out;
}

template <class T>
bool all_finite(const Weights<T>& w) {
  bool ok = true;
  visit_tensors(w, [&](const std::string&, const auto& t) { ok = ok && t.allFinite(); });
  return ok;
}

// ---------------------------------------------------------------------------

std::string to_string(Site s) {
  switch (s) {
    case Site::embedding: return "embedding";
    case Site::attn_a: return "attn_a";
    case Site::mlp_key_k: return "mlp_key_k";
    case Site::mlp_m: return "mlp_m";
    case Site::hidden_h: return "hidden_h";
  }
  return "?";
}

Site site_from_string(const std::string& s) {
  if (s == "embedding") return Site::embedding;
  if (s == "attn_a" || s == "attn") return Site::attn_a;
  if (s == "mlp_key_k" || s == "key") return Site::mlp_key_k;
  if (s == "mlp_m" || s == "mlp") return Site::mlp_m;
  if (s == "hidden_h" || s == "hidden") return Site::hidden_h;
  throw std::invalid_argument("unknown site '" + s + "'");
}

template <class T>
Eigen::VectorXd site_value(const ActivationRecord<T>& rec, Site site, int layer, int token) {
  const Mat<T>* src = nullptr;
  switch (site) {
    case Site::embedding: src = &rec.embedding; break;
    case Site::attn_a: src = &rec.a.at(layer); break;
    case Site::mlp_key_k: src = &rec.k.at(layer); break;
    case Site::mlp_m: src = &rec.m.at(layer); break;
    case Site::hidden_h: src = &rec.h.at(layer); break;
  }
  if (token < 0 || token >= src->rows()) throw std::out_of_range("site_value: token index out of range");
  return src->row(token).transpose().template cast<double>();
}

void InterventionSpec::add(Patch p) {
  if (p.site == Site::embedding) p.layer = 0;
  const auto key = std::make_tuple(static_cast<int>(p.site), p.layer, p.token);
  if (!keys_.insert(key).second) {
    std::ostringstream os;
    os << "duplicate patch at " << to_string(p.site) << " layer " << p.layer << " token " << p.token;
    throw std::invalid_argument(os.str());
  }
  patches_.push_back(std::move(p));
}

void InterventionSpec::set_vector(Site site, int layer, int token, Eigen::VectorXd value) {
  add({site, layer, token, PatchAction::set, std::move(value)});
}

bool InterventionSpec::contains(Site site, int layer, int token) const {
  if (site == Site::embedding) layer = 0;
  return keys_.count(std::make_tuple(static_cast<int>(site), layer, token)) > 0;
}

void InterventionSpec::validate(const ModelConfig& config, int n_tokens) const {
  for (const auto& p : patches_) {
    std::ostringstream where;
    where << to_string(p.site) << " layer " << p.layer << " token " << p.token;
    if (p.token < 0 || p.token >= n_tokens)
      throw std::out_of_range("patch token out of range at " + where.str());
    if (p.site != Site::embedding && (p.layer < 0 || p.layer >= config.n_layers))
      throw std::out_of_range("patch layer out of range at " + where.str());
    const int want = p.site == Site::mlp_key_k ? config.d_ff : config.d_model;
    if (p.value.size() != want) {
      std::ostringstream os;
      os << "patch dimension mismatch at " << where.str() << ": got " << p.value.size()
         << ", expected " << want;
      throw std::invalid_argument(os.str());
    }
  }
}

NonFiniteError::NonFiniteError(Site s, int l, int t)
    : std::runtime_error("non-finite value at " + to_string(s) + " layer " + std::to_string(l) +
                         " token " + std::to_string(t)),
      site(s),
      layer(l),
      token(t) {}

// ---------------------------------------------------------------------------

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <class T>
T activate(Activation act, T x) {
  if (act == Activation::relu) return x > T(0) ? x : T(0);
  const T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
T activate_grad(Activation act, T x) {
  if (act == Activation::relu) return x > T(0) ? T(1) : T(0);
  const T x2 = x * x;
  const T t = std::tanh(T(kGeluC) * (x + T(kGeluA) * x * x2));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * T(kGeluC) * (T(1) + T(3 * kGeluA) * x2);
}

template <class T>
void layer_norm(const Mat<T>& x, const Vec<T>& gain, const Vec<T>& bias, T eps, Mat<T>& hat,
                Vec<T>& rstd, Mat<T>& out) {
  const Eigen::Index n = x.rows();
  hat.resize(n, x.cols());
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const auto centered = (x.row(i).array() - mean).eval();
    const T var = centered.square().mean();
    const T r = T(1) / std::sqrt(var + eps);
    rstd(i) = r;
    hat.row(i) = centered * r;
  }
  out = (hat.array().rowwise() * gain.transpose().array()).rowwise() + bias.transpose().array();
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& hat, const Vec<T>& rstd,
                           const Vec<T>& gain, Vec<T>* dgain, Vec<T>* dbias) {
  if (dgain) *dgain += (dy.array() * hat.array()).colwise().sum().transpose().matrix();
  if (dbias) *dbias += dy.colwise().sum().transpose();
  const Mat<T> dhat = dy.array().rowwise() * gain.transpose().array();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T m1 = dhat.row(i).mean();
    const T m2 = (dhat.row(i).array() * hat.row(i).array()).mean();
    dx.row(i) = rstd(i) * (dhat.row(i).array() - m1 - hat.row(i).array() * m2);
  }
  return dx;
}

template <class T>
Mat<T> affine(const Mat<T>& hat, const Vec<T>& gain, const Vec<T>& bias) {
  return (hat.array().rowwise() * gain.transpose().array()).rowwise() + bias.transpose().array();
}

template <class T>
void check_finite(const Mat<T>& x, Site site, int layer) {
  if (x.allFinite()) return;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    if (!x.row(i).allFinite()) throw NonFiniteError(site, layer, static_cast<int>(i));
}

using PatchList = std::vector<const Patch*>;

template <class T>
void apply_patches(Mat<T>& x, const PatchList& ps, std::vector<int>& rows) {
  for (const Patch* p : ps) {
    x.row(p->token) = p->value.cast<T>().transpose();
    rows.push_back(p->token);
  }
}

void zero_rows(auto& m, const std::vector<int>& rows) {
  for (int r : rows) m.row(r).setZero();
}

}  // namespace

void validate_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > config.max_seq) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                " exceeds max_seq " + std::to_string(config.max_seq));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(tokens[i]) + " at position " +
                              std::to_string(i) + " out of range");
    }
  }
}

template <class T>
void forward_cached(const Weights<T>& w, std::span<const int> tokens, const InterventionSpec* spec,
                    ForwardCache<T>& c) {
  const ModelConfig& cfg = w.config;
  validate_tokens(cfg, tokens);
  const int n = static_cast<int>(tokens.size());
  const int L = cfg.n_layers;
  const int d = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const T eps = static_cast<T>(cfg.norm_epsilon);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<std::array<PatchList, 5>> by_layer(L);
  PatchList emb_patches;
  if (spec) {
    spec->validate(cfg, n);
    for (const auto& p : spec->patches()) {
      if (p.site == Site::embedding)
        emb_patches.push_back(&p);
      else
        by_layer[p.layer][static_cast<int>(p.site)].push_back(&p);
    }
  }

  c.tokens.assign(tokens.begin(), tokens.end());
  auto& rec = c.record;
  rec.h.resize(L);
  rec.a.resize(L);
  rec.m.resize(L);
  rec.k.resize(L);
  c.layers.resize(L);
  c.patched_embedding_rows.clear();

  rec.embedding.resize(n, d);
  for (int i = 0; i < n; ++i)
    rec.embedding.row(i) = w.tok_embedding.row(tokens[i]) + w.pos_embedding.row(i);
  apply_patches(rec.embedding, emb_patches, c.patched_embedding_rows);
  check_finite(rec.embedding, Site::embedding, 0);

  const Mat<T>* h_prev = &rec.embedding;
  Mat<T> u, wn;
  for (int l = 0; l < L; ++l) {
    const auto& W = w.layers[l];
    auto& C = c.layers[l];
    for (auto& rows : C.patched) rows.clear();

    layer_norm(*h_prev, W.ln1_gain, W.ln1_bias, eps, C.ln1_hat, C.ln1_rstd, u);
    C.q.noalias() = u * W.w_query.transpose();
    C.k.noalias() = u * W.w_key.transpose();
    C.v.noalias() = u * W.w_value.transpose();
    C.probs.resize(H);
    C.attn.resize(n, d);
    for (int hd = 0; hd < H; ++hd) {
      Mat<T> s = (C.q.middleCols(hd * dh, dh) * C.k.middleCols(hd * dh, dh).transpose()) * scale;
      Mat<T>& p = C.probs[hd];
      p = Mat<T>::Zero(n, n);
      for (int i = 0; i < n; ++i) {
        const T mx = s.row(i).head(i + 1).maxCoeff();
        T sum = 0;
        for (int j = 0; j <= i; ++j) {
          const T e = std::exp(s(i, j) - mx);
          p(i, j) = e;
          sum += e;
        }
        p.row(i).head(i + 1) /= sum;
      }
      C.attn.middleCols(hd * dh, dh).noalias() = p * C.v.middleCols(hd * dh, dh);
    }
    Mat<T>& a = rec.a[l];
    a.noalias() = C.attn * W.w_out.transpose();
    apply_patches(a, by_layer[l][static_cast<int>(Site::attn_a)],
                  C.patched[static_cast<int>(Site::attn_a)]);
    check_finite(a, Site::attn_a, l);

    const Mat<T> r = *h_prev + a;
    layer_norm(r, W.ln2_gain, W.ln2_bias, eps, C.ln2_hat, C.ln2_rstd, wn);
    C.pre.noalias() = wn * W.w_fc.transpose();
    Mat<T>& k = rec.k[l];
    k = C.pre.unaryExpr([&](T x) { return activate(cfg.activation, x); });
    apply_patches(k, by_layer[l][static_cast<int>(Site::mlp_key_k)],
                  C.patched[static_cast<int>(Site::mlp_key_k)]);
    check_finite(k, Site::mlp_key_k, l);

    Mat<T>& m = rec.m[l];
    m.noalias() = k * W.w_proj.transpose();
    apply_patches(m, by_layer[l][static_cast<int>(Site::mlp_m)],
                  C.patched[static_cast<int>(Site::mlp_m)]);
    check_finite(m, Site::mlp_m, l);

    Mat<T>& h = rec.h[l];
    h = r + m;
    apply_patches(h, by_layer[l][static_cast<int>(Site::hidden_h)],
                  C.patched[static_cast<int>(Site::hidden_h)]);
    check_finite(h, Site::hidden_h, l);
    h_prev = &h;
  }

  Mat<T> f;
  layer_norm(*h_prev, w.final_gain, w.final_bias, eps, c.final_hat, c.final_rstd, f);
  c.logits.noalias() = f * w.tok_embedding.transpose();
  if (!c.logits.allFinite()) throw std::runtime_error("forward: non-finite logits");
}

template <class T>
ForwardResult<T> forward(const Weights<T>& w, std::span<const int> tokens,
                         const InterventionSpec* spec) {
  ForwardCache<T> c;
  forward_cached(w, tokens, spec, c);
  return {std::move(c.logits), std::move(c.record)};
}

template <class T>
Mat<T> backward(const Weights<T>& w, const ForwardCache<T>& c, const Mat<T>& dlogits,
                Weights<T>* grads, int stop_layer) {
  const ModelConfig& cfg = w.config;
  const int L = cfg.n_layers;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const auto& rec = c.record;
  if (stop_layer < -1 || stop_layer >= L) throw std::out_of_range("backward: stop_layer out of range");

  const Mat<T> f = affine(c.final_hat, w.final_gain, w.final_bias);
  if (grads) grads->tok_embedding.noalias() += dlogits.transpose() * f;
  const Mat<T> df = dlogits * w.tok_embedding;
  Mat<T> dh_cur = layer_norm_backward(df, c.final_hat, c.final_rstd, w.final_gain,
                                      grads ? &grads->final_gain : nullptr,
                                      grads ? &grads->final_bias : nullptr);

  for (int l = L - 1; l > stop_layer; --l) {
    const auto& W = w.layers[l];
    const auto& C = c.layers[l];
    LayerWeights<T>* G = grads ? &grads->layers[l] : nullptr;

    Mat<T> dr = dh_cur;
    zero_rows(dr, C.patched[static_cast<int>(Site::hidden_h)]);
    Mat<T> dm = dr;
    zero_rows(dm, C.patched[static_cast<int>(Site::mlp_m)]);
    if (G) G->w_proj.noalias() += dm.transpose() * rec.k[l];
    Mat<T> dk = dm * W.w_proj;
    zero_rows(dk, C.patched[static_cast<int>(Site::mlp_key_k)]);
    const Mat<T> dpre =
        dk.array() * C.pre.unaryExpr([&](T x) { return activate_grad(cfg.activation, x); }).array();
    const Mat<T> wn = affine(C.ln2_hat, W.ln2_gain, W.ln2_bias);
    if (G) G->w_fc.noalias() += dpre.transpose() * wn;
    const Mat<T> dwn = dpre * W.w_fc;
    dr += layer_norm_backward(dwn, C.ln2_hat, C.ln2_rstd, W.ln2_gain, G ? &G->ln2_gain : nullptr,
                              G ? &G->ln2_bias : nullptr);

    Mat<T> da = dr;
    zero_rows(da, C.patched[static_cast<int>(Site::attn_a)]);
    Mat<T> dprev = dr;
    if (G) G->w_out.noalias() += da.transpose() * C.attn;
    const Mat<T> dattn = da * W.w_out;
    const int n = static_cast<int>(dattn.rows());
    Mat<T> dq = Mat<T>::Zero(n, cfg.d_model);
    Mat<T> dkey = Mat<T>::Zero(n, cfg.d_model);
    Mat<T> dv = Mat<T>::Zero(n, cfg.d_model);
    for (int hd = 0; hd < H; ++hd) {
      const Mat<T>& p = C.probs[hd];
      const Mat<T> d_o = dattn.middleCols(hd * dh, dh);
      const Mat<T> dp = d_o * C.v.middleCols(hd * dh, dh).transpose();
      dv.middleCols(hd * dh, dh).noalias() = p.transpose() * d_o;
      const Vec<T> rowdot = (dp.array() * p.array()).rowwise().sum();
      const Mat<T> ds = (p.array() * (dp.colwise() - rowdot).array()) * scale;
      dq.middleCols(hd * dh, dh).noalias() = ds * C.k.middleCols(hd * dh, dh);
      dkey.middleCols(hd * dh, dh).noalias() = ds.transpose() * C.q.middleCols(hd * dh, dh);
    }
    const Mat<T> u = affine(C.ln1_hat, W.ln1_gain, W.ln1_bias);
    if (G) {
      G->w_query.noalias() += dq.transpose() * u;
      G->w_key.noalias() += dkey.transpose() * u;
      G->w_value.noalias() += dv.transpose() * u;
    }
    Mat<T> du = dq * W.w_query;
    du.noalias() += dkey * W.w_key;
    du.noalias() += dv * W.w_value;
    dprev += layer_norm_backward(du, C.ln1_hat, C.ln1_rstd, W.ln1_gain, G ? &G->ln1_gain : nullptr,
                                 G ? &G->ln1_bias : nullptr);
    dh_cur = std::move(dprev);
  }

  if (stop_layer == -1 && grads) {
    std::vector<bool> skip(dh_cur.rows(), false);
    for (int r : c.patched_embedding_rows) skip[r] = true;
    for (Eigen::Index i = 0; i < dh_cur.rows(); ++i) {
      if (skip[i]) continue;
      grads->tok_embedding.row(c.tokens[i]) += dh_cur.row(i);
      grads->pos_embedding.row(i) += dh_cur.row(i);
    }
  }
  return dh_cur;
}

std::pair<double, int> sequence_nll(const ModelParams& params, std::span<const int> tokens) {
  if (tokens.size() < 2) throw std::invalid_argument("sequence_perplexity: sequence too short");
  const auto out = forward(params, tokens);
  double nll = 0.0;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const Eigen::VectorXd lp = log_softmax(out.logits.row(t - 1).transpose());
    nll -= lp(tokens[t]);
  }
  return {nll, static_cast<int>(tokens.size() - 1)};
}

double sequence_perplexity(const ModelParams& params, std::span<const int> tokens) {
  const auto [nll, count] = sequence_nll(params, tokens);
  return std::exp(nll / count);
}

float embedding_std(const ModelParams& params) {
  const Eigen::ArrayXd x =
      Eigen::Map<const Eigen::ArrayXf>(params.tok_embedding.data(), params.tok_embedding.size())
          .cast<double>();
  const double mean = x.mean();
  return static_cast<float>(std::sqrt((x - mean).square().mean()));
}

template struct Weights<float>;
template struct Weights<double>;
template Weights<double> Weights<float>::cast<double>() const;
template Weights<float> Weights<double>::cast<float>() const;
template Weights<float> Weights<float>::cast<float>() const;
template bool all_finite(const Weights<float>&);
template bool all_finite(const Weights<double>&);
template Eigen::VectorXd site_value(const ActivationRecord<float>&, Site, int, int);
template Eigen::VectorXd site_value(const ActivationRecord<double>&, Site, int, int);
template void forward_cached(const Weights<float>&, std::span<const int>, const InterventionSpec*,
                             ForwardCache<float>&);
template void forward_cached(const Weights<double>&, std::span<const int>, const InterventionSpec*,
                             ForwardCache<double>&);
template ForwardResult<float> forward(const Weights<float>&, std::span<const int>,
                                      const InterventionSpec*);
template ForwardResult<double> forward(const Weights<double>&, std::span<const int>,
                                       const InterventionSpec*);
template Mat<float> backward(const Weights<float>&, const ForwardCache<float>&, const Mat<float>&,
                             Weights<float>*, int);
template Mat<double> backward(const Weights<double>&, const ForwardCache<double>&,
                              const Mat<double>&, Weights<double>*, int);

}  // namespace lsdm
