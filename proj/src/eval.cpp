#include "lsdm/eval.hpp"

#include "lsdm/editor.hpp"
#include "lsdm/generate.hpp"
#include "lsdm/rng.hpp"
#include "lsdm/trace.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace lsdm {

double p_sp(const ModelParams& params, const BiasProbe& probe) { return pronoun_probs(params, probe).sp(); }

BiasMetrics eval_bias_dataset(const ModelParams& original, const ModelParams& candidate,
                              const std::vector<BiasProbe>& probes, int continuation_tokens) {
  if (probes.empty()) throw std::invalid_argument("eval_bias_dataset: empty probe set");
  BiasMetrics m;
  m.n = static_cast<int>(probes.size());
  for (const auto& p : probes) {
    const auto pp = pronoun_probs(candidate, p);
    m.mean_p_gb += pp.gb();
    m.mean_p_sp += pp.sp();
    const TokenIds cont = greedy_continue(candidate, p.tokens, continuation_tokens);
    m.cross_ppl += sequence_perplexity(original, cont);
  }
  m.mean_p_gb /= m.n;
  m.mean_p_sp /= m.n;
  m.cross_ppl /= m.n;
  return m;
}

Eigen::VectorXd cda_target(const Eigen::VectorXd& dist, int he_id, int she_id) {
  if (he_id < 0 || she_id < 0 || he_id >= dist.size() || she_id >= dist.size() || he_id == she_id)
    throw std::invalid_argument("cda_target: bad pronoun ids");
  Eigen::VectorXd o = dist;
  std::swap(o(he_id), o(she_id));
  return o;
}

std::string to_string(Baseline b) { return b == Baseline::ft ? "FT" : "CDA"; }

std::string w_proj_name(int layer) { return "layers." + std::to_string(layer) + ".mlp.w_proj"; }

BaselineResult fine_tune_baseline(const ModelParams& params, const std::vector<BiasProbe>& texts,
                                  const std::vector<int>& layers, Baseline kind, const TrainHyper& hyper) {
  if (texts.empty()) throw std::invalid_argument("baseline: empty corpus");
  if (layers.empty()) throw std::invalid_argument("baseline: no trainable layers");
  if (hyper.steps < 0 || hyper.batch < 1) throw std::invalid_argument("baseline: bad hyperparameters");
  const auto& cfg = params.config;
  std::set<std::string> trainable;
  for (int l : layers) {
    if (l < 0 || l >= cfg.n_layers) throw std::invalid_argument("baseline: layer outside the model");
    trainable.insert(w_proj_name(l));
  }
  const int stop = *std::min_element(layers.begin(), layers.end()) - 1;

  std::vector<Eigen::VectorXf> targets;
  for (const auto& t : texts) {
    const auto res = forward(params, t.tokens);
    const auto dist = next_token_distribution(res.logits.row(res.logits.rows() - 1).transpose());
    const auto o = kind == Baseline::ft ? debias_target(dist, t.he_id, t.she_id) : cda_target(dist, t.he_id, t.she_id);
    targets.push_back(o.cast<float>());
  }

  BaselineResult r;
  r.params = params;
  AdamOptimizer opt(params, hyper, [&](const std::string& name) { return trainable.count(name) > 0; });
  Rng rng(derive_seed(hyper.seed, {0xf7, static_cast<std::uint64_t>(kind)}));
  std::uniform_int_distribution<std::size_t> pick(0, texts.size() - 1);
  ModelParams grads = ModelParams::zeros(cfg);
  ForwardCache<float> cache;
  for (int step = 0; step < hyper.steps; ++step) {
    visit_tensors(grads, [](const std::string&, auto& t) { t.setZero(); });
    double loss = 0.0;
    for (int b = 0; b < hyper.batch; ++b) {
      const std::size_t i = pick(rng);
      const auto& seq = texts[i].tokens;
      forward_cached(r.params, seq, nullptr, cache);
      const auto n = cache.logits.rows();
      const Eigen::VectorXd logp = log_softmax(cache.logits.row(n - 1).transpose());
      const Eigen::VectorXd o = targets[i].cast<double>();
      loss -= o.dot(logp);
      Mat<float> dlogits = Mat<float>::Zero(n, cfg.vocab_size);
      dlogits.row(n - 1) = ((logp.array().exp() * o.sum() - o.array()) / hyper.batch).cast<float>().matrix().transpose();
      backward(r.params, cache, dlogits, &grads, stop);
    }
    loss /= hyper.batch;
    if (!std::isfinite(loss)) throw TrainingDiverged(step);
    r.losses.push_back(loss);
    opt.step(r.params, grads);
    if (!all_finite(r.params)) throw TrainingDiverged(step);
  }
  return r;
}

ModelParams ft_baseline(const ModelParams& params, const std::vector<BiasProbe>& texts,
                        const std::vector<int>& layers, const TrainHyper& hyper) {
  return fine_tune_baseline(params, texts, layers, Baseline::ft, hyper).params;
}

ModelParams cda_baseline(const ModelParams& params, const std::vector<BiasProbe>& texts,
                         const std::vector<int>& layers, const TrainHyper& hyper) {
  return fine_tune_baseline(params, texts, layers, Baseline::cda, hyper).params;
}

std::pair<BiasMetrics, BiasMetrics> neutral_generalization(const ModelParams& original, const ModelParams& edited,
                                                           const std::vector<BiasProbe>& neutral_probes,
                                                           const std::vector<std::string>& edited_occupations) {
  if (neutral_probes.empty()) throw std::invalid_argument("neutral_generalization: empty neutral set");
  const std::set<std::string> edited_set(edited_occupations.begin(), edited_occupations.end());
  for (const auto& p : neutral_probes)
    if (edited_set.count(p.occupation))
      throw std::invalid_argument("neutral_generalization: '" + p.occupation + "' is part of the edit plan");
  return {eval_bias_dataset(original, original, neutral_probes), eval_bias_dataset(original, edited, neutral_probes)};
}

double capability_probe(const ModelParams& params, const std::vector<TokenIds>& corpus) {
  long hits = 0, total = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    const auto res = forward(params, seq);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      Eigen::Index arg = 0;
      res.logits.row(static_cast<Eigen::Index>(t)).maxCoeff(&arg);
      hits += arg == seq[t + 1];
      ++total;
    }
  }
  if (total == 0) throw std::invalid_argument("capability_probe: empty corpus");
  return static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Report

void EvalReport::add_row(EvalRow row) {
  if (find(row.algorithm, row.dataset))
    throw std::invalid_argument("report already has a row for (" + row.algorithm + ", " + row.dataset + ")");
  rows.push_back(std::move(row));
}

void EvalReport::set_capability(const std::string& algorithm, double accuracy) {
  if (capability_of(algorithm)) throw std::invalid_argument("report already has capability for " + algorithm);
  capability.emplace_back(algorithm, accuracy);
}

const EvalRow* EvalReport::find(const std::string& algorithm, const std::string& dataset) const {
  for (const auto& r : rows)
    if (r.algorithm == algorithm && r.dataset == dataset) return &r;
  return nullptr;
}

std::optional<double> EvalReport::capability_of(const std::string& algorithm) const {
  for (const auto& [a, v] : capability)
    if (a == algorithm) return v;
  return std::nullopt;
}

void EvalReport::merge(const EvalReport& other) {
  for (const auto& r : other.rows) add_row(r);
  for (const auto& [a, v] : other.capability) set_capability(a, v);
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

}  // namespace

std::string report_markdown(const EvalReport& report) {
  std::ostringstream os;
  os << "| algorithm | dataset | n | P(gb) % | P(sp) % | abs dP(sp) % | cross ppl | capability % |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : report.rows) {
    const EvalRow* none = report.find("None", r.dataset);
    char ppl[32];
    std::snprintf(ppl, sizeof ppl, "%.3f", r.metrics.cross_ppl);
    const auto cap = report.capability_of(r.algorithm);
    os << "| " << r.algorithm << " | " << r.dataset << " | " << r.metrics.n << " | " << pct(r.metrics.mean_p_gb)
       << " | " << pct(r.metrics.mean_p_sp) << " | "
       << (none ? pct(std::abs(r.metrics.mean_p_sp - none->metrics.mean_p_sp)) : std::string("-")) << " | " << ppl
       << " | " << (cap ? pct(*cap) : std::string("-")) << " |\n";
  }
  return os.str();
}

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"algorithm", r.algorithm},
                    {"dataset", r.dataset},
                    {"n", r.metrics.n},
                    {"mean_p_gb", r.metrics.mean_p_gb},
                    {"mean_p_sp", r.metrics.mean_p_sp},
                    {"cross_ppl", r.metrics.cross_ppl}});
  }
  j["rows"] = rows;
  auto cap = nlohmann::ordered_json::array();
  for (const auto& [a, v] : report.capability) cap.push_back({{"algorithm", a}, {"accuracy", v}});
  j["capability"] = cap;
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  EvalReport r;
  for (const auto& row : j.at("rows")) {
    BiasMetrics m;
    m.n = row.at("n").get<int>();
    m.mean_p_gb = row.at("mean_p_gb").get<double>();
    m.mean_p_sp = row.at("mean_p_sp").get<double>();
    m.cross_ppl = row.at("cross_ppl").get<double>();
    r.add_row({row.at("algorithm").get<std::string>(), row.at("dataset").get<std::string>(), m});
  }
  for (const auto& c : j.at("capability"))
    r.set_capability(c.at("algorithm").get<std::string>(), c.at("accuracy").get<double>());
  return r;
}

void emit_report(const EvalReport& report, const std::filesystem::path& stem) {
  const std::string md = report_markdown(report);
  const std::string js = report_json(report);
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  auto md_path = stem;
  md_path += ".md";
  auto js_path = stem;
  js_path += ".json";
  std::ofstream a(md_path, std::ios::binary | std::ios::trunc);
  a << md;
  std::ofstream b(js_path, std::ios::binary | std::ios::trunc);
  b << js;
  if (!a || !b) throw std::runtime_error("failed writing report " + stem.string());
}

EvalReport load_report(const std::filesystem::path& json_path) {
  std::ifstream is(json_path);
  if (!is) throw std::runtime_error("cannot open report " + json_path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return report_from_json(ss.str());
}

}  // namespace lsdm
