// Acceptance gate. One PASS/FAIL line per criterion, non-zero exit on any FAIL.
// Runs the toy pipeline under ./acceptance_run and ./determinism_run.

#include "lsdm/cli/commands.hpp"
#include "lsdm/corpus.hpp"
#include "lsdm/editor.hpp"
#include "lsdm/eval.hpp"
#include "lsdm/forge.hpp"
#include "lsdm/rng.hpp"
#include "lsdm/trace.hpp"
#include "lsdm/weights_io.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace lsdm;
using namespace lsdm::cli;
namespace fs = std::filesystem;

namespace {

using clk = std::chrono::steady_clock;

double since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

int failures = 0;

void verdict(const std::string& id, const std::string& what, bool ok, const std::string& detail) {
  if (!ok) ++failures;
  std::printf("%s %s %s: %s\n", ok ? "PASS" : "FAIL", id.c_str(), what.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... xs) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, xs...);
  return buf;
}

// exceptions become FAIL lines
void guarded(const std::string& id, const std::string& what, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    verdict(id, what, false, std::string("threw: ") + e.what());
  }
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

Eigen::MatrixXd gaussian(int r, int c, Rng& rng) {
  std::normal_distribution<double> g(0, 1);
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// argmin |W E - V|^2 + |W P - W0 P|^2 with C = P P^T, via pinv of the stacked system
Eigen::MatrixXd stacked_minimizer(const Eigen::MatrixXd& W0, const Eigen::MatrixXd& E, const Eigen::MatrixXd& V,
                                  const Eigen::MatrixXd& P) {
  Eigen::MatrixXd A(E.rows(), E.cols() + P.cols());
  A << E, P;
  Eigen::MatrixXd B(V.rows(), V.cols() + P.cols());
  B << V, W0 * P;
  return B * Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(A).pseudoInverse();
}

// Vocabulary and probes from the shipped templates and lexicon.
struct Shipped {
  Vocabulary vocab;
  std::vector<BiasProbe> probes;
};

Shipped shipped_probes() {
  const auto dir = default_data_dir();
  const auto lex = load_lexicon(dir / "lexicon.tsv").take(10, 10, 4);
  const auto templ = load_templates(dir / "templates_heldout.txt");
  std::vector<std::string> occ, text{"he she"};
  for (const auto& e : lex.entries) occ.push_back(e.surface);
  for (std::size_t i = 0; i < templ.templates.size(); ++i)
    for (const auto& o : occ) text.push_back(templ.instantiate(i, o));
  Shipped s{Vocabulary(collect_words(text)), {}};
  s.probes = make_probes(s.vocab, templ, occ);
  return s;
}

ModelParams inflated(const ModelConfig& c, std::uint64_t seed) {
  auto p = init_params(c, seed);
  for (auto& L : p.layers) {
    L.w_proj *= 6.0f;
    L.w_out *= 6.0f;
    L.w_fc *= 6.0f;
  }
  p.tok_embedding *= 6.0f;
  return p;
}

void criterion_1() {
  const auto t0 = clk::now();
  Rng rng(20240601);
  double worst_w = 0, worst_res = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> dd(8, 32), ff(16, 64);
    const int d = dd(rng), f = ff(rng);
    const int n = std::uniform_int_distribution<int>(1, f)(rng);
    // C may be rank-deficient as long as the keys fill the gap
    const int rank = std::uniform_int_distribution<int>(std::max(1, f - n), f + 8)(rng);
    const auto W0 = gaussian(d, f, rng), E = gaussian(f, n, rng), V = gaussian(d, n, rng);
    const auto P = gaussian(f, rank, rng);
    const Eigen::MatrixXd C = P * P.transpose();
    const Eigen::MatrixXd W = W0 + solve_delta(W0, E, V, C);
    const Eigen::MatrixXd oracle = stacked_minimizer(W0, E, V, P);
    worst_w = std::max(worst_w, (W - oracle).norm() / oracle.norm());
    const Eigen::MatrixXd lhs = W * (E * E.transpose() + C), rhs = V * E.transpose() + W0 * C;
    worst_res = std::max(worst_res, (lhs - rhs).norm() / rhs.norm());
  }
  const double secs = since(t0);
  verdict("1", "solver oracle equivalence", worst_w <= 1e-8 && worst_res <= 1e-8 && secs < 5,
          fmt("max rel W err %.2e, max rel residual %.2e, %.2fs (limits 1e-8, 1e-8, 5s)", worst_w, worst_res, secs));
}

void criterion_2(const Shipped& s) {
  const auto t0 = clk::now();
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 4;
  c.d_ff = 64;
  c.max_seq = 32;
  c.vocab_size = s.vocab.size();
  const auto p = inflated(c, 11);
  const auto pd = p.cast<double>();
  const std::vector<TokenIds> prefixes{{}, s.probes[7].tokens, s.probes[40].tokens};
  Rng rng(5);
  std::vector<VStarProblem> problems;
  std::vector<Eigen::VectorXd> zs;
  for (int i = 0; i < 4; ++i) {
    const auto& text = s.probes[std::uniform_int_distribution<std::size_t>(0, s.probes.size() - 1)(rng)];
    // layer 1 is the last one: m at the occupation never reaches the final logits
    problems.push_back(make_v_star_problem(p, text, 0, prefixes));
    zs.push_back(collect_key_and_output(p, text, 0, prefixes).output + 0.3 * gaussian(16, 1, rng));
  }
  // 20 distinct (problem, coordinate) pairs
  std::vector<std::pair<int, int>> coords;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 16; ++j) coords.emplace_back(i, j);
  std::shuffle(coords.begin(), coords.end(), rng);
  coords.resize(20);
  double worst = 0;
  const double h = 1e-5;
  for (const auto& [i, j] : coords) {
    const double g = v_star_loss_and_grad(pd, problems[i], zs[i]).second(j);
    Eigen::VectorXd z = zs[i];
    z(j) += h;
    const double up = v_star_loss_and_grad(pd, problems[i], z).first;
    z(j) -= 2 * h;
    const double dn = v_star_loss_and_grad(pd, problems[i], z).first;
    const double fd = (up - dn) / (2 * h);
    worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-8}));
  }
  const double secs = since(t0);
  verdict("2", "v* gradient vs central differences", worst <= 1e-4 && secs < 30,
          fmt("max rel err %.2e over 20 coordinates, %.2fs (limits 1e-4, 30s)", worst, secs));
}

void criterion_3(const Shipped& s) {
  const auto t0 = clk::now();
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 64;
  c.max_seq = 32;
  c.vocab_size = s.vocab.size();
  const auto p = inflated(c, 12);
  const double sd = embedding_std(p);
  const std::vector<BiasProbe> probes(s.probes.begin(), s.probes.begin() + 100);
  double worst_te = 0, worst_ie = 0, worst_restore = 0;
  for (std::size_t k = 0; k < probes.size(); ++k) {
    const auto& probe = probes[k];
    const auto zero = prepare_trace(p, probe, NoiseSpec{0.0, k, {}}, sd);
    worst_te = std::max(worst_te, std::abs(zero.p_clean_gb - zero.p_corrupt_gb));
    for (int t = 0; t < static_cast<int>(probe.tokens.size()); ++t)
      for (int l = 0; l < c.n_layers; ++l) {
        worst_ie = std::max(worst_ie, std::abs(cell_ie(zero, Site::hidden_h, t, l, 1)));
        worst_ie = std::max(worst_ie, std::abs(cell_ie(zero, Site::mlp_m, t, l, 10)));
        worst_ie = std::max(worst_ie, std::abs(cell_ie(zero, Site::attn_a, t, l, 10)));
      }
    const auto noisy = prepare_trace(p, probe, NoiseSpec{3.0, k, {}}, sd);
    InterventionSpec all;
    for (int t = 0; t < static_cast<int>(probe.tokens.size()); ++t) all.restore_from(noisy.clean, Site::hidden_h, 0, t);
    worst_restore = std::max(worst_restore, std::abs(restored_p_gb(noisy, all) - noisy.p_clean_gb));
  }
  const double secs = since(t0);
  verdict("3", "tracing identities",
          worst_te <= 1e-6 && worst_ie <= 1e-6 && worst_restore <= 1e-6 && secs < 60,
          fmt("max |TE| %.1e, max |IE| %.1e, layer-0 restore err %.1e over 100 probes, %.1fs (limits 1e-6, 60s)",
              worst_te, worst_ie, worst_restore, secs));
}

struct ToyRun {
  fs::path dir;
  fs::path model;
  double train_secs = 0;
  double ate = 0;
};

// Criteria 4, 5, 6 share one trained toy model and one forge corpus.
void criteria_4_5_6(ToyRun& toy) {
  const auto t0 = clk::now();
  toy.dir = fs::current_path() / "acceptance_run";
  fs::remove_all(toy.dir);

  TrainCommand tc;
  tc.out = toy.dir;
  tc.seed = 7;
  tc.n_female = 10;
  tc.n_male = 10;
  tc.n_neutral = 4;
  tc.bias_ratio = 0.85;
  tc.model.n_layers = 4;
  tc.model.d_model = 64;
  tc.model.d_ff = 256;
  toy.model = cmd_train(tc).weights;
  toy.train_secs = since(t0);

  TraceCommand trc;
  trc.out = toy.dir;
  trc.model = toy.model;
  trc.seed = 8;
  trc.components = {"hidden", "mlp", "attn"};
  trc.severed = {"mlp"};
  trc.noise_multiplier = 3.0;
  trc.max_probes = 60;
  toy.ate = cmd_trace(trc).ate;

  ForgeCommand fc;
  fc.out = toy.dir;
  fc.model = toy.model;
  fc.seed = 9;
  fc.forge.fan_out = 200;
  fc.direction = "lowest";
  cmd_forge(fc);

  EditCommand ec;
  ec.out = toy.dir;
  ec.model = toy.model;
  ec.seed = 10;
  ec.layers = "bottom";
  const auto bottom = cmd_edit(ec);
  ec.layers = "top";
  const auto top = cmd_edit(ec);

  EvalCommand evc;
  evc.out = toy.dir;
  evc.model = toy.model;
  evc.seed = 11;
  evc.lsdm = {"LSDM=" + bottom.weights.string(), "LSDM-top=" + top.weights.string()};
  const auto rep = load_report(cmd_eval(evc).json);
  const double secs = since(t0);

  auto row = [&](const std::string& alg, const std::string& ds) {
    const auto* r = rep.find(alg, ds);
    if (!r) throw std::runtime_error("report lacks " + alg + "/" + ds);
    return r->metrics;
  };
  const auto base = row("None", "heldout"), bot = row("LSDM", "heldout"), topm = row("LSDM-top", "heldout");
  const double drop = 1 - bot.mean_p_gb / base.mean_p_gb;
  const double top_drop = 1 - topm.mean_p_gb / base.mean_p_gb;
  const double cap0 = *rep.capability_of("None"), cap1 = *rep.capability_of("LSDM");
  const double ppl_rise = bot.cross_ppl / base.cross_ppl - 1;
  verdict("4", "end-to-end toy debias",
          toy.ate > 0.01 && drop >= 0.5 && cap0 - cap1 <= 0.02 && ppl_rise <= 0.15 && secs <= 1200,
          fmt("ATE %.4f (>0.01), P(gb) %.4f -> %.4f drop %.1f%% (>=50%%), capability %.2f%% -> %.2f%% (drop <=2pp), "
              "cross_ppl %.3f -> %.3f %+.1f%% (<=15%%), %.0fs (<=1200s)",
              toy.ate, base.mean_p_gb, bot.mean_p_gb, 100 * drop, 100 * cap0, 100 * cap1, base.cross_ppl,
              bot.cross_ppl, 100 * ppl_rise, secs));
  verdict("5", "layer placement ablation", top_drop < drop,
          fmt("top-third drop %.1f%% < bottom-third drop %.1f%%", 100 * top_drop, 100 * drop));

  // neutral occupations never enter the edit plan
  const auto wf = load_weights(toy.model);
  std::vector<std::string> edited;
  for (const auto& s : load_forge_corpus(toy.dir / "corpora" / "forge.jsonl"))
    if (std::find(edited.begin(), edited.end(), s.occupation) == edited.end()) edited.push_back(s.occupation);
  Vocabulary vocab(wf.vocab);
  const auto neutral = load_probe_dataset(toy.dir / "corpora" / "probes_neutral.jsonl", vocab);
  const auto [before, after] =
      neutral_generalization(wf.params, load_weights(bottom.weights).params, neutral, edited);
  verdict("6", "neutral generalization direction", after.mean_p_gb < before.mean_p_gb,
          fmt("neutral P(gb) %.4f -> %.4f over %d probes (%.1f%% lower)", before.mean_p_gb, after.mean_p_gb,
              before.n, 100 * (1 - after.mean_p_gb / before.mean_p_gb)));
}

// Trace checks that need the trained toy model.
void toy_trace_checks(const ToyRun& toy) {
  const auto wf = load_weights(toy.model);
  const Vocabulary vocab(wf.vocab);
  auto probes = load_probe_dataset(toy.dir / "corpora" / "probes_heldout.jsonl", vocab);
  // spread over templates and occupations
  std::vector<BiasProbe> pick;
  for (std::size_t i = 0; pick.size() < 100 && i < probes.size(); i += std::max<std::size_t>(1, probes.size() / 100))
    pick.push_back(probes[i]);
  TraceOptions opt;
  opt.window = 10;
  opt.noise = NoiseSpec{3.0, 21, {}};
  const auto& p = wf.params;
  const int L = p.config.n_layers;

  const auto g = trace_grid(p, pick, Site::mlp_m, opt);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(kRoleCount, L);
  std::vector<int> count(kRoleCount, 0);
  const double sd = embedding_std(p);
  for (std::size_t k = 0; k < pick.size(); ++k) {
    NoiseSpec n = opt.noise;
    n.seed = derive_seed(opt.noise.seed, {k});
    const auto ctx = prepare_trace(p, pick[k], n, sd);
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(kRoleCount, L);
    std::vector<int> hits(kRoleCount, 0);
    for (int t = 0; t < static_cast<int>(pick[k].tokens.size()); ++t) {
      const int r = static_cast<int>(token_role(pick[k], t));
      ++hits[r];
      for (int l = 0; l < L; ++l) acc(r, l) += cell_ie(ctx, Site::mlp_m, t, l, opt.window);
    }
    for (int r = 0; r < kRoleCount; ++r)
      if (hits[r]) {
        sum.row(r) += acc.row(r) / hits[r];
        ++count[r];
      }
  }
  double worst = 0;
  for (int r = 0; r < kRoleCount; ++r)
    if (count[r]) worst = std::max(worst, (g.aie.row(r) - sum.row(r) / count[r]).cwiseAbs().maxCoeff());
  verdict("extra", "toy grid equals recomputed per-probe means", worst <= 1e-9,
          fmt("max cell difference %.1e over %zu probes", worst, pick.size()));

  TraceOptions h = opt;
  h.window = 1;
  const auto plain = trace_grid(p, pick, Site::hidden_h, h);
  const auto cut = severed_trace(p, pick, Site::mlp_m, Site::hidden_h, h);
  const int occ = static_cast<int>(TokenRole::occupation);
  const int bottom = std::max(1, L / 2);
  const double a = plain.aie.row(occ).head(bottom).mean(), b = cut.aie.row(occ).head(bottom).mean();
  verdict("extra", "severing the MLP lowers bottom-layer hidden AIE", b < a,
          fmt("occupation row, layers 0..%d: severed %.4f vs unsevered %.4f", bottom - 1, b, a));
}

double ppl_by_hand(const ModelParams& p, const TokenIds& t) {
  const auto logits = forward(p.cast<double>(), t).logits;
  double nll = 0;
  for (std::size_t i = 0; i + 1 < t.size(); ++i) {
    const Eigen::VectorXd x = logits.row(i).transpose();
    nll -= x(t[i + 1]) - x.maxCoeff() - std::log((x.array() - x.maxCoeff()).exp().sum());
  }
  return std::exp(nll / (t.size() - 1));
}

double gb_by_hand(const ModelParams& p, const TokenIds& t, int he, int she) {
  const auto logits = forward(p.cast<double>(), t).logits;
  const Eigen::VectorXd x = logits.row(logits.rows() - 1).transpose();
  const Eigen::ArrayXd e = (x.array() - x.maxCoeff()).exp();
  return std::abs(e(he) - e(she)) / e.sum();
}

void criterion_7(const ToyRun& toy) {
  const auto t0 = clk::now();
  const auto wf = load_weights(toy.model);
  const Vocabulary vocab(wf.vocab);
  const auto& p = wf.params;
  const auto lex = load_lexicon(toy.dir / "corpora" / "lexicon.tsv");
  std::vector<std::string> occ;
  for (const auto& e : lex.entries)
    if (e.label != GenderLabel::neutral && occ.size() < 5) occ.push_back(e.surface);
  ForgeConfig cfg;
  cfg.seed = 77;
  const auto r = build_bias_corpus(p, vocab, occ, cfg);
  const auto dir = fs::current_path() / "forge_check";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_forge_corpus(dir / "a.jsonl", dir / "a.json", r, cfg);
  write_forge_corpus(dir / "b.jsonl", dir / "b.json", build_bias_corpus(p, vocab, occ, cfg), cfg);
  const bool same = slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl") && slurp(dir / "a.json") == slurp(dir / "b.json");

  bool count_ok = r.skipped.empty() && r.sentences.size() == occ.size() * cfg.lengths.size() * cfg.bias_keep;
  int violations = 0;
  const int he = vocab.id("he"), she = vocab.id("she");
  for (std::size_t o = 0; o < occ.size(); ++o)
    for (int d : cfg.lengths) {
      const auto pool = sample_continuations(p, vocab, occ[o], d, cfg.fan_out, cfg.temperature,
                                             derive_seed(cfg.seed, {o, static_cast<std::uint64_t>(d)}));
      std::vector<double> ppl;
      for (const auto& t : pool) ppl.push_back(ppl_by_hand(p, t));
      auto sorted = ppl;
      std::sort(sorted.rbegin(), sorted.rend());
      const double edge = sorted[cfg.ppl_keep - 1];
      // the forge ranks with the float32 model; near-ties at the edge are resolved at that precision
      constexpr double tol = 1e-5;
      std::vector<double> surv;
      for (std::size_t i = 0; i < pool.size(); ++i)
        if (ppl[i] >= edge * (1 - tol)) surv.push_back(gb_by_hand(p, pool[i], he, she));
      std::sort(surv.rbegin(), surv.rend());
      std::vector<const ForgeSentence*> got;
      for (const auto& s : r.sentences)
        if (s.occupation == occ[o] && s.d == d) got.push_back(&s);
      if (got.size() != static_cast<std::size_t>(cfg.bias_keep)) count_ok = false;
      for (std::size_t i = 0; i < got.size(); ++i) {
        const auto* s = got[i];
        if (static_cast<int>(s->tokens.size()) != d || s->ppl < edge * (1 - tol) ||
            s->p_gb < surv[cfg.bias_keep - 1] - 1e-6 || (i > 0 && got[i - 1]->p_gb < s->p_gb)) {
          ++violations;
          std::printf("  violation: %s d=%d '%s' ppl %.9g (edge %.9g) p_gb %.9g (edge %.9g, %zu survivors)\n",
                      occ[o].c_str(), d, s->text.c_str(), s->ppl, edge, s->p_gb, surv[cfg.bias_keep - 1],
                      surv.size());
        }
      }
    }
  const double secs = since(t0);
  verdict("7", "forge invariants", count_ok && violations == 0 && same && secs < 300,
          fmt("%zu sentences from %zu occupations, %d selection violations, rerun %s, %.0fs (<300s)",
              r.sentences.size(), occ.size(), violations, same ? "byte-identical" : "DIFFERS", secs));
}

void small_pipeline(const fs::path& out) {
  TrainCommand tc;
  tc.out = out;
  tc.seed = 3;
  tc.n_female = 3;
  tc.n_male = 3;
  tc.n_neutral = 2;
  tc.sentences_per_entry = 40;
  tc.neutral_sentences = 100;
  tc.heldout_neutral_sentences = 40;
  tc.covariance_sentences = 100;
  tc.model.n_layers = 3;
  tc.model.d_model = 32;
  tc.model.d_ff = 64;
  tc.hyper.steps = 150;
  const auto model = cmd_train(tc).weights;

  TraceCommand trc;
  trc.out = out;
  trc.model = model;
  trc.seed = 4;
  trc.severed = {"mlp", "attn"};
  trc.max_probes = 10;
  cmd_trace(trc);

  ForgeCommand fc;
  fc.out = out;
  fc.model = model;
  fc.seed = 5;
  fc.forge.lengths = {6, 8};
  fc.forge.fan_out = 30;
  fc.forge.ppl_keep = 10;
  fc.forge.bias_keep = 3;
  fc.max_occupations = 4;
  cmd_forge(fc);

  EditCommand ec;
  ec.out = out;
  ec.model = model;
  ec.seed = 6;
  ec.v_star.steps = 10;
  const auto edit = cmd_edit(ec);

  EvalCommand evc;
  evc.out = out;
  evc.model = model;
  evc.seed = 7;
  evc.baseline.steps = 20;
  evc.lsdm = {"LSDM=" + edit.weights.string()};
  cmd_eval(evc);
}

void criterion_8() {
  const auto dir = fs::current_path() / "determinism_run";
  fs::remove_all(dir);
  small_pipeline(dir);
  const auto first = snapshot(dir);
  // same directory: manifests echo the output path
  fs::remove_all(dir);
  small_pipeline(dir);
  const auto second = snapshot(dir);
  int weights = 0, csvs = 0, reports = 0, differ = 0;
  for (const auto& [name, bytes] : first) {
    const auto it = second.find(name);
    if (it == second.end() || it->second != bytes) {
      ++differ;
      std::printf("  differs: %s\n", name.c_str());
    }
    const auto ext = fs::path(name).extension();
    weights += ext == ".bin";
    csvs += ext == ".csv";
    reports += name.rfind("reports/", 0) == 0;
  }
  const bool ok = differ == 0 && first.size() == second.size() && weights >= 2 && csvs >= 3 && reports >= 2;
  verdict("8", "determinism sweep", ok,
          fmt("%zu files (%d weight files, %d CSVs, %d report files), %d differ", first.size(), weights, csvs,
              reports, differ));
}

}  // namespace

// `acceptance 7` runs only the listed criteria; 7 then reuses an existing toy run.
int main(int argc, char** argv) {
  const auto t0 = clk::now();
  std::vector<std::string> only(argv + 1, argv + argc);
  auto want = [&](const std::string& id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  if (want("1")) guarded("1", "solver oracle equivalence", criterion_1);
  const auto shipped = shipped_probes();
  if (want("2")) guarded("2", "v* gradient vs central differences", [&] { criterion_2(shipped); });
  if (want("3")) guarded("3", "tracing identities", [&] { criterion_3(shipped); });
  ToyRun toy;
  if (want("4") || want("5") || want("6")) {
    guarded("4-6", "toy pipeline", [&] { criteria_4_5_6(toy); });
  } else {
    toy.dir = fs::current_path() / "acceptance_run";
    toy.model = toy.dir / "weights" / "toy.bin";
  }
  if (want("7") || want("extra")) {
    if (fs::exists(toy.model)) {
      if (want("7")) guarded("7", "forge invariants", [&] { criterion_7(toy); });
      if (want("extra")) guarded("extra", "toy trace checks", [&] { toy_trace_checks(toy); });
    } else {
      verdict("7", "forge invariants", false, "no toy model");
    }
  }
  if (want("8")) guarded("8", "determinism sweep", criterion_8);
  std::printf("%d failing, %.0fs total\n", failures, since(t0));
  return failures == 0 ? 0 : 1;
}
