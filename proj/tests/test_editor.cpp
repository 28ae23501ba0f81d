#include "doctest.h"

#include "lsdm/editor.hpp"
#include "lsdm/weights_io.hpp"
#include "support.hpp"

#include <cmath>
#include <sstream>

using namespace lsdm;
using namespace lsdm::testing;

namespace {

Eigen::MatrixXd gaussian(int r, int c, Rng& rng) {
  std::normal_distribution<double> g(0, 1);
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// argmin |W E - V|^2 + |W P - W0 P|^2 as [V, W0 P] * pinv([E, P]).
Eigen::MatrixXd stacked_minimizer(const Eigen::MatrixXd& W0, const Eigen::MatrixXd& E, const Eigen::MatrixXd& V,
                                  const Eigen::MatrixXd& P) {
  Eigen::MatrixXd A(E.rows(), E.cols() + P.cols());
  A << E, P;
  Eigen::MatrixXd B(V.rows(), V.cols() + P.cols());
  B << V, W0 * P;
  return B * Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(A).pseudoInverse();
}

EditPlan tiny_plan(const Vocabulary& v) {
  EditPlan plan;
  plan.layers = {0, 1};
  plan.texts = {make_probe(v, "the {} worked late because", "nurse"),
                make_probe(v, "the {} went home so", "engineer"), make_probe(v, "the {} said", "teacher")};
  plan.prefixes = {{}, v.tokenize("the dog ran to the park .")};
  for (const auto& s : {"the cat ran to the park .", "a dog was at home .", "the dog went home so the cat ran ."})
    plan.covariance_corpus.push_back(v.tokenize(s));
  plan.v_star = {10, 0.05};
  return plan;
}

}  // namespace

TEST_CASE("solve_delta against the stacked pseudo-inverse") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 6 + trial % 5, f = 10 + trial % 7, n = 1 + trial % f;
    const auto W0 = gaussian(d, f, rng), E = gaussian(f, n, rng), V = gaussian(d, n, rng);
    const auto P = gaussian(f, f + 3, rng);
    const Eigen::MatrixXd C = P * P.transpose();
    const Eigen::MatrixXd W = W0 + solve_delta(W0, E, V, C);
    const Eigen::MatrixXd oracle = stacked_minimizer(W0, E, V, P);
    CHECK((W - oracle).norm() / oracle.norm() < 1e-9);
    CHECK(normal_residual(W, W0, E, V, C) / (V * E.transpose() + W0 * C).norm() < 1e-10);
  }
}

TEST_CASE("solve_delta special cases") {
  Rng rng(1);
  const auto W0 = gaussian(4, 6, rng), E = gaussian(6, 2, rng);
  const Eigen::MatrixXd C = Eigen::MatrixXd::Identity(6, 6);
  // targets already met
  CHECK(solve_delta(W0, E, W0 * E, C).norm() < 1e-12);
  // rank-deficient system without any preservation term
  CHECK_THROWS_AS(solve_delta(W0, E, gaussian(4, 2, rng), Eigen::MatrixXd::Zero(6, 6)), std::runtime_error);
  // a ridge makes it solvable
  CHECK(solve_delta(W0, E, gaussian(4, 2, rng), Eigen::MatrixXd::Zero(6, 6), 1e-3).allFinite());
  CHECK_THROWS_AS(solve_delta(W0, E, gaussian(3, 2, rng), C), std::invalid_argument);
  CHECK_THROWS_AS(solve_delta(W0, E, W0 * E, C, -1.0), std::invalid_argument);
  // C = 0 with full-rank E: exact interpolation
  const auto Ef = gaussian(6, 6, rng), Vf = gaussian(4, 6, rng);
  const Eigen::MatrixXd W = W0 + solve_delta(W0, Ef, Vf, Eigen::MatrixXd::Zero(6, 6));
  CHECK((W * Ef - Vf).norm() < 1e-8);
}

TEST_CASE("spread_target divides the residual") {
  Eigen::MatrixXd M = Eigen::MatrixXd::Ones(3, 2), R = Eigen::MatrixXd::Constant(3, 2, 6.0);
  CHECK(spread_target(M, R, 4, 4).isApprox(M + R));
  CHECK(spread_target(M, R, 2, 4).isApprox(M + R / 3));
  CHECK_THROWS(spread_target(M, R, 5, 4));
  CHECK_THROWS(spread_target(M, Eigen::MatrixXd::Ones(2, 2), 1, 4));
}

TEST_CASE("placement layers") {
  CHECK(placement_layers("bottom", 4) == std::vector<int>{0});
  CHECK(placement_layers("middle", 4) == std::vector<int>{1});
  CHECK(placement_layers("top", 4) == std::vector<int>{3});
  CHECK(placement_layers("bottom", 12) == std::vector<int>{0, 1, 2, 3});
  CHECK(placement_layers("middle", 12) == std::vector<int>{4, 5, 6, 7});
  CHECK(placement_layers("top", 12) == std::vector<int>{8, 9, 10, 11});
  CHECK(placement_layers("top", 1) == std::vector<int>{0});
  CHECK(placement_layers("1,3", 4) == std::vector<int>{1, 3});
  CHECK_THROWS(placement_layers("3,1", 4));
  CHECK_THROWS(placement_layers("4", 4));
  CHECK_THROWS(placement_layers("side", 4));
  CHECK_THROWS(placement_layers("1,x", 4));
}

TEST_CASE("debias target") {
  Eigen::VectorXd p(4);
  p << 0.1, 0.6, 0.2, 0.1;
  const auto o = debias_target(p, 1, 2);
  CHECK(o(1) == doctest::Approx(0.4));
  CHECK(o(2) == doctest::Approx(0.4));
  CHECK(o(0) == 0.1);
  CHECK(o.sum() == doctest::Approx(1.0));
  CHECK_THROWS(debias_target(p, 1, 1));
  CHECK_THROWS(debias_target(p, 1, 9));
}

TEST_CASE("keys and second moment against direct forward passes") {
  const auto v = word_vocab();
  const auto p = random_model(small_config(2, 16, v.size(), 32), 5);
  const auto plan = tiny_plan(v);
  const auto& text = plan.texts[0];
  Eigen::VectorXd k = Eigen::VectorXd::Zero(32), m = Eigen::VectorXd::Zero(16);
  for (const auto& pre : plan.prefixes) {
    TokenIds seq = pre;
    seq.insert(seq.end(), text.tokens.begin(), text.tokens.end());
    const auto out = forward(p, seq);
    const int pos = key_position(text, pre);
    CHECK(seq[pos] == v.id("nurse"));
    k += out.record.k[1].row(pos).transpose().cast<double>();
    m += out.record.m[1].row(pos).transpose().cast<double>();
  }
  const auto ko = collect_key_and_output(p, text, 1, plan.prefixes);
  CHECK(ko.key.isApprox(k / 2, 1e-12));
  CHECK(ko.output.isApprox(m / 2, 1e-12));

  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(32, 32);
  long count = 0;
  for (const auto& s : plan.covariance_corpus) {
    const auto out = forward(p, s);
    for (int i = 0; i < out.record.k[0].rows() && count < 12; ++i, ++count) {
      const Eigen::VectorXd kk = out.record.k[0].row(i).transpose().cast<double>();
      C += kk * kk.transpose();
    }
  }
  const auto sm = second_moment(p, plan.covariance_corpus, 0, 12);
  CHECK(sm.sample_count == 12);
  CHECK((sm.C - C).norm() < 1e-9 * C.norm());
  CHECK(sm.C == sm.C.transpose());
}

TEST_CASE("v* gradient matches central differences") {
  const auto v = word_vocab();
  const auto p = random_model(small_config(2, 16, v.size(), 32), 8);
  const auto plan = tiny_plan(v);
  const auto prob = make_v_star_problem(p, plan.texts[1], 1, plan.prefixes);
  const auto wd = p.cast<double>();
  Rng rng(3);
  const Eigen::VectorXd z = collect_key_and_output(p, plan.texts[1], 1, plan.prefixes).output + gaussian(16, 1, rng);
  const auto [loss, g] = v_star_loss_and_grad(wd, prob, z);
  for (int i = 0; i < 16; ++i) {
    Eigen::VectorXd a = z, b = z;
    a(i) += 1e-5;
    b(i) -= 1e-5;
    const double fd = (v_star_loss_and_grad(wd, prob, a).first - v_star_loss_and_grad(wd, prob, b).first) / 2e-5;
    CHECK(g(i) == doctest::Approx(fd).epsilon(1e-6).scale(1e-3));
  }
}

TEST_CASE("v* on an already unbiased model stays put") {
  const auto v = word_vocab();
  auto p = random_model(small_config(2, 16, v.size(), 32), 12);
  // identical he/she rows: tied unembedding gives equal probabilities
  p.tok_embedding.row(v.id("she")) = p.tok_embedding.row(v.id("he"));
  const auto plan = tiny_plan(v);
  const auto prob = make_v_star_problem(p, plan.texts[0], 1, plan.prefixes);
  const auto init = collect_key_and_output(p, plan.texts[0], 1, plan.prefixes).output;
  const auto r = optimize_v_star(p.cast<double>(), prob, init, {20, 0.1});
  CHECK(std::abs(r.final_loss - r.initial_loss) < 1e-6);
  CHECK((r.z - init).norm() < 1e-6 * (1 + init.norm()));
}

TEST_CASE("v* optimization lowers the loss") {
  const auto v = word_vocab();
  const auto p = random_model(small_config(2, 16, v.size(), 32), 13);
  const auto plan = tiny_plan(v);
  // layer 0: the last layer's m at the occupation cannot reach the final logits
  const auto prob = make_v_star_problem(p, plan.texts[0], 0, plan.prefixes);
  const auto init = collect_key_and_output(p, plan.texts[0], 0, plan.prefixes).output;
  const auto r = optimize_v_star(p.cast<double>(), prob, init, {30, 0.05});
  CHECK(r.final_loss < r.initial_loss);
  CHECK(v_star_loss_and_grad(p.cast<double>(), prob, r.z).first == doctest::Approx(r.final_loss));
}

TEST_CASE("apply_lsdm leaves its input alone and touches only W_proj of R") {
  const auto v = word_vocab();
  const auto p = random_model(small_config(3, 16, v.size(), 32), 21);
  const auto before = serialize_weights(p, {});
  auto plan = tiny_plan(v);
  const auto r = apply_lsdm(p, plan);
  CHECK(serialize_weights(p, {}) == before);
  CHECK(r.params.layers[0].w_proj != p.layers[0].w_proj);
  CHECK(r.params.layers[1].w_proj != p.layers[1].w_proj);
  CHECK(r.params.layers[2].w_proj == p.layers[2].w_proj);
  CHECK(r.params.layers[0].w_fc == p.layers[0].w_fc);
  CHECK(r.params.tok_embedding == p.tok_embedding);
  REQUIRE(r.report.layers.size() == 2);
  CHECK(r.report.target_layer == 1);
  for (const auto& l : r.report.layers) {
    CHECK(l.key_count == 3);
    CHECK(l.delta_fro > 0);
  }
  // one JSON object per layer
  std::istringstream is(r.report.to_jsonl());
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) ++lines;
  CHECK(lines == 2);

  // deterministic
  CHECK(serialize_weights(apply_lsdm(p, plan).params, {}) == serialize_weights(r.params, {}));
}

TEST_CASE("an edit aimed at the last layer is a no-op") {
  const auto v = word_vocab();
  const auto p = random_model(small_config(2, 16, v.size(), 32), 14);
  auto plan = tiny_plan(v);
  plan.layers = {1};
  const auto r = apply_lsdm(p, plan);
  CHECK(r.report.layers[0].mean_r_star_norm == 0.0);
  CHECK((r.params.layers[1].w_proj - p.layers[1].w_proj).norm() < 1e-5 * p.layers[1].w_proj.norm());
}

TEST_CASE("single-layer edit reproduces the closed form on collected keys") {
  const auto v = word_vocab();
  const auto p = random_model(small_config(3, 16, v.size(), 32), 22);
  auto plan = tiny_plan(v);
  plan.layers = {1};
  const auto r = apply_lsdm(p, plan);

  Eigen::MatrixXd E(32, 3), V(16, 3);
  for (int i = 0; i < 3; ++i) {
    const auto ko = collect_key_and_output(p, plan.texts[i], 1, plan.prefixes);
    const auto prob = make_v_star_problem(p, plan.texts[i], 1, plan.prefixes);
    E.col(i) = ko.key;
    V.col(i) = optimize_v_star(p.cast<double>(), prob, ko.output, plan.v_star).z;
  }
  const Eigen::MatrixXd C = plan.cov_scale * second_moment(p, plan.covariance_corpus, 1, plan.cov_max_samples).C;
  const Eigen::MatrixXd W0 = p.layers[1].w_proj.cast<double>();
  const Eigen::MatrixXd want = W0 + solve_delta(W0, E, V, C, plan.ridge_factor * C.trace() / 32);
  CHECK((r.params.layers[1].w_proj.cast<double>() - want).norm() < 1e-5 * want.norm());
}

TEST_CASE("edit plan validation") {
  const auto v = word_vocab();
  const auto cfg = small_config(2, 16, v.size(), 32);
  auto plan = tiny_plan(v);
  plan.validate(cfg);
  auto bad = plan;
  bad.layers = {1, 0};
  CHECK_THROWS(bad.validate(cfg));
  bad = plan;
  bad.layers = {2};
  CHECK_THROWS(bad.validate(cfg));
  bad = plan;
  bad.texts.clear();
  CHECK_THROWS(bad.validate(cfg));
  bad = plan;
  bad.prefixes.clear();
  CHECK_THROWS(bad.validate(cfg));
  bad = plan;
  bad.covariance_corpus.clear();
  CHECK_THROWS(bad.validate(cfg));
}

TEST_CASE("sample_prefixes") {
  const auto v = word_vocab();
  const auto p = random_model(small_config(2, 16, v.size(), 32), 31);
  const auto a = sample_prefixes(p, 5, 2, 6, v.id("the"), v.id("."), 9);
  REQUIRE(a.size() == 5);
  CHECK(a[0].empty());
  for (std::size_t i = 1; i < a.size(); ++i) {
    CHECK(a[i].size() >= 2u);
    CHECK(a[i].size() <= 6u);
    CHECK(a[i].front() == v.id("the"));
    CHECK(a[i].back() == v.id("."));
  }
  CHECK(a == sample_prefixes(p, 5, 2, 6, v.id("the"), v.id("."), 9));
  CHECK_THROWS(sample_prefixes(p, 0, 2, 6, 0, 1, 1));
  CHECK_THROWS(sample_prefixes(p, 3, 5, 4, 0, 1, 1));
}
