#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "pplug/persona.hpp"

using namespace pplug;

namespace {

EncodedProfile random_profile(int n, int d, Rng& rng) {
  EncodedProfile p;
  p.user_id = "u";
  p.rows.resize(n, d);
  for (int i = 0; i < n; ++i) {
    p.behavior_ids.push_back("b" + std::to_string(i));
    for (int j = 0; j < d; ++j) p.rows(i, j) = rng.normal();
  }
  return p;
}

Vector random_vector(int d, Rng& rng) {
  Vector v(d);
  for (int j = 0; j < d; ++j) v(j) = rng.normal();
  return v;
}

ProjectorParams random_projector(int d_enc, int d_lm, std::uint64_t seed) {
  Rng rng(seed);
  return init_projector(d_enc, d_lm, rng);
}

}  // namespace

TEST_CASE("attention_weights: uniform for equal dots, singleton, hand-computed pair") {
  Matrix rows(3, 2);
  rows << 1, 0, 1, 0, 1, 0;  // identical rows -> equal dots
  Vector x(2);
  x << 2.0, 5.0;
  Vector w = attention_weights(x, rows);
  for (int i = 0; i < 3; ++i) CHECK(w(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Matrix single(1, 2);
  single << 4, -1;
  Vector ws = attention_weights(x, single);
  CHECK(ws.size() == 1);
  CHECK(ws(0) == doctest::Approx(1.0).epsilon(1e-12));

  // Dots 0 and ln(3): softmax = [1, 3] / 4 = [0.25, 0.75].
  Matrix pair(2, 2);
  pair << 0, 1, std::log(3.0), 0;
  Vector xe(2);
  xe << 1, 0;
  Vector wp = attention_weights(xe, pair);
  CHECK(wp(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(wp(1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("attention_weights: errors on width mismatch and empty profile") {
  Matrix rows(2, 3);
  rows.setZero();
  Vector x(2);
  x.setZero();
  CHECK_THROWS(attention_weights(x, rows));
  Matrix empty(0, 2);
  CHECK_THROWS(attention_weights(x, empty));
}

TEST_CASE("attention_weights: simplex and shift invariance over 1000 random draws") {
  Rng rng(123);
  for (int trial = 0; trial < 1000; ++trial) {
    int n = 1 + static_cast<int>(rng.below(8));
    int d = 2 + static_cast<int>(rng.below(6));
    EncodedProfile p = random_profile(n, d, rng);
    Vector x = random_vector(d, rng);
    Vector w = attention_weights(x, p.rows);
    CHECK(w.minCoeff() >= 0.0);
    CHECK(std::abs(w.sum() - 1.0) <= 1e-6);

    // Add a constant c to every dot product by shifting rows along x.
    double c = rng.normal() * 3.0;
    Matrix shifted = p.rows;
    double xsq = x.squaredNorm();
    if (xsq > 1e-12) {
      for (int i = 0; i < n; ++i) shifted.row(i) += (c / xsq) * x.transpose();
      Vector w2 = attention_weights(x, shifted);
      CHECK((w - w2).cwiseAbs().maxCoeff() <= 1e-6);
    }
  }
}

TEST_CASE("project: zero parameters give zero output; shape; hand-built 2-3-2 oracle") {
  ProjectorParams zero;
  zero.W1 = Matrix::Zero(2, 3);
  zero.b1 = Vector::Zero(3);
  zero.W2 = Matrix::Zero(3, 2);
  zero.b2 = Vector::Zero(2);
  Vector h(2);
  h << 1.5, -2.0;
  Vector out = project(zero, h);
  CHECK(out.size() == 2);
  CHECK(out.cwiseAbs().maxCoeff() == 0.0);

  ProjectorParams p;
  p.W1 = Matrix(2, 3);
  p.W1 << 1, 0, 2, 0, 1, -1;
  p.b1 = Vector(3);
  p.b1 << 0.5, 0, -0.5;
  p.W2 = Matrix(3, 2);
  p.W2 << 1, 1, 2, 0, 0, 3;
  p.b2 = Vector(2);
  p.b2 << 0.1, -0.2;
  // u = h W1 + b1, a = gelu(u), out = a W2 + b2 computed by hand.
  Vector u(3);
  u << 1.5 * 1 + (-2.0) * 0 + 0.5, 1.5 * 0 + (-2.0) * 1 + 0.0, 1.5 * 2 + (-2.0) * (-1) - 0.5;
  Vector a(3);
  for (int i = 0; i < 3; ++i) a(i) = gelu(u(i));
  Vector expect(2);
  expect << a(0) * 1 + a(1) * 2 + a(2) * 0 + 0.1, a(0) * 1 + a(1) * 0 + a(2) * 3 - 0.2;
  Vector got = project(p, h);
  CHECK((got - expect).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("personal_embedding: singleton profile ignores the input vector") {
  Rng rng(5);
  EncodedProfile p = random_profile(1, 4, rng);
  ProjectorParams proj = random_projector(4, 6, 7);
  Vector x1 = random_vector(4, rng);
  Vector x2 = random_vector(4, rng);
  PersonalEmbedding a = personal_embedding(p, x1, proj);
  PersonalEmbedding b = personal_embedding(p, x2, proj);
  CHECK((a.vector - b.vector).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((a.vector - project(proj, p.rows.row(0))).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(a.weights(0) == doctest::Approx(1.0));
}

TEST_CASE("personal_embedding: invariant under row permutation, 200 random profiles") {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 2 + static_cast<int>(rng.below(6));
    EncodedProfile p = random_profile(n, 5, rng);
    ProjectorParams proj = random_projector(5, 7, 100 + trial);
    Vector x = random_vector(5, rng);
    PersonalEmbedding base = personal_embedding(p, x, proj);

    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    EncodedProfile q = p;
    for (int i = 0; i < n; ++i) {
      q.rows.row(i) = p.rows.row(perm[i]);
      q.behavior_ids[i] = p.behavior_ids[perm[i]];
    }
    PersonalEmbedding permuted = personal_embedding(q, x, proj);
    CHECK((base.vector - permuted.vector).cwiseAbs().maxCoeff() <= 1e-6);
    for (int i = 0; i < n; ++i)
      CHECK(std::abs(permuted.weights(i) - base.weights(perm[i])) <= 1e-6);
  }
}

TEST_CASE("mean variant: two-row average, equals attention when dots are equal") {
  Rng rng(8);
  ProjectorParams proj = random_projector(3, 4, 9);
  EncodedProfile p = random_profile(2, 3, rng);
  PersonalEmbedding m = personal_embedding_mean(p, proj);
  Vector expect = 0.5 * (project(proj, p.rows.row(0)) + project(proj, p.rows.row(1)));
  CHECK((m.vector - expect).cwiseAbs().maxCoeff() <= 1e-12);

  // Make all dots equal by using identical rows.
  EncodedProfile eq = random_profile(3, 3, rng);
  eq.rows.row(1) = eq.rows.row(0);
  eq.rows.row(2) = eq.rows.row(0);
  Vector x = random_vector(3, rng);
  PersonalEmbedding att = personal_embedding(eq, x, proj);
  PersonalEmbedding mean = personal_embedding_mean(eq, proj);
  CHECK((att.vector - mean.vector).cwiseAbs().maxCoeff() <= 1e-9);

  EncodedProfile empty;
  empty.rows.resize(0, 3);
  CHECK_THROWS(personal_embedding_mean(empty, proj));
}

TEST_CASE("topk variant: full reduction, argmax at K=1, monotone selections") {
  Rng rng(31);
  ProjectorParams proj = random_projector(4, 5, 11);
  for (int trial = 0; trial < 50; ++trial) {
    int n = 1 + static_cast<int>(rng.below(7));
    EncodedProfile p = random_profile(n, 4, rng);
    Vector x = random_vector(4, rng);
    PersonalEmbedding full = personal_embedding(p, x, proj);
    PersonalEmbedding capped = personal_embedding_topk(p, x, proj, n + 3);
    CHECK((full.vector - capped.vector).cwiseAbs().maxCoeff() == 0.0);

    PersonalEmbedding one = personal_embedding_topk(p, x, proj, 1);
    Eigen::Index best;
    full.weights.maxCoeff(&best);
    CHECK((one.vector - project(proj, p.rows.row(best))).cwiseAbs().maxCoeff() <= 1e-12);

    // Top-K index sets are nested as K grows.
    std::set<Eigen::Index> prev;
    for (int K = 1; K <= n; ++K) {
      auto idx = topk_indices(full.weights, K);
      std::set<Eigen::Index> cur(idx.begin(), idx.end());
      CHECK(cur.size() == static_cast<std::size_t>(K));
      CHECK(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
      prev = cur;
    }
  }
}

TEST_CASE("topk weights: zero outside the selection, renormalized inside") {
  Rng rng(13);
  ProjectorParams proj = random_projector(4, 5, 12);
  EncodedProfile p = random_profile(6, 4, rng);
  Vector x = random_vector(4, rng);
  PersonalEmbedding sel = personal_embedding_topk(p, x, proj, 2);
  int nonzero = 0;
  for (int i = 0; i < 6; ++i)
    if (sel.weights(i) != 0.0) ++nonzero;
  CHECK(nonzero == 2);
  CHECK(std::abs(sel.weights.sum() - 1.0) <= 1e-9);
}

TEST_CASE("persona gradient: squared norm of P vs central finite differences") {
  const double eps = 1e-4;
  Rng rng(21);
  EncodedProfile p = random_profile(3, 4, rng);
  ProjectorParams proj = random_projector(4, 6, 22);
  Vector x = random_vector(4, rng);

  auto loss_of = [&](const ProjectorParams& pr, const Vector& xv) {
    PersonaTape tape;
    PersonalEmbedding pe = persona_forward(p, &xv, pr, PersonaVariant::attention, 0, tape);
    return pe.vector.squaredNorm();
  };

  PersonaTape tape;
  PersonalEmbedding pe = persona_forward(p, &x, proj, PersonaVariant::attention, 0, tape);
  ProjectorParams grads;
  grads.W1 = Matrix::Zero(4, proj.d_hidden());
  grads.b1 = Vector::Zero(proj.d_hidden());
  grads.W2 = Matrix::Zero(proj.d_hidden(), 6);
  grads.b2 = Vector::Zero(6);
  Vector dx = persona_backward(p, proj, tape, 2.0 * pe.vector, grads);

  double max_rel = 0.0;
  auto check_array = [&](double* param, double* grad, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      double keep = param[i];
      param[i] = keep + eps;
      double up = loss_of(proj, x);
      param[i] = keep - eps;
      double dn = loss_of(proj, x);
      param[i] = keep;
      double fd = (up - dn) / (2 * eps);
      double rel = std::abs(fd - grad[i]) / std::max(1e-6, std::abs(fd) + std::abs(grad[i]));
      max_rel = std::max(max_rel, rel);
    }
  };
  check_array(proj.W1.data(), grads.W1.data(), proj.W1.size());
  check_array(proj.b1.data(), grads.b1.data(), proj.b1.size());
  check_array(proj.W2.data(), grads.W2.data(), proj.W2.size());
  check_array(proj.b2.data(), grads.b2.data(), proj.b2.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double keep = x(i);
    x(i) = keep + eps;
    double up = loss_of(proj, x);
    x(i) = keep - eps;
    double dn = loss_of(proj, x);
    x(i) = keep;
    double fd = (up - dn) / (2 * eps);
    double rel = std::abs(fd - dx(i)) / std::max(1e-6, std::abs(fd) + std::abs(dx(i)));
    max_rel = std::max(max_rel, rel);
  }
  CHECK(max_rel <= 1e-3);
}

TEST_CASE("persona_forward: mean variant ignores x and matches the plain mean") {
  Rng rng(33);
  EncodedProfile p = random_profile(4, 3, rng);
  ProjectorParams proj = random_projector(3, 5, 34);
  PersonaTape tape;
  PersonalEmbedding viaf = persona_forward(p, nullptr, proj, PersonaVariant::mean, 0, tape);
  PersonalEmbedding direct = personal_embedding_mean(p, proj);
  CHECK((viaf.vector - direct.vector).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK_FALSE(tape.input_aware);
}

TEST_CASE("instruction embedding: shape and small init scale") {
  Rng rng(55);
  InstructionEmbedding instr = init_instruction(3, 8, rng);
  CHECK(instr.rows.rows() == 3);
  CHECK(instr.rows.cols() == 8);
  CHECK(instr.trainable);
  CHECK(instr.rows.cwiseAbs().maxCoeff() < 0.2);
}

TEST_CASE("personal embedding export: roundtrip preserves id and f32 values") {
  Rng rng(66);
  Vector v = random_vector(6, rng);
  auto path = (std::filesystem::temp_directory_path() / "pplug_persona_export.bin").string();
  write_personal_embedding(path, "user-42", v);
  ExportedEmbedding back = read_personal_embedding(path);
  CHECK(back.user_id == "user-42");
  REQUIRE(back.vector.size() == 6);
  for (Eigen::Index i = 0; i < 6; ++i) CHECK(back.vector(i) == round_f32(v(i)));
  // Re-export is bit-identical.
  auto path2 = (std::filesystem::temp_directory_path() / "pplug_persona_export2.bin").string();
  write_personal_embedding(path2, "user-42", back.vector);
  ExportedEmbedding again = read_personal_embedding(path2);
  CHECK((again.vector - back.vector).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}
