#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include <movid/disentangle.hpp>

using namespace movid;
using Catch::Approx;

namespace {

FeatureMatrix random_matrix(int rows, int cols, uint64_t seed) {
  FeatureMatrix m(rows, cols);
  for (int t = 0; t < rows; ++t)
    for (int c = 0; c < cols; ++c)
      m.at(t, c) = 2.0 * CounterRng::uniform(CounterRng::key(seed, t, c)) - 1.0;
  return m;
}

FeatureMatrix random_normalized(int rows, int cols, uint64_t seed) {
  FeatureMatrix m = random_matrix(rows, cols, seed);
  for (int t = 0; t < rows; ++t) {
    double n = 0.0;
    for (int c = 0; c < cols; ++c) n += m.at(t, c) * m.at(t, c);
    n = std::sqrt(n);
    for (int c = 0; c < cols; ++c) m.at(t, c) /= n;
  }
  return m;
}

// Direct evaluation of the 2N-anchor contrastive loss with plain
// exponentials in extended precision. No shared code with the library.
double infonce_oracle(const FeatureMatrix& Za, const FeatureMatrix& Zm,
                      double tau) {
  const int N = Za.rows, D = Za.cols, M = 2 * N;
  auto rowp = [&](int i) { return i < N ? Za.row(i) : Zm.row(i - N); };
  long double total = 0.0L;
  for (int i = 0; i < M; ++i) {
    const int p = (i + N) % M;
    long double denom = 0.0L, pos = 0.0L;
    for (int j = 0; j < M; ++j) {
      if (j == i) continue;
      long double dot = 0.0L;
      for (int c = 0; c < D; ++c)
        dot += static_cast<long double>(rowp(i)[c]) * rowp(j)[c];
      long double e = expl(dot / tau);
      denom += e;
      if (j == p) pos = e;
    }
    total += -logl(pos / denom);
  }
  return static_cast<double>(total / M);
}

double rel_err(double an, double fd) {
  return std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3});
}

}  // namespace

TEST_CASE("orthonormalize keeps an orthonormal pair") {
  FeatureMatrix raw(1, 4);
  raw.at(0, 0) = 1.0;  // (1,0)
  raw.at(0, 3) = 1.0;  // (0,1)
  BasisSet B = orthonormalize_bases(raw, 2, 2);
  REQUIRE(B.orthonormalized);
  REQUIRE(B.basis(0, 0)[0] == 1.0);
  REQUIRE(B.basis(0, 0)[1] == 0.0);
  REQUIRE(B.basis(0, 1)[0] == 0.0);
  REQUIRE(B.basis(0, 1)[1] == 1.0);
}

TEST_CASE("orthonormalize matches hand Gram-Schmidt") {
  FeatureMatrix raw(1, 4);
  raw.at(0, 0) = 1.0;  // (1,0)
  raw.at(0, 2) = 1.0;  // (1,1)
  raw.at(0, 3) = 1.0;
  BasisSet B = orthonormalize_bases(raw, 2, 2);
  REQUIRE(B.basis(0, 0)[0] == Approx(1.0).margin(1e-15));
  REQUIRE(B.basis(0, 0)[1] == Approx(0.0).margin(1e-15));
  REQUIRE(B.basis(0, 1)[0] == Approx(0.0).margin(1e-15));
  REQUIRE(B.basis(0, 1)[1] == Approx(1.0).margin(1e-15));
}

TEST_CASE("orthonormalize drops a collinear vector to zero") {
  FeatureMatrix raw(1, 4);
  raw.at(0, 0) = 1.0;  // (1,0)
  raw.at(0, 2) = 2.0;  // (2,0)
  BasisSet B = orthonormalize_bases(raw, 2, 2);
  REQUIRE(B.basis(0, 1)[0] == 0.0);
  REQUIRE(B.basis(0, 1)[1] == 0.0);
}

TEST_CASE("orthonormalize rejects mismatched widths") {
  FeatureMatrix raw(1, 5);
  REQUIRE_THROWS_AS(orthonormalize_bases(raw, 2, 2), ShapeMismatch);
}

TEST_CASE("single-basis deflation follows the damped formula") {
  FeatureMatrix raw(1, 2);
  raw.at(0, 0) = 1.0;
  BasisSet B = orthonormalize_bases(raw, 1, 2);

  FeatureMatrix M(1, 2);
  M.at(0, 0) = 1.0;
  M.at(0, 1) = 1.0;
  ProjectionResult r = ortho_project(M, B);

  const double alpha = 1.0 / (1.0 + 1e-6);
  REQUIRE(r.alphas.at(0, 0) == Approx(alpha).margin(1e-12));
  REQUIRE(r.m_proj.at(0, 0) == Approx(1.0 - alpha).margin(1e-12));
  REQUIRE(r.m_proj.at(0, 1) == Approx(1.0).margin(1e-12));
}

TEST_CASE("a full basis deflates the feature to zero") {
  FeatureMatrix raw(1, 4);
  raw.at(0, 0) = 1.0;
  raw.at(0, 3) = 1.0;
  BasisSet B = orthonormalize_bases(raw, 2, 2);

  FeatureMatrix M(1, 2);
  M.at(0, 0) = 2.0;
  M.at(0, 1) = 3.0;
  ProjectionResult r = ortho_project(M, B);
  REQUIRE(std::abs(r.m_proj.at(0, 0)) <= 1e-5);
  REQUIRE(std::abs(r.m_proj.at(0, 1)) <= 1e-5);
}

TEST_CASE("projection matches a least-squares oracle") {
  const int D = 32, K = 4, T = 6;
  for (uint64_t seed : {101u, 202u, 303u}) {
    FeatureMatrix raw = random_matrix(T, K * D, seed);
    BasisSet B = orthonormalize_bases(raw, K, D);
    FeatureMatrix M = random_matrix(T, D, seed + 7);
    ProjectionResult r = ortho_project(M, B);

    for (int t = 0; t < T; ++t) {
      Eigen::MatrixXd Bm(D, K);
      for (int k = 0; k < K; ++k)
        for (int i = 0; i < D; ++i) Bm(i, k) = B.basis(t, k)[i];
      Eigen::VectorXd m(D);
      for (int i = 0; i < D; ++i) m(i) = M.at(t, i);

      // Normal equations, solved independently of the deflation loop.
      Eigen::VectorXd x = (Bm.transpose() * Bm).ldlt().solve(Bm.transpose() * m);
      Eigen::VectorXd resid = m - Bm * x;
      for (int i = 0; i < D; ++i)
        REQUIRE(std::abs(r.m_proj.at(t, i) - resid(i)) <= 1e-5);
    }
  }
}

TEST_CASE("least-squares agreement holds up to D=64 K=8") {
  for (auto [D, K] : {std::pair{16, 2}, {48, 6}, {64, 8}}) {
    FeatureMatrix raw = random_matrix(3, K * D, 0xABCu + D);
    BasisSet B = orthonormalize_bases(raw, K, D);
    FeatureMatrix M = random_matrix(3, D, 0xDEFu + D);
    ProjectionResult r = ortho_project(M, B);
    for (int t = 0; t < 3; ++t) {
      Eigen::MatrixXd Bm(D, K);
      for (int k = 0; k < K; ++k)
        for (int i = 0; i < D; ++i) Bm(i, k) = B.basis(t, k)[i];
      Eigen::VectorXd m(D);
      for (int i = 0; i < D; ++i) m(i) = M.at(t, i);
      Eigen::VectorXd x = (Bm.transpose() * Bm).ldlt().solve(Bm.transpose() * m);
      Eigen::VectorXd resid = m - Bm * x;
      for (int i = 0; i < D; ++i)
        REQUIRE(std::abs(r.m_proj.at(t, i) - resid(i)) <= 1e-5);
    }
  }
}

TEST_CASE("the projected feature is orthogonal to every retained basis") {
  const int D = 32, K = 4, T = 8;
  FeatureMatrix raw = random_matrix(T, K * D, 404);
  BasisSet B = orthonormalize_bases(raw, K, D);
  FeatureMatrix M = random_matrix(T, D, 505);
  ProjectionResult r = ortho_project(M, B);

  for (int t = 0; t < T; ++t) {
    double m_norm = 0.0;
    for (int i = 0; i < D; ++i) m_norm += M.at(t, i) * M.at(t, i);
    m_norm = std::sqrt(m_norm);
    for (int k = 0; k < K; ++k) {
      const double* v = B.basis(t, k);
      double v_norm = 0.0, dot = 0.0;
      for (int i = 0; i < D; ++i) {
        v_norm += v[i] * v[i];
        dot += r.m_proj.at(t, i) * v[i];
      }
      if (v_norm < 0.25) continue;  // dropped basis
      REQUIRE(std::abs(dot) <= 1e-6 * (m_norm + 1.0));
    }
  }
}

TEST_CASE("projection is near-idempotent up to the deflation regularizer") {
  // The deflation step divides by ||v||^2 + 1e-6, so one pass leaves a
  // relative ~1e-6 component along each basis. A second pass can therefore
  // move an entry by at most ~1e-6 * sum_k |alpha_k| for that frame.
  const int D = 16, K = 3, T = 4;
  FeatureMatrix raw = random_matrix(T, K * D, 606);
  BasisSet B = orthonormalize_bases(raw, K, D);
  FeatureMatrix M = random_matrix(T, D, 707);
  ProjectionResult once = ortho_project(M, B);
  ProjectionResult twice = ortho_project(once.m_proj, B);
  for (int t = 0; t < T; ++t) {
    double alpha_sum = 0.0;
    for (int k = 0; k < K; ++k) alpha_sum += std::abs(once.alphas.at(t, k));
    const double bound = 2e-6 * alpha_sum + 1e-12;
    for (int c = 0; c < D; ++c)
      REQUIRE(std::abs(twice.m_proj.at(t, c) - once.m_proj.at(t, c)) <= bound);
  }
}

TEST_CASE("ortho_project validates shapes") {
  FeatureMatrix raw = random_matrix(2, 6, 1);
  BasisSet B = orthonormalize_bases(raw, 2, 3);
  REQUIRE_THROWS_AS(ortho_project(random_matrix(2, 4, 2), B), ShapeMismatch);
  REQUIRE_THROWS_AS(ortho_project(random_matrix(3, 3, 3), B), ShapeMismatch);
}

TEST_CASE("loss_ortho vanishes on orthogonal rows") {
  FeatureMatrix M(2, 4), V(2, 4);
  M.at(0, 1) = 1.0;
  V.at(0, 0) = 1.0;
  M.at(1, 2) = 2.0;
  V.at(1, 3) = -1.0;
  REQUIRE(loss_ortho(M, V) == 0.0);
}

TEST_CASE("loss_ortho of identical unit rows is one") {
  FeatureMatrix M(3, 5);
  for (int t = 0; t < 3; ++t) M.at(t, t) = 1.0;
  REQUIRE(loss_ortho(M, M) == 1.0);
}

TEST_CASE("loss_ortho gradient matches finite differences") {
  const int T = 3, D = 8;
  FeatureMatrix M = random_matrix(T, D, 808);
  FeatureMatrix V = random_matrix(T, D, 909);
  FeatureMatrix dM, dV;
  loss_ortho(M, V, &dM, &dV);

  const double h = 1e-5;
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < D; ++i) {
      FeatureMatrix Mp = M, Mm = M;
      Mp.at(t, i) += h;
      Mm.at(t, i) -= h;
      double fd = (loss_ortho(Mp, V) - loss_ortho(Mm, V)) / (2.0 * h);
      REQUIRE(rel_err(dM.at(t, i), fd) <= 1e-7);

      FeatureMatrix Vp = V, Vm = V;
      Vp.at(t, i) += h;
      Vm.at(t, i) -= h;
      fd = (loss_ortho(M, Vp) - loss_ortho(M, Vm)) / (2.0 * h);
      REQUIRE(rel_err(dV.at(t, i), fd) <= 1e-7);
    }
  }
}

TEST_CASE("loss_ortho validates shapes") {
  REQUIRE_THROWS_AS(loss_ortho(FeatureMatrix(2, 3), FeatureMatrix(2, 4)),
                    ShapeMismatch);
}

TEST_CASE("anchor embedding is view independent and unit norm") {
  EncoderConfig cfg;
  cfg.d_motion = 8;
  ParamStore ps(15);
  AnchorEmbed emb;
  emb.build(ps, "anchor", cfg);

  CanonicalPose c{};
  for (int i = 0; i < kCanonAngles; ++i)
    c.angles[i] = 0.3 * std::sin(0.7 * i + 0.2);

  std::vector<double> z1(emb.d_out), z2(emb.d_out);
  emb.forward(ps, c, z1.data(), nullptr);
  emb.forward(ps, c, z2.data(), nullptr);

  double n = 0.0;
  for (int i = 0; i < emb.d_out; ++i) {
    REQUIRE(z1[i] == z2[i]);
    n += z1[i] * z1[i];
  }
  REQUIRE(std::abs(std::sqrt(n) - 1.0) <= 1e-12);
}

TEST_CASE("anchor embedding gradient matches finite differences") {
  EncoderConfig cfg;
  cfg.d_motion = 6;
  ParamStore ps(16);
  AnchorEmbed emb;
  emb.build(ps, "anchor", cfg);

  CanonicalPose c{};
  for (int i = 0; i < kCanonAngles; ++i)
    c.angles[i] = 0.4 * std::cos(1.1 * i) + 0.05;

  std::vector<double> w(emb.d_out);
  for (int i = 0; i < emb.d_out; ++i) w[i] = 0.5 + 0.25 * i;

  auto value = [&]() {
    std::vector<double> z(emb.d_out);
    emb.forward(ps, c, z.data(), nullptr);
    double L = 0.0;
    for (int i = 0; i < emb.d_out; ++i) L += w[i] * z[i];
    return L;
  };

  AnchorEmbed::Cache cache;
  std::vector<double> z(emb.d_out);
  emb.forward(ps, c, z.data(), &cache);
  GradStore g;
  emb.backward(ps, cache, w.data(), g);

  for (const std::string& name : {"anchor.lin.W", "anchor.lin.b"}) {
    Tensor& t = ps.at(name);
    const std::vector<double>* gv = g.find(name);
    REQUIRE(gv != nullptr);
    for (size_t i = 0; i < t.size(); ++i) {
      const double h = 1e-6 * (1.0 + std::abs(t.v[i]));
      const double orig = t.v[i];
      t.v[i] = orig + h;
      double fp = value();
      t.v[i] = orig - h;
      double fm = value();
      t.v[i] = orig;
      REQUIRE(rel_err((*gv)[i], (fp - fm) / (2.0 * h)) <= 1e-5);
    }
  }
}

TEST_CASE("anchor embedding rejects a collapsed map") {
  EncoderConfig cfg;
  cfg.d_motion = 4;
  ParamStore ps(17);
  AnchorEmbed emb;
  emb.build(ps, "anchor", cfg);
  for (auto& [name, t] : ps.tensors()) std::fill(t.v.begin(), t.v.end(), 0.0);
  CanonicalPose c{};
  std::vector<double> z(emb.d_out);
  REQUIRE_THROWS_AS(emb.forward(ps, c, z.data(), nullptr),
                    DegenerateConfiguration);
}

TEST_CASE("loss_align of a single pair is exactly zero") {
  FeatureMatrix Za = random_normalized(1, 6, 1010);
  FeatureMatrix Zm = random_normalized(1, 6, 2020);
  REQUIRE(loss_align(Za, Zm, 0.07) == 0.0);
}

TEST_CASE("loss_align on orthogonal unit pairs hits the closed form") {
  FeatureMatrix Za(2, 4), Zm(2, 4);
  Za.at(0, 0) = 1.0;
  Za.at(1, 1) = 1.0;
  Zm.at(0, 0) = 1.0;
  Zm.at(1, 1) = 1.0;
  const double expected = std::log((std::exp(1.0) + 2.0) / std::exp(1.0));
  REQUIRE(loss_align(Za, Zm, 1.0) == Approx(expected).margin(1e-10));
}

TEST_CASE("loss_align matches a brute-force oracle") {
  int i = 0;
  for (int N : {2, 5, 9}) {
    for (double tau : {0.07, 0.5, 1.0}) {
      FeatureMatrix Za = random_normalized(N, 8, 3000 + i);
      FeatureMatrix Zm = random_normalized(N, 8, 4000 + i);
      ++i;
      double got = loss_align(Za, Zm, tau);
      double want = infonce_oracle(Za, Zm, tau);
      REQUIRE(got == Approx(want).margin(1e-10));
    }
  }
}

TEST_CASE("raising the positive similarity lowers the loss") {
  FeatureMatrix Zm(2, 4);
  Zm.at(0, 0) = 1.0;
  Zm.at(1, 1) = 1.0;

  double prev = std::numeric_limits<double>::infinity();
  for (double theta : {0.8, 0.6, 0.4, 0.2}) {
    FeatureMatrix Za(2, 4);
    Za.at(0, 0) = std::cos(theta);  // positive similarity = cos(theta)
    Za.at(0, 2) = std::sin(theta);  // off-axis leak is a fixed negative
    Za.at(1, 1) = 1.0;
    double l = loss_align(Za, Zm, 0.5);
    REQUIRE(l < prev);
    prev = l;
  }
}

TEST_CASE("loss_align is symmetric under swapping the blocks") {
  FeatureMatrix Za = random_normalized(6, 8, 5050);
  FeatureMatrix Zm = random_normalized(6, 8, 6060);
  double a = loss_align(Za, Zm, 0.07);
  double b = loss_align(Zm, Za, 0.07);
  REQUIRE(std::abs(a - b) <= 1e-12);
}

TEST_CASE("loss_align is invariant under a common rotation") {
  const int N = 5, D = 6;
  FeatureMatrix Za = random_normalized(N, D, 7070);
  FeatureMatrix Zm = random_normalized(N, D, 8080);
  double base = loss_align(Za, Zm, 0.2);

  Eigen::MatrixXd A(D, D);
  for (int i = 0; i < D; ++i)
    for (int j = 0; j < D; ++j)
      A(i, j) = 2.0 * CounterRng::uniform(CounterRng::key(9090, i, j)) - 1.0;
  Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(A).householderQ();

  auto rotate = [&](const FeatureMatrix& Z) {
    FeatureMatrix out(Z.rows, Z.cols);
    for (int t = 0; t < Z.rows; ++t) {
      Eigen::VectorXd r(D);
      for (int c = 0; c < D; ++c) r(c) = Z.at(t, c);
      Eigen::VectorXd q = Q * r;
      for (int c = 0; c < D; ++c) out.at(t, c) = q(c);
    }
    return out;
  };
  double rotated = loss_align(rotate(Za), rotate(Zm), 0.2);
  REQUIRE(std::abs(rotated - base) <= 1e-9);
}

TEST_CASE("loss_align validates its inputs") {
  REQUIRE_THROWS_AS(loss_align(FeatureMatrix(), FeatureMatrix(), 0.07),
                    DegenerateBatch);
  REQUIRE_THROWS_AS(loss_align(random_normalized(2, 4, 1), random_normalized(3, 4, 2), 0.07),
                    ShapeMismatch);
  FeatureMatrix bad = random_normalized(2, 4, 3);
  bad.at(1, 0) *= 1.5;
  REQUIRE_THROWS_AS(loss_align(random_normalized(2, 4, 4), bad, 0.07),
                    NonNormalizedInput);
}

TEST_CASE("loss_align gradients match finite differences") {
  const int N = 3, D = 6;
  FeatureMatrix Za = random_normalized(N, D, 1111);
  FeatureMatrix Zm = random_normalized(N, D, 2222);
  FeatureMatrix dZa, dZm;
  loss_align(Za, Zm, 0.5, &dZa, &dZm);

  const double h = 1e-7;
  for (int t = 0; t < N; ++t) {
    for (int c = 0; c < D; ++c) {
      FeatureMatrix p = Za, m = Za;
      p.at(t, c) += h;
      m.at(t, c) -= h;
      double fd = (loss_align(p, Zm, 0.5) - loss_align(m, Zm, 0.5)) / (2.0 * h);
      REQUIRE(rel_err(dZa.at(t, c), fd) <= 1e-5);

      p = Zm;
      m = Zm;
      p.at(t, c) += h;
      m.at(t, c) -= h;
      fd = (loss_align(Za, p, 0.5) - loss_align(Za, m, 0.5)) / (2.0 * h);
      REQUIRE(rel_err(dZm.at(t, c), fd) <= 1e-5);
    }
  }
}

TEST_CASE("total_loss reduces to the pose term at zero weights") {
  LossReport r = total_loss(2.5, 100.0, -3.0, 0.0, 0.0);
  REQUIRE(r.l_total == 2.5);
  REQUIRE_THROWS_AS(total_loss(1.0, 1.0, 1.0, -0.1, 0.0), InvalidArg);
}

TEST_CASE("total_loss applies the configured weights") {
  REQUIRE(total_loss(0.0, 0.5, 0.0, 1.0, 0.0).l_total == 0.5);
  REQUIRE(total_loss(1.0, 2.0, 3.0, 0.5, 0.5).l_total == Approx(3.5).margin(1e-15));
}

TEST_CASE("combined gradients are the entrywise linear combination") {
  GradStore gp, go, ga;
  gp.at("w", 3) = {1.0, 2.0, 3.0};
  go.at("w", 3) = {0.5, -1.0, 0.0};
  go.at("only_ortho", 2) = {4.0, 5.0};
  ga.at("w", 3) = {0.0, 1.0, -2.0};

  const double alpha = 0.3, beta = 0.7;
  GradStore out = combine_grads(gp, go, ga, alpha, beta);

  const std::vector<double>& w = *out.find("w");
  REQUIRE(std::abs(w[0] - (1.0 + 0.3 * 0.5)) <= 1e-12);
  REQUIRE(std::abs(w[1] - (2.0 - 0.3 + 0.7)) <= 1e-12);
  REQUIRE(std::abs(w[2] - (3.0 - 1.4)) <= 1e-12);
  const std::vector<double>& oo = *out.find("only_ortho");
  REQUIRE(std::abs(oo[0] - 1.2) <= 1e-12);
  REQUIRE(std::abs(oo[1] - 1.5) <= 1e-12);
}
