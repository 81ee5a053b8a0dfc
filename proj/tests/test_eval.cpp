#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <numeric>

#include <movid/eval.hpp>

using namespace movid;
using Catch::Approx;

namespace {

Skeleton3D random_skeleton(uint64_t seed) {
  Skeleton3D s;
  for (int j = 0; j < kJoints; ++j)
    s.joints[j] = {2.0 * CounterRng::uniform(CounterRng::key(seed, j, 0)) - 1.0,
                   2.0 * CounterRng::uniform(CounterRng::key(seed, j, 1)) - 1.0,
                   2.0 * CounterRng::uniform(CounterRng::key(seed, j, 2)) - 1.0};
  return s;
}

Skeleton3D transform(const Skeleton3D& s, double scale, const Eigen::Matrix3d& R,
                     const Vec3& t) {
  Skeleton3D out = s;
  for (int j = 0; j < kJoints; ++j) {
    Eigen::Vector3d p(s.joints[j].x, s.joints[j].y, s.joints[j].z);
    Eigen::Vector3d q = scale * (R * p);
    out.joints[j] = Vec3{q.x(), q.y(), q.z()} + t;
  }
  return out;
}

// Best similarity alignment found by searching proper rotations directly:
// a coarse Euler-angle grid followed by repeated local refinement. Scale and
// translation are closed-form given the rotation. Reports the per-joint mean
// residual in mm at the optimum.
double rotation_grid_pa_mm(const Skeleton3D& pred, const Skeleton3D& gt) {
  Eigen::Vector3d pc_mean = Eigen::Vector3d::Zero(), gc_mean = Eigen::Vector3d::Zero();
  for (int j = 0; j < kJoints; ++j) {
    pc_mean += Eigen::Vector3d(pred.joints[j].x, pred.joints[j].y, pred.joints[j].z);
    gc_mean += Eigen::Vector3d(gt.joints[j].x, gt.joints[j].y, gt.joints[j].z);
  }
  pc_mean /= kJoints;
  gc_mean /= kJoints;
  std::vector<Eigen::Vector3d> P(kJoints), G(kJoints);
  double p_ss = 0.0;
  for (int j = 0; j < kJoints; ++j) {
    P[j] = Eigen::Vector3d(pred.joints[j].x, pred.joints[j].y, pred.joints[j].z) - pc_mean;
    G[j] = Eigen::Vector3d(gt.joints[j].x, gt.joints[j].y, gt.joints[j].z) - gc_mean;
    p_ss += P[j].squaredNorm();
  }

  auto eval_sse = [&](double a, double b, double c) {
    Eigen::Matrix3d R = (Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ()) *
                         Eigen::AngleAxisd(b, Eigen::Vector3d::UnitY()) *
                         Eigen::AngleAxisd(c, Eigen::Vector3d::UnitX()))
                            .toRotationMatrix();
    double dot = 0.0;
    for (int j = 0; j < kJoints; ++j) dot += G[j].dot(R * P[j]);
    const double s = std::max(dot, 0.0) / p_ss;
    double sse = 0.0;
    for (int j = 0; j < kJoints; ++j) sse += (s * (R * P[j]) - G[j]).squaredNorm();
    return std::pair<double, Eigen::Matrix3d>(sse, R);
  };

  double best_sse = 1e300, ba = 0.0, bb = 0.0, bc = 0.0;
  const int n = 18;
  for (int ia = 0; ia < n; ++ia)
    for (int ib = 0; ib < n; ++ib)
      for (int ic = 0; ic < n; ++ic) {
        double a = 2.0 * M_PI * ia / n;
        double b = -M_PI / 2.0 + M_PI * ib / (n - 1);
        double c = 2.0 * M_PI * ic / n;
        double sse = eval_sse(a, b, c).first;
        if (sse < best_sse) {
          best_sse = sse;
          ba = a;
          bb = b;
          bc = c;
        }
      }
  double step = 2.0 * M_PI / n;
  for (int iter = 0; iter < 48; ++iter) {
    step *= 0.5;
    for (int ia = -2; ia <= 2; ++ia)
      for (int ib = -2; ib <= 2; ++ib)
        for (int ic = -2; ic <= 2; ++ic) {
          double a = ba + step * ia, b = bb + step * ib, c = bc + step * ic;
          double sse = eval_sse(a, b, c).first;
          if (sse < best_sse) {
            best_sse = sse;
            ba = a;
            bb = b;
            bc = c;
          }
        }
  }

  auto [sse, R] = eval_sse(ba, bb, bc);
  double dot = 0.0;
  for (int j = 0; j < kJoints; ++j) dot += G[j].dot(R * P[j]);
  const double s = std::max(dot, 0.0) / p_ss;
  double mean_dist = 0.0;
  for (int j = 0; j < kJoints; ++j) mean_dist += (s * (R * P[j]) - G[j]).norm();
  return 1000.0 * mean_dist / kJoints;
}

}  // namespace

TEST_CASE("mpjpe of identical sequences is zero") {
  std::vector<Skeleton3D> seq = {random_skeleton(1), random_skeleton(2)};
  REQUIRE(mpjpe(seq, seq) == 0.0);
}

TEST_CASE("a 3-4-0 millimeter offset scores five millimeters") {
  std::vector<Skeleton3D> gt = {random_skeleton(3), random_skeleton(4)};
  std::vector<Skeleton3D> pred = gt;
  for (auto& f : pred)
    for (int j = 0; j < kJoints; ++j) f.joints[j] += Vec3{0.003, 0.004, 0.0};
  REQUIRE(mpjpe(pred, gt) == Approx(5.0).margin(1e-12));
}

TEST_CASE("mpjpe matches a naive double loop") {
  std::vector<Skeleton3D> gt, pred;
  for (int t = 0; t < 5; ++t) {
    gt.push_back(random_skeleton(100 + t));
    pred.push_back(random_skeleton(200 + t));
  }
  double naive = 0.0;
  for (size_t t = 0; t < gt.size(); ++t)
    for (int j = 0; j < kJoints; ++j) {
      double dx = pred[t].joints[j].x - gt[t].joints[j].x;
      double dy = pred[t].joints[j].y - gt[t].joints[j].y;
      double dz = pred[t].joints[j].z - gt[t].joints[j].z;
      naive += std::sqrt(dx * dx + dy * dy + dz * dz);
    }
  naive = 1000.0 * naive / (gt.size() * kJoints);
  REQUIRE(mpjpe(pred, gt) == Approx(naive).margin(1e-12));
}

TEST_CASE("mpjpe validates shapes") {
  std::vector<Skeleton3D> a = {random_skeleton(1)};
  std::vector<Skeleton3D> b = {random_skeleton(1), random_skeleton(2)};
  REQUIRE_THROWS_AS(mpjpe(a, b), ShapeMismatch);
  REQUIRE_THROWS_AS(mpjpe({}, {}), ShapeMismatch);
}

TEST_CASE("procrustes recovers an exact similarity transform") {
  Skeleton3D pred = random_skeleton(7);
  Eigen::Matrix3d R =
      Eigen::AngleAxisd(M_PI / 6.0, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  Skeleton3D gt = transform(pred, 1.3, R, {0.2, -0.1, 0.4});

  AlignmentResult a = procrustes_align(pred, gt);
  REQUIRE(a.scale == Approx(1.3).margin(1e-9));
  for (double r : a.residual_mm) REQUIRE(r <= 1e-9);
  REQUIRE((a.rotation - R).cwiseAbs().maxCoeff() <= 1e-9);
  REQUIRE((a.rotation.transpose() * a.rotation - Eigen::Matrix3d::Identity())
              .cwiseAbs()
              .maxCoeff() <= 1e-10);
  REQUIRE(a.rotation.determinant() == Approx(1.0).margin(1e-10));
}

TEST_CASE("procrustes of identical frames is the identity") {
  Skeleton3D s = random_skeleton(8);
  AlignmentResult a = procrustes_align(s, s);
  REQUIRE((a.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-10);
  REQUIRE(a.scale == Approx(1.0).margin(1e-12));
  REQUIRE(a.translation.cwiseAbs().maxCoeff() <= 1e-12);
  for (double r : a.residual_mm) REQUIRE(r <= 1e-9);
}

TEST_CASE("a mirrored target still yields a proper rotation") {
  // Four distinct joint sites, the rest stacked on the first.
  Skeleton3D pred;
  for (int j = 0; j < kJoints; ++j) pred.joints[j] = {0.1, 0.2, 0.3};
  pred.joints[1] = {0.9, 0.1, -0.2};
  pred.joints[2] = {-0.4, 0.7, 0.5};
  pred.joints[3] = {0.3, -0.6, 0.8};

  Skeleton3D gt = pred;
  for (int j = 0; j < kJoints; ++j) gt.joints[j].x = -gt.joints[j].x;

  AlignmentResult a = procrustes_align(pred, gt);
  REQUIRE(a.rotation.determinant() == Approx(1.0).margin(1e-10));
  double mean_res =
      std::accumulate(a.residual_mm.begin(), a.residual_mm.end(), 0.0) / kJoints;
  REQUIRE(mean_res > 0.0);

  // The constrained optimum over proper rotations, found independently.
  REQUIRE(mean_res == Approx(rotation_grid_pa_mm(pred, gt)).margin(1e-4));
}

TEST_CASE("procrustes rejects degenerate configurations") {
  Skeleton3D line;
  for (int j = 0; j < kJoints; ++j) line.joints[j] = {0.1 * j, 0.2 * j, -0.1 * j};
  Skeleton3D ok = random_skeleton(9);
  REQUIRE_THROWS_AS(procrustes_align(line, ok), DegenerateConfiguration);

  Skeleton3D point;
  for (int j = 0; j < kJoints; ++j) point.joints[j] = {0.5, 0.5, 0.5};
  REQUIRE_THROWS_AS(procrustes_align(point, ok), DegenerateConfiguration);
}

TEST_CASE("pa_mpjpe of a similarity-transformed copy is zero") {
  std::vector<Skeleton3D> pred, gt;
  Eigen::Matrix3d R = (Eigen::AngleAxisd(0.4, Eigen::Vector3d::UnitY()) *
                       Eigen::AngleAxisd(-0.2, Eigen::Vector3d::UnitX()))
                          .toRotationMatrix();
  for (int t = 0; t < 4; ++t) {
    Skeleton3D p = random_skeleton(300 + t);
    pred.push_back(p);
    gt.push_back(transform(p, 0.8, R, {1.0, 2.0, -0.5}));
  }
  REQUIRE(pa_mpjpe(pred, gt) <= 1e-9);
}

TEST_CASE("alignment can only reduce error") {
  for (uint64_t seed : {11u, 22u, 33u, 44u}) {
    std::vector<Skeleton3D> pred, gt;
    for (int t = 0; t < 3; ++t) {
      pred.push_back(random_skeleton(seed * 10 + t));
      gt.push_back(random_skeleton(seed * 10 + 100 + t));
    }
    REQUIRE(pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-12);
  }
}

TEST_CASE("both metrics survive a simultaneous rigid transform") {
  std::vector<Skeleton3D> pred = {random_skeleton(51), random_skeleton(52)};
  std::vector<Skeleton3D> gt = {random_skeleton(61), random_skeleton(62)};
  Eigen::Matrix3d R =
      Eigen::AngleAxisd(1.1, Eigen::Vector3d(1, 2, 2).normalized()).toRotationMatrix();
  Vec3 t{0.3, -0.7, 0.2};

  std::vector<Skeleton3D> pred2, gt2;
  for (const auto& f : pred) pred2.push_back(transform(f, 1.0, R, t));
  for (const auto& f : gt) gt2.push_back(transform(f, 1.0, R, t));

  REQUIRE(mpjpe(pred2, gt2) == Approx(mpjpe(pred, gt)).margin(1e-9));
  REQUIRE(pa_mpjpe(pred2, gt2) == Approx(pa_mpjpe(pred, gt)).margin(1e-9));
}

TEST_CASE("pa_mpjpe matches a rotation-grid oracle") {
  // Five distinct joint sites; remaining joints stacked on the first.
  Skeleton3D pred, gt;
  for (int j = 0; j < kJoints; ++j) {
    pred.joints[j] = {0.05, -0.1, 0.2};
    gt.joints[j] = {-0.07, 0.04, 0.1};
  }
  const Vec3 psites[4] = {{0.8, 0.1, 0.0}, {-0.3, 0.9, 0.2}, {0.1, -0.5, 0.7}, {-0.6, -0.4, -0.5}};
  const Vec3 gsites[4] = {{0.6, 0.4, -0.1}, {-0.5, 0.7, 0.4}, {0.3, -0.6, 0.5}, {-0.2, -0.3, -0.8}};
  for (int i = 0; i < 4; ++i) {
    pred.joints[i + 1] = psites[i];
    gt.joints[i + 1] = gsites[i];
  }

  double got = pa_mpjpe({pred}, {gt});
  double want = rotation_grid_pa_mm(pred, gt);
  REQUIRE(got == Approx(want).margin(1e-3));
}

TEST_CASE("accel_error ignores constant offsets and linear drift") {
  std::vector<Skeleton3D> gt;
  for (int t = 0; t < 8; ++t) gt.push_back(random_skeleton(400 + t));

  std::vector<Skeleton3D> off = gt;
  for (auto& f : off)
    for (int j = 0; j < kJoints; ++j) f.joints[j] += Vec3{0.4, -0.2, 0.9};
  REQUIRE(accel_error(off, gt) <= 1e-9);

  std::vector<Skeleton3D> drift = gt;
  for (int t = 0; t < 8; ++t)
    for (int j = 0; j < kJoints; ++j)
      drift[t].joints[j] += Vec3{0.01, 0.02, -0.03} * static_cast<double>(t);
  REQUIRE(accel_error(drift, gt) <= 1e-9);
}

TEST_CASE("accel_error of a sinusoid matches the closed form") {
  const int T = 12;
  const double A = 0.05, w = 0.7;
  Skeleton3D base = random_skeleton(500);

  std::vector<Skeleton3D> pred(T, base), gt(T, base);
  for (int t = 0; t < T; ++t) gt[t].joints[4].y += A * std::sin(w * t);

  // Second difference of sin(w t) is 2(cos w - 1) sin(w t).
  double expected = 0.0;
  for (int t = 1; t + 1 < T; ++t)
    expected += std::abs(2.0 * (std::cos(w) - 1.0) * A * std::sin(w * t));
  expected = 1000.0 * expected / ((T - 2) * kJoints);

  REQUIRE(accel_error(pred, gt) == Approx(expected).margin(1e-9));
}

TEST_CASE("accel_error needs three frames") {
  std::vector<Skeleton3D> two = {random_skeleton(1), random_skeleton(2)};
  REQUIRE_THROWS_AS(accel_error(two, two), TooShort);
}

TEST_CASE("hungarian matches exhaustive permutation search") {
  for (int n : {3, 5, 6}) {
    FeatureMatrix cost(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        cost.at(i, j) = CounterRng::uniform(CounterRng::key(42, n, i, j)) * 10.0;

    std::vector<int> match = hungarian_min_assign(cost);
    double got = 0.0;
    std::vector<bool> used(n, false);
    for (int i = 0; i < n; ++i) {
      REQUIRE(match[i] >= 0);
      REQUIRE(match[i] < n);
      REQUIRE_FALSE(used[match[i]]);
      used[match[i]] = true;
      got += cost.at(i, match[i]);
    }

    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    do {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += cost.at(i, perm[i]);
      best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));

    REQUIRE(got == Approx(best).margin(1e-12));
  }
}

TEST_CASE("separated clusters score perfect view accuracy") {
  const int n_views = 4, per = 10, D = 4;
  FeatureMatrix X(n_views * per, D);
  std::vector<int> labels;
  for (int v = 0; v < n_views; ++v)
    for (int i = 0; i < per; ++i) {
      int r = v * per + i;
      for (int d = 0; d < D; ++d)
        X.at(r, d) = 10.0 * v +
                     0.01 * (2.0 * CounterRng::uniform(CounterRng::key(600, r, d)) - 1.0);
      labels.push_back(v);
    }
  REQUIRE(view_cluster_accuracy(X, labels, n_views) == 1.0);
}

TEST_CASE("identical embeddings score one over n_views") {
  const int n_views = 4;
  FeatureMatrix X(12, 3);
  for (auto& v : X.data) v = 0.5;
  std::vector<int> labels;
  for (int i = 0; i < 12; ++i) labels.push_back(i % n_views);
  REQUIRE(view_cluster_accuracy(X, labels, n_views) ==
          Approx(1.0 / n_views).margin(1e-12));
}

TEST_CASE("view accuracy is invariant to label permutation") {
  const int n_views = 3, n = 30, D = 5;
  FeatureMatrix X(n, D);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[i] = i % n_views;
    for (int d = 0; d < D; ++d)
      X.at(i, d) = 2.0 * labels[i] +
                   (2.0 * CounterRng::uniform(CounterRng::key(700, i, d)) - 1.0);
  }
  double base = view_cluster_accuracy(X, labels, n_views);

  const int perm[3] = {2, 0, 1};
  std::vector<int> relabeled(n);
  for (int i = 0; i < n; ++i) relabeled[i] = perm[labels[i]];
  REQUIRE(view_cluster_accuracy(X, relabeled, n_views) == base);
}

TEST_CASE("view accuracy validates inputs") {
  FeatureMatrix X(4, 2);
  std::vector<int> labels = {0, 1, 0, 1};
  REQUIRE_THROWS_AS(view_cluster_accuracy(X, labels, 1), InvalidArg);
  REQUIRE_THROWS_AS(view_cluster_accuracy(X, {0, 1}, 2), ShapeMismatch);
  REQUIRE_THROWS_AS(view_cluster_accuracy(X, {0, 1, 2, 1}, 2), InvalidArg);
}

TEST_CASE("cross-view variance of identical features is zero") {
  // 0.75 is dyadic, so the mean of three identical entries reproduces the
  // entry exactly and the variance is exactly zero.
  FeatureMatrix a(3, 4);
  for (auto& v : a.data) v = 0.75;
  REQUIRE(cross_view_variance({a, a, a}) == 0.0);

  // Non-dyadic entries can leave one-ulp residue in the mean; the variance
  // then sits at the square of that, nothing more.
  for (auto& v : a.data) v = 0.7;
  REQUIRE(cross_view_variance({a, a, a}) <= 1e-30);
}

TEST_CASE("opposite features give the squared norm") {
  FeatureMatrix e(2, 3), me(2, 3);
  double norm2 = 0.0;
  for (int c = 0; c < 3; ++c) {
    e.at(0, c) = 0.1 * (c + 1);
    e.at(1, c) = 0.1 * (c + 1);
    me.at(0, c) = -e.at(0, c);
    me.at(1, c) = -e.at(1, c);
  }
  for (int c = 0; c < 3; ++c) norm2 += e.at(0, c) * e.at(0, c);
  REQUIRE(cross_view_variance({e, me}) == Approx(norm2).margin(1e-12));
}

TEST_CASE("cross-view variance matches a naive oracle") {
  const int V = 4, T = 5, D = 6;
  std::vector<FeatureMatrix> per_view;
  for (int v = 0; v < V; ++v) {
    FeatureMatrix m(T, D);
    for (int t = 0; t < T; ++t)
      for (int d = 0; d < D; ++d)
        m.at(t, d) = 2.0 * CounterRng::uniform(CounterRng::key(800, v, t, d)) - 1.0;
    per_view.push_back(m);
  }

  double naive = 0.0;
  for (int t = 0; t < T; ++t) {
    double trace = 0.0;
    for (int d = 0; d < D; ++d) {
      double mean = 0.0;
      for (int v = 0; v < V; ++v) mean += per_view[v].at(t, d);
      mean /= V;
      double var = 0.0;
      for (int v = 0; v < V; ++v) {
        double e = per_view[v].at(t, d) - mean;
        var += e * e;
      }
      trace += var / V;  // population convention
    }
    naive += trace;
  }
  naive /= T;

  REQUIRE(cross_view_variance(per_view) == Approx(naive).margin(1e-12));
}

TEST_CASE("cross-view variance validates inputs") {
  FeatureMatrix a(2, 3);
  REQUIRE_THROWS_AS(cross_view_variance({a}), InvalidArg);
  FeatureMatrix b(3, 3);
  REQUIRE_THROWS_AS(cross_view_variance({a, b}), ShapeMismatch);
}
