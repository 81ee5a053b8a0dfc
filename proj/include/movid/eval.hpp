#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "movid/common.hpp"
#include "movid/geometry.hpp"
#include "movid/netcore.hpp"

namespace movid {

// Skeletons are in meters throughout the pipeline; metrics report mm.
constexpr double kMetersToMm = 1000.0;

inline double mpjpe(const std::vector<Skeleton3D>& pred, const std::vector<Skeleton3D>& gt) {
  if (pred.size() != gt.size() || pred.empty()) throw ShapeMismatch("mpjpe: shapes differ");
  double s = 0.0;
  for (size_t t = 0; t < pred.size(); ++t)
    for (int j = 0; j < kJoints; ++j) s += (pred[t].joints[j] - gt[t].joints[j]).norm();
  return kMetersToMm * s / (pred.size() * kJoints);
}

// ---------------------------------------------------------------------------
// Procrustes: the similarity transform (s, R, t) minimizing
// sum_i || s R p_i + t - g_i ||^2, with the reflection corrected so that
// det(R) = +1 on every input.
// ---------------------------------------------------------------------------

struct AlignmentResult {
  Eigen::Matrix3d rotation;
  double scale = 1.0;
  Eigen::Vector3d translation;
  std::vector<double> residual_mm;  // per joint
};

inline AlignmentResult procrustes_align(const Skeleton3D& pred, const Skeleton3D& gt) {
  Eigen::Matrix<double, 3, kJoints> P, G;
  for (int j = 0; j < kJoints; ++j) {
    P.col(j) << pred.joints[j].x, pred.joints[j].y, pred.joints[j].z;
    G.col(j) << gt.joints[j].x, gt.joints[j].y, gt.joints[j].z;
  }
  const Eigen::Vector3d mu_p = P.rowwise().mean();
  const Eigen::Vector3d mu_g = G.rowwise().mean();
  P.colwise() -= mu_p;
  G.colwise() -= mu_g;

  // Rotation is unique only if the centered point sets span a plane.
  {
    Eigen::JacobiSVD<Eigen::Matrix<double, 3, kJoints>> sp(P);
    Eigen::JacobiSVD<Eigen::Matrix<double, 3, kJoints>> sg(G);
    const double tol = 1e-9;
    if (sp.singularValues()(1) <= tol * (sp.singularValues()(0) + 1e-300) ||
        sg.singularValues()(1) <= tol * (sg.singularValues()(0) + 1e-300))
      throw DegenerateConfiguration("procrustes_align: collinear joints");
  }

  const Eigen::Matrix3d H = G * P.transpose();  // cross-covariance, target x source
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d d = Eigen::Vector3d::Ones();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2) = -1.0;

  AlignmentResult res;
  res.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  const double var_p = P.squaredNorm();
  if (!(var_p > 0.0)) throw DegenerateConfiguration("procrustes_align: coincident joints");
  res.scale = svd.singularValues().dot(d) / var_p;
  res.translation = mu_g - res.scale * res.rotation * mu_p;

  res.residual_mm.resize(kJoints);
  for (int j = 0; j < kJoints; ++j) {
    const Eigen::Vector3d e = res.scale * res.rotation * P.col(j) - G.col(j);
    res.residual_mm[j] = kMetersToMm * e.norm();
  }
  return res;
}

inline double pa_mpjpe(const std::vector<Skeleton3D>& pred, const std::vector<Skeleton3D>& gt) {
  if (pred.size() != gt.size() || pred.empty()) throw ShapeMismatch("pa_mpjpe: shapes differ");
  double s = 0.0;
  for (size_t t = 0; t < pred.size(); ++t) {
    const AlignmentResult a = procrustes_align(pred[t], gt[t]);
    s += std::accumulate(a.residual_mm.begin(), a.residual_mm.end(), 0.0) / kJoints;
  }
  return s / pred.size();
}

// Mean norm of the difference of second temporal differences; constants and
// linear-in-time drifts vanish. Units mm/frame^2.
inline double accel_error(const std::vector<Skeleton3D>& pred, const std::vector<Skeleton3D>& gt) {
  if (pred.size() != gt.size()) throw ShapeMismatch("accel_error: shapes differ");
  const int T = static_cast<int>(pred.size());
  if (T < 3) throw TooShort("accel_error: need at least 3 frames");
  double s = 0.0;
  for (int t = 1; t + 1 < T; ++t)
    for (int j = 0; j < kJoints; ++j) {
      const Vec3 ap = pred[t + 1].joints[j] - pred[t].joints[j] * 2.0 + pred[t - 1].joints[j];
      const Vec3 ag = gt[t + 1].joints[j] - gt[t].joints[j] * 2.0 + gt[t - 1].joints[j];
      s += (ap - ag).norm();
    }
  return kMetersToMm * s / (static_cast<double>(T - 2) * kJoints);
}

// ---------------------------------------------------------------------------
// Rectangular assignment (Hungarian, O(n^3) potentials form) used to match
// clusters to view labels. Cost is minimized; ties resolve to the matching
// the scan order reaches first, which is deterministic.
// ---------------------------------------------------------------------------

inline std::vector<int> hungarian_min_assign(const FeatureMatrix& cost) {
  const int n = cost.rows;
  if (cost.cols != n) throw ShapeMismatch("hungarian: square matrix required");
  const double INF = 1e300;
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, INF);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = INF;
      int j1 = -1;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// ---------------------------------------------------------------------------
// k-means with fixed seed and restarts; all tie-breaks take the lowest index.
// ---------------------------------------------------------------------------

struct KMeansResult {
  std::vector<int> assign;
  FeatureMatrix centers;
  double inertia = 0.0;
};

inline KMeansResult kmeans(const FeatureMatrix& X, int k, uint64_t seed, int restarts = 50,
                           int max_iters = 100) {
  const int n = X.rows, d = X.cols;
  if (k < 1 || n < 1) throw InvalidArg("kmeans: need k >= 1, n >= 1");
  KMeansResult best;
  best.inertia = 1e300;

  std::vector<int> order(n);
  for (int r = 0; r < restarts; ++r) {
    // deterministic init: Fisher-Yates with counter-keyed draws, first k rows
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      const double u = CounterRng::uniform(CounterRng::key(seed, static_cast<uint64_t>(r), 1,
                                                           static_cast<uint64_t>(i)));
      const int j = static_cast<int>(u * (i + 1));
      std::swap(order[i], order[std::min(j, i)]);
    }
    FeatureMatrix centers(k, d);
    for (int c = 0; c < k; ++c)
      std::copy(X.row(order[c]), X.row(order[c]) + d, centers.row(c));

    std::vector<int> assign(n, -1);
    for (int it = 0; it < max_iters; ++it) {
      bool changed = false;
      for (int i = 0; i < n; ++i) {
        double bd = 1e300;
        int bc = 0;
        for (int c = 0; c < k; ++c) {
          double s = 0.0;
          for (int j = 0; j < d; ++j) {
            const double e = X.at(i, j) - centers.at(c, j);
            s += e * e;
          }
          if (s < bd) {
            bd = s;
            bc = c;
          }
        }
        if (assign[i] != bc) {
          assign[i] = bc;
          changed = true;
        }
      }
      if (!changed && it > 0) break;
      FeatureMatrix sums(k, d);
      std::vector<int> counts(k, 0);
      for (int i = 0; i < n; ++i) {
        ++counts[assign[i]];
        for (int j = 0; j < d; ++j) sums.at(assign[i], j) += X.at(i, j);
      }
      for (int c = 0; c < k; ++c) {
        if (counts[c] == 0) continue;  // empty cluster keeps its center
        for (int j = 0; j < d; ++j) centers.at(c, j) = sums.at(c, j) / counts[c];
      }
    }
    double inertia = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        const double e = X.at(i, j) - centers.at(assign[i], j);
        inertia += e * e;
      }
    if (inertia < best.inertia) {
      best.inertia = inertia;
      best.assign = assign;
      best.centers = centers;
    }
  }
  return best;
}

// Cluster the embeddings, then score the best cluster-to-label matching.
inline double view_cluster_accuracy(const FeatureMatrix& embeddings,
                                    const std::vector<int>& labels, int n_views,
                                    uint64_t seed = 17, int restarts = 50) {
  if (n_views < 2) throw InvalidArg("view_cluster_accuracy: n_views >= 2");
  if (embeddings.rows != static_cast<int>(labels.size()))
    throw ShapeMismatch("view_cluster_accuracy: label count");
  const KMeansResult km = kmeans(embeddings, n_views, seed, restarts);

  FeatureMatrix counts(n_views, n_views);
  for (int i = 0; i < embeddings.rows; ++i) {
    if (labels[i] < 0 || labels[i] >= n_views) throw InvalidArg("view label out of range");
    counts.at(km.assign[i], labels[i]) += 1.0;
  }
  double max_count = 0.0;
  for (double c : counts.data) max_count = std::max(max_count, c);
  FeatureMatrix cost(n_views, n_views);
  for (int i = 0; i < n_views; ++i)
    for (int j = 0; j < n_views; ++j) cost.at(i, j) = max_count - counts.at(i, j);
  const std::vector<int> match = hungarian_min_assign(cost);

  double hit = 0.0;
  for (int c = 0; c < n_views; ++c) hit += counts.at(c, match[c]);
  return hit / embeddings.rows;
}

// Mean over frames of the trace of the across-view population covariance of
// the frame's motion features. Drops to zero when features ignore the view.
inline double cross_view_variance(const std::vector<FeatureMatrix>& per_view) {
  if (per_view.size() < 2) throw InvalidArg("cross_view_variance: need >= 2 views");
  const int V = static_cast<int>(per_view.size());
  const int T = per_view[0].rows, D = per_view[0].cols;
  for (const auto& m : per_view)
    if (m.rows != T || m.cols != D) throw ShapeMismatch("cross_view_variance: shapes differ");
  double total = 0.0;
  std::vector<double> mu(D);
  for (int t = 0; t < T; ++t) {
    std::fill(mu.begin(), mu.end(), 0.0);
    for (int v = 0; v < V; ++v)
      for (int j = 0; j < D; ++j) mu[j] += per_view[v].at(t, j);
    for (int j = 0; j < D; ++j) mu[j] /= V;
    double var = 0.0;
    for (int v = 0; v < V; ++v)
      for (int j = 0; j < D; ++j) {
        const double e = per_view[v].at(t, j) - mu[j];
        var += e * e;
      }
    total += var / V;
  }
  return total / T;
}

}  // namespace movid
