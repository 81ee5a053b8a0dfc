#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "movid/common.hpp"
#include "movid/netcore.hpp"

namespace movid {

constexpr double kProjEps = 1e-6;      // stabilizer in the projection coefficient
constexpr double kDropTol = 1e-8;      // residual norm below which a basis is dropped

// ---------------------------------------------------------------------------
// Basis set: K vectors of width D per frame, stored back to back per row.
// When orthonormalized, retained vectors are unit length and pairwise
// orthogonal; degenerate ones are zeroed.
// ---------------------------------------------------------------------------

struct BasisSet {
  int k = 0, d = 0;
  FeatureMatrix v;  // T x (k*d)
  bool orthonormalized = false;

  double* basis(int t, int ki) { return v.row(t) + static_cast<size_t>(ki) * d; }
  const double* basis(int t, int ki) const { return v.row(t) + static_cast<size_t>(ki) * d; }
  int frames() const { return v.rows; }
};

struct ProjectionResult {
  FeatureMatrix m_proj;  // same shape as the input M
  FeatureMatrix alphas;  // T x K
};

// ---------------------------------------------------------------------------
// Modified Gram-Schmidt per frame, in basis index order. Backward replays
// the exact op sequence in reverse, so caches keep every deflation state.
// ---------------------------------------------------------------------------

struct GramSchmidtCache {
  struct Frame {
    // w[k][j]: state of vector k after j deflation steps, j in [0, k]
    std::vector<std::vector<std::vector<double>>> w;
    std::vector<std::vector<double>> c;  // c[k][j]: coefficient against v_j
    std::vector<double> nrm;
    std::vector<char> kept;
  };
  std::vector<Frame> frames;
};

inline BasisSet orthonormalize_bases(const FeatureMatrix& raw, int k, int d,
                                     GramSchmidtCache* cache = nullptr) {
  if (raw.cols != k * d) throw ShapeMismatch("orthonormalize_bases: cols != k*d");
  const int T = raw.rows;
  BasisSet out;
  out.k = k;
  out.d = d;
  out.v = FeatureMatrix(T, k * d);
  out.orthonormalized = true;
  if (cache) cache->frames.resize(T);

  std::vector<double> w(d);
  for (int t = 0; t < T; ++t) {
    GramSchmidtCache::Frame* cf = cache ? &cache->frames[t] : nullptr;
    if (cf) {
      cf->w.assign(k, {});
      cf->c.assign(k, {});
      cf->nrm.assign(k, 0.0);
      cf->kept.assign(k, 0);
    }
    for (int ki = 0; ki < k; ++ki) {
      const double* u = raw.row(t) + static_cast<size_t>(ki) * d;
      std::memcpy(w.data(), u, sizeof(double) * d);
      if (cf) cf->w[ki].push_back(std::vector<double>(w.begin(), w.end()));
      for (int j = 0; j < ki; ++j) {
        const double* vj = out.basis(t, j);
        double c = 0.0;
        for (int i = 0; i < d; ++i) c += w[i] * vj[i];
        for (int i = 0; i < d; ++i) w[i] -= c * vj[i];
        if (cf) {
          cf->c[ki].push_back(c);
          cf->w[ki].push_back(std::vector<double>(w.begin(), w.end()));
        }
      }
      double nrm = 0.0;
      for (int i = 0; i < d; ++i) nrm += w[i] * w[i];
      nrm = std::sqrt(nrm);
      double* vk = out.basis(t, ki);
      if (nrm < kDropTol) {
        std::memset(vk, 0, sizeof(double) * d);
      } else {
        for (int i = 0; i < d; ++i) vk[i] = w[i] / nrm;
      }
      if (cf) {
        cf->nrm[ki] = nrm;
        cf->kept[ki] = nrm >= kDropTol;
      }
    }
  }
  return out;
}

// d_bases: T x (k*d) gradient on the orthonormalized vectors -> gradient on
// raw. Dropped vectors are constants, so their branch passes nothing.
inline FeatureMatrix orthonormalize_backward(const GramSchmidtCache& cache, const BasisSet& B,
                                             const FeatureMatrix& d_bases) {
  const int T = B.frames(), k = B.k, d = B.d;
  FeatureMatrix d_raw(T, k * d);
  std::vector<std::vector<double>> dv(k, std::vector<double>(d));
  std::vector<double> dw(d), dw_next(d);

  for (int t = 0; t < T; ++t) {
    const auto& cf = cache.frames[t];
    for (int ki = 0; ki < k; ++ki)
      std::memcpy(dv[ki].data(), d_bases.row(t) + static_cast<size_t>(ki) * d,
                  sizeof(double) * d);

    for (int ki = k - 1; ki >= 0; --ki) {
      if (!cf.kept[ki]) continue;  // v_k = 0 constant
      // v = w / ||w||  =>  dw = (dv - v <v, dv>) / ||w||
      const double* vk = B.basis(t, ki);
      double vdot = 0.0;
      for (int i = 0; i < d; ++i) vdot += vk[i] * dv[ki][i];
      for (int i = 0; i < d; ++i) dw[i] = (dv[ki][i] - vk[i] * vdot) / cf.nrm[ki];
      // reverse the deflation chain: w' = w - c v_j, c = <w, v_j>
      for (int j = ki - 1; j >= 0; --j) {
        const double* vj = B.basis(t, j);
        const double c = cf.c[ki][j];
        const std::vector<double>& w_pre = cf.w[ki][j];
        double dc = 0.0;
        for (int i = 0; i < d; ++i) dc -= dw[i] * vj[i];
        for (int i = 0; i < d; ++i) {
          dv[j][i] += -c * dw[i] + dc * w_pre[i];
          dw_next[i] = dw[i] + dc * vj[i];
        }
        dw.swap(dw_next);
      }
      std::memcpy(d_raw.row(t) + static_cast<size_t>(ki) * d, dw.data(), sizeof(double) * d);
    }
  }
  return d_raw;
}

// ---------------------------------------------------------------------------
// Sequential deflation of motion rows against the basis set:
//   alpha_k = <p, v_k> / (||v_k||^2 + eps),  p <- p - alpha_k v_k
// Zero bases contribute alpha_k = 0 on their own.
// ---------------------------------------------------------------------------

struct ProjectCache {
  std::vector<FeatureMatrix> p;  // p[k]: T x D state before deflation step k
};

inline ProjectionResult ortho_project(const FeatureMatrix& M, const BasisSet& B,
                                      ProjectCache* cache = nullptr) {
  if (M.cols != B.d) throw ShapeMismatch("ortho_project: M cols != basis dim");
  if (M.rows != B.frames()) throw ShapeMismatch("ortho_project: frame counts differ");
  const int T = M.rows, D = M.cols, K = B.k;

  ProjectionResult res;
  res.m_proj = M;
  res.alphas = FeatureMatrix(T, K);
  if (cache) cache->p.assign(K, FeatureMatrix());

  for (int ki = 0; ki < K; ++ki) {
    if (cache) cache->p[ki] = res.m_proj;
    for (int t = 0; t < T; ++t) {
      const double* vk = B.basis(t, ki);
      double* p = res.m_proj.row(t);
      double vv = 0.0, pv = 0.0;
      for (int i = 0; i < D; ++i) {
        vv += vk[i] * vk[i];
        pv += p[i] * vk[i];
      }
      const double alpha = pv / (vv + kProjEps);
      res.alphas.at(t, ki) = alpha;
      for (int i = 0; i < D; ++i) p[i] -= alpha * vk[i];
    }
  }
  return res;
}

// Gradients of the deflation chain. Accumulates into d_bases (T x k*d).
inline FeatureMatrix ortho_project_backward(const ProjectCache& cache, const BasisSet& B,
                                            const FeatureMatrix& d_m_proj,
                                            FeatureMatrix* d_bases) {
  const int T = d_m_proj.rows, D = d_m_proj.cols, K = B.k;
  FeatureMatrix dM = d_m_proj;
  for (int ki = K - 1; ki >= 0; --ki) {
    const FeatureMatrix& p_pre = cache.p[ki];
    for (int t = 0; t < T; ++t) {
      const double* vk = B.basis(t, ki);
      const double* p = p_pre.row(t);
      double* dp = dM.row(t);
      double vv = 0.0, pv = 0.0;
      for (int i = 0; i < D; ++i) {
        vv += vk[i] * vk[i];
        pv += p[i] * vk[i];
      }
      const double s = vv + kProjEps;
      const double alpha = pv / s;
      double dalpha = 0.0;
      for (int i = 0; i < D; ++i) dalpha -= dp[i] * vk[i];
      if (d_bases) {
        double* dv = d_bases->row(t) + static_cast<size_t>(ki) * D;
        for (int i = 0; i < D; ++i)
          dv[i] += -alpha * dp[i] + dalpha * (p[i] - 2.0 * alpha * vk[i]) / s;
      }
      for (int i = 0; i < D; ++i) dp[i] += (dalpha / s) * vk[i];
    }
  }
  return dM;
}

// ---------------------------------------------------------------------------
// Orthogonality loss: mean over frames of the squared inner product between
// the projected motion row and the view row.
// ---------------------------------------------------------------------------

inline double loss_ortho(const FeatureMatrix& M_proj, const FeatureMatrix& V,
                         FeatureMatrix* dM = nullptr, FeatureMatrix* dV = nullptr) {
  if (M_proj.rows != V.rows || M_proj.cols != V.cols)
    throw ShapeMismatch("loss_ortho: shapes differ");
  const int T = M_proj.rows, D = M_proj.cols;
  if (dM) *dM = FeatureMatrix(T, D);
  if (dV) *dV = FeatureMatrix(T, D);
  double total = 0.0;
  for (int t = 0; t < T; ++t) {
    const double* m = M_proj.row(t);
    const double* v = V.row(t);
    double dot = 0.0;
    for (int i = 0; i < D; ++i) dot += m[i] * v[i];
    total += dot * dot;
    const double c = 2.0 * dot / T;
    if (dM)
      for (int i = 0; i < D; ++i) dM->at(t, i) = c * v[i];
    if (dV)
      for (int i = 0; i < D; ++i) dV->at(t, i) = c * m[i];
  }
  return total / T;
}

// ---------------------------------------------------------------------------
// Anchor embedding: linear map from canonical pose angles, L2-normalized.
// View-independent by construction (canonical input carries no camera).
// ---------------------------------------------------------------------------

struct AnchorEmbed {
  int d_out = 0;
  Linear lin;

  void build(ParamStore& ps, const std::string& prefix, const EncoderConfig& cfg) {
    d_out = cfg.d_motion;
    lin.build(ps, prefix + ".lin", kCanonAngles, d_out);
  }

  struct Cache {
    std::vector<double> x, z;
    double nrm = 0.0;
  };

  void forward(const ParamStore& ps, const CanonicalPose& c, double* z, Cache* cache) const {
    std::vector<double> y(d_out);
    lin.forward(ps, c.angles.data(), y.data());
    double nrm = 0.0;
    for (int i = 0; i < d_out; ++i) nrm += y[i] * y[i];
    nrm = std::sqrt(nrm);
    if (!(nrm > 0.0)) throw DegenerateConfiguration("anchor embedding collapsed to zero");
    for (int i = 0; i < d_out; ++i) z[i] = y[i] / nrm;
    if (cache) {
      cache->x.assign(c.angles.begin(), c.angles.end());
      cache->z.assign(z, z + d_out);
      cache->nrm = nrm;
    }
  }

  void backward(const ParamStore& ps, const Cache& cache, const double* dz, GradStore& g) const {
    // z = y/||y||  =>  dy = (dz - z <z, dz>) / ||y||
    double zd = 0.0;
    for (int i = 0; i < d_out; ++i) zd += cache.z[i] * dz[i];
    std::vector<double> dy(d_out);
    for (int i = 0; i < d_out; ++i) dy[i] = (dz[i] - cache.z[i] * zd) / cache.nrm;
    lin.backward(ps, cache.x.data(), dy.data(), nullptr, g);
  }
};

// ---------------------------------------------------------------------------
// Physics-anchored contrastive alignment. The 2N-row set stacks
// [Z_anchor; Z_motion]; row i's positive sits at i+N (mod 2N); the diagonal
// is masked; similarities are cosine/temperature logits.
// ---------------------------------------------------------------------------

inline double loss_align(const FeatureMatrix& Z_anchor, const FeatureMatrix& Z_motion,
                         double tau, FeatureMatrix* dZ_anchor = nullptr,
                         FeatureMatrix* dZ_motion = nullptr) {
  if (Z_anchor.rows == 0) throw DegenerateBatch("loss_align: empty batch");
  if (Z_anchor.rows != Z_motion.rows || Z_anchor.cols != Z_motion.cols)
    throw ShapeMismatch("loss_align: block shapes differ");
  const int N = Z_anchor.rows, D = Z_anchor.cols, M = 2 * N;

  auto row = [&](int i) { return i < N ? Z_anchor.row(i) : Z_motion.row(i - N); };
  for (int i = 0; i < M; ++i) {
    double nrm = 0.0;
    for (int j = 0; j < D; ++j) nrm += row(i)[j] * row(i)[j];
    if (std::abs(std::sqrt(nrm) - 1.0) > 1e-6)
      throw NonNormalizedInput("loss_align: row " + std::to_string(i) + " not unit length");
  }

  // logits s_ij = <u_i, u_j> / tau, diagonal masked
  FeatureMatrix S(M, M);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < M; ++j) {
      double dot = 0.0;
      for (int c = 0; c < D; ++c) dot += row(i)[c] * row(j)[c];
      S.at(i, j) = dot / tau;
    }

  if (dZ_anchor) *dZ_anchor = FeatureMatrix(N, D);
  if (dZ_motion) *dZ_motion = FeatureMatrix(N, D);
  auto drow = [&](int i) {
    return i < N ? (dZ_anchor ? dZ_anchor->row(i) : nullptr)
                 : (dZ_motion ? dZ_motion->row(i - N) : nullptr);
  };

  double total = 0.0;
  std::vector<double> w(M);
  const bool want_grad = dZ_anchor || dZ_motion;
  for (int i = 0; i < M; ++i) {
    const int pos = i < N ? i + N : i - N;
    double mx = -1e300;
    for (int j = 0; j < M; ++j)
      if (j != i) mx = std::max(mx, S.at(i, j));
    double lse = 0.0;
    for (int j = 0; j < M; ++j)
      if (j != i) lse += std::exp(S.at(i, j) - mx);
    const double log_denom = mx + std::log(lse);
    total += log_denom - S.at(i, pos);

    if (want_grad) {
      // d loss_i / d s_ij = softmax_j - [j == pos], masked diagonal
      for (int j = 0; j < M; ++j)
        w[j] = j == i ? 0.0 : std::exp(S.at(i, j) - log_denom) - (j == pos ? 1.0 : 0.0);
      const double inv = 1.0 / (M * tau);
      for (int j = 0; j < M; ++j) {
        if (j == i || w[j] == 0.0) continue;
        const double c = w[j] * inv;
        double* di = drow(i);
        double* dj = drow(j);
        for (int k = 0; k < D; ++k) {
          if (di) di[k] += c * row(j)[k];
          if (dj) dj[k] += c * row(i)[k];
        }
      }
    }
  }
  return total / M;
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

struct LossReport {
  double l_pose = 0.0, l_ortho = 0.0, l_align = 0.0, l_total = 0.0;
  GradStore grads;

  bool finite() const {
    return std::isfinite(l_pose) && std::isfinite(l_ortho) && std::isfinite(l_align) &&
           std::isfinite(l_total);
  }
};

inline LossReport total_loss(double l_pose, double l_ortho, double l_align, double alpha,
                             double beta) {
  if (alpha < 0.0 || beta < 0.0) throw InvalidArg("total_loss: weights must be >= 0");
  LossReport r;
  r.l_pose = l_pose;
  r.l_ortho = l_ortho;
  r.l_align = l_align;
  r.l_total = l_pose + alpha * l_ortho + beta * l_align;
  return r;
}

// Gradient of the total is the same linear combination of component
// gradients, entry for entry.
inline GradStore combine_grads(const GradStore& g_pose, const GradStore& g_ortho,
                               const GradStore& g_align, double alpha, double beta) {
  GradStore out;
  out.add(g_pose);
  GradStore so = g_ortho;
  so.scale(alpha);
  out.add(so);
  GradStore sa = g_align;
  sa.scale(beta);
  out.add(sa);
  return out;
}

}  // namespace movid
