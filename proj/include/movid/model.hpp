#pragma once

#include <cstring>
#include <vector>

#include "movid/common.hpp"
#include "movid/disentangle.hpp"
#include "movid/geometry.hpp"
#include "movid/netcore.hpp"
#include "movid/viewfeat.hpp"

namespace movid {

// ---------------------------------------------------------------------------
// Row <-> skeleton layout: joint j occupies columns 3j .. 3j+2 as (x, y, z).
// ---------------------------------------------------------------------------

inline void skeleton_to_row(const Skeleton3D& s, double* row) {
  for (int j = 0; j < kJoints; ++j) {
    row[3 * j + 0] = s.joints[j].x;
    row[3 * j + 1] = s.joints[j].y;
    row[3 * j + 2] = s.joints[j].z;
  }
}

inline Skeleton3D row_to_skeleton(const double* row, FrameTag tag) {
  Skeleton3D s;
  s.frame_tag = tag;
  for (int j = 0; j < kJoints; ++j)
    s.joints[j] = {row[3 * j + 0], row[3 * j + 1], row[3 * j + 2]};
  return s;
}

inline FeatureMatrix skeletons_to_matrix(const std::vector<Skeleton3D>& seq) {
  FeatureMatrix m(static_cast<int>(seq.size()), kKeypointWidth);
  for (size_t t = 0; t < seq.size(); ++t) skeleton_to_row(seq[t], m.row(static_cast<int>(t)));
  return m;
}

// Normalized encoder input: u' = 2u/(w-1) - 1, v' likewise by height, zeroed
// where confidence is 0; confidence rides along as the third channel.
inline void normalize_keypoints_row(const Keypoints2D& kp, double image_width,
                                    double image_height, double* row) {
  for (int j = 0; j < kJoints; ++j) {
    const double c = kp.confidence[j];
    row[3 * j + 0] = c > 0.0 ? 2.0 * kp.u[j] / (image_width - 1.0) - 1.0 : 0.0;
    row[3 * j + 1] = c > 0.0 ? 2.0 * kp.v[j] / (image_height - 1.0) - 1.0 : 0.0;
    row[3 * j + 2] = c;
  }
}

inline FeatureMatrix normalize_keypoints(const std::vector<Keypoints2D>& kp, double image_width,
                                         double image_height) {
  FeatureMatrix x(static_cast<int>(kp.size()), kKeypointWidth);
  for (size_t t = 0; t < kp.size(); ++t)
    normalize_keypoints_row(kp[t], image_width, image_height, x.row(static_cast<int>(t)));
  return x;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ModelConfig {
  EncoderConfig enc;
  int window = 16;  // decoder context window = ring buffer capacity
  double alpha = 0.1, beta = 0.1, tau = 0.07;
  uint64_t seed = 1;
  bool use_projection = true;  // false only for the ablated variant

  void validate() const {
    enc.validate();
    if (window < 1) throw DegenerateConfiguration("window must be >= 1");
    if (!(tau > 0.0)) throw DegenerateConfiguration("tau must be > 0");
    if (alpha < 0.0 || beta < 0.0) throw DegenerateConfiguration("loss weights must be >= 0");
  }
};

struct MovidModel {
  ModelConfig cfg;
  ParamStore params;
  MotionEncoder enc;
  ViewEncoder venc;
  BasisGenerator bgen;
  PoseDecoder dec;
  AnchorEmbed anchor;

  explicit MovidModel(const ModelConfig& c) : cfg(c), params(c.seed) {
    cfg.validate();
    enc.build(params, "enc", cfg.enc);
    venc.build(params, "venc", cfg.enc);
    bgen.build(params, "bgen", cfg.enc);
    dec.build(params, "dec", cfg.enc, cfg.window);
    anchor.build(params, "anchor", cfg.enc);
  }
};

// Every intermediate of one full-sequence pass; backward consumes it whole.
struct PipelineCache {
  FeatureMatrix x;  // T x 51 normalized input
  MotionEncoder::Cache enc_cache;
  FeatureMatrix M_init, K_coarse;
  std::vector<Skeleton3D> k3d_coarse;
  FeatureMatrix F;  // T x 10 geometric features
  ViewEncoder::Cache venc_cache;
  FeatureMatrix V;
  FeatureMatrix raw_bases;
  GramSchmidtCache gs_cache;
  BasisSet B;
  ProjectCache proj_cache;
  ProjectionResult proj;
  PoseDecoder::Cache dec_cache;
  FeatureMatrix out;  // T x 51 refined keypoints
  std::vector<double> h_final;
  bool train = false;
  uint64_t drop_seed = 0;

  std::vector<Skeleton3D> refined_skeletons() const {
    std::vector<Skeleton3D> r;
    r.reserve(out.rows);
    for (int t = 0; t < out.rows; ++t) r.push_back(row_to_skeleton(out.row(t), FrameTag::Camera));
    return r;
  }
};

// Zero-mean Gaussian perturbation of the coarse 3D keypoints, used by the
// robustness sweep. Applied between the encoder heads and everything that
// consumes the coarse output.
struct CoarseNoise {
  double sigma_m = 0.0;
  uint64_t seed = 0;
};

// Batch-path forward. Per-frame arithmetic matches the streaming engine op
// for op, which is what makes oracle comparisons meaningful.
inline void forward_pipeline(const MovidModel& m, const FeatureMatrix& x, bool train,
                             uint64_t drop_seed, PipelineCache& pc,
                             const CoarseNoise* noise = nullptr) {
  pc.train = train;
  pc.drop_seed = drop_seed;
  pc.x = x;
  m.enc.forward(m.params, pc.x, nullptr, pc.M_init, pc.K_coarse, &pc.h_final, &pc.enc_cache);

  const int T = pc.x.rows;
  if (noise && noise->sigma_m > 0.0) {
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < kKeypointWidth; ++c)
        pc.K_coarse.at(t, c) += noise->sigma_m * CounterRng::gaussian(CounterRng::key(
                                    noise->seed, static_cast<uint64_t>(t), c));
  }
  pc.k3d_coarse.clear();
  pc.k3d_coarse.reserve(T);
  for (int t = 0; t < T; ++t)
    pc.k3d_coarse.push_back(row_to_skeleton(pc.K_coarse.row(t), FrameTag::Camera));

  pc.F = FeatureMatrix(T, kViewFeatDim);
  for (int t = 0; t < T; ++t) {
    const auto flat = extract_view_feature(pc.k3d_coarse[t]).flatten();
    std::memcpy(pc.F.row(t), flat.data(), sizeof(double) * kViewFeatDim);
  }

  pc.V = m.venc.forward(m.params, pc.F, &pc.venc_cache, train, drop_seed);
  if (m.cfg.use_projection) {
    pc.raw_bases = m.bgen.forward(m.params, pc.V);
    pc.B = orthonormalize_bases(pc.raw_bases, m.cfg.enc.k_bases, m.cfg.enc.d_base, &pc.gs_cache);
    pc.proj = ortho_project(pc.M_init, pc.B, &pc.proj_cache);
  } else {
    pc.proj.m_proj = pc.M_init;
    pc.proj.alphas = FeatureMatrix(T, m.cfg.enc.k_bases);
  }
  pc.out = m.dec.forward(m.params, pc.proj.m_proj, &pc.dec_cache);
}

inline void forward_pipeline(const MovidModel& m, const std::vector<Keypoints2D>& kp,
                             double image_width, double image_height, bool train,
                             uint64_t drop_seed, PipelineCache& pc,
                             const CoarseNoise* noise = nullptr) {
  forward_pipeline(m, normalize_keypoints(kp, image_width, image_height), train, drop_seed, pc,
                   noise);
}

// Gradient of the geometric feature extraction: width vectors are signed
// differences of the key joints, depths read their z entries.
inline void viewfeat_backward_row(const double* dF, double* dK) {
  const auto& js = JointSchema::instance();
  auto add3 = [&](int joint, double sx, double sy, double sz) {
    dK[3 * joint + 0] += sx;
    dK[3 * joint + 1] += sy;
    dK[3 * joint + 2] += sz;
  };
  add3(js.hip_L, dF[0], dF[1], dF[2]);
  add3(js.hip_R, -dF[0], -dF[1], -dF[2]);
  add3(js.shoulder_L, dF[3], dF[4], dF[5]);
  add3(js.shoulder_R, -dF[3], -dF[4], -dF[5]);
  dK[3 * js.hip_L + 2] += dF[6];
  dK[3 * js.hip_R + 2] += dF[7];
  dK[3 * js.shoulder_L + 2] += dF[8];
  dK[3 * js.shoulder_R + 2] += dF[9];
}

// Reverse pass through the whole pipeline. Upstream gradients may target the
// refined output, the coarse keypoints, M_ortho, and V; empty matrices
// (rows == 0) mean no gradient from that head.
inline void backward_pipeline(const MovidModel& m, const PipelineCache& pc,
                              const FeatureMatrix& d_out, const FeatureMatrix& d_K_direct,
                              const FeatureMatrix& d_M_ortho, const FeatureMatrix& d_V,
                              GradStore& g) {
  const int T = pc.x.rows;
  const int D = m.cfg.enc.d_motion;

  FeatureMatrix d_M_ortho_total = d_M_ortho.rows == T ? d_M_ortho : FeatureMatrix(T, D);
  if (d_out.rows == T) {
    FeatureMatrix dM_dec;
    m.dec.backward(m.params, pc.dec_cache, d_out, dM_dec, g);
    for (size_t i = 0; i < d_M_ortho_total.data.size(); ++i)
      d_M_ortho_total.data[i] += dM_dec.data[i];
  }

  FeatureMatrix d_M_init;
  FeatureMatrix d_V_total = d_V.rows == T ? d_V : FeatureMatrix(T, m.cfg.enc.d_view);
  if (m.cfg.use_projection) {
    FeatureMatrix d_bases(T, m.cfg.enc.k_bases * m.cfg.enc.d_base);
    d_M_init = ortho_project_backward(pc.proj_cache, pc.B, d_M_ortho_total, &d_bases);
    FeatureMatrix d_raw = orthonormalize_backward(pc.gs_cache, pc.B, d_bases);
    m.bgen.backward(m.params, pc.V, d_raw, &d_V_total, g);
  } else {
    d_M_init = d_M_ortho_total;  // identity map when the subtraction is ablated
  }

  FeatureMatrix d_F;
  m.venc.backward(m.params, pc.venc_cache, d_V_total, &d_F, g);

  FeatureMatrix d_K_total = d_K_direct.rows == T ? d_K_direct : FeatureMatrix(T, kKeypointWidth);
  for (int t = 0; t < T; ++t) viewfeat_backward_row(d_F.row(t), d_K_total.row(t));

  m.enc.backward(m.params, pc.enc_cache, d_M_init, d_K_total, nullptr, g);
}

// Mean squared coordinate error with optional gradient, `weight` applied to
// both value and gradient.
inline double mse_and_grad(const FeatureMatrix& pred, const FeatureMatrix& gt, double weight,
                           FeatureMatrix* d) {
  if (pred.rows != gt.rows || pred.cols != gt.cols) throw ShapeMismatch("mse: shapes differ");
  if (d) *d = FeatureMatrix(pred.rows, pred.cols);
  const double n = static_cast<double>(pred.data.size());
  double s = 0.0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const double e = pred.data[i] - gt.data[i];
    s += e * e;
    if (d) d->data[i] = weight * 2.0 * e / n;
  }
  return weight * s / n;
}

}  // namespace movid
