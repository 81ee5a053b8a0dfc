#pragma once

#include <chrono>
#include <cstring>
#include <map>
#include <vector>

#include "movid/common.hpp"
#include "movid/eval.hpp"
#include "movid/geometry.hpp"
#include "movid/model.hpp"

namespace movid {

// ---------------------------------------------------------------------------
// Fixed-capacity circular buffer. All slot storage is allocated once at
// init; push overwrites the oldest slot. Arrival-order reads feed the
// decoder context with the same summation order as the batch path.
// ---------------------------------------------------------------------------

struct RingBuffer {
  int capacity = 0;
  FeatureMatrix enc_h, dec_h, out, vrow;  // one row per slot
  int cursor = 0;  // next slot to overwrite
  int fill = 0;

  void init(int W, int hidden, int d_view) {
    capacity = W;
    enc_h = FeatureMatrix(W, hidden);
    dec_h = FeatureMatrix(W, hidden);
    out = FeatureMatrix(W, kKeypointWidth);
    vrow = FeatureMatrix(W, d_view);
    cursor = 0;
    fill = 0;
  }

  int slot_count() const { return capacity; }

  void push(const double* eh, const double* dh, const double* out_row, const double* v) {
    std::memcpy(enc_h.row(cursor), eh, sizeof(double) * enc_h.cols);
    std::memcpy(dec_h.row(cursor), dh, sizeof(double) * dec_h.cols);
    std::memcpy(out.row(cursor), out_row, sizeof(double) * kKeypointWidth);
    std::memcpy(vrow.row(cursor), v, sizeof(double) * vrow.cols);
    cursor = (cursor + 1) % capacity;
    if (fill < capacity) ++fill;
  }

  // i = 0 is the oldest retained frame
  int slot(int i) const { return (cursor - fill + i + capacity) % capacity; }
  const double* out_at(int i) const { return out.row(slot(i)); }

  // Mean of buffered outputs summed oldest-first; zeros when empty.
  int context_mean(double* ctx) const {
    std::fill(ctx, ctx + kKeypointWidth, 0.0);
    for (int i = 0; i < fill; ++i) {
      const double* o = out_at(i);
      for (int j = 0; j < kKeypointWidth; ++j) ctx[j] += o[j];
    }
    if (fill > 0)
      for (int j = 0; j < kKeypointWidth; ++j) ctx[j] /= fill;
    return fill;
  }
};

// ---------------------------------------------------------------------------
// Refinement policy and difficulty scoring
// ---------------------------------------------------------------------------

struct RefinementPolicy {
  std::vector<std::vector<double>> prototypes;  // hard-view embedding centroids
  double theta_flip = 0.5;
  double hysteresis = 0.05;
  double sigma = 0.35;  // width of the difficulty kernel
};

// score = exp(-d^2 / sigma^2), d = min cosine distance to a prototype.
// Lies in (0, 1]; 1 exactly on a prototype.
inline double difficulty_score(const double* v, int d_view, const RefinementPolicy& policy) {
  if (policy.prototypes.empty()) throw EmptyPrototypes("difficulty_score: no prototypes");
  double vn = 0.0;
  for (int i = 0; i < d_view; ++i) vn += v[i] * v[i];
  vn = std::sqrt(vn);
  double best = 2.0;
  for (const auto& p : policy.prototypes) {
    double pn = 0.0, dot = 0.0;
    for (int i = 0; i < d_view; ++i) {
      pn += p[i] * p[i];
      dot += p[i] * v[i];
    }
    pn = std::sqrt(pn);
    const double cosv = (vn > 1e-300 && pn > 1e-300) ? dot / (vn * pn) : 0.0;
    best = std::min(best, 1.0 - cosv);
  }
  return std::exp(-best * best / (policy.sigma * policy.sigma));
}

struct FrameLatency {
  uint64_t encode = 0, viewfeat = 0, project = 0, decode = 0, flip_extra = 0;
  uint64_t total() const { return encode + viewfeat + project + decode + flip_extra; }
};

struct FrameResult {
  Skeleton3D refined;
  Skeleton3D coarse;
  double difficulty = 0.0;
  bool flip_activated = false;
  FrameLatency latency_ns;
  int encoder_passes = 1, decoder_passes = 1;
};

struct StreamState {
  const MovidModel* model = nullptr;
  double image_height = 720.0;
  std::vector<double> enc_h, dec_h;  // always the unflipped-history states
  RingBuffer buf;
  RefinementPolicy policy;
  long long frame_counter = 0;
  bool flip_active = false;

  StreamState() = default;
  StreamState(const MovidModel& m, double image_height_, RefinementPolicy pol = {})
      : model(&m), image_height(image_height_), policy(std::move(pol)) {
    enc_h.assign(m.cfg.enc.hidden, 0.0);
    dec_h.assign(m.cfg.enc.hidden, 0.0);
    buf.init(m.cfg.window, m.cfg.enc.hidden, m.cfg.enc.d_view);
  }
};

// Mirror a 51-wide keypoint row about the camera's vertical plane: negate x,
// swap LR joint slots.
inline void mirror_row51(const double* in, double* out) {
  const auto& js = JointSchema::instance();
  for (int j = 0; j < kJoints; ++j) {
    const int src = js.mirror(j);
    out[3 * j + 0] = -in[3 * src + 0];
    out[3 * j + 1] = in[3 * src + 1];
    out[3 * j + 2] = in[3 * src + 2];
  }
}

namespace stream_detail {

inline uint64_t now_ns() {
  return static_cast<uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                   std::chrono::steady_clock::now().time_since_epoch())
                                   .count());
}

// One full per-frame pass (encoder step through decoder step) from explicit
// hidden states and context; never touches persistent state.
struct Pass {
  std::vector<double> enc_h, dec_h, m_row, k_row, vrow, m_ortho, out_row;
  Skeleton3D coarse;
  FrameLatency lat;
};

inline Pass run_pass(const MovidModel& m, const Keypoints2D& kp, double image_width,
                     double image_height, const std::vector<double>& enc_h_prev,
                     const std::vector<double>& dec_h_prev, const double* ctx) {
  Pass p;
  const int H = m.cfg.enc.hidden, D = m.cfg.enc.d_motion;
  p.enc_h.resize(H);
  p.dec_h.resize(H);
  p.m_row.resize(D);
  p.k_row.resize(kKeypointWidth);
  p.out_row.resize(kKeypointWidth);

  uint64_t t0 = now_ns();
  double x_row[kKeypointWidth];
  normalize_keypoints_row(kp, image_width, image_height, x_row);
  m.enc.cell.step(m.params, x_row, enc_h_prev.data(), p.enc_h.data(), nullptr);
  m.enc.head_m.forward(m.params, p.enc_h.data(), p.m_row.data());
  m.enc.head_k.forward(m.params, p.enc_h.data(), p.k_row.data());
  uint64_t t1 = now_ns();
  p.lat.encode = t1 - t0;

  p.coarse = row_to_skeleton(p.k_row.data(), FrameTag::Camera);
  FeatureMatrix F(1, kViewFeatDim);
  const auto flat = extract_view_feature(p.coarse).flatten();
  std::memcpy(F.row(0), flat.data(), sizeof(double) * kViewFeatDim);
  const FeatureMatrix V = m.venc.forward(m.params, F, nullptr, false, 0);
  p.vrow.assign(V.row(0), V.row(0) + V.cols);
  uint64_t t2 = now_ns();
  p.lat.viewfeat = t2 - t1;

  if (m.cfg.use_projection) {
    const FeatureMatrix raw = m.bgen.forward(m.params, V);
    const BasisSet B = orthonormalize_bases(raw, m.cfg.enc.k_bases, m.cfg.enc.d_base);
    FeatureMatrix M(1, D);
    std::memcpy(M.row(0), p.m_row.data(), sizeof(double) * D);
    const ProjectionResult proj = ortho_project(M, B);
    p.m_ortho.assign(proj.m_proj.row(0), proj.m_proj.row(0) + D);
  } else {
    p.m_ortho = p.m_row;
  }
  uint64_t t3 = now_ns();
  p.lat.project = t3 - t2;

  m.dec.step(m.params, p.m_ortho.data(), ctx, dec_h_prev.data(), p.dec_h.data(),
             p.out_row.data(), nullptr);
  uint64_t t4 = now_ns();
  p.lat.decode = t4 - t3;
  return p;
}

}  // namespace stream_detail

// Flip-averaged prediction from the current state. Both passes run on copies;
// the caller's persistent state is untouched.
inline Skeleton3D flip_refine(const StreamState& st, const Keypoints2D& kp, double image_width) {
  const MovidModel& m = *st.model;
  double ctx[kKeypointWidth];
  st.buf.context_mean(ctx);
  const stream_detail::Pass plain =
      stream_detail::run_pass(m, kp, image_width, st.image_height, st.enc_h, st.dec_h, ctx);

  const Keypoints2D kp_f = horizontal_flip(kp, image_width);
  double ctx_f[kKeypointWidth];
  mirror_row51(ctx, ctx_f);
  const stream_detail::Pass flipped =
      stream_detail::run_pass(m, kp_f, image_width, st.image_height, st.enc_h, st.dec_h, ctx_f);

  const Skeleton3D a = row_to_skeleton(plain.out_row.data(), FrameTag::Camera);
  const Skeleton3D b = mirror_skeleton_x(row_to_skeleton(flipped.out_row.data(), FrameTag::Camera));
  Skeleton3D avg;
  avg.frame_tag = FrameTag::Camera;
  for (int j = 0; j < kJoints; ++j) avg.joints[j] = (a.joints[j] + b.joints[j]) * 0.5;
  return avg;
}

// One streaming step. The persistent hidden states and the buffer advance
// with the unflipped pass only, so refinement never perturbs the state
// trajectory (temporal bridging).
inline FrameResult push_frame(StreamState& st, const Keypoints2D& kp, double image_width) {
  const MovidModel& m = *st.model;
  double ctx[kKeypointWidth];
  st.buf.context_mean(ctx);
  stream_detail::Pass plain =
      stream_detail::run_pass(m, kp, image_width, st.image_height, st.enc_h, st.dec_h, ctx);

  const double score =
      st.policy.prototypes.empty()
          ? 0.0
          : difficulty_score(plain.vrow.data(), m.cfg.enc.d_view, st.policy);
  bool active;
  if (st.policy.theta_flip <= 0.0) {
    active = true;  // degenerate threshold: always on
  } else if (st.flip_active) {
    active = !(score < st.policy.theta_flip - st.policy.hysteresis);
  } else {
    active = score > st.policy.theta_flip;
  }
  st.flip_active = active;

  FrameResult fr;
  fr.coarse = plain.coarse;
  fr.difficulty = score;
  fr.flip_activated = active;
  fr.latency_ns = plain.lat;

  if (active) {
    const uint64_t t0 = stream_detail::now_ns();
    const Keypoints2D kp_f = horizontal_flip(kp, image_width);
    double ctx_f[kKeypointWidth];
    mirror_row51(ctx, ctx_f);
    const stream_detail::Pass flipped =
        stream_detail::run_pass(m, kp_f, image_width, st.image_height, st.enc_h, st.dec_h, ctx_f);
    const Skeleton3D a = row_to_skeleton(plain.out_row.data(), FrameTag::Camera);
    const Skeleton3D b =
        mirror_skeleton_x(row_to_skeleton(flipped.out_row.data(), FrameTag::Camera));
    fr.refined.frame_tag = FrameTag::Camera;
    for (int j = 0; j < kJoints; ++j) fr.refined.joints[j] = (a.joints[j] + b.joints[j]) * 0.5;
    fr.latency_ns.flip_extra = stream_detail::now_ns() - t0;
    fr.encoder_passes = 2;
    fr.decoder_passes = 2;
  } else {
    fr.refined = row_to_skeleton(plain.out_row.data(), FrameTag::Camera);
  }

  st.enc_h = plain.enc_h;
  st.dec_h = plain.dec_h;
  st.buf.push(plain.enc_h.data(), plain.dec_h.data(), plain.out_row.data(), plain.vrow.data());
  ++st.frame_counter;
  return fr;
}

// Full-sequence reference sharing per-frame arithmetic with push_frame.
inline std::vector<Skeleton3D> oracle_batch(const MovidModel& m,
                                            const std::vector<Keypoints2D>& kp,
                                            double image_width, double image_height) {
  PipelineCache pc;
  forward_pipeline(m, kp, image_width, image_height, false, 0, pc);
  return pc.refined_skeletons();
}

// ---------------------------------------------------------------------------
// Prototype calibration: rank views by mean PA-MPJPE on a validation set and
// keep the n_hard worst views' mean embeddings.
// ---------------------------------------------------------------------------

inline RefinementPolicy calibrate_prototypes(const MovidModel& m,
                                             const std::vector<MultiViewSample>& validation,
                                             int n_hard) {
  if (validation.empty()) throw InvalidArg("calibrate_prototypes: empty validation set");
  struct Acc {
    double err = 0.0;
    std::vector<double> emb;
    int n = 0;
  };
  std::map<int, Acc> per_view;
  const int d_view = m.cfg.enc.d_view;

  for (const auto& sample : validation) {
    for (const auto& view : sample.views) {
      PipelineCache pc;
      forward_pipeline(m, view.kp, view.cam.image_width, view.cam.image_height, false, 0, pc);
      const double pa = pa_mpjpe(pc.refined_skeletons(), view.gt_cam);
      auto& acc = per_view[view.view_id];
      if (acc.emb.empty()) acc.emb.assign(d_view, 0.0);
      std::vector<double> mean_emb(d_view, 0.0);
      for (int t = 0; t < pc.V.rows; ++t)
        for (int i = 0; i < d_view; ++i) mean_emb[i] += pc.V.at(t, i);
      for (int i = 0; i < d_view; ++i) acc.emb[i] += mean_emb[i] / pc.V.rows;
      acc.err += pa;
      acc.n += 1;
    }
  }

  if (static_cast<int>(per_view.size()) < n_hard)
    throw InsufficientViews("calibrate_prototypes: " + std::to_string(per_view.size()) +
                            " distinct views < n_hard = " + std::to_string(n_hard));

  std::vector<std::pair<double, int>> ranked;  // (-mean error, view_id): worst first
  for (const auto& [vid, acc] : per_view) ranked.push_back({-acc.err / acc.n, vid});
  std::sort(ranked.begin(), ranked.end());

  RefinementPolicy policy;
  for (int i = 0; i < n_hard; ++i) {
    const Acc& acc = per_view.at(ranked[i].second);
    std::vector<double> proto(d_view);
    for (int j = 0; j < d_view; ++j) proto[j] = acc.emb[j] / acc.n;
    policy.prototypes.push_back(std::move(proto));
  }
  return policy;
}

}  // namespace movid
