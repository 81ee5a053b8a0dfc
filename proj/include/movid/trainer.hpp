#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "movid/common.hpp"
#include "movid/config.hpp"
#include "movid/disentangle.hpp"
#include "movid/eval.hpp"
#include "movid/geometry.hpp"
#include "movid/model.hpp"
#include "movid/netcore.hpp"

namespace movid {

struct AblationSpec {
  bool disable_projection = false;
  bool disable_ortho_loss = false;
  bool disable_align_loss = false;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Adam with bias correction. Moments are keyed by tensor name; tensors absent
// from a step's gradient map are left untouched (their moments stay frozen
// too, so an ablated branch never drifts).
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore& ps, const GradStore& g, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& [name, tensor] : ps.tensors()) {
      const auto it = g.g.find(name);
      if (it == g.g.end()) continue;
      const std::vector<double>& grad = it->second;
      if (grad.size() != tensor.v.size())
        throw ShapeMismatch("adam: gradient size mismatch for " + name);
      std::vector<double>& m = m_[name];
      std::vector<double>& v = v_[name];
      if (m.size() != grad.size()) {
        m.assign(grad.size(), 0.0);
        v.assign(grad.size(), 0.0);
      }
      for (size_t i = 0; i < grad.size(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * grad[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * grad[i] * grad[i];
        tensor.v[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

  long steps_taken() const { return t_; }

 private:
  double b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Batched loss
// ---------------------------------------------------------------------------

// One training clip, already windowed and normalized. `canon` supplies the
// contrastive anchors, one per frame.
struct ClipRef {
  FeatureMatrix x;   // T x 51 normalized 2D input
  FeatureMatrix gt;  // T x 51 camera-frame target keypoints
  std::vector<CanonicalPose> canon;
  uint64_t drop_seed = 0;
};

namespace trainer_detail {

// Per-sample scratch kept alive between the forward and backward phases.
struct SampleWork {
  PipelineCache pc;
  double l_pose = 0.0, l_ortho = 0.0;
  FeatureMatrix d_out, d_coarse, dM_ortho, dV_ortho;
  FeatureMatrix z_motion;            // T x D unit rows
  std::vector<double> m_norm;        // per-row norms, < 1e-9 marks degenerate
  FeatureMatrix z_anchor;            // T x D unit rows
  std::vector<AnchorEmbed::Cache> anchor_caches;
  GradStore grads;
};

}  // namespace trainer_detail

// Batch objective: mean pose MSE (averaged over the coarse and refined
// heads) + alpha * mean orthogonality penalty + beta * contrastive alignment
// over all B*T (anchor, motion) row pairs.
// Samples run forward and backward in parallel; the alignment term couples
// them and is evaluated serially in between; gradients reduce in sample
// order so the result is bit-reproducible for any worker count.
inline LossReport batch_loss_and_grads(const MovidModel& model, const std::vector<ClipRef>& batch,
                                       double alpha, double beta, bool train) {
  const int B = static_cast<int>(batch.size());
  if (B == 0) throw DegenerateBatch("batch_loss_and_grads: empty batch");
  const int D = model.cfg.enc.d_motion;
  const double invB = 1.0 / static_cast<double>(B);

  for (const ClipRef& c : batch) {
    if (c.x.rows == 0 || c.x.rows != c.gt.rows ||
        c.canon.size() != static_cast<size_t>(c.x.rows))
      throw ShapeMismatch("batch_loss_and_grads: clip row counts disagree");
  }

  std::vector<trainer_detail::SampleWork> work(B);

  parallel_for(B, [&](int i) {
    trainer_detail::SampleWork& w = work[i];
    const ClipRef& c = batch[static_cast<size_t>(i)];
    forward_pipeline(model, c.x, train, c.drop_seed, w.pc);
    const int T = c.x.rows;

    // Both pose heads train against the camera-frame target: the refined
    // output directly, and the coarse keypoints so the geometric view
    // features they feed stay anchored to real camera geometry.
    w.l_pose = mse_and_grad(w.pc.out, c.gt, 0.5, &w.d_out) +
               mse_and_grad(w.pc.K_coarse, c.gt, 0.5, &w.d_coarse);
    w.l_ortho = loss_ortho(w.pc.proj.m_proj, w.pc.V, &w.dM_ortho, &w.dV_ortho);

    w.z_motion = FeatureMatrix(T, D);
    w.m_norm.resize(T);
    for (int t = 0; t < T; ++t) {
      const double* m = w.pc.proj.m_proj.row(t);
      double n2 = 0.0;
      for (int j = 0; j < D; ++j) n2 += m[j] * m[j];
      const double nrm = std::sqrt(n2);
      w.m_norm[t] = nrm;
      double* z = w.z_motion.row(t);
      if (nrm < 1e-9) {
        z[0] = 1.0;  // degenerate row pinned to e0; its gradient is dropped
      } else {
        for (int j = 0; j < D; ++j) z[j] = m[j] / nrm;
      }
    }

    w.z_anchor = FeatureMatrix(T, D);
    w.anchor_caches.resize(T);
    for (int t = 0; t < T; ++t)
      model.anchor.forward(model.params, c.canon[static_cast<size_t>(t)], w.z_anchor.row(t),
                           &w.anchor_caches[static_cast<size_t>(t)]);
  });

  // Serial phase: the contrastive term sees the whole batch at once.
  int N = 0;
  for (const auto& w : work) N += w.z_motion.rows;
  FeatureMatrix Za(N, D), Zm(N, D);
  {
    int r = 0;
    for (const auto& w : work) {
      std::memcpy(Za.row(r), w.z_anchor.data.data(), sizeof(double) * w.z_anchor.data.size());
      std::memcpy(Zm.row(r), w.z_motion.data.data(), sizeof(double) * w.z_motion.data.size());
      r += w.z_motion.rows;
    }
  }
  FeatureMatrix dZa, dZm;
  const double l_align = loss_align(Za, Zm, model.cfg.tau, &dZa, &dZm);

  std::vector<int> row0(B, 0);
  for (int i = 1; i < B; ++i) row0[static_cast<size_t>(i)] =
      row0[static_cast<size_t>(i - 1)] + work[static_cast<size_t>(i - 1)].z_motion.rows;

  parallel_for(B, [&](int i) {
    trainer_detail::SampleWork& w = work[static_cast<size_t>(i)];
    const int T = w.z_motion.rows;

    for (double& x : w.d_out.data) x *= invB;
    for (double& x : w.d_coarse.data) x *= invB;

    // dM collects the orthogonality term and the alignment term pulled back
    // through the row normalization z = m / ||m||.
    FeatureMatrix dM(T, D), dV(T, D);
    for (size_t j = 0; j < dM.data.size(); ++j) {
      dM.data[j] = alpha * invB * w.dM_ortho.data[j];
      dV.data[j] = alpha * invB * w.dV_ortho.data[j];
    }
    if (beta != 0.0) {
      for (int t = 0; t < T; ++t) {
        const double nrm = w.m_norm[static_cast<size_t>(t)];
        if (nrm < 1e-9) continue;
        const double* z = w.z_motion.row(t);
        const double* dz = dZm.row(row0[static_cast<size_t>(i)] + t);
        double zd = 0.0;
        for (int j = 0; j < D; ++j) zd += z[j] * dz[j];
        double* dm = dM.row(t);
        for (int j = 0; j < D; ++j) dm[j] += beta * (dz[j] - z[j] * zd) / nrm;
      }
    }

    backward_pipeline(model, w.pc, w.d_out, w.d_coarse, dM, dV, w.grads);

    if (beta != 0.0) {
      std::vector<double> da(static_cast<size_t>(D));
      for (int t = 0; t < T; ++t) {
        const double* dz = dZa.row(row0[static_cast<size_t>(i)] + t);
        for (int j = 0; j < D; ++j) da[static_cast<size_t>(j)] = beta * dz[j];
        model.anchor.backward(model.params, w.anchor_caches[static_cast<size_t>(t)], da.data(),
                              w.grads);
      }
    }
  });

  double l_pose = 0.0, l_ortho = 0.0;
  LossReport rep;
  for (auto& w : work) {
    l_pose += w.l_pose;
    l_ortho += w.l_ortho;
    rep.grads.add(w.grads);
  }
  const LossReport scalars = total_loss(l_pose * invB, l_ortho * invB, l_align, alpha, beta);
  rep.l_pose = scalars.l_pose;
  rep.l_ortho = scalars.l_ortho;
  rep.l_align = scalars.l_align;
  rep.l_total = scalars.l_total;
  return rep;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct HistoryRow {
  long step = 0;
  double l_pose = 0.0, l_ortho = 0.0, l_align = 0.0, l_total = 0.0, lr = 0.0;
};

struct TrainResult {
  std::unique_ptr<MovidModel> model;
  std::vector<HistoryRow> history;
};

namespace trainer_detail {

// Fisher-Yates keyed on (seed, tag, epoch): same seed, same order.
inline std::vector<size_t> keyed_permutation(size_t n, uint64_t seed, uint64_t epoch) {
  std::vector<size_t> p(n);
  for (size_t i = 0; i < n; ++i) p[i] = i;
  for (size_t i = 0; i + 1 < n; ++i) {
    const double u = CounterRng::uniform(CounterRng::key(seed, 0x5E9F, epoch, i));
    const size_t j = i + static_cast<size_t>(u * static_cast<double>(n - i));
    std::swap(p[i], p[std::min(j, n - 1)]);
  }
  return p;
}

}  // namespace trainer_detail

struct TrainItem {
  const MultiViewSample* sample = nullptr;
  int view = 0;
};

inline std::vector<TrainItem> flatten_items(const std::vector<MultiViewSample>& data) {
  std::vector<TrainItem> items;
  for (const auto& s : data)
    for (int v = 0; v < static_cast<int>(s.views.size()); ++v) items.push_back({&s, v});
  return items;
}

// Cuts one windowed, normalized clip out of a rendered view.
inline ClipRef make_clip(const MultiViewSample& s, int view, int start, int T,
                         uint64_t drop_seed) {
  const ViewRender& vr = s.views[static_cast<size_t>(view)];
  if (start < 0 || start + T > static_cast<int>(vr.kp.size()))
    throw TooShort("make_clip: window exceeds clip length");
  ClipRef c;
  c.drop_seed = drop_seed;
  c.x = FeatureMatrix(T, kKeypointWidth);
  c.gt = FeatureMatrix(T, kKeypointWidth);
  c.canon.resize(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) {
    normalize_keypoints_row(vr.kp[static_cast<size_t>(start + t)], vr.cam.image_width,
                            vr.cam.image_height, c.x.row(t));
    skeleton_to_row(vr.gt_cam[static_cast<size_t>(start + t)], c.gt.row(t));
    c.canon[static_cast<size_t>(t)] = s.clip.canon[static_cast<size_t>(start + t)];
  }
  return c;
}

inline TrainResult train(const std::vector<MultiViewSample>& data, const TrainConfig& cfg,
                         const AblationSpec& ablation = {}) {
  if (data.empty()) throw DegenerateBatch("train: empty dataset");
  const int T = cfg.clip_length;
  if (T < 1) throw InvalidArg("train: clip_length must be >= 1");
  for (const auto& s : data)
    if (static_cast<int>(s.clip.frames.size()) < T)
      throw TooShort("train: clip " + s.clip.motion_id + " shorter than clip_length");

  const std::vector<TrainItem> items = flatten_items(data);
  if (items.empty()) throw DegenerateBatch("train: dataset has no rendered views");
  const int B = cfg.batch_size;
  if (B < 1) throw InvalidArg("train: batch_size must be >= 1");
  const int steps_per_epoch = static_cast<int>(items.size()) / B;
  if (steps_per_epoch == 0) throw DegenerateBatch("train: batch_size exceeds item count");

  ModelConfig mc = cfg.model;
  mc.use_projection = !ablation.disable_projection;
  auto model = std::make_unique<MovidModel>(mc);
  const double alpha = ablation.disable_ortho_loss ? 0.0 : mc.alpha;
  const double beta = ablation.disable_align_loss ? 0.0 : mc.beta;

  const int m1 = static_cast<int>(std::floor(cfg.milestone1 * cfg.epochs));
  const int m2 = static_cast<int>(std::floor(cfg.milestone2 * cfg.epochs));

  Adam opt;
  TrainResult res;
  res.history.reserve(static_cast<size_t>(steps_per_epoch) * static_cast<size_t>(cfg.epochs));

  long step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto perm =
        trainer_detail::keyed_permutation(items.size(), cfg.seed, static_cast<uint64_t>(e));
    double lr = cfg.lr;
    if (e >= m1) lr *= cfg.decay;
    if (e >= m2) lr *= cfg.decay;

    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      std::vector<ClipRef> batch;
      batch.reserve(static_cast<size_t>(B));
      for (int b = 0; b < B; ++b) {
        const TrainItem& it = items[perm[static_cast<size_t>(s) * B + static_cast<size_t>(b)]];
        const int L = static_cast<int>(it.sample->views[static_cast<size_t>(it.view)].kp.size());
        const int span = L - T;
        int start = 0;
        if (span > 0) {
          const double u = CounterRng::uniform(
              CounterRng::key(cfg.seed, 0x57A7, static_cast<uint64_t>(step), b));
          start = std::min(span, static_cast<int>(u * (span + 1)));
        }
        batch.push_back(make_clip(*it.sample, it.view, start, T,
                                  CounterRng::key(cfg.seed, 0xD409, static_cast<uint64_t>(step),
                                                  b)));
      }

      LossReport rep = batch_loss_and_grads(*model, batch, alpha, beta, true);
      const double gnorm = rep.grads.global_norm();
      if (!rep.finite() || !std::isfinite(gnorm))
        throw NaNLoss("train: non-finite loss or gradient at step " + std::to_string(step));
      if (cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip)
        rep.grads.scale(cfg.grad_clip / gnorm);
      opt.step(model->params, rep.grads, lr);

      res.history.push_back({step, rep.l_pose, rep.l_ortho, rep.l_align, rep.l_total, lr});
    }
  }

  res.model = std::move(model);
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct ViewMetrics {
  int view_id = 0;
  double mpjpe_mm = 0.0, pa_mpjpe_mm = 0.0, accel_mm = 0.0;
  int n_clips = 0;
};

struct EvalReport {
  std::vector<ViewMetrics> per_view;  // sorted by view_id
  double mpjpe_mm = 0.0, pa_mpjpe_mm = 0.0, accel_mm = 0.0;
  double cluster_acc = 0.0;
  double cross_view_var = 0.0;
  int n_views = 0;
};

// Full-clip inference over every rendered view: pose metrics per view and
// aggregate, k-means view separability of the mean view embeddings, and
// cross-view variance of the motion features grouped per motion.
inline EvalReport evaluate_split(const MovidModel& model,
                                 const std::vector<MultiViewSample>& data,
                                 const EvalConfig& ec) {
  if (data.empty()) throw DegenerateBatch("evaluate_split: empty dataset");

  struct Job {
    const MultiViewSample* s = nullptr;
    int view = 0, sample_idx = 0;
  };
  std::vector<Job> jobs;
  for (int si = 0; si < static_cast<int>(data.size()); ++si)
    for (int v = 0; v < static_cast<int>(data[static_cast<size_t>(si)].views.size()); ++v)
      jobs.push_back({&data[static_cast<size_t>(si)], v, si});
  if (jobs.empty()) throw DegenerateBatch("evaluate_split: dataset has no rendered views");

  struct Out {
    double mpjpe = 0.0, pa = 0.0, accel = 0.0;
    std::vector<double> emb;
    FeatureMatrix M;
    int view_id = 0, sample_idx = 0;
  };
  std::vector<Out> outs(jobs.size());
  const int d_view = model.cfg.enc.d_view;

  parallel_for(static_cast<int>(jobs.size()), [&](int i) {
    const Job& jb = jobs[static_cast<size_t>(i)];
    const ViewRender& vr = jb.s->views[static_cast<size_t>(jb.view)];
    PipelineCache pc;
    forward_pipeline(model, vr.kp, vr.cam.image_width, vr.cam.image_height, false, 0, pc);
    Out& o = outs[static_cast<size_t>(i)];
    const auto pred = pc.refined_skeletons();
    o.mpjpe = mpjpe(pred, vr.gt_cam);
    o.pa = pa_mpjpe(pred, vr.gt_cam);
    o.accel = accel_error(pred, vr.gt_cam);
    o.emb.assign(static_cast<size_t>(d_view), 0.0);
    for (int t = 0; t < pc.V.rows; ++t)
      for (int j = 0; j < d_view; ++j) o.emb[static_cast<size_t>(j)] += pc.V.at(t, j);
    for (double& x : o.emb) x /= pc.V.rows;
    o.M = pc.proj.m_proj;
    o.view_id = vr.view_id;
    o.sample_idx = jb.sample_idx;
  });

  EvalReport rep;

  std::map<int, ViewMetrics> per_view;
  for (const Out& o : outs) {
    ViewMetrics& vm = per_view[o.view_id];
    vm.view_id = o.view_id;
    vm.mpjpe_mm += o.mpjpe;
    vm.pa_mpjpe_mm += o.pa;
    vm.accel_mm += o.accel;
    vm.n_clips += 1;
    rep.mpjpe_mm += o.mpjpe;
    rep.pa_mpjpe_mm += o.pa;
    rep.accel_mm += o.accel;
  }
  const double n_jobs = static_cast<double>(outs.size());
  rep.mpjpe_mm /= n_jobs;
  rep.pa_mpjpe_mm /= n_jobs;
  rep.accel_mm /= n_jobs;
  for (auto& [vid, vm] : per_view) {
    vm.mpjpe_mm /= vm.n_clips;
    vm.pa_mpjpe_mm /= vm.n_clips;
    vm.accel_mm /= vm.n_clips;
    rep.per_view.push_back(vm);
  }
  rep.n_views = static_cast<int>(per_view.size());

  // View separability: one mean embedding per (motion, view), labeled by the
  // view id remapped to a dense range.
  std::map<int, int> label_of;
  for (const auto& [vid, vm] : per_view) {
    const int next = static_cast<int>(label_of.size());
    label_of.emplace(vid, next);
  }
  if (rep.n_views >= 2) {
    FeatureMatrix emb(static_cast<int>(outs.size()), d_view);
    std::vector<int> labels(outs.size());
    for (size_t i = 0; i < outs.size(); ++i) {
      std::memcpy(emb.row(static_cast<int>(i)), outs[i].emb.data(),
                  sizeof(double) * static_cast<size_t>(d_view));
      labels[i] = label_of[outs[i].view_id];
    }
    rep.cluster_acc =
        view_cluster_accuracy(emb, labels, rep.n_views, ec.kmeans_seed, ec.kmeans_restarts);
  } else {
    rep.cluster_acc = 1.0;
  }

  // Motion-feature stability across views, averaged over motions.
  std::map<int, std::vector<const FeatureMatrix*>> groups;
  for (const Out& o : outs) groups[o.sample_idx].push_back(&o.M);
  double var_sum = 0.0;
  int var_n = 0;
  for (const auto& [si, ms] : groups) {
    if (ms.size() < 2) continue;
    std::vector<FeatureMatrix> per_view_m;
    per_view_m.reserve(ms.size());
    for (const FeatureMatrix* p : ms) per_view_m.push_back(*p);
    var_sum += cross_view_variance(per_view_m);
    var_n += 1;
  }
  rep.cross_view_var = var_n > 0 ? var_sum / var_n : 0.0;

  return rep;
}

// ---------------------------------------------------------------------------
// Benchmark plumbing: desk-scale dataset, azimuth split, ablations, noise
// ---------------------------------------------------------------------------

// 6 motion kinds x seeds_per_kind clips, rendered on the 8 x 2 camera grid.
inline std::vector<MultiViewSample> make_desk_dataset(int seeds_per_kind = 20, int frames = 32,
                                                      uint64_t seed0 = 100,
                                                      const NoiseSpec& noise = {}) {
  if (seeds_per_kind < 1) throw InvalidArg("make_desk_dataset: seeds_per_kind >= 1");
  const auto cams = camera_grid();
  const MotionKind kinds[] = {MotionKind::Walk, MotionKind::Jog,  MotionKind::Squat,
                              MotionKind::Bend, MotionKind::Hop,  MotionKind::Mixed};
  std::vector<MultiViewSample> out;
  out.reserve(6u * static_cast<size_t>(seeds_per_kind));
  for (int k = 0; k < 6; ++k) {
    for (int i = 0; i < seeds_per_kind; ++i) {
      const uint64_t ms = CounterRng::key(seed0, 0xC11F, static_cast<uint64_t>(k),
                                          static_cast<uint64_t>(i));
      MotionClip clip = synth_motion(kinds[k], frames, ms);
      MultiViewSample s = render_views(clip, cams, noise, CounterRng::key(ms, 0xF00D));
      tag_grid_indices(s, 8);
      out.push_back(std::move(s));
    }
  }
  return out;
}

struct SplitResult {
  std::vector<MultiViewSample> train, held;
};

// Even azimuth indices train, odd ones are held out: every held camera is an
// unseen view of a seen motion.
inline SplitResult split_by_azimuth(const std::vector<MultiViewSample>& data) {
  SplitResult r;
  for (const auto& s : data) {
    MultiViewSample a, b;
    a.clip = s.clip;
    b.clip = s.clip;
    a.noise = s.noise;
    b.noise = s.noise;
    for (const auto& v : s.views) {
      if (v.az_index < 0)
        throw InvalidArg("split_by_azimuth: views lack grid indices (run tag_grid_indices)");
      (v.az_index % 2 == 0 ? a : b).views.push_back(v);
    }
    if (!a.views.empty()) r.train.push_back(std::move(a));
    if (!b.views.empty()) r.held.push_back(std::move(b));
  }
  return r;
}

struct AblationRow {
  std::string variant;
  double pa_mpjpe_mm = 0.0, cross_view_var = 0.0, cluster_acc = 0.0;
};

// Trains the four variants from the same seed and scores each on the held-out
// azimuths.
inline std::vector<AblationRow> run_ablation_suite(const std::vector<MultiViewSample>& data,
                                                   const TrainConfig& cfg) {
  const SplitResult sp = split_by_azimuth(data);
  if (sp.train.empty() || sp.held.empty())
    throw InvalidArg("run_ablation_suite: need both train and held-out views");

  struct Variant {
    const char* name;
    AblationSpec ab;
  };
  const Variant variants[] = {
      {"full", {false, false, false}},
      {"no_projection", {true, false, false}},
      {"no_ortho", {false, true, false}},
      {"no_align", {false, false, true}},
  };

  std::vector<AblationRow> rows;
  for (const Variant& v : variants) {
    TrainResult tr = train(sp.train, cfg, v.ab);
    const EvalReport er = evaluate_split(*tr.model, sp.held, cfg.eval);
    rows.push_back({v.name, er.pa_mpjpe_mm, er.cross_view_var, er.cluster_acc});
  }
  return rows;
}

struct NoiseRow {
  double sigma_mm = 0.0, mpjpe_mm = 0.0, pa_mpjpe_mm = 0.0;
};

struct NoiseSweepResult {
  std::vector<NoiseRow> rows;
  bool max_exceeds_clean = false;  // errors at the last sigma strictly above the sigma=0 row
  bool trend_monotone = false;     // non-decreasing within 2% dip tolerance
};

// Injects zero-mean Gaussian noise into both the 2D pixels and the coarse 3D
// keypoints at each sigma and re-evaluates. The sigma=0 pass takes the exact
// clean path, so its row matches an unperturbed evaluation bit for bit.
inline NoiseSweepResult noise_sweep(const MovidModel& model,
                                    const std::vector<MultiViewSample>& data,
                                    const std::vector<double>& sigmas_mm, uint64_t seed) {
  if (sigmas_mm.empty() || sigmas_mm.front() != 0.0)
    throw InvalidArg("noise_sweep: sigma list must start at 0");
  for (size_t i = 1; i < sigmas_mm.size(); ++i)
    if (!(sigmas_mm[i] > sigmas_mm[i - 1]))
      throw InvalidArg("noise_sweep: sigmas must be strictly ascending");
  if (data.empty()) throw DegenerateBatch("noise_sweep: empty dataset");

  struct Job {
    const ViewRender* vr = nullptr;
  };
  std::vector<Job> jobs;
  for (const auto& s : data)
    for (const auto& v : s.views) jobs.push_back({&v});
  if (jobs.empty()) throw DegenerateBatch("noise_sweep: dataset has no rendered views");

  NoiseSweepResult res;
  for (size_t si = 0; si < sigmas_mm.size(); ++si) {
    const double sigma_m = sigmas_mm[si] / 1000.0;
    const uint64_t pass_seed = CounterRng::key(seed, 0x2D5E, si);

    std::vector<double> mp(jobs.size()), pa(jobs.size());
    parallel_for(static_cast<int>(jobs.size()), [&](int i) {
      const ViewRender& vr = *jobs[static_cast<size_t>(i)].vr;
      PipelineCache pc;
      if (sigma_m > 0.0) {
        // Pixel sigma from the metric sigma at the subject's depth.
        const double sigma_px = sigma_m * vr.cam.focal_px / vr.cam.distance;
        std::vector<Keypoints2D> kp = vr.kp;
        for (size_t t = 0; t < kp.size(); ++t)
          for (int j = 0; j < kJoints; ++j) {
            kp[t].u[static_cast<size_t>(j)] += sigma_px * CounterRng::gaussian(CounterRng::key(
                pass_seed, static_cast<uint64_t>(i), t, static_cast<uint64_t>(j), 0));
            kp[t].v[static_cast<size_t>(j)] += sigma_px * CounterRng::gaussian(CounterRng::key(
                pass_seed, static_cast<uint64_t>(i), t, static_cast<uint64_t>(j), 1));
          }
        const CoarseNoise cn{sigma_m,
                             CounterRng::key(pass_seed, 0xC0A5, static_cast<uint64_t>(i))};
        forward_pipeline(model, kp, vr.cam.image_width, vr.cam.image_height, false, 0, pc, &cn);
      } else {
        forward_pipeline(model, vr.kp, vr.cam.image_width, vr.cam.image_height, false, 0, pc);
      }
      const auto pred = pc.refined_skeletons();
      mp[static_cast<size_t>(i)] = mpjpe(pred, vr.gt_cam);
      pa[static_cast<size_t>(i)] = pa_mpjpe(pred, vr.gt_cam);
    });

    NoiseRow row;
    row.sigma_mm = sigmas_mm[si];
    for (size_t i = 0; i < jobs.size(); ++i) {
      row.mpjpe_mm += mp[i];
      row.pa_mpjpe_mm += pa[i];
    }
    row.mpjpe_mm /= static_cast<double>(jobs.size());
    row.pa_mpjpe_mm /= static_cast<double>(jobs.size());
    res.rows.push_back(row);
  }

  const NoiseRow& first = res.rows.front();
  const NoiseRow& last = res.rows.back();
  res.max_exceeds_clean =
      res.rows.size() >= 2 && last.mpjpe_mm > first.mpjpe_mm && last.pa_mpjpe_mm > first.pa_mpjpe_mm;

  res.trend_monotone = true;
  double run_mp = first.mpjpe_mm, run_pa = first.pa_mpjpe_mm;
  for (size_t i = 1; i < res.rows.size(); ++i) {
    if (res.rows[i].mpjpe_mm < 0.98 * run_mp || res.rows[i].pa_mpjpe_mm < 0.98 * run_pa)
      res.trend_monotone = false;
    run_mp = std::max(run_mp, res.rows[i].mpjpe_mm);
    run_pa = std::max(run_pa, res.rows[i].pa_mpjpe_mm);
  }

  return res;
}

// ---------------------------------------------------------------------------
// CSV builders (the CLI writes these to disk verbatim)
// ---------------------------------------------------------------------------

inline std::string history_to_csv(const std::vector<HistoryRow>& h) {
  std::string s = "step,l_pose,l_ortho,l_align,l_total,lr\n";
  for (const HistoryRow& r : h) {
    s += std::to_string(r.step);
    s += ',';
    s += format_g17(r.l_pose);
    s += ',';
    s += format_g17(r.l_ortho);
    s += ',';
    s += format_g17(r.l_align);
    s += ',';
    s += format_g17(r.l_total);
    s += ',';
    s += format_g17(r.lr);
    s += '\n';
  }
  return s;
}

inline std::string ablation_to_csv(const std::vector<AblationRow>& rows) {
  std::string s = "variant,pa_mpjpe_mm,cross_view_variance,view_cluster_accuracy\n";
  for (const AblationRow& r : rows) {
    s += r.variant;
    s += ',';
    s += format_g17(r.pa_mpjpe_mm);
    s += ',';
    s += format_g17(r.cross_view_var);
    s += ',';
    s += format_g17(r.cluster_acc);
    s += '\n';
  }
  return s;
}

inline std::string noise_to_csv(const std::vector<NoiseRow>& rows) {
  std::string s = "sigma_mm,mpjpe_mm,pa_mpjpe_mm\n";
  for (const NoiseRow& r : rows) {
    s += format_g17(r.sigma_mm);
    s += ',';
    s += format_g17(r.mpjpe_mm);
    s += ',';
    s += format_g17(r.pa_mpjpe_mm);
    s += '\n';
  }
  return s;
}

}  // namespace movid
