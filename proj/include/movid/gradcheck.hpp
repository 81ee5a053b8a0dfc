#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "movid/common.hpp"
#include "movid/disentangle.hpp"
#include "movid/model.hpp"
#include "movid/netcore.hpp"
#include "movid/trainer.hpp"

namespace movid {

struct GradCheckOptions {
  uint64_t seed = 7;
  double h = 1e-6;  // per-coordinate step is h * (1 + |theta_i|)
  double tol = 1e-5;
  std::string corrupt_param;  // fault injection: scale this tensor's analytic grad
  double corrupt_scale = 1.0;
};

struct GradCheckReport {
  std::string component;
  double max_rel_err = 0.0;
  std::string offending_param;  // worst coordinate as "name[idx]"
  bool pass = false;
  double tol = 0.0;
};

namespace gradcheck_detail {

inline double rand_pm1(uint64_t seed, uint64_t tag, uint64_t r, uint64_t c) {
  return 2.0 * CounterRng::uniform(CounterRng::key(seed, tag, r, c)) - 1.0;
}

inline FeatureMatrix rand_matrix(int rows, int cols, uint64_t seed, uint64_t tag) {
  FeatureMatrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      m.at(r, c) = rand_pm1(seed, tag, static_cast<uint64_t>(r), static_cast<uint64_t>(c));
  return m;
}

// A scalar objective over one parameter store, with its analytic gradient.
// The closures own whatever model state they need; `ps` is what gets poked.
struct Problem {
  ParamStore* ps = nullptr;
  std::function<double()> value;
  std::function<GradStore()> grad;
  std::shared_ptr<void> keepalive;
};

// Central differences against the analytic gradient. The error denominator
// has a 1e-3 floor: coordinates below it are judged absolutely (at tol*1e-3),
// which keeps the finite-difference noise floor (~1e-10 on an O(1) scalar)
// from flagging healthy near-zero entries.
inline GradCheckReport run(const std::string& component, Problem& p,
                           const GradCheckOptions& opt, double tol) {
  GradStore g = p.grad();
  if (!opt.corrupt_param.empty()) {
    auto it = g.g.find(opt.corrupt_param);
    if (it == g.g.end())
      throw InvalidArg("grad_check: corrupt_param not in gradient: " + opt.corrupt_param);
    for (double& x : it->second) x *= opt.corrupt_scale;
  }

  GradCheckReport rep;
  rep.component = component;
  rep.tol = tol;
  for (auto& [name, tensor] : p.ps->tensors()) {
    const auto it = g.g.find(name);
    for (size_t i = 0; i < tensor.v.size(); ++i) {
      const double theta = tensor.v[i];
      const double hi = opt.h * (1.0 + std::abs(theta));
      tensor.v[i] = theta + hi;
      const double fp = p.value();
      tensor.v[i] = theta - hi;
      const double fm = p.value();
      tensor.v[i] = theta;
      const double fd = (fp - fm) / (2.0 * hi);
      const double an = it != g.g.end() ? it->second[i] : 0.0;
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3});
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.offending_param = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

inline EncoderConfig small_cfg() {
  EncoderConfig c;
  c.d_view = c.d_motion = c.d_base = 8;
  c.k_bases = 2;
  c.hidden = 6;
  c.dropout = 0.1;
  return c;
}

inline Problem make_linear(uint64_t seed) {
  struct State {
    ParamStore ps;
    Linear lin;
    FeatureMatrix x, w;
    explicit State(uint64_t s) : ps(s) {
      lin.build(ps, "lin", 7, 5);
      x = rand_matrix(3, 7, s, 0x11);
      w = rand_matrix(3, 5, s, 0x12);
    }
  };
  auto st = std::make_shared<State>(seed);
  Problem p;
  p.ps = &st->ps;
  p.keepalive = st;
  p.value = [st] {
    double v = 0.0;
    std::vector<double> y(5);
    for (int r = 0; r < st->x.rows; ++r) {
      st->lin.forward(st->ps, st->x.row(r), y.data());
      for (int o = 0; o < 5; ++o) v += st->w.at(r, o) * y[o];
    }
    return v;
  };
  p.grad = [st] {
    GradStore g;
    for (int r = 0; r < st->x.rows; ++r)
      st->lin.backward(st->ps, st->x.row(r), st->w.row(r), nullptr, g);
    return g;
  };
  return p;
}

inline Problem make_motion_encoder(uint64_t seed) {
  struct State {
    ParamStore ps;
    MotionEncoder enc;
    FeatureMatrix x, wm, wk;
    explicit State(uint64_t s) : ps(s) {
      const EncoderConfig cfg = small_cfg();
      enc.build(ps, "enc", cfg);
      x = rand_matrix(4, kKeypointWidth, s, 0x21);
      wm = rand_matrix(4, cfg.d_motion, s, 0x22);
      wk = rand_matrix(4, kKeypointWidth, s, 0x23);
    }
  };
  auto st = std::make_shared<State>(seed);
  Problem p;
  p.ps = &st->ps;
  p.keepalive = st;
  p.value = [st] {
    FeatureMatrix M, K;
    st->enc.forward(st->ps, st->x, nullptr, M, K, nullptr, nullptr);
    double v = 0.0;
    for (size_t i = 0; i < M.data.size(); ++i) v += st->wm.data[i] * M.data[i];
    for (size_t i = 0; i < K.data.size(); ++i) v += st->wk.data[i] * K.data[i];
    return v;
  };
  p.grad = [st] {
    FeatureMatrix M, K;
    MotionEncoder::Cache cache;
    st->enc.forward(st->ps, st->x, nullptr, M, K, nullptr, &cache);
    GradStore g;
    st->enc.backward(st->ps, cache, st->wm, st->wk, nullptr, g);
    return g;
  };
  return p;
}

inline Problem make_view_encoder(uint64_t seed) {
  struct State {
    ParamStore ps;
    ViewEncoder venc;
    FeatureMatrix f, w;
    uint64_t drop_seed;
    explicit State(uint64_t s) : ps(s), drop_seed(CounterRng::key(s, 0xD20)) {
      const EncoderConfig cfg = small_cfg();
      venc.build(ps, "venc", cfg);
      f = rand_matrix(3, kViewFeatDim, s, 0x31);
      w = rand_matrix(3, cfg.d_view, s, 0x32);
    }
  };
  auto st = std::make_shared<State>(seed);
  Problem p;
  p.ps = &st->ps;
  p.keepalive = st;
  // train mode on purpose: the seeded dropout mask is part of the graph.
  p.value = [st] {
    const FeatureMatrix V = st->venc.forward(st->ps, st->f, nullptr, true, st->drop_seed);
    double v = 0.0;
    for (size_t i = 0; i < V.data.size(); ++i) v += st->w.data[i] * V.data[i];
    return v;
  };
  p.grad = [st] {
    ViewEncoder::Cache cache;
    st->venc.forward(st->ps, st->f, &cache, true, st->drop_seed);
    GradStore g;
    st->venc.backward(st->ps, cache, st->w, nullptr, g);
    return g;
  };
  return p;
}

inline Problem make_basis_generator(uint64_t seed) {
  struct State {
    ParamStore ps;
    BasisGenerator bgen;
    FeatureMatrix V, w;
    explicit State(uint64_t s) : ps(s) {
      const EncoderConfig cfg = small_cfg();
      bgen.build(ps, "bgen", cfg);
      V = rand_matrix(3, cfg.d_view, s, 0x41);
      w = rand_matrix(3, cfg.k_bases * cfg.d_base, s, 0x42);
    }
  };
  auto st = std::make_shared<State>(seed);
  Problem p;
  p.ps = &st->ps;
  p.keepalive = st;
  p.value = [st] {
    const FeatureMatrix raw = st->bgen.forward(st->ps, st->V);
    double v = 0.0;
    for (size_t i = 0; i < raw.data.size(); ++i) v += st->w.data[i] * raw.data[i];
    return v;
  };
  p.grad = [st] {
    GradStore g;
    st->bgen.backward(st->ps, st->V, st->w, nullptr, g);
    return g;
  };
  return p;
}

inline Problem make_pose_decoder(uint64_t seed) {
  struct State {
    ParamStore ps;
    PoseDecoder dec;
    FeatureMatrix M, w;
    explicit State(uint64_t s) : ps(s) {
      const EncoderConfig cfg = small_cfg();
      dec.build(ps, "dec", cfg, 3);
      M = rand_matrix(5, cfg.d_motion, s, 0x51);
      w = rand_matrix(5, kKeypointWidth, s, 0x52);
    }
  };
  auto st = std::make_shared<State>(seed);
  Problem p;
  p.ps = &st->ps;
  p.keepalive = st;
  p.value = [st] {
    const FeatureMatrix out = st->dec.forward(st->ps, st->M, nullptr);
    double v = 0.0;
    for (size_t i = 0; i < out.data.size(); ++i) v += st->w.data[i] * out.data[i];
    return v;
  };
  p.grad = [st] {
    PoseDecoder::Cache cache;
    st->dec.forward(st->ps, st->M, &cache);
    GradStore g;
    FeatureMatrix dM;
    st->dec.backward(st->ps, cache, st->w, dM, g);
    return g;
  };
  return p;
}

// The full training objective on a tiny model: pose MSE + orthogonality +
// alignment, dropout active, projection on. This is the same code path the
// optimizer consumes, so passing here validates training end to end.
inline Problem make_losses(uint64_t seed) {
  struct State {
    ModelConfig mc;
    std::unique_ptr<MovidModel> model;
    std::vector<ClipRef> batch;
    explicit State(uint64_t s) {
      mc.enc = small_cfg();
      mc.window = 3;
      mc.alpha = 0.3;
      mc.beta = 0.2;
      mc.tau = 0.5;
      mc.seed = s;
      model = std::make_unique<MovidModel>(mc);
      for (int b = 0; b < 2; ++b) {
        ClipRef c;
        const uint64_t tag = 0x61 + static_cast<uint64_t>(b);
        c.x = rand_matrix(3, kKeypointWidth, s, tag);
        c.gt = rand_matrix(3, kKeypointWidth, s, tag + 0x10);
        c.canon.resize(3);
        for (int t = 0; t < 3; ++t)
          for (int a = 0; a < kCanonAngles; ++a)
            c.canon[static_cast<size_t>(t)].angles[static_cast<size_t>(a)] =
                0.6 * rand_pm1(s, tag + 0x20, static_cast<uint64_t>(t),
                               static_cast<uint64_t>(a));
        c.drop_seed = CounterRng::key(s, 0xD0F, static_cast<uint64_t>(b));
        batch.push_back(std::move(c));
      }
    }
  };
  auto st = std::make_shared<State>(seed);
  Problem p;
  p.ps = &st->model->params;
  p.keepalive = st;
  p.value = [st] {
    return batch_loss_and_grads(*st->model, st->batch, st->mc.alpha, st->mc.beta, true).l_total;
  };
  p.grad = [st] {
    return batch_loss_and_grads(*st->model, st->batch, st->mc.alpha, st->mc.beta, true).grads;
  };
  return p;
}

}  // namespace gradcheck_detail

inline const std::vector<std::string>& grad_check_components() {
  static const std::vector<std::string> names = {
      "linear",       "motion_encoder", "view_encoder",
      "basis_generator", "pose_decoder", "losses"};
  return names;
}

// Linear maps are exact up to rounding, so "linear" is held to 1e-9 even when
// the caller asks for less. Zero truncation error also means the step can be
// large, which pushes the difference-quotient roundoff (~eps/h) below that
// tolerance.
inline GradCheckReport grad_check(const std::string& component,
                                  const GradCheckOptions& opt = {}) {
  using namespace gradcheck_detail;
  Problem p;
  GradCheckOptions o = opt;
  double tol = opt.tol;
  if (component == "linear") {
    p = make_linear(opt.seed);
    tol = std::min(opt.tol, 1e-9);
    o.h = std::max(opt.h, 1e-2);
  } else if (component == "motion_encoder") {
    p = make_motion_encoder(opt.seed);
  } else if (component == "view_encoder") {
    p = make_view_encoder(opt.seed);
  } else if (component == "basis_generator") {
    p = make_basis_generator(opt.seed);
  } else if (component == "pose_decoder") {
    p = make_pose_decoder(opt.seed);
  } else if (component == "losses") {
    p = make_losses(opt.seed);
  } else {
    throw InvalidArg("grad_check: unknown component " + component);
  }
  return run(component, p, o, tol);
}

inline std::vector<GradCheckReport> grad_check_all(const GradCheckOptions& opt = {}) {
  std::vector<GradCheckReport> reports;
  for (const std::string& name : grad_check_components()) reports.push_back(grad_check(name, opt));
  return reports;
}

}  // namespace movid
