#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "movid/common.hpp"
#include "movid/geometry.hpp"
#include "movid/viewfeat.hpp"

namespace movid {

constexpr int kKeypointWidth = 3 * kJoints;  // (u, v, conf) per joint

// ---------------------------------------------------------------------------
// Dense row-major matrix. Doubles throughout; gradient-check tolerances
// depend on 64-bit arithmetic.
// ---------------------------------------------------------------------------

struct FeatureMatrix {
  int rows = 0, cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

  double* row(int t) { return data.data() + static_cast<size_t>(t) * cols; }
  const double* row(int t) const { return data.data() + static_cast<size_t>(t) * cols; }
  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  bool finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Parameter store: named tensors, seeded init, binary checkpoint I/O
// ---------------------------------------------------------------------------

struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  size_t size() const { return v.size(); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

enum class Init { Glorot, Zeros, Ones };

class ParamStore {
 public:
  explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

  // Init is a pure function of (store seed, tensor name, element index), so
  // construction order never affects values.
  Tensor& add(const std::string& name, std::vector<int> shape, Init init) {
    if (tensors_.count(name)) throw InvalidArg("duplicate parameter: " + name);
    Tensor t;
    t.shape = std::move(shape);
    size_t n = 1;
    for (int d : t.shape) n *= static_cast<size_t>(d);
    t.v.assign(n, 0.0);
    if (init == Init::Ones) {
      t.v.assign(n, 1.0);
    } else if (init == Init::Glorot) {
      const int fan_out = t.shape[0];
      const int fan_in = t.shape.size() > 1 ? t.shape[1] : t.shape[0];
      const double lim = std::sqrt(6.0 / (fan_in + fan_out));
      const uint64_t name_key = fnv1a64(name.data(), name.size());
      for (size_t i = 0; i < n; ++i) {
        const double u = CounterRng::uniform(CounterRng::key(seed_, name_key, i));
        t.v[i] = lim * (2.0 * u - 1.0);
      }
    }
    return tensors_.emplace(name, std::move(t)).first->second;
  }

  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw InvalidArg("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw InvalidArg("unknown parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return tensors_.count(name) != 0; }

  std::map<std::string, Tensor>& tensors() { return tensors_; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  size_t total_params() const {
    size_t n = 0;
    for (const auto& [k, t] : tensors_) n += t.size();
    return n;
  }

  uint64_t seed() const { return seed_; }

  // Checkpoint: <prefix>.bin holds the raw little-endian doubles back to
  // back; <prefix>.manifest lists meta lines and per-tensor byte offsets.
  void save(const std::string& prefix,
            const std::vector<std::pair<std::string, std::string>>& meta = {}) const {
    FILE* mf = std::fopen((prefix + ".manifest").c_str(), "w");
    if (!mf) throw IoError("cannot write " + prefix + ".manifest");
    FILE* bf = std::fopen((prefix + ".bin").c_str(), "wb");
    if (!bf) {
      std::fclose(mf);
      throw IoError("cannot write " + prefix + ".bin");
    }
    std::fprintf(mf, "movid-checkpoint 1\n");
    for (const auto& [k, v] : meta) std::fprintf(mf, "meta %s %s\n", k.c_str(), v.c_str());
    size_t offset = 0;
    for (const auto& [name, t] : tensors_) {
      std::fprintf(mf, "tensor %s %zu", name.c_str(), t.shape.size());
      for (int d : t.shape) std::fprintf(mf, " %d", d);
      std::fprintf(mf, " %zu\n", offset);
      if (std::fwrite(t.v.data(), sizeof(double), t.size(), bf) != t.size()) {
        std::fclose(mf);
        std::fclose(bf);
        throw IoError("short write to " + prefix + ".bin");
      }
      offset += t.size() * sizeof(double);
    }
    std::fclose(mf);
    std::fclose(bf);
  }

  static std::vector<std::pair<std::string, std::string>> read_meta(const std::string& prefix) {
    FILE* mf = std::fopen((prefix + ".manifest").c_str(), "r");
    if (!mf) throw IoError("cannot read " + prefix + ".manifest");
    std::vector<std::pair<std::string, std::string>> meta;
    char line[4096];
    while (std::fgets(line, sizeof line, mf)) {
      char key[1024];
      int consumed = 0;
      if (std::sscanf(line, "meta %1023s %n", key, &consumed) == 1) {
        std::string val(line + consumed);
        while (!val.empty() && (val.back() == '\n' || val.back() == '\r')) val.pop_back();
        meta.emplace_back(key, val);
      }
    }
    std::fclose(mf);
    return meta;
  }

  // Loads into an already-built store; shapes must agree with the manifest.
  void load(const std::string& prefix) {
    FILE* mf = std::fopen((prefix + ".manifest").c_str(), "r");
    if (!mf) throw IoError("cannot read " + prefix + ".manifest");
    FILE* bf = std::fopen((prefix + ".bin").c_str(), "rb");
    if (!bf) {
      std::fclose(mf);
      throw IoError("cannot read " + prefix + ".bin");
    }
    char line[4096];
    size_t seen = 0;
    try {
      while (std::fgets(line, sizeof line, mf)) {
        if (std::strncmp(line, "tensor ", 7) != 0) continue;
        char name[1024];
        size_t rank = 0;
        int consumed = 0;
        if (std::sscanf(line, "tensor %1023s %zu%n", name, &rank, &consumed) != 2)
          throw IoError("bad manifest line: " + std::string(line));
        std::vector<int> shape(rank);
        const char* p = line + consumed;
        for (size_t i = 0; i < rank; ++i) {
          int used = 0;
          if (std::sscanf(p, " %d%n", &shape[i], &used) != 1)
            throw IoError("bad manifest line: " + std::string(line));
          p += used;
        }
        size_t offset = 0;
        if (std::sscanf(p, " %zu", &offset) != 1)
          throw IoError("bad manifest line: " + std::string(line));

        auto it = tensors_.find(name);
        if (it == tensors_.end())
          throw CheckpointShapeMismatch("checkpoint tensor not in model: " + std::string(name));
        if (it->second.shape != shape)
          throw CheckpointShapeMismatch("shape mismatch for tensor: " + std::string(name));
        if (std::fseek(bf, static_cast<long>(offset), SEEK_SET) != 0)
          throw IoError("seek failed in " + prefix + ".bin");
        if (std::fread(it->second.v.data(), sizeof(double), it->second.size(), bf) !=
            it->second.size())
          throw IoError("short read in " + prefix + ".bin");
        ++seen;
      }
    } catch (...) {
      std::fclose(mf);
      std::fclose(bf);
      throw;
    }
    std::fclose(mf);
    std::fclose(bf);
    if (seen != tensors_.size())
      throw CheckpointShapeMismatch("checkpoint holds " + std::to_string(seen) +
                                    " tensors, model has " + std::to_string(tensors_.size()));
  }

 private:
  std::map<std::string, Tensor> tensors_;
  uint64_t seed_ = 0;
};

// Gradient accumulator keyed like the store. std::map keeps reductions in
// name order, which keeps batch-parallel training bit-reproducible.
struct GradStore {
  std::map<std::string, std::vector<double>> g;

  std::vector<double>& at(const std::string& name, size_t n) {
    auto it = g.find(name);
    if (it == g.end()) it = g.emplace(name, std::vector<double>(n, 0.0)).first;
    return it->second;
  }
  const std::vector<double>* find(const std::string& name) const {
    auto it = g.find(name);
    return it == g.end() ? nullptr : &it->second;
  }
  void add(const GradStore& o) {
    for (const auto& [name, vec] : o.g) {
      auto& dst = at(name, vec.size());
      for (size_t i = 0; i < vec.size(); ++i) dst[i] += vec[i];
    }
  }
  void scale(double s) {
    for (auto& [name, vec] : g)
      for (double& x : vec) x *= s;
  }
  double global_norm() const {
    double s = 0.0;
    for (const auto& [name, vec] : g)
      for (double x : vec) s += x * x;
    return std::sqrt(s);
  }
};

// ---------------------------------------------------------------------------
// Raw dense kernels
// ---------------------------------------------------------------------------

namespace nn {

inline void matvec(const double* W, const double* x, double* y, int out, int in) {
  for (int o = 0; o < out; ++o) {
    double s = 0.0;
    const double* w = W + static_cast<size_t>(o) * in;
    for (int i = 0; i < in; ++i) s += w[i] * x[i];
    y[o] = s;
  }
}

inline void matvec_acc(const double* W, const double* x, double* y, int out, int in) {
  for (int o = 0; o < out; ++o) {
    double s = 0.0;
    const double* w = W + static_cast<size_t>(o) * in;
    for (int i = 0; i < in; ++i) s += w[i] * x[i];
    y[o] += s;
  }
}

// dx += W^T dy
inline void matvecT_acc(const double* W, const double* dy, double* dx, int out, int in) {
  for (int o = 0; o < out; ++o) {
    const double* w = W + static_cast<size_t>(o) * in;
    const double d = dy[o];
    for (int i = 0; i < in; ++i) dx[i] += w[i] * d;
  }
}

// dW += dy x^T
inline void outer_acc(const double* dy, const double* x, double* dW, int out, int in) {
  for (int o = 0; o < out; ++o) {
    double* w = dW + static_cast<size_t>(o) * in;
    const double d = dy[o];
    for (int i = 0; i < in; ++i) w[i] += d * x[i];
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Exact error-function GELU. The erf form keeps gradient checks free of
// approximation error.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  const double Phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return Phi + x * phi;
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Layers. Parameters live in the store under the layer's name prefix; each
// backward accumulates into GradStore and optionally into a caller dx.
// ---------------------------------------------------------------------------

struct Linear {
  int in = 0, out = 0;
  std::string wn, bn;

  void build(ParamStore& ps, const std::string& prefix, int in_, int out_) {
    in = in_;
    out = out_;
    wn = prefix + ".W";
    bn = prefix + ".b";
    ps.add(wn, {out, in}, Init::Glorot);
    ps.add(bn, {out}, Init::Zeros);
  }

  void forward(const ParamStore& ps, const double* x, double* y) const {
    const Tensor& W = ps.at(wn);
    const Tensor& b = ps.at(bn);
    for (int o = 0; o < out; ++o) y[o] = b.v[o];
    nn::matvec_acc(W.v.data(), x, y, out, in);
  }

  void backward(const ParamStore& ps, const double* x, const double* dy, double* dx,
                GradStore& g) const {
    const Tensor& W = ps.at(wn);
    auto& dW = g.at(wn, W.size());
    auto& db = g.at(bn, static_cast<size_t>(out));
    nn::outer_acc(dy, x, dW.data(), out, in);
    for (int o = 0; o < out; ++o) db[o] += dy[o];
    if (dx) nn::matvecT_acc(W.v.data(), dy, dx, out, in);
  }
};

struct LayerNorm {
  int dim = 0;
  double eps = 1e-12;
  std::string gn, on;

  void build(ParamStore& ps, const std::string& prefix, int dim_) {
    dim = dim_;
    gn = prefix + ".gain";
    on = prefix + ".offset";
    ps.add(gn, {dim}, Init::Ones);
    ps.add(on, {dim}, Init::Zeros);
  }

  // xhat/istd are the backward cache.
  void forward(const ParamStore& ps, const double* x, double* y, double* xhat,
               double* istd) const {
    double mu = 0.0;
    for (int i = 0; i < dim; ++i) mu += x[i];
    mu /= dim;
    double var = 0.0;
    for (int i = 0; i < dim; ++i) {
      const double d = x[i] - mu;
      var += d * d;
    }
    var /= dim;
    const double is = 1.0 / std::sqrt(var + eps);
    *istd = is;
    const Tensor& gain = ps.at(gn);
    const Tensor& offset = ps.at(on);
    for (int i = 0; i < dim; ++i) {
      xhat[i] = (x[i] - mu) * is;
      y[i] = gain.v[i] * xhat[i] + offset.v[i];
    }
  }

  void backward(const ParamStore& ps, const double* xhat, double istd, const double* dy,
                double* dx, GradStore& g) const {
    const Tensor& gain = ps.at(gn);
    auto& dg = g.at(gn, static_cast<size_t>(dim));
    auto& db = g.at(on, static_cast<size_t>(dim));
    double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
    for (int i = 0; i < dim; ++i) {
      const double dxh = dy[i] * gain.v[i];
      m1 += dxh;
      m2 += dxh * xhat[i];
      dg[i] += dy[i] * xhat[i];
      db[i] += dy[i];
    }
    m1 /= dim;
    m2 /= dim;
    if (dx) {
      for (int i = 0; i < dim; ++i) {
        const double dxh = dy[i] * gain.v[i];
        dx[i] += istd * (dxh - m1 - xhat[i] * m2);
      }
    }
  }
};

// Inverted dropout with a counter-keyed mask: the mask is a pure function of
// (seed, tag, row, unit), so backward recomputes it and finite differences
// see a fixed linear map.
struct Dropout {
  double rate = 0.0;
  uint64_t tag = 0;

  bool keep(uint64_t seed, int row, int i) const {
    return CounterRng::uniform(CounterRng::key(seed, tag, static_cast<uint64_t>(row),
                                               static_cast<uint64_t>(i))) >= rate;
  }

  void forward(uint64_t seed, int row, const double* x, double* y, int n, bool train) const {
    if (!train || rate <= 0.0) {
      for (int i = 0; i < n; ++i) y[i] = x[i];
      return;
    }
    const double s = 1.0 / (1.0 - rate);
    for (int i = 0; i < n; ++i) y[i] = keep(seed, row, i) ? x[i] * s : 0.0;
  }

  void backward(uint64_t seed, int row, const double* dy, double* dx, int n, bool train) const {
    if (!train || rate <= 0.0) {
      for (int i = 0; i < n; ++i) dx[i] += dy[i];
      return;
    }
    const double s = 1.0 / (1.0 - rate);
    for (int i = 0; i < n; ++i)
      if (keep(seed, row, i)) dx[i] += dy[i] * s;
  }
};

// ---------------------------------------------------------------------------
// Gated recurrent cell. Update equations, in this exact convention:
//   z_t = sigmoid(Wz x_t + Uz h_{t-1} + bz)          (update gate)
//   r_t = sigmoid(Wr x_t + Ur h_{t-1} + br)          (reset gate)
//   n_t = tanh(Wn x_t + Un (r_t .* h_{t-1}) + bn)    (candidate)
//   h_t = (1 - z_t) .* h_{t-1} + z_t .* n_t
// ---------------------------------------------------------------------------

struct GruCell {
  int in = 0, hidden = 0;
  std::string Wz, Uz, bz, Wr, Ur, br, Wn, Un, bn;

  void build(ParamStore& ps, const std::string& prefix, int in_, int hidden_) {
    in = in_;
    hidden = hidden_;
    Wz = prefix + ".Wz"; Uz = prefix + ".Uz"; bz = prefix + ".bz";
    Wr = prefix + ".Wr"; Ur = prefix + ".Ur"; br = prefix + ".br";
    Wn = prefix + ".Wn"; Un = prefix + ".Un"; bn = prefix + ".bn";
    ps.add(Wz, {hidden, in}, Init::Glorot);
    ps.add(Uz, {hidden, hidden}, Init::Glorot);
    ps.add(bz, {hidden}, Init::Zeros);
    ps.add(Wr, {hidden, in}, Init::Glorot);
    ps.add(Ur, {hidden, hidden}, Init::Glorot);
    ps.add(br, {hidden}, Init::Zeros);
    ps.add(Wn, {hidden, in}, Init::Glorot);
    ps.add(Un, {hidden, hidden}, Init::Glorot);
    ps.add(bn, {hidden}, Init::Zeros);
  }

  struct StepCache {
    std::vector<double> x, h_prev, z, r, n;
  };

  void step(const ParamStore& ps, const double* x, const double* h_prev, double* h_out,
            StepCache* cache) const {
    std::vector<double> z(hidden), r(hidden), n(hidden), rh(hidden);

    const Tensor& tWz = ps.at(Wz);
    const Tensor& tUz = ps.at(Uz);
    const Tensor& tbz = ps.at(bz);
    for (int i = 0; i < hidden; ++i) z[i] = tbz.v[i];
    nn::matvec_acc(tWz.v.data(), x, z.data(), hidden, in);
    nn::matvec_acc(tUz.v.data(), h_prev, z.data(), hidden, hidden);
    for (int i = 0; i < hidden; ++i) z[i] = nn::sigmoid(z[i]);

    const Tensor& tWr = ps.at(Wr);
    const Tensor& tUr = ps.at(Ur);
    const Tensor& tbr = ps.at(br);
    for (int i = 0; i < hidden; ++i) r[i] = tbr.v[i];
    nn::matvec_acc(tWr.v.data(), x, r.data(), hidden, in);
    nn::matvec_acc(tUr.v.data(), h_prev, r.data(), hidden, hidden);
    for (int i = 0; i < hidden; ++i) r[i] = nn::sigmoid(r[i]);

    for (int i = 0; i < hidden; ++i) rh[i] = r[i] * h_prev[i];
    const Tensor& tWn = ps.at(Wn);
    const Tensor& tUn = ps.at(Un);
    const Tensor& tbn = ps.at(bn);
    for (int i = 0; i < hidden; ++i) n[i] = tbn.v[i];
    nn::matvec_acc(tWn.v.data(), x, n.data(), hidden, in);
    nn::matvec_acc(tUn.v.data(), rh.data(), n.data(), hidden, hidden);
    for (int i = 0; i < hidden; ++i) n[i] = std::tanh(n[i]);

    for (int i = 0; i < hidden; ++i) h_out[i] = (1.0 - z[i]) * h_prev[i] + z[i] * n[i];

    if (cache) {
      cache->x.assign(x, x + in);
      cache->h_prev.assign(h_prev, h_prev + hidden);
      cache->z = std::move(z);
      cache->r = std::move(r);
      cache->n = std::move(n);
    }
  }

  // dh is the total gradient at h_t; accumulates into dx, dh_prev, g.
  void step_backward(const ParamStore& ps, const StepCache& c, const double* dh, double* dx,
                     double* dh_prev, GradStore& g) const {
    std::vector<double> dz_pre(hidden), dr_pre(hidden), dn_pre(hidden), drh(hidden, 0.0),
        rh(hidden);
    for (int i = 0; i < hidden; ++i) {
      const double dz = dh[i] * (c.n[i] - c.h_prev[i]);
      const double dn = dh[i] * c.z[i];
      dh_prev[i] += dh[i] * (1.0 - c.z[i]);
      dz_pre[i] = dz * c.z[i] * (1.0 - c.z[i]);
      dn_pre[i] = dn * (1.0 - c.n[i] * c.n[i]);
      rh[i] = c.r[i] * c.h_prev[i];
    }

    const Tensor& tUn = ps.at(Un);
    nn::matvecT_acc(tUn.v.data(), dn_pre.data(), drh.data(), hidden, hidden);
    for (int i = 0; i < hidden; ++i) {
      const double dr = drh[i] * c.h_prev[i];
      dh_prev[i] += drh[i] * c.r[i];
      dr_pre[i] = dr * c.r[i] * (1.0 - c.r[i]);
    }

    auto gate_back = [&](const std::string& Wn_, const std::string& Un_, const std::string& bn_,
                         const std::vector<double>& dpre, const double* u_input) {
      const Tensor& tW = ps.at(Wn_);
      const Tensor& tU = ps.at(Un_);
      nn::outer_acc(dpre.data(), c.x.data(), g.at(Wn_, tW.size()).data(), hidden, in);
      nn::outer_acc(dpre.data(), u_input, g.at(Un_, tU.size()).data(), hidden, hidden);
      auto& db = g.at(bn_, static_cast<size_t>(hidden));
      for (int i = 0; i < hidden; ++i) db[i] += dpre[i];
      if (dx) nn::matvecT_acc(tW.v.data(), dpre.data(), dx, hidden, in);
    };

    gate_back(Wn, Un, bn, dn_pre, rh.data());
    gate_back(Wz, Uz, bz, dz_pre, c.h_prev.data());
    gate_back(Wr, Ur, br, dr_pre, c.h_prev.data());

    const Tensor& tUz = ps.at(Uz);
    const Tensor& tUr = ps.at(Ur);
    nn::matvecT_acc(tUz.v.data(), dz_pre.data(), dh_prev, hidden, hidden);
    nn::matvecT_acc(tUr.v.data(), dr_pre.data(), dh_prev, hidden, hidden);
  }
};

// ---------------------------------------------------------------------------
// Network configuration shared by all blocks
// ---------------------------------------------------------------------------

struct EncoderConfig {
  int d_view = 32, d_motion = 32, d_base = 32;
  int k_bases = 4;
  int hidden = 64;
  double dropout = 0.1;
  std::string gelu = "erf";

  // The orthogonality loss takes M_proj . V, which ties the three widths.
  void validate() const {
    if (d_view != d_motion || d_motion != d_base)
      throw DegenerateConfiguration("d_view, d_motion, d_base must be equal");
    if (k_bases < 1) throw DegenerateConfiguration("k_bases must be >= 1");
    if (hidden < 1) throw DegenerateConfiguration("hidden must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw DegenerateConfiguration("dropout must be in [0, 1)");
    if (gelu != "erf") throw DegenerateConfiguration("unknown gelu variant: " + gelu);
  }
};

// ---------------------------------------------------------------------------
// Motion encoder: GRU over normalized keypoint rows, plus two linear heads
// (motion feature row M_init and coarse 3D keypoints).
// ---------------------------------------------------------------------------

struct MotionEncoder {
  int in = kKeypointWidth, hidden = 0, d_motion = 0;
  GruCell cell;
  Linear head_m, head_k;

  void build(ParamStore& ps, const std::string& prefix, const EncoderConfig& cfg) {
    hidden = cfg.hidden;
    d_motion = cfg.d_motion;
    cell.build(ps, prefix + ".gru", in, hidden);
    head_m.build(ps, prefix + ".head_m", hidden, d_motion);
    head_k.build(ps, prefix + ".head_k", hidden, kKeypointWidth);
  }

  struct Cache {
    std::vector<GruCell::StepCache> steps;
    FeatureMatrix h;  // T x hidden
  };

  // x: T x 51 normalized keypoints; h0 null means zeros. Emits M (T x
  // d_motion), K (T x 51 coarse camera-frame joints), final hidden state.
  void forward(const ParamStore& ps, const FeatureMatrix& x, const double* h0, FeatureMatrix& M,
               FeatureMatrix& K, std::vector<double>* h_final, Cache* cache) const {
    if (x.cols != in) throw ShapeMismatch("motion encoder expects input width 51");
    const int T = x.rows;
    M = FeatureMatrix(T, d_motion);
    K = FeatureMatrix(T, kKeypointWidth);
    if (cache) {
      cache->steps.resize(T);
      cache->h = FeatureMatrix(T, hidden);
    }
    std::vector<double> h(hidden, 0.0);
    if (h0) h.assign(h0, h0 + hidden);
    std::vector<double> h_next(hidden);
    for (int t = 0; t < T; ++t) {
      cell.step(ps, x.row(t), h.data(), h_next.data(), cache ? &cache->steps[t] : nullptr);
      h.swap(h_next);
      if (cache) std::memcpy(cache->h.row(t), h.data(), sizeof(double) * hidden);
      head_m.forward(ps, h.data(), M.row(t));
      head_k.forward(ps, h.data(), K.row(t));
    }
    if (h_final) *h_final = h;
  }

  // BPTT. dM / dK may have zero rows when a head is unused. dx optional.
  void backward(const ParamStore& ps, const Cache& cache, const FeatureMatrix& dM,
                const FeatureMatrix& dK, FeatureMatrix* dx, GradStore& g) const {
    const int T = static_cast<int>(cache.steps.size());
    std::vector<double> dh(hidden, 0.0), dh_prev(hidden);
    for (int t = T - 1; t >= 0; --t) {
      const double* h_t = cache.h.row(t);
      if (dM.rows == T) head_m.backward(ps, h_t, dM.row(t), dh.data(), g);
      if (dK.rows == T) head_k.backward(ps, h_t, dK.row(t), dh.data(), g);
      std::fill(dh_prev.begin(), dh_prev.end(), 0.0);
      cell.step_backward(ps, cache.steps[t], dh.data(), dx ? dx->row(t) : nullptr,
                         dh_prev.data(), g);
      dh.swap(dh_prev);
    }
  }
};

// ---------------------------------------------------------------------------
// View encoder: four [FC -> LayerNorm -> GELU -> Dropout] stages applied per
// row; dropout masks are seeded and active only in training mode.
// ---------------------------------------------------------------------------

struct ViewEncoder {
  static constexpr int kLayers = 4;
  int in = kViewFeatDim, hidden = 0, out = 0;
  Linear fc[kLayers];
  LayerNorm ln[kLayers];
  Dropout dp[kLayers];

  void build(ParamStore& ps, const std::string& prefix, const EncoderConfig& cfg) {
    hidden = cfg.hidden;
    out = cfg.d_view;
    for (int l = 0; l < kLayers; ++l) {
      const int li = l == 0 ? in : hidden;
      const int lo = l == kLayers - 1 ? out : hidden;
      fc[l].build(ps, prefix + ".fc" + std::to_string(l), li, lo);
      ln[l].build(ps, prefix + ".ln" + std::to_string(l), lo);
      dp[l].rate = cfg.dropout;
      dp[l].tag = 0x7E11 + static_cast<uint64_t>(l);
    }
  }

  struct Cache {
    FeatureMatrix x_in[kLayers];    // layer inputs
    FeatureMatrix xhat[kLayers];    // layer-norm caches
    FeatureMatrix ln_out[kLayers];  // pre-GELU activations
    std::vector<double> istd[kLayers];
    bool train = false;
    uint64_t drop_seed = 0;
  };

  FeatureMatrix forward(const ParamStore& ps, const FeatureMatrix& f, Cache* cache, bool train,
                        uint64_t drop_seed) const {
    if (f.cols != in) throw ShapeMismatch("view encoder expects input width 10");
    const int T = f.rows;
    FeatureMatrix cur = f;
    if (cache) {
      cache->train = train;
      cache->drop_seed = drop_seed;
    }
    for (int l = 0; l < kLayers; ++l) {
      const int lo = fc[l].out;
      FeatureMatrix next(T, lo);
      if (cache) {
        cache->x_in[l] = cur;
        cache->xhat[l] = FeatureMatrix(T, lo);
        cache->ln_out[l] = FeatureMatrix(T, lo);
        cache->istd[l].assign(T, 0.0);
      }
      std::vector<double> lin(lo), lnv(lo), act(lo), xhat(lo);
      for (int t = 0; t < T; ++t) {
        fc[l].forward(ps, cur.row(t), lin.data());
        double istd = 0.0;
        ln[l].forward(ps, lin.data(), lnv.data(), xhat.data(), &istd);
        for (int i = 0; i < lo; ++i) act[i] = nn::gelu(lnv[i]);
        dp[l].forward(drop_seed, t, act.data(), next.row(t), lo, train);
        if (cache) {
          std::memcpy(cache->xhat[l].row(t), xhat.data(), sizeof(double) * lo);
          std::memcpy(cache->ln_out[l].row(t), lnv.data(), sizeof(double) * lo);
          cache->istd[l][t] = istd;
        }
      }
      cur = std::move(next);
    }
    return cur;
  }

  // dV: T x out. d_f (optional, T x 10) chains the gradient into the
  // geometric features and through them into the motion encoder.
  void backward(const ParamStore& ps, const Cache& cache, const FeatureMatrix& dV,
                FeatureMatrix* d_f, GradStore& g) const {
    const int T = dV.rows;
    FeatureMatrix d_cur = dV;
    for (int l = kLayers - 1; l >= 0; --l) {
      const int lo = fc[l].out;
      const int li = fc[l].in;
      FeatureMatrix d_prev(T, li);
      std::vector<double> d_act(lo), d_ln(lo), d_lin(lo);
      for (int t = 0; t < T; ++t) {
        std::fill(d_act.begin(), d_act.end(), 0.0);
        dp[l].backward(cache.drop_seed, t, d_cur.row(t), d_act.data(), lo, cache.train);
        const double* lnv = cache.ln_out[l].row(t);
        for (int i = 0; i < lo; ++i) d_ln[i] = d_act[i] * nn::gelu_grad(lnv[i]);
        std::fill(d_lin.begin(), d_lin.end(), 0.0);
        ln[l].backward(ps, cache.xhat[l].row(t), cache.istd[l][t], d_ln.data(), d_lin.data(), g);
        fc[l].backward(ps, cache.x_in[l].row(t), d_lin.data(), d_prev.row(t), g);
      }
      d_cur = std::move(d_prev);
    }
    if (d_f) *d_f = std::move(d_cur);
  }
};

// ---------------------------------------------------------------------------
// Basis generator: per-frame linear map V row -> K raw basis vectors.
// ---------------------------------------------------------------------------

struct BasisGenerator {
  int d_view = 0, d_base = 0, k = 0;
  Linear lin;

  void build(ParamStore& ps, const std::string& prefix, const EncoderConfig& cfg) {
    d_view = cfg.d_view;
    d_base = cfg.d_base;
    k = cfg.k_bases;
    lin.build(ps, prefix + ".lin", d_view, k * d_base);
  }

  // Output row t holds the K vectors back to back (k * d_base columns).
  FeatureMatrix forward(const ParamStore& ps, const FeatureMatrix& V) const {
    if (V.cols != d_view) throw ShapeMismatch("basis generator input width");
    FeatureMatrix raw(V.rows, k * d_base);
    for (int t = 0; t < V.rows; ++t) lin.forward(ps, V.row(t), raw.row(t));
    return raw;
  }

  void backward(const ParamStore& ps, const FeatureMatrix& V, const FeatureMatrix& d_raw,
                FeatureMatrix* dV, GradStore& g) const {
    for (int t = 0; t < V.rows; ++t)
      lin.backward(ps, V.row(t), d_raw.row(t), dV ? dV->row(t) : nullptr, g);
  }
};

// ---------------------------------------------------------------------------
// Pose decoder: GRU over projected motion rows, conditioned on the mean of
// up to W previously decoded keypoint frames (zeros at cold start). The
// feedback makes the backward pass distribute each context gradient back
// onto the frames inside its window.
// ---------------------------------------------------------------------------

struct PoseDecoder {
  int d_in = 0, hidden = 0, window = 16;
  GruCell cell;
  Linear head;

  void build(ParamStore& ps, const std::string& prefix, const EncoderConfig& cfg, int window_) {
    d_in = cfg.d_motion;
    hidden = cfg.hidden;
    window = window_;
    cell.build(ps, prefix + ".gru", d_in + kKeypointWidth, hidden);
    head.build(ps, prefix + ".head", hidden, kKeypointWidth);
  }

  struct Cache {
    std::vector<GruCell::StepCache> steps;
    FeatureMatrix h;    // T x hidden
    FeatureMatrix out;  // T x 51
  };

  // Single step used by both the batch unroll and the streaming engine.
  // ctx must hold the 51-wide context summary (mean of buffered outputs).
  void step(const ParamStore& ps, const double* m_row, const double* ctx, const double* h_prev,
            double* h_out, double* out_row, GruCell::StepCache* cache) const {
    std::vector<double> x(static_cast<size_t>(d_in) + kKeypointWidth);
    std::memcpy(x.data(), m_row, sizeof(double) * d_in);
    std::memcpy(x.data() + d_in, ctx, sizeof(double) * kKeypointWidth);
    cell.step(ps, x.data(), h_prev, h_out, cache);
    head.forward(ps, h_out, out_row);
  }

  // Batch unroll sharing per-frame arithmetic order with the streaming path:
  // context at frame t is the mean of outputs t-m .. t-1 summed oldest
  // first, m = min(t, window).
  FeatureMatrix forward(const ParamStore& ps, const FeatureMatrix& M, Cache* cache) const {
    if (M.cols != d_in) throw ShapeMismatch("pose decoder input width");
    const int T = M.rows;
    FeatureMatrix out(T, kKeypointWidth);
    if (cache) {
      cache->steps.resize(T);
      cache->h = FeatureMatrix(T, hidden);
      cache->out = FeatureMatrix(T, kKeypointWidth);
    }
    std::vector<double> h(hidden, 0.0), h_next(hidden), ctx(kKeypointWidth);
    for (int t = 0; t < T; ++t) {
      std::fill(ctx.begin(), ctx.end(), 0.0);
      const int m = std::min(t, window);
      for (int j = t - m; j < t; ++j)
        for (int i = 0; i < kKeypointWidth; ++i) ctx[i] += out.at(j, i);
      if (m > 0)
        for (int i = 0; i < kKeypointWidth; ++i) ctx[i] /= m;
      step(ps, M.row(t), ctx.data(), h.data(), h_next.data(), out.row(t),
           cache ? &cache->steps[t] : nullptr);
      h.swap(h_next);
      if (cache) std::memcpy(cache->h.row(t), h.data(), sizeof(double) * hidden);
    }
    if (cache) cache->out = out;
    return out;
  }

  // d_out: T x 51 direct gradient on decoded keypoints. Output feedback means
  // frame t's output also enters contexts of frames t+1 .. t+window; those
  // contributions are pushed backward through dout_fb.
  void backward(const ParamStore& ps, const Cache& cache, const FeatureMatrix& d_out,
                FeatureMatrix& dM, GradStore& g) const {
    const int T = static_cast<int>(cache.steps.size());
    dM = FeatureMatrix(T, d_in);
    FeatureMatrix dout_fb(T, kKeypointWidth);
    std::vector<double> dh(hidden, 0.0), dh_prev(hidden);
    std::vector<double> g_out(kKeypointWidth), dx(static_cast<size_t>(d_in) + kKeypointWidth);
    for (int t = T - 1; t >= 0; --t) {
      for (int i = 0; i < kKeypointWidth; ++i) g_out[i] = d_out.at(t, i) + dout_fb.at(t, i);
      head.backward(ps, cache.h.row(t), g_out.data(), dh.data(), g);
      std::fill(dh_prev.begin(), dh_prev.end(), 0.0);
      std::fill(dx.begin(), dx.end(), 0.0);
      cell.step_backward(ps, cache.steps[t], dh.data(), dx.data(), dh_prev.data(), g);
      std::memcpy(dM.row(t), dx.data(), sizeof(double) * d_in);
      const int m = std::min(t, window);
      if (m > 0) {
        const double inv_m = 1.0 / m;
        for (int j = t - m; j < t; ++j)
          for (int i = 0; i < kKeypointWidth; ++i)
            dout_fb.at(j, i) += dx[d_in + i] * inv_m;
      }
      dh.swap(dh_prev);
    }
  }
};

}  // namespace movid
