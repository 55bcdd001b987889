#include "bachprop/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace bachprop::model {

Variant variant_from_string(const std::string& name) {
  if (name == "bachprop") return Variant::bachprop;
  if (name == "indepbp") return Variant::indepbp;
  if (name == "mlp") return Variant::mlp;
  if (name == "polydac") return Variant::polydac;
  throw UnknownVariant(name);
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::bachprop: return "bachprop";
    case Variant::indepbp: return "indepbp";
    case Variant::mlp: return "mlp";
    case Variant::polydac: return "polydac";
  }
  throw UnknownVariant("corrupt variant tag");
}

namespace {

HeadRefs alloc_head(nn::Layout& layout, int in, int out) {
  HeadRefs head;
  head.relu = nn::alloc_affine(layout, in, out);
  head.out = nn::alloc_affine(layout, out, out);
  return head;
}

}  // namespace

ModelParams build_variant(Variant kind, const Dictionaries& dicts, const ModelDims& dims) {
  ModelParams mp;
  mp.dicts = dicts;
  ModelArch& arch = mp.arch;
  arch.variant = kind;
  arch.dims = dims;
  arch.l_dt = dicts.size_dt();
  arch.l_t = dicts.size_t_();
  arch.l_p = dicts.size_p();
  arch.l_total = arch.l_dt + arch.l_t + arch.l_p;

  nn::Layout layout;
  const int w = dims.gru_width;
  switch (kind) {
    case Variant::bachprop:
      arch.gru.push_back(nn::alloc_gru(layout, arch.l_total, w));
      arch.gru.push_back(nn::alloc_gru(layout, w, w));
      arch.gru.push_back(nn::alloc_gru(layout, w, w));
      arch.head_dt = alloc_head(layout, w, arch.l_dt);
      arch.head_t = alloc_head(layout, 2 * w + arch.l_dt, arch.l_t);
      arch.head_p = alloc_head(layout, 3 * w + arch.l_dt + arch.l_t, arch.l_p);
      break;
    case Variant::indepbp:
      arch.gru.push_back(nn::alloc_gru(layout, arch.l_total, w));
      arch.gru.push_back(nn::alloc_gru(layout, w, w));
      arch.gru.push_back(nn::alloc_gru(layout, w, w));
      arch.head_dt = alloc_head(layout, w, arch.l_dt);
      arch.head_t = alloc_head(layout, w, arch.l_t);
      arch.head_p = alloc_head(layout, w, arch.l_p);
      break;
    case Variant::mlp: {
      const int m = dims.mlp_width;
      const int din = dims.mlp_context * arch.l_total + arch.l_dt + arch.l_t;
      arch.trunk.push_back(nn::alloc_affine(layout, din, m));
      arch.trunk.push_back(nn::alloc_affine(layout, m, m));
      arch.trunk.push_back(nn::alloc_affine(layout, m, m));
      arch.head_dt = alloc_head(layout, m, arch.l_dt);
      arch.head_t = alloc_head(layout, m, arch.l_t);
      arch.head_p = alloc_head(layout, m, arch.l_p);
      break;
    }
    case Variant::polydac: {
      const std::array<int, 3> extra{0, arch.l_dt, arch.l_dt + arch.l_t};
      for (int f = 0; f < 3; ++f) {
        const int wf = dims.polydac_widths[static_cast<std::size_t>(f)];
        arch.gru.push_back(
            nn::alloc_gru(layout, arch.l_total + extra[static_cast<std::size_t>(f)], wf));
        arch.gru.push_back(nn::alloc_gru(layout, wf, wf));
        arch.gru.push_back(nn::alloc_gru(layout, wf, wf));
      }
      arch.head_dt = alloc_head(layout, 3 * dims.polydac_widths[0], arch.l_dt);
      arch.head_t = alloc_head(layout, 3 * dims.polydac_widths[1], arch.l_t);
      arch.head_p = alloc_head(layout, 3 * dims.polydac_widths[2], arch.l_p);
      break;
    }
  }
  arch.total_params = layout.total();
  mp.theta.assign(arch.total_params, 0.0);
  return mp;
}

ModelParams build_variant(const std::string& kind, const Dictionaries& dicts,
                          const ModelDims& dims) {
  return build_variant(variant_from_string(kind), dicts, dims);
}

void init_params(ModelParams& params, Rng& rng) {
  auto init_gru = [&](const nn::GruRefs& g) {
    nn::init_uniform(params.theta, g.wz, rng);
    nn::init_uniform(params.theta, g.uz, rng);
    nn::init_uniform(params.theta, g.wr, rng);
    nn::init_uniform(params.theta, g.ur, rng);
    nn::init_uniform(params.theta, g.wc, rng);
    nn::init_uniform(params.theta, g.uc, rng);
  };
  auto init_head = [&](const HeadRefs& h) {
    nn::init_uniform(params.theta, h.relu.w, rng);
    nn::init_uniform(params.theta, h.out.w, rng);
  };
  for (const auto& g : params.arch.gru) init_gru(g);
  for (const auto& a : params.arch.trunk) nn::init_uniform(params.theta, a.w, rng);
  init_head(params.arch.head_dt);
  init_head(params.arch.head_t);
  init_head(params.arch.head_p);
}

// ---------------------------------------------------------------------------
// Shared forward/backward building blocks
// ---------------------------------------------------------------------------

namespace {

struct HeadCache {
  nn::Matrix input, a1, probs;
};

void head_forward(const double* theta, const HeadRefs& head, HeadCache& hc) {
  nn::affine_forward(theta, head.relu, hc.input, hc.a1);
  nn::relu_inplace(hc.a1);
  nn::affine_forward(theta, head.out, hc.a1, hc.probs);
  nn::softmax_rows_inplace(hc.probs);
}

struct EvalStats {
  double ce = 0.0;
  long valid = 0;
  long correct_dt = 0, correct_t = 0, correct_p = 0;
};

int row_argmax(const nn::Matrix& m, int row) {
  const double* r = m.row(row);
  int best = 0;
  for (int j = 1; j < m.cols; ++j) {
    if (r[j] > r[best]) best = j;
  }
  return best;
}

void tally(const nn::Matrix& probs, const std::vector<int>& targets,
           const std::vector<char>& valid, double& ce, long& correct) {
  for (int r = 0; r < probs.rows; ++r) {
    if (!valid[static_cast<std::size_t>(r)]) continue;
    const int tg = targets[static_cast<std::size_t>(r)];
    ce -= std::log(std::max(probs(r, tg), 1e-12));
    if (row_argmax(probs, r) == tg) ++correct;
  }
}

// dlogits = (probs - onehot(target)) * scale on valid rows, 0 elsewhere
void head_backward(const double* theta, const HeadRefs& head, const HeadCache& hc,
                   const std::vector<int>& targets, const std::vector<char>& valid, double scale,
                   double* grad, nn::Matrix& dinput) {
  nn::Matrix dlogits = hc.probs;
  for (int r = 0; r < dlogits.rows; ++r) {
    double* row = dlogits.row(r);
    if (!valid[static_cast<std::size_t>(r)]) {
      std::fill(row, row + dlogits.cols, 0.0);
      continue;
    }
    row[targets[static_cast<std::size_t>(r)]] -= 1.0;
    for (int j = 0; j < dlogits.cols; ++j) row[j] *= scale;
  }
  nn::Matrix da1(dlogits.rows, head.relu.out);
  nn::affine_backward(theta, head.out, hc.a1, dlogits, grad, &da1);
  nn::relu_backward_inplace(hc.a1, da1);
  dinput.resize(dlogits.rows, head.relu.in);
  nn::affine_backward(theta, head.relu, hc.input, da1, grad, &dinput);
}

void copy_block(const nn::Matrix& src, nn::Matrix& dst, int col0) {
  for (int r = 0; r < src.rows; ++r) {
    const double* s = src.row(r);
    double* d = dst.row(r) + col0;
    std::copy(s, s + src.cols, d);
  }
}

// dst (B x n) += src[:, col0 : col0+n]
void add_block(const nn::Matrix& src, int col0, nn::Matrix& dst) {
  for (int r = 0; r < dst.rows; ++r) {
    const double* s = src.row(r) + col0;
    double* d = dst.row(r);
    for (int j = 0; j < dst.cols; ++j) d[j] += s[j];
  }
}

void set_onehot_block(nn::Matrix& dst, int col0, const std::vector<int>& idx,
                      const std::vector<char>& valid) {
  for (int r = 0; r < dst.rows; ++r) {
    if (valid[static_cast<std::size_t>(r)]) dst(r, col0 + idx[static_cast<std::size_t>(r)]) = 1.0;
  }
}

// One window of prediction positions over a group of encoded songs. Position
// pos predicts pos + 1; it is valid for a song while pos + 1 is in range.
struct Window {
  std::vector<const EncodedScore*> songs;
  int t0 = 0;
  int t1 = 0;
};

struct StepData {
  std::vector<int> tg_dt, tg_t, tg_p;
  std::vector<char> valid;
};

void gather_step(const Window& win, int pos, StepData& sd, nn::OneHotBatch* x, int l_dt, int l_t) {
  const int b = static_cast<int>(win.songs.size());
  sd.tg_dt.assign(static_cast<std::size_t>(b), 0);
  sd.tg_t.assign(static_cast<std::size_t>(b), 0);
  sd.tg_p.assign(static_cast<std::size_t>(b), 0);
  sd.valid.assign(static_cast<std::size_t>(b), 0);
  if (x) x->reset(b);
  for (int r = 0; r < b; ++r) {
    const EncodedScore& s = *win.songs[static_cast<std::size_t>(r)];
    const auto len = static_cast<int>(s.length());
    if (x && pos < len) {
      x->idx.push_back(s.dt[static_cast<std::size_t>(pos)]);
      x->idx.push_back(l_dt + s.t[static_cast<std::size_t>(pos)]);
      x->idx.push_back(l_dt + l_t + s.p[static_cast<std::size_t>(pos)]);
    }
    if (x) x->start[static_cast<std::size_t>(r) + 1] = static_cast<int>(x->idx.size());
    if (pos + 1 < len) {
      sd.valid[static_cast<std::size_t>(r)] = 1;
      sd.tg_dt[static_cast<std::size_t>(r)] = s.dt[static_cast<std::size_t>(pos) + 1];
      sd.tg_t[static_cast<std::size_t>(r)] = s.t[static_cast<std::size_t>(pos) + 1];
      sd.tg_p[static_cast<std::size_t>(r)] = s.p[static_cast<std::size_t>(pos) + 1];
    }
  }
}

// ---------------------------------------------------------------------------
// Per-variant window runners. A runner owns the recurrent state for one song
// group and the caches of the most recent forward window.
// ---------------------------------------------------------------------------

class Runner {
public:
  virtual ~Runner() = default;
  virtual void reset(int batch) = 0;
  virtual void forward(const Window& win, EvalStats& stats) = 0;
  virtual void backward(const Window& win, double scale, double* grad) = 0;
};

class StackRunner : public Runner {
public:
  // shared three-layer GRU stack over one-hot notes: bachprop and indepbp
  StackRunner(const ModelParams& mp) : mp_(mp) {}

  void reset(int batch) override {
    const int w = mp_.arch.dims.gru_width;
    h1_.resize(batch, w);
    h2_.resize(batch, w);
    h3_.resize(batch, w);
  }

  void forward(const Window& win, EvalStats& stats) override {
    const ModelArch& arch = mp_.arch;
    const double* theta = mp_.theta.data();
    const int nsteps = win.t1 - win.t0;
    steps_.resize(static_cast<std::size_t>(nsteps));
    const bool conditioned = arch.variant == Variant::bachprop;
    const int w = arch.dims.gru_width;
    for (int k = 0; k < nsteps; ++k) {
      Step& st = steps_[static_cast<std::size_t>(k)];
      gather_step(win, win.t0 + k, st.data, &st.x, arch.l_dt, arch.l_t);
      nn::gru_forward_onehot(theta, arch.gru[0], st.x, h1_, st.h1, &st.g1);
      h1_ = st.h1;
      nn::gru_forward(theta, arch.gru[1], st.h1, h2_, st.h2, &st.g2);
      h2_ = st.h2;
      nn::gru_forward(theta, arch.gru[2], st.h2, h3_, st.h3, &st.g3);
      h3_ = st.h3;

      const int b = st.h1.rows;
      if (conditioned) {
        st.hd_dt.input = st.h1;
        st.hd_t.input.resize(b, 2 * w + arch.l_dt);
        copy_block(st.h1, st.hd_t.input, 0);
        copy_block(st.h2, st.hd_t.input, w);
        set_onehot_block(st.hd_t.input, 2 * w, st.data.tg_dt, st.data.valid);
        st.hd_p.input.resize(b, 3 * w + arch.l_dt + arch.l_t);
        copy_block(st.h1, st.hd_p.input, 0);
        copy_block(st.h2, st.hd_p.input, w);
        copy_block(st.h3, st.hd_p.input, 2 * w);
        set_onehot_block(st.hd_p.input, 3 * w, st.data.tg_dt, st.data.valid);
        set_onehot_block(st.hd_p.input, 3 * w + arch.l_dt, st.data.tg_t, st.data.valid);
      } else {
        st.hd_dt.input = st.h1;
        st.hd_t.input = st.h2;
        st.hd_p.input = st.h3;
      }
      head_forward(theta, arch.head_dt, st.hd_dt);
      head_forward(theta, arch.head_t, st.hd_t);
      head_forward(theta, arch.head_p, st.hd_p);
      tally(st.hd_dt.probs, st.data.tg_dt, st.data.valid, stats.ce, stats.correct_dt);
      tally(st.hd_t.probs, st.data.tg_t, st.data.valid, stats.ce, stats.correct_t);
      tally(st.hd_p.probs, st.data.tg_p, st.data.valid, stats.ce, stats.correct_p);
      for (const char v : st.data.valid) stats.valid += v;
    }
  }

  void backward(const Window& win, double scale, double* grad) override {
    const ModelArch& arch = mp_.arch;
    const double* theta = mp_.theta.data();
    const int nsteps = win.t1 - win.t0;
    const int b = static_cast<int>(win.songs.size());
    const int w = arch.dims.gru_width;
    const bool conditioned = arch.variant == Variant::bachprop;

    nn::Matrix dnext1(b, w), dnext2(b, w), dnext3(b, w);
    nn::Matrix dh1, dh2, dh3;
    nn::Matrix din;
    for (int k = nsteps - 1; k >= 0; --k) {
      Step& st = steps_[static_cast<std::size_t>(k)];
      dh1 = dnext1;
      dh2 = dnext2;
      dh3 = dnext3;
      if (conditioned) {
        head_backward(theta, arch.head_p, st.hd_p, st.data.tg_p, st.data.valid, scale, grad, din);
        add_block(din, 0, dh1);
        add_block(din, w, dh2);
        add_block(din, 2 * w, dh3);
        head_backward(theta, arch.head_t, st.hd_t, st.data.tg_t, st.data.valid, scale, grad, din);
        add_block(din, 0, dh1);
        add_block(din, w, dh2);
        head_backward(theta, arch.head_dt, st.hd_dt, st.data.tg_dt, st.data.valid, scale, grad,
                      din);
        add_block(din, 0, dh1);
      } else {
        head_backward(theta, arch.head_dt, st.hd_dt, st.data.tg_dt, st.data.valid, scale, grad,
                      din);
        add_block(din, 0, dh1);
        head_backward(theta, arch.head_t, st.hd_t, st.data.tg_t, st.data.valid, scale, grad, din);
        add_block(din, 0, dh2);
        head_backward(theta, arch.head_p, st.hd_p, st.data.tg_p, st.data.valid, scale, grad, din);
        add_block(din, 0, dh3);
      }
      dnext3.zero();
      nn::gru_backward(theta, arch.gru[2], st.g3, st.h2, dh3, grad, dh2, dnext3);
      dnext2.zero();
      nn::gru_backward(theta, arch.gru[1], st.g2, st.h1, dh2, grad, dh1, dnext2);
      dnext1.zero();
      nn::gru_backward_onehot(theta, arch.gru[0], st.g1, st.x, dh1, grad, dnext1);
    }
  }

private:
  struct Step {
    nn::OneHotBatch x;
    StepData data;
    nn::GruCache g1, g2, g3;
    nn::Matrix h1, h2, h3;
    HeadCache hd_dt, hd_t, hd_p;
  };

  const ModelParams& mp_;
  nn::Matrix h1_, h2_, h3_;
  std::vector<Step> steps_;
};

class PolyDacRunner : public Runner {
public:
  PolyDacRunner(const ModelParams& mp) : mp_(mp) {}

  void reset(int batch) override {
    for (int f = 0; f < 3; ++f) {
      const int w = mp_.arch.dims.polydac_widths[static_cast<std::size_t>(f)];
      for (int l = 0; l < 3; ++l) {
        h_[static_cast<std::size_t>(f)][static_cast<std::size_t>(l)].resize(batch, w);
      }
    }
  }

  void forward(const Window& win, EvalStats& stats) override {
    const ModelArch& arch = mp_.arch;
    const double* theta = mp_.theta.data();
    const int nsteps = win.t1 - win.t0;
    steps_.resize(static_cast<std::size_t>(nsteps));
    for (int k = 0; k < nsteps; ++k) {
      Step& st = steps_[static_cast<std::size_t>(k)];
      gather_step(win, win.t0 + k, st.data, nullptr, arch.l_dt, arch.l_t);
      for (int f = 0; f < 3; ++f) {
        Net& net = st.net[static_cast<std::size_t>(f)];
        build_input(win, win.t0 + k, f, st.data, net.x);
        const int w = arch.dims.polydac_widths[static_cast<std::size_t>(f)];
        auto& hs = h_[static_cast<std::size_t>(f)];
        nn::gru_forward_onehot(theta, arch.gru[static_cast<std::size_t>(3 * f)], net.x, hs[0],
                               net.a1, &net.g1);
        hs[0] = net.a1;
        nn::gru_forward(theta, arch.gru[static_cast<std::size_t>(3 * f + 1)], net.a1, hs[1],
                        net.a2, &net.g2);
        hs[1] = net.a2;
        nn::gru_forward(theta, arch.gru[static_cast<std::size_t>(3 * f + 2)], net.a2, hs[2],
                        net.a3, &net.g3);
        hs[2] = net.a3;
        net.head.input.resize(net.a1.rows, 3 * w);
        copy_block(net.a1, net.head.input, 0);
        copy_block(net.a2, net.head.input, w);
        copy_block(net.a3, net.head.input, 2 * w);
        head_forward(theta, head_for(f), net.head);
      }
      tally(st.net[0].head.probs, st.data.tg_dt, st.data.valid, stats.ce, stats.correct_dt);
      tally(st.net[1].head.probs, st.data.tg_t, st.data.valid, stats.ce, stats.correct_t);
      tally(st.net[2].head.probs, st.data.tg_p, st.data.valid, stats.ce, stats.correct_p);
      for (const char v : st.data.valid) stats.valid += v;
    }
  }

  void backward(const Window& win, double scale, double* grad) override {
    const ModelArch& arch = mp_.arch;
    const double* theta = mp_.theta.data();
    const int nsteps = win.t1 - win.t0;
    const int b = static_cast<int>(win.songs.size());
    for (int f = 0; f < 3; ++f) {
      const int w = arch.dims.polydac_widths[static_cast<std::size_t>(f)];
      nn::Matrix dnext1(b, w), dnext2(b, w), dnext3(b, w);
      nn::Matrix da1, da2, da3, din;
      for (int k = nsteps - 1; k >= 0; --k) {
        Step& st = steps_[static_cast<std::size_t>(k)];
        Net& net = st.net[static_cast<std::size_t>(f)];
        da1 = dnext1;
        da2 = dnext2;
        da3 = dnext3;
        const auto& targets = f == 0 ? st.data.tg_dt : (f == 1 ? st.data.tg_t : st.data.tg_p);
        head_backward(theta, head_for(f), net.head, targets, st.data.valid, scale, grad, din);
        add_block(din, 0, da1);
        add_block(din, w, da2);
        add_block(din, 2 * w, da3);
        dnext3.zero();
        nn::gru_backward(theta, arch.gru[static_cast<std::size_t>(3 * f + 2)], net.g3, net.a2,
                         da3, grad, da2, dnext3);
        dnext2.zero();
        nn::gru_backward(theta, arch.gru[static_cast<std::size_t>(3 * f + 1)], net.g2, net.a1,
                         da2, grad, da1, dnext2);
        dnext1.zero();
        nn::gru_backward_onehot(theta, arch.gru[static_cast<std::size_t>(3 * f)], net.g1, net.x,
                                da1, grad, dnext1);
      }
    }
  }

private:
  struct Net {
    nn::OneHotBatch x;
    nn::GruCache g1, g2, g3;
    nn::Matrix a1, a2, a3;
    HeadCache head;
  };
  struct Step {
    StepData data;
    std::array<Net, 3> net;
  };

  const HeadRefs& head_for(int f) const {
    return f == 0 ? mp_.arch.head_dt : (f == 1 ? mp_.arch.head_t : mp_.arch.head_p);
  }

  // note[n] one-hots plus the already-known features of note n+1
  void build_input(const Window& win, int pos, int f, const StepData& sd, nn::OneHotBatch& x) {
    const ModelArch& arch = mp_.arch;
    const int b = static_cast<int>(win.songs.size());
    x.reset(b);
    for (int r = 0; r < b; ++r) {
      const EncodedScore& s = *win.songs[static_cast<std::size_t>(r)];
      const auto len = static_cast<int>(s.length());
      if (pos < len) {
        x.idx.push_back(s.dt[static_cast<std::size_t>(pos)]);
        x.idx.push_back(arch.l_dt + s.t[static_cast<std::size_t>(pos)]);
        x.idx.push_back(arch.l_dt + arch.l_t + s.p[static_cast<std::size_t>(pos)]);
        if (sd.valid[static_cast<std::size_t>(r)]) {
          if (f >= 1) x.idx.push_back(arch.l_total + sd.tg_dt[static_cast<std::size_t>(r)]);
          if (f >= 2)
            x.idx.push_back(arch.l_total + arch.l_dt + sd.tg_t[static_cast<std::size_t>(r)]);
        }
      }
      x.start[static_cast<std::size_t>(r) + 1] = static_cast<int>(x.idx.size());
    }
  }

  const ModelParams& mp_;
  std::array<std::array<nn::Matrix, 3>, 3> h_;  // [feature net][layer]
  std::vector<Step> steps_;
};

class MlpRunner : public Runner {
public:
  MlpRunner(const ModelParams& mp) : mp_(mp) {}

  void reset(int batch) override { batch_ = batch; }

  void forward(const Window& win, EvalStats& stats) override {
    const ModelArch& arch = mp_.arch;
    const double* theta = mp_.theta.data();
    const int nsteps = win.t1 - win.t0;
    steps_.resize(static_cast<std::size_t>(nsteps));
    for (int k = 0; k < nsteps; ++k) {
      Step& st = steps_[static_cast<std::size_t>(k)];
      gather_step(win, win.t0 + k, st.data, nullptr, arch.l_dt, arch.l_t);
      for (int f = 0; f < 3; ++f) {
        Pass& pass = st.pass[static_cast<std::size_t>(f)];
        build_input(win, win.t0 + k, f, st.data, pass.x);
        nn::affine_forward_onehot(theta, arch.trunk[0], pass.x, pass.a1);
        nn::relu_inplace(pass.a1);
        nn::affine_forward(theta, arch.trunk[1], pass.a1, pass.a2);
        nn::relu_inplace(pass.a2);
        nn::affine_forward(theta, arch.trunk[2], pass.a2, pass.a3);
        nn::relu_inplace(pass.a3);
        pass.head.input = pass.a3;
        head_forward(theta, head_for(f), pass.head);
      }
      tally(st.pass[0].head.probs, st.data.tg_dt, st.data.valid, stats.ce, stats.correct_dt);
      tally(st.pass[1].head.probs, st.data.tg_t, st.data.valid, stats.ce, stats.correct_t);
      tally(st.pass[2].head.probs, st.data.tg_p, st.data.valid, stats.ce, stats.correct_p);
      for (const char v : st.data.valid) stats.valid += v;
    }
  }

  void backward(const Window& win, double scale, double* grad) override {
    const ModelArch& arch = mp_.arch;
    const double* theta = mp_.theta.data();
    const int nsteps = win.t1 - win.t0;
    nn::Matrix dout, da2, da1;
    for (int k = nsteps - 1; k >= 0; --k) {
      Step& st = steps_[static_cast<std::size_t>(k)];
      for (int f = 0; f < 3; ++f) {
        Pass& pass = st.pass[static_cast<std::size_t>(f)];
        const auto& targets = f == 0 ? st.data.tg_dt : (f == 1 ? st.data.tg_t : st.data.tg_p);
        head_backward(theta, head_for(f), pass.head, targets, st.data.valid, scale, grad, dout);
        nn::relu_backward_inplace(pass.a3, dout);
        da2.resize(dout.rows, arch.dims.mlp_width);
        nn::affine_backward(theta, arch.trunk[2], pass.a2, dout, grad, &da2);
        nn::relu_backward_inplace(pass.a2, da2);
        da1.resize(dout.rows, arch.dims.mlp_width);
        nn::affine_backward(theta, arch.trunk[1], pass.a1, da2, grad, &da1);
        nn::relu_backward_inplace(pass.a1, da1);
        nn::affine_backward_onehot(theta, arch.trunk[0], pass.x, da1, grad);
      }
    }
  }

private:
  struct Pass {
    nn::OneHotBatch x;
    nn::Matrix a1, a2, a3;
    HeadCache head;
  };
  struct Step {
    StepData data;
    std::array<Pass, 3> pass;
  };

  const HeadRefs& head_for(int f) const {
    return f == 0 ? mp_.arch.head_dt : (f == 1 ? mp_.arch.head_t : mp_.arch.head_p);
  }

  // the most recent `context` notes, oldest first, missing slots zero, plus
  // the masked conditioning slots for note n+1
  void build_input(const Window& win, int pos, int f, const StepData& sd, nn::OneHotBatch& x) {
    const ModelArch& arch = mp_.arch;
    const int ctx = arch.dims.mlp_context;
    const int b = static_cast<int>(win.songs.size());
    x.reset(b);
    for (int r = 0; r < b; ++r) {
      const EncodedScore& s = *win.songs[static_cast<std::size_t>(r)];
      const auto len = static_cast<int>(s.length());
      for (int slot = 0; slot < ctx; ++slot) {
        const int src = pos - (ctx - 1) + slot;
        if (src < 0 || src >= len) continue;
        const int base = slot * arch.l_total;
        x.idx.push_back(base + s.dt[static_cast<std::size_t>(src)]);
        x.idx.push_back(base + arch.l_dt + s.t[static_cast<std::size_t>(src)]);
        x.idx.push_back(base + arch.l_dt + arch.l_t + s.p[static_cast<std::size_t>(src)]);
      }
      if (sd.valid[static_cast<std::size_t>(r)]) {
        const int cond = ctx * arch.l_total;
        if (f >= 1) x.idx.push_back(cond + sd.tg_dt[static_cast<std::size_t>(r)]);
        if (f >= 2) x.idx.push_back(cond + arch.l_dt + sd.tg_t[static_cast<std::size_t>(r)]);
      }
      x.start[static_cast<std::size_t>(r) + 1] = static_cast<int>(x.idx.size());
    }
  }

  const ModelParams& mp_;
  int batch_ = 0;
  std::vector<Step> steps_;
};

std::unique_ptr<Runner> make_runner(const ModelParams& mp) {
  switch (mp.arch.variant) {
    case Variant::bachprop:
    case Variant::indepbp:
      return std::make_unique<StackRunner>(mp);
    case Variant::polydac:
      return std::make_unique<PolyDacRunner>(mp);
    case Variant::mlp:
      return std::make_unique<MlpRunner>(mp);
  }
  throw UnknownVariant("corrupt variant tag");
}

}  // namespace

// ---------------------------------------------------------------------------
// Sequential (single-song) interface
// ---------------------------------------------------------------------------

void reset_state(const ModelParams& params, HiddenState& state) {
  state.h.clear();
  for (const auto& g : params.arch.gru) state.h.emplace_back(1, g.width);
  state.recent.clear();
  state.pending = {-1, -1, -1};
  state.primed = false;
}

namespace {

void check_indices(const ModelArch& arch, int dt_idx, int t_idx, int p_idx) {
  if (dt_idx < 0 || dt_idx >= arch.l_dt) throw nn::IndexOutOfRange("dT index");
  if (t_idx < 0 || t_idx >= arch.l_t) throw nn::IndexOutOfRange("T index");
  if (p_idx < 0 || p_idx >= arch.l_p) throw nn::IndexOutOfRange("P index");
}

nn::OneHotBatch note_onehot(const ModelArch& arch, int dt_idx, int t_idx, int p_idx,
                            std::initializer_list<int> extra = {}) {
  nn::OneHotBatch x;
  x.reset(1);
  x.idx = {dt_idx, arch.l_dt + t_idx, arch.l_dt + arch.l_t + p_idx};
  for (const int e : extra) x.idx.push_back(e);
  x.start[1] = static_cast<int>(x.idx.size());
  return x;
}

void advance_stack(const ModelParams& mp, std::span<nn::Matrix> h, std::size_t g0,
                   const nn::OneHotBatch& x) {
  const double* theta = mp.theta.data();
  nn::Matrix tmp;
  nn::gru_forward_onehot(theta, mp.arch.gru[g0], x, h[0], tmp, nullptr);
  h[0] = tmp;
  nn::gru_forward(theta, mp.arch.gru[g0 + 1], h[0], h[1], tmp, nullptr);
  h[1] = tmp;
  nn::gru_forward(theta, mp.arch.gru[g0 + 2], h[1], h[2], tmp, nullptr);
  h[2] = tmp;
}

std::vector<double> head_eval_logits(const ModelParams& mp, const HeadRefs& head,
                                     const nn::Matrix& input) {
  nn::Matrix a1, logits;
  nn::affine_forward(mp.theta.data(), head.relu, input, a1);
  nn::relu_inplace(a1);
  nn::affine_forward(mp.theta.data(), head.out, a1, logits);
  return logits.v;
}

nn::Matrix concat_states(std::span<const nn::Matrix> states) {
  int cols = 0;
  for (const auto& m : states) cols += m.cols;
  nn::Matrix out(1, cols);
  int c0 = 0;
  for (const auto& m : states) {
    copy_block(m, out, c0);
    c0 += m.cols;
  }
  return out;
}

nn::Matrix trunk_out(const ModelParams& mp, const nn::Matrix& input) {
  const double* theta = mp.theta.data();
  nn::Matrix a1, a2, a3;
  nn::affine_forward(theta, mp.arch.trunk[0], input, a1);
  nn::relu_inplace(a1);
  nn::affine_forward(theta, mp.arch.trunk[1], a1, a2);
  nn::relu_inplace(a2);
  nn::affine_forward(theta, mp.arch.trunk[2], a2, a3);
  nn::relu_inplace(a3);
  return a3;
}

// mlp: context slots from the recent-note window, newest in the last slot
nn::Matrix mlp_input(const ModelParams& mp, const HiddenState& state, std::optional<int> dt,
                     std::optional<int> t) {
  const ModelArch& arch = mp.arch;
  const int ctx = arch.dims.mlp_context;
  nn::Matrix input(1, ctx * arch.l_total + arch.l_dt + arch.l_t);
  const auto n = static_cast<int>(state.recent.size());
  for (int slot = 0; slot < ctx; ++slot) {
    const int src = n - ctx + slot;
    if (src < 0) continue;
    const auto& note = state.recent[static_cast<std::size_t>(src)];
    const int base = slot * arch.l_total;
    input(0, base + note[0]) = 1.0;
    input(0, base + arch.l_dt + note[1]) = 1.0;
    input(0, base + arch.l_dt + arch.l_t + note[2]) = 1.0;
  }
  const int cond = ctx * arch.l_total;
  if (dt) input(0, cond + *dt) = 1.0;
  if (t) input(0, cond + arch.l_dt + *t) = 1.0;
  return input;
}

}  // namespace

void forward_note(const ModelParams& params, HiddenState& state, int dt_idx, int t_idx,
                  int p_idx) {
  const ModelArch& arch = params.arch;
  check_indices(arch, dt_idx, t_idx, p_idx);
  switch (arch.variant) {
    case Variant::bachprop:
    case Variant::indepbp:
      advance_stack(params, state.h, 0, note_onehot(arch, dt_idx, t_idx, p_idx));
      break;
    case Variant::mlp:
      state.recent.push_back({dt_idx, t_idx, p_idx});
      if (static_cast<int>(state.recent.size()) > arch.dims.mlp_context)
        state.recent.erase(state.recent.begin());
      break;
    case Variant::polydac: {
      if (state.primed) {
        const auto& pn = state.pending;
        auto xt = note_onehot(arch, pn[0], pn[1], pn[2], {arch.l_total + dt_idx});
        advance_stack(params, std::span<nn::Matrix>(state.h).subspan(3, 3), 3, xt);
        auto xp = note_onehot(arch, pn[0], pn[1], pn[2],
                              {arch.l_total + dt_idx, arch.l_total + arch.l_dt + t_idx});
        advance_stack(params, std::span<nn::Matrix>(state.h).subspan(6, 3), 6, xp);
      }
      advance_stack(params, std::span<nn::Matrix>(state.h).subspan(0, 3), 0,
                    note_onehot(arch, dt_idx, t_idx, p_idx));
      state.pending = {dt_idx, t_idx, p_idx};
      break;
    }
  }
  state.primed = true;
}

std::vector<double> dt_logits(const ModelParams& params, const HiddenState& state) {
  const ModelArch& arch = params.arch;
  switch (arch.variant) {
    case Variant::bachprop:
    case Variant::indepbp:
      return head_eval_logits(params, arch.head_dt, state.h[0]);
    case Variant::mlp:
      return head_eval_logits(params, arch.head_dt, trunk_out(params, mlp_input(params, state, {}, {})));
    case Variant::polydac:
      return head_eval_logits(params, arch.head_dt,
                              concat_states(std::span<const nn::Matrix>(state.h).subspan(0, 3)));
  }
  throw UnknownVariant("corrupt variant tag");
}

std::vector<double> t_logits(const ModelParams& params, const HiddenState& state, int dt_idx) {
  const ModelArch& arch = params.arch;
  if (dt_idx < 0 || dt_idx >= arch.l_dt) throw nn::IndexOutOfRange("dT index");
  switch (arch.variant) {
    case Variant::bachprop: {
      const int w = arch.dims.gru_width;
      nn::Matrix input(1, 2 * w + arch.l_dt);
      copy_block(state.h[0], input, 0);
      copy_block(state.h[1], input, w);
      input(0, 2 * w + dt_idx) = 1.0;
      return head_eval_logits(params, arch.head_t, input);
    }
    case Variant::indepbp:
      return head_eval_logits(params, arch.head_t, state.h[1]);
    case Variant::mlp:
      return head_eval_logits(params, arch.head_t,
                              trunk_out(params, mlp_input(params, state, dt_idx, {})));
    case Variant::polydac: {
      if (!state.primed) throw std::logic_error("t_logits before forward_note");
      std::array<nn::Matrix, 3> h{state.h[3], state.h[4], state.h[5]};
      const auto& pn = state.pending;
      auto x = note_onehot(arch, pn[0], pn[1], pn[2], {arch.l_total + dt_idx});
      advance_stack(params, h, 3, x);
      return head_eval_logits(params, arch.head_t, concat_states(h));
    }
  }
  throw UnknownVariant("corrupt variant tag");
}

std::vector<double> p_logits(const ModelParams& params, const HiddenState& state, int dt_idx,
                             int t_idx) {
  const ModelArch& arch = params.arch;
  if (dt_idx < 0 || dt_idx >= arch.l_dt) throw nn::IndexOutOfRange("dT index");
  if (t_idx < 0 || t_idx >= arch.l_t) throw nn::IndexOutOfRange("T index");
  switch (arch.variant) {
    case Variant::bachprop: {
      const int w = arch.dims.gru_width;
      nn::Matrix input(1, 3 * w + arch.l_dt + arch.l_t);
      copy_block(state.h[0], input, 0);
      copy_block(state.h[1], input, w);
      copy_block(state.h[2], input, 2 * w);
      input(0, 3 * w + dt_idx) = 1.0;
      input(0, 3 * w + arch.l_dt + t_idx) = 1.0;
      return head_eval_logits(params, arch.head_p, input);
    }
    case Variant::indepbp:
      return head_eval_logits(params, arch.head_p, state.h[2]);
    case Variant::mlp:
      return head_eval_logits(params, arch.head_p,
                              trunk_out(params, mlp_input(params, state, dt_idx, t_idx)));
    case Variant::polydac: {
      if (!state.primed) throw std::logic_error("p_logits before forward_note");
      std::array<nn::Matrix, 3> h{state.h[6], state.h[7], state.h[8]};
      const auto& pn = state.pending;
      auto x = note_onehot(arch, pn[0], pn[1], pn[2],
                           {arch.l_total + dt_idx, arch.l_total + arch.l_dt + t_idx});
      advance_stack(params, h, 6, x);
      return head_eval_logits(params, arch.head_p, concat_states(h));
    }
  }
  throw UnknownVariant("corrupt variant tag");
}

std::vector<double> head_probs(const ModelParams& params, const HiddenState& state,
                               std::optional<int> known_dt, std::optional<int> known_t) {
  if (known_t && !known_dt) throw std::invalid_argument("known T requires known dT");
  if (!known_dt) return nn::softmax(dt_logits(params, state));
  if (!known_t) return nn::softmax(t_logits(params, state, *known_dt));
  return nn::softmax(p_logits(params, state, *known_dt, *known_t));
}

// ---------------------------------------------------------------------------
// Evaluation and training
// ---------------------------------------------------------------------------

namespace {

SequenceEval finish_eval(const EvalStats& stats) {
  SequenceEval ev;
  ev.ce_total = stats.ce;
  ev.positions = stats.valid;
  ev.correct_dt = stats.correct_dt;
  ev.correct_t = stats.correct_t;
  ev.correct_p = stats.correct_p;
  if (stats.valid > 0) {
    ev.nll = stats.ce / (3.0 * static_cast<double>(stats.valid));
    ev.acc_dt = static_cast<double>(stats.correct_dt) / static_cast<double>(stats.valid);
    ev.acc_t = static_cast<double>(stats.correct_t) / static_cast<double>(stats.valid);
    ev.acc_p = static_cast<double>(stats.correct_p) / static_cast<double>(stats.valid);
  }
  return ev;
}

}  // namespace

SequenceEval sequence_nll(const ModelParams& params, const EncodedScore& enc) {
  if (enc.length() < 2) throw MalformedEncoding("sequence shorter than two positions");
  return windowed_eval(params, enc, static_cast<int>(enc.length()));
}

struct BatchRunner::Impl {
  explicit Impl(const ModelParams& params) : runner(make_runner(params)) {}
  std::unique_ptr<Runner> runner;
  Window window;
};

BatchRunner::BatchRunner(const ModelParams& params) : impl_(std::make_unique<Impl>(params)) {}
BatchRunner::~BatchRunner() = default;

void BatchRunner::reset(int batch) { impl_->runner->reset(batch); }

SequenceEval BatchRunner::forward(std::span<const EncodedScore* const> songs, int t0, int t1) {
  impl_->window.songs.assign(songs.begin(), songs.end());
  impl_->window.t0 = t0;
  impl_->window.t1 = t1;
  EvalStats stats;
  impl_->runner->forward(impl_->window, stats);
  return finish_eval(stats);
}

void BatchRunner::backward(double scale, std::span<double> grad_out) {
  impl_->runner->backward(impl_->window, scale, grad_out.data());
}

SequenceEval windowed_eval(const ModelParams& params, const EncodedScore& enc, int trunc_len) {
  if (enc.length() < 2) throw MalformedEncoding("sequence shorter than two positions");
  if (trunc_len < 1) throw std::invalid_argument("trunc_len must be positive");
  auto runner = make_runner(params);
  runner->reset(1);
  EvalStats stats;
  const int total = static_cast<int>(enc.length()) - 1;
  Window win;
  win.songs = {&enc};
  for (int t0 = 0; t0 < total; t0 += trunc_len) {
    win.t0 = t0;
    win.t1 = std::min(t0 + trunc_len, total);
    runner->forward(win, stats);
  }
  return finish_eval(stats);
}

std::string TrainLog::to_csv() const {
  std::string out =
      "epoch,train_nll,train_acc_dt,train_acc_t,train_acc_p,val_nll,val_acc_dt,val_acc_t,val_acc_"
      "p\n";
  char buf[64];
  auto fmt = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  for (const auto& row : epochs) {
    out += std::to_string(row.epoch) + "," + fmt(row.train_nll) + ",";
    if (row.has_train_acc) {
      out += fmt(row.train_acc_dt) + "," + fmt(row.train_acc_t) + "," + fmt(row.train_acc_p);
    } else {
      out += ",,";
    }
    out += ",";
    if (row.has_val) {
      out += fmt(row.val_nll) + "," + fmt(row.val_acc_dt) + "," + fmt(row.val_acc_t) + "," +
             fmt(row.val_acc_p);
    } else {
      out += ",,,";
    }
    out += "\n";
  }
  return out;
}

TrainResult train(const ModelParams& initial, const std::vector<EncodedScore>& corpus,
                  const TrainConfig& cfg, Rng& rng) {
  if (corpus.empty()) throw EmptyCorpus();
  if (cfg.batch_size < 1 || cfg.trunc_len < 2) throw std::invalid_argument("bad train config");
  if (cfg.val_fraction < 0.0 || cfg.val_fraction >= 1.0)
    throw std::invalid_argument("validation fraction out of range");

  ModelParams params = initial;
  const auto s = static_cast<int>(corpus.size());

  std::vector<int> order(static_cast<std::size_t>(s));
  for (int i = 0; i < s; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  int n_val = 0;
  if (cfg.val_fraction > 0.0 && s >= 2) {
    n_val = std::clamp(static_cast<int>(std::lround(cfg.val_fraction * s)), 1, s - 1);
  }
  const int n_train = s - n_val;
  std::vector<int> train_ids(order.begin(), order.begin() + n_train);
  std::vector<int> val_ids(order.begin() + n_train, order.end());

  // originals for per-epoch transposition
  std::vector<Score> train_scores;
  if (cfg.transpose) {
    train_scores.reserve(train_ids.size());
    for (const int i : train_ids)
      train_scores.push_back(decode(corpus[static_cast<std::size_t>(i)], params.dicts));
  }

  std::vector<EncodedScore> epoch_train;
  if (!cfg.transpose) {
    for (const int i : train_ids) epoch_train.push_back(corpus[static_cast<std::size_t>(i)]);
  }

  auto runner = make_runner(params);
  std::vector<double> grads(params.theta.size(), 0.0);
  nn::AdamState adam;
  adam.alpha = cfg.learning_rate;

  TrainLog log;
  std::vector<double> best_theta;
  double best_metric = -1.0;
  int best_epoch = -1;
  int since_improve = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (cfg.transpose) {
      epoch_train.clear();
      for (std::size_t i = 0; i < train_scores.size(); ++i) {
        epoch_train.push_back(encode(transpose_random(train_scores[i], params.dicts, rng),
                                     params.dicts));
      }
    }
    std::vector<int> perm(epoch_train.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    rng.shuffle(perm);

    EvalStats epoch_stats;
    for (std::size_t g0 = 0; g0 < perm.size(); g0 += static_cast<std::size_t>(cfg.batch_size)) {
      Window win;
      const std::size_t g1 = std::min(perm.size(), g0 + static_cast<std::size_t>(cfg.batch_size));
      int t_max = 0;
      for (std::size_t i = g0; i < g1; ++i) {
        const EncodedScore& song = epoch_train[static_cast<std::size_t>(perm[i])];
        win.songs.push_back(&song);
        t_max = std::max(t_max, static_cast<int>(song.length()) - 1);
      }
      runner->reset(static_cast<int>(win.songs.size()));
      for (int t0 = 0; t0 < t_max; t0 += cfg.trunc_len) {
        win.t0 = t0;
        win.t1 = std::min(t0 + cfg.trunc_len, t_max);
        EvalStats wstats;
        runner->forward(win, wstats);
        if (wstats.valid == 0) continue;
        std::fill(grads.begin(), grads.end(), 0.0);
        const double scale = 1.0 / (3.0 * static_cast<double>(wstats.valid));
        runner->backward(win, scale, grads.data());
        nn::clip_global_norm(grads, cfg.clip_norm);
        nn::adam_update(adam, params.theta, grads);
        epoch_stats.ce += wstats.ce;
        epoch_stats.valid += wstats.valid;
        epoch_stats.correct_dt += wstats.correct_dt;
        epoch_stats.correct_t += wstats.correct_t;
        epoch_stats.correct_p += wstats.correct_p;
      }
    }

    EpochStats row;
    row.epoch = epoch;
    row.train_nll = epoch_stats.valid > 0
                        ? epoch_stats.ce / (3.0 * static_cast<double>(epoch_stats.valid))
                        : 0.0;

    bool target_reached = false;
    if (cfg.target_train_accuracy > 0.0) {
      EvalStats clean;
      for (const int i : train_ids) {
        const SequenceEval ev = sequence_nll(params, corpus[static_cast<std::size_t>(i)]);
        clean.ce += ev.ce_total;
        clean.valid += ev.positions;
        clean.correct_dt += ev.correct_dt;
        clean.correct_t += ev.correct_t;
        clean.correct_p += ev.correct_p;
      }
      const SequenceEval ev = finish_eval(clean);
      row.has_train_acc = true;
      row.train_acc_dt = ev.acc_dt;
      row.train_acc_t = ev.acc_t;
      row.train_acc_p = ev.acc_p;
      target_reached = ev.acc_dt >= cfg.target_train_accuracy &&
                       ev.acc_t >= cfg.target_train_accuracy &&
                       ev.acc_p >= cfg.target_train_accuracy;
    }

    if (n_val > 0) {
      EvalStats vstats;
      for (const int i : val_ids) {
        const SequenceEval ev = sequence_nll(params, corpus[static_cast<std::size_t>(i)]);
        vstats.ce += ev.ce_total;
        vstats.valid += ev.positions;
        vstats.correct_dt += ev.correct_dt;
        vstats.correct_t += ev.correct_t;
        vstats.correct_p += ev.correct_p;
      }
      const SequenceEval ev = finish_eval(vstats);
      row.has_val = true;
      row.val_nll = ev.nll;
      row.val_acc_dt = ev.acc_dt;
      row.val_acc_t = ev.acc_t;
      row.val_acc_p = ev.acc_p;
      const double mean_acc = (ev.acc_dt + ev.acc_t + ev.acc_p) / 3.0;
      if (mean_acc > best_metric) {
        best_metric = mean_acc;
        best_theta = params.theta;
        best_epoch = epoch;
        since_improve = 0;
      } else {
        ++since_improve;
      }
    }

    log.epochs.push_back(row);
    if (target_reached) break;
    if (n_val > 0 && since_improve >= cfg.patience) break;
  }

  if (best_epoch > 0) {
    params.theta = best_theta;
    log.best_epoch = best_epoch;
  }
  return {std::move(params), std::move(log)};
}

}  // namespace bachprop::model
