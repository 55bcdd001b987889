#include "bachprop/nn.hpp"

#include <algorithm>
#include <cmath>

namespace bachprop::nn {

void gemm_accum(const Matrix& a, const double* w, int k, int n, Matrix& c) {
  if (a.cols != k || c.rows != a.rows || c.cols != n)
    throw DimensionMismatch("gemm_accum " + std::to_string(a.rows) + "x" + std::to_string(a.cols));
  for (int i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (int x = 0; x < k; ++x) {
      const double av = arow[x];
      if (av == 0.0) continue;
      const double* wrow = w + static_cast<std::size_t>(x) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * wrow[j];
    }
  }
}

void gemm_accum_t1(const Matrix& a, const Matrix& d, double* g, int k, int n) {
  if (a.cols != k || d.cols != n || a.rows != d.rows)
    throw DimensionMismatch("gemm_accum_t1");
  for (int b = 0; b < a.rows; ++b) {
    const double* arow = a.row(b);
    const double* drow = d.row(b);
    for (int x = 0; x < k; ++x) {
      const double av = arow[x];
      if (av == 0.0) continue;
      double* grow = g + static_cast<std::size_t>(x) * n;
      for (int j = 0; j < n; ++j) grow[j] += av * drow[j];
    }
  }
}

void gemm_accum_t2(const Matrix& d, const double* w, int k, int n, Matrix& c) {
  if (d.cols != n || c.cols != k || c.rows != d.rows)
    throw DimensionMismatch("gemm_accum_t2");
  for (int i = 0; i < d.rows; ++i) {
    const double* drow = d.row(i);
    double* crow = c.row(i);
    for (int x = 0; x < k; ++x) {
      const double* wrow = w + static_cast<std::size_t>(x) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += drow[j] * wrow[j];
      crow[x] += acc;
    }
  }
}

void add_row_bias(Matrix& m, const double* bias) {
  for (int i = 0; i < m.rows; ++i) {
    double* row = m.row(i);
    for (int j = 0; j < m.cols; ++j) row[j] += bias[j];
  }
}

void colsum_accum(const Matrix& m, double* out) {
  for (int i = 0; i < m.rows; ++i) {
    const double* row = m.row(i);
    for (int j = 0; j < m.cols; ++j) out[j] += row[j];
  }
}

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void gather_rows_accum(const double* w, int n, const OneHotBatch& x, Matrix& pre) {
  for (int i = 0; i < x.rows; ++i) {
    double* prow = pre.row(i);
    for (const int col : x.row(i)) {
      const double* wrow = w + static_cast<std::size_t>(col) * n;
      for (int j = 0; j < n; ++j) prow[j] += wrow[j];
    }
  }
}

void scatter_rows_accum(double* g, int n, const OneHotBatch& x, const Matrix& d) {
  for (int i = 0; i < x.rows; ++i) {
    const double* drow = d.row(i);
    for (const int col : x.row(i)) {
      double* grow = g + static_cast<std::size_t>(col) * n;
      for (int j = 0; j < n; ++j) grow[j] += drow[j];
    }
  }
}

struct GruWork {
  Matrix z, r, c, q;
};

void gru_core(const double* theta, const GruRefs& g, const Matrix& hprev, Matrix& hout,
              GruCache* cache, GruWork& wk,
              const std::function<void(const TensorRef&, Matrix&)>& add_input_term) {
  const int b = hprev.rows;
  const int h = g.width;
  if (hprev.cols != h) throw DimensionMismatch("gru state width");

  wk.z.resize(b, h);
  wk.r.resize(b, h);
  wk.c.resize(b, h);
  wk.q.resize(b, h);

  add_input_term(g.wz, wk.z);
  gemm_accum(hprev, theta + g.uz.off, h, h, wk.z);
  add_row_bias(wk.z, theta + g.bz.off);
  for (double& x : wk.z.v) x = sigmoid(x);

  add_input_term(g.wr, wk.r);
  gemm_accum(hprev, theta + g.ur.off, h, h, wk.r);
  add_row_bias(wk.r, theta + g.br.off);
  for (double& x : wk.r.v) x = sigmoid(x);

  for (std::size_t i = 0; i < wk.q.v.size(); ++i) wk.q.v[i] = wk.r.v[i] * hprev.v[i];

  add_input_term(g.wc, wk.c);
  gemm_accum(wk.q, theta + g.uc.off, h, h, wk.c);
  add_row_bias(wk.c, theta + g.bc.off);
  for (double& x : wk.c.v) x = std::tanh(x);

  hout.resize(b, h);
  for (std::size_t i = 0; i < hout.v.size(); ++i) {
    hout.v[i] = (1.0 - wk.z.v[i]) * hprev.v[i] + wk.z.v[i] * wk.c.v[i];
  }

  if (cache) {
    cache->hprev = hprev;
    cache->z = std::move(wk.z);
    cache->r = std::move(wk.r);
    cache->c = std::move(wk.c);
  }
}

// Shared backward math; input-gradient hooks differ between flavors.
struct GruBackOut {
  Matrix dpz, dpr, dpc;
};

void gru_backward_core(const double* theta, const GruRefs& g, const GruCache& cache,
                       const Matrix& dh_out, double* grad, Matrix& dhprev, GruBackOut& out) {
  const int b = dh_out.rows;
  const int h = g.width;
  const Matrix& hprev = cache.hprev;

  Matrix q(b, h);
  for (std::size_t i = 0; i < q.v.size(); ++i) q.v[i] = cache.r.v[i] * hprev.v[i];

  out.dpz.resize(b, h);
  out.dpr.resize(b, h);
  out.dpc.resize(b, h);
  Matrix dq(b, h);

  for (std::size_t i = 0; i < dh_out.v.size(); ++i) {
    const double go = dh_out.v[i];
    const double z = cache.z.v[i];
    const double c = cache.c.v[i];
    const double dz = go * (c - hprev.v[i]);
    const double dc = go * z;
    out.dpz.v[i] = dz * z * (1.0 - z);
    out.dpc.v[i] = dc * (1.0 - c * c);
  }
  // dq = dpc Uc^T
  gemm_accum_t2(out.dpc, theta + g.uc.off, h, h, dq);
  for (std::size_t i = 0; i < dq.v.size(); ++i) {
    const double r = cache.r.v[i];
    const double dr = dq.v[i] * hprev.v[i];
    out.dpr.v[i] = dr * r * (1.0 - r);
  }

  // direct state paths
  for (std::size_t i = 0; i < dhprev.v.size(); ++i) {
    dhprev.v[i] += dh_out.v[i] * (1.0 - cache.z.v[i]) + dq.v[i] * cache.r.v[i];
  }
  gemm_accum_t2(out.dpz, theta + g.uz.off, h, h, dhprev);
  gemm_accum_t2(out.dpr, theta + g.ur.off, h, h, dhprev);

  // recurrent weight grads
  gemm_accum_t1(hprev, out.dpz, grad + g.uz.off, h, h);
  gemm_accum_t1(hprev, out.dpr, grad + g.ur.off, h, h);
  gemm_accum_t1(q, out.dpc, grad + g.uc.off, h, h);
  colsum_accum(out.dpz, grad + g.bz.off);
  colsum_accum(out.dpr, grad + g.br.off);
  colsum_accum(out.dpc, grad + g.bc.off);
}

}  // namespace

GruRefs alloc_gru(Layout& layout, int in, int width) {
  GruRefs g;
  g.in = in;
  g.width = width;
  g.wz = layout.alloc(in, width);
  g.uz = layout.alloc(width, width);
  g.bz = layout.alloc(1, width);
  g.wr = layout.alloc(in, width);
  g.ur = layout.alloc(width, width);
  g.br = layout.alloc(1, width);
  g.wc = layout.alloc(in, width);
  g.uc = layout.alloc(width, width);
  g.bc = layout.alloc(1, width);
  return g;
}

void gru_forward(const double* theta, const GruRefs& g, const Matrix& x, const Matrix& hprev,
                 Matrix& hout, GruCache* cache) {
  if (x.cols != g.in) throw DimensionMismatch("gru input width");
  if (x.rows != hprev.rows) throw DimensionMismatch("gru batch size");
  GruWork wk;
  gru_core(theta, g, hprev, hout, cache, wk, [&](const TensorRef& w, Matrix& pre) {
    gemm_accum(x, theta + w.off, g.in, g.width, pre);
  });
}

void gru_forward_onehot(const double* theta, const GruRefs& g, const OneHotBatch& x,
                        const Matrix& hprev, Matrix& hout, GruCache* cache) {
  if (x.rows != hprev.rows) throw DimensionMismatch("gru batch size");
  GruWork wk;
  gru_core(theta, g, hprev, hout, cache, wk, [&](const TensorRef& w, Matrix& pre) {
    gather_rows_accum(theta + w.off, g.width, x, pre);
  });
}

void gru_backward(const double* theta, const GruRefs& g, const GruCache& cache, const Matrix& x,
                  const Matrix& dh_out, double* grad, Matrix& dx, Matrix& dhprev) {
  GruBackOut out;
  gru_backward_core(theta, g, cache, dh_out, grad, dhprev, out);
  gemm_accum_t1(x, out.dpz, grad + g.wz.off, g.in, g.width);
  gemm_accum_t1(x, out.dpr, grad + g.wr.off, g.in, g.width);
  gemm_accum_t1(x, out.dpc, grad + g.wc.off, g.in, g.width);
  gemm_accum_t2(out.dpz, theta + g.wz.off, g.in, g.width, dx);
  gemm_accum_t2(out.dpr, theta + g.wr.off, g.in, g.width, dx);
  gemm_accum_t2(out.dpc, theta + g.wc.off, g.in, g.width, dx);
}

void gru_backward_onehot(const double* theta, const GruRefs& g, const GruCache& cache,
                         const OneHotBatch& x, const Matrix& dh_out, double* grad,
                         Matrix& dhprev) {
  GruBackOut out;
  gru_backward_core(theta, g, cache, dh_out, grad, dhprev, out);
  scatter_rows_accum(grad + g.wz.off, g.width, x, out.dpz);
  scatter_rows_accum(grad + g.wr.off, g.width, x, out.dpr);
  scatter_rows_accum(grad + g.wc.off, g.width, x, out.dpc);
}

GruCell make_gru_cell(int in, int width) {
  GruCell cell;
  Layout layout;
  cell.refs = alloc_gru(layout, in, width);
  cell.theta.assign(layout.total(), 0.0);
  return cell;
}

std::vector<double> gru_step(const GruCell& cell, std::span<const double> x,
                             std::span<const double> h) {
  if (static_cast<int>(x.size()) != cell.refs.in)
    throw DimensionMismatch("gru_step input size");
  if (static_cast<int>(h.size()) != cell.refs.width)
    throw DimensionMismatch("gru_step state size");
  Matrix xm(1, cell.refs.in), hm(1, cell.refs.width), hout;
  std::copy(x.begin(), x.end(), xm.v.begin());
  std::copy(h.begin(), h.end(), hm.v.begin());
  gru_forward(cell.theta.data(), cell.refs, xm, hm, hout, nullptr);
  return hout.v;
}

AffineRefs alloc_affine(Layout& layout, int in, int out) {
  AffineRefs a;
  a.in = in;
  a.out = out;
  a.w = layout.alloc(in, out);
  a.b = layout.alloc(1, out);
  return a;
}

void affine_forward(const double* theta, const AffineRefs& a, const Matrix& x, Matrix& y) {
  if (x.cols != a.in) throw DimensionMismatch("affine input width");
  y.resize(x.rows, a.out);
  gemm_accum(x, theta + a.w.off, a.in, a.out, y);
  add_row_bias(y, theta + a.b.off);
}

void affine_forward_onehot(const double* theta, const AffineRefs& a, const OneHotBatch& x,
                           Matrix& y) {
  y.resize(x.rows, a.out);
  gather_rows_accum(theta + a.w.off, a.out, x, y);
  add_row_bias(y, theta + a.b.off);
}

void affine_backward(const double* theta, const AffineRefs& a, const Matrix& x, const Matrix& dy,
                     double* grad, Matrix* dx) {
  gemm_accum_t1(x, dy, grad + a.w.off, a.in, a.out);
  colsum_accum(dy, grad + a.b.off);
  if (dx) gemm_accum_t2(dy, theta + a.w.off, a.in, a.out, *dx);
}

void affine_backward_onehot(const double* theta, const AffineRefs& a, const OneHotBatch& x,
                            const Matrix& dy, double* grad) {
  (void)theta;
  scatter_rows_accum(grad + a.w.off, a.out, x, dy);
  colsum_accum(dy, grad + a.b.off);
}

void relu_inplace(Matrix& m) {
  for (double& x : m.v) x = x > 0.0 ? x : 0.0;
}

void relu_backward_inplace(const Matrix& activated, Matrix& dm) {
  for (std::size_t i = 0; i < dm.v.size(); ++i) {
    if (activated.v[i] <= 0.0) dm.v[i] = 0.0;
  }
}

std::vector<double> softmax(std::span<const double> v, double temperature) {
  if (temperature <= 0.0) throw DimensionMismatch("temperature must be positive");
  for (const double x : v) {
    if (!std::isfinite(x)) throw NonFiniteInput();
  }
  std::vector<double> p(v.begin(), v.end());
  double mx = p[0];
  for (const double x : p) mx = std::max(mx, x);
  double sum = 0.0;
  for (double& x : p) {
    x = std::exp((x - mx) / temperature);
    sum += x;
  }
  for (double& x : p) x /= sum;
  return p;
}

void softmax_rows_inplace(Matrix& m) {
  for (int i = 0; i < m.rows; ++i) {
    double* row = m.row(i);
    double mx = row[0];
    for (int j = 1; j < m.cols; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < m.cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < m.cols; ++j) row[j] /= sum;
  }
}

double cross_entropy(std::span<const double> p, int target) {
  if (target < 0 || target >= static_cast<int>(p.size()))
    throw IndexOutOfRange("cross_entropy target " + std::to_string(target));
  return -std::log(std::max(p[static_cast<std::size_t>(target)], 1e-12));
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (const double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

int argmax(std::span<const double> v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

void adam_update(AdamState& state, std::span<double> params, std::span<const double> grads) {
  if (params.size() != grads.size()) throw DimensionMismatch("adam param/grad sizes");
  if (state.m.size() != params.size()) {
    if (!state.m.empty()) throw DimensionMismatch("adam moment sizes");
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  state.step += 1;
  const double corr1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / corr1;
    const double vhat = state.v[i] / corr2;
    params[i] -= state.alpha * mhat / (std::sqrt(vhat) + state.epsilon);
  }
}

double clip_global_norm(std::span<double> grads, double max_norm) {
  double sq = 0.0;
  for (const double g : grads) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (double& g : grads) g *= scale;
  }
  return norm;
}

GradCheckReport grad_check(const std::function<double(std::span<const double>)>& loss,
                           std::span<const double> params, std::span<const double> analytic,
                           double tolerance, double fd_step) {
  if (params.size() != analytic.size()) throw DimensionMismatch("grad_check sizes");
  std::vector<double> work(params.begin(), params.end());
  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t i = 0; i < work.size(); ++i) {
    const double saved = work[i];
    work[i] = saved + fd_step;
    const double up = loss(work);
    work[i] = saved - fd_step;
    const double down = loss(work);
    work[i] = saved;
    const double numeric = (up - down) / (2.0 * fd_step);
    const double ga = analytic[i];
    const double denom = std::max({std::abs(ga), std::abs(numeric), 1e-8});
    const double rel = std::abs(ga - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

void init_uniform(std::span<double> theta, const TensorRef& ref, Rng& rng) {
  const double s = std::sqrt(6.0 / (ref.rows + ref.cols));
  for (std::size_t i = 0; i < ref.size(); ++i) {
    theta[ref.off + i] = rng.uniform(-s, s);
  }
}

}  // namespace bachprop::nn
