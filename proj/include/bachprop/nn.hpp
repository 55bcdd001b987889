#ifndef BACHPROP_NN_HPP
#define BACHPROP_NN_HPP

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bachprop/rng.hpp"

namespace bachprop::nn {

struct DimensionMismatch : std::runtime_error {
  explicit DimensionMismatch(const std::string& msg)
      : std::runtime_error("dimension mismatch: " + msg) {}
};
struct IndexOutOfRange : std::runtime_error {
  explicit IndexOutOfRange(const std::string& msg)
      : std::runtime_error("index out of range: " + msg) {}
};
struct NonFiniteInput : std::runtime_error {
  NonFiniteInput() : std::runtime_error("non-finite input") {}
};

// Row-major dense matrix of doubles. All training math is double precision;
// the networks are small and exact reproducibility matters more than speed.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}

  double& operator()(int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return v[static_cast<std::size_t>(i) * cols + j]; }
  double* row(int i) { return v.data() + static_cast<std::size_t>(i) * cols; }
  const double* row(int i) const { return v.data() + static_cast<std::size_t>(i) * cols; }
  void zero() { std::fill(v.begin(), v.end(), 0.0); }
  void resize(int r, int c) {
    rows = r;
    cols = c;
    v.assign(static_cast<std::size_t>(r) * c, 0.0);
  }
};

// Handle into a flat parameter buffer. Models keep all weights in one
// std::vector<double> so the optimizer, checkpointing, and finite-difference
// checks can treat parameters uniformly.
struct TensorRef {
  std::size_t off = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

class Layout {
public:
  TensorRef alloc(int rows, int cols) {
    TensorRef ref{total_, rows, cols};
    total_ += ref.size();
    return ref;
  }
  std::size_t total() const { return total_; }

private:
  std::size_t total_ = 0;
};

// Batched rows of active one-hot column indices (CSR-style). Inputs to the
// first layer are concatenated one-hot vectors, so their matrix products
// reduce to row gathers.
struct OneHotBatch {
  int rows = 0;
  std::vector<int> idx;
  std::vector<int> start;  // rows + 1 offsets into idx

  void reset(int nrows) {
    rows = nrows;
    idx.clear();
    start.assign(static_cast<std::size_t>(nrows) + 1, 0);
  }
  std::span<const int> row(int i) const {
    return {idx.data() + start[static_cast<std::size_t>(i)],
            idx.data() + start[static_cast<std::size_t>(i) + 1]};
  }
};

// C += A (B x K) * W (K x N), W given as a raw row-major block
void gemm_accum(const Matrix& a, const double* w, int k, int n, Matrix& c);
// C += A^T (K x B)^T... i.e. W-grad: G (K x N) += A(B x K)^T * D(B x N)
void gemm_accum_t1(const Matrix& a, const Matrix& d, double* g, int k, int n);
// C (B x K) += D (B x N) * W^T, W row-major (K x N)
void gemm_accum_t2(const Matrix& d, const double* w, int k, int n, Matrix& c);

void add_row_bias(Matrix& m, const double* bias);
void colsum_accum(const Matrix& m, double* out);

// ---------------------------------------------------------------------------
// GRU cell
//
//   z = sigmoid(x Wz + h Uz + bz)
//   r = sigmoid(x Wr + h Ur + br)
//   c = tanh(x Wc + (r .* h) Uc + bc)
//   h' = (1 - z) .* h + z .* c
// ---------------------------------------------------------------------------

struct GruRefs {
  TensorRef wz, uz, bz, wr, ur, br, wc, uc, bc;
  int in = 0;
  int width = 0;
};

GruRefs alloc_gru(Layout& layout, int in, int width);

struct GruCache {
  Matrix hprev, z, r, c;
};

// Dense-input step. `cache` may be null when no backward pass will follow.
void gru_forward(const double* theta, const GruRefs& g, const Matrix& x, const Matrix& hprev,
                 Matrix& hout, GruCache* cache);
// One-hot-input step; x rows list the active columns.
void gru_forward_onehot(const double* theta, const GruRefs& g, const OneHotBatch& x,
                        const Matrix& hprev, Matrix& hout, GruCache* cache);

// dh_out is consumed; dx and dhprev are accumulated into.
void gru_backward(const double* theta, const GruRefs& g, const GruCache& cache, const Matrix& x,
                  const Matrix& dh_out, double* grad, Matrix& dx, Matrix& dhprev);
void gru_backward_onehot(const double* theta, const GruRefs& g, const GruCache& cache,
                         const OneHotBatch& x, const Matrix& dh_out, double* grad,
                         Matrix& dhprev);

// Single-vector convenience around the batched step, with its own storage.
struct GruCell {
  std::vector<double> theta;
  GruRefs refs;
};

GruCell make_gru_cell(int in, int width);
std::vector<double> gru_step(const GruCell& cell, std::span<const double> x,
                             std::span<const double> h);

// ---------------------------------------------------------------------------
// Affine layers
// ---------------------------------------------------------------------------

struct AffineRefs {
  TensorRef w, b;
  int in = 0;
  int out = 0;
};

AffineRefs alloc_affine(Layout& layout, int in, int out);

void affine_forward(const double* theta, const AffineRefs& a, const Matrix& x, Matrix& y);
void affine_forward_onehot(const double* theta, const AffineRefs& a, const OneHotBatch& x,
                           Matrix& y);
void affine_backward(const double* theta, const AffineRefs& a, const Matrix& x, const Matrix& dy,
                     double* grad, Matrix* dx);
void affine_backward_onehot(const double* theta, const AffineRefs& a, const OneHotBatch& x,
                            const Matrix& dy, double* grad);

void relu_inplace(Matrix& m);
// dm := dm masked by activation > 0
void relu_backward_inplace(const Matrix& activated, Matrix& dm);

// ---------------------------------------------------------------------------
// Softmax / losses
// ---------------------------------------------------------------------------

// Max-subtracted softmax of v/temperature. Throws NonFiniteInput on NaN/inf.
std::vector<double> softmax(std::span<const double> v, double temperature = 1.0);
void softmax_rows_inplace(Matrix& m);

// -ln p[target] with p clamped below at 1e-12.
double cross_entropy(std::span<const double> p, int target);

double entropy(std::span<const double> p);

int argmax(std::span<const double> v);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<double> m;
  std::vector<double> v;
};

// Standard bias-corrected Adam step over flat buffers; lazily sizes moments.
void adam_update(AdamState& state, std::span<double> params, std::span<const double> grads);

// Scales grads so the global L2 norm is at most max_norm; returns the norm
// observed before clipping.
double clip_global_norm(std::span<double> grads, double max_norm);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double tolerance = 0.0;
  bool passed = false;
};

// Central finite differences against the supplied analytic gradient.
GradCheckReport grad_check(const std::function<double(std::span<const double>)>& loss,
                           std::span<const double> params, std::span<const double> analytic,
                           double tolerance, double fd_step = 1e-5);

// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)); biases stay zero.
void init_uniform(std::span<double> theta, const TensorRef& ref, Rng& rng);

}  // namespace bachprop::nn

#endif
