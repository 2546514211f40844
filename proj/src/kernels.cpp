#include "qgs/kernels.hpp"

// GEMM stays single-threaded; the OpenMP kernels below own the parallelism.
#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qgs::kernels {

namespace {

std::atomic<Backend> g_backend{Backend::parallel};

template <class T>
inline T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

template <class T>
inline T silu(T x) {
  return x * sigmoid(x);
}

template <class T>
inline T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T{1} + x * (T{1} - s));
}

// Window of keys visible from query row t (begin inclusive, end exclusive).
inline void key_window(bool causal, std::size_t t, std::size_t len, std::size_t& begin,
                       std::size_t& end) {
  begin = 0;
  end = causal ? t + 1 : len;
}

// Window of query rows that see key row tau.
inline void query_window(bool causal, std::size_t tau, std::size_t len, std::size_t& begin,
                         std::size_t& end) {
  begin = causal ? tau : 0;
  end = len;
}

}  // namespace

void set_backend(Backend backend) { g_backend = backend; }
Backend backend() { return g_backend; }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Idx = Eigen::Index;
  Eigen::Map<Mat> out(c, static_cast<Idx>(m), static_cast<Idx>(n));
  if (!accumulate) out.setZero();
  if (m == 0 || n == 0 || k == 0) return;
  // A stored as (trans_a ? k x m : m x k), B as (trans_b ? n x k : k x n).
  Eigen::Map<const Mat> am(a, static_cast<Idx>(trans_a ? k : m), static_cast<Idx>(trans_a ? m : k));
  Eigen::Map<const Mat> bm(b, static_cast<Idx>(trans_b ? n : k), static_cast<Idx>(trans_b ? k : n));
  if (!trans_a && !trans_b) {
    out.noalias() += am * bm;
  } else if (trans_a && !trans_b) {
    out.noalias() += am.transpose() * bm;
  } else if (!trans_a && trans_b) {
    out.noalias() += am * bm.transpose();
  } else {
    out.noalias() += am.transpose() * bm.transpose();
  }
}

// ---------------------------------------------------------------------------
// Serial reference kernels.

namespace serial {

template <class T>
void decay_scan_forward(const SegmentLayout& layout, const T* s, const T* gamma, T* c) {
  const std::size_t d = layout.dim;
  for (std::size_t seg = 0; seg < layout.segments; ++seg) {
    const std::size_t base = seg * layout.seg_len * d;
    for (std::size_t t = 0; t < layout.seg_len; ++t) {
      const std::size_t row = base + t * d;
      for (std::size_t j = 0; j < d; ++j) {
        const T prev = t == 0 ? T{0} : c[row - d + j];
        c[row + j] = gamma[j] * prev + s[row + j];
      }
    }
  }
}

template <class T>
void decay_scan_backward(const SegmentLayout& layout, const T* c, const T* gamma, const T* dc,
                         T* ds, T* dgamma) {
  const std::size_t d = layout.dim;
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t seg = 0; seg < layout.segments; ++seg) {
      const std::size_t base = seg * layout.seg_len * d;
      T carry = 0;
      T partial = 0;
      for (std::size_t t = layout.seg_len; t-- > 0;) {
        const std::size_t idx = base + t * d + j;
        carry = dc[idx] + gamma[j] * carry;
        ds[idx] = carry;
        if (t > 0) partial += carry * c[idx - d];
      }
      dgamma[j] += partial;
    }
  }
}

template <class T>
void attention_forward(const AttentionShape& shape, const T* q, const T* k, const T* v, T* out) {
  const auto& lay = shape.layout;
  const std::size_t d = lay.dim;
  const std::size_t dh = d / shape.heads;
  const T ls = static_cast<T>(shape.logit_scale);
  const T os = static_cast<T>(shape.out_scale);
  std::vector<T> acc(dh);
  for (std::size_t seg = 0; seg < lay.segments; ++seg) {
    const std::size_t base = seg * lay.seg_len;
    for (std::size_t t = 0; t < lay.seg_len; ++t) {
      for (std::size_t h = 0; h < shape.heads; ++h) {
        const std::size_t off = h * dh;
        std::fill(acc.begin(), acc.end(), T{0});
        std::size_t b0, b1;
        key_window(shape.causal, t, lay.seg_len, b0, b1);
        for (std::size_t tau = b0; tau < b1; ++tau) {
          T dot = 0;
          for (std::size_t i = 0; i < dh; ++i) {
            dot += q[(base + t) * d + off + i] * k[(base + tau) * d + off + i];
          }
          const T w = silu(ls * dot);
          for (std::size_t i = 0; i < dh; ++i) acc[i] += w * v[(base + tau) * d + off + i];
        }
        for (std::size_t i = 0; i < dh; ++i) out[(base + t) * d + off + i] = os * acc[i];
      }
    }
  }
}

template <class T>
void attention_backward(const AttentionShape& shape, const T* q, const T* k, const T* v,
                        const T* dout, T* dq, T* dk, T* dv) {
  const auto& lay = shape.layout;
  const std::size_t d = lay.dim;
  const std::size_t dh = d / shape.heads;
  const T ls = static_cast<T>(shape.logit_scale);
  const T os = static_cast<T>(shape.out_scale);
  std::vector<T> acc_q(dh), acc_k(dh), acc_v(dh);
  for (std::size_t seg = 0; seg < lay.segments; ++seg) {
    const std::size_t base = seg * lay.seg_len;
    for (std::size_t h = 0; h < shape.heads; ++h) {
      const std::size_t off = h * dh;
      // dQ: row t sums over its key window.
      for (std::size_t t = 0; t < lay.seg_len; ++t) {
        std::fill(acc_q.begin(), acc_q.end(), T{0});
        const T* qt = q + (base + t) * d + off;
        const T* gt = dout + (base + t) * d + off;
        std::size_t b0, b1;
        key_window(shape.causal, t, lay.seg_len, b0, b1);
        for (std::size_t tau = b0; tau < b1; ++tau) {
          const T* kt = k + (base + tau) * d + off;
          const T* vt = v + (base + tau) * d + off;
          T dot = 0, gv = 0;
          for (std::size_t i = 0; i < dh; ++i) dot += qt[i] * kt[i];
          for (std::size_t i = 0; i < dh; ++i) gv += gt[i] * vt[i];
          const T da = os * gv * silu_grad(ls * dot) * ls;
          for (std::size_t i = 0; i < dh; ++i) acc_q[i] += da * kt[i];
        }
        for (std::size_t i = 0; i < dh; ++i) dq[(base + t) * d + off + i] += acc_q[i];
      }
      // dK, dV: key row tau sums over the queries that see it.
      for (std::size_t tau = 0; tau < lay.seg_len; ++tau) {
        std::fill(acc_k.begin(), acc_k.end(), T{0});
        std::fill(acc_v.begin(), acc_v.end(), T{0});
        const T* kt = k + (base + tau) * d + off;
        const T* vt = v + (base + tau) * d + off;
        std::size_t b0, b1;
        query_window(shape.causal, tau, lay.seg_len, b0, b1);
        for (std::size_t t = b0; t < b1; ++t) {
          const T* qt = q + (base + t) * d + off;
          const T* gt = dout + (base + t) * d + off;
          T dot = 0, gv = 0;
          for (std::size_t i = 0; i < dh; ++i) dot += qt[i] * kt[i];
          for (std::size_t i = 0; i < dh; ++i) gv += gt[i] * vt[i];
          const T a = ls * dot;
          const T da = os * gv * silu_grad(a) * ls;
          const T w = os * silu(a);
          for (std::size_t i = 0; i < dh; ++i) {
            acc_k[i] += da * qt[i];
            acc_v[i] += w * gt[i];
          }
        }
        for (std::size_t i = 0; i < dh; ++i) {
          dk[(base + tau) * d + off + i] += acc_k[i];
          dv[(base + tau) * d + off + i] += acc_v[i];
        }
      }
    }
  }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP kernels. Work items are (column) for the scan and (segment, row) for
// attention; each item reproduces the serial arithmetic for its outputs.

namespace parallel {

constexpr std::size_t kScanBlock = 16;

template <class T>
void decay_scan_forward(const SegmentLayout& layout, const T* s, const T* gamma, T* c) {
  const std::size_t d = layout.dim;
  // Whole rows when the segments alone keep every thread busy.
  const std::size_t width =
      layout.segments >= static_cast<std::size_t>(max_threads()) ? d : std::min(d, kScanBlock);
  const std::size_t blocks = (d + width - 1) / width;
  const long items = static_cast<long>(layout.segments * blocks);
#pragma omp parallel for schedule(static)
  for (long item = 0; item < items; ++item) {
    const std::size_t seg = static_cast<std::size_t>(item) / blocks;
    const std::size_t j0 = (static_cast<std::size_t>(item) % blocks) * width;
    const std::size_t j1 = std::min(d, j0 + width);
    const std::size_t base = seg * layout.seg_len * d;
    for (std::size_t t = 0; t < layout.seg_len; ++t) {
      const std::size_t row = base + t * d;
      for (std::size_t j = j0; j < j1; ++j) {
        const T prev = t == 0 ? T{0} : c[row - d + j];
        c[row + j] = gamma[j] * prev + s[row + j];
      }
    }
  }
}

template <class T>
void decay_scan_backward(const SegmentLayout& layout, const T* c, const T* gamma, const T* dc,
                         T* ds, T* dgamma) {
  const std::size_t d = layout.dim;
  const std::size_t threads = static_cast<std::size_t>(max_threads());
  const std::size_t width = std::max(kScanBlock, (d + threads - 1) / threads);
  const long blocks = static_cast<long>((d + width - 1) / width);
#pragma omp parallel for schedule(static)
  for (long b = 0; b < blocks; ++b) {
    const std::size_t j0 = static_cast<std::size_t>(b) * width;
    const std::size_t j1 = std::min(d, j0 + width);
    std::vector<T> carry(j1 - j0), partial(j1 - j0);
    for (std::size_t seg = 0; seg < layout.segments; ++seg) {
      const std::size_t base = seg * layout.seg_len * d;
      for (std::size_t j = j0; j < j1; ++j) carry[j - j0] = partial[j - j0] = 0;
      for (std::size_t t = layout.seg_len; t-- > 0;) {
        const std::size_t row = base + t * d;
        for (std::size_t j = j0; j < j1; ++j) {
          T& cr = carry[j - j0];
          cr = dc[row + j] + gamma[j] * cr;
          ds[row + j] = cr;
          if (t > 0) partial[j - j0] += cr * c[row - d + j];
        }
      }
      for (std::size_t j = j0; j < j1; ++j) dgamma[j] += partial[j - j0];
    }
  }
}

template <class T>
void attention_forward(const AttentionShape& shape, const T* q, const T* k, const T* v, T* out) {
  const auto& lay = shape.layout;
  const std::size_t d = lay.dim;
  const std::size_t dh = d / shape.heads;
  const T ls = static_cast<T>(shape.logit_scale);
  const T os = static_cast<T>(shape.out_scale);
  const long items = static_cast<long>(lay.segments * lay.seg_len);
#pragma omp parallel
  {
    std::vector<T> acc(dh);
#pragma omp for schedule(dynamic, 8)
    for (long item = 0; item < items; ++item) {
      const std::size_t row = static_cast<std::size_t>(item);
      const std::size_t base = (row / lay.seg_len) * lay.seg_len;
      const std::size_t t = row % lay.seg_len;
      for (std::size_t h = 0; h < shape.heads; ++h) {
        const std::size_t off = h * dh;
        std::fill(acc.begin(), acc.end(), T{0});
        std::size_t b0, b1;
        key_window(shape.causal, t, lay.seg_len, b0, b1);
        const T* qt = q + row * d + off;
        for (std::size_t tau = b0; tau < b1; ++tau) {
          const T* kt = k + (base + tau) * d + off;
          const T* vt = v + (base + tau) * d + off;
          T dot = 0;
          for (std::size_t i = 0; i < dh; ++i) dot += qt[i] * kt[i];
          const T w = silu(ls * dot);
          for (std::size_t i = 0; i < dh; ++i) acc[i] += w * vt[i];
        }
        for (std::size_t i = 0; i < dh; ++i) out[row * d + off + i] = os * acc[i];
      }
    }
  }
}

template <class T>
void attention_backward(const AttentionShape& shape, const T* q, const T* k, const T* v,
                        const T* dout, T* dq, T* dk, T* dv) {
  const auto& lay = shape.layout;
  const std::size_t d = lay.dim;
  const std::size_t dh = d / shape.heads;
  const T ls = static_cast<T>(shape.logit_scale);
  const T os = static_cast<T>(shape.out_scale);
  const long items = static_cast<long>(lay.segments * lay.seg_len);
#pragma omp parallel
  {
    std::vector<T> acc_q(dh), acc_k(dh), acc_v(dh);
#pragma omp for schedule(dynamic, 8)
    for (long item = 0; item < items; ++item) {
      const std::size_t row = static_cast<std::size_t>(item);
      const std::size_t base = (row / lay.seg_len) * lay.seg_len;
      const std::size_t t = row % lay.seg_len;
      for (std::size_t h = 0; h < shape.heads; ++h) {
        const std::size_t off = h * dh;
        std::fill(acc_q.begin(), acc_q.end(), T{0});
        const T* qt = q + row * d + off;
        const T* gt = dout + row * d + off;
        std::size_t b0, b1;
        key_window(shape.causal, t, lay.seg_len, b0, b1);
        for (std::size_t tau = b0; tau < b1; ++tau) {
          const T* kt = k + (base + tau) * d + off;
          const T* vt = v + (base + tau) * d + off;
          T dot = 0, gv = 0;
          for (std::size_t i = 0; i < dh; ++i) dot += qt[i] * kt[i];
          for (std::size_t i = 0; i < dh; ++i) gv += gt[i] * vt[i];
          const T da = os * gv * silu_grad(ls * dot) * ls;
          for (std::size_t i = 0; i < dh; ++i) acc_q[i] += da * kt[i];
        }
        for (std::size_t i = 0; i < dh; ++i) dq[row * d + off + i] += acc_q[i];
      }
    }
#pragma omp for schedule(dynamic, 8)
    for (long item = 0; item < items; ++item) {
      const std::size_t row = static_cast<std::size_t>(item);
      const std::size_t base = (row / lay.seg_len) * lay.seg_len;
      const std::size_t tau = row % lay.seg_len;
      for (std::size_t h = 0; h < shape.heads; ++h) {
        const std::size_t off = h * dh;
        std::fill(acc_k.begin(), acc_k.end(), T{0});
        std::fill(acc_v.begin(), acc_v.end(), T{0});
        const T* kt = k + row * d + off;
        const T* vt = v + row * d + off;
        std::size_t b0, b1;
        query_window(shape.causal, tau, lay.seg_len, b0, b1);
        for (std::size_t t = b0; t < b1; ++t) {
          const T* qt = q + (base + t) * d + off;
          const T* gt = dout + (base + t) * d + off;
          T dot = 0, gv = 0;
          for (std::size_t i = 0; i < dh; ++i) dot += qt[i] * kt[i];
          for (std::size_t i = 0; i < dh; ++i) gv += gt[i] * vt[i];
          const T a = ls * dot;
          const T da = os * gv * silu_grad(a) * ls;
          const T w = os * silu(a);
          for (std::size_t i = 0; i < dh; ++i) {
            acc_k[i] += da * qt[i];
            acc_v[i] += w * gt[i];
          }
        }
        for (std::size_t i = 0; i < dh; ++i) {
          dk[row * d + off + i] += acc_k[i];
          dv[row * d + off + i] += acc_v[i];
        }
      }
    }
  }
}

}  // namespace parallel

// ---------------------------------------------------------------------------

template <class T>
void decay_scan_forward(const SegmentLayout& layout, const T* s, const T* gamma, T* c) {
  if (backend() == Backend::serial) {
    serial::decay_scan_forward(layout, s, gamma, c);
  } else {
    parallel::decay_scan_forward(layout, s, gamma, c);
  }
}

template <class T>
void decay_scan_backward(const SegmentLayout& layout, const T* c, const T* gamma, const T* dc,
                         T* ds, T* dgamma) {
  if (backend() == Backend::serial) {
    serial::decay_scan_backward(layout, c, gamma, dc, ds, dgamma);
  } else {
    parallel::decay_scan_backward(layout, c, gamma, dc, ds, dgamma);
  }
}

template <class T>
void attention_forward(const AttentionShape& shape, const T* q, const T* k, const T* v, T* out) {
  if (backend() == Backend::serial) {
    serial::attention_forward(shape, q, k, v, out);
  } else {
    parallel::attention_forward(shape, q, k, v, out);
  }
}

template <class T>
void attention_backward(const AttentionShape& shape, const T* q, const T* k, const T* v,
                        const T* dout, T* dq, T* dk, T* dv) {
  if (backend() == Backend::serial) {
    serial::attention_backward(shape, q, k, v, dout, dq, dk, dv);
  } else {
    parallel::attention_backward(shape, q, k, v, dout, dq, dk, dv);
  }
}

#define QGS_INSTANTIATE_KERNELS(T)                                                              \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, const T*, const T*, \
                        T*, bool);                                                              \
  template void serial::decay_scan_forward<T>(const SegmentLayout&, const T*, const T*, T*);   \
  template void serial::decay_scan_backward<T>(const SegmentLayout&, const T*, const T*,       \
                                               const T*, T*, T*);                               \
  template void serial::attention_forward<T>(const AttentionShape&, const T*, const T*,        \
                                             const T*, T*);                                     \
  template void serial::attention_backward<T>(const AttentionShape&, const T*, const T*,       \
                                              const T*, const T*, T*, T*, T*);                  \
  template void parallel::decay_scan_forward<T>(const SegmentLayout&, const T*, const T*, T*); \
  template void parallel::decay_scan_backward<T>(const SegmentLayout&, const T*, const T*,     \
                                                 const T*, T*, T*);                             \
  template void parallel::attention_forward<T>(const AttentionShape&, const T*, const T*,      \
                                               const T*, T*);                                   \
  template void parallel::attention_backward<T>(const AttentionShape&, const T*, const T*,     \
                                                const T*, const T*, T*, T*, T*);                \
  template void decay_scan_forward<T>(const SegmentLayout&, const T*, const T*, T*);           \
  template void decay_scan_backward<T>(const SegmentLayout&, const T*, const T*, const T*, T*, \
                                       T*);                                                     \
  template void attention_forward<T>(const AttentionShape&, const T*, const T*, const T*, T*); \
  template void attention_backward<T>(const AttentionShape&, const T*, const T*, const T*,     \
                                      const T*, T*, T*, T*);

QGS_INSTANTIATE_KERNELS(float)
QGS_INSTANTIATE_KERNELS(double)

#undef QGS_INSTANTIATE_KERNELS

}  // namespace qgs::kernels
