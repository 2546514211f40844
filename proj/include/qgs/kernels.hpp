#pragma once

// Hot loops of the encoder and the feature-grouping block. Every kernel has a
// serial reference under `serial::` and an OpenMP version under `parallel::`.
// The parallel versions partition work by output element and keep the serial
// summation order, so both produce bit-identical results for any thread count.

#include <cstddef>
#include <span>

namespace qgs::kernels {

enum class Backend { serial, parallel };

// Process-wide default used by the autodiff ops.
void set_backend(Backend backend);
Backend backend();

// Row-major C = op(A) * op(B) (+ C when accumulate). op(A) is m x k, op(B) is k x n.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate);

// Layout shared by the scan and attention kernels: `segments` independent
// sequences of `seg_len` rows each, stacked into a (segments*seg_len) x dim
// row-major matrix.
struct SegmentLayout {
  std::size_t segments = 0;
  std::size_t seg_len = 0;
  std::size_t dim = 0;
};

// Pointwise aggregated attention over each segment, head by head:
//   A_t = out_scale * sum_{tau in window(t)} silu(logit_scale * <Q_t, K_tau>) * V_tau
// window(t) is tau <= t when causal, the whole segment otherwise.
struct AttentionShape {
  SegmentLayout layout;
  std::size_t heads = 1;
  bool causal = true;
  double logit_scale = 1.0;
  double out_scale = 1.0;
};

namespace serial {

// C_t = gamma * C_{t-1} + S_t within each segment, gamma per column.
template <class T>
void decay_scan_forward(const SegmentLayout& layout, const T* s, const T* gamma, T* c);

// Given dL/dC, writes dL/dS and accumulates per-column dL/dgamma.
template <class T>
void decay_scan_backward(const SegmentLayout& layout, const T* c, const T* gamma, const T* dc,
                         T* ds, T* dgamma);

template <class T>
void attention_forward(const AttentionShape& shape, const T* q, const T* k, const T* v, T* out);

// Accumulates into dq, dk, dv.
template <class T>
void attention_backward(const AttentionShape& shape, const T* q, const T* k, const T* v,
                        const T* dout, T* dq, T* dk, T* dv);

}  // namespace serial

namespace parallel {

template <class T>
void decay_scan_forward(const SegmentLayout& layout, const T* s, const T* gamma, T* c);
template <class T>
void decay_scan_backward(const SegmentLayout& layout, const T* c, const T* gamma, const T* dc,
                         T* ds, T* dgamma);
template <class T>
void attention_forward(const AttentionShape& shape, const T* q, const T* k, const T* v, T* out);
template <class T>
void attention_backward(const AttentionShape& shape, const T* q, const T* k, const T* v,
                        const T* dout, T* dq, T* dk, T* dv);

}  // namespace parallel

// Dispatch on backend().
template <class T>
void decay_scan_forward(const SegmentLayout& layout, const T* s, const T* gamma, T* c);
template <class T>
void decay_scan_backward(const SegmentLayout& layout, const T* c, const T* gamma, const T* dc,
                         T* ds, T* dgamma);
template <class T>
void attention_forward(const AttentionShape& shape, const T* q, const T* k, const T* v, T* out);
template <class T>
void attention_backward(const AttentionShape& shape, const T* q, const T* k, const T* v,
                        const T* dout, T* dq, T* dk, T* dv);

// Number of worker threads (1 when built without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace qgs::kernels
