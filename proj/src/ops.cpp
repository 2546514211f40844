#include "qgs/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace qgs::ops {

namespace {

template <class T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <class T>
void require_tape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw Error(std::string(op) + ": operands on different tapes");
}

template <class T>
Shape matrix_shape(const Var<T>& v) {
  return {v.rows(), v.cols()};
}

template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
T sigmoid_scalar(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

// Shared scaffold for elementwise unary ops: f(x) and f'(x) given x and y.
template <class T, class F, class D>
Var<T> unary(const char* op, Var<T> x, F f, D df) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (!std::isfinite(xv[i])) throw NumericError(std::string(op) + ": non-finite input");
    out[i] = f(xv[i]);
  }
  const std::size_t xi = x.id();
  return x.tape()->record(op, std::move(out), {x}, [xi, df](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& xv = tape.value(xi);
    const Tensor<T>& yv = tape.value(self);
    const Tensor<T>& g = tape.grad(self);
    Tensor<T>& dx = tape.grad(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_tape("matmul", a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  Tensor<T> out({m, n});
  kernels::gemm<T>(false, false, m, n, k, a.value().data(), b.value().data(), out.data(), false);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record("matmul", std::move(out), {a, b},
                          [ai, bi, m, n, k](Tape<T>& tape, std::size_t self) {
                            const Tensor<T>& g = tape.grad(self);
                            if (tape.needs_grad(ai)) {
                              kernels::gemm<T>(false, true, m, k, n, g.data(),
                                               tape.value(bi).data(), tape.grad(ai).data(), true);
                            }
                            if (tape.needs_grad(bi)) {
                              kernels::gemm<T>(true, false, k, n, m, tape.value(ai).data(),
                                               g.data(), tape.grad(bi).data(), true);
                            }
                          });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_tape("add", a, b);
  require_same("add", a, b);
  Tensor<T> out = a.value();
  accumulate(out, b.value());
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record("add", std::move(out), {a, b}, [ai, bi](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    if (tape.needs_grad(ai)) accumulate(tape.grad(ai), g);
    if (tape.needs_grad(bi)) accumulate(tape.grad(bi), g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_tape("sub", a, b);
  require_same("sub", a, b);
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record("sub", std::move(out), {a, b}, [ai, bi](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    if (tape.needs_grad(ai)) accumulate(tape.grad(ai), g);
    if (tape.needs_grad(bi)) {
      Tensor<T>& db = tape.grad(bi);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_tape("mul", a, b);
  require_same("mul", a, b);
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record("mul", std::move(out), {a, b}, [ai, bi](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    if (tape.needs_grad(ai)) {
      Tensor<T>& da = tape.grad(ai);
      const Tensor<T>& bv = tape.value(bi);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (tape.needs_grad(bi)) {
      Tensor<T>& db = tape.grad(bi);
      const Tensor<T>& av = tape.value(ai);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
  require_tape("add_row", a, row);
  const std::size_t n = a.cols();
  if (row.size() != n) {
    throw ShapeError("add_row: shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(row.shape()));
  }
  Tensor<T> out = a.value();
  const Tensor<T>& rv = row.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += rv[j];
  }
  const std::size_t ai = a.id(), ri = row.id();
  return a.tape()->record("add_row", std::move(out), {a, row},
                          [ai, ri, n](Tape<T>& tape, std::size_t self) {
                            const Tensor<T>& g = tape.grad(self);
                            if (tape.needs_grad(ai)) accumulate(tape.grad(ai), g);
                            if (tape.needs_grad(ri)) {
                              Tensor<T>& dr = tape.grad(ri);
                              for (std::size_t r = 0; r < g.rows(); ++r) {
                                for (std::size_t j = 0; j < n; ++j) dr[j] += g[r * n + j];
                              }
                            }
                          });
}

template <class T>
Var<T> mul_row(Var<T> a, Var<T> row) {
  require_tape("mul_row", a, row);
  const std::size_t n = a.cols();
  if (row.size() != n) {
    throw ShapeError("mul_row: shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(row.shape()));
  }
  Tensor<T> out = a.value();
  const Tensor<T>& rv = row.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] *= rv[j];
  }
  const std::size_t ai = a.id(), ri = row.id();
  return a.tape()->record("mul_row", std::move(out), {a, row},
                          [ai, ri, n](Tape<T>& tape, std::size_t self) {
                            const Tensor<T>& g = tape.grad(self);
                            const Tensor<T>& av = tape.value(ai);
                            const Tensor<T>& rv = tape.value(ri);
                            if (tape.needs_grad(ai)) {
                              Tensor<T>& da = tape.grad(ai);
                              for (std::size_t r = 0; r < g.rows(); ++r) {
                                for (std::size_t j = 0; j < n; ++j) {
                                  da[r * n + j] += g[r * n + j] * rv[j];
                                }
                              }
                            }
                            if (tape.needs_grad(ri)) {
                              Tensor<T>& dr = tape.grad(ri);
                              for (std::size_t r = 0; r < g.rows(); ++r) {
                                for (std::size_t j = 0; j < n; ++j) {
                                  dr[j] += g[r * n + j] * av[r * n + j];
                                }
                              }
                            }
                          });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  const std::size_t ai = a.id();
  return a.tape()->record("scale", std::move(out), {a},
                          [ai, factor](Tape<T>& tape, std::size_t self) {
                            const Tensor<T>& g = tape.grad(self);
                            Tensor<T>& da = tape.grad(ai);
                            for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * factor;
                          });
}

template <class T>
Var<T> scale_by(Var<T> a, Var<T> s) {
  require_tape("scale_by", a, s);
  if (s.size() != 1) {
    throw ShapeError("scale_by: expected one-element scale, got " + to_string(s.shape()) +
                     " for operand " + to_string(a.shape()));
  }
  const T factor = s.value()[0];
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  const std::size_t ai = a.id(), si = s.id();
  return a.tape()->record("scale_by", std::move(out), {a, s},
                          [ai, si](Tape<T>& tape, std::size_t self) {
                            const Tensor<T>& g = tape.grad(self);
                            const Tensor<T>& av = tape.value(ai);
                            const T factor = tape.value(si)[0];
                            if (tape.needs_grad(ai)) {
                              Tensor<T>& da = tape.grad(ai);
                              for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * factor;
                            }
                            if (tape.needs_grad(si)) {
                              T acc = 0;
                              for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                              tape.grad(si)[0] += acc;
                            }
                          });
}

template <class T>
Var<T> silu(Var<T> x) {
  return unary<T>(
      "silu", x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T{1} + v * (T{1} - s));
      });
}

template <class T>
Var<T> relu(Var<T> x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T{0} ? v : T{0}; },
      [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  return unary<T>(
      "sigmoid", x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> tanh(Var<T> x) {
  return unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

namespace {

template <class T>
Var<T> rmsnorm_impl(Var<T> x, const Var<T>* gain, T eps) {
  const std::size_t n = x.cols();
  if (n == 0) throw ShapeError("rmsnorm: zero-length last dimension in " + to_string(x.shape()));
  if (gain && gain->size() != n) {
    throw ShapeError("rmsnorm: gain " + to_string(gain->shape()) + " does not match input " +
                     to_string(x.shape()));
  }
  const Tensor<T>& xv = x.value();
  const std::size_t rows = xv.rows();
  Tensor<T> out(xv.shape());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += xv[r * n + j] * xv[r * n + j];
    const T rms = std::sqrt(ss / static_cast<T>(n) + eps);
    if (!(rms > T{0})) throw NumericError("rmsnorm: zero root-mean-square with eps = 0");
    inv_rms[r] = T{1} / rms;
    for (std::size_t j = 0; j < n; ++j) {
      const T g = gain ? gain->value()[j] : T{1};
      out[r * n + j] = g * xv[r * n + j] * inv_rms[r];
    }
  }
  const std::size_t xi = x.id();
  const std::size_t gi = gain ? gain->id() : static_cast<std::size_t>(-1);
  auto backward = [xi, gi, n, rows, inv_rms = std::move(inv_rms)](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& xv = tape.value(xi);
    const Tensor<T>& g = tape.grad(self);
    const bool has_gain = gi != static_cast<std::size_t>(-1);
    const Tensor<T>* gv = has_gain ? &tape.value(gi) : nullptr;
    Tensor<T>* dgain = has_gain && tape.needs_grad(gi) ? &tape.grad(gi) : nullptr;
    Tensor<T>* dx = tape.needs_grad(xi) ? &tape.grad(xi) : nullptr;
    std::vector<T> dxhat(n);
    for (std::size_t r = 0; r < rows; ++r) {
      T proj = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T xhat = xv[r * n + j] * inv_rms[r];
        if (dgain) (*dgain)[j] += g[r * n + j] * xhat;
        dxhat[j] = g[r * n + j] * (gv ? (*gv)[j] : T{1});
        proj += dxhat[j] * xhat;
      }
      if (!dx) continue;
      proj /= static_cast<T>(n);
      for (std::size_t j = 0; j < n; ++j) {
        const T xhat = xv[r * n + j] * inv_rms[r];
        (*dx)[r * n + j] += (dxhat[j] - xhat * proj) * inv_rms[r];
      }
    }
  };
  if (gain) return x.tape()->record("rmsnorm", std::move(out), {x, *gain}, std::move(backward));
  return x.tape()->record("rmsnorm", std::move(out), {x}, std::move(backward));
}

}  // namespace

template <class T>
Var<T> rmsnorm(Var<T> x, Var<T> gain, T eps) {
  require_tape("rmsnorm", x, gain);
  return rmsnorm_impl<T>(x, &gain, eps);
}

template <class T>
Var<T> rmsnorm(Var<T> x, T eps) {
  return rmsnorm_impl<T>(x, nullptr, eps);
}

template <class T>
Var<T> layernorm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  require_tape("layernorm", x, gain);
  require_tape("layernorm", x, bias);
  const std::size_t n = x.cols();
  if (n == 0) throw ShapeError("layernorm: zero-length last dimension in " + to_string(x.shape()));
  if (gain.size() != n || bias.size() != n) {
    throw ShapeError("layernorm: gain " + to_string(gain.shape()) + " / bias " +
                     to_string(bias.shape()) + " do not match input " + to_string(x.shape()));
  }
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  const std::size_t rows = xv.rows();
  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[r * n + j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T c = xv[r * n + j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(n);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xv[r * n + j] - mu) * inv_std[r];
      out[r * n + j] = gv[j] * xhat[r * n + j] + bv[j];
    }
  }
  const std::size_t xi = x.id(), gi = gain.id(), bi = bias.id();
  return x.tape()->record(
      "layernorm", std::move(out), {x, gain, bias},
      [xi, gi, bi, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad(self);
        const Tensor<T>& gv = tape.value(gi);
        Tensor<T>* dgain = tape.needs_grad(gi) ? &tape.grad(gi) : nullptr;
        Tensor<T>* dbias = tape.needs_grad(bi) ? &tape.grad(bi) : nullptr;
        Tensor<T>* dx = tape.needs_grad(xi) ? &tape.grad(xi) : nullptr;
        std::vector<T> dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = r * n + j;
            if (dgain) (*dgain)[j] += g[idx] * xhat[idx];
            if (dbias) (*dbias)[j] += g[idx];
            dxhat[j] = g[idx] * gv[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[idx];
          }
          if (!dx) continue;
          mean_d /= static_cast<T>(n);
          mean_dx /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = r * n + j;
            (*dx)[idx] += (dxhat[j] - mean_d - xhat[idx] * mean_dx) * inv_std[r];
          }
        }
      });
}

template <class T>
Var<T> l2_normalize(Var<T> x, T eps) {
  const std::size_t n = x.cols();
  const Tensor<T>& xv = x.value();
  const std::size_t rows = xv.rows();
  Tensor<T> out(xv.shape());
  std::vector<T> denom(rows);
  std::vector<char> clamped(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += xv[r * n + j] * xv[r * n + j];
    const T norm = std::sqrt(ss);
    clamped[r] = norm <= eps;
    denom[r] = clamped[r] ? eps : norm;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xv[r * n + j] / denom[r];
  }
  const std::size_t xi = x.id();
  return x.tape()->record(
      "l2_normalize", std::move(out), {x},
      [xi, n, rows, denom = std::move(denom), clamped = std::move(clamped)](Tape<T>& tape,
                                                                             std::size_t self) {
        const Tensor<T>& g = tape.grad(self);
        const Tensor<T>& y = tape.value(self);
        Tensor<T>& dx = tape.grad(xi);
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = 0;
          if (!clamped[r]) {
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            dx[r * n + j] += (g[r * n + j] - y[r * n + j] * dot) / denom[r];
          }
        }
      });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t rows = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_tape("concat_cols", parts[0], p);
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + to_string(parts[0].shape()) + " vs " +
                       to_string(p.shape()));
    }
    total += p.cols();
  }
  Tensor<T> out({rows, total});
  std::vector<std::size_t> ids, widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    const Tensor<T>& v = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * w, w, out.data() + r * total + off);
    }
    off += w;
    ids.push_back(p.id());
    widths.push_back(w);
  }
  return parts[0].tape()->record("concat_cols", std::move(out), std::span<const Var<T>>(parts),
                      [ids, widths, rows, total](Tape<T>& tape, std::size_t self) {
                        const Tensor<T>& g = tape.grad(self);
                        std::size_t off = 0;
                        for (std::size_t p = 0; p < ids.size(); ++p) {
                          const std::size_t w = widths[p];
                          if (tape.needs_grad(ids[p])) {
                            Tensor<T>& d = tape.grad(ids[p]);
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t j = 0; j < w; ++j) {
                                d[r * w + j] += g[r * total + off + j];
                              }
                            }
                          }
                          off += w;
                        }
                      });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t cols = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_tape("concat_rows", parts[0], p);
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " + to_string(parts[0].shape()) + " vs " +
                       to_string(p.shape()));
    }
    total += p.rows();
  }
  Tensor<T> out({total, cols});
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.size();
  }
  return parts[0].tape()->record("concat_rows", std::move(out), std::span<const Var<T>>(parts),
                      [ids, offsets](Tape<T>& tape, std::size_t self) {
                        const Tensor<T>& g = tape.grad(self);
                        for (std::size_t p = 0; p < ids.size(); ++p) {
                          if (!tape.needs_grad(ids[p])) continue;
                          Tensor<T>& d = tape.grad(ids[p]);
                          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[offsets[p] + i];
                        }
                      });
}

template <class T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t count) {
  const std::size_t n = x.cols();
  if (begin + count > n) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + to_string(x.shape()));
  }
  const std::size_t rows = x.rows();
  Tensor<T> out({rows, count});
  const Tensor<T>& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.data() + r * n + begin, count, out.data() + r * count);
  }
  const std::size_t xi = x.id();
  return x.tape()->record("slice_cols", std::move(out), {x},
                          [xi, n, begin, count, rows](Tape<T>& tape, std::size_t self) {
                            const Tensor<T>& g = tape.grad(self);
                            Tensor<T>& dx = tape.grad(xi);
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t j = 0; j < count; ++j) {
                                dx[r * n + begin + j] += g[r * count + j];
                              }
                            }
                          });
}

template <class T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> index) {
  const std::size_t n = table.cols();
  const std::size_t vocab = table.rows();
  Tensor<T> out({index.size(), n});
  const Tensor<T>& tv = table.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= vocab) {
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of range for " +
                       to_string(table.shape()));
    }
    std::copy_n(tv.data() + index[i] * n, n, out.data() + i * n);
  }
  const std::size_t ti = table.id();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return table.tape()->record("gather_rows", std::move(out), {table},
                              [ti, n, idx = std::move(idx)](Tape<T>& tape, std::size_t self) {
                                const Tensor<T>& g = tape.grad(self);
                                Tensor<T>& dt = tape.grad(ti);
                                for (std::size_t i = 0; i < idx.size(); ++i) {
                                  for (std::size_t j = 0; j < n; ++j) {
                                    dt[idx[i] * n + j] += g[i * n + j];
                                  }
                                }
                              });
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id();
  return x.tape()->record("reshape", std::move(out), {x}, [xi](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    Tensor<T>& dx = tape.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

template <class T>
Var<T> sum(Var<T> x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  const std::size_t xi = x.id();
  return x.tape()->record("sum", Tensor<T>::scalar(acc), {x}, [xi](Tape<T>& tape, std::size_t self) {
    const T g = tape.grad(self)[0];
    for (auto& d : tape.grad(xi).values()) d += g;
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  if (x.size() == 0) throw ShapeError("mean: empty operand");
  return scale(sum(x), T{1} / static_cast<T>(x.size()));
}

template <class T>
Var<T> stop_gradient(Var<T> x) {
  return x.tape()->constant(x.tape()->stopped_value(x.value()));
}

template <class T>
Var<T> dropout(Var<T> x, T rate, std::mt19937_64& rng) {
  if (rate <= T{0}) return x;
  if (rate >= T{1}) throw Error("dropout: rate must be < 1");
  Tensor<T> mask(x.shape());
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const T inv = T{1} / (T{1} - rate);
  for (auto& m : mask.values()) m = keep(rng) ? inv : T{0};
  return mul(x, x.tape()->constant(std::move(mask)));
}

template <class T>
Var<T> decay_scan(Var<T> s, Var<T> gamma, std::size_t seg_len) {
  require_tape("decay_scan", s, gamma);
  const std::size_t d = s.cols();
  if (seg_len == 0 || s.rows() % seg_len != 0) {
    throw ShapeError("decay_scan: " + std::to_string(s.rows()) +
                     " rows do not split into segments of " + std::to_string(seg_len));
  }
  if (gamma.size() != 1 && gamma.size() != d) {
    throw ShapeError("decay_scan: gamma " + to_string(gamma.shape()) + " does not match input " +
                     to_string(s.shape()));
  }
  std::vector<T> g(d);
  for (std::size_t j = 0; j < d; ++j) g[j] = gamma.value()[gamma.size() == 1 ? 0 : j];
  const kernels::SegmentLayout layout{s.rows() / seg_len, seg_len, d};
  Tensor<T> out(matrix_shape(s));
  kernels::decay_scan_forward<T>(layout, s.value().data(), g.data(), out.data());
  const std::size_t si = s.id(), gi = gamma.id();
  return s.tape()->record(
      "decay_scan", std::move(out), {s, gamma},
      [si, gi, layout, g = std::move(g)](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& dc = tape.grad(self);
        Tensor<T> ds(dc.shape());
        std::vector<T> dgamma(layout.dim, T{0});
        kernels::decay_scan_backward<T>(layout, tape.value(self).data(), g.data(), dc.data(),
                                        ds.data(), dgamma.data());
        if (tape.needs_grad(si)) accumulate(tape.grad(si), ds);
        if (tape.needs_grad(gi)) {
          Tensor<T>& dg = tape.grad(gi);
          if (dg.size() == 1) {
            T acc = 0;
            for (T v : dgamma) acc += v;
            dg[0] += acc;
          } else {
            for (std::size_t j = 0; j < layout.dim; ++j) dg[j] += dgamma[j];
          }
        }
      });
}

template <class T>
Var<T> pointwise_attention(Var<T> q, Var<T> k, Var<T> v, const AttentionSpec& spec) {
  require_tape("pointwise_attention", q, k);
  require_tape("pointwise_attention", q, v);
  require_same("pointwise_attention", q, k);
  require_same("pointwise_attention", q, v);
  const std::size_t d = q.cols();
  if (spec.heads == 0 || d % spec.heads != 0) {
    throw ShapeError("pointwise_attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(spec.heads) + " heads");
  }
  if (spec.seg_len == 0 || q.rows() % spec.seg_len != 0) {
    throw ShapeError("pointwise_attention: " + std::to_string(q.rows()) +
                     " rows do not split into segments of " + std::to_string(spec.seg_len));
  }
  kernels::AttentionShape shape;
  shape.layout = {q.rows() / spec.seg_len, spec.seg_len, d};
  shape.heads = spec.heads;
  shape.causal = spec.causal;
  shape.logit_scale = spec.logit_scale;
  shape.out_scale = spec.out_scale;
  Tensor<T> out(matrix_shape(q));
  kernels::attention_forward<T>(shape, q.value().data(), k.value().data(), v.value().data(),
                                out.data());
  const std::size_t qi = q.id(), ki = k.id(), vi = v.id();
  return q.tape()->record(
      "pointwise_attention", std::move(out), {q, k, v},
      [qi, ki, vi, shape](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad(self);
        Tensor<T> dq(g.shape()), dk(g.shape()), dv(g.shape());
        kernels::attention_backward<T>(shape, tape.value(qi).data(), tape.value(ki).data(),
                                       tape.value(vi).data(), g.data(), dq.data(), dk.data(),
                                       dv.data());
        if (tape.needs_grad(qi)) accumulate(tape.grad(qi), dq);
        if (tape.needs_grad(ki)) accumulate(tape.grad(ki), dk);
        if (tape.needs_grad(vi)) accumulate(tape.grad(vi), dv);
      });
}

template <class T>
Var<T> segment_mean(Var<T> x, std::span<const T> row_mask, std::size_t seg_len) {
  const std::size_t rows = x.rows(), n = x.cols();
  if (row_mask.size() != rows || seg_len == 0 || rows % seg_len != 0) {
    throw ShapeError("segment_mean: mask of " + std::to_string(row_mask.size()) +
                     " rows / segment " + std::to_string(seg_len) + " vs input " +
                     to_string(x.shape()));
  }
  const std::size_t segs = rows / seg_len;
  Tensor<T> out({segs, n});
  std::vector<T> weight(rows, T{0});
  const Tensor<T>& xv = x.value();
  for (std::size_t s = 0; s < segs; ++s) {
    T count = 0;
    for (std::size_t r = 0; r < seg_len; ++r) count += row_mask[s * seg_len + r] != T{0} ? 1 : 0;
    if (count == T{0}) {
      throw Error("segment_mean: segment " + std::to_string(s) + " has no unmasked rows");
    }
    for (std::size_t r = 0; r < seg_len; ++r) {
      const std::size_t row = s * seg_len + r;
      if (row_mask[row] == T{0}) continue;
      weight[row] = T{1} / count;
      for (std::size_t j = 0; j < n; ++j) out[s * n + j] += xv[row * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[s * n + j] /= count;
  }
  const std::size_t xi = x.id();
  return x.tape()->record("segment_mean", std::move(out), {x},
                          [xi, n, seg_len, weight = std::move(weight)](Tape<T>& tape,
                                                                       std::size_t self) {
                            const Tensor<T>& g = tape.grad(self);
                            Tensor<T>& dx = tape.grad(xi);
                            for (std::size_t row = 0; row < weight.size(); ++row) {
                              if (weight[row] == T{0}) continue;
                              const std::size_t s = row / seg_len;
                              for (std::size_t j = 0; j < n; ++j) {
                                dx[row * n + j] += g[s * n + j] * weight[row];
                              }
                            }
                          });
}

template <class T>
Var<T> rowwise_dot(Var<T> a, Var<T> b) {
  require_tape("rowwise_dot", a, b);
  require_same("rowwise_dot", a, b);
  const std::size_t rows = a.rows(), n = a.cols();
  Tensor<T> out({rows, 1});
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += av[r * n + j] * bv[r * n + j];
    out[r] = acc;
  }
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record("rowwise_dot", std::move(out), {a, b},
                          [ai, bi, rows, n](Tape<T>& tape, std::size_t self) {
                            const Tensor<T>& g = tape.grad(self);
                            const Tensor<T>& av = tape.value(ai);
                            const Tensor<T>& bv = tape.value(bi);
                            if (tape.needs_grad(ai)) {
                              Tensor<T>& da = tape.grad(ai);
                              for (std::size_t r = 0; r < rows; ++r) {
                                for (std::size_t j = 0; j < n; ++j) {
                                  da[r * n + j] += g[r] * bv[r * n + j];
                                }
                              }
                            }
                            if (tape.needs_grad(bi)) {
                              Tensor<T>& db = tape.grad(bi);
                              for (std::size_t r = 0; r < rows; ++r) {
                                for (std::size_t j = 0; j < n; ++j) {
                                  db[r * n + j] += g[r] * av[r * n + j];
                                }
                              }
                            }
                          });
}

template <class T>
Var<T> step_similarity(Var<T> z, Var<T> v, std::size_t batch, std::size_t steps, T scale) {
  require_tape("step_similarity", z, v);
  require_same("step_similarity", z, v);
  if (z.rows() != batch * steps) {
    throw ShapeError("step_similarity: " + to_string(z.shape()) + " is not batch " +
                     std::to_string(batch) + " x steps " + std::to_string(steps));
  }
  const std::size_t n = z.cols();
  const Tensor<T>& zv = z.value();
  const Tensor<T>& vv = v.value();
  Tensor<T> out({steps * batch, batch});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < batch; ++b) {
      const T* zr = zv.data() + (b * steps + t) * n;
      for (std::size_t c = 0; c < batch; ++c) {
        const T* vr = vv.data() + (c * steps + t) * n;
        T acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += zr[j] * vr[j];
        out[(t * batch + b) * batch + c] = scale * acc;
      }
    }
  }
  const std::size_t zi = z.id(), vi = v.id();
  return z.tape()->record(
      "step_similarity", std::move(out), {z, v},
      [zi, vi, batch, steps, n, scale](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad(self);
        const Tensor<T>& zv = tape.value(zi);
        const Tensor<T>& vv = tape.value(vi);
        Tensor<T>* dz = tape.needs_grad(zi) ? &tape.grad(zi) : nullptr;
        Tensor<T>* dv = tape.needs_grad(vi) ? &tape.grad(vi) : nullptr;
        for (std::size_t t = 0; t < steps; ++t) {
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < batch; ++c) {
              const T w = scale * g[(t * batch + b) * batch + c];
              if (w == T{0}) continue;
              const std::size_t zr = (b * steps + t) * n;
              const std::size_t vr = (c * steps + t) * n;
              for (std::size_t j = 0; j < n; ++j) {
                if (dz) (*dz)[zr + j] += w * vv[vr + j];
                if (dv) (*dv)[vr + j] += w * zv[zr + j];
              }
            }
          }
        }
      });
}

template <class T>
Var<T> cross_entropy_rows(Var<T> logits, std::span<const std::size_t> target,
                          std::span<const T> row_weight) {
  const std::size_t rows = logits.rows(), n = logits.cols();
  if (target.size() != rows || row_weight.size() != rows) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(target.size()) + " targets / " +
                     std::to_string(row_weight.size()) + " weights for logits " +
                     to_string(logits.shape()));
  }
  T total_weight = 0;
  for (T w : row_weight) total_weight += w;
  if (!(total_weight > T{0})) throw Error("cross_entropy_rows: no weighted rows");
  const Tensor<T>& lv = logits.value();
  Tensor<T> probs({rows, n});
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_weight[r] == T{0}) continue;
    if (target[r] >= n) throw ShapeError("cross_entropy_rows: target out of range");
    const T* lr = lv.data() + r * n;
    const T mx = *std::max_element(lr, lr + n);
    T z = 0;
    for (std::size_t c = 0; c < n; ++c) {
      probs[r * n + c] = std::exp(lr[c] - mx);
      z += probs[r * n + c];
    }
    for (std::size_t c = 0; c < n; ++c) probs[r * n + c] /= z;
    loss += row_weight[r] * (std::log(z) + mx - lr[target[r]]);
  }
  loss /= total_weight;
  const std::size_t li = logits.id();
  std::vector<std::size_t> tgt(target.begin(), target.end());
  std::vector<T> w(row_weight.begin(), row_weight.end());
  return logits.tape()->record(
      "cross_entropy_rows", Tensor<T>::scalar(loss), {logits},
      [li, rows, n, total_weight, probs = std::move(probs), tgt = std::move(tgt),
       w = std::move(w)](Tape<T>& tape, std::size_t self) {
        const T g = tape.grad(self)[0];
        Tensor<T>& dl = tape.grad(li);
        for (std::size_t r = 0; r < rows; ++r) {
          if (w[r] == T{0}) continue;
          const T coef = g * w[r] / total_weight;
          for (std::size_t c = 0; c < n; ++c) {
            const T onehot = c == tgt[r] ? T{1} : T{0};
            dl[r * n + c] += coef * (probs[r * n + c] - onehot);
          }
        }
      });
}

template <class T>
Var<T> bce_with_logits(Var<T> logits, std::span<const T> labels) {
  const std::size_t n = logits.size();
  if (labels.size() != n || n == 0) {
    throw ShapeError("bce_with_logits: " + std::to_string(labels.size()) +
                     " labels for logits " + to_string(logits.shape()));
  }
  const Tensor<T>& x = logits.value();
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    loss += std::max(x[i], T{0}) - x[i] * labels[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  loss /= static_cast<T>(n);
  const std::size_t li = logits.id();
  std::vector<T> y(labels.begin(), labels.end());
  return logits.tape()->record("bce_with_logits", Tensor<T>::scalar(loss), {logits},
                               [li, n, y = std::move(y)](Tape<T>& tape, std::size_t self) {
                                 const T g = tape.grad(self)[0];
                                 const Tensor<T>& x = tape.value(li);
                                 Tensor<T>& dx = tape.grad(li);
                                 for (std::size_t i = 0; i < n; ++i) {
                                   dx[i] += g * (sigmoid_scalar(x[i]) - y[i]) /
                                            static_cast<T>(n);
                                 }
                               });
}

#define QGS_INSTANTIATE_OPS(T)                                                                 \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                   \
  template Var<T> add<T>(Var<T>, Var<T>);                                                      \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                      \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                      \
  template Var<T> add_row<T>(Var<T>, Var<T>);                                                  \
  template Var<T> mul_row<T>(Var<T>, Var<T>);                                                  \
  template Var<T> scale<T>(Var<T>, T);                                                         \
  template Var<T> scale_by<T>(Var<T>, Var<T>);                                                 \
  template Var<T> silu<T>(Var<T>);                                                             \
  template Var<T> relu<T>(Var<T>);                                                             \
  template Var<T> sigmoid<T>(Var<T>);                                                          \
  template Var<T> tanh<T>(Var<T>);                                                             \
  template Var<T> rmsnorm<T>(Var<T>, Var<T>, T);                                               \
  template Var<T> rmsnorm<T>(Var<T>, T);                                                       \
  template Var<T> layernorm<T>(Var<T>, Var<T>, Var<T>, T);                                     \
  template Var<T> l2_normalize<T>(Var<T>, T);                                                  \
  template Var<T> concat_cols<T>(const std::vector<Var<T>>&);                                  \
  template Var<T> concat_rows<T>(const std::vector<Var<T>>&);                                  \
  template Var<T> slice_cols<T>(Var<T>, std::size_t, std::size_t);                             \
  template Var<T> gather_rows<T>(Var<T>, std::span<const std::size_t>);                        \
  template Var<T> sum<T>(Var<T>);                                                              \
  template Var<T> mean<T>(Var<T>);                                                             \
  template Var<T> reshape<T>(Var<T>, Shape);                                                   \
  template Var<T> stop_gradient<T>(Var<T>);                                                    \
  template Var<T> dropout<T>(Var<T>, T, std::mt19937_64&);                                     \
  template Var<T> decay_scan<T>(Var<T>, Var<T>, std::size_t);                                  \
  template Var<T> pointwise_attention<T>(Var<T>, Var<T>, Var<T>, const AttentionSpec&);        \
  template Var<T> segment_mean<T>(Var<T>, std::span<const T>, std::size_t);                    \
  template Var<T> rowwise_dot<T>(Var<T>, Var<T>);                                              \
  template Var<T> step_similarity<T>(Var<T>, Var<T>, std::size_t, std::size_t, T);             \
  template Var<T> cross_entropy_rows<T>(Var<T>, std::span<const std::size_t>, std::span<const T>); \
  template Var<T> bce_with_logits<T>(Var<T>, std::span<const T>);

QGS_INSTANTIATE_OPS(float)
QGS_INSTANTIATE_OPS(double)

#undef QGS_INSTANTIATE_OPS

}  // namespace qgs::ops
