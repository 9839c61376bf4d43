#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "avqf/tensor.hpp"

namespace avqf {

namespace detail {

template <typename Real>
bool any_requires_grad(const std::vector<Tensor<Real>>& ts) {
  for (const auto& t : ts)
    if (t.requires_grad()) return true;
  return false;
}

// Wires an op output into the graph: links parents and installs the backward
// closure only when some input is trainable, so frozen subgraphs record
// nothing and are freed as soon as the forward values go out of scope.
template <typename Real, typename Fn>
void attach(Tensor<Real>& out, const std::vector<Tensor<Real>>& inputs, Fn&& fn) {
  if (!any_requires_grad(inputs)) return;
  out.node()->requires_grad = true;
  for (const auto& in : inputs) out.node()->parents.push_back(in.node());
  out.node()->backward_fn = std::forward<Fn>(fn);
}

// Splits a shape around an axis into [outer, extent, inner] strides.
inline void axis_split(const Shape& s, size_t axis, size_t& outer, size_t& ext,
                       size_t& inner) {
  outer = 1;
  for (size_t i = 0; i < axis; ++i) outer *= s[i];
  ext = s[axis];
  inner = 1;
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<Real> out = Tensor<Real>::zeros(a.shape());
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::attach(out, {a, b}, [](GraphNode<Real>& o) {
    for (int p = 0; p < 2; ++p) {
      auto& par = *o.parents[p];
      if (!par.requires_grad) continue;
      par.ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) par.grad[i] += o.grad[i];
    }
  });
  return out;
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<Real> out = Tensor<Real>::zeros(a.shape());
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::attach(out, {a, b}, [](GraphNode<Real>& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] += o.grad[i] * pa.data[i];
    }
  });
  return out;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
  Tensor<Real> out = Tensor<Real>::zeros(a.shape());
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  detail::attach(out, {a}, [c](GraphNode<Real>& o) {
    auto& pa = *o.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * c;
  });
  return out;
}

// Adds a length-d bias vector to every row of x (last axis has extent d).
template <typename Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& b) {
  if (b.rank() != 1 || x.rank() < 1 || x.shape().back() != b.extent(0)) {
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) +
                     " does not match last extent of " + shape_str(x.shape()));
  }
  const size_t d = b.extent(0);
  const size_t rows = x.numel() / d;
  Tensor<Real> out = Tensor<Real>::zeros(x.shape());
  for (size_t r = 0; r < rows; ++r)
    for (size_t j = 0; j < d; ++j) out.data()[r * d + j] = x.data()[r * d + j] + b.data()[j];
  detail::attach(out, {x, b}, [d, rows](GraphNode<Real>& o) {
    auto& px = *o.parents[0];
    auto& pb = *o.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t r = 0; r < rows; ++r)
        for (size_t j = 0; j < d; ++j) pb.grad[j] += o.grad[r * d + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  if (a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  }
  const size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<Real> out = Tensor<Real>::zeros({m, n});
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  Real* po = out.data().data();
  for (size_t i = 0; i < m; ++i) {
    for (size_t kk = 0; kk < k; ++kk) {
      const Real av = pa[i * k + kk];
      const Real* brow = pb + kk * n;
      Real* orow = po + i * n;
      for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  detail::attach(out, {a, b}, [m, k, n](GraphNode<Real>& o) {
    auto& A = *o.parents[0];
    auto& B = *o.parents[1];
    const Real* g = o.grad.data();
    if (A.requires_grad) {
      A.ensure_grad();
      // dA[i,kk] = sum_j g[i,j] * B[kk,j]
      Real* da = A.grad.data();
      const Real* pb2 = B.data.data();
      for (size_t i = 0; i < m; ++i)
        for (size_t kk = 0; kk < k; ++kk) {
          Real acc = 0;
          const Real* grow = g + i * n;
          const Real* brow = pb2 + kk * n;
          for (size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          da[i * k + kk] += acc;
        }
    }
    if (B.requires_grad) {
      B.ensure_grad();
      // dB[kk,j] = sum_i A[i,kk] * g[i,j]
      Real* db = B.grad.data();
      const Real* pa2 = A.data.data();
      for (size_t i = 0; i < m; ++i)
        for (size_t kk = 0; kk < k; ++kk) {
          const Real av = pa2[i * k + kk];
          const Real* grow = g + i * n;
          Real* brow = db + kk * n;
          for (size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
    }
  });
  return out;
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expects rank-2, got " + shape_str(x.shape()));
  const size_t m = x.extent(0), n = x.extent(1);
  Tensor<Real> out = Tensor<Real>::zeros({n, m});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out.data()[j * m + i] = x.data()[i * n + j];
  detail::attach(out, {x}, [m, n](GraphNode<Real>& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) px.grad[i * n + j] += o.grad[j * m + i];
  });
  return out;
}

// Row-major data is preserved, so this is a copy with a new shape.
template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, const Shape& shape) {
  check_shape_valid(shape, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor<Real> out = Tensor<Real>::from_data(shape, x.data());
  detail::attach(out, {x}, [](GraphNode<Real>& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Concatenation and slicing along an arbitrary axis
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, size_t axis) {
  if (parts.empty()) throw ValueError("concat: needs at least one part");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < s0.size(); ++i) {
      if (i != axis && p.shape()[i] != s0[i]) {
        throw ShapeError("concat: extent mismatch at axis " + std::to_string(i));
      }
    }
    total += p.shape()[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  Tensor<Real> out = Tensor<Real>::zeros(out_shape);

  size_t outer, oext, inner;
  detail::axis_split(out_shape, axis, outer, oext, inner);
  std::vector<size_t> exts;
  size_t off = 0;
  for (const auto& p : parts) {
    const size_t e = p.shape()[axis];
    exts.push_back(e);
    for (size_t o = 0; o < outer; ++o)
      for (size_t i = 0; i < e; ++i)
        std::copy_n(p.data().data() + (o * e + i) * inner, inner,
                    out.data().data() + (o * oext + off + i) * inner);
    off += e;
  }
  detail::attach(out, parts, [outer, oext, inner, exts](GraphNode<Real>& o) {
    size_t off2 = 0;
    for (size_t p = 0; p < o.parents.size(); ++p) {
      auto& par = *o.parents[p];
      const size_t e = exts[p];
      if (par.requires_grad) {
        par.ensure_grad();
        for (size_t ot = 0; ot < outer; ++ot)
          for (size_t i = 0; i < e; ++i) {
            const Real* src = o.grad.data() + (ot * oext + off2 + i) * inner;
            Real* dst = par.grad.data() + (ot * e + i) * inner;
            for (size_t j = 0; j < inner; ++j) dst[j] += src[j];
          }
      }
      off2 += e;
    }
  });
  return out;
}

template <typename Real>
Tensor<Real> slice(const Tensor<Real>& x, size_t axis, size_t start, size_t len) {
  if (axis >= x.rank()) throw ShapeError("slice: axis out of range");
  if (len == 0 || start + len > x.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for extent " +
                     std::to_string(x.shape()[axis]));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  size_t outer, ext, inner;
  detail::axis_split(x.shape(), axis, outer, ext, inner);
  Tensor<Real> out = Tensor<Real>::zeros(out_shape);
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < len; ++i)
      std::copy_n(x.data().data() + (o * ext + start + i) * inner, inner,
                  out.data().data() + (o * len + i) * inner);
  detail::attach(out, {x}, [outer, ext, inner, start, len](GraphNode<Real>& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    for (size_t ot = 0; ot < outer; ++ot)
      for (size_t i = 0; i < len; ++i) {
        const Real* src = o.grad.data() + (ot * len + i) * inner;
        Real* dst = px.grad.data() + (ot * ext + start + i) * inner;
        for (size_t j = 0; j < inner; ++j) dst[j] += src[j];
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real acc = 0;
  for (Real v : x.data()) acc += v;
  Tensor<Real> out = Tensor<Real>::scalar(acc);
  detail::attach(out, {x}, [](GraphNode<Real>& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    for (auto& g : px.grad) g += o.grad[0];
  });
  return out;
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  const Real inv = Real(1) / static_cast<Real>(x.numel());
  Real acc = 0;
  for (Real v : x.data()) acc += v;
  Tensor<Real> out = Tensor<Real>::scalar(acc * inv);
  detail::attach(out, {x}, [inv](GraphNode<Real>& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    for (auto& g : px.grad) g += o.grad[0] * inv;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  const size_t n = x.numel();
  Tensor<Real> out = Tensor<Real>::zeros(x.shape());
  for (size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x.data()[i]);
    out.data()[i] = static_cast<Real>(0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)));
  }
  detail::attach(out, {x}, [](GraphNode<Real>& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    for (size_t i = 0; i < o.grad.size(); ++i) {
      const double v = static_cast<double>(px.data[i]);
      const double d =
          0.5 * (1.0 + std::erf(v * M_SQRT1_2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      px.grad[i] += o.grad[i] * static_cast<Real>(d);
    }
  });
  return out;
}

// Numerically stable softmax along `axis`; each slice sums to one.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  size_t outer, ext, inner;
  detail::axis_split(x.shape(), axis, outer, ext, inner);
  Tensor<Real> out = Tensor<Real>::zeros(x.shape());
  for (size_t o = 0; o < outer; ++o) {
    for (size_t j = 0; j < inner; ++j) {
      const size_t base = o * ext * inner + j;
      Real mx = x.data()[base];
      for (size_t i = 1; i < ext; ++i) mx = std::max(mx, x.data()[base + i * inner]);
      Real denom = 0;
      for (size_t i = 0; i < ext; ++i) {
        const Real e = std::exp(x.data()[base + i * inner] - mx);
        out.data()[base + i * inner] = e;
        denom += e;
      }
      const Real inv = Real(1) / denom;
      for (size_t i = 0; i < ext; ++i) out.data()[base + i * inner] *= inv;
    }
  }
  detail::attach(out, {x}, [outer, ext, inner](GraphNode<Real>& o) {
    auto& px = *o.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    // dx = y * (g - sum(g * y)) per slice
    for (size_t ot = 0; ot < outer; ++ot) {
      for (size_t j = 0; j < inner; ++j) {
        const size_t base = ot * ext * inner + j;
        Real dot = 0;
        for (size_t i = 0; i < ext; ++i)
          dot += o.grad[base + i * inner] * o.data[base + i * inner];
        for (size_t i = 0; i < ext; ++i) {
          const size_t k = base + i * inner;
          px.grad[k] += o.data[k] * (o.grad[k] - dot);
        }
      }
    }
  });
  return out;
}

// Per-row standardization over the last axis followed by the affine map
// gamma * xhat + beta.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Real eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: needs rank >= 1");
  const size_t d = x.shape().back();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.extent(0) != d || beta.extent(0) != d) {
    throw ShapeError("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "]");
  }
  if (!(eps > Real(0))) throw ValueError("layer_norm: eps must be positive");
  const size_t rows = x.numel() / d;
  Tensor<Real> out = Tensor<Real>::zeros(x.shape());
  std::vector<Real> xhat(x.numel());
  std::vector<Real> rstd(rows);
  for (size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data().data() + r * d;
    Real mu = 0;
    for (size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (size_t j = 0; j < d; ++j) {
      const Real c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<Real>(d);
    const Real rs = Real(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (size_t j = 0; j < d; ++j) {
      const Real xh = (xr[j] - mu) * rs;
      xhat[r * d + j] = xh;
      out.data()[r * d + j] = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  detail::attach(out, {x, gamma, beta},
                 [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](GraphNode<Real>& o) {
                   auto& px = *o.parents[0];
                   auto& pg = *o.parents[1];
                   auto& pb = *o.parents[2];
                   if (pg.requires_grad) pg.ensure_grad();
                   if (pb.requires_grad) pb.ensure_grad();
                   if (px.requires_grad) px.ensure_grad();
                   for (size_t r = 0; r < rows; ++r) {
                     const Real* g = o.grad.data() + r * d;
                     const Real* xh = xhat.data() + r * d;
                     if (pg.requires_grad)
                       for (size_t j = 0; j < d; ++j) pg.grad[j] += g[j] * xh[j];
                     if (pb.requires_grad)
                       for (size_t j = 0; j < d; ++j) pb.grad[j] += g[j];
                     if (px.requires_grad) {
                       Real mean_gg = 0, mean_ggx = 0;
                       for (size_t j = 0; j < d; ++j) {
                         const Real gg = g[j] * pg.data[j];
                         mean_gg += gg;
                         mean_ggx += gg * xh[j];
                       }
                       mean_gg /= static_cast<Real>(d);
                       mean_ggx /= static_cast<Real>(d);
                       for (size_t j = 0; j < d; ++j) {
                         const Real gg = g[j] * pg.data[j];
                         px.grad[r * d + j] += rstd[r] * (gg - mean_gg - xh[j] * mean_ggx);
                       }
                     }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup and losses
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> embedding(const Tensor<Real>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank-2");
  if (ids.empty()) throw ValueError("embedding: empty id sequence");
  const size_t v = table.extent(0), d = table.extent(1);
  for (int id : ids) {
    if (id < 0 || static_cast<size_t>(id) >= v) {
      throw ValueError("embedding: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(v) + ")");
    }
  }
  Tensor<Real> out = Tensor<Real>::zeros({ids.size(), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().data() + static_cast<size_t>(ids[i]) * d, d,
                out.data().data() + i * d);
  detail::attach(out, {table}, [ids, d](GraphNode<Real>& o) {
    auto& pt = *o.parents[0];
    if (!pt.requires_grad) return;
    pt.ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      Real* dst = pt.grad.data() + static_cast<size_t>(ids[i]) * d;
      const Real* src = o.grad.data() + i * d;
      for (size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

// Mean cross entropy in nats over the positions where mask is true.
// targets[t] is the id expected at position t (only read where mask[t]).
template <typename Real>
Tensor<Real> cross_entropy_masked(const Tensor<Real>& logits, const std::vector<int>& targets,
                                  const std::vector<uint8_t>& mask) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy_masked: logits must be rank-2");
  const size_t L = logits.extent(0), V = logits.extent(1);
  if (targets.size() != L || mask.size() != L) {
    throw ShapeError("cross_entropy_masked: targets/mask must have length " + std::to_string(L));
  }
  size_t n_masked = 0;
  for (size_t t = 0; t < L; ++t) {
    if (!mask[t]) continue;
    ++n_masked;
    if (targets[t] < 0 || static_cast<size_t>(targets[t]) >= V) {
      throw ValueError("cross_entropy_masked: target id out of range at position " +
                       std::to_string(t));
    }
  }
  if (n_masked == 0) throw DegenerateLossError("cross_entropy_masked: mask selects no positions");

  std::vector<Real> probs(logits.numel());
  Real loss = 0;
  for (size_t t = 0; t < L; ++t) {
    if (!mask[t]) continue;
    const Real* row = logits.data().data() + t * V;
    Real mx = row[0];
    for (size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    Real denom = 0;
    for (size_t j = 0; j < V; ++j) {
      const Real e = std::exp(row[j] - mx);
      probs[t * V + j] = e;
      denom += e;
    }
    const Real inv = Real(1) / denom;
    for (size_t j = 0; j < V; ++j) probs[t * V + j] *= inv;
    loss -= std::log(probs[t * V + static_cast<size_t>(targets[t])]);
  }
  loss /= static_cast<Real>(n_masked);
  Tensor<Real> out = Tensor<Real>::scalar(loss);
  detail::attach(out, {logits},
                 [targets, mask, n_masked, V, L, probs = std::move(probs)](GraphNode<Real>& o) {
                   auto& pl = *o.parents[0];
                   if (!pl.requires_grad) return;
                   pl.ensure_grad();
                   const Real s = o.grad[0] / static_cast<Real>(n_masked);
                   for (size_t t = 0; t < L; ++t) {
                     if (!mask[t]) continue;
                     Real* dst = pl.grad.data() + t * V;
                     const Real* p = probs.data() + t * V;
                     for (size_t j = 0; j < V; ++j) dst[j] += s * p[j];
                     dst[static_cast<size_t>(targets[t])] -= s;
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Temporal position add
// ---------------------------------------------------------------------------

// Adds table row p to every vector belonging to temporal index p. x has
// leading extent P and trailing extent d; any middle extents broadcast the
// same row (all K_f patch vectors of frame p share table[p]).
template <typename Real>
Tensor<Real> add_position(const Tensor<Real>& x, const Tensor<Real>& table) {
  if (table.rank() != 2) throw ShapeError("add_position: table must be rank-2");
  if (x.rank() < 2) throw ShapeError("add_position: input must have rank >= 2");
  const size_t P = x.extent(0);
  const size_t d = x.shape().back();
  if (d != table.extent(1)) {
    throw ShapeError("add_position: width mismatch, input " + shape_str(x.shape()) +
                     " vs table " + shape_str(table.shape()));
  }
  if (P > table.extent(0)) {
    throw CapacityError("add_position: " + std::to_string(P) +
                        " positions exceed table capacity " + std::to_string(table.extent(0)));
  }
  const size_t mid = x.numel() / (P * d);
  Tensor<Real> out = Tensor<Real>::zeros(x.shape());
  for (size_t p = 0; p < P; ++p) {
    const Real* row = table.data().data() + p * d;
    for (size_t m = 0; m < mid; ++m) {
      const size_t base = (p * mid + m) * d;
      for (size_t j = 0; j < d; ++j) out.data()[base + j] = x.data()[base + j] + row[j];
    }
  }
  detail::attach(out, {x, table}, [P, mid, d](GraphNode<Real>& o) {
    auto& px = *o.parents[0];
    auto& pt = *o.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
    }
    if (pt.requires_grad) {
      pt.ensure_grad();
      for (size_t p = 0; p < P; ++p) {
        Real* row = pt.grad.data() + p * d;
        for (size_t m = 0; m < mid; ++m) {
          const Real* src = o.grad.data() + (p * mid + m) * d;
          for (size_t j = 0; j < d; ++j) row[j] += src[j];
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

template <typename Real>
size_t argmax_row(const Tensor<Real>& x, size_t row) {
  if (x.rank() != 2) throw ShapeError("argmax_row: expects rank-2");
  const size_t n = x.extent(1);
  const Real* p = x.data().data() + row * n;
  size_t best = 0;
  for (size_t j = 1; j < n; ++j)
    if (p[j] > p[best]) best = j;
  return best;
}

template <typename Real>
Real max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  Real m = 0;
  for (size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace avqf
