#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "mhim/rng.hpp"

namespace mhim {

// 64-bit values throughout; gradient checks need the full mantissa.
using Real = double;

class Tensor;

namespace detail {

struct Node {
  std::vector<Tensor> parents;
  // Propagates the output's grad into the parents' grads (accumulating).
  std::function<void(const Tensor& out)> backward;
};

inline bool grad_enabled_flag(int delta = 0) {
  static thread_local int depth = 0;
  depth += delta;
  return depth == 0;
}

}  // namespace detail

inline bool is_grad_enabled() { return detail::grad_enabled_flag(); }

// Disables tape recording for the enclosing scope (inference / frozen paths).
struct NoGradGuard {
  NoGradGuard() { detail::grad_enabled_flag(+1); }
  ~NoGradGuard() { detail::grad_enabled_flag(-1); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major tensor handle. Copies share the underlying buffers, so a
// Tensor behaves like a reference to (data, grad, tape node).
class Tensor {
 public:
  std::vector<int> shape;
  std::shared_ptr<std::vector<Real>> data;
  std::shared_ptr<std::vector<Real>> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::shared_ptr<detail::Node> node;  // set on non-leaf gradient-tracked tensors

  Tensor() = default;

  Tensor(std::vector<int> dims, bool req_grad = false) : shape(std::move(dims)) {
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: dims must be positive");
    }
    data = std::make_shared<std::vector<Real>>(numel_of(shape), Real(0));
    set_requires_grad(req_grad);
  }

  static Tensor from_vector(std::vector<int> dims, std::vector<Real> values,
                            bool req_grad = false) {
    Tensor t(std::move(dims), req_grad);
    if (values.size() != t.numel()) {
      throw std::invalid_argument("Tensor::from_vector: data length does not match dims");
    }
    *t.data = std::move(values);
    return t;
  }

  static Tensor zeros(std::vector<int> dims, bool req_grad = false) {
    return Tensor(std::move(dims), req_grad);
  }

  static Tensor full(std::vector<int> dims, Real value, bool req_grad = false) {
    Tensor t(std::move(dims), req_grad);
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
  }

  static Tensor scalar(Real value, bool req_grad = false) {
    return full({1}, value, req_grad);
  }

  static Tensor identity(int n) {
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) (*t.data)[static_cast<size_t>(i) * n + i] = 1;
    return t;
  }

  static Tensor randn(std::vector<int> dims, Rng& rng, Real stddev = 1.0,
                      bool req_grad = false) {
    Tensor t(std::move(dims), req_grad);
    for (auto& v : *t.data) v = stddev * rng.normal();
    return t;
  }

  size_t numel() const { return data ? data->size() : 0; }
  bool defined() const { return static_cast<bool>(data); }
  int rank() const { return static_cast<int>(shape.size()); }

  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 0); }

  bool is_scalar() const { return numel() == 1; }

  Real value() const {
    if (!is_scalar()) throw std::logic_error("Tensor::value: not a scalar");
    return (*data)[0];
  }

  Real& at(int i) { return (*data)[static_cast<size_t>(i)]; }
  Real at(int i) const { return (*data)[static_cast<size_t>(i)]; }
  Real& at(int r, int c) { return (*data)[static_cast<size_t>(r) * shape[1] + c]; }
  Real at(int r, int c) const { return (*data)[static_cast<size_t>(r) * shape[1] + c]; }

  void set_requires_grad(bool req) {
    requires_grad = req;
    if (req && !grad) grad = std::make_shared<std::vector<Real>>(numel(), Real(0));
    if (!req) grad = nullptr;
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), Real(0));
  }

  // A grad-detached view sharing the same data buffer.
  Tensor detach() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<Real>>(*data);
    t.set_requires_grad(requires_grad);
    return t;
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  void check_finite(const char* what) const {
    for (Real v : *data) {
      if (!std::isfinite(v)) {
        throw std::runtime_error(std::string(what) + ": non-finite value encountered");
      }
    }
  }

  static size_t numel_of(const std::vector<int>& dims) {
    size_t n = 1;
    for (int d : dims) n *= static_cast<size_t>(d);
    return n;
  }
};

namespace detail {

inline bool track(const Tensor& t) { return is_grad_enabled() && t.requires_grad; }

inline void attach(Tensor& out, std::vector<Tensor> parents,
                   std::function<void(const Tensor&)> backward) {
  bool any = false;
  for (const auto& p : parents) {
    if (track(p)) any = true;
  }
  if (!any) return;
  out.set_requires_grad(true);
  out.node = std::make_shared<Node>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(backward);
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw std::invalid_argument(std::string(op) + ": expected a 2-D tensor");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape);
  const size_t n = a.numel();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  detail::attach(out, {a, b}, [](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    const auto& pb = o.node->parents[1];
    for (size_t i = 0; i < o.numel(); ++i) {
      if (pa.grad) (*pa.grad)[i] += (*o.grad)[i];
      if (pb.grad) (*pb.grad)[i] += (*o.grad)[i];
    }
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
  detail::attach(out, {a, b}, [](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    const auto& pb = o.node->parents[1];
    for (size_t i = 0; i < o.numel(); ++i) {
      if (pa.grad) (*pa.grad)[i] += (*o.grad)[i];
      if (pb.grad) (*pb.grad)[i] -= (*o.grad)[i];
    }
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  detail::attach(out, {a, b}, [](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    const auto& pb = o.node->parents[1];
    for (size_t i = 0; i < o.numel(); ++i) {
      if (pa.grad) (*pa.grad)[i] += (*o.grad)[i] * (*pb.data)[i];
      if (pb.grad) (*pb.grad)[i] += (*o.grad)[i] * (*pa.data)[i];
    }
  });
  return out;
}

inline Tensor scale(const Tensor& a, Real c) {
  Tensor out(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = (*a.data)[i] * c;
  detail::attach(out, {a}, [c](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    for (size_t i = 0; i < o.numel(); ++i) (*pa.grad)[i] += (*o.grad)[i] * c;
  });
  return out;
}

// Adds a 1-D bias row to every row of a 2-D tensor.
inline Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  detail::require_2d(a, "add_rowvec");
  if (bias.numel() != static_cast<size_t>(a.shape[1])) {
    throw std::invalid_argument("add_rowvec: bias length does not match columns");
  }
  Tensor out(a.shape);
  const int r = a.shape[0], c = a.shape[1];
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = a.at(i, j) + bias.at(j);
  detail::attach(out, {a, bias}, [r, c](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    const auto& pb = o.node->parents[1];
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) {
        const Real g = (*o.grad)[static_cast<size_t>(i) * c + j];
        if (pa.grad) (*pa.grad)[static_cast<size_t>(i) * c + j] += g;
        if (pb.grad) (*pb.grad)[static_cast<size_t>(j)] += g;
      }
    }
  });
  return out;
}

// Multiplies every row of a 2-D tensor elementwise by a row vector.
inline Tensor mul_rowvec(const Tensor& a, const Tensor& row) {
  detail::require_2d(a, "mul_rowvec");
  if (row.numel() != static_cast<size_t>(a.shape[1])) {
    throw std::invalid_argument("mul_rowvec: row length does not match columns");
  }
  const int r = a.shape[0], c = a.shape[1];
  Tensor out(a.shape);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) = a.at(i, j) * row.at(j);
  detail::attach(out, {a, row}, [r, c](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    const auto& pr = o.node->parents[1];
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) {
        const Real g = (*o.grad)[static_cast<size_t>(i) * c + j];
        if (pa.grad) (*pa.grad)[static_cast<size_t>(i) * c + j] += g * (*pr.data)[static_cast<size_t>(j)];
        if (pr.grad) (*pr.grad)[static_cast<size_t>(j)] += g * (*pa.data)[static_cast<size_t>(i) * c + j];
      }
    }
  });
  return out;
}

// Natural log; positive inputs only.
inline Tensor log(const Tensor& a) {
  Tensor out(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) {
    if ((*a.data)[i] <= 0) throw std::runtime_error("log: nonpositive input");
    (*out.data)[i] = std::log((*a.data)[i]);
  }
  detail::attach(out, {a}, [](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    for (size_t i = 0; i < o.numel(); ++i) (*pa.grad)[i] += (*o.grad)[i] / (*pa.data)[i];
  });
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = std::max(Real(0), (*a.data)[i]);
  detail::attach(out, {a}, [](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    for (size_t i = 0; i < o.numel(); ++i) {
      if ((*pa.data)[i] > 0) (*pa.grad)[i] += (*o.grad)[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  if (a.shape[1] != b.shape[0]) throw std::invalid_argument("matmul: inner dims mismatch");
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out({m, n});
  const Real* pa = a.data->data();
  const Real* pb = b.data->data();
  Real* po = out.data->data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const Real av = pa[static_cast<size_t>(i) * k + kk];
      if (av == 0) continue;
      const Real* brow = pb + static_cast<size_t>(kk) * n;
      Real* orow = po + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  detail::attach(out, {a, b}, [m, k, n](const Tensor& o) {
    const auto& ta = o.node->parents[0];
    const auto& tb = o.node->parents[1];
    const Real* g = o.grad->data();
    if (ta.grad) {
      // dA = dC * B^T
      Real* ga = ta.grad->data();
      const Real* bd = tb.data->data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const Real gv = g[static_cast<size_t>(i) * n + j];
          if (gv == 0) continue;
          for (int kk = 0; kk < k; ++kk)
            ga[static_cast<size_t>(i) * k + kk] += gv * bd[static_cast<size_t>(kk) * n + j];
        }
    }
    if (tb.grad) {
      // dB = A^T * dC
      Real* gb = tb.grad->data();
      const Real* ad = ta.data->data();
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          const Real av = ad[static_cast<size_t>(i) * k + kk];
          if (av == 0) continue;
          for (int j = 0; j < n; ++j)
            gb[static_cast<size_t>(kk) * n + j] += av * g[static_cast<size_t>(i) * n + j];
        }
    }
  });
  return out;
}

inline Tensor transpose2d(const Tensor& a) {
  detail::require_2d(a, "transpose2d");
  const int r = a.shape[0], c = a.shape[1];
  Tensor out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  detail::attach(out, {a}, [r, c](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        (*pa.grad)[static_cast<size_t>(i) * c + j] += (*o.grad)[static_cast<size_t>(j) * r + i];
  });
  return out;
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw std::invalid_argument("dot: length mismatch");
  Tensor out({1});
  Real s = 0;
  for (size_t i = 0; i < a.numel(); ++i) s += (*a.data)[i] * (*b.data)[i];
  (*out.data)[0] = s;
  detail::attach(out, {a, b}, [](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    const auto& pb = o.node->parents[1];
    const Real g = (*o.grad)[0];
    for (size_t i = 0; i < pa.numel(); ++i) {
      if (pa.grad) (*pa.grad)[i] += g * (*pb.data)[i];
      if (pb.grad) (*pb.grad)[i] += g * (*pa.data)[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Slicing, gathering, concatenation
// ---------------------------------------------------------------------------

inline Tensor slice_rows(const Tensor& a, int start, int count) {
  detail::require_2d(a, "slice_rows");
  if (start < 0 || count <= 0 || start + count > a.shape[0]) {
    throw std::invalid_argument("slice_rows: range out of bounds");
  }
  const int c = a.shape[1];
  Tensor out({count, c});
  std::copy(a.data->begin() + static_cast<size_t>(start) * c,
            a.data->begin() + static_cast<size_t>(start + count) * c, out.data->begin());
  detail::attach(out, {a}, [start, count, c](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    for (size_t i = 0; i < static_cast<size_t>(count) * c; ++i)
      (*pa.grad)[static_cast<size_t>(start) * c + i] += (*o.grad)[i];
  });
  return out;
}

inline Tensor slice_cols(const Tensor& a, int start, int count) {
  detail::require_2d(a, "slice_cols");
  if (start < 0 || count <= 0 || start + count > a.shape[1]) {
    throw std::invalid_argument("slice_cols: range out of bounds");
  }
  const int r = a.shape[0], c = a.shape[1];
  Tensor out({r, count});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < count; ++j) out.at(i, j) = a.at(i, start + j);
  detail::attach(out, {a}, [start, count, r, c](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < count; ++j)
        (*pa.grad)[static_cast<size_t>(i) * c + start + j] +=
            (*o.grad)[static_cast<size_t>(i) * count + j];
  });
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  int total = 0;
  const int c = parts[0].shape.size() == 2 ? parts[0].shape[1] : 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.shape[1] != c) throw std::invalid_argument("concat_rows: column mismatch");
    total += p.shape[0];
  }
  Tensor out({total, c});
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data->begin(), p.data->end(), out.data->begin() + off);
    off += p.numel();
  }
  detail::attach(out, parts, [](const Tensor& o) {
    size_t off2 = 0;
    for (const auto& p : o.node->parents) {
      if (p.grad) {
        for (size_t i = 0; i < p.numel(); ++i) (*p.grad)[i] += (*o.grad)[off2 + i];
      }
      off2 += p.numel();
    }
  });
  return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  return concat_rows(std::vector<Tensor>{a, b});
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int r = parts[0].shape.size() == 2 ? parts[0].shape[0] : 0;
  int total = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.shape[0] != r) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.shape[1];
  }
  Tensor out({r, total});
  int coff = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < p.shape[1]; ++j) out.at(i, coff + j) = p.at(i, j);
    coff += p.shape[1];
  }
  detail::attach(out, parts, [r, total](const Tensor& o) {
    int coff2 = 0;
    for (const auto& p : o.node->parents) {
      const int pc = p.shape[1];
      if (p.grad) {
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < pc; ++j)
            (*p.grad)[static_cast<size_t>(i) * pc + j] +=
                (*o.grad)[static_cast<size_t>(i) * total + coff2 + j];
      }
      coff2 += pc;
    }
  });
  return out;
}

// Row gather: out[i] = a[indices[i]]. The embedding-lookup primitive.
inline Tensor gather_rows(const Tensor& a, const std::vector<int>& indices) {
  detail::require_2d(a, "gather_rows");
  if (indices.empty()) throw std::invalid_argument("gather_rows: empty index list");
  const int c = a.shape[1];
  for (int idx : indices) {
    if (idx < 0 || idx >= a.shape[0]) throw std::out_of_range("gather_rows: index out of range");
  }
  Tensor out({static_cast<int>(indices.size()), c});
  for (size_t i = 0; i < indices.size(); ++i) {
    std::copy(a.data->begin() + static_cast<size_t>(indices[i]) * c,
              a.data->begin() + static_cast<size_t>(indices[i] + 1) * c,
              out.data->begin() + i * c);
  }
  detail::attach(out, {a}, [indices, c](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    for (size_t i = 0; i < indices.size(); ++i)
      for (int j = 0; j < c; ++j)
        (*pa.grad)[static_cast<size_t>(indices[i]) * c + j] += (*o.grad)[i * c + j];
  });
  return out;
}

// Sparse row aggregation: out[dst] += a[src] for every (dst, src) pair.
// Backbone of the R-GCN message passing.
inline Tensor aggregate_rows(const Tensor& a, const std::vector<std::pair<int, int>>& dst_src,
                             int out_rows) {
  detail::require_2d(a, "aggregate_rows");
  const int c = a.shape[1];
  for (auto [d, s] : dst_src) {
    if (d < 0 || d >= out_rows || s < 0 || s >= a.shape[0]) {
      throw std::out_of_range("aggregate_rows: edge index out of range");
    }
  }
  Tensor out({out_rows, c});
  for (auto [d, s] : dst_src)
    for (int j = 0; j < c; ++j) out.at(d, j) += a.at(s, j);
  detail::attach(out, {a}, [dst_src, c](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    for (auto [d, s] : dst_src)
      for (int j = 0; j < c; ++j)
        (*pa.grad)[static_cast<size_t>(s) * c + j] += (*o.grad)[static_cast<size_t>(d) * c + j];
  });
  return out;
}

// Picks one element by flat index as a scalar tensor.
inline Tensor pick(const Tensor& a, int flat_index) {
  if (flat_index < 0 || static_cast<size_t>(flat_index) >= a.numel()) {
    throw std::out_of_range("pick: index out of range");
  }
  Tensor out({1});
  (*out.data)[0] = (*a.data)[static_cast<size_t>(flat_index)];
  detail::attach(out, {a}, [flat_index](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (pa.grad) (*pa.grad)[static_cast<size_t>(flat_index)] += (*o.grad)[0];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  Tensor out({1});
  Real s = 0;
  for (Real v : *a.data) s += v;
  (*out.data)[0] = s;
  detail::attach(out, {a}, [](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    const Real g = (*o.grad)[0];
    for (size_t i = 0; i < pa.numel(); ++i) (*pa.grad)[i] += g;
  });
  return out;
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), Real(1) / static_cast<Real>(a.numel()));
}

// Column-wise mean of a 2-D tensor: n x d -> 1 x d.
inline Tensor mean_rows(const Tensor& a) {
  detail::require_2d(a, "mean_rows");
  const int r = a.shape[0], c = a.shape[1];
  Tensor out({1, c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(0, j) += a.at(i, j);
  for (int j = 0; j < c; ++j) out.at(0, j) /= static_cast<Real>(r);
  detail::attach(out, {a}, [r, c](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        (*pa.grad)[static_cast<size_t>(i) * c + j] += (*o.grad)[static_cast<size_t>(j)] / r;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fn>
void for_each_lane(const Tensor& t, int axis, Fn&& fn) {
  // Iterates 1-D lanes along `axis` of a 1-D or 2-D tensor as (offset, stride, len).
  if (t.rank() == 1) {
    if (axis != 0) throw std::invalid_argument("softmax: axis out of range for 1-D tensor");
    fn(size_t(0), size_t(1), t.shape[0]);
    return;
  }
  require_2d(t, "softmax");
  const int r = t.shape[0], c = t.shape[1];
  if (axis == 1) {
    for (int i = 0; i < r; ++i) fn(static_cast<size_t>(i) * c, size_t(1), c);
  } else if (axis == 0) {
    for (int j = 0; j < c; ++j) fn(static_cast<size_t>(j), static_cast<size_t>(c), r);
  } else {
    throw std::invalid_argument("softmax: axis out of range");
  }
}

}  // namespace detail

inline Tensor softmax(const Tensor& a, int axis) {
  if (a.numel() == 0) throw std::invalid_argument("softmax: empty input");
  a.check_finite("softmax input");
  Tensor out(a.shape);
  detail::for_each_lane(a, axis, [&](size_t off, size_t stride, int len) {
    if (len == 0) throw std::invalid_argument("softmax: empty axis");
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int i = 0; i < len; ++i) mx = std::max(mx, (*a.data)[off + i * stride]);
    Real denom = 0;
    for (int i = 0; i < len; ++i) {
      const Real e = std::exp((*a.data)[off + i * stride] - mx);
      (*out.data)[off + i * stride] = e;
      denom += e;
    }
    for (int i = 0; i < len; ++i) (*out.data)[off + i * stride] /= denom;
  });
  detail::attach(out, {a}, [axis](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    detail::for_each_lane(o, axis, [&](size_t off, size_t stride, int len) {
      Real dsum = 0;
      for (int i = 0; i < len; ++i)
        dsum += (*o.grad)[off + i * stride] * (*o.data)[off + i * stride];
      for (int i = 0; i < len; ++i) {
        const size_t k = off + i * stride;
        (*pa.grad)[k] += (*o.data)[k] * ((*o.grad)[k] - dsum);
      }
    });
  });
  return out;
}

inline Tensor log_softmax(const Tensor& a, int axis) {
  if (a.numel() == 0) throw std::invalid_argument("log_softmax: empty input");
  a.check_finite("log_softmax input");
  Tensor out(a.shape);
  detail::for_each_lane(a, axis, [&](size_t off, size_t stride, int len) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int i = 0; i < len; ++i) mx = std::max(mx, (*a.data)[off + i * stride]);
    Real denom = 0;
    for (int i = 0; i < len; ++i) denom += std::exp((*a.data)[off + i * stride] - mx);
    const Real lse = mx + std::log(denom);
    for (int i = 0; i < len; ++i)
      (*out.data)[off + i * stride] = (*a.data)[off + i * stride] - lse;
  });
  detail::attach(out, {a}, [axis](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    detail::for_each_lane(o, axis, [&](size_t off, size_t stride, int len) {
      Real gsum = 0;
      for (int i = 0; i < len; ++i) gsum += (*o.grad)[off + i * stride];
      for (int i = 0; i < len; ++i) {
        const size_t k = off + i * stride;
        (*pa.grad)[k] += (*o.grad)[k] - std::exp((*o.data)[k]) * gsum;
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// L2-normalizes a vector (rank-1 or 1 x d). Degenerate zero vectors are an error.
inline Tensor l2_normalize(const Tensor& a) {
  Real sq = 0;
  for (Real v : *a.data) sq += v * v;
  const Real norm = std::sqrt(sq);
  if (norm == 0) throw std::runtime_error("l2_normalize: zero vector");
  Tensor out(a.shape);
  for (size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = (*a.data)[i] / norm;
  detail::attach(out, {a}, [norm](const Tensor& o) {
    const auto& pa = o.node->parents[0];
    if (!pa.grad) return;
    Real gy = 0;  // g . y
    for (size_t i = 0; i < o.numel(); ++i) gy += (*o.grad)[i] * (*o.data)[i];
    for (size_t i = 0; i < o.numel(); ++i)
      (*pa.grad)[i] += ((*o.grad)[i] - gy * (*o.data)[i]) / norm;
  });
  return out;
}

// Row-wise layer normalization with learnable gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Real eps = 1e-5) {
  detail::require_2d(x, "layer_norm");
  const int r = x.shape[0], c = x.shape[1];
  if (gamma.numel() != static_cast<size_t>(c) || beta.numel() != static_cast<size_t>(c)) {
    throw std::invalid_argument("layer_norm: gain/bias length mismatch");
  }
  Tensor out({r, c});
  std::vector<Real> inv_std(static_cast<size_t>(r));
  std::vector<Real> xhat(static_cast<size_t>(r) * c);
  for (int i = 0; i < r; ++i) {
    Real mean = 0;
    for (int j = 0; j < c; ++j) mean += x.at(i, j);
    mean /= c;
    Real var = 0;
    for (int j = 0; j < c; ++j) {
      const Real d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= c;
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int j = 0; j < c; ++j) {
      const Real xh = (x.at(i, j) - mean) * is;
      xhat[static_cast<size_t>(i) * c + j] = xh;
      out.at(i, j) = xh * gamma.at(j) + beta.at(j);
    }
  }
  detail::attach(out, {x, gamma, beta},
                 [r, c, inv_std = std::move(inv_std), xhat = std::move(xhat)](const Tensor& o) {
    const auto& px = o.node->parents[0];
    const auto& pg = o.node->parents[1];
    const auto& pb = o.node->parents[2];
    for (int i = 0; i < r; ++i) {
      Real sum_dy = 0, sum_dy_xhat = 0;
      for (int j = 0; j < c; ++j) {
        const size_t k = static_cast<size_t>(i) * c + j;
        const Real dy = (*o.grad)[k] * (*pg.data)[static_cast<size_t>(j)];
        sum_dy += dy;
        sum_dy_xhat += dy * xhat[k];
      }
      for (int j = 0; j < c; ++j) {
        const size_t k = static_cast<size_t>(i) * c + j;
        const Real dy = (*o.grad)[k] * (*pg.data)[static_cast<size_t>(j)];
        if (px.grad) {
          (*px.grad)[k] += inv_std[static_cast<size_t>(i)] *
                           (dy - sum_dy / c - xhat[k] * sum_dy_xhat / c);
        }
        if (pg.grad) (*pg.grad)[static_cast<size_t>(j)] += (*o.grad)[k] * xhat[k];
        if (pb.grad) (*pb.grad)[static_cast<size_t>(j)] += (*o.grad)[k];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reverse-mode sweep
// ---------------------------------------------------------------------------

// Fills grads of every requires_grad tensor reachable from `loss`.
// Grads accumulate across repeated calls; callers reset via zero_grad.
inline void backward(const Tensor& loss) {
  if (!loss.is_scalar()) throw std::invalid_argument("backward: loss must be a scalar");
  loss.check_finite("backward loss");
  if (!loss.requires_grad) return;
  (*loss.grad)[0] += Real(1);

  // Iterative postorder DFS over tape nodes, then replay in reverse.
  if (!loss.node) return;
  struct Frame {
    Tensor t;
    size_t next_child;
  };
  std::unordered_set<detail::Node*> visited{loss.node.get()};
  std::vector<Frame> stack{{loss, 0}};
  std::vector<Tensor> topo;
  while (!stack.empty()) {
    auto& fr = stack.back();
    auto* nd = fr.t.node.get();
    if (fr.next_child < nd->parents.size()) {
      const Tensor& child = nd->parents[fr.next_child++];
      if (child.node && !visited.count(child.node.get())) {
        visited.insert(child.node.get());
        stack.push_back({child, 0});
      }
    } else {
      topo.push_back(fr.t);
      stack.pop_back();
    }
  }
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    it->node->backward(*it);
  }
}

}  // namespace mhim
