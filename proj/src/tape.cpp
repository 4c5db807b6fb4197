#include "arbor/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "arbor/blas.hpp"
#include "arbor/errors.hpp"

namespace arbor {

namespace {

// Right-aligned numpy broadcasting: dims of size 1 (or missing) stretch.
struct BcastPlan {
  Shape out;
  std::vector<int64_t> sa, sb;  // per-dim strides, 0 on broadcast dims
};

BcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  int r = std::max(ra, rb);
  BcastPlan p;
  p.out.resize(r);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  std::vector<int64_t> full_a(r, 1), full_b(r, 1);
  for (int i = 0; i < ra; ++i) full_a[r - ra + i] = a[i];
  for (int i = 0; i < rb; ++i) full_b[r - rb + i] = b[i];
  for (int i = 0; i < r; ++i) {
    if (full_a[i] == full_b[i]) p.out[i] = full_a[i];
    else if (full_a[i] == 1) p.out[i] = full_b[i];
    else if (full_b[i] == 1) p.out[i] = full_a[i];
    else
      throw ContractViolation(std::string(op) + ": shapes not broadcastable " +
                              shape_str(a) + " vs " + shape_str(b));
  }
  int64_t stride = 1;
  for (int i = r - 1; i >= 0; --i) {
    if (full_a[i] != 1) p.sa[i] = stride;
    stride *= full_a[i];
  }
  stride = 1;
  for (int i = r - 1; i >= 0; --i) {
    if (full_b[i] != 1) p.sb[i] = stride;
    stride *= full_b[i];
  }
  return p;
}

template <typename F>
void bcast_for_each(const BcastPlan& p, F&& f) {
  const int r = static_cast<int>(p.out.size());
  const int64_t n = shape_numel(p.out);
  if (n == 0) return;
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      oa += p.sa[d];
      ob += p.sb[d];
      if (idx[d] < p.out[d]) break;
      idx[d] = 0;
      oa -= p.sa[d] * p.out[d];
      ob -= p.sb[d] * p.out[d];
    }
  }
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

struct MatDims {
  int64_t batch, p, q, r;
  bool rhs_shared;  // rank-2 rhs broadcast over the batch
};

MatDims matmul_dims(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2)
    throw ContractViolation("matmul: operands must be at least rank 2, got " +
                            shape_str(a) + " and " + shape_str(b));
  MatDims d;
  d.p = a[a.size() - 2];
  d.q = a[a.size() - 1];
  d.batch = 1;
  for (size_t i = 0; i + 2 < a.size(); ++i) d.batch *= a[i];
  d.rhs_shared = (b.size() == 2 && a.size() > 2);
  if (d.rhs_shared || b.size() == 2) {
    if (b[0] != d.q)
      throw ContractViolation("matmul: inner dims differ, " + shape_str(a) +
                              " x " + shape_str(b));
    d.r = b[1];
  } else {
    if (a.size() != b.size())
      throw ContractViolation("matmul: rank mismatch " + shape_str(a) + " x " +
                              shape_str(b));
    for (size_t i = 0; i + 2 < a.size(); ++i)
      if (a[i] != b[i])
        throw ContractViolation("matmul: batch dims differ, " + shape_str(a) +
                                " x " + shape_str(b));
    if (b[b.size() - 2] != d.q)
      throw ContractViolation("matmul: inner dims differ, " + shape_str(a) +
                              " x " + shape_str(b));
    d.r = b[b.size() - 1];
  }
  return d;
}

}  // namespace

template <typename T>
Tape<T>::Tape() {
  const char* dbg = std::getenv("ARBOR_DEBUG_NUMERICS");
  check_finite = dbg && dbg[0] && dbg[0] != '0';
}

template <typename T>
typename Tape<T>::Id Tape<T>::push(Node n, const char* op) {
  n.op = op;
  if (check_finite && !all_finite(n.out))
    throw NumericError(std::string("non-finite value produced by op ") + op);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Tape<T>::grad_buf(Id id) {
  Node& n = nodes_[id];
  if (!n.grad_live) {
    n.grad = Tensor<T>(n.out.shape);
    n.grad_live = true;
  }
  return n.grad;
}

template <typename T>
const Tensor<T>& Tape<T>::grad_of(Id id) const {
  return nodes_[id].grad_live ? nodes_[id].grad : empty_;
}

template <typename T>
void Tape<T>::add_grad(Id id, const Tensor<T>& g) {
  if (!wants(id)) return;
  Tensor<T>& dst = grad_buf(id);
  for (int64_t i = 0; i < dst.numel(); ++i) dst.v[i] += g.v[i];
}

template <typename T>
typename Tape<T>::Id Tape<T>::input(Tensor<T> t) {
  Node n;
  n.out = std::move(t);
  n.needs_grad = false;
  return push(std::move(n), "input");
}

template <typename T>
typename Tape<T>::Id Tape<T>::param(Param<T>& p) {
  Node n;
  n.out = p.value;
  n.needs_grad = true;
  Param<T>* pp = &p;
  Id id = static_cast<Id>(nodes_.size());
  n.back = [this, id, pp]() {
    const Tensor<T>& g = nodes_[id].grad;
    for (int64_t i = 0; i < g.numel(); ++i) pp->grad.v[i] += g.v[i];
  };
  return push(std::move(n), "param");
}

template <typename T>
typename Tape<T>::Id Tape<T>::matmul(Id a, Id b) {
  const Tensor<T>& A = nodes_[a].out;
  const Tensor<T>& B = nodes_[b].out;
  MatDims d = matmul_dims(A.shape, B.shape);
  Shape os(A.shape.begin(), A.shape.end() - 1);
  os.push_back(d.r);
  Node n;
  n.out = Tensor<T>(os);
  if (d.rhs_shared || B.rank() == 2) {
    gemm<T>(false, false, d.batch * d.p, d.r, d.q, T(1), A.data(), B.data(),
            T(0), n.out.data());
  } else {
    for (int64_t i = 0; i < d.batch; ++i)
      gemm<T>(false, false, d.p, d.r, d.q, T(1), A.data() + i * d.p * d.q,
              B.data() + i * d.q * d.r, T(0), n.out.data() + i * d.p * d.r);
  }
  n.needs_grad = wants(a) || wants(b);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, a, b, d]() {
      const Tensor<T>& G = nodes_[id].grad;
      const Tensor<T>& A2 = nodes_[a].out;
      const Tensor<T>& B2 = nodes_[b].out;
      bool shared = d.rhs_shared || B2.rank() == 2;
      if (wants(a)) {
        Tensor<T>& dA = grad_buf(a);
        if (shared) {
          gemm<T>(false, true, d.batch * d.p, d.q, d.r, T(1), G.data(),
                  B2.data(), T(1), dA.data());
        } else {
          for (int64_t i = 0; i < d.batch; ++i)
            gemm<T>(false, true, d.p, d.q, d.r, T(1), G.data() + i * d.p * d.r,
                    B2.data() + i * d.q * d.r, T(1), dA.data() + i * d.p * d.q);
        }
      }
      if (wants(b)) {
        Tensor<T>& dB = grad_buf(b);
        if (shared) {
          gemm<T>(true, false, d.q, d.r, d.batch * d.p, T(1), A2.data(),
                  G.data(), T(1), dB.data());
        } else {
          for (int64_t i = 0; i < d.batch; ++i)
            gemm<T>(true, false, d.q, d.r, d.p, T(1), A2.data() + i * d.p * d.q,
                    G.data() + i * d.p * d.r, T(1), dB.data() + i * d.q * d.r);
        }
      }
    };
  }
  return push(std::move(n), "matmul");
}

template <typename T>
typename Tape<T>::Id Tape<T>::add(Id a, Id b) {
  const Tensor<T>& A = nodes_[a].out;
  const Tensor<T>& B = nodes_[b].out;
  Node n;
  if (A.shape == B.shape) {
    n.out = Tensor<T>(A.shape);
    for (int64_t i = 0; i < A.numel(); ++i) n.out.v[i] = A.v[i] + B.v[i];
  } else {
    BcastPlan p = plan_broadcast(A.shape, B.shape, "add");
    n.out = Tensor<T>(p.out);
    Tensor<T>& o = n.out;
    bcast_for_each(p, [&](int64_t i, int64_t oa, int64_t ob) {
      o.v[i] = A.v[oa] + B.v[ob];
    });
  }
  n.needs_grad = wants(a) || wants(b);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, a, b]() {
      const Tensor<T>& G = nodes_[id].grad;
      const Tensor<T>& A2 = nodes_[a].out;
      const Tensor<T>& B2 = nodes_[b].out;
      if (A2.shape == B2.shape) {
        add_grad(a, G);
        add_grad(b, G);
        return;
      }
      BcastPlan p = plan_broadcast(A2.shape, B2.shape, "add");
      if (wants(a)) {
        Tensor<T>& dA = grad_buf(a);
        bcast_for_each(p, [&](int64_t i, int64_t oa, int64_t) { dA.v[oa] += G.v[i]; });
      }
      if (wants(b)) {
        Tensor<T>& dB = grad_buf(b);
        bcast_for_each(p, [&](int64_t i, int64_t, int64_t ob) { dB.v[ob] += G.v[i]; });
      }
    };
  }
  return push(std::move(n), "add");
}

template <typename T>
typename Tape<T>::Id Tape<T>::mul(Id a, Id b) {
  const Tensor<T>& A = nodes_[a].out;
  const Tensor<T>& B = nodes_[b].out;
  Node n;
  if (A.shape == B.shape) {
    n.out = Tensor<T>(A.shape);
    for (int64_t i = 0; i < A.numel(); ++i) n.out.v[i] = A.v[i] * B.v[i];
  } else {
    BcastPlan p = plan_broadcast(A.shape, B.shape, "mul");
    n.out = Tensor<T>(p.out);
    Tensor<T>& o = n.out;
    bcast_for_each(p, [&](int64_t i, int64_t oa, int64_t ob) {
      o.v[i] = A.v[oa] * B.v[ob];
    });
  }
  n.needs_grad = wants(a) || wants(b);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, a, b]() {
      const Tensor<T>& G = nodes_[id].grad;
      const Tensor<T>& A2 = nodes_[a].out;
      const Tensor<T>& B2 = nodes_[b].out;
      BcastPlan p = plan_broadcast(A2.shape, B2.shape, "mul");
      if (wants(a)) {
        Tensor<T>& dA = grad_buf(a);
        bcast_for_each(p, [&](int64_t i, int64_t oa, int64_t ob) {
          dA.v[oa] += G.v[i] * B2.v[ob];
        });
      }
      if (wants(b)) {
        Tensor<T>& dB = grad_buf(b);
        bcast_for_each(p, [&](int64_t i, int64_t oa, int64_t ob) {
          dB.v[ob] += G.v[i] * A2.v[oa];
        });
      }
    };
  }
  return push(std::move(n), "mul");
}

template <typename T>
typename Tape<T>::Id Tape<T>::scale(Id a, T s) {
  const Tensor<T>& A = nodes_[a].out;
  Node n;
  n.out = Tensor<T>(A.shape);
  for (int64_t i = 0; i < A.numel(); ++i) n.out.v[i] = A.v[i] * s;
  n.needs_grad = wants(a);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, a, s]() {
      const Tensor<T>& G = nodes_[id].grad;
      Tensor<T>& dA = grad_buf(a);
      for (int64_t i = 0; i < G.numel(); ++i) dA.v[i] += G.v[i] * s;
    };
  }
  return push(std::move(n), "scale");
}

template <typename T>
typename Tape<T>::Id Tape<T>::sigmoid(Id a) {
  const Tensor<T>& A = nodes_[a].out;
  Node n;
  n.out = Tensor<T>(A.shape);
  for (int64_t i = 0; i < A.numel(); ++i) n.out.v[i] = stable_sigmoid(A.v[i]);
  n.needs_grad = wants(a);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, a]() {
      const Tensor<T>& G = nodes_[id].grad;
      const Tensor<T>& Y = nodes_[id].out;
      Tensor<T>& dA = grad_buf(a);
      for (int64_t i = 0; i < G.numel(); ++i)
        dA.v[i] += G.v[i] * Y.v[i] * (T(1) - Y.v[i]);
    };
  }
  return push(std::move(n), "sigmoid");
}

template <typename T>
typename Tape<T>::Id Tape<T>::silu(Id a) {
  const Tensor<T>& A = nodes_[a].out;
  Node n;
  n.out = Tensor<T>(A.shape);
  for (int64_t i = 0; i < A.numel(); ++i)
    n.out.v[i] = A.v[i] * stable_sigmoid(A.v[i]);
  n.needs_grad = wants(a);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, a]() {
      const Tensor<T>& G = nodes_[id].grad;
      const Tensor<T>& X = nodes_[a].out;
      Tensor<T>& dA = grad_buf(a);
      for (int64_t i = 0; i < G.numel(); ++i) {
        T s = stable_sigmoid(X.v[i]);
        dA.v[i] += G.v[i] * s * (T(1) + X.v[i] * (T(1) - s));
      }
    };
  }
  return push(std::move(n), "silu");
}

template <typename T>
typename Tape<T>::Id Tape<T>::rmsnorm(Id a, Id gain, T eps) {
  const Tensor<T>& A = nodes_[a].out;
  const Tensor<T>& G0 = nodes_[gain].out;
  const int64_t d = A.shape.back();
  if (G0.numel() != d)
    throw ContractViolation("rmsnorm: gain length " + std::to_string(G0.numel()) +
                            " vs last dim " + std::to_string(d));
  const int64_t rows = A.numel() / d;
  Node n;
  n.out = Tensor<T>(A.shape);
  Tensor<T> inv_rms({rows});
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = A.data() + r * d;
    T ms = T(0);
    for (int64_t j = 0; j < d; ++j) ms += x[j] * x[j];
    T ir = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
    inv_rms.v[r] = ir;
    T* y = n.out.data() + r * d;
    for (int64_t j = 0; j < d; ++j) y[j] = x[j] * G0.v[j] * ir;
  }
  n.needs_grad = wants(a) || wants(gain);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, a, gain, d, rows, ir = std::move(inv_rms)]() {
      const Tensor<T>& G = nodes_[id].grad;
      const Tensor<T>& X = nodes_[a].out;
      const Tensor<T>& W = nodes_[gain].out;
      Tensor<T>* dX = wants(a) ? &grad_buf(a) : nullptr;
      Tensor<T>* dW = wants(gain) ? &grad_buf(gain) : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const T* x = X.data() + r * d;
        const T* dy = G.data() + r * d;
        const T irr = ir.v[r];
        if (dX) {
          T dot = T(0);
          for (int64_t j = 0; j < d; ++j) dot += dy[j] * W.v[j] * x[j];
          const T c = dot * irr * irr * irr / static_cast<T>(d);
          T* dx = dX->data() + r * d;
          for (int64_t j = 0; j < d; ++j)
            dx[j] += dy[j] * W.v[j] * irr - x[j] * c;
        }
        if (dW) {
          for (int64_t j = 0; j < d; ++j) dW->v[j] += dy[j] * x[j] * irr;
        }
      }
    };
  }
  return push(std::move(n), "rmsnorm");
}

template <typename T>
typename Tape<T>::Id Tape<T>::softmax_masked(Id logits, Tensor<T> key_mask) {
  const Tensor<T>& A = nodes_[logits].out;
  const int64_t L = A.shape.back();
  if (key_mask.numel() != L)
    throw ContractViolation("softmax_masked: mask length " +
                            std::to_string(key_mask.numel()) + " vs last dim " +
                            std::to_string(L));
  const int64_t rows = A.numel() / L;
  Node n;
  n.out = Tensor<T>(A.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = A.data() + r * L;
    T* y = n.out.data() + r * L;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < L; ++j)
      if (key_mask.v[j] > T(0) && x[j] > mx) mx = x[j];
    if (mx == -std::numeric_limits<T>::infinity()) {
      for (int64_t j = 0; j < L; ++j) y[j] = T(0);
      continue;
    }
    T s = T(0);
    for (int64_t j = 0; j < L; ++j) {
      y[j] = key_mask.v[j] > T(0) ? std::exp(x[j] - mx) : T(0);
      s += y[j];
    }
    const T inv = T(1) / s;
    for (int64_t j = 0; j < L; ++j) y[j] *= inv;
  }
  n.needs_grad = wants(logits);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, logits, L, rows]() {
      const Tensor<T>& G = nodes_[id].grad;
      const Tensor<T>& Y = nodes_[id].out;
      Tensor<T>& dX = grad_buf(logits);
      for (int64_t r = 0; r < rows; ++r) {
        const T* y = Y.data() + r * L;
        const T* dy = G.data() + r * L;
        T* dx = dX.data() + r * L;
        T dot = T(0);
        for (int64_t j = 0; j < L; ++j) dot += dy[j] * y[j];
        for (int64_t j = 0; j < L; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    };
  }
  return push(std::move(n), "softmax_masked");
}

template <typename T>
typename Tape<T>::Id Tape<T>::transpose_last2(Id a) {
  const Tensor<T>& A = nodes_[a].out;
  if (A.rank() < 2) throw ContractViolation("transpose_last2: rank < 2");
  std::vector<int> perm(A.rank());
  for (int i = 0; i < A.rank(); ++i) perm[i] = i;
  std::swap(perm[A.rank() - 1], perm[A.rank() - 2]);
  return permute(a, perm);
}

template <typename T>
typename Tape<T>::Id Tape<T>::permute(Id a, std::vector<int> perm) {
  const Tensor<T>& A = nodes_[a].out;
  const int r = A.rank();
  if (static_cast<int>(perm.size()) != r)
    throw ContractViolation("permute: perm rank mismatch");
  Shape os(r);
  for (int i = 0; i < r; ++i) os[i] = A.shape[perm[i]];
  std::vector<int64_t> in_stride(r, 1);
  for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * A.shape[i + 1];
  std::vector<int64_t> map_stride(r);
  for (int i = 0; i < r; ++i) map_stride[i] = in_stride[perm[i]];
  Node n;
  n.out = Tensor<T>(os);
  const int64_t total = A.numel();
  {
    std::vector<int64_t> idx(r, 0);
    int64_t src = 0;
    for (int64_t i = 0; i < total; ++i) {
      n.out.v[i] = A.v[src];
      for (int d = r - 1; d >= 0; --d) {
        ++idx[d];
        src += map_stride[d];
        if (idx[d] < os[d]) break;
        idx[d] = 0;
        src -= map_stride[d] * os[d];
      }
    }
  }
  n.needs_grad = wants(a);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, a, os, map_stride, r, total]() {
      const Tensor<T>& G = nodes_[id].grad;
      Tensor<T>& dA = grad_buf(a);
      std::vector<int64_t> idx(r, 0);
      int64_t src = 0;
      for (int64_t i = 0; i < total; ++i) {
        dA.v[src] += G.v[i];
        for (int d = r - 1; d >= 0; --d) {
          ++idx[d];
          src += map_stride[d];
          if (idx[d] < os[d]) break;
          idx[d] = 0;
          src -= map_stride[d] * os[d];
        }
      }
    };
  }
  return push(std::move(n), "permute");
}

template <typename T>
typename Tape<T>::Id Tape<T>::reshape(Id a, Shape s) {
  const Tensor<T>& A = nodes_[a].out;
  if (shape_numel(s) != A.numel())
    throw ContractViolation("reshape: numel mismatch " + shape_str(A.shape) +
                            " -> " + shape_str(s));
  Node n;
  n.out = Tensor<T>(s, A.v);
  n.needs_grad = wants(a);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, a]() {
      const Tensor<T>& G = nodes_[id].grad;
      Tensor<T>& dA = grad_buf(a);
      for (int64_t i = 0; i < G.numel(); ++i) dA.v[i] += G.v[i];
    };
  }
  return push(std::move(n), "reshape");
}

template <typename T>
typename Tape<T>::Id Tape<T>::gather_rows(Id table, std::vector<int64_t> idx) {
  const Tensor<T>& A = nodes_[table].out;
  if (A.rank() != 2) throw ContractViolation("gather_rows: table must be rank 2");
  const int64_t rows = A.shape[0], d = A.shape[1];
  for (int64_t i : idx)
    if (i < 0 || i >= rows)
      throw ContractViolation("gather_rows: index " + std::to_string(i) +
                              " out of range [0, " + std::to_string(rows) + ")");
  Node n;
  n.out = Tensor<T>({static_cast<int64_t>(idx.size()), d});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(A.data() + idx[i] * d, d, n.out.data() + i * d);
  n.needs_grad = wants(table);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, table, idx = std::move(idx), d]() {
      const Tensor<T>& G = nodes_[id].grad;
      Tensor<T>& dA = grad_buf(table);
      for (size_t i = 0; i < idx.size(); ++i) {
        const T* g = G.data() + i * d;
        T* dst = dA.data() + idx[i] * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
      }
    };
  }
  return push(std::move(n), "gather_rows");
}

template <typename T>
typename Tape<T>::Id Tape<T>::reduce_sum(Id a) {
  const Tensor<T>& A = nodes_[a].out;
  Node n;
  n.out = Tensor<T>({1});
  T s = T(0);
  for (int64_t i = 0; i < A.numel(); ++i) s += A.v[i];
  n.out.v[0] = s;
  n.needs_grad = wants(a);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, a]() {
      const T g = nodes_[id].grad.v[0];
      Tensor<T>& dA = grad_buf(a);
      for (int64_t i = 0; i < dA.numel(); ++i) dA.v[i] += g;
    };
  }
  return push(std::move(n), "reduce_sum");
}

template <typename T>
typename Tape<T>::Id Tape<T>::reduce_mean(Id a) {
  const int64_t n0 = nodes_[a].out.numel();
  return scale(reduce_sum(a), T(1) / static_cast<T>(n0));
}

template <typename T>
typename Tape<T>::Id Tape<T>::bce_masked(Id probs, Tensor<T> target, Tensor<T> mask) {
  const Tensor<T>& P = nodes_[probs].out;
  if (P.shape != target.shape || P.shape != mask.shape)
    throw ContractViolation("bce_masked: shape mismatch " + shape_str(P.shape) +
                            " / " + shape_str(target.shape) + " / " +
                            shape_str(mask.shape));
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  T msum = T(0);
  for (int64_t i = 0; i < mask.numel(); ++i) msum += mask.v[i];
  if (msum <= T(0)) throw ContractViolation("bce_masked: no unmasked cells");
  Node n;
  n.out = Tensor<T>({1});
  T loss = T(0);
  for (int64_t i = 0; i < P.numel(); ++i) {
    if (mask.v[i] <= T(0)) continue;
    T p = std::clamp(P.v[i], lo, hi);
    loss += mask.v[i] * (-target.v[i] * std::log(p) -
                         (T(1) - target.v[i]) * std::log(T(1) - p));
  }
  n.out.v[0] = loss / msum;
  n.needs_grad = wants(probs);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, probs, target = std::move(target), mask = std::move(mask),
              msum, lo, hi]() {
      const T g = nodes_[id].grad.v[0] / msum;
      const Tensor<T>& P2 = nodes_[probs].out;
      Tensor<T>& dP = grad_buf(probs);
      for (int64_t i = 0; i < P2.numel(); ++i) {
        if (mask.v[i] <= T(0)) continue;
        T p = P2.v[i];
        if (p < lo || p > hi) continue;  // clamp region: flat
        dP.v[i] += g * mask.v[i] * (-target.v[i] / p + (T(1) - target.v[i]) / (T(1) - p));
      }
    };
  }
  return push(std::move(n), "bce_masked");
}

template <typename T>
typename Tape<T>::Id Tape<T>::apply_unary(Id a, std::function<T(T)> f,
                                          std::function<T(T)> df) {
  const Tensor<T>& A = nodes_[a].out;
  Node n;
  n.out = Tensor<T>(A.shape);
  for (int64_t i = 0; i < A.numel(); ++i) n.out.v[i] = f(A.v[i]);
  n.needs_grad = wants(a);
  Id id = static_cast<Id>(nodes_.size());
  if (n.needs_grad) {
    n.back = [this, id, a, df = std::move(df)]() {
      const Tensor<T>& G = nodes_[id].grad;
      const Tensor<T>& X = nodes_[a].out;
      Tensor<T>& dA = grad_buf(a);
      for (int64_t i = 0; i < G.numel(); ++i) dA.v[i] += G.v[i] * df(X.v[i]);
    };
  }
  return push(std::move(n), "apply_unary");
}

template <typename T>
void Tape<T>::backward(Id loss) {
  if (nodes_[loss].out.numel() != 1)
    throw ContractViolation("backward: loss must be scalar, got shape " +
                            shape_str(nodes_[loss].out.shape));
  grad_buf(loss).v[0] += T(1);
  for (Id i = loss; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad_live && n.back) n.back();
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace arbor
