#include "lsd/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "lsd/errors.hpp"

namespace lsd::ag {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool rg = false;
  for (auto& p : parents) {
    rg = rg || p.requires_grad();
    n->parents.push_back(p.node());
  }
  n->requires_grad = rg;
  if (rg) n->backprop = std::move(backprop);
  return Var(std::move(n));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
}

std::int64_t row_count(const Tensor& t) {
  if (t.ndim() < 1) throw ShapeError("expected tensor with a last dimension");
  return t.size() / t.dim(-1);
}

}  // namespace

void Node::accumulate(const Tensor& g) {
  if (!grad_ready) {
    grad = Tensor::zeros(value.shape());
    grad_ready = true;
  }
  if (!grad.same_shape(g)) throw ShapeError("gradient shape mismatch");
  for (std::int64_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (!root.defined() || root.val().size() != 1)
    throw ShapeError("backward: root must be a scalar");
  // Iterative topological order over the requires_grad subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->accumulate(Tensor::scalar(1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad_ready) n->backprop(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "add");
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += b.val()[i];
  return make(std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "sub");
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= b.val()[i];
  return make(std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor g = n.grad;
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] = -g[i];
      n.parents[1]->accumulate(g);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "mul");
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= b.val()[i];
  return make(std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor g = n.grad;
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] *= n.parents[1]->value[i];
      n.parents[0]->accumulate(g);
    }
    if (n.parents[1]->requires_grad) {
      Tensor g = n.grad;
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] *= n.parents[0]->value[i];
      n.parents[1]->accumulate(g);
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= c;
  return make(std::move(out), {a}, [c](Node& n) {
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.size(); ++i) g[i] *= c;
    n.parents[0]->accumulate(g);
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += c;
  return make(std::move(out), {a}, [](Node& n) { n.parents[0]->accumulate(n.grad); });
}

Var silu(const Var& a) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-out[i]));
    out[i] *= s;
  }
  return make(std::move(out), {a}, [](Node& n) {
    Tensor g = n.grad;
    const Tensor& x = n.parents[0]->value;
    for (std::int64_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      g[i] *= s * (1.0 + x[i] * (1.0 - s));
    }
    n.parents[0]->accumulate(g);
  });
}

Var square(const Var& a) { return mul(a, a); }

// ---------------------------------------------------------------------- shape

Var reshape(const Var& a, std::vector<std::int64_t> shape) {
  if (Tensor::count(shape) != a.val().size())
    throw ShapeError("reshape: element count mismatch");
  Tensor out(std::move(shape), a.val().vec());
  return make(std::move(out), {a}, [](Node& n) {
    Tensor g(n.parents[0]->value.shape(), n.grad.vec());
    n.parents[0]->accumulate(g);
  });
}

Var slice_lastdim(const Var& a, std::int64_t start, std::int64_t len) {
  const Tensor& x = a.val();
  const std::int64_t d = x.dim(-1);
  if (start < 0 || len <= 0 || start + len > d) throw ShapeError("slice_lastdim: out of range");
  const std::int64_t rows = row_count(x);
  auto shape = x.shape();
  shape.back() = len;
  Tensor out(shape);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < len; ++j) out[r * len + j] = x[r * d + start + j];
  return make(std::move(out), {a}, [start, len, d, rows](Node& n) {
    Tensor g = Tensor::zeros(n.parents[0]->value.shape());
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < len; ++j) g[r * d + start + j] = n.grad[r * len + j];
    n.parents[0]->accumulate(g);
  });
}

Var split_heads(const Var& x, int heads) {
  const Tensor& v = x.val();
  if (v.ndim() != 3) throw ShapeError("split_heads: expected (B,L,d)");
  const std::int64_t B = v.dim(0), L = v.dim(1), d = v.dim(2);
  if (d % heads != 0) throw ShapeError("split_heads: d not divisible by heads");
  const std::int64_t hd = d / heads;
  Tensor out({B, heads, L, hd});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t l = 0; l < L; ++l)
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t j = 0; j < hd; ++j)
          out[((b * heads + h) * L + l) * hd + j] = v[(b * L + l) * d + h * hd + j];
  return make(std::move(out), {x}, [B, L, d, heads, hd](Node& n) {
    Tensor g({B, L, d});
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t j = 0; j < hd; ++j)
            g[(b * L + l) * d + h * hd + j] = n.grad[((b * heads + h) * L + l) * hd + j];
    n.parents[0]->accumulate(g);
  });
}

Var merge_heads(const Var& x) {
  const Tensor& v = x.val();
  if (v.ndim() != 4) throw ShapeError("merge_heads: expected (B,H,L,hd)");
  const std::int64_t B = v.dim(0), H = v.dim(1), L = v.dim(2), hd = v.dim(3);
  Tensor out({B, L, H * hd});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t j = 0; j < hd; ++j)
          out[(b * L + l) * H * hd + h * hd + j] = v[((b * H + h) * L + l) * hd + j];
  return make(std::move(out), {x}, [B, H, L, hd](Node& n) {
    Tensor g({B, H, L, hd});
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t l = 0; l < L; ++l)
          for (std::int64_t j = 0; j < hd; ++j)
            g[((b * H + h) * L + l) * hd + j] = n.grad[(b * L + l) * H * hd + h * hd + j];
    n.parents[0]->accumulate(g);
  });
}

// ----------------------------------------------------------------- reductions

Var sum_all(const Var& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.val().size(); ++i) s += a.val()[i];
  return make(Tensor::scalar(s), {a}, [](Node& n) {
    Tensor g = Tensor::full(n.parents[0]->value.shape(), n.grad[0]);
    n.parents[0]->accumulate(g);
  });
}

// ------------------------------------------------------------------ broadcast

Var add_rowvec(const Var& x, const Var& v) {
  const std::int64_t d = x.val().dim(-1);
  if (v.val().size() != d) throw ShapeError("add_rowvec: vector length mismatch");
  const std::int64_t rows = row_count(x.val());
  Tensor out = x.val();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < d; ++j) out[r * d + j] += v.val()[j];
  return make(std::move(out), {x, v}, [rows, d](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor gv = Tensor::zeros(n.parents[1]->value.shape());
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) gv[j] += n.grad[r * d + j];
      n.parents[1]->accumulate(gv);
    }
  });
}

Var mul_rowvec(const Var& x, const Var& v) {
  const std::int64_t d = x.val().dim(-1);
  if (v.val().size() != d) throw ShapeError("mul_rowvec: vector length mismatch");
  const std::int64_t rows = row_count(x.val());
  Tensor out = x.val();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < d; ++j) out[r * d + j] *= v.val()[j];
  return make(std::move(out), {x, v}, [rows, d](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor g = n.grad;
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) g[r * d + j] *= n.parents[1]->value[j];
      n.parents[0]->accumulate(g);
    }
    if (n.parents[1]->requires_grad) {
      Tensor gv = Tensor::zeros(n.parents[1]->value.shape());
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j)
          gv[j] += n.grad[r * d + j] * n.parents[0]->value[r * d + j];
      n.parents[1]->accumulate(gv);
    }
  });
}

Var mask_rows(const Var& x, const std::vector<double>& rowmask) {
  const std::int64_t d = x.val().dim(-1);
  const std::int64_t rows = row_count(x.val());
  if (static_cast<std::int64_t>(rowmask.size()) != rows)
    throw ShapeError("mask_rows: mask length mismatch");
  Tensor out = x.val();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < d; ++j) out[r * d + j] *= rowmask[static_cast<std::size_t>(r)];
  return make(std::move(out), {x}, [rowmask, rows, d](Node& n) {
    Tensor g = n.grad;
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < d; ++j) g[r * d + j] *= rowmask[static_cast<std::size_t>(r)];
    n.parents[0]->accumulate(g);
  });
}

// -------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.ndim() < 2 || B.ndim() < 2) throw ShapeError("matmul: need >=2 dims");
  const std::int64_t M = A.dim(-2), K = A.dim(-1);
  if (B.dim(-2) != K) throw ShapeError("matmul: inner dimension mismatch");
  const std::int64_t N = B.dim(-1);
  const std::int64_t batchA = A.size() / (M * K);
  const std::int64_t batchB = B.size() / (K * N);
  const bool bcastB = (B.ndim() == 2);
  if (!bcastB && batchA != batchB) throw ShapeError("matmul: batch dimension mismatch");

  std::vector<std::int64_t> shape(A.shape().begin(), A.shape().end() - 1);
  shape.push_back(N);
  Tensor out(shape);
  for (std::int64_t t = 0; t < batchA; ++t) {
    CMatMap Am(A.data() + t * M * K, M, K);
    CMatMap Bm(B.data() + (bcastB ? 0 : t * K * N), K, N);
    MatMap Om(out.data() + t * M * N, M, N);
    Om.noalias() = Am * Bm;
  }
  return make(std::move(out), {a, b}, [M, K, N, batchA, bcastB](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor gA = Tensor::zeros(n.parents[0]->value.shape());
      for (std::int64_t t = 0; t < batchA; ++t) {
        CMatMap Gm(n.grad.data() + t * M * N, M, N);
        CMatMap Bm(n.parents[1]->value.data() + (bcastB ? 0 : t * K * N), K, N);
        MatMap gAm(gA.data() + t * M * K, M, K);
        gAm.noalias() = Gm * Bm.transpose();
      }
      n.parents[0]->accumulate(gA);
    }
    if (n.parents[1]->requires_grad) {
      Tensor gB = Tensor::zeros(n.parents[1]->value.shape());
      for (std::int64_t t = 0; t < batchA; ++t) {
        CMatMap Gm(n.grad.data() + t * M * N, M, N);
        CMatMap Am(n.parents[0]->value.data() + t * M * K, M, K);
        MatMap gBm(gB.data() + (bcastB ? 0 : t * K * N), K, N);
        gBm.noalias() += Am.transpose() * Gm;
      }
      n.parents[1]->accumulate(gB);
    }
  });
}

Var layernorm(const Var& x, double eps) {
  const Tensor& v = x.val();
  const std::int64_t d = v.dim(-1);
  const std::int64_t rows = row_count(v);
  Tensor out(v.shape());
  Tensor inv_std({rows});
  for (std::int64_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += v[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = v[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::int64_t j = 0; j < d; ++j) out[r * d + j] = (v[r * d + j] - mu) * inv;
  }
  Tensor y = out;  // captured for backward
  return make(std::move(out), {x}, [rows, d, inv_std, y](Node& n) {
    Tensor g(n.parents[0]->value.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
      double mean_dy = 0.0, mean_dyy = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        mean_dy += n.grad[r * d + j];
        mean_dyy += n.grad[r * d + j] * y[r * d + j];
      }
      mean_dy /= static_cast<double>(d);
      mean_dyy /= static_cast<double>(d);
      for (std::int64_t j = 0; j < d; ++j)
        g[r * d + j] = inv_std[r] * (n.grad[r * d + j] - mean_dy - y[r * d + j] * mean_dyy);
    }
    n.parents[0]->accumulate(g);
  });
}

// ------------------------------------------------------------ gather / scatter

Var gather_rows(const Var& x, const std::vector<std::int64_t>& rows) {
  const std::int64_t d = x.val().dim(-1);
  const std::int64_t R = row_count(x.val());
  const std::int64_t N = static_cast<std::int64_t>(rows.size());
  Tensor out({N, d});
  for (std::int64_t i = 0; i < N; ++i) {
    const std::int64_t r = rows[static_cast<std::size_t>(i)];
    if (r < 0 || r >= R) throw ShapeError("gather_rows: index out of range");
    for (std::int64_t j = 0; j < d; ++j) out[i * d + j] = x.val()[r * d + j];
  }
  return make(std::move(out), {x}, [rows, d](Node& n) {
    Tensor g = Tensor::zeros(n.parents[0]->value.shape());
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::int64_t j = 0; j < d; ++j)
        g[rows[i] * d + j] += n.grad[static_cast<std::int64_t>(i) * d + j];
    n.parents[0]->accumulate(g);
  });
}

Var add_at_rows(const Var& x, const std::vector<std::int64_t>& rows, const Var& v) {
  const std::int64_t d = x.val().dim(-1);
  const std::int64_t R = row_count(x.val());
  if (v.val().size() != d) throw ShapeError("add_at_rows: vector length mismatch");
  Tensor out = x.val();
  for (auto r : rows) {
    if (r < 0 || r >= R) throw ShapeError("add_at_rows: index out of range");
    for (std::int64_t j = 0; j < d; ++j) out[r * d + j] += v.val()[j];
  }
  return make(std::move(out), {x, v}, [rows, d](Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor gv = Tensor::zeros(n.parents[1]->value.shape());
      for (auto r : rows)
        for (std::int64_t j = 0; j < d; ++j) gv[j] += n.grad[r * d + j];
      n.parents[1]->accumulate(gv);
    }
  });
}

Var embedding(const Var& table, const std::vector<int>& ids, std::int64_t batch,
              std::int64_t len) {
  const Tensor& T = table.val();
  if (T.ndim() != 2) throw ShapeError("embedding: table must be (V,d)");
  const std::int64_t V = T.dim(0), d = T.dim(1);
  if (static_cast<std::int64_t>(ids.size()) != batch * len)
    throw ShapeError("embedding: id count mismatch");
  Tensor out({batch, len, d});
  for (std::int64_t i = 0; i < batch * len; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= V) throw ShapeError("embedding: id out of vocabulary");
    for (std::int64_t j = 0; j < d; ++j) out[i * d + j] = T[id * d + j];
  }
  return make(std::move(out), {table}, [ids, d](Node& n) {
    Tensor g = Tensor::zeros(n.parents[0]->value.shape());
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::int64_t j = 0; j < d; ++j)
        g[static_cast<std::int64_t>(ids[i]) * d + j] += n.grad[static_cast<std::int64_t>(i) * d + j];
    n.parents[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------- domain ops

namespace {

void rope_apply(const Tensor& in, Tensor& out, const std::vector<std::int64_t>& positions,
                double base, double sign) {
  const std::int64_t B = in.dim(0), H = in.dim(1), L = in.dim(2), hd = in.dim(3);
  const std::int64_t half = hd / 2;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t l = 0; l < L; ++l) {
        const double pos = static_cast<double>(positions[static_cast<std::size_t>(l)]);
        const std::int64_t off = ((b * H + h) * L + l) * hd;
        for (std::int64_t j = 0; j < half; ++j) {
          const double theta =
              sign * pos * std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(hd));
          const double c = std::cos(theta), s = std::sin(theta);
          const double x0 = in[off + 2 * j], x1 = in[off + 2 * j + 1];
          out[off + 2 * j] = c * x0 - s * x1;
          out[off + 2 * j + 1] = s * x0 + c * x1;
        }
      }
}

}  // namespace

Var rope(const Var& x, const std::vector<std::int64_t>& positions, double base) {
  const Tensor& v = x.val();
  if (v.ndim() != 4) throw ShapeError("rope: expected (B,H,L,hd)");
  if (v.dim(3) % 2 != 0) throw ConfigError("rope: head dimension must be even");
  if (static_cast<std::int64_t>(positions.size()) != v.dim(2))
    throw ShapeError("rope: positions length mismatch");
  Tensor out(v.shape());
  rope_apply(v, out, positions, base, 1.0);
  return make(std::move(out), {x}, [positions, base](Node& n) {
    // Inverse rotation transposes the block-diagonal rotation matrix.
    Tensor g(n.grad.shape());
    rope_apply(n.grad, g, positions, base, -1.0);
    n.parents[0]->accumulate(g);
  });
}

Var attention(const Var& q, const Var& k, const Var& v,
              const std::vector<std::uint8_t>& key_mask, Tensor* capture) {
  const Tensor& Q = q.val();
  check_same_shape(Q, k.val(), "attention(q,k)");
  check_same_shape(Q, v.val(), "attention(q,v)");
  if (Q.ndim() != 4) throw ShapeError("attention: expected (B,H,L,hd)");
  const std::int64_t B = Q.dim(0), H = Q.dim(1), L = Q.dim(2), hd = Q.dim(3);
  if (static_cast<std::int64_t>(key_mask.size()) != B * L)
    throw ShapeError("attention: key_mask length mismatch");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  auto probs = std::make_shared<Tensor>(Tensor::zeros({B, H, L, L}));
  Tensor out({B, H, L, hd});
  for (std::int64_t b = 0; b < B; ++b) {
    bool any_key = false;
    for (std::int64_t j = 0; j < L; ++j) any_key = any_key || key_mask[b * L + j];
    if (!any_key) throw NumericError("attention: all keys masked for a query row");
    for (std::int64_t h = 0; h < H; ++h) {
      CMatMap Qm(Q.data() + (b * H + h) * L * hd, L, hd);
      CMatMap Km(k.val().data() + (b * H + h) * L * hd, L, hd);
      CMatMap Vm(v.val().data() + (b * H + h) * L * hd, L, hd);
      Eigen::MatrixXd S = (Qm * Km.transpose()) * inv_sqrt;
      MatMap Pm(probs->data() + (b * H + h) * L * L, L, L);
      for (std::int64_t i = 0; i < L; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < L; ++j)
          if (key_mask[b * L + j]) mx = std::max(mx, S(i, j));
        double z = 0.0;
        for (std::int64_t j = 0; j < L; ++j) {
          const double p = key_mask[b * L + j] ? std::exp(S(i, j) - mx) : 0.0;
          Pm(i, j) = p;
          z += p;
        }
        for (std::int64_t j = 0; j < L; ++j) Pm(i, j) /= z;
      }
      MatMap Om(out.data() + (b * H + h) * L * hd, L, hd);
      Om.noalias() = Pm * Vm;
    }
  }
  if (capture) *capture = *probs;
  return make(std::move(out), {q, k, v}, [B, H, L, hd, inv_sqrt, probs](Node& n) {
    Tensor gQ = Tensor::zeros({B, H, L, hd});
    Tensor gK = Tensor::zeros({B, H, L, hd});
    Tensor gV = Tensor::zeros({B, H, L, hd});
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < H; ++h) {
        const std::int64_t off = (b * H + h) * L * hd;
        CMatMap Qm(n.parents[0]->value.data() + off, L, hd);
        CMatMap Km(n.parents[1]->value.data() + off, L, hd);
        CMatMap Vm(n.parents[2]->value.data() + off, L, hd);
        CMatMap Gm(n.grad.data() + off, L, hd);
        CMatMap Pm(probs->data() + (b * H + h) * L * L, L, L);
        MatMap gQm(gQ.data() + off, L, hd);
        MatMap gKm(gK.data() + off, L, hd);
        MatMap gVm(gV.data() + off, L, hd);
        gVm.noalias() = Pm.transpose() * Gm;
        Eigen::MatrixXd dP = Gm * Vm.transpose();
        Eigen::VectorXd rowdot = (dP.array() * Pm.array()).rowwise().sum();
        Eigen::MatrixXd dS =
            Pm.array() * (dP.array().colwise() - rowdot.array());
        gQm.noalias() = (dS * Km) * inv_sqrt;
        gKm.noalias() = (dS.transpose() * Qm) * inv_sqrt;
      }
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(gQ);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(gK);
    if (n.parents[2]->requires_grad) n.parents[2]->accumulate(gV);
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& targets,
                  const std::vector<double>& weights) {
  const Tensor& X = logits.val();
  if (X.ndim() != 3) throw ShapeError("cross_entropy: expected (B,L,C)");
  const std::int64_t C = X.dim(2);
  const std::int64_t R = X.size() / C;
  if (static_cast<std::int64_t>(targets.size()) != R ||
      static_cast<std::int64_t>(weights.size()) != R)
    throw ShapeError("cross_entropy: target/weight length mismatch");
  double wsum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw NumericError("cross_entropy: negative weight");
    wsum += w;
  }
  if (wsum <= 0.0) throw NumericError("cross_entropy: zero total weight");

  // Cache per-position softmax for the backward pass.
  auto soft = std::make_shared<Tensor>(Tensor::zeros({R, C}));
  double loss = 0.0;
  for (std::int64_t r = 0; r < R; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, X[r * C + c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
      const double e = std::exp(X[r * C + c] - mx);
      (*soft)[r * C + c] = e;
      z += e;
    }
    for (std::int64_t c = 0; c < C; ++c) (*soft)[r * C + c] /= z;
    const double w = weights[static_cast<std::size_t>(r)];
    if (w > 0.0) {
      const int t = targets[static_cast<std::size_t>(r)];
      if (t < 0 || t >= C) throw ShapeError("cross_entropy: target out of range");
      loss -= w * std::log((*soft)[r * C + t]);
    }
  }
  loss /= wsum;
  return make(Tensor::scalar(loss), {logits}, [targets, weights, wsum, soft, R, C](Node& n) {
    const double g0 = n.grad[0] / wsum;
    Tensor g = Tensor::zeros(n.parents[0]->value.shape());
    for (std::int64_t r = 0; r < R; ++r) {
      const double w = weights[static_cast<std::size_t>(r)];
      if (w <= 0.0) continue;
      for (std::int64_t c = 0; c < C; ++c) g[r * C + c] = g0 * w * (*soft)[r * C + c];
      g[r * C + targets[static_cast<std::size_t>(r)]] -= g0 * w;
    }
    n.parents[0]->accumulate(g);
  });
}

Var kl_norm_univariate_rows(const Var& rows, double var_floor) {
  const Tensor& X = rows.val();
  if (X.ndim() != 2) throw ShapeError("kl_norm_univariate_rows: expected (N,d)");
  const std::int64_t N = X.dim(0), d = X.dim(1);
  if (N < 2) throw NumericError("kl_norm_univariate_rows: needs at least 2 rows");
  std::vector<double> mu(static_cast<std::size_t>(d), 0.0), var(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t a = 0; a < N; ++a)
    for (std::int64_t i = 0; i < d; ++i) mu[static_cast<std::size_t>(i)] += X[a * d + i];
  for (auto& m : mu) m /= static_cast<double>(N);
  for (std::int64_t a = 0; a < N; ++a)
    for (std::int64_t i = 0; i < d; ++i) {
      const double c = X[a * d + i] - mu[static_cast<std::size_t>(i)];
      var[static_cast<std::size_t>(i)] += c * c;
    }
  for (auto& v : var) v /= static_cast<double>(N);

  double loss = 0.0;
  for (std::int64_t i = 0; i < d; ++i) {
    const double m = mu[static_cast<std::size_t>(i)], v = var[static_cast<std::size_t>(i)];
    if (!std::isfinite(m) || !std::isfinite(v))
      throw NumericError("kl_norm_univariate_rows: non-finite moments");
    loss += m * m + v - std::log(std::max(v, var_floor)) - 1.0;
  }
  loss /= 2.0 * static_cast<double>(d);
  return make(Tensor::scalar(loss), {rows}, [mu, var, var_floor, N, d](Node& n) {
    const double pref = n.grad[0] / (2.0 * static_cast<double>(d));
    Tensor g({N, d});
    for (std::int64_t i = 0; i < d; ++i) {
      const double m = mu[static_cast<std::size_t>(i)], v = var[static_cast<std::size_t>(i)];
      // d(var)/dx affects both the v summand and -log(v) (0 below the floor).
      const double cvar = 1.0 - (v > var_floor ? 1.0 / v : 0.0);
      for (std::int64_t a = 0; a < N; ++a) {
        const double x = n.parents[0]->value[a * d + i];
        g[a * d + i] = pref * (2.0 * m / N + cvar * 2.0 * (x - m) / N);
      }
    }
    n.parents[0]->accumulate(g);
  });
}

Var kl_norm_multivariate_rows(const Var& rows, double ridge) {
  const Tensor& X = rows.val();
  if (X.ndim() != 2) throw ShapeError("kl_norm_multivariate_rows: expected (N,d)");
  const std::int64_t N = X.dim(0), d = X.dim(1);
  if (N < 2) throw NumericError("kl_norm_multivariate_rows: needs at least 2 rows");
  CMatMap Xm(X.data(), N, d);
  Eigen::VectorXd mu = Xm.colwise().mean();
  Eigen::MatrixXd centered = Xm.rowwise() - mu.transpose();
  Eigen::MatrixXd sigma =
      (centered.transpose() * centered) / static_cast<double>(N) +
      ridge * Eigen::MatrixXd::Identity(d, d);
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw NumericError("kl_norm_multivariate_rows: covariance singular after regularization");
  double logdet = 0.0;
  for (std::int64_t i = 0; i < d; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  const double tr = sigma.trace() - ridge * static_cast<double>(d);
  const double loss =
      (mu.squaredNorm() + tr - logdet - static_cast<double>(d)) / (2.0 * static_cast<double>(d));
  auto inv = std::make_shared<Eigen::MatrixXd>(
      llt.solve(Eigen::MatrixXd::Identity(d, d)));
  auto mu_keep = std::make_shared<Eigen::VectorXd>(mu);
  return make(Tensor::scalar(loss), {rows}, [inv, mu_keep, N, d](Node& n) {
    const double pref = n.grad[0] / (2.0 * static_cast<double>(d));
    CMatMap Xm(n.parents[0]->value.data(), N, d);
    Eigen::MatrixXd centered = Xm.rowwise() - mu_keep->transpose();
    // d(mu'mu) = 2mu/N, d(tr S) = 2c/N, d(logdet) = 2 S^{-1} c / N per row.
    Eigen::MatrixXd G = centered * (Eigen::MatrixXd::Identity(d, d) - *inv).transpose() *
                            (2.0 / static_cast<double>(N)) +
                        Eigen::MatrixXd::Ones(N, 1) * mu_keep->transpose() *
                            (2.0 / static_cast<double>(N));
    G *= pref;
    Tensor g({N, d});
    for (std::int64_t a = 0; a < N; ++a)
      for (std::int64_t i = 0; i < d; ++i) g[a * d + i] = G(a, i);
    n.parents[0]->accumulate(g);
  });
}

Var mean_pool(const Var& x, const std::vector<std::uint8_t>& mask) {
  const Tensor& v = x.val();
  if (v.ndim() != 3) throw ShapeError("mean_pool: expected (B,L,d)");
  const std::int64_t B = v.dim(0), L = v.dim(1), d = v.dim(2);
  if (static_cast<std::int64_t>(mask.size()) != B * L)
    throw ShapeError("mean_pool: mask length mismatch");
  Tensor out({B, d});
  std::vector<double> counts(static_cast<std::size_t>(B), 0.0);
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t l = 0; l < L; ++l)
      if (mask[b * L + l]) {
        counts[static_cast<std::size_t>(b)] += 1.0;
        for (std::int64_t j = 0; j < d; ++j) out[b * d + j] += v[(b * L + l) * d + j];
      }
    if (counts[static_cast<std::size_t>(b)] == 0.0)
      throw NumericError("mean_pool: empty residue mask in row " + std::to_string(b));
    for (std::int64_t j = 0; j < d; ++j) out[b * d + j] /= counts[static_cast<std::size_t>(b)];
  }
  return make(std::move(out), {x}, [mask, counts, B, L, d](Node& n) {
    Tensor g = Tensor::zeros(n.parents[0]->value.shape());
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t l = 0; l < L; ++l)
        if (mask[b * L + l])
          for (std::int64_t j = 0; j < d; ++j)
            g[(b * L + l) * d + j] = n.grad[b * d + j] / counts[static_cast<std::size_t>(b)];
    n.parents[0]->accumulate(g);
  });
}

}  // namespace lsd::ag
