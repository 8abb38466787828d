#include "lcbm/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "lcbm/errors.hpp"

namespace lcbm::ag {
namespace {

using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<std::vector<Tensor>(const Tensor&)>;

Var make_node(Tensor value, std::vector<NodePtr> parents, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& p : parents) node->requires_grad |= p->requires_grad;
  node->parents = std::move(parents);
  node->backward_fn = std::move(fn);
  return Var(std::move(node));
}

void accumulate(Tensor& acc, const Tensor& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  auto& a = acc.data();
  const auto& b = g.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// Post-order over nodes for which keep(node) holds, starting at root.
template <typename Keep>
std::vector<Node*> topo_order(Node* root, Keep keep) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (!keep(root)) return order;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (keep(p) && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename Keep>
std::unordered_map<Node*, Tensor> propagate(Node* root, Tensor seed,
                                            Keep keep) {
  std::unordered_map<Node*, Tensor> grads;
  auto order = topo_order(root, keep);
  grads[root] = std::move(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto g = grads.find(node);
    if (g == grads.end() || !node->backward_fn) continue;
    auto parent_grads = node->backward_fn(g->second);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      Node* p = node->parents[i].get();
      if (i < parent_grads.size() && !parent_grads[i].empty() && keep(p))
        accumulate(grads[p], parent_grads[i]);
    }
  }
  return grads;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.value().shape() != b.value().shape()) {
    throw PreconditionError(std::string(op) + ": shape mismatch " +
                            shape_string(a.value().shape()) + " vs " +
                            shape_string(b.value().shape()));
  }
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw PreconditionError(std::string(op) + ": expected rank " +
                            std::to_string(rank) + ", got " +
                            shape_string(a.value().shape()));
  }
}

}  // namespace

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

void Var::zero_grad() { node_->grad = Tensor(); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_node(std::move(out), {a.node(), b.node()},
                   [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_node(std::move(out), {a.node(), b.node()}, [](const Tensor& g) {
    Tensor neg = g;
    for (auto& v : neg.data()) v = -v;
    return std::vector<Tensor>{g, neg};
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return make_node(std::move(out), {a.node()}, [s](const Tensor& g) {
    Tensor ga = g;
    for (auto& v : ga.data()) v *= s;
    return std::vector<Tensor>{ga};
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  auto shape = a.value().shape();
  return make_node(Tensor({1}, total), {a.node()}, [shape](const Tensor& g) {
    return std::vector<Tensor>{Tensor(shape, g[0])};
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  Tensor in = a.value();
  return make_node(std::move(out), {a.node()}, [in](const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (!(in[i] > 0.0)) ga[i] = 0.0;
    return std::vector<Tensor>{ga};
  });
}

Var tanh(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  Tensor y = out;
  return make_node(std::move(out), {a.node()}, [y](const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 1.0 - y[i] * y[i];
    return std::vector<Tensor>{ga};
  });
}

Var reshape(const Var& a, std::vector<std::size_t> shape) {
  if (shape_numel(shape) != a.value().size())
    throw PreconditionError("reshape: element count mismatch");
  auto old_shape = a.value().shape();
  return make_node(a.value().reshaped(std::move(shape)), {a.node()},
                   [old_shape](const Tensor& g) {
                     return std::vector<Tensor>{g.reshaped(old_shape)};
                   });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  return make_node(a.value().transposed(), {a.node()}, [](const Tensor& g) {
    return std::vector<Tensor>{g.transposed()};
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t n = A.rows(), m = A.cols(), p = B.cols();
  if (B.rows() != m)
    throw PreconditionError("matmul: inner dimensions differ " +
                            shape_string(A.shape()) + " * " +
                            shape_string(B.shape()));
  Tensor out({n, p});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) {
      const double aik = A(i, k);
      for (std::size_t j = 0; j < p; ++j) out(i, j) += aik * B(k, j);
    }
  return make_node(std::move(out), {a.node(), b.node()},
                   [A, B, n, m, p](const Tensor& g) {
                     Tensor ga({n, m}), gb({m, p});
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t k = 0; k < m; ++k) {
                         double acc = 0.0;
                         for (std::size_t j = 0; j < p; ++j) {
                           acc += g(i, j) * B(k, j);
                           gb(k, j) += A(i, k) * g(i, j);
                         }
                         ga(i, k) = acc;
                       }
                     return std::vector<Tensor>{ga, gb};
                   });
}

Var matvec(const Var& w, const Var& x, bool transpose_w) {
  require_rank(w, 2, "matvec");
  require_rank(x, 1, "matvec");
  const Tensor& W = w.value();
  const Tensor& X = x.value();
  const std::size_t out_dim = transpose_w ? W.cols() : W.rows();
  const std::size_t in_dim = transpose_w ? W.rows() : W.cols();
  if (X.size() != in_dim)
    throw PreconditionError("matvec: weight " + shape_string(W.shape()) +
                            " incompatible with input " +
                            shape_string(X.shape()));
  Tensor out({out_dim});
  if (transpose_w) {
    for (std::size_t i = 0; i < in_dim; ++i)
      for (std::size_t o = 0; o < out_dim; ++o) out[o] += W(i, o) * X[i];
  } else {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < in_dim; ++i) acc += W(o, i) * X[i];
      out[o] = acc;
    }
  }
  return make_node(std::move(out), {w.node(), x.node()},
                   [W, X, transpose_w, in_dim, out_dim](const Tensor& g) {
                     Tensor gw(W.shape()), gx({in_dim});
                     for (std::size_t o = 0; o < out_dim; ++o)
                       for (std::size_t i = 0; i < in_dim; ++i) {
                         if (transpose_w) {
                           gw(i, o) = g[o] * X[i];
                           gx[i] += W(i, o) * g[o];
                         } else {
                           gw(o, i) = g[o] * X[i];
                           gx[i] += W(o, i) * g[o];
                         }
                       }
                     return std::vector<Tensor>{gw, gx};
                   });
}

Var mean_rows(const Var& a) {
  require_rank(a, 2, "mean_rows");
  const std::size_t n = a.value().rows(), d = a.value().cols();
  if (n == 0) throw PreconditionError("mean_rows: no rows");
  Tensor out({d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += a.value()(i, j);
  for (auto& v : out.data()) v /= static_cast<double>(n);
  return make_node(std::move(out), {a.node()}, [n, d](const Tensor& g) {
    Tensor ga({n, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j)
        ga(i, j) = g[j] / static_cast<double>(n);
    return std::vector<Tensor>{ga};
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride,
           std::size_t pad) {
  require_rank(x, 3, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const Tensor& X = x.value();
  const Tensor& Wt = w.value();
  const std::size_t C = X.dim(0), H = X.dim(1), Wd = X.dim(2);
  const std::size_t O = Wt.dim(0), kh = Wt.dim(2), kw = Wt.dim(3);
  if (Wt.dim(1) != C)
    throw PreconditionError("conv2d: weight expects " +
                            std::to_string(Wt.dim(1)) + " channels, input has " +
                            std::to_string(C));
  if (b.value().shape() != std::vector<std::size_t>{O})
    throw PreconditionError("conv2d: bias shape mismatch");
  if (stride == 0 || H + 2 * pad < kh || Wd + 2 * pad < kw)
    throw PreconditionError("conv2d: kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (Wd + 2 * pad - kw) / stride + 1;
  Tensor out({O, Ho, Wo});
  const auto& xd = X.data();
  const auto& wd = Wt.data();
  auto& od = out.data();
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double acc = b.value()[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < kh; ++u) {
            const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
            if (yy < 0 || yy >= static_cast<long>(H)) continue;
            for (std::size_t v = 0; v < kw; ++v) {
              const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
              if (xx < 0 || xx >= static_cast<long>(Wd)) continue;
              acc += wd[((o * C + c) * kh + u) * kw + v] *
                     xd[(c * H + yy) * Wd + xx];
            }
          }
        od[(o * Ho + i) * Wo + j] = acc;
      }
  // Constant leaf images (the usual backbone input) never need a gradient.
  const bool need_dx = x.node()->requires_grad || !x.node()->parents.empty();
  auto fn = [X, Wt, C, H, Wd, O, kh, kw, Ho, Wo, stride, pad,
             need_dx](const Tensor& g) {
    Tensor gx, gw(Wt.shape()), gb({O});
    if (need_dx) gx = Tensor(X.shape());
    const auto& xd = X.data();
    const auto& wd = Wt.data();
    const auto& gd = g.data();
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          const double go = gd[(o * Ho + i) * Wo + j];
          if (go == 0.0) continue;
          gb[o] += go;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u) {
              const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
              if (yy < 0 || yy >= static_cast<long>(H)) continue;
              for (std::size_t v = 0; v < kw; ++v) {
                const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (xx < 0 || xx >= static_cast<long>(Wd)) continue;
                const std::size_t wi = ((o * C + c) * kh + u) * kw + v;
                const std::size_t xi = (c * H + yy) * Wd + xx;
                gw[wi] += go * xd[xi];
                if (need_dx) gx[xi] += go * wd[wi];
              }
            }
        }
    return std::vector<Tensor>{gx, gw, gb};
  };
  return make_node(std::move(out), {x.node(), w.node(), b.node()}, fn);
}

Var chw_to_rows(const Var& x) {
  require_rank(x, 3, "chw_to_rows");
  const std::size_t D = x.value().dim(0), H = x.value().dim(1),
                    W = x.value().dim(2);
  return transpose(reshape(x, {D, H * W}));
}

Var cosine_matrix(const Var& a, const Var& b) {
  require_rank(a, 2, "cosine_matrix");
  require_rank(b, 2, "cosine_matrix");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t n = A.rows(), k = B.rows(), d = A.cols();
  if (B.cols() != d)
    throw PreconditionError("cosine_matrix: feature dimensions differ");
  auto norms = [d](const Tensor& M, const char* which) {
    std::vector<double> out(M.rows());
    for (std::size_t i = 0; i < M.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += M(i, j) * M(i, j);
      out[i] = std::sqrt(s);
      if (!(out[i] > 0.0))
        throw PreconditionError(std::string("cosine similarity undefined: ") +
                                which + " row " + std::to_string(i) +
                                " has zero norm");
    }
    return out;
  };
  auto na = norms(A, "left");
  auto nb = norms(B, "right");
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double dot = 0.0;
      for (std::size_t t = 0; t < d; ++t) dot += A(i, t) * B(j, t);
      out(i, j) = dot / (na[i] * nb[j]);
    }
  Tensor C = out;
  return make_node(std::move(out), {a.node(), b.node()},
                   [A, B, C, na, nb, n, k, d](const Tensor& g) {
                     Tensor ga({n, d}), gb({k, d});
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < k; ++j) {
                         const double gij = g(i, j);
                         if (gij == 0.0) continue;
                         const double inv = 1.0 / (na[i] * nb[j]);
                         const double ca = C(i, j) / (na[i] * na[i]);
                         const double cb = C(i, j) / (nb[j] * nb[j]);
                         for (std::size_t t = 0; t < d; ++t) {
                           ga(i, t) += gij * (B(j, t) * inv - ca * A(i, t));
                           gb(j, t) += gij * (A(i, t) * inv - cb * B(j, t));
                         }
                       }
                     return std::vector<Tensor>{ga, gb};
                   });
}

Var softmax_rows(const Var& a) {
  require_rank(a, 2, "softmax_rows");
  const std::size_t n = a.value().rows(), m = a.value().cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    auto r = a.value().row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (out(i, j) = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < m; ++j) out(i, j) /= z;
  }
  Tensor y = out;
  return make_node(std::move(out), {a.node()}, [y, n, m](const Tensor& g) {
    Tensor ga({n, m});
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < m; ++j) ga(i, j) = y(i, j) * (g(i, j) - dot);
    }
    return std::vector<Tensor>{ga};
  });
}

Var gather_columns(const Var& m, const IndexMatrix& idx) {
  require_rank(m, 2, "gather_columns");
  const Tensor& M = m.value();
  if (idx.size() != M.rows())
    throw PreconditionError("gather_columns: index rows differ from matrix rows");
  const std::size_t k1 = idx.empty() ? 0 : idx[0].size();
  Tensor out({M.rows(), k1});
  for (std::size_t i = 0; i < M.rows(); ++i) {
    if (idx[i].size() != k1)
      throw PreconditionError("gather_columns: ragged index matrix");
    for (std::size_t j = 0; j < k1; ++j) {
      if (idx[i][j] >= M.cols())
        throw PreconditionError("gather_columns: concept id " +
                                std::to_string(idx[i][j]) + " out of range");
      out(i, j) = M(i, idx[i][j]);
    }
  }
  auto shape = M.shape();
  return make_node(std::move(out), {m.node()}, [shape, idx, k1](const Tensor& g) {
    Tensor gm(shape);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < k1; ++j) gm(i, idx[i][j]) += g(i, j);
    return std::vector<Tensor>{gm};
  });
}

Var weighted_rows(const Var& w, const Var& p, const IndexMatrix& idx) {
  require_rank(w, 2, "weighted_rows");
  require_rank(p, 2, "weighted_rows");
  const Tensor& Wt = w.value();
  const Tensor& P = p.value();
  const std::size_t n = Wt.rows(), k1 = Wt.cols(), d = P.cols();
  if (idx.size() != n)
    throw PreconditionError("weighted_rows: index rows differ from weight rows");
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i].size() != k1)
      throw PreconditionError("weighted_rows: index width differs from weights");
    for (std::size_t j = 0; j < k1; ++j) {
      if (idx[i][j] >= P.rows())
        throw PreconditionError("weighted_rows: prototype id out of range");
      for (std::size_t t = 0; t < d; ++t) out(i, t) += Wt(i, j) * P(idx[i][j], t);
    }
  }
  return make_node(std::move(out), {w.node(), p.node()},
                   [Wt, P, idx, n, k1, d](const Tensor& g) {
                     Tensor gw({n, k1}), gp(P.shape());
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < k1; ++j) {
                         const std::size_t id = idx[i][j];
                         double acc = 0.0;
                         for (std::size_t t = 0; t < d; ++t) {
                           acc += g(i, t) * P(id, t);
                           gp(id, t) += Wt(i, j) * g(i, t);
                         }
                         gw(i, j) = acc;
                       }
                     return std::vector<Tensor>{gw, gp};
                   });
}

Var cross_entropy(const Var& logits, std::size_t label) {
  require_rank(logits, 1, "cross_entropy");
  const Tensor& z = logits.value();
  if (label >= z.size())
    throw PreconditionError("cross_entropy: label " + std::to_string(label) +
                            " out of range for " + std::to_string(z.size()) +
                            " classes");
  const double mx = *std::max_element(z.data().begin(), z.data().end());
  double s = 0.0;
  for (double v : z.data()) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  Tensor probs(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) probs[i] = std::exp(z[i] - lse);
  return make_node(Tensor({1}, lse - z[label]), {logits.node()},
                   [probs, label](const Tensor& g) {
                     Tensor gz = probs;
                     gz[label] -= 1.0;
                     for (auto& v : gz.data()) v *= g[0];
                     return std::vector<Tensor>{gz};
                   });
}

Var softmax_kl(const Var& v, const Tensor& target, double log_clamp) {
  require_rank(v, 2, "softmax_kl");
  const Tensor& V = v.value();
  const std::size_t K = V.rows(), HW = V.cols();
  require_shape(target, {HW, K}, "softmax_kl target");
  if (!V.all_finite() || !target.all_finite())
    throw NumericError("locality loss: non-finite input");
  Tensor p({K, HW}), a({K, HW});
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double vmax = V(k, 0), tmax = target(0, k);
    for (std::size_t i = 1; i < HW; ++i) {
      vmax = std::max(vmax, V(k, i));
      tmax = std::max(tmax, target(i, k));
    }
    double zv = 0.0, zt = 0.0;
    for (std::size_t i = 0; i < HW; ++i) {
      zv += std::exp(V(k, i) - vmax);
      zt += std::exp(target(i, k) - tmax);
    }
    const double log_zv = std::log(zv);
    for (std::size_t i = 0; i < HW; ++i) {
      const double log_p = V(k, i) - vmax - log_zv;
      const double q = std::exp(target(i, k) - tmax) / zt;
      const double log_q = std::log(std::max(q, log_clamp));
      p(k, i) = std::exp(log_p);
      a(k, i) = log_p - log_q;
      total += p(k, i) * a(k, i);
    }
  }
  return make_node(Tensor({1}, total), {v.node()},
                   [p, a, K, HW](const Tensor& g) {
                     Tensor gv({K, HW});
                     for (std::size_t k = 0; k < K; ++k) {
                       double mean_a = 0.0;
                       for (std::size_t i = 0; i < HW; ++i)
                         mean_a += p(k, i) * a(k, i);
                       for (std::size_t i = 0; i < HW; ++i)
                         gv(k, i) = g[0] * p(k, i) * (a(k, i) - mean_a);
                     }
                     return std::vector<Tensor>{gv};
                   });
}

std::vector<Tensor> grad(const Var& output, const std::vector<Var>& inputs,
                         const Tensor* seed) {
  std::unordered_set<Node*> targets;
  for (const auto& in : inputs) targets.insert(in.node().get());

  // A node is relevant when some input is among its ancestors (or itself).
  std::unordered_map<Node*, bool> memo;
  std::function<bool(Node*)> reaches = [&](Node* n) -> bool {
    if (auto it = memo.find(n); it != memo.end()) return it->second;
    bool r = targets.count(n) > 0;
    for (const auto& p : n->parents) r = reaches(p.get()) || r;
    memo[n] = r;
    return r;
  };
  if (!reaches(output.node().get()))
    throw PreconditionError("grad: output does not depend on the requested inputs");

  Tensor s = seed ? *seed : Tensor(output.value().shape(), 1.0);
  if (s.shape() != output.value().shape())
    throw PreconditionError("grad: seed shape does not match output");
  auto grads = propagate(output.node().get(), std::move(s),
                         [&](Node* n) { return reaches(n); });
  std::vector<Tensor> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = grads.find(in.node().get());
    if (it == grads.end() || it->second.empty()) {
      if (!reaches(in.node().get()))
        throw PreconditionError("grad: input is not connected to the output");
      out.emplace_back(in.value().shape());
    } else {
      out.push_back(std::move(it->second));
    }
  }
  return out;
}

void backward(const Var& loss) {
  if (loss.value().size() != 1)
    throw PreconditionError("backward: loss must be a scalar");
  if (!loss.requires_grad()) return;
  auto grads = propagate(loss.node().get(), Tensor({1}, 1.0),
                         [](Node* n) { return n->requires_grad; });
  for (auto& [node, g] : grads) {
    if (node->parents.empty() && node->requires_grad) accumulate(node->grad, g);
  }
}

}  // namespace lcbm::ag
