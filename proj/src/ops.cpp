#include "caveseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace caveseg {

namespace {

constexpr double kSqrt1_2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

bool recording(std::initializer_list<const Tensor*> ins) {
  if (!GradMode::enabled()) return false;
  for (const Tensor* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

// c[m,n] += a[m,k] * b[k,n]
void mm_nn(const double* a, const double* b, double* c, std::int64_t m,
           std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* cr = c + i * n;
    const double* ar = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = ar[p];
      const double* br = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
void mm_nt(const double* a, const double* b, double* c, std::int64_t m,
           std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    double* cr = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* br = b + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      cr[j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void mm_tn(const double* a, const double* b, double* c, std::int64_t m,
           std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    const double* br = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = ar[p];
      double* cr = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

double gauss_cdf(double x) { return 0.5 * std::erfc(-x * kSqrt1_2); }
double gauss_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> v(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
  const bool rec = recording({&a, &b});
  Tensor out = Tensor::from_data(a.shape(), std::move(v), rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    ComputationTape::active().record(on, [an, bn, on](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      for (const auto& n : {an, bn}) {
        if (!n->requires_grad) continue;
        auto& g = adj.accum(n);
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> v(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
  const bool rec = recording({&a, &b});
  Tensor out = Tensor::from_data(a.shape(), std::move(v), rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    ComputationTape::active().record(on, [an, bn, on](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      if (an->requires_grad) {
        auto& g = adj.accum(an);
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
      }
      if (bn->requires_grad) {
        auto& g = adj.accum(bn);
        for (std::size_t i = 0; i < go.size(); ++i) g[i] -= go[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> v(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
  const bool rec = recording({&a, &b});
  Tensor out = Tensor::from_data(a.shape(), std::move(v), rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    ComputationTape::active().record(on, [an, bn, on](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      if (an->requires_grad) {
        auto& g = adj.accum(an);
        for (std::size_t i = 0; i < go.size(); ++i)
          g[i] += go[i] * bn->values[i];
      }
      if (bn->requires_grad) {
        auto& g = adj.accum(bn);
        for (std::size_t i = 0; i < go.size(); ++i)
          g[i] += go[i] * an->values[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double s) {
  std::vector<double> v(x.values());
  for (double& e : v) e *= s;
  const bool rec = recording({&x});
  Tensor out = Tensor::from_data(x.shape(), std::move(v), rec);
  if (rec) {
    auto xn = x.node(), on = out.node();
    ComputationTape::active().record(on, [xn, on, s](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      auto& g = adj.accum(xn);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * s;
    });
  }
  return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0))
    throw std::invalid_argument("add_row_bias: need [N,C] and [C], got " +
                                shape_str(x.shape()) + " and " +
                                shape_str(bias.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1);
  std::vector<double> v(x.values());
  const auto& bv = bias.values();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < c; ++j) v[i * c + j] += bv[j];
  const bool rec = recording({&x, &bias});
  Tensor out = Tensor::from_data(x.shape(), std::move(v), rec);
  if (rec) {
    auto xn = x.node(), bn = bias.node(), on = out.node();
    ComputationTape::active().record(on, [xn, bn, on, n, c](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      if (xn->requires_grad) {
        auto& g = adj.accum(xn);
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
      }
      if (bn->requires_grad) {
        auto& g = adj.accum(bn);
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < c; ++j) g[j] += go[i * c + j];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const bool rec = recording({&x});
  Tensor out = Tensor::from_data({1}, {acc}, rec);
  if (rec) {
    auto xn = x.node(), on = out.node();
    ComputationTape::active().record(on, [xn, on](Adjoints& adj) {
      const double go = (*adj.find(on.get()))[0];
      auto& g = adj.accum(xn);
      for (double& e : g) e += go;
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<std::size_t>(m * n), 0.0);
  mm_nn(a.values().data(), b.values().data(), v.data(), m, k, n);
  const bool rec = recording({&a, &b});
  Tensor out = Tensor::from_data({m, n}, std::move(v), rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), on = out.node();
    ComputationTape::active().record(on, [an, bn, on, m, k, n](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      if (an->requires_grad)
        mm_nt(go.data(), bn->values.data(), adj.accum(an).data(), m, n, k);
      if (bn->requires_grad)
        mm_tn(an->values.data(), go.data(), adj.accum(bn).data(), m, k, n);
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2)
    throw std::invalid_argument("transpose2d: need rank 2, got " +
                                shape_str(x.shape()));
  const std::int64_t m = x.dim(0), n = x.dim(1);
  std::vector<double> v(static_cast<std::size_t>(m * n));
  const auto& xv = x.values();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) v[j * m + i] = xv[i * n + j];
  const bool rec = recording({&x});
  Tensor out = Tensor::from_data({n, m}, std::move(v), rec);
  if (rec) {
    auto xn = x.node(), on = out.node();
    ComputationTape::active().record(on, [xn, on, m, n](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      auto& g = adj.accum(xn);
      for (std::int64_t j = 0; j < n; ++j)
        for (std::int64_t i = 0; i < m; ++i) g[i * n + j] += go[j * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw std::invalid_argument("reshape: cannot view " +
                                shape_str(x.shape()) + " as " +
                                shape_str(shape));
  const bool rec = recording({&x});
  Tensor out = Tensor::from_data(std::move(shape), x.values(), rec);
  if (rec) {
    auto xn = x.node(), on = out.node();
    ComputationTape::active().record(on, [xn, on](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      auto& g = adj.accum(xn);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const int r = xs[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("concat: bad axis " + std::to_string(axis));
  Shape out_shape = xs[0].shape();
  std::int64_t axis_total = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != r)
      throw std::invalid_argument("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && t.shape()[d] != out_shape[static_cast<std::size_t>(d)])
        throw std::invalid_argument("concat: shape mismatch " +
                                    shape_str(t.shape()) + " vs " +
                                    shape_str(out_shape));
    axis_total += t.shape()[static_cast<std::size_t>(axis)];
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < r; ++d)
    inner *= out_shape[static_cast<std::size_t>(d)];

  std::vector<double> v(static_cast<std::size_t>(outer * axis_total * inner));
  std::int64_t offset = 0;
  for (const Tensor& t : xs) {
    const std::int64_t da = t.shape()[static_cast<std::size_t>(axis)];
    const auto& tv = t.values();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(tv.data() + o * da * inner, da * inner,
                  v.data() + (o * axis_total + offset) * inner);
    offset += da;
  }

  bool rec = false;
  for (const Tensor& t : xs) rec = rec || recording({&t});
  Tensor out = Tensor::from_data(std::move(out_shape), std::move(v), rec);
  if (rec) {
    std::vector<std::shared_ptr<TensorData>> ins;
    std::vector<std::int64_t> axis_dims;
    for (const Tensor& t : xs) {
      ins.push_back(t.node());
      axis_dims.push_back(t.shape()[static_cast<std::size_t>(axis)]);
    }
    auto on = out.node();
    ComputationTape::active().record(
        on, [ins, axis_dims, on, outer, inner, axis_total](Adjoints& adj) {
          const auto& go = *adj.find(on.get());
          std::int64_t offset = 0;
          for (std::size_t k = 0; k < ins.size(); ++k) {
            const std::int64_t da = axis_dims[k];
            if (ins[k]->requires_grad) {
              auto& g = adj.accum(ins[k]);
              for (std::int64_t o = 0; o < outer; ++o) {
                const double* src = go.data() + (o * axis_total + offset) * inner;
                double* dst = g.data() + o * da * inner;
                for (std::int64_t i = 0; i < da * inner; ++i) dst[i] += src[i];
              }
            }
            offset += da;
          }
        });
  }
  return out;
}

Tensor gather(const Tensor& src, Shape out_shape,
              std::vector<std::int64_t> idx) {
  const std::int64_t n = shape_numel(out_shape);
  if (n != static_cast<std::int64_t>(idx.size()))
    throw std::invalid_argument("gather: index count " +
                                std::to_string(idx.size()) +
                                " does not match shape " + shape_str(out_shape));
  const std::int64_t sn = src.numel();
  const auto& sv = src.values();
  std::vector<double> v(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t j = idx[static_cast<std::size_t>(i)];
    if (j >= sn || j < -1)
      throw std::invalid_argument("gather: index " + std::to_string(j) +
                                  " out of range for " +
                                  shape_str(src.shape()));
    v[static_cast<std::size_t>(i)] = j < 0 ? 0.0 : sv[static_cast<std::size_t>(j)];
  }
  const bool rec = recording({&src});
  Tensor out = Tensor::from_data(std::move(out_shape), std::move(v), rec);
  if (rec) {
    auto sn_ = src.node();
    auto on = out.node();
    ComputationTape::active().record(
        on, [sn_, on, idx = std::move(idx)](Adjoints& adj) {
          const auto& go = *adj.find(on.get());
          auto& g = adj.accum(sn_);
          for (std::size_t i = 0; i < idx.size(); ++i)
            if (idx[i] >= 0) g[static_cast<std::size_t>(idx[i])] += go[i];
        });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("softmax: axis out of range for " +
                                shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  const std::int64_t d = x.shape()[static_cast<std::size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i)
    inner *= x.shape()[static_cast<std::size_t>(i)];

  std::vector<double> v(x.values().size());
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * d * inner + in;
      double mx = xv[static_cast<std::size_t>(base)];
      for (std::int64_t c = 1; c < d; ++c)
        mx = std::max(mx, xv[static_cast<std::size_t>(base + c * inner)]);
      double tot = 0.0;
      for (std::int64_t c = 0; c < d; ++c) {
        const double e = std::exp(xv[static_cast<std::size_t>(base + c * inner)] - mx);
        v[static_cast<std::size_t>(base + c * inner)] = e;
        tot += e;
      }
      for (std::int64_t c = 0; c < d; ++c)
        v[static_cast<std::size_t>(base + c * inner)] /= tot;
    }
  }
  const bool rec = recording({&x});
  Tensor out = Tensor::from_data(x.shape(), std::move(v), rec);
  if (rec) {
    auto xn = x.node(), on = out.node();
    ComputationTape::active().record(
        on, [xn, on, outer, inner, d](Adjoints& adj) {
          const auto& go = *adj.find(on.get());
          const auto& y = on->values;
          auto& g = adj.accum(xn);
          for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
              const std::int64_t base = o * d * inner + in;
              double dot = 0.0;
              for (std::int64_t c = 0; c < d; ++c) {
                const std::size_t i = static_cast<std::size_t>(base + c * inner);
                dot += go[i] * y[i];
              }
              for (std::int64_t c = 0; c < d; ++c) {
                const std::size_t i = static_cast<std::size_t>(base + c * inner);
                g[i] += y[i] * (go[i] - dot);
              }
            }
          }
        });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (eps <= 0.0)
    throw std::invalid_argument("layer_norm: eps must be positive");
  const std::int64_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw std::invalid_argument("layer_norm: affine params must match last dim " +
                                std::to_string(d) + ", got " +
                                shape_str(gamma.shape()) + " and " +
                                shape_str(beta.shape()));
  const std::int64_t rows = x.numel() / d;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();

  std::vector<double> v(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (std::int64_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * is;
      xhat[static_cast<std::size_t>(r * d + j)] = xh;
      v[static_cast<std::size_t>(r * d + j)] = gv[static_cast<std::size_t>(j)] * xh +
                                               bv[static_cast<std::size_t>(j)];
    }
  }
  const bool rec = recording({&x, &gamma, &beta});
  Tensor out = Tensor::from_data(x.shape(), std::move(v), rec);
  if (rec) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    ComputationTape::active().record(
        on, [xn, gn, bn, on, rows, d, xhat = std::move(xhat),
             inv_std = std::move(inv_std)](Adjoints& adj) {
          const auto& go = *adj.find(on.get());
          if (gn->requires_grad) {
            auto& gg = adj.accum(gn);
            for (std::int64_t r = 0; r < rows; ++r)
              for (std::int64_t j = 0; j < d; ++j)
                gg[static_cast<std::size_t>(j)] +=
                    go[static_cast<std::size_t>(r * d + j)] *
                    xhat[static_cast<std::size_t>(r * d + j)];
          }
          if (bn->requires_grad) {
            auto& gb = adj.accum(bn);
            for (std::int64_t r = 0; r < rows; ++r)
              for (std::int64_t j = 0; j < d; ++j)
                gb[static_cast<std::size_t>(j)] +=
                    go[static_cast<std::size_t>(r * d + j)];
          }
          if (xn->requires_grad) {
            auto& gx = adj.accum(xn);
            const auto& gv = gn->values;
            for (std::int64_t r = 0; r < rows; ++r) {
              double m1 = 0.0, m2 = 0.0;
              for (std::int64_t j = 0; j < d; ++j) {
                const std::size_t i = static_cast<std::size_t>(r * d + j);
                const double h = go[i] * gv[static_cast<std::size_t>(j)];
                m1 += h;
                m2 += h * xhat[i];
              }
              m1 /= static_cast<double>(d);
              m2 /= static_cast<double>(d);
              const double is = inv_std[static_cast<std::size_t>(r)];
              for (std::int64_t j = 0; j < d; ++j) {
                const std::size_t i = static_cast<std::size_t>(r * d + j);
                const double h = go[i] * gv[static_cast<std::size_t>(j)];
                gx[i] += (h - m1 - xhat[i] * m2) * is;
              }
            }
          }
        });
  }
  return out;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int groups, double eps) {
  if (eps <= 0.0)
    throw std::invalid_argument("group_norm: eps must be positive");
  if (x.rank() != 3)
    throw std::invalid_argument("group_norm: need [C,H,W], got " +
                                shape_str(x.shape()));
  const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (groups < 1 || c % groups != 0)
    throw std::invalid_argument("group_norm: groups " + std::to_string(groups) +
                                " must divide channels " + std::to_string(c));
  if (gamma.numel() != c || beta.numel() != c)
    throw std::invalid_argument("group_norm: affine params must have " +
                                std::to_string(c) + " channels");
  const std::int64_t cg = c / groups;
  const std::int64_t gsz = cg * hw;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();

  std::vector<double> v(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(static_cast<std::size_t>(groups));
  for (std::int64_t g = 0; g < groups; ++g) {
    const double* blk = xv.data() + g * gsz;
    double mean = 0.0;
    for (std::int64_t i = 0; i < gsz; ++i) mean += blk[i];
    mean /= static_cast<double>(gsz);
    double var = 0.0;
    for (std::int64_t i = 0; i < gsz; ++i) {
      const double d = blk[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(gsz);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(g)] = is;
    for (std::int64_t i = 0; i < gsz; ++i) {
      const std::int64_t flat = g * gsz + i;
      const std::int64_t ch = flat / hw;
      const double xh = (blk[i] - mean) * is;
      xhat[static_cast<std::size_t>(flat)] = xh;
      v[static_cast<std::size_t>(flat)] = gv[static_cast<std::size_t>(ch)] * xh +
                                          bv[static_cast<std::size_t>(ch)];
    }
  }
  const bool rec = recording({&x, &gamma, &beta});
  Tensor out = Tensor::from_data(x.shape(), std::move(v), rec);
  if (rec) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    ComputationTape::active().record(
        on, [xn, gn, bn, on, groups, gsz, hw, xhat = std::move(xhat),
             inv_std = std::move(inv_std)](Adjoints& adj) {
          const auto& go = *adj.find(on.get());
          if (gn->requires_grad) {
            auto& gg = adj.accum(gn);
            for (std::size_t i = 0; i < go.size(); ++i)
              gg[i / static_cast<std::size_t>(hw)] += go[i] * xhat[i];
          }
          if (bn->requires_grad) {
            auto& gb = adj.accum(bn);
            for (std::size_t i = 0; i < go.size(); ++i)
              gb[i / static_cast<std::size_t>(hw)] += go[i];
          }
          if (xn->requires_grad) {
            auto& gx = adj.accum(xn);
            const auto& gv = gn->values;
            for (std::int64_t g = 0; g < groups; ++g) {
              double m1 = 0.0, m2 = 0.0;
              for (std::int64_t i = 0; i < gsz; ++i) {
                const std::size_t flat = static_cast<std::size_t>(g * gsz + i);
                const double h = go[flat] * gv[flat / static_cast<std::size_t>(hw)];
                m1 += h;
                m2 += h * xhat[flat];
              }
              m1 /= static_cast<double>(gsz);
              m2 /= static_cast<double>(gsz);
              const double is = inv_std[static_cast<std::size_t>(g)];
              for (std::int64_t i = 0; i < gsz; ++i) {
                const std::size_t flat = static_cast<std::size_t>(g * gsz + i);
                const double h = go[flat] * gv[flat / static_cast<std::size_t>(hw)];
                gx[flat] += (h - m1 - xhat[flat] * m2) * is;
              }
            }
          }
        });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  std::vector<double> v(x.values());
  for (double& e : v) e *= gauss_cdf(e);
  const bool rec = recording({&x});
  Tensor out = Tensor::from_data(x.shape(), std::move(v), rec);
  if (rec) {
    auto xn = x.node(), on = out.node();
    ComputationTape::active().record(on, [xn, on](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      auto& g = adj.accum(xn);
      for (std::size_t i = 0; i < go.size(); ++i) {
        const double xi = xn->values[i];
        g[i] += go[i] * (gauss_cdf(xi) + xi * gauss_pdf(xi));
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  std::vector<double> v(x.values());
  for (double& e : v) e = e > 0.0 ? e : 0.0;
  const bool rec = recording({&x});
  Tensor out = Tensor::from_data(x.shape(), std::move(v), rec);
  if (rec) {
    auto xn = x.node(), on = out.node();
    ComputationTape::active().record(on, [xn, on](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      auto& g = adj.accum(xn);
      for (std::size_t i = 0; i < go.size(); ++i)
        if (xn->values[i] > 0.0) g[i] += go[i];
    });
  }
  return out;
}

namespace {

struct Conv2dDims {
  std::int64_t ci, h, w, co, kh, kw, ho, wo;
};

Conv2dDims conv2d_dims(const Tensor& x, const Tensor& w, const Tensor& bias,
                       int stride, int padding) {
  if (x.rank() != 3 || w.rank() != 4)
    throw std::invalid_argument("conv2d: need x [C,H,W] and w [Co,Ci,kh,kw], got " +
                                shape_str(x.shape()) + " and " +
                                shape_str(w.shape()));
  if (stride <= 0)
    throw std::invalid_argument("conv2d: stride must be positive, got " +
                                std::to_string(stride));
  if (padding < 0)
    throw std::invalid_argument("conv2d: padding must be non-negative");
  Conv2dDims d;
  d.ci = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.co = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  if (w.dim(1) != d.ci)
    throw std::invalid_argument("conv2d: channel mismatch " +
                                shape_str(x.shape()) + " vs " +
                                shape_str(w.shape()));
  if (d.kh > d.h + 2 * padding || d.kw > d.w + 2 * padding)
    throw std::invalid_argument("conv2d: kernel " + shape_str(w.shape()) +
                                " larger than padded input " +
                                shape_str(x.shape()));
  if (bias.defined() && bias.numel() != d.co)
    throw std::invalid_argument("conv2d: bias size mismatch");
  d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
  d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding) {
  const Conv2dDims d = conv2d_dims(x, w, bias, stride, padding);
  const std::int64_t s = stride, p = padding;
  std::vector<double> v(static_cast<std::size_t>(d.co * d.ho * d.wo), 0.0);
  const double* xa = x.values().data();
  const double* wa = w.values().data();

  if (bias.defined()) {
    const auto& bv = bias.values();
    for (std::int64_t co = 0; co < d.co; ++co)
      std::fill_n(v.data() + co * d.ho * d.wo, d.ho * d.wo,
                  bv[static_cast<std::size_t>(co)]);
  }
  for (std::int64_t co = 0; co < d.co; ++co) {
    for (std::int64_t ci = 0; ci < d.ci; ++ci) {
      const double* xc = xa + ci * d.h * d.w;
      for (std::int64_t ky = 0; ky < d.kh; ++ky) {
        for (std::int64_t kx = 0; kx < d.kw; ++kx) {
          const double wv = wa[((co * d.ci + ci) * d.kh + ky) * d.kw + kx];
          if (wv == 0.0) continue;
          const std::int64_t ox_lo = std::max<std::int64_t>(0, ceil_div(p - kx, s));
          const std::int64_t ox_hi =
              std::min(d.wo - 1, (d.w - 1 + p - kx) / s);
          for (std::int64_t oy = 0; oy < d.ho; ++oy) {
            const std::int64_t iy = oy * s + ky - p;
            if (iy < 0 || iy >= d.h) continue;
            const double* xrow = xc + iy * d.w + kx - p;
            double* orow = v.data() + (co * d.ho + oy) * d.wo;
            if (s == 1) {
              for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                orow[ox] += wv * xrow[ox];
            } else {
              for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                orow[ox] += wv * xrow[ox * s];
            }
          }
        }
      }
    }
  }

  const bool rec = recording({&x, &w, &bias});
  Tensor out = Tensor::from_data({d.co, d.ho, d.wo}, std::move(v), rec);
  if (rec) {
    auto xn = x.node(), wn = w.node(), on = out.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    ComputationTape::active().record(on, [xn, wn, bn, on, d, s, p](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      if (bn && bn->requires_grad) {
        auto& gb = adj.accum(bn);
        for (std::int64_t co = 0; co < d.co; ++co) {
          double acc = 0.0;
          const double* orow = go.data() + co * d.ho * d.wo;
          for (std::int64_t i = 0; i < d.ho * d.wo; ++i) acc += orow[i];
          gb[static_cast<std::size_t>(co)] += acc;
        }
      }
      if (xn->requires_grad) {
        auto& gx = adj.accum(xn);
        const double* wa = wn->values.data();
        for (std::int64_t co = 0; co < d.co; ++co) {
          for (std::int64_t ci = 0; ci < d.ci; ++ci) {
            double* gxc = gx.data() + ci * d.h * d.w;
            for (std::int64_t ky = 0; ky < d.kh; ++ky) {
              for (std::int64_t kx = 0; kx < d.kw; ++kx) {
                const double wv = wa[((co * d.ci + ci) * d.kh + ky) * d.kw + kx];
                if (wv == 0.0) continue;
                const std::int64_t ox_lo =
                    std::max<std::int64_t>(0, ceil_div(p - kx, s));
                const std::int64_t ox_hi =
                    std::min(d.wo - 1, (d.w - 1 + p - kx) / s);
                for (std::int64_t oy = 0; oy < d.ho; ++oy) {
                  const std::int64_t iy = oy * s + ky - p;
                  if (iy < 0 || iy >= d.h) continue;
                  double* gxrow = gxc + iy * d.w + kx - p;
                  const double* orow = go.data() + (co * d.ho + oy) * d.wo;
                  for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                    gxrow[ox * s] += wv * orow[ox];
                }
              }
            }
          }
        }
      }
      if (wn->requires_grad) {
        auto& gw = adj.accum(wn);
        const double* xa = xn->values.data();
        for (std::int64_t co = 0; co < d.co; ++co) {
          for (std::int64_t ci = 0; ci < d.ci; ++ci) {
            const double* xc = xa + ci * d.h * d.w;
            for (std::int64_t ky = 0; ky < d.kh; ++ky) {
              for (std::int64_t kx = 0; kx < d.kw; ++kx) {
                const std::int64_t ox_lo =
                    std::max<std::int64_t>(0, ceil_div(p - kx, s));
                const std::int64_t ox_hi =
                    std::min(d.wo - 1, (d.w - 1 + p - kx) / s);
                double acc = 0.0;
                for (std::int64_t oy = 0; oy < d.ho; ++oy) {
                  const std::int64_t iy = oy * s + ky - p;
                  if (iy < 0 || iy >= d.h) continue;
                  const double* xrow = xc + iy * d.w + kx - p;
                  const double* orow = go.data() + (co * d.ho + oy) * d.wo;
                  for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                    acc += orow[ox] * xrow[ox * s];
                }
                gw[static_cast<std::size_t>(
                    ((co * d.ci + ci) * d.kh + ky) * d.kw + kx)] += acc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor adaptive_avg_pool2d(const Tensor& x, int out_h, int out_w) {
  if (x.rank() != 3)
    throw std::invalid_argument("adaptive_avg_pool2d: need [C,H,W], got " +
                                shape_str(x.shape()));
  if (out_h <= 0 || out_w <= 0)
    throw std::invalid_argument("adaptive_avg_pool2d: output size must be positive");
  const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h > h || out_w > w)
    throw std::invalid_argument("adaptive_avg_pool2d: output " +
                                std::to_string(out_h) + "x" +
                                std::to_string(out_w) +
                                " exceeds input " + shape_str(x.shape()));
  const std::int64_t oh = out_h, ow = out_w;
  const auto& xv = x.values();
  std::vector<double> v(static_cast<std::size_t>(c * oh * ow));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t i = 0; i < oh; ++i) {
      const std::int64_t y0 = i * h / oh;
      const std::int64_t y1 = ((i + 1) * h + oh - 1) / oh;
      for (std::int64_t j = 0; j < ow; ++j) {
        const std::int64_t x0 = j * w / ow;
        const std::int64_t x1 = ((j + 1) * w + ow - 1) / ow;
        double acc = 0.0;
        for (std::int64_t y = y0; y < y1; ++y)
          for (std::int64_t xx = x0; xx < x1; ++xx)
            acc += xv[static_cast<std::size_t>((ch * h + y) * w + xx)];
        v[static_cast<std::size_t>((ch * oh + i) * ow + j)] =
            acc / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  }
  const bool rec = recording({&x});
  Tensor out = Tensor::from_data({c, oh, ow}, std::move(v), rec);
  if (rec) {
    auto xn = x.node(), on = out.node();
    ComputationTape::active().record(on, [xn, on, c, h, w, oh, ow](Adjoints& adj) {
      const auto& go = *adj.find(on.get());
      auto& g = adj.accum(xn);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t i = 0; i < oh; ++i) {
          const std::int64_t y0 = i * h / oh;
          const std::int64_t y1 = ((i + 1) * h + oh - 1) / oh;
          for (std::int64_t j = 0; j < ow; ++j) {
            const std::int64_t x0 = j * w / ow;
            const std::int64_t x1 = ((j + 1) * w + ow - 1) / ow;
            const double share =
                go[static_cast<std::size_t>((ch * oh + i) * ow + j)] /
                static_cast<double>((y1 - y0) * (x1 - x0));
            for (std::int64_t y = y0; y < y1; ++y)
              for (std::int64_t xx = x0; xx < x1; ++xx)
                g[static_cast<std::size_t>((ch * h + y) * w + xx)] += share;
          }
        }
      }
    });
  }
  return out;
}

namespace {

struct ResizeAxis {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> frac;
};

ResizeAxis resize_axis(std::int64_t in, std::int64_t out) {
  ResizeAxis a;
  a.i0.resize(static_cast<std::size_t>(out));
  a.i1.resize(static_cast<std::size_t>(out));
  a.frac.resize(static_cast<std::size_t>(out));
  const double r = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double s = (static_cast<double>(o) + 0.5) * r - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const std::int64_t lo = static_cast<std::int64_t>(std::floor(s));
    a.i0[static_cast<std::size_t>(o)] = lo;
    a.i1[static_cast<std::size_t>(o)] = std::min(lo + 1, in - 1);
    a.frac[static_cast<std::size_t>(o)] = s - static_cast<double>(lo);
  }
  return a;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  if (x.rank() != 3)
    throw std::invalid_argument("bilinear_resize: need [C,H,W], got " +
                                shape_str(x.shape()));
  if (out_h <= 0 || out_w <= 0)
    throw std::invalid_argument("bilinear_resize: target size must be positive");
  const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::int64_t oh = out_h, ow = out_w;
  const ResizeAxis ay = resize_axis(h, oh);
  const ResizeAxis ax = resize_axis(w, ow);
  const auto& xv = x.values();
  std::vector<double> v(static_cast<std::size_t>(c * oh * ow));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double* xc = xv.data() + ch * h * w;
    double* oc = v.data() + ch * oh * ow;
    for (std::int64_t i = 0; i < oh; ++i) {
      const double fy = ay.frac[static_cast<std::size_t>(i)];
      const double* r0 = xc + ay.i0[static_cast<std::size_t>(i)] * w;
      const double* r1 = xc + ay.i1[static_cast<std::size_t>(i)] * w;
      for (std::int64_t j = 0; j < ow; ++j) {
        const double fx = ax.frac[static_cast<std::size_t>(j)];
        const std::int64_t x0 = ax.i0[static_cast<std::size_t>(j)];
        const std::int64_t x1 = ax.i1[static_cast<std::size_t>(j)];
        const double top = r0[x0] + (r0[x1] - r0[x0]) * fx;
        const double bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
        oc[i * ow + j] = top + (bot - top) * fy;
      }
    }
  }
  const bool rec = recording({&x});
  Tensor out = Tensor::from_data({c, oh, ow}, std::move(v), rec);
  if (rec) {
    auto xn = x.node(), on = out.node();
    ComputationTape::active().record(
        on, [xn, on, c, h, w, oh, ow, ay, ax](Adjoints& adj) {
          const auto& go = *adj.find(on.get());
          auto& g = adj.accum(xn);
          for (std::int64_t ch = 0; ch < c; ++ch) {
            double* gc = g.data() + ch * h * w;
            const double* oc = go.data() + ch * oh * ow;
            for (std::int64_t i = 0; i < oh; ++i) {
              const double fy = ay.frac[static_cast<std::size_t>(i)];
              const std::int64_t y0 = ay.i0[static_cast<std::size_t>(i)];
              const std::int64_t y1 = ay.i1[static_cast<std::size_t>(i)];
              for (std::int64_t j = 0; j < ow; ++j) {
                const double fx = ax.frac[static_cast<std::size_t>(j)];
                const std::int64_t x0 = ax.i0[static_cast<std::size_t>(j)];
                const std::int64_t x1 = ax.i1[static_cast<std::size_t>(j)];
                const double d = oc[i * ow + j];
                gc[y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                gc[y0 * w + x1] += d * (1.0 - fy) * fx;
                gc[y1 * w + x0] += d * fy * (1.0 - fx);
                gc[y1 * w + x1] += d * fy * fx;
              }
            }
          }
        });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits,
                     const std::vector<std::int32_t>& labels,
                     int ignore_index) {
  if (logits.rank() < 1)
    throw std::invalid_argument("cross_entropy: logits must have a class axis");
  const std::int64_t m = logits.shape()[0];
  const std::int64_t n = logits.numel() / m;
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy: got " +
                                std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " pixels");
  const auto& lv = logits.values();
  std::vector<double> probs(lv.size(), 0.0);
  double total = 0.0;
  std::int64_t scored = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int32_t y = labels[static_cast<std::size_t>(i)];
    if (y == ignore_index) continue;
    if (y < 0 || y >= m)
      throw std::runtime_error("cross_entropy: label " + std::to_string(y) +
                               " out of range [0," + std::to_string(m) +
                               ") at pixel " + std::to_string(i));
    double mx = lv[static_cast<std::size_t>(i)];
    for (std::int64_t c = 1; c < m; ++c)
      mx = std::max(mx, lv[static_cast<std::size_t>(c * n + i)]);
    double tot = 0.0;
    for (std::int64_t c = 0; c < m; ++c)
      tot += std::exp(lv[static_cast<std::size_t>(c * n + i)] - mx);
    const double lse = mx + std::log(tot);
    total += lse - lv[static_cast<std::size_t>(y * n + i)];
    for (std::int64_t c = 0; c < m; ++c)
      probs[static_cast<std::size_t>(c * n + i)] =
          std::exp(lv[static_cast<std::size_t>(c * n + i)] - lse);
    ++scored;
  }
  if (scored == 0)
    throw std::runtime_error("cross_entropy: every pixel carries the ignore "
                             "index; mean loss undefined");
  const double loss = total / static_cast<double>(scored);
  const bool rec = recording({&logits});
  Tensor out = Tensor::from_data({1}, {loss}, rec);
  if (rec) {
    auto ln = logits.node(), on = out.node();
    ComputationTape::active().record(
        on, [ln, on, labels, ignore_index, m, n, scored,
             probs = std::move(probs)](Adjoints& adj) {
          const double go = (*adj.find(on.get()))[0];
          auto& g = adj.accum(ln);
          const double inv = go / static_cast<double>(scored);
          for (std::int64_t i = 0; i < n; ++i) {
            const std::int32_t y = labels[static_cast<std::size_t>(i)];
            if (y == ignore_index) continue;
            for (std::int64_t c = 0; c < m; ++c) {
              const std::size_t k = static_cast<std::size_t>(c * n + i);
              g[k] += inv * (probs[k] - (c == y ? 1.0 : 0.0));
            }
          }
        });
  }
  return out;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double h) {
  if (h <= 0.0)
    throw std::invalid_argument("finite_difference_gradient: h must be positive");
  NoGradGuard guard;
  std::vector<double> g(x.values().size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    std::vector<double> vp(x.values());
    std::vector<double> vm(x.values());
    vp[i] += h;
    vm[i] -= h;
    const double fp = f(Tensor::from_data(x.shape(), std::move(vp)));
    const double fm = f(Tensor::from_data(x.shape(), std::move(vm)));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor::from_data(x.shape(), std::move(g));
}

}  // namespace caveseg
