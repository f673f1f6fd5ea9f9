#include "cpeft/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "eigen_map.hpp"
#include "op_support.hpp"

namespace cpeft {

using detail::as_matrix;
using detail::record;
using detail::tracking;

namespace {

bool is_suffix(const Shape& whole, const Shape& tail) {
  if (tail.size() > whole.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), whole.rbegin());
}

template <typename S>
std::size_t suffix_inner(const BasicTensor<S>& a, const BasicTensor<S>& b, const char* op) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b.shape()) +
                         " onto " + shape_string(a.shape()));
  }
  return b.numel();
}

template <typename S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

}  // namespace

template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.rank() < b.rank()) return add(b, a);
  const std::size_t inner = suffix_inner(a, b, "add");
  const std::size_t n = a.numel();
  std::vector<S> out(a.values());
  const auto bd = b.data();
  for (std::size_t r = 0; r < n; r += inner)
    for (std::size_t j = 0; j < inner; ++j) out[r + j] += bd[j];
  auto result = BasicTensor<S>::from(a.shape(), std::move(out));
  if (tracking<S>({&a, &b})) {
    record<S>(result, {a, b}, [n, inner](GradContext<S>& g) {
      if (!g.in_grads[0].empty()) {
        for (std::size_t i = 0; i < n; ++i) g.in_grads[0][i] += g.out_grad[i];
      }
      if (!g.in_grads[1].empty()) {
        for (std::size_t r = 0; r < n; r += inner)
          for (std::size_t j = 0; j < inner; ++j) g.in_grads[1][j] += g.out_grad[r + j];
      }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.rank() < b.rank()) return mul(b, a);
  const std::size_t inner = suffix_inner(a, b, "mul");
  const std::size_t n = a.numel();
  std::vector<S> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t r = 0; r < n; r += inner)
    for (std::size_t j = 0; j < inner; ++j) out[r + j] = ad[r + j] * bd[j];
  auto result = BasicTensor<S>::from(a.shape(), std::move(out));
  if (tracking<S>({&a, &b})) {
    record<S>(result, {a, b}, [a, b, n, inner](GradContext<S>& g) {
      const auto ad = a.data();
      const auto bd = b.data();
      if (!g.in_grads[0].empty()) {
        for (std::size_t r = 0; r < n; r += inner)
          for (std::size_t j = 0; j < inner; ++j) g.in_grads[0][r + j] += g.out_grad[r + j] * bd[j];
      }
      if (!g.in_grads[1].empty()) {
        for (std::size_t r = 0; r < n; r += inner)
          for (std::size_t j = 0; j < inner; ++j) g.in_grads[1][j] += g.out_grad[r + j] * ad[r + j];
      }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor) {
  std::vector<S> out(a.values());
  for (auto& v : out) v *= factor;
  auto result = BasicTensor<S>::from(a.shape(), std::move(out));
  if (tracking<S>({&a})) {
    record<S>(result, {a}, [factor](GradContext<S>& g) {
      for (std::size_t i = 0; i < g.out_grad.size(); ++i) g.in_grads[0][i] += factor * g.out_grad[i];
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> silu(const BasicTensor<S>& x) {
  std::vector<S> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * sigmoid(xd[i]);
  auto result = BasicTensor<S>::from(x.shape(), std::move(out));
  if (tracking<S>({&x})) {
    record<S>(result, {x}, [x](GradContext<S>& g) {
      const auto xd = x.data();
      for (std::size_t i = 0; i < xd.size(); ++i) {
        const S s = sigmoid(xd[i]);
        g.in_grads[0][i] += g.out_grad[i] * (s + xd[i] * s * (S(1) - s));
      }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& a) {
  double acc = 0.0;
  for (S v : a.data()) acc += v;
  auto result = BasicTensor<S>::scalar(static_cast<S>(acc));
  if (tracking<S>({&a})) {
    record<S>(result, {a}, [](GradContext<S>& g) {
      for (auto& v : g.in_grads[0]) v += g.out_grad[0];
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  auto result = BasicTensor<S>::from(std::move(shape), a.values());
  if (tracking<S>({&a})) {
    record<S>(result, {a}, [](GradContext<S>& g) {
      for (std::size_t i = 0; i < g.out_grad.size(); ++i) g.in_grads[0][i] += g.out_grad[i];
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);

  // Broadcast batch dimensions, right-aligned.
  const std::size_t nb = std::max(abatch.size(), bbatch.size());
  Shape batch(nb, 1);
  for (std::size_t i = 0; i < nb; ++i) {
    const std::size_t da = i < nb - abatch.size() ? 1 : abatch[i - (nb - abatch.size())];
    const std::size_t db = i < nb - bbatch.size() ? 1 : bbatch[i - (nb - bbatch.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("matmul: batch dimensions of " + shape_string(a.shape()) + " and " +
                           shape_string(b.shape()) + " do not broadcast");
    }
    batch[i] = std::max(da, db);
  }
  std::size_t total = 1;
  for (std::size_t d : batch) total *= d;

  // Map each output batch index to operand batch indices.
  auto operand_index = [&](const Shape& ob, std::size_t flat) {
    std::size_t idx = 0, stride = 1;
    std::size_t rem = flat;
    std::vector<std::size_t> coords(nb);
    for (std::size_t i = nb; i-- > 0;) {
      coords[i] = rem % batch[i];
      rem /= batch[i];
    }
    for (std::size_t i = ob.size(); i-- > 0;) {
      const std::size_t c = coords[i + (nb - ob.size())];
      idx += (ob[i] == 1 ? 0 : c) * stride;
      stride *= ob[i];
    }
    return idx;
  };
  std::vector<std::size_t> ai(total), bi(total);
  for (std::size_t t = 0; t < total; ++t) {
    ai[t] = operand_index(abatch, t);
    bi[t] = operand_index(bbatch, t);
  }

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<S> out(total * m * n);
  const bool fold = bbatch.empty();
  if (fold) {
    as_matrix(out.data(), total * m, n).noalias() =
        as_matrix(a.data().data(), total * m, k) * as_matrix(b.data().data(), k, n);
  } else {
    for (std::size_t t = 0; t < total; ++t) {
      as_matrix(out.data() + t * m * n, m, n).noalias() =
          as_matrix(a.data().data() + ai[t] * m * k, m, k) *
          as_matrix(b.data().data() + bi[t] * k * n, k, n);
    }
  }
  auto result = BasicTensor<S>::from(std::move(out_shape), std::move(out));
  if (tracking<S>({&a, &b})) {
    record<S>(result, {a, b}, [a, b, m, k, n, total, fold, ai, bi](GradContext<S>& g) {
      const S* go = g.out_grad.data();
      if (fold) {
        if (!g.in_grads[0].empty()) {
          as_matrix(g.in_grads[0].data(), total * m, k).noalias() +=
              as_matrix(go, total * m, n) * as_matrix(b.data().data(), k, n).transpose();
        }
        if (!g.in_grads[1].empty()) {
          as_matrix(g.in_grads[1].data(), k, n).noalias() +=
              as_matrix(a.data().data(), total * m, k).transpose() * as_matrix(go, total * m, n);
        }
        return;
      }
      for (std::size_t t = 0; t < total; ++t) {
        const auto dc = as_matrix(go + t * m * n, m, n);
        if (!g.in_grads[0].empty()) {
          as_matrix(g.in_grads[0].data() + ai[t] * m * k, m, k).noalias() +=
              dc * as_matrix(b.data().data() + bi[t] * k * n, k, n).transpose();
        }
        if (!g.in_grads[1].empty()) {
          as_matrix(g.in_grads[1].data() + bi[t] * k * n, k, n).noalias() +=
              as_matrix(a.data().data() + ai[t] * m * k, m, k).transpose() * dc;
        }
      }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> linear(const BasicTensor<S>& x, const BasicTensor<S>& weight,
                      const BasicTensor<S>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t din = weight.dim(0), dout = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout)) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t rows = x.numel() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  std::vector<S> out(rows * dout);
  auto y = as_matrix(out.data(), rows, dout);
  y.noalias() = as_matrix(x.data().data(), rows, din) * as_matrix(weight.data().data(), din, dout);
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
      S* row = out.data() + r * dout;
      for (std::size_t j = 0; j < dout; ++j) row[j] += bd[j];
    }
  }
  auto result = BasicTensor<S>::from(std::move(out_shape), std::move(out));
  if (tracking<S>({&x, &weight, &bias})) {
    record<S>(result, {x, weight, bias}, [x, weight, rows, din, dout](GradContext<S>& g) {
      const auto dy = as_matrix(g.out_grad.data(), rows, dout);
      if (!g.in_grads[0].empty()) {
        as_matrix(g.in_grads[0].data(), rows, din).noalias() +=
            dy * as_matrix(weight.data().data(), din, dout).transpose();
      }
      if (!g.in_grads[1].empty()) {
        as_matrix(g.in_grads[1].data(), din, dout).noalias() +=
            as_matrix(x.data().data(), rows, din).transpose() * dy;
      }
      if (g.in_grads.size() > 2 && !g.in_grads[2].empty()) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < dout; ++j) g.in_grads[2][j] += g.out_grad[r * dout + j];
        }
      }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> softmax_rows(const BasicTensor<S>& x) {
  if (x.rank() < 1) throw DimensionError("softmax_rows: scalar input");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  std::vector<S> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* in = xd.data() + r * n;
    S* o = out.data() + r * n;
    const S mx = *std::max_element(in, in + n);
    S total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  auto result = BasicTensor<S>::from(x.shape(), std::move(out));
  if (tracking<S>({&x})) {
    record<S>(result, {x}, [y = result.detach(), rows, n](GradContext<S>& g) {
      const auto yd = y.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const S* yr = yd.data() + r * n;
        const S* gr = g.out_grad.data() + r * n;
        S dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
        for (std::size_t j = 0; j < n; ++j) g.in_grads[0][r * n + j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> rms_norm(const BasicTensor<S>& x, const BasicTensor<S>& scale, double eps) {
  const std::size_t d = x.dim(-1);
  if (scale.rank() != 1 || scale.dim(0) != d) {
    throw DimensionError("rms_norm: input " + shape_string(x.shape()) + " vs scale " +
                         shape_string(scale.shape()));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<S> out(x.numel());
  std::vector<S> inv_rms(rows);
  const auto xd = x.data();
  const auto sd = scale.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = xd.data() + r * d;
    S ms = 0;
    for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
    ms /= static_cast<S>(d);
    const S inv = S(1) / std::sqrt(ms + static_cast<S>(eps));
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * inv * sd[j];
  }
  auto result = BasicTensor<S>::from(x.shape(), std::move(out));
  if (tracking<S>({&x, &scale})) {
    record<S>(result, {x, scale},
              [x, scale, inv_rms = std::move(inv_rms), rows, d](GradContext<S>& g) {
                const auto xd = x.data();
                const auto sd = scale.data();
                for (std::size_t r = 0; r < rows; ++r) {
                  const S inv = inv_rms[r];
                  const S* xr = xd.data() + r * d;
                  const S* gr = g.out_grad.data() + r * d;
                  if (!g.in_grads[1].empty()) {
                    for (std::size_t j = 0; j < d; ++j) g.in_grads[1][j] += gr[j] * xr[j] * inv;
                  }
                  if (!g.in_grads[0].empty()) {
                    S dot = 0;
                    for (std::size_t j = 0; j < d; ++j) dot += gr[j] * sd[j] * xr[j] * inv;
                    dot /= static_cast<S>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                      g.in_grads[0][r * d + j] += inv * (gr[j] * sd[j] - xr[j] * inv * dot);
                    }
                  }
                }
              });
  }
  return result;
}

template <typename S>
BasicTensor<S> apply_rope(const BasicTensor<S>& x, std::span<const std::size_t> positions,
                          double base) {
  if (x.rank() < 2) throw DimensionError("apply_rope: need [..., L, d_head], got " + shape_string(x.shape()));
  const std::size_t len = x.dim(-2), dh = x.dim(-1);
  if (dh % 2 != 0) throw ConfigError("apply_rope: d_head must be even, got " + std::to_string(dh));
  if (positions.size() != len) {
    throw DimensionError("apply_rope: " + std::to_string(positions.size()) +
                         " positions for sequence length " + std::to_string(len));
  }
  const std::size_t half = dh / 2;
  std::vector<S> cosv(len * half), sinv(len * half);
  for (std::size_t l = 0; l < len; ++l) {
    for (std::size_t i = 0; i < half; ++i) {
      const double theta = static_cast<double>(positions[l]) *
                           std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      cosv[l * half + i] = static_cast<S>(std::cos(theta));
      sinv[l * half + i] = static_cast<S>(std::sin(theta));
    }
  }
  const std::size_t blocks = x.numel() / (len * dh);
  std::vector<S> out(x.numel());
  const auto xd = x.data();
  for (std::size_t bidx = 0; bidx < blocks; ++bidx) {
    for (std::size_t l = 0; l < len; ++l) {
      const std::size_t off = (bidx * len + l) * dh;
      for (std::size_t i = 0; i < half; ++i) {
        const S c = cosv[l * half + i], s = sinv[l * half + i];
        const S x0 = xd[off + 2 * i], x1 = xd[off + 2 * i + 1];
        out[off + 2 * i] = x0 * c - x1 * s;
        out[off + 2 * i + 1] = x0 * s + x1 * c;
      }
    }
  }
  auto result = BasicTensor<S>::from(x.shape(), std::move(out));
  if (tracking<S>({&x})) {
    record<S>(result, {x}, [cosv = std::move(cosv), sinv = std::move(sinv), blocks, len, half,
                            dh](GradContext<S>& g) {
      for (std::size_t bidx = 0; bidx < blocks; ++bidx) {
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t off = (bidx * len + l) * dh;
          for (std::size_t i = 0; i < half; ++i) {
            const S c = cosv[l * half + i], s = sinv[l * half + i];
            const S g0 = g.out_grad[off + 2 * i], g1 = g.out_grad[off + 2 * i + 1];
            g.in_grads[0][off + 2 * i] += g0 * c + g1 * s;
            g.in_grads[0][off + 2 * i + 1] += -g0 * s + g1 * c;
          }
        }
      }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> split_heads(const BasicTensor<S>& x, std::size_t batch, std::size_t heads) {
  if (x.rank() != 2 || x.dim(0) % batch != 0 || x.dim(1) % heads != 0) {
    throw DimensionError("split_heads: cannot split " + shape_string(x.shape()) + " into " +
                         std::to_string(batch) + " sequences of " + std::to_string(heads) +
                         " heads");
  }
  const std::size_t len = x.dim(0) / batch, dh = x.dim(1) / heads, width = x.dim(1);
  std::vector<S> out(x.numel());
  const auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < len; ++l)
        std::copy_n(xd.data() + (b * len + l) * width + h * dh, dh,
                    out.data() + ((b * heads + h) * len + l) * dh);
  auto result = BasicTensor<S>::from({batch, heads, len, dh}, std::move(out));
  if (tracking<S>({&x})) {
    record<S>(result, {x}, [batch, heads, len, dh, width](GradContext<S>& g) {
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t l = 0; l < len; ++l) {
            const S* src = g.out_grad.data() + ((b * heads + h) * len + l) * dh;
            S* dst = g.in_grads[0].data() + (b * len + l) * width + h * dh;
            for (std::size_t e = 0; e < dh; ++e) dst[e] += src[e];
          }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> merge_heads(const BasicTensor<S>& x) {
  if (x.rank() != 4) throw DimensionError("merge_heads: need rank 4, got " + shape_string(x.shape()));
  const std::size_t batch = x.dim(0), heads = x.dim(1), len = x.dim(2), dh = x.dim(3);
  const std::size_t width = heads * dh;
  std::vector<S> out(x.numel());
  const auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < len; ++l)
        std::copy_n(xd.data() + ((b * heads + h) * len + l) * dh, dh,
                    out.data() + (b * len + l) * width + h * dh);
  auto result = BasicTensor<S>::from({batch * len, width}, std::move(out));
  if (tracking<S>({&x})) {
    record<S>(result, {x}, [batch, heads, len, dh, width](GradContext<S>& g) {
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t l = 0; l < len; ++l) {
            const S* src = g.out_grad.data() + (b * len + l) * width + h * dh;
            S* dst = g.in_grads[0].data() + ((b * heads + h) * len + l) * dh;
            for (std::size_t e = 0; e < dh; ++e) dst[e] += src[e];
          }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> causal_attention(const BasicTensor<S>& q, const BasicTensor<S>& k,
                                const BasicTensor<S>& v, BasicTensor<S>* probs) {
  if (q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("causal_attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  const std::size_t groups = q.dim(0) * q.dim(1), len = q.dim(2), dh = q.dim(3);
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<S> p(groups * len * len, S(0));
  std::vector<S> out(q.numel());
  detail::RowMatrix<S> scores(len, len);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t off = gi * len * dh;
    scores.noalias() = as_matrix(q.data().data() + off, len, dh) *
                       as_matrix(k.data().data() + off, len, dh).transpose();
    S* pg = p.data() + gi * len * len;
    for (std::size_t i = 0; i < len; ++i) {
      S mx = -std::numeric_limits<S>::infinity();
      for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, scores(i, j) * inv_sqrt);
      S total = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        const S e = std::exp(scores(i, j) * inv_sqrt - mx);
        pg[i * len + j] = e;
        total += e;
      }
      for (std::size_t j = 0; j <= i; ++j) pg[i * len + j] /= total;
    }
    as_matrix(out.data() + off, len, dh).noalias() =
        as_matrix(static_cast<const S*>(pg), len, len) * as_matrix(v.data().data() + off, len, dh);
  }
  if (probs != nullptr) {
    *probs = BasicTensor<S>::from({q.dim(0), q.dim(1), len, len}, p);
  }
  auto result = BasicTensor<S>::from(q.shape(), std::move(out));
  if (tracking<S>({&q, &k, &v})) {
    record<S>(result, {q, k, v},
              [q, k, v, p = std::move(p), groups, len, dh, inv_sqrt](GradContext<S>& g) {
                detail::RowMatrix<S> dp(len, len), ds(len, len);
                for (std::size_t gi = 0; gi < groups; ++gi) {
                  const std::size_t off = gi * len * dh;
                  const auto pg = as_matrix(p.data() + gi * len * len, len, len);
                  const auto dout = as_matrix(g.out_grad.data() + off, len, dh);
                  if (!g.in_grads[2].empty()) {
                    as_matrix(g.in_grads[2].data() + off, len, dh).noalias() += pg.transpose() * dout;
                  }
                  if (g.in_grads[0].empty() && g.in_grads[1].empty()) continue;
                  dp.noalias() = dout * as_matrix(v.data().data() + off, len, dh).transpose();
                  for (std::size_t i = 0; i < len; ++i) {
                    S dot = 0;
                    for (std::size_t j = 0; j <= i; ++j) dot += dp(i, j) * pg(i, j);
                    for (std::size_t j = 0; j < len; ++j) {
                      ds(i, j) = j <= i ? pg(i, j) * (dp(i, j) - dot) * inv_sqrt : S(0);
                    }
                  }
                  if (!g.in_grads[0].empty()) {
                    as_matrix(g.in_grads[0].data() + off, len, dh).noalias() +=
                        ds * as_matrix(k.data().data() + off, len, dh);
                  }
                  if (!g.in_grads[1].empty()) {
                    as_matrix(g.in_grads[1].data() + off, len, dh).noalias() +=
                        ds.transpose() * as_matrix(q.data().data() + off, len, dh);
                  }
                }
              });
  }
  return result;
}

template <typename S>
BasicTensor<S> swiglu(const BasicTensor<S>& u) {
  const std::size_t fused = u.dim(-1);
  if (fused % 2 != 0) throw DimensionError("swiglu: odd fused width " + std::to_string(fused));
  const std::size_t inner = fused / 2;
  const std::size_t rows = u.numel() / fused;
  Shape out_shape = u.shape();
  out_shape.back() = inner;
  std::vector<S> out(rows * inner);
  const auto ud = u.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* gate = ud.data() + r * fused;
    const S* val = gate + inner;
    for (std::size_t j = 0; j < inner; ++j) out[r * inner + j] = gate[j] * sigmoid(gate[j]) * val[j];
  }
  auto result = BasicTensor<S>::from(std::move(out_shape), std::move(out));
  if (tracking<S>({&u})) {
    record<S>(result, {u}, [u, rows, inner, fused](GradContext<S>& g) {
      const auto ud = u.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const S* gate = ud.data() + r * fused;
        const S* val = gate + inner;
        S* dgate = g.in_grads[0].data() + r * fused;
        S* dval = dgate + inner;
        for (std::size_t j = 0; j < inner; ++j) {
          const S go = g.out_grad[r * inner + j];
          const S s = sigmoid(gate[j]);
          dgate[j] += go * val[j] * (s + gate[j] * s * (S(1) - s));
          dval[j] += go * gate[j] * s;
        }
      }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> gather_rows(const BasicTensor<S>& table, std::span<const TokenId> ids) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be 2-D, got " + shape_string(table.shape()));
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<S> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(rows) + " rows");
    }
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  auto result = BasicTensor<S>::from({ids.size(), d}, std::move(out));
  if (tracking<S>({&table})) {
    record<S>(result, {table}, [ids = std::vector<TokenId>(ids.begin(), ids.end()), d](GradContext<S>& g) {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        S* dst = g.in_grads[0].data() + static_cast<std::size_t>(ids[i]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += g.out_grad[i * d + j];
      }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> replace_rows(const BasicTensor<S>& x, std::span<const std::size_t> rows,
                            const BasicTensor<S>& block) {
  if (x.rank() != 2 || block.rank() != 2 || block.dim(1) != x.dim(1) || block.dim(0) != rows.size()) {
    throw DimensionError("replace_rows: " + std::to_string(rows.size()) + " rows, block " +
                         shape_string(block.shape()) + " into " + shape_string(x.shape()));
  }
  const std::size_t d = x.dim(1);
  std::vector<S> out(x.values());
  std::vector<std::uint8_t> replaced(x.dim(0), 0);
  const auto bd = block.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw DimensionError("replace_rows: row index out of range");
    std::copy_n(bd.data() + i * d, d, out.data() + rows[i] * d);
    replaced[rows[i]] = 1;
  }
  auto result = BasicTensor<S>::from(x.shape(), std::move(out));
  if (tracking<S>({&x, &block})) {
    record<S>(result, {x, block},
              [rows = std::vector<std::size_t>(rows.begin(), rows.end()),
               replaced = std::move(replaced), d](GradContext<S>& g) {
                if (!g.in_grads[0].empty()) {
                  for (std::size_t r = 0; r < replaced.size(); ++r) {
                    if (replaced[r]) continue;
                    for (std::size_t j = 0; j < d; ++j) g.in_grads[0][r * d + j] += g.out_grad[r * d + j];
                  }
                }
                if (!g.in_grads[1].empty()) {
                  for (std::size_t i = 0; i < rows.size(); ++i) {
                    for (std::size_t j = 0; j < d; ++j) {
                      g.in_grads[1][i * d + j] += g.out_grad[rows[i] * d + j];
                    }
                  }
                }
              });
  }
  return result;
}

template <typename S>
BasicTensor<S> concat_rows(std::span<const BasicTensor<S>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  std::vector<S> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rank() < 1 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw DimensionError("concat_rows: " + shape_string(p.shape()) + " does not match " +
                           shape_string(parts[0].shape()));
    }
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    lead += p.dim(0);
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  auto result = BasicTensor<S>::from(std::move(shape), std::move(out));
  bool any = false;
  if (active_tape<S>() != nullptr) {
    for (const auto& p : parts) any = any || p.requires_grad();
  }
  if (any) {
    std::vector<BasicTensor<S>> inputs(parts.begin(), parts.end());
    record<S>(result, inputs, [offsets = std::move(offsets)](GradContext<S>& g) {
      for (std::size_t i = 0; i < g.in_grads.size(); ++i) {
        auto dst = g.in_grads[i];
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g.out_grad[offsets[i] + j];
      }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> dropout(const BasicTensor<S>& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  if (p == 0.0) return x;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  // Two 32-bit draws per engine call; an element drops when its draw is below p * 2^32.
  const auto threshold = static_cast<std::uint64_t>(p * 4294967296.0);
  std::vector<S> mask(x.numel());
  for (std::size_t i = 0; i < mask.size(); i += 2) {
    const std::uint64_t bits = rng.next();
    mask[i] = (bits & 0xFFFFFFFFu) < threshold ? S(0) : keep_scale;
    if (i + 1 < mask.size()) mask[i + 1] = (bits >> 32) < threshold ? S(0) : keep_scale;
  }
  std::vector<S> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  auto result = BasicTensor<S>::from(x.shape(), std::move(out));
  if (tracking<S>({&x})) {
    record<S>(result, {x}, [mask = std::move(mask)](GradContext<S>& g) {
      for (std::size_t i = 0; i < mask.size(); ++i) g.in_grads[0][i] += g.out_grad[i] * mask[i];
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> masked_cross_entropy(const BasicTensor<S>& logits, std::span<const TokenId> targets,
                                    std::span<const std::uint8_t> mask) {
  if (logits.rank() != 2 || targets.size() != logits.dim(0) || mask.size() != logits.dim(0)) {
    throw DimensionError("masked_cross_entropy: logits " + shape_string(logits.shape()) + " with " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw ContractViolation("masked_cross_entropy: empty loss mask");

  const auto ld = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DimensionError("masked_cross_entropy: target " + std::to_string(t) + " outside vocab");
    }
    const S* row = ld.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    total += mx + std::log(z) - static_cast<double>(row[t]);
  }
  auto result = BasicTensor<S>::scalar(static_cast<S>(total / static_cast<double>(count)));
  if (tracking<S>({&logits})) {
    record<S>(result, {logits},
              [logits, targets = std::vector<TokenId>(targets.begin(), targets.end()),
               mask = std::vector<std::uint8_t>(mask.begin(), mask.end()), rows, vocab,
               count](GradContext<S>& g) {
                const S w = g.out_grad[0] / static_cast<S>(count);
                const auto ld = logits.data();
                for (std::size_t r = 0; r < rows; ++r) {
                  if (!mask[r]) continue;
                  const S* row = ld.data() + r * vocab;
                  const S mx = *std::max_element(row, row + vocab);
                  S z = 0;
                  for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
                  S* dst = g.in_grads[0].data() + r * vocab;
                  for (std::size_t j = 0; j < vocab; ++j) dst[j] += w * std::exp(row[j] - mx) / z;
                  dst[targets[r]] -= w;
                }
              });
  }
  return result;
}

template <typename S>
std::vector<double> token_nll(const BasicTensor<S>& logits, std::span<const TokenId> targets) {
  if (logits.rank() != 2 || targets.size() != logits.dim(0)) {
    throw DimensionError("token_nll: logits " + shape_string(logits.shape()) + " with " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t vocab = logits.dim(1);
  std::vector<double> out(targets.size());
  const auto ld = logits.data();
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const S* row = ld.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    const auto t = targets[r];
    out[r] = (t >= 0 && static_cast<std::size_t>(t) < vocab)
                 ? mx + std::log(z) - static_cast<double>(row[t])
                 : 0.0;
  }
  return out;
}

#define CPEFT_INSTANTIATE_OPS(S)                                                                  \
  template BasicTensor<S> add(const BasicTensor<S>&, const BasicTensor<S>&);                      \
  template BasicTensor<S> mul(const BasicTensor<S>&, const BasicTensor<S>&);                      \
  template BasicTensor<S> scale(const BasicTensor<S>&, S);                                        \
  template BasicTensor<S> silu(const BasicTensor<S>&);                                            \
  template BasicTensor<S> sum(const BasicTensor<S>&);                                             \
  template BasicTensor<S> reshape(const BasicTensor<S>&, Shape);                                  \
  template BasicTensor<S> matmul(const BasicTensor<S>&, const BasicTensor<S>&);                   \
  template BasicTensor<S> linear(const BasicTensor<S>&, const BasicTensor<S>&,                    \
                                 const BasicTensor<S>&);                                          \
  template BasicTensor<S> softmax_rows(const BasicTensor<S>&);                                    \
  template BasicTensor<S> rms_norm(const BasicTensor<S>&, const BasicTensor<S>&, double);         \
  template BasicTensor<S> apply_rope(const BasicTensor<S>&, std::span<const std::size_t>, double); \
  template BasicTensor<S> split_heads(const BasicTensor<S>&, std::size_t, std::size_t);           \
  template BasicTensor<S> merge_heads(const BasicTensor<S>&);                                     \
  template BasicTensor<S> causal_attention(const BasicTensor<S>&, const BasicTensor<S>&,          \
                                           const BasicTensor<S>&, BasicTensor<S>*);               \
  template BasicTensor<S> swiglu(const BasicTensor<S>&);                                          \
  template BasicTensor<S> gather_rows(const BasicTensor<S>&, std::span<const TokenId>);           \
  template BasicTensor<S> replace_rows(const BasicTensor<S>&, std::span<const std::size_t>,       \
                                       const BasicTensor<S>&);                                    \
  template BasicTensor<S> concat_rows(std::span<const BasicTensor<S>>);                           \
  template BasicTensor<S> dropout(const BasicTensor<S>&, double, Rng&);                           \
  template BasicTensor<S> masked_cross_entropy(const BasicTensor<S>&, std::span<const TokenId>,   \
                                               std::span<const std::uint8_t>);                    \
  template std::vector<double> token_nll(const BasicTensor<S>&, std::span<const TokenId>);

CPEFT_INSTANTIATE_OPS(float)
CPEFT_INSTANTIATE_OPS(double)

}  // namespace cpeft
