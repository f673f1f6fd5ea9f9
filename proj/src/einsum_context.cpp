#include "cpeft/einsum_context.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include "eigen_map.hpp"
#include "op_support.hpp"

namespace cpeft {

using detail::as_matrix;

namespace {

struct ScratchCounter {
  std::size_t current = 0;
  std::size_t peak = 0;
};

ScratchCounter& scratch_counter() {
  thread_local ScratchCounter counter;
  return counter;
}

// Heap buffer whose size is charged to the per-thread scratch counter.
template <typename S>
class ScratchBuffer {
 public:
  explicit ScratchBuffer(std::size_t n) : data_(n) {
    auto& c = scratch_counter();
    c.current += n;
    c.peak = std::max(c.peak, c.current);
  }
  ~ScratchBuffer() { scratch_counter().current -= data_.size(); }
  ScratchBuffer(const ScratchBuffer&) = delete;
  ScratchBuffer& operator=(const ScratchBuffer&) = delete;
  S* data() { return data_.data(); }

 private:
  std::vector<S> data_;
};

struct Dims {
  std::size_t rows, contexts, d_in, rank, d_out;
};

template <typename S>
Dims check_dims(const BasicTensor<S>& x, const BasicTensor<S>& a, const BasicTensor<S>& b,
                std::span<const ContextId> contexts) {
  if (x.rank() < 1 || a.rank() != 3 || b.rank() != 3 || a.dim(1) != x.dim(-1) ||
      b.dim(0) != a.dim(0) || b.dim(1) != a.dim(2)) {
    throw DimensionError("einsum_context: x " + shape_string(x.shape()) + ", A " +
                         shape_string(a.shape()) + ", B " + shape_string(b.shape()));
  }
  Dims dims{x.numel() / x.dim(-1), a.dim(0), a.dim(1), a.dim(2), b.dim(2)};
  if (contexts.size() != dims.rows) {
    throw DimensionError("einsum_context: " + std::to_string(contexts.size()) +
                         " context ids for " + std::to_string(dims.rows) + " rows");
  }
  for (ContextId c : contexts) {
    if (c < 0 || static_cast<std::size_t>(c) >= dims.contexts) {
      throw RoutingError("einsum_context: context id " + std::to_string(c) + " outside [0, " +
                         std::to_string(dims.contexts) + ")");
    }
  }
  return dims;
}

// Row indices grouped by context id.
std::vector<std::vector<std::size_t>> group_rows(std::span<const ContextId> contexts,
                                                 std::size_t count) {
  std::vector<std::vector<std::size_t>> groups(count);
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    groups[static_cast<std::size_t>(contexts[i])].push_back(i);
  }
  return groups;
}

}  // namespace

std::size_t einsum_scratch_peak() { return scratch_counter().peak; }

void reset_einsum_scratch_peak() { scratch_counter().peak = scratch_counter().current; }

template <typename S>
BasicTensor<S> einsum_context(const BasicTensor<S>& x, const BasicTensor<S>& a,
                              const BasicTensor<S>& b, std::span<const ContextId> contexts) {
  const Dims dm = check_dims(x, a, b, contexts);
  const auto groups = group_rows(contexts, dm.contexts);

  Shape out_shape = x.shape();
  out_shape.back() = dm.d_out;
  std::vector<S> out(dm.rows * dm.d_out, S(0));
  ScratchBuffer<S> xs(dm.rows * dm.d_in), ts(dm.rows * dm.rank), ys(dm.rows * dm.d_out);
  const S* xd = x.data().data();
  for (std::size_t c = 0; c < dm.contexts; ++c) {
    const auto& idx = groups[c];
    if (idx.empty()) continue;
    const std::size_t n = idx.size();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(xd + idx[i] * dm.d_in, dm.d_in, xs.data() + i * dm.d_in);
    }
    auto t = as_matrix(ts.data(), n, dm.rank);
    t.noalias() = as_matrix(static_cast<const S*>(xs.data()), n, dm.d_in) *
                  as_matrix(a.data().data() + c * dm.d_in * dm.rank, dm.d_in, dm.rank);
    as_matrix(ys.data(), n, dm.d_out).noalias() =
        t * as_matrix(b.data().data() + c * dm.rank * dm.d_out, dm.rank, dm.d_out);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(ys.data() + i * dm.d_out, dm.d_out, out.data() + idx[i] * dm.d_out);
    }
  }
  auto result = BasicTensor<S>::from(std::move(out_shape), std::move(out));

  if (detail::tracking<S>({&x, &a, &b})) {
    detail::record<S>(result, {x, a, b}, [x, a, b, dm, groups](GradContext<S>& g) {
      ScratchBuffer<S> xs(dm.rows * dm.d_in), ts(dm.rows * dm.rank), dys(dm.rows * dm.d_out),
          dts(dm.rows * dm.rank), dxs(dm.rows * dm.d_in);
      const S* xd = x.data().data();
      for (std::size_t c = 0; c < dm.contexts; ++c) {
        const auto& idx = groups[c];
        if (idx.empty()) continue;
        const std::size_t n = idx.size();
        for (std::size_t i = 0; i < n; ++i) {
          std::copy_n(xd + idx[i] * dm.d_in, dm.d_in, xs.data() + i * dm.d_in);
          std::copy_n(g.out_grad.data() + idx[i] * dm.d_out, dm.d_out, dys.data() + i * dm.d_out);
        }
        const auto xm = as_matrix(static_cast<const S*>(xs.data()), n, dm.d_in);
        const auto dy = as_matrix(static_cast<const S*>(dys.data()), n, dm.d_out);
        const auto am = as_matrix(a.data().data() + c * dm.d_in * dm.rank, dm.d_in, dm.rank);
        const auto bm = as_matrix(b.data().data() + c * dm.rank * dm.d_out, dm.rank, dm.d_out);
        auto t = as_matrix(ts.data(), n, dm.rank);
        auto dt = as_matrix(dts.data(), n, dm.rank);
        t.noalias() = xm * am;
        dt.noalias() = dy * bm.transpose();
        if (!g.in_grads[2].empty()) {
          as_matrix(g.in_grads[2].data() + c * dm.rank * dm.d_out, dm.rank, dm.d_out).noalias() +=
              t.transpose() * dy;
        }
        if (!g.in_grads[1].empty()) {
          as_matrix(g.in_grads[1].data() + c * dm.d_in * dm.rank, dm.d_in, dm.rank).noalias() +=
              xm.transpose() * dt;
        }
        if (!g.in_grads[0].empty()) {
          auto dx = as_matrix(dxs.data(), n, dm.d_in);
          dx.noalias() = dt * am.transpose();
          for (std::size_t i = 0; i < n; ++i) {
            S* dst = g.in_grads[0].data() + idx[i] * dm.d_in;
            for (std::size_t j = 0; j < dm.d_in; ++j) dst[j] += dxs.data()[i * dm.d_in + j];
          }
        }
      }
    });
  }
  return result;
}

template <typename S>
BasicTensor<S> einsum_context(const BasicTensor<S>& x, const BasicTensor<S>& a,
                              const BasicTensor<S>& b, const BasicTensor<S>& selector) {
  if (selector.rank() != x.rank() ||
      !std::equal(x.shape().begin(), x.shape().end() - 1, selector.shape().begin()) ||
      (a.rank() == 3 && selector.dim(-1) != a.dim(0))) {
    throw DimensionError("einsum_context: selector " + shape_string(selector.shape()) +
                         " does not match x " + shape_string(x.shape()) + " and A " +
                         shape_string(a.shape()));
  }
  const std::size_t contexts = selector.dim(-1);
  const std::size_t rows = selector.numel() / contexts;
  std::vector<ContextId> ids(rows);
  const auto sd = selector.data();
  for (std::size_t r = 0; r < rows; ++r) {
    int hot = -1;
    for (std::size_t c = 0; c < contexts; ++c) {
      const S v = sd[r * contexts + c];
      if (v == S(1) && hot < 0) {
        hot = static_cast<int>(c);
      } else if (v != S(0)) {
        throw ContractViolation("einsum_context: selector row " + std::to_string(r) +
                                " is not one-hot");
      }
    }
    if (hot < 0) {
      throw ContractViolation("einsum_context: selector row " + std::to_string(r) + " is all zero");
    }
    ids[r] = hot;
  }
  return einsum_context(x, a, b, std::span<const ContextId>(ids));
}

template BasicTensor<float> einsum_context(const BasicTensor<float>&, const BasicTensor<float>&,
                                           const BasicTensor<float>&, std::span<const ContextId>);
template BasicTensor<double> einsum_context(const BasicTensor<double>&, const BasicTensor<double>&,
                                            const BasicTensor<double>&, std::span<const ContextId>);
template BasicTensor<float> einsum_context(const BasicTensor<float>&, const BasicTensor<float>&,
                                           const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> einsum_context(const BasicTensor<double>&, const BasicTensor<double>&,
                                            const BasicTensor<double>&, const BasicTensor<double>&);

}  // namespace cpeft
