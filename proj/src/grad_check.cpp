#include "cpeft/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace cpeft {

template <typename S>
double grad_check(const std::function<BasicTensor<S>()>& f, BasicTensor<S>& leaf, double h,
                  std::span<const std::size_t> coords) {
  if (!leaf.requires_grad()) throw ContractViolation("grad_check: leaf does not require grad");
  leaf.clear_grad();
  {
    Tape<S> tape;
    BasicTensor<S> loss;
    {
      TapeScope<S> scope(tape);
      loss = f();
    }
    tape.backward(loss);
  }
  const std::vector<S> analytic = leaf.grad_or_zero();

  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(leaf.numel());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = all;
  }
  double worst = 0.0;
  auto data = leaf.mutable_data();
  for (std::size_t i : coords) {
    const S saved = data[i];
    data[i] = static_cast<S>(saved + h);
    const double up = static_cast<double>(f().item());
    data[i] = static_cast<S>(saved - h);
    const double down = static_cast<double>(f().item());
    data[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

template double grad_check(const std::function<BasicTensor<float>()>&, BasicTensor<float>&, double,
                           std::span<const std::size_t>);
template double grad_check(const std::function<BasicTensor<double>()>&, BasicTensor<double>&,
                           double, std::span<const std::size_t>);

}  // namespace cpeft
