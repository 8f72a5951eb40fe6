#include "hcvc/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "hcvc/rng.hpp"

namespace hcvc {

namespace {

std::vector<int> sample_coords(int64_t size, int samples, RandomStream& rng) {
  if (samples <= 0 || size <= samples) {
    std::vector<int> all(static_cast<size_t>(size));
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  // Floyd's sampling keeps the pick set small and deterministic.
  std::vector<int> picked;
  picked.reserve(samples);
  for (int64_t j = size - samples; j < size; ++j) {
    int t = rng.next_int(static_cast<int>(j + 1));
    if (std::find(picked.begin(), picked.end(), t) != picked.end()) {
      picked.push_back(static_cast<int>(j));
    } else {
      picked.push_back(t);
    }
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                           std::span<const ParamStore::Item> params,
                           int samples_per_tensor, uint64_t seed, double step) {
  for (const auto& item : params) {
    const_cast<Tensor&>(item.tensor).zero_grad();
  }
  Tensor loss = loss_fn();
  if (loss.size() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
  loss.backward();

  // Snapshot analytic gradients before perturbation sweeps.
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& item : params) {
    auto g = item.tensor.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(item.tensor.size(), 0.0);
  }

  RandomStream rng(seed);
  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const auto& item = params[pi];
    Tensor t = item.tensor;  // shares storage
    auto data = t.mutable_data();
    for (int coord : sample_coords(t.size(), samples_per_tensor, rng)) {
      const double saved = data[coord];
      data[coord] = saved + step;
      const double f_plus = loss_fn().value();
      data[coord] = saved - step;
      const double f_minus = loss_fn().value();
      data[coord] = saved;

      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = analytic[pi][coord];
      if (!std::isfinite(a) || !std::isfinite(numeric)) {
        std::ostringstream os;
        os << "grad_check: non-finite gradient for " << item.name << "[" << coord
           << "]: analytic=" << a << " numeric=" << numeric;
        throw std::runtime_error(os.str());
      }
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = item.name;
        report.worst_coord = coord;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  for (const auto& item : params) {
    const_cast<Tensor&>(item.tensor).zero_grad();
  }
  return report;
}

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, ParamStore& store,
                           int samples_per_tensor, uint64_t seed, double step) {
  std::vector<ParamStore::Item> trainable;
  for (const auto& item : store.items()) {
    if (item.trainable) trainable.push_back(item);
  }
  return grad_check(loss_fn, trainable, samples_per_tensor, seed, step);
}

}  // namespace hcvc
