#include "hypermvp/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "hypermvp/random.hpp"

namespace hypermvp {

namespace {

double evaluate(const ScalarFn& f, const std::vector<ad::Tensor>& inputs) {
  std::vector<ad::Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.emplace_back(t);
  return f(vars).item();
}

}  // namespace

GradCheckReport gradient_check(const ScalarFn& f, const std::vector<ad::Tensor>& inputs,
                               const GradCheckOptions& options) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  const ad::Var loss = f(leaves);
  const ad::Gradients grads = tape.backward(loss);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t k = 0; k < inputs[i].size(); ++k) coords.emplace_back(i, k);
  if (options.max_coords && coords.size() > options.max_coords) {
    Rng rng(options.seed, 0x6772616463686bULL);
    for (std::size_t i = 0; i < options.max_coords; ++i) {
      std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    }
    coords.resize(options.max_coords);
  }

  GradCheckReport report;
  std::vector<ad::Tensor> probe = inputs;
  std::vector<ad::Tensor> analytic;
  for (const auto& leaf : leaves) analytic.push_back(grads.of(leaf));
  for (auto [i, k] : coords) {
    const double x0 = inputs[i][k];
    probe[i][k] = x0 + options.step;
    const double up = evaluate(f, probe);
    probe[i][k] = x0 - options.step;
    const double down = evaluate(f, probe);
    probe[i][k] = x0;
    const double numeric = (up - down) / (2.0 * options.step);
    const double a = analytic[i][k];
    const double abs_err = std::abs(a - numeric);
    const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
    ++report.coords;
  }
  return report;
}

}  // namespace hypermvp
