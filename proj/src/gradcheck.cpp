#include "srclab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace srclab {
namespace {

struct Coord {
  Tensor<double> tensor;
  std::size_t index;
};

GradCheckReport check_coords(const ScalarFn& f, std::vector<Tensor<double>>& wrt, const std::vector<Coord>& coords,
                             double h, double tol, double abs_floor) {
  for (auto& t : wrt) {
    if (!t.requires_grad()) throw ContractViolation("grad_check: tensor does not require grad");
    t.zero_grad();
  }
  {
    Tape<double> tape;
    auto loss = f(tape);
    // A loss that never touched `wrt` has a zero tape gradient.
    if (loss.requires_grad()) tape.backward(loss);
  }
  for (auto& t : wrt) check_finite<double>(t.mutable_grad(), "tape gradient");

  Tape<double> probe(false);
  auto eval = [&] {
    probe.clear();
    const double v = f(probe).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };

  GradCheckReport report;
  for (const auto& c : coords) {
    auto t = c.tensor;
    auto values = t.mutable_data();
    const double saved = values[c.index];
    values[c.index] = saved + h;
    const double up = eval();
    values[c.index] = saved - h;
    const double down = eval();
    values[c.index] = saved;

    const double fd = (up - down) / (2.0 * h);
    const double tape_grad = t.grad()[c.index];
    const double abs_err = std::abs(tape_grad - fd);
    const double rel_err = abs_err / std::max({std::abs(tape_grad), std::abs(fd), abs_floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    report.max_rel_error = std::max(report.max_rel_error, rel_err);
    ++report.checked;
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, Tensor<double>& x, double h, double tol, double abs_floor) {
  std::vector<Tensor<double>> wrt{x};
  std::vector<Coord> coords;
  for (std::size_t i = 0; i < x.size(); ++i) coords.push_back({x, i});
  return check_coords(f, wrt, coords, h, tol, abs_floor);
}

GradCheckReport grad_check_sampled(const ScalarFn& f, std::vector<Tensor<double>> wrt, std::size_t samples,
                                   std::uint64_t seed, double h, double tol, double abs_floor) {
  std::size_t total = 0;
  for (const auto& t : wrt) total += t.size();
  if (total == 0) throw ContractViolation("grad_check_sampled: nothing to check");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::vector<Coord> coords;
  for (std::size_t s = 0; s < samples; ++s) {
    auto flat = pick(rng);
    for (const auto& t : wrt) {
      if (flat < t.size()) {
        coords.push_back({t, flat});
        break;
      }
      flat -= t.size();
    }
  }
  return check_coords(f, wrt, coords, h, tol, abs_floor);
}

}  // namespace srclab
