#include "focalerrornet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace fen {

GradCheckResult grad_check(const GraphFn& graph, std::vector<Tensor<double>> inputs,
                           double epsilon) {
  require(epsilon > 0.0, ErrorKind::value, "grad_check: epsilon must be positive");
  for (auto& in : inputs) {
    in = in.clone(true);
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    const Tensor<double> loss = graph(tape, inputs);
    tape.backward(loss);
    for (const auto& in : inputs) {
      if (in.has_grad()) {
        analytic.emplace_back(in.grad().begin(), in.grad().end());
      } else {
        analytic.emplace_back(in.numel(), 0.0);
      }
    }
  }
  auto eval = [&]() {
    Tape<double> tape(false);
    return graph(tape, inputs).item();
  };
  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + epsilon;
      const double up = eval();
      values[j] = saved - epsilon;
      const double down = eval();
      values[j] = saved;
      const double fd = (up - down) / (2.0 * epsilon);
      const double a = analytic[i][j];
      const double denom = std::max({std::abs(a), std::abs(fd), 1e-8});
      const double err = std::abs(a - fd) / denom;
      ++result.coordinates;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_input = i;
        result.worst_index = j;
        result.analytic = a;
        result.numeric = fd;
      }
    }
  }
  return result;
}

}  // namespace fen
