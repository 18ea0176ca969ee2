#pragma once

// Finite-difference gradient checks shared by the autograd tests and the
// acceptance run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "overfill/autograd.hpp"
#include "overfill/rng.hpp"

namespace gradcheck {

using namespace overfill;

inline Tensor<double> randn(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  CounterRng rng(seed, 11);
  for (double& v : t.values()) v = rng.normal() * scale;
  return t;
}

// Builds the scalar loss from the given leaves.
using Graph = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Norm-wise relative error between the tape gradient and central finite
// differences, per input.
inline std::vector<double> fd_errors(const Graph& graph, std::vector<Tensor<double>>& inputs, double h = 1e-5) {
  Tape<double> tape;
  std::vector<Var> leaves;
  for (auto& t : inputs) leaves.push_back(tape.parameter(t));
  const Var loss = graph(tape, leaves);
  const auto grads = tape.gradients(loss, leaves);

  auto eval = [&] {
    Tape<double> t2;
    std::vector<Var> l2;
    for (auto& t : inputs) l2.push_back(t2.constant_view(t));
    return t2.value(graph(t2, l2))[0];
  };
  std::vector<double> errs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    double diff = 0, norm_a = 0, norm_n = 0;
    for (std::size_t e = 0; e < inputs[i].size(); ++e) {
      const double keep = inputs[i][e];
      inputs[i][e] = keep + h;
      const double up = eval();
      inputs[i][e] = keep - h;
      const double down = eval();
      inputs[i][e] = keep;
      const double num = (up - down) / (2 * h);
      diff += (num - grads[i][e]) * (num - grads[i][e]);
      norm_a += grads[i][e] * grads[i][e];
      norm_n += num * num;
    }
    errs.push_back(std::sqrt(diff) / std::max({std::sqrt(norm_a), std::sqrt(norm_n), 1e-12}));
  }
  return errs;
}

// Contracts a tensor against fixed random weights so every element matters.
inline Var project(Tape<double>& tape, Var x, std::uint64_t seed) {
  const std::size_t cols = tape.value(x).cols();
  return ad::sum(tape, ad::matmul(tape, x, tape.constant(randn({cols, 1}, seed))));
}

}  // namespace gradcheck
