#pragma once

// Seeded random instances of every tensor operation, checked against central
// finite differences. Shared by the unit tests and the acceptance suite.
//
// Each instance flattens all operation inputs into one parameter vector,
// applies the operation, and contracts the output with fixed random weights
// to obtain a scalar; the taped gradient of that scalar is compared with the
// finite-difference gradient of the same evaluation run on constants.

#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "oracles.hpp"
#include "selftpt/tensor.hpp"

namespace fdcheck {

struct Instance {
  std::string kind;
  std::vector<selftpt::Shape> input_shapes;
  std::vector<double> theta;    // all inputs, flattened back to back
  std::vector<double> weights;  // output contraction, sized on first eval
  selftpt::OpArgs args;
};

// Operations beyond the public tensor_op vocabulary that still carry their
// own backward rules and deserve direct checks.
inline std::span<const std::string_view> internal_op_names() {
  static constexpr std::string_view names[] = {
      "transpose",      "elementwise_div", "sqrt",     "reshape",  "broadcast_to",
      "row_sums",       "col_sums",        "broadcast_rows",       "broadcast_cols",
      "pad_rows"};
  return names;
}

inline selftpt::DiffTensor apply_kind(const Instance& in,
                                      std::span<const selftpt::DiffTensor> inputs) {
  using namespace selftpt;
  const std::string_view k = in.kind;
  if (k == "transpose") return transpose(inputs[0]);
  if (k == "elementwise_div") return elementwise_div(inputs[0], inputs[1]);
  if (k == "sqrt") return sqrt(inputs[0]);
  if (k == "reshape") return reshape(inputs[0], in.args.shape);
  if (k == "broadcast_to") return broadcast_to(inputs[0], in.args.shape);
  if (k == "row_sums") return row_sums(inputs[0]);
  if (k == "col_sums") return col_sums(inputs[0]);
  if (k == "broadcast_rows") return broadcast_rows(inputs[0], in.args.row_begin);
  if (k == "broadcast_cols") return broadcast_cols(inputs[0], in.args.row_begin);
  if (k == "pad_rows") return pad_rows(inputs[0], in.args.row_end, in.args.row_begin);
  return tensor_op(k, inputs, in.args);
}

inline double eval(const Instance& in, std::span<const double> theta,
                   std::vector<double>* grad_out) {
  using namespace selftpt;
  GradientTape tape;
  std::vector<DiffTensor> inputs;
  std::size_t off = 0;
  for (const Shape& s : in.input_shapes) {
    const std::size_t n = shape_numel(s);
    std::vector<double> v(theta.begin() + static_cast<std::ptrdiff_t>(off),
                          theta.begin() + static_cast<std::ptrdiff_t>(off + n));
    off += n;
    inputs.push_back(grad_out != nullptr ? tape.leaf(s, std::move(v))
                                         : DiffTensor(s, std::move(v)));
  }
  DiffTensor y = apply_kind(in, inputs);
  DiffTensor loss = dot(reshape(y, Shape{y.numel()}), DiffTensor::vector(in.weights));
  if (grad_out != nullptr) {
    grad_out->clear();
    for (const DiffTensor& g : backward(loss, inputs)) {
      grad_out->insert(grad_out->end(), g.values().begin(), g.values().end());
    }
  }
  return loss.item();
}

inline std::vector<double> draw(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

inline Instance make_instance(std::string_view kind, std::mt19937_64& rng) {
  using selftpt::Shape;
  Instance in;
  in.kind = std::string(kind);

  auto set_inputs = [&](std::vector<Shape> shapes, double lo, double hi) {
    in.input_shapes = std::move(shapes);
    std::size_t total = 0;
    for (const Shape& s : in.input_shapes) total += selftpt::shape_numel(s);
    in.theta = draw(rng, total, lo, hi);
  };

  if (kind == "add" || kind == "sub" || kind == "elementwise_mul") {
    set_inputs({{3, 4}, {3, 4}}, -2.0, 2.0);
  } else if (kind == "scalar_mul") {
    set_inputs({{3, 4}}, -2.0, 2.0);
    in.args.scalar = draw(rng, 1, -2.0, 2.0)[0];
  } else if (kind == "elementwise_div") {
    set_inputs({{3, 4}, {3, 4}}, -2.0, 2.0);
    // Keep denominators away from zero so the difference quotient is sane.
    for (std::size_t i = 12; i < 24; ++i) in.theta[i] = 0.5 + std::abs(in.theta[i]);
  } else if (kind == "matmul") {
    set_inputs({{3, 4}, {4, 2}}, -2.0, 2.0);
  } else if (kind == "transpose" || kind == "tanh" || kind == "exp" || kind == "sum" ||
             kind == "mean" || kind == "row_sums" || kind == "col_sums") {
    set_inputs({{3, 4}}, -2.0, 2.0);
  } else if (kind == "relu") {
    set_inputs({{3, 4}}, -2.0, 2.0);
    // Push entries off the kink so finite differences stay one-sided.
    for (double& x : in.theta) {
      if (std::abs(x) < 0.05) x += x >= 0.0 ? 0.1 : -0.1;
    }
  } else if (kind == "log" || kind == "sqrt") {
    set_inputs({{3, 4}}, 0.2, 3.0);
  } else if (kind == "reshape") {
    set_inputs({{3, 4}}, -2.0, 2.0);
    in.args.shape = {2, 6};
  } else if (kind == "broadcast_to") {
    set_inputs({Shape{}}, -2.0, 2.0);
    in.args.shape = {3, 4};
  } else if (kind == "broadcast_rows") {
    set_inputs({{4}}, -2.0, 2.0);
    in.args.row_begin = 3;
  } else if (kind == "broadcast_cols") {
    set_inputs({{3}}, -2.0, 2.0);
    in.args.row_begin = 4;
  } else if (kind == "concat_rows") {
    set_inputs({{2, 3}, {3}, {3, 3}}, -2.0, 2.0);
  } else if (kind == "slice_rows") {
    set_inputs({{5, 3}}, -2.0, 2.0);
    in.args.row_begin = 1;
    in.args.row_end = 4;
  } else if (kind == "pad_rows") {
    set_inputs({{2, 3}}, -2.0, 2.0);
    in.args.row_begin = 1;  // offset
    in.args.row_end = 5;    // total rows
  } else if (kind == "dot") {
    set_inputs({{6}, {6}}, -2.0, 2.0);
  } else if (kind == "l2_norm" || kind == "l2_normalize") {
    set_inputs({{5}}, -2.0, 2.0);
    double sq = 0.0;
    for (double x : in.theta) sq += x * x;
    if (sq < 0.25) in.theta[0] = 1.0;
  } else if (kind == "softmax_row" || kind == "logsumexp_row") {
    set_inputs({{3, 5}}, -3.0, 3.0);
  } else {
    throw std::invalid_argument("fdcheck: no instance recipe for kind '" + in.kind + "'");
  }

  // Size the contraction weights from a dry run on constants.
  in.weights = {1.0};
  {
    using namespace selftpt;
    std::vector<DiffTensor> inputs;
    std::size_t off = 0;
    for (const Shape& s : in.input_shapes) {
      const std::size_t n = shape_numel(s);
      inputs.push_back(DiffTensor(
          s, std::vector<double>(in.theta.begin() + static_cast<std::ptrdiff_t>(off),
                                 in.theta.begin() + static_cast<std::ptrdiff_t>(off + n))));
      off += n;
    }
    const std::size_t out_n = apply_kind(in, inputs).numel();
    in.weights = draw(rng, out_n, -1.0, 1.0);
  }
  return in;
}

// Max relative disagreement between the taped gradient and central finite
// differences for one instance.
inline double check_instance(const Instance& in) {
  std::vector<double> analytic;
  eval(in, in.theta, &analytic);
  auto value_only = [&](std::span<const double> t) { return eval(in, t, nullptr); };
  std::vector<double> numeric = oracle::central_diff_grad(value_only, in.theta);
  return oracle::max_rel_err(analytic, numeric);
}

}  // namespace fdcheck
