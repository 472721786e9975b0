#include "selftpt/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace selftpt {

namespace {

// Internal node kinds. The public tensor_op vocabulary is a mix of these
// primitives and compositions of them; every primitive's backward rule is
// expressed through the same primitives, which is what makes a recorded
// backward sweep differentiable again.
enum Kind : int {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScalarMul,
  kMatMul,
  kTranspose,
  kReshape,
  kTanh,
  kRelu,
  kExp,
  kLog,
  kSqrt,
  kSum,
  kBroadcastTo,
  kRowSums,
  kColSums,
  kBroadcastRows,
  kBroadcastCols,
  kConcatRows,
  kSliceRows,
  kPadRows,
  kLogsumexpRow,
};

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::invalid_argument(op + ": " + msg);
}

void require(bool cond, const std::string& op, const std::string& msg) {
  if (!cond) fail(op, msg);
}

void require_defined(const DiffTensor& t, const std::string& op) {
  require(t.defined(), op, "operand has no storage");
}

void require_same_shape(const DiffTensor& a, const DiffTensor& b, const std::string& op) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_matrix(const DiffTensor& t, const std::string& op) {
  require(t.rank() == 2, op, "expected a matrix, got shape " + shape_str(t.shape()));
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out << 'x';
    out << s[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

DiffTensor::DiffTensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) fail("DiffTensor", "zero-sized dimension in shape " + shape_str(shape_));
  }
  if (values.size() != shape_numel(shape_)) {
    fail("DiffTensor", "shape " + shape_str(shape_) + " needs " +
                           std::to_string(shape_numel(shape_)) + " values, got " +
                           std::to_string(values.size()));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

DiffTensor DiffTensor::scalar(double v) { return DiffTensor(Shape{}, {v}); }

DiffTensor DiffTensor::vector(std::vector<double> v) {
  Shape s{v.size()};
  return DiffTensor(std::move(s), std::move(v));
}

DiffTensor DiffTensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return DiffTensor(Shape{rows, cols}, std::move(v));
}

DiffTensor DiffTensor::zeros(const Shape& shape) {
  return DiffTensor(shape, std::vector<double>(shape_numel(shape), 0.0));
}

DiffTensor DiffTensor::full(const Shape& shape, double v) {
  return DiffTensor(shape, std::vector<double>(shape_numel(shape), v));
}

std::span<const double> DiffTensor::values() const {
  if (!defined()) fail("DiffTensor::values", "tensor has no storage");
  return {data_->data(), data_->size()};
}

std::size_t DiffTensor::numel() const { return defined() ? data_->size() : 0; }

std::size_t DiffTensor::rows() const {
  if (rank() != 2) fail("DiffTensor::rows", "not a matrix: shape " + shape_str(shape_));
  return shape_[0];
}

std::size_t DiffTensor::cols() const {
  if (rank() != 2) fail("DiffTensor::cols", "not a matrix: shape " + shape_str(shape_));
  return shape_[1];
}

double DiffTensor::item() const {
  if (numel() != 1) fail("DiffTensor::item", "not a scalar: shape " + shape_str(shape_));
  return (*data_)[0];
}

double DiffTensor::at(std::size_t i) const {
  if (i >= numel()) fail("DiffTensor::at", "flat index out of range");
  return (*data_)[i];
}

double DiffTensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2 || r >= shape_[0] || c >= shape_[1])
    fail("DiffTensor::at", "index out of range for shape " + shape_str(shape_));
  return (*data_)[r * shape_[1] + c];
}

DiffTensor DiffTensor::detached() const {
  DiffTensor out;
  out.shape_ = shape_;
  out.data_ = data_;
  return out;
}

DiffTensor detail_record(GradientTape* tape, int kind, std::span<const DiffTensor> inputs,
                         const OpArgs& args, Shape shape, std::vector<double> values,
                         std::vector<double> saved) {
  DiffTensor out;
  for (std::size_t d : shape) {
    if (d == 0) fail("tensor op", "zero-sized dimension in result shape");
  }
  if (values.size() != shape_numel(shape)) fail("tensor op", "internal: result size mismatch");
  out.shape_ = std::move(shape);
  out.data_ = std::make_shared<const std::vector<double>>(std::move(values));
  if (tape != nullptr) {
    out.tape_ = tape;
    out.node_ = static_cast<std::int64_t>(tape->nodes_.size());
    GradientTape::Node node;
    node.kind = kind;
    node.args = args;
    node.inputs.assign(inputs.begin(), inputs.end());
    node.output = out;
    node.saved = std::move(saved);
    tape->nodes_.push_back(std::move(node));
  }
  return out;
}

namespace {

GradientTape* infer_tape(std::span<const DiffTensor> inputs, const std::string& op) {
  GradientTape* tape = nullptr;
  for (const DiffTensor& t : inputs) {
    if (!t.tracked()) continue;
    if (tape == nullptr) {
      tape = t.tape();
    } else if (tape != t.tape()) {
      fail(op, "operands recorded on different tapes");
    }
  }
  return tape;
}

DiffTensor record(int kind, std::span<const DiffTensor> inputs, const OpArgs& args, Shape shape,
                  std::vector<double> values, const std::string& op,
                  std::vector<double> saved = {}) {
  return detail_record(infer_tape(inputs, op), kind, inputs, args, std::move(shape),
                       std::move(values), std::move(saved));
}

DiffTensor binary_elementwise(int kind, const DiffTensor& a, const DiffTensor& b,
                              const std::string& op, double (*f)(double, double)) {
  require_defined(a, op);
  require_defined(b, op);
  require_same_shape(a, b, op);
  std::vector<double> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  std::array<DiffTensor, 2> in{a, b};
  return record(kind, in, {}, a.shape(), std::move(out), op);
}

DiffTensor unary_elementwise(int kind, const DiffTensor& a, const std::string& op,
                             double (*f)(double), std::vector<double> saved = {}) {
  require_defined(a, op);
  std::vector<double> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  std::array<DiffTensor, 1> in{a};
  return record(kind, in, {}, a.shape(), std::move(out), op, std::move(saved));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

}  // namespace

DiffTensor add(const DiffTensor& a, const DiffTensor& b) {
  return binary_elementwise(kAdd, a, b, "add", [](double x, double y) { return x + y; });
}

DiffTensor sub(const DiffTensor& a, const DiffTensor& b) {
  return binary_elementwise(kSub, a, b, "sub", [](double x, double y) { return x - y; });
}

DiffTensor elementwise_mul(const DiffTensor& a, const DiffTensor& b) {
  return binary_elementwise(kMul, a, b, "elementwise_mul",
                            [](double x, double y) { return x * y; });
}

DiffTensor elementwise_div(const DiffTensor& a, const DiffTensor& b) {
  require_defined(b, "elementwise_div");
  for (double d : b.values()) {
    if (d == 0.0) fail("elementwise_div", "division by zero");
  }
  return binary_elementwise(kDiv, a, b, "elementwise_div",
                            [](double x, double y) { return x / y; });
}

DiffTensor scalar_mul(const DiffTensor& a, double c) {
  require_defined(a, "scalar_mul");
  std::vector<double> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  OpArgs args;
  args.scalar = c;
  std::array<DiffTensor, 1> in{a};
  return record(kScalarMul, in, args, a.shape(), std::move(out), "scalar_mul");
}

DiffTensor matmul(const DiffTensor& a, const DiffTensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  require(a.cols() == b.rows(), "matmul",
          "inner dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  MutMap(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
      ConstMap(a.values().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) *
      ConstMap(b.values().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  std::array<DiffTensor, 2> in{a, b};
  return record(kMatMul, in, {}, Shape{m, n}, std::move(out), "matmul");
}

DiffTensor transpose(const DiffTensor& a) {
  require_defined(a, "transpose");
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  auto av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  std::array<DiffTensor, 1> in{a};
  return record(kTranspose, in, {}, Shape{c, r}, std::move(out), "transpose");
}

DiffTensor reshape(const DiffTensor& a, const Shape& shape) {
  require_defined(a, "reshape");
  require(shape_numel(shape) == a.numel(), "reshape",
          "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  OpArgs args;
  args.shape = shape;
  std::array<DiffTensor, 1> in{a};
  return record(kReshape, in, args, shape, std::move(out), "reshape");
}

DiffTensor tanh(const DiffTensor& a) {
  return unary_elementwise(kTanh, a, "tanh", [](double x) { return std::tanh(x); });
}

DiffTensor relu(const DiffTensor& a) {
  require_defined(a, "relu");
  std::vector<double> mask(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = av[i] > 0.0 ? 1.0 : 0.0;
  return unary_elementwise(
      kRelu, a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, std::move(mask));
}

DiffTensor exp(const DiffTensor& a) {
  return unary_elementwise(kExp, a, "exp", [](double x) { return std::exp(x); });
}

DiffTensor log(const DiffTensor& a) {
  require_defined(a, "log");
  for (double v : a.values()) {
    if (v <= 0.0) fail("log", "non-positive entry " + std::to_string(v));
  }
  return unary_elementwise(kLog, a, "log", [](double x) { return std::log(x); });
}

DiffTensor sqrt(const DiffTensor& a) {
  require_defined(a, "sqrt");
  for (double v : a.values()) {
    if (v < 0.0) fail("sqrt", "negative entry " + std::to_string(v));
  }
  return unary_elementwise(kSqrt, a, "sqrt", [](double x) { return std::sqrt(x); });
}

DiffTensor sum(const DiffTensor& a) {
  require_defined(a, "sum");
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  std::array<DiffTensor, 1> in{a};
  return record(kSum, in, {}, Shape{}, {acc}, "sum");
}

DiffTensor mean(const DiffTensor& a) {
  require_defined(a, "mean");
  return scalar_mul(sum(a), 1.0 / static_cast<double>(a.numel()));
}

DiffTensor broadcast_to(const DiffTensor& scalar, const Shape& shape) {
  require_defined(scalar, "broadcast_to");
  require(scalar.numel() == 1, "broadcast_to",
          "source must be a single value, got shape " + shape_str(scalar.shape()));
  std::vector<double> out(shape_numel(shape), scalar.values()[0]);
  OpArgs args;
  args.shape = shape;
  std::array<DiffTensor, 1> in{scalar};
  return record(kBroadcastTo, in, args, shape, std::move(out), "broadcast_to");
}

DiffTensor row_sums(const DiffTensor& m) {
  require_defined(m, "row_sums");
  require_matrix(m, "row_sums");
  const std::size_t r = m.rows(), c = m.cols();
  std::vector<double> out(r, 0.0);
  auto mv = m.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += mv[i * c + j];
  std::array<DiffTensor, 1> in{m};
  return record(kRowSums, in, {}, Shape{r}, std::move(out), "row_sums");
}

DiffTensor col_sums(const DiffTensor& m) {
  require_defined(m, "col_sums");
  require_matrix(m, "col_sums");
  const std::size_t r = m.rows(), c = m.cols();
  std::vector<double> out(c, 0.0);
  auto mv = m.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += mv[i * c + j];
  std::array<DiffTensor, 1> in{m};
  return record(kColSums, in, {}, Shape{c}, std::move(out), "col_sums");
}

DiffTensor broadcast_rows(const DiffTensor& v, std::size_t r) {
  require_defined(v, "broadcast_rows");
  require(v.rank() == 1, "broadcast_rows", "expected a vector, got " + shape_str(v.shape()));
  require(r > 0, "broadcast_rows", "row count must be positive");
  const std::size_t c = v.numel();
  std::vector<double> out(r * c);
  auto vv = v.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = vv[j];
  std::array<DiffTensor, 1> in{v};
  return record(kBroadcastRows, in, {}, Shape{r, c}, std::move(out), "broadcast_rows");
}

DiffTensor broadcast_cols(const DiffTensor& v, std::size_t c) {
  require_defined(v, "broadcast_cols");
  require(v.rank() == 1, "broadcast_cols", "expected a vector, got " + shape_str(v.shape()));
  require(c > 0, "broadcast_cols", "column count must be positive");
  const std::size_t r = v.numel();
  std::vector<double> out(r * c);
  auto vv = v.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = vv[i];
  std::array<DiffTensor, 1> in{v};
  return record(kBroadcastCols, in, {}, Shape{r, c}, std::move(out), "broadcast_cols");
}

DiffTensor concat_rows(std::span<const DiffTensor> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  std::vector<DiffTensor> mats;
  mats.reserve(parts.size());
  for (const DiffTensor& p : parts) {
    require_defined(p, "concat_rows");
    if (p.rank() == 1) {
      mats.push_back(reshape(p, Shape{1, p.numel()}));
    } else {
      require_matrix(p, "concat_rows");
      mats.push_back(p);
    }
  }
  const std::size_t c = mats.front().cols();
  std::size_t total = 0;
  for (const DiffTensor& m : mats) {
    require(m.cols() == c, "concat_rows",
            "column mismatch " + shape_str(mats.front().shape()) + " vs " + shape_str(m.shape()));
    total += m.rows();
  }
  std::vector<double> out;
  out.reserve(total * c);
  for (const DiffTensor& m : mats) out.insert(out.end(), m.values().begin(), m.values().end());
  return record(kConcatRows, mats, {}, Shape{total, c}, std::move(out), "concat_rows");
}

DiffTensor slice_rows(const DiffTensor& m, std::size_t row_begin, std::size_t row_end) {
  require_defined(m, "slice_rows");
  require_matrix(m, "slice_rows");
  require(row_begin < row_end && row_end <= m.rows(), "slice_rows",
          "rows [" + std::to_string(row_begin) + "," + std::to_string(row_end) +
              ") out of range for " + shape_str(m.shape()));
  const std::size_t c = m.cols();
  auto mv = m.values();
  std::vector<double> out(mv.begin() + static_cast<std::ptrdiff_t>(row_begin * c),
                          mv.begin() + static_cast<std::ptrdiff_t>(row_end * c));
  OpArgs args;
  args.row_begin = row_begin;
  args.row_end = row_end;
  std::array<DiffTensor, 1> in{m};
  return record(kSliceRows, in, args, Shape{row_end - row_begin, c}, std::move(out), "slice_rows");
}

DiffTensor pad_rows(const DiffTensor& m, std::size_t total_rows, std::size_t row_offset) {
  require_defined(m, "pad_rows");
  require_matrix(m, "pad_rows");
  require(row_offset + m.rows() <= total_rows, "pad_rows",
          "rows do not fit: offset " + std::to_string(row_offset) + " + " + shape_str(m.shape()) +
              " > " + std::to_string(total_rows));
  const std::size_t c = m.cols();
  std::vector<double> out(total_rows * c, 0.0);
  auto mv = m.values();
  std::copy(mv.begin(), mv.end(), out.begin() + static_cast<std::ptrdiff_t>(row_offset * c));
  OpArgs args;
  args.row_begin = row_offset;
  std::array<DiffTensor, 1> in{m};
  return record(kPadRows, in, args, Shape{total_rows, c}, std::move(out), "pad_rows");
}

DiffTensor dot(const DiffTensor& a, const DiffTensor& b) {
  require_defined(a, "dot");
  require_defined(b, "dot");
  require_same_shape(a, b, "dot");
  return sum(elementwise_mul(a, b));
}

DiffTensor l2_norm(const DiffTensor& a) {
  require_defined(a, "l2_norm");
  return sqrt(sum(elementwise_mul(a, a)));
}

DiffTensor l2_normalize(const DiffTensor& a) {
  require_defined(a, "l2_normalize");
  double sq = 0.0;
  for (double v : a.values()) sq += v * v;
  if (sq == 0.0) fail("l2_normalize", "zero-norm input of shape " + shape_str(a.shape()));
  return elementwise_div(a, broadcast_to(l2_norm(a), a.shape()));
}

DiffTensor l2_normalize_rows(const DiffTensor& m) {
  require_defined(m, "l2_normalize_rows");
  require_matrix(m, "l2_normalize_rows");
  auto mv = m.values();
  const std::size_t c = m.cols();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) sq += mv[i * c + j] * mv[i * c + j];
    if (sq == 0.0) fail("l2_normalize_rows", "zero-norm row " + std::to_string(i));
  }
  DiffTensor norms = sqrt(row_sums(elementwise_mul(m, m)));
  return elementwise_div(m, broadcast_cols(norms, c));
}

DiffTensor logsumexp_row(const DiffTensor& a) {
  require_defined(a, "logsumexp_row");
  require(a.rank() == 1 || a.rank() == 2, "logsumexp_row",
          "expected vector or matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.rank() == 2 ? a.rows() : 1;
  const std::size_t c = a.rank() == 2 ? a.cols() : a.numel();
  auto av = a.values();
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    // Shift by the row maximum so the exponentials cannot overflow; the
    // identity lse(x) = m + log(sum(exp(x - m))) holds for any constant m.
    double m = av[i * c];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, av[i * c + j]);
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) acc += std::exp(av[i * c + j] - m);
    out[i] = m + std::log(acc);
  }
  Shape shape = a.rank() == 2 ? Shape{r} : Shape{};
  std::array<DiffTensor, 1> in{a};
  return record(kLogsumexpRow, in, {}, std::move(shape), std::move(out), "logsumexp_row");
}

DiffTensor softmax_row(const DiffTensor& a) {
  require_defined(a, "softmax_row");
  require(a.rank() == 1 || a.rank() == 2, "softmax_row",
          "expected vector or matrix, got " + shape_str(a.shape()));
  DiffTensor lse = logsumexp_row(a);
  DiffTensor shifted = a.rank() == 2 ? sub(a, broadcast_cols(lse, a.cols()))
                                     : sub(a, broadcast_to(lse, a.shape()));
  return exp(shifted);
}

namespace {

constexpr std::array<std::string_view, 18> kTensorOpNames = {
    "add",  "sub",  "scalar_mul", "elementwise_mul", "matmul",      "tanh",
    "relu", "exp",  "log",        "sum",             "mean",        "concat_rows",
    "slice_rows",   "dot",        "l2_norm",         "l2_normalize", "softmax_row",
    "logsumexp_row"};

void require_arity(std::string_view kind, std::span<const DiffTensor> inputs, std::size_t n) {
  if (inputs.size() != n) {
    fail("tensor_op", std::string(kind) + " expects " + std::to_string(n) + " inputs, got " +
                          std::to_string(inputs.size()));
  }
}

}  // namespace

std::span<const std::string_view> tensor_op_names() { return kTensorOpNames; }

DiffTensor tensor_op(std::string_view kind, std::span<const DiffTensor> inputs,
                     const OpArgs& args) {
  if (kind == "add") {
    require_arity(kind, inputs, 2);
    return add(inputs[0], inputs[1]);
  }
  if (kind == "sub") {
    require_arity(kind, inputs, 2);
    return sub(inputs[0], inputs[1]);
  }
  if (kind == "scalar_mul") {
    require_arity(kind, inputs, 1);
    return scalar_mul(inputs[0], args.scalar);
  }
  if (kind == "elementwise_mul") {
    require_arity(kind, inputs, 2);
    return elementwise_mul(inputs[0], inputs[1]);
  }
  if (kind == "matmul") {
    require_arity(kind, inputs, 2);
    return matmul(inputs[0], inputs[1]);
  }
  if (kind == "tanh") {
    require_arity(kind, inputs, 1);
    return tanh(inputs[0]);
  }
  if (kind == "relu") {
    require_arity(kind, inputs, 1);
    return relu(inputs[0]);
  }
  if (kind == "exp") {
    require_arity(kind, inputs, 1);
    return exp(inputs[0]);
  }
  if (kind == "log") {
    require_arity(kind, inputs, 1);
    return log(inputs[0]);
  }
  if (kind == "sum") {
    require_arity(kind, inputs, 1);
    return sum(inputs[0]);
  }
  if (kind == "mean") {
    require_arity(kind, inputs, 1);
    return mean(inputs[0]);
  }
  if (kind == "concat_rows") {
    return concat_rows(inputs);
  }
  if (kind == "slice_rows") {
    require_arity(kind, inputs, 1);
    return slice_rows(inputs[0], args.row_begin, args.row_end);
  }
  if (kind == "dot") {
    require_arity(kind, inputs, 2);
    return dot(inputs[0], inputs[1]);
  }
  if (kind == "l2_norm") {
    require_arity(kind, inputs, 1);
    return l2_norm(inputs[0]);
  }
  if (kind == "l2_normalize") {
    require_arity(kind, inputs, 1);
    return l2_normalize(inputs[0]);
  }
  if (kind == "softmax_row") {
    require_arity(kind, inputs, 1);
    return softmax_row(inputs[0]);
  }
  if (kind == "logsumexp_row") {
    require_arity(kind, inputs, 1);
    return logsumexp_row(inputs[0]);
  }
  fail("tensor_op", "unknown kind '" + std::string(kind) + "'");
}

DiffTensor GradientTape::leaf(const DiffTensor& value) {
  require_defined(value, "GradientTape::leaf");
  std::vector<double> copy(value.values().begin(), value.values().end());
  return detail_record(this, kLeaf, {}, {}, value.shape(), std::move(copy), {});
}

DiffTensor GradientTape::leaf(Shape shape, std::vector<double> values) {
  return leaf(DiffTensor(std::move(shape), std::move(values)));
}

namespace {
std::size_t g_backward_passes = 0;
}  // namespace

std::size_t backward_pass_count() { return g_backward_passes; }

std::vector<DiffTensor> backward(const DiffTensor& root, std::span<const DiffTensor> leaves) {
  require_defined(root, "backward");
  require(root.tracked(), "backward", "root is not on a tape");
  require(root.numel() == 1, "backward", "root must be scalar, got " + shape_str(root.shape()));
  ++g_backward_passes;
  GradientTape* tape = root.tape();

  // Node ids are append-ordered, so descending id order is a reverse
  // topological order; gradients built along the way append new nodes with
  // higher ids, which this sweep never revisits.
  std::vector<DiffTensor> grad(static_cast<std::size_t>(root.node()) + 1);
  grad[static_cast<std::size_t>(root.node())] = DiffTensor(root.shape(), {1.0});

  for (std::int64_t id = root.node(); id >= 0; --id) {
    DiffTensor g = grad[static_cast<std::size_t>(id)];
    if (!g.defined()) continue;
    // Copy the node's pieces: gradient construction below may reallocate
    // the node vector.
    const int kind = tape->nodes_[static_cast<std::size_t>(id)].kind;
    const OpArgs args = tape->nodes_[static_cast<std::size_t>(id)].args;
    const std::vector<DiffTensor> inputs = tape->nodes_[static_cast<std::size_t>(id)].inputs;
    const DiffTensor output = tape->nodes_[static_cast<std::size_t>(id)].output;
    const std::vector<double> saved = tape->nodes_[static_cast<std::size_t>(id)].saved;

    auto contribute = [&](std::size_t idx, const DiffTensor& dg) {
      const DiffTensor& in = inputs[idx];
      if (!in.tracked()) return;
      DiffTensor& slot = grad[static_cast<std::size_t>(in.node())];
      slot = slot.defined() ? add(slot, dg) : dg;
    };

    switch (kind) {
      case kLeaf:
        break;
      case kAdd:
        contribute(0, g);
        contribute(1, g);
        break;
      case kSub:
        contribute(0, g);
        contribute(1, scalar_mul(g, -1.0));
        break;
      case kMul:
        contribute(0, elementwise_mul(g, inputs[1]));
        contribute(1, elementwise_mul(g, inputs[0]));
        break;
      case kDiv:
        contribute(0, elementwise_div(g, inputs[1]));
        contribute(1, scalar_mul(elementwise_mul(g, elementwise_div(output, inputs[1])), -1.0));
        break;
      case kScalarMul:
        contribute(0, scalar_mul(g, args.scalar));
        break;
      case kMatMul:
        contribute(0, matmul(g, transpose(inputs[1])));
        contribute(1, matmul(transpose(inputs[0]), g));
        break;
      case kTranspose:
        contribute(0, transpose(g));
        break;
      case kReshape:
        contribute(0, reshape(g, inputs[0].shape()));
        break;
      case kTanh: {
        DiffTensor ones = DiffTensor::full(output.shape(), 1.0);
        contribute(0, elementwise_mul(g, sub(ones, elementwise_mul(output, output))));
        break;
      }
      case kRelu: {
        DiffTensor mask(output.shape(), saved);
        contribute(0, elementwise_mul(g, mask));
        break;
      }
      case kExp:
        contribute(0, elementwise_mul(g, output));
        break;
      case kLog:
        contribute(0, elementwise_div(g, inputs[0]));
        break;
      case kSqrt:
        contribute(0, elementwise_div(g, scalar_mul(output, 2.0)));
        break;
      case kSum:
        contribute(0, broadcast_to(g, inputs[0].shape()));
        break;
      case kBroadcastTo:
        contribute(0, reshape(sum(g), inputs[0].shape()));
        break;
      case kRowSums:
        contribute(0, broadcast_cols(g, inputs[0].cols()));
        break;
      case kColSums:
        contribute(0, broadcast_rows(g, inputs[0].rows()));
        break;
      case kBroadcastRows:
        contribute(0, col_sums(g));
        break;
      case kBroadcastCols:
        contribute(0, row_sums(g));
        break;
      case kConcatRows: {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          const std::size_t r = inputs[i].rows();
          contribute(i, slice_rows(g, offset, offset + r));
          offset += r;
        }
        break;
      }
      case kSliceRows:
        contribute(0, pad_rows(g, inputs[0].rows(), args.row_begin));
        break;
      case kPadRows:
        contribute(0, slice_rows(g, args.row_begin, args.row_begin + inputs[0].rows()));
        break;
      case kLogsumexpRow: {
        const DiffTensor& x = inputs[0];
        if (x.rank() == 2) {
          DiffTensor soft = exp(sub(x, broadcast_cols(output, x.cols())));
          contribute(0, elementwise_mul(broadcast_cols(g, x.cols()), soft));
        } else {
          DiffTensor soft = exp(sub(x, broadcast_to(output, x.shape())));
          contribute(0, elementwise_mul(broadcast_to(g, x.shape()), soft));
        }
        break;
      }
      default:
        fail("backward", "internal: unhandled node kind " + std::to_string(kind));
    }
  }

  std::vector<DiffTensor> out;
  out.reserve(leaves.size());
  for (const DiffTensor& leaf : leaves) {
    require_defined(leaf, "backward");
    if (leaf.tracked() && leaf.tape() == tape &&
        leaf.node() <= root.node() &&
        grad[static_cast<std::size_t>(leaf.node())].defined()) {
      out.push_back(grad[static_cast<std::size_t>(leaf.node())]);
    } else {
      out.push_back(DiffTensor::zeros(leaf.shape()));
    }
  }
  return out;
}

DiffTensor hessian_vector_product(const LossBuilder& loss, const DiffTensor& params,
                                  const DiffTensor& v, HvpBackend backend) {
  require_defined(params, "hessian_vector_product");
  require_defined(v, "hessian_vector_product");
  require_same_shape(params, v, "hessian_vector_product");

  double v_norm = 0.0;
  for (double x : v.values()) v_norm += x * x;
  v_norm = std::sqrt(v_norm);
  if (v_norm == 0.0) return DiffTensor::zeros(params.shape());

  if (backend == HvpBackend::kDoubleBackward) {
    GradientTape tape;
    DiffTensor p = tape.leaf(params);
    DiffTensor l = loss(tape, p);
    require(l.defined() && l.numel() == 1, "hessian_vector_product",
            "loss builder must return a scalar");
    if (!l.tracked()) return DiffTensor::zeros(params.shape());
    std::array<DiffTensor, 1> wrt{p};
    DiffTensor g = backward(l, wrt)[0];
    if (!g.tracked()) return DiffTensor::zeros(params.shape());  // loss linear in params
    DiffTensor s = dot(g, v.detached());
    DiffTensor hv = backward(s, wrt)[0];
    return hv.detached();
  }

  // Pearlmutter-style central difference of the gradient along v.
  constexpr double kEps = 1e-4;
  double p_norm = 0.0;
  for (double x : params.values()) p_norm += x * x;
  p_norm = std::sqrt(p_norm);
  const double h = kEps * (1.0 + p_norm) / (v_norm + kEps);

  auto grad_at = [&](double shift) {
    std::vector<double> moved(params.values().begin(), params.values().end());
    auto vv = v.values();
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += shift * vv[i];
    GradientTape tape;
    DiffTensor p = tape.leaf(params.shape(), std::move(moved));
    DiffTensor l = loss(tape, p);
    require(l.defined() && l.numel() == 1, "hessian_vector_product",
            "loss builder must return a scalar");
    if (!l.tracked()) return std::vector<double>(params.numel(), 0.0);
    std::array<DiffTensor, 1> wrt{p};
    DiffTensor g = backward(l, wrt)[0];
    return std::vector<double>(g.values().begin(), g.values().end());
  };

  std::vector<double> plus = grad_at(h);
  std::vector<double> minus = grad_at(-h);
  std::vector<double> out(params.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (plus[i] - minus[i]) / (2.0 * h);
  return DiffTensor(params.shape(), std::move(out));
}

}  // namespace selftpt
