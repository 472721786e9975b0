#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace selftpt {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class GradientTape;
struct OpArgs;

// Dense 64-bit float tensor with an optional handle into a gradient tape.
// A tensor without a handle takes part in computation as a constant: it
// records nothing and receives zero gradient. Value buffers are immutable
// and shared, so copies are cheap and a tape can hold its operands safely.
class DiffTensor {
 public:
  DiffTensor() = default;
  DiffTensor(Shape shape, std::vector<double> values);

  static DiffTensor scalar(double v);
  static DiffTensor vector(std::vector<double> v);
  static DiffTensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
  static DiffTensor zeros(const Shape& shape);
  static DiffTensor full(const Shape& shape, double v);

  const Shape& shape() const { return shape_; }
  std::span<const double> values() const;
  std::size_t numel() const;
  std::size_t rank() const { return shape_.size(); }
  std::size_t rows() const;  // rank-2 only
  std::size_t cols() const;  // rank-2 only
  double item() const;       // numel()==1 only
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;

  bool defined() const { return data_ != nullptr; }
  bool tracked() const { return tape_ != nullptr; }
  GradientTape* tape() const { return tape_; }
  std::int64_t node() const { return node_; }

  // Same values, no tape handle. Lets a result outlive its tape.
  DiffTensor detached() const;

 private:
  friend class GradientTape;
  friend DiffTensor detail_record(GradientTape* tape, int kind, std::span<const DiffTensor> inputs,
                                  const OpArgs& args, Shape shape, std::vector<double> values,
                                  std::vector<double> saved);
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  GradientTape* tape_ = nullptr;
  std::int64_t node_ = -1;
};

// Extra arguments for operations that need more than their tensor inputs.
struct OpArgs {
  double scalar = 1.0;
  std::size_t row_begin = 0;
  std::size_t row_end = 0;
  Shape shape;
};

// Elementwise and matrix operations. Each validates shapes up front and
// throws std::invalid_argument naming the operation and the offending
// shapes; none produces NaN silently. When any input is tracked the result
// is recorded on that input's tape.
DiffTensor add(const DiffTensor& a, const DiffTensor& b);
DiffTensor sub(const DiffTensor& a, const DiffTensor& b);
DiffTensor elementwise_mul(const DiffTensor& a, const DiffTensor& b);
DiffTensor elementwise_div(const DiffTensor& a, const DiffTensor& b);
DiffTensor scalar_mul(const DiffTensor& a, double c);
DiffTensor matmul(const DiffTensor& a, const DiffTensor& b);
DiffTensor transpose(const DiffTensor& a);
DiffTensor reshape(const DiffTensor& a, const Shape& shape);
DiffTensor tanh(const DiffTensor& a);
DiffTensor relu(const DiffTensor& a);
DiffTensor exp(const DiffTensor& a);
DiffTensor log(const DiffTensor& a);   // rejects non-positive entries
DiffTensor sqrt(const DiffTensor& a);  // rejects negative entries

// Reductions and broadcasts.
DiffTensor sum(const DiffTensor& a);   // all elements -> scalar
DiffTensor mean(const DiffTensor& a);  // all elements -> scalar
DiffTensor broadcast_to(const DiffTensor& scalar, const Shape& shape);
DiffTensor row_sums(const DiffTensor& m);                        // r x c -> {r}
DiffTensor col_sums(const DiffTensor& m);                        // r x c -> {c}
DiffTensor broadcast_rows(const DiffTensor& v, std::size_t r);   // {c} -> r x c, v in every row
DiffTensor broadcast_cols(const DiffTensor& v, std::size_t c);   // {r} -> r x c, v in every column

// Row assembly. concat_rows accepts rank-1 inputs as single rows.
DiffTensor concat_rows(std::span<const DiffTensor> parts);
DiffTensor slice_rows(const DiffTensor& m, std::size_t row_begin, std::size_t row_end);
DiffTensor pad_rows(const DiffTensor& m, std::size_t total_rows, std::size_t row_offset);

// Vector geometry and row-stable softmax pieces.
DiffTensor dot(const DiffTensor& a, const DiffTensor& b);  // same shape -> scalar
DiffTensor l2_norm(const DiffTensor& a);                   // -> scalar
DiffTensor l2_normalize(const DiffTensor& a);              // rejects zero norm
DiffTensor l2_normalize_rows(const DiffTensor& m);         // per matrix row
DiffTensor softmax_row(const DiffTensor& a);               // per row; vector = one row
DiffTensor logsumexp_row(const DiffTensor& a);             // r x c -> {r}; vector -> scalar

// String-keyed dispatch over the public operation set. Unknown kinds are
// rejected with a diagnostic. Kinds needing extra arguments (scalar_mul,
// slice_rows) read them from args.
DiffTensor tensor_op(std::string_view kind, std::span<const DiffTensor> inputs,
                     const OpArgs& args = {});

// The names accepted by tensor_op, for test iteration.
std::span<const std::string_view> tensor_op_names();

// Records every tracked operation of one differentiation scope. Gradients
// produced by backward() are themselves recorded, so a second backward pass
// through them yields exact second-order products.
class GradientTape {
 public:
  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  // Enters a value as a tracked parameter of this tape.
  DiffTensor leaf(const DiffTensor& value);
  DiffTensor leaf(Shape shape, std::vector<double> values);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend DiffTensor detail_record(GradientTape* tape, int kind, std::span<const DiffTensor> inputs,
                                  const OpArgs& args, Shape shape, std::vector<double> values,
                                  std::vector<double> saved);
  friend std::vector<DiffTensor> backward(const DiffTensor& root,
                                          std::span<const DiffTensor> leaves);

  struct Node {
    int kind = 0;
    OpArgs args;
    std::vector<DiffTensor> inputs;
    DiffTensor output;
    std::vector<double> saved;  // op-specific constants, e.g. the relu mask
  };
  std::vector<Node> nodes_;
};

// Reverse-mode sweep from a tracked scalar root. Returns one gradient per
// requested leaf, in order; leaves that the root does not depend on (or
// untracked tensors) get zero gradients of matching shape. Identical tapes
// produce bit-identical gradients.
std::vector<DiffTensor> backward(const DiffTensor& root, std::span<const DiffTensor> leaves);

// Reverse-mode sweeps since process start. Deltas around a phase prove how
// much optimization it performed (or that it performed none).
std::size_t backward_pass_count();

enum class HvpBackend { kDoubleBackward, kPearlmutterFd };

// Builds a scalar loss from tracked parameters on the given tape.
using LossBuilder = std::function<DiffTensor(GradientTape&, const DiffTensor& params)>;

// Hessian-vector product of the loss at `params` with direction `v`.
// kDoubleBackward differentiates the recorded gradient exactly;
// kPearlmutterFd uses central differences of the gradient with step
// h = eps*(1+|theta|)/(|v|+eps), eps=1e-4. A zero direction returns a zero
// vector for both backends (the finite-difference step is undefined there).
DiffTensor hessian_vector_product(const LossBuilder& loss, const DiffTensor& params,
                                  const DiffTensor& v, HvpBackend backend);

}  // namespace selftpt
