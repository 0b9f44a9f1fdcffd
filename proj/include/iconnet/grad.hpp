#pragma once

// Minimal reverse-mode differentiation over dense row-major tensors.
//
// A Tensor is a shared handle: copies alias the same values and gradient,
// which is what lets a Tape's backward closures write into parameters the
// caller still holds. Use clone() for an independent copy.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace iconnet::grad {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Index shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Array<Scalar> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  Index size() const { return node_->values.size(); }

  const Array<Scalar>& values() const { return node_->values; }
  Array<Scalar>& values() { return node_->values; }
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return node_->has_grad; }
  const Array<Scalar>& grad() const { return node_->grad; }
  /// Gradient storage, zero-initialised on first access. Handles share it,
  /// so this is available through const handles too.
  Array<Scalar>& grad_buffer() const;
  void zero_grad() const;

  Tensor clone() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  struct Node {
    Shape shape;
    Array<Scalar> values;
    Array<Scalar> grad;
    bool has_grad = false;
    bool requires_grad = false;
  };
  std::shared_ptr<Node> node_;
};

/// Records operations in execution order; backward() replays them in reverse.
/// A tape belongs to one thread. A non-recording tape evaluates values only.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(const Array<Scalar>& grad_out)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  /// True when an op over these inputs must be recorded.
  bool tracks(std::initializer_list<const Tensor<Scalar>*> inputs) const;
  void record(const Tensor<Scalar>& output, BackwardFn fn);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(root)/d(root) = 1 and accumulates into every reachable tensor
  /// that requires a gradient. Throws ArgumentError for a non-scalar root or
  /// one not produced on this tape.
  void backward(const Tensor<Scalar>& root);

 private:
  struct Entry {
    Tensor<Scalar> output;
    BackwardFn fn;
  };
  bool recording_;
  std::vector<Entry> entries_;
};

template <typename Scalar>
void backward(Tape<Scalar>& tape, const Tensor<Scalar>& root) {
  tape.backward(root);
}

enum class Padding { Same, Valid };
enum class ConvAlgo { Direct, Fft };

/// Cross-correlation: signal [B x C x T], kernels [O x C x L] -> [B x O x T'].
template <typename Scalar>
Tensor<Scalar> conv1d(Tape<Scalar>& tape, const Tensor<Scalar>& signal, const Tensor<Scalar>& kernels,
                      Index stride, Padding padding, ConvAlgo algo = ConvAlgo::Direct);

/// x [B x I] * W [I x O] + b [O]. Each output row depends only on its input row.
template <typename Scalar>
Tensor<Scalar> linear(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias);

template <typename Scalar>
Tensor<Scalar> relu(Tape<Scalar>& tape, const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> abs(Tape<Scalar>& tape, const Tensor<Scalar>& x);

/// [B x C x T] -> [B x C x ((T - window) / stride + 1)]; ties go to the first maximum.
template <typename Scalar>
Tensor<Scalar> max_pool1d(Tape<Scalar>& tape, const Tensor<Scalar>& x, Index window, Index stride);

/// [B x C x T] -> [B x C]
template <typename Scalar>
Tensor<Scalar> global_max_pool1d(Tape<Scalar>& tape, const Tensor<Scalar>& x);

/// [B x C x T] -> [B x 1 x T]
template <typename Scalar>
Tensor<Scalar> channel_sum(Tape<Scalar>& tape, const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> multiply(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> add(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> scale(Tape<Scalar>& tape, const Tensor<Scalar>& x, Scalar factor);

template <typename Scalar>
Tensor<Scalar> sum(Tape<Scalar>& tape, const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> reshape(Tape<Scalar>& tape, const Tensor<Scalar>& x, Shape shape);

/// sum_i w[y_i] * (-log softmax(z_i)[y_i]) / sum_i w[y_i], stabilised by max subtraction.
template <typename Scalar>
Tensor<Scalar> weighted_cross_entropy(Tape<Scalar>& tape, const Tensor<Scalar>& logits,
                                      std::span<const int> targets, std::span<const double> class_weights);

/// Row-wise softmax of [B x K] logits; no tape involvement.
template <typename Scalar>
RowMatrix<double> softmax_rows(const Tensor<Scalar>& logits);

template <typename Scalar>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Array<Scalar>> m;
  std::vector<Array<Scalar>> v;
};

/// Bias-corrected Adam update in place; a parameter without a gradient is
/// treated as having a zero gradient.
template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>> params, AdamState<Scalar>& state);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  Index worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Central differences against backward() for every coordinate of every
/// tensor in `point`; error is |a - n| / max(|a|, |n|, 1e-8).
template <typename Scalar>
GradCheckResult finite_diff_check(const std::function<Tensor<Scalar>(Tape<Scalar>&)>& f,
                                  std::span<Tensor<Scalar>> point, double epsilon);

}  // namespace iconnet::grad
