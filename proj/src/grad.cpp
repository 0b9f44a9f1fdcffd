#include "iconnet/grad.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "iconnet/dsp.hpp"
#include "iconnet/errors.hpp"

namespace iconnet::grad {

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream s;
  s << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) s << (i ? " x " : "") << shape[i];
  s << ']';
  return s.str();
}

namespace {

template <typename Scalar>
void ensure_finite(const Array<Scalar>& values, const char* op) {
  if (!values.allFinite()) throw NumericError(std::string(op) + " produced a non-finite value");
}

template <typename Scalar>
void require_rank(const Tensor<Scalar>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_string(t.shape()));
  }
}

template <typename Scalar>
using MapRow = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMapRow = Eigen::Map<const RowMatrix<Scalar>>;
using StridedRow = Eigen::OuterStride<>;

constexpr Index kConvBlock = 512;

struct ConvGeometry {
  Index batch, in_ch, out_ch, length, taps, stride, pad_left, padded, out_len;
};

template <typename Scalar>
ConvGeometry conv_geometry(const Tensor<Scalar>& signal, const Tensor<Scalar>& kernels, Index stride,
                           Padding padding) {
  require_rank(signal, 3, "conv1d", "signal");
  require_rank(kernels, 3, "conv1d", "kernels");
  if (stride < 1) throw ArgumentError("conv1d: stride must be positive");
  ConvGeometry g{};
  g.batch = signal.dim(0);
  g.in_ch = signal.dim(1);
  g.length = signal.dim(2);
  g.out_ch = kernels.dim(0);
  g.taps = kernels.dim(2);
  g.stride = stride;
  if (kernels.dim(1) != g.in_ch) {
    throw ShapeError("conv1d: channel mismatch between signal " + shape_string(signal.shape()) +
                     " and kernels " + shape_string(kernels.shape()));
  }
  const Index total_pad = padding == Padding::Same ? g.taps - 1 : 0;
  g.pad_left = total_pad / 2;
  g.padded = g.length + total_pad;
  if (g.taps > g.padded) {
    throw ShapeError("conv1d: kernel " + shape_string(kernels.shape()) + " longer than signal " +
                     shape_string(signal.shape()));
  }
  g.out_len = (g.padded - g.taps) / stride + 1;
  return g;
}

template <typename Scalar>
void pad_row(const Scalar* src, const ConvGeometry& g, std::vector<Scalar>& dst) {
  dst.assign(static_cast<std::size_t>(g.padded), Scalar(0));
  std::copy(src, src + g.length, dst.begin() + g.pad_left);
}

// Columns of the im2col block are contiguous windows of the padded signal.
template <typename Scalar>
void fill_columns(const std::vector<Scalar>& padded, const ConvGeometry& g, Index t0, Index n,
                  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& cols) {
  cols.resize(g.taps, n);
  for (Index j = 0; j < n; ++j) {
    std::copy_n(padded.data() + (t0 + j) * g.stride, g.taps, cols.col(j).data());
  }
}

template <typename Scalar>
Array<Scalar> conv_forward_direct(const Tensor<Scalar>& signal, const Tensor<Scalar>& kernels,
                                  const ConvGeometry& g) {
  Array<Scalar> out = Array<Scalar>::Zero(g.batch * g.out_ch * g.out_len);
  std::vector<Scalar> padded;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> cols;
  for (Index b = 0; b < g.batch; ++b) {
    MapRow<Scalar> y(out.data() + b * g.out_ch * g.out_len, g.out_ch, g.out_len);
    for (Index c = 0; c < g.in_ch; ++c) {
      pad_row(signal.values().data() + (b * g.in_ch + c) * g.length, g, padded);
      Eigen::Map<const RowMatrix<Scalar>, 0, StridedRow> k(kernels.values().data() + c * g.taps, g.out_ch,
                                                           g.taps, StridedRow(g.in_ch * g.taps));
      for (Index t0 = 0; t0 < g.out_len; t0 += kConvBlock) {
        const Index n = std::min(kConvBlock, g.out_len - t0);
        fill_columns(padded, g, t0, n, cols);
        y.middleCols(t0, n).noalias() += k * cols;
      }
    }
  }
  return out;
}

template <typename Scalar>
void conv_backward_direct(const Tensor<Scalar>& signal, const Tensor<Scalar>& kernels,
                          const ConvGeometry& g, const Array<Scalar>& grad_out, bool want_signal,
                          bool want_kernels, Array<Scalar>* grad_signal, Array<Scalar>* grad_kernels) {
  std::vector<Scalar> padded;
  std::vector<Scalar> grad_padded;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> cols;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> grad_cols;
  RowMatrix<Scalar> k_grad;
  for (Index c = 0; c < g.in_ch; ++c) {
    Eigen::Map<const RowMatrix<Scalar>, 0, StridedRow> k(kernels.values().data() + c * g.taps, g.out_ch,
                                                         g.taps, StridedRow(g.in_ch * g.taps));
    if (want_kernels) k_grad = RowMatrix<Scalar>::Zero(g.out_ch, g.taps);
    for (Index b = 0; b < g.batch; ++b) {
      ConstMapRow<Scalar> gy(grad_out.data() + b * g.out_ch * g.out_len, g.out_ch, g.out_len);
      if (want_kernels) pad_row(signal.values().data() + (b * g.in_ch + c) * g.length, g, padded);
      if (want_signal) grad_padded.assign(static_cast<std::size_t>(g.padded), Scalar(0));
      for (Index t0 = 0; t0 < g.out_len; t0 += kConvBlock) {
        const Index n = std::min(kConvBlock, g.out_len - t0);
        if (want_kernels) {
          fill_columns(padded, g, t0, n, cols);
          k_grad.noalias() += gy.middleCols(t0, n) * cols.transpose();
        }
        if (want_signal) {
          grad_cols.noalias() = k.transpose() * gy.middleCols(t0, n);
          for (Index j = 0; j < n; ++j) {
            Scalar* dst = grad_padded.data() + (t0 + j) * g.stride;
            const Scalar* src = grad_cols.col(j).data();
            for (Index l = 0; l < g.taps; ++l) dst[l] += src[l];
          }
        }
      }
      if (want_signal) {
        Scalar* gx = grad_signal->data() + (b * g.in_ch + c) * g.length;
        for (Index t = 0; t < g.length; ++t) gx[t] += grad_padded[t + g.pad_left];
      }
    }
    if (want_kernels) {
      for (Index o = 0; o < g.out_ch; ++o) {
        Scalar* dst = grad_kernels->data() + (o * g.in_ch + c) * g.taps;
        for (Index l = 0; l < g.taps; ++l) dst[l] += k_grad(o, l);
      }
    }
  }
}

// FFT path: spectra of zero-padded rows, products summed over the contracted
// channel, one inverse transform per output row. Computed in double.
struct FftConv {
  Index n_fft;
  dsp::FftPlan plan;
  explicit FftConv(const ConvGeometry& g) : n_fft(dsp::next_power_of_two(g.padded + g.taps)), plan(n_fft) {}

  template <typename Scalar>
  std::vector<dsp::Complex> spectrum(const Scalar* data, Index n, Index offset = 0) const {
    std::vector<dsp::Complex> buf(static_cast<std::size_t>(n_fft));
    for (Index i = 0; i < n; ++i) buf[offset + i] = static_cast<double>(data[i]);
    plan.forward(buf);
    return buf;
  }
};

template <typename Scalar>
std::vector<dsp::Complex> upsampled_spectrum(const FftConv& fc, const Scalar* g_row, const ConvGeometry& g) {
  std::vector<dsp::Complex> buf(static_cast<std::size_t>(fc.n_fft));
  for (Index t = 0; t < g.out_len; ++t) buf[t * g.stride] = static_cast<double>(g_row[t]);
  fc.plan.forward(buf);
  return buf;
}

template <typename Scalar>
Array<Scalar> conv_forward_fft(const Tensor<Scalar>& signal, const Tensor<Scalar>& kernels,
                               const ConvGeometry& g) {
  const FftConv fc(g);
  std::vector<std::vector<dsp::Complex>> kspec;
  for (Index i = 0; i < g.out_ch * g.in_ch; ++i) kspec.push_back(fc.spectrum(kernels.values().data() + i * g.taps, g.taps));
  Array<Scalar> out(g.batch * g.out_ch * g.out_len);
  for (Index b = 0; b < g.batch; ++b) {
    std::vector<std::vector<dsp::Complex>> xspec;
    for (Index c = 0; c < g.in_ch; ++c) {
      xspec.push_back(fc.spectrum(signal.values().data() + (b * g.in_ch + c) * g.length, g.length, g.pad_left));
    }
    std::vector<dsp::Complex> acc(static_cast<std::size_t>(fc.n_fft));
    for (Index o = 0; o < g.out_ch; ++o) {
      std::fill(acc.begin(), acc.end(), dsp::Complex{});
      for (Index c = 0; c < g.in_ch; ++c) {
        const auto& ks = kspec[o * g.in_ch + c];
        for (Index k = 0; k < fc.n_fft; ++k) acc[k] += xspec[c][k] * std::conj(ks[k]);
      }
      fc.plan.inverse(acc);
      for (Index t = 0; t < g.out_len; ++t) {
        out[(b * g.out_ch + o) * g.out_len + t] = static_cast<Scalar>(acc[t * g.stride].real());
      }
    }
  }
  return out;
}

template <typename Scalar>
void conv_backward_fft(const Tensor<Scalar>& signal, const Tensor<Scalar>& kernels, const ConvGeometry& g,
                       const Array<Scalar>& grad_out, bool want_signal, bool want_kernels,
                       Array<Scalar>* grad_signal, Array<Scalar>* grad_kernels) {
  const FftConv fc(g);
  std::vector<std::vector<dsp::Complex>> kspec;
  if (want_signal) {
    for (Index i = 0; i < g.out_ch * g.in_ch; ++i) kspec.push_back(fc.spectrum(kernels.values().data() + i * g.taps, g.taps));
  }
  std::vector<dsp::Complex> acc(static_cast<std::size_t>(fc.n_fft));
  for (Index b = 0; b < g.batch; ++b) {
    std::vector<std::vector<dsp::Complex>> gspec;
    for (Index o = 0; o < g.out_ch; ++o) {
      gspec.push_back(upsampled_spectrum(fc, grad_out.data() + (b * g.out_ch + o) * g.out_len, g));
    }
    for (Index c = 0; c < g.in_ch; ++c) {
      if (want_kernels) {
        const auto xs = fc.spectrum(signal.values().data() + (b * g.in_ch + c) * g.length, g.length, g.pad_left);
        for (Index o = 0; o < g.out_ch; ++o) {
          for (Index k = 0; k < fc.n_fft; ++k) acc[k] = xs[k] * std::conj(gspec[o][k]);
          fc.plan.inverse(acc);
          Scalar* dst = grad_kernels->data() + (o * g.in_ch + c) * g.taps;
          for (Index l = 0; l < g.taps; ++l) dst[l] += static_cast<Scalar>(acc[l].real());
        }
      }
      if (want_signal) {
        std::fill(acc.begin(), acc.end(), dsp::Complex{});
        for (Index o = 0; o < g.out_ch; ++o) {
          const auto& ks = kspec[o * g.in_ch + c];
          for (Index k = 0; k < fc.n_fft; ++k) acc[k] += gspec[o][k] * ks[k];
        }
        fc.plan.inverse(acc);
        Scalar* gx = grad_signal->data() + (b * g.in_ch + c) * g.length;
        for (Index t = 0; t < g.length; ++t) gx[t] += static_cast<Scalar>(acc[t + g.pad_left].real());
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array<Scalar> values, bool requires_grad) : node_(std::make_shared<Node>()) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  for (Index d : shape) {
    if (d < 1) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape, bool requires_grad) {
  const Index n = shape_size(shape);
  return Tensor(std::move(shape), Array<Scalar>::Zero(n), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  Array<Scalar> v(1);
  v[0] = value;
  return Tensor(Shape{}, std::move(v), requires_grad);
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return node_->values[0];
}

template <typename Scalar>
Array<Scalar>& Tensor<Scalar>::grad_buffer() const {
  if (!node_->has_grad) {
    node_->grad = Array<Scalar>::Zero(node_->values.size());
    node_->has_grad = true;
  }
  return node_->grad;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() const {
  node_->grad.resize(0);
  node_->has_grad = false;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone() const {
  return Tensor(node_->shape, node_->values, node_->requires_grad);
}

template <typename Scalar>
bool Tape<Scalar>::tracks(std::initializer_list<const Tensor<Scalar>*> inputs) const {
  if (!recording_) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename Scalar>
void Tape<Scalar>::record(const Tensor<Scalar>& output, BackwardFn fn) {
  entries_.push_back(Entry{output, std::move(fn)});
}

template <typename Scalar>
void Tape<Scalar>::backward(const Tensor<Scalar>& root) {
  if (!root.defined() || root.size() != 1) {
    throw ArgumentError("backward needs a scalar root");
  }
  std::ptrdiff_t root_pos = -1;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].output.same_node(root)) root_pos = static_cast<std::ptrdiff_t>(i);
  }
  if (root_pos < 0) throw ArgumentError("backward root was not produced on this tape");
  for (auto& e : entries_) e.output.zero_grad();
  Tensor<Scalar> seed = root;
  seed.grad_buffer().setOnes();
  for (std::ptrdiff_t i = root_pos; i >= 0; --i) {
    Entry& e = entries_[static_cast<std::size_t>(i)];
    if (!e.output.has_grad()) continue;
    e.fn(e.output.grad());
  }
}

template <typename Scalar>
Tensor<Scalar> conv1d(Tape<Scalar>& tape, const Tensor<Scalar>& signal, const Tensor<Scalar>& kernels,
                      Index stride, Padding padding, ConvAlgo algo) {
  const ConvGeometry g = conv_geometry(signal, kernels, stride, padding);
  Array<Scalar> values =
      algo == ConvAlgo::Fft ? conv_forward_fft(signal, kernels, g) : conv_forward_direct(signal, kernels, g);
  ensure_finite(values, "conv1d");
  const bool track = tape.tracks({&signal, &kernels});
  Tensor<Scalar> out({g.batch, g.out_ch, g.out_len}, std::move(values), track);
  if (track) {
    tape.record(out, [signal, kernels, g, algo](const Array<Scalar>& grad) mutable {
      const bool want_signal = signal.requires_grad();
      const bool want_kernels = kernels.requires_grad();
      Array<Scalar>* gs = want_signal ? &signal.grad_buffer() : nullptr;
      Array<Scalar>* gk = want_kernels ? &kernels.grad_buffer() : nullptr;
      if (algo == ConvAlgo::Fft) {
        conv_backward_fft(signal, kernels, g, grad, want_signal, want_kernels, gs, gk);
      } else {
        conv_backward_direct(signal, kernels, g, grad, want_signal, want_kernels, gs, gk);
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> linear(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  require_rank(bias, 1, "linear", "bias");
  const Index batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(1);
  if (weight.dim(0) != in || bias.dim(0) != out_dim) {
    throw ShapeError("linear: shapes do not conform: x " + shape_string(x.shape()) + ", W " +
                     shape_string(weight.shape()) + ", b " + shape_string(bias.shape()));
  }
  Array<Scalar> values(batch * out_dim);
  ConstMapRow<Scalar> xm(x.values().data(), batch, in);
  ConstMapRow<Scalar> wm(weight.values().data(), in, out_dim);
  MapRow<Scalar> ym(values.data(), batch, out_dim);
  const Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> bm(bias.values().data(), out_dim);
  for (Index i = 0; i < batch; ++i) ym.row(i).noalias() = xm.row(i) * wm + bm;
  ensure_finite(values, "linear");
  const bool track = tape.tracks({&x, &weight, &bias});
  Tensor<Scalar> out({batch, out_dim}, std::move(values), track);
  if (track) {
    tape.record(out, [x, weight, bias, batch, in, out_dim](const Array<Scalar>& grad) mutable {
      ConstMapRow<Scalar> gy(grad.data(), batch, out_dim);
      if (x.requires_grad()) {
        MapRow<Scalar> gx(x.grad_buffer().data(), batch, in);
        gx.noalias() += gy * ConstMapRow<Scalar>(weight.values().data(), in, out_dim).transpose();
      }
      if (weight.requires_grad()) {
        MapRow<Scalar> gw(weight.grad_buffer().data(), in, out_dim);
        gw.noalias() += ConstMapRow<Scalar>(x.values().data(), batch, in).transpose() * gy;
      }
      if (bias.requires_grad()) {
        Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> gb(bias.grad_buffer().data(), out_dim);
        gb += gy.colwise().sum();
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  const bool track = tape.tracks({&x});
  Tensor<Scalar> out(x.shape(), x.values().cwiseMax(Scalar(0)), track);
  if (track) {
    tape.record(out, [x](const Array<Scalar>& grad) mutable {
      x.grad_buffer() += (x.values() > Scalar(0)).select(grad, Scalar(0));
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> abs(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  const bool track = tape.tracks({&x});
  Tensor<Scalar> out(x.shape(), x.values().abs(), track);
  if (track) {
    tape.record(out, [x](const Array<Scalar>& grad) mutable {
      x.grad_buffer() += grad * x.values().sign();
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> max_pool1d(Tape<Scalar>& tape, const Tensor<Scalar>& x, Index window, Index stride) {
  require_rank(x, 3, "max_pool1d", "input");
  if (window < 1 || stride < 1) throw ArgumentError("max_pool1d: window and stride must be positive");
  const Index rows = x.dim(0) * x.dim(1), len = x.dim(2);
  if (window > len) {
    throw ShapeError("max_pool1d: window " + std::to_string(window) + " exceeds length of " +
                     shape_string(x.shape()));
  }
  const Index out_len = (len - window) / stride + 1;
  Array<Scalar> values(rows * out_len);
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(rows * out_len));
  const Scalar* src = x.values().data();
  for (Index r = 0; r < rows; ++r) {
    for (Index t = 0; t < out_len; ++t) {
      const Index start = r * len + t * stride;
      Index best = start;
      for (Index i = start + 1; i < start + window; ++i) {
        if (src[i] > src[best]) best = i;
      }
      values[r * out_len + t] = src[best];
      (*argmax)[static_cast<std::size_t>(r * out_len + t)] = best;
    }
  }
  const bool track = tape.tracks({&x});
  Tensor<Scalar> out({x.dim(0), x.dim(1), out_len}, std::move(values), track);
  if (track) {
    tape.record(out, [x, argmax](const Array<Scalar>& grad) mutable {
      auto& gx = x.grad_buffer();
      for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += grad[static_cast<Index>(i)];
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_max_pool1d(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  require_rank(x, 3, "global_max_pool1d", "input");
  const Index rows = x.dim(0) * x.dim(1), len = x.dim(2);
  Array<Scalar> values(rows);
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    Index best = 0;
    x.values().segment(r * len, len).maxCoeff(&best);
    // maxCoeff reports the first maximal index.
    (*argmax)[static_cast<std::size_t>(r)] = r * len + best;
    values[r] = x.values()[r * len + best];
  }
  const bool track = tape.tracks({&x});
  Tensor<Scalar> out({x.dim(0), x.dim(1)}, std::move(values), track);
  if (track) {
    tape.record(out, [x, argmax](const Array<Scalar>& grad) mutable {
      auto& gx = x.grad_buffer();
      for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += grad[static_cast<Index>(i)];
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> channel_sum(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  require_rank(x, 3, "channel_sum", "input");
  const Index batch = x.dim(0), ch = x.dim(1), len = x.dim(2);
  Array<Scalar> values = Array<Scalar>::Zero(batch * len);
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < ch; ++c) values.segment(b * len, len) += x.values().segment((b * ch + c) * len, len);
  }
  const bool track = tape.tracks({&x});
  Tensor<Scalar> out({batch, 1, len}, std::move(values), track);
  if (track) {
    tape.record(out, [x, batch, ch, len](const Array<Scalar>& grad) mutable {
      auto& gx = x.grad_buffer();
      for (Index b = 0; b < batch; ++b) {
        for (Index c = 0; c < ch; ++c) gx.segment((b * ch + c) * len, len) += grad.segment(b * len, len);
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> multiply(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("multiply: shapes differ: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Array<Scalar> values = a.values() * b.values();
  ensure_finite(values, "multiply");
  const bool track = tape.tracks({&a, &b});
  Tensor<Scalar> out(a.shape(), std::move(values), track);
  if (track) {
    tape.record(out, [a, b](const Array<Scalar>& grad) mutable {
      if (a.requires_grad()) a.grad_buffer() += grad * b.values();
      if (b.requires_grad()) b.grad_buffer() += grad * a.values();
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> add(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes differ: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Array<Scalar> values = a.values() + b.values();
  ensure_finite(values, "add");
  const bool track = tape.tracks({&a, &b});
  Tensor<Scalar> out(a.shape(), std::move(values), track);
  if (track) {
    tape.record(out, [a, b](const Array<Scalar>& grad) mutable {
      if (a.requires_grad()) a.grad_buffer() += grad;
      if (b.requires_grad()) b.grad_buffer() += grad;
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale(Tape<Scalar>& tape, const Tensor<Scalar>& x, Scalar factor) {
  Array<Scalar> values = x.values() * factor;
  ensure_finite(values, "scale");
  const bool track = tape.tracks({&x});
  Tensor<Scalar> out(x.shape(), std::move(values), track);
  if (track) {
    tape.record(out, [x, factor](const Array<Scalar>& grad) mutable { x.grad_buffer() += grad * factor; });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sum(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  const bool track = tape.tracks({&x});
  Tensor<Scalar> out = Tensor<Scalar>::scalar(x.values().sum(), track);
  ensure_finite(out.values(), "sum");
  if (track) {
    tape.record(out, [x](const Array<Scalar>& grad) mutable { x.grad_buffer() += grad[0]; });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> reshape(Tape<Scalar>& tape, const Tensor<Scalar>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  const bool track = tape.tracks({&x});
  Tensor<Scalar> out(std::move(shape), x.values(), track);
  if (track) {
    tape.record(out, [x](const Array<Scalar>& grad) mutable { x.grad_buffer() += grad; });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> weighted_cross_entropy(Tape<Scalar>& tape, const Tensor<Scalar>& logits,
                                      std::span<const int> targets, std::span<const double> class_weights) {
  require_rank(logits, 2, "weighted_cross_entropy", "logits");
  const Index batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<Index>(targets.size()) != batch) {
    throw ShapeError("weighted_cross_entropy: " + std::to_string(targets.size()) + " targets for batch of " +
                     std::to_string(batch));
  }
  if (static_cast<Index>(class_weights.size()) != classes) {
    throw ArgumentError("weighted_cross_entropy: need one weight per class");
  }
  for (double w : class_weights) {
    if (!(w > 0.0)) throw ArgumentError("weighted_cross_entropy: class weights must be positive");
  }
  for (int t : targets) {
    if (t < 0 || t >= classes) throw ArgumentError("weighted_cross_entropy: target " + std::to_string(t) + " out of range");
  }
  ConstMapRow<Scalar> z(logits.values().data(), batch, classes);
  RowMatrix<double> probs(batch, classes);
  double weighted = 0.0, weight_total = 0.0;
  for (Index i = 0; i < batch; ++i) {
    const Eigen::RowVectorXd row = z.row(i).template cast<double>();
    const double m = row.maxCoeff();
    const Eigen::RowVectorXd e = (row.array() - m).exp();
    const double s = e.sum();
    probs.row(i) = e / s;
    const double nll = -(row[targets[i]] - m - std::log(s));
    const double w = class_weights[targets[i]];
    weighted += w * nll;
    weight_total += w;
  }
  const bool track = tape.tracks({&logits});
  Tensor<Scalar> out = Tensor<Scalar>::scalar(static_cast<Scalar>(weighted / weight_total), track);
  ensure_finite(out.values(), "weighted_cross_entropy");
  if (track) {
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<double> wts(class_weights.begin(), class_weights.end());
    tape.record(out, [logits, probs, tgt, wts, weight_total, batch, classes](const Array<Scalar>& grad) mutable {
      auto& gz = logits.grad_buffer();
      for (Index i = 0; i < batch; ++i) {
        const double coeff = grad[0] * wts[tgt[i]] / weight_total;
        for (Index k = 0; k < classes; ++k) {
          const double d = probs(i, k) - (k == tgt[i] ? 1.0 : 0.0);
          gz[i * classes + k] += static_cast<Scalar>(coeff * d);
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
RowMatrix<double> softmax_rows(const Tensor<Scalar>& logits) {
  require_rank(logits, 2, "softmax_rows", "logits");
  ConstMapRow<Scalar> z(logits.values().data(), logits.dim(0), logits.dim(1));
  RowMatrix<double> p = z.template cast<double>();
  for (Index i = 0; i < p.rows(); ++i) {
    p.row(i).array() -= p.row(i).maxCoeff();
    p.row(i) = p.row(i).array().exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>> params, AdamState<Scalar>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Array<Scalar>::Zero(p.size()));
      state.v.push_back(Array<Scalar>::Zero(p.size()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter list changed size");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Scalar>& p = params[i];
    if (state.m[i].size() != p.size()) throw ShapeError("adam_step: moment shape mismatch for parameter " + std::to_string(i));
    auto& m = state.m[i];
    auto& v = state.v[i];
    auto& values = p.values();
    const bool has = p.has_grad();
    for (Index j = 0; j < p.size(); ++j) {
      const double gj = has ? static_cast<double>(p.grad()[j]) : 0.0;
      const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      m[j] = static_cast<Scalar>(mj);
      v[j] = static_cast<Scalar>(vj);
      const double update = state.lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps);
      values[j] = static_cast<Scalar>(static_cast<double>(values[j]) - update);
    }
  }
}

template <typename Scalar>
GradCheckResult finite_diff_check(const std::function<Tensor<Scalar>(Tape<Scalar>&)>& f,
                                  std::span<Tensor<Scalar>> point, double epsilon) {
  for (auto& p : point) p.zero_grad();
  {
    Tape<Scalar> tape;
    const Tensor<Scalar> root = f(tape);
    tape.backward(root);
  }
  GradCheckResult result;
  const auto eval = [&]() {
    Tape<Scalar> tape(false);
    return static_cast<double>(f(tape).item());
  };
  for (std::size_t pi = 0; pi < point.size(); ++pi) {
    Tensor<Scalar>& p = point[pi];
    const Array<Scalar> analytic = p.has_grad() ? p.grad() : Array<Scalar>::Zero(p.size());
    for (Index i = 0; i < p.size(); ++i) {
      const Scalar saved = p.values()[i];
      p.values()[i] = static_cast<Scalar>(saved + epsilon);
      const double up = eval();
      p.values()[i] = static_cast<Scalar>(saved - epsilon);
      const double down = eval();
      p.values()[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = static_cast<double>(analytic[i]);
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++result.coordinates;
      if (err > result.max_relative_error || result.coordinates == 1) {
        result.max_relative_error = err;
        result.worst_param = pi;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

#define ICONNET_INSTANTIATE_GRAD(S)                                                                         \
  template class Tensor<S>;                                                                                 \
  template class Tape<S>;                                                                                   \
  template Tensor<S> conv1d<S>(Tape<S>&, const Tensor<S>&, const Tensor<S>&, Index, Padding, ConvAlgo);     \
  template Tensor<S> linear<S>(Tape<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);             \
  template Tensor<S> relu<S>(Tape<S>&, const Tensor<S>&);                                                   \
  template Tensor<S> abs<S>(Tape<S>&, const Tensor<S>&);                                                    \
  template Tensor<S> max_pool1d<S>(Tape<S>&, const Tensor<S>&, Index, Index);                               \
  template Tensor<S> global_max_pool1d<S>(Tape<S>&, const Tensor<S>&);                                      \
  template Tensor<S> channel_sum<S>(Tape<S>&, const Tensor<S>&);                                            \
  template Tensor<S> multiply<S>(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> add<S>(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> scale<S>(Tape<S>&, const Tensor<S>&, S);                                               \
  template Tensor<S> sum<S>(Tape<S>&, const Tensor<S>&);                                                    \
  template Tensor<S> reshape<S>(Tape<S>&, const Tensor<S>&, Shape);                                         \
  template Tensor<S> weighted_cross_entropy<S>(Tape<S>&, const Tensor<S>&, std::span<const int>,            \
                                               std::span<const double>);                                    \
  template RowMatrix<double> softmax_rows<S>(const Tensor<S>&);                                             \
  template void adam_step<S>(std::span<Tensor<S>>, AdamState<S>&);                                          \
  template GradCheckResult finite_diff_check<S>(const std::function<Tensor<S>(Tape<S>&)>&,                  \
                                                std::span<Tensor<S>>, double);

ICONNET_INSTANTIATE_GRAD(float)
ICONNET_INSTANTIATE_GRAD(double)

}  // namespace iconnet::grad
