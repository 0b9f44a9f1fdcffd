#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iconnet/dsp.hpp"
#include "iconnet/grad.hpp"
#include "json.hpp"

namespace iconnet::model {

using grad::Index;

enum class Nonlinearity { Abs, Relu };
enum class BandSpacing { Mel, Linear };

struct FirBlockConfig {
  int n_kernels = 0;
  int kernel_len = 0;
  int stride = 1;
  int pool = 4;
};

struct IConNetConfig {
  int sample_rate_hz = 16000;
  int segment_samples = 80000;
  FirBlockConfig block1{128, 256, 1, 4};
  FirBlockConfig block2{32, 400, 1, 4};
  Nonlinearity nonlinearity = Nonlinearity::Abs;
  std::vector<int> ffn_hidden{256, 256};
  int n_classes = 2;
  dsp::WindowKind init_window = dsp::WindowKind::Hann;
  BandSpacing spacing = BandSpacing::Mel;
  double f_min_hz = 30.0;
  std::uint64_t seed = 0;

  /// Rate seen by block 2 after block 1's stride and pooling.
  int block2_rate_hz() const { return sample_rate_hz / (block1.stride * block1.pool); }
  void validate() const;

  /// 8 + 4 kernels over 2000-sample segments; used for gradient checks and fast tests.
  static IConNetConfig tiny();
};

nlohmann::json to_json(const IConNetConfig& config);
IConNetConfig iconnet_config_from_json(const nlohmann::json& j);

struct MfccFfnConfig {
  dsp::MfccConfig mfcc;
  std::vector<int> ffn_hidden{256, 256};
  int n_classes = 2;
  int segment_samples = 80000;
  std::uint64_t seed = 0;

  int feature_dim() const { return 2 * mfcc.n_coefficients; }
  void validate() const;
};

nlohmann::json to_json(const MfccFfnConfig& config);
MfccFfnConfig mfcc_ffn_config_from_json(const nlohmann::json& j);

/// Band edges for n kernels: centres uniform on the chosen scale over
/// [f_min, f_max], each band spanning its two neighbouring centres (50% overlap).
std::vector<std::pair<double, double>> tile_bands(int n_kernels, double f_min_hz, double f_max_hz,
                                                  BandSpacing spacing);

template <typename Scalar>
struct NamedTensor {
  std::string name;
  grad::Tensor<Scalar> tensor;
};

/// Learnable window times fixed sinc band-pass carrier. Only the windows train.
template <typename Scalar>
class FirConvLayer {
 public:
  FirConvLayer() = default;
  FirConvLayer(grad::Tensor<Scalar> windows, Eigen::MatrixXd carrier,
               std::vector<std::pair<double, double>> cutoffs_hz, int sample_rate_hz, int stride, int pool);

  FirConvLayer(const FirConvLayer& other);
  FirConvLayer& operator=(const FirConvLayer& other);
  FirConvLayer(FirConvLayer&&) noexcept = default;
  FirConvLayer& operator=(FirConvLayer&&) noexcept = default;

  int n_kernels() const { return static_cast<int>(carrier_.rows()); }
  int kernel_len() const { return static_cast<int>(carrier_.cols()); }
  int sample_rate_hz() const { return sample_rate_hz_; }
  int stride() const { return stride_; }
  int pool() const { return pool_; }
  const std::vector<std::pair<double, double>>& cutoffs_hz() const { return cutoffs_hz_; }
  const Eigen::MatrixXd& carrier() const { return carrier_; }

  grad::Tensor<Scalar>& windows() { return windows_; }
  const grad::Tensor<Scalar>& windows() const { return windows_; }

  /// Row k = windows[k] .* carrier[k].
  Eigen::MatrixXd effective_kernels() const;
  /// Same, as a differentiable [n x 1 x L] tensor.
  grad::Tensor<Scalar> kernels(grad::Tape<Scalar>& tape) const;

  Index trainable_count() const { return windows_.size(); }

 private:
  grad::Tensor<Scalar> windows_;
  Eigen::MatrixXd carrier_;
  grad::Tensor<Scalar> carrier_tensor_;
  std::vector<std::pair<double, double>> cutoffs_hz_;
  int sample_rate_hz_ = 0;
  int stride_ = 1;
  int pool_ = 1;
};

/// Deterministic: windows start as the given cosine window, never random.
template <typename Scalar>
FirConvLayer<Scalar> init_firconv(int n_kernels, int kernel_len, int sample_rate_hz, dsp::WindowKind window,
                                  BandSpacing spacing, double f_min_hz = 30.0, int stride = 1, int pool = 1);

/// Fully connected stack with relu between layers and none after the last.
template <typename Scalar>
class Ffn {
 public:
  Ffn() = default;
  Ffn(int in_dim, const std::vector<int>& hidden, int out_dim, std::uint64_t seed);
  Ffn(const Ffn& other);
  Ffn& operator=(const Ffn& other);
  Ffn(Ffn&&) noexcept = default;
  Ffn& operator=(Ffn&&) noexcept = default;

  grad::Tensor<Scalar> forward(grad::Tape<Scalar>& tape, const grad::Tensor<Scalar>& x) const;
  void append_parameters(const std::string& prefix, std::vector<NamedTensor<Scalar>>& out) const;
  Index parameter_count() const;
  int in_dim() const;

 private:
  struct Dense {
    grad::Tensor<Scalar> weight;  // [in x out]
    grad::Tensor<Scalar> bias;    // [out]
  };
  std::vector<Dense> layers_;
};

struct ParamCount {
  Index front_end = 0;
  Index classifier = 0;
  Index total = 0;
};

/// Two FIRConv blocks -> global max pool -> FFN classifier.
template <typename Scalar>
class IConNet {
 public:
  explicit IConNet(const IConNetConfig& config);

  const IConNetConfig& config() const { return config_; }
  FirConvLayer<Scalar>& block1() { return block1_; }
  const FirConvLayer<Scalar>& block1() const { return block1_; }
  FirConvLayer<Scalar>& block2() { return block2_; }
  const FirConvLayer<Scalar>& block2() const { return block2_; }
  Ffn<Scalar>& classifier() { return ffn_; }

  /// segment [B x 1 x segment_samples] -> logits [B x n_classes].
  grad::Tensor<Scalar> forward(grad::Tape<Scalar>& tape, const grad::Tensor<Scalar>& segment) const;
  /// Pooled block-2 features [B x block2.n_kernels] fed to the classifier.
  grad::Tensor<Scalar> features(grad::Tape<Scalar>& tape, const grad::Tensor<Scalar>& segment) const;

  /// Trainable tensors in serialization order. The handles alias the model.
  std::vector<NamedTensor<Scalar>> parameters() const;
  ParamCount count_params() const;

 private:
  grad::Tensor<Scalar> block(grad::Tape<Scalar>& tape, const FirConvLayer<Scalar>& layer,
                             const grad::Tensor<Scalar>& x) const;

  IConNetConfig config_;
  FirConvLayer<Scalar> block1_;
  FirConvLayer<Scalar> block2_;
  Ffn<Scalar> ffn_;
};

/// MFCC summary features (standardised with training statistics) -> FFN.
template <typename Scalar>
class MfccFfn {
 public:
  explicit MfccFfn(const MfccFfnConfig& config);

  const MfccFfnConfig& config() const { return config_; }
  Ffn<Scalar>& classifier() { return ffn_; }

  /// Raw 2*n_coefficients summary of one segment, before standardisation.
  Eigen::VectorXd raw_features(std::span<const double> segment) const;
  /// Fits per-dimension mean and standard deviation.
  void fit_standardizer(const std::vector<Eigen::VectorXd>& raw);
  Eigen::VectorXd standardize(const Eigen::VectorXd& raw) const;
  const Eigen::VectorXd& feature_mean() const { return mean_; }
  const Eigen::VectorXd& feature_std() const { return std_; }
  void set_standardizer(Eigen::VectorXd mean, Eigen::VectorXd std);

  /// features [B x feature_dim] -> logits [B x n_classes].
  grad::Tensor<Scalar> forward(grad::Tape<Scalar>& tape, const grad::Tensor<Scalar>& features) const;

  std::vector<NamedTensor<Scalar>> parameters() const;
  ParamCount count_params() const;

 private:
  MfccFfnConfig config_;
  Ffn<Scalar> ffn_;
  Eigen::VectorXd mean_;
  Eigen::VectorXd std_;
};

}  // namespace iconnet::model
