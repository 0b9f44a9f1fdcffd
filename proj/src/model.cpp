#include "iconnet/model.hpp"

#include <cmath>

#include "iconnet/errors.hpp"
#include "iconnet/rng.hpp"

namespace iconnet::model {

namespace {

const char* window_name(dsp::WindowKind kind) {
  switch (kind) {
    case dsp::WindowKind::Hann:
      return "hann";
    case dsp::WindowKind::Hamming:
      return "hamming";
    case dsp::WindowKind::Blackman:
      return "blackman";
  }
  return "hann";
}

dsp::WindowKind parse_window(const std::string& name) {
  if (name == "hann") return dsp::WindowKind::Hann;
  if (name == "hamming") return dsp::WindowKind::Hamming;
  if (name == "blackman") return dsp::WindowKind::Blackman;
  throw ConfigError("unknown window kind '" + name + "'");
}

nlohmann::json block_json(const FirBlockConfig& b) {
  return {{"n_kernels", b.n_kernels}, {"kernel_len", b.kernel_len}, {"stride", b.stride}, {"pool", b.pool}};
}

FirBlockConfig block_from_json(const nlohmann::json& j) {
  return FirBlockConfig{j.at("n_kernels").get<int>(), j.at("kernel_len").get<int>(), j.at("stride").get<int>(),
                        j.at("pool").get<int>()};
}

void validate_block(const FirBlockConfig& b, const char* name) {
  if (b.n_kernels < 1 || b.kernel_len < 8 || b.stride < 1 || b.pool < 1) {
    throw ConfigError(std::string(name) + ": needs n_kernels >= 1, kernel_len >= 8, stride >= 1, pool >= 1");
  }
}

void validate_hidden(const std::vector<int>& hidden) {
  for (int h : hidden) {
    if (h < 1) throw ConfigError("FFN hidden sizes must be positive");
  }
}

}  // namespace

void IConNetConfig::validate() const {
  if (sample_rate_hz <= 0 || segment_samples < 1) throw ConfigError("IConNet: rate and segment length must be positive");
  validate_block(block1, "block1");
  validate_block(block2, "block2");
  validate_hidden(ffn_hidden);
  if (n_classes < 2) throw ConfigError("IConNet: need at least two classes");
  if (sample_rate_hz % (block1.stride * block1.pool) != 0) {
    throw ConfigError("IConNet: block-1 stride*pool must divide the sample rate");
  }
  const Index after1 = (segment_samples + block1.stride - 1) / block1.stride / block1.pool;
  const Index after2 = (after1 + block2.stride - 1) / block2.stride / block2.pool;
  if (after1 < block2.kernel_len / 2 || after2 < 1) {
    throw ConfigError("IConNet: segment too short for the configured blocks");
  }
}

IConNetConfig IConNetConfig::tiny() {
  IConNetConfig c;
  c.segment_samples = 2000;
  c.block1 = {8, 64, 1, 4};
  c.block2 = {4, 32, 1, 4};
  c.ffn_hidden = {16, 16};
  return c;
}

nlohmann::json to_json(const IConNetConfig& c) {
  return {{"sample_rate_hz", c.sample_rate_hz},
          {"segment_samples", c.segment_samples},
          {"block1", block_json(c.block1)},
          {"block2", block_json(c.block2)},
          {"nonlinearity", c.nonlinearity == Nonlinearity::Abs ? "abs" : "relu"},
          {"ffn_hidden", c.ffn_hidden},
          {"n_classes", c.n_classes},
          {"init_window", window_name(c.init_window)},
          {"spacing", c.spacing == BandSpacing::Mel ? "mel" : "linear"},
          {"f_min_hz", c.f_min_hz},
          {"seed", c.seed}};
}

IConNetConfig iconnet_config_from_json(const nlohmann::json& j) {
  IConNetConfig c;
  c.sample_rate_hz = j.at("sample_rate_hz").get<int>();
  c.segment_samples = j.at("segment_samples").get<int>();
  c.block1 = block_from_json(j.at("block1"));
  c.block2 = block_from_json(j.at("block2"));
  const auto nl = j.at("nonlinearity").get<std::string>();
  if (nl != "abs" && nl != "relu") throw ConfigError("unknown nonlinearity '" + nl + "'");
  c.nonlinearity = nl == "abs" ? Nonlinearity::Abs : Nonlinearity::Relu;
  c.ffn_hidden = j.at("ffn_hidden").get<std::vector<int>>();
  c.n_classes = j.at("n_classes").get<int>();
  c.init_window = parse_window(j.at("init_window").get<std::string>());
  const auto sp = j.at("spacing").get<std::string>();
  if (sp != "mel" && sp != "linear") throw ConfigError("unknown band spacing '" + sp + "'");
  c.spacing = sp == "mel" ? BandSpacing::Mel : BandSpacing::Linear;
  c.f_min_hz = j.at("f_min_hz").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

void MfccFfnConfig::validate() const {
  mfcc.validate();
  validate_hidden(ffn_hidden);
  if (n_classes < 2 || segment_samples < 1) throw ConfigError("MFCC baseline: bad class count or segment length");
}

nlohmann::json to_json(const MfccFfnConfig& c) {
  const auto& m = c.mfcc;
  return {{"mfcc",
           {{"frame_len_samples", m.frame_len_samples},
            {"hop_samples", m.hop_samples},
            {"n_fft", m.n_fft},
            {"n_mel_bands", m.n_mel_bands},
            {"n_coefficients", m.n_coefficients},
            {"sample_rate_hz", m.sample_rate_hz},
            {"f_min_hz", m.f_min_hz},
            {"f_max_hz", m.f_max_hz},
            {"pre_emphasis", m.pre_emphasis},
            {"floor_db", m.floor_db}}},
          {"ffn_hidden", c.ffn_hidden},
          {"n_classes", c.n_classes},
          {"segment_samples", c.segment_samples},
          {"seed", c.seed}};
}

MfccFfnConfig mfcc_ffn_config_from_json(const nlohmann::json& j) {
  MfccFfnConfig c;
  const auto& m = j.at("mfcc");
  c.mfcc.frame_len_samples = m.at("frame_len_samples").get<Index>();
  c.mfcc.hop_samples = m.at("hop_samples").get<Index>();
  c.mfcc.n_fft = m.at("n_fft").get<Index>();
  c.mfcc.n_mel_bands = m.at("n_mel_bands").get<int>();
  c.mfcc.n_coefficients = m.at("n_coefficients").get<int>();
  c.mfcc.sample_rate_hz = m.at("sample_rate_hz").get<int>();
  c.mfcc.f_min_hz = m.at("f_min_hz").get<double>();
  c.mfcc.f_max_hz = m.at("f_max_hz").get<double>();
  c.mfcc.pre_emphasis = m.at("pre_emphasis").get<double>();
  c.mfcc.floor_db = m.at("floor_db").get<double>();
  c.ffn_hidden = j.at("ffn_hidden").get<std::vector<int>>();
  c.n_classes = j.at("n_classes").get<int>();
  c.segment_samples = j.at("segment_samples").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

std::vector<std::pair<double, double>> tile_bands(int n_kernels, double f_min_hz, double f_max_hz,
                                                  BandSpacing spacing) {
  if (n_kernels < 1) throw ConfigError("need at least one kernel to tile");
  if (!(f_min_hz >= 0.0 && f_min_hz < f_max_hz)) throw ConfigError("band tiling needs 0 <= f_min < f_max");
  const bool mel = spacing == BandSpacing::Mel;
  const double lo = mel ? dsp::hz_to_mel(f_min_hz) : f_min_hz;
  const double hi = mel ? dsp::hz_to_mel(f_max_hz) : f_max_hz;
  std::vector<double> edges(static_cast<std::size_t>(n_kernels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const double v = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_kernels + 1);
    edges[i] = mel ? dsp::mel_to_hz(v) : v;
  }
  edges.front() = f_min_hz;
  edges.back() = f_max_hz;
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (edges[i] - edges[i - 1] < 1.0) {
      throw ConfigError(std::to_string(n_kernels) + " kernels cannot tile [" + std::to_string(f_min_hz) + ", " +
                        std::to_string(f_max_hz) + "] Hz with distinct bands");
    }
  }
  std::vector<std::pair<double, double>> bands;
  for (int k = 0; k < n_kernels; ++k) bands.emplace_back(edges[k], edges[k + 2]);
  return bands;
}

template <typename Scalar>
FirConvLayer<Scalar>::FirConvLayer(grad::Tensor<Scalar> windows, Eigen::MatrixXd carrier,
                                   std::vector<std::pair<double, double>> cutoffs_hz, int sample_rate_hz,
                                   int stride, int pool)
    : windows_(std::move(windows)),
      carrier_(std::move(carrier)),
      cutoffs_hz_(std::move(cutoffs_hz)),
      sample_rate_hz_(sample_rate_hz),
      stride_(stride),
      pool_(pool) {
  if (windows_.shape() != grad::Shape{carrier_.rows(), carrier_.cols()}) {
    throw ShapeError("FIRConv windows " + grad::shape_string(windows_.shape()) + " do not match carrier");
  }
  const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows =
      carrier_.cast<Scalar>();
  grad::Array<Scalar> flat = Eigen::Map<const grad::Array<Scalar>>(rows.data(), rows.size());
  carrier_tensor_ = grad::Tensor<Scalar>({carrier_.rows(), carrier_.cols()}, std::move(flat), false);
}

template <typename Scalar>
FirConvLayer<Scalar>::FirConvLayer(const FirConvLayer& other)
    : windows_(other.windows_.defined() ? other.windows_.clone() : grad::Tensor<Scalar>()),
      carrier_(other.carrier_),
      carrier_tensor_(other.carrier_tensor_),
      cutoffs_hz_(other.cutoffs_hz_),
      sample_rate_hz_(other.sample_rate_hz_),
      stride_(other.stride_),
      pool_(other.pool_) {}

template <typename Scalar>
FirConvLayer<Scalar>& FirConvLayer<Scalar>::operator=(const FirConvLayer& other) {
  if (this != &other) *this = FirConvLayer(other);
  return *this;
}

template <typename Scalar>
Eigen::MatrixXd FirConvLayer<Scalar>::effective_kernels() const {
  const Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w(
      windows_.values().data(), carrier_.rows(), carrier_.cols());
  return w.template cast<double>().cwiseProduct(carrier_);
}

template <typename Scalar>
grad::Tensor<Scalar> FirConvLayer<Scalar>::kernels(grad::Tape<Scalar>& tape) const {
  const auto product = grad::multiply(tape, windows_, carrier_tensor_);
  return grad::reshape(tape, product, {carrier_.rows(), 1, carrier_.cols()});
}

template <typename Scalar>
FirConvLayer<Scalar> init_firconv(int n_kernels, int kernel_len, int sample_rate_hz, dsp::WindowKind window,
                                  BandSpacing spacing, double f_min_hz, int stride, int pool) {
  if (kernel_len < 8) throw ConfigError("FIRConv kernel length must be at least 8");
  const double nyquist = 0.5 * sample_rate_hz;
  auto bands = tile_bands(n_kernels, f_min_hz, nyquist, spacing);
  Eigen::MatrixXd carrier(n_kernels, kernel_len);
  for (int k = 0; k < n_kernels; ++k) {
    carrier.row(k) = dsp::sinc_bandpass(bands[k].first, bands[k].second, kernel_len, sample_rate_hz).transpose();
  }
  const Eigen::VectorXd w = dsp::cosine_window(window, kernel_len);
  grad::Array<Scalar> values(static_cast<Index>(n_kernels) * kernel_len);
  for (int k = 0; k < n_kernels; ++k) {
    for (int l = 0; l < kernel_len; ++l) values[k * kernel_len + l] = static_cast<Scalar>(w[l]);
  }
  grad::Tensor<Scalar> windows({n_kernels, kernel_len}, std::move(values), true);
  return FirConvLayer<Scalar>(std::move(windows), std::move(carrier), std::move(bands), sample_rate_hz, stride,
                              pool);
}

template <typename Scalar>
Ffn<Scalar>::Ffn(int in_dim, const std::vector<int>& hidden, int out_dim, std::uint64_t seed) {
  std::vector<int> dims{in_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out_dim);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const Index fan_in = dims[i], fan_out = dims[i + 1];
    Rng rng(derive_seed(seed, i));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    grad::Array<Scalar> w(fan_in * fan_out);
    for (Index j = 0; j < w.size(); ++j) w[j] = static_cast<Scalar>(rng.uniform(-limit, limit));
    layers_.push_back(Dense{grad::Tensor<Scalar>({fan_in, fan_out}, std::move(w), true),
                            grad::Tensor<Scalar>::zeros({fan_out}, true)});
  }
}

template <typename Scalar>
Ffn<Scalar>::Ffn(const Ffn& other) {
  for (const auto& d : other.layers_) layers_.push_back(Dense{d.weight.clone(), d.bias.clone()});
}

template <typename Scalar>
Ffn<Scalar>& Ffn<Scalar>::operator=(const Ffn& other) {
  if (this != &other) *this = Ffn(other);
  return *this;
}

template <typename Scalar>
grad::Tensor<Scalar> Ffn<Scalar>::forward(grad::Tape<Scalar>& tape, const grad::Tensor<Scalar>& x) const {
  grad::Tensor<Scalar> h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = grad::linear(tape, h, layers_[i].weight, layers_[i].bias);
    if (i + 1 < layers_.size()) h = grad::relu(tape, h);
  }
  return h;
}

template <typename Scalar>
void Ffn<Scalar>::append_parameters(const std::string& prefix, std::vector<NamedTensor<Scalar>>& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    out.push_back({prefix + std::to_string(i + 1) + ".weight", layers_[i].weight});
    out.push_back({prefix + std::to_string(i + 1) + ".bias", layers_[i].bias});
  }
}

template <typename Scalar>
Index Ffn<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& d : layers_) n += d.weight.size() + d.bias.size();
  return n;
}

template <typename Scalar>
int Ffn<Scalar>::in_dim() const {
  return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.dim(0));
}

template <typename Scalar>
IConNet<Scalar>::IConNet(const IConNetConfig& config) : config_(config) {
  config_.validate();
  block1_ = init_firconv<Scalar>(config_.block1.n_kernels, config_.block1.kernel_len, config_.sample_rate_hz,
                                 config_.init_window, config_.spacing, config_.f_min_hz, config_.block1.stride,
                                 config_.block1.pool);
  block2_ = init_firconv<Scalar>(config_.block2.n_kernels, config_.block2.kernel_len, config_.block2_rate_hz(),
                                 config_.init_window, config_.spacing, config_.f_min_hz, config_.block2.stride,
                                 config_.block2.pool);
  ffn_ = Ffn<Scalar>(config_.block2.n_kernels, config_.ffn_hidden, config_.n_classes, config_.seed);
}

template <typename Scalar>
grad::Tensor<Scalar> IConNet<Scalar>::block(grad::Tape<Scalar>& tape, const FirConvLayer<Scalar>& layer,
                                            const grad::Tensor<Scalar>& x) const {
  auto y = grad::conv1d(tape, x, layer.kernels(tape), layer.stride(), grad::Padding::Same);
  y = config_.nonlinearity == Nonlinearity::Abs ? grad::abs(tape, y) : grad::relu(tape, y);
  return grad::max_pool1d(tape, y, layer.pool(), layer.pool());
}

template <typename Scalar>
grad::Tensor<Scalar> IConNet<Scalar>::features(grad::Tape<Scalar>& tape, const grad::Tensor<Scalar>& segment) const {
  if (segment.rank() != 3 || segment.dim(1) != 1 || segment.dim(2) != config_.segment_samples) {
    throw ShapeError("IConNet expects [B x 1 x " + std::to_string(config_.segment_samples) + "] input, got " +
                     grad::shape_string(segment.shape()));
  }
  const auto h1 = block(tape, block1_, segment);
  // Every block-2 kernel filters each block-1 channel and the results are
  // summed; by linearity that equals filtering the channel sum once.
  const auto mixed = grad::channel_sum(tape, h1);
  const auto h2 = block(tape, block2_, mixed);
  return grad::global_max_pool1d(tape, h2);
}

template <typename Scalar>
grad::Tensor<Scalar> IConNet<Scalar>::forward(grad::Tape<Scalar>& tape, const grad::Tensor<Scalar>& segment) const {
  return ffn_.forward(tape, features(tape, segment));
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> IConNet<Scalar>::parameters() const {
  std::vector<NamedTensor<Scalar>> out{{"block1.windows", block1_.windows()}, {"block2.windows", block2_.windows()}};
  ffn_.append_parameters("fc", out);
  return out;
}

template <typename Scalar>
ParamCount IConNet<Scalar>::count_params() const {
  ParamCount c;
  c.front_end = block1_.trainable_count() + block2_.trainable_count();
  c.classifier = ffn_.parameter_count();
  c.total = c.front_end + c.classifier;
  return c;
}

template <typename Scalar>
MfccFfn<Scalar>::MfccFfn(const MfccFfnConfig& config)
    : config_(config),
      ffn_(config.feature_dim(), config.ffn_hidden, config.n_classes, config.seed),
      mean_(Eigen::VectorXd::Zero(config.feature_dim())),
      std_(Eigen::VectorXd::Ones(config.feature_dim())) {
  config_.validate();
}

template <typename Scalar>
Eigen::VectorXd MfccFfn<Scalar>::raw_features(std::span<const double> segment) const {
  return dsp::summarize_mfcc(dsp::mfcc(segment, config_.mfcc.sample_rate_hz, config_.mfcc));
}

template <typename Scalar>
void MfccFfn<Scalar>::fit_standardizer(const std::vector<Eigen::VectorXd>& raw) {
  if (raw.empty()) throw ArgumentError("cannot fit feature statistics on an empty set");
  const Index d = config_.feature_dim();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const auto& f : raw) mean += f;
  mean /= static_cast<double>(raw.size());
  Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
  for (const auto& f : raw) var.array() += (f - mean).array().square();
  var /= static_cast<double>(raw.size());
  // Constant dimensions (e.g. floored high bands) keep unit scale.
  Eigen::VectorXd sd = var.array().sqrt();
  for (Index i = 0; i < d; ++i) {
    if (!(sd[i] > 1e-9)) sd[i] = 1.0;
  }
  set_standardizer(std::move(mean), std::move(sd));
}

template <typename Scalar>
void MfccFfn<Scalar>::set_standardizer(Eigen::VectorXd mean, Eigen::VectorXd std) {
  if (mean.size() != config_.feature_dim() || std.size() != config_.feature_dim()) {
    throw ShapeError("feature statistics have the wrong dimension");
  }
  mean_ = std::move(mean);
  std_ = std::move(std);
}

template <typename Scalar>
Eigen::VectorXd MfccFfn<Scalar>::standardize(const Eigen::VectorXd& raw) const {
  return (raw - mean_).cwiseQuotient(std_);
}

template <typename Scalar>
grad::Tensor<Scalar> MfccFfn<Scalar>::forward(grad::Tape<Scalar>& tape, const grad::Tensor<Scalar>& features) const {
  if (features.rank() != 2 || features.dim(1) != config_.feature_dim()) {
    throw ShapeError("MFCC baseline expects [B x " + std::to_string(config_.feature_dim()) + "] features, got " +
                     grad::shape_string(features.shape()));
  }
  return ffn_.forward(tape, features);
}

template <typename Scalar>
std::vector<NamedTensor<Scalar>> MfccFfn<Scalar>::parameters() const {
  std::vector<NamedTensor<Scalar>> out;
  ffn_.append_parameters("fc", out);
  return out;
}

template <typename Scalar>
ParamCount MfccFfn<Scalar>::count_params() const {
  ParamCount c;
  c.classifier = ffn_.parameter_count();
  c.total = c.classifier;
  return c;
}

template class FirConvLayer<float>;
template class FirConvLayer<double>;
template class Ffn<float>;
template class Ffn<double>;
template class IConNet<float>;
template class IConNet<double>;
template class MfccFfn<float>;
template class MfccFfn<double>;
template FirConvLayer<float> init_firconv<float>(int, int, int, dsp::WindowKind, BandSpacing, double, int, int);
template FirConvLayer<double> init_firconv<double>(int, int, int, dsp::WindowKind, BandSpacing, double, int, int);

}  // namespace iconnet::model
