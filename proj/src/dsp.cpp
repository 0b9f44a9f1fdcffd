#include "iconnet/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "iconnet/errors.hpp"

namespace iconnet::dsp {

namespace {

constexpr double kPi = std::numbers::pi;

double sinc(double x) {
  if (x == 0.0) return 1.0;
  return std::sin(kPi * x) / (kPi * x);
}

}  // namespace

bool is_power_of_two(Eigen::Index n) { return n >= 1 && (n & (n - 1)) == 0; }

Eigen::Index next_power_of_two(Eigen::Index n) {
  Eigen::Index p = 1;
  while (p < n) p <<= 1;
  return p;
}

FftPlan::FftPlan(Eigen::Index n) : n_(n) {
  if (!is_power_of_two(n)) {
    throw ArgumentError("FFT size must be a power of two, got " + std::to_string(n));
  }
  twiddles_.resize(static_cast<std::size_t>(n / 2));
  for (Eigen::Index k = 0; k < n / 2; ++k) {
    const double angle = -2.0 * kPi * static_cast<double>(k) / static_cast<double>(n);
    twiddles_[k] = Complex(std::cos(angle), std::sin(angle));
  }
  bitrev_.resize(static_cast<std::size_t>(n));
  int bits = 0;
  while ((Eigen::Index(1) << bits) < n) ++bits;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index r = 0;
    for (int b = 0; b < bits; ++b) {
      if (i & (Eigen::Index(1) << b)) r |= Eigen::Index(1) << (bits - 1 - b);
    }
    bitrev_[i] = r;
  }
}

void FftPlan::forward(std::span<Complex> data) const { transform(data, false); }

void FftPlan::inverse(std::span<Complex> data) const {
  transform(data, true);
  const double scale = 1.0 / static_cast<double>(n_);
  for (auto& v : data) v *= scale;
}

void FftPlan::transform(std::span<Complex> data, bool inverse) const {
  if (static_cast<Eigen::Index>(data.size()) != n_) {
    throw ArgumentError("FFT buffer length does not match plan size");
  }
  for (Eigen::Index i = 0; i < n_; ++i) {
    if (i < bitrev_[i]) std::swap(data[i], data[bitrev_[i]]);
  }
  for (Eigen::Index len = 2; len <= n_; len <<= 1) {
    const Eigen::Index half = len / 2;
    const Eigen::Index step = n_ / len;
    for (Eigen::Index start = 0; start < n_; start += len) {
      for (Eigen::Index j = 0; j < half; ++j) {
        Complex w = twiddles_[j * step];
        if (inverse) w = std::conj(w);
        const Complex a = data[start + j];
        const Complex b = data[start + j + half] * w;
        data[start + j] = a + b;
        data[start + j + half] = a - b;
      }
    }
  }
}

Eigen::VectorXcd fft_forward(const Eigen::Ref<const Eigen::VectorXcd>& x, Eigen::Index n) {
  FftPlan plan(n);
  Eigen::VectorXcd out = Eigen::VectorXcd::Zero(n);
  const Eigen::Index m = std::min(n, x.size());
  out.head(m) = x.head(m);
  plan.forward(std::span<Complex>(out.data(), static_cast<std::size_t>(n)));
  return out;
}

Eigen::VectorXcd fft_inverse(const Eigen::Ref<const Eigen::VectorXcd>& spectrum) {
  FftPlan plan(spectrum.size());
  Eigen::VectorXcd out = spectrum;
  plan.inverse(std::span<Complex>(out.data(), static_cast<std::size_t>(out.size())));
  return out;
}

Eigen::VectorXcd fft_real(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Index n) {
  Eigen::VectorXcd c = x.cast<Complex>();
  return fft_forward(c, n);
}

Eigen::VectorXd generalized_cosine_window(std::span<const double> coeffs, Eigen::Index length) {
  if (coeffs.empty()) throw ArgumentError("generalized cosine window needs at least one coefficient");
  if (length < 1) throw ArgumentError("window length must be positive");
  if (length == 1) return Eigen::VectorXd::Ones(1);
  Eigen::VectorXd w(length);
  const double denom = static_cast<double>(length - 1);
  for (Eigen::Index n = 0; n < length; ++n) {
    double acc = 0.0;
    double sign = 1.0;
    for (std::size_t j = 0; j < coeffs.size(); ++j) {
      acc += sign * coeffs[j] * std::cos(2.0 * kPi * static_cast<double>(j) * n / denom);
      sign = -sign;
    }
    w[n] = acc;
  }
  return w;
}

Eigen::VectorXd cosine_window(WindowKind kind, Eigen::Index length) {
  static constexpr double hann[] = {0.5, 0.5};
  static constexpr double hamming[] = {0.54, 0.46};
  static constexpr double blackman[] = {0.42, 0.5, 0.08};
  switch (kind) {
    case WindowKind::Hann:
      return generalized_cosine_window(hann, length);
    case WindowKind::Hamming:
      return generalized_cosine_window(hamming, length);
    case WindowKind::Blackman:
      return generalized_cosine_window(blackman, length);
  }
  throw ArgumentError("unknown window kind");
}

Eigen::VectorXd sinc_bandpass(double f_low_hz, double f_high_hz, Eigen::Index length,
                              int sample_rate_hz) {
  if (length < 1) throw ArgumentError("filter length must be positive");
  if (sample_rate_hz <= 0) throw ArgumentError("sample rate must be positive");
  const double nyquist = 0.5 * sample_rate_hz;
  if (!(f_low_hz >= 0.0 && f_low_hz < f_high_hz && f_high_hz <= nyquist)) {
    std::ostringstream msg;
    msg << "band-pass needs 0 <= f_low < f_high <= " << nyquist << " Hz, got (" << f_low_hz
        << ", " << f_high_hz << ")";
    throw ArgumentError(msg.str());
  }
  const double lo = f_low_hz / sample_rate_hz;
  const double hi = f_high_hz / sample_rate_hz;
  const double centre = 0.5 * static_cast<double>(length - 1);
  Eigen::VectorXd h(length);
  for (Eigen::Index n = 0; n <= (length - 1) / 2; ++n) {
    const double t = static_cast<double>(n) - centre;
    const double v = 2.0 * hi * sinc(2.0 * hi * t) - 2.0 * lo * sinc(2.0 * lo * t);
    h[n] = v;
    h[length - 1 - n] = v;
  }
  return h;
}

FrequencyResponseCurve frequency_response_db(const Eigen::Ref<const Eigen::VectorXd>& coeffs,
                                             Eigen::Index n_fft, int sample_rate_hz,
                                             bool normalize_peak) {
  if (!is_power_of_two(n_fft)) throw ArgumentError("n_fft must be a power of two");
  if (n_fft < coeffs.size()) throw ArgumentError("n_fft shorter than the filter");
  const Eigen::VectorXcd spectrum = fft_real(coeffs, n_fft);
  const Eigen::Index n_bins = n_fft / 2 + 1;
  FrequencyResponseCurve curve;
  curve.freqs_hz.resize(n_bins);
  curve.magnitude_db.resize(n_bins);
  for (Eigen::Index k = 0; k < n_bins; ++k) {
    curve.freqs_hz[k] = static_cast<double>(k) * sample_rate_hz / static_cast<double>(n_fft);
    const double mag = std::abs(spectrum[k]);
    curve.magnitude_db[k] = mag > 0.0 ? std::max(kDbFloor, 20.0 * std::log10(mag)) : kDbFloor;
  }
  if (normalize_peak) {
    const double peak = curve.magnitude_db.maxCoeff();
    if (peak > kDbFloor) {
      curve.magnitude_db.array() -= peak;
      curve.magnitude_db = curve.magnitude_db.cwiseMax(kDbFloor);
    }
  }
  return curve;
}

void write_response_csv(const FrequencyResponseCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "freq_hz,magnitude_db\n";
  out.precision(10);
  for (Eigen::Index k = 0; k < curve.freqs_hz.size(); ++k) {
    out << curve.freqs_hz[k] << ',' << curve.magnitude_db[k] << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank mel_filterbank(int n_bands, Eigen::Index n_fft, int sample_rate_hz, double f_min_hz,
                             double f_max_hz) {
  if (n_bands < 1) throw ArgumentError("n_bands must be positive");
  if (!is_power_of_two(n_fft)) throw ArgumentError("n_fft must be a power of two");
  if (!(f_min_hz >= 0.0 && f_min_hz < f_max_hz && f_max_hz <= 0.5 * sample_rate_hz)) {
    throw ArgumentError("mel filterbank needs 0 <= f_min < f_max <= Nyquist");
  }
  const Eigen::Index n_bins = n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(f_min_hz);
  const double mel_hi = hz_to_mel(f_max_hz);
  std::vector<double> edges(static_cast<std::size_t>(n_bands) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                      static_cast<double>(n_bands + 1));
  }
  MelFilterbank bank;
  bank.weights = Eigen::MatrixXd::Zero(n_bands, n_bins);
  bank.centers_hz.resize(n_bands);
  std::vector<int> collapsed;
  const double bin_hz = static_cast<double>(sample_rate_hz) / static_cast<double>(n_fft);
  for (int b = 0; b < n_bands; ++b) {
    const double left = edges[b];
    const double centre = edges[b + 1];
    const double right = edges[b + 2];
    bank.centers_hz[b] = centre;
    for (Eigen::Index k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double w = 0.0;
      if (f > left && f <= centre) {
        w = (f - left) / (centre - left);
      } else if (f > centre && f < right) {
        w = (right - f) / (right - centre);
      }
      bank.weights(b, k) = w;
    }
    if (bank.weights.row(b).sum() <= 0.0) collapsed.push_back(b);
  }
  if (!collapsed.empty()) {
    std::ostringstream msg;
    msg << "mel filterbank too fine for n_fft=" << n_fft << "; collapsed bands:";
    for (int b : collapsed) msg << ' ' << b;
    throw ConfigError(msg.str());
  }
  return bank;
}

Eigen::MatrixXd dct2_matrix(Eigen::Index n_out, Eigen::Index n_in) {
  Eigen::MatrixXd g(n_out, n_in);
  const double n = static_cast<double>(n_in);
  for (Eigen::Index i = 0; i < n_out; ++i) {
    const double scale = i == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (Eigen::Index j = 0; j < n_in; ++j) {
      g(i, j) = scale * std::cos(kPi * static_cast<double>(i) * (static_cast<double>(j) + 0.5) / n);
    }
  }
  return g;
}

void MfccConfig::validate() const {
  if (frame_len_samples < 1 || hop_samples < 1) throw ConfigError("MFCC frame and hop must be positive");
  if (n_fft < frame_len_samples) throw ConfigError("MFCC n_fft must be >= frame length");
  if (n_coefficients > n_mel_bands || n_coefficients < 1) {
    throw ConfigError("MFCC needs 1 <= n_coefficients <= n_mel_bands");
  }
  if (!(pre_emphasis >= 0.0 && pre_emphasis < 1.0)) throw ConfigError("pre-emphasis must be in [0,1)");
}

Eigen::MatrixXd log_mel_spectrogram(std::span<const double> samples, int sample_rate_hz,
                                    const MfccConfig& config) {
  config.validate();
  if (sample_rate_hz != config.sample_rate_hz) {
    throw ArgumentError("MFCC configured for " + std::to_string(config.sample_rate_hz) +
                        " Hz but waveform is " + std::to_string(sample_rate_hz) + " Hz");
  }
  const auto n = static_cast<Eigen::Index>(samples.size());
  Eigen::VectorXd emphasized(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    emphasized[t] = samples[t] - (t > 0 ? config.pre_emphasis * samples[t - 1] : 0.0);
  }
  const Eigen::Index frame = config.frame_len_samples;
  const Eigen::Index n_frames = n <= frame ? 1 : 1 + (n - frame) / config.hop_samples;

  const MelFilterbank bank = mel_filterbank(config.n_mel_bands, config.n_fft, config.sample_rate_hz,
                                            config.f_min_hz, config.f_max_hz);
  const Eigen::VectorXd window = cosine_window(WindowKind::Hann, frame);
  const FftPlan plan(config.n_fft);
  const Eigen::Index n_bins = config.n_fft / 2 + 1;
  const double floor_power = std::pow(10.0, config.floor_db / 10.0);

  Eigen::MatrixXd out(n_frames, config.n_mel_bands);
  std::vector<Complex> buffer(static_cast<std::size_t>(config.n_fft));
  Eigen::VectorXd power(n_bins);
  for (Eigen::Index f = 0; f < n_frames; ++f) {
    std::fill(buffer.begin(), buffer.end(), Complex{});
    const Eigen::Index start = f * config.hop_samples;
    for (Eigen::Index i = 0; i < frame && start + i < n; ++i) {
      buffer[i] = emphasized[start + i] * window[i];
    }
    plan.forward(buffer);
    for (Eigen::Index k = 0; k < n_bins; ++k) power[k] = std::norm(buffer[k]);
    const Eigen::VectorXd energies = bank.weights * power;
    for (int b = 0; b < config.n_mel_bands; ++b) {
      out(f, b) = 10.0 * std::log10(std::max(energies[b], floor_power));
    }
  }
  return out;
}

Eigen::MatrixXd mfcc(std::span<const double> samples, int sample_rate_hz, const MfccConfig& config) {
  const Eigen::MatrixXd log_mel = log_mel_spectrogram(samples, sample_rate_hz, config);
  const Eigen::MatrixXd dct = dct2_matrix(config.n_coefficients, config.n_mel_bands);
  return log_mel * dct.transpose();
}

Eigen::VectorXd summarize_mfcc(const Eigen::Ref<const Eigen::MatrixXd>& coefficients) {
  const Eigen::Index n_coef = coefficients.cols();
  Eigen::VectorXd out(2 * n_coef);
  const Eigen::RowVectorXd mean = coefficients.colwise().mean();
  const Eigen::MatrixXd centred = coefficients.rowwise() - mean;
  const Eigen::RowVectorXd var = centred.array().square().colwise().mean();
  out.head(n_coef) = mean.transpose();
  out.tail(n_coef) = var.array().sqrt().transpose();
  return out;
}

}  // namespace iconnet::dsp
