#pragma once

#include <Eigen/Dense>

#include <complex>
#include <filesystem>
#include <span>
#include <vector>

namespace iconnet::dsp {

using Complex = std::complex<double>;

/// Reference level below which a filter's output is treated as inaudible.
inline constexpr double kNoticeableThresholdDb = -20.0;
/// Magnitudes are floored here instead of reaching -inf.
inline constexpr double kDbFloor = -120.0;

bool is_power_of_two(Eigen::Index n);
Eigen::Index next_power_of_two(Eigen::Index n);

/// Radix-2 plan with immutable twiddle and bit-reversal tables; safe to share
/// between threads.
class FftPlan {
 public:
  explicit FftPlan(Eigen::Index n);

  Eigen::Index size() const { return n_; }

  /// In-place forward DFT, X[k] = sum_t x[t] exp(-2 pi i k t / n).
  void forward(std::span<Complex> data) const;
  /// In-place inverse DFT including the 1/n scale.
  void inverse(std::span<Complex> data) const;

 private:
  void transform(std::span<Complex> data, bool inverse) const;

  Eigen::Index n_;
  std::vector<Complex> twiddles_;
  std::vector<Eigen::Index> bitrev_;
};

/// DFT of x zero-padded or truncated to n (n must be a power of two).
Eigen::VectorXcd fft_forward(const Eigen::Ref<const Eigen::VectorXcd>& x, Eigen::Index n);
Eigen::VectorXcd fft_inverse(const Eigen::Ref<const Eigen::VectorXcd>& spectrum);
/// Convenience for real input; returns the full n-point spectrum.
Eigen::VectorXcd fft_real(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Index n);

enum class WindowKind { Hann, Hamming, Blackman };

/// Symmetric generalized cosine window w[n] = sum_j (-1)^j a_j cos(2 pi j n / (L-1)).
/// A single-sample window is [1].
Eigen::VectorXd generalized_cosine_window(std::span<const double> coeffs, Eigen::Index length);
Eigen::VectorXd cosine_window(WindowKind kind, Eigen::Index length);

/// Truncated ideal band-pass impulse response centred at (length-1)/2.
Eigen::VectorXd sinc_bandpass(double f_low_hz, double f_high_hz, Eigen::Index length,
                              int sample_rate_hz);

struct FrequencyResponseCurve {
  Eigen::VectorXd freqs_hz;
  Eigen::VectorXd magnitude_db;
};

/// Magnitude response on bins 0..n_fft/2, in dB floored at kDbFloor. With
/// normalize_peak the curve is shifted so its maximum is exactly 0 dB (an
/// all-zero filter stays at the floor).
FrequencyResponseCurve frequency_response_db(const Eigen::Ref<const Eigen::VectorXd>& coeffs,
                                             Eigen::Index n_fft, int sample_rate_hz,
                                             bool normalize_peak);

void write_response_csv(const FrequencyResponseCurve& curve, const std::filesystem::path& path);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

struct MelFilterbank {
  Eigen::MatrixXd weights;     ///< n_bands x (n_fft/2 + 1)
  Eigen::VectorXd centers_hz;  ///< ascending
};

/// Triangular filters with centres uniform on the mel scale. Throws
/// ConfigError listing every band whose support holds no FFT bin.
MelFilterbank mel_filterbank(int n_bands, Eigen::Index n_fft, int sample_rate_hz, double f_min_hz,
                             double f_max_hz);

/// Orthonormal DCT-II matrix (n_out x n_in); row i is basis function i.
Eigen::MatrixXd dct2_matrix(Eigen::Index n_out, Eigen::Index n_in);

struct MfccConfig {
  Eigen::Index frame_len_samples = 400;  // 25 ms @ 16 kHz
  Eigen::Index hop_samples = 160;        // 10 ms
  Eigen::Index n_fft = 512;
  int n_mel_bands = 40;
  int n_coefficients = 40;
  int sample_rate_hz = 16000;
  double f_min_hz = 25.0;
  double f_max_hz = 8000.0;
  double pre_emphasis = 0.97;
  double floor_db = -80.0;

  void validate() const;
};

/// Log mel energies in dB (n_frames x n_mel_bands), floored at floor_db.
Eigen::MatrixXd log_mel_spectrogram(std::span<const double> samples, int sample_rate_hz,
                                    const MfccConfig& config);

/// n_frames x n_coefficients. Input shorter than one frame yields one
/// zero-padded frame.
Eigen::MatrixXd mfcc(std::span<const double> samples, int sample_rate_hz, const MfccConfig& config);

/// Per-coefficient mean followed by population standard deviation over frames.
Eigen::VectorXd summarize_mfcc(const Eigen::Ref<const Eigen::MatrixXd>& coefficients);

}  // namespace iconnet::dsp
