#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "iconnet/dsp.hpp"
#include "iconnet/model.hpp"

namespace iconnet::interpret {

using Band = std::pair<double, double>;

enum class FilterShape { BandPass, BandStop, LowPass, HighPass, AllPass, Inactive };

const char* shape_name(FilterShape shape);
FilterShape parse_shape_name(const std::string& text);

inline constexpr Eigen::Index kAnalysisFftSize = 4096;
/// A kernel is Inactive when its energy is at most this fraction of the block median.
inline constexpr double kInactiveEnergyRatio = 1e-8;
inline constexpr double kPassbandDb = -3.0;

struct FilterReport {
  int block = 1;
  int kernel_id = 0;
  dsp::FrequencyResponseCurve response;  ///< peak-normalised
  FilterShape shape = FilterShape::Inactive;
  std::optional<double> passband_center_hz;
  std::optional<Band> passband_edges_hz;
  Band design_band_hz{0.0, 0.0};
  double resolution_hz = 0.0;  ///< sample rate / kernel length
};

/// Shape of a peak-normalised response. `resolution_hz` (sample rate over
/// kernel length) sets how far inside the design band the stop test looks,
/// so the window's main lobe spilling over the band edges is not counted.
FilterShape classify_response(const dsp::FrequencyResponseCurve& response, const Band& design_band_hz,
                              double resolution_hz);

/// One row per kernel; `inactive` marks kernels already judged silent.
FilterReport analyze_kernel(const Eigen::Ref<const Eigen::VectorXd>& kernel, int sample_rate_hz,
                            const Band& design_band_hz, int block, int kernel_id,
                            Eigen::Index n_fft = kAnalysisFftSize, bool inactive = false);

/// Rows of `kernels` are filters of one block; Inactive is judged against the block median energy.
std::vector<FilterReport> analyze_block(const Eigen::MatrixXd& kernels, int sample_rate_hz,
                                        const std::vector<Band>& design_bands, int block,
                                        Eigen::Index n_fft = kAnalysisFftSize);

template <typename Scalar>
std::vector<FilterReport> analyze_filters(const model::IConNet<Scalar>& model, Eigen::Index n_fft = kAnalysisFftSize);

struct BandSummary {
  int block = 1;
  Band band_range_hz{0.0, 0.0};
  std::vector<int> member_kernel_ids;
  dsp::FrequencyResponseCurve mean_response;  ///< pointwise mean in dB; empty when no members
};

/// n bands with edges uniform on the mel scale over [f_min, f_max]; the first
/// band is widened down to 0 Hz and the last up to Nyquist.
std::vector<Band> default_bands(int n_bands = 8, double f_min_hz = 30.0, double f_max_hz = 8000.0,
                                double nyquist_hz = 8000.0);

/// Groups the reports of one block by the centre of their design band.
std::vector<BandSummary> band_summary(const std::vector<FilterReport>& reports, const std::vector<Band>& bands);

struct PassbandStats {
  std::size_t count = 0;
  double mean_hz = 0.0;
  double std_hz = 0.0;  ///< population standard deviation
  bool empty() const { return count == 0; }
};

/// Over the BandPass kernels of the given block.
PassbandStats passband_statistics(const std::vector<FilterReport>& reports, int block = 1);

struct SuppressionResult {
  std::size_t considered = 0;
  std::size_t suppressed = 0;
  double fraction = 0.0;
  bool empty() const { return considered == 0; }
};

/// Among kernels whose design band lies entirely above cutoff_hz: the share
/// that is BandStop, Inactive, or at most -20 dB throughout its design band.
SuppressionResult high_band_suppression(const std::vector<FilterReport>& reports, double cutoff_hz);

/// Writes <dir>/filters.csv, one response CSV per non-empty band, and <dir>/summary.txt.
void export_report(const std::vector<FilterReport>& reports, const std::vector<BandSummary>& summaries,
                   const std::filesystem::path& dir);

struct FilterRow {
  int block = 1;
  int kernel_id = 0;
  FilterShape shape = FilterShape::Inactive;
  std::optional<double> center_hz;
  Band design_band_hz{0.0, 0.0};
};

std::vector<FilterRow> read_filters_csv(const std::filesystem::path& path);

}  // namespace iconnet::interpret
