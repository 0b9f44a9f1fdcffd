#include "iconnet/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "iconnet/errors.hpp"

namespace iconnet::interpret {

namespace {

using Eigen::Index;

constexpr double kStopDb = dsp::kNoticeableThresholdDb;

// Bins strictly inside the design band, pulled in by `margin` on each side;
// falls back to the bin nearest the band centre when the band is too narrow.
std::vector<Index> interior_bins(const dsp::FrequencyResponseCurve& r, const Band& band, double margin) {
  std::vector<Index> bins;
  for (Index k = 0; k < r.freqs_hz.size(); ++k) {
    const double f = r.freqs_hz[k];
    if (f >= band.first + margin && f <= band.second - margin) bins.push_back(k);
  }
  if (bins.empty()) {
    const double centre = 0.5 * (band.first + band.second);
    Index best = 0;
    for (Index k = 1; k < r.freqs_hz.size(); ++k) {
      if (std::abs(r.freqs_hz[k] - centre) < std::abs(r.freqs_hz[best] - centre)) best = k;
    }
    bins.push_back(best);
  }
  return bins;
}

bool stopped_throughout(const dsp::FrequencyResponseCurve& r, const Band& band, double resolution_hz) {
  const auto bins = interior_bins(r, band, 2.0 * resolution_hz);
  return std::all_of(bins.begin(), bins.end(), [&](Index k) { return r.magnitude_db[k] <= kStopDb; });
}

std::string format_hz(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

const char* shape_name(FilterShape shape) {
  switch (shape) {
    case FilterShape::BandPass:
      return "BandPass";
    case FilterShape::BandStop:
      return "BandStop";
    case FilterShape::LowPass:
      return "LowPass";
    case FilterShape::HighPass:
      return "HighPass";
    case FilterShape::AllPass:
      return "AllPass";
    case FilterShape::Inactive:
      return "Inactive";
  }
  return "Inactive";
}

FilterShape parse_shape_name(const std::string& text) {
  for (auto s : {FilterShape::BandPass, FilterShape::BandStop, FilterShape::LowPass, FilterShape::HighPass,
                 FilterShape::AllPass, FilterShape::Inactive}) {
    if (text == shape_name(s)) return s;
  }
  throw FormatError("unknown filter shape '" + text + "'");
}

FilterShape classify_response(const dsp::FrequencyResponseCurve& r, const Band& design_band_hz, double resolution_hz) {
  const auto& db = r.magnitude_db;
  const Index n = db.size();
  if (n == 0) throw ArgumentError("empty frequency response");
  if (db.maxCoeff() <= dsp::kDbFloor) return FilterShape::Inactive;
  if ((db.array() > kStopDb).all()) return FilterShape::AllPass;

  Index peak = 0;
  db.maxCoeff(&peak);
  const double f_peak = r.freqs_hz[peak];
  const bool peak_outside = f_peak < design_band_hz.first || f_peak > design_band_hz.second;
  if (peak_outside && stopped_throughout(r, design_band_hz, resolution_hz)) return FilterShape::BandStop;

  Index p_lo = n, p_hi = -1;
  for (Index k = 0; k < n; ++k) {
    if (db[k] >= kPassbandDb) {
      p_lo = std::min(p_lo, k);
      p_hi = std::max(p_hi, k);
    }
  }
  bool stop_below = false, stop_above = false;
  for (Index k = 0; k < n; ++k) {
    if (db[k] > kStopDb) continue;
    if (k < p_lo) stop_below = true;
    if (k > p_hi) stop_above = true;
  }
  if (stop_below && stop_above) return FilterShape::BandPass;
  if (stop_above) return FilterShape::LowPass;
  if (stop_below) return FilterShape::HighPass;
  return FilterShape::BandStop;
}

FilterReport analyze_kernel(const Eigen::Ref<const Eigen::VectorXd>& kernel, int sample_rate_hz,
                            const Band& design_band_hz, int block, int kernel_id, Index n_fft, bool inactive) {
  FilterReport rep;
  rep.block = block;
  rep.kernel_id = kernel_id;
  rep.design_band_hz = design_band_hz;
  rep.response = dsp::frequency_response_db(kernel, n_fft, sample_rate_hz, true);
  rep.resolution_hz = static_cast<double>(sample_rate_hz) / static_cast<double>(kernel.size());
  rep.shape = inactive ? FilterShape::Inactive : classify_response(rep.response, design_band_hz, rep.resolution_hz);
  if (rep.shape == FilterShape::BandPass || rep.shape == FilterShape::LowPass || rep.shape == FilterShape::HighPass) {
    const auto& db = rep.response.magnitude_db;
    double weight = 0.0, moment = 0.0;
    Index lo = db.size(), hi = -1;
    for (Index k = 0; k < db.size(); ++k) {
      if (db[k] < kPassbandDb) continue;
      const double a = std::pow(10.0, db[k] / 20.0);
      weight += a;
      moment += a * rep.response.freqs_hz[k];
      lo = std::min(lo, k);
      hi = std::max(hi, k);
    }
    rep.passband_center_hz = moment / weight;
    rep.passband_edges_hz = Band{rep.response.freqs_hz[lo], rep.response.freqs_hz[hi]};
  }
  return rep;
}

std::vector<FilterReport> analyze_block(const Eigen::MatrixXd& kernels, int sample_rate_hz,
                                        const std::vector<Band>& design_bands, int block, Index n_fft) {
  if (static_cast<Index>(design_bands.size()) != kernels.rows()) {
    throw ShapeError("need one design band per kernel");
  }
  const Eigen::VectorXd energy = kernels.rowwise().squaredNorm();
  std::vector<double> sorted(energy.data(), energy.data() + energy.size());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  const double median = m == 0 ? 0.0 : (m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]));
  std::vector<FilterReport> out;
  for (Index k = 0; k < kernels.rows(); ++k) {
    const bool inactive = energy[k] == 0.0 || energy[k] <= kInactiveEnergyRatio * median;
    out.push_back(analyze_kernel(kernels.row(k).transpose(), sample_rate_hz, design_bands[k], block,
                                 static_cast<int>(k), n_fft, inactive));
  }
  return out;
}

template <typename Scalar>
std::vector<FilterReport> analyze_filters(const model::IConNet<Scalar>& model, Index n_fft) {
  auto out = analyze_block(model.block1().effective_kernels(), model.block1().sample_rate_hz(),
                           model.block1().cutoffs_hz(), 1, n_fft);
  auto second = analyze_block(model.block2().effective_kernels(), model.block2().sample_rate_hz(),
                              model.block2().cutoffs_hz(), 2, n_fft);
  out.insert(out.end(), std::make_move_iterator(second.begin()), std::make_move_iterator(second.end()));
  return out;
}

template std::vector<FilterReport> analyze_filters<float>(const model::IConNet<float>&, Index);
template std::vector<FilterReport> analyze_filters<double>(const model::IConNet<double>&, Index);

std::vector<Band> default_bands(int n_bands, double f_min_hz, double f_max_hz, double nyquist_hz) {
  if (n_bands < 1 || !(f_min_hz < f_max_hz) || f_max_hz > nyquist_hz) {
    throw ConfigError("band layout needs n >= 1 and f_min < f_max <= Nyquist");
  }
  const double lo = dsp::hz_to_mel(f_min_hz), hi = dsp::hz_to_mel(f_max_hz);
  std::vector<double> edges;
  for (int i = 0; i <= n_bands; ++i) edges.push_back(dsp::mel_to_hz(lo + (hi - lo) * i / n_bands));
  edges.front() = 0.0;
  edges.back() = nyquist_hz;
  std::vector<Band> bands;
  for (int i = 0; i < n_bands; ++i) bands.emplace_back(edges[i], edges[i + 1]);
  return bands;
}

std::vector<BandSummary> band_summary(const std::vector<FilterReport>& reports, const std::vector<Band>& bands) {
  if (bands.empty()) throw ConfigError("no bands given");
  for (std::size_t i = 0; i < bands.size(); ++i) {
    if (!(bands[i].first < bands[i].second) || (i > 0 && bands[i].first < bands[i - 1].second)) {
      throw ConfigError("bands must be ordered, non-empty and non-overlapping");
    }
  }
  std::vector<BandSummary> out(bands.size());
  for (std::size_t i = 0; i < bands.size(); ++i) {
    out[i].band_range_hz = bands[i];
    out[i].block = reports.empty() ? 1 : reports.front().block;
  }
  std::vector<std::vector<const FilterReport*>> members(bands.size());
  for (const auto& r : reports) {
    const double centre = 0.5 * (r.design_band_hz.first + r.design_band_hz.second);
    std::size_t which = bands.size();
    for (std::size_t i = 0; i < bands.size(); ++i) {
      const bool last = i + 1 == bands.size();
      if (centre >= bands[i].first && (centre < bands[i].second || (last && centre <= bands[i].second))) {
        which = i;
        break;
      }
    }
    if (which == bands.size()) {
      throw ConfigError("kernel " + std::to_string(r.kernel_id) + " (design centre " + format_hz(centre) +
                        " Hz) falls in no band");
    }
    members[which].push_back(&r);
  }
  for (std::size_t i = 0; i < bands.size(); ++i) {
    if (members[i].empty()) continue;
    const auto& grid = members[i].front()->response.freqs_hz;
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(grid.size());
    for (const auto* r : members[i]) {
      if (r->response.freqs_hz.size() != grid.size() || !r->response.freqs_hz.isApprox(grid)) {
        throw ArgumentError("band members were analysed on different frequency grids");
      }
      acc += r->response.magnitude_db;
      out[i].member_kernel_ids.push_back(r->kernel_id);
    }
    out[i].mean_response.freqs_hz = grid;
    out[i].mean_response.magnitude_db = acc / static_cast<double>(members[i].size());
  }
  return out;
}

PassbandStats passband_statistics(const std::vector<FilterReport>& reports, int block) {
  std::vector<double> centres;
  for (const auto& r : reports) {
    if (r.block == block && r.shape == FilterShape::BandPass) centres.push_back(*r.passband_center_hz);
  }
  PassbandStats s;
  s.count = centres.size();
  if (centres.empty()) return s;
  double sum = 0.0;
  for (double c : centres) sum += c;
  s.mean_hz = sum / static_cast<double>(centres.size());
  double var = 0.0;
  for (double c : centres) var += (c - s.mean_hz) * (c - s.mean_hz);
  s.std_hz = std::sqrt(var / static_cast<double>(centres.size()));
  return s;
}

SuppressionResult high_band_suppression(const std::vector<FilterReport>& reports, double cutoff_hz) {
  SuppressionResult out;
  for (const auto& r : reports) {
    if (!r.response.freqs_hz.size() || cutoff_hz >= r.response.freqs_hz[r.response.freqs_hz.size() - 1]) {
      throw ArgumentError("cutoff must lie below Nyquist");
    }
  }
  for (const auto& r : reports) {
    if (r.design_band_hz.first < cutoff_hz) continue;
    ++out.considered;
    const bool quiet = stopped_throughout(r.response, r.design_band_hz, r.resolution_hz);
    if (r.shape == FilterShape::BandStop || r.shape == FilterShape::Inactive || quiet) ++out.suppressed;
  }
  if (out.considered > 0) out.fraction = static_cast<double>(out.suppressed) / static_cast<double>(out.considered);
  return out;
}

void export_report(const std::vector<FilterReport>& reports, const std::vector<BandSummary>& summaries,
                   const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory " + dir.string() + ": " + ec.message());

  {
    std::ofstream out(dir / "filters.csv");
    if (!out) throw IoError("cannot write " + (dir / "filters.csv").string());
    out << "block,kernel_id,shape,center_hz,design_low,design_high\n";
    for (const auto& r : reports) {
      out << r.block << ',' << r.kernel_id << ',' << shape_name(r.shape) << ','
          << (r.passband_center_hz ? format_hz(*r.passband_center_hz) : "") << ',' << format_hz(r.design_band_hz.first)
          << ',' << format_hz(r.design_band_hz.second) << '\n';
    }
    if (!out) throw IoError("failed writing filters.csv");
  }

  std::vector<std::string> band_files;
  for (std::size_t b = 0; b < summaries.size(); ++b) {
    const auto& s = summaries[b];
    if (s.member_kernel_ids.empty()) {
      band_files.emplace_back();
      continue;
    }
    const std::string name = "block" + std::to_string(s.block) + "_band" + std::to_string(b) + ".csv";
    band_files.push_back(name);
    std::vector<const FilterReport*> members;
    for (int id : s.member_kernel_ids) {
      for (const auto& r : reports) {
        if (r.block == s.block && r.kernel_id == id) members.push_back(&r);
      }
    }
    std::ofstream out(dir / name);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out << "freq_hz";
    for (const auto* r : members) out << ",k" << r->kernel_id;
    out << ",mean_db,threshold_db\n";
    char buf[64];
    for (Index k = 0; k < s.mean_response.freqs_hz.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%.4f", s.mean_response.freqs_hz[k]);
      out << buf;
      for (const auto* r : members) {
        std::snprintf(buf, sizeof buf, ",%.4f", r->response.magnitude_db[k]);
        out << buf;
      }
      std::snprintf(buf, sizeof buf, ",%.4f,%.1f\n", s.mean_response.magnitude_db[k], kStopDb);
      out << buf;
    }
    if (!out) throw IoError("failed writing " + name);
  }

  std::ofstream out(dir / "summary.txt");
  if (!out) throw IoError("cannot write " + (dir / "summary.txt").string());
  char line[256];
  std::snprintf(line, sizeof line, "Stop threshold: %.1f dB relative to each filter's peak\n", kStopDb);
  out << line;
  std::snprintf(line, sizeof line, "Passband: bins within %.1f dB of the peak; centre = amplitude-weighted mean\n",
                kPassbandDb);
  out << line;
  for (int block : {1, 2}) {
    std::size_t counts[6] = {};
    std::size_t total = 0;
    for (const auto& r : reports) {
      if (r.block != block) continue;
      ++counts[static_cast<int>(r.shape)];
      ++total;
    }
    if (total == 0) continue;
    out << "\nBlock " << block << ": " << total << " kernels\n";
    for (auto s : {FilterShape::BandPass, FilterShape::BandStop, FilterShape::LowPass, FilterShape::HighPass,
                   FilterShape::AllPass, FilterShape::Inactive}) {
      out << "  " << shape_name(s) << ": " << counts[static_cast<int>(s)] << '\n';
    }
    const auto stats = passband_statistics(reports, block);
    if (stats.empty()) {
      out << "  BandPass centres: none\n";
    } else {
      std::snprintf(line, sizeof line, "  BandPass centres: %.1f +- %.1f Hz over %zu kernels\n", stats.mean_hz,
                    stats.std_hz, stats.count);
      out << line;
    }
  }
  std::vector<FilterReport> block1;
  for (const auto& r : reports) {
    if (r.block == 1) block1.push_back(r);
  }
  if (!block1.empty()) {
    const auto sup = high_band_suppression(block1, 2000.0);
    if (sup.empty()) {
      out << "\nBlock 1 above 2000 Hz: no kernels\n";
    } else {
      std::snprintf(line, sizeof line, "\nBlock 1 above 2000 Hz: %zu of %zu kernels suppressed (%.3f)\n",
                    sup.suppressed, sup.considered, sup.fraction);
      out << line;
    }
  }
  out << "\nBands:\n";
  for (std::size_t b = 0; b < summaries.size(); ++b) {
    const auto& s = summaries[b];
    std::snprintf(line, sizeof line, "  block %d band %zu [%.1f, %.1f] Hz: %zu kernels", s.block, b,
                  s.band_range_hz.first, s.band_range_hz.second, s.member_kernel_ids.size());
    out << line;
    if (!band_files[b].empty()) out << " -> " << band_files[b];
    out << '\n';
  }
  if (!out) throw IoError("failed writing summary.txt");
}

std::vector<FilterRow> read_filters_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "block,kernel_id,shape,center_hz,design_low,design_high") {
    throw FormatError(path.string() + ": unexpected header");
  }
  std::vector<FilterRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != 6) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 6 fields");
    try {
      FilterRow r;
      r.block = std::stoi(cells[0]);
      r.kernel_id = std::stoi(cells[1]);
      r.shape = parse_shape_name(cells[2]);
      if (!cells[3].empty()) r.center_hz = std::stod(cells[3]);
      r.design_band_hz = {std::stod(cells[4]), std::stod(cells[5])};
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return rows;
}

}  // namespace iconnet::interpret
