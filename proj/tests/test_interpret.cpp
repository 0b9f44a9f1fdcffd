#include "doctest.h"

#include <cmath>
#include <fstream>
#include <sstream>

#include "iconnet/errors.hpp"
#include "iconnet/interpret.hpp"
#include "prototypes.hpp"
#include "test_util.hpp"

using namespace iconnet;
using namespace iconnet::interpret;

namespace {

FilterReport fake_report(int block, int id, FilterShape shape, Band design, std::optional<double> centre = {}) {
  FilterReport r;
  r.block = block;
  r.kernel_id = id;
  r.shape = shape;
  r.design_band_hz = design;
  r.passband_center_hz = centre;
  r.resolution_hz = 62.5;
  r.response.freqs_hz = Eigen::VectorXd::LinSpaced(5, 0.0, 8000.0);
  r.response.magnitude_db = Eigen::VectorXd::Constant(5, -10.0 * id);
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("prototype filters are classified by shape") {
  for (const auto& p : prototypes::suite()) {
    CAPTURE(p.name);
    const auto r = analyze_kernel(p.kernel, prototypes::kRate, p.design_band, 1, 0);
    CHECK(r.shape == p.expected);
  }
}

TEST_CASE("classification and centre are invariant to positive scaling") {
  for (const auto& p : prototypes::suite()) {
    CAPTURE(p.name);
    const auto a = analyze_kernel(p.kernel, prototypes::kRate, p.design_band, 1, 0);
    const auto b = analyze_kernel(7.5 * p.kernel, prototypes::kRate, p.design_band, 1, 0);
    CHECK(a.shape == b.shape);
    CHECK(a.passband_center_hz.has_value() == b.passband_center_hz.has_value());
    if (a.passband_center_hz) CHECK(*a.passband_center_hz == doctest::Approx(*b.passband_center_hz));
  }
}

TEST_CASE("band-pass centre and edges sit on the design band") {
  const auto r = analyze_kernel(prototypes::windowed_bandpass(500.0, 1500.0), prototypes::kRate, {500.0, 1500.0}, 1, 3);
  REQUIRE(r.passband_center_hz.has_value());
  CHECK(*r.passband_center_hz == doctest::Approx(1000.0).epsilon(0.02));
  CHECK(r.passband_edges_hz->first > 500.0 - r.resolution_hz);
  CHECK(r.passband_edges_hz->second < 1500.0 + r.resolution_hz);
  CHECK(r.kernel_id == 3);
  CHECK(r.resolution_hz == doctest::Approx(16000.0 / 257.0));
}

TEST_CASE("low-pass and high-pass responses") {
  Eigen::VectorXd lp = prototypes::windowed_bandpass(0.0, 1000.0);
  CHECK(analyze_kernel(lp, prototypes::kRate, {0.0, 1000.0}, 1, 0).shape == FilterShape::LowPass);
  Eigen::VectorXd hp = -prototypes::windowed_bandpass(0.0, 6000.0);
  hp[prototypes::kTaps / 2] += 1.0;
  CHECK(analyze_kernel(hp, prototypes::kRate, {6000.0, 8000.0}, 1, 0).shape == FilterShape::HighPass);
}

TEST_CASE("block analysis marks near-silent kernels inactive") {
  Eigen::MatrixXd k(3, prototypes::kTaps);
  k.row(0) = prototypes::windowed_bandpass(500.0, 1500.0).transpose();
  k.row(1) = prototypes::windowed_bandpass(2000.0, 3000.0).transpose();
  k.row(2) = 1e-6 * prototypes::windowed_bandpass(4000.0, 5000.0).transpose();
  const auto reports = analyze_block(k, prototypes::kRate, {{500, 1500}, {2000, 3000}, {4000, 5000}}, 2);
  CHECK(reports[0].shape == FilterShape::BandPass);
  CHECK(reports[1].shape == FilterShape::BandPass);
  CHECK(reports[2].shape == FilterShape::Inactive);
  CHECK(reports[2].block == 2);
  CHECK_THROWS_AS(analyze_block(k, prototypes::kRate, {{500, 1500}}, 1), ShapeError);
}

TEST_CASE("freshly initialised model filters are band-pass") {
  const model::IConNet<double> net(model::IConNetConfig::tiny());
  const auto reports = analyze_filters(net);
  REQUIRE(reports.size() == 12);
  std::size_t bandpass = 0;
  for (const auto& r : reports) bandpass += r.shape == FilterShape::BandPass || r.shape == FilterShape::LowPass;
  CHECK(bandpass >= 10);
  CHECK(reports.back().block == 2);
  CHECK(reports.back().response.freqs_hz[reports.back().response.freqs_hz.size() - 1] == doctest::Approx(2000.0));
}

TEST_CASE("default bands tile the spectrum up to Nyquist") {
  const auto bands = default_bands(8, 30.0, 8000.0, 8000.0);
  REQUIRE(bands.size() == 8);
  CHECK(bands.front().first == 0.0);
  CHECK(bands.back().second == 8000.0);
  for (std::size_t i = 1; i < bands.size(); ++i) CHECK(bands[i].first == doctest::Approx(bands[i - 1].second));
}

TEST_CASE("band summary groups by design centre and averages in dB") {
  std::vector<FilterReport> reports{fake_report(1, 1, FilterShape::BandPass, {100, 300}),
                                    fake_report(1, 2, FilterShape::BandPass, {150, 250}),
                                    fake_report(1, 3, FilterShape::BandStop, {5000, 7000})};
  const auto s = band_summary(reports, {{0, 1000}, {1000, 4000}, {4000, 8000}});
  REQUIRE(s.size() == 3);
  CHECK(s[0].member_kernel_ids == std::vector<int>{1, 2});
  CHECK(s[1].member_kernel_ids.empty());
  CHECK(s[2].member_kernel_ids == std::vector<int>{3});
  CHECK(s[0].mean_response.magnitude_db[0] == doctest::Approx(-15.0));
  CHECK_THROWS_AS(band_summary(reports, {{0, 1000}, {500, 8000}}), ConfigError);
  CHECK_THROWS_AS(band_summary(reports, {{0, 1000}}), ConfigError);
  reports[1].response.freqs_hz = Eigen::VectorXd::LinSpaced(5, 0.0, 4000.0);
  CHECK_THROWS_AS(band_summary(reports, {{0, 1000}, {1000, 8000}}), ArgumentError);
}

TEST_CASE("passband statistics use population std over band-pass kernels of one block") {
  std::vector<FilterReport> reports{fake_report(1, 0, FilterShape::BandPass, {0, 1}, 500.0),
                                    fake_report(1, 1, FilterShape::BandPass, {0, 1}, 700.0),
                                    fake_report(1, 2, FilterShape::BandStop, {0, 1}),
                                    fake_report(2, 0, FilterShape::BandPass, {0, 1}, 100.0)};
  const auto s = passband_statistics(reports, 1);
  CHECK(s.count == 2);
  CHECK(s.mean_hz == doctest::Approx(600.0));
  CHECK(s.std_hz == doctest::Approx(100.0));
  CHECK(passband_statistics(reports, 3).empty());
}

TEST_CASE("high-band suppression counts stop, inactive and quiet kernels above the cutoff") {
  auto quiet = fake_report(1, 3, FilterShape::BandPass, {4000, 6000});
  quiet.response.freqs_hz = Eigen::VectorXd::LinSpaced(9, 0.0, 8000.0);
  quiet.response.magnitude_db = Eigen::VectorXd::Constant(9, -30.0);
  quiet.response.magnitude_db[1] = 0.0;
  std::vector<FilterReport> reports{fake_report(1, 0, FilterShape::BandPass, {500, 1500}),
                                    fake_report(1, 1, FilterShape::BandStop, {2500, 3500}),
                                    fake_report(1, 2, FilterShape::Inactive, {3000, 5000}), quiet,
                                    fake_report(1, 4, FilterShape::BandPass, {2100, 2600})};
  reports[4].response.magnitude_db.setZero();
  const auto s = high_band_suppression(reports, 2000.0);
  CHECK(s.considered == 4);
  CHECK(s.suppressed == 3);
  CHECK(s.fraction == doctest::Approx(0.75));
  CHECK_THROWS_AS(high_band_suppression(reports, 8000.0), ArgumentError);
}

TEST_CASE("export writes filters, band curves with the threshold, and a summary") {
  test::TempDir dir;
  std::vector<FilterReport> reports;
  for (const auto& p : prototypes::suite()) {
    reports.push_back(analyze_kernel(p.kernel, prototypes::kRate, p.design_band, 1, static_cast<int>(reports.size())));
  }
  const auto summaries = band_summary(reports, default_bands(8, 30.0, 8000.0, 8000.0));
  export_report(reports, summaries, dir.path());

  const auto rows = read_filters_csv(dir.path() / "filters.csv");
  REQUIRE(rows.size() == reports.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].shape == reports[i].shape);
    CHECK(rows[i].center_hz.has_value() == reports[i].passband_center_hz.has_value());
    CHECK(rows[i].design_band_hz.first == doctest::Approx(reports[i].design_band_hz.first));
  }
  CHECK(slurp(dir.path() / "filters.csv").rfind("block,kernel_id,shape,center_hz,design_low,design_high\n", 0) == 0);

  std::size_t band_files = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir.path())) {
    const auto name = entry.path().filename().string();
    if (name.rfind("block1_band", 0) != 0) continue;
    ++band_files;
    std::ifstream in(entry.path());
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header.find(",mean_db,threshold_db") != std::string::npos);
    CHECK(row.substr(row.rfind(',') + 1) == "-20.0");
  }
  std::size_t non_empty = 0;
  for (const auto& s : summaries) non_empty += !s.member_kernel_ids.empty();
  CHECK(band_files == non_empty);
  const auto summary = slurp(dir.path() / "summary.txt");
  CHECK(summary.find("-20.0 dB") != std::string::npos);
  CHECK(summary.find("BandStop: 1") != std::string::npos);
}

TEST_CASE("shape names round trip") {
  for (auto s : {FilterShape::BandPass, FilterShape::BandStop, FilterShape::LowPass, FilterShape::HighPass,
                 FilterShape::AllPass, FilterShape::Inactive}) {
    CHECK(parse_shape_name(shape_name(s)) == s);
  }
  CHECK_THROWS_AS(parse_shape_name("Comb"), FormatError);
}
