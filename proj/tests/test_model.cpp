#include "doctest.h"

#include <cmath>
#include <numbers>

#include "iconnet/dsp.hpp"
#include "iconnet/errors.hpp"
#include "iconnet/model.hpp"
#include "iconnet/rng.hpp"

using namespace iconnet;
using namespace iconnet::model;
using grad::Array;
using grad::Tape;
using grad::Tensor;

namespace {

Tensor<double> noise_batch(std::uint64_t seed, Index batch, Index n, double scale = 0.3) {
  Rng rng(seed);
  Array<double> v(batch * n);
  for (auto& x : v) x = scale * rng.normal();
  return Tensor<double>({batch, 1, n}, std::move(v));
}

double max_abs_diff(const Array<double>& a, const Array<double>& b) { return (a - b).abs().maxCoeff(); }

}  // namespace

TEST_CASE("parameter counts of the reference configurations") {
  const IConNet<float> net(IConNetConfig{});
  const auto c = net.count_params();
  CHECK(c.front_end == 128 * 256 + 32 * 400);
  CHECK(c.front_end == 45568);
  CHECK(c.classifier == 32 * 256 + 256 + 256 * 256 + 256 + 256 * 2 + 2);
  CHECK(c.total == 120322);
  const MfccFfn<float> mfcc(MfccFfnConfig{});
  CHECK(mfcc.count_params().total == 87042);
  CHECK(mfcc.count_params().front_end == 0);
  Index listed = 0;
  for (const auto& p : net.parameters()) listed += p.tensor.size();
  CHECK(listed == c.total);
  CHECK(net.parameters()[0].name == "block1.windows");
  CHECK(net.parameters()[1].name == "block2.windows");
}

TEST_CASE("band tiling covers the range with half overlap") {
  const auto bands = tile_bands(8, 30.0, 8000.0, BandSpacing::Mel);
  REQUIRE(bands.size() == 8);
  CHECK(bands.front().first == doctest::Approx(30.0));
  CHECK(bands.back().second == doctest::Approx(8000.0));
  for (std::size_t k = 1; k < bands.size(); ++k) {
    CHECK(bands[k].first > bands[k - 1].first);
    CHECK(bands[k].first < bands[k - 1].second);
  }
  const auto lin = tile_bands(4, 0.0, 1000.0, BandSpacing::Linear);
  CHECK(lin[0].second == doctest::Approx(400.0));
  CHECK(lin[1].first == doctest::Approx(200.0));
  CHECK_THROWS_AS(tile_bands(4000, 30.0, 100.0, BandSpacing::Linear), ConfigError);
}

TEST_CASE("initial kernels peak inside their design band") {
  for (const auto& [n, L, fs] : {std::tuple{128, 256, 16000}, std::tuple{32, 400, 4000}}) {
    const auto layer = init_firconv<double>(n, L, fs, dsp::WindowKind::Hann, BandSpacing::Mel);
    const auto k = layer.effective_kernels();
    const double tolerance = static_cast<double>(fs) / L;
    for (int i = 0; i < n; ++i) {
      const auto r = dsp::frequency_response_db(k.row(i).transpose(), 4096, fs, true);
      Index peak;
      r.magnitude_db.maxCoeff(&peak);
      const auto [lo, hi] = layer.cutoffs_hz()[i];
      CHECK(r.freqs_hz[peak] >= lo - tolerance);
      CHECK(r.freqs_hz[peak] <= hi + tolerance);
    }
  }
}

TEST_CASE("construction is deterministic in the seed") {
  auto cfg = IConNetConfig::tiny();
  cfg.seed = 3;
  const IConNet<double> a(cfg), b(cfg);
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK((pa[i].tensor.values() == pb[i].tensor.values()).all());
  cfg.seed = 4;
  const IConNet<double> c(cfg);
  CHECK_FALSE((c.parameters()[2].tensor.values() == pa[2].tensor.values()).all());
  CHECK((c.parameters()[0].tensor.values() == pa[0].tensor.values()).all());
}

TEST_CASE("copies are independent") {
  IConNet<double> a(IConNetConfig::tiny());
  IConNet<double> b = a;
  b.block1().windows().values().setZero();
  CHECK(a.block1().windows().values().abs().maxCoeff() > 0.0);
}

TEST_CASE("unit windows expose the carrier and zero windows silence the front end") {
  IConNet<double> net(IConNetConfig::tiny());
  net.block1().windows().values().setOnes();
  CHECK((net.block1().effective_kernels() - net.block1().carrier()).cwiseAbs().maxCoeff() == 0.0);

  net.block1().windows().values().setZero();
  Tape<double> tape(false);
  const auto f = net.features(tape, noise_batch(1, 2, 2000));
  CHECK(f.values().abs().maxCoeff() == 0.0);
  const auto l1 = net.forward(tape, noise_batch(1, 2, 2000));
  const auto l2 = net.forward(tape, noise_batch(2, 2, 2000));
  CHECK(max_abs_diff(l1.values(), l2.values()) == 0.0);
}

TEST_CASE("forward shapes and input validation") {
  const IConNet<double> net(IConNetConfig::tiny());
  Tape<double> tape(false);
  const auto logits = net.forward(tape, noise_batch(3, 3, 2000));
  CHECK(logits.shape() == grad::Shape{3, 2});
  CHECK(logits.values().allFinite());
  CHECK(net.features(tape, noise_batch(3, 3, 2000)).shape() == grad::Shape{3, 4});
  CHECK_THROWS_AS(net.forward(tape, noise_batch(3, 1, 1999)), ShapeError);
  const auto zero = net.features(tape, Tensor<double>::zeros({1, 1, 2000}));
  CHECK(zero.values().abs().maxCoeff() == 0.0);
}

TEST_CASE("features are positively homogeneous but logits are not") {
  const IConNet<double> net(IConNetConfig::tiny());
  Tape<double> tape(false);
  const auto x = noise_batch(5, 2, 2000);
  Tensor<double> x3 = x.clone();
  x3.values() *= 3.0;
  const auto f = net.features(tape, x);
  const auto f3 = net.features(tape, x3);
  CHECK(max_abs_diff(f3.values(), 3.0 * f.values()) < 1e-9 * f3.values().abs().maxCoeff());
  CHECK(max_abs_diff(net.forward(tape, x).values(), net.forward(tape, x3).values()) > 1e-6);
}

TEST_CASE("logits are invariant to pool-aligned shifts of a centred burst") {
  const IConNet<double> net(IConNetConfig::tiny());
  const Index n = 2000, shift = 16;
  Array<double> a = Array<double>::Zero(n), b = Array<double>::Zero(n);
  Rng rng(9);
  for (Index t = 700; t < 1300; ++t) {
    const double v = std::sin(2 * std::numbers::pi * 900.0 * t / 16000.0) + 0.2 * rng.normal();
    a[t] = v;
    b[t + shift] = v;
  }
  Tape<double> tape(false);
  const auto la = net.forward(tape, Tensor<double>({1, 1, n}, a));
  const auto lb = net.forward(tape, Tensor<double>({1, 1, n}, b));
  CHECK(max_abs_diff(la.values(), lb.values()) < 1e-3 * std::max(1.0, la.values().abs().maxCoeff()));
}

TEST_CASE("backward reaches the windows and the classifier but never the carrier") {
  IConNet<double> net(IConNetConfig::tiny());
  const Eigen::MatrixXd carrier = net.block1().carrier();
  Tape<double> tape;
  const auto logits = net.forward(tape, noise_batch(6, 2, 2000));
  const std::vector<int> y{0, 1};
  const std::vector<double> w{1.0, 1.0};
  tape.backward(grad::weighted_cross_entropy(tape, logits, y, w));
  for (const auto& p : net.parameters()) {
    CAPTURE(p.name);
    CHECK(p.tensor.has_grad());
    CHECK(p.tensor.grad().abs().maxCoeff() > 0.0);
  }
  std::vector<Tensor<double>> params;
  for (auto& p : net.parameters()) params.push_back(p.tensor);
  const Array<double> before = net.block1().windows().values();
  grad::AdamState<double> state;
  grad::adam_step<double>(params, state);
  CHECK(max_abs_diff(net.block1().windows().values(), before) > 0.0);
  CHECK((net.block1().carrier() - carrier).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("config validation and json round trip") {
  auto cfg = IConNetConfig::tiny();
  cfg.block1.kernel_len = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = IConNetConfig::tiny();
  cfg.block1.pool = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = IConNetConfig{};
  cfg.seed = 99;
  cfg.ffn_hidden = {7};
  const auto back = iconnet_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  MfccFfnConfig m;
  m.mfcc.n_coefficients = 13;
  CHECK(to_json(mfcc_ffn_config_from_json(to_json(m))) == to_json(m));
}

TEST_CASE("mfcc baseline standardises with population statistics") {
  MfccFfnConfig cfg;
  cfg.segment_samples = 16000;
  MfccFfn<double> net(cfg);
  std::vector<Eigen::VectorXd> raw{Eigen::VectorXd::Constant(80, 1.0), Eigen::VectorXd::Constant(80, 3.0)};
  raw[1][5] = 1.0;
  net.fit_standardizer(raw);
  CHECK(net.feature_mean()[0] == doctest::Approx(2.0));
  CHECK(net.feature_std()[0] == doctest::Approx(1.0));
  CHECK(net.feature_std()[5] == 1.0);
  CHECK(net.standardize(raw[1])[0] == doctest::Approx(1.0));
  std::vector<double> seg(16000, 0.0);
  for (std::size_t t = 0; t < seg.size(); ++t) seg[t] = std::sin(0.1 * t);
  CHECK(net.raw_features(seg).size() == 80);
  Tape<double> tape(false);
  CHECK_THROWS_AS(net.forward(tape, Tensor<double>::zeros({2, 79})), ShapeError);
  CHECK(net.forward(tape, Tensor<double>::zeros({2, 80})).shape() == grad::Shape{2, 2});
}
