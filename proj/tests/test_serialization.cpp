#include "doctest.h"

#include <cstring>
#include <fstream>

#include "iconnet/errors.hpp"
#include "iconnet/rng.hpp"
#include "iconnet/serialization.hpp"
#include "test_util.hpp"

using namespace iconnet;
using namespace iconnet::model;
using grad::Array;
using grad::Tape;
using grad::Tensor;

namespace {

Tensor<float> fixed_input(Index batch, Index n) {
  Rng rng(42);
  Array<float> v(batch * n);
  for (auto& x : v) x = static_cast<float>(0.3 * rng.normal());
  return Tensor<float>({batch, 1, n}, std::move(v));
}

IConNet<float> perturbed_tiny() {
  auto cfg = IConNetConfig::tiny();
  cfg.seed = 12;
  IConNet<float> net(cfg);
  Rng rng(13);
  for (auto& v : net.block1().windows().values()) v += static_cast<float>(0.1 * rng.normal());
  return net;
}

Array<float> logits_of(const AnyModel& m, const Tensor<float>& x) {
  Tape<float> tape(false);
  return std::get<IConNet<float>>(m).forward(tape, x).values();
}

}  // namespace

TEST_CASE("save and load give bit-identical logits") {
  test::TempDir dir;
  const AnyModel model = perturbed_tiny();
  ModelInfo info;
  info.provenance = {{"seed", 12}};
  info.metrics = {{"ua", 0.91}};
  save_model(model, dir.path() / "m.icon", info);
  const auto loaded = load_model(dir.path() / "m.icon");
  const auto x = fixed_input(3, 2000);
  const auto a = logits_of(model, x);
  const auto b = logits_of(loaded.model, x);
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);
  CHECK(loaded.info.provenance == info.provenance);
  CHECK(loaded.info.metrics == info.metrics);
  CHECK(loaded.metadata.at("kind") == "iconnet");
  CHECK(encode_model(loaded.model, loaded.info) == encode_model(model, info));
  CHECK_FALSE(std::filesystem::exists(dir.path() / "m.icon.tmp"));
}

TEST_CASE("mfcc baseline round trip keeps the standardiser") {
  MfccFfnConfig cfg;
  cfg.seed = 5;
  MfccFfn<float> net(cfg);
  Eigen::VectorXd mean = Eigen::VectorXd::LinSpaced(80, -1.0, 1.0);
  Eigen::VectorXd sd = Eigen::VectorXd::LinSpaced(80, 0.5, 2.0);
  net.set_standardizer(mean, sd);
  const auto loaded = decode_model(encode_model(net));
  const auto& back = std::get<MfccFfn<float>>(loaded.model);
  CHECK(back.feature_mean() == mean);
  CHECK(back.feature_std() == sd);
  CHECK(loaded.metadata.at("kind") == "mfcc-ffn");
  Tape<float> tape(false);
  Tensor<float> x({1, 80}, Array<float>::Constant(80, 0.25f));
  const auto a = net.forward(tape, x).values();
  const auto b = back.forward(tape, x).values();
  CHECK((a == b).all());
}

TEST_CASE("every truncation is rejected with an offset") {
  const std::string bytes = encode_model(perturbed_tiny());
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    CAPTURE(n);
    try {
      decode_model(bytes.substr(0, n));
      FAIL("truncated model accepted");
    } catch (const CorruptModelError& e) {
      CHECK(e.offset() <= n);
    }
  }
  CHECK_THROWS_AS(decode_model(bytes + "x"), CorruptModelError);
}

TEST_CASE("bad magic, version and metadata are reported") {
  std::string bytes = encode_model(perturbed_tiny());
  std::string bad = bytes;
  bad[0] = 'X';
  try {
    decode_model(bad);
    FAIL("bad magic accepted");
  } catch (const CorruptModelError& e) {
    CHECK(e.offset() == 0);
  }
  bad = bytes;
  bad[4] = 9;
  try {
    decode_model(bad);
    FAIL("bad version accepted");
  } catch (const CorruptModelError& e) {
    CHECK(e.offset() == 4);
  }
  bad = bytes;
  bad[12] = '#';
  CHECK_THROWS_AS(decode_model(bad), CorruptModelError);
}

TEST_CASE("a failed load leaves no partial state and an existing file intact") {
  test::TempDir dir;
  const AnyModel model = perturbed_tiny();
  const auto path = dir.path() / "good.icon";
  save_model(model, path);
  const std::string bytes = encode_model(model);
  {
    std::ofstream f(dir.path() / "cut.icon", std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_model(dir.path() / "cut.icon"), CorruptModelError);
  const auto again = load_model(path);
  const auto x = fixed_input(1, 2000);
  CHECK((logits_of(again.model, x) == logits_of(model, x)).all());
  CHECK_THROWS_AS(load_model(dir.path() / "absent.icon"), IoError);
}

TEST_CASE("file size is dominated by the float payload") {
  const IConNet<float> net(IConNetConfig{});
  const auto size = encode_model(net).size();
  const auto payload = static_cast<std::size_t>(net.count_params().total) * 4;
  CHECK(size > payload);
  CHECK(size < payload + 8192);
}
