#include "doctest.h"

#include <algorithm>
#include <fstream>
#include <set>

#include "iconnet/errors.hpp"
#include "iconnet/experiment.hpp"
#include "test_util.hpp"

using namespace iconnet;
using namespace iconnet::experiment;
using audio::DatasetManifest;
using audio::Label;

namespace {

DatasetManifest fake_manifest(int normal, int abnormal) {
  std::vector<audio::ManifestEntry> entries;
  for (int i = 0; i < normal + abnormal; ++i) {
    audio::ManifestEntry e;
    e.id = "r" + std::to_string(10000 + i);
    e.label = i < normal ? Label::Normal : Label::Abnormal;
    entries.push_back(e);
  }
  return DatasetManifest(std::move(entries), audio::DatasetSource::PhysioNet2016);
}

std::size_t count_label(const DatasetManifest& m, const std::vector<std::string>& ids, Label label) {
  return static_cast<std::size_t>(
      std::count_if(ids.begin(), ids.end(), [&](const std::string& id) { return m.at(id).label == label; }));
}

TrainConfig tiny_train_config() {
  TrainConfig t;
  t.epochs_max = 3;
  t.batch_size = 8;
  t.micro_batch = 4;
  t.lr = 1e-2;
  t.patience = 5;
  t.seed = 21;
  t.segment_samples = 2000;
  t.hop_samples = 8000;
  return t;
}

}  // namespace

TEST_CASE("stratified folds match the corpus class counts") {
  const auto m = fake_manifest(2575, 665);
  const auto folds = stratified_kfold(m, 4, 1);
  REQUIRE(folds.size() == 4);
  std::multiset<std::size_t> normal, abnormal;
  std::set<std::string> all_test;
  for (const auto& f : folds) {
    normal.insert(count_label(m, f.test_ids, Label::Normal));
    abnormal.insert(count_label(m, f.test_ids, Label::Abnormal));
    all_test.insert(f.test_ids.begin(), f.test_ids.end());
    std::set<std::string> seen(f.train_ids.begin(), f.train_ids.end());
    for (const auto* side : {&f.validation_ids, &f.test_ids}) {
      for (const auto& id : *side) CHECK(seen.insert(id).second);
    }
    CHECK(seen.size() == m.size());
    const double val_share = static_cast<double>(f.validation_ids.size()) /
                             static_cast<double>(f.train_ids.size() + f.validation_ids.size());
    CHECK(val_share == doctest::Approx(0.1).epsilon(0.01));
  }
  CHECK(normal == std::multiset<std::size_t>{643, 644, 644, 644});
  CHECK(abnormal == std::multiset<std::size_t>{166, 166, 166, 167});
  CHECK(all_test.size() == m.size());
}

TEST_CASE("fold assignment is deterministic in the seed") {
  const auto m = fake_manifest(40, 12);
  const auto a = stratified_kfold(m, 4, 7);
  const auto b = stratified_kfold(m, 4, 7);
  const auto c = stratified_kfold(m, 4, 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].test_ids == b[i].test_ids);
    CHECK(a[i].validation_ids == b[i].validation_ids);
  }
  CHECK(a[0].test_ids != c[0].test_ids);
}

TEST_CASE("fold configuration errors") {
  CHECK_THROWS_AS(stratified_kfold(fake_manifest(10, 3), 4, 1), ConfigError);
  CHECK_THROWS_AS(stratified_kfold(fake_manifest(10, 10), 1, 1), ConfigError);
  CHECK_THROWS_AS(stratified_kfold(fake_manifest(10, 10), 2, 1, 1.0), ConfigError);
  TrainConfig t;
  t.patience = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("metrics from a confusion matrix") {
  ConfusionMatrix cm;
  cm.counts = {{{8, 2}, {1, 9}}};
  const auto m = compute_metrics(cm);
  CHECK(m.recall_normal == doctest::Approx(0.8));
  CHECK(m.recall_abnormal == doctest::Approx(0.9));
  CHECK(m.ua == doctest::Approx(0.85));
  CHECK(m.f1_abnormal == doctest::Approx(18.0 / 21.0));
  CHECK(m.f1_normal == doctest::Approx(16.0 / 19.0));
  CHECK(m.f1_macro == doctest::Approx(0.5 * (18.0 / 21.0 + 16.0 / 19.0)));
  CHECK(m.f1_weighted == doctest::Approx(m.f1_macro));

  ConfusionMatrix skew;
  skew.counts = {{{30, 0}, {5, 5}}};
  const auto s = compute_metrics(skew);
  CHECK(s.ua == doctest::Approx(0.75));
  CHECK(s.f1_weighted == doctest::Approx((30.0 * 60.0 / 65.0 + 10.0 * 10.0 / 15.0) / 40.0));

  ConfusionMatrix one_class;
  one_class.add(Label::Normal, Label::Normal);
  one_class.add(Label::Normal, Label::Abnormal);
  CHECK(compute_metrics(one_class).ua == doctest::Approx(0.5));
  CHECK(one_class.total() == 2);
  CHECK_THROWS_AS(compute_metrics(ConfusionMatrix{}), ArgumentError);
}

TEST_CASE("UA ignores class proportions but accuracy would not") {
  ConfusionMatrix a, b;
  a.counts = {{{8, 2}, {3, 7}}};
  b.counts = {{{80, 20}, {3, 7}}};
  CHECK(compute_metrics(a).ua == doctest::Approx(compute_metrics(b).ua));
}

TEST_CASE("segment probabilities are averaged before the decision") {
  grad::RowMatrix<double> p(2, 2);
  p << 0.6, 0.4, 0.3, 0.7;
  const auto agg = aggregate_segments(p);
  CHECK(agg[0] == doctest::Approx(0.45));
  CHECK(agg[1] == doctest::Approx(0.55));
  CHECK(decide(agg) == Label::Abnormal);
  CHECK(decide({0.5, 0.5}) == Label::Normal);
  CHECK_THROWS_AS(aggregate_segments(grad::RowMatrix<double>(0, 2)), ShapeError);
}

TEST_CASE("training config json round trip") {
  TrainConfig t = tiny_train_config();
  t.class_weights = ClassWeighting::Uniform;
  CHECK(to_json(train_config_from_json(to_json(t))) == to_json(t));
}

TEST_CASE("results csv has one row per fold plus mean and std") {
  test::TempDir dir;
  CvResult r;
  r.model = "iconnet";
  for (int f = 0; f < 2; ++f) {
    FoldResult fr;
    fr.fold_index = f;
    fr.report.confusion.counts = {{{5, 0}, {0, 5}}};
    fr.report.metrics = compute_metrics(fr.report.confusion);
    r.folds.push_back(fr);
  }
  r.ua = {1.0, 0.0};
  write_results_csv({r}, dir.path() / "results.csv");
  std::ifstream in(dir.path() / "results.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "model,fold,ua,f1_abnormal,f1_macro,f1_weighted,n_test");
  CHECK(lines[1].rfind("iconnet,0,1.000000", 0) == 0);
  CHECK(lines[3].rfind("iconnet,mean,", 0) == 0);
  CHECK(lines[4].rfind("iconnet,std,", 0) == 0);
}

TEST_CASE("scoring uses whole non-overlapping windows and pads only short recordings") {
  const model::AnyModel m = model::IConNet<float>(model::IConNetConfig::tiny());
  std::vector<float> signal(4500, 0.1f);
  const auto s = score_signal(m, signal);
  CHECK(s.offsets == std::vector<std::size_t>{0, 2000});
  CHECK(s.segment_probabilities.rows() == 2);
  CHECK(s.probability[0] + s.probability[1] == doctest::Approx(1.0));
  const std::vector<float> short_signal(1500, 0.1f);
  CHECK(score_signal(m, short_signal).offsets == std::vector<std::size_t>{0});
  CHECK_THROWS_AS(score_signal(m, std::vector<float>{}), ArgumentError);
}

TEST_CASE("zero learning rate leaves the initial model in place") {
  const auto manifest = audio::generate_synthetic(3, 2);
  const PreparedCorpus corpus(manifest, 16000);
  const auto folds = stratified_kfold(manifest, 2, 3);
  auto t = tiny_train_config();
  t.lr = 0.0;
  t.epochs_max = 2;
  const auto trained = train_fold(model::IConNetConfig::tiny(), corpus, folds[0], t);
  REQUIRE(trained.history.epochs.size() == 2);
  CHECK(trained.history.epochs[1].train_loss == doctest::Approx(trained.history.epochs[0].train_loss).epsilon(1e-5));
  const auto& net = std::get<model::IConNet<float>>(trained.model);
  const model::IConNet<float> fresh(model::IConNetConfig::tiny());
  CHECK((net.block1().windows().values() == fresh.block1().windows().values()).all());
  CHECK((net.block2().windows().values() == fresh.block2().windows().values()).all());
}

TEST_CASE("training is reproducible and moves the filters") {
  const auto manifest = audio::generate_synthetic(4, 2);
  const PreparedCorpus corpus(manifest, 16000);
  const auto folds = stratified_kfold(manifest, 2, 4);
  const auto t = tiny_train_config();
  const auto a = train_fold(model::IConNetConfig::tiny(), corpus, folds[1], t);
  const auto b = train_fold(model::IConNetConfig::tiny(), corpus, folds[1], t);
  REQUIRE(a.history.epochs.size() == b.history.epochs.size());
  for (std::size_t i = 0; i < a.history.epochs.size(); ++i) {
    CHECK(a.history.epochs[i].train_loss == b.history.epochs[i].train_loss);
    CHECK(a.history.epochs[i].validation_ua == b.history.epochs[i].validation_ua);
  }
  const auto& net = std::get<model::IConNet<float>>(a.model);
  const model::IConNet<float> fresh(model::IConNetConfig::tiny());
  double largest = 0.0;
  for (int k = 0; k < net.block1().n_kernels(); ++k) {
    const auto before = dsp::frequency_response_db(fresh.block1().effective_kernels().row(k).transpose(), 1024, 16000, true);
    const auto after = dsp::frequency_response_db(net.block1().effective_kernels().row(k).transpose(), 1024, 16000, true);
    largest = std::max(largest, (after.magnitude_db - before.magnitude_db).cwiseAbs().maxCoeff());
  }
  CHECK(largest > 3.0);
  CHECK(a.history.best_epoch >= 1);
}

TEST_CASE("segment length must match the model") {
  const auto manifest = audio::generate_synthetic(5, 2);
  const PreparedCorpus corpus(manifest, 16000);
  const auto folds = stratified_kfold(manifest, 2, 5);
  auto t = tiny_train_config();
  t.segment_samples = 4000;
  CHECK_THROWS_AS(train_fold(model::IConNetConfig::tiny(), corpus, folds[0], t), ConfigError);
  FoldSplit empty;
  const model::AnyModel m = model::IConNet<float>(model::IConNetConfig::tiny());
  CHECK_THROWS_AS(evaluate_fold(m, corpus, empty), ArgumentError);
}

TEST_CASE("mfcc baseline separates the synthetic corpus") {
  const auto manifest = audio::generate_synthetic(6, 12);
  const PreparedCorpus corpus(manifest, 16000);
  const auto folds = stratified_kfold(manifest, 4, 6);
  TrainConfig t;
  t.epochs_max = 30;
  t.batch_size = 8;
  t.lr = 3e-3;
  t.patience = 10;
  t.seed = 6;
  const auto cv = cross_validate(model::MfccFfnConfig{}, corpus, folds, t);
  CHECK(cv.folds.size() == 4);
  CHECK(cv.ua.mean > 0.9);
}
