#include "iconnet/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

#include "iconnet/errors.hpp"
#include "iconnet/rng.hpp"

namespace iconnet::experiment {

namespace {

using grad::Index;
using grad::Tensor;
using model::IConNet;
using model::MfccFfn;

int segment_length(const model::AnyModel& m) {
  return std::visit([](const auto& x) { return x.config().segment_samples; }, m);
}

void copy_segment(std::span<const float> signal, std::size_t offset, std::size_t len, float* dst) {
  const std::size_t avail = offset < signal.size() ? std::min(len, signal.size() - offset) : 0;
  std::copy_n(signal.data() + offset, avail, dst);
  std::fill(dst + avail, dst + len, 0.0f);
}

std::vector<double> segment_as_double(std::span<const float> signal, std::size_t offset, std::size_t len) {
  std::vector<float> tmp(len);
  copy_segment(signal, offset, len, tmp.data());
  return {tmp.begin(), tmp.end()};
}

Tensor<float> feature_batch(const std::vector<Eigen::VectorXd>& rows) {
  const Index d = rows.front().size();
  grad::Array<float> values(static_cast<Index>(rows.size()) * d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (Index j = 0; j < d; ++j) values[static_cast<Index>(r) * d + j] = static_cast<float>(rows[r][j]);
  }
  return Tensor<float>({static_cast<Index>(rows.size()), d}, std::move(values));
}

double population_std(const std::vector<double>& v, double mean) {
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

SummaryStat summarize(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  return {mean, population_std(v, mean)};
}

}  // namespace

std::string model_name(const ModelConfig& config) {
  return std::holds_alternative<model::IConNetConfig>(config) ? "iconnet" : "mfcc-ffn";
}

std::string model_name(const model::AnyModel& m) {
  return std::holds_alternative<IConNet<float>>(m) ? "iconnet" : "mfcc-ffn";
}

std::vector<FoldSplit> stratified_kfold(const audio::DatasetManifest& manifest, int k, std::uint64_t seed,
                                        double validation_fraction) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation fraction must lie in [0, 1)");
  }
  std::map<Label, std::vector<std::string>> by_class;
  for (const auto& e : manifest.entries()) by_class[e.label].push_back(e.id);
  for (auto& [label, ids] : by_class) {
    if (ids.size() < static_cast<std::size_t>(k)) {
      throw ConfigError(std::string("class ") + audio::label_name(label) + " has " + std::to_string(ids.size()) +
                        " recordings, fewer than k = " + std::to_string(k));
    }
  }

  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  std::vector<std::map<Label, std::vector<std::string>>> members(folds.size());
  for (auto& [label, ids] : by_class) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(label)));
    rng.shuffle(ids.begin(), ids.end());
    for (std::size_t i = 0; i < ids.size(); ++i) members[i % folds.size()][label].push_back(ids[i]);
  }

  for (std::size_t f = 0; f < folds.size(); ++f) {
    auto& fold = folds[f];
    fold.fold_index = static_cast<int>(f);
    for (const auto& [label, ids] : members[f]) fold.test_ids.insert(fold.test_ids.end(), ids.begin(), ids.end());
    for (const auto& [label, _] : by_class) {
      std::vector<std::string> train;
      for (std::size_t g = 0; g < folds.size(); ++g) {
        if (g == f) continue;
        const auto& ids = members[g][label];
        train.insert(train.end(), ids.begin(), ids.end());
      }
      std::sort(train.begin(), train.end());
      Rng rng(derive_seed(seed, 1000 + 10 * f + static_cast<std::uint64_t>(label)));
      rng.shuffle(train.begin(), train.end());
      std::size_t n_val = static_cast<std::size_t>(std::lround(validation_fraction * static_cast<double>(train.size())));
      if (validation_fraction > 0.0 && n_val == 0 && train.size() >= 2) n_val = 1;
      fold.validation_ids.insert(fold.validation_ids.end(), train.begin(), train.begin() + n_val);
      fold.train_ids.insert(fold.train_ids.end(), train.begin() + n_val, train.end());
    }
    std::sort(fold.train_ids.begin(), fold.train_ids.end());
    std::sort(fold.validation_ids.begin(), fold.validation_ids.end());
    std::sort(fold.test_ids.begin(), fold.test_ids.end());
  }
  return folds;
}

void TrainConfig::validate() const {
  if (epochs_max < 1 || batch_size < 1 || micro_batch < 1 || patience < 1) {
    throw ConfigError("epochs_max, batch_size, micro_batch and patience must be positive");
  }
  if (!(lr >= 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0)) {
    throw ConfigError("invalid optimizer settings");
  }
  if (sample_rate_hz <= 0 || segment_samples < 1 || hop_samples < 1) {
    throw ConfigError("sample rate, segment and hop lengths must be positive");
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs_max", c.epochs_max},
          {"batch_size", c.batch_size},
          {"micro_batch", c.micro_batch},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"class_weights", c.class_weights == ClassWeighting::InverseFrequency ? "inverse-frequency" : "uniform"},
          {"patience", c.patience},
          {"seed", c.seed},
          {"sample_rate_hz", c.sample_rate_hz},
          {"segment_samples", c.segment_samples},
          {"hop_samples", c.hop_samples}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs_max = j.at("epochs_max").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.micro_batch = j.at("micro_batch").get<int>();
  c.lr = j.at("lr").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  const auto w = j.at("class_weights").get<std::string>();
  if (w != "inverse-frequency" && w != "uniform") throw ConfigError("unknown class weighting '" + w + "'");
  c.class_weights = w == "uniform" ? ClassWeighting::Uniform : ClassWeighting::InverseFrequency;
  c.patience = j.at("patience").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.sample_rate_hz = j.at("sample_rate_hz").get<int>();
  c.segment_samples = j.at("segment_samples").get<int>();
  c.hop_samples = j.at("hop_samples").get<int>();
  c.validate();
  return c;
}

void ConfusionMatrix::add(Label truth, Label predicted) {
  ++counts[static_cast<int>(truth)][static_cast<int>(predicted)];
}

std::uint64_t ConfusionMatrix::total() const {
  return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1];
}

Metrics compute_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ArgumentError("cannot compute metrics from an empty confusion matrix");
  std::array<double, 2> recall{}, f1{}, support{};
  int classes_present = 0;
  double recall_sum = 0.0;
  for (int c = 0; c < 2; ++c) {
    const double tp = static_cast<double>(cm.counts[c][c]);
    const double fn = static_cast<double>(cm.counts[c][1 - c]);
    const double fp = static_cast<double>(cm.counts[1 - c][c]);
    support[c] = tp + fn;
    recall[c] = support[c] > 0 ? tp / support[c] : 0.0;
    f1[c] = (2 * tp + fp + fn) > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
    if (support[c] > 0) {
      ++classes_present;
      recall_sum += recall[c];
    }
  }
  Metrics m;
  m.recall_normal = recall[0];
  m.recall_abnormal = recall[1];
  // A class absent from the truth has no recall; average over the classes present.
  m.ua = recall_sum / classes_present;
  m.f1_normal = f1[0];
  m.f1_abnormal = f1[1];
  m.f1_macro = 0.5 * (f1[0] + f1[1]);
  m.f1_weighted = (support[0] * f1[0] + support[1] * f1[1]) / (support[0] + support[1]);
  return m;
}

std::array<double, 2> aggregate_segments(const grad::RowMatrix<double>& p) {
  if (p.rows() == 0 || p.cols() != 2) throw ShapeError("aggregation needs a non-empty [segments x 2] matrix");
  const Eigen::RowVectorXd mean = p.colwise().mean();
  return {mean[0], mean[1]};
}

Label decide(const std::array<double, 2>& probability) {
  return probability[1] > probability[0] ? Label::Abnormal : Label::Normal;
}

std::vector<float> prepare_signal(const audio::Waveform& waveform, int target_rate_hz) {
  audio::Waveform w = waveform;
  audio::peak_normalize(w.samples);
  if (w.sample_rate_hz != target_rate_hz) w = audio::resample(w, target_rate_hz);
  return {w.samples.begin(), w.samples.end()};
}

PreparedCorpus::PreparedCorpus(const audio::DatasetManifest& manifest, int target_rate_hz,
                               std::size_t cache_budget_bytes)
    : manifest_(manifest), target_rate_hz_(target_rate_hz) {
  if (target_rate_hz <= 0) throw ConfigError("target sample rate must be positive");
  double projected = 0.0;
  for (std::size_t i = 0; i < manifest_.size(); ++i) {
    auto rec = manifest_.load(i);
    audio::peak_normalize(rec.waveform.samples);
    projected += static_cast<double>(rec.waveform.samples.size()) * target_rate_hz / rec.waveform.sample_rate_hz *
                 sizeof(float);
    sources_.push_back(std::move(rec.waveform));
  }
  cache_.resize(sources_.size());
  if (projected <= static_cast<double>(cache_budget_bytes)) {
    for (std::size_t i = 0; i < sources_.size(); ++i) {
      cache_[i] = std::make_shared<const std::vector<float>>(prepare_signal(sources_[i], target_rate_hz_));
      sources_[i] = audio::Waveform{};
    }
  }
}

std::size_t PreparedCorpus::index_of(const std::string& id) const {
  const auto idx = manifest_.index_of(id);
  if (!idx) throw ArgumentError("recording '" + id + "' is not in the corpus");
  return *idx;
}

std::shared_ptr<const std::vector<float>> PreparedCorpus::signal(std::size_t index) const {
  if (index >= cache_.size()) throw ArgumentError("recording index out of range");
  if (cache_[index]) return cache_[index];
  return std::make_shared<const std::vector<float>>(prepare_signal(sources_[index], target_rate_hz_));
}

RecordingScore score_signal(const model::AnyModel& m, std::span<const float> signal, int batch) {
  if (signal.empty()) throw ArgumentError("cannot score an empty signal");
  const auto len = static_cast<std::size_t>(segment_length(m));
  RecordingScore score;
  // Same rule as training: whole windows only, unless the recording is shorter than one.
  score.offsets = audio::segment_offsets(signal.size(), len, len, audio::PadPolicy::DropLast);
  if (score.offsets.empty()) score.offsets.push_back(0);
  const auto n = static_cast<Index>(score.offsets.size());
  score.segment_probabilities.resize(n, 2);
  grad::Tape<float> tape(false);
  for (Index start = 0; start < n; start += batch) {
    const Index b = std::min<Index>(batch, n - start);
    Tensor<float> logits;
    if (const auto* net = std::get_if<IConNet<float>>(&m)) {
      grad::Array<float> values(b * static_cast<Index>(len));
      for (Index i = 0; i < b; ++i) copy_segment(signal, score.offsets[start + i], len, values.data() + i * len);
      logits = net->forward(tape, Tensor<float>({b, 1, static_cast<Index>(len)}, std::move(values)));
    } else {
      const auto& base = std::get<MfccFfn<float>>(m);
      std::vector<Eigen::VectorXd> rows;
      for (Index i = 0; i < b; ++i) {
        const auto seg = segment_as_double(signal, score.offsets[start + i], len);
        rows.push_back(base.standardize(base.raw_features(seg)));
      }
      logits = base.forward(tape, feature_batch(rows));
    }
    score.segment_probabilities.middleRows(start, b) = grad::softmax_rows(logits);
  }
  score.probability = aggregate_segments(score.segment_probabilities);
  score.label = decide(score.probability);
  return score;
}

RecordingScore score_waveform(const model::AnyModel& m, const audio::Waveform& waveform) {
  waveform.validate();
  const int rate = std::visit(
      [](const auto& x) {
        using M = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<M, IConNet<float>>) {
          return x.config().sample_rate_hz;
        } else {
          return x.config().mfcc.sample_rate_hz;
        }
      },
      m);
  const auto signal = prepare_signal(waveform, rate);
  return score_signal(m, signal);
}

MetricsReport evaluate_recordings(const model::AnyModel& m, const PreparedCorpus& corpus,
                                  const std::vector<std::string>& ids) {
  if (ids.empty()) throw ArgumentError("no recordings to evaluate");
  MetricsReport report;
  for (const auto& id : ids) {
    const auto idx = corpus.index_of(id);
    const auto signal = corpus.signal(idx);
    const auto score = score_signal(m, *signal);
    RecordingPrediction p;
    p.id = id;
    p.truth = corpus.label(idx);
    p.predicted = score.label;
    p.probability = score.probability;
    p.n_segments = score.offsets.size();
    report.confusion.add(p.truth, p.predicted);
    report.predictions.push_back(std::move(p));
  }
  report.metrics = compute_metrics(report.confusion);
  return report;
}

MetricsReport evaluate_fold(const model::AnyModel& m, const PreparedCorpus& corpus, const FoldSplit& fold) {
  if (fold.test_ids.empty()) throw ArgumentError("fold " + std::to_string(fold.fold_index) + " has no test recordings");
  return evaluate_recordings(m, corpus, fold.test_ids);
}

namespace {

struct SegmentRef {
  std::size_t recording = 0;
  std::size_t offset = 0;
  int label = 0;
};

// Batches come from the training recordings only; the model-specific part is
// how a list of segments becomes an input tensor.
template <typename Model>
class BatchSource;

template <>
class BatchSource<IConNet<float>> {
 public:
  BatchSource(IConNet<float>&, const PreparedCorpus& corpus, const std::vector<SegmentRef>&, std::size_t len)
      : corpus_(corpus), len_(len) {}

  Tensor<float> inputs(const std::vector<SegmentRef>& refs, std::span<const std::size_t> picks) const {
    const auto b = static_cast<Index>(picks.size());
    grad::Array<float> values(b * static_cast<Index>(len_));
    for (Index i = 0; i < b; ++i) {
      const auto& r = refs[picks[i]];
      copy_segment(*corpus_.signal(r.recording), r.offset, len_, values.data() + i * len_);
    }
    return Tensor<float>({b, 1, static_cast<Index>(len_)}, std::move(values));
  }

 private:
  const PreparedCorpus& corpus_;
  std::size_t len_;
};

template <>
class BatchSource<MfccFfn<float>> {
 public:
  BatchSource(MfccFfn<float>& model, const PreparedCorpus& corpus, const std::vector<SegmentRef>& refs,
              std::size_t len) {
    std::vector<Eigen::VectorXd> raw;
    for (const auto& r : refs) raw.push_back(model.raw_features(segment_as_double(*corpus.signal(r.recording), r.offset, len)));
    model.fit_standardizer(raw);
    for (const auto& f : raw) features_.push_back(model.standardize(f));
  }

  Tensor<float> inputs(const std::vector<SegmentRef>&, std::span<const std::size_t> picks) const {
    std::vector<Eigen::VectorXd> rows;
    for (auto p : picks) rows.push_back(features_[p]);
    return feature_batch(rows);
  }

 private:
  std::vector<Eigen::VectorXd> features_;
};

std::string parameter_norms(const std::vector<model::NamedTensor<float>>& params) {
  std::string out;
  for (const auto& p : params) {
    const double norm = p.tensor.values().template cast<double>().matrix().norm();
    out += " " + p.name + "=" + std::to_string(norm);
  }
  return out;
}

double weighted_log_loss(const std::vector<RecordingPrediction>& predictions, const std::vector<double>& weights) {
  double total = 0.0, weight = 0.0;
  for (const auto& p : predictions) {
    const auto truth = static_cast<std::size_t>(p.truth);
    total += weights[truth] * -std::log(std::max(p.probability[truth], 1e-12));
    weight += weights[truth];
  }
  return weight > 0.0 ? total / weight : 0.0;
}

template <typename Model>
TrainedModel train_impl(Model model, const PreparedCorpus& corpus, const FoldSplit& fold, const TrainConfig& cfg,
                        const ProgressFn& progress) {
  const auto len = static_cast<std::size_t>(cfg.segment_samples);
  const std::uint64_t fold_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(fold.fold_index));

  std::vector<SegmentRef> refs;
  std::array<double, 2> n_recordings{};
  for (const auto& id : fold.train_ids) {
    const auto idx = corpus.index_of(id);
    const int label = static_cast<int>(corpus.label(idx));
    n_recordings[label] += 1;
    const auto n = corpus.signal(idx)->size();
    auto offsets = audio::segment_offsets(n, len, static_cast<std::size_t>(cfg.hop_samples), audio::PadPolicy::DropLast);
    if (offsets.empty()) offsets.push_back(0);  // shorter than one window: a single zero-padded segment
    for (auto o : offsets) refs.push_back({idx, o, label});
  }
  if (refs.empty()) throw ArgumentError("fold " + std::to_string(fold.fold_index) + " has no training recordings");

  TrainingHistory history;
  if (cfg.class_weights == ClassWeighting::InverseFrequency) {
    const double most = std::max(n_recordings[0], n_recordings[1]);
    for (int c = 0; c < 2; ++c) history.class_weights[c] = n_recordings[c] > 0 ? most / n_recordings[c] : 1.0;
  }
  const std::vector<double> weights(history.class_weights.begin(), history.class_weights.end());

  BatchSource<Model> source(model, corpus, refs, len);
  const auto params = model.parameters();
  std::vector<Tensor<float>> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);
  grad::AdamState<float> adam;
  adam.lr = cfg.lr;
  adam.beta1 = cfg.beta1;
  adam.beta2 = cfg.beta2;
  adam.eps = cfg.adam_eps;

  const auto& monitor_ids = fold.validation_ids.empty() ? fold.train_ids : fold.validation_ids;
  std::optional<Model> best;
  int since_best = 0;
  std::vector<std::size_t> order(refs.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs_max; ++epoch) {
    Rng rng(derive_seed(fold_seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0, weight_sum = 0.0;
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::span<const std::size_t> batch(order.data() + start,
                                               std::min<std::size_t>(cfg.batch_size, order.size() - start));
      double batch_weight = 0.0;
      for (auto i : batch) batch_weight += weights[refs[i].label];
      for (auto& t : tensors) t.zero_grad();
      double batch_loss = 0.0;
      try {
        for (std::size_t m0 = 0; m0 < batch.size(); m0 += cfg.micro_batch) {
          const auto micro = batch.subspan(m0, std::min<std::size_t>(cfg.micro_batch, batch.size() - m0));
          std::vector<int> targets;
          double micro_weight = 0.0;
          for (auto i : micro) {
            targets.push_back(refs[i].label);
            micro_weight += weights[refs[i].label];
          }
          grad::Tape<float> tape;
          const auto logits = model.forward(tape, source.inputs(refs, micro));
          const auto loss = grad::weighted_cross_entropy(tape, logits, std::span<const int>(targets), weights);
          const auto scaled = grad::scale(tape, loss, static_cast<float>(micro_weight / batch_weight));
          tape.backward(scaled);
          batch_loss += static_cast<double>(loss.item()) * micro_weight;
        }
      } catch (const NumericError& e) {
        throw TrainingError("non-finite values at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index) + " (" + e.what() + "); parameter norms:" +
                            parameter_norms(params));
      }
      if (!std::isfinite(batch_loss)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index) + "; parameter norms:" + parameter_norms(params));
      }
      grad::adam_step(std::span<Tensor<float>>(tensors), adam);
      loss_sum += batch_loss;
      weight_sum += batch_weight;
    }
    for (auto& t : tensors) t.zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / weight_sum;
    const auto monitored = evaluate_recordings(model::AnyModel(model), corpus, monitor_ids);
    rec.validation_ua = monitored.metrics.ua;
    rec.validation_loss = weighted_log_loss(monitored.predictions, weights);
    history.epochs.push_back(rec);
    if (progress) progress(fold.fold_index, rec);

    // Ties in UA are common on small validation sets; the lower loss wins them.
    const bool better = rec.validation_ua > history.best_validation_ua ||
                        (rec.validation_ua == history.best_validation_ua &&
                         rec.validation_loss < history.best_validation_loss);
    if (better) {
      history.best_validation_ua = rec.validation_ua;
      history.best_validation_loss = rec.validation_loss;
      history.best_epoch = epoch;
      best = model;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      history.stopped_early = epoch < cfg.epochs_max;
      break;
    }
  }
  return TrainedModel{model::AnyModel(std::move(*best)), std::move(history)};
}

}  // namespace

TrainedModel train_fold(const ModelConfig& config, const PreparedCorpus& corpus, const FoldSplit& fold,
                        const TrainConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  if (corpus.sample_rate_hz() != cfg.sample_rate_hz) {
    throw ConfigError("corpus is prepared at " + std::to_string(corpus.sample_rate_hz()) + " Hz but training expects " +
                      std::to_string(cfg.sample_rate_hz) + " Hz");
  }
  const std::uint64_t init_seed = derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(fold.fold_index)), 7);
  if (const auto* c = std::get_if<model::IConNetConfig>(&config)) {
    if (c->segment_samples != cfg.segment_samples || c->sample_rate_hz != cfg.sample_rate_hz) {
      throw ConfigError("model and training disagree on segment length or sample rate");
    }
    auto mc = *c;
    mc.seed = init_seed;
    return train_impl(IConNet<float>(mc), corpus, fold, cfg, progress);
  }
  auto mc = std::get<model::MfccFfnConfig>(config);
  if (mc.segment_samples != cfg.segment_samples || mc.mfcc.sample_rate_hz != cfg.sample_rate_hz) {
    throw ConfigError("model and training disagree on segment length or sample rate");
  }
  mc.seed = init_seed;
  return train_impl(MfccFfn<float>(mc), corpus, fold, cfg, progress);
}

CvResult cross_validate(const ModelConfig& config, const PreparedCorpus& corpus, const std::vector<FoldSplit>& folds,
                        const TrainConfig& cfg, int jobs, const ProgressFn& progress) {
  if (folds.empty()) throw ArgumentError("no folds to run");
  CvResult result;
  result.model = model_name(config);
  result.folds.resize(folds.size());
  std::vector<std::exception_ptr> errors(folds.size());
  std::atomic<std::size_t> next{0};
  std::mutex progress_mutex;
  const ProgressFn locked = [&](int f, const EpochRecord& r) {
    if (!progress) return;
    std::lock_guard<std::mutex> lock(progress_mutex);
    progress(f, r);
  };

  auto worker = [&] {
    for (std::size_t f = next++; f < folds.size(); f = next++) {
      try {
        auto trained = train_fold(config, corpus, folds[f], cfg, locked);
        auto& out = result.folds[f];
        out.fold_index = folds[f].fold_index;
        out.report = evaluate_fold(trained.model, corpus, folds[f]);
        out.history = std::move(trained.history);
        out.model = std::make_shared<model::AnyModel>(std::move(trained.model));
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };
  const int n_threads = std::clamp(jobs, 1, static_cast<int>(folds.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (!errors[f]) continue;
    try {
      std::rethrow_exception(errors[f]);
    } catch (const std::exception& e) {
      throw Error("fold " + std::to_string(folds[f].fold_index) + " failed: " + e.what());
    }
  }

  std::vector<double> ua, f1a, f1m, f1w;
  for (const auto& f : result.folds) {
    ua.push_back(f.report.metrics.ua);
    f1a.push_back(f.report.metrics.f1_abnormal);
    f1m.push_back(f.report.metrics.f1_macro);
    f1w.push_back(f.report.metrics.f1_weighted);
  }
  result.ua = summarize(ua);
  result.f1_abnormal = summarize(f1a);
  result.f1_macro = summarize(f1m);
  result.f1_weighted = summarize(f1w);
  return result;
}

void write_results_csv(const std::vector<CvResult>& results, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write results to " + path.string());
  out << "model,fold,ua,f1_abnormal,f1_macro,f1_weighted,n_test\n";
  char line[256];
  for (const auto& r : results) {
    std::size_t n_total = 0;
    for (const auto& f : r.folds) {
      const auto& m = f.report.metrics;
      const auto n = f.report.confusion.total();
      n_total += n;
      std::snprintf(line, sizeof line, "%s,%d,%.6f,%.6f,%.6f,%.6f,%llu\n", r.model.c_str(), f.fold_index, m.ua,
                    m.f1_abnormal, m.f1_macro, m.f1_weighted, static_cast<unsigned long long>(n));
      out << line;
    }
    std::snprintf(line, sizeof line, "%s,mean,%.6f,%.6f,%.6f,%.6f,%zu\n", r.model.c_str(), r.ua.mean,
                  r.f1_abnormal.mean, r.f1_macro.mean, r.f1_weighted.mean, n_total);
    out << line;
    std::snprintf(line, sizeof line, "%s,std,%.6f,%.6f,%.6f,%.6f,%zu\n", r.model.c_str(), r.ua.std,
                  r.f1_abnormal.std, r.f1_macro.std, r.f1_weighted.std, n_total);
    out << line;
  }
  if (!out) throw IoError("failed writing " + path.string());
}

nlohmann::json to_json(const CvResult& r) {
  auto stat = [](const SummaryStat& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}}; };
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    const auto& m = f.report.metrics;
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : f.history.epochs) {
      epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"validation_ua", e.validation_ua},
                        {"validation_loss", e.validation_loss}});
    }
    const auto& c = f.report.confusion.counts;
    folds.push_back({{"fold", f.fold_index},
                     {"confusion", {{c[0][0], c[0][1]}, {c[1][0], c[1][1]}}},
                     {"ua", m.ua},
                     {"recall_normal", m.recall_normal},
                     {"recall_abnormal", m.recall_abnormal},
                     {"f1_normal", m.f1_normal},
                     {"f1_abnormal", m.f1_abnormal},
                     {"f1_macro", m.f1_macro},
                     {"f1_weighted", m.f1_weighted},
                     {"class_weights", f.history.class_weights},
                     {"best_epoch", f.history.best_epoch},
                     {"stopped_early", f.history.stopped_early},
                     {"epochs", epochs}});
  }
  return {{"model", r.model},
          {"folds", folds},
          {"ua", stat(r.ua)},
          {"f1_abnormal", stat(r.f1_abnormal)},
          {"f1_macro", stat(r.f1_macro)},
          {"f1_weighted", stat(r.f1_weighted)}};
}

}  // namespace iconnet::experiment
