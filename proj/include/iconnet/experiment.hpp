#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "iconnet/audio_io.hpp"
#include "iconnet/grad.hpp"
#include "iconnet/model.hpp"
#include "iconnet/serialization.hpp"
#include "json.hpp"

namespace iconnet::experiment {

using audio::Label;
using ModelConfig = std::variant<model::IConNetConfig, model::MfccFfnConfig>;

std::string model_name(const ModelConfig& config);
std::string model_name(const model::AnyModel& model);

struct FoldSplit {
  int fold_index = 0;
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;
  std::vector<std::string> test_ids;
};

/// Per class: seeded shuffle, then round-robin over folds. The validation
/// share is carved per class from each training side.
std::vector<FoldSplit> stratified_kfold(const audio::DatasetManifest& manifest, int k, std::uint64_t seed,
                                        double validation_fraction = 0.1);

enum class ClassWeighting { InverseFrequency, Uniform };

struct TrainConfig {
  int epochs_max = 60;
  int batch_size = 32;
  /// Segments per forward/backward pass; gradients accumulate to batch_size.
  int micro_batch = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  ClassWeighting class_weights = ClassWeighting::InverseFrequency;
  int patience = 7;
  std::uint64_t seed = 0;
  int sample_rate_hz = 16000;
  int segment_samples = 80000;
  int hop_samples = 40000;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Rows are the true class (Normal, Abnormal), columns the prediction.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, 2>, 2> counts{};

  void add(Label truth, Label predicted);
  std::uint64_t total() const;
};

struct Metrics {
  double ua = 0.0;
  double recall_normal = 0.0;
  double recall_abnormal = 0.0;
  double f1_normal = 0.0;
  double f1_abnormal = 0.0;
  double f1_macro = 0.0;
  double f1_weighted = 0.0;
};

/// Throws ArgumentError on an all-zero matrix.
Metrics compute_metrics(const ConfusionMatrix& confusion);

struct RecordingPrediction {
  std::string id;
  Label truth = Label::Normal;
  Label predicted = Label::Normal;
  std::array<double, 2> probability{};
  std::size_t n_segments = 0;
};

struct MetricsReport {
  ConfusionMatrix confusion;
  Metrics metrics;
  std::vector<RecordingPrediction> predictions;
};

/// Mean of per-segment class probabilities (rows of a [segments x 2] matrix).
std::array<double, 2> aggregate_segments(const grad::RowMatrix<double>& segment_probabilities);
Label decide(const std::array<double, 2>& probability);

/// Recordings peak-normalised at their source rate and resampled to the model
/// rate. Resampled signals are cached while they fit the byte budget, otherwise
/// produced on demand. Read-only after construction, so folds may share it.
class PreparedCorpus {
 public:
  PreparedCorpus(const audio::DatasetManifest& manifest, int target_rate_hz,
                 std::size_t cache_budget_bytes = std::size_t{1} << 30);

  const audio::DatasetManifest& manifest() const { return manifest_; }
  int sample_rate_hz() const { return target_rate_hz_; }
  std::size_t size() const { return manifest_.size(); }
  std::size_t index_of(const std::string& id) const;
  Label label(std::size_t index) const { return manifest_.entries()[index].label; }

  std::shared_ptr<const std::vector<float>> signal(std::size_t index) const;

 private:
  audio::DatasetManifest manifest_;
  int target_rate_hz_;
  std::vector<audio::Waveform> sources_;
  std::vector<std::shared_ptr<const std::vector<float>>> cache_;
};

/// Peak-normalises, resamples to the model rate, and returns samples as float.
std::vector<float> prepare_signal(const audio::Waveform& waveform, int target_rate_hz);

struct RecordingScore {
  std::array<double, 2> probability{};
  Label label = Label::Normal;
  std::vector<std::size_t> offsets;
  grad::RowMatrix<double> segment_probabilities;
};

/// Non-overlapping whole segments (a partial tail is dropped; a recording shorter
/// than one segment is zero-padded), mean probability per recording.
RecordingScore score_signal(const model::AnyModel& model, std::span<const float> signal, int batch = 4);
RecordingScore score_waveform(const model::AnyModel& model, const audio::Waveform& waveform);

MetricsReport evaluate_recordings(const model::AnyModel& model, const PreparedCorpus& corpus,
                                  const std::vector<std::string>& ids);
/// Evaluates the held-out test side. Throws ArgumentError when it is empty.
MetricsReport evaluate_fold(const model::AnyModel& model, const PreparedCorpus& corpus, const FoldSplit& fold);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_ua = 0.0;
  /// Class-weighted mean of -log p(true class) over monitored recordings.
  double validation_loss = 0.0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_validation_ua = -1.0;
  double best_validation_loss = 0.0;
  bool stopped_early = false;
  std::array<double, 2> class_weights{1.0, 1.0};
};

struct TrainedModel {
  model::AnyModel model;
  TrainingHistory history;
};

using ProgressFn = std::function<void(int fold_index, const EpochRecord& record)>;

/// Model initialisation and batch order derive from cfg.seed and the fold index.
TrainedModel train_fold(const ModelConfig& config, const PreparedCorpus& corpus, const FoldSplit& fold,
                        const TrainConfig& cfg, const ProgressFn& progress = {});

struct FoldResult {
  int fold_index = 0;
  MetricsReport report;
  TrainingHistory history;
  std::shared_ptr<model::AnyModel> model;
};

struct SummaryStat {
  double mean = 0.0;
  double std = 0.0;  ///< population standard deviation over folds
};

struct CvResult {
  std::string model;
  std::vector<FoldResult> folds;
  SummaryStat ua, f1_abnormal, f1_macro, f1_weighted;
};

/// Runs every fold, up to `jobs` at a time. A failing fold is rethrown with its index.
CvResult cross_validate(const ModelConfig& config, const PreparedCorpus& corpus, const std::vector<FoldSplit>& folds,
                        const TrainConfig& cfg, int jobs = 1, const ProgressFn& progress = {});

/// Header model,fold,ua,f1_abnormal,f1_macro,f1_weighted,n_test; per model one
/// row per fold plus "mean" and "std" rows.
void write_results_csv(const std::vector<CvResult>& results, const std::filesystem::path& path);
nlohmann::json to_json(const CvResult& result);

}  // namespace iconnet::experiment
