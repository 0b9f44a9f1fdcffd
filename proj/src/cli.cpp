#include "iconnet/cli.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "iconnet/audio_io.hpp"
#include "iconnet/errors.hpp"
#include "iconnet/interpret.hpp"
#include "iconnet/rng.hpp"
#include "iconnet/serialization.hpp"
#include "json.hpp"

namespace iconnet::cli {

namespace {

namespace pt = boost::property_tree;
namespace fs = std::filesystem;
using nlohmann::json;

constexpr std::uint64_t kSyntheticSalt = 0x53594e;  // stream for the generated corpus
constexpr long kReferenceParamTotal = 154180;
constexpr double kReferenceModelKb = 493.3;

const std::vector<std::pair<std::string, std::string>>& default_entries() {
  static const std::vector<std::pair<std::string, std::string>> d{
      {"data.root", ""},
      {"data.manifest", ""},
      {"data.synthetic_per_class", "12"},
      {"model.nonlinearity", "abs"},
      {"model.block1_kernels", "128"},
      {"model.block1_length", "256"},
      {"model.block1_stride", "1"},
      {"model.block1_pool", "4"},
      {"model.block2_kernels", "32"},
      {"model.block2_length", "400"},
      {"model.block2_stride", "1"},
      {"model.block2_pool", "4"},
      {"model.ffn_hidden", "256,256"},
      {"model.init_window", "hann"},
      {"model.spacing", "mel"},
      {"model.f_min_hz", "30"},
      {"model.mfcc_bands", "40"},
      {"model.mfcc_coefficients", "40"},
      {"train.epochs_max", "60"},
      {"train.batch_size", "32"},
      {"train.micro_batch", "4"},
      {"train.lr", "0.001"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.999"},
      {"train.adam_eps", "1e-08"},
      {"train.patience", "7"},
      {"train.class_weights", "inverse-frequency"},
      {"train.sample_rate_hz", "16000"},
      {"train.segment_samples", "80000"},
      {"train.hop_samples", "40000"},
      {"train.folds", "4"},
      {"train.validation_fraction", "0.1"},
      {"run.seed", "0"},
      {"run.jobs", "1"},
  };
  return d;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("expected a comma-separated integer list, got '" + text + "'");
    }
  }
  return out;
}

dsp::WindowKind parse_window_kind(const std::string& s) {
  if (s == "hann") return dsp::WindowKind::Hann;
  if (s == "hamming") return dsp::WindowKind::Hamming;
  if (s == "blackman") return dsp::WindowKind::Blackman;
  throw ConfigError("model.init_window must be hann, hamming or blackman");
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

// Refuses to reuse a non-empty output location unless forced.
void claim_output(const fs::path& path, bool force, bool is_dir) {
  if (fs::exists(path)) {
    const bool occupied = is_dir ? fs::is_directory(path) && !fs::is_empty(path) : true;
    if (occupied && !force) throw IoError(path.string() + " already exists; pass --force to overwrite");
    if (occupied && is_dir) fs::remove_all(path);
  }
  if (is_dir) fs::create_directories(path);
}

std::string default_root() {
  const char* env = std::getenv("ICONNET_DATA");
  return env ? env : "";
}

audio::DatasetManifest open_corpus(const RunConfig& rc, bool synthetic, std::uint64_t seed) {
  if (synthetic) {
    return audio::generate_synthetic(derive_seed(seed, kSyntheticSalt), rc.get_int("data.synthetic_per_class"));
  }
  if (!rc.get("data.manifest").empty()) return audio::read_manifest_csv(rc.get("data.manifest"));
  std::string root = rc.get("data.root");
  if (root.empty()) root = default_root();
  if (root.empty()) {
    throw IngestionError(
        "no dataset root: pass --root, set ICONNET_DATA, or use --synthetic. The PhysioNet/CinC 2016 training set "
        "(training-a .. training-f with REFERENCE.csv) must be downloaded manually from physionet.org");
  }
  return audio::load_physionet(root);
}

std::string model_label(const std::string& kind) { return kind == "iconnet" ? "IConNet" : "MFCC+FFN"; }

std::vector<std::string> model_kinds(const std::string& choice) {
  if (choice == "both") return {"iconnet", "mfcc-ffn"};
  return {choice};
}

experiment::ModelConfig model_config(const RunConfig& rc, const std::string& kind) {
  if (kind == "iconnet") return rc.iconnet();
  return rc.mfcc_ffn();
}

std::string format_stat(const experiment::SummaryStat& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f +- %.2f", 100.0 * s.mean, 100.0 * s.std);
  return buf;
}

json interpret_json(const std::vector<interpret::FilterReport>& reports) {
  const auto stats = interpret::passband_statistics(reports, 1);
  std::vector<interpret::FilterReport> block1;
  for (const auto& r : reports) {
    if (r.block == 1) block1.push_back(r);
  }
  const auto sup = interpret::high_band_suppression(block1, 2000.0);
  json j{{"threshold_db", dsp::kNoticeableThresholdDb},
         {"block1_bandpass", {{"count", stats.count}, {"mean_hz", stats.mean_hz}, {"std_hz", stats.std_hz}}},
         {"block1_above_2000hz",
          {{"considered", sup.considered}, {"suppressed", sup.suppressed}, {"fraction", sup.fraction}}}};
  return j;
}

void write_interpret_report(const model::IConNet<float>& net, const fs::path& dir) {
  const auto reports = interpret::analyze_filters(net);
  std::vector<interpret::FilterReport> block1;
  for (const auto& r : reports) {
    if (r.block == 1) block1.push_back(r);
  }
  const double nyquist = 0.5 * net.block1().sample_rate_hz();
  const auto bands = interpret::default_bands(8, net.config().f_min_hz, std::min(8000.0, nyquist), nyquist);
  interpret::export_report(reports, interpret::band_summary(block1, bands), dir);
}

// ---- subcommands ----------------------------------------------------------

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string root;
  std::string manifest;
  bool synthetic = false;
};

RunConfig resolve(const CommonOptions& o) {
  RunConfig rc(o.synthetic);
  if (!o.config_path.empty()) rc.merge_file(o.config_path);
  for (const auto& s : o.sets) rc.set(s);
  if (o.seed) rc.set("run.seed", std::to_string(*o.seed));
  if (!o.root.empty()) rc.set("data.root", o.root);
  if (!o.manifest.empty()) rc.set("data.manifest", o.manifest);
  return rc;
}

int run_ingest(const std::string& root_flag, const std::string& out_path, bool force, std::ostream& out) {
  const std::string root = root_flag.empty() ? default_root() : root_flag;
  if (root.empty()) throw IngestionError("no dataset root: pass --root or set ICONNET_DATA");
  const auto manifest = audio::load_physionet(root);
  out << "Normal: " << manifest.count(audio::Label::Normal) << '\n'
      << "Abnormal: " << manifest.count(audio::Label::Abnormal) << '\n'
      << "Total: " << manifest.size() << '\n'
      << "Checksum: " << hex64(manifest.checksum()) << '\n';
  const fs::path path = out_path.empty() ? fs::path(root) / "manifest.csv" : fs::path(out_path);
  claim_output(path, force, false);
  audio::write_manifest_csv(manifest, path);
  out << "Manifest written to " << path.string() << '\n';
  return 0;
}

int run_synth(const std::string& dir, std::uint64_t seed, int per_class, bool force, std::ostream& out) {
  claim_output(dir, force, true);
  const auto manifest = audio::generate_synthetic(derive_seed(seed, kSyntheticSalt), per_class);
  audio::write_physionet_layout(manifest, dir);
  out << "Wrote " << manifest.size() << " recordings (" << manifest.count(audio::Label::Normal) << " Normal, "
      << manifest.count(audio::Label::Abnormal) << " Abnormal) to " << dir << '\n';
  return 0;
}

struct TrainOptions {
  CommonOptions common;
  std::string model = "iconnet";
  std::optional<int> folds;
  std::optional<int> jobs;
  std::string out_dir = "runs";
  std::string run_id;
  bool force = false;
  bool quiet = false;
};

int run_train(const TrainOptions& o, std::ostream& out) {
  RunConfig rc = resolve(o.common);
  if (o.folds) rc.set("train.folds", std::to_string(*o.folds));
  if (o.jobs) rc.set("run.jobs", std::to_string(*o.jobs));
  const auto seed = rc.get_u64("run.seed");
  const auto train_cfg = rc.train();
  const auto kinds = model_kinds(o.model);
  for (const auto& k : kinds) std::visit([](const auto& c) { c.validate(); }, model_config(rc, k));

  const std::string run_id = o.run_id.empty() ? o.model + "-seed" + std::to_string(seed) : o.run_id;
  const fs::path run_dir = fs::path(o.out_dir) / run_id;
  claim_output(run_dir, o.force, true);

  const auto manifest = open_corpus(rc, o.common.synthetic, seed);
  out << "Corpus: " << manifest.size() << " recordings (" << manifest.count(audio::Label::Normal) << " Normal, "
      << manifest.count(audio::Label::Abnormal) << " Abnormal), checksum " << hex64(manifest.checksum()) << '\n';
  write_text(run_dir / "config.ini", rc.to_ini());
  write_text(run_dir / "manifest_checksum.txt", hex64(manifest.checksum()) + '\n');
  audio::write_manifest_csv(manifest, run_dir / "manifest.csv");

  const experiment::PreparedCorpus corpus(manifest, train_cfg.sample_rate_hz);
  const auto folds = experiment::stratified_kfold(manifest, rc.get_int("train.folds"), seed,
                                                  rc.get_double("train.validation_fraction"));
  fs::create_directories(run_dir / "models");

  json run{{"run_id", run_id},
           {"seed", seed},
           {"train", experiment::to_json(train_cfg)},
           {"folds", rc.get_int("train.folds")},
           {"jobs", rc.get_int("run.jobs")},
           {"dataset",
            {{"source", o.common.synthetic ? "synthetic" : "physionet2016"},
             {"recordings", manifest.size()},
             {"normal", manifest.count(audio::Label::Normal)},
             {"abnormal", manifest.count(audio::Label::Abnormal)},
             {"checksum", hex64(manifest.checksum())}}},
           {"models", json::object()}};

  std::vector<experiment::CvResult> results;
  for (const auto& kind : kinds) {
    const auto config = model_config(rc, kind);
    const experiment::ProgressFn progress = [&](int fold, const experiment::EpochRecord& r) {
      if (o.quiet) return;
      char line[160];
      std::snprintf(line, sizeof line, "[%s] fold %d epoch %d loss %.5f val_ua %.4f val_loss %.4f\n", kind.c_str(), fold, r.epoch,
                    r.train_loss, r.validation_ua, r.validation_loss);
      out << line << std::flush;
    };
    auto cv = experiment::cross_validate(config, corpus, folds, train_cfg, rc.get_int("run.jobs"), progress);

    json entry = experiment::to_json(cv);
    std::visit([&](const auto& c) { entry["config"] = model::to_json(c); }, config);
    std::size_t best_fold = 0;
    for (std::size_t f = 0; f < cv.folds.size(); ++f) {
      const auto& fr = cv.folds[f];
      model::ModelInfo info;
      info.provenance = {{"run_id", run_id},
                         {"seed", seed},
                         {"fold", fr.fold_index},
                         {"best_epoch", fr.history.best_epoch},
                         {"dataset_checksum", hex64(manifest.checksum())},
                         {"train", experiment::to_json(train_cfg)}};
      info.metrics = {{"ua", fr.report.metrics.ua},
                      {"f1_abnormal", fr.report.metrics.f1_abnormal},
                      {"f1_macro", fr.report.metrics.f1_macro},
                      {"f1_weighted", fr.report.metrics.f1_weighted}};
      const fs::path model_path = run_dir / "models" / (kind + "_fold" + std::to_string(fr.fold_index) + ".icon");
      model::save_model(*fr.model, model_path, info);
      entry["folds"][f]["model_file"] = fs::relative(model_path, run_dir).string();
      entry["folds"][f]["model_bytes"] = fs::file_size(model_path);
      if (fr.report.metrics.ua > cv.folds[best_fold].report.metrics.ua) best_fold = f;
    }

    const auto counts = std::visit([](const auto& m) { return m.count_params(); }, *cv.folds[best_fold].model);
    entry["parameters"] = {{"front_end", counts.front_end}, {"classifier", counts.classifier}, {"total", counts.total}};
    if (kind == "iconnet") {
      entry["parameters"]["reference_total"] = kReferenceParamTotal;
      entry["parameters"]["delta_vs_reference"] = counts.total - kReferenceParamTotal;
      const auto& net = std::get<model::IConNet<float>>(*cv.folds[best_fold].model);
      write_interpret_report(net, run_dir / "interpret");
      entry["interpret"] = interpret_json(interpret::analyze_filters(net));
      entry["interpret"]["fold"] = cv.folds[best_fold].fold_index;
      const auto bytes = entry["folds"][best_fold]["model_bytes"].get<std::uintmax_t>();
      entry["model_file_kb"] = {{"ours", static_cast<double>(bytes) / 1000.0}, {"reference", kReferenceModelKb}};
    }
    run["models"][kind] = entry;
    results.push_back(std::move(cv));
  }

  experiment::write_results_csv(results, run_dir / "results.csv");
  write_text(run_dir / "run.json", run.dump(2) + '\n');

  out << "\nmodel       UA (%)           F1 weighted (%)  F1 abnormal (%)\n";
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-11s %-16s %-16s %s\n", model_label(r.model).c_str(), format_stat(r.ua).c_str(),
                  format_stat(r.f1_weighted).c_str(), format_stat(r.f1_abnormal).c_str());
    out << line;
  }
  out << "Outputs in " << run_dir.string() << '\n';
  return 0;
}

struct EvaluateOptions {
  CommonOptions common;
  std::string model_file;
  std::optional<int> fold;
  std::optional<int> folds;
  bool as_json = false;
};

int run_evaluate(const EvaluateOptions& o, std::ostream& out) {
  RunConfig rc = resolve(o.common);
  if (o.folds) rc.set("train.folds", std::to_string(*o.folds));
  const auto loaded = model::load_model(o.model_file);
  const auto seed = rc.get_u64("run.seed");
  const auto manifest = open_corpus(rc, o.common.synthetic, seed);
  const experiment::PreparedCorpus corpus(manifest, rc.get_int("train.sample_rate_hz"));
  std::vector<std::string> ids;
  if (o.fold) {
    const auto folds = experiment::stratified_kfold(manifest, rc.get_int("train.folds"), seed,
                                                    rc.get_double("train.validation_fraction"));
    if (*o.fold < 0 || *o.fold >= static_cast<int>(folds.size())) throw ArgumentError("fold index out of range");
    ids = folds[*o.fold].test_ids;
  } else {
    for (const auto& e : manifest.entries()) ids.push_back(e.id);
  }
  const auto report = experiment::evaluate_recordings(loaded.model, corpus, ids);
  const auto& m = report.metrics;
  const auto& c = report.confusion.counts;
  if (o.as_json) {
    json j{{"model", experiment::model_name(loaded.model)},
           {"n_recordings", ids.size()},
           {"confusion", {{c[0][0], c[0][1]}, {c[1][0], c[1][1]}}},
           {"ua", m.ua},
           {"f1_abnormal", m.f1_abnormal},
           {"f1_macro", m.f1_macro},
           {"f1_weighted", m.f1_weighted},
           {"predictions", json::array()}};
    for (const auto& p : report.predictions) {
      j["predictions"].push_back({{"id", p.id},
                                  {"truth", audio::label_name(p.truth)},
                                  {"predicted", audio::label_name(p.predicted)},
                                  {"p_abnormal", p.probability[1]},
                                  {"segments", p.n_segments}});
    }
    out << j.dump(2) << '\n';
  } else {
    char line[200];
    std::snprintf(line, sizeof line,
                  "recordings %zu\nconfusion [[%llu, %llu], [%llu, %llu]]\nua %.4f\nf1_abnormal %.4f\nf1_macro "
                  "%.4f\nf1_weighted %.4f\n",
                  ids.size(), static_cast<unsigned long long>(c[0][0]), static_cast<unsigned long long>(c[0][1]),
                  static_cast<unsigned long long>(c[1][0]), static_cast<unsigned long long>(c[1][1]), m.ua,
                  m.f1_abnormal, m.f1_macro, m.f1_weighted);
    out << line;
  }
  return 0;
}

int run_infer(const std::string& model_file, const std::string& wav, bool as_json, std::ostream& out) {
  const auto loaded = model::load_model(model_file);
  const auto waveform = audio::read_wav(wav);
  if (waveform.duration_s() < 1.0) {
    char msg[160];
    std::snprintf(msg, sizeof msg, "%s is %.3f s long; at least 1 s of audio is required", wav.c_str(),
                  waveform.duration_s());
    throw ArgumentError(msg);
  }
  const auto score = experiment::score_waveform(loaded.model, waveform);
  const int rate = std::visit(
      [](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, model::IConNet<float>>) {
          return m.config().sample_rate_hz;
        } else {
          return m.config().mfcc.sample_rate_hz;
        }
      },
      loaded.model);
  if (as_json) {
    json segs = json::array();
    for (std::size_t i = 0; i < score.offsets.size(); ++i) {
      segs.push_back({{"offset_s", static_cast<double>(score.offsets[i]) / rate},
                      {"normal", score.segment_probabilities(static_cast<Eigen::Index>(i), 0)},
                      {"abnormal", score.segment_probabilities(static_cast<Eigen::Index>(i), 1)}});
    }
    json j{{"file", wav},
           {"label", audio::label_name(score.label)},
           {"probability", {{"normal", score.probability[0]}, {"abnormal", score.probability[1]}}},
           {"input_sample_rate_hz", waveform.sample_rate_hz},
           {"segments", segs}};
    out << j.dump(2) << '\n';
  } else {
    char line[160];
    out << "label " << audio::label_name(score.label) << '\n';
    std::snprintf(line, sizeof line, "p(Normal) %.6f\np(Abnormal) %.6f\n", score.probability[0], score.probability[1]);
    out << line;
    for (std::size_t i = 0; i < score.offsets.size(); ++i) {
      std::snprintf(line, sizeof line, "  segment %zu at %.2f s: %.6f %.6f\n", i,
                    static_cast<double>(score.offsets[i]) / rate,
                    score.segment_probabilities(static_cast<Eigen::Index>(i), 0),
                    score.segment_probabilities(static_cast<Eigen::Index>(i), 1));
      out << line;
    }
  }
  return 0;
}

int run_inspect(const std::string& model_file, const std::string& dir, int n_fft, bool force, std::ostream& out) {
  const auto loaded = model::load_model(model_file);
  const auto* net = std::get_if<model::IConNet<float>>(&loaded.model);
  if (!net) throw ArgumentError(model_file + " holds an MFCC baseline, which has no front-end filters");
  if (!dsp::is_power_of_two(n_fft)) throw ArgumentError("--n-fft must be a power of two");
  claim_output(dir, force, true);
  const auto reports = interpret::analyze_filters(*net, n_fft);
  std::vector<interpret::FilterReport> block1;
  for (const auto& r : reports) {
    if (r.block == 1) block1.push_back(r);
  }
  const double nyquist = 0.5 * net->block1().sample_rate_hz();
  const auto bands = interpret::default_bands(8, net->config().f_min_hz, std::min(8000.0, nyquist), nyquist);
  interpret::export_report(reports, interpret::band_summary(block1, bands), dir);
  const auto counts = net->count_params();
  const auto j = interpret_json(reports);
  char line[200];
  std::snprintf(line, sizeof line, "parameters: front-end %ld, classifier %ld, total %ld (reference total %ld)\n",
                static_cast<long>(counts.front_end), static_cast<long>(counts.classifier),
                static_cast<long>(counts.total), kReferenceParamTotal);
  out << line;
  std::snprintf(line, sizeof line, "block-1 BandPass centres: %.1f +- %.1f Hz over %zu kernels\n",
                j["block1_bandpass"]["mean_hz"].get<double>(), j["block1_bandpass"]["std_hz"].get<double>(),
                j["block1_bandpass"]["count"].get<std::size_t>());
  out << line;
  std::snprintf(line, sizeof line, "block-1 kernels above 2000 Hz suppressed: %zu of %zu\n",
                j["block1_above_2000hz"]["suppressed"].get<std::size_t>(),
                j["block1_above_2000hz"]["considered"].get<std::size_t>());
  out << line << "Report written to " << dir << '\n';
  return 0;
}

int run_gradcheck(std::uint64_t seed, double eps, double tolerance, std::ostream& out) {
  const auto result = gradcheck_iconnet(model::IConNetConfig::tiny(), seed, eps);
  char line[200];
  std::snprintf(line, sizeof line, "coordinates %zu, max relative error %.3e (tensor %zu, index %ld: analytic %.6e, numeric %.6e)\n",
                result.coordinates, result.max_relative_error, result.worst_param,
                static_cast<long>(result.worst_index), result.analytic, result.numeric);
  out << line;
  if (result.max_relative_error >= tolerance) throw NumericError("gradient check failed");
  out << "ok\n";
  return 0;
}

}  // namespace

RunConfig::RunConfig(bool synthetic) : entries_(default_entries()) {
  if (synthetic) {
    set("train.epochs_max", "10");
    set("train.batch_size", "8");
    set("train.lr", "0.003");
    set("train.patience", "3");
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  std::string known;
  for (const auto& [k, _] : entries_) known += (known.empty() ? "" : ", ") + k;
  throw ConfigError("unknown setting '" + key + "'; known settings: " + known);
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  for (const auto& [section, keys] : tree) {
    if (keys.empty()) throw ConfigError(path.string() + ": settings must live in a [section]");
    for (const auto& [key, value] : keys) set(section + "." + key, value.get_value<std::string>());
  }
}

std::string RunConfig::get(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  throw ConfigError("unknown setting '" + key + "'");
}

int RunConfig::get_int(const std::string& key) const {
  const auto v = get(key);
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used == v.size()) return out;
  } catch (const std::logic_error&) {
  }
  throw ConfigError(key + " must be an integer, got '" + v + "'");
}

double RunConfig::get_double(const std::string& key) const {
  const auto v = get(key);
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::logic_error&) {
  }
  throw ConfigError(key + " must be a number, got '" + v + "'");
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const auto v = get(key);
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] != '-') {
      const auto out = std::stoull(v, &used);
      if (used == v.size()) return out;
    }
  } catch (const std::logic_error&) {
  }
  throw ConfigError(key + " must be a non-negative integer, got '" + v + "'");
}

model::IConNetConfig RunConfig::iconnet() const {
  model::IConNetConfig c;
  c.sample_rate_hz = get_int("train.sample_rate_hz");
  c.segment_samples = get_int("train.segment_samples");
  c.block1 = {get_int("model.block1_kernels"), get_int("model.block1_length"), get_int("model.block1_stride"),
              get_int("model.block1_pool")};
  c.block2 = {get_int("model.block2_kernels"), get_int("model.block2_length"), get_int("model.block2_stride"),
              get_int("model.block2_pool")};
  const auto nl = get("model.nonlinearity");
  if (nl != "abs" && nl != "relu") throw ConfigError("model.nonlinearity must be abs or relu");
  c.nonlinearity = nl == "abs" ? model::Nonlinearity::Abs : model::Nonlinearity::Relu;
  c.ffn_hidden = parse_int_list(get("model.ffn_hidden"));
  c.init_window = parse_window_kind(get("model.init_window"));
  const auto sp = get("model.spacing");
  if (sp != "mel" && sp != "linear") throw ConfigError("model.spacing must be mel or linear");
  c.spacing = sp == "mel" ? model::BandSpacing::Mel : model::BandSpacing::Linear;
  c.f_min_hz = get_double("model.f_min_hz");
  c.seed = get_u64("run.seed");
  c.validate();
  return c;
}

model::MfccFfnConfig RunConfig::mfcc_ffn() const {
  model::MfccFfnConfig c;
  c.mfcc.sample_rate_hz = get_int("train.sample_rate_hz");
  c.mfcc.n_mel_bands = get_int("model.mfcc_bands");
  c.mfcc.n_coefficients = get_int("model.mfcc_coefficients");
  c.ffn_hidden = parse_int_list(get("model.ffn_hidden"));
  c.segment_samples = get_int("train.segment_samples");
  c.seed = get_u64("run.seed");
  c.validate();
  return c;
}

experiment::TrainConfig RunConfig::train() const {
  experiment::TrainConfig t;
  t.epochs_max = get_int("train.epochs_max");
  t.batch_size = get_int("train.batch_size");
  t.micro_batch = get_int("train.micro_batch");
  t.lr = get_double("train.lr");
  t.beta1 = get_double("train.beta1");
  t.beta2 = get_double("train.beta2");
  t.adam_eps = get_double("train.adam_eps");
  t.patience = get_int("train.patience");
  const auto w = get("train.class_weights");
  if (w != "inverse-frequency" && w != "uniform") {
    throw ConfigError("train.class_weights must be inverse-frequency or uniform");
  }
  t.class_weights =
      w == "uniform" ? experiment::ClassWeighting::Uniform : experiment::ClassWeighting::InverseFrequency;
  t.seed = get_u64("run.seed");
  t.sample_rate_hz = get_int("train.sample_rate_hz");
  t.segment_samples = get_int("train.segment_samples");
  t.hop_samples = get_int("train.hop_samples");
  t.validate();
  return t;
}

std::string RunConfig::to_ini() const {
  pt::ptree tree;
  for (const auto& [k, v] : entries_) tree.put(pt::ptree::path_type(k, '.'), v);
  std::ostringstream os;
  pt::ini_parser::write_ini(os, tree);
  return os.str();
}

grad::GradCheckResult gradcheck_iconnet(const model::IConNetConfig& config, std::uint64_t seed, double epsilon) {
  auto cfg = config;
  cfg.seed = seed;
  model::IConNet<double> net(cfg);
  Rng rng(derive_seed(seed, 1));
  // Move the windows off the symmetric Hann start so every coordinate matters.
  for (auto* layer : {&net.block1(), &net.block2()}) {
    auto& w = layer->windows().values();
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] += 0.05 * rng.normal();
  }
  const Eigen::Index n = cfg.segment_samples;
  grad::Array<double> x(2 * n);
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = 0.3 * rng.normal();
  const grad::Tensor<double> input({2, 1, n}, x);
  const std::vector<int> targets{0, 1};
  const std::vector<double> weights{1.0, 2.5};
  std::vector<grad::Tensor<double>> params;
  for (const auto& p : net.parameters()) params.push_back(p.tensor);
  const std::function<grad::Tensor<double>(grad::Tape<double>&)> loss = [&](grad::Tape<double>& tape) {
    return grad::weighted_cross_entropy(tape, net.forward(tape, input), std::span<const int>(targets), weights);
  };
  return grad::finite_diff_check<double>(loss, std::span<grad::Tensor<double>>(params), epsilon);
}

int cmd_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"IConNet heart-sound classification toolkit", "iconnet"};
  app.require_subcommand(1);

  auto add_common = [](CLI::App* sub, CommonOptions& o) {
    sub->add_option("--config", o.config_path, "INI configuration file")->check(CLI::ExistingFile);
    sub->add_option("--set", o.sets, "Override a setting, e.g. --set train.lr=0.0005");
    sub->add_option("--seed", o.seed, "Seed for every random choice");
    sub->add_option("--root", o.root, "PhysioNet 2016 root (default: $ICONNET_DATA)");
    sub->add_option("--manifest", o.manifest, "Manifest CSV written by `ingest`");
    sub->add_flag("--synthetic", o.synthetic, "Use the generated synthetic corpus");
  };

  std::string ingest_root, ingest_out;
  bool ingest_force = false;
  auto* ingest = app.add_subcommand("ingest", "Scan the PhysioNet 2016 corpus and write a manifest");
  ingest->add_option("--root", ingest_root, "Corpus root (default: $ICONNET_DATA)");
  ingest->add_option("--out", ingest_out, "Manifest path (default: <root>/manifest.csv)");
  ingest->add_flag("--force", ingest_force, "Overwrite an existing manifest");

  std::string synth_out;
  std::uint64_t synth_seed = 0;
  int synth_per_class = 12;
  bool synth_force = false;
  auto* synth = app.add_subcommand("synth-data", "Write the synthetic corpus as WAV files in PhysioNet layout");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Seed");
  synth->add_option("--per-class", synth_per_class, "Recordings per class")->check(CLI::PositiveNumber);
  synth->add_flag("--force", synth_force, "Overwrite a non-empty directory");

  TrainOptions topt;
  auto* train = app.add_subcommand("train", "Cross-validate a model and save fold models and reports");
  add_common(train, topt.common);
  train->add_option("--model", topt.model, "iconnet, mfcc-ffn, or both")
      ->check(CLI::IsMember({"iconnet", "mfcc-ffn", "both"}));
  train->add_option("--folds", topt.folds, "Number of folds")->check(CLI::Range(2, 100));
  train->add_option("--jobs", topt.jobs, "Folds trained in parallel")->check(CLI::Range(1, 256));
  train->add_option("--out", topt.out_dir, "Output root; the run goes to <out>/<run-id>");
  train->add_option("--run-id", topt.run_id, "Run directory name (default: <model>-seed<seed>)");
  train->add_flag("--force", topt.force, "Overwrite an existing run directory");
  train->add_flag("--quiet", topt.quiet, "No per-epoch progress");

  EvaluateOptions eopt;
  auto* evaluate = app.add_subcommand("evaluate", "Score a saved model on a corpus or on one fold's test split");
  add_common(evaluate, eopt.common);
  evaluate->add_option("--model-file", eopt.model_file, "Model file")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--fold", eopt.fold, "Evaluate only this fold's test split");
  evaluate->add_option("--folds", eopt.folds, "Number of folds used to form the split")->check(CLI::Range(2, 100));
  evaluate->add_flag("--json", eopt.as_json, "Machine-readable output");

  std::string infer_model, infer_wav;
  bool infer_json = false;
  auto* infer = app.add_subcommand("infer", "Classify one WAV recording");
  infer->add_option("--model", infer_model, "Model file")->required();
  infer->add_option("--wav", infer_wav, "Recording")->required();
  infer->add_flag("--json", infer_json, "Machine-readable output");

  std::string inspect_model, inspect_out;
  int inspect_fft = static_cast<int>(interpret::kAnalysisFftSize);
  bool inspect_force = false;
  auto* inspect = app.add_subcommand("inspect-filters", "Export frequency responses and shapes of learned filters");
  inspect->add_option("--model", inspect_model, "IConNet model file")->required();
  inspect->add_option("--out", inspect_out, "Report directory")->required();
  inspect->add_option("--n-fft", inspect_fft, "FFT size for the responses")->check(CLI::Range(256, 1 << 20));
  inspect->add_flag("--force", inspect_force, "Overwrite a non-empty directory");

  std::uint64_t gc_seed = 0;
  double gc_eps = 1e-4, gc_tol = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full model gradient");
  gradcheck->add_option("--seed", gc_seed, "Seed");
  gradcheck->add_option("--eps", gc_eps, "Central-difference step")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tolerance", gc_tol, "Largest acceptable relative error")->check(CLI::PositiveNumber);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }

  try {
    if (*ingest) return run_ingest(ingest_root, ingest_out, ingest_force, out);
    if (*synth) return run_synth(synth_out, synth_seed, synth_per_class, synth_force, out);
    if (*train) return run_train(topt, out);
    if (*evaluate) return run_evaluate(eopt, out);
    if (*infer) return run_infer(infer_model, infer_wav, infer_json, out);
    if (*inspect) return run_inspect(inspect_model, inspect_out, inspect_fft, inspect_force, out);
    if (*gradcheck) return run_gradcheck(gc_seed, gc_eps, gc_tol, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

int cmd_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cmd_dispatch(args, out, err);
}

}  // namespace iconnet::cli
