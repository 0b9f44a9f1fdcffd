#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace iconnet::audio {

/// A mono signal with its sample rate; amplitudes nominally in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate_hz = 0;

  double duration_s() const {
    return sample_rate_hz > 0 ? static_cast<double>(samples.size()) / sample_rate_hz : 0.0;
  }
  /// Throws ArgumentError when the rate is not positive or a sample is not finite.
  void validate() const;
};

enum class WavEncoding { Pcm16, Float32 };

struct WavInfo {
  int sample_rate_hz = 0;
  int channels = 0;
  std::uint64_t frames = 0;
  WavEncoding encoding = WavEncoding::Pcm16;
};

WavInfo read_wav_info(const std::filesystem::path& path);
/// Reads PCM16 or float-32 RIFF/WAVE; channels are averaged to mono.
Waveform read_wav(const std::filesystem::path& path);
/// PCM16 clamps to [-1, 1 - 2^-15] and rounds to nearest.
void write_wav(const Waveform& waveform, const std::filesystem::path& path, WavEncoding encoding);

/// Kaiser-windowed sinc polyphase design for rational-ratio conversion.
struct ResamplerDesign {
  int taps_per_phase = 64;
  double kaiser_beta = 8.6;
};

/// Output length is ceil(n * target / source); target == source returns a copy.
Waveform resample(const Waveform& waveform, int target_rate_hz, const ResamplerDesign& design = {});

/// Scales so that max |sample| == 1; silent input is returned unchanged.
void peak_normalize(std::vector<double>& samples);

enum class PadPolicy { PadLastWithZeros, DropLast };

struct Segment {
  std::string parent_id;
  std::size_t offset_samples = 0;
  std::vector<double> samples;
};

/// Start offsets of the windows segment() would produce for a signal of this length.
std::vector<std::size_t> segment_offsets(std::size_t n_samples, std::size_t window_len,
                                         std::size_t hop, PadPolicy policy);

std::vector<Segment> segment(const Waveform& waveform, const std::string& parent_id,
                             std::size_t window_len, std::size_t hop, PadPolicy policy);

enum class Label { Normal = 0, Abnormal = 1 };

const char* label_name(Label label);
Label parse_label_name(const std::string& text);

enum class DatasetSource { PhysioNet2016, Synthetic };

struct ManifestEntry {
  std::string id;
  std::filesystem::path path;  ///< empty for in-memory recordings
  Label label = Label::Normal;
  double duration_s = 0.0;
  int sample_rate_hz = 0;
  /// Present for corpora generated in memory.
  std::shared_ptr<const Waveform> waveform;
};

struct LabeledRecording {
  std::string id;
  Waveform waveform;
  Label label = Label::Normal;
};

/// Entries are kept sorted by id; counts always tally the entries.
class DatasetManifest {
 public:
  DatasetManifest() = default;
  DatasetManifest(std::vector<ManifestEntry> entries, DatasetSource source);

  const std::vector<ManifestEntry>& entries() const { return entries_; }
  const std::map<Label, std::size_t>& counts() const { return counts_; }
  std::size_t count(Label label) const;
  DatasetSource source() const { return source_; }
  std::size_t size() const { return entries_.size(); }

  const ManifestEntry& at(const std::string& id) const;
  std::optional<std::size_t> index_of(const std::string& id) const;

  /// In-memory waveform when available, otherwise read from disk.
  LabeledRecording load(std::size_t index) const;

  /// 64-bit FNV-1a over ids, labels and sample data.
  std::uint64_t checksum() const;

 private:
  std::vector<ManifestEntry> entries_;
  std::map<Label, std::size_t> counts_;
  DatasetSource source_ = DatasetSource::Synthetic;
};

/// Ingests <root>/training-?/REFERENCE.csv + *.wav. Labels: -1 Normal, 1 Abnormal.
DatasetManifest load_physionet(const std::filesystem::path& root);

/// CSV with header id,path,label,duration_s,sample_rate.
void write_manifest_csv(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest_csv(const std::filesystem::path& path);

/// Synthetic phonocardiogram-like corpus at 2000 Hz: dual-click trains plus
/// pink noise, with a 300-700 Hz murmur burst added for Abnormal recordings.
struct SyntheticCorpusSpec {
  int sample_rate_hz = 2000;
  double min_duration_s = 5.0;
  double max_duration_s = 10.0;
  double murmur_amplitude = 0.8;
  double noise_rms = 0.03;
};

DatasetManifest generate_synthetic(std::uint64_t seed, int n_per_class,
                                   const SyntheticCorpusSpec& spec = {});

/// The recording with index i of a synthetic corpus, optionally without its
/// murmur. The murmur-free variant of an Abnormal recording is its Normal template.
Waveform synthesize_recording(std::uint64_t seed, int index, bool with_murmur,
                              const SyntheticCorpusSpec& spec = {});

/// Writes the corpus in PhysioNet layout (<dir>/training-a/*.wav + REFERENCE.csv).
void write_physionet_layout(const DatasetManifest& manifest, const std::filesystem::path& dir);

}  // namespace iconnet::audio
