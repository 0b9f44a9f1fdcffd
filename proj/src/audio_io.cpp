#include "iconnet/audio_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "iconnet/errors.hpp"
#include "iconnet/rng.hpp"

namespace iconnet::audio {

namespace {

static_assert(std::endian::native == std::endian::little, "WAV I/O assumes a little-endian host");

std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

template <typename T>
T load_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void store_le(std::vector<char>& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

std::string describe_format(std::uint16_t tag, std::uint16_t bits) {
  switch (tag) {
    case 1:
      return "PCM " + std::to_string(bits) + "-bit";
    case 2:
      return "MS ADPCM";
    case 3:
      return "IEEE float " + std::to_string(bits) + "-bit";
    case 6:
      return "A-law";
    case 7:
      return "mu-law";
    default: {
      std::ostringstream s;
      s << "format tag 0x" << std::hex << tag;
      return s.str();
    }
  }
}

struct ParsedWav {
  WavInfo info;
  const char* data = nullptr;
  std::uint64_t data_bytes = 0;
};

ParsedWav parse_wav(const std::vector<char>& bytes, const std::filesystem::path& path) {
  const auto fail = [&](const std::string& why) {
    return FormatError(path.string() + ": " + why);
  };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw fail("not a RIFF/WAVE file");
  }
  ParsedWav parsed;
  bool have_fmt = false;
  bool have_data = false;
  std::uint16_t tag = 0;
  std::uint16_t bits = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const char* id = bytes.data() + pos;
    const auto size = load_le<std::uint32_t>(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (size < 16 || body + size > bytes.size()) throw fail("malformed fmt chunk");
      tag = load_le<std::uint16_t>(bytes.data() + body);
      parsed.info.channels = load_le<std::uint16_t>(bytes.data() + body + 2);
      parsed.info.sample_rate_hz = static_cast<int>(load_le<std::uint32_t>(bytes.data() + body + 4));
      bits = load_le<std::uint16_t>(bytes.data() + body + 14);
      if (tag == 0xFFFE) {
        if (size < 40) throw fail("malformed WAVE_FORMAT_EXTENSIBLE chunk");
        tag = load_le<std::uint16_t>(bytes.data() + body + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (body + size > bytes.size()) throw fail("truncated data chunk");
      parsed.data = bytes.data() + body;
      parsed.data_bytes = size;
      have_data = true;
    }
    pos = body + size + (size & 1u);
  }
  if (!have_fmt) throw fail("missing fmt chunk");
  if (!have_data) throw fail("missing data chunk");
  if (parsed.info.channels < 1) throw fail("zero channels");
  if (parsed.info.sample_rate_hz <= 0) throw fail("non-positive sample rate");
  if (tag == 1 && bits == 16) {
    parsed.info.encoding = WavEncoding::Pcm16;
  } else if (tag == 3 && bits == 32) {
    parsed.info.encoding = WavEncoding::Float32;
  } else {
    throw UnsupportedCodecError(describe_format(tag, bits));
  }
  const std::uint64_t frame_bytes = static_cast<std::uint64_t>(bits / 8) * parsed.info.channels;
  parsed.info.frames = parsed.data_bytes / frame_bytes;
  return parsed;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

double bessel_i0(double x) {
  const double half = x / 2.0;
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k < 500; ++k) {
    const double y = half / k;
    term *= y * y;
    const double next = sum + term;
    if (next == sum) break;
    sum = next;
  }
  return sum;
}

double sinc(double x) {
  if (x == 0.0) return 1.0;
  return std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

}  // namespace

void Waveform::validate() const {
  if (sample_rate_hz <= 0) throw ArgumentError("waveform sample rate must be positive");
  for (double v : samples) {
    if (!std::isfinite(v)) throw ArgumentError("waveform contains a non-finite sample");
  }
}

WavInfo read_wav_info(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_wav(bytes, path).info;
}

Waveform read_wav(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const ParsedWav parsed = parse_wav(bytes, path);
  const int channels = parsed.info.channels;
  Waveform w;
  w.sample_rate_hz = parsed.info.sample_rate_hz;
  w.samples.resize(parsed.info.frames);
  const bool pcm = parsed.info.encoding == WavEncoding::Pcm16;
  const std::size_t width = pcm ? 2 : 4;
  for (std::uint64_t f = 0; f < parsed.info.frames; ++f) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const char* p = parsed.data + (f * channels + c) * width;
      acc += pcm ? load_le<std::int16_t>(p) / 32768.0 : static_cast<double>(load_le<float>(p));
    }
    w.samples[f] = channels == 1 ? acc : acc / channels;
  }
  return w;
}

void write_wav(const Waveform& waveform, const std::filesystem::path& path, WavEncoding encoding) {
  waveform.validate();
  const bool pcm = encoding == WavEncoding::Pcm16;
  const std::uint16_t bits = pcm ? 16 : 32;
  const auto n = static_cast<std::uint32_t>(waveform.samples.size());
  const std::uint32_t data_bytes = n * (bits / 8);
  std::vector<char> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  store_le<std::uint32_t>(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  store_le<std::uint32_t>(out, 16);
  store_le<std::uint16_t>(out, pcm ? 1 : 3);
  store_le<std::uint16_t>(out, 1);
  store_le<std::uint32_t>(out, static_cast<std::uint32_t>(waveform.sample_rate_hz));
  store_le<std::uint32_t>(out, static_cast<std::uint32_t>(waveform.sample_rate_hz) * (bits / 8));
  store_le<std::uint16_t>(out, bits / 8);
  store_le<std::uint16_t>(out, bits);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  store_le<std::uint32_t>(out, data_bytes);
  for (double v : waveform.samples) {
    if (pcm) {
      const double clamped = std::clamp(v, -1.0, 1.0 - 0x1.0p-15);
      store_le<std::int16_t>(out, static_cast<std::int16_t>(std::lround(clamped * 32768.0)));
    } else {
      store_le<float>(out, static_cast<float>(v));
    }
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot write " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("write failed for " + path.string());
}

Waveform resample(const Waveform& waveform, int target_rate_hz, const ResamplerDesign& design) {
  if (waveform.sample_rate_hz <= 0 || target_rate_hz <= 0) {
    throw ArgumentError("resample needs positive source and target rates");
  }
  if (design.taps_per_phase < 2 || design.taps_per_phase % 2 != 0) {
    throw ArgumentError("taps per phase must be a positive even number");
  }
  if (target_rate_hz == waveform.sample_rate_hz) return waveform;
  Waveform out;
  out.sample_rate_hz = target_rate_hz;
  if (waveform.samples.empty()) return out;

  const int g = std::gcd(waveform.sample_rate_hz, target_rate_hz);
  const std::int64_t up = target_rate_hz / g;
  const std::int64_t down = waveform.sample_rate_hz / g;
  const int taps = design.taps_per_phase;
  const int half = taps / 2;
  // Cutoff in cycles per input sample.
  const double cutoff = 0.5 * std::min(1.0, static_cast<double>(up) / static_cast<double>(down));
  const double i0_beta = bessel_i0(design.kaiser_beta);

  std::vector<double> table(static_cast<std::size_t>(up * taps));
  for (std::int64_t phase = 0; phase < up; ++phase) {
    const double frac = static_cast<double>(phase) / static_cast<double>(up);
    double* row = table.data() + phase * taps;
    double sum = 0.0;
    for (int j = 0; j < taps; ++j) {
      const double d = frac + (half - 1) - j;
      const double x = d / half;
      const double window =
          std::abs(x) <= 1.0 ? bessel_i0(design.kaiser_beta * std::sqrt(1.0 - x * x)) / i0_beta : 0.0;
      row[j] = 2.0 * cutoff * sinc(2.0 * cutoff * d) * window;
      sum += row[j];
    }
    for (int j = 0; j < taps; ++j) row[j] /= sum;
  }

  const auto n_in = static_cast<std::int64_t>(waveform.samples.size());
  const std::int64_t n_out = (n_in * up + down - 1) / down;
  out.samples.resize(static_cast<std::size_t>(n_out));
  const double* x = waveform.samples.data();
  for (std::int64_t n = 0; n < n_out; ++n) {
    const std::int64_t pos = n * down;
    const std::int64_t base = pos / up;
    const std::int64_t phase = pos % up;
    const double* row = table.data() + phase * taps;
    const std::int64_t first = base - (half - 1);
    double acc = 0.0;
    if (first >= 0 && first + taps <= n_in) {
      for (int j = 0; j < taps; ++j) acc += row[j] * x[first + j];
    } else {
      for (int j = 0; j < taps; ++j) {
        const std::int64_t i = first + j;
        if (i >= 0 && i < n_in) acc += row[j] * x[i];
      }
    }
    out.samples[static_cast<std::size_t>(n)] = acc;
  }
  return out;
}

void peak_normalize(std::vector<double>& samples) {
  double peak = 0.0;
  for (double v : samples) peak = std::max(peak, std::abs(v));
  if (peak <= 0.0) return;
  for (double& v : samples) v /= peak;
}

std::vector<std::size_t> segment_offsets(std::size_t n_samples, std::size_t window_len,
                                         std::size_t hop, PadPolicy policy) {
  if (window_len < 1 || hop < 1) throw ArgumentError("segment window and hop must be positive");
  std::vector<std::size_t> offsets;
  std::size_t start = 0;
  for (; start + window_len <= n_samples; start += hop) offsets.push_back(start);
  if (policy == PadPolicy::PadLastWithZeros) {
    if (offsets.empty() && n_samples > 0) {
      offsets.push_back(0);
    } else if (start < n_samples && offsets.back() + window_len < n_samples) {
      offsets.push_back(start);
    }
  }
  return offsets;
}

std::vector<Segment> segment(const Waveform& waveform, const std::string& parent_id,
                             std::size_t window_len, std::size_t hop, PadPolicy policy) {
  std::vector<Segment> out;
  for (std::size_t offset : segment_offsets(waveform.samples.size(), window_len, hop, policy)) {
    Segment s;
    s.parent_id = parent_id;
    s.offset_samples = offset;
    s.samples.assign(window_len, 0.0);
    const std::size_t n = std::min(window_len, waveform.samples.size() - offset);
    std::copy_n(waveform.samples.begin() + static_cast<std::ptrdiff_t>(offset), n, s.samples.begin());
    out.push_back(std::move(s));
  }
  return out;
}

const char* label_name(Label label) { return label == Label::Normal ? "Normal" : "Abnormal"; }

Label parse_label_name(const std::string& text) {
  if (text == "Normal") return Label::Normal;
  if (text == "Abnormal") return Label::Abnormal;
  throw FormatError("unknown label '" + text + "'");
}

DatasetManifest::DatasetManifest(std::vector<ManifestEntry> entries, DatasetSource source)
    : entries_(std::move(entries)), source_(source) {
  std::sort(entries_.begin(), entries_.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < entries_.size(); ++i) {
    if (entries_[i].id == entries_[i - 1].id) {
      throw IngestionError("duplicate recording id " + entries_[i].id);
    }
  }
  counts_[Label::Normal] = 0;
  counts_[Label::Abnormal] = 0;
  for (const auto& e : entries_) ++counts_[e.label];
}

std::size_t DatasetManifest::count(Label label) const {
  const auto it = counts_.find(label);
  return it == counts_.end() ? 0 : it->second;
}

std::optional<std::size_t> DatasetManifest::index_of(const std::string& id) const {
  const auto it = std::lower_bound(entries_.begin(), entries_.end(), id,
                                   [](const ManifestEntry& e, const std::string& key) { return e.id < key; });
  if (it == entries_.end() || it->id != id) return std::nullopt;
  return static_cast<std::size_t>(it - entries_.begin());
}

const ManifestEntry& DatasetManifest::at(const std::string& id) const {
  const auto idx = index_of(id);
  if (!idx) throw ArgumentError("no recording with id " + id);
  return entries_[*idx];
}

LabeledRecording DatasetManifest::load(std::size_t index) const {
  const ManifestEntry& e = entries_.at(index);
  LabeledRecording rec;
  rec.id = e.id;
  rec.label = e.label;
  rec.waveform = e.waveform ? *e.waveform : read_wav(e.path);
  return rec;
}

std::uint64_t DatasetManifest::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : entries_) {
    h = fnv1a(h, e.id.data(), e.id.size());
    const auto label = static_cast<std::uint8_t>(e.label);
    h = fnv1a(h, &label, 1);
    if (e.waveform) {
      for (double v : e.waveform->samples) {
        const auto f = static_cast<float>(v);
        h = fnv1a(h, &f, sizeof f);
      }
    } else if (!e.path.empty()) {
      const auto bytes = read_file_bytes(e.path);
      h = fnv1a(h, bytes.data(), bytes.size());
    }
  }
  return h;
}

DatasetManifest load_physionet(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IngestionError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& item : fs::directory_iterator(root)) {
    const std::string name = item.path().filename().string();
    if (item.is_directory() && name.size() == 10 && name.rfind("training-", 0) == 0 &&
        name[9] >= 'a' && name[9] <= 'f') {
      dirs.push_back(item.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) {
    throw IngestionError("no training-a .. training-f directories under " + root.string());
  }
  std::vector<ManifestEntry> entries;
  for (const auto& dir : dirs) {
    const fs::path reference = dir / "REFERENCE.csv";
    std::ifstream in(reference);
    if (!in) throw IngestionError("missing REFERENCE.csv in " + dir.string());
    std::vector<std::string> missing;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      line = trim(line);
      if (line.empty()) continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos) {
        throw FormatError(reference.string() + ":" + std::to_string(line_no) + ": expected 'id,label'");
      }
      ManifestEntry e;
      e.id = trim(line.substr(0, comma));
      const std::string label = trim(line.substr(comma + 1));
      if (label == "-1") {
        e.label = Label::Normal;
      } else if (label == "1") {
        e.label = Label::Abnormal;
      } else {
        throw FormatError(reference.string() + ":" + std::to_string(line_no) + ": unknown label '" +
                          label + "'");
      }
      e.path = dir / (e.id + ".wav");
      if (!fs::exists(e.path)) {
        missing.push_back(e.id);
        continue;
      }
      const WavInfo info = read_wav_info(e.path);
      e.sample_rate_hz = info.sample_rate_hz;
      e.duration_s = static_cast<double>(info.frames) / info.sample_rate_hz;
      entries.push_back(std::move(e));
    }
    if (!missing.empty()) {
      std::string msg = "recordings referenced in " + reference.string() + " are missing:";
      for (const auto& id : missing) msg += " " + id;
      throw IngestionError(msg);
    }
  }
  return DatasetManifest(std::move(entries), DatasetSource::PhysioNet2016);
}

void write_manifest_csv(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,path,label,duration_s,sample_rate\n";
  out.precision(10);
  for (const auto& e : manifest.entries()) {
    out << e.id << ',' << e.path.string() << ',' << label_name(e.label) << ',' << e.duration_s << ','
        << e.sample_rate_hz << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

DatasetManifest read_manifest_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != "id,path,label,duration_s,sample_rate") {
    throw FormatError(path.string() + ": bad manifest header");
  }
  std::vector<ManifestEntry> entries;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 5) throw FormatError(path.string() + ": expected 5 columns in '" + line + "'");
    ManifestEntry e;
    e.id = fields[0];
    e.path = fields[1];
    e.label = parse_label_name(fields[2]);
    e.duration_s = std::stod(fields[3]);
    e.sample_rate_hz = std::stoi(fields[4]);
    entries.push_back(std::move(e));
  }
  return DatasetManifest(std::move(entries), DatasetSource::PhysioNet2016);
}

Waveform synthesize_recording(std::uint64_t seed, int index, bool with_murmur,
                              const SyntheticCorpusSpec& spec) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  Rng rng(derive_seed(seed, 2 * static_cast<std::uint64_t>(index)));
  Rng murmur_rng(derive_seed(seed, 2 * static_cast<std::uint64_t>(index) + 1));
  const double fs = spec.sample_rate_hz;

  Waveform w;
  w.sample_rate_hz = spec.sample_rate_hz;
  const double duration = rng.uniform(spec.min_duration_s, spec.max_duration_s);
  const auto n = static_cast<std::size_t>(std::lround(duration * fs));
  w.samples.assign(n, 0.0);

  // Pink noise: white Gaussian noise through Kellet's economy filter.
  double b0 = 0, b1 = 0, b2 = 0;
  std::vector<double> noise(n);
  double energy = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double white = rng.normal();
    b0 = 0.99765 * b0 + white * 0.0990460;
    b1 = 0.96300 * b1 + white * 0.2965164;
    b2 = 0.57000 * b2 + white * 1.0526913;
    noise[t] = b0 + b1 + b2 + white * 0.1848;
    energy += noise[t] * noise[t];
  }
  const double noise_scale = n > 0 ? spec.noise_rms / std::sqrt(energy / n) : 0.0;
  for (std::size_t t = 0; t < n; ++t) w.samples[t] = noise[t] * noise_scale;

  const double period = 60.0 / rng.uniform(60.0, 90.0);
  const double systole = rng.uniform(0.28, 0.34);
  const double s1_freq = rng.uniform(40.0, 70.0);
  const double s2_freq = rng.uniform(60.0, 110.0);
  const double sigma = rng.uniform(0.015, 0.02);
  double beat = rng.uniform(0.0, period);

  const auto add_click = [&](double centre, double freq, double amp) {
    const double phase = rng.uniform(0.0, two_pi);
    const auto lo = static_cast<std::int64_t>(std::floor((centre - 4 * sigma) * fs));
    const auto hi = static_cast<std::int64_t>(std::ceil((centre + 4 * sigma) * fs));
    for (std::int64_t t = std::max<std::int64_t>(lo, 0); t <= hi && t < static_cast<std::int64_t>(n); ++t) {
      const double dt = t / fs - centre;
      w.samples[t] += amp * std::exp(-0.5 * dt * dt / (sigma * sigma)) * std::sin(two_pi * freq * dt + phase);
    }
  };

  const double murmur_freq = murmur_rng.uniform(420.0, 580.0);
  const double murmur_amp = spec.murmur_amplitude * murmur_rng.uniform(0.8, 1.2);
  std::vector<double> beats;
  for (; beat < duration; beat += period) {
    beats.push_back(beat);
    add_click(beat, s1_freq, rng.uniform(0.9, 1.1));
    add_click(beat + systole, s2_freq, rng.uniform(0.6, 0.8));
  }
  if (with_murmur) {
    constexpr int kPartials = 5;
    for (double start_beat : beats) {
      const double start = start_beat + 0.06;
      const double stop = start_beat + systole - 0.04;
      double freqs[kPartials];
      double phases[kPartials];
      for (int p = 0; p < kPartials; ++p) {
        freqs[p] = murmur_freq + murmur_rng.uniform(-60.0, 60.0);
        phases[p] = murmur_rng.uniform(0.0, two_pi);
      }
      const auto lo = static_cast<std::int64_t>(std::ceil(start * fs));
      const auto hi = static_cast<std::int64_t>(std::floor(stop * fs));
      for (std::int64_t t = std::max<std::int64_t>(lo, 0); t <= hi && t < static_cast<std::int64_t>(n); ++t) {
        const double u = (t / fs - start) / (stop - start);
        const double envelope = 0.5 - 0.5 * std::cos(two_pi * u);
        double carrier = 0.0;
        for (int p = 0; p < kPartials; ++p) carrier += std::sin(two_pi * freqs[p] * t / fs + phases[p]);
        w.samples[t] += murmur_amp * envelope * carrier / std::sqrt(static_cast<double>(kPartials));
      }
    }
  }
  return w;
}

DatasetManifest generate_synthetic(std::uint64_t seed, int n_per_class, const SyntheticCorpusSpec& spec) {
  if (n_per_class < 1) throw ArgumentError("n_per_class must be positive");
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < 2 * n_per_class; ++i) {
    ManifestEntry e;
    char id[32];
    std::snprintf(id, sizeof id, "syn%05d", i);
    e.id = id;
    e.label = i % 2 == 0 ? Label::Normal : Label::Abnormal;
    auto wave = std::make_shared<Waveform>(
        synthesize_recording(seed, i, e.label == Label::Abnormal, spec));
    e.sample_rate_hz = wave->sample_rate_hz;
    e.duration_s = wave->duration_s();
    e.waveform = std::move(wave);
    entries.push_back(std::move(e));
  }
  return DatasetManifest(std::move(entries), DatasetSource::Synthetic);
}

void write_physionet_layout(const DatasetManifest& manifest, const std::filesystem::path& dir) {
  const auto sub = dir / "training-a";
  std::filesystem::create_directories(sub);
  std::ofstream ref(sub / "REFERENCE.csv");
  if (!ref) throw IoError("cannot write " + (sub / "REFERENCE.csv").string());
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto rec = manifest.load(i);
    write_wav(rec.waveform, sub / (rec.id + ".wav"), WavEncoding::Float32);
    ref << rec.id << ',' << (rec.label == Label::Normal ? "-1" : "1") << '\n';
  }
  if (!ref) throw IoError("write failed for REFERENCE.csv");
}

}  // namespace iconnet::audio
