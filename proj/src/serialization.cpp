#include "iconnet/serialization.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "iconnet/errors.hpp"

namespace iconnet::model {

namespace {

constexpr char kMagic[4] = {'I', 'C', 'O', 'N'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return bytes_.size() - pos_; }

  void need(std::uint64_t n, const char* what) const {
    if (remaining() < n) {
      throw CorruptModelError(std::string("truncated ") + what + " (need " + std::to_string(n) + " bytes, have " +
                                  std::to_string(remaining()) + ")",
                              pos_);
    }
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string take(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& bytes_;
  std::uint64_t pos_ = 0;
};

template <typename Model>
nlohmann::json tensor_table(const Model& model) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& p : model.parameters()) table.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  return table;
}

template <typename Model>
std::string encode(const Model& model, nlohmann::json metadata) {
  metadata["format"] = "iconnet-model";
  metadata["tensors"] = tensor_table(model);
  const std::string meta = metadata.dump();
  std::string out(kMagic, 4);
  put_u32(out, kModelFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  for (const auto& p : model.parameters()) {
    const auto& shape = p.tensor.shape();
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (Index i = 0; i < p.tensor.size(); ++i) put_f32(out, p.tensor.values()[i]);
  }
  return out;
}

nlohmann::json base_metadata(const char* kind, nlohmann::json config, const ModelInfo& info) {
  return {{"kind", kind}, {"config", std::move(config)}, {"provenance", info.provenance}, {"metrics", info.metrics}};
}

// Reads every blob into staging arrays, checking shapes against the freshly
// built model; parameters are only assigned once the whole file checks out.
template <typename Model>
void read_tensors(Reader& in, const nlohmann::json& table, Model& model) {
  auto params = model.parameters();
  if (!table.is_array() || table.size() != params.size()) {
    throw CorruptModelError("tensor table does not match the model layout", in.offset());
  }
  std::vector<grad::Array<float>> staged;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const auto& expected = params[t].tensor.shape();
    if (table[t].value("name", "") != params[t].name) {
      throw CorruptModelError("tensor " + std::to_string(t) + " should be '" + params[t].name + "'", in.offset());
    }
    const auto at = in.offset();
    const std::uint32_t rank = in.u32("tensor rank");
    if (rank != expected.size()) {
      throw CorruptModelError("tensor '" + params[t].name + "' has rank " + std::to_string(rank), at);
    }
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto dim_at = in.offset();
      const std::uint32_t d = in.u32("tensor dims");
      if (d != static_cast<std::uint64_t>(expected[r])) {
        throw CorruptModelError("tensor '" + params[t].name + "' dimension mismatch, expected " +
                                    grad::shape_string(expected),
                                dim_at);
      }
    }
    const auto n = static_cast<std::uint64_t>(params[t].tensor.size());
    const std::string blob = in.take(4 * n, "tensor payload");
    grad::Array<float> values(static_cast<Index>(n));
    for (std::uint64_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[4 * i + b])) << (8 * b);
      values[static_cast<Index>(i)] = std::bit_cast<float>(bits);
    }
    staged.push_back(std::move(values));
  }
  if (in.remaining() != 0) throw CorruptModelError("trailing bytes after last tensor", in.offset());
  for (std::size_t t = 0; t < params.size(); ++t) params[t].tensor.values() = std::move(staged[t]);
}

}  // namespace

std::string encode_model(const IConNet<float>& model, const ModelInfo& info) {
  return encode(model, base_metadata("iconnet", to_json(model.config()), info));
}

std::string encode_model(const MfccFfn<float>& model, const ModelInfo& info) {
  auto meta = base_metadata("mfcc-ffn", to_json(model.config()), info);
  const auto& mean = model.feature_mean();
  const auto& sd = model.feature_std();
  meta["standardizer"] = {{"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
                          {"std", std::vector<double>(sd.data(), sd.data() + sd.size())}};
  return encode(model, std::move(meta));
}

std::string encode_model(const AnyModel& model, const ModelInfo& info) {
  return std::visit([&](const auto& m) { return encode_model(m, info); }, model);
}

LoadedModel decode_model(const std::string& bytes) {
  Reader in(bytes);
  const std::string magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw CorruptModelError("bad magic, not a model file", 0);
  const std::uint32_t version = in.u32("version");
  if (version != kModelFormatVersion) {
    throw CorruptModelError("unsupported format version " + std::to_string(version), 4);
  }
  const std::uint32_t meta_len = in.u32("metadata length");
  const auto meta_at = in.offset();
  const std::string meta_text = in.take(meta_len, "metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptModelError(std::string("metadata is not valid JSON: ") + e.what(), meta_at);
  }
  if (!meta.is_object() || meta.value("format", "") != "iconnet-model") {
    throw CorruptModelError("metadata lacks the model format tag", meta_at);
  }

  ModelInfo info;
  info.provenance = meta.value("provenance", nlohmann::json::object());
  info.metrics = meta.value("metrics", nlohmann::json::object());
  const auto kind = meta.value("kind", "");
  const auto tensors = meta.value("tensors", nlohmann::json::array());
  try {
    if (kind == "iconnet") {
      IConNet<float> model(iconnet_config_from_json(meta.at("config")));
      read_tensors(in, tensors, model);
      return LoadedModel{std::move(model), std::move(info), std::move(meta)};
    }
    if (kind == "mfcc-ffn") {
      MfccFfn<float> model(mfcc_ffn_config_from_json(meta.at("config")));
      const auto& st = meta.at("standardizer");
      const auto mean = st.at("mean").get<std::vector<double>>();
      const auto sd = st.at("std").get<std::vector<double>>();
      model.set_standardizer(Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Index>(mean.size())),
                             Eigen::Map<const Eigen::VectorXd>(sd.data(), static_cast<Index>(sd.size())));
      read_tensors(in, tensors, model);
      return LoadedModel{std::move(model), std::move(info), std::move(meta)};
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptModelError(std::string("malformed metadata: ") + e.what(), meta_at);
  } catch (const ConfigError& e) {
    throw CorruptModelError(std::string("invalid model config: ") + e.what(), meta_at);
  } catch (const ShapeError& e) {
    throw CorruptModelError(e.what(), meta_at);
  }
  throw CorruptModelError("unknown model kind '" + kind + "'", meta_at);
}

void save_model(const AnyModel& model, const std::filesystem::path& path, const ModelInfo& info) {
  const std::string bytes = encode_model(model, info);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write model file " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing model file " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move model file into place at " + path.string() + ": " + ec.message());
}

LoadedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_model(buf.str());
}

}  // namespace iconnet::model
