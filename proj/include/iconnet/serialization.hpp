#pragma once

// Model file layout, all integers little-endian:
//   "ICON" | version u32 | metadata length u32 | metadata (UTF-8 JSON)
//   | per parameter tensor, in metadata order: rank u32, dims u32 x rank, f32 payload

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>

#include "iconnet/model.hpp"
#include "json.hpp"

namespace iconnet::model {

inline constexpr std::uint32_t kModelFormatVersion = 1;

using AnyModel = std::variant<IConNet<float>, MfccFfn<float>>;

struct ModelInfo {
  nlohmann::json provenance = nlohmann::json::object();
  nlohmann::json metrics = nlohmann::json::object();
};

struct LoadedModel {
  AnyModel model;
  ModelInfo info;
  nlohmann::json metadata;
};

std::string encode_model(const IConNet<float>& model, const ModelInfo& info = {});
std::string encode_model(const MfccFfn<float>& model, const ModelInfo& info = {});
std::string encode_model(const AnyModel& model, const ModelInfo& info = {});

/// Validates the whole buffer before building anything; throws
/// CorruptModelError carrying the byte offset of the first problem.
LoadedModel decode_model(const std::string& bytes);

/// Writes through a temporary file renamed into place.
void save_model(const AnyModel& model, const std::filesystem::path& path, const ModelInfo& info = {});
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace iconnet::model
