#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "iconnet/experiment.hpp"
#include "iconnet/grad.hpp"
#include "iconnet/model.hpp"

namespace iconnet::cli {

/// Resolved settings for a run: built-in defaults, then an optional INI file
/// ([data], [model], [train], [run] sections), then `--set section.key=value`.
class RunConfig {
 public:
  /// `synthetic` selects the lighter training preset used for the generated corpus.
  explicit RunConfig(bool synthetic = false);

  void merge_file(const std::filesystem::path& path);
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  std::string get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;

  model::IConNetConfig iconnet() const;
  model::MfccFfnConfig mfcc_ffn() const;
  experiment::TrainConfig train() const;

  /// INI text of every key, sorted within fixed sections.
  std::string to_ini() const;
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Full-loss gradient check of a small double-precision IConNet.
grad::GradCheckResult gradcheck_iconnet(const model::IConNetConfig& config, std::uint64_t seed, double epsilon);

/// Entry point behind the `iconnet` executable. Returns 0 on success, 1 for
/// usage errors, 2 for runtime failures; diagnostics go to `err`.
int cmd_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cmd_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace iconnet::cli
