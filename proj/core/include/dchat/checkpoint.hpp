#pragma once

// Versioned binary checkpoint:
//   "DCHATCKP" | u32 version | str kind | str config-json | u32 n_vocab {str}
//   | u32 n_arrays { str name | i64 rows | i64 cols | f64[rows*cols] col-major }
// where str is u32 length followed by bytes. All integers little-endian.

#include "dchat/nn.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dchat {

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  nlohmann::json config;
  std::vector<std::string> vocab;
  std::map<std::string, ad::Matrix> arrays;

  void store(const nn::ParamList& params);
  /// Copy arrays into params; every parameter must be present with its shape.
  void restore(const nn::ParamList& params) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dchat
