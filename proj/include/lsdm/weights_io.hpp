#pragma once

// Weight container: a text header (magic line, config key-value pairs, the
// vocabulary, a tensor directory of name/shape/offset) terminated by "end",
// followed by raw little-endian float32 tensor data in directory order.

#include "lsdm/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace lsdm {

struct WeightFile {
  ModelParams params;
  std::vector<std::string> vocab;
};

std::string serialize_weights(const ModelParams& params, const std::vector<std::string>& vocab);
WeightFile deserialize_weights(const std::string& bytes);

void save_weights(const std::filesystem::path& path, const ModelParams& params,
                  const std::vector<std::string>& vocab);
WeightFile load_weights(const std::filesystem::path& path);

}  // namespace lsdm
