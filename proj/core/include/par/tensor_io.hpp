#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "par/tensor.hpp"

namespace par::tensor {

// Flat binary container of named float64 arrays (little endian) plus a JSON
// manifest at <path>.json. Round trips are bit exact. `extra_json_object`
// must be a serialized JSON object; it is stored under "extra" in the
// manifest for callers like the model checkpoint sidecar.
void save_arrays(const std::filesystem::path& path,
                 std::span<const NamedTensor> arrays,
                 std::string_view extra_json_object = "{}");

struct ArrayBundle {
  std::vector<std::pair<std::string, Tensor>> arrays;
  std::string extra_json;

  const Tensor* find(std::string_view name) const;
};

ArrayBundle load_arrays(const std::filesystem::path& path);

}  // namespace par::tensor
