#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "cotmae/nn/tensor.hpp"

namespace cotmae {

using json = nlohmann::ordered_json;

/// Little-endian binary container:
///   "CTMAE1" | u32 version | u64 len | JSON meta | u32 count |
///   count x (u32 name_len | name | u32 rank | rank x u32 dim | raw data)
/// Raw data is f32 or f64 as named by meta["dtype"].
inline constexpr char kCheckpointMagic[] = "CTMAE1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct NamedTensor {
  std::string name;
  const nn::Tensor<T>* tensor = nullptr;
};

template <typename T>
std::string dtype_name();

/// Writes via a temporary file and rename so a crash never leaves a partial
/// checkpoint under the final name. meta["dtype"] is set from T.
template <typename T>
void write_checkpoint(const std::filesystem::path& path, json meta,
                      const std::vector<NamedTensor<T>>& tensors);

struct RawTensor {
  std::string name;
  nn::Shape shape;
  std::vector<char> bytes;
};

struct RawCheckpoint {
  json meta;
  std::string dtype;
  std::vector<RawTensor> tensors;

  const RawTensor* find(const std::string& name) const;
  /// Copies a stored tensor into dst, converting dtype if needed. Throws
  /// naming the tensor when it is missing or its shape differs.
  template <typename T>
  void load(const std::string& name, nn::Tensor<T>& dst) const;
};

/// Throws "bad magic", on unsupported versions, and on truncation.
RawCheckpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace cotmae
