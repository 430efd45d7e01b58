#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protohead/config.hpp"

namespace protohead {

struct TensorShape {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  bool operator==(const TensorShape&) const = default;
};

struct ParamSlot {
  std::string name;
  TensorShape shape;
  bool trainable = true;
};

// Names and shapes of every head parameter, in serialization order.
std::vector<ParamSlot> parameter_layout(const HeadConfig& cfg);

}  // namespace protohead
