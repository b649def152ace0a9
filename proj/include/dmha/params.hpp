#pragma once

#include <string>
#include <vector>

#include "dmha/autodiff.hpp"
#include "dmha/tensor.hpp"

namespace dmha {

// A trainable tensor with its stable checkpoint name.
struct NamedParam {
  std::string name;
  ad::Var var;
};

// A non-trainable tensor carried in checkpoints (running statistics).
struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

}  // namespace dmha
