#pragma once

// Named-tensor container. File layout: "QGSC", u8 version, u32 tensor count,
// then per tensor u16 name length, name bytes, u8 rank, u32 dims, f32 values,
// all little-endian.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qgs/autodiff.hpp"
#include "qgs/tensor.hpp"

namespace qgs {

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const;
  void add(std::string name, Tensor<float> value);
  bool operator==(const Checkpoint&) const = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint to_checkpoint(const ParamSet<float>& params);
// Every parameter must be present with a matching shape; unknown names are
// an error.
void apply_checkpoint(const Checkpoint& ckpt, ParamSet<float>& params);

}  // namespace qgs
