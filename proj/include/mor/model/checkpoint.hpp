#pragma once

#include <string>

#include "mor/model/model.hpp"

namespace mor::model {

// Layout (little-endian): magic "MORCKPT1", u32 version, u32 length +
// canonical config text, u32 tensor count, then per tensor u32 length +
// UTF-8 name, u32 rank, u64 extents, float32 values. The loss-free bias is
// stored as the tensor "router.bias".
void save_checkpoint(const Model& model, const std::string& path);

// Throws FormatError on a malformed file, unknown or missing tensors, or
// shape mismatches.
Model load_checkpoint(const std::string& path);

}  // namespace mor::model
