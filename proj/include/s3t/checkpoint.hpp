#pragma once

#include <string>
#include <utility>
#include <vector>

#include "s3t/config.hpp"
#include "s3t/model.hpp"

namespace s3t {

// Everything a resumable run needs: the model configuration, progress
// counters, and a named tensor set (parameters, norm statistics, and
// optionally optimizer moments under "opt/m/..." and "opt/v/...").
struct CheckpointData {
  ModelConfig config;
  Index epoch = 0;
  std::uint64_t opt_step = 0;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const;
};

// File layout: "S3T1" magic, little-endian u64 header length, a JSON header
// {format_version, config, epoch, opt_step, params: [{name, shape, offset}]}
// where offset is the byte position inside the payload, then the payload of
// little-endian 32-bit floats. Writes go to a temp file renamed into place.
void write_checkpoint(const std::string& path, const CheckpointData& ck);
CheckpointData read_checkpoint(const std::string& path);

CheckpointData snapshot_model(Model<float>& model, Index epoch = 0);
void restore_model(Model<float>& model, const CheckpointData& ck);

}  // namespace s3t
