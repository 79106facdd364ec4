#pragma once

#include <string>
#include <vector>

#include "s3t/config.hpp"
#include "s3t/tensor.hpp"
#include "s3t/topology.hpp"

namespace s3t {

// One recorded motion clip: frames are [T_raw, 3, N, M] joint coordinates in
// meters, with the person axis innermost.
struct SkeletonSequence {
  Tensor<float> frames;
  Index label = 0;
  Index subject = 0;
  Index view = 0;
};

using Dataset = std::vector<SkeletonSequence>;

// Binary clip container; see write_skl for the exact layout.
Dataset read_skl(const std::string& path, Index expected_nodes = -1);
void write_skl(const std::string& path, const Dataset& data);

// Deterministic sinusoidal-limb dataset realizing spec.classes.
Dataset synth_generate(const SynthSpec& spec);

// Uniform index resampling (or trailing zero padding) to exactly T frames,
// after translating the whole clip so person 1's root starts at the origin.
Tensor<float> resample_and_center(const Tensor<float>& frames, Index T,
                                  Index root);

// Cross-subject protocol: even subject ids train, odd ones test.
void split_by_subject(const Dataset& data, std::vector<Index>& train,
                      std::vector<Index>& test);

// Stacks the chosen sequences into the model input layout [T, B*M, 3, N].
struct Batch {
  Tensor<float> x;
  std::vector<Index> labels;
};
Batch make_batch(const Dataset& data, const std::vector<Index>& indices,
                 Index T, Index root);

}  // namespace s3t
