#pragma once

// Small labeled fixtures for distillation tests.

#include <cstdint>

#include "audistill/distill.hpp"
#include "audistill/rng.hpp"

namespace toy {

using namespace audistill;

inline ArchDescriptor toy_arch() {
  ArchDescriptor a;
  a.depth = 1;
  a.width = 3;
  a.in_height = 4;
  a.in_width = 4;
  a.n_classes = 2;
  return a;
}

// Two Gaussian blobs in a 1x4x4 feature space: class means +-0.8 on the
// left/right half.
inline LabeledSet two_blobs(std::size_t per_class, std::uint64_t seed) {
  Rng rng(seed);
  LabeledSet s;
  s.item_shape = {1, 4, 4};
  for (int c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t j = 0; j < 16; ++j) {
        const double mu = ((j % 4 < 2) == (c == 0)) ? 0.8 : -0.8;
        s.features.push_back(static_cast<float>(mu + 0.4 * rng.normal()));
      }
      s.labels.push_back(c);
    }
  }
  return s;
}

inline TrajectoryBuffer toy_buffer(const LabeledSet& data, std::size_t teachers, std::size_t epochs) {
  TrajectoryBuffer b;
  for (std::size_t t = 0; t < teachers; ++t) {
    b.trajectories.push_back(train_epochs(build(toy_arch(), 10 + t), data, epochs, 0.05, 8, 20 + t));
  }
  return b;
}

}  // namespace toy
