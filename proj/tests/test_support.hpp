#pragma once

#include "skeleguide/backbone.hpp"

namespace skeleguide::testing {

inline ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_blocks = 1;
  c.lora_rank = 2;
  c.image_size = 16;
  c.seed = seed;
  return c;
}

/// Overwrites every parameter (zero-initialized ones included) with noise so
/// that all paths carry signal, as in a trained model.
template <class T>
void randomize(Backbone<T>& model, std::uint64_t seed, double std = 0.2, bool include_lora_b = false) {
  Rng rng(seed);
  for (const auto& [name, v] : model.params()) {
    if (!include_lora_b && name.compare(0, 5, "lora/") == 0 && name.back() == 'B') continue;
    auto& m = model.param(name).mutable_value();
    const double s = name.find("pos") != std::string::npos || name.find("embed") != std::string::npos ? 1.0 : std;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(s * rng.normal());
  }
}

template <class T>
ag::Mat<T> random_tokens(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  ag::Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal());
  return m;
}

}  // namespace skeleguide::testing
