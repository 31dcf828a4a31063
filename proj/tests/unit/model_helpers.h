#pragma once

// Flat views of model parameters for finite-difference checks.

#include <vector>

#include "sparseattn/denoiser.h"

namespace testing_helpers {

inline std::vector<double*> param_slots(sparseattn::DenoiserParams& p) {
  std::vector<double*> out;
  p.for_each([&](const std::string&, sparseattn::Tensor& t) {
    for (double& x : t.data()) out.push_back(&x);
  });
  return out;
}

inline std::vector<double> flatten(const sparseattn::DenoiserParams& p) {
  std::vector<double> out;
  p.for_each([&](const std::string&, const sparseattn::Tensor& t) {
    out.insert(out.end(), t.data().begin(), t.data().end());
  });
  return out;
}

// Every `stride`-th coordinate, offset by `phase`.
inline std::vector<std::size_t> strided(std::size_t n, std::size_t stride, std::size_t phase) {
  std::vector<std::size_t> idx;
  for (std::size_t i = phase % stride; i < n; i += stride) idx.push_back(i);
  return idx;
}

}  // namespace testing_helpers
