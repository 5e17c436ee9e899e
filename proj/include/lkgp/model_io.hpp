#pragma once

#include <optional>
#include <string>

#include "lkgp/grid.hpp"
#include "lkgp/kernels.hpp"
#include "lkgp/model.hpp"

namespace lkgp {

/// Kernel spec JSON: {"family": "se" | "periodic" | "product" | "icm", ...}.
std::string kernel_to_json(const KernelSpec& spec);
KernelSpec kernel_from_json(const std::string& text);

/// Everything needed to re-create a fitted model next to its dataset.
struct Checkpoint {
  KernelSpec spatial_kernel;
  KernelSpec temporal_kernel;
  std::vector<double> params;  // unconstrained, including raw noise
  Standardization standardization;
  std::optional<ObservationMask> mask;
};

std::string checkpoint_to_json(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_json(const std::string& text);

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace lkgp
