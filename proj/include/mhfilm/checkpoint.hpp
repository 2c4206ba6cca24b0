#pragma once

// Portable binary checkpoints: magic "MHFM", u32 version, then
// length-prefixed named tensors as little-endian 64-bit floats. Model
// parameters, batch-norm running statistics ("state.*"), and optimizer
// moments ("opt.*") all travel as named tensors.

#include <stdexcept>
#include <string>
#include <vector>

#include "mhfilm/film.hpp"
#include "mhfilm/train.hpp"

namespace mhfilm::checkpoint {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

void save(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load(const std::string& path);

// Writes params + batch-norm state (+ optimizer moments and step when adam
// is given).
void save_model(const std::string& path, film::Model& model,
                train::Adam* adam);

// Restores by name; a missing tensor or differing shape raises
// CheckpointError naming the offender.
void load_model(const std::string& path, film::Model& model,
                train::Adam* adam);

}  // namespace mhfilm::checkpoint
