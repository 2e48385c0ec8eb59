#pragma once

#include <stdexcept>
#include <string>

#include "stochnorm/network.hpp"

namespace stochnorm {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Versioned container: 8-byte magic, little-endian u32 schema version, u64
// manifest length, JSON manifest (architecture, kinds, tensor directory,
// RNG state), then raw little-endian float64 arrays in directory order.
// Restores parameters, variational (s, u), running statistics and the RNG
// state string exactly.
void checkpoint_save(const Network& network, const std::string& path,
                     const std::string& rng_state = {});

// Rebuilds the network from the manifest. Malformed or truncated files
// raise CheckpointError.
Network checkpoint_load(const std::string& path, std::string* rng_state = nullptr);

// Loads into an existing network; the checkpoint's architecture hash must
// match or a CheckpointError is raised.
void checkpoint_restore(Network& network, const std::string& path,
                        std::string* rng_state = nullptr);

}  // namespace stochnorm
