#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "modnet/params.hpp"

namespace modnet {

/// Flat parameter container: an 8-byte magic, a little-endian u64 header
/// length, a JSON header {format_version, seed, hyperparams, tensors:[{name,
/// shape, offset}]}, then the concatenated little-endian float32 payload.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const nlohmann::json& hyperparams, uint64_t seed);

/// Loads into an empty store (tensors created from the header) and returns
/// the full JSON header.
nlohmann::json load_checkpoint(const std::string& path, ParamStore& params);

}  // namespace modnet
