#pragma once

#include <string>

#include "nats/model.hpp"

namespace nats {

// Single-file container: magic, a JSON header {config, step, seed, arrays}
// and the named parameter tensors as raw little-endian doubles in
// param_views order.
void save_checkpoint(ModelState &state, const std::string &path, int64_t step, uint64_t seed);

struct LoadedCheckpoint {
    ModelState state;
    int64_t step = 0;
    uint64_t seed = 0;
};
LoadedCheckpoint load_checkpoint(const std::string &path);

// Standalone router export {layers:[{layer, weight, bias}]} so routers can be
// swapped without re-saving the trunk.
void export_routers(const ModelState &state, const std::string &path);
void import_routers(ModelState &state, const std::string &path);

std::string config_to_json(const ModelConfig &config);
ModelConfig config_from_json(const std::string &text);

}  // namespace nats
