#pragma once

#include <cstdint>
#include <string>

#include "neuralbayes/nn.hpp"

namespace nb {

struct CheckpointMeta {
    std::uint64_t seed = 0;
    /// Free-form JSON object stored verbatim (data lift, standardization, config, ...).
    std::string extra_json = "{}";
};

/// Writes `<prefix>.json` (layer specs, shapes, taps) and `<prefix>.bin` (every tensor,
/// batch norm running statistics included, as little-endian float64 in declaration order).
void save_checkpoint(const std::string& prefix, const Network& net, const CheckpointMeta& meta = {});
Network load_checkpoint(const std::string& prefix, CheckpointMeta* meta = nullptr);

}  // namespace nb
