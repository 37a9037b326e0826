#pragma once

#include <string>

#include "recal3d/segnet.hpp"

namespace recal3d {

// "R3DW" weights container: magic, version u32 = 1, config digest u64,
// tensor count u32, then per tensor: name (u32 length + bytes), four u32
// extents, little-endian f64 data, in build order.

void save_weights(const std::string& path, SegNet& net);

// Throws if the file's digest does not match net.config().digest() or any
// tensor name/shape disagrees with the network.
void load_weights(const std::string& path, SegNet& net);

}  // namespace recal3d
