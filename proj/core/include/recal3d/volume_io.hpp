#pragma once

#include <string>

#include "recal3d/losses.hpp"
#include "recal3d/tensor.hpp"

namespace recal3d {

// "VOL3" container: magic, version u32 = 1, dtype u8 (0 = little-endian
// f64, 1 = u8 labels), rank u8 = 4, four u32 extents (C,H,W,D), raw data.
// Labels are stored with C = 1.

struct VolumeFile {
    bool is_labels = false;
    Tensor real;        // valid when !is_labels
    LabelVolume labels; // valid when is_labels
};

void save_volume(const std::string& path, const Tensor& t);
void save_volume(const std::string& path, const LabelVolume& l);
VolumeFile load_volume(const std::string& path);

}  // namespace recal3d
