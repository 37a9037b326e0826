#pragma once

#include <array>
#include <vector>

#include "recal3d/losses.hpp"

namespace recal3d {

struct Voxel {
    int i, j, k;
};

// Mask voxels with at least one face-adjacent (6-connectivity) non-mask
// neighbor; the volume border counts as non-mask.
std::vector<Voxel> boundary_voxels(const LabelVolume& labels, int cls);

// 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty.
double volumetric_dice(const LabelVolume& pred, const LabelVolume& gt, int cls);

// Fraction of boundary voxels of each mask whose Euclidean center distance
// (scaled by spacing) to the other mask's boundary is <= tolerance.
// Both masks empty -> 1.0, exactly one empty -> 0.0.
double surface_dice(const LabelVolume& pred, const LabelVolume& gt, int cls,
                    double tolerance, std::array<double, 3> spacing = {1.0, 1.0, 1.0});

}  // namespace recal3d
