#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "recal3d/losses.hpp"
#include "recal3d/tensor.hpp"

namespace recal3d {

// Synthetic-volume recipe: background + one or more large ellipsoids + one
// small ellipsoid (last class), with class-specific mean intensity and
// additive uniform noise. Large structures use integer centers; the small
// structure is centered on a half-integer grid point, which makes it an
// exact 2x2x2 voxel blob for any radius in the default range. Defaults
// give a small-class voxel share well under 1% and a large/small imbalance
// ratio of at least 20 for every seed.
struct PhantomSpec {
    int h = 16, w = 16, d = 16;              // divisible by 4
    int n_classes = 4;                       // background + >=1 large + 1 small
    double large_radius_min = 3.5;
    double large_radius_max = 4.0;
    double small_radius_min = 0.9;
    double small_radius_max = 1.3;
    double noise_amplitude = 0.05;
    std::vector<double> class_means;         // empty -> evenly spaced in [0.15, 0.9]

    void validate() const;
    std::vector<double> resolved_means() const;
};

struct Phantom {
    Tensor intensity;                        // (1,H,W,D), values in [0,1]
    LabelVolume labels;
    std::vector<std::int64_t> class_counts;
    std::uint64_t seed = 0;
};

Phantom generate(const PhantomSpec& spec, std::uint64_t seed);

enum class AugmentKind { Rot90, SmallRotation, Elastic };

// rot90: exact axis-aligned rotation. small_rotation: +-10 degrees about a
// random axis, trilinear intensity / nearest-neighbor labels. elastic:
// coarse 4^3 displacement grid, trilinearly upsampled, same interpolation
// split; displacements bounded by max_displacement voxels.
Phantom augment(const Phantom& p, Rng& rng, AugmentKind kind,
                double max_displacement = 2.0);

}  // namespace recal3d
