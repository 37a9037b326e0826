#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "recal3d/tensor.hpp"

namespace recal3d {

struct GradCheckCase {
    std::string name;
    double max_rel_err = 0.0;
    double tol = 1e-4;
    bool passed() const { return max_rel_err < tol; }
};

// Finite-difference checks for every tensor op and every recalibration
// block (all PE pooling x aggregation variants) on random inputs of
// `channels` x extent^3. Kinked ops (relu, max pools) get inputs with
// well-separated values so central differences never straddle a kink.
std::vector<GradCheckCase> run_gradient_suite(std::uint64_t seed, int channels = 4,
                                              int extent = 5, double tol = 1e-4);

// Random tensor whose entries have distinct magnitudes >= 0.1 with
// pairwise gaps large relative to the finite-difference step. Tensors
// built with different `phase` values in [0,1) also have no magnitude in
// common, so elementwise max between them never ties.
Tensor kink_safe_tensor(Shape4 shape, Rng& rng, double phase = 0.0);

}  // namespace recal3d
