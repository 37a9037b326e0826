#pragma once

#include <cstdint>
#include <vector>

#include "recal3d/tensor.hpp"

namespace recal3d {

// Integer segmentation labels over an (H,W,D) grid, one class id per voxel.
struct LabelVolume {
    int h = 0, w = 0, d = 0;
    std::vector<std::uint8_t> values;

    static LabelVolume filled(int h, int w, int d, std::uint8_t cls = 0) {
        LabelVolume l;
        l.h = h;
        l.w = w;
        l.d = d;
        l.values.assign(static_cast<std::size_t>(h) * w * d, cls);
        return l;
    }
    std::size_t count() const { return values.size(); }
    std::size_t offset(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * w + j) * d + k;
    }
    std::uint8_t& at(int i, int j, int k) { return values[offset(i, j, k)]; }
    std::uint8_t at(int i, int j, int k) const { return values[offset(i, j, k)]; }
    bool operator==(const LabelVolume&) const = default;
};

std::vector<std::int64_t> class_histogram(const LabelVolume& labels, int n_classes);

// w_c = median(present class frequencies) / freq_c; absent classes get
// weight 0 and do not enter the median. Even count: mean of the middle two.
std::vector<double> median_freq_weights(const std::vector<std::int64_t>& class_counts);

// -(1/N) sum_v w_{y(v)} log_softmax(logits)(y(v), v)
Tensor weighted_ce(const Tensor& logits, const LabelVolume& labels,
                   const std::vector<double>& weights);

// 1 - (1/K) sum_c (2 sum p_c g_c + smooth) / (sum p_c + sum g_c + smooth)
Tensor soft_dice_loss(const Tensor& logits, const LabelVolume& labels,
                      double smooth = 1e-5);

Tensor combined_loss(const Tensor& logits, const LabelVolume& labels,
                     const std::vector<double>& weights, double smooth = 1e-5);

// Argmax over channels per voxel; ties to the lowest class id.
LabelVolume argmax_labels(const Tensor& logits);

}  // namespace recal3d
