#include "recal3d/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace recal3d {

namespace {

void check_grids(const LabelVolume& a, const LabelVolume& b) {
    if (a.h != b.h || a.w != b.w || a.d != b.d) {
        throw std::invalid_argument("label grids differ in shape");
    }
}

double dist2(const Voxel& a, const Voxel& b, const std::array<double, 3>& sp) {
    double di = (a.i - b.i) * sp[0];
    double dj = (a.j - b.j) * sp[1];
    double dk = (a.k - b.k) * sp[2];
    return di * di + dj * dj + dk * dk;
}

std::size_t count_within(const std::vector<Voxel>& from, const std::vector<Voxel>& to,
                         double tol2, const std::array<double, 3>& sp) {
    std::size_t n = 0;
    for (const Voxel& a : from) {
        for (const Voxel& b : to) {
            if (dist2(a, b, sp) <= tol2) {
                ++n;
                break;
            }
        }
    }
    return n;
}

// Same result as count_within but via a membership table and a precomputed
// offset ball; used when the all-pairs product gets large.
std::size_t count_within_hashed(const std::vector<Voxel>& from, const std::vector<Voxel>& to,
                                double tol, const std::array<double, 3>& sp) {
    std::unordered_set<std::int64_t> members;
    members.reserve(to.size() * 2);
    auto key = [](int i, int j, int k) {
        return (static_cast<std::int64_t>(i) << 42) | (static_cast<std::int64_t>(j) << 21) |
               static_cast<std::int64_t>(k);
    };
    for (const Voxel& b : to) members.insert(key(b.i + 512, b.j + 512, b.k + 512));

    double tol2 = tol * tol;
    int ri = static_cast<int>(std::floor(tol / sp[0]));
    int rj = static_cast<int>(std::floor(tol / sp[1]));
    int rk = static_cast<int>(std::floor(tol / sp[2]));
    std::vector<Voxel> offsets;
    for (int di = -ri; di <= ri; ++di)
        for (int dj = -rj; dj <= rj; ++dj)
            for (int dk = -rk; dk <= rk; ++dk) {
                double d2 = di * sp[0] * di * sp[0] + dj * sp[1] * dj * sp[1] +
                            dk * sp[2] * dk * sp[2];
                if (d2 <= tol2) offsets.push_back({di, dj, dk});
            }

    std::size_t n = 0;
    for (const Voxel& a : from) {
        for (const Voxel& off : offsets) {
            if (members.count(key(a.i + off.i + 512, a.j + off.j + 512, a.k + off.k + 512))) {
                ++n;
                break;
            }
        }
    }
    return n;
}

}  // namespace

std::vector<Voxel> boundary_voxels(const LabelVolume& labels, int cls) {
    std::vector<Voxel> out;
    auto in_mask = [&](int i, int j, int k) {
        if (i < 0 || j < 0 || k < 0 || i >= labels.h || j >= labels.w || k >= labels.d) {
            return false;
        }
        return labels.at(i, j, k) == cls;
    };
    for (int i = 0; i < labels.h; ++i)
        for (int j = 0; j < labels.w; ++j)
            for (int k = 0; k < labels.d; ++k) {
                if (!in_mask(i, j, k)) continue;
                if (!in_mask(i - 1, j, k) || !in_mask(i + 1, j, k) || !in_mask(i, j - 1, k) ||
                    !in_mask(i, j + 1, k) || !in_mask(i, j, k - 1) || !in_mask(i, j, k + 1)) {
                    out.push_back({i, j, k});
                }
            }
    return out;
}

double volumetric_dice(const LabelVolume& pred, const LabelVolume& gt, int cls) {
    check_grids(pred, gt);
    std::size_t na = 0, nb = 0, inter = 0;
    for (std::size_t v = 0; v < pred.count(); ++v) {
        bool a = pred.values[v] == cls;
        bool b = gt.values[v] == cls;
        na += a;
        nb += b;
        inter += a && b;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double surface_dice(const LabelVolume& pred, const LabelVolume& gt, int cls,
                    double tolerance, std::array<double, 3> spacing) {
    check_grids(pred, gt);
    if (tolerance < 0.0) throw std::invalid_argument("surface_dice: tolerance must be >= 0");
    std::vector<Voxel> ba = boundary_voxels(pred, cls);
    std::vector<Voxel> bb = boundary_voxels(gt, cls);
    if (ba.empty() && bb.empty()) return 1.0;
    if (ba.empty() || bb.empty()) return 0.0;

    std::size_t matched;
    if (ba.size() * bb.size() <= 1u << 16) {
        double tol2 = tolerance * tolerance;
        matched = count_within(ba, bb, tol2, spacing) + count_within(bb, ba, tol2, spacing);
    } else {
        matched = count_within_hashed(ba, bb, tolerance, spacing) +
                  count_within_hashed(bb, ba, tolerance, spacing);
    }
    return static_cast<double>(matched) / static_cast<double>(ba.size() + bb.size());
}

}  // namespace recal3d
