#include "recal3d/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace recal3d {

void PhantomSpec::validate() const {
    if (h % 4 || w % 4 || d % 4 || h < 4 || w < 4 || d < 4) {
        throw std::invalid_argument("phantom extents must be positive and divisible by 4");
    }
    if (n_classes < 3) {
        throw std::invalid_argument("need background + at least one large and one small class");
    }
    if (!(small_radius_max < large_radius_min)) {
        throw std::invalid_argument("small radius range must lie below the large range");
    }
    if (small_radius_min <= 0 || small_radius_min > small_radius_max ||
        large_radius_min > large_radius_max) {
        throw std::invalid_argument("malformed radius ranges");
    }
    int m = std::min({h, w, d});
    if (2.0 * large_radius_max >= m) {
        throw std::invalid_argument("large radius does not fit inside the volume");
    }
    if (noise_amplitude < 0.0) throw std::invalid_argument("noise amplitude must be >= 0");
    if (!class_means.empty() && static_cast<int>(class_means.size()) != n_classes) {
        throw std::invalid_argument("class_means size must equal n_classes");
    }
}

std::vector<double> PhantomSpec::resolved_means() const {
    if (!class_means.empty()) return class_means;
    std::vector<double> means(n_classes);
    for (int c = 0; c < n_classes; ++c) {
        means[c] = 0.15 + 0.75 * static_cast<double>(c) / (n_classes - 1);
    }
    return means;
}

namespace {

std::vector<std::size_t> ellipsoid_voxels(const PhantomSpec& spec, double cx, double cy,
                                          double cz, double ra, double rb, double rc) {
    std::vector<std::size_t> out;
    int i0 = std::max(0, static_cast<int>(std::ceil(cx - ra)));
    int i1 = std::min(spec.h - 1, static_cast<int>(std::floor(cx + ra)));
    int j0 = std::max(0, static_cast<int>(std::ceil(cy - rb)));
    int j1 = std::min(spec.w - 1, static_cast<int>(std::floor(cy + rb)));
    int k0 = std::max(0, static_cast<int>(std::ceil(cz - rc)));
    int k1 = std::min(spec.d - 1, static_cast<int>(std::floor(cz + rc)));
    for (int i = i0; i <= i1; ++i)
        for (int j = j0; j <= j1; ++j)
            for (int k = k0; k <= k1; ++k) {
                double q = (i - cx) * (i - cx) / (ra * ra) + (j - cy) * (j - cy) / (rb * rb) +
                           (k - cz) * (k - cz) / (rc * rc);
                if (q <= 1.0) {
                    out.push_back((static_cast<std::size_t>(i) * spec.w + j) * spec.d + k);
                }
            }
    return out;
}

}  // namespace

Phantom generate(const PhantomSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    LabelVolume labels = LabelVolume::filled(spec.h, spec.w, spec.d, 0);

    // An unlucky early placement (e.g. the first large structure dead
    // center) can make later classes geometrically impossible, so on
    // failure the whole layout is redrawn before giving up.
    int failed_class = 0;
    for (int restart = 0; restart < 50; ++restart) {
        failed_class = 0;
        std::fill(labels.values.begin(), labels.values.end(), 0);
        for (int cls = 1; cls < spec.n_classes && !failed_class; ++cls) {
            bool small = cls == spec.n_classes - 1;
            double lo = small ? spec.small_radius_min : spec.large_radius_min;
            double hi = small ? spec.small_radius_max : spec.large_radius_max;
            bool placed = false;
            for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
                double ra = rng.uniform(lo, hi);
                double rb = rng.uniform(lo, hi);
                double rc = rng.uniform(lo, hi);
                double cx, cy, cz;
                if (small) {
                    // Half-integer center: the blob sits symmetrically between
                    // grid points, so small radii carve an exact 2x2x2 cube.
                    auto place = [&](double r, int ext) {
                        int lo_b = static_cast<int>(std::ceil(r - 0.5));
                        int hi_b = static_cast<int>(std::floor(ext - 1.5 - r));
                        if (hi_b < lo_b) return -1.0;
                        return lo_b + static_cast<double>(rng.next_below(hi_b - lo_b + 1)) + 0.5;
                    };
                    cx = place(ra, spec.h);
                    cy = place(rb, spec.w);
                    cz = place(rc, spec.d);
                    if (cx < 0 || cy < 0 || cz < 0) continue;
                } else {
                    int mi = static_cast<int>(std::ceil(ra));
                    int mj = static_cast<int>(std::ceil(rb));
                    int mk = static_cast<int>(std::ceil(rc));
                    if (spec.h - 1 - 2 * mi < 0 || spec.w - 1 - 2 * mj < 0 ||
                        spec.d - 1 - 2 * mk < 0) {
                        continue;
                    }
                    cx = mi + static_cast<int>(rng.next_below(spec.h - 2 * mi));
                    cy = mj + static_cast<int>(rng.next_below(spec.w - 2 * mj));
                    cz = mk + static_cast<int>(rng.next_below(spec.d - 2 * mk));
                }
                auto voxels = ellipsoid_voxels(spec, cx, cy, cz, ra, rb, rc);
                // Guarantee every structure has at least 2^3 voxels so
                // augmentation cannot erase a class.
                if (voxels.size() < 8) continue;
                bool free = true;
                for (std::size_t v : voxels) {
                    if (labels.values[v] != 0) {
                        free = false;
                        break;
                    }
                }
                if (!free) continue;
                for (std::size_t v : voxels) labels.values[v] = static_cast<std::uint8_t>(cls);
                placed = true;
            }
            if (!placed) failed_class = cls;
        }
        if (!failed_class) break;
    }
    if (failed_class) {
        throw std::runtime_error("phantom generation: could not place structure for class " +
                                 std::to_string(failed_class));
    }

    std::vector<double> means = spec.resolved_means();
    Tensor intensity = Tensor::zeros({1, spec.h, spec.w, spec.d});
    for (std::size_t v = 0; v < labels.count(); ++v) {
        double val = means[labels.values[v]] +
                     spec.noise_amplitude * rng.uniform(-1.0, 1.0);
        intensity.data()[v] = std::clamp(val, 0.0, 1.0);
    }

    Phantom p;
    p.intensity = std::move(intensity);
    p.labels = std::move(labels);
    p.class_counts = class_histogram(p.labels, spec.n_classes);
    p.seed = seed;
    return p;
}

namespace {

double sample_trilinear(const Tensor& vol, double x, double y, double z) {
    const Shape4& s = vol.shape();
    x = std::clamp(x, 0.0, static_cast<double>(s.h - 1));
    y = std::clamp(y, 0.0, static_cast<double>(s.w - 1));
    z = std::clamp(z, 0.0, static_cast<double>(s.d - 1));
    int i0 = static_cast<int>(std::floor(x)), j0 = static_cast<int>(std::floor(y));
    int k0 = static_cast<int>(std::floor(z));
    int i1 = std::min(i0 + 1, s.h - 1), j1 = std::min(j0 + 1, s.w - 1);
    int k1 = std::min(k0 + 1, s.d - 1);
    double fx = x - i0, fy = y - j0, fz = z - k0;
    auto v = [&](int i, int j, int k) { return vol.at(0, i, j, k); };
    double c00 = v(i0, j0, k0) * (1 - fz) + v(i0, j0, k1) * fz;
    double c01 = v(i0, j1, k0) * (1 - fz) + v(i0, j1, k1) * fz;
    double c10 = v(i1, j0, k0) * (1 - fz) + v(i1, j0, k1) * fz;
    double c11 = v(i1, j1, k0) * (1 - fz) + v(i1, j1, k1) * fz;
    double c0 = c00 * (1 - fy) + c01 * fy;
    double c1 = c10 * (1 - fy) + c11 * fy;
    return c0 * (1 - fx) + c1 * fx;
}

std::uint8_t sample_nearest_label(const LabelVolume& labels, double x, double y, double z) {
    int i = static_cast<int>(std::lround(x));
    int j = static_cast<int>(std::lround(y));
    int k = static_cast<int>(std::lround(z));
    if (i < 0 || j < 0 || k < 0 || i >= labels.h || j >= labels.w || k >= labels.d) return 0;
    return labels.at(i, j, k);
}

// dst voxel -> source position
template <typename MapFn>
Phantom resample(const Phantom& p, int oh, int ow, int od, MapFn map) {
    Phantom out;
    out.seed = p.seed;
    out.intensity = Tensor::zeros({1, oh, ow, od});
    out.labels = LabelVolume::filled(oh, ow, od, 0);
    for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j)
            for (int k = 0; k < od; ++k) {
                auto [x, y, z] = map(i, j, k);
                out.intensity.at(0, i, j, k) = sample_trilinear(p.intensity, x, y, z);
                out.labels.at(i, j, k) = sample_nearest_label(p.labels, x, y, z);
            }
    out.class_counts = class_histogram(out.labels, static_cast<int>(p.class_counts.size()));
    return out;
}

}  // namespace

Phantom augment(const Phantom& p, Rng& rng, AugmentKind kind, double max_displacement) {
    const int H = p.labels.h, W = p.labels.w, D = p.labels.d;
    switch (kind) {
        case AugmentKind::Rot90: {
            // 90-degree rotation in the plane orthogonal to a random axis,
            // index permutation only, so labels stay exact.
            int axis = static_cast<int>(rng.next_below(3));
            Phantom out;
            out.seed = p.seed;
            int oh = H, ow = W, od = D;
            if (axis == 0) std::swap(ow, od);
            else if (axis == 1) std::swap(oh, od);
            else std::swap(oh, ow);
            out.intensity = Tensor::zeros({1, oh, ow, od});
            out.labels = LabelVolume::filled(oh, ow, od, 0);
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j)
                    for (int k = 0; k < od; ++k) {
                        int si, sj, sk;
                        if (axis == 0) {
                            si = i; sj = k; sk = ow - 1 - j;
                        } else if (axis == 1) {
                            sj = j; si = k; sk = oh - 1 - i;
                        } else {
                            sk = k; si = j; sj = oh - 1 - i;
                        }
                        out.intensity.at(0, i, j, k) = p.intensity.at(0, si, sj, sk);
                        out.labels.at(i, j, k) = p.labels.at(si, sj, sk);
                    }
            out.class_counts =
                class_histogram(out.labels, static_cast<int>(p.class_counts.size()));
            return out;
        }
        case AugmentKind::SmallRotation: {
            int axis = static_cast<int>(rng.next_below(3));
            double deg = rng.uniform(-10.0, 10.0);
            double th = deg * M_PI / 180.0;
            double cx = 0.5 * (H - 1), cy = 0.5 * (W - 1), cz = 0.5 * (D - 1);
            double c = std::cos(th), s = std::sin(th);
            return resample(p, H, W, D, [&](int i, int j, int k) {
                double x = i - cx, y = j - cy, z = k - cz;
                double rx = x, ry = y, rz = z;
                // inverse rotation of the destination coordinate
                if (axis == 0) {
                    ry = c * y + s * z;
                    rz = -s * y + c * z;
                } else if (axis == 1) {
                    rx = c * x + s * z;
                    rz = -s * x + c * z;
                } else {
                    rx = c * x + s * y;
                    ry = -s * x + c * y;
                }
                return std::array<double, 3>{rx + cx, ry + cy, rz + cz};
            });
        }
        case AugmentKind::Elastic: {
            // 4^3 control grid of displacements, trilinearly upsampled.
            constexpr int G = 4;
            std::vector<std::array<double, 3>> grid(G * G * G);
            for (auto& g : grid) {
                for (int a = 0; a < 3; ++a) {
                    g[a] = rng.uniform(-max_displacement, max_displacement);
                }
            }
            auto disp = [&](double fi, double fj, double fk, int a) {
                double gx = fi * (G - 1), gy = fj * (G - 1), gz = fk * (G - 1);
                int i0 = std::min(static_cast<int>(gx), G - 2);
                int j0 = std::min(static_cast<int>(gy), G - 2);
                int k0 = std::min(static_cast<int>(gz), G - 2);
                double fx = gx - i0, fy = gy - j0, fz = gz - k0;
                auto v = [&](int i, int j, int k) { return grid[(i * G + j) * G + k][a]; };
                double c00 = v(i0, j0, k0) * (1 - fz) + v(i0, j0, k0 + 1) * fz;
                double c01 = v(i0, j0 + 1, k0) * (1 - fz) + v(i0, j0 + 1, k0 + 1) * fz;
                double c10 = v(i0 + 1, j0, k0) * (1 - fz) + v(i0 + 1, j0, k0 + 1) * fz;
                double c11 = v(i0 + 1, j0 + 1, k0) * (1 - fz) + v(i0 + 1, j0 + 1, k0 + 1) * fz;
                double c0 = c00 * (1 - fy) + c01 * fy;
                double c1 = c10 * (1 - fy) + c11 * fy;
                return c0 * (1 - fx) + c1 * fx;
            };
            return resample(p, H, W, D, [&](int i, int j, int k) {
                double fi = H > 1 ? static_cast<double>(i) / (H - 1) : 0.0;
                double fj = W > 1 ? static_cast<double>(j) / (W - 1) : 0.0;
                double fk = D > 1 ? static_cast<double>(k) / (D - 1) : 0.0;
                return std::array<double, 3>{i + disp(fi, fj, fk, 0), j + disp(fi, fj, fk, 1),
                                             k + disp(fi, fj, fk, 2)};
            });
        }
    }
    throw std::logic_error("unreachable");
}

}  // namespace recal3d
