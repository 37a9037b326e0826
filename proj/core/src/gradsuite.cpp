#include "recal3d/gradsuite.hpp"

#include <algorithm>
#include <numeric>

#include "recal3d/blocks.hpp"
#include "recal3d/losses.hpp"

namespace recal3d {

Tensor kink_safe_tensor(Shape4 shape, Rng& rng, double phase) {
    std::size_t n = shape.count();
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mag = 0.1 + 0.85 * (static_cast<double>(i) + phase) / n;
        values[i] = (rng.next_u64() & 1) ? mag : -mag;
    }
    // Fisher-Yates with the portable rng
    for (std::size_t i = n - 1; i > 0; --i) {
        std::size_t j = rng.next_below(i + 1);
        std::swap(values[i], values[j]);
    }
    return Tensor::from_data(shape, std::move(values));
}

namespace {

using Builder = std::function<Tensor(Tape&, std::vector<Tensor>&)>;

struct Suite {
    std::vector<GradCheckCase> cases;
    double tol;

    void check(const std::string& name, const Builder& build, std::vector<Tensor> params,
               double eps = 1e-5) {
        GradCheckCase c;
        c.name = name;
        c.tol = tol;
        c.max_rel_err = grad_check(build, std::move(params), eps);
        cases.push_back(c);
    }
};

}  // namespace

std::vector<GradCheckCase> run_gradient_suite(std::uint64_t seed, int channels, int extent,
                                              double tol) {
    Rng rng(seed);
    Suite suite;
    suite.tol = tol;
    const Shape4 shape{channels, extent, extent, extent};

    auto smooth = [&] { return Tensor::uniform(shape, rng, -1.0, 1.0); };
    auto safe = [&] { return kink_safe_tensor(shape, rng); };

    suite.check("add", [](Tape&, std::vector<Tensor>& p) { return sum(add(p[0], p[1])); },
                {smooth(), smooth()});
    suite.check("sub",
                [](Tape&, std::vector<Tensor>& p) {
                    return sum(sigmoid(sub(p[0], p[1])));
                },
                {smooth(), smooth()});
    suite.check("scale",
                [](Tape&, std::vector<Tensor>& p) { return sum(scale(p[0], -1.7)); },
                {smooth()});
    suite.check("relu", [](Tape&, std::vector<Tensor>& p) { return sum(relu(p[0])); },
                {safe()});
    suite.check("sigmoid", [](Tape&, std::vector<Tensor>& p) { return sum(sigmoid(p[0])); },
                {smooth()});
    suite.check("mul_elementwise_full",
                [](Tape&, std::vector<Tensor>& p) {
                    return sum(mul_elementwise(p[0], p[1]));
                },
                {smooth(), smooth()});
    suite.check("mul_elementwise_broadcast",
                [](Tape&, std::vector<Tensor>& p) {
                    return sum(mul_elementwise(p[0], sigmoid(p[1])));
                },
                {smooth(), Tensor::uniform({1, extent, extent, extent}, rng, -1.0, 1.0)});
    suite.check("mul_channelwise",
                [](Tape&, std::vector<Tensor>& p) {
                    return sum(mul_channelwise(p[0], p[1]));
                },
                {smooth(), Tensor::uniform({channels, 1, 1, 1}, rng, -1.0, 1.0)});
    suite.check("max_elementwise",
                [](Tape&, std::vector<Tensor>& p) {
                    return sum(max_elementwise(p[0], p[1]));
                },
                {safe(), kink_safe_tensor(shape, rng, 0.5)});
    suite.check("linear",
                [](Tape&, std::vector<Tensor>& p) {
                    return sum(linear(p[0], p[1], &p[2]));
                },
                {Tensor::uniform({3, channels, 1, 1}, rng, -1.0, 1.0),
                 Tensor::uniform({channels, 1, 1, 1}, rng, -1.0, 1.0),
                 Tensor::uniform({3, 1, 1, 1}, rng, -1.0, 1.0)});
    for (int k : {1, 3}) {
        int c_out = 2;
        suite.check("conv3d_k" + std::to_string(k),
                    [c_out, k](Tape&, std::vector<Tensor>& p) {
                        return sum(sigmoid(conv3d(p[0], p[1], &p[2], c_out, k)));
                    },
                    {smooth(),
                     Tensor::uniform({c_out * channels, k, k, k}, rng, -0.5, 0.5),
                     Tensor::uniform({c_out, 1, 1, 1}, rng, -0.5, 0.5)});
    }
    for (PoolMode m : {PoolMode::Avg, PoolMode::Max}) {
        std::string ms = m == PoolMode::Avg ? "avg" : "max";
        suite.check("global_pool_" + ms,
                    [m](Tape&, std::vector<Tensor>& p) {
                        return sum(sigmoid(global_pool(p[0], m)));
                    },
                    {safe()});
        suite.check("channel_pool_" + ms,
                    [m](Tape&, std::vector<Tensor>& p) {
                        return sum(sigmoid(channel_pool(p[0], m)));
                    },
                    {safe()});
        for (Axis a : {Axis::H, Axis::W, Axis::D}) {
            std::string as = a == Axis::H ? "H" : (a == Axis::W ? "W" : "D");
            suite.check("axis_pool_" + as + "_" + ms,
                        [a, m](Tape&, std::vector<Tensor>& p) {
                            return sum(sigmoid(axis_pool(p[0], a, m)));
                        },
                        {safe()});
        }
    }
    for (Aggregation agg : {Aggregation::Add, Aggregation::Max, Aggregation::Mult}) {
        suite.check("broadcast_combine_" + to_string(agg),
                    [agg](Tape&, std::vector<Tensor>& p) {
                        return sum(sigmoid(broadcast_combine(p[0], p[1], p[2], agg)));
                    },
                    {kink_safe_tensor({channels, extent, 1, 1}, rng, 0.0),
                     kink_safe_tensor({channels, extent, 1, 1}, rng, 1.0 / 3.0),
                     kink_safe_tensor({channels, extent, 1, 1}, rng, 2.0 / 3.0)});
    }
    suite.check("concat_channels",
                [](Tape&, std::vector<Tensor>& p) {
                    return sum(sigmoid(concat_channels(p[0], p[1])));
                },
                {smooth(), Tensor::uniform({2, extent, extent, extent}, rng, -1.0, 1.0)});
    suite.check("maxpool_down2",
                [](Tape&, std::vector<Tensor>& p) { return sum(maxpool_down2(p[0])); },
                {kink_safe_tensor({channels, 4, 4, 4}, rng)});
    suite.check("upsample_nearest2",
                [](Tape&, std::vector<Tensor>& p) {
                    return sum(sigmoid(upsample_nearest2(p[0])));
                },
                {Tensor::uniform({channels, 2, 2, 2}, rng, -1.0, 1.0)});
    // Weight the normalized output by a fixed random tensor; a plain sum
    // would make the gain gradient cancel almost exactly (sum of x-hat is
    // zero per channel) and drown in finite-difference roundoff.
    Tensor in_weight = Tensor::uniform(shape, rng, 0.5, 1.5);
    suite.check("instance_norm",
                [in_weight](Tape&, std::vector<Tensor>& p) {
                    return sum(sigmoid(mul_elementwise(instance_norm(p[0], p[1], p[2]),
                                                       in_weight)));
                },
                {smooth(), Tensor::uniform({channels, 1, 1, 1}, rng, 0.5, 1.5),
                 Tensor::uniform({channels, 1, 1, 1}, rng, -0.5, 0.5)},
                // smooth everywhere; the larger step keeps roundoff out of
                // the tiny per-voxel gradients
                1e-4);
    suite.check("log_softmax_channels",
                [](Tape&, std::vector<Tensor>& p) {
                    return sum(sigmoid(log_softmax_channels(p[0])));
                },
                {smooth()});
    suite.check("sum", [](Tape&, std::vector<Tensor>& p) { return sum(p[0]); }, {smooth()});

    {
        LabelVolume labels = LabelVolume::filled(extent, extent, extent);
        Rng lr(seed ^ 0x1234);
        for (auto& v : labels.values) {
            v = static_cast<std::uint8_t>(lr.next_below(channels));
        }
        std::vector<double> weights(channels);
        for (auto& w : weights) w = lr.uniform(0.5, 2.0);
        suite.check("weighted_ce",
                    [labels, weights](Tape&, std::vector<Tensor>& p) {
                        return weighted_ce(p[0], labels, weights);
                    },
                    {smooth()});
        suite.check("soft_dice_loss",
                    [labels](Tape&, std::vector<Tensor>& p) {
                        return soft_dice_loss(p[0], labels);
                    },
                    {smooth()});
        suite.check("combined_loss",
                    [labels, weights](Tape&, std::vector<Tensor>& p) {
                        return combined_loss(p[0], labels, weights);
                    },
                    {smooth()});
    }

    // Block end-to-end checks: loss = sum(forward(U)), gradients w.r.t. U
    // and every block parameter. The block's own parameter tensors must be
    // watched (tensor copies share data but not tape registration), so
    // this uses a manual harness rather than grad_check.
    auto check_block_inplace = [&](const std::string& name, BlockConfig bc) {
        Rng brng(seed ^ (0x517cc1b727220a95ULL + bc.channels));
        CprBlock block(bc, brng);
        // Overwrite the initial parameters (biases start at zero) with
        // kink-safe values so relu pre-activations stay clear of zero even
        // when the compressed descriptors are tiny (e.g. mult aggregation).
        {
            double phase = 0.0;
            for (auto& [pname, t] : block.parameters()) {
                Tensor fresh = kink_safe_tensor(t.shape(), brng, phase);
                std::copy(fresh.data(), fresh.data() + fresh.size(), t.data());
                phase += 0.37;
                phase -= static_cast<int>(phase);
            }
        }
        Tensor u = safe();
        GradCheckCase c;
        c.name = name;
        c.tol = tol;

        // Manual harness: watch the block's own parameter tensors.
        Tape tape;
        tape.watch(u);
        for (auto& [pname, t] : block.parameters()) tape.watch(t);
        Tensor loss = sum(block.forward(u));
        tape.backward(loss);

        std::vector<Tensor*> all{&u};
        for (auto& [pname, t] : block.parameters()) all.push_back(&t);
        std::vector<std::vector<double>> analytic;
        for (Tensor* t : all) {
            const auto& g = tape.grad(*t);
            analytic.push_back(g.empty() ? std::vector<double>(t->size(), 0.0) : g);
        }
        auto eval = [&] {
            for (Tensor* t : all) t->detach();
            return sum(block.forward(u)).data()[0];
        };
        const double eps = 1e-5;
        double max_rel = 0.0;
        for (std::size_t ti = 0; ti < all.size(); ++ti) {
            for (std::size_t i = 0; i < all[ti]->size(); ++i) {
                double orig = all[ti]->data()[i];
                all[ti]->data()[i] = orig + eps;
                double fp = eval();
                all[ti]->data()[i] = orig - eps;
                double fm = eval();
                all[ti]->data()[i] = orig;
                double numeric = (fp - fm) / (2.0 * eps);
                double a = analytic[ti][i];
                double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
                max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
            }
        }
        c.max_rel_err = max_rel;
        suite.cases.push_back(c);
    };

    for (BlockKind kind : {BlockKind::Cse, BlockKind::Sse, BlockKind::ScSe, BlockKind::Cbam}) {
        BlockConfig bc;
        bc.kind = kind;
        bc.channels = channels;
        bc.reduction = kind == BlockKind::Sse ? 1 : 2;
        check_block_inplace("block_" + to_string(kind), bc);
    }
    for (PePooling pool : {PePooling::Avg, PePooling::Max, PePooling::AvgAndMax}) {
        for (Aggregation agg : {Aggregation::Add, Aggregation::Max, Aggregation::Mult}) {
            BlockConfig bc;
            bc.kind = BlockKind::Pe;
            bc.channels = channels;
            bc.reduction = 2;
            bc.pe_pooling = pool;
            bc.pe_aggregation = agg;
            check_block_inplace("block_PE_" + to_string(pool) + "_" + to_string(agg), bc);
        }
    }

    return suite.cases;
}

}  // namespace recal3d
