#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "recal3d/segnet.hpp"

using namespace recal3d;

namespace {

NetConfig micro_config() {
    NetConfig cfg;
    cfg.in_channels = 1;
    cfg.n_classes = 2;
    cfg.stage_channels = {{2, 4}, {4, 4}, {4, 4}, {4, 4}};
    return cfg;
}

}  // namespace

TEST_CASE("forward shape contract") {
    NetConfig cfg;
    cfg.n_classes = 4;
    cfg.stage_channels = {{2, 4}, {4, 8}, {8, 8}, {8, 8}};
    Rng rng(1);
    SegNet net(cfg, rng);

    Rng ir(2);
    Tensor out = net.forward(Tensor::uniform({1, 8, 8, 8}, ir, 0.0, 1.0));
    CHECK(out.shape() == Shape4{4, 8, 8, 8});

    CHECK_THROWS(net.forward(Tensor::zeros({1, 6, 8, 8})));   // not divisible by 4
    CHECK_THROWS(net.forward(Tensor::zeros({2, 8, 8, 8})));   // wrong channel count
}

TEST_CASE("forward is deterministic") {
    NetConfig cfg = micro_config();
    Rng rng(3);
    SegNet net(cfg, rng);
    Rng ir(4);
    Tensor x = Tensor::uniform({1, 4, 4, 4}, ir, 0.0, 1.0);
    Tensor a = net.forward(x);
    Tensor b = net.forward(x);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);

    // same seed -> same weights -> same output
    Rng rng2(3);
    SegNet net2(cfg, rng2);
    Tensor c = net2.forward(x);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == c.data()[i]);
}

TEST_CASE("placement block counts") {
    CHECK(placement_block_count(Placement::P0) == 0);
    CHECK(placement_block_count(Placement::P1) == 3);
    CHECK(placement_block_count(Placement::P2) == 3);
    CHECK(placement_block_count(Placement::P3) == 1);
    CHECK(placement_block_count(Placement::P4) == 6);
    CHECK(placement_block_count(Placement::P5) == 4);
    CHECK(placement_block_count(Placement::P6) == 7);

    for (int p = 0; p <= 6; ++p) {
        NetConfig cfg = micro_config();
        cfg.placement = static_cast<Placement>(p);
        if (cfg.placement != Placement::P0) cfg.block_kind = BlockKind::Cse;
        cfg.reduction = 2;
        Rng rng(5);
        SegNet net(cfg, rng);
        CHECK(net.block_count() == placement_block_count(cfg.placement));
    }
}

TEST_CASE("parameter count matches a hand closed form") {
    // widths {{2,4},{4,8},{8,16},{16,32}}, 1 input channel, 3 classes
    NetConfig cfg;
    cfg.n_classes = 3;
    cfg.stage_channels = {{2, 4}, {4, 8}, {8, 16}, {16, 32}};

    auto unit = [](long ci, long co) { return ci * co * 27 + 2 * co; };
    long base = 0;
    base += unit(1, 2) + unit(2, 4);     // encoder 1
    base += unit(4, 4) + unit(4, 8);     // encoder 2
    base += unit(8, 8) + unit(8, 16);    // encoder 3
    base += unit(16, 16) + unit(16, 32); // bottleneck
    base += unit(32 + 16, 16) + unit(16, 8);  // decoder 1 (skip from encoder 3)
    base += unit(8 + 8, 8) + unit(8, 4);      // decoder 2
    base += unit(4 + 4, 4) + unit(4, 2);      // decoder 3
    base += 3L * 2 + 3;                  // 1x1x1 classifier + bias

    Rng rng(6);
    SegNet p0(cfg, rng);
    CHECK(p0.param_count() == base);
    CHECK(net_param_count(cfg) == base);

    // cSE everywhere, r = 2: per block 2C^2/r on channels {4,8,16,32,16,8,4}
    cfg.block_kind = BlockKind::Cse;
    cfg.placement = Placement::P6;
    cfg.reduction = 2;
    // block channels are the stage outputs: encoder second widths, the
    // bottleneck's second width, and decoder outputs (mirrored first widths)
    long cse = 0;
    for (long c : {4, 8, 16, 32, 8, 4, 2}) cse += 2 * c * c / 2;
    Rng rng2(6);
    SegNet p6(cfg, rng2);
    CHECK(p6.param_count() == base + cse);
    CHECK(net_param_count(cfg) == base + cse);
    CHECK(p6.param_count() == static_cast<long>([&] {
              long n = 0;
              for (auto& [name, t] : p6.parameters()) n += t->size();
              return n;
          }()));
}

TEST_CASE("overhead report and ordering across block kinds") {
    NetConfig cfg;  // full-width network
    cfg.n_classes = 4;

    auto overhead = [&](BlockKind kind) {
        NetConfig c = cfg;
        c.block_kind = kind;
        c.placement = Placement::P6;
        c.reduction = default_reduction(kind);
        Rng rng(7);
        SegNet net(c, rng);
        ParamReport r = param_report(net);
        CHECK(r.blocks == 7);
        CHECK(r.total == net_param_count(c));
        CHECK(r.overhead == r.total - r.base);

        // overhead is exactly the sum of per-stage block closed forms
        long want = 0;
        for (int ch : {32, 64, 128, 256, 64, 32, 16}) {
            BlockConfig bc;
            bc.kind = kind;
            bc.channels = ch;
            bc.reduction = c.reduction;
            want += block_param_count(bc);
        }
        CHECK(r.overhead == want);
        return r;
    };

    ParamReport sse = overhead(BlockKind::Sse);
    ParamReport cse = overhead(BlockKind::Cse);
    ParamReport cbam = overhead(BlockKind::Cbam);
    ParamReport pe = overhead(BlockKind::Pe);
    ParamReport scse = overhead(BlockKind::ScSe);

    CHECK(sse.overhead < cse.overhead);
    CHECK(sse.overhead < pe.overhead);
    CHECK(sse.overhead < cbam.overhead);
    CHECK(cse.overhead < scse.overhead);
    CHECK(pe.overhead < scse.overhead);
    CHECK(cbam.overhead < scse.overhead);
    // every kind stays cheap relative to the backbone
    for (const ParamReport& r : {sse, cse, cbam, pe, scse}) {
        CHECK(r.overhead_fraction < 0.03);
    }
}

TEST_CASE("a zeroed channel gate halves a stage exactly") {
    // one conv-norm-relu unit followed by a cSE block whose parameters are
    // all zero: the gate is sigmoid(0) = 0.5 for every channel, so the
    // stage output is exactly half of the unit output, and the factor
    // carries exactly through a following convolution.
    Rng rng(8);
    int c = 4;
    Tensor kernel = Tensor::uniform({c * 1, 3, 3, 3}, rng, -0.5, 0.5);
    Tensor gain = Tensor::constant({c, 1, 1, 1}, 1.0);
    Tensor bias = Tensor::zeros({c, 1, 1, 1});
    Tensor x = Tensor::uniform({1, 6, 6, 6}, rng, 0.0, 1.0);

    Tensor u = relu(instance_norm(conv3d(x, kernel, nullptr, c, 3), gain, bias));

    BlockConfig bc;
    bc.kind = BlockKind::Cse;
    bc.channels = c;
    bc.reduction = 2;
    CprBlock block(bc, rng);
    for (auto& [name, t] : block.parameters()) {
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = 0.0;
    }
    Tensor gated = block.forward(u);
    for (std::size_t i = 0; i < u.size(); ++i) {
        CHECK(gated.data()[i] == 0.5 * u.data()[i]);
    }

    // convolution is linear, so the halving survives the next bias-free layer
    Tensor head = Tensor::uniform({2 * c, 1, 1, 1}, rng, -1.0, 1.0);
    Tensor ya = conv3d(gated, head, nullptr, 2, 1);
    Tensor yb = conv3d(u, head, nullptr, 2, 1);
    for (std::size_t i = 0; i < ya.size(); ++i) {
        CHECK(ya.data()[i] == doctest::Approx(0.5 * yb.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("micro network end-to-end gradient check") {
    NetConfig cfg = micro_config();
    cfg.block_kind = BlockKind::Pe;
    cfg.placement = Placement::P3;
    cfg.reduction = 2;
    Rng rng(20240817);
    SegNet net(cfg, rng);
    // At the 1^3 stages instance norm reduces to its bias, so zero-init
    // biases would sit exactly on the relu kink; nudge every parameter to
    // a generic point first.
    for (auto& [name, t] : net.parameters()) {
        for (std::size_t i = 0; i < t->size(); ++i) {
            t->data()[i] += 0.05 + 0.013 * static_cast<double>(i % 7);
        }
    }
    Rng ir(9);
    Tensor x = Tensor::uniform({1, 4, 4, 4}, ir, 0.1, 0.9);

    auto loss_value = [&] {
        Tensor out = net.forward(x);
        // smooth scalar head over the logits
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            double w = 0.3 + 0.01 * static_cast<double>(i % 17);
            s += w * out.data()[i] * out.data()[i];
        }
        return 0.5 * s;
    };

    // analytic gradients
    Tape tape;
    net.watch_all(tape);
    Tensor out = net.forward(x);
    Tensor sq = mul_elementwise(out, out);
    Tensor weights = Tensor::zeros(out.shape());
    for (std::size_t i = 0; i < weights.size(); ++i) {
        weights.data()[i] = 0.5 * (0.3 + 0.01 * static_cast<double>(i % 17));
    }
    Tensor loss = sum(mul_elementwise(sq, weights));
    tape.backward(loss);

    auto params = net.parameters();
    std::vector<std::vector<double>> analytic;
    for (auto& [name, t] : params) analytic.push_back(tape.grad(*t));
    net.detach_all();  // finite-difference passes should not record

    double worst = 0.0;
    std::string worst_name;
    const double eps = 1e-5;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor* t = params[pi].second;
        const auto& g = analytic[pi];
        REQUIRE(g.size() == t->size());
        // probe a handful of evenly spaced entries per tensor
        std::size_t n = t->size();
        std::size_t step = std::max<std::size_t>(1, n / 3);
        for (std::size_t i = 0; i < n; i += step) {
            double keep = t->data()[i];
            t->data()[i] = keep + eps;
            double up = loss_value();
            t->data()[i] = keep - eps;
            double dn = loss_value();
            t->data()[i] = keep;
            double num = (up - dn) / (2 * eps);
            double rel = std::fabs(g[i] - num) /
                         std::max({std::fabs(g[i]), std::fabs(num), 1e-8});
            if (rel > worst) {
                worst = rel;
                worst_name = params[pi].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    INFO("worst entry ", worst_name);
    CHECK(worst < 1e-3);
}
