#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "recal3d/blocks.hpp"

using namespace recal3d;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

CprBlock make_block(BlockKind kind, int channels, int reduction,
                    PePooling pool = PePooling::Avg, Aggregation agg = Aggregation::Add,
                    std::uint64_t seed = 123) {
    BlockConfig cfg;
    cfg.kind = kind;
    cfg.channels = channels;
    cfg.reduction = reduction;
    cfg.pe_pooling = pool;
    cfg.pe_aggregation = agg;
    Rng rng(seed);
    return CprBlock(cfg, rng);
}

void zero_params(CprBlock& b) {
    for (auto& [name, t] : b.parameters()) {
        std::fill(t.data(), t.data() + t.size(), 0.0);
    }
}

void set_param(CprBlock& b, const std::string& name, std::vector<double> v) {
    for (auto& [n, t] : b.parameters()) {
        if (n == name) {
            REQUIRE(t.size() == v.size());
            std::copy(v.begin(), v.end(), t.data());
            return;
        }
    }
    FAIL("no parameter ", name);
}

}  // namespace

TEST_CASE("zero-parameter blocks scale by a half (a quarter for the two-stage one)") {
    Rng rng(42);
    Tensor u = Tensor::uniform({4, 3, 3, 3}, rng, -1.0, 1.0);
    struct Case {
        BlockKind kind;
        double factor;
    } cases[] = {{BlockKind::Cse, 0.5},
                 {BlockKind::Sse, 0.5},
                 {BlockKind::ScSe, 0.5},
                 {BlockKind::Cbam, 0.25},
                 {BlockKind::Pe, 0.5}};
    for (const auto& [kind, factor] : cases) {
        CprBlock b = make_block(kind, 4, 2);
        zero_params(b);
        Tensor out = b.forward(u);
        INFO("kind ", to_string(kind));
        REQUIRE(out.shape() == u.shape());
        for (std::size_t i = 0; i < u.size(); ++i) {
            CHECK(out.data()[i] == factor * u.data()[i]);
        }
    }
}

TEST_CASE("channel gate hand example") {
    // C=2, r=2, W1=[[1,0]], W2=[[1],[0]] -> gates [sig(relu(m1)), 0.5]
    CprBlock b = make_block(BlockKind::Cse, 2, 2);
    set_param(b, "w1", {1, 0});
    set_param(b, "w2", {1, 0});
    Rng rng(5);
    Tensor u = Tensor::uniform({2, 2, 2, 2}, rng, 0.1, 1.0);
    double m1 = 0.0;
    for (int i = 0; i < 8; ++i) m1 += u.data()[i];
    m1 /= 8.0;
    Tensor out = b.forward(u);
    double g1 = sig(std::max(0.0, m1));
    for (int i = 0; i < 8; ++i) {
        CHECK(out.data()[i] == doctest::Approx(g1 * u.data()[i]).epsilon(1e-12));
        CHECK(out.data()[8 + i] == doctest::Approx(0.5 * u.data()[8 + i]).epsilon(1e-12));
    }
}

TEST_CASE("channel gate depends only on channel means") {
    CprBlock b = make_block(BlockKind::Cse, 3, 3);
    Rng rng(6);
    Tensor u = Tensor::uniform({3, 2, 2, 2}, rng, 0.2, 1.0);
    Tensor means = Tensor::zeros(u.shape());
    for (int c = 0; c < 3; ++c) {
        double m = 0.0;
        for (int i = 0; i < 8; ++i) m += u.data()[c * 8 + i];
        m /= 8.0;
        for (int i = 0; i < 8; ++i) means.data()[c * 8 + i] = m;
    }
    Tensor a = b.forward(u);
    Tensor bm = b.forward(means);
    for (int c = 0; c < 3; ++c) {
        double gate_u = a.data()[c * 8] / u.data()[c * 8];
        double gate_m = bm.data()[c * 8] / means.data()[c * 8];
        CHECK(gate_u == doctest::Approx(gate_m).epsilon(1e-12));
        // gate is spatially uniform per channel
        for (int i = 0; i < 8; ++i) {
            CHECK(a.data()[c * 8 + i] / u.data()[c * 8 + i] ==
                  doctest::Approx(gate_u).epsilon(1e-12));
        }
    }
}

TEST_CASE("spatial gate hand examples") {
    SUBCASE("single channel identity kernel") {
        CprBlock b = make_block(BlockKind::Sse, 1, 1);
        set_param(b, "s", {1});
        set_param(b, "s_bias", {0});
        Rng rng(7);
        Tensor u = Tensor::uniform({1, 2, 2, 2}, rng, -1.0, 1.0);
        Tensor out = b.forward(u);
        for (std::size_t i = 0; i < u.size(); ++i) {
            CHECK(out.data()[i] == doctest::Approx(sig(u.data()[i]) * u.data()[i]).epsilon(1e-12));
        }
    }
    SUBCASE("difference kernel gives a constant gate") {
        CprBlock b = make_block(BlockKind::Sse, 2, 1);
        set_param(b, "s", {1, -1});
        set_param(b, "s_bias", {0});
        const double t = 0.35;
        Tensor u = Tensor::zeros({2, 2, 2, 2});
        Rng rng(8);
        for (int i = 0; i < 8; ++i) {
            double c1 = rng.uniform(-1.0, 1.0);
            u.data()[i] = c1 + t;
            u.data()[8 + i] = c1;
        }
        Tensor out = b.forward(u);
        for (std::size_t i = 0; i < u.size(); ++i) {
            CHECK(out.data()[i] == doctest::Approx(sig(t) * u.data()[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("concurrent block equals max of its two branches") {
    CprBlock b = make_block(BlockKind::ScSe, 4, 2, PePooling::Avg, Aggregation::Add, 99);
    CprBlock cse = make_block(BlockKind::Cse, 4, 2);
    CprBlock sse = make_block(BlockKind::Sse, 4, 1);
    auto param = [](CprBlock& blk, const std::string& n) -> Tensor& {
        for (auto& [name, t] : blk.parameters())
            if (name == n) return t;
        throw std::runtime_error("missing " + n);
    };
    auto copy_into = [&](const std::string& from, CprBlock& dst, const std::string& to) {
        Tensor& s = param(b, from);
        Tensor& d = param(dst, to);
        std::copy(s.data(), s.data() + s.size(), d.data());
    };
    copy_into("cse_w1", cse, "w1");
    copy_into("cse_w2", cse, "w2");
    copy_into("sse_s", sse, "s");
    copy_into("sse_s_bias", sse, "s_bias");

    Rng rng(17);
    Tensor u = Tensor::uniform({4, 3, 3, 3}, rng, -1.0, 1.0);
    Tensor got = b.forward(u);
    Tensor ca = cse.forward(u);
    Tensor sa = sse.forward(u);
    for (std::size_t i = 0; i < u.size(); ++i) {
        CHECK(got.data()[i] == std::max(ca.data()[i], sa.data()[i]));
    }

    Tensor z = b.forward(Tensor::zeros({4, 2, 2, 2}));
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(z.data()[i] == 0.0);
}

TEST_CASE("sequential channel+spatial block equals its two-stage hand composition") {
    const int C = 4;
    CprBlock b = make_block(BlockKind::Cbam, C, 2, PePooling::Avg, Aggregation::Add, 55);
    auto param = [&](const std::string& n) -> const Tensor& {
        for (auto& [name, t] : b.parameters())
            if (name == n) return t;
        throw std::runtime_error("missing " + n);
    };
    Rng rng(18);
    Tensor u = Tensor::uniform({C, 3, 3, 3}, rng, -1.0, 1.0);

    // stage 1: channel gate from avg+max pooled vectors through the shared
    // two-layer map
    auto mlp = [&](const Tensor& z) {
        return linear(param("w2"), relu(linear(param("w1"), z)));
    };
    Tensor zc = add(mlp(global_pool(u, PoolMode::Avg)), mlp(global_pool(u, PoolMode::Max)));
    Tensor u1 = mul_channelwise(u, sigmoid(zc));
    // stage 2: spatial gate from the channel-pooled pair
    Tensor zs = conv3d(concat_channels(channel_pool(u1, PoolMode::Avg),
                                       channel_pool(u1, PoolMode::Max)),
                       param("v"), &param("v_bias"), 1, 1);
    Tensor want = mul_elementwise(u1, sigmoid(zs));

    Tensor got = b.forward(u);
    for (std::size_t i = 0; i < u.size(); ++i) CHECK(got.data()[i] == want.data()[i]);
}

TEST_CASE("spatially constant input doubles the pooled channel logit") {
    const int C = 2;
    CprBlock b = make_block(BlockKind::Cbam, C, 2, PePooling::Avg, Aggregation::Add, 77);
    auto param = [&](const std::string& n) -> const Tensor& {
        for (auto& [name, t] : b.parameters())
            if (name == n) return t;
        throw std::runtime_error("missing " + n);
    };
    Tensor u = Tensor::zeros({C, 2, 2, 2});
    for (int i = 0; i < 8; ++i) {
        u.data()[i] = 0.3;
        u.data()[8 + i] = -0.6;
    }
    // avg == max on constants, so the summed logit is twice one branch
    auto stages = b.compress(0, u);
    Tensor logits = b.process(0, stages)[0];
    Tensor one = linear(param("w2"), relu(linear(param("w1"), global_pool(u, PoolMode::Avg))));
    for (int c = 0; c < C; ++c) {
        CHECK(logits.data()[c] == doctest::Approx(2.0 * one.data()[c]).epsilon(1e-12));
    }
}

TEST_CASE("projection block matches a direct-summation oracle") {
    const int C = 2, H = 3, W = 3, D = 3;
    CprBlock b = make_block(BlockKind::Pe, C, 2, PePooling::Avg, Aggregation::Add, 31);
    Rng rng(19);
    Tensor u = Tensor::uniform({C, H, W, D}, rng, -1.0, 1.0);
    auto param = [&](const std::string& n) -> const Tensor& {
        for (auto& [name, t] : b.parameters())
            if (name == n) return t;
        throw std::runtime_error("missing " + n);
    };
    const int cr = C / 2;
    const Tensor& v1 = param("v1");
    const Tensor& v1b = param("v1_bias");
    const Tensor& v2 = param("v2");
    const Tensor& v2b = param("v2_bias");

    // axis means by direct summation
    auto zh = [&](int c, int i) {
        double s = 0.0;
        for (int j = 0; j < W; ++j)
            for (int k = 0; k < D; ++k) s += u.at(c, i, j, k);
        return s / (W * D);
    };
    auto zw = [&](int c, int j) {
        double s = 0.0;
        for (int i = 0; i < H; ++i)
            for (int k = 0; k < D; ++k) s += u.at(c, i, j, k);
        return s / (H * D);
    };
    auto zd = [&](int c, int k) {
        double s = 0.0;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) s += u.at(c, i, j, k);
        return s / (H * W);
    };

    Tensor got = b.forward(u);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            for (int k = 0; k < D; ++k) {
                // Z then the two pointwise convolutions around a relu
                double hmid[8];
                for (int o = 0; o < cr; ++o) {
                    double acc = v1b.data()[o];
                    for (int c = 0; c < C; ++c) {
                        double z = zh(c, i) + zw(c, j) + zd(c, k);
                        acc += v1.data()[o * C + c] * z;
                    }
                    hmid[o] = std::max(0.0, acc);
                }
                for (int c = 0; c < C; ++c) {
                    double acc = v2b.data()[c];
                    for (int o = 0; o < cr; ++o) acc += v2.data()[c * cr + o] * hmid[o];
                    double want = sig(acc) * u.at(c, i, j, k);
                    CHECK(got.at(c, i, j, k) == doctest::Approx(want).epsilon(1e-10));
                }
            }
}

TEST_CASE("additive projection is separable across axes") {
    CprBlock b = make_block(BlockKind::Pe, 2, 2, PePooling::Avg, Aggregation::Add, 3);
    Rng rng(20);
    Tensor u = Tensor::uniform({2, 3, 4, 5}, rng, -1.0, 1.0);
    Tensor z = b.compress(0, u)[0];
    Tensor zh = axis_pool(u, Axis::H, PoolMode::Avg);
    Tensor zw = axis_pool(u, Axis::W, PoolMode::Avg);
    Tensor zd = axis_pool(u, Axis::D, PoolMode::Avg);
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j)
                for (int k = 0; k < 5; ++k) {
                    double want = zh.at(c, i, 0, 0) + zw.at(c, j, 0, 0) + zd.at(c, k, 0, 0);
                    CHECK(z.at(c, i, j, k) == want);
                }
}

TEST_CASE("projection gate is spatially constant on constant inputs") {
    CprBlock b = make_block(BlockKind::Pe, 2, 2, PePooling::Avg, Aggregation::Add, 4);
    Tensor u = Tensor::zeros({2, 3, 3, 3});
    for (int i = 0; i < 27; ++i) {
        u.data()[i] = 0.7;
        u.data()[27 + i] = -0.2;
    }
    Tensor out = b.forward(u);
    for (int c = 0; c < 2; ++c) {
        double first = out.data()[c * 27];
        for (int i = 0; i < 27; ++i) CHECK(out.data()[c * 27 + i] == doctest::Approx(first));
    }
    // constant projections: Z entry = 3 * channel mean
    Tensor z = b.compress(0, u)[0];
    for (int i = 0; i < 27; ++i) {
        CHECK(z.data()[i] == doctest::Approx(3 * 0.7).epsilon(1e-12));
        CHECK(z.data()[27 + i] == doctest::Approx(3 * -0.2).epsilon(1e-12));
    }
}

TEST_CASE("slice permutation along H commutes with the projection block") {
    for (PePooling pool : {PePooling::Avg, PePooling::Max, PePooling::AvgAndMax}) {
        for (Aggregation agg : {Aggregation::Add, Aggregation::Max, Aggregation::Mult}) {
            CprBlock b = make_block(BlockKind::Pe, 2, 2, pool, agg, 21);
            Rng rng(22);
            Tensor u = Tensor::uniform({2, 3, 3, 3}, rng, -1.0, 1.0);
            Tensor perm = Tensor::zeros(u.shape());
            int order[3] = {2, 0, 1};
            for (int c = 0; c < 2; ++c)
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j)
                        for (int k = 0; k < 3; ++k)
                            perm.at(c, i, j, k) = u.at(c, order[i], j, k);
            Tensor a = b.forward(u);
            Tensor p = b.forward(perm);
            for (int c = 0; c < 2; ++c)
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j)
                        for (int k = 0; k < 3; ++k) {
                            INFO("pool ", to_string(pool), " agg ", to_string(agg));
                            // permuting slices reorders the averaging sums,
                            // so agreement is to rounding only
                            CHECK(p.at(c, i, j, k) ==
                                  doctest::Approx(a.at(c, order[i], j, k)).epsilon(1e-12));
                        }
        }
    }
}

TEST_CASE("parameter counts match the closed forms") {
    for (int c : {8, 16, 32}) {
        for (int r : {2, 8}) {
            struct Case {
                BlockKind kind;
                long want;
            } cases[] = {
                {BlockKind::Cse, 2L * c * c / r},
                {BlockKind::Sse, c + 1L},
                {BlockKind::ScSe, 2L * c * c / r + c + 1},
                {BlockKind::Cbam, 2L * c * c / r + 3},
                {BlockKind::Pe, 2L * c * c / r + c + c / r},
            };
            for (const auto& [kind, want] : cases) {
                CprBlock b = make_block(kind, c, r);
                BlockConfig cfg = b.config();
                INFO("kind ", to_string(kind), " c ", c, " r ", r);
                CHECK(b.param_count() == want);
                CHECK(block_param_count(cfg) == want);
            }
        }
    }
    // frozen reference values
    CHECK(block_param_count({BlockKind::Cse, 32, 8}) == 256);
    CHECK(block_param_count({BlockKind::Sse, 32, 1}) == 33);
    CHECK(block_param_count({BlockKind::Pe, 32, 8}) == 292);
    CHECK(default_reduction(BlockKind::ScSe) == 2);
    CHECK(default_reduction(BlockKind::Pe) == 8);
}

TEST_CASE("attenuation: gated output never exceeds the input in magnitude") {
    Rng rng(33);
    for (BlockKind kind :
         {BlockKind::Cse, BlockKind::Sse, BlockKind::ScSe, BlockKind::Cbam, BlockKind::Pe}) {
        CprBlock b = make_block(kind, 4, 2, PePooling::AvgAndMax, Aggregation::Mult,
                                rng.next_u64());
        for (int trial = 0; trial < 10; ++trial) {
            Tensor u = Tensor::uniform({4, 3, 3, 3}, rng, -2.0, 2.0);
            Tensor out = b.forward(u);
            for (std::size_t i = 0; i < u.size(); ++i) {
                CHECK(std::fabs(out.data()[i]) <= std::fabs(u.data()[i]));
            }
        }
    }
}

TEST_CASE("staged decomposition reproduces the fused forward bit for bit") {
    Rng rng(44);
    for (BlockKind kind :
         {BlockKind::Cse, BlockKind::Sse, BlockKind::ScSe, BlockKind::Cbam, BlockKind::Pe}) {
        CprBlock b = make_block(kind, 4, 2, PePooling::AvgAndMax, Aggregation::Add,
                                rng.next_u64());
        Tensor u = Tensor::uniform({4, 3, 3, 3}, rng, -1.0, 1.0);
        Tensor staged = u;
        for (int s = 0; s < b.num_stages(); ++s) {
            staged = b.recalibrate(s, staged, b.process(s, b.compress(s, staged)));
        }
        Tensor fused = b.forward(u);
        INFO("kind ", to_string(kind));
        for (std::size_t i = 0; i < u.size(); ++i) {
            CHECK(staged.data()[i] == fused.data()[i]);
        }
    }
}

TEST_CASE("config validation") {
    Rng rng(1);
    CHECK_THROWS(CprBlock({BlockKind::Cse, 6, 4}, rng));  // 6 % 4 != 0
    CprBlock b = make_block(BlockKind::Cse, 4, 2);
    CHECK_THROWS(b.forward(Tensor::zeros({3, 2, 2, 2})));
    CHECK(to_string(BlockKind::Pe) == "PE");
    CHECK(block_kind_from_string("scSE") == BlockKind::ScSe);
    CHECK_THROWS(block_kind_from_string("nope"));
}
