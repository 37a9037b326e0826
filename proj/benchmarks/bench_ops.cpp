#include <benchmark/benchmark.h>

#include "recal3d/blocks.hpp"
#include "recal3d/segnet.hpp"

using namespace recal3d;

namespace {

Tensor make_input(int c, int e, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::uniform({c, e, e, e}, rng, -1.0, 1.0);
}

void BM_Conv3d(benchmark::State& state) {
    int c = static_cast<int>(state.range(0));
    int e = static_cast<int>(state.range(1));
    Rng rng(1);
    Tensor x = make_input(c, e, 2);
    Tensor kernel = Tensor::uniform({c * c, 3, 3, 3}, rng, -0.1, 0.1);
    for (auto _ : state) {
        benchmark::DoNotOptimize(conv3d(x, kernel, nullptr, c, 3));
    }
    state.SetItemsProcessed(state.iterations() * x.size());
}
BENCHMARK(BM_Conv3d)->Args({8, 16})->Args({16, 16})->Args({16, 8});

void BM_BlockForward(benchmark::State& state) {
    BlockConfig bc;
    bc.kind = static_cast<BlockKind>(state.range(0));
    bc.channels = 16;
    bc.reduction = default_reduction(bc.kind);
    Rng rng(3);
    CprBlock block(bc, rng);
    Tensor x = make_input(bc.channels, 16, 4);
    for (auto _ : state) {
        benchmark::DoNotOptimize(block.forward(x));
    }
    state.SetItemsProcessed(state.iterations() * x.size());
}
BENCHMARK(BM_BlockForward)
    ->Arg(static_cast<int>(BlockKind::Cse))
    ->Arg(static_cast<int>(BlockKind::Sse))
    ->Arg(static_cast<int>(BlockKind::ScSe))
    ->Arg(static_cast<int>(BlockKind::Cbam))
    ->Arg(static_cast<int>(BlockKind::Pe));

void BM_NetForward(benchmark::State& state) {
    NetConfig cfg;
    cfg.n_classes = 4;
    cfg.stage_channels = {{4, 8}, {8, 16}, {16, 32}, {32, 64}};
    cfg.block_kind = BlockKind::Pe;
    cfg.placement = Placement::P6;
    Rng rng(5);
    SegNet net(cfg, rng);
    Tensor x = make_input(1, 16, 6);
    for (auto _ : state) {
        benchmark::DoNotOptimize(net.forward(x));
    }
}
BENCHMARK(BM_NetForward);

}  // namespace

BENCHMARK_MAIN();
