#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "recal3d/blocks.hpp"
#include "recal3d/tensor.hpp"

namespace recal3d {

// Which stages carry a recalibration block:
//   P0 none, P1 encoders, P2 decoders, P3 bottleneck,
//   P4 encoders+decoders, P5 encoders+bottleneck, P6 all.
enum class Placement { P0, P1, P2, P3, P4, P5, P6 };

std::string to_string(Placement p);
Placement placement_from_string(const std::string& s);
int placement_block_count(Placement p);

struct NetConfig {
    int in_channels = 1;
    int n_classes = 2;
    // Output widths of the two convolutions in encoders 1..3 and the
    // bottleneck; decoder widths mirror the encoders in reverse.
    std::vector<std::array<int, 2>> stage_channels = {
        {16, 32}, {32, 64}, {64, 128}, {128, 256}};
    BlockKind block_kind = BlockKind::None;
    Placement placement = Placement::P0;
    int reduction = 8;
    PePooling pe_pooling = PePooling::Avg;
    Aggregation pe_aggregation = Aggregation::Add;

    void validate() const;
    // Stable textual form; hashed into the weights-file digest.
    std::string canonical() const;
    std::uint64_t digest() const;
};

// Two (conv3x3x3 -> instance norm -> relu) units; convolutions are
// bias-free since the norm's own bias follows immediately.
struct ConvUnit {
    int c_in = 0, c_out = 0, k = 3;
    Tensor kernel, in_gain, in_bias;
};

struct Stage {
    ConvUnit unit1, unit2;
    std::optional<CprBlock> block;
};

// Scaled 3D U-net: 3 encoders (first two followed by downsampling),
// bottleneck, 3 decoders (last two preceded by upsampling), skip
// concatenations encoder->decoder, 1x1x1 classifier.
class SegNet {
public:
    SegNet(NetConfig cfg, Rng& rng);

    const NetConfig& config() const { return cfg_; }

    // H, W, D must be divisible by 4; output is (n_classes, H, W, D).
    Tensor forward(const Tensor& volume) const;

    // Flattened (name, tensor) pointers in build order; the serialization
    // and optimizer contract. Stable for the network's lifetime.
    std::vector<std::pair<std::string, Tensor*>> parameters();

    long param_count() const;
    int block_count() const;

    void watch_all(Tape& tape);
    void detach_all();

private:
    Tensor run_stage(const Stage& s, const Tensor& x) const;

    NetConfig cfg_;
    std::vector<Stage> encoders_;  // 3
    Stage bottleneck_;
    std::vector<Stage> decoders_;  // 3
    Tensor cls_kernel_, cls_bias_;
};

struct ParamReport {
    long total = 0;
    long base = 0;       // same net with placement P0
    long overhead = 0;   // total - base
    double overhead_fraction = 0.0;
    int blocks = 0;
};

ParamReport param_report(const SegNet& net);

// Pure function of the configuration (no network instance needed).
long net_param_count(const NetConfig& cfg);

}  // namespace recal3d
