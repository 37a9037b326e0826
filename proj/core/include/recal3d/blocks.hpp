#pragma once

#include <string>
#include <utility>
#include <vector>

#include "recal3d/tensor.hpp"

namespace recal3d {

enum class BlockKind { None, Cse, Sse, ScSe, Cbam, Pe };

enum class PePooling { Avg, Max, AvgAndMax };

std::string to_string(BlockKind k);
BlockKind block_kind_from_string(const std::string& s);
std::string to_string(PePooling p);
PePooling pe_pooling_from_string(const std::string& s);
std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& s);

struct BlockConfig {
    BlockKind kind = BlockKind::Cse;
    int channels = 0;
    // Bottleneck reduction; for scSE this is the cSE-branch reduction.
    int reduction = 8;
    PePooling pe_pooling = PePooling::Avg;
    Aggregation pe_aggregation = Aggregation::Add;
};

// Default reduction factors: r=8 for cSE/CBAM/PE, r=2 for scSE.
int default_reduction(BlockKind kind);

// One recalibration block in the compress / process / recalibrate
// decomposition. CBAM is two chained stages (channel, then spatial); the
// other kinds have a single stage. forward() is exactly the stage-wise
// composition, so calling the stages separately reproduces it bit for bit.
class CprBlock {
public:
    CprBlock(BlockConfig cfg, Rng& rng);

    const BlockConfig& config() const { return cfg_; }

    int num_stages() const { return cfg_.kind == BlockKind::Cbam ? 2 : 1; }

    // Stage-local descriptors (e.g. pooled vectors, projected maps).
    std::vector<Tensor> compress(int stage, const Tensor& u) const;
    // Pre-sigmoid gate logits, one per branch (two for scSE).
    std::vector<Tensor> process(int stage, const std::vector<Tensor>& z) const;
    Tensor recalibrate(int stage, const Tensor& u, const std::vector<Tensor>& logits) const;

    Tensor forward(const Tensor& u) const;

    long param_count() const;

    std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

private:
    const Tensor& p(const std::string& name) const;

    BlockConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

// Closed-form learnable-scalar count for a block configuration.
long block_param_count(const BlockConfig& cfg);

}  // namespace recal3d
