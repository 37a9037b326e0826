#include "recal3d/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace recal3d {

std::string to_string(BlockKind k) {
    switch (k) {
        case BlockKind::None: return "none";
        case BlockKind::Cse: return "cSE";
        case BlockKind::Sse: return "sSE";
        case BlockKind::ScSe: return "scSE";
        case BlockKind::Cbam: return "CBAM";
        case BlockKind::Pe: return "PE";
    }
    return "?";
}

BlockKind block_kind_from_string(const std::string& s) {
    if (s == "none") return BlockKind::None;
    if (s == "cSE") return BlockKind::Cse;
    if (s == "sSE") return BlockKind::Sse;
    if (s == "scSE") return BlockKind::ScSe;
    if (s == "CBAM") return BlockKind::Cbam;
    if (s == "PE") return BlockKind::Pe;
    throw std::invalid_argument("unknown block kind '" + s + "'");
}

std::string to_string(PePooling p) {
    switch (p) {
        case PePooling::Avg: return "avg";
        case PePooling::Max: return "max";
        case PePooling::AvgAndMax: return "avg_and_max";
    }
    return "?";
}

PePooling pe_pooling_from_string(const std::string& s) {
    if (s == "avg") return PePooling::Avg;
    if (s == "max") return PePooling::Max;
    if (s == "avg_and_max") return PePooling::AvgAndMax;
    throw std::invalid_argument("unknown PE pooling '" + s + "'");
}

std::string to_string(Aggregation a) {
    switch (a) {
        case Aggregation::Add: return "add";
        case Aggregation::Max: return "max";
        case Aggregation::Mult: return "mult";
    }
    return "?";
}

Aggregation aggregation_from_string(const std::string& s) {
    if (s == "add") return Aggregation::Add;
    if (s == "max") return Aggregation::Max;
    if (s == "mult") return Aggregation::Mult;
    throw std::invalid_argument("unknown aggregation '" + s + "'");
}

int default_reduction(BlockKind kind) {
    return kind == BlockKind::ScSe ? 2 : 8;
}

namespace {

Tensor init_weight(Shape4 shape, int fan_in, Rng& rng) {
    double bound = std::sqrt(1.0 / fan_in);
    return Tensor::uniform(shape, rng, -bound, bound);
}

}  // namespace

CprBlock::CprBlock(BlockConfig cfg, Rng& rng) : cfg_(cfg) {
    const int c = cfg_.channels;
    const int r = cfg_.reduction;
    if (c < 1) throw std::invalid_argument("block channels must be >= 1");
    bool needs_reduction = cfg_.kind != BlockKind::Sse;
    if (needs_reduction && (r < 1 || c % r != 0)) {
        throw std::invalid_argument("channels " + std::to_string(c) +
                                    " not divisible by reduction " + std::to_string(r));
    }
    const int cr = needs_reduction ? c / r : 0;
    switch (cfg_.kind) {
        case BlockKind::None:
            throw std::invalid_argument("BlockKind::None has no block instance");
        case BlockKind::Cse:
            params_.emplace_back("w1", init_weight({cr, c, 1, 1}, c, rng));
            params_.emplace_back("w2", init_weight({c, cr, 1, 1}, cr, rng));
            break;
        case BlockKind::Sse:
            params_.emplace_back("s", init_weight({c, 1, 1, 1}, c, rng));
            params_.emplace_back("s_bias", Tensor::zeros({1, 1, 1, 1}));
            break;
        case BlockKind::ScSe:
            params_.emplace_back("cse_w1", init_weight({cr, c, 1, 1}, c, rng));
            params_.emplace_back("cse_w2", init_weight({c, cr, 1, 1}, cr, rng));
            params_.emplace_back("sse_s", init_weight({c, 1, 1, 1}, c, rng));
            params_.emplace_back("sse_s_bias", Tensor::zeros({1, 1, 1, 1}));
            break;
        case BlockKind::Cbam:
            params_.emplace_back("w1", init_weight({cr, c, 1, 1}, c, rng));
            params_.emplace_back("w2", init_weight({c, cr, 1, 1}, cr, rng));
            params_.emplace_back("v", init_weight({2, 1, 1, 1}, 2, rng));
            params_.emplace_back("v_bias", Tensor::zeros({1, 1, 1, 1}));
            break;
        case BlockKind::Pe:
            params_.emplace_back("v1", init_weight({cr * c, 1, 1, 1}, c, rng));
            params_.emplace_back("v1_bias", Tensor::zeros({cr, 1, 1, 1}));
            params_.emplace_back("v2", init_weight({c * cr, 1, 1, 1}, cr, rng));
            params_.emplace_back("v2_bias", Tensor::zeros({c, 1, 1, 1}));
            break;
    }
}

const Tensor& CprBlock::p(const std::string& name) const {
    for (const auto& [n, t] : params_) {
        if (n == name) return t;
    }
    throw std::runtime_error("no block parameter named '" + name + "'");
}

namespace {

void check_channels(const Tensor& u, int c) {
    if (u.shape().c != c) {
        throw std::invalid_argument("block configured for " + std::to_string(c) +
                                    " channels, input has " + std::to_string(u.shape().c));
    }
}

}  // namespace

std::vector<Tensor> CprBlock::compress(int stage, const Tensor& u) const {
    check_channels(u, cfg_.channels);
    switch (cfg_.kind) {
        case BlockKind::Cse:
            return {global_pool(u, PoolMode::Avg)};
        case BlockKind::Sse:
            // sSE folds the process step into the compressor (one 1x1x1 conv).
            return {conv3d(u, p("s"), &p("s_bias"), 1, 1)};
        case BlockKind::ScSe:
            return {global_pool(u, PoolMode::Avg),
                    conv3d(u, p("sse_s"), &p("sse_s_bias"), 1, 1)};
        case BlockKind::Cbam:
            if (stage == 0) {
                return {global_pool(u, PoolMode::Avg), global_pool(u, PoolMode::Max)};
            }
            return {concat_channels(channel_pool(u, PoolMode::Avg),
                                    channel_pool(u, PoolMode::Max))};
        case BlockKind::Pe: {
            auto project = [&](PoolMode m) {
                return broadcast_combine(axis_pool(u, Axis::H, m), axis_pool(u, Axis::W, m),
                                         axis_pool(u, Axis::D, m), cfg_.pe_aggregation);
            };
            switch (cfg_.pe_pooling) {
                case PePooling::Avg: return std::vector<Tensor>{project(PoolMode::Avg)};
                case PePooling::Max: return std::vector<Tensor>{project(PoolMode::Max)};
                case PePooling::AvgAndMax:
                    return {project(PoolMode::Avg), project(PoolMode::Max)};
            }
            break;
        }
        case BlockKind::None:
            break;
    }
    throw std::logic_error("unreachable");
}

std::vector<Tensor> CprBlock::process(int stage, const std::vector<Tensor>& z) const {
    switch (cfg_.kind) {
        case BlockKind::Cse:
            return {linear(p("w2"), relu(linear(p("w1"), z[0])))};
        case BlockKind::Sse:
            return {z[0]};  // process step already folded into compress
        case BlockKind::ScSe:
            return {linear(p("cse_w2"), relu(linear(p("cse_w1"), z[0]))), z[1]};
        case BlockKind::Cbam: {
            if (stage == 0) {
                auto mlp = [&](const Tensor& v) {
                    return linear(p("w2"), relu(linear(p("w1"), v)));
                };
                return {add(mlp(z[0]), mlp(z[1]))};
            }
            return {conv3d(z[0], p("v"), &p("v_bias"), 1, 1)};
        }
        case BlockKind::Pe: {
            const int c = cfg_.channels;
            const int cr = c / cfg_.reduction;
            auto excite = [&](const Tensor& zz) {
                Tensor h = relu(conv3d(zz, p("v1"), &p("v1_bias"), cr, 1));
                return conv3d(h, p("v2"), &p("v2_bias"), c, 1);
            };
            if (z.size() == 2) {
                // avg&max: both maps pass the shared convs, summed pre-sigmoid
                return {add(excite(z[0]), excite(z[1]))};
            }
            return {excite(z[0])};
        }
        case BlockKind::None:
            break;
    }
    throw std::logic_error("unreachable");
}

Tensor CprBlock::recalibrate(int stage, const Tensor& u, const std::vector<Tensor>& logits) const {
    switch (cfg_.kind) {
        case BlockKind::Cse:
            return mul_channelwise(u, sigmoid(logits[0]));
        case BlockKind::Sse:
            return mul_elementwise(u, sigmoid(logits[0]));
        case BlockKind::ScSe:
            return max_elementwise(mul_channelwise(u, sigmoid(logits[0])),
                                   mul_elementwise(u, sigmoid(logits[1])));
        case BlockKind::Cbam:
            if (stage == 0) return mul_channelwise(u, sigmoid(logits[0]));
            return mul_elementwise(u, sigmoid(logits[0]));
        case BlockKind::Pe:
            return mul_elementwise(u, sigmoid(logits[0]));
        case BlockKind::None:
            break;
    }
    throw std::logic_error("unreachable");
}

Tensor CprBlock::forward(const Tensor& u) const {
    Tensor cur = u;
    for (int s = 0; s < num_stages(); ++s) {
        cur = recalibrate(s, cur, process(s, compress(s, cur)));
    }
    return cur;
}

long CprBlock::param_count() const {
    long n = 0;
    for (const auto& [name, t] : params_) n += static_cast<long>(t.size());
    return n;
}

long block_param_count(const BlockConfig& cfg) {
    const long c = cfg.channels;
    const long r = cfg.reduction;
    switch (cfg.kind) {
        case BlockKind::None: return 0;
        case BlockKind::Cse: return 2 * c * c / r;
        case BlockKind::Sse: return c + 1;
        case BlockKind::ScSe: return 2 * c * c / r + c + 1;
        case BlockKind::Cbam: return 2 * c * c / r + 3;
        case BlockKind::Pe: return 2 * c * c / r + c + c / r;
    }
    return 0;
}

}  // namespace recal3d
