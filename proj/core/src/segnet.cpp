#include "recal3d/segnet.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace recal3d {

std::string to_string(Placement p) {
    return "P" + std::to_string(static_cast<int>(p));
}

Placement placement_from_string(const std::string& s) {
    if (s.size() == 2 && s[0] == 'P' && s[1] >= '0' && s[1] <= '6') {
        return static_cast<Placement>(s[1] - '0');
    }
    throw std::invalid_argument("unknown placement '" + s + "'");
}

namespace {

struct PlacementMask {
    bool enc = false, bn = false, dec = false;
};

PlacementMask placement_mask(Placement p) {
    switch (p) {
        case Placement::P0: return {false, false, false};
        case Placement::P1: return {true, false, false};
        case Placement::P2: return {false, false, true};
        case Placement::P3: return {false, true, false};
        case Placement::P4: return {true, false, true};
        case Placement::P5: return {true, true, false};
        case Placement::P6: return {true, true, true};
    }
    return {};
}

}  // namespace

int placement_block_count(Placement p) {
    PlacementMask m = placement_mask(p);
    return 3 * m.enc + m.bn + 3 * m.dec;
}

void NetConfig::validate() const {
    if (n_classes < 2) throw std::invalid_argument("n_classes must be >= 2");
    if (in_channels < 1) throw std::invalid_argument("in_channels must be >= 1");
    if (stage_channels.size() != 4) {
        throw std::invalid_argument("stage_channels must list 3 encoders + bottleneck");
    }
    for (const auto& pair : stage_channels) {
        if (pair[0] < 1 || pair[1] < 1) {
            throw std::invalid_argument("stage widths must be >= 1");
        }
    }
    if (placement != Placement::P0 && block_kind == BlockKind::None) {
        throw std::invalid_argument("placement without a block kind");
    }
}

std::string NetConfig::canonical() const {
    std::ostringstream os;
    os << "in=" << in_channels << ";classes=" << n_classes << ";widths=";
    for (std::size_t i = 0; i < stage_channels.size(); ++i) {
        if (i) os << "|";
        os << stage_channels[i][0] << "," << stage_channels[i][1];
    }
    os << ";block=" << to_string(block_kind) << ";placement=" << to_string(placement)
       << ";r=" << reduction << ";pe_pool=" << to_string(pe_pooling)
       << ";pe_agg=" << to_string(pe_aggregation);
    return os.str();
}

std::uint64_t NetConfig::digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : canonical()) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

ConvUnit make_unit(int c_in, int c_out, int k, Rng& rng) {
    ConvUnit u;
    u.c_in = c_in;
    u.c_out = c_out;
    u.k = k;
    int fan_in = c_in * k * k * k;
    double bound = std::sqrt(1.0 / fan_in);
    u.kernel = Tensor::uniform({c_out * c_in, k, k, k}, rng, -bound, bound);
    u.in_gain = Tensor::constant({c_out, 1, 1, 1}, 1.0);
    u.in_bias = Tensor::zeros({c_out, 1, 1, 1});
    return u;
}

Stage make_stage(int c_in, std::array<int, 2> widths, bool with_block,
                 const NetConfig& cfg, int block_channels, Rng& rng) {
    Stage s;
    s.unit1 = make_unit(c_in, widths[0], 3, rng);
    s.unit2 = make_unit(widths[0], widths[1], 3, rng);
    if (with_block) {
        BlockConfig bc;
        bc.kind = cfg.block_kind;
        bc.channels = block_channels;
        bc.reduction = cfg.reduction;
        bc.pe_pooling = cfg.pe_pooling;
        bc.pe_aggregation = cfg.pe_aggregation;
        s.block.emplace(bc, rng);
    }
    return s;
}

}  // namespace

SegNet::SegNet(NetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto& sc = cfg_.stage_channels;
    PlacementMask m = placement_mask(cfg_.placement);

    int in = cfg_.in_channels;
    for (int e = 0; e < 3; ++e) {
        encoders_.push_back(make_stage(in, sc[e], m.enc, cfg_, sc[e][1], rng));
        in = sc[e][1];
    }
    bottleneck_ = make_stage(sc[2][1], sc[3], m.bn, cfg_, sc[3][1], rng);

    // Decoder d mirrors encoder 3-d: first conv maps (skip + upsampled)
    // channels down to that encoder's second width, second conv to its
    // first width.
    int carry = sc[3][1];
    for (int d = 0; d < 3; ++d) {
        int mirror = 2 - d;
        int c_in = carry + sc[mirror][1];
        std::array<int, 2> widths{sc[mirror][1], sc[mirror][0]};
        decoders_.push_back(make_stage(c_in, widths, m.dec, cfg_, widths[1], rng));
        carry = widths[1];
    }

    int fan_in = sc[0][0];
    double bound = std::sqrt(1.0 / fan_in);
    cls_kernel_ = Tensor::uniform({cfg_.n_classes * sc[0][0], 1, 1, 1}, rng, -bound, bound);
    cls_bias_ = Tensor::zeros({cfg_.n_classes, 1, 1, 1});
}

Tensor SegNet::run_stage(const Stage& s, const Tensor& x) const {
    auto unit = [](const ConvUnit& u, const Tensor& t) {
        return relu(instance_norm(conv3d(t, u.kernel, nullptr, u.c_out, u.k), u.in_gain,
                                  u.in_bias));
    };
    Tensor y = unit(s.unit2, unit(s.unit1, x));
    if (s.block) y = s.block->forward(y);
    return y;
}

Tensor SegNet::forward(const Tensor& volume) const {
    const Shape4& s = volume.shape();
    if (s.c != cfg_.in_channels) {
        throw std::invalid_argument("input has " + std::to_string(s.c) +
                                    " channels, expected " + std::to_string(cfg_.in_channels));
    }
    if (s.h % 4 || s.w % 4 || s.d % 4) {
        throw std::invalid_argument("spatial extents must be divisible by 4, got " + s.str());
    }

    Tensor e1 = run_stage(encoders_[0], volume);
    Tensor e2 = run_stage(encoders_[1], maxpool_down2(e1));
    Tensor e3 = run_stage(encoders_[2], maxpool_down2(e2));
    Tensor bn = run_stage(bottleneck_, e3);
    Tensor d1 = run_stage(decoders_[0], concat_channels(bn, e3));
    Tensor d2 = run_stage(decoders_[1], concat_channels(upsample_nearest2(d1), e2));
    Tensor d3 = run_stage(decoders_[2], concat_channels(upsample_nearest2(d2), e1));
    return conv3d(d3, cls_kernel_, &cls_bias_, cfg_.n_classes, 1);
}

std::vector<std::pair<std::string, Tensor*>> SegNet::parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto add_unit = [&](const std::string& prefix, ConvUnit& u) {
        out.emplace_back(prefix + ".kernel", &u.kernel);
        out.emplace_back(prefix + ".in_gain", &u.in_gain);
        out.emplace_back(prefix + ".in_bias", &u.in_bias);
    };
    auto add_stage = [&](const std::string& prefix, Stage& st) {
        add_unit(prefix + ".unit1", st.unit1);
        add_unit(prefix + ".unit2", st.unit2);
        if (st.block) {
            for (auto& [name, t] : st.block->parameters()) {
                out.emplace_back(prefix + ".block." + name, &t);
            }
        }
    };
    for (int e = 0; e < 3; ++e) add_stage("enc" + std::to_string(e + 1), encoders_[e]);
    add_stage("bottleneck", bottleneck_);
    for (int d = 0; d < 3; ++d) add_stage("dec" + std::to_string(d + 1), decoders_[d]);
    out.emplace_back("classifier.kernel", &cls_kernel_);
    out.emplace_back("classifier.bias", &cls_bias_);
    return out;
}

long SegNet::param_count() const {
    long n = 0;
    for (auto& [name, t] : const_cast<SegNet*>(this)->parameters()) {
        n += static_cast<long>(t->size());
    }
    return n;
}

int SegNet::block_count() const {
    int n = 0;
    for (const Stage* st : {&encoders_[0], &encoders_[1], &encoders_[2], &bottleneck_,
                            &decoders_[0], &decoders_[1], &decoders_[2]}) {
        n += st->block.has_value();
    }
    return n;
}

void SegNet::watch_all(Tape& tape) {
    for (auto& [name, t] : parameters()) tape.watch(*t);
}

void SegNet::detach_all() {
    for (auto& [name, t] : parameters()) t->detach();
}

ParamReport param_report(const SegNet& net) {
    ParamReport r;
    r.total = net.param_count();
    NetConfig base = net.config();
    base.placement = Placement::P0;
    base.block_kind = BlockKind::None;
    r.base = net_param_count(base);
    r.overhead = r.total - r.base;
    r.overhead_fraction = static_cast<double>(r.overhead) / static_cast<double>(r.base);
    r.blocks = net.block_count();
    return r;
}

long net_param_count(const NetConfig& cfg) {
    cfg.validate();
    const auto& sc = cfg.stage_channels;
    PlacementMask m = placement_mask(cfg.placement);
    auto unit_params = [](long c_in, long c_out, long k) {
        return c_in * c_out * k * k * k + 2 * c_out;  // kernel + norm gain/bias
    };
    auto block_params = [&](int channels) {
        BlockConfig bc;
        bc.kind = cfg.block_kind;
        bc.channels = channels;
        bc.reduction = cfg.reduction;
        return block_param_count(bc);
    };
    long n = 0;
    int in = cfg.in_channels;
    for (int e = 0; e < 3; ++e) {
        n += unit_params(in, sc[e][0], 3) + unit_params(sc[e][0], sc[e][1], 3);
        if (m.enc) n += block_params(sc[e][1]);
        in = sc[e][1];
    }
    n += unit_params(sc[2][1], sc[3][0], 3) + unit_params(sc[3][0], sc[3][1], 3);
    if (m.bn) n += block_params(sc[3][1]);
    long carry = sc[3][1];
    for (int d = 0; d < 3; ++d) {
        int mirror = 2 - d;
        long c_in = carry + sc[mirror][1];
        n += unit_params(c_in, sc[mirror][1], 3) + unit_params(sc[mirror][1], sc[mirror][0], 3);
        if (m.dec) n += block_params(sc[mirror][0]);
        carry = sc[mirror][0];
    }
    n += static_cast<long>(cfg.n_classes) * sc[0][0] + cfg.n_classes;
    return n;
}

}  // namespace recal3d
