#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "recal3d/rng.hpp"

namespace recal3d {

// Extents of a rank-4 volume, (C, H, W, D), row-major with D fastest.
struct Shape4 {
    int c = 0, h = 0, w = 0, d = 0;

    std::size_t count() const {
        return static_cast<std::size_t>(c) * h * w * d;
    }
    std::size_t spatial() const {
        return static_cast<std::size_t>(h) * w * d;
    }
    bool operator==(const Shape4&) const = default;
    std::string str() const;
};

class Tape;
class Tensor;
namespace detail {
// Internal hook for ops (including custom loss nodes) to register an op
// result on a tape.
struct TensorAccess {
    static void set(Tensor& t, Tape* tp, int node);
};
}  // namespace detail

// Dense double-precision tensor. Copies share the underlying buffer.
// A tensor becomes differentiable once a Tape watches it or an op on a
// watched tensor produces it; node() then indexes into that tape.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape4 shape);
    static Tensor constant(Shape4 shape, double value);
    static Tensor uniform(Shape4 shape, Rng& rng, double lo, double hi);
    static Tensor from_data(Shape4 shape, std::vector<double> values);

    const Shape4& shape() const { return shape_; }
    std::size_t size() const { return data_ ? data_->size() : 0; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    const std::shared_ptr<std::vector<double>>& buffer() const { return data_; }

    double& at(int c, int i, int j, int k) {
        return (*data_)[offset(c, i, j, k)];
    }
    double at(int c, int i, int j, int k) const {
        return (*data_)[offset(c, i, j, k)];
    }
    std::size_t offset(int c, int i, int j, int k) const {
        return ((static_cast<std::size_t>(c) * shape_.h + i) * shape_.w + j) * shape_.d + k;
    }

    Tape* tape() const { return tape_; }
    int node() const { return node_; }
    bool tracked() const { return tape_ != nullptr; }

    // Drop any tape registration (e.g. before an inference-only pass, so a
    // stale pointer from a finished training pass is never dereferenced).
    void detach() {
        tape_ = nullptr;
        node_ = -1;
    }

private:
    friend class Tape;
    friend struct detail::TensorAccess;

    Shape4 shape_;
    std::shared_ptr<std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

// Records one forward pass; nodes are appended in execution order, so the
// list is already topologically sorted. backward() walks it once in reverse.
class Tape {
public:
    using BackFn = std::function<void(Tape&, const std::vector<double>& grad_out)>;

    // Registers a leaf (typically a parameter). Overwrites any stale
    // registration from a previous pass.
    void watch(Tensor& t);

    // Used by ops: reserve a node whose gradient buffer has out_size
    // entries and whose backward pushes into earlier nodes.
    int record(std::size_t out_size, BackFn back);

    void backward(const Tensor& scalar_loss);

    // Gradient accumulation buffer for a node; allocated zeroed on demand.
    std::vector<double>& grad_buf(int node);

    // Gradient of the last backward() w.r.t. a watched/produced tensor.
    const std::vector<double>& grad(const Tensor& t) const;

    std::size_t num_nodes() const { return nodes_.size(); }

private:
    struct NodeRec {
        std::size_t size;
        BackFn back;  // empty for leaves
    };
    std::vector<NodeRec> nodes_;
    std::vector<std::vector<double>> grads_;
};

enum class PoolMode { Avg, Max };
enum class Axis { H, W, D };
enum class Aggregation { Add, Max, Mult };

// ---- differentiable ops (record on the tape of their tracked inputs) ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Elementwise product; gate shape is either x's shape or (1,H,W,D)
// broadcast over channels.
Tensor mul_elementwise(const Tensor& x, const Tensor& gate);
// Per-channel product; gate shape (C,1,1,1).
Tensor mul_channelwise(const Tensor& x, const Tensor& gate);
Tensor max_elementwise(const Tensor& a, const Tensor& b);

// weight (M_out, M_in, 1, 1), x (M_in, 1, 1, 1), optional bias (M_out, 1, 1, 1).
Tensor linear(const Tensor& weight, const Tensor& x, const Tensor* bias = nullptr);

// kernel layout (Cout*Cin, k, k, k); k odd in {1, 3}; zero padding (k-1)/2,
// stride 1, output spatial extents equal input's.
Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor* bias,
              int c_out, int k);

Tensor global_pool(const Tensor& x, PoolMode mode);          // -> (C,1,1,1)
Tensor axis_pool(const Tensor& x, Axis axis, PoolMode mode); // -> (C,L,1,1)
Tensor channel_pool(const Tensor& x, PoolMode mode);         // -> (1,H,W,D)

// zh (C,H,1,1), zw (C,W,1,1), zd (C,D,1,1) -> (C,H,W,D).
Tensor broadcast_combine(const Tensor& zh, const Tensor& zw, const Tensor& zd,
                         Aggregation agg);

Tensor concat_channels(const Tensor& a, const Tensor& b);

Tensor maxpool_down2(const Tensor& x);     // requires even H, W, D
Tensor upsample_nearest2(const Tensor& x); // -> (C,2H,2W,2D)

// gain, bias shaped (C,1,1,1); per-channel standardization over H*W*D.
Tensor instance_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                     double eps = 1e-5);

Tensor log_softmax_channels(const Tensor& x);

Tensor sum(const Tensor& x);  // -> scalar (1,1,1,1)

// ---- gradient checking ----

// Builds the graph with `build(tape, params)` (params already watched),
// compares analytic parameter gradients against central differences, and
// returns max |a-n| / max(|a|,|n|,1e-8). When max_entries_per_tensor > 0,
// only that many evenly spaced entries per tensor are perturbed.
double grad_check(
    const std::function<Tensor(Tape&, std::vector<Tensor>&)>& build,
    std::vector<Tensor> params, double eps = 1e-5,
    int max_entries_per_tensor = -1);

}  // namespace recal3d
