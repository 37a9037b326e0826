#include "recal3d/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <stdexcept>

namespace recal3d {

std::string Shape4::str() const {
    return "(" + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "," + std::to_string(d) + ")";
}

namespace {

void check_shape(const Shape4& s) {
    if (s.c < 1 || s.h < 1 || s.w < 1 || s.d < 1) {
        throw std::invalid_argument("tensor extents must be >= 1, got " + s.str());
    }
}

Tape* joint_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tp = nullptr;
    for (const Tensor* t : ts) {
        if (t == nullptr || !t->tracked()) continue;
        if (tp != nullptr && tp != t->tape()) {
            throw std::runtime_error("operands recorded on different tapes");
        }
        tp = t->tape();
    }
    return tp;
}

}  // namespace

Tensor Tensor::zeros(Shape4 shape) {
    check_shape(shape);
    Tensor t;
    t.shape_ = shape;
    t.data_ = std::make_shared<std::vector<double>>(shape.count(), 0.0);
    return t;
}

Tensor Tensor::constant(Shape4 shape, double value) {
    Tensor t = zeros(shape);
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
}

Tensor Tensor::uniform(Shape4 shape, Rng& rng, double lo, double hi) {
    Tensor t = zeros(shape);
    for (double& v : *t.data_) v = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::from_data(Shape4 shape, std::vector<double> values) {
    check_shape(shape);
    if (values.size() != shape.count()) {
        throw std::invalid_argument("data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape.str());
    }
    Tensor t;
    t.shape_ = shape;
    t.data_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

void Tape::watch(Tensor& t) {
    if (!t.data_) throw std::runtime_error("cannot watch an empty tensor");
    t.tape_ = this;
    t.node_ = record(t.size(), BackFn{});
}

int Tape::record(std::size_t out_size, BackFn back) {
    nodes_.push_back({out_size, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad_buf(int node) {
    auto& g = grads_[node];
    if (g.empty()) g.assign(nodes_[node].size, 0.0);
    return g;
}

void Tape::backward(const Tensor& scalar_loss) {
    if (scalar_loss.tape() != this || scalar_loss.node() < 0) {
        throw std::runtime_error("loss is not recorded on this tape");
    }
    if (scalar_loss.size() != 1) {
        throw std::runtime_error("backward requires a scalar loss, got shape " +
                                 scalar_loss.shape().str());
    }
    grads_.assign(nodes_.size(), {});
    grad_buf(scalar_loss.node())[0] = 1.0;
    for (int i = scalar_loss.node(); i >= 0; --i) {
        if (grads_[i].empty() || !nodes_[i].back) continue;
        nodes_[i].back(*this, grads_[i]);
    }
}

const std::vector<double>& Tape::grad(const Tensor& t) const {
    if (t.tape() != this || t.node() < 0) {
        throw std::runtime_error("tensor is not recorded on this tape");
    }
    static const std::vector<double> kEmpty;
    const auto& g = grads_[t.node()];
    return g.empty() ? kEmpty : g;
}

static Tensor finish(Tensor out, Tape* tp, Tape::BackFn back) {
    if (tp != nullptr) {
        int node = tp->record(out.size(), std::move(back));
        detail::TensorAccess::set(out, tp, node);
    }
    return out;
}

namespace {

void accumulate(Tape& tape, int node, const std::vector<double>& delta) {
    if (node < 0) return;
    auto& g = tape.grad_buf(node);
    for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!(a.shape() == b.shape())) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    a.shape().str() + " vs " + b.shape().str());
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tape* tp = joint_tape({&a, &b});
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    int na = a.node(), nb = b.node();
    bool ta = a.tracked(), tb = b.tracked();
    return finish(std::move(out), tp,
                  [na, nb, ta, tb](Tape& t, const std::vector<double>& go) {
                      if (ta) accumulate(t, na, go);
                      if (tb) accumulate(t, nb, go);
                  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tape* tp = joint_tape({&a, &b});
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    int na = a.node(), nb = b.node();
    bool ta = a.tracked(), tb = b.tracked();
    return finish(std::move(out), tp,
                  [na, nb, ta, tb](Tape& t, const std::vector<double>& go) {
                      if (ta) accumulate(t, na, go);
                      if (tb) {
                          auto& g = t.grad_buf(nb);
                          for (std::size_t i = 0; i < go.size(); ++i) g[i] -= go[i];
                      }
                  });
}

Tensor scale(const Tensor& a, double s) {
    Tape* tp = joint_tape({&a});
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = s * a.data()[i];
    int na = a.node();
    return finish(std::move(out), tp, [na, s](Tape& t, const std::vector<double>& go) {
        auto& g = t.grad_buf(na);
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += s * go[i];
    });
}

Tensor relu(const Tensor& x) {
    Tape* tp = joint_tape({&x});
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = std::max(0.0, x.data()[i]);
    int nx = x.node();
    auto xin = x.buffer();
    return finish(std::move(out), tp, [nx, xin](Tape& t, const std::vector<double>& go) {
        auto& g = t.grad_buf(nx);
        for (std::size_t i = 0; i < go.size(); ++i) {
            if ((*xin)[i] > 0.0) g[i] += go[i];
        }
    });
}

namespace {

// Two-branch form, no overflow for large |v|.
double stable_sigmoid(double v) {
    if (v >= 0.0) {
        return 1.0 / (1.0 + std::exp(-v));
    }
    double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
    Tape* tp = joint_tape({&x});
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = stable_sigmoid(x.data()[i]);
    int nx = x.node();
    auto y = out.buffer();
    return finish(std::move(out), tp, [nx, y](Tape& t, const std::vector<double>& go) {
        auto& g = t.grad_buf(nx);
        for (std::size_t i = 0; i < go.size(); ++i) {
            double s = (*y)[i];
            g[i] += go[i] * s * (1.0 - s);
        }
    });
}

Tensor mul_elementwise(const Tensor& x, const Tensor& gate) {
    const Shape4& xs = x.shape();
    const Shape4& gs = gate.shape();
    bool full = gs == xs;
    bool bcast = gs.c == 1 && gs.h == xs.h && gs.w == xs.w && gs.d == xs.d;
    if (!full && !bcast) {
        throw std::invalid_argument("mul_elementwise: gate shape " + gs.str() +
                                    " incompatible with " + xs.str());
    }
    Tape* tp = joint_tape({&x, &gate});
    Tensor out = Tensor::zeros(xs);
    std::size_t sp = xs.spatial();
    for (int c = 0; c < xs.c; ++c) {
        const double* gv = gate.data() + (full ? c * sp : 0);
        const double* xv = x.data() + c * sp;
        double* ov = out.data() + c * sp;
        for (std::size_t i = 0; i < sp; ++i) ov[i] = xv[i] * gv[i];
    }
    int nx = x.node(), ng = gate.node();
    bool txr = x.tracked(), tg = gate.tracked();
    auto xb = x.buffer();
    auto gb = gate.buffer();
    int C = xs.c;
    return finish(std::move(out), tp,
                  [=](Tape& t, const std::vector<double>& go) {
                      if (txr) {
                          auto& g = t.grad_buf(nx);
                          for (int c = 0; c < C; ++c)
                              for (std::size_t i = 0; i < sp; ++i)
                                  g[c * sp + i] += go[c * sp + i] * (*gb)[(full ? c * sp : 0) + i];
                      }
                      if (tg) {
                          auto& g = t.grad_buf(ng);
                          for (int c = 0; c < C; ++c)
                              for (std::size_t i = 0; i < sp; ++i)
                                  g[(full ? c * sp : 0) + i] += go[c * sp + i] * (*xb)[c * sp + i];
                      }
                  });
}

Tensor mul_channelwise(const Tensor& x, const Tensor& gate) {
    const Shape4& xs = x.shape();
    if (!(gate.shape() == Shape4{xs.c, 1, 1, 1})) {
        throw std::invalid_argument("mul_channelwise: gate shape " + gate.shape().str() +
                                    " is not (C,1,1,1) for C=" + std::to_string(xs.c));
    }
    Tape* tp = joint_tape({&x, &gate});
    Tensor out = Tensor::zeros(xs);
    std::size_t sp = xs.spatial();
    for (int c = 0; c < xs.c; ++c) {
        double gv = gate.data()[c];
        const double* xv = x.data() + c * sp;
        double* ov = out.data() + c * sp;
        for (std::size_t i = 0; i < sp; ++i) ov[i] = xv[i] * gv;
    }
    int nx = x.node(), ng = gate.node();
    bool txr = x.tracked(), tg = gate.tracked();
    auto xb = x.buffer();
    auto gb = gate.buffer();
    int C = xs.c;
    return finish(std::move(out), tp,
                  [=](Tape& t, const std::vector<double>& go) {
                      if (txr) {
                          auto& g = t.grad_buf(nx);
                          for (int c = 0; c < C; ++c)
                              for (std::size_t i = 0; i < sp; ++i)
                                  g[c * sp + i] += go[c * sp + i] * (*gb)[c];
                      }
                      if (tg) {
                          auto& g = t.grad_buf(ng);
                          for (int c = 0; c < C; ++c) {
                              double acc = 0.0;
                              for (std::size_t i = 0; i < sp; ++i)
                                  acc += go[c * sp + i] * (*xb)[c * sp + i];
                              g[c] += acc;
                          }
                      }
                  });
}

Tensor max_elementwise(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "max_elementwise");
    Tape* tp = joint_tape({&a, &b});
    Tensor out = Tensor::zeros(a.shape());
    // Ties route the gradient to the first operand.
    std::vector<std::uint8_t> pick_b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (b.data()[i] > a.data()[i]) {
            out.data()[i] = b.data()[i];
            pick_b[i] = 1;
        } else {
            out.data()[i] = a.data()[i];
        }
    }
    int na = a.node(), nb = b.node();
    bool ta = a.tracked(), tb = b.tracked();
    return finish(std::move(out), tp,
                  [na, nb, ta, tb, pick_b = std::move(pick_b)](
                      Tape& t, const std::vector<double>& go) {
                      for (std::size_t i = 0; i < go.size(); ++i) {
                          if (pick_b[i]) {
                              if (tb) t.grad_buf(nb)[i] += go[i];
                          } else if (ta) {
                              t.grad_buf(na)[i] += go[i];
                          }
                      }
                  });
}

Tensor linear(const Tensor& weight, const Tensor& x, const Tensor* bias) {
    const Shape4& ws = weight.shape();
    if (ws.w != 1 || ws.d != 1 || x.shape().h != 1 || x.shape().w != 1 || x.shape().d != 1) {
        throw std::invalid_argument("linear: weight must be (out,in,1,1), x (in,1,1,1)");
    }
    int m_out = ws.c, m_in = ws.h;
    if (x.shape().c != m_in) {
        throw std::invalid_argument("linear: weight " + ws.str() + " does not conform with x " +
                                    x.shape().str());
    }
    if (bias && !(bias->shape() == Shape4{m_out, 1, 1, 1})) {
        throw std::invalid_argument("linear: bias shape " + bias->shape().str());
    }
    Tape* tp = joint_tape({&weight, &x, bias});
    Tensor out = Tensor::zeros({m_out, 1, 1, 1});
    for (int i = 0; i < m_out; ++i) {
        double acc = bias ? bias->data()[i] : 0.0;
        for (int j = 0; j < m_in; ++j) acc += weight.data()[i * m_in + j] * x.data()[j];
        out.data()[i] = acc;
    }
    int nw = weight.node(), nx = x.node(), nb = bias ? bias->node() : -1;
    bool tw = weight.tracked(), txr = x.tracked(), tb = bias && bias->tracked();
    auto wb = weight.buffer();
    auto xb = x.buffer();
    return finish(std::move(out), tp,
                  [=](Tape& t, const std::vector<double>& go) {
                      if (tw) {
                          auto& g = t.grad_buf(nw);
                          for (int i = 0; i < m_out; ++i)
                              for (int j = 0; j < m_in; ++j)
                                  g[i * m_in + j] += go[i] * (*xb)[j];
                      }
                      if (txr) {
                          auto& g = t.grad_buf(nx);
                          for (int i = 0; i < m_out; ++i)
                              for (int j = 0; j < m_in; ++j)
                                  g[j] += go[i] * (*wb)[i * m_in + j];
                      }
                      if (tb) accumulate(t, nb, go);
                  });
}

Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor* bias,
              int c_out, int k) {
    const Shape4& xs = input.shape();
    int c_in = xs.c;
    if (k % 2 == 0) {
        throw std::invalid_argument("conv3d: even kernel size " + std::to_string(k) +
                                    " unsupported");
    }
    if (k != 1 && k != 3) {
        throw std::invalid_argument("conv3d: kernel size must be 1 or 3");
    }
    if (!(kernel.shape() == Shape4{c_out * c_in, k, k, k})) {
        throw std::invalid_argument("conv3d: kernel shape " + kernel.shape().str() +
                                    " does not match (Cout*Cin,k,k,k) for Cout=" +
                                    std::to_string(c_out) + " Cin=" + std::to_string(c_in));
    }
    if (bias && !(bias->shape() == Shape4{c_out, 1, 1, 1})) {
        throw std::invalid_argument("conv3d: bias shape " + bias->shape().str());
    }
    Tape* tp = joint_tape({&input, &kernel, bias});
    const int H = xs.h, W = xs.w, D = xs.d, P = (k - 1) / 2;
    Tensor out = Tensor::zeros({c_out, H, W, D});

    const double* X = input.data();
    const double* K = kernel.data();
    double* Y = out.data();
    const std::size_t sp = xs.spatial();
    for (int co = 0; co < c_out; ++co) {
        double bv = bias ? bias->data()[co] : 0.0;
        double* yc = Y + co * sp;
        for (std::size_t i = 0; i < sp; ++i) yc[i] = bv;
        for (int ci = 0; ci < c_in; ++ci) {
            const double* xc = X + ci * sp;
            const double* kc = K + (static_cast<std::size_t>(co) * c_in + ci) * k * k * k;
            for (int a = 0; a < k; ++a) {
                for (int b = 0; b < k; ++b) {
                    for (int c = 0; c < k; ++c) {
                        double kv = kc[(a * k + b) * k + c];
                        if (kv == 0.0) continue;
                        int di = a - P, dj = b - P, dk = c - P;
                        int i0 = std::max(0, -di), i1 = std::min(H, H - di);
                        int j0 = std::max(0, -dj), j1 = std::min(W, W - dj);
                        int k0 = std::max(0, -dk), k1 = std::min(D, D - dk);
                        for (int i = i0; i < i1; ++i) {
                            for (int j = j0; j < j1; ++j) {
                                const double* xrow =
                                    xc + (static_cast<std::size_t>(i + di) * W + (j + dj)) * D + dk;
                                double* yrow = yc + (static_cast<std::size_t>(i) * W + j) * D;
                                for (int kk = k0; kk < k1; ++kk) yrow[kk] += kv * xrow[kk];
                            }
                        }
                    }
                }
            }
        }
    }

    int nx = input.node(), nk = kernel.node(), nb = bias ? bias->node() : -1;
    bool txr = input.tracked(), tk = kernel.tracked(), tb = bias && bias->tracked();
    auto xb = input.buffer();
    auto kb = kernel.buffer();
    return finish(std::move(out), tp, [=](Tape& t, const std::vector<double>& go) {
        if (tb) {
            auto& g = t.grad_buf(nb);
            for (int co = 0; co < c_out; ++co) {
                double acc = 0.0;
                const double* gc = go.data() + co * sp;
                for (std::size_t i = 0; i < sp; ++i) acc += gc[i];
                g[co] += acc;
            }
        }
        if (tk) {
            auto& g = t.grad_buf(nk);
            for (int co = 0; co < c_out; ++co) {
                const double* gc = go.data() + co * sp;
                for (int ci = 0; ci < c_in; ++ci) {
                    const double* xc = xb->data() + ci * sp;
                    double* kg = g.data() + (static_cast<std::size_t>(co) * c_in + ci) * k * k * k;
                    for (int a = 0; a < k; ++a)
                        for (int b = 0; b < k; ++b)
                            for (int c = 0; c < k; ++c) {
                                int di = a - P, dj = b - P, dk = c - P;
                                int i0 = std::max(0, -di), i1 = std::min(H, H - di);
                                int j0 = std::max(0, -dj), j1 = std::min(W, W - dj);
                                int k0 = std::max(0, -dk), k1 = std::min(D, D - dk);
                                double acc = 0.0;
                                for (int i = i0; i < i1; ++i)
                                    for (int j = j0; j < j1; ++j) {
                                        const double* xrow =
                                            xc + (static_cast<std::size_t>(i + di) * W + (j + dj)) * D + dk;
                                        const double* grow =
                                            gc + (static_cast<std::size_t>(i) * W + j) * D;
                                        for (int kk = k0; kk < k1; ++kk) acc += grow[kk] * xrow[kk];
                                    }
                                kg[(a * k + b) * k + c] += acc;
                            }
                }
            }
        }
        if (txr) {
            auto& g = t.grad_buf(nx);
            for (int co = 0; co < c_out; ++co) {
                const double* gc = go.data() + co * sp;
                for (int ci = 0; ci < c_in; ++ci) {
                    double* xg = g.data() + ci * sp;
                    const double* kc =
                        kb->data() + (static_cast<std::size_t>(co) * c_in + ci) * k * k * k;
                    for (int a = 0; a < k; ++a)
                        for (int b = 0; b < k; ++b)
                            for (int c = 0; c < k; ++c) {
                                double kv = kc[(a * k + b) * k + c];
                                if (kv == 0.0) continue;
                                int di = a - P, dj = b - P, dk = c - P;
                                int i0 = std::max(0, -di), i1 = std::min(H, H - di);
                                int j0 = std::max(0, -dj), j1 = std::min(W, W - dj);
                                int k0 = std::max(0, -dk), k1 = std::min(D, D - dk);
                                for (int i = i0; i < i1; ++i)
                                    for (int j = j0; j < j1; ++j) {
                                        double* xrow =
                                            xg + (static_cast<std::size_t>(i + di) * W + (j + dj)) * D + dk;
                                        const double* grow =
                                            gc + (static_cast<std::size_t>(i) * W + j) * D;
                                        for (int kk = k0; kk < k1; ++kk) xrow[kk] += kv * grow[kk];
                                    }
                            }
                }
            }
        }
    });
}

Tensor global_pool(const Tensor& x, PoolMode mode) {
    Tape* tp = joint_tape({&x});
    const Shape4& xs = x.shape();
    std::size_t sp = xs.spatial();
    Tensor out = Tensor::zeros({xs.c, 1, 1, 1});
    std::vector<std::size_t> argmax(mode == PoolMode::Max ? xs.c : 0);
    for (int c = 0; c < xs.c; ++c) {
        const double* xc = x.data() + c * sp;
        if (mode == PoolMode::Avg) {
            double acc = 0.0;
            for (std::size_t i = 0; i < sp; ++i) acc += xc[i];
            out.data()[c] = acc / static_cast<double>(sp);
        } else {
            std::size_t best = 0;
            for (std::size_t i = 1; i < sp; ++i)
                if (xc[i] > xc[best]) best = i;
            out.data()[c] = xc[best];
            argmax[c] = best;
        }
    }
    int nx = x.node();
    int C = xs.c;
    return finish(std::move(out), tp,
                  [nx, C, sp, mode, argmax = std::move(argmax)](
                      Tape& t, const std::vector<double>& go) {
                      auto& g = t.grad_buf(nx);
                      if (mode == PoolMode::Avg) {
                          double inv = 1.0 / static_cast<double>(sp);
                          for (int c = 0; c < C; ++c)
                              for (std::size_t i = 0; i < sp; ++i)
                                  g[c * sp + i] += go[c] * inv;
                      } else {
                          for (int c = 0; c < C; ++c) g[c * sp + argmax[c]] += go[c];
                      }
                  });
}

Tensor axis_pool(const Tensor& x, Axis axis, PoolMode mode) {
    Tape* tp = joint_tape({&x});
    const Shape4& xs = x.shape();
    const int H = xs.h, W = xs.w, D = xs.d, C = xs.c;
    const int L = axis == Axis::H ? H : (axis == Axis::W ? W : D);
    const std::size_t sp = xs.spatial();
    Tensor out = Tensor::zeros({C, L, 1, 1});
    // For max: offset of the winning voxel inside the channel slab.
    std::vector<std::size_t> argmax(mode == PoolMode::Max ? static_cast<std::size_t>(C) * L : 0);
    const double slab = axis == Axis::H ? W * D : (axis == Axis::W ? H * D : H * W);
    for (int c = 0; c < C; ++c) {
        const double* xc = x.data() + c * sp;
        for (int l = 0; l < L; ++l) {
            double acc = 0.0;
            double best = -1.0;
            std::size_t besti = 0;
            bool first = true;
            for (int i = 0; i < H; ++i) {
                if (axis == Axis::H && i != l) continue;
                for (int j = 0; j < W; ++j) {
                    if (axis == Axis::W && j != l) continue;
                    for (int k = 0; k < D; ++k) {
                        if (axis == Axis::D && k != l) continue;
                        std::size_t off = (static_cast<std::size_t>(i) * W + j) * D + k;
                        double v = xc[off];
                        if (mode == PoolMode::Avg) {
                            acc += v;
                        } else if (first || v > best) {
                            best = v;
                            besti = off;
                            first = false;
                        }
                    }
                }
            }
            if (mode == PoolMode::Avg) {
                out.data()[c * L + l] = acc / slab;
            } else {
                out.data()[c * L + l] = best;
                argmax[c * L + l] = besti;
            }
        }
    }
    int nx = x.node();
    return finish(std::move(out), tp,
                  [=, argmax = std::move(argmax)](Tape& t, const std::vector<double>& go) {
                      auto& g = t.grad_buf(nx);
                      if (mode == PoolMode::Max) {
                          for (int c = 0; c < C; ++c)
                              for (int l = 0; l < L; ++l)
                                  g[c * sp + argmax[c * L + l]] += go[c * L + l];
                          return;
                      }
                      double inv = 1.0 / slab;
                      for (int c = 0; c < C; ++c)
                          for (int i = 0; i < H; ++i)
                              for (int j = 0; j < W; ++j)
                                  for (int k = 0; k < D; ++k) {
                                      int l = axis == Axis::H ? i : (axis == Axis::W ? j : k);
                                      g[c * sp + (static_cast<std::size_t>(i) * W + j) * D + k] +=
                                          go[c * L + l] * inv;
                                  }
                  });
}

Tensor channel_pool(const Tensor& x, PoolMode mode) {
    Tape* tp = joint_tape({&x});
    const Shape4& xs = x.shape();
    const std::size_t sp = xs.spatial();
    const int C = xs.c;
    Tensor out = Tensor::zeros({1, xs.h, xs.w, xs.d});
    std::vector<int> argmax(mode == PoolMode::Max ? sp : 0, 0);
    for (std::size_t i = 0; i < sp; ++i) {
        if (mode == PoolMode::Avg) {
            double acc = 0.0;
            for (int c = 0; c < C; ++c) acc += x.data()[c * sp + i];
            out.data()[i] = acc / C;
        } else {
            int best = 0;
            for (int c = 1; c < C; ++c)
                if (x.data()[c * sp + i] > x.data()[best * sp + i]) best = c;
            out.data()[i] = x.data()[best * sp + i];
            argmax[i] = best;
        }
    }
    int nx = x.node();
    return finish(std::move(out), tp,
                  [nx, C, sp, mode, argmax = std::move(argmax)](
                      Tape& t, const std::vector<double>& go) {
                      auto& g = t.grad_buf(nx);
                      if (mode == PoolMode::Avg) {
                          double inv = 1.0 / C;
                          for (std::size_t i = 0; i < sp; ++i)
                              for (int c = 0; c < C; ++c) g[c * sp + i] += go[i] * inv;
                      } else {
                          for (std::size_t i = 0; i < sp; ++i)
                              g[argmax[i] * sp + i] += go[i];
                      }
                  });
}

Tensor broadcast_combine(const Tensor& zh, const Tensor& zw, const Tensor& zd,
                         Aggregation agg) {
    int C = zh.shape().c;
    if (zw.shape().c != C || zd.shape().c != C) {
        throw std::invalid_argument("broadcast_combine: channel counts disagree");
    }
    for (const Tensor* z : {&zh, &zw, &zd}) {
        if (z->shape().w != 1 || z->shape().d != 1) {
            throw std::invalid_argument("broadcast_combine: projections must be (C,L,1,1)");
        }
    }
    const int H = zh.shape().h, W = zw.shape().h, D = zd.shape().h;
    Tape* tp = joint_tape({&zh, &zw, &zd});
    Tensor out = Tensor::zeros({C, H, W, D});
    const std::size_t sp = out.shape().spatial();
    // For max: 0 = zh wins, 1 = zw, 2 = zd; ties to the earliest.
    std::vector<std::uint8_t> which(agg == Aggregation::Max ? C * sp : 0);
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
                for (int k = 0; k < D; ++k) {
                    double a = zh.data()[c * H + i];
                    double b = zw.data()[c * W + j];
                    double e = zd.data()[c * D + k];
                    std::size_t off = c * sp + (static_cast<std::size_t>(i) * W + j) * D + k;
                    switch (agg) {
                        case Aggregation::Add:
                            out.data()[off] = a + b + e;
                            break;
                        case Aggregation::Mult:
                            out.data()[off] = a * b * e;
                            break;
                        case Aggregation::Max: {
                            double m = a;
                            std::uint8_t wh = 0;
                            if (b > m) { m = b; wh = 1; }
                            if (e > m) { m = e; wh = 2; }
                            out.data()[off] = m;
                            which[off] = wh;
                            break;
                        }
                    }
                }
    }
    int nh = zh.node(), nw = zw.node(), nd = zd.node();
    bool th = zh.tracked(), twr = zw.tracked(), td = zd.tracked();
    auto hb = zh.buffer(), wbuf = zw.buffer(), db = zd.buffer();
    return finish(std::move(out), tp,
                  [=, which = std::move(which)](Tape& t, const std::vector<double>& go) {
                      for (int c = 0; c < C; ++c)
                          for (int i = 0; i < H; ++i)
                              for (int j = 0; j < W; ++j)
                                  for (int k = 0; k < D; ++k) {
                                      std::size_t off =
                                          c * sp + (static_cast<std::size_t>(i) * W + j) * D + k;
                                      double g = go[off];
                                      if (g == 0.0) continue;
                                      double a = (*hb)[c * H + i];
                                      double b = (*wbuf)[c * W + j];
                                      double e = (*db)[c * D + k];
                                      switch (agg) {
                                          case Aggregation::Add:
                                              if (th) t.grad_buf(nh)[c * H + i] += g;
                                              if (twr) t.grad_buf(nw)[c * W + j] += g;
                                              if (td) t.grad_buf(nd)[c * D + k] += g;
                                              break;
                                          case Aggregation::Mult:
                                              if (th) t.grad_buf(nh)[c * H + i] += g * b * e;
                                              if (twr) t.grad_buf(nw)[c * W + j] += g * a * e;
                                              if (td) t.grad_buf(nd)[c * D + k] += g * a * b;
                                              break;
                                          case Aggregation::Max:
                                              switch (which[off]) {
                                                  case 0:
                                                      if (th) t.grad_buf(nh)[c * H + i] += g;
                                                      break;
                                                  case 1:
                                                      if (twr) t.grad_buf(nw)[c * W + j] += g;
                                                      break;
                                                  default:
                                                      if (td) t.grad_buf(nd)[c * D + k] += g;
                                              }
                                              break;
                                      }
                                  }
                  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const Shape4& as = a.shape();
    const Shape4& bs = b.shape();
    if (as.h != bs.h || as.w != bs.w || as.d != bs.d) {
        throw std::invalid_argument("concat_channels: spatial mismatch " + as.str() +
                                    " vs " + bs.str());
    }
    Tape* tp = joint_tape({&a, &b});
    Tensor out = Tensor::zeros({as.c + bs.c, as.h, as.w, as.d});
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    int na = a.node(), nb = b.node();
    bool ta = a.tracked(), tb = b.tracked();
    std::size_t asz = a.size(), bsz = b.size();
    return finish(std::move(out), tp,
                  [na, nb, ta, tb, asz, bsz](Tape& t, const std::vector<double>& go) {
                      if (ta) {
                          auto& g = t.grad_buf(na);
                          for (std::size_t i = 0; i < asz; ++i) g[i] += go[i];
                      }
                      if (tb) {
                          auto& g = t.grad_buf(nb);
                          for (std::size_t i = 0; i < bsz; ++i) g[i] += go[asz + i];
                      }
                  });
}

Tensor maxpool_down2(const Tensor& x) {
    const Shape4& xs = x.shape();
    if (xs.h % 2 || xs.w % 2 || xs.d % 2) {
        throw std::invalid_argument("maxpool_down2: extents must be even, got " + xs.str());
    }
    Tape* tp = joint_tape({&x});
    Shape4 os{xs.c, xs.h / 2, xs.w / 2, xs.d / 2};
    Tensor out = Tensor::zeros(os);
    std::vector<std::size_t> argmax(out.size());
    for (int c = 0; c < xs.c; ++c)
        for (int i = 0; i < os.h; ++i)
            for (int j = 0; j < os.w; ++j)
                for (int k = 0; k < os.d; ++k) {
                    double best = 0.0;
                    std::size_t bi = 0;
                    bool first = true;
                    // Ties go to the first element in scan order.
                    for (int di = 0; di < 2; ++di)
                        for (int dj = 0; dj < 2; ++dj)
                            for (int dk = 0; dk < 2; ++dk) {
                                std::size_t off = x.offset(c, 2 * i + di, 2 * j + dj, 2 * k + dk);
                                double v = x.data()[off];
                                if (first || v > best) {
                                    best = v;
                                    bi = off;
                                    first = false;
                                }
                            }
                    std::size_t oo = out.offset(c, i, j, k);
                    out.data()[oo] = best;
                    argmax[oo] = bi;
                }
    int nx = x.node();
    return finish(std::move(out), tp,
                  [nx, argmax = std::move(argmax)](Tape& t, const std::vector<double>& go) {
                      auto& g = t.grad_buf(nx);
                      for (std::size_t i = 0; i < go.size(); ++i) g[argmax[i]] += go[i];
                  });
}

Tensor upsample_nearest2(const Tensor& x) {
    const Shape4& xs = x.shape();
    Tape* tp = joint_tape({&x});
    Shape4 os{xs.c, 2 * xs.h, 2 * xs.w, 2 * xs.d};
    Tensor out = Tensor::zeros(os);
    for (int c = 0; c < os.c; ++c)
        for (int i = 0; i < os.h; ++i)
            for (int j = 0; j < os.w; ++j)
                for (int k = 0; k < os.d; ++k)
                    out.at(c, i, j, k) = x.at(c, i / 2, j / 2, k / 2);
    int nx = x.node();
    return finish(std::move(out), tp, [nx, xs, os](Tape& t, const std::vector<double>& go) {
        auto& g = t.grad_buf(nx);
        for (int c = 0; c < os.c; ++c)
            for (int i = 0; i < os.h; ++i)
                for (int j = 0; j < os.w; ++j)
                    for (int k = 0; k < os.d; ++k) {
                        std::size_t src =
                            ((static_cast<std::size_t>(c) * xs.h + i / 2) * xs.w + j / 2) * xs.d +
                            k / 2;
                        std::size_t dst =
                            ((static_cast<std::size_t>(c) * os.h + i) * os.w + j) * os.d + k;
                        g[src] += go[dst];
                    }
    });
}

Tensor instance_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const Shape4& xs = x.shape();
    if (!(gain.shape() == Shape4{xs.c, 1, 1, 1}) || !(bias.shape() == Shape4{xs.c, 1, 1, 1})) {
        throw std::invalid_argument("instance_norm: gain/bias must be (C,1,1,1)");
    }
    if (eps <= 0.0) throw std::invalid_argument("instance_norm: eps must be > 0");
    Tape* tp = joint_tape({&x, &gain, &bias});
    const std::size_t sp = xs.spatial();
    Tensor out = Tensor::zeros(xs);
    std::vector<double> inv_std(xs.c);
    std::vector<double> xhat(x.size());
    for (int c = 0; c < xs.c; ++c) {
        const double* xc = x.data() + c * sp;
        double mean = 0.0;
        for (std::size_t i = 0; i < sp; ++i) mean += xc[i];
        mean /= static_cast<double>(sp);
        double var = 0.0;
        for (std::size_t i = 0; i < sp; ++i) {
            double d = xc[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(sp);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[c] = is;
        double gv = gain.data()[c], bv = bias.data()[c];
        for (std::size_t i = 0; i < sp; ++i) {
            double xh = (xc[i] - mean) * is;
            xhat[c * sp + i] = xh;
            out.data()[c * sp + i] = gv * xh + bv;
        }
    }
    int nx = x.node(), ng = gain.node(), nb = bias.node();
    bool txr = x.tracked(), tg = gain.tracked(), tb = bias.tracked();
    auto gbuf = gain.buffer();
    int C = xs.c;
    return finish(std::move(out), tp,
                  [=, inv_std = std::move(inv_std), xhat = std::move(xhat)](
                      Tape& t, const std::vector<double>& go) {
                      for (int c = 0; c < C; ++c) {
                          const double* gc = go.data() + c * sp;
                          const double* xh = xhat.data() + c * sp;
                          double sum_g = 0.0, sum_gx = 0.0;
                          for (std::size_t i = 0; i < sp; ++i) {
                              sum_g += gc[i];
                              sum_gx += gc[i] * xh[i];
                          }
                          if (tg) t.grad_buf(ng)[c] += sum_gx;
                          if (tb) t.grad_buf(nb)[c] += sum_g;
                          if (txr) {
                              auto& g = t.grad_buf(nx);
                              double gv = (*gbuf)[c];
                              double n = static_cast<double>(sp);
                              double mg = sum_g / n, mgx = sum_gx / n;
                              for (std::size_t i = 0; i < sp; ++i) {
                                  g[c * sp + i] +=
                                      gv * inv_std[c] * (gc[i] - mg - xh[i] * mgx);
                              }
                          }
                      }
                  });
}

Tensor log_softmax_channels(const Tensor& x) {
    Tape* tp = joint_tape({&x});
    const Shape4& xs = x.shape();
    const std::size_t sp = xs.spatial();
    const int C = xs.c;
    Tensor out = Tensor::zeros(xs);
    for (std::size_t i = 0; i < sp; ++i) {
        double mx = x.data()[i];
        for (int c = 1; c < C; ++c) mx = std::max(mx, x.data()[c * sp + i]);
        double lse = 0.0;
        for (int c = 0; c < C; ++c) lse += std::exp(x.data()[c * sp + i] - mx);
        lse = mx + std::log(lse);
        for (int c = 0; c < C; ++c) out.data()[c * sp + i] = x.data()[c * sp + i] - lse;
    }
    int nx = x.node();
    auto yb = out.buffer();
    return finish(std::move(out), tp, [nx, C, sp, yb](Tape& t, const std::vector<double>& go) {
        auto& g = t.grad_buf(nx);
        for (std::size_t i = 0; i < sp; ++i) {
            double sum_g = 0.0;
            for (int c = 0; c < C; ++c) sum_g += go[c * sp + i];
            for (int c = 0; c < C; ++c) {
                double p = std::exp((*yb)[c * sp + i]);
                g[c * sp + i] += go[c * sp + i] - p * sum_g;
            }
        }
    });
}

Tensor sum(const Tensor& x) {
    Tape* tp = joint_tape({&x});
    Tensor out = Tensor::zeros({1, 1, 1, 1});
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    out.data()[0] = acc;
    int nx = x.node();
    std::size_t n = x.size();
    return finish(std::move(out), tp, [nx, n](Tape& t, const std::vector<double>& go) {
        auto& g = t.grad_buf(nx);
        for (std::size_t i = 0; i < n; ++i) g[i] += go[0];
    });
}

double grad_check(const std::function<Tensor(Tape&, std::vector<Tensor>&)>& build,
                  std::vector<Tensor> params, double eps, int max_entries_per_tensor) {
    if (eps < 1e-7 || eps > 1e-3) {
        throw std::invalid_argument("grad_check: eps outside [1e-7, 1e-3]");
    }
    Tape tape;
    for (auto& p : params) tape.watch(p);
    Tensor loss = build(tape, params);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        const auto& g = tape.grad(p);
        analytic.push_back(g.empty() ? std::vector<double>(p.size(), 0.0) : g);
    }

    auto eval = [&](std::vector<Tensor>& ps) {
        Tape t2;
        for (auto& p : ps) t2.watch(p);
        return build(t2, ps).data()[0];
    };

    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        std::size_t n = params[pi].size();
        std::size_t stride = 1;
        if (max_entries_per_tensor > 0 &&
            n > static_cast<std::size_t>(max_entries_per_tensor)) {
            stride = n / static_cast<std::size_t>(max_entries_per_tensor);
        }
        for (std::size_t i = 0; i < n; i += stride) {
            double orig = params[pi].data()[i];
            params[pi].data()[i] = orig + eps;
            double fp = eval(params);
            params[pi].data()[i] = orig - eps;
            double fm = eval(params);
            params[pi].data()[i] = orig;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[pi][i];
            double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
        }
    }
    return max_rel;
}

void detail::TensorAccess::set(Tensor& t, Tape* tp, int node) {
    t.tape_ = tp;
    t.node_ = node;
}

}  // namespace recal3d
