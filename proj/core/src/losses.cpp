#include "recal3d/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace recal3d {

namespace {

void check_label_shape(const Tensor& logits, const LabelVolume& labels) {
    const Shape4& s = logits.shape();
    if (s.h != labels.h || s.w != labels.w || s.d != labels.d) {
        throw std::invalid_argument("logits " + s.str() + " do not match label grid (" +
                                    std::to_string(labels.h) + "," + std::to_string(labels.w) +
                                    "," + std::to_string(labels.d) + ")");
    }
    for (std::uint8_t v : labels.values) {
        if (v >= s.c) {
            throw std::invalid_argument("label id " + std::to_string(v) +
                                        " >= n_classes " + std::to_string(s.c));
        }
    }
}

// Scalar node derived from an existing tracked tensor; dloss/dsource given
// by a dense coefficient vector.
Tensor scalar_of(const Tensor& source, double value, std::vector<double> coeff) {
    Tensor out = Tensor::zeros({1, 1, 1, 1});
    out.data()[0] = value;
    if (!source.tracked()) return out;
    Tape* tp = source.tape();
    int ns = source.node();
    int node = tp->record(
        1, [ns, coeff = std::move(coeff)](Tape& t, const std::vector<double>& go) {
            auto& g = t.grad_buf(ns);
            for (std::size_t i = 0; i < coeff.size(); ++i) g[i] += go[0] * coeff[i];
        });
    detail::TensorAccess::set(out, tp, node);
    return out;
}

}  // namespace

std::vector<std::int64_t> class_histogram(const LabelVolume& labels, int n_classes) {
    std::vector<std::int64_t> counts(n_classes, 0);
    for (std::uint8_t v : labels.values) {
        if (v >= n_classes) {
            throw std::invalid_argument("label id " + std::to_string(v) + " >= n_classes");
        }
        ++counts[v];
    }
    return counts;
}

std::vector<double> median_freq_weights(const std::vector<std::int64_t>& class_counts) {
    std::int64_t total = 0;
    for (auto c : class_counts) total += c;
    if (total == 0) throw std::runtime_error("median_freq_weights: empty corpus");
    std::vector<double> freqs;
    for (auto c : class_counts) {
        if (c > 0) freqs.push_back(static_cast<double>(c) / static_cast<double>(total));
    }
    std::sort(freqs.begin(), freqs.end());
    std::size_t n = freqs.size();
    double median = (n % 2 == 1) ? freqs[n / 2] : 0.5 * (freqs[n / 2 - 1] + freqs[n / 2]);
    std::vector<double> weights(class_counts.size(), 0.0);
    for (std::size_t c = 0; c < class_counts.size(); ++c) {
        if (class_counts[c] > 0) {
            weights[c] = median / (static_cast<double>(class_counts[c]) / total);
        }
    }
    return weights;
}

Tensor weighted_ce(const Tensor& logits, const LabelVolume& labels,
                   const std::vector<double>& weights) {
    check_label_shape(logits, labels);
    const int K = logits.shape().c;
    if (static_cast<int>(weights.size()) != K) {
        throw std::invalid_argument("weights size does not match n_classes");
    }
    Tensor ls = log_softmax_channels(logits);
    const std::size_t sp = logits.shape().spatial();
    double acc = 0.0;
    std::vector<double> coeff(ls.size(), 0.0);
    double inv_n = 1.0 / static_cast<double>(sp);
    for (std::size_t v = 0; v < sp; ++v) {
        int y = labels.values[v];
        acc -= weights[y] * ls.data()[y * sp + v] * inv_n;
        coeff[y * sp + v] = -weights[y] * inv_n;
    }
    return scalar_of(ls, acc, std::move(coeff));
}

Tensor soft_dice_loss(const Tensor& logits, const LabelVolume& labels, double smooth) {
    check_label_shape(logits, labels);
    if (smooth <= 0.0) throw std::invalid_argument("soft_dice_loss: smooth must be > 0");
    const int K = logits.shape().c;
    const std::size_t sp = logits.shape().spatial();
    Tensor ls = log_softmax_channels(logits);

    std::vector<double> inter(K, 0.0), psum(K, 0.0), gsum(K, 0.0);
    for (std::size_t v = 0; v < sp; ++v) {
        int y = labels.values[v];
        gsum[y] += 1.0;
        for (int c = 0; c < K; ++c) {
            double p = std::exp(ls.data()[c * sp + v]);
            psum[c] += p;
            if (c == y) inter[c] += p;
        }
    }
    double mean_score = 0.0;
    std::vector<double> dnum(K), dden(K);  // per-class d(score)/d(inter), d/d(psum)
    for (int c = 0; c < K; ++c) {
        double num = 2.0 * inter[c] + smooth;
        double den = psum[c] + gsum[c] + smooth;
        mean_score += num / den;
        dnum[c] = 2.0 / den;
        dden[c] = -num / (den * den);
    }
    mean_score /= K;
    double loss = 1.0 - mean_score;

    // dloss/dp(c,v) = -(1/K) (dnum[c]*g_c(v) + dden[c]); chain to log-space
    // via dp = p * dls.
    std::vector<double> coeff(ls.size());
    for (std::size_t v = 0; v < sp; ++v) {
        int y = labels.values[v];
        for (int c = 0; c < K; ++c) {
            double p = std::exp(ls.data()[c * sp + v]);
            double dscore = dnum[c] * (c == y ? 1.0 : 0.0) + dden[c];
            coeff[c * sp + v] = -(1.0 / K) * dscore * p;
        }
    }
    return scalar_of(ls, loss, std::move(coeff));
}

Tensor combined_loss(const Tensor& logits, const LabelVolume& labels,
                     const std::vector<double>& weights, double smooth) {
    return add(weighted_ce(logits, labels, weights), soft_dice_loss(logits, labels, smooth));
}

LabelVolume argmax_labels(const Tensor& logits) {
    const Shape4& s = logits.shape();
    LabelVolume out = LabelVolume::filled(s.h, s.w, s.d, 0);
    const std::size_t sp = s.spatial();
    for (std::size_t v = 0; v < sp; ++v) {
        int best = 0;
        for (int c = 1; c < s.c; ++c) {
            if (logits.data()[c * sp + v] > logits.data()[best * sp + v]) best = c;
        }
        out.values[v] = static_cast<std::uint8_t>(best);
    }
    return out;
}

}  // namespace recal3d
