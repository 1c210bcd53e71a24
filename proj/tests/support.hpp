#ifndef TAL_TESTS_SUPPORT_HPP
#define TAL_TESTS_SUPPORT_HPP

// Shared generators and reference oracles for the test suites.

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "tal/matrix.hpp"
#include "tal/metric.hpp"
#include "tal/nn.hpp"
#include "tal/rng.hpp"

namespace tal::testing {

inline DenseVector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    DenseVector v(n);
    for (double& x : v) x = dist(rng);
    return v;
}

inline DenseMatrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    return DenseMatrix(rows, cols, random_vector(rng, rows * cols, scale));
}

/// Random architecture: input width, 0-2 hidden layers, output width; all widths in [1, 6].
inline std::vector<std::size_t> random_architecture(Rng& rng, std::size_t max_width = 6) {
    std::vector<std::size_t> sizes;
    const std::size_t layers = 1 + uniform_index(rng, 3);
    for (std::size_t i = 0; i <= layers; ++i) sizes.push_back(1 + uniform_index(rng, max_width));
    return sizes;
}

/// Glorot weights plus nonzero random biases, so relu units are not all active at once.
inline MLPParams random_params(Rng& rng, const std::vector<std::size_t>& sizes) {
    auto p = init_params(sizes, rng());
    for (auto& l : p.layers) l.biases = random_vector(rng, l.out(), 0.3);
    return p;
}

/// Straight-line forward evaluator written independently of tal::forward.
inline std::vector<DenseVector> reference_preactivations(const MLPParams& p, const DenseVector& x,
                                                          DenseVector* output = nullptr) {
    std::vector<DenseVector> pre;
    DenseVector h = x;
    for (const auto& layer : p.layers) {
        DenseVector z(layer.out());
        for (std::size_t r = 0; r < layer.out(); ++r) {
            double s = layer.biases[r];
            for (std::size_t c = 0; c < layer.in(); ++c) s += layer.weights(r, c) * h[c];
            z[r] = s;
        }
        pre.push_back(z);
        h = z;
        if (layer.activation == Activation::relu) {
            for (double& v : h) v = v > 0.0 ? v : 0.0;
        }
    }
    if (output) *output = h;
    return pre;
}

inline DenseVector reference_forward(const MLPParams& p, const DenseVector& x) {
    DenseVector out;
    reference_preactivations(p, x, &out);
    return out;
}

/// Smallest |pre-activation| of any relu unit over a set of inputs.
inline double min_relu_margin(const MLPParams& p, const std::vector<DenseVector>& inputs) {
    double m = INFINITY;
    for (const auto& x : inputs) {
        const auto pre = reference_preactivations(p, x);
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            if (p.layers[l].activation != Activation::relu) continue;
            for (double v : pre[l]) m = std::min(m, std::abs(v));
        }
    }
    return m;
}

/// Central differences of f over every parameter, in flatten() order.
inline DenseVector finite_difference(MLPParams p, const std::function<double(const MLPParams&)>& f, double h) {
    DenseVector out;
    auto probe = [&](double& slot) {
        const double saved = slot;
        slot = saved + h;
        const double up = f(p);
        slot = saved - h;
        const double down = f(p);
        slot = saved;
        out.push_back((up - down) / (2.0 * h));
    };
    for (auto& l : p.layers) {
        for (double& w : l.weights.values()) probe(w);
        for (double& b : l.biases) probe(b);
    }
    return out;
}

/**
 * Gradient magnitude below which a central difference of a function of size |f| cannot be
 * compared at relative tolerance `rel_tol`. Evaluating f (a sum of a few terms) is off by a
 * few ulps of |f|, so the difference quotient carries noise of up to about 16 eps |f| / h.
 */
inline double fd_comparison_floor(double f, double h, double rel_tol) {
    return 16.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f)) / h / rel_tol;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(const DenseVector& a, const DenseVector& b, double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

/// Model whose embedding is the raw feature vector (single identity layer, W = I, b = 0).
inline EmbeddingModel identity_model(std::size_t d) {
    LayerParams layer{DenseMatrix(d, d), DenseVector(d, 0.0), Activation::identity};
    for (std::size_t i = 0; i < d; ++i) layer.weights(i, i) = 1.0;
    MLPParams p;
    p.layers.push_back(std::move(layer));
    return EmbeddingModel(std::move(p));
}

/// Random triplet of distinct indices below n.
inline Triplet random_triplet(Rng& rng, std::size_t n) {
    const auto idx = sample_without_replacement(n, 3, rng);
    return {idx[0], idx[1], idx[2]};
}

}  // namespace tal::testing

#endif
