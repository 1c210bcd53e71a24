#ifndef TAL_NN_HPP
#define TAL_NN_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"
#include "rng.hpp"

/**
 * @file nn.hpp
 *
 * @brief A tiny fully-connected network: forward with caching, exact backward, Adam.
 *
 * Everything is double precision. The same `MLPParams` type holds parameters and
 * gradients; the activation field of a gradient block is ignored.
 */

namespace tal {

enum class Activation { relu, identity };

struct LayerParams {
    DenseMatrix weights;  ///< out x in
    DenseVector biases;   ///< out
    Activation activation = Activation::relu;

    std::size_t in() const noexcept { return weights.cols(); }
    std::size_t out() const noexcept { return weights.rows(); }

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct MLPParams {
    std::vector<LayerParams> layers;

    std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in(); }
    std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weights.size() + l.biases.size();
        return n;
    }

    /// Throws ShapeError if the layer stack is not a valid chain ending in identity.
    void validate() const {
        if (layers.empty()) throw ShapeError("network has no layers");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.biases.size() != l.out()) {
                throw ShapeError("layer " + std::to_string(i) + ": bias length " + std::to_string(l.biases.size()) +
                                 " != weight rows " + std::to_string(l.out()));
            }
            if (i > 0 && l.in() != layers[i - 1].out()) {
                throw ShapeError("layer " + std::to_string(i) + ": input dim " + std::to_string(l.in()) +
                                 " != previous output dim " + std::to_string(layers[i - 1].out()));
            }
        }
        if (layers.back().activation != Activation::identity) {
            throw ShapeError("final layer must use identity activation");
        }
    }

    friend bool operator==(const MLPParams&, const MLPParams&) = default;
};

/// Same shapes as `like`, every entry zero.
inline MLPParams zeros_like(const MLPParams& like) {
    MLPParams z;
    z.layers.reserve(like.layers.size());
    for (const auto& l : like.layers) {
        z.layers.push_back({DenseMatrix(l.out(), l.in()), DenseVector(l.out(), 0.0), l.activation});
    }
    return z;
}

inline void set_zero(MLPParams& p) {
    for (auto& l : p.layers) {
        std::fill(l.weights.values().begin(), l.weights.values().end(), 0.0);
        std::fill(l.biases.begin(), l.biases.end(), 0.0);
    }
}

/// acc += scale * g
inline void axpy(MLPParams& acc, const MLPParams& g, double scale = 1.0) {
    for (std::size_t i = 0; i < acc.layers.size(); ++i) {
        auto& a = acc.layers[i];
        const auto& b = g.layers[i];
        for (std::size_t j = 0; j < a.weights.size(); ++j) a.weights.values()[j] += scale * b.weights.values()[j];
        for (std::size_t j = 0; j < a.biases.size(); ++j) a.biases[j] += scale * b.biases[j];
    }
}

/// Flattens all blocks layer by layer, weights (row-major) then biases.
inline DenseVector flatten(const MLPParams& p) {
    DenseVector out;
    out.reserve(p.parameter_count());
    for (const auto& l : p.layers) {
        out.insert(out.end(), l.weights.values().begin(), l.weights.values().end());
        out.insert(out.end(), l.biases.begin(), l.biases.end());
    }
    return out;
}

/// Intermediates of one forward pass.
struct ForwardCache {
    DenseVector input;
    std::vector<DenseVector> pre;   ///< per layer, before activation
    std::vector<DenseVector> post;  ///< per layer, after activation
};

struct ForwardResult {
    DenseVector embedding;
    ForwardCache cache;
};

struct BackwardResult {
    MLPParams param_grads;
    DenseVector input_grad;
};

namespace detail {

inline void check_input(const MLPParams& params, std::span<const double> input) {
    if (params.layers.empty()) throw ShapeError("network has no layers");
    if (input.size() != params.input_dim()) {
        throw ShapeError("layer 0: input length " + std::to_string(input.size()) + " != expected " +
                         std::to_string(params.input_dim()));
    }
}

}  // namespace detail

/// Forward pass reusing the buffers already held by `cache`.
inline void forward_into(const MLPParams& params, std::span<const double> input, ForwardCache& cache) {
    detail::check_input(params, input);
    const std::size_t nl = params.layers.size();
    cache.input.assign(input.begin(), input.end());
    cache.pre.resize(nl);
    cache.post.resize(nl);
    for (std::size_t li = 0; li < nl; ++li) {
        const auto& layer = params.layers[li];
        const DenseVector& x = li == 0 ? cache.input : cache.post[li - 1];
        if (x.size() != layer.in()) {
            throw ShapeError("layer " + std::to_string(li) + ": input length " + std::to_string(x.size()) +
                             " != expected " + std::to_string(layer.in()));
        }
        auto& z = cache.pre[li];
        auto& a = cache.post[li];
        z.resize(layer.out());
        a.resize(layer.out());
        for (std::size_t r = 0; r < layer.out(); ++r) {
            z[r] = layer.biases[r] + dot(layer.weights.row(r), x);
            a[r] = (layer.activation == Activation::relu && z[r] <= 0.0) ? 0.0 : z[r];
        }
    }
}

inline ForwardResult forward(const MLPParams& params, std::span<const double> input) {
    ForwardResult res;
    forward_into(params, input, res.cache);
    res.embedding = res.cache.post.back();
    return res;
}

/// Scratch buffers for `backward_accumulate`.
struct BackwardScratch {
    DenseVector delta;
    DenseVector next;
};

/**
 * Adds d(loss)/d(params) to `grads` given d(loss)/d(output) for the pass recorded in `cache`.
 * If `input_grad` is non-null it receives d(loss)/d(input).
 * The relu subgradient at exactly zero is zero.
 */
inline void backward_accumulate(const MLPParams& params, const ForwardCache& cache, std::span<const double> output_grad,
                                MLPParams& grads, BackwardScratch& scratch, DenseVector* input_grad = nullptr) {
    const std::size_t nl = params.layers.size();
    if (cache.pre.size() != nl || cache.post.size() != nl) {
        throw ShapeError("forward cache has " + std::to_string(cache.pre.size()) + " layers, network has " +
                         std::to_string(nl));
    }
    if (grads.layers.size() != nl) throw ShapeError("gradient buffer does not match network");
    if (output_grad.size() != params.output_dim()) {
        throw ShapeError("layer " + std::to_string(nl - 1) + ": output gradient length " +
                         std::to_string(output_grad.size()) + " != " + std::to_string(params.output_dim()));
    }
    auto& delta = scratch.delta;
    auto& next = scratch.next;
    delta.assign(output_grad.begin(), output_grad.end());
    for (std::size_t li = nl; li-- > 0;) {
        const auto& layer = params.layers[li];
        const auto& z = cache.pre[li];
        if (z.size() != layer.out()) {
            throw ShapeError("layer " + std::to_string(li) + ": cache width " + std::to_string(z.size()) +
                             " != " + std::to_string(layer.out()));
        }
        if (layer.activation == Activation::relu) {
            for (std::size_t r = 0; r < delta.size(); ++r) {
                if (z[r] <= 0.0) delta[r] = 0.0;
            }
        }
        const DenseVector& x = li == 0 ? cache.input : cache.post[li - 1];
        auto& g = grads.layers[li];
        for (std::size_t r = 0; r < layer.out(); ++r) {
            const double d = delta[r];
            if (d == 0.0) continue;
            g.biases[r] += d;
            auto grow = g.weights.row(r);
            for (std::size_t c = 0; c < layer.in(); ++c) grow[c] += d * x[c];
        }
        if (li == 0 && input_grad == nullptr) break;
        next.assign(layer.in(), 0.0);
        for (std::size_t r = 0; r < layer.out(); ++r) {
            const double d = delta[r];
            if (d == 0.0) continue;
            auto wrow = layer.weights.row(r);
            for (std::size_t c = 0; c < layer.in(); ++c) next[c] += d * wrow[c];
        }
        delta.swap(next);
    }
    if (input_grad != nullptr) *input_grad = delta;
}

inline BackwardResult backward(const MLPParams& params, const ForwardCache& cache, std::span<const double> output_grad) {
    BackwardResult res;
    res.param_grads = zeros_like(params);
    BackwardScratch scratch;
    backward_accumulate(params, cache, output_grad, res.param_grads, scratch, &res.input_grad);
    return res;
}

struct AdamState {
    MLPParams first_moment;
    MLPParams second_moment;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double learning_rate = 1e-4;

    static AdamState for_params(const MLPParams& params, double learning_rate = 1e-4) {
        AdamState s;
        s.first_moment = zeros_like(params);
        s.second_moment = zeros_like(params);
        s.learning_rate = learning_rate;
        return s;
    }

    /// Clears moments and the step counter, keeping hyperparameters.
    void reset() {
        set_zero(first_moment);
        set_zero(second_moment);
        step = 0;
    }
};

/// Bias-corrected Adam update of `params` in place.
inline void adam_step(MLPParams& params, const MLPParams& grads, AdamState& state) {
    if (grads.layers.size() != params.layers.size() || state.first_moment.layers.size() != params.layers.size() ||
        state.second_moment.layers.size() != params.layers.size()) {
        throw ShapeError("adam: gradient/state layer count does not match parameters");
    }
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        const auto& g = grads.layers[li];
        const auto& p = params.layers[li];
        if (g.weights.rows() != p.out() || g.weights.cols() != p.in() || g.biases.size() != p.out() ||
            state.first_moment.layers[li].weights.size() != p.weights.size() ||
            state.second_moment.layers[li].weights.size() != p.weights.size()) {
            throw ShapeError("adam: layer " + std::to_string(li) + " shape mismatch");
        }
        if (!all_finite(g.weights.values())) {
            throw NumericError("adam: non-finite gradient in layer " + std::to_string(li) + " weights");
        }
        if (!all_finite(g.biases)) {
            throw NumericError("adam: non-finite gradient in layer " + std::to_string(li) + " biases");
        }
    }
    ++state.step;
    const double b1 = state.beta1;
    const double b2 = state.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    const double lr = state.learning_rate;
    const double eps = state.epsilon;
    auto update = [&](std::vector<double>& w, const std::vector<double>& g, std::vector<double>& m,
                      std::vector<double>& v) {
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    };
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        auto& p = params.layers[li];
        const auto& g = grads.layers[li];
        auto& m = state.first_moment.layers[li];
        auto& v = state.second_moment.layers[li];
        update(p.weights.values(), g.weights.values(), m.weights.values(), v.weights.values());
        update(p.biases, g.biases, m.biases, v.biases);
    }
}

/**
 * Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
 * `sizes` lists the input width followed by every layer's width, so {10, 10, 20, 10}
 * builds three layers. Hidden layers use relu, the last one identity.
 */
inline MLPParams init_params(std::span<const std::size_t> sizes, std::uint64_t seed) {
    if (sizes.size() < 2) throw ConfigError("architecture needs an input size and at least one layer");
    for (std::size_t s : sizes) {
        if (s == 0) throw ConfigError("layer sizes must be positive");
    }
    Rng rng(seed);
    MLPParams p;
    for (std::size_t i = 1; i < sizes.size(); ++i) {
        const std::size_t in = sizes[i - 1];
        const std::size_t out = sizes[i];
        const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        LayerParams layer{DenseMatrix(out, in), DenseVector(out, 0.0),
                          i + 1 == sizes.size() ? Activation::identity : Activation::relu};
        for (double& w : layer.weights.values()) w = dist(rng);
        p.layers.push_back(std::move(layer));
    }
    return p;
}

inline MLPParams init_params(std::initializer_list<std::size_t> sizes, std::uint64_t seed) {
    return init_params(std::span<const std::size_t>(sizes.begin(), sizes.size()), seed);
}

}  // namespace tal

#endif
