#ifndef TAL_METRIC_HPP
#define TAL_METRIC_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"
#include "nn.hpp"

/**
 * @file metric.hpp
 *
 * @brief The embedding network viewed as a metric over objects.
 *
 * d(a, b) = || phi(x_a) - phi(x_b) ||. A triplet (i, j, k) asks whether the anchor i
 * is closer to j or to k. Probabilities, entropies, the exponential triplet loss and
 * the per-triplet gradient vectors used by acquisition all live here.
 */

namespace tal {

struct Triplet {
    std::size_t anchor = 0;
    std::size_t first = 0;   ///< j
    std::size_t second = 0;  ///< k

    friend bool operator==(const Triplet&, const Triplet&) = default;
    friend auto operator<=>(const Triplet&, const Triplet&) = default;
};

enum class Ordering { j_closer, k_closer };

inline Ordering inverted(Ordering o) { return o == Ordering::j_closer ? Ordering::k_closer : Ordering::j_closer; }

struct LabeledTriplet {
    Triplet triplet;
    Ordering ordering = Ordering::j_closer;

    std::size_t near() const { return ordering == Ordering::j_closer ? triplet.first : triplet.second; }
    std::size_t far() const { return ordering == Ordering::j_closer ? triplet.second : triplet.first; }

    friend bool operator==(const LabeledTriplet&, const LabeledTriplet&) = default;
};

/// Smoothing constant of the triplet probability. Non-negative.
class Mu {
public:
    static constexpr double default_value = 0.05;

    constexpr Mu() = default;
    explicit Mu(double value) : value_(value) {
        if (!(value >= 0.0) || !std::isfinite(value)) throw ConfigError("mu must be a finite non-negative number");
    }
    constexpr double value() const noexcept { return value_; }

private:
    double value_ = default_value;
};

inline void validate_triplet(const Triplet& t, std::size_t n) {
    if (t.anchor >= n || t.first >= n || t.second >= n) {
        throw IndexError("triplet (" + std::to_string(t.anchor) + "," + std::to_string(t.first) + "," +
                         std::to_string(t.second) + ") out of range for " + std::to_string(n) + " objects");
    }
    if (t.anchor == t.first || t.anchor == t.second || t.first == t.second) {
        throw IndexError("triplet (" + std::to_string(t.anchor) + "," + std::to_string(t.first) + "," +
                         std::to_string(t.second) + ") repeats an object");
    }
}

struct EmbeddingModel {
    MLPParams params;

    explicit EmbeddingModel(MLPParams p = {}) : params(std::move(p)) {}

    std::size_t input_dim() const { return params.input_dim(); }
    std::size_t embed_dim() const { return params.output_dim(); }
    /// Width of the final layer's input (the penultimate activation).
    std::size_t last_input_dim() const { return params.layers.empty() ? 0 : params.layers.back().in(); }
    /// Length of a flattened last-layer gradient: weights then biases.
    std::size_t last_layer_size() const { return embed_dim() * last_input_dim() + embed_dim(); }
};

// ---------------------------------------------------------------------------
// Scalar pieces

/**
 * Probability that the anchor is closer to j than to k:
 * (mu + d2_ik) / (2 mu + d2_ik + d2_ij). Returns 0.5 when the denominator vanishes.
 */
inline double probability_from_squared(double d2_ij, double d2_ik, Mu mu) {
    const double den = 2.0 * mu.value() + (std::min(d2_ik, d2_ij) + std::max(d2_ik, d2_ij));
    if (den <= 0.0) return 0.5;
    // divide for the smaller side only; the other side is its complement, so p_ijk + p_ikj = 1 to an ulp
    const double small = std::clamp((mu.value() + std::min(d2_ik, d2_ij)) / den, 0.0, 1.0);
    return d2_ik <= d2_ij ? small : 1.0 - small;
}

/// Base-2 binary entropy with 0 log 0 = 0.
inline double binary_entropy(double p) {
    auto term = [](double q) { return q <= 0.0 ? 0.0 : -q * std::log2(q); };
    return std::clamp(term(p) + term(1.0 - p), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Precomputed embeddings

/// Embeddings and last-layer inputs of every object under one model snapshot.
struct EmbeddingTable {
    DenseMatrix embeddings;    ///< n x embed_dim
    DenseMatrix last_inputs;   ///< n x last_input_dim

    std::size_t size() const { return embeddings.rows(); }
    std::span<const double> embedding(std::size_t i) const { return embeddings.row(i); }
    std::span<const double> last_input(std::size_t i) const { return last_inputs.row(i); }
};

inline EmbeddingTable embed_all(const EmbeddingModel& model, const DenseMatrix& features) {
    const auto& params = model.params;
    params.validate();
    if (features.cols() != model.input_dim()) {
        throw ShapeError("layer 0: feature width " + std::to_string(features.cols()) + " != input dim " +
                         std::to_string(model.input_dim()));
    }
    EmbeddingTable table{DenseMatrix(features.rows(), model.embed_dim()),
                         DenseMatrix(features.rows(), model.last_input_dim())};
    ForwardCache cache;
    const std::size_t nl = params.layers.size();
    for (std::size_t i = 0; i < features.rows(); ++i) {
        forward_into(params, features.row(i), cache);
        std::copy(cache.post.back().begin(), cache.post.back().end(), table.embeddings.row(i).begin());
        const DenseVector& h = nl == 1 ? cache.input : cache.post[nl - 2];
        std::copy(h.begin(), h.end(), table.last_inputs.row(i).begin());
    }
    return table;
}

/// Embedding table restricted to the three objects of `t` (rows 0, 1, 2 = i, j, k).
inline EmbeddingTable embed_triplet(const EmbeddingModel& model, const DenseMatrix& features, const Triplet& t) {
    validate_triplet(t, features.rows());
    DenseMatrix sub(3, features.cols());
    const std::size_t ids[3] = {t.anchor, t.first, t.second};
    for (std::size_t r = 0; r < 3; ++r) std::copy(features.row(ids[r]).begin(), features.row(ids[r]).end(), sub.row(r).begin());
    return embed_all(model, sub);
}

inline constexpr Triplet local_triplet{0, 1, 2};

inline double distance(const EmbeddingTable& table, std::size_t a, std::size_t b) {
    if (a >= table.size() || b >= table.size()) throw IndexError("object index out of range");
    if (a == b) return 0.0;
    return tal::distance(table.embedding(a), table.embedding(b));
}

inline double distance(const EmbeddingModel& model, const DenseMatrix& features, std::size_t a, std::size_t b) {
    if (a >= features.rows() || b >= features.rows()) throw IndexError("object index out of range");
    if (a == b) return 0.0;
    // Embed in a fixed (min, max) order so the result is bit-symmetric.
    const std::size_t lo = std::min(a, b), hi = std::max(a, b);
    const auto ea = forward(model.params, features.row(lo)).embedding;
    const auto eb = forward(model.params, features.row(hi)).embedding;
    return tal::distance(ea, eb);
}

inline double triplet_probability(const EmbeddingTable& table, const Triplet& t, Mu mu) {
    validate_triplet(t, table.size());
    const double d2_ij = squared_distance(table.embedding(t.anchor), table.embedding(t.first));
    const double d2_ik = squared_distance(table.embedding(t.anchor), table.embedding(t.second));
    return probability_from_squared(d2_ij, d2_ik, mu);
}

inline double triplet_probability(const EmbeddingModel& model, const DenseMatrix& features, const Triplet& t, Mu mu) {
    return triplet_probability(embed_triplet(model, features, t), local_triplet, mu);
}

inline double triplet_entropy(const EmbeddingTable& table, const Triplet& t, Mu mu) {
    return binary_entropy(triplet_probability(table, t, mu));
}

inline double triplet_entropy(const EmbeddingModel& model, const DenseMatrix& features, const Triplet& t, Mu mu) {
    return binary_entropy(triplet_probability(model, features, t, mu));
}

// ---------------------------------------------------------------------------
// Loss and its gradients

/// exp(-(d2(anchor, far) - d2(anchor, near))) and its gradient w.r.t. the three embeddings.
struct TripletLossTerm {
    double loss = 0.0;
    DenseVector grad_anchor;
    DenseVector grad_first;   ///< w.r.t. phi(x_j)
    DenseVector grad_second;  ///< w.r.t. phi(x_k)
};

inline TripletLossTerm loss_term(std::span<const double> ei, std::span<const double> ej, std::span<const double> ek,
                                 Ordering ordering) {
    const std::size_t m = ei.size();
    const auto& en = ordering == Ordering::j_closer ? ej : ek;
    const auto& ef = ordering == Ordering::j_closer ? ek : ej;
    const double loss = std::exp(squared_distance(ei, en) - squared_distance(ei, ef));
    TripletLossTerm term{loss, DenseVector(m), DenseVector(m), DenseVector(m)};
    DenseVector& g_near = ordering == Ordering::j_closer ? term.grad_first : term.grad_second;
    DenseVector& g_far = ordering == Ordering::j_closer ? term.grad_second : term.grad_first;
    for (std::size_t c = 0; c < m; ++c) {
        g_near[c] = 2.0 * loss * (en[c] - ei[c]);
        g_far[c] = -2.0 * loss * (ef[c] - ei[c]);
        term.grad_anchor[c] = 2.0 * loss * (ef[c] - en[c]);
    }
    return term;
}

inline double triplet_loss(const EmbeddingTable& table, std::span<const LabeledTriplet> labeled) {
    double total = 0.0;
    for (const auto& lt : labeled) {
        validate_triplet(lt.triplet, table.size());
        const auto ei = table.embedding(lt.triplet.anchor);
        total += std::exp(squared_distance(ei, table.embedding(lt.near())) -
                          squared_distance(ei, table.embedding(lt.far())));
    }
    return total;
}

inline double triplet_loss(const EmbeddingModel& model, const DenseMatrix& features,
                           std::span<const LabeledTriplet> labeled) {
    return triplet_loss(embed_all(model, features), labeled);
}

/**
 * Reusable buffers for full-parameter loss gradients. Each distinct object of a batch
 * is pushed through the network once; per-triplet output gradients are summed per
 * object and back-propagated once, which equals three shared-weight passes per triplet.
 */
class LossGradientWorkspace {
public:
    /// Writes the summed gradient into `grads` (overwritten) and returns the summed loss.
    double compute(const EmbeddingModel& model, const DenseMatrix& features, std::span<const LabeledTriplet> labeled,
                   MLPParams& grads) {
        const auto& params = model.params;
        if (grads.layers.size() != params.layers.size()) grads = zeros_like(params);
        else set_zero(grads);
        const std::size_t n = features.rows();
        if (features.cols() != model.input_dim()) {
            throw ShapeError("layer 0: feature width " + std::to_string(features.cols()) + " != input dim " +
                             std::to_string(model.input_dim()));
        }
        if (slot_.size() != n) slot_.assign(n, npos);
        objects_.clear();
        auto slot_of = [&](std::size_t obj) {
            if (slot_[obj] == npos) {
                slot_[obj] = objects_.size();
                objects_.push_back(obj);
            }
            return slot_[obj];
        };
        for (const auto& lt : labeled) {
            validate_triplet(lt.triplet, n);
            slot_of(lt.triplet.anchor);
            slot_of(lt.triplet.first);
            slot_of(lt.triplet.second);
        }
        const std::size_t m = model.embed_dim();
        if (caches_.size() < objects_.size()) caches_.resize(objects_.size());
        out_grads_.assign(objects_.size() * m, 0.0);
        for (std::size_t s = 0; s < objects_.size(); ++s) forward_into(params, features.row(objects_[s]), caches_[s]);

        double total = 0.0;
        for (const auto& lt : labeled) {
            const std::size_t si = slot_[lt.triplet.anchor];
            const std::size_t sn = slot_[lt.near()];
            const std::size_t sf = slot_[lt.far()];
            const auto& ei = caches_[si].post.back();
            const auto& en = caches_[sn].post.back();
            const auto& ef = caches_[sf].post.back();
            const double loss = std::exp(squared_distance(ei, en) - squared_distance(ei, ef));
            total += loss;
            double* gi = out_grads_.data() + si * m;
            double* gn = out_grads_.data() + sn * m;
            double* gf = out_grads_.data() + sf * m;
            for (std::size_t c = 0; c < m; ++c) {
                gn[c] += 2.0 * loss * (en[c] - ei[c]);
                gf[c] += -2.0 * loss * (ef[c] - ei[c]);
                gi[c] += 2.0 * loss * (ef[c] - en[c]);
            }
        }
        if (!std::isfinite(total)) throw NumericError("triplet loss overflowed");
        for (std::size_t s = 0; s < objects_.size(); ++s) {
            backward_accumulate(params, caches_[s], std::span<const double>(out_grads_.data() + s * m, m), grads,
                                scratch_);
            slot_[objects_[s]] = npos;
        }
        return total;
    }

private:
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::vector<std::size_t> slot_;
    std::vector<std::size_t> objects_;
    std::vector<ForwardCache> caches_;
    DenseVector out_grads_;
    BackwardScratch scratch_;
};

/// Exact gradient of the summed exponential triplet loss w.r.t. every parameter.
inline MLPParams loss_gradient(const EmbeddingModel& model, const DenseMatrix& features,
                               std::span<const LabeledTriplet> labeled) {
    MLPParams grads = zeros_like(model.params);
    LossGradientWorkspace ws;
    ws.compute(model, features, labeled, grads);
    return grads;
}

/// Gradient of one ordering's loss w.r.t. the last layer, flattened as weights (row-major) then biases.
inline DenseVector last_layer_gradient(const EmbeddingTable& table, const Triplet& t, Ordering ordering) {
    validate_triplet(t, table.size());
    const std::size_t m = table.embeddings.cols();
    const std::size_t h = table.last_inputs.cols();
    const auto term = loss_term(table.embedding(t.anchor), table.embedding(t.first), table.embedding(t.second), ordering);
    DenseVector out(m * h + m, 0.0);
    const std::size_t objs[3] = {t.anchor, t.first, t.second};
    const DenseVector* gs[3] = {&term.grad_anchor, &term.grad_first, &term.grad_second};
    for (std::size_t o = 0; o < 3; ++o) {
        const auto x = table.last_input(objs[o]);
        const DenseVector& g = *gs[o];
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < h; ++c) out[r * h + c] += g[r] * x[c];
            out[m * h + r] += g[r];
        }
    }
    return out;
}

/// p_ijk * grad L(i,j,k) + p_ikj * grad L(i,k,j), restricted to the last layer.
inline DenseVector expected_last_layer_gradient(const EmbeddingTable& table, const Triplet& t, Mu mu) {
    const double p = triplet_probability(table, t, mu);
    DenseVector gj = last_layer_gradient(table, t, Ordering::j_closer);
    const DenseVector gk = last_layer_gradient(table, t, Ordering::k_closer);
    for (std::size_t i = 0; i < gj.size(); ++i) gj[i] = p * gj[i] + (1.0 - p) * gk[i];
    return gj;
}

inline DenseVector expected_last_layer_gradient(const EmbeddingModel& model, const DenseMatrix& features,
                                                const Triplet& t, Mu mu) {
    return expected_last_layer_gradient(embed_triplet(model, features, t), local_triplet, mu);
}

/// Last-layer gradient for the more probable ordering; p = 0.5 picks j_closer.
inline DenseVector most_probable_gradient(const EmbeddingTable& table, const Triplet& t, Mu mu) {
    const double p = triplet_probability(table, t, mu);
    return last_layer_gradient(table, t, p >= 0.5 ? Ordering::j_closer : Ordering::k_closer);
}

inline DenseVector most_probable_gradient(const EmbeddingModel& model, const DenseMatrix& features, const Triplet& t,
                                          Mu mu) {
    return most_probable_gradient(embed_triplet(model, features, t), local_triplet, mu);
}

/**
 * Expected L2 norm of the loss gradient w.r.t. the three output embeddings,
 * weighted by the two ordering probabilities.
 */
inline double expected_output_gradient_norm(const EmbeddingTable& table, const Triplet& t, Mu mu) {
    const double p = triplet_probability(table, t, mu);
    auto norm_for = [&](Ordering o) {
        const auto term = loss_term(table.embedding(t.anchor), table.embedding(t.first), table.embedding(t.second), o);
        return std::sqrt(squared_norm(term.grad_anchor) + squared_norm(term.grad_first) +
                         squared_norm(term.grad_second));
    };
    return p * norm_for(Ordering::j_closer) + (1.0 - p) * norm_for(Ordering::k_closer);
}

}  // namespace tal

#endif
