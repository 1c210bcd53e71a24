#ifndef TAL_ACQUISITION_HPP
#define TAL_ACQUISITION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"
#include "metric.hpp"
#include "rng.hpp"

/**
 * @file acquisition.hpp
 *
 * @brief Batch selection: informativeness scores, triplet-to-triplet distances,
 * and the selectors (top-k, farthest-point sampling, k-means++, uniform).
 *
 * The decorrelated strategy first keeps the k most informative triplets, then runs
 * farthest-point sampling over them with rho(t, t') = f(t) f(t') gamma(t, t').
 */

namespace tal {

enum class Informativeness { uncertainty, expected_gradient_length, model_output_change };
enum class Diversity { gradient, euclidean, centroid, oriented };
enum class StrategyKind { random, topk_informative, decorrelated, fps_only, badge };

/// How the concatenated-embedding distance treats the unknown j/k ordering of t.
enum class EuclideanMode {
    ordering_min,  ///< min over both orderings of t: zero for t' = t and for t' = t with j, k swapped
    expected,      ///< mean over both orderings of t (symmetric, but nonzero at t' = t)
};

struct AcquisitionConfig {
    std::size_t batch_size = 1;
    std::size_t oversample_size = 0;  ///< 0 means 2 * batch_size
    Mu mu{};
    Informativeness informativeness = Informativeness::uncertainty;
    Diversity diversity = Diversity::gradient;
    StrategyKind strategy = StrategyKind::decorrelated;
    EuclideanMode euclidean_mode = EuclideanMode::ordering_min;

    std::size_t candidate_count() const { return oversample_size == 0 ? 2 * batch_size : oversample_size; }

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch size must be at least 1");
        if (candidate_count() < batch_size) throw ConfigError("oversample size must be >= batch size");
    }
};

// ---------------------------------------------------------------------------
// Names

inline std::string_view to_string(Informativeness m) {
    switch (m) {
        case Informativeness::uncertainty: return "uncertainty";
        case Informativeness::expected_gradient_length: return "egl";
        case Informativeness::model_output_change: return "moc";
    }
    return "?";
}

inline std::string_view to_string(Diversity d) {
    switch (d) {
        case Diversity::gradient: return "gradient";
        case Diversity::euclidean: return "euclidean";
        case Diversity::centroid: return "centroid";
        case Diversity::oriented: return "oriented";
    }
    return "?";
}

inline std::string_view to_string(StrategyKind s) {
    switch (s) {
        case StrategyKind::random: return "random";
        case StrategyKind::topk_informative: return "topk";
        case StrategyKind::decorrelated: return "decorrelated";
        case StrategyKind::fps_only: return "fps";
        case StrategyKind::badge: return "badge";
    }
    return "?";
}

inline Informativeness parse_informativeness(std::string_view s) {
    if (s == "uncertainty" || s == "us") return Informativeness::uncertainty;
    if (s == "egl" || s == "expected_gradient_length") return Informativeness::expected_gradient_length;
    if (s == "moc" || s == "model_output_change") return Informativeness::model_output_change;
    throw ConfigError("unknown informativeness measure '" + std::string(s) + "'");
}

inline Diversity parse_diversity(std::string_view s) {
    if (s == "gradient") return Diversity::gradient;
    if (s == "euclidean") return Diversity::euclidean;
    if (s == "centroid") return Diversity::centroid;
    if (s == "oriented") return Diversity::oriented;
    throw ConfigError("unknown diversity measure '" + std::string(s) + "'");
}

inline StrategyKind parse_strategy_kind(std::string_view s) {
    if (s == "random") return StrategyKind::random;
    if (s == "topk" || s == "topk_informative") return StrategyKind::topk_informative;
    if (s == "decorrelated") return StrategyKind::decorrelated;
    if (s == "fps" || s == "fps_only") return StrategyKind::fps_only;
    if (s == "badge") return StrategyKind::badge;
    throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

/// Short display names in the usual figure-legend style: Random, US, US-Gradient, FPS-Centroid, BADGE, EGL-Oriented ...
inline std::string strategy_label(const AcquisitionConfig& c) {
    auto cap = [](std::string_view s) {
        std::string out(s);
        if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
        return out;
    };
    auto info = [&]() -> std::string {
        switch (c.informativeness) {
            case Informativeness::uncertainty: return "US";
            case Informativeness::expected_gradient_length: return "EGL";
            case Informativeness::model_output_change: return "MOC";
        }
        return "?";
    };
    switch (c.strategy) {
        case StrategyKind::random: return "Random";
        case StrategyKind::topk_informative: return info();
        case StrategyKind::decorrelated: return info() + "-" + cap(to_string(c.diversity));
        case StrategyKind::fps_only: return "FPS-" + cap(to_string(c.diversity));
        case StrategyKind::badge: return "BADGE";
    }
    return "?";
}

/// Inverse of strategy_label.
inline AcquisitionConfig parse_strategy_label(std::string_view label, AcquisitionConfig base = {}) {
    std::string s(label);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (s == "random") {
        base.strategy = StrategyKind::random;
        return base;
    }
    if (s == "badge") {
        base.strategy = StrategyKind::badge;
        return base;
    }
    const auto dash = s.find('-');
    const std::string head = s.substr(0, dash);
    if (head == "fps") {
        if (dash == std::string::npos) throw ConfigError("FPS strategy needs a distance, e.g. FPS-Gradient");
        base.strategy = StrategyKind::fps_only;
        base.diversity = parse_diversity(s.substr(dash + 1));
        return base;
    }
    base.informativeness = parse_informativeness(head);
    if (dash == std::string::npos) {
        base.strategy = StrategyKind::topk_informative;
    } else {
        base.strategy = StrategyKind::decorrelated;
        base.diversity = parse_diversity(s.substr(dash + 1));
    }
    return base;
}

// ---------------------------------------------------------------------------
// Informativeness

inline double informativeness(const EmbeddingTable& table, const Triplet& t, Informativeness measure, Mu mu) {
    switch (measure) {
        case Informativeness::uncertainty: return triplet_entropy(table, t, mu);
        case Informativeness::expected_gradient_length: return norm(expected_last_layer_gradient(table, t, mu));
        case Informativeness::model_output_change: return expected_output_gradient_norm(table, t, mu);
    }
    return 0.0;
}

inline std::vector<double> score_informativeness(const EmbeddingTable& table, std::span<const Triplet> triplets,
                                                 Informativeness measure, Mu mu) {
    std::vector<double> scores(triplets.size());
    for (std::size_t i = 0; i < triplets.size(); ++i) scores[i] = informativeness(table, triplets[i], measure, mu);
    return scores;
}

inline std::vector<double> score_informativeness(const EmbeddingModel& model, const DenseMatrix& features,
                                                 std::span<const Triplet> triplets, Informativeness measure, Mu mu) {
    if (triplets.empty()) return {};
    return score_informativeness(embed_all(model, features), triplets, measure, mu);
}

/// Positions of the k highest scores, by descending score then ascending position.
inline std::vector<std::size_t> select_topk(std::span<const double> scores, std::size_t k) {
    if (k > scores.size()) {
        throw ConfigError("top-k: k = " + std::to_string(k) + " exceeds pool of " + std::to_string(scores.size()));
    }
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto better = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
    return idx;
}

// ---------------------------------------------------------------------------
// Triplet distances (gamma)

inline constexpr double degenerate_norm = 1e-12;

/**
 * Fixed-length vector representing a triplet for one diversity measure:
 *   gradient  - unit expected last-layer gradient, or all zeros when its norm is tiny
 *   euclidean - phi(x_i) ++ phi(x_j) ++ phi(x_k)
 *   centroid  - mean of the three embeddings
 *   oriented  - phi(x_i) ++ unit(phi(x_j) + phi(x_k) - 2 phi(x_i)) (zeros when tiny)
 */
inline DenseVector diversity_descriptor(const EmbeddingTable& table, const Triplet& t, Diversity kind, Mu mu) {
    validate_triplet(t, table.size());
    const std::size_t m = table.embeddings.cols();
    const auto ei = table.embedding(t.anchor);
    const auto ej = table.embedding(t.first);
    const auto ek = table.embedding(t.second);
    switch (kind) {
        case Diversity::gradient: {
            DenseVector g = expected_last_layer_gradient(table, t, mu);
            const double n = norm(g);
            if (n < degenerate_norm) std::fill(g.begin(), g.end(), 0.0);
            else for (double& v : g) v /= n;
            return g;
        }
        case Diversity::euclidean: {
            DenseVector out;
            out.reserve(3 * m);
            out.insert(out.end(), ei.begin(), ei.end());
            out.insert(out.end(), ej.begin(), ej.end());
            out.insert(out.end(), ek.begin(), ek.end());
            return out;
        }
        case Diversity::centroid: {
            DenseVector c(m);
            for (std::size_t d = 0; d < m; ++d) c[d] = (ei[d] + ej[d] + ek[d]) / 3.0;
            return c;
        }
        case Diversity::oriented: {
            DenseVector out(2 * m);
            double nn = 0.0;
            for (std::size_t d = 0; d < m; ++d) {
                out[d] = ei[d];
                out[m + d] = ek[d] + ej[d] - 2.0 * ei[d];
                nn += out[m + d] * out[m + d];
            }
            nn = std::sqrt(nn);
            for (std::size_t d = 0; d < m; ++d) out[m + d] = nn < degenerate_norm ? 0.0 : out[m + d] / nn;
            return out;
        }
    }
    return {};
}

/// gamma between two descriptors produced by diversity_descriptor.
inline double gamma_from_descriptors(std::span<const double> a, std::span<const double> b, Diversity kind,
                                     EuclideanMode mode = EuclideanMode::ordering_min) {
    switch (kind) {
        case Diversity::gradient: {
            // A zero descriptor marks a vanishing gradient: treated as orthogonal to everything.
            if (squared_norm(a) == 0.0 || squared_norm(b) == 0.0) return 1.0;
            return std::clamp(1.0 - dot(a, b), 0.0, 2.0);
        }
        case Diversity::euclidean: {
            const std::size_t m = a.size() / 3;
            const double same = distance(a, b);
            // a with its j and k blocks exchanged, against b.
            // The two cross terms are added smaller first so that gamma(a, b) == gamma(b, a) bit for bit.
            const double jk = squared_distance(a.subspan(m, m), b.subspan(2 * m, m));
            const double kj = squared_distance(a.subspan(2 * m, m), b.subspan(m, m));
            const double swapped =
                std::sqrt(squared_distance(a.subspan(0, m), b.subspan(0, m)) + (std::min(jk, kj) + std::max(jk, kj)));
            return mode == EuclideanMode::ordering_min ? std::min(same, swapped) : 0.5 * (same + swapped);
        }
        case Diversity::centroid: return distance(a, b);
        case Diversity::oriented: {
            const std::size_t m = a.size() / 2;
            return distance(a.subspan(0, m), b.subspan(0, m)) +
                   std::clamp(1.0 - dot(a.subspan(m, m), b.subspan(m, m)), 0.0, 2.0);
        }
    }
    return 0.0;
}

// gamma(t, t) is 0 even for degenerate triplets, where the zero-gradient and zero-orientation
// conventions would put the triplet at distance 1 from itself. Both descriptors ignore the j/k
// order, so the same holds for t against its swapped copy.

inline bool same_up_to_swap(const Triplet& t, const Triplet& u) {
    return t.anchor == u.anchor && ((t.first == u.first && t.second == u.second) ||
                                    (t.first == u.second && t.second == u.first));
}

inline double gamma_gradient(const EmbeddingTable& table, const Triplet& t, const Triplet& u, Mu mu) {
    if (same_up_to_swap(t, u)) return 0.0;
    return gamma_from_descriptors(diversity_descriptor(table, t, Diversity::gradient, mu),
                                  diversity_descriptor(table, u, Diversity::gradient, mu), Diversity::gradient);
}

inline double gamma_euclidean(const EmbeddingTable& table, const Triplet& t, const Triplet& u,
                              EuclideanMode mode = EuclideanMode::ordering_min) {
    return gamma_from_descriptors(diversity_descriptor(table, t, Diversity::euclidean, Mu{}),
                                  diversity_descriptor(table, u, Diversity::euclidean, Mu{}), Diversity::euclidean,
                                  mode);
}

inline double gamma_centroid(const EmbeddingTable& table, const Triplet& t, const Triplet& u) {
    return gamma_from_descriptors(diversity_descriptor(table, t, Diversity::centroid, Mu{}),
                                  diversity_descriptor(table, u, Diversity::centroid, Mu{}), Diversity::centroid);
}

inline double gamma_oriented(const EmbeddingTable& table, const Triplet& t, const Triplet& u) {
    if (same_up_to_swap(t, u)) return 0.0;
    return gamma_from_descriptors(diversity_descriptor(table, t, Diversity::oriented, Mu{}),
                                  diversity_descriptor(table, u, Diversity::oriented, Mu{}), Diversity::oriented);
}

inline double gamma(const EmbeddingTable& table, const Triplet& t, const Triplet& u, const AcquisitionConfig& config) {
    if (same_up_to_swap(t, u) && (config.diversity == Diversity::gradient || config.diversity == Diversity::oriented)) return 0.0;
    return gamma_from_descriptors(diversity_descriptor(table, t, config.diversity, config.mu),
                                  diversity_descriptor(table, u, config.diversity, config.mu), config.diversity,
                                  config.euclidean_mode);
}

/// f(t) f(t') gamma(t, t'); the f factors are 1 for the fps_only strategy.
inline double rho(const EmbeddingTable& table, const Triplet& t, const Triplet& u, const AcquisitionConfig& config) {
    const double g = gamma(table, t, u, config);
    if (config.strategy == StrategyKind::fps_only) return g;
    return informativeness(table, t, config.informativeness, config.mu) *
           informativeness(table, u, config.informativeness, config.mu) * g;
}

// ---------------------------------------------------------------------------
// Selectors

/**
 * Greedy farthest-point sampling over `candidates` (triplet ids) with a precomputed
 * symmetric k x k distance matrix `dist` indexed by candidate position.
 *
 * Starts from the pair with the largest distance, then repeatedly adds the candidate whose
 * minimum distance to the selected set is largest. Ties go to the smaller triplet id, and
 * for the seed pair to the lexicographically smaller (min id, max id). With b = 1 the
 * first candidate is returned, so callers pass candidates in descending informativeness.
 */
inline std::vector<std::size_t> fps_select_matrix(std::span<const std::size_t> candidates, std::span<const double> dist,
                                                  std::size_t b) {
    const std::size_t k = candidates.size();
    if (b > k) throw ConfigError("fps: batch of " + std::to_string(b) + " from " + std::to_string(k) + " candidates");
    if (dist.size() != k * k) throw ShapeError("fps: distance matrix is not k x k");
    if (b == 0) return {};
    if (b == 1) return {candidates.front()};

    std::size_t best_a = 0, best_c = 1;
    double best = -std::numeric_limits<double>::infinity();
    auto pair_key = [&](std::size_t a, std::size_t c) {
        return std::pair(std::min(candidates[a], candidates[c]), std::max(candidates[a], candidates[c]));
    };
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t c = a + 1; c < k; ++c) {
            const double v = dist[a * k + c];
            if (v > best || (v == best && pair_key(a, c) < pair_key(best_a, best_c))) {
                best = v;
                best_a = a;
                best_c = c;
            }
        }
    }
    if (candidates[best_c] < candidates[best_a]) std::swap(best_a, best_c);

    std::vector<std::size_t> selected{candidates[best_a], candidates[best_c]};
    std::vector<char> taken(k, 0);
    taken[best_a] = taken[best_c] = 1;
    std::vector<double> min_dist(k);
    for (std::size_t a = 0; a < k; ++a) min_dist[a] = std::min(dist[a * k + best_a], dist[a * k + best_c]);

    while (selected.size() < b) {
        std::size_t pick = k;
        for (std::size_t a = 0; a < k; ++a) {
            if (taken[a]) continue;
            if (pick == k || min_dist[a] > min_dist[pick] ||
                (min_dist[a] == min_dist[pick] && candidates[a] < candidates[pick])) {
                pick = a;
            }
        }
        taken[pick] = 1;
        selected.push_back(candidates[pick]);
        for (std::size_t a = 0; a < k; ++a) min_dist[a] = std::min(min_dist[a], dist[a * k + pick]);
    }
    return selected;
}

/// Same as fps_select_matrix with the distance given as a callable on triplet ids.
template <typename RhoFn>
std::vector<std::size_t> fps_select(std::span<const std::size_t> candidates, RhoFn&& rho_fn, std::size_t b) {
    const std::size_t k = candidates.size();
    if (b > k) throw ConfigError("fps: batch of " + std::to_string(b) + " from " + std::to_string(k) + " candidates");
    std::vector<double> dist(k * k, 0.0);
    if (b >= 2) {
        for (std::size_t a = 0; a < k; ++a) {
            for (std::size_t c = a + 1; c < k; ++c) {
                const double v = rho_fn(candidates[a], candidates[c]);
                dist[a * k + c] = v;
                dist[c * k + a] = v;
            }
        }
    }
    return fps_select_matrix(candidates, dist, b);
}

/**
 * k-means++ seeding over the rows of `vectors`: the first seed is uniform, each next one
 * is drawn with probability proportional to its squared distance to the closest seed.
 * When every remaining distance is zero, falls back to uniform sampling among the unchosen.
 */
inline std::vector<std::size_t> kmeanspp_select(const DenseMatrix& vectors, std::size_t b, Rng& rng) {
    const std::size_t n = vectors.rows();
    if (b > n) throw ConfigError("k-means++: " + std::to_string(b) + " seeds from " + std::to_string(n) + " points");
    std::vector<std::size_t> seeds;
    if (b == 0) return seeds;
    seeds.reserve(b);
    std::vector<char> chosen(n, 0);
    std::vector<double> mind(n, std::numeric_limits<double>::infinity());
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::size_t next = uniform_index(rng, n);
    for (;;) {
        seeds.push_back(next);
        chosen[next] = 1;
        if (seeds.size() == b) break;
        const auto c = vectors.row(next);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (chosen[i]) {
                mind[i] = 0.0;
                continue;
            }
            mind[i] = std::min(mind[i], squared_distance(vectors.row(i), c));
            total += mind[i];
        }
        if (total > 0.0) {
            const double target = unit(rng) * total;
            double acc = 0.0;
            next = n;
            std::size_t last_positive = n;
            for (std::size_t i = 0; i < n; ++i) {
                if (mind[i] <= 0.0) continue;
                last_positive = i;
                acc += mind[i];
                if (acc > target) {
                    next = i;
                    break;
                }
            }
            if (next == n) next = last_positive;
        } else {
            std::vector<std::size_t> rest;
            for (std::size_t i = 0; i < n; ++i) {
                if (!chosen[i]) rest.push_back(i);
            }
            next = rest[uniform_index(rng, rest.size())];
        }
    }
    return seeds;
}

inline std::vector<std::size_t> random_select(std::size_t pool_size, std::size_t b, Rng& rng) {
    return sample_without_replacement(pool_size, b, rng);
}

/// Outcome of one batch selection: positions into the unlabeled list.
struct Selection {
    std::vector<std::size_t> batch;       ///< |batch| = b
    std::vector<std::size_t> candidates;  ///< the overcomplete set S, when the strategy uses one
};

/**
 * Picks b positions of `unlabeled` according to `config.strategy`.
 *   random       - uniform without replacement
 *   topk         - b most informative
 *   decorrelated - FPS under rho over the k most informative
 *   fps_only     - FPS under gamma over k uniformly drawn candidates
 *   badge        - k-means++ over most-probable-ordering gradients of the whole pool
 */
inline Selection select_batch(const EmbeddingTable& table, std::span<const Triplet> unlabeled,
                              const AcquisitionConfig& config, Rng& rng) {
    config.validate();
    const std::size_t b = config.batch_size;
    if (b > unlabeled.size()) {
        throw PoolExhausted("need " + std::to_string(b) + " triplets, " + std::to_string(unlabeled.size()) +
                            " unlabeled");
    }
    const std::size_t k = std::min(config.candidate_count(), unlabeled.size());
    Selection sel;
    switch (config.strategy) {
        case StrategyKind::random: sel.batch = random_select(unlabeled.size(), b, rng); break;
        case StrategyKind::topk_informative: {
            const auto scores = score_informativeness(table, unlabeled, config.informativeness, config.mu);
            sel.batch = select_topk(scores, b);
            break;
        }
        case StrategyKind::decorrelated:
        case StrategyKind::fps_only: {
            std::vector<double> f;
            if (config.strategy == StrategyKind::decorrelated) {
                const auto scores = score_informativeness(table, unlabeled, config.informativeness, config.mu);
                sel.candidates = select_topk(scores, k);
                for (std::size_t c : sel.candidates) f.push_back(scores[c]);
            } else {
                sel.candidates = random_select(unlabeled.size(), k, rng);
                f.assign(k, 1.0);
            }
            std::vector<DenseVector> desc(k);
            for (std::size_t c = 0; c < k; ++c) {
                desc[c] = diversity_descriptor(table, unlabeled[sel.candidates[c]], config.diversity, config.mu);
            }
            std::vector<double> dist(k * k, 0.0);
            for (std::size_t a = 0; a < k; ++a) {
                for (std::size_t c = a + 1; c < k; ++c) {
                    const double v =
                        f[a] * f[c] * gamma_from_descriptors(desc[a], desc[c], config.diversity, config.euclidean_mode);
                    dist[a * k + c] = v;
                    dist[c * k + a] = v;
                }
            }
            // Ids are positions in the unlabeled list, so ties break toward earlier pool entries.
            sel.batch = fps_select_matrix(sel.candidates, dist, b);
            break;
        }
        case StrategyKind::badge: {
            const std::size_t dim = table.embeddings.cols() * table.last_inputs.cols() + table.embeddings.cols();
            DenseMatrix grads(unlabeled.size(), dim);
            for (std::size_t i = 0; i < unlabeled.size(); ++i) {
                const auto g = most_probable_gradient(table, unlabeled[i], config.mu);
                std::copy(g.begin(), g.end(), grads.row(i).begin());
            }
            sel.batch = kmeanspp_select(grads, b, rng);
            break;
        }
    }
    return sel;
}

}  // namespace tal

#endif
