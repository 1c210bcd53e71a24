#ifndef TAL_DATA_HPP
#define TAL_DATA_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"
#include "metric.hpp"
#include "rng.hpp"

/**
 * @file data.hpp
 *
 * @brief Object sets, triplet pools, the synthetic Mahalanobis benchmark and CSV I/O.
 *
 * Feature CSV:  `id,f0,...,f{d-1}[,asset]`, header mandatory.
 * Triplet CSV:  `anchor_id,j_id,k_id[,ordering]`, ordering in {j, k}, header mandatory.
 */

namespace tal {

struct ObjectSet {
    DenseMatrix features;             ///< n x d
    std::vector<std::string> ids;     ///< one per row, unique
    std::vector<std::string> assets;  ///< empty, or one (possibly empty) reference per row

    std::size_t size() const { return features.rows(); }
    std::size_t dim() const { return features.cols(); }

    void validate() const {
        if (ids.size() != features.rows()) throw ConfigError("object set: id count does not match feature rows");
        if (!assets.empty() && assets.size() != ids.size()) throw ConfigError("object set: asset count mismatch");
        std::set<std::string> seen;
        for (const auto& id : ids) {
            if (!seen.insert(id).second) throw ConfigError("object set: duplicate id '" + id + "'");
        }
        if (!all_finite(features.values())) throw NumericError("object set: non-finite feature");
    }

    std::size_t index_of(const std::string& id) const {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] == id) return i;
        }
        throw IndexError("unknown object id '" + id + "'");
    }
};

/// Mahalanobis ground truth d2(x, y) = (x - y)^T M (x - y) with M = A^T A.
struct GroundTruthMetric {
    DenseMatrix matrix;  ///< d x d, symmetric PSD

    double squared_distance(std::span<const double> x, std::span<const double> y) const {
        const std::size_t d = matrix.rows();
        DenseVector diff(d);
        for (std::size_t i = 0; i < d; ++i) diff[i] = x[i] - y[i];
        double s = 0.0;
        for (std::size_t r = 0; r < d; ++r) s += diff[r] * dot(matrix.row(r), diff);
        return s;
    }
    double distance(std::span<const double> x, std::span<const double> y) const {
        return std::sqrt(std::max(0.0, squared_distance(x, y)));
    }
};

enum class Provenance { synthetic, loaded };

struct TripletPool {
    std::vector<Triplet> triplets;
    std::vector<std::optional<Ordering>> orderings;  ///< empty, or one per triplet
    Provenance provenance = Provenance::synthetic;

    std::size_t size() const { return triplets.size(); }
    bool has_orderings() const {
        return orderings.size() == triplets.size() &&
               std::all_of(orderings.begin(), orderings.end(), [](const auto& o) { return o.has_value(); });
    }

    /// All triplets with their stored orderings. Throws ContractError if any is unlabeled.
    std::vector<LabeledTriplet> labeled() const {
        if (orderings.size() != triplets.size()) throw ContractError("triplet pool carries no orderings");
        std::vector<LabeledTriplet> out;
        out.reserve(triplets.size());
        for (std::size_t i = 0; i < triplets.size(); ++i) {
            if (!orderings[i]) throw ContractError("triplet " + std::to_string(i) + " is unlabeled");
            out.push_back({triplets[i], *orderings[i]});
        }
        return out;
    }

    void validate(std::size_t n) const {
        for (const auto& t : triplets) validate_triplet(t, n);
        if (!orderings.empty() && orderings.size() != triplets.size()) {
            throw ConfigError("triplet pool: ordering count does not match triplet count");
        }
    }
};

/// Identity of a triplet as a question: (i, j, k) and (i, k, j) ask the same thing.
inline std::tuple<std::size_t, std::size_t, std::size_t> question_key(const Triplet& t) {
    return {t.anchor, std::min(t.first, t.second), std::max(t.first, t.second)};
}

// ---------------------------------------------------------------------------
// Synthetic data

/// n standard-normal points in d dimensions and a random PSD metric M = A^T A (A standard normal).
inline std::pair<ObjectSet, GroundTruthMetric> generate_synthetic(std::size_t n, std::size_t d, std::uint64_t seed) {
    if (n < 3) throw ConfigError("need at least 3 objects to form a triplet");
    if (d < 1) throw ConfigError("feature dimension must be positive");
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    ObjectSet objects{DenseMatrix(n, d), {}, {}};
    for (double& v : objects.features.values()) v = normal(rng);
    objects.ids.reserve(n);
    for (std::size_t i = 0; i < n; ++i) objects.ids.push_back(std::to_string(i));
    DenseMatrix a(d, d);
    for (double& v : a.values()) v = normal(rng);
    GroundTruthMetric metric{DenseMatrix(d, d)};
    for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t c = r; c < d; ++c) {
            double s = 0.0;
            for (std::size_t q = 0; q < d; ++q) s += a(q, r) * a(q, c);
            metric.matrix(r, c) = s;
            metric.matrix(c, r) = s;
        }
    }
    return {std::move(objects), std::move(metric)};
}

/// Ordering given by a squared-distance oracle; nullopt on an exact tie.
template <typename SqDist>
std::optional<Ordering> true_ordering(const Triplet& t, SqDist&& d2) {
    const double dij = d2(t.anchor, t.first);
    const double dik = d2(t.anchor, t.second);
    if (dij == dik) return std::nullopt;
    return dij < dik ? Ordering::j_closer : Ordering::k_closer;
}

inline std::optional<Ordering> true_ordering(const ObjectSet& objects, const GroundTruthMetric& metric, const Triplet& t) {
    return true_ordering(t, [&](std::size_t a, std::size_t b) {
        return metric.squared_distance(objects.features.row(a), objects.features.row(b));
    });
}

/**
 * `count` triplets with distinct objects, uniform over ordered index triples, each with its
 * ground-truth ordering. Exact ties are rejected and resampled. Duplicates are allowed
 * unless `reject_duplicates`.
 */
inline TripletPool sample_triplets(const ObjectSet& objects, const GroundTruthMetric& metric, std::size_t count,
                                   std::uint64_t seed, bool reject_duplicates = false) {
    const std::size_t n = objects.size();
    if (n < 3) throw ConfigError("need at least 3 objects to form a triplet");
    if (count < 1) throw ConfigError("triplet count must be at least 1");
    if (reject_duplicates && count > n * (n - 1) * (n - 2) / 2) {
        throw ConfigError("more distinct triplets requested than exist");
    }
    Rng rng(seed);
    TripletPool pool;
    pool.provenance = Provenance::synthetic;
    pool.triplets.reserve(count);
    pool.orderings.reserve(count);
    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
    std::size_t failures = 0;
    while (pool.triplets.size() < count) {
        Triplet t;
        t.anchor = uniform_index(rng, n);
        t.first = uniform_index(rng, n - 1);
        if (t.first >= t.anchor) ++t.first;
        t.second = uniform_index(rng, n - 2);
        const std::size_t lo = std::min(t.anchor, t.first), hi = std::max(t.anchor, t.first);
        if (t.second >= lo) ++t.second;
        if (t.second >= hi) ++t.second;
        if (reject_duplicates && seen.count(question_key(t))) continue;
        const auto ord = true_ordering(objects, metric, t);
        if (!ord) {
            if (++failures >= 1000) throw DegenerateMetric("1000 consecutive exact distance ties");
            continue;
        }
        failures = 0;
        if (reject_duplicates) seen.insert(question_key(t));
        pool.triplets.push_back(t);
        pool.orderings.push_back(*ord);
    }
    return pool;
}

/// Number of orderings inverted by flip_labels for a pool of `size` triplets.
inline std::size_t flip_count(double rate, std::size_t size) {
    return static_cast<std::size_t>(std::floor(rate * static_cast<double>(size) + 1e-9));
}

/// Inverts exactly floor(rate * |pool|) stored orderings chosen uniformly without replacement.
inline TripletPool flip_labels(TripletPool pool, double rate, std::uint64_t seed,
                               std::vector<std::size_t>* flipped = nullptr) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("flip rate must lie in [0, 1]");
    if (!pool.has_orderings()) throw ContractError("flip_labels needs a fully labeled pool");
    Rng rng(seed);
    auto chosen = sample_without_replacement(pool.size(), flip_count(rate, pool.size()), rng);
    for (std::size_t i : chosen) pool.orderings[i] = inverted(*pool.orderings[i]);
    if (flipped) {
        std::sort(chosen.begin(), chosen.end());
        *flipped = std::move(chosen);
    }
    return pool;
}

/**
 * Random disjoint train/test subsets. Disjointness is on questions: a test triplet never
 * asks the same (anchor, {j, k}) as a train triplet. Duplicates inside the pool are skipped.
 */
inline std::pair<TripletPool, TripletPool> split(const TripletPool& pool, std::size_t train_count,
                                                 std::size_t test_count, std::uint64_t seed) {
    if (train_count + test_count > pool.size()) {
        throw ConfigError("split: " + std::to_string(train_count) + " + " + std::to_string(test_count) +
                          " exceeds pool of " + std::to_string(pool.size()));
    }
    Rng rng(seed);
    const auto perm = sample_without_replacement(pool.size(), pool.size(), rng);
    TripletPool train, test;
    train.provenance = test.provenance = pool.provenance;
    const bool ordered = pool.orderings.size() == pool.size();
    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> used;
    for (std::size_t idx : perm) {
        if (train.size() == train_count && test.size() == test_count) break;
        if (!used.insert(question_key(pool.triplets[idx])).second) continue;
        TripletPool& dst = train.size() < train_count ? train : test;
        dst.triplets.push_back(pool.triplets[idx]);
        if (ordered) dst.orderings.push_back(pool.orderings[idx]);
    }
    if (train.size() < train_count || test.size() < test_count) {
        throw ConfigError("split: pool has too few distinct triplets");
    }
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_double(const std::string& s, std::size_t line) {
    if (s.empty()) throw ParseError("empty numeric field", line);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size()) throw ParseError("not a number: '" + s + "'", line);
    if (!std::isfinite(v)) throw ParseError("non-finite value '" + s + "'", line);
    return v;
}

/// Shortest text that reads back to exactly the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace detail

inline ObjectSet read_features(std::istream& in) {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) throw ParseError("missing header", lineno);
    const auto header = detail::split_csv_line(line);
    if (header.empty() || header[0] != "id") throw ParseError("header must start with 'id'", lineno);
    const bool has_asset = header.size() >= 2 && header.back() == "asset";
    const std::size_t d = header.size() - 1 - (has_asset ? 1 : 0);
    for (std::size_t c = 0; c < d; ++c) {
        if (header[c + 1] != "f" + std::to_string(c)) throw ParseError("expected column 'f" + std::to_string(c) + "'", lineno);
    }
    ObjectSet objects;
    std::vector<double> values;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ParseError("expected " + std::to_string(header.size()) + " fields, got " +
                             std::to_string(fields.size()), lineno);
        }
        if (fields[0].empty()) throw ParseError("empty id", lineno);
        if (!seen.insert(fields[0]).second) throw ValidationError("duplicate id '" + fields[0] + "'", lineno);
        objects.ids.push_back(fields[0]);
        for (std::size_t c = 0; c < d; ++c) values.push_back(detail::parse_double(fields[c + 1], lineno));
        if (has_asset) objects.assets.push_back(fields.back());
    }
    objects.features = DenseMatrix(objects.ids.size(), d, std::move(values));
    return objects;
}

inline ObjectSet load_features(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    return read_features(in);
}

inline void write_features(std::ostream& out, const ObjectSet& objects) {
    out << "id";
    for (std::size_t c = 0; c < objects.dim(); ++c) out << ",f" << c;
    const bool has_asset = !objects.assets.empty();
    if (has_asset) out << ",asset";
    out << '\n';
    for (std::size_t r = 0; r < objects.size(); ++r) {
        out << objects.ids[r];
        for (std::size_t c = 0; c < objects.dim(); ++c) out << ',' << detail::format_double(objects.features(r, c));
        if (has_asset) out << ',' << objects.assets[r];
        out << '\n';
    }
}

inline void save_features(const std::string& path, const ObjectSet& objects) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path + "'");
    write_features(out, objects);
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline TripletPool read_triplets(std::istream& in, const ObjectSet& objects) {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) throw ParseError("missing header", lineno);
    const auto header = detail::split_csv_line(line);
    const bool with_ordering = header.size() == 4;
    if (header.size() < 3 || header.size() > 4 || header[0] != "anchor_id" || header[1] != "j_id" ||
        header[2] != "k_id" || (with_ordering && header[3] != "ordering")) {
        throw ParseError("header must be 'anchor_id,j_id,k_id[,ordering]'", lineno);
    }
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < objects.ids.size(); ++i) index.emplace(objects.ids[i], i);
    TripletPool pool;
    pool.provenance = Provenance::loaded;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ParseError("expected " + std::to_string(header.size()) + " fields, got " +
                             std::to_string(fields.size()), lineno);
        }
        std::size_t ids[3];
        for (std::size_t c = 0; c < 3; ++c) {
            const auto it = index.find(fields[c]);
            if (it == index.end()) throw ValidationError("unknown object id '" + fields[c] + "'", lineno);
            ids[c] = it->second;
        }
        const Triplet t{ids[0], ids[1], ids[2]};
        if (t.anchor == t.first || t.anchor == t.second || t.first == t.second) {
            throw ValidationError("triplet repeats an object", lineno);
        }
        pool.triplets.push_back(t);
        if (with_ordering) {
            if (fields[3] == "j") pool.orderings.emplace_back(Ordering::j_closer);
            else if (fields[3] == "k") pool.orderings.emplace_back(Ordering::k_closer);
            else if (fields[3].empty()) pool.orderings.emplace_back(std::nullopt);
            else throw ParseError("ordering must be 'j' or 'k'", lineno);
        }
    }
    return pool;
}

inline TripletPool load_triplets(const std::string& path, const ObjectSet& objects) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    return read_triplets(in, objects);
}

inline void write_triplets(std::ostream& out, const TripletPool& pool, const ObjectSet& objects) {
    const bool with_ordering = pool.orderings.size() == pool.size();
    out << "anchor_id,j_id,k_id" << (with_ordering ? ",ordering" : "") << '\n';
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto& t = pool.triplets[i];
        out << objects.ids.at(t.anchor) << ',' << objects.ids.at(t.first) << ',' << objects.ids.at(t.second);
        if (with_ordering) {
            out << ',';
            if (pool.orderings[i]) out << (*pool.orderings[i] == Ordering::j_closer ? 'j' : 'k');
        }
        out << '\n';
    }
}

inline void save_triplets(const std::string& path, const TripletPool& pool, const ObjectSet& objects) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path + "'");
    write_triplets(out, pool, objects);
    if (!out) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Benchmark bundle

struct SyntheticSpec {
    std::size_t objects = 100;
    std::size_t dim = 10;
    std::size_t train_count = 20000;
    std::size_t test_count = 20000;
    double flip_rate = 0.2;
};

/// Objects, ground truth and a train/test split with train label noise.
struct Dataset {
    ObjectSet objects;
    std::optional<GroundTruthMetric> metric;
    TripletPool train;
    TripletPool test;
};

/**
 * The synthetic protocol: standard-normal objects, random Mahalanobis ground truth,
 * disjoint train/test triplets, exact-count flips on the train orderings.
 * Objects and metric depend on `data_seed`; the split and flips on `split_seed`.
 */
inline Dataset make_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t data_seed, std::uint64_t split_seed) {
    auto [objects, metric] = generate_synthetic(spec.objects, spec.dim, data_seed);
    const std::size_t want = spec.train_count + spec.test_count;
    const auto pool = sample_triplets(objects, metric, want, derive_seed(split_seed, 1), true);
    auto [train, test] = split(pool, spec.train_count, spec.test_count, derive_seed(split_seed, 2));
    train = flip_labels(std::move(train), spec.flip_rate, derive_seed(split_seed, 3));
    return {std::move(objects), std::move(metric), std::move(train), std::move(test)};
}

}  // namespace tal

#endif
