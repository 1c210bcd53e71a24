#ifndef TAL_EVAL_HPP
#define TAL_EVAL_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "acquisition.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "loop.hpp"
#include "metric.hpp"

/**
 * @file eval.hpp
 *
 * @brief Triplet generalization accuracy, experiment grids and learning-curve CSVs.
 */

namespace tal {

/// Difference of squared distances below which the model is considered tied (half credit).
inline constexpr double tga_tie_tolerance = 1e-12;

/**
 * Fraction of test triplets whose stored ordering agrees with the sign of
 * d2(i, k) - d2(i, j) under the table's embeddings.
 */
inline double compute_tga(const EmbeddingTable& table, const TripletPool& test) {
    if (test.size() == 0) throw ContractError("TGA needs a non-empty test pool");
    if (test.orderings.size() != test.size()) throw ContractError("TGA needs test orderings");
    double credit = 0.0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto& t = test.triplets[i];
        if (!test.orderings[i]) throw ContractError("test triplet " + std::to_string(i) + " has no ordering");
        validate_triplet(t, table.size());
        const auto ei = table.embedding(t.anchor);
        const double diff = squared_distance(ei, table.embedding(t.second)) - squared_distance(ei, table.embedding(t.first));
        if (std::abs(diff) < tga_tie_tolerance) {
            credit += 0.5;
        } else if ((diff > 0.0) == (*test.orderings[i] == Ordering::j_closer)) {
            credit += 1.0;
        }
    }
    return credit / static_cast<double>(test.size());
}

inline double compute_tga(const EmbeddingModel& model, const DenseMatrix& features, const TripletPool& test) {
    return compute_tga(embed_all(model, features), test);
}

/// TGA of an arbitrary squared-distance function (e.g. the ground-truth metric).
template <typename SqDist>
double compute_tga_with(SqDist&& d2, const TripletPool& test) {
    if (test.size() == 0) throw ContractError("TGA needs a non-empty test pool");
    double credit = 0.0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto& t = test.triplets[i];
        const double diff = d2(t.anchor, t.second) - d2(t.anchor, t.first);
        if (std::abs(diff) < tga_tie_tolerance) credit += 0.5;
        else if ((diff > 0.0) == (test.orderings.at(i).value() == Ordering::j_closer)) credit += 1.0;
    }
    return credit / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------
// Records and CSV

struct TGARecord {
    std::string strategy;
    std::size_t batch_size = 0;
    std::size_t initial_pool = 0;
    double noise_rate = 0.0;
    std::uint64_t seed = 0;
    std::size_t round = 0;
    std::size_t labeled_count = 0;
    double tga = 0.0;
    double seconds = 0.0;

    friend bool operator==(const TGARecord&, const TGARecord&) = default;
};

inline constexpr const char* curves_header =
    "strategy,batch_size,initial_pool,noise_rate,seed,round,labeled_count,tga,seconds";

/// Writes records as CSV. With `include_timing = false` the seconds column is written as 0 so
/// that repeated runs produce byte-identical files.
inline void write_curves(std::ostream& out, std::span<const TGARecord> records, bool include_timing = true) {
    out << curves_header << '\n';
    for (const auto& r : records) {
        out << r.strategy << ',' << r.batch_size << ',' << r.initial_pool << ',' << detail::format_double(r.noise_rate)
            << ',' << r.seed << ',' << r.round << ',' << r.labeled_count << ',' << detail::format_double(r.tga) << ','
            << detail::format_double(include_timing ? r.seconds : 0.0) << '\n';
    }
}

inline void emit_curves(std::span<const TGARecord> records, const std::string& path, bool include_timing = true) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    write_curves(out, records, include_timing);
    out.flush();
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::vector<TGARecord> read_curves(std::istream& in) {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line) || line != curves_header) throw ParseError("unexpected curve header", lineno);
    std::vector<TGARecord> out;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 9) throw ParseError("expected 9 fields", lineno);
        TGARecord r;
        r.strategy = f[0];
        try {
            r.batch_size = std::stoull(f[1]);
            r.initial_pool = std::stoull(f[2]);
            r.seed = std::stoull(f[4]);
            r.round = std::stoull(f[5]);
            r.labeled_count = std::stoull(f[6]);
        } catch (const std::exception&) {
            throw ParseError("bad integer field", lineno);
        }
        r.noise_rate = detail::parse_double(f[3], lineno);
        r.tga = detail::parse_double(f[7], lineno);
        r.seconds = detail::parse_double(f[8], lineno);
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<TGARecord> load_curves(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    return read_curves(in);
}

// ---------------------------------------------------------------------------
// Grids

/// One experimental condition, run for every seed of the grid.
struct GridCell {
    std::string strategy = "US-Gradient";  ///< see strategy_label
    std::size_t batch_size = 200;
    std::optional<std::size_t> initial_pool;  ///< unset means batch_size
    double noise_rate = 0.2;               ///< fraction of train orderings flipped
    double mu = Mu::default_value;
    std::size_t rounds = 10;
    TrainBudget budget;
    std::size_t oversample_size = 0;       ///< 0 means 2 * batch_size
    EuclideanMode euclidean_mode = EuclideanMode::ordering_min;

    std::size_t effective_initial_pool() const { return initial_pool.value_or(batch_size); }
};

/// Where the objects and triplets come from.
struct DatasetBinding {
    SyntheticSpec synthetic;
    std::uint64_t data_seed = 0;    ///< objects and ground truth; fixed across seeds
    std::string features_path;      ///< when set, load instead of generating
    std::string triplets_path;      ///< labeled triplets to split into train/test
};

struct ExperimentGrid {
    std::vector<GridCell> cells;
    std::size_t seeds = 5;
    std::uint64_t base_seed = 0;
    std::vector<std::size_t> hidden{10, 20, 10};
    DatasetBinding dataset;
    unsigned threads = 1;
    bool keep_final_states = false;  ///< retain each run's final loop state in the result

    void validate() const {
        if (cells.empty()) throw ConfigError("grid has no cells");
        if (seeds < 1) throw ConfigError("grid needs at least one seed");
    }
};

/// Seed used for run `s` (0-based) of a grid.
inline std::uint64_t run_seed(const ExperimentGrid& grid, std::size_t s) { return grid.base_seed + s; }

/// Dataset of one run: the split (and for synthetic data the label flips) depend on the run seed.
inline Dataset build_dataset(const DatasetBinding& binding, double noise_rate, std::uint64_t seed) {
    if (binding.features_path.empty()) {
        SyntheticSpec spec = binding.synthetic;
        spec.flip_rate = noise_rate;
        return make_synthetic_dataset(spec, binding.data_seed, seed);
    }
    Dataset ds;
    ds.objects = load_features(binding.features_path);
    ds.objects.validate();
    const auto pool = load_triplets(binding.triplets_path, ds.objects);
    if (!pool.has_orderings()) throw ContractError("loaded triplets must carry orderings");
    auto [train, test] = split(pool, binding.synthetic.train_count, binding.synthetic.test_count, derive_seed(seed, 2));
    ds.train = flip_labels(std::move(train), noise_rate, derive_seed(seed, 3));
    ds.test = std::move(test);
    return ds;
}

inline ExperimentConfig experiment_config(const GridCell& cell, const ExperimentGrid& grid, std::uint64_t seed) {
    ExperimentConfig cfg;
    cfg.acquisition = parse_strategy_label(cell.strategy);
    cfg.acquisition.batch_size = cell.batch_size;
    cfg.acquisition.oversample_size = cell.oversample_size;
    cfg.acquisition.mu = Mu(cell.mu);
    cfg.acquisition.euclidean_mode = cell.euclidean_mode;
    cfg.budget = cell.budget;
    cfg.initial_pool = cell.initial_pool;
    cfg.rounds = cell.rounds;
    cfg.hidden = grid.hidden;
    cfg.seed = seed;
    return cfg;
}

/// Records of one run, in round order.
inline std::vector<TGARecord> records_for(const GridCell& cell, std::uint64_t seed, const ExperimentResult& result) {
    std::vector<TGARecord> out;
    const std::size_t l = cell.effective_initial_pool();
    const std::string label = strategy_label(parse_strategy_label(cell.strategy));
    for (const auto& r : result.curve) {
        out.push_back({label, cell.batch_size, l, cell.noise_rate, seed, r.round, r.labeled_count, r.tga, r.seconds});
    }
    return out;
}

/// Runs one (cell, seed) experiment end to end with the stored-label oracle.
inline ExperimentResult run_cell(const GridCell& cell, const ExperimentGrid& grid, std::uint64_t seed) {
    const Dataset ds = build_dataset(grid.dataset, cell.noise_rate, seed);
    StoredLabelOracle oracle(ds.train);
    const auto cfg = experiment_config(cell, grid, seed);
    const DenseMatrix& features = ds.objects.features;
    const TripletPool& test = ds.test;
    return run_experiment(features, ds.train.triplets, cfg, oracle,
                          [&](const EmbeddingModel& m) { return compute_tga(m, features, test); });
}

struct RunFailure {
    std::size_t cell = 0;
    std::uint64_t seed = 0;
    std::string message;
};

/// Ids selected per round for one run, kept for auditing.
struct SelectionLog {
    std::size_t cell = 0;
    std::uint64_t seed = 0;
    std::vector<std::vector<std::size_t>> rounds;
};

struct GridResult {
    std::vector<TGARecord> records;  ///< ordered by (cell, seed, round)
    std::vector<SelectionLog> selections;
    std::vector<LoopState> final_states;  ///< parallel to selections when keep_final_states is set
    std::vector<RunFailure> failures;
};

/// Every (cell, seed) run; runs may execute on several threads, output order is fixed.
inline GridResult run_grid(const ExperimentGrid& grid) {
    grid.validate();
    const std::size_t runs = grid.cells.size() * grid.seeds;
    std::vector<std::vector<TGARecord>> per_run(runs);
    std::vector<SelectionLog> logs(runs);
    std::vector<std::optional<std::string>> errors(runs);
    std::vector<LoopState> states(grid.keep_final_states ? runs : 0);
    std::size_t next = 0;
    std::mutex mu;
    auto worker = [&] {
        for (;;) {
            std::size_t r;
            {
                std::lock_guard lock(mu);
                if (next >= runs) return;
                r = next++;
            }
            const std::size_t c = r / grid.seeds;
            const std::uint64_t seed = run_seed(grid, r % grid.seeds);
            logs[r].cell = c;
            logs[r].seed = seed;
            try {
                const auto result = run_cell(grid.cells[c], grid, seed);
                per_run[r] = records_for(grid.cells[c], seed, result);
                for (const auto& rec : result.curve) logs[r].rounds.push_back(rec.selected);
                if (grid.keep_final_states) states[r] = result.final_state;
            } catch (const std::exception& e) {
                errors[r] = e.what();
            }
        }
    };
    const unsigned nthreads = std::max(1u, std::min<unsigned>(grid.threads, static_cast<unsigned>(runs)));
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned i = 0; i < nthreads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    GridResult out;
    for (std::size_t r = 0; r < runs; ++r) {
        if (errors[r]) {
            out.failures.push_back({r / grid.seeds, run_seed(grid, r % grid.seeds), *errors[r]});
            continue;
        }
        out.records.insert(out.records.end(), per_run[r].begin(), per_run[r].end());
        out.selections.push_back(std::move(logs[r]));
        if (grid.keep_final_states) out.final_states.push_back(std::move(states[r]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Summary statistics

struct RoundSummary {
    std::size_t round = 0;
    std::size_t count = 0;
    double mean = 0.0;
    double stddev = 0.0;  ///< sample standard deviation (n - 1); 0 for a single seed
};

/// Welford accumulation of TGA per round across seeds for records matching `strategy`, `batch_size`, `initial_pool`, `noise_rate`.
inline std::vector<RoundSummary> summarize(std::span<const TGARecord> records, const std::string& strategy,
                                           std::size_t batch_size, std::size_t initial_pool, double noise_rate) {
    struct Acc {
        std::size_t n = 0;
        double mean = 0.0, m2 = 0.0;
    };
    std::map<std::size_t, Acc> acc;
    for (const auto& r : records) {
        if (r.strategy != strategy || r.batch_size != batch_size || r.initial_pool != initial_pool ||
            r.noise_rate != noise_rate) {
            continue;
        }
        auto& a = acc[r.round];
        ++a.n;
        const double delta = r.tga - a.mean;
        a.mean += delta / static_cast<double>(a.n);
        a.m2 += delta * (r.tga - a.mean);
    }
    std::vector<RoundSummary> out;
    for (const auto& [round, a] : acc) {
        out.push_back({round, a.n, a.mean, a.n > 1 ? std::sqrt(a.m2 / static_cast<double>(a.n - 1)) : 0.0});
    }
    return out;
}

}  // namespace tal

#endif
