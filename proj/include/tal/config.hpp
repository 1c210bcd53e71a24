#ifndef TAL_CONFIG_HPP
#define TAL_CONFIG_HPP

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "eval.hpp"

/**
 * @file config.hpp
 *
 * @brief Experiment-grid config files (flat JSON objects).
 *
 * The grid is the cartesian product strategies x batch_sizes x initial_pools x noise_rates;
 * every other field is shared by all cells. Field names double as CLI flag names.
 */

namespace tal {

struct GridSpec {
    std::vector<std::string> strategies{"Random", "US", "US-Gradient"};
    std::vector<std::size_t> batch_sizes{200};
    std::vector<std::size_t> initial_pools;  ///< empty: l = b for every batch size
    std::vector<double> noise_rates{0.2};
    double mu = Mu::default_value;
    std::size_t rounds = 10;
    std::size_t epochs = 200;
    std::size_t minibatch_size = 32;
    double learning_rate = 1e-4;
    std::size_t oversample_size = 0;
    std::string euclidean_mode = "ordering_min";
    std::size_t seeds = 5;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::vector<std::size_t> hidden{10, 20, 10};
    // dataset
    std::size_t objects = 100;
    std::size_t dim = 10;
    std::size_t train_count = 20000;
    std::size_t test_count = 20000;
    std::optional<std::uint64_t> data_seed;  ///< unset means seed
    std::string features;
    std::string triplets;
};

inline EuclideanMode parse_euclidean_mode(const std::string& s) {
    if (s == "ordering_min") return EuclideanMode::ordering_min;
    if (s == "expected") return EuclideanMode::expected;
    throw ConfigError("unknown euclidean_mode '" + s + "'");
}

inline GridSpec grid_spec_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known{
        "strategies", "batch_sizes", "initial_pools", "noise_rates", "mu", "rounds", "epochs", "minibatch_size",
        "learning_rate", "oversample_size", "euclidean_mode", "seeds", "seed", "threads", "hidden", "objects", "dim",
        "train_count", "test_count", "data_seed", "features", "triplets"};
    if (!j.is_object()) throw ConfigError("grid config must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config field '" + key + "'");
    }
    GridSpec g;
    try {
        g.strategies = j.value("strategies", g.strategies);
        g.batch_sizes = j.value("batch_sizes", g.batch_sizes);
        g.initial_pools = j.value("initial_pools", g.initial_pools);
        g.noise_rates = j.value("noise_rates", g.noise_rates);
        g.mu = j.value("mu", g.mu);
        g.rounds = j.value("rounds", g.rounds);
        g.epochs = j.value("epochs", g.epochs);
        g.minibatch_size = j.value("minibatch_size", g.minibatch_size);
        g.learning_rate = j.value("learning_rate", g.learning_rate);
        g.oversample_size = j.value("oversample_size", g.oversample_size);
        g.euclidean_mode = j.value("euclidean_mode", g.euclidean_mode);
        g.seeds = j.value("seeds", g.seeds);
        g.seed = j.value("seed", g.seed);
        g.threads = j.value("threads", g.threads);
        g.hidden = j.value("hidden", g.hidden);
        g.objects = j.value("objects", g.objects);
        g.dim = j.value("dim", g.dim);
        g.train_count = j.value("train_count", g.train_count);
        g.test_count = j.value("test_count", g.test_count);
        if (j.contains("data_seed")) g.data_seed = j.at("data_seed").get<std::uint64_t>();
        g.features = j.value("features", g.features);
        g.triplets = j.value("triplets", g.triplets);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("grid config: ") + e.what());
    }
    return g;
}

inline ExperimentGrid to_grid(const GridSpec& spec) {
    ExperimentGrid grid;
    grid.seeds = spec.seeds;
    grid.base_seed = spec.seed;
    grid.threads = spec.threads;
    grid.hidden = spec.hidden;
    grid.dataset.synthetic = {spec.objects, spec.dim, spec.train_count, spec.test_count, 0.0};
    grid.dataset.data_seed = spec.data_seed.value_or(spec.seed);
    grid.dataset.features_path = spec.features;
    grid.dataset.triplets_path = spec.triplets;
    if (!spec.features.empty() && spec.triplets.empty()) throw ConfigError("'features' requires 'triplets'");
    const auto mode = parse_euclidean_mode(spec.euclidean_mode);
    (void)Mu(spec.mu);
    for (const auto& strategy : spec.strategies) {
        (void)parse_strategy_label(strategy);
        for (std::size_t b : spec.batch_sizes) {
            std::vector<std::optional<std::size_t>> pools(spec.initial_pools.begin(), spec.initial_pools.end());
            if (pools.empty()) pools.emplace_back();
            for (const auto& l : pools) {
                for (double noise : spec.noise_rates) {
                    GridCell cell;
                    cell.strategy = strategy;
                    cell.batch_size = b;
                    cell.initial_pool = l;
                    cell.noise_rate = noise;
                    cell.mu = spec.mu;
                    cell.rounds = spec.rounds;
                    cell.budget = {spec.epochs, spec.minibatch_size, spec.learning_rate};
                    cell.oversample_size = spec.oversample_size;
                    cell.euclidean_mode = mode;
                    grid.cells.push_back(cell);
                }
            }
        }
    }
    grid.validate();
    return grid;
}

}  // namespace tal

#endif
