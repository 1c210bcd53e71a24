// tal: command-line front end for triplet active learning.
//
//   tal generate --out DIR [--objects N --dim D --train_count T --test_count T --noise_rate R --seed S]
//   tal run      [--config grid.json] [--<field> value ...] --out curves.csv
//   tal evaluate --checkpoint ckpt.json --features features.csv --triplets test.csv
//   tal serve    --root DIR [--host H --port P]

#include <csignal>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "tal/checkpoint.hpp"
#include "tal/config.hpp"
#include "tal/data.hpp"
#include "tal/eval.hpp"
#include "tal/http.hpp"
#include "tal/service.hpp"

namespace fs = std::filesystem;

namespace {

struct GenerateArgs {
    tal::SyntheticSpec spec;
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> data_seed;  // unset means seed
    std::string out = ".";
};

void save_metric(const std::string& path, const tal::GroundTruthMetric& metric) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw tal::IoError("cannot write '" + path + "'");
    const auto& m = metric.matrix;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? "," : "") << tal::detail::format_double(m(r, c));
        out << '\n';
    }
}

int cmd_generate(const GenerateArgs& a) {
    fs::create_directories(a.out);
    const auto ds = tal::make_synthetic_dataset(a.spec, a.data_seed.value_or(a.seed), a.seed);
    const fs::path dir(a.out);
    tal::save_features((dir / "features.csv").string(), ds.objects);
    tal::save_triplets((dir / "train.csv").string(), ds.train, ds.objects);
    tal::save_triplets((dir / "test.csv").string(), ds.test, ds.objects);
    save_metric((dir / "metric.csv").string(), *ds.metric);
    std::cout << "wrote " << ds.objects.size() << " objects, " << ds.train.size() << " train and " << ds.test.size()
              << " test triplets to " << dir.string() << '\n';
    return 0;
}

// Each grid field gets a flag of the same name. Flags are parsed into `flags`, then copied over
// the config-file values for every flag that was actually given.
class GridFlags {
public:
    void bind(CLI::App& app) {
        add(app, "strategies", flags.strategies, &tal::GridSpec::strategies, "strategy labels, e.g. Random,US,US-Gradient");
        add(app, "batch_sizes", flags.batch_sizes, &tal::GridSpec::batch_sizes, "batch sizes b");
        add(app, "initial_pools", flags.initial_pools, &tal::GridSpec::initial_pools, "initial pool sizes l");
        add(app, "noise_rates", flags.noise_rates, &tal::GridSpec::noise_rates, "fractions of flipped train labels");
        add(app, "mu", flags.mu, &tal::GridSpec::mu, "probability regularizer");
        add(app, "rounds", flags.rounds, &tal::GridSpec::rounds, "acquisition rounds M");
        add(app, "epochs", flags.epochs, &tal::GridSpec::epochs, "training epochs per round");
        add(app, "minibatch_size", flags.minibatch_size, &tal::GridSpec::minibatch_size, "0 = full batch");
        add(app, "learning_rate", flags.learning_rate, &tal::GridSpec::learning_rate, "Adam learning rate");
        add(app, "oversample_size", flags.oversample_size, &tal::GridSpec::oversample_size, "candidate count k, 0 = 2b");
        add(app, "euclidean_mode", flags.euclidean_mode, &tal::GridSpec::euclidean_mode, "ordering_min or expected");
        add(app, "seeds", flags.seeds, &tal::GridSpec::seeds, "runs per cell");
        add(app, "seed", flags.seed, &tal::GridSpec::seed, "base seed; run s uses seed + s");
        add(app, "threads", flags.threads, &tal::GridSpec::threads, "worker threads");
        add(app, "hidden", flags.hidden, &tal::GridSpec::hidden, "layer widths after the input");
        add(app, "objects", flags.objects, &tal::GridSpec::objects, "synthetic object count");
        add(app, "dim", flags.dim, &tal::GridSpec::dim, "synthetic feature dimension");
        add(app, "train_count", flags.train_count, &tal::GridSpec::train_count, "train pool size");
        add(app, "test_count", flags.test_count, &tal::GridSpec::test_count, "test pool size");
        add(app, "data_seed", flags.data_seed, &tal::GridSpec::data_seed, "seed of the synthetic objects and metric (default: seed)");
        add(app, "features", flags.features, &tal::GridSpec::features, "feature CSV (instead of synthetic data)");
        add(app, "triplets", flags.triplets, &tal::GridSpec::triplets, "labeled triplet CSV to split");
    }

    void apply(tal::GridSpec& spec) const {
        for (const auto& fn : setters_) fn(spec);
    }

private:
    template <typename T>
    void add(CLI::App& app, const std::string& name, T& target, T tal::GridSpec::*field, const std::string& help) {
        CLI::Option* opt = app.add_option("--" + name, target, help);
        if constexpr (requires { target.push_back(target.front()); }) opt->delimiter(',');
        setters_.push_back([this, opt, field](tal::GridSpec& spec) {
            if (opt->count() > 0) spec.*field = flags.*field;
        });
    }

    tal::GridSpec flags;
    std::vector<std::function<void(tal::GridSpec&)>> setters_;
};

struct RunArgs {
    std::string config;
    std::string out = "curves.csv";
    std::string selections;
    std::string checkpoint_dir;
    bool no_timing = false;
};

void write_selections(const std::string& path, const tal::ExperimentGrid& grid, const tal::GridResult& result) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& log : result.selections) {
        const auto& cell = grid.cells[log.cell];
        runs.push_back({{"strategy", cell.strategy},
                        {"batch_size", cell.batch_size},
                        {"noise_rate", cell.noise_rate},
                        {"seed", log.seed},
                        {"rounds", log.rounds}});
    }
    tal::write_json_atomic(path, runs);
}

int cmd_run(const RunArgs& a, const GridFlags& flags) {
    tal::GridSpec spec;
    if (!a.config.empty()) spec = tal::grid_spec_from_json(tal::read_json(a.config));
    flags.apply(spec);
    auto grid = tal::to_grid(spec);
    grid.keep_final_states = !a.checkpoint_dir.empty();
    std::cerr << "running " << grid.cells.size() << " cells x " << grid.seeds << " seeds\n";
    const auto result = tal::run_grid(grid);
    tal::emit_curves(result.records, a.out, !a.no_timing);
    if (!a.selections.empty()) write_selections(a.selections, grid, result);
    if (!a.checkpoint_dir.empty()) {
        fs::create_directories(a.checkpoint_dir);
        for (std::size_t i = 0; i < result.final_states.size(); ++i) {
            const auto& log = result.selections[i];
            const auto& cell = grid.cells[log.cell];
            const auto name = cell.strategy + "_b" + std::to_string(cell.batch_size) + "_l" +
                              std::to_string(cell.effective_initial_pool()) + "_noise" +
                              tal::detail::format_double(cell.noise_rate) + "_seed" + std::to_string(log.seed) + ".json";
            tal::save_checkpoint(fs::path(a.checkpoint_dir) / name, result.final_states[i]);
        }
    }
    for (const auto& f : result.failures) {
        std::cerr << "run failed (cell " << f.cell << ", seed " << f.seed << "): " << f.message << '\n';
    }
    for (const auto& cell : grid.cells) {
        const std::size_t l = cell.effective_initial_pool();
        const auto label = tal::strategy_label(tal::parse_strategy_label(cell.strategy));
        const auto rows = tal::summarize(result.records, label, cell.batch_size, l, cell.noise_rate);
        if (rows.empty()) continue;
        const auto& last = rows.back();
        std::cout << std::left << std::setw(16) << label << " b=" << cell.batch_size << " l=" << l
                  << " noise=" << cell.noise_rate << "  final TGA " << std::fixed << std::setprecision(4) << last.mean
                  << " +/- " << last.stddev << " (" << last.count << " seeds)\n"
                  << std::defaultfloat;
    }
    return result.failures.empty() ? 0 : 1;
}

struct EvaluateArgs {
    std::string checkpoint;
    std::string features;
    std::string triplets;
};

int cmd_evaluate(const EvaluateArgs& a) {
    const auto state = tal::load_checkpoint(a.checkpoint);
    const auto objects = tal::load_features(a.features);
    objects.validate();
    const auto test = tal::load_triplets(a.triplets, objects);
    if (!test.has_orderings()) throw tal::ContractError("evaluation triplets must carry orderings");
    const double tga = tal::compute_tga(state.model, objects.features, test);
    std::cout << tal::detail::format_double(tga) << '\n';
    return 0;
}

struct ServeArgs {
    std::string root = "sessions";
    std::string host = "127.0.0.1";
    int port = 8080;
};

httplib::Server* running_server = nullptr;

int cmd_serve(const ServeArgs& a) {
    fs::create_directories(a.root);
    tal::AnnotationService service(a.root);
    httplib::Server server;
    tal::mount(server, service);
    running_server = &server;
    std::signal(SIGINT, [](int) { running_server->stop(); });
    std::signal(SIGTERM, [](int) { running_server->stop(); });
    std::cerr << "serving " << service.ids().size() << " recovered session(s) on " << a.host << ':' << a.port << '\n';
    if (!server.listen(a.host, a.port)) {
        std::cerr << "cannot listen on " << a.host << ':' << a.port << '\n';
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Triplet active learning: data generation, experiment grids, evaluation and annotation service"};
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* generate = app.add_subcommand("generate", "write a synthetic benchmark dataset as CSV");
    generate->add_option("--out", gen.out, "output directory");
    generate->add_option("--objects", gen.spec.objects, "object count");
    generate->add_option("--dim", gen.spec.dim, "feature dimension");
    generate->add_option("--train_count", gen.spec.train_count, "train triplets");
    generate->add_option("--test_count", gen.spec.test_count, "test triplets");
    generate->add_option("--noise_rate", gen.spec.flip_rate, "fraction of flipped train labels");
    generate->add_option("--data_seed", gen.data_seed, "seed of objects and metric (default: seed)");
    generate->add_option("--seed", gen.seed, "seed of sampling, split and flips");

    RunArgs run_args;
    GridFlags grid_flags;
    auto* run = app.add_subcommand("run", "run an experiment grid and write learning curves");
    run->add_option("--config", run_args.config, "grid config (JSON)");
    run->add_option("--out", run_args.out, "learning-curve CSV");
    run->add_option("--selections", run_args.selections, "write the ids selected per round (JSON)");
    run->add_option("--checkpoint_dir", run_args.checkpoint_dir, "save every run's final loop state here");
    run->add_flag("--no_timing", run_args.no_timing, "write 0 in the seconds column");
    grid_flags.bind(*run);

    EvaluateArgs eval_args;
    auto* evaluate = app.add_subcommand("evaluate", "print the TGA of a checkpoint on labeled triplets");
    evaluate->add_option("--checkpoint", eval_args.checkpoint, "checkpoint JSON")->required();
    evaluate->add_option("--features", eval_args.features, "feature CSV")->required();
    evaluate->add_option("--triplets", eval_args.triplets, "labeled triplet CSV")->required();

    ServeArgs serve_args;
    auto* serve = app.add_subcommand("serve", "run the annotation service");
    serve->add_option("--root", serve_args.root, "session directory");
    serve->add_option("--host", serve_args.host, "bind address");
    serve->add_option("--port", serve_args.port, "port");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*generate) return cmd_generate(gen);
        if (*run) return cmd_run(run_args, grid_flags);
        if (*evaluate) return cmd_evaluate(eval_args);
        if (*serve) return cmd_serve(serve_args);
    } catch (const tal::ParseError& e) {
        std::cerr << "error: " << e.what() << " (line " << e.line() << ")\n";
        return 2;
    } catch (const tal::ValidationError& e) {
        std::cerr << "error: " << e.what() << " (line " << e.line() << ")\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
