#ifndef TAL_CHECKPOINT_HPP
#define TAL_CHECKPOINT_HPP

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "loop.hpp"
#include "nn.hpp"
#include "rng.hpp"

/**
 * @file checkpoint.hpp
 *
 * @brief Versioned JSON checkpoints of the loop state (model, L, U, pending batch, RNG).
 *
 * Doubles are written in shortest round-trip form, so a save/load cycle is bit-exact.
 */

namespace tal {

inline constexpr const char* checkpoint_format = "tal-loop-state";
inline constexpr int checkpoint_version = 1;

inline nlohmann::json to_json(const MLPParams& p) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : p.layers) {
        layers.push_back({{"rows", l.weights.rows()},
                          {"cols", l.weights.cols()},
                          {"weights", l.weights.values()},
                          {"biases", l.biases},
                          {"activation", l.activation == Activation::relu ? "relu" : "identity"}});
    }
    return layers;
}

inline MLPParams params_from_json(const nlohmann::json& j) {
    MLPParams p;
    for (const auto& l : j) {
        const std::string act = l.at("activation").get<std::string>();
        if (act != "relu" && act != "identity") throw ConfigError("unknown activation '" + act + "'");
        p.layers.push_back({DenseMatrix(l.at("rows").get<std::size_t>(), l.at("cols").get<std::size_t>(),
                                        l.at("weights").get<std::vector<double>>()),
                            l.at("biases").get<std::vector<double>>(),
                            act == "relu" ? Activation::relu : Activation::identity});
    }
    p.validate();
    return p;
}

inline nlohmann::json to_json(const LoopState& s) {
    nlohmann::json pool = nlohmann::json::array();
    for (const auto& t : s.pool) pool.push_back({t.anchor, t.first, t.second});
    nlohmann::json labeled = nlohmann::json::array();
    for (const auto& l : s.labeled) labeled.push_back({l.id, l.ordering == Ordering::j_closer ? "j" : "k"});
    return {{"format", checkpoint_format},
            {"version", checkpoint_version},
            {"round", s.round},
            {"initialized", s.initialized},
            {"pool", std::move(pool)},
            {"labeled", std::move(labeled)},
            {"unlabeled", s.unlabeled},
            {"pending", s.pending},
            {"model", to_json(s.model.params)},
            {"rng", rng_state(s.rng)}};
}

inline LoopState loop_state_from_json(const nlohmann::json& j) {
    if (!j.is_object() || j.value("format", "") != checkpoint_format) throw ConfigError("not a loop-state checkpoint");
    if (j.value("version", 0) != checkpoint_version) {
        throw ConfigError("unsupported checkpoint version " + std::to_string(j.value("version", 0)));
    }
    LoopState s;
    try {
        s.round = j.at("round").get<std::size_t>();
        s.initialized = j.at("initialized").get<bool>();
        for (const auto& t : j.at("pool")) {
            s.pool.push_back({t.at(0).get<std::size_t>(), t.at(1).get<std::size_t>(), t.at(2).get<std::size_t>()});
        }
        for (const auto& l : j.at("labeled")) {
            const auto o = l.at(1).get<std::string>();
            if (o != "j" && o != "k") throw ConfigError("bad ordering in checkpoint");
            s.labeled.push_back({l.at(0).get<std::size_t>(), o == "j" ? Ordering::j_closer : Ordering::k_closer});
        }
        s.unlabeled = j.at("unlabeled").get<std::vector<std::size_t>>();
        s.pending = j.at("pending").get<std::vector<std::size_t>>();
        s.model = EmbeddingModel(params_from_json(j.at("model")));
        s.rng = rng_from_state(j.at("rng").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed checkpoint: ") + e.what());
    }
    auto check = [&](std::size_t id) {
        if (id >= s.pool.size()) throw ConfigError("checkpoint references triplet id out of range");
    };
    for (auto id : s.unlabeled) check(id);
    for (auto id : s.pending) check(id);
    for (const auto& l : s.labeled) check(l.id);
    return s;
}

/// Writes via a temporary file and rename, so readers never see a partial file.
inline void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp + "'");
        out << j.dump() << '\n';
        out.flush();
        if (!out) throw IoError("write failed for '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp + "': " + ec.message());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt JSON in '" + path.string() + "': " + e.what());
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const LoopState& s) { write_json_atomic(path, to_json(s)); }

inline LoopState load_checkpoint(const std::filesystem::path& path) { return loop_state_from_json(read_json(path)); }

}  // namespace tal

#endif
