#ifndef TAL_SERVICE_HPP
#define TAL_SERVICE_HPP

#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "eval.hpp"
#include "loop.hpp"

/**
 * @file service.hpp
 *
 * @brief Human-in-the-loop annotation sessions.
 *
 * A session owns one active-learning loop whose oracle is a person. The current batch
 * (the initial pool first, then one batch per round) is exposed as pending queries.
 * Every answer is appended to `labels.ndjson` and fsync'ed before it is acknowledged.
 * Once the batch is complete the model is retrained on a worker thread and the next batch
 * is selected. `checkpoint.json` captures the state at the start of each batch, so after a
 * restart the state is the checkpoint plus the log entries of the current batch.
 *
 * On-disk layout under the service root: `<root>/<session id>/{config.json, checkpoint.json, labels.ndjson}`.
 */

namespace tal {

class NotFound : public Error {
public:
    using Error::Error;
};

class Conflict : public Error {
public:
    using Error::Error;
};

enum class SessionStatus { awaiting_labels, training, finished };

inline std::string_view to_string(SessionStatus s) {
    switch (s) {
        case SessionStatus::awaiting_labels: return "awaiting_labels";
        case SessionStatus::training: return "training";
        case SessionStatus::finished: return "finished";
    }
    return "?";
}

inline SessionStatus parse_session_status(std::string_view s) {
    if (s == "awaiting_labels") return SessionStatus::awaiting_labels;
    if (s == "training") return SessionStatus::training;
    if (s == "finished") return SessionStatus::finished;
    throw ConfigError("unknown session status '" + std::string(s) + "'");
}

/// Everything needed to (re)build a session. Serialized verbatim as config.json.
struct SessionConfig {
    std::string id;
    std::uint64_t seed = 0;
    std::string strategy = "US-Gradient";
    std::size_t initial_pool = 5;
    std::size_t batch_size = 5;
    std::size_t rounds = 2;
    double mu = Mu::default_value;
    TrainBudget budget{50, 0, 1e-3};
    std::vector<std::size_t> hidden{10, 20, 10};
    // dataset
    std::string features_path;  ///< empty: synthetic objects
    std::string triplets_path;  ///< optional candidate triplets (orderings ignored)
    std::size_t objects = 20;
    std::size_t dim = 4;
    std::uint64_t data_seed = 0;
    std::size_t pool_size = 500;  ///< synthetic candidate triplets
    std::size_t test_count = 0;   ///< synthetic ground-truth test triplets; 0 disables TGA
};

inline nlohmann::json to_json(const SessionConfig& c) {
    return {{"id", c.id},
            {"seed", c.seed},
            {"strategy", c.strategy},
            {"initial_pool", c.initial_pool},
            {"batch_size", c.batch_size},
            {"rounds", c.rounds},
            {"mu", c.mu},
            {"epochs", c.budget.epochs},
            {"minibatch_size", c.budget.minibatch_size},
            {"learning_rate", c.budget.learning_rate},
            {"hidden", c.hidden},
            {"features_path", c.features_path},
            {"triplets_path", c.triplets_path},
            {"objects", c.objects},
            {"dim", c.dim},
            {"data_seed", c.data_seed},
            {"pool_size", c.pool_size},
            {"test_count", c.test_count}};
}

inline SessionConfig session_config_from_json(const nlohmann::json& j) {
    SessionConfig c;
    try {
        c.id = j.value("id", c.id);
        c.seed = j.value("seed", c.seed);
        c.strategy = j.value("strategy", c.strategy);
        c.initial_pool = j.value("initial_pool", c.initial_pool);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.rounds = j.value("rounds", c.rounds);
        c.mu = j.value("mu", c.mu);
        c.budget.epochs = j.value("epochs", c.budget.epochs);
        c.budget.minibatch_size = j.value("minibatch_size", c.budget.minibatch_size);
        c.budget.learning_rate = j.value("learning_rate", c.budget.learning_rate);
        c.hidden = j.value("hidden", c.hidden);
        c.features_path = j.value("features_path", c.features_path);
        c.triplets_path = j.value("triplets_path", c.triplets_path);
        c.objects = j.value("objects", c.objects);
        c.dim = j.value("dim", c.dim);
        c.data_seed = j.value("data_seed", c.data_seed);
        c.pool_size = j.value("pool_size", c.pool_size);
        c.test_count = j.value("test_count", c.test_count);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("session config: ") + e.what());
    }
    if (!c.id.empty() && c.id.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-") !=
                             std::string::npos) {
        throw ConfigError("session id may only contain letters, digits, '-' and '_'");
    }
    (void)Mu(c.mu);
    c.budget.validate();
    if (c.batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (c.hidden.empty()) throw ConfigError("hidden layer list must not be empty");
    return c;
}

struct LabelLogEntry {
    std::string session_id;
    std::string query_id;
    Triplet triplet;
    Ordering ordering = Ordering::j_closer;
    std::int64_t timestamp = 0;  ///< strictly increasing within a session, nanoseconds
};

inline nlohmann::json to_json(const LabelLogEntry& e) {
    return {{"session_id", e.session_id},
            {"query_id", e.query_id},
            {"triplet", {e.triplet.anchor, e.triplet.first, e.triplet.second}},
            {"ordering", e.ordering == Ordering::j_closer ? "j" : "k"},
            {"timestamp", e.timestamp}};
}

inline LabelLogEntry label_entry_from_json(const nlohmann::json& j) {
    LabelLogEntry e;
    e.session_id = j.at("session_id").get<std::string>();
    e.query_id = j.at("query_id").get<std::string>();
    const auto& t = j.at("triplet");
    e.triplet = {t.at(0).get<std::size_t>(), t.at(1).get<std::size_t>(), t.at(2).get<std::size_t>()};
    const auto o = j.at("ordering").get<std::string>();
    if (o != "j" && o != "k") throw ConfigError("bad ordering in label log");
    e.ordering = o == "j" ? Ordering::j_closer : Ordering::k_closer;
    e.timestamp = j.at("timestamp").get<std::int64_t>();
    return e;
}

/// Append-only newline-delimited JSON, fsync'ed per entry.
class LabelLog {
public:
    explicit LabelLog(std::filesystem::path path) : path_(std::move(path)) {
        fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
        if (fd_ < 0) throw IoError("cannot open label log '" + path_.string() + "'");
    }
    LabelLog(const LabelLog&) = delete;
    LabelLog& operator=(const LabelLog&) = delete;
    ~LabelLog() {
        if (fd_ >= 0) ::close(fd_);
    }

    void append(const LabelLogEntry& e) {
        const std::string line = to_json(e).dump() + "\n";
        std::size_t off = 0;
        while (off < line.size()) {
            const auto n = ::write(fd_, line.data() + off, line.size() - off);
            if (n < 0) throw IoError("label log write failed");
            off += static_cast<std::size_t>(n);
        }
        if (::fsync(fd_) != 0) throw IoError("label log fsync failed");
    }

    /// Every complete entry; a torn final line (crash during write) is ignored.
    static std::vector<LabelLogEntry> read_all(const std::filesystem::path& path) {
        std::vector<LabelLogEntry> out;
        std::ifstream in(path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            try {
                out.push_back(label_entry_from_json(nlohmann::json::parse(line)));
            } catch (const std::exception&) {
                if (in.peek() == EOF) break;
                throw;
            }
        }
        return out;
    }

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

struct PendingQuery {
    std::string query_id;
    std::size_t triplet_id = 0;
    Triplet triplet;
};

struct SessionSnapshot {
    std::string session_id;
    SessionStatus status = SessionStatus::awaiting_labels;
    std::size_t round = 0;
    std::size_t labeled_count = 0;
    std::size_t remaining = 0;
    std::optional<double> tga;       ///< latest, only with a test pool
    std::vector<double> tga_curve;   ///< one entry per trained model
    std::string error;               ///< last retraining failure, if any
};

class AnnotationSession {
public:
    /// Builds a new session under `root`, persisting config and initial checkpoint.
    static std::unique_ptr<AnnotationSession> create(const std::filesystem::path& root, SessionConfig config) {
        if (config.id.empty()) throw ConfigError("session id required");
        auto dir = root / config.id;
        if (std::filesystem::exists(dir / "config.json")) throw Conflict("session '" + config.id + "' exists");
        // building the dataset validates the config before anything is written
        auto s = std::unique_ptr<AnnotationSession>(new AnnotationSession(dir, std::move(config)));
        std::filesystem::create_directories(dir);
        write_json_atomic(dir / "config.json", to_json(s->config_));
        s->state_ = make_loop_state(s->pool_.triplets, architecture_for(s->objects_.dim(), s->config_.hidden),
                                    s->config_.seed);
        begin_initial_pool(s->state_, s->config_.initial_pool);
        s->queries_from_pending();
        s->persist_checkpoint();
        s->log_ = std::make_unique<LabelLog>(dir / "labels.ndjson");
        if (s->state_.pending.empty()) {
            std::lock_guard lock(s->mu_);
            s->start_training_locked();
        }
        return s;
    }

    /// Rebuilds a session from its directory: checkpoint, then the current batch's log entries.
    static std::unique_ptr<AnnotationSession> recover(const std::filesystem::path& dir) {
        auto config = session_config_from_json(read_json(dir / "config.json"));
        auto s = std::unique_ptr<AnnotationSession>(new AnnotationSession(dir, std::move(config)));
        const auto ck = read_json(dir / "checkpoint.json");
        s->state_ = loop_state_from_json(ck.at("state"));
        s->status_ = parse_session_status(ck.at("status").get<std::string>());
        s->tga_curve_ = ck.at("tga_curve").get<std::vector<double>>();
        s->batch_round_ = ck.at("batch_round").get<std::size_t>();
        s->queries_from_pending();
        for (const auto& e : LabelLog::read_all(dir / "labels.ndjson")) {
            if (e.session_id != s->config_.id) continue;
            for (const auto& q : s->queries_) {
                if (q.query_id == e.query_id && q.triplet == e.triplet) s->answers_.emplace(e.query_id, e.ordering);
            }
            s->last_timestamp_ = std::max(s->last_timestamp_, e.timestamp);
        }
        s->log_ = std::make_unique<LabelLog>(dir / "labels.ndjson");
        if (s->status_ != SessionStatus::finished && s->answers_.size() == s->queries_.size()) {
            std::lock_guard lock(s->mu_);
            s->start_training_locked();
        } else if (s->status_ == SessionStatus::training) {
            s->status_ = SessionStatus::awaiting_labels;
        }
        return s;
    }

    AnnotationSession(const AnnotationSession&) = delete;
    AnnotationSession& operator=(const AnnotationSession&) = delete;
    ~AnnotationSession() {
        if (worker_.joinable()) worker_.join();
    }

    const SessionConfig& config() const { return config_; }
    const ObjectSet& objects() const { return objects_; }

    /// Unanswered queries of the current batch (empty while training or finished).
    std::vector<PendingQuery> pending() const {
        std::lock_guard lock(mu_);
        std::vector<PendingQuery> out;
        if (status_ != SessionStatus::awaiting_labels) return out;
        for (const auto& q : queries_) {
            if (!answers_.count(q.query_id)) out.push_back(q);
        }
        return out;
    }

    /// Records an answer (durably) and returns the remaining count. First answer wins.
    std::size_t answer(const std::string& query_id, Ordering ordering) {
        std::lock_guard lock(mu_);
        const auto it = std::find_if(queries_.begin(), queries_.end(),
                                     [&](const PendingQuery& q) { return q.query_id == query_id; });
        if (it == queries_.end()) {
            if (answered_before(query_id)) throw Conflict("query '" + query_id + "' already answered");
            throw NotFound("unknown query '" + query_id + "'");
        }
        if (answers_.count(query_id) || status_ != SessionStatus::awaiting_labels) {
            throw Conflict("query '" + query_id + "' already answered");
        }
        LabelLogEntry e{config_.id, query_id, it->triplet, ordering, next_timestamp()};
        log_->append(e);
        answers_.emplace(query_id, ordering);
        const std::size_t remaining = queries_.size() - answers_.size();
        if (remaining == 0) start_training_locked();
        return remaining;
    }

    SessionSnapshot snapshot() const {
        std::lock_guard lock(mu_);
        SessionSnapshot s;
        s.session_id = config_.id;
        s.status = status_;
        s.round = round_;
        s.labeled_count = labeled_count_;
        s.remaining = status_ == SessionStatus::awaiting_labels ? queries_.size() - answers_.size() : 0;
        s.tga_curve = tga_curve_;
        s.error = last_error_;
        if (!test_.triplets.empty() && !tga_curve_.empty()) s.tga = tga_curve_.back();
        return s;
    }

    /// Blocks until the background retraining (if any) has finished.
    void wait_idle() {
        std::thread t;
        {
            std::lock_guard lock(mu_);
            t = std::move(worker_);
        }
        if (t.joinable()) t.join();
    }

private:
    AnnotationSession(std::filesystem::path dir, SessionConfig config) : dir_(std::move(dir)), config_(std::move(config)) {
        build_dataset();
    }

    void build_dataset() {
        if (!config_.features_path.empty()) {
            objects_ = load_features(config_.features_path);
            objects_.validate();
            if (!config_.triplets_path.empty()) {
                pool_ = load_triplets(config_.triplets_path, objects_);
                pool_.orderings.clear();
            } else {
                // Candidate questions drawn uniformly; no ground truth is known.
                GroundTruthMetric identity{DenseMatrix(objects_.dim(), objects_.dim())};
                for (std::size_t i = 0; i < objects_.dim(); ++i) identity.matrix(i, i) = 1.0;
                pool_ = sample_triplets(objects_, identity, config_.pool_size, derive_seed(config_.seed, 21), true);
                pool_.orderings.clear();
            }
        } else {
            auto [objects, metric] = generate_synthetic(config_.objects, config_.dim, config_.data_seed);
            objects_ = std::move(objects);
            auto all = sample_triplets(objects_, metric, config_.pool_size + config_.test_count,
                                       derive_seed(config_.seed, 21), true);
            auto [train, test] = split(all, config_.pool_size, config_.test_count, derive_seed(config_.seed, 22));
            pool_ = std::move(train);
            pool_.orderings.clear();
            test_ = std::move(test);
        }
        if (config_.initial_pool + config_.rounds * config_.batch_size > pool_.size()) {
            throw ConfigError("session needs l + M b <= pool size");
        }
        acquisition_ = parse_strategy_label(config_.strategy);
        acquisition_.batch_size = config_.batch_size;
        acquisition_.mu = Mu(config_.mu);
    }

    void queries_from_pending() {
        queries_.clear();
        answers_.clear();
        for (std::size_t q = 0; q < state_.pending.size(); ++q) {
            const std::size_t id = state_.pending[q];
            queries_.push_back({"r" + std::to_string(batch_round_) + "-q" + std::to_string(q), id, state_.pool[id]});
        }
        round_ = state_.round;
        labeled_count_ = state_.labeled.size();
    }

    bool answered_before(const std::string& query_id) const {
        const auto dash = query_id.find('-');
        if (query_id.size() < 2 || query_id[0] != 'r' || dash == std::string::npos) return false;
        try {
            return std::stoull(query_id.substr(1, dash - 1)) < batch_round_;
        } catch (const std::exception&) {
            return false;
        }
    }

    std::int64_t next_timestamp() {
        const auto now = std::chrono::duration_cast<std::chrono::nanoseconds>(
                             std::chrono::system_clock::now().time_since_epoch())
                             .count();
        last_timestamp_ = std::max<std::int64_t>(now, last_timestamp_ + 1);
        return last_timestamp_;
    }

    void persist_checkpoint() {
        write_json_atomic(dir_ / "checkpoint.json", {{"state", to_json(state_)},
                                                     {"status", to_string(status_)},
                                                     {"tga_curve", tga_curve_},
                                                     {"batch_round", batch_round_}});
    }

    /// Oracle over the answers collected for the current batch.
    class AnswerOracle final : public Oracle {
    public:
        AnswerOracle(const std::vector<PendingQuery>& q, const std::map<std::string, Ordering>& a) : q_(q), a_(a) {}
        std::optional<Ordering> answer(std::size_t id, const Triplet&) override {
            for (const auto& q : q_) {
                if (q.triplet_id == id) {
                    const auto it = a_.find(q.query_id);
                    if (it != a_.end()) return it->second;
                }
            }
            return std::nullopt;
        }

    private:
        const std::vector<PendingQuery>& q_;
        const std::map<std::string, Ordering>& a_;
    };

    void start_training_locked() {
        status_ = SessionStatus::training;
        if (worker_.joinable()) worker_.join();
        worker_ = std::thread([this] { train_and_advance(); });
    }

    /// Runs with status = training; the worker has exclusive use of state_.
    void train_and_advance() {
        try {
            advance();
        } catch (const std::exception& e) {
            std::lock_guard lock(mu_);
            last_error_ = e.what();
        }
    }

    void advance() {
        AnswerOracle oracle(queries_, answers_);
        if (!commit_pending(state_, oracle)) throw ContractError("batch incomplete at training time");
        retrain(state_, objects_.features, config_.budget);
        if (state_.initialized) ++state_.round;
        state_.initialized = true;
        std::optional<double> tga;
        if (!test_.triplets.empty()) tga = compute_tga(state_.model, objects_.features, test_);
        const bool done = state_.round >= config_.rounds || state_.unlabeled.size() < config_.batch_size;
        if (!done) select_pending(state_, objects_.features, acquisition_);
        std::lock_guard lock(mu_);
        if (tga) tga_curve_.push_back(*tga);
        ++batch_round_;
        status_ = done ? SessionStatus::finished : SessionStatus::awaiting_labels;
        queries_from_pending();
        persist_checkpoint();
    }

    std::filesystem::path dir_;
    SessionConfig config_;
    ObjectSet objects_;
    TripletPool pool_;
    TripletPool test_;
    AcquisitionConfig acquisition_;

    mutable std::mutex mu_;
    LoopState state_;
    SessionStatus status_ = SessionStatus::awaiting_labels;
    std::vector<PendingQuery> queries_;
    std::map<std::string, Ordering> answers_;
    std::vector<double> tga_curve_;
    std::size_t batch_round_ = 0;  ///< 0 for the initial pool, m for round m's batch
    std::size_t round_ = 0;
    std::size_t labeled_count_ = 0;
    std::int64_t last_timestamp_ = 0;
    std::string last_error_;
    std::unique_ptr<LabelLog> log_;
    std::thread worker_;
};

/// All sessions under one root directory.
class AnnotationService {
public:
    explicit AnnotationService(std::filesystem::path root) : root_(std::move(root)) {
        std::filesystem::create_directories(root_);
        for (const auto& entry : std::filesystem::directory_iterator(root_)) {
            if (entry.is_directory() && std::filesystem::exists(entry.path() / "checkpoint.json")) {
                auto s = AnnotationSession::recover(entry.path());
                sessions_.emplace(s->config().id, std::move(s));
            }
        }
    }

    AnnotationSession& create(SessionConfig config) {
        std::lock_guard lock(mu_);
        if (config.id.empty()) {
            for (std::size_t n = sessions_.size() + 1; config.id.empty() || sessions_.count(config.id); ++n) {
                config.id = "s" + std::to_string(n);
            }
        } else if (sessions_.count(config.id)) {
            throw Conflict("session '" + config.id + "' exists");
        }
        auto s = AnnotationSession::create(root_, std::move(config));
        auto& ref = *s;
        sessions_.emplace(ref.config().id, std::move(s));
        return ref;
    }

    AnnotationSession& get(const std::string& id) {
        std::lock_guard lock(mu_);
        const auto it = sessions_.find(id);
        if (it == sessions_.end()) throw NotFound("unknown session '" + id + "'");
        return *it->second;
    }

    std::vector<std::string> ids() const {
        std::lock_guard lock(mu_);
        std::vector<std::string> out;
        for (const auto& [id, _] : sessions_) out.push_back(id);
        return out;
    }

private:
    std::filesystem::path root_;
    mutable std::mutex mu_;
    std::map<std::string, std::unique_ptr<AnnotationSession>> sessions_;
};

// ---------------------------------------------------------------------------
// JSON views used by the HTTP layer

inline nlohmann::json object_json(const ObjectSet& objects, std::size_t i) {
    const auto row = objects.features.row(i);
    nlohmann::json j{{"id", objects.ids[i]}, {"features", std::vector<double>(row.begin(), row.end())}};
    if (!objects.assets.empty() && !objects.assets[i].empty()) j["asset"] = objects.assets[i];
    return j;
}

inline nlohmann::json pending_json(AnnotationSession& s) {
    const auto snap = s.snapshot();
    nlohmann::json queries = nlohmann::json::array();
    for (const auto& q : s.pending()) {
        queries.push_back({{"query_id", q.query_id},
                           {"anchor", object_json(s.objects(), q.triplet.anchor)},
                           {"j", object_json(s.objects(), q.triplet.first)},
                           {"k", object_json(s.objects(), q.triplet.second)}});
    }
    return {{"session_id", snap.session_id},
            {"status", to_string(snap.status)},
            {"round", snap.round},
            {"remaining", queries.size()},
            {"queries", std::move(queries)}};
}

inline nlohmann::json status_json(const SessionSnapshot& snap) {
    nlohmann::json j{{"session_id", snap.session_id},
                     {"status", to_string(snap.status)},
                     {"round", snap.round},
                     {"labeled_count", snap.labeled_count},
                     {"remaining", snap.remaining}};
    if (!snap.error.empty()) j["error"] = snap.error;
    if (snap.tga) {
        j["tga"] = *snap.tga;
        j["tga_curve"] = snap.tga_curve;
    }
    return j;
}

}  // namespace tal

#endif
