#ifndef TAL_LOOP_HPP
#define TAL_LOOP_HPP

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "acquisition.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "metric.hpp"
#include "nn.hpp"
#include "rng.hpp"

/**
 * @file loop.hpp
 *
 * @brief The batch-mode active learning loop.
 *
 * Triplets are referred to by their id, i.e. their position in the experiment's training
 * pool. A round selects a batch from the unlabeled ids, asks an oracle for the orderings,
 * moves the batch to the labeled set and retrains warm-started from the previous model
 * with fresh Adam moments.
 */

namespace tal {

struct TrainBudget {
    std::size_t epochs = 200;
    std::size_t minibatch_size = 0;  ///< 0 = full batch
    double learning_rate = 1e-4;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be at least 1");
        if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    }
};

struct LabeledId {
    std::size_t id = 0;
    Ordering ordering = Ordering::j_closer;

    friend bool operator==(const LabeledId&, const LabeledId&) = default;
};

struct LoopState {
    std::vector<Triplet> pool;            ///< every triplet the loop may ask about, by id
    std::vector<LabeledId> labeled;       ///< L, in annotation order
    std::vector<std::size_t> unlabeled;   ///< U, ascending ids
    std::vector<std::size_t> pending;     ///< selected but not yet committed to L
    EmbeddingModel model;
    std::size_t round = 0;                ///< 0 until the first acquisition round completes
    bool initialized = false;             ///< the initial model has been trained
    Rng rng;

    std::vector<LabeledTriplet> labeled_triplets() const {
        std::vector<LabeledTriplet> out;
        out.reserve(labeled.size());
        for (const auto& l : labeled) out.push_back({pool[l.id], l.ordering});
        return out;
    }

    std::vector<Triplet> unlabeled_triplets() const {
        std::vector<Triplet> out;
        out.reserve(unlabeled.size());
        for (std::size_t id : unlabeled) out.push_back(pool[id]);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Oracles

/// Source of orderings. Returning nullopt means the answer is not available yet.
class Oracle {
public:
    virtual ~Oracle() = default;
    virtual std::optional<Ordering> answer(std::size_t id, const Triplet& t) = 0;
};

/// Answers with orderings stored alongside the pool (noise, if any, already applied).
class StoredLabelOracle final : public Oracle {
public:
    explicit StoredLabelOracle(const TripletPool& pool) : pool_(&pool) {}
    std::optional<Ordering> answer(std::size_t id, const Triplet&) override {
        if (id >= pool_->orderings.size()) return std::nullopt;
        return pool_->orderings[id];
    }

private:
    const TripletPool* pool_;
};

/**
 * Ground-truth ordering under the metric, inverted with probability `flip_rate` by an
 * independent coin per query.
 */
inline Ordering dataset_oracle_answer(const ObjectSet& objects, const GroundTruthMetric& metric, const Triplet& t,
                                      double flip_rate, Rng& rng) {
    if (!(flip_rate >= 0.0 && flip_rate <= 1.0)) throw ConfigError("flip rate must lie in [0, 1]");
    const auto truth = true_ordering(objects, metric, t);
    if (!truth) throw ContractError("exact tie in ground-truth distances");
    const bool flip = flip_rate >= 1.0 || (flip_rate > 0.0 && std::bernoulli_distribution(flip_rate)(rng));
    return flip ? inverted(*truth) : *truth;
}

class MetricOracle final : public Oracle {
public:
    MetricOracle(const ObjectSet& objects, const GroundTruthMetric& metric, double flip_rate, std::uint64_t seed)
        : objects_(&objects), metric_(&metric), flip_rate_(flip_rate), rng_(seed) {}
    std::optional<Ordering> answer(std::size_t, const Triplet& t) override {
        return dataset_oracle_answer(*objects_, *metric_, t, flip_rate_, rng_);
    }

private:
    const ObjectSet* objects_;
    const GroundTruthMetric* metric_;
    double flip_rate_;
    Rng rng_;
};

// ---------------------------------------------------------------------------
// Training

/// Mean exponential loss over `labeled`; 0 for an empty set.
inline double mean_training_loss(const EmbeddingModel& model, const DenseMatrix& features,
                                 std::span<const LabeledTriplet> labeled) {
    if (labeled.empty()) return 0.0;
    return triplet_loss(model, features, labeled) / static_cast<double>(labeled.size());
}

/**
 * Runs `budget.epochs` epochs of Adam on the summed triplet loss, starting from the current
 * parameters with fresh moments. Mini-batches (if any) are reshuffled every epoch with `rng`.
 */
inline void train_model(EmbeddingModel& model, const DenseMatrix& features, std::span<const LabeledTriplet> labeled,
                        const TrainBudget& budget, Rng& rng) {
    budget.validate();
    if (labeled.empty()) return;
    AdamState adam = AdamState::for_params(model.params, budget.learning_rate);
    LossGradientWorkspace ws;
    MLPParams grads = zeros_like(model.params);
    const bool full = budget.minibatch_size == 0 || budget.minibatch_size >= labeled.size();
    std::vector<LabeledTriplet> order(labeled.begin(), labeled.end());
    for (std::size_t epoch = 0; epoch < budget.epochs; ++epoch) {
        if (full) {
            ws.compute(model, features, order, grads);
            adam_step(model.params, grads, adam);
            continue;
        }
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += budget.minibatch_size) {
            const std::size_t len = std::min(budget.minibatch_size, order.size() - start);
            ws.compute(model, features, std::span<const LabeledTriplet>(order.data() + start, len), grads);
            adam_step(model.params, grads, adam);
        }
    }
}

// ---------------------------------------------------------------------------
// Loop operations

/// Fresh state: every pool triplet unlabeled, model freshly initialized from `seed`.
inline LoopState make_loop_state(std::vector<Triplet> pool, std::span<const std::size_t> architecture,
                                 std::uint64_t seed) {
    LoopState s;
    s.pool = std::move(pool);
    s.unlabeled.resize(s.pool.size());
    for (std::size_t i = 0; i < s.pool.size(); ++i) s.unlabeled[i] = i;
    s.model = EmbeddingModel(init_params(architecture, derive_seed(seed, 11)));
    s.rng = Rng(derive_seed(seed, 12));
    return s;
}

/// Marks `count` uniformly drawn unlabeled triplets as pending (the initial pool).
inline void begin_initial_pool(LoopState& state, std::size_t count) {
    if (!state.pending.empty()) throw ContractError("a batch is already pending");
    if (count > state.unlabeled.size()) {
        throw ConfigError("initial pool of " + std::to_string(count) + " exceeds " +
                          std::to_string(state.unlabeled.size()) + " unlabeled triplets");
    }
    auto picks = random_select(state.unlabeled.size(), count, state.rng);
    for (std::size_t p : picks) state.pending.push_back(state.unlabeled[p]);
}

/// Selects the next batch from U into `pending` and returns the candidate ids considered.
inline std::vector<std::size_t> select_pending(LoopState& state, const DenseMatrix& features,
                                               const AcquisitionConfig& config) {
    if (!state.pending.empty()) throw ContractError("a batch is already pending");
    if (state.unlabeled.size() < config.batch_size) {
        throw PoolExhausted("need " + std::to_string(config.batch_size) + " triplets, " +
                            std::to_string(state.unlabeled.size()) + " unlabeled");
    }
    const auto table = embed_all(state.model, features);
    const auto triplets = state.unlabeled_triplets();
    const auto sel = select_batch(table, triplets, config, state.rng);
    for (std::size_t p : sel.batch) state.pending.push_back(state.unlabeled[p]);
    std::vector<std::size_t> candidates;
    for (std::size_t p : sel.candidates) candidates.push_back(state.unlabeled[p]);
    return candidates;
}

/**
 * Asks the oracle about every pending triplet. If all are answered, moves them from U to L
 * and returns true; otherwise leaves the state untouched and returns false.
 */
inline bool commit_pending(LoopState& state, Oracle& oracle) {
    std::vector<LabeledId> answers;
    answers.reserve(state.pending.size());
    for (std::size_t id : state.pending) {
        const auto o = oracle.answer(id, state.pool[id]);
        if (!o) return false;
        answers.push_back({id, *o});
    }
    std::vector<std::size_t> taken = state.pending;
    std::sort(taken.begin(), taken.end());
    std::vector<std::size_t> rest;
    rest.reserve(state.unlabeled.size() - taken.size());
    std::set_difference(state.unlabeled.begin(), state.unlabeled.end(), taken.begin(), taken.end(),
                        std::back_inserter(rest));
    if (rest.size() + taken.size() != state.unlabeled.size()) {
        throw ContractError("pending triplet is not in the unlabeled pool");
    }
    state.unlabeled = std::move(rest);
    state.labeled.insert(state.labeled.end(), answers.begin(), answers.end());
    state.pending.clear();
    return true;
}

inline void retrain(LoopState& state, const DenseMatrix& features, const TrainBudget& budget) {
    const auto labeled = state.labeled_triplets();
    train_model(state.model, features, labeled, budget, state.rng);
}

/// Draws l random triplets, labels them through the oracle and trains the initial model.
inline LoopState initialize(const DenseMatrix& features, std::vector<Triplet> pool, std::size_t initial_pool,
                            std::span<const std::size_t> architecture, const TrainBudget& budget, std::uint64_t seed,
                            Oracle& oracle) {
    if (initial_pool > pool.size()) {
        throw ConfigError("initial pool of " + std::to_string(initial_pool) + " exceeds pool of " +
                          std::to_string(pool.size()));
    }
    LoopState state = make_loop_state(std::move(pool), architecture, seed);
    if (architecture.front() != features.cols()) throw ShapeError("architecture input width != feature width");
    begin_initial_pool(state, initial_pool);
    if (!commit_pending(state, oracle)) throw ContractError("oracle could not label the initial pool");
    retrain(state, features, budget);
    state.initialized = true;
    return state;
}

enum class RoundStatus { completed, suspended };

struct RoundOutcome {
    RoundStatus status = RoundStatus::completed;
    std::vector<std::size_t> selected;    ///< ids of the batch
    std::vector<std::size_t> candidates;  ///< ids of the overcomplete set, if any
    double training_loss_before = 0.0;    ///< mean loss over the new L before retraining
    double training_loss_after = 0.0;
};

/**
 * One acquisition round: select (unless a batch is already pending), label, commit,
 * retrain warm-started from the current model. If the oracle cannot answer yet the round
 * is suspended with the batch left pending; calling again resumes it.
 */
inline RoundOutcome run_round(LoopState& state, const DenseMatrix& features, const AcquisitionConfig& config,
                              Oracle& oracle, const TrainBudget& budget) {
    RoundOutcome out;
    if (state.pending.empty()) out.candidates = select_pending(state, features, config);
    out.selected = state.pending;
    if (!commit_pending(state, oracle)) {
        out.status = RoundStatus::suspended;
        return out;
    }
    const auto labeled = state.labeled_triplets();
    out.training_loss_before = mean_training_loss(state.model, features, labeled);
    train_model(state.model, features, labeled, budget, state.rng);
    out.training_loss_after = mean_training_loss(state.model, features, labeled);
    ++state.round;
    return out;
}

struct ExperimentConfig {
    AcquisitionConfig acquisition;
    TrainBudget budget;
    std::optional<std::size_t> initial_pool;  ///< unset means batch_size
    std::size_t rounds = 10;        ///< M
    std::vector<std::size_t> hidden{10, 20, 10};  ///< layer widths after the input; the last is the embedding size
    std::uint64_t seed = 0;

    std::size_t effective_initial_pool() const {
        return initial_pool.value_or(acquisition.batch_size);
    }
};

struct RoundRecord {
    std::size_t round = 0;
    std::size_t labeled_count = 0;
    double tga = 0.0;
    double seconds = 0.0;               ///< wall-clock of selection + training for this round
    std::vector<std::size_t> selected;  ///< triplet ids annotated in this round
};

struct ExperimentResult {
    std::vector<RoundRecord> curve;  ///< M + 1 entries: after initialization, then after each round
    LoopState final_state;
};

using EvalHook = std::function<double(const EmbeddingModel&)>;

inline std::vector<std::size_t> architecture_for(std::size_t input_dim, std::span<const std::size_t> hidden) {
    std::vector<std::size_t> arch{input_dim};
    arch.insert(arch.end(), hidden.begin(), hidden.end());
    return arch;
}

/// Initialization plus M rounds, evaluating after each. Requires l + M b <= |pool|.
inline ExperimentResult run_experiment(const DenseMatrix& features, const std::vector<Triplet>& pool,
                                       const ExperimentConfig& config, Oracle& oracle, const EvalHook& evaluate) {
    config.acquisition.validate();
    const std::size_t l = config.effective_initial_pool();
    const std::size_t b = config.acquisition.batch_size;
    if (l + config.rounds * b > pool.size()) {
        throw ConfigError("l + M b = " + std::to_string(l + config.rounds * b) + " exceeds pool of " +
                          std::to_string(pool.size()));
    }
    if (l == 0 && config.rounds > 0 && config.acquisition.strategy != StrategyKind::random) {
        throw ConfigError("an empty initial pool is only allowed with random selection");
    }
    using clock = std::chrono::steady_clock;
    const auto arch = architecture_for(features.cols(), config.hidden);
    ExperimentResult result;
    auto t0 = clock::now();
    result.final_state = initialize(features, pool, l, arch, config.budget, config.seed, oracle);
    LoopState& state = result.final_state;
    RoundRecord first;
    first.round = 0;
    first.labeled_count = state.labeled.size();
    first.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    for (const auto& li : state.labeled) first.selected.push_back(li.id);
    first.tga = evaluate(state.model);
    result.curve.push_back(std::move(first));
    for (std::size_t m = 1; m <= config.rounds; ++m) {
        t0 = clock::now();
        auto outcome = run_round(state, features, config.acquisition, oracle, config.budget);
        if (outcome.status != RoundStatus::completed) throw ContractError("oracle left round " + std::to_string(m) + " unanswered");
        RoundRecord rec;
        rec.round = m;
        rec.labeled_count = state.labeled.size();
        rec.seconds = std::chrono::duration<double>(clock::now() - t0).count();
        rec.selected = std::move(outcome.selected);
        rec.tga = evaluate(state.model);
        result.curve.push_back(std::move(rec));
    }
    return result;
}

}  // namespace tal

#endif
