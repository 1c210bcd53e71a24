#include <gtest/gtest.h>

#include <bit>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "support.hpp"
#include "tal/data.hpp"

using namespace tal;
using namespace tal::testing;

namespace {

ObjectSet line_objects(std::initializer_list<double> xs) {
    ObjectSet o;
    o.features = DenseMatrix(xs.size(), 1, DenseVector(xs));
    for (std::size_t i = 0; i < xs.size(); ++i) o.ids.push_back(std::to_string(i));
    return o;
}

GroundTruthMetric identity_metric(std::size_t d) {
    GroundTruthMetric m{DenseMatrix(d, d)};
    for (std::size_t i = 0; i < d; ++i) m.matrix(i, i) = 1.0;
    return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// generate_synthetic

TEST(GenerateSynthetic, Shapes) {
    const auto [objects, metric] = generate_synthetic(100, 10, 0);
    EXPECT_EQ(objects.size(), 100u);
    EXPECT_EQ(objects.dim(), 10u);
    EXPECT_EQ(metric.matrix.rows(), 10u);
    EXPECT_EQ(metric.matrix.cols(), 10u);
    EXPECT_NO_THROW(objects.validate());
}

TEST(GenerateSynthetic, MetricIsSymmetricPsd) {
    const auto [objects, metric] = generate_synthetic(100, 10, 1);
    double asym = 0.0;
    for (std::size_t r = 0; r < 10; ++r) {
        for (std::size_t c = 0; c < 10; ++c) asym = std::max(asym, std::abs(metric.matrix(r, c) - metric.matrix(c, r)));
    }
    EXPECT_LT(asym, 1e-12);
    Rng rng(2);
    const DenseVector zero(10, 0.0);
    for (int i = 0; i < 1000; ++i) {
        const auto x = random_vector(rng, 10);
        EXPECT_GE(metric.squared_distance(x, zero), 0.0);
    }
}

TEST(GenerateSynthetic, SameSeedIsBitIdentical) {
    const auto a = generate_synthetic(30, 4, 77), b = generate_synthetic(30, 4, 77);
    EXPECT_EQ(a.first.features.values(), b.first.features.values());
    EXPECT_EQ(a.second.matrix.values(), b.second.matrix.values());
    const auto c = generate_synthetic(30, 4, 78);
    EXPECT_NE(a.first.features.values(), c.first.features.values());
}

TEST(GenerateSynthetic, TooFewObjectsIsConfigError) {
    EXPECT_THROW(generate_synthetic(2, 3, 0), ConfigError);
}

TEST(GenerateSynthetic, FeaturesLookStandardNormal) {
    const auto [objects, metric] = generate_synthetic(2000, 10, 3);
    const auto& v = objects.features.values();
    double mean = 0.0, sq = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double x : v) sq += (x - mean) * (x - mean);
    const double var = sq / static_cast<double>(v.size() - 1);
    const double se = 1.0 / std::sqrt(static_cast<double>(v.size()));
    EXPECT_NEAR(mean, 0.0, 4 * se);
    EXPECT_NEAR(var, 1.0, 4 * std::sqrt(2.0) * se);
}

TEST(GroundTruthMetric, TriangleInequality) {
    const auto [objects, metric] = generate_synthetic(100, 10, 4);
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        const auto t = random_triplet(rng, 100);
        const auto x = objects.features.row(t.anchor), y = objects.features.row(t.first),
                   z = objects.features.row(t.second);
        EXPECT_LE(metric.distance(x, z), metric.distance(x, y) + metric.distance(y, z) + 1e-9);
    }
}

// ---------------------------------------------------------------------------
// sample_triplets

TEST(SampleTriplets, OneDimensionalOrdering) {
    const auto objects = line_objects({0, 1, 5});
    const auto metric = identity_metric(1);
    EXPECT_EQ(true_ordering(objects, metric, {0, 1, 2}), Ordering::j_closer);
    EXPECT_EQ(true_ordering(objects, metric, {0, 2, 1}), Ordering::k_closer);
    EXPECT_EQ(true_ordering(line_objects({0, -2, 2}), metric, {0, 1, 2}), std::nullopt);
}

TEST(SampleTriplets, OrderingsAgreeWithTheMetric) {
    const auto [objects, metric] = generate_synthetic(40, 5, 6);
    const auto pool = sample_triplets(objects, metric, 5000, 7);
    ASSERT_EQ(pool.size(), 5000u);
    ASSERT_TRUE(pool.has_orderings());
    EXPECT_NO_THROW(pool.validate(objects.size()));
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto& t = pool.triplets[i];
        const auto& near = *pool.orderings[i] == Ordering::j_closer ? t.first : t.second;
        const auto& far = *pool.orderings[i] == Ordering::j_closer ? t.second : t.first;
        EXPECT_LT(metric.distance(objects.features.row(t.anchor), objects.features.row(near)),
                  metric.distance(objects.features.row(t.anchor), objects.features.row(far)));
        EXPECT_TRUE(t.anchor != t.first && t.anchor != t.second && t.first != t.second);
    }
}

TEST(SampleTriplets, UniformOverOrderedIndexTriples) {
    const auto [objects, metric] = generate_synthetic(5, 3, 8);
    const std::size_t draws = 100000;
    const auto pool = sample_triplets(objects, metric, draws, 9);
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, double> counts;
    for (const auto& t : pool.triplets) counts[{t.anchor, t.first, t.second}] += 1.0;
    ASSERT_EQ(counts.size(), 60u);  // 5 * 4 * 3 ordered triples
    const double expected = static_cast<double>(draws) / 60.0;
    double chi2 = 0.0;
    for (const auto& [key, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
    EXPECT_LT(chi2, 98.32);  // chi-square, 59 dof, p = 0.001
}

TEST(SampleTriplets, DuplicateRejection) {
    const auto [objects, metric] = generate_synthetic(6, 2, 10);
    // 6 * 5 * 4 / 2 = 60 distinct questions
    const auto pool = sample_triplets(objects, metric, 60, 11, true);
    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> keys;
    for (const auto& t : pool.triplets) keys.insert(question_key(t));
    EXPECT_EQ(keys.size(), 60u);
    EXPECT_THROW(sample_triplets(objects, metric, 61, 11, true), ConfigError);
}

TEST(SampleTriplets, DegenerateMetricIsReported) {
    // all objects coincide: every triplet is an exact tie
    ObjectSet objects{DenseMatrix(4, 2), {"a", "b", "c", "d"}, {}};
    EXPECT_THROW(sample_triplets(objects, identity_metric(2), 1, 0), DegenerateMetric);
}

TEST(SampleTriplets, Determinism) {
    const auto [objects, metric] = generate_synthetic(20, 3, 12);
    const auto a = sample_triplets(objects, metric, 300, 13), b = sample_triplets(objects, metric, 300, 13);
    EXPECT_EQ(a.triplets, b.triplets);
    EXPECT_EQ(a.orderings, b.orderings);
}

// ---------------------------------------------------------------------------
// flip_labels

namespace {

TripletPool labeled_pool(std::size_t count, std::uint64_t seed) {
    const auto [objects, metric] = generate_synthetic(50, 4, seed);
    return sample_triplets(objects, metric, count, seed + 1);
}

std::size_t differences(const TripletPool& a, const TripletPool& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += a.orderings[i] != b.orderings[i];
    return n;
}

}  // namespace

TEST(FlipLabels, RateZeroIsIdentity) {
    const auto pool = labeled_pool(1000, 14);
    EXPECT_EQ(flip_labels(pool, 0.0, 1).orderings, pool.orderings);
}

TEST(FlipLabels, RateOneInvertsEverything) {
    const auto pool = labeled_pool(1000, 15);
    EXPECT_EQ(differences(pool, flip_labels(pool, 1.0, 1)), 1000u);
}

TEST(FlipLabels, ExactCount) {
    const auto pool = labeled_pool(20000, 16);
    std::vector<std::size_t> flipped;
    const auto noisy = flip_labels(pool, 0.2, 17, &flipped);
    EXPECT_EQ(differences(pool, noisy), 4000u);
    EXPECT_EQ(flipped.size(), 4000u);
    EXPECT_EQ(flip_count(0.1, 20000), 2000u);
    EXPECT_EQ(flip_count(0.29, 100), 29u);  // 0.29 * 100 is 28.999999999999996 in binary
}

TEST(FlipLabels, SameSeedTwiceIsIdentity) {
    const auto pool = labeled_pool(3000, 18);
    for (double rate : {0.0, 0.1, 0.2, 0.5, 1.0}) {
        EXPECT_EQ(flip_labels(flip_labels(pool, rate, 19), rate, 19).orderings, pool.orderings) << rate;
    }
}

TEST(FlipLabels, SubsetDependsOnSeed) {
    const auto pool = labeled_pool(1000, 20);
    std::vector<std::size_t> a, b, c;
    flip_labels(pool, 0.2, 1, &a);
    flip_labels(pool, 0.2, 1, &b);
    flip_labels(pool, 0.2, 2, &c);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
}

TEST(FlipLabels, Errors) {
    auto pool = labeled_pool(10, 21);
    EXPECT_THROW(flip_labels(pool, 1.5, 0), ConfigError);
    EXPECT_THROW(flip_labels(pool, -0.1, 0), ConfigError);
    pool.orderings[3].reset();
    EXPECT_THROW(flip_labels(pool, 0.2, 0), ContractError);
}

// ---------------------------------------------------------------------------
// split

TEST(Split, DisjointCoverOfDistinctPool) {
    const auto [objects, metric] = generate_synthetic(20, 3, 22);
    const auto pool = sample_triplets(objects, metric, 100, 23, true);
    const auto [train, test] = split(pool, 60, 40, 24);
    EXPECT_EQ(train.size(), 60u);
    EXPECT_EQ(test.size(), 40u);
    std::multiset<Triplet> all(train.triplets.begin(), train.triplets.end());
    all.insert(test.triplets.begin(), test.triplets.end());
    EXPECT_EQ(all, std::multiset<Triplet>(pool.triplets.begin(), pool.triplets.end()));
    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> train_keys;
    for (const auto& t : train.triplets) train_keys.insert(question_key(t));
    for (const auto& t : test.triplets) EXPECT_FALSE(train_keys.count(question_key(t)));
}

TEST(Split, QuestionLevelDisjointnessDropsReversedDuplicates) {
    const auto objects = line_objects({0, 1, 5, 9});
    const auto metric = identity_metric(1);
    TripletPool pool;
    pool.triplets = {{0, 1, 2}, {0, 2, 1}, {1, 2, 3}, {3, 0, 1}};
    const auto [train, test] = split(pool, 2, 1, 0);
    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> keys;
    for (const auto& t : train.triplets) keys.insert(question_key(t));
    for (const auto& t : test.triplets) EXPECT_TRUE(keys.insert(question_key(t)).second);
    EXPECT_THROW(split(pool, 3, 1, 0), ConfigError);  // only 3 distinct questions
}

TEST(Split, InsufficientPoolIsConfigError) {
    const auto pool = labeled_pool(50, 25);
    EXPECT_THROW(split(pool, 30, 21, 0), ConfigError);
}

TEST(Split, DifferentSeedsGiveDifferentSplits) {
    const auto [objects, metric] = generate_synthetic(30, 3, 26);
    const auto pool = sample_triplets(objects, metric, 400, 27, true);
    std::vector<std::set<Triplet>> trains;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto [train, test] = split(pool, 200, 100, s);
        trains.emplace_back(train.triplets.begin(), train.triplets.end());
    }
    for (std::size_t a = 0; a < 5; ++a) {
        for (std::size_t b = a + 1; b < 5; ++b) {
            std::size_t inter = 0;
            for (const auto& t : trains[a]) inter += trains[b].count(t);
            const double jaccard = static_cast<double>(inter) / static_cast<double>(400 - inter);
            EXPECT_LT(jaccard, 1.0);
        }
    }
    const auto [again, unused] = split(pool, 200, 100, 0);
    EXPECT_EQ(std::set<Triplet>(again.triplets.begin(), again.triplets.end()), trains[0]);
}

TEST(Split, CarriesOrderings) {
    const auto pool = labeled_pool(200, 28);
    const auto [train, test] = split(pool, 100, 50, 29);
    ASSERT_TRUE(train.has_orderings());
    ASSERT_TRUE(test.has_orderings());
    std::map<Triplet, Ordering> truth;
    for (std::size_t i = 0; i < pool.size(); ++i) truth[pool.triplets[i]] = *pool.orderings[i];
    for (std::size_t i = 0; i < train.size(); ++i) EXPECT_EQ(*train.orderings[i], truth.at(train.triplets[i]));
}

// ---------------------------------------------------------------------------
// Synthetic dataset bundle

TEST(SyntheticDataset, ProtocolCounts) {
    SyntheticSpec spec;
    spec.train_count = 2000;
    spec.test_count = 2000;
    const auto ds = make_synthetic_dataset(spec, 0, 1);
    EXPECT_EQ(ds.train.size(), 2000u);
    EXPECT_EQ(ds.test.size(), 2000u);
    std::size_t wrong_train = 0, wrong_test = 0;
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        wrong_train += true_ordering(ds.objects, *ds.metric, ds.train.triplets[i]) != ds.train.orderings[i];
    }
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
        wrong_test += true_ordering(ds.objects, *ds.metric, ds.test.triplets[i]) != ds.test.orderings[i];
    }
    EXPECT_EQ(wrong_train, 400u);
    EXPECT_EQ(wrong_test, 0u);
}

TEST(SyntheticDataset, DataSeedFixesObjectsAndRunSeedFixesSplit) {
    SyntheticSpec spec;
    spec.objects = 20;
    spec.train_count = 100;
    spec.test_count = 100;
    const auto a = make_synthetic_dataset(spec, 3, 1), b = make_synthetic_dataset(spec, 3, 2);
    EXPECT_EQ(a.objects.features.values(), b.objects.features.values());
    EXPECT_NE(a.train.triplets, b.train.triplets);
    const auto c = make_synthetic_dataset(spec, 3, 1);
    EXPECT_EQ(a.train.triplets, c.train.triplets);
    EXPECT_EQ(a.train.orderings, c.train.orderings);
}

// ---------------------------------------------------------------------------
// CSV

TEST(Csv, FeatureRoundTripIsBitExact) {
    Rng rng(30);
    ObjectSet objects;
    objects.features = random_matrix(rng, 25, 7, 1e3);
    objects.features(0, 0) = 0.1;
    objects.features(1, 1) = -0.0;
    objects.features(2, 2) = 5e-324;
    objects.features(3, 3) = 1.7976931348623157e308;
    for (std::size_t i = 0; i < 25; ++i) objects.ids.push_back("obj-" + std::to_string(i));
    std::stringstream s;
    write_features(s, objects);
    const auto back = read_features(s);
    EXPECT_EQ(back.ids, objects.ids);
    ASSERT_EQ(back.features.values().size(), objects.features.values().size());
    for (std::size_t i = 0; i < back.features.values().size(); ++i) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(back.features.values()[i]),
                  std::bit_cast<std::uint64_t>(objects.features.values()[i]));
    }
}

TEST(Csv, FeaturesWithAssets) {
    std::stringstream s("id,f0,f1,asset\napple,1,2,img/apple.jpg\npear,3,4,\n");
    const auto o = read_features(s);
    EXPECT_EQ(o.size(), 2u);
    EXPECT_EQ(o.dim(), 2u);
    EXPECT_EQ(o.assets, (std::vector<std::string>{"img/apple.jpg", ""}));
    std::stringstream out;
    write_features(out, o);
    EXPECT_EQ(out.str(), "id,f0,f1,asset\napple,1,2,img/apple.jpg\npear,3,4,\n");
}

TEST(Csv, MalformedFeatureRowsNameTheLine) {
    auto line_of = [](const std::string& text) -> std::size_t {
        std::stringstream s(text);
        try {
            read_features(s);
        } catch (const ParseError& e) {
            return e.line();
        } catch (const ValidationError& e) {
            return e.line();
        }
        return 0;
    };
    EXPECT_EQ(line_of("id,f0\na,1\nb,x\n"), 3u);
    EXPECT_EQ(line_of("id,f0\na,1\nb,2,3\n"), 3u);
    EXPECT_EQ(line_of("id,f0\na,1\na,2\n"), 3u);
    EXPECT_EQ(line_of("id,f0\na,inf\n"), 2u);
    EXPECT_EQ(line_of("name,f0\na,1\n"), 1u);
    EXPECT_EQ(line_of(""), 1u);
}

TEST(Csv, TripletRoundTrip) {
    const auto [objects, metric] = generate_synthetic(15, 2, 31);
    auto pool = sample_triplets(objects, metric, 50, 32);
    pool.orderings[7].reset();
    std::stringstream s;
    write_triplets(s, pool, objects);
    const auto back = read_triplets(s, objects);
    EXPECT_EQ(back.triplets, pool.triplets);
    EXPECT_EQ(back.orderings, pool.orderings);
    EXPECT_EQ(back.provenance, Provenance::loaded);
}

TEST(Csv, UnknownObjectIsValidationErrorWithLine) {
    const auto objects = line_objects({0, 1, 2});
    std::stringstream s("anchor_id,j_id,k_id\n0,1,2\n0,1,3\n");
    try {
        read_triplets(s, objects);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.line(), 3u);
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("'3'"), std::string::npos);
    }
}

TEST(Csv, RepeatedObjectAndBadOrderingAreRejected) {
    const auto objects = line_objects({0, 1, 2});
    std::stringstream a("anchor_id,j_id,k_id\n0,1,1\n");
    EXPECT_THROW(read_triplets(a, objects), ValidationError);
    std::stringstream b("anchor_id,j_id,k_id,ordering\n0,1,2,x\n");
    EXPECT_THROW(read_triplets(b, objects), ParseError);
    std::stringstream c("i,j,k\n0,1,2\n");
    EXPECT_THROW(read_triplets(c, objects), ParseError);
}

TEST(Csv, SeventyThreeBySixFileLoads) {
    Rng rng(33);
    const auto path = std::filesystem::temp_directory_path() / "tal_food_features.csv";
    {
        std::ofstream out(path);
        out << "id,f0,f1,f2,f3,f4,f5\n";
        for (int i = 0; i < 73; ++i) {
            out << "food" << i;
            for (double v : random_vector(rng, 6)) out << ',' << v;
            out << '\n';
        }
    }
    const auto objects = load_features(path.string());
    EXPECT_EQ(objects.size(), 73u);
    EXPECT_EQ(objects.dim(), 6u);
    EXPECT_EQ(objects.index_of("food72"), 72u);
    EXPECT_THROW(objects.index_of("food73"), IndexError);
    std::filesystem::remove(path);
}

TEST(Csv, MissingFileIsIoError) {
    EXPECT_THROW(load_features("/nonexistent/features.csv"), IoError);
}
