#include "support.hpp"

#include <gtest/gtest.h>

using namespace tritide;
using namespace tritide::cloud;
namespace fx = tritide::fixtures;

namespace {

/// Interval oracle: the three closed/open ranges written out directly.
Punctuality label_oracle(std::int64_t d) {
    if (d <= -81) {
        return Punctuality::Early;
    }
    if (d >= 321) {
        return Punctuality::Late;
    }
    return Punctuality::OnTime;
}

ForestConfig small_forest(std::size_t trees = 25) {
    ForestConfig c;
    c.n_trees = trees;
    c.threads = 1;
    return c;
}

/// Two classes separated by movement_sequence < 10.
std::vector<LabeledExample> separable(std::size_t n) {
    std::vector<LabeledExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        LabeledExample e;
        e.movement_sequence = static_cast<std::int64_t>(i % 20);
        e.stop_id = "S";
        e.target = *e.movement_sequence < 10 ? Punctuality::Early : Punctuality::Late;
        out.push_back(e);
    }
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// labels

TEST(Label, Examples) {
    EXPECT_EQ(label_for_delay(0), Punctuality::OnTime);
    EXPECT_EQ(label_for_delay(-81), Punctuality::Early);
    EXPECT_EQ(label_for_delay(-80), Punctuality::OnTime);
    EXPECT_EQ(label_for_delay(321), Punctuality::Late);
    EXPECT_EQ(label_for_delay(320), Punctuality::OnTime);
    EXPECT_EQ(assign_label(fx::ts(1000), fx::ts(1400)), Punctuality::Early);
}

TEST(Label, MatchesTheIntervalOracleExhaustively) {
    for (std::int64_t d = -400; d <= 400; ++d) {
        ASSERT_EQ(label_for_delay(d), label_oracle(d)) << d;
        ASSERT_EQ(assign_label(fx::ts(fx::kDay0 + d), fx::ts(fx::kDay0)), label_oracle(d)) << d;
    }
}

TEST(Label, MonotoneInDelay) {
    for (std::int64_t d = -400; d < 400; ++d) {
        EXPECT_LE(static_cast<int>(label_for_delay(d)), static_cast<int>(label_for_delay(d + 1)));
    }
}

TEST(Label, RecordIsJoinedWithTheSchedule) {
    auto net = ingest::build_synthetic_network({});
    const auto& trip = net.schedule.scheduled_trips.front();
    const auto& stop = net.schedule.trip_stops.at(trip.trip_id)[3];
    const auto tod = *net.schedule.scheduled_arrival(trip.trip_id, stop);
    const auto sched = at(local_date(fx::ts(fx::kDay0)), tod);
    fog::CloudRecord r;
    r.trip_id = std::stoll(trip.trip_id);
    r.stop_id = stop;
    r.gps_timestamp = sched + Seconds{400};
    for (auto [delta, want] : {std::pair{400, Punctuality::Late}, std::pair{-100, Punctuality::Early},
                               std::pair{30, Punctuality::OnTime}}) {
        r.arrival_time = sched + Seconds{delta};
        auto e = label_record(r, net.schedule);
        ASSERT_TRUE(e.has_value());
        EXPECT_EQ(e->target, want);
        EXPECT_DOUBLE_EQ(*e->arrival_time, static_cast<double>(tod.seconds + delta));
    }
    r.stop_id = "nowhere";
    EXPECT_FALSE(label_record(r, net.schedule).has_value());
    r.stop_id = stop;
    r.arrival_time.reset();
    EXPECT_FALSE(label_record(r, net.schedule).has_value());
}

// ---------------------------------------------------------------------------
// splits and trees

TEST(Split, GiniMatchesExhaustiveSearch) {
    std::mt19937_64 rng(99);
    std::size_t compared = 0;
    for (int i = 0; i < 400; ++i) {
        const std::size_t rows = 2 + rng() % 49;
        const std::size_t feats = 1 + rng() % 3;
        const std::size_t min_leaf = 1 + rng() % 3;
        auto m = fx::random_matrix(rng, rows, feats);
        std::vector<std::size_t> all(rows);
        std::iota(all.begin(), all.end(), 0u);
        std::vector<std::size_t> features(feats);
        std::iota(features.begin(), features.end(), 0u);
        auto want = fx::exhaustive_split(m, all, features, min_leaf);
        auto got = best_split(m, all, features, min_leaf);
        if (want.argmax.empty()) {
            EXPECT_FALSE(got.has_value()) << "instance " << i;
            continue;
        }
        ASSERT_TRUE(got.has_value()) << "instance " << i;
        EXPECT_NEAR(got->gain, want.gain, 1e-9) << "instance " << i;
        std::set<std::size_t> left;
        for (auto r : all) {
            if (got->goes_left(m.at(r, got->feature))) {
                left.insert(r);
            }
        }
        EXPECT_TRUE(want.argmax.contains(left)) << "instance " << i;
        ++compared;
    }
    EXPECT_GT(compared, 200u);
}

TEST(Tree, FitsItsBootstrapAtLeastAsWellAsThePlurality) {
    auto data = fx::structured_examples(300, 4);
    auto enc = Encoder::fit(data);
    auto m = encode_all(enc, data);
    std::mt19937_64 rng(8);
    for (int t = 0; t < 30; ++t) {
        std::vector<std::size_t> rows(m.rows());
        for (auto& r : rows) {
            r = rng() % m.rows();
        }
        std::vector<std::size_t> all_features(kFeatureCount);
        std::iota(all_features.begin(), all_features.end(), 0u);
        std::shuffle(all_features.begin(), all_features.end(), rng);
        all_features.resize(3);
        auto tree = DecisionTree::fit(m, rows, all_features, {12, 5});
        ClassCounts counts{};
        std::size_t hit = 0;
        for (auto r : rows) {
            ++counts[static_cast<std::size_t>(m.labels[r])];
            std::vector<double> x(m.values.begin() + static_cast<std::ptrdiff_t>(r * kFeatureCount),
                                  m.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * kFeatureCount));
            hit += tree.predict(x) == m.labels[r] ? 1 : 0;
        }
        EXPECT_GE(hit, *std::max_element(counts.begin(), counts.end()));
    }
}

// ---------------------------------------------------------------------------
// forest

TEST(ForestTest, SeparableToyIsLearnedPerfectly) {
    auto data = separable(200);
    auto cfg = small_forest(15);
    cfg.features_per_tree = kFeatureCount;
    auto f = train_forest(data, cfg);
    for (const auto& e : data) {
        EXPECT_EQ(f.predict(e), e.target);
    }
}

TEST(ForestTest, SameSeedSameForest) {
    auto data = fx::structured_examples(400, 2);
    auto a = train_forest(data, small_forest());
    auto cfg = small_forest();
    cfg.threads = 3;
    auto b = train_forest(data, cfg);
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
    auto c = small_forest();
    c.seed = 2;
    EXPECT_NE(train_forest(data, c).to_json().dump(), a.to_json().dump());
}

TEST(ForestTest, JsonRoundTripPredictsTheSame) {
    auto data = fx::structured_examples(300, 6);
    auto f = train_forest(data, small_forest());
    auto back = Forest::from_json(f.to_json());
    EXPECT_EQ(back, f);
    for (const auto& e : fx::structured_examples(100, 7)) {
        EXPECT_EQ(back.predict(e), f.predict(e));
    }
}

TEST(ForestTest, SingleClassIsATrainingError) {
    auto data = separable(40);
    for (auto& e : data) {
        e.target = Punctuality::OnTime;
    }
    EXPECT_THROW(train_forest(data, small_forest()), TrainingError);
    auto m = Model::fit(data, small_forest());
    EXPECT_FALSE(m.is_forest());
    EXPECT_EQ(m.predict(data[0]), Punctuality::OnTime);
}

TEST(ForestTest, TooFewExamplesIsATrainingError) {
    auto data = separable(9);
    EXPECT_THROW(train_forest(data, small_forest()), TrainingError);
}

TEST(ForestTest, UnseenCategoriesStillPredict) {
    auto data = fx::structured_examples(200, 3);
    auto f = train_forest(data, small_forest());
    Example x = data[0];
    x.stop_id = "never-seen";
    x.street_name.reset();
    EXPECT_NO_THROW(f.predict(x));
}

TEST(Vote, Examples) {
    const int late = static_cast<int>(Punctuality::Late);
    const int on = static_cast<int>(Punctuality::OnTime);
    const int early = static_cast<int>(Punctuality::Early);
    EXPECT_EQ(majority_vote(std::vector<int>{late, late, on}), late);
    EXPECT_EQ(majority_vote(std::vector<int>{early, on}), early);
    EXPECT_EQ(majority_vote(std::vector<int>{on, late}), on);
    EXPECT_EQ(majority_vote(std::vector<int>{late}), late);
}

TEST(Vote, OrderDoesNotMatter) {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 500; ++i) {
        std::vector<int> v(1 + rng() % 12);
        for (auto& x : v) {
            x = static_cast<int>(rng() % 3);
        }
        const int want = majority_vote(v);
        std::shuffle(v.begin(), v.end(), rng);
        EXPECT_EQ(majority_vote(v), want);
    }
}

// ---------------------------------------------------------------------------
// evaluation

TEST(CrossValidation, HundredExamplesGiveFoldsOfTen) {
    auto data = fx::structured_examples(100, 1);
    auto folds = stratified_folds(data, 10, 5);
    std::vector<std::size_t> sizes(10, 0);
    for (auto f : folds) {
        ASSERT_LT(f, 10u);
        ++sizes[f];
    }
    for (auto s : sizes) {
        EXPECT_EQ(s, 10u);
    }
}

TEST(CrossValidation, FoldsAreDisjointAndCoverTheData) {
    for (std::size_t n : {10u, 37u, 101u, 250u}) {
        auto data = fx::structured_examples(n, n);
        auto cv = cross_validate(data, 10, small_forest(5), 1);
        ASSERT_EQ(cv.fold_sizes.size(), 10u);
        EXPECT_EQ(std::accumulate(cv.fold_sizes.begin(), cv.fold_sizes.end(), std::size_t{0}), n);
        auto [lo, hi] = std::minmax_element(cv.fold_sizes.begin(), cv.fold_sizes.end());
        EXPECT_LE(*hi - *lo, 1u);
    }
}

TEST(CrossValidation, FewerExamplesThanFoldsIsAnError) {
    auto data = fx::structured_examples(9, 1);
    EXPECT_THROW(cross_validate(data, 10, small_forest(), 1), std::invalid_argument);
}

TEST(CrossValidation, OneFeatureTargetIsLearned) {
    auto data = fx::structured_examples(600, 21);
    for (auto& e : data) {
        e.target = static_cast<Punctuality>((std::stoi(e.stop_id->substr(5)) - 10) % 3);
    }
    auto cv = cross_validate(data, 10, small_forest(), 3);
    EXPECT_GE(cv.mean, 0.95);
}

TEST(CrossValidation, StationAndHourTargetIsLearned) {
    auto data = fx::structured_examples(2000, 21);
    auto cv = cross_validate(data, 10, small_forest(), 3);
    EXPECT_GE(cv.mean, 0.90);
}

TEST(CrossValidation, ShuffledLabelsSitNearChance) {
    auto data = fx::structured_examples(600, 21, true);
    auto cv = cross_validate(data, 10, small_forest(), 3);
    EXPECT_GE(cv.mean, 0.23);
    EXPECT_LE(cv.mean, 0.43);
}

TEST(LearningCurve, MoreDataDoesNotHurt) {
    auto data = fx::structured_examples(500, 12);
    const std::vector<double> fractions{0.1, 1.0};
    auto curve = learning_curve(data, fractions, small_forest(), 4, 5);
    ASSERT_EQ(curve.size(), 2u);
    EXPECT_LT(curve[0].train_size, curve[1].train_size);
    EXPECT_GE(curve[1].mean_accuracy, curve[0].mean_accuracy - 0.02);
}

TEST(LearningCurve, SameSeedSameValues) {
    auto data = fx::structured_examples(200, 2);
    const std::vector<double> fractions{1.0};
    auto a = learning_curve(data, fractions, small_forest(10), 9, 5);
    auto b = learning_curve(data, fractions, small_forest(10), 9, 5);
    EXPECT_EQ(a[0].mean_accuracy, b[0].mean_accuracy);
}

TEST(LearningCurve, ConstantLabelsArePerfect) {
    auto data = fx::structured_examples(200, 2);
    for (auto& e : data) {
        e.target = Punctuality::Late;
    }
    const std::vector<double> fractions{0.1, 0.5, 1.0};
    for (const auto& p : learning_curve(data, fractions, small_forest(10), 1, 5)) {
        EXPECT_EQ(p.mean_accuracy, 1.0);
    }
}

TEST(LearningCurve, FractionsOutOfRangeOrTooSmallAreErrors) {
    auto data = fx::structured_examples(60, 2);
    EXPECT_THROW(learning_curve(data, std::vector<double>{0.0}, small_forest(), 1), std::invalid_argument);
    EXPECT_THROW(learning_curve(data, std::vector<double>{1.5}, small_forest(), 1), std::invalid_argument);
    EXPECT_THROW(learning_curve(data, std::vector<double>{0.1}, small_forest(), 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// feedback

TEST(CloudFeedback, ProportionsPerStation) {
    std::vector<Prediction> preds;
    for (int i = 0; i < 10; ++i) {
        preds.push_back({"51", "6810785", fx::ts(fx::kDay0 + 100 - i),
                         i < 7 ? Punctuality::OnTime : Punctuality::Late, std::nullopt});
    }
    auto reports = punctuality_reports(preds);
    ASSERT_EQ(reports.size(), 1u);
    EXPECT_DOUBLE_EQ(reports[0].proportion(Punctuality::OnTime), 0.7);
    EXPECT_DOUBLE_EQ(reports[0].proportion(Punctuality::Late), 0.3);
    auto fb = cloud_feedback(preds, fx::ts(fx::kDay0 + 86400));
    ASSERT_EQ(fb.size(), 1u);
    EXPECT_EQ(fb[0].kind, FeedbackKind::PunctualityReport);
    EXPECT_EQ(fb[0].latency_class, LatencyClass::Historical);
    EXPECT_EQ(fb[0].layer, Layer::Cloud);
    EXPECT_EQ(fb[0].subject, "51/6810785");
    EXPECT_EQ(fb[0].observed_at, fx::ts(fx::kDay0 + 91));
    EXPECT_NE(fb[0].detail.find("p_on_time=0.7"), std::string::npos);
}

TEST(CloudFeedback, EmptyAndTwoStations) {
    EXPECT_TRUE(cloud_feedback({}, fx::ts(fx::kDay0)).empty());
    std::vector<Prediction> preds{{"51", "A", fx::ts(fx::kDay0), Punctuality::Early, std::nullopt},
                                  {"51", "B", fx::ts(fx::kDay0), Punctuality::Early, std::nullopt},
                                  {"51", "A", fx::ts(fx::kDay0), Punctuality::Late, std::nullopt}};
    EXPECT_EQ(cloud_feedback(preds, fx::ts(fx::kDay0)).size(), 2u);
}

TEST(CloudNodeTest, EpochPredictsThenRetrains) {
    auto net = ingest::build_synthetic_network({});
    CloudConfig cfg;
    cfg.forest = small_forest(5);
    CloudNode node(cfg, net.schedule);
    std::vector<fog::CloudRecord> recs;
    const auto day = local_date(fx::ts(fx::kDay0));
    for (const auto* trip : net.schedule.trips_on(day)) {
        for (const auto& stop : net.schedule.trip_stops.at(trip->trip_id)) {
            fog::CloudRecord r;
            r.trip_id = std::stoll(trip->trip_id);
            r.stop_id = stop;
            const auto sched = at(day, *net.schedule.scheduled_arrival(trip->trip_id, stop));
            r.arrival_time = sched + Seconds{trip->start.hour() < 12 ? 0 : 400};
            r.gps_timestamp = *r.arrival_time;
            recs.push_back(r);
        }
    }
    fog::CloudRecord orphan;
    orphan.trip_id = 999999;
    recs.push_back(orphan);
    node.receive(recs);
    EXPECT_EQ(node.totals().unlabeled, 1u);
    EXPECT_EQ(node.totals().labeled, recs.size() - 1);
    auto res = node.run_epoch(fx::ts(fx::kDay0 + 86400));
    EXPECT_FALSE(res.model_existed);
    EXPECT_EQ(res.examples, recs.size() - 1);
    EXPECT_FALSE(res.feedback.empty());
    EXPECT_EQ(node.totals().trainings, 2u);
    EXPECT_TRUE(node.model()->is_forest());
    auto idle = node.run_epoch(fx::ts(fx::kDay0 + 2 * 86400));
    EXPECT_EQ(idle.examples, 0u);
    EXPECT_EQ(node.totals().epochs, 2u);
}
