#pragma once

// Cloud node: punctuality labels against the schedule, a random forest with
// majority voting, cross validation, learning curves and historical feedback.

#include "tritide/feedcore.hpp"
#include "tritide/fog.hpp"
#include "tritide/ingest.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

namespace tritide::cloud {

enum class Punctuality { Early = 0, OnTime = 1, Late = 2 };
inline constexpr std::size_t kClasses = 3;

inline std::string_view to_string(Punctuality p) {
    switch (p) {
    case Punctuality::Early:
        return "early";
    case Punctuality::OnTime:
        return "on_time";
    case Punctuality::Late:
        return "late";
    }
    return "?";
}

inline std::optional<Punctuality> parse_punctuality(std::string_view s) {
    if (s == "early") return Punctuality::Early;
    if (s == "on_time") return Punctuality::OnTime;
    if (s == "late") return Punctuality::Late;
    return std::nullopt;
}

inline constexpr std::int64_t kEarlyToleranceS = 80;
inline constexpr std::int64_t kLateToleranceS = 320;

inline Punctuality label_for_delay(std::int64_t delta_s) {
    if (delta_s < -kEarlyToleranceS) {
        return Punctuality::Early;
    }
    if (delta_s > kLateToleranceS) {
        return Punctuality::Late;
    }
    return Punctuality::OnTime;
}

inline Punctuality assign_label(Timestamp actual, Timestamp scheduled) {
    return label_for_delay((actual - scheduled).count());
}

// ---------------------------------------------------------------------------
// Decision trees over a dense feature matrix

enum class FeatureKind { Numeric, Categorical };

/// Row-major feature matrix with class labels 0..kClasses-1. Missing values are NaN.
struct Matrix {
    std::vector<FeatureKind> kinds;
    std::vector<double> values;
    std::vector<int> labels;

    std::size_t features() const { return kinds.size(); }
    std::size_t rows() const { return labels.size(); }
    double at(std::size_t r, std::size_t f) const { return values[r * kinds.size() + f]; }

    void add_row(std::span<const double> x, int label) {
        if (x.size() != kinds.size()) {
            throw std::invalid_argument("matrix row width mismatch");
        }
        values.insert(values.end(), x.begin(), x.end());
        labels.push_back(label);
    }
};

/// Numeric: x <= threshold goes left. Categorical: x == threshold goes left.
/// NaN always goes right.
struct Split {
    std::size_t feature = 0;
    bool categorical = false;
    double threshold = 0.0;
    double gain = 0.0;

    bool goes_left(double x) const {
        if (std::isnan(x)) {
            return false;
        }
        return categorical ? x == threshold : x <= threshold;
    }
};

using ClassCounts = std::array<std::size_t, kClasses>;

inline double gini(const ClassCounts& c) {
    const double n = static_cast<double>(c[0] + c[1] + c[2]);
    if (n == 0.0) {
        return 0.0;
    }
    double s = 1.0;
    for (auto k : c) {
        const double p = static_cast<double>(k) / n;
        s -= p * p;
    }
    return s;
}

inline std::size_t total(const ClassCounts& c) { return c[0] + c[1] + c[2]; }

/// Largest Gini reduction over the given features. Candidates are visited
/// with features in the order given and thresholds ascending; a later
/// candidate replaces the best only on strict improvement. Both children must
/// keep at least `min_leaf` rows, and the gain must be positive.
inline std::optional<Split> best_split(const Matrix& m, std::span<const std::size_t> rows,
                                       std::span<const std::size_t> features, std::size_t min_leaf = 1) {
    constexpr double kMinGain = 1e-12;
    ClassCounts parent{};
    for (auto r : rows) {
        ++parent[static_cast<std::size_t>(m.labels[r])];
    }
    const double n = static_cast<double>(rows.size());
    const double g_parent = gini(parent);
    const std::size_t leaf = std::max<std::size_t>(min_leaf, 1);
    std::optional<Split> best;
    auto consider = [&](std::size_t f, bool cat, double thr, const ClassCounts& left) {
        ClassCounts right{};
        for (std::size_t k = 0; k < kClasses; ++k) {
            right[k] = parent[k] - left[k];
        }
        const std::size_t nl = total(left);
        const std::size_t nr = total(right);
        if (nl < leaf || nr < leaf) {
            return;
        }
        const double g = g_parent - (static_cast<double>(nl) / n) * gini(left) - (static_cast<double>(nr) / n) * gini(right);
        if (g > kMinGain && (!best || g > best->gain)) {
            best = Split{f, cat, thr, g};
        }
    };

    std::vector<std::pair<double, int>> vals;
    vals.reserve(rows.size());
    for (std::size_t f : features) {
        vals.clear();
        for (auto r : rows) {
            const double x = m.at(r, f);
            if (!std::isnan(x)) {
                vals.emplace_back(x, m.labels[r]);
            }
        }
        std::sort(vals.begin(), vals.end());
        if (m.kinds[f] == FeatureKind::Numeric) {
            ClassCounts left{};
            for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
                ++left[static_cast<std::size_t>(vals[i].second)];
                if (vals[i].first == vals[i + 1].first) {
                    continue;
                }
                const double mid = vals[i].first + (vals[i + 1].first - vals[i].first) / 2.0;
                consider(f, false, mid, left);
            }
            // present values left, missing values right
            if (!vals.empty() && vals.size() < rows.size()) {
                ++left[static_cast<std::size_t>(vals.back().second)];
                consider(f, false, vals.back().first, left);
            }
        } else {
            std::size_t i = 0;
            while (i < vals.size()) {
                ClassCounts left{};
                std::size_t j = i;
                while (j < vals.size() && vals[j].first == vals[i].first) {
                    ++left[static_cast<std::size_t>(vals[j].second)];
                    ++j;
                }
                consider(f, true, vals[i].first, left);
                i = j;
            }
        }
    }
    return best;
}

/// Plurality class; ties go to the earliest class in Early, OnTime, Late order.
inline int plurality(const ClassCounts& c) {
    int best = 0;
    for (int k = 1; k < static_cast<int>(kClasses); ++k) {
        if (c[static_cast<std::size_t>(k)] > c[static_cast<std::size_t>(best)]) {
            best = k;
        }
    }
    return best;
}

struct TreeNode {
    /// -1 for leaves.
    std::int64_t left = -1;
    std::int64_t right = -1;
    Split split;
    ClassCounts counts{};

    bool leaf() const { return left < 0; }
};

struct TreeParams {
    std::size_t max_depth = 12;
    std::size_t min_leaf = 5;
};

class DecisionTree {
public:
    DecisionTree() = default;
    DecisionTree(std::vector<TreeNode> nodes, std::vector<std::size_t> features)
        : nodes_(std::move(nodes)), features_(std::move(features)) {}

    static DecisionTree fit(const Matrix& m, std::span<const std::size_t> rows, std::vector<std::size_t> features,
                            const TreeParams& p) {
        DecisionTree t;
        std::sort(features.begin(), features.end());
        t.features_ = std::move(features);
        std::vector<std::size_t> work(rows.begin(), rows.end());
        t.grow(m, work, 0, p);
        return t;
    }

    int predict(std::span<const double> x) const {
        std::size_t i = 0;
        while (!nodes_[i].leaf()) {
            const auto& n = nodes_[i];
            i = static_cast<std::size_t>(n.split.goes_left(x[n.split.feature]) ? n.left : n.right);
        }
        return plurality(nodes_[i].counts);
    }

    const std::vector<TreeNode>& nodes() const { return nodes_; }
    const std::vector<std::size_t>& features() const { return features_; }
    std::size_t depth() const { return depth_from(0); }

    friend bool operator==(const DecisionTree& a, const DecisionTree& b) {
        if (a.features_ != b.features_ || a.nodes_.size() != b.nodes_.size()) {
            return false;
        }
        for (std::size_t i = 0; i < a.nodes_.size(); ++i) {
            const auto& x = a.nodes_[i];
            const auto& y = b.nodes_[i];
            if (x.left != y.left || x.right != y.right || x.counts != y.counts ||
                (!x.leaf() && (x.split.feature != y.split.feature || x.split.categorical != y.split.categorical ||
                               x.split.threshold != y.split.threshold))) {
                return false;
            }
        }
        return true;
    }

private:
    std::size_t grow(const Matrix& m, std::vector<std::size_t>& rows, std::size_t depth, const TreeParams& p) {
        const std::size_t id = nodes_.size();
        nodes_.emplace_back();
        ClassCounts counts{};
        for (auto r : rows) {
            ++counts[static_cast<std::size_t>(m.labels[r])];
        }
        nodes_[id].counts = counts;
        const bool pure = std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }) <= 1;
        if (pure || depth >= p.max_depth || rows.size() < 2 * std::max<std::size_t>(p.min_leaf, 1)) {
            return id;
        }
        auto split = best_split(m, rows, features_, p.min_leaf);
        if (!split) {
            return id;
        }
        std::vector<std::size_t> left;
        std::vector<std::size_t> right;
        for (auto r : rows) {
            (split->goes_left(m.at(r, split->feature)) ? left : right).push_back(r);
        }
        rows.clear();
        rows.shrink_to_fit();
        nodes_[id].split = *split;
        const auto l = grow(m, left, depth + 1, p);
        const auto r = grow(m, right, depth + 1, p);
        nodes_[id].left = static_cast<std::int64_t>(l);
        nodes_[id].right = static_cast<std::int64_t>(r);
        return id;
    }

    std::size_t depth_from(std::size_t i) const {
        if (nodes_.empty() || nodes_[i].leaf()) {
            return 0;
        }
        return 1 + std::max(depth_from(static_cast<std::size_t>(nodes_[i].left)),
                            depth_from(static_cast<std::size_t>(nodes_[i].right)));
    }

    std::vector<TreeNode> nodes_;
    std::vector<std::size_t> features_;
};

/// Majority vote; ties resolve to the earliest class in Early, OnTime, Late order.
inline int majority_vote(std::span<const int> votes) {
    ClassCounts c{};
    for (int v : votes) {
        ++c[static_cast<std::size_t>(v)];
    }
    return plurality(c);
}

// ---------------------------------------------------------------------------
// Examples and encoding

inline constexpr std::size_t kFeatureCount = 9;

namespace feature {
inline constexpr std::size_t trip_id = 0;
inline constexpr std::size_t lat = 1;
inline constexpr std::size_t lng = 2;
inline constexpr std::size_t gps_timestamp = 3;
inline constexpr std::size_t street_name = 4;
inline constexpr std::size_t direction = 5;
inline constexpr std::size_t stop_id = 6;
inline constexpr std::size_t movement_sequence = 7;
inline constexpr std::size_t arrival_time = 8;
} // namespace feature

inline constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "trip_id",  "lat",     "lng", "gps_timestamp", "street_name", "direction", "stop_id", "movement_sequence",
    "arrival_time"};

inline constexpr std::array<FeatureKind, kFeatureCount> kFeatureKinds = {
    FeatureKind::Categorical, FeatureKind::Numeric, FeatureKind::Numeric,
    FeatureKind::Numeric,     FeatureKind::Categorical, FeatureKind::Categorical,
    FeatureKind::Categorical, FeatureKind::Numeric, FeatureKind::Numeric};

/// Predictor inputs; times are seconds of the local day.
struct Example {
    std::optional<std::int64_t> trip_id;
    double lat = 0.0;
    double lng = 0.0;
    double gps_timestamp = 0.0;
    std::optional<std::string> street_name;
    std::optional<Direction> direction;
    std::optional<std::string> stop_id;
    std::optional<std::int64_t> movement_sequence;
    std::optional<double> arrival_time;

    friend bool operator==(const Example&, const Example&) = default;
};

struct LabeledExample : Example {
    Punctuality target = Punctuality::OnTime;

    friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

inline std::array<std::optional<std::string>, kFeatureCount> categorical_text(const Example& e) {
    std::array<std::optional<std::string>, kFeatureCount> out{};
    if (e.trip_id) {
        out[feature::trip_id] = std::to_string(*e.trip_id);
    }
    out[feature::street_name] = e.street_name;
    if (e.direction) {
        out[feature::direction] = std::string(to_string(*e.direction));
    }
    out[feature::stop_id] = e.stop_id;
    return out;
}

/// Category vocabularies fixed at training time. Code 0 is the reserved
/// Unknown symbol for categories never seen in training.
class Encoder {
public:
    static constexpr double kUnknown = 0.0;

    static Encoder fit(std::span<const LabeledExample> data) {
        Encoder enc;
        for (const auto& e : data) {
            auto cats = categorical_text(e);
            for (std::size_t f = 0; f < kFeatureCount; ++f) {
                if (cats[f]) {
                    enc.vocab_[f].try_emplace(*cats[f], 0);
                }
            }
        }
        for (auto& v : enc.vocab_) {
            double code = 1.0;
            for (auto& [_, c] : v) {
                c = code;
                code += 1.0;
            }
        }
        return enc;
    }

    std::array<double, kFeatureCount> encode(const Example& e) const {
        constexpr double nan = std::numeric_limits<double>::quiet_NaN();
        std::array<double, kFeatureCount> x{};
        auto cats = categorical_text(e);
        for (std::size_t f = 0; f < kFeatureCount; ++f) {
            if (kFeatureKinds[f] != FeatureKind::Categorical) {
                continue;
            }
            if (!cats[f]) {
                x[f] = nan;
                continue;
            }
            auto it = vocab_[f].find(*cats[f]);
            x[f] = it == vocab_[f].end() ? kUnknown : it->second;
        }
        x[feature::lat] = e.lat;
        x[feature::lng] = e.lng;
        x[feature::gps_timestamp] = e.gps_timestamp;
        x[feature::movement_sequence] = e.movement_sequence ? static_cast<double>(*e.movement_sequence) : nan;
        x[feature::arrival_time] = e.arrival_time.value_or(nan);
        return x;
    }

    const std::array<std::map<std::string, double>, kFeatureCount>& vocab() const { return vocab_; }
    std::array<std::map<std::string, double>, kFeatureCount>& vocab() { return vocab_; }

    friend bool operator==(const Encoder&, const Encoder&) = default;

private:
    std::array<std::map<std::string, double>, kFeatureCount> vocab_;
};

inline Matrix encode_all(const Encoder& enc, std::span<const LabeledExample> data) {
    Matrix m;
    m.kinds.assign(kFeatureKinds.begin(), kFeatureKinds.end());
    m.values.reserve(data.size() * kFeatureCount);
    for (const auto& e : data) {
        auto x = enc.encode(e);
        m.add_row(x, static_cast<int>(e.target));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forest

struct ForestConfig {
    std::size_t n_trees = 100;
    std::size_t features_per_tree = 3;
    std::size_t max_depth = 12;
    std::size_t min_leaf = 5;
    std::uint64_t seed = 1;
    bool use_trip_id = false;
    bool use_time_features = true;
    /// 0 picks the hardware concurrency.
    std::size_t threads = 0;

    std::vector<std::size_t> enabled_features() const {
        std::vector<std::size_t> out;
        for (std::size_t f = 0; f < kFeatureCount; ++f) {
            if (f == feature::trip_id && !use_trip_id) {
                continue;
            }
            if ((f == feature::gps_timestamp || f == feature::arrival_time) && !use_time_features) {
                continue;
            }
            out.push_back(f);
        }
        return out;
    }
};

class TrainingError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::mt19937_64 tree_rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x7f4a7c15u};
    return std::mt19937_64(seq);
}

inline std::uint64_t draw_below(std::mt19937_64& rng, std::uint64_t n) {
    // rejection sampling keeps this independent of library distributions
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = rng();
    while (v >= limit) {
        v = rng();
    }
    return v % n;
}

template <class T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[draw_below(rng, i)]);
    }
}

template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
    if (threads == 0) {
        threads = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    }
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            f(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += threads) {
                f(i);
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
}

} // namespace detail

class Forest {
public:
    static constexpr int kFormatVersion = 1;

    Forest() = default;

    static Forest train(std::span<const LabeledExample> data, const ForestConfig& cfg) {
        if (cfg.n_trees == 0) {
            throw TrainingError("forest needs at least one tree");
        }
        ClassCounts present{};
        for (const auto& e : data) {
            ++present[static_cast<std::size_t>(e.target)];
        }
        if (std::count_if(present.begin(), present.end(), [](std::size_t c) { return c > 0; }) < 2) {
            throw TrainingError("training data has a single class; use a constant classifier instead");
        }
        if (data.size() < 2 * cfg.min_leaf) {
            throw TrainingError("need at least " + std::to_string(2 * cfg.min_leaf) + " examples, got " +
                                std::to_string(data.size()));
        }
        Forest f;
        f.cfg_ = cfg;
        f.encoder_ = Encoder::fit(data);
        const Matrix m = encode_all(f.encoder_, data);
        const auto enabled = cfg.enabled_features();
        const std::size_t k = std::clamp<std::size_t>(cfg.features_per_tree, 1, enabled.size());
        f.trees_.resize(cfg.n_trees);
        detail::parallel_for(cfg.n_trees, cfg.threads, [&](std::size_t i) {
            auto rng = detail::tree_rng(cfg.seed, i);
            std::vector<std::size_t> rows(m.rows());
            for (auto& r : rows) {
                r = detail::draw_below(rng, m.rows());
            }
            auto feats = enabled;
            detail::shuffle(feats, rng);
            feats.resize(k);
            f.trees_[i] = DecisionTree::fit(m, rows, feats, {cfg.max_depth, cfg.min_leaf});
        });
        return f;
    }

    Punctuality predict(const Example& x) const {
        const auto enc = encoder_.encode(x);
        std::vector<int> votes;
        votes.reserve(trees_.size());
        for (const auto& t : trees_) {
            votes.push_back(t.predict(enc));
        }
        return static_cast<Punctuality>(majority_vote(votes));
    }

    const std::vector<DecisionTree>& trees() const { return trees_; }
    const ForestConfig& config() const { return cfg_; }
    const Encoder& encoder() const { return encoder_; }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format_version"] = kFormatVersion;
        j["class_order"] = {"early", "on_time", "late"};
        j["features"] = nlohmann::json::array();
        for (std::size_t f = 0; f < kFeatureCount; ++f) {
            j["features"].push_back({{"name", kFeatureNames[f]},
                                     {"kind", kFeatureKinds[f] == FeatureKind::Numeric ? "numeric" : "categorical"}});
        }
        j["config"] = {{"n_trees", cfg_.n_trees},         {"features_per_tree", cfg_.features_per_tree},
                       {"max_depth", cfg_.max_depth},     {"min_leaf", cfg_.min_leaf},
                       {"seed", cfg_.seed},               {"use_trip_id", cfg_.use_trip_id},
                       {"use_time_features", cfg_.use_time_features}};
        auto& vocab = j["vocabularies"];
        vocab = nlohmann::json::object();
        for (std::size_t f = 0; f < kFeatureCount; ++f) {
            if (kFeatureKinds[f] != FeatureKind::Categorical) {
                continue;
            }
            auto& v = vocab[std::string(kFeatureNames[f])];
            v = nlohmann::json::object();
            for (const auto& [name, code] : encoder_.vocab()[f]) {
                v[name] = code;
            }
        }
        j["trees"] = nlohmann::json::array();
        for (const auto& t : trees_) {
            nlohmann::json tj;
            tj["features"] = t.features();
            tj["nodes"] = nlohmann::json::array();
            for (const auto& n : t.nodes()) {
                if (n.leaf()) {
                    tj["nodes"].push_back({{"counts", n.counts}});
                } else {
                    tj["nodes"].push_back({{"feature", n.split.feature},
                                           {"categorical", n.split.categorical},
                                           {"threshold", n.split.threshold},
                                           {"left", n.left},
                                           {"right", n.right},
                                           {"counts", n.counts}});
                }
            }
            j["trees"].push_back(std::move(tj));
        }
        return j;
    }

    static Forest from_json(const nlohmann::json& j) {
        if (j.at("format_version").get<int>() != kFormatVersion) {
            throw std::runtime_error("unsupported forest format version");
        }
        Forest f;
        const auto& c = j.at("config");
        f.cfg_.n_trees = c.at("n_trees");
        f.cfg_.features_per_tree = c.at("features_per_tree");
        f.cfg_.max_depth = c.at("max_depth");
        f.cfg_.min_leaf = c.at("min_leaf");
        f.cfg_.seed = c.at("seed");
        f.cfg_.use_trip_id = c.at("use_trip_id");
        f.cfg_.use_time_features = c.at("use_time_features");
        for (std::size_t fi = 0; fi < kFeatureCount; ++fi) {
            const std::string name(kFeatureNames[fi]);
            if (j.at("vocabularies").contains(name)) {
                for (const auto& [k, v] : j.at("vocabularies").at(name).items()) {
                    f.encoder_.vocab()[fi][k] = v.get<double>();
                }
            }
        }
        for (const auto& tj : j.at("trees")) {
            std::vector<TreeNode> nodes;
            for (const auto& nj : tj.at("nodes")) {
                TreeNode n;
                n.counts = nj.at("counts").get<ClassCounts>();
                if (nj.contains("feature")) {
                    n.split.feature = nj.at("feature");
                    n.split.categorical = nj.at("categorical");
                    n.split.threshold = nj.at("threshold");
                    n.left = nj.at("left");
                    n.right = nj.at("right");
                }
                nodes.push_back(n);
            }
            f.trees_.emplace_back(std::move(nodes), tj.at("features").get<std::vector<std::size_t>>());
        }
        return f;
    }

    friend bool operator==(const Forest& a, const Forest& b) {
        return a.trees_ == b.trees_ && a.encoder_ == b.encoder_;
    }

private:
    ForestConfig cfg_;
    Encoder encoder_;
    std::vector<DecisionTree> trees_;
};

inline Forest train_forest(std::span<const LabeledExample> data, const ForestConfig& cfg) {
    return Forest::train(data, cfg);
}

inline Punctuality predict(const Forest& f, const Example& x) { return f.predict(x); }

/// Always answers one class; stands in when training data has a single class.
struct ConstantClassifier {
    Punctuality label = Punctuality::OnTime;

    Punctuality predict(const Example&) const { return label; }
};

/// A forest, or a constant classifier when the data cannot support one.
class Model {
public:
    Model() = default;
    explicit Model(Forest f) : impl_(std::move(f)) {}
    explicit Model(ConstantClassifier c) : impl_(c) {}

    static Model fit(std::span<const LabeledExample> data, const ForestConfig& cfg) {
        ClassCounts present{};
        for (const auto& e : data) {
            ++present[static_cast<std::size_t>(e.target)];
        }
        const auto classes = std::count_if(present.begin(), present.end(), [](std::size_t c) { return c > 0; });
        if (classes >= 2 && data.size() >= 2 * cfg.min_leaf) {
            return Model(Forest::train(data, cfg));
        }
        return Model(ConstantClassifier{static_cast<Punctuality>(plurality(present))});
    }

    Punctuality predict(const Example& x) const {
        return std::visit([&](const auto& m) { return m.predict(x); }, impl_);
    }

    bool is_forest() const { return std::holds_alternative<Forest>(impl_); }
    const Forest* forest() const { return std::get_if<Forest>(&impl_); }

    nlohmann::json to_json() const {
        if (const auto* f = forest()) {
            return f->to_json();
        }
        return {{"format_version", Forest::kFormatVersion},
                {"constant", to_string(std::get<ConstantClassifier>(impl_).label)}};
    }

private:
    std::variant<ConstantClassifier, Forest> impl_;
};

inline double accuracy(const Model& m, std::span<const LabeledExample> test) {
    if (test.empty()) {
        return 0.0;
    }
    std::size_t hit = 0;
    for (const auto& e : test) {
        hit += m.predict(e) == e.target ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------
// Evaluation

/// Fold of every example: classes are shuffled separately, laid end to end
/// in class order, and dealt round-robin into k folds.
inline std::vector<std::size_t> stratified_folds(std::span<const LabeledExample> data, std::size_t k,
                                                 std::uint64_t seed) {
    if (k == 0 || data.size() < k) {
        throw std::invalid_argument("cross validation needs at least k=" + std::to_string(k) + " examples");
    }
    auto rng = detail::tree_rng(seed, 0xC0FFEE);
    std::array<std::vector<std::size_t>, kClasses> by_class;
    for (std::size_t i = 0; i < data.size(); ++i) {
        by_class[static_cast<std::size_t>(data[i].target)].push_back(i);
    }
    std::vector<std::size_t> fold(data.size());
    std::size_t pos = 0;
    for (auto& group : by_class) {
        detail::shuffle(group, rng);
        for (auto i : group) {
            fold[i] = pos++ % k;
        }
    }
    return fold;
}

struct CrossValidation {
    std::vector<double> fold_accuracies;
    std::vector<std::size_t> fold_sizes;
    double mean = 0.0;
    double stddev = 0.0;
};

inline CrossValidation cross_validate(std::span<const LabeledExample> data, std::size_t k, const ForestConfig& cfg,
                                      std::uint64_t seed) {
    const auto fold = stratified_folds(data, k, seed);
    CrossValidation out;
    for (std::size_t f = 0; f < k; ++f) {
        std::vector<LabeledExample> train;
        std::vector<LabeledExample> test;
        for (std::size_t i = 0; i < data.size(); ++i) {
            (fold[i] == f ? test : train).push_back(data[i]);
        }
        ForestConfig c = cfg;
        c.seed = cfg.seed + f;
        const auto model = Model::fit(train, c);
        out.fold_accuracies.push_back(accuracy(model, test));
        out.fold_sizes.push_back(test.size());
    }
    out.mean = std::accumulate(out.fold_accuracies.begin(), out.fold_accuracies.end(), 0.0) / static_cast<double>(k);
    double var = 0.0;
    for (double a : out.fold_accuracies) {
        var += (a - out.mean) * (a - out.mean);
    }
    out.stddev = std::sqrt(var / static_cast<double>(k));
    return out;
}

struct CurvePoint {
    double fraction = 0.0;
    std::size_t train_size = 0;
    double mean_accuracy = 0.0;
};

/// Accuracy on a fixed stratified 20% holdout for growing subsamples of the
/// remaining 80%, averaged over `repeats` seeds.
inline std::vector<CurvePoint> learning_curve(std::span<const LabeledExample> data, std::span<const double> fractions,
                                              const ForestConfig& cfg, std::uint64_t seed, std::size_t repeats = 5) {
    if (data.size() < 5) {
        throw std::invalid_argument("learning curve needs at least 5 examples");
    }
    const auto fold = stratified_folds(data, 5, seed);
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> test;
    for (std::size_t i = 0; i < data.size(); ++i) {
        (fold[i] == 0 ? test : train).push_back(data[i]);
    }
    for (double f : fractions) {
        if (!(f > 0.0 && f <= 1.0)) {
            throw std::invalid_argument("learning curve fractions must lie in (0, 1]");
        }
        const auto n = static_cast<std::size_t>(std::ceil(f * static_cast<double>(train.size())));
        if (n < 2 * cfg.min_leaf) {
            throw std::invalid_argument("fraction " + tritide::detail::format_double(f) + " leaves " +
                                        std::to_string(n) + " training examples, below 2 x min_leaf");
        }
    }
    std::vector<CurvePoint> out;
    for (double f : fractions) {
        const auto n = static_cast<std::size_t>(std::ceil(f * static_cast<double>(train.size())));
        double sum = 0.0;
        for (std::size_t r = 0; r < repeats; ++r) {
            auto rng = detail::tree_rng(seed + r, 0x5EED);
            std::vector<std::size_t> idx(train.size());
            std::iota(idx.begin(), idx.end(), 0);
            detail::shuffle(idx, rng);
            std::vector<LabeledExample> sub;
            sub.reserve(n);
            for (std::size_t i = 0; i < n; ++i) {
                sub.push_back(train[idx[i]]);
            }
            ForestConfig c = cfg;
            c.seed = cfg.seed + r;
            sum += accuracy(Model::fit(sub, c), test);
        }
        out.push_back({f, n, sum / static_cast<double>(repeats)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Labeling fog records and historical feedback

struct Prediction {
    std::string route_id;
    std::string station_id;
    Timestamp arrival{};
    Punctuality predicted = Punctuality::OnTime;
    std::optional<Punctuality> actual;
};

struct PunctualityReport {
    std::string route_id;
    std::string station_id;
    ClassCounts counts{};

    std::size_t total() const { return cloud::total(counts); }
    double proportion(Punctuality p) const {
        const auto n = total();
        return n == 0 ? 0.0 : static_cast<double>(counts[static_cast<std::size_t>(p)]) / static_cast<double>(n);
    }
};

inline std::vector<PunctualityReport> punctuality_reports(std::span<const Prediction> predictions) {
    std::map<std::pair<std::string, std::string>, PunctualityReport> acc;
    for (const auto& p : predictions) {
        auto& r = acc[{p.route_id, p.station_id}];
        r.route_id = p.route_id;
        r.station_id = p.station_id;
        ++r.counts[static_cast<std::size_t>(p.predicted)];
    }
    std::vector<PunctualityReport> out;
    for (auto& [_, r] : acc) {
        out.push_back(std::move(r));
    }
    return out;
}

inline std::string describe(const PunctualityReport& r) {
    using tritide::detail::format_double;
    return "n=" + std::to_string(r.total()) + " early=" + std::to_string(r.counts[0]) +
           " on_time=" + std::to_string(r.counts[1]) + " late=" + std::to_string(r.counts[2]) +
           " p_early=" + format_double(r.proportion(Punctuality::Early)) +
           " p_on_time=" + format_double(r.proportion(Punctuality::OnTime)) +
           " p_late=" + format_double(r.proportion(Punctuality::Late));
}

/// One Historical PunctualityReport per (route, station) among the predictions.
inline std::vector<Feedback> cloud_feedback(std::span<const Prediction> predictions, Timestamp emitted_at) {
    std::vector<Feedback> out;
    std::map<std::pair<std::string, std::string>, Timestamp> first_seen;
    for (const auto& p : predictions) {
        auto [it, fresh] = first_seen.try_emplace({p.route_id, p.station_id}, p.arrival);
        if (!fresh) {
            it->second = std::min(it->second, p.arrival);
        }
    }
    for (const auto& r : punctuality_reports(predictions)) {
        out.push_back(make_feedback(Layer::Cloud, LatencyClass::Historical, FeedbackKind::PunctualityReport,
                                    r.route_id + "/" + r.station_id, describe(r), emitted_at,
                                    first_seen.at({r.route_id, r.station_id})));
    }
    return out;
}

/// Joins a fog record with the schedule. Records lacking a trip, stop or
/// arrival, or with no scheduled arrival for that (trip, stop), get no label.
/// The service date is whichever of the arrival's local date or the day
/// before puts the scheduled time closest to the arrival.
inline std::optional<LabeledExample> label_record(const fog::CloudRecord& r, const ingest::ScheduleDB& sched,
                                                  Seconds utc_offset = Seconds{0}) {
    if (!r.trip_id || !r.stop_id || !r.arrival_time) {
        return std::nullopt;
    }
    const auto tod = sched.scheduled_arrival(std::to_string(*r.trip_id), *r.stop_id);
    if (!tod) {
        return std::nullopt;
    }
    const Date d0 = local_date(*r.arrival_time, utc_offset);
    std::optional<std::int64_t> delta;
    for (Date d : {d0, d0 - std::chrono::days{1}}) {
        const auto dd = (*r.arrival_time - at(d, *tod, utc_offset)).count();
        if (!delta || std::llabs(dd) < std::llabs(*delta)) {
            delta = dd;
        }
    }
    LabeledExample e;
    e.trip_id = r.trip_id;
    e.lat = r.lat;
    e.lng = r.lng;
    e.gps_timestamp = static_cast<double>(local_time_of_day(r.gps_timestamp, utc_offset).seconds);
    e.street_name = r.street_name;
    e.direction = r.direction;
    e.stop_id = r.stop_id;
    e.movement_sequence = r.movement_sequence;
    e.arrival_time = static_cast<double>(local_time_of_day(*r.arrival_time, utc_offset).seconds);
    e.target = label_for_delay(*delta);
    return e;
}

// ---------------------------------------------------------------------------
// Cloud node

struct CloudConfig {
    ForestConfig forest;
    Seconds epoch{24 * 3600};
    /// Most recent labeled examples kept for retraining; 0 keeps all.
    std::size_t max_train_examples = 20000;
    bool evaluate = true;
    std::size_t cv_folds = 10;
    std::vector<double> curve_fractions = {0.1, 0.25, 0.5, 0.75, 1.0};
    std::size_t curve_repeats = 5;
    /// Subsample size for the end-of-run evaluation; 0 uses everything.
    std::size_t eval_max_examples = 3000;
    ForestConfig eval_forest = [] {
        ForestConfig f;
        f.n_trees = 25;
        return f;
    }();
    Seconds utc_offset{0};
};

struct EpochResult {
    Timestamp at{};
    std::size_t examples = 0;
    std::size_t correct = 0;
    bool model_existed = false;
    std::vector<Feedback> feedback;
};

struct CloudTotals {
    std::size_t tuples_in = 0;
    std::size_t bytes_in = 0;
    std::size_t labeled = 0;
    std::size_t unlabeled = 0;
    std::size_t predictions = 0;
    std::size_t correct = 0;
    std::size_t epochs = 0;
    std::size_t trainings = 0;
};

struct Evaluation {
    std::optional<CrossValidation> cv;
    std::vector<CurvePoint> curve;
    std::size_t examples = 0;
    std::string note;
};

class CloudNode {
public:
    CloudNode(CloudConfig cfg, const ingest::ScheduleDB& sched) : cfg_(std::move(cfg)), sched_(&sched) {}

    const CloudTotals& totals() const { return totals_; }
    const std::vector<EpochResult>& epochs() const { return epochs_; }
    const std::vector<LabeledExample>& history() const { return history_; }
    const std::optional<Model>& model() const { return model_; }
    const std::vector<Prediction>& predictions() const { return predictions_; }

    void receive(std::span<const fog::CloudRecord> records, std::size_t wire_bytes = 0) {
        totals_.tuples_in += records.size();
        totals_.bytes_in += wire_bytes;
        for (const auto& r : records) {
            auto ex = label_record(r, *sched_, cfg_.utc_offset);
            if (!ex) {
                ++totals_.unlabeled;
                continue;
            }
            ++totals_.labeled;
            std::string route;
            if (const auto* st = sched_->find_trip(std::to_string(*r.trip_id))) {
                route = st->route_id;
            }
            pending_.push_back({std::move(*ex), std::move(route), *r.arrival_time});
        }
    }

    /// Predicts the examples gathered since the last epoch with the current
    /// model (training one first if none exists), reports punctuality per
    /// station, then retrains on the history.
    EpochResult run_epoch(Timestamp now) {
        EpochResult res;
        res.at = now;
        ++totals_.epochs;
        if (pending_.empty()) {
            epochs_.push_back(res);
            return res;
        }
        res.model_existed = model_.has_value();
        if (!model_) {
            std::vector<LabeledExample> first;
            for (const auto& p : pending_) {
                first.push_back(p.example);
            }
            retrain(first);
        }
        std::vector<Prediction> preds;
        for (const auto& p : pending_) {
            Prediction pr{p.route, p.example.stop_id.value_or(""), p.arrival, model_->predict(p.example),
                          p.example.target};
            res.correct += pr.predicted == p.example.target ? 1 : 0;
            preds.push_back(std::move(pr));
        }
        res.examples = preds.size();
        totals_.predictions += preds.size();
        totals_.correct += res.correct;
        res.feedback = cloud_feedback(preds, now);
        predictions_.insert(predictions_.end(), preds.begin(), preds.end());
        for (auto& p : pending_) {
            history_.push_back(std::move(p.example));
        }
        pending_.clear();
        if (cfg_.max_train_examples > 0 && history_.size() > cfg_.max_train_examples) {
            history_.erase(history_.begin(),
                           history_.begin() + static_cast<std::ptrdiff_t>(history_.size() - cfg_.max_train_examples));
        }
        retrain(history_);
        epochs_.push_back(res);
        return res;
    }

    bool has_pending() const { return !pending_.empty(); }

    /// Cross validation and learning curve over (a seeded subsample of) the history.
    Evaluation evaluate() const {
        Evaluation ev;
        std::vector<LabeledExample> data = history_;
        if (cfg_.eval_max_examples > 0 && data.size() > cfg_.eval_max_examples) {
            auto rng = detail::tree_rng(cfg_.forest.seed, 0xE7A1);
            detail::shuffle(data, rng);
            data.resize(cfg_.eval_max_examples);
        }
        ev.examples = data.size();
        try {
            ev.cv = cross_validate(data, cfg_.cv_folds, cfg_.eval_forest, cfg_.forest.seed);
            ev.curve = learning_curve(data, cfg_.curve_fractions, cfg_.eval_forest, cfg_.forest.seed,
                                      cfg_.curve_repeats);
        } catch (const std::invalid_argument& e) {
            ev.note = e.what();
        }
        return ev;
    }

private:
    void retrain(std::span<const LabeledExample> data) {
        model_ = Model::fit(data, cfg_.forest);
        ++totals_.trainings;
    }

    struct Pending {
        LabeledExample example;
        std::string route;
        Timestamp arrival;
    };

    CloudConfig cfg_;
    const ingest::ScheduleDB* sched_;
    std::vector<Pending> pending_;
    std::vector<LabeledExample> history_;
    std::vector<Prediction> predictions_;
    std::vector<EpochResult> epochs_;
    std::optional<Model> model_;
    CloudTotals totals_;
};

} // namespace tritide::cloud
