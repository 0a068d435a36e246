#pragma once

// Fixtures and independent reference implementations shared by the unit
// suites and the acceptance runner. Nothing here includes GoogleTest.

#include "tritide/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <vector>

namespace tritide::fixtures {

inline constexpr double kEarthRadiusM = 6371000.0;

/// Meridian arc length: exact great-circle distance for equal longitudes.
inline double meridian_m(double dlat_deg) { return std::abs(dlat_deg) * std::numbers::pi / 180.0 * kEarthRadiusM; }

/// Spherical law of cosines, an independent formula for the same great-circle distance.
inline double cosine_law_m(const GeoPoint& a, const GeoPoint& b) {
    const double p1 = a.lat * std::numbers::pi / 180.0;
    const double p2 = b.lat * std::numbers::pi / 180.0;
    const double dl = (b.lng - a.lng) * std::numbers::pi / 180.0;
    const double c = std::sin(p1) * std::sin(p2) + std::cos(p1) * std::cos(p2) * std::cos(dl);
    return std::acos(std::clamp(c, -1.0, 1.0)) * kEarthRadiusM;
}

inline Timestamp ts(std::int64_t epoch_s) { return from_epoch(epoch_s); }

/// 2017-02-14T00:00:00Z
inline constexpr std::int64_t kDay0 = 1487030400;

inline FeedTuple make_tuple(std::int64_t trip, std::int64_t epoch_s, GeoPoint p, std::int64_t vlr_id = 0) {
    FeedTuple t;
    t.vlr_id = vlr_id != 0 ? vlr_id : trip * 100000 + epoch_s % 100000;
    t.route_id_vlr = 51;
    t.route_name = "51 Hildegard";
    t.route_id_rta = 51;
    t.route_nickname = "51";
    t.trip_id_br = trip;
    t.transit_authority_service_time_id = 1;
    t.trip_id_tta = 5100;
    t.trip_start = TimeOfDay{6 * 3600};
    t.trip_finish = TimeOfDay{6 * 3600 + 2700};
    t.vehicle_id_vab = 1001;
    t.vehicle_id_vlr = 1001;
    t.vehicle_id_vlr_ta = "Bus 1001";
    t.bdescription = "40ft low-floor";
    t.lat = p.lat;
    t.lng = p.lng;
    t.timestamp = ts(epoch_s);
    return t;
}

inline MovementRecord make_record(GeoPoint p, std::int64_t epoch_s, Motion m, std::int64_t trip = 1) {
    MovementRecord r;
    r.base = make_tuple(trip, epoch_s, p);
    r.motion = m;
    return r;
}

/// Feed tuples grouped per trip instance, time-sorted and stop/move tagged.
inline std::map<std::int64_t, std::vector<MovementRecord>> tag_trips(const std::vector<ingest::FeedItem>& items,
                                                                     double threshold = edge::kStopThresholdM) {
    std::map<std::int64_t, std::vector<FeedTuple>> by_trip;
    for (const auto& it : items) {
        if (const auto* t = std::get_if<FeedTuple>(&it)) {
            by_trip[t->trip_id_br.value_or(0)].push_back(*t);
        }
    }
    std::map<std::int64_t, std::vector<MovementRecord>> out;
    for (auto& [id, tuples] : by_trip) {
        std::stable_sort(tuples.begin(), tuples.end(),
                         [](const FeedTuple& a, const FeedTuple& b) { return a.timestamp < b.timestamp; });
        auto& recs = out[id];
        for (const auto& t : tuples) {
            recs.push_back(edge::tag_stop_move(recs.empty() ? nullptr : &recs.back(), t, threshold));
        }
    }
    return out;
}

/// Small synthetic network and feed: `days` days, `trips` trips per weekday.
struct Scenario {
    ingest::SyntheticNetwork net;
    ingest::SyntheticFeed feed;
};

inline Scenario make_scenario(int trips, int days, double noise_m = 0.0, std::uint64_t seed = 1) {
    ingest::NetworkParams p;
    p.weekday_trips = trips;
    p.sunday_trips = std::max(1, trips / 3);
    Scenario s{ingest::build_synthetic_network(p), {}};
    ingest::SynthConfig c;
    c.weekday_trips = trips;
    c.sunday_trips = p.sunday_trips;
    c.days = days;
    c.gps_noise_sigma_m = noise_m;
    c.rng_seed = seed;
    s.feed = ingest::generate_feed(c, s.net.schedule, s.net.geo);
    return s;
}

// ---------------------------------------------------------------------------
// Contextualization scored against generator dwells

struct VisitScore {
    std::size_t visits = 0;
    std::size_t correct = 0;
    std::size_t timed = 0;
    double max_arrival_err_s = 0.0;
    double max_departure_err_s = 0.0;

    double accuracy() const { return visits == 0 ? 1.0 : static_cast<double>(correct) / static_cast<double>(visits); }
};

/// A visit is correct when some record inside the dwell interval carries the
/// dwell's station and none carries another. Arrival/departure errors come from
/// the Stopover run stamped on those records.
inline VisitScore score_visits(const Scenario& s) {
    fog::ContextIndexes idx{fog::StationIndex(fog::station_buffers(s.net.schedule)), fog::IntersectionIndex(s.net.geo)};
    auto trips = tag_trips(s.feed.items);
    for (auto& [_, recs] : trips) {
        fog::contextualize_trip(recs, s.net.schedule, s.net.geo, idx);
    }
    VisitScore out;
    for (const auto& d : s.feed.truth.dwells) {
        auto it = trips.find(d.instance_id);
        if (it == trips.end()) {
            continue;
        }
        ++out.visits;
        bool hit = false;
        bool wrong = false;
        std::optional<std::pair<Timestamp, Timestamp>> run;
        for (const auto& r : it->second) {
            const auto t = static_cast<double>(epoch_seconds(r.timestamp()));
            if (t < d.start_epoch() || t > d.end_epoch() || !r.station_id) {
                continue;
            }
            (*r.station_id == d.station_id ? hit : wrong) = true;
            if (*r.station_id == d.station_id && r.arrival_time && !run) {
                run = std::pair{*r.arrival_time, *r.departure_time};
            }
        }
        if (hit && !wrong) {
            ++out.correct;
        }
        if (run) {
            ++out.timed;
            const auto arr = static_cast<double>(epoch_seconds(run->first));
            const auto dep = static_cast<double>(epoch_seconds(run->second));
            out.max_arrival_err_s = std::max(out.max_arrival_err_s, std::abs(arr - d.start_epoch()));
            out.max_departure_err_s = std::max(out.max_departure_err_s, std::abs(dep - d.end_epoch()));
        }
    }
    return out;
}

/// Point `north_m` metres north and `east_m` metres east of `p` (local flat approximation).
inline GeoPoint moved(const GeoPoint& p, double north_m, double east_m) {
    const double per_deg = meridian_m(1.0);
    return {p.lat + north_m / per_deg, p.lng + east_m / (per_deg * std::cos(p.lat * std::numbers::pi / 180.0))};
}

/// Up to 100 points: a few dense blobs plus uniform background in a 200 m box.
inline std::vector<GeoPoint> random_dbscan_instance(std::mt19937_64& rng) {
    const GeoPoint base{46.0878, -64.7782};
    std::uniform_int_distribution<int> count(1, 100);
    std::uniform_int_distribution<int> blobs(0, 4);
    std::uniform_real_distribution<double> box(0.0, 200.0);
    std::uniform_real_distribution<double> spread(2.0, 12.0);
    const int n = count(rng);
    const int k = blobs(rng);
    std::vector<GeoPoint> centers;
    for (int i = 0; i < k; ++i) {
        centers.push_back(moved(base, box(rng), box(rng)));
    }
    std::vector<GeoPoint> pts;
    for (int i = 0; i < n; ++i) {
        if (!centers.empty() && rng() % 4 != 0) {
            const auto& c = centers[rng() % centers.size()];
            std::normal_distribution<double> jitter(0.0, spread(rng));
            pts.push_back(moved(c, jitter(rng), jitter(rng)));
        } else {
            pts.push_back(moved(base, box(rng), box(rng)));
        }
    }
    return pts;
}

// ---------------------------------------------------------------------------
// DBSCAN reference: O(n^2) density connectivity straight from the definitions

struct DbscanOracle {
    std::vector<bool> core;
    /// Connected components of the core graph; -1 for non-core points.
    std::vector<int> component;
    int components = 0;
    /// For each point, the components of the core points within eps.
    std::vector<std::set<int>> reachable_from;
};

inline DbscanOracle dbscan_oracle(const std::vector<GeoPoint>& pts, double eps, std::size_t min_pts) {
    const std::size_t n = pts.size();
    std::vector<std::vector<bool>> near(n, std::vector<bool>(n, false));
    DbscanOracle o;
    o.core.assign(n, false);
    o.component.assign(n, -1);
    o.reachable_from.assign(n, {});
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t count = 0;
        for (std::size_t j = 0; j < n; ++j) {
            near[i][j] = haversine_m(pts[i], pts[j]) <= eps;
            count += near[i][j] ? 1 : 0;
        }
        o.core[i] = count >= min_pts;
    }
    // union-find over core-core edges
    std::vector<std::size_t> parent(n);
    for (std::size_t i = 0; i < n; ++i) {
        parent[i] = i;
    }
    auto find = [&](std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (o.core[i] && o.core[j] && near[i][j]) {
                parent[find(i)] = find(j);
            }
        }
    }
    std::map<std::size_t, int> ids;
    for (std::size_t i = 0; i < n; ++i) {
        if (o.core[i]) {
            auto [it, fresh] = ids.try_emplace(find(i), o.components);
            if (fresh) {
                ++o.components;
            }
            o.component[i] = it->second;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (o.core[j] && near[i][j]) {
                o.reachable_from[i].insert(o.component[j]);
            }
        }
    }
    return o;
}

/// Empty string when the labeling agrees with the oracle: same core points,
/// same core-point sets per cluster, same noise, and every border point in a
/// cluster that reaches it.
inline std::string compare_with_oracle(const fog::DbscanLabels& got, const DbscanOracle& want) {
    const std::size_t n = want.core.size();
    if (got.labels.size() != n || got.core.size() != n) {
        return "size mismatch";
    }
    if (got.clusters != static_cast<std::size_t>(want.components)) {
        return "cluster count " + std::to_string(got.clusters) + " vs " + std::to_string(want.components);
    }
    std::set<std::set<std::size_t>> got_cores;
    std::set<std::set<std::size_t>> want_cores;
    std::map<std::int64_t, std::set<std::size_t>> g;
    std::map<int, std::set<std::size_t>> w;
    for (std::size_t i = 0; i < n; ++i) {
        if (got.core[i] != want.core[i]) {
            return "core flag differs at " + std::to_string(i);
        }
        if (want.core[i]) {
            g[got.labels[i]].insert(i);
            w[want.component[i]].insert(i);
        }
        const bool noise = want.reachable_from[i].empty();
        if (noise != (got.labels[i] == fog::kNoise)) {
            return "noise flag differs at " + std::to_string(i);
        }
    }
    for (auto& [_, s] : g) {
        got_cores.insert(s);
    }
    for (auto& [_, s] : w) {
        want_cores.insert(s);
    }
    if (got_cores != want_cores) {
        return "core partitions differ";
    }
    // map implementation label -> oracle component through any core member
    std::map<std::int64_t, int> label_to_comp;
    for (std::size_t i = 0; i < n; ++i) {
        if (want.core[i]) {
            label_to_comp[got.labels[i]] = want.component[i];
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (want.core[i] || got.labels[i] == fog::kNoise) {
            continue;
        }
        auto it = label_to_comp.find(got.labels[i]);
        if (it == label_to_comp.end() || !want.reachable_from[i].contains(it->second)) {
            return "border point " + std::to_string(i) + " in a cluster that does not reach it";
        }
    }
    return {};
}

// ---------------------------------------------------------------------------
// Exhaustive Gini split search

inline double gini_of(const std::vector<int>& labels) {
    if (labels.empty()) {
        return 0.0;
    }
    std::map<int, double> c;
    for (int l : labels) {
        c[l] += 1.0;
    }
    double s = 1.0;
    for (auto& [_, k] : c) {
        const double p = k / static_cast<double>(labels.size());
        s -= p * p;
    }
    return s;
}

struct ExhaustiveBest {
    double gain = 0.0;
    /// Every left-row set achieving the best gain (within 1e-12).
    std::set<std::set<std::size_t>> argmax;
};

/// Tries every threshold at every distinct value: numeric x <= v and
/// categorical x == v, with NaN always on the right.
inline ExhaustiveBest exhaustive_split(const cloud::Matrix& m, const std::vector<std::size_t>& rows,
                                       const std::vector<std::size_t>& features, std::size_t min_leaf) {
    std::vector<int> all;
    for (auto r : rows) {
        all.push_back(m.labels[r]);
    }
    const double parent = gini_of(all);
    const double n = static_cast<double>(rows.size());
    ExhaustiveBest best;
    std::vector<std::pair<double, std::set<std::size_t>>> candidates;
    for (auto f : features) {
        std::set<double> values;
        for (auto r : rows) {
            if (!std::isnan(m.at(r, f))) {
                values.insert(m.at(r, f));
            }
        }
        for (double v : values) {
            std::vector<int> l;
            std::vector<int> rr;
            std::set<std::size_t> left_rows;
            for (auto r : rows) {
                const double x = m.at(r, f);
                const bool left = !std::isnan(x) && (m.kinds[f] == cloud::FeatureKind::Categorical ? x == v : x <= v);
                (left ? l : rr).push_back(m.labels[r]);
                if (left) {
                    left_rows.insert(r);
                }
            }
            if (l.size() < min_leaf || rr.size() < min_leaf) {
                continue;
            }
            const double g = parent - static_cast<double>(l.size()) / n * gini_of(l) -
                             static_cast<double>(rr.size()) / n * gini_of(rr);
            candidates.emplace_back(g, std::move(left_rows));
        }
    }
    for (const auto& [g, _] : candidates) {
        best.gain = std::max(best.gain, g);
    }
    for (const auto& [g, s] : candidates) {
        if (best.gain > 1e-12 && g >= best.gain - 1e-12) {
            best.argmax.insert(s);
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Punctuality datasets

/// Small mixed-kind matrix with frequent ties and missing values.
inline cloud::Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t features) {
    cloud::Matrix m;
    for (std::size_t f = 0; f < features; ++f) {
        m.kinds.push_back(rng() % 2 ? cloud::FeatureKind::Numeric : cloud::FeatureKind::Categorical);
    }
    for (std::size_t r = 0; r < rows; ++r) {
        std::vector<double> x;
        for (std::size_t f = 0; f < features; ++f) {
            if (rng() % 12 == 0) {
                x.push_back(std::numeric_limits<double>::quiet_NaN());
            } else {
                // few distinct values so ties are common
                x.push_back(static_cast<double>(rng() % (m.kinds[f] == cloud::FeatureKind::Numeric ? 9 : 4)));
            }
        }
        m.add_row(x, static_cast<int>(rng() % 3));
    }
    return m;
}

/// Examples whose label is a deterministic function of (station, hour).
inline std::vector<cloud::LabeledExample> structured_examples(std::size_t n, std::uint64_t seed,
                                                              bool shuffle_labels = false) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> station(0, 9);
    std::uniform_int_distribution<int> second(5 * 3600, 23 * 3600 - 1);
    std::vector<cloud::LabeledExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        const int s = station(rng);
        const int t = second(rng);
        cloud::LabeledExample e;
        e.trip_id = 5100 + static_cast<int>(i % 40);
        e.lat = 46.08 + 0.001 * s;
        e.lng = -64.77 + 0.0005 * s;
        e.gps_timestamp = t + 10;
        e.street_name = s < 5 ? "Main St" : "King St";
        e.direction = s < 5 ? Direction::Outbound : Direction::Return;
        e.stop_id = "68107" + std::to_string(10 + s);
        e.movement_sequence = 40 * s + 3;
        e.arrival_time = t;
        const int hour = t / 3600;
        e.target = static_cast<cloud::Punctuality>((s + hour / 4) % 3);
        out.push_back(e);
    }
    if (shuffle_labels) {
        for (auto& e : out) {
            e.target = static_cast<cloud::Punctuality>(rng() % 3);
        }
    }
    return out;
}

} // namespace tritide::fixtures
