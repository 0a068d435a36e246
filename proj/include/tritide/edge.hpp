#pragma once

// Per-bus edge node: 5 s windows, the five cleaning rules, stop/move tagging,
// trip aggregation, period summaries and real-time anomaly feedback.

#include "tritide/feedcore.hpp"
#include "tritide/ingest.hpp"
#include "tritide/window.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace tritide::edge {

using ingest::FeedItem;
using ingest::MalformedRecord;

// ---------------------------------------------------------------------------
// Cleaning

struct CleaningConfig {
    bool duplicates = true;
    bool missing_tuples = true;
    bool short_records = true;
    bool long_records = true;
    bool wrong_values = true;
    std::int64_t missing_limit = 100;
    Seconds sample_period{5};
    /// Canonical route names; empty disables route-name normalization.
    std::vector<std::string> route_names;
    ParseOptions parse;

    static CleaningConfig all_off() {
        CleaningConfig c;
        c.duplicates = c.missing_tuples = c.short_records = c.long_records = c.wrong_values = false;
        return c;
    }
};

struct CleaningReport {
    std::size_t received = 0;
    std::size_t survivors = 0;
    std::size_t duplicates_removed = 0;
    std::size_t corrupted_filled = 0;
    std::size_t corrupted_dropped = 0;
    std::size_t extra_attributes_trimmed = 0;
    std::size_t wrong_values_fixed = 0;
    std::size_t wrong_values_dropped = 0;
    std::size_t deleted_trip_tuples = 0;
    std::vector<std::int64_t> trips_deleted_for_missing;

    friend bool operator==(const CleaningReport&, const CleaningReport&) = default;

    bool balanced() const {
        return received ==
               survivors + duplicates_removed + corrupted_dropped + wrong_values_dropped + deleted_trip_tuples;
    }

    bool all_zero_counters() const {
        return duplicates_removed == 0 && corrupted_filled == 0 && corrupted_dropped == 0 &&
               extra_attributes_trimmed == 0 && wrong_values_fixed == 0 && wrong_values_dropped == 0 &&
               deleted_trip_tuples == 0 && trips_deleted_for_missing.empty();
    }

    CleaningReport& operator+=(const CleaningReport& o) {
        received += o.received;
        survivors += o.survivors;
        duplicates_removed += o.duplicates_removed;
        corrupted_filled += o.corrupted_filled;
        corrupted_dropped += o.corrupted_dropped;
        extra_attributes_trimmed += o.extra_attributes_trimmed;
        wrong_values_fixed += o.wrong_values_fixed;
        wrong_values_dropped += o.wrong_values_dropped;
        deleted_trip_tuples += o.deleted_trip_tuples;
        trips_deleted_for_missing.insert(trips_deleted_for_missing.end(), o.trips_deleted_for_missing.begin(),
                                         o.trips_deleted_for_missing.end());
        return *this;
    }
};

/// Per-trip bookkeeping for rule 2.
struct TripTrack {
    Timestamp first{};
    Timestamp last{};
    std::set<std::int64_t> timestamps;
    bool deleted = false;

    std::int64_t missing(Seconds period) const {
        if (timestamps.empty()) {
            return 0;
        }
        const auto expected = (last - first) / period + 1;
        return std::max<std::int64_t>(0, expected - static_cast<std::int64_t>(timestamps.size()));
    }
};

/// First sighting of a trip instance, kept for missing-trip detection.
struct TripSighting {
    std::optional<std::int64_t> schedule_trip;
    std::optional<TimeOfDay> trip_start;
    Timestamp first_seen{};
};

/// Running state carried across windows of one edge node.
struct CleaningState {
    std::map<std::int64_t, TripTrack> trips;
    std::map<std::int64_t, TripSighting> sightings;
    std::unordered_set<std::string> seen_keys;
    std::unordered_set<std::int64_t> seen_vlr_ids;
    /// Trips first sighted since the owner last drained this list.
    std::vector<std::int64_t> new_sightings;
};

struct CleanResult {
    std::vector<FeedTuple> tuples;
    CleaningReport report;
};

namespace detail {

inline bool is_blank_or_missing(std::string_view s) {
    s = tritide::detail::trim(s);
    return s.empty() || s == kMissing;
}

inline std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

/// Raw duplicate key for records that never became tuples.
inline std::string raw_key(const std::vector<std::string>& f) {
    const std::string trip = f.size() > col::trip_id_br ? f[col::trip_id_br] : std::string{};
    const std::string ts = f.size() >= kFeedArity ? f[col::timestamp] : (f.empty() ? std::string{} : f.back());
    return "raw|" + trip + "|" + ts;
}

inline std::string tuple_key(const FeedTuple& t) {
    return (t.trip_id_br ? std::to_string(*t.trip_id_br) : std::string(kMissing)) + "|" +
           std::to_string(epoch_seconds(t.timestamp));
}

enum class Drop { None, Corrupted, WrongValue };

struct Candidate {
    std::optional<FeedTuple> tuple;
    Drop drop = Drop::None;
    bool filled = false;
    bool trimmed = false;
    std::string dup_key;
};

inline Candidate repair(const FeedItem& item, const CleaningConfig& cfg) {
    Candidate c;
    if (const auto* t = std::get_if<FeedTuple>(&item)) {
        c.tuple = *t;
        c.dup_key = tuple_key(*t);
        return c;
    }
    auto fields = std::get<MalformedRecord>(item).fields;
    if (fields.size() > kFeedArity && cfg.long_records) {
        fields.resize(kFeedArity);
        c.trimmed = true;
    } else if (fields.size() < kFeedArity && cfg.short_records && fields.size() >= 3) {
        // Coordinates and timestamp close the record; attributes lost from
        // the telemetry block come back as N/A.
        std::vector<std::string> rebuilt(fields.begin(), fields.end() - 3);
        while (rebuilt.size() < kFeedArity - 3) {
            rebuilt.emplace_back(kMissing);
        }
        rebuilt.insert(rebuilt.end(), fields.end() - 3, fields.end());
        fields = std::move(rebuilt);
        c.filled = true;
    }
    auto parsed = parse_tuple(fields, cfg.parse);
    if (auto* t = std::get_if<FeedTuple>(&parsed)) {
        c.tuple = std::move(*t);
        c.dup_key = tuple_key(*c.tuple);
        return c;
    }
    c.dup_key = raw_key(std::get<MalformedRecord>(item).fields);
    const auto& err = std::get<ParseError>(parsed);
    if (err.kind == ParseErrorKind::WrongArity) {
        c.drop = Drop::Corrupted;
    } else {
        const std::size_t bad = err.kind == ParseErrorKind::MalformedTimestamp
                                    ? col::timestamp
                                    : (err.detail.rfind("lat=", 0) == 0 ? col::lat : col::lng);
        // absent critical value: rule 3; present but illegal: rule 5
        c.drop = is_blank_or_missing(fields[bad]) ? Drop::Corrupted : Drop::WrongValue;
    }
    return c;
}

} // namespace detail

/// Applies the five cleaning rules to one window. Never throws; every input
/// record is accounted for in the report.
inline CleanResult clean_window(const TimeWindow<FeedItem>& w, CleaningState& state, const CleaningConfig& cfg) {
    CleanResult out;
    auto& rep = out.report;
    rep.received = w.items.size();
    for (const auto& item : w.items) {
        detail::Candidate c = detail::repair(item, cfg);

        // rule 1: duplicates, identified by trip and timestamp
        if (cfg.duplicates) {
            if (!state.seen_keys.insert(c.dup_key).second) {
                ++rep.duplicates_removed;
                continue;
            }
        }
        if (c.trimmed) {
            ++rep.extra_attributes_trimmed;
        }
        if (c.drop == detail::Drop::Corrupted) {
            ++rep.corrupted_dropped;
            continue;
        }
        if (c.drop == detail::Drop::WrongValue) {
            ++rep.wrong_values_dropped;
            continue;
        }
        FeedTuple t = std::move(*c.tuple);

        // rule 3: present-but-empty text attributes count as missing
        if (cfg.short_records) {
            bool filled = c.filled;
            for (auto* field : {&t.route_name, &t.route_nickname, &t.vehicle_id_vlr_ta, &t.bdescription}) {
                if (*field && tritide::detail::trim(**field).empty()) {
                    field->reset();
                    filled = true;
                }
            }
            if (filled) {
                ++rep.corrupted_filled;
            }
        }

        // rule 5: wrong values
        if (cfg.wrong_values) {
            bool fixed = false;
            if (!cfg.route_names.empty() && t.route_name) {
                const bool exact = std::find(cfg.route_names.begin(), cfg.route_names.end(), *t.route_name) !=
                                   cfg.route_names.end();
                if (!exact) {
                    const auto low = detail::lower(*t.route_name);
                    auto match = std::find_if(cfg.route_names.begin(), cfg.route_names.end(),
                                              [&](const std::string& n) { return detail::lower(n) == low; });
                    if (match != cfg.route_names.end()) {
                        t.route_name = *match;
                    } else {
                        t.route_name.reset();
                    }
                    fixed = true;
                }
            }
            if (t.vlr_id && !state.seen_vlr_ids.insert(*t.vlr_id).second) {
                t.vlr_id.reset();
                fixed = true;
            }
            if (!t.trip_id_br) {
                ++rep.wrong_values_dropped;
                continue;
            }
            if (fixed) {
                ++rep.wrong_values_fixed;
            }
        }
        const std::int64_t trip = t.trip_id_br.value_or(0);
        if (state.sightings.try_emplace(trip, TripSighting{t.trip_id_tta, t.trip_start, t.timestamp}).second) {
            state.new_sightings.push_back(trip);
        }

        // rule 2: trips accumulating too many missing samples are deleted
        if (cfg.missing_tuples) {
            auto& track = state.trips[trip];
            if (track.deleted) {
                ++rep.deleted_trip_tuples;
                continue;
            }
            if (track.timestamps.empty()) {
                track.first = track.last = t.timestamp;
            } else {
                track.first = std::min(track.first, t.timestamp);
                track.last = std::max(track.last, t.timestamp);
            }
            track.timestamps.insert(epoch_seconds(t.timestamp));
            if (track.missing(cfg.sample_period) >= cfg.missing_limit) {
                track.deleted = true;
                track.timestamps.clear();
                rep.trips_deleted_for_missing.push_back(trip);
                ++rep.deleted_trip_tuples;
                auto keep = std::remove_if(out.tuples.begin(), out.tuples.end(),
                                           [&](const FeedTuple& s) { return s.trip_id_br.value_or(0) == trip; });
                rep.deleted_trip_tuples += static_cast<std::size_t>(out.tuples.end() - keep);
                out.tuples.erase(keep, out.tuples.end());
                continue;
            }
        }
        out.tuples.push_back(std::move(t));
    }
    rep.survivors = out.tuples.size();
    return out;
}

// ---------------------------------------------------------------------------
// Stop / move

inline constexpr double kStopThresholdM = 15.0;

/// Tags `cur` from its distance to the previous record of the same trip:
/// Move iff the distance exceeds the threshold. A trip's first record is a Stop.
inline MovementRecord tag_stop_move(const MovementRecord* prev, const FeedTuple& cur,
                                    double threshold_m = kStopThresholdM) {
    MovementRecord rec;
    rec.base = cur;
    if (!prev) {
        rec.motion = Motion::Stop;
        return rec;
    }
    if (prev->base.trip_id_br != cur.trip_id_br) {
        throw std::invalid_argument("tag_stop_move: records belong to different trips");
    }
    const double d = haversine_m(prev->position(), cur.position());
    rec.distance_from_prev = d;
    rec.motion = d > threshold_m ? Motion::Move : Motion::Stop;
    return rec;
}

inline MovementRecord tag_stop_move(const std::optional<MovementRecord>& prev, const FeedTuple& cur,
                                    double threshold_m = kStopThresholdM) {
    return tag_stop_move(prev ? &*prev : nullptr, cur, threshold_m);
}

// ---------------------------------------------------------------------------
// Aggregation

struct TripAggregate {
    std::int64_t trip_id = 0;
    std::optional<std::int64_t> schedule_trip_id;
    Date date{};
    TimeOfDay start_time;
    std::int64_t total_move = 0;
    std::int64_t total_stop = 0;
    std::int64_t total_time_length = 0;

    friend bool operator==(const TripAggregate&, const TripAggregate&) = default;

    Timestamp started_at(Seconds offset = Seconds{0}) const { return at(date, start_time, offset); }
};

/// Counts of one finished trip. Records must be non-empty, one trip, time-sorted.
inline TripAggregate aggregate_trip(std::span<const MovementRecord> records, Seconds utc_offset = Seconds{0}) {
    if (records.empty()) {
        throw std::invalid_argument("aggregate_trip: no records");
    }
    TripAggregate a;
    a.trip_id = records.front().base.trip_id_br.value_or(0);
    a.schedule_trip_id = records.front().base.trip_id_tta;
    a.date = local_date(records.front().timestamp(), utc_offset);
    a.start_time = local_time_of_day(records.front().timestamp(), utc_offset);
    for (const auto& r : records) {
        if (r.base.trip_id_br.value_or(0) != a.trip_id) {
            throw std::invalid_argument("aggregate_trip: records span several trips");
        }
        if (r.motion == Motion::Move) {
            ++a.total_move;
        } else {
            ++a.total_stop;
        }
    }
    a.total_time_length = std::max<std::int64_t>(0, (records.back().timestamp() - records.front().timestamp()).count());
    return a;
}

enum class Period { Morning, Afternoon, Evening };

inline std::string_view to_string(Period p) {
    switch (p) {
    case Period::Morning:
        return "morning";
    case Period::Afternoon:
        return "afternoon";
    case Period::Evening:
        return "evening";
    }
    return "?";
}

/// Morning [5h,12h), afternoon [13h,18h), evening [19h,24h); other start hours belong to no period.
inline std::optional<Period> period_of(TimeOfDay t) {
    const int h = t.hour();
    if (h >= 5 && h < 12) {
        return Period::Morning;
    }
    if (h >= 13 && h < 18) {
        return Period::Afternoon;
    }
    if (h >= 19 && h < 24) {
        return Period::Evening;
    }
    return std::nullopt;
}

struct PeriodSummary {
    Date date{};
    Period period = Period::Morning;
    double avg_trip_time = 0.0;
    double avg_moves = 0.0;
    double avg_stops = 0.0;
    std::size_t trip_count = 0;

    friend bool operator==(const PeriodSummary&, const PeriodSummary&) = default;
};

inline std::vector<PeriodSummary> summarize_period(std::span<const TripAggregate> aggregates) {
    std::vector<PeriodSummary> out;
    if (aggregates.empty()) {
        return out;
    }
    const Date date = aggregates.front().date;
    std::array<PeriodSummary, 3> acc{};
    for (const auto& a : aggregates) {
        if (a.date != date) {
            throw std::invalid_argument("summarize_period: aggregates span several dates");
        }
        auto p = period_of(a.start_time);
        if (!p) {
            continue;
        }
        auto& s = acc[static_cast<std::size_t>(*p)];
        s.avg_trip_time += static_cast<double>(a.total_time_length);
        s.avg_moves += static_cast<double>(a.total_move);
        s.avg_stops += static_cast<double>(a.total_stop);
        ++s.trip_count;
    }
    for (std::size_t i = 0; i < acc.size(); ++i) {
        auto s = acc[i];
        if (s.trip_count == 0) {
            continue;
        }
        const auto n = static_cast<double>(s.trip_count);
        s.date = date;
        s.period = static_cast<Period>(i);
        s.avg_trip_time /= n;
        s.avg_moves /= n;
        s.avg_stops /= n;
        out.push_back(s);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Real-time anomalies

struct AnomalyConfig {
    Seconds grace{300};
    double high_factor = 1.5;
    double low_factor = 0.5;
    double nominal_duration_s = 2700.0;
    Seconds utc_offset{0};
    /// Routes this node serves; empty means every route.
    std::vector<std::string> routes;
    /// Vehicle block this node serves; empty means every block.
    std::string block_id;
};

/// Scheduled trip instances already seen, as (schedule trip id, service date).
using ObservedTrips = std::set<std::pair<std::string, Date>>;

/// Anomalies that became detectable in (since, now]:
///  - MissingTrip for every scheduled trip whose start + grace passed in the
///    interval with no tuple observed;
///  - TripDurationAnomaly for each given finished trip whose length leaves
///    [low, high] x the scheduled duration.
inline std::vector<Feedback> detect_edge_anomalies(std::span<const TripAggregate> finished,
                                                   const ObservedTrips& observed, const ingest::ScheduleDB& sched,
                                                   Timestamp since, Timestamp now, const AnomalyConfig& cfg) {
    std::vector<Feedback> out;
    if (now > since) {
        const Date first = local_date(since - cfg.grace, cfg.utc_offset) - std::chrono::days{1};
        const Date last = local_date(now, cfg.utc_offset);
        for (Date d = first; d <= last; d += std::chrono::days{1}) {
            for (const auto* trip : sched.trips_on(d)) {
                if (!cfg.routes.empty() &&
                    std::find(cfg.routes.begin(), cfg.routes.end(), trip->route_id) == cfg.routes.end()) {
                    continue;
                }
                if (!cfg.block_id.empty() && trip->block_id != cfg.block_id) {
                    continue;
                }
                const Timestamp start = at(d, trip->start, cfg.utc_offset);
                const Timestamp deadline = start + cfg.grace;
                if (deadline < since || deadline >= now) {
                    continue;
                }
                if (observed.contains({trip->trip_id, d})) {
                    continue;
                }
                out.push_back(make_feedback(Layer::Edge, LatencyClass::RealTime, FeedbackKind::MissingTrip,
                                            trip->trip_id + "@" + format_date(d),
                                            "no tuples " + std::to_string(cfg.grace.count()) +
                                                " s after scheduled start " + format_time_of_day(trip->start),
                                            now, start));
            }
        }
    }
    for (const auto& a : finished) {
        double expected = cfg.nominal_duration_s;
        if (a.schedule_trip_id) {
            if (const auto* st = sched.find_trip(std::to_string(*a.schedule_trip_id))) {
                expected = static_cast<double>(st->end.seconds - st->start.seconds);
            }
        }
        const auto len = static_cast<double>(a.total_time_length);
        if (len > expected * cfg.high_factor || len < expected * cfg.low_factor) {
            const Timestamp end = a.started_at(cfg.utc_offset) + Seconds{a.total_time_length};
            out.push_back(make_feedback(Layer::Edge, LatencyClass::RealTime, FeedbackKind::TripDurationAnomaly,
                                        std::to_string(a.trip_id),
                                        "trip lasted " + std::to_string(a.total_time_length) + " s against " +
                                            std::to_string(static_cast<std::int64_t>(expected)) + " s scheduled",
                                        std::max(now, end), end));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Wire format (edge -> fog)

inline std::string serialize_record(const MovementRecord& r) {
    auto f = to_fields(r.base);
    std::vector<std::string> all(f.begin(), f.end());
    all.emplace_back(r.motion ? std::string(to_string(*r.motion)) : std::string(kMissing));
    all.emplace_back(r.distance_from_prev ? tritide::detail::format_double(*r.distance_from_prev) : std::string{});
    return csv::join(all);
}

inline std::optional<MovementRecord> parse_record(const std::vector<std::string>& fields) {
    if (fields.size() != kFeedArity + 2) {
        return std::nullopt;
    }
    std::span<const std::string> base(fields.data(), kFeedArity);
    auto parsed = parse_tuple(base);
    auto* t = std::get_if<FeedTuple>(&parsed);
    if (!t) {
        return std::nullopt;
    }
    MovementRecord r;
    r.base = std::move(*t);
    r.motion = parse_motion(fields[kFeedArity]);
    if (!fields[kFeedArity + 1].empty()) {
        r.distance_from_prev = tritide::detail::parse_double(fields[kFeedArity + 1]);
    }
    return r;
}

inline nlohmann::json to_json(const TripAggregate& a) {
    nlohmann::json j{{"trip_id", a.trip_id},
                     {"date", format_date(a.date)},
                     {"start_time", format_time_of_day(a.start_time)},
                     {"total_move", a.total_move},
                     {"total_stop", a.total_stop},
                     {"total_time_length", a.total_time_length}};
    j["schedule_trip_id"] = a.schedule_trip_id ? nlohmann::json(*a.schedule_trip_id) : nlohmann::json(nullptr);
    return j;
}

inline TripAggregate aggregate_from_json(const nlohmann::json& j) {
    TripAggregate a;
    a.trip_id = j.at("trip_id").get<std::int64_t>();
    if (!j.at("schedule_trip_id").is_null()) {
        a.schedule_trip_id = j.at("schedule_trip_id").get<std::int64_t>();
    }
    a.date = parse_date(j.at("date").get<std::string>()).value();
    a.start_time = parse_time_of_day(j.at("start_time").get<std::string>()).value();
    a.total_move = j.at("total_move").get<std::int64_t>();
    a.total_stop = j.at("total_stop").get<std::int64_t>();
    a.total_time_length = j.at("total_time_length").get<std::int64_t>();
    return a;
}

inline nlohmann::json to_json(const PeriodSummary& s) {
    return {{"date", format_date(s.date)},       {"period", to_string(s.period)},  {"avg_trip_time", s.avg_trip_time},
            {"avg_moves", s.avg_moves},          {"avg_stops", s.avg_stops},       {"trip_count", s.trip_count}};
}

inline PeriodSummary summary_from_json(const nlohmann::json& j) {
    PeriodSummary s;
    s.date = parse_date(j.at("date").get<std::string>()).value();
    const auto p = j.at("period").get<std::string>();
    s.period = p == "morning" ? Period::Morning : p == "afternoon" ? Period::Afternoon : Period::Evening;
    s.avg_trip_time = j.at("avg_trip_time").get<double>();
    s.avg_moves = j.at("avg_moves").get<double>();
    s.avg_stops = j.at("avg_stops").get<double>();
    s.trip_count = j.at("trip_count").get<std::size_t>();
    return s;
}

inline nlohmann::json to_json(const CleaningReport& r) {
    return {{"received", r.received},
            {"survivors", r.survivors},
            {"duplicates_removed", r.duplicates_removed},
            {"corrupted_filled", r.corrupted_filled},
            {"corrupted_dropped", r.corrupted_dropped},
            {"extra_attributes_trimmed", r.extra_attributes_trimmed},
            {"wrong_values_fixed", r.wrong_values_fixed},
            {"wrong_values_dropped", r.wrong_values_dropped},
            {"deleted_trip_tuples", r.deleted_trip_tuples},
            {"trips_deleted_for_missing", r.trips_deleted_for_missing}};
}

inline CleaningReport report_from_json(const nlohmann::json& j) {
    CleaningReport r;
    r.received = j.at("received");
    r.survivors = j.at("survivors");
    r.duplicates_removed = j.at("duplicates_removed");
    r.corrupted_filled = j.at("corrupted_filled");
    r.corrupted_dropped = j.at("corrupted_dropped");
    r.extra_attributes_trimmed = j.at("extra_attributes_trimmed");
    r.wrong_values_fixed = j.at("wrong_values_fixed");
    r.wrong_values_dropped = j.at("wrong_values_dropped");
    r.deleted_trip_tuples = j.at("deleted_trip_tuples");
    r.trips_deleted_for_missing = j.at("trips_deleted_for_missing").get<std::vector<std::int64_t>>();
    return r;
}

/// What one edge window ships to the fog.
struct EdgeBatch {
    std::string node;
    Timestamp window_start{};
    Timestamp window_end{};
    std::vector<MovementRecord> records;
    std::vector<TripAggregate> aggregates;
    std::vector<PeriodSummary> summaries;
    CleaningReport cleaning;
    std::size_t late = 0;

    friend bool operator==(const EdgeBatch&, const EdgeBatch&) = default;
};

/// Newline-delimited records followed by one JSON line with aggregates,
/// summaries and the cleaning report.
inline std::string serialize_batch(const EdgeBatch& b) {
    std::string out;
    for (const auto& r : b.records) {
        out += serialize_record(r);
        out += '\n';
    }
    nlohmann::json tail{{"node", b.node},
                        {"window_start", format_timestamp(b.window_start)},
                        {"window_end", format_timestamp(b.window_end)},
                        {"late", b.late},
                        {"cleaning", to_json(b.cleaning)}};
    tail["aggregates"] = nlohmann::json::array();
    for (const auto& a : b.aggregates) {
        tail["aggregates"].push_back(to_json(a));
    }
    tail["summaries"] = nlohmann::json::array();
    for (const auto& s : b.summaries) {
        tail["summaries"].push_back(to_json(s));
    }
    out += tail.dump();
    out += '\n';
    return out;
}

inline EdgeBatch parse_batch(const std::string& text) {
    EdgeBatch b;
    std::istringstream in(text);
    std::string line;
    std::string tail;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        if (line.front() == '{') {
            tail = line;
            continue;
        }
        auto fields = csv::split(line);
        if (!fields) {
            throw std::runtime_error("edge batch: unterminated quote");
        }
        auto rec = parse_record(*fields);
        if (!rec) {
            throw std::runtime_error("edge batch: malformed record line");
        }
        b.records.push_back(std::move(*rec));
    }
    if (tail.empty()) {
        throw std::runtime_error("edge batch: missing summary block");
    }
    auto j = nlohmann::json::parse(tail);
    b.node = j.at("node").get<std::string>();
    b.window_start = parse_timestamp(j.at("window_start").get<std::string>()).value();
    b.window_end = parse_timestamp(j.at("window_end").get<std::string>()).value();
    b.late = j.at("late").get<std::size_t>();
    b.cleaning = report_from_json(j.at("cleaning"));
    for (const auto& a : j.at("aggregates")) {
        b.aggregates.push_back(aggregate_from_json(a));
    }
    for (const auto& s : j.at("summaries")) {
        b.summaries.push_back(summary_from_json(s));
    }
    return b;
}

// ---------------------------------------------------------------------------
// Edge node

struct EdgeConfig {
    Seconds window{5};
    double stop_threshold_m = kStopThresholdM;
    Seconds trip_idle_timeout{300};
    /// Period summaries for a date are emitted this long after its midnight.
    Seconds summary_delay{30 * 3600};
    CleaningConfig cleaning;
    AnomalyConfig anomalies;
};

struct EdgeTotals {
    std::size_t tuples_in = 0;
    std::size_t tuples_out = 0;
    std::size_t late = 0;
    std::size_t bytes_out = 0;
    std::size_t batches = 0;
    CleaningReport cleaning;
};

struct EdgeEmission {
    EdgeBatch batch;
    std::vector<Feedback> feedback;

    /// Something worth shipping to the fog.
    bool has_payload() const {
        return !batch.records.empty() || !batch.aggregates.empty() || !batch.summaries.empty() ||
               batch.cleaning.received > 0 || batch.late > 0;
    }
};

/// One bus's edge node. Items go in through push(); tick(now) closes the
/// window once its end has passed, retires idle trips and scans the schedule
/// for trips that never showed up. Works without ticks too: a window also
/// closes when an item past its end arrives.
class EdgeNode {
public:
    EdgeNode(std::string name, EdgeConfig cfg, const ingest::ScheduleDB* sched, bool watch_schedule = true)
        : name_(std::move(name)), cfg_(std::move(cfg)), sched_(watch_schedule ? sched : nullptr),
          link_sched_(sched),
          assigner_([off = cfg_.cleaning.parse.utc_offset](const FeedItem& i) { return item_time(i, off); },
                    cfg_.window) {}

    const std::string& name() const { return name_; }
    const EdgeConfig& config() const { return cfg_; }
    const EdgeTotals& totals() const { return totals_; }
    const std::vector<TripAggregate>& aggregates() const { return all_aggregates_; }
    const std::vector<PeriodSummary>& summaries() const { return all_summaries_; }

    std::optional<EdgeEmission> push(FeedItem item) {
        ++totals_.tuples_in;
        if (!watch_from_) {
            if (auto t = item_time(item, cfg_.cleaning.parse.utc_offset)) {
                watch_from_ = *t;
            }
        }
        auto closed = assigner_.push(std::move(item));
        note_late();
        if (!closed) {
            return std::nullopt;
        }
        const Timestamp end = closed->window_end();
        return process(std::move(*closed), end, false);
    }

    /// Housekeeping at simulated time `now`; returns an emission when a
    /// window closed or anything else (aggregates, summaries, feedback) came due.
    std::optional<EdgeEmission> tick(Timestamp now) {
        if (!watch_from_) {
            return std::nullopt;
        }
        std::optional<TimeWindow<FeedItem>> w;
        if (assigner_.open_window_end() && *assigner_.open_window_end() <= now) {
            w = assigner_.close();
            note_late();
        }
        auto em = process(w ? std::move(*w) : TimeWindow<FeedItem>{assigner_.align(now), cfg_.window, {}}, now,
                          false);
        if (!w && !em.has_payload() && em.feedback.empty()) {
            return std::nullopt;
        }
        return em;
    }

    /// End of stream at simulated time `now`: flushes the open window, closes
    /// every trip, emits pending summaries and runs a final schedule scan.
    EdgeEmission close(Timestamp now) {
        auto w = assigner_.close();
        note_late();
        if (!w) {
            w = TimeWindow<FeedItem>{assigner_.align(now), cfg_.window, {}};
        }
        return process(std::move(*w), std::max(now, w->window_end()), true);
    }

    static std::optional<Timestamp> item_time(const FeedItem& item, Seconds offset) {
        if (const auto* t = std::get_if<FeedTuple>(&item)) {
            return t->timestamp;
        }
        const auto& f = std::get<MalformedRecord>(item).fields;
        if (f.empty()) {
            return std::nullopt;
        }
        const auto& ts = f.size() >= kFeedArity ? f[col::timestamp] : f.back();
        return parse_timestamp(ts, offset);
    }

private:
    void note_late() {
        auto late = assigner_.take_late();
        late_pending_ += late.size();
        totals_.late += late.size();
    }

    EdgeEmission process(TimeWindow<FeedItem> w, Timestamp now, bool final) {
        EdgeEmission em;
        auto& b = em.batch;
        b.node = name_;
        b.window_start = w.window_start;
        b.window_end = w.window_end();

        if (!w.items.empty()) {
            auto cleaned = clean_window(w, state_, cfg_.cleaning);
            b.cleaning = cleaned.report;
            totals_.cleaning += cleaned.report;
            for (std::int64_t trip : cleaned.report.trips_deleted_for_missing) {
                open_trips_.erase(trip);
            }
            std::stable_sort(cleaned.tuples.begin(), cleaned.tuples.end(),
                             [](const FeedTuple& a, const FeedTuple& c) { return a.timestamp < c.timestamp; });
            for (auto& t : cleaned.tuples) {
                auto& recs = open_trips_[t.trip_id_br.value_or(0)];
                const MovementRecord* prev = recs.empty() ? nullptr : &recs.back();
                if (prev && t.timestamp < prev->timestamp()) {
                    prev = nullptr;
                }
                MovementRecord rec = tag_stop_move(prev, t, cfg_.stop_threshold_m);
                recs.push_back(rec);
                b.records.push_back(std::move(rec));
            }
            for (std::int64_t trip : state_.new_sightings) {
                note_sighting(state_.sightings.at(trip));
            }
            state_.new_sightings.clear();
        }
        b.late = late_pending_;
        late_pending_ = 0;

        // retire idle trips
        std::vector<TripAggregate> finished;
        for (auto it = open_trips_.begin(); it != open_trips_.end();) {
            auto& recs = it->second;
            if (recs.empty()) {
                it = open_trips_.erase(it);
                continue;
            }
            if (final || recs.back().timestamp() + cfg_.trip_idle_timeout <= now) {
                std::stable_sort(recs.begin(), recs.end(), [](const MovementRecord& a, const MovementRecord& c) {
                    return a.timestamp() < c.timestamp();
                });
                finished.push_back(aggregate_trip(recs, cfg_.cleaning.parse.utc_offset));
                it = open_trips_.erase(it);
            } else {
                ++it;
            }
        }
        for (const auto& a : finished) {
            pending_by_date_[a.date].push_back(a);
            all_aggregates_.push_back(a);
        }
        b.aggregates = finished;

        // day summaries
        for (auto it = pending_by_date_.begin(); it != pending_by_date_.end();) {
            const Timestamp due = at(it->first, TimeOfDay{0}, cfg_.cleaning.parse.utc_offset) + cfg_.summary_delay;
            if (final || now >= due) {
                auto sums = summarize_period(it->second);
                b.summaries.insert(b.summaries.end(), sums.begin(), sums.end());
                all_summaries_.insert(all_summaries_.end(), sums.begin(), sums.end());
                it = pending_by_date_.erase(it);
            } else {
                ++it;
            }
        }

        em.feedback = scan_missing(now);
        if (link_sched_) {
            auto durations = detect_edge_anomalies(finished, {}, *link_sched_, now, now, cfg_.anomalies);
            em.feedback.insert(em.feedback.end(), durations.begin(), durations.end());
        }

        if (em.has_payload()) {
            totals_.tuples_out += b.records.size();
            totals_.bytes_out += serialize_batch(b).size();
            ++totals_.batches;
        }
        return em;
    }

    /// MissingTrip for each scheduled start whose grace deadline fell in
    /// [watch_from, now] with no tuple of that trip seen.
    std::vector<Feedback> scan_missing(Timestamp now) {
        std::vector<Feedback> out;
        if (!sched_ || !watch_from_) {
            return out;
        }
        const auto off = cfg_.anomalies.utc_offset;
        const Date horizon = local_date(now, off);
        if (!next_date_) {
            next_date_ = local_date(*watch_from_ - cfg_.anomalies.grace, off) - std::chrono::days{1};
        }
        while (*next_date_ <= horizon) {
            const Date d = *next_date_;
            for (const auto* trip : sched_->trips_on(d)) {
                const auto& routes = cfg_.anomalies.routes;
                if (!routes.empty() && std::find(routes.begin(), routes.end(), trip->route_id) == routes.end()) {
                    continue;
                }
                if (!cfg_.anomalies.block_id.empty() && trip->block_id != cfg_.anomalies.block_id) {
                    continue;
                }
                const Timestamp start = at(d, trip->start, off);
                deadlines_.push_back({start + cfg_.anomalies.grace, start, trip->trip_id, d});
            }
            std::stable_sort(deadlines_.begin() + static_cast<std::ptrdiff_t>(cursor_), deadlines_.end(),
                             [](const Deadline& a, const Deadline& b) { return a.deadline < b.deadline; });
            *next_date_ += std::chrono::days{1};
        }
        while (cursor_ < deadlines_.size() && deadlines_[cursor_].deadline <= now) {
            const auto& d = deadlines_[cursor_++];
            if (d.deadline < *watch_from_ || observed_.contains({d.trip_id, d.date})) {
                continue;
            }
            out.push_back(make_feedback(Layer::Edge, LatencyClass::RealTime, FeedbackKind::MissingTrip,
                                        d.trip_id + "@" + format_date(d.date),
                                        "no tuples " + std::to_string(cfg_.anomalies.grace.count()) +
                                            " s after scheduled start " +
                                            format_time_of_day(local_time_of_day(d.start, off)),
                                        now, d.start));
        }
        return out;
    }

    void note_sighting(const TripSighting& s) {
        if (!s.schedule_trip || !link_sched_) {
            return;
        }
        const std::string trip_id = std::to_string(*s.schedule_trip);
        std::optional<TimeOfDay> start = s.trip_start;
        if (!start) {
            if (const auto* st = link_sched_->find_trip(trip_id)) {
                start = st->start;
            }
        }
        const auto off = cfg_.cleaning.parse.utc_offset;
        Date service = local_date(s.first_seen, off);
        if (start) {
            // first sighting lands shortly after the scheduled start
            service = local_date(s.first_seen - Seconds{start->seconds} + Seconds{6 * 3600}, off);
        }
        observed_.insert({trip_id, service});
    }

    struct Deadline {
        Timestamp deadline;
        Timestamp start;
        std::string trip_id;
        Date date;
    };

    std::string name_;
    EdgeConfig cfg_;
    const ingest::ScheduleDB* sched_;
    const ingest::ScheduleDB* link_sched_;
    WindowAssigner<FeedItem> assigner_;
    CleaningState state_;
    std::map<std::int64_t, std::vector<MovementRecord>> open_trips_;
    std::map<Date, std::vector<TripAggregate>> pending_by_date_;
    std::vector<TripAggregate> all_aggregates_;
    std::vector<PeriodSummary> all_summaries_;
    ObservedTrips observed_;
    std::optional<Timestamp> watch_from_;
    std::optional<Date> next_date_;
    std::vector<Deadline> deadlines_;
    std::size_t cursor_ = 0;
    std::size_t late_pending_ = 0;
    EdgeTotals totals_;
};

} // namespace tritide::edge
