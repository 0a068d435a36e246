#pragma once

// Shared domain types for all three layers: the 17-attribute feed tuple,
// movement records enriched along the pipeline, feedback messages, and the
// geodesic helpers every layer measures distance with.

#include "tritide/csv.hpp"
#include "tritide/time.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace tritide {

// ---------------------------------------------------------------------------
// Geodesy

inline constexpr double kEarthRadiusM = 6'371'000.0;

struct GeoPoint {
    double lat = 0.0;
    double lng = 0.0;

    friend bool operator==(const GeoPoint&, const GeoPoint&) = default;

    bool valid() const {
        return std::isfinite(lat) && std::isfinite(lng) && lat >= -90.0 && lat <= 90.0 && lng >= -180.0 &&
               lng <= 180.0;
    }
};

inline constexpr double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline constexpr double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

/// Great-circle distance on a sphere of radius 6,371 km.
inline double haversine_m(const GeoPoint& a, const GeoPoint& b) {
    const double phi1 = deg2rad(a.lat);
    const double phi2 = deg2rad(b.lat);
    const double dphi = phi2 - phi1;
    const double dlambda = deg2rad(b.lng - a.lng);
    const double s1 = std::sin(dphi / 2.0);
    const double s2 = std::sin(dlambda / 2.0);
    double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
    h = std::min(1.0, std::max(0.0, h));
    return 2.0 * kEarthRadiusM * std::asin(std::sqrt(h));
}

/// Point displaced by local east/north meters (small-offset spherical approximation).
inline GeoPoint offset_m(const GeoPoint& origin, double east_m, double north_m) {
    const double dlat = rad2deg(north_m / kEarthRadiusM);
    const double dlng = rad2deg(east_m / (kEarthRadiusM * std::cos(deg2rad(origin.lat))));
    return {origin.lat + dlat, origin.lng + dlng};
}

/// Local tangent-plane coordinates (east, north) of `p` relative to `origin`, in meters.
struct LocalXY {
    double x = 0.0;
    double y = 0.0;
};

inline LocalXY to_local(const GeoPoint& origin, const GeoPoint& p) {
    return {deg2rad(p.lng - origin.lng) * kEarthRadiusM * std::cos(deg2rad(origin.lat)),
            deg2rad(p.lat - origin.lat) * kEarthRadiusM};
}

/// Distance from `p` to segment [a, b], in meters, on the tangent plane at `p`.
/// Accurate to well under a centimeter at street scale.
inline double point_segment_distance_m(const GeoPoint& p, const GeoPoint& a, const GeoPoint& b) {
    const LocalXY pa = to_local(p, a);
    const LocalXY pb = to_local(p, b);
    const double dx = pb.x - pa.x;
    const double dy = pb.y - pa.y;
    const double len2 = dx * dx + dy * dy;
    double t = 0.0;
    if (len2 > 0.0) {
        t = std::clamp(-(pa.x * dx + pa.y * dy) / len2, 0.0, 1.0);
    }
    const double cx = pa.x + t * dx;
    const double cy = pa.y + t * dy;
    return std::hypot(cx, cy);
}

inline double point_polyline_distance_m(const GeoPoint& p, std::span<const GeoPoint> line) {
    double best = std::numeric_limits<double>::infinity();
    if (line.size() == 1) {
        return haversine_m(p, line.front());
    }
    for (std::size_t i = 0; i + 1 < line.size(); ++i) {
        best = std::min(best, point_segment_distance_m(p, line[i], line[i + 1]));
    }
    return best;
}

/// Even-odd ray casting in lat/lng space.
inline bool polygon_contains(std::span<const GeoPoint> ring, const GeoPoint& p) {
    bool inside = false;
    const std::size_t n = ring.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const GeoPoint& a = ring[i];
        const GeoPoint& b = ring[j];
        if ((a.lat > p.lat) != (b.lat > p.lat)) {
            const double x = (b.lng - a.lng) * (p.lat - a.lat) / (b.lat - a.lat) + a.lng;
            if (p.lng < x) {
                inside = !inside;
            }
        }
    }
    return inside;
}

// ---------------------------------------------------------------------------
// Feed tuple

/// Text stand-in for an absent attribute. Parsing maps it back to "absent".
inline constexpr std::string_view kMissing = "N/A";
inline constexpr std::size_t kFeedArity = 17;

/// Column names in feed order.
inline constexpr std::array<std::string_view, kFeedArity> kFeedColumns = {
    "vlr_id",         "route_id_vlr",   "route_name",        "route_id_rta", "route_nickname", "trip_id_br",
    "transit_authority_service_time_id", "trip_id_tta", "trip_start", "trip_finish",    "vehicle_id_vab",
    "vehicle_id_vlr", "vehicle_id_vlr_ta", "bdescription", "lat",          "lng",            "timestamp"};

namespace col {
inline constexpr std::size_t vlr_id = 0;
inline constexpr std::size_t route_id_vlr = 1;
inline constexpr std::size_t route_name = 2;
inline constexpr std::size_t route_id_rta = 3;
inline constexpr std::size_t route_nickname = 4;
inline constexpr std::size_t trip_id_br = 5;
inline constexpr std::size_t service_time_id = 6;
inline constexpr std::size_t trip_id_tta = 7;
inline constexpr std::size_t trip_start = 8;
inline constexpr std::size_t trip_finish = 9;
inline constexpr std::size_t vehicle_id_vab = 10;
inline constexpr std::size_t vehicle_id_vlr = 11;
inline constexpr std::size_t vehicle_id_vlr_ta = 12;
inline constexpr std::size_t bdescription = 13;
inline constexpr std::size_t lat = 14;
inline constexpr std::size_t lng = 15;
inline constexpr std::size_t timestamp = 16;
} // namespace col

/// One raw feed record. `std::nullopt` is the MISSING value; an empty
/// string is a present, empty value.
struct FeedTuple {
    std::optional<std::int64_t> vlr_id;
    std::optional<std::int64_t> route_id_vlr;
    std::optional<std::string> route_name;
    std::optional<std::int64_t> route_id_rta;
    std::optional<std::string> route_nickname;
    std::optional<std::int64_t> trip_id_br;
    std::optional<std::int64_t> transit_authority_service_time_id;
    std::optional<std::int64_t> trip_id_tta;
    std::optional<TimeOfDay> trip_start;
    std::optional<TimeOfDay> trip_finish;
    std::optional<std::int64_t> vehicle_id_vab;
    std::optional<std::int64_t> vehicle_id_vlr;
    std::optional<std::string> vehicle_id_vlr_ta;
    std::optional<std::string> bdescription;
    double lat = 0.0;
    double lng = 0.0;
    Timestamp timestamp{};

    friend bool operator==(const FeedTuple&, const FeedTuple&) = default;

    GeoPoint position() const { return {lat, lng}; }
};

enum class ParseErrorKind { WrongArity, MalformedCoordinate, MalformedTimestamp };

struct ParseError {
    ParseErrorKind kind;
    std::size_t arity = 0;
    std::string detail;

    std::string message() const {
        switch (kind) {
        case ParseErrorKind::WrongArity:
            return "WrongArity(" + std::to_string(arity) + ")";
        case ParseErrorKind::MalformedCoordinate:
            return "MalformedCoordinate(" + detail + ")";
        case ParseErrorKind::MalformedTimestamp:
            return "MalformedTimestamp(" + detail + ")";
        }
        return "ParseError";
    }
};

using ParseResult = std::variant<FeedTuple, ParseError>;

struct ParseOptions {
    /// UTC offset of the feed's local clock, applied to zone-less timestamps.
    Seconds utc_offset{0};
};

namespace detail {

inline bool is_missing_text(std::string_view s) { return s == kMissing; }

inline std::optional<std::int64_t> parse_int_field(std::string_view s) {
    s = trim(s);
    if (s.empty() || is_missing_text(s)) {
        return std::nullopt;
    }
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
        return std::nullopt;
    }
    return v;
}

inline std::optional<std::string> parse_text_field(std::string_view s) {
    if (is_missing_text(s)) {
        return std::nullopt;
    }
    return std::string(s);
}

inline std::optional<double> parse_double(std::string_view s) {
    s = trim(s);
    if (s.empty()) {
        return std::nullopt;
    }
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) {
        return std::nullopt;
    }
    return v;
}

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

inline std::string int_text(const std::optional<std::int64_t>& v) {
    return v ? std::to_string(*v) : std::string(kMissing);
}

inline std::string text_text(const std::optional<std::string>& v) { return v ? *v : std::string(kMissing); }

inline std::string tod_text(const std::optional<TimeOfDay>& v) {
    return v ? format_time_of_day(*v) : std::string(kMissing);
}

} // namespace detail

inline std::optional<double> parse_latitude(std::string_view s) {
    auto v = detail::parse_double(s);
    if (!v || *v < -90.0 || *v > 90.0) {
        return std::nullopt;
    }
    return v;
}

inline std::optional<double> parse_longitude(std::string_view s) {
    auto v = detail::parse_double(s);
    if (!v || *v < -180.0 || *v > 180.0) {
        return std::nullopt;
    }
    return v;
}

/// Maps 17 positional text fields onto a FeedTuple. Optional attributes that
/// fail to parse become MISSING; coordinates and timestamp must parse.
inline ParseResult parse_tuple(std::span<const std::string> fields, const ParseOptions& opts = {}) {
    if (fields.size() != kFeedArity) {
        return ParseError{ParseErrorKind::WrongArity, fields.size(), {}};
    }
    auto lat = parse_latitude(fields[col::lat]);
    if (!lat) {
        return ParseError{ParseErrorKind::MalformedCoordinate, kFeedArity, "lat=" + fields[col::lat]};
    }
    auto lng = parse_longitude(fields[col::lng]);
    if (!lng) {
        return ParseError{ParseErrorKind::MalformedCoordinate, kFeedArity, "lng=" + fields[col::lng]};
    }
    auto ts = parse_timestamp(fields[col::timestamp], opts.utc_offset);
    if (!ts) {
        return ParseError{ParseErrorKind::MalformedTimestamp, kFeedArity, fields[col::timestamp]};
    }
    FeedTuple t;
    t.vlr_id = detail::parse_int_field(fields[col::vlr_id]);
    t.route_id_vlr = detail::parse_int_field(fields[col::route_id_vlr]);
    t.route_name = detail::parse_text_field(fields[col::route_name]);
    t.route_id_rta = detail::parse_int_field(fields[col::route_id_rta]);
    t.route_nickname = detail::parse_text_field(fields[col::route_nickname]);
    t.trip_id_br = detail::parse_int_field(fields[col::trip_id_br]);
    t.transit_authority_service_time_id = detail::parse_int_field(fields[col::service_time_id]);
    t.trip_id_tta = detail::parse_int_field(fields[col::trip_id_tta]);
    t.trip_start = parse_time_of_day(fields[col::trip_start]);
    t.trip_finish = parse_time_of_day(fields[col::trip_finish]);
    t.vehicle_id_vab = detail::parse_int_field(fields[col::vehicle_id_vab]);
    t.vehicle_id_vlr = detail::parse_int_field(fields[col::vehicle_id_vlr]);
    t.vehicle_id_vlr_ta = detail::parse_text_field(fields[col::vehicle_id_vlr_ta]);
    t.bdescription = detail::parse_text_field(fields[col::bdescription]);
    t.lat = *lat;
    t.lng = *lng;
    t.timestamp = *ts;
    return t;
}

inline std::array<std::string, kFeedArity> to_fields(const FeedTuple& t) {
    return {detail::int_text(t.vlr_id),
            detail::int_text(t.route_id_vlr),
            detail::text_text(t.route_name),
            detail::int_text(t.route_id_rta),
            detail::text_text(t.route_nickname),
            detail::int_text(t.trip_id_br),
            detail::int_text(t.transit_authority_service_time_id),
            detail::int_text(t.trip_id_tta),
            detail::tod_text(t.trip_start),
            detail::tod_text(t.trip_finish),
            detail::int_text(t.vehicle_id_vab),
            detail::int_text(t.vehicle_id_vlr),
            detail::text_text(t.vehicle_id_vlr_ta),
            detail::text_text(t.bdescription),
            detail::format_double(t.lat),
            detail::format_double(t.lng),
            format_timestamp(t.timestamp)};
}

/// Canonical CSV line (no trailing newline).
inline std::string serialize_tuple(const FeedTuple& t) { return csv::join(to_fields(t)); }

inline std::string feed_header() { return csv::join(kFeedColumns); }

// ---------------------------------------------------------------------------
// Movement records

enum class Motion { Move, Stop };
enum class Category { Running, Passing, Suspension, Stopover };
enum class Direction { Outbound, Return };
enum class TripRole { Origin, Intermediate, Destination };

inline std::string_view to_string(Motion m) { return m == Motion::Move ? "move" : "stop"; }

inline std::string_view to_string(Category c) {
    switch (c) {
    case Category::Running:
        return "running";
    case Category::Passing:
        return "passing";
    case Category::Suspension:
        return "suspension";
    case Category::Stopover:
        return "stopover";
    }
    return "?";
}

inline std::string_view to_string(Direction d) { return d == Direction::Outbound ? "outbound" : "return"; }

inline std::string_view to_string(TripRole r) {
    switch (r) {
    case TripRole::Origin:
        return "origin";
    case TripRole::Intermediate:
        return "intermediate";
    case TripRole::Destination:
        return "destination";
    }
    return "?";
}

inline std::optional<Motion> parse_motion(std::string_view s) {
    if (s == "move") return Motion::Move;
    if (s == "stop") return Motion::Stop;
    return std::nullopt;
}

inline std::optional<Direction> parse_direction(std::string_view s) {
    if (s == "outbound") return Direction::Outbound;
    if (s == "return") return Direction::Return;
    return std::nullopt;
}

/// A cleaned tuple, enriched step by step as it travels edge -> fog.
struct MovementRecord {
    FeedTuple base;
    std::optional<double> distance_from_prev;
    std::optional<Motion> motion;
    std::optional<Category> category;
    std::optional<std::string> street_name;
    std::optional<Direction> direction;
    std::optional<std::string> station_id;
    std::optional<std::string> intersection_id;
    std::optional<Timestamp> arrival_time;
    std::optional<Timestamp> departure_time;
    std::optional<std::int64_t> sequence_index;
    std::optional<TripRole> trip_role;

    friend bool operator==(const MovementRecord&, const MovementRecord&) = default;

    GeoPoint position() const { return base.position(); }
    Timestamp timestamp() const { return base.timestamp; }
};

/// Category/motion/station/role consistency.
inline bool satisfies_invariants(const MovementRecord& r) {
    if (r.category) {
        const bool is_stop_cat = *r.category == Category::Suspension || *r.category == Category::Stopover;
        if (!r.motion || (is_stop_cat != (*r.motion == Motion::Stop))) {
            return false;
        }
    }
    if (r.station_id && (!r.category || (*r.category != Category::Stopover && *r.category != Category::Passing))) {
        return false;
    }
    if (r.trip_role && *r.trip_role == TripRole::Origin && r.sequence_index.value_or(-1) != 0) {
        return false;
    }
    if (r.distance_from_prev && *r.distance_from_prev < 0.0) {
        return false;
    }
    if (r.arrival_time && r.departure_time && *r.arrival_time > *r.departure_time) {
        return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Feedback

enum class Layer { Edge, Fog, Cloud };
enum class LatencyClass { RealTime, NearRealTime, Periodic, Historical };
enum class FeedbackKind { MissingTrip, TripDurationAnomaly, CongestionCluster, ServiceInterruption, PunctualityReport };

inline std::string_view to_string(Layer l) {
    switch (l) {
    case Layer::Edge:
        return "edge";
    case Layer::Fog:
        return "fog";
    case Layer::Cloud:
        return "cloud";
    }
    return "?";
}

inline std::string_view to_string(LatencyClass c) {
    switch (c) {
    case LatencyClass::RealTime:
        return "real_time";
    case LatencyClass::NearRealTime:
        return "near_real_time";
    case LatencyClass::Periodic:
        return "periodic";
    case LatencyClass::Historical:
        return "historical";
    }
    return "?";
}

inline std::string_view to_string(FeedbackKind k) {
    switch (k) {
    case FeedbackKind::MissingTrip:
        return "missing_trip";
    case FeedbackKind::TripDurationAnomaly:
        return "trip_duration_anomaly";
    case FeedbackKind::CongestionCluster:
        return "congestion_cluster";
    case FeedbackKind::ServiceInterruption:
        return "service_interruption";
    case FeedbackKind::PunctualityReport:
        return "punctuality_report";
    }
    return "?";
}

inline bool latency_allowed(Layer layer, LatencyClass c) {
    switch (layer) {
    case Layer::Edge:
        return c == LatencyClass::RealTime;
    case Layer::Fog:
        return c == LatencyClass::NearRealTime || c == LatencyClass::Periodic;
    case Layer::Cloud:
        return c == LatencyClass::Periodic || c == LatencyClass::Historical;
    }
    return false;
}

/// A layer-tagged message travelling back toward operators and riders.
struct Feedback {
    Layer layer = Layer::Edge;
    LatencyClass latency_class = LatencyClass::RealTime;
    FeedbackKind kind = FeedbackKind::MissingTrip;
    std::string subject;
    std::string detail;
    Timestamp emitted_at{};
    /// Sensor time of the event the message is about (trip start, first stop of a cluster, ...).
    Timestamp observed_at{};

    friend bool operator==(const Feedback&, const Feedback&) = default;
};

inline Feedback make_feedback(Layer layer, LatencyClass cls, FeedbackKind kind, std::string subject,
                              std::string detail, Timestamp emitted_at, Timestamp observed_at) {
    if (!latency_allowed(layer, cls)) {
        throw std::invalid_argument("feedback latency class not allowed for layer " + std::string(to_string(layer)));
    }
    return Feedback{layer, cls, kind, std::move(subject), std::move(detail), emitted_at, observed_at};
}

} // namespace tritide
