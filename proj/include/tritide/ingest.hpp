#pragma once

// Reference data (GTFS-static subset, GeoJSON street layer), recorded-feed
// replay, and the synthetic feed generator with its ground truth.

#include "tritide/csv.hpp"
#include "tritide/feedcore.hpp"
#include "tritide/time.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

namespace tritide::ingest {

class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Schedule

struct Station {
    std::string id;
    std::string name;
    GeoPoint position;
};

struct ScheduledTrip {
    std::string trip_id;
    std::string route_id;
    std::string service_id;
    std::string block_id;
    std::optional<Direction> direction;
    TimeOfDay start;
    TimeOfDay end;
};

struct ServiceCalendar {
    /// Monday first.
    std::array<bool, 7> days{};
    Date start_date{};
    Date end_date{};
};

/// Monday = 0 ... Sunday = 6.
inline int weekday_index(Date d) {
    std::chrono::weekday wd{d};
    return static_cast<int>(wd.iso_encoding()) - 1;
}

struct ScheduleDB {
    std::map<std::string, Station> stations;
    std::map<std::string, std::string> route_names;
    std::map<std::string, ServiceCalendar> services;
    std::vector<ScheduledTrip> scheduled_trips;
    std::map<std::pair<std::string, std::string>, TimeOfDay> scheduled_arrivals;
    std::map<std::string, std::vector<std::string>> trip_stops;
    std::map<std::pair<std::string, Direction>, std::vector<std::string>> station_order;

    const ScheduledTrip* find_trip(std::string_view trip_id) const {
        for (const auto& t : scheduled_trips) {
            if (t.trip_id == trip_id) {
                return &t;
            }
        }
        return nullptr;
    }

    std::optional<TimeOfDay> scheduled_arrival(const std::string& trip_id, const std::string& station_id) const {
        auto it = scheduled_arrivals.find({trip_id, station_id});
        if (it == scheduled_arrivals.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    /// Trips whose service runs on the given weekday (Monday = 0), ignoring date ranges.
    std::vector<const ScheduledTrip*> trips_on_weekday(int weekday) const {
        std::vector<const ScheduledTrip*> out;
        for (const auto& t : scheduled_trips) {
            auto it = services.find(t.service_id);
            if (it != services.end() && it->second.days[static_cast<std::size_t>(weekday)]) {
                out.push_back(&t);
            }
        }
        return out;
    }

    /// Trips operating on a calendar date, in start-time order.
    std::vector<const ScheduledTrip*> trips_on(Date date) const {
        std::vector<const ScheduledTrip*> out;
        const int wd = weekday_index(date);
        for (const auto& t : scheduled_trips) {
            auto it = services.find(t.service_id);
            if (it == services.end()) {
                continue;
            }
            const auto& cal = it->second;
            if (cal.days[static_cast<std::size_t>(wd)] && date >= cal.start_date && date <= cal.end_date) {
                out.push_back(&t);
            }
        }
        std::stable_sort(out.begin(), out.end(),
                         [](const ScheduledTrip* a, const ScheduledTrip* b) { return a->start < b->start; });
        return out;
    }
};

// ---------------------------------------------------------------------------
// Geography

struct Street {
    std::string name;
    std::vector<GeoPoint> polyline;
};

struct Intersection {
    std::string id;
    GeoPoint position;
};

struct GeoDB {
    std::vector<Street> streets;
    std::vector<Intersection> intersections;

    void validate() const {
        for (const auto& s : streets) {
            if (s.polyline.size() < 2) {
                throw LoadError("street '" + s.name + "' has fewer than 2 points");
            }
        }
        std::set<std::string> ids;
        for (const auto& i : intersections) {
            if (!ids.insert(i.id).second) {
                throw LoadError("duplicate intersection id '" + i.id + "'");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// GTFS-static loader

namespace detail {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::string file;

    std::optional<std::size_t> column(std::string_view name) const {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) {
                return i;
            }
        }
        return std::nullopt;
    }

    std::size_t require(std::string_view name) const {
        auto c = column(name);
        if (!c) {
            throw LoadError(file + ": missing column '" + std::string(name) + "'");
        }
        return *c;
    }

    const std::string& at(const std::vector<std::string>& row, std::size_t c, std::size_t row_no) const {
        if (c >= row.size()) {
            throw LoadError(file + " row " + std::to_string(row_no) + ": too few fields");
        }
        return row[c];
    }
};

inline Table read_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw LoadError("missing file: " + path.string());
    }
    Table t;
    t.file = path.filename().string();
    csv::Reader reader(in);
    auto header = reader.next();
    if (!header) {
        throw LoadError(t.file + ": empty file");
    }
    t.header = std::move(*header);
    if (!t.header.empty() && t.header[0].rfind("\xEF\xBB\xBF", 0) == 0) {
        t.header[0].erase(0, 3);
    }
    for (auto& h : t.header) {
        h = std::string(tritide::detail::trim(h));
    }
    while (auto row = reader.next()) {
        t.rows.push_back(std::move(*row));
    }
    return t;
}

} // namespace detail

/// Loads stops/routes/trips/stop_times/calendar into a ScheduleDB.
/// Station order per (route, direction) comes from stop_sequence; trips
/// without a direction_id are loops whose first half runs outbound.
inline ScheduleDB load_gtfs(const std::filesystem::path& dir) {
    ScheduleDB db;
    for (const char* f : {"stops.txt", "routes.txt", "trips.txt", "stop_times.txt", "calendar.txt"}) {
        if (!std::filesystem::exists(dir / f)) {
            throw LoadError("missing file: " + (dir / f).string());
        }
    }

    auto stops = detail::read_table(dir / "stops.txt");
    {
        auto c_id = stops.require("stop_id");
        auto c_lat = stops.require("stop_lat");
        auto c_lon = stops.require("stop_lon");
        auto c_name = stops.column("stop_name");
        for (std::size_t r = 0; r < stops.rows.size(); ++r) {
            const auto& row = stops.rows[r];
            Station s;
            s.id = stops.at(row, c_id, r + 2);
            auto lat = parse_latitude(stops.at(row, c_lat, r + 2));
            auto lng = parse_longitude(stops.at(row, c_lon, r + 2));
            if (!lat || !lng) {
                throw LoadError("stops.txt row " + std::to_string(r + 2) + ": bad coordinates for stop '" + s.id + "'");
            }
            s.position = {*lat, *lng};
            if (c_name) {
                s.name = stops.at(row, *c_name, r + 2);
            }
            db.stations[s.id] = s;
        }
    }

    auto routes = detail::read_table(dir / "routes.txt");
    {
        auto c_id = routes.require("route_id");
        auto c_short = routes.column("route_short_name");
        auto c_long = routes.column("route_long_name");
        for (std::size_t r = 0; r < routes.rows.size(); ++r) {
            const auto& row = routes.rows[r];
            std::string name;
            if (c_short && *c_short < row.size()) {
                name = row[*c_short];
            }
            if (c_long && *c_long < row.size() && !row[*c_long].empty()) {
                name = name.empty() ? row[*c_long] : name + " " + row[*c_long];
            }
            db.route_names[routes.at(row, c_id, r + 2)] = name;
        }
    }

    auto calendar = detail::read_table(dir / "calendar.txt");
    {
        static constexpr std::array<std::string_view, 7> kDays = {"monday", "tuesday",  "wednesday", "thursday",
                                                                  "friday", "saturday", "sunday"};
        auto c_id = calendar.require("service_id");
        auto c_start = calendar.require("start_date");
        auto c_end = calendar.require("end_date");
        for (std::size_t r = 0; r < calendar.rows.size(); ++r) {
            const auto& row = calendar.rows[r];
            ServiceCalendar cal;
            for (std::size_t d = 0; d < 7; ++d) {
                cal.days[d] = calendar.at(row, calendar.require(kDays[d]), r + 2) == "1";
            }
            auto s = parse_date(calendar.at(row, c_start, r + 2));
            auto e = parse_date(calendar.at(row, c_end, r + 2));
            if (!s || !e) {
                throw LoadError("calendar.txt row " + std::to_string(r + 2) + ": bad date");
            }
            cal.start_date = *s;
            cal.end_date = *e;
            db.services[calendar.at(row, c_id, r + 2)] = cal;
        }
    }

    auto trips = detail::read_table(dir / "trips.txt");
    std::map<std::string, std::size_t> trip_index;
    {
        auto c_route = trips.require("route_id");
        auto c_service = trips.require("service_id");
        auto c_trip = trips.require("trip_id");
        auto c_dir = trips.column("direction_id");
        auto c_block = trips.column("block_id");
        for (std::size_t r = 0; r < trips.rows.size(); ++r) {
            const auto& row = trips.rows[r];
            ScheduledTrip t;
            t.route_id = trips.at(row, c_route, r + 2);
            t.service_id = trips.at(row, c_service, r + 2);
            t.trip_id = trips.at(row, c_trip, r + 2);
            if (!db.route_names.contains(t.route_id)) {
                throw LoadError("trips.txt row " + std::to_string(r + 2) + ": unknown route '" + t.route_id + "'");
            }
            if (!db.services.contains(t.service_id)) {
                throw LoadError("trips.txt row " + std::to_string(r + 2) + ": unknown service '" + t.service_id + "'");
            }
            if (c_dir && *c_dir < row.size()) {
                if (row[*c_dir] == "0") {
                    t.direction = Direction::Outbound;
                } else if (row[*c_dir] == "1") {
                    t.direction = Direction::Return;
                }
            }
            if (c_block && *c_block < row.size()) {
                t.block_id = row[*c_block];
            }
            trip_index[t.trip_id] = db.scheduled_trips.size();
            db.scheduled_trips.push_back(std::move(t));
        }
    }

    auto stop_times = detail::read_table(dir / "stop_times.txt");
    {
        auto c_trip = stop_times.require("trip_id");
        auto c_arr = stop_times.require("arrival_time");
        auto c_dep = stop_times.column("departure_time");
        auto c_stop = stop_times.require("stop_id");
        auto c_seq = stop_times.require("stop_sequence");
        std::map<std::string, std::vector<std::pair<long, std::string>>> sequences;
        std::map<std::string, std::pair<TimeOfDay, TimeOfDay>> spans;
        for (std::size_t r = 0; r < stop_times.rows.size(); ++r) {
            const auto& row = stop_times.rows[r];
            const std::string row_tag = "stop_times.txt row " + std::to_string(r + 2);
            const auto& trip_id = stop_times.at(row, c_trip, r + 2);
            const auto& stop_id = stop_times.at(row, c_stop, r + 2);
            if (!trip_index.contains(trip_id)) {
                throw LoadError(row_tag + ": unknown trip '" + trip_id + "'");
            }
            if (!db.stations.contains(stop_id)) {
                throw LoadError(row_tag + ": unknown stop '" + stop_id + "'");
            }
            auto arr = parse_time_of_day(stop_times.at(row, c_arr, r + 2));
            if (!arr) {
                throw LoadError(row_tag + ": bad arrival_time");
            }
            auto dep = arr;
            if (c_dep && *c_dep < row.size() && !row[*c_dep].empty()) {
                dep = parse_time_of_day(row[*c_dep]);
                if (!dep) {
                    throw LoadError(row_tag + ": bad departure_time");
                }
            }
            long seq = 0;
            try {
                seq = std::stol(stop_times.at(row, c_seq, r + 2));
            } catch (const std::exception&) {
                throw LoadError(row_tag + ": bad stop_sequence");
            }
            db.scheduled_arrivals[{trip_id, stop_id}] = *arr;
            sequences[trip_id].emplace_back(seq, stop_id);
            auto [it, fresh] = spans.try_emplace(trip_id, *arr, *dep);
            if (!fresh) {
                it->second.first = std::min(it->second.first, *arr);
                it->second.second = std::max(it->second.second, *dep);
            }
        }
        for (auto& [trip_id, seq] : sequences) {
            std::stable_sort(seq.begin(), seq.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
            auto& stops_of_trip = db.trip_stops[trip_id];
            for (const auto& [_, stop] : seq) {
                stops_of_trip.push_back(stop);
            }
            auto& trip = db.scheduled_trips[trip_index[trip_id]];
            trip.start = spans[trip_id].first;
            trip.end = spans[trip_id].second;
        }
    }
    for (const auto& t : db.scheduled_trips) {
        if (!db.trip_stops.contains(t.trip_id)) {
            throw LoadError("trips.txt: trip '" + t.trip_id + "' has no stop_times");
        }
        if (t.end <= t.start) {
            throw LoadError("trip '" + t.trip_id + "': scheduled end not after start");
        }
    }

    // Station order: the longest trip per (route, direction) defines it.
    for (const auto& t : db.scheduled_trips) {
        const auto& seq = db.trip_stops[t.trip_id];
        auto assign = [&](Direction d, std::vector<std::string> stops) {
            auto& slot = db.station_order[{t.route_id, d}];
            if (stops.size() > slot.size()) {
                slot = std::move(stops);
            }
        };
        if (t.direction) {
            assign(*t.direction, seq);
        } else {
            const auto half = static_cast<std::ptrdiff_t>(seq.size() / 2);
            assign(Direction::Outbound, {seq.begin(), seq.begin() + half});
            assign(Direction::Return, {seq.begin() + half, seq.end()});
        }
    }
    return db;
}

inline void write_gtfs(const std::filesystem::path& dir, const ScheduleDB& db) {
    std::filesystem::create_directories(dir);
    auto open = [&](const char* name) {
        std::ofstream out(dir / name);
        if (!out) {
            throw LoadError("cannot write " + (dir / name).string());
        }
        return out;
    };
    {
        auto out = open("stops.txt");
        out << "stop_id,stop_name,stop_lat,stop_lon\n";
        for (const auto& [id, s] : db.stations) {
            std::string line;
            csv::append_field(line, id);
            line += ',';
            csv::append_field(line, s.name);
            out << line << ',' << tritide::detail::format_double(s.position.lat) << ','
                << tritide::detail::format_double(s.position.lng) << '\n';
        }
    }
    {
        auto out = open("routes.txt");
        out << "route_id,route_short_name,route_long_name,route_type\n";
        for (const auto& [id, name] : db.route_names) {
            std::string line;
            csv::append_field(line, id);
            line += ",,";
            csv::append_field(line, name);
            out << line << ",3\n";
        }
    }
    {
        auto out = open("calendar.txt");
        out << "service_id,monday,tuesday,wednesday,thursday,friday,saturday,sunday,start_date,end_date\n";
        for (const auto& [id, cal] : db.services) {
            out << id;
            for (bool d : cal.days) {
                out << ',' << (d ? 1 : 0);
            }
            out << ',' << format_date_compact(cal.start_date) << ',' << format_date_compact(cal.end_date) << '\n';
        }
    }
    {
        auto out = open("trips.txt");
        out << "route_id,service_id,trip_id,direction_id,block_id\n";
        for (const auto& t : db.scheduled_trips) {
            out << t.route_id << ',' << t.service_id << ',' << t.trip_id << ',';
            if (t.direction) {
                out << (*t.direction == Direction::Outbound ? "0" : "1");
            }
            out << ',' << t.block_id << '\n';
        }
    }
    {
        auto out = open("stop_times.txt");
        out << "trip_id,arrival_time,departure_time,stop_id,stop_sequence\n";
        for (const auto& t : db.scheduled_trips) {
            auto it = db.trip_stops.find(t.trip_id);
            if (it == db.trip_stops.end()) {
                continue;
            }
            for (std::size_t i = 0; i < it->second.size(); ++i) {
                const auto& stop = it->second[i];
                const auto arr = format_time_of_day(db.scheduled_arrivals.at({t.trip_id, stop}));
                out << t.trip_id << ',' << arr << ',' << arr << ',' << stop << ',' << (i + 1) << '\n';
            }
        }
    }
}

// ---------------------------------------------------------------------------
// GeoJSON street layer

/// LineString features with a "name" property are streets; Point features
/// with an "intersection_id" property are intersections.
inline GeoDB parse_geojson(const nlohmann::json& doc) {
    GeoDB geo;
    if (!doc.is_object() || doc.value("type", "") != "FeatureCollection" || !doc.contains("features")) {
        throw LoadError("GeoJSON: expected a FeatureCollection");
    }
    auto point_of = [](const nlohmann::json& c) {
        if (!c.is_array() || c.size() < 2) {
            throw LoadError("GeoJSON: malformed coordinate");
        }
        GeoPoint p{c[1].get<double>(), c[0].get<double>()};
        if (!p.valid()) {
            throw LoadError("GeoJSON: coordinate out of range");
        }
        return p;
    };
    for (const auto& f : doc["features"]) {
        const auto& g = f.at("geometry");
        const auto type = g.at("type").get<std::string>();
        const auto props = f.value("properties", nlohmann::json::object());
        if (type == "LineString" && props.contains("name")) {
            Street s;
            s.name = props["name"].get<std::string>();
            for (const auto& c : g.at("coordinates")) {
                s.polyline.push_back(point_of(c));
            }
            geo.streets.push_back(std::move(s));
        } else if (type == "Point" && props.contains("intersection_id")) {
            const auto& id = props["intersection_id"];
            geo.intersections.push_back({id.is_string() ? id.get<std::string>() : id.dump(), point_of(g.at("coordinates"))});
        }
    }
    geo.validate();
    return geo;
}

inline GeoDB load_geojson(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw LoadError("missing file: " + path.string());
    }
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(path.string() + ": " + e.what());
    }
    return parse_geojson(doc);
}

inline nlohmann::json to_geojson(const GeoDB& geo) {
    nlohmann::json features = nlohmann::json::array();
    for (const auto& s : geo.streets) {
        nlohmann::json coords = nlohmann::json::array();
        for (const auto& p : s.polyline) {
            coords.push_back({p.lng, p.lat});
        }
        features.push_back({{"type", "Feature"},
                            {"properties", {{"name", s.name}}},
                            {"geometry", {{"type", "LineString"}, {"coordinates", coords}}}});
    }
    for (const auto& i : geo.intersections) {
        features.push_back({{"type", "Feature"},
                            {"properties", {{"intersection_id", i.id}}},
                            {"geometry", {{"type", "Point"}, {"coordinates", {i.position.lng, i.position.lat}}}}});
    }
    return {{"type", "FeatureCollection"}, {"features", features}};
}

// ---------------------------------------------------------------------------
// Feed stream items

/// A record that could not be mapped onto a FeedTuple; the edge layer decides
/// whether it can be repaired.
struct MalformedRecord {
    std::vector<std::string> fields;
    ParseError error;

    friend bool operator==(const MalformedRecord& a, const MalformedRecord& b) { return a.fields == b.fields; }
};

using FeedItem = std::variant<FeedTuple, MalformedRecord>;

inline FeedItem to_item(std::vector<std::string> fields, const ParseOptions& opts = {}) {
    auto parsed = parse_tuple(fields, opts);
    if (auto* t = std::get_if<FeedTuple>(&parsed)) {
        return std::move(*t);
    }
    return MalformedRecord{std::move(fields), std::get<ParseError>(parsed)};
}

inline std::vector<std::string> item_fields(const FeedItem& item) {
    if (const auto* t = std::get_if<FeedTuple>(&item)) {
        auto a = to_fields(*t);
        return {a.begin(), a.end()};
    }
    return std::get<MalformedRecord>(item).fields;
}

inline std::string serialize_item(const FeedItem& item) { return csv::join(item_fields(item)); }

// ---------------------------------------------------------------------------
// Replay

struct AsFastAsPossible {};
struct Scaled {
    double factor = 1.0;
};
using Pacing = std::variant<AsFastAsPossible, Scaled>;

/// Pull-based reader over a canonical feed CSV. Rows come back in file order;
/// rows that fail to parse are yielded as MalformedRecord, never thrown.
class ReplayStream {
public:
    ReplayStream(const std::filesystem::path& path, Pacing pacing = AsFastAsPossible{}, ParseOptions opts = {})
        : in_(path), reader_(in_), pacing_(pacing), opts_(opts) {
        if (!in_) {
            throw LoadError("missing file: " + path.string());
        }
    }

    std::optional<FeedItem> next() {
        while (auto fields = reader_.next()) {
            if (first_) {
                first_ = false;
                if (!fields->empty() && fields->front() == kFeedColumns.front()) {
                    continue;
                }
            }
            FeedItem item = to_item(std::move(*fields), opts_);
            pace(item);
            return item;
        }
        return std::nullopt;
    }

private:
    void pace(const FeedItem& item) {
        const auto* scaled = std::get_if<Scaled>(&pacing_);
        const auto* t = std::get_if<FeedTuple>(&item);
        if (!scaled || !t || !(scaled->factor > 0.0)) {
            return;
        }
        if (last_ && t->timestamp > *last_) {
            const double gap = static_cast<double>((t->timestamp - *last_).count()) / scaled->factor;
            std::this_thread::sleep_for(std::chrono::duration<double>(gap));
        }
        if (!last_ || t->timestamp > *last_) {
            last_ = t->timestamp;
        }
    }

    std::ifstream in_;
    csv::Reader reader_;
    Pacing pacing_;
    ParseOptions opts_;
    bool first_ = true;
    std::optional<Timestamp> last_;
};

inline std::vector<FeedItem> replay_csv(const std::filesystem::path& path, Pacing pacing = AsFastAsPossible{},
                                        ParseOptions opts = {}) {
    ReplayStream stream(path, pacing, opts);
    std::vector<FeedItem> out;
    while (auto item = stream.next()) {
        out.push_back(std::move(*item));
    }
    return out;
}

inline void write_feed_csv(std::ostream& out, const std::vector<FeedItem>& items) {
    out << feed_header() << '\n';
    for (const auto& item : items) {
        out << serialize_item(item) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Synthetic network

/// Parameters of a generated single-route network: a one-way loop that runs
/// east along one street, crosses over on an express leg, and comes back west
/// along a parallel street.
struct NetworkParams {
    GeoPoint origin{46.0878, -64.7782};
    std::string route_id = "51";
    std::string route_name = "51 Hildegard";
    int stations_per_direction = 8;
    double station_spacing_m = 600.0;
    double express_m = 3700.0;
    int weekday_trips = 66;
    int sunday_trips = 23;
    TimeOfDay weekday_first{5 * 3600};
    std::int64_t weekday_headway_s = 960;
    TimeOfDay sunday_first{6 * 3600 + 1800};
    std::int64_t sunday_headway_s = 2700;
    double trip_duration_s = 2700.0;
    double nominal_dwell_s = 25.0;
    int buses = 1;
    Date start_date = Date{std::chrono::year{2017} / 2 / 14};
    Date end_date = Date{std::chrono::year{2017} / 12 / 31};
};

/// Motion constants shared by schedule construction and the generator:
/// buses cover their last 15 m before a stop at 2.5 m/s and leave at cruise speed.
inline constexpr double kApproachLengthM = 15.0;
inline constexpr double kApproachSpeedMps = 2.5;

struct SyntheticNetwork {
    ScheduleDB schedule;
    GeoDB geo;
    std::vector<GeoPoint> depot;
    /// Route path shared by every trip: straight legs between stations.
    std::vector<GeoPoint> path;
    /// Stations in visiting order along `path`, with their arc positions.
    std::vector<std::pair<std::string, double>> stops_along_path;
};

/// Polyline with cumulative arc length for position interpolation.
class PathGeometry {
public:
    PathGeometry() = default;
    explicit PathGeometry(std::vector<GeoPoint> pts) : pts_(std::move(pts)) {
        cum_.push_back(0.0);
        for (std::size_t i = 1; i < pts_.size(); ++i) {
            cum_.push_back(cum_.back() + haversine_m(pts_[i - 1], pts_[i]));
        }
    }

    double length() const { return cum_.empty() ? 0.0 : cum_.back(); }

    GeoPoint at(double s) const {
        if (pts_.empty()) {
            return {};
        }
        if (s <= 0.0) {
            return pts_.front();
        }
        if (s >= length()) {
            return pts_.back();
        }
        auto it = std::upper_bound(cum_.begin(), cum_.end(), s);
        const auto i = static_cast<std::size_t>(it - cum_.begin());
        const double seg = cum_[i] - cum_[i - 1];
        const double f = seg > 0.0 ? (s - cum_[i - 1]) / seg : 0.0;
        return {pts_[i - 1].lat + f * (pts_[i].lat - pts_[i - 1].lat),
                pts_[i - 1].lng + f * (pts_[i].lng - pts_[i - 1].lng)};
    }

    /// Arc position of the closest path point and its distance.
    std::pair<double, double> project(const GeoPoint& p) const {
        double best_s = 0.0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i + 1 < pts_.size(); ++i) {
            const LocalXY a = to_local(p, pts_[i]);
            const LocalXY b = to_local(p, pts_[i + 1]);
            const double dx = b.x - a.x;
            const double dy = b.y - a.y;
            const double len2 = dx * dx + dy * dy;
            const double t = len2 > 0.0 ? std::clamp(-(a.x * dx + a.y * dy) / len2, 0.0, 1.0) : 0.0;
            const double d = std::hypot(a.x + t * dx, a.y + t * dy);
            if (d < best_d) {
                best_d = d;
                best_s = cum_[i] + t * (cum_[i + 1] - cum_[i]);
            }
        }
        return {best_s, best_d};
    }

    const std::vector<GeoPoint>& points() const { return pts_; }

private:
    std::vector<GeoPoint> pts_;
    std::vector<double> cum_;
};

enum class PhaseKind { Dwell, Approach, Cruise };

struct Phase {
    PhaseKind kind;
    double t0;
    double t1;
    double s0;
    double s1;
    /// Station served by a dwell; empty for congestion dwells.
    std::string station_id;
};

/// Piecewise-constant-speed timeline of one trip, in seconds after its start.
struct TripTimeline {
    std::vector<Phase> phases;

    double duration() const { return phases.empty() ? 0.0 : phases.back().t1; }

    double arc_at(double t) const {
        if (phases.empty()) {
            return 0.0;
        }
        if (t <= phases.front().t0) {
            return phases.front().s0;
        }
        for (const auto& p : phases) {
            if (t <= p.t1) {
                const double span = p.t1 - p.t0;
                const double f = span > 0.0 ? (t - p.t0) / span : 1.0;
                return p.s0 + f * (p.s1 - p.s0);
            }
        }
        return phases.back().s1;
    }

    void scale_time(double factor) {
        for (auto& p : phases) {
            p.t0 *= factor;
            p.t1 *= factor;
        }
    }
};

struct StopPoint {
    double arc = 0.0;
    double dwell = 0.0;
    std::string station_id;
    bool congestion = false;
};

/// Builds a trip timeline. Cruise speed is solved so that the trip without
/// congestion stops lasts exactly `duration_s`; congestion stops then add
/// their dwell and slow approach on top.
inline TripTimeline build_timeline(std::vector<StopPoint> stops, double duration_s) {
    std::stable_sort(stops.begin(), stops.end(), [](const StopPoint& a, const StopPoint& b) { return a.arc < b.arc; });
    if (stops.size() < 2) {
        throw std::invalid_argument("a trip needs at least two stops");
    }
    double fixed = 0.0;
    double cruise_len = 0.0;
    double prev_arc = stops.front().arc;
    for (std::size_t k = 0; k < stops.size(); ++k) {
        if (stops[k].congestion) {
            continue;
        }
        fixed += stops[k].dwell;
        if (k > 0) {
            const double gap = stops[k].arc - prev_arc;
            const double approach = std::min(kApproachLengthM, gap);
            fixed += approach / kApproachSpeedMps;
            cruise_len += gap - approach;
        }
        prev_arc = stops[k].arc;
    }
    const double cruise_time = duration_s - fixed;
    if (!(cruise_time > 0.0)) {
        throw std::invalid_argument("dwell and approach time exceed trip duration");
    }
    const double speed = cruise_len / cruise_time;

    TripTimeline tl;
    double t = 0.0;
    tl.phases.push_back({PhaseKind::Dwell, 0.0, stops[0].dwell, stops[0].arc, stops[0].arc, stops[0].station_id});
    t = stops[0].dwell;
    for (std::size_t k = 1; k < stops.size(); ++k) {
        const double from = stops[k - 1].arc;
        const double gap = stops[k].arc - from;
        const double approach = std::min(kApproachLengthM, gap);
        const double cruise = gap - approach;
        if (cruise > 0.0) {
            const double dt = speed > 0.0 ? cruise / speed : 0.0;
            tl.phases.push_back({PhaseKind::Cruise, t, t + dt, from, from + cruise, {}});
            t += dt;
        }
        if (approach > 0.0) {
            const double dt = approach / kApproachSpeedMps;
            tl.phases.push_back({PhaseKind::Approach, t, t + dt, from + cruise, stops[k].arc, {}});
            t += dt;
        }
        tl.phases.push_back(
            {PhaseKind::Dwell, t, t + stops[k].dwell, stops[k].arc, stops[k].arc, stops[k].station_id});
        t += stops[k].dwell;
    }
    return tl;
}

inline SyntheticNetwork build_synthetic_network(const NetworkParams& p) {
    SyntheticNetwork net;
    const int n = p.stations_per_direction;
    const double span = p.station_spacing_m * (n - 1);
    const double north = p.express_m;
    auto at_xy = [&](double x, double y) { return offset_m(p.origin, x, y); };

    auto& sched = net.schedule;
    sched.route_names[p.route_id] = p.route_name;
    std::vector<std::string> stop_ids;
    for (int i = 0; i < n; ++i) {
        Station s{"68107" + std::to_string(10 + i), "Outbound " + std::to_string(i + 1), at_xy(i * p.station_spacing_m, 0)};
        stop_ids.push_back(s.id);
        sched.stations[s.id] = s;
        net.path.push_back(s.position);
    }
    for (int j = 0; j < n; ++j) {
        Station s{"68108" + std::to_string(10 + j), "Return " + std::to_string(j + 1),
                  at_xy(span - j * p.station_spacing_m, north)};
        stop_ids.push_back(s.id);
        sched.stations[s.id] = s;
        net.path.push_back(s.position);
    }
    PathGeometry geom(net.path);
    for (const auto& id : stop_ids) {
        net.stops_along_path.emplace_back(id, geom.project(sched.stations[id].position).first);
    }
    sched.station_order[{p.route_id, Direction::Outbound}] = {stop_ids.begin(), stop_ids.begin() + n};
    sched.station_order[{p.route_id, Direction::Return}] = {stop_ids.begin() + n, stop_ids.end()};

    ServiceCalendar weekday{{true, true, true, true, true, true, false}, p.start_date, p.end_date};
    ServiceCalendar sunday{{false, false, false, false, false, false, true}, p.start_date, p.end_date};
    sched.services["WK"] = weekday;
    sched.services["SU"] = sunday;

    std::vector<StopPoint> nominal;
    for (const auto& [id, arc] : net.stops_along_path) {
        nominal.push_back({arc, p.nominal_dwell_s, id, false});
    }
    const TripTimeline tl = build_timeline(nominal, p.trip_duration_s);
    std::vector<double> arrival_offsets;
    for (const auto& ph : tl.phases) {
        if (ph.kind == PhaseKind::Dwell) {
            arrival_offsets.push_back(ph.t0);
        }
    }

    auto add_trips = [&](const std::string& service, int count, TimeOfDay first, std::int64_t headway, int base_id) {
        for (int i = 0; i < count; ++i) {
            ScheduledTrip t;
            t.trip_id = std::to_string(base_id + i + 1);
            t.route_id = p.route_id;
            t.service_id = service;
            t.block_id = "B" + std::to_string(i % std::max(1, p.buses) + 1);
            t.start = TimeOfDay{first.seconds + i * headway};
            t.end = TimeOfDay{t.start.seconds + static_cast<std::int64_t>(std::llround(p.trip_duration_s))};
            for (std::size_t k = 0; k < stop_ids.size(); ++k) {
                sched.scheduled_arrivals[{t.trip_id, stop_ids[k]}] =
                    TimeOfDay{t.start.seconds + static_cast<std::int64_t>(std::llround(arrival_offsets[k]))};
            }
            sched.trip_stops[t.trip_id] = stop_ids;
            sched.scheduled_trips.push_back(std::move(t));
        }
    };
    add_trips("WK", p.weekday_trips, p.weekday_first, p.weekday_headway_s, 51000);
    add_trips("SU", p.sunday_trips, p.sunday_first, p.sunday_headway_s, 51100);

    // Streets: the two parallel avenues, the express connector, and cross
    // streets between consecutive stations that meet both avenues.
    net.geo.streets.push_back({"Main St", {at_xy(-150, 0), at_xy(span + 150, 0)}});
    net.geo.streets.push_back({"Mountain Rd", {at_xy(span, 0), at_xy(span, north)}});
    net.geo.streets.push_back({"Plaza Blvd", {at_xy(-150, north), at_xy(span + 150, north)}});
    for (int i = 0; i + 1 < n; ++i) {
        const double x = (i + 0.5) * p.station_spacing_m;
        net.geo.streets.push_back({"Cross St " + std::to_string(i + 1), {at_xy(x, -300), at_xy(x, north + 300)}});
        net.geo.intersections.push_back({"I" + std::to_string(2 * i + 1), at_xy(x, 0)});
        net.geo.intersections.push_back({"I" + std::to_string(2 * i + 2), at_xy(x, north)});
    }
    net.depot = {at_xy(-700, -700), at_xy(-400, -700), at_xy(-400, -400), at_xy(-700, -400)};
    return net;
}

// ---------------------------------------------------------------------------
// Synthetic feed generator

struct MissingTripAt {
    int day = 0;
    int hour = 0;
};

struct CongestionAt {
    GeoPoint point;
    double extra_dwell_s = 0.0;
};

struct StormDay {
    int day = 0;
    double slowdown = 1.0;
};

/// Forces the first trip starting in (day, hour) to last `duration_s`.
struct TripDurationAt {
    int day = 0;
    int hour = 0;
    double duration_s = 0.0;
};

struct SynthConfig {
    std::string route_id = "51";
    int weekday_trips = 66;
    int sunday_trips = 23;
    double trip_duration_s = 2700.0;
    std::int64_t sample_period_s = 5;
    double gps_noise_sigma_m = 0.0;
    int days = 7;
    Date start_date = Date{std::chrono::year{2017} / 2 / 14};
    Seconds utc_offset{0};
    int buses = 1;
    std::vector<MissingTripAt> missing_trips;
    std::vector<CongestionAt> congestion;
    std::vector<StormDay> storm_days;
    std::vector<TripDurationAt> trip_durations;
    double duplicate_rate = 0.0;
    double drop_rate = 0.0;
    double corrupt_rate = 0.0;
    std::uint64_t rng_seed = 1;

    void validate() const {
        auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
        if (!rate_ok(duplicate_rate) || !rate_ok(drop_rate) || !rate_ok(corrupt_rate)) {
            throw std::invalid_argument("synth rates must lie in [0, 1]");
        }
        if (weekday_trips <= 0 || sunday_trips <= 0 || days <= 0 || buses <= 0 || sample_period_s <= 0 ||
            !(trip_duration_s > 0.0)) {
            throw std::invalid_argument("synth counts must be positive");
        }
        if (gps_noise_sigma_m < 0.0) {
            throw std::invalid_argument("gps noise must be non-negative");
        }
    }
};

struct TruthTrip {
    std::int64_t instance_id = 0;
    std::string trip_id;
    Date service_date{};
    Timestamp start{};
    double duration_s = 0.0;
    std::size_t tuples = 0;
    std::int64_t vehicle_id = 0;
};

struct TruthDwell {
    std::int64_t instance_id = 0;
    std::string trip_id;
    std::string station_id;
    bool congestion = false;
    double start_s = 0.0;
    double end_s = 0.0;
    Timestamp trip_start{};
    GeoPoint position;

    double start_epoch() const { return static_cast<double>(epoch_seconds(trip_start)) + start_s; }
    double end_epoch() const { return static_cast<double>(epoch_seconds(trip_start)) + end_s; }
};

/// Constant-speed interval of a trip (epoch seconds).
struct TruthSegment {
    std::int64_t instance_id = 0;
    double t0 = 0.0;
    double t1 = 0.0;
    double speed_mps = 0.0;
};

struct TruthMissing {
    std::string trip_id;
    Date service_date{};
    Timestamp scheduled_start{};
};

/// Generator-side facts. Only tests read this; no pipeline layer may.
struct GroundTruth {
    std::vector<TruthTrip> trips;
    std::vector<TruthDwell> dwells;
    std::vector<TruthSegment> segments;
    std::vector<TruthMissing> missing_trips;
    std::vector<std::int64_t> duration_anomaly_trips;
    std::size_t emitted = 0;
    std::size_t duplicates = 0;
    std::size_t dropped = 0;
    std::size_t corrupted = 0;
};

struct SyntheticFeed {
    std::vector<FeedItem> items;
    GroundTruth truth;
};

inline constexpr std::string_view kBusDescription = "40ft low-floor";

namespace detail {

inline std::string mangle_case(std::string s, std::mt19937_64& rng) {
    for (auto& c : s) {
        if (std::isalpha(static_cast<unsigned char>(c)) && (rng() & 1U)) {
            c = static_cast<char>(std::isupper(static_cast<unsigned char>(c)) ? std::tolower(c) : std::toupper(c));
        }
    }
    return s;
}

} // namespace detail

/// Synthesizes a time-ordered feed for `cfg.days` days starting at
/// cfg.start_date, following the schedule's station order for cfg.route_id.
/// Deterministic for a fixed seed.
inline SyntheticFeed generate_feed(const SynthConfig& cfg, const ScheduleDB& sched, const GeoDB& /*geo*/) {
    cfg.validate();
    auto out_it = sched.station_order.find({cfg.route_id, Direction::Outbound});
    auto ret_it = sched.station_order.find({cfg.route_id, Direction::Return});
    std::vector<std::string> order;
    if (out_it != sched.station_order.end()) {
        order = out_it->second;
    }
    if (ret_it != sched.station_order.end()) {
        order.insert(order.end(), ret_it->second.begin(), ret_it->second.end());
    }
    if (order.size() < 2) {
        throw std::invalid_argument("route '" + cfg.route_id + "' has fewer than two ordered stations");
    }
    std::vector<GeoPoint> station_path;
    for (const auto& id : order) {
        station_path.push_back(sched.stations.at(id).position);
    }
    // Straight segments between consecutive stations; a synthetic network
    // inserts its own turn by listing the path through the stations.
    PathGeometry geom(station_path);
    std::vector<double> station_arcs;
    {
        double acc = 0.0;
        station_arcs.push_back(0.0);
        for (std::size_t i = 1; i < station_path.size(); ++i) {
            acc += haversine_m(station_path[i - 1], station_path[i]);
            station_arcs.push_back(acc);
        }
    }

    std::mt19937_64 rng(cfg.rng_seed);
    std::uniform_real_distribution<double> dwell_dist(10.0, 40.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    std::string route_name = cfg.route_id;
    if (auto it = sched.route_names.find(cfg.route_id); it != sched.route_names.end() && !it->second.empty()) {
        route_name = it->second;
    }
    const std::int64_t route_num = [&] {
        try {
            return static_cast<std::int64_t>(std::stoll(cfg.route_id));
        } catch (const std::exception&) {
            return std::int64_t{0};
        }
    }();

    struct Sample {
        FeedTuple tuple;
        std::size_t trip_ordinal;
    };
    std::vector<Sample> samples;
    SyntheticFeed feed;
    std::int64_t vlr_counter = 1;
    std::size_t trip_ordinal = 0;

    for (int day = 0; day < cfg.days; ++day) {
        const Date date = cfg.start_date + std::chrono::days{day};
        const bool sunday = weekday_index(date) == 6;
        auto trips = sched.trips_on(date);
        std::vector<const ScheduledTrip*> route_trips;
        for (const auto* t : trips) {
            if (t->route_id == cfg.route_id) {
                route_trips.push_back(t);
            }
        }
        const auto limit = static_cast<std::size_t>(sunday ? cfg.sunday_trips : cfg.weekday_trips);
        if (route_trips.size() > limit) {
            route_trips.resize(limit);
        }
        std::set<int> duration_hours_used;
        for (std::size_t k = 0; k < route_trips.size(); ++k) {
            const ScheduledTrip& st = *route_trips[k];
            const Timestamp start = at(date, st.start, cfg.utc_offset);
            const int hour = st.start.hour();
            const std::int64_t instance = (static_cast<std::int64_t>(static_cast<int>(std::chrono::year_month_day{date}.year())) * 10000 +
                                           static_cast<unsigned>(std::chrono::year_month_day{date}.month()) * 100 +
                                           static_cast<unsigned>(std::chrono::year_month_day{date}.day())) *
                                              1000 +
                                          static_cast<std::int64_t>(k + 1);

            // Draws happen for every scheduled trip so that anomalies on one
            // trip never shift the random stream of the others.
            std::vector<double> dwells;
            for (std::size_t i = 0; i < order.size(); ++i) {
                dwells.push_back(dwell_dist(rng));
            }

            bool missing = false;
            for (const auto& m : cfg.missing_trips) {
                missing = missing || (m.day == day && m.hour == hour);
            }
            if (missing) {
                feed.truth.missing_trips.push_back({st.trip_id, date, start});
                continue;
            }

            std::vector<StopPoint> stops;
            for (std::size_t i = 0; i < order.size(); ++i) {
                stops.push_back({station_arcs[i], dwells[i], order[i], false});
            }
            for (const auto& c : cfg.congestion) {
                auto [arc, dist] = geom.project(c.point);
                if (dist <= 30.0) {
                    stops.push_back({arc, c.extra_dwell_s, {}, true});
                }
            }
            TripTimeline tl = build_timeline(stops, cfg.trip_duration_s);
            double scale = 1.0;
            for (const auto& s : cfg.storm_days) {
                if (s.day == day) {
                    scale *= s.slowdown;
                }
            }
            for (const auto& d : cfg.trip_durations) {
                if (d.day == day && d.hour == hour && !duration_hours_used.contains(hour)) {
                    duration_hours_used.insert(hour);
                    scale = d.duration_s / tl.duration();
                    feed.truth.duration_anomaly_trips.push_back(instance);
                }
            }
            tl.scale_time(scale);

            std::int64_t vehicle = 1001;
            if (!st.block_id.empty() && st.block_id[0] == 'B') {
                try {
                    vehicle = 1000 + std::stoll(st.block_id.substr(1));
                } catch (const std::exception&) {
                }
            }

            TruthTrip tt;
            tt.instance_id = instance;
            tt.trip_id = st.trip_id;
            tt.service_date = date;
            tt.start = start;
            tt.duration_s = tl.duration();
            tt.vehicle_id = vehicle;

            for (const auto& ph : tl.phases) {
                const double t0 = static_cast<double>(epoch_seconds(start)) + ph.t0;
                const double t1 = static_cast<double>(epoch_seconds(start)) + ph.t1;
                if (ph.kind == PhaseKind::Dwell) {
                    feed.truth.dwells.push_back({instance, st.trip_id, ph.station_id, ph.station_id.empty(), ph.t0,
                                                 ph.t1, start, geom.at(ph.s0)});
                } else if (ph.t1 > ph.t0) {
                    feed.truth.segments.push_back({instance, t0, t1, (ph.s1 - ph.s0) / (ph.t1 - ph.t0)});
                }
            }

            const auto duration = static_cast<std::int64_t>(std::llround(tl.duration()));
            for (std::int64_t t = 0; t < duration; t += cfg.sample_period_s) {
                GeoPoint pos = geom.at(tl.arc_at(static_cast<double>(t)));
                if (cfg.gps_noise_sigma_m > 0.0) {
                    pos = offset_m(pos, noise(rng) * cfg.gps_noise_sigma_m, noise(rng) * cfg.gps_noise_sigma_m);
                }
                FeedTuple ft;
                ft.vlr_id = vlr_counter++;
                ft.route_id_vlr = route_num;
                ft.route_name = route_name;
                ft.route_id_rta = route_num;
                ft.route_nickname = cfg.route_id;
                ft.trip_id_br = instance;
                ft.transit_authority_service_time_id = sunday ? 2 : 1;
                ft.trip_id_tta = std::stoll(st.trip_id);
                ft.trip_start = st.start;
                ft.trip_finish = st.end;
                ft.vehicle_id_vab = vehicle;
                ft.vehicle_id_vlr = vehicle;
                ft.vehicle_id_vlr_ta = "Bus " + std::to_string(vehicle);
                ft.bdescription = std::string(kBusDescription);
                ft.lat = pos.lat;
                ft.lng = pos.lng;
                ft.timestamp = start + Seconds{t};
                samples.push_back({std::move(ft), trip_ordinal});
                ++tt.tuples;
            }
            feed.truth.trips.push_back(tt);
            ++trip_ordinal;
        }
    }

    std::stable_sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) {
        if (a.tuple.timestamp != b.tuple.timestamp) {
            return a.tuple.timestamp < b.tuple.timestamp;
        }
        return a.trip_ordinal < b.trip_ordinal;
    });

    for (auto& s : samples) {
        if (cfg.drop_rate > 0.0 && unit(rng) < cfg.drop_rate) {
            ++feed.truth.dropped;
            continue;
        }
        FeedItem item = s.tuple;
        if (cfg.corrupt_rate > 0.0 && unit(rng) < cfg.corrupt_rate) {
            ++feed.truth.corrupted;
            auto fields = item_fields(item);
            switch (rng() % 5) {
            case 0: // attribute lost from the tail of the telemetry block
                fields.erase(fields.begin() + static_cast<std::ptrdiff_t>(col::bdescription));
                break;
            case 1: // attribute appended
                fields.push_back("extra");
                break;
            case 2: // misspelled route name
                fields[col::route_name] = detail::mangle_case(fields[col::route_name], rng);
                break;
            case 3: // blank coordinate
                fields[col::lat].clear();
                break;
            default: // garbled coordinate
                fields[col::lng] = "-6x.7" + fields[col::lng].substr(std::min<std::size_t>(5, fields[col::lng].size()));
                break;
            }
            item = to_item(std::move(fields));
        }
        feed.items.push_back(item);
        ++feed.truth.emitted;
        if (cfg.duplicate_rate > 0.0 && unit(rng) < cfg.duplicate_rate) {
            feed.items.push_back(item);
            ++feed.truth.duplicates;
            ++feed.truth.emitted;
        }
    }
    return feed;
}

inline nlohmann::json truth_to_json(const GroundTruth& gt) {
    nlohmann::json trips = nlohmann::json::array();
    for (const auto& t : gt.trips) {
        trips.push_back({{"instance_id", t.instance_id},
                         {"trip_id", t.trip_id},
                         {"service_date", format_date(t.service_date)},
                         {"start", format_timestamp(t.start)},
                         {"duration_s", t.duration_s},
                         {"tuples", t.tuples},
                         {"vehicle_id", t.vehicle_id}});
    }
    nlohmann::json dwells = nlohmann::json::array();
    for (const auto& d : gt.dwells) {
        dwells.push_back({{"instance_id", d.instance_id},
                          {"station_id", d.station_id},
                          {"congestion", d.congestion},
                          {"start_epoch", d.start_epoch()},
                          {"end_epoch", d.end_epoch()}});
    }
    nlohmann::json missing = nlohmann::json::array();
    for (const auto& m : gt.missing_trips) {
        missing.push_back({{"trip_id", m.trip_id},
                           {"service_date", format_date(m.service_date)},
                           {"scheduled_start", format_timestamp(m.scheduled_start)}});
    }
    return {{"trips", trips},
            {"dwells", dwells},
            {"missing_trips", missing},
            {"duration_anomaly_trips", gt.duration_anomaly_trips},
            {"emitted", gt.emitted},
            {"duplicates", gt.duplicates},
            {"dropped", gt.dropped},
            {"corrupted", gt.corrupted}};
}

} // namespace tritide::ingest
