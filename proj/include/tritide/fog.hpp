#pragma once

// Fog node: contextualizes cleaned edge records (stop categories, streets,
// stations, intersections, arrival/departure, trip roles), clusters stops
// with DBSCAN and forwards only cluster members to the cloud.

#include "tritide/edge.hpp"
#include "tritide/feedcore.hpp"
#include "tritide/grid_index.hpp"
#include "tritide/ingest.hpp"

#include <algorithm>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace tritide::fog {

struct StationBuffer {
    std::string station_id;
    GeoPoint center;
    double radius = 30.0;
};

inline std::vector<StationBuffer> station_buffers(const ingest::ScheduleDB& sched, double radius = 30.0) {
    std::vector<StationBuffer> out;
    for (const auto& [id, s] : sched.stations) {
        out.push_back({id, s.position, radius});
    }
    return out;
}

/// Station buffers behind a grid index.
class StationIndex {
public:
    StationIndex() = default;

    explicit StationIndex(std::vector<StationBuffer> buffers) : buffers_(std::move(buffers)) {
        std::vector<GeoPoint> centers;
        for (const auto& b : buffers_) {
            if (!(b.radius > 0.0)) {
                throw std::invalid_argument("station buffer radius must be positive: " + b.station_id);
            }
            centers.push_back(b.center);
            max_radius_ = std::max(max_radius_, b.radius);
        }
        grid_ = GridIndex(centers, 30.0);
    }

    const std::vector<StationBuffer>& buffers() const { return buffers_; }

    /// Nearest buffer containing `p` (inclusive radius), optionally restricted
    /// to the given station ids. Equal distances resolve to the earlier buffer.
    std::optional<std::pair<std::size_t, double>> containing(const GeoPoint& p,
                                                              const std::set<std::string>* allowed = nullptr) const {
        std::optional<std::pair<std::size_t, double>> best;
        if (buffers_.empty()) {
            return best;
        }
        for (const auto& [i, d] : grid_.within(p, max_radius_)) {
            if (d > buffers_[i].radius) {
                continue;
            }
            if (allowed && !allowed->contains(buffers_[i].station_id)) {
                continue;
            }
            if (!best || d < best->second) {
                best = std::pair{i, d};
            }
        }
        return best;
    }

    /// Nearest station center within `radius_m`, regardless of buffer sizes.
    std::optional<std::pair<std::string, double>> nearest(const GeoPoint& p, double radius_m) const {
        if (buffers_.empty()) {
            return std::nullopt;
        }
        auto hit = grid_.nearest_within(p, radius_m);
        if (!hit) {
            return std::nullopt;
        }
        return std::pair{buffers_[hit->first].station_id, hit->second};
    }

private:
    std::vector<StationBuffer> buffers_;
    GridIndex grid_;
    double max_radius_ = 0.0;
};

// ---------------------------------------------------------------------------
// Contextualization steps

/// Stop/move inside a station buffer becomes Stopover/Passing, outside
/// Suspension/Running.
inline MovementRecord categorize(MovementRecord rec, const StationIndex& stations) {
    if (!rec.motion) {
        throw std::invalid_argument("categorize: record has no stop/move tag");
    }
    const bool inside = stations.containing(rec.position()).has_value();
    const bool stop = *rec.motion == Motion::Stop;
    rec.category = inside ? (stop ? Category::Stopover : Category::Passing)
                          : (stop ? Category::Suspension : Category::Running);
    return rec;
}

inline MovementRecord categorize(MovementRecord rec, std::span<const StationBuffer> stations) {
    return categorize(std::move(rec), StationIndex({stations.begin(), stations.end()}));
}

inline constexpr double kStreetMaxM = 20.0;

inline MovementRecord annotate_street(MovementRecord rec, const ingest::GeoDB& geo, double max_m = kStreetMaxM) {
    const std::string* best = nullptr;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& s : geo.streets) {
        const double d = point_polyline_distance_m(rec.position(), s.polyline);
        if (d > max_m) {
            continue;
        }
        if (!best || d < best_d - 1e-9) {
            best = &s.name;
            best_d = d;
        } else if (std::abs(d - best_d) <= 1e-9 && s.name < *best) {
            best = &s.name;
            best_d = std::min(best_d, d);
        }
    }
    rec.street_name.reset();
    if (best) {
        rec.street_name = *best;
    }
    return rec;
}

/// Route a trip's records belong to, resolved through the schedule first.
inline std::optional<std::string> route_of(const FeedTuple& t, const ingest::ScheduleDB& sched) {
    if (t.trip_id_tta) {
        if (const auto* st = sched.find_trip(std::to_string(*t.trip_id_tta))) {
            return st->route_id;
        }
    }
    if (t.route_nickname && !t.route_nickname->empty()) {
        return *t.route_nickname;
    }
    if (t.route_id_vlr) {
        return std::to_string(*t.route_id_vlr);
    }
    return std::nullopt;
}

/// Direction by the ⌊n/2⌋ reference record, then station ids for Stopover
/// and Passing records from the stations serving (route, direction).
inline void identify_station(std::span<MovementRecord> records, const ingest::ScheduleDB& sched,
                             const StationIndex& stations) {
    const std::size_t n = records.size();
    if (n < 2) {
        return;
    }
    const std::size_t mid = n / 2;
    const auto route = route_of(records.front().base, sched);
    std::array<std::optional<std::set<std::string>>, 2> allowed;
    for (int d = 0; d < 2; ++d) {
        if (!route) {
            continue;
        }
        auto it = sched.station_order.find({*route, static_cast<Direction>(d)});
        if (it != sched.station_order.end()) {
            allowed[static_cast<std::size_t>(d)] = std::set<std::string>(it->second.begin(), it->second.end());
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        auto& r = records[i];
        r.direction = i < mid ? Direction::Outbound : Direction::Return;
        r.station_id.reset();
        if (r.category != Category::Stopover && r.category != Category::Passing) {
            continue;
        }
        const auto& subset = allowed[static_cast<std::size_t>(*r.direction)];
        if (auto hit = stations.containing(r.position(), subset ? &*subset : nullptr)) {
            r.station_id = stations.buffers()[hit->first].station_id;
        }
    }
}

inline void identify_station(std::span<MovementRecord> records, const ingest::ScheduleDB& sched) {
    identify_station(records, sched, StationIndex(station_buffers(sched)));
}

/// Intersections behind a grid index.
class IntersectionIndex {
public:
    IntersectionIndex() = default;

    explicit IntersectionIndex(const ingest::GeoDB& geo, double radius_m = 30.0) : radius_(radius_m) {
        std::vector<GeoPoint> pts;
        for (const auto& i : geo.intersections) {
            ids_.push_back(i.id);
            pts.push_back(i.position);
        }
        grid_ = GridIndex(pts, 30.0);
    }

    std::optional<std::string> nearest(const GeoPoint& p) const {
        if (ids_.empty()) {
            return std::nullopt;
        }
        auto hit = grid_.nearest_within(p, radius_);
        if (!hit) {
            return std::nullopt;
        }
        return ids_[hit->first];
    }

private:
    std::vector<std::string> ids_;
    GridIndex grid_;
    double radius_ = 30.0;
};

inline MovementRecord identify_intersection(MovementRecord rec, const IntersectionIndex& index) {
    rec.intersection_id = index.nearest(rec.position());
    return rec;
}

inline MovementRecord identify_intersection(MovementRecord rec, const ingest::GeoDB& geo) {
    return identify_intersection(std::move(rec), IntersectionIndex(geo));
}

/// (arrival, departure) of one stopover run: its first and last timestamps.
inline std::pair<Timestamp, Timestamp> arrival_departure(std::span<const MovementRecord> run) {
    if (run.empty()) {
        throw std::invalid_argument("arrival_departure: empty stopover run");
    }
    for (const auto& r : run) {
        if (r.station_id != run.front().station_id) {
            throw std::invalid_argument("arrival_departure: run spans several stations");
        }
    }
    return {run.front().timestamp(), run.back().timestamp()};
}

/// Stamps arrival/departure on every record of each consecutive Stopover run
/// sharing a station id.
inline void annotate_arrivals(std::span<MovementRecord> records) {
    std::size_t i = 0;
    while (i < records.size()) {
        const auto& r = records[i];
        if (r.category != Category::Stopover || !r.station_id) {
            ++i;
            continue;
        }
        std::size_t j = i + 1;
        while (j < records.size() && records[j].category == Category::Stopover &&
               records[j].station_id == r.station_id) {
            ++j;
        }
        auto [arr, dep] = arrival_departure(records.subspan(i, j - i));
        for (std::size_t k = i; k < j; ++k) {
            records[k].arrival_time = arr;
            records[k].departure_time = dep;
        }
        i = j;
    }
}

inline void tag_origin_destination(std::span<MovementRecord> records) {
    const std::size_t n = records.size();
    for (std::size_t i = 0; i < n; ++i) {
        records[i].sequence_index = static_cast<std::int64_t>(i);
        records[i].trip_role = i == 0 ? TripRole::Origin : (i + 1 == n ? TripRole::Destination : TripRole::Intermediate);
    }
}

struct ContextIndexes {
    StationIndex stations;
    IntersectionIndex intersections;
};

/// Runs all six steps over one trip's records (sorted in place by time).
inline void contextualize_trip(std::vector<MovementRecord>& records, const ingest::ScheduleDB& sched,
                               const ingest::GeoDB& geo, const ContextIndexes& idx, double street_max_m = kStreetMaxM) {
    std::stable_sort(records.begin(), records.end(),
                     [](const MovementRecord& a, const MovementRecord& b) { return a.timestamp() < b.timestamp(); });
    for (auto& r : records) {
        r = categorize(std::move(r), idx.stations);
        r = annotate_street(std::move(r), geo, street_max_m);
    }
    identify_station(records, sched, idx.stations);
    for (auto& r : records) {
        r = identify_intersection(std::move(r), idx.intersections);
    }
    annotate_arrivals(records);
    tag_origin_destination(records);
}

// ---------------------------------------------------------------------------
// DBSCAN

inline constexpr std::int64_t kNoise = -1;

struct DbscanLabels {
    /// Cluster number per point, kNoise for noise. Clusters are numbered in
    /// order of their first core point in input order.
    std::vector<std::int64_t> labels;
    std::vector<bool> core;
    std::size_t clusters = 0;
};

/// DBSCAN with haversine distance. A point is core when at least `min_pts`
/// points (itself included) lie within `eps_m`, inclusive.
template <class Position = GeoPoint>
DbscanLabels dbscan_labels(std::span<const Position> points, double eps_m, std::size_t min_pts) {
    std::vector<GeoPoint> pts(points.begin(), points.end());
    DbscanLabels out;
    out.labels.assign(pts.size(), kNoise);
    out.core.assign(pts.size(), false);
    if (pts.empty()) {
        return out;
    }
    GridIndex grid(pts, std::max(eps_m, 1.0) * 2.0);
    std::vector<std::vector<std::size_t>> neighbors(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        for (const auto& hit : grid.within(pts[i], eps_m)) {
            neighbors[i].push_back(hit.first);
        }
        out.core[i] = neighbors[i].size() >= min_pts;
    }
    std::deque<std::size_t> frontier;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (!out.core[i] || out.labels[i] != kNoise) {
            continue;
        }
        const auto id = static_cast<std::int64_t>(out.clusters++);
        out.labels[i] = id;
        frontier.push_back(i);
        while (!frontier.empty()) {
            const std::size_t p = frontier.front();
            frontier.pop_front();
            for (std::size_t q : neighbors[p]) {
                if (out.labels[q] != kNoise) {
                    continue;
                }
                out.labels[q] = id;
                if (out.core[q]) {
                    frontier.push_back(q);
                }
            }
        }
    }
    return out;
}

struct SpatialCluster {
    std::int64_t cluster_id = 0;
    std::vector<MovementRecord> members;
    GeoPoint centroid;
    std::optional<std::pair<std::string, double>> nearest_station;
};

struct DbscanResult {
    std::vector<SpatialCluster> clusters;
    std::vector<MovementRecord> noise;
};

inline GeoPoint centroid_of(std::span<const MovementRecord> members) {
    double lat = 0.0;
    double lng = 0.0;
    for (const auto& m : members) {
        lat += m.base.lat;
        lng += m.base.lng;
    }
    const auto n = static_cast<double>(members.size());
    return {lat / n, lng / n};
}

inline DbscanResult dbscan(std::span<const MovementRecord> records, double eps_m = 15.0, std::size_t min_pts = 8,
                           std::int64_t first_id = 0) {
    std::vector<GeoPoint> pts;
    pts.reserve(records.size());
    for (const auto& r : records) {
        pts.push_back(r.position());
    }
    const auto labels = dbscan_labels<GeoPoint>(pts, eps_m, min_pts);
    DbscanResult out;
    out.clusters.resize(labels.clusters);
    for (std::size_t c = 0; c < labels.clusters; ++c) {
        out.clusters[c].cluster_id = first_id + static_cast<std::int64_t>(c);
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (labels.labels[i] == kNoise) {
            out.noise.push_back(records[i]);
        } else {
            out.clusters[static_cast<std::size_t>(labels.labels[i])].members.push_back(records[i]);
        }
    }
    for (auto& c : out.clusters) {
        c.centroid = centroid_of(c.members);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Feedback

struct FogFeedbackConfig {
    double station_radius_m = 30.0;
    std::vector<GeoPoint> depot;
};

inline std::string describe(const SpatialCluster& c) {
    return "cluster " + std::to_string(c.cluster_id) + " of " + std::to_string(c.members.size()) + " stops at " +
           tritide::detail::format_double(c.centroid.lat) + "," + tritide::detail::format_double(c.centroid.lng);
}

/// One message per cluster: ServiceInterruption when centered in the depot,
/// otherwise CongestionCluster naming the nearest station within range.
inline std::vector<Feedback> fog_feedback(std::vector<SpatialCluster>& clusters, const StationIndex& stations,
                                          const FogFeedbackConfig& cfg, Timestamp emitted_at) {
    std::vector<Feedback> out;
    for (auto& c : clusters) {
        c.nearest_station = stations.nearest(c.centroid, cfg.station_radius_m);
        Timestamp observed = emitted_at;
        for (const auto& m : c.members) {
            observed = std::min(observed, m.timestamp());
        }
        if (cfg.depot.size() >= 3 && polygon_contains(cfg.depot, c.centroid)) {
            out.push_back(make_feedback(Layer::Fog, LatencyClass::NearRealTime, FeedbackKind::ServiceInterruption,
                                        "depot", describe(c) + " inside the depot zone", emitted_at, observed));
            continue;
        }
        const std::string subject =
            c.nearest_station ? c.nearest_station->first : "cluster-" + std::to_string(c.cluster_id);
        out.push_back(make_feedback(Layer::Fog, LatencyClass::NearRealTime, FeedbackKind::CongestionCluster, subject,
                                    describe(c), emitted_at, observed));
    }
    return out;
}

inline std::vector<Feedback> fog_feedback(std::vector<SpatialCluster>& clusters,
                                          const std::vector<StationBuffer>& stations, const FogFeedbackConfig& cfg,
                                          Timestamp emitted_at) {
    return fog_feedback(clusters, StationIndex(stations), cfg, emitted_at);
}

// ---------------------------------------------------------------------------
// Wire formats

inline constexpr std::array<std::string_view, 11> kCloudColumns = {
    "trip_id",     "lat",          "lng",         "gps_timestamp", "street_name", "direction",
    "stop_id",     "movement_sequence", "arrival_time", "target_class", "cluster_id"};

/// Fog -> cloud record: the attributes the predictor uses plus the cluster.
/// trip_id is the schedule trip id.
struct CloudRecord {
    std::optional<std::int64_t> trip_id;
    double lat = 0.0;
    double lng = 0.0;
    Timestamp gps_timestamp{};
    std::optional<std::string> street_name;
    std::optional<Direction> direction;
    std::optional<std::string> stop_id;
    std::optional<std::int64_t> movement_sequence;
    std::optional<Timestamp> arrival_time;
    std::optional<std::string> target_class;
    std::int64_t cluster_id = 0;

    friend bool operator==(const CloudRecord&, const CloudRecord&) = default;
};

inline CloudRecord to_cloud_record(const MovementRecord& r, std::int64_t cluster_id) {
    CloudRecord c;
    c.trip_id = r.base.trip_id_tta;
    c.lat = r.base.lat;
    c.lng = r.base.lng;
    c.gps_timestamp = r.timestamp();
    c.street_name = r.street_name;
    c.direction = r.direction;
    c.stop_id = r.station_id;
    c.movement_sequence = r.sequence_index;
    c.arrival_time = r.arrival_time;
    c.cluster_id = cluster_id;
    return c;
}

inline std::string serialize_cloud_record(const CloudRecord& c) {
    using tritide::detail::format_double;
    using tritide::detail::int_text;
    using tritide::detail::text_text;
    const std::array<std::string, 11> f = {
        int_text(c.trip_id),
        format_double(c.lat),
        format_double(c.lng),
        format_timestamp(c.gps_timestamp),
        text_text(c.street_name),
        c.direction ? std::string(to_string(*c.direction)) : std::string(kMissing),
        text_text(c.stop_id),
        int_text(c.movement_sequence),
        c.arrival_time ? format_timestamp(*c.arrival_time) : std::string(kMissing),
        text_text(c.target_class),
        std::to_string(c.cluster_id)};
    return csv::join(f);
}

inline std::optional<CloudRecord> parse_cloud_record(const std::vector<std::string>& f) {
    if (f.size() != kCloudColumns.size()) {
        return std::nullopt;
    }
    CloudRecord c;
    auto lat = parse_latitude(f[1]);
    auto lng = parse_longitude(f[2]);
    auto ts = parse_timestamp(f[3]);
    auto cid = tritide::detail::parse_int_field(f[10]);
    if (!lat || !lng || !ts || !cid) {
        return std::nullopt;
    }
    c.trip_id = tritide::detail::parse_int_field(f[0]);
    c.lat = *lat;
    c.lng = *lng;
    c.gps_timestamp = *ts;
    c.street_name = tritide::detail::parse_text_field(f[4]);
    c.direction = parse_direction(f[5]);
    c.stop_id = tritide::detail::parse_text_field(f[6]);
    c.movement_sequence = tritide::detail::parse_int_field(f[7]);
    if (f[8] != kMissing) {
        c.arrival_time = parse_timestamp(f[8]);
    }
    c.target_class = tritide::detail::parse_text_field(f[9]);
    c.cluster_id = *cid;
    return c;
}

inline std::string serialize_cloud_batch(std::span<const CloudRecord> records) {
    std::string out;
    for (const auto& r : records) {
        out += serialize_cloud_record(r);
        out += '\n';
    }
    return out;
}

inline std::vector<CloudRecord> parse_cloud_batch(const std::string& text) {
    std::vector<CloudRecord> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        auto fields = csv::split(line);
        auto rec = fields ? parse_cloud_record(*fields) : std::nullopt;
        if (!rec) {
            throw std::runtime_error("cloud batch: malformed record line");
        }
        out.push_back(std::move(*rec));
    }
    return out;
}

inline constexpr std::array<std::string_view, 11> kContextColumns = {
    "motion",     "distance_from_prev", "category",       "street_name", "direction",  "station_id",
    "intersection_id", "arrival_time",  "departure_time", "sequence_index", "trip_role"};

/// Full contextualized record: 17 feed columns followed by the enrichment.
inline std::string serialize_context_record(const MovementRecord& r) {
    using tritide::detail::int_text;
    using tritide::detail::text_text;
    auto base = to_fields(r.base);
    std::vector<std::string> f(base.begin(), base.end());
    auto opt = [](auto v) { return v ? std::string(to_string(*v)) : std::string(kMissing); };
    f.push_back(opt(r.motion));
    f.push_back(r.distance_from_prev ? tritide::detail::format_double(*r.distance_from_prev) : std::string(kMissing));
    f.push_back(opt(r.category));
    f.push_back(text_text(r.street_name));
    f.push_back(opt(r.direction));
    f.push_back(text_text(r.station_id));
    f.push_back(text_text(r.intersection_id));
    f.push_back(r.arrival_time ? format_timestamp(*r.arrival_time) : std::string(kMissing));
    f.push_back(r.departure_time ? format_timestamp(*r.departure_time) : std::string(kMissing));
    f.push_back(int_text(r.sequence_index));
    f.push_back(opt(r.trip_role));
    return csv::join(f);
}

inline std::string context_header() {
    std::vector<std::string_view> cols(kFeedColumns.begin(), kFeedColumns.end());
    cols.insert(cols.end(), kContextColumns.begin(), kContextColumns.end());
    return csv::join(cols);
}

// ---------------------------------------------------------------------------
// Fog node

struct FogConfig {
    Seconds batch_period{6 * 3600};
    double station_radius_m = 30.0;
    double street_max_m = kStreetMaxM;
    double intersection_radius_m = 30.0;
    double eps_m = 15.0;
    std::size_t min_pts = 8;
    std::vector<GeoPoint> depot;
    Seconds utc_offset{0};
    /// Date-partitioned append-only store; empty disables persistence.
    std::filesystem::path store_dir;
};

struct FogEmission {
    Timestamp at{};
    std::size_t contextualized = 0;
    std::vector<SpatialCluster> clusters;
    std::vector<Feedback> feedback;
    std::vector<CloudRecord> forwarded;
};

struct FogTotals {
    std::size_t tuples_in = 0;
    std::size_t contextualized = 0;
    std::size_t purged = 0;
    std::size_t tuples_out = 0;
    std::size_t bytes_in = 0;
    std::size_t bytes_out = 0;
    std::size_t batches = 0;
};

class FogNode {
public:
    FogNode(FogConfig cfg, const ingest::ScheduleDB& sched, const ingest::GeoDB& geo)
        : cfg_(std::move(cfg)), sched_(&sched), geo_(&geo),
          idx_{StationIndex(station_buffers(sched, cfg_.station_radius_m)),
               IntersectionIndex(geo, cfg_.intersection_radius_m)} {}

    const FogConfig& config() const { return cfg_; }
    const FogTotals& totals() const { return totals_; }
    const std::vector<SpatialCluster>& clusters() const { return all_clusters_; }
    const StationIndex& stations() const { return idx_.stations; }

    void receive(const edge::EdgeBatch& batch, std::size_t wire_bytes = 0) {
        totals_.tuples_in += batch.records.size();
        totals_.bytes_in += wire_bytes;
        for (const auto& r : batch.records) {
            buffers_[r.base.trip_id_br.value_or(0)].records.push_back(r);
        }
        for (const auto& a : batch.aggregates) {
            buffers_[a.trip_id].complete = true;
        }
        for (std::int64_t trip : batch.cleaning.trips_deleted_for_missing) {
            auto it = buffers_.find(trip);
            if (it != buffers_.end()) {
                totals_.purged += it->second.records.size();
                buffers_.erase(it);
            }
        }
    }

    /// Contextualizes every completed trip (all trips when `final`), clusters
    /// the stops and returns what goes to the cloud.
    FogEmission flush(Timestamp now, bool final = false) {
        FogEmission em;
        em.at = now;
        ++totals_.batches;
        std::vector<MovementRecord> done;
        for (auto it = buffers_.begin(); it != buffers_.end();) {
            if (!it->second.complete && !final) {
                ++it;
                continue;
            }
            auto& recs = it->second.records;
            if (!recs.empty()) {
                contextualize_trip(recs, *sched_, *geo_, idx_, cfg_.street_max_m);
                done.insert(done.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
            }
            it = buffers_.erase(it);
        }
        em.contextualized = done.size();
        totals_.contextualized += done.size();
        persist(done);

        std::vector<MovementRecord> stops;
        for (const auto& r : done) {
            if (r.motion == Motion::Stop) {
                stops.push_back(r);
            }
        }
        auto result = dbscan(stops, cfg_.eps_m, cfg_.min_pts, next_cluster_id_);
        next_cluster_id_ += static_cast<std::int64_t>(result.clusters.size());
        em.feedback = fog_feedback(result.clusters, idx_.stations, {cfg_.station_radius_m, cfg_.depot}, now);
        for (const auto& c : result.clusters) {
            for (const auto& m : c.members) {
                em.forwarded.push_back(to_cloud_record(m, c.cluster_id));
            }
        }
        std::stable_sort(em.forwarded.begin(), em.forwarded.end(), [](const CloudRecord& a, const CloudRecord& b) {
            return a.gps_timestamp < b.gps_timestamp;
        });
        em.clusters = std::move(result.clusters);
        for (const auto& c : em.clusters) {
            SpatialCluster summary;
            summary.cluster_id = c.cluster_id;
            summary.centroid = c.centroid;
            summary.nearest_station = c.nearest_station;
            summary.members.reserve(c.members.size());
            summary.members = c.members;
            all_clusters_.push_back(std::move(summary));
        }
        totals_.tuples_out += em.forwarded.size();
        totals_.bytes_out += serialize_cloud_batch(em.forwarded).size();
        return em;
    }

    std::size_t buffered() const {
        std::size_t n = 0;
        for (const auto& [_, b] : buffers_) {
            n += b.records.size();
        }
        return n;
    }

private:
    void persist(const std::vector<MovementRecord>& records) {
        if (cfg_.store_dir.empty() || records.empty()) {
            return;
        }
        std::filesystem::create_directories(cfg_.store_dir);
        std::map<Date, std::string> by_date;
        for (const auto& r : records) {
            auto& chunk = by_date[local_date(r.timestamp(), cfg_.utc_offset)];
            chunk += serialize_context_record(r);
            chunk += '\n';
        }
        for (const auto& [date, chunk] : by_date) {
            const auto path = cfg_.store_dir / (format_date(date) + ".csv");
            const bool fresh = !std::filesystem::exists(path);
            std::ofstream out(path, std::ios::app | std::ios::binary);
            if (fresh) {
                out << context_header() << '\n';
            }
            out << chunk;
        }
    }

    struct TripBuffer {
        std::vector<MovementRecord> records;
        bool complete = false;
    };

    FogConfig cfg_;
    const ingest::ScheduleDB* sched_;
    const ingest::GeoDB* geo_;
    ContextIndexes idx_;
    std::map<std::int64_t, TripBuffer> buffers_;
    std::vector<SpatialCluster> all_clusters_;
    std::int64_t next_cluster_id_ = 0;
    FogTotals totals_;
};

} // namespace tritide::fog
