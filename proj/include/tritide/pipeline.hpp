#pragma once

// Three-layer topology on a simulated clock: edge nodes per bus, fog nodes
// per region, one cloud node, links with latency and capacity, and the
// feedback bus running back toward the buses.

#include "tritide/cloud.hpp"
#include "tritide/config.hpp"
#include "tritide/edge.hpp"
#include "tritide/fog.hpp"
#include "tritide/ingest.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace tritide::pipeline {

// ---------------------------------------------------------------------------
// Network and feed construction

struct Network {
    ingest::ScheduleDB schedule;
    ingest::GeoDB geo;
    std::vector<GeoPoint> depot;
    bool synthetic = false;
};

inline Network build_network(const RunConfig& cfg) {
    Network net;
    if (cfg.network.source == NetworkSource::Synthetic) {
        auto syn = ingest::build_synthetic_network(cfg.network.params);
        net.schedule = std::move(syn.schedule);
        net.geo = std::move(syn.geo);
        net.depot = std::move(syn.depot);
        net.synthetic = true;
    } else {
        net.schedule = ingest::load_gtfs(cfg.network.gtfs_dir);
        net.geo = ingest::load_geojson(cfg.network.geojson);
    }
    if (!cfg.network.depot.empty()) {
        net.depot = cfg.network.depot;
    }
    return net;
}

/// Synth settings with congestion points resolved against the network.
inline ingest::SynthConfig resolve_synth(const RunConfig& cfg, const Network& net) {
    ingest::SynthConfig s = cfg.synth;
    for (const auto& c : cfg.congestion) {
        GeoPoint p;
        if (c.station) {
            auto it = net.schedule.stations.find(*c.station);
            if (it == net.schedule.stations.end()) {
                throw ConfigError("synth.congestion", "unknown station '" + *c.station + "'");
            }
            p = it->second.position;
        } else {
            p = *c.point;
        }
        s.congestion.push_back({p, c.extra_dwell_s});
    }
    return s;
}

inline ingest::SyntheticFeed synthesize(const RunConfig& cfg, const Network& net) {
    return ingest::generate_feed(resolve_synth(cfg, net), net.schedule, net.geo);
}

// ---------------------------------------------------------------------------
// Topology

/// Simulated time in milliseconds since the epoch.
using SimMs = std::int64_t;

inline SimMs to_ms(Timestamp t) { return epoch_seconds(t) * 1000; }
inline Timestamp from_ms(SimMs ms) {
    auto s = ms / 1000;
    if (ms % 1000 != 0 && ms < 0) {
        --s;
    }
    return from_epoch(s);
}

inline std::string format_ms(SimMs ms) {
    const auto rem = ((ms % 1000) + 1000) % 1000;
    auto text = format_timestamp(from_ms(ms));
    if (rem != 0) {
        char buf[8];
        std::snprintf(buf, sizeof buf, ".%03d", static_cast<int>(rem));
        text.insert(text.size() - 1, buf);
    }
    return text;
}

struct EdgeSpec {
    std::string name;
    /// Vehicle ids (as feed text) routed to this edge; empty accepts first-seen vehicles.
    std::string vehicle;
    std::string block_id;
    std::size_t fog = 0;
    bool watch_schedule = true;
};

struct Topology {
    std::vector<EdgeSpec> edges;
    std::size_t fogs = 1;
    LinkConfig edge_fog;
    LinkConfig fog_cloud;
};

/// One edge per bus, edges spread over fog nodes round-robin, one cloud.
/// Synthetic networks know each bus's vehicle id and block.
inline Topology build_topology(const RunConfig& cfg, bool synthetic_vehicles) {
    Topology t;
    t.fogs = static_cast<std::size_t>(cfg.topology.fog_nodes);
    t.edge_fog = cfg.edge_fog;
    t.fog_cloud = cfg.fog_cloud;
    const auto buses = static_cast<std::size_t>(cfg.topology.buses);
    for (std::size_t i = 0; i < buses; ++i) {
        EdgeSpec e;
        e.fog = i % t.fogs;
        if (synthetic_vehicles) {
            e.vehicle = std::to_string(1001 + i);
            e.name = "edge-" + e.vehicle;
            e.block_id = buses > 1 ? "B" + std::to_string(i + 1) : std::string{};
        } else {
            e.name = "edge-" + std::to_string(i + 1);
            e.watch_schedule = buses == 1;
        }
        t.edges.push_back(std::move(e));
    }
    return t;
}

/// Latency model: fixed + per-KB delay, serialized on a link of finite capacity.
class Link {
public:
    Link() = default;
    Link(std::string name, LinkConfig cfg) : name_(std::move(name)), cfg_(cfg) {}

    double latency_ms(std::size_t bytes) const {
        return cfg_.fixed_ms + cfg_.per_kb_ms * static_cast<double>(bytes) / 1024.0;
    }

    /// Delivery time of a message handed to the link at `t`.
    SimMs send(SimMs t, std::size_t bytes) {
        const double tx = static_cast<double>(bytes) / 1024.0 / cfg_.capacity_kb_s * 1000.0;
        const SimMs start = std::max(t, free_at_);
        const auto tx_ms = static_cast<SimMs>(std::llround(tx));
        free_at_ = start + tx_ms;
        const SimMs delivered = start + tx_ms + static_cast<SimMs>(std::llround(latency_ms(bytes)));
        ++messages_;
        bytes_ += bytes;
        transfer_ms_ += delivered - t;
        max_transfer_ms_ = std::max(max_transfer_ms_, delivered - t);
        return delivered;
    }

    SimMs feedback_delay(std::size_t bytes) const { return static_cast<SimMs>(std::llround(latency_ms(bytes))); }

    nlohmann::json stats() const {
        return {{"link", name_},
                {"messages", messages_},
                {"bytes", bytes_},
                {"transfer_ms_total", transfer_ms_},
                {"transfer_ms_max", max_transfer_ms_}};
    }

private:
    std::string name_;
    LinkConfig cfg_;
    SimMs free_at_ = std::numeric_limits<SimMs>::min();
    std::size_t messages_ = 0;
    std::size_t bytes_ = 0;
    SimMs transfer_ms_ = 0;
    SimMs max_transfer_ms_ = 0;
};

// ---------------------------------------------------------------------------
// Run report

struct DeliveredFeedback {
    Feedback feedback;
    std::string node;
    SimMs emitted_ms = 0;
    SimMs delivered_ms = 0;

    double delay_s() const { return static_cast<double>(delivered_ms - to_ms(feedback.observed_at)) / 1000.0; }
};

inline nlohmann::json to_json(const DeliveredFeedback& d) {
    return {{"layer", to_string(d.feedback.layer)},
            {"latency_class", to_string(d.feedback.latency_class)},
            {"kind", to_string(d.feedback.kind)},
            {"subject", d.feedback.subject},
            {"detail", d.feedback.detail},
            {"node", d.node},
            {"observed_at", format_timestamp(d.feedback.observed_at)},
            {"emitted_at", format_ms(d.emitted_ms)},
            {"delivered_at", format_ms(d.delivered_ms)},
            {"delay_s", d.delay_s()}};
}

struct LayerMetrics {
    std::string layer;
    std::size_t nodes = 0;
    std::size_t tuples_in = 0;
    std::size_t tuples_out = 0;
    std::size_t bytes_in = 0;
    std::size_t bytes_out = 0;
    std::map<std::string, std::size_t> feedback_by_class;
    std::size_t feedback = 0;
    double mean_feedback_delay_s = 0.0;
    double min_feedback_delay_s = 0.0;
    double max_feedback_delay_s = 0.0;
};

struct RunReport {
    std::vector<LayerMetrics> layers;
    std::vector<nlohmann::json> links;
    std::vector<DeliveredFeedback> feedback;
    edge::CleaningReport cleaning;
    std::size_t late_tuples = 0;
    std::vector<edge::TripAggregate> trips;
    std::vector<edge::PeriodSummary> summaries;
    std::vector<fog::SpatialCluster> clusters;
    std::vector<std::string> cluster_feedback_kind;
    nlohmann::json fog;
    nlohmann::json cloud;
    std::optional<cloud::Evaluation> evaluation;
    SimMs sim_start_ms = 0;
    SimMs sim_end_ms = 0;

    const LayerMetrics& layer(std::string_view name) const {
        for (const auto& l : layers) {
            if (l.layer == name) {
                return l;
            }
        }
        throw std::out_of_range("no layer " + std::string(name));
    }
};

inline nlohmann::json layer_json(const LayerMetrics& l) {
    return {{"layer", l.layer},
            {"nodes", l.nodes},
            {"tuples_in", l.tuples_in},
            {"tuples_out", l.tuples_out},
            {"bytes_in", l.bytes_in},
            {"bytes_out", l.bytes_out},
            {"feedback", l.feedback},
            {"feedback_by_class", l.feedback_by_class},
            {"mean_feedback_delay_s", l.mean_feedback_delay_s},
            {"min_feedback_delay_s", l.min_feedback_delay_s},
            {"max_feedback_delay_s", l.max_feedback_delay_s}};
}

struct LayerTable {
    std::vector<LayerMetrics> rows;
    /// edge tuples_out >= fog tuples_out (the hop to the cloud never grows).
    bool monotone = true;
};

inline LayerTable layer_metrics(const RunReport& r) {
    LayerTable t;
    t.rows = r.layers;
    if (r.layers.size() == 3) {
        t.monotone = r.layers[0].tuples_out >= r.layers[1].tuples_out &&
                     r.layers[0].tuples_in >= r.layers[0].tuples_out;
    }
    return t;
}

inline nlohmann::json to_json(const RunReport& r) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["sim"] = {{"start", format_ms(r.sim_start_ms)}, {"end", format_ms(r.sim_end_ms)}};
    j["layers"] = nlohmann::json::array();
    for (const auto& l : r.layers) {
        j["layers"].push_back(layer_json(l));
    }
    j["volume_monotone"] = layer_metrics(r).monotone;
    j["links"] = r.links;
    j["cleaning"] = edge::to_json(r.cleaning);
    j["late_tuples"] = r.late_tuples;
    j["trips"] = nlohmann::json::array();
    for (const auto& t : r.trips) {
        j["trips"].push_back(edge::to_json(t));
    }
    j["summaries"] = nlohmann::json::array();
    for (const auto& s : r.summaries) {
        j["summaries"].push_back(edge::to_json(s));
    }
    j["clusters"] = nlohmann::json::array();
    for (std::size_t i = 0; i < r.clusters.size(); ++i) {
        const auto& c = r.clusters[i];
        nlohmann::json cj{{"cluster_id", c.cluster_id},
                          {"lat", c.centroid.lat},
                          {"lng", c.centroid.lng},
                          {"size", c.members.size()},
                          {"feedback", i < r.cluster_feedback_kind.size() ? r.cluster_feedback_kind[i] : ""}};
        if (c.nearest_station) {
            cj["nearest_station"] = c.nearest_station->first;
            cj["station_distance_m"] = c.nearest_station->second;
        } else {
            cj["nearest_station"] = nullptr;
            cj["station_distance_m"] = nullptr;
        }
        j["clusters"].push_back(std::move(cj));
    }
    j["fog"] = r.fog;
    j["cloud"] = r.cloud;
    nlohmann::json ev = nullptr;
    if (r.evaluation) {
        ev = nlohmann::json::object();
        ev["examples"] = r.evaluation->examples;
        ev["note"] = r.evaluation->note;
        if (r.evaluation->cv) {
            ev["cv"] = {{"fold_accuracies", r.evaluation->cv->fold_accuracies},
                        {"fold_sizes", r.evaluation->cv->fold_sizes},
                        {"mean", r.evaluation->cv->mean},
                        {"stddev", r.evaluation->cv->stddev}};
        }
        ev["learning_curve"] = nlohmann::json::array();
        for (const auto& p : r.evaluation->curve) {
            ev["learning_curve"].push_back(
                {{"fraction", p.fraction}, {"train_size", p.train_size}, {"mean_accuracy", p.mean_accuracy}});
        }
    }
    j["evaluation"] = ev;
    std::map<std::string, std::size_t> kinds;
    for (const auto& f : r.feedback) {
        ++kinds[std::string(to_string(f.feedback.kind))];
    }
    j["feedback"] = {{"count", r.feedback.size()}, {"by_kind", kinds}};
    return j;
}

inline std::string feedback_jsonl(const RunReport& r) {
    std::string out;
    for (const auto& f : r.feedback) {
        out += to_json(f).dump();
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Plot-ready tables rendered from a run document

inline const std::array<std::string_view, 5> kReportViews = {"trips", "clusters", "accuracy", "layers", "summaries"};

inline std::string render_table(const nlohmann::json& run, std::string_view what) {
    using tritide::detail::format_double;
    std::ostringstream out;
    auto num = [](const nlohmann::json& v) {
        if (v.is_null()) {
            return std::string{};
        }
        if (v.is_number_float()) {
            return format_double(v.get<double>());
        }
        if (v.is_string()) {
            return v.get<std::string>();
        }
        return v.dump();
    };
    auto row = [&](std::initializer_list<std::string> fields) { out << csv::join(std::vector<std::string>(fields)) << '\n'; };
    if (what == "trips") {
        row({"trip_id", "schedule_trip_id", "date", "start_time", "total_move", "total_stop", "total_time_length"});
        for (const auto& t : run.at("trips")) {
            row({num(t["trip_id"]), num(t["schedule_trip_id"]), num(t["date"]), num(t["start_time"]),
                 num(t["total_move"]), num(t["total_stop"]), num(t["total_time_length"])});
        }
    } else if (what == "clusters") {
        row({"cluster_id", "lat", "lng", "size", "nearest_station", "station_distance_m", "feedback"});
        for (const auto& c : run.at("clusters")) {
            row({num(c["cluster_id"]), num(c["lat"]), num(c["lng"]), num(c["size"]), num(c["nearest_station"]),
                 num(c["station_distance_m"]), num(c["feedback"])});
        }
    } else if (what == "accuracy") {
        row({"series", "x", "train_size", "accuracy"});
        const auto& ev = run.at("evaluation");
        if (!ev.is_null()) {
            for (const auto& p : ev.at("learning_curve")) {
                row({"learning_curve", num(p["fraction"]), num(p["train_size"]), num(p["mean_accuracy"])});
            }
            if (ev.contains("cv")) {
                const auto& accs = ev["cv"]["fold_accuracies"];
                const auto& sizes = ev["cv"]["fold_sizes"];
                for (std::size_t i = 0; i < accs.size(); ++i) {
                    row({"cv_fold", std::to_string(i), num(sizes[i]), num(accs[i])});
                }
                row({"cv_mean", "", "", num(ev["cv"]["mean"])});
            }
        }
        const auto& cl = run.at("cloud");
        if (cl.contains("online_accuracy")) {
            row({"online", "", num(cl["predictions"]), num(cl["online_accuracy"])});
        }
    } else if (what == "layers") {
        row({"layer", "nodes", "tuples_in", "tuples_out", "bytes_in", "bytes_out", "feedback", "real_time",
             "near_real_time", "periodic", "historical", "mean_feedback_delay_s"});
        for (const auto& l : run.at("layers")) {
            const auto& by = l["feedback_by_class"];
            auto cls = [&](const char* k) { return by.contains(k) ? num(by[k]) : std::string("0"); };
            row({num(l["layer"]), num(l["nodes"]), num(l["tuples_in"]), num(l["tuples_out"]), num(l["bytes_in"]),
                 num(l["bytes_out"]), num(l["feedback"]), cls("real_time"), cls("near_real_time"), cls("periodic"),
                 cls("historical"), num(l["mean_feedback_delay_s"])});
        }
    } else if (what == "summaries") {
        row({"date", "period", "avg_trip_time", "avg_moves", "avg_stops", "trip_count"});
        for (const auto& s : run.at("summaries")) {
            row({num(s["date"]), num(s["period"]), num(s["avg_trip_time"]), num(s["avg_moves"]),
                 num(s["avg_stops"]), num(s["trip_count"])});
        }
    } else {
        throw std::invalid_argument("unknown report view '" + std::string(what) + "'");
    }
    return out.str();
}

/// run.json, feedback.jsonl and one CSV per report view.
inline void write_run(const std::filesystem::path& dir, const RunReport& r) {
    std::filesystem::create_directories(dir);
    const auto doc = to_json(r);
    {
        std::ofstream out(dir / "run.json", std::ios::binary);
        out << doc.dump(2) << '\n';
    }
    {
        std::ofstream out(dir / "feedback.jsonl", std::ios::binary);
        out << feedback_jsonl(r);
    }
    for (auto view : kReportViews) {
        std::ofstream out(dir / (std::string(view) + ".csv"), std::ios::binary);
        out << render_table(doc, view);
    }
}

// ---------------------------------------------------------------------------
// Simulation

struct SimOptions {
    /// Fog persistence root; one subdirectory per fog node. Empty disables it.
    std::filesystem::path store_dir;
};

class Simulation {
public:
    using Source = std::function<std::optional<ingest::FeedItem>()>;

    Simulation(RunConfig cfg, const Network& net, SimOptions opts = {})
        : cfg_(std::move(cfg)), net_(&net), topo_(build_topology(cfg_, net.synthetic)) {
        for (const auto& e : topo_.edges) {
            edge::EdgeConfig ec = cfg_.edge;
            ec.anomalies.block_id = e.block_id;
            if (ec.anomalies.routes.empty() && net.synthetic) {
                ec.anomalies.routes = {cfg_.synth.route_id};
            }
            if (ec.cleaning.route_names.empty()) {
                for (const auto& [_, name] : net.schedule.route_names) {
                    ec.cleaning.route_names.push_back(name);
                }
            }
            edges_.emplace_back(e.name, ec, &net.schedule, e.watch_schedule);
            edge_links_.emplace_back(e.name + "->fog-" + std::to_string(e.fog + 1), cfg_.edge_fog);
            if (!e.vehicle.empty()) {
                vehicle_edge_[e.vehicle] = edges_.size() - 1;
            }
        }
        for (std::size_t f = 0; f < topo_.fogs; ++f) {
            fog::FogConfig fc = cfg_.fog;
            fc.depot = net.depot;
            if (!opts.store_dir.empty()) {
                fc.store_dir = opts.store_dir / ("fog-" + std::to_string(f + 1));
            }
            fogs_.emplace_back(fc, net.schedule, net.geo);
            fog_links_.emplace_back("fog-" + std::to_string(f + 1) + "->cloud", cfg_.fog_cloud);
        }
        cloud_.emplace(cfg_.cloud, net.schedule);
    }

    const Topology& topology() const { return topo_; }
    const std::vector<edge::EdgeNode>& edges() const { return edges_; }
    const std::vector<fog::FogNode>& fogs() const { return fogs_; }
    const cloud::CloudNode& cloud() const { return *cloud_; }

    RunReport run(const std::vector<ingest::FeedItem>& items) {
        std::size_t i = 0;
        return run([&]() -> std::optional<ingest::FeedItem> {
            if (i >= items.size()) {
                return std::nullopt;
            }
            return items[i++];
        });
    }

    RunReport run(const Source& next) {
        const auto off = cfg_.utc_offset;
        std::optional<SimMs> last;
        while (auto item = next()) {
            auto t = edge::EdgeNode::item_time(*item, off);
            SimMs now = t ? to_ms(*t) : last.value_or(0);
            if (last) {
                // arrival order is authoritative; a record stamped in the past
                // still arrives now
                now = std::max(now, *last);
            }
            if (!started_) {
                start(now);
            }
            advance_to(now);
            last = now;
            route(std::move(*item), now);
        }
        if (started_) {
            finish(*last);
        }
        return report();
    }

private:
    struct Event {
        SimMs t;
        std::uint64_t seq;
        std::function<void()> fn;
    };
    struct Later {
        bool operator()(const Event& a, const Event& b) const {
            return a.t != b.t ? a.t > b.t : a.seq > b.seq;
        }
    };

    void schedule(SimMs t, std::function<void()> fn) { queue_.push({t, seq_++, std::move(fn)}); }

    void advance_to(SimMs t) {
        while (!queue_.empty() && queue_.top().t <= t) {
            auto ev = queue_.top();
            queue_.pop();
            clock_ = ev.t;
            ev.fn();
        }
        clock_ = std::max(clock_, t);
    }

    SimMs align_up(SimMs t, Seconds period, Seconds offset) const {
        const SimMs p = period.count() * 1000;
        const SimMs o = offset.count() * 1000;
        SimMs k = (t + o) / p;
        if ((t + o) % p != 0 && t + o < 0) {
            --k;
        }
        SimMs aligned = k * p - o;
        if (aligned < t) {
            aligned += p;
        }
        return aligned;
    }

    void start(SimMs now) {
        started_ = true;
        start_ms_ = now;
        clock_ = now;
        const SimMs window_ms = cfg_.edge.window.count() * 1000;
        schedule(align_up(now + 1, cfg_.edge.window, Seconds{0}), [this, window_ms] { tick(window_ms); });
        schedule(align_up(now + 1, cfg_.fog.batch_period, cfg_.utc_offset), [this] { fog_flush(); });
        schedule(align_up(now + 1, cfg_.cloud.epoch, cfg_.utc_offset), [this] { cloud_epoch(); });
    }

    std::size_t edge_for(const ingest::FeedItem& item) {
        std::string vehicle;
        if (const auto* t = std::get_if<FeedTuple>(&item)) {
            vehicle = tritide::detail::int_text(t->vehicle_id_vlr);
        } else {
            const auto& f = std::get<ingest::MalformedRecord>(item).fields;
            if (f.size() > col::vehicle_id_vlr) {
                vehicle = f[col::vehicle_id_vlr];
            }
        }
        auto it = vehicle_edge_.find(vehicle);
        if (it != vehicle_edge_.end()) {
            return it->second;
        }
        // unknown vehicles claim free edges in order of first appearance
        for (std::size_t i = 0; i < edges_.size(); ++i) {
            if (topo_.edges[i].vehicle.empty() && !claimed_.contains(i)) {
                claimed_.insert(i);
                vehicle_edge_[vehicle] = i;
                return i;
            }
        }
        const std::size_t i = std::hash<std::string>{}(vehicle) % edges_.size();
        vehicle_edge_[vehicle] = i;
        return i;
    }

    void route(ingest::FeedItem item, SimMs now) {
        const std::size_t e = edge_for(item);
        edge_bytes_in_ += ingest::serialize_item(item).size() + 1;
        try {
            if (auto em = edges_[e].push(std::move(item))) {
                ship_edge(e, std::move(*em), now);
            }
        } catch (const std::exception& ex) {
            node_error(Layer::Edge, edges_[e].name(), ex.what(), now);
        }
    }

    void tick(SimMs window_ms) {
        const Timestamp now = from_ms(clock_);
        for (std::size_t e = 0; e < edges_.size(); ++e) {
            try {
                if (auto em = edges_[e].tick(now)) {
                    ship_edge(e, std::move(*em), clock_);
                }
            } catch (const std::exception& ex) {
                node_error(Layer::Edge, edges_[e].name(), ex.what(), clock_);
            }
        }
        if (!ending_) {
            schedule(clock_ + window_ms, [this, window_ms] { tick(window_ms); });
        }
    }

    void ship_edge(std::size_t e, edge::EdgeEmission em, SimMs now) {
        for (auto& fb : em.feedback) {
            deliver(std::move(fb), edges_[e].name(), now, edge_links_[e].feedback_delay(256));
        }
        if (!em.has_payload()) {
            return;
        }
        const std::size_t bytes = edge::serialize_batch(em.batch).size();
        edge_bytes_out_ += bytes;
        edge_tuples_out_ += em.batch.records.size();
        const SimMs at = edge_links_[e].send(now, bytes);
        const std::size_t f = topo_.edges[e].fog;
        ++in_flight_edge_;
        schedule(at, [this, f, bytes, batch = std::move(em.batch)] {
            --in_flight_edge_;
            fogs_[f].receive(batch, bytes);
        });
    }

    void fog_flush() {
        const bool final = ending_ && edges_closed_ && in_flight_edge_ == 0;
        for (std::size_t f = 0; f < fogs_.size(); ++f) {
            const std::string name = "fog-" + std::to_string(f + 1);
            try {
                auto em = fogs_[f].flush(from_ms(clock_), final);
                for (std::size_t i = 0; i < em.clusters.size(); ++i) {
                    clusters_.push_back(em.clusters[i]);
                    cluster_kinds_.push_back(i < em.feedback.size() ? std::string(to_string(em.feedback[i].kind))
                                                                    : std::string{});
                }
                for (auto& fb : em.feedback) {
                    deliver(std::move(fb), name, clock_, max_edge_feedback_delay());
                }
                if (!em.forwarded.empty()) {
                    const std::size_t bytes = fog::serialize_cloud_batch(em.forwarded).size();
                    fog_bytes_out_ += bytes;
                    fog_tuples_out_ += em.forwarded.size();
                    const SimMs at = fog_links_[f].send(clock_, bytes);
                    ++in_flight_fog_;
                    schedule(at, [this, bytes, recs = std::move(em.forwarded)] {
                        --in_flight_fog_;
                        cloud_->receive(recs, bytes);
                    });
                }
            } catch (const std::exception& ex) {
                node_error(Layer::Fog, name, ex.what(), clock_);
            }
        }
        if (final) {
            fogs_done_ = true;
            return;
        }
        schedule(clock_ + cfg_.fog.batch_period.count() * 1000, [this] { fog_flush(); });
    }

    void cloud_epoch() {
        try {
            auto res = cloud_->run_epoch(from_ms(clock_));
            for (auto& fb : res.feedback) {
                deliver(std::move(fb), "cloud", clock_,
                        fog_links_.front().feedback_delay(512) + max_edge_feedback_delay());
            }
        } catch (const std::exception& ex) {
            node_error(Layer::Cloud, "cloud", ex.what(), clock_);
        }
        if (fogs_done_ && in_flight_fog_ == 0 && !cloud_->has_pending()) {
            return;
        }
        schedule(clock_ + cfg_.cloud.epoch.count() * 1000, [this] { cloud_epoch(); });
    }

    SimMs max_edge_feedback_delay() const {
        SimMs d = 0;
        for (const auto& l : edge_links_) {
            d = std::max(d, l.feedback_delay(256));
        }
        return d;
    }

    void deliver(Feedback fb, const std::string& node, SimMs emitted, SimMs delay) {
        DeliveredFeedback d{std::move(fb), node, emitted, emitted + delay};
        feedback_.push_back(std::move(d));
    }

    void node_error(Layer layer, const std::string& node, const std::string& what, SimMs now) {
        const LatencyClass cls = layer == Layer::Edge ? LatencyClass::RealTime
                                 : layer == Layer::Fog ? LatencyClass::NearRealTime
                                                       : LatencyClass::Periodic;
        deliver(make_feedback(layer, cls, FeedbackKind::ServiceInterruption, node, "node error: " + what,
                              from_ms(now), from_ms(now)),
                node, now, 0);
    }

    void finish(SimMs last) {
        const SimMs close_at = align_up(last + 1, cfg_.edge.window, Seconds{0});
        advance_to(close_at);
        ending_ = true;
        for (std::size_t e = 0; e < edges_.size(); ++e) {
            try {
                auto em = edges_[e].close(from_ms(clock_));
                ship_edge(e, std::move(em), clock_);
            } catch (const std::exception& ex) {
                node_error(Layer::Edge, edges_[e].name(), ex.what(), clock_);
            }
        }
        edges_closed_ = true;
        // drain: deliveries, the final fog flush, remaining cloud epochs
        while (!queue_.empty()) {
            auto ev = queue_.top();
            queue_.pop();
            clock_ = std::max(clock_, ev.t);
            ev.fn();
        }
        end_ms_ = clock_;
    }

    RunReport report() const {
        RunReport r;
        r.sim_start_ms = start_ms_;
        r.sim_end_ms = end_ms_;
        r.feedback = feedback_;
        std::stable_sort(r.feedback.begin(), r.feedback.end(), [](const DeliveredFeedback& a, const DeliveredFeedback& b) {
            return a.delivered_ms < b.delivered_ms;
        });

        LayerMetrics le;
        le.layer = "edge";
        le.nodes = edges_.size();
        for (const auto& e : edges_) {
            le.tuples_in += e.totals().tuples_in;
            r.cleaning += e.totals().cleaning;
            r.late_tuples += e.totals().late;
            r.trips.insert(r.trips.end(), e.aggregates().begin(), e.aggregates().end());
            r.summaries.insert(r.summaries.end(), e.summaries().begin(), e.summaries().end());
        }
        le.bytes_in = edge_bytes_in_;
        le.tuples_out = edge_tuples_out_;
        le.bytes_out = edge_bytes_out_;
        LayerMetrics lf;
        lf.layer = "fog";
        lf.nodes = fogs_.size();
        std::size_t purged = 0;
        std::size_t contextualized = 0;
        std::size_t batches = 0;
        for (const auto& f : fogs_) {
            lf.tuples_in += f.totals().tuples_in;
            lf.bytes_in += f.totals().bytes_in;
            purged += f.totals().purged;
            contextualized += f.totals().contextualized;
            batches += f.totals().batches;
        }
        lf.tuples_out = fog_tuples_out_;
        lf.bytes_out = fog_bytes_out_;
        LayerMetrics lc;
        lc.layer = "cloud";
        lc.nodes = 1;
        const auto& ct = cloud_->totals();
        lc.tuples_in = ct.tuples_in;
        lc.bytes_in = ct.bytes_in;
        lc.tuples_out = ct.predictions;
        for (auto* l : {&le, &lf, &lc}) {
            std::vector<double> delays;
            for (const auto& d : r.feedback) {
                if (to_string(d.feedback.layer) == l->layer) {
                    ++l->feedback_by_class[std::string(to_string(d.feedback.latency_class))];
                    delays.push_back(d.delay_s());
                }
            }
            l->feedback = delays.size();
            if (!delays.empty()) {
                l->mean_feedback_delay_s =
                    std::accumulate(delays.begin(), delays.end(), 0.0) / static_cast<double>(delays.size());
                l->min_feedback_delay_s = *std::min_element(delays.begin(), delays.end());
                l->max_feedback_delay_s = *std::max_element(delays.begin(), delays.end());
            }
        }
        r.layers = {le, lf, lc};
        for (const auto& l : edge_links_) {
            r.links.push_back(l.stats());
        }
        for (const auto& l : fog_links_) {
            r.links.push_back(l.stats());
        }
        r.clusters = clusters_;
        r.cluster_feedback_kind = cluster_kinds_;
        r.fog = {{"batches", batches}, {"contextualized", contextualized}, {"purged", purged},
                 {"clusters", clusters_.size()}};
        r.cloud = {{"labeled", ct.labeled},
                   {"unlabeled", ct.unlabeled},
                   {"predictions", ct.predictions},
                   {"epochs", ct.epochs},
                   {"trainings", ct.trainings},
                   {"online_accuracy",
                    ct.predictions ? static_cast<double>(ct.correct) / static_cast<double>(ct.predictions) : 0.0}};
        if (cfg_.cloud.evaluate && !cloud_->history().empty()) {
            r.evaluation = cloud_->evaluate();
        }
        return r;
    }

    RunConfig cfg_;
    const Network* net_;
    Topology topo_;
    std::vector<edge::EdgeNode> edges_;
    std::vector<Link> edge_links_;
    std::vector<fog::FogNode> fogs_;
    std::vector<Link> fog_links_;
    std::optional<cloud::CloudNode> cloud_;
    std::map<std::string, std::size_t> vehicle_edge_;
    std::set<std::size_t> claimed_;

    std::priority_queue<Event, std::vector<Event>, Later> queue_;
    std::uint64_t seq_ = 0;
    SimMs clock_ = 0;
    SimMs start_ms_ = 0;
    SimMs end_ms_ = 0;
    bool started_ = false;
    bool ending_ = false;
    bool edges_closed_ = false;
    bool fogs_done_ = false;
    std::size_t in_flight_edge_ = 0;
    std::size_t in_flight_fog_ = 0;

    std::size_t edge_bytes_in_ = 0;
    std::size_t edge_tuples_out_ = 0;
    std::size_t edge_bytes_out_ = 0;
    std::size_t fog_tuples_out_ = 0;
    std::size_t fog_bytes_out_ = 0;
    std::vector<DeliveredFeedback> feedback_;
    std::vector<fog::SpatialCluster> clusters_;
    std::vector<std::string> cluster_kinds_;
};

/// Builds the network, synthesizes the configured feed and runs it.
inline RunReport run_synthetic(const RunConfig& cfg, SimOptions opts = {}) {
    const Network net = build_network(cfg);
    const auto feed = synthesize(cfg, net);
    Simulation sim(cfg, net, std::move(opts));
    return sim.run(feed.items);
}

} // namespace tritide::pipeline
