#pragma once

// Run configuration: one YAML file with sections topology, network, edge,
// fog, cloud, links and synth. Every key is checked; errors name the path
// of the offending key.

#include "tritide/cloud.hpp"
#include "tritide/edge.hpp"
#include "tritide/fog.hpp"
#include "tritide/ingest.hpp"

#include <yaml-cpp/yaml.h>

#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace tritide {

class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& path, const std::string& what)
        : std::runtime_error(path + ": " + what), path_(path) {}

    const std::string& path() const { return path_; }

private:
    std::string path_;
};

struct LinkConfig {
    double fixed_ms = 20.0;
    double per_kb_ms = 1.0;
    double capacity_kb_s = 250.0;
};

struct TopologyConfig {
    int buses = 1;
    int fog_nodes = 1;
};

enum class NetworkSource { Synthetic, Files };

struct CongestionSpec {
    std::optional<std::string> station;
    std::optional<GeoPoint> point;
    double extra_dwell_s = 0.0;
};

struct NetworkConfig {
    NetworkSource source = NetworkSource::Synthetic;
    std::filesystem::path gtfs_dir;
    std::filesystem::path geojson;
    std::vector<GeoPoint> depot;
    ingest::NetworkParams params;
};

struct RunConfig {
    TopologyConfig topology;
    NetworkConfig network;
    edge::EdgeConfig edge;
    fog::FogConfig fog;
    bool fog_store = true;
    cloud::CloudConfig cloud;
    LinkConfig edge_fog{20.0, 1.0, 250.0};
    LinkConfig fog_cloud{80.0, 0.2, 2000.0};
    ingest::SynthConfig synth;
    std::vector<CongestionSpec> congestion;
    Seconds utc_offset{0};
};

namespace config_detail {

inline std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

inline void expect_map(const YAML::Node& n, const std::string& path) {
    if (!n.IsMap()) {
        throw ConfigError(path.empty() ? "<root>" : path, "expected a mapping");
    }
}

inline void check_keys(const YAML::Node& n, const std::string& path, std::initializer_list<std::string_view> known) {
    expect_map(n, path);
    for (const auto& kv : n) {
        const auto key = kv.first.as<std::string>();
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError(join(path, key), "unknown key");
        }
    }
}

template <class T>
T scalar(const YAML::Node& n, const std::string& path, std::string_view type) {
    if (!n.IsScalar()) {
        throw ConfigError(path, "expected " + std::string(type));
    }
    try {
        return n.as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError(path, "expected " + std::string(type) + ", got '" + n.Scalar() + "'");
    }
}

/// Reads one section, remembering its path for error messages.
class Section {
public:
    Section(YAML::Node node, std::string path) : node_(std::move(node)), path_(std::move(path)) {}

    bool present() const { return node_ && !node_.IsNull(); }
    const std::string& path() const { return path_; }
    std::string at(std::string_view key) const { return join(path_, std::string(key)); }

    void keys(std::initializer_list<std::string_view> known) const {
        if (present()) {
            check_keys(node_, path_, known);
        }
    }

    YAML::Node get(std::string_view key) const {
        if (!present()) {
            return {};
        }
        return node_[std::string(key)];
    }

    Section sub(std::string_view key) const { return {get(key), at(key)}; }

    template <class T>
    void read(std::string_view key, T& out, std::string_view type) const {
        auto n = get(key);
        if (n && !n.IsNull()) {
            out = scalar<T>(n, at(key), type);
        }
    }

    void number(std::string_view key, double& out, std::string_view rule = "") const {
        read(key, out, "a number");
        check(key, out, rule);
    }

    template <class Int>
    void integer(std::string_view key, Int& out, std::string_view rule = "") const {
        long long v = static_cast<long long>(out);
        read(key, v, "an integer");
        check(key, static_cast<double>(v), rule);
        out = static_cast<Int>(v);
    }

    void seconds(std::string_view key, Seconds& out, std::string_view rule = "") const {
        long long v = out.count();
        integer(key, v, rule);
        out = Seconds{v};
    }

    void flag(std::string_view key, bool& out) const { read(key, out, "true or false"); }

    void text(std::string_view key, std::string& out) const { read(key, out, "a string"); }

    void date(std::string_view key, Date& out) const {
        auto n = get(key);
        if (!n || n.IsNull()) {
            return;
        }
        auto d = parse_date(scalar<std::string>(n, at(key), "a date"));
        if (!d) {
            throw ConfigError(at(key), "expected a date YYYY-MM-DD");
        }
        out = *d;
    }

    void check(std::string_view key, double v, std::string_view rule) const {
        if (rule.empty()) {
            return;
        }
        bool ok = true;
        if (rule == "> 0") ok = v > 0.0;
        else if (rule == ">= 0") ok = v >= 0.0;
        else if (rule == ">= 1") ok = v >= 1.0;
        else if (rule == ">= 2") ok = v >= 2.0;
        else if (rule == "in [0, 1]") ok = v >= 0.0 && v <= 1.0;
        else if (rule == "in (0, 1]") ok = v > 0.0 && v <= 1.0;
        else if (rule == "in (0, 1)") ok = v > 0.0 && v < 1.0;
        else if (rule == "> 1") ok = v > 1.0;
        else if (rule == "in [0, 23]") ok = v >= 0.0 && v <= 23.0;
        if (!ok) {
            throw ConfigError(at(key), "must be " + std::string(rule));
        }
    }

private:
    YAML::Node node_;
    std::string path_;
};

inline GeoPoint point(const YAML::Node& n, const std::string& path) {
    if (!n.IsSequence() || n.size() != 2) {
        throw ConfigError(path, "expected [lat, lng]");
    }
    GeoPoint p{scalar<double>(n[0], path + "[0]", "a number"), scalar<double>(n[1], path + "[1]", "a number")};
    if (!p.valid()) {
        throw ConfigError(path, "coordinates out of range");
    }
    return p;
}

inline Seconds utc_offset(const YAML::Node& n, const std::string& path) {
    if (!n || n.IsNull()) {
        return Seconds{0};
    }
    const auto text = scalar<std::string>(n, path, "an offset like +02:00");
    long long secs = 0;
    if (auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), secs);
        ec == std::errc{} && p == text.data() + text.size()) {
        return Seconds{secs};
    }
    if (text.size() == 6 && (text[0] == '+' || text[0] == '-') && text[3] == ':') {
        auto hh = tritide::detail::parse_fixed_int(std::string_view(text).substr(1, 2));
        auto mm = tritide::detail::parse_fixed_int(std::string_view(text).substr(4, 2));
        if (hh && mm && *hh <= 14 && *mm < 60) {
            const long long s = *hh * 3600 + *mm * 60;
            return Seconds{text[0] == '-' ? -s : s};
        }
    }
    throw ConfigError(path, "expected an offset like +02:00 or seconds");
}

inline void read_link(const Section& s, LinkConfig& link) {
    s.keys({"fixed_ms", "per_kb_ms", "capacity_kb_s"});
    s.number("fixed_ms", link.fixed_ms, ">= 0");
    s.number("per_kb_ms", link.per_kb_ms, ">= 0");
    s.number("capacity_kb_s", link.capacity_kb_s, "> 0");
}

template <class F>
void each(const Section& s, std::string_view key, F&& f) {
    auto n = s.get(key);
    if (!n || n.IsNull()) {
        return;
    }
    if (!n.IsSequence()) {
        throw ConfigError(s.at(key), "expected a list");
    }
    for (std::size_t i = 0; i < n.size(); ++i) {
        f(Section(n[i], s.at(key) + "[" + std::to_string(i) + "]"));
    }
}

} // namespace config_detail

/// Parses and validates a configuration document.
inline RunConfig parse_config(const YAML::Node& root) {
    using config_detail::Section;
    RunConfig cfg;
    if (!root || root.IsNull()) {
        return cfg;
    }
    Section top(root, "");
    top.keys({"topology", "network", "edge", "fog", "cloud", "links", "synth"});

    auto topo = top.sub("topology");
    topo.keys({"buses", "fog_nodes", "utc_offset"});
    topo.integer("buses", cfg.topology.buses, ">= 1");
    topo.integer("fog_nodes", cfg.topology.fog_nodes, ">= 1");
    cfg.utc_offset = config_detail::utc_offset(topo.get("utc_offset"), topo.at("utc_offset"));

    auto net = top.sub("network");
    net.keys({"source", "gtfs_dir", "geojson", "depot", "origin", "route_id", "route_name", "stations_per_direction",
              "station_spacing_m", "express_m", "nominal_dwell_s", "start_date", "end_date"});
    {
        std::string source = "synthetic";
        net.text("source", source);
        if (source == "synthetic") {
            cfg.network.source = NetworkSource::Synthetic;
        } else if (source == "files") {
            cfg.network.source = NetworkSource::Files;
        } else {
            throw ConfigError(net.at("source"), "must be 'synthetic' or 'files'");
        }
        std::string gtfs;
        std::string geojson;
        net.text("gtfs_dir", gtfs);
        net.text("geojson", geojson);
        cfg.network.gtfs_dir = gtfs;
        cfg.network.geojson = geojson;
        if (cfg.network.source == NetworkSource::Files && (gtfs.empty() || geojson.empty())) {
            throw ConfigError(net.at(gtfs.empty() ? "gtfs_dir" : "geojson"), "required when source is 'files'");
        }
        if (auto d = net.get("depot"); d && !d.IsNull()) {
            if (!d.IsSequence() || d.size() < 3) {
                throw ConfigError(net.at("depot"), "expected a polygon of at least 3 [lat, lng] points");
            }
            for (std::size_t i = 0; i < d.size(); ++i) {
                cfg.network.depot.push_back(config_detail::point(d[i], net.at("depot") + "[" + std::to_string(i) + "]"));
            }
        }
        auto& p = cfg.network.params;
        if (auto o = net.get("origin"); o && !o.IsNull()) {
            p.origin = config_detail::point(o, net.at("origin"));
        }
        net.text("route_id", p.route_id);
        net.text("route_name", p.route_name);
        net.integer("stations_per_direction", p.stations_per_direction, ">= 2");
        net.number("station_spacing_m", p.station_spacing_m, "> 0");
        net.number("express_m", p.express_m, "> 0");
        net.number("nominal_dwell_s", p.nominal_dwell_s, ">= 0");
        net.date("start_date", p.start_date);
        net.date("end_date", p.end_date);
    }

    auto ed = top.sub("edge");
    ed.keys({"window_s", "stop_threshold_m", "trip_idle_timeout_s", "summary_delay_s", "missing_limit", "rules",
             "anomaly"});
    ed.seconds("window_s", cfg.edge.window, ">= 1");
    ed.number("stop_threshold_m", cfg.edge.stop_threshold_m, "> 0");
    ed.seconds("trip_idle_timeout_s", cfg.edge.trip_idle_timeout, ">= 1");
    ed.seconds("summary_delay_s", cfg.edge.summary_delay, ">= 0");
    ed.integer("missing_limit", cfg.edge.cleaning.missing_limit, ">= 1");
    {
        auto rules = ed.sub("rules");
        rules.keys({"duplicates", "missing_tuples", "short_records", "long_records", "wrong_values"});
        rules.flag("duplicates", cfg.edge.cleaning.duplicates);
        rules.flag("missing_tuples", cfg.edge.cleaning.missing_tuples);
        rules.flag("short_records", cfg.edge.cleaning.short_records);
        rules.flag("long_records", cfg.edge.cleaning.long_records);
        rules.flag("wrong_values", cfg.edge.cleaning.wrong_values);
        auto an = ed.sub("anomaly");
        an.keys({"grace_s", "high_factor", "low_factor"});
        an.seconds("grace_s", cfg.edge.anomalies.grace, ">= 0");
        an.number("high_factor", cfg.edge.anomalies.high_factor, "> 1");
        an.number("low_factor", cfg.edge.anomalies.low_factor, "in (0, 1)");
    }

    auto fg = top.sub("fog");
    fg.keys({"batch_period_s", "station_radius_m", "street_max_m", "intersection_radius_m", "eps_m", "min_pts",
             "store"});
    fg.seconds("batch_period_s", cfg.fog.batch_period, ">= 1");
    fg.number("station_radius_m", cfg.fog.station_radius_m, "> 0");
    fg.number("street_max_m", cfg.fog.street_max_m, "> 0");
    fg.number("intersection_radius_m", cfg.fog.intersection_radius_m, "> 0");
    fg.number("eps_m", cfg.fog.eps_m, "> 0");
    fg.integer("min_pts", cfg.fog.min_pts, ">= 1");
    fg.flag("store", cfg.fog_store);

    auto cl = top.sub("cloud");
    cl.keys({"epoch_s", "n_trees", "features_per_tree", "max_depth", "min_leaf", "seed", "use_trip_id",
             "use_time_features", "threads", "max_train_examples", "evaluate", "cv_folds", "curve_fractions",
             "curve_repeats", "eval_max_examples", "eval_n_trees"});
    {
        auto& c = cfg.cloud;
        cl.seconds("epoch_s", c.epoch, ">= 1");
        cl.integer("n_trees", c.forest.n_trees, ">= 1");
        cl.integer("features_per_tree", c.forest.features_per_tree, ">= 1");
        cl.integer("max_depth", c.forest.max_depth, ">= 1");
        cl.integer("min_leaf", c.forest.min_leaf, ">= 1");
        cl.integer("seed", c.forest.seed, ">= 0");
        cl.flag("use_trip_id", c.forest.use_trip_id);
        cl.flag("use_time_features", c.forest.use_time_features);
        cl.integer("threads", c.forest.threads, ">= 0");
        cl.integer("max_train_examples", c.max_train_examples, ">= 0");
        cl.flag("evaluate", c.evaluate);
        cl.integer("cv_folds", c.cv_folds, ">= 2");
        cl.integer("curve_repeats", c.curve_repeats, ">= 1");
        cl.integer("eval_max_examples", c.eval_max_examples, ">= 0");
        cl.integer("eval_n_trees", c.eval_forest.n_trees, ">= 1");
        if (auto fr = cl.get("curve_fractions"); fr && !fr.IsNull()) {
            if (!fr.IsSequence() || fr.size() == 0) {
                throw ConfigError(cl.at("curve_fractions"), "expected a non-empty list of fractions");
            }
            c.curve_fractions.clear();
            for (std::size_t i = 0; i < fr.size(); ++i) {
                const auto path = cl.at("curve_fractions") + "[" + std::to_string(i) + "]";
                const double f = config_detail::scalar<double>(fr[i], path, "a number");
                if (!(f > 0.0 && f <= 1.0)) {
                    throw ConfigError(path, "must be in (0, 1]");
                }
                c.curve_fractions.push_back(f);
            }
        }
        const auto seed = c.forest.seed;
        const auto threads = c.forest.threads;
        c.eval_forest.features_per_tree = c.forest.features_per_tree;
        c.eval_forest.max_depth = c.forest.max_depth;
        c.eval_forest.min_leaf = c.forest.min_leaf;
        c.eval_forest.seed = seed;
        c.eval_forest.use_trip_id = c.forest.use_trip_id;
        c.eval_forest.use_time_features = c.forest.use_time_features;
        c.eval_forest.threads = threads;
    }

    auto ln = top.sub("links");
    ln.keys({"edge_fog", "fog_cloud"});
    config_detail::read_link(ln.sub("edge_fog"), cfg.edge_fog);
    config_detail::read_link(ln.sub("fog_cloud"), cfg.fog_cloud);

    auto sy = top.sub("synth");
    sy.keys({"seed", "days", "start_date", "route_id", "weekday_trips", "sunday_trips", "trip_duration_s",
             "sample_period_s", "gps_noise_sigma_m", "duplicate_rate", "drop_rate", "corrupt_rate", "missing_trips",
             "congestion", "storm_days", "trip_durations"});
    {
        auto& s = cfg.synth;
        s.route_id = cfg.network.params.route_id;
        s.start_date = cfg.network.params.start_date;
        sy.integer("seed", s.rng_seed, ">= 0");
        sy.integer("days", s.days, ">= 1");
        sy.date("start_date", s.start_date);
        sy.text("route_id", s.route_id);
        sy.integer("weekday_trips", s.weekday_trips, ">= 1");
        sy.integer("sunday_trips", s.sunday_trips, ">= 1");
        sy.number("trip_duration_s", s.trip_duration_s, "> 0");
        sy.integer("sample_period_s", s.sample_period_s, ">= 1");
        sy.number("gps_noise_sigma_m", s.gps_noise_sigma_m, ">= 0");
        sy.number("duplicate_rate", s.duplicate_rate, "in [0, 1]");
        sy.number("drop_rate", s.drop_rate, "in [0, 1]");
        sy.number("corrupt_rate", s.corrupt_rate, "in [0, 1]");
        config_detail::each(sy, "missing_trips", [&](const Section& m) {
            m.keys({"day", "hour"});
            ingest::MissingTripAt at;
            m.integer("day", at.day, ">= 0");
            m.integer("hour", at.hour, "in [0, 23]");
            s.missing_trips.push_back(at);
        });
        config_detail::each(sy, "storm_days", [&](const Section& m) {
            m.keys({"day", "slowdown"});
            ingest::StormDay d;
            m.integer("day", d.day, ">= 0");
            m.number("slowdown", d.slowdown, "> 0");
            s.storm_days.push_back(d);
        });
        config_detail::each(sy, "trip_durations", [&](const Section& m) {
            m.keys({"day", "hour", "duration_s"});
            ingest::TripDurationAt d;
            m.integer("day", d.day, ">= 0");
            m.integer("hour", d.hour, "in [0, 23]");
            m.number("duration_s", d.duration_s, "> 0");
            s.trip_durations.push_back(d);
        });
        config_detail::each(sy, "congestion", [&](const Section& m) {
            m.keys({"station", "at", "extra_dwell_s"});
            CongestionSpec c;
            std::string station;
            m.text("station", station);
            if (!station.empty()) {
                c.station = station;
            }
            if (auto a = m.get("at"); a && !a.IsNull()) {
                c.point = config_detail::point(a, m.at("at"));
            }
            if (!c.station == !c.point) {
                throw ConfigError(m.path(), "give exactly one of 'station' or 'at'");
            }
            m.number("extra_dwell_s", c.extra_dwell_s, "> 0");
            cfg.congestion.push_back(c);
        });
        s.utc_offset = cfg.utc_offset;
        s.buses = cfg.topology.buses;
    }

    // shared settings
    cfg.network.params.buses = cfg.topology.buses;
    cfg.network.params.weekday_trips = cfg.synth.weekday_trips;
    cfg.network.params.sunday_trips = cfg.synth.sunday_trips;
    cfg.network.params.trip_duration_s = cfg.synth.trip_duration_s;
    cfg.network.params.route_id = cfg.synth.route_id;
    cfg.edge.cleaning.parse.utc_offset = cfg.utc_offset;
    cfg.edge.cleaning.sample_period = Seconds{cfg.synth.sample_period_s};
    cfg.edge.anomalies.utc_offset = cfg.utc_offset;
    cfg.edge.anomalies.nominal_duration_s = cfg.synth.trip_duration_s;
    cfg.fog.utc_offset = cfg.utc_offset;
    cfg.cloud.utc_offset = cfg.utc_offset;
    return cfg;
}

inline RunConfig parse_config_text(const std::string& text) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError("<document>", std::string("not valid YAML: ") + e.what());
    }
    return parse_config(root);
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(path.string(), "cannot open");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

} // namespace tritide
