#include "support.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace tritide;
namespace fx = tritide::fixtures;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("tritide_ingest_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

fs::path minimal_gtfs(const std::string& name, const std::string& stop_times_extra = "") {
    auto dir = scratch(name);
    write(dir / "stops.txt", "stop_id,stop_name,stop_lat,stop_lon\nA,First,46.0878,-64.7782\nB,Second,46.0878,-64.7700\n");
    write(dir / "routes.txt", "route_id,route_short_name,route_long_name\n51,51,Hildegard\n");
    write(dir / "calendar.txt",
          "service_id,monday,tuesday,wednesday,thursday,friday,saturday,sunday,start_date,end_date\n"
          "WK,1,1,1,1,1,0,0,20170101,20171231\n");
    write(dir / "trips.txt", "route_id,service_id,trip_id,direction_id\n51,WK,T1,0\n");
    write(dir / "stop_times.txt", "trip_id,arrival_time,departure_time,stop_id,stop_sequence\n"
                                  "T1,06:00:00,06:00:30,A,1\nT1,06:10:00,06:10:00,B,2\n" +
                                      stop_times_extra);
    return dir;
}

} // namespace

TEST(Gtfs, MinimalFixtureLoadsScheduledArrivals) {
    auto db = ingest::load_gtfs(minimal_gtfs("minimal"));
    EXPECT_EQ(db.stations.size(), 2u);
    EXPECT_EQ(db.scheduled_arrivals.size(), 2u);
    EXPECT_EQ(db.scheduled_arrival("T1", "B")->seconds, 6 * 3600 + 600);
    ASSERT_EQ(db.scheduled_trips.size(), 1u);
    EXPECT_EQ(db.scheduled_trips[0].start.seconds, 6 * 3600);
    EXPECT_EQ(db.scheduled_trips[0].end.seconds, 6 * 3600 + 600);
    EXPECT_EQ(db.route_names.at("51"), "51 Hildegard");
}

TEST(Gtfs, UnknownStopIsNamedInTheError) {
    auto dir = minimal_gtfs("unknown_stop", "T1,06:20:00,06:20:00,X9,3\n");
    try {
        ingest::load_gtfs(dir);
        FAIL() << "expected a load error";
    } catch (const ingest::LoadError& e) {
        EXPECT_NE(std::string(e.what()).find("X9"), std::string::npos);
    }
}

TEST(Gtfs, MissingFileIsAnError) {
    auto dir = minimal_gtfs("missing_file");
    fs::remove(dir / "calendar.txt");
    EXPECT_THROW(ingest::load_gtfs(dir), ingest::LoadError);
}

TEST(Gtfs, WeekdayFilterCountsSixtySixTrips) {
    ingest::NetworkParams p;
    auto net = ingest::build_synthetic_network(p);
    EXPECT_EQ(net.schedule.trips_on_weekday(0).size(), 66u);
    EXPECT_EQ(net.schedule.trips_on_weekday(6).size(), 23u);
}

TEST(Gtfs, WrittenScheduleLoadsBackUnchanged) {
    auto net = ingest::build_synthetic_network({});
    auto dir = scratch("roundtrip");
    ingest::write_gtfs(dir, net.schedule);
    auto back = ingest::load_gtfs(dir);
    EXPECT_EQ(back.stations.size(), net.schedule.stations.size());
    EXPECT_EQ(back.scheduled_arrivals, net.schedule.scheduled_arrivals);
    EXPECT_EQ(back.trip_stops, net.schedule.trip_stops);
    EXPECT_EQ(back.station_order, net.schedule.station_order);
    ASSERT_EQ(back.scheduled_trips.size(), net.schedule.scheduled_trips.size());
    for (std::size_t i = 0; i < back.scheduled_trips.size(); ++i) {
        EXPECT_EQ(back.scheduled_trips[i].start, net.schedule.scheduled_trips[i].start);
        EXPECT_EQ(back.scheduled_trips[i].block_id, net.schedule.scheduled_trips[i].block_id);
    }
}

TEST(GeoJson, StreetsAndIntersectionsRoundTrip) {
    auto net = ingest::build_synthetic_network({});
    auto back = ingest::parse_geojson(ingest::to_geojson(net.geo));
    ASSERT_EQ(back.streets.size(), net.geo.streets.size());
    ASSERT_EQ(back.intersections.size(), net.geo.intersections.size());
    EXPECT_EQ(back.streets[0].name, net.geo.streets[0].name);
}

// ---------------------------------------------------------------------------
// generator

TEST(Generator, OneCleanTripHasDurationOverPeriodTuples) {
    auto s = fx::make_scenario(1, 1);
    EXPECT_EQ(s.feed.items.size(), 540u);
    ASSERT_EQ(s.feed.truth.trips.size(), 1u);
    EXPECT_EQ(s.feed.truth.trips[0].tuples, 540u);
}

TEST(Generator, CleanTripsStartOnScheduleWithTheExpectedTupleCount) {
    auto s = fx::make_scenario(12, 2);
    std::map<std::int64_t, std::vector<Timestamp>> times;
    for (const auto& it : s.feed.items) {
        const auto& t = std::get<FeedTuple>(it);
        times[*t.trip_id_br].push_back(t.timestamp);
    }
    ASSERT_EQ(times.size(), s.feed.truth.trips.size());
    for (const auto& tt : s.feed.truth.trips) {
        const auto& v = times.at(tt.instance_id);
        EXPECT_EQ(*std::min_element(v.begin(), v.end()), tt.start);
        EXPECT_EQ(v.size(), static_cast<std::size_t>(2700 / 5));
    }
}

TEST(Generator, EveryCleanTripDwellsOnceAtEachStation) {
    auto s = fx::make_scenario(4, 1);
    const auto& order_out = s.net.schedule.station_order.at({"51", Direction::Outbound});
    const auto& order_ret = s.net.schedule.station_order.at({"51", Direction::Return});
    std::map<std::int64_t, std::vector<std::string>> visits;
    for (const auto& d : s.feed.truth.dwells) {
        ASSERT_FALSE(d.congestion);
        ASSERT_GT(d.end_s, d.start_s);
        visits[d.instance_id].push_back(d.station_id);
    }
    std::vector<std::string> expected(order_out);
    expected.insert(expected.end(), order_ret.begin(), order_ret.end());
    ASSERT_EQ(visits.size(), 4u);
    for (const auto& [_, v] : visits) {
        EXPECT_EQ(v, expected);
    }
}

TEST(Generator, MissingTripsLeaveNoTuplesAndAreRecorded) {
    auto net = ingest::build_synthetic_network({});
    ingest::SynthConfig c;
    c.days = 1;
    c.missing_trips = {{0, 6}};
    auto feed = ingest::generate_feed(c, net.schedule, net.geo);
    for (const auto& it : feed.items) {
        EXPECT_NE(std::get<FeedTuple>(it).trip_start->hour(), 6);
    }
    ASSERT_FALSE(feed.truth.missing_trips.empty());
    for (const auto& m : feed.truth.missing_trips) {
        EXPECT_EQ(local_time_of_day(m.scheduled_start).hour(), 6);
    }
}

TEST(Generator, SameSeedGivesByteIdenticalStreams) {
    auto net = ingest::build_synthetic_network({});
    ingest::SynthConfig c;
    c.days = 1;
    c.duplicate_rate = 0.1;
    c.rng_seed = 42;
    auto a = ingest::generate_feed(c, net.schedule, net.geo);
    auto b = ingest::generate_feed(c, net.schedule, net.geo);
    std::ostringstream sa;
    std::ostringstream sb;
    ingest::write_feed_csv(sa, a.items);
    ingest::write_feed_csv(sb, b.items);
    EXPECT_EQ(sa.str(), sb.str());
    EXPECT_EQ(ingest::truth_to_json(a.truth).dump(), ingest::truth_to_json(b.truth).dump());
}

TEST(Generator, DuplicatesAreExactCopiesOfTheirNeighbor) {
    auto net = ingest::build_synthetic_network({});
    ingest::SynthConfig c;
    c.days = 1;
    c.duplicate_rate = 0.1;
    auto feed = ingest::generate_feed(c, net.schedule, net.geo);
    std::size_t copies = 0;
    for (std::size_t i = 1; i < feed.items.size(); ++i) {
        if (ingest::serialize_item(feed.items[i]) == ingest::serialize_item(feed.items[i - 1])) {
            ++copies;
        }
    }
    EXPECT_EQ(copies, feed.truth.duplicates);
    EXPECT_GT(copies, 0u);
}

TEST(Generator, StreamIsTimeOrdered) {
    auto s = fx::make_scenario(20, 1);
    for (std::size_t i = 1; i < s.feed.items.size(); ++i) {
        EXPECT_LE(std::get<FeedTuple>(s.feed.items[i - 1]).timestamp, std::get<FeedTuple>(s.feed.items[i]).timestamp);
    }
}

// ---------------------------------------------------------------------------
// replay

TEST(Replay, ValidRowsComeBackInFileOrder) {
    auto dir = scratch("replay3");
    std::vector<ingest::FeedItem> items;
    for (int i = 0; i < 3; ++i) {
        items.push_back(fx::make_tuple(7, fx::kDay0 + 30 - i * 5, {46.0878, -64.7782}));
    }
    {
        std::ofstream out(dir / "feed.csv", std::ios::binary);
        ingest::write_feed_csv(out, items);
    }
    auto back = ingest::replay_csv(dir / "feed.csv");
    ASSERT_EQ(back.size(), 3u);
    for (int i = 0; i < 3; ++i) {
        EXPECT_EQ(std::get<FeedTuple>(back[static_cast<std::size_t>(i)]), std::get<FeedTuple>(items[static_cast<std::size_t>(i)]));
    }
}

TEST(Replay, ShortRowBecomesAMalformedMarker) {
    auto dir = scratch("replay_short");
    auto f0 = serialize_tuple(fx::make_tuple(7, fx::kDay0, {46.0878, -64.7782}));
    auto fields = to_fields(fx::make_tuple(7, fx::kDay0 + 5, {46.0878, -64.7782}));
    std::vector<std::string> short_row(fields.begin(), fields.end() - 1);
    auto f2 = serialize_tuple(fx::make_tuple(7, fx::kDay0 + 10, {46.0878, -64.7782}));
    write(dir / "feed.csv", feed_header() + "\n" + f0 + "\n" + csv::join(short_row) + "\n" + f2 + "\n");
    auto back = ingest::replay_csv(dir / "feed.csv");
    ASSERT_EQ(back.size(), 3u);
    EXPECT_TRUE(std::holds_alternative<FeedTuple>(back[0]));
    ASSERT_TRUE(std::holds_alternative<ingest::MalformedRecord>(back[1]));
    EXPECT_EQ(std::get<ingest::MalformedRecord>(back[1]).fields.size(), 16u);
    EXPECT_TRUE(std::holds_alternative<FeedTuple>(back[2]));
}

TEST(Replay, EmptyFileIsAnEmptyStream) {
    auto dir = scratch("replay_empty");
    write(dir / "feed.csv", "");
    EXPECT_TRUE(ingest::replay_csv(dir / "feed.csv").empty());
}

TEST(Replay, MissingFileIsAnError) { EXPECT_THROW(ingest::replay_csv("/nonexistent/feed.csv"), ingest::LoadError); }
