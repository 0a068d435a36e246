#include "tritide/pipeline.hpp"

#include <gtest/gtest.h>

using namespace tritide;
using namespace tritide::pipeline;

namespace {

const std::filesystem::path kConfigs = TRITIDE_CONFIG_DIR;

RunConfig small_config(int buses = 1) {
    auto cfg = parse_config_text("topology:\n  buses: " + std::to_string(buses) +
                                 "\n  utc_offset: \"-03:00\"\nsynth:\n  days: 1\n  seed: 3\ncloud:\n  n_trees: 10\n"
                                 "  evaluate: false\n");
    return cfg;
}

} // namespace

TEST(Topology, OneEdgePerBusSpreadOverFogs) {
    auto cfg = small_config(3);
    cfg.topology.fog_nodes = 2;
    auto t = build_topology(cfg, true);
    ASSERT_EQ(t.edges.size(), 3u);
    EXPECT_EQ(t.fogs, 2u);
    EXPECT_EQ(t.edges[0].fog, 0u);
    EXPECT_EQ(t.edges[1].fog, 1u);
    EXPECT_EQ(t.edges[2].fog, 0u);
    EXPECT_EQ(t.edges[1].vehicle, "1002");
    EXPECT_EQ(t.edges[1].block_id, "B2");
}

TEST(Topology, SingleSyntheticBusWatchesTheWholeSchedule) {
    auto t = build_topology(small_config(1), true);
    ASSERT_EQ(t.edges.size(), 1u);
    EXPECT_TRUE(t.edges[0].block_id.empty());
    EXPECT_TRUE(t.edges[0].watch_schedule);
}

TEST(Link, SerializesMessagesOnItsCapacity) {
    LinkConfig lc;
    lc.capacity_kb_s = 1.0;
    lc.fixed_ms = 10.0;
    lc.per_kb_ms = 0.0;
    Link link("a->b", lc);
    // 1 KB at 1 KB/s takes a second on the wire
    EXPECT_EQ(link.send(0, 1024), 1010);
    // the second message waits for the first to clear
    EXPECT_EQ(link.send(500, 1024), 2010);
    EXPECT_EQ(link.send(5000, 1024), 6010);
}

TEST(Pipeline, LayersShrinkTheStream) {
    auto r = run_synthetic(small_config());
    const auto& e = r.layer("edge");
    const auto& f = r.layer("fog");
    const auto& c = r.layer("cloud");
    EXPECT_GT(e.tuples_in, 0u);
    EXPECT_LE(e.tuples_out, e.tuples_in);
    EXPECT_EQ(f.tuples_in, e.tuples_out);
    EXPECT_LT(f.tuples_out, f.tuples_in);
    EXPECT_EQ(c.tuples_in, f.tuples_out);
    EXPECT_TRUE(layer_metrics(r).monotone);
}

TEST(Pipeline, DuplicatesAreRemovedAtTheEdge) {
    auto cfg = small_config();
    cfg.synth.duplicate_rate = 0.05;
    auto r = run_synthetic(cfg);
    EXPECT_GT(r.cleaning.duplicates_removed, 0u);
    EXPECT_LT(r.layer("edge").tuples_out, r.layer("edge").tuples_in);
    EXPECT_TRUE(r.cleaning.balanced());
}

TEST(Pipeline, CleaningOffPassesEverythingThrough) {
    auto cfg = small_config();
    cfg.synth.duplicate_rate = 0.05;
    auto parse = cfg.edge.cleaning.parse;
    cfg.edge.cleaning = edge::CleaningConfig::all_off();
    cfg.edge.cleaning.parse = parse;
    auto r = run_synthetic(cfg);
    EXPECT_EQ(r.cleaning.duplicates_removed, 0u);
    EXPECT_EQ(r.cleaning.survivors, r.cleaning.received);
}

TEST(Pipeline, ThreeBusesEachGetTheirOwnEdge) {
    auto r = run_synthetic(small_config(3));
    EXPECT_EQ(r.layer("edge").nodes, 3u);
    std::set<std::string> nodes;
    for (const auto& l : r.links) {
        nodes.insert(l.at("link").get<std::string>());
    }
    EXPECT_EQ(nodes.size(), 4u);
    EXPECT_GT(r.trips.size(), 0u);
}

TEST(Pipeline, FeedbackIsCausal) {
    auto cfg = load_config(kConfigs / "good.yaml");
    cfg.synth.missing_trips = {{0, 6}};
    auto r = run_synthetic(cfg);
    ASSERT_FALSE(r.feedback.empty());
    for (const auto& d : r.feedback) {
        EXPECT_GE(d.emitted_ms, to_ms(d.feedback.observed_at));
        EXPECT_GE(d.delivered_ms, d.emitted_ms);
    }
    for (std::size_t i = 1; i < r.feedback.size(); ++i) {
        EXPECT_LE(r.feedback[i - 1].delivered_ms, r.feedback[i].delivered_ms);
    }
}

TEST(Pipeline, MissingHourIsReportedByTheEdge) {
    auto cfg = load_config(kConfigs / "good.yaml");
    cfg.synth.missing_trips = {{0, 6}};
    auto r = run_synthetic(cfg);
    std::size_t missing = 0;
    for (const auto& d : r.feedback) {
        if (d.feedback.kind == FeedbackKind::MissingTrip) {
            EXPECT_EQ(d.feedback.layer, Layer::Edge);
            ++missing;
        }
    }
    EXPECT_EQ(missing, 4u);
}

TEST(Pipeline, RunsAreDeterministic) {
    auto cfg = small_config();
    cfg.synth.duplicate_rate = 0.02;
    cfg.synth.gps_noise_sigma_m = 3.0;
    auto a = to_json(run_synthetic(cfg)).dump();
    auto b = to_json(run_synthetic(cfg)).dump();
    EXPECT_EQ(a, b);
}

TEST(Pipeline, EmptyFeedProducesZeroCounts) {
    auto cfg = small_config();
    const auto net = build_network(cfg);
    Simulation sim(cfg, net);
    auto r = sim.run(std::vector<ingest::FeedItem>{});
    for (const auto& l : r.layers) {
        EXPECT_EQ(l.tuples_in, 0u) << l.layer;
        EXPECT_EQ(l.tuples_out, 0u) << l.layer;
    }
    EXPECT_TRUE(r.feedback.empty());
}

TEST(Pipeline, ReportViewsRenderFromTheRunDocument) {
    auto doc = to_json(run_synthetic(small_config()));
    for (auto view : kReportViews) {
        auto text = render_table(doc, view);
        EXPECT_FALSE(text.empty()) << view;
        EXPECT_EQ(text.back(), '\n') << view;
    }
}
