#pragma once

#include "tritide/feedcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

namespace tritide {

/// Uniform grid over a fixed point set for radius queries in meters.
///
/// Points are projected onto an equirectangular plane whose scale is shrunk
/// slightly (by the cosine of the highest latitude, and a 1% margin) so that
/// projected distance never exceeds great-circle distance at city scale. A
/// radius query visits every cell the projected disc can touch and confirms
/// candidates with haversine_m, so results are exact.
class GridIndex {
public:
    GridIndex() = default;

    GridIndex(std::span<const GeoPoint> points, double cell_m) : points_(points.begin(), points.end()), cell_m_(cell_m) {
        if (!(cell_m > 0.0)) {
            throw std::invalid_argument("grid cell size must be positive");
        }
        double max_abs_lat = 0.0;
        for (const auto& p : points_) {
            max_abs_lat = std::max(max_abs_lat, std::abs(p.lat));
        }
        // keep a sane scale near the poles
        max_abs_lat = std::min(max_abs_lat, 89.0);
        x_scale_ = kShrink * kEarthRadiusM * std::cos(deg2rad(max_abs_lat)) * std::numbers::pi / 180.0;
        y_scale_ = kShrink * kEarthRadiusM * std::numbers::pi / 180.0;
        for (std::size_t i = 0; i < points_.size(); ++i) {
            cells_[key(cell_of(points_[i]))].push_back(i);
        }
    }

    std::size_t size() const { return points_.size(); }
    const GeoPoint& point(std::size_t i) const { return points_[i]; }

    /// Calls f(index, distance_m) for every point within `radius_m` of `q`
    /// (inclusive), in ascending index order.
    template <class F>
    void for_each_within(const GeoPoint& q, double radius_m, F&& f) const {
        auto hits = within(q, radius_m);
        for (const auto& [idx, d] : hits) {
            f(idx, d);
        }
    }

    /// (index, distance) pairs within `radius_m`, sorted by index.
    std::vector<std::pair<std::size_t, double>> within(const GeoPoint& q, double radius_m) const {
        std::vector<std::pair<std::size_t, double>> out;
        if (points_.empty()) {
            return out;
        }
        const auto [cx, cy] = cell_of(q);
        const auto span = static_cast<std::int64_t>(std::ceil(radius_m / cell_m_));
        for (std::int64_t dx = -span; dx <= span; ++dx) {
            for (std::int64_t dy = -span; dy <= span; ++dy) {
                auto it = cells_.find(key({cx + dx, cy + dy}));
                if (it == cells_.end()) {
                    continue;
                }
                for (std::size_t idx : it->second) {
                    const double d = haversine_m(q, points_[idx]);
                    if (d <= radius_m) {
                        out.emplace_back(idx, d);
                    }
                }
            }
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    /// Nearest point within `radius_m`; ties resolve to the lower index.
    std::optional<std::pair<std::size_t, double>> nearest_within(const GeoPoint& q, double radius_m) const {
        std::optional<std::pair<std::size_t, double>> best;
        for (const auto& hit : within(q, radius_m)) {
            if (!best || hit.second < best->second) {
                best = hit;
            }
        }
        return best;
    }

private:
    static constexpr double kShrink = 0.99;

    struct Cell {
        std::int64_t x;
        std::int64_t y;
    };

    Cell cell_of(const GeoPoint& p) const {
        return {static_cast<std::int64_t>(std::floor(p.lng * x_scale_ / cell_m_)),
                static_cast<std::int64_t>(std::floor(p.lat * y_scale_ / cell_m_))};
    }

    static std::uint64_t key(Cell c) {
        return (static_cast<std::uint64_t>(c.x) << 32) ^ (static_cast<std::uint64_t>(c.y) & 0xffffffffULL);
    }

    std::vector<GeoPoint> points_;
    double cell_m_ = 1.0;
    double x_scale_ = 1.0;
    double y_scale_ = 1.0;
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

} // namespace tritide
