#pragma once

#include "tritide/time.hpp"

#include <functional>
#include <optional>
#include <utility>
#include <vector>

namespace tritide {

template <class Item>
struct TimeWindow {
    Timestamp window_start{};
    Seconds duration{5};
    std::vector<Item> items;

    Timestamp window_end() const { return window_start + duration; }
};

/// Tumbling event-time windows aligned to multiples of `size` since the epoch.
///
/// A window closes when an item at or past its end arrives, or on close().
/// Items earlier than the open window go to the late channel. Items whose
/// timestamp cannot be read join whichever window is open when they arrive
/// (or the next one to open).
template <class Item>
class WindowAssigner {
public:
    using TimeOf = std::function<std::optional<Timestamp>(const Item&)>;

    explicit WindowAssigner(TimeOf time_of, Seconds size = Seconds{5}) : time_of_(std::move(time_of)), size_(size) {}

    /// Feeds one item; returns the window it closed, if any.
    std::optional<TimeWindow<Item>> push(Item item) {
        const auto ts = time_of_(item);
        if (!ts) {
            if (current_) {
                current_->items.push_back(std::move(item));
            } else {
                pending_.push_back(std::move(item));
            }
            return std::nullopt;
        }
        if (current_ && *ts < current_->window_start) {
            late_.push_back(std::move(item));
            return std::nullopt;
        }
        if (!current_ && watermark_ && *ts < *watermark_) {
            late_.push_back(std::move(item));
            return std::nullopt;
        }
        std::optional<TimeWindow<Item>> closed;
        if (current_ && *ts >= current_->window_end()) {
            watermark_ = current_->window_end();
            closed = std::move(current_);
            current_.reset();
        }
        if (!current_) {
            current_ = TimeWindow<Item>{align(*ts), size_, {}};
            for (auto& p : pending_) {
                current_->items.push_back(std::move(p));
            }
            pending_.clear();
        }
        current_->items.push_back(std::move(item));
        return closed;
    }

    /// Flushes the open window at end of stream. Unplaceable items with no
    /// window to join are returned on the late channel.
    std::optional<TimeWindow<Item>> close() {
        for (auto& p : pending_) {
            late_.push_back(std::move(p));
        }
        pending_.clear();
        if (!current_) {
            return std::nullopt;
        }
        watermark_ = current_->window_end();
        auto out = std::move(current_);
        current_.reset();
        return out;
    }

    std::vector<Item> take_late() {
        std::vector<Item> out;
        out.swap(late_);
        return out;
    }

    const std::vector<Item>& late() const { return late_; }

    std::optional<Timestamp> open_window_end() const {
        if (!current_) {
            return std::nullopt;
        }
        return current_->window_end();
    }

    /// End of the newest emitted window.
    std::optional<Timestamp> watermark() const { return watermark_; }

    Timestamp align(Timestamp t) const {
        const auto s = t.time_since_epoch().count();
        const auto w = size_.count();
        auto q = s / w;
        if (s % w != 0 && s < 0) {
            --q;
        }
        return Timestamp{Seconds{q * w}};
    }

private:
    TimeOf time_of_;
    Seconds size_;
    std::optional<TimeWindow<Item>> current_;
    std::optional<Timestamp> watermark_;
    std::vector<Item> pending_;
    std::vector<Item> late_;
};

template <class Item>
struct WindowedStream {
    std::vector<TimeWindow<Item>> windows;
    std::vector<Item> late;
};

/// Batch form of WindowAssigner over a whole stream.
template <class Item, class Range>
WindowedStream<Item> window_assign(const Range& stream, typename WindowAssigner<Item>::TimeOf time_of,
                                   Seconds size = Seconds{5}) {
    WindowAssigner<Item> assigner(std::move(time_of), size);
    WindowedStream<Item> out;
    for (const auto& item : stream) {
        if (auto w = assigner.push(item)) {
            out.windows.push_back(std::move(*w));
        }
    }
    if (auto w = assigner.close()) {
        out.windows.push_back(std::move(*w));
    }
    out.late = assigner.take_late();
    return out;
}

} // namespace tritide
