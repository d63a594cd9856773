#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include "mdst/errors.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

// Polarity event at integer frame time t.
struct Event {
    std::size_t x = 0;
    std::size_t y = 0;
    std::size_t t = 0;
    int p = 1;

    bool operator==(const Event&) const = default;
};

using EventStream = std::vector<Event>;

inline constexpr double kLogIntensityFloor = 1e-3;
inline constexpr double kDefaultContrastThreshold = 0.30;

namespace detail {

// Frames are [W] or [H, W]; returns (height, width).
inline std::pair<std::size_t, std::size_t> frame_extents(const Tensor& frame) {
    if (frame.rank() == 1) return {1, frame.dim(0)};
    if (frame.rank() == 2) return {frame.dim(0), frame.dim(1)};
    throw DimensionError("frames must be rank 1 or 2, got " + to_string(frame.shape()));
}

}  // namespace detail

// log(frame + 1e-3); brightness must be non-negative.
inline Tensor log_intensity(const Tensor& frame) {
    std::vector<double> out(frame.size());
    auto v = frame.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!(v[i] >= 0.0)) throw NumericError("log_intensity: negative or NaN brightness " + std::to_string(v[i]));
        out[i] = std::log(v[i] + kLogIntensityFloor);
    }
    return Tensor(frame.shape(), std::move(out));
}

// Per-pixel log-intensity reference at the last emitted event.
class EgmState {
   public:
    EgmState(const Tensor& first_log_frame, double contrast_threshold)
        : reference_(first_log_frame.to_vector()), shape_(first_log_frame.shape()), threshold_(contrast_threshold) {
        if (!(contrast_threshold > 0.0)) throw ContractError("contrast threshold must be positive");
        std::tie(height_, width_) = detail::frame_extents(first_log_frame);
    }

    // Emits every event triggered by this frame, in (y, x) order. A change
    // of k*C or more yields k events, moving the reference by C each time.
    void step(const Tensor& log_frame, std::size_t t, EventStream& out) {
        if (log_frame.shape() != shape_) {
            throw DimensionError("frame " + std::to_string(t) + " has shape " + to_string(log_frame.shape()) +
                                 ", expected " + to_string(shape_));
        }
        auto v = log_frame.values();
        for (std::size_t y = 0; y < height_; ++y) {
            for (std::size_t x = 0; x < width_; ++x) {
                const std::size_t i = y * width_ + x;
                double& ref = reference_[i];
                while (v[i] - ref >= threshold_) {
                    out.push_back({x, y, t, +1});
                    ref += threshold_;
                }
                while (ref - v[i] >= threshold_) {
                    out.push_back({x, y, t, -1});
                    ref -= threshold_;
                }
            }
        }
    }

    const std::vector<double>& reference() const { return reference_; }
    double contrast_threshold() const { return threshold_; }

   private:
    std::vector<double> reference_;
    Shape shape_;
    std::size_t height_ = 1, width_ = 1;
    double threshold_;
};

// Event stream from per-frame log intensities, ordered by (t, y, x).
inline EventStream generate_events_from_log(const std::vector<Tensor>& log_frames, double contrast_threshold) {
    if (log_frames.size() < 2) throw ContractError("event generation needs at least 2 frames");
    EgmState state(log_frames.front(), contrast_threshold);
    EventStream out;
    for (std::size_t t = 1; t < log_frames.size(); ++t) state.step(log_frames[t], t, out);
    return out;
}

inline EventStream generate_events(const std::vector<Tensor>& frames, double contrast_threshold) {
    std::vector<Tensor> logs;
    logs.reserve(frames.size());
    for (const auto& f : frames) logs.push_back(log_intensity(f));
    return generate_events_from_log(logs, contrast_threshold);
}

// Dense signed-polarity grid; cells without events are 0.
class EventGrid {
   public:
    EventGrid() = default;
    explicit EventGrid(Tensor values) : values_(std::move(values)) {
        for (double v : values_.values()) {
            if (v != 0.0 && v != 1.0 && v != -1.0) throw ContractError("event grid entries must be in {-1, 0, +1}");
        }
    }

    const Tensor& tensor() const { return values_; }
    const Shape& shape() const { return values_.shape(); }

    std::size_t nonzero_count() const {
        std::size_t n = 0;
        for (double v : values_.values()) n += v != 0.0;
        return n;
    }

   private:
    Tensor values_;
};

// Writes each event's polarity at (t, y, x) of a [T, H, W] or [T, W] grid;
// the last event per cell wins.
inline EventGrid rasterize(const EventStream& stream, const Shape& target_shape) {
    if (target_shape.size() != 2 && target_shape.size() != 3) {
        throw DimensionError("event grid shape must be [T, W] or [T, H, W], got " + to_string(target_shape));
    }
    const std::size_t frames = target_shape[0];
    const std::size_t height = target_shape.size() == 3 ? target_shape[1] : 1;
    const std::size_t width = target_shape.back();
    std::vector<double> grid(numel(target_shape), 0.0);
    for (const auto& e : stream) {
        if (e.t >= frames || e.y >= height || e.x >= width) {
            throw IndexError("event (x=" + std::to_string(e.x) + ", y=" + std::to_string(e.y) +
                             ", t=" + std::to_string(e.t) + ") outside grid " + to_string(target_shape));
        }
        grid[(e.t * height + e.y) * width + e.x] = static_cast<double>(e.p);
    }
    return EventGrid(Tensor(target_shape, std::move(grid)));
}

// Event conversion of a feature sequence [T, D]: rows are frames, feature
// magnitudes are pseudo-brightness. Returns a [T, D] grid.
inline EventGrid feature_egm(const Tensor& features, double contrast_threshold = kDefaultContrastThreshold) {
    if (features.rank() != 2) throw DimensionError("feature_egm expects [T, D], got " + to_string(features.shape()));
    const std::size_t frames = features.dim(0), width = features.dim(1);
    if (frames < 2) throw ContractError("feature_egm needs at least 2 frames, got " + std::to_string(frames));
    std::vector<Tensor> logs;
    logs.reserve(frames);
    auto v = features.values();
    for (std::size_t t = 0; t < frames; ++t) {
        std::vector<double> row(width);
        for (std::size_t d = 0; d < width; ++d) row[d] = std::log(std::abs(v[t * width + d]) + kLogIntensityFloor);
        logs.emplace_back(Shape{width}, std::move(row));
    }
    return rasterize(generate_events_from_log(logs, contrast_threshold), {frames, width});
}

// Text form: one "t x y p" line per event, sorted by t.
inline void write_event_stream(std::ostream& os, const EventStream& stream) {
    for (const auto& e : stream) os << e.t << ' ' << e.x << ' ' << e.y << ' ' << e.p << '\n';
}

inline EventStream read_event_stream(std::istream& is) {
    EventStream out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        long long t, x, y, p;
        if (!(ls >> t >> x >> y >> p) || t < 0 || x < 0 || y < 0 || (p != 1 && p != -1)) {
            throw DataError("malformed event on line " + std::to_string(lineno) + ": '" + line + "'");
        }
        if (!out.empty() && static_cast<std::size_t>(t) < out.back().t) {
            throw DataError("event stream not sorted by t at line " + std::to_string(lineno));
        }
        out.push_back({static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(t),
                       static_cast<int>(p)});
    }
    return out;
}

inline void write_event_stream(const std::filesystem::path& path, const EventStream& stream) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    write_event_stream(os, stream);
}

inline EventStream read_event_stream(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("missing event file " + path.string());
    return read_event_stream(is);
}

}  // namespace mdst
