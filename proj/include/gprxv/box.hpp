#pragma once

#include <algorithm>
#include <cstdint>
#include <string_view>

namespace gprxv {

/// Scan orientation of a 2D section through the volume.
enum class View : std::uint8_t { B, C, D };

std::string_view to_string(View v);
View view_from_string(std::string_view s);

/// Half-open interval [lo, hi) of trace indices.
struct TraceRange {
    int x0 = 0;
    int x1 = 0;

    int length() const { return x1 - x0; }
    bool operator==(const TraceRange&) const = default;
    auto operator<=>(const TraceRange&) const = default;
};

/// Axis-aligned 2D box in image coordinates, rows [r0, r1) x cols [c0, c1).
struct Box2 {
    int r0 = 0;
    int c0 = 0;
    int r1 = 0;
    int c1 = 0;

    int height() const { return r1 - r0; }
    int width() const { return c1 - c0; }
    bool empty() const { return r1 <= r0 || c1 <= c0; }
    std::int64_t area() const { return empty() ? 0 : std::int64_t(height()) * width(); }
    bool contains(const Box2& o) const { return r0 <= o.r0 && c0 <= o.c0 && o.r1 <= r1 && o.c1 <= c1; }

    bool operator==(const Box2&) const = default;
    auto operator<=>(const Box2&) const = default;
};

/// Half-open voxel footprint: channels [c0, c1), traces [x0, x1), samples [k0, k1).
struct VoxelBox {
    int c0 = 0;
    int c1 = 0;
    int x0 = 0;
    int x1 = 0;
    int k0 = 0;
    int k1 = 0;

    bool empty() const { return c1 <= c0 || x1 <= x0 || k1 <= k0; }
    std::int64_t volume() const
    {
        return empty() ? 0 : std::int64_t(c1 - c0) * (x1 - x0) * (k1 - k0);
    }
    bool contains(const VoxelBox& o) const
    {
        return c0 <= o.c0 && x0 <= o.x0 && k0 <= o.k0 && o.c1 <= c1 && o.x1 <= x1 && o.k1 <= k1;
    }

    bool operator==(const VoxelBox&) const = default;
    auto operator<=>(const VoxelBox&) const = default;
};

inline Box2 intersect(const Box2& a, const Box2& b)
{
    return {std::max(a.r0, b.r0), std::max(a.c0, b.c0), std::min(a.r1, b.r1), std::min(a.c1, b.c1)};
}

inline Box2 hull(const Box2& a, const Box2& b)
{
    return {std::min(a.r0, b.r0), std::min(a.c0, b.c0), std::max(a.r1, b.r1), std::max(a.c1, b.c1)};
}

inline VoxelBox intersect(const VoxelBox& a, const VoxelBox& b)
{
    return {std::max(a.c0, b.c0), std::min(a.c1, b.c1), std::max(a.x0, b.x0),
            std::min(a.x1, b.x1), std::max(a.k0, b.k0), std::min(a.k1, b.k1)};
}

inline VoxelBox hull(const VoxelBox& a, const VoxelBox& b)
{
    return {std::min(a.c0, b.c0), std::max(a.c1, b.c1), std::min(a.x0, b.x0),
            std::max(a.x1, b.x1), std::min(a.k0, b.k0), std::max(a.k1, b.k1)};
}

inline std::int64_t measure(const Box2& b) { return b.area(); }
inline std::int64_t measure(const VoxelBox& b) { return b.volume(); }

/// Intersection over union for boxes of the same arity. Empty/empty yields 0.
template <typename Box>
double iou(const Box& a, const Box& b)
{
    const std::int64_t inter = measure(intersect(a, b));
    const std::int64_t uni = measure(a) + measure(b) - inter;
    return uni > 0 ? double(inter) / double(uni) : 0.0;
}

inline bool overlaps(const VoxelBox& a, const VoxelBox& b) { return !intersect(a, b).empty(); }

}  // namespace gprxv
