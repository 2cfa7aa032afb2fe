#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gprxv/box.hpp"

namespace gprxv {

/// Dataset augmentation: small rotations and mirror flips.
struct Transform {
    enum class Kind { Rotate, FlipH, FlipV };

    Kind kind = Kind::Rotate;
    double degrees = 0.0;

    static constexpr double kMaxDegrees = 15.0;

    static Transform rotate(double degrees) { return {Kind::Rotate, degrees}; }
    static Transform flip_h() { return {Kind::FlipH, 0.0}; }
    static Transform flip_v() { return {Kind::FlipV, 0.0}; }
};

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {

// Pixel (r, c) covers [r, r+1) x [c, c+1); rotation is about the image centre
// and positive angles turn content counter-clockwise on screen (rows down).
struct Rotation {
    double cos_t, sin_t, cr, cc;

    Rotation(double degrees, Eigen::Index rows, Eigen::Index cols)
        : cos_t(std::cos(degrees * std::numbers::pi / 180.0)),
          sin_t(std::sin(degrees * std::numbers::pi / 180.0)),
          cr(double(rows) / 2.0),
          cc(double(cols) / 2.0)
    {
        if (degrees == 0.0) cos_t = 1.0, sin_t = 0.0;
    }

    std::pair<double, double> forward(double r, double c) const
    {
        const double y = r - cr, x = c - cc;
        return {cr + cos_t * y - sin_t * x, cc + sin_t * y + cos_t * x};
    }

    std::pair<double, double> inverse(double r, double c) const
    {
        const double y = r - cr, x = c - cc;
        return {cr + cos_t * y + sin_t * x, cc - sin_t * y + cos_t * x};
    }
};

template <typename Scalar>
Scalar bilinear_zero_padded(const Matrix<Scalar>& img, double r, double c)
{
    // (r, c) is in pixel-centre coordinates: integer values hit samples exactly.
    const Eigen::Index H = img.rows(), W = img.cols();
    const double fr = std::floor(r), fc = std::floor(c);
    const Eigen::Index r0 = Eigen::Index(fr), c0 = Eigen::Index(fc);
    const double ar = r - fr, ac = c - fc;
    auto at = [&](Eigen::Index y, Eigen::Index x) -> double {
        return (y < 0 || y >= H || x < 0 || x >= W) ? 0.0 : double(img(y, x));
    };
    double v = (1 - ar) * (1 - ac) * at(r0, c0);
    if (ac != 0.0) v += (1 - ar) * ac * at(r0, c0 + 1);
    if (ar != 0.0) v += ar * (1 - ac) * at(r0 + 1, c0);
    if (ar != 0.0 && ac != 0.0) v += ar * ac * at(r0 + 1, c0 + 1);
    return Scalar(v);
}

}  // namespace detail

/// Rotates by bilinear resampling about the image centre with zero padding;
/// output dimensions equal the input's.
template <typename Scalar>
Matrix<Scalar> rotate_image(const Matrix<Scalar>& img, double degrees)
{
    const detail::Rotation rot(degrees, img.rows(), img.cols());
    Matrix<Scalar> out(img.rows(), img.cols());
    for (Eigen::Index c = 0; c < img.cols(); ++c) {
        for (Eigen::Index r = 0; r < img.rows(); ++r) {
            const auto [sr, sc] = rot.inverse(double(r) + 0.5, double(c) + 0.5);
            out(r, c) = detail::bilinear_zero_padded(img, sr - 0.5, sc - 0.5);
        }
    }
    return out;
}

/// Box of the output pixels whose centres map back inside `b`, i.e. the
/// pixels that rotate_image fills from the box's content. Empty when the box
/// turns entirely out of frame.
inline Box2 rotate_box(const Box2& b, double degrees, Eigen::Index rows, Eigen::Index cols)
{
    const detail::Rotation rot(degrees, rows, cols);
    auto inside = [&](int r, int c) {
        const auto [sr, sc] = rot.inverse(r + 0.5, c + 0.5);
        return sr >= b.r0 && sr < b.r1 && sc >= b.c0 && sc < b.c1;
    };
    // Per row the source point moves linearly in c, so the covered columns
    // form one run. Solve for it in closed form, then settle the ends exactly.
    const int H = int(rows), W = int(cols);
    int r0 = H, c0 = W, r1 = 0, c1 = 0;
    for (int r = 0; r < H; ++r) {
        const double y = r + 0.5 - rot.cr;
        double lo = -1e300, hi = 1e300;  // range of x = c + 0.5 - cc
        auto bound = [&](double base, double slope, double from, double to) {
            // from <= base + slope * x < to
            if (slope == 0.0) {
                if (base < from || base >= to) lo = 1, hi = 0;
                return;
            }
            const double a = (from - base) / slope, z = (to - base) / slope;
            lo = std::max(lo, std::min(a, z)), hi = std::min(hi, std::max(a, z));
        };
        bound(rot.cr + rot.cos_t * y, rot.sin_t, b.r0, b.r1);
        bound(rot.cc - rot.sin_t * y, rot.cos_t, b.c0, b.c1);
        if (lo > hi + 1.0) continue;
        int first = int(std::clamp(std::floor(lo + rot.cc - 0.5) - 1.0, 0.0, double(W)));
        int last = int(std::clamp(std::ceil(hi + rot.cc - 0.5) + 1.0, -1.0, double(W - 1)));
        while (first <= last && !inside(r, first)) ++first;
        while (last >= first && !inside(r, last)) --last;
        if (first > last) continue;
        r0 = std::min(r0, r), r1 = std::max(r1, r + 1);
        c0 = std::min(c0, first), c1 = std::max(c1, last + 1);
    }
    if (r1 == 0) return {};
    return {r0, c0, r1, c1};
}

/// Applies `t` to an image and its annotated boxes.
template <typename Scalar>
std::pair<Matrix<Scalar>, std::vector<Box2>> augment(const Matrix<Scalar>& img, std::span<const Box2> boxes,
                                                      const Transform& t)
{
    const int H = int(img.rows()), W = int(img.cols());
    std::vector<Box2> out_boxes;
    out_boxes.reserve(boxes.size());
    switch (t.kind) {
        case Transform::Kind::Rotate: {
            if (!(std::abs(t.degrees) <= Transform::kMaxDegrees)) {
                throw std::invalid_argument("rotation angle outside [-15, 15] degrees");
            }
            for (const auto& b : boxes) out_boxes.push_back(rotate_box(b, t.degrees, H, W));
            return {rotate_image(img, t.degrees), std::move(out_boxes)};
        }
        case Transform::Kind::FlipH: {
            for (const auto& b : boxes) out_boxes.push_back({b.r0, W - b.c1, b.r1, W - b.c0});
            return {img.rowwise().reverse(), std::move(out_boxes)};
        }
        case Transform::Kind::FlipV: {
            for (const auto& b : boxes) out_boxes.push_back({H - b.r1, b.c0, H - b.r0, b.c1});
            return {img.colwise().reverse(), std::move(out_boxes)};
        }
    }
    throw std::invalid_argument("unknown transform");
}

}  // namespace gprxv
