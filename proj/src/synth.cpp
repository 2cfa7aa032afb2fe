#include "gprxv/synth.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include <Eigen/Core>

namespace gprxv {

namespace {

using Vec2 = Eigen::Vector2d;  // (transverse, longitudinal) in metres
using Polygon = std::vector<Vec2>;

constexpr double kPi = std::numbers::pi;

// Ricker values below 2e-5 of the peak are not rendered.
double render_half_support_ns(double fc) { return 1.2 / fc; }

bool inside(const Polygon& poly, const Vec2& p)
{
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const Vec2& a = poly[i];
        const Vec2& b = poly[j];
        if ((a.y() > p.y()) != (b.y() > p.y())) {
            const double x = a.x() + (p.y() - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
            if (p.x() < x) in = !in;
        }
    }
    return in;
}

double distance_to_boundary(const Polygon& poly, const Vec2& p)
{
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const Vec2 ab = poly[i] - poly[j];
        const double len2 = ab.squaredNorm();
        const double t = len2 > 0 ? std::clamp((p - poly[j]).dot(ab) / len2, 0.0, 1.0) : 0.0;
        best = std::min(best, (poly[j] + t * ab - p).norm());
    }
    return best;
}

double polygon_area(const Polygon& poly)
{
    double a = 0;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        a += poly[j].x() * poly[i].y() - poly[i].x() * poly[j].y();
    }
    return std::abs(a) / 2;
}

struct Grid {
    double channel_spacing;
    double trace_spacing;
    double dt;
    double velocity;
    Dims dims;

    Grid(const AcquisitionMeta& m, Dims d)
        : channel_spacing(m.channel_spacing_m(d.n_channels)),
          trace_spacing(m.trace_spacing_m),
          dt(sample_interval_ns(m, d.n_samples)),
          velocity(m.velocity_m_per_ns),
          dims(d)
    {
    }

    Vec2 position(int c, int x) const { return {c * channel_spacing, x * trace_spacing}; }

    // Half-open index range of grid nodes inside [lo, hi] metres.
    static std::pair<int, int> nodes(double lo, double hi, double spacing, int n)
    {
        const int a = std::max(0, int(std::ceil(lo / spacing - 1e-9)));
        const int b = std::min(n, int(std::floor(hi / spacing + 1e-9)) + 1);
        return {a, std::max(a, b)};
    }
    std::pair<int, int> channels(double lo, double hi) const
    {
        return nodes(lo, hi, channel_spacing, dims.n_channels);
    }
    std::pair<int, int> traces(double lo, double hi) const { return nodes(lo, hi, trace_spacing, dims.n_traces); }

    int sample_floor(double t) const { return std::clamp(int(std::floor(t / dt)), 0, dims.n_samples - 1); }
    int sample_ceil(double t) const { return std::clamp(int(std::ceil(t / dt)), 0, dims.n_samples - 1); }
};

void add_wavelet(std::span<float> trace, double dt, double t0, double amplitude, double fc)
{
    const double half = render_half_support_ns(fc);
    const int k0 = std::max(0, int(std::ceil((t0 - half) / dt)));
    const int k1 = std::min(int(trace.size()) - 1, int(std::floor((t0 + half) / dt)));
    for (int k = k0; k <= k1; ++k) trace[k] += float(amplitude * ricker(k * dt, t0, fc));
}

struct Footprint {
    Polygon polygon;
    double t0, t1, l0, l1;  // bounding rectangle
};

Footprint rectangle(const ObjectSpec& o)
{
    const double t0 = o.center.transverse_m - o.size.dx_m / 2, t1 = o.center.transverse_m + o.size.dx_m / 2;
    const double l0 = o.center.longitudinal_m - o.size.dy_m / 2, l1 = o.center.longitudinal_m + o.size.dy_m / 2;
    return {{{t0, l0}, {t1, l0}, {t1, l1}, {t0, l1}}, t0, t1, l0, l1};
}

// Star-shaped polygon stretched to the object's extent, with a fill ratio
// well below that of a rectangle.
Footprint irregular(const ObjectSpec& o, std::mt19937_64& rng)
{
    std::uniform_int_distribution<int> nv(7, 10);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Polygon p;
    for (int attempt = 0;; ++attempt) {
        p.clear();
        const int n = nv(rng);
        const double phase = u01(rng) * 2 * kPi;
        for (int i = 0; i < n; ++i) {
            const double a = phase + (i + 0.35 * (u01(rng) - 0.5)) * 2 * kPi / n;
            const double r = 0.4 + 0.6 * u01(rng);
            p.emplace_back(r * std::cos(a), r * std::sin(a));
        }
        Vec2 lo = p[0], hi = p[0];
        for (const auto& v : p) lo = lo.cwiseMin(v), hi = hi.cwiseMax(v);
        const Vec2 span = hi - lo;
        const double fill = polygon_area(p) / (span.x() * span.y());
        if (fill <= 0.72 || attempt > 64) {
            for (auto& v : p) {
                v = Vec2((v.x() - lo.x()) / span.x() - 0.5, (v.y() - lo.y()) / span.y() - 0.5);
                v = Vec2(o.center.transverse_m + v.x() * o.size.dx_m, o.center.longitudinal_m + v.y() * o.size.dy_m);
            }
            break;
        }
    }
    Footprint f = rectangle(o);
    f.polygon = std::move(p);
    return f;
}

struct Scatterer {
    Position at;
    double gain;
};

std::vector<Scatterer> scatter(const ObjectSpec& o, const RenderModel& model, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<Scatterer> out;
    for (int i = 0; i < model.loose_scatterers; ++i) {
        Position p{o.center.transverse_m + (u01(rng) - 0.5) * o.size.dx_m,
                   o.center.longitudinal_m + (u01(rng) - 0.5) * o.size.dy_m,
                   o.center.depth_m + u01(rng) * o.size.dz_m};
        const double g = model.loose_gain_lo + (model.loose_gain_hi - model.loose_gain_lo) * u01(rng);
        out.push_back({p, g * o.amplitude_gain});
    }
    return out;
}

void render_face(Volume& v, const Grid& g, const Footprint& f, double depth, double gain, const RenderModel& m)
{
    const double reach = 3 * m.aperture_m;
    const auto [c0, c1] = g.channels(f.t0 - reach, f.t1 + reach);
    const auto [x0, x1] = g.traces(f.l0 - reach, f.l1 + reach);
    const double apex = 2 * depth / g.velocity;
    for (int c = c0; c < c1; ++c) {
        for (int x = x0; x < x1; ++x) {
            const Vec2 p = g.position(c, x);
            auto tr = v.trace(c, x);
            if (inside(f.polygon, p)) {
                add_wavelet(tr, g.dt, apex, gain, m.wavelet_ghz);
                continue;
            }
            const double s = distance_to_boundary(f.polygon, p);
            if (s >= reach) continue;
            const double a = gain * m.edge_diffraction * std::exp(-(s / m.aperture_m) * (s / m.aperture_m));
            add_wavelet(tr, g.dt, travel_time(s, 0.0, depth, g.velocity), a, m.wavelet_ghz);
        }
    }
}

void render_point(Volume& v, const Grid& g, const RenderModel& m, Position at, double gain)
{
    const double reach = 3 * m.aperture_m;
    const auto [c0, c1] = g.channels(at.transverse_m - reach, at.transverse_m + reach);
    const auto [x0, x1] = g.traces(at.longitudinal_m - reach, at.longitudinal_m + reach);
    const Vec2 centre(at.transverse_m, at.longitudinal_m);
    for (int c = c0; c < c1; ++c) {
        for (int x = x0; x < x1; ++x) {
            const double r = (g.position(c, x) - centre).norm();
            if (r >= reach) continue;
            const double a = gain * std::exp(-(r / m.aperture_m) * (r / m.aperture_m));
            add_wavelet(v.trace(c, x), g.dt, travel_time(r, 0.0, at.depth_m, g.velocity), a, m.wavelet_ghz);
        }
    }
}

struct Support {
    double t0, t1, l0, l1;  // lateral bounds, metres
    double top, bottom;     // reflector depth range, metres
    double margin;          // lateral margin for diffraction flanks
};

VoxelBox support_box(const Grid& g, const Support& s, double fc)
{
    const auto [c0, c1] = g.channels(s.t0 - s.margin, s.t1 + s.margin);
    const auto [x0, x1] = g.traces(s.l0 - s.margin, s.l1 + s.margin);
    const double w = ricker_half_support_ns(fc);
    const double t_top = 2 * s.top / g.velocity - w;
    const double t_bot = travel_time(s.margin * std::sqrt(2.0), 0.0, s.bottom, g.velocity) + w;
    return {c0, c1, x0, x1, g.sample_floor(t_top), g.sample_ceil(t_bot) + 1};
}

AnnotatedObject annotate(ObjectKind kind, const VoxelBox& b, const Grid& g, const Position& centre, double focus_m)
{
    auto clamp_index = [](long i, int n) { return int(std::clamp(i, 0L, long(n - 1))); };
    const int c = std::clamp(clamp_index(std::lround(centre.transverse_m / g.channel_spacing), g.dims.n_channels),
                             b.c0, b.c1 - 1);
    const int x = std::clamp(clamp_index(std::lround(centre.longitudinal_m / g.trace_spacing), g.dims.n_traces),
                             b.x0, b.x1 - 1);
    const int k = std::clamp(clamp_index(std::lround(2 * focus_m / g.velocity / g.dt), g.dims.n_samples), b.k0,
                             b.k1 - 1);
    AnnotatedObject a;
    a.kind = kind;
    a.box = b;
    a.b = {c, {b.k0, b.x0, b.k1, b.x1}};
    a.c = {k, {b.c0, b.x0, b.c1, b.x1}};
    a.d = {x, {b.k0, b.c0, b.k1, b.c1}};
    return a;
}

std::mt19937_64 object_rng(std::uint64_t seed, std::size_t index)
{
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(index), 0x0b1ec7u};
    return std::mt19937_64(seq);
}

struct Rendered {
    Volume volume;
    std::vector<AnnotatedObject> truth;
};

// Renders layers (optional), the selected objects and noise (optional).
Rendered render(const SceneSpec& spec, bool with_background, long only_object)
{
    spec.validate();
    Volume v(spec.dims, spec.meta);
    const Grid g(spec.meta, spec.dims);
    const RenderModel& m = spec.model;

    if (with_background && !spec.layers.empty()) {
        std::vector<float> column(std::size_t(spec.dims.n_samples), 0.0f);
        for (const auto& layer : spec.layers) {
            add_wavelet(column, g.dt, 2 * layer.depth_m / g.velocity, layer.reflectivity, m.wavelet_ghz);
        }
        for (int c = 0; c < spec.dims.n_channels; ++c) {
            for (int x = 0; x < spec.dims.n_traces; ++x) std::ranges::copy(column, v.trace(c, x).begin());
        }
    }

    std::vector<AnnotatedObject> truth;
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
        const ObjectSpec& o = spec.objects[i];
        auto rng = object_rng(spec.rng_seed, i);
        const bool draw = only_object < 0 || std::size_t(only_object) == i;
        if (o.kind == ObjectKind::Loose) {
            const auto pts = scatter(o, m, rng);
            Support s{1e9, -1e9, 1e9, -1e9, 1e9, -1e9, m.aperture_m};
            for (const auto& p : pts) {
                if (draw) render_point(v, g, m, p.at, p.gain);
                s.t0 = std::min(s.t0, p.at.transverse_m), s.t1 = std::max(s.t1, p.at.transverse_m);
                s.l0 = std::min(s.l0, p.at.longitudinal_m), s.l1 = std::max(s.l1, p.at.longitudinal_m);
                s.top = std::min(s.top, p.at.depth_m), s.bottom = std::max(s.bottom, p.at.depth_m);
            }
            truth.push_back(annotate(o.kind, support_box(g, s, m.wavelet_ghz), g, o.center,
                                     o.center.depth_m + o.size.dz_m / 2));
        } else {
            const Footprint f = o.kind == ObjectKind::Manhole ? rectangle(o) : irregular(o, rng);
            if (draw) render_face(v, g, f, o.center.depth_m, o.amplitude_gain, m);
            const Support s{f.t0, f.t1, f.l0, f.l1, o.center.depth_m, o.center.depth_m, 0.5 * m.aperture_m};
            truth.push_back(annotate(o.kind, support_box(g, s, m.wavelet_ghz), g, o.center, o.center.depth_m));
        }
    }

    if (with_background && spec.noise_sigma > 0) {
        std::mt19937_64 rng(spec.rng_seed);
        std::normal_distribution<double> n(0.0, spec.noise_sigma);
        for (float& a : v.data()) a += float(n(rng));
    }
    return {std::move(v), std::move(truth)};
}

}  // namespace

std::string_view to_string(ObjectKind k)
{
    switch (k) {
        case ObjectKind::Void: return "void";
        case ObjectKind::Loose: return "loose";
        case ObjectKind::Manhole: return "manhole";
    }
    return "?";
}

ObjectKind object_kind_from_string(std::string_view s)
{
    if (s == "void") return ObjectKind::Void;
    if (s == "loose") return ObjectKind::Loose;
    if (s == "manhole") return ObjectKind::Manhole;
    throw std::invalid_argument("unknown object kind '" + std::string(s) + "'");
}

double ricker(double t_ns, double t0_ns, double fc_ghz)
{
    const double tau = t_ns - t0_ns;
    const double a = kPi * kPi * fc_ghz * fc_ghz * tau * tau;
    return (1.0 - 2.0 * a) * std::exp(-a);
}

double ricker_half_support_ns(double fc_ghz)
{
    // Energy density (1 - 2u)^2 e^{-2u}, u = (pi f tau)^2. Integrate on a fine
    // grid and return the smallest half-width holding 99.5% of the energy.
    constexpr int kSteps = 4000;
    const double span = 2.0 / fc_ghz;
    const double h = span / kSteps;
    std::vector<double> cum(kSteps + 1, 0.0);
    for (int i = 1; i <= kSteps; ++i) {
        const double r = ricker((i - 0.5) * h, 0.0, fc_ghz);
        cum[i] = cum[i - 1] + r * r * h;
    }
    for (int i = 1; i <= kSteps; ++i) {
        if (cum[i] >= 0.995 * cum[kSteps]) return i * h;
    }
    return span;
}

double travel_time(double x_m, double x0_m, double depth_m, double velocity_m_per_ns)
{
    if (!(depth_m > 0.0) || !(velocity_m_per_ns > 0.0)) {
        throw std::invalid_argument("travel_time requires depth > 0 and velocity > 0");
    }
    const double dx = x_m - x0_m;
    return 2.0 / velocity_m_per_ns * std::sqrt(depth_m * depth_m + dx * dx);
}

double ObjectSpec::default_gain(ObjectKind k)
{
    switch (k) {
        case ObjectKind::Void: return 1.0;
        case ObjectKind::Loose: return 1.0;
        case ObjectKind::Manhole: return 2.0;
    }
    return 1.0;
}

ObjectSpec ObjectSpec::make(ObjectKind k, Position center, Extent size)
{
    return {k, center, size, default_gain(k)};
}

void SceneSpec::validate() const
{
    auto fail = [](const std::string& what) { throw std::invalid_argument("scene: " + what); };
    if (dims.n_channels < 1 || dims.n_traces < 1 || dims.n_samples < 1) fail("dimensions must be >= 1");
    meta.validate();
    if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
    if (!(model.wavelet_ghz > 0.0)) fail("wavelet frequency must be > 0");
    double prev = 0.0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (!(l.depth_m > prev) || !(l.depth_m < meta.max_depth_m)) {
            fail("layer depths must be positive, strictly increasing and < max_depth_m");
        }
        if (!(l.reflectivity >= -1.0 && l.reflectivity <= 1.0)) fail("layer reflectivity outside [-1, 1]");
        prev = l.depth_m;
    }
    const double width = meta.transverse_extent_m;
    const double length = (dims.n_traces - 1) * meta.trace_spacing_m;
    for (std::size_t i = 0; i < objects.size(); ++i) {
        const auto& o = objects[i];
        std::ostringstream who;
        who << "object " << i << ": ";
        if (!(o.amplitude_gain > 0.0)) fail(who.str() + "amplitude_gain must be > 0");
        if (!(o.size.dx_m > 0 && o.size.dy_m > 0 && o.size.dz_m >= 0)) fail(who.str() + "non-positive size");
        if (o.center.transverse_m - o.size.dx_m / 2 < 0 || o.center.transverse_m + o.size.dx_m / 2 > width ||
            o.center.longitudinal_m - o.size.dy_m / 2 < 0 || o.center.longitudinal_m + o.size.dy_m / 2 > length) {
            fail(who.str() + "footprint outside the surveyed area");
        }
        if (!(o.center.depth_m > 0 && o.center.depth_m + o.size.dz_m < meta.max_depth_m)) {
            fail(who.str() + "depth range outside (0, max_depth_m)");
        }
    }
}

const ViewBox& AnnotatedObject::in_view(View v) const
{
    switch (v) {
        case View::B: return b;
        case View::C: return c;
        case View::D: return d;
    }
    return c;
}

Scene render_scene(const SceneSpec& spec)
{
    auto r = render(spec, true, -1);
    return {std::move(r.volume), std::move(r.truth)};
}

Volume render_object_only(const SceneSpec& spec, std::size_t object_index)
{
    if (object_index >= spec.objects.size()) throw std::out_of_range("object index");
    return render(spec, false, long(object_index)).volume;
}

void add_point_reflector(Volume& v, const RenderModel& model, Position at, double gain)
{
    render_point(v, Grid(v.meta(), v.dims()), model, at, gain);
}

SceneSpec default_scene()
{
    SceneSpec s;
    s.dims = {32, 96, 512};
    s.meta = AcquisitionMeta{};
    s.layers = {{0.12, 0.25}, {0.35, -0.2}, {0.75, 0.15}};
    s.noise_sigma = 0.01;
    return s;
}

std::vector<SceneSpec> benchmark_specs(std::uint64_t seed, ClassCounts counts)
{
    if (counts.healthy < 0 || counts.void_ < 0 || counts.loose < 0 || counts.manhole < 0) {
        throw std::invalid_argument("benchmark counts must be >= 0");
    }
    std::vector<SceneSpec> out;
    const std::array<std::pair<int, int>, 4> plan{{{-1, counts.healthy},
                                                   {int(ObjectKind::Void), counts.void_},
                                                   {int(ObjectKind::Loose), counts.loose},
                                                   {int(ObjectKind::Manhole), counts.manhole}}};
    std::size_t index = 0;
    for (const auto& [kind, n] : plan) {
        for (int i = 0; i < n; ++i, ++index) {
            std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(index), 0x5ce7e5u};
            std::mt19937_64 rng(seq);
            std::uniform_real_distribution<double> u(0.0, 1.0);
            auto between = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

            SceneSpec s = default_scene();
            s.rng_seed = rng();
            for (auto& l : s.layers) l.depth_m += between(-0.03, 0.03);
            if (kind >= 0) {
                const auto k = ObjectKind(kind);
                Extent size{between(0.55, 0.72), between(0.6, 0.9), between(0.2, 0.4)};
                Position at{between(0.65, 1.05), between(1.4, 3.3), between(0.6, 2.4)};
                ObjectSpec o = ObjectSpec::make(k, at, size);
                o.amplitude_gain = k == ObjectKind::Manhole ? between(1.8, 2.4) : between(0.8, 1.2);
                s.objects.push_back(o);
            }
            out.push_back(std::move(s));
        }
    }
    return out;
}

std::vector<Scene> make_benchmark(std::uint64_t seed, ClassCounts counts)
{
    std::vector<Scene> out;
    for (const auto& s : benchmark_specs(seed, counts)) out.push_back(render_scene(s));
    return out;
}

}  // namespace gprxv
