#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "gprxv/box.hpp"
#include "gprxv/volume.hpp"

namespace gprxv {

enum class ObjectKind : std::uint8_t { Void, Loose, Manhole };

std::string_view to_string(ObjectKind k);
ObjectKind object_kind_from_string(std::string_view s);

/// Ricker wavelet (1 - 2 pi^2 f^2 tau^2) exp(-pi^2 f^2 tau^2), tau = t - t0.
/// Times in ns, centre frequency in GHz.
double ricker(double t_ns, double t0_ns, double fc_ghz);

/// Half-width (ns) of the interval around the peak that holds all but a
/// negligible fraction of the wavelet energy.
double ricker_half_support_ns(double fc_ghz);

/// Two-way travel time to a point reflector at lateral offset x - x0 and depth d.
double travel_time(double x_m, double x0_m, double depth_m, double velocity_m_per_ns);

struct LayerSpec {
    double depth_m = 0.0;
    double reflectivity = 0.0;
};

/// Ground position. depth_m is the top of the object; it extends dz below.
struct Position {
    double transverse_m = 0.0;
    double longitudinal_m = 0.0;
    double depth_m = 0.0;
};

struct Extent {
    double dx_m = 0.0;  // transverse
    double dy_m = 0.0;  // longitudinal
    double dz_m = 0.0;
};

struct ObjectSpec {
    ObjectKind kind = ObjectKind::Void;
    Position center;
    Extent size;
    double amplitude_gain = 1.0;

    static double default_gain(ObjectKind k);
    static ObjectSpec make(ObjectKind k, Position center, Extent size);
};

/// Rendering constants shared by every object kind.
struct RenderModel {
    double wavelet_ghz = 0.4;
    double edge_diffraction = 0.35;   // flank amplitude relative to the face
    double aperture_m = 0.15;         // lateral decay length of diffraction flanks
    int loose_scatterers = 40;
    double loose_gain_lo = 0.1;
    double loose_gain_hi = 0.3;
};

struct SceneSpec {
    Dims dims{32, 96, 512};
    AcquisitionMeta meta;
    std::vector<LayerSpec> layers;
    std::vector<ObjectSpec> objects;
    double noise_sigma = 0.0;
    std::uint64_t rng_seed = 0;
    RenderModel model;

    void validate() const;
};

struct ViewBox {
    int slice_index = 0;
    Box2 bbox;

    bool operator==(const ViewBox&) const = default;
};

struct AnnotatedObject {
    ObjectKind kind = ObjectKind::Void;
    VoxelBox box;
    ViewBox b, c, d;

    const ViewBox& in_view(View v) const;
    bool operator==(const AnnotatedObject&) const = default;
};

using GroundTruth = std::vector<AnnotatedObject>;

struct Scene {
    Volume volume;
    GroundTruth truth;
};

Scene render_scene(const SceneSpec& spec);

/// Renders one object alone (no layers, no noise). Used for energy checks.
Volume render_object_only(const SceneSpec& spec, std::size_t object_index);

/// Adds a single diffracting point to `v` at the given position.
void add_point_reflector(Volume& v, const RenderModel& model, Position at, double gain);

struct ClassCounts {
    int healthy = 1;
    int void_ = 1;
    int loose = 1;
    int manhole = 1;

    int total() const { return healthy + void_ + loose + manhole; }
};

/// Scene layouts of a benchmark: healthy scenes first, then void, loose and
/// manhole scenes, one object each. Deterministic per seed.
std::vector<SceneSpec> benchmark_specs(std::uint64_t seed, ClassCounts counts);
std::vector<Scene> make_benchmark(std::uint64_t seed, ClassCounts counts);

/// The acquisition geometry used by generated benchmarks.
SceneSpec default_scene();

}  // namespace gprxv
