#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gprxv/box.hpp"

namespace gprxv {

/// Raised for malformed container files and invariant violations of loaded data.
class FormatError : public std::runtime_error {
 public:
    using std::runtime_error::runtime_error;
};

using Image = Eigen::MatrixXf;

/// Acquisition parameters of a survey. Defaults follow a 512-sample, 180 ns,
/// 5 m multi-channel system with a 1.7 m swath and 200-600 MHz band.
struct AcquisitionMeta {
    double time_range_ns = 180.0;
    double max_depth_m = 5.0;
    double trace_spacing_m = 0.05;
    double transverse_extent_m = 1.7;
    double velocity_m_per_ns = 2.0 * 5.0 / 180.0;
    double min_freq_mhz = 200.0;
    double max_freq_mhz = 600.0;

    /// Velocity consistent with the depth and time ranges (2 * depth / time).
    double derived_velocity() const { return 2.0 * max_depth_m / time_range_ns; }

    /// Lateral distance between adjacent channels; channels span [0, transverse_extent_m].
    double channel_spacing_m(int n_channels) const;

    void validate() const;

    bool operator==(const AcquisitionMeta&) const = default;
};

struct Dims {
    int n_channels = 1;
    int n_traces = 1;
    int n_samples = 1;

    std::int64_t size() const { return std::int64_t(n_channels) * n_traces * n_samples; }
    bool operator==(const Dims&) const = default;
};

/// 3D amplitude matrix indexed [channel][trace][sample], sample 0 at the surface.
class Volume {
 public:
    Volume(Dims dims, AcquisitionMeta meta);
    Volume(Dims dims, AcquisitionMeta meta, std::vector<float> amplitudes);

    const Dims& dims() const { return dims_; }
    int n_channels() const { return dims_.n_channels; }
    int n_traces() const { return dims_.n_traces; }
    int n_samples() const { return dims_.n_samples; }
    const AcquisitionMeta& meta() const { return meta_; }

    float operator()(int c, int x, int k) const { return data_[offset(c, x, k)]; }
    float& operator()(int c, int x, int k) { return data_[offset(c, x, k)]; }

    std::span<const float> data() const { return data_; }
    std::span<float> data() { return data_; }

    /// Contiguous A-scan storage of one (channel, trace) column.
    std::span<const float> trace(int c, int x) const;
    std::span<float> trace(int c, int x);

    bool operator==(const Volume&) const = default;

 private:
    std::size_t offset(int c, int x, int k) const
    {
        return (std::size_t(c) * dims_.n_traces + std::size_t(x)) * dims_.n_samples + std::size_t(k);
    }

    Dims dims_;
    AcquisitionMeta meta_;
    std::vector<float> data_;
};

/// A 2D section through the volume.
///
/// B fixes a channel (rows = samples, cols = traces), C fixes a sample
/// (rows = channels, cols = traces), D fixes a trace (rows = samples,
/// cols = channels). For B and C the columns cover `window` in global trace
/// coordinates; column j is trace window.x0 + j.
struct SliceImage {
    View view = View::B;
    int index = 0;
    Image pixels;
    TraceRange window;

    std::pair<std::string_view, std::string_view> axis_labels() const;
};

struct WindowSpec {
    int length_traces = 256;
    int stride_traces = 128;

    /// Shrinks the window to fit a short volume; stride never exceeds length.
    WindowSpec clamped_to(int n_traces) const;
};

Eigen::VectorXf a_scan(const Volume& v, int c, int x);
SliceImage b_scan(const Volume& v, int c);
SliceImage c_scan(const Volume& v, int k);
SliceImage d_scan(const Volume& v, int x);

/// Restricts a B or C slice to the traces of `window`.
SliceImage crop_traces(const SliceImage& img, TraceRange window);

/// Window start positions step by the stride; the last window is shifted back
/// so that it ends exactly at n_traces.
std::vector<TraceRange> sliding_windows(const Volume& v, WindowSpec spec);
std::vector<TraceRange> sliding_windows(int n_traces, WindowSpec spec);

double sample_interval_ns(const AcquisitionMeta& meta, int n_samples);
double depth_of_sample(const AcquisitionMeta& meta, int k, int n_samples);
int sample_of_depth(const AcquisitionMeta& meta, double depth_m, int n_samples);

/// Extrusion half-width along each view's fixed axis.
struct Thickness {
    int c_samples = 4;
    int b_channels = 2;
    int d_traces = 4;

    int for_view(View v) const;
    bool operator==(const Thickness&) const = default;
};

/// Maps a detection box in a view to voxels. The fixed axis is extruded to
/// [index - t, index + t) and clamped to the volume when `dims` is given.
VoxelBox box_from_view(View view, int slice_index, const Box2& bbox, TraceRange window,
                       const Thickness& thickness, const Dims* dims = nullptr);

/// Volumetric IoU.
inline double overlap3d(const VoxelBox& a, const VoxelBox& b) { return iou(a, b); }

void save_volume(const std::filesystem::path& path, const Volume& v);
Volume load_volume(const std::filesystem::path& path);
std::string encode_volume(const Volume& v);
Volume decode_volume(std::string_view bytes);

}  // namespace gprxv
