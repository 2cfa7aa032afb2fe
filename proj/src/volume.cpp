#include "gprxv/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace gprxv {

namespace {

constexpr std::string_view kMagic = "GPRVOL1 ";

void require(bool cond, const std::string& what)
{
    if (!cond) throw std::invalid_argument(what);
}

std::string index_msg(const char* axis, int i, int n)
{
    std::ostringstream os;
    os << axis << " index " << i << " out of range [0, " << n << ")";
    return os.str();
}

void check_index(const char* axis, int i, int n)
{
    if (i < 0 || i >= n) throw std::out_of_range(index_msg(axis, i, n));
}

// Payload is little-endian IEEE-754 regardless of host order.
std::uint32_t to_le(std::uint32_t u)
{
    if constexpr (std::endian::native == std::endian::big) {
        u = ((u & 0xFF000000u) >> 24) | ((u & 0x00FF0000u) >> 8) | ((u & 0x0000FF00u) << 8) |
            ((u & 0x000000FFu) << 24);
    }
    return u;
}

}  // namespace

std::string_view to_string(View v)
{
    switch (v) {
        case View::B: return "B";
        case View::C: return "C";
        case View::D: return "D";
    }
    return "?";
}

View view_from_string(std::string_view s)
{
    if (s == "B") return View::B;
    if (s == "C") return View::C;
    if (s == "D") return View::D;
    throw std::invalid_argument("unknown view '" + std::string(s) + "'");
}

double AcquisitionMeta::channel_spacing_m(int n_channels) const
{
    return transverse_extent_m / double(std::max(n_channels - 1, 1));
}

void AcquisitionMeta::validate() const
{
    auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
    require(positive(time_range_ns), "time_range_ns must be > 0");
    require(positive(max_depth_m), "max_depth_m must be > 0");
    require(positive(trace_spacing_m), "trace_spacing_m must be > 0");
    require(positive(transverse_extent_m), "transverse_extent_m must be > 0");
    require(positive(velocity_m_per_ns), "velocity_m_per_ns must be > 0");
    require(std::isfinite(min_freq_mhz) && std::isfinite(max_freq_mhz) && min_freq_mhz < max_freq_mhz,
            "min_freq_mhz must be < max_freq_mhz");
}

Volume::Volume(Dims dims, AcquisitionMeta meta) : Volume(dims, meta, std::vector<float>(
                                                      dims.n_channels > 0 && dims.n_traces > 0 && dims.n_samples > 0
                                                          ? std::size_t(dims.size())
                                                          : 0))
{
}

Volume::Volume(Dims dims, AcquisitionMeta meta, std::vector<float> amplitudes)
    : dims_(dims), meta_(meta), data_(std::move(amplitudes))
{
    require(dims_.n_channels >= 1 && dims_.n_traces >= 1 && dims_.n_samples >= 1,
            "volume dimensions must be >= 1");
    meta_.validate();
    if (std::int64_t(data_.size()) != dims_.size()) {
        std::ostringstream os;
        os << "payload holds " << data_.size() << " values, dimensions require " << dims_.size();
        throw FormatError(os.str());
    }
    for (float a : data_) {
        if (!std::isfinite(a)) throw FormatError("non-finite amplitude in volume");
    }
}

std::span<const float> Volume::trace(int c, int x) const
{
    check_index("channel", c, dims_.n_channels);
    check_index("trace", x, dims_.n_traces);
    return std::span<const float>(data_).subspan(offset(c, x, 0), std::size_t(dims_.n_samples));
}

std::span<float> Volume::trace(int c, int x)
{
    check_index("channel", c, dims_.n_channels);
    check_index("trace", x, dims_.n_traces);
    return std::span<float>(data_).subspan(offset(c, x, 0), std::size_t(dims_.n_samples));
}

std::pair<std::string_view, std::string_view> SliceImage::axis_labels() const
{
    switch (view) {
        case View::B: return {"sample", "trace"};
        case View::C: return {"channel", "trace"};
        case View::D: return {"sample", "channel"};
    }
    return {"", ""};
}

WindowSpec WindowSpec::clamped_to(int n_traces) const
{
    WindowSpec w = *this;
    w.length_traces = std::min(w.length_traces, n_traces);
    w.stride_traces = std::min(w.stride_traces, w.length_traces);
    return w;
}

Eigen::VectorXf a_scan(const Volume& v, int c, int x)
{
    auto t = v.trace(c, x);
    return Eigen::Map<const Eigen::VectorXf>(t.data(), Eigen::Index(t.size()));
}

// The storage is column-major with the sample axis innermost, so every slice
// is a strided view of the payload.
using StridedMap = Eigen::Map<const Image, 0, Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>>;
using Strides = Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>;

SliceImage b_scan(const Volume& v, int c)
{
    check_index("channel", c, v.n_channels());
    const Eigen::Index S = v.n_samples(), T = v.n_traces();
    const float* base = v.data().data() + std::size_t(c) * T * S;
    StridedMap m(base, S, T, Strides(S, 1));
    return {View::B, c, Image(m), {0, v.n_traces()}};
}

SliceImage c_scan(const Volume& v, int k)
{
    check_index("sample", k, v.n_samples());
    const Eigen::Index S = v.n_samples(), T = v.n_traces(), C = v.n_channels();
    StridedMap m(v.data().data() + k, C, T, Strides(S, T * S));
    return {View::C, k, Image(m), {0, v.n_traces()}};
}

SliceImage d_scan(const Volume& v, int x)
{
    check_index("trace", x, v.n_traces());
    const Eigen::Index S = v.n_samples(), T = v.n_traces(), C = v.n_channels();
    StridedMap m(v.data().data() + std::size_t(x) * S, S, C, Strides(T * S, 1));
    return {View::D, x, Image(m), {0, v.n_traces()}};
}

SliceImage crop_traces(const SliceImage& img, TraceRange window)
{
    if (img.view == View::D) return img;
    require(window.x0 >= img.window.x0 && window.x1 <= img.window.x1 && window.length() >= 1,
            "crop window outside slice");
    SliceImage out{img.view, img.index, img.pixels.middleCols(window.x0 - img.window.x0, window.length()),
                   window};
    return out;
}

std::vector<TraceRange> sliding_windows(const Volume& v, WindowSpec spec)
{
    return sliding_windows(v.n_traces(), spec);
}

std::vector<TraceRange> sliding_windows(int n_traces, WindowSpec spec)
{
    if (!(spec.stride_traces >= 1 && spec.stride_traces <= spec.length_traces &&
          spec.length_traces <= n_traces)) {
        std::ostringstream os;
        os << "window spec (length " << spec.length_traces << ", stride " << spec.stride_traces
           << ") invalid for " << n_traces << " traces";
        throw std::invalid_argument(os.str());
    }
    std::vector<TraceRange> out;
    int x0 = 0;
    for (;;) {
        if (x0 + spec.length_traces >= n_traces) {
            out.push_back({n_traces - spec.length_traces, n_traces});
            break;
        }
        out.push_back({x0, x0 + spec.length_traces});
        x0 += spec.stride_traces;
    }
    return out;
}

double sample_interval_ns(const AcquisitionMeta& meta, int n_samples)
{
    return meta.time_range_ns / double(std::max(n_samples - 1, 1));
}

double depth_of_sample(const AcquisitionMeta& meta, int k, int n_samples)
{
    check_index("sample", k, n_samples);
    const double t = k * sample_interval_ns(meta, n_samples);
    return meta.velocity_m_per_ns * t / 2.0;
}

int sample_of_depth(const AcquisitionMeta& meta, double depth_m, int n_samples)
{
    if (!(depth_m >= 0.0 && depth_m <= meta.max_depth_m)) {
        std::ostringstream os;
        os << "depth " << depth_m << " m outside [0, " << meta.max_depth_m << "]";
        throw std::out_of_range(os.str());
    }
    const double t = 2.0 * depth_m / meta.velocity_m_per_ns;
    const long k = std::lround(t / sample_interval_ns(meta, n_samples));
    return int(std::clamp(k, 0L, long(n_samples - 1)));
}

int Thickness::for_view(View v) const
{
    switch (v) {
        case View::B: return b_channels;
        case View::C: return c_samples;
        case View::D: return d_traces;
    }
    return 1;
}

VoxelBox box_from_view(View view, int slice_index, const Box2& bbox, TraceRange window,
                       const Thickness& thickness, const Dims* dims)
{
    if (bbox.empty() || bbox.r0 < 0 || bbox.c0 < 0) throw std::out_of_range("detection box empty or negative");
    const int t = thickness.for_view(view);
    require(t >= 1, "thickness must be >= 1");

    int n_rows = -1, n_cols = -1, n_fixed = -1;
    if (dims) {
        switch (view) {
            case View::B: n_rows = dims->n_samples, n_cols = window.length(), n_fixed = dims->n_channels; break;
            case View::C: n_rows = dims->n_channels, n_cols = window.length(), n_fixed = dims->n_samples; break;
            case View::D: n_rows = dims->n_samples, n_cols = dims->n_channels, n_fixed = dims->n_traces; break;
        }
        if (bbox.r1 > n_rows || bbox.c1 > n_cols) throw std::out_of_range("detection box outside slice");
        if (slice_index < 0 || slice_index >= n_fixed) throw std::out_of_range("slice index outside volume");
    } else if (view != View::D && bbox.c1 > window.length()) {
        throw std::out_of_range("detection box outside window");
    }

    int lo = std::max(slice_index - t, 0);
    int hi = slice_index + t;
    if (n_fixed > 0) hi = std::min(hi, n_fixed);

    VoxelBox vb;
    switch (view) {
        case View::B:
            vb = {lo, hi, bbox.c0 + window.x0, bbox.c1 + window.x0, bbox.r0, bbox.r1};
            break;
        case View::C:
            vb = {bbox.r0, bbox.r1, bbox.c0 + window.x0, bbox.c1 + window.x0, lo, hi};
            break;
        case View::D:
            vb = {bbox.c0, bbox.c1, lo, hi, bbox.r0, bbox.r1};
            break;
    }
    return vb;
}

std::string encode_volume(const Volume& v)
{
    const auto& m = v.meta();
    nlohmann::json h = {
        {"n_channels", v.n_channels()},     {"n_traces", v.n_traces()},
        {"n_samples", v.n_samples()},       {"time_range_ns", m.time_range_ns},
        {"max_depth_m", m.max_depth_m},     {"trace_spacing_m", m.trace_spacing_m},
        {"transverse_extent_m", m.transverse_extent_m},
        {"velocity_m_per_ns", m.velocity_m_per_ns},
        {"min_freq_mhz", m.min_freq_mhz},   {"max_freq_mhz", m.max_freq_mhz},
    };
    std::string out(kMagic);
    out += h.dump();
    out += '\n';
    const std::size_t header = out.size();
    out.resize(header + v.data().size() * 4);
    char* dst = out.data() + header;
    for (float a : v.data()) {
        const std::uint32_t u = to_le(std::bit_cast<std::uint32_t>(a));
        std::memcpy(dst, &u, 4);
        dst += 4;
    }
    return out;
}

Volume decode_volume(std::string_view bytes)
{
    if (bytes.substr(0, kMagic.size()) != kMagic) throw FormatError("missing GPRVOL1 header");
    const auto nl = bytes.find('\n');
    if (nl == std::string_view::npos) throw FormatError("unterminated header line");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(bytes.substr(kMagic.size(), nl - kMagic.size()));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed header: ") + e.what());
    }

    static constexpr std::string_view kKeys[] = {
        "n_channels",      "n_traces",          "n_samples",    "time_range_ns", "max_depth_m",
        "trace_spacing_m", "transverse_extent_m", "velocity_m_per_ns", "min_freq_mhz", "max_freq_mhz"};
    if (!h.is_object() || h.size() != std::size(kKeys)) throw FormatError("malformed header: wrong key set");
    for (auto key : kKeys) {
        auto it = h.find(std::string(key));
        if (it == h.end() || !it->is_number()) {
            throw FormatError("malformed header: missing or non-numeric '" + std::string(key) + "'");
        }
    }
    for (auto key : {"n_channels", "n_traces", "n_samples"}) {
        if (!h[key].is_number_integer() || h[key].get<long long>() < 1) {
            throw FormatError(std::string("malformed header: ") + key + " must be a positive integer");
        }
    }

    Dims dims{h["n_channels"].get<int>(), h["n_traces"].get<int>(), h["n_samples"].get<int>()};
    AcquisitionMeta m;
    m.time_range_ns = h["time_range_ns"].get<double>();
    m.max_depth_m = h["max_depth_m"].get<double>();
    m.trace_spacing_m = h["trace_spacing_m"].get<double>();
    m.transverse_extent_m = h["transverse_extent_m"].get<double>();
    m.velocity_m_per_ns = h["velocity_m_per_ns"].get<double>();
    m.min_freq_mhz = h["min_freq_mhz"].get<double>();
    m.max_freq_mhz = h["max_freq_mhz"].get<double>();
    try {
        m.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("malformed header: ") + e.what());
    }

    const auto payload = bytes.substr(nl + 1);
    if (payload.size() % 4 != 0 || std::int64_t(payload.size() / 4) != dims.size()) {
        std::ostringstream os;
        os << "payload size mismatch: header declares " << dims.n_channels << "x" << dims.n_traces << "x"
           << dims.n_samples << " = " << dims.size() << " values, file holds " << payload.size() / 4
           << (payload.size() % 4 ? " (+ trailing bytes)" : "");
        throw FormatError(os.str());
    }
    std::vector<float> data(payload.size() / 4);
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::uint32_t u;
        std::memcpy(&u, payload.data() + 4 * i, 4);
        data[i] = std::bit_cast<float>(to_le(u));
    }
    return Volume(dims, m, std::move(data));
}

void save_volume(const std::filesystem::path& path, const Volume& v)
{
    const std::string bytes = encode_volume(v);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(bytes.data(), std::streamsize(bytes.size()));
    if (!os) throw std::runtime_error("short write to " + path.string());
}

Volume load_volume(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string() + ": " + std::strerror(errno));
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    try {
        return decode_volume(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace gprxv
