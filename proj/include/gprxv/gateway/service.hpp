#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gprxv/fuse.hpp"
#include "gprxv/gateway/store.hpp"
#include "gprxv/pipeline.hpp"

namespace gprxv {

/// A finding as the service presents it: scoped to its job, with the latest
/// review verdict applied.
struct FindingView {
    std::string api_id;  // "<job id>:<finding id>"
    std::string job_id;
    std::string volume_id;
    Finding finding;

    FindingClass effective_class() const
    {
        return finding.corrected ? *finding.corrected : finding.cls;
    }
};

struct FindingFilter {
    std::optional<std::string> volume;
    std::optional<std::string> job;
    std::optional<FindingClass> cls;  // matched against the effective class
    std::optional<ReviewState> review;
};

std::vector<FindingView> collect_findings(const Store& store, const FindingFilter& filter = {});
nlohmann::json finding_view_json(const FindingView& f);

/// Counts per class and per review state plus job timing.
nlohmann::json export_report(const Store& store, const std::optional<std::string>& volume = std::nullopt);
std::string report_text(const nlohmann::json& report);

/// A grayscale slice through the centre of a footprint and the footprint's
/// box in that slice's pixel coordinates.
struct SliceRender {
    View view = View::C;
    int slice_index = 0;
    Box2 box;
    int rows = 0;
    int cols = 0;
    std::string png;
};

SliceRender render_footprint(const Volume& v, const VoxelBox& box, View view);

/// 8-bit grayscale PNG of `img`, min-max normalised (a flat image is black).
std::string encode_png_gray(const Image& img);

struct ServiceOptions {
    std::filesystem::path data_dir;
    int workers = 2;
};

/// HTTP front end over a Store with a bounded pool of pipeline workers.
class Service {
public:
    explicit Service(ServiceOptions opt);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Binds to `port` (0 picks a free one) and returns the bound port.
    int bind(const std::string& host, int port);
    /// Serves until stop(); call after bind().
    void run();
    /// bind() + run() on a background thread.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    void stop();

    /// Queues a pipeline job; throws std::out_of_range for an unknown volume.
    std::string submit_job(const std::string& volume_id, const PipelineConfig& cfg);
    /// Blocks until no job is queued or running.
    void wait_idle();

    Store& store();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace gprxv
