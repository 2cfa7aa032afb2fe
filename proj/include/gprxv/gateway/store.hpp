#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gprxv/fuse.hpp"
#include "gprxv/volume.hpp"

namespace gprxv {

/// The data directory is unusable or inconsistent.
struct StoreError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct VolumeRecord {
    std::string id;
    std::string file;  // relative to the data directory
    Dims dims;
    std::int64_t created_ms = 0;
};

enum class JobState : std::uint8_t { Queued, Running, Done, Failed };
std::string_view to_string(JobState s);
JobState job_state_from_string(std::string_view s);

struct JobRecord {
    std::string id;
    std::string volume_id;
    JobState state = JobState::Queued;
    std::string config;  // PipelineConfig JSON
    std::int64_t created_ms = 0;
    std::int64_t started_ms = 0;
    std::int64_t finished_ms = 0;
    std::int64_t elapsed_ms = 0;
    int n_findings = 0;
    std::string error;
};

enum class Verdict : std::uint8_t { Confirm, Reclassify, Reject };
std::string_view to_string(Verdict v);
Verdict verdict_from_string(std::string_view s);
ReviewState review_state_of(Verdict v);

struct ReviewVerdict {
    std::string finding_id;  // "<job id>:<finding id>"
    Verdict verdict = Verdict::Confirm;
    std::optional<FindingClass> corrected;
    std::string reviewer;
    std::int64_t timestamp_ms = 0;
};

std::int64_t now_ms();

/// Local persistence: volume containers plus line-delimited job, verdict and
/// finding records. Every write replaces a file through a temporary and a
/// rename, so a crash leaves either the old or the new content.
class Store {
public:
    explicit Store(std::filesystem::path dir);

    const std::filesystem::path& dir() const { return dir_; }

    std::string add_volume(const Volume& v);
    std::vector<VolumeRecord> volumes() const;
    std::optional<VolumeRecord> volume(const std::string& id) const;
    Volume load_volume(const std::string& id) const;

    std::string add_job(const std::string& volume_id, const std::string& config);
    /// Appends a new revision of an existing job; the state change must be legal.
    void update_job(const JobRecord& job);
    std::vector<JobRecord> jobs() const;
    std::optional<JobRecord> job(const std::string& id) const;

    /// Writes the findings file of a job, then marks the job done.
    void complete_job(JobRecord job, std::span<const Finding> findings);
    std::vector<Finding> findings(const std::string& job_id) const;
    std::filesystem::path findings_path(const std::string& job_id) const;

    void add_verdict(const ReviewVerdict& v);
    std::vector<ReviewVerdict> verdicts() const;
    std::vector<ReviewVerdict> verdicts_for(const std::string& finding_id) const;

    /// Called after a temporary file is fully written and before it is renamed
    /// into place. Tests use it to simulate a crash.
    std::function<void(const std::filesystem::path& tmp, const std::filesystem::path& target)> before_rename;

private:
    void open();
    const VolumeRecord* find_volume(const std::string& id) const;
    bool has_finding(const std::string& api_id) const;
    void commit(const std::filesystem::path& target, const std::string& content);
    void append(const std::filesystem::path& target, std::string& cache, const std::string& line);

    std::filesystem::path dir_;
    mutable std::shared_mutex mu_;
    std::string volumes_log_, jobs_log_, verdicts_log_;
    std::vector<VolumeRecord> volumes_;
    std::map<std::string, JobRecord> jobs_;
    std::vector<std::string> job_order_;
    std::vector<ReviewVerdict> verdicts_;
    std::map<std::string, std::vector<Finding>> findings_;
};

}  // namespace gprxv
