#include "gprxv/gateway/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace gprxv {

namespace fs = std::filesystem;
using nlohmann::json;

std::int64_t now_ms()
{
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

std::string_view to_string(JobState s)
{
    switch (s) {
        case JobState::Queued: return "queued";
        case JobState::Running: return "running";
        case JobState::Done: return "done";
        case JobState::Failed: return "failed";
    }
    return "?";
}

JobState job_state_from_string(std::string_view s)
{
    for (auto v : {JobState::Queued, JobState::Running, JobState::Done, JobState::Failed}) {
        if (to_string(v) == s) return v;
    }
    throw std::invalid_argument("unknown job state '" + std::string(s) + "'");
}

std::string_view to_string(Verdict v)
{
    switch (v) {
        case Verdict::Confirm: return "confirm";
        case Verdict::Reclassify: return "reclassify";
        case Verdict::Reject: return "reject";
    }
    return "?";
}

Verdict verdict_from_string(std::string_view s)
{
    for (auto v : {Verdict::Confirm, Verdict::Reclassify, Verdict::Reject}) {
        if (to_string(v) == s) return v;
    }
    throw std::invalid_argument("unknown verdict '" + std::string(s) + "'");
}

ReviewState review_state_of(Verdict v)
{
    switch (v) {
        case Verdict::Confirm: return ReviewState::Confirmed;
        case Verdict::Reclassify: return ReviewState::Reclassified;
        case Verdict::Reject: return ReviewState::Rejected;
    }
    return ReviewState::Pending;
}

namespace {

std::string numbered(const char* prefix, std::size_t n)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%04zu", prefix, n);
    return buf;
}

std::string read_file(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    if (!is) throw StoreError("cannot read " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

json volume_json(const VolumeRecord& r)
{
    return {{"id", r.id},
            {"file", r.file},
            {"n_channels", r.dims.n_channels},
            {"n_traces", r.dims.n_traces},
            {"n_samples", r.dims.n_samples},
            {"created_ms", r.created_ms}};
}

VolumeRecord volume_from_json(const json& j)
{
    VolumeRecord r;
    r.id = j.at("id").get<std::string>();
    r.file = j.at("file").get<std::string>();
    r.dims = {j.at("n_channels").get<int>(), j.at("n_traces").get<int>(), j.at("n_samples").get<int>()};
    r.created_ms = j.at("created_ms").get<std::int64_t>();
    return r;
}

json job_json(const JobRecord& r)
{
    return {{"id", r.id},
            {"volume", r.volume_id},
            {"state", std::string(to_string(r.state))},
            {"config", json::parse(r.config)},
            {"created_ms", r.created_ms},
            {"started_ms", r.started_ms},
            {"finished_ms", r.finished_ms},
            {"elapsed_ms", r.elapsed_ms},
            {"n_findings", r.n_findings},
            {"error", r.error}};
}

JobRecord job_from_json(const json& j)
{
    JobRecord r;
    r.id = j.at("id").get<std::string>();
    r.volume_id = j.at("volume").get<std::string>();
    r.state = job_state_from_string(j.at("state").get<std::string>());
    r.config = j.at("config").dump();
    r.created_ms = j.at("created_ms").get<std::int64_t>();
    r.started_ms = j.at("started_ms").get<std::int64_t>();
    r.finished_ms = j.at("finished_ms").get<std::int64_t>();
    r.elapsed_ms = j.at("elapsed_ms").get<std::int64_t>();
    r.n_findings = j.at("n_findings").get<int>();
    r.error = j.at("error").get<std::string>();
    return r;
}

json verdict_json(const ReviewVerdict& v)
{
    json j = {{"finding", v.finding_id},
              {"verdict", std::string(to_string(v.verdict))},
              {"reviewer", v.reviewer},
              {"timestamp_ms", v.timestamp_ms}};
    if (v.corrected) j["corrected_cls"] = std::string(to_string(*v.corrected));
    return j;
}

ReviewVerdict verdict_from_json(const json& j)
{
    ReviewVerdict v;
    v.finding_id = j.at("finding").get<std::string>();
    v.verdict = verdict_from_string(j.at("verdict").get<std::string>());
    v.reviewer = j.at("reviewer").get<std::string>();
    v.timestamp_ms = j.at("timestamp_ms").get<std::int64_t>();
    if (j.contains("corrected_cls")) v.corrected = finding_class_from_string(j.at("corrected_cls").get<std::string>());
    return v;
}

// Parses every non-blank line of a log with `parse`, naming the line on error.
template <typename F>
void for_each_record(const fs::path& p, const std::string& text, F parse)
{
    std::istringstream is(text);
    std::string line;
    for (int n = 1; std::getline(is, line); ++n) {
        if (line.empty()) continue;
        try {
            parse(json::parse(line));
        } catch (const StoreError&) {
            throw;
        } catch (const std::exception& e) {
            throw StoreError(p.string() + ":" + std::to_string(n) + ": " + e.what());
        }
    }
}

bool legal_transition(JobState from, JobState to)
{
    return (from == JobState::Queued && to == JobState::Running) ||
           (from == JobState::Running && (to == JobState::Done || to == JobState::Failed));
}

}  // namespace

Store::Store(fs::path dir) : dir_(std::move(dir)) { open(); }

void Store::open()
{
    std::error_code ec;
    fs::create_directories(dir_ / "volumes", ec);
    fs::create_directories(dir_ / "findings", ec);
    if (ec || !fs::is_directory(dir_ / "volumes") || !fs::is_directory(dir_ / "findings")) {
        throw StoreError("cannot create data directory " + dir_.string() + (ec ? ": " + ec.message() : ""));
    }
    const fs::path probe = dir_ / ".probe.tmp";
    {
        std::ofstream os(probe);
        if (!os) throw StoreError("data directory " + dir_.string() + " is not writable");
    }

    // Temporaries belong to writes that never reached their rename.
    for (const auto& e : fs::recursive_directory_iterator(dir_)) {
        if (e.is_regular_file() && e.path().extension() == ".tmp") fs::remove(e.path());
    }

    auto load_log = [&](const char* name) {
        const fs::path p = dir_ / name;
        return fs::exists(p) ? read_file(p) : std::string();
    };
    volumes_log_ = load_log("volumes.jsonl");
    jobs_log_ = load_log("jobs.jsonl");
    verdicts_log_ = load_log("verdicts.jsonl");

    std::set<std::string> volume_files;
    for_each_record(dir_ / "volumes.jsonl", volumes_log_, [&](const json& j) {
        VolumeRecord r = volume_from_json(j);
        if (r.id != numbered("vol", volumes_.size() + 1)) throw StoreError("volume index out of sequence at " + r.id);
        if (!fs::is_regular_file(dir_ / r.file)) {
            throw StoreError("index/record mismatch: volume " + r.id + " has no container " + r.file);
        }
        volume_files.insert(fs::path(r.file).filename().string());
        volumes_.push_back(std::move(r));
    });
    for (const auto& e : fs::directory_iterator(dir_ / "volumes")) {
        if (!volume_files.count(e.path().filename().string())) fs::remove(e.path());  // upload never indexed
    }

    for_each_record(dir_ / "jobs.jsonl", jobs_log_, [&](const json& j) {
        JobRecord r = job_from_json(j);
        auto it = jobs_.find(r.id);
        if (it == jobs_.end()) {
            if (r.id != numbered("job", job_order_.size() + 1)) throw StoreError("job index out of sequence at " + r.id);
            if (r.state != JobState::Queued) throw StoreError("job " + r.id + " first recorded as " + std::string(to_string(r.state)));
            if (!find_volume(r.volume_id)) throw StoreError("index/record mismatch: job " + r.id + " names unknown volume " + r.volume_id);
            job_order_.push_back(r.id);
            jobs_.emplace(r.id, std::move(r));
        } else {
            if (!legal_transition(it->second.state, r.state)) throw StoreError("illegal state change for job " + r.id);
            it->second = std::move(r);
        }
    });

    for (const auto& e : fs::directory_iterator(dir_ / "findings")) {
        const std::string stem = e.path().stem().string();
        auto it = jobs_.find(stem);
        if (it == jobs_.end() || it->second.state != JobState::Done) fs::remove(e.path());  // never committed
    }
    for (const auto& [id, job] : jobs_) {
        if (job.state != JobState::Done) continue;
        const fs::path p = findings_path(id);
        if (!fs::is_regular_file(p)) throw StoreError("index/record mismatch: job " + id + " is done but " + p.string() + " is missing");
        std::vector<Finding> f;
        try {
            f = import_findings(p);
        } catch (const std::exception& e) {
            throw StoreError(e.what());
        }
        if (int(f.size()) != job.n_findings) {
            throw StoreError("index/record mismatch: job " + id + " records " + std::to_string(job.n_findings) +
                             " findings but " + p.string() + " holds " + std::to_string(f.size()));
        }
        findings_.emplace(id, std::move(f));
    }

    for_each_record(dir_ / "verdicts.jsonl", verdicts_log_, [&](const json& j) {
        ReviewVerdict v = verdict_from_json(j);
        if (!has_finding(v.finding_id)) {
            throw StoreError("index/record mismatch: verdict for unknown finding " + v.finding_id);
        }
        verdicts_.push_back(std::move(v));
    });
    fs::remove(probe);
}

void Store::commit(const fs::path& target, const std::string& content)
{
    fs::path tmp = target;
    tmp += ".tmp";
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) throw StoreError("cannot write " + tmp.string() + ": " + std::strerror(errno));
    std::size_t off = 0;
    while (off < content.size()) {
        const ssize_t n = ::write(fd, content.data() + off, content.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            const int err = errno;
            ::close(fd);
            throw StoreError("write to " + tmp.string() + " failed: " + std::strerror(err));
        }
        off += std::size_t(n);
    }
    if (::fsync(fd) != 0 || ::close(fd) != 0) throw StoreError("cannot flush " + tmp.string());
    if (before_rename) before_rename(tmp, target);
    fs::rename(tmp, target);
}

void Store::append(const fs::path& target, std::string& cache, const std::string& line)
{
    std::string next = cache + line + '\n';
    commit(target, next);
    cache = std::move(next);
}

std::string Store::add_volume(const Volume& v)
{
    std::unique_lock lock(mu_);
    VolumeRecord r;
    r.id = numbered("vol", volumes_.size() + 1);
    r.file = "volumes/" + r.id + ".gpr";
    r.dims = v.dims();
    r.created_ms = now_ms();
    commit(dir_ / r.file, encode_volume(v));
    append(dir_ / "volumes.jsonl", volumes_log_, volume_json(r).dump());
    volumes_.push_back(r);
    return r.id;
}

std::vector<VolumeRecord> Store::volumes() const
{
    std::shared_lock lock(mu_);
    return volumes_;
}

const VolumeRecord* Store::find_volume(const std::string& id) const
{
    for (const auto& r : volumes_) {
        if (r.id == id) return &r;
    }
    return nullptr;
}

std::optional<VolumeRecord> Store::volume(const std::string& id) const
{
    std::shared_lock lock(mu_);
    const auto* r = find_volume(id);
    return r ? std::optional<VolumeRecord>(*r) : std::nullopt;
}

Volume Store::load_volume(const std::string& id) const
{
    std::string file;
    {
        std::shared_lock lock(mu_);
        const auto* r = find_volume(id);
        if (!r) throw std::out_of_range("unknown volume " + id);
        file = r->file;
    }
    return gprxv::load_volume(dir_ / file);
}

std::string Store::add_job(const std::string& volume_id, const std::string& config)
{
    std::unique_lock lock(mu_);
    if (!find_volume(volume_id)) throw std::out_of_range("unknown volume " + volume_id);
    JobRecord r;
    r.id = numbered("job", job_order_.size() + 1);
    r.volume_id = volume_id;
    r.config = json::parse(config).dump();
    r.created_ms = now_ms();
    append(dir_ / "jobs.jsonl", jobs_log_, job_json(r).dump());
    job_order_.push_back(r.id);
    jobs_.emplace(r.id, r);
    return r.id;
}

void Store::update_job(const JobRecord& job)
{
    std::unique_lock lock(mu_);
    auto it = jobs_.find(job.id);
    if (it == jobs_.end()) throw std::out_of_range("unknown job " + job.id);
    if (!legal_transition(it->second.state, job.state)) {
        throw std::logic_error("job " + job.id + " cannot go from " + std::string(to_string(it->second.state)) +
                               " to " + std::string(to_string(job.state)));
    }
    if (job.state == JobState::Done) throw std::logic_error("use complete_job to finish a job");
    append(dir_ / "jobs.jsonl", jobs_log_, job_json(job).dump());
    it->second = job;
}

void Store::complete_job(JobRecord job, std::span<const Finding> findings)
{
    std::unique_lock lock(mu_);
    auto it = jobs_.find(job.id);
    if (it == jobs_.end()) throw std::out_of_range("unknown job " + job.id);
    if (!legal_transition(it->second.state, JobState::Done)) throw std::logic_error("job " + job.id + " is not running");
    job.state = JobState::Done;
    job.n_findings = int(findings.size());
    commit(findings_path(job.id), findings_to_text(findings));
    append(dir_ / "jobs.jsonl", jobs_log_, job_json(job).dump());
    it->second = job;
    findings_[job.id] = std::vector<Finding>(findings.begin(), findings.end());
}

std::vector<JobRecord> Store::jobs() const
{
    std::shared_lock lock(mu_);
    std::vector<JobRecord> out;
    for (const auto& id : job_order_) out.push_back(jobs_.at(id));
    return out;
}

std::optional<JobRecord> Store::job(const std::string& id) const
{
    std::shared_lock lock(mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second;
}

std::vector<Finding> Store::findings(const std::string& job_id) const
{
    std::shared_lock lock(mu_);
    auto it = findings_.find(job_id);
    return it == findings_.end() ? std::vector<Finding>{} : it->second;
}

fs::path Store::findings_path(const std::string& job_id) const { return dir_ / "findings" / (job_id + ".jsonl"); }

void Store::add_verdict(const ReviewVerdict& v)
{
    if (v.verdict == Verdict::Reclassify && !v.corrected) throw std::invalid_argument("reclassify needs a class");
    if (v.verdict != Verdict::Reclassify && v.corrected) throw std::invalid_argument("only reclassify carries a class");
    std::unique_lock lock(mu_);
    if (!has_finding(v.finding_id)) throw std::out_of_range("unknown finding " + v.finding_id);
    append(dir_ / "verdicts.jsonl", verdicts_log_, verdict_json(v).dump());
    verdicts_.push_back(v);
}

bool Store::has_finding(const std::string& api_id) const
{
    const auto colon = api_id.find(':');
    if (colon == std::string::npos) return false;
    const auto it = findings_.find(api_id.substr(0, colon));
    if (it == findings_.end()) return false;
    const std::string fid = api_id.substr(colon + 1);
    return std::any_of(it->second.begin(), it->second.end(), [&](const Finding& f) { return f.id == fid; });
}

std::vector<ReviewVerdict> Store::verdicts() const
{
    std::shared_lock lock(mu_);
    return verdicts_;
}

std::vector<ReviewVerdict> Store::verdicts_for(const std::string& finding_id) const
{
    std::shared_lock lock(mu_);
    std::vector<ReviewVerdict> out;
    for (const auto& v : verdicts_) {
        if (v.finding_id == finding_id) out.push_back(v);
    }
    return out;
}

}  // namespace gprxv
