#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gprxv/box.hpp"
#include "gprxv/detect.hpp"
#include "gprxv/volume.hpp"

namespace gprxv {

struct Thresholds {
    double healthy_veto = 0.5;   // tau_h
    double manhole = 0.5;        // tau_m
    double assoc = 0.1;          // tau_assoc, volumetric IoU for clustering
    Thickness thickness;

    void validate() const;
    bool operator==(const Thresholds&) const = default;
};

/// Detections of one volume in canonical order together with their voxel
/// projections. Detection ids are positions in this order.
struct DetectionSet {
    std::vector<Detection> dets;
    std::vector<VoxelBox> boxes;
    std::optional<Dims> dims;

    DetectionSet() = default;
    DetectionSet(std::vector<Detection> detections, const Thickness& thickness,
                 std::optional<Dims> dims = std::nullopt);

    std::size_t size() const { return dets.size(); }
};

/// A 3D cluster of cross-view detections at one location.
struct Candidate {
    int id = 0;
    VoxelBox box;
    std::vector<int> members;                      // detection ids, ascending
    std::array<std::vector<int>, 3> by_view;       // indexed by View
    std::array<std::array<double, 4>, 3> best{};   // [view][label] best member score

    const std::vector<int>& members_in(View v) const { return by_view[std::size_t(v)]; }
    double best_score(View v, Label l) const { return best[std::size_t(v)][std::size_t(l)]; }
};

enum class FindingClass : std::uint8_t { Manhole, Void, Loose, DistressUnspecified };
enum class Stage : std::uint8_t { Step2, Step3 };
enum class ReviewState : std::uint8_t { Pending, Confirmed, Reclassified, Rejected };

std::string_view to_string(FindingClass c);
std::string_view to_string(Stage s);
std::string_view to_string(ReviewState r);
FindingClass finding_class_from_string(std::string_view s);
Stage stage_from_string(std::string_view s);
ReviewState review_state_from_string(std::string_view s);

inline bool is_distress(FindingClass c) { return c != FindingClass::Manhole; }

struct Finding {
    std::string id;
    FindingClass cls = FindingClass::DistressUnspecified;
    double confidence = 0.0;
    VoxelBox box;
    Stage stage = Stage::Step3;
    std::vector<int> members;
    ReviewState review = ReviewState::Pending;
    std::optional<FindingClass> corrected;

    bool operator==(const Finding&) const = default;
};

/// Single-link clustering of non-healthy detections by volumetric IoU.
std::vector<Candidate> associate(const DetectionSet& set, double tau_assoc);

struct SiftResult {
    std::vector<Candidate> kept;
    std::vector<Candidate> sifted;
};

/// Step 1: drop candidates the C view confidently calls healthy, unless any
/// non-healthy C evidence overlaps them. `c_ids` index into `set`.
SiftResult step1_sift_healthy(std::vector<Candidate> cands, const DetectionSet& set, std::span<const int> c_ids,
                              double tau_h);

struct ManholeResult {
    std::vector<Candidate> distress;
    std::vector<Finding> manholes;
};

/// Step 2: candidates with a B manhole score >= tau_m become manhole findings.
ManholeResult step2_filter_manholes(std::vector<Candidate> cands, const DetectionSet& set,
                                    std::span<const int> b_ids, double tau_m);

/// Step 3: void/loose from the D view, falling back to C, else unspecified.
std::vector<Finding> step3_classify(std::vector<Candidate> cands, const DetectionSet& set,
                                    std::span<const int> d_ids, std::span<const int> c_ids = {});

/// Every intermediate of one cross-verification run.
struct FusionTrace {
    DetectionSet set;
    std::vector<Candidate> candidates;
    std::vector<Candidate> kept;
    std::vector<Candidate> sifted;
    std::vector<Finding> manholes;
    std::vector<Candidate> distress;
    std::vector<Finding> findings;  // final, sorted, ids assigned
};

FusionTrace cross_verify_trace(std::vector<Detection> dets, const Thresholds& th,
                               std::optional<Dims> dims = std::nullopt);
std::vector<Finding> cross_verify(std::vector<Detection> dets, const Thresholds& th,
                                  std::optional<Dims> dims = std::nullopt);

/// Line-delimited finding records.
std::string finding_to_line(const Finding& f);
Finding finding_from_line(std::string_view line);
std::string findings_to_text(std::span<const Finding> findings);
std::vector<Finding> import_findings(const std::filesystem::path& path);
void export_findings(std::span<const Finding> findings, const std::filesystem::path& path);

}  // namespace gprxv
