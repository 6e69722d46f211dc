#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "headfit/mesh.hpp"

namespace headfit {

/// Proper rigid motion x -> R x + t.
struct RigidTransform {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
    Eigen::Matrix3Xd apply_points(const Eigen::Matrix3Xd& points) const {
        return (rotation * points).colwise() + translation;
    }
    /// this after other: (this * other)(x) = this(other(x)).
    RigidTransform compose(const RigidTransform& other) const {
        return {rotation * other.rotation, rotation * other.translation + translation};
    }
    RigidTransform inverse() const {
        return {rotation.transpose(), -(rotation.transpose() * translation)};
    }

    /// Throws InvalidArgument unless R^T R = I and det R = +1 within 1e-9.
    void validate() const;
};

/// Closed-form least-squares rigid transform (orthogonal Procrustes via SVD,
/// reflections excluded) mapping recon anchors onto reference anchors:
/// minimizes sum |R q_i + t - p_i|^2. Requires >= 3 non-collinear pairs;
/// throws AlignmentError on degenerate configurations.
RigidTransform coarse_align(const Eigen::Matrix3Xd& reference_anchors,
                            const Eigen::Matrix3Xd& recon_anchors);

struct IcpConfig {
    int max_iterations = 50;
    double min_rmse_improvement = 1e-6; // mm
    double trim_fraction = 0.9;         // keep pairs up to this distance percentile
    double gating_radius = 100.0;       // mm, hard correspondence gate
    double failure_mean_distance = 10.0; // mm, post-hoc failure flag
};

struct IcpResult {
    RigidTransform transform; // maps recon into the reference frame
    int iterations = 0;
    std::vector<double> rmse_history; // trimmed point-to-plane RMSE per iteration
    bool failed = false;
    double mean_distance = 0.0; // mean nearest-neighbor distance at the end
};

/// Point-to-plane ICP from reference vertices to the reconstructed surface:
/// nearest-neighbor pairs through a kd-tree, planes from reference vertex
/// normals, per-iteration trimming at the distance percentile, small-angle
/// linearized solve with step halving so the trimmed RMSE never increases.
/// Throws AlignmentError when no correspondence passes the gate.
IcpResult icp_refine(const HeadMesh& reference, const HeadMesh& recon,
                     const RigidTransform& init, const IcpConfig& config = {});

/// Point-to-plane RMSE between aligned meshes: for each reference vertex,
/// the nearest reconstructed vertex projected onto the reference normal.
double point_to_plane_rmse(const HeadMesh& reference, const HeadMesh& recon);

/// Absolute depth-error statistics (z axis) between aligned meshes.
struct DepthErrorStats {
    double mean = 0.0;
    double stddev = 0.0; // population
    double median = 0.0;
    double delta90 = 0.0; // mean of the largest 10% of absolute errors
};
DepthErrorStats depth_error_stats(const HeadMesh& reference, const HeadMesh& recon);

struct EvalReport {
    double rmse = 0.0;
    DepthErrorStats depth;
    std::size_t n_reference_vertices = 0;
    IcpResult icp;
    RigidTransform coarse;
};

/// Full evaluation pipeline: coarse anchor alignment, ICP refinement, then
/// point-to-plane RMSE and depth statistics on the aligned pair.
EvalReport evaluate_reconstruction(const HeadMesh& reference, const HeadMesh& recon,
                                   const Eigen::Matrix3Xd& reference_anchors,
                                   const Eigen::Matrix3Xd& recon_anchors,
                                   const IcpConfig& config = {});

std::string eval_report_to_json(const EvalReport& report);
void save_eval_report(const EvalReport& report, const std::filesystem::path& path);

/// Aligned-columns text table of the five headline metrics.
std::string eval_report_table(const EvalReport& report);

} // namespace headfit
