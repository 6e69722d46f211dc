#pragma once

#include <vector>

#include <Eigen/Core>

#include "headfit/mesh.hpp"

namespace headfit {

/// Minimum camera-frame depth in millimetres. Points at or below this depth
/// cannot be projected.
inline constexpr double kMinCameraDepth = 1.0;

/// Extrinsic camera pose: Euler angles in radians plus a world translation in
/// millimetres. A world point p maps to camera coordinates R * (p + t).
struct CameraPose {
    double roll = 0.0;  // about camera z
    double pitch = 0.0; // about camera x
    double yaw = 0.0;   // about camera y
    Eigen::Vector3d t = Eigen::Vector3d::Zero();

    CameraPose() = default;
    /// Throws InvalidArgument unless all angles are finite with |angle| < pi.
    CameraPose(double roll, double pitch, double yaw, const Eigen::Vector3d& t);
};

/// Pinhole intrinsics: focal length and principal point in pixels.
struct Intrinsics {
    double f = 0.0;
    double u0 = 0.0;
    double v0 = 0.0;

    Intrinsics() = default;
    /// Throws InvalidArgument unless f > 0 and all entries are finite.
    Intrinsics(double f, double u0, double v0);
};

/// Rotation matrix Rz(roll) * Ry(yaw) * Rx(pitch). Orthonormal with det +1.
Eigen::Matrix3d rotation_from_euler(double roll, double pitch, double yaw);
Eigen::Matrix3d rotation_from_euler(const CameraPose& pose);

/// Inverse of rotation_from_euler for |yaw| < pi/2: returns (roll, pitch, yaw)
/// such that rotation_from_euler reproduces R.
Eigen::Vector3d euler_from_rotation(const Eigen::Matrix3d& r);

/// Derivatives of rotation_from_euler with respect to (roll, pitch, yaw).
struct RotationDerivatives {
    Eigen::Matrix3d d_roll;
    Eigen::Matrix3d d_pitch;
    Eigen::Matrix3d d_yaw;
};
RotationDerivatives rotation_derivatives(double roll, double pitch, double yaw);

/// Jacobians of the projected pixel position. Pose columns are ordered
/// (roll, pitch, yaw, tx, ty, tz); intrinsics columns (f, u0, v0).
struct ProjectionJacobians {
    Eigen::Matrix<double, 2, 3> d_point;
    Eigen::Matrix<double, 2, 6> d_pose;
    Eigen::Matrix<double, 2, 3> d_intrinsics;
};

/// Projects a world point to pixel coordinates: a = (f*x/z + u0, f*y/z + v0)
/// with (x, y, z) = R * (p + t). Throws GeometryError when z <= kMinCameraDepth.
Eigen::Vector2d project(const Eigen::Vector3d& p, const CameraPose& pose, const Intrinsics& k);

/// Analytic Jacobians of project at p; exact, no finite differences.
ProjectionJacobians projection_jacobians(const Eigen::Vector3d& p, const CameraPose& pose,
                                         const Intrinsics& k);

/// Pose + intrinsics bundled with cached rotation and rotation derivatives,
/// for per-view inner loops.
class CameraFrame {
public:
    CameraFrame(const CameraPose& pose, const Intrinsics& k);

    const CameraPose& pose() const { return pose_; }
    const Intrinsics& intrinsics() const { return k_; }
    const Eigen::Matrix3d& rotation() const { return r_; }

    Eigen::Vector3d to_camera(const Eigen::Vector3d& p) const { return r_ * (p + pose_.t); }

    /// False when the point is at or behind the near plane.
    bool try_project(const Eigen::Vector3d& p, Eigen::Vector2d& pixel, double& depth) const;

    /// Same as try_project but also fills Jacobians. Returns false behind the
    /// near plane (outputs untouched).
    bool try_project_with_jacobians(const Eigen::Vector3d& p, Eigen::Vector2d& pixel,
                                    double& depth, ProjectionJacobians& jac) const;

private:
    CameraPose pose_;
    Intrinsics k_;
    Eigen::Matrix3d r_;
    RotationDerivatives dr_;
};

/// Per-vertex unit normals: for each vertex the normalized cross products of
/// consecutive one-ring edges are accumulated and the sum normalized. Rings
/// are CCW from outside, so normals point outward. Throws GeometryError
/// listing every vertex whose accumulated normal is degenerate (norm < 1e-12).
Eigen::Matrix3Xd vertex_normals(const HeadMesh& mesh);

/// Derivative of one vertex normal with respect to the positions of the
/// vertices it depends on (itself plus its ring).
struct VertexNormalDerivative {
    std::vector<std::uint32_t> vertex_indices; // self first, then ring order
    std::vector<Eigen::Matrix3d> d_normal;     // same order, each d n / d p_v
};

/// Analytic derivatives of vertex_normals for the listed vertices.
/// normals must be the output of vertex_normals for the same mesh.
std::vector<VertexNormalDerivative> vertex_normal_derivatives(
    const HeadMesh& mesh, const Eigen::Matrix3Xd& normals,
    const std::vector<std::uint32_t>& vertices);

} // namespace headfit
