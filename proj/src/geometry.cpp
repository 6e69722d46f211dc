#include "headfit/geometry.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <numbers>
#include <sstream>

#include "headfit/error.hpp"

namespace headfit {

namespace {

constexpr double kPi = std::numbers::pi;

void check_angle(double a, const char* name) {
    if (!std::isfinite(a) || std::abs(a) >= kPi)
        throw InvalidArgument(std::string("camera pose: |") + name + "| must be finite and < pi");
}

Eigen::Matrix3d skew(const Eigen::Vector3d& w) {
    Eigen::Matrix3d s;
    s << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
    return s;
}

} // namespace

CameraPose::CameraPose(double roll_, double pitch_, double yaw_, const Eigen::Vector3d& t_)
    : roll(roll_), pitch(pitch_), yaw(yaw_), t(t_) {
    check_angle(roll, "roll");
    check_angle(pitch, "pitch");
    check_angle(yaw, "yaw");
    if (!t.allFinite()) throw InvalidArgument("camera pose: translation must be finite");
}

Intrinsics::Intrinsics(double f_, double u0_, double v0_) : f(f_), u0(u0_), v0(v0_) {
    if (!(std::isfinite(f) && f > 0.0) || !std::isfinite(u0) || !std::isfinite(v0))
        throw InvalidArgument("intrinsics: f must be positive and all entries finite");
}

Eigen::Matrix3d rotation_from_euler(double roll, double pitch, double yaw) {
    const double ca = std::cos(roll), sa = std::sin(roll);
    const double cb = std::cos(yaw), sb = std::sin(yaw);
    const double cc = std::cos(pitch), sc = std::sin(pitch);
    Eigen::Matrix3d rz, ry, rx;
    rz << ca, -sa, 0, sa, ca, 0, 0, 0, 1;
    ry << cb, 0, sb, 0, 1, 0, -sb, 0, cb;
    rx << 1, 0, 0, 0, cc, -sc, 0, sc, cc;
    return rz * ry * rx;
}

Eigen::Matrix3d rotation_from_euler(const CameraPose& pose) {
    return rotation_from_euler(pose.roll, pose.pitch, pose.yaw);
}

Eigen::Vector3d euler_from_rotation(const Eigen::Matrix3d& r) {
    // R = Rz(roll) Ry(yaw) Rx(pitch); R(2,0) = -sin(yaw).
    const double yaw = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
    const double roll = std::atan2(r(1, 0), r(0, 0));
    const double pitch = std::atan2(r(2, 1), r(2, 2));
    return {roll, pitch, yaw};
}

RotationDerivatives rotation_derivatives(double roll, double pitch, double yaw) {
    const double ca = std::cos(roll), sa = std::sin(roll);
    const double cb = std::cos(yaw), sb = std::sin(yaw);
    const double cc = std::cos(pitch), sc = std::sin(pitch);
    Eigen::Matrix3d rz, ry, rx, drz, dry, drx;
    rz << ca, -sa, 0, sa, ca, 0, 0, 0, 1;
    ry << cb, 0, sb, 0, 1, 0, -sb, 0, cb;
    rx << 1, 0, 0, 0, cc, -sc, 0, sc, cc;
    drz << -sa, -ca, 0, ca, -sa, 0, 0, 0, 0;
    dry << -sb, 0, cb, 0, 0, 0, -cb, 0, -sb;
    drx << 0, 0, 0, 0, -sc, -cc, 0, cc, -sc;
    RotationDerivatives d;
    d.d_roll = drz * ry * rx;
    d.d_yaw = rz * dry * rx;
    d.d_pitch = rz * ry * drx;
    return d;
}

CameraFrame::CameraFrame(const CameraPose& pose, const Intrinsics& k)
    : pose_(pose), k_(k), r_(rotation_from_euler(pose)),
      dr_(rotation_derivatives(pose.roll, pose.pitch, pose.yaw)) {}

bool CameraFrame::try_project(const Eigen::Vector3d& p, Eigen::Vector2d& pixel,
                              double& depth) const {
    const Eigen::Vector3d pc = to_camera(p);
    if (!(pc.z() > kMinCameraDepth)) return false;
    pixel = {k_.f * pc.x() / pc.z() + k_.u0, k_.f * pc.y() / pc.z() + k_.v0};
    depth = pc.z();
    return true;
}

bool CameraFrame::try_project_with_jacobians(const Eigen::Vector3d& p, Eigen::Vector2d& pixel,
                                             double& depth, ProjectionJacobians& jac) const {
    const Eigen::Vector3d q = p + pose_.t;
    const Eigen::Vector3d pc = r_ * q;
    if (!(pc.z() > kMinCameraDepth)) return false;
    const double z = pc.z();
    const double inv_z = 1.0 / z;
    // identical arithmetic to try_project so both paths agree bitwise
    pixel = {k_.f * pc.x() / pc.z() + k_.u0, k_.f * pc.y() / pc.z() + k_.v0};
    depth = z;

    Eigen::Matrix<double, 2, 3> d_cam; // d pixel / d camera-frame point
    d_cam << k_.f * inv_z, 0, -k_.f * pc.x() * inv_z * inv_z, 0, k_.f * inv_z,
        -k_.f * pc.y() * inv_z * inv_z;

    jac.d_point = d_cam * r_;
    jac.d_pose.block<2, 1>(0, 0) = d_cam * (dr_.d_roll * q);
    jac.d_pose.block<2, 1>(0, 1) = d_cam * (dr_.d_pitch * q);
    jac.d_pose.block<2, 1>(0, 2) = d_cam * (dr_.d_yaw * q);
    jac.d_pose.block<2, 3>(0, 3) = jac.d_point; // t enters exactly like p
    jac.d_intrinsics << pc.x() * inv_z, 1, 0, pc.y() * inv_z, 0, 1;
    return true;
}

Eigen::Vector2d project(const Eigen::Vector3d& p, const CameraPose& pose, const Intrinsics& k) {
    CameraFrame frame(pose, k);
    Eigen::Vector2d pixel;
    double depth;
    if (!frame.try_project(p, pixel, depth))
        throw GeometryError("project: point at or behind the camera plane");
    return pixel;
}

ProjectionJacobians projection_jacobians(const Eigen::Vector3d& p, const CameraPose& pose,
                                         const Intrinsics& k) {
    CameraFrame frame(pose, k);
    Eigen::Vector2d pixel;
    double depth;
    ProjectionJacobians jac;
    if (!frame.try_project_with_jacobians(p, pixel, depth, jac))
        throw GeometryError("project: point at or behind the camera plane");
    return jac;
}

Eigen::Matrix3Xd vertex_normals(const HeadMesh& mesh) {
    const auto& topo = *mesh.topology;
    const std::size_t n = mesh.vertex_count();
    if (topo.vertex_count() != n)
        throw InvalidArgument("vertex_normals: mesh/topology vertex count mismatch");

    Eigen::Matrix3Xd normals(3, static_cast<Eigen::Index>(n));
    std::vector<std::uint32_t> degenerate;
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::Vector3d p = mesh.vertices.col(static_cast<Eigen::Index>(i));
        const auto ring = topo.ring(i);
        const std::size_t m = ring.size();
        Eigen::Vector3d acc = Eigen::Vector3d::Zero();
        for (std::size_t j = 0; j < m; ++j) {
            const Eigen::Vector3d u = mesh.vertices.col(ring[j]) - p;
            const Eigen::Vector3d v = mesh.vertices.col(ring[(j + 1) % m]) - p;
            const Eigen::Vector3d c = u.cross(v);
            const double norm = c.norm();
            if (norm < 1e-20) continue; // zero-area wedge contributes nothing
            acc += c / norm;
        }
        const double acc_norm = acc.norm();
        if (acc_norm < 1e-12) {
            degenerate.push_back(static_cast<std::uint32_t>(i));
            normals.col(static_cast<Eigen::Index>(i)).setZero();
        } else {
            normals.col(static_cast<Eigen::Index>(i)) = acc / acc_norm;
        }
    }
    if (!degenerate.empty()) {
        std::ostringstream msg;
        msg << "vertex_normals: degenerate one-ring at " << degenerate.size() << " vertices:";
        for (std::size_t i = 0; i < degenerate.size() && i < 16; ++i) msg << ' ' << degenerate[i];
        if (degenerate.size() > 16) msg << " ...";
        throw GeometryError(msg.str());
    }
    return normals;
}

std::vector<VertexNormalDerivative> vertex_normal_derivatives(
    const HeadMesh& mesh, const Eigen::Matrix3Xd& normals,
    const std::vector<std::uint32_t>& vertices) {
    const auto& topo = *mesh.topology;
    std::vector<VertexNormalDerivative> out(vertices.size());

    for (std::size_t vi = 0; vi < vertices.size(); ++vi) {
        const std::uint32_t i = vertices[vi];
        const Eigen::Vector3d p = mesh.vertices.col(i);
        const auto ring = topo.ring(i);
        const std::size_t m = ring.size();

        VertexNormalDerivative& d = out[vi];
        d.vertex_indices.resize(m + 1);
        d.vertex_indices[0] = i;
        for (std::size_t j = 0; j < m; ++j) d.vertex_indices[j + 1] = ring[j];
        d.d_normal.assign(m + 1, Eigen::Matrix3d::Zero());

        // n = acc / |acc| with acc = sum_j c_j / |c_j|, c_j = u_j x v_j,
        // u_j = q_j - p, v_j = q_{j+1} - p. Accumulate d acc / d vertex first.
        Eigen::Vector3d acc = Eigen::Vector3d::Zero();
        for (std::size_t j = 0; j < m; ++j) {
            const Eigen::Vector3d u = mesh.vertices.col(ring[j]) - p;
            const Eigen::Vector3d v = mesh.vertices.col(ring[(j + 1) % m]) - p;
            const Eigen::Vector3d c = u.cross(v);
            const double norm = c.norm();
            if (norm < 1e-20) continue;
            const Eigen::Vector3d chat = c / norm;
            acc += chat;
            // d(c/|c|) = (I - chat chat^T)/|c| dc, dc = -[v]x du + [u]x dv
            const Eigen::Matrix3d proj = (Eigen::Matrix3d::Identity() - chat * chat.transpose()) / norm;
            const Eigen::Matrix3d d_u = proj * (-skew(v));
            const Eigen::Matrix3d d_v = proj * skew(u);
            d.d_normal[j + 1] += d_u;                  // q_j
            d.d_normal[(j + 1) % m + 1] += d_v;        // q_{j+1}
            d.d_normal[0] -= d_u + d_v;                // p appears in both edges
        }
        const double acc_norm = acc.norm();
        if (acc_norm < 1e-12)
            throw GeometryError("vertex_normal_derivatives: degenerate one-ring at vertex " +
                                std::to_string(i));
        const Eigen::Vector3d n = normals.col(i);
        const Eigen::Matrix3d outer =
            (Eigen::Matrix3d::Identity() - n * n.transpose()) / acc_norm;
        for (auto& block : d.d_normal) block = outer * block;
    }
    return out;
}

} // namespace headfit
