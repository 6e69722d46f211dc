#include "headfit/fit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <json.hpp>

#include "headfit/error.hpp"
#include "headfit/parallel.hpp"

namespace headfit {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Catmull-Rom weights for taps at offsets {-1, 0, 1, 2}, local coordinate
// t in [0, 1), plus their derivatives in t.
void catmull_rom(double t, double w[4], double dw[4]) {
    const double t2 = t * t, t3 = t2 * t;
    w[0] = -0.5 * t3 + t2 - 0.5 * t;
    w[1] = 1.5 * t3 - 2.5 * t2 + 1.0;
    w[2] = -1.5 * t3 + 2.0 * t2 + 0.5 * t;
    w[3] = 0.5 * t3 - 0.5 * t2;
    dw[0] = -1.5 * t2 + 2.0 * t - 0.5;
    dw[1] = 4.5 * t2 - 5.0 * t;
    dw[2] = -4.5 * t2 + 4.0 * t + 0.5;
    dw[3] = 1.5 * t2 - t;
}

int clamp_index(int i, int n) { return std::clamp(i, 0, n - 1); }

// CameraFrame over raw parameters; pose construction limits (|angle| < pi)
// apply only to final results, not to intermediate solver states.
CameraFrame frame_from_raw(const Eigen::VectorXd& x, Eigen::Index pose_offset, const Intrinsics& k) {
    CameraPose pose;
    pose.roll = x[pose_offset];
    pose.pitch = x[pose_offset + 1];
    pose.yaw = x[pose_offset + 2];
    pose.t = x.segment<3>(pose_offset + 3);
    return {pose, k};
}

double wrap_angle(double a) {
    double w = std::remainder(a, 2.0 * std::numbers::pi);
    if (std::abs(w) >= std::numbers::pi)
        w = std::copysign(std::nextafter(std::numbers::pi, 0.0), w);
    return w;
}

} // namespace

BicubicSample sample_normal_bicubic(const NormalMap& map, const Eigen::Vector2d& pixel) {
    BicubicSample out;
    if (!pixel.allFinite() || map.width <= 0 || map.height <= 0) return out;

    // Grid coordinates with pixel centers at integers.
    const double gx = pixel.x() - 0.5;
    const double gy = pixel.y() - 0.5;

    // Validity weight: bilinear interpolation of the mask, zero-padded.
    {
        const int jx = static_cast<int>(std::floor(gx));
        const int jy = static_cast<int>(std::floor(gy));
        const double tx = gx - jx, ty = gy - jy;
        const double bx[2] = {1.0 - tx, tx}, by[2] = {1.0 - ty, ty};
        const double dbx[2] = {-1.0, 1.0}, dby[2] = {-1.0, 1.0};
        double w = 0.0, dwdu = 0.0, dwdv = 0.0;
        for (int ry = 0; ry < 2; ++ry)
            for (int rx = 0; rx < 2; ++rx) {
                const int px = jx + rx, py = jy + ry;
                if (px < 0 || px >= map.width || py < 0 || py >= map.height) continue;
                const double m = map.mask[map.index(px, py)] ? 1.0 : 0.0;
                w += bx[rx] * by[ry] * m;
                dwdu += dbx[rx] * by[ry] * m;
                dwdv += bx[rx] * dby[ry] * m;
            }
        out.weight = w;
        out.d_weight = {dwdu, dwdv};
    }

    const int ix = static_cast<int>(std::floor(gx));
    const int iy = static_cast<int>(std::floor(gy));
    double wx[4], dwx[4], wy[4], dwy[4];
    catmull_rom(gx - ix, wx, dwx);
    catmull_rom(gy - iy, wy, dwy);

    Eigen::Vector3d value = Eigen::Vector3d::Zero();
    Eigen::Vector3d du = Eigen::Vector3d::Zero();
    Eigen::Vector3d dv = Eigen::Vector3d::Zero();
    for (int ry = 0; ry < 4; ++ry) {
        const int py = clamp_index(iy - 1 + ry, map.height);
        for (int rx = 0; rx < 4; ++rx) {
            const int px = clamp_index(ix - 1 + rx, map.width);
            const Eigen::Vector3d& p = map.normals[map.index(px, py)];
            value += (wx[rx] * wy[ry]) * p;
            du += (dwx[rx] * wy[ry]) * p;
            dv += (wx[rx] * dwy[ry]) * p;
        }
    }

    const double norm = value.norm();
    if (norm < 1e-12) {
        out.weight = 0.0;
        out.d_weight.setZero();
        return out; // arbitrary unit normal, zero validity
    }
    out.normal = value / norm;
    const Eigen::Matrix3d proj =
        (Eigen::Matrix3d::Identity() - out.normal * out.normal.transpose()) / norm;
    out.d_normal.col(0) = proj * du;
    out.d_normal.col(1) = proj * dv;
    return out;
}

void FitWeights::validate() const {
    if (!(normals >= 0.0) || !(landmarks >= 0.0) || !(prior >= 0.0))
        throw InvalidArgument("fit weights must be non-negative");
    if (normals == 0.0 && landmarks == 0.0 && prior == 0.0)
        throw InvalidArgument("fit weights must not all be zero");
}

void SolverConfig::validate() const {
    if (max_iterations <= 0 || visibility_refresh_interval <= 0 ||
        !(gradient_tolerance > 0.0) || !(parameter_tolerance > 0.0) ||
        !(initial_damping > 0.0) || !(damping_increase > 1.0) ||
        !(damping_decrease > 0.0 && damping_decrease < 1.0) || !(min_damping > 0.0) ||
        !(max_damping > min_damping))
        throw InvalidArgument("solver config entries must be positive and consistent");
}

void ViewObservation::validate() const {
    if (normal_map.width <= 0 || normal_map.height <= 0 ||
        normal_map.normals.size() != static_cast<std::size_t>(normal_map.width) * normal_map.height)
        throw InvalidArgument("view observation: empty or inconsistent normal map");
    if (landmarks.detections.empty())
        throw InvalidArgument("view observation: empty landmark map");
    if (!(k0.f > 0.0)) throw InvalidArgument("view observation: intrinsics prior needs f > 0");
    if (std::abs(k0.u0) > 4.0 * normal_map.width || std::abs(k0.v0) > 4.0 * normal_map.height)
        throw InvalidArgument("view observation: principal point outside 4x image bounds");
}

Intrinsics default_intrinsics_prior(int width, int height) {
    if (width <= 0 || height <= 0) throw InvalidArgument("intrinsics prior: bad image size");
    return {1.2 * std::max(width, height), 0.5 * width, 0.5 * height};
}

std::vector<std::uint32_t> visible_vertices(const HeadMesh& mesh, const Eigen::Matrix3Xd& normals,
                                            const CameraPose& pose, const Intrinsics& k,
                                            const NormalMap& map) {
    CameraFrame camera(pose, k);
    std::vector<std::uint32_t> visible;
    const std::size_t n = mesh.vertex_count();
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::Vector3d p = mesh.vertices.col(static_cast<Eigen::Index>(i));
        const Eigen::Vector3d view = p + pose.t; // camera center sits at -t
        if (normals.col(static_cast<Eigen::Index>(i)).dot(view) >= 0.0) continue;
        Eigen::Vector2d a;
        double depth;
        if (!camera.try_project(p, a, depth)) continue;
        if (sample_normal_bicubic(map, a).weight <= 0.0) continue;
        visible.push_back(static_cast<std::uint32_t>(i));
    }
    return visible;
}

namespace {

// Shared assembler for the normal-field block. Writes rows into r/J at
// row_offset; J may be null. Returns false if any listed vertex fails to
// project (infeasible state).
bool assemble_normals_block(const MorphableModel& model, const HeadMesh& mesh,
                            const Eigen::Matrix3Xd& normals, const CameraFrame& camera,
                            const NormalMap& map, const std::vector<std::uint32_t>& visible,
                            double sqrt_weight, Eigen::Index row_offset,
                            Eigen::Index pose_col, // -1: pose/intrinsics columns absent
                            Eigen::VectorXd& r, Eigen::MatrixXd* J) {
    std::vector<VertexNormalDerivative> normal_derivs;
    if (J) normal_derivs = vertex_normal_derivatives(mesh, normals, visible);

    std::atomic<bool> feasible{true};
    const Eigen::Index n_shape = static_cast<Eigen::Index>(model.component_count());

    parallel_for_chunks(visible.size(), 64, [&](std::size_t begin, std::size_t end) {
        for (std::size_t vi = begin; vi < end; ++vi) {
            const std::uint32_t i = visible[vi];
            const Eigen::Index row = row_offset + 3 * static_cast<Eigen::Index>(vi);
            const Eigen::Vector3d p = mesh.vertices.col(i);

            Eigen::Vector2d a;
            double depth;
            ProjectionJacobians pj;
            bool ok = J ? camera.try_project_with_jacobians(p, a, depth, pj)
                        : camera.try_project(p, a, depth);
            if (!ok) {
                feasible.store(false);
                return;
            }
            const BicubicSample s = sample_normal_bicubic(map, a);
            const Eigen::Vector3d n = normals.col(i);
            const Eigen::Vector3d diff = s.normal - n;
            r.segment<3>(row) = sqrt_weight * s.weight * diff;

            if (!J) continue;
            // d r / d a combines the moving validity weight and the moving
            // sampled normal.
            Eigen::Matrix<double, 3, 2> dr_da =
                diff * s.d_weight.transpose() + s.weight * s.d_normal;
            dr_da *= sqrt_weight;

            // Shape: projection moves the sample point, and the vertex
            // normal itself depends on the shape parameters.
            Eigen::Matrix<double, 3, Eigen::Dynamic> dn_dy(3, n_shape);
            dn_dy.setZero();
            const VertexNormalDerivative& nd = normal_derivs[vi];
            for (std::size_t s_i = 0; s_i < nd.vertex_indices.size(); ++s_i)
                dn_dy += nd.d_normal[s_i] *
                         model.basis.middleRows(3 * static_cast<Eigen::Index>(nd.vertex_indices[s_i]), 3);
            J->block(row, 0, 3, n_shape) =
                dr_da * pj.d_point * model.basis.middleRows(3 * static_cast<Eigen::Index>(i), 3) -
                (sqrt_weight * s.weight) * dn_dy;

            if (pose_col >= 0) {
                J->block<3, 6>(row, pose_col) = dr_da * pj.d_pose;
                J->block<3, 3>(row, pose_col + 6) = dr_da * pj.d_intrinsics;
            }
        }
    });
    return feasible.load();
}

// Landmark block: two rows per input-visible detection, ordered by channel.
bool assemble_landmarks_block(const MorphableModel& model, const HeadMesh& mesh,
                              const CameraFrame& camera, const LandmarkMap& landmarks,
                              double sqrt_weight, Eigen::Index row_offset, Eigen::Index pose_col,
                              bool with_shape, Eigen::VectorXd& r, Eigen::MatrixXd* J) {
    Eigen::Index row = row_offset;
    for (const auto& det : landmarks.detections) {
        if (!det.visible) continue;
        const Eigen::Vector3d p =
            mesh.vertices.col(model.landmark_indices[static_cast<std::size_t>(det.channel)]);
        Eigen::Vector2d b;
        double depth;
        ProjectionJacobians pj;
        const bool ok = J ? camera.try_project_with_jacobians(p, b, depth, pj)
                          : camera.try_project(p, b, depth);
        if (!ok) return false;
        r.segment<2>(row) = sqrt_weight * (Eigen::Vector2d(det.u, det.v) - b);
        if (J) {
            if (with_shape) {
                const Eigen::Index i =
                    static_cast<Eigen::Index>(model.landmark_indices[static_cast<std::size_t>(det.channel)]);
                J->block(row, 0, 2, static_cast<Eigen::Index>(model.component_count())) =
                    -sqrt_weight * pj.d_point * model.basis.middleRows(3 * i, 3);
            }
            if (pose_col >= 0) {
                J->block<2, 6>(row, pose_col) = -sqrt_weight * pj.d_pose;
                J->block<2, 3>(row, pose_col + 6) = -sqrt_weight * pj.d_intrinsics;
            }
        }
        row += 2;
    }
    return true;
}

} // namespace

ResidualBlock energy_normals(const MorphableModel& model, const HeadMesh& mesh,
                             const Eigen::Matrix3Xd& normals, const CameraPose& pose,
                             const Intrinsics& k, const NormalMap& map,
                             const std::vector<std::uint32_t>* visible, bool with_jacobians) {
    std::vector<std::uint32_t> computed;
    if (!visible) {
        computed = visible_vertices(mesh, normals, pose, k, map);
        visible = &computed;
    }
    // Nothing contributes (e.g. an all-invalid mask): an empty block with
    // zero energy. Callers that need residuals to optimize guard themselves.
    ResidualBlock block;
    if (visible->empty()) {
        block.r.resize(0);
        if (with_jacobians) {
            block.d_shape.resize(0, static_cast<Eigen::Index>(model.component_count()));
            block.d_pose.resize(0, 6);
            block.d_intrinsics.resize(0, 3);
        }
        return block;
    }

    const Eigen::Index rows = 3 * static_cast<Eigen::Index>(visible->size());
    const Eigen::Index n_shape = static_cast<Eigen::Index>(model.component_count());
    block.r.setZero(rows);
    Eigen::MatrixXd J;
    if (with_jacobians) J.setZero(rows, n_shape + 9);

    CameraFrame camera(pose, k);
    if (!assemble_normals_block(model, mesh, normals, camera, map, *visible, 1.0, 0,
                                with_jacobians ? n_shape : -1, block.r,
                                with_jacobians ? &J : nullptr))
        throw GeometryError("energy_normals: visible vertex fails to project");
    if (with_jacobians) {
        block.d_shape = J.leftCols(n_shape);
        block.d_pose = J.middleCols(n_shape, 6);
        block.d_intrinsics = J.rightCols(3);
    }
    return block;
}

ResidualBlock energy_landmarks(const MorphableModel& model, const HeadMesh& mesh,
                               const CameraPose& pose, const Intrinsics& k,
                               const LandmarkMap& landmarks, bool with_jacobians) {
    const std::size_t n_vis = landmarks.visible_count();
    if (n_vis == 0) throw SolverError("energy_landmarks: no visible landmarks");

    ResidualBlock block;
    const Eigen::Index rows = 2 * static_cast<Eigen::Index>(n_vis);
    const Eigen::Index n_shape = static_cast<Eigen::Index>(model.component_count());
    block.r.setZero(rows);
    Eigen::MatrixXd J;
    if (with_jacobians) J.setZero(rows, n_shape + 9);

    CameraFrame camera(pose, k);
    if (!assemble_landmarks_block(model, mesh, camera, landmarks, 1.0, 0,
                                  with_jacobians ? n_shape : -1, true, block.r,
                                  with_jacobians ? &J : nullptr))
        throw GeometryError("energy_landmarks: landmark vertex fails to project");
    if (with_jacobians) {
        block.d_shape = J.leftCols(n_shape);
        block.d_pose = J.middleCols(n_shape, 6);
        block.d_intrinsics = J.rightCols(3);
    }
    return block;
}

ResidualBlock energy_prior(const MorphableModel& model, const ShapeParams& params,
                           bool with_jacobians) {
    if (static_cast<std::size_t>(params.y.size()) != model.component_count())
        throw InvalidArgument("energy_prior: shape parameter dimension mismatch");
    ResidualBlock block;
    block.r = params.y.cwiseQuotient(model.singular_values);
    if (with_jacobians) {
        block.d_shape = model.singular_values.cwiseInverse().asDiagonal();
        block.d_pose.setZero(params.y.size(), 6);
        block.d_intrinsics.setZero(params.y.size(), 3);
    }
    return block;
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt
// ---------------------------------------------------------------------------

LMResult lm_minimize(Eigen::VectorXd x0, const LMEvalFn& eval, const SolverConfig& config,
                     const std::function<void(const Eigen::VectorXd&, int)>& refresh,
                     int refresh_interval) {
    config.validate();
    LMResult result;
    result.x = std::move(x0);

    Eigen::VectorXd r, r_trial;
    Eigen::MatrixXd J;
    double damping = config.initial_damping;
    int epoch = -1;

    auto energy_at = [&](const Eigen::VectorXd& x, Eigen::VectorXd& res) {
        return eval(x, res, nullptr) ? 0.5 * res.squaredNorm() : kInf;
    };

    for (int iter = 0; iter < config.max_iterations; ++iter) {
        result.iterations = iter + 1;
        if (refresh && (refresh_interval <= 0 || iter % refresh_interval == 0)) {
            refresh(result.x, iter);
            ++epoch;
        }
        if (!eval(result.x, r, &J))
            throw SolverError("LM: infeasible state at iteration " + std::to_string(iter));
        double energy = 0.5 * r.squaredNorm();
        result.final_energy = energy;

        const Eigen::VectorXd gradient = J.transpose() * r;
        if (gradient.lpNorm<Eigen::Infinity>() < config.gradient_tolerance) {
            result.converged = true;
            result.stop_reason = "gradient_tolerance";
            return result;
        }
        const Eigen::MatrixXd hessian = J.transpose() * J;
        Eigen::VectorXd diag = hessian.diagonal().cwiseMax(1e-12);

        bool stepped = false;
        while (!stepped) {
            Eigen::MatrixXd damped = hessian;
            damped.diagonal() += damping * diag;
            Eigen::LLT<Eigen::MatrixXd> llt(damped);
            if (llt.info() != Eigen::Success) {
                damping *= config.damping_increase;
                if (damping > config.max_damping)
                    throw SolverError("LM: Cholesky failure persists at maximum damping");
                continue;
            }
            const Eigen::VectorXd step = llt.solve(-gradient);
            const bool tiny_step =
                step.norm() <= config.parameter_tolerance *
                                   (result.x.norm() + config.parameter_tolerance);

            const Eigen::VectorXd x_trial = result.x + step;
            const double energy_trial = energy_at(x_trial, r_trial);
            if (energy_trial < energy) {
                result.history.push_back({iter, energy, energy_trial, damping, epoch, r.size()});
                result.x = x_trial;
                result.final_energy = energy_trial;
                damping = std::max(damping * config.damping_decrease, config.min_damping);
                stepped = true;
            } else {
                damping *= config.damping_increase;
            }
            if (tiny_step) {
                result.converged = true;
                result.stop_reason = "parameter_tolerance";
                return result;
            }
            if (!stepped && damping > config.max_damping) {
                result.stop_reason = "no_progress";
                return result;
            }
        }
    }
    result.stop_reason = "max_iterations";
    return result;
}

// ---------------------------------------------------------------------------
// Pre-alignment
// ---------------------------------------------------------------------------

PrealignResult prealign(const MorphableModel& model, const LandmarkMap& landmarks,
                        const Intrinsics& k0, const PrealignConfig& config) {
    const std::size_t n_vis = landmarks.visible_count();
    if (n_vis < 4)
        throw SolverError("pre-alignment under-constrained: need >= 4 visible landmarks, got " +
                          std::to_string(n_vis));

    HeadMesh mean_mesh;
    mean_mesh.topology = model.topology;
    mean_mesh.vertices = model.mean_vertices;

    // Geometry priors for seeding: landmark-cloud centroid and diameter.
    Eigen::Matrix3Xd lm_points = landmark_points(mean_mesh, model);
    const Eigen::Vector3d cloud_centroid = lm_points.rowwise().mean();
    double cloud_diameter = 0.0;
    for (int i = 0; i < lm_points.cols(); ++i)
        for (int j = i + 1; j < lm_points.cols(); ++j)
            cloud_diameter = std::max(cloud_diameter, (lm_points.col(i) - lm_points.col(j)).norm());

    double min_u = kInf, max_u = -kInf, min_v = kInf, max_v = -kInf;
    double mean_u = 0.0, mean_v = 0.0;
    for (const auto& d : landmarks.detections) {
        if (!d.visible) continue;
        min_u = std::min(min_u, d.u);
        max_u = std::max(max_u, d.u);
        min_v = std::min(min_v, d.v);
        max_v = std::max(max_v, d.v);
        mean_u += d.u;
        mean_v += d.v;
    }
    mean_u /= static_cast<double>(n_vis);
    mean_v /= static_cast<double>(n_vis);
    const double spread_px = std::max(std::hypot(max_u - min_u, max_v - min_v), 1.0);
    const double depth_prior =
        std::clamp(k0.f * cloud_diameter / spread_px, 2.0 * cloud_diameter, 60.0 * cloud_diameter);

    auto eval = [&](const Eigen::VectorXd& x, Eigen::VectorXd& r, Eigen::MatrixXd* J) {
        r.setZero(2 * static_cast<Eigen::Index>(n_vis));
        if (J) J->setZero(r.size(), 6);
        const CameraFrame camera = frame_from_raw(x, 0, k0);
        // Pose columns live at 0 in this 6-parameter problem; shape is fixed
        // at the mean, intrinsics at the prior.
        Eigen::VectorXd r_local = r;
        Eigen::MatrixXd j_local;
        if (J) j_local.setZero(r.size(), 9);
        if (!assemble_landmarks_block(model, mean_mesh, camera, landmarks, 1.0, 0,
                                      J ? 0 : -1, false, r_local, J ? &j_local : nullptr))
            return false;
        r = r_local;
        if (J) *J = j_local.leftCols(6);
        return true;
    };

    const double yaw_seeds[4] = {0.0, std::numbers::pi / 2, -std::numbers::pi / 2, 3.14159};
    bool have_best = false;
    LMResult best;
    SolverConfig lm_config = config.solver;
    for (double yaw : yaw_seeds) {
        const Eigen::Matrix3d r_seed = rotation_from_euler(0.0, 0.0, yaw);
        const Eigen::Vector3d ray((mean_u - k0.u0) / k0.f, (mean_v - k0.v0) / k0.f, 1.0);
        const Eigen::Vector3d t_seed = r_seed.transpose() * (depth_prior * ray) - cloud_centroid;
        Eigen::VectorXd x0(6);
        x0 << 0.0, 0.0, yaw, t_seed.x(), t_seed.y(), t_seed.z();
        try {
            LMResult candidate = lm_minimize(std::move(x0), eval, lm_config);
            if (!have_best || candidate.final_energy < best.final_energy) {
                best = std::move(candidate);
                have_best = true;
            }
        } catch (const SolverError&) {
            // a seed placing the head behind the camera is simply skipped
        }
    }
    if (!have_best) throw SolverError("pre-alignment failed: every seed was infeasible");

    const double rms =
        std::sqrt(2.0 * best.final_energy / static_cast<double>(n_vis));
    const double max_rms = config.max_rms_focal_fraction * k0.f;
    if (rms > max_rms)
        throw SolverError("pre-alignment failed: rms " + std::to_string(rms) +
                          " px exceeds threshold " + std::to_string(max_rms) + " px");

    PrealignResult out;
    out.pose = CameraPose(wrap_angle(best.x[0]), wrap_angle(best.x[1]), wrap_angle(best.x[2]),
                          best.x.segment<3>(3));
    out.rms_px = rms;
    out.iterations = best.iterations;
    return out;
}

// ---------------------------------------------------------------------------
// Joint fit
// ---------------------------------------------------------------------------

FitProblem::FitProblem(const MorphableModel& model, const std::vector<ViewObservation>& views,
                       const FitWeights& weights)
    : model_(&model), views_(&views), weights_(weights) {
    weights_.validate();
    if (views.empty()) throw InvalidArgument("fit: at least one view is required");
    for (const auto& view : views) view.validate();
    n_shape_ = static_cast<Eigen::Index>(model.component_count());
    n_params_ = n_shape_ + 9 * static_cast<Eigen::Index>(views.size());
    visible_.resize(views.size());
}

Eigen::VectorXd FitProblem::initial_parameters(
    const std::vector<PrealignResult>& prealigned) const {
    if (prealigned.size() != views_->size())
        throw InvalidArgument("fit: one pre-alignment per view required");
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n_params_);
    for (std::size_t v = 0; v < views_->size(); ++v) {
        const Eigen::Index off = view_offset(v);
        const CameraPose& pose = prealigned[v].pose;
        const Intrinsics& k = (*views_)[v].k0;
        x[off] = pose.roll;
        x[off + 1] = pose.pitch;
        x[off + 2] = pose.yaw;
        x.segment<3>(off + 3) = pose.t;
        x[off + 6] = k.f;
        x[off + 7] = k.u0;
        x[off + 8] = k.v0;
    }
    return x;
}

void FitProblem::refresh_visibility(const Eigen::VectorXd& x) {
    if (weights_.normals == 0.0) return;
    const HeadMesh mesh = instantiate(*model_, {x.head(n_shape_)});
    const Eigen::Matrix3Xd normals = vertex_normals(mesh);
    for (std::size_t v = 0; v < views_->size(); ++v) {
        const Eigen::Index off = view_offset(v);
        CameraPose pose;
        pose.roll = x[off];
        pose.pitch = x[off + 1];
        pose.yaw = x[off + 2];
        pose.t = x.segment<3>(off + 3);
        visible_[v] = visible_vertices(mesh, normals, pose,
                                       Intrinsics(std::max(x[off + 6], 1e-6), x[off + 7], x[off + 8]),
                                       (*views_)[v].normal_map);
        if (visible_[v].empty())
            throw SolverError("fit: no visible vertices in view " + std::to_string(v));
    }
}

bool FitProblem::evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& r, Eigen::MatrixXd* J) const {
    const HeadMesh mesh = instantiate(*model_, {x.head(n_shape_)});
    Eigen::Matrix3Xd normals;
    if (weights_.normals > 0.0) normals = vertex_normals(mesh);

    Eigen::Index rows = 0;
    if (weights_.normals > 0.0)
        for (const auto& vis : visible_) rows += 3 * static_cast<Eigen::Index>(vis.size());
    if (weights_.landmarks > 0.0)
        for (const auto& view : *views_)
            rows += 2 * static_cast<Eigen::Index>(view.landmarks.visible_count());
    if (weights_.prior > 0.0) rows += n_shape_;

    r.setZero(rows);
    if (J) J->setZero(rows, n_params_);

    Eigen::Index row = 0;
    for (std::size_t v = 0; v < views_->size(); ++v) {
        const Eigen::Index off = view_offset(v);
        const Intrinsics k(std::max(x[off + 6], 1e-6), x[off + 7], x[off + 8]);
        const CameraFrame camera = frame_from_raw(x, off, k);
        if (weights_.normals > 0.0) {
            if (visible_[v].empty())
                throw SolverError("fit: visibility not refreshed before evaluation");
            if (!assemble_normals_block(*model_, mesh, normals, camera, (*views_)[v].normal_map,
                                        visible_[v], std::sqrt(weights_.normals), row,
                                        J ? off : -1, r, J))
                return false;
            row += 3 * static_cast<Eigen::Index>(visible_[v].size());
        }
        if (weights_.landmarks > 0.0) {
            if (!assemble_landmarks_block(*model_, mesh, camera, (*views_)[v].landmarks,
                                          std::sqrt(weights_.landmarks), row, J ? off : -1, true,
                                          r, J))
                return false;
            row += 2 * static_cast<Eigen::Index>((*views_)[v].landmarks.visible_count());
        }
    }
    if (weights_.prior > 0.0) {
        const double sw = std::sqrt(weights_.prior);
        r.segment(row, n_shape_) = sw * x.head(n_shape_).cwiseQuotient(model_->singular_values);
        if (J)
            J->block(row, 0, n_shape_, n_shape_) =
                (sw * model_->singular_values.cwiseInverse()).asDiagonal();
        row += n_shape_;
    }
    return true;
}

double FitProblem::energy(const Eigen::VectorXd& x) const {
    Eigen::VectorXd r;
    if (!evaluate(x, r, nullptr)) return kInf;
    return 0.5 * r.squaredNorm();
}

Eigen::VectorXd FitProblem::gradient(const Eigen::VectorXd& x) const {
    Eigen::VectorXd r;
    Eigen::MatrixXd J;
    if (!evaluate(x, r, &J)) throw SolverError("fit: gradient at infeasible state");
    return J.transpose() * r;
}

ShapeParams FitProblem::shape_of(const Eigen::VectorXd& x) const { return {x.head(n_shape_)}; }

CameraPose FitProblem::pose_of(const Eigen::VectorXd& x, std::size_t view) const {
    const Eigen::Index off = view_offset(view);
    return CameraPose(wrap_angle(x[off]), wrap_angle(x[off + 1]), wrap_angle(x[off + 2]),
                      x.segment<3>(off + 3));
}

Intrinsics FitProblem::intrinsics_of(const Eigen::VectorXd& x, std::size_t view) const {
    const Eigen::Index off = view_offset(view);
    return {x[off + 6], x[off + 7], x[off + 8]};
}

Eigen::VectorXd FitProblem::pack(const ShapeParams& shape, const std::vector<CameraPose>& poses,
                                 const std::vector<Intrinsics>& intrinsics) const {
    if (shape.y.size() != n_shape_ || poses.size() != views_->size() ||
        intrinsics.size() != views_->size())
        throw InvalidArgument("fit: pack dimension mismatch");
    Eigen::VectorXd x(n_params_);
    x.head(n_shape_) = shape.y;
    for (std::size_t v = 0; v < views_->size(); ++v) {
        const Eigen::Index off = view_offset(v);
        x[off] = poses[v].roll;
        x[off + 1] = poses[v].pitch;
        x[off + 2] = poses[v].yaw;
        x.segment<3>(off + 3) = poses[v].t;
        x[off + 6] = intrinsics[v].f;
        x[off + 7] = intrinsics[v].u0;
        x[off + 8] = intrinsics[v].v0;
    }
    return x;
}

FitResult fit(const MorphableModel& model, const std::vector<ViewObservation>& views,
              const FitWeights& weights, const SolverConfig& config) {
    weights.validate();
    config.validate();

    std::vector<PrealignResult> prealigned;
    prealigned.reserve(views.size());
    for (const auto& view : views) prealigned.push_back(prealign(model, view.landmarks, view.k0));

    FitProblem problem(model, views, weights);
    Eigen::VectorXd x0 = problem.initial_parameters(prealigned);

    const LMEvalFn eval = [&problem](const Eigen::VectorXd& x, Eigen::VectorXd& r,
                                     Eigen::MatrixXd* J) { return problem.evaluate(x, r, J); };
    const auto refresh = [&problem](const Eigen::VectorXd& x, int) {
        problem.refresh_visibility(x);
    };
    LMResult lm = lm_minimize(std::move(x0), eval, config, refresh,
                              config.visibility_refresh_interval);

    FitResult result;
    result.shape = problem.shape_of(lm.x);
    result.weights = weights;
    result.total_energy = lm.final_energy;
    result.converged = lm.converged;
    result.stop_reason = lm.stop_reason;
    result.iterations = lm.iterations;
    result.history = std::move(lm.history);
    result.energy_prior = energy_prior(model, result.shape, false).energy();

    const HeadMesh mesh = instantiate(model, result.shape);
    const Eigen::Matrix3Xd normals =
        weights.normals > 0.0 ? vertex_normals(mesh) : Eigen::Matrix3Xd();
    for (std::size_t v = 0; v < views.size(); ++v) {
        ViewSolution sol;
        sol.pose = problem.pose_of(lm.x, v);
        sol.intrinsics = problem.intrinsics_of(lm.x, v);
        sol.prealign_rms_px = prealigned[v].rms_px;
        if (weights.normals > 0.0)
            sol.energy_normals = energy_normals(model, mesh, normals, sol.pose, sol.intrinsics,
                                                views[v].normal_map, nullptr, false)
                                     .energy();
        sol.energy_landmarks =
            energy_landmarks(model, mesh, sol.pose, sol.intrinsics, views[v].landmarks, false)
                .energy();
        result.views.push_back(sol);
    }
    return result;
}

std::string fit_result_to_json(const FitResult& result) {
    nlohmann::ordered_json doc;
    doc["converged"] = result.converged;
    doc["stop_reason"] = result.stop_reason;
    doc["iterations"] = result.iterations;
    doc["weights"] = {{"normals", result.weights.normals},
                      {"landmarks", result.weights.landmarks},
                      {"prior", result.weights.prior}};
    doc["energy"] = {{"total", result.total_energy}, {"prior", result.energy_prior}};
    doc["shape"] = std::vector<double>(result.shape.y.data(),
                                       result.shape.y.data() + result.shape.y.size());
    nlohmann::ordered_json views = nlohmann::ordered_json::array();
    for (const auto& v : result.views) {
        nlohmann::ordered_json view;
        view["pose"] = {{"roll", v.pose.roll},
                        {"pitch", v.pose.pitch},
                        {"yaw", v.pose.yaw},
                        {"t", {v.pose.t.x(), v.pose.t.y(), v.pose.t.z()}}};
        view["intrinsics"] = {{"f", v.intrinsics.f}, {"u0", v.intrinsics.u0}, {"v0", v.intrinsics.v0}};
        view["prealign_rms_px"] = v.prealign_rms_px;
        view["energy_normals"] = v.energy_normals;
        view["energy_landmarks"] = v.energy_landmarks;
        views.push_back(view);
    }
    doc["views"] = views;
    nlohmann::ordered_json history = nlohmann::ordered_json::array();
    for (const auto& h : result.history) {
        history.push_back({{"iteration", h.iteration},
                           {"energy_before", h.energy_before},
                           {"energy_after", h.energy_after},
                           {"damping", h.damping},
                           {"visibility_epoch", h.visibility_epoch},
                           {"residual_count", h.residual_count}});
    }
    doc["history"] = history;
    return doc.dump(2) + "\n";
}

void save_fit_result(const FitResult& result, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open fit result for writing: " + path.string());
    out << fit_result_to_json(result);
    if (!out) throw IoError("failed writing fit result: " + path.string());
}

} // namespace headfit
