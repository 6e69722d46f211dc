#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "headfit/geometry.hpp"
#include "headfit/model.hpp"
#include "headfit/raster.hpp"

namespace headfit {

/// One bicubic lookup into a normal map: Catmull-Rom over the 4x4
/// neighborhood per channel with border clamping, renormalized to unit
/// length, plus a validity weight from bilinear interpolation of the mask
/// (zero-padded, so samples outside the image get weight 0). Spatial
/// derivatives come from the same patch coefficients, never from finite
/// differences.
struct BicubicSample {
    Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
    double weight = 0.0;
    Eigen::Matrix<double, 3, 2> d_normal = Eigen::Matrix<double, 3, 2>::Zero();
    Eigen::Vector2d d_weight = Eigen::Vector2d::Zero();
};

BicubicSample sample_normal_bicubic(const NormalMap& map, const Eigen::Vector2d& pixel);

/// Energy weights (lambda_N, lambda_Z, lambda_P).
struct FitWeights {
    double normals = 1.0;
    double landmarks = 0.8;
    double prior = 0.4;

    void validate() const;
};

struct SolverConfig {
    int max_iterations = 200;
    double gradient_tolerance = 1e-8;
    double parameter_tolerance = 1e-10;
    double initial_damping = 1e-3;
    double damping_increase = 10.0;
    double damping_decrease = 0.1;
    double min_damping = 1e-12;
    double max_damping = 1e12;
    int visibility_refresh_interval = 5;

    void validate() const;
};

/// One input view: its maps plus the intrinsics prior used for
/// pre-alignment and as the starting point of the joint optimization.
struct ViewObservation {
    NormalMap normal_map;
    LandmarkMap landmarks;
    Intrinsics k0;

    void validate() const;
};

/// Generic intrinsics prior: f = 1.2 * max(width, height), principal point
/// at the image center.
Intrinsics default_intrinsics_prior(int width, int height);

/// A weighted residual block with analytic Jacobians. Columns: shape
/// (N_y), pose (roll, pitch, yaw, tx, ty, tz), intrinsics (f, u0, v0).
/// Jacobian matrices are empty when not requested.
struct ResidualBlock {
    Eigen::VectorXd r;
    Eigen::MatrixXd d_shape;
    Eigen::MatrixXd d_pose;
    Eigen::MatrixXd d_intrinsics;

    double energy() const { return 0.5 * r.squaredNorm(); }
};

/// Vertices entering the normal energy: front-facing (n . (p + t) < 0),
/// projectable, and sampling the map with positive validity weight.
std::vector<std::uint32_t> visible_vertices(const HeadMesh& mesh, const Eigen::Matrix3Xd& normals,
                                            const CameraPose& pose, const Intrinsics& k,
                                            const NormalMap& map);

/// Normal-field energy: per visible vertex w * (N(a) - n), three rows each.
/// `normals` must come from vertex_normals(mesh). When `visible` is null the
/// cull is computed in place. An empty visible set yields an empty block
/// (zero energy, empty Jacobians); fit() raises the empty-residual error
/// when a view it is optimizing over contributes nothing.
ResidualBlock energy_normals(const MorphableModel& model, const HeadMesh& mesh,
                             const Eigen::Matrix3Xd& normals, const CameraPose& pose,
                             const Intrinsics& k, const NormalMap& map,
                             const std::vector<std::uint32_t>* visible = nullptr,
                             bool with_jacobians = true);

/// Landmark reprojection energy: per visible detection z - b, two rows each.
/// Throws SolverError when no detection is visible.
ResidualBlock energy_landmarks(const MorphableModel& model, const HeadMesh& mesh,
                               const CameraPose& pose, const Intrinsics& k,
                               const LandmarkMap& landmarks, bool with_jacobians = true);

/// Shape prior: residual y_k / sigma_k per component.
ResidualBlock energy_prior(const MorphableModel& model, const ShapeParams& params,
                           bool with_jacobians = true);

// ---------------------------------------------------------------------------
// Levenberg-Marquardt core
// ---------------------------------------------------------------------------

struct LMStepRecord {
    int iteration = 0;
    double energy_before = 0.0;
    double energy_after = 0.0;
    double damping = 0.0;
    int visibility_epoch = 0;
    Eigen::Index residual_count = 0;
};

struct LMResult {
    Eigen::VectorXd x;
    bool converged = false;
    std::string stop_reason;
    int iterations = 0;
    double final_energy = 0.0;
    std::vector<LMStepRecord> history;
};

/// Residual callback: fills r (always) and J (only when non-null) at x.
/// Returns false when x is infeasible (treated as infinite energy).
using LMEvalFn = std::function<bool(const Eigen::VectorXd&, Eigen::VectorXd&, Eigen::MatrixXd*)>;

/// Damped Gauss-Newton with Marquardt scaling: solves
/// (J^T J + mu diag(J^T J)) step = -J^T r by Cholesky, accepts a step iff the
/// energy 0.5 |r|^2 strictly decreases. `refresh` (optional) is invoked at
/// iteration 0 and then every refresh_interval iterations before evaluation;
/// the residual structure it selects stays frozen in between, so every
/// recorded step compares energies of the same objective. Throws SolverError
/// if Cholesky keeps failing at maximum damping.
LMResult lm_minimize(Eigen::VectorXd x0, const LMEvalFn& eval, const SolverConfig& config,
                     const std::function<void(const Eigen::VectorXd&, int)>& refresh = nullptr,
                     int refresh_interval = 0);

// ---------------------------------------------------------------------------
// Pre-alignment and full fit
// ---------------------------------------------------------------------------

struct PrealignConfig {
    SolverConfig solver = [] {
        SolverConfig c;
        c.max_iterations = 100;
        return c;
    }();
    /// Acceptable final RMS reprojection as a fraction of the focal prior.
    double max_rms_focal_fraction = 0.05;
};

struct PrealignResult {
    CameraPose pose;
    double rms_px = 0.0;
    int iterations = 0;
};

/// Landmark-only pose estimation on the mean head with fixed intrinsics:
/// multi-start over four canonical yaw seeds, keeping the lowest-energy
/// solution. Requires >= 4 visible landmarks; throws SolverError when
/// under-constrained or when the best RMS stays above the divergence
/// threshold.
PrealignResult prealign(const MorphableModel& model, const LandmarkMap& landmarks,
                        const Intrinsics& k0, const PrealignConfig& config = {});

/// The joint fitting problem over [shape | per-view pose + intrinsics].
/// Exposes the frozen-visibility residual assembly so that gradients and
/// energies can be inspected directly; fit() drives it with lm_minimize.
/// Holds references: the model and the views must outlive the problem.
class FitProblem {
public:
    FitProblem(const MorphableModel& model, const std::vector<ViewObservation>& views,
               const FitWeights& weights);

    Eigen::Index parameter_count() const { return n_params_; }
    Eigen::Index shape_count() const { return n_shape_; }
    std::size_t view_count() const { return views_->size(); }

    /// y = 0, per-view pose from pre-alignment, intrinsics from each view's
    /// prior.
    Eigen::VectorXd initial_parameters(const std::vector<PrealignResult>& prealigned) const;

    /// Recomputes the per-view visible-vertex sets at x.
    void refresh_visibility(const Eigen::VectorXd& x);

    /// Residuals (and Jacobian when J != nullptr) under the frozen
    /// visibility. Returns false when any frozen residual fails to project.
    bool evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& r, Eigen::MatrixXd* J) const;

    /// Scalar energy at x (infinite when infeasible); frozen visibility.
    double energy(const Eigen::VectorXd& x) const;

    /// Weighted-energy gradient at x via J^T r; frozen visibility.
    Eigen::VectorXd gradient(const Eigen::VectorXd& x) const;

    const std::vector<std::vector<std::uint32_t>>& visibility() const { return visible_; }

    ShapeParams shape_of(const Eigen::VectorXd& x) const;
    CameraPose pose_of(const Eigen::VectorXd& x, std::size_t view) const;
    Intrinsics intrinsics_of(const Eigen::VectorXd& x, std::size_t view) const;
    Eigen::VectorXd pack(const ShapeParams& shape, const std::vector<CameraPose>& poses,
                         const std::vector<Intrinsics>& intrinsics) const;

private:
    Eigen::Index view_offset(std::size_t view) const { return n_shape_ + 9 * static_cast<Eigen::Index>(view); }

    const MorphableModel* model_;
    const std::vector<ViewObservation>* views_;
    FitWeights weights_;
    Eigen::Index n_shape_ = 0;
    Eigen::Index n_params_ = 0;
    std::vector<std::vector<std::uint32_t>> visible_;
};

struct ViewSolution {
    CameraPose pose;
    Intrinsics intrinsics;
    double prealign_rms_px = 0.0;
    double energy_normals = 0.0;   // raw, unweighted
    double energy_landmarks = 0.0; // raw, unweighted
};

struct FitResult {
    ShapeParams shape;
    std::vector<ViewSolution> views;
    FitWeights weights;
    double total_energy = 0.0; // weighted Eq.-style total
    double energy_prior = 0.0; // raw, unweighted
    bool converged = false;
    std::string stop_reason;
    int iterations = 0;
    std::vector<LMStepRecord> history;
};

/// Full regression: pre-align every view, then jointly minimize the weighted
/// sum of normal, landmark, and prior energies over one shared shape vector
/// and per-view pose + intrinsics.
FitResult fit(const MorphableModel& model, const std::vector<ViewObservation>& views,
              const FitWeights& weights = {}, const SolverConfig& config = {});

/// Deterministic JSON encoding of a fit result.
std::string fit_result_to_json(const FitResult& result);
void save_fit_result(const FitResult& result, const std::filesystem::path& path);

} // namespace headfit
