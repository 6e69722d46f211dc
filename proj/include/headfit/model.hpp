#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include <Eigen/Core>

#include "headfit/mesh.hpp"

namespace headfit {

inline constexpr int kNumLandmarks = 24;
inline constexpr int kNumEvalAnchors = 6;

/// PCA coordinates of one head identity (dimensionless).
struct ShapeParams {
    Eigen::VectorXd y;
};

/// PCA morphable head model: mean shape, orthonormal deformation basis,
/// singular values, topology, and the fixed landmark / evaluation-anchor
/// vertices. Immutable after construction; safe for concurrent reads.
///
/// Conventions: units are millimetres, coordinates right-handed with y
/// vertical; the face points toward -z so a camera at the origin looking down
/// +z sees the front of a head translated to positive z.
struct MorphableModel {
    Eigen::Matrix3Xd mean_vertices;          // 3 x N_X, mm
    Eigen::MatrixXd basis;                   // (3 N_X) x N_y, orthonormal columns
    Eigen::VectorXd singular_values;         // N_y, mm, strictly positive non-increasing
    std::shared_ptr<const MeshTopology> topology;
    std::vector<std::uint32_t> landmark_indices;    // 24 distinct vertices, front hemisphere
    std::vector<std::uint32_t> eval_anchor_indices; // 6 of the landmarks, spread over the face

    std::uint64_t seed = 0;
    int subdivisions = 0;

    std::size_t vertex_count() const { return static_cast<std::size_t>(mean_vertices.cols()); }
    std::size_t component_count() const { return static_cast<std::size_t>(basis.cols()); }

    /// Validates every structural invariant; throws InvalidArgument on the
    /// first violation. Called by the generator and the loader.
    void validate() const;
};

struct ProceduralModelConfig {
    int n_subdiv = 3;
    int n_components = 30;
    std::uint64_t seed = 0;
};

/// Unit icosphere after n subdivision steps: 10 * 4^n + 2 vertices,
/// 20 * 4^n faces, CCW winding viewed from outside.
HeadMesh make_icosphere(int n_subdiv);

/// Deterministic procedural model: head-proportioned ellipsoid mean
/// (semi-axes 90 x 110 x 130 mm), smooth orthonormal random deformation
/// fields, singular values 25 * k^-0.8 mm, 24 farthest-point landmarks on the
/// front (-z) hemisphere and 6 evaluation anchors among them.
MorphableModel generate_procedural_model(const ProceduralModelConfig& config);

/// X = mean + basis * y, affine in y. Throws InvalidArgument on dimension
/// mismatch or non-finite parameters.
HeadMesh instantiate(const MorphableModel& model, const ShapeParams& params);

/// Deterministic head-identity sampler: y_k = scale * sigma_k * u with
/// u uniform in (-1, 1) from the seeded generator.
ShapeParams sample_shape_params(const MorphableModel& model, std::uint64_t seed,
                                double scale = 0.7);

/// Gathers the mesh positions of the model's landmark / anchor vertices in
/// stored index order.
Eigen::Matrix3Xd landmark_points(const HeadMesh& mesh, const MorphableModel& model);
Eigen::Matrix3Xd anchor_points(const HeadMesh& mesh, const MorphableModel& model);

/// Binary model file (.mmhead): magic, JSON header, then raw little-endian
/// float64 / uint32 blocks. Round-trips bitwise.
void save_model(const MorphableModel& model, const std::filesystem::path& path);
MorphableModel load_model(const std::filesystem::path& path);

} // namespace headfit
