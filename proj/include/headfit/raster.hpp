#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

#include "headfit/geometry.hpp"
#include "headfit/mesh.hpp"
#include "headfit/model.hpp"

namespace headfit {

/// Rasterized surface-normal image. Masked-in pixels hold the world-frame
/// unit normal of the surface point visible there plus its camera depth;
/// masked-out pixels hold the zero vector and infinite depth. Normals are
/// world-frame (pose-independent model normals), recorded as such in the
/// file header.
struct NormalMap {
    int width = 0;
    int height = 0;
    std::vector<Eigen::Vector3d> normals; // row-major, width * height
    std::vector<double> depth;            // camera-frame z, mm
    std::vector<std::uint8_t> mask;       // 1 = head coverage

    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
               static_cast<std::size_t>(x);
    }
    bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
};

/// One detected landmark: sub-pixel image position of model landmark vertex
/// `channel`. Invisible detections keep their projected position when the
/// point projects at all, (-1, -1) otherwise.
struct LandmarkDetection {
    int channel = 0;
    double u = -1.0;
    double v = -1.0;
    bool visible = false;
};

/// Sparse landmark observations, one entry per channel in channel order.
struct LandmarkMap {
    int width = 0;
    int height = 0;
    std::vector<LandmarkDetection> detections;

    std::size_t visible_count() const;
};

/// Dense 24-channel landmark image (value 1 at each visible landmark's
/// rounded pixel, 0 elsewhere).
struct DenseLandmarkImage {
    int width = 0;
    int height = 0;
    std::vector<double> data; // channel-major: ((c * height) + y) * width + x

    double at(int c, int x, int y) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double& at(int c, int x, int y) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

/// Z-buffered rasterization of the mesh's smooth-shaded world-frame normals.
/// Per-pixel values are barycentric interpolations of the three vertex
/// normals, renormalized; back-facing triangles are skipped; pixel centers
/// sample at (x + 0.5, y + 0.5); no anti-aliasing. Deterministic for any
/// worker-thread count. Throws RenderError when no triangle is visible.
NormalMap render_normal_map(const HeadMesh& mesh, const CameraPose& pose, const Intrinsics& k,
                            int width, int height);

/// Projects the 24 model landmark vertices and tests each against the
/// z-buffer of a fresh normal-map render. A landmark is visible iff it
/// projects in bounds with camera depth <= buffered depth + 2 mm.
LandmarkMap render_landmark_map(const HeadMesh& mesh, const MorphableModel& model,
                                const CameraPose& pose, const Intrinsics& k, int width,
                                int height);

/// Occlusion tolerance for landmark visibility, mm.
inline constexpr double kLandmarkDepthTolerance = 2.0;

/// Dense 24-channel form of a landmark map (value 1 at rounded projections).
DenseLandmarkImage to_dense(const LandmarkMap& landmarks);

/// Detects landmarks in a dense 24-channel image: per channel, the
/// value-weighted centroid of the 8-connected component (values >= 0.5)
/// around the global maximum, if that maximum reaches 0.5; otherwise the
/// channel is reported not visible. Equal maxima resolve to the smallest
/// (row, column) in scan order.
LandmarkMap extract_landmarks(const DenseLandmarkImage& dense);

/// Normal-map file (.nmap): magic, JSON header, then raw little-endian
/// float32 planes nx, ny, nz, depth and a byte mask plane.
void save_normal_map(const NormalMap& map, const std::filesystem::path& path);
NormalMap load_normal_map(const std::filesystem::path& path);

/// Landmark file (.lmk.json): JSON list of {channel, u, v, visible}.
void save_landmark_map(const LandmarkMap& landmarks, const std::filesystem::path& path);
LandmarkMap load_landmark_map(const std::filesystem::path& path);

/// 8-bit visualization of a normal map (binary PPM), channel c mapped as
/// round(255 * (n_c + 1) / 2); masked-out pixels black.
void write_normal_map_ppm(const NormalMap& map, const std::filesystem::path& path);

} // namespace headfit
