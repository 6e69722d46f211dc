#pragma once

// Shared helpers for the test suites: deterministic random values, temp
// files, file digests, and the synthetic closed-loop scene used across the
// fit and eval tests.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "headfit/fit.hpp"
#include "headfit/geometry.hpp"
#include "headfit/model.hpp"
#include "headfit/raster.hpp"

namespace testsupport {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

inline Eigen::Vector3d uniform_vec3(std::mt19937_64& rng, double lo, double hi) {
    return {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)};
}

class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("headfit_test_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Camera pose that keeps the head (centered at the model origin) on the
/// optical axis at the given depth while the camera orbits by the given
/// Euler angles.
inline headfit::CameraPose orbit_pose(double roll, double pitch, double yaw, double depth) {
    const Eigen::Matrix3d r = headfit::rotation_from_euler(roll, pitch, yaw);
    const Eigen::Vector3d t = r.transpose() * Eigen::Vector3d(0.0, 0.0, depth);
    return {roll, pitch, yaw, t};
}

struct SyntheticScene {
    headfit::HeadMesh mesh; // ground-truth geometry
    headfit::ShapeParams shape;
    headfit::CameraPose pose;
    headfit::Intrinsics intrinsics;
    headfit::ViewObservation view;
};

/// Renders ground-truth maps of a sampled subject. The render focal equals
/// the view's intrinsics prior so closed-loop pose recovery is exact.
inline SyntheticScene make_scene(const headfit::MorphableModel& model, std::uint64_t subject_seed,
                                 double yaw, int size = 256, double depth = 650.0,
                                 double shape_scale = 0.7) {
    SyntheticScene scene;
    scene.shape = headfit::sample_shape_params(model, subject_seed, shape_scale);
    scene.mesh = headfit::instantiate(model, scene.shape);
    scene.pose = orbit_pose(0.0, 0.0, yaw, depth);
    scene.intrinsics = headfit::default_intrinsics_prior(size, size);
    scene.view.normal_map =
        headfit::render_normal_map(scene.mesh, scene.pose, scene.intrinsics, size, size);
    scene.view.landmarks =
        headfit::render_landmark_map(scene.mesh, model, scene.pose, scene.intrinsics, size, size);
    scene.view.k0 = scene.intrinsics;
    return scene;
}

} // namespace testsupport
