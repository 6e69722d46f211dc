#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "headfit/error.hpp"
#include "headfit/eval.hpp"
#include "headfit/geometry.hpp"
#include "headfit/kdtree.hpp"
#include "headfit/model.hpp"
#include "support.hpp"

using namespace headfit;

namespace {

double rotation_angle(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
    const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
}

// First-wins linear scan; the reference for kd-tree equivalence.
Eigen::Index brute_force_nearest(const Eigen::Matrix3Xd& points, const Eigen::Vector3d& q) {
    Eigen::Index best = 0;
    double best_sq = (points.col(0) - q).squaredNorm();
    for (Eigen::Index i = 1; i < points.cols(); ++i) {
        const double d = (points.col(i) - q).squaredNorm();
        if (d < best_sq) {
            best_sq = d;
            best = i;
        }
    }
    return best;
}

HeadMesh deformed_mesh(const MorphableModel& model, std::uint64_t seed, double scale = 0.7) {
    return instantiate(model, sample_shape_params(model, seed, scale));
}

} // namespace

TEST_CASE("kd-tree nearest neighbors equal the brute-force scan") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const int n = 50 + static_cast<int>(rng() % 450);
        Eigen::Matrix3Xd cloud(3, n);
        for (int i = 0; i < n; ++i) cloud.col(i) = testsupport::uniform_vec3(rng, -100, 100);
        const KdTree3 tree(cloud);
        for (int q = 0; q < 200; ++q) {
            const Eigen::Vector3d query = testsupport::uniform_vec3(rng, -120, 120);
            CHECK(tree.nearest(query) == brute_force_nearest(cloud, query));
        }
    }
}

TEST_CASE("coarse_align recovers an exact rigid transform") {
    const MorphableModel model = generate_procedural_model({2, 8, 3});
    HeadMesh mesh;
    mesh.topology = model.topology;
    mesh.vertices = model.mean_vertices;
    const Eigen::Matrix3Xd p = anchor_points(mesh, model);

    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        RigidTransform truth;
        truth.rotation = rotation_from_euler(testsupport::uniform(rng, -3, 3),
                                             testsupport::uniform(rng, -3, 3),
                                             testsupport::uniform(rng, -3, 3));
        truth.translation = testsupport::uniform_vec3(rng, -200, 200);
        // recon anchors q satisfy truth(q) = p
        const Eigen::Matrix3Xd q = truth.inverse().apply_points(p);
        const RigidTransform recovered = coarse_align(p, q);
        recovered.validate();
        CHECK((recovered.rotation - truth.rotation).cwiseAbs().maxCoeff() < 1e-9);
        CHECK((recovered.translation - truth.translation).norm() < 1e-9);
    }

    // identical anchors give the identity
    const RigidTransform eye = coarse_align(p, p);
    CHECK((eye.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(eye.translation.norm() < 1e-12);
}

TEST_CASE("coarse_align under 1 mm anchor noise stays within 1 degree") {
    const MorphableModel model = generate_procedural_model({2, 8, 3});
    HeadMesh mesh;
    mesh.topology = model.topology;
    mesh.vertices = model.mean_vertices;
    const Eigen::Matrix3Xd p = anchor_points(mesh, model);

    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        RigidTransform truth;
        truth.rotation = rotation_from_euler(testsupport::uniform(rng, -1, 1),
                                             testsupport::uniform(rng, -1, 1),
                                             testsupport::uniform(rng, -1, 1));
        truth.translation = testsupport::uniform_vec3(rng, -100, 100);
        Eigen::Matrix3Xd q = truth.inverse().apply_points(p);
        for (Eigen::Index i = 0; i < q.cols(); ++i)
            q.col(i) += testsupport::uniform_vec3(rng, -1.0, 1.0);
        const RigidTransform recovered = coarse_align(p, q);
        CHECK(rotation_angle(recovered.rotation, truth.rotation) <
              1.0 * std::numbers::pi / 180.0);
    }
}

TEST_CASE("coarse_align is the Procrustes optimum under random perturbations") {
    const MorphableModel model = generate_procedural_model({2, 8, 3});
    HeadMesh mesh;
    mesh.topology = model.topology;
    mesh.vertices = model.mean_vertices;
    const Eigen::Matrix3Xd p = anchor_points(mesh, model);

    std::mt19937_64 rng(6);
    RigidTransform truth;
    truth.rotation = rotation_from_euler(0.4, -0.2, 0.7);
    truth.translation = Eigen::Vector3d(30, -20, 55);
    Eigen::Matrix3Xd q = truth.inverse().apply_points(p);
    for (Eigen::Index i = 0; i < q.cols(); ++i)
        q.col(i) += testsupport::uniform_vec3(rng, -2.0, 2.0);

    const RigidTransform best = coarse_align(p, q);
    auto sse = [&](const RigidTransform& t) {
        return (t.apply_points(q) - p).colwise().squaredNorm().sum();
    };
    const double best_sse = sse(best);
    for (int trial = 0; trial < 100; ++trial) {
        const double angle = testsupport::uniform(rng, -0.087, 0.087); // up to 5 degrees
        RigidTransform jiggle;
        jiggle.rotation =
            Eigen::AngleAxisd(angle, testsupport::uniform_vec3(rng, -1, 1).normalized())
                .toRotationMatrix();
        jiggle.translation = testsupport::uniform_vec3(rng, -5.0, 5.0);
        CHECK(best_sse <= sse(jiggle.compose(best)) + 1e-9);
    }
}

TEST_CASE("coarse_align rejects degenerate anchor configurations") {
    Eigen::Matrix3Xd line(3, 6);
    for (int i = 0; i < 6; ++i) line.col(i) = Eigen::Vector3d(static_cast<double>(i), 0, 0);
    CHECK_THROWS_AS(coarse_align(line, line), AlignmentError);
    Eigen::Matrix3Xd two(3, 2);
    two.setRandom();
    CHECK_THROWS_AS(coarse_align(two, two), InvalidArgument);
}

TEST_CASE("icp on identical meshes returns the identity in one iteration") {
    const MorphableModel model = generate_procedural_model({2, 8, 3});
    const HeadMesh mesh = deformed_mesh(model, 7);
    const IcpResult result = icp_refine(mesh, mesh, RigidTransform{});
    CHECK(result.iterations == 1);
    CHECK_FALSE(result.failed);
    CHECK((result.transform.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(result.transform.translation.norm() < 1e-9);
    CHECK(result.rmse_history.size() == 1);
    CHECK(result.rmse_history[0] == 0.0);
}

TEST_CASE("icp recovers a small rigid perturbation from an identity init") {
    const MorphableModel model = generate_procedural_model({3, 15, 7});
    const HeadMesh reference = deformed_mesh(model, 8);

    RigidTransform perturb;
    perturb.rotation =
        Eigen::AngleAxisd(5.0 * std::numbers::pi / 180.0, Eigen::Vector3d(0.3, 0.9, -0.2).normalized())
            .toRotationMatrix();
    perturb.translation = Eigen::Vector3d(3.0, -2.0, 3.0); // 5 mm magnitude

    HeadMesh recon = reference;
    recon.vertices = perturb.apply_points(reference.vertices);

    const IcpResult result = icp_refine(reference, recon, RigidTransform{});
    CHECK_FALSE(result.failed);
    const RigidTransform expected = perturb.inverse();
    CHECK(rotation_angle(result.transform.rotation, expected.rotation) <
          0.2 * std::numbers::pi / 180.0);
    CHECK((result.transform.translation - expected.translation).norm() < 0.2);

    // trimmed RMSE never increases along the iteration log
    for (std::size_t i = 1; i < result.rmse_history.size(); ++i)
        CHECK(result.rmse_history[i] <= result.rmse_history[i - 1] + 1e-12);
}

TEST_CASE("icp fails cleanly on non-overlapping meshes") {
    const MorphableModel model = generate_procedural_model({2, 8, 3});
    const HeadMesh reference = deformed_mesh(model, 9);
    HeadMesh recon = reference;
    recon.vertices.colwise() += Eigen::Vector3d(1000.0, 0, 0);
    CHECK_THROWS_AS(icp_refine(reference, recon, RigidTransform{}), AlignmentError);
}

TEST_CASE("point-to-plane rmse: identical meshes and normal-offset surfaces") {
    const MorphableModel model = generate_procedural_model({3, 15, 7});
    const HeadMesh mesh = deformed_mesh(model, 10);
    CHECK(point_to_plane_rmse(mesh, mesh) == 0.0);

    const Eigen::Matrix3Xd normals = vertex_normals(mesh);
    HeadMesh offset = mesh;
    offset.vertices = mesh.vertices + 1.5 * normals;
    CHECK(point_to_plane_rmse(mesh, offset) == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("accelerated rmse equals the O(N^2) brute force") {
    const MorphableModel model = generate_procedural_model({2, 10, 11});
    const HeadMesh reference = deformed_mesh(model, 11);
    const HeadMesh recon = deformed_mesh(model, 12);
    REQUIRE(reference.vertex_count() <= 500);

    const Eigen::Matrix3Xd normals = vertex_normals(reference);
    double sq = 0.0;
    for (Eigen::Index i = 0; i < reference.vertices.cols(); ++i) {
        const Eigen::Index j = brute_force_nearest(recon.vertices, reference.vertices.col(i));
        const double e = (reference.vertices.col(i) - recon.vertices.col(j)).dot(normals.col(i));
        sq += e * e;
    }
    const double brute = std::sqrt(sq / static_cast<double>(reference.vertices.cols()));
    const double fast = point_to_plane_rmse(reference, recon);
    CHECK(std::abs(fast - brute) <= 1e-12 * std::max(1.0, brute));
}

TEST_CASE("rmse is invariant under a common rigid motion") {
    const MorphableModel model = generate_procedural_model({2, 10, 11});
    const HeadMesh reference = deformed_mesh(model, 13);
    const HeadMesh recon = deformed_mesh(model, 14);
    const double base = point_to_plane_rmse(reference, recon);

    std::mt19937_64 rng(15);
    for (int trial = 0; trial < 10; ++trial) {
        RigidTransform t;
        t.rotation = rotation_from_euler(testsupport::uniform(rng, -3, 3),
                                         testsupport::uniform(rng, -3, 3),
                                         testsupport::uniform(rng, -3, 3));
        t.translation = testsupport::uniform_vec3(rng, -500, 500);
        HeadMesh ref_t = reference, rec_t = recon;
        ref_t.vertices = t.apply_points(reference.vertices);
        rec_t.vertices = t.apply_points(recon.vertices);
        CHECK(std::abs(point_to_plane_rmse(ref_t, rec_t) - base) < 1e-9);
    }
}

TEST_CASE("depth error statistics: constants and the sort-based oracle") {
    const MorphableModel model = generate_procedural_model({3, 10, 17});
    const HeadMesh mesh = deformed_mesh(model, 16);

    const DepthErrorStats zero = depth_error_stats(mesh, mesh);
    CHECK(zero.mean == 0.0);
    CHECK(zero.stddev == 0.0);
    CHECK(zero.median == 0.0);
    CHECK(zero.delta90 == 0.0);

    HeadMesh shifted = mesh;
    shifted.vertices.row(2).array() += 2.0;
    const DepthErrorStats constant = depth_error_stats(mesh, shifted);
    CHECK(constant.mean == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(constant.stddev == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(constant.median == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(constant.delta90 == doctest::Approx(2.0).epsilon(1e-12));

    // random small per-vertex offsets; nearest neighbor is the source vertex,
    // so the expected error field is known exactly
    std::mt19937_64 rng(17);
    HeadMesh jittered = mesh;
    std::vector<double> expected_errors;
    for (Eigen::Index i = 0; i < mesh.vertices.cols(); ++i) {
        const Eigen::Vector3d d = testsupport::uniform_vec3(rng, -1.0, 1.0);
        jittered.vertices.col(i) += d;
        expected_errors.push_back(std::abs(d.z()));
    }
    const DepthErrorStats stats = depth_error_stats(mesh, jittered);

    const std::size_t n = expected_errors.size();
    std::vector<double> sorted = expected_errors;
    std::sort(sorted.begin(), sorted.end());
    const double mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
    double var = 0.0;
    for (double e : sorted) var += (e - mean) * (e - mean);
    const double sd = std::sqrt(var / n);
    const double median = (n % 2) ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    const std::size_t tail = std::max<std::size_t>(1, n / 10);
    const double d90 =
        std::accumulate(sorted.end() - static_cast<std::ptrdiff_t>(tail), sorted.end(), 0.0) / tail;

    CHECK(stats.mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(stats.stddev == doctest::Approx(sd).epsilon(1e-12));
    CHECK(stats.median == doctest::Approx(median).epsilon(1e-12));
    CHECK(stats.delta90 == doctest::Approx(d90).epsilon(1e-12));
    CHECK(stats.delta90 >= stats.mean);
}

TEST_CASE("full evaluation pipeline on a perturbed copy") {
    const MorphableModel model = generate_procedural_model({3, 15, 19});
    const HeadMesh reference = deformed_mesh(model, 18);

    RigidTransform displace;
    displace.rotation =
        Eigen::AngleAxisd(4.0 * std::numbers::pi / 180.0, Eigen::Vector3d(1, 2, 3).normalized())
            .toRotationMatrix();
    displace.translation = Eigen::Vector3d(4, -3, 6);
    HeadMesh recon = reference;
    recon.vertices = displace.apply_points(reference.vertices);

    const EvalReport report = evaluate_reconstruction(
        reference, recon, anchor_points(reference, model), anchor_points(recon, model));
    CHECK_FALSE(report.icp.failed);
    CHECK(report.rmse < 1e-6);
    CHECK(report.depth.mean < 1e-6);
    CHECK(report.n_reference_vertices == reference.vertex_count());

    const std::string json = eval_report_to_json(report);
    CHECK(json.find("\"rmse\"") != std::string::npos);
    const std::string table = eval_report_table(report);
    CHECK(table.find("delta90") != std::string::npos);
    CHECK(table.find("rmse") != std::string::npos);
}
