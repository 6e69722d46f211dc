#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "headfit/error.hpp"
#include "headfit/model.hpp"
#include "support.hpp"

using namespace headfit;

namespace {
ProceduralModelConfig small_config() {
    ProceduralModelConfig config;
    config.n_subdiv = 2;
    config.n_components = 12;
    config.seed = 42;
    return config;
}
} // namespace

TEST_CASE("icosphere vertex and face counts follow 10*4^n+2 / 20*4^n") {
    for (int n = 0; n <= 3; ++n) {
        const HeadMesh sphere = make_icosphere(n);
        const std::size_t expected_v = 10u * (1u << (2 * n)) + 2u;
        const std::size_t expected_f = 20u * (1u << (2 * n));
        CHECK(sphere.vertex_count() == expected_v);
        CHECK(sphere.topology->face_count() == expected_f);
    }
    // the documented reference size
    CHECK(make_icosphere(3).vertex_count() == 642);
    CHECK(make_icosphere(3).topology->face_count() == 1280);
}

TEST_CASE("icosphere vertices lie on the unit sphere with closed rings") {
    const HeadMesh sphere = make_icosphere(2);
    for (Eigen::Index i = 0; i < sphere.vertices.cols(); ++i)
        CHECK(sphere.vertices.col(i).norm() == doctest::Approx(1.0).epsilon(1e-12));
    std::size_t ring_total = 0;
    for (std::size_t v = 0; v < sphere.vertex_count(); ++v)
        ring_total += sphere.topology->ring(v).size();
    // each face contributes its three corners to three rings
    CHECK(ring_total == 3 * sphere.topology->face_count());
}

TEST_CASE("procedural model determinism: identical seeds give identical bytes") {
    testsupport::TempDir dir;
    const auto config = small_config();
    const auto path_a = dir.path() / "a.mmhead";
    const auto path_b = dir.path() / "b.mmhead";
    save_model(generate_procedural_model(config), path_a);
    save_model(generate_procedural_model(config), path_b);
    CHECK(testsupport::read_file_bytes(path_a) == testsupport::read_file_bytes(path_b));

    auto other = config;
    other.seed = 43;
    save_model(generate_procedural_model(other), path_b);
    CHECK(testsupport::read_file_bytes(path_a) != testsupport::read_file_bytes(path_b));
}

TEST_CASE("basis columns are orthonormal") {
    const MorphableModel model = generate_procedural_model(small_config());
    const Eigen::MatrixXd gram = model.basis.transpose() * model.basis;
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(gram.rows(), gram.cols());
    CHECK((gram - eye).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("singular values decay as 25 k^-0.8") {
    const MorphableModel model = generate_procedural_model(small_config());
    CHECK(model.singular_values[0] == doctest::Approx(25.0));
    for (Eigen::Index k = 0; k < model.singular_values.size(); ++k)
        CHECK(model.singular_values[k] ==
              doctest::Approx(25.0 * std::pow(static_cast<double>(k + 1), -0.8)));
}

TEST_CASE("instantiate: zero parameters reproduce the mean exactly") {
    const MorphableModel model = generate_procedural_model(small_config());
    ShapeParams zero;
    zero.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.component_count()));
    const HeadMesh mesh = instantiate(model, zero);
    CHECK((mesh.vertices - model.mean_vertices).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("instantiate is affine in the parameters") {
    const MorphableModel model = generate_procedural_model(small_config());
    const ShapeParams y1 = sample_shape_params(model, 1);
    const ShapeParams y2 = sample_shape_params(model, 2);

    const Eigen::Matrix3Xd d1 = instantiate(model, y1).vertices - model.mean_vertices;
    const Eigen::Matrix3Xd d2 = instantiate(model, y2).vertices - model.mean_vertices;

    ShapeParams sum;
    sum.y = y1.y + y2.y;
    const Eigen::Matrix3Xd d_sum = instantiate(model, sum).vertices - model.mean_vertices;
    const double scale = d_sum.cwiseAbs().maxCoeff();
    CHECK((d_sum - (d1 + d2)).cwiseAbs().maxCoeff() < 1e-12 * std::max(scale, 1.0));

    ShapeParams scaled;
    scaled.y = 2.5 * y1.y;
    const Eigen::Matrix3Xd d_scaled = instantiate(model, scaled).vertices - model.mean_vertices;
    CHECK((d_scaled - 2.5 * d1).cwiseAbs().maxCoeff() < 1e-12 * std::max(scale, 1.0));
}

TEST_CASE("instantiate with a unit vector slices the corresponding basis column") {
    const MorphableModel model = generate_procedural_model(small_config());
    ShapeParams e1;
    e1.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.component_count()));
    e1.y[0] = 1.0;
    const HeadMesh mesh = instantiate(model, e1);
    for (std::size_t i = 0; i < model.vertex_count(); ++i)
        for (int c = 0; c < 3; ++c) {
            const double displacement = mesh.vertices(c, static_cast<Eigen::Index>(i)) -
                                        model.mean_vertices(c, static_cast<Eigen::Index>(i));
            CHECK(displacement ==
                  doctest::Approx(model.basis(static_cast<Eigen::Index>(3 * i + c), 0))
                      .epsilon(1e-12));
        }
}

TEST_CASE("instantiate rejects bad parameters") {
    const MorphableModel model = generate_procedural_model(small_config());
    ShapeParams wrong;
    wrong.y = Eigen::VectorXd::Zero(3);
    CHECK_THROWS_AS(instantiate(model, wrong), InvalidArgument);
    ShapeParams nan;
    nan.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.component_count()));
    nan.y[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(instantiate(model, nan), InvalidArgument);
}

TEST_CASE("model file round-trips bitwise") {
    testsupport::TempDir dir;
    const MorphableModel model = generate_procedural_model(small_config());
    const auto path_a = dir.path() / "m.mmhead";
    const auto path_b = dir.path() / "m2.mmhead";
    save_model(model, path_a);
    const MorphableModel loaded = load_model(path_a);
    save_model(loaded, path_b);
    CHECK(testsupport::read_file_bytes(path_a) == testsupport::read_file_bytes(path_b));
    CHECK(loaded.basis == model.basis);
    CHECK(loaded.mean_vertices == model.mean_vertices);
    CHECK(loaded.singular_values == model.singular_values);
    CHECK(loaded.landmark_indices == model.landmark_indices);
    CHECK(loaded.eval_anchor_indices == model.eval_anchor_indices);
}

TEST_CASE("truncated model file raises a corrupt-file error") {
    testsupport::TempDir dir;
    const auto path = dir.path() / "m.mmhead";
    save_model(generate_procedural_model(small_config()), path);
    auto bytes = testsupport::read_file_bytes(path);
    bytes.resize(bytes.size() / 2);
    std::ofstream(path, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_model(path), FormatError);
}

TEST_CASE("model file with inconsistent header raises a structured error") {
    testsupport::TempDir dir;
    const auto path = dir.path() / "m.mmhead";
    save_model(generate_procedural_model(small_config()), path);
    auto bytes = testsupport::read_file_bytes(path);
    // bump n_vertices in the JSON header
    std::string text(bytes.begin(), bytes.end());
    const auto pos = text.find("\"n_vertices\":162");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 16, "\"n_vertices\":163");
    std::ofstream(path, std::ios::binary).write(text.data(), static_cast<std::streamsize>(text.size()));
    CHECK_THROWS_AS(load_model(path), FormatError);
}

TEST_CASE("model file with bad magic raises a structured error") {
    testsupport::TempDir dir;
    const auto path = dir.path() / "m.mmhead";
    std::ofstream(path, std::ios::binary) << "NOTAMODEL";
    CHECK_THROWS_AS(load_model(path), FormatError);
    CHECK_THROWS_AS(load_model(dir.path() / "missing.mmhead"), IoError);
}

TEST_CASE("landmarks: gather semantics, translation equivariance, distinctness") {
    const MorphableModel model = generate_procedural_model(small_config());
    ShapeParams zero;
    zero.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.component_count()));
    HeadMesh mesh = instantiate(model, zero);

    const Eigen::Matrix3Xd points = landmark_points(mesh, model);
    REQUIRE(points.cols() == kNumLandmarks);
    for (int j = 0; j < kNumLandmarks; ++j)
        CHECK(points.col(j) == model.mean_vertices.col(model.landmark_indices[static_cast<std::size_t>(j)]));

    // all landmarks on the front hemisphere
    for (int j = 0; j < kNumLandmarks; ++j) CHECK(points(2, j) < 0.0);

    // pairwise distinct
    for (int i = 0; i < kNumLandmarks; ++i)
        for (int j = i + 1; j < kNumLandmarks; ++j)
            CHECK((points.col(i) - points.col(j)).norm() > 1.0);

    const Eigen::Vector3d shift(3.0, -4.0, 12.0);
    mesh.vertices.colwise() += shift;
    const Eigen::Matrix3Xd shifted = landmark_points(mesh, model);
    for (int j = 0; j < kNumLandmarks; ++j)
        CHECK((shifted.col(j) - points.col(j) - shift).norm() < 1e-12);

    const Eigen::Matrix3Xd anchors = anchor_points(mesh, model);
    CHECK(anchors.cols() == kNumEvalAnchors);
    // anchors are a subset of the landmarks
    for (std::uint32_t a : model.eval_anchor_indices) {
        bool found = false;
        for (std::uint32_t lm : model.landmark_indices) found |= (a == lm);
        CHECK(found);
    }
}

TEST_CASE("generator validates its configuration") {
    ProceduralModelConfig config;
    config.n_subdiv = 1;
    CHECK_THROWS_AS(generate_procedural_model(config), InvalidArgument);
    config.n_subdiv = 2;
    config.n_components = 0;
    CHECK_THROWS_AS(generate_procedural_model(config), InvalidArgument);
    config.n_components = 100000;
    CHECK_THROWS_AS(generate_procedural_model(config), InvalidArgument);
}

TEST_CASE("mean shape is the documented ellipsoid") {
    const MorphableModel model = generate_procedural_model(small_config());
    Eigen::Vector3d max_abs = Eigen::Vector3d::Zero();
    for (Eigen::Index i = 0; i < model.mean_vertices.cols(); ++i)
        max_abs = max_abs.cwiseMax(model.mean_vertices.col(i).cwiseAbs());
    CHECK(max_abs.x() == doctest::Approx(90.0).epsilon(1e-6));
    CHECK(max_abs.y() == doctest::Approx(110.0).epsilon(1e-6));
    CHECK(max_abs.z() == doctest::Approx(130.0).epsilon(1e-6));
}
