#include "headfit/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>

#include <Eigen/Dense>
#include <json.hpp>

#include "headfit/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "model serialization assumes a little-endian host");

namespace headfit {

namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'M', 'M', 'H', 'E', 'A', 'D', '0', '1'};
constexpr double kSemiAxes[3] = {90.0, 110.0, 130.0};
// Landmark candidates keep unit-sphere z below -kFaceCapCosine: a forward cap
// that models the face region and avoids grazing silhouette geometry.
constexpr double kFaceCapCosine = 0.45;

// Uniform in [0, 1) with all 53 mantissa bits, independent of stdlib
// distribution internals.
double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Box-Muller; deterministic across platforms for a given engine state.
double gaussian(std::mt19937_64& rng) {
    const double u1 = 1.0 - uniform01(rng); // (0, 1]
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::uint32_t> farthest_point_sample(const Eigen::Matrix3Xd& points,
                                                 const std::vector<std::uint32_t>& candidates,
                                                 std::uint32_t start, std::size_t count) {
    std::vector<std::uint32_t> picked;
    picked.reserve(count);
    picked.push_back(start);
    std::vector<double> min_dist(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        min_dist[i] = (points.col(candidates[i]) - points.col(start)).norm();
    while (picked.size() < count) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < candidates.size(); ++i)
            if (min_dist[i] > min_dist[best]) best = i; // ties keep the lowest index
        picked.push_back(candidates[best]);
        for (std::size_t i = 0; i < candidates.size(); ++i)
            min_dist[i] = std::min(min_dist[i],
                                   (points.col(candidates[i]) - points.col(candidates[best])).norm());
    }
    return picked;
}

void write_bytes(std::ofstream& out, const void* data, std::size_t bytes) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

void read_bytes(std::ifstream& in, void* data, std::size_t bytes) {
    in.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(in.gcount()) != bytes)
        throw FormatError("corrupt model file: truncated payload");
}

} // namespace

void MorphableModel::validate() const {
    const std::size_t n = vertex_count();
    const std::size_t k = component_count();
    if (n == 0 || k == 0) throw InvalidArgument("model: empty mean or basis");
    if (static_cast<std::size_t>(basis.rows()) != 3 * n)
        throw InvalidArgument("model: basis row count must be 3 * vertex count");
    if (static_cast<std::size_t>(singular_values.size()) != k)
        throw InvalidArgument("model: singular value count must match basis columns");
    for (Eigen::Index i = 0; i < singular_values.size(); ++i) {
        if (!(singular_values[i] > 0.0))
            throw InvalidArgument("model: singular values must be strictly positive");
        if (i > 0 && singular_values[i] > singular_values[i - 1])
            throw InvalidArgument("model: singular values must be non-increasing");
    }
    if (!topology || topology->vertex_count() != n)
        throw InvalidArgument("model: topology missing or vertex count mismatch");
    if (landmark_indices.size() != kNumLandmarks)
        throw InvalidArgument("model: expected 24 landmark indices");
    if (eval_anchor_indices.size() != kNumEvalAnchors)
        throw InvalidArgument("model: expected 6 eval anchor indices");
    std::set<std::uint32_t> distinct(landmark_indices.begin(), landmark_indices.end());
    if (distinct.size() != landmark_indices.size())
        throw InvalidArgument("model: landmark indices must be pairwise distinct");
    for (std::uint32_t idx : landmark_indices)
        if (idx >= n) throw InvalidArgument("model: landmark index out of range");
    for (std::uint32_t idx : eval_anchor_indices)
        if (idx >= n) throw InvalidArgument("model: anchor index out of range");
    if (!mean_vertices.allFinite() || !basis.allFinite())
        throw InvalidArgument("model: non-finite data");
}

HeadMesh make_icosphere(int n_subdiv) {
    if (n_subdiv < 0 || n_subdiv > 7)
        throw InvalidArgument("icosphere: subdivision level must be in [0, 7]");

    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Eigen::Vector3d> verts = {
        {-1, phi, 0}, {1, phi, 0},  {-1, -phi, 0}, {1, -phi, 0}, {0, -1, phi},  {0, 1, phi},
        {0, -1, -phi}, {0, 1, -phi}, {phi, 0, -1},  {phi, 0, 1},  {-phi, 0, -1}, {-phi, 0, 1}};
    for (auto& v : verts) v.normalize();
    std::vector<std::array<std::uint32_t, 3>> faces = {
        {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9},  {5, 11, 4},
        {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6},  {3, 6, 8},
        {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
    // Enforce outward CCW winding (convex body centered at the origin).
    for (auto& f : faces) {
        const Eigen::Vector3d a = verts[f[0]], b = verts[f[1]], c = verts[f[2]];
        if ((b - a).cross(c - a).dot(a + b + c) < 0.0) std::swap(f[1], f[2]);
    }

    for (int level = 0; level < n_subdiv; ++level) {
        std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> midpoint;
        auto mid = [&](std::uint32_t a, std::uint32_t b) -> std::uint32_t {
            const auto key = std::minmax(a, b);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            const std::uint32_t idx = static_cast<std::uint32_t>(verts.size());
            verts.push_back((verts[a] + verts[b]).normalized());
            midpoint.emplace(key, idx);
            return idx;
        };
        std::vector<std::array<std::uint32_t, 3>> next;
        next.reserve(faces.size() * 4);
        for (const auto& f : faces) {
            const std::uint32_t ab = mid(f[0], f[1]);
            const std::uint32_t bc = mid(f[1], f[2]);
            const std::uint32_t ca = mid(f[2], f[0]);
            next.push_back({f[0], ab, ca});
            next.push_back({f[1], bc, ab});
            next.push_back({f[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        faces = std::move(next);
    }

    HeadMesh mesh;
    mesh.vertices.resize(3, static_cast<Eigen::Index>(verts.size()));
    for (std::size_t i = 0; i < verts.size(); ++i)
        mesh.vertices.col(static_cast<Eigen::Index>(i)) = verts[i];
    mesh.topology = MeshTopology::build(verts.size(), std::move(faces));
    return mesh;
}

MorphableModel generate_procedural_model(const ProceduralModelConfig& config) {
    if (config.n_subdiv < 2 || config.n_subdiv > 7)
        throw InvalidArgument("procedural model: n_subdiv must be in [2, 7]");
    HeadMesh sphere = make_icosphere(config.n_subdiv);
    const std::size_t n = sphere.vertex_count();
    if (config.n_components < 1 || static_cast<std::size_t>(config.n_components) > 3 * n)
        throw InvalidArgument("procedural model: n_components must be in [1, 3 * vertex count]");
    const std::size_t k = static_cast<std::size_t>(config.n_components);

    MorphableModel model;
    model.seed = config.seed;
    model.subdivisions = config.n_subdiv;
    model.topology = sphere.topology;
    model.mean_vertices.resize(3, static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            model.mean_vertices(c, static_cast<Eigen::Index>(i)) =
                kSemiAxes[c] * sphere.vertices(c, static_cast<Eigen::Index>(i));

    // Seeded random vertex fields, low-passed by repeated one-ring averaging,
    // then orthonormalized. Flattened layout: row 3 i + c for coordinate c of
    // vertex i, matching the column-major Matrix3Xd memory order.
    std::mt19937_64 rng(config.seed);
    Eigen::MatrixXd fields(3 * n, k);
    for (std::size_t col = 0; col < k; ++col)
        for (std::size_t row = 0; row < 3 * n; ++row)
            fields(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(col)) = gaussian(rng);

    const int rounds = 2 * config.n_subdiv + 4;
    const auto& topo = *model.topology;
    Eigen::MatrixXd smoothed(3 * n, k);
    for (int round = 0; round < rounds; ++round) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto ring = topo.ring(i);
            Eigen::Matrix<double, 3, Eigen::Dynamic> acc =
                fields.block(static_cast<Eigen::Index>(3 * i), 0, 3, static_cast<Eigen::Index>(k));
            for (std::uint32_t j : ring)
                acc += fields.block(static_cast<Eigen::Index>(3 * j), 0, 3,
                                    static_cast<Eigen::Index>(k));
            smoothed.block(static_cast<Eigen::Index>(3 * i), 0, 3, static_cast<Eigen::Index>(k)) =
                acc / static_cast<double>(ring.size() + 1);
        }
        fields.swap(smoothed);
    }

    Eigen::HouseholderQR<Eigen::MatrixXd> qr(fields);
    model.basis = qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(3 * n),
                                                                static_cast<Eigen::Index>(k));

    model.singular_values.resize(static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < k; ++i)
        model.singular_values[static_cast<Eigen::Index>(i)] =
            25.0 * std::pow(static_cast<double>(i + 1), -0.8);

    // Landmarks: farthest-point sampling over the face region of the front
    // (-z) hemisphere, seeded at the forward-most vertex. The face cap stays
    // clear of the silhouette rim so landmarks behave like facial features
    // rather than grazing contour points.
    std::vector<std::uint32_t> front;
    std::uint32_t start = 0;
    double min_z = std::numeric_limits<double>::infinity();
    const double face_cap = -kFaceCapCosine * kSemiAxes[2];
    for (std::size_t i = 0; i < n; ++i) {
        const double z = model.mean_vertices(2, static_cast<Eigen::Index>(i));
        if (z < face_cap) front.push_back(static_cast<std::uint32_t>(i));
        if (z < min_z) {
            min_z = z;
            start = static_cast<std::uint32_t>(i);
        }
    }
    if (front.size() < kNumLandmarks)
        throw InvalidArgument("procedural model: not enough front-hemisphere vertices");
    model.landmark_indices = farthest_point_sample(model.mean_vertices, front, start, kNumLandmarks);

    Eigen::Matrix3Xd lm_points(3, kNumLandmarks);
    for (int i = 0; i < kNumLandmarks; ++i)
        lm_points.col(i) = model.mean_vertices.col(model.landmark_indices[static_cast<std::size_t>(i)]);
    std::vector<std::uint32_t> lm_ids(kNumLandmarks);
    for (int i = 0; i < kNumLandmarks; ++i) lm_ids[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(i);
    const auto anchor_local = farthest_point_sample(lm_points, lm_ids, 0, kNumEvalAnchors);
    model.eval_anchor_indices.clear();
    for (std::uint32_t a : anchor_local)
        model.eval_anchor_indices.push_back(model.landmark_indices[a]);

    model.validate();
    return model;
}

HeadMesh instantiate(const MorphableModel& model, const ShapeParams& params) {
    if (static_cast<std::size_t>(params.y.size()) != model.component_count())
        throw InvalidArgument("instantiate: shape parameter dimension mismatch");
    if (!params.y.allFinite())
        throw InvalidArgument("instantiate: shape parameters must be finite");
    HeadMesh mesh;
    mesh.topology = model.topology;
    const Eigen::VectorXd displacement = model.basis * params.y;
    mesh.vertices = model.mean_vertices +
                    Eigen::Map<const Eigen::Matrix3Xd>(displacement.data(), 3,
                                                       model.mean_vertices.cols());
    return mesh;
}

ShapeParams sample_shape_params(const MorphableModel& model, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    ShapeParams params;
    params.y.resize(model.singular_values.size());
    for (Eigen::Index i = 0; i < params.y.size(); ++i)
        params.y[i] = scale * model.singular_values[i] * (2.0 * uniform01(rng) - 1.0);
    return params;
}

namespace {
Eigen::Matrix3Xd gather(const HeadMesh& mesh, const std::vector<std::uint32_t>& indices) {
    Eigen::Matrix3Xd out(3, static_cast<Eigen::Index>(indices.size()));
    for (std::size_t i = 0; i < indices.size(); ++i)
        out.col(static_cast<Eigen::Index>(i)) = mesh.vertices.col(indices[i]);
    return out;
}
} // namespace

Eigen::Matrix3Xd landmark_points(const HeadMesh& mesh, const MorphableModel& model) {
    return gather(mesh, model.landmark_indices);
}

Eigen::Matrix3Xd anchor_points(const HeadMesh& mesh, const MorphableModel& model) {
    return gather(mesh, model.eval_anchor_indices);
}

void save_model(const MorphableModel& model, const std::filesystem::path& path) {
    model.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open model file for writing: " + path.string());

    const std::size_t n = model.vertex_count();
    const std::size_t k = model.component_count();
    const std::size_t f = model.topology->face_count();

    json header;
    header["version"] = 1;
    header["n_vertices"] = n;
    header["n_components"] = k;
    header["n_faces"] = f;
    header["n_landmarks"] = kNumLandmarks;
    header["n_anchors"] = kNumEvalAnchors;
    header["seed"] = model.seed;
    header["subdiv"] = model.subdivisions;
    header["units"] = "mm";
    const std::string header_str = header.dump();

    write_bytes(out, kMagic, sizeof(kMagic));
    const std::uint64_t header_len = header_str.size();
    write_bytes(out, &header_len, sizeof(header_len));
    write_bytes(out, header_str.data(), header_str.size());

    write_bytes(out, model.mean_vertices.data(), 3 * n * sizeof(double));
    write_bytes(out, model.basis.data(), 3 * n * k * sizeof(double));
    write_bytes(out, model.singular_values.data(), k * sizeof(double));
    for (const auto& face : model.topology->faces())
        write_bytes(out, face.data(), 3 * sizeof(std::uint32_t));
    write_bytes(out, model.landmark_indices.data(), kNumLandmarks * sizeof(std::uint32_t));
    write_bytes(out, model.eval_anchor_indices.data(), kNumEvalAnchors * sizeof(std::uint32_t));
    if (!out) throw IoError("failed writing model file: " + path.string());
}

MorphableModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model file: " + path.string());

    char magic[8];
    read_bytes(in, magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw FormatError("corrupt model file: bad magic");

    std::uint64_t header_len = 0;
    read_bytes(in, &header_len, sizeof(header_len));
    if (header_len > (1u << 20)) throw FormatError("corrupt model file: oversized header");
    std::string header_str(header_len, '\0');
    read_bytes(in, header_str.data(), header_len);

    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception&) {
        throw FormatError("corrupt model file: unparseable header");
    }

    std::size_t n, k, f;
    try {
        if (header.at("version").get<int>() != 1)
            throw FormatError("corrupt model file: unsupported version");
        n = header.at("n_vertices").get<std::size_t>();
        k = header.at("n_components").get<std::size_t>();
        f = header.at("n_faces").get<std::size_t>();
        if (header.at("n_landmarks").get<int>() != kNumLandmarks ||
            header.at("n_anchors").get<int>() != kNumEvalAnchors)
            throw FormatError("corrupt model file: unexpected landmark/anchor counts");
    } catch (const json::exception&) {
        throw FormatError("corrupt model file: incomplete header");
    }
    if (n == 0 || k == 0 || f == 0 || n > (1u << 26) || k > 3 * n)
        throw FormatError("corrupt model file: implausible dimensions in header");

    MorphableModel model;
    model.seed = header.value("seed", std::uint64_t{0});
    model.subdivisions = header.value("subdiv", 0);
    model.mean_vertices.resize(3, static_cast<Eigen::Index>(n));
    read_bytes(in, model.mean_vertices.data(), 3 * n * sizeof(double));
    model.basis.resize(static_cast<Eigen::Index>(3 * n), static_cast<Eigen::Index>(k));
    read_bytes(in, model.basis.data(), 3 * n * k * sizeof(double));
    model.singular_values.resize(static_cast<Eigen::Index>(k));
    read_bytes(in, model.singular_values.data(), k * sizeof(double));

    std::vector<std::array<std::uint32_t, 3>> faces(f);
    for (auto& face : faces) read_bytes(in, face.data(), 3 * sizeof(std::uint32_t));
    model.landmark_indices.resize(kNumLandmarks);
    read_bytes(in, model.landmark_indices.data(), kNumLandmarks * sizeof(std::uint32_t));
    model.eval_anchor_indices.resize(kNumEvalAnchors);
    read_bytes(in, model.eval_anchor_indices.data(), kNumEvalAnchors * sizeof(std::uint32_t));

    in.peek();
    if (!in.eof()) throw FormatError("corrupt model file: trailing bytes beyond declared payload");

    try {
        model.topology = MeshTopology::build(n, std::move(faces));
    } catch (const GeometryError& e) {
        throw FormatError(std::string("corrupt model file: ") + e.what());
    }
    try {
        model.validate();
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("corrupt model file: ") + e.what());
    }
    return model;
}

} // namespace headfit
