#include "headfit/raster.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "headfit/error.hpp"
#include "headfit/parallel.hpp"

static_assert(std::endian::native == std::endian::little,
              "map serialization assumes a little-endian host");

namespace headfit {

namespace {

using json = nlohmann::json;

constexpr char kNmapMagic[8] = {'N', 'M', 'A', 'P', '0', '0', '0', '1'};
constexpr double kInf = std::numeric_limits<double>::infinity();

struct ProjectedVertex {
    Eigen::Vector2d pixel;
    double depth = 0.0;
    bool valid = false;
};

struct RasterScene {
    std::vector<ProjectedVertex> projected;
    Eigen::Matrix3Xd normals; // world frame
    std::vector<std::uint32_t> front_faces;
};

RasterScene prepare_scene(const HeadMesh& mesh, const CameraFrame& camera) {
    RasterScene scene;
    scene.normals = vertex_normals(mesh);
    const std::size_t n = mesh.vertex_count();
    scene.projected.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& pv = scene.projected[i];
        pv.valid = camera.try_project(mesh.vertices.col(static_cast<Eigen::Index>(i)), pv.pixel,
                                      pv.depth);
    }
    const auto& faces = mesh.topology->faces();
    for (std::size_t fi = 0; fi < faces.size(); ++fi) {
        const auto& f = faces[fi];
        if (!scene.projected[f[0]].valid || !scene.projected[f[1]].valid ||
            !scene.projected[f[2]].valid)
            continue;
        const Eigen::Vector3d a = mesh.vertices.col(f[0]);
        const Eigen::Vector3d b = mesh.vertices.col(f[1]);
        const Eigen::Vector3d c = mesh.vertices.col(f[2]);
        const Eigen::Vector3d face_normal = (b - a).cross(c - a);
        const Eigen::Vector3d view = (a + b + c) / 3.0 + camera.pose().t; // camera center is -t
        if (face_normal.dot(view) >= 0.0) continue;                       // back-facing
        scene.front_faces.push_back(static_cast<std::uint32_t>(fi));
    }
    return scene;
}

// Rasterizes every front face into the row band [y_begin, y_end). Each pixel
// is owned by exactly one band, so output is independent of banding.
void rasterize_band(const HeadMesh& mesh, const RasterScene& scene, NormalMap& map, int y_begin,
                    int y_end) {
    const auto& faces = mesh.topology->faces();
    for (std::uint32_t fi : scene.front_faces) {
        const auto& f = faces[fi];
        const Eigen::Vector2d a = scene.projected[f[0]].pixel;
        const Eigen::Vector2d b = scene.projected[f[1]].pixel;
        const Eigen::Vector2d c = scene.projected[f[2]].pixel;

        const double area = (b - a).x() * (c - a).y() - (b - a).y() * (c - a).x();
        if (std::abs(area) < 1e-12) continue;
        const double inv_area = 1.0 / area;

        const double min_x = std::min({a.x(), b.x(), c.x()});
        const double max_x = std::max({a.x(), b.x(), c.x()});
        const double min_y = std::min({a.y(), b.y(), c.y()});
        const double max_y = std::max({a.y(), b.y(), c.y()});

        const int x0 = std::max(0, static_cast<int>(std::floor(min_x - 0.5)));
        const int x1 = std::min(map.width - 1, static_cast<int>(std::ceil(max_x - 0.5)));
        const int y0 = std::max(y_begin, static_cast<int>(std::floor(min_y - 0.5)));
        const int y1 = std::min(y_end - 1, static_cast<int>(std::ceil(max_y - 0.5)));
        if (x0 > x1 || y0 > y1) continue;

        for (int py = y0; py <= y1; ++py) {
            for (int px = x0; px <= x1; ++px) {
                const Eigen::Vector2d s(px + 0.5, py + 0.5);
                const double w0 = ((b - s).x() * (c - s).y() - (b - s).y() * (c - s).x()) * inv_area;
                const double w1 = ((c - s).x() * (a - s).y() - (c - s).y() * (a - s).x()) * inv_area;
                const double w2 = 1.0 - w0 - w1;
                if (w0 < 0.0 || w1 < 0.0 || w2 < 0.0) continue;

                const double z = w0 * scene.projected[f[0]].depth +
                                 w1 * scene.projected[f[1]].depth +
                                 w2 * scene.projected[f[2]].depth;
                const std::size_t idx = map.index(px, py);
                if (z >= map.depth[idx]) continue;

                Eigen::Vector3d n = w0 * scene.normals.col(f[0]) + w1 * scene.normals.col(f[1]) +
                                    w2 * scene.normals.col(f[2]);
                const double norm = n.norm();
                if (norm < 1e-12) continue;
                map.depth[idx] = z;
                map.normals[idx] = n / norm;
                map.mask[idx] = 1;
            }
        }
    }
}

} // namespace

std::size_t LandmarkMap::visible_count() const {
    std::size_t n = 0;
    for (const auto& d : detections)
        if (d.visible) ++n;
    return n;
}

NormalMap render_normal_map(const HeadMesh& mesh, const CameraPose& pose, const Intrinsics& k,
                            int width, int height) {
    if (width <= 0 || height <= 0) throw InvalidArgument("render: image size must be positive");
    CameraFrame camera(pose, k);
    const RasterScene scene = prepare_scene(mesh, camera);
    if (scene.front_faces.empty())
        throw RenderError("render: no visible triangles (mesh behind camera or back-facing)");

    NormalMap map;
    map.width = width;
    map.height = height;
    map.normals.assign(static_cast<std::size_t>(width) * height, Eigen::Vector3d::Zero());
    map.depth.assign(static_cast<std::size_t>(width) * height, kInf);
    map.mask.assign(static_cast<std::size_t>(width) * height, 0);

    constexpr std::size_t kRowBand = 16;
    parallel_for_chunks(static_cast<std::size_t>(height), kRowBand,
                        [&](std::size_t y_begin, std::size_t y_end) {
                            rasterize_band(mesh, scene, map, static_cast<int>(y_begin),
                                           static_cast<int>(y_end));
                        });

    bool any = false;
    for (std::uint8_t m : map.mask)
        if (m) {
            any = true;
            break;
        }
    if (!any) throw RenderError("render: no pixel covered");
    return map;
}

LandmarkMap render_landmark_map(const HeadMesh& mesh, const MorphableModel& model,
                                const CameraPose& pose, const Intrinsics& k, int width,
                                int height) {
    const NormalMap rendered = render_normal_map(mesh, pose, k, width, height);
    CameraFrame camera(pose, k);

    LandmarkMap out;
    out.width = width;
    out.height = height;
    out.detections.resize(kNumLandmarks);
    for (int c = 0; c < kNumLandmarks; ++c) {
        LandmarkDetection& d = out.detections[static_cast<std::size_t>(c)];
        d.channel = c;
        const Eigen::Vector3d p = mesh.vertices.col(model.landmark_indices[static_cast<std::size_t>(c)]);
        Eigen::Vector2d pixel;
        double depth;
        if (!camera.try_project(p, pixel, depth)) continue; // behind camera: (-1,-1), invisible
        d.u = pixel.x();
        d.v = pixel.y();
        const int px = static_cast<int>(std::floor(pixel.x()));
        const int py = static_cast<int>(std::floor(pixel.y()));
        if (!rendered.in_bounds(px, py)) continue;
        d.visible = depth <= rendered.depth[rendered.index(px, py)] + kLandmarkDepthTolerance;
    }
    return out;
}

DenseLandmarkImage to_dense(const LandmarkMap& landmarks) {
    if (landmarks.width <= 0 || landmarks.height <= 0)
        throw InvalidArgument("to_dense: landmark map carries no image size");
    DenseLandmarkImage dense;
    dense.width = landmarks.width;
    dense.height = landmarks.height;
    dense.data.assign(static_cast<std::size_t>(kNumLandmarks) * dense.width * dense.height, 0.0);
    for (const auto& d : landmarks.detections) {
        if (!d.visible) continue;
        const int px = std::clamp(static_cast<int>(std::floor(d.u)), 0, dense.width - 1);
        const int py = std::clamp(static_cast<int>(std::floor(d.v)), 0, dense.height - 1);
        dense.at(d.channel, px, py) = 1.0;
    }
    return dense;
}

LandmarkMap extract_landmarks(const DenseLandmarkImage& dense) {
    constexpr double kThreshold = 0.5;
    LandmarkMap out;
    out.width = dense.width;
    out.height = dense.height;
    out.detections.resize(kNumLandmarks);
    const int w = dense.width, h = dense.height;

    for (int c = 0; c < kNumLandmarks; ++c) {
        LandmarkDetection& det = out.detections[static_cast<std::size_t>(c)];
        det.channel = c;

        int best_x = -1, best_y = -1;
        double best = -kInf;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (dense.at(c, x, y) > best) { // strict: first max in scan order wins ties
                    best = dense.at(c, x, y);
                    best_x = x;
                    best_y = y;
                }
        if (best < kThreshold) continue;

        // Flood-fill the 8-connected component of above-threshold pixels
        // around the maximum; detection = value-weighted centroid of centers.
        std::vector<std::uint8_t> seen(static_cast<std::size_t>(w) * h, 0);
        std::vector<std::pair<int, int>> stack = {{best_x, best_y}};
        seen[static_cast<std::size_t>(best_y) * w + best_x] = 1;
        double sum_w = 0.0, sum_u = 0.0, sum_v = 0.0;
        while (!stack.empty()) {
            const auto [x, y] = stack.back();
            stack.pop_back();
            const double value = dense.at(c, x, y);
            sum_w += value;
            sum_u += value * (x + 0.5);
            sum_v += value * (y + 0.5);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int nx = x + dx, ny = y + dy;
                    if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
                    std::uint8_t& mark = seen[static_cast<std::size_t>(ny) * w + nx];
                    if (mark || dense.at(c, nx, ny) < kThreshold) continue;
                    mark = 1;
                    stack.emplace_back(nx, ny);
                }
        }
        det.u = sum_u / sum_w;
        det.v = sum_v / sum_w;
        det.visible = true;
    }
    return out;
}

void save_normal_map(const NormalMap& map, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open normal map for writing: " + path.string());

    json header;
    header["version"] = 1;
    header["width"] = map.width;
    header["height"] = map.height;
    header["planes"] = {"nx", "ny", "nz", "depth"};
    header["dtype"] = "float32";
    header["mask"] = "uint8";
    header["normal_frame"] = "world";
    header["units"] = "mm";
    const std::string header_str = header.dump();

    out.write(kNmapMagic, sizeof(kNmapMagic));
    const std::uint64_t header_len = header_str.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

    const std::size_t count = static_cast<std::size_t>(map.width) * map.height;
    std::vector<float> plane(count);
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < count; ++i) plane[i] = static_cast<float>(map.normals[i][c]);
        out.write(reinterpret_cast<const char*>(plane.data()),
                  static_cast<std::streamsize>(count * sizeof(float)));
    }
    for (std::size_t i = 0; i < count; ++i) plane[i] = static_cast<float>(map.depth[i]);
    out.write(reinterpret_cast<const char*>(plane.data()),
              static_cast<std::streamsize>(count * sizeof(float)));
    out.write(reinterpret_cast<const char*>(map.mask.data()),
              static_cast<std::streamsize>(count));
    if (!out) throw IoError("failed writing normal map: " + path.string());
}

NormalMap load_normal_map(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open normal map: " + path.string());

    char magic[8];
    in.read(magic, sizeof(magic));
    if (in.gcount() != sizeof(magic) || std::memcmp(magic, kNmapMagic, sizeof(kNmapMagic)) != 0)
        throw FormatError("corrupt normal map: bad magic");
    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (in.gcount() != sizeof(header_len) || header_len > (1u << 20))
        throw FormatError("corrupt normal map: bad header length");
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (static_cast<std::uint64_t>(in.gcount()) != header_len)
        throw FormatError("corrupt normal map: truncated header");

    int width = 0, height = 0;
    try {
        const json header = json::parse(header_str);
        width = header.at("width").get<int>();
        height = header.at("height").get<int>();
        if (header.at("version").get<int>() != 1) throw FormatError("unsupported version");
    } catch (const json::exception&) {
        throw FormatError("corrupt normal map: unparseable header");
    }
    if (width <= 0 || height <= 0 || static_cast<std::int64_t>(width) * height > (1 << 28))
        throw FormatError("corrupt normal map: implausible dimensions");

    NormalMap map;
    map.width = width;
    map.height = height;
    const std::size_t count = static_cast<std::size_t>(width) * height;
    map.normals.assign(count, Eigen::Vector3d::Zero());
    map.depth.assign(count, 0.0);
    map.mask.assign(count, 0);

    std::vector<float> plane(count);
    auto read_plane = [&]() {
        in.read(reinterpret_cast<char*>(plane.data()),
                static_cast<std::streamsize>(count * sizeof(float)));
        if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float))
            throw FormatError("corrupt normal map: truncated plane data");
    };
    for (int c = 0; c < 3; ++c) {
        read_plane();
        for (std::size_t i = 0; i < count; ++i) map.normals[i][c] = plane[i];
    }
    read_plane();
    for (std::size_t i = 0; i < count; ++i) map.depth[i] = plane[i];
    in.read(reinterpret_cast<char*>(map.mask.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count)
        throw FormatError("corrupt normal map: truncated mask");
    return map;
}

void save_landmark_map(const LandmarkMap& landmarks, const std::filesystem::path& path) {
    json list = json::array();
    for (const auto& d : landmarks.detections) {
        json entry;
        entry["channel"] = d.channel;
        entry["u"] = d.u;
        entry["v"] = d.v;
        entry["visible"] = d.visible;
        list.push_back(entry);
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot open landmark file for writing: " + path.string());
    out << list.dump(2) << '\n';
    if (!out) throw IoError("failed writing landmark file: " + path.string());
}

LandmarkMap load_landmark_map(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open landmark file: " + path.string());
    json list;
    try {
        in >> list;
    } catch (const json::exception&) {
        throw FormatError("corrupt landmark file: unparseable JSON");
    }
    if (!list.is_array()) throw FormatError("corrupt landmark file: expected a JSON list");

    LandmarkMap out;
    out.detections.resize(kNumLandmarks);
    for (int c = 0; c < kNumLandmarks; ++c) out.detections[static_cast<std::size_t>(c)].channel = c;
    for (const auto& entry : list) {
        try {
            const int channel = entry.at("channel").get<int>();
            if (channel < 0 || channel >= kNumLandmarks)
                throw FormatError("corrupt landmark file: channel out of range");
            LandmarkDetection& d = out.detections[static_cast<std::size_t>(channel)];
            d.u = entry.at("u").get<double>();
            d.v = entry.at("v").get<double>();
            d.visible = entry.at("visible").get<bool>();
        } catch (const json::exception&) {
            throw FormatError("corrupt landmark file: incomplete detection entry");
        }
    }
    return out;
}

void write_normal_map_ppm(const NormalMap& map, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open image for writing: " + path.string());
    out << "P6\n" << map.width << ' ' << map.height << "\n255\n";
    const std::size_t count = static_cast<std::size_t>(map.width) * map.height;
    std::vector<std::uint8_t> row;
    row.reserve(count * 3);
    for (std::size_t i = 0; i < count; ++i) {
        for (int c = 0; c < 3; ++c) {
            const double v = map.mask[i] ? std::round(255.0 * (map.normals[i][c] + 1.0) / 2.0) : 0.0;
            row.push_back(static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0)));
        }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!out) throw IoError("failed writing image: " + path.string());
}

} // namespace headfit
