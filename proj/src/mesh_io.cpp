#include "headfit/mesh_io.hpp"

#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "headfit/error.hpp"
#include "headfit/geometry.hpp"

static_assert(std::endian::native == std::endian::little,
              "PLY serialization assumes a little-endian host");

namespace headfit {

namespace {

std::string fmt_g17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void save_obj(const HeadMesh& mesh, const Eigen::Matrix3Xd& normals,
              const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open mesh file for writing: " + path.string());
    out << "# headfit mesh\n";
    for (Eigen::Index i = 0; i < mesh.vertices.cols(); ++i)
        out << "v " << fmt_g17(mesh.vertices(0, i)) << ' ' << fmt_g17(mesh.vertices(1, i)) << ' '
            << fmt_g17(mesh.vertices(2, i)) << '\n';
    for (Eigen::Index i = 0; i < normals.cols(); ++i)
        out << "vn " << fmt_g17(normals(0, i)) << ' ' << fmt_g17(normals(1, i)) << ' '
            << fmt_g17(normals(2, i)) << '\n';
    for (const auto& f : mesh.topology->faces())
        out << "f " << f[0] + 1 << "//" << f[0] + 1 << ' ' << f[1] + 1 << "//" << f[1] + 1 << ' '
            << f[2] + 1 << "//" << f[2] + 1 << '\n';
    if (!out) throw IoError("failed writing mesh: " + path.string());
}

void save_ply(const HeadMesh& mesh, const Eigen::Matrix3Xd& normals,
              const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open mesh file for writing: " + path.string());
    const std::size_t nv = mesh.vertex_count();
    const std::size_t nf = mesh.topology->face_count();
    out << "ply\nformat binary_little_endian 1.0\n"
        << "element vertex " << nv << '\n'
        << "property double x\nproperty double y\nproperty double z\n"
        << "property double nx\nproperty double ny\nproperty double nz\n"
        << "element face " << nf << '\n'
        << "property list uchar uint vertex_indices\nend_header\n";
    for (std::size_t i = 0; i < nv; ++i) {
        double row[6] = {mesh.vertices(0, static_cast<Eigen::Index>(i)),
                         mesh.vertices(1, static_cast<Eigen::Index>(i)),
                         mesh.vertices(2, static_cast<Eigen::Index>(i)),
                         normals(0, static_cast<Eigen::Index>(i)),
                         normals(1, static_cast<Eigen::Index>(i)),
                         normals(2, static_cast<Eigen::Index>(i))};
        out.write(reinterpret_cast<const char*>(row), sizeof(row));
    }
    for (const auto& f : mesh.topology->faces()) {
        const std::uint8_t count = 3;
        out.write(reinterpret_cast<const char*>(&count), 1);
        out.write(reinterpret_cast<const char*>(f.data()), 3 * sizeof(std::uint32_t));
    }
    if (!out) throw IoError("failed writing mesh: " + path.string());
}

HeadMesh load_obj(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open mesh file: " + path.string());
    std::vector<Eigen::Vector3d> verts;
    std::vector<std::array<std::uint32_t, 3>> faces;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            Eigen::Vector3d v;
            if (!(ls >> v.x() >> v.y() >> v.z()))
                throw FormatError("corrupt OBJ: malformed vertex line");
            verts.push_back(v);
        } else if (tag == "f") {
            std::array<std::uint32_t, 3> f{};
            for (int c = 0; c < 3; ++c) {
                std::string token;
                if (!(ls >> token)) throw FormatError("corrupt OBJ: face needs three indices");
                const long idx = std::strtol(token.c_str(), nullptr, 10); // "7//7" parses as 7
                if (idx < 1 || static_cast<std::size_t>(idx) > verts.size())
                    throw FormatError("corrupt OBJ: face index out of range");
                f[static_cast<std::size_t>(c)] = static_cast<std::uint32_t>(idx - 1);
            }
            std::string extra;
            if (ls >> extra) throw FormatError("corrupt OBJ: only triangles are supported");
            faces.push_back(f);
        }
    }
    if (verts.empty() || faces.empty()) throw FormatError("corrupt OBJ: no geometry found");

    HeadMesh mesh;
    mesh.vertices.resize(3, static_cast<Eigen::Index>(verts.size()));
    for (std::size_t i = 0; i < verts.size(); ++i)
        mesh.vertices.col(static_cast<Eigen::Index>(i)) = verts[i];
    mesh.topology = MeshTopology::build(verts.size(), std::move(faces));
    return mesh;
}

HeadMesh load_ply(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open mesh file: " + path.string());
    std::string line;
    std::size_t nv = 0, nf = 0;
    bool header_ok = false;
    std::vector<std::string> vertex_props;
    std::string element;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "ply" || tag == "comment") continue;
        if (tag == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt != "binary_little_endian")
                throw FormatError("corrupt PLY: only binary little-endian is supported");
        } else if (tag == "element") {
            std::string name;
            std::size_t count;
            ls >> name >> count;
            element = name;
            if (name == "vertex") nv = count;
            else if (name == "face") nf = count;
        } else if (tag == "property") {
            if (element == "vertex") {
                std::string type, name;
                ls >> type >> name;
                if (type != "double") throw FormatError("corrupt PLY: expected double properties");
                vertex_props.push_back(name);
            }
        } else if (tag == "end_header") {
            header_ok = true;
            break;
        }
    }
    if (!header_ok || nv == 0 || nf == 0) throw FormatError("corrupt PLY: incomplete header");
    if (vertex_props.size() < 3 || vertex_props[0] != "x" || vertex_props[1] != "y" ||
        vertex_props[2] != "z")
        throw FormatError("corrupt PLY: unsupported vertex layout");

    HeadMesh mesh;
    mesh.vertices.resize(3, static_cast<Eigen::Index>(nv));
    std::vector<double> row(vertex_props.size());
    for (std::size_t i = 0; i < nv; ++i) {
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(double)));
        if (static_cast<std::size_t>(in.gcount()) != row.size() * sizeof(double))
            throw FormatError("corrupt PLY: truncated vertex data");
        mesh.vertices.col(static_cast<Eigen::Index>(i)) = Eigen::Vector3d(row[0], row[1], row[2]);
    }
    std::vector<std::array<std::uint32_t, 3>> faces(nf);
    for (auto& f : faces) {
        std::uint8_t count = 0;
        in.read(reinterpret_cast<char*>(&count), 1);
        if (in.gcount() != 1 || count != 3)
            throw FormatError("corrupt PLY: only triangle faces are supported");
        in.read(reinterpret_cast<char*>(f.data()), 3 * sizeof(std::uint32_t));
        if (static_cast<std::size_t>(in.gcount()) != 3 * sizeof(std::uint32_t))
            throw FormatError("corrupt PLY: truncated face data");
    }
    mesh.topology = MeshTopology::build(nv, std::move(faces));
    return mesh;
}

} // namespace

void save_mesh(const HeadMesh& mesh, const std::filesystem::path& path) {
    const Eigen::Matrix3Xd normals = vertex_normals(mesh);
    const std::string ext = path.extension().string();
    if (ext == ".obj") save_obj(mesh, normals, path);
    else if (ext == ".ply") save_ply(mesh, normals, path);
    else throw InvalidArgument("save_mesh: unsupported extension '" + ext + "' (use .obj or .ply)");
}

HeadMesh load_mesh(const std::filesystem::path& path) {
    const std::string ext = path.extension().string();
    if (ext == ".obj") return load_obj(path);
    if (ext == ".ply") return load_ply(path);
    throw InvalidArgument("load_mesh: unsupported extension '" + ext + "' (use .obj or .ply)");
}

} // namespace headfit
