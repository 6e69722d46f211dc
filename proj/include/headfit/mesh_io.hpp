#pragma once

#include <filesystem>

#include "headfit/mesh.hpp"

namespace headfit {

/// Writes vertices, per-vertex normals, and faces. OBJ is text with full
/// double precision (%.17g); PLY is binary little-endian with float64
/// positions and normals. The format follows the file extension
/// (.obj / .ply); anything else is rejected.
void save_mesh(const HeadMesh& mesh, const std::filesystem::path& path);

/// Reads an OBJ or PLY mesh written by save_mesh (any conforming OBJ with
/// v / f triangle lines works). Topology is rebuilt from the face list, so
/// the mesh must be a closed manifold. Stored normals are ignored;
/// vertex_normals recomputes them from the geometry.
HeadMesh load_mesh(const std::filesystem::path& path);

} // namespace headfit
