#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace headfit {

/// Triangle-mesh connectivity: faces plus the one-ring of every vertex in
/// counter-clockwise order as seen from outside the surface. Built once from
/// a closed manifold face list and shared immutably between meshes.
class MeshTopology {
public:
    /// Builds connectivity from a face list whose winding is counter-clockwise
    /// viewed from outside. Throws GeometryError if the mesh is not a closed
    /// manifold (open fans, duplicate directed edges, disconnected rings).
    static std::shared_ptr<const MeshTopology> build(
        std::size_t n_vertices, std::vector<std::array<std::uint32_t, 3>> faces);

    std::size_t vertex_count() const { return n_vertices_; }
    std::size_t face_count() const { return faces_.size(); }

    const std::vector<std::array<std::uint32_t, 3>>& faces() const { return faces_; }

    /// One-ring of vertex v, cyclic, CCW from outside.
    std::span<const std::uint32_t> ring(std::size_t v) const {
        return {ring_data_.data() + ring_offsets_[v], ring_offsets_[v + 1] - ring_offsets_[v]};
    }

    const std::vector<std::uint32_t>& ring_offsets() const { return ring_offsets_; }
    const std::vector<std::uint32_t>& ring_data() const { return ring_data_; }

private:
    MeshTopology() = default;

    std::size_t n_vertices_ = 0;
    std::vector<std::array<std::uint32_t, 3>> faces_;
    std::vector<std::uint32_t> ring_offsets_; // n_vertices + 1 entries
    std::vector<std::uint32_t> ring_data_;
};

/// Concrete head geometry: vertex positions in millimetres plus shared
/// topology. The unit of rendering, fitting, and evaluation.
struct HeadMesh {
    std::shared_ptr<const MeshTopology> topology;
    Eigen::Matrix3Xd vertices; // one column per vertex, mm

    std::size_t vertex_count() const { return static_cast<std::size_t>(vertices.cols()); }
};

} // namespace headfit
