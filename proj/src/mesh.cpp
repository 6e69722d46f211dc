#include "headfit/mesh.hpp"

#include <map>
#include <utility>

#include "headfit/error.hpp"

namespace headfit {

std::shared_ptr<const MeshTopology> MeshTopology::build(
    std::size_t n_vertices, std::vector<std::array<std::uint32_t, 3>> faces) {
    for (const auto& f : faces) {
        for (std::uint32_t idx : f) {
            if (idx >= n_vertices)
                throw GeometryError("mesh topology: face index " + std::to_string(idx) +
                                    " out of range");
        }
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2])
            throw GeometryError("mesh topology: degenerate face");
    }

    // For a CCW face (a, b, c) the ring of a contains b followed by c, so the
    // successor map succ[a][b] = c walks each ring in CCW order.
    std::vector<std::map<std::uint32_t, std::uint32_t>> succ(n_vertices);
    auto add_edge = [&](std::uint32_t a, std::uint32_t b, std::uint32_t c) {
        auto [it, inserted] = succ[a].emplace(b, c);
        (void)it;
        if (!inserted)
            throw GeometryError("mesh topology: duplicate directed edge, mesh is not manifold");
    };
    for (const auto& f : faces) {
        add_edge(f[0], f[1], f[2]);
        add_edge(f[1], f[2], f[0]);
        add_edge(f[2], f[0], f[1]);
    }

    auto topo = std::shared_ptr<MeshTopology>(new MeshTopology());
    topo->n_vertices_ = n_vertices;
    topo->faces_ = std::move(faces);
    topo->ring_offsets_.resize(n_vertices + 1, 0);
    topo->ring_data_.reserve(topo->faces_.size() * 3);

    for (std::size_t v = 0; v < n_vertices; ++v) {
        const auto& around = succ[v];
        if (around.empty())
            throw GeometryError("mesh topology: isolated vertex " + std::to_string(v));
        const std::uint32_t start = around.begin()->first;
        std::uint32_t current = start;
        std::size_t emitted = 0;
        do {
            topo->ring_data_.push_back(current);
            ++emitted;
            auto it = around.find(current);
            if (it == around.end())
                throw GeometryError("mesh topology: open ring at vertex " + std::to_string(v));
            current = it->second;
            if (emitted > around.size())
                throw GeometryError("mesh topology: ring at vertex " + std::to_string(v) +
                                    " does not close");
        } while (current != start);
        if (emitted != around.size())
            throw GeometryError("mesh topology: disconnected ring at vertex " + std::to_string(v));
        topo->ring_offsets_[v + 1] = static_cast<std::uint32_t>(topo->ring_data_.size());
    }
    return topo;
}

} // namespace headfit
