#pragma once

#include <vector>

#include <Eigen/Core>

namespace headfit {

/// Static balanced kd-tree over 3D points for nearest-neighbor queries.
/// Ties in distance resolve to the lowest point index, matching a
/// first-wins linear scan, so accelerated and brute-force searches agree
/// exactly.
class KdTree3 {
public:
    explicit KdTree3(const Eigen::Matrix3Xd& points);

    /// Index of the nearest stored point. points must be non-empty.
    Eigen::Index nearest(const Eigen::Vector3d& query) const;

    Eigen::Index size() const { return points_.cols(); }
    const Eigen::Matrix3Xd& points() const { return points_; }

private:
    struct Node {
        Eigen::Index point = -1;
        int axis = 0;
        int left = -1;
        int right = -1;
    };

    int build(std::vector<Eigen::Index>& indices, int begin, int end, int depth);
    void search(int node, const Eigen::Vector3d& query, double& best_sq,
                Eigen::Index& best_index) const;

    Eigen::Matrix3Xd points_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

} // namespace headfit
