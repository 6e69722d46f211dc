#include "headfit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/SVD>
#include <json.hpp>

#include "headfit/error.hpp"
#include "headfit/geometry.hpp"
#include "headfit/kdtree.hpp"
#include "headfit/parallel.hpp"

namespace headfit {

// ---------------------------------------------------------------------------
// KdTree3
// ---------------------------------------------------------------------------

KdTree3::KdTree3(const Eigen::Matrix3Xd& points) : points_(points) {
    if (points_.cols() == 0) throw InvalidArgument("kd-tree: empty point set");
    std::vector<Eigen::Index> indices(static_cast<std::size_t>(points_.cols()));
    std::iota(indices.begin(), indices.end(), 0);
    nodes_.reserve(indices.size());
    root_ = build(indices, 0, static_cast<int>(indices.size()), 0);
}

int KdTree3::build(std::vector<Eigen::Index>& indices, int begin, int end, int depth) {
    if (begin >= end) return -1;
    const int axis = depth % 3;
    const int mid = begin + (end - begin) / 2;
    std::nth_element(indices.begin() + begin, indices.begin() + mid, indices.begin() + end,
                     [&](Eigen::Index a, Eigen::Index b) {
                         const double ca = points_(axis, a), cb = points_(axis, b);
                         return ca < cb || (ca == cb && a < b);
                     });
    const int node_id = static_cast<int>(nodes_.size());
    nodes_.push_back({indices[static_cast<std::size_t>(mid)], axis, -1, -1});
    const int left = build(indices, begin, mid, depth + 1);
    const int right = build(indices, mid + 1, end, depth + 1);
    nodes_[static_cast<std::size_t>(node_id)].left = left;
    nodes_[static_cast<std::size_t>(node_id)].right = right;
    return node_id;
}

void KdTree3::search(int node, const Eigen::Vector3d& query, double& best_sq,
                     Eigen::Index& best_index) const {
    if (node < 0) return;
    const Node& n = nodes_[static_cast<std::size_t>(node)];
    const double d_sq = (points_.col(n.point) - query).squaredNorm();
    if (d_sq < best_sq || (d_sq == best_sq && n.point < best_index)) {
        best_sq = d_sq;
        best_index = n.point;
    }
    const double delta = query[n.axis] - points_(n.axis, n.point);
    const int near = delta < 0.0 ? n.left : n.right;
    const int far = delta < 0.0 ? n.right : n.left;
    search(near, query, best_sq, best_index);
    if (delta * delta <= best_sq) search(far, query, best_sq, best_index);
}

Eigen::Index KdTree3::nearest(const Eigen::Vector3d& query) const {
    double best_sq = std::numeric_limits<double>::infinity();
    Eigen::Index best_index = points_.cols();
    search(root_, query, best_sq, best_index);
    return best_index;
}

// ---------------------------------------------------------------------------
// Rigid alignment
// ---------------------------------------------------------------------------

void RigidTransform::validate() const {
    if ((rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() >
            1e-9 ||
        std::abs(rotation.determinant() - 1.0) > 1e-9)
        throw InvalidArgument("rigid transform: rotation is not proper orthonormal");
    if (!translation.allFinite()) throw InvalidArgument("rigid transform: non-finite translation");
}

RigidTransform coarse_align(const Eigen::Matrix3Xd& reference_anchors,
                            const Eigen::Matrix3Xd& recon_anchors) {
    if (reference_anchors.cols() != recon_anchors.cols() || reference_anchors.cols() < 3)
        throw InvalidArgument("coarse_align: need >= 3 matched anchor pairs");

    const Eigen::Vector3d p_bar = reference_anchors.rowwise().mean();
    const Eigen::Vector3d q_bar = recon_anchors.rowwise().mean();
    const Eigen::Matrix3Xd p = reference_anchors.colwise() - p_bar;
    const Eigen::Matrix3Xd q = recon_anchors.colwise() - q_bar;

    const Eigen::Matrix3d h = q * p.transpose(); // maximize tr(H R)
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d sv = svd.singularValues();
    if (sv[1] <= 1e-9 * std::max(sv[0], 1e-30))
        throw AlignmentError("coarse_align: degenerate (collinear) anchor configuration");

    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    RigidTransform out;
    out.rotation = svd.matrixV() * d * svd.matrixU().transpose();
    out.translation = p_bar - out.rotation * q_bar;
    return out;
}

namespace {

struct Correspondences {
    std::vector<Eigen::Index> ref_index;   // reference vertex of each kept pair
    std::vector<Eigen::Index> recon_index; // matched recon vertex
    double trimmed_rmse = 0.0;             // point-to-plane RMSE over kept pairs
    double mean_distance = 0.0;            // mean NN distance over all reference vertices
};

// Gated + percentile-trimmed nearest-neighbor pairs under transform T.
Correspondences find_pairs(const HeadMesh& reference, const Eigen::Matrix3Xd& ref_normals,
                           const KdTree3& recon_tree, const RigidTransform& t,
                           const IcpConfig& config) {
    const Eigen::Index n = reference.vertices.cols();
    const RigidTransform t_inv = t.inverse();

    std::vector<Eigen::Index> nn(static_cast<std::size_t>(n));
    std::vector<double> dist(static_cast<std::size_t>(n));
    parallel_for_chunks(static_cast<std::size_t>(n), 256, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            // distances are rigid-invariant, so query in the recon frame
            const Eigen::Vector3d q = t_inv.apply(reference.vertices.col(static_cast<Eigen::Index>(i)));
            const Eigen::Index j = recon_tree.nearest(q);
            nn[i] = j;
            dist[i] = (recon_tree.points().col(j) - q).norm();
        }
    });

    Correspondences out;
    out.mean_distance =
        std::accumulate(dist.begin(), dist.end(), 0.0) / static_cast<double>(n);

    std::vector<std::size_t> gated;
    for (std::size_t i = 0; i < dist.size(); ++i)
        if (dist[i] <= config.gating_radius) gated.push_back(i);
    if (gated.empty())
        throw AlignmentError("icp: no correspondences within the gating radius");

    std::vector<double> gated_dist;
    gated_dist.reserve(gated.size());
    for (std::size_t i : gated) gated_dist.push_back(dist[i]);
    std::sort(gated_dist.begin(), gated_dist.end());
    const std::size_t rank = static_cast<std::size_t>(
        std::floor(config.trim_fraction * static_cast<double>(gated_dist.size() - 1)));
    const double threshold = gated_dist[rank];

    double sq_sum = 0.0;
    for (std::size_t i : gated) {
        if (dist[i] > threshold) continue;
        out.ref_index.push_back(static_cast<Eigen::Index>(i));
        out.recon_index.push_back(nn[i]);
        const Eigen::Vector3d q_world = t.apply(recon_tree.points().col(nn[i]));
        const double e =
            (q_world - reference.vertices.col(static_cast<Eigen::Index>(i)))
                .dot(ref_normals.col(static_cast<Eigen::Index>(i)));
        sq_sum += e * e;
    }
    out.trimmed_rmse = std::sqrt(sq_sum / static_cast<double>(out.ref_index.size()));
    return out;
}

} // namespace

IcpResult icp_refine(const HeadMesh& reference, const HeadMesh& recon,
                     const RigidTransform& init, const IcpConfig& config) {
    if (reference.vertex_count() == 0 || recon.vertex_count() == 0)
        throw InvalidArgument("icp: empty mesh");
    const Eigen::Matrix3Xd ref_normals = vertex_normals(reference);
    const KdTree3 recon_tree(recon.vertices);

    IcpResult result;
    result.transform = init;

    double prev_rmse = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < config.max_iterations; ++iter) {
        Correspondences pairs = find_pairs(reference, ref_normals, recon_tree, result.transform,
                                           config);
        result.iterations = iter + 1;
        result.rmse_history.push_back(pairs.trimmed_rmse);
        result.mean_distance = pairs.mean_distance;

        // Small-angle point-to-plane solve: rows [ (T q x n)^T  n^T ].
        Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
        Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
        for (std::size_t kpair = 0; kpair < pairs.ref_index.size(); ++kpair) {
            const Eigen::Vector3d n = ref_normals.col(pairs.ref_index[kpair]);
            const Eigen::Vector3d q = result.transform.apply(recon.vertices.col(pairs.recon_index[kpair]));
            const Eigen::Vector3d p = reference.vertices.col(pairs.ref_index[kpair]);
            Eigen::Matrix<double, 6, 1> row;
            row.head<3>() = q.cross(n);
            row.tail<3>() = n;
            const double b = (p - q).dot(n);
            h += row * row.transpose();
            g += row * b;
        }
        Eigen::LDLT<Eigen::Matrix<double, 6, 6>> ldlt(h);
        if (ldlt.info() != Eigen::Success) break;
        Eigen::Matrix<double, 6, 1> delta = ldlt.solve(g);
        if (!delta.allFinite()) break;

        if (delta.norm() < 1e-14) break; // exact fixed point

        // Step halving keeps the trimmed RMSE non-increasing.
        bool improved = false;
        for (int attempt = 0; attempt < 10 && !improved; ++attempt) {
            const Eigen::Vector3d omega = delta.head<3>();
            const double angle = omega.norm();
            Eigen::Matrix3d r_delta = Eigen::Matrix3d::Identity();
            if (angle > 0.0)
                r_delta = Eigen::AngleAxisd(angle, omega / angle).toRotationMatrix();
            const RigidTransform candidate =
                RigidTransform{r_delta, delta.tail<3>()}.compose(result.transform);
            const Correspondences fresh =
                find_pairs(reference, ref_normals, recon_tree, candidate, config);
            if (fresh.trimmed_rmse <= pairs.trimmed_rmse) {
                result.transform = candidate;
                improved = true;
            } else {
                delta *= 0.5;
            }
        }
        if (!improved) break;

        if (std::abs(prev_rmse - pairs.trimmed_rmse) < config.min_rmse_improvement) break;
        prev_rmse = pairs.trimmed_rmse;
    }

    // Final bookkeeping with the converged transform.
    const Correspondences final_pairs =
        find_pairs(reference, ref_normals, recon_tree, result.transform, config);
    result.mean_distance = final_pairs.mean_distance;
    result.failed = final_pairs.mean_distance > config.failure_mean_distance;
    return result;
}

double point_to_plane_rmse(const HeadMesh& reference, const HeadMesh& recon) {
    const Eigen::Index n = reference.vertices.cols();
    if (n == 0 || recon.vertices.cols() == 0) throw InvalidArgument("rmse: empty mesh");
    const Eigen::Matrix3Xd ref_normals = vertex_normals(reference);
    const KdTree3 tree(recon.vertices);

    std::vector<double> sq(static_cast<std::size_t>(n));
    parallel_for_chunks(static_cast<std::size_t>(n), 256, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const Eigen::Vector3d p = reference.vertices.col(static_cast<Eigen::Index>(i));
            const Eigen::Vector3d q = tree.points().col(tree.nearest(p));
            const double e = (p - q).dot(ref_normals.col(static_cast<Eigen::Index>(i)));
            sq[i] = e * e;
        }
    });
    // fixed-order reduction
    const double total = std::accumulate(sq.begin(), sq.end(), 0.0);
    return std::sqrt(total / static_cast<double>(n));
}

DepthErrorStats depth_error_stats(const HeadMesh& reference, const HeadMesh& recon) {
    const Eigen::Index n = reference.vertices.cols();
    if (n == 0 || recon.vertices.cols() == 0) throw InvalidArgument("depth stats: empty mesh");
    const KdTree3 tree(recon.vertices);

    std::vector<double> err(static_cast<std::size_t>(n));
    parallel_for_chunks(static_cast<std::size_t>(n), 256, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const Eigen::Vector3d p = reference.vertices.col(static_cast<Eigen::Index>(i));
            const Eigen::Vector3d q = tree.points().col(tree.nearest(p));
            err[i] = std::abs(p.z() - q.z());
        }
    });

    DepthErrorStats stats;
    const double count = static_cast<double>(n);
    stats.mean = std::accumulate(err.begin(), err.end(), 0.0) / count;
    double var = 0.0;
    for (double e : err) var += (e - stats.mean) * (e - stats.mean);
    stats.stddev = std::sqrt(var / count);

    std::vector<double> sorted = err;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size();
    stats.median = (m % 2 == 1) ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
    const std::size_t tail = std::max<std::size_t>(1, m / 10);
    stats.delta90 =
        std::accumulate(sorted.end() - static_cast<std::ptrdiff_t>(tail), sorted.end(), 0.0) /
        static_cast<double>(tail);
    return stats;
}

EvalReport evaluate_reconstruction(const HeadMesh& reference, const HeadMesh& recon,
                                   const Eigen::Matrix3Xd& reference_anchors,
                                   const Eigen::Matrix3Xd& recon_anchors,
                                   const IcpConfig& config) {
    EvalReport report;
    report.coarse = coarse_align(reference_anchors, recon_anchors);
    report.icp = icp_refine(reference, recon, report.coarse, config);

    HeadMesh aligned;
    aligned.topology = recon.topology;
    aligned.vertices = report.icp.transform.apply_points(recon.vertices);

    report.rmse = point_to_plane_rmse(reference, aligned);
    report.depth = depth_error_stats(reference, aligned);
    report.n_reference_vertices = reference.vertex_count();
    return report;
}

std::string eval_report_to_json(const EvalReport& report) {
    nlohmann::ordered_json doc;
    doc["rmse"] = report.rmse;
    doc["depth"] = {{"mean", report.depth.mean},
                    {"stddev", report.depth.stddev},
                    {"median", report.depth.median},
                    {"delta90", report.depth.delta90}};
    doc["n_reference_vertices"] = report.n_reference_vertices;
    nlohmann::ordered_json alignment;
    alignment["icp_iterations"] = report.icp.iterations;
    alignment["icp_rmse_history"] = report.icp.rmse_history;
    alignment["failed"] = report.icp.failed;
    alignment["mean_nn_distance"] = report.icp.mean_distance;
    std::vector<std::vector<double>> rotation(3, std::vector<double>(3));
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rotation[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = report.icp.transform.rotation(r, c);
    alignment["rotation"] = rotation;
    alignment["translation"] = {report.icp.transform.translation.x(),
                                report.icp.transform.translation.y(),
                                report.icp.transform.translation.z()};
    doc["alignment"] = alignment;
    return doc.dump(2) + "\n";
}

void save_eval_report(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open report for writing: " + path.string());
    out << eval_report_to_json(report);
    if (!out) throw IoError("failed writing report: " + path.string());
}

std::string eval_report_table(const EvalReport& report) {
    char buf[64];
    std::string table;
    table += "metric      value (mm)\n";
    auto row = [&](const char* name, double value) {
        std::snprintf(buf, sizeof(buf), "%-10s  %10.4f\n", name, value);
        table += buf;
    };
    row("rmse", report.rmse);
    row("mu", report.depth.mean);
    row("sigma", report.depth.stddev);
    row("median", report.depth.median);
    row("delta90", report.depth.delta90);
    return table;
}

} // namespace headfit
