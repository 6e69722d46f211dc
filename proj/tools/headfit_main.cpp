// headfit command-line tool: procedural model generation, synthetic
// normal/landmark map rendering, morphable-model fitting, and mesh
// evaluation.
//
// Exit codes: 0 success, 2 invalid arguments or dimension mismatch,
// 3 I/O or render failure, 4 solver failure, 5 alignment failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "headfit/error.hpp"
#include "headfit/eval.hpp"
#include "headfit/fit.hpp"
#include "headfit/geometry.hpp"
#include "headfit/mesh_io.hpp"
#include "headfit/model.hpp"
#include "headfit/parallel.hpp"
#include "headfit/raster.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitSolver = 4;
constexpr int kExitAlignment = 5;

struct CliError {
    int code;
    std::string message;
};

[[noreturn]] void fail(int code, const std::string& message) { throw CliError{code, message}; }

// Optional JSON config file: keys mirror long option names; explicit
// command-line flags win; unknown keys are rejected.
void apply_config_file(CLI::App* cmd, const std::string& config_path) {
    if (config_path.empty()) return;
    std::ifstream in(config_path);
    if (!in) fail(kExitIo, "cannot open config file: " + config_path);
    json config;
    try {
        in >> config;
    } catch (const json::exception& e) {
        fail(kExitUsage, std::string("config file: ") + e.what());
    }
    if (!config.is_object()) fail(kExitUsage, "config file: expected a JSON object");
    for (const auto& [key, value] : config.items()) {
        CLI::Option* opt = nullptr;
        try {
            opt = cmd->get_option("--" + key);
        } catch (const CLI::OptionNotFound&) {
            fail(kExitUsage, "config file: unknown key '" + key + "'");
        }
        if (opt->count() > 0) continue; // explicit flag wins
        const std::string text =
            value.is_string() ? value.get<std::string>() : value.dump();
        try {
            opt->add_result(text);
            opt->run_callback();
        } catch (const CLI::Error& e) {
            fail(kExitUsage, "config file: bad value for '" + key + "': " + e.what());
        }
    }
}

std::pair<int, int> parse_size(const std::string& text) {
    const auto x = text.find('x');
    if (x == std::string::npos) fail(kExitUsage, "--size expects WxH, got '" + text + "'");
    try {
        const int w = std::stoi(text.substr(0, x));
        const int h = std::stoi(text.substr(x + 1));
        if (w <= 0 || h <= 0) fail(kExitUsage, "--size must be positive");
        return {w, h};
    } catch (const std::exception&) {
        fail(kExitUsage, "--size expects WxH, got '" + text + "'");
    }
}

std::vector<double> parse_csv_doubles(const std::string& text, std::size_t expected,
                                      const std::string& flag) {
    std::vector<double> values;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto comma = text.find(',', pos);
        const std::string token =
            text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            values.push_back(std::stod(token));
        } catch (const std::exception&) {
            fail(kExitUsage, flag + ": cannot parse '" + token + "'");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (values.size() != expected)
        fail(kExitUsage, flag + ": expected " + std::to_string(expected) + " comma-separated values");
    return values;
}

headfit::ShapeParams load_shape_file(const fs::path& path, std::size_t expected) {
    std::ifstream in(path);
    if (!in) fail(kExitIo, "cannot open shape parameter file: " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception&) {
        fail(kExitUsage, "shape parameter file is not valid JSON: " + path.string());
    }
    if (doc.is_object() && doc.contains("y")) doc = doc["y"];
    if (!doc.is_array())
        fail(kExitUsage, "shape parameter file must be a JSON array: " + path.string());
    if (doc.size() != expected)
        fail(kExitUsage, "shape parameter count " + std::to_string(doc.size()) +
                             " does not match model components " + std::to_string(expected));
    headfit::ShapeParams params;
    params.y.resize(static_cast<Eigen::Index>(expected));
    for (std::size_t i = 0; i < expected; ++i) {
        if (!doc[i].is_number())
            fail(kExitUsage, "shape parameter file contains a non-numeric entry");
        params.y[static_cast<Eigen::Index>(i)] = doc[i].get<double>();
    }
    return params;
}

headfit::MorphableModel load_model_or_fail(const fs::path& path) {
    try {
        return headfit::load_model(path);
    } catch (const headfit::IoError& e) {
        fail(kExitIo, e.what());
    } catch (const headfit::FormatError& e) {
        fail(kExitIo, e.what());
    }
}

// ---------------------------------------------------------------------------
// gen-model
// ---------------------------------------------------------------------------

struct GenModelArgs {
    int subdiv = 3;
    int components = 30;
    std::uint64_t seed = 0;
    std::string out;
    std::string config;
};

int run_gen_model(const GenModelArgs& args) {
    headfit::ProceduralModelConfig config;
    config.n_subdiv = args.subdiv;
    config.n_components = args.components;
    config.seed = args.seed;
    const headfit::MorphableModel model = headfit::generate_procedural_model(config);
    headfit::save_model(model, args.out);
    const auto size = fs::file_size(args.out);
    std::cout << "model: vertices=" << model.vertex_count() << " components="
              << model.component_count() << " faces=" << model.topology->face_count()
              << " file_bytes=" << size << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string model;
    std::string y_file;
    std::uint64_t y_seed = 0;
    bool y_seed_given = false;
    std::string pose = "0,0,0,0,0,650";
    double focal = 0.0; // 0: default prior
    std::string size = "256x256";
    std::string out_prefix;
    bool ppm = false;
    std::string config;
};

int run_synth(const SynthArgs& args) {
    const headfit::MorphableModel model = load_model_or_fail(args.model);
    if (!args.y_file.empty() && args.y_seed_given)
        fail(kExitUsage, "--y-seed and --y-file are mutually exclusive");

    headfit::ShapeParams shape;
    if (!args.y_file.empty()) {
        shape = load_shape_file(args.y_file, model.component_count());
    } else if (args.y_seed_given) {
        shape = headfit::sample_shape_params(model, args.y_seed);
    } else {
        shape.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.component_count()));
    }

    const auto [width, height] = parse_size(args.size);
    const auto pose_values = parse_csv_doubles(args.pose, 6, "--pose");
    const double deg = std::numbers::pi / 180.0;
    headfit::CameraPose pose;
    try {
        pose = headfit::CameraPose(pose_values[0] * deg, pose_values[1] * deg,
                                   pose_values[2] * deg,
                                   {pose_values[3], pose_values[4], pose_values[5]});
    } catch (const headfit::InvalidArgument& e) {
        fail(kExitUsage, e.what());
    }
    headfit::Intrinsics intrinsics = headfit::default_intrinsics_prior(width, height);
    if (args.focal > 0.0) intrinsics.f = args.focal;

    const headfit::HeadMesh mesh = headfit::instantiate(model, shape);
    const headfit::NormalMap map =
        headfit::render_normal_map(mesh, pose, intrinsics, width, height);
    const headfit::LandmarkMap landmarks =
        headfit::render_landmark_map(mesh, model, pose, intrinsics, width, height);

    const fs::path prefix(args.out_prefix);
    headfit::save_normal_map(map, prefix.string() + ".nmap");
    headfit::save_landmark_map(landmarks, prefix.string() + ".lmk.json");
    headfit::save_mesh(mesh, prefix.string() + ".gt.obj");
    if (args.ppm) headfit::write_normal_map_ppm(map, prefix.string() + ".ppm");

    json gt;
    gt["y"] = std::vector<double>(shape.y.data(), shape.y.data() + shape.y.size());
    gt["pose"] = {{"roll", pose.roll}, {"pitch", pose.pitch}, {"yaw", pose.yaw},
                  {"t", {pose.t.x(), pose.t.y(), pose.t.z()}}};
    gt["intrinsics"] = {{"f", intrinsics.f}, {"u0", intrinsics.u0}, {"v0", intrinsics.v0}};
    gt["size"] = {{"width", width}, {"height", height}};
    std::ofstream gt_out(prefix.string() + ".gt.json");
    if (!gt_out) fail(kExitIo, "cannot write ground-truth file");
    gt_out << gt.dump(2) << "\n";

    json anchors;
    anchors["indices"] = model.eval_anchor_indices;
    std::ofstream anchors_out(prefix.string() + ".anchors.json");
    if (!anchors_out) fail(kExitIo, "cannot write anchors file");
    anchors_out << anchors.dump(2) << "\n";

    std::cout << "synth: coverage=" << [&] {
        std::size_t covered = 0;
        for (auto m : map.mask) covered += m;
        return static_cast<double>(covered) / static_cast<double>(map.mask.size());
    }() << " visible_landmarks=" << landmarks.visible_count() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

struct FitArgs {
    std::string model;
    std::vector<std::string> views;
    std::string weights = "1,0.8,0.4";
    std::string out_mesh;
    std::string out_result;
    int max_iters = 200;
    std::string config;
};

int run_fit(const FitArgs& args) {
    const headfit::MorphableModel model = load_model_or_fail(args.model);
    if (args.views.empty()) fail(kExitUsage, "at least one --view nmap,lmk pair is required");

    std::vector<headfit::ViewObservation> views;
    for (const std::string& spec : args.views) {
        const auto comma = spec.find(',');
        if (comma == std::string::npos)
            fail(kExitUsage, "--view expects 'normal_map.nmap,landmarks.lmk.json'");
        headfit::ViewObservation view;
        try {
            view.normal_map = headfit::load_normal_map(spec.substr(0, comma));
            view.landmarks = headfit::load_landmark_map(spec.substr(comma + 1));
        } catch (const headfit::Error& e) {
            fail(kExitIo, e.what());
        }
        view.landmarks.width = view.normal_map.width;
        view.landmarks.height = view.normal_map.height;
        view.k0 = headfit::default_intrinsics_prior(view.normal_map.width, view.normal_map.height);
        views.push_back(std::move(view));
    }

    const auto weight_values = parse_csv_doubles(args.weights, 3, "--weights");
    headfit::FitWeights weights;
    weights.normals = weight_values[0];
    weights.landmarks = weight_values[1];
    weights.prior = weight_values[2];
    try {
        weights.validate();
    } catch (const headfit::InvalidArgument& e) {
        fail(kExitUsage, e.what());
    }
    headfit::SolverConfig solver;
    solver.max_iterations = args.max_iters;
    try {
        solver.validate();
    } catch (const headfit::InvalidArgument& e) {
        fail(kExitUsage, e.what());
    }

    headfit::FitResult result;
    try {
        result = headfit::fit(model, views, weights, solver);
    } catch (const headfit::SolverError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSolver;
    } catch (const headfit::InvalidArgument& e) {
        fail(kExitUsage, e.what());
    }

    if (!args.out_result.empty()) headfit::save_fit_result(result, args.out_result);
    if (!args.out_mesh.empty())
        headfit::save_mesh(headfit::instantiate(model, result.shape), args.out_mesh);

    std::cout << "fit: converged=" << (result.converged ? "true" : "false")
              << " iterations=" << result.iterations << " energy=" << result.total_energy
              << " stop=" << result.stop_reason << "\n";
    return result.converged ? 0 : kExitSolver;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string reference;
    std::string recon;
    std::string anchors;
    std::string report;
    std::string config;
};

int run_eval(const EvalArgs& args) {
    headfit::HeadMesh reference, recon;
    try {
        reference = headfit::load_mesh(args.reference);
        recon = headfit::load_mesh(args.recon);
    } catch (const headfit::Error& e) {
        fail(kExitIo, e.what());
    }

    std::ifstream anchors_in(args.anchors);
    if (!anchors_in) fail(kExitIo, "cannot open anchors file: " + args.anchors);
    json anchors_doc;
    try {
        anchors_in >> anchors_doc;
    } catch (const json::exception&) {
        fail(kExitUsage, "anchors file is not valid JSON");
    }

    Eigen::Matrix3Xd ref_anchors, recon_anchors;
    auto gather = [](const headfit::HeadMesh& mesh, const std::vector<std::uint32_t>& idx) {
        Eigen::Matrix3Xd out(3, static_cast<Eigen::Index>(idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= mesh.vertex_count())
                fail(kExitUsage, "anchor index out of range for mesh");
            out.col(static_cast<Eigen::Index>(i)) = mesh.vertices.col(idx[i]);
        }
        return out;
    };
    if (anchors_doc.is_object() && anchors_doc.contains("indices")) {
        const auto idx = anchors_doc["indices"].get<std::vector<std::uint32_t>>();
        if (idx.size() < 3) fail(kExitUsage, "anchors file needs at least 3 indices");
        ref_anchors = gather(reference, idx);
        recon_anchors = gather(recon, idx);
    } else if (anchors_doc.is_object() && anchors_doc.contains("reference") &&
               anchors_doc.contains("recon")) {
        auto to_points = [](const json& list) {
            Eigen::Matrix3Xd out(3, static_cast<Eigen::Index>(list.size()));
            for (std::size_t i = 0; i < list.size(); ++i)
                for (int c = 0; c < 3; ++c) out(c, static_cast<Eigen::Index>(i)) = list[i][static_cast<std::size_t>(c)].get<double>();
            return out;
        };
        ref_anchors = to_points(anchors_doc["reference"]);
        recon_anchors = to_points(anchors_doc["recon"]);
        if (ref_anchors.cols() != recon_anchors.cols() || ref_anchors.cols() < 3)
            fail(kExitUsage, "anchors file needs matched point lists of >= 3 points");
    } else {
        fail(kExitUsage, "anchors file must carry 'indices' or 'reference'/'recon' points");
    }

    headfit::EvalReport report;
    try {
        report = headfit::evaluate_reconstruction(reference, recon, ref_anchors, recon_anchors);
    } catch (const headfit::AlignmentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitAlignment;
    }
    if (!args.report.empty()) headfit::save_eval_report(report, args.report);
    std::cout << headfit::eval_report_table(report);
    if (report.icp.failed) {
        std::cerr << "error: alignment failed (mean nearest-neighbor distance "
                  << report.icp.mean_distance << " mm)\n";
        return kExitAlignment;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

struct ExportArgs {
    std::string model;
    std::string y_file;
    std::uint64_t y_seed = 0;
    bool y_seed_given = false;
    std::string out_mesh;
    std::string nmap;
    std::string out_ppm;
    std::string config;
};

int run_export(const ExportArgs& args) {
    const bool mesh_mode = !args.out_mesh.empty();
    const bool image_mode = !args.out_ppm.empty();
    if (mesh_mode == image_mode)
        fail(kExitUsage, "export needs exactly one of --out-mesh (with --model) or --out-ppm (with --nmap)");
    if (mesh_mode) {
        if (args.model.empty()) fail(kExitUsage, "--out-mesh requires --model");
        const headfit::MorphableModel model = load_model_or_fail(args.model);
        headfit::ShapeParams shape;
        if (!args.y_file.empty()) shape = load_shape_file(args.y_file, model.component_count());
        else if (args.y_seed_given) shape = headfit::sample_shape_params(model, args.y_seed);
        else shape.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.component_count()));
        headfit::save_mesh(headfit::instantiate(model, shape), args.out_mesh);
    } else {
        if (args.nmap.empty()) fail(kExitUsage, "--out-ppm requires --nmap");
        try {
            headfit::write_normal_map_ppm(headfit::load_normal_map(args.nmap), args.out_ppm);
        } catch (const headfit::Error& e) {
            fail(kExitIo, e.what());
        }
    }
    return 0;
}

int threads_from_env() {
    const char* env = std::getenv("HEADFIT_THREADS");
    if (!env) return 0;
    try {
        return std::max(1, std::stoi(env));
    } catch (const std::exception&) {
        return 0;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"headfit: morphable head model fitting from normal and landmark maps"};
    app.require_subcommand(1);
    int threads = threads_from_env();
    app.add_option("--threads", threads, "cap worker threads (env HEADFIT_THREADS)");

    GenModelArgs gen_args;
    auto* gen = app.add_subcommand("gen-model", "generate a procedural morphable head model");
    gen->add_option("--subdiv", gen_args.subdiv, "icosphere subdivision level")->capture_default_str();
    gen->add_option("--components", gen_args.components, "number of shape components")->capture_default_str();
    gen->add_option("--seed", gen_args.seed, "random seed")->capture_default_str();
    gen->add_option("--out", gen_args.out, "output .mmhead path")->required();
    gen->add_option("--config", gen_args.config, "JSON config file");

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "render ground-truth normal/landmark maps");
    synth->add_option("--model", synth_args.model, "model .mmhead path")->required();
    auto* y_seed_opt = synth->add_option("--y-seed", synth_args.y_seed, "sample shape parameters from this seed");
    synth->add_option("--y-file", synth_args.y_file, "JSON array of shape parameters");
    synth->add_option("--pose", synth_args.pose, "roll,pitch,yaw (deg), tx,ty,tz (mm)")->capture_default_str();
    synth->add_option("--focal", synth_args.focal, "focal length in pixels (default 1.2 max(W,H))");
    synth->add_option("--size", synth_args.size, "image size WxH")->capture_default_str();
    synth->add_option("--out-prefix", synth_args.out_prefix, "output file prefix")->required();
    synth->add_flag("--ppm", synth_args.ppm, "also write an 8-bit visualization");
    synth->add_option("--config", synth_args.config, "JSON config file");

    FitArgs fit_args;
    auto* fit_cmd = app.add_subcommand("fit", "fit the model to one or more views");
    fit_cmd->add_option("--model", fit_args.model, "model .mmhead path")->required();
    fit_cmd->add_option("--view", fit_args.views, "normal_map.nmap,landmarks.lmk.json (repeatable)");
    fit_cmd->add_option("--weights", fit_args.weights, "lambda_N,lambda_Z,lambda_P")->capture_default_str();
    fit_cmd->add_option("--out-mesh", fit_args.out_mesh, "fitted mesh (.obj or .ply)");
    fit_cmd->add_option("--out-result", fit_args.out_result, "fit result JSON");
    fit_cmd->add_option("--max-iters", fit_args.max_iters, "iteration cap")->capture_default_str();
    fit_cmd->add_option("--config", fit_args.config, "JSON config file");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "align and score a reconstruction");
    eval_cmd->add_option("--reference", eval_args.reference, "reference mesh")->required();
    eval_cmd->add_option("--recon", eval_args.recon, "reconstructed mesh")->required();
    eval_cmd->add_option("--anchors", eval_args.anchors, "anchors JSON")->required();
    eval_cmd->add_option("--report", eval_args.report, "output report JSON");
    eval_cmd->add_option("--config", eval_args.config, "JSON config file");

    ExportArgs export_args;
    auto* export_cmd = app.add_subcommand("export", "convert models and maps to viewable formats");
    export_cmd->add_option("--model", export_args.model, "model .mmhead path");
    auto* export_seed_opt = export_cmd->add_option("--y-seed", export_args.y_seed, "sample shape from seed");
    export_cmd->add_option("--y-file", export_args.y_file, "JSON array of shape parameters");
    export_cmd->add_option("--out-mesh", export_args.out_mesh, "write instantiated mesh (.obj/.ply)");
    export_cmd->add_option("--nmap", export_args.nmap, "normal map to convert");
    export_cmd->add_option("--out-ppm", export_args.out_ppm, "write 8-bit visualization");
    export_cmd->add_option("--config", export_args.config, "JSON config file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.get_name() << ": " << e.what() << "\n";
        std::cerr << app.help() << "\n";
        return kExitUsage;
    }

    try {
        if (*gen) apply_config_file(gen, gen_args.config);
        if (*synth) apply_config_file(synth, synth_args.config);
        if (*fit_cmd) apply_config_file(fit_cmd, fit_args.config);
        if (*eval_cmd) apply_config_file(eval_cmd, eval_args.config);
        if (*export_cmd) apply_config_file(export_cmd, export_args.config);

        synth_args.y_seed_given = y_seed_opt->count() > 0;
        export_args.y_seed_given = export_seed_opt->count() > 0;
        if (threads > 0) headfit::set_max_threads(threads);

        if (*gen) return run_gen_model(gen_args);
        if (*synth) return run_synth(synth_args);
        if (*fit_cmd) return run_fit(fit_args);
        if (*eval_cmd) return run_eval(eval_args);
        if (*export_cmd) return run_export(export_args);
    } catch (const CliError& e) {
        std::cerr << "error: " << e.message << "\n";
        return e.code;
    } catch (const headfit::InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const headfit::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const headfit::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const headfit::RenderError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const headfit::SolverError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSolver;
    } catch (const headfit::AlignmentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitAlignment;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
