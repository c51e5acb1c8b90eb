#pragma once

// Dataset ingestion, image/trajectory metrics, and run evaluation.

#include "fieldchain/incremental.hpp"
#include "fieldchain/oracle.hpp"

#include <json.hpp>

#include <filesystem>

namespace fieldchain {

struct MissingFile : Error {
    using Error::Error;
};
struct BadIntrinsics : Error {
    using Error::Error;
};
struct LengthMismatch : Error {
    using Error::Error;
};

struct Dataset {
    Camera camera;
    std::vector<FrameData> frames;
    std::vector<Pose> gt_trajectory;  // empty when unavailable
    std::vector<int> train_indices, test_indices;
    std::vector<std::string> warnings;

    FrameSource source() const {
        FrameSource src;
        src.camera = camera;
        src.frame_count = int(frames.size());
        src.frame = [this](int i) -> const FrameData& { return frames.at(size_t(i)); };
        src.gt_trajectory = gt_trajectory;
        return src;
    }
};

namespace detail {

inline std::string pattern_path(const std::string& root, const std::string& pattern, int index) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), pattern.c_str(), index);
    return root + "/" + buf;
}

}  // namespace detail

// Loads the directory layout written by emit_dataset. Depth priors and flow
// are optional (a warning is recorded when missing); images and intrinsics
// are mandatory. Held-out indices: every `test_every`-th frame (0 disables).
inline Dataset load_dataset(const std::string& root, const Config& cfg, int test_every = 0) {
    namespace fs = std::filesystem;
    Dataset ds;
    if (!cfg.has("fx") || !cfg.has("fy") || !cfg.has("width") || !cfg.has("height"))
        throw BadIntrinsics("dataset config must name fx, fy, width, height");
    ds.camera.fx = cfg.get_double("fx", 0);
    ds.camera.fy = cfg.get_double("fy", 0);
    ds.camera.width = cfg.get_int("width", 0);
    ds.camera.height = cfg.get_int("height", 0);
    ds.camera.cx = cfg.get_double("cx", ds.camera.width * 0.5);
    ds.camera.cy = cfg.get_double("cy", ds.camera.height * 0.5);
    if (!ds.camera.is_valid()) throw BadIntrinsics("invalid camera intrinsics in dataset config");

    const int n = cfg.get_int("frames", 0);
    if (n < 1) throw DatasetError("dataset config must declare a positive frame count");
    const std::string img_pat = cfg.get_str("image_pattern", "images/frame_%04d.png");
    const std::string depth_pat = cfg.get_str("depth_pattern", "depth/frame_%04d.pfm");
    const std::string ffw_pat = cfg.get_str("flow_fwd_pattern", "flow_fwd/frame_%04d.flo");
    const std::string fbw_pat = cfg.get_str("flow_bwd_pattern", "flow_bwd/frame_%04d.flo");
    const double depth_scale = cfg.get_double("depth_scale", 1.0);

    bool missing_depth_warned = false, missing_flow_warned = false;
    ds.frames.resize(size_t(n));
    for (int i = 0; i < n; ++i) {
        const std::string img_path = detail::pattern_path(root, img_pat, i);
        if (!fs::exists(img_path)) throw MissingFile("missing image: " + img_path);
        FrameData& fd = ds.frames[size_t(i)];
        fd.image = load_png_rgb(img_path);
        if (fd.image.width != ds.camera.width || fd.image.height != ds.camera.height)
            throw DatasetError("image size mismatch: " + img_path);

        const std::string depth_path = detail::pattern_path(root, depth_pat, i);
        if (fs::exists(depth_path)) {
            fd.depth_prior = depth_path.size() > 4 &&
                                     depth_path.substr(depth_path.size() - 4) == ".pfm"
                                 ? load_pfm(depth_path)
                                 : load_png_depth16(depth_path, depth_scale * 0.001);
            if (depth_scale != 1.0 && depth_path.substr(depth_path.size() - 4) == ".pfm")
                for (double& d : fd.depth_prior.data) d *= depth_scale;
        } else if (!missing_depth_warned) {
            ds.warnings.push_back("no depth prior found (" + depth_path + "); continuing without");
            missing_depth_warned = true;
        }

        const std::string ffw = detail::pattern_path(root, ffw_pat, i);
        if (i + 1 < n && fs::exists(ffw)) fd.flow_forward = load_flo(ffw);
        const std::string fbw = detail::pattern_path(root, fbw_pat, i);
        if (i > 0 && fs::exists(fbw)) fd.flow_backward = load_flo(fbw);
        if (i + 1 < n && !fs::exists(ffw) && !missing_flow_warned) {
            ds.warnings.push_back("no flow found (" + ffw + "); continuing without");
            missing_flow_warned = true;
        }
    }

    const std::string gt_name = cfg.get_str("gt_trajectory", "gt_trajectory.txt");
    if (fs::exists(root + "/" + gt_name)) {
        ds.gt_trajectory = load_trajectory_tum(root + "/" + gt_name);
        if (int(ds.gt_trajectory.size()) != n)
            throw DatasetError("ground-truth trajectory length mismatch");
    }

    for (int i = 0; i < n; ++i) {
        const bool test = test_every > 0 && i % test_every == 0 && i > 0;
        ds.frames[size_t(i)].is_test = test;
        (test ? ds.test_indices : ds.train_indices).push_back(i);
    }
    return ds;
}

inline Dataset load_dataset(const std::string& root, int test_every = 0) {
    Config cfg = Config::from_file(root + "/dataset.cfg");
    cfg.apply_env_overrides();
    return load_dataset(root, cfg, test_every);
}

// --- image metrics --------------------------------------------------------

// 10 log10(peak^2 / MSE); +infinity for identical images.
inline double psnr(const ImageRGB& a, const ImageRGB& b, double peak = 1.0) {
    if (a.width != b.width || a.height != b.height) throw ShapeMismatch("psnr: image sizes differ");
    double mse = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= double(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

// Windowed SSIM on grayscale, 11x11 Gaussian window (sigma 1.5),
// C1=(0.01 peak)^2, C2=(0.03 peak)^2, averaged over valid positions.
inline double ssim(const ImageRGB& a, const ImageRGB& b, double peak = 1.0) {
    if (a.width != b.width || a.height != b.height) throw ShapeMismatch("ssim: image sizes differ");
    constexpr int kHalf = 5;
    if (a.width < 11 || a.height < 11) throw ImageTooSmall("ssim: image smaller than the window");
    const ImageGray ga = detail::to_gray(a), gb = detail::to_gray(b);

    double w[11];
    double wsum = 0.0;
    for (int i = -kHalf; i <= kHalf; ++i) {
        w[i + kHalf] = std::exp(-0.5 * i * i / (1.5 * 1.5));
        wsum += w[i + kHalf];
    }
    for (double& v : w) v /= wsum;

    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    double acc = 0.0;
    int count = 0;
    for (int y = kHalf; y < a.height - kHalf; ++y) {
        for (int x = kHalf; x < a.width - kHalf; ++x) {
            double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
            for (int dy = -kHalf; dy <= kHalf; ++dy)
                for (int dx = -kHalf; dx <= kHalf; ++dx) {
                    const double wgt = w[dy + kHalf] * w[dx + kHalf];
                    const double va = ga.at(x + dx, y + dy), vb = gb.at(x + dx, y + dy);
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            const double var_a = aa - mu_a * mu_a, var_b = bb - mu_b * mu_b;
            const double cov = ab - mu_a * mu_b;
            acc += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                   ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            ++count;
        }
    }
    return acc / count;
}

// --- trajectory metrics -----------------------------------------------------

inline double ate(const std::vector<Pose>& est, const std::vector<Pose>& gt) {
    if (est.size() != gt.size()) throw LengthMismatch("ate: trajectory lengths differ");
    return align_trajectories(est, gt).rmse;
}

struct RpeResult {
    double rotation_deg = 0.0;   // RMSE of per-step rotation error
    double translation = 0.0;    // RMSE of per-step translation error
};

inline RpeResult rpe(const std::vector<Pose>& est, const std::vector<Pose>& gt, int delta = 1) {
    if (est.size() != gt.size()) throw LengthMismatch("rpe: trajectory lengths differ");
    if (int(est.size()) <= delta) throw LengthMismatch("rpe: trajectory shorter than delta");
    double sq_rot = 0.0, sq_trans = 0.0;
    const int steps = int(est.size()) - delta;
    for (int i = 0; i < steps; ++i) {
        const Pose rel_est = est[size_t(i)].inverse() * est[size_t(i + delta)];
        const Pose rel_gt = gt[size_t(i)].inverse() * gt[size_t(i + delta)];
        const Pose err = rel_gt.inverse() * rel_est;
        const double ang = rotation_angle(err.rotation) * 180.0 / M_PI;
        sq_rot += ang * ang;
        sq_trans += err.translation.squaredNorm();
    }
    return {std::sqrt(sq_rot / steps), std::sqrt(sq_trans / steps)};
}

// --- evaluation report ------------------------------------------------------

struct EvalReport {
    bool has_image_metrics = false;
    double psnr_mean = 0.0;
    bool psnr_infinite = false;
    double ssim_mean = 0.0;
    std::vector<double> psnr_per_frame;
    std::vector<double> ssim_per_frame;
    std::vector<int> eval_frames;

    bool has_pose_metrics = false;
    double ate_rmse = 0.0;
    double rpe_rotation_deg = 0.0;
    double rpe_translation = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["has_image_metrics"] = has_image_metrics;
        if (has_image_metrics) {
            j["psnr"] = psnr_infinite ? nlohmann::json("inf") : nlohmann::json(psnr_mean);
            j["psnr_infinite"] = psnr_infinite;
            j["ssim"] = ssim_mean;
            j["psnr_per_frame"] = psnr_per_frame;
            j["ssim_per_frame"] = ssim_per_frame;
            j["eval_frames"] = eval_frames;
        }
        j["has_pose_metrics"] = has_pose_metrics;
        if (has_pose_metrics) {
            j["ate"] = ate_rmse;
            j["rpe_r"] = rpe_rotation_deg;
            j["rpe_t"] = rpe_translation;
        }
        return j;
    }

    static EvalReport from_json(const nlohmann::json& j) {
        EvalReport r;
        r.has_image_metrics = j.value("has_image_metrics", false);
        if (r.has_image_metrics) {
            r.psnr_infinite = j.value("psnr_infinite", false);
            r.psnr_mean = r.psnr_infinite ? std::numeric_limits<double>::infinity()
                                          : j.value("psnr", 0.0);
            r.ssim_mean = j.value("ssim", 0.0);
            r.psnr_per_frame = j.value("psnr_per_frame", std::vector<double>{});
            r.ssim_per_frame = j.value("ssim_per_frame", std::vector<double>{});
            r.eval_frames = j.value("eval_frames", std::vector<int>{});
        }
        r.has_pose_metrics = j.value("has_pose_metrics", false);
        if (r.has_pose_metrics) {
            r.ate_rmse = j.value("ate", 0.0);
            r.rpe_rotation_deg = j.value("rpe_r", 0.0);
            r.rpe_translation = j.value("rpe_t", 0.0);
        }
        return r;
    }
};

// Renders one full frame from the registry. Two passes: a stratified pass
// provides the rendered-depth guide for the final depth-guided pass.
inline ImageRGB render_view(const FieldRegistry& registry, const Camera& cam, const Pose& pose,
                            const RunConfig& cfg, ImageGray* depth_out = nullptr,
                            const ImageGray* depth_guide = nullptr) {
    ImageRGB img(cam.width, cam.height);
    ImageGray depth(cam.width, cam.height, 0.0);
    parallel_chunks(cam.height, cfg.n_chunks, [&](int, int y_begin, int y_end) {
        for (int y = y_begin; y < y_end; ++y) {
            for (int x = 0; x < cam.width; ++x) {
                const Ray ray = generate_ray(cam, pose, Vec2(x, y), cfg.near, cfg.far);
                Rng rng(mix_seed(cfg.seed, 0xE7A1, uint64_t(y) * cam.width + x));
                const double guide = depth_guide ? depth_guide->at(x, y) : 0.0;
                SampleSet first = sample_ray(ray, 0.0, guide, rng, cfg.sampler);
                RenderResult res = registry.render_global(ray, first);
                if (!depth_guide && res.opacity > 0.5) {
                    // second pass guided by the first pass's depth
                    SampleSet refined = sample_ray(ray, 0.0, res.depth, rng, cfg.sampler);
                    res = registry.render_global(ray, refined);
                }
                img.set_pixel(x, y, res.color);
                depth.at(x, y) = res.opacity > 0.5 ? res.depth : 0.0;
            }
        }
    });
    if (depth_out) *depth_out = depth;
    return img;
}

// Held-out view synthesis + trajectory metrics for a finished run.
inline EvalReport evaluate_run(const Dataset& ds, const FieldRegistry& registry,
                               const std::vector<Pose>& trajectory, const RunConfig& cfg) {
    EvalReport report;
    if (!ds.test_indices.empty()) {
        report.has_image_metrics = true;
        double psnr_acc = 0.0, ssim_acc = 0.0;
        for (int f : ds.test_indices) {
            const ImageRGB rendered =
                render_view(registry, ds.camera, trajectory[size_t(f)], cfg);
            const double p = psnr(rendered, ds.frames[size_t(f)].image);
            const double s = ssim(rendered, ds.frames[size_t(f)].image);
            report.eval_frames.push_back(f);
            report.psnr_per_frame.push_back(p);
            report.ssim_per_frame.push_back(s);
            if (std::isinf(p)) report.psnr_infinite = true;
            psnr_acc += p;
            ssim_acc += s;
        }
        report.psnr_mean = psnr_acc / double(ds.test_indices.size());
        report.ssim_mean = ssim_acc / double(ds.test_indices.size());
    }
    if (int(ds.gt_trajectory.size()) == int(trajectory.size()) && trajectory.size() >= 3) {
        try {
            report.ate_rmse = ate(trajectory, ds.gt_trajectory);
            const RpeResult r = rpe(trajectory, ds.gt_trajectory, 1);
            report.rpe_rotation_deg = r.rotation_deg;
            report.rpe_translation = r.translation;
            report.has_pose_metrics = true;
        } catch (const DegenerateTrajectory&) {
            // collinear ground truth: ATE alignment is ill-posed, skip pose metrics
        }
    }
    return report;
}

// --- checkpoint directory ---------------------------------------------------

inline void save_run_outputs(const std::string& out_dir, const RunResult& result,
                             const Camera& cam, const RunConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir + "/fields");
    save_trajectory_tum(out_dir + "/trajectory.txt", result.trajectory);

    nlohmann::json reg;
    reg["camera"] = {{"fx", cam.fx}, {"fy", cam.fy}, {"cx", cam.cx},
                     {"cy", cam.cy}, {"width", cam.width}, {"height", cam.height}};
    reg["near"] = cfg.near;
    reg["far"] = cfg.far;
    reg["fields"] = nlohmann::json::array();
    char name[64];
    for (size_t i = 0; i < result.registry.entries.size(); ++i) {
        const LocalFieldEntry& e = result.registry.entries[i];
        std::snprintf(name, sizeof(name), "fields/field_%04d.bin", int(i));
        e.field.save(out_dir + "/" + name);
        nlohmann::json jf;
        jf["file"] = name;
        jf["center"] = {e.center().x(), e.center().y(), e.center().z()};
        jf["bound_radius"] = cfg.bound_radius_world();
        jf["frozen"] = e.frozen;
        jf["window"] = {e.window_begin, e.window_end};
        jf["checksum"] = e.freeze_checksum;
        reg["fields"].push_back(jf);
    }
    std::ofstream reg_out(out_dir + "/registry.json");
    reg_out << reg.dump(2) << "\n";

    std::ofstream events(out_dir + "/events.txt");
    for (const RegistryEvent& e : result.state.events) events << e.to_text() << "\n";

    std::ofstream diag(out_dir + "/diagnostics.txt");
    for (const std::string& d : result.state.diagnostics) diag << d << "\n";
}

struct LoadedRun {
    FieldRegistry registry;
    std::vector<Pose> trajectory;
    Camera camera;
    double near = 0.05, far = 10.0;
};

inline LoadedRun load_run_outputs(const std::string& run_dir) {
    std::ifstream reg_in(run_dir + "/registry.json");
    if (!reg_in) throw MissingFile("missing registry.json in " + run_dir);
    nlohmann::json reg = nlohmann::json::parse(reg_in);
    LoadedRun out;
    out.camera.fx = reg["camera"]["fx"].get<double>();
    out.camera.fy = reg["camera"]["fy"].get<double>();
    out.camera.cx = reg["camera"]["cx"].get<double>();
    out.camera.cy = reg["camera"]["cy"].get<double>();
    out.camera.width = reg["camera"]["width"].get<int>();
    out.camera.height = reg["camera"]["height"].get<int>();
    out.near = reg.value("near", 0.05);
    out.far = reg.value("far", 10.0);
    for (const auto& jf : reg["fields"]) {
        LocalFieldEntry e;
        e.field = TriplaneField::load(run_dir + "/" + jf["file"].get<std::string>());
        e.frozen = jf.value("frozen", true);
        e.window_begin = jf["window"][0].get<int>();
        e.window_end = jf["window"][1].get<int>();
        e.freeze_checksum = jf.value("checksum", uint64_t(0));
        out.registry.entries.push_back(std::move(e));
    }
    if (std::filesystem::exists(run_dir + "/trajectory.txt"))
        out.trajectory = load_trajectory_tum(run_dir + "/trajectory.txt");
    return out;
}

}  // namespace fieldchain
