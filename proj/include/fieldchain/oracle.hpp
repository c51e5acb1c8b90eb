#pragma once

// Synthetic ground-truth scenes and brute-force references.
//
// Scenes are built from constant-density textured primitives (axis-aligned
// boxes and spheres). Depth and flow are computed from analytic ray-
// primitive intersections, never through the renderer, so they can serve as
// independent oracles for it. All outputs are pure functions of (spec, seed).

#include "fieldchain/geometry.hpp"
#include "fieldchain/image.hpp"
#include "fieldchain/renderer.hpp"
#include "fieldchain/triplane.hpp"

#include <filesystem>

namespace fieldchain {

struct BadSpec : Error {
    using Error::Error;
};
struct TooLarge : Error {
    using Error::Error;
};

struct Primitive {
    enum class Kind { Box, Sphere };
    Kind kind = Kind::Box;
    Vec3 lo = Vec3::Zero();      // box corners
    Vec3 hi = Vec3::Ones();
    Vec3 center = Vec3::Zero();  // sphere
    double radius = 1.0;
    double sigma = 1e4;          // constant interior density
    Vec3 base_color = Vec3(0.8, 0.8, 0.8);

    static Primitive box(const Vec3& lo, const Vec3& hi, const Vec3& color) {
        Primitive p;
        p.kind = Kind::Box;
        p.lo = lo;
        p.hi = hi;
        p.base_color = color;
        return p;
    }
    static Primitive sphere(const Vec3& center, double radius, const Vec3& color) {
        Primitive p;
        p.kind = Kind::Sphere;
        p.center = center;
        p.radius = radius;
        p.base_color = color;
        return p;
    }
};

struct TextureParams {
    double checker_period = 0.4;   // scene units
    double checker_softness = 0.35;
    double noise_period = 1.7;
    double checker_amp = 0.45;
    double noise_amp = 0.20;
    double base = 0.35;
};

// Smooth procedural 3D texture: soft checkerboard plus a low-frequency
// sinusoidal component, per-channel phase shifted. Smooth everywhere so
// image pyramids keep usable gradients.
inline Vec3 procedural_texture(const Vec3& x, const Vec3& base_color, const TextureParams& tp) {
    const double wc = 2.0 * M_PI / tp.checker_period;
    const double checker =
        std::tanh(std::sin(wc * x.x()) * std::sin(wc * x.y() + 1.3) * std::sin(wc * x.z() + 2.1) /
                  tp.checker_softness) *
            0.5 +
        0.5;
    const double wn = 2.0 * M_PI / tp.noise_period;
    Vec3 out;
    for (int c = 0; c < 3; ++c) {
        const double phase = 1.7 * c;
        const double noise =
            0.5 + 0.5 * std::sin(wn * x.x() + phase) * std::cos(wn * (x.y() + 0.7 * x.z()) - phase);
        const double v = tp.base + tp.checker_amp * checker + tp.noise_amp * noise;
        out[c] = std::clamp(v * base_color[c], 0.0, 1.0);
    }
    return out;
}

struct TrajectoryScript {
    enum class Kind { Line, Orbit };
    Kind kind = Kind::Line;
    int frames = 2;
    Vec3 start = Vec3::Zero();
    Vec3 end = Vec3::UnitX();
    // sinusoidal lateral/vertical wobble along line paths; keeps trajectories
    // non-collinear so similarity alignment stays well-posed
    double wobble_y = 0.0;
    double wobble_z = 0.0;
    Vec3 look_at = Vec3(0, 0, 3);
    bool look_fixed_forward = false;  // ignore look_at, face +z
    double orbit_radius = 3.0;
    Vec3 orbit_center = Vec3::Zero();
    double orbit_degrees = 90.0;
};

// Camera frame: x right, y down (image convention), z forward; world +y up.
inline Pose look_at_pose(const Vec3& position, const Vec3& target) {
    Vec3 forward = (target - position).normalized();
    Vec3 down = Vec3(0, -1, 0) - forward * forward.dot(Vec3(0, -1, 0));
    if (down.norm() < 1e-9) down = Vec3(0, 0, forward.z() > 0 ? -1 : 1);
    down.normalize();
    const Vec3 right = down.cross(forward);
    Pose p;
    p.rotation.col(0) = right;
    p.rotation.col(1) = down;
    p.rotation.col(2) = forward;
    p.translation = position;
    return p;
}

inline std::vector<Pose> script_trajectory(const TrajectoryScript& s) {
    if (s.frames < 2) throw BadSpec("trajectory: need at least 2 poses");
    std::vector<Pose> poses;
    poses.reserve(size_t(s.frames));
    for (int i = 0; i < s.frames; ++i) {
        const double a = double(i) / double(s.frames - 1);
        if (s.kind == TrajectoryScript::Kind::Line) {
            Vec3 pos = s.start + a * (s.end - s.start);
            pos.y() += s.wobble_y * std::sin(2.0 * M_PI * 2.0 * a);
            pos.z() += s.wobble_z * std::sin(2.0 * M_PI * 1.5 * a + 0.8);
            if (s.look_fixed_forward) {
                Pose p;
                p.translation = pos;
                poses.push_back(p);
            } else {
                poses.push_back(look_at_pose(pos, s.look_at));
            }
        } else {
            const double ang = a * s.orbit_degrees * M_PI / 180.0;
            const Vec3 pos = s.orbit_center +
                             s.orbit_radius * Vec3(std::sin(ang), 0.0, -std::cos(ang));
            poses.push_back(look_at_pose(pos, s.orbit_center));
        }
    }
    return poses;
}

struct SceneSpec {
    std::vector<Primitive> primitives;
    TrajectoryScript trajectory;
    Camera camera;
    TextureParams texture;
    double depth_noise = 0.0;        // multiplicative stddev on emitted priors
    bool depth_affine = false;       // random per-frame affine corruption
    double far_clip = 100.0;
    int supersample = 2;             // NxN sub-pixel rays per image pixel
};

struct SyntheticScene {
    SceneSpec spec;
    uint64_t seed = 0;
    std::vector<Pose> trajectory;  // camera-to-world
    Camera camera;

    // analytic first-hit along a world ray: returns hit parameter t and the
    // primitive index, or t < 0 when nothing is hit
    std::pair<double, int> intersect(const Vec3& origin, const Vec3& dir) const {
        double best_t = -1.0;
        int best_i = -1;
        for (int i = 0; i < int(spec.primitives.size()); ++i) {
            const Primitive& p = spec.primitives[size_t(i)];
            double t_hit = -1.0;
            if (p.kind == Primitive::Kind::Box) {
                double t0 = 1e-9, t1 = spec.far_clip;
                bool ok = true;
                for (int a = 0; a < 3 && ok; ++a) {
                    if (std::abs(dir[a]) < 1e-12) {
                        if (origin[a] < p.lo[a] || origin[a] > p.hi[a]) ok = false;
                        continue;
                    }
                    double ta = (p.lo[a] - origin[a]) / dir[a];
                    double tb = (p.hi[a] - origin[a]) / dir[a];
                    if (ta > tb) std::swap(ta, tb);
                    t0 = std::max(t0, ta);
                    t1 = std::min(t1, tb);
                    if (t0 > t1) ok = false;
                }
                if (ok) t_hit = t0;
            } else {
                const Vec3 oc = origin - p.center;
                const double b = oc.dot(dir);
                const double c = oc.squaredNorm() - p.radius * p.radius;
                const double disc = b * b - c;
                if (disc >= 0) {
                    const double root = std::sqrt(disc);
                    double t0 = -b - root;
                    if (t0 < 1e-9) t0 = -b + root;
                    if (t0 >= 1e-9) t_hit = t0;
                }
            }
            if (t_hit > 0 && (best_t < 0 || t_hit < best_t)) {
                best_t = t_hit;
                best_i = i;
            }
        }
        return {best_t, best_i};
    }

    Vec3 shade(const Vec3& point, int prim_index) const {
        const Primitive& p = spec.primitives[size_t(prim_index)];
        return procedural_texture(point, p.base_color, spec.texture);
    }

    // Box-filter supersampled shading; keeps image noise well below the
    // interpolation error of downstream feature lookups.
    ImageRGB render_frame(int frame) const {
        const Pose& pose = trajectory[size_t(frame)];
        ImageRGB img(camera.width, camera.height);
        const int ss = std::max(spec.supersample, 1);
        for (int y = 0; y < camera.height; ++y)
            for (int x = 0; x < camera.width; ++x) {
                Vec3 acc = Vec3::Zero();
                for (int sy = 0; sy < ss; ++sy)
                    for (int sx = 0; sx < ss; ++sx) {
                        const Vec2 px(x + (sx + 0.5) / ss - 0.5, y + (sy + 0.5) / ss - 0.5);
                        const Vec3 dir =
                            pose.rotation * backproject(camera, px, 1.0).normalized();
                        const auto [t, i] = intersect(pose.translation, dir);
                        if (i >= 0) acc += shade(pose.translation + t * dir, i);
                    }
                img.set_pixel(x, y, acc / double(ss * ss));
            }
        return img;
    }

    // z-depth (camera-frame z of the hit), 0 where no hit
    ImageGray depth_frame(int frame) const {
        const Pose& pose = trajectory[size_t(frame)];
        ImageGray d(camera.width, camera.height, 0.0);
        for (int y = 0; y < camera.height; ++y)
            for (int x = 0; x < camera.width; ++x) {
                const Vec3 dir_cam = backproject(camera, Vec2(x, y), 1.0).normalized();
                const Vec3 dir = pose.rotation * dir_cam;
                const auto [t, i] = intersect(pose.translation, dir);
                if (i >= 0) d.at(x, y) = t * dir_cam.z();
            }
        return d;
    }

    // Geometric flow from `frame` to `target` in Eq-16 convention
    // (source pixel minus reprojected pixel); occluded or out-of-view
    // targets marked invalid. Independent of the renderer under test.
    ImageFlow flow_frame(int frame, int target) const {
        const Pose& pa = trajectory[size_t(frame)];
        const Pose& pb = trajectory[size_t(target)];
        const Pose w2c_b = pb.inverse();
        ImageFlow flow(camera.width, camera.height);
        for (int y = 0; y < camera.height; ++y)
            for (int x = 0; x < camera.width; ++x) {
                const Vec3 dir = pa.rotation * backproject(camera, Vec2(x, y), 1.0).normalized();
                const auto [t, i] = intersect(pa.translation, dir);
                if (i < 0) continue;
                const Vec3 xw = pa.translation + t * dir;
                const Vec3 p_b = w2c_b * xw;
                if (p_b.z() <= 1e-8) continue;
                const Vec2 px_b = project(camera, p_b);
                if (px_b.x() < 0 || px_b.x() > camera.width - 1 || px_b.y() < 0 ||
                    px_b.y() > camera.height - 1)
                    continue;
                // occlusion: the point must be the first hit from b as well
                const Vec3 dir_b = (xw - pb.translation).normalized();
                const auto [tb, ib] = intersect(pb.translation, dir_b);
                if (ib < 0 || std::abs(tb - (xw - pb.translation).norm()) > 1e-6 * (1.0 + tb) + 1e-4)
                    continue;
                flow.set(x, y, Vec2(x, y) - px_b);
            }
        return flow;
    }
};

inline SyntheticScene make_scene(const SceneSpec& spec, uint64_t seed) {
    if (spec.primitives.empty()) throw BadSpec("make_scene: need at least one primitive");
    if (spec.trajectory.frames < 2) throw BadSpec("make_scene: need at least two poses");
    if (!spec.camera.is_valid()) throw BadSpec("make_scene: invalid camera");
    SyntheticScene scene;
    scene.spec = spec;
    scene.seed = seed;
    scene.camera = spec.camera;
    scene.trajectory = script_trajectory(spec.trajectory);
    return scene;
}

// Multiplicative noise plus optional per-frame affine (a*d + b) corruption,
// seeded per frame; invalid pixels stay invalid.
inline ImageGray corrupt_depth(const ImageGray& depth, uint64_t seed, int frame,
                               double noise_frac, bool affine) {
    Rng rng(mix_seed(seed, 0xDE9, uint64_t(frame)));
    const double a = affine ? rng.uniform(0.85, 1.2) : 1.0;
    const double b = affine ? rng.uniform(-0.15, 0.15) : 0.0;
    ImageGray out(depth.width, depth.height, 0.0);
    for (int y = 0; y < depth.height; ++y)
        for (int x = 0; x < depth.width; ++x) {
            const double d = depth.at(x, y);
            if (!(d > 0)) continue;
            const double noisy = d * (1.0 + noise_frac * rng.normal());
            out.at(x, y) = std::max(a * noisy + b, 1e-3);
        }
    return out;
}

// Dense reconstruction of one channel's full grid from the factors:
// value(i,j,k) = sum_r vX[i] Myz[j,k] + vY[j] Mxz[i,k] + vZ[k] Mxy[i,j].
// Grid node (i,j,k) corresponds to the contracted point
// (-2 + 4i/(n-1), ...). Memory-guarded at n <= 32.
inline std::vector<double> dense_grid_reference(const TriplaneField& field, int channel = 0) {
    const int n = field.resolution();
    if (n > 32) throw TooLarge("dense_grid_reference: resolution above 32");
    const auto& p = field.params();
    std::vector<double> grid(size_t(n) * n * n, 0.0);
    for (int r = 0; r < field.rank(); ++r) {
        const double* vx = &p[field.vector_offset(channel, r, 0)];
        const double* vy = &p[field.vector_offset(channel, r, 1)];
        const double* vz = &p[field.vector_offset(channel, r, 2)];
        const double* myz = &p[field.matrix_offset(channel, r, 0)];
        const double* mxz = &p[field.matrix_offset(channel, r, 1)];
        const double* mxy = &p[field.matrix_offset(channel, r, 2)];
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k)
                    grid[(size_t(i) * n + j) * n + k] += vx[i] * myz[size_t(j) * n + k] +
                                                         vy[j] * mxz[size_t(i) * n + k] +
                                                         vz[k] * mxy[size_t(i) * n + j];
    }
    return grid;
}

// Piecewise-constant density description for the analytic render reference.
struct DensitySegment {
    double t0 = 0.0, t1 = 0.0;
    double sigma = 0.0;
    Vec3 color = Vec3::Zero();
};

struct AnalyticRender {
    Vec3 color = Vec3::Zero();
    double depth = 0.0;
    double opacity = 0.0;
};

// Queryable piecewise-constant medium along one ray; plugs into render()
// so the discrete renderer can be checked against the closed-form
// reference below.
struct SegmentMedium {
    Ray ray;
    std::vector<DensitySegment> segments;

    FieldSample query(const Vec3& x, const Vec3&) const {
        const double t = (x - ray.origin).dot(ray.direction);
        for (const DensitySegment& s : segments)
            if (t >= s.t0 && t < s.t1) return {s.color, s.sigma};
        return {Vec3::Zero(), 0.0};
    }
};

// Closed-form evaluation of the discrete transmittance sums for a uniform
// left-edge sample grid of `n_samples` over [near, far]: per constant-
// density segment the partial sums are geometric series, so no per-sample
// loop is needed. Exact when segment boundaries align with the grid.
inline AnalyticRender analytic_render_reference(const std::vector<DensitySegment>& segments,
                                                double near, double far, int n_samples) {
    AnalyticRender out;
    const double step = (far - near) / n_samples;
    double log_t = 0.0;  // log transmittance entering the current segment
    for (const DensitySegment& seg : segments) {
        if (seg.t1 <= near || seg.t0 >= far) continue;
        const double a = std::max(seg.t0, near), b = std::min(seg.t1, far);
        // samples with t_k = near + k*step inside [a, b)
        const int64_t k0 = int64_t(std::ceil((a - near) / step - 1e-9));
        const int64_t k1 = int64_t(std::ceil((b - near) / step - 1e-9));
        const int64_t count = k1 - k0;
        if (count <= 0 || seg.sigma <= 0.0) continue;
        const double x = std::exp(-seg.sigma * step);
        const double t_in = std::exp(log_t);
        const double t_first = near + double(k0) * step;
        const double xk = std::pow(x, double(count));
        const double s0 = (1.0 - xk) / (1.0 - x);  // sum x^j
        // sum j x^j = x (1 - K x^{K-1} + (K-1) x^K) / (1-x)^2
        const double s1 = x * (1.0 - double(count) * std::pow(x, double(count - 1)) +
                               double(count - 1) * xk) /
                          ((1.0 - x) * (1.0 - x));
        const double weight = t_in * (1.0 - xk);
        out.color += weight * seg.color;
        out.depth += t_in * (1.0 - x) * (t_first * s0 + step * s1);
        out.opacity += weight;
        log_t -= seg.sigma * step * double(count);
    }
    return out;
}

// --- dataset emission -----------------------------------------------------
//
// Writes the directory layout the pipeline ingests: images/, depth/ (PFM),
// flow_fwd/ and flow_bwd/ (.flo), gt_trajectory.txt, dataset.cfg. Depth
// priors are corrupted per the spec's noise settings; everything else is
// exact.
inline void emit_dataset(const SyntheticScene& scene, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir + "/images");
    fs::create_directories(out_dir + "/depth");
    fs::create_directories(out_dir + "/flow_fwd");
    fs::create_directories(out_dir + "/flow_bwd");

    const int n = int(scene.trajectory.size());
    char name[64];
    for (int f = 0; f < n; ++f) {
        std::snprintf(name, sizeof(name), "/images/frame_%04d.png", f);
        save_png_rgb8(out_dir + name, scene.render_frame(f));
        ImageGray depth = scene.depth_frame(f);
        if (scene.spec.depth_noise > 0 || scene.spec.depth_affine)
            depth = corrupt_depth(depth, scene.seed, f, scene.spec.depth_noise,
                                  scene.spec.depth_affine);
        std::snprintf(name, sizeof(name), "/depth/frame_%04d.pfm", f);
        save_pfm(out_dir + name, depth);
        if (f + 1 < n) {
            std::snprintf(name, sizeof(name), "/flow_fwd/frame_%04d.flo", f);
            save_flo(out_dir + name, scene.flow_frame(f, f + 1));
        }
        if (f > 0) {
            std::snprintf(name, sizeof(name), "/flow_bwd/frame_%04d.flo", f);
            save_flo(out_dir + name, scene.flow_frame(f, f - 1));
        }
    }
    save_trajectory_tum(out_dir + "/gt_trajectory.txt", scene.trajectory);

    Config cfg;
    cfg.set("fx", std::to_string(scene.camera.fx));
    cfg.set("fy", std::to_string(scene.camera.fy));
    cfg.set("cx", std::to_string(scene.camera.cx));
    cfg.set("cy", std::to_string(scene.camera.cy));
    cfg.set("width", std::to_string(scene.camera.width));
    cfg.set("height", std::to_string(scene.camera.height));
    cfg.set("frames", std::to_string(n));
    cfg.set("image_pattern", "images/frame_%04d.png");
    cfg.set("depth_pattern", "depth/frame_%04d.pfm");
    cfg.set("flow_fwd_pattern", "flow_fwd/frame_%04d.flo");
    cfg.set("flow_bwd_pattern", "flow_bwd/frame_%04d.flo");
    cfg.set("gt_trajectory", "gt_trajectory.txt");
    std::ofstream out(out_dir + "/dataset.cfg");
    out << cfg.to_text();
}

// Scene construction from the shared key-value config format.
inline SceneSpec scene_spec_from_config(const Config& c) {
    SceneSpec spec;
    spec.camera.fx = c.get_double("fx", 96.0);
    spec.camera.fy = c.get_double("fy", 96.0);
    spec.camera.width = c.get_int("width", 96);
    spec.camera.height = c.get_int("height", 72);
    spec.camera.cx = c.get_double("cx", spec.camera.width * 0.5);
    spec.camera.cy = c.get_double("cy", spec.camera.height * 0.5);
    spec.trajectory.frames = c.get_int("frames", 30);
    const std::string kind = c.get_str("trajectory", "line");
    if (kind == "orbit") {
        spec.trajectory.kind = TrajectoryScript::Kind::Orbit;
        spec.trajectory.orbit_radius = c.get_double("orbit_radius", 3.0);
        spec.trajectory.orbit_degrees = c.get_double("orbit_degrees", 90.0);
    } else {
        spec.trajectory.kind = TrajectoryScript::Kind::Line;
        spec.trajectory.start =
            Vec3(c.get_double("start_x", 0), c.get_double("start_y", 0), c.get_double("start_z", 0));
        spec.trajectory.end =
            Vec3(c.get_double("end_x", 2.5), c.get_double("end_y", 0), c.get_double("end_z", 0));
        spec.trajectory.look_at = Vec3(c.get_double("look_x", 1.25), c.get_double("look_y", 0),
                                       c.get_double("look_z", 3.0));
        spec.trajectory.look_fixed_forward = c.get_bool("look_fixed_forward", false);
        spec.trajectory.wobble_y = c.get_double("wobble_y", 0.02);
        spec.trajectory.wobble_z = c.get_double("wobble_z", 0.03);
    }
    spec.texture.checker_period = c.get_double("texture_period", spec.texture.checker_period);
    spec.texture.noise_period = c.get_double("texture_noise_period", spec.texture.noise_period);
    spec.depth_noise = c.get_double("depth_noise", 0.0);
    spec.depth_affine = c.get_bool("depth_affine", false);

    const int n_prims = c.get_int("primitives", 0);
    if (n_prims == 0) {
        // default: a textured back wall of boxes plus foreground spheres
        spec.primitives.push_back(Primitive::box(Vec3(-4, -2.0, 3.2), Vec3(7, 2.0, 4.2),
                                                 Vec3(0.9, 0.85, 0.8)));
        spec.primitives.push_back(
            Primitive::box(Vec3(-0.8, -1.0, 2.2), Vec3(0.0, 0.2, 3.0), Vec3(0.9, 0.5, 0.4)));
        spec.primitives.push_back(Primitive::sphere(Vec3(1.6, 0.4, 2.5), 0.5, Vec3(0.4, 0.6, 0.9)));
        spec.primitives.push_back(
            Primitive::box(Vec3(2.8, -1.2, 2.0), Vec3(3.6, 0.6, 2.8), Vec3(0.5, 0.9, 0.5)));
    } else {
        for (int i = 0; i < n_prims; ++i) {
            const std::string key = "prim" + std::to_string(i) + "_";
            const std::string kindp = c.get_str(key + "kind", "box");
            const Vec3 color(c.get_double(key + "r", 0.8), c.get_double(key + "g", 0.8),
                             c.get_double(key + "b", 0.8));
            if (kindp == "sphere") {
                spec.primitives.push_back(Primitive::sphere(
                    Vec3(c.get_double(key + "x", 0), c.get_double(key + "y", 0),
                         c.get_double(key + "z", 3)),
                    c.get_double(key + "radius", 0.5), color));
            } else {
                spec.primitives.push_back(Primitive::box(
                    Vec3(c.get_double(key + "lox", -1), c.get_double(key + "loy", -1),
                         c.get_double(key + "loz", 3)),
                    Vec3(c.get_double(key + "hix", 1), c.get_double(key + "hiy", 1),
                         c.get_double(key + "hiz", 4)),
                    color));
            }
        }
    }
    return spec;
}

}  // namespace fieldchain
