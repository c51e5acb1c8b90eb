#pragma once

// Feature-metric bundle adjustment between consecutive frames.
//
// Images are encoded into a deterministic multi-scale feature pyramid
// (grayscale + image gradients per level, with a texture-driven confidence
// map). Pose is estimated by minimizing robust feature residuals at
// reprojected 3D points with damped Levenberg-Marquardt steps on SE(3),
// swept from the coarsest to the finest level.

#include "fieldchain/geometry.hpp"
#include "fieldchain/image.hpp"

#include <Eigen/Eigenvalues>

namespace fieldchain {

struct ImageTooSmall : Error {
    using Error::Error;
};
struct SingularSystem : Error {
    using Error::Error;
};
struct Diverged : Error {
    using Error::Error;
};
struct NoValidPoints : Error {
    using Error::Error;
};

struct PyramidLevel {
    int width = 0, height = 0;
    std::array<ImageGray, 3> channels;  // grayscale, d/dx, d/dy
    ImageGray confidence;               // in [0,1], high where textured
};

struct FeaturePyramid {
    std::vector<PyramidLevel> levels;  // levels[0] = level 1 = full resolution

    int level_count() const { return int(levels.size()); }
    const PyramidLevel& level(int l) const { return levels.at(size_t(l) - 1); }
};

struct PyramidParams {
    double confidence_k = 10.0;
    double confidence_tau = 0.05;
    // gray is scaled toward unit range so the Huber threshold (1.0 in
    // feature units) separates occlusion outliers from aligned residuals;
    // gradient channels stay de-emphasized because their amplitude changes
    // under scale/forward motion, which would otherwise bias the optimum
    double gray_gain = 2.0;
    double gradient_gain = 0.5;
};

namespace detail {

inline ImageGray to_gray(const ImageRGB& rgb) {
    ImageGray g(rgb.width, rgb.height);
    for (int y = 0; y < rgb.height; ++y)
        for (int x = 0; x < rgb.width; ++x) {
            const double* p = rgb.at(x, y);
            g.at(x, y) = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
    return g;
}

// 5-tap binomial blur, clamped borders.
inline ImageGray blur5(const ImageGray& in) {
    static constexpr double k[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
    ImageGray tmp(in.width, in.height), out(in.width, in.height);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x) {
            double acc = 0;
            for (int i = -2; i <= 2; ++i)
                acc += k[i + 2] * in.at(std::clamp(x + i, 0, in.width - 1), y);
            tmp.at(x, y) = acc;
        }
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x) {
            double acc = 0;
            for (int i = -2; i <= 2; ++i)
                acc += k[i + 2] * tmp.at(x, std::clamp(y + i, 0, in.height - 1));
            out.at(x, y) = acc;
        }
    return out;
}

inline ImageGray decimate2(const ImageGray& in) {
    ImageGray out(in.width / 2, in.height / 2);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) out.at(x, y) = in.at(2 * x, 2 * y);
    return out;
}

inline PyramidLevel make_level(const ImageGray& gray, const PyramidParams& p) {
    PyramidLevel lvl;
    lvl.width = gray.width;
    lvl.height = gray.height;
    ImageGray g0(gray.width, gray.height);
    ImageGray dx(gray.width, gray.height), dy(gray.width, gray.height);
    lvl.confidence = ImageGray(gray.width, gray.height);
    for (int y = 0; y < gray.height; ++y)
        for (int x = 0; x < gray.width; ++x) {
            const int xm = std::max(x - 1, 0), xp = std::min(x + 1, gray.width - 1);
            const int ym = std::max(y - 1, 0), yp = std::min(y + 1, gray.height - 1);
            const double gx = 0.5 * (gray.at(xp, y) - gray.at(xm, y));
            const double gy = 0.5 * (gray.at(x, yp) - gray.at(x, ym));
            g0.at(x, y) = p.gray_gain * (gray.at(x, y) - 0.5);
            dx.at(x, y) = p.gradient_gain * gx;
            dy.at(x, y) = p.gradient_gain * gy;
            // confidence stays on raw [0,1] intensity gradients
            lvl.confidence.at(x, y) =
                logistic(p.confidence_k * (std::hypot(gx, gy) - p.confidence_tau));
        }
    lvl.channels[0] = std::move(g0);
    lvl.channels[1] = std::move(dx);
    lvl.channels[2] = std::move(dy);
    return lvl;
}

}  // namespace detail

// Deterministic substitute for a learned encoder: level 1 is full
// resolution; each coarser level is a blurred 2x decimation of the previous
// one. Confidence favors textured pixels.
inline FeaturePyramid build_pyramid(const ImageRGB& image, int level_count,
                                    const PyramidParams& params = {}) {
    if (image.width <= 0 || image.height <= 0) throw ImageTooSmall("build_pyramid: empty image");
    if (level_count < 1) throw Error("build_pyramid: need at least one level");
    if (std::min(image.width, image.height) >> (level_count - 1) < 8)
        throw ImageTooSmall("build_pyramid: coarsest level would be under 8 px");
    FeaturePyramid pyr;
    // one blur at full resolution keeps the finest level's bilinear lookups
    // faithful to the underlying signal
    ImageGray gray = detail::blur5(detail::to_gray(image));
    pyr.levels.push_back(detail::make_level(gray, params));
    for (int l = 2; l <= level_count; ++l) {
        gray = detail::decimate2(detail::blur5(gray));
        pyr.levels.push_back(detail::make_level(gray, params));
    }
    return pyr;
}

// Catmull-Rom sampling of a feature map; C1-smooth between cells, which
// keeps sub-pixel lookups nearly bias-free compared to bilinear.
inline double bicubic(const ImageGray& img, double x, double y) {
    const auto kernel = [](double t) {
        const double a = std::abs(t);
        if (a < 1.0) return 1.5 * a * a * a - 2.5 * a * a + 1.0;
        if (a < 2.0) return -0.5 * a * a * a + 2.5 * a * a - 4.0 * a + 2.0;
        return 0.0;
    };
    const int x1 = std::clamp(int(std::floor(x)), 1, img.width - 3);
    const int y1 = std::clamp(int(std::floor(y)), 1, img.height - 3);
    const double fx = x - x1, fy = y - y1;
    double acc = 0.0;
    for (int j = -1; j <= 2; ++j) {
        const double wy = kernel(fy - j);
        if (wy == 0.0) continue;
        for (int i = -1; i <= 2; ++i) {
            const double wx = kernel(fx - i);
            if (wx == 0.0) continue;
            acc += wy * wx * img.at(x1 + i, y1 + j);
        }
    }
    return acc;
}

// 3D points (world frame) observed at known pixels of frame a.
struct Correspondences {
    std::vector<Vec3> points;   // world coordinates
    std::vector<Vec2> pixels_a; // full-resolution pixel in frame a
};

// Back-projects a sparse pixel grid of frame a using its depth map. Pixels
// near depth discontinuities are skipped: the blur in the feature pyramid
// mixes foreground and background there, which would bias the residuals.
// The edge test compares inner quantiles of the local depth window so that
// pixel-level prior noise does not reject smooth regions.
inline Correspondences make_correspondences(const Camera& cam, const Pose& pose_a_c2w,
                                            const ImageGray& depth_a, int stride = 8,
                                            double edge_rel_tol = 0.25) {
    Correspondences corr;
    const int guard = 3;
    std::vector<double> window;
    window.reserve((2 * guard + 1) * (2 * guard + 1));
    for (int y = stride / 2; y < depth_a.height; y += stride)
        for (int x = stride / 2; x < depth_a.width; x += stride) {
            const double d = depth_a.at(x, y);
            if (!(d > 0) || !std::isfinite(d)) continue;
            bool near_hole = false;
            window.clear();
            for (int dy = -guard; dy <= guard && !near_hole; ++dy)
                for (int dx = -guard; dx <= guard; ++dx) {
                    const int xx = std::clamp(x + dx, 0, depth_a.width - 1);
                    const int yy = std::clamp(y + dy, 0, depth_a.height - 1);
                    const double dn = depth_a.at(xx, yy);
                    if (!(dn > 0)) {
                        near_hole = true;  // adjacent to a no-depth region
                        break;
                    }
                    window.push_back(dn);
                }
            if (near_hole) continue;
            std::sort(window.begin(), window.end());
            const size_t lo_i = window.size() / 10;
            const size_t hi_i = window.size() - 1 - window.size() / 10;
            if (window[hi_i] - window[lo_i] > edge_rel_tol * d) continue;
            const Vec3 p_cam = backproject(cam, Vec2(x, y), d);
            corr.points.push_back(pose_a_c2w * p_cam);
            corr.pixels_a.push_back(Vec2(x, y));
        }
    return corr;
}

struct FeatureResiduals {
    std::vector<Vec3> residuals;   // one 3-channel residual per correspondence
    std::vector<double> weights;   // product of both frames' confidences
    std::vector<uint8_t> valid;    // projection inside frame b and in front
    std::vector<Vec3> p_cam_b;     // camera-frame point in b (valid entries)
    std::vector<Vec2> proj_b;      // level-scale projection in b (valid entries)
    int n_valid = 0;
};

inline Vec3 lookup_features(const PyramidLevel& lvl, const Vec2& px) {
    return {bicubic(lvl.channels[0], px.x(), px.y()), bicubic(lvl.channels[1], px.x(), px.y()),
            bicubic(lvl.channels[2], px.x(), px.y())};
}

// Residual r_i = F_b[proj(pose * P_i)] - F_a[p_a_i] at pyramid level
// `level`; `pose_b_w2c` maps world points into frame b's camera frame.
// Points projecting behind the camera or outside frame b are masked out.
inline FeatureResiduals feature_residual(const FeaturePyramid& pyr_a, const FeaturePyramid& pyr_b,
                                         const Correspondences& corr, const Pose& pose_b_w2c,
                                         const Camera& cam, int level) {
    const PyramidLevel& la = pyr_a.level(level);
    const PyramidLevel& lb = pyr_b.level(level);
    const Camera lvl_cam = cam.at_level(level);
    const double scale = 1.0 / double(1 << (level - 1));

    FeatureResiduals out;
    const size_t n = corr.points.size();
    out.residuals.assign(n, Vec3::Zero());
    out.weights.assign(n, 0.0);
    out.valid.assign(n, 0);
    out.p_cam_b.assign(n, Vec3::Zero());
    out.proj_b.assign(n, Vec2::Zero());

    for (size_t i = 0; i < n; ++i) {
        const Vec3 p_cam = pose_b_w2c * corr.points[i];
        if (p_cam.z() <= 1e-8) continue;
        const Vec2 px_b = project(lvl_cam, p_cam);
        if (px_b.x() < 0 || px_b.x() > lb.width - 1 || px_b.y() < 0 || px_b.y() > lb.height - 1)
            continue;
        const Vec2 px_a = corr.pixels_a[i] * scale;
        if (px_a.x() < 0 || px_a.x() > la.width - 1 || px_a.y() < 0 || px_a.y() > la.height - 1)
            continue;
        out.residuals[i] = lookup_features(lb, px_b) - lookup_features(la, px_a);
        out.weights[i] = bilinear(lb.confidence, px_b.x(), px_b.y()) *
                         bilinear(la.confidence, px_a.x(), px_a.y());
        out.valid[i] = 1;
        out.p_cam_b[i] = p_cam;
        out.proj_b[i] = px_b;
        ++out.n_valid;
    }
    return out;
}

// Huber cost on the squared residual norm: quadratic below c, linear above.
inline double huber_sq(double s, double c, double* drho = nullptr) {
    if (s <= c) {
        if (drho) *drho = 1.0;
        return s;
    }
    if (drho) *drho = std::sqrt(c / s);
    return 2.0 * std::sqrt(c * s) - c;
}

struct RobustError {
    double total = 0.0;
    std::vector<double> rho_prime;  // per-residual, for IRLS reweighting
};

inline RobustError robust_total_error(const FeatureResiduals& res, double huber_c) {
    RobustError out;
    out.rho_prime.assign(res.residuals.size(), 0.0);
    for (size_t i = 0; i < res.residuals.size(); ++i) {
        if (!res.valid[i]) continue;
        double dr = 0.0;
        out.total += res.weights[i] * huber_sq(res.residuals[i].squaredNorm(), huber_c, &dr);
        out.rho_prime[i] = dr;
    }
    return out;
}

// One damped Gauss-Newton step: solves (H + lambda diag(H)) delta = -J^T W r
// with H = J^T W J over the valid rows. W combines confidence weights and
// the Huber derivative.
inline Tangent lm_step(const std::vector<Vec3>& residuals,
                       const std::vector<Eigen::Matrix<double, 3, 6>>& jacobians,
                       const std::vector<double>& weights, double lambda) {
    Mat6 h = Mat6::Zero();
    Vec6 g = Vec6::Zero();
    int rows = 0;
    for (size_t i = 0; i < residuals.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        h.noalias() += weights[i] * jacobians[i].transpose() * jacobians[i];
        g.noalias() += weights[i] * jacobians[i].transpose() * residuals[i];
        rows += 3;
    }
    if (rows < 6) throw SingularSystem("lm_step: fewer than 6 scalar residual rows");
    Mat6 damped = h + lambda * Mat6(h.diagonal().asDiagonal());
    Eigen::SelfAdjointEigenSolver<Mat6> eig(damped);
    const double emin = eig.eigenvalues().minCoeff(), emax = eig.eigenvalues().maxCoeff();
    if (!(emin > 0) || emax / emin > 1e12)
        throw SingularSystem("lm_step: condition number above 1e12");
    const Vec6 delta = damped.ldlt().solve(-g);
    return Tangent::from_vector(delta);
}

struct AlignRecord {
    int level = 0;
    int iteration = 0;
    double lambda = 0.0;
    double error = 0.0;
    bool accepted = false;
};

struct AlignDiagnostics {
    std::vector<AlignRecord> records;
    bool converged = false;
    std::string status;

    // One structured-text record per LM iteration.
    std::string to_text() const {
        std::string out;
        char line[160];
        for (const auto& r : records) {
            std::snprintf(line, sizeof(line), "level=%d iter=%d lambda=%.3e error=%.9e accepted=%d\n",
                          r.level, r.iteration, r.lambda, r.error, int(r.accepted));
            out += line;
        }
        out += "status=" + status + "\n";
        return out;
    }
};

struct AlignParams {
    int max_iterations = 50;
    double delta_tol = 1e-8;
    double no_progress_tol = 1e-6;  // rejected steps below this end the level
    double f_tol = 1e-5;            // relative error change treated as the floor
    double lambda_init = 1e-3;
    int max_consecutive_rejects = 10;
    double huber_c = 1.0;
    double jacobian_step_px = 0.5;  // feature-map central-difference tap
};

namespace detail {

// Robust error under weights frozen at the start of a level sweep. Freezing
// keeps the objective fixed within the level, so the accept test cannot be
// gamed by drifting projections into low-confidence image regions.
inline double frozen_weight_error(const FeatureResiduals& res,
                                  const std::vector<double>& frozen_w, double huber_c,
                                  RobustError* out = nullptr) {
    double total = 0.0;
    if (out) out->rho_prime.assign(res.residuals.size(), 0.0);
    for (size_t i = 0; i < res.residuals.size(); ++i) {
        if (!res.valid[i] || frozen_w[i] <= 0.0) continue;
        double dr = 0.0;
        total += frozen_w[i] * huber_sq(res.residuals[i].squaredNorm(), huber_c, &dr);
        if (out) out->rho_prime[i] = dr;
    }
    if (out) out->total = total;
    return total;
}

// Accept-test errors evaluated on the intersection of both poses' valid
// sets, so a candidate cannot win by pushing points out of view.
inline std::pair<double, double> paired_errors(const FeatureResiduals& cur,
                                               const FeatureResiduals& next,
                                               const std::vector<double>& frozen_w,
                                               double huber_c) {
    double e_cur = 0.0, e_new = 0.0;
    for (size_t i = 0; i < cur.residuals.size(); ++i) {
        if (!cur.valid[i] || !next.valid[i] || frozen_w[i] <= 0.0) continue;
        e_cur += frozen_w[i] * huber_sq(cur.residuals[i].squaredNorm(), huber_c);
        e_new += frozen_w[i] * huber_sq(next.residuals[i].squaredNorm(), huber_c);
    }
    return {e_cur, e_new};
}

inline Eigen::Matrix<double, 3, 6> residual_jacobian(const PyramidLevel& lb, const Camera& lvl_cam,
                                                     const Vec3& p_cam, const Vec2& px,
                                                     double h_px) {
    // d(feature)/d(pixel) by 2-tap central differences of the map
    Eigen::Matrix<double, 3, 2> j_feat;
    for (int c = 0; c < 3; ++c) {
        const ImageGray& ch = lb.channels[size_t(c)];
        j_feat(c, 0) =
            (bicubic(ch, px.x() + h_px, px.y()) - bicubic(ch, px.x() - h_px, px.y())) / (2 * h_px);
        j_feat(c, 1) =
            (bicubic(ch, px.x(), px.y() + h_px) - bicubic(ch, px.x(), px.y() - h_px)) / (2 * h_px);
    }
    // d(p_cam)/d(xi) for a left update exp(xi) * pose_w2c
    Eigen::Matrix<double, 3, 6> j_pose;
    j_pose.leftCols<3>() = -skew(p_cam);
    j_pose.rightCols<3>() = Mat3::Identity();
    return j_feat * projection_jacobian(lvl_cam, p_cam) * j_pose;
}

}  // namespace detail

// Coarse-to-fine damped LM alignment. `init_b_c2w` is the initial guess for
// frame b's camera-to-world pose; the refined pose is returned in the same
// convention. Accepted steps never increase the robust error.
inline Pose align(const FeaturePyramid& pyr_a, const FeaturePyramid& pyr_b,
                  const Correspondences& corr, const Pose& init_b_c2w, const Camera& cam,
                  const AlignParams& params = {}, AlignDiagnostics* diag_out = nullptr) {
    AlignDiagnostics local_diag;
    AlignDiagnostics& diag = diag_out ? *diag_out : local_diag;
    diag.records.clear();
    diag.converged = false;

    Pose w2c = init_b_c2w.inverse();
    const int level_count = std::min(pyr_a.level_count(), pyr_b.level_count());

    for (int level = level_count; level >= 1; --level) {
        double lambda = params.lambda_init;
        FeatureResiduals res = feature_residual(pyr_a, pyr_b, corr, w2c, cam, level);
        const std::vector<double> frozen_w = res.weights;  // level-start confidences
        RobustError err;
        detail::frozen_weight_error(res, frozen_w, params.huber_c, &err);
        const double level_start_error = err.total;
        int consecutive_rejects = 0;

        for (int iter = 0; iter < params.max_iterations; ++iter) {
            const PyramidLevel& lb = pyr_b.level(level);
            const Camera lvl_cam = cam.at_level(level);
            std::vector<Eigen::Matrix<double, 3, 6>> jacobians(res.residuals.size());
            std::vector<double> w(res.residuals.size(), 0.0);
            for (size_t i = 0; i < res.residuals.size(); ++i) {
                if (!res.valid[i]) continue;
                jacobians[i] = detail::residual_jacobian(lb, lvl_cam, res.p_cam_b[i], res.proj_b[i],
                                                         params.jacobian_step_px);
                w[i] = frozen_w[i] * err.rho_prime[i];
            }

            Tangent delta;
            try {
                delta = lm_step(res.residuals, jacobians, w, lambda);
            } catch (const SingularSystem&) {
                diag.status = "singular";
                diag.records.push_back({level, iter, lambda, err.total, false});
                throw;
            }
            if (delta.norm() < params.delta_tol) {
                diag.records.push_back({level, iter, lambda, err.total, true});
                break;  // converged at this level
            }

            const Pose candidate = se3_exp(delta) * w2c;
            FeatureResiduals res_new = feature_residual(pyr_a, pyr_b, corr, candidate, cam, level);
            RobustError err_new;
            detail::frozen_weight_error(res_new, frozen_w, params.huber_c, &err_new);

            // accept needs improvement on the jointly valid points (so steps
            // cannot win by pushing points out of view) and a nonincreasing
            // full-set error (so the recorded sequence is monotone)
            const auto [e_cur, e_new] =
                detail::paired_errors(res, res_new, frozen_w, params.huber_c);
            const bool accept = e_new <= e_cur && err_new.total <= err.total;
            const bool at_floor =
                std::abs(e_new - e_cur) <= params.f_tol * std::max(e_cur, 1e-300);
            diag.records.push_back({level, iter, lambda, accept ? err_new.total : err.total, accept});
            if (accept) {
                w2c = candidate;
                res = std::move(res_new);
                err = std::move(err_new);
                lambda = std::max(lambda * 0.1, 1e-12);
                consecutive_rejects = 0;
                if (delta.norm() < params.delta_tol || at_floor) break;
            } else {
                lambda = std::min(lambda * 10.0, 1e12);
                // a rejected micro-step or a flat error means the level sits
                // at its floor, which is convergence, not divergence
                if (delta.norm() < params.no_progress_tol || at_floor) break;
                if (++consecutive_rejects >= params.max_consecutive_rejects) {
                    // a level that already improved substantially has reached
                    // its noise floor; only a level making no headway diverges
                    if (err.total <= 0.5 * level_start_error) break;
                    diag.status = "diverged";
                    throw Diverged("align: error increased for 10 consecutive rejected steps");
                }
            }
        }
    }
    diag.converged = true;
    diag.status = "converged";
    return w2c.inverse();
}

// Coarse-to-fine supervision loss: mean over levels of the summed Huber
// reprojection distance between each level's pose estimate and the
// reference pose. Poses are world-to-camera.
inline double fba_loss(const std::vector<Pose>& level_poses_w2c, const Pose& gt_w2c,
                       const std::vector<Vec3>& points, const Camera& cam, double gamma = 1.0) {
    if (level_poses_w2c.empty()) throw Error("fba_loss: no level poses");
    double total = 0.0;
    int n_valid = 0;
    for (const Pose& est : level_poses_w2c) {
        for (const Vec3& p : points) {
            const Vec3 pe = est * p;
            const Vec3 pg = gt_w2c * p;
            if (pe.z() <= 1e-8 || pg.z() <= 1e-8) continue;
            const double e = (project(cam, pe) - project(cam, pg)).norm();
            total += e <= gamma ? 0.5 * e * e : gamma * (e - 0.5 * gamma);
            ++n_valid;
        }
    }
    if (n_valid == 0) throw NoValidPoints("fba_loss: no point visible under both poses");
    return total / double(level_poses_w2c.size());
}

}  // namespace fieldchain
