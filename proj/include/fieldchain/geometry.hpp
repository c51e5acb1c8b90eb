#pragma once

// SE(3) group operations, pinhole camera model, and trajectory alignment.
//
// Conventions used throughout the library:
//   * Pose maps points from its local frame into its parent frame,
//     x_out = R x + t. A frame's pose is camera-to-world.
//   * Tangent is ordered [omega, upsilon]; pose updates are applied by
//     left multiplication, pose' = exp(delta) * pose.
//   * The camera looks down +z; a point is in front when z > 0.

#include "fieldchain/core.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cstdio>
#include <optional>

namespace fieldchain {

struct AngleNearPi : Error {
    using Error::Error;
};
struct BehindCamera : Error {
    using Error::Error;
};
struct NonPositiveDepth : Error {
    using Error::Error;
};
struct DegenerateTrajectory : Error {
    using Error::Error;
};

struct Tangent {
    Vec3 omega = Vec3::Zero();    // rotational part, radians
    Vec3 upsilon = Vec3::Zero();  // translational part, scene units

    Vec6 vector() const {
        Vec6 v;
        v << omega, upsilon;
        return v;
    }
    static Tangent from_vector(const Vec6& v) { return {v.head<3>(), v.tail<3>()}; }

    double norm() const { return vector().norm(); }
};

struct Pose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static Pose identity() { return {}; }

    Vec3 transform(const Vec3& p) const { return rotation * p + translation; }
    Vec3 operator*(const Vec3& p) const { return transform(p); }

    Pose operator*(const Pose& rhs) const {
        return {rotation * rhs.rotation, rotation * rhs.translation + translation};
    }

    Pose inverse() const {
        Mat3 rt = rotation.transpose();
        return {rt, -(rt * translation)};
    }

    // Orthonormality and det(+1) within 1e-10.
    bool is_valid(double tol = 1e-10) const {
        const Mat3 err = rotation.transpose() * rotation - Mat3::Identity();
        return err.cwiseAbs().maxCoeff() <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
    }
};

inline Mat3 skew(const Vec3& w) {
    Mat3 s;
    s << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
    return s;
}

inline Vec3 unskew(const Mat3& s) { return Vec3(s(2, 1), s(0, 2), s(1, 0)); }

// Closed-form SE(3) exponential. Below ||omega|| = 1e-6 the trigonometric
// coefficients switch to their second-order series to avoid 0/0.
inline Pose se3_exp(const Tangent& xi) {
    const double theta = xi.omega.norm();
    const double theta2 = theta * theta;
    double a, b, c;  // sin t/t, (1-cos t)/t^2, (t-sin t)/t^3
    if (theta < 1e-6) {
        a = 1.0 - theta2 / 6.0;
        b = 0.5 - theta2 / 24.0;
        c = 1.0 / 6.0 - theta2 / 120.0;
    } else {
        a = std::sin(theta) / theta;
        const double sh = std::sin(theta * 0.5);
        b = 2.0 * sh * sh / theta2;  // (1 - cos t)/t^2 without cancellation
        c = (1.0 - a) / theta2;
    }
    const Mat3 k = skew(xi.omega);
    const Mat3 k2 = k * k;
    Pose out;
    out.rotation = Mat3::Identity() + a * k + b * k2;
    const Mat3 v = Mat3::Identity() + b * k + c * k2;
    out.translation = v * xi.upsilon;
    return out;
}

// Inverse of se3_exp. Throws AngleNearPi when the rotation angle is within
// 1e-6 of pi, where the axis of the log is no longer well determined.
inline Tangent se3_log(const Pose& p) {
    const double cos_theta = std::clamp((p.rotation.trace() - 1.0) * 0.5, -1.0, 1.0);
    const double theta = std::acos(cos_theta);
    if (theta > M_PI - 1e-6) throw AngleNearPi("se3_log: rotation angle within 1e-6 of pi");

    const Vec3 vee = unskew(p.rotation - p.rotation.transpose()) * 0.5;  // = sin(theta) * axis
    const double theta2 = theta * theta;

    Tangent xi;
    double a;  // sin t / t
    if (theta < 1e-6) {
        a = 1.0 - theta2 / 6.0;
    } else {
        a = std::sin(theta) / theta;
    }
    xi.omega = vee / a;

    const Mat3 k = skew(xi.omega);
    double d;  // V^{-1} = I - k/2 + d k^2
    if (theta < 1e-6) {
        d = 1.0 / 12.0 + theta2 / 720.0;
    } else {
        const double half = theta * 0.5;
        d = (1.0 - half * std::cos(half) / std::sin(half)) / theta2;
    }
    const Mat3 v_inv = Mat3::Identity() - 0.5 * k + d * (k * k);
    xi.upsilon = v_inv * p.translation;
    return xi;
}

inline Pose apply_update(const Pose& p, const Tangent& delta) { return se3_exp(delta) * p; }

struct Camera {
    double fx = 0, fy = 0;
    double cx = 0, cy = 0;
    int width = 0, height = 0;

    bool is_valid() const {
        return fx > 0 && fy > 0 && cx > 0 && cx < width && cy > 0 && cy < height;
    }

    // Intrinsics of the l-th dyadic pyramid level (level 1 = full resolution).
    // Decimation keeps even rows/cols, so level coordinates are fine/2^(l-1).
    Camera at_level(int level) const {
        const double s = 1.0 / double(1 << (level - 1));
        return {fx * s, fy * s, cx * s, cy * s, width >> (level - 1), height >> (level - 1)};
    }
};

inline Vec2 project(const Camera& cam, const Vec3& p) {
    if (p.z() <= 1e-8) throw BehindCamera("project: point z <= 1e-8");
    return {cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy};
}

inline std::optional<Vec2> try_project(const Camera& cam, const Vec3& p) {
    if (p.z() <= 1e-8) return std::nullopt;
    return Vec2{cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy};
}

inline Vec3 backproject(const Camera& cam, const Vec2& pixel, double depth) {
    if (depth <= 0.0) throw NonPositiveDepth("backproject: depth <= 0");
    return {(pixel.x() - cam.cx) / cam.fx * depth, (pixel.y() - cam.cy) / cam.fy * depth, depth};
}

// 2x3 Jacobian of project() with respect to the camera-frame point.
inline Eigen::Matrix<double, 2, 3> projection_jacobian(const Camera& cam, const Vec3& p) {
    const double iz = 1.0 / p.z();
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx * iz, 0, -cam.fx * p.x() * iz * iz, 0, cam.fy * iz, -cam.fy * p.y() * iz * iz;
    return j;
}

// x -> scale * rotation * x + translation
struct Similarity {
    double scale = 1.0;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& x) const { return scale * (rotation * x) + translation; }
};

struct AlignmentResult {
    Similarity transform;
    std::vector<Pose> aligned;  // estimate with the similarity applied
    double rmse = 0.0;          // translational RMSE against the reference
};

// Least-squares similarity alignment (Umeyama) of the translation components
// of `est` onto `gt`. Rotations of the aligned poses are left-rotated by the
// fitted rotation so relative orientations are preserved.
inline AlignmentResult align_trajectories(const std::vector<Pose>& est,
                                          const std::vector<Pose>& gt) {
    if (est.size() != gt.size() || est.size() < 3)
        throw DegenerateTrajectory("align_trajectories: need equal lengths >= 3");
    const int n = int(est.size());

    Vec3 mu_x = Vec3::Zero(), mu_y = Vec3::Zero();
    for (int i = 0; i < n; ++i) {
        mu_x += est[i].translation;
        mu_y += gt[i].translation;
    }
    mu_x /= n;
    mu_y /= n;

    Mat3 sigma = Mat3::Zero();
    double var_x = 0.0, var_y = 0.0;
    for (int i = 0; i < n; ++i) {
        const Vec3 dx = est[i].translation - mu_x;
        const Vec3 dy = gt[i].translation - mu_y;
        sigma += dy * dx.transpose();
        var_x += dx.squaredNorm();
        var_y += dy.squaredNorm();
    }
    sigma /= n;
    var_x /= n;
    var_y /= n;

    if (var_x < 1e-16 || var_y < 1e-16)
        throw DegenerateTrajectory("align_trajectories: all positions identical");

    Eigen::JacobiSVD<Mat3> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 d = svd.singularValues();
    if (d(1) <= 1e-12 * std::max(d(0), 1e-300))
        throw DegenerateTrajectory("align_trajectories: positions collinear");

    Vec3 s_fix = Vec3::Ones();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) s_fix(2) = -1.0;

    Similarity t;
    t.rotation = svd.matrixU() * s_fix.asDiagonal() * svd.matrixV().transpose();
    t.scale = d.dot(s_fix) / var_x;
    t.translation = mu_y - t.scale * (t.rotation * mu_x);

    AlignmentResult out;
    out.transform = t;
    out.aligned.reserve(n);
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
        Pose a;
        a.rotation = t.rotation * est[i].rotation;
        a.translation = t.apply(est[i].translation);
        sq += (a.translation - gt[i].translation).squaredNorm();
        out.aligned.push_back(a);
    }
    out.rmse = std::sqrt(sq / n);
    return out;
}

inline double rotation_angle(const Mat3& r) {
    return std::acos(std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0));
}

// --- Trajectory file I/O ------------------------------------------------
//
// One line per frame: `timestamp tx ty tz qx qy qz qw`. Written with %.9e
// so repeated runs serialize bit-identically.

inline void save_trajectory_tum(const std::string& path, const std::vector<Pose>& poses,
                                const std::vector<double>* timestamps = nullptr) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write trajectory: " + path);
    char line[256];
    for (size_t i = 0; i < poses.size(); ++i) {
        const double ts = timestamps ? (*timestamps)[i] : double(i);
        Eigen::Quaterniond q(poses[i].rotation);
        q.normalize();
        if (q.w() < 0) q.coeffs() = -q.coeffs();
        const Vec3& t = poses[i].translation;
        std::snprintf(line, sizeof(line), "%.6f %.9e %.9e %.9e %.9e %.9e %.9e %.9e\n", ts, t.x(),
                      t.y(), t.z(), q.x(), q.y(), q.z(), q.w());
        out << line;
    }
}

inline std::vector<Pose> load_trajectory_tum(const std::string& path,
                                             std::vector<double>* timestamps = nullptr) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read trajectory: " + path);
    std::vector<Pose> poses;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        double ts, tx, ty, tz, qx, qy, qz, qw;
        if (!(ss >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) continue;
        Eigen::Quaterniond q(qw, qx, qy, qz);
        q.normalize();
        Pose p;
        p.rotation = q.toRotationMatrix();
        p.translation = Vec3(tx, ty, tz);
        poses.push_back(p);
        if (timestamps) timestamps->push_back(ts);
    }
    return poses;
}

}  // namespace fieldchain
