#include "fieldchain/fba.hpp"

#include "fieldchain/oracle.hpp"

#include <doctest.h>

using namespace fieldchain;

namespace {

Rng test_rng(uint64_t salt) { return Rng(mix_seed(0xFBA0, salt)); }

// Depth-varied corridor (back wall, floor, ceiling, foreground objects)
// viewed from two nearby poses; conditions all six pose directions.
struct AlignFixture {
    Camera cam{165, 165, 95.5, 71.5, 192, 144};
    SyntheticScene scene;
    Pose pose_a, pose_b;  // camera-to-world
    FeaturePyramid pyr_a, pyr_b;
    Correspondences corr;

    AlignFixture() {
        SceneSpec spec;
        spec.camera = cam;
        spec.primitives.push_back(
            Primitive::box(Vec3(-5, -3.5, 3.4), Vec3(6, 3.5, 4.4), Vec3(0.95, 0.9, 0.85)));
        spec.primitives.push_back(
            Primitive::box(Vec3(-5, -1.45, 0.4), Vec3(6, -1.15, 4.0), Vec3(0.75, 0.85, 0.9)));
        spec.primitives.push_back(
            Primitive::box(Vec3(-5, 1.15, 0.4), Vec3(6, 1.45, 4.0), Vec3(0.85, 0.8, 0.7)));
        spec.primitives.push_back(
            Primitive::box(Vec3(-1.6, -0.9, 2.4), Vec3(-0.6, 0.2, 3.0), Vec3(0.9, 0.55, 0.4)));
        spec.primitives.push_back(
            Primitive::box(Vec3(0.5, -0.3, 2.0), Vec3(1.3, 0.7, 2.6), Vec3(0.5, 0.9, 0.5)));
        spec.primitives.push_back(
            Primitive::box(Vec3(-0.35, -1.0, 1.6), Vec3(0.25, -0.35, 2.1), Vec3(0.55, 0.6, 0.95)));
        spec.primitives.push_back(
            Primitive::sphere(Vec3(1.1, -0.75, 1.8), 0.35, Vec3(0.95, 0.8, 0.45)));
        spec.texture.checker_period = 0.8;
        spec.texture.checker_amp = 0.45;
        spec.texture.checker_softness = 0.5;
        spec.texture.noise_amp = 0.28;
        spec.texture.noise_period = 2.2;
        spec.trajectory.frames = 2;
        spec.trajectory.kind = TrajectoryScript::Kind::Line;
        spec.trajectory.start = Vec3::Zero();
        spec.trajectory.end = Vec3(0.08, 0.01, 0.04);
        spec.trajectory.look_fixed_forward = true;
        scene = make_scene(spec, 7);
        pose_a = scene.trajectory[0];
        // add a small rotation to frame b
        Tangent rot;
        rot.omega = Vec3(0.004, -0.009, 0.003);
        pose_b = se3_exp(rot) * scene.trajectory[1];
        scene.trajectory[1] = pose_b;

        pyr_a = build_pyramid(scene.render_frame(0), 5);
        pyr_b = build_pyramid(scene.render_frame(1), 5);
        corr = make_correspondences(cam, pose_a, scene.depth_frame(0), 8);
    }
};

const AlignFixture& fixture() {
    static AlignFixture f;
    return f;
}

}  // namespace

TEST_CASE("build_pyramid: constant image has flat features and low confidence") {
    ImageRGB flat(64, 64);
    for (double& v : flat.data) v = 0.5;
    const FeaturePyramid pyr = build_pyramid(flat, 3);
    REQUIRE(pyr.level_count() == 3);
    CHECK(pyr.level(1).width == 64);
    CHECK(pyr.level(2).width == 32);
    CHECK(pyr.level(3).width == 16);
    for (int l = 1; l <= 3; ++l) {
        const PyramidLevel& lvl = pyr.level(l);
        for (double v : lvl.channels[1].data) CHECK(v == doctest::Approx(0.0));
        for (double v : lvl.channels[2].data) CHECK(v == doctest::Approx(0.0));
        // logistic(10 * (0 - 0.05)) ~ 0.378, the low plateau
        for (double v : lvl.confidence.data) CHECK(v == doctest::Approx(0.3775).epsilon(1e-3));
    }
}

TEST_CASE("build_pyramid: vertical step edge peaks the x-gradient and confidence") {
    ImageRGB step(16, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 16; ++x) step.set_pixel(x, y, Vec3::Ones() * (x >= 8 ? 1.0 : 0.0));
    PyramidParams params;
    const FeaturePyramid pyr = build_pyramid(step, 1, params);
    const PyramidLevel& lvl = pyr.level(1);
    // hand evaluation: the binomial blur spreads the step to
    // [... 0, 1/16, 5/16, 11/16, 15/16, 1 ...], so central differences put
    // slope (11/16 - 1/16)/2 = 0.3125 on the two columns flanking the edge
    const double peak = params.gradient_gain * 0.3125;
    CHECK(lvl.channels[1].at(7, 4) == doctest::Approx(peak));
    CHECK(lvl.channels[1].at(8, 4) == doctest::Approx(peak));
    CHECK(lvl.channels[1].at(3, 4) == doctest::Approx(0.0));
    CHECK(lvl.channels[2].at(7, 4) == doctest::Approx(0.0));
    // confidence from the raw gradient magnitude: logistic(10*(0.3125-0.05))
    CHECK(lvl.confidence.at(7, 4) == doctest::Approx(0.9325).epsilon(1e-3));
    CHECK(lvl.confidence.at(3, 4) < 0.4);
}

TEST_CASE("build_pyramid rejects images that would underflow 8 px") {
    ImageRGB small(16, 16);
    CHECK_THROWS_AS(build_pyramid(small, 3), ImageTooSmall);
    CHECK_NOTHROW(build_pyramid(small, 2));
}

TEST_CASE("feature_residual is zero for identical frames at identity pose") {
    const auto& f = fixture();
    const FeatureResiduals res =
        feature_residual(f.pyr_a, f.pyr_a, f.corr, f.pose_a.inverse(), f.cam, 1);
    REQUIRE(res.n_valid > 50);
    for (size_t i = 0; i < res.residuals.size(); ++i)
        if (res.valid[i]) CHECK(res.residuals[i].norm() < 1e-10);
}

TEST_CASE("feature_residual on a linear ramp equals slope times shift") {
    // both frames view the same x-ramp image; a pure x-translation of the
    // camera shifts projections by fx*t/Z pixels. The blur preserves linear
    // ramps away from the border, so the gray-channel residual is
    // gray_gain * slope * shift and the gradient channels cancel exactly.
    const double slope = 0.004;
    ImageRGB ramp(128, 96);
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 128; ++x) ramp.set_pixel(x, y, Vec3::Ones() * (slope * x));
    PyramidParams params;
    const FeaturePyramid pyr = build_pyramid(ramp, 1, params);
    Camera cam{100, 100, 63.5, 47.5, 128, 96};

    Correspondences corr;
    const double depth = 2.0;
    for (int x = 30; x <= 90; x += 10)
        for (int y = 30; y <= 70; y += 10) {
            corr.points.push_back(backproject(cam, Vec2(x, y), depth));
            corr.pixels_a.push_back(Vec2(x, y));
        }
    Pose w2c_b = Pose::identity();
    w2c_b.translation = Vec3(0.05, 0, 0);  // shift = fx * 0.05 / 2 = 2.5 px
    const FeatureResiduals res = feature_residual(pyr, pyr, corr, w2c_b, cam, 1);
    const double shift = 100 * 0.05 / depth;
    for (size_t i = 0; i < res.residuals.size(); ++i) {
        if (!res.valid[i]) continue;
        CHECK(res.residuals[i][0] ==
              doctest::Approx(params.gray_gain * slope * shift).epsilon(1e-6));
        CHECK(std::abs(res.residuals[i][1]) < 1e-9);  // gradient channels constant
        CHECK(std::abs(res.residuals[i][2]) < 1e-9);
    }
}

TEST_CASE("feature_residual masks points behind the camera") {
    const auto& f = fixture();
    Correspondences corr;
    corr.points.push_back(Vec3(0, 0, -5.0));  // behind
    corr.points.push_back(Vec3(0, 0, 3.5));   // on the wall
    corr.pixels_a.push_back(Vec2(60, 40));
    corr.pixels_a.push_back(Vec2(63.5, 47.5));
    const FeatureResiduals res =
        feature_residual(f.pyr_a, f.pyr_b, corr, Pose::identity(), f.cam, 1);
    CHECK(res.valid[0] == 0);
    CHECK(res.valid[1] == 1);
    CHECK(res.n_valid == 1);
}

TEST_CASE("robust_total_error follows the Huber cost") {
    FeatureResiduals res;
    res.residuals = {Vec3::Zero(), Vec3::Zero()};
    res.weights = {1.0, 1.0};
    res.valid = {1, 1};
    CHECK(robust_total_error(res, 1.0).total == doctest::Approx(0.0));

    // single residual with squared norm 1, threshold 2: quadratic branch
    res.residuals = {Vec3(1, 0, 0)};
    res.weights = {1.0};
    res.valid = {1};
    const RobustError e = robust_total_error(res, 2.0);
    CHECK(e.total == doctest::Approx(1.0));
    CHECK(e.rho_prime[0] == doctest::Approx(1.0));

    // an outlier contributes linearly, not quadratically
    FeatureResiduals mix;
    mix.residuals = {Vec3(0.5, 0, 0), Vec3(50, 0, 0)};
    mix.weights = {1.0, 1.0};
    mix.valid = {1, 1};
    const double robust = robust_total_error(mix, 1.0).total;
    const double quadratic = 0.25 + 2500.0;
    CHECK(robust < quadratic);
    CHECK(robust == doctest::Approx(0.25 + 2.0 * std::sqrt(2500.0) - 1.0));
}

TEST_CASE("lm_step solves the damped normal equations") {
    // block-diagonal toy problem: J = 2 I6, W = I, r = 4 * ones
    std::vector<Vec3> residuals = {Vec3(4, 4, 4), Vec3(4, 4, 4)};
    std::vector<Eigen::Matrix<double, 3, 6>> jacobians(2);
    jacobians[0].setZero();
    jacobians[0].leftCols<3>() = 2.0 * Mat3::Identity();
    jacobians[1].setZero();
    jacobians[1].rightCols<3>() = 2.0 * Mat3::Identity();
    std::vector<double> weights = {1.0, 1.0};

    const Tangent d0 = lm_step(residuals, jacobians, weights, 0.0);
    for (int i = 0; i < 6; ++i) CHECK(d0.vector()[i] == doctest::Approx(-2.0));

    // zero residual: zero step
    std::vector<Vec3> zeros = {Vec3::Zero(), Vec3::Zero()};
    CHECK(lm_step(zeros, jacobians, weights, 1e-3).norm() == doctest::Approx(0.0));

    // damping monotonically shrinks the step toward zero
    double prev = d0.norm();
    for (double lambda : {1.0, 1e2, 1e4, 1e6}) {
        const double cur = lm_step(residuals, jacobians, weights, lambda).norm();
        CHECK(cur < prev);
        prev = cur;
    }
    CHECK(prev < 1e-5);

    // rank-deficient system is rejected
    std::vector<Eigen::Matrix<double, 3, 6>> degenerate(2);
    degenerate[0].setZero();
    degenerate[1].setZero();
    CHECK_THROWS_AS(lm_step(residuals, degenerate, weights, 1e-3), SingularSystem);
    std::vector<Vec3> one_row = {Vec3(1, 1, 1)};
    std::vector<Eigen::Matrix<double, 3, 6>> one_jac(1);
    one_jac[0].setOnes();
    std::vector<double> one_w = {1.0};
    CHECK_THROWS_AS(lm_step(one_row, one_jac, one_w, 1e-3), SingularSystem);
}

TEST_CASE("residual jacobians match matched-step finite differences") {
    const auto& f = fixture();
    const int level = 4;  // heavily blurred, smooth
    const Camera lvl_cam = f.cam.at_level(level);
    const Pose w2c = f.pose_b.inverse();
    const FeatureResiduals res = feature_residual(f.pyr_a, f.pyr_b, f.corr, w2c, f.cam, level);

    // feature lookups are C1 (Catmull-Rom), so fine taps approximate the
    // true interpolant derivative; the finite difference uses a matched
    // sub-pixel step
    int checked = 0;
    for (size_t i = 0; i < res.residuals.size(); ++i) {
        if (!res.valid[i]) continue;
        if (res.proj_b[i].x() < 3 || res.proj_b[i].x() > lvl_cam.width - 4 ||
            res.proj_b[i].y() < 3 || res.proj_b[i].y() > lvl_cam.height - 4)
            continue;
        const auto jac = detail::residual_jacobian(f.pyr_b.level(level), lvl_cam, res.p_cam_b[i],
                                                   res.proj_b[i], 0.01);
        for (int axis = 0; axis < 6; ++axis) {
            Eigen::Matrix<double, 3, 6> j_pose;
            j_pose.leftCols<3>() = -skew(res.p_cam_b[i]);
            j_pose.rightCols<3>() = Mat3::Identity();
            const Vec2 px_vel = projection_jacobian(lvl_cam, res.p_cam_b[i]) * j_pose.col(axis);
            const double speed = px_vel.norm();
            if (speed < 1.0) continue;
            const double h = 0.01 / speed;  // probe width matched to the taps
            Vec6 dv = Vec6::Zero();
            dv[axis] = h;
            const Pose wp = se3_exp(Tangent::from_vector(dv)) * w2c;
            const Pose wm = se3_exp(Tangent::from_vector(-dv)) * w2c;
            const FeatureResiduals rp = feature_residual(f.pyr_a, f.pyr_b, f.corr, wp, f.cam, level);
            const FeatureResiduals rm = feature_residual(f.pyr_a, f.pyr_b, f.corr, wm, f.cam, level);
            if (!rp.valid[i] || !rm.valid[i]) continue;
            const Vec3 fd = (rp.residuals[i] - rm.residuals[i]) / (2 * h);
            const double scale = std::max(fd.norm(), jac.col(axis).norm());
            if (scale < 1e-6) continue;
            CHECK((jac.col(axis) - fd).norm() <= 1e-3 * std::max(scale, 1e-2));
            ++checked;
        }
    }
    CHECK(checked > 30);
}

TEST_CASE("align returns the ground truth unchanged when initialized there") {
    const auto& f = fixture();
    AlignDiagnostics diag;
    const Pose refined = align(f.pyr_a, f.pyr_b, f.corr, f.pose_b, f.cam, {}, &diag);
    // the feature error floor allows sub-0.1-degree drift, nothing more
    CHECK(rotation_angle(refined.rotation.transpose() * f.pose_b.rotation) < 1.7e-3);
    CHECK((refined.translation - f.pose_b.translation).norm() < 3e-3);
    CHECK(diag.converged);
    CHECK(diag.to_text().find("level=") != std::string::npos);
}

TEST_CASE("align recovers a perturbed pose on the textured scene") {
    const auto& f = fixture();
    auto rng = test_rng(11);
    const double scene_scale = 3.0;  // wall distance
    int converged = 0;
    const int trials = 10;
    for (int trial = 0; trial < trials; ++trial) {
        Tangent noise;
        noise.omega = rng.unit_vector() * (5.0 * M_PI / 180.0) * rng.uniform();
        noise.upsilon = rng.unit_vector() * 0.05 * scene_scale * rng.uniform();
        const Pose init = se3_exp(noise) * f.pose_b;
        try {
            const Pose refined = align(f.pyr_a, f.pyr_b, f.corr, init, f.cam);
            const double rot_err =
                rotation_angle(refined.rotation.transpose() * f.pose_b.rotation) * 180.0 / M_PI;
            const double trans_err = (refined.translation - f.pose_b.translation).norm();
            if (rot_err < 0.1 && trans_err < 0.001 * scene_scale) ++converged;
        } catch (const Error&) {
        }
    }
    CHECK(converged >= 9);
}

TEST_CASE("accepted LM steps never increase the robust error") {
    const auto& f = fixture();
    auto rng = test_rng(12);
    Tangent noise;
    noise.omega = rng.unit_vector() * 0.05;
    noise.upsilon = rng.unit_vector() * 0.08;
    AlignDiagnostics diag;
    align(f.pyr_a, f.pyr_b, f.corr, se3_exp(noise) * f.pose_b, f.cam, {}, &diag);
    double last_per_level[4] = {-1, -1, -1, -1};
    for (const AlignRecord& r : diag.records) {
        if (!r.accepted) continue;
        if (last_per_level[r.level] >= 0) CHECK(r.error <= last_per_level[r.level] + 1e-12);
        last_per_level[r.level] = r.error;
    }
}

TEST_CASE("textureless images never produce a silent wrong pose") {
    ImageRGB flat(64, 64);
    for (double& v : flat.data) v = 0.5;
    const FeaturePyramid pyr = build_pyramid(flat, 2);
    Camera cam{60, 60, 31.5, 31.5, 64, 64};
    Correspondences corr;
    for (int x = 8; x < 60; x += 8)
        for (int y = 8; y < 60; y += 8) {
            corr.points.push_back(backproject(cam, Vec2(x, y), 2.0));
            corr.pixels_a.push_back(Vec2(x, y));
        }
    bool threw = false;
    try {
        align(pyr, pyr, corr, Pose::identity(), cam);
    } catch (const SingularSystem&) {
        threw = true;
    } catch (const Diverged&) {
        threw = true;
    }
    CHECK(threw);
}

TEST_CASE("align is equivariant under a global rigid change of world frame") {
    const auto& f = fixture();
    auto rng = test_rng(13);
    Tangent noise;
    noise.omega = rng.unit_vector() * 0.03;
    noise.upsilon = rng.unit_vector() * 0.05;
    const Pose init = se3_exp(noise) * f.pose_b;

    AlignDiagnostics diag1, diag2;
    const Pose out1 = align(f.pyr_a, f.pyr_b, f.corr, init, f.cam, {}, &diag1);

    Tangent gt;
    gt.omega = Vec3(0.4, -0.2, 0.7);
    gt.upsilon = Vec3(3, -1, 2);
    const Pose g = se3_exp(gt);
    Correspondences corr_g;
    for (const Vec3& p : f.corr.points) corr_g.points.push_back(g * p);
    corr_g.pixels_a = f.corr.pixels_a;
    const Pose out2 = align(f.pyr_a, f.pyr_b, corr_g, g * init, f.cam, {}, &diag2);

    REQUIRE(diag1.records.size() == diag2.records.size());
    for (size_t i = 0; i < diag1.records.size(); ++i)
        CHECK(diag1.records[i].error ==
              doctest::Approx(diag2.records[i].error).epsilon(1e-8));
    const Pose expected = g * out1;
    CHECK(rotation_angle(out2.rotation.transpose() * expected.rotation) < 1e-6);
    CHECK((out2.translation - expected.translation).norm() < 1e-6);
}

TEST_CASE("fba_loss is zero at ground truth and follows the Huber form") {
    Camera cam{100, 100, 50, 50, 100, 100};
    std::vector<Vec3> points = {Vec3(0.3, -0.2, 2.0), Vec3(-0.5, 0.4, 3.0), Vec3(0.1, 0.1, 2.5)};
    Pose gt = Pose::identity();
    CHECK(fba_loss({gt, gt, gt}, gt, points, cam) == doctest::Approx(0.0));

    // single level, single point, exactly 1 px offset, gamma = 1 -> 0.5
    std::vector<Vec3> one_point = {Vec3(0, 0, 2.0)};
    Pose off = Pose::identity();
    off.translation = Vec3(0.02, 0, 0);  // projects 100*0.02/2 = 1 px away
    CHECK(fba_loss({off}, gt, one_point, cam) == doctest::Approx(0.5).epsilon(1e-9));

    CHECK_THROWS_AS(fba_loss({gt}, gt, {Vec3(0, 0, -1.0)}, cam), NoValidPoints);
}

TEST_CASE("fba_loss decreases along the geodesic toward ground truth") {
    Camera cam{100, 100, 50, 50, 100, 100};
    auto rng = test_rng(14);
    for (int config = 0; config < 5; ++config) {
        std::vector<Vec3> points;
        for (int i = 0; i < 12; ++i)
            points.push_back(Vec3(rng.uniform(-0.8, 0.8), rng.uniform(-0.6, 0.6),
                                  rng.uniform(1.5, 4.0)));
        const Pose gt = Pose::identity();
        Tangent off;
        off.omega = rng.unit_vector() * 0.05;
        off.upsilon = rng.unit_vector() * 0.1;
        const Pose start = se3_exp(off) * gt;
        const Tangent path = se3_log(gt * start.inverse());
        double prev = std::numeric_limits<double>::infinity();
        for (int step = 0; step <= 10; ++step) {
            const double s = step / 10.0;
            Tangent scaled;
            scaled.omega = s * path.omega;
            scaled.upsilon = s * path.upsilon;
            const Pose pose = se3_exp(scaled) * start;
            const double loss = fba_loss({pose}, gt, points, cam);
            CHECK(loss <= prev + 1e-9);
            prev = loss;
        }
        CHECK(prev < 1e-12);
    }
}
