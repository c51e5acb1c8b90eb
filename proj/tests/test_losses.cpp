#include "fieldchain/losses.hpp"

#include <doctest.h>

#include <numeric>

using namespace fieldchain;

namespace {

Rng test_rng(uint64_t salt) { return Rng(mix_seed(0x1055, salt)); }

}  // namespace

TEST_CASE("photometric_loss basics") {
    std::vector<Vec3> a = {Vec3(0.1, 0.2, 0.3), Vec3(0.5, 0.5, 0.5), Vec3(0.9, 0.1, 0.4)};
    CHECK(photometric_loss(a, a) == doctest::Approx(0.0));

    std::vector<Vec3> b = a;
    for (Vec3& v : b) v += Vec3(0.1, 0.1, 0.1);
    CHECK(photometric_loss(b, a) == doctest::Approx(0.03).epsilon(1e-12));

    // invariant under a permutation applied to both inputs
    std::vector<Vec3> ap = {a[2], a[0], a[1]}, bp = {b[2], b[0], b[1]};
    CHECK(photometric_loss(bp, ap) == doctest::Approx(photometric_loss(b, a)));

    std::vector<Vec3> short_batch = {a[0]};
    CHECK_THROWS_AS(photometric_loss(a, short_batch), ShapeMismatch);
}

TEST_CASE("normalize_depth matches the hand example and floors the scale") {
    const NormalizedDepth n = normalize_depth({1, 2, 3, 4});
    CHECK(n.shift == doctest::Approx(2.5));
    CHECK(n.scale == doctest::Approx(1.0));
    const double expect[4] = {-1.5, -0.5, 0.5, 1.5};
    for (int i = 0; i < 4; ++i) CHECK(n.values[size_t(i)] == doctest::Approx(expect[i]));

    // mean 0, mean absolute deviation 1 over the samples
    double mean = 0, mad = 0;
    for (double v : n.values) mean += v;
    for (double v : n.values) mad += std::abs(v - 0.0);
    CHECK(mean / 4 == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(mad / 4 == doctest::Approx(1.0).epsilon(1e-6));

    const NormalizedDepth flat = normalize_depth({3, 3, 3, 3}, 1e-6);
    CHECK(flat.scale == doctest::Approx(1e-6));
    for (double v : flat.values) CHECK(v == doctest::Approx(0.0));

    CHECK_THROWS_AS(normalize_depth({1.0}), TooFewSamples);
}

TEST_CASE("normalize_depth is invariant under positive affine rescaling") {
    auto rng = test_rng(1);
    // the spec's a=3, b=7 case plus random draws
    std::vector<double> d = {0.5, 2.0, 1.1, 4.2, 3.3, 0.9};
    const NormalizedDepth base = normalize_depth(d);
    std::vector<double> scaled(d.size());
    for (size_t i = 0; i < d.size(); ++i) scaled[i] = 3.0 * d[i] + 7.0;
    const NormalizedDepth aff = normalize_depth(scaled);
    for (size_t i = 0; i < d.size(); ++i)
        CHECK(aff.values[i] == doctest::Approx(base.values[i]).epsilon(1e-8));

    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(8);
        for (double& v : x) v = rng.uniform(0.2, 9.0);
        const double a = rng.uniform(0.1, 5.0), b = rng.uniform(-4.0, 4.0);
        std::vector<double> y(8);
        for (size_t i = 0; i < 8; ++i) y[i] = a * x[i] + b;
        const NormalizedDepth nx = normalize_depth(x), ny = normalize_depth(y);
        for (size_t i = 0; i < 8; ++i)
            CHECK(std::abs(nx.values[i] - ny.values[i]) < 1e-8);
    }
}

TEST_CASE("depth_loss removes the affine gauge and is L1 in outliers") {
    std::vector<double> rendered = {1.0, 2.0, 3.0, 4.0, 2.5};
    std::vector<uint8_t> valid(5, 1);
    CHECK(depth_loss(rendered, rendered, valid) == doctest::Approx(0.0));

    std::vector<double> affine(5);
    for (size_t i = 0; i < 5; ++i) affine[i] = 2.3 * rendered[i] + 0.7;
    CHECK(depth_loss(rendered, affine, valid) == doctest::Approx(0.0).epsilon(1e-8));

    // hand sum on a 4-pixel vector with one outlier: normalized values are
    // computed explicitly and the loss is their mean absolute difference
    std::vector<double> r4 = {1, 2, 3, 4};
    std::vector<double> p4 = {1, 2, 3, 14};
    std::vector<uint8_t> v4(4, 1);
    const NormalizedDepth nr = normalize_depth(r4), np = normalize_depth(p4);
    double hand = 0;
    for (int i = 0; i < 4; ++i) hand += std::abs(nr.values[size_t(i)] - np.values[size_t(i)]);
    hand /= 4;
    CHECK(depth_loss(r4, p4, v4) == doctest::Approx(hand).epsilon(1e-12));

    std::vector<uint8_t> none(5, 0);
    CHECK_THROWS_AS(depth_loss(rendered, affine, none), NoValidPixels);
}

TEST_CASE("depth_loss gradient matches finite differences through the normalization") {
    auto rng = test_rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 12;
        std::vector<double> rendered(n), prior(n);
        std::vector<uint8_t> valid(n, 1);
        for (int i = 0; i < n; ++i) {
            rendered[size_t(i)] = rng.uniform(0.5, 6.0);
            prior[size_t(i)] = rng.uniform(0.5, 6.0);
            if (i % 5 == 4) valid[size_t(i)] = 0;
        }
        std::vector<double> grad;
        depth_loss(rendered, prior, valid, 1e-6, &grad);

        // L1 kinks: skip entries whose normalized difference or deviation
        // sign could flip within the finite-difference step
        std::vector<double> rv, pv;
        for (int i = 0; i < n; ++i)
            if (valid[size_t(i)]) {
                rv.push_back(rendered[size_t(i)]);
                pv.push_back(prior[size_t(i)]);
            }
        const NormalizedDepth nr = normalize_depth(rv), np = normalize_depth(pv);

        const double h = 1e-6;
        size_t vi = 0;
        for (int k = 0; k < n; ++k) {
            if (!valid[size_t(k)]) {
                CHECK(grad[size_t(k)] == 0.0);
                continue;
            }
            const double margin = std::abs(nr.values[vi] - np.values[vi]);
            const double dev_margin = std::abs(rv[vi] - nr.shift);
            ++vi;
            if (margin < 1e-3 || dev_margin < 1e-3) continue;
            std::vector<double> rp = rendered, rm = rendered;
            rp[size_t(k)] += h;
            rm[size_t(k)] -= h;
            const double fd = (depth_loss(rp, prior, valid) - depth_loss(rm, prior, valid)) / (2 * h);
            // the finite difference itself is only accurate to ~1e-9 here
            CHECK(std::abs(grad[size_t(k)] - fd) <=
                  1e-5 * std::max(std::abs(fd), std::abs(grad[size_t(k)])) + 1e-8);
        }
    }
}

TEST_CASE("induced_flow evaluates the warp displacement") {
    Camera cam{100, 100, 50, 50, 100, 100};
    std::vector<Vec2> pixels = {Vec2(50, 50), Vec2(30, 50), Vec2(70, 50), Vec2(50, 30),
                                Vec2(50, 70)};
    std::vector<double> depth(pixels.size(), 2.0);

    SUBCASE("identity relative pose gives zero flow") {
        const InducedFlow f = induced_flow(Pose::identity(), depth, cam, pixels);
        for (size_t i = 0; i < pixels.size(); ++i) {
            CHECK(f.valid[i] == 1);
            CHECK(f.flow[i].norm() < 1e-12);
        }
    }

    SUBCASE("pure x-translation: flow_x = -fx * tx / d") {
        Pose rel = Pose::identity();
        rel.translation = Vec3(0.1, 0, 0);
        const InducedFlow f = induced_flow(rel, depth, cam, pixels);
        for (size_t i = 0; i < pixels.size(); ++i) {
            CHECK(f.flow[i].x() == doctest::Approx(-100 * 0.1 / 2.0).epsilon(1e-12));
            CHECK(f.flow[i].y() == doctest::Approx(0.0));
        }
    }

    SUBCASE("pure z-rotation rotates pixels about the principal point") {
        const double theta = 0.5 * M_PI / 180.0;
        Tangent t;
        t.omega = Vec3(0, 0, theta);
        const Pose rel = se3_exp(t);
        const InducedFlow f = induced_flow(rel, depth, cam, pixels);
        for (size_t i = 1; i < pixels.size(); ++i) {  // skip the center pixel
            const Vec2 radial = pixels[i] - Vec2(50, 50);
            // hand evaluation: with fx = fy the warped pixel offset is the
            // rotated offset, so flow = (I - R2(theta)) (p - c)
            Eigen::Matrix2d rot2;
            rot2 << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
            const Vec2 expected = radial - rot2 * radial;
            CHECK((f.flow[i] - expected).norm() < 1e-9);
            // tangential to first order
            const double cosang = std::abs(f.flow[i].dot(radial)) /
                                  (f.flow[i].norm() * radial.norm());
            CHECK(cosang < 0.01);
        }
    }

    SUBCASE("points warped behind the camera are masked") {
        Pose rel = Pose::identity();
        rel.translation = Vec3(0, 0, -5.0);  // pulls points to negative z
        const InducedFlow f = induced_flow(rel, depth, cam, pixels);
        for (size_t i = 0; i < pixels.size(); ++i) CHECK(f.valid[i] == 0);
    }
}

TEST_CASE("flow_loss is a masked mean L1") {
    Camera cam{100, 100, 50, 50, 100, 100};
    std::vector<Vec2> pixels = {Vec2(20, 20), Vec2(40, 60), Vec2(80, 30)};
    std::vector<double> depth(3, 2.0);
    const InducedFlow f = induced_flow(Pose::identity(), depth, cam, pixels);

    std::vector<Vec2> reference(3, Vec2::Zero());
    std::vector<uint8_t> valid(3, 1);
    CHECK(flow_loss(f, reference, valid) == doctest::Approx(0.0));

    // uniform 1-pixel x offset
    for (Vec2& r : reference) r = Vec2(1.0, 0.0);
    CHECK(flow_loss(f, reference, valid) == doctest::Approx(1.0));

    valid = {0, 0, 0};
    CHECK_THROWS_AS(flow_loss(f, reference, valid), NoValidPixels);
}

TEST_CASE("flow_term_vjp gradients match finite differences") {
    auto rng = test_rng(3);
    Camera cam{100, 100, 50, 50, 100, 100};
    const int n = 10;
    std::vector<Vec2> pixels(n);
    std::vector<double> depth(n);
    std::vector<Vec2> reference(n);
    std::vector<uint8_t> valid(n, 1);
    for (int i = 0; i < n; ++i) {
        pixels[size_t(i)] = Vec2(rng.uniform(15, 85), rng.uniform(15, 85));
        depth[size_t(i)] = rng.uniform(1.5, 4.0);
        reference[size_t(i)] = Vec2(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
    }
    Tangent ta, tb;
    ta.omega = 0.05 * rng.unit_vector();
    ta.upsilon = 0.2 * rng.unit_vector();
    tb.omega = 0.05 * rng.unit_vector();
    tb.upsilon = 0.2 * rng.unit_vector();
    const Pose pose_a = se3_exp(ta), pose_b = se3_exp(tb);

    const FlowTermGrad g = flow_term_vjp(pose_a, pose_b, depth, cam, pixels, reference, valid);
    const auto loss_at = [&](const Pose& pa, const Pose& pb, const std::vector<double>& d) {
        const Pose rel = pb.inverse() * pa;
        const InducedFlow f = induced_flow(rel, d, cam, pixels);
        return flow_loss(f, reference, valid);
    };
    CHECK(g.loss == doctest::Approx(loss_at(pose_a, pose_b, depth)).epsilon(1e-12));

    const double h = 1e-7;
    for (int axis = 0; axis < 6; ++axis) {
        Vec6 dv = Vec6::Zero();
        dv[axis] = h;
        const Tangent dp = Tangent::from_vector(dv), dm = Tangent::from_vector(-dv);
        double fd = (loss_at(se3_exp(dp) * pose_a, pose_b, depth) -
                     loss_at(se3_exp(dm) * pose_a, pose_b, depth)) /
                    (2 * h);
        CHECK(g.d_pose_a.vector()[axis] ==
              doctest::Approx(fd).epsilon(1e-4).scale(std::max(std::abs(fd), 1e-4)));
        fd = (loss_at(pose_a, se3_exp(dp) * pose_b, depth) -
              loss_at(pose_a, se3_exp(dm) * pose_b, depth)) /
             (2 * h);
        CHECK(g.d_pose_b.vector()[axis] ==
              doctest::Approx(fd).epsilon(1e-4).scale(std::max(std::abs(fd), 1e-4)));
    }
    for (int k = 0; k < n; ++k) {
        std::vector<double> dp = depth, dm = depth;
        dp[size_t(k)] += h * 10;
        dm[size_t(k)] -= h * 10;
        const double fd = (loss_at(pose_a, pose_b, dp) - loss_at(pose_a, pose_b, dm)) / (20 * h);
        CHECK(g.d_depth[size_t(k)] ==
              doctest::Approx(fd).epsilon(1e-4).scale(std::max(std::abs(fd), 1e-4)));
    }
}

TEST_CASE("total_loss is the weighted sum with finite components") {
    LossWeights w;  // paper defaults: 0.25, 0.1, 1.0, 1.0, 1.0
    LossComponents zero;
    CHECK(total_loss(zero, w) == doctest::Approx(0.0));

    LossComponents ones{1, 1, 1, 1, 1};
    CHECK(total_loss(ones, w) == doctest::Approx(3.35).epsilon(1e-12));

    LossComponents bad = ones;
    bad.depth = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(total_loss(bad, w), NonFiniteComponent);

    // linearity: the gradient of the total with respect to a parameter is the
    // weighted sum of the component gradients
    const auto components_of = [](double p) {
        LossComponents c;
        c.photometric = p * p;
        c.depth = std::sin(p);
        c.fba = 0.5 * p;
        c.flow_forward = std::exp(0.3 * p);
        c.flow_backward = p * p * p;
        return c;
    };
    const double p0 = 0.7, h = 1e-6;
    const double fd_total =
        (total_loss(components_of(p0 + h), w) - total_loss(components_of(p0 - h), w)) / (2 * h);
    const double expected = w.photometric * 2 * p0 + w.depth * std::cos(p0) + w.fba * 0.5 +
                            w.flow_forward * 0.3 * std::exp(0.3 * p0) +
                            w.flow_backward * 3 * p0 * p0;
    CHECK(fd_total == doctest::Approx(expected).epsilon(1e-6));
}
