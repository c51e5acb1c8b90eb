#pragma once

// Components of the joint objective: photometric, normalized depth,
// forward/backward flow consistency, and the weighted total. Analytic
// gradients are provided for everything the optimizer touches (including
// the normalization shift/scale chain of the depth loss).

#include "fieldchain/geometry.hpp"

namespace fieldchain {

struct ShapeMismatch : Error {
    using Error::Error;
};
struct TooFewSamples : Error {
    using Error::Error;
};
struct NoValidPixels : Error {
    using Error::Error;
};
struct NonFiniteComponent : Error {
    using Error::Error;
};

struct LossWeights {
    double photometric = 0.25;
    double depth = 0.1;
    double fba = 1.0;
    double flow_forward = 1.0;
    double flow_backward = 1.0;
};

// Mean over rays of the squared color error (summed across channels).
inline double photometric_loss(const std::vector<Vec3>& rendered,
                               const std::vector<Vec3>& observed) {
    if (rendered.size() != observed.size())
        throw ShapeMismatch("photometric_loss: batch sizes differ");
    if (rendered.empty()) throw ShapeMismatch("photometric_loss: empty batch");
    double acc = 0.0;
    for (size_t i = 0; i < rendered.size(); ++i) acc += (rendered[i] - observed[i]).squaredNorm();
    return acc / double(rendered.size());
}

struct NormalizedDepth {
    std::vector<double> values;
    double shift = 0.0;
    double scale = 1.0;
};

// Shift by the mean, scale by the mean absolute deviation (floored at eps).
inline NormalizedDepth normalize_depth(const std::vector<double>& depth, double eps = 1e-6) {
    if (depth.size() < 2) throw TooFewSamples("normalize_depth: need at least 2 samples");
    NormalizedDepth out;
    const double n = double(depth.size());
    double t = 0.0;
    for (double d : depth) t += d;
    t /= n;
    double s = 0.0;
    for (double d : depth) s += std::abs(d - t);
    s /= n;
    s = std::max(s, eps);
    out.shift = t;
    out.scale = s;
    out.values.resize(depth.size());
    for (size_t i = 0; i < depth.size(); ++i) out.values[i] = (depth[i] - t) / s;
    return out;
}

// Mean absolute difference of the two depth vectors after normalizing each
// over the same valid-pixel set. When `grad_rendered` is non-null it
// receives the exact gradient with respect to the raw rendered depths
// (including the shift/scale chain); entries of invalid pixels are zero.
inline double depth_loss(const std::vector<double>& rendered, const std::vector<double>& prior,
                         const std::vector<uint8_t>& valid, double eps = 1e-6,
                         std::vector<double>* grad_rendered = nullptr) {
    if (rendered.size() != prior.size() || rendered.size() != valid.size())
        throw ShapeMismatch("depth_loss: size mismatch");
    std::vector<size_t> idx;
    for (size_t i = 0; i < valid.size(); ++i)
        if (valid[i]) idx.push_back(i);
    if (idx.size() < 2) throw NoValidPixels("depth_loss: fewer than 2 valid pixels");

    std::vector<double> x(idx.size()), p(idx.size());
    for (size_t k = 0; k < idx.size(); ++k) {
        x[k] = rendered[idx[k]];
        p[k] = prior[idx[k]];
    }
    const NormalizedDepth nx = normalize_depth(x, eps);
    const NormalizedDepth np = normalize_depth(p, eps);

    const double m = double(idx.size());
    double loss = 0.0;
    for (size_t k = 0; k < idx.size(); ++k) loss += std::abs(nx.values[k] - np.values[k]);
    loss /= m;

    if (grad_rendered) {
        grad_rendered->assign(rendered.size(), 0.0);
        const bool scale_active = nx.scale > eps;  // floor kills the scale chain
        double q_sum = 0.0, qx_sum = 0.0, u_mean = 0.0;
        std::vector<double> q(idx.size());
        for (size_t k = 0; k < idx.size(); ++k) {
            q[k] = (nx.values[k] > np.values[k] ? 1.0 : (nx.values[k] < np.values[k] ? -1.0 : 0.0)) / m;
            q_sum += q[k];
            qx_sum += q[k] * (x[k] - nx.shift);
            u_mean += (x[k] > nx.shift ? 1.0 : (x[k] < nx.shift ? -1.0 : 0.0));
        }
        u_mean /= m;
        for (size_t k = 0; k < idx.size(); ++k) {
            double g = (q[k] - q_sum / m) / nx.scale;
            if (scale_active) {
                const double u_k = x[k] > nx.shift ? 1.0 : (x[k] < nx.shift ? -1.0 : 0.0);
                const double ds_dxk = (u_k - u_mean) / m;
                g -= qx_sum * ds_dxk / (nx.scale * nx.scale);
            }
            (*grad_rendered)[idx[k]] = g;
        }
    }
    return loss;
}

// Displacement field of Eq-16 form: (u,v) minus the reprojection of the
// back-projected point under the relative pose (frame k camera -> frame k+1
// camera). Pixels whose warped point falls behind the camera are masked.
struct InducedFlow {
    std::vector<Vec2> flow;
    std::vector<uint8_t> valid;
};

inline InducedFlow induced_flow(const Pose& pose_rel, const std::vector<double>& depth,
                                const Camera& cam, const std::vector<Vec2>& pixels) {
    if (depth.size() != pixels.size()) throw ShapeMismatch("induced_flow: size mismatch");
    InducedFlow out;
    out.flow.assign(pixels.size(), Vec2::Zero());
    out.valid.assign(pixels.size(), 0);
    for (size_t i = 0; i < pixels.size(); ++i) {
        if (!(depth[i] > 0) || !std::isfinite(depth[i])) continue;
        const Vec3 p = pose_rel * backproject(cam, pixels[i], depth[i]);
        if (p.z() <= 1e-8) continue;
        out.flow[i] = pixels[i] - project(cam, p);
        out.valid[i] = 1;
    }
    return out;
}

// Mean L1 (|du| + |dv|) over pixels valid in both fields.
inline double flow_loss(const InducedFlow& induced, const std::vector<Vec2>& reference,
                        const std::vector<uint8_t>& reference_valid) {
    if (induced.flow.size() != reference.size() || reference.size() != reference_valid.size())
        throw ShapeMismatch("flow_loss: size mismatch");
    double acc = 0.0;
    int n = 0;
    for (size_t i = 0; i < reference.size(); ++i) {
        if (!induced.valid[i] || !reference_valid[i]) continue;
        const Vec2 d = induced.flow[i] - reference[i];
        acc += std::abs(d.x()) + std::abs(d.y());
        ++n;
    }
    if (n == 0) throw NoValidPixels("flow_loss: no jointly valid pixels");
    return acc / double(n);
}

// Flow loss together with its exact gradients: with respect to the left
// tangents of both camera-to-world poses and to the per-pixel depths.
// pose_rel = pose_b_c2w^-1 * pose_a_c2w maps frame-a camera points into
// frame b. Used by the joint optimizer.
struct FlowTermGrad {
    double loss = 0.0;
    int n_valid = 0;
    Tangent d_pose_a;  // frame whose pixels/depths are warped
    Tangent d_pose_b;  // frame warped into
    std::vector<double> d_depth;
};

inline FlowTermGrad flow_term_vjp(const Pose& pose_a_c2w, const Pose& pose_b_c2w,
                                  const std::vector<double>& depth, const Camera& cam,
                                  const std::vector<Vec2>& pixels,
                                  const std::vector<Vec2>& reference,
                                  const std::vector<uint8_t>& reference_valid) {
    if (depth.size() != pixels.size() || pixels.size() != reference.size() ||
        reference.size() != reference_valid.size())
        throw ShapeMismatch("flow_term_vjp: size mismatch");
    const Pose w2c_b = pose_b_c2w.inverse();

    FlowTermGrad out;
    out.d_depth.assign(depth.size(), 0.0);

    struct Entry {
        size_t i;
        Vec2 diff;
        Vec3 p_w, p_b, dp_dD_cam;
    };
    std::vector<Entry> entries;
    for (size_t i = 0; i < pixels.size(); ++i) {
        if (!(depth[i] > 0) || !std::isfinite(depth[i]) || !reference_valid[i]) continue;
        const Vec3 p_cam_a = backproject(cam, pixels[i], depth[i]);
        const Vec3 p_w = pose_a_c2w * p_cam_a;
        const Vec3 p_b = w2c_b * p_w;
        if (p_b.z() <= 1e-8) continue;
        const Vec2 flow = pixels[i] - project(cam, p_b);
        const Vec2 diff = flow - reference[i];
        out.loss += std::abs(diff.x()) + std::abs(diff.y());
        entries.push_back({i, diff, p_w, p_b, p_cam_a / depth[i]});
    }
    out.n_valid = int(entries.size());
    if (out.n_valid == 0) throw NoValidPixels("flow_term_vjp: no jointly valid pixels");
    out.loss /= out.n_valid;

    Vec6 ga = Vec6::Zero(), gb = Vec6::Zero();
    for (const Entry& e : entries) {
        // dL/dflow, L1 subgradient averaged over valid pixels
        const Vec2 d_flow(e.diff.x() > 0 ? 1.0 : (e.diff.x() < 0 ? -1.0 : 0.0),
                          e.diff.y() > 0 ? 1.0 : (e.diff.y() < 0 ? -1.0 : 0.0));
        const Vec2 d_flow_n = d_flow / double(out.n_valid);
        // flow = px - project(p_b)
        const Eigen::Matrix<double, 2, 3> d_flow_dpb = -projection_jacobian(cam, e.p_b);
        const Vec3 d_pb = d_flow_dpb.transpose() * d_flow_n;

        // left tangent of pose_a: delta p_b = R_w2c (omega x p_w + upsilon)
        Eigen::Matrix<double, 3, 6> j_a;
        j_a.leftCols<3>() = -w2c_b.rotation * skew(e.p_w);
        j_a.rightCols<3>() = w2c_b.rotation;
        ga += j_a.transpose() * d_pb;
        // left tangent of pose_b: exactly the negative chain
        gb -= j_a.transpose() * d_pb;
        // depth chain: p_b = w2c_b * pose_a * (D * dir_pix)
        const Vec3 dpb_dD = w2c_b.rotation * (pose_a_c2w.rotation * e.dp_dD_cam);
        out.d_depth[e.i] = d_pb.dot(dpb_dD);
    }
    out.d_pose_a = Tangent::from_vector(ga);
    out.d_pose_b = Tangent::from_vector(gb);
    return out;
}

struct LossComponents {
    double photometric = 0.0;
    double depth = 0.0;
    double fba = 0.0;
    double flow_forward = 0.0;
    double flow_backward = 0.0;
};

inline double total_loss(const LossComponents& c, const LossWeights& w) {
    for (double v : {c.photometric, c.depth, c.fba, c.flow_forward, c.flow_backward})
        if (!std::isfinite(v)) throw NonFiniteComponent("total_loss: non-finite component");
    return w.photometric * c.photometric + w.depth * c.depth + w.fba * c.fba +
           w.flow_forward * c.flow_forward + w.flow_backward * c.flow_backward;
}

}  // namespace fieldchain
