#pragma once

// Ray generation, depth-guided sampling, and differentiable volume
// rendering.
//
// Rendering uses the discrete transmittance model
//   w_i = T_i (1 - exp(-sigma_i delta_i)),  T_i = exp(-sum_{j<i} sigma_j delta_j)
// with color = sum w_i c_i, depth = sum w_i t_i, opacity = sum w_i.
// Rays with opacity < 1 composite over black.

#include "fieldchain/geometry.hpp"
#include "fieldchain/triplane.hpp"

namespace fieldchain {

struct EmptySampleSet : Error {
    using Error::Error;
};

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ();  // unit length
    double near = 0.0, far = 1.0;

    Vec3 at(double t) const { return origin + t * direction; }
};

enum class SampleSource : uint8_t { Stratified = 0, Surface = 1 };

struct SampleSet {
    std::vector<double> t;        // strictly ascending depths
    std::vector<double> delta;    // delta[i] = t[i+1]-t[i]; last = far - t.back()
    std::vector<uint8_t> source;  // SampleSource per sample

    size_t size() const { return t.size(); }

    // Sorts, enforces strict ordering, and fills deltas. Ties (from clamping)
    // are separated by a minimal nudge so every delta stays positive.
    void finalize(double near, double far) {
        (void)near;
        std::vector<size_t> order(t.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return t[a] < t[b]; });
        std::vector<double> ts(t.size());
        std::vector<uint8_t> src(t.size());
        for (size_t i = 0; i < order.size(); ++i) {
            ts[i] = t[order[i]];
            src[i] = source.empty() ? uint8_t(SampleSource::Stratified) : source[order[i]];
        }
        const double nudge = 1e-12 * std::max(far, 1.0);
        for (size_t i = 1; i < ts.size(); ++i)
            if (ts[i] <= ts[i - 1]) ts[i] = ts[i - 1] + nudge;
        t = std::move(ts);
        source = std::move(src);
        delta.resize(t.size());
        for (size_t i = 0; i + 1 < t.size(); ++i) delta[i] = t[i + 1] - t[i];
        if (!t.empty()) delta.back() = std::max(far - t.back(), nudge);
    }

    static SampleSet uniform(double near, double far, int n) {
        SampleSet s;
        s.t.resize(n);
        s.source.assign(n, uint8_t(SampleSource::Stratified));
        const double step = (far - near) / n;
        for (int i = 0; i < n; ++i) s.t[i] = near + i * step;
        s.finalize(near, far);
        return s;
    }
};

struct SamplerParams {
    int n_stratified = 64;
    int n_surface = 16;
    double sigma_frac = 0.02;  // Gaussian stddev as a fraction of (far - near)
};

// Two-population sampling: one uniform draw per equal bin over [near, far],
// plus Gaussian draws around the guide depth (depth prior if valid, else
// the previously rendered depth, else none).
inline SampleSet sample_ray(const Ray& ray, double depth_prior, double rendered_depth, Rng& rng,
                            const SamplerParams& params = {}) {
    SampleSet s;
    const double range = ray.far - ray.near;
    s.t.reserve(size_t(params.n_stratified + params.n_surface));
    const double bin = range / params.n_stratified;
    for (int i = 0; i < params.n_stratified; ++i) {
        s.t.push_back(ray.near + (i + rng.uniform()) * bin);
        s.source.push_back(uint8_t(SampleSource::Stratified));
    }
    const auto guide_ok = [&](double d) {
        return std::isfinite(d) && d > ray.near && d < ray.far;
    };
    double guide = 0.0;
    bool have_guide = false;
    if (guide_ok(depth_prior)) {
        guide = depth_prior;
        have_guide = true;
    } else if (guide_ok(rendered_depth)) {
        guide = rendered_depth;
        have_guide = true;
    }
    if (have_guide) {
        const double sd = params.sigma_frac * range;
        for (int i = 0; i < params.n_surface; ++i) {
            const double d = std::clamp(rng.normal(guide, sd), ray.near, ray.far - 1e-9 * range);
            s.t.push_back(d);
            s.source.push_back(uint8_t(SampleSource::Surface));
        }
    }
    s.finalize(ray.near, ray.far);
    return s;
}

// Rays through the given pixel centers; origin is the camera center, the
// direction is the back-projected pixel direction rotated into world frame.
inline std::vector<Ray> generate_rays(const Camera& cam, const Pose& cam_to_world,
                                      const std::vector<Vec2>& pixels, double near, double far) {
    std::vector<Ray> rays;
    rays.reserve(pixels.size());
    for (const Vec2& px : pixels) {
        Ray r;
        r.origin = cam_to_world.translation;
        const Vec3 d_cam = backproject(cam, px, 1.0).normalized();
        r.direction = cam_to_world.rotation * d_cam;
        r.near = near;
        r.far = far;
        rays.push_back(r);
    }
    return rays;
}

inline Ray generate_ray(const Camera& cam, const Pose& cam_to_world, const Vec2& px, double near,
                        double far) {
    Ray r;
    r.origin = cam_to_world.translation;
    r.direction = cam_to_world.rotation * backproject(cam, px, 1.0).normalized();
    r.near = near;
    r.far = far;
    return r;
}

struct RenderResult {
    Vec3 color = Vec3::Zero();
    double depth = 0.0;
    double opacity = 0.0;
    // per-sample cache reused by the backward pass
    std::vector<double> sigma;
    std::vector<double> alpha;  // 1 - exp(-sigma * delta)
    std::vector<double> trans;  // T_i before sample i
    std::vector<Vec3> sample_color;
};

// FieldT needs `FieldSample query(const Vec3& point, const Vec3& dir) const`;
// used with TriplaneField in production and with analytic test media.
template <class FieldT>
RenderResult render(const FieldT& field, const Ray& ray, const SampleSet& samples) {
    if (samples.t.empty()) throw EmptySampleSet("render: no samples");
    RenderResult out;
    const size_t n = samples.t.size();
    out.sigma.resize(n);
    out.alpha.resize(n);
    out.trans.resize(n);
    out.sample_color.resize(n);
    double log_trans = 0.0;  // log T_i, accumulated exactly as sum of -sigma*delta
    for (size_t i = 0; i < n; ++i) {
        const FieldSample fs = field.query(ray.at(samples.t[i]), ray.direction);
        const double od = fs.sigma * samples.delta[i];
        const double trans = std::exp(log_trans);
        const double alpha = -std::expm1(-od);
        const double w = trans * alpha;
        out.sigma[i] = fs.sigma;
        out.alpha[i] = alpha;
        out.trans[i] = trans;
        out.sample_color[i] = fs.color;
        out.color += w * fs.color;
        out.depth += w * samples.t[i];
        out.opacity += w;
        log_trans -= od;
    }
    return out;
}

struct RenderUpstream {
    Vec3 d_color = Vec3::Zero();
    double d_depth = 0.0;
    double d_opacity = 0.0;
};

// Backward pass of render(). Accumulates factor gradients into
// `factor_grads` (when non-null) and returns the gradient with respect to
// the left tangent of the camera-to-world pose that generated the ray
// (sample depths t_i held fixed). `cache` must come from render() on the
// same inputs.
template <class FieldT>
Tangent render_vjp(const FieldT& field, const Ray& ray, const SampleSet& samples,
                   const RenderResult& cache, const RenderUpstream& up,
                   std::vector<double>* factor_grads) {
    const size_t n = samples.t.size();
    if (n == 0) throw EmptySampleSet("render_vjp: no samples");

    // dL/dw_i and suffix sums for the transmittance chain
    std::vector<double> d_w(n);
    for (size_t i = 0; i < n; ++i) {
        d_w[i] = up.d_color.dot(cache.sample_color[i]) + up.d_depth * samples.t[i] + up.d_opacity;
    }
    // dL/dsigma_i = delta_i * (d_w[i] * T_i * exp(-od_i) - sum_{k>i} d_w[k] * w_k)
    std::vector<double> suffix(n + 1, 0.0);
    for (size_t i = n; i-- > 0;)
        suffix[i] = suffix[i + 1] + d_w[i] * cache.trans[i] * cache.alpha[i];

    Vec3 d_origin = Vec3::Zero();
    Vec3 d_dir = Vec3::Zero();
    for (size_t i = 0; i < n; ++i) {
        TriplaneField::QueryUpstream qup;
        qup.d_color = up.d_color * (cache.trans[i] * cache.alpha[i]);
        const double exp_od = 1.0 - cache.alpha[i];
        qup.d_sigma = samples.delta[i] * (d_w[i] * cache.trans[i] * exp_od - suffix[i + 1]);
        const auto qg = field.query_vjp(ray.at(samples.t[i]), ray.direction, qup, factor_grads);
        d_origin += qg.d_x_world;
        d_dir += qg.d_x_world * samples.t[i] + qg.d_dir;
    }

    // Left-tangent chain on the camera-to-world pose: for pose' = exp(xi) T,
    // d(origin)/d(omega) = -[origin]x, d(origin)/d(upsilon) = I,
    // d(direction)/d(omega) = -[direction]x; transposing gives +skew(.).
    Tangent g;
    g.upsilon = d_origin;
    g.omega = skew(ray.origin) * d_origin + skew(ray.direction) * d_dir;
    return g;
}

}  // namespace fieldchain
