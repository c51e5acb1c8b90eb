#pragma once

// Progressive frame registration with dynamically allocated local radiance
// fields.
//
// The registry keeps an ordered chain of tri-plane fields; only the last
// one is optimizable. When the estimated camera translation leaves the
// active field's bound, the window is refined, the field is upsampled and
// frozen (checksum recorded), and a new field is allocated centered at the
// crossing pose. Optimization windows of consecutive fields overlap by a
// fixed number of frames; poses that leave the window are fixed for the
// rest of the run.

#include "fieldchain/fba.hpp"
#include "fieldchain/image.hpp"
#include "fieldchain/losses.hpp"
#include "fieldchain/renderer.hpp"

#include <functional>

namespace fieldchain {

struct EmptySequence : Error {
    using Error::Error;
};
struct EmptyRegistry : Error {
    using Error::Error;
};
struct DatasetError : Error {
    using Error::Error;
};

// One RGB frame with optional supervision signals. `depth_prior` and the
// flow references may be empty; flows are Eq-16-style displacements defined
// at this frame's pixels (forward: to the next frame, backward: to the
// previous one).
struct FrameData {
    ImageRGB image;
    ImageGray depth_prior;  // 0 where invalid / absent
    ImageFlow flow_forward;
    ImageFlow flow_backward;
    bool is_test = false;  // held out from radiance supervision
};

struct FrameSource {
    Camera camera;
    int frame_count = 0;
    std::function<const FrameData&(int)> frame;  // must stay valid for the run
    std::vector<Pose> gt_trajectory;             // optional, for metrics only
};

struct RunConfig {
    int rank = 6;
    int feature_dim = 12;
    int coarse_res = 32;
    int fine_res = 128;
    double half_extent = 2.0;
    double bound_radius_local = 1.0;  // in units of half_extent
    double near = 0.05;
    double far = 10.0;
    SamplerParams sampler;
    int rays_per_batch = 1024;
    int init_iters = 100;
    int register_iters = 40;
    int register_pose_delay = 10;  // factor-only iterations before poses move
    int refine_iters_per_frame = 60;
    int window_overlap = 5;
    LossWeights weights;
    double lr_rot = 5e-3;
    double lr_trans = 5e-4;
    double lr_factors = 2e-2;
    double factor_lr_decay = 0.1;     // total decay over one field lifetime
    double factor_lr_horizon = 4000;  // iterations treated as one lifetime
    double density_init = -2.5;
    AlignParams align;
    int pyramid_levels = 3;
    int corr_stride = 8;
    uint64_t seed = 1;
    int n_chunks = 4;
    int test_every = 0;  // every k-th frame held out; 0 disables
    bool use_fba = true;
    bool use_depth_guided_sampling = true;
    std::vector<Pose> pose_override;  // when set, poses are fixed to these

    double bound_radius_world() const { return bound_radius_local * half_extent; }

    static RunConfig from_config(const Config& c) {
        RunConfig r;
        r.rank = c.get_int("rank", r.rank);
        r.feature_dim = c.get_int("feature_dim", r.feature_dim);
        r.coarse_res = c.get_int("coarse_res", r.coarse_res);
        r.fine_res = c.get_int("fine_res", r.fine_res);
        r.half_extent = c.get_double("half_extent", r.half_extent);
        r.bound_radius_local = c.get_double("bound_radius", r.bound_radius_local);
        r.near = c.get_double("near", r.near);
        r.far = c.get_double("far", r.far);
        r.sampler.n_stratified = c.get_int("n_stratified", r.sampler.n_stratified);
        r.sampler.n_surface = c.get_int("n_surface", r.sampler.n_surface);
        r.sampler.sigma_frac = c.get_double("sample_sigma_frac", r.sampler.sigma_frac);
        r.rays_per_batch = c.get_int("rays_per_batch", r.rays_per_batch);
        r.init_iters = c.get_int("init_iters", r.init_iters);
        r.register_iters = c.get_int("register_iters", r.register_iters);
        r.register_pose_delay = c.get_int("register_pose_delay", r.register_pose_delay);
        r.refine_iters_per_frame = c.get_int("refine_iters_per_frame", r.refine_iters_per_frame);
        r.window_overlap = c.get_int("window_overlap", r.window_overlap);
        r.weights.photometric = c.get_double("lambda1", r.weights.photometric);
        r.weights.depth = c.get_double("lambda2", r.weights.depth);
        r.weights.fba = c.get_double("lambda3", r.weights.fba);
        r.weights.flow_forward = c.get_double("lambda4", r.weights.flow_forward);
        r.weights.flow_backward = c.get_double("lambda5", r.weights.flow_backward);
        r.lr_rot = c.get_double("lr_rot", r.lr_rot);
        r.lr_trans = c.get_double("lr_trans", r.lr_trans);
        r.lr_factors = c.get_double("lr_factors", r.lr_factors);
        r.factor_lr_decay = c.get_double("factor_lr_decay", r.factor_lr_decay);
        r.factor_lr_horizon = c.get_double("factor_lr_horizon", r.factor_lr_horizon);
        r.density_init = c.get_double("density_init", r.density_init);
        r.align.huber_c = c.get_double("huber_c", r.align.huber_c);
        r.align.lambda_init = c.get_double("lm_lambda_init", r.align.lambda_init);
        r.pyramid_levels = c.get_int("pyramid_levels", r.pyramid_levels);
        r.corr_stride = c.get_int("corr_stride", r.corr_stride);
        r.seed = c.get_u64("seed", r.seed);
        r.n_chunks = c.get_int("n_chunks", r.n_chunks);
        r.test_every = c.get_int("test_every", r.test_every);
        r.use_fba = c.get_bool("use_fba", r.use_fba);
        r.use_depth_guided_sampling =
            c.get_bool("depth_guided_sampling", r.use_depth_guided_sampling);
        return r;
    }
};

struct LocalFieldEntry {
    TriplaneField field;
    bool frozen = false;
    int window_begin = 0;  // inclusive frame indices covered by this field
    int window_end = 0;
    uint64_t freeze_checksum = 0;

    const Vec3& center() const { return field.center(); }
};

struct RegistryEvent {
    enum class Type { Allocate, Freeze, WindowAdvance };
    Type type;
    int frame = 0;        // frame index at which the event fired
    int field_index = 0;
    Vec3 center = Vec3::Zero();   // Allocate: new field center
    int window_begin = 0;         // WindowAdvance: new start of the window

    std::string to_text() const {
        char buf[160];
        const char* name = type == Type::Allocate  ? "allocate"
                         : type == Type::Freeze    ? "freeze"
                                                   : "window_advance";
        std::snprintf(buf, sizeof(buf), "%s frame=%d field=%d center=(%.6f,%.6f,%.6f) p=%d", name,
                      frame, field_index, center.x(), center.y(), center.z(), window_begin);
        return buf;
    }
};

class FieldRegistry {
  public:
    std::vector<LocalFieldEntry> entries;

    bool empty() const { return entries.empty(); }
    LocalFieldEntry& active() { return entries.back(); }
    const LocalFieldEntry& active() const { return entries.back(); }

    // Nearest field center to the ray origin; ties resolved to the latest
    // field.
    int select(const Vec3& origin) const {
        if (entries.empty()) throw EmptyRegistry("registry: no fields");
        int best = 0;
        double best_d = (entries[0].center() - origin).squaredNorm();
        for (int i = 1; i < int(entries.size()); ++i) {
            const double d = (entries[i].center() - origin).squaredNorm();
            if (d <= best_d) {  // <= prefers the latest on ties
                best = i;
                best_d = d;
            }
        }
        return best;
    }

    RenderResult render_global(const Ray& ray, const SampleSet& samples) const {
        return render(entries[size_t(select(ray.origin))].field, ray, samples);
    }
};

// Elementwise Adam with bias correction.
struct AdamState {
    std::vector<double> m, v;
    int64_t t = 0;

    void reset(size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        t = 0;
    }

    // params -= lr_of(i) * step(grad)
    template <class LrFn>
    void step(std::vector<double>& params, const std::vector<double>& grad, LrFn&& lr_of) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        ++t;
        const double c1 = 1.0 - std::pow(b1, double(t));
        const double c2 = 1.0 - std::pow(b2, double(t));
        for (size_t i = 0; i < params.size(); ++i) {
            const double g = grad[i];
            m[i] = b1 * m[i] + (1 - b1) * g;
            v[i] = b2 * v[i] + (1 - b2) * g * g;
            params[i] -= lr_of(i) * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

struct PoseAdam {
    Vec6 m = Vec6::Zero(), v = Vec6::Zero();
    int64_t t = 0;

    // Returns the left-tangent update for a gradient-descent step.
    Tangent step(const Tangent& grad, double lr_rot, double lr_trans) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        ++t;
        const Vec6 g = grad.vector();
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(b1, double(t));
        const double c2 = 1.0 - std::pow(b2, double(t));
        Vec6 upd;
        for (int i = 0; i < 6; ++i) {
            const double lr = i < 3 ? lr_rot : lr_trans;
            upd[i] = -lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
        return Tangent::from_vector(upd);
    }
};

struct OptimState {
    std::vector<Pose> poses;  // camera-to-world per registered frame
    std::vector<PoseAdam> pose_adam;
    AdamState factor_adam;
    int window_begin = 0;
    int frames_registered = 0;
    std::vector<ImageGray> rendered_depth_cache;  // per frame, 0 = not yet rendered
    uint64_t iteration = 0;                        // global optimizer step counter
    uint64_t field_birth_iteration = 0;
    std::vector<RegistryEvent> events;
    size_t peak_optimizable_params = 0;
    std::vector<std::string> diagnostics;
    bool poses_locked = false;  // factor-only warmup phases
};

namespace detail {

struct RayWork {
    Vec2 pixel;
    int px_index = 0;
    Ray ray;
    SampleSet samples;
    RenderResult result;
    int field_index = 0;
};

// One joint optimization step on frame `f`: renders a seeded ray batch,
// evaluates the weighted losses, backpropagates into the active field's
// factors and the optimizable window poses, and refreshes the rendered
// depth cache. Factor updates are skipped for held-out frames.
inline void optimize_on_frame(int f, FieldRegistry& registry, OptimState& state,
                              const FrameSource& src, const RunConfig& cfg) {
    const FrameData& fd = src.frame(f);
    const Camera& cam = src.camera;
    const int active_index = int(registry.entries.size()) - 1;
    TriplaneField& active = registry.active().field;
    const bool poses_fixed = !cfg.pose_override.empty() || state.poses_locked;

    // seeded pixel batch
    Rng batch_rng(mix_seed(cfg.seed, 0xBA7C4, uint64_t(f), state.iteration));
    const int n_rays = cfg.rays_per_batch;
    std::vector<RayWork> work(static_cast<size_t>(n_rays));
    for (int i = 0; i < n_rays; ++i) {
        const int x = int(batch_rng.uniform() * cam.width);
        const int y = int(batch_rng.uniform() * cam.height);
        work[i].pixel = Vec2(std::min(x, cam.width - 1), std::min(y, cam.height - 1));
        work[i].px_index = std::min(y, cam.height - 1) * cam.width + std::min(x, cam.width - 1);
    }

    const Pose pose_f = state.poses[size_t(f)];
    ImageGray& depth_cache = state.rendered_depth_cache[size_t(f)];

    // ---- phase A: forward rendering (parallel, deterministic chunks) ----
    parallel_chunks(n_rays, cfg.n_chunks, [&](int, int begin, int end) {
        for (int i = begin; i < end; ++i) {
            RayWork& w = work[size_t(i)];
            w.ray = generate_ray(cam, pose_f, w.pixel, cfg.near, cfg.far);
            const int px = int(w.pixel.x()), py = int(w.pixel.y());
            const double prior =
                (cfg.use_depth_guided_sampling && fd.depth_prior.width > 0)
                    ? fd.depth_prior.at(px, py)
                    : 0.0;
            const double cached = depth_cache.width > 0 ? depth_cache.at(px, py) : 0.0;
            Rng ray_rng(mix_seed(cfg.seed, uint64_t(f), uint64_t(w.px_index), state.iteration));
            w.samples = sample_ray(w.ray, prior, cached, ray_rng, cfg.sampler);
            w.field_index = registry.select(w.ray.origin);
            w.result = render(registry.entries[size_t(w.field_index)].field, w.ray, w.samples);
        }
    });

    // ---- phase B: batch losses and per-ray upstream gradients (serial) ----
    std::vector<Vec3> rendered_rgb(static_cast<size_t>(n_rays)), observed_rgb(static_cast<size_t>(n_rays));
    std::vector<double> rendered_depth(static_cast<size_t>(n_rays));
    std::vector<double> prior_depth(size_t(n_rays), 0.0);
    std::vector<uint8_t> prior_valid(size_t(n_rays), 0);
    std::vector<Vec2> pixels(static_cast<size_t>(n_rays));
    for (int i = 0; i < n_rays; ++i) {
        const RayWork& w = work[size_t(i)];
        rendered_rgb[size_t(i)] = w.result.color;
        observed_rgb[size_t(i)] = fd.image.pixel(int(w.pixel.x()), int(w.pixel.y()));
        rendered_depth[size_t(i)] = w.result.depth;
        pixels[size_t(i)] = w.pixel;
        if (fd.depth_prior.width > 0) {
            const double d = fd.depth_prior.at(int(w.pixel.x()), int(w.pixel.y()));
            if (d > 0 && std::isfinite(d)) {
                prior_depth[size_t(i)] = d;
                prior_valid[size_t(i)] = 1;
            }
        }
    }

    std::vector<Vec3> d_color(size_t(n_rays), Vec3::Zero());
    std::vector<double> d_depth(size_t(n_rays), 0.0);
    for (int i = 0; i < n_rays; ++i)
        d_color[size_t(i)] =
            cfg.weights.photometric * 2.0 * (rendered_rgb[size_t(i)] - observed_rgb[size_t(i)]) /
            double(n_rays);

    int n_prior_valid = 0;
    for (uint8_t v : prior_valid) n_prior_valid += v;
    if (cfg.weights.depth > 0 && n_prior_valid >= 2) {
        std::vector<double> g;
        depth_loss(rendered_depth, prior_depth, prior_valid, 1e-6, &g);
        for (int i = 0; i < n_rays; ++i) d_depth[size_t(i)] += cfg.weights.depth * g[size_t(i)];
    }

    Tangent pose_grad_f, pose_grad_prev, pose_grad_next;
    bool touched_prev = false, touched_next = false;
    const auto add_flow_term = [&](int neighbor, const ImageFlow& ref_flow, double weight,
                                   Tangent* d_neighbor, bool* touched) {
        if (weight <= 0 || neighbor < 0 || neighbor >= state.frames_registered) return;
        if (ref_flow.width == 0) return;
        std::vector<Vec2> reference(size_t(n_rays), Vec2::Zero());
        std::vector<uint8_t> ref_valid(size_t(n_rays), 0);
        for (int i = 0; i < n_rays; ++i) {
            const int px = int(pixels[size_t(i)].x()), py = int(pixels[size_t(i)].y());
            if (!ref_flow.valid(px, py)) continue;
            reference[size_t(i)] = Vec2(ref_flow.at(px, py)[0], ref_flow.at(px, py)[1]);
            ref_valid[size_t(i)] = 1;
        }
        try {
            const FlowTermGrad fg =
                flow_term_vjp(state.poses[size_t(f)], state.poses[size_t(neighbor)],
                              rendered_depth, cam, pixels, reference, ref_valid);
            pose_grad_f.omega += weight * fg.d_pose_a.omega;
            pose_grad_f.upsilon += weight * fg.d_pose_a.upsilon;
            d_neighbor->omega += weight * fg.d_pose_b.omega;
            d_neighbor->upsilon += weight * fg.d_pose_b.upsilon;
            *touched = true;
            for (int i = 0; i < n_rays; ++i) d_depth[size_t(i)] += weight * fg.d_depth[size_t(i)];
        } catch (const NoValidPixels&) {
        }
    };
    add_flow_term(f + 1, fd.flow_forward, cfg.weights.flow_forward, &pose_grad_next,
                  &touched_next);
    add_flow_term(f - 1, fd.flow_backward, cfg.weights.flow_backward, &pose_grad_prev,
                  &touched_prev);

    // ---- phase C: backward (parallel, per-chunk buffers reduced in order) --
    const bool update_factors = !fd.is_test;
    const int n_chunks = std::max(1, std::min(cfg.n_chunks, n_rays));
    std::vector<std::vector<double>> chunk_factor_grads(static_cast<size_t>(n_chunks));
    std::vector<Vec6> chunk_pose_grads(size_t(n_chunks), Vec6::Zero());
    parallel_chunks(n_rays, n_chunks, [&](int chunk, int begin, int end) {
        auto& fg = chunk_factor_grads[size_t(chunk)];
        if (update_factors) fg.assign(active.params().size(), 0.0);
        Vec6 pg = Vec6::Zero();
        for (int i = begin; i < end; ++i) {
            const RayWork& w = work[size_t(i)];
            RenderUpstream up;
            up.d_color = d_color[size_t(i)];
            up.d_depth = d_depth[size_t(i)];
            const bool to_active = w.field_index == active_index;
            const TriplaneField& fld = registry.entries[size_t(w.field_index)].field;
            std::vector<double>* grads = (update_factors && to_active) ? &fg : nullptr;
            const Tangent t = render_vjp(fld, w.ray, w.samples, w.result, up, grads);
            pg += t.vector();
        }
        chunk_pose_grads[size_t(chunk)] = pg;
    });

    for (const Vec6& pg : chunk_pose_grads) {
        pose_grad_f.omega += pg.head<3>();
        pose_grad_f.upsilon += pg.tail<3>();
    }

    // ---- parameter updates -------------------------------------------------
    if (update_factors && !chunk_factor_grads.empty() && !chunk_factor_grads[0].empty()) {
        std::vector<double>& total = chunk_factor_grads[0];
        for (int c = 1; c < n_chunks; ++c) {
            const auto& g = chunk_factor_grads[size_t(c)];
            for (size_t k = 0; k < total.size(); ++k) total[k] += g[k];
        }
        const double age = double(state.iteration - state.field_birth_iteration);
        const double lr = cfg.lr_factors *
                          std::pow(cfg.factor_lr_decay,
                                   std::min(age / cfg.factor_lr_horizon, 1.0));
        state.factor_adam.step(active.params(), total, [lr](size_t) { return lr; });
    }

    if (!poses_fixed) {
        const auto pose_optimizable = [&](int idx) {
            return idx > 0 && idx >= state.window_begin && idx < state.frames_registered;
        };
        if (pose_optimizable(f)) {
            const Tangent upd = state.pose_adam[size_t(f)].step(pose_grad_f, cfg.lr_rot, cfg.lr_trans);
            state.poses[size_t(f)] = se3_exp(upd) * state.poses[size_t(f)];
        }
        if (touched_next && pose_optimizable(f + 1)) {
            const Tangent upd =
                state.pose_adam[size_t(f + 1)].step(pose_grad_next, cfg.lr_rot, cfg.lr_trans);
            state.poses[size_t(f + 1)] = se3_exp(upd) * state.poses[size_t(f + 1)];
        }
        if (touched_prev && pose_optimizable(f - 1)) {
            const Tangent upd =
                state.pose_adam[size_t(f - 1)].step(pose_grad_prev, cfg.lr_rot, cfg.lr_trans);
            state.poses[size_t(f - 1)] = se3_exp(upd) * state.poses[size_t(f - 1)];
        }
    }

    // refresh the per-pixel rendered depth cache used as a sampling guide
    if (depth_cache.width == 0) depth_cache = ImageGray(cam.width, cam.height, 0.0);
    for (int i = 0; i < n_rays; ++i) {
        const RayWork& w = work[size_t(i)];
        if (w.result.opacity > 0.5)
            depth_cache.at(int(w.pixel.x()), int(w.pixel.y())) = w.result.depth;
    }

    // memory accounting: parameters currently optimizable
    const int window_len = state.frames_registered - state.window_begin;
    const size_t live = active.params().size() + 6 * size_t(std::max(window_len, 0));
    state.peak_optimizable_params = std::max(state.peak_optimizable_params, live);

    ++state.iteration;
}

}  // namespace detail

// Registry construction: one unfrozen field centered at the origin, first
// pose pinned to identity, then the configured number of optimization
// iterations on the first frame.
inline void initialize_first_field(FieldRegistry& registry, OptimState& state,
                                   const FrameSource& src, const RunConfig& cfg) {
    if (src.frame_count < 1) throw EmptySequence("initialize_first_field: no frames");
    registry.entries.clear();
    LocalFieldEntry entry;
    entry.field = TriplaneField(cfg.rank, cfg.coarse_res, cfg.feature_dim, Vec3::Zero(),
                                cfg.half_extent);
    Rng init_rng(mix_seed(cfg.seed, 0xF1E1D));
    init_field_factors(entry.field, init_rng, cfg.density_init);
    entry.window_begin = 0;
    entry.window_end = 0;
    registry.entries.push_back(std::move(entry));

    state = OptimState{};
    state.poses.assign(size_t(src.frame_count), Pose::identity());
    if (!cfg.pose_override.empty()) {
        if (int(cfg.pose_override.size()) != src.frame_count)
            throw DatasetError("pose override length mismatch");
        state.poses = cfg.pose_override;
    }
    state.pose_adam.assign(size_t(src.frame_count), PoseAdam{});
    state.rendered_depth_cache.assign(size_t(src.frame_count), ImageGray{});
    state.frames_registered = 1;
    state.window_begin = 0;
    state.factor_adam.reset(registry.active().field.params().size());
    state.events.push_back(
        {RegistryEvent::Type::Allocate, 0, 0, registry.active().center(), 0});

    for (int it = 0; it < cfg.init_iters; ++it)
        detail::optimize_on_frame(0, registry, state, src, cfg);
}

// Refinement pass over the active window followed by a single upsample to
// the fine resolution. Runs right before the active field freezes.
inline void refine_before_freeze(FieldRegistry& registry, OptimState& state,
                                 const FrameSource& src, const RunConfig& cfg) {
    const int window_len = state.frames_registered - state.window_begin;
    const int total = window_len * cfg.refine_iters_per_frame;
    for (int it = 0; it < total; ++it) {
        const int f = state.window_begin + it % std::max(window_len, 1);
        detail::optimize_on_frame(f, registry, state, src, cfg);
    }
    if (cfg.fine_res > registry.active().field.resolution()) {
        registry.active().field = registry.active().field.upsampled(cfg.fine_res);
        state.factor_adam.reset(registry.active().field.params().size());
    }
}

// Bound test Alg-1 style: while the translation stays strictly inside the
// bound the field keeps growing; at distance >= bound the window is
// refined, the field frozen, and a new field allocated at the crossing
// pose. The new window keeps exactly `window_overlap` shared frames.
inline void check_bound_and_allocate(FieldRegistry& registry, OptimState& state,
                                     const FrameSource& src, const RunConfig& cfg) {
    const int q = state.frames_registered - 1;
    const Vec3 t_q = state.poses[size_t(q)].translation;
    LocalFieldEntry& active = registry.active();
    if ((t_q - active.center()).norm() < cfg.bound_radius_world()) {
        active.window_end = q;
        return;
    }

    refine_before_freeze(registry, state, src, cfg);

    const int field_index = int(registry.entries.size()) - 1;
    registry.active().window_end = q;
    registry.active().frozen = true;
    registry.active().freeze_checksum = registry.active().field.checksum();
    state.events.push_back({RegistryEvent::Type::Freeze, q, field_index,
                            registry.active().center(), state.window_begin});

    LocalFieldEntry next;
    next.field = TriplaneField(cfg.rank, cfg.coarse_res, cfg.feature_dim, t_q, cfg.half_extent);
    Rng init_rng(mix_seed(cfg.seed, 0xF1E1D, uint64_t(registry.entries.size())));
    init_field_factors(next.field, init_rng, cfg.density_init);
    const int new_begin = std::max(q - cfg.window_overlap + 1, state.window_begin);
    next.window_begin = new_begin;
    next.window_end = q;
    registry.entries.push_back(std::move(next));
    state.factor_adam.reset(registry.active().field.params().size());
    state.field_birth_iteration = state.iteration;
    state.events.push_back({RegistryEvent::Type::Allocate, q, field_index + 1,
                            registry.active().center(), new_begin});

    state.window_begin = new_begin;
    state.events.push_back({RegistryEvent::Type::WindowAdvance, q, field_index + 1,
                            registry.active().center(), new_begin});
}

// Appends the next frame: pose initialized from the previous frame, refined
// by feature-metric alignment against it, then jointly refined with the
// window. Alignment failures are demoted to diagnostics; registration never
// aborts the run.
inline void register_frame(FieldRegistry& registry, OptimState& state, const FrameSource& src,
                           const RunConfig& cfg) {
    const int f = state.frames_registered;
    if (f >= src.frame_count) throw DatasetError("register_frame: no frame left to register");
    const int prev = f - 1;

    if (!cfg.pose_override.empty()) {
        state.poses[size_t(f)] = cfg.pose_override[size_t(f)];
    } else {
        state.poses[size_t(f)] = state.poses[size_t(prev)];

        if (cfg.use_fba) {
            const FrameData& fd_prev = src.frame(prev);
            const ImageGray* depth_src = nullptr;
            if (fd_prev.depth_prior.width > 0) depth_src = &fd_prev.depth_prior;
            else if (state.rendered_depth_cache[size_t(prev)].width > 0)
                depth_src = &state.rendered_depth_cache[size_t(prev)];
            if (depth_src) {
                try {
                    const FeaturePyramid pyr_a = build_pyramid(fd_prev.image, cfg.pyramid_levels);
                    const FeaturePyramid pyr_b =
                        build_pyramid(src.frame(f).image, cfg.pyramid_levels);
                    const Correspondences corr = make_correspondences(
                        src.camera, state.poses[size_t(prev)], *depth_src, cfg.corr_stride);
                    AlignDiagnostics diag;
                    state.poses[size_t(f)] = align(pyr_a, pyr_b, corr, state.poses[size_t(f)],
                                                   src.camera, cfg.align, &diag);
                } catch (const Error& e) {
                    state.diagnostics.push_back("align frame " + std::to_string(f) + ": " +
                                                e.what());
                }
            } else {
                state.diagnostics.push_back("align frame " + std::to_string(f) +
                                            ": no depth source, pose kept from previous frame");
            }
        }
    }

    state.frames_registered = f + 1;
    registry.active().window_end = f;

    for (int it = 0; it < cfg.register_iters; ++it) {
        const int window_len = state.frames_registered - state.window_begin;
        // bias iterations toward the newest frame, round-robin over the rest;
        // the field absorbs the new view before poses are allowed to move
        state.poses_locked = it < cfg.register_pose_delay;
        const int target = (it % 2 == 0) ? f : state.window_begin + (it / 2) % window_len;
        detail::optimize_on_frame(target, registry, state, src, cfg);
    }
    state.poses_locked = false;
}

struct RunResult {
    FieldRegistry registry;
    OptimState state;
    std::vector<Pose> trajectory;
};

// Full progressive reconstruction: initialize on the first frame, register
// every remaining frame, allocate fields whenever the camera leaves the
// active bound, and freeze the final field at the end of the sequence.
inline RunResult run_reconstruction(const FrameSource& src, const RunConfig& cfg) {
    if (src.frame_count < 1) throw DatasetError("run: empty dataset");
    RunResult out;
    initialize_first_field(out.registry, out.state, src, cfg);
    check_bound_and_allocate(out.registry, out.state, src, cfg);
    while (out.state.frames_registered < src.frame_count) {
        register_frame(out.registry, out.state, src, cfg);
        check_bound_and_allocate(out.registry, out.state, src, cfg);
    }
    // final field: refine and freeze so checkpoints are complete
    if (!out.registry.active().frozen) {
        refine_before_freeze(out.registry, out.state, src, cfg);
        LocalFieldEntry& last = out.registry.active();
        last.window_end = src.frame_count - 1;
        last.frozen = true;
        last.freeze_checksum = last.field.checksum();
        out.state.events.push_back({RegistryEvent::Type::Freeze, src.frame_count - 1,
                                    int(out.registry.entries.size()) - 1, last.center(),
                                    out.state.window_begin});
    }
    out.trajectory = out.state.poses;
    return out;
}

}  // namespace fieldchain
