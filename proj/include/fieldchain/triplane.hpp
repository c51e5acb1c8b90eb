#pragma once

// Vector-matrix decomposed tri-plane radiance field.
//
// A field stores, per channel (1 density channel + F appearance channels)
// and per rank r, one vector per axis and one matrix per orthogonal plane:
//
//   value(x) = sum_r  vX_r(x) * Myz_r(y,z) + vY_r(y) * Mxz_r(x,z)
//                   + vZ_r(z) * Mxy_r(x,y)
//
// Factors are indexed over the contracted cube (-2,2)^3; world points are
// first shifted/scaled into field-local coordinates and then contracted.
// Density uses softplus activation; appearance features feed a fixed
// deterministic two-layer decoder together with a degree-2 spherical
// harmonic encoding of the view direction.

#include "fieldchain/core.hpp"

#include <array>
#include <cstring>
#include <iterator>

namespace fieldchain {

struct OutOfDomain : Error {
    using Error::Error;
};
struct ShrinkNotAllowed : Error {
    using Error::Error;
};

struct FieldSample {
    Vec3 color = Vec3::Zero();  // in [0,1]^3
    double sigma = 0.0;         // >= 0, 1/scene-unit
};

// Maps field-local coordinates into the open cube (-2,2)^3; identity on the
// unit infinity-ball, radially squashed outside.
inline Vec3 contract(const Vec3& x) {
    const double m = x.cwiseAbs().maxCoeff();
    if (m <= 1.0) return x;
    return (2.0 - 1.0 / m) * (x / m);
}

// Jacobian of contract(); piecewise smooth, undefined only on the measure-
// zero set where two coordinates tie for the max.
inline Mat3 contract_jacobian(const Vec3& x) {
    const double m = x.cwiseAbs().maxCoeff();
    if (m <= 1.0) return Mat3::Identity();
    int k = 0;
    for (int i = 1; i < 3; ++i)
        if (std::abs(x[i]) > std::abs(x[k])) k = i;
    const double s = x[k] >= 0 ? 1.0 : -1.0;
    // f(x) = (2 - 1/m) * x / m, with m = s * x_k
    const double im = 1.0 / m;
    Mat3 j = (2.0 * im - im * im) * Mat3::Identity();
    Vec3 dm = Vec3::Zero();
    dm[k] = s;
    j += (2.0 * im * im * im * x - 2.0 * im * im * x) * dm.transpose();
    return j;
}

// Spherical harmonics of degree <= 2, real basis, 9 values.
inline std::array<double, 9> sh_basis(const Vec3& d) {
    const double x = d.x(), y = d.y(), z = d.z();
    return {0.28209479177387814,
            0.4886025119029199 * y,
            0.4886025119029199 * z,
            0.4886025119029199 * x,
            1.0925484305920792 * x * y,
            1.0925484305920792 * y * z,
            0.31539156525252005 * (3.0 * z * z - 1.0),
            1.0925484305920792 * x * z,
            0.5462742152960396 * (x * x - y * y)};
}

// d(sh)/d(direction), 9x3, row k = gradient of basis k.
inline Eigen::Matrix<double, 9, 3> sh_basis_jacobian(const Vec3& d) {
    const double x = d.x(), y = d.y(), z = d.z();
    Eigen::Matrix<double, 9, 3> j;
    j.setZero();
    j(1, 1) = 0.4886025119029199;
    j(2, 2) = 0.4886025119029199;
    j(3, 0) = 0.4886025119029199;
    j(4, 0) = 1.0925484305920792 * y;
    j(4, 1) = 1.0925484305920792 * x;
    j(5, 1) = 1.0925484305920792 * z;
    j(5, 2) = 1.0925484305920792 * y;
    j(6, 2) = 0.31539156525252005 * 6.0 * z;
    j(7, 0) = 1.0925484305920792 * z;
    j(7, 2) = 1.0925484305920792 * x;
    j(8, 0) = 0.5462742152960396 * 2.0 * x;
    j(8, 1) = -0.5462742152960396 * 2.0 * y;
    return j;
}

// Fixed appearance decoder: (feature, sh(d)) -> tanh hidden layer -> sigmoid
// RGB. Weights are generated deterministically from a constant seed, are not
// part of the trainable parameter set, and are not serialized; any two
// fields with the same feature dimension share the same decoder.
struct AppearanceDecoder {
    static constexpr int kHidden = 64;
    int feature_dim = 0;
    std::vector<double> w1;  // kHidden x (feature_dim + 9), row-major
    std::vector<double> b1;  // kHidden
    std::vector<double> w2;  // 3 x kHidden
    std::vector<double> b2;  // 3

    explicit AppearanceDecoder(int f_dim = 0) : feature_dim(f_dim) {
        if (f_dim <= 0) return;
        const int in_dim = f_dim + 9;
        Rng rng(0x5eedDEC0DEull);
        const double s1 = 1.0 / std::sqrt(double(in_dim));
        const double s2 = 1.0 / std::sqrt(double(kHidden));
        w1.resize(size_t(kHidden) * in_dim);
        b1.assign(kHidden, 0.0);
        w2.resize(size_t(3) * kHidden);
        b2.assign(3, 0.0);
        for (auto& w : w1) w = rng.normal(0.0, s1);
        for (auto& w : w2) w = rng.normal(0.0, s2);
    }

    Vec3 forward(const double* feat, const std::array<double, 9>& sh,
                 double* hidden_out = nullptr) const {
        const int in_dim = feature_dim + 9;
        double hidden[kHidden];
        for (int h = 0; h < kHidden; ++h) {
            const double* row = &w1[size_t(h) * in_dim];
            double acc = b1[h];
            for (int i = 0; i < feature_dim; ++i) acc += row[i] * feat[i];
            for (int i = 0; i < 9; ++i) acc += row[feature_dim + i] * sh[i];
            hidden[h] = std::tanh(acc);
            if (hidden_out) hidden_out[h] = hidden[h];
        }
        Vec3 rgb;
        for (int c = 0; c < 3; ++c) {
            const double* row = &w2[size_t(c) * kHidden];
            double acc = b2[c];
            for (int h = 0; h < kHidden; ++h) acc += row[h] * hidden[h];
            rgb[c] = logistic(acc);
        }
        return rgb;
    }

    // Chain rule through the decoder; writes d(loss)/d(feature) and
    // d(loss)/d(sh) given d(loss)/d(rgb) and the forward activations.
    void backward(const double* hidden, const Vec3& rgb, const Vec3& d_rgb, double* d_feat,
                  double* d_sh) const {
        const int in_dim = feature_dim + 9;
        double d_hidden[kHidden] = {0};
        for (int c = 0; c < 3; ++c) {
            const double g = d_rgb[c] * rgb[c] * (1.0 - rgb[c]);  // sigmoid'
            const double* row = &w2[size_t(c) * kHidden];
            for (int h = 0; h < kHidden; ++h) d_hidden[h] += g * row[h];
        }
        for (int i = 0; i < feature_dim; ++i) d_feat[i] = 0.0;
        for (int i = 0; i < 9; ++i) d_sh[i] = 0.0;
        for (int h = 0; h < kHidden; ++h) {
            const double g = d_hidden[h] * (1.0 - hidden[h] * hidden[h]);  // tanh'
            const double* row = &w1[size_t(h) * in_dim];
            for (int i = 0; i < feature_dim; ++i) d_feat[i] += g * row[i];
            for (int i = 0; i < 9; ++i) d_sh[i] += g * row[feature_dim + i];
        }
    }
};

class TriplaneField {
  public:
    TriplaneField() = default;

    TriplaneField(int rank, int resolution, int feature_dim, const Vec3& center,
                  double half_extent)
        : rank_(rank),
          resolution_(resolution),
          feature_dim_(feature_dim),
          center_(center),
          half_extent_(half_extent),
          decoder_(feature_dim) {
        if (rank <= 0 || resolution < 2 || feature_dim <= 0 || feature_dim > kMaxFeatureDim ||
            half_extent <= 0)
            throw Error("TriplaneField: bad construction parameters");
        params_.assign(parameter_count(rank, resolution, feature_dim), 0.0);
    }

    static size_t parameter_count(int rank, int n, int feature_dim) {
        return size_t(1 + feature_dim) * rank * (3 * size_t(n) + 3 * size_t(n) * n);
    }

    int rank() const { return rank_; }
    int resolution() const { return resolution_; }
    int feature_dim() const { return feature_dim_; }
    int channel_count() const { return 1 + feature_dim_; }
    const Vec3& center() const { return center_; }
    double half_extent() const { return half_extent_; }
    const AppearanceDecoder& decoder() const { return decoder_; }

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }

    // channel 0 = density, channels 1..F = appearance features
    size_t vector_offset(int channel, int r, int axis) const {
        return ((size_t(channel) * rank_ + r) * 3 + axis) * resolution_;
    }
    size_t matrix_offset(int channel, int r, int axis) const {
        const size_t base = size_t(channel_count()) * rank_ * 3 * resolution_;
        return base + ((size_t(channel) * rank_ + r) * 3 + axis) * resolution_ * resolution_;
    }

    Vec3 world_to_local(const Vec3& x_world) const { return (x_world - center_) / half_extent_; }

    // Linear/bilinear interpolation footprint at one contracted coordinate.
    struct AxisLookup {
        int i0;     // lower factor index, in [0, n-2]
        double w1;  // weight of index i0+1
    };

    AxisLookup axis_lookup(double u) const {
        // (-2,2) -> [0, n-1], clamped at the open boundary
        double g = (u + 2.0) * 0.25 * (resolution_ - 1);
        g = std::clamp(g, 0.0, double(resolution_ - 1));
        int i0 = std::min(int(g), resolution_ - 2);
        return {i0, g - i0};
    }

    // Tri-plane reconstruction of one channel at a contracted point.
    double grid_value(const Vec3& xc, int channel) const {
        check_domain(xc);
        const AxisLookup lx = axis_lookup(xc.x()), ly = axis_lookup(xc.y()),
                         lz = axis_lookup(xc.z());
        return channel_value(channel, lx, ly, lz);
    }

    void grid_feature(const Vec3& xc, double* out) const {
        check_domain(xc);
        const AxisLookup lx = axis_lookup(xc.x()), ly = axis_lookup(xc.y()),
                         lz = axis_lookup(xc.z());
        for (int f = 0; f < feature_dim_; ++f) out[f] = channel_value(f + 1, lx, ly, lz);
    }

    static constexpr int kMaxFeatureDim = 64;

    // Full field query at a world point and unit view direction.
    FieldSample query(const Vec3& x_world, const Vec3& dir) const {
        check_direction(dir);
        const Vec3 xc = contract(world_to_local(x_world));
        check_domain(xc);
        const AxisLookup lx = axis_lookup(xc.x()), ly = axis_lookup(xc.y()),
                         lz = axis_lookup(xc.z());
        FieldSample s;
        s.sigma = softplus(channel_value(0, lx, ly, lz));
        double feat[kMaxFeatureDim];
        for (int f = 0; f < feature_dim_; ++f) feat[f] = channel_value(f + 1, lx, ly, lz);
        s.color = decoder_.forward(feat, sh_basis(dir));
        return s;
    }

    // Upsamples all factors to a finer resolution by linear (vectors) and
    // bilinear (matrices) interpolation over the shared (-2,2) domain.
    TriplaneField upsampled(int new_n) const {
        if (new_n <= resolution_)
            throw ShrinkNotAllowed("upsample: new resolution must exceed current");
        TriplaneField out(rank_, new_n, feature_dim_, center_, half_extent_);
        const int n_old = resolution_, c_count = channel_count();
        const auto src_pos = [&](int j) {
            return double(j) * (n_old - 1) / double(new_n - 1);
        };
        for (int c = 0; c < c_count; ++c) {
            for (int r = 0; r < rank_; ++r) {
                for (int axis = 0; axis < 3; ++axis) {
                    const double* v_src = &params_[vector_offset(c, r, axis)];
                    double* v_dst = &out.params_[out.vector_offset(c, r, axis)];
                    for (int j = 0; j < new_n; ++j) {
                        const double g = src_pos(j);
                        const int i0 = std::min(int(g), n_old - 2);
                        const double w = g - i0;
                        v_dst[j] = (1.0 - w) * v_src[i0] + w * v_src[i0 + 1];
                    }
                    const double* m_src = &params_[matrix_offset(c, r, axis)];
                    double* m_dst = &out.params_[out.matrix_offset(c, r, axis)];
                    for (int ja = 0; ja < new_n; ++ja) {
                        const double ga = src_pos(ja);
                        const int a0 = std::min(int(ga), n_old - 2);
                        const double wa = ga - a0;
                        for (int jb = 0; jb < new_n; ++jb) {
                            const double gb = src_pos(jb);
                            const int b0 = std::min(int(gb), n_old - 2);
                            const double wb = gb - b0;
                            m_dst[size_t(ja) * new_n + jb] =
                                (1 - wa) * ((1 - wb) * m_src[size_t(a0) * n_old + b0] +
                                            wb * m_src[size_t(a0) * n_old + b0 + 1]) +
                                wa * ((1 - wb) * m_src[size_t(a0 + 1) * n_old + b0] +
                                      wb * m_src[size_t(a0 + 1) * n_old + b0 + 1]);
                        }
                    }
                }
            }
        }
        return out;
    }

    // --- gradients -------------------------------------------------------

    struct QueryGrad {
        Vec3 d_x_world = Vec3::Zero();  // d(loss)/d(world point)
        Vec3 d_dir = Vec3::Zero();      // d(loss)/d(view direction)
    };

    // Recomputes the query at (x_world, dir) and accumulates exact gradients
    // of `upstream.d_color . color + upstream.d_sigma . sigma` into
    // `factor_grads` (same indexing as params()); returns gradients with
    // respect to the query point and direction for the pose chain.
    struct QueryUpstream {
        Vec3 d_color = Vec3::Zero();
        double d_sigma = 0.0;
    };

    QueryGrad query_vjp(const Vec3& x_world, const Vec3& dir, const QueryUpstream& up,
                        std::vector<double>* factor_grads) const {
        check_direction(dir);
        const Vec3 xl = world_to_local(x_world);
        const Vec3 xc = contract(xl);
        check_domain(xc);
        const AxisLookup lx = axis_lookup(xc.x()), ly = axis_lookup(xc.y()),
                         lz = axis_lookup(xc.z());

        // forward pass pieces we need again
        const double raw_sigma = channel_value(0, lx, ly, lz);
        double feat[kMaxFeatureDim];
        for (int f = 0; f < feature_dim_; ++f) feat[f] = channel_value(f + 1, lx, ly, lz);
        const auto sh = sh_basis(dir);
        double hidden[AppearanceDecoder::kHidden];
        const Vec3 rgb = decoder_.forward(feat, sh, hidden);

        // decoder backward
        double d_feat[kMaxFeatureDim];
        double d_sh[9] = {0};
        decoder_.backward(hidden, rgb, up.d_color, d_feat, d_sh);

        const double d_raw_sigma = up.d_sigma * logistic(raw_sigma);  // softplus'

        // accumulate factor gradients + gradient wrt contracted coords
        Vec3 d_xc = Vec3::Zero();
        channel_vjp(0, lx, ly, lz, d_raw_sigma, factor_grads, &d_xc);
        for (int f = 0; f < feature_dim_; ++f)
            channel_vjp(f + 1, lx, ly, lz, d_feat[f], factor_grads, &d_xc);

        QueryGrad out;
        const Mat3 jc = contract_jacobian(xl);
        out.d_x_world = jc.transpose() * d_xc / half_extent_;
        const auto jsh = sh_basis_jacobian(dir);
        for (int k = 0; k < 9; ++k) out.d_dir += d_sh[k] * jsh.row(k).transpose();
        return out;
    }

    // --- serialization ----------------------------------------------------
    //
    // Binary container: magic "TPF1", int32 rank/resolution/feature_dim,
    // float64 center[3] + half_extent, then the factor array as little-
    // endian float32 in params() order. Round-trips bit-exactly.

    std::vector<unsigned char> serialize() const {
        std::vector<unsigned char> buf;
        buf.reserve(32 + params_.size() * 4);
        auto push = [&buf](const void* p, size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            buf.insert(buf.end(), b, b + n);
        };
        push("TPF1", 4);
        const int32_t header[3] = {int32_t(rank_), int32_t(resolution_), int32_t(feature_dim_)};
        push(header, sizeof(header));
        const double geom[4] = {center_.x(), center_.y(), center_.z(), half_extent_};
        push(geom, sizeof(geom));
        for (double v : params_) {
            const float f = float(v);
            push(&f, 4);
        }
        return buf;
    }

    static TriplaneField deserialize(const unsigned char* data, size_t size) {
        if (size < 4 + 12 + 32 || std::memcmp(data, "TPF1", 4) != 0)
            throw Error("field checkpoint: bad magic");
        int32_t header[3];
        std::memcpy(header, data + 4, sizeof(header));
        double geom[4];
        std::memcpy(geom, data + 16, sizeof(geom));
        TriplaneField f(header[0], header[1], header[2], Vec3(geom[0], geom[1], geom[2]), geom[3]);
        const size_t expect = 48 + f.params_.size() * 4;
        if (size != expect) throw Error("field checkpoint: truncated");
        const unsigned char* p = data + 48;
        for (double& v : f.params_) {
            float fv;
            std::memcpy(&fv, p, 4);
            v = fv;
            p += 4;
        }
        return f;
    }

    void save(const std::string& path) const {
        const auto buf = serialize();
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error("cannot write field checkpoint: " + path);
        out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
    }

    static TriplaneField load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error("cannot read field checkpoint: " + path);
        std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                       std::istreambuf_iterator<char>());
        return deserialize(buf.data(), buf.size());
    }

    uint64_t checksum() const {
        const auto buf = serialize();
        return fnv1a(buf.data(), buf.size());
    }

  private:
    void check_domain(const Vec3& xc) const {
        if (xc.cwiseAbs().maxCoeff() >= 2.0)
            throw OutOfDomain("grid_value: contracted point outside (-2,2)^3");
    }

    static void check_direction(const Vec3& dir) {
        if (std::abs(dir.norm() - 1.0) > 1e-6)
            throw Error("query: view direction must be unit length");
    }

    double channel_value(int channel, const AxisLookup& lx, const AxisLookup& ly,
                         const AxisLookup& lz) const {
        double acc = 0.0;
        for (int r = 0; r < rank_; ++r) {
            acc += lin(vector_offset(channel, r, 0), lx) * bil(matrix_offset(channel, r, 0), ly, lz);
            acc += lin(vector_offset(channel, r, 1), ly) * bil(matrix_offset(channel, r, 1), lx, lz);
            acc += lin(vector_offset(channel, r, 2), lz) * bil(matrix_offset(channel, r, 2), lx, ly);
        }
        return acc;
    }

    double lin(size_t off, const AxisLookup& l) const {
        const double* v = &params_[off];
        return (1.0 - l.w1) * v[l.i0] + l.w1 * v[l.i0 + 1];
    }

    double bil(size_t off, const AxisLookup& la, const AxisLookup& lb) const {
        const double* m = &params_[off];
        const size_t n = resolution_;
        const double m00 = m[size_t(la.i0) * n + lb.i0], m01 = m[size_t(la.i0) * n + lb.i0 + 1];
        const double m10 = m[size_t(la.i0 + 1) * n + lb.i0],
                     m11 = m[size_t(la.i0 + 1) * n + lb.i0 + 1];
        return (1 - la.w1) * ((1 - lb.w1) * m00 + lb.w1 * m01) +
               la.w1 * ((1 - lb.w1) * m10 + lb.w1 * m11);
    }

    // d(lin)/du where u is the contracted coordinate (chain through the
    // grid-index scale (n-1)/4).
    double lin_du(size_t off, const AxisLookup& l) const {
        const double* v = &params_[off];
        return (v[l.i0 + 1] - v[l.i0]) * 0.25 * (resolution_ - 1);
    }

    double bil_dua(size_t off, const AxisLookup& la, const AxisLookup& lb) const {
        const double* m = &params_[off];
        const size_t n = resolution_;
        const double d0 = m[size_t(la.i0 + 1) * n + lb.i0] - m[size_t(la.i0) * n + lb.i0];
        const double d1 = m[size_t(la.i0 + 1) * n + lb.i0 + 1] - m[size_t(la.i0) * n + lb.i0 + 1];
        return ((1 - lb.w1) * d0 + lb.w1 * d1) * 0.25 * (resolution_ - 1);
    }

    // Accumulates d(channel grid value)/d(factors) * g and the gradient with
    // respect to the contracted coordinates.
    void channel_vjp(int channel, const AxisLookup& lx, const AxisLookup& ly, const AxisLookup& lz,
                     double g, std::vector<double>* grads, Vec3* d_xc) const {
        for (int r = 0; r < rank_; ++r) {
            const size_t vx = vector_offset(channel, r, 0), vy = vector_offset(channel, r, 1),
                         vz = vector_offset(channel, r, 2);
            const size_t myz = matrix_offset(channel, r, 0), mxz = matrix_offset(channel, r, 1),
                         mxy = matrix_offset(channel, r, 2);
            const double lin_x = lin(vx, lx), lin_y = lin(vy, ly), lin_z = lin(vz, lz);
            const double bil_yz = bil(myz, ly, lz), bil_xz = bil(mxz, lx, lz),
                         bil_xy = bil(mxy, lx, ly);

            if (grads) {
                add_lin_grad(*grads, vx, lx, g * bil_yz);
                add_lin_grad(*grads, vy, ly, g * bil_xz);
                add_lin_grad(*grads, vz, lz, g * bil_xy);
                add_bil_grad(*grads, myz, ly, lz, g * lin_x);
                add_bil_grad(*grads, mxz, lx, lz, g * lin_y);
                add_bil_grad(*grads, mxy, lx, ly, g * lin_z);
            }
            if (d_xc) {
                (*d_xc).x() += g * (lin_du(vx, lx) * bil_yz + lin_y * bil_dua(mxz, lx, lz) +
                                    lin_z * bil_dua(mxy, lx, ly));
                (*d_xc).y() += g * (lin_du(vy, ly) * bil_xz + lin_x * bil_dua(myz, ly, lz) +
                                    lin_z * bil_dub(mxy, lx, ly));
                (*d_xc).z() += g * (lin_du(vz, lz) * bil_xy + lin_x * bil_dub(myz, ly, lz) +
                                    lin_y * bil_dub(mxz, lx, lz));
            }
        }
    }

    double bil_dub(size_t off, const AxisLookup& la, const AxisLookup& lb) const {
        const double* m = &params_[off];
        const size_t n = resolution_;
        const double d0 = m[size_t(la.i0) * n + lb.i0 + 1] - m[size_t(la.i0) * n + lb.i0];
        const double d1 =
            m[size_t(la.i0 + 1) * n + lb.i0 + 1] - m[size_t(la.i0 + 1) * n + lb.i0];
        return ((1 - la.w1) * d0 + la.w1 * d1) * 0.25 * (resolution_ - 1);
    }

    void add_lin_grad(std::vector<double>& grads, size_t off, const AxisLookup& l,
                      double g) const {
        grads[off + l.i0] += (1.0 - l.w1) * g;
        grads[off + l.i0 + 1] += l.w1 * g;
    }

    void add_bil_grad(std::vector<double>& grads, size_t off, const AxisLookup& la,
                      const AxisLookup& lb, double g) const {
        const size_t n = resolution_;
        grads[off + size_t(la.i0) * n + lb.i0] += (1 - la.w1) * (1 - lb.w1) * g;
        grads[off + size_t(la.i0) * n + lb.i0 + 1] += (1 - la.w1) * lb.w1 * g;
        grads[off + size_t(la.i0 + 1) * n + lb.i0] += la.w1 * (1 - lb.w1) * g;
        grads[off + size_t(la.i0 + 1) * n + lb.i0 + 1] += la.w1 * lb.w1 * g;
    }

    int rank_ = 0;
    int resolution_ = 0;
    int feature_dim_ = 0;
    Vec3 center_ = Vec3::Zero();
    double half_extent_ = 1.0;
    AppearanceDecoder decoder_;
    std::vector<double> params_;
};

// Factor initialization used for freshly allocated fields: density factors
// combine to a uniform negative pre-activation (near-transparent start),
// appearance factors are small noise.
inline void init_field_factors(TriplaneField& field, Rng& rng, double density_preact = -2.5,
                               double noise = 0.05) {
    auto& p = field.params();
    const int n = field.resolution();
    const double m0 = 0.5;
    const double v0 = density_preact / (3.0 * field.rank() * m0);
    for (int r = 0; r < field.rank(); ++r) {
        for (int axis = 0; axis < 3; ++axis) {
            double* v = &p[field.vector_offset(0, r, axis)];
            for (int i = 0; i < n; ++i) v[i] = v0 + noise * v0 * rng.normal();
            double* m = &p[field.matrix_offset(0, r, axis)];
            for (int i = 0; i < n * n; ++i) m[i] = m0 + noise * m0 * rng.normal();
        }
    }
    for (int f = 1; f <= field.feature_dim(); ++f) {
        for (int r = 0; r < field.rank(); ++r) {
            for (int axis = 0; axis < 3; ++axis) {
                double* v = &p[field.vector_offset(f, r, axis)];
                for (int i = 0; i < n; ++i) v[i] = 0.2 * rng.normal();
                double* m = &p[field.matrix_offset(f, r, axis)];
                for (int i = 0; i < n * n; ++i) m[i] = 0.2 * rng.normal();
            }
        }
    }
}

}  // namespace fieldchain
