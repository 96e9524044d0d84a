#pragma once

// Small fixed-size 2D linear algebra used throughout the simulator.
// Everything is double precision; the adjoint kernels rely on it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

namespace softsim {

struct Vec2 {
  double x = 0.0, y = 0.0;

  constexpr Vec2() = default;
  constexpr Vec2(double x_, double y_) : x(x_), y(y_) {}
  static constexpr Vec2 zero() { return {0.0, 0.0}; }

  double& operator[](int i) { return i == 0 ? x : y; }
  double operator[](int i) const { return i == 0 ? x : y; }

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2 operator/(double s) const { return {x / s, y / s}; }
  Vec2 operator-() const { return {-x, -y}; }
  Vec2& operator+=(const Vec2& o) { x += o.x; y += o.y; return *this; }
  Vec2& operator-=(const Vec2& o) { x -= o.x; y -= o.y; return *this; }
  Vec2& operator*=(double s) { x *= s; y *= s; return *this; }
  bool operator==(const Vec2& o) const { return x == o.x && y == o.y; }
};

inline Vec2 operator*(double s, const Vec2& v) { return v * s; }
inline double dot(const Vec2& a, const Vec2& b) { return a.x * b.x + a.y * b.y; }
inline double cross(const Vec2& a, const Vec2& b) { return a.x * b.y - a.y * b.x; }
// 90-degree counter-clockwise rotation.
inline Vec2 perp(const Vec2& v) { return {-v.y, v.x}; }
inline double norm_sq(const Vec2& v) { return dot(v, v); }
inline double norm(const Vec2& v) { return std::sqrt(norm_sq(v)); }
inline Vec2 cmin(const Vec2& a, const Vec2& b) { return {std::min(a.x, b.x), std::min(a.y, b.y)}; }
inline Vec2 cmax(const Vec2& a, const Vec2& b) { return {std::max(a.x, b.x), std::max(a.y, b.y)}; }
inline bool all_finite(const Vec2& v) { return std::isfinite(v.x) && std::isfinite(v.y); }

// Row-major 2x2 matrix.
struct Mat2 {
  double a = 0.0, b = 0.0, c = 0.0, d = 0.0;  // [[a, b], [c, d]]

  constexpr Mat2() = default;
  constexpr Mat2(double a_, double b_, double c_, double d_) : a(a_), b(b_), c(c_), d(d_) {}
  static constexpr Mat2 identity() { return {1.0, 0.0, 0.0, 1.0}; }
  static constexpr Mat2 zero() { return {0.0, 0.0, 0.0, 0.0}; }
  static constexpr Mat2 diag(double s0, double s1) { return {s0, 0.0, 0.0, s1}; }
  // Outer product u v^T.
  static constexpr Mat2 outer(const Vec2& u, const Vec2& v) {
    return {u.x * v.x, u.x * v.y, u.y * v.x, u.y * v.y};
  }

  Mat2 operator+(const Mat2& o) const { return {a + o.a, b + o.b, c + o.c, d + o.d}; }
  Mat2 operator-(const Mat2& o) const { return {a - o.a, b - o.b, c - o.c, d - o.d}; }
  Mat2 operator*(double s) const { return {a * s, b * s, c * s, d * s}; }
  Mat2& operator+=(const Mat2& o) { a += o.a; b += o.b; c += o.c; d += o.d; return *this; }
  Mat2& operator-=(const Mat2& o) { a -= o.a; b -= o.b; c -= o.c; d -= o.d; return *this; }
  Mat2 operator-() const { return {-a, -b, -c, -d}; }
  bool operator==(const Mat2& o) const { return a == o.a && b == o.b && c == o.c && d == o.d; }

  Mat2 operator*(const Mat2& o) const {
    return {a * o.a + b * o.c, a * o.b + b * o.d,
            c * o.a + d * o.c, c * o.b + d * o.d};
  }
  Vec2 operator*(const Vec2& v) const { return {a * v.x + b * v.y, c * v.x + d * v.y}; }

  Mat2 transposed() const { return {a, c, b, d}; }
  double trace() const { return a + d; }
  double det() const { return a * d - b * c; }
  Mat2 inverse() const {
    const double j = det();
    return Mat2{d, -b, -c, a} * (1.0 / j);
  }
};

inline Mat2 operator*(double s, const Mat2& m) { return m * s; }
inline double ddot(const Mat2& p, const Mat2& q) {
  return p.a * q.a + p.b * q.b + p.c * q.c + p.d * q.d;
}
inline bool all_finite(const Mat2& m) {
  return std::isfinite(m.a) && std::isfinite(m.b) && std::isfinite(m.c) && std::isfinite(m.d);
}

// Rotation by angle theta.
inline Mat2 rotation(double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c, -s, s, c};
}

// d(J)/dF for J = det(F), laid out as a matrix so that dJ = ddot(det_grad(F), dF).
inline Mat2 det_grad(const Mat2& f) { return {f.d, -f.c, -f.b, f.a}; }

// Polar decomposition F = R S with R a proper rotation. Valid whenever
// tr(F)^2 + (F21 - F12)^2 > 0 (any F with positive determinant qualifies).
struct Polar2 {
  Mat2 r;
  double cos_t = 1.0, sin_t = 0.0, h = 1.0;  // saved for the reverse pass
};

inline Polar2 polar_decompose(const Mat2& f) {
  Polar2 out;
  const double p = f.a + f.d;
  const double q = f.c - f.b;
  out.h = std::sqrt(p * p + q * q);
  if (out.h <= 0.0) {  // degenerate; fall back to identity rotation
    out.cos_t = 1.0;
    out.sin_t = 0.0;
    out.h = 1.0;
  } else {
    out.cos_t = p / out.h;
    out.sin_t = q / out.h;
  }
  out.r = {out.cos_t, -out.sin_t, out.sin_t, out.cos_t};
  return out;
}

// Reverse of polar_decompose: accumulates into grad_f given the adjoint of R.
inline void polar_decompose_vjp(const Mat2& f, const Polar2& pd, const Mat2& grad_r, Mat2& grad_f) {
  // R = [[c,-s],[s,c]], c = p/h, s = q/h, p = a+d, q = c-b, h = sqrt(p^2+q^2).
  const double gc = grad_r.a + grad_r.d;
  const double gs = grad_r.c - grad_r.b;
  const double p = f.a + f.d;
  const double q = f.c - f.b;
  const double h = pd.h;
  const double h3 = h * h * h;
  // dc = (q^2 dp - p q dq)/h^3, ds = (p^2 dq - p q dp)/h^3
  const double gp = (q * q * gc - p * q * gs) / h3;
  const double gq = (p * p * gs - p * q * gc) / h3;
  grad_f.a += gp;
  grad_f.d += gp;
  grad_f.c += gq;
  grad_f.b -= gq;
}

// Rotation-variant 2x2 SVD: F = U diag(s0, s1) V^T with U, V proper rotations.
// For det(F) > 0 both singular values are positive and s0 >= s1.
struct Svd2 {
  Mat2 u, v;
  double s0 = 0.0, s1 = 0.0;
};

inline Svd2 svd2(const Mat2& m) {
  const double e = 0.5 * (m.a + m.d);
  const double f = 0.5 * (m.a - m.d);
  const double g = 0.5 * (m.c + m.b);
  const double h = 0.5 * (m.c - m.b);
  const double q = std::sqrt(e * e + h * h);
  const double r = std::sqrt(f * f + g * g);
  double a1 = std::atan2(g, f);
  double a2 = std::atan2(h, e);
  const double beta = 0.5 * (a1 - a2);
  const double gamma = 0.5 * (a1 + a2);
  Svd2 out;
  out.u = rotation(gamma);
  out.v = rotation(beta);
  out.s0 = q + r;
  out.s1 = q - r;
  return out;
}

inline Mat2 svd2_reconstruct(const Svd2& s) {
  return s.u * Mat2::diag(s.s0, s.s1) * s.v.transposed();
}

// Reverse pass through F' = U g(S) V^T where the caller supplies the clamped
// singular values (s0c, s1c) and the active-branch derivatives (gp0, gp1 in
// {0,1}). grad_out is dL/dF'; the result dL/dF is accumulated into grad_f.
// The rotation terms are singular at s0 == s1; the denominator is clamped,
// which matches the frozen-branch convention used by the rest of the adjoints.
inline void svd2_clamped_vjp(const Svd2& sv, double s0c, double s1c, double gp0, double gp1,
                             const Mat2& grad_out, Mat2& grad_f) {
  const Mat2 h = sv.u.transposed() * grad_out * sv.v;  // dL/d(U^T F' V)
  const double s0 = sv.s0, s1 = sv.s1;
  double denom = s1 * s1 - s0 * s0;
  const double kEps = 1e-10;
  if (std::abs(denom) < kEps) denom = (denom < 0.0 ? -kEps : kEps);
  // Coefficients of dM12/dM21 through the rotation adjustments of U and V.
  const double cu = (h.b * s1c - h.c * s0c) / denom;
  const double cv = (h.c * s1c - h.b * s0c) / denom;
  Mat2 gm;
  gm.a = h.a * gp0;
  gm.d = h.d * gp1;
  gm.b = cu * s1 + cv * s0;
  gm.c = cu * s0 + cv * s1;
  grad_f += sv.u * gm * sv.v.transposed();
}

inline double clamp(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

}  // namespace softsim
