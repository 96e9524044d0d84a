#pragma once

// Signed distance fields for rigid collision geometry. Queries return the
// distance, the outward unit normal (the gradient of d), and dn/dx, which the
// contact adjoints need for torque-arm and projection derivatives. The normal
// at interior singular points uses a fixed +x tie-break so repeated runs are
// bitwise identical.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "softsim/math.hpp"

namespace softsim {

struct Pose2 {
  Vec2 p;            // translation
  double th = 0.0;   // planar angle
};

struct Twist2 {
  Vec2 lin;
  double ang = 0.0;
};

inline Vec2 to_body(const Pose2& pose, const Vec2& world) {
  const Mat2 rt = rotation(-pose.th);
  return rt * (world - pose.p);
}

inline Vec2 to_world(const Pose2& pose, const Vec2& body) {
  return rotation(pose.th) * body + pose.p;
}

enum class SdfKind { AnalyticCircle, AnalyticBox, AnalyticAnnulusContainer, AnalyticCapsule, SampledGrid };

struct SdfHandle {
  SdfKind kind = SdfKind::AnalyticCircle;
  // circle
  double radius = 0.1;
  // box
  Vec2 half{0.1, 0.1};
  // annulus container: solid wall occupies inner_radius <= rho <= inner_radius + thickness
  double inner_radius = 0.2;
  double thickness = 0.02;
  // capsule: segment a-b swept by radius
  Vec2 cap_a{-0.1, 0.0}, cap_b{0.1, 0.0};
  // sampled grid over [bb_min, bb_max]
  Vec2 bb_min, bb_max;
  int nx = 0, ny = 0;
  std::vector<double> values;  // row-major, ix fastest
};

struct SdfHit {
  double d = 0.0;
  Vec2 n{1.0, 0.0};
  Mat2 dn_dx;  // Hessian of the distance field at the query point
};

namespace detail {

inline SdfHit circle_sdf(double radius, const Vec2& x) {
  SdfHit h;
  const double rho = norm(x);
  if (rho <= 0.0) {
    h.d = -radius;
    h.n = {1.0, 0.0};
    h.dn_dx = Mat2::zero();
    return h;
  }
  h.d = rho - radius;
  h.n = x / rho;
  h.dn_dx = (Mat2::identity() - Mat2::outer(h.n, h.n)) * (1.0 / rho);
  return h;
}

inline SdfHit box_sdf(const Vec2& half, const Vec2& x) {
  SdfHit h;
  const Vec2 q{std::abs(x.x) - half.x, std::abs(x.y) - half.y};
  const double sx = x.x >= 0.0 ? 1.0 : -1.0;
  const double sy = x.y >= 0.0 ? 1.0 : -1.0;
  if (q.x > 0.0 && q.y > 0.0) {  // corner region
    const Vec2 corner{sx * half.x, sy * half.y};
    const Vec2 u = x - corner;
    const double l = norm(u);
    h.d = l;
    h.n = u / l;
    h.dn_dx = (Mat2::identity() - Mat2::outer(h.n, h.n)) * (1.0 / l);
  } else if (q.x > q.y) {  // x-face closest (covers outside-x and inside cases)
    h.d = q.x;
    h.n = {sx, 0.0};
    h.dn_dx = Mat2::zero();
  } else {
    h.d = q.y;
    h.n = {0.0, sy};
    h.dn_dx = Mat2::zero();
  }
  return h;
}

inline SdfHit annulus_sdf(double inner, double thick, const Vec2& x) {
  SdfHit h;
  const double mid = inner + 0.5 * thick;
  const double rho = norm(x);
  Vec2 er{1.0, 0.0};
  if (rho > 0.0) er = x / rho;
  const double s = (rho >= mid) ? 1.0 : -1.0;
  h.d = std::abs(rho - mid) - 0.5 * thick;
  h.n = er * s;
  if (rho > 0.0) {
    h.dn_dx = (Mat2::identity() - Mat2::outer(er, er)) * (s / rho);
  } else {
    h.dn_dx = Mat2::zero();
  }
  return h;
}

inline SdfHit capsule_sdf(const Vec2& a, const Vec2& b, double radius, const Vec2& x) {
  SdfHit h;
  const Vec2 e = b - a;
  const double ee = norm_sq(e);
  double t = 0.0;
  if (ee > 0.0) t = clamp(dot(x - a, e) / ee, 0.0, 1.0);
  const Vec2 q = a + e * t;
  const Vec2 u = x - q;
  const double l = norm(u);
  if (l <= 0.0) {
    h.d = -radius;
    h.n = ee > 0.0 ? perp(e) / std::sqrt(ee) : Vec2{1.0, 0.0};
    h.dn_dx = Mat2::zero();
    return h;
  }
  h.d = l - radius;
  h.n = u / l;
  const bool interior = ee > 0.0 && t > 0.0 && t < 1.0;
  // On the flat flank the normal is constant; around the end caps the field
  // is radial about the endpoint.
  h.dn_dx = interior ? Mat2::zero() : (Mat2::identity() - Mat2::outer(h.n, h.n)) * (1.0 / l);
  return h;
}

struct BilinearEval {
  double v = 0.0;
  Vec2 grad;       // gradient of the interpolated value w.r.t. the (clamped) point
  Mat2 grad_jac;   // derivative of grad w.r.t. the point (from the bilinear form)
};

inline BilinearEval sampled_interp(const SdfHandle& s, const Vec2& p) {
  BilinearEval out;
  const double hx = (s.bb_max.x - s.bb_min.x) / (s.nx - 1);
  const double hy = (s.bb_max.y - s.bb_min.y) / (s.ny - 1);
  double fx = (p.x - s.bb_min.x) / hx;
  double fy = (p.y - s.bb_min.y) / hy;
  int ix = static_cast<int>(std::floor(fx));
  int iy = static_cast<int>(std::floor(fy));
  ix = std::max(0, std::min(ix, s.nx - 2));
  iy = std::max(0, std::min(iy, s.ny - 2));
  const double u = fx - ix;
  const double v = fy - iy;
  const auto at = [&](int i, int j) { return s.values[static_cast<size_t>(j) * s.nx + i]; };
  const double c00 = at(ix, iy), c10 = at(ix + 1, iy);
  const double c01 = at(ix, iy + 1), c11 = at(ix + 1, iy + 1);
  out.v = c00 * (1 - u) * (1 - v) + c10 * u * (1 - v) + c01 * (1 - u) * v + c11 * u * v;
  const double dvdu = -c00 * (1 - v) + c10 * (1 - v) - c01 * v + c11 * v;
  const double dvdv = -c00 * (1 - u) - c10 * u + c01 * (1 - u) + c11 * u;
  out.grad = {dvdu / hx, dvdv / hy};
  const double dudv = c00 - c10 - c01 + c11;  // d2/du dv
  out.grad_jac = {0.0, dudv / (hx * hy), dudv / (hx * hy), 0.0};
  return out;
}

inline SdfHit sampled_sdf(const SdfHandle& s, const Vec2& x) {
  SdfHit h;
  const Vec2 pc = cmax(s.bb_min, cmin(x, s.bb_max));
  const Vec2 off = x - pc;
  const double off_len = norm(off);
  // Distance value: interpolate at the clamped point; outside the box add the
  // exterior offset so contact is never reported spuriously.
  const BilinearEval base = sampled_interp(s, pc);
  h.d = base.v + off_len;

  // Normal from central differences of the interpolated field, evaluated with
  // the same clamped lookup. The adjoint differentiates this construction.
  const double hx = (s.bb_max.x - s.bb_min.x) / (s.nx - 1);
  const double hstep = 0.5 * hx;
  Vec2 raw;
  Mat2 raw_jac;
  for (int axis = 0; axis < 2; ++axis) {
    Vec2 dp = Vec2::zero();
    dp[axis] = hstep;
    const Vec2 pp = cmax(s.bb_min, cmin(x + dp, s.bb_max));
    const Vec2 pm = cmax(s.bb_min, cmin(x - dp, s.bb_max));
    const BilinearEval ep = sampled_interp(s, pp);
    const BilinearEval em = sampled_interp(s, pm);
    raw[axis] = (ep.v - em.v) / (2.0 * hstep);
    // d raw[axis] / dx  (clamped dims have zero pass-through; ignored as the
    // clamp pattern is frozen at the query point)
    const Vec2 row = (ep.grad - em.grad) / (2.0 * hstep);
    if (axis == 0) { raw_jac.a = row.x; raw_jac.b = row.y; }
    else { raw_jac.c = row.x; raw_jac.d = row.y; }
  }
  const double rl = norm(raw);
  if (rl <= 1e-14) {
    h.n = {1.0, 0.0};
    h.dn_dx = Mat2::zero();
  } else {
    h.n = raw / rl;
    const Mat2 proj = (Mat2::identity() - Mat2::outer(h.n, h.n)) * (1.0 / rl);
    h.dn_dx = proj * raw_jac;
  }
  if (off_len > 0.0) {
    // Exterior: the offset direction dominates; keep the interpolated normal
    // blended out entirely in favour of the offset direction.
    h.n = off / off_len;
    h.dn_dx = (Mat2::identity() - Mat2::outer(h.n, h.n)) * (1.0 / off_len);
  }
  return h;
}

}  // namespace detail

// Query in the handle's local frame.
inline SdfHit sdf_query_local(const SdfHandle& s, const Vec2& x) {
  switch (s.kind) {
    case SdfKind::AnalyticCircle: return detail::circle_sdf(s.radius, x);
    case SdfKind::AnalyticBox: return detail::box_sdf(s.half, x);
    case SdfKind::AnalyticAnnulusContainer: return detail::annulus_sdf(s.inner_radius, s.thickness, x);
    case SdfKind::AnalyticCapsule: return detail::capsule_sdf(s.cap_a, s.cap_b, s.radius, x);
    case SdfKind::SampledGrid: return detail::sampled_sdf(s, x);
  }
  return {};
}

// Query with the handle placed at a pose; d and n are reported in world frame.
inline SdfHit sdf_query(const SdfHandle& s, const Vec2& world, const Pose2& pose) {
  const Mat2 r = rotation(pose.th);
  const SdfHit local = sdf_query_local(s, r.transposed() * (world - pose.p));
  SdfHit out;
  out.d = local.d;
  out.n = r * local.n;
  out.dn_dx = r * local.dn_dx * r.transposed();
  return out;
}

// Reverse pass of sdf_query: accumulate dL/d(world point) and dL/d(pose)
// given the adjoints of d and n. `hit` must come from the matching forward
// query and `world` is the original query point.
inline void sdf_query_vjp(const SdfHit& hit, const Vec2& world, const Pose2& pose,
                          double grad_d, const Vec2& grad_n,
                          Vec2& grad_x, Vec2& grad_pos, double& grad_th) {
  const Mat2 ht = hit.dn_dx.transposed();
  const Vec2 r = world - pose.p;
  grad_x += grad_d * hit.n + ht * grad_n;
  grad_pos -= grad_d * hit.n + ht * grad_n;
  const Vec2 sr = perp(r);
  grad_th += grad_d * (-dot(hit.n, sr)) + dot(grad_n, perp(hit.n) - hit.dn_dx * sr);
}

// Bake a handle into a regular sampled grid (used for SampledGrid colliders).
inline SdfHandle sample_sdf(const SdfHandle& src, const Vec2& bb_min, const Vec2& bb_max, int res) {
  SdfHandle out;
  out.kind = SdfKind::SampledGrid;
  out.bb_min = bb_min;
  out.bb_max = bb_max;
  out.nx = res;
  out.ny = res;
  out.values.resize(static_cast<size_t>(res) * res);
  for (int j = 0; j < res; ++j) {
    for (int i = 0; i < res; ++i) {
      const Vec2 p{bb_min.x + (bb_max.x - bb_min.x) * i / (res - 1),
                   bb_min.y + (bb_max.y - bb_min.y) * j / (res - 1)};
      out.values[static_cast<size_t>(j) * res + i] = sdf_query_local(src, p).d;
    }
  }
  return out;
}

}  // namespace softsim
