#pragma once

// MLS-MPM forward stages (stencils, stress, P2G, grid op, G2P) and their
// hand-written reverse passes. All loops run single-threaded in index order so
// repeated runs are bitwise identical. The reverse pass expects the caller to
// restore the pre-substep particle state and the forward grid arrays; each
// *_adjoint consumes gradients w.r.t. its outputs and accumulates gradients
// w.r.t. its inputs.

#include <cstdint>
#include <string>
#include <vector>

#include "softsim/math.hpp"

namespace softsim {

enum class Material : uint8_t { Elastic = 0, Plastic = 1, Liquid = 2 };

struct ParticleSet {
  std::vector<Vec2> x, v;
  std::vector<Mat2> F, C;
  std::vector<double> m;           // mass
  std::vector<double> vol;         // reference volume
  std::vector<Material> mat;
  std::vector<double> mu, lam;     // Lamé parameters
  std::vector<double> yield_band;  // plastic singular-value clamp half-width
  std::vector<double> J;           // liquid volume ratio

  size_t size() const { return x.size(); }

  void add(const Vec2& pos, const Vec2& vel, double mass, double volume, Material material,
           double mu_, double lam_, double yield_ = 0.0) {
    x.push_back(pos);
    v.push_back(vel);
    F.push_back(Mat2::identity());
    C.push_back(Mat2::zero());
    m.push_back(mass);
    vol.push_back(volume);
    mat.push_back(material);
    mu.push_back(mu_);
    lam.push_back(lam_);
    yield_band.push_back(yield_);
    J.push_back(1.0);
  }
};

struct Grid {
  int res = 64;
  double dx = 1.0 / 64;
  std::vector<double> m;
  std::vector<Vec2> p;  // momentum after p2g
  std::vector<Vec2> v;  // velocity after grid_op / contact

  void configure(int res_) {
    res = res_;
    dx = 1.0 / res_;
    m.assign(static_cast<size_t>(res) * res, 0.0);
    p.assign(static_cast<size_t>(res) * res, Vec2::zero());
    v.assign(static_cast<size_t>(res) * res, Vec2::zero());
  }
  void clear() {
    std::fill(m.begin(), m.end(), 0.0);
    std::fill(p.begin(), p.end(), Vec2::zero());
    std::fill(v.begin(), v.end(), Vec2::zero());
  }
  size_t idx(int i, int j) const { return static_cast<size_t>(j) * res + i; }
  Vec2 node_pos(int i, int j) const { return {i * dx, j * dx}; }
};

struct MpmParams {
  int res = 64;
  double dt = 1e-4;
  Vec2 gravity{0.0, -9.8};
  int wall_width = 3;  // sticky domain boundary, in cells
  double dx() const { return 1.0 / res; }
};

struct FaultLog {
  long particle_oob = 0;        // left the valid stencil margin / domain
  long projection_failures = 0; // position correction did not clear penetration
  long tracing_reseeds = 0;     // penetration state lost locality
  long nonfinite = 0;
  std::vector<std::string> notes;

  long total() const { return particle_oob + projection_failures + tracing_reseeds + nonfinite; }
  void note(const std::string& s) {
    if (notes.size() < 64) notes.push_back(s);
  }
};

// Quadratic B-spline stencil of one particle: 3x3 nodes starting at (bi, bj).
// wx/wy are the 1D weights, dwx/dwy their derivatives w.r.t. the particle
// coordinate (world units).
struct Stencil {
  int bi = 0, bj = 0;
  double wx[3] = {0, 0, 0}, wy[3] = {0, 0, 0};
  double dwx[3] = {0, 0, 0}, dwy[3] = {0, 0, 0};
};

namespace detail {
inline void spline_1d(double xc, double inv_dx, int res, int& base, double* w, double* dw,
                      FaultLog* faults) {
  const double xs = xc * inv_dx;
  base = static_cast<int>(std::floor(xs - 0.5));
  if (base < 0 || base > res - 3) {
    if (faults) ++faults->particle_oob;
    base = std::max(0, std::min(base, res - 3));
  }
  const double fx = xs - base;
  w[0] = 0.5 * (1.5 - fx) * (1.5 - fx);
  w[1] = 0.75 - (fx - 1.0) * (fx - 1.0);
  w[2] = 0.5 * (fx - 0.5) * (fx - 0.5);
  dw[0] = -(1.5 - fx) * inv_dx;
  dw[1] = -2.0 * (fx - 1.0) * inv_dx;
  dw[2] = (fx - 0.5) * inv_dx;
}
}  // namespace detail

inline void compute_stencils(const ParticleSet& ps, const MpmParams& prm,
                             std::vector<Stencil>& out, FaultLog* faults = nullptr) {
  const double inv_dx = prm.res;
  out.resize(ps.size());
  for (size_t p = 0; p < ps.size(); ++p) {
    Stencil& st = out[p];
    detail::spline_1d(ps.x[p].x, inv_dx, prm.res, st.bi, st.wx, st.dwx, faults);
    detail::spline_1d(ps.x[p].y, inv_dx, prm.res, st.bj, st.wy, st.dwy, faults);
  }
}

// First Piola-Kirchhoff stress times F^T for the fixed-corotated solid.
inline Mat2 corotated_pf(const Mat2& f, double mu, double lam) {
  const Polar2 pd = polar_decompose(f);
  const double j = f.det();
  return (f - pd.r) * f.transposed() * (2.0 * mu) + Mat2::identity() * (lam * (j - 1.0) * j);
}

// Per-particle momentum matrix scattered by P2G: A_p = -dt V_p (4/dx^2) P F^T.
// Plastic particles carry an already-clamped F, so the elastic expression
// applies unchanged; liquids use the pressure-only law on the volume ratio.
inline void stress_momentum(const ParticleSet& ps, const MpmParams& prm, std::vector<Mat2>& out,
                            FaultLog* faults = nullptr) {
  const double dx = prm.dx();
  const double scale = -prm.dt * 4.0 / (dx * dx);
  out.resize(ps.size());
  for (size_t p = 0; p < ps.size(); ++p) {
    Mat2 pf;
    if (ps.mat[p] == Material::Liquid) {
      pf = Mat2::identity() * (ps.lam[p] * (ps.J[p] - 1.0) * ps.J[p]);
    } else {
      pf = corotated_pf(ps.F[p], ps.mu[p], ps.lam[p]);
    }
    out[p] = pf * (scale * ps.vol[p]);
    if (!all_finite(out[p])) {
      if (faults) {
        ++faults->nonfinite;
        faults->note("non-finite stress at particle " + std::to_string(p));
      }
      out[p] = Mat2::zero();
    }
  }
}

// Scatter mass and momentum to the grid. `impulse` (optional, dense) is extra
// momentum injected with this transfer; the caller owns its consume-once
// semantics.
inline void p2g(const ParticleSet& ps, const std::vector<Stencil>& st,
                const std::vector<Mat2>& stress, Grid& grid,
                const std::vector<Vec2>* impulse = nullptr) {
  grid.clear();
  for (size_t p = 0; p < ps.size(); ++p) {
    const Stencil& s = st[p];
    const Mat2 affine = ps.C[p] * ps.m[p] + stress[p];
    Vec2 mv = ps.v[p] * ps.m[p];
    if (impulse) mv += (*impulse)[p];
    for (int l = 0; l < 3; ++l) {
      for (int k = 0; k < 3; ++k) {
        const double w = s.wx[k] * s.wy[l];
        const Vec2 dpos = grid.node_pos(s.bi + k, s.bj + l) - ps.x[p];
        const size_t n = grid.idx(s.bi + k, s.bj + l);
        grid.p[n] += (mv + affine * dpos) * w;
        grid.m[n] += w * ps.m[p];
      }
    }
  }
}

// Momentum-to-velocity division plus gravity. Returns the mass epsilon used
// for the empty-node cutoff so the reverse pass can freeze the same branch.
inline double grid_op_begin(Grid& grid, const MpmParams& prm) {
  double total_mass = 0.0;
  for (double m : grid.m) total_mass += m;
  const double eps = 1e-12 * total_mass / (static_cast<double>(grid.res) * grid.res);
  const Vec2 gdt = prm.gravity * prm.dt;
  for (size_t n = 0; n < grid.m.size(); ++n) {
    grid.v[n] = grid.m[n] > eps ? grid.p[n] / grid.m[n] + gdt : Vec2::zero();
  }
  return eps;
}

// Sticky domain boundary on a fixed margin of cells.
inline void apply_domain_walls(Grid& grid, const MpmParams& prm) {
  const int w = prm.wall_width;
  for (int j = 0; j < grid.res; ++j) {
    for (int i = 0; i < grid.res; ++i) {
      if (i < w || i >= grid.res - w || j < w || j >= grid.res - w) {
        grid.v[grid.idx(i, j)] = Vec2::zero();
      }
    }
  }
}

// Gather velocities, rebuild the affine matrix, update the deformation state,
// advect. F is updated before advection.
inline void g2p(const Grid& grid, const std::vector<Stencil>& st, ParticleSet& ps,
                const MpmParams& prm, FaultLog* faults = nullptr) {
  const double dx = prm.dx();
  const double inv_dx2_4 = 4.0 / (dx * dx);
  const double lo = prm.wall_width * dx;
  const double hi = 1.0 - prm.wall_width * dx;
  for (size_t p = 0; p < ps.size(); ++p) {
    const Stencil& s = st[p];
    Vec2 v_new = Vec2::zero();
    Mat2 b = Mat2::zero();
    for (int l = 0; l < 3; ++l) {
      for (int k = 0; k < 3; ++k) {
        const double w = s.wx[k] * s.wy[l];
        const Vec2 dpos = grid.node_pos(s.bi + k, s.bj + l) - ps.x[p];
        const Vec2 vg = grid.v[grid.idx(s.bi + k, s.bj + l)];
        v_new += vg * w;
        b += Mat2::outer(vg, dpos) * w;
      }
    }
    const Mat2 c_new = b * inv_dx2_4;
    ps.v[p] = v_new;
    ps.C[p] = c_new;
    switch (ps.mat[p]) {
      case Material::Elastic:
        ps.F[p] = (Mat2::identity() + c_new * prm.dt) * ps.F[p];
        break;
      case Material::Plastic: {
        const Mat2 f_mid = (Mat2::identity() + c_new * prm.dt) * ps.F[p];
        const Svd2 sv = svd2(f_mid);
        const double lo_s = 1.0 - ps.yield_band[p], hi_s = 1.0 + ps.yield_band[p];
        ps.F[p] = svd2_reconstruct({sv.u, sv.v, clamp(sv.s0, lo_s, hi_s), clamp(sv.s1, lo_s, hi_s)});
        break;
      }
      case Material::Liquid:
        ps.J[p] *= 1.0 + prm.dt * c_new.trace();
        break;
    }
    Vec2 x_new = ps.x[p] + v_new * prm.dt;
    if (x_new.x < lo || x_new.x > hi || x_new.y < lo || x_new.y > hi) {
      x_new = {clamp(x_new.x, lo, hi), clamp(x_new.y, lo, hi)};
      if (faults) ++faults->particle_oob;
    }
    ps.x[p] = x_new;
  }
}

inline double cfl_number(const ParticleSet& ps, const MpmParams& prm) {
  double vmax = 0.0;
  for (const Vec2& v : ps.v) vmax = std::max(vmax, norm(v));
  return vmax * prm.dt / prm.dx();
}

struct CflReport {
  double number = 0.0;
  bool violation = false;
};

inline CflReport cfl_check(const ParticleSet& ps, const MpmParams& prm) {
  CflReport r;
  r.number = cfl_number(ps, prm);
  r.violation = r.number >= 0.3;
  return r;
}

// ---------------------------------------------------------------------------
// Reverse passes.
// ---------------------------------------------------------------------------

// Gradient accumulator for one MPM state plus the staging grid.
struct MpmAdjoint {
  std::vector<Vec2> x, v;
  std::vector<Mat2> F, C;
  std::vector<double> J;
  std::vector<Vec2> grid_v;   // dL/d v_g
  std::vector<Vec2> grid_p;   // dL/d p_g
  std::vector<double> grid_m; // dL/d m_g
  std::vector<Mat2> stress;   // dL/d A_p (per-particle momentum matrix)
  std::vector<Vec2> impulse;  // dL/d (pending particle impulse)

  void resize(size_t np, size_t nodes) {
    x.assign(np, Vec2::zero());
    v.assign(np, Vec2::zero());
    F.assign(np, Mat2::zero());
    C.assign(np, Mat2::zero());
    J.assign(np, 0.0);
    grid_v.assign(nodes, Vec2::zero());
    grid_p.assign(nodes, Vec2::zero());
    grid_m.assign(nodes, 0.0);
    stress.assign(np, Mat2::zero());
    impulse.assign(np, Vec2::zero());
  }
  void clear_grid() {
    std::fill(grid_v.begin(), grid_v.end(), Vec2::zero());
    std::fill(grid_p.begin(), grid_p.end(), Vec2::zero());
    std::fill(grid_m.begin(), grid_m.end(), 0.0);
    std::fill(stress.begin(), stress.end(), Mat2::zero());
  }
};

// Reverse of g2p. `ps_pre` is the particle state BEFORE the g2p call (the
// same state the forward stencils were built from); `grid` holds the final
// post-contact velocities. Consumes adj.{x,v,F,C,J} as gradients w.r.t. the
// post-step state; leaves them as gradients w.r.t. the pre-step state
// (v and C gradients reset — those fields are overwritten by g2p, and the
// pre-step values only feed the earlier p2g) and accumulates adj.grid_v.
inline void g2p_adjoint(const ParticleSet& ps_pre, const std::vector<Stencil>& st,
                        const Grid& grid, const MpmParams& prm, MpmAdjoint& adj) {
  const double dx = prm.dx();
  const double inv_dx2_4 = 4.0 / (dx * dx);
  for (size_t p = 0; p < ps_pre.size(); ++p) {
    const Stencil& s = st[p];
    // Recompute the forward gather.
    Vec2 v_new = Vec2::zero();
    Mat2 b = Mat2::zero();
    for (int l = 0; l < 3; ++l) {
      for (int k = 0; k < 3; ++k) {
        const double w = s.wx[k] * s.wy[l];
        const Vec2 dpos = grid.node_pos(s.bi + k, s.bj + l) - ps_pre.x[p];
        const Vec2 vg = grid.v[grid.idx(s.bi + k, s.bj + l)];
        v_new += vg * w;
        b += Mat2::outer(vg, dpos) * w;
      }
    }
    const Mat2 c_new = b * inv_dx2_4;

    // x_out = x_in + dt v_new (domain clamp treated as pass-through).
    Vec2 g_v = adj.v[p] + adj.x[p] * prm.dt;
    Mat2 g_c = adj.C[p];

    // Deformation update paths feed additional C gradients.
    switch (ps_pre.mat[p]) {
      case Material::Elastic: {
        const Mat2 gf = adj.F[p];
        g_c += gf * ps_pre.F[p].transposed() * prm.dt;
        adj.F[p] = (Mat2::identity() + c_new * prm.dt).transposed() * gf;
        break;
      }
      case Material::Plastic: {
        const Mat2 f_mid = (Mat2::identity() + c_new * prm.dt) * ps_pre.F[p];
        const Svd2 sv = svd2(f_mid);
        const double lo_s = 1.0 - ps_pre.yield_band[p], hi_s = 1.0 + ps_pre.yield_band[p];
        const double s0c = clamp(sv.s0, lo_s, hi_s), s1c = clamp(sv.s1, lo_s, hi_s);
        Mat2 g_mid = Mat2::zero();
        svd2_clamped_vjp(sv, s0c, s1c, (sv.s0 > lo_s && sv.s0 < hi_s) ? 1.0 : 0.0,
                         (sv.s1 > lo_s && sv.s1 < hi_s) ? 1.0 : 0.0, adj.F[p], g_mid);
        g_c += g_mid * ps_pre.F[p].transposed() * prm.dt;
        adj.F[p] = (Mat2::identity() + c_new * prm.dt).transposed() * g_mid;
        break;
      }
      case Material::Liquid: {
        // J_out = J_in (1 + dt tr C)
        const double gj = adj.J[p];
        adj.J[p] = gj * (1.0 + prm.dt * c_new.trace());
        const double t = gj * ps_pre.J[p] * prm.dt;
        g_c.a += t;
        g_c.d += t;
        break;
      }
    }

    // Gather: v_new = sum w vg; C = (4/dx^2) sum w vg dpos^T.
    const Mat2 g_b = g_c * inv_dx2_4;
    Vec2 g_x = Vec2::zero();
    for (int l = 0; l < 3; ++l) {
      for (int k = 0; k < 3; ++k) {
        const double w = s.wx[k] * s.wy[l];
        const double dwx = s.dwx[k] * s.wy[l];
        const double dwy = s.wx[k] * s.dwy[l];
        const Vec2 dpos = grid.node_pos(s.bi + k, s.bj + l) - ps_pre.x[p];
        const size_t n = grid.idx(s.bi + k, s.bj + l);
        const Vec2 vg = grid.v[n];
        adj.grid_v[n] += g_v * w + (g_b * dpos) * w;
        const double contrib = dot(g_v, vg) + ddot(g_b, Mat2::outer(vg, dpos));
        g_x.x += dwx * contrib;
        g_x.y += dwy * contrib;
        g_x -= (g_b.transposed() * vg) * w;  // dpos = node - x
      }
    }
    adj.x[p] += g_x;
    adj.v[p] = Vec2::zero();
    adj.C[p] = Mat2::zero();
  }
}

// Reverse of the sticky walls: those rows emit zero.
inline void domain_walls_adjoint(const MpmParams& prm, int res, MpmAdjoint& adj) {
  const int w = prm.wall_width;
  for (int j = 0; j < res; ++j) {
    for (int i = 0; i < res; ++i) {
      if (i < w || i >= res - w || j < w || j >= res - w) {
        adj.grid_v[static_cast<size_t>(j) * res + i] = Vec2::zero();
      }
    }
  }
}

// Reverse of grid_op_begin: v = p/m + g dt above the mass epsilon. Consumes
// adj.grid_v, fills adj.grid_p / adj.grid_m. `grid` holds the forward p and m.
inline void grid_op_adjoint(const Grid& grid, double mass_eps, MpmAdjoint& adj) {
  for (size_t n = 0; n < grid.m.size(); ++n) {
    if (grid.m[n] > mass_eps) {
      const Vec2 gv = adj.grid_v[n];
      adj.grid_p[n] += gv / grid.m[n];
      adj.grid_m[n] += -dot(gv, grid.p[n]) / (grid.m[n] * grid.m[n]);
    }
    adj.grid_v[n] = Vec2::zero();
  }
}

// Reverse of p2g. Consumes adj.grid_p / adj.grid_m; accumulates particle
// gradients (v, C, x), the stress-matrix gradients adj.stress, and the
// pending-impulse gradients.
inline void p2g_adjoint(const ParticleSet& ps, const std::vector<Stencil>& st,
                        const std::vector<Mat2>& stress, const Grid& grid, MpmAdjoint& adj,
                        const std::vector<Vec2>* impulse = nullptr) {
  for (size_t p = 0; p < ps.size(); ++p) {
    const Stencil& s = st[p];
    const Mat2 affine = ps.C[p] * ps.m[p] + stress[p];
    Vec2 mv = ps.v[p] * ps.m[p];
    if (impulse) mv += (*impulse)[p];
    Vec2 g_x = Vec2::zero(), g_v = Vec2::zero(), g_imp = Vec2::zero();
    Mat2 g_aff = Mat2::zero();
    for (int l = 0; l < 3; ++l) {
      for (int k = 0; k < 3; ++k) {
        const double w = s.wx[k] * s.wy[l];
        const double dwx = s.dwx[k] * s.wy[l];
        const double dwy = s.wx[k] * s.dwy[l];
        const Vec2 dpos = grid.node_pos(s.bi + k, s.bj + l) - ps.x[p];
        const size_t n = grid.idx(s.bi + k, s.bj + l);
        const Vec2 gp = adj.grid_p[n];
        const double gm = adj.grid_m[n];
        g_v += gp * (w * ps.m[p]);
        g_imp += gp * w;
        g_aff += Mat2::outer(gp, dpos) * w;
        const double contrib = dot(gp, mv + affine * dpos) + gm * ps.m[p];
        g_x.x += dwx * contrib;
        g_x.y += dwy * contrib;
        g_x -= (affine.transposed() * gp) * w;
      }
    }
    adj.x[p] += g_x;
    adj.v[p] += g_v;
    adj.C[p] += g_aff * ps.m[p];
    adj.stress[p] += g_aff;
    if (impulse) adj.impulse[p] += g_imp;
  }
}

// Reverse of stress_momentum: consumes adj.stress into adj.F / adj.J.
inline void stress_momentum_adjoint(const ParticleSet& ps, const MpmParams& prm, MpmAdjoint& adj) {
  const double dx = prm.dx();
  const double scale = -prm.dt * 4.0 / (dx * dx);
  for (size_t p = 0; p < ps.size(); ++p) {
    const Mat2 g_pf = adj.stress[p] * (scale * ps.vol[p]);
    if (ps.mat[p] == Material::Liquid) {
      adj.J[p] += g_pf.trace() * ps.lam[p] * (2.0 * ps.J[p] - 1.0);
    } else {
      const Mat2& f = ps.F[p];
      const Polar2 pd = polar_decompose(f);
      const double mu2 = 2.0 * ps.mu[p];
      // 2 mu (F - R) F^T term.
      adj.F[p] += g_pf * f * mu2;
      adj.F[p] += g_pf.transposed() * (f - pd.r) * mu2;
      const Mat2 g_r = g_pf * f * (-mu2);
      polar_decompose_vjp(f, pd, g_r, adj.F[p]);
      // lambda (J-1) J I term.
      const double j = f.det();
      adj.F[p] += det_grad(f) * (g_pf.trace() * ps.lam[p] * (2.0 * j - 1.0));
    }
    adj.stress[p] = Mat2::zero();
  }
}

}  // namespace softsim
