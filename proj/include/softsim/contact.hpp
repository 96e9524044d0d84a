#pragma once

// The three MPM contact models (grid-based, particle-based, forecast-based)
// against rigid SDF bodies and non-volumetric deformable colliders, with
// reaction-force ledgers and hand-written reverse passes.
//
// Conventions: d < 0 means penetration, the contact region is d < d_hat, and
// the outward normal n is the gradient of d. Discrete choices made in the
// forward pass (contact membership, nearest collider, friction-kink branch,
// projection iteration pattern) are frozen and replayed in the reverse pass.

#include <cstdint>
#include <limits>
#include <vector>

#include "softsim/math.hpp"
#include "softsim/mpm.hpp"
#include "softsim/sdf.hpp"

namespace softsim {

struct ContactParams {
  double d_hat = 1.0 / 64;   // contact threshold; defaults to one grid cell
  double mu = 0.5;           // friction coefficient
  double beta = 3.0 * 64;    // blend decay; default 3/dx
  double alpha = 0.2;        // forecast step size
  double k = 400.0;          // particle-penalty stiffness
};

enum class ContactModel : uint8_t { Grid = 0, Particle = 1, Forecast = 2 };

// ---------------------------------------------------------------------------
// Velocity transforms (the BC(.) building blocks).
// ---------------------------------------------------------------------------

// Drop the approaching normal component, decay the tangent by friction.
// Separating contacts pass through; a vanishing tangent arrests the point on
// the collider ("return v_c").
inline Vec2 bc_friction(const Vec2& v_in, const Vec2& v_c, const Vec2& n, double mu) {
  const Vec2 v_rel = v_in - v_c;
  const double vn = dot(v_rel, n);
  if (vn >= 0.0) return v_in;
  const Vec2 v_t = v_rel - n * vn;
  const double nt = norm(v_t);
  if (nt == 0.0) return v_c;
  const double fac = std::max(0.0, 1.0 - mu * (-vn) / nt);
  return v_t * fac + v_c;
}

// Reverse of bc_friction. The max(0,.) kink uses the clamped branch's zero
// derivative.
inline void bc_friction_vjp(const Vec2& v_in, const Vec2& v_c, const Vec2& n, double mu,
                            const Vec2& g_out, Vec2& g_vin, Vec2& g_vc, Vec2& g_n) {
  const Vec2 v_rel = v_in - v_c;
  const double vn = dot(v_rel, n);
  if (vn >= 0.0) {
    g_vin += g_out;
    return;
  }
  const Vec2 v_t = v_rel - n * vn;
  const double nt = norm(v_t);
  if (nt == 0.0) {
    g_vc += g_out;
    return;
  }
  const double fac = std::max(0.0, 1.0 - mu * (-vn) / nt);

  Vec2 g_vt = g_out * fac;
  g_vc += g_out;
  const double g_fac = dot(g_out, v_t);
  double g_vn = 0.0;
  if (fac > 0.0) {
    // fac = 1 - mu (-vn) / nt
    g_vn += g_fac * (mu / nt);
    const double g_nt = g_fac * (mu * (-vn) / (nt * nt));
    g_vt += v_t * (g_nt / nt);
  }
  // v_t = v_rel - vn n
  Vec2 g_vrel = g_vt;
  g_vn += -dot(g_vt, n);
  g_n -= g_vt * vn;
  // vn = dot(v_rel, n)
  g_vrel += n * g_vn;
  g_n += v_rel * g_vn;
  // v_rel = v_in - v_c
  g_vin += g_vrel;
  g_vc -= g_vrel;
}

// s = min(exp(-beta d), 1); out = s v_mod + (1-s) v_in.
inline Vec2 smooth_blend(const Vec2& v_mod, const Vec2& v_in, double d, double beta) {
  const double s = d <= 0.0 ? 1.0 : std::exp(-beta * d);
  return v_mod * s + v_in * (1.0 - s);
}

inline void smooth_blend_vjp(const Vec2& v_mod, const Vec2& v_in, double d, double beta,
                             const Vec2& g_out, Vec2& g_vmod, Vec2& g_vin, double& g_d) {
  const double s = d <= 0.0 ? 1.0 : std::exp(-beta * d);
  g_vmod += g_out * s;
  g_vin += g_out * (1.0 - s);
  if (d > 0.0) {
    g_d += dot(g_out, v_mod - v_in) * (-beta * s);
  }
}

// ---------------------------------------------------------------------------
// Colliders.
// ---------------------------------------------------------------------------

// Rigid collider snapshot used during one manipulator interval (the body is
// frozen across the K MPM substeps). pose.p is the center of mass. The
// per-substep ledger and the adjoint accumulators live here.
struct RigidCollider {
  const SdfHandle* sdf = nullptr;
  Pose2 pose;
  Vec2 vel;          // COM linear velocity
  double omega = 0.0;

  // Per-substep reaction ledger (force, torque about COM).
  Vec2 force;
  double torque = 0.0;

  // Adjoint accumulators (filled by the reverse passes).
  Vec2 g_pos;
  double g_th = 0.0;
  Vec2 g_vel;
  double g_omega = 0.0;
  // Gradients w.r.t. this substep's ledger entries, supplied by the caller
  // before the contact reverse pass.
  Vec2 g_force;
  double g_torque = 0.0;

  void clear_ledger() {
    force = Vec2::zero();
    torque = 0.0;
  }
  void clear_grads() {
    g_pos = Vec2::zero();
    g_th = 0.0;
    g_vel = Vec2::zero();
    g_omega = 0.0;
    g_force = Vec2::zero();
    g_torque = 0.0;
  }
};

// Non-volumetric deformable collider interface (implemented by the cloth
// penetration-tracing module). Queries are per MPM particle because the
// signed side of a zero-thickness mesh is particle state.
class DeformableCollider {
 public:
  virtual ~DeformableCollider() = default;
  // Signed distance and outward normal for particle `p` at position x (which
  // may be a projection iterate, not the particle's stored position).
  // Returns false when the particle is not tracked near this collider.
  virtual bool query(size_t p, const Vec2& x, double& d, Vec2& n) const = 0;
  // Material velocity of the nearest surface point.
  virtual Vec2 velocity_at(size_t p, const Vec2& x) const = 0;
  // Distribute an impulse applied at the contact surface to the ledger.
  virtual void add_impulse(size_t p, const Vec2& x, const Vec2& imp) = 0;

  // Reverse passes; mirror signatures above. g_x accumulates dL/dx.
  virtual void query_vjp(size_t p, const Vec2& x, double g_d, const Vec2& g_n, Vec2& g_x) = 0;
  virtual void velocity_vjp(size_t p, const Vec2& x, const Vec2& g_vc, Vec2& g_x) = 0;
  // Pulls the stored ledger gradient back onto the impulse (and x).
  virtual void impulse_vjp(size_t p, const Vec2& x, const Vec2& imp, Vec2& g_imp, Vec2& g_x) = 0;

  virtual void clear_ledger() {}
};

struct ColliderSet {
  std::vector<RigidCollider> rigid;
  std::vector<DeformableCollider*> deformable;

  void clear_ledgers() {
    for (auto& b : rigid) b.clear_ledger();
    for (auto* c : deformable) c->clear_ledger();
  }
  bool empty() const { return rigid.empty() && deformable.empty(); }
};

// Result of a nearest-collider query.
struct ContactHit {
  bool any = false;
  double d = std::numeric_limits<double>::infinity();
  Vec2 n{1.0, 0.0};
  int rigid_idx = -1;  // >= 0: rigid body; else deformable
  int cloth_idx = -1;
  SdfHit sdf;          // saved rigid query (valid when rigid_idx >= 0)
};

// Nearest collider over rigid bodies and (for particle queries) deformables.
// Ties break toward the lowest rigid index, then the lowest deformable index,
// so replays are exact.
inline ContactHit nearest_collider(const ColliderSet& cs, const Vec2& x,
                                   ptrdiff_t particle = -1) {
  ContactHit hit;
  for (size_t b = 0; b < cs.rigid.size(); ++b) {
    const SdfHit h = sdf_query(*cs.rigid[b].sdf, x, cs.rigid[b].pose);
    if (h.d < hit.d) {
      hit.any = true;
      hit.d = h.d;
      hit.n = h.n;
      hit.rigid_idx = static_cast<int>(b);
      hit.cloth_idx = -1;
      hit.sdf = h;
    }
  }
  if (particle >= 0) {
    for (size_t c = 0; c < cs.deformable.size(); ++c) {
      double d;
      Vec2 n;
      if (cs.deformable[c]->query(static_cast<size_t>(particle), x, d, n) && d < hit.d) {
        hit.any = true;
        hit.d = d;
        hit.n = n;
        hit.rigid_idx = -1;
        hit.cloth_idx = static_cast<int>(c);
      }
    }
  }
  return hit;
}

// Velocity of the collider material at the contact point x_b = x - d n.
inline Vec2 contact_velocity(const ColliderSet& cs, const ContactHit& hit, const Vec2& x,
                             ptrdiff_t particle = -1) {
  if (hit.rigid_idx >= 0) {
    const RigidCollider& b = cs.rigid[hit.rigid_idx];
    const Vec2 r = x - hit.n * hit.d - b.pose.p;
    return b.vel + perp(r) * b.omega;
  }
  return cs.deformable[hit.cloth_idx]->velocity_at(static_cast<size_t>(particle), x);
}

// Reverse of contact_velocity. Accumulates body-state gradients in place and
// returns the (g_x, g_d, g_n) contributions for the caller to route through
// the SDF reverse pass.
inline void contact_velocity_vjp(ColliderSet& cs, const ContactHit& hit, const Vec2& x,
                                 const Vec2& g_vc, Vec2& g_x, double& g_d, Vec2& g_n,
                                 ptrdiff_t particle = -1) {
  if (hit.rigid_idx >= 0) {
    RigidCollider& b = cs.rigid[hit.rigid_idx];
    const Vec2 r = x - hit.n * hit.d - b.pose.p;
    b.g_vel += g_vc;
    b.g_omega += dot(g_vc, perp(r));
    // v_c = vel + omega perp(r), r = x - d n - com
    const Vec2 g_r = -perp(g_vc) * b.omega;  // perp^T = -perp
    g_x += g_r;
    g_d += -dot(g_r, hit.n);
    g_n += -g_r * hit.d;
    b.g_pos -= g_r;
  } else {
    cs.deformable[hit.cloth_idx]->velocity_vjp(static_cast<size_t>(particle), x, g_vc, g_x);
  }
}

// Record an impulse delivered to the collider at contact point x_b = x - d n.
inline void ledger_add(ColliderSet& cs, const ContactHit& hit, const Vec2& x, const Vec2& imp,
                       double dt, ptrdiff_t particle = -1) {
  if (hit.rigid_idx >= 0) {
    RigidCollider& b = cs.rigid[hit.rigid_idx];
    const Vec2 r = x - hit.n * hit.d - b.pose.p;
    b.force += imp / dt;
    b.torque += cross(r, imp) / dt;
  } else {
    cs.deformable[hit.cloth_idx]->add_impulse(static_cast<size_t>(particle), x, imp);
  }
}

// Reverse of ledger_add: converts the stored wrench gradients into an impulse
// gradient plus (g_x, g_d, g_n) contributions.
inline void ledger_vjp(ColliderSet& cs, const ContactHit& hit, const Vec2& x, const Vec2& imp,
                       double dt, Vec2& g_imp, Vec2& g_x, double& g_d, Vec2& g_n,
                       ptrdiff_t particle = -1) {
  if (hit.rigid_idx >= 0) {
    RigidCollider& b = cs.rigid[hit.rigid_idx];
    const Vec2 r = x - hit.n * hit.d - b.pose.p;
    g_imp += b.g_force / dt;
    // torque = cross(r, imp)/dt
    g_imp += perp(r) * (b.g_torque / dt);
    const Vec2 g_r = Vec2{imp.y, -imp.x} * (b.g_torque / dt);
    g_x += g_r;
    g_d += -dot(g_r, hit.n);
    g_n += -g_r * hit.d;
    b.g_pos -= g_r;
  } else {
    cs.deformable[hit.cloth_idx]->impulse_vjp(static_cast<size_t>(particle), x, imp, g_imp, g_x);
  }
}

// Route (g_d, g_n, g_x-partial) of a nearest-collider query back to the point
// and the owning collider's state.
inline void nearest_collider_vjp(ColliderSet& cs, const ContactHit& hit, const Vec2& x,
                                 double g_d, const Vec2& g_n, Vec2& g_x, ptrdiff_t particle = -1) {
  if (hit.rigid_idx >= 0) {
    RigidCollider& b = cs.rigid[hit.rigid_idx];
    sdf_query_vjp(hit.sdf, x, b.pose, g_d, g_n, g_x, b.g_pos, b.g_th);
  } else {
    cs.deformable[hit.cloth_idx]->query_vjp(static_cast<size_t>(particle), x, g_d, g_n, g_x);
  }
}

// ---------------------------------------------------------------------------
// Legal position correction.
// ---------------------------------------------------------------------------

// Advect a trial point with v_mod; while it lands inside a collider, project
// it along the distance gradient (at most `max_iters` times) and convert the
// displacement back into a velocity correction.
inline Vec2 legal_position_correction(const ColliderSet& cs, const Vec2& x, const Vec2& v_mod,
                                      double dt, ptrdiff_t particle, FaultLog* faults,
                                      int max_iters = 3) {
  const Vec2 x_trial = x + v_mod * dt;
  Vec2 xi = x_trial;
  for (int it = 0; it < max_iters; ++it) {
    const ContactHit h = nearest_collider(cs, xi, particle);
    if (!h.any || h.d >= 0.0) break;
    xi = xi - h.n * h.d;
    if (it == max_iters - 1) {
      const ContactHit check = nearest_collider(cs, xi, particle);
      if (check.any && check.d < 0.0 && faults) ++faults->projection_failures;
    }
  }
  return v_mod + (xi - x_trial) / dt;
}

// Reverse of legal_position_correction. Replays the projection chain and
// backpropagates through each frozen iterate. Consumes g_out; accumulates
// into g_x (particle position) and g_vmod.
inline void legal_position_correction_vjp(ColliderSet& cs, const Vec2& x, const Vec2& v_mod,
                                          double dt, ptrdiff_t particle, const Vec2& g_out,
                                          Vec2& g_x, Vec2& g_vmod, int max_iters = 3) {
  const Vec2 x_trial = x + v_mod * dt;
  // Replay the forward iterate chain.
  Vec2 iterates[4];
  ContactHit hits[3];
  int m = 0;
  iterates[0] = x_trial;
  for (int it = 0; it < max_iters; ++it) {
    const ContactHit h = nearest_collider(cs, iterates[m], particle);
    if (!h.any || h.d >= 0.0) break;
    hits[m] = h;
    iterates[m + 1] = iterates[m] - h.n * h.d;
    ++m;
  }
  // out = v_mod + (x_m - x_trial)/dt
  g_vmod += g_out;
  Vec2 g_xi = g_out / dt;         // w.r.t. final iterate
  Vec2 g_xtrial = -g_out / dt;    // explicit x_trial term
  for (int it = m - 1; it >= 0; --it) {
    // x_{i+1} = x_i - d(x_i) n(x_i)
    const ContactHit& h = hits[it];
    Vec2 g_prev = g_xi;
    const double g_d = -dot(g_xi, h.n);
    const Vec2 g_n = -g_xi * h.d;
    nearest_collider_vjp(cs, h, iterates[it], g_d, g_n, g_prev, particle);
    g_xi = g_prev;
  }
  g_xtrial += g_xi;
  // x_trial = x + v_mod dt
  g_x += g_xtrial;
  g_vmod += g_xtrial * dt;
}

// ---------------------------------------------------------------------------
// Grid-based model.
// ---------------------------------------------------------------------------

// Per-node velocity conditioning against rigid bodies within d_hat. The
// reaction is the node momentum change: F = -sum m_node dv / dt.
inline void grid_contact(Grid& grid, ColliderSet& cs, const ContactParams& cp, double dt) {
  if (cs.rigid.empty()) return;
  for (int j = 0; j < grid.res; ++j) {
    for (int i = 0; i < grid.res; ++i) {
      const size_t idx = grid.idx(i, j);
      if (grid.m[idx] <= 0.0) continue;
      const Vec2 xn = grid.node_pos(i, j);
      const ContactHit hit = nearest_collider(cs, xn);
      if (!hit.any || hit.d >= cp.d_hat || hit.rigid_idx < 0) continue;
      const Vec2 v_hat = grid.v[idx];
      const Vec2 v_c = contact_velocity(cs, hit, xn);
      const Vec2 v1 = bc_friction(v_hat, v_c, hit.n, cp.mu);
      const Vec2 v2 = smooth_blend(v1, v_hat, hit.d, cp.beta);
      grid.v[idx] = v2;
      const Vec2 imp = (v_hat - v2) * grid.m[idx];  // minus the node momentum change
      ledger_add(cs, hit, xn, imp, dt);
    }
  }
}

// Reverse of grid_contact: consumes adj.grid_v (w.r.t. post-contact v) into
// pre-contact gradients plus body-state/wrench gradients. adj.grid_m picks up
// the ledger's mass dependence.
inline void grid_contact_adjoint(const Grid& grid_pre, ColliderSet& cs, const ContactParams& cp,
                                 double dt, MpmAdjoint& adj) {
  if (cs.rigid.empty()) return;
  for (int j = 0; j < grid_pre.res; ++j) {
    for (int i = 0; i < grid_pre.res; ++i) {
      const size_t idx = grid_pre.idx(i, j);
      if (grid_pre.m[idx] <= 0.0) continue;
      const Vec2 xn = grid_pre.node_pos(i, j);
      const ContactHit hit = nearest_collider(cs, xn);
      if (!hit.any || hit.d >= cp.d_hat || hit.rigid_idx < 0) continue;
      const Vec2 v_hat = grid_pre.v[idx];
      const Vec2 v_c = contact_velocity(cs, hit, xn);
      const Vec2 v1 = bc_friction(v_hat, v_c, hit.n, cp.mu);
      const Vec2 v2 = smooth_blend(v1, v_hat, hit.d, cp.beta);
      const Vec2 imp = (v_hat - v2) * grid_pre.m[idx];

      const Vec2 g_v2_direct = adj.grid_v[idx];
      // Ledger path: imp = (v_hat - v2) m.
      Vec2 g_imp = Vec2::zero(), g_xn = Vec2::zero(), g_n = Vec2::zero();
      double g_d = 0.0;
      ledger_vjp(cs, hit, xn, imp, dt, g_imp, g_xn, g_d, g_n);
      adj.grid_m[idx] += dot(g_imp, v_hat - v2);
      Vec2 g_vhat = g_imp * grid_pre.m[idx];
      const Vec2 g_v2 = g_v2_direct - g_imp * grid_pre.m[idx];

      // Blend then friction.
      Vec2 g_v1 = Vec2::zero(), g_vc = Vec2::zero();
      smooth_blend_vjp(v1, v_hat, hit.d, cp.beta, g_v2, g_v1, g_vhat, g_d);
      bc_friction_vjp(v_hat, v_c, hit.n, cp.mu, g_v1, g_vhat, g_vc, g_n);
      contact_velocity_vjp(cs, hit, xn, g_vc, g_xn, g_d, g_n);
      nearest_collider_vjp(cs, hit, xn, g_d, g_n, g_xn);
      // Node positions are fixed; g_xn stops here.
      adj.grid_v[idx] = g_vhat;
    }
  }
}

// ---------------------------------------------------------------------------
// Particle-based model.
// ---------------------------------------------------------------------------

// Penalty momentum -k d n dt for penetrating particles, injected into the
// particles' P2G scatter. Returns the dense impulse array; the equal and
// opposite impulse goes to the ledger.
inline void particle_contact(const ParticleSet& ps, ColliderSet& cs, const ContactParams& cp,
                             double dt, std::vector<Vec2>& penalty) {
  penalty.assign(ps.size(), Vec2::zero());
  if (cs.empty()) return;
  for (size_t p = 0; p < ps.size(); ++p) {
    const ContactHit hit = nearest_collider(cs, ps.x[p], static_cast<ptrdiff_t>(p));
    if (!hit.any || hit.d >= 0.0) continue;
    const Vec2 pen = hit.n * (-cp.k * hit.d * dt);
    penalty[p] = pen;
    ledger_add(cs, hit, ps.x[p], -pen, dt, static_cast<ptrdiff_t>(p));
  }
}

// Reverse of particle_contact: consumes adj.impulse (dL/d penalty) and the
// body wrench gradients; accumulates adj.x and collider-state gradients.
inline void particle_contact_adjoint(const ParticleSet& ps, ColliderSet& cs,
                                     const ContactParams& cp, double dt, MpmAdjoint& adj) {
  if (cs.empty()) return;
  for (size_t p = 0; p < ps.size(); ++p) {
    const ContactHit hit = nearest_collider(cs, ps.x[p], static_cast<ptrdiff_t>(p));
    if (!hit.any || hit.d >= 0.0) continue;
    const Vec2 pen = hit.n * (-cp.k * hit.d * dt);

    Vec2 g_pen = adj.impulse[p];
    adj.impulse[p] = Vec2::zero();
    // Ledger received -pen at this particle's contact point.
    Vec2 g_neg_pen = Vec2::zero(), g_x = Vec2::zero(), g_n = Vec2::zero();
    double g_d = 0.0;
    ledger_vjp(cs, hit, ps.x[p], -pen, dt, g_neg_pen, g_x, g_d, g_n, static_cast<ptrdiff_t>(p));
    g_pen -= g_neg_pen;
    // pen = -k d dt n
    g_d += dot(g_pen, hit.n) * (-cp.k * dt);
    g_n += g_pen * (-cp.k * hit.d * dt);
    nearest_collider_vjp(cs, hit, ps.x[p], g_d, g_n, g_x, static_cast<ptrdiff_t>(p));
    adj.x[p] += g_x;
  }
}

// ---------------------------------------------------------------------------
// Forecast-based model.
// ---------------------------------------------------------------------------

struct ForecastStats {
  int contacts = 0;            // particles inside the d_hat band
  double objective_before = 0; // ||W^T vhat - v_tgt||^2 over contact particles
  double objective_after = 0;  // same after the one-step update
};

// One-step gradient-descent conditioning of the grid velocities toward
// per-particle contact targets. Bodies receive m_p (v_init - v_tgt).
inline ForecastStats forecast_contact(Grid& grid, const ParticleSet& ps,
                                      const std::vector<Stencil>& st, ColliderSet& cs,
                                      const ContactParams& cp, double dt, FaultLog* faults) {
  ForecastStats stats;
  if (cs.empty()) return stats;
  std::vector<size_t> active;
  std::vector<Vec2> residual;  // v_init - v_tgt
  std::vector<Vec2> target;
  for (size_t p = 0; p < ps.size(); ++p) {
    const ContactHit hit = nearest_collider(cs, ps.x[p], static_cast<ptrdiff_t>(p));
    if (!hit.any || hit.d >= cp.d_hat) continue;
    // Forecast gather of the would-be particle velocity.
    const Stencil& s = st[p];
    Vec2 v_init = Vec2::zero();
    for (int l = 0; l < 3; ++l)
      for (int k = 0; k < 3; ++k)
        v_init += grid.v[grid.idx(s.bi + k, s.bj + l)] * (s.wx[k] * s.wy[l]);

    const Vec2 v_c = contact_velocity(cs, hit, ps.x[p], static_cast<ptrdiff_t>(p));
    const Vec2 v1 = bc_friction(v_init, v_c, hit.n, cp.mu);
    const Vec2 v2 = smooth_blend(v1, v_init, hit.d, cp.beta);
    const Vec2 v_tgt = legal_position_correction(cs, ps.x[p], v2, dt, static_cast<ptrdiff_t>(p), faults);

    active.push_back(p);
    residual.push_back(v_init - v_tgt);
    target.push_back(v_tgt);
    stats.objective_before += norm_sq(v_init - v_tgt);
    ledger_add(cs, hit, ps.x[p], (v_init - v_tgt) * ps.m[p], dt, static_cast<ptrdiff_t>(p));
  }
  stats.contacts = static_cast<int>(active.size());
  if (active.empty()) return stats;

  // v_g -= alpha W residual
  for (size_t a = 0; a < active.size(); ++a) {
    const Stencil& s = st[active[a]];
    for (int l = 0; l < 3; ++l)
      for (int k = 0; k < 3; ++k)
        grid.v[grid.idx(s.bi + k, s.bj + l)] -= residual[a] * (cp.alpha * s.wx[k] * s.wy[l]);
  }

  // Post-update objective against the fixed targets.
  for (size_t a = 0; a < active.size(); ++a) {
    const Stencil& s = st[active[a]];
    Vec2 v_after = Vec2::zero();
    for (int l = 0; l < 3; ++l)
      for (int k = 0; k < 3; ++k)
        v_after += grid.v[grid.idx(s.bi + k, s.bj + l)] * (s.wx[k] * s.wy[l]);
    stats.objective_after += norm_sq(v_after - target[a]);
  }
  return stats;
}

// Reverse of forecast_contact. `grid_pre` holds the pre-contact velocities
// (v-hat). Consumes adj.grid_v (w.r.t. the post-contact grid) and the bodies'
// ledger-wrench gradients; leaves adj.grid_v as gradients w.r.t. v-hat and
// accumulates adj.x plus collider-state gradients.
inline void forecast_contact_adjoint(const Grid& grid_pre, const ParticleSet& ps,
                                     const std::vector<Stencil>& st, ColliderSet& cs,
                                     const ContactParams& cp, double dt, MpmAdjoint& adj) {
  if (cs.empty()) return;
  // Gradients w.r.t. the post-contact grid, frozen before accumulation.
  const std::vector<Vec2> g_post = adj.grid_v;
  for (size_t p = 0; p < ps.size(); ++p) {
    const ContactHit hit = nearest_collider(cs, ps.x[p], static_cast<ptrdiff_t>(p));
    if (!hit.any || hit.d >= cp.d_hat) continue;
    const Stencil& s = st[p];
    // Replay the forward chain from the pre-contact grid.
    Vec2 v_init = Vec2::zero();
    for (int l = 0; l < 3; ++l)
      for (int k = 0; k < 3; ++k)
        v_init += grid_pre.v[grid_pre.idx(s.bi + k, s.bj + l)] * (s.wx[k] * s.wy[l]);
    const Vec2 v_c = contact_velocity(cs, hit, ps.x[p], static_cast<ptrdiff_t>(p));
    const Vec2 v1 = bc_friction(v_init, v_c, hit.n, cp.mu);
    const Vec2 v2 = smooth_blend(v1, v_init, hit.d, cp.beta);
    const Vec2 v_tgt = legal_position_correction(cs, ps.x[p], v2, dt, static_cast<ptrdiff_t>(p), nullptr);
    const Vec2 res = v_init - v_tgt;

    // Residual gradient: the -alpha W scatter plus the ledger impulse path.
    Vec2 g_res = Vec2::zero();
    Vec2 g_x = Vec2::zero();
    for (int l = 0; l < 3; ++l) {
      for (int k = 0; k < 3; ++k) {
        const double w = s.wx[k] * s.wy[l];
        const double dwx = s.dwx[k] * s.wy[l];
        const double dwy = s.wx[k] * s.dwy[l];
        const Vec2 gv = g_post[grid_pre.idx(s.bi + k, s.bj + l)];
        g_res -= gv * (cp.alpha * w);
        // Scatter weights depend on the particle position.
        const double c = -cp.alpha * dot(gv, res);
        g_x.x += dwx * c;
        g_x.y += dwy * c;
      }
    }
    Vec2 g_imp = Vec2::zero(), g_n = Vec2::zero();
    double g_d = 0.0;
    ledger_vjp(cs, hit, ps.x[p], res * ps.m[p], dt, g_imp, g_x, g_d, g_n,
               static_cast<ptrdiff_t>(p));
    g_res += g_imp * ps.m[p];

    // res = v_init - v_tgt.
    Vec2 g_vinit = g_res;
    const Vec2 g_vtgt = -g_res;
    // v_tgt = correction(x, v2).
    Vec2 g_v2 = Vec2::zero();
    legal_position_correction_vjp(cs, ps.x[p], v2, dt, static_cast<ptrdiff_t>(p), g_vtgt, g_x, g_v2);
    // v2 = blend(v1, v_init, d).
    Vec2 g_v1 = Vec2::zero();
    smooth_blend_vjp(v1, v_init, hit.d, cp.beta, g_v2, g_v1, g_vinit, g_d);
    // v1 = bc(v_init, v_c, n).
    Vec2 g_vc = Vec2::zero();
    bc_friction_vjp(v_init, v_c, hit.n, cp.mu, g_v1, g_vinit, g_vc, g_n);
    contact_velocity_vjp(cs, hit, ps.x[p], g_vc, g_x, g_d, g_n, static_cast<ptrdiff_t>(p));
    nearest_collider_vjp(cs, hit, ps.x[p], g_d, g_n, g_x, static_cast<ptrdiff_t>(p));

    // v_init = sum w v-hat: scatter back, including the weight-position path.
    for (int l = 0; l < 3; ++l) {
      for (int k = 0; k < 3; ++k) {
        const double w = s.wx[k] * s.wy[l];
        const double dwx = s.dwx[k] * s.wy[l];
        const double dwy = s.wx[k] * s.dwy[l];
        const size_t n = grid_pre.idx(s.bi + k, s.bj + l);
        adj.grid_v[n] += g_vinit * w;
        const double c = dot(g_vinit, grid_pre.v[n]);
        g_x.x += dwx * c;
        g_x.y += dwy * c;
      }
    }
    adj.x[p] += g_x;
  }
}

}  // namespace softsim
