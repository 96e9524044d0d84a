#pragma once
// Mass-spring rope dynamics on a segment mesh: Hookean stretch springs per
// face, angle springs at interior vertices, viscous damping, symplectic Euler.
// Control vertices follow prescribed velocities and ignore forces.

#include <algorithm>
#include <limits>
#include <stdexcept>

#include "tracing.hpp"

namespace softsim {

struct BendTriple {
  int u = -1, v = -1, w = -1;  // chain u - v - w, spring acts on the turn at v
};

struct ClothParams {
  double ks = 500.0;    // stretch stiffness, force per unit extension
  double kb = 1e-4;     // bending stiffness, energy per unit turn
  double damping = 0.0; // viscous rate (1/time)
  Vec2 gravity;
};

struct ClothState {
  ClothMesh mesh;
  ClothParams prm;
  std::vector<uint8_t> is_control;  // per vertex
  std::vector<int> control;         // controlled vertex ids, ascending
  std::vector<BendTriple> bends;

  void set_control(std::vector<int> ids) {
    std::sort(ids.begin(), ids.end());
    is_control.assign(mesh.vcount(), 0);
    for (int v : ids) {
      if (v < 0 || v >= mesh.vcount()) throw std::runtime_error("control vertex out of range");
      if (is_control[v]) throw std::runtime_error("duplicate control vertex");
      is_control[v] = 1;
    }
    control = std::move(ids);
  }

  void init() {
    if (prm.ks < 0.0 || prm.kb < 0.0 || prm.damping < 0.0)
      throw std::runtime_error("cloth stiffness and damping must be nonnegative");
    if (is_control.empty()) is_control.assign(mesh.vcount(), 0);
    bends = find_bend_triples(mesh);
  }

  static std::vector<BendTriple> find_bend_triples(const ClothMesh& m) {
    std::vector<std::array<int, 2>> at_vertex(m.vcount(), {-1, -1});
    for (int f = 0; f < m.fcount(); ++f)
      for (int k = 0; k < 2; ++k) {
        auto& slots = at_vertex[m.faces[f][k]];
        (slots[0] < 0 ? slots[0] : slots[1]) = f;
      }
    std::vector<BendTriple> out;
    for (int v = 0; v < m.vcount(); ++v) {
      const auto& slots = at_vertex[v];
      if (slots[0] < 0 || slots[1] < 0) continue;
      auto other = [&](int f) { return m.faces[f][0] == v ? m.faces[f][1] : m.faces[f][0]; };
      out.push_back({other(slots[0]), v, other(slots[1])});
    }
    return out;
  }
};

// Vertex masses from a uniform line density: each vertex owns half of every
// incident segment's rest length.
inline void assign_line_density(ClothMesh& m, double density) {
  std::fill(m.mass.begin(), m.mass.end(), 0.0);
  for (int f = 0; f < m.fcount(); ++f) {
    const double half = 0.5 * density * m.rest_len[f];
    m.mass[m.faces[f][0]] += half;
    m.mass[m.faces[f][1]] += half;
  }
}

// Explicit integration is stable well below sqrt(m/ks); half that is the
// configured ceiling.
inline double cloth_stable_dt(const ClothState& st) {
  double m_min = std::numeric_limits<double>::infinity();
  for (int v = 0; v < st.mesh.vcount(); ++v)
    if (!st.is_control[v]) m_min = std::min(m_min, st.mesh.mass[v]);
  if (!std::isfinite(m_min) || st.prm.ks <= 0.0) return std::numeric_limits<double>::infinity();
  return 0.5 * std::sqrt(m_min / st.prm.ks);
}

inline void validate_cloth_dt(const ClothState& st, double dt) {
  if (dt >= cloth_stable_dt(st)) throw std::runtime_error("cloth step too large for stiffness");
}

// Elastic (stretch + bend) forces only; damping, gravity, and external input
// are applied by the integrator.
inline void cloth_elastic_forces(const ClothState& st, std::vector<Vec2>& force) {
  const ClothMesh& m = st.mesh;
  force.assign(m.vcount(), Vec2::zero());
  for (int f = 0; f < m.fcount(); ++f) {
    const int a = m.faces[f][0], b = m.faces[f][1];
    const Vec2 e = m.verts[b] - m.verts[a];
    const double l = norm(e);
    if (l <= 0.0) continue;
    const Vec2 pull = e * (st.prm.ks * (l - m.rest_len[f]) / l);
    force[a] += pull;
    force[b] -= pull;
  }
  for (const BendTriple& t : st.bends) {
    const Vec2 e1 = m.verts[t.v] - m.verts[t.u];
    const Vec2 e2 = m.verts[t.w] - m.verts[t.v];
    const double l1 = norm(e1), l2 = norm(e2);
    if (l1 <= 0.0 || l2 <= 0.0) continue;
    const Vec2 t1 = e1 / l1, t2 = e2 / l2;
    const double s = dot(t1, t2);
    const Vec2 fu = (t2 - t1 * s) * (-st.prm.kb / l1);
    const Vec2 fw = (t1 - t2 * s) * (st.prm.kb / l2);
    force[t.u] += fu;
    force[t.w] += fw;
    force[t.v] -= fu + fw;
  }
}

inline double cloth_energy(const ClothState& st) {
  const ClothMesh& m = st.mesh;
  double e = 0.0;
  for (int f = 0; f < m.fcount(); ++f) {
    const double c = norm(m.verts[m.faces[f][1]] - m.verts[m.faces[f][0]]) - m.rest_len[f];
    e += 0.5 * st.prm.ks * c * c;
  }
  for (const BendTriple& t : st.bends) {
    const Vec2 e1 = m.verts[t.v] - m.verts[t.u];
    const Vec2 e2 = m.verts[t.w] - m.verts[t.v];
    const double l1 = norm(e1), l2 = norm(e2);
    if (l1 > 0.0 && l2 > 0.0) e += st.prm.kb * (1.0 - dot(e1, e2) / (l1 * l2));
  }
  for (int v = 0; v < m.vcount(); ++v) e += 0.5 * m.mass[v] * norm_sq(m.vel[v]);
  return e;
}

// ctrl_vel is aligned with st.control; ext_force may be empty (treated as 0).
inline void cloth_step(ClothState& st, const std::vector<Vec2>& ext_force,
                       const std::vector<Vec2>& ctrl_vel, double dt) {
  ClothMesh& m = st.mesh;
  thread_local std::vector<Vec2> force;
  cloth_elastic_forces(st, force);
  for (int v = 0; v < m.vcount(); ++v) {
    if (st.is_control[v]) continue;
    Vec2 f = force[v] + st.prm.gravity * m.mass[v] - m.vel[v] * (st.prm.damping * m.mass[v]);
    if (!ext_force.empty()) f += ext_force[v];
    m.vel[v] += f * (dt / m.mass[v]);
    m.verts[v] += m.vel[v] * dt;
  }
  for (size_t k = 0; k < st.control.size(); ++k) {
    const int v = st.control[k];
    m.vel[v] = ctrl_vel[k];
    m.verts[v] += m.vel[v] * dt;
  }
}

struct ClothGrad {
  std::vector<Vec2> verts, vel;

  void resize(int n) {
    verts.assign(n, Vec2::zero());
    vel.assign(n, Vec2::zero());
  }
};

// Pulls `weight` back through cloth_elastic_forces: g_x += (dF/dx)^T weight.
inline void cloth_elastic_vjp(const ClothState& st, const std::vector<Vec2>& weight,
                              std::vector<Vec2>& g_x) {
  const ClothMesh& m = st.mesh;
  for (int f = 0; f < m.fcount(); ++f) {
    const int a = m.faces[f][0], b = m.faces[f][1];
    const Vec2 e = m.verts[b] - m.verts[a];
    const double l = norm(e);
    if (l <= 0.0) continue;
    const Vec2 th = e / l;
    const double c_over_l = (l - m.rest_len[f]) / l;
    const Vec2 u = weight[a] - weight[b];
    const Vec2 g_e = (th * ((1.0 - c_over_l) * dot(th, u)) + u * c_over_l) * st.prm.ks;
    g_x[b] += g_e;
    g_x[a] -= g_e;
  }
  for (const BendTriple& t : st.bends) {
    const Vec2 e1 = m.verts[t.v] - m.verts[t.u];
    const Vec2 e2 = m.verts[t.w] - m.verts[t.v];
    const double l1 = norm(e1), l2 = norm(e2);
    if (l1 <= 0.0 || l2 <= 0.0) continue;
    const Vec2 t1 = e1 / l1, t2 = e2 / l2;
    const double s = dot(t1, t2);
    const double kb = st.prm.kb;
    const Vec2 fu = (t2 - t1 * s) * (-kb / l1);
    const Vec2 fw = (t1 - t2 * s) * (kb / l2);
    const Vec2 au = weight[t.u] - weight[t.v];
    const Vec2 aw = weight[t.w] - weight[t.v];
    Vec2 g_t1 = au * (kb * s / l1) + aw * (kb / l2);
    Vec2 g_t2 = au * (-kb / l1) + aw * (-kb * s / l2);
    const double g_s = kb / l1 * dot(t1, au) - kb / l2 * dot(t2, aw);
    double g_l1 = -dot(fu, au) / l1;
    double g_l2 = -dot(fw, aw) / l2;
    g_t1 += t2 * g_s;
    g_t2 += t1 * g_s;
    g_l1 -= dot(t1, g_t1) / l1;
    g_l2 -= dot(t2, g_t2) / l2;
    const Vec2 g_e1 = g_t1 / l1 + t1 * g_l1;
    const Vec2 g_e2 = g_t2 / l2 + t2 * g_l2;
    g_x[t.v] += g_e1 - g_e2;
    g_x[t.u] -= g_e1;
    g_x[t.w] += g_e2;
  }
}

// Reverse of cloth_step. `st_pre` is the state the forward step started from;
// `g` holds d(loss)/d(post state) on entry and d(loss)/d(pre state) on exit.
inline void adjoint_cloth_step(const ClothState& st_pre, const std::vector<Vec2>& ext_force,
                               const std::vector<Vec2>& ctrl_vel, double dt, ClothGrad& g,
                               std::vector<Vec2>& g_ext, std::vector<Vec2>& g_ctrl) {
  (void)ext_force;
  const ClothMesh& m = st_pre.mesh;
  const int n = m.vcount();
  g_ext.assign(n, Vec2::zero());
  g_ctrl.assign(ctrl_vel.size(), Vec2::zero());

  std::vector<Vec2> weight(n, Vec2::zero());  // adjoint of the elastic force
  std::vector<Vec2> gx_new(n), gv_new(n);
  for (int v = 0; v < n; ++v) {
    if (st_pre.is_control[v]) {
      gx_new[v] = g.verts[v];
      gv_new[v] = Vec2::zero();
      continue;
    }
    const Vec2 gv_eff = g.vel[v] + g.verts[v] * dt;
    gv_new[v] = gv_eff * (1.0 - st_pre.prm.damping * dt);
    g_ext[v] = gv_eff * (dt / m.mass[v]);
    weight[v] = gv_eff * (dt / m.mass[v]);
    gx_new[v] = g.verts[v];
  }
  for (size_t k = 0; k < st_pre.control.size(); ++k) {
    const int v = st_pre.control[k];
    g_ctrl[k] = g.vel[v] + g.verts[v] * dt;
  }
  cloth_elastic_vjp(st_pre, weight, gx_new);
  g.verts = std::move(gx_new);
  g.vel = std::move(gv_new);
}

}  // namespace softsim
