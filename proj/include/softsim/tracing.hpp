#pragma once
// Thin deformable meshes (segment chains/loops) as collision objects: nearest-
// face search through a per-substep spatial hash, binary penetration state
// maintained by side tests inside BFS face neighborhoods, and barycentric
// velocity/force coupling.

#include <array>
#include <cstdint>
#include <istream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "contact.hpp"

namespace softsim {

// ---------------------------------------------------------------------------
// Mesh.
// ---------------------------------------------------------------------------

struct ClothMesh {
  std::vector<Vec2> verts;
  std::vector<Vec2> vel;
  std::vector<std::array<int, 2>> faces;  // directed segments
  std::vector<double> rest_len;
  std::vector<double> mass;  // per vertex

  size_t vcount() const { return verts.size(); }
  size_t fcount() const { return faces.size(); }

  Vec2 face_edge(int f) const { return verts[faces[f][1]] - verts[faces[f][0]]; }
  // Unit normal on the left of the face direction.
  Vec2 face_normal(int f) const {
    const Vec2 e = face_edge(f);
    return perp(e) / norm(e);
  }
  double max_face_extent() const {
    double m = 0.0;
    for (size_t f = 0; f < faces.size(); ++f) m = std::max(m, norm(face_edge(static_cast<int>(f))));
    return m;
  }

  // Fill rest lengths from current geometry, zero velocities, uniform mass.
  void finalize(double mass_per_vertex) {
    rest_len.resize(faces.size());
    for (size_t f = 0; f < faces.size(); ++f) {
      rest_len[f] = norm(face_edge(static_cast<int>(f)));
      if (rest_len[f] <= 0.0) throw std::runtime_error("degenerate mesh face " + std::to_string(f));
    }
    vel.assign(verts.size(), Vec2::zero());
    mass.assign(verts.size(), mass_per_vertex);
  }
};

inline ClothMesh make_chain(const Vec2& a, const Vec2& b, int segments, double mass_per_vertex) {
  ClothMesh m;
  for (int i = 0; i <= segments; ++i)
    m.verts.push_back(a + (b - a) * (static_cast<double>(i) / segments));
  for (int i = 0; i < segments; ++i) m.faces.push_back({i, i + 1});
  m.finalize(mass_per_vertex);
  return m;
}

// Counter-clockwise loop; face normals (left of direction) point inward.
inline ClothMesh make_loop(const Vec2& center, double radius, int segments,
                           double mass_per_vertex) {
  ClothMesh m;
  for (int i = 0; i < segments; ++i) {
    const double th = 2.0 * 3.14159265358979323846 * i / segments;
    m.verts.push_back(center + Vec2{std::cos(th), std::sin(th)} * radius);
  }
  for (int i = 0; i < segments; ++i) m.faces.push_back({i, (i + 1) % segments});
  m.finalize(mass_per_vertex);
  return m;
}

// Minimal line-mesh reader: `v x y` vertices, `l i j` 1-based segments,
// blank lines and `#` comments allowed.
inline ClothMesh load_segment_mesh(std::istream& in, double mass_per_vertex) {
  ClothMesh m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      double x, y;
      if (!(ls >> x >> y)) throw std::runtime_error("bad vertex at line " + std::to_string(lineno));
      m.verts.push_back({x, y});
    } else if (tag == "l") {
      int i, j;
      if (!(ls >> i >> j)) throw std::runtime_error("bad segment at line " + std::to_string(lineno));
      if (i < 1 || j < 1 || i > static_cast<int>(m.verts.size()) ||
          j > static_cast<int>(m.verts.size()) || i == j)
        throw std::runtime_error("segment indices out of range at line " + std::to_string(lineno));
      m.faces.push_back({i - 1, j - 1});
    } else {
      throw std::runtime_error("unknown record '" + tag + "' at line " + std::to_string(lineno));
    }
  }
  m.finalize(mass_per_vertex);
  return m;
}

// ---------------------------------------------------------------------------
// Face neighborhoods with consistent orientation.
// ---------------------------------------------------------------------------

struct NeighborhoodTable {
  int depth = 0;
  // Per seed face, BFS-ordered (face, sign) pairs; the seed itself is first
  // with sign +1. sign = -1 marks a face whose direction is reversed relative
  // to the seed's orientation.
  std::vector<std::vector<std::pair<int, int>>> nbr;
  // Vertex incidence (at most two faces per vertex on a manifold mesh).
  std::vector<std::array<int, 2>> vfaces;

  // 0 when `face` is not in `seed`'s neighborhood.
  int sign_of(int seed, int face) const {
    for (const auto& [f, s] : nbr[seed])
      if (f == face) return s;
    return 0;
  }
  int other_face_at(int vertex, int face) const {
    const auto& vf = vfaces[vertex];
    if (vf[0] == face) return vf[1];
    if (vf[1] == face) return vf[0];
    return -1;
  }
};

// Relative orientation of two faces sharing a vertex: +1 when the direction
// flows through the shared vertex (tail-to-head), -1 head-to-head/tail-to-tail.
inline int face_relative_sign(const std::array<int, 2>& a, const std::array<int, 2>& b) {
  if (a[1] == b[0] || b[1] == a[0]) return 1;
  return -1;
}

inline NeighborhoodTable build_neighborhoods(const ClothMesh& mesh, int depth) {
  const int nf = static_cast<int>(mesh.fcount());
  std::vector<std::vector<int>> at_vertex(mesh.vcount());
  for (int f = 0; f < nf; ++f) {
    for (int v : mesh.faces[f]) {
      at_vertex[v].push_back(f);
      if (at_vertex[v].size() > 2)
        throw std::runtime_error("non-manifold mesh: vertex " + std::to_string(v) +
                                 " shared by more than two faces");
    }
  }

  NeighborhoodTable table;
  table.depth = depth;
  table.nbr.resize(nf);
  table.vfaces.assign(mesh.vcount(), {-1, -1});
  for (size_t v = 0; v < mesh.vcount(); ++v)
    for (size_t k = 0; k < at_vertex[v].size(); ++k) table.vfaces[v][k] = at_vertex[v][k];
  std::vector<int> dist(nf), sign(nf);
  for (int seed = 0; seed < nf; ++seed) {
    std::fill(dist.begin(), dist.end(), -1);
    dist[seed] = 0;
    sign[seed] = 1;
    std::vector<int> queue{seed};
    table.nbr[seed].clear();
    table.nbr[seed].push_back({seed, 1});
    for (size_t head = 0; head < queue.size(); ++head) {
      const int cur = queue[head];
      if (dist[cur] == depth) continue;
      for (int v : mesh.faces[cur]) {
        for (int nb : at_vertex[v]) {
          if (nb == cur) continue;
          const int s = sign[cur] * face_relative_sign(mesh.faces[cur], mesh.faces[nb]);
          if (dist[nb] < 0) {
            dist[nb] = dist[cur] + 1;
            sign[nb] = s;
            queue.push_back(nb);
            table.nbr[seed].push_back({nb, s});
          } else if (sign[nb] != s) {
            throw std::runtime_error("non-orientable neighborhood around face " +
                                     std::to_string(seed) + ": faces " + std::to_string(cur) +
                                     " and " + std::to_string(nb) + " disagree");
          }
        }
      }
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Spatial hash over faces, rebuilt from current vertex positions.
// ---------------------------------------------------------------------------

struct SpatialHash {
  double cell = 1.0;
  std::unordered_map<long long, std::vector<int>> buckets;

  static long long key(int ix, int iy) {
    return (static_cast<long long>(ix) << 32) ^ (static_cast<unsigned int>(iy));
  }
  int coord(double x) const { return static_cast<int>(std::floor(x / cell)); }

  void build(const ClothMesh& mesh, double cell_size) {
    cell = cell_size;
    buckets.clear();
    for (int f = 0; f < static_cast<int>(mesh.fcount()); ++f) {
      const Vec2& a = mesh.verts[mesh.faces[f][0]];
      const Vec2& b = mesh.verts[mesh.faces[f][1]];
      const int x0 = coord(std::min(a.x, b.x)), x1 = coord(std::max(a.x, b.x));
      const int y0 = coord(std::min(a.y, b.y)), y1 = coord(std::max(a.y, b.y));
      for (int iy = y0; iy <= y1; ++iy)
        for (int ix = x0; ix <= x1; ++ix) buckets[key(ix, iy)].push_back(f);
    }
  }
};

// Closest point on a segment: clamped parameter, squared distance, point.
struct SegmentPoint {
  double t = 0.0;
  double dist2 = 0.0;
  Vec2 closest;
  bool interior = false;  // t strictly inside (0, 1)
};

inline SegmentPoint point_segment(const Vec2& x, const Vec2& a, const Vec2& b) {
  SegmentPoint out;
  const Vec2 e = b - a;
  const double ee = dot(e, e);
  double t = ee > 0.0 ? dot(x - a, e) / ee : 0.0;
  out.interior = t > 0.0 && t < 1.0;
  t = clamp(t, 0.0, 1.0);
  out.t = t;
  out.closest = a + e * t;
  out.dist2 = norm_sq(x - out.closest);
  return out;
}

struct NearestFace {
  int face = -1;
  SegmentPoint at;
  double dist() const { return std::sqrt(at.dist2); }
};

// Nearest face by expanding ring search. A face absent from rings 0..r lies at
// distance >= r * cell, so the scan stops once the best candidate beats that
// bound (and always covers one ring past the first nonempty one).
inline NearestFace nearest_face(const Vec2& x, const ClothMesh& mesh, const SpatialHash& hash,
                                double max_dist) {
  NearestFace best;
  best.at.dist2 = std::numeric_limits<double>::infinity();
  const int cx = hash.coord(x.x), cy = hash.coord(x.y);
  const int ring_cap = static_cast<int>(std::ceil(max_dist / hash.cell)) + 1;
  int first_nonempty = -1;

  const auto visit = [&](int ix, int iy) {
    const auto it = hash.buckets.find(SpatialHash::key(ix, iy));
    if (it == hash.buckets.end()) return false;
    for (int f : it->second) {
      const SegmentPoint sp = point_segment(x, mesh.verts[mesh.faces[f][0]],
                                            mesh.verts[mesh.faces[f][1]]);
      if (sp.dist2 < best.at.dist2 || (sp.dist2 == best.at.dist2 && f < best.face)) {
        best.face = f;
        best.at = sp;
      }
    }
    return true;
  };

  for (int r = 0; r <= ring_cap; ++r) {
    bool any = false;
    if (r == 0) {
      any = visit(cx, cy);
    } else {
      for (int ix = cx - r; ix <= cx + r; ++ix) {
        any |= visit(ix, cy - r);
        any |= visit(ix, cy + r);
      }
      for (int iy = cy - r + 1; iy <= cy + r - 1; ++iy) {
        any |= visit(cx - r, iy);
        any |= visit(cx + r, iy);
      }
    }
    if (any && first_nonempty < 0) first_nonempty = r;
    if (first_nonempty >= 0 && r >= first_nonempty + 1) {
      const double bound = static_cast<double>(r) * hash.cell;
      if (best.at.dist2 <= bound * bound) break;
    }
  }
  if (best.face >= 0 && best.at.dist2 > max_dist * max_dist) best.face = -1;
  return best;
}

// ---------------------------------------------------------------------------
// Penetration tracing.
// ---------------------------------------------------------------------------

// Per-particle state for one thin mesh. `home` is the sign of the side the
// particle occupied when z was last 0, expressed in the current contact face's
// intrinsic frame (left of the face direction = +1); it is remapped through
// the neighborhood's relative signs whenever the contact face changes.
struct TrackState {
  int face = -1;
  uint8_t z = 0;
  int8_t home = 1;
  double dist = std::numeric_limits<double>::infinity();
};

// Side of `x` relative to `face`'s positive (left) direction. In a vertex's
// equidistant region the single-line test misreads corner wedges, so the sign
// there comes from the vertex pseudo-normal (sum of the adjacent face normals,
// composed with the faces' relative orientation) - exact inside/outside for
// closed manifold meshes.
inline int side_sign(const ClothMesh& mesh, const NeighborhoodTable& topo, int face,
                     const Vec2& x, const SegmentPoint& at) {
  if (at.interior) {
    const Vec2 a = mesh.verts[mesh.faces[face][0]];
    return cross(mesh.face_edge(face), x - a) >= 0.0 ? 1 : -1;
  }
  const int vtx = mesh.faces[face][at.t > 0.5 ? 1 : 0];
  const int other = topo.other_face_at(vtx, face);
  Vec2 pn = mesh.face_normal(face);
  if (other >= 0)
    pn += mesh.face_normal(other) *
          static_cast<double>(face_relative_sign(mesh.faces[face], mesh.faces[other]));
  return dot(x - mesh.verts[vtx], pn) >= 0.0 ? 1 : -1;
}

// Advance one particle's state from the current geometry. Returns false on a
// locality violation (new face outside the old face's neighborhood), in which
// case the state is re-seeded from scratch instead of guessing a side flip.
inline bool update_penetration_state(TrackState& st, const ClothMesh& mesh,
                                     const NeighborhoodTable& topo, const NearestFace& nf,
                                     const Vec2& x) {
  const int side = side_sign(mesh, topo, nf.face, x, nf.at);
  if (st.face < 0) {
    st = TrackState{nf.face, 0, static_cast<int8_t>(side), nf.dist()};
    return true;
  }
  const int rel = topo.sign_of(st.face, nf.face);
  if (rel == 0) {
    st = TrackState{nf.face, 0, static_cast<int8_t>(side), nf.dist()};
    return false;
  }
  const int home_here = st.home * rel;
  const int expected = st.z ? -home_here : home_here;
  if (side != expected) st.z ^= 1;
  st.home = static_cast<int8_t>(home_here);
  st.face = nf.face;
  st.dist = nf.dist();
  return true;
}

// ---------------------------------------------------------------------------
// Thin-mesh collider.
// ---------------------------------------------------------------------------

// Couples a ClothMesh into the contact models: signed distance comes from the
// traced side state (d = +dist on the particle's home side, -dist after it
// crosses), the normal points toward the home side, and impulses are spread
// over the face's vertices by the barycentric weights. With tracing disabled
// the distance stays unsigned, which never reports penetration - the ablation
// baseline.
class ClothCollider final : public DeformableCollider {
 public:
  ClothMesh mesh;
  NeighborhoodTable topo;
  double track_radius = 0.05;
  bool tracing = true;
  FaultLog* faults = nullptr;

  SpatialHash hash;
  std::vector<TrackState> state;           // per particle
  std::vector<Vec2> impulse;               // per vertex, accumulated ledger
  std::vector<Vec2> g_verts, g_vel;        // adjoint outputs (per vertex)
  std::vector<Vec2> g_impulse;             // adjoint input: dL/d ledger entry

  explicit ClothCollider(ClothMesh m, int bfs_depth = 2) : mesh(std::move(m)) {
    topo = build_neighborhoods(mesh, bfs_depth);
    impulse.assign(mesh.vcount(), Vec2::zero());
  }

  // Rebuild the hash and advance every tracked particle's side state. Call
  // once per substep before any contact query.
  void begin_substep(const std::vector<Vec2>& xs) {
    hash.build(mesh, 2.0 * mesh.max_face_extent());
    state.resize(xs.size());
    if (!tracing) return;
    for (size_t p = 0; p < xs.size(); ++p) {
      const NearestFace nf = nearest_face(xs[p], mesh, hash, track_radius);
      if (nf.face < 0) continue;  // out of range: carry previous state
      if (!update_penetration_state(state[p], mesh, topo, nf, xs[p]) && faults)
        ++faults->tracing_reseeds;
    }
  }

  void clear_ledger() override { impulse.assign(mesh.vcount(), Vec2::zero()); }
  void clear_grads() {
    g_verts.assign(mesh.vcount(), Vec2::zero());
    g_vel.assign(mesh.vcount(), Vec2::zero());
    g_impulse.assign(mesh.vcount(), Vec2::zero());
  }

  bool query(size_t p, const Vec2& x, double& d, Vec2& n) const override {
    const NearestFace nf = nearest_face(x, mesh, hash, track_radius);
    if (nf.face < 0) return false;
    const double dist = nf.dist();
    if (!tracing || p >= state.size() || state[p].face < 0) {
      d = dist;
      n = dist > 1e-14 ? (x - nf.at.closest) / dist : mesh.face_normal(nf.face);
      return true;
    }
    const TrackState& st = state[p];
    const int rel = nf.face == st.face ? 1 : topo.sign_of(st.face, nf.face);
    const int sgn = st.home * (rel == 0 ? 1 : rel);
    d = (st.z ? -1.0 : 1.0) * dist;
    n = mesh.face_normal(nf.face) * static_cast<double>(sgn);
    return true;
  }

  Vec2 velocity_at(size_t, const Vec2& x) const override {
    const NearestFace nf = nearest_face(x, mesh, hash, track_radius);
    if (nf.face < 0) return Vec2::zero();
    const auto& f = mesh.faces[nf.face];
    return mesh.vel[f[0]] * (1.0 - nf.at.t) + mesh.vel[f[1]] * nf.at.t;
  }

  void add_impulse(size_t, const Vec2& x, const Vec2& imp) override {
    const NearestFace nf = nearest_face(x, mesh, hash, track_radius);
    if (nf.face < 0) return;
    const auto& f = mesh.faces[nf.face];
    impulse[f[0]] += imp * (1.0 - nf.at.t);
    impulse[f[1]] += imp * nf.at.t;
  }

  // d = s * |x - closest(x; a, b)|: the x-path is the radial direction, the
  // vertex path follows the clamped closest-point weights (envelope rule for
  // interior t), and the normal path differentiates the unit left normal.
  void query_vjp(size_t p, const Vec2& x, double g_d, const Vec2& g_n, Vec2& g_x) override {
    const NearestFace nf = nearest_face(x, mesh, hash, track_radius);
    if (nf.face < 0) return;
    const auto& f = mesh.faces[nf.face];
    const double dist = nf.dist();
    if (dist <= 1e-14) return;
    double zsign = 1.0;
    int sgn = 1;
    if (tracing && p < state.size() && state[p].face >= 0) {
      const TrackState& st = state[p];
      zsign = st.z ? -1.0 : 1.0;
      const int rel = nf.face == st.face ? 1 : topo.sign_of(st.face, nf.face);
      sgn = st.home * (rel == 0 ? 1 : rel);
    }
    const Vec2 u = (x - nf.at.closest) / dist;
    const double cd = g_d * zsign;
    g_x += u * cd;
    g_verts[f[0]] -= u * (cd * (1.0 - nf.at.t));
    g_verts[f[1]] -= u * (cd * nf.at.t);

    // n = sgn * perp(e)/|e| (untracked queries return the radial direction
    // instead; its x-path is dropped, matching the frozen-branch convention).
    if (tracing && p < state.size() && state[p].face >= 0) {
      const Vec2 e = mesh.face_edge(nf.face);
      const double len = norm(e);
      const Vec2 ehat = e / len;
      const Vec2 g_ehat{g_n.y * static_cast<double>(sgn), -g_n.x * static_cast<double>(sgn)};
      const Vec2 g_e = (g_ehat - ehat * dot(ehat, g_ehat)) / len;
      g_verts[f[1]] += g_e;
      g_verts[f[0]] -= g_e;
    }
  }

  void velocity_vjp(size_t, const Vec2& x, const Vec2& g_vc, Vec2& g_x) override {
    const NearestFace nf = nearest_face(x, mesh, hash, track_radius);
    if (nf.face < 0) return;
    const auto& f = mesh.faces[nf.face];
    g_vel[f[0]] += g_vc * (1.0 - nf.at.t);
    g_vel[f[1]] += g_vc * nf.at.t;
    if (nf.at.interior) {
      const double g_t = dot(g_vc, mesh.vel[f[1]] - mesh.vel[f[0]]);
      route_t_grad(nf, x, g_t, g_x);
    }
  }

  void impulse_vjp(size_t, const Vec2& x, const Vec2& imp, Vec2& g_imp, Vec2& g_x) override {
    const NearestFace nf = nearest_face(x, mesh, hash, track_radius);
    if (nf.face < 0) return;
    const auto& f = mesh.faces[nf.face];
    g_imp += g_impulse[f[0]] * (1.0 - nf.at.t) + g_impulse[f[1]] * nf.at.t;
    if (nf.at.interior) {
      const double g_t = dot(g_impulse[f[1]] - g_impulse[f[0]], imp);
      route_t_grad(nf, x, g_t, g_x);
    }
  }

 private:
  // t = dot(x-a, e)/dot(e, e) for interior t; quotient-rule paths to x, a, b.
  void route_t_grad(const NearestFace& nf, const Vec2& x, double g_t, Vec2& g_x) {
    const auto& f = mesh.faces[nf.face];
    const Vec2 a = mesh.verts[f[0]];
    const Vec2 e = mesh.face_edge(nf.face);
    const double E = dot(e, e);
    const Vec2 xa = x - a;
    g_x += e * (g_t / E);
    g_verts[f[0]] += (-e - xa + e * (2.0 * nf.at.t)) * (g_t / E);
    g_verts[f[1]] += (xa - e * (2.0 * nf.at.t)) * (g_t / E);
  }
};

}  // namespace softsim
