// Trajectory losses (Chamfer / pose / velocity terms) over a recorded rollout,
// plus benchmark metrics: container-escape counts and a rebound-fraction proxy.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "softsim/engine.hpp"

namespace softsim {

// ---------------------------------------------------------------------------
// Exact nearest neighbor over a point set via a uniform grid. Queries expand
// cell rings outward and stop once no unscanned ring can beat the best hit,
// so results match brute force exactly (up to ties, which share a distance).
class PointGrid {
 public:
  void build(const std::vector<Vec2>& pts) {
    if (pts.empty()) throw std::runtime_error("nearest-neighbor grid needs at least one point");
    pts_ = &pts;
    Vec2 lo = pts[0], hi = pts[0];
    for (const Vec2& p : pts) {
      lo = {std::min(lo.x, p.x), std::min(lo.y, p.y)};
      hi = {std::max(hi.x, p.x), std::max(hi.y, p.y)};
    }
    origin_ = lo;
    const double extent = std::max({hi.x - lo.x, hi.y - lo.y, 1e-12});
    const int target = std::clamp(static_cast<int>(std::sqrt(double(pts.size()))), 1, 512);
    cell_ = extent / target;
    nx_ = std::min(512, static_cast<int>((hi.x - lo.x) / cell_) + 1);
    ny_ = std::min(512, static_cast<int>((hi.y - lo.y) / cell_) + 1);
    bins_.assign(static_cast<size_t>(nx_) * ny_, {});
    for (size_t i = 0; i < pts.size(); ++i) bins_[bin_of(pts[i])].push_back(static_cast<int>(i));
  }

  // Index of the closest stored point to q.
  int nearest(const Vec2& q) const {
    const int ci = clampi(static_cast<int>(std::floor((q.x - origin_.x) / cell_)), nx_);
    const int cj = clampi(static_cast<int>(std::floor((q.y - origin_.y) / cell_)), ny_);
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    const int rmax = std::max(std::max(ci, nx_ - 1 - ci), std::max(cj, ny_ - 1 - cj));
    for (int r = 0; r <= rmax; ++r) {
      // every cell at ring radius >= r lies at least (r-1) cells away
      if (best >= 0) {
        const double bound = (r - 1) * cell_;
        if (bound > 0.0 && bound * bound > best_d2) break;
      }
      scan_ring(q, ci, cj, r, best, best_d2);
    }
    return best;
  }

 private:
  static int clampi(int v, int n) { return std::max(0, std::min(v, n - 1)); }

  size_t bin_of(const Vec2& p) const {
    const int i = clampi(static_cast<int>(std::floor((p.x - origin_.x) / cell_)), nx_);
    const int j = clampi(static_cast<int>(std::floor((p.y - origin_.y) / cell_)), ny_);
    return static_cast<size_t>(j) * nx_ + i;
  }

  double cell_min_d2(const Vec2& q, int i, int j) const {
    const double x0 = origin_.x + i * cell_, y0 = origin_.y + j * cell_;
    const double dx = std::max({x0 - q.x, q.x - (x0 + cell_), 0.0});
    const double dy = std::max({y0 - q.y, q.y - (y0 + cell_), 0.0});
    return dx * dx + dy * dy;
  }

  void scan_cell(const Vec2& q, int i, int j, int& best, double& best_d2) const {
    if (i < 0 || i >= nx_ || j < 0 || j >= ny_) return;
    if (cell_min_d2(q, i, j) > best_d2) return;
    for (int idx : bins_[static_cast<size_t>(j) * nx_ + i]) {
      const double d2 = norm_sq((*pts_)[idx] - q);
      if (d2 < best_d2) {
        best_d2 = d2;
        best = idx;
      }
    }
  }

  void scan_ring(const Vec2& q, int ci, int cj, int r, int& best, double& best_d2) const {
    if (r == 0) {
      scan_cell(q, ci, cj, best, best_d2);
      return;
    }
    for (int i = ci - r; i <= ci + r; ++i) {
      scan_cell(q, i, cj - r, best, best_d2);
      scan_cell(q, i, cj + r, best, best_d2);
    }
    for (int j = cj - r + 1; j <= cj + r - 1; ++j) {
      scan_cell(q, ci - r, j, best, best_d2);
      scan_cell(q, ci + r, j, best, best_d2);
    }
  }

  const std::vector<Vec2>* pts_ = nullptr;
  Vec2 origin_;
  double cell_ = 1.0;
  int nx_ = 1, ny_ = 1;
  std::vector<std::vector<int>> bins_;
};

// ---------------------------------------------------------------------------
// Symmetric Chamfer distance with squared distances: mean over each set of the
// squared distance to the other set's nearest point.
inline double chamfer(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  if (a.empty() || b.empty()) throw std::runtime_error("chamfer needs two nonempty point sets");
  PointGrid ga, gb;
  ga.build(a);
  gb.build(b);
  double la = 0.0, lb = 0.0;
  for (const Vec2& p : a) la += norm_sq(p - b[gb.nearest(p)]);
  for (const Vec2& p : b) lb += norm_sq(p - a[ga.nearest(p)]);
  return la / a.size() + lb / b.size();
}

// d(chamfer)/d(a), scaled by w, accumulated into g. Correspondences are frozen
// at evaluation time, so away from assignment switches this is the exact
// gradient of chamfer(a, b).
inline void chamfer_grad(const std::vector<Vec2>& a, const std::vector<Vec2>& b, double w,
                         std::vector<Vec2>& g) {
  if (a.empty() || b.empty()) throw std::runtime_error("chamfer needs two nonempty point sets");
  PointGrid ga, gb;
  ga.build(a);
  gb.build(b);
  const double wa = 2.0 * w / a.size(), wb = 2.0 * w / b.size();
  for (size_t i = 0; i < a.size(); ++i) g[i] += (a[i] - b[gb.nearest(a[i])]) * wa;
  for (const Vec2& p : b) {
    const int i = ga.nearest(p);
    g[i] += (a[i] - p) * wb;
  }
}

// ---------------------------------------------------------------------------
// Weighted loss terms over a rollout. Target-matching terms score the final
// boundary; the velocity penalty is a running cost over every post-action
// boundary.
enum class LossKind : uint8_t {
  ChamferToTarget,   // particle cloud vs. target cloud
  PoseTarget,        // body pose vs. target pose
  VelocityPenalty,   // body twist magnitude, summed over boundaries 1..T
  HingeAngleTarget,  // hinge angle vs. target angle
  ClothPoseTarget,   // cloth vertices vs. target vertices
};

struct LossTerm {
  LossKind kind = LossKind::ChamferToTarget;
  double weight = 1.0;
  int body = 0;               // PoseTarget / VelocityPenalty / HingeAngleTarget
  int cloth = 0;              // ClothPoseTarget
  std::vector<Vec2> target;   // chamfer cloud or per-vertex cloth targets
  Pose2 target_pose;          // PoseTarget
  double target_angle = 0.0;  // HingeAngleTarget
};

struct LossSpec {
  std::vector<LossTerm> terms;
};

inline void validate(const LossSpec& spec, const CoupledState& s) {
  if (spec.terms.empty()) throw std::runtime_error("loss spec needs at least one term");
  for (size_t i = 0; i < spec.terms.size(); ++i) {
    const LossTerm& t = spec.terms[i];
    const std::string where = "loss term " + std::to_string(i) + ": ";
    if (!(t.weight >= 0.0)) throw std::runtime_error(where + "weight must be nonnegative");
    switch (t.kind) {
      case LossKind::ChamferToTarget:
        if (t.target.empty()) throw std::runtime_error(where + "empty target cloud");
        if (s.ps.size() == 0) throw std::runtime_error(where + "scene has no particles");
        break;
      case LossKind::PoseTarget:
      case LossKind::VelocityPenalty:
      case LossKind::HingeAngleTarget:
        if (t.body < 0 || t.body >= static_cast<int>(s.bodies.size()))
          throw std::runtime_error(where + "body id out of range");
        if (t.kind == LossKind::HingeAngleTarget &&
            s.bodies[t.body].mode != RigidMode::Hinge)
          throw std::runtime_error(where + "hinge-angle target on a non-hinge body");
        break;
      case LossKind::ClothPoseTarget:
        if (t.cloth < 0 || t.cloth >= static_cast<int>(s.cloths.size()))
          throw std::runtime_error(where + "cloth id out of range");
        if (static_cast<int>(t.target.size()) != s.cloths[t.cloth].mesh.vcount())
          throw std::runtime_error(where + "target size does not match cloth vertex count");
        break;
    }
  }
}

inline const CoupledState& boundary_state(const Tape& tape, int n) {
  return n < static_cast<int>(tape.steps.size()) ? tape.steps[n].state0 : tape.final_state;
}

// One term's contribution at one boundary (already weighted).
inline double loss_term_at(const LossTerm& t, int boundary, int T, const CoupledState& s) {
  const bool final_boundary = boundary == T;
  switch (t.kind) {
    case LossKind::ChamferToTarget:
      return final_boundary ? t.weight * chamfer(s.ps.x, t.target) : 0.0;
    case LossKind::PoseTarget: {
      if (!final_boundary) return 0.0;
      const RigidBody& b = s.bodies[t.body];
      const double dth = b.pose.th - t.target_pose.th;
      return t.weight * (norm_sq(b.pose.p - t.target_pose.p) + dth * dth);
    }
    case LossKind::VelocityPenalty: {
      if (boundary == 0) return 0.0;
      const RigidBody& b = s.bodies[t.body];
      if (b.mode == RigidMode::Hinge) return t.weight * b.thetadot * b.thetadot;
      return t.weight * (norm_sq(b.twist.lin) + b.twist.ang * b.twist.ang);
    }
    case LossKind::HingeAngleTarget: {
      if (!final_boundary) return 0.0;
      const double d = s.bodies[t.body].theta - t.target_angle;
      return t.weight * d * d;
    }
    case LossKind::ClothPoseTarget: {
      if (!final_boundary) return 0.0;
      const ClothMesh& m = s.cloths[t.cloth].mesh;
      double l = 0.0;
      for (int v = 0; v < m.vcount(); ++v) l += norm_sq(m.verts[v] - t.target[v]);
      return t.weight * l;
    }
  }
  return 0.0;
}

struct LossValues {
  double total = 0.0;
  std::vector<double> terms;  // aligned with the spec
};

inline LossValues eval_loss(const LossSpec& spec, const Tape& tape) {
  const int T = static_cast<int>(tape.steps.size());
  LossValues out;
  out.terms.assign(spec.terms.size(), 0.0);
  for (size_t i = 0; i < spec.terms.size(); ++i)
    for (int n = 0; n <= T; ++n)
      out.terms[i] += loss_term_at(spec.terms[i], n, T, boundary_state(tape, n));
  for (double v : out.terms) out.total += v;
  return out;
}

// Gradient counterpart of loss_term_at, accumulated into the boundary grads.
inline void add_loss_grads(const LossSpec& spec, int T, int boundary, const CoupledState& s,
                           CoupledGrad& g) {
  for (const LossTerm& t : spec.terms) {
    const bool final_boundary = boundary == T;
    switch (t.kind) {
      case LossKind::ChamferToTarget:
        if (final_boundary) chamfer_grad(s.ps.x, t.target, t.weight, g.mpm.x);
        break;
      case LossKind::PoseTarget: {
        if (!final_boundary) break;
        const RigidBody& b = s.bodies[t.body];
        g.bodies[t.body].pos += (b.pose.p - t.target_pose.p) * (2.0 * t.weight);
        g.bodies[t.body].th += 2.0 * t.weight * (b.pose.th - t.target_pose.th);
        break;
      }
      case LossKind::VelocityPenalty: {
        if (boundary == 0) break;
        const RigidBody& b = s.bodies[t.body];
        if (b.mode == RigidMode::Hinge) {
          g.bodies[t.body].thetadot += 2.0 * t.weight * b.thetadot;
        } else {
          g.bodies[t.body].vel += b.twist.lin * (2.0 * t.weight);
          g.bodies[t.body].omega += 2.0 * t.weight * b.twist.ang;
        }
        break;
      }
      case LossKind::HingeAngleTarget:
        if (final_boundary)
          g.bodies[t.body].theta += 2.0 * t.weight * (s.bodies[t.body].theta - t.target_angle);
        break;
      case LossKind::ClothPoseTarget: {
        if (!final_boundary) break;
        const ClothMesh& m = s.cloths[t.cloth].mesh;
        for (int v = 0; v < m.vcount(); ++v)
          g.cloths[t.cloth].verts[v] += (m.verts[v] - t.target[v]) * (2.0 * t.weight);
        break;
      }
    }
  }
}

inline LossGradFn make_loss_grad(const LossSpec& spec, int T) {
  return [&spec, T](int boundary, const CoupledState& s, CoupledGrad& g) {
    add_loss_grads(spec, T, boundary, s, g);
  };
}

// ---------------------------------------------------------------------------
// Particles that have left a container's cavity (annulus walls: past the inner
// surface, whether inside the wall or fully through it; solid colliders:
// embedded in the material).
inline int penetration_count(const std::vector<Vec2>& xs, const SdfHandle& sdf,
                             const Pose2& pose) {
  int count = 0;
  for (const Vec2& x : xs) {
    const Vec2 l = to_body(pose, x);
    const bool outside = sdf.kind == SdfKind::AnalyticAnnulusContainer
                             ? norm(l) > sdf.inner_radius
                             : sdf_query_local(sdf, l).d < 0.0;
    count += outside ? 1 : 0;
  }
  return count;
}

// ---------------------------------------------------------------------------
// Elastic-gain proxy over a recorded rollout: the fraction of rigid-contact
// approach events whose outgoing normal speed exceeds `gain` times the
// incoming normal speed. Needs a tape recorded with substep snapshots.
inline double rebound_metric(const Tape& tape, const ContactParams& cp, double gain = 1.2) {
  long events = 0, rebounds = 0;
  const int T = static_cast<int>(tape.steps.size());
  for (int n = 0; n < T; ++n) {
    const StepRecord& R = tape.steps[n];
    const int K = static_cast<int>(R.subs.size());
    for (int k = 0; k < K; ++k) {
      const SubstepSnap& pre = R.subs[k];
      const std::vector<Vec2>& v_post =
          k + 1 < K ? R.subs[k + 1].v : boundary_state(tape, n + 1).ps.v;
      for (const RigidBody& b : R.state0.bodies) {
        if (!b.sdf) continue;
        for (size_t p = 0; p < pre.x.size(); ++p) {
          const SdfHit hit = sdf_query(*b.sdf, pre.x[p], b.pose);
          if (hit.d >= cp.d_hat) continue;
          const Vec2 v_body = b.twist.lin + perp(pre.x[p] - b.pose.p) * b.twist.ang;
          const double v_in = -dot(pre.v[p] - v_body, hit.n);
          if (v_in <= 1e-9) continue;  // separating or tangent
          ++events;
          if (dot(v_post[p] - v_body, hit.n) > gain * v_in) ++rebounds;
        }
      }
    }
  }
  return events == 0 ? 0.0 : static_cast<double>(rebounds) / static_cast<double>(events);
}

}  // namespace softsim
