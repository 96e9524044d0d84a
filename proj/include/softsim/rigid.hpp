#pragma once
// Differentiable rigid manipulators: a free planar body (semi-implicit Euler),
// a single-hinge body in reduced coordinates (one angle, one rate - the
// constraint can't drift), and a kinematic mode that follows velocity commands.

#include "sdf.hpp"

namespace softsim {

enum class RigidMode : uint8_t { Dynamic = 0, Hinge = 1, Kinematic = 2 };

struct Wrench {
  Vec2 force;
  double torque = 0.0;  // about COM
};

// Interpretation depends on the body mode: extra wrench for Dynamic, torque
// (ang) for Hinge, commanded velocity for Kinematic.
struct RigidAction {
  Vec2 lin;
  double ang = 0.0;
};

struct RigidBody {
  RigidMode mode = RigidMode::Dynamic;
  Pose2 pose;
  Twist2 twist;
  double mass = 1.0;
  double inertia = 1.0;       // about COM
  double damping = 0.0;       // viscous (linear+angular for Dynamic, angular for Hinge)
  double gravity_scale = 1.0; // 0 for externally mounted bodies
  const SdfHandle* sdf = nullptr;

  // Hinge data: world anchor, COM offset in the body frame, generalized state.
  Vec2 anchor;
  Vec2 r0;
  double theta = 0.0;
  double thetadot = 0.0;

  double hinge_inertia() const { return inertia + mass * norm_sq(r0); }

  // Derive pose and twist from the generalized hinge state.
  void sync_pose() {
    if (mode != RigidMode::Hinge) return;
    const Vec2 r = rotation(theta) * r0;
    pose.p = anchor + r;
    pose.th = theta;
    twist.lin = perp(r) * thetadot;
    twist.ang = thetadot;
  }
};

// Attach a hinge at a world anchor, keeping the body's current pose.
inline void make_hinge(RigidBody& b, const Vec2& anchor_world) {
  b.mode = RigidMode::Hinge;
  b.anchor = anchor_world;
  b.r0 = rotation(b.pose.th).transposed() * (b.pose.p - anchor_world);
  b.theta = b.pose.th;
  b.thetadot = b.twist.ang;
  b.sync_pose();
}

inline SdfHit rigid_sdf_world(const RigidBody& b, const Vec2& x) {
  return sdf_query(*b.sdf, x, b.pose);
}

inline void integrate_rigid(RigidBody& b, const Wrench& w, const RigidAction& a,
                            const Vec2& gravity, double dt) {
  switch (b.mode) {
    case RigidMode::Dynamic: {
      b.twist.lin += ((w.force + a.lin) / b.mass + gravity * b.gravity_scale -
                      b.twist.lin * (b.damping / b.mass)) * dt;
      b.twist.ang += ((w.torque + a.ang) - b.damping * b.twist.ang) / b.inertia * dt;
      b.pose.p += b.twist.lin * dt;
      b.pose.th += b.twist.ang * dt;
      break;
    }
    case RigidMode::Hinge: {
      const Vec2 r = rotation(b.theta) * b.r0;
      const double tau = w.torque + cross(r, w.force + gravity * (b.gravity_scale * b.mass)) +
                         a.ang - b.damping * b.thetadot;
      b.thetadot += tau / b.hinge_inertia() * dt;
      b.theta += b.thetadot * dt;
      b.sync_pose();
      break;
    }
    case RigidMode::Kinematic: {
      b.twist.lin = a.lin;
      b.twist.ang = a.ang;
      b.pose.p += a.lin * dt;
      b.pose.th += a.ang * dt;
      break;
    }
  }
}

// Gradient slots for one body. Contact passes accumulate into the pose/twist
// components; for hinge bodies those get folded into the generalized pair
// before stepping backward through the integrator.
struct RigidGrad {
  Vec2 pos;
  double th = 0.0;
  Vec2 vel;
  double omega = 0.0;
  double theta = 0.0;
  double thetadot = 0.0;

  void clear() { *this = RigidGrad{}; }
};

// Fold pose/twist-space gradients into generalized hinge coordinates at the
// state `b` (pose.p = anchor + R(theta) r0, twist.lin = thetadot * perp(r)).
inline void fold_pose_grads(const RigidBody& b, RigidGrad& g) {
  if (b.mode != RigidMode::Hinge) return;
  const Vec2 r = b.pose.p - b.anchor;
  g.theta += dot(g.pos, perp(r)) + g.th - b.thetadot * dot(g.vel, r);
  g.thetadot += dot(g.vel, perp(r)) + g.omega;
  g.pos = Vec2::zero();
  g.th = 0.0;
  g.vel = Vec2::zero();
  g.omega = 0.0;
}

// Reverse of integrate_rigid: consumes the post-state gradient (pose/twist
// space for Dynamic/Kinematic, generalized for Hinge - fold first) and emits
// the pre-state gradient plus wrench/action gradients. `b_pre` is the state
// the forward step started from.
inline void integrate_rigid_adjoint(const RigidBody& b_pre, const Wrench& w, const RigidAction& a,
                                    const Vec2& gravity, double dt, const RigidGrad& g_post,
                                    RigidGrad& g_pre, Wrench& g_wrench, RigidAction& g_action) {
  (void)a;
  switch (b_pre.mode) {
    case RigidMode::Dynamic: {
      const Vec2 gv = g_post.vel + g_post.pos * dt;
      const double gw = g_post.omega + g_post.th * dt;
      g_pre.pos += g_post.pos;
      g_pre.th += g_post.th;
      g_pre.vel += gv * (1.0 - b_pre.damping / b_pre.mass * dt);
      g_pre.omega += gw * (1.0 - b_pre.damping / b_pre.inertia * dt);
      g_wrench.force += gv * (dt / b_pre.mass);
      g_wrench.torque += gw * (dt / b_pre.inertia);
      g_action.lin += gv * (dt / b_pre.mass);
      g_action.ang += gw * (dt / b_pre.inertia);
      break;
    }
    case RigidMode::Hinge: {
      const Vec2 r = rotation(b_pre.theta) * b_pre.r0;
      const Vec2 f = w.force + gravity * (b_pre.gravity_scale * b_pre.mass);
      const double gthd = g_post.thetadot + g_post.theta * dt;
      const double gtau = gthd * (dt / b_pre.hinge_inertia());
      g_pre.theta += g_post.theta + gtau * (-dot(r, f));  // d cross(r, f)/d theta
      g_pre.thetadot += gthd * (1.0 - b_pre.damping / b_pre.hinge_inertia() * dt);
      g_wrench.torque += gtau;
      g_wrench.force += perp(r) * gtau;
      g_action.ang += gtau;
      break;
    }
    case RigidMode::Kinematic: {
      g_pre.pos += g_post.pos;
      g_pre.th += g_post.th;
      g_action.lin += g_post.vel + g_post.pos * dt;
      g_action.ang += g_post.omega + g_post.th * dt;
      break;
    }
  }
}

}  // namespace softsim
