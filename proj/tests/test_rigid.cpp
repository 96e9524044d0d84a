#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <random>
#include <vector>

#include "fd_check.hpp"
#include "softsim/rigid.hpp"

using namespace softsim;

namespace {

constexpr double kPi = 3.14159265358979323846;

RigidBody free_body(Vec2 p, double th, Vec2 v, double om) {
  RigidBody b;
  b.mode = RigidMode::Dynamic;
  b.pose = {p, th};
  b.twist = {v, om};
  b.mass = 0.7;
  b.inertia = 0.013;
  return b;
}

RigidBody hinge_body(Vec2 anchor, Vec2 r0, double theta, double thetadot) {
  RigidBody b;
  b.mode = RigidMode::Hinge;
  b.mass = 0.4;
  b.inertia = 0.002;
  b.anchor = anchor;
  b.r0 = r0;
  b.theta = theta;
  b.thetadot = thetadot;
  b.sync_pose();
  return b;
}

}  // namespace

TEST_CASE("free body integration", "[rigid]") {
  const Vec2 g0 = Vec2::zero();

  SECTION("force-free motion conserves momentum bitwise") {
    RigidBody b = free_body({0.2, 0.8}, 0.3, {0.11, -0.07}, 1.9);
    const Vec2 v0 = b.twist.lin;
    const double om0 = b.twist.ang;
    Vec2 p_ref = b.pose.p;
    double th_ref = b.pose.th;
    for (int k = 0; k < 1000; ++k) {
      integrate_rigid(b, {}, {}, g0, 1e-3);
      p_ref += v0 * 1e-3;
      th_ref += om0 * 1e-3;
    }
    REQUIRE(b.twist.lin.x == v0.x);
    REQUIRE(b.twist.lin.y == v0.y);
    REQUIRE(b.twist.ang == om0);
    REQUIRE(b.pose.p.x == p_ref.x);
    REQUIRE(b.pose.p.y == p_ref.y);
    REQUIRE(b.pose.th == th_ref);
  }

  SECTION("free fall matches the discrete velocity sum") {
    const Vec2 grav{0.0, -9.8};
    const double dt = 2e-3;
    const int n = 500;
    RigidBody b = free_body({0.5, 2.0}, 0.0, Vec2::zero(), 0.0);
    Vec2 v_ref = Vec2::zero(), p_ref = b.pose.p;
    for (int k = 0; k < n; ++k) {
      integrate_rigid(b, {}, {}, grav, dt);
      v_ref += grav * dt;  // same op order as the integrator
      p_ref += v_ref * dt;
    }
    REQUIRE(b.twist.lin.y == v_ref.y);
    REQUIRE(b.pose.p.y == p_ref.y);
    REQUIRE(b.twist.lin.y == Catch::Approx(-9.8 * n * dt).epsilon(1e-12));
  }

  SECTION("one step from rest moves the pose by dt^2/m times the wrench") {
    const double dt = 5e-3;
    RigidBody b = free_body({0.4, 0.4}, 0.1, Vec2::zero(), 0.0);
    const Wrench w{{1.3, -0.6}, 0.21};
    integrate_rigid(b, w, {}, g0, dt);
    REQUIRE(b.pose.p.x - 0.4 == Catch::Approx(w.force.x * dt * dt / b.mass).epsilon(1e-10));
    REQUIRE(b.pose.p.y - 0.4 == Catch::Approx(w.force.y * dt * dt / b.mass).epsilon(1e-10));
    REQUIRE(b.pose.th - 0.1 == Catch::Approx(w.torque * dt * dt / b.inertia).epsilon(1e-10));

    // and the adjoint reports exactly that sensitivity
    RigidGrad gp, gpre;
    Wrench gw;
    RigidAction ga;
    gp.pos = {1.0, 0.0};
    RigidBody pre = free_body({0.4, 0.4}, 0.1, Vec2::zero(), 0.0);
    integrate_rigid_adjoint(pre, w, {}, g0, dt, gp, gpre, gw, ga);
    REQUIRE(gw.force.x == Catch::Approx(dt * dt / pre.mass).epsilon(1e-14));
    REQUIRE(gw.force.y == 0.0);
    REQUIRE(gw.torque == 0.0);
  }

  SECTION("viscous damping decays velocity at the analytic one-step rate") {
    const double dt = 1e-3;
    RigidBody b = free_body({0.0, 0.0}, 0.0, {2.0, -1.0}, 3.0);
    b.damping = 0.9;
    integrate_rigid(b, {}, {}, g0, dt);
    REQUIRE(b.twist.lin.x == Catch::Approx(2.0 * (1.0 - 0.9 / b.mass * dt)).epsilon(1e-14));
    REQUIRE(b.twist.ang == Catch::Approx(3.0 * (1.0 - 0.9 / b.inertia * dt)).epsilon(1e-14));
  }
}

TEST_CASE("hinge dynamics", "[rigid]") {
  SECTION("pendulum period matches 2 pi sqrt(I_a / (m g L)) within 2%") {
    const double L = 0.3;
    RigidBody b = hinge_body({0.4, 0.9}, {0.0, -L}, 0.05, 0.0);
    const Vec2 grav{0.0, -9.8};
    const double dt = 1e-4;
    const double ia = b.inertia + b.mass * L * L;
    const double period_ref = 2.0 * kPi * std::sqrt(ia / (b.mass * 9.8 * L));

    std::vector<double> crossings;
    double prev_theta = b.theta, t = 0.0;
    const int steps = static_cast<int>(std::ceil(10.5 * period_ref / dt));
    for (int k = 0; k < steps; ++k) {
      integrate_rigid(b, {}, {}, grav, dt);
      t += dt;
      if (prev_theta != 0.0 && ((prev_theta < 0.0) != (b.theta < 0.0))) {
        const double frac = prev_theta / (prev_theta - b.theta);
        crossings.push_back(t - dt + frac * dt);
      }
      prev_theta = b.theta;
    }
    REQUIRE(crossings.size() >= 20);
    const double period = 2.0 * (crossings.back() - crossings.front()) /
                          static_cast<double>(crossings.size() - 1);
    REQUIRE(std::abs(period - period_ref) / period_ref < 0.02);
  }

  SECTION("anchor point never drifts") {
    RigidBody b = hinge_body({0.25, 0.6}, {0.22, -0.14}, 1.2, -2.0);
    std::mt19937_64 rng(77);
    double worst = 0.0;
    for (int k = 0; k < 10000; ++k) {
      Wrench w{fdcheck::random_vec(rng, -5.0, 5.0), 0.4 * fdcheck::random_vec(rng).x};
      integrate_rigid(b, w, {}, {0.0, -9.8}, 1e-3);
      const Vec2 back = b.pose.p - rotation(b.theta) * b.r0;
      worst = std::max(worst, norm(back - b.anchor));
    }
    REQUIRE(worst < 1e-12);
  }

  SECTION("force through the anchor produces no angular acceleration") {
    // exactly representable lever arm and force: the torque cancels bitwise
    RigidBody b = hinge_body({0.5, 0.5}, {0.25, -0.5}, 0.0, 0.0);
    const Vec2 r = b.pose.p - b.anchor;
    integrate_rigid(b, {r * 8.0, 0.0}, {}, Vec2::zero(), 1e-3);
    REQUIRE(b.thetadot == 0.0);

    // generic angle: cancellation only up to rounding of the two products
    RigidBody c = hinge_body({0.5, 0.5}, {0.0, -0.3}, 0.4, 0.0);
    const Vec2 rc = c.pose.p - c.anchor;
    integrate_rigid(c, {rc * 7.0, 0.0}, {}, Vec2::zero(), 1e-3);
    REQUIRE(std::abs(c.thetadot) < 1e-15);
  }

  SECTION("horizontal rod sees the textbook gravity acceleration") {
    // theta = pi/2 puts the COM level with the anchor; angular acceleration
    // should be -m g L / I_a after one small step.
    const double L = 0.25, dt = 1e-5;
    RigidBody b = hinge_body({0.0, 0.0}, {0.0, -L}, kPi / 2.0, 0.0);
    integrate_rigid(b, {}, {}, {0.0, -9.8}, dt);
    const double ia = b.inertia + b.mass * L * L;
    REQUIRE(b.thetadot / dt == Catch::Approx(-b.mass * 9.8 * L / ia).epsilon(1e-12));
  }

  SECTION("pose and twist stay consistent with the generalized state") {
    RigidBody b = hinge_body({0.3, 0.3}, {0.1, 0.2}, -0.6, 1.7);
    for (int k = 0; k < 50; ++k) integrate_rigid(b, {{0.5, 0.2}, 0.05}, {}, {0.0, -9.8}, 1e-3);
    const Vec2 r = rotation(b.theta) * b.r0;
    REQUIRE(norm(b.pose.p - (b.anchor + r)) < 1e-15);
    REQUIRE(b.pose.th == b.theta);
    REQUIRE(norm(b.twist.lin - perp(r) * b.thetadot) < 1e-15);
    REQUIRE(b.twist.ang == b.thetadot);
  }
}

TEST_CASE("kinematic mode", "[rigid]") {
  SECTION("follows the commanded velocity and ignores wrenches") {
    RigidBody a, b;
    a.mode = b.mode = RigidMode::Kinematic;
    a.pose = b.pose = {{0.1, 0.2}, 0.5};
    const RigidAction cmd{{0.3, -0.4}, 1.1};
    for (int k = 0; k < 200; ++k) {
      integrate_rigid(a, {}, cmd, {0.0, -9.8}, 1e-3);
      integrate_rigid(b, {{55.0, -3.0}, 9.0}, cmd, {0.0, -9.8}, 1e-3);
    }
    REQUIRE(a.pose.p.x == b.pose.p.x);
    REQUIRE(a.pose.p.y == b.pose.p.y);
    REQUIRE(a.pose.th == b.pose.th);
    REQUIRE(a.twist.lin.x == cmd.lin.x);
    REQUIRE(a.twist.ang == cmd.ang);
    REQUIRE(a.pose.p.x == Catch::Approx(0.1 + 0.3 * 0.2).epsilon(1e-12));
  }

  SECTION("adjoint routes nothing into the wrench") {
    RigidBody b;
    b.mode = RigidMode::Kinematic;
    RigidGrad gp, gpre;
    gp.pos = {0.4, -0.2};
    gp.vel = {1.0, 2.0};
    gp.th = 0.3;
    gp.omega = -0.7;
    Wrench gw;
    RigidAction ga;
    integrate_rigid_adjoint(b, {{3.0, 1.0}, 2.0}, {{0.1, 0.1}, 0.1}, {0.0, -9.8}, 1e-2, gp, gpre,
                            gw, ga);
    REQUIRE(gw.force.x == 0.0);
    REQUIRE(gw.force.y == 0.0);
    REQUIRE(gw.torque == 0.0);
    REQUIRE(ga.lin.x == Catch::Approx(1.0 + 0.4 * 1e-2).epsilon(1e-14));
    REQUIRE(ga.ang == Catch::Approx(-0.7 + 0.3 * 1e-2).epsilon(1e-14));
  }
}

TEST_CASE("rigid world-frame distance queries", "[rigid]") {
  SdfHandle circle;
  circle.kind = SdfKind::AnalyticCircle;
  circle.radius = 0.1;
  RigidBody b;
  b.sdf = &circle;
  b.pose = {{0.6, 0.45}, 0.0};

  SECTION("translation offsets the field") {
    const SdfHit hit = rigid_sdf_world(b, {0.6, 0.62});
    REQUIRE(hit.d == Catch::Approx(0.07).epsilon(1e-12));
    REQUIRE(hit.n.y == Catch::Approx(1.0).epsilon(1e-12));
  }

  SECTION("rotation leaves a circle invariant") {
    b.pose.th = 1.234;
    const SdfHit hit = rigid_sdf_world(b, {0.75, 0.45});
    REQUIRE(hit.d == Catch::Approx(0.05).epsilon(1e-10));
    REQUIRE(hit.n.x == Catch::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("rigid rollout adjoints match finite differences", "[rigid]") {
  const Vec2 grav{0.0, -9.8};
  const double dt = 2e-3;
  const int n = 20;

  SECTION("dynamic body with damping") {
    std::vector<Wrench> ws(n);
    std::vector<RigidAction> as(n);
    for (int k = 0; k < n; ++k) {
      ws[k] = {{0.3 * std::sin(0.37 * k), 0.2 * std::cos(0.61 * k)}, 0.04 * std::sin(0.23 * k)};
      as[k] = {{0.05 * std::cos(0.5 * k), -0.03 * std::sin(0.4 * k)}, 0.01 * std::cos(0.8 * k)};
    }
    const Vec2 qp{0.7, -0.3}, qv{0.4, 0.9};
    const double qth = -0.6, qw = 0.25;

    auto roll = [&](const RigidBody& b0, const std::vector<Wrench>& w,
                    const std::vector<RigidAction>& a) {
      RigidBody b = b0;
      for (int k = 0; k < n; ++k) integrate_rigid(b, w[k], a[k], grav, dt);
      return dot(qp, b.pose.p) + qth * b.pose.th + dot(qv, b.twist.lin) + qw * b.twist.ang;
    };

    RigidBody b0 = free_body({0.2, 0.9}, 0.15, {0.3, -0.1}, 0.8);
    b0.damping = 0.7;

    std::vector<RigidBody> states(n);
    {
      RigidBody b = b0;
      for (int k = 0; k < n; ++k) {
        states[k] = b;
        integrate_rigid(b, ws[k], as[k], grav, dt);
      }
    }

    RigidGrad g;
    g.pos = qp;
    g.th = qth;
    g.vel = qv;
    g.omega = qw;
    std::vector<Wrench> gws(n);
    std::vector<RigidAction> gas(n);
    for (int k = n - 1; k >= 0; --k) {
      RigidGrad gpre;
      integrate_rigid_adjoint(states[k], ws[k], as[k], grav, dt, g, gpre, gws[k], gas[k]);
      g = gpre;
    }

    // initial-state gradients
    auto fd_state = [&](auto setter) {
      return fdcheck::scalar_grad(
          [&](double v) {
            RigidBody b = b0;
            setter(b, v);
            return roll(b, ws, as);
          },
          0.0, 1e-6);
    };
    const double fd_px = fd_state([](RigidBody& b, double v) { b.pose.p.x += v; });
    const double fd_py = fd_state([](RigidBody& b, double v) { b.pose.p.y += v; });
    const double fd_th = fd_state([](RigidBody& b, double v) { b.pose.th += v; });
    const double fd_vx = fd_state([](RigidBody& b, double v) { b.twist.lin.x += v; });
    const double fd_vy = fd_state([](RigidBody& b, double v) { b.twist.lin.y += v; });
    const double fd_om = fd_state([](RigidBody& b, double v) { b.twist.ang += v; });
    const double got[6] = {g.pos.x, g.pos.y, g.th, g.vel.x, g.vel.y, g.omega};
    const double ref[6] = {fd_px, fd_py, fd_th, fd_vx, fd_vy, fd_om};
    REQUIRE(fdcheck::max_rel_err(got, ref, 6, 1e-9) < 1e-6);

    // wrench at step 7, action at step 3
    auto fd_wrench = [&](int step, int comp) {
      return fdcheck::scalar_grad(
          [&](double v) {
            std::vector<Wrench> w = ws;
            if (comp == 0) w[step].force.x += v;
            if (comp == 1) w[step].force.y += v;
            if (comp == 2) w[step].torque += v;
            return roll(b0, w, as);
          },
          0.0, 1e-6);
    };
    const double gotw[3] = {gws[7].force.x, gws[7].force.y, gws[7].torque};
    const double refw[3] = {fd_wrench(7, 0), fd_wrench(7, 1), fd_wrench(7, 2)};
    REQUIRE(fdcheck::max_rel_err(gotw, refw, 3, 1e-9) < 1e-6);

    auto fd_action = [&](int step, int comp) {
      return fdcheck::scalar_grad(
          [&](double v) {
            std::vector<RigidAction> a = as;
            if (comp == 0) a[step].lin.x += v;
            if (comp == 1) a[step].lin.y += v;
            if (comp == 2) a[step].ang += v;
            return roll(b0, ws, a);
          },
          0.0, 1e-6);
    };
    const double gota[3] = {gas[3].lin.x, gas[3].lin.y, gas[3].ang};
    const double refa[3] = {fd_action(3, 0), fd_action(3, 1), fd_action(3, 2)};
    REQUIRE(fdcheck::max_rel_err(gota, refa, 3, 1e-9) < 1e-6);
  }

  SECTION("hinge body, loss on the world pose") {
    std::vector<Wrench> ws(n);
    std::vector<RigidAction> as(n);
    for (int k = 0; k < n; ++k) {
      ws[k] = {{0.6 * std::sin(0.43 * k), 0.5 * std::cos(0.29 * k)}, 0.03 * std::cos(0.7 * k)};
      as[k] = {Vec2::zero(), 0.02 * std::sin(0.9 * k)};
    }
    const Vec2 qp{0.8, 0.5}, qv{-0.4, 0.6};
    const double qth = 0.3, qw = -0.2;

    auto roll = [&](double theta0, double thetadot0, const std::vector<Wrench>& w,
                    const std::vector<RigidAction>& a) {
      RigidBody b = hinge_body({0.3, 0.7}, {0.18, -0.11}, theta0, thetadot0);
      b.damping = 0.05;
      for (int k = 0; k < n; ++k) integrate_rigid(b, w[k], a[k], grav, dt);
      return dot(qp, b.pose.p) + qth * b.pose.th + dot(qv, b.twist.lin) + qw * b.twist.ang;
    };

    const double theta0 = 0.7, thetadot0 = -0.4;
    std::vector<RigidBody> states(n);
    RigidBody bend = hinge_body({0.3, 0.7}, {0.18, -0.11}, theta0, thetadot0);
    bend.damping = 0.05;
    for (int k = 0; k < n; ++k) {
      states[k] = bend;
      integrate_rigid(bend, ws[k], as[k], grav, dt);
    }

    RigidGrad g;
    g.pos = qp;
    g.th = qth;
    g.vel = qv;
    g.omega = qw;
    fold_pose_grads(bend, g);
    std::vector<Wrench> gws(n);
    std::vector<RigidAction> gas(n);
    for (int k = n - 1; k >= 0; --k) {
      RigidGrad gpre;
      integrate_rigid_adjoint(states[k], ws[k], as[k], grav, dt, g, gpre, gws[k], gas[k]);
      g = gpre;
    }

    const double fd_th = fdcheck::scalar_grad(
        [&](double v) { return roll(theta0 + v, thetadot0, ws, as); }, 0.0, 1e-6);
    const double fd_thd = fdcheck::scalar_grad(
        [&](double v) { return roll(theta0, thetadot0 + v, ws, as); }, 0.0, 1e-6);
    const double got0[2] = {g.theta, g.thetadot};
    const double ref0[2] = {fd_th, fd_thd};
    REQUIRE(fdcheck::max_rel_err(got0, ref0, 2, 1e-9) < 1e-6);

    auto fd_wrench = [&](int step, int comp) {
      return fdcheck::scalar_grad(
          [&](double v) {
            std::vector<Wrench> w = ws;
            if (comp == 0) w[step].force.x += v;
            if (comp == 1) w[step].force.y += v;
            if (comp == 2) w[step].torque += v;
            return roll(theta0, thetadot0, w, as);
          },
          0.0, 1e-6);
    };
    const double gotw[3] = {gws[9].force.x, gws[9].force.y, gws[9].torque};
    const double refw[3] = {fd_wrench(9, 0), fd_wrench(9, 1), fd_wrench(9, 2)};
    REQUIRE(fdcheck::max_rel_err(gotw, refw, 3, 1e-9) < 1e-6);

    const double fd_act = fdcheck::scalar_grad(
        [&](double v) {
          std::vector<RigidAction> a = as;
          a[2].ang += v;
          return roll(theta0, thetadot0, ws, a);
        },
        0.0, 1e-6);
    REQUIRE(fdcheck::max_rel_err(&gas[2].ang, &fd_act, 1, 1e-9) < 1e-6);
  }

  SECTION("kinematic body, gradients reach only the commands") {
    std::vector<RigidAction> as(n);
    for (int k = 0; k < n; ++k)
      as[k] = {{0.2 * std::sin(0.3 * k), 0.1 * std::cos(0.5 * k)}, 0.3 * std::sin(0.11 * k)};

    auto roll = [&](const Vec2& p0, const std::vector<RigidAction>& a) {
      RigidBody b;
      b.mode = RigidMode::Kinematic;
      b.pose = {p0, 0.0};
      for (int k = 0; k < n; ++k) integrate_rigid(b, {}, a[k], grav, dt);
      return dot(Vec2{0.9, -0.5}, b.pose.p) + 0.4 * b.twist.lin.x + 0.2 * b.pose.th;
    };

    RigidBody b0;
    b0.mode = RigidMode::Kinematic;
    b0.pose = {{0.5, 0.5}, 0.0};
    std::vector<RigidBody> states(n);
    RigidBody b = b0;
    for (int k = 0; k < n; ++k) {
      states[k] = b;
      integrate_rigid(b, {}, as[k], grav, dt);
    }

    RigidGrad g;
    g.pos = {0.9, -0.5};
    g.vel = {0.4, 0.0};
    g.th = 0.2;
    std::vector<Wrench> gws(n);
    std::vector<RigidAction> gas(n);
    for (int k = n - 1; k >= 0; --k) {
      RigidGrad gpre;
      integrate_rigid_adjoint(states[k], {}, as[k], grav, dt, g, gpre, gws[k], gas[k]);
      g = gpre;
    }

    for (int k = 0; k < n; ++k) {
      REQUIRE(gws[k].force.x == 0.0);
      REQUIRE(gws[k].force.y == 0.0);
      REQUIRE(gws[k].torque == 0.0);
    }
    const double fd5x = fdcheck::scalar_grad(
        [&](double v) {
          std::vector<RigidAction> a = as;
          a[5].lin.x += v;
          return roll({0.5, 0.5}, a);
        },
        0.0, 1e-6);
    const double fd5a = fdcheck::scalar_grad(
        [&](double v) {
          std::vector<RigidAction> a = as;
          a[5].ang += v;
          return roll({0.5, 0.5}, a);
        },
        0.0, 1e-6);
    const double got[2] = {gas[5].lin.x, gas[5].ang};
    const double ref[2] = {fd5x, fd5a};
    REQUIRE(fdcheck::max_rel_err(got, ref, 2, 1e-9) < 1e-6);
    REQUIRE(g.pos.x == Catch::Approx(0.9));
    REQUIRE(g.pos.y == Catch::Approx(-0.5));
  }
}
