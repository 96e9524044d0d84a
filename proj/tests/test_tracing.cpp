#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "fd_check.hpp"
#include "softsim/tracing.hpp"

using namespace softsim;

namespace {

// Even-odd rule: inside test by counting upward edge crossings left of x.
bool inside_loop(const ClothMesh& mesh, const Vec2& q) {
  bool in = false;
  for (size_t f = 0; f < mesh.fcount(); ++f) {
    const Vec2 a = mesh.verts[mesh.faces[f][0]];
    const Vec2 b = mesh.verts[mesh.faces[f][1]];
    if ((a.y > q.y) != (b.y > q.y)) {
      const double xc = a.x + (q.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (q.x < xc) in = !in;
    }
  }
  return in;
}

NearestFace brute_nearest(const Vec2& x, const ClothMesh& mesh) {
  NearestFace best;
  best.at.dist2 = std::numeric_limits<double>::infinity();
  for (int f = 0; f < static_cast<int>(mesh.fcount()); ++f) {
    const SegmentPoint sp = point_segment(x, mesh.verts[mesh.faces[f][0]],
                                          mesh.verts[mesh.faces[f][1]]);
    if (sp.dist2 < best.at.dist2) {
      best.face = f;
      best.at = sp;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("mesh construction and the line reader") {
  ClothMesh chain = make_chain({0.0, 0.0}, {1.0, 0.0}, 4, 0.1);
  REQUIRE(chain.vcount() == 5);
  REQUIRE(chain.fcount() == 4);
  REQUIRE(chain.rest_len[0] == Catch::Approx(0.25));
  REQUIRE(norm(chain.face_normal(0) - Vec2{0.0, 1.0}) < 1e-15);

  ClothMesh loop = make_loop({0.0, 0.0}, 0.5, 8, 0.1);
  REQUIRE(loop.fcount() == 8);
  double per = 0.0;
  for (double l : loop.rest_len) per += l;
  REQUIRE(per == Catch::Approx(8 * 2 * 0.5 * std::sin(3.14159265358979323846 / 8)));

  std::istringstream src("# comment\nv 0 0\nv 1 0\nv 1 1\nl 1 2\nl 2 3\n");
  ClothMesh loaded = load_segment_mesh(src, 0.2);
  REQUIRE(loaded.vcount() == 3);
  REQUIRE(loaded.fcount() == 2);
  REQUIRE(loaded.faces[1] == std::array<int, 2>{1, 2});
  REQUIRE(loaded.mass[0] == 0.2);

  std::istringstream bad("v 0 0\nl 1 5\n");
  REQUIRE_THROWS(load_segment_mesh(bad, 0.1));
  std::istringstream junk("w 1 2\n");
  REQUIRE_THROWS(load_segment_mesh(junk, 0.1));
}

TEST_CASE("face neighborhoods: depth, membership, orientation signs") {
  ClothMesh chain = make_chain({0.0, 0.0}, {1.0, 0.0}, 3, 0.1);

  SECTION("depth 0 is just the seed") {
    const NeighborhoodTable t = build_neighborhoods(chain, 0);
    for (int f = 0; f < 3; ++f) {
      REQUIRE(t.nbr[f].size() == 1);
      REQUIRE(t.nbr[f][0] == std::pair<int, int>{f, 1});
    }
  }

  SECTION("middle face of a 3-chain sees all faces at depth 1") {
    const NeighborhoodTable t = build_neighborhoods(chain, 1);
    REQUIRE(t.nbr[1].size() == 3);
    REQUIRE(t.sign_of(1, 0) == 1);
    REQUIRE(t.sign_of(1, 2) == 1);
    REQUIRE(t.sign_of(0, 2) == 0);  // two hops away, outside depth 1
  }

  SECTION("8-loop at depth 2 has 5 faces per neighborhood, all aligned") {
    ClothMesh loop = make_loop({0.0, 0.0}, 0.5, 8, 0.1);
    const NeighborhoodTable t = build_neighborhoods(loop, 2);
    for (int f = 0; f < 8; ++f) {
      REQUIRE(t.nbr[f].size() == 5);
      for (const auto& [g, s] : t.nbr[f]) REQUIRE(s == 1);
    }
    REQUIRE(t.sign_of(0, 2) == 1);
    REQUIRE(t.sign_of(0, 6) == 1);
    REQUIRE(t.sign_of(0, 3) == 0);
  }

  SECTION("a reversed face carries sign -1 relative to its neighbors") {
    ClothMesh flipped = make_chain({0.0, 0.0}, {1.0, 0.0}, 3, 0.1);
    std::swap(flipped.faces[1][0], flipped.faces[1][1]);
    const NeighborhoodTable t = build_neighborhoods(flipped, 2);
    REQUIRE(t.sign_of(0, 1) == -1);
    REQUIRE(t.sign_of(0, 2) == 1);  // two flips cancel
    REQUIRE(t.sign_of(1, 0) == -1);
    REQUIRE(t.sign_of(1, 2) == -1);
  }

  SECTION("non-manifold vertex is rejected") {
    ClothMesh bad;
    bad.verts = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
    bad.faces = {{0, 1}, {0, 2}, {0, 3}};
    bad.finalize(0.1);
    REQUIRE_THROWS(build_neighborhoods(bad, 1));
  }
}

TEST_CASE("nearest face: analytic probes and the brute-force oracle") {
  SECTION("perpendicular foot and endpoint clamping") {
    ClothMesh chain = make_chain({0.0, 0.0}, {1.0, 0.0}, 1, 0.1);
    SpatialHash hash;
    hash.build(chain, 2.0 * chain.max_face_extent());
    const NearestFace mid = nearest_face({0.5, 0.01}, chain, hash, 1.0);
    REQUIRE(mid.face == 0);
    REQUIRE(mid.at.t == Catch::Approx(0.5));
    REQUIRE(mid.dist() == Catch::Approx(0.01));
    const NearestFace tip = nearest_face({1.3, 0.4}, chain, hash, 1.0);
    REQUIRE(tip.face == 0);
    REQUIRE(tip.at.t == 1.0);
    REQUIRE(tip.dist() == Catch::Approx(0.5));
    const NearestFace none = nearest_face({5.0, 5.0}, chain, hash, 1.0);
    REQUIRE(none.face == -1);
  }

  SECTION("1000 random queries match brute force exactly") {
    std::mt19937_64 rng(311);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    // Random-walk chain of 100 faces.
    ClothMesh mesh;
    Vec2 p{0.0, 0.0};
    mesh.verts.push_back(p);
    for (int i = 0; i < 100; ++i) {
      p += Vec2{0.03 + 0.02 * std::abs(u(rng)), 0.04 * u(rng)};
      mesh.verts.push_back(p);
      mesh.faces.push_back({i, i + 1});
    }
    mesh.finalize(0.1);
    SpatialHash hash;
    hash.build(mesh, 2.0 * mesh.max_face_extent());
    int in_range = 0;
    for (int q = 0; q < 1000; ++q) {
      const Vec2 x{u(rng) * 3.0 + 1.5, u(rng) * 1.5};
      const NearestFace got = nearest_face(x, mesh, hash, 0.8);
      const NearestFace want = brute_nearest(x, mesh);
      if (want.at.dist2 > 0.8 * 0.8) {
        REQUIRE(got.face == -1);
        continue;
      }
      ++in_range;
      REQUIRE(got.face == want.face);
      REQUIRE(got.at.dist2 == want.at.dist2);
    }
    REQUIRE(in_range > 400);
  }
}

TEST_CASE("penetration state: constancy, single flips, locality reset") {
  ClothMesh chain = make_chain({0.0, 0.0}, {1.0, 0.0}, 5, 0.1);
  const NeighborhoodTable topo = build_neighborhoods(chain, 2);
  SpatialHash hash;
  hash.build(chain, 2.0 * chain.max_face_extent());

  SECTION("oscillating on one side keeps z constant") {
    TrackState st;
    for (int i = 0; i < 50; ++i) {
      const Vec2 x{0.48 + 0.02 * std::sin(0.3 * i), 0.02 + 0.015 * std::cos(0.5 * i)};
      const NearestFace nf = nearest_face(x, chain, hash, 0.5);
      REQUIRE(update_penetration_state(st, chain, topo, nf, x));
      REQUIRE(st.z == 0);
    }
    REQUIRE(st.home == 1);  // above the chain = left of +x direction
  }

  SECTION("crossing flips z exactly once, crossing back clears it") {
    TrackState st;
    const double ys[6] = {0.03, 0.012, -0.011, -0.02, -0.004, 0.013};
    int flips = 0;
    uint8_t prev = 0;
    for (double y : ys) {
      const Vec2 x{0.52, y};
      const NearestFace nf = nearest_face(x, chain, hash, 0.5);
      update_penetration_state(st, chain, topo, nf, x);
      if (st.z != prev) ++flips;
      prev = st.z;
    }
    REQUIRE(flips == 2);
    REQUIRE(st.z == 0);
  }

  SECTION("a jump beyond the neighborhood reseeds instead of flipping") {
    TrackState st;
    const Vec2 x0{0.08, 0.01};
    update_penetration_state(st, chain, topo, nearest_face(x0, chain, hash, 0.5), x0);
    REQUIRE(st.face == 0);
    // Teleport far down the chain to the underside: locality violated.
    const Vec2 x1{0.92, -0.01};
    REQUIRE_FALSE(update_penetration_state(st, chain, topo, nearest_face(x1, chain, hash, 0.5), x1));
    REQUIRE(st.z == 0);          // reset, not guessed
    REQUIRE(st.home == -1);      // re-seeded from the current side
    REQUIRE(st.face == 4);
  }

  SECTION("state updates only depend on the visited path (replay identical)") {
    std::mt19937_64 rng(331);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<Vec2> path;
    Vec2 x{0.5, 0.05};
    for (int i = 0; i < 80; ++i) {
      x += Vec2{0.01 * u(rng), 0.012 * u(rng)};
      path.push_back(x);
    }
    std::vector<uint8_t> za, zb;
    for (int run = 0; run < 2; ++run) {
      TrackState st;
      auto& out = run == 0 ? za : zb;
      for (const Vec2& q : path) {
        update_penetration_state(st, chain, topo, nearest_face(q, chain, hash, 0.5), q);
        out.push_back(st.z);
      }
    }
    REQUIRE(za == zb);
  }
}

TEST_CASE("traced state matches the ray-cast oracle on a closed loop") {
  const Vec2 c{0.0, 0.0};
  const double r = 0.3;
  ClothMesh loop = make_loop(c, r, 24, 0.1);
  ClothCollider collider(loop);
  collider.track_radius = 2.0 * r;
  FaultLog faults;
  collider.faults = &faults;

  std::mt19937_64 rng(337);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const int N = 40;
  std::vector<Vec2> xs(N);
  std::vector<bool> seed_inside(N);
  for (int p = 0; p < N; ++p) {
    const double ang = 3.14159 * u(rng);
    xs[p] = c + Vec2{std::cos(ang), std::sin(ang)} * (1.6 * r + 0.4 * r * u(rng));
    seed_inside[p] = inside_loop(loop, xs[p]);
    REQUIRE_FALSE(seed_inside[p]);  // all start outside
  }
  collider.begin_substep(xs);

  int mismatches = 0;
  int crossings_seen = 0;
  for (int step = 0; step < 200; ++step) {
    for (int p = 0; p < N; ++p) {
      // Drift toward a ring inside the loop so plenty of walkers cross the
      // mesh, while staying away from the loop center where "nearest face"
      // degenerates (the medial axis of a closed loop).
      const Vec2 dir = xs[p] - c;
      const Vec2 target = c + dir / norm(dir) * (0.55 * r);
      xs[p] += (target - xs[p]) * 0.04 + Vec2{0.012 * u(rng), 0.012 * u(rng)};
    }
    collider.begin_substep(xs);
    for (int p = 0; p < N; ++p) {
      const bool in_now = inside_loop(loop, xs[p]);
      if (in_now) ++crossings_seen;
      const uint8_t want = in_now != seed_inside[p] ? 1 : 0;
      if (collider.state[p].z != want) ++mismatches;
    }
  }
  REQUIRE(crossings_seen > 500);  // the walk really does cross the mesh
  REQUIRE(mismatches == 0);
  REQUIRE(faults.tracing_reseeds == 0);

  SECTION("signed query agrees with the oracle sign") {
    int checked = 0;
    for (int p = 0; p < N; ++p) {
      double d;
      Vec2 n;
      if (!collider.query(p, xs[p], d, n)) continue;
      ++checked;
      const bool in_now = inside_loop(loop, xs[p]);
      if (in_now) {
        REQUIRE(d < 0.0);
      } else {
        REQUIRE(d > 0.0);
      }
    }
    REQUIRE(checked > 10);
  }
}

TEST_CASE("signed distance sign convention and barycentric coupling") {
  ClothMesh chain = make_chain({0.0, 0.0}, {1.0, 0.0}, 4, 0.1);
  chain.vel = {{1, 0}, {1, 0}, {0, 1}, {0, 1}, {0, 1}};
  ClothCollider collider(chain);
  collider.track_radius = 0.5;
  std::vector<Vec2> xs = {{0.52, 0.02}, {0.52, 0.02}};
  collider.begin_substep(xs);

  double d;
  Vec2 n;
  REQUIRE(collider.query(0, xs[0], d, n));
  REQUIRE(d == Catch::Approx(0.02));
  REQUIRE(norm(n - Vec2{0.0, 1.0}) < 1e-12);
  // Force the crossed state: same geometry reads negative with the same n.
  collider.state[1].z = 1;
  REQUIRE(collider.query(1, xs[1], d, n));
  REQUIRE(d == Catch::Approx(-0.02));
  REQUIRE(norm(n - Vec2{0.0, 1.0}) < 1e-12);

  SECTION("velocity interpolates by the clamped barycentric weights") {
    // x = 0.52 on face 2 ([0.5, 0.75]) at t = 0.08: verts 2 and 3.
    const Vec2 vc = collider.velocity_at(0, {0.52, 0.02});
    REQUIRE(norm(vc - Vec2{0.0, 1.0}) < 1e-12);
    const Vec2 mid = collider.velocity_at(0, {0.375, -0.05});  // face 1 midpoint
    REQUIRE(norm(mid - Vec2{0.5, 0.5}) < 1e-12);
  }

  SECTION("impulses distribute exactly and conserve the total") {
    collider.clear_ledger();
    collider.add_impulse(0, {0.375, 0.01}, {0.0, -2.0});  // face 1 midpoint
    REQUIRE(norm(collider.impulse[1] - Vec2{0.0, -1.0}) < 1e-15);
    REQUIRE(norm(collider.impulse[2] - Vec2{0.0, -1.0}) < 1e-15);
    collider.clear_ledger();
    std::mt19937_64 rng(347);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Vec2 applied = Vec2::zero();
    for (int i = 0; i < 50; ++i) {
      const Vec2 at{0.05 + 0.9 * std::abs(u(rng)), 0.1 * u(rng)};
      const Vec2 imp{u(rng), u(rng)};
      collider.add_impulse(0, at, imp);
      applied += imp;
    }
    Vec2 got = Vec2::zero();
    for (const Vec2& v : collider.impulse) got += v;
    REQUIRE(norm(got - applied) < 1e-12);
  }

  SECTION("tracing disabled never reports penetration") {
    ClothCollider naive(chain);
    naive.track_radius = 0.5;
    naive.tracing = false;
    naive.begin_substep(xs);
    REQUIRE(naive.query(0, {0.52, -0.02}, d, n));
    REQUIRE(d == Catch::Approx(0.02));
    REQUIRE(norm(n - Vec2{0.0, -1.0}) < 1e-12);  // radial, toward the point
  }
}

TEST_CASE("collider reverse passes match finite differences") {
  std::mt19937_64 rng(353);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double h = 1e-6;

  // Fresh collider per evaluation so finite differences see a pure function.
  const auto build = [&](const std::vector<Vec2>& verts, const std::vector<Vec2>& vels) {
    ClothMesh m;
    m.verts = verts;
    const int n = static_cast<int>(verts.size());
    for (int i = 0; i < n - 1; ++i) m.faces.push_back({i, i + 1});
    m.finalize(0.1);
    m.vel = vels;
    auto col = std::make_unique<ClothCollider>(m);
    col->track_radius = 0.6;
    return col;
  };

  std::vector<Vec2> verts = {{0.0, 0.0}, {0.3, 0.05}, {0.55, -0.02}, {0.9, 0.06}};
  std::vector<Vec2> vels;
  for (size_t i = 0; i < verts.size(); ++i) vels.push_back({u(rng), u(rng)});
  const Vec2 x0{0.42, 0.09};  // interior of face 1, t well inside (0, 1)
  std::vector<Vec2> xs = {x0};

  SECTION("query_vjp: distance and normal paths") {
    const Vec2 w_n = fdcheck::random_vec(rng);
    const double w_d = u(rng);
    const auto loss = [&](const std::vector<Vec2>& vv, const Vec2& xx) {
      auto col = build(vv, vels);
      col->begin_substep({xx});
      double d;
      Vec2 n;
      REQUIRE(col->query(0, xx, d, n));
      return w_d * d + dot(w_n, n);
    };
    auto col = build(verts, vels);
    col->begin_substep(xs);
    col->clear_grads();
    Vec2 g_x = Vec2::zero();
    col->query_vjp(0, x0, w_d, w_n, g_x);

    const Vec2 fd_x = fdcheck::grad([&](const Vec2& p) { return loss(verts, p); }, x0, h);
    REQUIRE(fdcheck::max_rel_err(g_x, fd_x, 1e-6) < 2e-3);
    for (int v = 1; v <= 2; ++v) {  // face 1 endpoints
      const Vec2 fd_v = fdcheck::grad(
          [&](const Vec2& p) {
            std::vector<Vec2> vv = verts;
            vv[v] = p;
            return loss(vv, x0);
          },
          verts[v], h);
      REQUIRE(fdcheck::max_rel_err(col->g_verts[v], fd_v, 1e-6) < 2e-3);
    }
  }

  SECTION("velocity_vjp: vertex velocity and barycentric paths") {
    const Vec2 w = fdcheck::random_vec(rng);
    const auto loss = [&](const std::vector<Vec2>& vv, const std::vector<Vec2>& ve,
                          const Vec2& xx) {
      auto col = build(vv, ve);
      col->begin_substep({xx});
      return dot(w, col->velocity_at(0, xx));
    };
    auto col = build(verts, vels);
    col->begin_substep(xs);
    col->clear_grads();
    Vec2 g_x = Vec2::zero();
    col->velocity_vjp(0, x0, w, g_x);

    const Vec2 fd_x = fdcheck::grad([&](const Vec2& p) { return loss(verts, vels, p); }, x0, h);
    REQUIRE(fdcheck::max_rel_err(g_x, fd_x, 1e-6) < 2e-3);
    for (int v = 1; v <= 2; ++v) {
      const Vec2 fd_pos = fdcheck::grad(
          [&](const Vec2& p) {
            std::vector<Vec2> vv = verts;
            vv[v] = p;
            return loss(vv, vels, x0);
          },
          verts[v], h);
      REQUIRE(fdcheck::max_rel_err(col->g_verts[v], fd_pos, 1e-6) < 2e-3);
      const Vec2 fd_vel = fdcheck::grad(
          [&](const Vec2& p) {
            std::vector<Vec2> ve = vels;
            ve[v] = p;
            return loss(verts, ve, x0);
          },
          vels[v], h);
      REQUIRE(fdcheck::max_rel_err(col->g_vel[v], fd_vel, 1e-6) < 2e-3);
    }
  }

  SECTION("impulse_vjp: ledger gradient pulls back to impulse, point, vertices") {
    const Vec2 imp{0.7 * u(rng), 0.7 * u(rng)};
    std::vector<Vec2> G(verts.size());
    for (auto& g : G) g = fdcheck::random_vec(rng);
    const auto loss = [&](const std::vector<Vec2>& vv, const Vec2& xx, const Vec2& ii) {
      auto col = build(vv, vels);
      col->begin_substep({xx});
      col->clear_ledger();
      col->add_impulse(0, xx, ii);
      double out = 0.0;
      for (size_t v = 0; v < vv.size(); ++v) out += dot(G[v], col->impulse[v]);
      return out;
    };
    auto col = build(verts, vels);
    col->begin_substep(xs);
    col->clear_grads();
    col->g_impulse = G;
    Vec2 g_imp = Vec2::zero(), g_x = Vec2::zero();
    col->impulse_vjp(0, x0, imp, g_imp, g_x);

    const Vec2 fd_imp = fdcheck::grad([&](const Vec2& p) { return loss(verts, x0, p); }, imp, h);
    REQUIRE(fdcheck::max_rel_err(g_imp, fd_imp, 1e-6) < 2e-3);
    const Vec2 fd_x = fdcheck::grad([&](const Vec2& p) { return loss(verts, p, imp); }, x0, h);
    REQUIRE(fdcheck::max_rel_err(g_x, fd_x, 1e-6) < 2e-3);
    for (int v = 1; v <= 2; ++v) {
      const Vec2 fd_v = fdcheck::grad(
          [&](const Vec2& p) {
            std::vector<Vec2> vv = verts;
            vv[v] = p;
            return loss(vv, x0, imp);
          },
          verts[v], h);
      REQUIRE(fdcheck::max_rel_err(col->g_verts[v], fd_v, 1e-6) < 2e-3);
    }
  }
}
