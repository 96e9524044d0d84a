#pragma once
// Two-way coupling loop: K MPM substeps against manipulators frozen at the
// step boundary, reaction ledgers averaged over the window, then one
// manipulator step. The reverse pass walks a checkpoint tape and runs the
// manipulator adjoints before the substep adjoints so gradients flow through
// both the state chain and the averaged-force chain.

#include <functional>

#include "cloth.hpp"
#include "contact.hpp"
#include "mpm.hpp"
#include "rigid.hpp"

namespace softsim {

struct EngineConfig {
  int substeps = 10;       // MPM substeps per coupled step
  int cloth_substeps = 1;  // cloth integrator substeps per coupled step
  ContactModel model = ContactModel::Forecast;
  ContactParams contact;
  bool record = true;      // keep per-substep snapshots so backward can run
};

struct CoupledState {
  ParticleSet ps;
  std::vector<RigidBody> bodies;
  std::vector<ClothState> cloths;
};

// Per-step control input. Rigid entries follow each body's mode (wrench /
// hinge torque / velocity command); cloth entries are control-point
// velocities; particle_impulse (optional) is momentum injected at the first
// substep of the step.
struct Action {
  std::vector<RigidAction> rigid;
  std::vector<std::vector<Vec2>> cloth_ctrl;
  std::vector<Vec2> particle_impulse;

  static Action zero_for(const CoupledState& s) {
    Action a;
    a.rigid.resize(s.bodies.size());
    a.cloth_ctrl.resize(s.cloths.size());
    for (size_t i = 0; i < s.cloths.size(); ++i)
      a.cloth_ctrl[i].assign(s.cloths[i].control.size(), Vec2::zero());
    return a;
  }
};

// Gradient w.r.t. one CoupledState; the particle slots live inside the MPM
// accumulator (x, v, F, C, J).
struct CoupledGrad {
  MpmAdjoint mpm;
  std::vector<RigidGrad> bodies;
  std::vector<ClothGrad> cloths;

  void resize(const CoupledState& s, int grid_res) {
    mpm.resize(s.ps.size(), static_cast<size_t>(grid_res) * grid_res);
    bodies.assign(s.bodies.size(), RigidGrad{});
    cloths.resize(s.cloths.size());
    for (size_t i = 0; i < s.cloths.size(); ++i) cloths[i].resize(s.cloths[i].mesh.vcount());
  }
};

// Dynamic particle fields plus tracker side-states at one substep boundary.
struct SubstepSnap {
  std::vector<Vec2> x, v;
  std::vector<Mat2> F, C;
  std::vector<double> J;
  std::vector<std::vector<TrackState>> tracks;  // per cloth, as queried
};

struct ClothSubSnap {
  std::vector<Vec2> verts, vel;
};

struct StepRecord {
  CoupledState state0;                            // coupled state at step start
  std::vector<std::vector<TrackState>> tracks0;   // tracker state at step start
  Action action;
  std::vector<Wrench> wrench;                     // averaged ledger per body
  std::vector<std::vector<Vec2>> cloth_force;     // averaged ledger per cloth vertex
  std::vector<SubstepSnap> subs;                  // one per MPM substep
  std::vector<std::vector<ClothSubSnap>> cloth_subs;  // per cloth, per cloth substep
};

struct Tape {
  std::vector<StepRecord> steps;
  CoupledState final_state;
  std::vector<std::vector<TrackState>> final_tracks;
};

// Direct loss gradient at a step boundary: called with n = T .. 0 and the
// state at that boundary; adds dL/ds^n into g.
using LossGradFn = std::function<void(int boundary, const CoupledState& s, CoupledGrad& g)>;

class CoupledSim {
 public:
  MpmParams prm;
  EngineConfig cfg;
  CoupledState state;
  FaultLog faults;
  double cfl_max = 0.0;

  double step_dt() const { return prm.dt * cfg.substeps; }

  // Build the per-cloth collider shells (topology, tracker slots) and check
  // integrator stability. Call once after filling `state`.
  void init() {
    cloth_colliders.clear();
    cloth_colliders.reserve(state.cloths.size());
    for (auto& c : state.cloths) {
      c.init();
      validate_cloth_dt(c, step_dt() / cfg.cloth_substeps);
      cloth_colliders.emplace_back(c.mesh);
      cloth_colliders.back().faults = &faults;
    }
    grid.configure(prm.res);
  }

  // Rewind to a same-topology state (optimizer re-runs): trackers reseed,
  // ledgers and fault counters start fresh.
  void reset(const CoupledState& s0) {
    state = s0;
    faults = FaultLog{};
    cfl_max = 0.0;
    for (auto& cc : cloth_colliders) {
      cc.state.clear();
      cc.clear_ledger();
    }
  }

  void step(const Action& a_in, StepRecord* rec) {
    // Fill in omitted entries so the tape always records a fully-sized action.
    Action a = a_in;
    a.rigid.resize(state.bodies.size());
    a.cloth_ctrl.resize(state.cloths.size());
    for (size_t i = 0; i < state.cloths.size(); ++i)
      if (a.cloth_ctrl[i].size() != state.cloths[i].control.size())
        a.cloth_ctrl[i].assign(state.cloths[i].control.size(), Vec2::zero());
    const double dtm = step_dt();
    const int K = cfg.substeps;
    if (rec) {
      rec->state0 = state;
      rec->tracks0.resize(cloth_colliders.size());
      for (size_t i = 0; i < cloth_colliders.size(); ++i)
        rec->tracks0[i] = cloth_colliders[i].state;
      rec->action = a;
      rec->subs.clear();
      rec->subs.reserve(K);
    }

    // Manipulators act as frozen boundary conditions for the whole window.
    ColliderSet cs;
    freeze_colliders(cs);
    cs.clear_ledgers();

    for (int k = 0; k < K; ++k) {
      for (auto& cc : cloth_colliders) cc.begin_substep(state.ps.x);
      if (rec) {
        rec->subs.push_back(snapshot());
        for (auto& cc : cloth_colliders) rec->subs.back().tracks.push_back(cc.state);
      }
      substep(cs, k == 0 ? &a : nullptr);
    }

    // Average the accumulated reactions and advance the manipulators.
    if (rec) {
      rec->wrench.resize(state.bodies.size());
      rec->cloth_force.resize(state.cloths.size());
      rec->cloth_subs.assign(state.cloths.size(), {});
    }
    for (size_t i = 0; i < state.bodies.size(); ++i) {
      const Wrench w{cs.rigid[i].force / static_cast<double>(K),
                     cs.rigid[i].torque / static_cast<double>(K)};
      if (rec) rec->wrench[i] = w;
      integrate_rigid(state.bodies[i], w, a.rigid[i], prm.gravity, dtm);
    }
    for (size_t i = 0; i < state.cloths.size(); ++i) {
      ClothState& c = state.cloths[i];
      std::vector<Vec2> fext(c.mesh.vcount());
      for (int v = 0; v < c.mesh.vcount(); ++v) fext[v] = cloth_colliders[i].impulse[v] / dtm;
      if (rec) rec->cloth_force[i] = fext;
      const double dtc = dtm / cfg.cloth_substeps;
      for (int s = 0; s < cfg.cloth_substeps; ++s) {
        if (rec) rec->cloth_subs[i].push_back({c.mesh.verts, c.mesh.vel});
        cloth_step(c, fext, a.cloth_ctrl[i], dtc);
      }
    }
  }

  // T coupled steps; fills the tape when given (and cfg.record).
  void rollout(const std::vector<Action>& actions, Tape* tape) {
    if (tape) {
      tape->steps.clear();
      tape->steps.resize(actions.size());
    }
    for (size_t n = 0; n < actions.size(); ++n)
      step(actions[n], tape && cfg.record ? &tape->steps[n] : nullptr);
    if (tape) {
      tape->final_state = state;
      tape->final_tracks.resize(cloth_colliders.size());
      for (size_t i = 0; i < cloth_colliders.size(); ++i)
        tape->final_tracks[i] = cloth_colliders[i].state;
    }
  }

  // Reverse pass over a recorded rollout. `add_loss` supplies direct loss
  // gradients at each boundary. On return `g` holds dL/d(initial state) and
  // g_actions (resized) holds dL/d(each step's action).
  void backward(const Tape& tape, const LossGradFn& add_loss, CoupledGrad& g,
                std::vector<Action>& g_actions) {
    const int T = static_cast<int>(tape.steps.size());
    const int K = cfg.substeps;
    const double dtm = step_dt();
    g.resize(tape.final_state, prm.res);
    g_actions.assign(T, Action{});
    add_loss(T, tape.final_state, g);

    for (int n = T - 1; n >= 0; --n) {
      const StepRecord& R = tape.steps[n];
      const CoupledState& post = n + 1 < T ? tape.steps[n + 1].state0 : tape.final_state;
      Action& ga = g_actions[n];
      ga = Action::zero_for(R.state0);

      // ---- adjoint of the manipulator updates -------------------------------
      std::vector<Wrench> g_wrench(R.state0.bodies.size());
      for (size_t i = 0; i < R.state0.bodies.size(); ++i) {
        RigidGrad gb = g.bodies[i];
        fold_pose_grads(post.bodies[i], gb);
        RigidGrad gpre;
        integrate_rigid_adjoint(R.state0.bodies[i], R.wrench[i], R.action.rigid[i], prm.gravity,
                                dtm, gb, gpre, g_wrench[i], ga.rigid[i]);
        g.bodies[i] = gpre;
      }
      for (size_t i = 0; i < R.state0.cloths.size(); ++i) {
        ClothGrad cg = g.cloths[i];
        ClothState scratch = R.state0.cloths[i];
        std::vector<Vec2> g_fext(scratch.mesh.vcount(), Vec2::zero());
        ga.cloth_ctrl[i].assign(scratch.control.size(), Vec2::zero());
        const double dtc = dtm / cfg.cloth_substeps;
        for (int s = cfg.cloth_substeps - 1; s >= 0; --s) {
          scratch.mesh.verts = R.cloth_subs[i][s].verts;
          scratch.mesh.vel = R.cloth_subs[i][s].vel;
          std::vector<Vec2> ge, gc;
          adjoint_cloth_step(scratch, R.cloth_force[i], R.action.cloth_ctrl[i], dtc, cg, ge, gc);
          for (size_t v = 0; v < ge.size(); ++v) g_fext[v] += ge[v];
          for (size_t v = 0; v < gc.size(); ++v) ga.cloth_ctrl[i][v] += gc[v];
        }
        g.cloths[i] = cg;
        // fext = (sum of substep impulses) / dtm
        cloth_colliders[i].clear_grads();
        for (size_t v = 0; v < g_fext.size(); ++v)
          cloth_colliders[i].g_impulse[v] = g_fext[v] / dtm;
      }

      // ---- adjoint of the K MPM substeps ------------------------------------
      ColliderSet cs;
      restore_colliders(cs, R.state0);
      for (size_t i = 0; i < cs.rigid.size(); ++i) {
        RigidCollider& rc = cs.rigid[i];
        rc.clear_grads();
        rc.g_force = g_wrench[i].force / static_cast<double>(K);
        rc.g_torque = g_wrench[i].torque / static_cast<double>(K);
      }
      ParticleSet ps = R.state0.ps;
      for (int k = K - 1; k >= 0; --k) {
        const SubstepSnap& S = R.subs[k];
        ps.x = S.x;
        ps.v = S.v;
        ps.F = S.F;
        ps.C = S.C;
        ps.J = S.J;
        for (size_t i = 0; i < cloth_colliders.size(); ++i)
          cloth_colliders[i].state = S.tracks[i];
        substep_adjoint(ps, cs, k == 0 ? &R.action : nullptr, &g_actions[n], g.mpm);
      }
      for (size_t i = 0; i < cs.rigid.size(); ++i) {
        g.bodies[i].pos += cs.rigid[i].g_pos;
        g.bodies[i].th += cs.rigid[i].g_th;
        g.bodies[i].vel += cs.rigid[i].g_vel;
        g.bodies[i].omega += cs.rigid[i].g_omega;
      }
      for (size_t i = 0; i < cloth_colliders.size(); ++i) {
        for (int v = 0; v < R.state0.cloths[i].mesh.vcount(); ++v) {
          g.cloths[i].verts[v] += cloth_colliders[i].g_verts[v];
          g.cloths[i].vel[v] += cloth_colliders[i].g_vel[v];
        }
      }
      add_loss(n, R.state0, g);
    }
    // Hinge gradients are complete only in generalized coordinates: fold the
    // initial boundary's pose/twist-space contributions down as well.
    const CoupledState& s0 = T > 0 ? tape.steps[0].state0 : tape.final_state;
    for (size_t i = 0; i < s0.bodies.size(); ++i) fold_pose_grads(s0.bodies[i], g.bodies[i]);
  }

  std::vector<ClothCollider> cloth_colliders;

 private:
  Grid grid;
  std::vector<Stencil> stencils;
  std::vector<Mat2> stress;
  std::vector<Vec2> pending;

  void freeze_colliders(ColliderSet& cs) {
    cs.rigid.resize(state.bodies.size());
    for (size_t i = 0; i < state.bodies.size(); ++i) {
      RigidCollider& rc = cs.rigid[i];
      rc.sdf = state.bodies[i].sdf;
      rc.pose = state.bodies[i].pose;
      rc.vel = state.bodies[i].twist.lin;
      rc.omega = state.bodies[i].twist.ang;
    }
    for (size_t i = 0; i < state.cloths.size(); ++i) {
      cloth_colliders[i].mesh.verts = state.cloths[i].mesh.verts;
      cloth_colliders[i].mesh.vel = state.cloths[i].mesh.vel;
      cs.deformable.push_back(&cloth_colliders[i]);
    }
  }

  void restore_colliders(ColliderSet& cs, const CoupledState& s0) {
    cs.rigid.resize(s0.bodies.size());
    for (size_t i = 0; i < s0.bodies.size(); ++i) {
      RigidCollider& rc = cs.rigid[i];
      rc.sdf = s0.bodies[i].sdf;
      rc.pose = s0.bodies[i].pose;
      rc.vel = s0.bodies[i].twist.lin;
      rc.omega = s0.bodies[i].twist.ang;
    }
    for (size_t i = 0; i < s0.cloths.size(); ++i) {
      ClothCollider& cc = cloth_colliders[i];
      cc.mesh.verts = s0.cloths[i].mesh.verts;
      cc.mesh.vel = s0.cloths[i].mesh.vel;
      cc.hash.build(cc.mesh, 2.0 * cc.mesh.max_face_extent());
      cs.deformable.push_back(&cc);
    }
  }

  SubstepSnap snapshot() const {
    SubstepSnap s;
    s.x = state.ps.x;
    s.v = state.ps.v;
    s.F = state.ps.F;
    s.C = state.ps.C;
    s.J = state.ps.J;
    return s;
  }

  // One MPM substep against the frozen colliders. `act` is non-null only on
  // the first substep of a coupled step (particle impulse injection).
  void substep(ColliderSet& cs, const Action* act) {
    ParticleSet& ps = state.ps;
    compute_stencils(ps, prm, stencils);
    stress_momentum(ps, prm, stress, &faults);
    const std::vector<Vec2>* imp = gather_impulses(ps, cs, act);
    p2g(ps, stencils, stress, grid, imp);
    grid_op_begin(grid, prm);
    switch (cfg.model) {
      case ContactModel::Forecast:
        forecast_contact(grid, ps, stencils, cs, cfg.contact, prm.dt, &faults);
        break;
      case ContactModel::Grid:
        grid_contact(grid, cs, cfg.contact, prm.dt);
        break;
      case ContactModel::Particle:
        break;  // already in the p2g impulses
    }
    apply_domain_walls(grid, prm);
    g2p(grid, stencils, ps, prm, &faults);
    cfl_max = std::max(cfl_max, cfl_number(ps, prm));
  }

  // Pending p2g momentum: penalty-model impulses plus first-substep action
  // impulses. Returns nullptr when there is nothing to add.
  const std::vector<Vec2>* gather_impulses(const ParticleSet& ps, ColliderSet& cs,
                                           const Action* act) {
    const bool penalty = cfg.model == ContactModel::Particle;
    const bool kick = act && !act->particle_impulse.empty();
    if (!penalty && !kick) return nullptr;
    if (penalty)
      particle_contact(ps, cs, cfg.contact, prm.dt, pending);
    else
      pending.assign(ps.size(), Vec2::zero());
    if (kick)
      for (size_t p = 0; p < ps.size(); ++p) pending[p] += act->particle_impulse[p];
    return &pending;
  }

  // Reverse of substep(): replays the forward grid pipeline from the restored
  // particle state, then runs the adjoint chain in reverse order.
  void substep_adjoint(ParticleSet& ps, ColliderSet& cs, const Action* act, Action* g_act,
                       MpmAdjoint& adj) {
    adj.clear_grid();
    compute_stencils(ps, prm, stencils);
    stress_momentum(ps, prm, stress);
    const std::vector<Vec2>* imp = gather_impulses(ps, cs, act);
    p2g(ps, stencils, stress, grid, imp);
    const double mass_eps = grid_op_begin(grid, prm);
    Grid grid_pre;  // pre-contact velocities for the contact adjoints
    const bool grid_model = cfg.model != ContactModel::Particle;
    if (grid_model) grid_pre = grid;
    switch (cfg.model) {
      case ContactModel::Forecast:
        forecast_contact(grid, ps, stencils, cs, cfg.contact, prm.dt, nullptr);
        break;
      case ContactModel::Grid:
        grid_contact(grid, cs, cfg.contact, prm.dt);
        break;
      case ContactModel::Particle:
        break;
    }
    apply_domain_walls(grid, prm);

    g2p_adjoint(ps, stencils, grid, prm, adj);
    domain_walls_adjoint(prm, grid.res, adj);
    switch (cfg.model) {
      case ContactModel::Forecast:
        forecast_contact_adjoint(grid_pre, ps, stencils, cs, cfg.contact, prm.dt, adj);
        break;
      case ContactModel::Grid:
        grid_contact_adjoint(grid_pre, cs, cfg.contact, prm.dt, adj);
        break;
      case ContactModel::Particle:
        break;
    }
    grid_op_adjoint(grid, mass_eps, adj);
    p2g_adjoint(ps, stencils, stress, grid, adj, imp);
    if (act && !act->particle_impulse.empty())
      g_act->particle_impulse = adj.impulse;
    if (cfg.model == ContactModel::Particle)
      particle_contact_adjoint(ps, cs, cfg.contact, prm.dt, adj);
    // The pending channel is per-substep: drop whatever the consumers left
    // (entries for particles outside contact have no upstream dependence).
    if (imp) std::fill(adj.impulse.begin(), adj.impulse.end(), Vec2::zero());
    stress_momentum_adjoint(ps, prm, adj);
  }
};

}  // namespace softsim
