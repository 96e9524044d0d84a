// First-order trajectory optimization over action sequences: SGD / Adam on a
// flattened view of the controlled channels, box projection after each update,
// best-so-far iterate tracking, and a halve-and-retry path for blowups.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "softsim/loss.hpp"

namespace softsim {

enum class OptAlgo : uint8_t { SGD, Adam };

struct OptimizerConfig {
  OptAlgo algo = OptAlgo::Adam;
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int iterations = 40;
};

inline void validate(const OptimizerConfig& c) {
  if (!(c.lr > 0.0)) throw std::runtime_error("learning rate must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0))
    throw std::runtime_error("adam betas must lie in [0, 1)");
  if (!(c.eps > 0.0)) throw std::runtime_error("adam epsilon must be positive");
  if (c.iterations < 0) throw std::runtime_error("iteration count must be nonnegative");
}

inline void sgd_step(std::vector<double>& x, const std::vector<double>& g, double lr) {
  for (size_t i = 0; i < x.size(); ++i) x[i] -= lr * g[i];
}

struct AdamState {
  std::vector<double> m, v;
  long t = 0;

  void resize(size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    t = 0;
  }
};

// Standard bias-corrected update: x -= lr * m_hat / (sqrt(v_hat) + eps).
inline void adam_step(std::vector<double>& x, const std::vector<double>& g, AdamState& st,
                      const OptimizerConfig& c) {
  ++st.t;
  const double c1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
  for (size_t i = 0; i < x.size(); ++i) {
    st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g[i];
    st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g[i] * g[i];
    x[i] -= c.lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + c.eps);
  }
}

inline void project_box(std::vector<double>& x, const std::vector<double>& lo,
                        const std::vector<double>& hi) {
  for (size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], lo[i], hi[i]);
}

// ---------------------------------------------------------------------------
// Which action channels the optimizer may move, with per-channel boxes the
// iterates are projected into after every update.
struct ControlChannel {
  enum class Kind : uint8_t { Rigid, Cloth, ParticleImpulse };
  static constexpr double kInf = std::numeric_limits<double>::infinity();

  Kind kind = Kind::Rigid;
  int index = 0;  // body or cloth id; unused for ParticleImpulse
  Vec2 lo{-kInf, -kInf}, hi{kInf, kInf};  // componentwise box for 2-vector dofs
  double ang_lo = -kInf, ang_hi = kInf;   // box for the angular dof (Rigid only)
};

struct ControlSpec {
  std::vector<ControlChannel> channels;
};

inline void validate(const ControlSpec& ctrl, const CoupledState& s) {
  if (ctrl.channels.empty()) throw std::runtime_error("control spec needs at least one channel");
  for (size_t i = 0; i < ctrl.channels.size(); ++i) {
    const ControlChannel& ch = ctrl.channels[i];
    const std::string where = "control channel " + std::to_string(i) + ": ";
    if (!(ch.lo.x <= ch.hi.x && ch.lo.y <= ch.hi.y && ch.ang_lo <= ch.ang_hi))
      throw std::runtime_error(where + "box bounds are inverted");
    switch (ch.kind) {
      case ControlChannel::Kind::Rigid:
        if (ch.index < 0 || ch.index >= static_cast<int>(s.bodies.size()))
          throw std::runtime_error(where + "body id out of range");
        break;
      case ControlChannel::Kind::Cloth:
        if (ch.index < 0 || ch.index >= static_cast<int>(s.cloths.size()))
          throw std::runtime_error(where + "cloth id out of range");
        break;
      case ControlChannel::Kind::ParticleImpulse:
        if (s.ps.size() == 0) throw std::runtime_error(where + "scene has no particles");
        break;
    }
  }
}

// Flattens the controlled slice of an action sequence into one parameter
// vector (and back), in a fixed order: per step, per channel, per dof.
class ActionPacker {
 public:
  ActionPacker(const ControlSpec& ctrl, const CoupledState& s, int steps)
      : ctrl_(ctrl), steps_(steps), np_(s.ps.size()) {
    validate(ctrl, s);
    cloth_ctrl_count_.resize(s.cloths.size());
    for (size_t i = 0; i < s.cloths.size(); ++i)
      cloth_ctrl_count_[i] = s.cloths[i].control.size();
    per_step_ = 0;
    for (const ControlChannel& ch : ctrl.channels) {
      switch (ch.kind) {
        case ControlChannel::Kind::Rigid: per_step_ += 3; break;
        case ControlChannel::Kind::Cloth: per_step_ += 2 * cloth_ctrl_count_[ch.index]; break;
        case ControlChannel::Kind::ParticleImpulse: per_step_ += 2 * np_; break;
      }
    }
  }

  size_t size() const { return per_step_ * steps_; }

  // Sizes every controlled slot (notably the optional impulse vectors) so
  // scatter/gather see a uniform layout.
  void normalize(std::vector<Action>& acts) const {
    for (Action& a : acts) {
      if (a.rigid.size() < rigid_slots()) a.rigid.resize(rigid_slots());
      if (a.cloth_ctrl.size() < cloth_ctrl_count_.size())
        a.cloth_ctrl.resize(cloth_ctrl_count_.size());
      for (size_t i = 0; i < cloth_ctrl_count_.size(); ++i)
        if (a.cloth_ctrl[i].size() != cloth_ctrl_count_[i])
          a.cloth_ctrl[i].assign(cloth_ctrl_count_[i], Vec2::zero());
      if (has_impulse_channel() && a.particle_impulse.size() != np_)
        a.particle_impulse.assign(np_, Vec2::zero());
    }
  }

  void gather(const std::vector<Action>& acts, std::vector<double>& theta) const {
    theta.resize(size());
    size_t o = 0;
    for (int n = 0; n < steps_; ++n)
      walk(acts[n], [&](const double& v) { theta[o++] = v; });
  }

  // Actions must be normalized first: scatter writes through every slot.
  void scatter(const std::vector<double>& theta, std::vector<Action>& acts) const {
    size_t o = 0;
    for (int n = 0; n < steps_; ++n)
      walk_mut(acts[n], [&](double& v) { v = theta[o++]; });
  }

  void bounds(std::vector<double>& lo, std::vector<double>& hi) const {
    lo.clear();
    hi.clear();
    lo.reserve(size());
    hi.reserve(size());
    for (int n = 0; n < steps_; ++n)
      for (const ControlChannel& ch : ctrl_.channels) switch (ch.kind) {
          case ControlChannel::Kind::Rigid:
            push_vec(lo, hi, ch);
            lo.push_back(ch.ang_lo);
            hi.push_back(ch.ang_hi);
            break;
          case ControlChannel::Kind::Cloth:
            for (size_t k = 0; k < cloth_ctrl_count_[ch.index]; ++k) push_vec(lo, hi, ch);
            break;
          case ControlChannel::Kind::ParticleImpulse:
            for (size_t p = 0; p < np_; ++p) push_vec(lo, hi, ch);
            break;
        }
  }

  bool has_impulse_channel() const {
    for (const ControlChannel& ch : ctrl_.channels)
      if (ch.kind == ControlChannel::Kind::ParticleImpulse) return true;
    return false;
  }

 private:
  static void push_vec(std::vector<double>& lo, std::vector<double>& hi,
                       const ControlChannel& ch) {
    lo.push_back(ch.lo.x);
    hi.push_back(ch.hi.x);
    lo.push_back(ch.lo.y);
    hi.push_back(ch.hi.y);
  }

  size_t rigid_slots() const {
    size_t n = 0;
    for (const ControlChannel& ch : ctrl_.channels)
      if (ch.kind == ControlChannel::Kind::Rigid) n = std::max(n, size_t(ch.index) + 1);
    return n;
  }

  // Visits every controlled dof of one action in layout order. A gradient
  // action that never carried impulses yields zeros for that channel.
  template <class F>
  void walk(const Action& a, F&& f) const {
    const double zero = 0.0;
    for (const ControlChannel& ch : ctrl_.channels) switch (ch.kind) {
        case ControlChannel::Kind::Rigid: {
          const RigidAction& ra = a.rigid[ch.index];
          f(ra.lin.x);
          f(ra.lin.y);
          f(ra.ang);
          break;
        }
        case ControlChannel::Kind::Cloth:
          for (size_t k = 0; k < cloth_ctrl_count_[ch.index]; ++k) {
            f(a.cloth_ctrl[ch.index][k].x);
            f(a.cloth_ctrl[ch.index][k].y);
          }
          break;
        case ControlChannel::Kind::ParticleImpulse:
          for (size_t p = 0; p < np_; ++p) {
            if (p < a.particle_impulse.size()) {
              f(a.particle_impulse[p].x);
              f(a.particle_impulse[p].y);
            } else {
              f(zero);
              f(zero);
            }
          }
          break;
      }
  }

  template <class F>
  void walk_mut(Action& a, F&& f) const {
    for (const ControlChannel& ch : ctrl_.channels) switch (ch.kind) {
        case ControlChannel::Kind::Rigid: {
          RigidAction& ra = a.rigid[ch.index];
          f(ra.lin.x);
          f(ra.lin.y);
          f(ra.ang);
          break;
        }
        case ControlChannel::Kind::Cloth:
          for (size_t k = 0; k < cloth_ctrl_count_[ch.index]; ++k) {
            f(a.cloth_ctrl[ch.index][k].x);
            f(a.cloth_ctrl[ch.index][k].y);
          }
          break;
        case ControlChannel::Kind::ParticleImpulse:
          for (size_t p = 0; p < np_; ++p) {
            f(a.particle_impulse[p].x);
            f(a.particle_impulse[p].y);
          }
          break;
      }
  }

  ControlSpec ctrl_;
  int steps_;
  size_t np_;
  size_t per_step_ = 0;
  std::vector<size_t> cloth_ctrl_count_;
};

// ---------------------------------------------------------------------------
struct OptimizeResult {
  std::vector<Action> best;
  double best_loss = std::numeric_limits<double>::quiet_NaN();
  int best_iteration = -1;
  std::vector<LossValues> history;  // loss of the iterate evaluated each round
  double final_lr = 0.0;
  bool aborted = false;
  std::string note;
};

// rollout -> backward -> optimizer step -> projection, keeping the best-loss
// iterate seen. A non-finite loss or gradient rewinds to the last finite
// iterate and halves the learning rate, once; a second blowup aborts.
inline OptimizeResult optimize(CoupledSim& sim, const CoupledState& s0,
                               const std::vector<Action>& init, const LossSpec& spec,
                               const ControlSpec& ctrl, const OptimizerConfig& cfg_in) {
  validate(cfg_in);
  validate(spec, s0);
  OptimizerConfig cfg = cfg_in;
  const int T = static_cast<int>(init.size());

  OptimizeResult res;
  res.best = init;
  res.final_lr = cfg.lr;
  if (cfg.iterations == 0) return res;

  ActionPacker packer(ctrl, s0, T);
  std::vector<Action> acts = init;
  packer.normalize(acts);
  res.best = acts;

  std::vector<double> theta, lo, hi, grad;
  packer.gather(acts, theta);
  packer.bounds(lo, hi);
  project_box(theta, lo, hi);
  AdamState adam;
  adam.resize(theta.size());

  std::vector<double> last_finite = theta;
  bool retried = false;

  for (int it = 0; it < cfg.iterations; ++it) {
    packer.scatter(theta, acts);
    sim.reset(s0);
    Tape tape;
    sim.rollout(acts, &tape);
    LossValues lv = eval_loss(spec, tape);

    bool bad = !std::isfinite(lv.total);
    if (!bad) {
      CoupledGrad g;
      std::vector<Action> g_acts;
      sim.backward(tape, make_loss_grad(spec, T), g, g_acts);
      packer.gather(g_acts, grad);
      for (double v : grad)
        if (!std::isfinite(v)) {
          bad = true;
          break;
        }
    }

    if (bad) {
      if (retried) {
        res.aborted = true;
        res.note = "non-finite loss or gradient persisted after halving the learning rate";
        break;
      }
      retried = true;
      cfg.lr *= 0.5;
      theta = last_finite;  // retake the last update, smaller
      continue;
    }

    res.history.push_back(lv);
    if (!(lv.total >= res.best_loss)) {  // also true on the first finite iterate
      res.best_loss = lv.total;
      res.best = acts;
      res.best_iteration = static_cast<int>(res.history.size()) - 1;
    }
    last_finite = theta;

    if (cfg.algo == OptAlgo::SGD)
      sgd_step(theta, grad, cfg.lr);
    else
      adam_step(theta, grad, adam, cfg);
    project_box(theta, lo, hi);
  }

  res.final_lr = cfg.lr;
  return res;
}

}  // namespace softsim
