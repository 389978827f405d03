#pragma once

#include <cmath>
#include <type_traits>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "metadrn/params.hpp"
#include "metadrn/tensor.hpp"

namespace metadrn {

struct InnerLoopConfig {
  double alpha = 1e-3;  // inner learning rate (zero allowed: degenerate no-op step)
  int steps = 1;
  int eval_steps = -1;  // adaptation depth at evaluation time; -1 means `steps`

  int effective_eval_steps() const { return eval_steps < 0 ? steps : eval_steps; }
  void validate() const {
    check_arg(alpha >= 0.0, "InnerLoopConfig: alpha must be non-negative");
    check_arg(steps >= 1, "InnerLoopConfig: steps must be >= 1");
  }
};

// Per-parameter learning rates, congruent to the parameter set they step.
template <typename T>
using MetaSgdState = ParamSet<T>;

// One meta-learning datum presented as loss closures over a parameter set.
// query_loss may be empty for support-only consumers.
template <typename T>
struct Task {
  std::function<Tensor<T>(const ParamSet<T>&)> support_loss;
  std::function<Tensor<T>(const ParamSet<T>&)> query_loss;
};

// Gradients congruent to the trainable state they update; Meta-SGD carries an
// extra block for the per-parameter learning rates.
template <typename T>
struct MetaGradient {
  ParamSet<T> theta;
  std::optional<ParamSet<T>> alpha;
  double mean_loss = 0.0;
};

namespace detail {

template <typename T>
Tensor<T> checked_loss(const Tensor<T>& loss, const char* where) {
  if (!loss.all_finite()) fail_numeric(std::string(where) + ": non-finite loss");
  return loss;
}

// Gradient steps on the support loss starting from differentiable leaves.
// With track_graph the returned parameters stay attached to the graph rooted
// at `leaves`; otherwise each step re-leafs so no graph survives.
template <typename T>
ParamSet<T> adapt_from_leaves(
    const ParamSet<T>& leaves,
    const std::type_identity_t<std::function<Tensor<T>(const ParamSet<T>&)>>& support_loss,
    const InnerLoopConfig& cfg, const std::type_identity_t<ParamSet<T>>* alpha, bool track_graph,
    double* last_loss = nullptr) {
  cfg.validate();
  if (alpha) check_arg(alpha->congruent(leaves), "inner_adapt: alpha not congruent to theta");
  ParamSet<T> current = leaves;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor<T> loss = checked_loss(support_loss(current), "inner_adapt");
    if (last_loss) *last_loss = static_cast<double>(loss.item());
    auto grads = backward(loss, current.tensors(), /*create_graph=*/track_graph);
    GradModeGuard guard(track_graph);
    ParamSet<T> next;
    for (size_t i = 0; i < current.size(); ++i) {
      const auto& [name, p] = current.entry(i);
      Tensor<T> update = alpha ? mul(alpha->at(name), grads[i]) : scalar_mul(grads[i], cfg.alpha);
      Tensor<T> stepped = sub(p, update);
      if (!track_graph) stepped = stepped.detach().set_requires_grad(true);
      next.add(name, stepped);
    }
    current = std::move(next);
  }
  return current;
}

template <typename T>
void accumulate(ParamSet<T>& into, const ParamSet<T>& grads) {
  NoGradGuard ng;
  if (into.empty()) {
    into = grads.detached();
  } else {
    into = into.zip(grads, [](const std::string&, const Tensor<T>& a, const Tensor<T>& b) {
      return add(a, b.detach());
    });
  }
}

template <typename T>
ParamSet<T> scale(const ParamSet<T>& set, double factor) {
  NoGradGuard ng;
  return set.map([factor](const std::string&, const Tensor<T>& t) {
    return scalar_mul(t, factor);
  });
}

}  // namespace detail

// Plain gradient steps of the support loss. With alpha_override the update is
// elementwise theta - alpha (.) grad; with track_graph the result remains
// differentiable with respect to theta (and alpha).
template <typename T>
ParamSet<T> inner_adapt(
    const ParamSet<T>& theta,
    const std::type_identity_t<std::function<Tensor<T>(const ParamSet<T>&)>>& support_loss,
    const InnerLoopConfig& cfg, const std::type_identity_t<ParamSet<T>>* alpha_override = nullptr,
    bool track_graph = false) {
  return detail::adapt_from_leaves(theta.leaf_view(), support_loss, cfg, alpha_override,
                                   track_graph);
}

// Full second-order meta-gradient: query loss at the adapted parameters,
// differentiated through the inner step, averaged over the task batch in
// task order.
template <typename T>
MetaGradient<T> maml_meta_grad(const ParamSet<T>& theta, const std::vector<Task<T>>& tasks,
                               const InnerLoopConfig& cfg) {
  check_arg(!tasks.empty(), "maml_meta_grad: empty task batch");
  MetaGradient<T> out;
  for (const auto& task : tasks) {
    check_arg(static_cast<bool>(task.query_loss), "maml_meta_grad: task has no query set");
    ParamSet<T> leaves = theta.leaf_view();
    ParamSet<T> adapted =
        detail::adapt_from_leaves(leaves, task.support_loss, cfg, nullptr, /*track_graph=*/true);
    Tensor<T> lq = detail::checked_loss(task.query_loss(adapted), "maml_meta_grad");
    out.mean_loss += static_cast<double>(lq.item());
    auto grads = backward(lq, leaves.tensors());
    ParamSet<T> task_grad;
    for (size_t i = 0; i < leaves.size(); ++i) task_grad.add(leaves.entry(i).first, grads[i]);
    detail::accumulate(out.theta, task_grad);
  }
  const double inv = 1.0 / static_cast<double>(tasks.size());
  out.theta = detail::scale(out.theta, inv);
  out.mean_loss *= inv;
  return out;
}

// First-order approximation: the inner step is treated as a constant, so the
// query gradient at theta' is applied directly at theta. No second-order
// graph is kept alive.
template <typename T>
MetaGradient<T> fomaml_meta_grad(const ParamSet<T>& theta, const std::vector<Task<T>>& tasks,
                                 const InnerLoopConfig& cfg) {
  check_arg(!tasks.empty(), "fomaml_meta_grad: empty task batch");
  MetaGradient<T> out;
  for (const auto& task : tasks) {
    check_arg(static_cast<bool>(task.query_loss), "fomaml_meta_grad: task has no query set");
    ParamSet<T> adapted = detail::adapt_from_leaves(theta.leaf_view(), task.support_loss, cfg,
                                                    nullptr, /*track_graph=*/false);
    Tensor<T> lq = detail::checked_loss(task.query_loss(adapted), "fomaml_meta_grad");
    out.mean_loss += static_cast<double>(lq.item());
    auto grads = backward(lq, adapted.tensors());
    ParamSet<T> task_grad;
    for (size_t i = 0; i < adapted.size(); ++i) task_grad.add(adapted.entry(i).first, grads[i]);
    detail::accumulate(out.theta, task_grad);
  }
  const double inv = 1.0 / static_cast<double>(tasks.size());
  out.theta = detail::scale(out.theta, inv);
  out.mean_loss *= inv;
  return out;
}

// Joint meta-gradient over (theta, alpha): the inner update theta - alpha (.)
// grad is tracked, and the query loss is differentiated with respect to both
// the initialization and the per-parameter learning rates.
template <typename T>
MetaGradient<T> metasgd_meta_grad(const ParamSet<T>& theta, const ParamSet<T>& alpha,
                                  const std::vector<Task<T>>& tasks, const InnerLoopConfig& cfg) {
  check_arg(!tasks.empty(), "metasgd_meta_grad: empty task batch");
  check_arg(cfg.steps == 1, "metasgd_meta_grad: the inner loop takes exactly one step");
  check_arg(alpha.congruent(theta), "metasgd_meta_grad: alpha not congruent to theta");
  MetaGradient<T> out;
  out.alpha.emplace();
  for (const auto& task : tasks) {
    check_arg(static_cast<bool>(task.query_loss), "metasgd_meta_grad: task has no query set");
    ParamSet<T> theta_leaves = theta.leaf_view();
    ParamSet<T> alpha_leaves = alpha.leaf_view();
    ParamSet<T> adapted = detail::adapt_from_leaves(theta_leaves, task.support_loss, cfg,
                                                    &alpha_leaves, /*track_graph=*/true);
    Tensor<T> lq = detail::checked_loss(task.query_loss(adapted), "metasgd_meta_grad");
    out.mean_loss += static_cast<double>(lq.item());
    std::vector<Tensor<T>> wrt = theta_leaves.tensors();
    for (const auto& t : alpha_leaves.tensors()) wrt.push_back(t);
    auto grads = backward(lq, wrt);
    ParamSet<T> g_theta, g_alpha;
    for (size_t i = 0; i < theta_leaves.size(); ++i)
      g_theta.add(theta_leaves.entry(i).first, grads[i]);
    for (size_t i = 0; i < alpha_leaves.size(); ++i)
      g_alpha.add(alpha_leaves.entry(i).first, grads[theta_leaves.size() + i]);
    detail::accumulate(out.theta, g_theta);
    detail::accumulate(*out.alpha, g_alpha);
  }
  const double inv = 1.0 / static_cast<double>(tasks.size());
  out.theta = detail::scale(out.theta, inv);
  out.alpha = detail::scale(*out.alpha, inv);
  out.mean_loss *= inv;
  return out;
}

// k untracked support steps per task; (theta - theta') acts as the gradient,
// so a descent update moves theta toward the adapted weights. Tasks need no
// query set; mean_loss reports the last support loss.
template <typename T>
MetaGradient<T> reptile_meta_grad(const ParamSet<T>& theta, const std::vector<Task<T>>& tasks,
                                  const InnerLoopConfig& cfg) {
  check_arg(!tasks.empty(), "reptile_meta_grad: empty task batch");
  MetaGradient<T> out;
  for (const auto& task : tasks) {
    double last_loss = 0;
    ParamSet<T> adapted = detail::adapt_from_leaves(theta.leaf_view(), task.support_loss, cfg,
                                                    nullptr, /*track_graph=*/false, &last_loss);
    out.mean_loss += last_loss;
    NoGradGuard ng;
    ParamSet<T> task_grad =
        theta.zip(adapted, [](const std::string&, const Tensor<T>& a, const Tensor<T>& b) {
          return sub(a.detach(), b.detach());
        });
    detail::accumulate(out.theta, task_grad);
  }
  const double inv = 1.0 / static_cast<double>(tasks.size());
  out.theta = detail::scale(out.theta, inv);
  out.mean_loss *= inv;
  return out;
}

// ---- outer optimizer -----------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamWState {
  int64_t step = 0;
  ParamSet<T> m, v;

  static AdamWState like(const ParamSet<T>& params) {
    AdamWState s;
    for (const auto& [name, t] : params) {
      s.m.add(name, Tensor<T>::zeros(t.shape()));
      s.v.add(name, Tensor<T>::zeros(t.shape()));
    }
    return s;
  }
};

// Bias-corrected moment update plus decoupled decay. Pure: returns the new
// parameters and state, inputs untouched.
template <typename T>
std::pair<ParamSet<T>, AdamWState<T>> adamw_step(const AdamWState<T>& state,
                                                 const ParamSet<T>& params,
                                                 const ParamSet<T>& grads, double lr,
                                                 const AdamWConfig& cfg,
                                                 bool apply_decay = true) {
  check_arg(grads.congruent(params), "adamw_step: gradients not congruent to parameters");
  check_arg(state.m.congruent(params), "adamw_step: state not congruent to parameters");
  AdamWState<T> next;
  next.step = state.step + 1;
  ParamSet<T> updated;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(next.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(next.step));
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params.entry(i);
    const Tensor<T>& g = grads.entry(i).second;
    if (!g.all_finite()) fail_numeric("adamw_step: non-finite gradient for '" + name + "'");
    Tensor<T> m = Tensor<T>::uninit(p.shape());
    Tensor<T> v = Tensor<T>::uninit(p.shape());
    Tensor<T> out = Tensor<T>::uninit(p.shape());
    const auto& mp = state.m.at(name).data();
    const auto& vp = state.v.at(name).data();
    for (int64_t k = 0; k < p.numel(); ++k) {
      const double gk = g.data()[k];
      const double mk = cfg.beta1 * mp[k] + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * vp[k] + (1.0 - cfg.beta2) * gk * gk;
      m.raw()[k] = static_cast<T>(mk);
      v.raw()[k] = static_cast<T>(vk);
      const double mhat = mk / bc1;
      const double vhat = vk / bc2;
      double pk = p.data()[k];
      pk -= lr * (mhat / (std::sqrt(vhat) + cfg.eps));
      if (apply_decay) pk -= lr * cfg.weight_decay * p.data()[k];
      out.raw()[k] = static_cast<T>(pk);
    }
    next.m.add(name, m);
    next.v.add(name, v);
    updated.add(name, out);
  }
  return {std::move(updated), std::move(next)};
}

template <typename T>
ParamSet<T> sgd_step(const ParamSet<T>& params, const ParamSet<T>& grads, double lr) {
  check_arg(grads.congruent(params), "sgd_step: gradients not congruent to parameters");
  NoGradGuard ng;
  return params.zip(grads, [lr](const std::string&, const Tensor<T>& p, const Tensor<T>& g) {
    return sub(p.detach(), scalar_mul(g.detach(), lr));
  });
}

// ---- learning-rate schedules ------------------------------------------------------

struct ScheduleConfig {
  enum class Kind { plateau, linear } kind = Kind::plateau;
  double base = 1e-3;
  // plateau
  double factor = 0.5;
  int patience = 8;
  double min_delta = 1e-4;
  // linear
  double end = 3e-5;
  int total_epochs = 200;

  void validate() const {
    check_arg(base > 0.0, "ScheduleConfig: base lr must be positive");
    if (kind == Kind::plateau) {
      check_arg(factor > 0.0 && factor < 1.0, "ScheduleConfig: factor must be in (0,1)");
      check_arg(patience >= 0, "ScheduleConfig: patience must be >= 0");
    } else {
      check_arg(end <= base, "ScheduleConfig: linear end must not exceed start");
      check_arg(total_epochs >= 1, "ScheduleConfig: total_epochs must be >= 1");
    }
  }
};

// Learning rate for `epoch` given the monitored-metric history of completed
// epochs (higher is better). Plateau halves once the metric has not improved
// by more than min_delta for more than `patience` consecutive epochs, then
// resets its patience window.
inline double schedule_lr(const ScheduleConfig& cfg, int epoch,
                          const std::vector<double>& history) {
  cfg.validate();
  if (cfg.kind == ScheduleConfig::Kind::linear) {
    if (epoch >= cfg.total_epochs) return cfg.end;
    const double frac = static_cast<double>(epoch) / cfg.total_epochs;
    return cfg.base + (cfg.end - cfg.base) * frac;
  }
  double lr = cfg.base;
  double best = -std::numeric_limits<double>::infinity();
  int stale = 0;
  for (double value : history) {
    if (value > best + cfg.min_delta) {
      best = value;
      stale = 0;
    } else {
      ++stale;
      if (stale > cfg.patience) {
        lr *= cfg.factor;
        stale = 0;
      }
    }
  }
  return lr;
}

}  // namespace metadrn
