#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "skeleguide/autograd.hpp"
#include "skeleguide/errors.hpp"
#include "skeleguide/latent.hpp"
#include "skeleguide/rng.hpp"

namespace skeleguide {

template <class T>
struct FlowSample {
  LatentGrid<T> x0;
  LatentGrid<T> x1;
  T t = T(0);
  LatentGrid<T> xt;
  LatentGrid<T> v_target;
};

namespace detail {
template <class T>
void require_same_shape(const LatentGrid<T>& a, const LatentGrid<T>& b, const char* what) {
  a.validate();
  b.validate();
  if (a.height != b.height || a.width != b.width || a.patch != b.patch)
    throw ShapeError(std::string(what) + ": latent shapes differ");
}
}  // namespace detail

template <class T>
FlowSample<T> interpolate(const LatentGrid<T>& x0, const LatentGrid<T>& x1, T t) {
  detail::require_same_shape(x0, x1, "interpolate");
  if (!(t >= T(0) && t <= T(1))) throw ContractViolation("interpolate: t must lie in [0, 1]");
  FlowSample<T> s{x0, x1, t, x0, x0};
  for (std::size_t i = 0; i < x0.tokens.size(); ++i) {
    s.xt.tokens[i] = (T(1) - t) * x0.tokens[i] + t * x1.tokens[i];
    s.v_target.tokens[i] = x1.tokens[i] - x0.tokens[i];
  }
  return s;
}

/// Elementwise standard-normal latent with the shape of `like`.
template <class T>
LatentGrid<T> noise_like(const LatentGrid<T>& like, Rng& rng) {
  LatentGrid<T> out = like;
  for (auto& v : out.tokens) v = static_cast<T>(rng.normal());
  return out;
}

template <class T>
double fm_loss(const LatentGrid<T>& predicted, const LatentGrid<T>& target) {
  detail::require_same_shape(predicted, target, "fm_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.tokens.size(); ++i) {
    const double d = static_cast<double>(predicted.tokens[i]) - static_cast<double>(target.tokens[i]);
    s += d * d;
  }
  return s / static_cast<double>(predicted.tokens.size());
}

/// Graph version used by training.
template <class T>
ag::Var<T> fm_loss(const ag::Var<T>& predicted, const ag::Var<T>& target) {
  return ag::mse(predicted, target);
}

/// Velocity field over a batch state: rows hold groups * tokens, t has one entry per group.
template <class T>
using BatchField = std::function<ag::Mat<T>(const ag::Mat<T>& x, const std::vector<T>& t)>;

/// Forward Euler from t = 0 to 1 in n_steps equal steps.
template <class T>
ag::Mat<T> euler_sample(const BatchField<T>& field, ag::Mat<T> x, int groups, int n_steps) {
  if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
  const T h = T(1) / static_cast<T>(n_steps);
  for (int k = 0; k < n_steps; ++k) {
    const std::vector<T> t(static_cast<std::size_t>(groups), static_cast<T>(k) / static_cast<T>(n_steps));
    const ag::Mat<T> v = field(x, t);
    if (v.rows() != x.rows() || v.cols() != x.cols()) throw ShapeError("velocity shape differs from state");
    if (!v.allFinite()) throw NumericalError(k, "non-finite velocity in sampler");
    x += h * v;
  }
  return x;
}

template <class T>
using GridField = std::function<LatentGrid<T>(const LatentGrid<T>& x, T t)>;

template <class T>
LatentGrid<T> euler_sample(const GridField<T>& field, const LatentGrid<T>& x0, int n_steps) {
  x0.validate();
  if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
  LatentGrid<T> x = x0;
  const T h = T(1) / static_cast<T>(n_steps);
  for (int k = 0; k < n_steps; ++k) {
    const LatentGrid<T> v = field(x, static_cast<T>(k) / static_cast<T>(n_steps));
    if (v.tokens.size() != x.tokens.size()) throw ShapeError("velocity shape differs from state");
    for (std::size_t i = 0; i < x.tokens.size(); ++i) {
      if (!std::isfinite(static_cast<double>(v.tokens[i])))
        throw NumericalError(k, "non-finite velocity in sampler");
      x.tokens[i] += h * v.tokens[i];
    }
  }
  return x;
}

/// Graph-connected velocity evaluation at a given time per group.
template <class T>
using GraphField = std::function<ag::Var<T>(const ag::Var<T>& x, const std::vector<T>& t)>;

/// M0 + u(M0, t = 0); the result stays on the graph of whatever u depends on.
template <class T>
ag::Var<T> derive_onestep(const ag::Var<T>& m0, int groups, const GraphField<T>& field) {
  const std::vector<T> t(static_cast<std::size_t>(groups), T(0));
  return ag::add(m0, field(m0, t));
}

template <class T>
LatentGrid<T> derive_onestep(const LatentGrid<T>& m0, const GridField<T>& field) {
  const LatentGrid<T> v = field(m0, T(0));
  detail::require_same_shape(m0, v, "derive_onestep");
  LatentGrid<T> out = m0;
  for (std::size_t i = 0; i < out.tokens.size(); ++i) out.tokens[i] += v.tokens[i];
  return out;
}

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed(double tolerance) const { return max_rel_error <= tolerance; }
};

struct GradcheckOptions {
  double epsilon = 1e-5;
  std::size_t max_per_tensor = 24;  // 0 checks every element
  double floor = 1e-6;              // denominator floor for the relative error
  std::uint64_t seed = 0;
};

/// Compares backprop gradients with central differences. `loss` must rebuild
/// the graph from the current parameter values on every call.
template <class T>
GradcheckReport gradcheck(const std::function<ag::Var<T>()>& loss,
                          const std::vector<std::pair<std::string, ag::Var<T>>>& params,
                          const GradcheckOptions& opt = {}) {
  std::vector<bool> saved;
  for (const auto& [_, p] : params) saved.push_back(p.requires_grad());
  for (auto [_, p] : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  const ag::Var<T> base = loss();
  ag::backward(base);
  const double f0 = static_cast<double>(base.item());
  double f0b;
  {
    ag::NoGradGuard guard;
    f0b = static_cast<double>(loss().item());
  }
  if (f0 != f0b) throw ContractViolation("gradcheck: loss is not deterministic");

  auto eval = [&] {
    ag::NoGradGuard guard;
    return static_cast<double>(loss().item());
  };
  Rng rng(opt.seed);
  GradcheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    ag::Var<T> p = params[pi].second;
    const ag::Mat<T> g = p.grad();
    GradcheckEntry e{params[pi].first, 0, 0.0, 0.0};
    const auto size = static_cast<std::size_t>(p.value().size());
    std::vector<std::size_t> idx(size);
    for (std::size_t i = 0; i < size; ++i) idx[i] = i;
    if (opt.max_per_tensor > 0 && size > opt.max_per_tensor) {
      for (std::size_t i = 0; i < opt.max_per_tensor; ++i)
        std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(size - i - 1)))]);
      idx.resize(opt.max_per_tensor);
    }
    for (std::size_t k : idx) {
      T& slot = p.mutable_value().data()[k];
      const T orig = slot;
      const T up = orig + static_cast<T>(opt.epsilon), down = orig - static_cast<T>(opt.epsilon);
      slot = up;
      const double fp = eval();
      slot = down;
      const double fm = eval();
      slot = orig;
      // actual step, which differs from 2 epsilon after rounding in float
      const double num = (fp - fm) / (static_cast<double>(up) - static_cast<double>(down));
      const double ana = static_cast<double>(g.data()[k]);
      const double rel = std::fabs(ana - num) / std::max({std::fabs(ana), std::fabs(num), opt.floor});
      e.max_rel_error = std::max(e.max_rel_error, rel);
      e.max_abs_analytic = std::max(e.max_abs_analytic, std::fabs(ana));
      ++e.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.entries.push_back(std::move(e));
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    ag::Var<T> p = params[pi].second;
    p.zero_grad();
    p.set_requires_grad(saved[pi]);
  }
  return report;
}

}  // namespace skeleguide
