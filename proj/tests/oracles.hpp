#pragma once

// Independent reference implementations the test suite checks the library
// against. Everything here recomputes results from first principles rather
// than calling into the optimized paths.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

#include "symel/diff.hpp"
#include "symel/registry.hpp"

namespace symel::test {

// Plain recursive tree walk with its own operator semantics; deliberately
// shares no code with ExprGraph::eval or the tape interpreter.
inline double naive_eval(const ExprGraph& g, NodeId id, std::span<const double> inputs) {
  const Node& n = g.node(id);
  switch (n.op) {
    case Op::symbol:
      if (n.iarg < 0) throw Error("naive_eval: unassigned symbol");
      return inputs[static_cast<std::size_t>(n.iarg)];
    case Op::constant:
      return n.value;
    default:
      break;
  }
  const double a = naive_eval(g, n.child[0], inputs);
  const double b = n.arity > 1 ? naive_eval(g, n.child[1], inputs) : 0.0;
  switch (n.op) {
    case Op::add:
      return a + b;
    case Op::sub:
      return a - b;
    case Op::mul:
      return a * b;
    case Op::div:
      return a / b;
    case Op::neg:
      return -a;
    case Op::pow_int: {
      double r = 1.0, base = a;
      int e = n.iarg;
      const bool inv = e < 0;
      if (inv) e = -e;
      for (int i = 0; i < e; ++i) r *= base;
      return inv ? 1.0 / r : r;
    }
    case Op::sqrt:
      return std::sqrt(a);
    case Op::log:
      return std::log(a);
    case Op::sin:
      return std::sin(a);
    case Op::cos:
      return std::cos(a);
    case Op::branch:
      return a >= 0.0 ? b : naive_eval(g, n.child[2], inputs);
    default:
      throw Error("naive_eval: unknown op");
  }
}

// Central differences; per-component step h_i = h0 * (1 + |u_i|).
inline std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> u, double h0 = 1e-6) {
  std::vector<double> x(u.begin(), u.end());
  std::vector<double> g(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double h = h0 * (1.0 + std::abs(u[i]));
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f(x);
    x[i] = saved - h;
    const double fm = f(x);
    x[i] = saved;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Central differences of a vector function; column j holds d(fn)/du_j.
inline std::vector<std::vector<double>> fd_jacobian(
    const std::function<std::vector<double>(std::span<const double>)>& fn,
    std::span<const double> u, double h0 = 1e-6) {
  std::vector<double> x(u.begin(), u.end());
  std::vector<std::vector<double>> cols(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) {
    const double h = h0 * (1.0 + std::abs(u[j]));
    const double saved = x[j];
    x[j] = saved + h;
    const std::vector<double> fp = fn(x);
    x[j] = saved - h;
    const std::vector<double> fm = fn(x);
    x[j] = saved;
    cols[j].resize(fp.size());
    for (std::size_t i = 0; i < fp.size(); ++i) cols[j][i] = (fp[i] - fm[i]) / (2.0 * h);
  }
  return cols;
}

inline std::uint64_t ulp_distance(double a, double b) {
  if (a == b) return 0;
  if (!std::isfinite(a) || !std::isfinite(b)) return ~0ull;
  std::uint64_t ua, ub;
  std::memcpy(&ua, &a, 8);
  std::memcpy(&ub, &b, 8);
  // map bit patterns to a monotonic ordering of doubles
  ua = (ua >> 63) ? ~ua : ua | 0x8000000000000000ull;
  ub = (ub >> 63) ? ~ub : ub | 0x8000000000000000ull;
  return ua > ub ? ua - ub : ub - ua;
}

// Dense (E, g, H) via per-element symbolic graph evaluation and dense
// scatter, mirroring the assembler's activation and pin semantics.
struct DenseResult {
  double E = 0.0;
  std::vector<double> grad;
  std::vector<std::vector<double>> hess;
};

inline DenseResult dense_assemble(EnergySystem& sys) {
  if (sys.topology_dirty()) sys.refresh_topology();
  const std::size_t n = sys.n_dofs();
  DenseResult out;
  out.grad.assign(n, 0.0);
  out.hess.assign(n, std::vector<double>(n, 0.0));

  for (std::size_t d = 0; d < sys.n_energies(); ++d) {
    EnergyDef& def = sys.energy_at_mut(d);
    ExprGraph& g = *def.graph;
    const std::vector<NodeId> wrt(def.dof_syms.begin(), def.dof_syms.end());
    DerivativeBundle bundle = gradient_hessian(g, def.energy_root, wrt);
    const std::vector<NodeId> roots = bundle.output_roots();
    const std::size_t nd = def.n_dofs();
    const std::size_t ne = sys.n_elements(def.conn);
    std::vector<double> in(def.n_inputs());
    std::vector<double> vals(roots.size());
    std::vector<double> acc(roots.size());
    std::vector<std::size_t> dofs(nd);

    for (std::size_t e = 0; e < ne; ++e) {
      const std::size_t items = def.is_sum ? def.sum_items.size() : 1;
      auto item_ptr = [&](std::size_t it) {
        return def.is_sum ? def.sum_items[it].data() : nullptr;
      };
      // activation mirrors the assembler: any item active keeps the element
      bool active = true;
      if (def.has_activation()) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t it = 0; it < items; ++it) {
          sys.gather_element_inputs(def, e, item_ptr(it), in.data());
          best = std::max(best, g.eval1(def.act_root, in));
        }
        active = Condition{Scalar(), def.act_kind}.holds(best);
      }
      if (!active) continue;

      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t it = 0; it < items; ++it) {
        sys.gather_element_inputs(def, e, item_ptr(it), in.data());
        g.eval(roots, in, vals);
        for (std::size_t k = 0; k < vals.size(); ++k) acc[k] += vals[k];
      }
      sys.element_dofs(def, e, dofs);
      out.E += acc[0];
      for (std::size_t i = 0; i < nd; ++i) out.grad[dofs[i]] += acc[1 + i];
      for (std::size_t i = 0; i < nd; ++i)
        for (std::size_t j = 0; j < nd; ++j)
          out.hess[dofs[i]][dofs[j]] += acc[1 + nd + i * nd + j];
    }
  }

  const std::vector<std::uint8_t>& pinned = sys.pinned();
  for (std::size_t i = 0; i < n; ++i) {
    if (!pinned[i]) continue;
    out.grad[i] = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out.hess[i][j] = 0.0;
      out.hess[j][i] = 0.0;
    }
    out.hess[i][i] = 1.0;
  }
  return out;
}

// Signed distance to a capped cylinder by closest-point clamping in
// cylindrical coordinates (exact for a convex body), independent of the
// min/max SDF composition.
inline double cylinder_distance_oracle(const std::array<double, 3>& p,
                                       const std::array<double, 3>& a,
                                       const std::array<double, 3>& b, double r) {
  double axis[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const double L = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  for (auto& v : axis) v /= L;
  const double pa[3] = {p[0] - a[0], p[1] - a[1], p[2] - a[2]};
  const double t = pa[0] * axis[0] + pa[1] * axis[1] + pa[2] * axis[2];
  const double rad[3] = {pa[0] - t * axis[0], pa[1] - t * axis[1], pa[2] - t * axis[2]};
  const double rho = std::sqrt(rad[0] * rad[0] + rad[1] * rad[1] + rad[2] * rad[2]);
  if (rho <= r && t >= 0.0 && t <= L) {
    return -std::min({r - rho, t, L - t});  // interior: distance to nearest face
  }
  const double tc = std::min(std::max(t, 0.0), L);
  const double rc = std::min(rho, r);
  double q[3];
  for (int i = 0; i < 3; ++i) {
    const double dir = rho > 0 ? rad[i] / rho : 0.0;
    q[i] = a[i] + tc * axis[i] + rc * dir;
  }
  const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

inline std::mt19937_64& rng() {
  static std::mt19937_64 gen(0x5eed5eedULL);
  return gen;
}

inline double uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng());
}

}  // namespace symel::test
