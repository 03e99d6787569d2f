#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "symel/assembly.hpp"

namespace symel {

struct NewtonOptions {
  int max_iters = 50;
  double grad_tol = 1e-6;
  bool scale_tol_by_dofs = false;  // effective tolerance = grad_tol * n_dofs
  double cg_rel_tol = 1e-4;
  int cg_max_iters = 0;  // 0: number of dofs
  double armijo_c = 1e-4;
  double alpha_min = 1e-12;
  int max_tau_escalations = 30;
};

struct PcgResult {
  int iters = 0;
  bool converged = false;
  bool neg_curvature = false;
  double rel_residual = 0.0;
};

struct SolveReport {
  int newton_iters = 0;
  double E = 0.0;
  double grad_inf = 0.0;
  bool converged = false;
  bool line_search_failed = false;
  int total_cg_iters = 0;
  int tau_escalations = 0;
  int line_search_rejections = 0;
  double solve_ms = 0.0;  // linear solves plus line search
  std::vector<double> grad_history;  // grad_inf at the start of each iteration
};

namespace detail {

// Inverse of each (diagonal block + tau I). A block whose determinant is not
// usable falls back to the identity.
inline void block_jacobi_inverse(const BcrsMatrix& H, double tau, std::vector<double>& inv) {
  const int b = H.b;
  inv.assign(H.n_block_rows * b * b, 0.0);
  for (std::size_t r = 0; r < H.n_block_rows; ++r) {
    const std::size_t k = H.find_block(r, r);
    double* out = inv.data() + r * b * b;
    if (k == BcrsMatrix::npos) {
      for (int i = 0; i < b; ++i) out[i * b + i] = 1.0;
      continue;
    }
    const double* v = H.block(k);
    if (b == 1) {
      const double d = v[0] + tau;
      out[0] = (std::isfinite(d) && d != 0.0) ? 1.0 / d : 1.0;
      continue;
    }
    double m[9];
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < b; ++j) m[i * 3 + j] = v[i * b + j] + (i == j ? tau : 0.0);
    const double det = m[0] * (m[4] * m[8] - m[5] * m[7]) -
                       m[1] * (m[3] * m[8] - m[5] * m[6]) +
                       m[2] * (m[3] * m[7] - m[4] * m[6]);
    if (!std::isfinite(det) || std::abs(det) < 1e-300) {
      for (int i = 0; i < b; ++i) out[i * b + i] = 1.0;
      continue;
    }
    const double id = 1.0 / det;
    out[0] = (m[4] * m[8] - m[5] * m[7]) * id;
    out[1] = (m[2] * m[7] - m[1] * m[8]) * id;
    out[2] = (m[1] * m[5] - m[2] * m[4]) * id;
    out[3] = (m[5] * m[6] - m[3] * m[8]) * id;
    out[4] = (m[0] * m[8] - m[2] * m[6]) * id;
    out[5] = (m[2] * m[3] - m[0] * m[5]) * id;
    out[6] = (m[3] * m[7] - m[4] * m[6]) * id;
    out[7] = (m[1] * m[6] - m[0] * m[7]) * id;
    out[8] = (m[0] * m[4] - m[1] * m[3]) * id;
  }
}

inline void block_apply(const std::vector<double>& blocks, int b,
                        std::span<const double> x, std::span<double> y) {
  const std::size_t n_rows = x.size() / b;
  for (std::size_t r = 0; r < n_rows; ++r) {
    const double* m = blocks.data() + r * b * b;
    for (int i = 0; i < b; ++i) {
      double acc = 0.0;
      for (int j = 0; j < b; ++j) acc += m[i * b + j] * x[r * b + j];
      y[r * b + i] = acc;
    }
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace detail

// Preconditioned conjugate gradient on (H + tau I) x = rhs with block-Jacobi
// preconditioning. Detecting non-positive curvature stops the solve; at the
// first iteration the preconditioned gradient is returned so Newton always
// receives a usable direction candidate.
inline PcgResult pcg(const BcrsMatrix& H, double tau, std::span<const double> rhs,
                     std::span<double> x, double rel_tol, int max_iters,
                     int threads = 1) {
  const std::size_t n = rhs.size();
  if (n != H.n_rows() || x.size() != n) throw Error("pcg: size mismatch");
  PcgResult res;
  std::fill(x.begin(), x.end(), 0.0);
  const double rhs_norm = std::sqrt(detail::dot(rhs, rhs));
  if (rhs_norm == 0.0) {
    res.converged = true;
    return res;
  }
  std::vector<double> prec;
  detail::block_jacobi_inverse(H, tau, prec);
  std::vector<double> r(rhs.begin(), rhs.end()), z(n), p(n), q(n);
  detail::block_apply(prec, H.b, r, z);
  p = z;
  double rz = detail::dot(r, z);
  for (int it = 0; it < max_iters; ++it) {
    const double rnorm = std::sqrt(detail::dot(r, r));
    res.rel_residual = rnorm / rhs_norm;
    if (res.rel_residual <= rel_tol) {
      res.converged = true;
      return res;
    }
    H.matvec(p, q, threads);
    if (tau != 0.0)
      for (std::size_t i = 0; i < n; ++i) q[i] += tau * p[i];
    const double pq = detail::dot(p, q);
    if (!(pq > 0.0)) {
      res.neg_curvature = true;
      if (it == 0) std::copy(z.begin(), z.end(), x.begin());
      return res;
    }
    const double alpha = rz / pq;
    for (std::size_t i = 0; i < n; ++i) x[i] += alpha * p[i];
    for (std::size_t i = 0; i < n; ++i) r[i] -= alpha * q[i];
    detail::block_apply(prec, H.b, r, z);
    const double rz_next = detail::dot(r, z);
    const double beta = rz_next / rz;
    rz = rz_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
    ++res.iters;
  }
  res.rel_residual = std::sqrt(detail::dot(r, r)) / rhs_norm;
  return res;
}

// Newton minimization of the assembled energy. Each iteration assembles at
// the current state (running hooks and refreshing activation), solves the
// regularized normal equations, and backtracks under the Armijo condition.
// Trial states whose guard minimum is <= 0 or whose energy is non-finite are
// rejected outright. The regularization tau restarts at zero every iteration
// and escalates on indefiniteness or non-descent directions.
inline SolveReport minimize(Assembler& as, const NewtonOptions& opt = {}) {
  EnergySystem& sys = as.system();
  SolveReport rep;
  const std::size_t n = sys.n_dofs();
  if (n == 0) throw Error("minimize: no dofs registered");
  const double tol =
      opt.scale_tol_by_dofs ? opt.grad_tol * static_cast<double>(n) : opt.grad_tol;
  const int cg_max = opt.cg_max_iters > 0 ? opt.cg_max_iters : static_cast<int>(n);

  std::vector<double> u(n), du(n), u_try(n), neg_g(n);
  using clock = std::chrono::steady_clock;

  for (int iter = 0; iter <= opt.max_iters; ++iter) {
    double E = as.assemble();
    sys.gather_dofs(u);  // hooks/scripts may have adjusted state arrays
    const std::vector<double>& g = as.gradient();
    double ginf = 0.0;
    for (double v : g) ginf = std::max(ginf, std::abs(v));
    rep.E = E;
    rep.grad_inf = ginf;
    rep.grad_history.push_back(ginf);
    if (ginf <= tol) {
      rep.converged = true;
      return rep;
    }
    if (iter == opt.max_iters) break;

    const auto t0 = clock::now();
    for (std::size_t i = 0; i < n; ++i) neg_g[i] = -g[i];

    // Direction with tau escalation; tau_0 scales with the Hessian diagonal.
    const BcrsMatrix& H = as.hessian();
    double diag_mean = 0.0;
    for (std::size_t r = 0; r < H.n_block_rows; ++r) {
      const std::size_t k = H.find_block(r, r);
      if (k == BcrsMatrix::npos) continue;
      const double* v = H.block(k);
      for (int i = 0; i < H.b; ++i) diag_mean += std::abs(v[i * H.b + i]);
    }
    diag_mean = H.n_rows() ? diag_mean / static_cast<double>(H.n_rows()) : 1.0;
    const double tau0 = 1e-6 * (diag_mean > 0.0 ? diag_mean : 1.0);

    double tau = 0.0;
    double gdu = 0.0;
    bool have_direction = false;
    for (int esc = 0; esc <= opt.max_tau_escalations; ++esc) {
      const PcgResult cg = pcg(H, tau, neg_g, du, opt.cg_rel_tol, cg_max, as.threads());
      rep.total_cg_iters += cg.iters;
      gdu = detail::dot(g, du);
      if (!cg.neg_curvature && gdu < 0.0) {
        have_direction = true;
        break;
      }
      tau = tau == 0.0 ? tau0 : tau * 10.0;
      ++rep.tau_escalations;
    }
    if (!have_direction) {
      rep.solve_ms += std::chrono::duration<double, std::milli>(clock::now() - t0).count();
      throw Error("minimize: no descent direction after regularization");
    }

    // Backtracking line search with guard and Armijo acceptance.
    double alpha = 1.0;
    const double E0 = E;
    bool accepted = false;
    while (alpha >= opt.alpha_min) {
      for (std::size_t i = 0; i < n; ++i) u_try[i] = u[i] + alpha * du[i];
      sys.scatter_dofs(u_try);
      if (as.guard_min() <= 0.0) {
        alpha *= 0.5;
        ++rep.line_search_rejections;
        continue;
      }
      const double E_try = as.energy_only();
      if (!std::isfinite(E_try) || E_try > E0 + opt.armijo_c * alpha * gdu) {
        alpha *= 0.5;
        ++rep.line_search_rejections;
        continue;
      }
      accepted = true;
      break;
    }
    rep.solve_ms += std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    if (!accepted) {
      sys.scatter_dofs(u);  // restore the last accepted state
      rep.line_search_failed = true;
      return rep;
    }
    ++rep.newton_iters;
  }
  return rep;
}

// Optimization-form backward Euler. Position arrays are the dofs; the
// inertia target x + dt v (+ dt^2 a) enters through energies bound to the
// snapshot and velocity arrays. Velocities are recovered from the accepted
// positions after each solve.
class BackwardEuler {
 public:
  struct Body {
    ArrayHandle x, x_prev, v;
  };

  BackwardEuler(double dt) : dt_(dt) {
    if (!(dt > 0.0)) throw Error("integrator: dt must be positive");
  }

  void add_body(ArrayHandle x, ArrayHandle x_prev, ArrayHandle v) {
    bodies_.push_back({x, x_prev, v});
  }

  // Runs before each solve with the end-of-step time; scripts boundary
  // positions and refreshes per-step lagged quantities.
  void set_pre_step(std::function<void(double)> fn) { pre_step_ = std::move(fn); }

  double time() const { return t_; }
  double dt() const { return dt_; }

  SolveReport step(Assembler& as, const NewtonOptions& opt = {}) {
    EnergySystem& sys = as.system();
    for (const Body& b : bodies_) {
      auto x = sys.array_data(b.x);
      auto xp = sys.array_data(b.x_prev);
      if (x.size() != xp.size()) throw Error("integrator: x/x_prev size mismatch");
      std::copy(x.begin(), x.end(), xp.begin());
    }
    if (pre_step_) pre_step_(t_ + dt_);
    SolveReport rep = minimize(as, opt);
    for (const Body& b : bodies_) {
      auto x = sys.array_data(b.x);
      auto xp = sys.array_data(b.x_prev);
      auto v = sys.array_data(b.v);
      if (v.size() != x.size()) throw Error("integrator: velocity array size mismatch");
      for (std::size_t i = 0; i < x.size(); ++i) v[i] = (x[i] - xp[i]) / dt_;
    }
    t_ += dt_;
    return rep;
  }

 private:
  std::vector<Body> bodies_;
  std::function<void(double)> pre_step_;
  double dt_;
  double t_ = 0.0;
};

}  // namespace symel
