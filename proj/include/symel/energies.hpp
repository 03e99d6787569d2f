#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "symel/registry.hpp"

namespace symel {

enum class Material { NH, StableNH, StVK, ARAP, FixedCorot };

struct MaterialParams {
  double mu = 0.0;
  double lambda = 0.0;
  Material model = Material::StableNH;
};

inline MaterialParams lame_from_young_poisson(double young, double poisson,
                                              Material model = Material::StableNH) {
  MaterialParams p;
  p.mu = young / (2.0 * (1.0 + poisson));
  p.lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
  p.model = model;
  return p;
}

// Reference-tetrahedron quadrature: rows are (w, xi, eta, zeta); weights sum
// to the reference volume 1/6.
struct QuadratureRule {
  std::vector<std::array<double, 4>> points;
};

inline QuadratureRule tet_rule_linear() {
  return {{{1.0 / 6.0, 0.25, 0.25, 0.25}}};
}

inline QuadratureRule tet_rule_quadratic() {
  const double a = 0.5854101966249685;
  const double b = 0.1381966011250105;
  const double w = 1.0 / 24.0;
  return {{{w, a, b, b}, {w, b, a, b}, {w, b, b, a}, {w, b, b, b}}};
}

struct ContactParams {
  double k_c = 1.0;     // barrier stiffness
  double d_hat = 1e-3;  // activation / accuracy distance
  double mu_f = 0.0;    // Coulomb friction coefficient
  double y_hat = 1e-4;  // stick/slide velocity threshold
  double eps = 1e-14;   // stable-norm floor
};

struct StrainLimitParams {
  double sigma_l = 1.0;
  double k_sl = 1.0;
};

struct ConstraintParams {
  double k = 1.0;        // penalty stiffness
  double l0 = 1.0;       // spring rest length
  double alpha_dp = 0.0; // spring damping coefficient
};

// ---------------------------------------------------------------------------
// Symbolic building blocks
// ---------------------------------------------------------------------------

// (m / 2 dt^2) ||x - (x0 + dt v0 + dt^2 a)||^2
inline Scalar inertia_energy(const Vector& x, const Vector& x0, const Vector& v0,
                             const std::array<double, 3>& a, double dt, const Scalar& m) {
  if (dt == 0.0) throw Error("inertia_energy: dt must be nonzero");
  if (x.size() != 3 || x0.size() != 3 || v0.size() != 3)
    throw Error("inertia_energy: 3-component vectors required");
  ExprGraph& g = x.graph();
  Vector target(g);
  for (std::size_t i = 0; i < 3; ++i) target.push_back(x0[i] + dt * v0[i] + dt * dt * a[i]);
  const Vector diff = x - target;
  return (m / (2.0 * dt * dt)) * diff.squared_norm();
}

// F = [x1-x0, x2-x0, x3-x0] [X1-X0, X2-X0, X3-X0]^-1
inline Matrix deformation_gradient_tet(const std::array<Vector, 4>& X,
                                       const std::array<Vector, 4>& x) {
  const Matrix Ds = Matrix::from_columns({x[1] - x[0], x[2] - x[0], x[3] - x[0]});
  const Matrix Dm = Matrix::from_columns({X[1] - X[0], X[2] - X[0], X[3] - X[0]});
  return Ds * Dm.inverse();
}

// 2x2 deformation gradient of a triangle: the deformed edge matrix expressed
// in the triangle's own orthonormal frame (thin-QR factor), times the inverse
// rest-frame edge matrix. Shares singular values with the full 3x2 gradient.
inline Matrix deformation_gradient_tri(const Matrix& Dm2inv,
                                       const std::array<Vector, 3>& x,
                                       double eps = kStableNormEps) {
  if (Dm2inv.rows() != 2 || Dm2inv.cols() != 2)
    throw Error("deformation_gradient_tri: 2x2 rest matrix required");
  ExprGraph& g = x[0].graph();
  const Vector e1 = x[1] - x[0];
  const Vector e2 = x[2] - x[0];
  const Scalar l1sq = e1.squared_norm();
  const Scalar l1 = stable_norm(e1, eps);
  const Scalar guard = l1sq - g.constant(eps * eps);
  const Scalar t = e1.dot(e2);
  const Scalar e2u = branch(guard, t / l1, g.constant(0.0));          // e2 . e1/|e1|
  const Scalar proj = branch(guard, t / l1sq, g.constant(0.0));       // projection coeff
  Vector perp(g);
  for (std::size_t i = 0; i < 3; ++i) perp.push_back(e2[i] - proj * e1[i]);
  const Scalar h = stable_norm(perp, eps);
  Matrix Ds2(g, 2, 2);
  Ds2.set(0, 0, l1);
  Ds2.set(0, 1, e2u);
  Ds2.set(1, 0, g.constant(0.0));
  Ds2.set(1, 1, h);
  return Ds2 * Dm2inv;
}

// Strain energy density per material model. R is the lagged element rotation
// required by ARAP/FixedCorot and ignored otherwise.
inline Scalar strain_energy_density(Material model, const Matrix& F, const Matrix* R,
                                    const Scalar& mu, const Scalar& lambda) {
  const int dim = F.rows();
  if (dim != F.cols() || (dim != 2 && dim != 3))
    throw Error("strain_energy_density: F must be 2x2 or 3x3");
  ExprGraph& g = F.graph();
  const Scalar Ic = (F.transpose() * F).trace();
  const Scalar J = F.det();
  switch (model) {
    case Material::NH:
      return 0.5 * mu * (Ic - double(dim)) - mu * log(J) + 0.5 * lambda * pow(log(J), 2);
    case Material::StableNH: {
      if (dim != 3) throw Error("strain_energy_density: stable NH is 3x3 only");
      const Scalar mu_s = (4.0 / 3.0) * mu;
      const Scalar la_s = lambda + (5.0 / 6.0) * lambda;
      const Scalar alpha = 1.0 + mu_s / la_s - mu_s / (4.0 * la_s);
      return 0.5 * mu_s * (Ic - 3.0) + 0.5 * la_s * pow(J - alpha, 2) -
             0.5 * mu_s * log(Ic + 1.0);
    }
    case Material::StVK: {
      Matrix E = 0.5 * (F.transpose() * F - Matrix::identity(g, dim));
      return mu * E.frobenius_norm_sq() + 0.5 * lambda * pow(E.trace(), 2);
    }
    case Material::ARAP: {
      if (!R) throw Error("strain_energy_density: ARAP requires a rotation");
      const Scalar tr = (F.transpose() * (*R)).trace();
      return 0.5 * mu * (Ic - 2.0 * tr + double(dim)) + 0.5 * lambda * pow(J - 1.0, 2);
    }
    case Material::FixedCorot: {
      if (!R) throw Error("strain_energy_density: FixedCorot requires a rotation");
      const Matrix D = F - *R;
      return mu * D.frobenius_norm_sq() + 0.5 * lambda * pow(J - 1.0, 2);
    }
  }
  throw Error("strain_energy_density: unknown model");
}

inline bool material_needs_rotation(Material m) {
  return m == Material::ARAP || m == Material::FixedCorot;
}

// -k_c (d - dhat)^2 ln(d / dhat)
inline Scalar contact_barrier(const Scalar& d, const Scalar& d_hat, const Scalar& k_c) {
  return -(k_c * pow(d - d_hat, 2) * log(d / d_hat));
}

// y = |T (va - vb)| with a stable norm; smooth below the stick threshold.
inline Scalar friction_energy(const Vector& va, const Vector& vb, const Matrix& T,
                              const Scalar& mu_f, const Scalar& f_n, double y_hat,
                              double eps) {
  if (T.rows() != 2 || T.cols() != 3) throw Error("friction_energy: T must be 2x3");
  if (y_hat <= 0.0) throw Error("friction_energy: stick threshold must be positive");
  const Vector yt = T * (va - vb);
  const Scalar y = stable_norm2(yt[0], yt[1], eps);
  ExprGraph& g = y.graph();
  const Scalar smooth =
      -pow(y, 3) / (3.0 * y_hat * y_hat) + pow(y, 2) / y_hat + g.constant(y_hat / 3.0);
  const Scalar f = branch(y - y_hat, y, smooth);
  return mu_f * f_n * f;
}

// 0.5 k ||xa - xb||^2
inline Scalar ball_joint_energy(const Vector& xa, const Vector& xb, const Scalar& k) {
  return 0.5 * k * (xa - xb).squared_norm();
}

// 0.5 k ||da - db||^2, directions normalized by the caller
inline Scalar direction_lock_energy(const Vector& da, const Vector& db, const Scalar& k) {
  return 0.5 * k * (da - db).squared_norm();
}

// 0.5 k ||r - (r . d) d||^2 with r = xb - xa
inline Scalar slider_energy(const Vector& xa, const Vector& xb, const Vector& da,
                            const Scalar& k) {
  const Vector r = xb - xa;
  const Scalar rd = r.dot(da);
  Vector off(r.graph());
  for (std::size_t i = 0; i < 3; ++i) off.push_back(r[i] - rd * da[i]);
  return 0.5 * k * off.squared_norm();
}

// (k/2)(|xa-xb|/l0 - 1)^2 + (alpha/2 l0)((va-vb).(xa-xb)/|xa-xb|)^2, with the
// normalization guarded so coincident endpoints stay differentiable.
inline Scalar damped_spring_energy(const Vector& xa, const Vector& xb, const Vector& va,
                                   const Vector& vb, const Scalar& k_sp, const Scalar& l0,
                                   const Scalar& alpha_dp, double eps = kStableNormEps) {
  ExprGraph& g = xa.graph();
  const Vector r = xa - xb;
  const Scalar lsq = r.squared_norm();
  const Scalar l = stable_norm(r, eps);
  const Scalar dotv = (va - vb).dot(r);
  const Scalar rate = branch(lsq - g.constant(eps * eps), dotv / sqrt(lsq), g.constant(0.0));
  return 0.5 * k_sp * pow(l / l0 - 1.0, 2) + (alpha_dp / 2.0) / l0 * pow(rate, 2);
}

// ---------------------------------------------------------------------------
// Signed distance functions (negative inside)
// ---------------------------------------------------------------------------

inline Scalar sdf_halfspace(const Vector& p, const std::array<double, 3>& n, double offset) {
  ExprGraph& g = p.graph();
  Scalar d = g.constant(-offset);
  for (std::size_t i = 0; i < 3; ++i) d = d + n[i] * p[i];
  return d;
}

inline Scalar sdf_sphere(const Vector& p, const Vector& c, const Scalar& r,
                         double eps = kStableNormEps) {
  return stable_norm(p - c, eps) - r;
}

// Capped cylinder between axis endpoints a and b with radius r.
inline Scalar sdf_capped_cylinder(const Vector& p, const Vector& a, const Vector& b,
                                  const Scalar& r, double eps = kStableNormEps) {
  ExprGraph& g = p.graph();
  const Vector axis = b - a;
  const Vector pa = p - a;
  const Scalar Lsq = axis.squared_norm();
  const Scalar L = stable_norm(axis, eps);
  const Scalar guard = Lsq - g.constant(eps * eps);
  const Scalar dot = pa.dot(axis);
  const Scalar t = branch(guard, dot / L, g.constant(0.0));    // axial coordinate
  const Scalar q = branch(guard, dot / Lsq, g.constant(0.0));  // projection coeff
  Vector radial(g);
  for (std::size_t i = 0; i < 3; ++i) radial.push_back(pa[i] - q * axis[i]);
  const Scalar rho = stable_norm(radial, eps);
  const Scalar dx = rho - r;
  const Scalar dy = max(-t, t - L);
  const Scalar zero = g.constant(0.0);
  return min(max(dx, dy), zero) + stable_norm2(max(dx, zero), max(dy, zero), eps);
}

// Host-side mirrors used for lagged friction quantities.
using HostSdf = std::function<double(const std::array<double, 3>&)>;

inline HostSdf host_sdf_halfspace(std::array<double, 3> n, double offset) {
  return [n, offset](const std::array<double, 3>& p) {
    return n[0] * p[0] + n[1] * p[1] + n[2] * p[2] - offset;
  };
}

inline HostSdf host_sdf_sphere(std::array<double, 3> c, double r) {
  return [c, r](const std::array<double, 3>& p) {
    const double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz) - r;
  };
}

inline HostSdf host_sdf_capped_cylinder(const std::array<double, 3>* a,
                                        const std::array<double, 3>* b, const double* r) {
  // Pointers: the endpoints move; the host owns and updates them.
  return [a, b, r](const std::array<double, 3>& p) {
    double axis[3] = {(*b)[0] - (*a)[0], (*b)[1] - (*a)[1], (*b)[2] - (*a)[2]};
    double pa[3] = {p[0] - (*a)[0], p[1] - (*a)[1], p[2] - (*a)[2]};
    const double Lsq = axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2];
    const double L = std::sqrt(Lsq);
    const double dot = pa[0] * axis[0] + pa[1] * axis[1] + pa[2] * axis[2];
    const double t = Lsq > 0 ? dot / L : 0.0;
    const double q = Lsq > 0 ? dot / Lsq : 0.0;
    double rad[3] = {pa[0] - q * axis[0], pa[1] - q * axis[1], pa[2] - q * axis[2]};
    const double rho = std::sqrt(rad[0] * rad[0] + rad[1] * rad[1] + rad[2] * rad[2]);
    const double dx = rho - *r;
    const double dy = std::max(-t, t - L);
    const double outside =
        std::sqrt(std::max(dx, 0.0) * std::max(dx, 0.0) + std::max(dy, 0.0) * std::max(dy, 0.0));
    return std::min(std::max(dx, dy), 0.0) + outside;
  };
}

inline std::array<double, 3> sdf_normal_fd(const HostSdf& f, const std::array<double, 3>& p,
                                           double h = 1e-6) {
  std::array<double, 3> n{};
  for (int i = 0; i < 3; ++i) {
    std::array<double, 3> pp = p, pm = p;
    pp[i] += h;
    pm[i] -= h;
    n[i] = (f(pp) - f(pm)) / (2.0 * h);
  }
  const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
  if (len > 0)
    for (auto& v : n) v /= len;
  return n;
}

// Rows of the returned array form the 2x3 tangent projection for a contact
// with outward normal n.
inline std::array<double, 6> tangent_basis_from_normal(const std::array<double, 3>& n) {
  std::array<double, 3> t1;
  if (std::abs(n[0]) <= std::abs(n[1]) && std::abs(n[0]) <= std::abs(n[2]))
    t1 = {0.0, -n[2], n[1]};
  else if (std::abs(n[1]) <= std::abs(n[2]))
    t1 = {-n[2], 0.0, n[0]};
  else
    t1 = {-n[1], n[0], 0.0};
  double len = std::sqrt(t1[0] * t1[0] + t1[1] * t1[1] + t1[2] * t1[2]);
  if (len == 0) {
    t1 = {1.0, 0.0, 0.0};
    len = 1.0;
  }
  for (auto& v : t1) v /= len;
  const std::array<double, 3> t2 = {n[1] * t1[2] - n[2] * t1[1], n[2] * t1[0] - n[0] * t1[2],
                                    n[0] * t1[1] - n[1] * t1[0]};
  return {t1[0], t1[1], t1[2], t2[0], t2[1], t2[2]};
}

// Normal force magnitude lagged from the previous-step barrier gradient:
// f_n = -dE_c/dd at d_prev while the barrier is active, else 0.
inline double barrier_normal_force(double d, double d_hat, double k_c) {
  if (!(d > 0.0) || d >= d_hat) return 0.0;
  return k_c * (2.0 * (d - d_hat) * std::log(d / d_hat) + (d - d_hat) * (d - d_hat) / d);
}

// Rotation factor of the polar decomposition of a 3x3 matrix (row-major),
// with reflections removed.
inline void polar_rotation(const double* F, double* R) {
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = F[i * 3 + j];
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d U = svd.matrixU();
  Eigen::Matrix3d V = svd.matrixV();
  Eigen::Vector3d s(1.0, 1.0, (U * V.transpose()).determinant());
  Eigen::Matrix3d r = U * s.asDiagonal() * V.transpose();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) R[i * 3 + j] = r(i, j);
}

// ---------------------------------------------------------------------------
// Shape functions
// ---------------------------------------------------------------------------

// Per-node symbolic shape gradients w.r.t. reference coordinates.
// Linear family: 4 nodes; quadratic family: 10 nodes with edge nodes on
// (0,1),(1,2),(2,0),(0,3),(1,3),(2,3).
inline std::vector<std::array<Scalar, 3>> tet_shape_gradients(int nodes, const Scalar& xi,
                                                              const Scalar& eta,
                                                              const Scalar& zeta) {
  ExprGraph& g = xi.graph();
  const Scalar one = g.constant(1.0);
  const std::array<Scalar, 4> lam = {one - xi - eta - zeta, xi, eta, zeta};
  const double glam[4][3] = {{-1, -1, -1}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  std::vector<std::array<Scalar, 3>> dN;
  if (nodes == 4) {
    for (int a = 0; a < 4; ++a) {
      std::array<Scalar, 3> row;
      for (int j = 0; j < 3; ++j) row[j] = g.constant(glam[a][j]);
      dN.push_back(row);
    }
    return dN;
  }
  if (nodes != 10) throw Error("tet_shape_gradients: 4 or 10 nodes");
  for (int a = 0; a < 4; ++a) {
    const Scalar c = 4.0 * lam[a] - 1.0;
    std::array<Scalar, 3> row;
    for (int j = 0; j < 3; ++j) row[j] = c * glam[a][j];
    dN.push_back(row);
  }
  const int edges[6][2] = {{0, 1}, {1, 2}, {2, 0}, {0, 3}, {1, 3}, {2, 3}};
  for (const auto& e : edges) {
    std::array<Scalar, 3> row;
    for (int j = 0; j < 3; ++j)
      row[j] = 4.0 * (lam[e[0]] * glam[e[1]][j] + lam[e[1]] * glam[e[0]][j]);
    dN.push_back(row);
  }
  return dN;
}

// ---------------------------------------------------------------------------
// Registration helpers: complete energies on an EnergySystem
// ---------------------------------------------------------------------------

namespace detail {

inline void check_material(const MaterialParams& m) {
  if (!(m.mu > 0.0)) throw Error("material: mu must be positive");
  if (!(m.lambda >= 0.0)) throw Error("material: lambda must be non-negative");
}

inline double tet_rest_volume(const double* p0, const double* p1, const double* p2,
                              const double* p3) {
  double e1[3], e2[3], e3[3];
  for (int i = 0; i < 3; ++i) {
    e1[i] = p1[i] - p0[i];
    e2[i] = p2[i] - p0[i];
    e3[i] = p3[i] - p0[i];
  }
  const double det = e1[0] * (e2[1] * e3[2] - e2[2] * e3[1]) -
                     e1[1] * (e2[0] * e3[2] - e2[2] * e3[0]) +
                     e1[2] * (e2[0] * e3[1] - e2[1] * e3[0]);
  return det / 6.0;
}

}  // namespace detail

// Per-vertex kinetic target energy; connectivity is one item per element.
inline EnergyHandle add_inertia(EnergySystem& sys, std::string name, ConnHandle verts,
                                ArrayHandle x, ArrayHandle x_prev, ArrayHandle v,
                                ArrayHandle mass, double dt,
                                const std::array<double, 3>& gravity) {
  if (dt == 0.0) throw Error("add_inertia: dt must be nonzero");
  return sys.add_energy(std::move(name), verts, [&](EnergyBuilder& b) {
    const Vector xs = b.bind(x, 0);
    const Vector x0 = b.bind(x_prev, 0);
    const Vector v0 = b.bind(v, 0);
    const Scalar m = b.bind_scalar(mass, 0);
    b.set(inertia_energy(xs, x0, v0, gravity, dt, m));
  });
}

// Linear-tet hyperelastic solid: direct deformation gradient, exact for
// constant-strain elements. Rest positions and material parameters are
// kernel inputs, so one kernel serves every element and material sweep.
inline EnergyHandle add_solid_tet(EnergySystem& sys, std::string name, ConnHandle tets,
                                  ArrayHandle x, ArrayHandle rest, Material model,
                                  const double& mu, const double& lambda,
                                  ArrayHandle rotation = {}) {
  if (material_needs_rotation(model) && !rotation.valid())
    throw Error("add_solid_tet: model requires a per-element rotation array");
  return sys.add_energy(std::move(name), tets, [&](EnergyBuilder& b) {
    std::array<Vector, 4> xs, Xs;
    for (int a = 0; a < 4; ++a) xs[a] = b.bind(x, a);
    for (int a = 0; a < 4; ++a) Xs[a] = b.bind(rest, a);
    const Scalar smu = b.param(mu, "mu");
    const Scalar sla = b.param(lambda, "lambda");
    const Matrix F = deformation_gradient_tet(Xs, xs);
    Matrix R;
    const Matrix* Rp = nullptr;
    if (material_needs_rotation(model)) {
      const Vector r = b.bind_element(rotation);
      R = Matrix(b.graph(), 3, 3);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) R.set(i, j, r[i * 3 + j]);
      Rp = &R;
    }
    const Matrix Dm = Matrix::from_columns({Xs[1] - Xs[0], Xs[2] - Xs[0], Xs[3] - Xs[0]});
    const Scalar Ve = Dm.det() / 6.0;
    b.set(Ve * strain_energy_density(model, F, Rp, smu, sla));
  });
}

// Quadrature FEM solid (linear or quadratic tets): one kernel per energy,
// invoked per quadrature point through the fixed summation.
inline EnergyHandle add_fem_solid(EnergySystem& sys, std::string name, ConnHandle elems,
                                  ArrayHandle x, ArrayHandle rest, int nodes,
                                  const QuadratureRule& rule, Material model,
                                  const double& mu, const double& lambda,
                                  ArrayHandle rotation = {}) {
  if (nodes != 4 && nodes != 10) throw Error("add_fem_solid: 4 or 10 nodes per element");
  if (rule.points.empty()) throw Error("add_fem_solid: empty quadrature rule");
  double wsum = 0.0;
  for (const auto& r : rule.points) {
    if (!(r[0] > 0.0)) throw Error("add_fem_solid: quadrature weights must be positive");
    wsum += r[0];
  }
  if (std::abs(wsum - 1.0 / 6.0) > 1e-12)
    throw Error("add_fem_solid: quadrature weights must sum to the reference volume");
  if (material_needs_rotation(model) && !rotation.valid())
    throw Error("add_fem_solid: model requires a per-element rotation array");
  return sys.add_energy(std::move(name), elems, [&](EnergyBuilder& b) {
    std::vector<Vector> xs, Xs;
    for (int a = 0; a < nodes; ++a) xs.push_back(b.bind(x, a));
    for (int a = 0; a < nodes; ++a) Xs.push_back(b.bind(rest, a));
    const Scalar smu = b.param(mu, "mu");
    const Scalar sla = b.param(lambda, "lambda");
    Matrix R;
    const Matrix* Rp = nullptr;
    if (material_needs_rotation(model)) {
      const Vector r = b.bind_element(rotation);
      R = Matrix(b.graph(), 3, 3);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) R.set(i, j, r[i * 3 + j]);
      Rp = &R;
    }
    std::vector<std::vector<double>> items;
    for (const auto& r : rule.points) items.push_back({r[0], r[1], r[2], r[3]});
    const Scalar total = b.sum_items(items, [&](const Vector& item) {
      const Scalar w = item[0];
      const auto dN = tet_shape_gradients(nodes, item[1], item[2], item[3]);
      ExprGraph& g = b.graph();
      Matrix J(g, 3, 3), jd(g, 3, 3);
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          Scalar aJ = Xs[0][i] * dN[0][j];
          Scalar aj = xs[0][i] * dN[0][j];
          for (std::size_t a = 1; a < std::size_t(nodes); ++a) {
            aJ = aJ + Xs[a][i] * dN[a][j];
            aj = aj + xs[a][i] * dN[a][j];
          }
          J.set(int(i), int(j), aJ);
          jd.set(int(i), int(j), aj);
        }
      const Matrix F = jd * J.inverse();
      return strain_energy_density(model, F, Rp, smu, sla) * w * J.det();
    });
    b.set(total);
  });
}

// Membrane (2D FEM) over triangles. Dm2inv holds the 4 entries of the
// inverse rest edge matrix, area the rest area, both per element.
inline EnergyHandle add_membrane_tri(EnergySystem& sys, std::string name, ConnHandle tris,
                                     ArrayHandle x, ArrayHandle Dm2inv, ArrayHandle area,
                                     Material model, const double& mu, const double& lambda) {
  if (material_needs_rotation(model))
    throw Error("add_membrane_tri: rotation-based models not supported for membranes");
  return sys.add_energy(std::move(name), tris, [&](EnergyBuilder& b) {
    std::array<Vector, 3> xs;
    for (int a = 0; a < 3; ++a) xs[a] = b.bind(x, a);
    const Vector dm = b.bind_element(Dm2inv);
    const Scalar Ae = b.bind_element_scalar(area);
    const Scalar smu = b.param(mu, "mu");
    const Scalar sla = b.param(lambda, "lambda");
    Matrix Dmi(b.graph(), 2, 2);
    Dmi.set(0, 0, dm[0]);
    Dmi.set(0, 1, dm[1]);
    Dmi.set(1, 0, dm[2]);
    Dmi.set(1, 1, dm[3]);
    const Matrix F = deformation_gradient_tri(Dmi, xs);
    b.set(Ae * strain_energy_density(model, F, nullptr, smu, sla));
  });
}

// Barrier contact of candidate vertices against an analytic signed distance.
// The distance expression comes from `make_distance`, which may bind its own
// runtime parameters (moving collider transforms). Activation d <= d_hat,
// line-search guard d > 0.
inline EnergyHandle add_contact_sdf(
    EnergySystem& sys, std::string name, ConnHandle verts, ArrayHandle x,
    const double& k_c, const double& d_hat,
    const std::function<Scalar(EnergyBuilder&, const Vector&)>& make_distance) {
  return sys.add_energy(std::move(name), verts, [&](EnergyBuilder& b) {
    const Vector p = b.bind(x, 0);
    const Scalar d = make_distance(b, p);
    const Scalar kc = b.param(k_c, "k_c");
    const Scalar dh = b.param(d_hat, "d_hat");
    b.set(contact_barrier(d, dh, kc), d <= dh);
    b.set_guard(d);
  });
}

// Lagged Coulomb friction against a collider. T (2x3 tangent projection) and
// f_n come from per-element arrays refreshed each step from the previous
// state; the relative velocity is (x - x_prev)/dt against a collider
// velocity parameter. Active while f_n > 0.
inline EnergyHandle add_friction_sdf(EnergySystem& sys, std::string name, ConnHandle verts,
                                     ArrayHandle x, ArrayHandle x_prev, double dt,
                                     ArrayHandle tangent, ArrayHandle normal_force,
                                     const double& mu_f, double y_hat, double eps,
                                     const std::array<double, 3>* collider_velocity) {
  if (dt == 0.0) throw Error("add_friction_sdf: dt must be nonzero");
  return sys.add_energy(std::move(name), verts, [&](EnergyBuilder& b) {
    const Vector xs = b.bind(x, 0);
    const Vector xp = b.bind(x_prev, 0);
    const Vector t6 = b.bind_element(tangent);
    const Scalar fn = b.bind_element_scalar(normal_force);
    const Scalar smu = b.param(mu_f, "mu_f");
    ExprGraph& g = b.graph();
    Vector va(g), vb(g);
    for (std::size_t i = 0; i < 3; ++i) va.push_back((xs[i] - xp[i]) * (1.0 / dt));
    for (std::size_t i = 0; i < 3; ++i)
      vb.push_back(collider_velocity ? b.param((*collider_velocity)[i], "v_collider")
                                     : g.constant(0.0));
    Matrix T(g, 2, 3);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c) T.set(r, c, t6[r * 3 + c]);
    b.set(friction_energy(va, vb, T, smu, fn, y_hat, eps), fn > 0.0);
  });
}

// Quadratic bending over interior-edge flaps (x0,x1 shared edge; x2,x3
// wings); Q is the 144-entry per-element quadratic form.
inline EnergyHandle add_bending(EnergySystem& sys, std::string name, ConnHandle flaps,
                                ArrayHandle x, ArrayHandle Q, const double& k_b) {
  return sys.add_energy(std::move(name), flaps, [&](EnergyBuilder& b) {
    Vector xe(b.graph());
    for (int a = 0; a < 4; ++a) {
      const Vector v = b.bind(x, a);
      for (std::size_t i = 0; i < 3; ++i) xe.push_back(v[i]);
    }
    const Vector q = b.bind_element(Q);
    const Scalar kb = b.param(k_b, "k_b");
    Scalar acc = b.constant(0.0);
    for (int i = 0; i < 12; ++i)
      for (int j = 0; j < 12; ++j) acc = acc + q[i * 12 + j] * xe[i] * xe[j];
    b.set(0.5 * kb * acc);
  });
}

// Cubic overstretch penalty on the largest singular value of the 2x2
// deformation gradient (direct 2x2 singular value formula).
inline Scalar max_singular_value_2x2(const Matrix& F, double eps = kStableNormEps) {
  if (F.rows() != 2 || F.cols() != 2) throw Error("max_singular_value_2x2: 2x2 required");
  const Scalar a = F(0, 0), bb = F(0, 1), c = F(1, 0), d = F(1, 1);
  return 0.5 * (stable_norm2(a + d, bb - c, eps) + stable_norm2(a - d, bb + c, eps));
}

inline EnergyHandle add_strain_limit(EnergySystem& sys, std::string name, ConnHandle tris,
                                     ArrayHandle x, ArrayHandle Dm2inv, ArrayHandle area,
                                     const double& sigma_l, const double& k_sl) {
  return sys.add_energy(std::move(name), tris, [&](EnergyBuilder& b) {
    std::array<Vector, 3> xs;
    for (int a = 0; a < 3; ++a) xs[a] = b.bind(x, a);
    const Vector dm = b.bind_element(Dm2inv);
    const Scalar Ae = b.bind_element_scalar(area);
    const Scalar sl = b.param(sigma_l, "sigma_l");
    const Scalar k = b.param(k_sl, "k_sl");
    Matrix Dmi(b.graph(), 2, 2);
    Dmi.set(0, 0, dm[0]);
    Dmi.set(0, 1, dm[1]);
    Dmi.set(1, 0, dm[2]);
    Dmi.set(1, 1, dm[3]);
    const Matrix F = deformation_gradient_tri(Dmi, xs);
    const Scalar s1 = max_singular_value_2x2(F);
    const Scalar C = s1 - sl;
    b.set((k / 3.0) * Ae * pow(C, 3), C > b.constant(0.0));
  });
}

// Cross-set ball joint: tuple slot 0 indexes array xa, slot 1 indexes xb.
inline EnergyHandle add_attachment(EnergySystem& sys, std::string name, ConnHandle pairs,
                                   ArrayHandle xa, ArrayHandle xb, const double& k) {
  return sys.add_energy(std::move(name), pairs, [&](EnergyBuilder& b) {
    const Vector a = b.bind(xa, 0);
    const Vector c = b.bind(xb, 1);
    const Scalar kk = b.param(k, "k");
    b.set(ball_joint_energy(a, c, kk));
  });
}

// Damped spring between item pairs of one dof array; velocities are implicit
// (x - x_prev)/dt, rest lengths per element.
inline EnergyHandle add_damped_spring(EnergySystem& sys, std::string name, ConnHandle pairs,
                                      ArrayHandle x, ArrayHandle x_prev, double dt,
                                      ArrayHandle rest_length, const double& k_sp,
                                      const double& alpha_dp) {
  if (dt == 0.0) throw Error("add_damped_spring: dt must be nonzero");
  return sys.add_energy(std::move(name), pairs, [&](EnergyBuilder& b) {
    const Vector a = b.bind(x, 0);
    const Vector c = b.bind(x, 1);
    const Vector ap = b.bind(x_prev, 0);
    const Vector cp = b.bind(x_prev, 1);
    const Scalar l0 = b.bind_element_scalar(rest_length);
    const Scalar k = b.param(k_sp, "k_sp");
    const Scalar ad = b.param(alpha_dp, "alpha_dp");
    ExprGraph& g = b.graph();
    Vector va(g), vc(g);
    for (std::size_t i = 0; i < 3; ++i) va.push_back((a[i] - ap[i]) * (1.0 / dt));
    for (std::size_t i = 0; i < 3; ++i) vc.push_back((c[i] - cp[i]) * (1.0 / dt));
    b.set(damped_spring_energy(a, c, va, vc, k, l0, ad));
  });
}

// ---------------------------------------------------------------------------
// Bending precompute
// ---------------------------------------------------------------------------

// Hinge coefficients for an interior edge flap (planar rest positions):
// kappa = (c02+c04, c01+c03, -(c01+c02), -(c03+c04)) over the four angles
// adjacent to the shared edge; Q4 = 3/(A1+A2) kappa kappa^T annihilates every
// planar configuration and is PSD by construction. The 12x12 form repeats Q4
// per coordinate.
inline std::array<double, 144> precompute_bending_Q(const std::array<double, 3>& X0,
                                                    const std::array<double, 3>& X1,
                                                    const std::array<double, 3>& X2,
                                                    const std::array<double, 3>& X3) {
  auto sub = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return std::array<double, 3>{a[0] - b[0], a[1] - b[1], a[2] - b[2]};
  };
  auto dot = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
  };
  auto cross = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return std::array<double, 3>{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                                 a[0] * b[1] - a[1] * b[0]};
  };
  auto norm = [&](const std::array<double, 3>& a) { return std::sqrt(dot(a, a)); };
  auto cot = [&](const std::array<double, 3>& u, const std::array<double, 3>& v) {
    const double s = norm(cross(u, v));
    if (s <= 0.0) throw Error("bending precompute: degenerate flap triangle");
    return dot(u, v) / s;
  };
  // angles at the shared-edge ends: c01/c02 in triangle (0,1,2), c03/c04 in
  // triangle (0,1,3)
  const double c01 = cot(sub(X1, X0), sub(X2, X0));
  const double c02 = cot(sub(X0, X1), sub(X2, X1));
  const double c03 = cot(sub(X1, X0), sub(X3, X0));
  const double c04 = cot(sub(X0, X1), sub(X3, X1));
  const double A1 = 0.5 * norm(cross(sub(X1, X0), sub(X2, X0)));
  const double A2 = 0.5 * norm(cross(sub(X1, X0), sub(X3, X0)));
  const double kappa[4] = {c02 + c04, c01 + c03, -(c01 + c02), -(c03 + c04)};
  const double scale = 3.0 / (A1 + A2);
  for (double v : kappa)
    if (!std::isfinite(v)) throw Error("bending precompute: non-finite hinge weights");

  // The stencil must annihilate the planar rest flap itself.
  const std::array<double, 3>* X[4] = {&X0, &X1, &X2, &X3};
  double span = 0.0;
  for (int i = 0; i < 4; ++i) span = std::max(span, norm(*X[i]));
  for (int c = 0; c < 3; ++c) {
    double r = 0.0;
    for (int i = 0; i < 4; ++i) r += kappa[i] * (*X[i])[c];
    if (std::abs(r) > 1e-8 * std::max(1.0, span) * (std::abs(kappa[0]) + std::abs(kappa[1]) +
                                                    std::abs(kappa[2]) + std::abs(kappa[3])))
      throw Error("bending precompute: rest flap not planar");
  }

  std::array<double, 144> Q{};
  for (int a = 0; a < 4; ++a)
    for (int c = 0; c < 4; ++c) {
      const double v = scale * kappa[a] * kappa[c];
      for (int r = 0; r < 3; ++r) Q[(3 * a + r) * 12 + (3 * c + r)] = v;
    }
  return Q;
}

}  // namespace symel
