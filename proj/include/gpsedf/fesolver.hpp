#pragma once

#include <Eigen/Sparse>

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "gpsedf/kinematics.hpp"
#include "gpsedf/posterior_reduce.hpp"

namespace gpsedf {

/// Quadrilateral membrane mesh. Coordinates in mm, one fiber angle per
/// element (radians from the x-axis).
struct Mesh {
  Matrix nodes;                    // N x 2
  std::vector<std::array<int, 4>> quads;
  std::vector<double> fiber_angle;
  double thickness = 0.38;  // mm

  Eigen::Index num_nodes() const { return nodes.rows(); }
  std::size_t num_elements() const { return quads.size(); }
};

/// Structured rectangle, nodes row-major bottom-to-top.
inline Mesh rect_mesh(int nx, int ny, double Lx, double Ly, double fiber = 0.0,
                      double thickness = 0.38) {
  if (nx < 1 || ny < 1) throw ContractError("rect_mesh: need at least one element per side");
  Mesh m;
  m.thickness = thickness;
  m.nodes.resize(static_cast<Eigen::Index>(nx + 1) * (ny + 1), 2);
  for (int j = 0; j <= ny; ++j)
    for (int i = 0; i <= nx; ++i) {
      const Eigen::Index n = static_cast<Eigen::Index>(j) * (nx + 1) + i;
      m.nodes(n, 0) = Lx * i / nx;
      m.nodes(n, 1) = Ly * j / ny;
    }
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const int a = j * (nx + 1) + i;
      m.quads.push_back({a, a + 1, a + nx + 2, a + nx + 1});
      m.fiber_angle.push_back(fiber);
    }
  return m;
}

struct DirichletBC {
  int node = 0;
  int component = 0;  // 0 = x, 1 = y
  double value = 0.0; // displacement at load factor 1
};

struct NeumannBC {
  std::array<int, 2> edge{0, 0};
  Vec2 traction = Vec2::Zero();  // kPa at load factor 1, on the undeformed edge
};

struct BoundaryConditions {
  std::vector<DirichletBC> dirichlet;
  std::vector<NeumannBC> neumann;
  std::vector<double> load_schedule = {1.0 / 3.0, 2.0 / 3.0, 1.0};
};

/// Constitutive interface used by the element loop.
class PlaneStressMaterial {
public:
  virtual ~PlaneStressMaterial() = default;
  virtual SEDFDerivatives derivs(const InvariantPoint& p) const = 0;
};

class AnalyticMaterial : public PlaneStressMaterial {
public:
  explicit AnalyticMaterial(AnalyticalModel m) : model_(m) {}
  SEDFDerivatives derivs(const InvariantPoint& p) const override {
    return analytic_derivs(model_, p);
  }

private:
  AnalyticalModel model_;
};

/// One realization of the stochastic surrogate: mean plus fixed mode weights.
class MaterialRealization : public PlaneStressMaterial {
public:
  MaterialRealization(const StochasticSEDF& sedf, Vector nu)
      : sedf_(&sedf), nu_(std::move(nu)) {
    if (nu_.size() != sedf.num_modes())
      throw ContractError("MaterialRealization: mode weight count mismatch");
  }

  SEDFDerivatives derivs(const InvariantPoint& p) const override {
    SEDFDerivatives d;
    d.W = sedf_->realize(p, nu_, 0, 0);
    d.W1 = sedf_->realize(p, nu_, 1, 0);
    d.W4 = sedf_->realize(p, nu_, 0, 1);
    d.W11 = sedf_->realize(p, nu_, 2, 0);
    d.W44 = sedf_->realize(p, nu_, 0, 2);
    d.W14 = sedf_->realize(p, nu_, 1, 1);
    return d;
  }

private:
  const StochasticSEDF* sedf_;
  Vector nu_;
};

namespace detail {

/// Plane-stress invariants of an in-plane F with fiber direction m:
/// I1 includes the thickness stretch det(F)^-1 squared.
inline InvariantPoint invariants_of(const Mat2& F, const Vec2& m) {
  const double det = F.determinant();
  if (!(det > 0.0)) throw DomainError("element state: non-positive in-plane determinant");
  return {F.squaredNorm() + 1.0 / (det * det), (F * m).squaredNorm()};
}

}  // namespace detail

/// First PK stress and the consistent material tangent at one quadrature
/// state. The tangent is indexed A(2*i+j, 2*k+l) = dP_ij / dF_kl.
inline void element_stress_tangent(const Mat2& F, const PlaneStressMaterial& material,
                                   double fiber_angle, Mat2& P, Eigen::Matrix4d& A) {
  const Vec2 m{std::cos(fiber_angle), std::sin(fiber_angle)};
  const InvariantPoint theta = detail::invariants_of(F, m);
  const SEDFDerivatives d = material.derivs(theta);

  const double det = F.determinant();
  const double idet2 = 1.0 / (det * det);
  const Mat2 Finv = F.inverse();
  const Vec2 Fm = F * m;

  const Mat2 g1 = 2.0 * F - 2.0 * idet2 * Finv.transpose();
  const Mat2 g4 = 2.0 * Fm * m.transpose();
  P = d.W1 * g1 + d.W4 * g4;

  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k)
        for (int l = 0; l < 2; ++l) {
          double h1 = (i == k && j == l) ? 2.0 : 0.0;
          h1 += 4.0 * idet2 * Finv(l, k) * Finv(j, i);
          h1 += 2.0 * idet2 * Finv(j, k) * Finv(l, i);
          const double h4 = (i == k) ? 2.0 * m[j] * m[l] : 0.0;
          A(2 * i + j, 2 * k + l) = d.W11 * g1(i, j) * g1(k, l) +
                                    d.W14 * (g1(i, j) * g4(k, l) + g4(i, j) * g1(k, l)) +
                                    d.W44 * g4(i, j) * g4(k, l) + d.W1 * h1 + d.W4 * h4;
        }
}

inline double von_mises(const Mat2& cauchy) {
  const double sxx = cauchy(0, 0), syy = cauchy(1, 1);
  const double sxy = 0.5 * (cauchy(0, 1) + cauchy(1, 0));
  return std::sqrt(sxx * sxx - sxx * syy + syy * syy + 3.0 * sxy * sxy);
}

struct FESnapshot {
  double load_factor = 0.0;
  Matrix displacements;            // N x 2, mm
  std::vector<Mat2> element_cauchy;  // quadrature average per element, kPa
  std::vector<double> element_von_mises;
};

struct StepLog {
  double load_factor = 0.0;
  int iterations = 0;
  double residual = 0.0;
};

struct FEResult {
  std::vector<FESnapshot> snapshots;
  std::vector<StepLog> log;

  const FESnapshot& final_snapshot() const {
    if (snapshots.empty()) throw ContractError("FEResult: no snapshots recorded");
    return snapshots.back();
  }
};

namespace detail {

constexpr double kGaussPoint = 0.57735026918962576;  // 1/sqrt(3)

struct QuadPoint {
  Vec2 grad[4];  // shape gradients wrt X
  double weight; // w * det(J0)
};

inline std::vector<std::array<QuadPoint, 4>> precompute_quadrature(const Mesh& mesh) {
  std::vector<std::array<QuadPoint, 4>> out(mesh.num_elements());
  const double xi[4] = {-kGaussPoint, kGaussPoint, kGaussPoint, -kGaussPoint};
  const double eta[4] = {-kGaussPoint, -kGaussPoint, kGaussPoint, kGaussPoint};
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
    const auto& q = mesh.quads[e];
    Eigen::Matrix<double, 4, 2> X;
    for (int a = 0; a < 4; ++a) X.row(a) = mesh.nodes.row(q[static_cast<std::size_t>(a)]);
    for (int gp = 0; gp < 4; ++gp) {
      const double s = xi[gp], t = eta[gp];
      // bilinear shape gradients wrt (xi, eta); node order CCW from (-1,-1)
      const double dN[4][2] = {{-(1 - t) / 4, -(1 - s) / 4},
                               {(1 - t) / 4, -(1 + s) / 4},
                               {(1 + t) / 4, (1 + s) / 4},
                               {-(1 + t) / 4, (1 - s) / 4}};
      Mat2 J = Mat2::Zero();
      for (int a = 0; a < 4; ++a)
        for (int i = 0; i < 2; ++i)
          for (int k = 0; k < 2; ++k) J(i, k) += X(a, i) * dN[a][k];
      const double detJ = J.determinant();
      if (!(detJ > 0.0))
        throw ContractError("mesh: non-positive Jacobian in element " + std::to_string(e));
      const Mat2 Jinv = J.inverse();
      for (int a = 0; a < 4; ++a) {
        out[e][static_cast<std::size_t>(gp)].grad[a] =
            Jinv.transpose() * Vec2(dN[a][0], dN[a][1]);
      }
      out[e][static_cast<std::size_t>(gp)].weight = detJ;  // unit Gauss weights
    }
  }
  return out;
}

}  // namespace detail

/// Static solve with incremental loading and a Newton iteration with
/// backtracking line search at each step. Snapshots are recorded at the
/// requested load factors (0 yields the trivial zero state).
inline FEResult solve_static(const Mesh& mesh, const BoundaryConditions& bcs,
                             const PlaneStressMaterial& material,
                             const std::vector<double>& snapshots = {},
                             int max_newton = 30) {
  const Eigen::Index n_nodes = mesh.num_nodes();
  const Eigen::Index n_dof = 2 * n_nodes;
  const auto quad = detail::precompute_quadrature(mesh);
  const double t = mesh.thickness;

  if (bcs.load_schedule.empty() || std::abs(bcs.load_schedule.back() - 1.0) > 1e-12)
    throw ContractError("solve_static: load schedule must end at 1");
  std::vector<double> factors = bcs.load_schedule;
  for (double s : snapshots)
    if (s > 0.0) factors.push_back(s);
  std::sort(factors.begin(), factors.end());
  factors.erase(std::unique(factors.begin(), factors.end(),
                            [](double a, double b) { return std::abs(a - b) < 1e-12; }),
                factors.end());

  std::vector<bool> fixed(static_cast<std::size_t>(n_dof), false);
  for (const auto& d : bcs.dirichlet) {
    if (d.node < 0 || d.node >= n_nodes || d.component < 0 || d.component > 1)
      throw ContractError("solve_static: Dirichlet constraint out of range");
    fixed[static_cast<std::size_t>(2 * d.node + d.component)] = true;
  }
  std::vector<Eigen::Index> free_of_dof(static_cast<std::size_t>(n_dof), -1);
  Eigen::Index n_free = 0;
  for (Eigen::Index i = 0; i < n_dof; ++i)
    if (!fixed[static_cast<std::size_t>(i)]) free_of_dof[static_cast<std::size_t>(i)] = n_free++;

  // unit external force from the edge tractions (scaled by the load factor)
  Vector f_ext_unit = Vector::Zero(n_dof);
  for (const auto& nm : bcs.neumann) {
    const Vec2 a = mesh.nodes.row(nm.edge[0]);
    const Vec2 b = mesh.nodes.row(nm.edge[1]);
    const double len = (b - a).norm();
    for (int end = 0; end < 2; ++end)
      for (int i = 0; i < 2; ++i)
        f_ext_unit[2 * nm.edge[static_cast<std::size_t>(end)] + i] +=
            0.5 * len * t * nm.traction[i];
  }

  Vector u = Vector::Zero(n_dof);
  FEResult result;

  auto assemble = [&](const Vector& u_cur, Vector& f_int,
                      std::vector<Eigen::Triplet<double>>* trips) {
    f_int.setZero(n_dof);
    Mat2 P;
    Eigen::Matrix4d A;
    for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
      const auto& q = mesh.quads[e];
      for (int gp = 0; gp < 4; ++gp) {
        const auto& qp = quad[e][static_cast<std::size_t>(gp)];
        Mat2 F = Mat2::Identity();
        for (int a = 0; a < 4; ++a) {
          const int n = q[static_cast<std::size_t>(a)];
          F += Vec2(u_cur[2 * n], u_cur[2 * n + 1]) * qp.grad[a].transpose();
        }
        try {
          element_stress_tangent(F, material, mesh.fiber_angle[e], P, A);
        } catch (const ExtrapolationError& ex) {
          throw ExtrapolationError(std::string(ex.what()) + " (element " + std::to_string(e) +
                                   ")");
        }
        const double w = qp.weight * t;
        for (int a = 0; a < 4; ++a) {
          const int n = q[static_cast<std::size_t>(a)];
          f_int[2 * n + 0] += w * (P(0, 0) * qp.grad[a][0] + P(0, 1) * qp.grad[a][1]);
          f_int[2 * n + 1] += w * (P(1, 0) * qp.grad[a][0] + P(1, 1) * qp.grad[a][1]);
        }
        if (trips) {
          for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b) {
              const int na = q[static_cast<std::size_t>(a)];
              const int nb = q[static_cast<std::size_t>(b)];
              for (int i = 0; i < 2; ++i)
                for (int k = 0; k < 2; ++k) {
                  double kk = 0.0;
                  for (int j = 0; j < 2; ++j)
                    for (int l = 0; l < 2; ++l)
                      kk += A(2 * i + j, 2 * k + l) * qp.grad[a][j] * qp.grad[b][l];
                  const Eigen::Index ra = free_of_dof[static_cast<std::size_t>(2 * na + i)];
                  const Eigen::Index cb = free_of_dof[static_cast<std::size_t>(2 * nb + k)];
                  if (ra >= 0 && cb >= 0)
                    trips->emplace_back(static_cast<int>(ra), static_cast<int>(cb), w * kk);
                }
            }
        }
      }
    }
  };

  auto record_snapshot = [&](double lf) {
    FESnapshot snap;
    snap.load_factor = lf;
    snap.displacements.resize(n_nodes, 2);
    for (Eigen::Index n = 0; n < n_nodes; ++n) {
      snap.displacements(n, 0) = u[2 * n];
      snap.displacements(n, 1) = u[2 * n + 1];
    }
    snap.element_cauchy.resize(mesh.num_elements());
    snap.element_von_mises.resize(mesh.num_elements());
    Mat2 P;
    Eigen::Matrix4d A;
    for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
      const auto& q = mesh.quads[e];
      Mat2 sigma = Mat2::Zero();
      for (int gp = 0; gp < 4; ++gp) {
        const auto& qp = quad[e][static_cast<std::size_t>(gp)];
        Mat2 F = Mat2::Identity();
        for (int a = 0; a < 4; ++a) {
          const int n = q[static_cast<std::size_t>(a)];
          F += Vec2(u[2 * n], u[2 * n + 1]) * qp.grad[a].transpose();
        }
        element_stress_tangent(F, material, mesh.fiber_angle[e], P, A);
        sigma += 0.25 * (P * F.transpose());  // J = 1
      }
      snap.element_cauchy[e] = sigma;
      snap.element_von_mises[e] = von_mises(sigma);
    }
    result.snapshots.push_back(std::move(snap));
  };

  const bool want_zero =
      std::any_of(snapshots.begin(), snapshots.end(), [](double s) { return s == 0.0; });
  if (want_zero) record_snapshot(0.0);

  Vector f_int(n_dof);
  for (double lf : factors) {
    for (const auto& d : bcs.dirichlet) u[2 * d.node + d.component] = lf * d.value;
    const Vector f_ext = lf * f_ext_unit;

    int iter = 0;
    double res_norm = 0.0;
    for (; iter < max_newton; ++iter) {
      std::vector<Eigen::Triplet<double>> trips;
      assemble(u, f_int, &trips);
      Vector resid_full = f_int - f_ext;
      Vector R(n_free);
      for (Eigen::Index i = 0; i < n_dof; ++i)
        if (free_of_dof[static_cast<std::size_t>(i)] >= 0)
          R[free_of_dof[static_cast<std::size_t>(i)]] = resid_full[i];
      res_norm = n_free > 0 ? R.cwiseAbs().maxCoeff() : 0.0;
      const double char_force =
          std::max({f_ext.cwiseAbs().maxCoeff(), f_int.cwiseAbs().maxCoeff(), 1e-12});
      if (res_norm < 1e-8 * char_force) break;

      Eigen::SparseMatrix<double> K(n_free, n_free);
      K.setFromTriplets(trips.begin(), trips.end());
      Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(K);
      if (solver.info() != Eigen::Success)
        throw NumericalError("solve_static: tangent factorization failed at load " +
                             std::to_string(lf));
      const Vector du = solver.solve(Vector(-R));

      // backtracking on the Euclidean residual norm
      const double base = R.squaredNorm();
      double alpha = 1.0;
      Vector u_trial = u;
      for (int ls = 0; ls < 10; ++ls) {
        u_trial = u;
        for (Eigen::Index i = 0; i < n_dof; ++i)
          if (free_of_dof[static_cast<std::size_t>(i)] >= 0)
            u_trial[i] += alpha * du[free_of_dof[static_cast<std::size_t>(i)]];
        Vector f_trial(n_dof);
        assemble(u_trial, f_trial, nullptr);
        Vector R_trial(n_free);
        for (Eigen::Index i = 0; i < n_dof; ++i)
          if (free_of_dof[static_cast<std::size_t>(i)] >= 0)
            R_trial[free_of_dof[static_cast<std::size_t>(i)]] = f_trial[i] - f_ext[i];
        if (R_trial.squaredNorm() < base || alpha < 1.0 / 512.0) break;
        alpha *= 0.5;
      }
      u = u_trial;
    }
    if (iter == max_newton)
      throw NumericalError("solve_static: no convergence at load factor " + std::to_string(lf) +
                           ", residual " + std::to_string(res_norm));
    result.log.push_back({lf, iter, res_norm});
    const bool want = std::any_of(snapshots.begin(), snapshots.end(),
                                  [&](double s) { return std::abs(s - lf) < 1e-12; });
    if (want || (snapshots.empty() && std::abs(lf - 1.0) < 1e-12)) record_snapshot(lf);
  }
  return result;
}

/// Reactions at constrained dofs for a converged state (f_int - f_ext there).
inline Vector reaction_forces(const Mesh& mesh, const BoundaryConditions& bcs,
                              const PlaneStressMaterial& material, const FESnapshot& snap) {
  const Eigen::Index n_nodes = mesh.num_nodes();
  const Eigen::Index n_dof = 2 * n_nodes;
  const auto quad = detail::precompute_quadrature(mesh);
  Vector f_int = Vector::Zero(n_dof);
  Mat2 P;
  Eigen::Matrix4d A;
  for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
    const auto& q = mesh.quads[e];
    for (int gp = 0; gp < 4; ++gp) {
      const auto& qp = quad[e][static_cast<std::size_t>(gp)];
      Mat2 F = Mat2::Identity();
      for (int a = 0; a < 4; ++a) {
        const int n = q[static_cast<std::size_t>(a)];
        F += Vec2(snap.displacements(n, 0), snap.displacements(n, 1)) * qp.grad[a].transpose();
      }
      element_stress_tangent(F, material, mesh.fiber_angle[e], P, A);
      const double w = qp.weight * mesh.thickness;
      for (int a = 0; a < 4; ++a) {
        const int n = q[static_cast<std::size_t>(a)];
        f_int[2 * n + 0] += w * (P(0, 0) * qp.grad[a][0] + P(0, 1) * qp.grad[a][1]);
        f_int[2 * n + 1] += w * (P(1, 0) * qp.grad[a][0] + P(1, 1) * qp.grad[a][1]);
      }
    }
  }
  Vector f_ext = Vector::Zero(n_dof);
  for (const auto& nm : bcs.neumann) {
    const Vec2 a = mesh.nodes.row(nm.edge[0]);
    const Vec2 b = mesh.nodes.row(nm.edge[1]);
    const double len = (b - a).norm();
    for (int end = 0; end < 2; ++end)
      for (int i = 0; i < 2; ++i)
        f_ext[2 * nm.edge[static_cast<std::size_t>(end)] + i] +=
            0.5 * len * mesh.thickness * snap.load_factor * nm.traction[i];
  }
  Vector reactions = Vector::Zero(n_dof);
  for (const auto& d : bcs.dirichlet) {
    const Eigen::Index i = 2 * d.node + d.component;
    reactions[i] = f_int[i] - f_ext[i];
  }
  return reactions;
}

/// The reference problem used across the verification suites: a square
/// membrane with symmetry supports on the left and bottom edges and linearly
/// varying edge tractions on the right and top.
struct CanonicalMembrane {
  Mesh mesh;
  BoundaryConditions bcs;
};

inline CanonicalMembrane canonical_membrane(int n, double tx = 3.0, double ty = 2.0,
                                            double profile_slope = 0.4) {
  const double L = 10.0;  // mm
  CanonicalMembrane c;
  c.mesh = rect_mesh(n, n, L, L, 0.0, 0.38);
  const int nn = n + 1;
  for (int j = 0; j < nn; ++j) c.bcs.dirichlet.push_back({j * nn, 0, 0.0});      // left: u_x = 0
  for (int i = 0; i < nn; ++i) c.bcs.dirichlet.push_back({i, 1, 0.0});           // bottom: u_y = 0
  for (int j = 0; j < n; ++j) {  // right edge, traction varying with height
    const int a = j * nn + n, b = (j + 1) * nn + n;
    const double ymid = 0.5 * (c.mesh.nodes(a, 1) + c.mesh.nodes(b, 1));
    NeumannBC e;
    e.edge = {a, b};
    e.traction = Vec2(tx * (1.0 + profile_slope * (ymid / L - 0.5)), 0.0);
    c.bcs.neumann.push_back(e);
  }
  for (int i = 0; i < n; ++i) {  // top edge, traction varying with x
    const int a = n * nn + i, b = n * nn + i + 1;
    const double xmid = 0.5 * (c.mesh.nodes(a, 0) + c.mesh.nodes(b, 0));
    NeumannBC e;
    e.edge = {a, b};
    e.traction = Vec2(0.0, ty * (1.0 + profile_slope * (xmid / L - 0.5)));
    c.bcs.neumann.push_back(e);
  }
  return c;
}

}  // namespace gpsedf
