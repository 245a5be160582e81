#pragma once

#include <Eigen/Eigenvalues>

#include "gpsedf/dataset.hpp"
#include "gpsedf/posterior.hpp"
#include "gpsedf/spline.hpp"

namespace gpsedf {

/// Energy-channel posterior sampled on a lattice.
struct GridPosterior {
  ConstraintGrid grid;
  Vector W_bar;  // mean, row-major over the lattice
  Matrix Sigma;  // full covariance
};

struct EigenModes {
  Vector eigenvalues;  // descending, clamped at zero, only the retained m
  Matrix eigenvectors; // N x m, unit columns
  int m = 0;
};

/// Mean spline plus m weighted eigenmode splines: the reduced stochastic
/// constitutive model handed to the FE solver.
struct StochasticSEDF {
  SplineSurface mean;
  std::vector<std::pair<double, SplineSurface>> modes;  // (eigenvalue, surface)
  DomainBox box;

  int num_modes() const { return static_cast<int>(modes.size()); }

  /// Pointwise evaluation of one realization nu of the mode coefficients.
  double realize(const InvariantPoint& p, const Vector& nu, int d1 = 0, int d4 = 0) const {
    double v = mean.eval(p, d1, d4);
    for (int i = 0; i < num_modes(); ++i)
      v += nu[i] * modes[static_cast<std::size_t>(i)].second.eval(p, d1, d4);
    return v;
  }
};

inline GridPosterior sample_posterior_grid(const SEDFPosterior& gp, const ConstraintGrid& grid) {
  if (grid.size() > 10000)
    throw ContractError("sample_posterior_grid: lattice too large for a dense covariance");
  QueryList queries;
  queries.reserve(static_cast<std::size_t>(grid.size()));
  for (const auto& p : grid.points()) queries.emplace_back(p, DerivTag::val);
  JointPosterior post = gp.predict(queries, true);
  GridPosterior out;
  out.grid = grid;
  out.W_bar = std::move(post.mean);
  out.Sigma = std::move(post.cov);
  return out;
}

/// Keep the smallest m with 1 - sum_{i<=m} l_i^2 / sum_j l_j^2 <= TOL.
/// Negative eigenvalues are numerical and clamped to zero first.
inline EigenModes truncate_eigen(const Matrix& Sigma, double TOL = 0.05) {
  if (Sigma.rows() != Sigma.cols()) throw ContractError("truncate_eigen: matrix must be square");
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (Sigma + Sigma.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError("truncate_eigen: eigensolver failed");
  const Eigen::Index N = Sigma.rows();
  Vector lam = es.eigenvalues().reverse();          // descending
  Matrix vec = es.eigenvectors().rowwise().reverse();
  lam = lam.cwiseMax(0.0);
  const double total = lam.squaredNorm();
  EigenModes out;
  if (total <= 0.0) {
    out.eigenvalues.resize(0);
    out.eigenvectors.resize(N, 0);
    out.m = 0;
    return out;
  }
  double captured = 0.0;
  Eigen::Index m = 0;
  while (m < N && 1.0 - captured / total > TOL * (1.0 + 1e-12) + 1e-14) {
    captured += lam[m] * lam[m];
    ++m;
  }
  out.m = static_cast<int>(m);
  out.eigenvalues = lam.head(m);
  out.eigenvectors = vec.leftCols(m);
  return out;
}

inline SplineSurface fit_tensor_spline(const ConstraintGrid& grid, const Vector& values) {
  std::vector<double> sites1(static_cast<std::size_t>(grid.n1));
  std::vector<double> sites4(static_cast<std::size_t>(grid.n4));
  for (int i = 0; i < grid.n1; ++i) sites1[static_cast<std::size_t>(i)] = grid.point(i, 0).I1;
  for (int j = 0; j < grid.n4; ++j) sites4[static_cast<std::size_t>(j)] = grid.point(0, j).I4;
  return SplineSurface::fit(sites1, sites4, values);
}

inline double spline_eval(const SplineSurface& s, const InvariantPoint& p, int d1_order = 0,
                          int d4_order = 0) {
  return s.eval(p, d1_order, d4_order);
}

inline StochasticSEDF build_stochastic_sedf(const SEDFPosterior& gp, const ConstraintGrid& grid,
                                            double TOL = 0.05) {
  const GridPosterior gpost = sample_posterior_grid(gp, grid);
  const EigenModes modes = truncate_eigen(gpost.Sigma, TOL);
  StochasticSEDF out;
  out.mean = fit_tensor_spline(grid, gpost.W_bar);
  out.box = out.mean.box();
  out.modes.reserve(static_cast<std::size_t>(modes.m));
  for (int i = 0; i < modes.m; ++i)
    out.modes.emplace_back(modes.eigenvalues[i],
                           fit_tensor_spline(grid, Vector(modes.eigenvectors.col(i))));
  return out;
}

}  // namespace gpsedf
