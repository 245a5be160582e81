#pragma once

#include <algorithm>
#include <vector>

#include "gpsedf/common.hpp"

namespace gpsedf {

namespace detail {

/// Nonzero cubic B-spline basis functions and derivatives at x.
/// `span` satisfies knots[span] <= x < knots[span+1]; writes ders[k][j] for
/// derivative order k of basis function N_{span-3+j}. Piegl & Tiller A2.3
/// specialized to degree 3.
inline void cubic_basis_derivs(const std::vector<double>& knots, int span, double x, int nders,
                               double ders[3][4]) {
  constexpr int p = 3;
  double ndu[p + 1][p + 1];
  double left[p + 1], right[p + 1];
  ndu[0][0] = 1.0;
  for (int j = 1; j <= p; ++j) {
    left[j] = x - knots[static_cast<std::size_t>(span + 1 - j)];
    right[j] = knots[static_cast<std::size_t>(span + j)] - x;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      ndu[j][r] = right[r + 1] + left[j - r];
      const double temp = ndu[r][j - 1] / ndu[j][r];
      ndu[r][j] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    ndu[j][j] = saved;
  }
  for (int j = 0; j <= p; ++j) ders[0][j] = ndu[j][p];
  if (nders == 0) return;
  double a[2][p + 1];
  for (int r = 0; r <= p; ++r) {
    int s1 = 0, s2 = 1;
    a[0][0] = 1.0;
    for (int k = 1; k <= nders && k <= p; ++k) {
      double d = 0.0;
      const int rk = r - k, pk = p - k;
      if (r >= k) {
        a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
        d = a[s2][0] * ndu[rk][pk];
      }
      const int j1 = rk >= -1 ? 1 : -rk;
      const int j2 = r - 1 <= pk ? k - 1 : p - r;
      for (int j = j1; j <= j2; ++j) {
        a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][rk + j];
        d += a[s2][j] * ndu[rk + j][pk];
      }
      if (r <= pk) {
        a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
        d += a[s2][k] * ndu[r][pk];
      }
      ders[k][r] = d;
      std::swap(s1, s2);
    }
  }
  double factor = p;
  for (int k = 1; k <= nders; ++k) {
    for (int j = 0; j <= p; ++j) ders[k][j] *= factor;
    factor *= (p - k);
  }
}

inline int find_span(const std::vector<double>& knots, int num_basis, double x) {
  // valid spans run from knot index 3 to num_basis - 1 (degree 3, clamped)
  const int lo = 3, hi = num_basis;
  if (x >= knots[static_cast<std::size_t>(hi)]) return hi - 1;
  if (x <= knots[static_cast<std::size_t>(lo)]) return lo;
  const auto it = std::upper_bound(knots.begin() + lo, knots.begin() + hi, x);
  return static_cast<int>(it - knots.begin()) - 1;
}

/// Clamped knot vector with interior knots at the interior sample sites.
inline std::vector<double> clamped_knots(const std::vector<double>& sites) {
  const std::size_t n = sites.size();
  std::vector<double> knots;
  knots.reserve(n + 6);
  for (int k = 0; k < 4; ++k) knots.push_back(sites.front());
  for (std::size_t i = 1; i + 1 < n; ++i) knots.push_back(sites[i]);
  for (int k = 0; k < 4; ++k) knots.push_back(sites.back());
  return knots;
}

/// Collocation matrix of the 1D interpolation problem: n rows of basis values
/// at the sites plus natural closure rows (vanishing second derivative at both
/// ends). Square of size n + 2.
inline Matrix collocation_1d(const std::vector<double>& sites, const std::vector<double>& knots) {
  const int n = static_cast<int>(sites.size());
  const int nb = n + 2;
  Matrix A = Matrix::Zero(nb, nb);
  double ders[3][4];
  auto fill_row = [&](int row, double x, int order) {
    const int span = find_span(knots, nb, x);
    cubic_basis_derivs(knots, span, x, order, ders);
    for (int j = 0; j <= 3; ++j) A(row, span - 3 + j) = ders[order][j];
  };
  fill_row(0, sites.front(), 2);
  for (int i = 0; i < n; ++i) fill_row(i + 1, sites[static_cast<std::size_t>(i)], 0);
  fill_row(nb - 1, sites.back(), 2);
  return A;
}

}  // namespace detail

/// Interpolating clamped cubic tensor-product spline over a rectangular
/// lattice. Knots sit at the sample coordinates; the two extra control points
/// per axis are fixed by natural end conditions.
class SplineSurface {
public:
  SplineSurface() = default;

  static constexpr int order = 3;  // polynomial degree

  /// Interpolate `values` given in row-major order over (sites1 x sites4).
  static SplineSurface fit(const std::vector<double>& sites1, const std::vector<double>& sites4,
                           const Vector& values) {
    const int n1 = static_cast<int>(sites1.size());
    const int n4 = static_cast<int>(sites4.size());
    if (n1 < 4 || n4 < 4) throw ContractError("SplineSurface: need at least 4 sites per axis");
    if (values.size() != static_cast<Eigen::Index>(n1) * n4)
      throw ContractError("SplineSurface: value count does not match the lattice");
    SplineSurface s;
    s.knots1_ = detail::clamped_knots(sites1);
    s.knots4_ = detail::clamped_knots(sites4);
    s.box_ = {sites1.front(), sites1.back(), sites4.front(), sites4.back()};

    // data extended with zero rows/columns for the natural closure equations
    Matrix Yext = Matrix::Zero(n1 + 2, n4 + 2);
    for (int i = 0; i < n1; ++i)
      for (int j = 0; j < n4; ++j) Yext(i + 1, j + 1) = values[i * n4 + j];

    const Matrix A1 = detail::collocation_1d(sites1, s.knots1_);
    const Matrix A4 = detail::collocation_1d(sites4, s.knots4_);
    Eigen::PartialPivLU<Matrix> lu1(A1), lu4(A4);
    // A1 C A4' = Yext  ->  C = A1^-1 Yext A4^-T
    Matrix tmp = lu1.solve(Yext);
    s.coefs_ = lu4.solve(tmp.transpose()).transpose();

    // backward-error check; the closure rows carry 1/h^2-scale entries, so
    // normalize by the operator and solution magnitudes, not the data alone
    const double resid = (A1 * s.coefs_ * A4.transpose() - Yext).norm();
    const double scale =
        A1.norm() * s.coefs_.norm() * A4.norm() + Yext.norm() + 1e-300;
    if (!(resid / scale < 1e-10))
      throw NumericalError("SplineSurface: collocation solve residual " +
                           std::to_string(resid / scale));
    return s;
  }

  /// Value or mixed partial derivative (orders up to 2 per axis).
  double eval(const InvariantPoint& p, int d1_order = 0, int d4_order = 0) const {
    if (d1_order < 0 || d1_order > 2 || d4_order < 0 || d4_order > 2)
      throw ContractError("SplineSurface: derivative order must be 0..2");
    if (!box_.contains(p, 1e-12))
      throw ExtrapolationError("SplineSurface: query outside the fitted box");
    const int nb1 = static_cast<int>(coefs_.rows());
    const int nb4 = static_cast<int>(coefs_.cols());
    const int s1 = detail::find_span(knots1_, nb1, p.I1);
    const int s4 = detail::find_span(knots4_, nb4, p.I4);
    double d1[3][4], d4[3][4];
    detail::cubic_basis_derivs(knots1_, s1, p.I1, d1_order, d1);
    detail::cubic_basis_derivs(knots4_, s4, p.I4, d4_order, d4);
    double out = 0.0;
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b)
        out += coefs_(s1 - 3 + a, s4 - 3 + b) * d1[d1_order][a] * d4[d4_order][b];
    return out;
  }

  const DomainBox& box() const { return box_; }
  const std::vector<double>& knots1() const { return knots1_; }
  const std::vector<double>& knots4() const { return knots4_; }
  const Matrix& coefficients() const { return coefs_; }

  static SplineSurface from_parts(std::vector<double> knots1, std::vector<double> knots4,
                                  Matrix coefs) {
    SplineSurface s;
    if (knots1.size() < 8 || knots4.size() < 8)
      throw ContractError("SplineSurface: knot vectors too short");
    if (static_cast<Eigen::Index>(knots1.size()) != coefs.rows() + 4 ||
        static_cast<Eigen::Index>(knots4.size()) != coefs.cols() + 4)
      throw ContractError("SplineSurface: knots and coefficients are inconsistent");
    s.knots1_ = std::move(knots1);
    s.knots4_ = std::move(knots4);
    s.coefs_ = std::move(coefs);
    s.box_ = {s.knots1_.front(), s.knots1_.back(), s.knots4_.front(), s.knots4_.back()};
    return s;
  }

private:
  std::vector<double> knots1_, knots4_;
  Matrix coefs_;  // (n1+2) x (n4+2)
  DomainBox box_;
};

}  // namespace gpsedf
