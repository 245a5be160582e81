#pragma once

#include <cmath>
#include <string>

#include "gpsedf/common.hpp"

namespace gpsedf {

/// Planar biaxial deformation state. The in-plane deformation gradient is
/// F = [[lambda_x, shear_k], [0, lambda_y]] and the thickness stretch is
/// 1/(lambda_x*lambda_y) so that det F = 1.
struct StretchState {
  double lambda_x = 1.0;
  double lambda_y = 1.0;
  double shear_k = 0.0;
};

/// First Piola-Kirchhoff stresses in kPa. Pxy is meaningful only for sheared
/// states.
struct StressPair {
  double Pxx = 0.0;
  double Pyy = 0.0;
  double Pxy = 0.0;
  bool has_shear = false;
};

/// Energy density and its partial derivatives with respect to (I1, I4),
/// all in kPa.
struct SEDFDerivatives {
  double W = 0.0;
  double W1 = 0.0;
  double W4 = 0.0;
  double W11 = 0.0;
  double W44 = 0.0;
  double W14 = 0.0;
};

enum class ModelKind { GOH, HGO, HGO2, Holzapfel, HY, LS, MN };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::GOH: return "GOH";
    case ModelKind::HGO: return "HGO";
    case ModelKind::HGO2: return "HGO2";
    case ModelKind::Holzapfel: return "Holzapfel";
    case ModelKind::HY: return "HY";
    case ModelKind::LS: return "LS";
    case ModelKind::MN: return "MN";
  }
  throw ContractError("unknown model kind");
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "GOH") return ModelKind::GOH;
  if (s == "HGO") return ModelKind::HGO;
  if (s == "HGO2") return ModelKind::HGO2;
  if (s == "Holzapfel") return ModelKind::Holzapfel;
  if (s == "HY") return ModelKind::HY;
  if (s == "LS") return ModelKind::LS;
  if (s == "MN") return ModelKind::MN;
  throw ContractError("unknown model kind: " + s);
}

/// One of the closed-form fiber-reinforced hyperelastic models. Stiffness
/// coefficients are in kPa where dimensional; kappa is the dispersion /
/// weighting parameter where the model has one.
struct AnalyticalModel {
  ModelKind kind = ModelKind::GOH;
  double mu = 0.0;
  double k1 = 0.0;
  double k2 = 0.0;
  double k3 = 0.0;
  double k4 = 0.0;
  double kappa = 0.0;

  static AnalyticalModel goh(double mu, double k1, double k2, double kappa) {
    AnalyticalModel m;
    m.kind = ModelKind::GOH;
    m.mu = mu;
    m.k1 = k1;
    m.k2 = k2;
    m.kappa = kappa;
    return m;
  }

  /// Ground truth used throughout the synthetic studies.
  static AnalyticalModel goh_reference() { return goh(5.0, 4.0, 10.0, 0.1); }
};

inline InvariantPoint invariants_from_stretches(const StretchState& s) {
  if (s.lambda_x <= 0.0 || s.lambda_y <= 0.0)
    throw DomainError("invariants_from_stretches: stretches must be positive");
  const double lx2 = s.lambda_x * s.lambda_x;
  const double ly2 = s.lambda_y * s.lambda_y;
  const double lz2 = 1.0 / (lx2 * ly2);
  return {lx2 + ly2 + lz2, lx2};
}

/// Invariants with an in-plane shear component; fiber along x so I4 stays
/// C11 = lambda_x^2.
inline InvariantPoint invariants_from_shear_state(const StretchState& s) {
  if (s.lambda_x <= 0.0 || s.lambda_y <= 0.0)
    throw DomainError("invariants_from_shear_state: stretches must be positive");
  const double lx2 = s.lambda_x * s.lambda_x;
  const double ly2 = s.lambda_y * s.lambda_y;
  const double lz2 = 1.0 / (lx2 * ly2);
  return {lx2 + s.shear_k * s.shear_k + ly2 + lz2, lx2};
}

namespace detail {

inline void require_positive_I4(const InvariantPoint& p) {
  if (p.I4 <= 0.0) throw ContractError("model requires I4 > 0");
}

}  // namespace detail

/// Energy density and all first/second partials of the chosen model. Closed
/// forms; the test suite checks them against central finite differences.
inline SEDFDerivatives analytic_derivs(const AnalyticalModel& m, const InvariantPoint& p) {
  SEDFDerivatives d;
  const double x = p.I1 - 3.0;  // shifted invariants
  const double y = p.I4 - 1.0;
  switch (m.kind) {
    case ModelKind::GOH: {
      const double E = m.kappa * p.I1 + (1.0 - 3.0 * m.kappa) * p.I4 - 1.0;
      const double c = 1.0 - 3.0 * m.kappa;
      const double ex = std::exp(m.k2 * E * E);
      d.W = 0.5 * m.mu * x + m.k1 / (2.0 * m.k2) * (ex - 1.0);
      d.W1 = 0.5 * m.mu + m.k1 * m.kappa * E * ex;
      d.W4 = m.k1 * c * E * ex;
      const double g = (1.0 + 2.0 * m.k2 * E * E) * ex;
      d.W11 = m.k1 * m.kappa * m.kappa * g;
      d.W44 = m.k1 * c * c * g;
      d.W14 = m.k1 * m.kappa * c * g;
      break;
    }
    case ModelKind::HGO: {
      const double ex = std::exp(m.k2 * y * y);
      d.W = 0.5 * m.mu * x + m.k1 / (2.0 * m.k2) * (ex - 1.0);
      d.W1 = 0.5 * m.mu;
      d.W4 = m.k1 * y * ex;
      d.W44 = m.k1 * (1.0 + 2.0 * m.k2 * y * y) * ex;
      break;
    }
    case ModelKind::HGO2: {
      const double e1 = std::exp(m.k2 * x);
      const double e4 = std::exp(m.k4 * y * y);
      d.W = m.k1 / m.k2 * (e1 - 1.0) + m.k3 / (2.0 * m.k4) * (e4 - 1.0);
      d.W1 = m.k1 * e1;
      d.W11 = m.k1 * m.k2 * e1;
      d.W4 = m.k3 * y * e4;
      d.W44 = m.k3 * (1.0 + 2.0 * m.k4 * y * y) * e4;
      break;
    }
    case ModelKind::Holzapfel: {
      const double Q = m.kappa * x * x + (1.0 - m.kappa) * y * y;
      const double ex = std::exp(m.k2 * Q);
      d.W = 0.5 * m.mu * x + m.k1 / (2.0 * m.k2) * (ex - 1.0);
      d.W1 = 0.5 * m.mu + m.k1 * m.kappa * x * ex;
      d.W4 = m.k1 * (1.0 - m.kappa) * y * ex;
      d.W11 = m.k1 * m.kappa * (1.0 + 2.0 * m.k2 * m.kappa * x * x) * ex;
      d.W44 = m.k1 * (1.0 - m.kappa) * (1.0 + 2.0 * m.k2 * (1.0 - m.kappa) * y * y) * ex;
      d.W14 = 2.0 * m.k1 * m.k2 * m.kappa * (1.0 - m.kappa) * x * y * ex;
      break;
    }
    case ModelKind::HY: {
      detail::require_positive_I4(p);
      const double s = std::sqrt(p.I4);
      const double e1 = std::exp(m.k2 * x);
      const double e4 = std::exp(m.k4 * (s - 1.0) * (s - 1.0));
      d.W = m.k1 / m.k2 * (e1 - 1.0) + m.k3 / m.k4 * (e4 - 1.0);
      d.W1 = m.k1 * e1;
      d.W11 = m.k1 * m.k2 * e1;
      // dI4 of (sqrt(I4)-1)^2 is (s-1)/s
      d.W4 = m.k3 * e4 * (s - 1.0) / s;
      d.W44 = m.k3 * e4 * (m.k4 * (s - 1.0) * (s - 1.0) / (s * s) + 0.5 / (s * s * s));
      break;
    }
    case ModelKind::LS: {
      const double e1 = std::exp(m.k2 * x * x);
      const double e4 = std::exp(m.k3 * y * y);
      d.W = 0.5 * m.mu * x + 0.5 * m.k1 * (m.kappa * e1 + (1.0 - m.kappa) * e4 - 1.0);
      d.W1 = 0.5 * m.mu + m.k1 * m.kappa * m.k2 * x * e1;
      d.W11 = m.k1 * m.kappa * m.k2 * (1.0 + 2.0 * m.k2 * x * x) * e1;
      d.W4 = m.k1 * (1.0 - m.kappa) * m.k3 * y * e4;
      d.W44 = m.k1 * (1.0 - m.kappa) * m.k3 * (1.0 + 2.0 * m.k3 * y * y) * e4;
      break;
    }
    case ModelKind::MN: {
      detail::require_positive_I4(p);
      const double s = std::sqrt(p.I4);
      const double sm = s - 1.0;
      const double Q = m.k2 * x * x + m.k3 * sm * sm * sm * sm;
      const double eq = std::exp(Q);
      d.W = 0.5 * m.mu * x + m.k1 * (eq - 1.0);
      const double Q1 = 2.0 * m.k2 * x;
      const double Q4 = 2.0 * m.k3 * sm * sm * sm / s;
      d.W1 = 0.5 * m.mu + m.k1 * eq * Q1;
      d.W4 = m.k1 * eq * Q4;
      d.W11 = m.k1 * eq * (Q1 * Q1 + 2.0 * m.k2);
      d.W44 = m.k1 * eq * (Q4 * Q4 + m.k3 * sm * sm * (2.0 * s + 1.0) / (s * s * s));
      d.W14 = m.k1 * eq * Q1 * Q4;
      break;
    }
  }
  return d;
}

inline double analytic_energy(const AnalyticalModel& m, const InvariantPoint& p) {
  return analytic_derivs(m, p).W;
}

/// Biaxial (shear-free) stresses from the energy derivatives. The hydrostatic
/// pressure is eliminated through the plane-stress condition Pzz = 0.
inline StressPair stresses_from_derivs(const StretchState& s, const SEDFDerivatives& d) {
  if (s.lambda_x <= 0.0 || s.lambda_y <= 0.0)
    throw DomainError("stresses_from_derivs: stretches must be positive");
  const double lx = s.lambda_x, ly = s.lambda_y;
  StressPair P;
  P.Pxx = 2.0 * d.W1 * (lx - 1.0 / (lx * lx * lx * ly * ly)) + 2.0 * d.W4 * lx;
  P.Pyy = 2.0 * d.W1 * (ly - 1.0 / (lx * lx * ly * ly * ly));
  return P;
}

/// In-plane first-PK tensor for a general in-plane F with fiber M = [1,0].
/// The pressure follows from the vanishing out-of-plane stress:
/// p = 2 W1 / det(F)^2.
inline Mat2 pk1_full(const Mat2& F, const SEDFDerivatives& d) {
  const double det = F.determinant();
  if (!(det > 0.0)) throw DomainError("pk1_full: in-plane deformation gradient must have det > 0");
  const Mat2 FinvT = F.inverse().transpose();
  const double p = 2.0 * d.W1 / (det * det);
  Mat2 P = 2.0 * d.W1 * F - p * FinvT;
  // fiber term: 2 W4 (F M) outer M with M = e_x
  P.col(0) += 2.0 * d.W4 * F.col(0);
  return P;
}

}  // namespace gpsedf
