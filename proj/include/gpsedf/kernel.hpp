#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "gpsedf/common.hpp"

namespace gpsedf {

/// Which channel of the joint process [W, W1, W4, W11, W44] a row refers to.
enum class DerivTag : int { val = 0, d1 = 1, d4 = 2, d11 = 3, d44 = 4 };

constexpr std::array<DerivTag, 5> kAllTags = {DerivTag::val, DerivTag::d1, DerivTag::d4,
                                              DerivTag::d11, DerivTag::d44};

/// Derivative multi-index (order in I1, order in I4) of a tag.
constexpr std::pair<int, int> tag_orders(DerivTag t) {
  switch (t) {
    case DerivTag::val: return {0, 0};
    case DerivTag::d1: return {1, 0};
    case DerivTag::d4: return {0, 1};
    case DerivTag::d11: return {2, 0};
    case DerivTag::d44: return {0, 2};
  }
  return {0, 0};
}

struct Hyperparams {
  double alpha = 1.0;        // prior mean slope in I1 (kPa)
  double beta = 1.0;         // prior mean slope in I4 (kPa)
  double sigma_f = 1.0;      // signal scale (kPa)
  double lengthscale = 1.0;  // shared isotropic lengthscale
  double ex2 = 0.05;         // x-stress noise variance (kPa^2)
  double ey2 = 0.05;         // y-stress noise variance (kPa^2)

  static constexpr double e02 = 1e-5;       // reference-point variance, fixed
  static constexpr double nu_probit = 1e4;  // probit sharpness, fixed
};

/// Linear prior mean of the joint process: a linear hyperelastic model in the
/// val channel, constant slopes in the first-derivative channels, zero in the
/// second-derivative channels.
inline double prior_mean(const InvariantPoint& p, DerivTag tag, const Hyperparams& h) {
  switch (tag) {
    case DerivTag::val: return h.alpha * (p.I1 - 3.0) + h.beta * (p.I4 - 1.0);
    case DerivTag::d1: return h.alpha;
    case DerivTag::d4: return h.beta;
    default: return 0.0;
  }
}

namespace detail {

// Probabilists' Hermite polynomials He_0..He_5.
inline void hermite_table(double t, double* he) {
  const double t2 = t * t;
  he[0] = 1.0;
  he[1] = t;
  he[2] = t2 - 1.0;
  he[3] = t * (t2 - 3.0);
  he[4] = t2 * (t2 - 6.0) + 3.0;
  he[5] = t * (t2 * (t2 - 10.0) + 15.0);
}

}  // namespace detail

/// Partial derivatives of one covariance entry with respect to the first
/// argument's coordinates and the log-hyperparameters.
struct KernelBlockGrad {
  double value = 0.0;
  double d_p1 = 0.0;      // d/d p.I1 (negate for the second argument)
  double d_p4 = 0.0;      // d/d p.I4
  double d_log_len = 0.0;
  double d_log_sf = 0.0;  // always 2*value
};

/// Squared-exponential kernel of the joint derivative process.
///
/// Cov(d^a W(p), d^b W(q)) = (-1)^|b| D^{a+b} k(p - q) with
/// k(delta) = sigma_f^2 exp(-|delta|^2 / (2 l^2)). The 1D factors follow the
/// Hermite pattern d^n/dx^n exp(-x^2/2l^2) = (-1/l)^n He_n(x/l) exp(-x^2/2l^2).
class SEKernel {
public:
  SEKernel(double sigma_f, double lengthscale) : sf2_(sigma_f * sigma_f), len_(lengthscale) {
    if (!(sigma_f > 0.0) || !(lengthscale > 0.0))
      throw ContractError("SEKernel: sigma_f and lengthscale must be positive");
  }
  explicit SEKernel(const Hyperparams& h) : SEKernel(h.sigma_f, h.lengthscale) {}

  double sf2() const { return sf2_; }

  double operator()(const InvariantPoint& p, const InvariantPoint& q, DerivTag a,
                    DerivTag b) const {
    const auto [a1, a4] = tag_orders(a);
    const auto [b1, b4] = tag_orders(b);
    Pair pr = prepare(p.I1 - q.I1, p.I4 - q.I4);
    return sign(b1 + b4) * dvalue(pr, a1 + b1, a4 + b4);
  }

  KernelBlockGrad with_partials(const InvariantPoint& p, const InvariantPoint& q, DerivTag a,
                                DerivTag b) const {
    const auto [a1, a4] = tag_orders(a);
    const auto [b1, b4] = tag_orders(b);
    Pair pr = prepare(p.I1 - q.I1, p.I4 - q.I4);
    const int n1 = a1 + b1, n4 = a4 + b4;
    const double s = sign(b1 + b4);
    KernelBlockGrad g;
    g.value = s * dvalue(pr, n1, n4);
    g.d_p1 = s * dvalue(pr, n1 + 1, n4);
    g.d_p4 = s * dvalue(pr, n1, n4 + 1);
    g.d_log_sf = 2.0 * g.value;
    // d/d log(l) of D(n1,n4) = D*(t1^2+t4^2-n) + sf2*E/l *
    //   (n1 t1 g1[n1-1] g4[n4] + n4 t4 g4[n4-1] g1[n1])
    double corr = 0.0;
    if (n1 > 0) corr += n1 * pr.t1 * pr.g1[n1 - 1] * pr.g4[n4];
    if (n4 > 0) corr += n4 * pr.t4 * pr.g4[n4 - 1] * pr.g1[n1];
    const double D = dvalue(pr, n1, n4);
    g.d_log_len = s * (D * (pr.t1 * pr.t1 + pr.t4 * pr.t4 - n1 - n4) + sf2_ * pr.E / len_ * corr);
    return g;
  }

  /// Shared per-point-pair tables so a 5x5 tag block costs one exp.
  struct Pair {
    double t1, t4, E;
    double g1[6], g4[6];  // (-1/l)^k He_k(t)
  };

  Pair prepare(double d1, double d4) const {
    Pair pr;
    pr.t1 = d1 / len_;
    pr.t4 = d4 / len_;
    pr.E = std::exp(-0.5 * (pr.t1 * pr.t1 + pr.t4 * pr.t4));
    double he1[6], he4[6];
    detail::hermite_table(pr.t1, he1);
    detail::hermite_table(pr.t4, he4);
    double f = 1.0;
    for (int k = 0; k <= 5; ++k) {
      pr.g1[k] = f * he1[k];
      pr.g4[k] = f * he4[k];
      f *= -1.0 / len_;
    }
    return pr;
  }

  double dvalue(const Pair& pr, int n1, int n4) const { return sf2_ * pr.g1[n1] * pr.g4[n4] * pr.E; }

  static double sign(int order) { return (order % 2 == 0) ? 1.0 : -1.0; }

private:
  double sf2_;
  double len_;
};

inline double kernel_block(const InvariantPoint& p, const InvariantPoint& q, DerivTag a,
                           DerivTag b, const Hyperparams& h) {
  return SEKernel(h)(p, q, a, b);
}

/// One (location, channel) pair with a weight; observations are sums of these.
struct FunctionalTerm {
  InvariantPoint point;
  DerivTag tag = DerivTag::val;
  double coeff = 1.0;
};

/// A scalar linear functional of the joint process, e.g. a stress component
/// 2(lx - lx^-3 ly^-2) W1 + 2 lx W4 at one observation point.
using LinearFunctional = std::vector<FunctionalTerm>;

inline double functional_cov(const SEKernel& k, const LinearFunctional& a,
                             const LinearFunctional& b) {
  double s = 0.0;
  for (const auto& ta : a)
    for (const auto& tb : b) s += ta.coeff * tb.coeff * k(ta.point, tb.point, ta.tag, tb.tag);
  return s;
}

inline double functional_prior_mean(const LinearFunctional& f, const Hyperparams& h) {
  double s = 0.0;
  for (const auto& t : f) s += t.coeff * prior_mean(t.point, t.tag, h);
  return s;
}

inline Matrix functional_cov_matrix(const SEKernel& k, const std::vector<LinearFunctional>& fs) {
  const Eigen::Index n = static_cast<Eigen::Index>(fs.size());
  Matrix K(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j) {
      K(i, j) = functional_cov(k, fs[i], fs[j]);
      K(j, i) = K(i, j);
    }
  return K;
}

inline Matrix functional_cross_cov(const SEKernel& k, const std::vector<LinearFunctional>& rows,
                                   const std::vector<LinearFunctional>& cols) {
  Matrix K(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (Eigen::Index i = 0; i < K.rows(); ++i)
    for (Eigen::Index j = 0; j < K.cols(); ++j) K(i, j) = functional_cov(k, rows[i], cols[j]);
  return K;
}

/// Joint covariance of (point, tag) rows plus jitter on the diagonal.
inline Matrix assemble_joint_cov(const std::vector<std::pair<InvariantPoint, DerivTag>>& rows,
                                 const Hyperparams& h, double jitter) {
  if (rows.empty()) throw ContractError("assemble_joint_cov: empty row list");
  SEKernel k(h);
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  Matrix K(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j) {
      K(i, j) = k(rows[i].first, rows[j].first, rows[i].second, rows[j].second);
      K(j, i) = K(i, j);
    }
  K.diagonal().array() += jitter;
  return K;
}

/// Cholesky with the escalating jitter policy: start at 1e-8 sigma_f^2 and
/// grow by decades up to 1e-4 sigma_f^2. Fourth-order derivative blocks make
/// these matrices ill-conditioned, so failures at low jitter are routine.
struct JitteredLLT {
  Eigen::LLT<Matrix> llt;
  double jitter = 0.0;

  Vector solve(const Vector& b) const { return llt.solve(b); }
  Matrix solve(const Matrix& B) const { return llt.solve(B); }
  double log_det() const {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  }
};

inline JitteredLLT chol_with_jitter(const Matrix& K, double sf2, double start_rel = 1e-8,
                                    double max_rel = 1e-4) {
  JitteredLLT out;
  for (double rel = start_rel; rel <= max_rel * (1.0 + 1e-12); rel *= 10.0) {
    Matrix Kj = K;
    Kj.diagonal().array() += rel * sf2;
    out.llt.compute(Kj);
    if (out.llt.info() == Eigen::Success) {
      out.jitter = rel * sf2;
      return out;
    }
  }
  throw NumericalError("Cholesky failed after jitter escalation to " + std::to_string(max_rel) +
                       " * sigma_f^2");
}

}  // namespace gpsedf
