#pragma once

#include <cmath>
#include <numbers>

#include "gpsedf/posterior.hpp"

namespace gpsedf {

/// Closed-form GP posterior for the constraint-free observation model.
/// Serves as the verification oracle for the variational solver.
class ExactGP : public SEDFPosterior {
public:
  ExactGP(ObservationModel model, Hyperparams h, DomainBox box)
      : model_(std::move(model)), h_(h), box_(box), kernel_(h) {
    const Matrix K = functional_cov_matrix(kernel_, model_.functionals);
    Matrix Ky = K;
    Ky.diagonal() += model_.noise_diag(h_);
    fact_ = factorize(Ky);
    Vector m(model_.size());
    for (Eigen::Index i = 0; i < model_.size(); ++i)
      m[i] = functional_prior_mean(model_.functionals[static_cast<std::size_t>(i)], h_);
    alpha_ = fact_.solve(Vector(model_.targets - m));
    centered_ = model_.targets - m;
  }

  static ExactGP from_observations(const ObservationSet& obs, const Hyperparams& h,
                                   double padding = 0.1) {
    if (obs.empty()) throw ContractError("ExactGP: empty observation set");
    return ExactGP(build_observation_model(obs), h, obs.invariant_hull_box().padded(padding));
  }

  JointPosterior predict_functionals(const std::vector<LinearFunctional>& queries,
                                     bool full_cov) const override {
    if (queries.empty()) throw ContractError("predict: empty query list");
    const Matrix Kq = functional_cross_cov(kernel_, queries, model_.functionals);
    JointPosterior post;
    post.mean.resize(Kq.rows());
    for (Eigen::Index i = 0; i < Kq.rows(); ++i)
      post.mean[i] = functional_prior_mean(queries[static_cast<std::size_t>(i)], h_);
    post.mean += Kq * alpha_;
    const Matrix V = fact_.solve(Matrix(Kq.transpose()));
    if (full_cov) {
      post.cov = functional_cov_matrix(kernel_, queries) - Kq * V;
      post.var = post.cov.diagonal();
      post.has_full_cov = true;
    } else {
      post.var.resize(Kq.rows());
      for (Eigen::Index i = 0; i < Kq.rows(); ++i)
        post.var[i] = functional_cov(kernel_, queries[static_cast<std::size_t>(i)],
                                     queries[static_cast<std::size_t>(i)]) -
                      Kq.row(i).dot(V.col(i));
    }
    return post;
  }

  const Hyperparams& hyperparams() const override { return h_; }
  DomainBox domain_box() const override { return box_; }
  const ObservationModel& observation_model() const { return model_; }

private:
  static JitteredLLT factorize(const Matrix& Ky) {
    // noise on the diagonal usually suffices; fall back to the jitter ladder
    JitteredLLT f;
    f.llt.compute(Ky);
    if (f.llt.info() == Eigen::Success) return f;
    const double scale = Ky.diagonal().maxCoeff();
    return chol_with_jitter(Ky, scale);
  }

  ObservationModel model_;
  Hyperparams h_;
  DomainBox box_;
  SEKernel kernel_;
  JitteredLLT fact_;
  Vector alpha_;
  Vector centered_;

  friend double log_marginal_likelihood(const ExactGP&);
  friend Vector log_marginal_likelihood_grad(const ExactGP&);
};

/// Gaussian log-evidence of the mapped observation model.
inline double log_marginal_likelihood(const ExactGP& gp) {
  const Eigen::Index n = gp.model_.size();
  return -0.5 * gp.centered_.dot(gp.alpha_) - 0.5 * gp.fact_.log_det() -
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

inline double log_marginal_likelihood(const ObservationSet& obs, const Hyperparams& h) {
  return log_marginal_likelihood(ExactGP::from_observations(obs, h));
}

/// Gradient of the log evidence with respect to (alpha, beta, log sigma_f).
/// The sigma_f direction uses dK/dlog(sigma_f) = 2 (Ky - Lambda).
inline Vector log_marginal_likelihood_grad(const ExactGP& gp) {
  const Eigen::Index n = gp.model_.size();
  const Vector lam = gp.model_.noise_diag(gp.h_);
  Matrix Kinv = gp.fact_.solve(Matrix(Matrix::Identity(n, n)));
  // d m / d alpha and d m / d beta per functional
  Vector ma(n), mb(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double da = 0.0, db = 0.0;
    for (const auto& t : gp.model_.functionals[static_cast<std::size_t>(i)]) {
      if (t.tag == DerivTag::val) {
        da += t.coeff * (t.point.I1 - 3.0);
        db += t.coeff * (t.point.I4 - 1.0);
      } else if (t.tag == DerivTag::d1) {
        da += t.coeff;
      } else if (t.tag == DerivTag::d4) {
        db += t.coeff;
      }
    }
    ma[i] = da;
    mb[i] = db;
  }
  Vector g(3);
  g[0] = ma.dot(gp.alpha_);
  g[1] = mb.dot(gp.alpha_);
  // 0.5 tr(Kinv dK) with dK = 2(Ky - Lambda) equals n - sum_i Kinv_ii Lambda_ii;
  // 0.5 a' dK a equals a'z - a'Lambda a since Ky a = z
  double half_tr = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) half_tr += 1.0 - Kinv(i, i) * lam[i];
  g[2] = gp.alpha_.dot(gp.centered_) - gp.alpha_.cwiseProduct(lam).dot(gp.alpha_) - half_tr;
  return g;
}

}  // namespace gpsedf
