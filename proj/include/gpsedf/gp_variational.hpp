#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "gpsedf/gp_exact.hpp"
#include "gpsedf/posterior.hpp"

namespace gpsedf {

// ---------------------------------------------------------------------------
// Stable normal log-CDF and Mills ratio
// ---------------------------------------------------------------------------

/// log Phi(x), accurate far into the left tail. Below -25 an asymptotic
/// expansion replaces erfc, so nothing saturates to -inf until the true value
/// underflows.
inline double log_ndtr(double x) {
  if (x > -25.0) return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
  const double ix2 = 1.0 / (x * x);
  const double series = 1.0 + ix2 * (-1.0 + ix2 * (3.0 + ix2 * -15.0));
  return -0.5 * x * x - std::log(-x) - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(series);
}

/// phi(x) / Phi(x), the derivative of log Phi. In the tail branch it is the
/// exact derivative of the series used by log_ndtr; the exp form would cancel
/// catastrophically there (x^2/2 overwhelms the difference).
inline double mills_ratio(double x) {
  if (x > -25.0) {
    const double log_phi = -0.5 * x * x - 0.5 * std::log(2.0 * std::numbers::pi);
    return std::exp(log_phi - log_ndtr(x));
  }
  const double ix = 1.0 / x;
  const double ix2 = ix * ix;
  const double series = 1.0 + ix2 * (-1.0 + ix2 * (3.0 + ix2 * -15.0));
  const double dseries = ix * ix2 * (2.0 + ix2 * (-12.0 + ix2 * 90.0));
  return -x - ix + dseries / series;
}

/// Log-likelihood of the convexity constraint pair at one location.
inline double probit_constraint_loglik(double w11, double w44,
                                       double nu = Hyperparams::nu_probit) {
  return log_ndtr(nu * w11) + log_ndtr(nu * w44);
}

// ---------------------------------------------------------------------------
// Variational family
// ---------------------------------------------------------------------------

/// Inducing variables: the five-channel stack [W, W1, W4, W11, W44] at each of
/// M locations, with a free Gaussian over them.
struct InducingSet {
  std::vector<InvariantPoint> Z;
  Vector m_v;   // length 5M
  Matrix S_v;   // 5M x 5M, PSD

  int num_points() const { return static_cast<int>(Z.size()); }
  Eigen::Index dim() const { return static_cast<Eigen::Index>(5 * Z.size()); }
};

inline std::vector<std::pair<InvariantPoint, DerivTag>> inducing_basis(
    const std::vector<InvariantPoint>& Z) {
  std::vector<std::pair<InvariantPoint, DerivTag>> basis;
  basis.reserve(5 * Z.size());
  for (const auto& z : Z)
    for (DerivTag t : kAllTags) basis.emplace_back(z, t);
  return basis;
}

struct TrainConfig {
  int warmup_iters = 1000;
  double warmup_lr = 0.05;
  std::vector<double> gamma_ladder = {1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6};
  int iters_per_gamma = 500;
  double constrained_lr = 0.01;
  int mc_samples = 8;
  std::uint64_t seed = 0;
  int minibatch = 0;  // records per step; 0 = full batch
  int num_inducing = 64;
  bool use_constraints = true;
};

struct TrainTrace {
  std::vector<double> loss;            // negative ELBO per iteration
  std::vector<double> gamma;           // gamma active at that iteration
  Hyperparams final_hyperparams;
  int stage1_iters = 0;
  int total_iters = 0;
};

struct TrainingData {
  ObservationSet obs;
  ReferencePoint ref;
  ConstraintGrid grid;
};

// ---------------------------------------------------------------------------
// ELBO with hand-derived reverse-mode gradients
// ---------------------------------------------------------------------------

namespace detail {

constexpr double kVarFloor = 1e-14;

/// Parameter layout: [alpha, beta, log sf, log len, log ex2, log ey2,
/// Z (2M), whitened mean (5M), packed lower whitened factor with log
/// diagonal]. The variational density is q(u) = N(mu_u + C m_w, C S_w C')
/// with C the Cholesky factor of the jittered K_uu, so the KL term is
/// kernel-free and the optimization is well scaled at the paper's learning
/// rates.
class ElboProblem {
public:
  ElboProblem(const ObservationModel& model, std::vector<InvariantPoint> constraint_pts, int M)
      : M_(M), D_(5 * static_cast<Eigen::Index>(M)), con_pts_(std::move(constraint_pts)) {
    n_gauss_ = model.size();
    targets_ = model.targets;
    noise_kind_ = model.noise_kind;
    gauss_funcs_ = model.functionals;
    n_con_ = 2 * static_cast<Eigen::Index>(con_pts_.size());
  }

  Eigen::Index num_params() const { return 6 + 2 * M_ + D_ + D_ * (D_ + 1) / 2; }
  Eigen::Index dim() const { return D_; }
  Eigen::Index num_constraint_rows() const { return n_con_; }
  Eigen::Index num_gauss_rows() const { return n_gauss_; }

  Vector pack(const Hyperparams& h, const std::vector<InvariantPoint>& Z, const Vector& m_v,
              const Matrix& L_v) const {
    Vector p(num_params());
    p[0] = h.alpha;
    p[1] = h.beta;
    p[2] = std::log(h.sigma_f);
    p[3] = std::log(h.lengthscale);
    p[4] = std::log(h.ex2);
    p[5] = std::log(h.ey2);
    for (int i = 0; i < M_; ++i) {
      p[6 + 2 * i] = Z[static_cast<std::size_t>(i)].I1;
      p[6 + 2 * i + 1] = Z[static_cast<std::size_t>(i)].I4;
    }
    p.segment(6 + 2 * M_, D_) = m_v;
    Eigen::Index k = 6 + 2 * M_ + D_;
    for (Eigen::Index i = 0; i < D_; ++i)
      for (Eigen::Index j = 0; j <= i; ++j)
        p[k++] = (i == j) ? std::log(L_v(i, i)) : L_v(i, j);
    return p;
  }

  void unpack(const Vector& p, Hyperparams& h, std::vector<InvariantPoint>& Z, Vector& m_v,
              Matrix& L_v) const {
    h.alpha = p[0];
    h.beta = p[1];
    h.sigma_f = std::exp(p[2]);
    h.lengthscale = std::exp(p[3]);
    h.ex2 = std::exp(p[4]);
    h.ey2 = std::exp(p[5]);
    Z.resize(static_cast<std::size_t>(M_));
    for (int i = 0; i < M_; ++i)
      Z[static_cast<std::size_t>(i)] = {p[6 + 2 * i], p[6 + 2 * i + 1]};
    m_v = p.segment(6 + 2 * M_, D_);
    L_v = Matrix::Zero(D_, D_);
    Eigen::Index k = 6 + 2 * M_ + D_;
    for (Eigen::Index i = 0; i < D_; ++i)
      for (Eigen::Index j = 0; j <= i; ++j) {
        L_v(i, j) = (i == j) ? std::exp(p[k]) : p[k];
        ++k;
      }
  }

  /// ELBO value and, optionally, its gradient. `zdraws` must be
  /// (mc_samples x constraint rows) when gamma > 0. `lik_scale` rescales the
  /// stress rows for minibatching (1 = full batch); `active` lists the gauss
  /// rows to include (empty = all).
  double value_and_grad(const Vector& params, double gamma, const Matrix& zdraws, Vector* grad,
                        double lik_scale = 1.0, const std::vector<int>& active = {}) const {
    Hyperparams h;
    std::vector<InvariantPoint> Z;
    Vector m_v;
    Matrix L_v;
    unpack(params, h, Z, m_v, L_v);
    const SEKernel kern(h.sigma_f, h.lengthscale);
    const double sf2 = h.sigma_f * h.sigma_f;

    // --- K_uu with escalating jitter ---
    Matrix Kuu(D_, D_);
    for (int ip = 0; ip < M_; ++ip)
      for (int jp = ip; jp < M_; ++jp) {
        const auto& zi = Z[static_cast<std::size_t>(ip)];
        const auto& zj = Z[static_cast<std::size_t>(jp)];
        const SEKernel::Pair pr = kern.prepare(zi.I1 - zj.I1, zi.I4 - zj.I4);
        for (int a = 0; a < 5; ++a) {
          const auto [a1, a4] = tag_orders(static_cast<DerivTag>(a));
          for (int b = 0; b < 5; ++b) {
            const auto [b1, b4] = tag_orders(static_cast<DerivTag>(b));
            const double v = SEKernel::sign(b1 + b4) * kern.dvalue(pr, a1 + b1, a4 + b4);
            Kuu(5 * ip + a, 5 * jp + b) = v;
            Kuu(5 * jp + b, 5 * ip + a) = v;
          }
        }
      }
    Eigen::LLT<Matrix> llt;
    double jitter = 0.0;
    for (double rel = 1e-8; rel <= 1e-4 * (1.0 + 1e-12); rel *= 10.0) {
      Matrix Kj = Kuu;
      Kj.diagonal().array() += rel * sf2;
      llt.compute(Kj);
      if (llt.info() == Eigen::Success) {
        jitter = rel * sf2;
        break;
      }
    }
    if (llt.info() != Eigen::Success)
      throw NumericalError("elbo: inducing covariance not factorizable after jitter escalation");
    Kuu.diagonal().array() += jitter;  // keep the jittered matrix for the sigma_f chain

    // --- whitened variational parameters ---
    const Vector& m_w = m_v;   // packed storage reused: whitened mean
    const Matrix& L_w = L_v;   // whitened factor
    const auto C = llt.matrixL();

    // --- active likelihood rows ---
    std::vector<int> act;
    if (active.empty()) {
      act.resize(static_cast<std::size_t>(n_gauss_));
      for (Eigen::Index i = 0; i < n_gauss_; ++i) act[static_cast<std::size_t>(i)] = static_cast<int>(i);
    } else {
      act = active;
    }
    const bool with_con = gamma > 0.0 && n_con_ > 0;
    const Eigen::Index n_act = static_cast<Eigen::Index>(act.size());
    const Eigen::Index n_rows = n_act + (with_con ? n_con_ : 0);

    // --- cross covariance of active rows with u, prior means, K_ii ---
    Matrix Kf = Matrix::Zero(n_rows, D_);
    Vector mu_f(n_rows), K_ii(n_rows);
    for (Eigen::Index i = 0; i < n_act; ++i) {
      const auto& fn = gauss_funcs_[static_cast<std::size_t>(act[static_cast<std::size_t>(i)])];
      mu_f[i] = functional_prior_mean(fn, h);
      K_ii[i] = functional_cov(kern, fn, fn);
      for (const auto& t : fn) fill_cross_row(kern, Kf, i, t.point, static_cast<int>(t.tag), t.coeff, Z);
    }
    if (with_con) {
      for (std::size_t c = 0; c < con_pts_.size(); ++c) {
        for (int half = 0; half < 2; ++half) {
          const Eigen::Index i = n_act + 2 * static_cast<Eigen::Index>(c) + half;
          const DerivTag tag = half == 0 ? DerivTag::d11 : DerivTag::d44;
          mu_f[i] = 0.0;
          K_ii[i] = kern(con_pts_[c], con_pts_[c], tag, tag);
          fill_cross_row(kern, Kf, i, con_pts_[c], static_cast<int>(tag), 1.0, Z);
        }
      }
    }

    // --- marginals of q: t_i = C^-1 k_i, u_i = L_w' t_i ---
    const Matrix T = C.solve(Matrix(Kf.transpose()));                    // D x n
    const Matrix U = L_w.transpose().triangularView<Eigen::Upper>() * T;  // D x n
    Vector mu_q = mu_f + T.transpose() * m_w;
    Vector v_q(n_rows);
    for (Eigen::Index i = 0; i < n_rows; ++i)
      v_q[i] = K_ii[i] - T.col(i).squaredNorm() + U.col(i).squaredNorm();

    // --- likelihood expectations ---
    double elbo = 0.0;
    Vector g_mu = Vector::Zero(n_rows), g_v = Vector::Zero(n_rows);
    double g_lex = 0.0, g_ley = 0.0;
    for (Eigen::Index i = 0; i < n_act; ++i) {
      const int gi = act[static_cast<std::size_t>(i)];
      const int kind = noise_kind_[static_cast<std::size_t>(gi)];
      const double e2 = kind == 0 ? h.ex2 : kind == 1 ? h.ey2 : Hyperparams::e02;
      const double w = kind == 2 ? 1.0 : lik_scale;
      const double resid = targets_[gi] - mu_q[i];
      elbo += w * (-0.5 * std::log(2.0 * std::numbers::pi * e2) -
                   (resid * resid + v_q[i]) / (2.0 * e2));
      g_mu[i] = w * resid / e2;
      g_v[i] = -w * 0.5 / e2;
      const double de2 = w * (-0.5 + (resid * resid + v_q[i]) / (2.0 * e2));
      if (kind == 0) g_lex += de2;
      if (kind == 1) g_ley += de2;
    }
    if (with_con) {
      const double nu = Hyperparams::nu_probit;
      const int S = static_cast<int>(zdraws.rows());
      if (zdraws.cols() != n_con_)
        throw ContractError("elbo: zdraws shape mismatch");
      const double wmc = gamma / S;
      for (Eigen::Index c = 0; c < n_con_; ++c) {
        const Eigen::Index i = n_act + c;
        const bool floored = v_q[i] < kVarFloor;
        const double sig = std::sqrt(std::max(v_q[i], kVarFloor));
        double gm = 0.0, gs = 0.0;
        for (int s = 0; s < S; ++s) {
          const double x = nu * (mu_q[i] + sig * zdraws(s, c));
          elbo += wmc * log_ndtr(x);
          const double ratio = mills_ratio(x);
          gm += wmc * nu * ratio;
          gs += wmc * nu * zdraws(s, c) * ratio;
        }
        g_mu[i] = gm;
        g_v[i] = floored ? 0.0 : gs / (2.0 * sig);
      }
    }

    // --- KL(q(u) || p(u)) in whitened coordinates ---
    const double kl = 0.5 * (m_w.squaredNorm() + L_w.squaredNorm() -
                             static_cast<double>(D_)) -
                      L_w.diagonal().array().log().sum();
    elbo -= kl;

    if (!grad) return elbo;

    // ----- reverse pass -----
    Vector& g = *grad;
    g.setZero(num_params());

    // whitened mean
    g.segment(6 + 2 * M_, D_) = T * g_mu - m_w;

    // whitened factor: lik path 2 t_i u_i' per row, KL path -L_w + 1/diag
    Matrix Lbar = 2.0 * (T * g_v.asDiagonal() * U.transpose()) - L_w;
    {
      Eigen::Index k = 6 + 2 * M_ + D_;
      for (Eigen::Index i = 0; i < D_; ++i)
        for (Eigen::Index j = 0; j <= i; ++j) {
          g[k++] = (i == j) ? Lbar(i, i) * L_w(i, i) + 1.0 : Lbar(i, j);
        }
    }

    // adjoints of t_i: gmu_i m_w - 2 gv_i (t_i - L_w u_i)
    const Matrix Tbar =
        m_w * g_mu.transpose() -
        2.0 * (T - L_w.triangularView<Eigen::Lower>() * U) * g_v.asDiagonal();

    // Kf adjoint through t = C^-1 k
    const Matrix Kf_bar = C.transpose().solve(Tbar).transpose();

    // Cholesky-factor adjoint through the same solves, then back to K_uu
    const Matrix Cbar = -C.transpose().solve(Tbar) * T.transpose();
    Matrix Kbar;
    {
      // reverse-mode Cholesky: Kbar = C^-T sym(Phi(C' Cbar)) C^-1 with Phi
      // keeping the lower triangle and halving the diagonal
      Matrix P = Matrix(C.transpose()) * Cbar;
      P = Matrix(P.triangularView<Eigen::Lower>());
      P.diagonal() *= 0.5;
      const Matrix sym = 0.5 * (P + P.transpose());
      const Matrix X = C.transpose().solve(sym);                      // C^-T sym
      Kbar = C.transpose().solve(Matrix(X.transpose())).transpose();  // X C^-1
    }

    // prior-mean path of the likelihood rows (data locations are fixed)
    for (Eigen::Index i = 0; i < n_act; ++i) {
      for (const auto& t : gauss_funcs_[static_cast<std::size_t>(act[static_cast<std::size_t>(i)])]) {
        if (t.tag == DerivTag::val) {
          g[0] += g_mu[i] * t.coeff * (t.point.I1 - 3.0);
          g[1] += g_mu[i] * t.coeff * (t.point.I4 - 1.0);
        } else if (t.tag == DerivTag::d1) {
          g[0] += g_mu[i] * t.coeff;
        } else if (t.tag == DerivTag::d4) {
          g[1] += g_mu[i] * t.coeff;
        }
      }
    }

    // noise hyperparameters
    g[4] = g_lex;
    g[5] = g_ley;

    // sigma_f chain: every covariance entry scales with sf^2, the jitter by
    // construction included
    g[2] = 2.0 * (Kbar.cwiseProduct(Kuu)).sum() + 2.0 * (Kf_bar.cwiseProduct(Kf)).sum();
    for (Eigen::Index i = 0; i < n_rows; ++i) g[2] += 2.0 * g_v[i] * K_ii[i];

    // lengthscale and inducing-location chains need per-entry partials
    chain_kuu(kern, Z, Kbar, g);
    chain_kf(kern, Z, Kf_bar, g, act, with_con);
    chain_kii(kern, g_v, g, act, with_con);

    return elbo;
  }

  const std::vector<InvariantPoint>& constraint_points() const { return con_pts_; }
  const Vector& targets() const { return targets_; }
  const std::vector<LinearFunctional>& gauss_functionals() const { return gauss_funcs_; }
  const std::vector<int>& noise_kinds() const { return noise_kind_; }

private:
  void fill_cross_row(const SEKernel& kern, Matrix& Kf, Eigen::Index row, const InvariantPoint& p,
                      int tag, double coeff, const std::vector<InvariantPoint>& Z) const {
    const auto [a1, a4] = tag_orders(static_cast<DerivTag>(tag));
    for (int ip = 0; ip < M_; ++ip) {
      const auto& z = Z[static_cast<std::size_t>(ip)];
      const SEKernel::Pair pr = kern.prepare(p.I1 - z.I1, p.I4 - z.I4);
      for (int bt = 0; bt < 5; ++bt) {
        const auto [b1, b4] = tag_orders(static_cast<DerivTag>(bt));
        Kf(row, 5 * ip + bt) +=
            coeff * SEKernel::sign(b1 + b4) * kern.dvalue(pr, a1 + b1, a4 + b4);
      }
    }
  }

  void chain_kuu(const SEKernel& kern, const std::vector<InvariantPoint>& Z, const Matrix& Kbar,
                 Vector& g) const {
    for (int ip = 0; ip < M_; ++ip)
      for (int jp = ip; jp < M_; ++jp) {
        const auto& zi = Z[static_cast<std::size_t>(ip)];
        const auto& zj = Z[static_cast<std::size_t>(jp)];
        for (int a = 0; a < 5; ++a)
          for (int b = 0; b < 5; ++b) {
            const KernelBlockGrad kg = kern.with_partials(
                zi, zj, static_cast<DerivTag>(a), static_cast<DerivTag>(b));
            double w;
            if (ip == jp) {
              w = Kbar(5 * ip + a, 5 * jp + b);
              g[3] += w * kg.d_log_len;
              continue;  // coordinate sensitivities cancel on the diagonal pair
            }
            w = Kbar(5 * ip + a, 5 * jp + b) + Kbar(5 * jp + b, 5 * ip + a);
            g[3] += w * kg.d_log_len;
            g[6 + 2 * ip] += w * kg.d_p1;
            g[6 + 2 * ip + 1] += w * kg.d_p4;
            g[6 + 2 * jp] -= w * kg.d_p1;
            g[6 + 2 * jp + 1] -= w * kg.d_p4;
          }
      }
  }

  void chain_kf(const SEKernel& kern, const std::vector<InvariantPoint>& Z, const Matrix& Kf_bar,
                Vector& g, const std::vector<int>& act, bool with_con) const {
    const Eigen::Index n_act = static_cast<Eigen::Index>(act.size());
    auto add_term = [&](Eigen::Index row, const InvariantPoint& p, int tag, double coeff) {
      for (int ip = 0; ip < M_; ++ip) {
        const auto& z = Z[static_cast<std::size_t>(ip)];
        for (int bt = 0; bt < 5; ++bt) {
          const KernelBlockGrad kg =
              kern.with_partials(p, z, static_cast<DerivTag>(tag), static_cast<DerivTag>(bt));
          const double w = Kf_bar(row, 5 * ip + bt) * coeff;
          g[3] += w * kg.d_log_len;
          // data location fixed: only the inducing side moves (second argument)
          g[6 + 2 * ip] -= w * kg.d_p1;
          g[6 + 2 * ip + 1] -= w * kg.d_p4;
        }
      }
    };
    for (Eigen::Index i = 0; i < n_act; ++i)
      for (const auto& t : gauss_funcs_[static_cast<std::size_t>(act[static_cast<std::size_t>(i)])])
        add_term(i, t.point, static_cast<int>(t.tag), t.coeff);
    if (with_con)
      for (std::size_t c = 0; c < con_pts_.size(); ++c)
        for (int half = 0; half < 2; ++half)
          add_term(n_act + 2 * static_cast<Eigen::Index>(c) + half, con_pts_[c],
                   half == 0 ? static_cast<int>(DerivTag::d11) : static_cast<int>(DerivTag::d44),
                   1.0);
  }

  void chain_kii(const SEKernel& kern, const Vector& g_v, Vector& g, const std::vector<int>& act,
                 bool with_con) const {
    const Eigen::Index n_act = static_cast<Eigen::Index>(act.size());
    for (Eigen::Index i = 0; i < n_act; ++i) {
      const auto& fn = gauss_funcs_[static_cast<std::size_t>(act[static_cast<std::size_t>(i)])];
      for (const auto& s : fn)
        for (const auto& t : fn) {
          const KernelBlockGrad kg = kern.with_partials(s.point, t.point, s.tag, t.tag);
          g[3] += g_v[i] * s.coeff * t.coeff * kg.d_log_len;
        }
    }
    if (with_con)
      for (std::size_t c = 0; c < con_pts_.size(); ++c)
        for (int half = 0; half < 2; ++half) {
          const DerivTag tag = half == 0 ? DerivTag::d11 : DerivTag::d44;
          const KernelBlockGrad kg = kern.with_partials(con_pts_[c], con_pts_[c], tag, tag);
          g[3] += g_v[n_act + 2 * static_cast<Eigen::Index>(c) + half] * kg.d_log_len;
        }
  }

  int M_;
  Eigen::Index D_;
  std::vector<InvariantPoint> con_pts_;
  Eigen::Index n_gauss_ = 0;
  Eigen::Index n_con_ = 0;
  Vector targets_;
  std::vector<int> noise_kind_;
  std::vector<LinearFunctional> gauss_funcs_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Trained model
// ---------------------------------------------------------------------------

/// Sparse posterior usable for prediction of any channel mix. Read-only and
/// safe to call concurrently once constructed.
class VariationalGP : public SEDFPosterior {
public:
  VariationalGP(Hyperparams h, std::vector<InvariantPoint> Z, Vector m_v, Matrix L_factor,
                DomainBox box)
      : h_(h), Z_(std::move(Z)), m_v_(std::move(m_v)), L_(std::move(L_factor)), box_(box),
        kern_(h) {
    const auto basis = inducing_basis(Z_);
    const Eigen::Index D = static_cast<Eigen::Index>(basis.size());
    if (m_v_.size() != D || L_.rows() != D || L_.cols() != D)
      throw ContractError("VariationalGP: inconsistent dimensions");
    Matrix Kuu(D, D);
    for (Eigen::Index i = 0; i < D; ++i)
      for (Eigen::Index j = i; j < D; ++j) {
        Kuu(i, j) = kern_(basis[static_cast<std::size_t>(i)].first,
                          basis[static_cast<std::size_t>(j)].first,
                          basis[static_cast<std::size_t>(i)].second,
                          basis[static_cast<std::size_t>(j)].second);
        Kuu(j, i) = Kuu(i, j);
      }
    fact_ = chol_with_jitter(Kuu, h_.sigma_f * h_.sigma_f);
    Vector mu_u(D);
    for (Eigen::Index e = 0; e < D; ++e)
      mu_u[e] = prior_mean(basis[static_cast<std::size_t>(e)].first,
                           basis[static_cast<std::size_t>(e)].second, h_);
    r_ = fact_.solve(Vector(m_v_ - mu_u));
    basis_funcs_.reserve(basis.size());
    for (const auto& [p, t] : basis) basis_funcs_.push_back({{p, t, 1.0}});
  }

  JointPosterior predict_functionals(const std::vector<LinearFunctional>& queries,
                                     bool full_cov) const override {
    if (queries.empty()) throw ContractError("predict: empty query list");
    const Matrix Kq = functional_cross_cov(kern_, queries, basis_funcs_);
    JointPosterior post;
    post.mean.resize(Kq.rows());
    for (Eigen::Index i = 0; i < Kq.rows(); ++i)
      post.mean[i] = functional_prior_mean(queries[static_cast<std::size_t>(i)], h_);
    post.mean += Kq * r_;
    const Matrix V = fact_.solve(Matrix(Kq.transpose()));
    const Matrix U = L_.transpose().triangularView<Eigen::Upper>() * V;
    if (full_cov) {
      post.cov = functional_cov_matrix(kern_, queries) - Kq * V + U.transpose() * U;
      post.var = post.cov.diagonal();
      post.has_full_cov = true;
    } else {
      post.var.resize(Kq.rows());
      for (Eigen::Index i = 0; i < Kq.rows(); ++i)
        post.var[i] = functional_cov(kern_, queries[static_cast<std::size_t>(i)],
                                     queries[static_cast<std::size_t>(i)]) -
                      Kq.row(i).dot(V.col(i)) + U.col(i).squaredNorm();
    }
    return post;
  }

  const Hyperparams& hyperparams() const override { return h_; }
  DomainBox domain_box() const override { return box_; }

  const std::vector<InvariantPoint>& inducing_locations() const { return Z_; }
  const Vector& variational_mean() const { return m_v_; }
  const Matrix& variational_factor() const { return L_; }

private:
  Hyperparams h_;
  std::vector<InvariantPoint> Z_;
  Vector m_v_;
  Matrix L_;
  DomainBox box_;
  SEKernel kern_;
  JitteredLLT fact_;
  Vector r_;
  std::vector<LinearFunctional> basis_funcs_;
};

// ---------------------------------------------------------------------------
// Public ELBO and training
// ---------------------------------------------------------------------------

namespace detail {

/// Jittered Cholesky of the inducing prior covariance, matching the one built
/// inside the ELBO evaluation.
inline JitteredLLT inducing_chol(const Hyperparams& h, const std::vector<InvariantPoint>& Z) {
  const Matrix K = assemble_joint_cov(inducing_basis(Z), h, 0.0);
  return chol_with_jitter(K, h.sigma_f * h.sigma_f);
}

inline Vector inducing_prior_mean(const Hyperparams& h, const std::vector<InvariantPoint>& Z) {
  const auto basis = inducing_basis(Z);
  Vector mu(static_cast<Eigen::Index>(basis.size()));
  for (Eigen::Index e = 0; e < mu.size(); ++e)
    mu[e] = prior_mean(basis[static_cast<std::size_t>(e)].first,
                       basis[static_cast<std::size_t>(e)].second, h);
  return mu;
}

/// (m_w, L_w) of the whitened density representing N(m_v, S_v).
inline std::pair<Vector, Matrix> whiten(const Hyperparams& h, const std::vector<InvariantPoint>& Z,
                                        const Vector& m_v, const Matrix& S_chol_lower) {
  const JitteredLLT fact = inducing_chol(h, Z);
  const auto C = fact.llt.matrixL();
  Vector m_w = C.solve(Vector(m_v - inducing_prior_mean(h, Z)));
  Matrix L_w = C.solve(S_chol_lower);
  // guard strictly positive diagonal for the log parameterization
  for (Eigen::Index i = 0; i < L_w.rows(); ++i)
    L_w(i, i) = std::max(L_w(i, i), 1e-12);
  return {std::move(m_w), std::move(L_w)};
}

}  // namespace detail

/// ELBO of a given variational state. Deterministic for a fixed seed; the
/// probit expectations use mc_samples reparameterized draws.
inline double elbo(const ObservationSet& obs, const ReferencePoint& ref,
                   const std::vector<InvariantPoint>& constraint_pts, const InducingSet& q,
                   const Hyperparams& h, double gamma, int mc_samples, std::uint64_t seed) {
  Eigen::LLT<Matrix> s_chol(q.S_v);
  if (s_chol.info() != Eigen::Success)
    throw ContractError("elbo: variational covariance is not positive definite");
  auto [m_w, L_w] = detail::whiten(h, q.Z, q.m_v, Matrix(s_chol.matrixL()));
  detail::ElboProblem prob(build_observation_model(obs, ref), constraint_pts,
                           q.num_points());
  const Vector params = prob.pack(h, q.Z, m_w, L_w);
  Matrix zdraws;
  if (gamma > 0.0 && prob.num_constraint_rows() > 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss;
    zdraws.resize(mc_samples, prob.num_constraint_rows());
    for (Eigen::Index s = 0; s < zdraws.rows(); ++s)
      for (Eigen::Index c = 0; c < zdraws.cols(); ++c) zdraws(s, c) = gauss(rng);
  }
  return prob.value_and_grad(params, gamma, zdraws, nullptr);
}

namespace detail {

struct Adam {
  Vector m, v;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long t = 0;

  void init(Eigen::Index n) {
    m = Vector::Zero(n);
    v = Vector::Zero(n);
    t = 0;
  }
  void step(Vector& params, const Vector& grad, double lr) {
    ++t;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 / (1.0 - std::pow(beta1, static_cast<double>(t)));
    const double c2 = 1.0 / (1.0 - std::pow(beta2, static_cast<double>(t)));
    params -= lr * (c1 * m.array() / ((c2 * v.array()).sqrt() + eps)).matrix();
  }
};

}  // namespace detail

/// Initial hyperparameters: signal scale from the stress spread, lengthscale
/// from the data extent, unit mean slopes, a mild noise guess.
inline Hyperparams initial_hyperparams(const ObservationSet& obs) {
  Hyperparams h;
  double mean = 0.0;
  for (const auto& rec : obs.records) mean += rec.Pxx + rec.Pyy;
  mean /= 2.0 * static_cast<double>(obs.size());
  double var = 0.0;
  for (const auto& rec : obs.records) {
    var += (rec.Pxx - mean) * (rec.Pxx - mean) + (rec.Pyy - mean) * (rec.Pyy - mean);
  }
  var /= 2.0 * static_cast<double>(obs.size());
  h.sigma_f = std::max(std::sqrt(var), 0.1);
  h.lengthscale = std::max(obs.invariant_hull_box().diagonal() * 0.5, 1e-2);
  h.alpha = 1.0;
  h.beta = 1.0;
  h.ex2 = 0.05;
  h.ey2 = 0.05;
  return h;
}

/// Near-square lattice of M inducing locations over the box.
inline std::vector<InvariantPoint> inducing_lattice(const DomainBox& box, int M) {
  if (M < 1) throw ContractError("inducing_lattice: M must be >= 1");
  int rows = static_cast<int>(std::round(std::sqrt(static_cast<double>(M))));
  rows = std::max(rows, 1);
  int cols = (M + rows - 1) / rows;
  std::vector<InvariantPoint> Z;
  Z.reserve(static_cast<std::size_t>(M));
  for (int i = 0; i < rows && static_cast<int>(Z.size()) < M; ++i)
    for (int j = 0; j < cols && static_cast<int>(Z.size()) < M; ++j) {
      const double t1 = rows > 1 ? static_cast<double>(i) / (rows - 1) : 0.5;
      const double t4 = cols > 1 ? static_cast<double>(j) / (cols - 1) : 0.5;
      Z.push_back({box.I1_min + t1 * (box.I1_max - box.I1_min),
                   box.I4_min + t4 * (box.I4_max - box.I4_min)});
    }
  return Z;
}

/// Staged training: an unconstrained warm-up followed by the gamma ladder.
inline std::pair<VariationalGP, TrainTrace> train(const TrainingData& data,
                                                  const TrainConfig& cfg) {
  if (data.obs.empty()) throw ContractError("train: empty observation set");
  const DomainBox box = data.grid.bounds;
  Hyperparams h0 = initial_hyperparams(data.obs);
  std::vector<InvariantPoint> Z0 = inducing_lattice(box, cfg.num_inducing);

  detail::ElboProblem prob(build_observation_model(data.obs, data.ref),
                           cfg.use_constraints ? data.grid.points()
                                               : std::vector<InvariantPoint>{},
                           cfg.num_inducing);

  // warm-start q(u) at the exact constraint-free posterior restricted to the
  // inducing basis; the warm-up stage then mostly refines hyperparameters and
  // locations instead of spending its budget rediscovering the data fit
  Vector m_w0;
  Matrix L_w0;
  {
    const ExactGP exact(build_observation_model(data.obs, data.ref), h0, box);
    const auto basis = inducing_basis(Z0);
    JointPosterior post = exact.predict_functionals(queries_to_functionals(basis), true);
    Matrix S0 = 0.5 * (post.cov + post.cov.transpose());
    const JitteredLLT s_chol = chol_with_jitter(S0, h0.sigma_f * h0.sigma_f, 1e-12, 1e-4);
    S0.diagonal().array() += s_chol.jitter;
    Eigen::LLT<Matrix> llt(S0);
    std::tie(m_w0, L_w0) = detail::whiten(h0, Z0, post.mean, Matrix(llt.matrixL()));
  }

  Vector params = prob.pack(h0, Z0, m_w0, L_w0);
  detail::Adam adam;
  adam.init(params.size());
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss;

  TrainTrace trace;
  trace.stage1_iters = cfg.warmup_iters;
  Vector grad(params.size());

  const Eigen::Index n_records = static_cast<Eigen::Index>(data.obs.size());
  const bool batching = cfg.minibatch > 0 && cfg.minibatch < n_records;

  auto pick_rows = [&](std::vector<int>& act, double& scale) {
    act.clear();
    scale = 1.0;
    if (!batching) return;
    std::vector<int> recs(static_cast<std::size_t>(n_records));
    for (Eigen::Index i = 0; i < n_records; ++i) recs[static_cast<std::size_t>(i)] = static_cast<int>(i);
    std::shuffle(recs.begin(), recs.end(), rng);
    recs.resize(static_cast<std::size_t>(cfg.minibatch));
    for (int rec : recs) {
      act.push_back(2 * rec);
      act.push_back(2 * rec + 1);
    }
    act.push_back(static_cast<int>(2 * n_records));  // the reference row rides along
    scale = static_cast<double>(n_records) / cfg.minibatch;
  };

  auto run_stage = [&](int iters, double lr, double gamma, int ramp) {
    Matrix zdraws;
    for (int it = 0; it < iters; ++it) {
      if (gamma > 0.0 && prob.num_constraint_rows() > 0) {
        zdraws.resize(cfg.mc_samples, prob.num_constraint_rows());
        for (Eigen::Index s = 0; s < zdraws.rows(); ++s)
          for (Eigen::Index c = 0; c < zdraws.cols(); ++c) zdraws(s, c) = gauss(rng);
      }
      std::vector<int> act;
      double scale;
      pick_rows(act, scale);
      const double value = prob.value_and_grad(params, gamma, zdraws, &grad, scale, act);
      const double loss = -value;
      if (!std::isfinite(loss))
        throw NumericalError("train: loss diverged at iteration " +
                             std::to_string(trace.loss.size()));
      trace.loss.push_back(loss);
      trace.gamma.push_back(gamma);
      grad = -grad;  // maximize the ELBO
      // linear ramp so the first steps do not kick the warm-started q away
      const double lr_t = ramp > 0 && it < ramp ? lr * (it + 1) / ramp : lr;
      adam.step(params, grad, lr_t);
      // keep inducing locations inside the padded box
      for (int i = 0; i < cfg.num_inducing; ++i) {
        params[6 + 2 * i] = std::clamp(params[6 + 2 * i], box.I1_min, box.I1_max);
        params[6 + 2 * i + 1] = std::clamp(params[6 + 2 * i + 1], box.I4_min, box.I4_max);
      }
    }
  };

  run_stage(cfg.warmup_iters, cfg.warmup_lr, 0.0, std::min(cfg.warmup_iters / 5, 200));
  if (cfg.use_constraints)
    for (double gamma : cfg.gamma_ladder)
      run_stage(cfg.iters_per_gamma, cfg.constrained_lr, gamma, 0);

  Hyperparams h;
  std::vector<InvariantPoint> Z;
  Vector m_w;
  Matrix L_w;
  prob.unpack(params, h, Z, m_w, L_w);
  trace.final_hyperparams = h;
  trace.total_iters = static_cast<int>(trace.loss.size());

  // de-whiten: m_v = mu_u + C m_w, L_v = C L_w
  const JitteredLLT fact = detail::inducing_chol(h, Z);
  const auto C = fact.llt.matrixL();
  Vector m_v = detail::inducing_prior_mean(h, Z) + Matrix(C) * m_w;
  Matrix L_v = Matrix(C) * L_w;
  return {VariationalGP(h, std::move(Z), std::move(m_v), std::move(L_v), box), std::move(trace)};
}

/// Variational state whose q(u) is the exact constraint-free posterior at the
/// training inputs. With inducing = training this reproduces the closed-form
/// posterior, which is the cross-check used by the test suites.
inline VariationalGP variational_from_exact(const ObservationSet& obs, const Hyperparams& h,
                                            double padding = 0.1) {
  ExactGP exact = ExactGP::from_observations(obs, h, padding);
  std::vector<InvariantPoint> Z;
  Z.reserve(obs.size() + 1);
  for (const auto& rec : obs.records) Z.push_back(rec.invariants());
  Z.push_back(ReferencePoint{}.point);
  const auto basis = inducing_basis(Z);
  JointPosterior post = exact.predict_functionals(queries_to_functionals(basis), true);
  Matrix S = 0.5 * (post.cov + post.cov.transpose());
  // the posterior covariance has near-null directions; keep its jitter far
  // below the inducing-prior jitter or the KL picks up a tr(W)*jitter bias
  const JitteredLLT s_chol = chol_with_jitter(S, h.sigma_f * h.sigma_f, 1e-15, 1e-4);
  Matrix L = s_chol.llt.matrixL();
  return VariationalGP(h, std::move(Z), std::move(post.mean), std::move(L),
                       obs.invariant_hull_box().padded(padding));
}

}  // namespace gpsedf
