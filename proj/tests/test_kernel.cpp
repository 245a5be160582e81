#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Eigenvalues>

#include <functional>

#include "gpsedf/kernel.hpp"
#include "test_util.hpp"

using namespace gpsedf;
using namespace gpsedf::testing;
using Catch::Approx;

namespace {

double base_kernel(const InvariantPoint& p, const InvariantPoint& q, const Hyperparams& h) {
  const double d1 = p.I1 - q.I1, d4 = p.I4 - q.I4;
  return h.sigma_f * h.sigma_f *
         std::exp(-(d1 * d1 + d4 * d4) / (2.0 * h.lengthscale * h.lengthscale));
}

// FD approximation of d^a_p d^b_q k(p, q) built only from the base kernel
double fd_block(InvariantPoint p, InvariantPoint q, DerivTag a, DerivTag b, const Hyperparams& h,
                double step = 1e-4) {
  auto apply_a = [&](const InvariantPoint& pp, const InvariantPoint& qq) {
    auto k = [&](double x1, double x4) { return base_kernel({x1, x4}, qq, h); };
    switch (a) {
      case DerivTag::val: return k(pp.I1, pp.I4);
      case DerivTag::d1:
        return (k(pp.I1 + step, pp.I4) - k(pp.I1 - step, pp.I4)) / (2 * step);
      case DerivTag::d4:
        return (k(pp.I1, pp.I4 + step) - k(pp.I1, pp.I4 - step)) / (2 * step);
      case DerivTag::d11:
        return (k(pp.I1 + step, pp.I4) - 2 * k(pp.I1, pp.I4) + k(pp.I1 - step, pp.I4)) /
               (step * step);
      case DerivTag::d44:
        return (k(pp.I1, pp.I4 + step) - 2 * k(pp.I1, pp.I4) + k(pp.I1, pp.I4 - step)) /
               (step * step);
    }
    return 0.0;
  };
  switch (b) {
    case DerivTag::val: return apply_a(p, q);
    case DerivTag::d1:
      return (apply_a(p, {q.I1 + step, q.I4}) - apply_a(p, {q.I1 - step, q.I4})) / (2 * step);
    case DerivTag::d4:
      return (apply_a(p, {q.I1, q.I4 + step}) - apply_a(p, {q.I1, q.I4 - step})) / (2 * step);
    case DerivTag::d11:
      return (apply_a(p, {q.I1 + step, q.I4}) - 2 * apply_a(p, q) +
              apply_a(p, {q.I1 - step, q.I4})) /
             (step * step);
    case DerivTag::d44:
      return (apply_a(p, {q.I1, q.I4 + step}) - 2 * apply_a(p, q) +
              apply_a(p, {q.I1, q.I4 - step})) /
             (step * step);
  }
  return 0.0;
}

}  // namespace

TEST_CASE("prior mean") {
  Hyperparams h;
  h.alpha = 2.0;
  h.beta = 3.0;
  CHECK(prior_mean({3.0, 1.0}, DerivTag::val, h) == Approx(0.0).margin(1e-15));
  CHECK(prior_mean({3.5, 1.2}, DerivTag::val, h) == Approx(1.6).epsilon(1e-13));
  CHECK(prior_mean({3.3, 0.8}, DerivTag::d1, h) == Approx(2.0));
  CHECK(prior_mean({3.3, 0.8}, DerivTag::d4, h) == Approx(3.0));
  CHECK(prior_mean({3.3, 0.8}, DerivTag::d11, h) == 0.0);
  CHECK(prior_mean({3.3, 0.8}, DerivTag::d44, h) == 0.0);
}

TEST_CASE("kernel blocks at zero lag") {
  Hyperparams h;
  h.sigma_f = 1.7;
  h.lengthscale = 0.6;
  const InvariantPoint p{3.1, 1.05};
  CHECK(kernel_block(p, p, DerivTag::val, DerivTag::val, h) ==
        Approx(h.sigma_f * h.sigma_f).epsilon(1e-14));
  CHECK(kernel_block(p, p, DerivTag::val, DerivTag::d1, h) == Approx(0.0).margin(1e-14));
  CHECK(kernel_block(p, p, DerivTag::d1, DerivTag::d1, h) ==
        Approx(h.sigma_f * h.sigma_f / (h.lengthscale * h.lengthscale)).epsilon(1e-13));
}

namespace {

// 5-point first derivative, 4th-order accurate
double fd1(const std::function<double(double)>& f, double x, double h) {
  return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h);
}

// which lower-order block a tag reduces to when one derivative is peeled off:
// d1 -> val, d4 -> val, d11 -> d1, d44 -> d4; peel axis is I1 for d1/d11
struct Peel {
  DerivTag lower;
  bool axis_I1;
};

Peel peel(DerivTag t) {
  switch (t) {
    case DerivTag::d1: return {DerivTag::val, true};
    case DerivTag::d4: return {DerivTag::val, false};
    case DerivTag::d11: return {DerivTag::d1, true};
    case DerivTag::d44: return {DerivTag::d4, false};
    default: throw std::logic_error("peel(val)");
  }
}

}  // namespace

TEST_CASE("every derivative block matches finite differences of the base kernel") {
  // Each block with a derivative on an argument is checked as a directional
  // finite difference of the one-order-lower block, down to the plain kernel.
  // Every comparison is a single well-conditioned first difference, so the
  // whole table is anchored to base_kernel through the chain.
  Hyperparams h;  // sigma_f = lengthscale = 1
  auto rng = seeded_rng(7);
  const double step = 1e-4;
  for (int trial = 0; trial < 50; ++trial) {
    const InvariantPoint p{uniform(rng, 2.9, 3.5), uniform(rng, 0.6, 1.6)};
    const InvariantPoint q{uniform(rng, 2.9, 3.5), uniform(rng, 0.6, 1.6)};
    CAPTURE(p.I1, p.I4, q.I1, q.I4);
    CHECK(rel_err(kernel_block(p, q, DerivTag::val, DerivTag::val, h), base_kernel(p, q, h),
                  1e-8) < 1e-12);
    for (DerivTag a : kAllTags)
      for (DerivTag b : kAllTags) {
        if (a == DerivTag::val && b == DerivTag::val) continue;
        const double got = kernel_block(p, q, a, b, h);
        double want;
        if (b != DerivTag::val) {  // peel one derivative off the second argument
          const Peel pe = peel(b);
          auto f = [&](double x) {
            const InvariantPoint qq =
                pe.axis_I1 ? InvariantPoint{x, q.I4} : InvariantPoint{q.I1, x};
            return kernel_block(p, qq, a, pe.lower, h);
          };
          want = fd1(f, pe.axis_I1 ? q.I1 : q.I4, step);
        } else {  // peel off the first argument
          const Peel pe = peel(a);
          auto f = [&](double x) {
            const InvariantPoint pp =
                pe.axis_I1 ? InvariantPoint{x, p.I4} : InvariantPoint{p.I1, x};
            return kernel_block(pp, q, pe.lower, DerivTag::val, h);
          };
          want = fd1(f, pe.axis_I1 ? p.I1 : p.I4, step);
        }
        CAPTURE(static_cast<int>(a), static_cast<int>(b));
        CHECK(rel_err(got, want, 1e-4) < 1e-6);
      }
  }
}

TEST_CASE("low-order blocks also match nested differences of the base kernel directly") {
  Hyperparams h;
  auto rng = seeded_rng(19);
  const DerivTag low[] = {DerivTag::val, DerivTag::d1, DerivTag::d4};
  for (int trial = 0; trial < 20; ++trial) {
    const InvariantPoint p{uniform(rng, 2.9, 3.5), uniform(rng, 0.6, 1.6)};
    const InvariantPoint q{uniform(rng, 2.9, 3.5), uniform(rng, 0.6, 1.6)};
    for (DerivTag a : low)
      for (DerivTag b : low)
        CHECK(rel_err(kernel_block(p, q, a, b, h), fd_block(p, q, a, b, h), 1e-4) < 1e-6);
  }
}

TEST_CASE("exchange symmetry and the first-derivative sign rule") {
  Hyperparams h;
  h.sigma_f = 1.3;
  h.lengthscale = 0.8;
  auto rng = seeded_rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const InvariantPoint p{uniform(rng, 2.9, 3.5), uniform(rng, 0.6, 1.6)};
    const InvariantPoint q{uniform(rng, 2.9, 3.5), uniform(rng, 0.6, 1.6)};
    for (DerivTag a : kAllTags)
      for (DerivTag b : kAllTags)
        CHECK(kernel_block(p, q, a, b, h) ==
              Approx(kernel_block(q, p, b, a, h)).margin(1e-12));
    // the derivative acting on the second argument flips the sign
    CHECK(kernel_block(p, q, DerivTag::d1, DerivTag::val, h) ==
          Approx(-kernel_block(p, q, DerivTag::val, DerivTag::d1, h)).margin(1e-13));
  }
}

TEST_CASE("joint covariance assembly") {
  Hyperparams h;
  h.sigma_f = 2.0;

  const Matrix single = assemble_joint_cov({{{3.05, 1.0}, DerivTag::val}}, h, 1e-8);
  REQUIRE(single.rows() == 1);
  CHECK(single(0, 0) == Approx(4.0 + 1e-8).epsilon(1e-12));

  // duplicated row: singular before jitter, positive definite after
  const std::vector<std::pair<InvariantPoint, DerivTag>> dup = {{{3.1, 1.1}, DerivTag::val},
                                                                {{3.1, 1.1}, DerivTag::val}};
  const Matrix K0 = assemble_joint_cov(dup, h, 0.0);
  CHECK(std::abs(K0.determinant()) < 1e-20);
  const Matrix K = assemble_joint_cov(dup, h, 1e-6);
  Eigen::SelfAdjointEigenSolver<Matrix> es(K);
  CHECK(es.eigenvalues().minCoeff() > 0.0);

  // the 5x5 one-point block has the symmetry of the joint-process covariance
  const InvariantPoint p{3.2, 0.9};
  std::vector<std::pair<InvariantPoint, DerivTag>> rows;
  for (DerivTag t : kAllTags) rows.emplace_back(p, t);
  const Matrix B = assemble_joint_cov(rows, h, 0.0);
  CHECK((B - B.transpose()).norm() == Approx(0.0).margin(1e-14));
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      CHECK(B(i, j) == Approx(fd_block(p, p, kAllTags[static_cast<std::size_t>(i)],
                                       kAllTags[static_cast<std::size_t>(j)], h, 1e-3))
                           .margin(2e-2 * h.sigma_f * h.sigma_f));
}

TEST_CASE("assembled covariances are PSD after jitter") {
  auto rng = seeded_rng(2024);
  for (int design = 0; design < 20; ++design) {
    Hyperparams h;
    h.sigma_f = uniform(rng, 0.5, 3.0);
    h.lengthscale = uniform(rng, 0.2, 1.0);
    const int n = 10 + design * 2;
    std::vector<std::pair<InvariantPoint, DerivTag>> rows;
    for (int i = 0; i < n; ++i)
      rows.emplace_back(InvariantPoint{uniform(rng, 2.9, 3.5), uniform(rng, 0.6, 1.6)},
                        kAllTags[static_cast<std::size_t>(i) % 5]);
    const JitteredLLT f = chol_with_jitter(assemble_joint_cov(rows, h, 0.0),
                                           h.sigma_f * h.sigma_f);
    Matrix K = assemble_joint_cov(rows, h, f.jitter);
    Eigen::SelfAdjointEigenSolver<Matrix> es(K);
    CHECK(es.eigenvalues().minCoeff() >= -1e-10 * K.diagonal().maxCoeff());
  }
}

TEST_CASE("kernel parameter partials match finite differences") {
  auto rng = seeded_rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const double sf = uniform(rng, 0.5, 2.5);
    const double len = uniform(rng, 0.3, 1.2);
    const InvariantPoint p{uniform(rng, 2.9, 3.5), uniform(rng, 0.6, 1.6)};
    const InvariantPoint q{uniform(rng, 2.9, 3.5), uniform(rng, 0.6, 1.6)};
    for (DerivTag a : kAllTags)
      for (DerivTag b : kAllTags) {
        const SEKernel k(sf, len);
        const KernelBlockGrad g = k.with_partials(p, q, a, b);
        const double h = 1e-6;
        auto at = [&](double psf, double plen, InvariantPoint pp) {
          return SEKernel(psf, plen)(pp, q, a, b);
        };
        CAPTURE(static_cast<int>(a), static_cast<int>(b), sf, len);
        const double fd_p1 = (at(sf, len, {p.I1 + h, p.I4}) - at(sf, len, {p.I1 - h, p.I4})) / (2 * h);
        const double fd_p4 = (at(sf, len, {p.I1, p.I4 + h}) - at(sf, len, {p.I1, p.I4 - h})) / (2 * h);
        const double fd_lsf =
            (at(sf * std::exp(h), len, p) - at(sf * std::exp(-h), len, p)) / (2 * h);
        const double fd_llen =
            (at(sf, len * std::exp(h), p) - at(sf, len * std::exp(-h), p)) / (2 * h);
        const double scale = sf * sf / std::pow(len, 4);
        CHECK(std::abs(g.d_p1 - fd_p1) < 1e-5 * scale);
        CHECK(std::abs(g.d_p4 - fd_p4) < 1e-5 * scale);
        CHECK(std::abs(g.d_log_sf - fd_lsf) < 1e-5 * scale);
        CHECK(std::abs(g.d_log_len - fd_llen) < 1e-5 * scale);
      }
  }
}
