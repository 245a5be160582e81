#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "gpsedf/common.hpp"
#include "gpsedf/dataset.hpp"
#include "gpsedf/kernel.hpp"

namespace gpsedf {

/// Gaussian joint posterior over a list of queried functionals.
struct JointPosterior {
  Vector mean;
  Vector var;   // marginal variances, always filled
  Matrix cov;   // full covariance, only when requested
  bool has_full_cov = false;
  std::vector<std::uint8_t> extrapolation;  // 1 where the query left the padded box
};

using QueryList = std::vector<std::pair<InvariantPoint, DerivTag>>;

/// The biaxial observation model: stress components as linear functionals of
/// the first-derivative channels, plus the zero-energy anchor.
struct ObservationModel {
  std::vector<LinearFunctional> functionals;  // Pxx_0, Pyy_0, Pxx_1, ..., reference
  Vector targets;
  std::vector<int> noise_kind;  // 0 -> ex2, 1 -> ey2, 2 -> e02

  Eigen::Index size() const { return targets.size(); }

  Vector noise_diag(const Hyperparams& h) const {
    Vector d(size());
    for (Eigen::Index i = 0; i < size(); ++i)
      d[i] = noise_kind[static_cast<std::size_t>(i)] == 0   ? h.ex2
             : noise_kind[static_cast<std::size_t>(i)] == 1 ? h.ey2
                                                            : Hyperparams::e02;
    return d;
  }
};

/// Coefficients of Pxx and Pyy on (W1, W4) at one stretch state.
inline void stress_row_coeffs(const ObservationRecord& r, double& axx_1, double& axx_4,
                              double& ayy_1) {
  const double lx = r.lambda_x, ly = r.lambda_y;
  axx_1 = 2.0 * (lx - 1.0 / (lx * lx * lx * ly * ly));
  axx_4 = 2.0 * lx;
  ayy_1 = 2.0 * (ly - 1.0 / (lx * lx * ly * ly * ly));
}

inline ObservationModel build_observation_model(const ObservationSet& obs,
                                                const ReferencePoint& ref = {}) {
  ObservationModel m;
  m.functionals.reserve(2 * obs.size() + 1);
  std::vector<double> y;
  y.reserve(2 * obs.size() + 1);
  for (const auto& r : obs.records) {
    const InvariantPoint p = r.invariants();
    double axx1, axx4, ayy1;
    stress_row_coeffs(r, axx1, axx4, ayy1);
    m.functionals.push_back({{p, DerivTag::d1, axx1}, {p, DerivTag::d4, axx4}});
    y.push_back(r.Pxx);
    m.noise_kind.push_back(0);
    m.functionals.push_back({{p, DerivTag::d1, ayy1}});
    y.push_back(r.Pyy);
    m.noise_kind.push_back(1);
  }
  m.functionals.push_back({{ref.point, DerivTag::val, 1.0}});
  y.push_back(ref.value);
  m.noise_kind.push_back(2);
  m.targets = Eigen::Map<const Vector>(y.data(), static_cast<Eigen::Index>(y.size()));
  return m;
}

inline std::vector<LinearFunctional> queries_to_functionals(const QueryList& queries) {
  std::vector<LinearFunctional> fs;
  fs.reserve(queries.size());
  for (const auto& [p, tag] : queries) fs.push_back({{p, tag, 1.0}});
  return fs;
}

/// Common read-only surface of the exact and variational posteriors.
class SEDFPosterior {
public:
  virtual ~SEDFPosterior() = default;

  virtual JointPosterior predict_functionals(const std::vector<LinearFunctional>& queries,
                                             bool full_cov) const = 0;
  virtual const Hyperparams& hyperparams() const = 0;
  virtual DomainBox domain_box() const = 0;

  JointPosterior predict(const QueryList& queries, bool full_cov = false) const {
    JointPosterior post = predict_functionals(queries_to_functionals(queries), full_cov);
    post.extrapolation.resize(queries.size(), 0);
    const DomainBox box = domain_box();
    for (std::size_t i = 0; i < queries.size(); ++i)
      post.extrapolation[i] = box.contains(queries[i].first) ? 0 : 1;
    return post;
  }
};

}  // namespace gpsedf
