#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gpsedf/common.hpp"
#include "gpsedf/kinematics.hpp"

namespace gpsedf {

enum class ProtocolKind { biaxial_ray, pure_shear_x, pure_shear_y, custom };

/// One straight loading path in stretch space.
struct Protocol {
  ProtocolKind kind = ProtocolKind::biaxial_ray;
  double angle = std::numbers::pi / 4.0;  // direction in stretch space, biaxial rays only
  int steps = 20;
  double max_stretch = 1.2;

  /// Stretch states along the path, identity excluded. Pure shear keeps
  /// lambda_x * lambda_y = 1 so the thickness stretch is exactly 1.
  std::vector<StretchState> stretch_path() const {
    if (steps < 2) throw ContractError("Protocol: steps must be >= 2");
    if (!(max_stretch > 1.0)) throw ContractError("Protocol: max_stretch must exceed 1");
    std::vector<StretchState> path;
    path.reserve(static_cast<std::size_t>(steps));
    const double amp = max_stretch - 1.0;
    for (int i = 0; i < steps; ++i) {
      const double t = static_cast<double>(i + 1) / steps;
      StretchState s;
      switch (kind) {
        case ProtocolKind::biaxial_ray:
          s.lambda_x = 1.0 + t * std::sin(angle) * amp;
          s.lambda_y = 1.0 + t * std::cos(angle) * amp;
          break;
        case ProtocolKind::pure_shear_x:
          s.lambda_x = 1.0 + t * amp;
          s.lambda_y = 1.0 / s.lambda_x;
          break;
        case ProtocolKind::pure_shear_y:
          s.lambda_y = 1.0 + t * amp;
          s.lambda_x = 1.0 / s.lambda_y;
          break;
        case ProtocolKind::custom:
          throw ContractError("custom protocols carry no generator path");
      }
      path.push_back(s);
    }
    return path;
  }
};

struct ObservationRecord {
  double lambda_x = 1.0;
  double lambda_y = 1.0;
  double Pxx = 0.0;  // observed, kPa
  double Pyy = 0.0;
  int protocol_id = 0;

  InvariantPoint invariants() const {
    return invariants_from_stretches({lambda_x, lambda_y, 0.0});
  }
};

struct ObservationSet {
  std::vector<ObservationRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  DomainBox invariant_hull_box() const {
    if (records.empty()) throw ContractError("invariant_hull_box: empty observation set");
    DomainBox b;
    bool first = true;
    for (const auto& r : records) {
      const InvariantPoint p = r.invariants();
      if (first) {
        b = {p.I1, p.I1, p.I4, p.I4};
        first = false;
      } else {
        b.I1_min = std::min(b.I1_min, p.I1);
        b.I1_max = std::max(b.I1_max, p.I1);
        b.I4_min = std::min(b.I4_min, p.I4);
        b.I4_max = std::max(b.I4_max, p.I4);
      }
    }
    return b;
  }
};

/// Uniform lattice of constraint locations, row-major over (I1 index, I4 index).
struct ConstraintGrid {
  DomainBox bounds;
  int n1 = 20;
  int n4 = 20;

  int size() const { return n1 * n4; }
  InvariantPoint point(int i, int j) const {
    const double d1 = n1 > 1 ? (bounds.I1_max - bounds.I1_min) / (n1 - 1) : 0.0;
    const double d4 = n4 > 1 ? (bounds.I4_max - bounds.I4_min) / (n4 - 1) : 0.0;
    return {bounds.I1_min + i * d1, bounds.I4_min + j * d4};
  }
  std::vector<InvariantPoint> points() const {
    std::vector<InvariantPoint> pts;
    pts.reserve(static_cast<std::size_t>(size()));
    for (int i = 0; i < n1; ++i)
      for (int j = 0; j < n4; ++j) pts.push_back(point(i, j));
    return pts;
  }
};

/// The single zero-energy anchor at the undeformed configuration.
struct ReferencePoint {
  InvariantPoint point{3.0, 1.0};
  double value = 0.0;
};

inline std::vector<Protocol> generate_protocols(int ell, bool include_pure_shear,
                                                double max_stretch = 1.2, int steps = 20) {
  if (ell < 1 && !include_pure_shear)
    throw ContractError("generate_protocols: empty design (ell = 0 and no pure shear)");
  std::vector<Protocol> out;
  for (int j = 1; j <= ell; ++j) {
    Protocol p;
    p.kind = ProtocolKind::biaxial_ray;
    p.angle = j * std::numbers::pi / (2.0 * (ell + 1));
    p.steps = steps;
    p.max_stretch = max_stretch;
    out.push_back(p);
  }
  if (include_pure_shear) {
    Protocol px;
    px.kind = ProtocolKind::pure_shear_x;
    px.steps = steps;
    px.max_stretch = max_stretch;
    Protocol py = px;
    py.kind = ProtocolKind::pure_shear_y;
    out.push_back(px);
    out.push_back(py);
  }
  return out;
}

/// Evaluate the ground-truth model along every protocol and corrupt the
/// stresses with independent zero-mean Gaussian noise.
inline ObservationSet synthesize_observations(const std::vector<Protocol>& protocols,
                                              const AnalyticalModel& truth,
                                              double noise_variance = 0.02,
                                              std::uint64_t seed = 0) {
  if (noise_variance < 0.0)
    throw ContractError("synthesize_observations: noise variance must be nonnegative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, std::sqrt(noise_variance));
  ObservationSet set;
  int pid = 0;
  for (const auto& proto : protocols) {
    for (const auto& s : proto.stretch_path()) {
      const InvariantPoint p = invariants_from_stretches(s);
      const StressPair P = stresses_from_derivs(s, analytic_derivs(truth, p));
      ObservationRecord r;
      r.lambda_x = s.lambda_x;
      r.lambda_y = s.lambda_y;
      r.Pxx = P.Pxx + (noise_variance > 0.0 ? gauss(rng) : 0.0);
      r.Pyy = P.Pyy + (noise_variance > 0.0 ? gauss(rng) : 0.0);
      r.protocol_id = pid;
      set.records.push_back(r);
    }
    ++pid;
  }
  return set;
}

inline ConstraintGrid build_constraint_grid(const ObservationSet& obs, double padding = 0.1,
                                            int n1 = 20, int n4 = 20) {
  if (obs.empty()) throw ContractError("build_constraint_grid: empty observation set");
  DomainBox hull = obs.invariant_hull_box();
  if (hull.I1_max - hull.I1_min < 1e-12 && hull.I4_max - hull.I4_min < 1e-12)
    throw ContractError("build_constraint_grid: degenerate observation hull");
  ConstraintGrid g;
  g.bounds = hull.padded(padding);
  g.n1 = n1;
  g.n4 = n4;
  return g;
}

inline void save_observations_csv(const ObservationSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "protocol_id,lambda_x,lambda_y,Pxx,Pyy\n";
  out << std::setprecision(17);
  for (const auto& r : set.records)
    out << r.protocol_id << ',' << r.lambda_x << ',' << r.lambda_y << ',' << r.Pxx << ',' << r.Pyy
        << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline ObservationSet load_observations_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string line;
  long lineno = 0;
  if (!std::getline(in, line)) throw ParseError("empty file: " + path, 1);
  ++lineno;
  // tolerate a trailing \r from foreign line endings
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "protocol_id,lambda_x,lambda_y,Pxx,Pyy")
    throw ParseError("unexpected header: " + line, lineno);
  ObservationSet set;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 5) throw ParseError("expected 5 columns, got " +
                                             std::to_string(fields.size()), lineno);
    ObservationRecord r;
    try {
      std::size_t pos = 0;
      r.protocol_id = std::stoi(fields[0], &pos);
      if (pos != fields[0].size()) throw std::invalid_argument("trailing");
      r.lambda_x = std::stod(fields[1]);
      r.lambda_y = std::stod(fields[2]);
      r.Pxx = std::stod(fields[3]);
      r.Pyy = std::stod(fields[4]);
    } catch (const std::exception&) {
      throw ParseError("malformed numeric field in: " + line, lineno);
    }
    if (r.lambda_x <= 0.0 || r.lambda_y <= 0.0)
      throw ParseError("nonpositive stretch", lineno);
    set.records.push_back(r);
  }
  if (set.empty()) throw ParseError("no observation rows in " + path, lineno);
  return set;
}

}  // namespace gpsedf
