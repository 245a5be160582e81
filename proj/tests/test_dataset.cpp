#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gpsedf/dataset.hpp"
#include "test_util.hpp"

using namespace gpsedf;
using namespace gpsedf::testing;
using Catch::Approx;

namespace {

std::filesystem::path temp_file(const char* name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove(p);
  return p;
}

}  // namespace

TEST_CASE("protocol generation") {
  auto single = generate_protocols(1, false);
  REQUIRE(single.size() == 1);
  CHECK(single[0].angle == Approx(std::numbers::pi / 4.0));

  CHECK(generate_protocols(3, true).size() == 5);
  CHECK(generate_protocols(8, true).size() == 10);
  CHECK_THROWS_AS(generate_protocols(0, false), ContractError);
  CHECK(generate_protocols(0, true).size() == 2);

  // equi-spaced strictly inside (0, pi/2)
  auto rays = generate_protocols(8, false);
  for (std::size_t j = 0; j < rays.size(); ++j) {
    CHECK(rays[j].angle > 0.0);
    CHECK(rays[j].angle < std::numbers::pi / 2.0);
    CHECK(rays[j].angle == Approx((j + 1) * std::numbers::pi / 18.0));
  }
}

TEST_CASE("pure shear paths keep the thickness stretch at one") {
  for (auto kind : {ProtocolKind::pure_shear_x, ProtocolKind::pure_shear_y}) {
    Protocol p;
    p.kind = kind;
    for (const auto& s : p.stretch_path()) {
      CHECK(s.lambda_x * s.lambda_y == Approx(1.0).epsilon(1e-15));
      CHECK(std::max(s.lambda_x, s.lambda_y) <= 1.2 + 1e-12);
    }
  }
}

TEST_CASE("noise-free synthesis reproduces the analytic stresses") {
  const auto truth = AnalyticalModel::goh_reference();
  const auto protos = generate_protocols(3, true);
  const auto obs = synthesize_observations(protos, truth, 0.0, 99);
  CHECK(obs.size() == 5u * 20u);
  for (const auto& r : obs.records) {
    const auto p = r.invariants();
    const auto P = stresses_from_derivs({r.lambda_x, r.lambda_y}, analytic_derivs(truth, p));
    CHECK(std::abs(r.Pxx - P.Pxx) < 1e-12);
    CHECK(std::abs(r.Pyy - P.Pyy) < 1e-12);
  }
}

TEST_CASE("synthesis is deterministic per seed") {
  const auto truth = AnalyticalModel::goh_reference();
  const auto protos = generate_protocols(8, true);
  const auto a = synthesize_observations(protos, truth, 0.02, 7);
  const auto b = synthesize_observations(protos, truth, 0.02, 7);
  const auto c = synthesize_observations(protos, truth, 0.02, 8);
  REQUIRE(a.size() == b.size());
  bool all_equal = true, differs_from_c = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    all_equal = all_equal && a.records[i].Pxx == b.records[i].Pxx &&
                a.records[i].Pyy == b.records[i].Pyy;
    differs_from_c = differs_from_c || a.records[i].Pxx != c.records[i].Pxx;
  }
  CHECK(all_equal);
  CHECK(differs_from_c);
  CHECK_THROWS_AS(synthesize_observations(protos, truth, -0.1, 0), ContractError);
}

TEST_CASE("high-noise configuration stays usable") {
  const auto obs = synthesize_observations(generate_protocols(8, true),
                                           AnalyticalModel::goh_reference(), 0.2, 3);
  CHECK(obs.size() == 200u);
  for (const auto& r : obs.records) CHECK(std::isfinite(r.Pxx + r.Pyy));
}

TEST_CASE("invariants recomputed from stretches satisfy the biaxial relation") {
  const auto obs = synthesize_observations(generate_protocols(5, true),
                                           AnalyticalModel::goh_reference(), 0.02, 1);
  for (const auto& r : obs.records) {
    const auto p = r.invariants();
    const double lx2 = r.lambda_x * r.lambda_x, ly2 = r.lambda_y * r.lambda_y;
    CHECK(std::abs(p.I1 - (lx2 + ly2 + 1.0 / (lx2 * ly2))) < 1e-12);
    CHECK(std::abs(p.I4 - lx2) < 1e-12);
  }
}

TEST_CASE("constraint grid") {
  const auto obs = synthesize_observations(generate_protocols(8, true),
                                           AnalyticalModel::goh_reference(), 0.02, 7);
  const auto grid = build_constraint_grid(obs);
  CHECK(grid.size() == 400);
  const auto hull = obs.invariant_hull_box();
  CHECK(grid.bounds.I1_min == Approx(hull.I1_min - 0.1));
  CHECK(grid.bounds.I1_max == Approx(hull.I1_max + 0.1));
  CHECK(grid.bounds.I4_min == Approx(hull.I4_min - 0.1));
  CHECK(grid.bounds.I4_max == Approx(hull.I4_max + 0.1));
  // the paper's configuration pads below I1 = 3
  CHECK(grid.bounds.I1_min < 3.0);
  CHECK(grid.bounds.I4_min == Approx(0.6).margin(0.02));
  CHECK(grid.bounds.I4_max == Approx(1.54).margin(0.02));

  // lattice spacing uniform, corners included
  const auto pts = grid.points();
  REQUIRE(pts.size() == 400);
  const double d1 = (grid.bounds.I1_max - grid.bounds.I1_min) / 19.0;
  const double d4 = (grid.bounds.I4_max - grid.bounds.I4_min) / 19.0;
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 20; ++j) {
      const auto& p = pts[static_cast<std::size_t>(i * 20 + j)];
      CHECK(std::abs(p.I1 - (grid.bounds.I1_min + i * d1)) < 1e-12);
      CHECK(std::abs(p.I4 - (grid.bounds.I4_min + j * d4)) < 1e-12);
    }

  // explicit corner membership
  CHECK(pts.front().I1 == Approx(grid.bounds.I1_min));
  CHECK(pts.back().I1 == Approx(grid.bounds.I1_max));

  const auto zero_pad = build_constraint_grid(obs, 0.0);
  CHECK(zero_pad.bounds.I1_min == Approx(hull.I1_min));

  auto tiny = build_constraint_grid(obs, 0.1, 2, 2);
  CHECK(tiny.size() == 4);

  ObservationSet degenerate;
  degenerate.records.push_back({1.05, 1.05, 1.0, 1.0, 0});
  degenerate.records.push_back({1.05, 1.05, 1.1, 0.9, 0});
  CHECK_THROWS_AS(build_constraint_grid(degenerate), ContractError);
}

TEST_CASE("csv round trip") {
  const auto obs = synthesize_observations(generate_protocols(7, false),
                                           AnalyticalModel::goh_reference(), 0.02, 5);
  const auto path = temp_file("gpsedf_obs_test.csv");
  save_observations_csv(obs, path.string());
  const auto loaded = load_observations_csv(path.string());
  REQUIRE(loaded.size() == obs.size());
  for (std::size_t i = 0; i < obs.size(); ++i) {
    CHECK(loaded.records[i].protocol_id == obs.records[i].protocol_id);
    CHECK(loaded.records[i].lambda_x == obs.records[i].lambda_x);
    CHECK(loaded.records[i].lambda_y == obs.records[i].lambda_y);
    CHECK(loaded.records[i].Pxx == obs.records[i].Pxx);
    CHECK(loaded.records[i].Pyy == obs.records[i].Pyy);
  }
  // seven distinct protocol ids survive the trip
  int max_id = 0;
  for (const auto& r : loaded.records) max_id = std::max(max_id, r.protocol_id);
  CHECK(max_id == 6);
  std::filesystem::remove(path);
}

TEST_CASE("csv error paths") {
  const auto path = temp_file("gpsedf_bad.csv");

  std::ofstream(path) << "protocol_id,lambda_x,lambda_y,Pxx,Pyy\n";
  CHECK_THROWS_AS(load_observations_csv(path.string()), ParseError);

  std::ofstream(path) << "protocol_id,lambda_x,lambda_y,Pxx,Pyy\n0,1.1,1.0,2.5\n";
  CHECK_THROWS_AS(load_observations_csv(path.string()), ParseError);

  std::ofstream(path) << "protocol_id,lambda_x,lambda_y,Pxx,Pyy\n0,-1.1,1.0,2.5,1.0\n";
  CHECK_THROWS_AS(load_observations_csv(path.string()), ParseError);

  std::ofstream(path) << "protocol_id,lambda_x,lambda_y,Pxx,Pyy\n0,abc,1.0,2.5,1.0\n";
  try {
    load_observations_csv(path.string());
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }

  CHECK_THROWS_AS(load_observations_csv("/nonexistent/definitely_missing.csv"), IoError);
  std::filesystem::remove(path);
}
