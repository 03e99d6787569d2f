#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "symel/energies.hpp"
#include "symel/registry.hpp"

#include "oracles.hpp"

using namespace symel;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* stem) {
  fs::path p = fs::temp_directory_path() /
               (std::string(stem) + "-" + std::to_string(test::rng()()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// 3-vertex chain with two springs, a per-element rest length and one shared
// host stiffness. Used by several cases below.
struct SpringRig {
  EnergySystem sys;
  ArrayHandle x, l0;
  ConnHandle edges;
  double k = 10.0;
  EnergyHandle h;

  SpringRig() {
    x = sys.add_dof_array("x", 3, 3);
    l0 = sys.add_array("l0", 2, 1);
    edges = sys.add_connectivity("edges", 2);
    sys.set_elements(edges, {0, 1, 1, 2});
    auto xd = sys.array_data(x);
    const double pos[9] = {0, 0, 0, 1.5, 0, 0, 1.5, 2.0, 0};
    std::copy(pos, pos + 9, xd.begin());
    sys.array_data(l0)[0] = 1.0;
    sys.array_data(l0)[1] = 2.0;
    h = sys.add_energy("spring", edges, [&](EnergyBuilder& b) {
      const Vector xa = b.bind(x, 0);
      const Vector xb = b.bind(x, 1);
      const Scalar rest = b.bind_element_scalar(l0);
      const Scalar ks = b.param(k, "k");
      const Scalar d = (xa - xb).norm() - rest;
      b.set(0.5 * ks * d * d);
    });
  }
};

}  // namespace

TEST_CASE("dof sets are numbered in registration order") {
  EnergySystem sys;
  ArrayHandle a = sys.add_dof_array("a", 4, 3);
  ArrayHandle p = sys.add_array("params", 5, 2);
  ArrayHandle b = sys.add_dof_array("b", 3, 3);

  REQUIRE(sys.n_dofs() == 21);
  CHECK(sys.dof_set_of_array(a) == 0);
  CHECK(sys.dof_set_of_array(b) == 1);
  REQUIRE_THROWS_WITH(sys.dof_set_of_array(p),
                      Catch::Matchers::ContainsSubstring("not a dof array"));

  const DofLayout& lay = sys.layout();
  REQUIRE(lay.sets.size() == 2);
  CHECK(lay.sets[0].offset == 0);
  CHECK(lay.sets[1].offset == 12);
  CHECK(lay.global_index(1, 2, 1) == 12 + 2 * 3 + 1);
}

TEST_CASE("gather and scatter are mutual inverses over the layout") {
  EnergySystem sys;
  ArrayHandle a = sys.add_dof_array("a", 2, 3);
  (void)sys.add_array("noise", 3, 4);
  ArrayHandle b = sys.add_dof_array("b", 1, 3);
  for (std::size_t i = 0; i < 6; ++i) sys.array_data(a)[i] = double(i) + 0.5;
  for (std::size_t i = 0; i < 3; ++i) sys.array_data(b)[i] = 100.0 + double(i);

  std::vector<double> u(sys.n_dofs());
  sys.gather_dofs(u);
  CHECK(u[0] == 0.5);
  CHECK(u[5] == 5.5);
  CHECK(u[6] == 100.0);
  CHECK(u[8] == 102.0);

  for (auto& v : u) v *= 2.0;
  sys.scatter_dofs(u);
  CHECK(sys.array_data(a)[3] == 7.0);
  CHECK(sys.array_data(b)[2] == 204.0);

  std::vector<double> wrong(sys.n_dofs() + 1);
  REQUIRE_THROWS_AS(sys.gather_dofs(wrong), Error);
  REQUIRE_THROWS_AS(sys.scatter_dofs(wrong), Error);
}

TEST_CASE("pin mask") {
  EnergySystem sys;
  ArrayHandle a = sys.add_dof_array("a", 3, 3);
  ArrayHandle p = sys.add_array("p", 3, 3);
  sys.pin(a, 1);        // whole vertex
  sys.pin(a, 2, 0);     // single component

  const auto& mask = sys.pinned();
  REQUIRE(mask.size() == 9);
  const std::vector<std::uint8_t> want = {0, 0, 0, 1, 1, 1, 1, 0, 0};
  CHECK(std::vector<std::uint8_t>(mask.begin(), mask.end()) == want);

  REQUIRE_THROWS_AS(sys.pin(p, 0), Error);
  REQUIRE_THROWS_AS(sys.pin(a, 3), Error);
  REQUIRE_THROWS_AS(sys.pin(a, 0, 3), Error);

  sys.clear_pins();
  for (auto m : sys.pinned()) CHECK(m == 0);
}

TEST_CASE("energy inputs appear in bind order") {
  SpringRig rig;
  const EnergyDef& def = rig.sys.energy(rig.h);
  CHECK(def.n_inputs() == 8);  // 3+3 dof comps, rest length, stiffness
  CHECK(def.n_dofs() == 6);
  for (std::uint32_t i = 0; i < 6; ++i) CHECK(def.dof_slots[i] == i);

  std::vector<double> in(def.n_inputs());
  rig.sys.gather_element_inputs(def, 1, nullptr, in.data());
  CHECK(in[0] == 1.5);  // vertex 1
  CHECK(in[1] == 0.0);
  CHECK(in[3] == 1.5);  // vertex 2
  CHECK(in[4] == 2.0);
  CHECK(in[6] == 2.0);  // rest length of element 1
  CHECK(in[7] == 10.0);

  // params are read through the host pointer at gather time
  rig.k = -3.0;
  rig.sys.gather_element_inputs(def, 1, nullptr, in.data());
  CHECK(in[7] == -3.0);

  std::vector<std::size_t> dofs(def.n_dofs());
  rig.sys.element_dofs(def, 1, dofs);
  CHECK(dofs == std::vector<std::size_t>{3, 4, 5, 6, 7, 8});
}

TEST_CASE("kernel compilation shapes and differentiation counting") {
  SpringRig rig;
  const fs::path dir = fresh_dir("symel-bind");
  KernelCache cache(dir);

  rig.sys.refresh_topology();
  rig.sys.compile_kernels(cache);
  CHECK(rig.sys.differentiation_count() == 1);
  const EnergyDef& def = rig.sys.energy(rig.h);
  REQUIRE(def.deriv_kernel.valid());
  CHECK(def.deriv_kernel.n_inputs() == 8);
  CHECK(def.deriv_kernel.n_outputs() == 1 + 6 + 36);
  CHECK_FALSE(def.act_kernel.valid());
  CHECK_FALSE(def.guard_kernel.valid());

  // recompiling is a no-op
  rig.sys.compile_kernels(cache);
  CHECK(rig.sys.differentiation_count() == 1);
  CHECK(cache.stats().builds == 1);

  // an identical definition in a fresh system resolves from the cache
  {
    SpringRig again;
    again.sys.refresh_topology();
    again.sys.compile_kernels(cache);
    CHECK(again.sys.differentiation_count() == 0);
    CHECK(cache.stats().memory_hits >= 1);
  }
  {
    KernelCache disk(dir);
    SpringRig third;
    third.sys.refresh_topology();
    third.sys.compile_kernels(disk);
    CHECK(third.sys.differentiation_count() == 0);
    CHECK(disk.stats().builds == 0);
    CHECK(disk.stats().disk_hits == 1);
  }
  fs::remove_all(dir);
}

TEST_CASE("neo-Hookean tet kernel is one shared 26-input kernel") {
  EnergySystem sys;
  ArrayHandle x = sys.add_dof_array("x", 4, 3);
  ArrayHandle rest = sys.add_array("rest", 4, 3);
  ConnHandle tets = sys.add_connectivity("tets", 4);
  sys.set_elements(tets, {0, 1, 2, 3});
  const double corners[12] = {0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::copy(corners, corners + 12, sys.array_data(rest).begin());
  std::copy(corners, corners + 12, sys.array_data(x).begin());

  double mu = 1.0, lambda = 1.0;
  EnergyHandle h = add_solid_tet(sys, "elastic", tets, x, rest, Material::NH, mu, lambda);

  const EnergyDef& def = sys.energy(h);
  CHECK(def.n_inputs() == 26);  // 12 positions + 12 rest + mu + lambda
  CHECK(def.n_dofs() == 12);

  const fs::path dir = fresh_dir("symel-nh");
  KernelCache cache(dir);
  sys.refresh_topology();
  sys.compile_kernels(cache);
  CHECK(sys.energy(h).deriv_kernel.n_inputs() == 26);
  CHECK(sys.energy(h).deriv_kernel.n_outputs() == 157);  // 1 + 12 + 144
  fs::remove_all(dir);
}

TEST_CASE("activation and guard kernels") {
  EnergySystem sys;
  ArrayHandle x = sys.add_dof_array("x", 2, 3);
  ConnHandle verts = sys.add_connectivity("verts", 1);
  sys.set_elements(verts, {0, 1});
  double dh = 0.1, kc = 5.0;
  EnergyHandle h = sys.add_energy("floor", verts, [&](EnergyBuilder& b) {
    const Vector p = b.bind(x, 0);
    const Scalar dhat = b.param(dh, "d_hat");
    const Scalar k = b.param(kc, "k_c");
    const Scalar d = p[1];  // distance to the y=0 plane
    b.set(contact_barrier(d, dhat, k), d <= dhat);
    b.set_guard(d);
  });
  const EnergyDef& def = sys.energy(h);
  CHECK(def.has_activation());
  CHECK(def.has_guard());
  CHECK(def.act_kind == CmpKind::ge);

  const fs::path dir = fresh_dir("symel-act");
  KernelCache cache(dir);
  sys.refresh_topology();
  sys.compile_kernels(cache);
  REQUIRE(def.act_kernel.valid());
  REQUIRE(def.guard_kernel.valid());
  CHECK(def.act_kernel.n_outputs() == 1);
  CHECK(def.guard_kernel.n_outputs() == 1);
  // three distinct cache entries: derivatives, activation, guard
  CHECK(cache.stats().builds == 3);
  fs::remove_all(dir);
}

TEST_CASE("fixed summation") {
  EnergySystem sys;
  ArrayHandle x = sys.add_dof_array("x", 1, 3);
  ConnHandle verts = sys.add_connectivity("verts", 1);
  sys.set_elements(verts, {0});

  SECTION("summed expression must be set unchanged") {
    REQUIRE_THROWS_WITH(
        sys.add_energy("bad", verts,
                       [&](EnergyBuilder& b) {
                         const Vector p = b.bind(x, 0);
                         const Scalar s = b.sum_items({{1.0}, {2.0}}, [&](const Vector& it) {
                           return it[0] * p.squared_norm();
                         });
                         b.set(s * 2.0);
                       }),
        Catch::Matchers::ContainsSubstring("set unchanged"));
  }
  SECTION("only one summation per energy") {
    REQUIRE_THROWS_WITH(
        sys.add_energy("bad2", verts,
                       [&](EnergyBuilder& b) {
                         const Vector p = b.bind(x, 0);
                         (void)b.sum_items({{1.0}}, [&](const Vector& it) { return it[0] * p[0]; });
                         const Scalar s = b.sum_items({{1.0}}, [&](const Vector& it) {
                           return it[0] * p[1];
                         });
                         b.set(s);
                       }),
        Catch::Matchers::ContainsSubstring("already used"));
  }
  SECTION("ragged item tables are rejected") {
    REQUIRE_THROWS_WITH(
        sys.add_energy("bad3", verts,
                       [&](EnergyBuilder& b) {
                         (void)b.bind(x, 0);
                         const Scalar s = b.sum_items({{1.0, 2.0}, {3.0}},
                                                      [&](const Vector& it) { return it[0]; });
                         b.set(s);
                       }),
        Catch::Matchers::ContainsSubstring("ragged"));
  }
  SECTION("zero items warn and contribute nothing") {
    std::vector<std::string> warnings;
    sys.set_cache_warning_sink([&](const std::string& m) { warnings.push_back(m); });
    EnergyHandle h = sys.add_energy("empty", verts, [&](EnergyBuilder& b) {
      (void)b.bind(x, 0);
      const Scalar s = b.sum_items({}, [&](const Vector& it) { return it[0]; });
      b.set(s);
    });
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("zero items") != std::string::npos);
    CHECK(sys.energy(h).is_sum);
    CHECK(sys.energy(h).sum_items.empty());
  }
}

TEST_CASE("definition misuse is rejected") {
  EnergySystem sys;
  ArrayHandle x = sys.add_dof_array("x", 2, 3);
  ArrayHandle p = sys.add_array("p", 2, 2);
  ConnHandle c = sys.add_connectivity("pairs", 2);
  sys.set_elements(c, {0, 1});

  REQUIRE_THROWS_AS(sys.add_connectivity("bad", 0), Error);
  REQUIRE_THROWS_AS(sys.set_elements(c, {0, 1, 2}), Error);
  REQUIRE_THROWS_AS(sys.add_dof_array("x", 1, 3), Error);   // duplicate name
  REQUIRE_THROWS_AS(sys.add_array("x", 1, 1), Error);
  REQUIRE_THROWS_AS(sys.add_array("zero", 1, 0), Error);

  REQUIRE_THROWS_WITH(sys.add_energy("e1", c,
                                     [&](EnergyBuilder& b) {
                                       (void)b.bind(x, 2);  // arity is 2
                                       b.set(b.constant(0.0));
                                     }),
                      Catch::Matchers::ContainsSubstring("tuple slot"));
  REQUIRE_THROWS_WITH(sys.add_energy("e2", c,
                                     [&](EnergyBuilder& b) {
                                       (void)b.bind_element(x);  // dof array
                                       b.set(b.constant(0.0));
                                     }),
                      Catch::Matchers::ContainsSubstring("not allowed"));
  REQUIRE_THROWS_WITH(sys.add_energy("e3", c,
                                     [&](EnergyBuilder& b) {
                                       (void)b.bind_scalar(p, 0);  // 2 components
                                       b.set(b.constant(0.0));
                                     }),
                      Catch::Matchers::ContainsSubstring("components"));
  REQUIRE_THROWS_WITH(sys.add_energy("e4", c, [&](EnergyBuilder&) {}),
                      Catch::Matchers::ContainsSubstring("did not call set"));
  REQUIRE_THROWS_AS(sys.add_energy("e5", c,
                                   [&](EnergyBuilder& b) {
                                     b.set(b.constant(1.0));
                                     b.set(b.constant(2.0));
                                   }),
                    Error);

  ExprGraph foreign;
  Scalar alien = foreign.constant(1.0);
  REQUIRE_THROWS_WITH(sys.add_energy("e6", c, [&](EnergyBuilder& b) { b.set(alien); }),
                      Catch::Matchers::ContainsSubstring("foreign graph"));

  (void)sys.add_energy("ok", c, [&](EnergyBuilder& b) {
    const Vector xa = b.bind(x, 0);
    b.set(xa.squared_norm());
  });
  REQUIRE_THROWS_AS(sys.add_energy("ok", c,
                                   [&](EnergyBuilder& b) { b.set(b.constant(0.0)); }),
                    Error);  // duplicate energy name
}

TEST_CASE("topology refresh validates connectivity against arrays") {
  EnergySystem sys;
  ArrayHandle x = sys.add_dof_array("x", 3, 3);
  ConnHandle c = sys.add_connectivity("pairs", 2);
  sys.set_elements(c, {0, 1, 1, 7});  // item 7 does not exist
  (void)sys.add_energy("spring", c, [&](EnergyBuilder& b) {
    const Vector xa = b.bind(x, 0);
    const Vector xb = b.bind(x, 1);
    b.set((xa - xb).squared_norm());
  });
  REQUIRE_THROWS_WITH(sys.refresh_topology(),
                      Catch::Matchers::ContainsSubstring("spring") &&
                          Catch::Matchers::ContainsSubstring("element 1"));

  sys.set_elements(c, {0, 1, 1, 2});
  REQUIRE_NOTHROW(sys.refresh_topology());
  const std::uint64_t stamp = sys.topology_stamp();
  sys.set_elements(c, {0, 1});
  CHECK(sys.topology_dirty());
  sys.refresh_topology();
  CHECK(sys.topology_stamp() == stamp + 1);
}

TEST_CASE("per-element arrays must match the element count") {
  EnergySystem sys;
  ArrayHandle x = sys.add_dof_array("x", 3, 3);
  ArrayHandle l0 = sys.add_array("l0", 1, 1);  // 1 item for 2 elements
  ConnHandle c = sys.add_connectivity("pairs", 2);
  sys.set_elements(c, {0, 1, 1, 2});
  (void)sys.add_energy("spring", c, [&](EnergyBuilder& b) {
    const Vector xa = b.bind(x, 0);
    const Vector xb = b.bind(x, 1);
    const Scalar rest = b.bind_element_scalar(l0);
    b.set(((xa - xb).norm() - rest) * ((xa - xb).norm() - rest));
  });
  REQUIRE_THROWS_WITH(sys.refresh_topology(),
                      Catch::Matchers::ContainsSubstring("has 1 items for 2 elements"));
}
