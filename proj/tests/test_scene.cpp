#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "symel/mesh_io.hpp"
#include "symel/scene.hpp"

#include "oracles.hpp"

using namespace symel;
using Catch::Matchers::ContainsSubstring;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir() {
  static std::mt19937_64 gen(std::random_device{}());
  const fs::path p = fs::temp_directory_path() / ("symel_scene_" + std::to_string(gen()));
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// one free-falling tet whose base face starts inside the contact band
const char* kTinyTet =
    "4 1\n"
    "0 0.0005 0\n"
    "0.1 0.0005 0\n"
    "0.03 0.1005 0.03\n"
    "0 0.0005 0.1\n"
    "0 1 2 3\n";

fs::path make_drop_scene(int steps = 3) {
  const fs::path dir = fresh_dir();
  write_file(dir / "tet.tet", kTinyTet);
  std::ostringstream s;
  s << "{\n"
    << "  \"dt\": 0.01, \"steps\": " << steps << ", \"gravity\": [0, -9.8, 0],\n"
    << "  \"contact\": {\"k_c\": 1e3, \"d_hat\": 1e-3, \"mu_f\": 0.3, \"y_hat\": 1e-4},\n"
    << "  \"colliders\": [{\"type\": \"halfspace\", \"normal\": [0, 1, 0], \"offset\": 0}],\n"
    << "  \"systems\": [{\"name\": \"tet\", \"kind\": \"tet\", \"mesh\": \"tet.tet\",\n"
    << "    \"density\": 1000, \"material\": {\"model\": \"nh\", \"young\": 5e4, "
       "\"poisson\": 0.3}}]\n"
    << "}\n";
  write_file(dir / "drop.json", s.str());
  return dir / "drop.json";
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) fields.push_back(f);
    rows.push_back(std::move(fields));
  }
  return rows;
}

// columns that must reproduce bit-identically across runs (timings excluded)
void require_same_results(const fs::path& a, const fs::path& b) {
  const auto ra = read_csv(a / "log.csv");
  const auto rb = read_csv(b / "log.csv");
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i)
    for (std::size_t c : {0u, 1u, 2u, 3u, 7u}) {
      CAPTURE(i, c);
      CHECK(ra[i][c] == rb[i][c]);
    }
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().extension() != ".obj") continue;
    CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
  }
}

int run_cli(const std::string& args, const fs::path& stdout_file, const fs::path& stderr_file) {
  const std::string cmd = std::string(SYMEL_CLI_PATH) + " " + args + " > " +
                          stdout_file.string() + " 2> " + stderr_file.string();
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("tet mesh files load and validate") {
  const fs::path dir = fresh_dir();

  write_file(dir / "one.tet", kTinyTet);
  const TetMesh m = load_tet_mesh((dir / "one.tet").string());
  REQUIRE(m.n_vertices() == 4);
  REQUIRE(m.n_tets() == 1);
  CHECK(m.vertices[3] == 0.1);
  CHECK(m.tets == std::vector<std::int64_t>{0, 1, 2, 3});

  write_file(dir / "empty.tet", "");
  REQUIRE_THROWS_WITH(load_tet_mesh((dir / "empty.tet").string()),
                      ContainsSubstring("unexpected end of file"));

  write_file(dir / "hdr.tet", "zero tets\n");
  REQUIRE_THROWS_WITH(load_tet_mesh((dir / "hdr.tet").string()),
                      ContainsSubstring("hdr.tet:1: malformed header"));

  write_file(dir / "badv.tet", "4 1\n0 0 0\n1 0 zz\n");
  REQUIRE_THROWS_WITH(load_tet_mesh((dir / "badv.tet").string()),
                      ContainsSubstring("badv.tet:3: malformed vertex line"));

  write_file(dir / "trunc.tet", "4 1\n0 0 0\n1 0 0\n0 1 0\n");
  REQUIRE_THROWS_WITH(load_tet_mesh((dir / "trunc.tet").string()),
                      ContainsSubstring("unexpected end of file"));

  write_file(dir / "oob.tet", "4 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n0 1 2 7\n");
  REQUIRE_THROWS_WITH(load_tet_mesh((dir / "oob.tet").string()),
                      ContainsSubstring("oob.tet:6: vertex index out of range"));

  REQUIRE_THROWS_WITH(load_tet_mesh((dir / "missing.tet").string()),
                      ContainsSubstring("cannot open mesh file"));
}

TEST_CASE("inverted tets are rejected or reoriented per flag") {
  const fs::path dir = fresh_dir();
  // swapping the last two indices of a positive tet inverts it
  write_file(dir / "inv.tet", "4 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n0 1 3 2\n");

  REQUIRE_THROWS_WITH(load_tet_mesh((dir / "inv.tet").string()),
                      ContainsSubstring("inv.tet:6: inverted or degenerate tet"));

  const TetMesh m = load_tet_mesh((dir / "inv.tet").string(), true);
  CHECK(m.tets == std::vector<std::int64_t>{0, 1, 2, 3});
  CHECK(symel::detail::signed_tet_volume(m.vertices.data(), m.tets[0], m.tets[1], m.tets[2],
                                         m.tets[3]) > 0.0);

  // zero volume cannot be fixed by reorientation
  write_file(dir / "flat.tet", "4 1\n0 0 0\n1 0 0\n0 1 0\n1 1 0\n0 1 2 3\n");
  REQUIRE_THROWS_WITH(load_tet_mesh((dir / "flat.tet").string(), true),
                      ContainsSubstring("degenerate tet"));
}

TEST_CASE("tri mesh files load and validate") {
  const fs::path dir = fresh_dir();
  write_file(dir / "two.tri", "4 2\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n0 1 2\n0 2 3\n");
  const TriMesh m = load_tri_mesh((dir / "two.tri").string());
  REQUIRE(m.n_vertices() == 4);
  REQUIRE(m.n_tris() == 2);

  write_file(dir / "oob.tri", "3 1\n0 0 0\n1 0 0\n0 1 0\n0 1 5\n");
  REQUIRE_THROWS_WITH(load_tri_mesh((dir / "oob.tri").string()),
                      ContainsSubstring("oob.tri:5: vertex index out of range"));
}

TEST_CASE("surface faces are the boundary, outward oriented") {
  const std::vector<std::int64_t> one = {0, 1, 2, 3};
  const std::vector<double> verts = {0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::vector<std::int64_t> faces = surface_faces(one);
  REQUIRE(faces.size() == 12);
  const double cx = 0.25, cy = 0.25, cz = 0.25;
  for (std::size_t f = 0; f < 4; ++f) {
    const std::int64_t* t = &faces[3 * f];
    // outward: centroid sits on the negative side of each face
    double e1[3], e2[3], mid[3];
    for (int c = 0; c < 3; ++c) {
      e1[c] = verts[3 * t[1] + c] - verts[3 * t[0] + c];
      e2[c] = verts[3 * t[2] + c] - verts[3 * t[0] + c];
      mid[c] = (verts[3 * t[0] + c] + verts[3 * t[1] + c] + verts[3 * t[2] + c]) / 3.0;
    }
    const double n[3] = {e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2],
                         e1[0] * e2[1] - e1[1] * e2[0]};
    const double d = n[0] * (mid[0] - cx) + n[1] * (mid[1] - cy) + n[2] * (mid[2] - cz);
    CHECK(d > 0.0);
  }

  // two tets sharing a face: the shared face disappears
  const std::vector<std::int64_t> two = {0, 1, 2, 3, 0, 2, 1, 4};
  CHECK(surface_faces(two).size() == 18);
}

TEST_CASE("interior edge flaps pair wings across shared edges") {
  const std::vector<std::int64_t> single = {0, 1, 2};
  CHECK(interior_edge_flaps(single).empty());

  const std::vector<std::int64_t> two = {0, 1, 2, 0, 2, 3};
  const std::vector<std::int64_t> flaps = interior_edge_flaps(two);
  REQUIRE(flaps.size() == 4);
  CHECK(flaps[0] == 0);
  CHECK(flaps[1] == 2);
  const std::vector<std::int64_t> wings = {flaps[2], flaps[3]};
  CHECK((wings == std::vector<std::int64_t>{1, 3} || wings == std::vector<std::int64_t>{3, 1}));

  // a 2x2 quad grid has 8 triangles and 8 interior edges
  std::vector<std::int64_t> tris;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const std::int64_t a = i * 3 + j, b = (i + 1) * 3 + j, c = (i + 1) * 3 + j + 1,
                         d = i * 3 + j + 1;
      tris.insert(tris.end(), {a, b, c, a, c, d});
    }
  CHECK(interior_edge_flaps(tris).size() == 8 * 4);
}

TEST_CASE("obj output is one-based with full precision") {
  const fs::path dir = fresh_dir();
  const std::vector<double> verts = {0.1, 0.25, -1.0 / 3.0, 1, 2, 3};
  const std::vector<std::int64_t> faces = {0, 1, 0};
  write_obj((dir / "m.obj").string(), verts, faces);
  const std::string text = slurp(dir / "m.obj");
  CHECK_THAT(text, ContainsSubstring("v 0.10000000000000001 0.25 -0.33333333333333331\n"));
  CHECK_THAT(text, ContainsSubstring("v 1 2 3\n"));
  CHECK_THAT(text, ContainsSubstring("f 1 2 1\n"));
}

TEST_CASE("scene configs are validated strictly") {
  const fs::path dir = fresh_dir();
  write_file(dir / "tet.tet", kTinyTet);
  auto scene_with = [&](const std::string& body) {
    write_file(dir / "s.json", body);
    return Scene::from_file((dir / "s.json").string(), RunOptions{});
  };
  const std::string sys =
      "{\"name\": \"t\", \"kind\": \"tet\", \"mesh\": \"tet.tet\", \"density\": 1000, "
      "\"material\": {\"model\": \"nh\", \"mu\": 1e4, \"lambda\": 1e4}}";

  REQUIRE_THROWS_WITH(scene_with("{\"dt\": 0.01, \"steps\": 1, \"frobs\": 2, \"systems\": [" +
                                 sys + "]}"),
                      ContainsSubstring("scene: unknown key 'frobs'"));
  REQUIRE_THROWS_WITH(scene_with("{\"dt\": \"fast\", \"steps\": 1, \"systems\": [" + sys + "]}"),
                      ContainsSubstring("'dt' must be a number"));
  REQUIRE_THROWS_WITH(scene_with("{\"steps\": 1, \"systems\": [" + sys + "]}"),
                      ContainsSubstring("scene: missing required key 'dt'"));
  REQUIRE_THROWS_WITH(scene_with("{\"dt\": 0.01, \"systems\": [" + sys + "]}"),
                      ContainsSubstring("missing required key 'steps'"));
  REQUIRE_THROWS_WITH(scene_with("{\"dt\": 0.01, \"steps\": 1}"),
                      ContainsSubstring("at least one system"));
  REQUIRE_THROWS_WITH(scene_with("{\"dt\": 0.01, \"steps\": 1, \"gravity\": [0, 1], "
                                 "\"systems\": [" + sys + "]}"),
                      ContainsSubstring("array of 3 numbers"));
  REQUIRE_THROWS_WITH(
      scene_with("{\"dt\": 0.01, \"steps\": 1, \"backend\": \"cuda\", \"systems\": [" + sys +
                 "]}"),
      ContainsSubstring("unknown backend 'cuda'"));
  REQUIRE_THROWS_WITH(
      scene_with("{\"dt\": 0.01, \"steps\": 1, \"systems\": [{\"name\": \"t\", \"kind\": "
                 "\"tet\", \"mesh\": \"nope.tet\", \"density\": 1000, \"material\": "
                 "{\"model\": \"nh\", \"mu\": 1, \"lambda\": 1}}]}"),
      ContainsSubstring("cannot open mesh file"));
  REQUIRE_THROWS_WITH(
      scene_with("{\"dt\": 0.01, \"steps\": 1, \"systems\": [{\"name\": \"t\", \"kind\": "
                 "\"tet\", \"mesh\": \"tet.tet\", \"density\": 1000, \"material\": "
                 "{\"model\": \"jello\", \"mu\": 1, \"lambda\": 1}}]}"),
      ContainsSubstring("unknown material model 'jello'"));
  REQUIRE_THROWS_WITH(
      scene_with("{\"dt\": 0.01, \"steps\": 1, \"systems\": [{\"name\": \"t\", \"kind\": "
                 "\"tet\", \"mesh\": \"tet.tet\", \"density\": 1000, \"material\": "
                 "{\"model\": \"nh\", \"young\": 1e5, \"poisson\": 0.7}}]}"),
      ContainsSubstring("invalid young/poisson"));
  REQUIRE_THROWS_WITH(
      scene_with("{\"dt\": 0.01, \"steps\": 1, \"colliders\": [{\"type\": \"torus\"}], "
                 "\"systems\": [" + sys + "]}"),
      ContainsSubstring("unknown type 'torus'"));
  REQUIRE_THROWS_WITH(
      scene_with("{\"dt\": 0.01, \"steps\": 1, \"systems\": [{\"name\": \"t\", \"kind\": "
                 "\"tet\", \"mesh\": \"tet.tet\", \"density\": 1000, \"material\": "
                 "{\"model\": \"nh\", \"mu\": 1, \"lambda\": 1}, \"pins\": [{\"indices\": "
                 "[9]}]}]}"),
      ContainsSubstring("index out of range"));
  REQUIRE_THROWS_WITH(
      scene_with("{\"dt\": 0.01, \"steps\": 1, \"attachments\": [{\"system_a\": \"t\", "
                 "\"system_b\": \"ghost\", \"stiffness\": 1, \"match_radius\": 1}], "
                 "\"systems\": [" + sys + "]}"),
      ContainsSubstring("unknown system name"));
}

TEST_CASE("material sweep entries are validated up front") {
  const fs::path dir = fresh_dir();
  write_file(dir / "tet.tet", kTinyTet);
  write_file(dir / "s.json",
             "{\"dt\": 0.01, \"steps\": 1, \"material_sweep\": [\"nh\", \"mystery\"],"
             "\"systems\": [{\"name\": \"t\", \"kind\": \"tet\", \"mesh\": \"tet.tet\","
             "\"density\": 1000, \"material\": {\"model\": \"nh\", \"mu\": 1, \"lambda\": "
             "1}}]}");
  RunOptions opt;
  opt.scene_path = (dir / "s.json").string();
  opt.output_dir = (dir / "out").string();
  REQUIRE_THROWS_WITH(run_scene(opt), ContainsSubstring("unknown material model 'mystery'"));

  write_file(dir / "s.json",
             "{\"dt\": 0.01, \"steps\": 1, \"material_sweep\": [],"
             "\"systems\": [{\"name\": \"t\", \"kind\": \"tet\", \"mesh\": \"tet.tet\","
             "\"density\": 1000, \"material\": {\"model\": \"nh\", \"mu\": 1, \"lambda\": "
             "1}}]}");
  REQUIRE_THROWS_WITH(run_scene(opt), ContainsSubstring("non-empty array"));
}

TEST_CASE("a small drop scene steps and logs sensible rows") {
  RunOptions opt;
  opt.scene_path = make_drop_scene(3).string();
  opt.output_dir = (fresh_dir() / "out").string();
  const RunSummary summary = run_scene(opt);
  REQUIRE(summary.variants.size() == 1);
  const VariantResult& v = summary.variants[0];
  CHECK(v.name == "default");
  REQUIRE(v.rows.size() == 3);
  for (int s = 0; s < 3; ++s) {
    CHECK(v.rows[s].step == s + 1);
    CHECK(v.rows[s].converged);
    CHECK(v.rows[s].newton_iters >= 1);
    CHECK(v.rows[s].active_contacts >= 3);  // base face inside the band
    CHECK(std::isfinite(v.rows[s].E));
  }
  CHECK(summary.total_builds() > 0);
  CHECK(summary.total_differentiations() > 0);

  // frames 0..3 and the log exist; header is the documented column set
  const fs::path out(v.output_dir);
  for (int i = 0; i <= 3; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%05d.obj", i);
    CHECK(fs::exists(out / buf));
  }
  const auto csv = read_csv(out / "log.csv");
  REQUIRE(csv.size() == 4);
  CHECK(csv[0] == std::vector<std::string>{"step", "newton_iters", "E", "grad_inf", "t_eval_ms",
                                           "t_assemble_ms", "t_solve_ms", "active_contacts"});

  // the tet never crosses the floor
  auto scene = Scene::from_file(opt.scene_path, RunOptions{});
  for (int s = 0; s < 3; ++s) {
    scene->step();
    CHECK(scene->min_contact_distance() > 0.0);
  }
}

TEST_CASE("repeat runs and thread counts reproduce results bit for bit") {
  const fs::path scene = make_drop_scene(3);
  const fs::path base = fresh_dir();

  auto run = [&](const char* sub, int threads) {
    RunOptions opt;
    opt.scene_path = scene.string();
    opt.output_dir = (base / sub).string();
    opt.cache_dir = (base / "cache").string();
    opt.threads = threads;
    return run_scene(opt);
  };

  const RunSummary first = run("a", 1);
  CHECK(first.total_builds() > 0);
  const RunSummary second = run("b", 1);
  const RunSummary threaded = run("c", 8);

  require_same_results(base / "a", base / "b");
  require_same_results(base / "a", base / "c");

  // warm cache: nothing rebuilt, nothing re-differentiated
  CHECK(second.total_builds() == 0);
  CHECK(second.total_differentiations() == 0);
  CHECK(threaded.total_builds() == 0);
}

TEST_CASE("cli runs a scene and reports cache reuse") {
  const fs::path scene = make_drop_scene(2);
  const fs::path base = fresh_dir();
  const fs::path out = base / "out";
  const fs::path so = base / "stdout.txt", se = base / "stderr.txt";

  const std::string args = "run --scene " + scene.string() + " --output-dir " + out.string();
  REQUIRE(run_cli(args, so, se) == 0);
  CHECK(fs::exists(out / "frame_00000.obj"));
  CHECK(fs::exists(out / "frame_00002.obj"));
  CHECK(fs::exists(out / "log.csv"));
  CHECK_THAT(slurp(so), ContainsSubstring("kernels:"));

  // second process reuses the on-disk cache under <output-dir>/cache
  REQUIRE(run_cli(args, so, se) == 0);
  CHECK_THAT(slurp(so), ContainsSubstring("total kernels built: 0, total differentiations: 0"));
}

TEST_CASE("cli writes the requested hessian dump") {
  const fs::path scene = make_drop_scene(2);
  const fs::path base = fresh_dir();
  const fs::path out = base / "out";
  REQUIRE(run_cli("run --scene " + scene.string() + " --output-dir " + out.string() +
                      " --dump-hessian 2",
                  base / "o.txt", base / "e.txt") == 0);
  CHECK_FALSE(fs::exists(out / "hessian_00001.txt"));
  const std::string dump = slurp(out / "hessian_00002.txt");
  // single tet: 3x3 blocks, 4 block rows, dense 4x4 block pattern
  CHECK_THAT(dump, ContainsSubstring("3 4 16\n"));
  CHECK_THAT(dump, ContainsSubstring("(0 0)"));
  CHECK_THAT(dump, ContainsSubstring("(3 3)"));
}

TEST_CASE("cli exit codes distinguish config and runtime failures") {
  const fs::path base = fresh_dir();
  const fs::path so = base / "o.txt", se = base / "e.txt";

  SECTION("usage errors") {
    CHECK(run_cli("run --output-dir " + (base / "x").string(), so, se) == 1);
    CHECK(run_cli("frobnicate", so, se) == 1);
    CHECK(run_cli("--help", so, se) == 0);
  }

  SECTION("config error") {
    write_file(base / "bad.json", "{\"dt\": 0.01, \"steps\": 1, \"mystery\": true}");
    CHECK(run_cli("run --scene " + (base / "bad.json").string() + " --output-dir " +
                      (base / "out").string(),
                  so, se) == 1);
    CHECK_THAT(slurp(se), ContainsSubstring("config error:"));
    CHECK_THAT(slurp(se), ContainsSubstring("unknown key 'mystery'"));
  }

  SECTION("unparseable json is a config error") {
    write_file(base / "nojson.json", "{\"dt\": 0.01,");
    CHECK(run_cli("run --scene " + (base / "nojson.json").string() + " --output-dir " +
                      (base / "out").string(),
                  so, se) == 1);
    CHECK_THAT(slurp(se), ContainsSubstring("config error:"));
  }

  SECTION("runtime failure") {
    // a script drives the apex through the base face in one step; the
    // assembled state is inverted and the elastic energy blows up
    write_file(base / "tet.tet", kTinyTet);
    write_file(base / "crash.json",
               "{\"dt\": 0.01, \"steps\": 2, \"gravity\": [0, 0, 0],"
               "\"systems\": [{\"name\": \"t\", \"kind\": \"tet\", \"mesh\": \"tet.tet\","
               "\"density\": 1000, \"material\": {\"model\": \"nh\", \"young\": 1e5, "
               "\"poisson\": 0.3},"
               "\"scripts\": [{\"indices\": [2], \"type\": \"translate\", \"velocity\": "
               "[0, -100, 0]}]}]}");
    CHECK(run_cli("run --scene " + (base / "crash.json").string() + " --output-dir " +
                      (base / "out").string(),
                  so, se) == 2);
    CHECK_THAT(slurp(se), ContainsSubstring("error:"));
  }
}

TEST_CASE("cli material sweep writes one output tree per model") {
  const fs::path base = fresh_dir();
  write_file(base / "tet.tet", kTinyTet);
  write_file(base / "sweep.json",
             "{\"dt\": 0.01, \"steps\": 1, \"gravity\": [0, 0, 0],"
             "\"material_sweep\": [\"nh\", \"stvk\"],"
             "\"systems\": [{\"name\": \"t\", \"kind\": \"tet\", \"mesh\": \"tet.tet\","
             "\"density\": 1000, \"material\": {\"model\": \"nh\", \"young\": 1e5, "
             "\"poisson\": 0.3}}]}");
  const fs::path so = base / "o.txt";
  REQUIRE(run_cli("run --scene " + (base / "sweep.json").string() + " --output-dir " +
                      (base / "out").string(),
                  so, base / "e.txt") == 0);
  for (const char* model : {"nh", "stvk"}) {
    CHECK(fs::exists(base / "out" / model / "log.csv"));
    CHECK(fs::exists(base / "out" / model / "frame_00001.obj"));
  }
  const std::string log = slurp(so);
  CHECK_THAT(log, ContainsSubstring("nh: 1 steps"));
  CHECK_THAT(log, ContainsSubstring("stvk: 1 steps"));
}

TEST_CASE("shipped scenes construct") {
  const fs::path scenes(SYMEL_SCENES_DIR);
  for (const char* name :
       {"twist_cube_linear", "twist_cube_quadratic", "stretch_cube_materials", "cloth_drop",
        "box_incline_friction", "attach_two_systems", "armadillo_mini"}) {
    CAPTURE(name);
    auto scene = Scene::from_file((scenes / (std::string(name) + ".json")).string(),
                                  RunOptions{});
    CHECK(scene->config_steps() > 0);
    CHECK(scene->n_bodies() >= 1);
  }

  // quadratic bodies carry extra edge nodes that stay out of the OBJ output
  auto quad = Scene::from_file((scenes / "twist_cube_quadratic.json").string(), RunOptions{});
  CHECK(quad->body(0).order == 2);
  CHECK(quad->body(0).n_mesh_verts == 27);
  CHECK(quad->body(0).n_items > 27);
}

TEST_CASE("cloth scene runs with bending and strain limit") {
  const fs::path scenes(SYMEL_SCENES_DIR);
  auto scene = Scene::from_file((scenes / "cloth_drop.json").string(), RunOptions{});
  for (int s = 0; s < 2; ++s) {
    const StepRow row = scene->step();
    CHECK(row.converged);
    CHECK(std::isfinite(row.E));
  }
  // membrane + bending + strain limit + inertia + contact all registered
  CHECK(scene->system().n_energies() == 5);
}

TEST_CASE("attachment scene couples the two bodies") {
  const fs::path scenes(SYMEL_SCENES_DIR);
  auto scene = Scene::from_file((scenes / "attach_two_systems.json").string(), RunOptions{});
  REQUIRE(scene->n_bodies() == 2);
  const auto& lower = scene->body(1);
  // node (0,2,0) of the lower cube sits on the attached face
  const std::size_t attached = 6;
  const double y0 = scene->system().array_data(lower.x)[3 * attached + 1];
  for (int s = 0; s < 2; ++s) CHECK(scene->step().converged);
  const double y1 = scene->system().array_data(lower.x)[3 * attached + 1];
  // backward-euler free fall over two steps drops dt^2 g (1 + 2); the
  // attachment must hold the face well short of that
  const double free_fall = 9.8 * 0.01 * 0.01 * 3.0;
  CHECK(y1 < y0);
  CHECK(y0 - y1 < 0.5 * free_fall);
}
