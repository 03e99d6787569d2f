#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "symel/assembly.hpp"
#include "symel/cache.hpp"
#include "symel/energies.hpp"
#include "symel/mesh_io.hpp"
#include "symel/optimizer.hpp"

namespace symel {

// Configuration problems exit differently from runtime failures.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct RunOptions {
  std::string scene_path;
  std::string output_dir;
  int steps = -1;             // -1: from scene file
  double dt = 0.0;            // 0: from scene file
  std::string backend;        // empty: from scene file (default interp)
  int threads = 0;            // 0: from scene file (default 1)
  int lanes = 0;              // 0: from scene file (default 4)
  std::string cache_dir;      // empty: from scene file or <output_dir>/cache
  bool no_cache = false;
  int dump_hessian = -1;      // step index whose start-of-step Hessian is dumped
};

struct StepRow {
  int step = 0;
  int newton_iters = 0;
  double E = 0.0;
  double grad_inf = 0.0;
  double t_eval_ms = 0.0;
  double t_assemble_ms = 0.0;
  double t_solve_ms = 0.0;
  std::size_t active_contacts = 0;
  bool converged = false;
};

namespace detail {

using Json = nlohmann::json;

inline Json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scene file: " + path.string());
  try {
    return Json::parse(in);
  } catch (const std::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void check_keys(const Json& o, const char* where,
                       std::initializer_list<const char*> allowed) {
  if (!o.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [key, value] : o.items()) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
  }
}

inline double json_num(const Json& o, const char* where, const char* key) {
  if (!o.contains(key))
    throw ConfigError(std::string(where) + ": missing required key '" + key + "'");
  const Json& v = o.at(key);
  if (!v.is_number()) throw ConfigError(std::string(where) + ": '" + key + "' must be a number");
  return v.get<double>();
}

inline double json_num_or(const Json& o, const char* where, const char* key, double def) {
  if (!o.contains(key)) return def;
  const Json& v = o.at(key);
  if (!v.is_number()) throw ConfigError(std::string(where) + ": '" + key + "' must be a number");
  return v.get<double>();
}

inline int json_int_or(const Json& o, const char* where, const char* key, int def) {
  if (!o.contains(key)) return def;
  const Json& v = o.at(key);
  if (!v.is_number_integer())
    throw ConfigError(std::string(where) + ": '" + key + "' must be an integer");
  return v.get<int>();
}

inline bool json_bool_or(const Json& o, const char* where, const char* key, bool def) {
  if (!o.contains(key)) return def;
  const Json& v = o.at(key);
  if (!v.is_boolean()) throw ConfigError(std::string(where) + ": '" + key + "' must be a bool");
  return v.get<bool>();
}

inline std::string json_str(const Json& o, const char* where, const char* key) {
  if (!o.contains(key))
    throw ConfigError(std::string(where) + ": missing required key '" + key + "'");
  const Json& v = o.at(key);
  if (!v.is_string()) throw ConfigError(std::string(where) + ": '" + key + "' must be a string");
  return v.get<std::string>();
}

inline std::array<double, 3> json_vec3(const Json& v, const char* where) {
  if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() ||
      !v[2].is_number())
    throw ConfigError(std::string(where) + ": expected an array of 3 numbers");
  return {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
}

inline std::array<double, 3> json_vec3_or(const Json& o, const char* where, const char* key,
                                          std::array<double, 3> def) {
  if (!o.contains(key)) return def;
  return json_vec3(o.at(key), where);
}

inline Material material_from_string(const std::string& s, const char* where) {
  if (s == "nh") return Material::NH;
  if (s == "stable_nh") return Material::StableNH;
  if (s == "stvk") return Material::StVK;
  if (s == "arap") return Material::ARAP;
  if (s == "fixed_corot") return Material::FixedCorot;
  throw ConfigError(std::string(where) + ": unknown material model '" + s + "'");
}

inline const char* material_name(Material m) {
  switch (m) {
    case Material::NH: return "nh";
    case Material::StableNH: return "stable_nh";
    case Material::StVK: return "stvk";
    case Material::ARAP: return "arap";
    case Material::FixedCorot: return "fixed_corot";
  }
  return "?";
}

}  // namespace detail

struct Collider {
  enum class Kind { halfspace, sphere, capped_cylinder };
  Kind kind = Kind::halfspace;
  std::array<double, 3> normal = {0, 1, 0};  // halfspace
  double offset = 0.0;
  std::array<double, 3> a{};  // sphere center / cylinder endpoint
  std::array<double, 3> b{};  // cylinder endpoint
  double radius = 0.0;
  std::array<double, 3> velocity{};

  double distance(const std::array<double, 3>& p) const {
    switch (kind) {
      case Kind::halfspace:
        return normal[0] * p[0] + normal[1] * p[1] + normal[2] * p[2] - offset;
      case Kind::sphere: {
        const double dx = p[0] - a[0], dy = p[1] - a[1], dz = p[2] - a[2];
        return std::sqrt(dx * dx + dy * dy + dz * dz) - radius;
      }
      case Kind::capped_cylinder:
        return host_sdf_capped_cylinder(&a, &b, &radius)(p);
    }
    return 0.0;
  }

  // Symbolic distance with runtime transform parameters bound to this
  // collider's fields; the kernel follows the collider as it moves.
  Scalar bind_distance(EnergyBuilder& bld, const Vector& p) const {
    switch (kind) {
      case Kind::halfspace:
        return sdf_halfspace(p, normal, offset);
      case Kind::sphere: {
        Vector c(bld.graph());
        for (int i = 0; i < 3; ++i) c.push_back(bld.param(a[i], "collider_c"));
        return sdf_sphere(p, c, bld.param(radius, "collider_r"));
      }
      case Kind::capped_cylinder: {
        Vector ca(bld.graph()), cb(bld.graph());
        for (int i = 0; i < 3; ++i) ca.push_back(bld.param(a[i], "collider_a"));
        for (int i = 0; i < 3; ++i) cb.push_back(bld.param(b[i], "collider_b"));
        return sdf_capped_cylinder(p, ca, cb, bld.param(radius, "collider_r"));
      }
    }
    throw Error("collider: unknown kind");
  }

  void advance(double dt) {
    for (int i = 0; i < 3; ++i) {
      a[i] += velocity[i] * dt;
      b[i] += velocity[i] * dt;
    }
  }
};

struct MotionScript {
  enum class Type { fixed, twist, translate };
  Type type = Type::fixed;
  std::array<double, 3> axis = {0, 0, 1};
  std::array<double, 3> origin{};
  double rad_per_s = 0.0;
  std::array<double, 3> velocity{};

  std::array<double, 3> position(const std::array<double, 3>& rest, double t) const {
    switch (type) {
      case Type::fixed:
        return rest;
      case Type::translate:
        return {rest[0] + velocity[0] * t, rest[1] + velocity[1] * t,
                rest[2] + velocity[2] * t};
      case Type::twist: {
        const double ang = rad_per_s * t;
        const double c = std::cos(ang), s = std::sin(ang);
        const std::array<double, 3> u = axis;
        std::array<double, 3> r = {rest[0] - origin[0], rest[1] - origin[1],
                                   rest[2] - origin[2]};
        const double ur = u[0] * r[0] + u[1] * r[1] + u[2] * r[2];
        std::array<double, 3> cross = {u[1] * r[2] - u[2] * r[1], u[2] * r[0] - u[0] * r[2],
                                       u[0] * r[1] - u[1] * r[0]};
        std::array<double, 3> out;
        for (int i = 0; i < 3; ++i)
          out[i] = origin[i] + r[i] * c + cross[i] * s + u[i] * ur * (1.0 - c);
        return out;
      }
    }
    return rest;
  }
};

struct ContactConfig {
  double k_c = 1e4;
  double d_hat = 1e-3;
  double mu_f = 0.0;
  double y_hat = 1e-4;
};

class Scene {
 public:
  struct BoundarySet {
    std::vector<std::size_t> nodes;
    MotionScript motion;
    bool scripted = false;  // fixed pins are not rewritten each step
  };

  struct ContactSet {
    std::size_t collider = 0;
    ArrayHandle tangent, normal_force;  // friction lag state (invalid if no friction)
    std::size_t contact_energy = 0;
    bool has_friction = false;
  };

  struct BodyState {
    std::string name;
    bool is_cloth = false;
    int order = 1;
    std::size_t n_mesh_verts = 0;  // vertices written to OBJ frames
    std::size_t n_items = 0;       // dof items (includes quadratic edge nodes)
    std::vector<std::int64_t> surface;
    ArrayHandle x, x_prev, v, mass, rest;
    ConnHandle verts;  // identity connectivity over items
    ConnHandle elems;
    MaterialParams material;
    double bending_k = 0.0;
    StrainLimitParams slim;
    bool has_strain_limit = false;
    bool contact_enabled = true;
    ArrayHandle dm2inv, area, bendQ, rot;
    ConnHandle flaps;
    std::vector<double> dm_inv_host;  // 3x3 rest inverses for the rotation hook
    std::vector<BoundarySet> boundaries;
    std::vector<ContactSet> contacts;
  };

  Scene(const Scene&) = delete;
  Scene& operator=(const Scene&) = delete;

  static std::unique_ptr<Scene> from_file(const std::string& path, const RunOptions& opt,
                                          const std::string& model_override = "") {
    const std::filesystem::path p(path);
    detail::Json config = detail::load_json_file(p);
    return std::unique_ptr<Scene>(
        new Scene(config, p.parent_path(), opt, model_override));
  }

  int config_steps() const { return steps_; }
  double dt() const { return dt_; }
  EnergySystem& system() { return sys_; }
  Assembler& assembler() { return *asm_; }
  BackwardEuler& integrator() { return *be_; }
  KernelCache& cache() { return cache_; }
  const ContactConfig& contact() const { return contact_; }
  const NewtonOptions& newton_options() const { return newton_; }
  std::size_t n_bodies() const { return bodies_.size(); }
  const BodyState& body(std::size_t i) const { return bodies_.at(i); }
  const std::deque<Collider>& colliders() const { return colliders_; }
  const SolveReport& last_report() const { return last_report_; }

  StepRow step(const std::string& hessian_dump_path = {}) {
    if (!hessian_dump_path.empty()) {
      asm_->assemble();
      std::ofstream out(hessian_dump_path);
      if (!out) throw Error("cannot open dump file: " + hessian_dump_path);
      asm_->hessian().dump(out);
    }
    asm_->reset_timings();
    last_report_ = be_->step(*asm_, newton_);
    if (last_report_.line_search_failed)
      throw Error("step " + std::to_string(step_index_ + 1) + ": line search failed");
    StepRow row;
    row.step = ++step_index_;
    row.newton_iters = last_report_.newton_iters;
    row.E = last_report_.E;
    row.grad_inf = last_report_.grad_inf;
    row.t_eval_ms = asm_->timings().eval_ms;
    row.t_assemble_ms = asm_->timings().assemble_ms;
    row.t_solve_ms = last_report_.solve_ms;
    row.converged = last_report_.converged;
    for (const BodyState& body : bodies_)
      for (const ContactSet& cs : body.contacts)
        row.active_contacts += asm_->active_count(cs.contact_energy);
    return row;
  }

  void write_frame(const std::filesystem::path& dir, int index) const {
    std::vector<double> verts;
    std::vector<std::int64_t> faces;
    for (const BodyState& body : bodies_) {
      const std::int64_t base = static_cast<std::int64_t>(verts.size() / 3);
      std::span<const double> x = sys_.array_data(body.x);
      verts.insert(verts.end(), x.begin(),
                   x.begin() + static_cast<std::ptrdiff_t>(body.n_mesh_verts * 3));
      for (std::int64_t f : body.surface) faces.push_back(f + base);
    }
    char name[32];
    std::snprintf(name, sizeof name, "frame_%05d.obj", index);
    write_obj((dir / name).string(), verts, faces);
  }

  // Distance of every contact candidate against every collider; the barrier
  // guarantees this stays positive at accepted states.
  double min_contact_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (const BodyState& body : bodies_) {
      if (body.contacts.empty()) continue;
      std::span<const double> x = sys_.array_data(body.x);
      for (const ContactSet& cs : body.contacts) {
        const Collider& c = colliders_[cs.collider];
        for (std::size_t i = 0; i < body.n_items; ++i)
          best = std::min(best, c.distance({x[3 * i], x[3 * i + 1], x[3 * i + 2]}));
      }
    }
    return best;
  }

 private:
  Scene(const detail::Json& config, const std::filesystem::path& base_dir,
        const RunOptions& opt, const std::string& model_override) {
    using detail::Json;
    detail::check_keys(config, "scene",
                       {"dt", "steps", "gravity", "contact", "solver", "material_sweep",
                        "systems", "colliders", "attachments", "threads", "lanes", "backend",
                        "cache_dir"});
    dt_ = opt.dt > 0.0 ? opt.dt : detail::json_num(config, "scene", "dt");
    if (!(dt_ > 0.0)) throw ConfigError("scene: dt must be positive");
    steps_ = opt.steps >= 0 ? opt.steps : detail::json_int_or(config, "scene", "steps", -1);
    if (steps_ < 0) throw ConfigError("scene: missing required key 'steps'");
    gravity_ = detail::json_vec3_or(config, "scene", "gravity", {0, 0, 0});

    if (config.contains("contact")) {
      const Json& c = config.at("contact");
      detail::check_keys(c, "contact", {"k_c", "d_hat", "mu_f", "y_hat"});
      contact_.k_c = detail::json_num_or(c, "contact", "k_c", contact_.k_c);
      contact_.d_hat = detail::json_num_or(c, "contact", "d_hat", contact_.d_hat);
      contact_.mu_f = detail::json_num_or(c, "contact", "mu_f", contact_.mu_f);
      contact_.y_hat = detail::json_num_or(c, "contact", "y_hat", contact_.y_hat);
      if (!(contact_.k_c >= 0.0) || !(contact_.d_hat > 0.0) || !(contact_.mu_f >= 0.0) ||
          !(contact_.y_hat > 0.0))
        throw ConfigError("contact: invalid parameter values");
    }

    if (config.contains("solver")) {
      const Json& s = config.at("solver");
      detail::check_keys(s, "solver",
                         {"max_iters", "grad_tol", "cg_rel_tol", "cg_max_iters",
                          "scale_tol_by_dofs"});
      newton_.max_iters = detail::json_int_or(s, "solver", "max_iters", newton_.max_iters);
      newton_.grad_tol = detail::json_num_or(s, "solver", "grad_tol", newton_.grad_tol);
      newton_.cg_rel_tol = detail::json_num_or(s, "solver", "cg_rel_tol", newton_.cg_rel_tol);
      newton_.cg_max_iters =
          detail::json_int_or(s, "solver", "cg_max_iters", newton_.cg_max_iters);
      newton_.scale_tol_by_dofs =
          detail::json_bool_or(s, "solver", "scale_tol_by_dofs", newton_.scale_tol_by_dofs);
    }

    const int threads =
        opt.threads > 0 ? opt.threads : detail::json_int_or(config, "scene", "threads", 1);
    const int lanes =
        opt.lanes > 0 ? opt.lanes : detail::json_int_or(config, "scene", "lanes", 4);
    std::string backend_name = !opt.backend.empty()
                                   ? opt.backend
                                   : (config.contains("backend")
                                          ? detail::json_str(config, "scene", "backend")
                                          : "interp");
    KernelBackend backend;
    if (backend_name == "interp")
      backend = KernelBackend::interp;
    else if (backend_name == "source")
      backend = KernelBackend::source;
    else
      throw ConfigError("scene: unknown backend '" + backend_name + "'");

    if (!opt.no_cache) {
      std::filesystem::path cache_dir;
      if (!opt.cache_dir.empty())
        cache_dir = opt.cache_dir;
      else if (config.contains("cache_dir"))
        cache_dir = base_dir / detail::json_str(config, "scene", "cache_dir");
      else if (!opt.output_dir.empty())
        cache_dir = std::filesystem::path(opt.output_dir) / "cache";
      if (!cache_dir.empty()) cache_.set_dir(cache_dir);
    }
    cache_.set_backend(backend);

    if (config.contains("colliders")) {
      const Json& cs = config.at("colliders");
      if (!cs.is_array()) throw ConfigError("colliders: expected an array");
      for (const Json& c : cs) colliders_.push_back(parse_collider(c));
    }

    if (!config.contains("systems") || !config.at("systems").is_array() ||
        config.at("systems").empty())
      throw ConfigError("scene: at least one system is required");
    for (const Json& s : config.at("systems")) build_system(s, base_dir, model_override);

    if (config.contains("attachments")) {
      const Json& as = config.at("attachments");
      if (!as.is_array()) throw ConfigError("attachments: expected an array");
      for (const Json& a : as) build_attachment(a);
    }

    be_ = std::make_unique<BackwardEuler>(dt_);
    for (BodyState& b : bodies_) be_->add_body(b.x, b.x_prev, b.v);
    be_->set_pre_step([this](double t_next) { pre_step(t_next); });

    asm_ = std::make_unique<Assembler>(sys_, cache_, threads, lanes);
  }

  Collider parse_collider(const detail::Json& c) {
    Collider out;
    const std::string type = detail::json_str(c, "collider", "type");
    if (type == "halfspace") {
      detail::check_keys(c, "collider", {"type", "normal", "offset"});
      out.kind = Collider::Kind::halfspace;
      out.normal = detail::json_vec3_or(c, "collider", "normal", {0, 1, 0});
      const double len = std::sqrt(out.normal[0] * out.normal[0] +
                                   out.normal[1] * out.normal[1] +
                                   out.normal[2] * out.normal[2]);
      if (!(len > 0)) throw ConfigError("collider: zero normal");
      for (auto& v : out.normal) v /= len;
      out.offset = detail::json_num_or(c, "collider", "offset", 0.0);
    } else if (type == "sphere") {
      detail::check_keys(c, "collider", {"type", "center", "radius", "velocity"});
      out.kind = Collider::Kind::sphere;
      out.a = detail::json_vec3(c.at("center"), "collider");
      out.radius = detail::json_num(c, "collider", "radius");
      out.velocity = detail::json_vec3_or(c, "collider", "velocity", {0, 0, 0});
    } else if (type == "capped_cylinder") {
      detail::check_keys(c, "collider", {"type", "a", "b", "radius", "velocity"});
      out.kind = Collider::Kind::capped_cylinder;
      out.a = detail::json_vec3(c.at("a"), "collider");
      out.b = detail::json_vec3(c.at("b"), "collider");
      out.radius = detail::json_num(c, "collider", "radius");
      out.velocity = detail::json_vec3_or(c, "collider", "velocity", {0, 0, 0});
    } else {
      throw ConfigError("collider: unknown type '" + type + "'");
    }
    if (out.kind != Collider::Kind::halfspace && !(out.radius > 0))
      throw ConfigError("collider: radius must be positive");
    return out;
  }

  MaterialParams parse_material(const detail::Json& s, const std::string& model_override) {
    if (!s.contains("material")) throw ConfigError("system: missing required key 'material'");
    const detail::Json& m = s.at("material");
    detail::check_keys(m, "material", {"model", "young", "poisson", "mu", "lambda"});
    MaterialParams out;
    const std::string model =
        !model_override.empty() ? model_override : detail::json_str(m, "material", "model");
    out.model = detail::material_from_string(model, "material");
    if (m.contains("young") || m.contains("poisson")) {
      const double young = detail::json_num(m, "material", "young");
      const double poisson = detail::json_num(m, "material", "poisson");
      if (!(young > 0) || !(poisson > -1.0 && poisson < 0.5))
        throw ConfigError("material: invalid young/poisson");
      const MaterialParams lame = lame_from_young_poisson(young, poisson, out.model);
      out.mu = lame.mu;
      out.lambda = lame.lambda;
    } else {
      out.mu = detail::json_num(m, "material", "mu");
      out.lambda = detail::json_num(m, "material", "lambda");
    }
    detail::check_material(out);
    return out;
  }

  std::vector<std::size_t> resolve_selector(const detail::Json& sel, const char* where,
                                            const std::vector<double>& pos) {
    std::vector<std::size_t> out;
    const std::size_t n = pos.size() / 3;
    if (sel.contains("indices")) {
      for (const auto& v : sel.at("indices")) {
        if (!v.is_number_integer()) throw ConfigError(std::string(where) + ": bad index");
        const std::int64_t i = v.get<std::int64_t>();
        if (i < 0 || std::size_t(i) >= n)
          throw ConfigError(std::string(where) + ": index out of range");
        out.push_back(std::size_t(i));
      }
      return out;
    }
    if (sel.contains("box")) {
      const detail::Json& bx = sel.at("box");
      if (!bx.is_array() || bx.size() != 2)
        throw ConfigError(std::string(where) + ": box needs [min, max]");
      const auto lo = detail::json_vec3(bx[0], where);
      const auto hi = detail::json_vec3(bx[1], where);
      for (std::size_t i = 0; i < n; ++i) {
        bool inside = true;
        for (int c = 0; c < 3; ++c)
          inside = inside && pos[3 * i + c] >= lo[c] && pos[3 * i + c] <= hi[c];
        if (inside) out.push_back(i);
      }
      return out;
    }
    throw ConfigError(std::string(where) + ": selector needs 'box' or 'indices'");
  }

  void build_system(const detail::Json& s, const std::filesystem::path& base_dir,
                    const std::string& model_override) {
    detail::check_keys(s, "system",
                       {"name", "kind", "mesh", "order", "reorient", "translate", "density",
                        "material", "bending_stiffness", "strain_limit", "contact", "pins",
                        "scripts"});
    bodies_.emplace_back();
    BodyState& body = bodies_.back();
    body.name = detail::json_str(s, "system", "name");
    const std::string kind = detail::json_str(s, "system", "kind");
    const std::filesystem::path mesh_path =
        base_dir / detail::json_str(s, "system", "mesh");
    const auto translate = detail::json_vec3_or(s, "system", "translate", {0, 0, 0});
    const double density = detail::json_num(s, "system", "density");
    if (!(density > 0)) throw ConfigError("system: density must be positive");
    body.material = parse_material(s, model_override);
    body.contact_enabled = detail::json_bool_or(s, "system", "contact", true);
    body.order = detail::json_int_or(s, "system", "order", 1);

    std::vector<double> pos;
    std::vector<std::int64_t> elems;
    std::vector<double> mass;

    if (kind == "tet") {
      if (body.order != 1 && body.order != 2)
        throw ConfigError("system: order must be 1 or 2");
      TetMesh mesh;
      try {
        mesh = load_tet_mesh(mesh_path.string(),
                             detail::json_bool_or(s, "system", "reorient", false));
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
      pos = mesh.vertices;
      body.n_mesh_verts = mesh.n_vertices();
      body.surface = surface_faces(mesh.tets);
      if (body.order == 2) {
        elems = expand_quadratic(mesh.tets, pos);
      } else {
        elems = mesh.tets;
      }
      for (std::size_t i = 0; i < pos.size(); i += 3)
        for (int c = 0; c < 3; ++c) pos[i + c] += translate[c];
      // lumped masses: element mass spread uniformly over its nodes
      mass.assign(pos.size() / 3, 0.0);
      const std::size_t npe = body.order == 2 ? 10 : 4;
      for (std::size_t e = 0; e * npe < elems.size(); ++e) {
        const std::int64_t* t = &elems[e * npe];
        const double vol = detail::signed_tet_volume(pos.data(), t[0], t[1], t[2], t[3]);
        if (!(vol > 0)) throw ConfigError("system '" + body.name + "': degenerate element");
        for (std::size_t k = 0; k < npe; ++k) mass[std::size_t(t[k])] += density * vol / double(npe);
      }
      body.is_cloth = false;
    } else if (kind == "cloth") {
      TriMesh mesh;
      try {
        mesh = load_tri_mesh(mesh_path.string());
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
      pos = mesh.vertices;
      for (std::size_t i = 0; i < pos.size(); i += 3)
        for (int c = 0; c < 3; ++c) pos[i + c] += translate[c];
      elems = mesh.tris;
      body.n_mesh_verts = mesh.n_vertices();
      body.surface = mesh.tris;
      body.is_cloth = true;
      mass.assign(pos.size() / 3, 0.0);
    } else {
      throw ConfigError("system: unknown kind '" + kind + "'");
    }

    body.n_items = pos.size() / 3;
    const std::string& nm = body.name;
    body.x = sys_.add_dof_array(nm + "/x", body.n_items, 3);
    body.x_prev = sys_.add_array(nm + "/x_prev", body.n_items, 3);
    body.v = sys_.add_array(nm + "/v", body.n_items, 3);
    body.mass = sys_.add_array(nm + "/mass", body.n_items, 1);
    body.rest = sys_.add_array(nm + "/rest", body.n_items, 3);
    std::copy(pos.begin(), pos.end(), sys_.array_data(body.x).begin());
    std::copy(pos.begin(), pos.end(), sys_.array_data(body.x_prev).begin());
    std::copy(pos.begin(), pos.end(), sys_.array_data(body.rest).begin());

    body.verts = sys_.add_connectivity(nm + "/verts", 1);
    {
      std::vector<std::int64_t> ids(body.n_items);
      for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = std::int64_t(i);
      sys_.set_elements(body.verts, std::move(ids));
    }

    if (body.is_cloth) {
      build_cloth_energies(body, s, elems, pos, density, mass);
    } else {
      build_tet_energies(body, elems);
    }
    std::copy(mass.begin(), mass.end(), sys_.array_data(body.mass).begin());

    add_inertia(sys_, nm + "/inertia", body.verts, body.x, body.x_prev, body.v, body.mass,
                dt_, gravity_);

    // boundary conditions
    if (s.contains("pins")) {
      const detail::Json& ps = s.at("pins");
      if (!ps.is_array()) throw ConfigError("pins: expected an array");
      for (const detail::Json& sel : ps) {
        detail::check_keys(sel, "pin", {"box", "indices"});
        BoundarySet bs;
        bs.nodes = resolve_selector(sel, "pin", pos);
        bs.scripted = false;
        for (std::size_t i : bs.nodes) sys_.pin(body.x, i);
        body.boundaries.push_back(std::move(bs));
      }
    }
    if (s.contains("scripts")) {
      const detail::Json& sc = s.at("scripts");
      if (!sc.is_array()) throw ConfigError("scripts: expected an array");
      for (const detail::Json& one : sc) {
        detail::check_keys(one, "script",
                           {"box", "indices", "type", "axis", "origin",
                            "degrees_per_second", "velocity"});
        BoundarySet bs;
        bs.nodes = resolve_selector(one, "script", pos);
        bs.scripted = true;
        const std::string type = detail::json_str(one, "script", "type");
        if (type == "twist") {
          bs.motion.type = MotionScript::Type::twist;
          bs.motion.axis = detail::json_vec3_or(one, "script", "axis", {0, 0, 1});
          const double len = std::sqrt(bs.motion.axis[0] * bs.motion.axis[0] +
                                       bs.motion.axis[1] * bs.motion.axis[1] +
                                       bs.motion.axis[2] * bs.motion.axis[2]);
          if (!(len > 0)) throw ConfigError("script: zero twist axis");
          for (auto& v : bs.motion.axis) v /= len;
          bs.motion.origin = detail::json_vec3_or(one, "script", "origin", {0, 0, 0});
          bs.motion.rad_per_s =
              detail::json_num(one, "script", "degrees_per_second") * M_PI / 180.0;
        } else if (type == "translate") {
          bs.motion.type = MotionScript::Type::translate;
          bs.motion.velocity = detail::json_vec3(one.at("velocity"), "script");
        } else if (type == "fixed") {
          bs.motion.type = MotionScript::Type::fixed;
        } else {
          throw ConfigError("script: unknown type '" + type + "'");
        }
        for (std::size_t i : bs.nodes) sys_.pin(body.x, i);
        body.boundaries.push_back(std::move(bs));
      }
    }

    // contact and friction against every collider
    if (body.contact_enabled && contact_.k_c > 0) {
      for (std::size_t ci = 0; ci < colliders_.size(); ++ci) {
        ContactSet cs;
        cs.collider = ci;
        const Collider* collider = &colliders_[ci];
        const std::string tag = nm + "/contact/" + std::to_string(ci);
        cs.contact_energy = sys_.n_energies();
        add_contact_sdf(sys_, tag, body.verts, body.x, contact_.k_c, contact_.d_hat,
                        [collider](EnergyBuilder& b, const Vector& p) {
                          return collider->bind_distance(b, p);
                        });
        if (contact_.mu_f > 0) {
          cs.has_friction = true;
          cs.tangent = sys_.add_array(tag + "/T", body.n_items, 6);
          cs.normal_force = sys_.add_array(tag + "/fn", body.n_items, 1);
          add_friction_sdf(sys_, nm + "/friction/" + std::to_string(ci), body.verts, body.x,
                           body.x_prev, dt_, cs.tangent, cs.normal_force, contact_.mu_f,
                           contact_.y_hat, kStableNormEps, &collider->velocity);
        }
        body.contacts.push_back(cs);
      }
    }
  }

  void build_tet_energies(BodyState& body, const std::vector<std::int64_t>& elems) {
    const std::string& nm = body.name;
    const std::uint32_t npe = body.order == 2 ? 10 : 4;
    body.elems = sys_.add_connectivity(nm + "/tets", npe);
    sys_.set_elements(body.elems, elems);
    const std::size_t ne = elems.size() / npe;

    if (material_needs_rotation(body.material.model)) {
      if (body.order != 1)
        throw ConfigError("system '" + nm + "': rotation models need linear elements");
      body.rot = sys_.add_array(nm + "/R", ne, 9);
      std::span<double> R = sys_.array_data(body.rot);
      for (std::size_t e = 0; e < ne; ++e) {
        R[9 * e + 0] = R[9 * e + 4] = R[9 * e + 8] = 1.0;
      }
      // cache rest inverses for the per-iteration polar refresh
      body.dm_inv_host.resize(ne * 9);
      std::span<const double> X = sys_.array_data(body.rest);
      for (std::size_t e = 0; e < ne; ++e) {
        const std::int64_t* t = &elems[e * 4];
        Eigen::Matrix3d Dm;
        for (int c = 0; c < 3; ++c)
          for (int r = 0; r < 3; ++r)
            Dm(r, c) = X[3 * std::size_t(t[c + 1]) + std::size_t(r)] -
                       X[3 * std::size_t(t[0]) + std::size_t(r)];
        Eigen::Matrix3d inv = Dm.inverse();
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) body.dm_inv_host[9 * e + 3 * std::size_t(r) + std::size_t(c)] = inv(r, c);
      }
      BodyState* bp = &body;
      std::vector<std::int64_t> conn_copy(elems);
      sys_.add_assemble_hook([this, bp, conn_copy] { refresh_rotations(*bp, conn_copy); });
    }

    if (body.order == 2) {
      add_fem_solid(sys_, nm + "/elastic", body.elems, body.x, body.rest, 10,
                    tet_rule_quadratic(), body.material.model, body.material.mu,
                    body.material.lambda, body.rot);
    } else {
      add_solid_tet(sys_, nm + "/elastic", body.elems, body.x, body.rest,
                    body.material.model, body.material.mu, body.material.lambda, body.rot);
    }
  }

  void build_cloth_energies(BodyState& body, const detail::Json& s,
                            const std::vector<std::int64_t>& tris, const std::vector<double>& pos,
                            double density, std::vector<double>& mass) {
    const std::string& nm = body.name;
    body.elems = sys_.add_connectivity(nm + "/tris", 3);
    sys_.set_elements(body.elems, tris);
    const std::size_t ne = tris.size() / 3;
    body.dm2inv = sys_.add_array(nm + "/dm2inv", ne, 4);
    body.area = sys_.add_array(nm + "/area", ne, 1);
    std::span<double> dmi = sys_.array_data(body.dm2inv);
    std::span<double> area = sys_.array_data(body.area);
    for (std::size_t e = 0; e < ne; ++e) {
      const std::int64_t* t = &tris[3 * e];
      double E1[3], E2[3];
      for (int c = 0; c < 3; ++c) {
        E1[c] = pos[3 * std::size_t(t[1]) + std::size_t(c)] - pos[3 * std::size_t(t[0]) + std::size_t(c)];
        E2[c] = pos[3 * std::size_t(t[2]) + std::size_t(c)] - pos[3 * std::size_t(t[0]) + std::size_t(c)];
      }
      const double L1 = std::sqrt(E1[0] * E1[0] + E1[1] * E1[1] + E1[2] * E1[2]);
      if (!(L1 > 0)) throw ConfigError("system '" + nm + "': degenerate triangle");
      const double tdot = (E1[0] * E2[0] + E1[1] * E2[1] + E1[2] * E2[2]) / L1;
      double P[3];
      for (int c = 0; c < 3; ++c) P[c] = E2[c] - tdot / L1 * E1[c];
      const double h = std::sqrt(P[0] * P[0] + P[1] * P[1] + P[2] * P[2]);
      if (!(h > 0)) throw ConfigError("system '" + nm + "': degenerate triangle");
      // Dm2 = [[L1, tdot], [0, h]]; store its inverse row-major
      dmi[4 * e + 0] = 1.0 / L1;
      dmi[4 * e + 1] = -tdot / (L1 * h);
      dmi[4 * e + 2] = 0.0;
      dmi[4 * e + 3] = 1.0 / h;
      const double A = 0.5 * L1 * h;
      area[e] = A;
      for (int k = 0; k < 3; ++k) mass[std::size_t(t[k])] += density * A / 3.0;
    }

    add_membrane_tri(sys_, nm + "/membrane", body.elems, body.x, body.dm2inv, body.area,
                     body.material.model, body.material.mu, body.material.lambda);

    body.bending_k = detail::json_num_or(s, "system", "bending_stiffness", 0.0);
    if (body.bending_k > 0) {
      const std::vector<std::int64_t> flaps = interior_edge_flaps(tris);
      const std::size_t nf = flaps.size() / 4;
      if (nf > 0) {
        body.flaps = sys_.add_connectivity(nm + "/flaps", 4);
        sys_.set_elements(body.flaps, flaps);
        body.bendQ = sys_.add_array(nm + "/Q", nf, 144);
        std::span<double> Q = sys_.array_data(body.bendQ);
        for (std::size_t f = 0; f < nf; ++f) {
          std::array<std::array<double, 3>, 4> X;
          for (int k = 0; k < 4; ++k)
            for (int c = 0; c < 3; ++c)
              X[std::size_t(k)][std::size_t(c)] =
                  pos[3 * std::size_t(flaps[4 * f + std::size_t(k)]) + std::size_t(c)];
          const auto q = precompute_bending_Q(X[0], X[1], X[2], X[3]);
          std::copy(q.begin(), q.end(), Q.begin() + static_cast<std::ptrdiff_t>(144 * f));
        }
        add_bending(sys_, nm + "/bending", body.flaps, body.x, body.bendQ, body.bending_k);
      }
    }

    if (s.contains("strain_limit")) {
      const detail::Json& sl = s.at("strain_limit");
      detail::check_keys(sl, "strain_limit", {"sigma_l", "k_sl"});
      body.slim.sigma_l = detail::json_num(sl, "strain_limit", "sigma_l");
      body.slim.k_sl = detail::json_num(sl, "strain_limit", "k_sl");
      if (!(body.slim.sigma_l > 0) || !(body.slim.k_sl > 0))
        throw ConfigError("strain_limit: parameters must be positive");
      body.has_strain_limit = true;
      add_strain_limit(sys_, nm + "/strain_limit", body.elems, body.x, body.dm2inv, body.area,
                       body.slim.sigma_l, body.slim.k_sl);
    }
  }

  void build_attachment(const detail::Json& a) {
    detail::check_keys(a, "attachment",
                       {"system_a", "system_b", "pairs", "match_radius", "stiffness"});
    const std::string na = detail::json_str(a, "attachment", "system_a");
    const std::string nb = detail::json_str(a, "attachment", "system_b");
    BodyState* ba = find_body(na);
    BodyState* bb = find_body(nb);
    if (!ba || !bb) throw ConfigError("attachment: unknown system name");
    att_stiffness_.push_back(detail::json_num(a, "attachment", "stiffness"));
    if (!(att_stiffness_.back() > 0)) throw ConfigError("attachment: stiffness must be positive");

    std::vector<std::int64_t> pairs;
    if (a.contains("pairs")) {
      for (const auto& p : a.at("pairs")) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() ||
            !p[1].is_number_integer())
          throw ConfigError("attachment: each pair is [ia, ib]");
        const std::int64_t ia = p[0].get<std::int64_t>(), ib = p[1].get<std::int64_t>();
        if (ia < 0 || std::size_t(ia) >= ba->n_items || ib < 0 || std::size_t(ib) >= bb->n_items)
          throw ConfigError("attachment: pair index out of range");
        pairs.push_back(ia);
        pairs.push_back(ib);
      }
    } else {
      const double r = detail::json_num(a, "attachment", "match_radius");
      if (!(r > 0)) throw ConfigError("attachment: match_radius must be positive");
      std::span<const double> xa = sys_.array_data(ba->x);
      std::span<const double> xb = sys_.array_data(bb->x);
      for (std::size_t i = 0; i < ba->n_items; ++i) {
        double best = r * r;
        std::int64_t bj = -1;
        for (std::size_t j = 0; j < bb->n_items; ++j) {
          double d2 = 0;
          for (int c = 0; c < 3; ++c) {
            const double d = xa[3 * i + std::size_t(c)] - xb[3 * j + std::size_t(c)];
            d2 += d * d;
          }
          if (d2 <= best) {
            best = d2;
            bj = std::int64_t(j);
          }
        }
        if (bj >= 0) {
          pairs.push_back(std::int64_t(i));
          pairs.push_back(bj);
        }
      }
    }
    if (pairs.empty()) throw ConfigError("attachment: no pairs matched");
    const std::size_t idx = att_stiffness_.size() - 1;
    ConnHandle conn = sys_.add_connectivity("attach/" + std::to_string(idx), 2);
    sys_.set_elements(conn, std::move(pairs));
    add_attachment(sys_, "attach/" + std::to_string(idx), conn, ba->x, bb->x,
                   att_stiffness_[idx]);
  }

  BodyState* find_body(const std::string& name) {
    for (BodyState& b : bodies_)
      if (b.name == name) return &b;
    return nullptr;
  }

  // Quadratic elements: vertices plus one node per unique edge, appended to
  // the position array; edge order matches the shape functions.
  std::vector<std::int64_t> expand_quadratic(const std::vector<std::int64_t>& tets,
                                             std::vector<double>& pos) {
    std::map<std::pair<std::int64_t, std::int64_t>, std::int64_t> edge_node;
    std::vector<std::int64_t> out;
    const int edges[6][2] = {{0, 1}, {1, 2}, {2, 0}, {0, 3}, {1, 3}, {2, 3}};
    for (std::size_t e = 0; e * 4 < tets.size(); ++e) {
      const std::int64_t* t = &tets[4 * e];
      for (int k = 0; k < 4; ++k) out.push_back(t[k]);
      for (const auto& ed : edges) {
        const std::int64_t a = t[ed[0]], b = t[ed[1]];
        const std::pair<std::int64_t, std::int64_t> key = std::minmax(a, b);
        auto it = edge_node.find(key);
        if (it == edge_node.end()) {
          const std::int64_t id = std::int64_t(pos.size() / 3);
          for (int c = 0; c < 3; ++c)
            pos.push_back(0.5 * (pos[3 * std::size_t(a) + std::size_t(c)] +
                                 pos[3 * std::size_t(b) + std::size_t(c)]));
          it = edge_node.emplace(key, id).first;
        }
        out.push_back(it->second);
      }
    }
    return out;
  }

  void refresh_rotations(BodyState& body, const std::vector<std::int64_t>& elems) {
    std::span<const double> x = sys_.array_data(body.x);
    std::span<double> R = sys_.array_data(body.rot);
    const std::size_t ne = elems.size() / 4;
    for (std::size_t e = 0; e < ne; ++e) {
      const std::int64_t* t = &elems[4 * e];
      double Ds[9];
      for (int c = 0; c < 3; ++c)
        for (int r = 0; r < 3; ++r)
          Ds[3 * std::size_t(r) + std::size_t(c)] =
              x[3 * std::size_t(t[c + 1]) + std::size_t(r)] - x[3 * std::size_t(t[0]) + std::size_t(r)];
      const double* Dmi = body.dm_inv_host.data() + 9 * e;
      double F[9];
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
          double acc = 0;
          for (int k = 0; k < 3; ++k) acc += Ds[3 * std::size_t(r) + std::size_t(k)] * Dmi[3 * std::size_t(k) + std::size_t(c)];
          F[3 * std::size_t(r) + std::size_t(c)] = acc;
        }
      polar_rotation(F, R.data() + 9 * e);
    }
  }

  void pre_step(double t_next) {
    // lagged contact quantities from the step-start state, before anything
    // moves
    for (BodyState& body : bodies_) {
      std::span<const double> x = sys_.array_data(body.x);
      for (ContactSet& cs : body.contacts) {
        if (!cs.has_friction) continue;
        const Collider& c = colliders_[cs.collider];
        std::span<double> T = sys_.array_data(cs.tangent);
        std::span<double> fn = sys_.array_data(cs.normal_force);
        const HostSdf h = [&c](const std::array<double, 3>& p) { return c.distance(p); };
        for (std::size_t i = 0; i < body.n_items; ++i) {
          const std::array<double, 3> p = {x[3 * i], x[3 * i + 1], x[3 * i + 2]};
          const double d = c.distance(p);
          const double f = barrier_normal_force(d, contact_.d_hat, contact_.k_c);
          fn[i] = f;
          if (f > 0) {
            const auto tb = tangent_basis_from_normal(sdf_normal_fd(h, p));
            std::copy(tb.begin(), tb.end(), T.begin() + static_cast<std::ptrdiff_t>(6 * i));
          } else {
            std::fill_n(T.begin() + static_cast<std::ptrdiff_t>(6 * i), 6, 0.0);
          }
        }
      }
    }
    for (Collider& c : colliders_) c.advance(dt_);
    for (BodyState& body : bodies_) {
      if (body.boundaries.empty()) continue;
      std::span<double> x = sys_.array_data(body.x);
      std::span<const double> rest = sys_.array_data(body.rest);
      for (const BoundarySet& bs : body.boundaries) {
        if (!bs.scripted) continue;
        for (std::size_t i : bs.nodes) {
          const std::array<double, 3> r = {rest[3 * i], rest[3 * i + 1], rest[3 * i + 2]};
          const std::array<double, 3> p = bs.motion.position(r, t_next);
          for (int c = 0; c < 3; ++c) x[3 * i + std::size_t(c)] = p[std::size_t(c)];
        }
      }
    }
  }

  EnergySystem sys_;
  KernelCache cache_;
  std::unique_ptr<Assembler> asm_;
  std::unique_ptr<BackwardEuler> be_;
  std::deque<Collider> colliders_;
  std::deque<BodyState> bodies_;
  std::deque<double> att_stiffness_;
  ContactConfig contact_;
  NewtonOptions newton_;
  SolveReport last_report_;
  std::array<double, 3> gravity_{};
  double dt_ = 0.0;
  int steps_ = 0;
  int step_index_ = 0;
};

struct VariantResult {
  std::string name;
  std::string output_dir;
  std::vector<StepRow> rows;
  CacheStats cache;
  std::size_t differentiations = 0;
};

struct RunSummary {
  std::vector<VariantResult> variants;
  std::size_t total_builds() const {
    std::size_t n = 0;
    for (const auto& v : variants) n += v.cache.builds;
    return n;
  }
  std::size_t total_differentiations() const {
    std::size_t n = 0;
    for (const auto& v : variants) n += v.differentiations;
    return n;
  }
};

inline void write_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows) {
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (!f) throw Error("cannot open log file: " + path.string());
  std::fprintf(f,
               "step,newton_iters,E,grad_inf,t_eval_ms,t_assemble_ms,t_solve_ms,"
               "active_contacts\n");
  for (const StepRow& r : rows)
    std::fprintf(f, "%d,%d,%.17g,%.17g,%.3f,%.3f,%.3f,%zu\n", r.step, r.newton_iters, r.E,
                 r.grad_inf, r.t_eval_ms, r.t_assemble_ms, r.t_solve_ms, r.active_contacts);
  std::fclose(f);
}

inline RunSummary run_scene(const RunOptions& opt) {
  if (opt.scene_path.empty()) throw ConfigError("no scene file given");
  if (opt.output_dir.empty()) throw ConfigError("no output directory given");
  const detail::Json config = detail::load_json_file(opt.scene_path);

  std::vector<std::string> variants;
  if (config.contains("material_sweep")) {
    const detail::Json& sweep = config.at("material_sweep");
    if (!sweep.is_array() || sweep.empty())
      throw ConfigError("material_sweep: expected a non-empty array");
    for (const auto& v : sweep) {
      if (!v.is_string()) throw ConfigError("material_sweep: entries must be strings");
      detail::material_from_string(v.get<std::string>(), "material_sweep");
      variants.push_back(v.get<std::string>());
    }
  } else {
    variants.push_back("");
  }

  RunSummary summary;
  for (const std::string& model : variants) {
    const std::filesystem::path out_dir = model.empty()
                                              ? std::filesystem::path(opt.output_dir)
                                              : std::filesystem::path(opt.output_dir) / model;
    std::filesystem::create_directories(out_dir);
    auto scene = Scene::from_file(opt.scene_path, opt, model);
    const int steps = opt.steps >= 0 ? opt.steps : scene->config_steps();

    VariantResult result;
    result.name = model.empty() ? "default" : model;
    result.output_dir = out_dir.string();
    scene->write_frame(out_dir, 0);
    for (int s = 1; s <= steps; ++s) {
      std::string dump;
      if (opt.dump_hessian >= 0 && s == opt.dump_hessian) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "hessian_%05d.txt", s);
        dump = (out_dir / buf).string();
      }
      result.rows.push_back(scene->step(dump));
      scene->write_frame(out_dir, s);
    }
    write_csv(out_dir / "log.csv", result.rows);
    result.cache = scene->cache().stats();
    result.differentiations = scene->system().differentiation_count();
    summary.variants.push_back(std::move(result));
  }
  return summary;
}

}  // namespace symel
