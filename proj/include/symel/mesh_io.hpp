#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "symel/expr.hpp"

namespace symel {

// Tet mesh text format: first line "nv nt", nv lines "x y z", nt lines
// "i0 i1 i2 i3" (zero-based). Triangle meshes are identical with 3 indices.
struct TetMesh {
  std::vector<double> vertices;       // 3 per vertex
  std::vector<std::int64_t> tets;     // 4 per element
  std::size_t n_vertices() const { return vertices.size() / 3; }
  std::size_t n_tets() const { return tets.size() / 4; }
};

struct TriMesh {
  std::vector<double> vertices;
  std::vector<std::int64_t> tris;
  std::size_t n_vertices() const { return vertices.size() / 3; }
  std::size_t n_tris() const { return tris.size() / 3; }
};

namespace detail {

class LineReader {
 public:
  explicit LineReader(const std::string& path) : path_(path), in_(path) {
    if (!in_) throw Error("cannot open mesh file: " + path);
  }

  // Next non-empty line; throws on EOF.
  std::istringstream next(const char* what) {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
      return std::istringstream(line);
    }
    throw Error(path_ + ": unexpected end of file, expected " + std::string(what));
  }

  [[noreturn]] void fail(const char* what) {
    throw Error(path_ + ":" + std::to_string(line_no_) + ": malformed " + std::string(what));
  }

  int line_no() const { return line_no_; }

 private:
  std::string path_;
  std::ifstream in_;
  int line_no_ = 0;
};

inline double signed_tet_volume(const double* v, std::int64_t a, std::int64_t b,
                                std::int64_t c, std::int64_t d) {
  double e1[3], e2[3], e3[3];
  for (int i = 0; i < 3; ++i) {
    e1[i] = v[3 * b + i] - v[3 * a + i];
    e2[i] = v[3 * c + i] - v[3 * a + i];
    e3[i] = v[3 * d + i] - v[3 * a + i];
  }
  return (e1[0] * (e2[1] * e3[2] - e2[2] * e3[1]) - e1[1] * (e2[0] * e3[2] - e2[2] * e3[0]) +
          e1[2] * (e2[0] * e3[1] - e2[1] * e3[0])) /
         6.0;
}

}  // namespace detail

inline TetMesh load_tet_mesh(const std::string& path, bool reorient_inverted = false) {
  detail::LineReader r(path);
  std::size_t nv = 0, nt = 0;
  {
    auto s = r.next("vertex and element counts");
    if (!(s >> nv >> nt) || nv == 0) r.fail("header (expected \"nv nt\")");
  }
  TetMesh m;
  m.vertices.resize(nv * 3);
  for (std::size_t i = 0; i < nv; ++i) {
    auto s = r.next("vertex line");
    if (!(s >> m.vertices[3 * i] >> m.vertices[3 * i + 1] >> m.vertices[3 * i + 2]))
      r.fail("vertex line");
  }
  m.tets.resize(nt * 4);
  for (std::size_t i = 0; i < nt; ++i) {
    auto s = r.next("element line");
    std::int64_t* t = &m.tets[4 * i];
    if (!(s >> t[0] >> t[1] >> t[2] >> t[3])) r.fail("element line");
    for (int k = 0; k < 4; ++k)
      if (t[k] < 0 || std::size_t(t[k]) >= nv)
        throw Error(path + ":" + std::to_string(r.line_no()) + ": vertex index out of range");
    const double vol = detail::signed_tet_volume(m.vertices.data(), t[0], t[1], t[2], t[3]);
    if (vol <= 0.0) {
      if (!reorient_inverted)
        throw Error(path + ":" + std::to_string(r.line_no()) +
                    ": inverted or degenerate tet (signed volume " + std::to_string(vol) + ")");
      std::swap(t[2], t[3]);
      if (detail::signed_tet_volume(m.vertices.data(), t[0], t[1], t[2], t[3]) <= 0.0)
        throw Error(path + ":" + std::to_string(r.line_no()) + ": degenerate tet");
    }
  }
  return m;
}

inline TriMesh load_tri_mesh(const std::string& path) {
  detail::LineReader r(path);
  std::size_t nv = 0, nt = 0;
  {
    auto s = r.next("vertex and element counts");
    if (!(s >> nv >> nt) || nv == 0) r.fail("header (expected \"nv nt\")");
  }
  TriMesh m;
  m.vertices.resize(nv * 3);
  for (std::size_t i = 0; i < nv; ++i) {
    auto s = r.next("vertex line");
    if (!(s >> m.vertices[3 * i] >> m.vertices[3 * i + 1] >> m.vertices[3 * i + 2]))
      r.fail("vertex line");
  }
  m.tris.resize(nt * 3);
  for (std::size_t i = 0; i < nt; ++i) {
    auto s = r.next("element line");
    std::int64_t* t = &m.tris[3 * i];
    if (!(s >> t[0] >> t[1] >> t[2])) r.fail("element line");
    for (int k = 0; k < 3; ++k)
      if (t[k] < 0 || std::size_t(t[k]) >= nv)
        throw Error(path + ":" + std::to_string(r.line_no()) + ": vertex index out of range");
  }
  return m;
}

// Boundary faces of a tet mesh, outward-oriented: faces that appear in
// exactly one element.
inline std::vector<std::int64_t> surface_faces(const std::vector<std::int64_t>& tets) {
  static const int kFace[4][3] = {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}};
  std::map<std::array<std::int64_t, 3>, std::array<std::int64_t, 3>> once;
  for (std::size_t e = 0; e * 4 < tets.size(); ++e) {
    for (const auto& f : kFace) {
      std::array<std::int64_t, 3> face = {tets[4 * e + f[0]], tets[4 * e + f[1]],
                                          tets[4 * e + f[2]]};
      std::array<std::int64_t, 3> key = face;
      std::sort(key.begin(), key.end());
      auto it = once.find(key);
      if (it == once.end())
        once.emplace(key, face);
      else
        once.erase(it);
    }
  }
  std::vector<std::int64_t> out;
  out.reserve(once.size() * 3);
  for (const auto& [key, face] : once) {
    out.push_back(face[0]);
    out.push_back(face[1]);
    out.push_back(face[2]);
  }
  return out;
}

// Interior-edge flaps (i0,i1 shared edge; i2,i3 opposite wings) for hinge
// bending. Edges on the boundary produce no flap.
inline std::vector<std::int64_t> interior_edge_flaps(const std::vector<std::int64_t>& tris) {
  std::map<std::array<std::int64_t, 2>, std::vector<std::int64_t>> edge_wings;
  for (std::size_t e = 0; e * 3 < tris.size(); ++e) {
    const std::int64_t* t = &tris[3 * e];
    for (int k = 0; k < 3; ++k) {
      std::int64_t a = t[k], b = t[(k + 1) % 3], w = t[(k + 2) % 3];
      std::array<std::int64_t, 2> key = {std::min(a, b), std::max(a, b)};
      edge_wings[key].push_back(w);
    }
  }
  std::vector<std::int64_t> out;
  for (const auto& [edge, wings] : edge_wings) {
    if (wings.size() != 2) continue;
    out.push_back(edge[0]);
    out.push_back(edge[1]);
    out.push_back(wings[0]);
    out.push_back(wings[1]);
  }
  return out;
}

inline void write_obj(const std::string& path, const std::vector<double>& vertices,
                      const std::vector<std::int64_t>& faces) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw Error("cannot open output file: " + path);
  for (std::size_t i = 0; i * 3 < vertices.size(); ++i)
    std::fprintf(f, "v %.17g %.17g %.17g\n", vertices[3 * i], vertices[3 * i + 1],
                 vertices[3 * i + 2]);
  for (std::size_t i = 0; i * 3 < faces.size(); ++i)
    std::fprintf(f, "f %lld %lld %lld\n", static_cast<long long>(faces[3 * i] + 1),
                 static_cast<long long>(faces[3 * i + 1] + 1),
                 static_cast<long long>(faces[3 * i + 2] + 1));
  std::fclose(f);
}

}  // namespace symel
