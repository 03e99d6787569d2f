#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "symel/diff.hpp"
#include "symel/expr.hpp"

namespace symel {

// One register-machine instruction. Registers are laid out as
// [inputs | constants | one per operation], so dst uniquely names the op.
struct TapeInstr {
  Op op;
  std::int32_t iarg = 0;
  std::uint32_t dst = 0;
  std::uint32_t a = 0, b = 0, c = 0;
};

// Flat executable form of an evaluation plan. Instruction count equals the
// plan's operation count. Batch evaluation runs W lanes in lockstep with
// slot-major input (in[slot*W + lane]) and output-major results
// (out[k*W + lane]); a batch lane computes bit-identical values to a
// single-lane run.
class Tape {
 public:
  std::uint32_t n_inputs = 0;
  std::uint32_t n_outputs = 0;
  std::uint32_t n_dofs = 0;
  std::uint32_t n_regs = 0;
  ExprDigest digest{};
  std::vector<double> consts;  // values of the constant registers, in order
  std::vector<TapeInstr> instrs;
  std::vector<std::uint32_t> out_regs;

  std::size_t scratch_size(long W) const {
    return static_cast<std::size_t>(n_regs) * static_cast<std::size_t>(W);
  }

  void eval(const double* in, double* out, std::vector<double>& scratch) const {
    eval_batch(in, out, 1, scratch);
  }

  void eval(const double* in, double* out) const {
    std::vector<double> scratch;
    eval_batch(in, out, 1, scratch);
  }

  void eval_batch(const double* in, double* out, long W,
                  std::vector<double>& scratch) const {
    if (W <= 0) throw Error("tape eval: lane count must be positive");
    const std::size_t w = static_cast<std::size_t>(W);
    scratch.resize(scratch_size(W));
    double* regs = scratch.data();
    std::memcpy(regs, in, sizeof(double) * n_inputs * w);
    double* creg = regs + std::size_t(n_inputs) * w;
    for (std::size_t k = 0; k < consts.size(); ++k)
      for (std::size_t l = 0; l < w; ++l) creg[k * w + l] = consts[k];
    for (const TapeInstr& ins : instrs) {
      double* d = regs + std::size_t(ins.dst) * w;
      const double* a = regs + std::size_t(ins.a) * w;
      const double* b = regs + std::size_t(ins.b) * w;
      const double* c = regs + std::size_t(ins.c) * w;
      switch (ins.op) {
        case Op::add:
          for (std::size_t l = 0; l < w; ++l) d[l] = a[l] + b[l];
          break;
        case Op::sub:
          for (std::size_t l = 0; l < w; ++l) d[l] = a[l] - b[l];
          break;
        case Op::mul:
          for (std::size_t l = 0; l < w; ++l) d[l] = a[l] * b[l];
          break;
        case Op::div:
          for (std::size_t l = 0; l < w; ++l) d[l] = a[l] / b[l];
          break;
        case Op::neg:
          for (std::size_t l = 0; l < w; ++l) d[l] = -a[l];
          break;
        case Op::pow_int:
          for (std::size_t l = 0; l < w; ++l) d[l] = detail::powi(a[l], ins.iarg);
          break;
        case Op::sqrt:
          for (std::size_t l = 0; l < w; ++l) d[l] = std::sqrt(a[l]);
          break;
        case Op::log:
          for (std::size_t l = 0; l < w; ++l) d[l] = std::log(a[l]);
          break;
        case Op::sin:
          for (std::size_t l = 0; l < w; ++l) d[l] = std::sin(a[l]);
          break;
        case Op::cos:
          for (std::size_t l = 0; l < w; ++l) d[l] = std::cos(a[l]);
          break;
        case Op::branch:
          // Both sides are computed already; select per lane.
          for (std::size_t l = 0; l < w; ++l) d[l] = a[l] >= 0.0 ? b[l] : c[l];
          break;
        case Op::symbol:
        case Op::constant:
          throw Error("tape eval: malformed instruction");
      }
    }
    for (std::size_t k = 0; k < out_regs.size(); ++k) {
      const double* src = regs + std::size_t(out_regs[k]) * w;
      for (std::size_t l = 0; l < w; ++l) out[k * w + l] = src[l];
    }
  }

  void save(const std::filesystem::path& path) const;
  static Tape load(const std::filesystem::path& path);
};

// Lowers a plan to a tape. Symbols must carry assigned input slots within
// [0, n_inputs); otherwise the error lists every offending symbol by name.
inline Tape lower(const ExprGraph& g, const EvalPlan& plan,
                  std::uint32_t n_inputs, std::uint32_t n_dofs) {
  Tape t;
  t.n_inputs = n_inputs;
  t.n_dofs = n_dofs;
  t.n_outputs = static_cast<std::uint32_t>(plan.roots.size());
  t.digest = g.digest(plan.roots);

  std::string missing;
  for (NodeId id : plan.order) {
    const Node& n = g.node(id);
    if (n.op == Op::symbol && n.iarg < 0) {
      if (!missing.empty()) missing += ", ";
      missing += g.symbol_name(id).empty() ? "<unnamed>" : g.symbol_name(id);
    }
  }
  if (!missing.empty())
    throw Error("lower: symbols without an input slot: " + missing);

  std::unordered_map<NodeId, std::uint32_t> reg_of;
  std::unordered_map<std::uint64_t, std::uint32_t> const_reg;
  std::uint32_t next_const = n_inputs;
  // First pass assigns constant registers so operation registers can follow
  // them contiguously.
  for (NodeId id : plan.order) {
    const Node& n = g.node(id);
    if (n.op == Op::constant) {
      const auto bits = std::bit_cast<std::uint64_t>(n.value);
      auto [it, fresh] = const_reg.emplace(bits, next_const);
      if (fresh) {
        t.consts.push_back(n.value);
        ++next_const;
      }
      reg_of.emplace(id, it->second);
    } else if (n.op == Op::symbol) {
      if (static_cast<std::uint32_t>(n.iarg) >= n_inputs)
        throw Error("lower: symbol '" + g.symbol_name(id) + "' slot " +
                    std::to_string(n.iarg) + " outside declared input count " +
                    std::to_string(n_inputs));
      reg_of.emplace(id, static_cast<std::uint32_t>(n.iarg));
    }
  }
  std::uint32_t next_reg = next_const;
  for (NodeId id : plan.order) {
    const Node& n = g.node(id);
    if (!is_operation(n.op)) continue;
    TapeInstr ins;
    ins.op = n.op;
    ins.iarg = n.iarg;
    ins.dst = next_reg;
    ins.a = reg_of.at(n.child[0]);
    if (n.arity >= 2) ins.b = reg_of.at(n.child[1]);
    if (n.arity >= 3) ins.c = reg_of.at(n.child[2]);
    t.instrs.push_back(ins);
    reg_of.emplace(id, next_reg);
    ++next_reg;
  }
  t.n_regs = next_reg;
  t.out_regs.reserve(plan.roots.size());
  for (NodeId r : plan.roots) t.out_regs.push_back(reg_of.at(r));
  return t;
}

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4] = {char(v), char(v >> 8), char(v >> 16), char(v >> 24)};
  os.write(b, 4);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char(v >> (8 * i));
  os.write(b, 8);
}
inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}
inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline constexpr std::uint32_t kTapeFormatVersion = 1;

inline void Tape::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("tape save: cannot open " + path.string());
  os.write("SYTP", 4);
  detail::write_u32(os, kTapeFormatVersion);
  os.write(reinterpret_cast<const char*>(digest.bytes.data()),
           static_cast<std::streamsize>(digest.bytes.size()));
  detail::write_u32(os, n_inputs);
  detail::write_u32(os, n_outputs);
  detail::write_u32(os, n_dofs);
  detail::write_u32(os, n_regs);
  detail::write_u64(os, consts.size());
  for (double v : consts) detail::write_u64(os, std::bit_cast<std::uint64_t>(v));
  detail::write_u64(os, instrs.size());
  for (const TapeInstr& i : instrs) {
    char op = char(i.op);
    os.write(&op, 1);
    detail::write_u32(os, static_cast<std::uint32_t>(i.iarg));
    detail::write_u32(os, i.dst);
    detail::write_u32(os, i.a);
    detail::write_u32(os, i.b);
    detail::write_u32(os, i.c);
  }
  detail::write_u64(os, out_regs.size());
  for (std::uint32_t r : out_regs) detail::write_u32(os, r);
  if (!os) throw Error("tape save: write failed for " + path.string());
}

inline Tape Tape::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("tape load: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SYTP", 4) != 0)
    throw Error("tape load: bad magic in " + path.string());
  const std::uint32_t version = detail::read_u32(is);
  if (version != kTapeFormatVersion)
    throw Error("tape load: unsupported version in " + path.string());
  Tape t;
  is.read(reinterpret_cast<char*>(t.digest.bytes.data()),
          static_cast<std::streamsize>(t.digest.bytes.size()));
  t.n_inputs = detail::read_u32(is);
  t.n_outputs = detail::read_u32(is);
  t.n_dofs = detail::read_u32(is);
  t.n_regs = detail::read_u32(is);
  const std::uint64_t nc = detail::read_u64(is);
  if (!is || nc > (1ull << 32)) throw Error("tape load: truncated header in " + path.string());
  t.consts.resize(nc);
  for (auto& v : t.consts) v = std::bit_cast<double>(detail::read_u64(is));
  const std::uint64_t ni = detail::read_u64(is);
  if (!is || ni > (1ull << 32)) throw Error("tape load: truncated body in " + path.string());
  t.instrs.resize(ni);
  for (auto& i : t.instrs) {
    char op;
    is.read(&op, 1);
    i.op = static_cast<Op>(op);
    if (static_cast<std::uint8_t>(i.op) > static_cast<std::uint8_t>(Op::branch) ||
        !is_operation(i.op))
      throw Error("tape load: invalid opcode in " + path.string());
    i.iarg = static_cast<std::int32_t>(detail::read_u32(is));
    i.dst = detail::read_u32(is);
    i.a = detail::read_u32(is);
    i.b = detail::read_u32(is);
    i.c = detail::read_u32(is);
  }
  const std::uint64_t no = detail::read_u64(is);
  if (!is || no > (1ull << 32)) throw Error("tape load: truncated outputs in " + path.string());
  t.out_regs.resize(no);
  for (auto& r : t.out_regs) r = detail::read_u32(is);
  if (!is) throw Error("tape load: truncated file " + path.string());
  if (t.n_outputs != t.out_regs.size())
    throw Error("tape load: inconsistent output count in " + path.string());
  for (const TapeInstr& i : t.instrs)
    if (i.dst >= t.n_regs || i.a >= t.n_regs || i.b >= t.n_regs || i.c >= t.n_regs)
      throw Error("tape load: register index out of range in " + path.string());
  for (std::uint32_t r : t.out_regs)
    if (r >= t.n_regs) throw Error("tape load: output register out of range in " + path.string());
  return t;
}

}  // namespace symel
