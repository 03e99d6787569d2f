#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "symel/detail/sha256.hpp"

namespace symel {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

using NodeId = std::uint32_t;
inline constexpr NodeId kInvalidNode = 0xffffffffu;

enum class Op : std::uint8_t {
  symbol,
  constant,
  add,
  sub,
  mul,
  div,
  neg,
  pow_int,
  sqrt,
  log,
  sin,
  cos,
  branch,
};

inline bool is_operation(Op op) { return op != Op::symbol && op != Op::constant; }

inline int op_arity(Op op) {
  switch (op) {
    case Op::symbol:
    case Op::constant:
      return 0;
    case Op::neg:
    case Op::pow_int:
    case Op::sqrt:
    case Op::log:
    case Op::sin:
    case Op::cos:
      return 1;
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div:
      return 2;
    case Op::branch:
      return 3;
  }
  return 0;
}

// iarg holds the input slot for symbols (-1 while unassigned) and the
// exponent for pow_int. value is the constant payload.
struct Node {
  Op op = Op::constant;
  std::uint8_t arity = 0;
  std::int32_t iarg = 0;
  double value = 0.0;
  std::array<NodeId, 3> child{kInvalidNode, kInvalidNode, kInvalidNode};
  std::uint64_t shash = 0;
};

struct ExprDigest {
  std::array<std::uint8_t, 32> bytes{};
  std::string hex() const { return detail::hex_string(bytes.data(), bytes.size()); }
  bool operator==(const ExprDigest&) const = default;
};

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline double powi(double x, long long n) {
  if (n < 0) return 1.0 / powi(x, -n);
  double r = 1.0;
  while (n-- > 0) r *= x;
  return r;
}

// Single scalar primitive shared by constant folding, DAG evaluation and the
// tape interpreter, so all paths produce bit-identical results.
inline double eval_op(Op op, double v0, double v1, double v2, std::int32_t iarg) {
  switch (op) {
    case Op::add: return v0 + v1;
    case Op::sub: return v0 - v1;
    case Op::mul: return v0 * v1;
    case Op::div: return v0 / v1;
    case Op::neg: return -v0;
    case Op::pow_int: return powi(v0, iarg);
    case Op::sqrt: return std::sqrt(v0);
    case Op::log: return std::log(v0);
    case Op::sin: return std::sin(v0);
    case Op::cos: return std::cos(v0);
    case Op::branch: return v0 >= 0.0 ? v1 : v2;
    case Op::symbol:
    case Op::constant: break;
  }
  throw Error("eval_op: not an operation");
}

}  // namespace detail

class Scalar;

// Hash-consed expression DAG. Nodes are immutable once created; building the
// same structure twice returns the same handle. add/mul operands are stored
// in a canonical order so construction order does not leak into digests.
class ExprGraph {
 public:
  ExprGraph() = default;
  ExprGraph(const ExprGraph&) = delete;
  ExprGraph& operator=(const ExprGraph&) = delete;

  std::size_t size() const { return nodes_.size(); }

  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw Error("node handle out of range");
    return nodes_[id];
  }

  Scalar symbol(std::string name, int slot);
  Scalar symbol(std::string name);  // slot assigned later or never (error at lowering)
  Scalar constant(double v);

  NodeId constant_id(double v) {
    OpKey key{static_cast<std::uint8_t>(Op::constant), 0,
              std::bit_cast<std::uint64_t>(v), kInvalidNode, kInvalidNode,
              kInvalidNode};
    auto it = interned_.find(key);
    if (it != interned_.end()) return it->second;
    Node n;
    n.op = Op::constant;
    n.arity = 0;
    n.value = v;
    n.shash = detail::mix64(detail::mix64(0xC0 ^ std::bit_cast<std::uint64_t>(v)));
    const NodeId id = push(n);
    interned_.emplace(key, id);
    return id;
  }

  NodeId symbol_id(std::string name, int slot) {
    if (slot < 0) throw Error("symbol '" + name + "': slot must be non-negative");
    if (!used_slots_.insert(slot).second)
      throw Error("symbol '" + name + "': input slot " + std::to_string(slot) +
                  " already in use");
    return raw_symbol(std::move(name), slot);
  }

  NodeId unassigned_symbol_id(std::string name) { return raw_symbol(std::move(name), -1); }

  NodeId make_op(Op op, NodeId a, NodeId b = kInvalidNode,
                 NodeId c = kInvalidNode, std::int32_t iarg = 0) {
    const int arity = op_arity(op);
    if (!is_operation(op)) throw Error("make_op: symbol/constant are not operations");
    check_handle(a);
    if (arity >= 2) check_handle(b);
    if (arity >= 3) check_handle(c);
    if ((arity < 2 && b != kInvalidNode) || (arity < 3 && c != kInvalidNode))
      throw Error("make_op: operand arity mismatch");

    if (op == Op::add || op == Op::mul) {
      if (order_before(b, a)) std::swap(a, b);
    }

    if (NodeId folded = try_fold(op, a, b, c, iarg); folded != kInvalidNode)
      return folded;

    OpKey key{static_cast<std::uint8_t>(op), iarg, 0, a,
              arity >= 2 ? b : kInvalidNode, arity >= 3 ? c : kInvalidNode};
    auto it = interned_.find(key);
    if (it != interned_.end()) return it->second;

    Node n;
    n.op = op;
    n.arity = static_cast<std::uint8_t>(arity);
    n.iarg = iarg;
    n.child = {a, arity >= 2 ? b : kInvalidNode, arity >= 3 ? c : kInvalidNode};
    std::uint64_t h = detail::mix64(0xA1 ^ (std::uint64_t(op) << 8));
    h = detail::mix64(h ^ static_cast<std::uint32_t>(iarg));
    for (int i = 0; i < arity; ++i)
      h = detail::mix64(h ^ nodes_[n.child[i]].shash ^ (0x9E0uLL + i));
    n.shash = h;
    const NodeId id = push(n);
    interned_.emplace(key, id);
    return id;
  }

  const std::string& symbol_name(NodeId id) const {
    static const std::string empty;
    auto it = names_.find(id);
    return it == names_.end() ? empty : it->second;
  }

  // Visits every node reachable from roots exactly once, children before
  // parents, in a deterministic order (roots in order, stored child order).
  template <class F>
  void for_each_postorder(std::span<const NodeId> roots, F&& visit) const {
    std::vector<std::uint8_t> state(nodes_.size(), 0);
    std::vector<NodeId> stack;
    for (NodeId root : roots) {
      check_handle(root);
      stack.push_back(root);
      while (!stack.empty()) {
        const NodeId id = stack.back();
        if (state[id] == 2) {
          stack.pop_back();
          continue;
        }
        const Node& n = nodes_[id];
        if (state[id] == 0) {
          state[id] = 1;
          for (int i = n.arity - 1; i >= 0; --i) {
            const NodeId ch = n.child[static_cast<std::size_t>(i)];
            if (state[ch] != 2) stack.push_back(ch);
          }
        } else {
          state[id] = 2;
          visit(id);
          stack.pop_back();
        }
      }
    }
  }

  std::uint64_t op_count(std::span<const NodeId> roots) const {
    std::uint64_t count = 0;
    for_each_postorder(roots, [&](NodeId id) {
      if (is_operation(nodes_[id].op)) ++count;
    });
    return count;
  }

  void digest_update(detail::Sha256& ctx, std::span<const NodeId> roots) const {
    std::unordered_map<NodeId, std::uint32_t> ordinal;
    std::uint32_t next = 0;
    auto put_u8 = [&](std::uint8_t v) { ctx.update(&v, 1); };
    auto put_u32 = [&](std::uint32_t v) {
      std::uint8_t b[4] = {std::uint8_t(v), std::uint8_t(v >> 8),
                           std::uint8_t(v >> 16), std::uint8_t(v >> 24)};
      ctx.update(b, 4);
    };
    auto put_u64 = [&](std::uint64_t v) {
      std::uint8_t b[8];
      for (int i = 0; i < 8; ++i) b[i] = std::uint8_t(v >> (8 * i));
      ctx.update(b, 8);
    };
    for_each_postorder(roots, [&](NodeId id) {
      const Node& n = nodes_[id];
      put_u8(static_cast<std::uint8_t>(n.op));
      put_u32(static_cast<std::uint32_t>(n.iarg));
      put_u64(n.op == Op::constant ? std::bit_cast<std::uint64_t>(n.value) : 0);
      put_u8(n.arity);
      for (int i = 0; i < n.arity; ++i) put_u32(ordinal.at(n.child[static_cast<std::size_t>(i)]));
      ordinal.emplace(id, next++);
    });
    put_u32(0xffffffffu);
    put_u32(static_cast<std::uint32_t>(roots.size()));
    for (NodeId r : roots) put_u32(ordinal.at(r));
  }

  ExprDigest digest(std::span<const NodeId> roots) const {
    if (roots.empty()) throw Error("digest: empty root set");
    detail::Sha256 ctx;
    static const char tag[] = "symel-expr-v1";
    ctx.update(tag, sizeof(tag) - 1);
    digest_update(ctx, roots);
    return ExprDigest{ctx.finish()};
  }

  // Memoized DAG evaluation; the reference semantics for all kernels.
  void eval(std::span<const NodeId> roots, std::span<const double> inputs,
            std::span<double> out) const {
    if (out.size() != roots.size()) throw Error("eval: output size mismatch");
    std::vector<double> val(nodes_.size(), 0.0);
    for_each_postorder(roots, [&](NodeId id) {
      const Node& n = nodes_[id];
      switch (n.op) {
        case Op::symbol: {
          if (n.iarg < 0)
            throw Error("eval: symbol '" + symbol_name(id) + "' has no input slot");
          if (static_cast<std::size_t>(n.iarg) >= inputs.size())
            throw Error("eval: input slot " + std::to_string(n.iarg) +
                        " out of range (" + std::to_string(inputs.size()) + " inputs)");
          val[id] = inputs[static_cast<std::size_t>(n.iarg)];
          break;
        }
        case Op::constant:
          val[id] = n.value;
          break;
        default:
          val[id] = detail::eval_op(n.op, val[n.child[0]],
                                    n.arity >= 2 ? val[n.child[1]] : 0.0,
                                    n.arity >= 3 ? val[n.child[2]] : 0.0, n.iarg);
      }
    });
    for (std::size_t i = 0; i < roots.size(); ++i) out[i] = val[roots[i]];
  }

  double eval1(NodeId root, std::span<const double> inputs) const {
    double out;
    NodeId roots[1] = {root};
    eval(roots, inputs, std::span<double>(&out, 1));
    return out;
  }
  double eval1(const class Scalar& root, std::span<const double> inputs) const;

  ExprDigest digest(std::initializer_list<NodeId> roots) const {
    return digest(std::span<const NodeId>(roots.begin(), roots.size()));
  }

  // Total structural order used as the canonical-order tie break. Distinct
  // symbol nodes are ordered by creation index.
  int structural_compare(NodeId a, NodeId b) const {
    std::vector<std::pair<NodeId, NodeId>> stack{{a, b}};
    while (!stack.empty()) {
      auto [x, y] = stack.back();
      stack.pop_back();
      if (x == y) continue;
      const Node& nx = nodes_[x];
      const Node& ny = nodes_[y];
      if (nx.op != ny.op) return nx.op < ny.op ? -1 : 1;
      if (nx.iarg != ny.iarg) return nx.iarg < ny.iarg ? -1 : 1;
      const auto bx = std::bit_cast<std::uint64_t>(nx.value);
      const auto by = std::bit_cast<std::uint64_t>(ny.value);
      if (bx != by) return bx < by ? -1 : 1;
      if (nx.op == Op::symbol) return x < y ? -1 : 1;
      for (int i = nx.arity - 1; i >= 0; --i)
        stack.emplace_back(nx.child[static_cast<std::size_t>(i)],
                           ny.child[static_cast<std::size_t>(i)]);
    }
    return 0;
  }

 private:
  struct OpKey {
    std::uint8_t op;
    std::int32_t iarg;
    std::uint64_t vbits;
    NodeId c0, c1, c2;
    bool operator==(const OpKey&) const = default;
  };
  struct OpKeyHash {
    std::size_t operator()(const OpKey& k) const {
      std::uint64_t h = detail::mix64(k.op ^ (std::uint64_t(std::uint32_t(k.iarg)) << 8));
      h = detail::mix64(h ^ k.vbits);
      h = detail::mix64(h ^ k.c0 ^ (std::uint64_t(k.c1) << 20) ^ (std::uint64_t(k.c2) << 40));
      return static_cast<std::size_t>(h);
    }
  };

  NodeId push(const Node& n) {
    if (nodes_.size() >= kInvalidNode) throw Error("expression graph full");
    nodes_.push_back(n);
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  void check_handle(NodeId id) const {
    if (id >= nodes_.size()) throw Error("operand handle out of range");
  }

  NodeId raw_symbol(std::string name, int slot) {
    Node n;
    n.op = Op::symbol;
    n.arity = 0;
    n.iarg = slot;
    const NodeId id = static_cast<NodeId>(nodes_.size());
    n.shash = detail::mix64(detail::mix64(0x51 ^ (std::uint64_t(std::uint32_t(slot)) << 8)) ^ id);
    push(n);
    names_.emplace(id, std::move(name));
    return id;
  }

  bool order_before(NodeId a, NodeId b) const {
    if (a == b) return false;
    const std::uint64_t ha = nodes_[a].shash, hb = nodes_[b].shash;
    if (ha != hb) return ha < hb;
    return structural_compare(a, b) < 0;
  }

  bool is_const(NodeId id) const { return nodes_[id].op == Op::constant; }
  bool is_const_bits(NodeId id, double v) const {
    return is_const(id) && std::bit_cast<std::uint64_t>(nodes_[id].value) ==
                               std::bit_cast<std::uint64_t>(v);
  }

  // Local folds only: constant evaluation and the trivial identities. No
  // algebraic rewriting beyond these.
  NodeId try_fold(Op op, NodeId a, NodeId b, NodeId c, std::int32_t iarg) {
    const int arity = op_arity(op);
    if (op == Op::branch) {
      if (is_const(a)) return nodes_[a].value >= 0.0 ? b : c;
      return kInvalidNode;
    }
    bool all_const = is_const(a);
    if (arity >= 2) all_const = all_const && is_const(b);
    if (all_const) {
      return constant_id(detail::eval_op(op, nodes_[a].value,
                                         arity >= 2 ? nodes_[b].value : 0.0,
                                         0.0, iarg));
    }
    switch (op) {
      case Op::add:
        if (is_const_bits(a, 0.0)) return b;
        if (is_const_bits(b, 0.0)) return a;
        break;
      case Op::sub:
        if (is_const_bits(b, 0.0)) return a;
        if (is_const_bits(a, 0.0)) return make_op(Op::neg, b);
        break;
      case Op::mul:
        if (is_const_bits(a, 1.0)) return b;
        if (is_const_bits(b, 1.0)) return a;
        if (is_const_bits(a, 0.0) || is_const_bits(b, 0.0)) return constant_id(0.0);
        break;
      case Op::div:
        if (is_const_bits(b, 1.0)) return a;
        if (is_const_bits(a, 0.0)) return constant_id(0.0);
        break;
      case Op::pow_int:
        if (iarg == 1) return a;
        if (iarg == 0) return constant_id(1.0);
        break;
      default:
        break;
    }
    return kInvalidNode;
  }

  std::vector<Node> nodes_;
  std::unordered_map<OpKey, NodeId, OpKeyHash> interned_;
  std::unordered_map<NodeId, std::string> names_;
  std::unordered_set<int> used_slots_;
};

// Value-semantics handle to one scalar node of a graph.
class Scalar {
 public:
  Scalar() = default;
  Scalar(ExprGraph& g, NodeId id) : graph_(&g), id_(id) {}

  bool valid() const { return graph_ != nullptr && id_ != kInvalidNode; }
  NodeId id() const {
    require();
    return id_;
  }
  ExprGraph& graph() const {
    require();
    return *graph_;
  }

 private:
  void require() const {
    if (!valid()) throw Error("use of empty symbolic scalar");
  }
  ExprGraph* graph_ = nullptr;
  NodeId id_ = kInvalidNode;
};

inline double ExprGraph::eval1(const Scalar& root, std::span<const double> inputs) const {
  return eval1(root.id(), inputs);
}

namespace detail {
inline ExprGraph& common_graph(const Scalar& a, const Scalar& b) {
  if (&a.graph() != &b.graph())
    throw Error("operands belong to different expression graphs");
  return a.graph();
}
}  // namespace detail

inline Scalar ExprGraph::symbol(std::string name, int slot) {
  return Scalar(*this, symbol_id(std::move(name), slot));
}
inline Scalar ExprGraph::symbol(std::string name) {
  return Scalar(*this, unassigned_symbol_id(std::move(name)));
}
inline Scalar ExprGraph::constant(double v) { return Scalar(*this, constant_id(v)); }

inline Scalar operator+(const Scalar& a, const Scalar& b) {
  ExprGraph& g = detail::common_graph(a, b);
  return Scalar(g, g.make_op(Op::add, a.id(), b.id()));
}
inline Scalar operator-(const Scalar& a, const Scalar& b) {
  ExprGraph& g = detail::common_graph(a, b);
  return Scalar(g, g.make_op(Op::sub, a.id(), b.id()));
}
inline Scalar operator*(const Scalar& a, const Scalar& b) {
  ExprGraph& g = detail::common_graph(a, b);
  return Scalar(g, g.make_op(Op::mul, a.id(), b.id()));
}
inline Scalar operator/(const Scalar& a, const Scalar& b) {
  ExprGraph& g = detail::common_graph(a, b);
  return Scalar(g, g.make_op(Op::div, a.id(), b.id()));
}
inline Scalar operator-(const Scalar& a) {
  ExprGraph& g = a.graph();
  return Scalar(g, g.make_op(Op::neg, a.id()));
}
inline Scalar operator+(const Scalar& a, double b) { return a + a.graph().constant(b); }
inline Scalar operator+(double a, const Scalar& b) { return b.graph().constant(a) + b; }
inline Scalar operator-(const Scalar& a, double b) { return a - a.graph().constant(b); }
inline Scalar operator-(double a, const Scalar& b) { return b.graph().constant(a) - b; }
inline Scalar operator*(const Scalar& a, double b) { return a * a.graph().constant(b); }
inline Scalar operator*(double a, const Scalar& b) { return b.graph().constant(a) * b; }
inline Scalar operator/(const Scalar& a, double b) { return a / a.graph().constant(b); }
inline Scalar operator/(double a, const Scalar& b) { return b.graph().constant(a) / b; }

inline Scalar pow(const Scalar& a, int n) {
  ExprGraph& g = a.graph();
  return Scalar(g, g.make_op(Op::pow_int, a.id(), kInvalidNode, kInvalidNode, n));
}
inline Scalar sqrt(const Scalar& a) {
  ExprGraph& g = a.graph();
  return Scalar(g, g.make_op(Op::sqrt, a.id()));
}
inline Scalar log(const Scalar& a) {
  ExprGraph& g = a.graph();
  return Scalar(g, g.make_op(Op::log, a.id()));
}
inline Scalar sin(const Scalar& a) {
  ExprGraph& g = a.graph();
  return Scalar(g, g.make_op(Op::sin, a.id()));
}
inline Scalar cos(const Scalar& a) {
  ExprGraph& g = a.graph();
  return Scalar(g, g.make_op(Op::cos, a.id()));
}

// value = a where cond >= 0, b where cond < 0 (NaN selects b).
inline Scalar branch(const Scalar& cond, const Scalar& a, const Scalar& b) {
  ExprGraph& g = detail::common_graph(cond, a);
  detail::common_graph(cond, b);
  return Scalar(g, g.make_op(Op::branch, cond.id(), a.id(), b.id()));
}

inline Scalar min(const Scalar& a, const Scalar& b) { return branch(a - b, b, a); }
inline Scalar max(const Scalar& a, const Scalar& b) { return branch(a - b, a, b); }
inline Scalar abs(const Scalar& a) { return branch(a, a, -a); }
inline Scalar sign(const Scalar& a) {
  ExprGraph& g = a.graph();
  return branch(a, g.constant(1.0), g.constant(-1.0));
}

// Comparison strictness is recorded literally; activation tests honor it.
// branch() itself always selects its first side where the value is >= 0.
enum class CmpKind : std::uint8_t { ge, gt };

struct Condition {
  Scalar value;
  CmpKind kind = CmpKind::ge;
  bool holds(double v) const { return kind == CmpKind::ge ? v >= 0.0 : v > 0.0; }
};

inline Condition operator<=(const Scalar& a, const Scalar& b) { return {b - a, CmpKind::ge}; }
inline Condition operator<(const Scalar& a, const Scalar& b) { return {b - a, CmpKind::gt}; }
inline Condition operator>=(const Scalar& a, const Scalar& b) { return {a - b, CmpKind::ge}; }
inline Condition operator>(const Scalar& a, const Scalar& b) { return {a - b, CmpKind::gt}; }
inline Condition operator<=(const Scalar& a, double b) { return a <= a.graph().constant(b); }
inline Condition operator<(const Scalar& a, double b) { return a < a.graph().constant(b); }
inline Condition operator>=(const Scalar& a, double b) { return a >= a.graph().constant(b); }
inline Condition operator>(const Scalar& a, double b) { return a > a.graph().constant(b); }
inline Condition operator<=(double a, const Scalar& b) { return b.graph().constant(a) <= b; }
inline Condition operator<(double a, const Scalar& b) { return b.graph().constant(a) < b; }
inline Condition operator>=(double a, const Scalar& b) { return b.graph().constant(a) >= b; }
inline Condition operator>(double a, const Scalar& b) { return b.graph().constant(a) > b; }

inline Scalar branch(const Condition& cond, const Scalar& a, const Scalar& b) {
  return branch(cond.value, a, b);
}

class Vector {
 public:
  Vector() = default;
  explicit Vector(ExprGraph& g) : graph_(&g) {}
  Vector(ExprGraph& g, std::vector<NodeId> ids) : graph_(&g), ids_(std::move(ids)) {}
  Vector(std::initializer_list<Scalar> entries) {
    for (const Scalar& s : entries) push_back(s);
  }

  std::size_t size() const { return ids_.size(); }
  ExprGraph& graph() const {
    if (!graph_) throw Error("use of empty symbolic vector");
    return *graph_;
  }
  const std::vector<NodeId>& ids() const { return ids_; }

  Scalar operator[](std::size_t i) const {
    if (i >= ids_.size()) throw Error("vector index out of range");
    return Scalar(graph(), ids_[i]);
  }

  void push_back(const Scalar& s) {
    if (!graph_) graph_ = &s.graph();
    if (graph_ != &s.graph()) throw Error("operands belong to different expression graphs");
    ids_.push_back(s.id());
  }

  Scalar dot(const Vector& other) const {
    require_same_size(other);
    Scalar acc = (*this)[0] * other[0];
    for (std::size_t i = 1; i < size(); ++i) acc = acc + (*this)[i] * other[i];
    return acc;
  }

  Scalar squared_norm() const { return dot(*this); }
  Scalar norm() const { return symel::sqrt(squared_norm()); }

  Vector cross(const Vector& other) const {
    require_same_size(other);
    if (size() != 3) throw Error("cross product requires 3 components");
    const Vector& a = *this;
    const Vector& b = other;
    Vector out(graph());
    out.push_back(a[1] * b[2] - a[2] * b[1]);
    out.push_back(a[2] * b[0] - a[0] * b[2]);
    out.push_back(a[0] * b[1] - a[1] * b[0]);
    return out;
  }

 private:
  void require_same_size(const Vector& other) const {
    if (size() == 0 || other.size() != size()) throw Error("vector size mismatch");
    detail::common_graph((*this)[0], other[0]);
  }

  ExprGraph* graph_ = nullptr;
  std::vector<NodeId> ids_;
};

inline Vector operator+(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw Error("vector size mismatch");
  Vector out(a.graph());
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back(a[i] + b[i]);
  return out;
}
inline Vector operator-(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw Error("vector size mismatch");
  Vector out(a.graph());
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back(a[i] - b[i]);
  return out;
}
inline Vector operator*(const Scalar& s, const Vector& v) {
  Vector out(v.graph());
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(s * v[i]);
  return out;
}
inline Vector operator*(const Vector& v, const Scalar& s) { return s * v; }
inline Vector operator*(double s, const Vector& v) { return v.graph().constant(s) * v; }
inline Vector operator*(const Vector& v, double s) { return v.graph().constant(s) * v; }
inline Vector operator-(const Vector& v) {
  Vector out(v.graph());
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(-v[i]);
  return out;
}

// Row-major matrix of scalar nodes. det/inverse are implemented for sizes
// 1..3 (adjugate over determinant).
class Matrix {
 public:
  Matrix() = default;
  Matrix(ExprGraph& g, int rows, int cols) : graph_(&g), rows_(rows), cols_(cols) {
    if (rows <= 0 || cols <= 0) throw Error("matrix dimensions must be positive");
    ids_.assign(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols),
                g.constant_id(0.0));
  }

  static Matrix identity(ExprGraph& g, int n) {
    Matrix m(g, n, n);
    for (int i = 0; i < n; ++i) m.set(i, i, g.constant(1.0));
    return m;
  }

  static Matrix from_columns(const std::vector<Vector>& cols) {
    if (cols.empty()) throw Error("from_columns: no columns");
    const int r = static_cast<int>(cols[0].size());
    Matrix m(cols[0].graph(), r, static_cast<int>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) {
      if (static_cast<int>(cols[j].size()) != r) throw Error("from_columns: ragged columns");
      for (int i = 0; i < r; ++i) m.set(i, static_cast<int>(j), cols[j][static_cast<std::size_t>(i)]);
    }
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  ExprGraph& graph() const {
    if (!graph_) throw Error("use of empty symbolic matrix");
    return *graph_;
  }

  Scalar operator()(int i, int j) const { return Scalar(graph(), ids_[index(i, j)]); }
  void set(int i, int j, const Scalar& s) {
    detail::common_graph(Scalar(graph(), ids_[0]), s);
    ids_[index(i, j)] = s.id();
  }

  Matrix transpose() const {
    Matrix out(graph(), cols_, rows_);
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) out.set(j, i, (*this)(i, j));
    return out;
  }

  Scalar trace() const {
    require_square();
    Scalar acc = (*this)(0, 0);
    for (int i = 1; i < rows_; ++i) acc = acc + (*this)(i, i);
    return acc;
  }

  Scalar det() const {
    require_square();
    const Matrix& m = *this;
    switch (rows_) {
      case 1:
        return m(0, 0);
      case 2:
        return m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
      case 3:
        return m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) -
               m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
               m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
      default:
        throw Error("det: only sizes 1..3 supported");
    }
  }

  Matrix inverse() const {
    require_square();
    const Matrix& m = *this;
    const Scalar d = det();
    Matrix out(graph(), rows_, cols_);
    switch (rows_) {
      case 1:
        out.set(0, 0, 1.0 / d);
        return out;
      case 2:
        out.set(0, 0, m(1, 1) / d);
        out.set(0, 1, -m(0, 1) / d);
        out.set(1, 0, -m(1, 0) / d);
        out.set(1, 1, m(0, 0) / d);
        return out;
      case 3: {
        auto cof = [&](int i0, int i1, int j0, int j1) {
          return m(i0, j0) * m(i1, j1) - m(i0, j1) * m(i1, j0);
        };
        out.set(0, 0, cof(1, 2, 1, 2) / d);
        out.set(0, 1, -cof(0, 2, 1, 2) / d);
        out.set(0, 2, cof(0, 1, 1, 2) / d);
        out.set(1, 0, -cof(1, 2, 0, 2) / d);
        out.set(1, 1, cof(0, 2, 0, 2) / d);
        out.set(1, 2, -cof(0, 1, 0, 2) / d);
        out.set(2, 0, cof(1, 2, 0, 1) / d);
        out.set(2, 1, -cof(0, 2, 0, 1) / d);
        out.set(2, 2, cof(0, 1, 0, 1) / d);
        return out;
      }
      default:
        throw Error("inverse: only sizes 1..3 supported");
    }
  }

  Scalar frobenius_norm_sq() const {
    Scalar acc = (*this)(0, 0) * (*this)(0, 0);
    bool first = true;
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) {
        if (first) {
          first = false;
          continue;
        }
        acc = acc + (*this)(i, j) * (*this)(i, j);
      }
    return acc;
  }

  Vector col(int j) const {
    Vector out(graph());
    for (int i = 0; i < rows_; ++i) out.push_back((*this)(i, j));
    return out;
  }
  Vector row(int i) const {
    Vector out(graph());
    for (int j = 0; j < cols_; ++j) out.push_back((*this)(i, j));
    return out;
  }

 private:
  void require_square() const {
    if (rows_ != cols_) throw Error("square matrix required");
  }
  std::size_t index(int i, int j) const {
    if (i < 0 || i >= rows_ || j < 0 || j >= cols_) throw Error("matrix index out of range");
    return static_cast<std::size_t>(i) * cols_ + j;
  }

  ExprGraph* graph_ = nullptr;
  int rows_ = 0, cols_ = 0;
  std::vector<NodeId> ids_;
};

inline Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw Error("matrix product dimension mismatch");
  Matrix out(a.graph(), a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.cols(); ++j) {
      Scalar acc = a(i, 0) * b(0, j);
      for (int k = 1; k < a.cols(); ++k) acc = acc + a(i, k) * b(k, j);
      out.set(i, j, acc);
    }
  return out;
}
inline Vector operator*(const Matrix& a, const Vector& v) {
  if (a.cols() != static_cast<int>(v.size())) throw Error("matrix-vector dimension mismatch");
  Vector out(a.graph());
  for (int i = 0; i < a.rows(); ++i) {
    Scalar acc = a(i, 0) * v[0];
    for (int k = 1; k < a.cols(); ++k) acc = acc + a(i, k) * v[static_cast<std::size_t>(k)];
    out.push_back(acc);
  }
  return out;
}
inline Matrix operator+(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("matrix sum dimension mismatch");
  Matrix out(a.graph(), a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out.set(i, j, a(i, j) + b(i, j));
  return out;
}
inline Matrix operator-(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("matrix diff dimension mismatch");
  Matrix out(a.graph(), a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out.set(i, j, a(i, j) - b(i, j));
  return out;
}
inline Matrix operator*(const Scalar& s, const Matrix& m) {
  Matrix out(m.graph(), m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) out.set(i, j, s * m(i, j));
  return out;
}
inline Matrix operator*(const Matrix& m, const Scalar& s) { return s * m; }
inline Matrix operator*(double s, const Matrix& m) { return m.graph().constant(s) * m; }
inline Matrix operator*(const Matrix& m, double s) { return m.graph().constant(s) * m; }

inline Matrix outer(const Vector& a, const Vector& b) {
  Matrix out(a.graph(), static_cast<int>(a.size()), static_cast<int>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      out.set(static_cast<int>(i), static_cast<int>(j), a[i] * b[j]);
  return out;
}

inline constexpr double kStableNormEps = 1e-14;

// Norm whose value and partials are exactly zero while the squared norm is
// below eps^2. Avoids division by zero in gradients of |v| at v = 0.
inline Scalar stable_norm(const Vector& v, double eps = kStableNormEps) {
  const Scalar sq = v.squared_norm();
  ExprGraph& g = sq.graph();
  return branch(sq - g.constant(eps * eps), symel::sqrt(sq), g.constant(0.0));
}

inline Scalar stable_norm2(const Scalar& a, const Scalar& b, double eps = kStableNormEps) {
  const Scalar sq = a * a + b * b;
  ExprGraph& g = sq.graph();
  return branch(sq - g.constant(eps * eps), symel::sqrt(sq), g.constant(0.0));
}

}  // namespace symel
