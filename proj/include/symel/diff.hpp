#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "symel/expr.hpp"

namespace symel {

// Forward-mode derivative of root with respect to one symbol. Every rule is
// built through make_op, so zero/one factors fold away on construction.
inline NodeId derivative(ExprGraph& g, NodeId root, NodeId sym) {
  if (g.node(sym).op != Op::symbol) throw Error("derivative: wrt node is not a symbol");
  const NodeId zero = g.constant_id(0.0);
  const NodeId one = g.constant_id(1.0);
  // Derivative nodes are appended to the graph; memo covers only ids that
  // existed at entry, which includes everything reachable from root.
  std::vector<NodeId> d(g.size(), kInvalidNode);
  const NodeId roots[1] = {root};
  g.for_each_postorder(roots, [&](NodeId id) {
    const Node n = g.node(id);  // copy; rule construction may reallocate
    const NodeId a = n.child[0], b = n.child[1], c = n.child[2];
    const NodeId da = n.arity >= 1 ? d[a] : kInvalidNode;
    const NodeId db = n.arity >= 2 ? d[b] : kInvalidNode;
    NodeId r = zero;
    switch (n.op) {
      case Op::symbol:
        r = (id == sym) ? one : zero;
        break;
      case Op::constant:
        r = zero;
        break;
      case Op::add:
        r = g.make_op(Op::add, da, db);
        break;
      case Op::sub:
        r = g.make_op(Op::sub, da, db);
        break;
      case Op::neg:
        r = g.make_op(Op::neg, da);
        break;
      case Op::mul:
        r = g.make_op(Op::add, g.make_op(Op::mul, da, b), g.make_op(Op::mul, a, db));
        break;
      case Op::div: {
        const NodeId num = g.make_op(Op::sub, g.make_op(Op::mul, da, b),
                                     g.make_op(Op::mul, a, db));
        r = g.make_op(Op::div, num, g.make_op(Op::mul, b, b));
        break;
      }
      case Op::pow_int: {
        const NodeId xn1 = g.make_op(Op::pow_int, a, kInvalidNode, kInvalidNode, n.iarg - 1);
        const NodeId coef = g.make_op(Op::mul, g.constant_id(double(n.iarg)), xn1);
        r = g.make_op(Op::mul, coef, da);
        break;
      }
      case Op::sqrt:
        // id is sqrt(a) itself; reuse it instead of a second sqrt node.
        r = g.make_op(Op::div, da, g.make_op(Op::mul, g.constant_id(2.0), id));
        break;
      case Op::log:
        r = g.make_op(Op::div, da, a);
        break;
      case Op::sin:
        r = g.make_op(Op::mul, g.make_op(Op::cos, a), da);
        break;
      case Op::cos:
        r = g.make_op(Op::neg, g.make_op(Op::mul, g.make_op(Op::sin, a), da));
        break;
      case Op::branch:
        r = g.make_op(Op::branch, a, db, d[c]);
        break;
    }
    d[id] = r;
  });
  return d[root];
}

inline Scalar derivative(const Scalar& root, const Scalar& sym) {
  ExprGraph& g = detail::common_graph(root, sym);
  return Scalar(g, derivative(g, root.id(), sym.id()));
}

// Gradient and Hessian roots of a scalar energy with respect to dof symbols.
// hess is row-major n x n; entry (j,i) aliases the node computed for (i,j).
struct DerivativeBundle {
  NodeId energy = kInvalidNode;
  std::vector<NodeId> wrt;
  std::vector<NodeId> grad;
  std::vector<NodeId> hess;

  std::size_t n_dofs() const { return wrt.size(); }

  // [energy, grad..., hess row-major]: the kernel output layout.
  std::vector<NodeId> output_roots() const {
    std::vector<NodeId> out;
    out.reserve(1 + grad.size() + hess.size());
    out.push_back(energy);
    out.insert(out.end(), grad.begin(), grad.end());
    out.insert(out.end(), hess.begin(), hess.end());
    return out;
  }
};

inline DerivativeBundle gradient_hessian(ExprGraph& g, NodeId energy,
                                         std::span<const NodeId> wrt) {
  DerivativeBundle out;
  out.energy = energy;
  out.wrt.assign(wrt.begin(), wrt.end());
  const std::size_t n = wrt.size();
  out.grad.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.grad[i] = derivative(g, energy, wrt[i]);
  out.hess.assign(n * n, kInvalidNode);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      const NodeId h = derivative(g, out.grad[i], wrt[j]);
      out.hess[i * n + j] = h;
      out.hess[j * n + i] = h;
    }
  return out;
}

// Topological evaluation order over the union DAG of all roots. Shared
// subexpressions appear exactly once; n_ops counts operation nodes only.
struct EvalPlan {
  std::vector<NodeId> order;  // full postorder: symbols, constants, operations
  std::vector<NodeId> roots;
  std::uint64_t n_ops = 0;
};

inline EvalPlan compress(const ExprGraph& g, std::span<const NodeId> roots) {
  EvalPlan plan;
  plan.roots.assign(roots.begin(), roots.end());
  g.for_each_postorder(roots, [&](NodeId id) {
    plan.order.push_back(id);
    if (is_operation(g.node(id).op)) ++plan.n_ops;
  });
  return plan;
}

inline EvalPlan compress(const ExprGraph& g, std::initializer_list<NodeId> roots) {
  return compress(g, std::span<const NodeId>(roots.begin(), roots.size()));
}

struct CompressionStats {
  std::uint64_t plan_ops = 0;         // operations in the shared plan
  std::uint64_t entry_total = 0;      // sum of op counts, one count per root entry
  std::uint64_t unique_entry_total = 0;  // ditto, counting duplicate root ids once
  double ratio() const {
    return entry_total == 0 ? 1.0 : double(plan_ops) / double(entry_total);
  }
};

inline CompressionStats compression_stats(const ExprGraph& g,
                                          std::span<const NodeId> roots) {
  CompressionStats s;
  s.plan_ops = g.op_count(roots);
  std::unordered_set<NodeId> seen;
  for (NodeId r : roots) {
    const NodeId one[1] = {r};
    const std::uint64_t ops = g.op_count(one);
    s.entry_total += ops;
    if (seen.insert(r).second) s.unique_entry_total += ops;
  }
  return s;
}

inline CompressionStats compression_stats(const ExprGraph& g,
                                          std::initializer_list<NodeId> roots) {
  return compression_stats(g, std::span<const NodeId>(roots.begin(), roots.size()));
}

}  // namespace symel
