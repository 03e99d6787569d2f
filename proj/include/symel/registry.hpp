#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "symel/cache.hpp"
#include "symel/diff.hpp"
#include "symel/expr.hpp"

namespace symel {

struct ArrayHandle {
  std::uint32_t idx = 0xffffffffu;
  bool valid() const { return idx != 0xffffffffu; }
};
struct ConnHandle {
  std::uint32_t idx = 0xffffffffu;
  bool valid() const { return idx != 0xffffffffu; }
};
struct EnergyHandle {
  std::uint32_t idx = 0xffffffffu;
  bool valid() const { return idx != 0xffffffffu; }
};

// Global dof numbering: one dof set per dof array, in registration order;
// global index = set offset + item * stride + component.
struct DofLayout {
  struct Set {
    std::uint32_t array = 0;   // owning array index
    std::size_t offset = 0;
    std::uint32_t stride = 0;  // components per item
    std::size_t items = 0;
  };
  std::vector<Set> sets;
  std::size_t n_dofs = 0;

  std::size_t global_index(std::size_t set, std::size_t item, std::uint32_t comp) const {
    const Set& s = sets[set];
    return s.offset + item * s.stride + comp;
  }
};

class EnergyBuilder;
class EnergySystem;

namespace detail {

enum class InputKind : std::uint8_t {
  item_comp,  // component of the item selected by a connectivity tuple slot
  elem_comp,  // component of the element-ordinal row of an array
  param,      // host scalar read through a pointer at gather time
  sum_comp,   // component of the current fixed-summation item tuple
};

struct InputSrc {
  InputKind kind = InputKind::item_comp;
  std::uint32_t array = 0;
  std::uint32_t tuple_slot = 0;
  std::uint32_t comp = 0;
  const double* host = nullptr;
};

}  // namespace detail

// One registered energy: its expression graph, input binding plan, dof slots,
// optional activation condition and line-search guard, and compiled kernels.
struct EnergyDef {
  std::string name;
  ConnHandle conn;
  std::unique_ptr<ExprGraph> graph;

  std::vector<detail::InputSrc> inputs;
  std::vector<std::uint32_t> dof_slots;  // input slots that are dofs, bind order
  struct DofBind {
    std::uint32_t array = 0;
    std::uint32_t tuple_slot = 0;
    std::uint32_t comp = 0;
  };
  std::vector<DofBind> dof_binds;      // parallel to dof_slots
  std::vector<NodeId> dof_syms;        // parallel to dof_slots

  NodeId energy_root = kInvalidNode;
  NodeId act_root = kInvalidNode;
  CmpKind act_kind = CmpKind::ge;
  NodeId guard_root = kInvalidNode;

  // Fixed summation: the energy is a sum of one subexpression instantiated
  // per row of sum_items (kernel inputs sum_comp k = row[k]).
  std::vector<std::vector<double>> sum_items;
  std::uint32_t sum_arity = 0;
  bool is_sum = false;

  Kernel deriv_kernel;  // outputs [E, grad(n), hess(n*n) row-major]
  Kernel act_kernel;    // outputs [activation value]
  Kernel guard_kernel;  // outputs [guard value]

  std::uint32_t n_inputs() const { return static_cast<std::uint32_t>(inputs.size()); }
  std::uint32_t n_dofs() const { return static_cast<std::uint32_t>(dof_slots.size()); }
  bool has_activation() const { return act_root != kInvalidNode; }
  bool has_guard() const { return guard_root != kInvalidNode; }
};

// Holds simulation state arrays, dof sets, element connectivity and energy
// definitions. Declarative only: evaluation and assembly live in Assembler.
class EnergySystem {
 public:
  EnergySystem() = default;
  // Hooks and param bindings capture addresses into this object.
  EnergySystem(const EnergySystem&) = delete;
  EnergySystem& operator=(const EnergySystem&) = delete;

  ArrayHandle add_array(std::string name, std::size_t items, std::uint32_t comps) {
    return add_array_impl(std::move(name), items, comps, false);
  }

  // A dof array is also a dof set; minimization runs over all dof sets in
  // registration order.
  ArrayHandle add_dof_array(std::string name, std::size_t items, std::uint32_t comps) {
    return add_array_impl(std::move(name), items, comps, true);
  }

  ConnHandle add_connectivity(std::string name, std::uint32_t arity) {
    if (arity == 0) throw Error("connectivity '" + name + "': arity must be positive");
    conns_.push_back(ConnDef{std::move(name), arity, {}});
    return ConnHandle{static_cast<std::uint32_t>(conns_.size() - 1)};
  }

  void set_elements(ConnHandle h, std::vector<std::int64_t> flat) {
    ConnDef& c = conn_mut(h);
    if (flat.size() % c.arity != 0)
      throw Error("connectivity '" + c.name + "': element list not a multiple of arity");
    c.elems = std::move(flat);
    topology_dirty_ = true;
  }

  std::size_t n_elements(ConnHandle h) const { return conn(h).elems.size() / conn(h).arity; }

  std::span<double> array_data(ArrayHandle h) { return arr_mut(h).data; }
  std::span<const double> array_data(ArrayHandle h) const { return arr(h).data; }
  double* item(ArrayHandle h, std::size_t i) {
    ArrayDef& a = arr_mut(h);
    if (i >= a.items) throw Error("array '" + a.name + "': item index out of range");
    return a.data.data() + i * a.comps;
  }
  const double* item(ArrayHandle h, std::size_t i) const {
    const ArrayDef& a = arr(h);
    if (i >= a.items) throw Error("array '" + a.name + "': item index out of range");
    return a.data.data() + i * a.comps;
  }
  std::size_t array_items(ArrayHandle h) const { return arr(h).items; }
  std::uint32_t array_comps(ArrayHandle h) const { return arr(h).comps; }
  const std::string& array_name(ArrayHandle h) const { return arr(h).name; }

  EnergyHandle add_energy(std::string name, ConnHandle conn,
                          const std::function<void(EnergyBuilder&)>& define);

  const EnergyDef& energy(EnergyHandle h) const { return *energy_def(h); }
  std::size_t n_energies() const { return energies_.size(); }
  const EnergyDef& energy_at(std::size_t i) const { return *energies_[i]; }
  EnergyDef& energy_at_mut(std::size_t i) { return *energies_[i]; }

  // Lagged-quantity refresh callbacks, run at the start of every assemble in
  // registration order.
  void add_assemble_hook(std::function<void()> fn) { hooks_.push_back(std::move(fn)); }
  void run_assemble_hooks() {
    for (auto& fn : hooks_) fn();
  }

  void pin(ArrayHandle h, std::size_t item) {
    const ArrayDef& a = arr(h);
    for (std::uint32_t c = 0; c < a.comps; ++c) pin(h, item, c);
  }
  void pin(ArrayHandle h, std::size_t item, std::uint32_t comp) {
    const ArrayDef& a = arr(h);
    if (!a.is_dof) throw Error("pin: array '" + a.name + "' is not a dof array");
    if (item >= a.items || comp >= a.comps)
      throw Error("pin: index out of range in array '" + a.name + "'");
    pins_.emplace_back(h.idx, item, comp);
    pins_dirty_ = true;
  }
  void clear_pins() {
    pins_.clear();
    pins_dirty_ = true;
  }

  const DofLayout& layout() const {
    ensure_layout();
    return layout_;
  }
  std::size_t n_dofs() const { return layout().n_dofs; }

  // Pinned mask over global dofs, 1 = held fixed.
  const std::vector<std::uint8_t>& pinned() const {
    ensure_layout();
    if (pins_dirty_) {
      pinned_.assign(layout_.n_dofs, 0);
      for (const auto& [aidx, item, comp] : pins_) {
        const std::size_t set = set_of_array_.at(aidx);
        pinned_[layout_.global_index(set, item, comp)] = 1;
      }
      pins_dirty_ = false;
    }
    return pinned_;
  }

  std::size_t dof_set_of_array(ArrayHandle h) const {
    ensure_layout();
    auto it = set_of_array_.find(h.idx);
    if (it == set_of_array_.end())
      throw Error("array '" + arr(h).name + "' is not a dof array");
    return it->second;
  }

  void gather_dofs(std::span<double> u) const {
    ensure_layout();
    if (u.size() != layout_.n_dofs) throw Error("gather_dofs: size mismatch");
    for (const DofLayout::Set& s : layout_.sets) {
      const ArrayDef& a = arrays_[s.array];
      std::copy(a.data.begin(), a.data.end(), u.begin() + static_cast<std::ptrdiff_t>(s.offset));
    }
  }

  void scatter_dofs(std::span<const double> u) {
    ensure_layout();
    if (u.size() != layout_.n_dofs) throw Error("scatter_dofs: size mismatch");
    for (const DofLayout::Set& s : layout_.sets) {
      ArrayDef& a = arrays_[s.array];
      std::copy(u.begin() + static_cast<std::ptrdiff_t>(s.offset),
                u.begin() + static_cast<std::ptrdiff_t>(s.offset + a.data.size()),
                a.data.begin());
    }
  }

  // Validates connectivity indices and element-bound array sizes, rebuilds
  // the dof layout, and bumps the topology stamp so assemblers rebuild their
  // sparsity pattern.
  void refresh_topology() {
    rebuild_layout();
    for (const auto& def : energies_) validate_def(*def);
    topology_dirty_ = false;
    ++topology_stamp_;
  }

  bool topology_dirty() const { return topology_dirty_; }
  std::uint64_t topology_stamp() const { return topology_stamp_; }

  // Builds any missing kernels through the cache. The differentiation
  // counter advances only when a deriv builder actually runs.
  void compile_kernels(KernelCache& cache);

  std::uint64_t differentiation_count() const { return diff_count_; }

  // Per-element kernel input gather. sum_item may be null when the energy is
  // not a fixed summation.
  void gather_element_inputs(const EnergyDef& def, std::size_t elem,
                             const double* sum_item, double* out) const {
    const ConnDef& c = conn(def.conn);
    const std::int64_t* tuple = c.elems.data() + elem * c.arity;
    for (std::size_t s = 0; s < def.inputs.size(); ++s) {
      const detail::InputSrc& src = def.inputs[s];
      switch (src.kind) {
        case detail::InputKind::item_comp: {
          const ArrayDef& a = arrays_[src.array];
          const auto it = static_cast<std::size_t>(tuple[src.tuple_slot]);
          out[s] = a.data[it * a.comps + src.comp];
          break;
        }
        case detail::InputKind::elem_comp: {
          const ArrayDef& a = arrays_[src.array];
          out[s] = a.data[elem * a.comps + src.comp];
          break;
        }
        case detail::InputKind::param:
          out[s] = *src.host;
          break;
        case detail::InputKind::sum_comp:
          out[s] = sum_item[src.tuple_slot];
          break;
      }
    }
  }

  // Global dof indices of one element, in dof bind order.
  void element_dofs(const EnergyDef& def, std::size_t elem,
                    std::span<std::size_t> out) const {
    ensure_layout();
    const ConnDef& c = conn(def.conn);
    const std::int64_t* tuple = c.elems.data() + elem * c.arity;
    for (std::size_t k = 0; k < def.dof_binds.size(); ++k) {
      const EnergyDef::DofBind& b = def.dof_binds[k];
      const std::size_t set = set_of_array_.at(b.array);
      out[k] = layout_.global_index(set, static_cast<std::size_t>(tuple[b.tuple_slot]), b.comp);
    }
  }

  void set_cache_warning_sink(std::function<void(const std::string&)> fn) {
    warn_ = std::move(fn);
  }
  void warn(const std::string& msg) const {
    if (warn_)
      warn_(msg);
    else
      std::fprintf(stderr, "[symel] warning: %s\n", msg.c_str());
  }

 private:
  friend class EnergyBuilder;

  struct ArrayDef {
    std::string name;
    std::size_t items = 0;
    std::uint32_t comps = 0;
    bool is_dof = false;
    std::vector<double> data;
  };
  struct ConnDef {
    std::string name;
    std::uint32_t arity = 0;
    std::vector<std::int64_t> elems;
  };

  ArrayHandle add_array_impl(std::string name, std::size_t items, std::uint32_t comps,
                             bool is_dof) {
    if (comps == 0) throw Error("array '" + name + "': component count must be positive");
    for (const ArrayDef& a : arrays_)
      if (a.name == name) throw Error("array '" + name + "' already registered");
    ArrayDef a;
    a.name = std::move(name);
    a.items = items;
    a.comps = comps;
    a.is_dof = is_dof;
    a.data.assign(items * comps, 0.0);
    arrays_.push_back(std::move(a));
    if (is_dof) layout_dirty_ = true;
    topology_dirty_ = true;
    return ArrayHandle{static_cast<std::uint32_t>(arrays_.size() - 1)};
  }

  const ArrayDef& arr(ArrayHandle h) const {
    if (h.idx >= arrays_.size()) throw Error("invalid array handle");
    return arrays_[h.idx];
  }
  ArrayDef& arr_mut(ArrayHandle h) {
    if (h.idx >= arrays_.size()) throw Error("invalid array handle");
    return arrays_[h.idx];
  }
  const ConnDef& conn(ConnHandle h) const {
    if (h.idx >= conns_.size()) throw Error("invalid connectivity handle");
    return conns_[h.idx];
  }
  ConnDef& conn_mut(ConnHandle h) {
    if (h.idx >= conns_.size()) throw Error("invalid connectivity handle");
    topology_dirty_ = true;
    return conns_[h.idx];
  }
  const EnergyDef* energy_def(EnergyHandle h) const {
    if (h.idx >= energies_.size()) throw Error("invalid energy handle");
    return energies_[h.idx].get();
  }

  void rebuild_layout() const {
    layout_.sets.clear();
    set_of_array_.clear();
    std::size_t offset = 0;
    for (std::uint32_t i = 0; i < arrays_.size(); ++i) {
      const ArrayDef& a = arrays_[i];
      if (!a.is_dof) continue;
      DofLayout::Set s;
      s.array = i;
      s.offset = offset;
      s.stride = a.comps;
      s.items = a.items;
      offset += a.items * a.comps;
      set_of_array_.emplace(i, layout_.sets.size());
      layout_.sets.push_back(s);
    }
    layout_.n_dofs = offset;
    layout_dirty_ = false;
    pins_dirty_ = true;
  }

  void ensure_layout() const {
    if (layout_dirty_) rebuild_layout();
  }

  void validate_def(const EnergyDef& def) const {
    const ConnDef& c = conn(def.conn);
    const std::size_t n_elems = c.elems.size() / c.arity;
    for (const detail::InputSrc& src : def.inputs) {
      if (src.kind == detail::InputKind::item_comp) {
        const ArrayDef& a = arrays_[src.array];
        for (std::size_t e = 0; e < n_elems; ++e) {
          const std::int64_t it = c.elems[e * c.arity + src.tuple_slot];
          if (it < 0 || static_cast<std::size_t>(it) >= a.items)
            throw Error("energy '" + def.name + "': element " + std::to_string(e) +
                        " references item " + std::to_string(it) + " outside array '" +
                        a.name + "'");
        }
      } else if (src.kind == detail::InputKind::elem_comp) {
        const ArrayDef& a = arrays_[src.array];
        if (a.items != n_elems)
          throw Error("energy '" + def.name + "': per-element array '" + a.name +
                      "' has " + std::to_string(a.items) + " items for " +
                      std::to_string(n_elems) + " elements");
      }
    }
  }

  ExprDigest kernel_key(const EnergyDef& def, const char* domain,
                        std::span<const NodeId> roots) const {
    detail::Sha256 ctx;
    static const char tag[] = "symel-kernel-key-v1";
    ctx.update(tag, sizeof(tag) - 1);
    ctx.update(domain, std::char_traits<char>::length(domain));
    const std::uint32_t ni = def.n_inputs();
    ctx.update(&ni, sizeof ni);
    const std::uint32_t nd = def.n_dofs();
    ctx.update(&nd, sizeof nd);
    for (std::uint32_t s : def.dof_slots) ctx.update(&s, sizeof s);
    def.graph->digest_update(ctx, roots);
    return ExprDigest{ctx.finish()};
  }

  std::vector<ArrayDef> arrays_;
  std::vector<ConnDef> conns_;
  std::vector<std::unique_ptr<EnergyDef>> energies_;
  std::vector<std::function<void()>> hooks_;
  std::vector<std::tuple<std::uint32_t, std::size_t, std::uint32_t>> pins_;

  mutable DofLayout layout_;
  mutable std::unordered_map<std::uint32_t, std::size_t> set_of_array_;
  mutable std::vector<std::uint8_t> pinned_;
  mutable bool layout_dirty_ = true;
  mutable bool pins_dirty_ = true;
  bool topology_dirty_ = true;
  std::uint64_t topology_stamp_ = 0;
  std::uint64_t diff_count_ = 0;
  std::function<void(const std::string&)> warn_;
};

// Symbolic definition interface passed to the energy callback. Every bind_*
// and param call appends kernel input slots in call order.
class EnergyBuilder {
 public:
  ExprGraph& graph() { return *def_->graph; }

  // Components of the item selected by connectivity tuple slot `tuple_slot`.
  // Binding a dof array contributes dofs; any other array contributes
  // parameters.
  Vector bind(ArrayHandle array, std::uint32_t tuple_slot) {
    const auto& a = sys_->arr(array);
    check_tuple_slot(tuple_slot);
    Vector v(*def_->graph);
    for (std::uint32_t cmp = 0; cmp < a.comps; ++cmp)
      v.push_back(add_input(detail::InputKind::item_comp, array.idx, tuple_slot, cmp,
                            nullptr, a.is_dof,
                            a.name + "[" + std::to_string(tuple_slot) + "]." +
                                std::to_string(cmp)));
    return v;
  }

  Scalar bind_scalar(ArrayHandle array, std::uint32_t tuple_slot) {
    const auto& a = sys_->arr(array);
    if (a.comps != 1)
      throw Error("bind_scalar: array '" + a.name + "' has " + std::to_string(a.comps) +
                  " components");
    return bind(array, tuple_slot)[0];
  }

  // Per-element parameters: row `elem` of the array feeds element `elem`.
  Vector bind_element(ArrayHandle array) {
    const auto& a = sys_->arr(array);
    if (a.is_dof) throw Error("bind_element: dof array '" + a.name + "' not allowed");
    Vector v(*def_->graph);
    for (std::uint32_t cmp = 0; cmp < a.comps; ++cmp)
      v.push_back(add_input(detail::InputKind::elem_comp, array.idx, 0, cmp, nullptr,
                            false, a.name + "[elem]." + std::to_string(cmp)));
    return v;
  }

  Scalar bind_element_scalar(ArrayHandle array) {
    const auto& a = sys_->arr(array);
    if (a.comps != 1)
      throw Error("bind_element_scalar: array '" + a.name + "' has " +
                  std::to_string(a.comps) + " components");
    return bind_element(array)[0];
  }

  // Runtime scalar read from host memory at every gather; changing the value
  // never rebuilds the kernel. The referenced double must outlive the system.
  Scalar param(const double& host, std::string name = "param") {
    return add_input(detail::InputKind::param, 0, 0, 0, &host, false, std::move(name));
  }
  Scalar param(const double&& host, std::string name = "param") = delete;

  Scalar constant(double v) { return def_->graph->constant(v); }

  // Fixed summation: builds `fn` once over symbolic item components; the
  // kernel runs once per row of `items` and results accumulate left to
  // right. The returned scalar must be passed to set() unchanged.
  Scalar sum_items(const std::vector<std::vector<double>>& items,
                   const std::function<Scalar(const Vector&)>& fn) {
    if (def_->is_sum) throw Error("sum_items: already used for energy '" + def_->name + "'");
    std::uint32_t arity = 0;
    if (items.empty()) {
      sys_->warn("energy '" + def_->name + "': fixed summation over zero items, contributes 0");
    } else {
      arity = static_cast<std::uint32_t>(items[0].size());
      if (arity == 0) throw Error("sum_items: empty item tuples");
      for (const auto& row : items)
        if (row.size() != arity) throw Error("sum_items: ragged item table");
    }
    def_->is_sum = true;
    def_->sum_items = items;
    def_->sum_arity = arity;
    if (items.empty()) {
      sum_root_ = def_->graph->constant(0.0).id();
      return Scalar(*def_->graph, sum_root_);
    }
    Vector item(*def_->graph);
    for (std::uint32_t k = 0; k < arity; ++k)
      item.push_back(add_input(detail::InputKind::sum_comp, 0, k, 0, nullptr, false,
                               "sum_item." + std::to_string(k)));
    const Scalar body = fn(item);
    if (&body.graph() != def_->graph.get())
      throw Error("sum_items: body built on a foreign graph");
    sum_root_ = body.id();
    return body;
  }

  void set(const Scalar& energy) {
    if (def_->energy_root != kInvalidNode)
      throw Error("energy '" + def_->name + "': set() called twice");
    if (&energy.graph() != def_->graph.get())
      throw Error("energy '" + def_->name + "': expression from a foreign graph");
    if (def_->is_sum && energy.id() != sum_root_)
      throw Error("energy '" + def_->name +
                  "': with sum_items the summed expression must be set unchanged");
    def_->energy_root = energy.id();
  }

  void set(const Scalar& energy, const Condition& activation) {
    set(energy);
    if (&activation.value.graph() != def_->graph.get())
      throw Error("energy '" + def_->name + "': activation from a foreign graph");
    def_->act_root = activation.value.id();
    def_->act_kind = activation.kind;
  }

  // Line-search guard: a trial state is rejected while the element-wise
  // minimum of this expression is <= 0.
  void set_guard(const Scalar& guard) {
    if (def_->guard_root != kInvalidNode)
      throw Error("energy '" + def_->name + "': set_guard() called twice");
    if (&guard.graph() != def_->graph.get())
      throw Error("energy '" + def_->name + "': guard from a foreign graph");
    def_->guard_root = guard.id();
  }

 private:
  friend class EnergySystem;
  EnergyBuilder(EnergySystem& sys, EnergyDef& def) : sys_(&sys), def_(&def) {}

  void check_tuple_slot(std::uint32_t tuple_slot) const {
    const auto& c = sys_->conn(def_->conn);
    if (tuple_slot >= c.arity)
      throw Error("energy '" + def_->name + "': tuple slot " + std::to_string(tuple_slot) +
                  " outside connectivity arity " + std::to_string(c.arity));
  }

  Scalar add_input(detail::InputKind kind, std::uint32_t array, std::uint32_t tuple_slot,
                   std::uint32_t comp, const double* host, bool is_dof, std::string name) {
    const auto slot = static_cast<int>(def_->inputs.size());
    detail::InputSrc src;
    src.kind = kind;
    src.array = array;
    src.tuple_slot = tuple_slot;
    src.comp = comp;
    src.host = host;
    def_->inputs.push_back(src);
    Scalar sym = def_->graph->symbol(std::move(name), slot);
    if (is_dof) {
      def_->dof_slots.push_back(static_cast<std::uint32_t>(slot));
      def_->dof_binds.push_back({array, tuple_slot, comp});
      def_->dof_syms.push_back(sym.id());
    }
    return sym;
  }

  EnergySystem* sys_;
  EnergyDef* def_;
  NodeId sum_root_ = kInvalidNode;
};

inline EnergyHandle EnergySystem::add_energy(
    std::string name, ConnHandle conn_h,
    const std::function<void(EnergyBuilder&)>& define) {
  conn(conn_h);  // validates the handle
  for (const auto& d : energies_)
    if (d->name == name) throw Error("energy '" + name + "' already registered");
  auto def = std::make_unique<EnergyDef>();
  def->name = std::move(name);
  def->conn = conn_h;
  def->graph = std::make_unique<ExprGraph>();
  EnergyBuilder b(*this, *def);
  define(b);
  if (def->energy_root == kInvalidNode)
    throw Error("energy '" + def->name + "': definition did not call set()");
  energies_.push_back(std::move(def));
  topology_dirty_ = true;
  return EnergyHandle{static_cast<std::uint32_t>(energies_.size() - 1)};
}

inline void EnergySystem::compile_kernels(KernelCache& cache) {
  for (auto& defp : energies_) {
    EnergyDef& def = *defp;
    ExprGraph& g = *def.graph;
    if (!def.deriv_kernel.valid()) {
      const NodeId roots[1] = {def.energy_root};
      const ExprDigest key = kernel_key(def, "deriv", roots);
      def.deriv_kernel = cache.get_or_build(key, [&]() {
        ++diff_count_;
        DerivativeBundle b = gradient_hessian(g, def.energy_root, def.dof_syms);
        const auto out_roots = b.output_roots();
        const EvalPlan plan = compress(g, out_roots);
        return lower(g, plan, def.n_inputs(), def.n_dofs());
      });
      const std::uint32_t want = 1 + def.n_dofs() + def.n_dofs() * def.n_dofs();
      if (def.deriv_kernel.n_outputs() != want || def.deriv_kernel.n_inputs() != def.n_inputs())
        throw Error("energy '" + def.name + "': cached kernel layout mismatch");
    }
    if (def.has_activation() && !def.act_kernel.valid()) {
      const NodeId roots[1] = {def.act_root};
      def.act_kernel = cache.get_or_build(kernel_key(def, "act", roots), [&]() {
        const EvalPlan plan = compress(g, roots);
        return lower(g, plan, def.n_inputs(), def.n_dofs());
      });
    }
    if (def.has_guard() && !def.guard_kernel.valid()) {
      const NodeId roots[1] = {def.guard_root};
      def.guard_kernel = cache.get_or_build(kernel_key(def, "guard", roots), [&]() {
        const EvalPlan plan = compress(g, roots);
        return lower(g, plan, def.n_inputs(), def.n_dofs());
      });
    }
  }
}

}  // namespace symel
