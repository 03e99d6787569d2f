#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <vector>

#include "symel/detail/parallel.hpp"
#include "symel/registry.hpp"

namespace symel {

// Sparse matrix of dense b x b blocks, compressed by block row. Block values
// are row-major. Column indices are sorted within each row.
struct BcrsMatrix {
  int b = 1;
  std::size_t n_block_rows = 0;
  std::vector<std::size_t> row_ptr;  // size n_block_rows + 1
  std::vector<std::size_t> col_idx;  // block column per stored block
  std::vector<double> values;        // col_idx.size() * b * b

  std::size_t n_rows() const { return n_block_rows * static_cast<std::size_t>(b); }
  std::size_t n_blocks() const { return col_idx.size(); }

  double* block(std::size_t k) { return values.data() + k * b * b; }
  const double* block(std::size_t k) const { return values.data() + k * b * b; }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t find_block(std::size_t row, std::size_t col) const {
    const auto first = col_idx.begin() + static_cast<std::ptrdiff_t>(row_ptr[row]);
    const auto last = col_idx.begin() + static_cast<std::ptrdiff_t>(row_ptr[row + 1]);
    const auto it = std::lower_bound(first, last, col);
    if (it == last || *it != col) return npos;
    return static_cast<std::size_t>(it - col_idx.begin());
  }

  void set_zero() { std::fill(values.begin(), values.end(), 0.0); }

  // y = A x, deterministic for any thread count (rows are independent).
  void matvec(std::span<const double> x, std::span<double> y, int threads = 1) const {
    if (x.size() != n_rows() || y.size() != n_rows()) throw Error("matvec: size mismatch");
    const int bb = b;
    detail::parallel_for(n_block_rows, threads, [&](std::size_t r) {
      double acc[16] = {};  // b <= 3 in practice; 16 covers any small b
      double* yr = acc;
      for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
        const double* v = block(k);
        const double* xc = x.data() + col_idx[k] * bb;
        for (int i = 0; i < bb; ++i)
          for (int j = 0; j < bb; ++j) yr[i] += v[i * bb + j] * xc[j];
      }
      for (int i = 0; i < bb; ++i) y[r * bb + i] = yr[i];
    });
  }

  void dump(std::ostream& os) const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%d %zu %zu\n", b, n_block_rows, n_blocks());
    os << buf;
    for (std::size_t r = 0; r < n_block_rows; ++r)
      for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
        os << "(" << r << " " << col_idx[k] << ")";
        const double* v = block(k);
        for (int e = 0; e < b * b; ++e) {
          std::snprintf(buf, sizeof buf, " %.17g", v[e]);
          os << buf;
        }
        os << "\n";
      }
  }
};

struct AssembleTimings {
  double eval_ms = 0.0;      // kernel evaluation (phase 1)
  double assemble_ms = 0.0;  // pattern upkeep and scatter (phase 2)
};

// Evaluates all registered energies over their active elements and assembles
// the global energy, gradient and blocked sparse Hessian.
//
// Assembly is deterministic for any thread count and lane width: phase 1
// writes per-element kernel outputs to disjoint buffer slices in parallel;
// phase 2 scatters per block row over precomputed references in a fixed
// order. Activation is re-evaluated once per assemble() and stays frozen for
// energy_only()/guard_min() calls in between (line search).
class Assembler {
 public:
  Assembler(EnergySystem& sys, KernelCache& cache, int threads = 1, int lanes = 4)
      : sys_(&sys), cache_(&cache), threads_(threads), lanes_(lanes) {
    if (lanes_ <= 0) throw Error("assembler: lane width must be positive");
    if (threads_ <= 0) throw Error("assembler: thread count must be positive");
  }

  EnergySystem& system() { return *sys_; }
  const EnergySystem& system() const { return *sys_; }

  void set_threads(int t) {
    if (t <= 0) throw Error("assembler: thread count must be positive");
    threads_ = t;
  }
  int threads() const { return threads_; }
  int lanes() const { return lanes_; }

  double assemble() {
    sys_->run_assemble_hooks();
    prepare();
    refresh_activation();
    ensure_pattern();

    const auto t0 = std::chrono::steady_clock::now();
    evaluate_active();
    const auto t1 = std::chrono::steady_clock::now();
    check_finite();
    const double E = sum_energy();
    scatter();
    apply_pins();
    const auto t2 = std::chrono::steady_clock::now();
    timings_.eval_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    timings_.assemble_ms += std::chrono::duration<double, std::milli>(t2 - t1).count();
    energy_ = E;
    return E;
  }

  // Energy over the currently active elements; no hooks, no activation
  // refresh, no derivative scatter. Non-finite values are returned, not
  // thrown: the line search treats them as a rejected trial.
  double energy_only() {
    prepare();
    ensure_pattern();
    const auto t0 = std::chrono::steady_clock::now();
    evaluate_active();
    const auto t1 = std::chrono::steady_clock::now();
    timings_.eval_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    return sum_energy();
  }

  // Minimum guard value over all elements (active or not) of every guarded
  // energy. +inf when nothing is guarded; NaN maps to -inf (reject).
  double guard_min() {
    prepare();
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> in, out, scratch;
    for (std::size_t d = 0; d < sys_->n_energies(); ++d) {
      const EnergyDef& def = sys_->energy_at(d);
      if (!def.has_guard()) continue;
      const std::size_t ne = sys_->n_elements(def.conn);
      in.resize(def.n_inputs());
      out.resize(1);
      for (std::size_t e = 0; e < ne; ++e) {
        double gmin = std::numeric_limits<double>::infinity();
        if (def.is_sum) {
          for (const auto& row : def.sum_items) {
            sys_->gather_element_inputs(def, e, row.data(), in.data());
            def.guard_kernel.eval(in.data(), out.data(), scratch);
            gmin = out[0] < gmin ? out[0] : gmin;
            if (std::isnan(out[0])) gmin = -std::numeric_limits<double>::infinity();
          }
          if (def.sum_items.empty()) continue;
        } else {
          sys_->gather_element_inputs(def, e, nullptr, in.data());
          def.guard_kernel.eval(in.data(), out.data(), scratch);
          gmin = out[0];
          if (std::isnan(out[0])) gmin = -std::numeric_limits<double>::infinity();
        }
        best = gmin < best ? gmin : best;
      }
    }
    return best;
  }

  const std::vector<double>& gradient() const { return grad_; }
  const BcrsMatrix& hessian() const { return mat_; }
  double energy() const { return energy_; }

  const std::vector<std::uint8_t>& active(std::size_t energy_idx) const {
    return rt_.at(energy_idx).active;
  }
  std::size_t active_count(std::size_t energy_idx) const {
    return rt_.at(energy_idx).active_elems.size();
  }

  const AssembleTimings& timings() const { return timings_; }
  void reset_timings() { timings_ = AssembleTimings{}; }

 private:
  struct HessRef {
    std::uint64_t src = 0;     // contrib_ offset
    std::uint32_t block = 0;   // block ordinal in mat_
    std::uint32_t offset = 0;  // entry within block
  };
  struct GradRef {
    std::uint64_t src = 0;
    std::uint64_t dof = 0;
  };
  struct DefRt {
    std::vector<std::uint8_t> active;
    std::vector<std::size_t> active_elems;
    std::size_t contrib_base = 0;
    std::size_t out_stride = 0;
    bool skip = false;  // fixed summation over zero items
  };

  void prepare() {
    if (sys_->topology_dirty()) sys_->refresh_topology();
    sys_->compile_kernels(*cache_);
    if (rt_.size() != sys_->n_energies()) {
      rt_.assign(sys_->n_energies(), DefRt{});
      pattern_stamp_ = ~0ull;
    }
    for (std::size_t d = 0; d < sys_->n_energies(); ++d) {
      const EnergyDef& def = sys_->energy_at(d);
      DefRt& rt = rt_[d];
      const std::size_t ne = sys_->n_elements(def.conn);
      rt.out_stride = 1 + std::size_t(def.n_dofs()) + std::size_t(def.n_dofs()) * def.n_dofs();
      rt.skip = def.is_sum && def.sum_items.empty();
      if (rt.active.size() != ne) {
        rt.active.assign(ne, 1);
        pattern_stamp_ = ~0ull;
      }
    }
  }

  void refresh_activation() {
    bool changed = false;
    std::vector<double> in, out, scratch;
    for (std::size_t d = 0; d < sys_->n_energies(); ++d) {
      const EnergyDef& def = sys_->energy_at(d);
      if (!def.has_activation()) continue;
      DefRt& rt = rt_[d];
      const std::size_t ne = rt.active.size();
      in.resize(def.n_inputs());
      out.resize(1);
      for (std::size_t e = 0; e < ne; ++e) {
        double v;
        if (def.is_sum) {
          if (def.sum_items.empty()) continue;
          // Activation of a fixed summation element: any item active.
          v = -std::numeric_limits<double>::infinity();
          for (const auto& row : def.sum_items) {
            sys_->gather_element_inputs(def, e, row.data(), in.data());
            def.act_kernel.eval(in.data(), out.data(), scratch);
            v = out[0] > v ? out[0] : v;
          }
        } else {
          sys_->gather_element_inputs(def, e, nullptr, in.data());
          def.act_kernel.eval(in.data(), out.data(), scratch);
          v = out[0];
        }
        const std::uint8_t a = Condition{{}, def.act_kind}.holds(v) ? 1 : 0;
        if (a != rt.active[e]) {
          rt.active[e] = a;
          changed = true;
        }
      }
    }
    if (changed) pattern_stamp_ = ~0ull;
  }

  void ensure_pattern() {
    if (pattern_stamp_ == sys_->topology_stamp() && !rt_.empty() &&
        pattern_stamp_ != ~0ull)
      return;
    build_pattern();
    pattern_stamp_ = sys_->topology_stamp();
  }

  void build_pattern() {
    const DofLayout& layout = sys_->layout();
    int b = 3;
    for (const DofLayout::Set& s : layout.sets)
      if (s.stride != 3) b = 1;
    if (layout.sets.empty()) b = 1;

    const std::size_t n = layout.n_dofs;
    mat_.b = b;
    mat_.n_block_rows = n / static_cast<std::size_t>(b);
    grad_.assign(n, 0.0);

    // Active element list and contribution buffer layout.
    std::size_t contrib_size = 0;
    for (std::size_t d = 0; d < sys_->n_energies(); ++d) {
      DefRt& rt = rt_[d];
      rt.active_elems.clear();
      if (!rt.skip)
        for (std::size_t e = 0; e < rt.active.size(); ++e)
          if (rt.active[e]) rt.active_elems.push_back(e);
      rt.contrib_base = contrib_size;
      contrib_size += rt.active_elems.size() * rt.out_stride;
    }
    contrib_.assign(contrib_size, 0.0);

    // Sparsity: off-diagonal blocks touched by active elements plus a
    // diagonal block for every row (preconditioner and pin projection rely
    // on the diagonal existing).
    std::vector<std::vector<std::size_t>> cols(mat_.n_block_rows);
    for (std::size_t r = 0; r < mat_.n_block_rows; ++r) cols[r].push_back(r);
    std::vector<std::size_t> dofs;
    for (std::size_t d = 0; d < sys_->n_energies(); ++d) {
      const EnergyDef& def = sys_->energy_at(d);
      const DefRt& rt = rt_[d];
      dofs.resize(def.n_dofs());
      for (std::size_t e : rt.active_elems) {
        sys_->element_dofs(def, e, dofs);
        for (std::size_t a = 0; a < dofs.size(); ++a)
          for (std::size_t c = 0; c < dofs.size(); ++c) {
            const std::size_t br = dofs[a] / b, bc = dofs[c] / b;
            if (br != bc) cols[br].push_back(bc);
          }
      }
    }
    mat_.row_ptr.assign(mat_.n_block_rows + 1, 0);
    for (std::size_t r = 0; r < mat_.n_block_rows; ++r) {
      auto& cr = cols[r];
      std::sort(cr.begin(), cr.end());
      cr.erase(std::unique(cr.begin(), cr.end()), cr.end());
      mat_.row_ptr[r + 1] = mat_.row_ptr[r] + cr.size();
    }
    mat_.col_idx.clear();
    mat_.col_idx.reserve(mat_.row_ptr.back());
    for (auto& cr : cols) mat_.col_idx.insert(mat_.col_idx.end(), cr.begin(), cr.end());
    mat_.values.assign(mat_.n_blocks() * b * b, 0.0);

    // Scatter references grouped by block row, preserving
    // (energy, element, row dof, col dof) order within each row.
    std::vector<std::size_t> hcount(mat_.n_block_rows + 1, 0);
    std::vector<std::size_t> gcount(mat_.n_block_rows + 1, 0);
    auto for_each_ref = [&](auto&& on_grad, auto&& on_hess) {
      std::vector<std::size_t> edofs;
      for (std::size_t d = 0; d < sys_->n_energies(); ++d) {
        const EnergyDef& def = sys_->energy_at(d);
        const DefRt& rt = rt_[d];
        const std::size_t nd = def.n_dofs();
        edofs.resize(nd);
        for (std::size_t o = 0; o < rt.active_elems.size(); ++o) {
          sys_->element_dofs(def, rt.active_elems[o], edofs);
          const std::size_t base = rt.contrib_base + o * rt.out_stride;
          for (std::size_t a = 0; a < nd; ++a) {
            on_grad(edofs[a] / b, base + 1 + a, edofs[a]);
            for (std::size_t c = 0; c < nd; ++c) {
              const std::size_t br = edofs[a] / b;
              const std::size_t k = mat_.find_block(br, edofs[c] / b);
              on_hess(br, base + 1 + nd + a * nd + c,
                      static_cast<std::uint32_t>(k),
                      static_cast<std::uint32_t>((edofs[a] % b) * b + (edofs[c] % b)));
            }
          }
        }
      }
    };
    for_each_ref([&](std::size_t r, std::size_t, std::size_t) { ++gcount[r + 1]; },
                 [&](std::size_t r, std::size_t, std::uint32_t, std::uint32_t) {
                   ++hcount[r + 1];
                 });
    for (std::size_t r = 0; r < mat_.n_block_rows; ++r) {
      gcount[r + 1] += gcount[r];
      hcount[r + 1] += hcount[r];
    }
    grad_row_ptr_ = gcount;
    hess_row_ptr_ = hcount;
    grad_refs_.resize(grad_row_ptr_.back());
    hess_refs_.resize(hess_row_ptr_.back());
    std::vector<std::size_t> gcur(grad_row_ptr_.begin(), grad_row_ptr_.end() - 1);
    std::vector<std::size_t> hcur(hess_row_ptr_.begin(), hess_row_ptr_.end() - 1);
    for_each_ref(
        [&](std::size_t r, std::size_t src, std::size_t dof) {
          grad_refs_[gcur[r]++] = GradRef{src, dof};
        },
        [&](std::size_t r, std::size_t src, std::uint32_t blk, std::uint32_t off) {
          hess_refs_[hcur[r]++] = HessRef{src, blk, off};
        });
  }

  void evaluate_active() {
    const int W = lanes_;
    for (std::size_t d = 0; d < sys_->n_energies(); ++d) {
      const EnergyDef& def = sys_->energy_at(d);
      const DefRt& rt = rt_[d];
      const std::size_t na = rt.active_elems.size();
      if (na == 0) continue;
      const std::size_t n_in = def.n_inputs();
      const std::size_t stride = rt.out_stride;
      const std::size_t n_chunks = (na + W - 1) / W;
      detail::parallel_for(n_chunks, threads_, [&](std::size_t chunk) {
        const std::size_t e0 = chunk * W;
        const std::size_t cnt = std::min<std::size_t>(W, na - e0);
        std::vector<double> in(n_in * W), out(stride * W), one(n_in), acc, scratch;
        auto gather = [&](const double* item) {
          for (std::size_t l = 0; l < static_cast<std::size_t>(W); ++l) {
            // Lanes past the end replay the last element; their outputs are
            // ignored below.
            const std::size_t e = rt.active_elems[e0 + std::min(l, cnt - 1)];
            sys_->gather_element_inputs(def, e, item, one.data());
            for (std::size_t s = 0; s < n_in; ++s) in[s * W + l] = one[s];
          }
        };
        if (def.is_sum) {
          acc.assign(stride * W, 0.0);
          bool first = true;
          for (const auto& row : def.sum_items) {
            gather(row.data());
            def.deriv_kernel.eval_batch(in.data(), out.data(), W, scratch);
            if (first) {
              acc = out;
              first = false;
            } else {
              for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += out[i];
            }
          }
          out = acc;
        } else {
          gather(nullptr);
          def.deriv_kernel.eval_batch(in.data(), out.data(), W, scratch);
        }
        for (std::size_t l = 0; l < cnt; ++l) {
          double* dst = contrib_.data() + rt.contrib_base + (e0 + l) * stride;
          for (std::size_t k = 0; k < stride; ++k) dst[k] = out[k * W + l];
        }
      });
    }
  }

  void check_finite() const {
    for (std::size_t d = 0; d < sys_->n_energies(); ++d) {
      const EnergyDef& def = sys_->energy_at(d);
      const DefRt& rt = rt_[d];
      for (std::size_t o = 0; o < rt.active_elems.size(); ++o) {
        const double* v = contrib_.data() + rt.contrib_base + o * rt.out_stride;
        for (std::size_t k = 0; k < rt.out_stride; ++k)
          if (!std::isfinite(v[k]))
            throw Error("energy '" + def.name + "': non-finite derivative output at element " +
                        std::to_string(rt.active_elems[o]));
      }
    }
  }

  double sum_energy() const {
    double E = 0.0;
    for (std::size_t d = 0; d < sys_->n_energies(); ++d) {
      const DefRt& rt = rt_[d];
      for (std::size_t o = 0; o < rt.active_elems.size(); ++o)
        E += contrib_[rt.contrib_base + o * rt.out_stride];
    }
    return E;
  }

  void scatter() {
    mat_.set_zero();
    std::fill(grad_.begin(), grad_.end(), 0.0);
    detail::parallel_for(mat_.n_block_rows, threads_, [&](std::size_t r) {
      for (std::size_t k = grad_row_ptr_[r]; k < grad_row_ptr_[r + 1]; ++k)
        grad_[grad_refs_[k].dof] += contrib_[grad_refs_[k].src];
      for (std::size_t k = hess_row_ptr_[r]; k < hess_row_ptr_[r + 1]; ++k) {
        const HessRef& ref = hess_refs_[k];
        mat_.values[std::size_t(ref.block) * mat_.b * mat_.b + ref.offset] +=
            contrib_[ref.src];
      }
    });
  }

  void apply_pins() {
    const auto& mask = sys_->pinned();
    if (mask.empty()) return;
    bool any = false;
    for (std::uint8_t m : mask) any = any || m;
    if (!any) return;
    const int b = mat_.b;
    for (std::size_t dof = 0; dof < mask.size(); ++dof)
      if (mask[dof]) grad_[dof] = 0.0;
    for (std::size_t r = 0; r < mat_.n_block_rows; ++r)
      for (std::size_t k = mat_.row_ptr[r]; k < mat_.row_ptr[r + 1]; ++k) {
        double* v = mat_.block(k);
        const std::size_t c = mat_.col_idx[k];
        for (int i = 0; i < b; ++i) {
          const bool pr = mask[r * b + i] != 0;
          for (int j = 0; j < b; ++j) {
            if (pr || mask[c * b + j]) v[i * b + j] = 0.0;
          }
        }
      }
    for (std::size_t dof = 0; dof < mask.size(); ++dof) {
      if (!mask[dof]) continue;
      const std::size_t k = mat_.find_block(dof / b, dof / b);
      mat_.block(k)[(dof % b) * b + (dof % b)] = 1.0;
    }
  }

  EnergySystem* sys_;
  KernelCache* cache_;
  int threads_;
  int lanes_;

  std::vector<DefRt> rt_;
  std::vector<double> contrib_;
  std::vector<double> grad_;
  BcrsMatrix mat_;
  double energy_ = 0.0;

  std::vector<std::size_t> grad_row_ptr_, hess_row_ptr_;
  std::vector<GradRef> grad_refs_;
  std::vector<HessRef> hess_refs_;

  std::uint64_t pattern_stamp_ = ~0ull;
  AssembleTimings timings_;
};

}  // namespace symel
