#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <unordered_map>
#include <utility>

#include <nlohmann/json.hpp>

#include "symel/kernel.hpp"

namespace symel {

struct CacheStats {
  std::uint64_t builds = 0;       // tapes produced by the builder callback
  std::uint64_t memory_hits = 0;  // served from the in-process map
  std::uint64_t disk_hits = 0;    // served from cache files
  std::uint64_t corrupt = 0;      // unreadable cache entries, rebuilt and overwritten
  std::uint64_t recompiles = 0;   // tape found on disk but shared object rebuilt
};

// Kernel store keyed by expression digest. Lookups are resolved before any
// differentiation happens: the builder callback runs only on a true miss.
// A corrupt cache entry is a miss; it is rebuilt, overwritten and reported
// through the warning handler, never an error.
class KernelCache {
 public:
  using BuildFn = std::function<Tape()>;
  using WarnFn = std::function<void(const std::string&)>;

  KernelCache() = default;

  explicit KernelCache(std::filesystem::path dir,
                       KernelBackend backend = KernelBackend::interp,
                       bool fast_math = false)
      : dir_(std::move(dir)), backend_(backend), fast_math_(fast_math) {
    if (!dir_.empty()) std::filesystem::create_directories(dir_);
  }

  void set_backend(KernelBackend backend, bool fast_math = false) {
    backend_ = backend;
    fast_math_ = fast_math;
  }
  void set_dir(std::filesystem::path dir) {
    dir_ = std::move(dir);
    if (!dir_.empty()) std::filesystem::create_directories(dir_);
  }
  KernelBackend backend() const { return backend_; }
  const std::filesystem::path& dir() const { return dir_; }

  void set_warning_handler(WarnFn fn) { warn_ = std::move(fn); }

  const CacheStats& stats() const { return stats_; }
  void reset_stats() { stats_ = CacheStats{}; }
  void clear_memory() {
    std::lock_guard lock(mu_);
    memory_.clear();
  }

  Kernel get_or_build(const ExprDigest& key, const BuildFn& build) {
    std::lock_guard lock(mu_);
    if (auto it = memory_.find(key); it != memory_.end()) {
      ++stats_.memory_hits;
      return it->second;
    }
    if (!dir_.empty()) {
      if (Kernel k; load_from_disk(key, k)) {
        ++stats_.disk_hits;
        memory_.emplace(key, k);
        return k;
      }
    }
    Tape tape = build();
    tape.digest = key;  // cache key names the files, not the raw output digest
    ++stats_.builds;
    Kernel k = materialize(tape);
    if (!dir_.empty()) store_to_disk(tape);
    memory_.emplace(key, k);
    return k;
  }

 private:
  struct DigestHash {
    std::size_t operator()(const ExprDigest& d) const {
      std::size_t h = 0;
      for (int i = 0; i < 8; ++i) h |= std::size_t(d.bytes[i]) << (8 * i);
      return h;
    }
  };

  void warn(const std::string& msg) const {
    if (warn_) {
      warn_(msg);
    } else {
      std::fprintf(stderr, "[symel] warning: %s\n", msg.c_str());
    }
  }

  std::filesystem::path tape_path(const ExprDigest& key) const {
    return dir_ / (key.hex() + ".tape");
  }
  std::filesystem::path meta_path(const ExprDigest& key) const {
    return dir_ / (key.hex() + ".meta");
  }
  std::filesystem::path so_path(const ExprDigest& key) const {
    return dir_ / (key.hex() + ".bin");
  }

  Kernel materialize(const Tape& tape) const {
    if (backend_ == KernelBackend::source)
      return Kernel::compile_source(tape, dir_.empty() ? "." : dir_, fast_math_);
    return Kernel(tape);
  }

  bool load_from_disk(const ExprDigest& key, Kernel& out) {
    const auto tpath = tape_path(key);
    if (!std::filesystem::exists(tpath)) return false;
    try {
      Tape tape = Tape::load(tpath);
      validate_meta(key, tape);
      if (tape.digest != key)
        throw Error("cache entry digest mismatch in " + tpath.string());
      if (backend_ == KernelBackend::source) {
        const auto spath = so_path(key);
        if (std::filesystem::exists(spath)) {
          try {
            out = Kernel::from_shared_object(tape, spath);
            return true;
          } catch (const Error& e) {
            warn(std::string("cached kernel object rejected, recompiling: ") + e.what());
          }
        }
        ++stats_.recompiles;
        out = Kernel::compile_source(tape, dir_, fast_math_);
        return true;
      }
      out = Kernel(tape);
      return true;
    } catch (const Error& e) {
      ++stats_.corrupt;
      warn(std::string("corrupt cache entry, rebuilding: ") + e.what());
      return false;
    }
  }

  void validate_meta(const ExprDigest& key, const Tape& tape) const {
    std::ifstream is(meta_path(key));
    if (!is) throw Error("missing cache metadata " + meta_path(key).string());
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error("unreadable cache metadata " + meta_path(key).string() + ": " + e.what());
    }
    const auto expect_u32 = [&](const char* field, std::uint32_t got) {
      if (!j.contains(field) || !j[field].is_number_unsigned() ||
          j[field].get<std::uint64_t>() != got)
        throw Error(std::string("cache metadata field '") + field + "' mismatch in " +
                    meta_path(key).string());
    };
    expect_u32("format_version", kTapeFormatVersion);
    expect_u32("n_inputs", tape.n_inputs);
    expect_u32("n_outputs", tape.n_outputs);
    expect_u32("n_dofs", tape.n_dofs);
  }

  void store_to_disk(const Tape& tape) const {
    tape.save(tape_path(tape.digest));
    nlohmann::json j{{"format_version", kTapeFormatVersion},
                     {"n_inputs", tape.n_inputs},
                     {"n_outputs", tape.n_outputs},
                     {"n_dofs", tape.n_dofs}};
    std::ofstream os(meta_path(tape.digest), std::ios::trunc);
    if (!os) throw Error("cannot write cache metadata " + meta_path(tape.digest).string());
    os << j.dump(2) << "\n";
  }

  std::filesystem::path dir_;
  KernelBackend backend_ = KernelBackend::interp;
  bool fast_math_ = false;
  WarnFn warn_;
  CacheStats stats_;
  std::unordered_map<ExprDigest, Kernel, DigestHash> memory_;
  mutable std::mutex mu_;
};

}  // namespace symel
