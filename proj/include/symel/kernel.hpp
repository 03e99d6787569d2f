#pragma once

#include <dlfcn.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "symel/tape.hpp"

namespace symel {

enum class KernelBackend { interp, source };

namespace detail {

inline std::string run_command(const std::string& cmd, int& exit_code) {
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) throw Error("failed to launch: " + cmd);
  std::string output;
  char buf[512];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) output.append(buf, n);
  const int status = ::pclose(pipe);
  exit_code = (status != -1 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
  return output;
}

struct SharedObject {
  void* handle = nullptr;
  ~SharedObject() {
    if (handle) ::dlclose(handle);
  }
};

}  // namespace detail

// Emits a self-contained translation unit for one tape. The exported entry
// point matches the interpreter's batch layout exactly:
//   extern "C" void symel_kernel(const double* in, double* out, long W)
// Constants are materialized from stored bit patterns, not decimal literals.
inline std::string emit_kernel_source(const Tape& t) {
  std::ostringstream os;
  os << "#include <cmath>\n#include <cstring>\n\n";
  os << "static inline double sy_bits(unsigned long long u) {\n"
        "  double d; std::memcpy(&d, &u, 8); return d;\n}\n\n";
  os << "static inline double sy_powi(double x, long long n) {\n"
        "  if (n < 0) return 1.0 / sy_powi(x, -n);\n"
        "  double r = 1.0;\n"
        "  while (n-- > 0) r *= x;\n"
        "  return r;\n}\n\n";
  if (!t.consts.empty()) {
    os << "static const unsigned long long kCBits[" << t.consts.size() << "] = {\n";
    for (std::size_t i = 0; i < t.consts.size(); ++i) {
      os << "  0x" << std::hex << std::bit_cast<std::uint64_t>(t.consts[i]) << std::dec
         << "ull,  // " << t.consts[i] << "\n";
    }
    os << "};\n\n";
  }
  os << "extern \"C\" void symel_kernel(const double* in, double* out, long W) {\n";
  os << "  for (long l = 0; l < W; ++l) {\n";
  for (std::uint32_t i = 0; i < t.n_inputs; ++i)
    os << "    const double v" << i << " = in[" << i << "*W + l];\n";
  for (std::size_t k = 0; k < t.consts.size(); ++k)
    os << "    const double v" << (t.n_inputs + k) << " = sy_bits(kCBits[" << k << "]);\n";
  for (const TapeInstr& ins : t.instrs) {
    os << "    const double v" << ins.dst << " = ";
    const std::string a = "v" + std::to_string(ins.a);
    const std::string b = "v" + std::to_string(ins.b);
    const std::string c = "v" + std::to_string(ins.c);
    switch (ins.op) {
      case Op::add: os << a << " + " << b; break;
      case Op::sub: os << a << " - " << b; break;
      case Op::mul: os << a << " * " << b; break;
      case Op::div: os << a << " / " << b; break;
      case Op::neg: os << "-" << a; break;
      case Op::pow_int: os << "sy_powi(" << a << ", " << ins.iarg << ")"; break;
      case Op::sqrt: os << "std::sqrt(" << a << ")"; break;
      case Op::log: os << "std::log(" << a << ")"; break;
      case Op::sin: os << "std::sin(" << a << ")"; break;
      case Op::cos: os << "std::cos(" << a << ")"; break;
      case Op::branch: os << a << " >= 0.0 ? " << b << " : " << c; break;
      case Op::symbol:
      case Op::constant: throw Error("emit: malformed instruction");
    }
    os << ";\n";
  }
  for (std::size_t k = 0; k < t.out_regs.size(); ++k)
    os << "    out[" << k << "*W + l] = v" << t.out_regs[k] << ";\n";
  os << "  }\n}\n";
  return os.str();
}

using KernelFn = void (*)(const double*, double*, long);

// Executable energy kernel. The interpreted backend walks the tape with
// strict IEEE semantics; the source backend compiles the emitted translation
// unit to a shared object and binds its entry point. Compilation failure is
// an error carrying the compiler output; there is no silent fallback.
class Kernel {
 public:
  Kernel() = default;

  explicit Kernel(Tape tape)
      : tape_(std::make_shared<Tape>(std::move(tape))), backend_(KernelBackend::interp) {}

  static Kernel compile_source(const Tape& tape, const std::filesystem::path& dir,
                               bool fast_math = false) {
    std::filesystem::create_directories(dir);
    const std::string stem = tape.digest.hex();
    const auto src_path = dir / (stem + ".cpp");
    const auto so_path = dir / (stem + ".bin");
    {
      std::ofstream os(src_path, std::ios::trunc);
      if (!os) throw Error("cannot write kernel source " + src_path.string());
      os << emit_kernel_source(tape);
    }
    std::string cmd = "c++ -O2 -std=c++17 -shared -fPIC -ffp-contract=off";
    if (fast_math) cmd += " -ffast-math";
    cmd += " -o '" + so_path.string() + "' '" + src_path.string() + "' 2>&1";
    int exit_code = 0;
    const std::string log = detail::run_command(cmd, exit_code);
    if (exit_code != 0)
      throw Error("kernel compilation failed (exit " + std::to_string(exit_code) +
                  "):\n" + cmd + "\n" + log);
    return from_shared_object(tape, so_path);
  }

  static Kernel from_shared_object(const Tape& tape, const std::filesystem::path& so_path) {
    auto so = std::make_shared<detail::SharedObject>();
    so->handle = ::dlopen(so_path.c_str(), RTLD_NOW | RTLD_LOCAL);
    if (!so->handle) {
      const char* err = ::dlerror();
      throw Error("dlopen failed for " + so_path.string() + ": " +
                  (err ? err : "unknown error"));
    }
    void* sym = ::dlsym(so->handle, "symel_kernel");
    if (!sym) throw Error("symbol symel_kernel missing in " + so_path.string());
    Kernel k;
    k.tape_ = std::make_shared<Tape>(tape);
    k.backend_ = KernelBackend::source;
    k.so_ = std::move(so);
    k.fn_ = reinterpret_cast<KernelFn>(sym);
    return k;
  }

  bool valid() const { return tape_ != nullptr; }
  KernelBackend backend() const { return backend_; }
  const Tape& tape() const {
    if (!tape_) throw Error("use of empty kernel");
    return *tape_;
  }
  std::uint32_t n_inputs() const { return tape().n_inputs; }
  std::uint32_t n_outputs() const { return tape().n_outputs; }
  std::uint32_t n_dofs() const { return tape().n_dofs; }

  void eval(const double* in, double* out, std::vector<double>& scratch) const {
    eval_batch(in, out, 1, scratch);
  }

  void eval_batch(const double* in, double* out, long W,
                  std::vector<double>& scratch) const {
    if (backend_ == KernelBackend::source) {
      fn_(in, out, W);
      return;
    }
    tape().eval_batch(in, out, W, scratch);
  }

 private:
  std::shared_ptr<Tape> tape_;
  KernelBackend backend_ = KernelBackend::interp;
  std::shared_ptr<detail::SharedObject> so_;
  KernelFn fn_ = nullptr;
};

}  // namespace symel
