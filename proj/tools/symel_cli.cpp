#include <cstdio>
#include <exception>

#include "CLI11.hpp"

#include "symel/scene.hpp"

int main(int argc, char** argv) {
  CLI::App app{"symbolic-energy simulation scene runner"};
  app.require_subcommand(1);

  symel::RunOptions opt;
  CLI::App* run = app.add_subcommand("run", "load a scene file and run time steps");
  run->add_option("--scene", opt.scene_path, "scene configuration file")->required();
  run->add_option("--output-dir", opt.output_dir, "directory for frames and logs")->required();
  run->add_option("--steps", opt.steps, "override the scene's step count");
  run->add_option("--dt", opt.dt, "override the scene's time step");
  run->add_option("--backend", opt.backend, "kernel backend")
      ->check(CLI::IsMember({"interp", "source"}));
  run->add_option("--threads", opt.threads, "worker threads for assembly");
  run->add_option("--lanes", opt.lanes, "kernel batch lane width");
  run->add_option("--cache-dir", opt.cache_dir, "kernel cache directory");
  run->add_flag("--no-cache", opt.no_cache, "keep kernels in memory only");
  run->add_option("--dump-hessian", opt.dump_hessian,
                  "write the Hessian at the start of this step (1-based)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const symel::RunSummary summary = symel::run_scene(opt);
    for (const symel::VariantResult& v : summary.variants) {
      std::printf("%s: %zu steps -> %s\n", v.name.c_str(), v.rows.size(),
                  v.output_dir.c_str());
      std::printf("  kernels: %zu built, %zu disk hits, %zu memory hits, %zu recompiles, "
                  "%zu corrupt; %zu differentiations\n",
                  v.cache.builds, v.cache.disk_hits, v.cache.memory_hits, v.cache.recompiles,
                  v.cache.corrupt, v.differentiations);
    }
    std::printf("total kernels built: %zu, total differentiations: %zu\n",
                summary.total_builds(), summary.total_differentiations());
    return 0;
  } catch (const symel::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
