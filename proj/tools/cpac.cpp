#include "cpac/commands.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

using namespace cpac;

namespace {

struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool baseline = false;
  bool deterministic = false;
  bool parallel = false;

  void attach(CLI::App* cmd, bool with_out = true) {
    cmd->add_option("--config", config, "key=value configuration file");
    cmd->add_option("--set", sets, "override one key, e.g. --set epochs=3")->allow_extra_args(false);
    cmd->add_option("--seed", seed, "master seed");
    if (with_out) cmd->add_option("--out", out, "output directory");
    cmd->add_flag("--baseline", baseline, "use dense convolution kernels");
    cmd->add_flag("--deterministic", deterministic, "single worker, bit-exact metrics (default)");
    cmd->add_flag("--parallel", parallel, "parallel batch gradients, real wall times");
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
    for (const std::string& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.network.training.seed = *seed;
    if (!out.empty()) cfg.out = out;
    if (baseline) cfg.network.baseline = true;
    if (deterministic && parallel) throw ConfigError("--deterministic and --parallel are exclusive");
    if (deterministic) cfg.deterministic = true;
    if (parallel) cfg.deterministic = false;
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CP-decomposed convolution networks: training, gradient checks, decomposition and inspection"};
  app.require_subcommand(1);

  ConfigFlags train_flags;
  std::optional<Index> train_rank;
  CLI::App* train = app.add_subcommand("train", "train a network and write metrics.csv and model.ckpt");
  train_flags.attach(train);
  train->add_option("--rank", train_rank, "rank of every CPAC layer");

  GradcheckOptions gc;
  std::string fault = "none";
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "check analytic gradients over the configuration grid");
  gradcheck->add_option("--seed", gc.seed, "instance seed");
  gradcheck->add_option("--inject-fault", fault, "corrupt one derivative: KN, KX, KY or KS");
  gradcheck->add_option("--out", gc.out_dir, "directory for gradcheck.csv");

  DecomposeOptions dec;
  CLI::App* decompose = app.add_subcommand("decompose", "CP-ALS decomposition of a 4-way kernel");
  auto* kernel_opt = decompose->add_option("--kernel", dec.kernel_file, "CPACTENSOR1 kernel file");
  auto* ckpt_opt = decompose->add_option("--checkpoint", dec.checkpoint, "baseline checkpoint");
  kernel_opt->excludes(ckpt_opt);
  decompose->add_option("--layer", dec.layer, "1-based layer of --checkpoint");
  decompose->add_option("--rank", dec.rank, "target rank")->required();
  decompose->add_option("--out", dec.out, "factor file; the error trace goes to <out>.trace.csv");
  decompose->add_option("--iters", dec.als.max_iters, "maximum ALS sweeps");
  decompose->add_option("--tol", dec.als.tol, "stop when the error changes less than this");
  decompose->add_option("--seed", dec.als.seed, "initialization seed");
  decompose->add_option("--restarts", dec.als.restarts, "extra random starts");
  decompose->add_option("--target-error", dec.als.target_error, "restart while the error is above this");

  InspectOptions ins;
  ConfigFlags ins_flags;
  CLI::App* inspect = app.add_subcommand("inspect", "per-rank feature maps and significance of a CPAC layer");
  inspect->add_option("--checkpoint", ins.checkpoint, "trained CPAC checkpoint")->required();
  inspect->add_option("--config", ins_flags.config, "data configuration (dataset, mnist_dir, ...)");
  inspect->add_option("--set", ins_flags.sets, "override one data key");
  inspect->add_option("--sample", ins.sample, "0-based test sample");
  inspect->add_option("--layer", ins.layer, "1-based layer");
  inspect->add_option("--out", ins.out_dir, "output directory");

  ConfigFlags sweep_flags;
  std::vector<Index> sweep_ranks;
  CLI::App* sweep = app.add_subcommand("sweep", "baseline plus one CPAC run per rank");
  sweep_flags.attach(sweep);
  sweep->add_option("--rank", sweep_ranks, "rank to train, repeatable");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (*train) {
    RunConfig cfg;
    if (const int code = guarded(
            [&] {
              cfg = train_flags.resolve();
              if (train_rank) cfg.set("rank", std::to_string(*train_rank));
              return kExitOk;
            },
            std::cerr))
      return code;
    return cmd_train(cfg, std::cout, std::cerr);
  }
  if (*gradcheck) {
    if (const int code = guarded(
            [&] {
              const std::optional<Fault> f = parse_fault(fault);
              if (!f) throw ConfigError("unknown fault '" + fault + "' (expected none, KN, KX, KY or KS)");
              gc.fault = *f;
              return kExitOk;
            },
            std::cerr))
      return code;
    return cmd_gradcheck(gc, std::cout, std::cerr);
  }
  if (*decompose) return cmd_decompose(dec, std::cout, std::cerr);
  if (*inspect) {
    if (const int code = guarded(
            [&] {
              ins.data = ins_flags.resolve();
              return kExitOk;
            },
            std::cerr))
      return code;
    return cmd_inspect(ins, std::cout, std::cerr);
  }
  RunConfig cfg;
  if (const int code = guarded(
          [&] {
            cfg = sweep_flags.resolve();
            return kExitOk;
          },
          std::cerr))
    return code;
  return cmd_sweep(cfg, sweep_ranks, std::cout, std::cerr);
}
