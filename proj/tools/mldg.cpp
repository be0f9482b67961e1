// mldg: generate corpora, train ERM/MLDG adapters, evaluate, sweep, analyze.
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mldg/commands.hpp"
#include "mldg/config.hpp"
#include "mldg/error.hpp"
#include "mldg/model.hpp"

namespace fs = std::filesystem;
using namespace mldg;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return kConfig;
    case ErrorKind::data: return kData;
    case ErrorKind::numeric: return kNumeric;
    default: return kOther;
  }
}

// Options shared by the config-driven subcommands.
struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::vector<std::uint64_t> seeds;
  std::string method;
  std::string rank;
  std::optional<std::uint64_t> data_seed;

  void attach(CLI::App* app, bool training) {
    app->add_option("--config", config, "Run config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override a config key, e.g. meta.n_pairs=3")->take_all();
    app->add_option("--out", out, "Output directory");
    app->add_option("--data-seed", data_seed, "Seed of the synthetic corpus");
    if (training) {
      app->add_option("--seeds", seeds, "Training seeds")->take_all();
      app->add_option("--method", method, "erm or mldg")->check(CLI::IsMember({"erm", "mldg"}));
      app->add_option("--rank", rank, "Adapter rank or 'none'");
    }
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config.empty()) c = load_config(config);
    std::vector<std::string> all = sets;
    if (data_seed) all.push_back("data.seed=" + std::to_string(*data_seed));
    if (!method.empty()) all.push_back("method=\"" + method + "\"");
    if (!rank.empty()) {
      const auto r = parse_rank(rank);
      all.push_back("adapter.rank=" + (r ? std::to_string(*r) : std::string("null")));
    }
    if (!seeds.empty()) {
      std::string list = "seeds=[";
      for (std::size_t i = 0; i < seeds.size(); ++i) list += (i ? "," : "") + std::to_string(seeds[i]);
      all.push_back(list + "]");
    }
    apply_overrides(c, all);
    if (!out.empty()) c.out = out;
    resolve_paths(c, fs::current_path());
    return c;
  }
};

void print_report(const EvalReport& report) {
  std::cout << "set\tn_seeds\tmean_eer\tstd_eer\n";
  for (const auto& a : report.aggregates) {
    std::cout << a.set << '\t' << a.n << '\t' << a.mean << '\t' << a.std << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned domain generalization for low-rank adapters"};
  app.require_subcommand(1);

  ConfigFlags gen_flags;
  bool force = false;
  auto* gen = app.add_subcommand("generate", "Write a synthetic corpus with manifest and receipt");
  gen_flags.attach(gen, false);
  gen->add_flag("--force", force, "Replace a non-empty output directory");

  ConfigFlags train_flags;
  bool quiet = false;
  auto* tr = app.add_subcommand("train", "Train one checkpoint per seed");
  train_flags.attach(tr, true);
  tr->add_flag("--quiet", quiet, "No per-epoch progress");

  std::string run_dir;
  bool det = false;
  auto* ev = app.add_subcommand("eval", "Score the eval sets with a run's checkpoints");
  ev->add_option("--run", run_dir, "Run directory written by train")->required()->check(CLI::ExistingDirectory);
  ev->add_flag("--det", det, "Also write probit DET curves");

  ConfigFlags sweep_flags;
  std::vector<std::string> sweep_ranks = {"2", "4", "8", "16"};
  std::vector<std::string> sweep_methods = {"erm", "mldg"};
  auto* sw = app.add_subcommand("sweep", "Train and evaluate every (method, rank) pair");
  sweep_flags.attach(sw, true);
  sw->add_option("--ranks", sweep_ranks, "Ranks (integers or 'none')")->take_all();
  sw->add_option("--methods", sweep_methods, "Methods")->take_all();
  sw->add_flag("--quiet", quiet, "No per-epoch progress");

  std::string checkpoint, compare, analyze_out = "analysis", label = "run", compare_label = "compare";
  double tau = 0.01;
  auto* an = app.add_subcommand("analyze", "Singular-value grids and effective ranks of adapters");
  an->add_option("--checkpoint", checkpoint, "Checkpoint to analyze")->required()->check(CLI::ExistingFile);
  an->add_option("--compare", compare, "Second checkpoint for a side-by-side table")->check(CLI::ExistingFile);
  an->add_option("--out", analyze_out, "Output directory");
  an->add_option("--label", label, "Column label of --checkpoint");
  an->add_option("--compare-label", compare_label, "Column label of --compare");
  an->add_option("--tau", tau, "Effective-rank threshold relative to sigma_1");

  std::uint64_t layers = 24, dim = 1024, prank = 16, targets = 4, head = 447000;
  auto* pc = app.add_subcommand("params", "Trainable-parameter count of an adapted backbone");
  pc->add_option("--layers", layers);
  pc->add_option("--dim", dim);
  pc->add_option("--rank", prank);
  pc->add_option("--targets", targets);
  pc->add_option("--head", head, "Back-end parameter count");

  ConfigFlags show_flags;
  auto* sc = app.add_subcommand("config", "Print the resolved config");
  show_flags.attach(sc, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      RunConfig c = gen_flags.resolve();
      if (gen_flags.out.empty()) throw Error(ErrorKind::config, "generate: --out is required");
      const auto r = cmd_generate(c, gen_flags.out, force);
      std::cout << "wrote " << r.n_train << " train, " << r.n_dev << " dev, " << r.n_eval << " eval examples to "
                << gen_flags.out << '\n';
    } else if (*tr) {
      const RunConfig c = train_flags.resolve();
      const auto summaries = cmd_train(c, quiet ? nullptr : &std::cerr);
      std::cout << "seed\tbest_epoch\tval_eer\n";
      for (const auto& s : summaries) std::cout << s.seed << '\t' << s.best_epoch << '\t' << s.val_eer << '\n';
    } else if (*ev) {
      print_report(cmd_eval(run_dir, det));
    } else if (*sw) {
      const RunConfig c = sweep_flags.resolve();
      std::vector<std::optional<int>> ranks;
      for (const auto& r : sweep_ranks) ranks.push_back(parse_rank(r));
      std::vector<Method> methods;
      for (const auto& m : sweep_methods) methods.push_back(method_from_string(m));
      const auto rows = cmd_sweep(c, ranks, methods, quiet ? nullptr : &std::cerr);
      std::cout << "method\trank\ttrainable_params";
      for (const auto& a : rows.front().results) std::cout << '\t' << a.set << "_mean\t" << a.set << "_std";
      std::cout << '\n';
      for (const auto& r : rows) {
        std::cout << to_string(r.method) << '\t' << rank_label(r.rank) << '\t' << r.trainable_params;
        for (const auto& a : r.results) std::cout << '\t' << a.mean << '\t' << a.std;
        std::cout << '\n';
      }
    } else if (*an) {
      std::vector<AnalyzeInput> inputs = {{label, checkpoint}};
      if (!compare.empty()) inputs.push_back({compare_label, compare});
      const auto result = cmd_analyze(inputs, analyze_out, tau);
      std::cout << "factor";
      for (const auto& [l, r] : result.reports) std::cout << '\t' << l;
      std::cout << '\n';
      for (FactorKind k : {FactorKind::A, FactorKind::B, FactorKind::AB}) {
        std::cout << to_string(k);
        for (const auto& [l, r] : result.reports) std::cout << '\t' << r.mean_effective_rank(k);
        std::cout << '\n';
      }
    } else if (*pc) {
      std::cout << count_trainable(layers, dim, dim, prank, targets, head) << '\n';
    } else if (*sc) {
      std::cout << to_canonical_text(show_flags.resolve());
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOk;
}
