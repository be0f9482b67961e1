#include "mldg/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mldg/checkpoint.hpp"
#include "mldg/error.hpp"

namespace mldg {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create directory " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  return os;
}

DomainSet merged(const Corpus& c) {
  if (c.eval.size() > 0) return c.eval;
  DomainSet all;
  for (const DomainSet* s : {&c.train, &c.dev}) {
    for (const auto& d : s->domains) {
      auto& dst = all.domain(d.domain_id).examples;
      dst.insert(dst.end(), d.examples.begin(), d.examples.end());
    }
  }
  return all;
}

}  // namespace

std::string rank_label(const std::optional<int>& rank) { return rank ? std::to_string(*rank) : "none"; }

std::optional<int> parse_rank(const std::string& s) {
  if (s == "none") return std::nullopt;
  try {
    std::size_t pos = 0;
    const int r = std::stoi(s, &pos);
    if (pos == s.size()) return r;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::config, "rank must be an integer or 'none', got '" + s + "'");
}

RunData load_run_data(const RunConfig& config) {
  RunData data;
  if (config.manifest) {
    data.corpus = load_manifest(*config.manifest);
  } else {
    data.corpus = generate_corpus(config.corpus, config.data_seed);
  }
  if (config.eval_sets.empty()) {
    data.eval_sets.push_back({"heldout", data.corpus.eval});
  } else {
    for (const auto& ref : config.eval_sets) data.eval_sets.push_back({ref.name, merged(load_manifest(ref.manifest))});
  }
  return data;
}

void check_run_data(const RunConfig& config, const RunData& data) {
  const DomainSet& train = data.corpus.train;
  if (train.size() == 0) fail(ErrorKind::config, "data: no training examples");
  const Shape expected{static_cast<std::size_t>(config.model.seq_len), static_cast<std::size_t>(config.model.d_model)};
  const Tensor& first = train.domains.front().examples.front().features();
  if (first.shape() != expected) {
    fail(ErrorKind::config, "config/data mismatch: features are " + first.shape_string() + " but the model expects [" +
                                std::to_string(expected[0]) + ", " + std::to_string(expected[1]) + "]");
  }
  if (!data.corpus.dev.has_both_classes()) {
    fail(ErrorKind::config, "data: the dev split needs both bonafide and spoof examples");
  }
  if (config.method == Method::mldg) {
    config.train.meta.validate(train.num_domains());
    for (const auto& d : train.domains) {
      if (d.examples.size() < static_cast<std::size_t>(config.train.meta.per_domain_batch)) {
        fail(ErrorKind::config, "data: domain " + std::to_string(d.domain_id) + " has fewer examples than " +
                                    "meta.per_domain_batch");
      }
    }
  }
}

GenerateReceipt cmd_generate(const RunConfig& config, const fs::path& out, bool force) {
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) fail(ErrorKind::config, out.string() + " exists and is not a directory");
    if (!fs::is_empty(out)) {
      if (!force) fail(ErrorKind::config, "output directory " + out.string() + " is not empty (use --force)");
      fs::remove_all(out);
    }
  }
  const Corpus corpus = generate_corpus(config.corpus, config.data_seed);
  write_corpus(corpus, out);
  GenerateReceipt receipt;
  receipt.seed = config.data_seed;
  receipt.spec_hash = corpus_spec_hash(config.corpus);
  receipt.n_train = corpus.train.size();
  receipt.n_dev = corpus.dev.size();
  receipt.n_eval = corpus.eval.size();

  nlohmann::json j;
  j["seed"] = receipt.seed;
  j["spec_hash"] = hex(receipt.spec_hash);
  j["counts"] = {{"train", receipt.n_train}, {"dev", receipt.n_dev}, {"eval", receipt.n_eval}};
  j["spec"] = nlohmann::json::parse(corpus_spec_text(config.corpus));
  auto os = open_out(out / "receipt.json");
  os << j.dump(2) << '\n';
  return receipt;
}

fs::path checkpoint_path(const fs::path& run_dir, std::uint64_t seed) {
  return run_dir / ("seed_" + std::to_string(seed)) / "checkpoint.bin";
}

std::vector<SeedSummary> cmd_train(const RunConfig& requested, std::ostream* progress) {
  RunConfig config = requested;
  resolve_paths(config, fs::current_path());
  const RunData data = load_run_data(config);
  check_run_data(config, data);
  TrainConfig tc = config.train;
  tc.method = config.method;

  const fs::path out(config.out);
  ensure_dir(out);
  save_config(out / "config.json", config);
  const std::uint64_t hash = config_hash(config);

  std::vector<SeedSummary> summaries;
  for (std::uint64_t seed : config.seeds) {
    const fs::path dir = out / ("seed_" + std::to_string(seed));
    ensure_dir(dir);
    const Model model = build_model(config.model, config.options, seed);
    auto log = open_out(dir / "log.jsonl");
    auto on_epoch = [&](const EpochRecord& r) {
      nlohmann::json j = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_eer", r.val_eer},
                          {"lr", r.lr},       {"wall_time", r.wall_time}};
      log << j.dump() << '\n';
      if (progress) {
        *progress << "seed " << seed << " epoch " << r.epoch << " loss " << r.train_loss << " val_eer " << r.val_eer
                  << '\n';
      }
    };
    TrainResult result = train(model, data.corpus.train, data.corpus.dev, tc, seed, on_epoch);
    log.close();

    Checkpoint ck;
    ck.meta.config = config.model;
    ck.meta.options = config.options;
    ck.meta.method = to_string(config.method);
    ck.meta.seed = seed;
    ck.meta.epoch = result.best_epoch;
    ck.meta.config_hash = hash;
    ck.params = std::move(result.best_params);
    ck.optimizer = std::move(result.best_optimizer);
    save_checkpoint(dir / "checkpoint.bin", ck);

    summaries.push_back({seed, result.best_epoch, result.best_val_eer, static_cast<int>(result.log.size()),
                         result.stopped_early});
  }

  auto os = open_out(out / "summary.tsv");
  os << "seed\tbest_epoch\tval_eer\tepochs_run\tstopped_early\n";
  for (const auto& s : summaries) {
    os << s.seed << '\t' << s.best_epoch << '\t' << fmt(s.val_eer) << '\t' << s.epochs_run << '\t'
       << (s.stopped_early ? 1 : 0) << '\n';
  }
  return summaries;
}

EvalReport cmd_eval(const fs::path& run_dir, bool det) {
  const RunConfig config = load_config(run_dir / "config.json");
  std::vector<std::string> missing;
  for (std::uint64_t seed : config.seeds) {
    if (!fs::exists(checkpoint_path(run_dir, seed))) missing.push_back(checkpoint_path(run_dir, seed).string());
  }
  if (!missing.empty()) {
    std::string msg = "missing checkpoints:";
    for (const auto& m : missing) msg += "\n  " + m;
    fail(ErrorKind::data, msg);
  }
  const std::uint64_t hash = config_hash(config);
  std::vector<Checkpoint> checkpoints;
  for (std::uint64_t seed : config.seeds) {
    Checkpoint ck = load_checkpoint(checkpoint_path(run_dir, seed));
    if (ck.meta.config_hash != hash || ck.meta.seed != seed) {
      fail(ErrorKind::data, "checkpoint " + checkpoint_path(run_dir, seed).string() +
                                " does not belong to this run's config");
    }
    checkpoints.push_back(std::move(ck));
  }

  const RunData data = load_run_data(config);
  for (const auto& s : data.eval_sets) {
    if (!s.set.has_both_classes()) fail(ErrorKind::data, "eval set '" + s.name + "' needs both classes");
  }

  const fs::path eval_dir = run_dir / "eval";
  EvalReport report;
  for (const auto& named : data.eval_sets) {
    ensure_dir(eval_dir / "scores" / named.name);
    if (det) ensure_dir(eval_dir / "det" / named.name);
    std::vector<double> eers;
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
      const Model model = model_from_checkpoint(checkpoints[i]);
      const ScoreSet scores = score_examples(model.encoder, model.params, named.set);
      const std::string file = "seed_" + std::to_string(config.seeds[i]);
      write_score_file(eval_dir / "scores" / named.name / (file + ".txt"), scores);
      const EerResult e = eer(scores);
      if (det) write_det_file(eval_dir / "det" / named.name / (file + ".tsv"), det_curve(scores, true));
      report.rows.push_back({named.name, config.seeds[i], e.eer, e.threshold});
      eers.push_back(e.eer);
    }
    EvalAggregate agg;
    agg.set = named.name;
    agg.n = eers.size();
    if (eers.size() >= 2) {
      const SeedAggregate a = aggregate_seeds(eers);
      agg.mean = a.mean;
      agg.std = a.std;
    } else {
      agg.mean = eers.front();
      agg.std = std::nan("");
    }
    report.aggregates.push_back(agg);
  }

  auto per_seed = open_out(eval_dir / "per_seed.tsv");
  per_seed << "set\tseed\teer\tthreshold\n";
  for (const auto& r : report.rows) {
    per_seed << r.set << '\t' << r.seed << '\t' << fmt(r.eer) << '\t' << fmt(r.threshold) << '\n';
  }
  auto summary = open_out(eval_dir / "report.tsv");
  summary << "set\tn_seeds\tmean_eer\tstd_eer\n";
  for (const auto& a : report.aggregates) {
    summary << a.set << '\t' << a.n << '\t' << fmt(a.mean) << '\t' << fmt(a.std) << '\n';
  }
  return report;
}

std::vector<SweepRow> cmd_sweep(const RunConfig& config, const std::vector<std::optional<int>>& ranks,
                                const std::vector<Method>& methods, std::ostream* progress) {
  if (ranks.empty() || methods.empty()) fail(ErrorKind::config, "sweep: need at least one rank and one method");
  const fs::path out(config.out);
  ensure_dir(out);
  save_config(out / "config.json", config);

  std::vector<SweepRow> rows;
  for (Method method : methods) {
    for (const auto& rank : ranks) {
      RunConfig cell = config;
      cell.method = method;
      cell.train.method = method;
      cell.options.rank = rank;
      cell.out = (out / (std::string(to_string(method)) + "_r" + rank_label(rank))).string();
      if (progress) *progress << "sweep cell " << to_string(method) << " rank " << rank_label(rank) << '\n';
      cmd_train(cell, progress);
      EvalReport report = cmd_eval(cell.out);

      SweepRow row;
      row.method = method;
      row.rank = rank;
      row.trainable_params = build_model(cell.model, cell.options, 0).params.trainable_count();
      if (rank && config.reference) {
        const auto& r = *config.reference;
        row.reference_params =
            count_trainable(static_cast<std::uint64_t>(r.n_layers), static_cast<std::uint64_t>(r.d_model),
                            static_cast<std::uint64_t>(r.d_model), static_cast<std::uint64_t>(*rank),
                            static_cast<std::uint64_t>(r.n_targets), r.head_params);
      }
      row.results = report.aggregates;
      rows.push_back(std::move(row));
    }
  }

  auto os = open_out(out / "sweep.tsv");
  os << "method\trank\ttrainable_params\treference_params";
  for (const auto& a : rows.front().results) os << '\t' << a.set << "_mean\t" << a.set << "_std";
  os << '\n';
  for (const auto& r : rows) {
    os << to_string(r.method) << '\t' << rank_label(r.rank) << '\t' << r.trainable_params << '\t'
       << (r.reference_params ? std::to_string(*r.reference_params) : "-");
    for (const auto& a : r.results) os << '\t' << fmt(a.mean) << '\t' << fmt(a.std);
    os << '\n';
  }
  return rows;
}

AnalyzeResult cmd_analyze(const std::vector<AnalyzeInput>& inputs, const fs::path& out, double tau) {
  if (inputs.empty()) fail(ErrorKind::config, "analyze: no checkpoints given");
  AnalyzeResult result;
  for (const auto& in : inputs) {
    if (in.label.empty() || in.label.find_first_of("/\\ \t") != std::string::npos) {
      fail(ErrorKind::config, "analyze: bad label '" + in.label + "'");
    }
    for (const auto& [label, report] : result.reports) {
      if (label == in.label) fail(ErrorKind::config, "analyze: duplicate label '" + in.label + "'");
    }
    result.reports.emplace_back(in.label, svd_adapters(load_checkpoint(in.checkpoint), tau));
  }
  ensure_dir(out);
  for (const auto& [label, report] : result.reports) {
    write_heatmap_grids(out / ("grids_" + label + ".csv"), export_heatmap_grid(report));
  }

  auto er = open_out(out / "effective_rank.tsv");
  er << "label\tlayer\ttarget\trank\teff_rank_A\teff_rank_B\teff_rank_AB\tsigma1_A\tsigma1_B\tsigma1_AB\n";
  for (const auto& [label, report] : result.reports) {
    for (const auto& e : report.entries) {
      er << label << '\t' << e.layer << '\t' << to_string(e.target) << '\t' << e.rank << '\t' << e.effective_rank_a
         << '\t' << e.effective_rank_b << '\t' << e.effective_rank_ab << '\t' << fmt(e.a.front()) << '\t'
         << fmt(e.b.front()) << '\t' << fmt(e.ab.front()) << '\n';
    }
  }

  auto summary = open_out(out / "summary.tsv");
  summary << "factor";
  for (const auto& [label, report] : result.reports) summary << '\t' << label;
  summary << '\n';
  for (FactorKind kind : {FactorKind::A, FactorKind::B, FactorKind::AB}) {
    summary << to_string(kind);
    for (const auto& [label, report] : result.reports) summary << '\t' << fmt(report.mean_effective_rank(kind));
    summary << '\n';
  }
  return result;
}

}  // namespace mldg
