#include "ilrec/cli.hpp"

#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ilrec/checkpoint.hpp"
#include "ilrec/config.hpp"
#include "ilrec/dataset_io.hpp"
#include "ilrec/gradcheck.hpp"
#include "ilrec/synthetic.hpp"

namespace ilrec {

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "INI config file");
  cmd->add_option("--set", o.sets,
                  "Override one config value as section.key=value");
  cmd->add_option("--seed", o.seed,
                  "Override every seed in the config with this value");
  cmd->add_option("--out", o.out_dir, "Override the output directory");
}

RunConfig make_config(const CommonOpts& o) {
  std::vector<std::string> overrides = o.sets;
  if (o.seed) {
    const std::string s = std::to_string(*o.seed);
    overrides.push_back("corpus.synthetic_seed=" + s);
    overrides.push_back("corpus.identifier_seed=" + s);
    overrides.push_back("cf.seed=" + s);
    overrides.push_back("model.seed=" + s);
    overrides.push_back("train.seed=" + s);
  }
  if (!o.out_dir.empty()) overrides.push_back("output.dir=" + o.out_dir);
  return load_run_config(o.config_path, overrides);
}

// Requires the prepared dataset to match the [corpus] settings the model
// derives its shape from.
void check_prepared_consistency(const RunConfig& cfg, const LoadedData& data) {
  std::vector<std::string> bad;
  if (data.map.m != cfg.corpus.m) bad.push_back("corpus.m");
  if (data.map.b != cfg.corpus.b) bad.push_back("corpus.b");
  if (data.max_len != cfg.corpus.max_len) bad.push_back("corpus.max_len");
  if (!bad.empty()) {
    std::string msg = "prepared dataset disagrees with the config in:";
    for (const auto& f : bad) msg += " " + f;
    throw ConfigError(msg);
  }
}

std::string require_data_dir(const RunConfig& cfg) {
  if (cfg.corpus.data_dir.empty())
    throw ConfigError(
        "corpus.data_dir must point to a prepared dataset directory");
  return cfg.corpus.data_dir;
}

int cmd_prepare(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  InteractionLog raw;
  if (cfg.corpus.synthetic) {
    raw = synthetic_interactions(cfg.corpus.syn);
  } else {
    if (cfg.corpus.input.empty())
      throw ConfigError("corpus.input is not set (or use corpus.synthetic)");
    raw = ingest_interactions(cfg.corpus.input,
                              log_format_from_string(cfg.corpus.format));
  }

  InteractionLog filtered =
      five_core_filter(raw, cfg.corpus.min_interactions);
  std::vector<std::string> dropped;
  filtered = drop_short_records(filtered, 3, &dropped);
  for (const auto& user : dropped)
    err << "warning: dropped user " << user
        << " (fewer than 3 interactions)\n";
  if (filtered.records.empty())
    throw ConfigError("no users remain after filtering");

  Dataset ds = leave_one_out_split(filtered, cfg.corpus.max_len);
  ItemIdentifierMap map = assign_identifiers(
      ds.catalog, id_scheme_from_string(cfg.corpus.scheme), cfg.corpus.m,
      cfg.corpus.b, cfg.corpus.identifier_seed, cfg.corpus.identifier_file);
  const DatasetStats stats = dataset_stats(filtered);

  // Everything computed and validated; only now touch the output directory.
  std::optional<CandidateLists> cand_valid, cand_test;
  if (cfg.eval.num_candidates > 0) {
    cand_valid = make_candidates(ds, ds.valid, cfg.eval.num_candidates,
                                 cfg.corpus.identifier_seed + 1);
    cand_test = make_candidates(ds, ds.test, cfg.eval.num_candidates,
                                cfg.corpus.identifier_seed + 2);
  }
  write_prepared(cfg.out_dir, ds, map, stats, cfg.corpus.max_len);
  const PreparedPaths paths = PreparedPaths::in(cfg.out_dir);
  if (cand_valid) {
    write_candidates(paths.candidates_valid, *cand_valid, ds, ds.valid);
    write_candidates(paths.candidates_test, *cand_test, ds, ds.test);
  }

  out << stats.to_text();
  out << "train_examples\t" << ds.train.size() << "\n";
  out << "valid_examples\t" << ds.valid.size() << "\n";
  out << "test_examples\t" << ds.test.size() << "\n";
  out << "prepared\t" << cfg.out_dir << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  LoadedData data = load_prepared(require_data_dir(cfg));
  check_prepared_consistency(cfg, data);

  std::unique_ptr<CfScorer> scorer;
  const bool needs_cf =
      cfg.train.mode == TrainMode::ilrec && cfg.hyper.mu > 0.0;
  if (needs_cf) scorer = train_cf(data.ds, cfg.cf);

  TrainResult res = train(data.ds, data.map, data.trie, cfg.model, cfg.hyper,
                          cfg.train, scorer.get());

  // Metrics for the parameters actually kept (best epoch when validation ran
  // during training, final epoch otherwise).
  const std::vector<int> ks = {5, 10};
  Metrics final_metrics;
  bool found = false;
  for (const auto& [epoch, m] : res.logs.valid_evals) {
    if (epoch == res.logs.best_epoch) {
      final_metrics = m;
      found = true;
    }
  }
  if (!found) {
    final_metrics = evaluate(res.params, data.ds.catalog, data.ds.valid,
                             data.map, data.trie, ks);
    res.logs.valid_evals.emplace_back(cfg.train.epochs, final_metrics);
  }

  std::filesystem::create_directories(cfg.out_dir);
  const std::string ckpt = cfg.out_dir + "/model.ckpt";
  save_model(ckpt, res.params);
  if (needs_cf) save_cf_scorer(cfg.out_dir + "/cf_scorer.bin", *scorer);
  write_metrics_csv(cfg.out_dir + "/metrics.csv", res.logs);
  write_layers_csv(cfg.out_dir + "/layers.csv", res.logs);

  err << "steps\t" << res.logs.steps << "\n";
  err << "trunk_forwards_per_step\t"
      << (res.logs.steps
              ? static_cast<double>(res.logs.trunk_forwards_training) /
                    static_cast<double>(res.logs.steps)
              : 0.0)
      << "\n";
  out << "best_epoch\t" << res.logs.best_epoch << "\n";
  for (int k : ks)
    out << "valid_hit@" << k << "\t" << format_g10(final_metrics.hit_at(k))
        << "\n";
  for (int k : ks)
    out << "valid_ndcg@" << k << "\t" << format_g10(final_metrics.ndcg_at(k))
        << "\n";
  out << "checkpoint\t" << ckpt << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  if (cfg.eval.checkpoint.empty())
    throw ConfigError("eval.checkpoint is not set");
  ModelParams<double> params = load_model(cfg.eval.checkpoint);
  const auto diff = model_config_diff(params.cfg, cfg.model);
  if (!diff.empty()) {
    std::string msg = "checkpoint disagrees with [model] config in:";
    for (const auto& f : diff) msg += " " + f;
    throw ConfigError(msg);
  }

  LoadedData data = load_prepared(require_data_dir(cfg));
  check_prepared_consistency(cfg, data);
  const auto& split =
      cfg.eval.split == "valid" ? data.ds.valid : data.ds.test;

  std::optional<CandidateLists> lists;
  if (cfg.eval.mode == "candidates") {
    const PreparedPaths paths = PreparedPaths::in(cfg.corpus.data_dir);
    const std::string path = cfg.eval.split == "valid"
                                 ? paths.candidates_valid
                                 : paths.candidates_test;
    lists = read_candidates(path, data.ds);
  }

  Metrics m = evaluate(params, data.ds.catalog, split, data.map, data.trie,
                       cfg.eval.ks, lists ? &*lists : nullptr, &data.ds.users);

  nlohmann::ordered_json j;
  for (std::size_t i = 0; i < m.ks.size(); ++i)
    j["hit@" + std::to_string(m.ks[i])] = m.hit[i];
  for (std::size_t i = 0; i < m.ks.size(); ++i)
    j["ndcg@" + std::to_string(m.ks[i])] = m.ndcg[i];
  out << j.dump() << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out,
                  bool corrupt_gradient) {
  std::vector<std::uint64_t> seeds = {cfg.train.seed, cfg.train.seed + 1,
                                      cfg.train.seed + 2};
  GradCheckReport report = run_gradcheck_suite(seeds, corrupt_gradient);

  bool all_pass = true;
  for (const auto& c : report.cases) {
    const bool ok = c.max_rel_err < 1e-4;
    all_pass = all_pass && ok;
    out << c.name << "\tmax_rel_err=" << std::scientific
        << std::setprecision(3) << c.max_rel_err << "\tparams="
        << c.params_checked << "\t" << (ok ? "PASS" : "FAIL") << "\n";
  }

  const double closed_form =
      cpo_reference_max_abs_err(1000, cfg.train.seed * 131 + 5);
  const bool cf_ok = closed_form < 1e-8;
  all_pass = all_pass && cf_ok;
  out << "cpo_closed_form\tmax_abs_err=" << std::scientific
      << std::setprecision(3) << closed_form << "\tfixtures=1000\t"
      << (cf_ok ? "PASS" : "FAIL") << "\n";

  out.unsetf(std::ios::floatfield);
  out << (all_pass ? "gradcheck: all terms pass"
                   : "gradcheck: FAILURES above") << "\n";
  return all_pass ? 0 : 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  CLI::App app{
      "Layer-tapped sequential recommender: prepare / train / eval / "
      "gradcheck"};
  app.require_subcommand(1);

  CommonOpts prep_o, train_o, eval_o, grad_o;
  bool corrupt_gradient = false;

  CLI::App* prep = app.add_subcommand(
      "prepare", "Filter interactions, split, assign identifiers");
  add_common(prep, prep_o);
  CLI::App* tr = app.add_subcommand(
      "train", "Train on a prepared dataset and write reports");
  add_common(tr, train_o);
  CLI::App* ev = app.add_subcommand(
      "eval", "Evaluate a checkpoint: ranking metrics as JSON");
  add_common(ev, eval_o);
  CLI::App* gc = app.add_subcommand(
      "gradcheck", "Finite-difference and closed-form gradient checks");
  add_common(gc, grad_o);
  gc->add_flag("--corrupt-gradient", corrupt_gradient,
               "Negative control: bias one gradient so checks must fail")
      ->group("");  // hidden

  // CLI11 wants argv order reversed, without the program name.
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      out << app.help();
      return 0;
    }
    err << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (prep->parsed()) return cmd_prepare(make_config(prep_o), out, err);
    if (tr->parsed()) return cmd_train(make_config(train_o), out, err);
    if (ev->parsed()) return cmd_eval(make_config(eval_o), out);
    if (gc->parsed())
      return cmd_gradcheck(make_config(grad_o), out, corrupt_gradient);
    err << "usage error: no command given\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace ilrec
