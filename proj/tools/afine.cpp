// afine: adaptive fidelity-naturalness image quality metric.
// Subcommands: score, train, eval, aggregate, make-triplets, split, gradcheck.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "afine/checkpoint.hpp"
#include "afine/config.hpp"
#include "afine/data.hpp"
#include "afine/eval.hpp"
#include "afine/model.hpp"
#include "afine/trainer.hpp"

namespace {

using namespace afine;

std::string corpus_root_or_env(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  const char* env = std::getenv("AFINE_CORPUS_ROOT");
  return env ? env : "";
}

void log_info(const std::string& msg) { std::cerr << "[afine] " << msg << "\n"; }

// ---- score ----

struct ScoreArgs {
  std::string ref, test, model, metric = "afine", json_out;
};

int run_score(const ScoreArgs& a) {
  std::optional<ModelParameters> model;
  if (a.metric == "afine") {
    if (a.model.empty()) {
      std::cerr << "score: --model is required for metric 'afine' "
                   "(pass a checkpoint produced by `afine train`)\n";
      return 1;
    }
    model = load_checkpoint(a.model);
  }
  Image ref = load_image(a.ref);
  Image test = load_image(a.test);
  // Natural units: afine D (lower better), PSNR in dB, SSIM similarity.
  double value = a.metric == "afine" ? afine_score(*model, ref, test)
                                     : (a.metric == "psnr" ? psnr(ref, test) : ssim_global(ref, test));
  std::cout << value << "\n";
  if (!a.json_out.empty()) {
    nlohmann::json j{{"metric", a.metric}, {"value", value}, {"ref", a.ref}, {"test", a.test}};
    std::ofstream f(a.json_out);
    if (!f) throw DataError("cannot write " + a.json_out);
    f << j.dump(2) << "\n";
  }
  return 0;
}

// ---- train ----

struct TrainArgs {
  std::string config, phase = "all", resume, out, trace;
  std::vector<std::string> overrides;
  std::string corpus_root_flag;
  bool dry_run = false;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  for (const auto& kv : a.overrides) apply_override(cfg, kv);
  std::string root = corpus_root_or_env(!a.corpus_root_flag.empty() ? a.corpus_root_flag
                                                                    : cfg.corpus_root);

  if (cfg.train_triplets.empty()) throw ConfigError("config key 'train_triplets' is required");
  ImageStore images(root);
  std::vector<Triplet> train = read_triplets(cfg.train_triplets);
  std::vector<Triplet> val;
  if (!cfg.val_triplets.empty()) val = read_triplets(cfg.val_triplets);
  verify_triplet_images(train, images);
  verify_triplet_images(val, images);

  std::vector<int> phases;
  if (a.phase == "all") phases = {1, 2, 3};
  else if (a.phase == "1" || a.phase == "2" || a.phase == "3") phases = {std::stoi(a.phase)};
  else {
    std::cerr << "train: --phase must be 1, 2, 3, or all\n";
    return 1;
  }

  log_info("train: " + std::to_string(train.size()) + " triplets, " + std::to_string(val.size()) +
           " validation triplets, backbone " + cfg.backbone_kind);
  if (a.dry_run) {
    log_info("dry run: configuration and data resolved, nothing written");
    return 0;
  }
  if (a.out.empty()) {
    std::cerr << "train: --out is required\n";
    return 1;
  }

  ModelParameters model =
      a.resume.empty() ? init_model(cfg.backbone()) : load_checkpoint(a.resume);

  std::vector<TraceRow> trace;
  for (int phase : phases) {
    TrainConfig tc = cfg.train_config(phase);
    log_info("phase " + std::to_string(phase) + ": lr " + std::to_string(tc.learning_rate) +
             ", " + std::to_string(tc.max_iters) + " iters, batch " +
             std::to_string(tc.batch_size));
    TrainResult r = train_phase(model, train, val, images, tc);
    trace.insert(trace.end(), r.trace.begin(), r.trace.end());
    log_info("phase " + std::to_string(phase) + " done: loss " +
             std::to_string(r.initial_loss) + " -> " + std::to_string(r.final_loss) +
             (r.best_iter >= 0 ? ", best val acc " + std::to_string(r.best_val_accuracy) +
                                     " at iter " + std::to_string(r.best_iter)
                               : ""));
  }
  save_checkpoint(model, a.out);
  std::string trace_path = a.trace.empty() ? a.out + ".trace.csv" : a.trace;
  write_trace_csv(trace, trace_path);
  log_info("wrote " + a.out + " and " + trace_path);
  return 0;
}

// ---- eval ----

struct EvalArgs {
  std::string manifest, metric = "afine", model, report, json_out, plot, corpus_root_flag;
  std::vector<std::string> subsets;
  bool dry_run = false;
};

int run_eval(const EvalArgs& a) {
  ImageStore images(corpus_root_or_env(a.corpus_root_flag));
  std::vector<EvalPair> pairs = read_eval_pairs(a.manifest);
  if (!a.subsets.empty()) {
    std::vector<EvalPair> kept;
    for (const auto& p : pairs)
      for (const auto& tag : a.subsets)
        if (p.subset_tag == tag) {
          kept.push_back(p);
          break;
        }
    pairs = std::move(kept);
  }
  if (pairs.empty()) throw DataError("eval: no pairs selected");
  std::optional<ModelParameters> model;
  if (a.metric == "afine") {
    if (a.model.empty()) {
      std::cerr << "eval: --model is required for metric 'afine'\n";
      return 1;
    }
    model = load_checkpoint(a.model);
  }
  if (a.dry_run) {
    // Resolution check only.
    for (const auto& p : pairs)
      for (const std::string* id : {&p.reference_id, &p.y_id, &p.z_id})
        if (!images.exists(*id)) throw DataError("unresolvable image: " + *id);
    log_info("dry run: " + std::to_string(pairs.size()) + " pairs resolved");
    return 0;
  }
  PairScorer scorer = make_scorer(a.metric, model ? &*model : nullptr);
  EvalReport report = evaluate(scorer, pairs, images, a.model);
  if (report.degenerate_warning)
    std::cerr << "[afine] warning: prediction tie-breaks exceeded 1% of judgments; "
                 "the metric may be degenerate on this manifest\n";
  if (!a.report.empty()) write_report_csv(report, a.report);
  if (!a.json_out.empty()) write_report_json(report, a.json_out);
  if (!a.plot.empty()) render_report_plot(report, a.plot);
  std::cout << "overall," << report.overall.judged << ","
            << detail::accuracy_field(report.overall) << "\n";
  return 0;
}

// ---- aggregate ----

int run_aggregate(const std::string& votes_path, const std::string& out_path,
                  const std::string& stats_path, bool dry_run) {
  std::vector<PairAnnotation> votes = read_votes(votes_path);
  std::vector<AggregatedLabel> labels;
  labels.reserve(votes.size());
  for (const auto& v : votes) labels.push_back(aggregate_votes(v));
  LabelStatistics stats = dataset_statistics(labels);
  log_info("aggregate: " + std::to_string(labels.size()) + " pairs, outlier fraction " +
           std::to_string(stats.fraction(stats.outlier)));
  if (dry_run) return 0;
  write_labels(labels, out_path);
  if (!stats_path.empty()) {
    nlohmann::json j{{"worse", stats.worse},
                     {"similar", stats.similar},
                     {"better", stats.better},
                     {"outlier", stats.outlier},
                     {"total", stats.total()},
                     {"fractions",
                      {{"worse", stats.fraction(stats.worse)},
                       {"similar", stats.fraction(stats.similar)},
                       {"better", stats.fraction(stats.better)},
                       {"outlier", stats.fraction(stats.outlier)}}}};
    std::ofstream f(stats_path);
    if (!f) throw DataError("cannot write " + stats_path);
    f << j.dump(2) << "\n";
  }
  return 0;
}

// ---- make-triplets ----

int run_make_triplets(const std::string& labels_path, const std::string& mode,
                      const std::string& out_path, const std::string& corpus_root_flag,
                      bool dry_run) {
  std::vector<Triplet> triplets;
  if (is_mos_manifest(labels_path)) {
    if (mode != "cross-test")
      throw DataError("MOS manifests only support --mode cross-test "
                      "(the reference has no MOS of its own)");
    triplets = build_triplets_mos(read_mos(labels_path));
  } else {
    triplets = build_triplets(read_labels(labels_path), parse_triplet_mode(mode));
  }
  std::string root = corpus_root_or_env(corpus_root_flag);
  if (!root.empty()) verify_triplet_images(triplets, ImageStore(root));
  log_info("make-triplets: " + std::to_string(triplets.size()) + " triplets");
  if (dry_run) return 0;
  write_triplets(triplets, out_path);
  return 0;
}

// ---- split ----

int run_split(const std::string& contents_path, const std::string& ratios,
              std::uint64_t seed, const std::string& out_dir, bool dry_run) {
  double r[3];
  {
    std::stringstream ss(ratios);
    std::string part;
    int i = 0;
    double total = 0.0;
    while (std::getline(ss, part, ':')) {
      if (i >= 3) throw DataError("ratios must have exactly three parts, e.g. 7:1:2");
      r[i] = std::stod(part);
      total += r[i];
      ++i;
    }
    if (i != 3) throw DataError("ratios must have exactly three parts, e.g. 7:1:2");
    for (double& v : r) v /= total;
  }
  std::vector<std::string> contents = read_contents(contents_path);
  SplitResult s = split_dataset(contents, r[0], r[1], r[2], seed);
  log_info("split: " + std::to_string(s.train.size()) + "/" + std::to_string(s.val.size()) +
           "/" + std::to_string(s.test.size()));
  if (dry_run) return 0;
  std::filesystem::create_directories(out_dir);
  write_id_list(s.train, (std::filesystem::path(out_dir) / "train.txt").string());
  write_id_list(s.val, (std::filesystem::path(out_dir) / "val.txt").string());
  write_id_list(s.test, (std::filesystem::path(out_dir) / "test.txt").string());
  return 0;
}

// ---- gradcheck ----

int run_gradcheck(const std::string& group, const std::string& model_path, int samples,
                  std::uint64_t seed, int image_size) {
  ModelParameters model =
      model_path.empty() ? init_model(BackboneConfig::toy(seed)) : load_checkpoint(model_path);

  ImageStore images;
  Image content = synthetic_content(image_size, image_size, seed + 1);
  images.put("x", content);
  images.put("y", degrade(content, 1, seed + 2));
  images.put("z", degrade(content, 3, seed + 3));
  Triplet triplet{"x", "y", "z", 1.0};

  std::vector<std::pair<std::string, ParamGroup>> groups{
      {"backbone", ParamGroup::backbone},
      {"naturalness", ParamGroup::naturalness},
      {"fidelity", ParamGroup::fidelity},
      {"scale", ParamGroup::scale},
      {"calibration", ParamGroup::calibration}};
  if (group != "all") {
    bool known = false;
    for (const auto& [name, g] : groups) known = known || name == group;
    if (!known) {
      std::cerr << "gradcheck: unknown group '" << group << "'\n";
      return 1;
    }
  }
  double worst = 0.0;
  for (const auto& [name, g] : groups) {
    if (group != "all" && name != group) continue;
    GradCheckReport r = gradient_check(model, triplet, images,
                                       [g = g](ParamGroup pg) { return pg == g; },
                                       std::size_t(samples), seed);
    std::cout << name << ": max relative error " << r.max_rel_error << " over " << r.checked
              << " sampled entries (worst " << r.worst_param << "[" << r.worst_index << "])\n";
    worst = std::max(worst, r.max_rel_error);
  }
  if (worst >= 1e-3) {
    std::cerr << "gradcheck: max relative error " << worst << " exceeds 1e-3\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"A-FINE: adaptive fidelity-naturalness image quality assessment"};
  app.require_subcommand(1);

  ScoreArgs score_args;
  auto* score = app.add_subcommand("score", "Score a test image against a reference");
  score->add_option("--ref", score_args.ref, "Reference image (PPM)")->required();
  score->add_option("--test", score_args.test, "Test image (PPM)")->required();
  score->add_option("--model", score_args.model, "Model checkpoint (required for afine)");
  score->add_option("--metric", score_args.metric, "afine | psnr | ssim")
      ->check(CLI::IsMember({"afine", "psnr", "ssim"}));
  score->add_option("--json-out", score_args.json_out, "Write a JSON record here");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Run the three-phase ranking training");
  train->add_option("--config", train_args.config, "Key-value config file")->required();
  train->add_option("--phase", train_args.phase, "1 | 2 | 3 | all");
  train->add_option("--resume", train_args.resume, "Checkpoint to continue from");
  train->add_option("--out", train_args.out, "Output checkpoint path");
  train->add_option("--trace", train_args.trace, "Loss trace CSV (default <out>.trace.csv)");
  train->add_option("--set", train_args.overrides, "Override config keys, key=value");
  train->add_option("--corpus-root", train_args.corpus_root_flag, "Image corpus root");
  train->add_flag("--dry-run", train_args.dry_run, "Validate config and data, write nothing");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "2AFC accuracy over an annotated manifest");
  eval_cmd->add_option("--manifest", eval_args.manifest, "Eval pair manifest")->required();
  eval_cmd->add_option("--metric", eval_args.metric, "afine | psnr | ssim")
      ->check(CLI::IsMember({"afine", "psnr", "ssim"}));
  eval_cmd->add_option("--model", eval_args.model, "Model checkpoint (for afine)");
  eval_cmd->add_option("--report", eval_args.report, "CSV report path");
  eval_cmd->add_option("--json", eval_args.json_out, "JSON report path");
  eval_cmd->add_option("--plot", eval_args.plot, "Accuracy bar chart (.png or .ppm)");
  eval_cmd->add_option("--subset", eval_args.subsets, "Only evaluate these subset tags");
  eval_cmd->add_option("--corpus-root", eval_args.corpus_root_flag, "Image corpus root");
  eval_cmd->add_flag("--dry-run", eval_args.dry_run, "Resolve inputs, write nothing");

  std::string votes_path, labels_out, stats_out;
  bool agg_dry = false;
  auto* aggregate = app.add_subcommand("aggregate", "Majority-vote aggregation of raw votes");
  aggregate->add_option("--votes", votes_path, "Raw vote CSV")->required();
  aggregate->add_option("--out", labels_out, "Aggregated label manifest")->required();
  aggregate->add_option("--stats-out", stats_out, "Label statistics JSON");
  aggregate->add_flag("--dry-run", agg_dry, "Parse and report, write nothing");

  std::string mt_labels, mt_mode = "both", mt_out, mt_root;
  bool mt_dry = false;
  auto* mt = app.add_subcommand("make-triplets", "Build training triplets from labels or MOS");
  mt->add_option("--labels", mt_labels, "Label manifest or MOS manifest")->required();
  mt->add_option("--mode", mt_mode, "ref-as-test | cross-test | both")
      ->check(CLI::IsMember({"ref-as-test", "cross-test", "both"}));
  mt->add_option("--out", mt_out, "Triplet manifest path")->required();
  mt->add_option("--corpus-root", mt_root, "Verify image paths under this root");
  mt->add_flag("--dry-run", mt_dry, "Build and report, write nothing");

  std::string sp_contents, sp_ratios = "7:1:2", sp_dir;
  std::uint64_t sp_seed = 0;
  bool sp_dry = false;
  auto* split = app.add_subcommand("split", "Content-independent train/val/test split");
  split->add_option("--contents", sp_contents, "Content id list, one per line")->required();
  split->add_option("--ratios", sp_ratios, "train:val:test, e.g. 7:1:2");
  split->add_option("--seed", sp_seed, "Shuffle seed");
  split->add_option("--out-dir", sp_dir, "Directory for train.txt/val.txt/test.txt")->required();
  split->add_flag("--dry-run", sp_dry, "Compute and report, write nothing");

  std::string gc_group = "all", gc_model;
  int gc_samples = 24, gc_image = 16;
  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gc->add_option("--group", gc_group, "backbone|naturalness|fidelity|scale|calibration|all");
  gc->add_option("--model", gc_model, "Checkpoint to check (default: fresh toy model)");
  gc->add_option("--samples", gc_samples, "Sampled indices per tensor");
  gc->add_option("--seed", gc_seed, "Sampling seed");
  gc->add_option("--image-size", gc_image, "Synthetic probe image side");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*score) return run_score(score_args);
    if (*train) return run_train(train_args);
    if (*eval_cmd) return run_eval(eval_args);
    if (*aggregate) return run_aggregate(votes_path, labels_out, stats_out, agg_dry);
    if (*mt) return run_make_triplets(mt_labels, mt_mode, mt_out, mt_root, mt_dry);
    if (*split) return run_split(sp_contents, sp_ratios, sp_seed, sp_dir, sp_dry);
    if (*gc) return run_gradcheck(gc_group, gc_model, gc_samples, gc_seed, gc_image);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {  // Data, Dimension, Parameter, IO
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
