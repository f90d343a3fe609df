#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "ddaunet/inference.hpp"
#include "ddaunet/metrics.hpp"
#include "ddaunet/phantom.hpp"
#include "ddaunet/report.hpp"
#include "ddaunet/trainer.hpp"

namespace fs = std::filesystem;
using namespace ddaunet;

namespace {

int exit_code_for(const std::string& category) {
  static const std::vector<std::pair<std::string, int>> table = {
      {"io", 10},          {"format", 11},       {"truncation", 12}, {"label", 13},
      {"parameter", 14},   {"spec", 15},         {"sampling", 16},   {"shape", 17},
      {"config", 18},      {"compatibility", 19}, {"degenerate", 20}, {"schema", 21},
      {"divergence", 22},
  };
  for (const auto& [name, code] : table)
    if (name == category) return code;
  return 99;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fnv1a_hex(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Every command leaves a manifest of its inputs, config hash and seeds in its
// run directory.
void write_run_manifest(const fs::path& out_dir, const std::string& command,
                        const nlohmann::json& inputs, const std::string& config_text,
                        const std::vector<uint64_t>& seeds) {
  fs::create_directories(out_dir);
  nlohmann::json j;
  j["command"] = command;
  j["inputs"] = inputs;
  j["config_hash"] = fnv1a_hex(config_text);
  j["seeds"] = seeds;
  std::ofstream out(out_dir / "run_manifest.json", std::ios::trunc);
  out << j.dump(2) << "\n";
}

int cmd_generate(const fs::path& out_dir, CorpusConfig cfg) {
  Manifest manifest = generate_corpus(cfg, out_dir);
  write_run_manifest(out_dir, "generate", {{"out", out_dir.string()}}, cfg.to_json(),
                     {cfg.seed});
  std::cout << "generated " << manifest.cases.size() << " cases under " << out_dir << "\n";
  return 0;
}

int cmd_train(const fs::path& config_path, const fs::path& manifest_path, const fs::path& out,
              std::optional<uint64_t> seed, std::optional<int> split,
              std::optional<int> workers, std::optional<int64_t> epochs,
              std::optional<int64_t> steps) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : TrainConfig::from_json(read_file(config_path));
  if (seed) cfg.seed = *seed;
  if (split) cfg.split_id = *split;
  if (workers) cfg.workers = *workers;
  if (epochs) cfg.epochs = *epochs;
  if (steps) cfg.steps_per_epoch = *steps;
  cfg.validate();

  Manifest manifest = Manifest::load(manifest_path);
  fs::create_directories(out);
  std::ofstream(out / "train_config.json") << cfg.to_json() << "\n";
  write_run_manifest(out, "train",
                     {{"manifest", manifest_path.string()}, {"out", out.string()}},
                     cfg.to_json(), {cfg.seed, static_cast<uint64_t>(cfg.split_id)});

  TrainResult result = train(cfg, manifest, manifest_path.parent_path(), out);
  std::cout << "trained " << result.steps_run << " steps; best val DSC "
            << result.best_val_dsc << "\n"
            << "best checkpoint: " << result.best_checkpoint << "\n"
            << "final checkpoint: " << result.final_checkpoint << "\n";
  return 0;
}

int cmd_infer(const fs::path& checkpoint, const fs::path& volume_path, const fs::path& out,
              double tau) {
  Network net = load_checkpoint(checkpoint);
  VolumeGrid raw = load_volume(volume_path);
  VolumeGrid prob = infer_volume(net, normalize_hu_window(raw));
  BinaryMask mask = largest_component(binarize(prob, tau));
  fs::create_directories(out);
  const std::string stem = volume_path.stem().string();
  save_volume(prob, out / (stem + "_prob.mha"));
  save_mask(mask, out / (stem + "_mask.mha"));
  write_run_manifest(out, "infer",
                     {{"checkpoint", checkpoint.string()}, {"volume", volume_path.string()}},
                     net.config().to_json(), {});
  std::cout << "wrote " << (out / (stem + "_prob.mha")) << " and "
            << (out / (stem + "_mask.mha")) << "\n";
  return 0;
}

int cmd_evaluate(const fs::path& manifest_path, const fs::path& pred_dir,
                 const std::string& split, const fs::path& out_dir, const fs::path& pred_single,
                 const fs::path& gt_single) {
  if (!pred_single.empty()) {
    BinaryMask pred = load_mask(pred_single);
    BinaryMask gt = load_mask(gt_single);
    SegmentationMetrics m = evaluate_scan(pred, gt);
    std::cout << "dsc " << m.dsc << " crd_mm " << m.crd << " cad_mm " << m.cad << " msd_mm "
              << m.msd << " hd95_mm " << m.hd95
              << (m.distance_degenerate ? " (degenerate)" : "") << "\n";
    return 0;
  }
  Manifest manifest = Manifest::load(manifest_path);
  const fs::path root = manifest_path.parent_path();
  std::vector<ScanRecord> records;
  for (const ManifestCase* mc : manifest.split(split)) {
    BinaryMask gt = load_mask(root / mc->gtv_path);
    BinaryMask pred = load_mask(pred_dir / (mc->id + "_mask.mha"));
    ScanRecord r;
    r.scan_id = mc->id;
    r.split = mc->split;
    r.tags = mc->tags;
    r.metrics = evaluate_scan(pred, gt);
    records.push_back(std::move(r));
  }
  if (records.empty()) throw ParameterError("no cases in split '" + split + "'");
  fs::create_directories(out_dir);
  save_metrics_csv(records, out_dir / "metrics.csv");
  write_run_manifest(out_dir, "evaluate",
                     {{"manifest", manifest_path.string()},
                      {"pred_dir", pred_dir.string()},
                      {"split", split}},
                     split, {});
  std::cout << "wrote " << (out_dir / "metrics.csv") << " (" << records.size() << " scans)\n";
  return 0;
}

int cmd_report(const std::vector<fs::path>& metrics_files, const fs::path& out_dir) {
  std::vector<std::vector<ScanRecord>> split_records;
  for (const fs::path& p : metrics_files) split_records.push_back(load_metrics_csv(p));
  Report report = run_report(split_records);
  fs::create_directories(out_dir);
  const std::string text = report_text(report);
  std::ofstream(out_dir / "report.txt") << text;
  std::ofstream(out_dir / "report.json") << report_json(report) << "\n";
  nlohmann::json inputs = nlohmann::json::array();
  for (const fs::path& p : metrics_files) inputs.push_back(p.string());
  write_run_manifest(out_dir, "report", {{"metrics", inputs}}, text, {});
  std::cout << text;
  return 0;
}

int cmd_pr_curve(const fs::path& manifest_path, const fs::path& checkpoint,
                 const std::string& split, int n_thresholds, const fs::path& out_dir) {
  Manifest manifest = Manifest::load(manifest_path);
  const fs::path root = manifest_path.parent_path();
  Network net = load_checkpoint(checkpoint);
  std::vector<VolumeGrid> probs;
  std::vector<BinaryMask> gts;
  for (const ManifestCase* mc : manifest.split(split)) {
    VolumeGrid vol = load_volume(root / mc->volume_path);
    probs.push_back(infer_volume(net, normalize_hu_window(vol)));
    gts.push_back(load_mask(root / mc->gtv_path));
  }
  if (probs.empty()) throw ParameterError("no cases in split '" + split + "'");
  std::vector<const VolumeGrid*> pprobs;
  std::vector<const BinaryMask*> pgts;
  for (size_t i = 0; i < probs.size(); ++i) {
    pprobs.push_back(&probs[i]);
    pgts.push_back(&gts[i]);
  }
  PrCurve curve = precision_recall_auc(pprobs, pgts, default_pr_thresholds(n_thresholds));
  fs::create_directories(out_dir);
  {
    std::ofstream out(out_dir / "pr_curve.csv", std::ios::trunc);
    out << "threshold,precision,recall,tp,fp,fn\n";
    for (const PrPoint& p : curve.points)
      out << p.threshold << "," << p.precision << "," << p.recall << "," << p.tp << "," << p.fp
          << "," << p.fn << "\n";
  }
  std::ofstream(out_dir / "auc.json") << nlohmann::json{{"auc", curve.auc}}.dump() << "\n";
  write_run_manifest(out_dir, "pr-curve",
                     {{"manifest", manifest_path.string()},
                      {"checkpoint", checkpoint.string()},
                      {"split", split}},
                     net.config().to_json(), {});
  std::cout << "AUC " << curve.auc << " (" << probs.size() << " scans)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ddaunet: 3D esophageal GTV segmentation laboratory"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "compute threads (default: hardware)");

  // generate
  auto* gen = app.add_subcommand("generate", "generate a synthetic phantom corpus");
  fs::path gen_out = "corpus";
  fs::path gen_config;
  CorpusConfig gen_cfg;
  std::vector<double> gen_fracs;
  std::vector<int64_t> gen_dims;
  std::vector<double> gen_spacing;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--config", gen_config, "corpus config json file");
  gen->add_option("--n", gen_cfg.n, "number of cases");
  gen->add_option("--seed", gen_cfg.seed, "corpus seed");
  gen->add_option("--split-fractions", gen_fracs, "train,val,test fractions")->expected(3);
  gen->add_option("--dims", gen_dims, "volume dims nx ny nz")->expected(3);
  gen->add_option("--spacing", gen_spacing, "voxel spacing mm")->expected(3);
  gen->add_option("--air-pocket-prob", gen_cfg.air_pocket_prob, "air pocket prevalence");
  gen->add_option("--feeding-tube-prob", gen_cfg.feeding_tube_prob, "feeding tube prevalence");

  // train
  auto* tr = app.add_subcommand("train", "train a network on a corpus");
  fs::path tr_config, tr_manifest, tr_out = "run";
  std::optional<uint64_t> tr_seed;
  std::optional<int> tr_split, tr_workers;
  std::optional<int64_t> tr_epochs, tr_steps;
  tr->add_option("--config", tr_config, "train config json file");
  tr->add_option("--data", tr_manifest, "corpus manifest json")->required();
  tr->add_option("--out", tr_out, "run directory");
  tr->add_option("--seed", tr_seed, "seed override");
  tr->add_option("--split", tr_split, "split id (1..3) override");
  tr->add_option("--workers", tr_workers, "patch pipeline workers");
  tr->add_option("--epochs", tr_epochs, "epochs override");
  tr->add_option("--steps", tr_steps, "steps per epoch override");

  // infer
  auto* inf = app.add_subcommand("infer", "whole-volume inference");
  fs::path inf_ckpt, inf_vol, inf_out = "infer_out";
  double inf_tau = 0.5;
  inf->add_option("--checkpoint", inf_ckpt, "network checkpoint")->required();
  inf->add_option("--volume", inf_vol, "input CT volume (.mha)")->required();
  inf->add_option("--out", inf_out, "output directory");
  inf->add_option("--tau", inf_tau, "binarization threshold");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "evaluate predicted masks");
  fs::path ev_manifest, ev_pred_dir, ev_out = "eval_out", ev_pred, ev_gt;
  std::string ev_split = "test";
  ev->add_option("--manifest", ev_manifest, "corpus manifest json");
  ev->add_option("--pred-dir", ev_pred_dir, "directory with <id>_mask.mha predictions");
  ev->add_option("--split", ev_split, "manifest split to evaluate");
  ev->add_option("--out", ev_out, "output directory");
  ev->add_option("--pred", ev_pred, "single predicted mask");
  ev->add_option("--gt", ev_gt, "single ground-truth mask");

  // report
  auto* rep = app.add_subcommand("report", "aggregate metrics CSVs into the final report");
  std::vector<fs::path> rep_metrics;
  fs::path rep_out = "report_out";
  rep->add_option("--metrics", rep_metrics, "metrics csv files (one per split)")->required();
  rep->add_option("--out", rep_out, "output directory");

  // pr-curve
  auto* pr = app.add_subcommand("pr-curve", "precision/recall sweep on raw probabilities");
  fs::path pr_manifest, pr_ckpt, pr_out = "pr_out";
  std::string pr_split = "val";
  int pr_n = 101;
  pr->add_option("--manifest", pr_manifest, "corpus manifest json")->required();
  pr->add_option("--checkpoint", pr_ckpt, "network checkpoint")->required();
  pr->add_option("--split", pr_split, "manifest split");
  pr->add_option("--thresholds", pr_n, "number of thresholds");
  pr->add_option("--out", pr_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (threads > 0) set_compute_threads(threads);
    if (gen->parsed()) {
      if (!gen_config.empty()) gen_cfg = CorpusConfig::from_json(read_file(gen_config));
      if (gen_fracs.size() == 3) {
        gen_cfg.train_fraction = gen_fracs[0];
        gen_cfg.val_fraction = gen_fracs[1];
        gen_cfg.test_fraction = gen_fracs[2];
      }
      if (gen_dims.size() == 3) gen_cfg.dims = {gen_dims[0], gen_dims[1], gen_dims[2]};
      if (gen_spacing.size() == 3)
        gen_cfg.spacing = {gen_spacing[0], gen_spacing[1], gen_spacing[2]};
      return cmd_generate(gen_out, gen_cfg);
    }
    if (tr->parsed())
      return cmd_train(tr_config, tr_manifest, tr_out, tr_seed, tr_split, tr_workers, tr_epochs,
                       tr_steps);
    if (inf->parsed()) return cmd_infer(inf_ckpt, inf_vol, inf_out, inf_tau);
    if (ev->parsed())
      return cmd_evaluate(ev_manifest, ev_pred_dir, ev_split, ev_out, ev_pred, ev_gt);
    if (rep->parsed()) return cmd_report(rep_metrics, rep_out);
    if (pr->parsed()) return cmd_pr_curve(pr_manifest, pr_ckpt, pr_split, pr_n, pr_out);
  } catch (const Error& e) {
    std::cerr << "error (" << e.category() << "): " << e.what() << "\n";
    return exit_code_for(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 99;
  }
  return 0;
}
