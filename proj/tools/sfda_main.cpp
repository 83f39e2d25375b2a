#include "sfda/analysis.hpp"
#include "sfda/pipeline.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

namespace fs = std::filesystem;
using namespace sfda;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string data_root;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

// Flag beats config file beats DATA_ROOT environment fallback.
AdaptationConfig resolve_config(const GlobalArgs& g) {
  AdaptationConfig cfg;
  if (!g.config_path.empty()) cfg = AdaptationConfig::load(g.config_path);
  if (g.seed_set) cfg.seed = g.seed;
  if (!g.data_root.empty()) cfg.data_root = g.data_root;
  if (cfg.data_root.empty())
    if (const char* env = std::getenv("DATA_ROOT")) cfg.data_root = env;
  if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
  if (cfg.out_dir.empty()) cfg.out_dir = "out";
  cfg.validate();
  return cfg;
}

void add_global_flags(CLI::App* cmd, GlobalArgs& g) {
  cmd->add_option("--config", g.config_path, "key=value config file");
  cmd->add_option("--seed", g.seed, "override the run seed")
      ->each([&g](const std::string&) { g.seed_set = true; });
  cmd->add_option("--data-root", g.data_root,
                  "dataset root for folder data (falls back to $DATA_ROOT)");
  cmd->add_option("--out-dir", g.out_dir, "output directory (default: out)");
}

DomainDataset load_domain(const AdaptationConfig& cfg, const std::string& domain_id) {
  if (cfg.data_source == "synthetic") {
    SyntheticShiftSpec spec = cfg.synthetic_spec();
    for (int d = 0; d < spec.num_domains; ++d)
      if (synthetic_domain_name(d) == domain_id) {
        spec.num_domains = d + 1;  // only render up to the one we need
        spec.corruption.resize(static_cast<std::size_t>(d + 1));
        return std::move(make_synthetic_suite(spec).back());
      }
    throw ValidationError("domain '" + domain_id + "' is outside the synthetic suite");
  }
  if (cfg.data_root.empty())
    throw ValidationError("folder data needs --data-root or DATA_ROOT");
  return load_image_folder(cfg.data_root, domain_id);
}

fs::path checkpoints_dir(const AdaptationConfig& cfg) {
  return fs::path(cfg.out_dir) / "checkpoints";
}

fs::path stage1_ckpt_path(const AdaptationConfig& cfg) {
  return checkpoints_dir(cfg) / ("stage1_" + cfg.source_domain + ".ckpt");
}

void write_report_pair(const StageReport& report, const fs::path& out_dir,
                       const std::string& name) {
  save_stage_report(report, out_dir / (name + ".jsonl"));
  report_to_csv(report, out_dir / (name + ".csv"));
}

int cmd_make_synthetic(const GlobalArgs& g) {
  AdaptationConfig cfg = resolve_config(g);
  std::vector<DomainDataset> suite = make_synthetic_suite(cfg.synthetic_spec());
  fs::path root = cfg.data_root.empty() ? fs::path(cfg.out_dir) / "synthetic"
                                        : fs::path(cfg.data_root);
  for (const DomainDataset& ds : suite) {
    export_domain(ds, root);
    std::printf("wrote %d samples to %s\n", ds.size(), (root / ds.domain_id()).c_str());
  }
  return 0;
}

int cmd_train_source(const GlobalArgs& g) {
  AdaptationConfig cfg = resolve_config(g);
  DomainDataset source = load_domain(cfg, cfg.source_domain);
  std::printf("training on %s: %d samples, %d classes, backbone %s\n",
              source.domain_id().c_str(), source.size(), source.num_classes(),
              cfg.backbone_id.c_str());
  Stage1Result r = run_stage1(cfg, source);
  fs::path ckpt = stage1_ckpt_path(cfg);
  save_checkpoint(r.net, r.meta, ckpt);
  write_report_pair(r.report, fs::path(cfg.out_dir) / "reports",
                    "stage1_" + cfg.source_domain);
  cfg.save((fs::path(cfg.out_dir) / "config_used.txt").string());
  double acc = r.report.records.empty() ? -1.0 : r.report.records.back().target_accuracy;
  std::printf("checkpoint: %s\nfinal source accuracy: %s\n", ckpt.c_str(),
              format_double(acc).c_str());
  return 0;
}

int cmd_adapt_stda(const GlobalArgs& g, const std::string& ckpt_arg,
                   const std::string& target_arg) {
  AdaptationConfig cfg = resolve_config(g);
  std::string target_id = target_arg.empty()
                              ? (cfg.target_domains.empty() ? "" : cfg.target_domains[0])
                              : target_arg;
  if (target_id.empty()) throw ValidationError("no target domain configured");
  fs::path ckpt_path = ckpt_arg.empty() ? stage1_ckpt_path(cfg) : fs::path(ckpt_arg);

  LoadedCheckpoint source = load_checkpoint(ckpt_path);
  DomainDataset target_ds = load_domain(cfg, target_id);
  UnlabeledView target(target_ds);
  EvalChannel eval(target_ds);  // reporting only; training sees the view

  std::printf("adapting %s -> %s: %d unlabeled samples\n",
              source.meta.source_domain.c_str(), target_id.c_str(), target.size());
  Stage2Result r = run_stage2(cfg, source.net, source.meta, target, &eval);
  fs::path ckpt = checkpoints_dir(cfg) / ("stage2_" + target_id + ".ckpt");
  save_checkpoint(r.net, r.meta, ckpt);
  fs::path bank_file = save_bank(r.bank, fs::path(cfg.out_dir) / "banks");
  write_report_pair(r.report, fs::path(cfg.out_dir) / "reports", "stage2_" + target_id);
  curve_report(r.report, fs::path(cfg.out_dir) / "reports" / ("stage2_" + target_id));
  double acc = r.report.records.empty() ? -1.0 : r.report.records.back().target_accuracy;
  std::printf("checkpoint: %s\nlabel bank: %s\nfinal target accuracy: %s\n", ckpt.c_str(),
              bank_file.c_str(), format_double(acc).c_str());
  return 0;
}

int cmd_distill_mtda(const GlobalArgs& g) {
  AdaptationConfig cfg = resolve_config(g);
  if (cfg.target_domains.empty()) throw ValidationError("no target domains configured");
  std::vector<PseudoLabelBank> banks;
  std::vector<DomainDataset> datasets;
  for (const std::string& id : cfg.target_domains) {
    banks.push_back(load_latest_bank(fs::path(cfg.out_dir) / "banks", id));
    datasets.push_back(load_domain(cfg, id));
  }
  std::vector<UnlabeledView> views;
  std::vector<EvalChannel> channels;
  views.reserve(datasets.size());
  channels.reserve(datasets.size());
  for (const DomainDataset& ds : datasets) {
    views.emplace_back(ds);
    channels.emplace_back(ds);
  }
  std::vector<const EvalChannel*> eval_ptrs;
  for (const EvalChannel& c : channels) eval_ptrs.push_back(&c);

  std::printf("distilling %zu target banks into one student\n", banks.size());
  Stage3Result r = run_stage3(cfg, banks, views, eval_ptrs);
  fs::path ckpt = checkpoints_dir(cfg) / "stage3_student.ckpt";
  save_checkpoint(r.net, r.meta, ckpt);
  write_report_pair(r.report, fs::path(cfg.out_dir) / "reports", "stage3_student");
  std::printf("checkpoint: %s\n", ckpt.c_str());
  for (std::size_t d = 0; d < views.size(); ++d) {
    double acc = accuracy_against(predict_labels(r.net, views[d]), views[d], channels[d]);
    std::printf("student accuracy on %s: %s\n", views[d].domain_id().c_str(),
                format_double(acc).c_str());
  }
  return 0;
}

int cmd_eval(const GlobalArgs& g, const std::string& ckpt_arg, const std::string& domain_arg) {
  AdaptationConfig cfg = resolve_config(g);
  LoadedCheckpoint ckpt = load_checkpoint(ckpt_arg);
  DomainDataset ds = load_domain(cfg, domain_arg);
  EvalResult r = evaluate(ckpt.net, ds);
  std::printf("accuracy on %s: %s (%d samples)\n", domain_arg.c_str(),
              format_double(r.accuracy).c_str(), ds.size());
  for (int c = 0; c < ds.num_classes(); ++c)
    if (r.per_class(c) >= 0.0)
      std::printf("  %s: %s\n", ds.class_names()[static_cast<std::size_t>(c)].c_str(),
                  format_double(r.per_class(c)).c_str());
  return 0;
}

int cmd_ablate(const GlobalArgs& g, const std::string& ckpt_arg,
               const std::string& target_arg) {
  AdaptationConfig cfg = resolve_config(g);
  std::string target_id = target_arg.empty()
                              ? (cfg.target_domains.empty() ? "" : cfg.target_domains[0])
                              : target_arg;
  if (target_id.empty()) throw ValidationError("no target domain configured");
  fs::path ckpt_path = ckpt_arg.empty() ? stage1_ckpt_path(cfg) : fs::path(ckpt_arg);
  LoadedCheckpoint source = load_checkpoint(ckpt_path);
  DomainDataset target_ds = load_domain(cfg, target_id);
  UnlabeledView target(target_ds);
  EvalChannel eval(target_ds);

  std::printf("ablating loss components on %s (8 runs)\n", target_id.c_str());
  std::vector<AblationRow> rows = run_ablation(cfg, source.net, source.meta, target, eval);
  fs::path csv = fs::path(cfg.out_dir) / "reports" / ("ablation_" + target_id + ".csv");
  ablation_to_csv(rows, csv);
  for (const AblationRow& r : rows)
    std::printf("%-12s %s\n", r.name.c_str(), format_double(r.accuracy).c_str());
  std::printf("table: %s\n", csv.c_str());
  return 0;
}

int cmd_a_distance(const GlobalArgs& g, const std::string& ckpt_arg,
                   const std::string& domain_a, const std::string& domain_b) {
  AdaptationConfig cfg = resolve_config(g);
  LoadedCheckpoint ckpt = load_checkpoint(ckpt_arg);
  DomainDataset a = load_domain(cfg, domain_a);
  DomainDataset b = load_domain(cfg, domain_b);
  FeatureDump fa = compute_feature_dump(ckpt.net, a);
  FeatureDump fb = compute_feature_dump(ckpt.net, b);
  ADistanceResult r = a_distance(fa.features, fb.features, 0.8, cfg.seed);
  std::printf("a-distance(%s, %s) = %s  (held-out error %s, %d splits)\n", domain_a.c_str(),
              domain_b.c_str(), format_double(r.a_distance).c_str(),
              format_double(r.classifier_error).c_str(), r.splits);
  return 0;
}

int cmd_export_features(const GlobalArgs& g, const std::string& ckpt_arg,
                        const std::string& domain_arg, const std::string& format,
                        const std::string& output) {
  AdaptationConfig cfg = resolve_config(g);
  DomainDataset ds = load_domain(cfg, domain_arg);
  fs::path out = output.empty()
                     ? fs::path(cfg.out_dir) / "features" /
                           ("features_" + domain_arg + (format == "csv" ? ".csv" : ".feat"))
                     : fs::path(output);
  FeatureDump dump = export_features(ckpt_arg, ds, out, format);
  std::printf("wrote %d x %lld features for %s to %s\n", dump.size(),
              static_cast<long long>(dump.features.cols()), domain_arg.c_str(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"source-free domain adaptation toolkit"};
  app.require_subcommand(1);

  GlobalArgs g;
  std::string ckpt_arg, target_arg, domain_arg, domain_b_arg, format = "binary", output;

  CLI::App* make_syn = app.add_subcommand("make-synthetic", "render the synthetic domain suite to image folders");
  add_global_flags(make_syn, g);

  CLI::App* train = app.add_subcommand("train-source", "supervised training on the labeled source domain");
  add_global_flags(train, g);

  CLI::App* adapt = app.add_subcommand("adapt-stda", "adapt a source checkpoint to one unlabeled target");
  add_global_flags(adapt, g);
  adapt->add_option("--checkpoint", ckpt_arg, "source checkpoint (default: out-dir location)");
  adapt->add_option("--target", target_arg, "target domain id (default: first configured)");

  CLI::App* distill = app.add_subcommand("distill-mtda", "distill all per-target label banks into one student");
  add_global_flags(distill, g);

  CLI::App* evalc = app.add_subcommand("eval", "top-1 and per-class accuracy of a checkpoint on a domain");
  add_global_flags(evalc, g);
  evalc->add_option("--checkpoint", ckpt_arg, "checkpoint file")->required();
  evalc->add_option("--domain", domain_arg, "domain id")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "rerun adaptation once per loss-component mask");
  add_global_flags(ablate, g);
  ablate->add_option("--checkpoint", ckpt_arg, "source checkpoint (default: out-dir location)");
  ablate->add_option("--target", target_arg, "target domain id (default: first configured)");

  CLI::App* adist = app.add_subcommand("a-distance", "proxy divergence between two domains under one checkpoint");
  add_global_flags(adist, g);
  adist->add_option("--checkpoint", ckpt_arg, "checkpoint file")->required();
  adist->add_option("--domain-a", domain_arg, "first domain id")->required();
  adist->add_option("--domain-b", domain_b_arg, "second domain id")->required();

  CLI::App* expf = app.add_subcommand("export-features", "dump bottleneck features for external visualization");
  add_global_flags(expf, g);
  expf->add_option("--checkpoint", ckpt_arg, "checkpoint file")->required();
  expf->add_option("--domain", domain_arg, "domain id")->required();
  expf->add_option("--format", format, "binary or csv")->check(CLI::IsMember({"binary", "csv"}));
  expf->add_option("--output", output, "output file (default under out-dir)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (make_syn->parsed()) return cmd_make_synthetic(g);
    if (train->parsed()) return cmd_train_source(g);
    if (adapt->parsed()) return cmd_adapt_stda(g, ckpt_arg, target_arg);
    if (distill->parsed()) return cmd_distill_mtda(g);
    if (evalc->parsed()) return cmd_eval(g, ckpt_arg, domain_arg);
    if (ablate->parsed()) return cmd_ablate(g, ckpt_arg, target_arg);
    if (adist->parsed()) return cmd_a_distance(g, ckpt_arg, domain_arg, domain_b_arg);
    if (expf->parsed()) return cmd_export_features(g, ckpt_arg, domain_arg, format, output);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
