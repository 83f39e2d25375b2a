#pragma once

#include "sfda/augment.hpp"
#include "sfda/checkpoint.hpp"
#include "sfda/config.hpp"
#include "sfda/data.hpp"
#include "sfda/nn.hpp"
#include "sfda/objectives.hpp"
#include "sfda/pseudo_labels.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace sfda {

// ---- reports ----------------------------------------------------------------

struct NuclearRecord {
  long step = 0;
  double fro = 0.0;
  double nuc = 0.0;
  int rank = 0;
};

struct EpochRecord {
  int epoch = 0;
  std::map<std::string, double> losses;   // per-component batch means
  double pseudo_label_accuracy = -1.0;    // -1 when no evaluation channel was attached
  double target_accuracy = -1.0;
  double wall_seconds = 0.0;
};

struct StageReport {
  int stage = 0;
  std::string domain;
  std::string config_hash;
  std::vector<EpochRecord> records;
  std::vector<NuclearRecord> nuclear;  // per-batch norm diagnostics (stage 2)

  void validate() const {
    for (std::size_t i = 1; i < records.size(); ++i)
      if (records[i].epoch <= records[i - 1].epoch)
        throw ValidationError("StageReport: epoch indices must be strictly increasing");
  }
};

inline void save_stage_report(const StageReport& report, const std::filesystem::path& path) {
  report.validate();
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("save_stage_report: cannot open " + path.string());
  nlohmann::json header{{"type", "stage_header"},
                        {"stage", report.stage},
                        {"domain", report.domain},
                        {"config_hash", report.config_hash}};
  out << header.dump() << "\n";
  for (const EpochRecord& r : report.records) {
    nlohmann::json rec{{"type", "epoch"},
                       {"config_hash", report.config_hash},
                       {"epoch", r.epoch},
                       {"losses", r.losses},
                       {"pseudo_label_accuracy", r.pseudo_label_accuracy},
                       {"target_accuracy", r.target_accuracy},
                       {"wall_seconds", r.wall_seconds}};
    out << rec.dump() << "\n";
  }
  for (const NuclearRecord& n : report.nuclear) {
    nlohmann::json rec{{"type", "nuclear"}, {"config_hash", report.config_hash},
                       {"step", n.step},   {"fro", n.fro},
                       {"nuc", n.nuc},     {"rank", n.rank}};
    out << rec.dump() << "\n";
  }
  if (!out) throw IoError("save_stage_report: write failed for " + path.string());
}

inline StageReport load_stage_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_stage_report: cannot open " + path.string());
  StageReport report;
  std::string line;
  bool have_header = false;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      std::string type = j.at("type").get<std::string>();
      if (type == "stage_header") {
        report.stage = j.at("stage").get<int>();
        report.domain = j.at("domain").get<std::string>();
        report.config_hash = j.at("config_hash").get<std::string>();
        have_header = true;
      } else if (type == "epoch") {
        EpochRecord r;
        r.epoch = j.at("epoch").get<int>();
        for (auto& [k, v] : j.at("losses").items()) r.losses[k] = v.get<double>();
        r.pseudo_label_accuracy = j.at("pseudo_label_accuracy").get<double>();
        r.target_accuracy = j.at("target_accuracy").get<double>();
        r.wall_seconds = j.at("wall_seconds").get<double>();
        report.records.push_back(std::move(r));
      } else if (type == "nuclear") {
        report.nuclear.push_back({j.at("step").get<long>(), j.at("fro").get<double>(),
                                  j.at("nuc").get<double>(), j.at("rank").get<int>()});
      } else {
        throw IoError("load_stage_report: unknown record type '" + type + "' at line " +
                      std::to_string(line_no) + " of " + path.string());
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError("load_stage_report: malformed line " + std::to_string(line_no) + " of " +
                    path.string() + ": " + e.what());
    }
  }
  if (!have_header) throw IoError("load_stage_report: no header record in " + path.string());
  report.validate();
  return report;
}

// CSV twin of the record stream; doubles print in shortest round-trip form so
// the exported values equal the in-memory ones.
inline void report_to_csv(const StageReport& report, const std::filesystem::path& path) {
  std::vector<std::string> loss_keys;
  for (const EpochRecord& r : report.records)
    for (const auto& [k, v] : r.losses)
      if (std::find(loss_keys.begin(), loss_keys.end(), k) == loss_keys.end())
        loss_keys.push_back(k);
  std::sort(loss_keys.begin(), loss_keys.end());

  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("report_to_csv: cannot open " + path.string());
  out << "epoch";
  for (const std::string& k : loss_keys) out << ",loss_" << k;
  out << ",pseudo_label_accuracy,target_accuracy,wall_seconds\n";
  for (const EpochRecord& r : report.records) {
    out << r.epoch;
    for (const std::string& k : loss_keys) {
      auto it = r.losses.find(k);
      out << "," << (it == r.losses.end() ? "" : format_double(it->second));
    }
    out << "," << format_double(r.pseudo_label_accuracy) << ","
        << format_double(r.target_accuracy) << "," << format_double(r.wall_seconds) << "\n";
  }
  if (!out) throw IoError("report_to_csv: write failed for " + path.string());
}

// ---- evaluation -------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  Vector per_class;  // per-class recall; -1 for classes with no samples
  std::vector<int> predictions;
};

inline std::vector<int> predict_labels(NetworkAssembly& net, const UnlabeledView& view,
                                       int eval_batch = 64) {
  if (view.size() == 0) throw ValidationError("predict_labels: empty dataset");
  std::vector<int> preds(static_cast<std::size_t>(view.size()));
  for (int start = 0; start < view.size(); start += eval_batch) {
    int end = std::min(view.size(), start + eval_batch);
    std::vector<Image> batch;
    batch.reserve(static_cast<std::size_t>(end - start));
    for (int i = start; i < end; ++i) batch.push_back(view.image(i));
    Matrix logits = net.forward(batch, Mode::Eval).logits;
    for (int i = start; i < end; ++i) {
      Eigen::Index best;
      logits.row(i - start).maxCoeff(&best);
      preds[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
  }
  return preds;
}

inline EvalResult score_predictions(const std::vector<int>& preds, const std::vector<int>& labels,
                                    int k) {
  if (preds.size() != labels.size())
    throw ValidationError("score_predictions: prediction and label counts differ");
  if (preds.empty()) throw ValidationError("score_predictions: empty input");
  std::vector<long> hit(static_cast<std::size_t>(k), 0), tot(static_cast<std::size_t>(k), 0);
  long correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    int y = labels[i];
    if (y < 0 || y >= k)
      throw ValidationError("score_predictions: label out of range at sample " +
                            std::to_string(i));
    ++tot[static_cast<std::size_t>(y)];
    if (preds[i] == y) {
      ++correct;
      ++hit[static_cast<std::size_t>(y)];
    }
  }
  EvalResult r;
  r.predictions = preds;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
  r.per_class = Vector::Constant(k, -1.0);
  for (int c = 0; c < k; ++c)
    if (tot[static_cast<std::size_t>(c)] > 0)
      r.per_class(c) = static_cast<double>(hit[static_cast<std::size_t>(c)]) /
                       static_cast<double>(tot[static_cast<std::size_t>(c)]);
  return r;
}

inline EvalResult evaluate(NetworkAssembly& net, const DomainDataset& ds, int eval_batch = 64) {
  if (ds.num_classes() != net.k)
    throw ValidationError("evaluate: dataset has " + std::to_string(ds.num_classes()) +
                          " classes, network has " + std::to_string(net.k));
  std::vector<int> labels(static_cast<std::size_t>(ds.size()));
  for (int i = 0; i < ds.size(); ++i) labels[static_cast<std::size_t>(i)] = ds.label(i);
  return score_predictions(predict_labels(net, UnlabeledView(ds), eval_batch), labels,
                           ds.num_classes());
}

// Accuracy of predictions on a label-free view, scored through the sealed
// evaluation channel.
inline double accuracy_against(const std::vector<int>& preds, const UnlabeledView& view,
                               const EvalChannel& eval) {
  if (static_cast<int>(preds.size()) != view.size())
    throw ValidationError("accuracy_against: prediction count does not match dataset");
  long correct = 0;
  for (int i = 0; i < view.size(); ++i)
    if (preds[static_cast<std::size_t>(i)] == eval.label_of(view.key(i))) ++correct;
  return static_cast<double>(correct) / static_cast<double>(view.size());
}

// ---- shared plumbing ---------------------------------------------------------

inline SgdConfig optimizer_config(const AdaptationConfig& cfg, long total_steps) {
  return {cfg.lr, cfg.momentum, cfg.weight_decay, cfg.backbone_lr_scale, cfg.lr_schedule,
          total_steps};
}

// Duplicates the architecture and copies every tensor, leaving the source
// assembly untouched by later training.
inline NetworkAssembly clone_network(NetworkAssembly& src, const CheckpointMeta& meta) {
  NetworkAssembly dst = build_network(meta.arch_config(), meta.k, 0, meta.channels);
  std::vector<Param*> ps = src.all_params(), pd = dst.all_params();
  if (ps.size() != pd.size())
    throw ValidationError("clone_network: parameter count mismatch against metadata");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i]->name != pd[i]->name)
      throw ValidationError("clone_network: tensor order mismatch at " + ps[i]->name);
    pd[i]->value = ps[i]->value;
  }
  return dst;
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// ---- stage 1: supervised source training -------------------------------------

struct Stage1Result {
  NetworkAssembly net;
  CheckpointMeta meta;
  StageReport report;
};

inline Stage1Result run_stage1(const AdaptationConfig& cfg, const DomainDataset& source) {
  cfg.validate();
  if (source.size() < 2)
    throw ValidationError("run_stage1: source dataset needs at least 2 samples");
  if (source.num_classes() < 2)
    throw ValidationError("run_stage1: source dataset needs at least 2 classes");

  Rng root(cfg.seed);
  Stage1Result out;
  out.net = build_network(cfg, source.num_classes(), root.split("stage1/init").seed());
  out.meta = meta_from_config(cfg, source.num_classes());
  out.meta.stage = 1;
  out.meta.source_domain = source.domain_id();
  out.meta.epoch = cfg.epochs_stage1;
  out.report.stage = 1;
  out.report.domain = source.domain_id();
  out.report.config_hash = cfg.hash();

  long steps_per_epoch = (source.size() + cfg.batch_size - 1) / cfg.batch_size;
  Sgd opt(optimizer_config(cfg, steps_per_epoch * cfg.epochs_stage1));

  for (int epoch = 0; epoch < cfg.epochs_stage1; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng = root.split("stage1/epoch" + std::to_string(epoch));
    double ce_sum = 0.0;
    long batches = 0;
    for (const std::vector<int>& idx : make_batches(source.size(), cfg.batch_size, shuffle_rng)) {
      std::vector<Image> batch;
      std::vector<int> labels;
      batch.reserve(idx.size());
      for (int i : idx) {
        batch.push_back(source.image(i));
        labels.push_back(source.label(i));
      }
      Matrix targets = smooth_label_matrix(labels, source.num_classes(), cfg.smoothing);
      out.net.zero_grad();
      ForwardResult r = out.net.forward(batch, Mode::Train);
      auto [loss, dlogits] = source_ce_grad(r.logits, targets);
      out.net.backward_from_logits(dlogits);
      opt.step(out.net);
      ce_sum += loss;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.losses["source_ce"] = ce_sum / static_cast<double>(batches);
    rec.target_accuracy = evaluate(out.net, source).accuracy;
    rec.wall_seconds = detail::seconds_since(t0);
    out.report.records.push_back(std::move(rec));
  }
  return out;
}

// ---- stage 2: single-target adaptation ---------------------------------------

struct Stage2Result {
  NetworkAssembly net;
  CheckpointMeta meta;
  PseudoLabelBank bank;
  StageReport report;
};

// Adapts backbone and bottleneck to one unlabeled target; the classifier is
// frozen for the whole stage. `eval` is optional and feeds reporting only.
inline Stage2Result run_stage2(const AdaptationConfig& cfg, NetworkAssembly& source_net,
                               const CheckpointMeta& source_meta, const UnlabeledView& target,
                               const EvalChannel* eval = nullptr) {
  cfg.validate();
  require_checkpoint(source_meta, cfg.backbone_id, target.num_classes(), 1);
  if (target.size() < 2)
    throw ValidationError("run_stage2: target dataset needs at least 2 samples");

  Stage2Result out;
  out.net = clone_network(source_net, source_meta);
  out.net.set_trainable("classifier", false);
  out.meta = source_meta;
  out.meta.stage = 2;
  out.meta.target_domain = target.domain_id();
  out.meta.config_hash = cfg.hash();
  out.meta.epoch = cfg.epochs_stage2;
  out.report.stage = 2;
  out.report.domain = target.domain_id();
  out.report.config_hash = cfg.hash();

  const int k = target.num_classes();
  const LossWeights& w = cfg.loss_weights;
  const bool null_objective =
      w.lambda_nm == 0.0 && w.lambda_pl == 0.0 && w.lambda_cons == 0.0;
  const std::string main_loss = cfg.stage2_objective;  // "nm" or "im"

  Rng root(cfg.seed);
  AugmentationPair aug = make_augmentation_pair(cfg);
  long steps_per_epoch = (target.size() + cfg.batch_size - 1) / cfg.batch_size;
  Sgd opt(optimizer_config(cfg, steps_per_epoch * cfg.epochs_stage2));
  GlobalMeanTracker tracker(cfg.ema_momentum);
  std::optional<PseudoLabelBank> bank;
  long diag_step = 0;

  // Full inference pass over the raw target; feeds clustering and the global
  // prediction mean.
  auto full_pass = [&](int epoch) {
    Matrix features(target.size(), out.net.d);
    Matrix probs(target.size(), k);
    std::vector<std::string> keys(static_cast<std::size_t>(target.size()));
    for (int start = 0; start < target.size(); start += 64) {
      int end = std::min(target.size(), start + 64);
      std::vector<Image> batch;
      for (int i = start; i < end; ++i) batch.push_back(target.image(i));
      ForwardResult r = out.net.forward(batch, Mode::Eval);
      features.middleRows(start, end - start) = r.features;
      probs.middleRows(start, end - start) = softmax_rows(r.logits);
    }
    for (int i = 0; i < target.size(); ++i) keys[static_cast<std::size_t>(i)] = target.key(i);
    bank = epoch_update(bank, target.domain_id(), keys, features, probs, cfg.plr_alpha,
                        cfg.plr_rounds);
    bank->epoch = epoch;
    tracker.reset(batch_mean_rows(probs));
  };

  for (int epoch = 0; epoch < cfg.epochs_stage2; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    full_pass(epoch);

    EpochRecord rec;
    rec.epoch = epoch;
    if (eval) {
      long agree = 0;
      for (int i = 0; i < bank->size(); ++i)
        if (bank->hard[static_cast<std::size_t>(i)] == eval->label_of(target.key(i))) ++agree;
      rec.pseudo_label_accuracy = static_cast<double>(agree) / static_cast<double>(bank->size());
    }

    std::map<std::string, double> sums{{main_loss, 0.0}, {"pseudo_ce", 0.0},
                                       {"consistency", 0.0}, {"total", 0.0}};
    long batches = 0;
    if (!null_objective) {
      std::string scope = "stage2/" + target.domain_id() + "/epoch" + std::to_string(epoch);
      Rng batch_rng = root.split(scope + "/batches");
      Rng aug_rng = root.split(scope + "/aug");
      for (const std::vector<int>& idx :
           make_batches(target.size(), cfg.batch_size, batch_rng)) {
        const Eigen::Index b = static_cast<Eigen::Index>(idx.size());
        std::vector<Image> weak_batch, strong_batch;
        weak_batch.reserve(idx.size());
        strong_batch.reserve(idx.size());
        for (int i : idx) {
          auto [wk, st] = augment_pair(target.image(i), aug, aug_rng);
          weak_batch.push_back(std::move(wk));
          strong_batch.push_back(std::move(st));
        }

        // Weak branch: inference mode, no gradients; serves as soft teacher.
        Matrix weak_probs =
            softmax_rows(out.net.forward(weak_batch, Mode::Eval).logits);
        Vector global_mean = tracker.mean;

        out.net.zero_grad();
        Matrix strong_logits = out.net.forward(strong_batch, Mode::Train).logits;
        Matrix dlogits = Matrix::Zero(b, k);
        double loss_main = 0.0, loss_pl = 0.0, loss_cons = 0.0;
        if (w.lambda_nm > 0.0) {
          auto [l, d] = main_loss == "im" ? im_loss_grad(strong_logits)
                                          : nm_loss_grad(strong_logits);
          loss_main = l;
          dlogits += w.lambda_nm * d;
        }
        if (w.lambda_pl > 0.0) {
          Matrix soft_targets(b, k);
          for (Eigen::Index r = 0; r < b; ++r)
            soft_targets.row(r) = bank->soft.row(idx[static_cast<std::size_t>(r)]);
          auto [l, d] = pseudo_ce_grad(strong_logits, soft_targets);
          loss_pl = l;
          dlogits += w.lambda_pl * d;
        }
        if (w.lambda_cons > 0.0) {
          auto [l, d] = consistency_grad(weak_probs, strong_logits, global_mean);
          loss_cons = l;
          dlogits += w.lambda_cons * d;
        }
        tracker.update(batch_mean_rows(weak_probs));

        double total = total_loss(loss_main, loss_pl, loss_cons, w);
        out.net.backward_from_logits(dlogits);
        opt.step(out.net);

        if (diag_step % 8 == 0) {
          NuclearCheck c = nuclear_norm_check(softmax_rows(strong_logits));
          out.report.nuclear.push_back({diag_step, c.fro, c.nuc, c.rank});
        }
        ++diag_step;

        sums[main_loss] += loss_main;
        sums["pseudo_ce"] += loss_pl;
        sums["consistency"] += loss_cons;
        sums["total"] += total;
        ++batches;
      }
    }

    for (auto& [key, value] : sums)
      rec.losses[key] = batches > 0 ? value / static_cast<double>(batches) : 0.0;
    if (eval)
      rec.target_accuracy = accuracy_against(predict_labels(out.net, target), target, *eval);
    rec.wall_seconds = detail::seconds_since(t0);
    out.report.records.push_back(std::move(rec));
  }

  if (cfg.epochs_stage2 == 0) full_pass(0);  // still emit a usable label bank
  out.bank = *bank;
  return out;
}

// ---- stage 3: multi-target distillation --------------------------------------

struct Stage3Result {
  NetworkAssembly net;
  CheckpointMeta meta;
  StageReport report;
};

// Distills per-target teacher label banks into one fresh student by training
// on convex image/label mixtures drawn across domains.
inline Stage3Result run_stage3(const AdaptationConfig& cfg,
                               const std::vector<PseudoLabelBank>& banks,
                               const std::vector<UnlabeledView>& targets,
                               const std::vector<const EvalChannel*>& evals = {}) {
  cfg.validate();
  if (banks.empty() || banks.size() != targets.size())
    throw ValidationError("run_stage3: need one label bank per target domain");
  if (!evals.empty() && evals.size() != targets.size())
    throw ValidationError("run_stage3: evaluation channels must match targets");

  const int t = static_cast<int>(targets.size());
  const int k = targets[0].num_classes();
  long total_samples = 0;
  for (const UnlabeledView& v : targets) total_samples += v.size();

  // Join each dataset with its bank by sample key.
  std::vector<Matrix> soft(static_cast<std::size_t>(t));
  std::string joined_domains;
  for (int d = 0; d < t; ++d) {
    const UnlabeledView& view = targets[static_cast<std::size_t>(d)];
    const PseudoLabelBank& bank = banks[static_cast<std::size_t>(d)];
    bank.validate();
    if (view.num_classes() != k)
      throw ValidationError("run_stage3: class counts differ across targets");
    if (bank.soft.cols() != k)
      throw ValidationError("run_stage3: bank for " + bank.domain_id + " has " +
                            std::to_string(bank.soft.cols()) + " classes, expected " +
                            std::to_string(k));
    std::map<std::string, int> by_key;
    for (int i = 0; i < bank.size(); ++i) by_key[bank.keys[static_cast<std::size_t>(i)]] = i;
    Matrix& m = soft[static_cast<std::size_t>(d)];
    m.resize(view.size(), k);
    for (int i = 0; i < view.size(); ++i) {
      auto it = by_key.find(view.key(i));
      if (it == by_key.end())
        throw ValidationError("run_stage3: no pseudo-label for sample " + view.key(i));
      m.row(i) = bank.soft.row(it->second);
    }
    joined_domains += (d ? "+" : "") + view.domain_id();
  }

  Rng root(cfg.seed);
  Stage3Result out;
  out.net = build_network(cfg, k, root.split("stage3/init").seed());
  out.meta = meta_from_config(cfg, k);
  out.meta.stage = 3;
  out.meta.target_domain = joined_domains;
  out.meta.epoch = cfg.epochs_stage3;
  out.report.stage = 3;
  out.report.domain = joined_domains;
  out.report.config_hash = cfg.hash();

  long steps_per_epoch = std::max<long>(1, (total_samples + cfg.batch_size - 1) / cfg.batch_size);
  Sgd opt(optimizer_config(cfg, steps_per_epoch * cfg.epochs_stage3));

  for (int epoch = 0; epoch < cfg.epochs_stage3; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    Rng rng = root.split("stage3/epoch" + std::to_string(epoch));
    double loss_sum = 0.0;
    for (long step = 0; step < steps_per_epoch; ++step) {
      std::vector<Image> batch;
      Matrix targets_mixed(cfg.batch_size, k);
      batch.reserve(static_cast<std::size_t>(cfg.batch_size));
      for (int s = 0; s < cfg.batch_size; ++s) {
        int di = rng.uniform_int(t), dj = rng.uniform_int(t);
        int ii = rng.uniform_int(targets[static_cast<std::size_t>(di)].size());
        int jj = rng.uniform_int(targets[static_cast<std::size_t>(dj)].size());
        double lam = rng.beta(cfg.mixup_concentration, cfg.mixup_concentration);
        auto [img, label] = mixup_pair(
            targets[static_cast<std::size_t>(di)].image(ii),
            soft[static_cast<std::size_t>(di)].row(ii).transpose(),
            targets[static_cast<std::size_t>(dj)].image(jj),
            soft[static_cast<std::size_t>(dj)].row(jj).transpose(), lam);
        batch.push_back(std::move(img));
        targets_mixed.row(s) = label.transpose();
      }
      out.net.zero_grad();
      Matrix logits = out.net.forward(batch, Mode::Train).logits;
      // Per-sample mixing weights fold into the labels: the two-term loss
      // equals plain soft cross-entropy against the mixed rows.
      auto [loss, dlogits] = pseudo_ce_grad(logits, targets_mixed);
      out.net.backward_from_logits(dlogits);
      opt.step(out.net);
      loss_sum += loss;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.losses["mkd"] = loss_sum / static_cast<double>(steps_per_epoch);
    if (!evals.empty()) {
      double acc_sum = 0.0;
      for (int d = 0; d < t; ++d)
        acc_sum += accuracy_against(
            predict_labels(out.net, targets[static_cast<std::size_t>(d)]),
            targets[static_cast<std::size_t>(d)], *evals[static_cast<std::size_t>(d)]);
      rec.target_accuracy = acc_sum / static_cast<double>(t);
    }
    rec.wall_seconds = detail::seconds_since(t0);
    out.report.records.push_back(std::move(rec));
  }
  return out;
}

// ---- ablation grid ------------------------------------------------------------

struct AblationRow {
  std::string name;
  bool nm = false, pl = false, cons = false;
  double accuracy = 0.0;
};

// One adaptation run per loss-component mask, scored on the target. The empty
// mask never steps the optimizer, so its row is the source-only accuracy.
inline std::vector<AblationRow> run_ablation(const AdaptationConfig& cfg,
                                             NetworkAssembly& source_net,
                                             const CheckpointMeta& source_meta,
                                             const UnlabeledView& target,
                                             const EvalChannel& eval) {
  std::vector<AblationRow> rows;
  for (int mask = 0; mask < 8; ++mask) {
    AblationRow row;
    row.nm = mask & 1;
    row.pl = mask & 2;
    row.cons = mask & 4;
    row.name = !(row.nm || row.pl || row.cons)
                   ? "source_only"
                   : std::string(row.nm ? "+nm" : "") + (row.pl ? "+pl" : "") +
                         (row.cons ? "+cons" : "");
    if (!row.name.empty() && row.name[0] == '+') row.name.erase(0, 1);

    AdaptationConfig masked = cfg;
    masked.loss_weights.lambda_nm = row.nm ? cfg.loss_weights.lambda_nm : 0.0;
    masked.loss_weights.lambda_pl = row.pl ? cfg.loss_weights.lambda_pl : 0.0;
    masked.loss_weights.lambda_cons = row.cons ? cfg.loss_weights.lambda_cons : 0.0;
    Stage2Result adapted = run_stage2(masked, source_net, source_meta, target, &eval);
    row.accuracy = accuracy_against(predict_labels(adapted.net, target), target, eval);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void ablation_to_csv(const std::vector<AblationRow>& rows,
                            const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("ablation_to_csv: cannot open " + path.string());
  out << "name,nm,pl,cons,accuracy\n";
  for (const AblationRow& r : rows)
    out << r.name << "," << r.nm << "," << r.pl << "," << r.cons << ","
        << format_double(r.accuracy) << "\n";
  if (!out) throw IoError("ablation_to_csv: write failed for " + path.string());
}

}  // namespace sfda
