#pragma once

#include "sfda/common.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace sfda {

// Loss weights of the stage-2 objective.
struct LossWeights {
  double lambda_nm = 1.0;
  double lambda_pl = 0.3;
  double lambda_cons = 1.0;

  void validate() const {
    if (lambda_nm < 0 || lambda_pl < 0 || lambda_cons < 0)
      throw ValidationError("loss weights must be nonnegative");
  }
};

struct SyntheticCorruption {
  double rotation_deg = 0.0;   // in-plane rotation of the whole image
  double hue_deg = 0.0;        // channel-mixing rotation about the gray axis
  double noise_sigma = 0.0;    // additive pixel noise
  double blur_radius = 0.0;    // box blur radius (0 disables)
  double brightness = 0.0;     // additive offset
  double contrast = 0.0;       // multiplicative deviation from 1

  SyntheticCorruption scaled(double m) const {
    return {rotation_deg * m, hue_deg * m, noise_sigma * m,
            blur_radius * m, brightness * m, contrast * m};
  }
};

struct SyntheticShiftSpec {
  int num_domains = 4;
  int num_classes = 4;
  int samples_per_domain = 500;
  int image_size = 32;
  std::uint64_t seed = 1;
  // One corruption per domain; domain 0 is the source and stays clean.
  std::vector<SyntheticCorruption> corruption;

  void validate() const {
    if (num_classes < 2) throw ValidationError("synthetic spec: need at least 2 classes");
    if (samples_per_domain < num_classes)
      throw ValidationError("synthetic spec: samples per domain must be >= classes");
    if (num_domains < 1) throw ValidationError("synthetic spec: need at least 1 domain");
    if (image_size < 8) throw ValidationError("synthetic spec: image size too small");
    if (static_cast<int>(corruption.size()) != num_domains)
      throw ValidationError("synthetic spec: one corruption entry per domain required");
  }
};

// All hyperparameters of the three-stage pipeline, loadable from a flat
// key=value file. Unknown keys are rejected; the canonical serialization
// (sorted keys) is hashed into every checkpoint and report record.
struct AdaptationConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "";

  std::string source_domain = "domain0";
  std::vector<std::string> target_domains = {"domain1", "domain2", "domain3"};

  // data
  std::string data_root = "";
  std::string data_source = "synthetic";  // synthetic | folder
  int image_size = 32;
  int synth_num_domains = 4;
  int synth_classes = 4;
  int synth_samples_per_domain = 500;
  std::uint64_t synth_seed = 1;
  std::vector<double> synth_magnitudes = {0.0, 1.0, 1.0, 1.0};
  SyntheticCorruption synth_base{12.0, 120.0, 0.05, 0.0, 0.08, 0.15};

  // model
  std::string backbone_id = "conv4";
  int conv_width = 8;
  int attn_dim = 32;
  int attn_heads = 2;
  int attn_blocks = 4;
  int attn_patch = 8;
  int bottleneck_dim = 256;

  // training
  int batch_size = 32;
  int epochs_stage1 = 15;
  int epochs_stage2 = 8;
  int epochs_stage3 = 8;

  // optimizer
  std::string optim_kind = "sgd";
  double lr = 0.01;
  double backbone_lr_scale = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  std::string lr_schedule = "power";  // power: lr * (1 + 10 p)^-0.75 | const

  // objectives
  LossWeights loss_weights;
  std::string stage2_objective = "nm";  // nm | im (reference baseline)
  double smoothing = 0.1;               // label smoothing for source training
  double plr_alpha = 0.9;               // current-epoch weight in refinement
  int plr_rounds = 2;                   // centroid/assignment alternations
  double mixup_concentration = 0.75;    // Beta concentration for stage-3
  double ema_momentum = 0.9;            // global-mean tracker

  // augmentation op lists (comma separated; empty = identity)
  std::string aug_weak = "hflip,crop4";
  std::string aug_strong = "hflip,crop4,randaug2,erase";

  void validate() const {
    if (batch_size < 2) throw ValidationError("config: batch_size must be >= 2");
    if (lr <= 0) throw ValidationError("config: lr must be positive");
    if (backbone_lr_scale <= 0) throw ValidationError("config: backbone_lr_scale must be positive");
    if (momentum < 0 || momentum >= 1) throw ValidationError("config: momentum must be in [0,1)");
    if (weight_decay < 0) throw ValidationError("config: weight_decay must be nonnegative");
    if (optim_kind != "sgd") throw ValidationError("config: unknown optimizer kind " + optim_kind);
    if (lr_schedule != "power" && lr_schedule != "const")
      throw ValidationError("config: unknown lr schedule " + lr_schedule);
    if (smoothing < 0 || smoothing >= 1) throw ValidationError("config: smoothing must be in [0,1)");
    if (plr_alpha < 0 || plr_alpha > 1) throw ValidationError("config: plr_alpha must be in [0,1]");
    if (plr_rounds < 1) throw ValidationError("config: plr_rounds must be >= 1");
    if (mixup_concentration <= 0) throw ValidationError("config: mixup_concentration must be positive");
    if (ema_momentum < 0 || ema_momentum >= 1)
      throw ValidationError("config: ema_momentum must be in [0,1)");
    if (epochs_stage1 < 0 || epochs_stage2 < 0 || epochs_stage3 < 0)
      throw ValidationError("config: epoch counts must be nonnegative");
    if (backbone_id != "conv4" && backbone_id != "attn4")
      throw ValidationError("config: unknown backbone_id " + backbone_id);
    if (bottleneck_dim < 1) throw ValidationError("config: bottleneck_dim must be positive");
    if (stage2_objective != "nm" && stage2_objective != "im")
      throw ValidationError("config: stage2_objective must be nm or im");
    if (data_source != "synthetic" && data_source != "folder")
      throw ValidationError("config: data_source must be synthetic or folder");
    loss_weights.validate();
    synthetic_spec().validate();
  }

  SyntheticShiftSpec synthetic_spec() const {
    SyntheticShiftSpec spec;
    spec.num_domains = synth_num_domains;
    spec.num_classes = synth_classes;
    spec.samples_per_domain = synth_samples_per_domain;
    spec.image_size = image_size;
    spec.seed = synth_seed;
    for (int d = 0; d < synth_num_domains; ++d) {
      double m = d < static_cast<int>(synth_magnitudes.size())
                     ? synth_magnitudes[static_cast<std::size_t>(d)]
                     : 1.0;
      spec.corruption.push_back(synth_base.scaled(m));
    }
    return spec;
  }

  std::map<std::string, std::string> to_map() const {
    std::map<std::string, std::string> m;
    m["seed"] = std::to_string(seed);
    m["out_dir"] = out_dir;
    m["source_domain"] = source_domain;
    m["target_domains"] = join(target_domains);
    m["data.root"] = data_root;
    m["data.source"] = data_source;
    m["data.image_size"] = std::to_string(image_size);
    m["data.synthetic.num_domains"] = std::to_string(synth_num_domains);
    m["data.synthetic.classes"] = std::to_string(synth_classes);
    m["data.synthetic.samples_per_domain"] = std::to_string(synth_samples_per_domain);
    m["data.synthetic.seed"] = std::to_string(synth_seed);
    m["data.synthetic.magnitudes"] = join_doubles(synth_magnitudes);
    m["data.synthetic.rotation"] = format_double(synth_base.rotation_deg);
    m["data.synthetic.hue"] = format_double(synth_base.hue_deg);
    m["data.synthetic.noise"] = format_double(synth_base.noise_sigma);
    m["data.synthetic.blur"] = format_double(synth_base.blur_radius);
    m["data.synthetic.brightness"] = format_double(synth_base.brightness);
    m["data.synthetic.contrast"] = format_double(synth_base.contrast);
    m["model.backbone_id"] = backbone_id;
    m["model.conv_width"] = std::to_string(conv_width);
    m["model.attn_dim"] = std::to_string(attn_dim);
    m["model.attn_heads"] = std::to_string(attn_heads);
    m["model.attn_blocks"] = std::to_string(attn_blocks);
    m["model.attn_patch"] = std::to_string(attn_patch);
    m["model.bottleneck_dim"] = std::to_string(bottleneck_dim);
    m["train.batch_size"] = std::to_string(batch_size);
    m["train.epochs.stage1"] = std::to_string(epochs_stage1);
    m["train.epochs.stage2"] = std::to_string(epochs_stage2);
    m["train.epochs.stage3"] = std::to_string(epochs_stage3);
    m["optim.kind"] = optim_kind;
    m["optim.lr"] = format_double(lr);
    m["optim.backbone_lr_scale"] = format_double(backbone_lr_scale);
    m["optim.momentum"] = format_double(momentum);
    m["optim.weight_decay"] = format_double(weight_decay);
    m["optim.schedule"] = lr_schedule;
    m["loss.lambda_nm"] = format_double(loss_weights.lambda_nm);
    m["loss.lambda_pl"] = format_double(loss_weights.lambda_pl);
    m["loss.lambda_cons"] = format_double(loss_weights.lambda_cons);
    m["loss.objective"] = stage2_objective;
    m["loss.smoothing"] = format_double(smoothing);
    m["plr.alpha"] = format_double(plr_alpha);
    m["plr.rounds"] = std::to_string(plr_rounds);
    m["mixup.concentration"] = format_double(mixup_concentration);
    m["ema.momentum"] = format_double(ema_momentum);
    m["aug.weak"] = aug_weak;
    m["aug.strong"] = aug_strong;
    return m;
  }

  void set(const std::string& key, const std::string& value) {
    if (key == "seed") seed = parse_u64(key, value);
    else if (key == "out_dir") out_dir = value;
    else if (key == "source_domain") source_domain = value;
    else if (key == "target_domains") target_domains = parse_list(value);
    else if (key == "data.root") data_root = value;
    else if (key == "data.source") data_source = value;
    else if (key == "data.image_size") image_size = parse_int(key, value);
    else if (key == "data.synthetic.num_domains") synth_num_domains = parse_int(key, value);
    else if (key == "data.synthetic.classes") synth_classes = parse_int(key, value);
    else if (key == "data.synthetic.samples_per_domain") synth_samples_per_domain = parse_int(key, value);
    else if (key == "data.synthetic.seed") synth_seed = parse_u64(key, value);
    else if (key == "data.synthetic.magnitudes") synth_magnitudes = parse_doubles(key, value);
    else if (key == "data.synthetic.rotation") synth_base.rotation_deg = parse_double(key, value);
    else if (key == "data.synthetic.hue") synth_base.hue_deg = parse_double(key, value);
    else if (key == "data.synthetic.noise") synth_base.noise_sigma = parse_double(key, value);
    else if (key == "data.synthetic.blur") synth_base.blur_radius = parse_double(key, value);
    else if (key == "data.synthetic.brightness") synth_base.brightness = parse_double(key, value);
    else if (key == "data.synthetic.contrast") synth_base.contrast = parse_double(key, value);
    else if (key == "model.backbone_id") backbone_id = value;
    else if (key == "model.conv_width") conv_width = parse_int(key, value);
    else if (key == "model.attn_dim") attn_dim = parse_int(key, value);
    else if (key == "model.attn_heads") attn_heads = parse_int(key, value);
    else if (key == "model.attn_blocks") attn_blocks = parse_int(key, value);
    else if (key == "model.attn_patch") attn_patch = parse_int(key, value);
    else if (key == "model.bottleneck_dim") bottleneck_dim = parse_int(key, value);
    else if (key == "train.batch_size") batch_size = parse_int(key, value);
    else if (key == "train.epochs.stage1") epochs_stage1 = parse_int(key, value);
    else if (key == "train.epochs.stage2") epochs_stage2 = parse_int(key, value);
    else if (key == "train.epochs.stage3") epochs_stage3 = parse_int(key, value);
    else if (key == "optim.kind") optim_kind = value;
    else if (key == "optim.lr") lr = parse_double(key, value);
    else if (key == "optim.backbone_lr_scale") backbone_lr_scale = parse_double(key, value);
    else if (key == "optim.momentum") momentum = parse_double(key, value);
    else if (key == "optim.weight_decay") weight_decay = parse_double(key, value);
    else if (key == "optim.schedule") lr_schedule = value;
    else if (key == "loss.lambda_nm") loss_weights.lambda_nm = parse_double(key, value);
    else if (key == "loss.lambda_pl") loss_weights.lambda_pl = parse_double(key, value);
    else if (key == "loss.lambda_cons") loss_weights.lambda_cons = parse_double(key, value);
    else if (key == "loss.objective") stage2_objective = value;
    else if (key == "loss.smoothing") smoothing = parse_double(key, value);
    else if (key == "plr.alpha") plr_alpha = parse_double(key, value);
    else if (key == "plr.rounds") plr_rounds = parse_int(key, value);
    else if (key == "mixup.concentration") mixup_concentration = parse_double(key, value);
    else if (key == "ema.momentum") ema_momentum = parse_double(key, value);
    else if (key == "aug.weak") aug_weak = value;
    else if (key == "aug.strong") aug_strong = value;
    else throw ValidationError("config: unknown key '" + key + "'");
  }

  // Canonical form: sorted "key=value" lines. Stable across load/store, so
  // the hash identifies a hyperparameter setting.
  std::string canonical() const {
    std::ostringstream os;
    for (const auto& [k, v] : to_map()) os << k << "=" << v << "\n";
    return os.str();
  }

  std::string hash() const { return hex64(fnv1a64(canonical())); }

  static AdaptationConfig from_string(const std::string& text) {
    AdaptationConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ValidationError("config: line " + std::to_string(lineno) + " has no '='");
      cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
  }

  static AdaptationConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str());
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("config: cannot write " + path);
    f << canonical();
  }

 private:
  static std::vector<std::string> parse_list(const std::string& v) {
    std::vector<std::string> out;
    for (auto& s : split_string(v, ',')) {
      std::string t = trim(s);
      if (!t.empty()) out.push_back(t);
    }
    return out;
  }

  static std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += ",";
      out += v[i];
    }
    return out;
  }

  static std::string join_doubles(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += ",";
      out += format_double(v[i]);
    }
    return out;
  }

  static std::vector<double> parse_doubles(const std::string& key, const std::string& v) {
    std::vector<double> out;
    for (auto& s : split_string(v, ',')) {
      std::string t = trim(s);
      if (!t.empty()) out.push_back(parse_double(key, t));
    }
    return out;
  }

  static double parse_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0')
      throw ValidationError("config: key '" + key + "' expects a number, got '" + v + "'");
    return x;
  }

  static int parse_int(const std::string& key, const std::string& v) {
    char* end = nullptr;
    long x = std::strtol(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0')
      throw ValidationError("config: key '" + key + "' expects an integer, got '" + v + "'");
    return static_cast<int>(x);
  }

  static std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    char* end = nullptr;
    unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0' || v.find('-') != std::string::npos)
      throw ValidationError("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    return static_cast<std::uint64_t>(x);
  }
};

}  // namespace sfda
