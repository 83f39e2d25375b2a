#pragma once

#include "sfda/common.hpp"
#include "sfda/config.hpp"
#include "sfda/image.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace sfda {

struct LabeledSample {
  std::string key;
  Image image;
  int label = -1;
};

// Immutable per-domain image collection. Every pixel access goes through
// image(), which counts reads so tests can audit that later stages never
// touch the source domain.
class DomainDataset {
 public:
  DomainDataset() = default;
  DomainDataset(std::string domain_id, std::vector<std::string> class_names,
                std::vector<LabeledSample> samples)
      : domain_id_(std::move(domain_id)),
        class_names_(std::move(class_names)),
        samples_(std::move(samples)) {
    std::map<std::string, int> seen;
    for (const LabeledSample& s : samples_) {
      if (++seen[s.key] > 1)
        throw ValidationError("DomainDataset " + domain_id_ + ": duplicate sample key " + s.key);
      if (s.label < 0 || s.label >= static_cast<int>(class_names_.size()))
        throw ValidationError("DomainDataset " + domain_id_ + ": label out of range for " +
                              s.key);
    }
  }

  const std::string& domain_id() const { return domain_id_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  int num_classes() const { return static_cast<int>(class_names_.size()); }
  int size() const { return static_cast<int>(samples_.size()); }
  const std::string& key(int i) const { return samples_.at(static_cast<std::size_t>(i)).key; }
  int label(int i) const { return samples_.at(static_cast<std::size_t>(i)).label; }

  const Image& image(int i) const {
    ++image_reads_;
    return samples_.at(static_cast<std::size_t>(i)).image;
  }

  std::uint64_t image_reads() const { return image_reads_; }

 private:
  std::string domain_id_;
  std::vector<std::string> class_names_;
  std::vector<LabeledSample> samples_;
  mutable std::uint64_t image_reads_ = 0;
};

// Label-free handle on a dataset. Adaptation stages receive this type, so
// reaching ground truth is a compile error rather than a discipline issue.
class UnlabeledView {
 public:
  explicit UnlabeledView(const DomainDataset& ds) : ds_(&ds) {}

  const std::string& domain_id() const { return ds_->domain_id(); }
  int num_classes() const { return ds_->num_classes(); }
  int size() const { return ds_->size(); }
  const std::string& key(int i) const { return ds_->key(i); }
  const Image& image(int i) const { return ds_->image(i); }

 private:
  const DomainDataset* ds_;
};

// Ground truth keyed by sample, for reports and metrics only.
class EvalChannel {
 public:
  EvalChannel() = default;
  explicit EvalChannel(const DomainDataset& ds) {
    for (int i = 0; i < ds.size(); ++i) labels_.emplace(ds.key(i), ds.label(i));
  }

  int label_of(const std::string& key) const {
    auto it = labels_.find(key);
    if (it == labels_.end()) throw ValidationError("EvalChannel: unknown sample key " + key);
    return it->second;
  }

  int size() const { return static_cast<int>(labels_.size()); }

 private:
  std::map<std::string, int> labels_;
};

// ---- folder ingestion ------------------------------------------------------

inline DomainDataset load_image_folder(const std::filesystem::path& root,
                                       const std::string& domain_id) {
  namespace fs = std::filesystem;
  fs::path dir = root / domain_id;
  if (!fs::is_directory(dir))
    throw IoError("load_image_folder: domain directory not found: " + dir.string());
  std::vector<std::string> class_names;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory()) class_names.push_back(entry.path().filename().string());
  std::sort(class_names.begin(), class_names.end());
  if (class_names.empty())
    throw IoError("load_image_folder: no class directories under " + dir.string());

  std::vector<LabeledSample> samples;
  for (std::size_t k = 0; k < class_names.size(); ++k) {
    fs::path cls = dir / class_names[k];
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(cls))
      if (entry.is_regular_file()) files.push_back(entry.path().filename().string());
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw IoError("load_image_folder: class directory is empty: " + cls.string());
    for (const std::string& f : files) {
      LabeledSample s;
      s.key = domain_id + "/" + class_names[k] + "/" + f;
      s.image = read_ppm((cls / f).string());
      s.label = static_cast<int>(k);
      samples.push_back(std::move(s));
    }
  }
  return DomainDataset(domain_id, class_names, std::move(samples));
}

// ---- synthetic domain-shift suite -------------------------------------------

namespace detail {

struct ClassStyle {
  int shape;  // 0 disk, 1 square outline, 2 plus, 3 stripes
  double r, g, b;
};

inline ClassStyle class_style(int k) {
  static const double palette[4][3] = {
      {0.85, 0.25, 0.20},  // red
      {0.20, 0.80, 0.30},  // green
      {0.25, 0.35, 0.85},  // blue
      {0.85, 0.80, 0.20},  // yellow
  };
  ClassStyle st;
  st.shape = k % 4;
  int rot = (k / 4) % 3;  // extra classes reuse shapes with rotated colors
  st.r = palette[k % 4][(0 + rot) % 3];
  st.g = palette[k % 4][(1 + rot) % 3];
  st.b = palette[k % 4][(2 + rot) % 3];
  return st;
}

inline bool shape_hits(int shape, int dy, int dx, int radius, int thick) {
  int ay = std::abs(dy), ax = std::abs(dx);
  switch (shape) {
    case 0:
      return dy * dy + dx * dx <= radius * radius;
    case 1:
      return std::max(ay, ax) <= radius && std::max(ay, ax) >= radius - thick;
    case 2:
      return (ay <= thick && ax <= radius) || (ax <= thick && ay <= radius);
    default:
      return ay <= radius && ax <= radius && ((dy + radius) / thick) % 2 == 0;
  }
}

}  // namespace detail

// Canonical centered class image without jitter or corruption; exposed so
// tests can match rendered samples against an independent template.
inline Image synthetic_class_template(int k, int size) {
  detail::ClassStyle st = detail::class_style(k);
  int radius = (size * 9) / 32;
  int thick = std::max(1, radius / 3);
  Image img(3, size, size);
  int c = size / 2;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      bool hit = detail::shape_hits(st.shape, y - c, x - c, radius, thick);
      img.at(0, y, x) = hit ? st.r : 0.12;
      img.at(1, y, x) = hit ? st.g : 0.12;
      img.at(2, y, x) = hit ? st.b : 0.14;
    }
  return img;
}

// Renders one sample: jittered class shape on a noisy dark background, then
// the domain's corruption. All randomness comes from the caller's stream.
inline Image render_synthetic_sample(int label, int size, const SyntheticCorruption& cor,
                                     Rng& rng) {
  detail::ClassStyle st = detail::class_style(label);
  int radius = (size * 9) / 32;
  int thick = std::max(1, radius / 3);
  int cy = size / 2 + rng.uniform_int(7) - 3;
  int cx = size / 2 + rng.uniform_int(7) - 3;
  double jr = rng.uniform(-0.05, 0.05), jg = rng.uniform(-0.05, 0.05),
         jb = rng.uniform(-0.05, 0.05);
  Image img(3, size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      bool hit = detail::shape_hits(st.shape, y - cy, x - cx, radius, thick);
      double bg = rng.uniform(-0.02, 0.02);
      img.at(0, y, x) = clamp01((hit ? st.r + jr : 0.12) + bg);
      img.at(1, y, x) = clamp01((hit ? st.g + jg : 0.12) + bg);
      img.at(2, y, x) = clamp01((hit ? st.b + jb : 0.14) + bg);
    }

  if (cor.rotation_deg != 0.0) img = rotate(img, cor.rotation_deg * rng.uniform(0.5, 1.0));
  if (cor.hue_deg != 0.0) img = hue_rotate(img, cor.hue_deg * rng.uniform(0.8, 1.2));
  if (cor.blur_radius > 0.0) img = box_blur(img, static_cast<int>(std::lround(cor.blur_radius)));
  if (cor.brightness != 0.0) img = adjust_brightness(img, cor.brightness * rng.uniform(0.5, 1.5));
  if (cor.contrast != 0.0) img = adjust_contrast(img, 1.0 + cor.contrast * rng.uniform(0.5, 1.5));
  if (cor.noise_sigma > 0.0) img = add_noise(img, cor.noise_sigma, rng);
  return img;
}

inline std::vector<std::string> synthetic_class_names(int k) {
  std::vector<std::string> names;
  static const char* base[4] = {"disk", "square", "plus", "stripes"};
  for (int i = 0; i < k; ++i)
    names.push_back("c" + std::to_string(i) + "_" + base[i % 4]);
  return names;
}

inline std::string synthetic_domain_name(int d) { return "domain" + std::to_string(d); }

// Deterministic multi-domain suite: every sample has its own child stream
// derived from (seed, domain, index), so datasets are bitwise reproducible
// and independent of generation order.
inline std::vector<DomainDataset> make_synthetic_suite(const SyntheticShiftSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  std::vector<DomainDataset> out;
  for (int d = 0; d < spec.num_domains; ++d) {
    std::string domain = synthetic_domain_name(d);
    std::vector<LabeledSample> samples;
    samples.reserve(static_cast<std::size_t>(spec.samples_per_domain));
    for (int i = 0; i < spec.samples_per_domain; ++i) {
      int label = i % spec.num_classes;
      Rng stream = root.split(domain + "/" + std::to_string(i));
      char key[32];
      std::snprintf(key, sizeof key, "%s/%06d", domain.c_str(), i);
      LabeledSample s;
      s.key = key;
      s.label = label;
      s.image = render_synthetic_sample(label, spec.image_size,
                                        spec.corruption[static_cast<std::size_t>(d)], stream);
      samples.push_back(std::move(s));
    }
    out.emplace_back(domain, synthetic_class_names(spec.num_classes), std::move(samples));
  }
  return out;
}

// Writes a dataset as root/domain/class/NNNNNN.ppm (8-bit, lossy).
inline void export_domain(const DomainDataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  for (int i = 0; i < ds.size(); ++i) {
    const std::string& cls = ds.class_names()[static_cast<std::size_t>(ds.label(i))];
    fs::path dir = root / ds.domain_id() / cls;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("export_domain: cannot create " + dir.string() + ": " + ec.message());
    char name[32];
    std::snprintf(name, sizeof name, "%06d.ppm", i);
    write_ppm(ds.image(i), (dir / name).string());
  }
}

// Shuffled batch index lists; a trailing chunk of size 1 is merged into its
// predecessor so batch statistics stay defined.
inline std::vector<std::vector<int>> make_batches(int n, int batch_size, Rng& rng) {
  if (batch_size < 1) throw ValidationError("make_batches: batch size must be positive");
  std::vector<int> order = range_indices(n);
  rng.shuffle(order);
  std::vector<std::vector<int>> out;
  for (int start = 0; start < n; start += batch_size) {
    int end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  if (out.size() >= 2 && out.back().size() < 2) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

}  // namespace sfda
