#pragma once

#include "sfda/common.hpp"
#include "sfda/config.hpp"
#include "sfda/image.hpp"

#include <string>
#include <utility>
#include <vector>

namespace sfda {

// Weak and strong pipelines as declared op lists. Both are label-preserving
// at the configured scale; an empty list is the identity.
struct AugmentationPair {
  std::vector<std::string> weak_ops;
  std::vector<std::string> strong_ops;
};

inline std::vector<std::string> parse_aug_ops(const std::string& csv) {
  std::vector<std::string> out;
  for (const std::string& raw : split_string(csv, ',')) {
    std::string op = trim(raw);
    if (op.empty() || op == "none") continue;
    if (op != "hflip" && op != "crop4" && op != "randaug2" && op != "erase")
      throw ValidationError("augment: unknown op '" + op + "'");
    out.push_back(op);
  }
  return out;
}

inline AugmentationPair make_augmentation_pair(const AdaptationConfig& cfg) {
  return {parse_aug_ops(cfg.aug_weak), parse_aug_ops(cfg.aug_strong)};
}

namespace detail {

// Pool of elementary perturbations for the strong branch. Each is gentle
// enough to keep the desk-scale classes intact.
inline Image randaug_op(const Image& x, int which, Rng& rng) {
  switch (which) {
    case 0:
      return adjust_contrast(x, 1.0 + rng.uniform(-0.4, 0.4));
    case 1:
      return adjust_brightness(x, rng.uniform(-0.25, 0.25));
    case 2:
      return posterize(x, 3 + rng.uniform_int(4));
    case 3:
      return rotate(x, rng.uniform(-15.0, 15.0));
    default:
      return shift(x, rng.uniform_int(9) - 4, rng.uniform_int(9) - 4);
  }
}

}  // namespace detail

inline Image apply_pipeline(const Image& x, const std::vector<std::string>& ops, Rng& rng) {
  Image out = x;
  for (const std::string& op : ops) {
    if (op == "hflip") {
      if (rng.uniform() < 0.5) out = hflip(out);
    } else if (op == "crop4") {
      // Pad-4 random crop expressed as a bounded translation with edge fill.
      out = shift(out, rng.uniform_int(9) - 4, rng.uniform_int(9) - 4);
    } else if (op == "randaug2") {
      int first = rng.uniform_int(5);
      int second = rng.uniform_int(5);
      out = detail::randaug_op(out, first, rng);
      out = detail::randaug_op(out, second, rng);
    } else if (op == "erase") {
      int eh = 4 + rng.uniform_int(5);
      int ew = 4 + rng.uniform_int(5);
      int y0 = rng.uniform_int(std::max(1, out.h - eh));
      int x0 = rng.uniform_int(std::max(1, out.w - ew));
      out = erase_rect(out, y0, x0, eh, ew, 0.5);
    } else {
      throw ValidationError("augment: unknown op '" + op + "'");
    }
  }
  return out;
}

// One weak view and one strong view of the same base sample, drawn from a
// shared stream so a fixed seed reproduces the pair.
inline std::pair<Image, Image> augment_pair(const Image& x, const AugmentationPair& pair,
                                            Rng& rng) {
  Image weak = apply_pipeline(x, pair.weak_ops, rng);
  Image strong = apply_pipeline(x, pair.strong_ops, rng);
  return {std::move(weak), std::move(strong)};
}

}  // namespace sfda
