#pragma once

#include "sfda/common.hpp"
#include "sfda/config.hpp"
#include "sfda/nn.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace sfda {

// Everything needed to rebuild the assembly and trace where it came from.
struct CheckpointMeta {
  int stage = 0;
  std::string source_domain;
  std::string target_domain;
  int epoch = 0;
  std::string config_hash;
  std::string backbone_id = "conv4";
  int k = 0;
  int bottleneck_dim = 256;
  int image_size = 32;
  int channels = 3;
  int conv_width = 8;
  int attn_dim = 32;
  int attn_heads = 2;
  int attn_blocks = 4;
  int attn_patch = 8;

  nlohmann::json to_json() const {
    return {{"stage", stage},
            {"source_domain", source_domain},
            {"target_domain", target_domain},
            {"epoch", epoch},
            {"config_hash", config_hash},
            {"backbone_id", backbone_id},
            {"k", k},
            {"bottleneck_dim", bottleneck_dim},
            {"image_size", image_size},
            {"channels", channels},
            {"conv_width", conv_width},
            {"attn_dim", attn_dim},
            {"attn_heads", attn_heads},
            {"attn_blocks", attn_blocks},
            {"attn_patch", attn_patch}};
  }

  static CheckpointMeta from_json(const nlohmann::json& j) {
    CheckpointMeta m;
    m.stage = j.at("stage").get<int>();
    m.source_domain = j.at("source_domain").get<std::string>();
    m.target_domain = j.at("target_domain").get<std::string>();
    m.epoch = j.at("epoch").get<int>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.backbone_id = j.at("backbone_id").get<std::string>();
    m.k = j.at("k").get<int>();
    m.bottleneck_dim = j.at("bottleneck_dim").get<int>();
    m.image_size = j.at("image_size").get<int>();
    m.channels = j.at("channels").get<int>();
    m.conv_width = j.at("conv_width").get<int>();
    m.attn_dim = j.at("attn_dim").get<int>();
    m.attn_heads = j.at("attn_heads").get<int>();
    m.attn_blocks = j.at("attn_blocks").get<int>();
    m.attn_patch = j.at("attn_patch").get<int>();
    return m;
  }

  // Architecture slice of a config, for rebuilding the assembly on load.
  AdaptationConfig arch_config() const {
    AdaptationConfig cfg;
    cfg.backbone_id = backbone_id;
    cfg.image_size = image_size;
    cfg.conv_width = conv_width;
    cfg.attn_dim = attn_dim;
    cfg.attn_heads = attn_heads;
    cfg.attn_blocks = attn_blocks;
    cfg.attn_patch = attn_patch;
    cfg.bottleneck_dim = bottleneck_dim;
    return cfg;
  }
};

inline CheckpointMeta meta_from_config(const AdaptationConfig& cfg, int num_classes,
                                       int channels = 3) {
  CheckpointMeta m;
  m.config_hash = cfg.hash();
  m.backbone_id = cfg.backbone_id;
  m.k = num_classes;
  m.bottleneck_dim = cfg.bottleneck_dim;
  m.image_size = cfg.image_size;
  m.channels = channels;
  m.conv_width = cfg.conv_width;
  m.attn_dim = cfg.attn_dim;
  m.attn_heads = cfg.attn_heads;
  m.attn_blocks = cfg.attn_blocks;
  m.attn_patch = cfg.attn_patch;
  return m;
}

namespace detail {

constexpr char kCkptMagic[8] = {'S', 'F', 'D', 'A', 'C', 'K', 'P', '1'};

inline void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint64_t read_u64(std::istream& in, const std::string& path) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError("checkpoint: " + path + " is truncated");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const std::string& path) {
  std::uint64_t n = read_u64(in, path);
  if (n > (1ull << 32)) throw IoError("checkpoint: " + path + " has an absurd string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw IoError("checkpoint: " + path + " is truncated");
  return s;
}

}  // namespace detail

inline void save_checkpoint(NetworkAssembly& net, const CheckpointMeta& meta,
                            const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  out.write(detail::kCkptMagic, sizeof detail::kCkptMagic);
  detail::write_string(out, meta.to_json().dump());
  std::vector<Param*> params = net.all_params();
  detail::write_u64(out, params.size());
  for (Param* p : params) {
    detail::write_string(out, p->name);
    detail::write_u64(out, static_cast<std::uint64_t>(p->value.rows()));
    detail::write_u64(out, static_cast<std::uint64_t>(p->value.cols()));
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
        double v = p->value(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
      }
  }
  out.flush();
  if (!out) throw IoError("checkpoint: write failed for " + path.string());
}

struct LoadedCheckpoint {
  NetworkAssembly net;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, detail::kCkptMagic, sizeof magic) != 0)
    throw IoError("checkpoint: " + path.string() + " is not a checkpoint archive");
  CheckpointMeta meta;
  try {
    meta = CheckpointMeta::from_json(nlohmann::json::parse(detail::read_string(in, path.string())));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: bad metadata in " + path.string() + ": " + e.what());
  }

  LoadedCheckpoint out;
  out.meta = meta;
  out.net = build_network(meta.arch_config(), meta.k, 0, meta.channels);

  std::vector<Param*> params = out.net.all_params();
  std::uint64_t count = detail::read_u64(in, path.string());
  if (count != params.size())
    throw ValidationError("checkpoint: " + path.string() + " holds " + std::to_string(count) +
                          " tensors, architecture expects " + std::to_string(params.size()));
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail::read_string(in, path.string());
    std::uint64_t rows = detail::read_u64(in, path.string());
    std::uint64_t cols = detail::read_u64(in, path.string());
    Param* target = nullptr;
    for (Param* p : params)
      if (p->name == name) {
        target = p;
        break;
      }
    if (!target)
      throw ValidationError("checkpoint: unexpected tensor '" + name + "' in " + path.string());
    if (static_cast<std::uint64_t>(target->value.rows()) != rows ||
        static_cast<std::uint64_t>(target->value.cols()) != cols)
      throw ValidationError("checkpoint: tensor '" + name + "' has shape " +
                            std::to_string(rows) + "x" + std::to_string(cols) +
                            ", architecture expects " + std::to_string(target->value.rows()) +
                            "x" + std::to_string(target->value.cols()));
    for (std::uint64_t r = 0; r < rows; ++r)
      for (std::uint64_t c = 0; c < cols; ++c) {
        double v = 0.0;
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        if (!in) throw IoError("checkpoint: " + path.string() + " is truncated");
        target->value(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
      }
  }
  return out;
}

// Guard used by pipeline stages that consume checkpoints from earlier stages.
inline void require_checkpoint(const CheckpointMeta& meta, const std::string& backbone_id, int k,
                               int expect_stage = -1) {
  if (meta.backbone_id != backbone_id)
    throw ValidationError("checkpoint: backbone_id is '" + meta.backbone_id + "', expected '" +
                          backbone_id + "'");
  if (meta.k != k)
    throw ValidationError("checkpoint: trained for " + std::to_string(meta.k) +
                          " classes, expected " + std::to_string(k));
  if (expect_stage >= 0 && meta.stage != expect_stage)
    throw ValidationError("checkpoint: produced by stage " + std::to_string(meta.stage) +
                          ", expected stage " + std::to_string(expect_stage));
}

}  // namespace sfda
