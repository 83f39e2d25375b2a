#pragma once

#include "sfda/common.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace sfda {

// All reductions in this module are plain ascending-index loops. Reference
// implementations in the test suite reproduce them term by term, so the
// accumulation order is part of the contract.

inline double dot_ascending(const Matrix& a, Eigen::Index ra, const Matrix& b, Eigen::Index rb) {
  double s = 0.0;
  for (Eigen::Index d = 0; d < a.cols(); ++d) s += a(ra, d) * b(rb, d);
  return s;
}

inline double sumsq_ascending(const Matrix& m, Eigen::Index r) {
  double s = 0.0;
  for (Eigen::Index d = 0; d < m.cols(); ++d) s += m(r, d) * m(r, d);
  return s;
}

// Per-class convex combination of features, weighted by class probability
// mass: c_k = sum_t w[t,k] x_t / sum_t w[t,k].
inline Matrix weighted_centroids(const Matrix& features, const Matrix& probs) {
  if (features.rows() != probs.rows())
    throw ValidationError("weighted_centroids: feature and probability row counts differ");
  const Eigen::Index n = features.rows(), d = features.cols(), k = probs.cols();
  Matrix centers = Matrix::Zero(k, d);
  for (Eigen::Index c = 0; c < k; ++c) {
    double mass = 0.0;
    for (Eigen::Index t = 0; t < n; ++t) {
      const double w = probs(t, c);
      for (Eigen::Index j = 0; j < d; ++j) centers(c, j) += w * features(t, j);
      mass += w;
    }
    if (mass < 1e-12)
      throw ValidationError("weighted_centroids: class " + std::to_string(c) +
                            " has no probability mass");
    for (Eigen::Index j = 0; j < d; ++j) centers(c, j) /= mass;
  }
  return centers;
}

// Same computation but degenerate classes keep their previous centroid
// instead of erroring; used by later refinement rounds where hard weights
// can leave a class empty.
inline Matrix weighted_centroids_keep(const Matrix& features, const Matrix& weights,
                                      const Matrix& prev_centers) {
  const Eigen::Index n = features.rows(), d = features.cols(), k = weights.cols();
  Matrix centers = Matrix::Zero(k, d);
  for (Eigen::Index c = 0; c < k; ++c) {
    double mass = 0.0;
    for (Eigen::Index t = 0; t < n; ++t) {
      const double w = weights(t, c);
      for (Eigen::Index j = 0; j < d; ++j) centers(c, j) += w * features(t, j);
      mass += w;
    }
    if (mass < 1e-12) {
      centers.row(c) = prev_centers.row(c);
    } else {
      for (Eigen::Index j = 0; j < d; ++j) centers(c, j) /= mass;
    }
  }
  return centers;
}

// Nearest-centroid assignment under cosine similarity; ties take the lowest
// class index.
inline std::vector<int> cosine_assign(const Matrix& features, const Matrix& centers) {
  if (features.cols() != centers.cols())
    throw ValidationError("cosine_assign: feature and centroid dimensions differ");
  const Eigen::Index n = features.rows(), k = centers.rows();
  std::vector<double> center_norm(static_cast<std::size_t>(k));
  for (Eigen::Index c = 0; c < k; ++c) {
    double sq = sumsq_ascending(centers, c);
    if (sq == 0.0)
      throw NumericError("cosine_assign: centroid " + std::to_string(c) + " has zero norm");
    center_norm[static_cast<std::size_t>(c)] = std::sqrt(sq);
  }
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Eigen::Index t = 0; t < n; ++t) {
    double sq = sumsq_ascending(features, t);
    if (sq == 0.0)
      throw NumericError("cosine_assign: sample " + std::to_string(t) + " has zero norm");
    double fnorm = std::sqrt(sq);
    int best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < k; ++c) {
      double sim = dot_ascending(features, t, centers, c) /
                   (fnorm * center_norm[static_cast<std::size_t>(c)]);
      if (sim > best_sim) {
        best_sim = sim;
        best = static_cast<int>(c);
      }
    }
    labels[static_cast<std::size_t>(t)] = best;
  }
  return labels;
}

inline Matrix one_hot_rows(const std::vector<int>& labels, int k) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), k);
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t] < 0 || labels[t] >= k)
      throw ValidationError("one_hot_rows: label " + std::to_string(labels[t]) + " out of range");
    m(static_cast<Eigen::Index>(t), labels[t]) = 1.0;
  }
  return m;
}

inline int argmax_row(const Matrix& m, Eigen::Index r) {
  int best = 0;
  double best_v = m(r, 0);
  for (Eigen::Index k = 1; k < m.cols(); ++k)
    if (m(r, k) > best_v) {
      best_v = m(r, k);
      best = static_cast<int>(k);
    }
  return best;
}

struct ClusterResult {
  Matrix centers;
  std::vector<int> labels;
};

// Alternate centroid estimation and cosine assignment. Round 1 weights
// centroids by the network's class probabilities; every later round uses the
// previous hard assignment as the membership weight.
inline ClusterResult iterate_pseudo_labels(const Matrix& features, const Matrix& probs,
                                           int rounds) {
  if (rounds < 1) throw ValidationError("iterate_pseudo_labels: rounds must be >= 1");
  const int k = static_cast<int>(probs.cols());
  Matrix centers = weighted_centroids(features, probs);
  std::vector<int> labels = cosine_assign(features, centers);
  for (int r = 1; r < rounds; ++r) {
    centers = weighted_centroids_keep(features, one_hot_rows(labels, k), centers);
    labels = cosine_assign(features, centers);
  }
  return {std::move(centers), std::move(labels)};
}

struct ConsensusMatrix {
  Matrix raw;       // Jaccard overlap between previous and current clusters
  Matrix row_norm;  // rows sum to 1; empty rows become uniform
};

// W(i,j) = |I_prev(i) ∩ I_curr(j)| / |I_prev(i) ∪ I_curr(j)|, with empty
// unions scoring 0.
inline ConsensusMatrix consensus_matrix(const std::vector<int>& prev, const std::vector<int>& curr,
                                        int k) {
  if (prev.size() != curr.size())
    throw ValidationError("consensus_matrix: label vectors differ in length");
  Matrix inter = Matrix::Zero(k, k);
  std::vector<double> prev_count(static_cast<std::size_t>(k), 0.0);
  std::vector<double> curr_count(static_cast<std::size_t>(k), 0.0);
  for (std::size_t t = 0; t < prev.size(); ++t) {
    int a = prev[t], b = curr[t];
    if (a < 0 || a >= k || b < 0 || b >= k)
      throw ValidationError("consensus_matrix: label out of range at sample " + std::to_string(t));
    inter(a, b) += 1.0;
    prev_count[static_cast<std::size_t>(a)] += 1.0;
    curr_count[static_cast<std::size_t>(b)] += 1.0;
  }
  ConsensusMatrix out;
  out.raw = Matrix::Zero(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      double uni = prev_count[static_cast<std::size_t>(i)] +
                   curr_count[static_cast<std::size_t>(j)] - inter(i, j);
      out.raw(i, j) = uni == 0.0 ? 0.0 : inter(i, j) / uni;
    }
  out.row_norm = Matrix(k, k);
  for (int i = 0; i < k; ++i) {
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += out.raw(i, j);
    if (s == 0.0)
      out.row_norm.row(i).setConstant(1.0 / static_cast<double>(k));
    else
      for (int j = 0; j < k; ++j) out.row_norm(i, j) = out.raw(i, j) / s;
  }
  return out;
}

// Temporal label smoothing: blend the current assignment with the previous
// one mapped through the consensus matrix, then renormalize each row.
inline Matrix refine_labels(const Matrix& curr_soft, const Matrix& prev_soft,
                            const Matrix& w_rownorm, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ValidationError("refine_labels: alpha must be in [0,1]");
  if (curr_soft.rows() != prev_soft.rows() || curr_soft.cols() != prev_soft.cols())
    throw ValidationError("refine_labels: current and previous shapes differ");
  if (w_rownorm.rows() != curr_soft.cols() || w_rownorm.cols() != curr_soft.cols())
    throw ValidationError("refine_labels: consensus matrix shape mismatch");
  Matrix mapped = prev_soft * w_rownorm;  // row z: prev_z^T W == (W^T prev_z)^T
  Matrix out = alpha * curr_soft + (1.0 - alpha) * mapped;
  for (Eigen::Index z = 0; z < out.rows(); ++z) {
    double s = out.row(z).sum();
    if (!(s > 0.0))
      throw NumericError("refine_labels: row " + std::to_string(z) + " sums to zero");
    out.row(z) /= s;
  }
  return out;
}

// Per-domain pseudo-label snapshot for one epoch. `hard` agrees with the
// argmax of `soft` rows; for the initial epoch both encode the raw cluster
// assignment.
struct PseudoLabelBank {
  std::string domain_id;
  int epoch = 0;
  std::string provenance;  // "initial" or "refined"
  std::vector<std::string> keys;
  std::vector<int> hard;
  Matrix soft;

  int size() const { return static_cast<int>(keys.size()); }
  int num_classes() const { return static_cast<int>(soft.cols()); }

  void validate() const {
    if (provenance != "initial" && provenance != "refined")
      throw ValidationError("PseudoLabelBank: unknown provenance '" + provenance + "'");
    if (keys.size() != hard.size() || static_cast<Eigen::Index>(keys.size()) != soft.rows())
      throw ValidationError("PseudoLabelBank: field lengths disagree");
    std::set<std::string> uniq(keys.begin(), keys.end());
    if (uniq.size() != keys.size())
      throw ValidationError("PseudoLabelBank: duplicate sample keys");
    for (std::size_t t = 0; t < hard.size(); ++t)
      if (hard[t] < 0 || hard[t] >= soft.cols())
        throw ValidationError("PseudoLabelBank: hard label out of range at sample " +
                              std::to_string(t));
    for (Eigen::Index z = 0; z < soft.rows(); ++z) {
      double s = soft.row(z).sum();
      if (std::abs(s - 1.0) > 1e-6)
        throw ValidationError("PseudoLabelBank: soft row " + std::to_string(z) +
                              " is not stochastic");
    }
  }
};

// One clustering + refinement step. Epoch 0 (no previous bank) stores the
// raw assignment; later epochs blend with the previous bank through the
// cluster consensus matrix.
inline PseudoLabelBank epoch_update(const std::optional<PseudoLabelBank>& prev,
                                    const std::string& domain_id,
                                    const std::vector<std::string>& keys, const Matrix& features,
                                    const Matrix& probs, double alpha, int rounds) {
  if (static_cast<Eigen::Index>(keys.size()) != features.rows() ||
      features.rows() != probs.rows())
    throw ValidationError("epoch_update: keys, features, probs row counts differ");
  const int k = static_cast<int>(probs.cols());
  ClusterResult cluster = iterate_pseudo_labels(features, probs, rounds);
  PseudoLabelBank bank;
  bank.domain_id = domain_id;
  bank.keys = keys;
  if (!prev.has_value()) {
    bank.epoch = 0;
    bank.provenance = "initial";
    bank.hard = cluster.labels;
    bank.soft = one_hot_rows(cluster.labels, k);
  } else {
    if (prev->domain_id != domain_id)
      throw ValidationError("epoch_update: bank belongs to domain '" + prev->domain_id + "'");
    if (prev->keys != keys)
      throw ValidationError("epoch_update: sample keys changed since previous epoch");
    if (prev->num_classes() != k)
      throw ValidationError("epoch_update: class count changed since previous epoch");
    bank.epoch = prev->epoch + 1;
    bank.provenance = "refined";
    ConsensusMatrix w = consensus_matrix(prev->hard, cluster.labels, k);
    bank.soft = refine_labels(one_hot_rows(cluster.labels, k), one_hot_rows(prev->hard, k),
                              w.row_norm, alpha);
    bank.hard.resize(keys.size());
    for (Eigen::Index z = 0; z < bank.soft.rows(); ++z)
      bank.hard[static_cast<std::size_t>(z)] = argmax_row(bank.soft, z);
  }
  bank.validate();
  return bank;
}

// ---- persistence: one JSONL file per (domain, epoch) plus a latest pointer

inline std::string bank_file_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04d.jsonl", epoch);
  return buf;
}

inline std::filesystem::path save_bank(const PseudoLabelBank& bank,
                                       const std::filesystem::path& root) {
  bank.validate();
  namespace fs = std::filesystem;
  fs::path dir = root / bank.domain_id;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("save_bank: cannot create " + dir.string() + ": " + ec.message());
  fs::path file = dir / bank_file_name(bank.epoch);
  std::ofstream out(file);
  if (!out) throw IoError("save_bank: cannot open " + file.string());
  nlohmann::json header = {{"domain_id", bank.domain_id},
                           {"epoch", bank.epoch},
                           {"n", bank.size()},
                           {"k", bank.num_classes()},
                           {"provenance", bank.provenance}};
  out << header.dump() << '\n';
  for (int t = 0; t < bank.size(); ++t) {
    std::vector<double> soft(bank.soft.row(t).begin(), bank.soft.row(t).end());
    nlohmann::json rec = {{"key", bank.keys[static_cast<std::size_t>(t)]},
                          {"hard", bank.hard[static_cast<std::size_t>(t)]},
                          {"soft", soft}};
    out << rec.dump() << '\n';
  }
  out.flush();
  if (!out) throw IoError("save_bank: write failed for " + file.string());
  std::ofstream ptr(dir / "latest");
  if (!ptr) throw IoError("save_bank: cannot write latest pointer in " + dir.string());
  ptr << file.filename().string() << '\n';
  return file;
}

inline PseudoLabelBank load_bank(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("load_bank: cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("load_bank: empty file " + file.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_bank: bad header in " + file.string() + ": " + e.what());
  }
  PseudoLabelBank bank;
  try {
    bank.domain_id = header.at("domain_id").get<std::string>();
    bank.epoch = header.at("epoch").get<int>();
    bank.provenance = header.at("provenance").get<std::string>();
    const int n = header.at("n").get<int>();
    const int k = header.at("k").get<int>();
    if (n < 0 || k < 1) throw IoError("load_bank: invalid dimensions in header");
    bank.keys.reserve(static_cast<std::size_t>(n));
    bank.hard.reserve(static_cast<std::size_t>(n));
    bank.soft.resize(n, k);
    for (int t = 0; t < n; ++t) {
      if (!std::getline(in, line))
        throw IoError("load_bank: " + file.string() + " truncated at record " + std::to_string(t));
      nlohmann::json rec = nlohmann::json::parse(line);
      bank.keys.push_back(rec.at("key").get<std::string>());
      bank.hard.push_back(rec.at("hard").get<int>());
      auto soft = rec.at("soft").get<std::vector<double>>();
      if (static_cast<int>(soft.size()) != k)
        throw IoError("load_bank: record " + std::to_string(t) + " has wrong soft length");
      for (int c = 0; c < k; ++c) bank.soft(t, c) = soft[static_cast<std::size_t>(c)];
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_bank: malformed record in " + file.string() + ": " + e.what());
  }
  bank.validate();
  return bank;
}

inline PseudoLabelBank load_latest_bank(const std::filesystem::path& root,
                                        const std::string& domain_id) {
  namespace fs = std::filesystem;
  fs::path ptr = root / domain_id / "latest";
  std::ifstream in(ptr);
  if (!in) throw IoError("load_latest_bank: no latest pointer at " + ptr.string());
  std::string name;
  std::getline(in, name);
  name = trim(name);
  if (name.empty()) throw IoError("load_latest_bank: empty latest pointer at " + ptr.string());
  return load_bank(root / domain_id / name);
}

}  // namespace sfda
