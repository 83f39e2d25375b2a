#pragma once

#include "sfda/checkpoint.hpp"
#include "sfda/data.hpp"
#include "sfda/nn.hpp"
#include "sfda/pipeline.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace sfda {

// ---- proxy domain divergence --------------------------------------------------

struct ADistanceResult {
  double classifier_error = 0.5;  // held-out error, split-averaged, clipped to [0, 0.5]
  double a_distance = 0.0;        // 2 (1 - 2 error)
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  int splits = 0;
};

namespace detail {

// Ridge-regularized logistic regression fit by damped Newton steps. The tiny
// penalty keeps the optimum finite on separable data; it is rotation
// invariant, so a common rotation of the features cannot move the result.
struct LogisticModel {
  Vector w;
  double b = 0.0;

  double decision(const Vector& x) const { return w.dot(x) + b; }
};

inline LogisticModel fit_logistic(const Matrix& x, const std::vector<int>& y,
                                  double ridge = 1e-4) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Vector theta = Vector::Zero(d + 1);  // weights then bias

  auto loss_at = [&](const Vector& t) {
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double z = x.row(i).dot(t.head(d)) + t(d);
      double m = y[static_cast<std::size_t>(i)] == 1 ? z : -z;
      // log(1 + exp(-m)) computed stably
      loss += m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
    }
    return loss / static_cast<double>(n) + 0.5 * ridge * t.head(d).squaredNorm();
  };

  double current = loss_at(theta);
  for (int iter = 0; iter < 200; ++iter) {
    Vector grad = Vector::Zero(d + 1);
    Matrix hess = Matrix::Zero(d + 1, d + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      double z = x.row(i).dot(theta.head(d)) + theta(d);
      double p = 1.0 / (1.0 + std::exp(-z));
      double r = p - (y[static_cast<std::size_t>(i)] == 1 ? 1.0 : 0.0);
      double s = std::max(p * (1.0 - p), 1e-12);
      Vector xi(d + 1);
      xi.head(d) = x.row(i).transpose();
      xi(d) = 1.0;
      grad += r * xi;
      hess += s * (xi * xi.transpose());
    }
    grad /= static_cast<double>(n);
    hess /= static_cast<double>(n);
    grad.head(d) += ridge * theta.head(d);
    for (Eigen::Index j = 0; j < d; ++j) hess(j, j) += ridge;

    if (grad.lpNorm<Eigen::Infinity>() < 1e-9) break;
    Vector step = hess.ldlt().solve(grad);
    double scale = 1.0;
    for (int half = 0; half < 40; ++half) {
      double trial = loss_at(theta - scale * step);
      if (trial <= current) {
        theta -= scale * step;
        current = trial;
        break;
      }
      scale *= 0.5;
    }
  }
  LogisticModel m;
  m.w = theta.head(d);
  m.b = theta(d);
  return m;
}

}  // namespace detail

// Proxy divergence between two feature sets from the same model: a linear
// domain classifier is trained on a domain-balanced split and its held-out
// error is folded into 2 (1 - 2 error). Worse-than-chance error counts as
// chance, so the result stays in [0, 2]. The error is the mean of the two
// per-domain held-out error rates, which keeps unequal sample counts from
// rewarding a majority-vote classifier.
inline ADistanceResult a_distance(const Matrix& feats_a, const Matrix& feats_b,
                                  double train_fraction = 0.8, std::uint64_t seed = 1,
                                  int splits = 5) {
  if (feats_a.cols() != feats_b.cols())
    throw ValidationError("a_distance: feature dimensions differ");
  if (feats_a.rows() < 20 || feats_b.rows() < 20)
    throw ValidationError("a_distance: need at least 20 samples per domain");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ValidationError("a_distance: train_fraction must be in (0, 1)");
  if (splits < 1) throw ValidationError("a_distance: need at least one split");

  const Eigen::Index d = feats_a.cols();
  Rng root(seed);
  double err_sum = 0.0;
  for (int s = 0; s < splits; ++s) {
    std::vector<int> order_a = range_indices(static_cast<int>(feats_a.rows()));
    std::vector<int> order_b = range_indices(static_cast<int>(feats_b.rows()));
    Rng rng_a = root.split("adist/split" + std::to_string(s) + "/a");
    Rng rng_b = root.split("adist/split" + std::to_string(s) + "/b");
    rng_a.shuffle(order_a);
    rng_b.shuffle(order_b);
    int train_a = static_cast<int>(train_fraction * static_cast<double>(order_a.size()));
    int train_b = static_cast<int>(train_fraction * static_cast<double>(order_b.size()));
    if (train_a < 1 || train_b < 1 || train_a == static_cast<int>(order_a.size()) ||
        train_b == static_cast<int>(order_b.size()))
      throw ValidationError("a_distance: split leaves an empty train or test side");

    Matrix x(train_a + train_b, d);
    std::vector<int> y(static_cast<std::size_t>(train_a + train_b));
    for (int i = 0; i < train_a; ++i) {
      x.row(i) = feats_a.row(order_a[static_cast<std::size_t>(i)]);
      y[static_cast<std::size_t>(i)] = 0;
    }
    for (int i = 0; i < train_b; ++i) {
      x.row(train_a + i) = feats_b.row(order_b[static_cast<std::size_t>(i)]);
      y[static_cast<std::size_t>(train_a + i)] = 1;
    }
    detail::LogisticModel model = detail::fit_logistic(x, y);

    auto held_out_error = [&](const Matrix& feats, const std::vector<int>& order, int train_n,
                              int label) {
      long wrong = 0;
      long total = 0;
      for (std::size_t i = static_cast<std::size_t>(train_n); i < order.size(); ++i) {
        int pred = model.decision(feats.row(order[i]).transpose()) > 0.0 ? 1 : 0;
        wrong += pred != label;
        ++total;
      }
      return static_cast<double>(wrong) / static_cast<double>(total);
    };
    err_sum += 0.5 * (held_out_error(feats_a, order_a, train_a, 0) +
                      held_out_error(feats_b, order_b, train_b, 1));
  }

  ADistanceResult r;
  r.classifier_error = std::clamp(err_sum / static_cast<double>(splits), 0.0, 0.5);
  r.a_distance = 2.0 * (1.0 - 2.0 * r.classifier_error);
  r.train_fraction = train_fraction;
  r.seed = seed;
  r.splits = splits;
  return r;
}

// ---- feature export -------------------------------------------------------------

struct FeatureDump {
  std::string domain_id;
  std::string checkpoint_hash;
  std::vector<std::string> keys;
  std::vector<int> labels;  // evaluation-channel labels, not used by training
  Matrix features;          // N x D bottleneck outputs

  int size() const { return static_cast<int>(keys.size()); }
};

// Identifies a set of weights independent of where they are stored.
inline std::string network_hash(NetworkAssembly& net) {
  std::uint64_t h = fnv1a64(std::string("sfda-weights"));
  for (Param* p : net.all_params()) {
    h = fnv1a64(p->name.data(), p->name.size(), h);
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
        double v = p->value(r, c);
        h = fnv1a64(&v, sizeof v, h);
      }
  }
  return hex64(h);
}

inline FeatureDump compute_feature_dump(NetworkAssembly& net, const DomainDataset& ds,
                                        int eval_batch = 64) {
  if (ds.num_classes() != net.k)
    throw ValidationError("compute_feature_dump: dataset has " +
                          std::to_string(ds.num_classes()) + " classes, network has " +
                          std::to_string(net.k));
  if (ds.size() == 0) throw ValidationError("compute_feature_dump: empty dataset");
  FeatureDump dump;
  dump.domain_id = ds.domain_id();
  dump.checkpoint_hash = network_hash(net);
  dump.features.resize(ds.size(), net.d);
  for (int start = 0; start < ds.size(); start += eval_batch) {
    int end = std::min(ds.size(), start + eval_batch);
    std::vector<Image> batch;
    for (int i = start; i < end; ++i) batch.push_back(ds.image(i));
    dump.features.middleRows(start, end - start) = net.forward(batch, Mode::Eval).features;
  }
  for (int i = 0; i < ds.size(); ++i) {
    dump.keys.push_back(ds.key(i));
    dump.labels.push_back(ds.label(i));
  }
  return dump;
}

namespace detail {

constexpr char kDumpMagic[8] = {'S', 'F', 'D', 'A', 'D', 'M', 'P', '1'};

}  // namespace detail

inline void save_feature_dump(const FeatureDump& dump, const std::filesystem::path& path,
                              const std::string& format = "binary") {
  if (dump.size() == 0) throw ValidationError("save_feature_dump: empty dump");
  if (static_cast<Eigen::Index>(dump.keys.size()) != dump.features.rows() ||
      dump.keys.size() != dump.labels.size())
    throw ValidationError("save_feature_dump: row counts disagree");
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }

  if (format == "binary") {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_feature_dump: cannot open " + path.string());
    out.write(detail::kDumpMagic, sizeof detail::kDumpMagic);
    detail::write_string(out, dump.domain_id);
    detail::write_string(out, dump.checkpoint_hash);
    detail::write_u64(out, static_cast<std::uint64_t>(dump.features.rows()));
    detail::write_u64(out, static_cast<std::uint64_t>(dump.features.cols()));
    for (int i = 0; i < dump.size(); ++i) {
      detail::write_string(out, dump.keys[static_cast<std::size_t>(i)]);
      std::int64_t label = dump.labels[static_cast<std::size_t>(i)];
      out.write(reinterpret_cast<const char*>(&label), sizeof label);
      for (Eigen::Index j = 0; j < dump.features.cols(); ++j) {
        double v = dump.features(i, j);
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
      }
    }
    out.flush();
    if (!out) throw IoError("save_feature_dump: write failed for " + path.string());
  } else if (format == "csv") {
    std::ofstream out(path);
    if (!out) throw IoError("save_feature_dump: cannot open " + path.string());
    out << "# feature_dump,domain_id=" << dump.domain_id << ",n=" << dump.features.rows()
        << ",d=" << dump.features.cols() << ",checkpoint_hash=" << dump.checkpoint_hash << "\n";
    out << "key,label";
    for (Eigen::Index j = 0; j < dump.features.cols(); ++j) out << ",f" << j;
    out << "\n";
    for (int i = 0; i < dump.size(); ++i) {
      out << dump.keys[static_cast<std::size_t>(i)] << ","
          << dump.labels[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < dump.features.cols(); ++j)
        out << "," << format_double(dump.features(i, j));
      out << "\n";
    }
    out.flush();
    if (!out) throw IoError("save_feature_dump: write failed for " + path.string());
  } else {
    throw ValidationError("save_feature_dump: format must be binary or csv");
  }
}

inline FeatureDump load_feature_dump(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("load_feature_dump: cannot open " + path.string());
  char magic[8] = {};
  probe.read(magic, sizeof magic);
  probe.close();

  FeatureDump dump;
  if (std::memcmp(magic, detail::kDumpMagic, sizeof magic) == 0) {
    std::ifstream in(path, std::ios::binary);
    in.seekg(sizeof magic);
    dump.domain_id = detail::read_string(in, path.string());
    dump.checkpoint_hash = detail::read_string(in, path.string());
    auto n = static_cast<Eigen::Index>(detail::read_u64(in, path.string()));
    auto d = static_cast<Eigen::Index>(detail::read_u64(in, path.string()));
    if (n < 1 || d < 1) throw IoError("load_feature_dump: bad shape in " + path.string());
    dump.features.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      dump.keys.push_back(detail::read_string(in, path.string()));
      std::int64_t label = 0;
      in.read(reinterpret_cast<char*>(&label), sizeof label);
      for (Eigen::Index j = 0; j < d; ++j)
        in.read(reinterpret_cast<char*>(&dump.features(i, j)), sizeof(double));
      if (!in) throw IoError("load_feature_dump: " + path.string() + " is truncated");
      dump.labels.push_back(static_cast<int>(label));
    }
    return dump;
  }

  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  if (header.rfind("# feature_dump,", 0) != 0)
    throw IoError("load_feature_dump: " + path.string() + " is not a feature dump");
  Eigen::Index n = -1, d = -1;
  for (const std::string& field : split_string(header.substr(2), ',')) {
    auto pos = field.find('=');
    if (pos == std::string::npos) continue;
    std::string key = field.substr(0, pos), value = field.substr(pos + 1);
    if (key == "domain_id") dump.domain_id = value;
    if (key == "checkpoint_hash") dump.checkpoint_hash = value;
    if (key == "n") n = std::stoll(value);
    if (key == "d") d = std::stoll(value);
  }
  if (n < 1 || d < 1) throw IoError("load_feature_dump: bad shape in " + path.string());
  std::string line;
  std::getline(in, line);  // column names
  dump.features.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::getline(in, line))
      throw IoError("load_feature_dump: " + path.string() + " is truncated");
    std::vector<std::string> cells = split_string(line, ',');
    if (static_cast<Eigen::Index>(cells.size()) != d + 2)
      throw IoError("load_feature_dump: wrong column count at row " + std::to_string(i) +
                    " of " + path.string());
    dump.keys.push_back(cells[0]);
    dump.labels.push_back(std::stoi(cells[1]));
    for (Eigen::Index j = 0; j < d; ++j)
      dump.features(i, j) = std::strtod(cells[static_cast<std::size_t>(j + 2)].c_str(), nullptr);
  }
  return dump;
}

// Convenience wrapper matching the CLI: checkpoint in, dump file out.
inline FeatureDump export_features(const std::filesystem::path& checkpoint_path,
                                   const DomainDataset& ds, const std::filesystem::path& out,
                                   const std::string& format = "binary") {
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
  FeatureDump dump = compute_feature_dump(ckpt.net, ds);
  save_feature_dump(dump, out, format);
  return dump;
}

// ---- curve plots -----------------------------------------------------------------

namespace detail {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

// Minimal self-contained line chart; the CSV twin carries the exact numbers,
// this file is for eyeballs only.
inline void write_svg_chart(const std::vector<Series>& series, const std::string& title,
                            const std::filesystem::path& path) {
  const double width = 640, height = 400, ml = 60, mr = 130, mt = 40, mb = 40;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const Series& s : series)
    for (auto [x, y] : s.points) {
      if (!any) {
        xmin = xmax = x;
        ymin = ymax = y;
        any = true;
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;
  auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr); };
  auto sy = [&](double y) { return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb); };

  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("write_svg_chart: cannot open " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
      << title << "</text>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr
      << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
      << height - mb << "\" stroke=\"black\"/>\n";
  auto axis_label = [&](double v, double px, double py, const char* anchor) {
    out << "<text x=\"" << px << "\" y=\"" << py << "\" text-anchor=\"" << anchor
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << format_double(v) << "</text>\n";
  };
  axis_label(xmin, sx(xmin), height - mb + 16, "middle");
  axis_label(xmax, sx(xmax), height - mb + 16, "middle");
  axis_label(ymin, ml - 6, sy(ymin) + 4, "end");
  axis_label(ymax, ml - 6, sy(ymax) + 4, "end");

  int idx = 0;
  for (const Series& s : series) {
    const char* color = colors[idx % 6];
    if (s.points.size() > 1) {
      out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (auto [x, y] : s.points) out << sx(x) << "," << sy(y) << " ";
      out << "\"/>\n";
    }
    for (auto [x, y] : s.points)
      out << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"2.5\" fill=\"" << color
          << "\"/>\n";
    out << "<text x=\"" << width - mr + 10 << "\" y=\"" << mt + 16 * idx + 10
        << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << color << "\">" << s.name
        << "</text>\n";
    ++idx;
  }
  out << "</svg>\n";
  if (!out) throw IoError("write_svg_chart: write failed for " + path.string());
}

}  // namespace detail

struct CurveReportFiles {
  std::filesystem::path accuracy_svg;
  std::filesystem::path losses_svg;
  std::filesystem::path csv;
};

// Renders the per-epoch accuracy and loss curves of one stage run. The CSV is
// the authoritative output; the images are derived views of the same numbers.
inline CurveReportFiles curve_report(const StageReport& report,
                                     const std::filesystem::path& out_dir) {
  if (report.records.empty()) throw ValidationError("curve_report: report has no records");
  report.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);

  CurveReportFiles files;
  files.csv = out_dir / "curves.csv";
  report_to_csv(report, files.csv);

  detail::Series target{"target accuracy", {}}, pl{"pseudo-label accuracy", {}};
  for (const EpochRecord& r : report.records) {
    if (r.target_accuracy >= 0.0) target.points.emplace_back(r.epoch, r.target_accuracy);
    if (r.pseudo_label_accuracy >= 0.0)
      pl.points.emplace_back(r.epoch, r.pseudo_label_accuracy);
  }
  std::vector<detail::Series> acc;
  if (!target.points.empty()) acc.push_back(std::move(target));
  if (!pl.points.empty()) acc.push_back(std::move(pl));
  files.accuracy_svg = out_dir / "curves_accuracy.svg";
  detail::write_svg_chart(acc, "accuracy per epoch, stage " + std::to_string(report.stage),
                          files.accuracy_svg);

  std::map<std::string, detail::Series> by_loss;
  for (const EpochRecord& r : report.records)
    for (const auto& [key, value] : r.losses) {
      by_loss[key].name = key;
      by_loss[key].points.emplace_back(r.epoch, value);
    }
  std::vector<detail::Series> losses;
  for (auto& [key, s] : by_loss) losses.push_back(std::move(s));
  files.losses_svg = out_dir / "curves_losses.svg";
  detail::write_svg_chart(losses, "loss components per epoch, stage " + std::to_string(report.stage),
                          files.losses_svg);
  return files;
}

// ---- paired-run comparison ---------------------------------------------------------

struct PlrComparison {
  std::vector<double> on_curve;   // pseudo-label accuracy per epoch, refinement on
  std::vector<double> off_curve;  // same with refinement disabled
  double final_gain = 0.0;
  double mean_gain = 0.0;
  bool dominates = false;  // refinement ends at least as accurate as the baseline
};

inline PlrComparison compare_plr_curves(const StageReport& with_plr,
                                        const StageReport& without_plr) {
  PlrComparison cmp;
  for (const EpochRecord& r : with_plr.records)
    if (r.pseudo_label_accuracy >= 0.0) cmp.on_curve.push_back(r.pseudo_label_accuracy);
  for (const EpochRecord& r : without_plr.records)
    if (r.pseudo_label_accuracy >= 0.0) cmp.off_curve.push_back(r.pseudo_label_accuracy);
  if (cmp.on_curve.empty() || cmp.off_curve.empty())
    throw ValidationError("compare_plr_curves: both runs need pseudo-label accuracy records");
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  cmp.final_gain = cmp.on_curve.back() - cmp.off_curve.back();
  cmp.mean_gain = mean(cmp.on_curve) - mean(cmp.off_curve);
  cmp.dominates = cmp.final_gain >= 0.0;
  return cmp;
}

}  // namespace sfda
