#pragma once

#include "sfda/common.hpp"
#include "sfda/config.hpp"
#include "sfda/image.hpp"
#include "sfda/objectives.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace sfda {

// Label smoothing for source training: (1-alpha)*q + alpha/K.
struct SmoothedLabel {
  Vector vector;
  double smoothing = 0.0;
};

inline SmoothedLabel smooth_labels(const Vector& one_hot, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0))
    throw ValidationError("smooth_labels: alpha must be in [0,1)");
  if (one_hot.size() < 1) throw ValidationError("smooth_labels: empty label vector");
  int ones = 0;
  for (Eigen::Index k = 0; k < one_hot.size(); ++k) {
    if (one_hot(k) == 1.0)
      ++ones;
    else if (one_hot(k) != 0.0)
      throw ValidationError("smooth_labels: input is not one-hot");
  }
  if (ones != 1) throw ValidationError("smooth_labels: input is not one-hot");
  SmoothedLabel out;
  out.smoothing = alpha;
  double k = static_cast<double>(one_hot.size());
  out.vector = (1.0 - alpha) * one_hot + Vector::Constant(one_hot.size(), alpha / k);
  return out;
}

inline Matrix smooth_label_matrix(const std::vector<int>& labels, int k, double alpha) {
  Matrix m(static_cast<Eigen::Index>(labels.size()), k);
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t] < 0 || labels[t] >= k)
      throw ValidationError("smooth_label_matrix: label out of range");
    Vector one = Vector::Zero(k);
    one(labels[t]) = 1.0;
    m.row(static_cast<Eigen::Index>(t)) = smooth_labels(one, alpha).vector.transpose();
  }
  return m;
}

// Cross-entropy against smoothed targets for stage-1 supervised training.
inline double source_ce_loss(const Matrix& logits, const Matrix& targets) {
  check_finite_rows(logits, "source_ce_loss");
  check_row_stochastic(targets, "source_ce_loss targets");
  return soft_cross_entropy(logits, targets);
}

inline std::pair<double, Matrix> source_ce_grad(const Matrix& logits, const Matrix& targets) {
  check_finite_rows(logits, "source_ce_loss");
  check_row_stochastic(targets, "source_ce_loss targets");
  return soft_cross_entropy_grad(logits, targets);
}

// ---- parameters and layers -------------------------------------------------

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix vel;
  bool buffer = false;  // saved in checkpoints but never touched by the optimizer

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols, bool buf = false)
      : name(std::move(n)),
        value(Matrix::Zero(rows, cols)),
        grad(Matrix::Zero(rows, cols)),
        vel(Matrix::Zero(rows, cols)),
        buffer(buf) {}

  void zero_grad() { grad.setZero(); }
};

// Affine map computed row by row, so a sample's output never depends on what
// else is in the batch.
struct Linear {
  Param w;  // in x out
  Param b;  // 1 x out
  Matrix x_cache;

  Linear() = default;
  Linear(const std::string& prefix, int in, int out, Rng& rng, double scale = 0.0)
      : w(prefix + ".weight", in, out), b(prefix + ".bias", 1, out) {
    double sd = scale > 0.0 ? scale : std::sqrt(2.0 / static_cast<double>(in));
    for (Eigen::Index i = 0; i < w.value.rows(); ++i)
      for (Eigen::Index j = 0; j < w.value.cols(); ++j) w.value(i, j) = sd * rng.normal();
  }

  Matrix forward(const Matrix& x) {
    if (x.cols() != w.value.rows())
      throw ValidationError("Linear " + w.name + ": input dim " + std::to_string(x.cols()) +
                            " != " + std::to_string(w.value.rows()));
    x_cache = x;
    Matrix y(x.rows(), w.value.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      y.row(r) = x.row(r) * w.value + b.value.row(0);
    return y;
  }

  Matrix backward(const Matrix& dy) {
    w.grad += x_cache.transpose() * dy;
    b.grad.row(0) += dy.colwise().sum();
    return dy * w.value.transpose();
  }

  std::vector<Param*> params() { return {&w, &b}; }
};

struct BatchNorm1d {
  Param gamma, beta, running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.1;  // fraction of the batch statistic mixed into the running stat

  Matrix xhat_cache;
  Eigen::RowVectorXd invstd_cache;
  bool train_cache = false;
  Eigen::Index n_cache = 0;

  BatchNorm1d() = default;
  BatchNorm1d(const std::string& prefix, int dim)
      : gamma(prefix + ".gamma", 1, dim),
        beta(prefix + ".beta", 1, dim),
        running_mean(prefix + ".running_mean", 1, dim, true),
        running_var(prefix + ".running_var", 1, dim, true) {
    gamma.value.setOnes();
    running_var.value.setOnes();
  }

  Matrix forward(const Matrix& x, bool train) {
    train_cache = train;
    n_cache = x.rows();
    Eigen::RowVectorXd mean, var;
    if (train) {
      if (x.rows() < 2)
        throw NumericError("BatchNorm1d: training requires at least 2 samples per batch");
      mean = x.colwise().mean();
      var = ((x.rowwise() - mean).array().square().colwise().mean()).matrix();
      running_mean.value.row(0) =
          (1.0 - momentum) * running_mean.value.row(0) + momentum * mean;
      running_var.value.row(0) = (1.0 - momentum) * running_var.value.row(0) + momentum * var;
    } else {
      mean = running_mean.value.row(0);
      var = running_var.value.row(0);
    }
    invstd_cache = (var.array() + eps).rsqrt().matrix();
    xhat_cache = (x.rowwise() - mean).array().rowwise() * invstd_cache.array();
    return (xhat_cache.array().rowwise() * gamma.value.row(0).array()).matrix().rowwise() +
           beta.value.row(0);
  }

  Matrix backward(const Matrix& dy) {
    gamma.grad.row(0) += (dy.array() * xhat_cache.array()).colwise().sum().matrix();
    beta.grad.row(0) += dy.colwise().sum();
    Matrix dxhat = dy.array().rowwise() * gamma.value.row(0).array();
    if (!train_cache) return dxhat.array().rowwise() * invstd_cache.array();
    double n = static_cast<double>(n_cache);
    Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
    Eigen::RowVectorXd sum_dxhat_xhat = (dxhat.array() * xhat_cache.array()).colwise().sum();
    Matrix dx = n * dxhat;
    dx.rowwise() -= sum_dxhat;
    dx -= (xhat_cache.array().rowwise() * sum_dxhat_xhat.array()).matrix();
    dx.array().rowwise() *= (invstd_cache / n).array();
    return dx;
  }

  std::vector<Param*> params() { return {&gamma, &beta, &running_mean, &running_var}; }
};

struct LayerNorm {
  Param gamma, beta;
  double eps = 1e-5;
  Matrix xhat_cache;
  Vector invstd_cache;

  LayerNorm() = default;
  LayerNorm(const std::string& prefix, int dim)
      : gamma(prefix + ".gamma", 1, dim), beta(prefix + ".beta", 1, dim) {
    gamma.value.setOnes();
  }

  Matrix forward(const Matrix& x) {
    xhat_cache.resize(x.rows(), x.cols());
    invstd_cache.resize(x.rows());
    double d = static_cast<double>(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      double mean = x.row(r).mean();
      double var = (x.row(r).array() - mean).square().sum() / d;
      double invstd = 1.0 / std::sqrt(var + eps);
      invstd_cache(r) = invstd;
      xhat_cache.row(r) = (x.row(r).array() - mean) * invstd;
    }
    return (xhat_cache.array().rowwise() * gamma.value.row(0).array()).matrix().rowwise() +
           beta.value.row(0);
  }

  Matrix backward(const Matrix& dy) {
    gamma.grad.row(0) += (dy.array() * xhat_cache.array()).colwise().sum().matrix();
    beta.grad.row(0) += dy.colwise().sum();
    Matrix dxhat = dy.array().rowwise() * gamma.value.row(0).array();
    Matrix dx(dy.rows(), dy.cols());
    double d = static_cast<double>(dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      double m1 = dxhat.row(r).mean();
      double m2 = (dxhat.row(r).array() * xhat_cache.row(r).array()).mean();
      dx.row(r) =
          (dxhat.row(r).array() - m1 - xhat_cache.row(r).array() * m2) * invstd_cache(r);
      (void)d;
    }
    return dx;
  }

  std::vector<Param*> params() { return {&gamma, &beta}; }
};

struct Relu {
  Matrix mask;
  Matrix forward(const Matrix& x) {
    mask = (x.array() > 0.0).cast<double>();
    return x.cwiseProduct(mask);
  }
  Matrix backward(const Matrix& dy) { return dy.cwiseProduct(mask); }
};

struct Gelu {
  Matrix x_cache;
  static double value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
  static double slope(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
  }
  Matrix forward(const Matrix& x) {
    x_cache = x;
    return x.unaryExpr(&Gelu::value);
  }
  Matrix backward(const Matrix& dy) {
    return dy.cwiseProduct(x_cache.unaryExpr(&Gelu::slope));
  }
};

// Batch of feature maps: per sample, channels x (h*w) with row-major pixels.
struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<Matrix> maps;

  int n() const { return static_cast<int>(maps.size()); }
};

// 3x3 convolution with padding 1, arbitrary stride, via per-sample im2col.
struct Conv2d {
  Param w;  // out_c x (in_c*9)
  Param b;  // 1 x out_c
  int in_c = 0, out_c = 0, stride = 1;
  static constexpr int kK = 3, kPad = 1;

  std::vector<Matrix> col_cache;
  int ih_cache = 0, iw_cache = 0;

  Conv2d() = default;
  Conv2d(const std::string& prefix, int in_channels, int out_channels, int s, Rng& rng)
      : w(prefix + ".weight", out_channels, in_channels * kK * kK),
        b(prefix + ".bias", 1, out_channels),
        in_c(in_channels),
        out_c(out_channels),
        stride(s) {
    double sd = std::sqrt(2.0 / static_cast<double>(in_channels * kK * kK));
    for (Eigen::Index i = 0; i < w.value.rows(); ++i)
      for (Eigen::Index j = 0; j < w.value.cols(); ++j) w.value(i, j) = sd * rng.normal();
  }

  static int out_size(int in, int stride) { return (in + 2 * kPad - kK) / stride + 1; }

  Tensor forward(const Tensor& x) {
    if (x.c != in_c) throw ValidationError("Conv2d " + w.name + ": channel mismatch");
    ih_cache = x.h;
    iw_cache = x.w;
    const int oh = out_size(x.h, stride), ow = out_size(x.w, stride);
    Tensor y;
    y.c = out_c;
    y.h = oh;
    y.w = ow;
    y.maps.reserve(x.maps.size());
    col_cache.clear();
    col_cache.reserve(x.maps.size());
    for (const Matrix& m : x.maps) {
      Matrix col(in_c * kK * kK, oh * ow);
      for (int ch = 0; ch < in_c; ++ch)
        for (int ky = 0; ky < kK; ++ky)
          for (int kx = 0; kx < kK; ++kx) {
            int row = (ch * kK + ky) * kK + kx;
            for (int oy = 0; oy < oh; ++oy) {
              int sy = oy * stride + ky - kPad;
              for (int ox = 0; ox < ow; ++ox) {
                int sx = ox * stride + kx - kPad;
                col(row, oy * ow + ox) =
                    (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) ? 0.0 : m(ch, sy * x.w + sx);
              }
            }
          }
      Matrix out = w.value * col;
      out.colwise() += b.value.row(0).transpose();
      y.maps.push_back(std::move(out));
      col_cache.push_back(std::move(col));
    }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    Tensor dx;
    dx.c = in_c;
    dx.h = ih_cache;
    dx.w = iw_cache;
    const int oh = dy.h, ow = dy.w;
    for (std::size_t s = 0; s < dy.maps.size(); ++s) {
      const Matrix& dout = dy.maps[s];
      w.grad += dout * col_cache[s].transpose();
      b.grad.row(0) += dout.rowwise().sum().transpose();
      Matrix dcol = w.value.transpose() * dout;
      Matrix dm = Matrix::Zero(in_c, ih_cache * iw_cache);
      for (int ch = 0; ch < in_c; ++ch)
        for (int ky = 0; ky < kK; ++ky)
          for (int kx = 0; kx < kK; ++kx) {
            int row = (ch * kK + ky) * kK + kx;
            for (int oy = 0; oy < oh; ++oy) {
              int sy = oy * stride + ky - kPad;
              if (sy < 0 || sy >= ih_cache) continue;
              for (int ox = 0; ox < ow; ++ox) {
                int sx = ox * stride + kx - kPad;
                if (sx < 0 || sx >= iw_cache) continue;
                dm(ch, sy * iw_cache + sx) += dcol(row, oy * ow + ox);
              }
            }
          }
      dx.maps.push_back(std::move(dm));
    }
    return dx;
  }

  std::vector<Param*> params() { return {&w, &b}; }
};

struct ReluT {
  std::vector<Matrix> masks;
  Tensor forward(const Tensor& x) {
    Tensor y = x;
    masks.clear();
    for (Matrix& m : y.maps) {
      masks.push_back((m.array() > 0.0).cast<double>());
      m = m.cwiseProduct(masks.back());
    }
    return y;
  }
  Tensor backward(const Tensor& dy) {
    Tensor dx = dy;
    for (std::size_t s = 0; s < dx.maps.size(); ++s)
      dx.maps[s] = dx.maps[s].cwiseProduct(masks[s]);
    return dx;
  }
};

inline Tensor image_batch_to_tensor(const std::vector<Image>& batch, int expect_c, int expect_hw) {
  if (batch.empty()) throw ValidationError("forward: empty batch");
  Tensor t;
  t.c = batch[0].c;
  t.h = batch[0].h;
  t.w = batch[0].w;
  for (const Image& img : batch) {
    if (img.c != t.c || img.h != t.h || img.w != t.w)
      throw ValidationError("forward: inconsistent image shapes in batch");
    if (img.c != expect_c || img.h != expect_hw || img.w != expect_hw)
      throw ValidationError("forward: image shape " + std::to_string(img.c) + "x" +
                            std::to_string(img.h) + "x" + std::to_string(img.w) +
                            " does not match the configured input");
    Matrix m(t.c, t.h * t.w);
    for (int ch = 0; ch < t.c; ++ch)
      for (int p = 0; p < t.h * t.w; ++p)
        m(ch, p) = 2.0 * img.px[static_cast<std::size_t>(ch * t.h * t.w + p)] - 1.0;
    t.maps.push_back(std::move(m));
  }
  return t;
}

// ---- backbones ---------------------------------------------------------

struct Backbone {
  virtual ~Backbone() = default;
  virtual Matrix forward(const std::vector<Image>& batch, bool train) = 0;
  virtual void backward(const Matrix& dfeat) = 0;
  virtual std::vector<Param*> params() = 0;
  virtual int feature_dim() const = 0;
  virtual std::string id() const = 0;
};

// Four stride-2 conv/relu blocks followed by global average pooling.
struct ConvBackbone final : Backbone {
  int in_c, img, width;
  Conv2d c1, c2, c3, c4;
  ReluT r1, r2, r3, r4;
  int pool_h = 0, pool_w = 0;

  ConvBackbone(int in_channels, int image_size, int w, Rng& rng)
      : in_c(in_channels),
        img(image_size),
        width(w),
        c1("backbone.conv1", in_channels, w, 2, rng),
        c2("backbone.conv2", w, 2 * w, 2, rng),
        c3("backbone.conv3", 2 * w, 4 * w, 2, rng),
        c4("backbone.conv4", 4 * w, 4 * w, 2, rng) {}

  int feature_dim() const override { return 4 * width; }
  std::string id() const override { return "conv4"; }

  Matrix forward(const std::vector<Image>& batch, bool) override {
    Tensor t = image_batch_to_tensor(batch, in_c, img);
    t = r1.forward(c1.forward(t));
    t = r2.forward(c2.forward(t));
    t = r3.forward(c3.forward(t));
    t = r4.forward(c4.forward(t));
    pool_h = t.h;
    pool_w = t.w;
    Matrix feat(t.n(), t.c);
    for (int s = 0; s < t.n(); ++s)
      feat.row(s) = t.maps[static_cast<std::size_t>(s)].rowwise().mean().transpose();
    return feat;
  }

  void backward(const Matrix& dfeat) override {
    Tensor dt;
    dt.c = 4 * width;
    dt.h = pool_h;
    dt.w = pool_w;
    const int hw = pool_h * pool_w;
    // Average pooling spreads each feature gradient uniformly over pixels.
    double inv = 1.0 / static_cast<double>(hw);
    for (Eigen::Index s = 0; s < dfeat.rows(); ++s) {
      Matrix m(dt.c, hw);
      for (int ch = 0; ch < dt.c; ++ch) m.row(ch).setConstant(dfeat(s, ch) * inv);
      dt.maps.push_back(std::move(m));
    }
    Tensor g = c1.backward(r1.backward(
        c2.backward(r2.backward(c3.backward(r3.backward(c4.backward(r4.backward(dt))))))));
    (void)g;
  }

  std::vector<Param*> params() override {
    std::vector<Param*> out;
    for (Conv2d* c : {&c1, &c2, &c3, &c4})
      for (Param* p : c->params()) out.push_back(p);
    return out;
  }
};

// One pre-norm transformer block over the stacked patch tokens of a batch.
// Rows [s*P, (s+1)*P) belong to sample s; attention never crosses samples.
struct AttnBlock {
  int dim, heads, dh;
  LayerNorm ln1, ln2;
  Linear qkv;   // dim -> 3*dim
  Linear proj;  // dim -> dim
  Linear fc1;   // dim -> 2*dim
  Linear fc2;   // 2*dim -> dim
  Gelu gelu;

  // caches
  Matrix q_cache, k_cache, v_cache;
  std::vector<Matrix> attn_cache;  // one P x P matrix per (sample, head)
  int patches_cache = 0;

  AttnBlock() = default;
  AttnBlock(const std::string& prefix, int d, int h, Rng& rng)
      : dim(d),
        heads(h),
        dh(d / h),
        ln1(prefix + ".ln1", d),
        ln2(prefix + ".ln2", d),
        qkv(prefix + ".qkv", d, 3 * d, rng, std::sqrt(1.0 / d)),
        proj(prefix + ".proj", d, d, rng, std::sqrt(1.0 / d)),
        fc1(prefix + ".fc1", d, 2 * d, rng),
        fc2(prefix + ".fc2", 2 * d, d, rng, std::sqrt(1.0 / (2.0 * d))) {
    if (d % h != 0) throw ValidationError("attention dim must be divisible by heads");
  }

  Matrix forward(const Matrix& x, int patches) {
    patches_cache = patches;
    const Eigen::Index rows = x.rows();
    if (rows % patches != 0) throw ValidationError("attention: token count not a multiple of P");
    const int samples = static_cast<int>(rows) / patches;

    Matrix a = ln1.forward(x);
    Matrix qkv_out = qkv.forward(a);
    q_cache = qkv_out.leftCols(dim);
    k_cache = qkv_out.middleCols(dim, dim);
    v_cache = qkv_out.rightCols(dim);

    Matrix attn_out(rows, dim);
    attn_cache.assign(static_cast<std::size_t>(samples * heads), Matrix());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int s = 0; s < samples; ++s) {
      const Eigen::Index base = static_cast<Eigen::Index>(s) * patches;
      for (int h = 0; h < heads; ++h) {
        const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
        Matrix qh = q_cache.block(base, off, patches, dh);
        Matrix kh = k_cache.block(base, off, patches, dh);
        Matrix vh = v_cache.block(base, off, patches, dh);
        Matrix logits = scale * (qh * kh.transpose());
        Matrix p = softmax_rows(logits);
        attn_cache[static_cast<std::size_t>(s * heads + h)] = p;
        attn_out.block(base, off, patches, dh) = p * vh;
      }
    }
    Matrix x1 = x + proj.forward(attn_out);

    Matrix a2 = ln2.forward(x1);
    Matrix m = fc2.forward(gelu.forward(fc1.forward(a2)));
    return x1 + m;
  }

  Matrix backward(const Matrix& dy) {
    Matrix dx1 = dy + ln2.backward(fc1.backward(gelu.backward(fc2.backward(dy))));

    Matrix dattn_out = proj.backward(dx1);
    const int patches = patches_cache;
    const int samples = static_cast<int>(dattn_out.rows()) / patches;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix dq(q_cache.rows(), dim), dk(q_cache.rows(), dim), dv(q_cache.rows(), dim);
    for (int s = 0; s < samples; ++s) {
      const Eigen::Index base = static_cast<Eigen::Index>(s) * patches;
      for (int h = 0; h < heads; ++h) {
        const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
        const Matrix& p = attn_cache[static_cast<std::size_t>(s * heads + h)];
        Matrix vh = v_cache.block(base, off, patches, dh);
        Matrix dout = dattn_out.block(base, off, patches, dh);
        Matrix dp = dout * vh.transpose();
        dv.block(base, off, patches, dh) = p.transpose() * dout;
        // softmax backward, row-wise
        Matrix dlogits(patches, patches);
        for (int r = 0; r < patches; ++r) {
          double dot = dp.row(r).dot(p.row(r));
          dlogits.row(r) = p.row(r).cwiseProduct(
              dp.row(r) - Eigen::RowVectorXd::Constant(patches, dot));
        }
        dlogits *= scale;
        Matrix qh = q_cache.block(base, off, patches, dh);
        Matrix kh = k_cache.block(base, off, patches, dh);
        dq.block(base, off, patches, dh) = dlogits * kh;
        dk.block(base, off, patches, dh) = dlogits.transpose() * qh;
      }
    }
    Matrix dqkv(dq.rows(), 3 * dim);
    dqkv.leftCols(dim) = dq;
    dqkv.middleCols(dim, dim) = dk;
    dqkv.rightCols(dim) = dv;
    return dx1 + ln1.backward(qkv.backward(dqkv));
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (Param* p : ln1.params()) out.push_back(p);
    for (Param* p : qkv.params()) out.push_back(p);
    for (Param* p : proj.params()) out.push_back(p);
    for (Param* p : ln2.params()) out.push_back(p);
    for (Param* p : fc1.params()) out.push_back(p);
    for (Param* p : fc2.params()) out.push_back(p);
    return out;
  }
};

// Patch embedding + pre-norm self-attention blocks + mean pooling.
struct AttnBackbone final : Backbone {
  int in_c, img, patch, dim, heads, patches;
  Linear embed;
  Param pos;  // patches x dim, shared across samples
  std::vector<AttnBlock> blocks;
  LayerNorm ln_final;
  int batch_cache = 0;

  AttnBackbone(int in_channels, int image_size, int patch_size, int d, int h, int depth, Rng& rng)
      : in_c(in_channels),
        img(image_size),
        patch(patch_size),
        dim(d),
        heads(h),
        patches((image_size / patch_size) * (image_size / patch_size)),
        embed("backbone.embed", in_channels * patch_size * patch_size, d, rng),
        pos("backbone.pos", (image_size / patch_size) * (image_size / patch_size), d),
        ln_final("backbone.ln_final", d) {
    if (image_size % patch_size != 0)
      throw ValidationError("attention backbone: image size must be a multiple of patch size");
    for (int i = 0; i < depth; ++i)
      blocks.emplace_back("backbone.block" + std::to_string(i), d, h, rng);
    for (Eigen::Index i = 0; i < pos.value.rows(); ++i)
      for (Eigen::Index j = 0; j < pos.value.cols(); ++j) pos.value(i, j) = 0.02 * rng.normal();
  }

  int feature_dim() const override { return dim; }
  std::string id() const override { return "attn4"; }

  Matrix forward(const std::vector<Image>& batch, bool) override {
    Tensor t = image_batch_to_tensor(batch, in_c, img);
    const int side = img / patch;
    batch_cache = t.n();
    Matrix tokens(static_cast<Eigen::Index>(t.n()) * patches, in_c * patch * patch);
    for (int s = 0; s < t.n(); ++s) {
      const Matrix& m = t.maps[static_cast<std::size_t>(s)];
      for (int py = 0; py < side; ++py)
        for (int px = 0; px < side; ++px) {
          Eigen::Index row = static_cast<Eigen::Index>(s) * patches + py * side + px;
          int idx = 0;
          for (int ch = 0; ch < in_c; ++ch)
            for (int y = 0; y < patch; ++y)
              for (int x = 0; x < patch; ++x)
                tokens(row, idx++) = m(ch, (py * patch + y) * img + (px * patch + x));
        }
    }
    Matrix x = embed.forward(tokens);
    for (int s = 0; s < t.n(); ++s)
      x.middleRows(static_cast<Eigen::Index>(s) * patches, patches) += pos.value;
    for (AttnBlock& b : blocks) x = b.forward(x, patches);
    x = ln_final.forward(x);
    Matrix feat(t.n(), dim);
    for (int s = 0; s < t.n(); ++s)
      feat.row(s) = x.middleRows(static_cast<Eigen::Index>(s) * patches, patches).colwise().mean();
    return feat;
  }

  void backward(const Matrix& dfeat) override {
    Matrix dx(static_cast<Eigen::Index>(batch_cache) * patches, dim);
    double inv = 1.0 / static_cast<double>(patches);
    for (int s = 0; s < batch_cache; ++s)
      for (int p = 0; p < patches; ++p)
        dx.row(static_cast<Eigen::Index>(s) * patches + p) = dfeat.row(s) * inv;
    dx = ln_final.backward(dx);
    for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) dx = it->backward(dx);
    for (int s = 0; s < batch_cache; ++s)
      pos.grad += dx.middleRows(static_cast<Eigen::Index>(s) * patches, patches);
    embed.backward(dx);
  }

  std::vector<Param*> params() override {
    std::vector<Param*> out;
    for (Param* p : embed.params()) out.push_back(p);
    out.push_back(&pos);
    for (AttnBlock& b : blocks)
      for (Param* p : b.params()) out.push_back(p);
    for (Param* p : ln_final.params()) out.push_back(p);
    return out;
  }
};

// ---- the three-part assembly ---------------------------------------------

enum class Mode { Train, Eval };

struct ForwardResult {
  Matrix features;  // B x D bottleneck outputs
  Matrix logits;    // B x K
};

struct NetworkAssembly {
  std::unique_ptr<Backbone> backbone;
  Linear bottleneck_fc;
  BatchNorm1d bottleneck_bn;
  Linear classifier;
  std::map<std::string, bool> trainable = {
      {"backbone", true}, {"bottleneck", true}, {"classifier", true}};
  int k = 0;
  int d = 0;

  NetworkAssembly() = default;
  NetworkAssembly(NetworkAssembly&&) = default;
  NetworkAssembly& operator=(NetworkAssembly&&) = default;

  ForwardResult forward(const std::vector<Image>& batch, Mode mode) {
    Matrix raw = backbone->forward(batch, mode == Mode::Train);
    Matrix feat = bottleneck_bn.forward(bottleneck_fc.forward(raw), mode == Mode::Train);
    return {feat, classifier.forward(feat)};
  }

  void backward_from_logits(const Matrix& dlogits) {
    Matrix dfeat = classifier.backward(dlogits);
    Matrix draw = bottleneck_fc.backward(bottleneck_bn.backward(dfeat));
    backbone->backward(draw);
  }

  std::vector<Param*> group_params(const std::string& group) {
    if (group == "backbone") return backbone->params();
    if (group == "bottleneck") {
      std::vector<Param*> out = bottleneck_fc.params();
      for (Param* p : bottleneck_bn.params()) out.push_back(p);
      return out;
    }
    if (group == "classifier") return classifier.params();
    throw ValidationError("unknown parameter group '" + group + "'");
  }

  std::vector<Param*> all_params() {
    std::vector<Param*> out;
    for (const char* g : {"backbone", "bottleneck", "classifier"})
      for (Param* p : group_params(g)) out.push_back(p);
    return out;
  }

  void set_trainable(const std::string& group, bool flag) {
    auto it = trainable.find(group);
    if (it == trainable.end()) throw ValidationError("unknown parameter group '" + group + "'");
    it->second = flag;
  }

  void zero_grad() {
    for (Param* p : all_params()) p->zero_grad();
  }
};

inline NetworkAssembly build_network(const AdaptationConfig& cfg, int num_classes,
                                     std::uint64_t init_seed, int in_channels = 3) {
  if (num_classes < 2) throw ValidationError("build_network: need at least 2 classes");
  Rng rng(init_seed);
  NetworkAssembly net;
  if (cfg.backbone_id == "conv4") {
    net.backbone = std::make_unique<ConvBackbone>(in_channels, cfg.image_size, cfg.conv_width, rng);
  } else if (cfg.backbone_id == "attn4") {
    net.backbone = std::make_unique<AttnBackbone>(in_channels, cfg.image_size, cfg.attn_patch,
                                                  cfg.attn_dim, cfg.attn_heads, cfg.attn_blocks,
                                                  rng);
  } else {
    throw ValidationError("build_network: unknown backbone_id " + cfg.backbone_id);
  }
  int f = net.backbone->feature_dim();
  net.d = cfg.bottleneck_dim;
  net.k = num_classes;
  net.bottleneck_fc = Linear("bottleneck.fc", f, cfg.bottleneck_dim, rng);
  net.bottleneck_bn = BatchNorm1d("bottleneck.bn", cfg.bottleneck_dim);
  net.classifier = Linear("classifier.fc", cfg.bottleneck_dim, num_classes, rng,
                          std::sqrt(1.0 / cfg.bottleneck_dim));
  return net;
}

// ---- optimizer -------------------------------------------------------------

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  double backbone_lr_scale = 0.1;
  std::string schedule = "power";  // power: lr*(1+10p)^-0.75 over the stage | const
  long total_steps = 0;
};

class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) {
    if (cfg_.lr <= 0) throw ValidationError("sgd: lr must be positive");
    if (cfg_.schedule != "power" && cfg_.schedule != "const")
      throw ValidationError("sgd: unknown schedule " + cfg_.schedule);
  }

  double current_lr() const {
    if (cfg_.schedule == "const" || cfg_.total_steps <= 0) return cfg_.lr;
    double p = std::min(1.0, static_cast<double>(step_count_) /
                                 static_cast<double>(cfg_.total_steps));
    return cfg_.lr * std::pow(1.0 + 10.0 * p, -0.75);
  }

  void step(NetworkAssembly& net) {
    double base = current_lr();
    for (const char* group : {"backbone", "bottleneck", "classifier"}) {
      if (!net.trainable.at(group)) continue;
      double lr = base * (std::string(group) == "backbone" ? cfg_.backbone_lr_scale : 1.0);
      for (Param* p : net.group_params(group)) {
        if (p->buffer) continue;
        Matrix g = p->grad + cfg_.weight_decay * p->value;
        p->vel = cfg_.momentum * p->vel + g;
        p->value -= lr * p->vel;
      }
    }
    ++step_count_;
  }

  long steps_taken() const { return step_count_; }

 private:
  SgdConfig cfg_;
  long step_count_ = 0;
};

}  // namespace sfda
