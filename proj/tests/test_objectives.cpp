#include <catch2/catch_amalgamated.hpp>

#include "sfda/objectives.hpp"

#include <cmath>
#include <vector>

using namespace sfda;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

// Reference implementations written independently of the library: plain
// scalar loops, no shared helpers. Tests compare the library against these.
namespace oracle {

std::vector<double> softmax(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double sum = 0.0;
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

double soft_ce(const sfda::Matrix& logits, const sfda::Matrix& targets) {
  double total = 0.0;
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    double mx = logits(b, 0);
    for (Eigen::Index k = 1; k < logits.cols(); ++k) mx = std::max(mx, logits(b, k));
    double sum = 0.0;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) sum += std::exp(logits(b, k) - mx);
    double lse = mx + std::log(sum);
    for (Eigen::Index k = 0; k < logits.cols(); ++k)
      if (targets(b, k) != 0.0) total -= targets(b, k) * (logits(b, k) - lse);
  }
  return total / static_cast<double>(logits.rows());
}

double frobenius(const sfda::Matrix& a) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

double entropy_rows(const sfda::Matrix& p) {
  double h = 0.0;
  for (Eigen::Index b = 0; b < p.rows(); ++b)
    for (Eigen::Index k = 0; k < p.cols(); ++k)
      if (p(b, k) > 0.0) h -= p(b, k) * std::log(p(b, k));
  return h / static_cast<double>(p.rows());
}

}  // namespace oracle

namespace {

Matrix random_logits(Rng& rng, int b, int k, double scale = 2.0) {
  Matrix z(b, k);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < k; ++j) z(i, j) = scale * rng.normal();
  return z;
}

Matrix random_stochastic(Rng& rng, int b, int k) {
  Matrix m(b, k);
  for (int i = 0; i < b; ++i) {
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      m(i, j) = rng.uniform() + 1e-3;
      sum += m(i, j);
    }
    for (int j = 0; j < k; ++j) m(i, j) /= sum;
  }
  return m;
}

template <typename F>
Matrix fd_grad(F f, Matrix z, double eps = 1e-4) {
  Matrix g(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      double keep = z(i, j);
      z(i, j) = keep + eps;
      double up = f(z);
      z(i, j) = keep - eps;
      double dn = f(z);
      z(i, j) = keep;
      g(i, j) = (up - dn) / (2.0 * eps);
    }
  return g;
}

void require_grad_close(const Matrix& analytic, const Matrix& fd) {
  for (Eigen::Index i = 0; i < analytic.rows(); ++i)
    for (Eigen::Index j = 0; j < analytic.cols(); ++j) {
      double a = analytic(i, j), b = fd(i, j);
      double rel = std::abs(a - b) / (std::abs(a) + std::abs(b) + 1e-6);
      INFO("entry (" << i << "," << j << "): analytic=" << a << " fd=" << b);
      REQUIRE(rel <= 1e-3);
    }
}

Matrix one_hot(std::initializer_list<int> labels, int k) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), k);
  Eigen::Index r = 0;
  for (int y : labels) m(r++, y) = 1.0;
  return m;
}

}  // namespace

TEST_CASE("response matrix validation") {
  Matrix good(2, 2);
  good << 0.5, 0.5, 0.8, 0.2;
  REQUIRE_NOTHROW(ClassificationResponse(good));

  Matrix bad_sum(1, 2);
  bad_sum << 0.5, 0.6;
  REQUIRE_THROWS_AS(ClassificationResponse(bad_sum), ValidationError);

  Matrix negative(1, 2);
  negative << -0.1, 1.1;
  REQUIRE_THROWS_AS(ClassificationResponse(negative), ValidationError);

  Matrix above_one(1, 3);
  above_one << 1.2, -0.1, -0.1;
  REQUIRE_THROWS_AS(ClassificationResponse(above_one), ValidationError);
}

TEST_CASE("frobenius norm of response matrices") {
  ClassificationResponse onehot(one_hot({0, 1, 2, 0}, 3));
  REQUIRE(frobenius_norm(onehot) == 2.0);  // sqrt(batch size)

  ClassificationResponse uniform(Matrix::Constant(4, 4, 0.25));
  REQUIRE(frobenius_norm(uniform) == 1.0);  // sqrt(B/K)

  Matrix a(2, 2);
  a << 0.5, 0.5, 0.8, 0.2;
  ClassificationResponse r(a);
  REQUIRE_THAT(frobenius_norm(r), WithinAbs(oracle::frobenius(a), 1e-15));
  REQUIRE_THAT(frobenius_norm(r), WithinAbs(std::sqrt(1.18), 1e-15));
}

TEST_CASE("nm loss values and empty batch") {
  REQUIRE(nm_loss(ClassificationResponse(one_hot({0, 1, 2, 0}, 3))) == -2.0);
  REQUIRE(nm_loss(ClassificationResponse(Matrix::Constant(4, 4, 0.25))) == -1.0);
  REQUIRE_THROWS_AS(nm_loss(ClassificationResponse(Matrix(0, 4))), ValidationError);
  REQUIRE_THROWS_AS(nm_loss_grad(Matrix(0, 4)), ValidationError);
}

TEST_CASE("nm loss gradient matches finite differences") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix z = random_logits(rng, 5, 4);
    auto [loss, grad] = nm_loss_grad(z);
    REQUIRE_THAT(loss, WithinAbs(-oracle::frobenius(softmax_rows(z)), 1e-12));
    Matrix fd = fd_grad([](const Matrix& q) { return nm_loss_grad(q).first; }, z);
    require_grad_close(grad, fd);
  }
  // Near-uniform logits: FD still agrees in the flat region.
  Matrix z = 0.01 * random_logits(rng, 4, 4, 1.0);
  auto [loss, grad] = nm_loss_grad(z);
  Matrix fd = fd_grad([](const Matrix& q) { return nm_loss_grad(q).first; }, z);
  require_grad_close(grad, fd);
}

TEST_CASE("descending nm loss sharpens rows toward their argmax") {
  Rng rng(12);
  Matrix z = 0.3 * random_logits(rng, 4, 4, 1.0);
  Matrix p0 = softmax_rows(z);
  std::vector<double> top0(4);
  for (int b = 0; b < 4; ++b) top0[static_cast<std::size_t>(b)] = p0.row(b).maxCoeff();
  double prev = nm_loss_grad(z).first;
  for (int it = 0; it < 200; ++it) {
    auto [loss, grad] = nm_loss_grad(z);
    z -= 1.0 * grad;
    prev = loss;
  }
  double after = nm_loss_grad(z).first;
  REQUIRE(after < prev);
  Matrix p1 = softmax_rows(z);
  auto argmax = [](const Matrix& m, int r) {
    Eigen::Index best = 0;
    m.row(r).maxCoeff(&best);
    return best;
  };
  for (int b = 0; b < 4; ++b) {
    // Same argmax, higher confidence: the loss pushes rows toward one-hot.
    REQUIRE(argmax(p0, b) == argmax(p1, b));
    REQUIRE(p1.row(b).maxCoeff() > top0[static_cast<std::size_t>(b)]);
  }
}

TEST_CASE("free-logit descent approaches the one-hot bound") {
  Rng rng(13);
  const int b = 6, k = 4;
  Matrix z = random_logits(rng, b, k, 0.5);
  const double target = std::sqrt(static_cast<double>(b));
  double fro = 0.0;
  for (int it = 0; it < 200000; ++it) {
    auto [loss, grad] = nm_loss_grad(z);
    fro = -loss;
    if (fro >= target - 1e-3) break;
    z -= 20.0 * grad;
  }
  REQUIRE(fro >= target - 1e-3);
}

TEST_CASE("nuclear norm diagnostic") {
  NuclearCheck id = nuclear_norm_check(Matrix::Identity(3, 3));
  REQUIRE_THAT(id.fro, WithinAbs(std::sqrt(3.0), 1e-12));
  REQUIRE_THAT(id.nuc, WithinAbs(3.0, 1e-12));
  REQUIRE(id.rank == 3);

  Vector u(3), v(4);
  u << 1.0, -2.0, 0.5;
  v << 0.3, 0.1, -0.7, 2.0;
  NuclearCheck r1 = nuclear_norm_check(u * v.transpose());
  REQUIRE(r1.rank == 1);
  REQUIRE_THAT(r1.nuc, WithinAbs(r1.fro, 1e-10));

  Rng rng(14);
  NuclearCheck rnd = nuclear_norm_check(random_stochastic(rng, 6, 4));
  REQUIRE(rnd.fro <= rnd.nuc + 1e-8);
  REQUIRE(rnd.nuc <= std::sqrt(static_cast<double>(rnd.rank)) * rnd.fro + 1e-8);

  Matrix inf_mat = Matrix::Ones(2, 2);
  inf_mat(0, 0) = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(nuclear_norm_check(inf_mat), NumericError);
}

TEST_CASE("row-stochastic bound suite") {
  Rng rng(15);
  for (int trial = 0; trial < 1000; ++trial) {
    int b = 2 + static_cast<int>(rng.uniform_int(63));
    int k = 2 + static_cast<int>(rng.uniform_int(31));
    Matrix a = random_stochastic(rng, b, k);
    double fro = ClassificationResponse(a).a.norm();
    double lower = std::sqrt(static_cast<double>(b) / static_cast<double>(k));
    double upper = std::sqrt(static_cast<double>(b));
    REQUIRE(fro >= lower - 1e-8);
    REQUIRE(fro <= upper + 1e-8);
    NuclearCheck chk = nuclear_norm_check(a);  // asserts the sandwich internally
    REQUIRE(chk.fro <= chk.nuc + 1e-8);
    REQUIRE(chk.nuc <= std::sqrt(static_cast<double>(chk.rank)) * chk.fro + 1e-8);
  }
}

TEST_CASE("pseudo-label cross-entropy, hard labels") {
  Matrix confident(2, 4);
  confident << 50, 0, 0, 0, 0, 0, 50, 0;
  REQUIRE(pseudo_ce_loss(confident, std::vector<int>{0, 2}) < 1e-6);

  Matrix uniform = Matrix::Zero(3, 4);
  REQUIRE_THAT(pseudo_ce_loss(uniform, std::vector<int>{1, 3, 0}),
               WithinAbs(std::log(4.0), 1e-12));

  REQUIRE_THROWS_AS(pseudo_ce_loss(uniform, std::vector<int>{1, 4, 0}), ValidationError);
  REQUIRE_THROWS_AS(pseudo_ce_loss(uniform, std::vector<int>{-1, 0, 0}), ValidationError);
  REQUIRE_THROWS_AS(pseudo_ce_loss(uniform, std::vector<int>{0, 0}), ValidationError);
}

TEST_CASE("pseudo-label cross-entropy, soft labels") {
  Matrix logits(1, 2);
  logits << 1.0, 0.0;
  Matrix soft(1, 2);
  soft << 0.7, 0.3;
  double expect = oracle::soft_ce(logits, soft);
  // Same value from the closed form: lse(1,0) - 0.7.
  REQUIRE_THAT(expect, WithinAbs(1.0 + std::log1p(std::exp(-1.0)) - 0.7, 1e-12));
  REQUIRE_THAT(pseudo_ce_loss(logits, soft), WithinAbs(expect, 1e-12));

  Matrix not_stochastic(1, 2);
  not_stochastic << 0.7, 0.4;
  REQUIRE_THROWS_AS(pseudo_ce_loss(logits, not_stochastic), ValidationError);
}

TEST_CASE("pseudo-label cross-entropy gradients match finite differences") {
  Rng rng(16);
  Matrix z = random_logits(rng, 4, 5);
  Matrix soft = random_stochastic(rng, 4, 5);
  auto [loss, grad] = pseudo_ce_grad(z, soft);
  REQUIRE_THAT(loss, WithinAbs(oracle::soft_ce(z, soft), 1e-12));
  require_grad_close(grad, fd_grad([&](const Matrix& q) { return pseudo_ce_loss(q, soft); }, z));

  std::vector<int> hard{3, 0, 2, 2};
  auto [hloss, hgrad] = pseudo_ce_grad(z, hard);
  REQUIRE_THAT(hloss, WithinAbs(pseudo_ce_loss(z, hard), 1e-12));
  require_grad_close(hgrad, fd_grad([&](const Matrix& q) { return pseudo_ce_loss(q, hard); }, z));
}

TEST_CASE("expectation ratio") {
  Vector global(2), batch(2);
  global << 0.6, 0.35;
  batch << 0.3, 0.7;
  ExpectationRatio er(global, batch);
  REQUIRE_THAT(er.ratio(0), WithinAbs(2.0, 1e-12));
  REQUIRE_THAT(er.ratio(1), WithinAbs(0.5, 1e-12));
  for (int k = 0; k < 2; ++k)
    REQUIRE_THAT(er.ratio(k) * er.batch_mean(k), WithinAbs(er.global_mean(k), 1e-12));

  Vector zero_batch(2);
  zero_batch << 0.5, 0.0;
  REQUIRE_THROWS_MATCHES(ExpectationRatio(global, zero_batch), NumericError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("class 1")));
  Vector bad_global(2);
  bad_global << 0.0, 1.0;
  REQUIRE_THROWS_AS(ExpectationRatio(bad_global, batch), ValidationError);
}

TEST_CASE("global mean tracker blends with momentum") {
  GlobalMeanTracker tracker(0.9);
  REQUIRE_FALSE(tracker.initialized());
  Vector full(2);
  full << 0.5, 0.5;
  tracker.reset(full);
  Vector batch(2);
  batch << 0.3, 0.7;
  tracker.update(batch);
  REQUIRE_THAT(tracker.mean(0), WithinAbs(0.9 * 0.5 + 0.1 * 0.3, 1e-15));
  REQUIRE_THAT(tracker.mean(1), WithinAbs(0.9 * 0.5 + 0.1 * 0.7, 1e-15));
}

TEST_CASE("consistency loss hand case") {
  // Weak rows chosen so the batch mean is [0.3, 0.7]; the global mean below
  // yields the ratio [2, 0.5].
  Matrix weak(2, 2);
  weak << 0.4, 0.6, 0.2, 0.8;
  Vector global(2);
  global << 0.6, 0.35;
  Matrix strong(2, 2);
  strong << 0.7, 0.3, 0.5, 0.5;

  // Scalar oracle, computed term by term.
  double r0 = 0.6 / 0.3, r1 = 0.35 / 0.7;
  double loss_expect = 0.0;
  Matrix targets_expect(2, 2);
  for (int b = 0; b < 2; ++b) {
    std::vector<double> scaled{weak(b, 0) * r0, weak(b, 1) * r1};
    std::vector<double> t = oracle::softmax(scaled);
    targets_expect(b, 0) = t[0];
    targets_expect(b, 1) = t[1];
    loss_expect -= t[0] * std::log(strong(b, 0)) + t[1] * std::log(strong(b, 1));
  }
  loss_expect /= 2.0;

  Matrix targets = consistency_targets(weak, global);
  for (int b = 0; b < 2; ++b)
    for (int k = 0; k < 2; ++k) REQUIRE_THAT(targets(b, k), WithinAbs(targets_expect(b, k), 1e-12));
  // Second row scales to [0.4, 0.4]: its target is exactly uniform.
  REQUIRE_THAT(targets(1, 0), WithinAbs(0.5, 1e-12));
  REQUIRE_THAT(consistency_loss(weak, strong, global), WithinAbs(loss_expect, 1e-12));
}

TEST_CASE("consistency loss with matching means reduces to soft CE") {
  Rng rng(17);
  Matrix weak = random_stochastic(rng, 4, 3);
  Vector global = batch_mean_rows(weak);
  Matrix strong = random_stochastic(rng, 4, 3);

  Matrix renorm = softmax_rows(weak);  // ratio = 1 leaves rows unscaled
  double expect = 0.0;
  for (int b = 0; b < 4; ++b)
    for (int k = 0; k < 3; ++k) expect -= renorm(b, k) * std::log(strong(b, k));
  expect /= 4.0;
  REQUIRE_THAT(consistency_loss(weak, strong, global), WithinAbs(expect, 1e-12));
}

TEST_CASE("consistency loss errors") {
  Matrix weak(2, 2);
  weak << 1.0, 0.0, 1.0, 0.0;  // class 1 has zero batch mass
  Vector global(2);
  global << 0.5, 0.5;
  Matrix strong = Matrix::Constant(2, 2, 0.5);
  REQUIRE_THROWS_MATCHES(consistency_loss(weak, strong, global), NumericError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("class 1")));

  Matrix weak_ok = Matrix::Constant(2, 2, 0.5);
  Matrix strong_bad(2, 2);
  strong_bad << 0.9, 0.2, 0.5, 0.5;
  REQUIRE_THROWS_AS(consistency_loss(weak_ok, strong_bad, global), ValidationError);
  REQUIRE_THROWS_AS(consistency_loss(weak_ok, Matrix::Constant(3, 2, 0.5), global),
                    ValidationError);
}

TEST_CASE("consistency loss is entropy plus a nonnegative divergence") {
  Rng rng(18);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix weak = random_stochastic(rng, 5, 4);
    Vector global = random_stochastic(rng, 1, 4).row(0).transpose();
    Matrix targets = consistency_targets(weak, global);
    double floor = oracle::entropy_rows(targets);

    double at_targets = consistency_loss(weak, targets, global);
    REQUIRE_THAT(at_targets, WithinAbs(floor, 1e-10));  // equality when strong == targets

    Matrix other = random_stochastic(rng, 5, 4);
    double elsewhere = consistency_loss(weak, other, global);
    REQUIRE(elsewhere >= 0.0);
    REQUIRE(elsewhere >= floor - 1e-12);  // KL(targets || strong) >= 0
  }
}

TEST_CASE("consistency gradient flows through the strong branch only") {
  Rng rng(19);
  Matrix weak = random_stochastic(rng, 4, 3);
  Vector global = random_stochastic(rng, 1, 3).row(0).transpose();
  Matrix strong_logits = random_logits(rng, 4, 3);
  auto [loss, grad] = consistency_grad(weak, strong_logits, global);
  REQUIRE_THAT(loss, WithinAbs(consistency_loss(weak, softmax_rows(strong_logits), global), 1e-12));
  require_grad_close(
      grad, fd_grad(
                [&](const Matrix& q) {
                  return consistency_loss(weak, softmax_rows(q), global);
                },
                strong_logits));
}

TEST_CASE("weighted total loss") {
  REQUIRE(total_loss(-1.7, 2.0, 0.4, LossWeights{1.0, 0.0, 0.0}) == -1.7);
  REQUIRE(total_loss(-1.7, 2.0, 0.4, LossWeights{0.0, 0.0, 0.0}) == 0.0);
  REQUIRE_THAT(total_loss(-1.5, 2.0, 0.4, LossWeights{1.0, 0.3, 1.0}), WithinAbs(-0.5, 1e-15));
  REQUIRE_THROWS_AS(total_loss(std::nan(""), 0.0, 0.0, LossWeights{}), NumericError);
  REQUIRE_THROWS_AS(total_loss(0.0, 0.0, 0.0, LossWeights{-1.0, 0.3, 1.0}), ValidationError);
}

TEST_CASE("mixup of images and labels") {
  Image xi(1, 2, 2), xj(1, 2, 2);
  xi.px = {0.0, 0.2, 0.4, 0.6};
  xj.px = {1.0, 1.0, 1.0, 1.0};
  Vector yi(2), yj(2);
  yi << 1.0, 0.0;
  yj << 0.0, 1.0;

  auto [x_full, y_full] = mixup_pair(xi, yi, xj, yj, 1.0);
  REQUIRE(x_full.px == xi.px);
  REQUIRE(y_full == yi);

  auto [x_same, y_same] = mixup_pair(xi, yi, xj, yi, 0.5);
  REQUIRE(y_same == yi);
  REQUIRE_THAT(x_same.px[0], WithinAbs(0.5, 1e-15));

  auto [x_mix, y_mix] = mixup_pair(xi, yi, xj, yj, 0.3);
  REQUIRE_THAT(y_mix(0), WithinAbs(0.3, 1e-15));
  REQUIRE_THAT(y_mix(1), WithinAbs(0.7, 1e-15));
  REQUIRE_THAT(y_mix.sum(), WithinAbs(1.0, 1e-15));

  REQUIRE_THROWS_AS(mixup_pair(xi, yi, xj, yj, 1.5), ValidationError);
  REQUIRE_THROWS_AS(mixup_pair(xi, yi, xj, yj, -0.1), ValidationError);
  REQUIRE_THROWS_AS(mixup_pair(xi, yi, Image(1, 3, 2), yj, 0.5), ValidationError);
}

TEST_CASE("mixup distillation loss") {
  Rng rng(20);
  Matrix z = random_logits(rng, 4, 4);
  Matrix yi = random_stochastic(rng, 4, 4);
  Matrix yj = random_stochastic(rng, 4, 4);

  REQUIRE_THAT(mkd_loss(z, yi, yj, 1.0), WithinAbs(pseudo_ce_loss(z, yi), 1e-12));
  REQUIRE_THAT(mkd_loss(z, yi, yj, 0.0), WithinAbs(pseudo_ce_loss(z, yj), 1e-12));

  // Linearity in the target: the two-term form equals CE against the mixed
  // label, for every lambda on the grid.
  for (double lam : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    Matrix mixed = lam * yi + (1.0 - lam) * yj;
    REQUIRE_THAT(mkd_loss(z, yi, yj, lam), WithinAbs(oracle::soft_ce(z, mixed), 1e-8));
  }

  Matrix uniform_logits = Matrix::Zero(3, 4);
  REQUIRE_THAT(mkd_loss(uniform_logits, one_hot({0, 1, 2}, 4), one_hot({3, 3, 0}, 4), 0.5),
               WithinAbs(std::log(4.0), 1e-12));

  REQUIRE_THROWS_AS(mkd_loss(z, yi, yj, 1.01), ValidationError);

  auto [loss, grad] = mkd_grad(z, yi, yj, 0.75);
  REQUIRE_THAT(loss, WithinAbs(mkd_loss(z, yi, yj, 0.75), 1e-12));
  require_grad_close(grad,
                     fd_grad([&](const Matrix& q) { return mkd_loss(q, yi, yj, 0.75); }, z));
}

TEST_CASE("information maximization baseline") {
  Rng rng(21);
  Matrix z = random_logits(rng, 4, 3);
  auto [loss, grad] = im_loss_grad(z);
  require_grad_close(grad, fd_grad([](const Matrix& q) { return im_loss_grad(q).first; }, z));

  // Uniform predictions: per-sample entropy equals the diversity term.
  auto [uloss, ugrad] = im_loss_grad(Matrix::Zero(4, 3));
  REQUIRE_THAT(uloss, WithinAbs(0.0, 1e-12));

  // Confident and balanced: entropy near 0, diversity near log K.
  Matrix sharp(3, 3);
  sharp << 60, 0, 0, 0, 60, 0, 0, 0, 60;
  auto [sloss, sgrad] = im_loss_grad(sharp);
  REQUIRE_THAT(sloss, WithinAbs(-std::log(3.0), 1e-6));
}
