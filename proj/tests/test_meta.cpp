#include <cmath>
#include <filesystem>
#include <numbers>

#include <gtest/gtest.h>

#include "mlmpc/meta.hpp"
#include "test_util.hpp"

using namespace mlmpc;
using namespace mlmpc::meta;
using features::BasisSet;
using features::KernelHyper;
using mlmpc::testing::random_matrix;
using mlmpc::testing::rel_err;

namespace {

TaskDataset sine_task(Rng& rng, const std::string& id, int n, double phase, double noise = 0.05) {
  TaskDataset t{id, MatrixXd(n, 1), VectorXd(n)};
  for (int i = 0; i < n; ++i) {
    t.x(i, 0) = uniform(rng, -2.0, 2.0);
    t.y(i) = std::sin(2.0 * t.x(i, 0) + phase) + noise * standard_normal(rng);
  }
  return t;
}

MetaDataset sine_tasks(std::uint64_t seed, int m, int n) {
  Rng rng(seed);
  MetaDataset d;
  for (int k = 0; k < m; ++k) d.tasks.push_back(sine_task(rng, "task_" + std::to_string(k), n, 0.3 * k));
  return d;
}

BasisSet sor(int e, double ell = 0.5, double sf2 = 1.0, double sw2 = 0.01) {
  MatrixXd z(e, 1);
  for (int i = 0; i < e; ++i) z(i, 0) = -2.0 + 4.0 * (i + 0.5) / e;
  return BasisSet::subset_of_regressors(z, KernelHyper::make(VectorXd::Constant(1, ell), sf2, sw2));
}

}  // namespace

TEST(PerTaskPosterior, EmptyTaskGivesPrior) {
  const BasisSet b = sor(4);
  const TaskDataset t{"t", MatrixXd(0, 1), VectorXd(0)};
  const blr::LinearPosterior post = per_task_posterior(b, t);
  const auto prior = features::default_prior(b);
  EXPECT_EQ(post.mu, prior.mean);
  EXPECT_EQ(post.sigma, prior.cov);
}

TEST(PerTaskPosterior, DuplicatePointEqualsTwoUpdates) {
  const BasisSet b = sor(3);
  TaskDataset t{"t", MatrixXd::Constant(2, 1, 0.4), VectorXd::Constant(2, 0.7)};
  const blr::LinearPosterior batch = per_task_posterior(b, t);
  blr::LinearPosterior seq = blr::LinearPosterior::from_prior(features::default_prior(b));
  const VectorXd phi = features::features(b, t.x.row(0));
  seq = blr::blr_update_recursive(seq, phi, 0.7, b.kernel.noise_var());
  seq = blr::blr_update_recursive(seq, phi, 0.7, b.kernel.noise_var());
  EXPECT_LE(rel_err(batch.mu, seq.mu), 1e-6);
}

TEST(PerTaskPosterior, FitReducesTrainingError) {
  Rng rng(3);
  const TaskDataset t = sine_task(rng, "t", 60, 0.2);
  const BasisSet b = sor(8);
  const VectorXd pred = features::feature_matrix(b, t.x) * per_task_posterior(b, t).mu;
  EXPECT_LT((pred - t.y).squaredNorm(), 0.1 * t.y.squaredNorm());
}

TEST(PerTaskPosterior, DimensionMismatchThrows) {
  const TaskDataset t{"t", MatrixXd::Zero(3, 2), VectorXd::Zero(3)};
  EXPECT_THROW(per_task_posterior(sor(3), t), Error);
}

TEST(NegativeElbo, EmptyDatasetIsZero) {
  MetaDataset d;
  EXPECT_EQ(negative_elbo(sor(3), d), 0.0);
}

TEST(NegativeElbo, MatchesMonteCarloOracle) {
  const MetaDataset d = sine_tasks(5, 2, 12);
  const BasisSet b = sor(5, 0.6, 1.2, 0.05);
  const double exact = negative_elbo(b, d);

  // Oracle: expected log-likelihood by sampling weights, KL through the dense routine.
  Rng rng(99);
  double oracle = 0.0, var_sum = 0.0;
  for (const auto& t : d.tasks) {
    const MatrixXd phi = features::feature_matrix(b, t.x);
    const blr::LinearPosterior post = per_task_posterior(b, t);
    const long count = 100000;
    const MatrixXd w = gauss::sample_mvn({post.mu, post.sigma}, count, rng);
    const double s2 = b.kernel.noise_var();
    double sum = 0.0, sum_sq = 0.0;
    for (long k = 0; k < count; ++k) {
      const VectorXd f = phi * w.row(k).transpose();
      const double ll = -0.5 * ((t.y - f).squaredNorm() / s2 + t.size() * std::log(2.0 * std::numbers::pi * s2));
      sum += ll;
      sum_sq += ll * ll;
    }
    const double mean = sum / count;
    var_sum += (sum_sq / count - mean * mean) / count;
    const gauss::MvNormal q{phi * post.mu, phi * post.sigma * phi.transpose()};
    const gauss::MvNormal p{VectorXd::Zero(t.size()), features::gram(t.x, t.x, b.kernel)};
    oracle += -(mean - gauss::kl_gaussian(q, p));
  }
  EXPECT_NEAR(exact, oracle, 4.0 * std::sqrt(var_sum) + 1e-6 * std::abs(oracle));
}

TEST(LowRankKl, MatchesDenseKl) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const TaskDataset t = sine_task(rng, "t", 10 + trial, 0.1 * trial);
    const BasisSet b = sor(3 + trial % 4, 0.4 + 0.05 * trial, 0.8, 0.02);
    const MatrixXd phi = features::feature_matrix(b, t.x);
    const blr::LinearPosterior post = per_task_posterior(b, t);
    ElboWorkspace ws;
    const double lr = low_rank_kl(phi, post, ws.prior_factor(t, b.kernel));
    const gauss::MvNormal q{phi * post.mu, phi * post.sigma * phi.transpose()};
    const gauss::MvNormal p{VectorXd::Zero(t.size()), features::gram(t.x, t.x, b.kernel)};
    const double dense = gauss::kl_gaussian(q, p);
    EXPECT_NEAR(lr, dense, 1e-6 * std::max(1.0, std::abs(dense))) << "trial " << trial;
  }
}

TEST(LowRankKl, PriorImpliedQAtDataInducingPoints) {
  Rng rng(7);
  const TaskDataset t = sine_task(rng, "t", 8, 0.0);
  BasisSet b = BasisSet::subset_of_regressors(t.x, KernelHyper::make(VectorXd::Constant(1, 0.7), 1.0, 0.01));
  const blr::LinearPosterior q = blr::LinearPosterior::from_prior(features::default_prior(b));
  ElboWorkspace ws;
  const double kl = low_rank_kl(features::feature_matrix(b, t.x), q, ws.prior_factor(t, b.kernel));
  EXPECT_LE(std::abs(kl), 1e-4);
}

TEST(CentralDifference, ExactOnQuadratic) {
  Rng rng(8);
  const MatrixXd a = mlmpc::testing::random_spd(rng, 4, 1.0);
  const VectorXd c = mlmpc::testing::random_vector(rng, 4);
  auto f = [&](const VectorXd& x) { return 0.5 * x.dot(a * x) + c.dot(x); };
  const VectorXd x0 = mlmpc::testing::random_vector(rng, 4);
  const VectorXd g = central_difference_gradient(f, x0, 1e-4);
  EXPECT_LE((g - (a * x0 + c)).norm(), 1e-6 * (a * x0 + c).norm());
}

TEST(ElboGradient, ConsistentAcrossStepSizes) {
  const MetaDataset d = sine_tasks(9, 2, 15);
  const BasisSet b = sor(4, 0.6, 1.0, 0.05);
  const VectorXd g1 = elbo_gradient(b, d, 1e-3);
  const VectorXd g2 = elbo_gradient(b, d, 5e-4);
  EXPECT_LE((g1 - g2).norm(), 1e-3 * std::max(1.0, g2.norm()));
}

TEST(ElboGradient, EmptyDataZeroAndStepValidated) {
  MetaDataset d;
  EXPECT_EQ(elbo_gradient(sor(3), d, 1e-4).norm(), 0.0);
  EXPECT_THROW(elbo_gradient(sor(3), d, 0.5), Error);
}

TEST(MetaTrain, EmptyDatasetLeavesBasis) {
  MetaDataset d;
  const BasisSet b = sor(3);
  const MetaTrainResult r = meta_train(d, MetaTrainConfig{}, b);
  ASSERT_EQ(r.trace.size(), 1u);
  EXPECT_EQ(r.trace[0].loss, 0.0);
  EXPECT_EQ(features::pack_hyper(r.basis), features::pack_hyper(b));
}

TEST(MetaTrain, LossStrictlyDecreasesAndRespectsBounds) {
  const MetaDataset d = sine_tasks(10, 3, 25);
  MetaTrainConfig cfg;
  cfg.max_iters = 25;
  for (Optimizer opt : {Optimizer::GradientDescentWithBacktracking, Optimizer::AdaptivePerParameter}) {
    cfg.optimizer = opt;
    const BasisSet b0 = initial_sor_basis(d, cfg.init);
    const MetaTrainResult r = meta_train(d, cfg, b0);
    ASSERT_GE(r.trace.size(), 2u);
    for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_LT(r.trace[i].loss, r.trace[i - 1].loss);
    const VectorXd theta = features::pack_hyper(r.basis);
    const ParamBounds bounds = default_bounds(b0);
    EXPECT_TRUE((theta.array() >= bounds.lower.array()).all());
    EXPECT_TRUE((theta.array() <= bounds.upper.array()).all());
    EXPECT_NEAR(r.trace.back().loss, negative_elbo(r.basis, d), 1e-9 * std::abs(r.trace.back().loss));
  }
}

TEST(MetaTrain, ConfigValidation) {
  MetaTrainConfig cfg;
  cfg.grad_step = 0.2;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = MetaTrainConfig{};
  cfg.max_iters = 0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(MetaTrain, TaskOrderDoesNotMatter) {
  MetaDataset d = sine_tasks(11, 3, 20);
  MetaTrainConfig cfg;
  cfg.max_iters = 5;
  const BasisSet b0 = initial_sor_basis(d, cfg.init);
  const MetaTrainResult a = meta_train(d, cfg, b0);
  std::reverse(d.tasks.begin(), d.tasks.end());
  const MetaTrainResult r = meta_train(d, cfg, b0);
  EXPECT_EQ(features::pack_hyper(a.basis), features::pack_hyper(r.basis));
}

TEST(MetaTrain, SubsamplingIsSeededAndOrdered) {
  const MetaDataset d = sine_tasks(12, 2, 50);
  std::vector<SubsampleRecord> rec_a, rec_b;
  const MetaDataset a = cap_task_sizes(d, 20, 3, &rec_a);
  const MetaDataset b = cap_task_sizes(d, 20, 3, &rec_b);
  ASSERT_EQ(rec_a.size(), 2u);
  EXPECT_EQ(rec_a[0].kept_rows, rec_b[0].kept_rows);
  EXPECT_EQ(a.tasks[0].size(), 20);
  EXPECT_TRUE(std::is_sorted(rec_a[0].kept_rows.begin(), rec_a[0].kept_rows.end()));
  EXPECT_EQ(a.tasks[1].y, b.tasks[1].y);
}

TEST(TaskCsv, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "mlmpc_test_meta_csv";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const MetaDataset d = sine_tasks(13, 2, 7);
  for (const auto& t : d.tasks) write_task_csv(dir / (t.task_id + ".csv"), t);
  const MetaDataset back = load_meta_dataset(dir);
  ASSERT_EQ(back.tasks.size(), 2u);
  EXPECT_EQ(back.tasks[0].task_id, "task_0");
  EXPECT_LE((back.tasks[1].y - d.tasks[1].y).cwiseAbs().maxCoeff(), 1e-11);
  io::write_text(dir / "bad.csv", "a,b\n1,2\n");
  EXPECT_THROW(load_meta_dataset(dir), Error);
  std::filesystem::remove_all(dir);
}
