#include <gtest/gtest.h>

#include <cmath>

#include "test_models.hpp"
#include "treednn/treednn.hpp"

using namespace treednn;

namespace {

std::vector<float> vec(const Tensor& x) { return {x.data().begin(), x.data().end()}; }

std::vector<TaskDataset> blob_tasks(std::size_t k, std::size_t K, std::size_t n, double spread, std::uint64_t seed) {
  std::vector<TaskDataset> out;
  for (std::size_t i = 0; i < k; ++i) {
    out.push_back(testmodels::blobs(testmodels::task_name(i), K, n, {3, 8, 8}, spread, seed + i));
  }
  return out;
}

TrainConfig small_config(std::uint64_t seed) {
  TrainConfig c;
  c.batch_size = 12;
  c.epochs_general = 2;
  c.epochs_special = 2;
  c.seed = seed;
  c.track_accuracy = false;
  return c;
}

// Learnable (non-buffer) parameter values by name.
std::map<std::string, std::vector<float>> learnable(const TreeModel& m) {
  std::map<std::string, std::vector<float>> out;
  for (const Param* p : m.parameters())
    if (!p->buffer) out[p->name] = vec(p->value);
  return out;
}

std::map<std::string, std::vector<float>> all_values(const TreeModel& m) {
  std::map<std::string, std::vector<float>> out;
  for (const Param* p : m.parameters()) out[p->name] = vec(p->value);
  return out;
}

}  // namespace

TEST(NetLoss, WeightedSum) {
  const std::vector<Tensor> losses{Tensor::scalar(1), Tensor::scalar(3)};
  const std::vector<float> w{0.5f, 0.5f};
  EXPECT_EQ(net_loss(losses, w).item(), 2.0f);
}

TEST(NetLoss, SingleTaskIdentity) {
  const std::vector<Tensor> losses{Tensor::scalar(0.8125f)};
  const std::vector<float> w{1.0f};
  EXPECT_EQ(net_loss(losses, w).item(), 0.8125f);
}

TEST(NetLoss, ZeroLosses) {
  const std::vector<Tensor> losses{Tensor::scalar(0), Tensor::scalar(0), Tensor::scalar(0)};
  const std::vector<float> w{0.3f, 7.0f, 0.1f};
  EXPECT_EQ(net_loss(losses, w).item(), 0.0f);
}

TEST(NetLoss, LengthMismatchRejected) {
  const std::vector<Tensor> losses{Tensor::scalar(1), Tensor::scalar(3)};
  const std::vector<float> w{1.0f};
  EXPECT_THROW(net_loss(losses, w), DimensionError);
}

TEST(GeneralizedStep, ZeroWeightsLeaveParametersUnchanged) {
  TreeModel m = model_creation(testmodels::reference_spec(2, 3), 4);
  const auto data = blob_tasks(2, 3, 24, 1.0, 1);
  const auto batch = fed_batch_prepare(data, 8, 3)[0];
  const auto before = learnable(m);
  Sgd<float> opt(0.1f, 0.9f);
  const std::vector<float> w{0.0f, 0.0f};
  generalized_step(m, batch, w, opt);
  // BatchNorm running statistics still track the batch; learnable values do not move.
  EXPECT_EQ(learnable(m), before);
}

TEST(GeneralizedStep, SingleTaskMatchesPlainSgd) {
  const auto spec = testmodels::reference_spec(1, 4);
  TreeModel tree = model_creation(spec, 6);
  TreeModel oracle = model_creation(spec, 6);
  const auto data = blob_tasks(1, 4, 40, 1.0, 2);
  const auto batch = fed_batch_prepare(data, 10, 5)[1];

  Sgd<float> opt_tree(0.05f, 0.9f), opt_oracle(0.05f, 0.9f);
  const std::vector<float> w{1.0f};
  for (int step = 0; step < 3; ++step) {
    generalized_step(tree, batch, w, opt_tree);
    const Tensor logits = oracle.forward_full("t0", batch.inputs, Mode::kTrain);
    const Tensor loss = ops::cross_entropy(logits, std::span<const std::size_t>(batch.labels[0]));
    backward(loss);
    opt_oracle.step(oracle.parameters());
  }
  EXPECT_EQ(all_values(tree), all_values(oracle));
}

TEST(GeneralizedStep, TrunkGradientIsWeightedSumOfBranchGradients) {
  const auto spec = testmodels::reference_spec(3, 3);
  const auto data = blob_tasks(3, 3, 30, 1.0, 7);
  const auto batch = fed_batch_prepare(data, 12, 9)[0];
  const std::vector<float> w{0.2f, 0.5f, 0.3f};

  TreeModel joint = model_creation(spec, 8);
  backward(net_loss(branch_losses(joint, batch, Mode::kTrain), w));
  std::map<std::string, std::vector<double>> combined;
  for (std::size_t j = 0; j < 3; ++j) {
    TreeModel iso = model_creation(spec, 8);
    backward(branch_losses(iso, batch, Mode::kTrain)[j]);
    for (const Param* p : iso.trunk().parameters()) {
      if (!p->value.has_grad()) continue;
      auto& acc = combined[p->name];
      acc.resize(p->value.numel(), 0.0);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += double(w[j]) * p->value.grad()[i];
    }
  }
  double diff = 0, na = 0, nb = 0;
  for (const Param* p : joint.trunk().parameters()) {
    if (p->buffer) continue;
    ASSERT_TRUE(p->value.has_grad()) << p->name;
    const auto& c = combined.at(p->name);
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double a = p->value.grad()[i];
      diff += (a - c[i]) * (a - c[i]);
      na += a * a;
      nb += c[i] * c[i];
    }
  }
  EXPECT_LT(std::sqrt(diff) / (std::sqrt(na) + std::sqrt(nb)), 1e-5);
}

TEST(GeneralizedTrain, ZeroEpochsIsNoOp) {
  TreeModel m = model_creation(testmodels::reference_spec(2, 3), 1);
  const auto data = blob_tasks(2, 3, 24, 1.0, 1);
  const auto before = all_values(m);
  TrainConfig c = small_config(1);
  c.epochs_general = 0;
  const auto report = generalized_train(m, data, c);
  EXPECT_TRUE(report.records.empty());
  EXPECT_EQ(all_values(m), before);
}

TEST(GeneralizedTrain, NetLossDecreases) {
  TreeModel m = model_creation(testmodels::reference_spec(2, 4), 3);
  const auto data = blob_tasks(2, 4, 400, 0.5, 4);
  TrainConfig c = small_config(3);
  c.batch_size = 32;
  c.epochs_general = 6;
  const auto losses = generalized_train(m, data, c).net_losses();
  ASSERT_EQ(losses.size(), 6u);
  EXPECT_LT(losses.back(), losses.front());
}

TEST(GeneralizedTrain, SameSeedSameReport) {
  const auto data = blob_tasks(2, 3, 48, 1.0, 5);
  TrainConfig c = small_config(11);
  c.track_accuracy = true;
  TreeModel a = model_creation(testmodels::reference_spec(2, 3), 2);
  TreeModel b = model_creation(testmodels::reference_spec(2, 3), 2);
  EXPECT_EQ(generalized_train(a, data, c).to_text(), generalized_train(b, data, c).to_text());
  EXPECT_EQ(digest(a.parameters()), digest(b.parameters()));
}

TEST(GeneralizedTrain, DatasetOrderMustMatchBranches) {
  TreeModel m = model_creation(testmodels::reference_spec(2, 3), 2);
  auto data = blob_tasks(2, 3, 24, 1.0, 5);
  std::swap(data[0], data[1]);
  EXPECT_THROW(generalized_train(m, data, small_config(1)), ConfigError);
}

TEST(TrainConfig, ValidationRules) {
  TrainConfig c;
  c.batch_size = 10;
  EXPECT_THROW(c.validate(3), ConfigError);
  c.batch_size = 12;
  EXPECT_NO_THROW(c.validate(3));
  c.branch_weights = {1.0f, 1.0f};
  EXPECT_THROW(c.validate(3), ConfigError);
  c.branch_weights = {1.0f, 0.0f, 1.0f};
  EXPECT_THROW(c.validate(3), ConfigError);
  c.branch_weights = {};
  c.lr_general = 0;
  EXPECT_THROW(c.validate(3), ConfigError);
  EXPECT_EQ(TrainConfig{}.weights_for(4), (std::vector<float>(4, 0.25f)));
}

TEST(Freeze, TrunkDigestSurvivesSteps) {
  TreeModel m = model_creation(testmodels::reference_spec(2, 3), 5);
  freeze_trunk(m);
  freeze_trunk(m);  // idempotent
  const auto trunk_before = digest(m.trunk().parameters());
  const auto data = blob_tasks(2, 3, 24, 1.0, 1);
  Sgd<float> opt(0.1f, 0.9f);
  const std::vector<float> w{0.5f, 0.5f};
  for (const auto& batch : fed_batch_prepare(data, 8, 1)) generalized_step(m, batch, w, opt);
  EXPECT_EQ(digest(m.trunk().parameters()), trunk_before);
  EXPECT_TRUE(m.trunk().frozen());
  for (const Param* p : m.trunk().parameters()) EXPECT_FALSE(p->trainable) << p->name;
}

TEST(Freeze, BranchesStillReceiveGradients) {
  TreeModel m = model_creation(testmodels::reference_spec(2, 3), 5);
  freeze_trunk(m);
  const auto data = blob_tasks(2, 3, 24, 1.0, 1);
  const auto batch = fed_batch_prepare(data, 8, 1)[0];
  backward(net_loss(branch_losses(m, batch, Mode::kTrain), std::vector<float>{0.5f, 0.5f}));
  for (const auto& b : m.branches()) {
    double norm = 0;
    for (const Param* p : b.parameters())
      for (float g : p->value.grad()) norm += double(g) * g;
    EXPECT_GT(norm, 0.0) << b.task_id();
  }
  for (const Param* p : m.trunk().parameters()) EXPECT_FALSE(p->value.has_grad()) << p->name;
}

TEST(SpecializedTrain, TrunkUnchangedAndBranchesIsolated) {
  TreeModel m = model_creation(testmodels::reference_spec(3, 3), 2);
  const auto data = blob_tasks(3, 3, 36, 1.0, 3);
  const auto c = small_config(4);
  generalized_train(m, data, c);
  const auto trunk_before = digest(m.trunk().parameters());
  const auto report = specialized_train(m, data, c);
  EXPECT_EQ(report.trunk_before, trunk_before);
  EXPECT_EQ(report.trunk_after, trunk_before);
  EXPECT_EQ(digest(m.trunk().parameters()), trunk_before);
  ASSERT_EQ(report.task_loops.size(), 3u);
  for (const auto& loop : report.task_loops) {
    for (const auto& [name, d] : loop.before) {
      if (name == "branch." + loop.task) {
        EXPECT_NE(loop.after.at(name), d) << loop.task;
      } else {
        EXPECT_EQ(loop.after.at(name), d) << loop.task << " touched " << name;
      }
    }
  }
}

TEST(SpecializedTrain, CachedFeaturesMatchRecomputed) {
  const auto spec = testmodels::reference_spec(2, 3);
  const auto data = blob_tasks(2, 3, 50, 1.0, 8);
  TrainConfig c = small_config(5);
  c.batch_size = 8;
  TreeModel a = model_creation(spec, 3);
  TreeModel b = model_creation(spec, 3);
  generalized_train(a, data, c);
  generalized_train(b, data, c);
  c.cache_trunk_features = false;
  specialized_train(a, data, c);
  c.cache_trunk_features = true;
  specialized_train(b, data, c);
  EXPECT_EQ(all_values(a), all_values(b));
}

TEST(SpecializedTrain, BranchResultIndependentOfTaskOrder) {
  // Training task i depends only on (trunk, branch_i, D_i): a model holding
  // only t1 reaches the same branch as the 3-task run.
  const auto spec = testmodels::reference_spec(3, 3);
  const auto data = blob_tasks(3, 3, 30, 1.0, 12);
  const auto c = small_config(6);
  TreeModel full = model_creation(spec, 4);
  specialized_train(full, data, c);

  TreeModel ref = model_creation(spec, 4);
  std::vector<Branch> only;
  only.push_back(ref.branch("t1").clone());
  TreeModel single(ref.trunk().clone(), std::move(only));
  const std::vector<TaskDataset> d1{data[1]};
  specialized_train(single, d1, c);
  EXPECT_EQ(digest(single.branch("t1").parameters()), digest(full.branch("t1").parameters()));
}

TEST(Evaluate, ChanceLevelWhenUntrained) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const TreeModel m = model_creation(testmodels::reference_spec(1, 4), seed);
    const auto ds = testmodels::blobs("t0", 4, 400, {3, 8, 8}, 1.0, 100 + seed);
    const double acc = evaluate(m, ds, "t0").accuracy;
    EXPECT_GE(acc, 0.25 - 0.15) << seed;
    EXPECT_LE(acc, 0.25 + 0.15) << seed;
  }
}

TEST(Evaluate, EmptyDatasetIsError) {
  const TreeModel m = model_creation(testmodels::reference_spec(1, 4), 0);
  const TaskDataset empty{"t0", {3, 8, 8}, 4, {}, {}};
  EXPECT_THROW(evaluate(m, empty, "t0"), ContractError);
}

TEST(Evaluate, SeparableBlobsReachPerfectAccuracy) {
  TreeModel m = model_creation(testmodels::reference_spec(1, 3), 1);
  const std::vector<TaskDataset> data{testmodels::blobs("t0", 3, 150, {3, 8, 8}, 0.0, 21)};
  TrainConfig c = small_config(2);
  c.batch_size = 15;
  c.epochs_general = 10;
  c.epochs_special = 2;
  generalized_train(m, data, c);
  specialized_train(m, data, c);
  EXPECT_EQ(evaluate(m, data[0], "t0").accuracy, 1.0);
}

TEST(PhaseReport, TextFormat) {
  TreeModel m = model_creation(testmodels::reference_spec(2, 3), 1);
  const auto data = blob_tasks(2, 3, 24, 1.0, 1);
  TrainConfig c = small_config(1);
  c.epochs_general = 1;
  c.track_accuracy = true;
  const std::string text = generalized_train(m, data, c).to_text();
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0].rfind("phase=general epoch=1 task=* loss=", 0), 0u) << lines[0];
  EXPECT_NE(lines[0].find("branch=-"), std::string::npos);
  EXPECT_EQ(lines[1].rfind("phase=general epoch=1 task=t0 loss=", 0), 0u) << lines[1];
  EXPECT_NE(lines[1].find(" accuracy=0."), std::string::npos);
}
