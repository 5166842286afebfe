#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"
#include "w2w/grad_suite.hpp"

using namespace w2w;

namespace {

struct FaultGuard {
  explicit FaultGuard(const std::string& op) { Tape<double>::fault_op() = op; }
  ~FaultGuard() { Tape<double>::fault_op().clear(); }
};

}  // namespace

TEST(GradCheck, AcceptsCorrectGradient) {
  Rng rng(1);
  const auto r = grad_check(
      "mul_sum", [](const std::vector<Tensor<double>>& in) { return sum(mul(in[0], in[1])); },
      {tst::rand_tensor(rng, {6}), tst::rand_tensor(rng, {6})}, {"a", "b"});
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_rel_error, 1e-8);
  ASSERT_EQ(r.inputs.size(), 2u);
  EXPECT_EQ(r.inputs[1].name, "b");
}

TEST(GradCheck, RejectsCorruptedBackward) {
  Rng rng(2);
  FaultGuard fault("mul");
  const auto r = grad_check(
      "mul_sum", [](const std::vector<Tensor<double>>& in) { return sum(mul(in[0], in[1])); },
      {tst::rand_tensor(rng, {6}), tst::rand_tensor(rng, {6})});
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_rel_error, 0.2, 0.05);
}

TEST(GradCheck, NonFiniteOutputFails) {
  const auto r = grad_check(
      "log_of_negative", [](const std::vector<Tensor<double>>& in) { return sum(mul(in[0], in[0])); },
      {Tensor<double>({1}, {std::nan("")})});
  EXPECT_FALSE(r.passed);
}

TEST(GradSuite, ListsEveryOpOnce) {
  const auto names = grad_suite_names();
  const std::set<std::string> unique(names.begin(), names.end());
  EXPECT_EQ(unique.size(), names.size());
  for (const char* must : {"matmul", "conv2d_circular", "softmax", "layer_norm", "lift", "attention", "infonce",
                           "w2w_cross_attention", "bev_init", "end_to_end"}) {
    EXPECT_EQ(unique.count(must), 1u) << must;
  }
}

TEST(GradSuite, PassesAtFreshSeed) {
  const auto reports = run_grad_suite(7);
  ASSERT_EQ(reports.size(), grad_suite_names().size());
  for (const auto& r : reports) EXPECT_TRUE(r.passed) << r.op << " err " << r.max_rel_error;
}

TEST(GradSuite, EachFaultIsCaughtByItsCase) {
  // Corrupting the rule named after a case must fail that case.
  for (const char* op : {"matmul", "softmax", "layer_norm", "conv2d", "attention", "lift", "resize_bilinear"}) {
    FaultGuard fault(op);
    bool caught = false;
    for (const auto& r : run_grad_suite(3))
      if (r.op.rfind(op, 0) == 0 && !r.passed) caught = true;
    EXPECT_TRUE(caught) << op;
  }
}
