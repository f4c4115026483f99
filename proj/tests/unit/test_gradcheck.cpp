#include <gtest/gtest.h>

#include <cmath>

#include "l2v/gradcheck.hpp"
#include "l2v/ops.hpp"
#include "l2v/selfcheck.hpp"

using namespace l2v;

TEST(GradCheck, LinearFunctionExact) {
  Tensor<double> x({5}, {0.3, -1.0, 2.0, 4.5, -0.25}, true);
  const auto r = grad_check<double>([&] { return sum(scale(x, 3.0)); }, x, 1e-3, 1e-6);
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.max_rel_err, 1e-9);
  EXPECT_EQ(r.coords.size(), 5u);
}

TEST(GradCheck, RelativeErrorDefinition) {
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(-1.0, 1.0), 2.0);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-10), 1e-10 / 1e-8);
}

TEST(GradCheck, DetectsWrongGradient) {
  // sum(x^2) with a backward that is off by a factor of 2
  Tensor<double> x({3}, {0.5, 1.0, 2.0}, true);
  auto wrong = [&] {
    Tensor<double> y = Tensor<double>({1}, {x[0] * x[0] + x[1] * x[1] + x[2] * x[2]});
    if (auto* tape = Tape<double>::active()) {
      auto sx = x.shared_storage(), sy = y.shared_storage();
      tape->record(sy, {sx}, [sx, sy] {
        if (sx->grad.empty()) sx->grad.assign(sx->data.size(), 0.0);
        for (std::size_t i = 0; i < sx->data.size(); ++i) sx->grad[i] += sy->grad[0] * 4.0 * sx->data[i];
      }, "wrong_square");
    }
    return y;
  };
  const auto r = grad_check<double>(wrong, x, 1e-5, 1e-6);
  EXPECT_FALSE(r.pass);
  EXPECT_NEAR(r.max_rel_err, 0.5, 1e-6);
}

TEST(GradCheck, KinkIsFlaggedNotFailed) {
  Tensor<double> x({3}, {0.0, 1.0, -2.0}, true);
  const auto r = grad_check<double>([&] { return sum(relu(x)); }, x, 1e-3, 1e-6);
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(r.flagged, 1u);
  for (const auto& c : r.coords) EXPECT_EQ(c.non_differentiable, c.index == 0);
}

TEST(GradCheck, NondeterministicFunctionRejected) {
  Tensor<double> x({2}, {1.0, 2.0}, true);
  int calls = 0;
  auto f = [&] { return sum(scale(x, static_cast<double>(++calls))); };
  EXPECT_THROW((void)grad_check<double>(f, x, 1e-3, 1e-6), DeterminismError);
}

TEST(GradCheck, RejectsBadStep) {
  Tensor<double> x({1}, {1.0}, true);
  EXPECT_THROW((void)grad_check<double>([&] { return sum(x); }, x, 0.0, 1e-6), ConfigError);
}

TEST(GradCheck, FivePointStencilExactOnQuartic) {
  // the fourth-order stencil has no truncation error up to degree 4
  Tensor<double> x({1}, {0.7}, true);
  GradCheckOptions o;
  o.step = 0.1;
  o.tolerance = 1e-9;
  o.stencil = Stencil::Central5;
  const auto r = grad_check<double>([&] { return sum(mul(mul(x, x), mul(x, x))); }, {{"x", x}}, o);
  EXPECT_TRUE(r.pass) << r.max_rel_err;
  o.stencil = Stencil::Central3;
  EXPECT_FALSE(grad_check<double>([&] { return sum(mul(mul(x, x), mul(x, x))); }, {{"x", x}}, o).pass);
}

TEST(GradCheck, RestoresPerturbedValues) {
  Tensor<double> x({4}, {1, 2, 3, 4}, true);
  const std::vector<double> before = x.values();
  (void)grad_check<double>([&] { return sum(mul(x, x)); }, x, 1e-2, 1e-6);
  EXPECT_EQ(x.values(), before);
}

TEST(GradCheck, LargestSelectionOrdersByMagnitude) {
  Tensor<double> x({4}, {0.1, -3.0, 2.0, 0.5}, true);
  GradCheckOptions o;
  o.coords_per_tensor = 2;
  o.selection = CoordinateSelection::Largest;
  const auto r = grad_check<double>([&] { return sum(mul(x, x)); }, {{"x", x}}, o);
  ASSERT_EQ(r.coords.size(), 2u);
  EXPECT_EQ(r.coords[0].index, 1u);
  EXPECT_EQ(r.coords[1].index, 2u);
}

TEST(GradCheck, ToyTransformerMntpOneCoordinatePerMatrixF32) {
  GradCheckOptions o = loss_check_options<float>(3);
  o.coords_per_tensor = 1;
  const auto checks = check_loss_gradients<float>(3, o);
  ASSERT_EQ(checks.front().loss, "mntp");
  EXPECT_TRUE(checks.front().report.pass) << checks.front().report.max_rel_err;
  EXPECT_EQ(checks.front().report.coords.size(), weight_layout(gradcheck_model_config()).size());
}
