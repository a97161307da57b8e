#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "moegrad/tensor.hpp"

using moegrad::Shape;
using moegrad::Tensor;

TEST(Tensor, FactoriesHaveConsistentShape) {
  EXPECT_EQ(Tensor::zeros({2, 3}).size(), 6u);
  EXPECT_EQ(Tensor::scalar(4.0).rank(), 0u);
  EXPECT_EQ(Tensor::scalar(4.0).item(), 4.0);
  EXPECT_EQ(Tensor::vector({1, 2, 3}).shape(), Shape{3});
  const auto m = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 2u);
  EXPECT_EQ(m.at(1, 0), 3.0);
  const auto id = Tensor::identity(3);
  EXPECT_EQ(id.at(2, 2), 1.0);
  EXPECT_EQ(id.at(0, 2), 0.0);
}

TEST(Tensor, RejectsMismatchedShape) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), std::invalid_argument);
  EXPECT_THROW(Tensor::vector({1, 2}).rows(), std::invalid_argument);
  EXPECT_THROW(Tensor::vector({1, 2}).item(), std::invalid_argument);
}

TEST(Tensor, ShapeString) {
  EXPECT_EQ(moegrad::shape_string({2, 3}), "[2,3]");
  EXPECT_EQ(moegrad::shape_string({}), "[]");
  EXPECT_EQ(moegrad::shape_size({}), 1u);
}

TEST(Tensor, FiniteCheck) {
  auto t = Tensor::vector({1.0, 2.0});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
  t[1] = INFINITY;
  EXPECT_FALSE(t.all_finite());
}

TEST(Tensor, EqualityIsShapeAware) {
  EXPECT_EQ(Tensor::vector({1, 2}), Tensor::vector({1, 2}));
  EXPECT_NE(Tensor::vector({1, 2}), Tensor::matrix(1, 2, {1, 2}));
}
