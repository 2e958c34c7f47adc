#include <agnocomm/common.hpp>
#include <agnocomm/stats.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using namespace agnocomm;

TEST(Percentile, HandComputedValues) {
  const std::vector<double> xs{5, 1, 4, 2, 3};
  // position q/100 * (n - 1) on the sorted list, linear in between
  EXPECT_NEAR(stats::percentile(xs, 2.5), 1.1, 1e-12);
  EXPECT_NEAR(stats::percentile(xs, 97.5), 4.9, 1e-12);
  EXPECT_EQ(stats::percentile(xs, 50), 3.0);
  EXPECT_EQ(stats::percentile(xs, 0), 1.0);
  EXPECT_EQ(stats::percentile(xs, 100), 5.0);
  EXPECT_THROW(stats::percentile(xs, 101), ConfigError);
  EXPECT_THROW(stats::percentile({}, 50), ConfigError);
}

TEST(Interval, SingleValueCollapses) {
  const std::vector<double> one{2.5};
  const auto ci = stats::central_95(one);
  EXPECT_EQ(ci.mean, 2.5);
  EXPECT_EQ(ci.lower, 2.5);
  EXPECT_EQ(ci.upper, 2.5);
}

TEST(Moments, PopulationStd) {
  const std::vector<double> xs{2, 4, 4, 4, 5, 5, 7, 9};
  EXPECT_EQ(stats::mean(xs), 5.0);
  EXPECT_EQ(stats::population_std(xs), 2.0);
}

TEST(FinalDecile, LastTenthSkippingNonFinite) {
  std::vector<double> xs;
  for (int i = 0; i < 25; ++i) xs.push_back(i);
  EXPECT_EQ(stats::final_decile_mean(xs), 23.0);  // last 3
  xs[24] = std::nan("");
  EXPECT_EQ(stats::final_decile_mean(xs), 22.5);
  EXPECT_EQ(stats::final_decile_mean(std::vector<double>{7.0}), 7.0);
  EXPECT_TRUE(std::isnan(stats::finite_mean(std::vector<double>{std::nan("")})));
}
