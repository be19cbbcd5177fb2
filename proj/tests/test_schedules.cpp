#include <gtest/gtest.h>

#include <cmath>

#include "seat/schedules.hpp"

using namespace seat;

TEST(Schedules, PaperLinearAtFullLength) {
  const Schedule s = paper_linear(120);
  EXPECT_DOUBLE_EQ(s.lr_at(0), 0.01);
  EXPECT_DOUBLE_EQ(s.lr_at(40), 0.01);
  EXPECT_NEAR(s.lr_at(50), 0.0055, 1e-15);
  EXPECT_NEAR(s.lr_at(60), 0.001, 1e-15);
  EXPECT_NEAR(s.lr_at(120), 0.0001, 1e-15);
}

TEST(Schedules, PaperLinearIsContinuous) {
  const Schedule s = paper_linear(30, 0.1);
  for (double e = 0.0; e < 30.0; e += 0.125) EXPECT_LT(std::abs(s.lr_at(e) - s.lr_at(std::min(30.0, e + 1e-9))), 1e-9);
  for (double anchor : {10.0, 15.0}) EXPECT_NEAR(s.lr_at(anchor - 1e-12), s.lr_at(anchor), 1e-12);
}

TEST(Schedules, StaircaseStepsAndRightContinuity) {
  const Schedule s = paper_staircase(120);
  EXPECT_DOUBLE_EQ(s.lr_at(0), 0.01);
  EXPECT_DOUBLE_EQ(s.lr_at(74.999), 0.01);
  EXPECT_NEAR(s.lr_at(75), 0.001, 1e-18);
  EXPECT_NEAR(s.lr_at(90), 0.0001, 1e-18);
  EXPECT_NEAR(s.lr_at(100), 0.00001, 1e-18);
  int jumps = 0;
  double prev = s.lr_at(0);
  for (int k = 1; k <= 12000; ++k) {
    const double v = s.lr_at(k * 0.01);
    jumps += v != prev;
    prev = v;
  }
  EXPECT_EQ(jumps, static_cast<int>(s.anchors.size()) - 1);
}

TEST(Schedules, StaircaseBeforeFirstMilestoneIsBase) {
  const Schedule s = paper_staircase(30, 0.05);
  for (double e = 0.0; e < 18.75; e += 0.5) EXPECT_EQ(s.lr_at(e), 0.05);
}

TEST(Schedules, CosineEndpoints) {
  const Schedule s = cosine_schedule(30, 0.1, 0.001);
  EXPECT_NEAR(s.lr_at(0), 0.1, 1e-12);
  EXPECT_NEAR(s.lr_at(30), 0.001, 1e-12);
  EXPECT_NEAR(s.lr_at(15), 0.0505, 1e-12);
}

TEST(Schedules, CyclicTriangle) {
  const Schedule s = cyclic_schedule(30, 0.1);
  EXPECT_NEAR(s.lr_at(0), 0.1, 1e-15);
  EXPECT_NEAR(s.lr_at(5), 0.004, 1e-15);
  EXPECT_NEAR(s.lr_at(10 - 1e-9), 0.1, 1e-9);
  EXPECT_NEAR(s.lr_at(2.5), 0.052, 1e-15);
}

TEST(Schedules, WarmupRampsThenFollowsStaircase) {
  const Schedule s = warmup_schedule(30, 0.1);
  EXPECT_EQ(s.lr_at(0), 0.0);
  EXPECT_NEAR(s.lr_at(1.5), 0.05, 1e-15);
  EXPECT_NEAR(s.lr_at(3), 0.1, 1e-15);
  EXPECT_NEAR(s.lr_at(20), 0.01, 1e-15);
}

TEST(Schedules, Errors) {
  const Schedule s = paper_linear(30);
  EXPECT_THROW(s.lr_at(-0.1), Error);
  EXPECT_THROW(s.lr_at(30.5), Error);
  EXPECT_THROW(schedule_preset("triangle", 30, 0.1), Error);
  Schedule bad = s;
  bad.anchors[2].position = bad.anchors[1].position;
  EXPECT_THROW(bad.validate(), Error);
  bad = s;
  bad.anchors[0].position = 1.0;
  EXPECT_THROW(bad.validate(), Error);
}
