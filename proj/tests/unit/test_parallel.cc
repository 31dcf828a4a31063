#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <vector>

#include "sparseattn/parallel.h"

using sparseattn::parallel_for;

TEST(Parallel, VisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(1000);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i]++; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(Parallel, ZeroItemsIsANoOp) {
  bool called = false;
  parallel_for(0, [&](std::size_t) { called = true; });
  EXPECT_FALSE(called);
}

TEST(Parallel, PropagatesExceptions) {
  EXPECT_THROW(parallel_for(50,
                            [](std::size_t i) {
                              if (i == 17) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

TEST(Parallel, ThreadBudgetFollowsEnvironment) {
  setenv("SPARSEATTN_LAB_THREADS", "3", 1);
  EXPECT_EQ(sparseattn::thread_budget(), 3u);
  setenv("SPARSEATTN_LAB_THREADS", "0", 1);
  EXPECT_GE(sparseattn::thread_budget(), 1u);
  unsetenv("SPARSEATTN_LAB_THREADS");
  EXPECT_GE(sparseattn::thread_budget(), 1u);
}
