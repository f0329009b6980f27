#include "srdit/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace srdit::routing {

int kept_budget(int n_tokens, double drop_ratio) {
  return static_cast<int>(std::lround(n_tokens * (1.0 - drop_ratio)));
}

RoutePlan make_route_plan(int n_tokens, double drop_ratio, std::mt19937_64& rng, bool keep_cls) {
  if (n_tokens < 1) throw std::invalid_argument("make_route_plan: n_tokens must be >= 1");
  if (!(drop_ratio >= 0.0 && drop_ratio < 1.0)) {
    throw std::invalid_argument("make_route_plan: drop_ratio must lie in [0,1)");
  }
  const int budget = kept_budget(n_tokens, drop_ratio);
  if (budget < 1) throw std::invalid_argument("make_route_plan: kept budget rounds to zero");

  RoutePlan plan;
  plan.n_tokens = n_tokens;
  plan.drop_ratio = drop_ratio;
  const int first = keep_cls ? 1 : 0;
  std::vector<int> pool(static_cast<std::size_t>(n_tokens - first));
  std::iota(pool.begin(), pool.end(), first);
  const int draw = budget - first;
  // partial Fisher-Yates: the first `draw` slots become a uniform subset
  for (int i = 0; i < draw; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(pool.size()) - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
  }
  if (keep_cls) plan.kept.push_back(0);
  plan.kept.insert(plan.kept.end(), pool.begin(), pool.begin() + draw);
  std::sort(plan.kept.begin(), plan.kept.end());
  return plan;
}

RoutePlan identity_plan(int n_tokens) {
  RoutePlan plan;
  plan.n_tokens = n_tokens;
  plan.kept.resize(static_cast<std::size_t>(n_tokens));
  std::iota(plan.kept.begin(), plan.kept.end(), 0);
  return plan;
}

std::vector<int> batch_row_index(const RoutePlan& plan, int batch) {
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(batch) * plan.kept.size());
  for (int s = 0; s < batch; ++s) {
    for (int k : plan.kept) idx.push_back(s * plan.n_tokens + k);
  }
  return idx;
}

std::vector<int> rope_ids(const RoutePlan& plan, bool has_cls) {
  std::vector<int> ids;
  ids.reserve(plan.kept.size());
  for (int k : plan.kept) {
    if (has_cls) {
      ids.push_back(k == 0 ? blocks::kNoRope : k - 1);
    } else {
      ids.push_back(k);
    }
  }
  return ids;
}

}  // namespace srdit::routing
