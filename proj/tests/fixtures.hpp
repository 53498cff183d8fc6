#pragma once

#include <vector>

#include "dnspot/geometry.hpp"
#include "dnspot/random.hpp"

namespace fixture {

/// A roughly horizontal random instance inside the unit square.
inline dnspot::TextInstance random_instance(dnspot::Rng& rng, int alphabet_size, int max_len = 5,
                                            dnspot::InstanceId id = 0) {
  dnspot::ControlPoints<double> center;
  const double x0 = rng.uniform(0.05, 0.4);
  const double w = rng.uniform(0.2, 0.5);
  const double y = rng.uniform(0.2, 0.8);
  for (int i = 0; i < 4; ++i) center.row(i) << x0 + w * i / 3.0, y + rng.uniform(-0.05, 0.05);
  const double h = rng.uniform(0.02, 0.06);
  dnspot::TextInstance inst;
  inst.top = dnspot::Bezier(center.rowwise() - Eigen::RowVector2d(rng.uniform(-0.01, 0.01), h / 2));
  inst.bottom = dnspot::Bezier(center.rowwise() + Eigen::RowVector2d(rng.uniform(-0.01, 0.01), h / 2));
  const int len = rng.uniform_int(1, max_len);
  for (int k = 0; k < len; ++k) inst.transcript.push_back(rng.uniform_int(0, alphabet_size - 1));
  inst.id = id;
  return inst;
}

inline std::vector<dnspot::TextInstance> random_instances(dnspot::Rng& rng, int count, int alphabet_size,
                                                          int max_len = 5) {
  std::vector<dnspot::TextInstance> out;
  for (int i = 0; i < count; ++i) out.push_back(random_instance(rng, alphabet_size, max_len, 100 + i));
  return out;
}

}  // namespace fixture
