#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace anytraj {

// K query points in normalized [0,1]^2 image coordinates, anchored at a frame.
struct TrajectoryQuery {
  std::vector<std::array<double, 2>> points;
  int64_t timestep = 0;

  int64_t num_points() const { return static_cast<int64_t>(points.size()); }
};

// H x K x 2 future coordinates for K query points, normalized.
// coords laid out row-major as (h, k, axis).
struct TrajectoryPrediction {
  int64_t horizon = 0;
  int64_t num_points = 0;
  std::vector<double> coords;

  double at(int64_t h, int64_t k, int64_t axis) const {
    return coords[(h * num_points + k) * 2 + axis];
  }
  double& at(int64_t h, int64_t k, int64_t axis) {
    return coords[(h * num_points + k) * 2 + axis];
  }

  static TrajectoryPrediction zeros(int64_t horizon, int64_t num_points) {
    TrajectoryPrediction p;
    p.horizon = horizon;
    p.num_points = num_points;
    p.coords.assign(static_cast<size_t>(horizon * num_points * 2), 0.0);
    return p;
  }
};

// Desk-world action: planar displacement plus a grasp logit.
struct Action {
  double dx = 0.0;
  double dy = 0.0;
  double grasp = 0.0;
};

}  // namespace anytraj
