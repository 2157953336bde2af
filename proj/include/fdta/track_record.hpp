#pragma once

// One output row of the tracker and the unit of metric evaluation
// (MOTChallenge conventions: 1-based frames and ids).

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fdta/geometry.hpp"

namespace fdta::track {

struct TrackRecord {
  std::int64_t frame = 0;
  std::int64_t id = 0;
  geom::Box2D box;
  double confidence = 1.0;
};

inline void validate_records(const std::vector<TrackRecord>& records, const char* what) {
  for (const auto& r : records) {
    if (r.frame < 1 || r.id < 1)
      throw std::invalid_argument(std::string(what) + ": frames and ids must be >= 1");
    if (!r.box.valid()) throw std::invalid_argument(std::string(what) + ": invalid box");
  }
}

}  // namespace fdta::track
