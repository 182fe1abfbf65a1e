#pragma once

// Reported component/iteration ablation rows: six metrics in Metric order plus
// the reported average relative gain in percent.

#include <string>
#include <vector>

#include "ovcos/metrics.hpp"

namespace ablation_reference {

struct Row {
    std::string name;
    ovcos::metrics::MetricRow metrics;
    double delta_percent;
};

inline std::vector<Row> rows()
{
    return {
        {"baseline", {0.517, 0.408, 0.374, 0.451, 0.549, 0.359}, 0.0},
        {"plus_p", {0.543, 0.435, 0.346, 0.480, 0.581, 0.383}, 6.3},
        {"plus_pc", {0.550, 0.453, 0.341, 0.491, 0.597, 0.397}, 9.1},
        {"plus_pcd", {0.565, 0.473, 0.336, 0.507, 0.606, 0.422}, 12.6},
        {"plus_pce", {0.567, 0.481, 0.339, 0.511, 0.607, 0.432}, 13.5},
        {"plus_pcde", {0.570, 0.488, 0.338, 0.518, 0.610, 0.436}, 14.5},
        {"addition_fusion", {0.552, 0.457, 0.340, 0.497, 0.599, 0.402}, 9.9},
        {"t1", {0.570, 0.488, 0.338, 0.518, 0.610, 0.436}, 14.5},
        {"t2", {0.579, 0.490, 0.336, 0.520, 0.616, 0.443}, 15.5},
        {"no_mcor", {0.575, 0.487, 0.337, 0.515, 0.611, 0.441}, 14.8},
        {"no_fobj", {0.571, 0.476, 0.339, 0.506, 0.608, 0.434}, 13.4},
        {"t3", {0.576, 0.484, 0.333, 0.514, 0.614, 0.437}, 14.8},
        {"ideal_segmentation", {0.703, 0.703, 0.297, 0.701, 0.701, 0.701}, 51.2},
    };
}

} // namespace ablation_reference
