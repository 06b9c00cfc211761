#pragma once

#include <optional>
#include <vector>

#include "roadkf/kalman.hpp"
#include "roadkf/road_graph.hpp"

// Road-segment selection: nearest-segment, online Viterbi over the field of
// view, and the offline bidirectional-Viterbi labeler. All Viterbi math is
// log-domain with per-step max normalization.

namespace roadkf::selection {

struct EmissionParams {
    double beta = 0.01;    // 1/m, position-cost weight
    double epsilon = 0.01; // probability floor
    int k = 2;             // transition hop count
};

// Below this horizontal speed the KF heading is uninformative and the
// heading cost is zero for every candidate.
constexpr double kMinHeadingSpeed = 0.5;  // m/s

/// Heading mismatch between the filter velocity and a segment; zero at
/// standstill.
double user_heading_cost(const kalman::KfEstimate& est,
                         const roadnet::RoadSegment& r);

/// max(1 - (beta*J_pos + J_theta)/2, epsilon), in [epsilon, 1].
double emission(const kalman::KfEstimate& est, const roadnet::RoadSegment& r,
                const EmissionParams& p);

/// Transition log-probability j -> i: 0 when i is in the directed k-hop
/// neighborhood of j, log(epsilon) otherwise. The floor keeps every path
/// finite so decoding never dead-ends.
double log_transition(const roadnet::RoadGraph& graph, int from, int to,
                      const EmissionParams& p);

/// Nearest candidate by point-segment distance; ties broken by lowest id.
/// Empty candidates -> nullopt (no road update this epoch).
std::optional<int> instant_select(const std::vector<int>& candidates,
                                  const kalman::KfEstimate& est,
                                  const roadnet::RoadGraph& graph);

/// Log-belief over the segments currently in view; max entry is 0.
struct ViterbiBelief {
    std::vector<int> ids;
    std::vector<double> logp;
    bool empty() const { return ids.empty(); }
};

/// One online Viterbi recursion step. An empty candidate list carries the
/// belief unchanged and selects nothing. Returns the argmax segment,
/// ties broken by lowest id.
std::optional<int> viterbi_step(ViterbiBelief& belief,
                                const std::vector<int>& candidates,
                                const kalman::KfEstimate& est,
                                const roadnet::RoadGraph& graph,
                                const EmissionParams& p);

/// Offline max-product decode with explicit per-epoch candidate sets.
/// Epochs with empty candidates inherit the neighboring selection (-1 if no
/// epoch has candidates); transitions bridge empty gaps unchanged.
std::vector<int> bidirectional_viterbi(
    const std::vector<std::vector<int>>& candidates_per_epoch,
    const std::vector<kalman::KfEstimate>& ests,
    const roadnet::RoadGraph& graph, const EmissionParams& p);

/// Convenience overload: candidates from field_of_view at each estimate.
std::vector<int> bidirectional_viterbi(const std::vector<kalman::KfEstimate>& ests,
                                       const roadnet::RoadGraph& graph,
                                       const EmissionParams& p,
                                       double fov_radius = 50.0);

/// Total log-score of a label sequence: sum of log emissions plus log
/// transitions between consecutive selections (epochs with empty candidate
/// sets are skipped, matching the decoder's carry-over behavior).
double path_score(const std::vector<int>& path,
                  const std::vector<std::vector<int>>& candidates_per_epoch,
                  const std::vector<kalman::KfEstimate>& ests,
                  const roadnet::RoadGraph& graph, const EmissionParams& p);

}  // namespace roadkf::selection
