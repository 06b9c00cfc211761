#include "roadkf/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace roadkf::selection {

namespace {

// Re-shift so the maximum log-belief is exactly 0.
void normalize(ViterbiBelief& b) {
    if (b.logp.empty()) return;
    const double m = *std::max_element(b.logp.begin(), b.logp.end());
    for (double& v : b.logp) v -= m;
}

int argmax_lowest_id(const ViterbiBelief& b) {
    int best = b.ids[0];
    double best_lp = b.logp[0];
    for (std::size_t i = 1; i < b.ids.size(); ++i) {
        if (b.logp[i] > best_lp || (b.logp[i] == best_lp && b.ids[i] < best)) {
            best = b.ids[i];
            best_lp = b.logp[i];
        }
    }
    return best;
}

}  // namespace

double user_heading_cost(const kalman::KfEstimate& est,
                         const roadnet::RoadSegment& r) {
    if (est.speed_horizontal() < kMinHeadingSpeed) return 0.0;
    return geo::heading_cost(est.heading(), r.geometry.heading);
}

double emission(const kalman::KfEstimate& est, const roadnet::RoadSegment& r,
                const EmissionParams& p) {
    const double j_pos = geo::point_segment_distance(est.position(), r.geometry);
    const double j_theta = user_heading_cost(est, r);
    return std::max(1.0 - (p.beta * j_pos + j_theta) / 2.0, p.epsilon);
}

double log_transition(const roadnet::RoadGraph& graph, int from, int to,
                      const EmissionParams& p) {
    const auto hop = roadnet::k_hop(graph, from, p.k);
    const bool legal = std::binary_search(hop.begin(), hop.end(), to);
    return legal ? 0.0 : std::log(p.epsilon);
}

std::optional<int> instant_select(const std::vector<int>& candidates,
                                  const kalman::KfEstimate& est,
                                  const roadnet::RoadGraph& graph) {
    if (candidates.empty()) return std::nullopt;
    int best = candidates[0];
    double best_d = std::numeric_limits<double>::infinity();
    for (int id : candidates) {
        const double d =
            geo::point_segment_distance(est.position(), graph.segment(id).geometry);
        if (d < best_d || (d == best_d && id < best)) {
            best = id;
            best_d = d;
        }
    }
    return best;
}

std::optional<int> viterbi_step(ViterbiBelief& belief,
                                const std::vector<int>& candidates,
                                const kalman::KfEstimate& est,
                                const roadnet::RoadGraph& graph,
                                const EmissionParams& p) {
    if (candidates.empty()) return std::nullopt;

    ViterbiBelief next;
    next.ids = candidates;
    next.logp.resize(candidates.size());

    if (belief.empty()) {
        // Uniform prior over the view: belief is just the emissions.
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            next.logp[i] = std::log(emission(est, graph.segment(candidates[i]), p));
        }
    } else {
        const double log_eps = std::log(p.epsilon);
        // Hop sets of the previous-view segments, computed once per step.
        std::vector<std::vector<int>> hops(belief.ids.size());
        for (std::size_t j = 0; j < belief.ids.size(); ++j) {
            hops[j] = roadnet::k_hop(graph, belief.ids[j], p.k);
        }
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < belief.ids.size(); ++j) {
                const bool legal = std::binary_search(
                    hops[j].begin(), hops[j].end(), candidates[i]);
                best = std::max(best, belief.logp[j] + (legal ? 0.0 : log_eps));
            }
            next.logp[i] =
                best + std::log(emission(est, graph.segment(candidates[i]), p));
        }
    }
    normalize(next);
    belief = std::move(next);
    return argmax_lowest_id(belief);
}

std::vector<int> bidirectional_viterbi(
    const std::vector<std::vector<int>>& candidates_per_epoch,
    const std::vector<kalman::KfEstimate>& ests,
    const roadnet::RoadGraph& graph, const EmissionParams& p) {
    const std::size_t T = ests.size();
    if (candidates_per_epoch.size() != T) {
        throw std::invalid_argument("bidirectional_viterbi: length mismatch");
    }
    if (T == 0) {
        throw std::invalid_argument("bidirectional_viterbi: empty drive");
    }

    const double log_eps = std::log(p.epsilon);

    // Forward pass over the non-empty epochs.
    std::vector<double> score;       // over previous non-empty epoch's candidates
    std::vector<int> prev_ids;
    std::vector<std::vector<int>> backptr(T);  // index into previous candidate list
    std::vector<int> nonempty;

    for (std::size_t t = 0; t < T; ++t) {
        const auto& cands = candidates_per_epoch[t];
        if (cands.empty()) continue;
        std::vector<double> cur(cands.size());
        backptr[t].assign(cands.size(), -1);
        if (prev_ids.empty()) {
            for (std::size_t i = 0; i < cands.size(); ++i) {
                cur[i] = std::log(emission(ests[t], graph.segment(cands[i]), p));
            }
        } else {
            std::vector<std::vector<int>> hops(prev_ids.size());
            for (std::size_t j = 0; j < prev_ids.size(); ++j) {
                hops[j] = roadnet::k_hop(graph, prev_ids[j], p.k);
            }
            for (std::size_t i = 0; i < cands.size(); ++i) {
                double best = -std::numeric_limits<double>::infinity();
                int best_j = 0;
                for (std::size_t j = 0; j < prev_ids.size(); ++j) {
                    const bool legal = std::binary_search(
                        hops[j].begin(), hops[j].end(), cands[i]);
                    const double s = score[j] + (legal ? 0.0 : log_eps);
                    if (s > best) {
                        best = s;
                        best_j = static_cast<int>(j);
                    }
                }
                cur[i] = best + std::log(emission(ests[t], graph.segment(cands[i]), p));
                backptr[t][i] = best_j;
            }
        }
        score = std::move(cur);
        prev_ids = cands;
        nonempty.push_back(static_cast<int>(t));
    }

    std::vector<int> labels(T, -1);
    if (!nonempty.empty()) {
        // Backtrack from the final argmax (ties: lowest id).
        int idx = 0;
        for (std::size_t i = 1; i < score.size(); ++i) {
            if (score[i] > score[idx] ||
                (score[i] == score[idx] && prev_ids[i] < prev_ids[idx])) {
                idx = static_cast<int>(i);
            }
        }
        for (auto it = nonempty.rbegin(); it != nonempty.rend(); ++it) {
            const int t = *it;
            labels[t] = candidates_per_epoch[t][idx];
            idx = backptr[t][idx];
        }
        // Empty epochs inherit the nearest earlier selection, or the first
        // later one at the head of the drive.
        int last = -1;
        for (std::size_t t = 0; t < T; ++t) {
            if (labels[t] >= 0) last = labels[t];
            else if (last >= 0) labels[t] = last;
        }
        int next = -1;
        for (std::size_t t = T; t-- > 0;) {
            if (labels[t] >= 0) next = labels[t];
            else labels[t] = next;
        }
    }
    return labels;
}

std::vector<int> bidirectional_viterbi(const std::vector<kalman::KfEstimate>& ests,
                                       const roadnet::RoadGraph& graph,
                                       const EmissionParams& p,
                                       double fov_radius) {
    std::vector<std::vector<int>> cands(ests.size());
    for (std::size_t t = 0; t < ests.size(); ++t) {
        cands[t] = roadnet::field_of_view(graph, ests[t].position(), fov_radius);
    }
    return bidirectional_viterbi(cands, ests, graph, p);
}

double path_score(const std::vector<int>& path,
                  const std::vector<std::vector<int>>& candidates_per_epoch,
                  const std::vector<kalman::KfEstimate>& ests,
                  const roadnet::RoadGraph& graph, const EmissionParams& p) {
    if (path.size() != ests.size() || path.size() != candidates_per_epoch.size()) {
        throw std::invalid_argument("path_score: length mismatch");
    }
    double total = 0.0;
    int prev = -1;
    for (std::size_t t = 0; t < path.size(); ++t) {
        if (candidates_per_epoch[t].empty()) continue;
        const int id = path[t];
        total += std::log(emission(ests[t], graph.segment(id), p));
        if (prev >= 0) total += log_transition(graph, prev, id, p);
        prev = id;
    }
    return total;
}

}  // namespace roadkf::selection
