#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "roadkf/geo.hpp"

// Road-network representation in dual form: nodes are short road segments,
// edges are shared primal endpoints. Travel direction on oneway segments is
// normalized at ingestion so geometry always runs a -> b in the legal
// direction.

namespace roadkf::roadnet {

constexpr int kRoadTypeCount = 15;  // 14 named types + default bucket
constexpr int kDefaultRoadType = kRoadTypeCount - 1;
constexpr double kDefaultMaxSpeed = 13.9;  // m/s, 50 km/h
constexpr int kDefaultLanes = 1;
constexpr std::size_t kFieldOfViewCap = 128;

/// Index of a road-type category string; unknown strings map to the default
/// bucket (kDefaultRoadType).
int road_type_index(const std::string& road_type);
const std::array<const char*, kRoadTypeCount>& road_type_names();

/// One primal edge, as read from a network file or emitted by the simulator.
struct RawRoad {
    geo::EnuPoint a;
    geo::EnuPoint b;
    std::string road_type;  // empty → default bucket
    std::optional<int> lanes;
    std::optional<double> max_speed;  // m/s
    std::optional<bool> oneway;
    bool dir_ab = true;  // when oneway: legal travel is a→b if true, b→a otherwise
};

struct RoadSegment {
    int id = 0;
    geo::Segment geometry;
    int lanes = kDefaultLanes;
    double max_speed = kDefaultMaxSpeed;
    int road_type = kDefaultRoadType;
    int oneway = 0;  // 1: travel only geometry.a -> geometry.b
    std::array<double, kRoadTypeCount> road_type_onehot{};
    std::array<double, 2> heading_sincos{};  // sin, cos of geometry.heading
};

/// Immutable after construction. Adjacency is stored as sorted neighbor
/// lists; adjacent() is the binary N x N view.
class RoadGraph {
  public:
    RoadGraph() = default;

    const std::vector<RoadSegment>& segments() const { return segments_; }
    const RoadSegment& segment(int id) const;
    int size() const { return static_cast<int>(segments_.size()); }

    /// Undirected dual adjacency: segments share a primal endpoint.
    bool adjacent(int i, int j) const;
    /// Directed dual adjacency: legal travel from i into j.
    bool directed_adjacent(int i, int j) const;

    const std::vector<int>& neighbors(int id) const;
    const std::vector<int>& out_neighbors(int id) const;
    const std::vector<int>& in_neighbors(int id) const;

    friend RoadGraph to_dual_graph(const std::vector<RawRoad>& roads);

  private:
    void build_spatial_index();

    std::vector<RoadSegment> segments_;
    std::vector<std::vector<int>> neighbors_;
    std::vector<std::vector<int>> out_neighbors_;
    std::vector<std::vector<int>> in_neighbors_;

    // Uniform-grid spatial hash over segment bounding boxes.
    double cell_size_ = 50.0;
    struct CellKey {
        std::int64_t x, y;
        bool operator==(const CellKey&) const = default;
    };
    struct CellHash {
        std::size_t operator()(const CellKey& k) const;
    };
    std::vector<std::pair<CellKey, std::vector<int>>> cells_;  // built once, sorted
    const std::vector<int>* cell(std::int64_t cx, std::int64_t cy) const;

    friend std::vector<int> field_of_view(const RoadGraph& g,
                                          const geo::EnuPoint& pos,
                                          double radius, std::size_t cap);
};

/// Split every road longer than max_len into ceil(L/max_len) equal chained
/// pieces; features are copied to each piece and total length is preserved.
std::vector<RawRoad> split_segments(const std::vector<RawRoad>& roads,
                                    double max_len = 25.0);

/// One dual node per input road; undirected edge iff two roads share a primal
/// endpoint (1e-6 m quantization), directed edge i->j iff travel from i into
/// j is legal under the oneway orientations.
RoadGraph to_dual_graph(const std::vector<RawRoad>& roads);

/// Segments reachable from r in at most k directed hops, r included.
/// Throws std::out_of_range on an unknown id.
std::vector<int> k_hop(const RoadGraph& g, int r, int k);

/// Ids of all segments within radius meters of pos, sorted by id. If more
/// than cap segments qualify, the cap nearest are kept (then sorted by id).
std::vector<int> field_of_view(const RoadGraph& g, const geo::EnuPoint& pos,
                               double radius = 50.0,
                               std::size_t cap = kFieldOfViewCap);

}  // namespace roadkf::roadnet
