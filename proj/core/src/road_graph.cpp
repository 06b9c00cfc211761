#include "roadkf/road_graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <stdexcept>
#include <unordered_map>

namespace roadkf::roadnet {

namespace {

const std::array<const char*, kRoadTypeCount> kRoadTypes = {
    "motorway",  "motorway_link",  "trunk",    "trunk_link",
    "primary",   "primary_link",   "secondary", "secondary_link",
    "tertiary",  "tertiary_link",  "unclassified", "residential",
    "living_street", "service",    "other",
};

// Endpoints are matched after quantizing to 1e-6 m so pieces produced by
// chained arithmetic still share keys.
struct QPoint {
    std::int64_t e, n;
    bool operator==(const QPoint&) const = default;
};
struct QPointHash {
    std::size_t operator()(const QPoint& p) const {
        std::size_t h = std::hash<std::int64_t>()(p.e);
        h ^= std::hash<std::int64_t>()(p.n) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        return h;
    }
};

QPoint quantize(const geo::EnuPoint& p) {
    return {static_cast<std::int64_t>(std::llround(p.east * 1e6)),
            static_cast<std::int64_t>(std::llround(p.north * 1e6))};
}

}  // namespace

const std::array<const char*, kRoadTypeCount>& road_type_names() {
    return kRoadTypes;
}

int road_type_index(const std::string& road_type) {
    for (int i = 0; i < kRoadTypeCount - 1; ++i) {
        if (road_type == kRoadTypes[i]) return i;
    }
    return kDefaultRoadType;
}

std::vector<RawRoad> split_segments(const std::vector<RawRoad>& roads,
                                    double max_len) {
    if (!(max_len > 0.0)) {
        throw std::invalid_argument("split_segments: max_len must be > 0");
    }
    std::vector<RawRoad> out;
    for (const RawRoad& r : roads) {
        const double len = geo::horizontal_distance(r.a, r.b);
        const int n = std::max(1, static_cast<int>(std::ceil(len / max_len - 1e-12)));
        if (n == 1) {
            out.push_back(r);
            continue;
        }
        // Chained pieces share the exact same computed endpoints so the dual
        // graph connects them.
        geo::EnuPoint prev = r.a;
        for (int i = 1; i <= n; ++i) {
            const double t = static_cast<double>(i) / n;
            const geo::EnuPoint next =
                (i == n) ? r.b : r.a + t * (r.b - r.a);
            RawRoad piece = r;
            piece.a = prev;
            piece.b = next;
            out.push_back(piece);
            prev = next;
        }
    }
    return out;
}

RoadGraph to_dual_graph(const std::vector<RawRoad>& roads) {
    if (roads.empty()) {
        throw std::invalid_argument("to_dual_graph: empty road list");
    }
    RoadGraph g;
    g.segments_.reserve(roads.size());
    for (std::size_t i = 0; i < roads.size(); ++i) {
        const RawRoad& r = roads[i];
        RoadSegment s;
        s.id = static_cast<int>(i);
        // Normalize oneway geometry so legal travel is always a -> b.
        const bool oneway = r.oneway.value_or(false);
        if (oneway && !r.dir_ab) {
            s.geometry = geo::make_segment(r.b, r.a);
        } else {
            s.geometry = geo::make_segment(r.a, r.b);
        }
        s.lanes = r.lanes.value_or(kDefaultLanes);
        s.max_speed = r.max_speed.value_or(kDefaultMaxSpeed);
        s.oneway = oneway ? 1 : 0;
        s.road_type = r.road_type.empty() ? kDefaultRoadType
                                          : road_type_index(r.road_type);
        s.road_type_onehot.fill(0.0);
        s.road_type_onehot[s.road_type] = 1.0;
        s.heading_sincos = {std::sin(s.geometry.heading),
                            std::cos(s.geometry.heading)};
        g.segments_.push_back(s);
    }

    const int n = g.size();
    g.neighbors_.resize(n);
    g.out_neighbors_.resize(n);
    g.in_neighbors_.resize(n);

    std::unordered_map<QPoint, std::vector<int>, QPointHash> endpoint_map;
    for (int i = 0; i < n; ++i) {
        endpoint_map[quantize(g.segments_[i].geometry.a)].push_back(i);
        endpoint_map[quantize(g.segments_[i].geometry.b)].push_back(i);
    }

    auto add_unique = [](std::vector<int>& v, int x) {
        if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
    };

    for (const auto& [key, ids] : endpoint_map) {
        for (std::size_t p = 0; p < ids.size(); ++p) {
            for (std::size_t q = 0; q < ids.size(); ++q) {
                const int i = ids[p], j = ids[q];
                if (i == j) continue;
                add_unique(g.neighbors_[i], j);
                const RoadSegment& si = g.segments_[i];
                const RoadSegment& sj = g.segments_[j];
                const bool exit_ok = !si.oneway || quantize(si.geometry.b) == key;
                const bool enter_ok = !sj.oneway || quantize(sj.geometry.a) == key;
                if (exit_ok && enter_ok) {
                    add_unique(g.out_neighbors_[i], j);
                    add_unique(g.in_neighbors_[j], i);
                }
            }
        }
    }
    for (int i = 0; i < n; ++i) {
        std::sort(g.neighbors_[i].begin(), g.neighbors_[i].end());
        std::sort(g.out_neighbors_[i].begin(), g.out_neighbors_[i].end());
        std::sort(g.in_neighbors_[i].begin(), g.in_neighbors_[i].end());
    }
    g.build_spatial_index();
    return g;
}

const RoadSegment& RoadGraph::segment(int id) const {
    if (id < 0 || id >= size()) {
        throw std::out_of_range("RoadGraph::segment: unknown id " + std::to_string(id));
    }
    return segments_[id];
}

bool RoadGraph::adjacent(int i, int j) const {
    const auto& v = neighbors(i);
    return std::binary_search(v.begin(), v.end(), j);
}

bool RoadGraph::directed_adjacent(int i, int j) const {
    const auto& v = out_neighbors(i);
    return std::binary_search(v.begin(), v.end(), j);
}

const std::vector<int>& RoadGraph::neighbors(int id) const {
    if (id < 0 || id >= size()) {
        throw std::out_of_range("RoadGraph::neighbors: unknown id " + std::to_string(id));
    }
    return neighbors_[id];
}

const std::vector<int>& RoadGraph::out_neighbors(int id) const {
    if (id < 0 || id >= size()) {
        throw std::out_of_range("RoadGraph::out_neighbors: unknown id " + std::to_string(id));
    }
    return out_neighbors_[id];
}

const std::vector<int>& RoadGraph::in_neighbors(int id) const {
    if (id < 0 || id >= size()) {
        throw std::out_of_range("RoadGraph::in_neighbors: unknown id " + std::to_string(id));
    }
    return in_neighbors_[id];
}

std::size_t RoadGraph::CellHash::operator()(const CellKey& k) const {
    std::size_t h = std::hash<std::int64_t>()(k.x);
    h ^= std::hash<std::int64_t>()(k.y) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
}

void RoadGraph::build_spatial_index() {
    std::unordered_map<CellKey, std::vector<int>, CellHash> cells;
    auto cell_of = [this](double v) {
        return static_cast<std::int64_t>(std::floor(v / cell_size_));
    };
    for (const RoadSegment& s : segments_) {
        const auto& g = s.geometry;
        const std::int64_t x0 = cell_of(std::min(g.a.east, g.b.east));
        const std::int64_t x1 = cell_of(std::max(g.a.east, g.b.east));
        const std::int64_t y0 = cell_of(std::min(g.a.north, g.b.north));
        const std::int64_t y1 = cell_of(std::max(g.a.north, g.b.north));
        for (std::int64_t x = x0; x <= x1; ++x) {
            for (std::int64_t y = y0; y <= y1; ++y) {
                cells[{x, y}].push_back(s.id);
            }
        }
    }
    cells_.assign(cells.begin(), cells.end());
    std::sort(cells_.begin(), cells_.end(), [](const auto& a, const auto& b) {
        return a.first.x < b.first.x ||
               (a.first.x == b.first.x && a.first.y < b.first.y);
    });
}

const std::vector<int>* RoadGraph::cell(std::int64_t cx, std::int64_t cy) const {
    const CellKey key{cx, cy};
    auto it = std::lower_bound(
        cells_.begin(), cells_.end(), key, [](const auto& a, const CellKey& k) {
            return a.first.x < k.x || (a.first.x == k.x && a.first.y < k.y);
        });
    if (it == cells_.end() || !(it->first == key)) return nullptr;
    return &it->second;
}

std::vector<int> k_hop(const RoadGraph& g, int r, int k) {
    if (r < 0 || r >= g.size()) {
        throw std::out_of_range("k_hop: unknown id " + std::to_string(r));
    }
    if (k < 0) throw std::invalid_argument("k_hop: k must be >= 0");
    std::vector<int> depth(g.size(), -1);
    std::deque<int> queue{r};
    depth[r] = 0;
    std::vector<int> out{r};
    while (!queue.empty()) {
        const int u = queue.front();
        queue.pop_front();
        if (depth[u] == k) continue;
        for (int v : g.out_neighbors(u)) {
            if (depth[v] < 0) {
                depth[v] = depth[u] + 1;
                out.push_back(v);
                queue.push_back(v);
            }
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<int> field_of_view(const RoadGraph& g, const geo::EnuPoint& pos,
                               double radius, std::size_t cap) {
    if (!(radius > 0.0)) {
        throw std::invalid_argument("field_of_view: radius must be > 0");
    }
    auto cell_of = [&g](double v) {
        return static_cast<std::int64_t>(std::floor(v / g.cell_size_));
    };
    const std::int64_t x0 = cell_of(pos.east - radius);
    const std::int64_t x1 = cell_of(pos.east + radius);
    const std::int64_t y0 = cell_of(pos.north - radius);
    const std::int64_t y1 = cell_of(pos.north + radius);

    std::vector<std::pair<double, int>> hits;  // (distance, id)
    std::vector<char> seen(g.size(), 0);
    for (std::int64_t x = x0; x <= x1; ++x) {
        for (std::int64_t y = y0; y <= y1; ++y) {
            const std::vector<int>* ids = g.cell(x, y);
            if (!ids) continue;
            for (int id : *ids) {
                if (seen[id]) continue;
                seen[id] = 1;
                const double d =
                    geo::point_segment_distance(pos, g.segments()[id].geometry);
                if (d <= radius) hits.emplace_back(d, id);
            }
        }
    }
    if (hits.size() > cap) {
        std::partial_sort(hits.begin(), hits.begin() + cap, hits.end());
        hits.resize(cap);
    }
    std::vector<int> out;
    out.reserve(hits.size());
    for (const auto& [d, id] : hits) out.push_back(id);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace roadkf::roadnet
