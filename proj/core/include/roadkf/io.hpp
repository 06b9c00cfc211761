#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "roadkf/autodiff.hpp"
#include "roadkf/road_graph.hpp"
#include "roadkf/sim.hpp"
#include "roadkf/tgnn.hpp"

// Durable file formats. Text formats are line-oriented and value-exact
// (floats carry 17 significant digits); checkpoints are binary little-endian
// and round-trip byte-exactly. All writers go through a temp file plus rename
// so readers never observe partial writes. Malformed input raises
// std::runtime_error naming the file and line (or byte offset for binary).

namespace roadkf::io {

// -------- networks (.rnet) --------

struct NetworkData {
    geo::EnuPoint origin;  // frame origin echo; all math stays in local ENU
    std::vector<roadnet::RawRoad> roads;
};

void write_network(const std::string& path, const NetworkData& net);
NetworkData read_network(const std::string& path);

/// Split to <= 25 m pieces and build the dual graph, same pipeline the
/// simulator uses.
roadnet::RoadGraph build_graph(const NetworkData& net);

// -------- drives (.drv) --------

struct DriveFileData {
    sim::ScenarioConfig config;  // scenario echo, re-parsed on load
    std::uint64_t seed = 0;      // per-drive seed (config.seed seeds the network)
    std::string network_ref;     // file name of the network this drive ran on
    std::vector<sim::TruthEpoch> truth;
    std::vector<kalman::GnssEpoch> epochs;  // parallel to truth
};

void write_drive(const std::string& path, const DriveFileData& drive);
/// num_segments >= 0 additionally validates truth segment ids against the
/// referenced network size.
DriveFileData read_drive(const std::string& path, int num_segments = -1);

// -------- per-epoch oracle labels (.lab) --------

struct LabelFileData {
    std::string drive_ref;
    std::vector<int> labels;  // -1: no label at that epoch
};

void write_labels(const std::string& path, const LabelFileData& labels);
LabelFileData read_labels(const std::string& path, int num_segments = -1);

// -------- per-epoch estimates (.res) --------

struct ResultRow {
    std::string method;
    double time = 0.0;
    double east = 0.0;
    double north = 0.0;
    double horizontal_error = 0.0;
};

struct ResultFileData {
    std::string drive_ref;
    std::vector<ResultRow> rows;
};

void write_results(const std::string& path, const ResultFileData& results);
ResultFileData read_results(const std::string& path);

// -------- model checkpoints (.ckpt, binary) --------

struct CheckpointData {
    tgnn::TgnnConfig config;
    std::vector<ad::Tensor> params;
    std::vector<ad::Tensor> bn_state;
    ad::AdamState optimizer;
};

void write_checkpoint(const std::string& path, const CheckpointData& ckpt);
CheckpointData read_checkpoint(const std::string& path);

// -------- key-value scenario configs --------

/// Lines of "key value" (or "key=value"); '#' starts a comment. Duplicate
/// keys keep the last value.
std::map<std::string, std::string> parse_config_file(const std::string& path);

/// Apply one option to a scenario config. Throws std::runtime_error on an
/// unknown key or unparseable value.
void apply_scenario_option(sim::ScenarioConfig& cfg, const std::string& key,
                           const std::string& value);

const char* network_kind_name(sim::NetworkKind kind);
sim::NetworkKind parse_network_kind(const std::string& name);

}  // namespace roadkf::io
