#include "roadkf/io.hpp"

#include <bit>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <utility>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace roadkf::io {

namespace {

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

[[noreturn]] void fail_at(const std::string& path, std::size_t line,
                          const std::string& msg) {
    throw std::runtime_error(path + ":" + std::to_string(line) + ": " + msg);
}

// Tokenizing line reader. Blank lines and '#' comments are skipped so the
// formats stay hand-editable.
class TextReader {
  public:
    explicit TextReader(const std::string& path) : path_(path), in_(path) {
        if (!in_) throw std::runtime_error(path + ": cannot open for reading");
    }

    bool next(std::vector<std::string>& tokens) {
        std::string line;
        while (std::getline(in_, line)) {
            ++lineno_;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            tokens.clear();
            std::istringstream ss(line);
            std::string tok;
            while (ss >> tok) tokens.push_back(tok);
            if (!tokens.empty()) return true;
        }
        return false;
    }

    std::vector<std::string> expect(const std::string& tag, std::size_t count) {
        std::vector<std::string> tokens;
        if (!next(tokens)) fail("unexpected end of file (expected '" + tag + "')");
        if (tokens[0] != tag)
            fail("expected '" + tag + "', found '" + tokens[0] + "'");
        if (tokens.size() != count + 1)
            fail("'" + tag + "' takes " + std::to_string(count) + " fields, found " +
                 std::to_string(tokens.size() - 1));
        return tokens;
    }

    void expect_eof() {
        std::vector<std::string> tokens;
        if (next(tokens)) fail("trailing content '" + tokens[0] + "'");
    }

    double num(const std::string& tok) {
        char* end = nullptr;
        const double x = std::strtod(tok.c_str(), &end);
        if (end != tok.c_str() + tok.size() || tok.empty())
            fail("bad number '" + tok + "'");
        // ERANGE underflow to a subnormal is fine; infinities and NaNs are not.
        if (!std::isfinite(x)) fail("non-finite number '" + tok + "'");
        return x;
    }

    long long integer(const std::string& tok) {
        char* end = nullptr;
        errno = 0;
        const long long x = std::strtoll(tok.c_str(), &end, 10);
        if (end != tok.c_str() + tok.size() || tok.empty() || errno == ERANGE)
            fail("bad integer '" + tok + "'");
        return x;
    }

    std::uint64_t unsigned_integer(const std::string& tok) {
        char* end = nullptr;
        errno = 0;
        const unsigned long long x = std::strtoull(tok.c_str(), &end, 10);
        if (end != tok.c_str() + tok.size() || tok.empty() || errno == ERANGE ||
            tok[0] == '-')
            fail("bad unsigned integer '" + tok + "'");
        return x;
    }

    [[noreturn]] void fail(const std::string& msg) const {
        fail_at(path_, lineno_, msg);
    }
    std::size_t line() const { return lineno_; }
    const std::string& path() const { return path_; }

  private:
    std::string path_;
    std::ifstream in_;
    std::size_t lineno_ = 0;
};

// Temp-file writer; the target name appears only after a successful commit.
class AtomicWriter {
  public:
    explicit AtomicWriter(const std::string& path)
        : path_(path), tmp_(path + ".tmp"), out_(tmp_, std::ios::binary) {
        if (!out_) throw std::runtime_error(path + ": cannot open for writing");
    }

    ~AtomicWriter() {
        if (!committed_) {
            out_.close();
            std::remove(tmp_.c_str());
        }
    }

    std::ofstream& stream() { return out_; }

    void commit() {
        out_.flush();
        if (!out_) throw std::runtime_error(path_ + ": write failed");
        out_.close();
        if (std::rename(tmp_.c_str(), path_.c_str()) != 0)
            throw std::runtime_error(path_ + ": rename failed");
        committed_ = true;
    }

  private:
    std::string path_;
    std::string tmp_;
    std::ofstream out_;
    bool committed_ = false;
};

std::string opt_int(const std::optional<int>& v) {
    return v ? std::to_string(*v) : "-";
}
std::string opt_num(const std::optional<double>& v) { return v ? fmt(*v) : "-"; }
std::string opt_bool(const std::optional<bool>& v) {
    return v ? (*v ? "1" : "0") : "-";
}

struct QKey {
    std::int64_t e, n;
    bool operator==(const QKey&) const = default;
};
struct QKeyHash {
    std::size_t operator()(const QKey& k) const {
        std::size_t h = std::hash<std::int64_t>()(k.e);
        h ^= std::hash<std::int64_t>()(k.n) + 0x9e3779b97f4a7c15ULL + (h << 6) +
             (h >> 2);
        return h;
    }
};
QKey qkey(const geo::EnuPoint& p) {
    return {static_cast<std::int64_t>(std::llround(p.east * 1e6)),
            static_cast<std::int64_t>(std::llround(p.north * 1e6))};
}

}  // namespace

const char* network_kind_name(sim::NetworkKind kind) {
    switch (kind) {
        case sim::NetworkKind::Grid: return "grid";
        case sim::NetworkKind::Radial: return "radial";
        case sim::NetworkKind::Parallel: return "parallel";
        case sim::NetworkKind::Imported: return "imported";
    }
    return "grid";
}

sim::NetworkKind parse_network_kind(const std::string& name) {
    if (name == "grid") return sim::NetworkKind::Grid;
    if (name == "radial") return sim::NetworkKind::Radial;
    if (name == "parallel") return sim::NetworkKind::Parallel;
    if (name == "imported") return sim::NetworkKind::Imported;
    throw std::runtime_error("unknown network kind '" + name + "'");
}

// -------- networks --------

void write_network(const std::string& path, const NetworkData& net) {
    AtomicWriter w(path);
    auto& out = w.stream();
    out << "roadkf-network 1\n";
    out << "origin " << fmt(net.origin.east) << ' ' << fmt(net.origin.north) << ' '
        << fmt(net.origin.up) << '\n';

    std::unordered_map<QKey, int, QKeyHash> ids;
    std::vector<geo::EnuPoint> nodes;
    auto node_id = [&](const geo::EnuPoint& p) {
        const auto [it, fresh] = ids.try_emplace(qkey(p), static_cast<int>(nodes.size()));
        if (fresh) nodes.push_back(p);
        return it->second;
    };
    std::vector<std::pair<int, int>> endpoints;
    endpoints.reserve(net.roads.size());
    for (const auto& r : net.roads) endpoints.emplace_back(node_id(r.a), node_id(r.b));

    out << "nodes " << nodes.size() << '\n';
    for (std::size_t i = 0; i < nodes.size(); ++i)
        out << "node " << i << ' ' << fmt(nodes[i].east) << ' '
            << fmt(nodes[i].north) << '\n';
    out << "edges " << net.roads.size() << '\n';
    for (std::size_t i = 0; i < net.roads.size(); ++i) {
        const auto& r = net.roads[i];
        out << "edge " << endpoints[i].first << ' ' << endpoints[i].second << ' '
            << (r.road_type.empty() ? "-" : r.road_type) << ' ' << opt_int(r.lanes)
            << ' ' << opt_num(r.max_speed) << ' ' << opt_bool(r.oneway) << ' '
            << (r.dir_ab ? 1 : 0) << '\n';
    }
    w.commit();
}

NetworkData read_network(const std::string& path) {
    TextReader in(path);
    auto header = in.expect("roadkf-network", 1);
    if (header[1] != "1") in.fail("unsupported network format version " + header[1]);

    NetworkData net;
    auto origin = in.expect("origin", 3);
    net.origin = {in.num(origin[1]), in.num(origin[2]), in.num(origin[3])};

    const long long n_nodes = in.integer(in.expect("nodes", 1)[1]);
    if (n_nodes < 0) in.fail("negative node count");
    std::unordered_map<long long, geo::EnuPoint> nodes;
    nodes.reserve(n_nodes);
    for (long long i = 0; i < n_nodes; ++i) {
        auto t = in.expect("node", 3);
        const long long id = in.integer(t[1]);
        if (!nodes.emplace(id, geo::EnuPoint{in.num(t[2]), in.num(t[3]), 0.0}).second)
            in.fail("duplicate node id " + t[1]);
    }

    const long long n_edges = in.integer(in.expect("edges", 1)[1]);
    if (n_edges < 0) in.fail("negative edge count");
    net.roads.reserve(n_edges);
    for (long long i = 0; i < n_edges; ++i) {
        auto t = in.expect("edge", 7);
        roadnet::RawRoad r;
        for (int side = 0; side < 2; ++side) {
            const long long id = in.integer(t[1 + side]);
            const auto it = nodes.find(id);
            if (it == nodes.end())
                in.fail("edge references unknown node " + t[1 + side]);
            (side == 0 ? r.a : r.b) = it->second;
        }
        if (t[3] != "-") r.road_type = t[3];
        if (t[4] != "-") r.lanes = static_cast<int>(in.integer(t[4]));
        if (t[5] != "-") r.max_speed = in.num(t[5]);
        if (t[6] != "-") r.oneway = in.integer(t[6]) != 0;
        r.dir_ab = in.integer(t[7]) != 0;
        net.roads.push_back(std::move(r));
    }
    in.expect_eof();
    return net;
}

roadnet::RoadGraph build_graph(const NetworkData& net) {
    return roadnet::to_dual_graph(roadnet::split_segments(net.roads));
}

// -------- scenario config echo --------

namespace {

const std::vector<std::string>& scenario_keys() {
    static const std::vector<std::string> keys = {
        "network",        "extent",
        "block",          "jitter",
        "oneway_fraction", "radial_spokes",
        "radial_rings",   "parallel_count",
        "parallel_separation", "parallel_length",
        "epoch_rate",     "duration",
        "satellites",     "shell_radius",
        "elevation_min",  "elevation_max",
        "range_sigma",    "rate_sigma",
        "p_multipath",    "multipath_bias_min",
        "multipath_bias_max", "multipath_dwell",
        "clock_bias0",    "clock_drift0",
        "clock_walk",     "seed",
    };
    return keys;
}

std::string scenario_value(const sim::ScenarioConfig& c, const std::string& key) {
    if (key == "network") return network_kind_name(c.network);
    if (key == "extent") return fmt(c.extent);
    if (key == "block") return fmt(c.block);
    if (key == "jitter") return fmt(c.jitter);
    if (key == "oneway_fraction") return fmt(c.oneway_fraction);
    if (key == "radial_spokes") return std::to_string(c.radial_spokes);
    if (key == "radial_rings") return std::to_string(c.radial_rings);
    if (key == "parallel_count") return std::to_string(c.parallel_count);
    if (key == "parallel_separation") return fmt(c.parallel_separation);
    if (key == "parallel_length") return fmt(c.parallel_length);
    if (key == "epoch_rate") return fmt(c.epoch_rate);
    if (key == "duration") return fmt(c.duration);
    if (key == "satellites") return std::to_string(c.satellites);
    if (key == "shell_radius") return fmt(c.shell_radius);
    if (key == "elevation_min") return fmt(c.elevation_min);
    if (key == "elevation_max") return fmt(c.elevation_max);
    if (key == "range_sigma") return fmt(c.range_sigma);
    if (key == "rate_sigma") return fmt(c.rate_sigma);
    if (key == "p_multipath") return fmt(c.p_multipath);
    if (key == "multipath_bias_min") return fmt(c.multipath_bias_min);
    if (key == "multipath_bias_max") return fmt(c.multipath_bias_max);
    if (key == "multipath_dwell") return fmt(c.multipath_dwell);
    if (key == "clock_bias0") return fmt(c.clock_bias0);
    if (key == "clock_drift0") return fmt(c.clock_drift0);
    if (key == "clock_walk") return fmt(c.clock_walk);
    if (key == "seed") return std::to_string(c.seed);
    throw std::runtime_error("unknown scenario option '" + key + "'");
}

double to_num(const std::string& key, const std::string& value) {
    char* end = nullptr;
    const double x = std::strtod(value.c_str(), &end);
    if (end != value.c_str() + value.size() || value.empty() || !std::isfinite(x))
        throw std::runtime_error("bad value '" + value + "' for option '" + key + "'");
    return x;
}

int to_int(const std::string& key, const std::string& value) {
    const double x = to_num(key, value);
    if (x != std::floor(x))
        throw std::runtime_error("option '" + key + "' takes an integer, got '" +
                                 value + "'");
    return static_cast<int>(x);
}

}  // namespace

void apply_scenario_option(sim::ScenarioConfig& c, const std::string& key,
                           const std::string& value) {
    if (key == "network") { c.network = parse_network_kind(value); return; }
    if (key == "extent") { c.extent = to_num(key, value); return; }
    if (key == "block") { c.block = to_num(key, value); return; }
    if (key == "jitter") { c.jitter = to_num(key, value); return; }
    if (key == "oneway_fraction") { c.oneway_fraction = to_num(key, value); return; }
    if (key == "radial_spokes") { c.radial_spokes = to_int(key, value); return; }
    if (key == "radial_rings") { c.radial_rings = to_int(key, value); return; }
    if (key == "parallel_count") { c.parallel_count = to_int(key, value); return; }
    if (key == "parallel_separation") { c.parallel_separation = to_num(key, value); return; }
    if (key == "parallel_length") { c.parallel_length = to_num(key, value); return; }
    if (key == "epoch_rate") { c.epoch_rate = to_num(key, value); return; }
    if (key == "duration") { c.duration = to_num(key, value); return; }
    if (key == "satellites") { c.satellites = to_int(key, value); return; }
    if (key == "shell_radius") { c.shell_radius = to_num(key, value); return; }
    if (key == "elevation_min") { c.elevation_min = to_num(key, value); return; }
    if (key == "elevation_max") { c.elevation_max = to_num(key, value); return; }
    if (key == "range_sigma") { c.range_sigma = to_num(key, value); return; }
    if (key == "rate_sigma") { c.rate_sigma = to_num(key, value); return; }
    if (key == "p_multipath") { c.p_multipath = to_num(key, value); return; }
    if (key == "multipath_bias_min") { c.multipath_bias_min = to_num(key, value); return; }
    if (key == "multipath_bias_max") { c.multipath_bias_max = to_num(key, value); return; }
    if (key == "multipath_dwell") { c.multipath_dwell = to_num(key, value); return; }
    if (key == "clock_bias0") { c.clock_bias0 = to_num(key, value); return; }
    if (key == "clock_drift0") { c.clock_drift0 = to_num(key, value); return; }
    if (key == "clock_walk") { c.clock_walk = to_num(key, value); return; }
    if (key == "seed") {
        char* end = nullptr;
        errno = 0;
        const unsigned long long x = std::strtoull(value.c_str(), &end, 10);
        if (end != value.c_str() + value.size() || value.empty() || errno == ERANGE)
            throw std::runtime_error("bad value '" + value + "' for option 'seed'");
        c.seed = x;
        return;
    }
    throw std::runtime_error("unknown scenario option '" + key + "'");
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    TextReader in(path);
    std::map<std::string, std::string> out;
    std::vector<std::string> tokens;
    while (in.next(tokens)) {
        // Accept "key value" and "key=value" spellings.
        if (tokens.size() == 1) {
            const auto eq = tokens[0].find('=');
            if (eq == std::string::npos || eq == 0 || eq + 1 == tokens[0].size())
                in.fail("expected 'key value', found '" + tokens[0] + "'");
            out[tokens[0].substr(0, eq)] = tokens[0].substr(eq + 1);
            continue;
        }
        if (tokens.size() == 3 && tokens[1] == "=") {
            tokens.erase(tokens.begin() + 1);
        }
        if (tokens.size() != 2)
            in.fail("expected 'key value', found " + std::to_string(tokens.size()) +
                    " fields");
        std::string key = tokens[0];
        if (!key.empty() && key.back() == '=') key.pop_back();
        std::string value = tokens[1];
        if (!value.empty() && value.front() == '=') value.erase(0, 1);
        if (key.empty() || value.empty()) in.fail("expected 'key value'");
        out[key] = value;
    }
    return out;
}

// -------- drives --------

void write_drive(const std::string& path, const DriveFileData& drive) {
    if (drive.truth.size() != drive.epochs.size())
        throw std::runtime_error(path + ": truth and epoch counts differ");
    AtomicWriter w(path);
    auto& out = w.stream();
    out << "roadkf-drive 1\n";
    out << "network " << (drive.network_ref.empty() ? "-" : drive.network_ref)
        << '\n';
    out << "seed " << drive.seed << '\n';
    for (const auto& key : scenario_keys())
        out << "config " << key << ' ' << scenario_value(drive.config, key) << '\n';
    out << "epochs " << drive.truth.size() << '\n';
    for (std::size_t k = 0; k < drive.truth.size(); ++k) {
        const auto& te = drive.truth[k];
        const auto& ep = drive.epochs[k];
        out << "epoch " << fmt(te.time) << ' ' << fmt(te.position.east) << ' '
            << fmt(te.position.north) << ' ' << fmt(te.position.up) << ' '
            << fmt(te.velocity.east) << ' ' << fmt(te.velocity.north) << ' '
            << fmt(te.velocity.up) << ' ' << fmt(te.clock_bias) << ' '
            << fmt(te.clock_drift) << ' ' << te.segment << ' ' << ep.sats.size()
            << '\n';
        for (const auto& s : ep.sats)
            out << "sat " << fmt(s.sat_position.east) << ' '
                << fmt(s.sat_position.north) << ' ' << fmt(s.sat_position.up) << ' '
                << fmt(s.pseudorange) << ' ' << fmt(s.pseudorange_rate) << ' '
                << fmt(s.range_sigma) << ' ' << fmt(s.rate_sigma) << '\n';
    }
    w.commit();
}

DriveFileData read_drive(const std::string& path, int num_segments) {
    TextReader in(path);
    auto header = in.expect("roadkf-drive", 1);
    if (header[1] != "1") in.fail("unsupported drive format version " + header[1]);

    DriveFileData drive;
    auto net = in.expect("network", 1);
    if (net[1] != "-") drive.network_ref = net[1];
    drive.seed = in.unsigned_integer(in.expect("seed", 1)[1]);

    std::vector<std::string> tokens;
    while (true) {
        if (!in.next(tokens)) in.fail("unexpected end of file (expected 'epochs')");
        if (tokens[0] == "config") {
            if (tokens.size() != 3) in.fail("'config' takes 2 fields");
            try {
                apply_scenario_option(drive.config, tokens[1], tokens[2]);
            } catch (const std::runtime_error& e) {
                in.fail(e.what());
            }
            continue;
        }
        break;
    }
    if (tokens[0] != "epochs" || tokens.size() != 2)
        in.fail("expected 'epochs <count>', found '" + tokens[0] + "'");
    const long long n = in.integer(tokens[1]);
    if (n < 0) in.fail("negative epoch count");

    drive.truth.reserve(n);
    drive.epochs.reserve(n);
    for (long long k = 0; k < n; ++k) {
        auto t = in.expect("epoch", 11);
        sim::TruthEpoch te;
        te.time = in.num(t[1]);
        te.position = {in.num(t[2]), in.num(t[3]), in.num(t[4])};
        te.velocity = {in.num(t[5]), in.num(t[6]), in.num(t[7])};
        te.clock_bias = in.num(t[8]);
        te.clock_drift = in.num(t[9]);
        te.segment = static_cast<int>(in.integer(t[10]));
        if (!drive.truth.empty() && te.time <= drive.truth.back().time)
            in.fail("epoch times must be strictly increasing");
        if (te.segment < -1) in.fail("bad segment id " + t[10]);
        if (num_segments >= 0 && te.segment >= num_segments)
            in.fail("segment id " + t[10] + " out of range (network has " +
                    std::to_string(num_segments) + " segments)");
        const long long nsats = in.integer(t[11]);
        if (nsats < 0) in.fail("negative satellite count");
        kalman::GnssEpoch ep;
        ep.time = te.time;
        ep.sats.reserve(nsats);
        for (long long j = 0; j < nsats; ++j) {
            auto s = in.expect("sat", 7);
            kalman::SatObs so;
            so.sat_position = {in.num(s[1]), in.num(s[2]), in.num(s[3])};
            so.pseudorange = in.num(s[4]);
            so.pseudorange_rate = in.num(s[5]);
            so.range_sigma = in.num(s[6]);
            so.rate_sigma = in.num(s[7]);
            ep.sats.push_back(so);
        }
        drive.truth.push_back(te);
        drive.epochs.push_back(std::move(ep));
    }
    in.expect_eof();
    return drive;
}

// -------- labels --------

void write_labels(const std::string& path, const LabelFileData& labels) {
    AtomicWriter w(path);
    auto& out = w.stream();
    out << "roadkf-labels 1\n";
    out << "drive " << (labels.drive_ref.empty() ? "-" : labels.drive_ref) << '\n';
    out << "epochs " << labels.labels.size() << '\n';
    for (int id : labels.labels) out << "label " << id << '\n';
    w.commit();
}

LabelFileData read_labels(const std::string& path, int num_segments) {
    TextReader in(path);
    auto header = in.expect("roadkf-labels", 1);
    if (header[1] != "1") in.fail("unsupported label format version " + header[1]);
    LabelFileData out;
    auto drive = in.expect("drive", 1);
    if (drive[1] != "-") out.drive_ref = drive[1];
    const long long n = in.integer(in.expect("epochs", 1)[1]);
    if (n < 0) in.fail("negative epoch count");
    out.labels.reserve(n);
    for (long long k = 0; k < n; ++k) {
        auto t = in.expect("label", 1);
        const long long id = in.integer(t[1]);
        if (id < -1) in.fail("bad segment id " + t[1]);
        if (num_segments >= 0 && id >= num_segments)
            in.fail("segment id " + t[1] + " out of range (network has " +
                    std::to_string(num_segments) + " segments)");
        out.labels.push_back(static_cast<int>(id));
    }
    in.expect_eof();
    return out;
}

// -------- results --------

void write_results(const std::string& path, const ResultFileData& results) {
    AtomicWriter w(path);
    auto& out = w.stream();
    out << "roadkf-results 1\n";
    out << "drive " << (results.drive_ref.empty() ? "-" : results.drive_ref) << '\n';
    out << "epochs " << results.rows.size() << '\n';
    for (const auto& r : results.rows) {
        if (r.method.empty() || r.method.find_first_of(" \t#") != std::string::npos)
            throw std::runtime_error(path + ": method name '" + r.method +
                                     "' is not a single token");
        out << "est " << r.method << ' ' << fmt(r.time) << ' ' << fmt(r.east) << ' '
            << fmt(r.north) << ' ' << fmt(r.horizontal_error) << '\n';
    }
    w.commit();
}

ResultFileData read_results(const std::string& path) {
    TextReader in(path);
    auto header = in.expect("roadkf-results", 1);
    if (header[1] != "1") in.fail("unsupported results format version " + header[1]);
    ResultFileData out;
    auto drive = in.expect("drive", 1);
    if (drive[1] != "-") out.drive_ref = drive[1];
    const long long n = in.integer(in.expect("epochs", 1)[1]);
    if (n < 0) in.fail("negative epoch count");
    out.rows.reserve(n);
    double prev_time = 0.0;
    for (long long k = 0; k < n; ++k) {
        auto t = in.expect("est", 5);
        ResultRow r;
        r.method = t[1];
        r.time = in.num(t[2]);
        r.east = in.num(t[3]);
        r.north = in.num(t[4]);
        r.horizontal_error = in.num(t[5]);
        if (r.horizontal_error < 0.0) in.fail("negative horizontal error");
        if (k > 0 && r.time <= prev_time)
            in.fail("epoch times must be strictly increasing");
        prev_time = r.time;
        out.rows.push_back(std::move(r));
    }
    in.expect_eof();
    return out;
}

// -------- checkpoints --------

namespace {

constexpr char kCkptMagic[8] = {'R', 'K', 'F', 'C', 'K', 'P', 'T', '1'};

class BinWriter {
  public:
    explicit BinWriter(std::ofstream& out) : out_(out) {}
    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void u32(std::uint32_t x) { bytes(&x, 4); }
    void i64(std::int64_t x) { bytes(&x, 8); }
    void f64(double x) { bytes(&x, 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const ad::Tensor& t) {
        u32(static_cast<std::uint32_t>(t.rows));
        u32(static_cast<std::uint32_t>(t.cols));
        bytes(t.v.data(), t.v.size() * sizeof(double));
    }

  private:
    std::ofstream& out_;
};

class BinReader {
  public:
    BinReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw std::runtime_error(path + ": cannot open for reading");
    }
    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw std::runtime_error(path_ + ": truncated at byte " +
                                     std::to_string(offset_ + in_.gcount()));
        offset_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t x;
        bytes(&x, 4);
        return x;
    }
    std::int64_t i64() {
        std::int64_t x;
        bytes(&x, 8);
        return x;
    }
    double f64() {
        double x;
        bytes(&x, 8);
        return x;
    }
    std::string str() {
        const std::uint32_t n = u32();
        if (n > (1u << 20))
            throw std::runtime_error(path_ + ": implausible string length at byte " +
                                     std::to_string(offset_ - 4));
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    ad::Tensor tensor() {
        const std::uint32_t rows = u32();
        const std::uint32_t cols = u32();
        if (rows > (1u << 24) || cols > (1u << 24))
            throw std::runtime_error(path_ + ": implausible tensor shape at byte " +
                                     std::to_string(offset_ - 8));
        ad::Tensor t(static_cast<int>(rows), static_cast<int>(cols));
        bytes(t.v.data(), t.v.size() * sizeof(double));
        return t;
    }
    bool at_eof() {
        in_.peek();
        return in_.eof();
    }
    [[noreturn]] void fail(const std::string& msg) {
        throw std::runtime_error(path_ + ": " + msg + " at byte " +
                                 std::to_string(offset_));
    }

  private:
    std::string path_;
    std::ifstream in_;
    std::size_t offset_ = 0;
};

}  // namespace

void write_checkpoint(const std::string& path, const CheckpointData& ckpt) {
    AtomicWriter w(path);
    BinWriter out(w.stream());
    out.bytes(kCkptMagic, sizeof kCkptMagic);
    const auto& c = ckpt.config;
    out.u32(static_cast<std::uint32_t>(c.variant));
    out.u32(static_cast<std::uint32_t>(c.blocks));
    out.u32(static_cast<std::uint32_t>(c.hidden));
    out.u32(static_cast<std::uint32_t>(c.k_hops));
    for (double x : {c.lambda, c.sigma_floor, c.sigma_ceil, c.dist_scale,
                     c.speed_scale, c.var_scale, c.length_scale, c.lanes_scale})
        out.f64(x);
    out.u32(static_cast<std::uint32_t>(ckpt.params.size()));
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        out.str(tgnn::param_name(c, static_cast<int>(i)));
        out.tensor(ckpt.params[i]);
    }
    out.u32(static_cast<std::uint32_t>(ckpt.bn_state.size()));
    for (std::size_t i = 0; i < ckpt.bn_state.size(); ++i) {
        out.str(tgnn::bn_state_name(c, static_cast<int>(i)));
        out.tensor(ckpt.bn_state[i]);
    }
    out.i64(ckpt.optimizer.t);
    out.u32(static_cast<std::uint32_t>(ckpt.optimizer.slots.size()));
    for (const auto& slot : ckpt.optimizer.slots) {
        out.tensor(slot.m);
        out.tensor(slot.v);
    }
    w.commit();
}

CheckpointData read_checkpoint(const std::string& path) {
    BinReader in(path);
    char magic[8];
    in.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kCkptMagic, sizeof magic) != 0)
        throw std::runtime_error(path + ": not a roadkf checkpoint (bad magic)");

    CheckpointData ckpt;
    auto& c = ckpt.config;
    const std::uint32_t variant = in.u32();
    if (variant > 2) in.fail("bad model variant " + std::to_string(variant));
    c.variant = static_cast<tgnn::Variant>(variant);
    c.blocks = static_cast<int>(in.u32());
    c.hidden = static_cast<int>(in.u32());
    c.k_hops = static_cast<int>(in.u32());
    if (c.blocks <= 0 || c.blocks > 64 || c.hidden <= 0 || c.hidden > 4096 ||
        c.k_hops < 0 || c.k_hops > 16)
        in.fail("implausible model shape");
    c.lambda = in.f64();
    c.sigma_floor = in.f64();
    c.sigma_ceil = in.f64();
    c.dist_scale = in.f64();
    c.speed_scale = in.f64();
    c.var_scale = in.f64();
    c.length_scale = in.f64();
    c.lanes_scale = in.f64();

    const std::uint32_t n_params = in.u32();
    ckpt.params.reserve(n_params);
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const std::string name = in.str();
        std::string expected;
        try {
            expected = tgnn::param_name(c, static_cast<int>(i));
        } catch (const std::out_of_range&) {
            in.fail("unexpected extra parameter '" + name + "'");
        }
        if (name != expected)
            in.fail("parameter " + std::to_string(i) + " is named '" + name +
                    "', expected '" + expected + "'");
        ckpt.params.push_back(in.tensor());
    }
    const std::uint32_t n_bn = in.u32();
    ckpt.bn_state.reserve(n_bn);
    for (std::uint32_t i = 0; i < n_bn; ++i) {
        const std::string name = in.str();
        std::string expected;
        try {
            expected = tgnn::bn_state_name(c, static_cast<int>(i));
        } catch (const std::out_of_range&) {
            in.fail("unexpected extra running-stats tensor '" + name + "'");
        }
        if (name != expected)
            in.fail("running-stats tensor " + std::to_string(i) + " is named '" +
                    name + "', expected '" + expected + "'");
        ckpt.bn_state.push_back(in.tensor());
    }
    ckpt.optimizer.t = in.i64();
    const std::uint32_t n_slots = in.u32();
    if (n_slots != 0 && n_slots != n_params)
        in.fail("optimizer slot count " + std::to_string(n_slots) +
                " does not match parameter count " + std::to_string(n_params));
    ckpt.optimizer.slots.reserve(n_slots);
    for (std::uint32_t i = 0; i < n_slots; ++i) {
        ad::AdamSlot slot;
        slot.m = in.tensor();
        slot.v = in.tensor();
        ckpt.optimizer.slots.push_back(std::move(slot));
    }
    if (!in.at_eof()) in.fail("trailing bytes");

    // Shapes must match the layout the config implies.
    const tgnn::TgnnModel canonical = tgnn::make_model(c, 0);
    if (canonical.params.size() != ckpt.params.size())
        in.fail("parameter count does not match the model config");
    for (std::size_t i = 0; i < ckpt.params.size(); ++i)
        if (canonical.params[i].rows != ckpt.params[i].rows ||
            canonical.params[i].cols != ckpt.params[i].cols)
            in.fail("parameter '" + tgnn::param_name(c, static_cast<int>(i)) +
                    "' has the wrong shape");
    if (canonical.bn_state.size() != ckpt.bn_state.size())
        in.fail("running-stats count does not match the model config");
    for (std::size_t i = 0; i < ckpt.bn_state.size(); ++i)
        if (canonical.bn_state[i].rows != ckpt.bn_state[i].rows ||
            canonical.bn_state[i].cols != ckpt.bn_state[i].cols)
            in.fail("running-stats tensor '" +
                    tgnn::bn_state_name(c, static_cast<int>(i)) +
                    "' has the wrong shape");
    return ckpt;
}

}  // namespace roadkf::io
