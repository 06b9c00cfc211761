#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "roadkf/harness.hpp"

using namespace roadkf;
using harness::Method;
using harness::MethodConfig;

namespace {

struct TempDir {
    std::filesystem::path dir;
    TempDir() {
        dir = std::filesystem::temp_directory_path() /
              ("roadkf-harness-test-" + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(dir);
    }
    ~TempDir() { std::filesystem::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>());
}

io::DriveFileData make_drive(const roadnet::RoadGraph& g,
                             const sim::ScenarioConfig& cfg, std::uint64_t seed) {
    io::DriveFileData d;
    d.config = cfg;
    d.seed = seed;
    auto rec = sim::generate_drive(g, cfg, seed);
    d.truth = std::move(rec.truth);
    d.epochs = std::move(rec.epochs);
    return d;
}

std::vector<int> truth_labels(const io::DriveFileData& d) {
    std::vector<int> out;
    out.reserve(d.truth.size());
    for (const auto& t : d.truth) out.push_back(t.segment);
    return out;
}

roadnet::RoadGraph single_road(double length, double vmax, bool oneway) {
    roadnet::RawRoad r;
    r.a = {0.0, 0.0, 0.0};
    r.b = {length, 0.0, 0.0};
    r.road_type = "primary";
    r.max_speed = vmax;
    r.oneway = oneway;
    return roadnet::to_dual_graph(std::vector<roadnet::RawRoad>{r});
}

sim::ScenarioConfig noise_free(double duration) {
    sim::ScenarioConfig cfg;
    cfg.duration = duration;
    cfg.range_sigma = 0.0;
    cfg.rate_sigma = 0.0;
    cfg.p_multipath = 0.0;
    cfg.clock_walk = 0.0;
    return cfg;
}

sim::ScenarioConfig urban_grid(double extent, double duration, std::uint64_t seed) {
    sim::ScenarioConfig cfg = sim::urban_scenario();
    cfg.extent = extent;
    cfg.block = 100.0;
    cfg.oneway_fraction = 0.0;
    cfg.duration = duration;
    cfg.seed = seed;
    return cfg;
}

std::vector<double> errors_of(const harness::PipelineResult& r) {
    std::vector<double> out;
    out.reserve(r.rows.size());
    for (const auto& row : r.rows) out.push_back(row.horizontal_error);
    return out;
}

// First polyline after `from`; points parsed from the points attribute.
std::vector<std::pair<double, double>> polyline_points(const std::string& svg,
                                                       std::size_t from) {
    auto p = svg.find("<polyline", from);
    REQUIRE(p != std::string::npos);
    p = svg.find("points=\"", p);
    REQUIRE(p != std::string::npos);
    p += 8;
    const auto e = svg.find('"', p);
    REQUIRE(e != std::string::npos);
    std::istringstream ss(svg.substr(p, e - p));
    std::vector<std::pair<double, double>> pts;
    std::string tok;
    while (ss >> tok) {
        const auto comma = tok.find(',');
        REQUIRE(comma != std::string::npos);
        pts.emplace_back(std::stod(tok.substr(0, comma)),
                         std::stod(tok.substr(comma + 1)));
    }
    return pts;
}

}  // namespace

TEST_CASE("percentile interpolates between order statistics") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(-50.0, 50.0);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 60);
        std::vector<double> v(n);
        for (auto& x : v) x = u(rng);
        std::uniform_real_distribution<double> uq(0.0, 1.0);
        const double q = uq(rng);

        std::vector<double> sorted = v;
        std::sort(sorted.begin(), sorted.end());
        const double pos = q * (n - 1);
        const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min<std::size_t>(lo + 1, n - 1);
        const double want = sorted[lo] + (pos - lo) * (sorted[hi] - sorted[lo]);

        CHECK(harness::percentile(v, q) == doctest::Approx(want).epsilon(1e-12));
    }

    CHECK(harness::percentile({7.0}, 0.0) == 7.0);
    CHECK(harness::percentile({7.0}, 1.0) == 7.0);
    CHECK(harness::percentile({3.0, 1.0}, 0.0) == 1.0);
    CHECK(harness::percentile({3.0, 1.0}, 1.0) == 3.0);
    CHECK(harness::percentile({3.0, 1.0}, 0.5) == 2.0);
    CHECK_THROWS_AS(harness::percentile({}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(harness::percentile({1.0}, -0.1), std::invalid_argument);
    CHECK_THROWS_AS(harness::percentile({1.0}, 1.1), std::invalid_argument);

    const auto st = harness::error_stats({4.0, 1.0, 3.0, 2.0});
    CHECK(st.epochs == 4);
    CHECK(st.he50 == doctest::Approx(2.5));
    CHECK(st.he95 == doctest::Approx(1.0 + 0.95 * 3.0));
}

TEST_CASE("noise-free cruise: LS is exact, KF tracks below a millimeter") {
    const auto g = single_road(30000.0, 10.0, true);
    const auto drive = make_drive(g, noise_free(2000.0), 5);
    REQUIRE(drive.epochs.size() == 2000);

    MethodConfig ls;
    ls.method = Method::Ls;
    const auto ls_res = harness::run_pipeline(drive, g, ls);
    REQUIRE(ls_res.rows.size() == drive.epochs.size());
    for (std::size_t k = 0; k < ls_res.rows.size(); ++k) {
        CHECK(ls_res.rows[k].method == "LS");
        CHECK(ls_res.rows[k].time == drive.epochs[k].time);
        CHECK(ls_res.rows[k].horizontal_error < 1e-5);
        CHECK(ls_res.selections[k] == -1);
    }

    MethodConfig kf;
    kf.method = Method::Kf;
    const auto kf_res = harness::run_pipeline(drive, g, kf);
    REQUIRE(kf_res.rows.size() == drive.epochs.size());
    for (std::size_t k = 0; k < kf_res.rows.size(); ++k) {
        CHECK(kf_res.rows[k].method == "KF");
        CHECK(kf_res.selections[k] == -1);
    }
    const auto st = harness::error_stats(errors_of(kf_res));
    CHECK(st.he95 < 1e-3);
    CHECK(kf_res.rows.back().horizontal_error < 1e-4);
}

TEST_CASE("urban drive: stored truth labels beat the plain filter") {
    const auto cfg = urban_grid(600.0, 600.0, 17);
    const auto g = sim::generate_network(cfg);
    const auto drive = make_drive(g, cfg, 4);
    REQUIRE(drive.epochs.size() == 600);
    const auto labels = truth_labels(drive);

    MethodConfig kf;
    kf.method = Method::Kf;
    const auto kf_res = harness::run_pipeline(drive, g, kf);

    MethodConfig oracle;
    oracle.method = Method::KfOracle;
    oracle.labels = &labels;
    const auto or_res = harness::run_pipeline(drive, g, oracle);
    REQUIRE(or_res.rows.size() == drive.epochs.size());
    for (std::size_t k = 0; k < labels.size(); ++k)
        CHECK(or_res.selections[k] == labels[k]);
    for (const auto& row : or_res.rows) CHECK(row.method == "KF+Oracle");

    const auto kf_stats = harness::error_stats(errors_of(kf_res));
    const auto or_stats = harness::error_stats(errors_of(or_res));
    CHECK(or_stats.he95 < kf_stats.he95);

    MethodConfig inst;
    inst.method = Method::KfInstant;
    inst.sigma_perp2 = 1.0;
    inst.sigma_par2 = kalman::kInfVariance;
    const auto in_res = harness::run_pipeline(drive, g, inst);
    std::size_t engaged = 0;
    for (int s : in_res.selections)
        if (s >= 0) ++engaged;
    CHECK(engaged > drive.epochs.size() * 9 / 10);
    for (const auto& row : in_res.rows) CHECK(row.method == "KF+Instant");

    MethodConfig vit = inst;
    vit.method = Method::KfViterbi;
    const auto vi_res = harness::run_pipeline(drive, g, vit);
    for (const auto& row : vi_res.rows) CHECK(row.method == "KF+Viterbi");
    engaged = 0;
    for (int s : vi_res.selections)
        if (s >= 0) ++engaged;
    CHECK(engaged > drive.epochs.size() * 9 / 10);
}

TEST_CASE("run_pipeline rejects missing inputs") {
    const auto cfg = urban_grid(300.0, 10.0, 2);
    const auto g = sim::generate_network(cfg);
    auto drive = make_drive(g, cfg, 1);

    MethodConfig model_cfg;
    model_cfg.method = Method::KfModel;
    CHECK_THROWS_AS(harness::run_pipeline(drive, g, model_cfg),
                    std::invalid_argument);

    MethodConfig oracle;
    oracle.method = Method::KfOracle;
    CHECK_THROWS_AS(harness::run_pipeline(drive, g, oracle),
                    std::invalid_argument);

    std::vector<int> short_labels(drive.epochs.size() - 1, 0);
    oracle.labels = &short_labels;
    CHECK_THROWS_AS(harness::run_pipeline(drive, g, oracle),
                    std::invalid_argument);

    auto broken = drive;
    broken.truth.pop_back();
    MethodConfig kf;
    CHECK_THROWS_AS(harness::run_pipeline(broken, g, kf), std::invalid_argument);
}

TEST_CASE("run_pipeline is bit-reproducible") {
    const auto cfg = urban_grid(300.0, 60.0, 23);
    const auto g = sim::generate_network(cfg);
    const auto drive = make_drive(g, cfg, 9);

    MethodConfig vit;
    vit.method = Method::KfViterbi;
    vit.sigma_perp2 = 2.0;
    vit.sigma_par2 = 100.0;
    const auto a = harness::run_pipeline(drive, g, vit);
    const auto b = harness::run_pipeline(drive, g, vit);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t k = 0; k < a.rows.size(); ++k) {
        CHECK(a.rows[k].east == b.rows[k].east);
        CHECK(a.rows[k].north == b.rows[k].north);
        CHECK(a.rows[k].horizontal_error == b.rows[k].horizontal_error);
        CHECK(a.selections[k] == b.selections[k]);
    }

    tgnn::TgnnConfig tc;
    tc.blocks = 2;
    tc.hidden = 8;
    const auto model = tgnn::make_model(tc, 1);
    MethodConfig mm;
    mm.method = Method::KfModel;
    mm.model = &model;
    const auto c = harness::run_pipeline(drive, g, mm);
    const auto d = harness::run_pipeline(drive, g, mm);
    REQUIRE(c.rows.size() == d.rows.size());
    for (std::size_t k = 0; k < c.rows.size(); ++k) {
        CHECK(c.rows[k].east == d.rows[k].east);
        CHECK(c.rows[k].north == d.rows[k].north);
        CHECK(c.selections[k] == d.selections[k]);
    }
    for (const auto& row : c.rows) {
        CHECK(std::isfinite(row.east));
        CHECK(std::isfinite(row.north));
        CHECK(row.method == "KF+TGNN");
    }
    std::size_t engaged = 0;
    for (int s : c.selections)
        if (s >= 0) ++engaged;
    CHECK(engaged > c.rows.size() / 2);
}

TEST_CASE("model pipeline validates ablation masks") {
    const auto cfg = urban_grid(300.0, 8.0, 23);
    const auto g = sim::generate_network(cfg);
    const auto drive = make_drive(g, cfg, 9);

    tgnn::TgnnConfig tc;
    tc.blocks = 2;
    tc.hidden = 8;
    const auto model = tgnn::make_model(tc, 1);
    MethodConfig mm;
    mm.method = Method::KfModel;
    mm.model = &model;
    mm.user_feature_mask.assign(3, true);  // wrong width
    CHECK_THROWS_AS(harness::run_pipeline(drive, g, mm), std::invalid_argument);

    mm.user_feature_mask.assign(tgnn::kUserFeatureDim, false);
    mm.road_feature_mask.assign(tgnn::road_feature_dim(tc), false);
    const auto res = harness::run_pipeline(drive, g, mm);
    for (const auto& row : res.rows) CHECK(std::isfinite(row.horizontal_error));

    mm.road_feature_mask.assign(5, true);  // wrong width
    CHECK_THROWS_AS(harness::run_pipeline(drive, g, mm), std::invalid_argument);
}

TEST_CASE("grid search covers the documented grid and prefers small variances on ties") {
    const auto cfg = urban_grid(300.0, 8.0, 3);
    const auto g = sim::generate_network(cfg);
    const auto drive = make_drive(g, cfg, 2);
    std::vector<harness::BoundDrive> drives{{&drive, &g, nullptr}};

    MethodConfig base;
    base.method = Method::KfInstant;
    base.fov_radius = 1e-9;  // no candidates ever: every combination ties
    const auto res = harness::grid_search_sigma(drives, base);

    CHECK(res.combinations == 231);
    REQUIRE(res.table.size() == 231);
    CHECK(res.sigma_perp2 == 0.0);
    CHECK(res.sigma_par2 == 0.0);

    // Row layout: perpendicular-major ascending, 21 parallel values each.
    CHECK(res.table[0][0] == 0.0);
    CHECK(res.table[0][1] == 0.0);
    CHECK(res.table[10][1] == 10.0);
    CHECK(res.table[11][1] == 100.0);
    CHECK(res.table[19][1] == 900.0);
    CHECK(res.table[20][1] == kalman::kInfVariance);
    CHECK(res.table[21][0] == 1.0);
    CHECK(res.table[21][1] == 0.0);
    CHECK(res.table[230][0] == 10.0);
    CHECK(res.table[230][1] == kalman::kInfVariance);
    for (const auto& row : res.table) CHECK(row[2] == res.table[0][2]);

    MethodConfig bad;
    bad.method = Method::Kf;
    CHECK_THROWS_AS(harness::grid_search_sigma(drives, bad),
                    std::invalid_argument);
    CHECK_THROWS_AS(harness::grid_search_sigma({}, base), std::invalid_argument);
}

TEST_CASE("grid search trusts an exact road under heavy noise") {
    const auto g = single_road(3000.0, 10.0, true);
    auto cfg = noise_free(240.0);
    cfg.range_sigma = 20.0;
    cfg.rate_sigma = 1.0;
    const auto drive = make_drive(g, cfg, 5);
    REQUIRE(drive.epochs.size() >= 200);
    std::vector<harness::BoundDrive> drives{{&drive, &g, nullptr}};

    MethodConfig base;
    base.method = Method::KfInstant;
    const auto res = harness::grid_search_sigma(drives, base);
    CHECK(res.sigma_perp2 == 0.0);

    // Snapping hard to the exact road must beat ignoring it entirely.
    double he_free = 0.0;
    for (const auto& row : res.table)
        if (row[0] == 10.0 && row[1] == kalman::kInfVariance) he_free = row[2];
    CHECK(res.he95 < he_free);
}

TEST_CASE("grid search backs off the cross-track clamp near decoy parallels") {
    sim::ScenarioConfig cfg = sim::urban_scenario();
    cfg.network = sim::NetworkKind::Parallel;
    cfg.parallel_count = 5;
    cfg.parallel_separation = 10.0;
    cfg.parallel_length = 2000.0;
    cfg.duration = 120.0;
    cfg.range_sigma = 8.0;
    cfg.seed = 6;
    const auto g = sim::generate_network(cfg);
    const auto drive = make_drive(g, cfg, 11);
    REQUIRE(drive.epochs.size() >= 100);
    std::vector<harness::BoundDrive> drives{{&drive, &g, nullptr}};

    MethodConfig base;
    base.method = Method::KfInstant;
    const auto res = harness::grid_search_sigma(drives, base);
    CHECK(res.sigma_perp2 > 0.0);
}

TEST_CASE("oracle labels recover the driven segments on easy geometry") {
    sim::ScenarioConfig cfg = sim::open_sky_scenario();
    cfg.extent = 300.0;
    cfg.block = 100.0;
    cfg.oneway_fraction = 0.0;
    cfg.duration = 300.0;
    cfg.seed = 21;
    const auto g = sim::generate_network(cfg);
    const auto drive = make_drive(g, cfg, 8);
    REQUIRE(drive.epochs.size() == 300);

    const auto labels = harness::oracle_labels(drive, g);
    REQUIRE(labels.size() == drive.epochs.size());
    std::size_t match = 0;
    for (std::size_t k = 0; k < labels.size(); ++k) {
        CHECK(labels[k] >= -1);
        CHECK(labels[k] < g.size());
        if (labels[k] == drive.truth[k].segment) ++match;
    }
    CHECK(match >= labels.size() * 8 / 10);

    const auto data = harness::prepare_drive_data(drive, g, labels);
    REQUIRE(data.epochs.size() == drive.epochs.size());
    CHECK(data.graph == &g);
    CHECK(data.gnss_only.size() == drive.epochs.size());
    for (std::size_t k = 0; k < data.epochs.size(); ++k) {
        CHECK(data.epochs[k].oracle_label == labels[k]);
        CHECK(data.epochs[k].truth.east == drive.truth[k].position.east);
        const auto& v = drive.truth[k].velocity;
        if (std::hypot(v.east, v.north) < selection::kMinHeadingSpeed)
            CHECK(data.epochs[k].truth_heading == 0.0);
    }
    const auto unlabeled = harness::prepare_drive_data(drive, g, {});
    for (const auto& e : unlabeled.epochs) CHECK(e.oracle_label == -1);

    std::vector<int> bad(drive.epochs.size() + 1, 0);
    CHECK_THROWS_AS(harness::prepare_drive_data(drive, g, bad),
                    std::invalid_argument);
}

TEST_CASE("evaluate cross-validates regions and writes CSV and SVG") {
    std::vector<harness::Region> regions;
    for (std::uint64_t s = 0; s < 3; ++s) {
        harness::Region r;
        r.name = "region" + std::to_string(s);
        const auto cfg = urban_grid(300.0, 60.0, 31 + s);
        r.graph = sim::generate_network(cfg);
        r.drives.push_back(make_drive(r.graph, cfg, 100 + s));
        r.labels.push_back(truth_labels(r.drives.back()));
        regions.push_back(std::move(r));
    }

    harness::EvalConfig cfg;
    cfg.methods = {"LS", "KF", "KF+Oracle"};
    cfg.tune_sigma = false;
    const auto report = harness::evaluate(regions, cfg);

    REQUIRE(report.rows.size() == 9);
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& row = report.rows[i];
        CHECK(row.fold == static_cast<int>(i / 3));
        CHECK(row.method == cfg.methods[i % 3]);
        CHECK(row.seed == 0);
        CHECK(row.drives == 1);
        CHECK(row.epochs == 60);
        CHECK(std::isfinite(row.he50_m));
        CHECK(row.he50_m <= row.he95_m);
    }
    for (const auto& name : cfg.methods) {
        REQUIRE(report.cdf_errors.count(name) == 1);
        CHECK(report.cdf_errors.at(name).size() == 180);
        REQUIRE(report.stats.count(name) == 1);
        CHECK(report.stats.at(name).samples == 3);
        CHECK(report.stats.at(name).he95_std >= 0.0);
    }

    // Stored truth labels should beat the plain filter fold by fold.
    for (int fold = 0; fold < 3; ++fold) {
        double kf = 0.0, oracle = 0.0;
        for (const auto& row : report.rows) {
            if (row.fold != fold) continue;
            if (row.method == "KF") kf = row.he95_m;
            if (row.method == "KF+Oracle") oracle = row.he95_m;
        }
        CHECK(oracle < kf);
    }

    TempDir tmp;
    const auto csv_path = tmp.path("table.csv");
    harness::write_csv(csv_path, report.rows);
    const auto csv = slurp(csv_path);
    std::istringstream lines(csv);
    std::string line;
    REQUIRE(std::getline(lines, line));
    CHECK(line == "method,fold,seed,he50_m,he95_m,epochs,drives");
    int count = 0;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        ++count;
        CHECK(std::count(line.begin(), line.end(), ',') == 6);
    }
    CHECK(count == 9);
    CHECK(csv.find("KF+Oracle,0,0,") != std::string::npos);

    const auto svg_path = tmp.path("cdf.svg");
    harness::write_cdf_svg(svg_path, report.cdf_errors);
    const auto svg = slurp(svg_path);
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("</svg>") != std::string::npos);
    for (const auto& name : cfg.methods)
        CHECK(svg.find(">" + name + "<") != std::string::npos);

    // Each curve is a CDF: x never decreases, rendered y never increases.
    std::size_t cursor = 0;
    for (int curve = 0; curve < 3; ++curve) {
        const auto pts = polyline_points(svg, cursor);
        REQUIRE(pts.size() >= 3);
        for (std::size_t i = 1; i < pts.size(); ++i) {
            CHECK(pts[i].first >= pts[i - 1].first);
            CHECK(pts[i].second <= pts[i - 1].second);
        }
        cursor = svg.find("<polyline", cursor) + 1;
    }

    CHECK_THROWS_AS(
        harness::evaluate({regions[0]}, cfg), std::invalid_argument);
}

TEST_CASE("stats_from_results pools rows across files by method") {
    io::ResultFileData f1, f2;
    f1.drive_ref = "a.drv";
    f2.drive_ref = "b.drv";
    for (int i = 1; i <= 10; ++i)
        f1.rows.push_back({"KF", static_cast<double>(i), 0.0, 0.0,
                           static_cast<double>(i)});
    for (int i = 11; i <= 20; ++i)
        f2.rows.push_back({"KF", static_cast<double>(i), 0.0, 0.0,
                           static_cast<double>(i)});
    f2.rows.push_back({"LS", 1.0, 0.0, 0.0, 5.0});

    const auto kf = harness::stats_from_results({f1, f2}, "KF");
    CHECK(kf.epochs == 20);
    CHECK(kf.he50 == doctest::Approx(10.5));
    CHECK(kf.he95 == doctest::Approx(1.0 + 0.95 * 19.0));

    const auto ls = harness::stats_from_results({f1, f2}, "LS");
    CHECK(ls.epochs == 1);
    CHECK(ls.he50 == 5.0);
    CHECK(ls.he95 == 5.0);

    CHECK(harness::stats_from_results({f1, f2}, "KF+TGNN").epochs == 0);
}

TEST_CASE("method names round-trip") {
    using harness::method_name;
    using harness::parse_method;
    for (Method m : {Method::Ls, Method::Kf, Method::KfInstant,
                     Method::KfViterbi, Method::KfOracle})
        CHECK(parse_method(method_name(m)) == m);
    CHECK(parse_method("KF+TGNN") == Method::KfModel);
    CHECK(parse_method("KF+GNN") == Method::KfModel);
    CHECK(parse_method("KF+MLP") == Method::KfModel);
    CHECK_THROWS_AS(parse_method("bogus"), std::runtime_error);

    CHECK(harness::variant_for_name("KF+TGNN") == tgnn::Variant::Tgnn);
    CHECK(harness::variant_for_name("KF+GNN") == tgnn::Variant::Gnn);
    CHECK(harness::variant_for_name("KF+MLP") == tgnn::Variant::Mlp);
    CHECK_THROWS_AS(harness::variant_for_name("KF"), std::runtime_error);

    tgnn::TgnnConfig tc;
    tc.blocks = 1;
    tc.hidden = 4;
    tc.variant = tgnn::Variant::Mlp;
    const auto model = tgnn::make_model(tc, 0);
    CHECK(method_name(Method::KfModel, &model) == "KF+MLP");
    CHECK(method_name(Method::KfModel, nullptr) == "KF+TGNN");
}
