#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "roadkf/harness.hpp"
#include "roadkf/io.hpp"

// Command line front end. Every subcommand reads and writes the documented
// file formats; randomness is always seed-controlled; deterministic
// subcommands take no seed at all. Errors exit non-zero with a single
// "error: ..." line on stderr; usage problems exit 2.

namespace {

using namespace roadkf;

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string basename_of(const std::string& path) {
    return std::filesystem::path(path).filename().string();
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
    std::vector<std::uint64_t> out;
    for (const auto& tok : split_list(s, ',')) {
        const auto dots = tok.find("..");
        if (dots != std::string::npos) {
            const std::uint64_t a = std::stoull(tok.substr(0, dots));
            const std::uint64_t b = std::stoull(tok.substr(dots + 2));
            if (b < a) throw std::runtime_error("bad seed range '" + tok + "'");
            for (std::uint64_t v = a; v <= b; ++v) out.push_back(v);
        } else {
            out.push_back(std::stoull(tok));
        }
    }
    if (out.empty()) throw std::runtime_error("empty seed list");
    return out;
}

std::vector<bool> parse_mask(const std::string& s) {
    std::vector<bool> out;
    for (const auto& tok : split_list(s, ',')) {
        if (tok == "1")
            out.push_back(true);
        else if (tok == "0")
            out.push_back(false);
        else
            throw std::runtime_error("mask entries must be 0 or 1, got '" + tok +
                                     "'");
    }
    return out;
}

// -------- scenario options (gen-network, gen-drives, gradcheck) --------

struct ScenarioOpts {
    std::string config_path;
    std::vector<std::string> sets;
};

void add_scenario_opts(CLI::App* cmd, ScenarioOpts& o) {
    cmd->add_option("--config", o.config_path,
                    "Scenario config file (key value lines, '#' comments)");
    cmd->add_option("--set", o.sets,
                    "Override one scenario key, e.g. --set duration=600")
        ->allow_extra_args(false);
}

sim::ScenarioConfig resolve_scenario(const ScenarioOpts& o) {
    sim::ScenarioConfig cfg;
    if (!o.config_path.empty())
        for (const auto& [k, v] : io::parse_config_file(o.config_path))
            io::apply_scenario_option(cfg, k, v);
    for (const auto& s : o.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("--set expects key=value, got '" + s + "'");
        io::apply_scenario_option(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    return cfg;
}

// -------- selection options (label-oracle, run, grid-search, ...) --------

struct SelectionOpts {
    selection::EmissionParams emission;
    double fov_radius = 50.0;
};

void add_selection_opts(CLI::App* cmd, SelectionOpts& o) {
    cmd->add_option("--beta", o.emission.beta, "Position-cost weight [1/m]")
        ->capture_default_str();
    cmd->add_option("--epsilon", o.emission.epsilon, "Emission floor")
        ->capture_default_str();
    cmd->add_option("--k-hops", o.emission.k, "Transition hop count")
        ->capture_default_str();
    cmd->add_option("--fov-radius", o.fov_radius,
                    "Candidate field-of-view radius [m]")
        ->capture_default_str();
}

// -------- model / training options (train, evaluate, gradcheck) --------

struct ModelOpts {
    std::string variant = "tgnn";
    tgnn::TgnnConfig config;
};

void add_model_opts(CLI::App* cmd, ModelOpts& o) {
    cmd->add_option("--variant", o.variant, "Model variant")
        ->check(CLI::IsMember({"tgnn", "gnn", "mlp"}))
        ->capture_default_str();
    cmd->add_option("--blocks", o.config.blocks, "Network depth")
        ->capture_default_str();
    cmd->add_option("--hidden", o.config.hidden, "Hidden width")
        ->capture_default_str();
    cmd->add_option("--prior-hops", o.config.k_hops,
                    "Prior-propagation feature depth")
        ->capture_default_str();
    cmd->add_option("--lambda", o.config.lambda, "Position-loss weight")
        ->capture_default_str();
}

tgnn::TgnnConfig resolve_model(const ModelOpts& o) {
    tgnn::TgnnConfig cfg = o.config;
    if (o.variant == "tgnn")
        cfg.variant = tgnn::Variant::Tgnn;
    else if (o.variant == "gnn")
        cfg.variant = tgnn::Variant::Gnn;
    else
        cfg.variant = tgnn::Variant::Mlp;
    return cfg;
}

struct TrainOpts {
    tgnn::TrainConfig config;
    bool no_teacher_forcing = false;
    bool viterbi_prior = false;
    bool full_window = false;
    std::string user_mask, road_mask;
};

void add_train_opts(CLI::App* cmd, TrainOpts& o) {
    cmd->add_option("--iterations", o.config.iterations, "Adam iterations")
        ->capture_default_str();
    cmd->add_option("--batch", o.config.batch, "Windows per iteration")
        ->capture_default_str();
    cmd->add_option("--window", o.config.window, "Epochs per window")
        ->capture_default_str();
    cmd->add_option("--lr", o.config.adam.lr, "Learning rate")
        ->capture_default_str();
    cmd->add_option("--weight-decay", o.config.adam.weight_decay,
                    "Decoupled weight decay")
        ->capture_default_str();
    cmd->add_option("--log-every", o.config.log_every, "Metrics print period")
        ->capture_default_str();
    cmd->add_flag("--no-teacher-forcing", o.no_teacher_forcing,
                  "Chain road updates use the model's own selection");
    cmd->add_flag("--viterbi-prior", o.viterbi_prior,
                  "Feed the classical decoder belief as the prior feature");
    cmd->add_flag("--full-window-backprop", o.full_window,
                  "Backpropagate the position loss through the whole window");
    cmd->add_option("--user-mask", o.user_mask,
                    "Comma list of 0/1 per user feature column");
    cmd->add_option("--road-mask", o.road_mask,
                    "Comma list of 0/1 per road feature column");
}

void resolve_train(const TrainOpts& o, const SelectionOpts& sel,
                   tgnn::TrainConfig& cfg) {
    cfg = o.config;
    cfg.build.teacher_forcing = !o.no_teacher_forcing;
    cfg.build.viterbi_prior = o.viterbi_prior;
    cfg.build.full_window_backprop = o.full_window;
    cfg.build.emission = sel.emission;
    cfg.build.fov_radius = sel.fov_radius;
    if (!o.user_mask.empty()) cfg.build.user_feature_mask = parse_mask(o.user_mask);
    if (!o.road_mask.empty()) cfg.build.road_feature_mask = parse_mask(o.road_mask);
}

// -------- shared loaders --------

roadnet::RoadGraph load_graph(const std::string& network_path) {
    return io::build_graph(io::read_network(network_path));
}

io::DriveFileData load_drive(const std::string& path,
                             const roadnet::RoadGraph& graph) {
    return io::read_drive(path, graph.size());
}

tgnn::TgnnModel load_model(const std::string& ckpt_path) {
    io::CheckpointData ckpt = io::read_checkpoint(ckpt_path);
    tgnn::TgnnModel model;
    model.cfg = ckpt.config;
    model.params = std::move(ckpt.params);
    model.bn_state = std::move(ckpt.bn_state);
    return model;
}

std::string label_path_for(const std::string& drive_path) {
    std::filesystem::path p(drive_path);
    p.replace_extension(".lab");
    return p.string();
}

// Region directory: exactly one .rnet, drives are the .drv files in name
// order, labels pair with drives by stem.
harness::Region load_region(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir))
        throw std::runtime_error(dir + ": not a directory");
    std::string network;
    std::vector<std::string> drives;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const auto ext = entry.path().extension().string();
        if (ext == ".rnet") {
            if (!network.empty())
                throw std::runtime_error(dir + ": more than one .rnet file");
            network = entry.path().string();
        } else if (ext == ".drv") {
            drives.push_back(entry.path().string());
        }
    }
    if (network.empty())
        throw std::runtime_error(dir + ": no .rnet network file");
    if (drives.empty()) throw std::runtime_error(dir + ": no .drv drive files");
    std::sort(drives.begin(), drives.end());

    harness::Region region;
    region.name = fs::path(dir).filename().string();
    if (region.name.empty()) region.name = dir;
    region.graph = load_graph(network);

    std::size_t labeled = 0;
    std::vector<std::vector<int>> labels;
    for (const auto& d : drives) {
        region.drives.push_back(load_drive(d, region.graph));
        const auto lp = label_path_for(d);
        if (fs::exists(lp)) {
            auto lf = io::read_labels(lp, region.graph.size());
            if (lf.labels.size() != region.drives.back().epochs.size())
                throw std::runtime_error(lp + ": label count does not match " +
                                         basename_of(d));
            labels.push_back(std::move(lf.labels));
            ++labeled;
        } else {
            labels.emplace_back();
        }
    }
    if (labeled == drives.size())
        region.labels = std::move(labels);
    else if (labeled != 0)
        throw std::runtime_error(dir +
                                 ": some drives have .lab files and some do "
                                 "not; label all or none");
    return region;
}

// -------- subcommands --------

struct GenNetworkOpts {
    ScenarioOpts scenario;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void run_gen_network(const GenNetworkOpts& o) {
    sim::ScenarioConfig cfg = resolve_scenario(o.scenario);
    if (o.seed) cfg.seed = *o.seed;
    io::NetworkData net;
    net.roads = sim::generate_raw_roads(cfg);
    io::write_network(o.out, net);
    const auto graph = io::build_graph(net);
    std::cout << "network " << o.out << "\n";
    std::cout << "roads " << net.roads.size() << "\n";
    std::cout << "segments " << graph.size() << "\n";
}

struct GenDrivesOpts {
    ScenarioOpts scenario;
    std::string network;
    std::string out_dir;
    std::string prefix = "drive-";
    std::uint64_t seed = 0;
    int count = 1;
};

void run_gen_drives(const GenDrivesOpts& o) {
    if (o.count < 1) throw std::runtime_error("--count must be at least 1");
    const auto graph = load_graph(o.network);
    sim::ScenarioConfig cfg = resolve_scenario(o.scenario);
    std::filesystem::create_directories(o.out_dir);
    for (int i = 0; i < o.count; ++i) {
        const std::uint64_t seed = o.seed + static_cast<std::uint64_t>(i);
        io::DriveFileData drive;
        drive.config = cfg;
        drive.seed = seed;
        drive.network_ref = basename_of(o.network);
        auto rec = sim::generate_drive(graph, cfg, seed);
        drive.truth = std::move(rec.truth);
        drive.epochs = std::move(rec.epochs);
        const auto path = (std::filesystem::path(o.out_dir) /
                           (o.prefix + std::to_string(seed) + ".drv"))
                              .string();
        io::write_drive(path, drive);
        std::cout << "drive " << path << " epochs " << drive.epochs.size()
                  << "\n";
    }
}

struct LabelOracleOpts {
    SelectionOpts sel;
    std::string network;
    std::string out;
    std::vector<std::string> drives;
};

void run_label_oracle(const LabelOracleOpts& o) {
    if (!o.out.empty() && o.drives.size() != 1)
        throw std::runtime_error("--out needs exactly one drive");
    const auto graph = load_graph(o.network);
    for (const auto& dp : o.drives) {
        const auto drive = load_drive(dp, graph);
        io::LabelFileData lf;
        lf.drive_ref = basename_of(dp);
        lf.labels =
            harness::oracle_labels(drive, graph, o.sel.emission, o.sel.fov_radius);
        const auto path = o.out.empty() ? label_path_for(dp) : o.out;
        io::write_labels(path, lf);
        std::size_t labeled = 0;
        for (int l : lf.labels)
            if (l >= 0) ++labeled;
        std::cout << "labels " << path << " epochs " << lf.labels.size()
                  << " labeled " << labeled << "\n";
    }
}

struct RunOpts {
    SelectionOpts sel;
    std::string network;
    std::string drive;
    std::string method = "KF";
    std::string labels_path;
    std::string checkpoint;
    std::string out;
    double sigma_par2 = kalman::kInfVariance;
    double sigma_perp2 = 0.0;
    bool fixed_sigma = false;
    std::string user_mask, road_mask;
};

void run_run(const RunOpts& o) {
    const auto graph = load_graph(o.network);
    const auto drive = load_drive(o.drive, graph);

    harness::MethodConfig mc;
    mc.method = harness::parse_method(o.method);
    mc.emission = o.sel.emission;
    mc.fov_radius = o.sel.fov_radius;
    mc.sigma_par2 = o.sigma_par2;
    mc.sigma_perp2 = o.sigma_perp2;
    if (!o.user_mask.empty()) mc.user_feature_mask = parse_mask(o.user_mask);
    if (!o.road_mask.empty()) mc.road_feature_mask = parse_mask(o.road_mask);

    tgnn::TgnnModel model;
    std::vector<int> labels;
    if (mc.method == harness::Method::KfModel) {
        if (o.checkpoint.empty())
            throw std::runtime_error("method " + o.method +
                                     " needs --checkpoint");
        model = load_model(o.checkpoint);
        const auto actual =
            harness::method_name(harness::Method::KfModel, &model);
        if (actual != o.method)
            throw std::runtime_error("checkpoint holds a " + actual +
                                     " model, requested " + o.method);
        mc.model = &model;
        mc.learned_sigma = !o.fixed_sigma;
    }
    if (mc.method == harness::Method::KfOracle) {
        if (o.labels_path.empty())
            throw std::runtime_error("method KF+Oracle needs --labels");
        auto lf = io::read_labels(o.labels_path, graph.size());
        labels = std::move(lf.labels);
        mc.labels = &labels;
    }

    const auto res = harness::run_pipeline(drive, graph, mc);
    io::ResultFileData out;
    out.drive_ref = basename_of(o.drive);
    out.rows = res.rows;
    io::write_results(o.out, out);

    std::vector<double> errors;
    for (const auto& row : res.rows) errors.push_back(row.horizontal_error);
    const auto st = harness::error_stats(std::move(errors));
    std::cout << "method " << o.method << "\n";
    std::cout << "epochs " << st.epochs << "\n";
    std::cout << "he50_m " << fmt(st.he50) << "\n";
    std::cout << "he95_m " << fmt(st.he95) << "\n";
    std::cout << "results " << o.out << "\n";
}

struct GridSearchOpts {
    SelectionOpts sel;
    std::string network;
    std::string method = "KF+Instant";
    std::string table_out;
    std::vector<std::string> drives;
};

void run_grid_search(const GridSearchOpts& o) {
    const auto graph = load_graph(o.network);
    std::vector<io::DriveFileData> drives;
    drives.reserve(o.drives.size());
    for (const auto& dp : o.drives) drives.push_back(load_drive(dp, graph));
    std::vector<harness::BoundDrive> bound;
    for (const auto& d : drives) bound.push_back({&d, &graph, nullptr});

    harness::MethodConfig base;
    base.method = harness::parse_method(o.method);
    base.emission = o.sel.emission;
    base.fov_radius = o.sel.fov_radius;

    const auto res = harness::grid_search_sigma(bound, base);
    if (!o.table_out.empty()) {
        std::ofstream out(o.table_out + ".tmp", std::ios::binary);
        if (!out)
            throw std::runtime_error(o.table_out + ": cannot open for writing");
        out << "sigma_perp2,sigma_par2,he95_m\n";
        for (const auto& row : res.table)
            out << fmt(row[0]) << ',' << fmt(row[1]) << ',' << fmt(row[2])
                << '\n';
        out.flush();
        if (!out) throw std::runtime_error(o.table_out + ": write failed");
        out.close();
        if (std::rename((o.table_out + ".tmp").c_str(), o.table_out.c_str()) != 0)
            throw std::runtime_error(o.table_out + ": rename failed");
        std::cout << "table " << o.table_out << "\n";
    }
    std::cout << "combinations " << res.combinations << "\n";
    std::cout << "sigma_perp2 " << fmt(res.sigma_perp2) << "\n";
    std::cout << "sigma_par2 " << fmt(res.sigma_par2) << "\n";
    std::cout << "he95_m " << fmt(res.he95) << "\n";
}

struct TrainCliOpts {
    SelectionOpts sel;
    ModelOpts model;
    TrainOpts train;
    std::string network;
    std::string out;
    std::vector<std::string> drives;
    std::vector<std::string> labels;
    std::uint64_t seed = 0;
    bool quiet = false;
};

void run_train(const TrainCliOpts& o) {
    if (!o.labels.empty() && o.labels.size() != o.drives.size())
        throw std::runtime_error("--labels count must match the drive count");
    const auto graph = load_graph(o.network);

    std::vector<tgnn::DriveData> data;
    for (std::size_t i = 0; i < o.drives.size(); ++i) {
        const auto drive = load_drive(o.drives[i], graph);
        const auto lp =
            o.labels.empty() ? label_path_for(o.drives[i]) : o.labels[i];
        auto lf = io::read_labels(lp, graph.size());
        if (lf.labels.size() != drive.epochs.size())
            throw std::runtime_error(lp + ": label count does not match " +
                                     basename_of(o.drives[i]));
        data.push_back(harness::prepare_drive_data(drive, graph, lf.labels));
    }

    tgnn::TgnnConfig model_cfg = resolve_model(o.model);
    tgnn::TrainConfig train_cfg;
    resolve_train(o.train, o.sel, train_cfg);

    tgnn::TgnnModel model = tgnn::make_model(model_cfg, o.seed);
    std::cout << "params " << tgnn::param_count(model) << "\n";
    const auto on_metrics = [&](const tgnn::TrainMetrics& m) {
        if (o.quiet) return;
        std::cout << "iter " << m.iteration << " loss " << m.loss
                  << " label_accuracy " << m.label_accuracy << "\n";
    };
    tgnn::train(model, data, train_cfg, o.seed, on_metrics);

    io::CheckpointData ckpt;
    ckpt.config = model.cfg;
    ckpt.params = std::move(model.params);
    ckpt.bn_state = std::move(model.bn_state);
    io::write_checkpoint(o.out, ckpt);
    std::cout << "checkpoint " << o.out << "\n";
}

struct EvaluateOpts {
    SelectionOpts sel;
    ModelOpts model;
    TrainOpts train;
    std::vector<std::string> regions;
    std::string methods = "LS,KF,KF+Instant,KF+Viterbi,KF+Oracle,KF+TGNN";
    std::string seeds = "0";
    std::string out_csv;
    std::string out_svg;
    bool no_tune = false;
    double sigma_par2 = kalman::kInfVariance;
    double sigma_perp2 = 0.0;
};

void run_evaluate(const EvaluateOpts& o) {
    std::vector<harness::Region> regions;
    for (const auto& dir : o.regions) regions.push_back(load_region(dir));

    harness::EvalConfig cfg;
    cfg.methods = split_list(o.methods, ',');
    cfg.seeds = parse_seed_list(o.seeds);
    cfg.emission = o.sel.emission;
    cfg.fov_radius = o.sel.fov_radius;
    cfg.tune_sigma = !o.no_tune;
    cfg.sigma_par2 = o.sigma_par2;
    cfg.sigma_perp2 = o.sigma_perp2;
    cfg.model_config = resolve_model(o.model);
    resolve_train(o.train, o.sel, cfg.train_config);

    const auto report = harness::evaluate(regions, cfg);
    if (!o.out_csv.empty()) {
        harness::write_csv(o.out_csv, report.rows);
        std::cout << "csv " << o.out_csv << "\n";
    }
    if (!o.out_svg.empty()) {
        harness::write_cdf_svg(o.out_svg, report.cdf_errors);
        std::cout << "svg " << o.out_svg << "\n";
    }
    for (const auto& name : cfg.methods) {
        const auto& st = report.stats.at(name);
        std::cout << "method " << name << " he50_m " << fmt(st.he50_mean)
                  << " +- " << fmt(st.he50_std) << " he95_m "
                  << fmt(st.he95_mean) << " +- " << fmt(st.he95_std)
                  << " rows " << st.samples << "\n";
    }
}

struct PlotOpts {
    std::string out;
    std::vector<std::string> results;
};

void run_plot(const PlotOpts& o) {
    std::vector<io::ResultFileData> files;
    std::map<std::string, std::vector<double>> errors;
    for (const auto& rp : o.results) {
        files.push_back(io::read_results(rp));
        for (const auto& row : files.back().rows)
            errors[row.method].push_back(row.horizontal_error);
    }
    harness::write_cdf_svg(o.out, errors);
    std::cout << "svg " << o.out << "\n";
    for (const auto& [method, _] : errors) {
        const auto st = harness::stats_from_results(files, method);
        std::cout << "method " << method << " he50_m " << fmt(st.he50)
                  << " he95_m " << fmt(st.he95) << " epochs " << st.epochs
                  << "\n";
    }
}

struct GradcheckOpts {
    SelectionOpts sel;
    ModelOpts model;
    std::uint64_t seed = 0;
    int instances = 3;
    int entries = 3;  // probed entries per tensor; 0 checks every entry
    int window = 3;
    double tolerance = 1e-4;
};

double window_loss(tgnn::TgnnModel& model,
                   const std::vector<tgnn::WindowRef>& windows,
                   const tgnn::BuildOptions& opts) {
    ad::Tape tape;
    std::vector<ad::Value> pv;
    pv.reserve(model.params.size());
    for (auto& p : model.params) pv.push_back(tape.input(p));
    return tape.scalar(tgnn::build_batch_loss(tape, model, pv, windows, opts,
                                              nullptr));
}

void run_gradcheck(const GradcheckOpts& o) {
    GradcheckOpts opts_in = o;
    if (opts_in.model.config.blocks == 4 && opts_in.model.config.hidden == 32) {
        // Default to the reduced architecture; full size takes minutes.
        opts_in.model.config.blocks = 2;
        opts_in.model.config.hidden = 8;
    }
    sim::ScenarioConfig scen = sim::urban_scenario();
    scen.extent = 300.0;
    scen.block = 100.0;
    scen.oneway_fraction = 0.0;
    scen.duration = 60.0;
    scen.seed = o.seed;
    const auto graph = sim::generate_network(scen);
    io::DriveFileData drive;
    auto rec = sim::generate_drive(graph, scen, o.seed + 1);
    drive.truth = std::move(rec.truth);
    drive.epochs = std::move(rec.epochs);
    const auto labels =
        harness::oracle_labels(drive, graph, o.sel.emission, o.sel.fov_radius);
    const auto data = harness::prepare_drive_data(drive, graph, labels);

    tgnn::BuildOptions build;
    build.bn_train = false;
    build.teacher_forcing = true;
    build.viterbi_prior = true;
    build.chain_sigma = {{4.0, 2.0}};
    build.emission = o.sel.emission;
    build.fov_radius = o.sel.fov_radius;

    const tgnn::TgnnConfig model_cfg = resolve_model(opts_in.model);
    double worst = 0.0;
    std::string worst_at;
    for (int inst = 0; inst < o.instances; ++inst) {
        tgnn::TgnnModel model =
            tgnn::make_model(model_cfg, o.seed + 100 * (inst + 1));
        std::vector<tgnn::WindowRef> windows{
            {&data, 1 + 4 * inst, std::max(1, o.window)}};

        ad::Tape tape;
        std::vector<ad::Value> pv;
        for (auto& p : model.params) pv.push_back(tape.input(p));
        tgnn::BuildStats stats;
        const ad::Value loss =
            tgnn::build_batch_loss(tape, model, pv, windows, build, &stats);
        if (stats.contributing_epochs == 0)
            throw std::runtime_error(
                "gradcheck window has no labeled epochs; try another --seed");
        tape.backward(loss);
        std::vector<ad::Tensor> grads;
        for (ad::Value v : pv) grads.push_back(tape.grad(v));

        const double h = 1e-5;
        double inst_worst = 0.0;
        std::string inst_at;
        for (std::size_t ti = 0; ti < model.params.size(); ++ti) {
            ad::Tensor& p = model.params[ti];
            const int n = p.size();
            const int probes = o.entries <= 0 ? n : std::min(o.entries, n);
            for (int e = 0; e < probes; ++e) {
                const int idx =
                    probes == 1 ? 0
                    : o.entries <= 0 ? e
                                     : e * (n - 1) / (probes - 1);
                const double keep = p.v[idx];
                p.v[idx] = keep + h;
                const double fp = window_loss(model, windows, build);
                p.v[idx] = keep - h;
                const double fm = window_loss(model, windows, build);
                p.v[idx] = keep;
                const double fd = (fp - fm) / (2.0 * h);
                const double g = grads[ti].v[idx];
                const double rel = std::abs(g - fd) /
                                   std::max({1.0, std::abs(g), std::abs(fd)});
                if (rel > inst_worst) {
                    inst_worst = rel;
                    inst_at = tgnn::param_name(model.cfg, static_cast<int>(ti)) +
                              "[" + std::to_string(idx) + "]";
                }
            }
        }
        std::cout << "instance " << inst << " max_rel_err " << fmt(inst_worst)
                  << " at " << inst_at << "\n";
        if (inst_worst > worst) {
            worst = inst_worst;
            worst_at = inst_at;
        }
    }
    std::cout << "worst " << fmt(worst) << " at " << worst_at << "\n";
    if (worst >= o.tolerance)
        throw std::runtime_error("gradcheck failed: " + fmt(worst) + " at " +
                                 worst_at + " exceeds " + fmt(o.tolerance));
    std::cout << "gradcheck OK\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Road-aided GNSS positioning toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "roadkf 0.1.0");

    auto gn = std::make_shared<GenNetworkOpts>();
    {
        auto* cmd = app.add_subcommand("gen-network",
                                       "Generate a synthetic road network");
        add_scenario_opts(cmd, gn->scenario);
        cmd->add_option("--seed", gn->seed,
                        "Network geometry seed (overrides the config's seed "
                        "key)");
        cmd->add_option("--out,-o", gn->out, "Output network file (.rnet)")->required();
        cmd->callback([gn]() { run_gen_network(*gn); });
    }

    auto gd = std::make_shared<GenDrivesOpts>();
    {
        auto* cmd = app.add_subcommand(
            "gen-drives", "Simulate drives with GNSS measurements");
        add_scenario_opts(cmd, gd->scenario);
        cmd->add_option("--network", gd->network, "Network file (.rnet)")->required();
        cmd->add_option("--out-dir", gd->out_dir, "Output directory")->required();
        cmd->add_option("--prefix", gd->prefix, "Drive file name prefix")
            ->capture_default_str();
        cmd->add_option("--seed", gd->seed,
                        "First drive seed; drive i uses seed+i")
            ->capture_default_str();
        cmd->add_option("--count", gd->count, "Number of drives")
            ->capture_default_str();
        cmd->callback([gd]() { run_gen_drives(*gd); });
    }

    auto lo = std::make_shared<LabelOracleOpts>();
    {
        auto* cmd = app.add_subcommand(
            "label-oracle",
            "Label drives with offline bidirectional-Viterbi road selections");
        add_selection_opts(cmd, lo->sel);
        cmd->add_option("--network", lo->network, "Network file (.rnet)")->required();
        cmd->add_option("--out", lo->out,
                        "Output label file (single drive only; default: "
                        "<drive>.lab next to each drive)");
        cmd->add_option("drives", lo->drives, "Drive files (.drv)")->required();
        cmd->callback([lo]() { run_label_oracle(*lo); });
    }

    auto rn = std::make_shared<RunOpts>();
    {
        auto* cmd = app.add_subcommand(
            "run", "Run one positioning method over a stored drive");
        add_selection_opts(cmd, rn->sel);
        cmd->add_option("--network", rn->network, "Network file (.rnet)")->required();
        cmd->add_option("--drive", rn->drive, "Drive file (.drv)")->required();
        cmd->add_option("--method", rn->method,
                        "LS, KF, KF+Instant, KF+Viterbi, KF+Oracle, KF+TGNN, "
                        "KF+GNN, KF+MLP")
            ->capture_default_str();
        cmd->add_option("--labels", rn->labels_path,
                        "Label file (KF+Oracle only)");
        cmd->add_option("--checkpoint", rn->checkpoint,
                        "Model checkpoint (model methods only)");
        cmd->add_option("--sigma-par2", rn->sigma_par2,
                        "Along-road variance [m^2]")
            ->capture_default_str();
        cmd->add_option("--sigma-perp2", rn->sigma_perp2,
                        "Cross-road variance [m^2]")
            ->capture_default_str();
        cmd->add_flag("--fixed-sigma", rn->fixed_sigma,
                      "Model methods: use --sigma-* instead of the predicted "
                      "variances");
        cmd->add_option("--user-mask", rn->user_mask,
                        "Comma list of 0/1 per user feature column");
        cmd->add_option("--road-mask", rn->road_mask,
                        "Comma list of 0/1 per road feature column");
        cmd->add_option("--out,-o", rn->out, "Output results file (.res)")->required();
        cmd->callback([rn]() { run_run(*rn); });
    }

    auto gs = std::make_shared<GridSearchOpts>();
    {
        auto* cmd = app.add_subcommand(
            "grid-search",
            "Tune road variances over the 231-point grid by training HE@95");
        add_selection_opts(cmd, gs->sel);
        cmd->add_option("--network", gs->network, "Network file (.rnet)")->required();
        cmd->add_option("--method", gs->method, "KF+Instant or KF+Viterbi")
            ->capture_default_str();
        cmd->add_option("--table", gs->table_out,
                        "Write the full combination table as CSV");
        cmd->add_option("drives", gs->drives, "Training drive files (.drv)")->required();
        cmd->callback([gs]() { run_grid_search(*gs); });
    }

    auto tr = std::make_shared<TrainCliOpts>();
    {
        auto* cmd = app.add_subcommand("train",
                                       "Train a road selection model");
        add_selection_opts(cmd, tr->sel);
        add_model_opts(cmd, tr->model);
        add_train_opts(cmd, tr->train);
        cmd->add_option("--network", tr->network, "Network file (.rnet)")->required();
        cmd->add_option("--labels", tr->labels,
                        "Label files, parallel to the drives (default: "
                        "<drive>.lab next to each drive)")
            ->allow_extra_args(false);
        cmd->add_option("--seed", tr->seed, "Init and sampling seed")
            ->capture_default_str();
        cmd->add_flag("--quiet", tr->quiet, "Suppress progress lines");
        cmd->add_option("--out,-o", tr->out, "Output checkpoint file (.ckpt)")->required();
        cmd->add_option("drives", tr->drives, "Training drive files (.drv)")->required();
        cmd->callback([tr]() { run_train(*tr); });
    }

    auto ev = std::make_shared<EvaluateOpts>();
    {
        auto* cmd = app.add_subcommand(
            "evaluate",
            "Leave-one-out cross-validation over region directories");
        add_selection_opts(cmd, ev->sel);
        add_model_opts(cmd, ev->model);
        add_train_opts(cmd, ev->train);
        cmd->add_option("--region", ev->regions,
                        "Region directory (one .rnet plus .drv/.lab files); "
                        "repeat for each fold")
            ->required()
            ->allow_extra_args(false);
        cmd->add_option("--methods", ev->methods, "Comma-separated methods")
            ->capture_default_str();
        cmd->add_option("--seeds", ev->seeds,
                        "Seeds for learnable methods, e.g. 0,1,2 or 0..9")
            ->capture_default_str();
        cmd->add_option("--out-csv", ev->out_csv, "Results table (.csv)");
        cmd->add_option("--out-svg", ev->out_svg, "CDF plot (.svg)");
        cmd->add_flag("--no-tune", ev->no_tune,
                      "Skip grid search; use --sigma-* for Instant/Viterbi");
        cmd->add_option("--sigma-par2", ev->sigma_par2,
                        "Fallback along-road variance [m^2]")
            ->capture_default_str();
        cmd->add_option("--sigma-perp2", ev->sigma_perp2,
                        "Fallback cross-road variance [m^2]")
            ->capture_default_str();
        cmd->callback([ev]() { run_evaluate(*ev); });
    }

    auto pl = std::make_shared<PlotOpts>();
    {
        auto* cmd = app.add_subcommand(
            "plot", "Plot a CDF of horizontal errors from result files");
        cmd->add_option("--out,-o", pl->out, "Output SVG file")->required();
        cmd->add_option("results", pl->results, "Result files (.res)")->required();
        cmd->callback([pl]() { run_plot(*pl); });
    }

    auto gc = std::make_shared<GradcheckOpts>();
    {
        auto* cmd = app.add_subcommand(
            "gradcheck",
            "Check model gradients against central finite differences");
        add_selection_opts(cmd, gc->sel);
        add_model_opts(cmd, gc->model);
        cmd->add_option("--seed", gc->seed, "Scenario and init seed")
            ->capture_default_str();
        cmd->add_option("--instances", gc->instances, "Random instances")
            ->capture_default_str();
        cmd->add_option("--entries", gc->entries,
                        "Probed entries per tensor (0 = every entry)")
            ->capture_default_str();
        cmd->add_option("--window", gc->window, "Window length in epochs")
            ->capture_default_str();
        cmd->add_option("--tolerance", gc->tolerance,
                        "Maximum allowed relative error")
            ->capture_default_str();
        cmd->callback([gc]() { run_gradcheck(*gc); });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        const auto* sub =
            app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        std::cerr << sub->help();
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
