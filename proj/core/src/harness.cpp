#include "roadkf/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace roadkf::harness {

namespace {

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

int argmax_prob(const std::vector<double>& probs) {
    int best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
        if (probs[i] > probs[best]) best = static_cast<int>(i);
    return best;
}

}  // namespace

std::string method_name(Method m, const tgnn::TgnnModel* model) {
    switch (m) {
        case Method::Ls: return "LS";
        case Method::Kf: return "KF";
        case Method::KfInstant: return "KF+Instant";
        case Method::KfViterbi: return "KF+Viterbi";
        case Method::KfOracle: return "KF+Oracle";
        case Method::KfModel:
            if (!model) return "KF+TGNN";
            switch (model->cfg.variant) {
                case tgnn::Variant::Tgnn: return "KF+TGNN";
                case tgnn::Variant::Gnn: return "KF+GNN";
                case tgnn::Variant::Mlp: return "KF+MLP";
            }
            return "KF+TGNN";
    }
    return "KF";
}

Method parse_method(const std::string& name) {
    if (name == "LS") return Method::Ls;
    if (name == "KF") return Method::Kf;
    if (name == "KF+Instant") return Method::KfInstant;
    if (name == "KF+Viterbi") return Method::KfViterbi;
    if (name == "KF+Oracle") return Method::KfOracle;
    if (name == "KF+TGNN" || name == "KF+GNN" || name == "KF+MLP")
        return Method::KfModel;
    throw std::runtime_error("unknown method '" + name + "'");
}

tgnn::Variant variant_for_name(const std::string& name) {
    if (name == "KF+TGNN") return tgnn::Variant::Tgnn;
    if (name == "KF+GNN") return tgnn::Variant::Gnn;
    if (name == "KF+MLP") return tgnn::Variant::Mlp;
    throw std::runtime_error("method '" + name + "' does not take a model");
}

std::vector<kalman::KfEstimate> gnss_only_trajectory(
    const io::DriveFileData& drive) {
    std::vector<kalman::KfEstimate> out;
    out.reserve(drive.epochs.size());
    kalman::KfEstimate est;
    for (std::size_t k = 0; k < drive.epochs.size(); ++k) {
        const auto& ep = drive.epochs[k];
        if (k == 0) {
            est = kalman::init_from_fix(kalman::least_squares_fix(ep));
        } else {
            est = kalman::predict(est, ep.time - drive.epochs[k - 1].time);
        }
        est = kalman::gnss_update(est, ep);
        out.push_back(est);
    }
    return out;
}

PipelineResult run_pipeline(const io::DriveFileData& drive,
                            const roadnet::RoadGraph& graph,
                            const MethodConfig& mc) {
    if (drive.truth.size() != drive.epochs.size())
        throw std::invalid_argument("drive truth and epochs differ in length");
    if (mc.method == Method::KfModel && mc.model == nullptr)
        throw std::invalid_argument("KF+model method needs a model");
    if (mc.method == Method::KfOracle) {
        if (mc.labels == nullptr)
            throw std::invalid_argument("KF+Oracle needs stored labels");
        if (mc.labels->size() != drive.epochs.size())
            throw std::invalid_argument("label count does not match the drive");
    }

    PipelineResult out;
    out.rows.reserve(drive.epochs.size());
    out.selections.assign(drive.epochs.size(), -1);
    const std::string name = method_name(mc.method, mc.model);

    if (mc.method == Method::Ls) {
        for (std::size_t k = 0; k < drive.epochs.size(); ++k) {
            const auto fix = kalman::least_squares_fix(drive.epochs[k]);
            io::ResultRow row;
            row.method = name;
            row.time = drive.epochs[k].time;
            row.east = fix.position.east;
            row.north = fix.position.north;
            row.horizontal_error =
                geo::horizontal_distance(fix.position, drive.truth[k].position);
            out.rows.push_back(std::move(row));
        }
        return out;
    }

    kalman::KfEstimate est;
    selection::ViterbiBelief belief;
    ad::Tape tape;
    tgnn::LstmState state;
    tgnn::PriorMap prev;
    if (mc.method == Method::KfModel)
        state = tgnn::make_lstm_state(mc.model->cfg, 1);

    for (std::size_t k = 0; k < drive.epochs.size(); ++k) {
        const auto& ep = drive.epochs[k];
        if (k == 0) {
            est = kalman::init_from_fix(kalman::least_squares_fix(ep));
        } else {
            est = kalman::predict(est, ep.time - drive.epochs[k - 1].time);
        }
        est = kalman::gnss_update(est, ep);

        if (mc.method != Method::Kf) {
            const std::vector<int> cands =
                roadnet::field_of_view(graph, est.position(), mc.fov_radius);
            int pick = -1;
            double sp = mc.sigma_par2;
            double sq = mc.sigma_perp2;
            switch (mc.method) {
                case Method::KfInstant: {
                    const auto sel = selection::instant_select(cands, est, graph);
                    if (sel) pick = *sel;
                    break;
                }
                case Method::KfViterbi: {
                    const auto sel =
                        selection::viterbi_step(belief, cands, est, graph,
                                                mc.emission);
                    if (sel) pick = *sel;
                    break;
                }
                case Method::KfOracle: {
                    pick = (*mc.labels)[k];
                    sp = 0.0;
                    sq = 0.0;
                    break;
                }
                case Method::KfModel: {
                    const auto& cfg = mc.model->cfg;
                    ad::Tensor x = tgnn::user_features(est, cfg);
                    if (!mc.user_feature_mask.empty()) {
                        if (static_cast<int>(mc.user_feature_mask.size()) != x.cols)
                            throw std::invalid_argument(
                                "user feature mask size mismatch");
                        for (int j = 0; j < x.cols; ++j)
                            if (!mc.user_feature_mask[j]) x.at(0, j) = 0.0;
                    }
                    ad::Tensor R(0, tgnn::road_feature_dim(cfg));
                    ad::Tensor A(0, 0);
                    if (!cands.empty()) {
                        R = tgnn::road_features(est, cands, graph, prev, cfg);
                        if (!mc.road_feature_mask.empty()) {
                            if (static_cast<int>(mc.road_feature_mask.size()) !=
                                R.cols)
                                throw std::invalid_argument(
                                    "road feature mask size mismatch");
                            for (int i = 0; i < R.rows; ++i)
                                for (int j = 0; j < R.cols; ++j)
                                    if (!mc.road_feature_mask[j]) R.at(i, j) = 0.0;
                        }
                        A = tgnn::normalized_adjacency(cands, graph);
                    }
                    const auto fwd = tgnn::forward(tape, *mc.model, x, R, A, state);
                    if (!cands.empty()) {
                        pick = cands[argmax_prob(fwd.probs)];
                        if (mc.learned_sigma) {
                            sp = fwd.sigma_par2;
                            sq = fwd.sigma_perp2;
                        }
                        prev.clear();
                        for (std::size_t i = 0; i < cands.size(); ++i)
                            prev[cands[i]] = fwd.probs[i];
                    }
                    break;
                }
                default: break;
            }
            if (pick >= 0) {
                const auto obs =
                    kalman::build_road_observation(est, graph.segment(pick), sp, sq);
                est = kalman::road_update(est, obs);
                out.selections[k] = pick;
            }
        }

        io::ResultRow row;
        row.method = name;
        row.time = ep.time;
        const geo::EnuPoint pos = est.position();
        row.east = pos.east;
        row.north = pos.north;
        row.horizontal_error =
            geo::horizontal_distance(pos, drive.truth[k].position);
        out.rows.push_back(std::move(row));
    }
    return out;
}

std::vector<int> oracle_labels(const io::DriveFileData& drive,
                               const roadnet::RoadGraph& graph,
                               const selection::EmissionParams& p,
                               double fov_radius) {
    const auto ests = gnss_only_trajectory(drive);
    return selection::bidirectional_viterbi(ests, graph, p, fov_radius);
}

tgnn::DriveData prepare_drive_data(const io::DriveFileData& drive,
                                   const roadnet::RoadGraph& graph,
                                   const std::vector<int>& labels) {
    if (!labels.empty() && labels.size() != drive.epochs.size())
        throw std::invalid_argument("label count does not match the drive");
    tgnn::DriveData data;
    data.graph = &graph;
    data.gnss_only = gnss_only_trajectory(drive);
    data.epochs.reserve(drive.epochs.size());
    for (std::size_t k = 0; k < drive.epochs.size(); ++k) {
        tgnn::EpochRecord rec;
        rec.gnss = drive.epochs[k];
        rec.truth = drive.truth[k].position;
        const auto& v = drive.truth[k].velocity;
        rec.truth_heading = std::hypot(v.east, v.north) >= selection::kMinHeadingSpeed
                                ? geo::wrap_angle(std::atan2(v.north, v.east))
                                : 0.0;
        rec.oracle_label = labels.empty() ? -1 : labels[k];
        data.epochs.push_back(std::move(rec));
    }
    return data;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty())
        throw std::invalid_argument("percentile of an empty sample");
    if (!(q >= 0.0 && q <= 1.0))
        throw std::invalid_argument("percentile rank must be in [0,1]");
    std::sort(values.begin(), values.end());
    const double x = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(x);
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (x - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

ErrorStats error_stats(std::vector<double> errors) {
    ErrorStats s;
    s.epochs = errors.size();
    if (errors.empty()) return s;
    std::sort(errors.begin(), errors.end());
    const auto at = [&](double q) {
        const double x = q * static_cast<double>(errors.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(x);
        const std::size_t hi = std::min(lo + 1, errors.size() - 1);
        return errors[lo] +
               (x - static_cast<double>(lo)) * (errors[hi] - errors[lo]);
    };
    s.he50 = at(0.5);
    s.he95 = at(0.95);
    return s;
}

ErrorStats stats_from_results(const std::vector<io::ResultFileData>& files,
                              const std::string& method) {
    std::vector<double> errors;
    for (const auto& f : files)
        for (const auto& r : f.rows)
            if (r.method == method) errors.push_back(r.horizontal_error);
    return error_stats(std::move(errors));
}

GridSearchResult grid_search_sigma(const std::vector<BoundDrive>& drives,
                                   const MethodConfig& base) {
    if (drives.empty())
        throw std::invalid_argument("grid search needs training drives");
    if (base.method != Method::KfInstant && base.method != Method::KfViterbi)
        throw std::invalid_argument(
            "grid search tunes KF+Instant or KF+Viterbi only");

    // 11 x 21 = 231 combinations; the uninformative sentinel caps the
    // parallel range.
    std::vector<double> perps, pars;
    for (int i = 0; i <= 10; ++i) perps.push_back(static_cast<double>(i));
    for (int i = 0; i <= 10; ++i) pars.push_back(static_cast<double>(i));
    for (int i = 1; i <= 9; ++i) pars.push_back(100.0 * i);
    pars.push_back(kalman::kInfVariance);

    GridSearchResult best;
    best.he95 = std::numeric_limits<double>::infinity();
    for (double perp : perps) {
        for (double par : pars) {
            MethodConfig mc = base;
            mc.sigma_perp2 = perp;
            mc.sigma_par2 = par;
            std::vector<double> errors;
            for (const auto& bd : drives) {
                const auto res = run_pipeline(*bd.drive, *bd.graph, mc);
                for (const auto& row : res.rows)
                    errors.push_back(row.horizontal_error);
            }
            const double he95 = percentile(std::move(errors), 0.95);
            best.table.push_back({perp, par, he95});
            ++best.combinations;
            if (he95 < best.he95) {
                best.he95 = he95;
                best.sigma_perp2 = perp;
                best.sigma_par2 = par;
            }
        }
    }
    return best;
}

namespace {

SeedStats stats_over_rows(const std::vector<EvalRow>& rows,
                          const std::string& method) {
    std::vector<double> he50, he95;
    for (const auto& r : rows)
        if (r.method == method) {
            he50.push_back(r.he50_m);
            he95.push_back(r.he95_m);
        }
    SeedStats s;
    s.samples = static_cast<int>(he50.size());
    if (he50.empty()) return s;
    auto mean = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) acc += x;
        return acc / static_cast<double>(v.size());
    };
    auto stdev = [&](const std::vector<double>& v, double m) {
        if (v.size() < 2) return 0.0;
        double acc = 0.0;
        for (double x : v) acc += (x - m) * (x - m);
        return std::sqrt(acc / static_cast<double>(v.size() - 1));
    };
    s.he50_mean = mean(he50);
    s.he95_mean = mean(he95);
    s.he50_std = stdev(he50, s.he50_mean);
    s.he95_std = stdev(he95, s.he95_mean);
    return s;
}

}  // namespace

EvalReport evaluate(const std::vector<Region>& regions, const EvalConfig& cfg) {
    if (regions.size() < 2)
        throw std::invalid_argument("cross-validation needs at least 2 regions");
    if (cfg.methods.empty())
        throw std::invalid_argument("no methods requested");
    for (const auto& r : regions)
        if (!r.labels.empty() && r.labels.size() != r.drives.size())
            throw std::invalid_argument("region '" + r.name +
                                        "' labels do not match its drives");

    EvalReport report;
    for (std::size_t fold = 0; fold < regions.size(); ++fold) {
        const Region& holdout = regions[fold];

        std::vector<BoundDrive> train;
        std::vector<tgnn::DriveData> train_data;
        for (std::size_t r = 0; r < regions.size(); ++r) {
            if (r == fold) continue;
            for (std::size_t d = 0; d < regions[r].drives.size(); ++d) {
                BoundDrive bd;
                bd.drive = &regions[r].drives[d];
                bd.graph = &regions[r].graph;
                bd.labels =
                    regions[r].labels.empty() ? nullptr : &regions[r].labels[d];
                train.push_back(bd);
            }
        }

        auto run_holdout = [&](const MethodConfig& base) {
            std::vector<double> errors;
            for (std::size_t d = 0; d < holdout.drives.size(); ++d) {
                MethodConfig mc = base;
                if (mc.method == Method::KfOracle) {
                    if (holdout.labels.empty())
                        throw std::invalid_argument(
                            "KF+Oracle needs labels for region '" + holdout.name +
                            "'");
                    mc.labels = &holdout.labels[d];
                }
                const auto res =
                    run_pipeline(holdout.drives[d], holdout.graph, mc);
                for (const auto& row : res.rows)
                    errors.push_back(row.horizontal_error);
            }
            return errors;
        };

        for (const auto& name : cfg.methods) {
            const Method m = parse_method(name);
            MethodConfig base;
            base.method = m;
            base.emission = cfg.emission;
            base.fov_radius = cfg.fov_radius;
            base.sigma_par2 = cfg.sigma_par2;
            base.sigma_perp2 = cfg.sigma_perp2;

            if (m == Method::KfModel) {
                // Train-fold drives must carry labels for the CE loss.
                if (train_data.empty()) {
                    for (const auto& bd : train)
                        train_data.push_back(prepare_drive_data(
                            *bd.drive, *bd.graph,
                            bd.labels ? *bd.labels : std::vector<int>{}));
                }
                for (std::uint64_t seed : cfg.seeds) {
                    tgnn::TgnnConfig mc_cfg = cfg.model_config;
                    mc_cfg.variant = variant_for_name(name);
                    tgnn::TgnnModel model = tgnn::make_model(mc_cfg, seed);
                    tgnn::train(model, train_data, cfg.train_config, seed);
                    MethodConfig mc = base;
                    mc.model = &model;
                    auto errors = run_holdout(mc);
                    EvalRow row;
                    row.method = name;
                    row.fold = static_cast<int>(fold);
                    row.seed = seed;
                    const auto st = error_stats(errors);
                    row.he50_m = st.he50;
                    row.he95_m = st.he95;
                    row.epochs = st.epochs;
                    row.drives = static_cast<int>(holdout.drives.size());
                    report.rows.push_back(row);
                    if (seed == cfg.seeds.front()) {
                        auto& pool = report.cdf_errors[name];
                        pool.insert(pool.end(), errors.begin(), errors.end());
                    }
                }
                continue;
            }

            if (cfg.tune_sigma &&
                (m == Method::KfInstant || m == Method::KfViterbi)) {
                const auto grid = grid_search_sigma(train, base);
                base.sigma_perp2 = grid.sigma_perp2;
                base.sigma_par2 = grid.sigma_par2;
            }
            auto errors = run_holdout(base);
            EvalRow row;
            row.method = name;
            row.fold = static_cast<int>(fold);
            row.seed = 0;
            const auto st = error_stats(errors);
            row.he50_m = st.he50;
            row.he95_m = st.he95;
            row.epochs = st.epochs;
            row.drives = static_cast<int>(holdout.drives.size());
            report.rows.push_back(row);
            auto& pool = report.cdf_errors[name];
            pool.insert(pool.end(), errors.begin(), errors.end());
        }
    }

    for (const auto& name : cfg.methods)
        report.stats[name] = stats_over_rows(report.rows, name);
    return report;
}

void write_csv(const std::string& path, const std::vector<EvalRow>& rows) {
    const std::string tmp = path + ".tmp";
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << "method,fold,seed,he50_m,he95_m,epochs,drives\n";
    for (const auto& r : rows)
        out << r.method << ',' << r.fold << ',' << r.seed << ',' << fmt(r.he50_m)
            << ',' << fmt(r.he95_m) << ',' << r.epochs << ',' << r.drives << '\n';
    out.flush();
    if (!out) throw std::runtime_error(path + ": write failed");
    out.close();
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error(path + ": rename failed");
}

void write_cdf_svg(const std::string& path,
                   const std::map<std::string, std::vector<double>>& errors) {
    static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
    constexpr double kW = 720, kH = 480;
    constexpr double kL = 70, kR = 24, kT = 40, kB = 56;
    const double plot_w = kW - kL - kR;
    const double plot_h = kH - kT - kB;

    double xmax = 1.0;
    for (const auto& [name, vals] : errors) {
        if (vals.empty()) continue;
        std::vector<double> sorted(vals);
        std::sort(sorted.begin(), sorted.end());
        const std::size_t idx =
            static_cast<std::size_t>(0.99 * static_cast<double>(sorted.size() - 1));
        xmax = std::max(xmax, sorted[idx]);
    }
    xmax = std::ceil(xmax / 10.0) * 10.0;

    auto px = [&](double e) { return kL + plot_w * std::min(e / xmax, 1.0); };
    auto py = [&](double p) { return kT + plot_h * (1.0 - p); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW
        << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW << ' ' << kH
        << "\">\n";
    svg << "<rect width=\"" << kW << "\" height=\"" << kH
        << "\" fill=\"white\"/>\n";
    svg << "<text x=\"" << kW / 2
        << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"15\">Horizontal error CDF</text>\n";

    for (int g = 0; g <= 10; ++g) {
        const double p = g / 10.0;
        svg << "<line x1=\"" << kL << "\" y1=\"" << py(p) << "\" x2=\"" << kW - kR
            << "\" y2=\"" << py(p) << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
        if (g % 2 == 0)
            svg << "<text x=\"" << kL - 8 << "\" y=\"" << py(p) + 4
                << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
                   "font-size=\"11\">"
                << p << "</text>\n";
    }
    for (int g = 0; g <= 5; ++g) {
        const double e = xmax * g / 5.0;
        svg << "<line x1=\"" << px(e) << "\" y1=\"" << kT << "\" x2=\"" << px(e)
            << "\" y2=\"" << kH - kB
            << "\" stroke=\"#eeeeee\" stroke-width=\"1\"/>\n";
        svg << "<text x=\"" << px(e) << "\" y=\"" << kH - kB + 18
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
               "font-size=\"11\">"
            << e << "</text>\n";
    }
    svg << "<text x=\"" << kL + plot_w / 2 << "\" y=\"" << kH - 14
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"12\">horizontal error (m)</text>\n";
    svg << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL
        << "\" y2=\"" << kH - kB << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR
        << "\" y2=\"" << kH - kB << "\" stroke=\"black\"/>\n";

    int color = 0;
    double legend_y = kT + 14;
    for (const auto& [name, vals] : errors) {
        const char* stroke = kColors[color % 8];
        ++color;
        if (!vals.empty()) {
            std::vector<double> sorted(vals);
            std::sort(sorted.begin(), sorted.end());
            svg << "<polyline fill=\"none\" stroke=\"" << stroke
                << "\" stroke-width=\"1.6\" points=\"";
            svg << px(0.0) << ',' << py(0.0) << ' ';
            for (std::size_t i = 0; i < sorted.size(); ++i) {
                const double p =
                    static_cast<double>(i + 1) / static_cast<double>(sorted.size());
                svg << px(sorted[i]) << ',' << py(p) << ' ';
            }
            svg << px(xmax) << ',' << py(1.0);
            svg << "\"/>\n";
        }
        svg << "<rect x=\"" << kW - kR - 170 << "\" y=\"" << legend_y - 9
            << "\" width=\"14\" height=\"4\" fill=\"" << stroke << "\"/>\n";
        svg << "<text x=\"" << kW - kR - 150 << "\" y=\"" << legend_y
            << "\" font-family=\"sans-serif\" font-size=\"12\">" << name
            << "</text>\n";
        legend_y += 18;
    }
    svg << "</svg>\n";

    const std::string tmp = path + ".tmp";
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << svg.str();
    out.flush();
    if (!out) throw std::runtime_error(path + ": write failed");
    out.close();
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error(path + ": rename failed");
}

}  // namespace roadkf::harness
