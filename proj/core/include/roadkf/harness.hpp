#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "roadkf/io.hpp"
#include "roadkf/kalman.hpp"
#include "roadkf/road_graph.hpp"
#include "roadkf/selection.hpp"
#include "roadkf/tgnn.hpp"

// Pipeline orchestration and evaluation: run a positioning method over a
// stored drive, tune road covariances by grid search, cross-validate across
// regions, and emit CSV tables and SVG CDF plots.

namespace roadkf::harness {

enum class Method { Ls, Kf, KfInstant, KfViterbi, KfOracle, KfModel };

/// Display name; KfModel renders per the model's variant (KF+TGNN, KF+GNN,
/// KF+MLP) and needs the model handle for that.
std::string method_name(Method m, const tgnn::TgnnModel* model = nullptr);
/// Accepts the display names. Throws std::runtime_error on unknown names.
Method parse_method(const std::string& name);
/// Model variant implied by a display name (KF+TGNN, KF+GNN, KF+MLP only).
tgnn::Variant variant_for_name(const std::string& name);

struct MethodConfig {
    Method method = Method::Kf;
    // Fixed road variances for KF+Instant / KF+Viterbi (and for KfModel when
    // learned_sigma is off).
    double sigma_par2 = kalman::kInfVariance;
    double sigma_perp2 = 0.0;
    bool learned_sigma = true;  // KfModel: use the predicted variances
    selection::EmissionParams emission;
    double fov_radius = 50.0;
    const tgnn::TgnnModel* model = nullptr;    // required for KfModel
    const std::vector<int>* labels = nullptr;  // required for KfOracle
    // Ablation masks; empty means every feature stays on. False zeroes the
    // column at inference.
    std::vector<bool> user_feature_mask;
    std::vector<bool> road_feature_mask;
};

struct PipelineResult {
    std::vector<io::ResultRow> rows;  // one per epoch
    std::vector<int> selections;      // road used per epoch, -1 when none
};

/// Per epoch: predict, GNSS update, then one road update when the method
/// selects a segment from the field of view. LS solves each epoch
/// independently. Throws std::invalid_argument on a method missing its
/// required inputs (model, labels).
PipelineResult run_pipeline(const io::DriveFileData& drive,
                            const roadnet::RoadGraph& graph,
                            const MethodConfig& mc);

/// GNSS-only posterior trajectory (no road updates).
std::vector<kalman::KfEstimate> gnss_only_trajectory(
    const io::DriveFileData& drive);

/// Offline bidirectional-Viterbi labels over the GNSS-only trajectory; -1
/// where no candidate is in view.
std::vector<int> oracle_labels(const io::DriveFileData& drive,
                               const roadnet::RoadGraph& graph,
                               const selection::EmissionParams& p = {},
                               double fov_radius = 50.0);

/// Package a stored drive for training. `labels` may be empty (unlabeled).
tgnn::DriveData prepare_drive_data(const io::DriveFileData& drive,
                                   const roadnet::RoadGraph& graph,
                                   const std::vector<int>& labels);

/// Linear interpolation between order statistics; q in [0,1].
double percentile(std::vector<double> values, double q);

struct ErrorStats {
    double he50 = 0.0;
    double he95 = 0.0;
    std::size_t epochs = 0;
};
ErrorStats error_stats(std::vector<double> errors);

/// Pooled stats for one method over stored result files; metrics stay pure
/// functions of the files.
ErrorStats stats_from_results(const std::vector<io::ResultFileData>& files,
                              const std::string& method);

/// A drive bound to its region graph (and labels where the method needs
/// them).
struct BoundDrive {
    const io::DriveFileData* drive = nullptr;
    const roadnet::RoadGraph* graph = nullptr;
    const std::vector<int>* labels = nullptr;
};

struct GridSearchResult {
    double sigma_perp2 = 0.0;
    double sigma_par2 = 0.0;
    double he95 = 0.0;
    int combinations = 0;
    // One row per combination in evaluation order: perp2, par2, he95.
    std::vector<std::array<double, 3>> table;
};

/// Exhaustive covariance search for KF+Instant / KF+Viterbi over
/// perpendicular {0..10} x parallel {0..10, 100..1000 by 100, inf sentinel}.
/// Argmin of pooled training HE@95; ties prefer smaller perpendicular then
/// smaller parallel variance.
GridSearchResult grid_search_sigma(const std::vector<BoundDrive>& drives,
                                   const MethodConfig& base);

struct Region {
    std::string name;
    roadnet::RoadGraph graph;
    std::vector<io::DriveFileData> drives;
    std::vector<std::vector<int>> labels;  // parallel to drives; may be empty
};

struct EvalConfig {
    std::vector<std::string> methods;  // display names
    std::vector<std::uint64_t> seeds = {0};
    selection::EmissionParams emission;
    double fov_radius = 50.0;
    bool tune_sigma = true;  // grid-search Instant/Viterbi on the train folds
    // Fallback road variances when tuning is off.
    double sigma_par2 = kalman::kInfVariance;
    double sigma_perp2 = 0.0;
    tgnn::TgnnConfig model_config;  // variant is overridden per method name
    tgnn::TrainConfig train_config;
};

struct EvalRow {
    std::string method;
    int fold = 0;
    std::uint64_t seed = 0;
    double he50_m = 0.0;
    double he95_m = 0.0;
    std::size_t epochs = 0;
    int drives = 0;
};

struct SeedStats {
    double he50_mean = 0.0, he50_std = 0.0;
    double he95_mean = 0.0, he95_std = 0.0;
    int samples = 0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    // Pooled holdout errors per method (first seed for learnable methods),
    // for CDF plotting.
    std::map<std::string, std::vector<double>> cdf_errors;
    std::map<std::string, SeedStats> stats;  // over all rows of a method
};

/// Leave-one-out over regions: tune/train on the other folds, evaluate on
/// the holdout, one row per fold (deterministic methods) or per fold x seed
/// (learnable methods). Requires >= 2 regions.
EvalReport evaluate(const std::vector<Region>& regions, const EvalConfig& cfg);

/// CSV with header "method,fold,seed,he50_m,he95_m,epochs,drives".
void write_csv(const std::string& path, const std::vector<EvalRow>& rows);

/// Self-contained SVG of one CDF curve per method.
void write_cdf_svg(const std::string& path,
                   const std::map<std::string, std::vector<double>>& errors);

}  // namespace roadkf::harness
