#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "roadkf/autodiff.hpp"
#include "roadkf/kalman.hpp"
#include "roadkf/road_graph.hpp"
#include "roadkf/selection.hpp"

// Temporal graph network scoring field-of-view road candidates and predicting
// the two road-observation variances. User features and road features run on
// separate paths that exchange information once per block; the LSTM carries
// user-path state across the epochs of a drive.

namespace roadkf::tgnn {

enum class Variant { Tgnn, Gnn, Mlp };

struct TgnnConfig {
    Variant variant = Variant::Tgnn;
    int blocks = 4;
    int hidden = 32;
    int k_hops = 2;  // prior-propagation depth, adds one feature column per hop
    double lambda = 0.01;
    double sigma_floor = 1e-2;  // m^2, clamp on the variance head
    double sigma_ceil = 1e6;
    // Feature standardization divisors.
    double dist_scale = 100.0;
    double speed_scale = 30.0;
    double var_scale = 100.0;
    double length_scale = 25.0;
    double lanes_scale = 4.0;
};

constexpr int kUserFeatureDim = 6;

/// 24 fixed columns plus one prior-maximum column per hop.
int road_feature_dim(const TgnnConfig& cfg);

/// Trainable tensors in a fixed serialization order, plus batch-norm running
/// statistics (state, not parameters).
struct TgnnModel {
    TgnnConfig cfg;
    std::vector<ad::Tensor> params;
    std::vector<ad::Tensor> bn_state;  // running mean/var pairs per norm layer
};

/// Fan-in uniform init for the transforms, zero init for both output heads
/// (cold start is uniform probabilities with unit variances), forget-gate
/// bias 1.
TgnnModel make_model(const TgnnConfig& cfg, std::uint64_t seed);

long param_count(const TgnnModel& model);

/// Stable name of a parameter tensor in layout order, e.g. "block0.lin_x.W",
/// "lstm.Wh", "out.b". Throws std::out_of_range on a bad index.
std::string param_name(const TgnnConfig& cfg, int index);
/// Stable name of a running-stats tensor, e.g. "block0.bn_x.running_mean".
std::string bn_state_name(const TgnnConfig& cfg, int index);

/// Per-block LSTM carry, one row per batched window.
struct LstmState {
    std::vector<ad::Tensor> h;
    std::vector<ad::Tensor> c;
};
LstmState make_lstm_state(const TgnnConfig& cfg, int batch);

using PriorMap = std::unordered_map<int, double>;

/// [1,6]: heading sin/cos (zeroed below the standstill speed), speed, and the
/// horizontal position-covariance triplet, all standardized.
ad::Tensor user_features(const kalman::KfEstimate& est, const TgnnConfig& cfg);

/// [N,24+k]: per candidate distance and heading costs, one-hot road type,
/// static attributes, previous-step prior, and k-hop prior maxima taken over
/// the segments that can reach the candidate within k directed hops.
ad::Tensor road_features(const kalman::KfEstimate& est,
                         const std::vector<int>& candidates,
                         const roadnet::RoadGraph& graph, const PriorMap& prev,
                         const TgnnConfig& cfg);

/// Symmetric-normalized candidate-subgraph adjacency with self loops.
ad::Tensor normalized_adjacency(const std::vector<int>& candidates,
                                const roadnet::RoadGraph& graph);

struct ForwardResult {
    std::vector<double> probs;  // one per candidate, sums to 1
    double sigma_par2 = 1.0;
    double sigma_perp2 = 1.0;
};

/// Single-sample inference pass (eval-mode normalization, gradients off).
/// `state` is advanced in place; pass the state freshly created at drive
/// start. Empty candidate sets still advance the state and return no probs.
ForwardResult forward(ad::Tape& tape, const TgnnModel& model,
                      const ad::Tensor& x, const ad::Tensor& R,
                      const ad::Tensor& A_norm, LstmState& state);

/// One drive prepared for training: raw epochs plus the stored GNSS-only
/// filter trajectory used to initialize window states.
struct EpochRecord {
    kalman::GnssEpoch gnss;
    geo::EnuPoint truth;
    double truth_heading = 0.0;
    int oracle_label = -1;  // segment id, -1 when unlabeled
};
struct DriveData {
    const roadnet::RoadGraph* graph = nullptr;
    std::vector<EpochRecord> epochs;
    std::vector<kalman::KfEstimate> gnss_only;  // posterior per epoch
};

struct WindowRef {
    const DriveData* drive = nullptr;
    int start = 0;   // window state initialized from gnss_only[start]
    int length = 0;  // epochs start+1 .. start+length are processed
};

struct BuildOptions {
    bool bn_train = true;
    bool teacher_forcing = true;
    bool full_window_backprop = false;
    bool viterbi_prior = false;  // classical belief instead of own output
    double fov_radius = 50.0;
    selection::EmissionParams emission;
    // When set, the numeric filter chain uses these fixed variances instead
    // of the model's, making the objective independent of the chain so
    // finite differences are exact. The tape losses still use the model's.
    std::optional<std::array<double, 2>> chain_sigma;
    // Ablation masks. Empty keeps every feature; false zeroes the column.
    std::vector<bool> user_feature_mask;
    std::vector<bool> road_feature_mask;
};

struct BuildStats {
    int contributing_epochs = 0;
    int skipped_epochs = 0;  // label absent from the candidate set
    int labeled_epochs = 0;
    int argmax_correct = 0;
};

/// Builds the combined window loss for a lockstep batch of windows on the
/// tape. `param_values` must be tape handles for model.params in order.
/// In bn_train mode the model's running statistics are updated in place.
ad::Value build_batch_loss(ad::Tape& tape, TgnnModel& model,
                           const std::vector<ad::Value>& param_values,
                           const std::vector<WindowRef>& windows,
                           const BuildOptions& opts, BuildStats* stats);

struct TrainConfig {
    int iterations = 5000;
    int batch = 8;
    int window = 50;
    ad::AdamConfig adam;
    BuildOptions build;
    int log_every = 50;
};

struct TrainMetrics {
    int iteration = 0;
    double loss = 0.0;
    double label_accuracy = 0.0;
    int skipped_epochs = 0;
};

/// Adam training over uniformly sampled windows. Deterministic for a fixed
/// seed. Throws if no drive is long enough to cut a window.
void train(TgnnModel& model, const std::vector<DriveData>& drives,
           const TrainConfig& cfg, std::uint64_t seed,
           const std::function<void(const TrainMetrics&)>& on_metrics = nullptr);

}  // namespace roadkf::tgnn
