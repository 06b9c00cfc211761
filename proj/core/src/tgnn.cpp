#include "roadkf/tgnn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace roadkf::tgnn {

int road_feature_dim(const TgnnConfig& cfg) { return 24 + cfg.k_hops; }

namespace {

// Parameter layout. Tgnn/Gnn blocks hold 14 tensors each:
//   lin_x.W lin_x.b bn_x.gamma bn_x.beta lin_r.W lin_r.b bn_r.gamma bn_r.beta
//   gcn.W gcn.b cross_x.W cross_x.b cross_r.W cross_r.b
// Mlp blocks hold 4: lin.W lin.b bn.gamma bn.beta. After the blocks the Tgnn
// variant adds lstm.Wx lstm.Wh lstm.b (one cell shared by every block, gate
// order i f g o), then all variants end with out.W out.b sig.W sig.b.
// bn_state runs parallel: (running_mean, running_var) per norm layer.
constexpr int kBlockTensors = 14;
constexpr int kMlpBlockTensors = 4;

int head_base(const TgnnConfig& cfg) {
    if (cfg.variant == Variant::Mlp) return kMlpBlockTensors * cfg.blocks;
    return kBlockTensors * cfg.blocks + (cfg.variant == Variant::Tgnn ? 3 : 0);
}

struct NetIo {
    ad::Value x;                    // [B, user dim]
    ad::Value r;                    // [sum_n, road dim], unset when sum_n == 0
    std::vector<int> row0;          // first row of each window inside r
    std::vector<int> count;         // candidates per window
    std::vector<ad::Value> a_norm;  // per-window adjacency, unset when empty
    bool bn_train = false;
};

struct NetOut {
    std::vector<ad::Value> probs;  // [1, count] per window, unset when empty
    ad::Value sigma;               // [B, 2]
};

ad::Value linear(ad::Tape& t, ad::Value x, ad::Value w, ad::Value b) {
    return t.add(t.matmul(x, w), b);
}

NetOut run_network(ad::Tape& tape, const TgnnModel& model,
                   const std::vector<ad::Value>& pv, const NetIo& io,
                   std::vector<ad::Value>& h, std::vector<ad::Value>& c) {
    const TgnnConfig& cfg = model.cfg;
    const int batch = static_cast<int>(io.count.size());
    const int hidden = cfg.hidden;
    int sum_n = 0;
    for (int n : io.count) sum_n += n;
    // Eval mode never writes the running stats, so the cast stays read-only.
    auto& bn = const_cast<std::vector<ad::Tensor>&>(model.bn_state);

    NetOut out;
    out.probs.assign(batch, ad::Value{});

    if (cfg.variant == Variant::Mlp) {
        ad::Value rows{};
        if (sum_n > 0) {
            ad::Value xrep{};
            for (int w = 0; w < batch; ++w) {
                if (io.count[w] == 0) continue;
                ad::Value xw = tape.repeat_rows(
                    tape.slice(io.x, w, w + 1, 0, kUserFeatureDim), io.count[w]);
                xrep = xrep.valid() ? tape.concat_rows(xrep, xw) : xw;
            }
            rows = tape.concat_cols(xrep, io.r);
            for (int l = 0; l < cfg.blocks; ++l) {
                const int base = kMlpBlockTensors * l;
                ad::Value z = linear(tape, rows, pv[base], pv[base + 1]);
                z = tape.batchnorm(z, pv[base + 2], pv[base + 3], &bn[2 * l],
                                   &bn[2 * l + 1], io.bn_train);
                rows = tape.silu(z);
            }
        }
        ad::Value pooled{};
        ad::Tensor zero_row(1, hidden);
        for (int w = 0; w < batch; ++w) {
            ad::Value pw =
                io.count[w] > 0
                    ? tape.mean_rows(tape.slice(rows, io.row0[w],
                                                io.row0[w] + io.count[w], 0, hidden))
                    : tape.constant(zero_row);
            pooled = pooled.valid() ? tape.concat_rows(pooled, pw) : pw;
        }
        const int hb = head_base(cfg);
        if (sum_n > 0) {
            ad::Value logits = linear(tape, rows, pv[hb], pv[hb + 1]);
            for (int w = 0; w < batch; ++w) {
                if (io.count[w] == 0) continue;
                out.probs[w] = tape.softmax_rows(tape.transpose(tape.slice(
                    logits, io.row0[w], io.row0[w] + io.count[w], 0, 1)));
            }
        }
        out.sigma = tape.clamp(tape.exp(linear(tape, pooled, pv[hb + 2], pv[hb + 3])),
                               cfg.sigma_floor, cfg.sigma_ceil);
        return out;
    }

    ad::Value x = io.x;
    ad::Value r = io.r;
    for (int l = 0; l < cfg.blocks; ++l) {
        const int base = kBlockTensors * l;
        const int bnb = 4 * l;
        ad::Value xh = tape.silu(
            tape.batchnorm(linear(tape, x, pv[base], pv[base + 1]), pv[base + 2],
                           pv[base + 3], &bn[bnb], &bn[bnb + 1], io.bn_train));
        ad::Value xt;
        if (cfg.variant == Variant::Tgnn) {
            const int li = kBlockTensors * cfg.blocks;
            ad::Value gates = tape.add(
                tape.add(tape.matmul(xh, pv[li]), tape.matmul(h[l], pv[li + 1])),
                pv[li + 2]);
            ad::Value gi = tape.sigmoid(tape.slice(gates, 0, batch, 0, hidden));
            ad::Value gf = tape.sigmoid(tape.slice(gates, 0, batch, hidden, 2 * hidden));
            ad::Value gg = tape.tanh(tape.slice(gates, 0, batch, 2 * hidden, 3 * hidden));
            ad::Value go = tape.sigmoid(tape.slice(gates, 0, batch, 3 * hidden, 4 * hidden));
            c[l] = tape.add(tape.mul(gf, c[l]), tape.mul(gi, gg));
            h[l] = tape.mul(go, tape.tanh(c[l]));
            xt = h[l];
        } else {
            xt = xh;
        }
        ad::Value pooled{};
        ad::Value rn{};
        if (sum_n > 0) {
            ad::Value rh = tape.silu(tape.batchnorm(
                linear(tape, r, pv[base + 4], pv[base + 5]), pv[base + 6],
                pv[base + 7], &bn[bnb + 2], &bn[bnb + 3], io.bn_train));
            ad::Value rw = tape.matmul(rh, pv[base + 8]);
            ad::Value agg{};
            for (int w = 0; w < batch; ++w) {
                if (io.count[w] == 0) continue;
                ad::Value part = tape.matmul(
                    io.a_norm[w],
                    tape.slice(rw, io.row0[w], io.row0[w] + io.count[w], 0, hidden));
                agg = agg.valid() ? tape.concat_rows(agg, part) : part;
            }
            ad::Value rt = tape.silu(tape.add(agg, pv[base + 9]));
            ad::Tensor zero_row(1, hidden);
            for (int w = 0; w < batch; ++w) {
                ad::Value pw = io.count[w] > 0
                                   ? tape.mean_rows(tape.slice(
                                         rt, io.row0[w], io.row0[w] + io.count[w],
                                         0, hidden))
                                   : tape.constant(zero_row);
                pooled = pooled.valid() ? tape.concat_rows(pooled, pw) : pw;
            }
            ad::Value xrep{};
            for (int w = 0; w < batch; ++w) {
                if (io.count[w] == 0) continue;
                ad::Value xw = tape.repeat_rows(tape.slice(xt, w, w + 1, 0, hidden),
                                                io.count[w]);
                xrep = xrep.valid() ? tape.concat_rows(xrep, xw) : xw;
            }
            rn = tape.silu(linear(tape, tape.concat_cols(rt, xrep), pv[base + 12],
                                  pv[base + 13]));
        } else {
            pooled = tape.constant(ad::Tensor(batch, hidden));
        }
        x = tape.silu(linear(tape, tape.concat_cols(xt, pooled), pv[base + 10],
                             pv[base + 11]));
        if (sum_n > 0) r = rn;
    }

    const int hb = head_base(cfg);
    if (sum_n > 0) {
        ad::Value logits = linear(tape, r, pv[hb], pv[hb + 1]);
        for (int w = 0; w < batch; ++w) {
            if (io.count[w] == 0) continue;
            out.probs[w] = tape.softmax_rows(tape.transpose(
                tape.slice(logits, io.row0[w], io.row0[w] + io.count[w], 0, 1)));
        }
    }
    out.sigma = tape.clamp(tape.exp(linear(tape, x, pv[hb + 2], pv[hb + 3])),
                           cfg.sigma_floor, cfg.sigma_ceil);
    return out;
}

}  // namespace

TgnnModel make_model(const TgnnConfig& cfg, std::uint64_t seed) {
    TgnnModel m;
    m.cfg = cfg;
    std::mt19937_64 rng(seed);
    const int hidden = cfg.hidden;
    auto uniform_fill = [&rng](ad::Tensor& t, int fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> d(-bound, bound);
        for (double& x : t.v) x = d(rng);
    };
    auto push_linear = [&](int in, int out) {
        ad::Tensor w(in, out), b(1, out);
        uniform_fill(w, in);
        uniform_fill(b, in);
        m.params.push_back(std::move(w));
        m.params.push_back(std::move(b));
    };
    auto push_bn = [&](int dim) {
        ad::Tensor gamma(1, dim);
        gamma.fill(1.0);
        m.params.push_back(std::move(gamma));
        m.params.emplace_back(1, dim);
        m.bn_state.emplace_back(1, dim);
        ad::Tensor rv(1, dim);
        rv.fill(1.0);
        m.bn_state.push_back(std::move(rv));
    };

    if (cfg.variant == Variant::Mlp) {
        for (int l = 0; l < cfg.blocks; ++l) {
            push_linear(l == 0 ? kUserFeatureDim + road_feature_dim(cfg) : hidden,
                        hidden);
            push_bn(hidden);
        }
    } else {
        for (int l = 0; l < cfg.blocks; ++l) {
            push_linear(l == 0 ? kUserFeatureDim : hidden, hidden);
            push_bn(hidden);
            push_linear(l == 0 ? road_feature_dim(cfg) : hidden, hidden);
            push_bn(hidden);
            push_linear(hidden, hidden);
            push_linear(2 * hidden, hidden);
            push_linear(2 * hidden, hidden);
        }
        if (cfg.variant == Variant::Tgnn) {
            ad::Tensor wx(hidden, 4 * hidden), wh(hidden, 4 * hidden), b(1, 4 * hidden);
            uniform_fill(wx, hidden);
            uniform_fill(wh, hidden);
            uniform_fill(b, hidden);
            // Forget gate starts open so early windows keep their carry.
            for (int j = hidden; j < 2 * hidden; ++j) b.at(0, j) = 1.0;
            m.params.push_back(std::move(wx));
            m.params.push_back(std::move(wh));
            m.params.push_back(std::move(b));
        }
    }
    // Zero heads: cold start scores every candidate evenly with unit variances.
    m.params.emplace_back(hidden, 1);
    m.params.emplace_back(1, 1);
    m.params.emplace_back(hidden, 2);
    m.params.emplace_back(1, 2);
    return m;
}

long param_count(const TgnnModel& model) {
    long n = 0;
    for (const auto& t : model.params) n += t.size();
    return n;
}

std::string param_name(const TgnnConfig& cfg, int index) {
    const int hb = head_base(cfg);
    static const char* kHeads[4] = {"out.W", "out.b", "sigma.W", "sigma.b"};
    if (index >= hb && index < hb + 4) return kHeads[index - hb];
    if (index < 0 || index >= hb) throw std::out_of_range("param_name: bad index");
    if (cfg.variant == Variant::Mlp) {
        static const char* kSlots[kMlpBlockTensors] = {"lin.W", "lin.b", "bn.gamma",
                                                       "bn.beta"};
        return "block" + std::to_string(index / kMlpBlockTensors) + "." +
               kSlots[index % kMlpBlockTensors];
    }
    if (cfg.variant == Variant::Tgnn && index >= kBlockTensors * cfg.blocks) {
        static const char* kLstm[3] = {"lstm.Wx", "lstm.Wh", "lstm.b"};
        return kLstm[index - kBlockTensors * cfg.blocks];
    }
    static const char* kSlots[kBlockTensors] = {
        "lin_x.W",   "lin_x.b",   "bn_x.gamma", "bn_x.beta", "lin_r.W",
        "lin_r.b",   "bn_r.gamma", "bn_r.beta", "gcn.W",     "gcn.b",
        "cross_x.W", "cross_x.b", "cross_r.W",  "cross_r.b"};
    return "block" + std::to_string(index / kBlockTensors) + "." +
           kSlots[index % kBlockTensors];
}

std::string bn_state_name(const TgnnConfig& cfg, int index) {
    const int per_block = cfg.variant == Variant::Mlp ? 2 : 4;
    if (index < 0 || index >= per_block * cfg.blocks)
        throw std::out_of_range("bn_state_name: bad index");
    static const char* kMlp[2] = {"bn.running_mean", "bn.running_var"};
    static const char* kFull[4] = {"bn_x.running_mean", "bn_x.running_var",
                                   "bn_r.running_mean", "bn_r.running_var"};
    const char* slot = cfg.variant == Variant::Mlp ? kMlp[index % 2]
                                                   : kFull[index % 4];
    return "block" + std::to_string(index / per_block) + "." + slot;
}

LstmState make_lstm_state(const TgnnConfig& cfg, int batch) {
    LstmState s;
    for (int l = 0; l < cfg.blocks; ++l) {
        s.h.emplace_back(batch, cfg.hidden);
        s.c.emplace_back(batch, cfg.hidden);
    }
    return s;
}

ad::Tensor user_features(const kalman::KfEstimate& est, const TgnnConfig& cfg) {
    ad::Tensor t(1, kUserFeatureDim);
    const double speed = est.speed_horizontal();
    if (speed >= selection::kMinHeadingSpeed) {
        const double theta = est.heading();
        t.at(0, 0) = std::sin(theta);
        t.at(0, 1) = std::cos(theta);
    }
    t.at(0, 2) = speed / cfg.speed_scale;
    t.at(0, 3) = est.cov(0, 0) / cfg.var_scale;
    t.at(0, 4) = est.cov(0, 1) / cfg.var_scale;
    t.at(0, 5) = est.cov(1, 1) / cfg.var_scale;
    return t;
}

ad::Tensor road_features(const kalman::KfEstimate& est,
                         const std::vector<int>& candidates,
                         const roadnet::RoadGraph& graph, const PriorMap& prev,
                         const TgnnConfig& cfg) {
    const int n = static_cast<int>(candidates.size());
    ad::Tensor t(n, road_feature_dim(cfg));
    const geo::EnuPoint pos = est.position();
    auto prior_of = [&prev](int id) {
        auto it = prev.find(id);
        return it == prev.end() ? 0.0 : it->second;
    };
    std::unordered_map<int, int> seen;
    std::vector<int> frontier, next;
    for (int i = 0; i < n; ++i) {
        const roadnet::RoadSegment& seg = graph.segment(candidates[i]);
        t.at(i, 0) = geo::point_segment_distance(pos, seg.geometry) / cfg.dist_scale;
        t.at(i, 1) = selection::user_heading_cost(est, seg);
        for (int k = 0; k < roadnet::kRoadTypeCount; ++k)
            t.at(i, 2 + k) = seg.road_type_onehot[k];
        t.at(i, 17) = seg.max_speed / cfg.speed_scale;
        t.at(i, 18) = seg.heading_sincos[0];
        t.at(i, 19) = seg.heading_sincos[1];
        t.at(i, 20) = static_cast<double>(seg.oneway);
        t.at(i, 21) = seg.geometry.length / cfg.length_scale;
        t.at(i, 22) = static_cast<double>(seg.lanes) / cfg.lanes_scale;
        t.at(i, 23) = prior_of(candidates[i]);
        // Running max of the prior over everything that can reach this
        // candidate within h legal hops, candidate included.
        seen.clear();
        seen.emplace(candidates[i], 0);
        frontier.assign(1, candidates[i]);
        double best = t.at(i, 23);
        for (int hop = 1; hop <= cfg.k_hops; ++hop) {
            next.clear();
            for (int u : frontier)
                for (int v : graph.in_neighbors(u))
                    if (seen.emplace(v, hop).second) {
                        next.push_back(v);
                        best = std::max(best, prior_of(v));
                    }
            t.at(i, 23 + hop) = best;
            frontier.swap(next);
        }
    }
    return t;
}

ad::Tensor normalized_adjacency(const std::vector<int>& candidates,
                                const roadnet::RoadGraph& graph) {
    const int n = static_cast<int>(candidates.size());
    ad::Tensor a(n, n);
    for (int i = 0; i < n; ++i) {
        a.at(i, i) = 1.0;
        for (int j = i + 1; j < n; ++j)
            if (graph.adjacent(candidates[i], candidates[j]))
                a.at(i, j) = a.at(j, i) = 1.0;
    }
    std::vector<double> dinv(n);
    for (int i = 0; i < n; ++i) {
        double d = 0.0;
        for (int j = 0; j < n; ++j) d += a.at(i, j);
        dinv[i] = 1.0 / std::sqrt(d);
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a.at(i, j) *= dinv[i] * dinv[j];
    return a;
}

ForwardResult forward(ad::Tape& tape, const TgnnModel& model, const ad::Tensor& x,
                      const ad::Tensor& R, const ad::Tensor& A_norm,
                      LstmState& state) {
    tape.reset();
    std::vector<ad::Value> pv;
    pv.reserve(model.params.size());
    for (const auto& p : model.params) pv.push_back(tape.constant(p));
    NetIo io;
    io.bn_train = false;
    io.x = tape.constant(x);
    io.row0 = {0};
    io.count = {R.rows};
    io.a_norm = {R.rows > 0 ? tape.constant(A_norm) : ad::Value{}};
    if (R.rows > 0) io.r = tape.constant(R);
    std::vector<ad::Value> h, c;
    for (int l = 0; l < model.cfg.blocks; ++l) {
        h.push_back(tape.constant(state.h[l]));
        c.push_back(tape.constant(state.c[l]));
    }
    NetOut out = run_network(tape, model, pv, io, h, c);
    for (int l = 0; l < model.cfg.blocks; ++l) {
        state.h[l] = tape.value(h[l]);
        state.c[l] = tape.value(c[l]);
    }
    ForwardResult res;
    const ad::Tensor& sg = tape.value(out.sigma);
    res.sigma_par2 = sg.at(0, 0);
    res.sigma_perp2 = sg.at(0, 1);
    if (out.probs[0].valid()) {
        const ad::Tensor& pb = tape.value(out.probs[0]);
        res.probs.assign(pb.v.begin(), pb.v.end());
    }
    return res;
}

namespace {

// Ablation support: zero the row's masked columns.
void apply_feature_mask(ad::Tensor& t, const std::vector<bool>& mask, int row) {
    if (mask.empty()) return;
    if (static_cast<int>(mask.size()) != t.cols)
        throw std::invalid_argument("feature mask size does not match feature count");
    for (int j = 0; j < t.cols; ++j)
        if (!mask[j]) t.at(row, j) = 0.0;
}

}  // namespace

ad::Value build_batch_loss(ad::Tape& tape, TgnnModel& model,
                           const std::vector<ad::Value>& param_values,
                           const std::vector<WindowRef>& windows,
                           const BuildOptions& opts, BuildStats* stats) {
    const TgnnConfig& cfg = model.cfg;
    const int batch = static_cast<int>(windows.size());
    const int hidden = cfg.hidden;
    const int rdim = road_feature_dim(cfg);
    if (stats) *stats = BuildStats{};

    struct WinState {
        kalman::KfEstimate est;
        double last_time = 0.0;
        PriorMap prev;
        selection::ViterbiBelief belief;
        ad::Value xchain{};
        std::vector<ad::Value> terms;
    };
    std::vector<WinState> ws(batch);
    int max_len = 0;
    for (int w = 0; w < batch; ++w) {
        const WindowRef& ref = windows[w];
        ws[w].est = ref.drive->gnss_only[ref.start];
        ws[w].last_time = ref.drive->epochs[ref.start].gnss.time;
        if (opts.full_window_backprop) {
            ad::Tensor m0(8, 1);
            for (int i = 0; i < 8; ++i) m0.at(i, 0) = ws[w].est.mean(i);
            ws[w].xchain = tape.constant(m0);
        }
        max_len = std::max(max_len, ref.length);
    }
    std::vector<ad::Value> h, c;
    for (int l = 0; l < cfg.blocks; ++l) {
        h.push_back(tape.constant(ad::Tensor(batch, hidden)));
        c.push_back(tape.constant(ad::Tensor(batch, hidden)));
    }

    struct Scratch {
        bool active = false;
        kalman::Mat8 F, Jg;
        kalman::Vec8 x_prior, x_post;
        kalman::KfEstimate est;  // after the satellite update
        std::vector<int> cands;
        int label_id = -1;
        int label_idx = -1;
    };
    std::vector<Scratch> sc(batch);
    std::vector<ad::Tensor> rfeats(batch), anorms(batch);

    for (int step = 1; step <= max_len; ++step) {
        ad::Tensor x(batch, kUserFeatureDim);
        NetIo io;
        io.bn_train = opts.bn_train;
        io.row0.assign(batch, 0);
        io.count.assign(batch, 0);
        io.a_norm.assign(batch, ad::Value{});
        int sum_n = 0;
        for (int w = 0; w < batch; ++w) {
            Scratch& s = sc[w];
            const WindowRef& ref = windows[w];
            if (step > ref.length) {
                s.active = false;
                continue;
            }
            s.active = true;
            const EpochRecord& ep = ref.drive->epochs[ref.start + step];
            const double dt = ep.gnss.time - ws[w].last_time;
            ws[w].last_time = ep.gnss.time;
            s.F = kalman::transition_matrix(dt);
            kalman::KfEstimate pred = kalman::predict(ws[w].est, dt);
            s.x_prior = pred.mean;
            s.est = kalman::gnss_update(pred, ep.gnss,
                                        opts.full_window_backprop ? &s.Jg : nullptr);
            s.x_post = s.est.mean;
            s.cands = roadnet::field_of_view(*ref.drive->graph, s.est.position(),
                                             opts.fov_radius);
            s.label_id = ep.oracle_label;
            s.label_idx = -1;
            if (s.label_id >= 0) {
                if (stats) stats->labeled_epochs++;
                auto it = std::find(s.cands.begin(), s.cands.end(), s.label_id);
                if (it != s.cands.end())
                    s.label_idx = static_cast<int>(it - s.cands.begin());
                else if (stats)
                    stats->skipped_epochs++;
            }
            const ad::Tensor uf = user_features(s.est, cfg);
            for (int j = 0; j < kUserFeatureDim; ++j) x.at(w, j) = uf.at(0, j);
            apply_feature_mask(x, opts.user_feature_mask, w);
            if (!s.cands.empty()) {
                rfeats[w] = road_features(s.est, s.cands, *ref.drive->graph,
                                          ws[w].prev, cfg);
                for (int i = 0; i < rfeats[w].rows; ++i)
                    apply_feature_mask(rfeats[w], opts.road_feature_mask, i);
                anorms[w] = normalized_adjacency(s.cands, *ref.drive->graph);
                io.row0[w] = sum_n;
                io.count[w] = static_cast<int>(s.cands.size());
                sum_n += io.count[w];
            }
        }
        io.x = tape.constant(x);
        if (sum_n > 0) {
            ad::Tensor r(sum_n, rdim);
            for (int w = 0; w < batch; ++w)
                for (int i = 0; i < io.count[w]; ++i)
                    for (int j = 0; j < rdim; ++j)
                        r.at(io.row0[w] + i, j) = rfeats[w].at(i, j);
            io.r = tape.constant(r);
            for (int w = 0; w < batch; ++w)
                if (io.count[w] > 0) io.a_norm[w] = tape.constant(anorms[w]);
        }
        NetOut out = run_network(tape, model, param_values, io, h, c);
        // Copy the numbers out before further pushes can move node storage.
        const ad::Tensor sigv = tape.value(out.sigma);
        std::vector<std::vector<double>> probv(batch);
        for (int w = 0; w < batch; ++w)
            if (out.probs[w].valid()) probv[w] = tape.value(out.probs[w]).v;

        for (int w = 0; w < batch; ++w) {
            Scratch& s = sc[w];
            if (!s.active) continue;
            const WindowRef& ref = windows[w];
            if (opts.full_window_backprop) {
                ad::Tensor ft(8, 8), jt(8, 8), xp(8, 1), xq(8, 1);
                for (int i = 0; i < 8; ++i) {
                    xp.at(i, 0) = s.x_prior(i);
                    xq.at(i, 0) = s.x_post(i);
                    for (int j = 0; j < 8; ++j) {
                        ft.at(i, j) = s.F(i, j);
                        jt.at(i, j) = s.Jg(i, j);
                    }
                }
                ad::Value pred = tape.matmul(tape.constant(ft), ws[w].xchain);
                ws[w].xchain = tape.add(
                    tape.constant(xq),
                    tape.matmul(tape.constant(jt), tape.sub(pred, tape.constant(xp))));
            }
            int road = -1;
            if (opts.teacher_forcing) {
                if (s.label_idx >= 0) road = s.label_id;
            } else if (!s.cands.empty()) {
                road = s.cands[static_cast<int>(
                    std::max_element(probv[w].begin(), probv[w].end()) -
                    probv[w].begin())];
            }
            if (road >= 0) {
                kalman::RoadObservation obs = kalman::build_road_observation(
                    s.est, ref.drive->graph->segment(road), 1.0, 1.0);
                const Eigen::Matrix<double, 2, 8> hp = obs.H * s.est.cov;
                const Eigen::Matrix2d hpht = hp * obs.H.transpose();
                const Eigen::Vector2d resid = obs.z - obs.H * s.est.mean;
                ad::Tensor hpt(2, 8), hphtt(2, 2);
                for (int i = 0; i < 2; ++i) {
                    for (int j = 0; j < 8; ++j) hpt.at(i, j) = hp(i, j);
                    for (int j = 0; j < 2; ++j) hphtt.at(i, j) = hpht(i, j);
                }
                ad::Value sigma_row = tape.slice(out.sigma, w, w + 1, 0, 2);
                ad::Value innov_cov =
                    tape.add(tape.constant(hphtt), tape.diag2(sigma_row));
                ad::Value gain = tape.transpose(
                    tape.solve2x2(innov_cov, tape.constant(hpt)));
                ad::Value post;
                if (opts.full_window_backprop) {
                    ad::Tensor ht(2, 8), zt(2, 1);
                    for (int j = 0; j < 8; ++j) {
                        ht.at(0, j) = obs.H(0, j);
                        ht.at(1, j) = obs.H(1, j);
                    }
                    zt.at(0, 0) = obs.z(0);
                    zt.at(1, 0) = obs.z(1);
                    ad::Value rres = tape.sub(
                        tape.constant(zt), tape.matmul(tape.constant(ht), ws[w].xchain));
                    post = tape.add(ws[w].xchain, tape.matmul(gain, rres));
                    ws[w].xchain = post;
                } else {
                    ad::Tensor mt(8, 1), rt(2, 1);
                    for (int i = 0; i < 8; ++i) mt.at(i, 0) = s.est.mean(i);
                    rt.at(0, 0) = resid(0);
                    rt.at(1, 0) = resid(1);
                    post = tape.add(tape.constant(mt),
                                    tape.matmul(gain, tape.constant(rt)));
                }
                const EpochRecord& ep = ref.drive->epochs[ref.start + step];
                ad::Tensor tt(2, 1);
                tt.at(0, 0) = ep.truth.east;
                tt.at(1, 0) = ep.truth.north;
                ad::Value term = tape.mul_scalar(
                    tape.squared_error(tape.slice(post, 0, 2, 0, 1), tape.constant(tt)),
                    cfg.lambda);
                if (s.label_idx >= 0)
                    term = tape.add(tape.cross_entropy(out.probs[w], s.label_idx), term);
                ws[w].terms.push_back(term);
                if (stats) stats->contributing_epochs++;
                obs.V_diag(0) = opts.chain_sigma ? (*opts.chain_sigma)[0] : sigv.at(w, 0);
                obs.V_diag(1) = opts.chain_sigma ? (*opts.chain_sigma)[1] : sigv.at(w, 1);
                ws[w].est = kalman::road_update(s.est, obs);
            } else {
                ws[w].est = s.est;
            }
            if (stats && s.label_idx >= 0 && !probv[w].empty()) {
                const int best = static_cast<int>(
                    std::max_element(probv[w].begin(), probv[w].end()) -
                    probv[w].begin());
                if (best == s.label_idx) stats->argmax_correct++;
            }
            if (!s.cands.empty()) {
                ws[w].prev.clear();
                if (opts.viterbi_prior) {
                    selection::viterbi_step(ws[w].belief, s.cands, s.est,
                                            *ref.drive->graph, opts.emission);
                    for (std::size_t i = 0; i < ws[w].belief.ids.size(); ++i)
                        ws[w].prev[ws[w].belief.ids[i]] =
                            std::exp(ws[w].belief.logp[i]);
                } else {
                    for (std::size_t i = 0; i < s.cands.size(); ++i)
                        ws[w].prev[s.cands[i]] = probv[w][i];
                }
            }
        }
    }

    ad::Value total{};
    int contributing_windows = 0;
    for (int w = 0; w < batch; ++w) {
        if (ws[w].terms.empty()) continue;
        ad::Value sum = ws[w].terms[0];
        for (std::size_t i = 1; i < ws[w].terms.size(); ++i)
            sum = tape.add(sum, ws[w].terms[i]);
        ad::Value mean =
            tape.mul_scalar(sum, 1.0 / static_cast<double>(ws[w].terms.size()));
        total = total.valid() ? tape.add(total, mean) : mean;
        ++contributing_windows;
    }
    if (!total.valid()) return tape.constant_scalar(0.0);
    return tape.mul_scalar(total, 1.0 / static_cast<double>(contributing_windows));
}

void train(TgnnModel& model, const std::vector<DriveData>& drives,
           const TrainConfig& cfg, std::uint64_t seed,
           const std::function<void(const TrainMetrics&)>& on_metrics) {
    std::vector<int> eligible;
    for (int i = 0; i < static_cast<int>(drives.size()); ++i) {
        const DriveData& d = drives[i];
        if (d.graph && static_cast<int>(d.epochs.size()) >= cfg.window + 1 &&
            d.gnss_only.size() == d.epochs.size())
            eligible.push_back(i);
    }
    if (eligible.empty())
        throw std::invalid_argument("no drive long enough for the training window");

    std::mt19937_64 rng(seed);
    ad::Tape tape;
    ad::AdamState adam;
    std::vector<ad::Tensor*> params;
    params.reserve(model.params.size());
    for (auto& p : model.params) params.push_back(&p);

    for (int it = 0; it < cfg.iterations; ++it) {
        tape.reset();
        std::vector<ad::Value> pv;
        pv.reserve(params.size());
        for (auto* p : params) pv.push_back(tape.input(*p));
        std::vector<WindowRef> windows(cfg.batch);
        for (int b = 0; b < cfg.batch; ++b) {
            const int di = eligible[std::uniform_int_distribution<int>(
                0, static_cast<int>(eligible.size()) - 1)(rng)];
            const DriveData& d = drives[di];
            const int start = std::uniform_int_distribution<int>(
                0, static_cast<int>(d.epochs.size()) - 1 - cfg.window)(rng);
            windows[b] = WindowRef{&d, start, cfg.window};
        }
        BuildStats st;
        ad::Value loss = build_batch_loss(tape, model, pv, windows, cfg.build, &st);
        tape.backward(loss);
        std::vector<const ad::Tensor*> grads;
        grads.reserve(pv.size());
        for (ad::Value v : pv) grads.push_back(&tape.grad(v));
        ad::adam_step(params, grads, adam, cfg.adam);
        if (on_metrics &&
            (it == 0 || (it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations)) {
            TrainMetrics m;
            m.iteration = it + 1;
            m.loss = tape.scalar(loss);
            const int scored = st.labeled_epochs - st.skipped_epochs;
            m.label_accuracy =
                scored > 0 ? static_cast<double>(st.argmax_correct) / scored : 0.0;
            m.skipped_epochs = st.skipped_epochs;
            on_metrics(m);
        }
    }
}

}  // namespace roadkf::tgnn
