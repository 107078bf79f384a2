#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mstgat/graph.hpp"
#include "mstgat/rng.hpp"
#include "mstgat/tape.hpp"
#include "mstgat/tensor.hpp"

namespace mstgat {

enum class ModelKind : std::uint8_t { MStgat, Stgat, Gat, Lstm };

inline std::string model_kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::MStgat: return "m-stgat";
        case ModelKind::Stgat: return "stgat";
        case ModelKind::Gat: return "gat";
        case ModelKind::Lstm: return "lstm";
    }
    return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "m-stgat") return ModelKind::MStgat;
    if (s == "stgat") return ModelKind::Stgat;
    if (s == "gat") return ModelKind::Gat;
    if (s == "lstm") return ModelKind::Lstm;
    throw std::invalid_argument("unknown model kind \"" + s +
                                "\" (expected m-stgat|stgat|gat|lstm)");
}

struct ModelConfig {
    ModelKind kind = ModelKind::MStgat;
    std::size_t hidden = 64;       // LSTM hidden size d_h
    std::size_t heads = 4;         // attention heads K
    std::size_t head_dim = 16;     // per-head output width
    std::size_t cnn_width = 3;     // temporal kernel width
    std::size_t cnn_channels = 32;
    std::size_t history = 12;  // |H|
    std::size_t horizon = 6;   // |T|
    std::uint64_t seed = 0;

    // Only the multi-dimensional model consumes the exogenous channels.
    std::size_t input_channels() const { return kind == ModelKind::MStgat ? 4 : 1; }

    bool uses_lstm() const { return kind != ModelKind::Gat; }
    bool uses_gat() const { return kind != ModelKind::Lstm; }
    bool uses_cnn() const { return kind == ModelKind::MStgat || kind == ModelKind::Stgat; }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"kind", model_kind_name(c.kind)},
            {"hidden", c.hidden},
            {"heads", c.heads},
            {"head_dim", c.head_dim},
            {"cnn_width", c.cnn_width},
            {"cnn_channels", c.cnn_channels},
            {"history", c.history},
            {"horizon", c.horizon},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.kind = parse_model_kind(j.at("kind").get<std::string>());
    c.hidden = j.at("hidden").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    c.cnn_width = j.at("cnn_width").get<std::size_t>();
    c.cnn_channels = j.at("cnn_channels").get<std::size_t>();
    c.history = j.at("history").get<std::size_t>();
    c.horizon = j.at("horizon").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

// Ordered name -> tensor collection; creation order is fixed per config so
// checkpoints, Adam state and gradient walks all line up.
struct ParamSet {
    std::vector<std::pair<std::string, Tensor>> items;

    Tensor& at(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return t;
        throw std::out_of_range("unknown parameter " + name);
    }
    const Tensor& at(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return t;
        throw std::out_of_range("unknown parameter " + name);
    }

    void add(std::string name, Tensor t) {
        for (const auto& [n, unused] : items)
            if (n == name) throw std::invalid_argument("duplicate parameter " + name);
        items.emplace_back(std::move(name), std::move(t));
    }

    std::size_t scalar_count() const {
        std::size_t c = 0;
        for (const auto& [n, t] : items) c += t.numel();
        return c;
    }

    bool all_finite() const {
        for (const auto& [n, t] : items)
            if (!t.all_finite()) return false;
        return true;
    }
};

inline double glorot_limit(std::size_t fan_in, std::size_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

namespace detail {

inline Tensor glorot(Rng& rng, const Shape& shape, std::size_t fan_in, std::size_t fan_out) {
    Tensor t(shape);
    const double limit = glorot_limit(fan_in, fan_out);
    for (double& v : t.values()) v = rng.uniform(-limit, limit);
    return t;
}

inline void add_lstm_layer(ParamSet& p, Rng& rng, const std::string& prefix, std::size_t in_dim,
                           std::size_t hidden) {
    for (const char* gate : {"i", "f", "c", "o"}) {
        p.add(prefix + ".w_x" + gate, glorot(rng, {in_dim, hidden}, in_dim, hidden));
        p.add(prefix + ".w_h" + gate, glorot(rng, {hidden, hidden}, hidden, hidden));
        // forget gate bias starts at 1 so early training retains memory
        p.add(prefix + ".b_" + gate,
              Tensor({hidden}, std::string(gate) == "f" ? 1.0 : 0.0));
    }
}

}  // namespace detail

inline std::size_t gat_input_dim(const ModelConfig& c) {
    return c.kind == ModelKind::Gat ? c.history * c.input_channels() : c.hidden;
}

inline std::size_t conv_output_len(const ModelConfig& c) {
    if (c.cnn_width > c.history)
        throw std::invalid_argument("cnn kernel width " + std::to_string(c.cnn_width) +
                                    " exceeds history " + std::to_string(c.history));
    return c.history - c.cnn_width + 1;
}

// Glorot-uniform weights, zero biases except the forget-gate bias (1.0).
// Deterministic in the seed; the parameter list and shapes are a pure
// function of the config.
inline ParamSet init_params(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ParamSet p;
    std::size_t out_in_dim = 0;

    if (cfg.uses_lstm()) {
        detail::add_lstm_layer(p, rng, "lstm1", cfg.input_channels(), cfg.hidden);
        detail::add_lstm_layer(p, rng, "lstm2", cfg.hidden, cfg.hidden);
        out_in_dim = cfg.hidden;
    }
    if (cfg.uses_gat()) {
        if (cfg.heads < 1) throw std::invalid_argument("init_params: need at least one head");
        const std::size_t d_in = gat_input_dim(cfg);
        for (std::size_t k = 0; k < cfg.heads; ++k) {
            const std::string prefix = "gat.h" + std::to_string(k);
            p.add(prefix + ".w", detail::glorot(rng, {d_in, cfg.head_dim}, d_in, cfg.head_dim));
            p.add(prefix + ".a",
                  detail::glorot(rng, {2 * cfg.head_dim, 1}, 2 * cfg.head_dim, 1));
        }
        out_in_dim = cfg.heads * cfg.head_dim;
    }
    if (cfg.uses_cnn()) {
        const std::size_t d = cfg.heads * cfg.head_dim;
        p.add("cnn.kernel", detail::glorot(rng, {cfg.cnn_width, d, cfg.cnn_channels},
                                           cfg.cnn_width * d, cfg.cnn_width * cfg.cnn_channels));
        p.add("cnn.bias", Tensor({cfg.cnn_channels}, 0.0));
        out_in_dim = conv_output_len(cfg) * cfg.cnn_channels;
    }
    p.add("out.w", detail::glorot(rng, {out_in_dim, cfg.horizon}, out_in_dim, cfg.horizon));
    p.add("out.b", Tensor({cfg.horizon}, 0.0));
    return p;
}

// Parameter node ids after registering a ParamSet on a tape.
struct BoundParams {
    std::map<std::string, NodeId> ids;
    NodeId at(const std::string& name) const {
        auto it = ids.find(name);
        if (it == ids.end()) throw std::out_of_range("unbound parameter " + name);
        return it->second;
    }
};

inline BoundParams bind_params(Tape& tape, const ParamSet& params) {
    BoundParams b;
    for (const auto& [name, tensor] : params.items) b.ids[name] = tape.parameter(name, tensor);
    return b;
}

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

struct LstmCellIds {
    NodeId w_xi, w_hi, b_i;
    NodeId w_xf, w_hf, b_f;
    NodeId w_xc, w_hc, b_c;
    NodeId w_xo, w_ho, b_o;
};

inline LstmCellIds lstm_cell_ids(const BoundParams& b, const std::string& prefix) {
    return {b.at(prefix + ".w_xi"), b.at(prefix + ".w_hi"), b.at(prefix + ".b_i"),
            b.at(prefix + ".w_xf"), b.at(prefix + ".w_hf"), b.at(prefix + ".b_f"),
            b.at(prefix + ".w_xc"), b.at(prefix + ".w_hc"), b.at(prefix + ".b_c"),
            b.at(prefix + ".w_xo"), b.at(prefix + ".w_ho"), b.at(prefix + ".b_o")};
}

// One forget-gate LSTM step on a [rows, in] slab:
//   f = σ(x·W_xf + h·W_hf + b_f)        i = σ(x·W_xi + h·W_hi + b_i)
//   g = tanh(x·W_xc + h·W_hc + b_c)     o = σ(x·W_xo + h·W_ho + b_o)
//   c' = f⊙c + i⊙g                      h' = o⊙tanh(c')
inline std::pair<NodeId, NodeId> lstm_cell_step(Tape& tape, NodeId x, NodeId h, NodeId c,
                                                const LstmCellIds& ids) {
    auto gate = [&](NodeId wx, NodeId wh, NodeId bias) {
        return tape.bias_add(tape.add(tape.matmul(x, wx), tape.matmul(h, wh)), bias);
    };
    const NodeId f = tape.sigmoid(gate(ids.w_xf, ids.w_hf, ids.b_f));
    const NodeId i = tape.sigmoid(gate(ids.w_xi, ids.w_hi, ids.b_i));
    const NodeId g = tape.tanh(gate(ids.w_xc, ids.w_hc, ids.b_c));
    const NodeId o = tape.sigmoid(gate(ids.w_xo, ids.w_ho, ids.b_o));
    const NodeId c_next = tape.add(tape.mul(f, c), tape.mul(i, g));
    const NodeId h_next = tape.mul(o, tape.tanh(c_next));
    return {h_next, c_next};
}

// Two stacked LSTM layers along the history axis, weights shared across
// nodes (nodes are folded into the row dimension), zero initial state.
// input [B,N,H,F] -> hidden sequence [B,N,H,d_h].
inline NodeId temporal_encode(Tape& tape, NodeId input, const BoundParams& bound,
                              std::size_t hidden) {
    const Shape& s = tape.shape(input);
    if (s.size() != 4) throw std::invalid_argument("temporal_encode: want [B,N,H,F], got " +
                                                   shape_str(s));
    const std::size_t batch = s[0], nodes = s[1], hist = s[2], feat = s[3];
    const std::size_t rows = batch * nodes;

    NodeId by_time = tape.reshape(tape.permute(input, {2, 0, 1, 3}), {hist, rows, feat});

    std::vector<NodeId> sequence(hist);
    for (std::size_t t = 0; t < hist; ++t)
        sequence[t] = tape.reshape(tape.slice(by_time, 0, t, 1), {rows, feat});

    for (const std::string& prefix : {std::string("lstm1"), std::string("lstm2")}) {
        const LstmCellIds ids = lstm_cell_ids(bound, prefix);
        NodeId h = tape.constant(Tensor({rows, hidden}, 0.0));
        NodeId c = tape.constant(Tensor({rows, hidden}, 0.0));
        for (std::size_t t = 0; t < hist; ++t) {
            auto [h_next, c_next] = lstm_cell_step(tape, sequence[t], h, c, ids);
            h = h_next;
            c = c_next;
            sequence[t] = h;
        }
    }

    std::vector<NodeId> stacked(hist);
    for (std::size_t t = 0; t < hist; ++t)
        stacked[t] = tape.reshape(sequence[t], {1, rows, hidden});
    NodeId seq = tape.concat(stacked, 0);                            // [H, B*N, d]
    seq = tape.reshape(seq, {hist, batch, nodes, hidden});
    return tape.permute(seq, {1, 2, 0, 3});                          // [B,N,H,d]
}

// Multi-head graph attention in the original concatenation form:
//   e_ij = LeakyReLU(a · [W f_i ; W f_j]),  slope 0.2
//   α_i· = masked softmax of e_i· over the attention neighborhood of i
//   out_i = Σ_j α_ij W f_j, heads concatenated.
// features [B,S',N,d_in] -> [B,S',N,K·d_head].
inline NodeId gat_layer_forward(Tape& tape, NodeId features, const Tensor& neighborhood_mask,
                                const BoundParams& bound, std::size_t heads,
                                std::size_t head_dim) {
    const Shape& s = tape.shape(features);
    if (s.size() != 4)
        throw std::invalid_argument("gat_layer_forward: want [B,S,N,d], got " + shape_str(s));
    const std::size_t batch = s[0], steps = s[1], nodes = s[2], d_in = s[3];
    const std::size_t r = batch * steps;
    if (neighborhood_mask.shape() != Shape{nodes, nodes})
        throw std::invalid_argument("gat_layer_forward: mask must be [N,N]");

    Tensor mask_tiled({r, nodes, nodes});
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(neighborhood_mask.data(), nodes * nodes,
                    mask_tiled.data() + i * nodes * nodes);

    const NodeId flat = tape.reshape(features, {r * nodes, d_in});
    const NodeId ones_col = tape.constant(Tensor({r, nodes, 1}, 1.0));
    const NodeId ones_row = tape.constant(Tensor({r, 1, nodes}, 1.0));

    std::vector<NodeId> heads_out;
    heads_out.reserve(heads);
    for (std::size_t k = 0; k < heads; ++k) {
        const std::string prefix = "gat.h" + std::to_string(k);
        const NodeId w = bound.at(prefix + ".w");
        const NodeId a = bound.at(prefix + ".a");
        const NodeId a_self = tape.slice(a, 0, 0, head_dim);
        const NodeId a_peer = tape.slice(a, 0, head_dim, head_dim);

        const NodeId wf_flat = tape.matmul(flat, w);                     // [R*N, dh]
        const NodeId wf = tape.reshape(wf_flat, {r, nodes, head_dim});   // [R,N,dh]
        const NodeId s_self = tape.reshape(tape.matmul(wf_flat, a_self), {r, nodes, 1});
        const NodeId s_peer = tape.reshape(tape.matmul(wf_flat, a_peer), {r, 1, nodes});

        // e[r,i,j] = s_self[r,i] + s_peer[r,j] via two rank-1 batched products
        const NodeId e = tape.add(tape.bmm(s_self, ones_row), tape.bmm(ones_col, s_peer));
        const NodeId alpha = tape.masked_softmax(tape.leaky_relu(e, 0.2), mask_tiled);
        heads_out.push_back(tape.bmm(alpha, wf));                        // [R,N,dh]
    }
    const NodeId merged = heads_out.size() == 1 ? heads_out[0] : tape.concat(heads_out, 2);
    return tape.reshape(merged, {batch, steps, nodes, heads * head_dim});
}

// Valid temporal convolution per node, ReLU, then a linear readout of the
// flattened temporal×channel block. features [B,H,N,d] -> [B,N,T].
inline NodeId cnn_head(Tape& tape, NodeId features, NodeId kernel, NodeId conv_bias,
                       NodeId out_w, NodeId out_b, std::size_t horizon) {
    const Shape& s = tape.shape(features);
    if (s.size() != 4)
        throw std::invalid_argument("cnn_head: want [B,H,N,d], got " + shape_str(s));
    const std::size_t batch = s[0], hist = s[1], nodes = s[2], d = s[3];
    const std::size_t width = tape.shape(kernel)[0];
    if (width > hist)
        throw std::invalid_argument("cnn_head: kernel width " + std::to_string(width) +
                                    " exceeds history " + std::to_string(hist));
    const std::size_t channels = tape.shape(kernel)[2];
    const std::size_t conv_len = hist - width + 1;

    NodeId x = tape.permute(features, {0, 2, 1, 3});             // [B,N,H,d]
    x = tape.reshape(x, {batch * nodes, hist, d});
    NodeId y = tape.relu(tape.bias_add(tape.conv1d(x, kernel), conv_bias));
    y = tape.reshape(y, {batch * nodes, conv_len * channels});
    NodeId p = tape.bias_add(tape.matmul(y, out_w), out_b);      // [B*N, T]
    return tape.reshape(p, {batch, nodes, horizon});
}

// ---------------------------------------------------------------------------
// full forward passes
// ---------------------------------------------------------------------------

inline NodeId model_forward(Tape& tape, const ModelConfig& cfg, const BoundParams& bound,
                            NodeId input, const Tensor& neighborhood_mask) {
    const Shape& s = tape.shape(input);
    if (s.size() != 4)
        throw std::invalid_argument("model_forward: want [B,N,H,F], got " + shape_str(s));
    if (s[3] != cfg.input_channels()) {
        throw std::invalid_argument("model_forward: " + model_kind_name(cfg.kind) + " takes F=" +
                                    std::to_string(cfg.input_channels()) + " input channels, got " +
                                    std::to_string(s[3]));
    }
    if (s[2] != cfg.history)
        throw std::invalid_argument("model_forward: input history " + std::to_string(s[2]) +
                                    " != configured |H| " + std::to_string(cfg.history));
    const std::size_t batch = s[0], nodes = s[1];

    switch (cfg.kind) {
        case ModelKind::MStgat:
        case ModelKind::Stgat: {
            NodeId h = temporal_encode(tape, input, bound, cfg.hidden);   // [B,N,H,d]
            h = tape.relu(h);
            h = tape.permute(h, {0, 2, 1, 3});                            // [B,H,N,d]
            NodeId g = gat_layer_forward(tape, h, neighborhood_mask, bound, cfg.heads,
                                         cfg.head_dim);                   // [B,H,N,K*dh]
            g = tape.relu(g);
            return cnn_head(tape, g, bound.at("cnn.kernel"), bound.at("cnn.bias"),
                            bound.at("out.w"), bound.at("out.b"), cfg.horizon);
        }
        case ModelKind::Gat: {
            // the full flattened history becomes the node feature vector
            const NodeId feats = tape.reshape(input, {batch, 1, nodes, cfg.history});
            NodeId g = gat_layer_forward(tape, feats, neighborhood_mask, bound, cfg.heads,
                                         cfg.head_dim);                   // [B,1,N,K*dh]
            g = tape.reshape(g, {batch * nodes, cfg.heads * cfg.head_dim});
            NodeId p = tape.bias_add(tape.matmul(g, bound.at("out.w")), bound.at("out.b"));
            return tape.reshape(p, {batch, nodes, cfg.horizon});
        }
        case ModelKind::Lstm: {
            NodeId h = temporal_encode(tape, input, bound, cfg.hidden);   // [B,N,H,d]
            NodeId last = tape.slice(h, 2, cfg.history - 1, 1);           // [B,N,1,d]
            last = tape.reshape(last, {batch * nodes, cfg.hidden});
            NodeId p = tape.bias_add(tape.matmul(last, bound.at("out.w")), bound.at("out.b"));
            return tape.reshape(p, {batch, nodes, cfg.horizon});
        }
    }
    throw std::logic_error("model_forward: bad kind");
}

// Convenience wrapper: fresh tape, constant input, forward only.
inline Tensor model_predict(const ModelConfig& cfg, const ParamSet& params, const Tensor& inputs,
                            const Tensor& neighborhood_mask) {
    Tape tape;
    const BoundParams bound = bind_params(tape, params);
    const NodeId out =
        model_forward(tape, cfg, bound, tape.constant(inputs), neighborhood_mask);
    return tape.value(out);
}

}  // namespace mstgat
