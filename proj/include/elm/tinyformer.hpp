#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace elm::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct TransformerConfig {
    int layers = 2;
    int hidden = 16;
    int ffn = 64;
    int heads = 2;
    int vocab_size = 64;
    int max_seq_len = 32;
    std::uint64_t seed = 0;

    int head_dim() const { return hidden / heads; }
    /// Throws std::invalid_argument naming the offending field.
    void validate() const;

    friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

/// Dense layer y = x W + b, W stored in_features x out_features.
struct Linear {
    Matrix weight;
    Matrix bias;  // 1 x out

    static Linear zeros(int in, int out);
    Matrix forward(const Matrix& x) const;
};

struct LayerParams {
    Matrix wq, bq, wk, bk, wv, bv;  // d x d (heads are column blocks of width d_k), 1 x d
    Matrix wo, bo;
    Matrix ln1_gain, ln1_bias;
    Matrix w1, b1;  // d x d_i, 1 x d_i
    Matrix w2, b2;  // d_i x d, 1 x d
    Matrix ln2_gain, ln2_bias;

    template <class F>
    void visit(F&& f) {
        f("wq", wq), f("bq", bq), f("wk", wk), f("bk", bk), f("wv", wv), f("bv", bv);
        f("wo", wo), f("bo", bo), f("ln1_gain", ln1_gain), f("ln1_bias", ln1_bias);
        f("w1", w1), f("b1", b1), f("w2", w2), f("b2", b2), f("ln2_gain", ln2_gain), f("ln2_bias", ln2_bias);
    }
};

/// All encoder tensors. Also used as the gradient container.
struct EncoderParams {
    Matrix token_embedding;     // vocab x d
    Matrix position_embedding;  // max_seq_len x d
    Matrix emb_ln_gain, emb_ln_bias;
    std::vector<LayerParams> layers;

    /// Visits (name, tensor) in declaration order; the snapshot format relies on this order.
    template <class F>
    void visit(F&& f) {
        f(std::string("token_embedding"), token_embedding);
        f(std::string("position_embedding"), position_embedding);
        f(std::string("emb_ln_gain"), emb_ln_gain);
        f(std::string("emb_ln_bias"), emb_ln_bias);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string prefix = "layer" + std::to_string(l) + ".";
            layers[l].visit([&](const char* name, Matrix& m) { f(prefix + name, m); });
        }
    }

    static EncoderParams zeros(const TransformerConfig& config);
    std::size_t parameter_count();
};

struct Encoder {
    TransformerConfig config;
    EncoderParams params;

    /// Truncated-normal(0.02) weights, zero biases, unit layer-norm gains.
    static Encoder initialize(const TransformerConfig& config);
};

/// B sequences of a common length L, row-major token ids.
struct Batch {
    int batch_size = 0;
    int seq_len = 0;
    std::vector<int> tokens;
    /// Optional key mask, 1 = attend. Empty means attend everywhere.
    std::vector<std::uint8_t> mask;

    static Batch from_sequences(std::span<const std::vector<int>> sequences);
};

/// What distillation reads from one layer: pre-softmax scaled scores
/// (index b * heads + head, each L x L) and the layer output (B*L x d).
struct LayerActivations {
    std::vector<Matrix> attention_scores;
    Matrix hidden;
};

struct LayerCache {
    Matrix input;
    Matrix q, k, v;
    LayerActivations acts;
    std::vector<Matrix> probs;
    Matrix context;
    Matrix ln1_norm;
    Eigen::VectorXd ln1_rstd;
    Matrix h1;
    Matrix ffn_pre;
    Matrix ffn_act;
    Matrix ln2_norm;
    Eigen::VectorXd ln2_rstd;
};

struct ForwardCache {
    Batch batch;
    Matrix emb_sum;
    Matrix emb_norm;
    Eigen::VectorXd emb_rstd;
    std::vector<LayerCache> layers;

    const Matrix& output() const;
    const LayerActivations& activations(std::size_t layer) const { return layers.at(layer).acts; }
};

/// Throws std::invalid_argument on shape problems or out-of-vocab ids.
ForwardCache forward(const Encoder& model, const Batch& batch);

/// Upstream gradients injected at each layer; empty matrices mean zero.
struct ActivationGrads {
    std::vector<std::vector<Matrix>> attention_scores;  // [layer][b * heads + head]
    std::vector<Matrix> hidden;                          // [layer]

    static ActivationGrads empty(std::size_t layers);
};

/// Gradients of a scalar loss whose partials w.r.t. the recorded activations
/// are `grads`. Returns a tensor set shaped like model.params.
EncoderParams backward(const Encoder& model, const ForwardCache& cache, const ActivationGrads& grads);

/// Row-wise softmax with optional additive mask already applied by the caller.
Matrix softmax_rows(const Matrix& scores);

/// Mean cosine between each layer's input and output hidden vectors over all
/// positions; zero-norm positions are skipped. Throws if a layer has none left.
std::vector<double> layer_contribution(const Encoder& model, std::span<const std::vector<int>> sequences,
                                       int batch_size = 32);

// Snapshot file: "ELMW", u32 version, 8 x i32 config fields, then every
// tensor in EncoderParams::visit order as little-endian f64.
inline constexpr std::uint32_t kSnapshotVersion = 1;

std::vector<char> serialize(const Encoder& model);
Encoder deserialize(std::span<const char> bytes);
void save_snapshot(const Encoder& model, const std::filesystem::path& path);
Encoder load_snapshot(const std::filesystem::path& path);

}  // namespace elm::nn
