#include "elm/tinyformer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "elm/rng.hpp"

namespace elm::nn {

namespace {

constexpr double kLayerNormEps = 1e-12;
constexpr double kMaskedScore = -1e9;

Matrix row_zeros(int n) { return Matrix::Zero(1, n); }
Matrix row_ones(int n) { return Matrix::Ones(1, n); }

Matrix init_weight(int rows, int cols, Rng& rng) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.truncated_normal(0.02);
    return m;
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix& norm, Eigen::VectorXd& rstd) {
    const auto cols = static_cast<double>(x.cols());
    norm.resize(x.rows(), x.cols());
    rstd.resize(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).sum() / cols;
        const double var = (x.row(r).array() - mean).square().sum() / cols;
        rstd(r) = 1.0 / std::sqrt(var + kLayerNormEps);
        norm.row(r) = (x.row(r).array() - mean) * rstd(r);
    }
    Matrix out = norm.array().rowwise() * gain.row(0).array();
    out.rowwise() += bias.row(0);
    return out;
}

Matrix layer_norm_backward(const Matrix& d_out, const Matrix& norm, const Eigen::VectorXd& rstd,
                           const Matrix& gain, Matrix& d_gain, Matrix& d_bias) {
    d_gain.row(0) += (d_out.array() * norm.array()).colwise().sum().matrix();
    d_bias.row(0) += d_out.colwise().sum();
    const Matrix d_norm = d_out.array().rowwise() * gain.row(0).array();
    const auto cols = static_cast<double>(norm.cols());
    Matrix dx(norm.rows(), norm.cols());
    for (Eigen::Index r = 0; r < norm.rows(); ++r) {
        const double mean_d = d_norm.row(r).sum() / cols;
        const double mean_dn = d_norm.row(r).dot(norm.row(r)) / cols;
        dx.row(r) = rstd(r) * (d_norm.row(r).array() - mean_d - norm.row(r).array() * mean_dn);
    }
    return dx;
}

void add_bias(Matrix& x, const Matrix& bias) { x.rowwise() += bias.row(0); }

}  // namespace

void TransformerConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) throw std::invalid_argument(std::string(name) + " must be positive");
    };
    positive(layers, "layers");
    positive(hidden, "hidden");
    positive(ffn, "ffn");
    positive(heads, "heads");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (hidden % heads != 0) {
        throw std::invalid_argument("hidden (" + std::to_string(hidden) + ") must be divisible by heads (" +
                                    std::to_string(heads) + ")");
    }
}

Linear Linear::zeros(int in, int out) { return {Matrix::Zero(in, out), Matrix::Zero(1, out)}; }

Matrix Linear::forward(const Matrix& x) const {
    Matrix y = x * weight;
    add_bias(y, bias);
    return y;
}

EncoderParams EncoderParams::zeros(const TransformerConfig& c) {
    EncoderParams p;
    p.token_embedding = Matrix::Zero(c.vocab_size, c.hidden);
    p.position_embedding = Matrix::Zero(c.max_seq_len, c.hidden);
    p.emb_ln_gain = row_zeros(c.hidden);
    p.emb_ln_bias = row_zeros(c.hidden);
    p.layers.resize(c.layers);
    for (auto& l : p.layers) {
        for (Matrix* w : {&l.wq, &l.wk, &l.wv, &l.wo}) *w = Matrix::Zero(c.hidden, c.hidden);
        for (Matrix* b : {&l.bq, &l.bk, &l.bv, &l.bo, &l.ln1_gain, &l.ln1_bias, &l.b2, &l.ln2_gain, &l.ln2_bias}) {
            *b = row_zeros(c.hidden);
        }
        l.w1 = Matrix::Zero(c.hidden, c.ffn);
        l.b1 = row_zeros(c.ffn);
        l.w2 = Matrix::Zero(c.ffn, c.hidden);
    }
    return p;
}

std::size_t EncoderParams::parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

Encoder Encoder::initialize(const TransformerConfig& config) {
    config.validate();
    Rng rng(config.seed);
    Encoder model{config, EncoderParams::zeros(config)};
    auto& p = model.params;
    p.token_embedding = init_weight(config.vocab_size, config.hidden, rng);
    p.position_embedding = init_weight(config.max_seq_len, config.hidden, rng);
    p.emb_ln_gain = row_ones(config.hidden);
    for (auto& l : p.layers) {
        l.wq = init_weight(config.hidden, config.hidden, rng);
        l.wk = init_weight(config.hidden, config.hidden, rng);
        l.wv = init_weight(config.hidden, config.hidden, rng);
        l.wo = init_weight(config.hidden, config.hidden, rng);
        l.w1 = init_weight(config.hidden, config.ffn, rng);
        l.w2 = init_weight(config.ffn, config.hidden, rng);
        l.ln1_gain = row_ones(config.hidden);
        l.ln2_gain = row_ones(config.hidden);
    }
    return model;
}

Batch Batch::from_sequences(std::span<const std::vector<int>> sequences) {
    if (sequences.empty()) throw std::invalid_argument("Batch: no sequences");
    Batch b;
    b.batch_size = static_cast<int>(sequences.size());
    b.seq_len = static_cast<int>(sequences.front().size());
    b.tokens.reserve(static_cast<std::size_t>(b.batch_size) * b.seq_len);
    for (const auto& s : sequences) {
        if (static_cast<int>(s.size()) != b.seq_len) throw std::invalid_argument("Batch: ragged sequences");
        b.tokens.insert(b.tokens.end(), s.begin(), s.end());
    }
    return b;
}

Matrix softmax_rows(const Matrix& scores) {
    Matrix p(scores.rows(), scores.cols());
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        const double m = scores.row(r).maxCoeff();
        p.row(r) = (scores.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

const Matrix& ForwardCache::output() const {
    return layers.empty() ? emb_norm : layers.back().acts.hidden;
}

ForwardCache forward(const Encoder& model, const Batch& batch) {
    const auto& c = model.config;
    const auto& p = model.params;
    const int B = batch.batch_size;
    const int L = batch.seq_len;
    const int d = c.hidden;
    const int H = c.heads;
    const int dk = c.head_dim();
    if (L < 1 || L > c.max_seq_len) {
        throw std::invalid_argument("sequence length " + std::to_string(L) + " outside [1," +
                                    std::to_string(c.max_seq_len) + "]");
    }
    if (batch.tokens.size() != static_cast<std::size_t>(B) * L) throw std::invalid_argument("batch shape mismatch");
    if (!batch.mask.empty() && batch.mask.size() != batch.tokens.size()) {
        throw std::invalid_argument("mask shape mismatch");
    }

    ForwardCache cache;
    cache.batch = batch;
    cache.emb_sum.resize(static_cast<Eigen::Index>(B) * L, d);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < L; ++t) {
            const int id = batch.tokens[static_cast<std::size_t>(b) * L + t];
            if (id < 0 || id >= c.vocab_size) {
                throw std::invalid_argument("token id " + std::to_string(id) + " outside vocabulary of " +
                                            std::to_string(c.vocab_size));
            }
            cache.emb_sum.row(b * L + t) = p.token_embedding.row(id) + p.position_embedding.row(t);
        }
    }
    Matrix x = layer_norm(cache.emb_sum, p.emb_ln_gain, p.emb_ln_bias, cache.emb_norm, cache.emb_rstd);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    cache.layers.resize(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const LayerParams& w = p.layers[l];
        LayerCache& lc = cache.layers[l];
        lc.input = std::move(x);
        lc.q.noalias() = lc.input * w.wq;
        add_bias(lc.q, w.bq);
        lc.k.noalias() = lc.input * w.wk;
        add_bias(lc.k, w.bk);
        lc.v.noalias() = lc.input * w.wv;
        add_bias(lc.v, w.bv);

        lc.acts.attention_scores.resize(static_cast<std::size_t>(B) * H);
        lc.probs.resize(static_cast<std::size_t>(B) * H);
        lc.context.resize(static_cast<Eigen::Index>(B) * L, d);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const auto qh = lc.q.block(b * L, h * dk, L, dk);
                const auto kh = lc.k.block(b * L, h * dk, L, dk);
                const auto vh = lc.v.block(b * L, h * dk, L, dk);
                Matrix& scores = lc.acts.attention_scores[b * H + h];
                scores.noalias() = scale * (qh * kh.transpose());
                Matrix masked = scores;
                if (!batch.mask.empty()) {
                    for (int j = 0; j < L; ++j) {
                        if (!batch.mask[static_cast<std::size_t>(b) * L + j]) masked.col(j).array() += kMaskedScore;
                    }
                }
                lc.probs[b * H + h] = softmax_rows(masked);
                lc.context.block(b * L, h * dk, L, dk).noalias() = lc.probs[b * H + h] * vh;
            }
        }
        Matrix s1 = lc.input;
        s1.noalias() += lc.context * w.wo;
        add_bias(s1, w.bo);
        lc.h1 = layer_norm(s1, w.ln1_gain, w.ln1_bias, lc.ln1_norm, lc.ln1_rstd);

        lc.ffn_pre.noalias() = lc.h1 * w.w1;
        add_bias(lc.ffn_pre, w.b1);
        lc.ffn_act = lc.ffn_pre.cwiseMax(0.0);
        Matrix s2 = lc.h1;
        s2.noalias() += lc.ffn_act * w.w2;
        add_bias(s2, w.b2);
        lc.acts.hidden = layer_norm(s2, w.ln2_gain, w.ln2_bias, lc.ln2_norm, lc.ln2_rstd);
        x = lc.acts.hidden;
    }
    return cache;
}

ActivationGrads ActivationGrads::empty(std::size_t layers) {
    ActivationGrads g;
    g.attention_scores.resize(layers);
    g.hidden.resize(layers);
    return g;
}

EncoderParams backward(const Encoder& model, const ForwardCache& cache, const ActivationGrads& grads) {
    const auto& c = model.config;
    const auto& p = model.params;
    const int B = cache.batch.batch_size;
    const int L = cache.batch.seq_len;
    const int d = c.hidden;
    const int H = c.heads;
    const int dk = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    if (cache.layers.size() != p.layers.size()) throw std::logic_error("backward: cache does not match model");
    if (grads.hidden.size() != p.layers.size() || grads.attention_scores.size() != p.layers.size()) {
        throw std::invalid_argument("backward: gradient list does not match layer count");
    }

    EncoderParams g = EncoderParams::zeros(c);
    Matrix dx = Matrix::Zero(static_cast<Eigen::Index>(B) * L, d);  // gradient flowing into the current layer's output

    for (std::size_t li = p.layers.size(); li-- > 0;) {
        const LayerParams& w = p.layers[li];
        const LayerCache& lc = cache.layers[li];
        LayerParams& gw = g.layers[li];
        if (grads.hidden[li].size() != 0) dx += grads.hidden[li];

        const Matrix d_s2 = layer_norm_backward(dx, lc.ln2_norm, lc.ln2_rstd, w.ln2_gain, gw.ln2_gain, gw.ln2_bias);
        gw.w2.noalias() += lc.ffn_act.transpose() * d_s2;
        gw.b2.row(0) += d_s2.colwise().sum();
        Matrix d_pre = d_s2 * w.w2.transpose();
        d_pre = (lc.ffn_pre.array() > 0.0).select(d_pre, 0.0);
        gw.w1.noalias() += lc.h1.transpose() * d_pre;
        gw.b1.row(0) += d_pre.colwise().sum();
        Matrix d_h1 = d_s2;
        d_h1.noalias() += d_pre * w.w1.transpose();

        const Matrix d_s1 = layer_norm_backward(d_h1, lc.ln1_norm, lc.ln1_rstd, w.ln1_gain, gw.ln1_gain, gw.ln1_bias);
        gw.wo.noalias() += lc.context.transpose() * d_s1;
        gw.bo.row(0) += d_s1.colwise().sum();
        const Matrix d_ctx = d_s1 * w.wo.transpose();

        Matrix dq(static_cast<Eigen::Index>(B) * L, d), dkm(static_cast<Eigen::Index>(B) * L, d),
            dv(static_cast<Eigen::Index>(B) * L, d);
        const auto& extra = grads.attention_scores[li];
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const Matrix& P = lc.probs[b * H + h];
                const auto qh = lc.q.block(b * L, h * dk, L, dk);
                const auto kh = lc.k.block(b * L, h * dk, L, dk);
                const auto vh = lc.v.block(b * L, h * dk, L, dk);
                const auto dch = d_ctx.block(b * L, h * dk, L, dk);
                const Matrix dP = dch * vh.transpose();
                dv.block(b * L, h * dk, L, dk).noalias() = P.transpose() * dch;
                const Eigen::VectorXd row_dot = (dP.array() * P.array()).rowwise().sum();
                Matrix dA = P.array() * (dP.array().colwise() - row_dot.array());
                if (!extra.empty() && extra[b * H + h].size() != 0) dA += extra[b * H + h];
                dq.block(b * L, h * dk, L, dk).noalias() = scale * (dA * kh);
                dkm.block(b * L, h * dk, L, dk).noalias() = scale * (dA.transpose() * qh);
            }
        }
        gw.wq.noalias() += lc.input.transpose() * dq;
        gw.bq.row(0) += dq.colwise().sum();
        gw.wk.noalias() += lc.input.transpose() * dkm;
        gw.bk.row(0) += dkm.colwise().sum();
        gw.wv.noalias() += lc.input.transpose() * dv;
        gw.bv.row(0) += dv.colwise().sum();

        Matrix d_in = d_s1;
        d_in.noalias() += dq * w.wq.transpose();
        d_in.noalias() += dkm * w.wk.transpose();
        d_in.noalias() += dv * w.wv.transpose();
        dx = std::move(d_in);
    }

    const Matrix d_emb = layer_norm_backward(dx, cache.emb_norm, cache.emb_rstd, p.emb_ln_gain, g.emb_ln_gain,
                                             g.emb_ln_bias);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < L; ++t) {
            const int id = cache.batch.tokens[static_cast<std::size_t>(b) * L + t];
            g.token_embedding.row(id) += d_emb.row(b * L + t);
            g.position_embedding.row(t) += d_emb.row(b * L + t);
        }
    }
    return g;
}

std::vector<double> layer_contribution(const Encoder& model, std::span<const std::vector<int>> sequences,
                                       int batch_size) {
    if (sequences.empty()) throw std::invalid_argument("layer_contribution: empty corpus sample");
    const std::size_t layers = model.params.layers.size();
    std::vector<double> sum(layers, 0.0);
    std::vector<long> count(layers, 0);
    for (std::size_t start = 0; start < sequences.size(); start += batch_size) {
        const std::size_t end = std::min(sequences.size(), start + static_cast<std::size_t>(batch_size));
        const auto cache = forward(model, Batch::from_sequences(sequences.subspan(start, end - start)));
        for (std::size_t l = 0; l < layers; ++l) {
            const Matrix& in = cache.layers[l].input;
            const Matrix& out = cache.layers[l].acts.hidden;
            for (Eigen::Index r = 0; r < in.rows(); ++r) {
                const double ni = in.row(r).norm();
                const double no = out.row(r).norm();
                if (ni == 0.0 || no == 0.0) continue;
                sum[l] += in.row(r).dot(out.row(r)) / (ni * no);
                ++count[l];
            }
        }
    }
    std::vector<double> scores(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        if (count[l] == 0) {
            throw std::runtime_error("layer_contribution: every position of layer " + std::to_string(l + 1) +
                                     " has a zero-norm hidden vector");
        }
        scores[l] = sum[l] / static_cast<double>(count[l]);
    }
    return scores;
}

// ---------------------------------------------------------------------------
// Snapshots

namespace {

constexpr char kMagic[4] = {'E', 'L', 'M', 'W'};

template <class T>
void put_le(std::vector<char>& out, T value) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(std::span<const char> bytes, std::size_t& pos) {
    if (pos + sizeof(T) > bytes.size()) throw std::runtime_error("snapshot truncated");
    std::make_unsigned_t<T> v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        v |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    }
    pos += sizeof(T);
    return static_cast<T>(v);
}

}  // namespace

std::vector<char> serialize(const Encoder& model) {
    std::vector<char> out(kMagic, kMagic + 4);
    put_le<std::uint32_t>(out, kSnapshotVersion);
    const auto& c = model.config;
    for (int field : {c.layers, c.hidden, c.ffn, c.heads, c.vocab_size, c.max_seq_len}) put_le<std::int32_t>(out, field);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.seed & 0xFFFFFFFFu));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.seed >> 32));
    auto params = model.params;
    params.visit([&](const std::string&, Matrix& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(m.data()[i]));
    });
    return out;
}

Encoder deserialize(std::span<const char> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw std::runtime_error("not an ELMW snapshot");
    std::size_t pos = 4;
    const auto version = get_le<std::uint32_t>(bytes, pos);
    if (version != kSnapshotVersion) {
        throw std::runtime_error("snapshot version " + std::to_string(version) + " is not supported");
    }
    TransformerConfig c;
    c.layers = get_le<std::int32_t>(bytes, pos);
    c.hidden = get_le<std::int32_t>(bytes, pos);
    c.ffn = get_le<std::int32_t>(bytes, pos);
    c.heads = get_le<std::int32_t>(bytes, pos);
    c.vocab_size = get_le<std::int32_t>(bytes, pos);
    c.max_seq_len = get_le<std::int32_t>(bytes, pos);
    const std::uint64_t lo = get_le<std::uint32_t>(bytes, pos);
    const std::uint64_t hi = get_le<std::uint32_t>(bytes, pos);
    c.seed = lo | (hi << 32);
    c.validate();
    Encoder model{c, EncoderParams::zeros(c)};
    model.params.visit([&](const std::string&, Matrix& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
    });
    if (pos != bytes.size()) throw std::runtime_error("snapshot has trailing bytes");
    return model;
}

void save_snapshot(const Encoder& model, const std::filesystem::path& path) {
    const auto bytes = serialize(model);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("cannot write snapshot " + path.string());
}

Encoder load_snapshot(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open snapshot " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
    return deserialize(bytes);
}

}  // namespace elm::nn
