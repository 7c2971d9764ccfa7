#include "elm/distillation.hpp"

#include <cmath>
#include <numeric>

#include "elm/optimizer.hpp"
#include "elm/rng.hpp"
#include "elm/vocabulary.hpp"

namespace elm::distill {

namespace {

struct MaskedBatch {
    nn::Batch batch;
    std::vector<Eigen::Index> rows;  // flattened positions that were masked
    std::vector<int> labels;
};

MaskedBatch mask_sequences(std::span<const std::vector<int>> sequences, double mask_prob, Rng& rng) {
    MaskedBatch mb;
    mb.batch = nn::Batch::from_sequences(sequences);
    const int L = mb.batch.seq_len;
    for (int b = 0; b < mb.batch.batch_size; ++b) {
        std::vector<int> chosen;
        for (int t = 1; t < L; ++t) {
            if (rng.bernoulli(mask_prob)) chosen.push_back(t);
        }
        if (chosen.empty() && L > 1) chosen.push_back(1 + static_cast<int>(rng.below(L - 1)));
        for (int t : chosen) {
            const std::size_t flat = static_cast<std::size_t>(b) * L + t;
            mb.rows.push_back(static_cast<Eigen::Index>(flat));
            mb.labels.push_back(mb.batch.tokens[flat]);
            mb.batch.tokens[flat] = vocab::kMask;
        }
    }
    return mb;
}

std::vector<std::vector<int>> sample_batch(std::span<const std::vector<int>> corpus, int batch_size, Rng& rng) {
    std::vector<std::vector<int>> out;
    out.reserve(batch_size);
    for (int i = 0; i < batch_size; ++i) out.push_back(corpus[rng.below(corpus.size())]);
    return out;
}

Matrix gather_rows(const Matrix& m, const std::vector<Eigen::Index>& rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
    return out;
}

}  // namespace

Teacher pretrain_teacher(const nn::TransformerConfig& config, std::span<const std::vector<int>> corpus,
                         const PretrainConfig& pretrain, std::vector<double>* loss_curve) {
    if (corpus.empty()) throw std::invalid_argument("pretrain_teacher: empty corpus");
    Teacher teacher{nn::Encoder::initialize(config), nn::Linear::zeros(config.hidden, config.vocab_size)};
    Rng init_rng(derive_seed(pretrain.seed, 1));
    for (Eigen::Index i = 0; i < teacher.mlm_head.weight.size(); ++i) {
        teacher.mlm_head.weight.data()[i] = init_rng.truncated_normal(0.02);
    }
    Rng rng(derive_seed(pretrain.seed, 2));
    nn::Adam adam;
    const nn::LinearSchedule schedule(pretrain.learning_rate, pretrain.steps, pretrain.warmup_fraction);

    for (int step = 0; step < pretrain.steps; ++step) {
        const auto seqs = sample_batch(corpus, pretrain.batch_size, rng);
        const auto mb = mask_sequences(seqs, pretrain.mask_prob, rng);
        const auto cache = nn::forward(teacher.encoder, mb.batch);
        const Matrix hm = gather_rows(cache.output(), mb.rows);
        const Matrix probs = nn::softmax_rows(teacher.mlm_head.forward(hm));
        const double n = static_cast<double>(mb.rows.size());
        double loss = 0.0;
        Matrix d_logits = probs;
        for (std::size_t i = 0; i < mb.labels.size(); ++i) {
            loss -= std::log(std::max(probs(static_cast<Eigen::Index>(i), mb.labels[i]), 1e-300));
            d_logits(static_cast<Eigen::Index>(i), mb.labels[i]) -= 1.0;
        }
        loss /= n;
        d_logits /= n;
        if (!std::isfinite(loss)) throw DivergenceError("teacher pretraining diverged at step " + std::to_string(step));
        if (loss_curve) loss_curve->push_back(loss);

        nn::Linear head_grad{hm.transpose() * d_logits, d_logits.colwise().sum()};
        const Matrix d_hm = d_logits * teacher.mlm_head.weight.transpose();
        auto grads = nn::ActivationGrads::empty(teacher.encoder.params.layers.size());
        Matrix& d_out = grads.hidden.back();
        d_out = Matrix::Zero(cache.output().rows(), cache.output().cols());
        for (std::size_t i = 0; i < mb.rows.size(); ++i) d_out.row(mb.rows[i]) += d_hm.row(static_cast<Eigen::Index>(i));
        auto enc_grad = nn::backward(teacher.encoder, cache, grads);

        auto params = nn::tensor_list(teacher.encoder.params);
        auto grad_list = nn::tensor_list(static_cast<const nn::EncoderParams&>(enc_grad));
        params.push_back(&teacher.mlm_head.weight);
        params.push_back(&teacher.mlm_head.bias);
        grad_list.push_back(&head_grad.weight);
        grad_list.push_back(&head_grad.bias);
        adam.step(params, grad_list, schedule.at(step));
    }
    return teacher;
}

double masked_accuracy(const Teacher& teacher, std::span<const std::vector<int>> sequences, double mask_prob,
                       std::uint64_t seed) {
    if (sequences.empty()) throw std::invalid_argument("masked_accuracy: no sequences");
    Rng rng(seed);
    long correct = 0, total = 0;
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < sequences.size(); start += kChunk) {
        const auto chunk = sequences.subspan(start, std::min(kChunk, sequences.size() - start));
        const auto mb = mask_sequences(chunk, mask_prob, rng);
        const auto cache = nn::forward(teacher.encoder, mb.batch);
        const Matrix logits = teacher.mlm_head.forward(gather_rows(cache.output(), mb.rows));
        for (std::size_t i = 0; i < mb.labels.size(); ++i) {
            Eigen::Index arg;
            logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
            correct += arg == mb.labels[i];
            ++total;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

double layer_loss(const nn::LayerActivations& student, const nn::LayerActivations& teacher, const Matrix& projection,
                  int heads, LayerLossGrad* grad) {
    if (heads < 1) throw std::invalid_argument("layer_loss: heads must be positive");
    if (student.attention_scores.size() != teacher.attention_scores.size() ||
        student.attention_scores.size() % static_cast<std::size_t>(heads) != 0) {
        throw std::invalid_argument("layer_loss: head-count mismatch between student and teacher");
    }
    const auto batch = static_cast<double>(student.attention_scores.size() / heads);
    if (student.hidden.rows() != teacher.hidden.rows()) {
        throw std::invalid_argument("layer_loss: sequence length mismatch between student and teacher");
    }
    if (projection.rows() != student.hidden.cols() || projection.cols() != teacher.hidden.cols()) {
        throw std::invalid_argument("layer_loss: projection must be d_student x d_teacher");
    }
    double attention = 0.0;
    if (grad) grad->attention_scores.resize(student.attention_scores.size());
    for (std::size_t i = 0; i < student.attention_scores.size(); ++i) {
        const Matrix& s = student.attention_scores[i];
        const Matrix& t = teacher.attention_scores[i];
        if (s.rows() != t.rows() || s.cols() != t.cols()) {
            throw std::invalid_argument("layer_loss: sequence length mismatch between student and teacher");
        }
        const Matrix diff = s - t;
        attention += diff.squaredNorm();
        if (grad) grad->attention_scores[i] = (2.0 / (heads * batch)) * diff;
    }
    const Matrix residual = student.hidden * projection - teacher.hidden;
    const double loss = attention / (heads * batch) + residual.squaredNorm() / batch;
    if (grad) {
        grad->hidden = (2.0 / batch) * (residual * projection.transpose());
        grad->projection = (2.0 / batch) * (student.hidden.transpose() * residual);
    }
    return loss;
}

void DistillConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("distill steps must be at least 1");
    if (batch_size < 1) throw std::invalid_argument("distill batch_size must be at least 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("distill learning_rate must be positive");
}

TeacherTargets::TeacherTargets(const nn::Encoder& teacher, std::vector<std::vector<int>> sequences, int batch_size)
    : sequences_(std::move(sequences)), heads_(teacher.config.heads), hidden_size_(teacher.config.hidden) {
    if (sequences_.empty()) throw std::invalid_argument("TeacherTargets: no sequences");
    seq_len_ = static_cast<int>(sequences_.front().size());
    const std::size_t layers = teacher.params.layers.size();
    const std::size_t n = sequences_.size();
    scores_.assign(layers, std::vector<Matrix>(n * heads_));
    hidden_.assign(layers, Matrix(static_cast<Eigen::Index>(n) * seq_len_, hidden_size_));
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t count = std::min<std::size_t>(batch_size, n - start);
        const auto cache = nn::forward(
            teacher, nn::Batch::from_sequences(std::span(sequences_).subspan(start, count)));
        for (std::size_t l = 0; l < layers; ++l) {
            const auto& acts = cache.activations(l);
            for (std::size_t i = 0; i < count * heads_; ++i) scores_[l][start * heads_ + i] = acts.attention_scores[i];
            hidden_[l].middleRows(static_cast<Eigen::Index>(start) * seq_len_,
                                  static_cast<Eigen::Index>(count) * seq_len_) = acts.hidden;
        }
    }
}

nn::LayerActivations TeacherTargets::gather(int layer, std::span<const std::size_t> indices) const {
    if (layer < 1 || layer > teacher_layers()) {
        throw std::out_of_range("teacher layer " + std::to_string(layer) + " outside [1," +
                                std::to_string(teacher_layers()) + "]");
    }
    const auto& scores = scores_[layer - 1];
    const auto& hidden = hidden_[layer - 1];
    nn::LayerActivations out;
    out.attention_scores.reserve(indices.size() * heads_);
    out.hidden.resize(static_cast<Eigen::Index>(indices.size()) * seq_len_, hidden_size_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        for (int h = 0; h < heads_; ++h) out.attention_scores.push_back(scores[indices[i] * heads_ + h]);
        out.hidden.middleRows(static_cast<Eigen::Index>(i) * seq_len_, seq_len_) =
            hidden.middleRows(static_cast<Eigen::Index>(indices[i]) * seq_len_, seq_len_);
    }
    return out;
}

ProjectionSet make_projections(const LayerMapping& mapping, int student_hidden, int teacher_hidden,
                               std::uint64_t seed) {
    Rng rng(seed);
    ProjectionSet set(mapping.size());
    for (std::size_t m = 0; m < mapping.size(); ++m) {
        if (!mapping[m]) continue;
        set[m].resize(student_hidden, teacher_hidden);
        for (Eigen::Index i = 0; i < set[m].size(); ++i) set[m].data()[i] = rng.truncated_normal(0.02);
    }
    return set;
}

double distillation_loss(const nn::Encoder& student, const ProjectionSet& projections, const LayerMapping& mapping,
                         const nn::Batch& batch, const std::vector<nn::LayerActivations>& teacher_acts,
                         DistillGrads* grads) {
    const std::size_t layers = student.params.layers.size();
    if (mapping.size() != layers || projections.size() != layers) {
        throw std::invalid_argument("distillation_loss: mapping/projection count must equal student depth");
    }
    const auto cache = nn::forward(student, batch);
    auto act_grads = nn::ActivationGrads::empty(layers);
    if (grads) grads->projections.assign(layers, Matrix());
    double total = 0.0;
    for (std::size_t m = 0; m < layers; ++m) {
        if (!mapping[m]) continue;  // lambda_m = 0
        const auto& target = teacher_acts.at(static_cast<std::size_t>(*mapping[m] - 1));
        LayerLossGrad g;
        total += layer_loss(cache.activations(m), target, projections[m], student.config.heads, grads ? &g : nullptr);
        if (grads) {
            act_grads.attention_scores[m] = std::move(g.attention_scores);
            act_grads.hidden[m] = std::move(g.hidden);
            grads->projections[m] = std::move(g.projection);
        }
    }
    if (grads) grads->student = nn::backward(student, cache, act_grads);
    return total;
}

namespace {

void check_mapping(const LayerMapping& mapping, const nn::TransformerConfig& student, const TeacherTargets& targets) {
    if (mapping.size() != static_cast<std::size_t>(student.layers)) {
        throw std::invalid_argument("mapping has " + std::to_string(mapping.size()) + " entries but the student has " +
                                    std::to_string(student.layers) + " layers");
    }
    if (!mapping[mapping.size() - 1]) throw std::invalid_argument("mapping: last student layer must be distilled");
    for (std::size_t m = 0; m < mapping.size(); ++m) {
        if (mapping[m] && (*mapping[m] < 1 || *mapping[m] > targets.teacher_layers())) {
            throw std::invalid_argument("position " + std::to_string(m + 1) + ": teacher layer " +
                                        std::to_string(*mapping[m]) + " does not exist");
        }
    }
    if (student.heads != targets.heads()) {
        throw std::invalid_argument("student and teacher must have the same number of attention heads");
    }
    if (student.max_seq_len < targets.seq_len()) throw std::invalid_argument("student max_seq_len is too short");
}

}  // namespace

DistillResult distill(const TeacherTargets& targets, const nn::TransformerConfig& student_config,
                      const LayerMapping& mapping, const DistillConfig& config) {
    config.validate();
    check_mapping(mapping, student_config, targets);

    nn::TransformerConfig sc = student_config;
    sc.seed = derive_seed(config.seed, 1);
    DistillResult result{nn::Encoder::initialize(sc),
                         make_projections(mapping, sc.hidden, targets.hidden_size(), derive_seed(config.seed, 2)),
                         {}};
    Rng rng(derive_seed(config.seed, 3));
    nn::Adam adam;
    const nn::LinearSchedule schedule(config.learning_rate, config.steps, config.warmup_fraction);
    result.loss_curve.reserve(config.steps);

    std::vector<nn::LayerActivations> teacher_acts(targets.teacher_layers());
    std::vector<std::size_t> indices(config.batch_size);
    std::vector<std::vector<int>> seqs(config.batch_size);
    for (int step = 0; step < config.steps; ++step) {
        for (int i = 0; i < config.batch_size; ++i) {
            indices[i] = rng.below(targets.size());
            seqs[i] = targets.sequences()[indices[i]];
        }
        for (std::size_t m = 0; m < mapping.size(); ++m) {
            if (mapping[m]) teacher_acts[*mapping[m] - 1] = targets.gather(*mapping[m], indices);
        }
        DistillGrads grads;
        const double loss = distillation_loss(result.student, result.projections, mapping,
                                              nn::Batch::from_sequences(seqs), teacher_acts, &grads);
        if (!std::isfinite(loss)) throw DivergenceError("distillation diverged at step " + std::to_string(step));
        result.loss_curve.push_back(loss);

        auto params = nn::tensor_list(result.student.params);
        auto grad_list = nn::tensor_list(static_cast<const nn::EncoderParams&>(grads.student));
        for (std::size_t m = 0; m < mapping.size(); ++m) {
            if (!mapping[m]) continue;
            params.push_back(&result.projections[m]);
            grad_list.push_back(&grads.projections[m]);
        }
        adam.step(params, grad_list, schedule.at(step));
    }
    return result;
}

std::pair<double, double> decile_means(std::span<const double> curve, double fraction) {
    if (curve.empty()) throw std::invalid_argument("decile_means: empty curve");
    const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(fraction * curve.size()));
    const double first = std::accumulate(curve.begin(), curve.begin() + n, 0.0) / n;
    const double last = std::accumulate(curve.end() - n, curve.end(), 0.0) / n;
    return {first, last};
}

}  // namespace elm::distill
