#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "elm/mapping_space.hpp"
#include "elm/tinyformer.hpp"

namespace elm::distill {

using nn::Matrix;

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PretrainConfig {
    int steps = 600;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double mask_prob = 0.15;
    double warmup_fraction = 0.1;
    std::uint64_t seed = 0;
};

/// Encoder plus the masked-token prediction head used only during pretraining.
struct Teacher {
    nn::Encoder encoder;
    nn::Linear mlm_head;
};

/// Trains a teacher on masked-token prediction over `corpus`. Throws DivergenceError on a non-finite loss.
Teacher pretrain_teacher(const nn::TransformerConfig& config, std::span<const std::vector<int>> corpus,
                         const PretrainConfig& pretrain, std::vector<double>* loss_curve = nullptr);

/// Accuracy of the MLM head on randomly masked positions (position 0 is never masked).
double masked_accuracy(const Teacher& teacher, std::span<const std::vector<int>> sequences, double mask_prob,
                       std::uint64_t seed);

/// Partials of layer_loss with respect to its student-side inputs.
struct LayerLossGrad {
    std::vector<Matrix> attention_scores;
    Matrix hidden;
    Matrix projection;
};

/// (1/h) sum_i ||A_i^S - A_i^T||_F^2 + ||H^S W_h - H^T||_F^2, averaged over the batch.
/// Throws std::invalid_argument on head-count or length mismatch.
double layer_loss(const nn::LayerActivations& student, const nn::LayerActivations& teacher, const Matrix& projection,
                  int heads, LayerLossGrad* grad = nullptr);

struct DistillConfig {
    int steps = 2000;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double warmup_fraction = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Teacher activations for a fixed sequence set, indexed [teacher layer][sequence].
class TeacherTargets {
public:
    TeacherTargets() = default;
    TeacherTargets(const nn::Encoder& teacher, std::vector<std::vector<int>> sequences, int batch_size = 64);

    std::size_t size() const { return sequences_.size(); }
    int teacher_layers() const { return static_cast<int>(hidden_.size()); }
    int heads() const { return heads_; }
    int hidden_size() const { return hidden_size_; }
    int seq_len() const { return seq_len_; }
    const std::vector<std::vector<int>>& sequences() const { return sequences_; }

    /// Activations of 1-based teacher layer `layer` for the listed sequences, batched in order.
    nn::LayerActivations gather(int layer, std::span<const std::size_t> indices) const;

private:
    std::vector<std::vector<int>> sequences_;
    std::vector<std::vector<Matrix>> scores_;  // [layer][seq * heads + head]
    std::vector<Matrix> hidden_;               // [layer], rows seq * L + t
    int heads_ = 0;
    int hidden_size_ = 0;
    int seq_len_ = 0;
};

/// One learnable W_h (d_student x d_teacher) per distilled student layer; empty for None entries.
using ProjectionSet = std::vector<Matrix>;

ProjectionSet make_projections(const LayerMapping& mapping, int student_hidden, int teacher_hidden, std::uint64_t seed);

struct DistillGrads {
    nn::EncoderParams student;
    ProjectionSet projections;
};

/// Sum over student layers m of lambda_m * layer_loss(S_m, T_g(m)), lambda_m = 0 for None.
/// `teacher_acts` is indexed by 0-based teacher layer; only mapped layers are read.
double distillation_loss(const nn::Encoder& student, const ProjectionSet& projections, const LayerMapping& mapping,
                         const nn::Batch& batch, const std::vector<nn::LayerActivations>& teacher_acts,
                         DistillGrads* grads = nullptr);

struct DistillResult {
    nn::Encoder student;
    ProjectionSet projections;
    std::vector<double> loss_curve;  // one entry per step
};

/// Throws std::invalid_argument for a mapping that does not fit the two models and DivergenceError on a
/// non-finite loss. The teacher is only read.
DistillResult distill(const TeacherTargets& targets, const nn::TransformerConfig& student_config,
                      const LayerMapping& mapping, const DistillConfig& config);

/// Mean of the first and last `fraction` of a loss curve.
std::pair<double, double> decile_means(std::span<const double> curve, double fraction = 0.1);

}  // namespace elm::distill
