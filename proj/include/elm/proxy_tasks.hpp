#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "elm/distillation.hpp"
#include "elm/evolution.hpp"
#include "elm/tinyformer.hpp"

namespace elm::proxy {

/// Parameters of the motif grammar: every sequence is [CLS] followed by a
/// mix of motif copies (drawn from a fixed bank) and uniform noise tokens.
struct CorpusSpec {
    int num_sequences = 2000;
    int seq_len = 16;
    int vocab_size = 64;
    int num_motifs = 8;
    int motif_len = 4;
    double motif_prob = 0.5;  // chance that the next slot starts a motif copy
    std::uint64_t seed = 7;

    void validate() const;
};

struct SyntheticCorpus {
    CorpusSpec spec;
    std::vector<std::vector<int>> motifs;
    std::vector<std::vector<int>> sequences;
};

/// Deterministic in `spec`. Throws std::invalid_argument on a degenerate spec.
SyntheticCorpus generate_corpus(const CorpusSpec& spec);

/// round(rho * n) sequences chosen by a seeded shuffle, returned in corpus order.
std::vector<std::vector<int>> subsample(const SyntheticCorpus& corpus, double rho, std::uint64_t seed);

enum class TaskKind { Classification, Pair, Span };

inline constexpr std::array<TaskKind, 3> kAllTasks{TaskKind::Classification, TaskKind::Pair, TaskKind::Span};
std::string task_name(TaskKind kind);

struct Example {
    std::vector<int> tokens;
    int label = 0;       // classification and pair tasks
    int span_start = 0;  // span task, inclusive
    int span_end = 0;
};

struct TaskData {
    TaskKind kind = TaskKind::Classification;
    std::vector<Example> train;
    std::vector<Example> dev;
};

struct TaskSpec {
    int train_size = 512;
    int dev_size = 1024;
    std::uint64_t seed = 11;
};

/// (a) does the detection motif occur; (b) is the second half an exact copy
/// of the first; (c) where does the span motif occur.
struct ProxyTaskSuite {
    std::vector<int> detection_motif;
    std::vector<int> span_motif;
    std::array<TaskData, 3> tasks;

    const TaskData& task(TaskKind kind) const { return tasks[static_cast<int>(kind)]; }
};

/// Throws std::invalid_argument if the corpus has no motif bank.
ProxyTaskSuite build_tasks(const SyntheticCorpus& corpus, const TaskSpec& spec);

// Labeling functions that recompute each label from the example tokens alone.
bool contains_motif(std::span<const int> tokens, std::span<const int> motif);
int oracle_pair_label(std::span<const int> tokens);
std::pair<int, int> oracle_span(std::span<const int> tokens, std::span<const int> motif);

/// Token-overlap F1 between inclusive spans; an empty prediction (end < start) scores 0.
double span_f1(int pred_start, int pred_end, int gold_start, int gold_end);

struct FinetuneConfig {
    int steps = 300;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double warmup_fraction = 0.1;
};

struct TaskScores {
    std::array<double, 3> per_task{};  // accuracy, accuracy, F1
    double fitness = 0.0;              // unweighted mean
    bool failed = false;
    std::string note;
};

/// Fine-tunes a copy of `student` per task with a fresh head and scores the dev split.
TaskScores finetune_and_score(const nn::Encoder& student, const ProxyTaskSuite& suite, const FinetuneConfig& config,
                              std::uint64_t seed);

struct EvaluatorConfig {
    nn::TransformerConfig student;
    distill::DistillConfig distill;
    FinetuneConfig finetune;
    double rho = 0.1;
    std::uint64_t seed = 0;
};

/// Everything recorded for one mapping: distillation losses plus proxy scores.
struct MappingReport {
    LayerMapping mapping;
    std::vector<double> loss_curve;
    TaskScores scores;
    std::optional<nn::Encoder> student;  // empty if distillation diverged
};

/// gene -> decode -> distill on the rho-subset -> fine-tune -> mean metric.
/// Every gene shares the evaluator seed, so student initialisation, batch
/// order and head initialisation are common across mappings.
class ProxyEvaluator : public FitnessEvaluator {
public:
    ProxyEvaluator(std::shared_ptr<const nn::Encoder> teacher, std::shared_ptr<const SyntheticCorpus> corpus,
                   std::shared_ptr<const ProxyTaskSuite> suite, EvaluatorConfig config);

    Evaluation evaluate(const Gene& gene, const SearchSpace& space) const override;
    std::vector<std::string> task_names() const override;

    /// Never throws for training failures; those come back with scores.failed set and fitness 0.
    MappingReport evaluate_mapping(const LayerMapping& mapping) const;

    /// Writes one loss-curve CSV per evaluated gene into `dir`.
    void set_loss_curve_dir(std::filesystem::path dir) { loss_curve_dir_ = std::move(dir); }

    std::size_t evaluations() const { return evaluations_.load(); }
    const std::vector<std::vector<int>>& subset() const { return targets_.sequences(); }
    const EvaluatorConfig& config() const { return config_; }

private:
    std::shared_ptr<const nn::Encoder> teacher_;
    std::shared_ptr<const SyntheticCorpus> corpus_;
    std::shared_ptr<const ProxyTaskSuite> suite_;
    EvaluatorConfig config_;
    distill::TeacherTargets targets_;
    std::filesystem::path loss_curve_dir_;
    mutable std::atomic<std::size_t> evaluations_{0};
};

/// Hands genes to an outside process: writes `pending.tsv` (bits, mapping,
/// seed) and polls for `fitness.tsv` (bits, fitness, task scores...).
class ExternalEvaluator : public FitnessEvaluator {
public:
    ExternalEvaluator(std::filesystem::path dir, std::uint64_t seed, double poll_seconds = 0.5,
                      double timeout_seconds = 86400.0)
        : dir_(std::move(dir)), seed_(seed), poll_seconds_(poll_seconds), timeout_seconds_(timeout_seconds) {}

    Evaluation evaluate(const Gene& gene, const SearchSpace& space) const override;
    std::vector<Evaluation> evaluate_batch(std::span<const Gene> genes, const SearchSpace& space,
                                           int jobs) const override;

private:
    std::filesystem::path dir_;
    std::uint64_t seed_;
    double poll_seconds_;
    double timeout_seconds_;
};

}  // namespace elm::proxy
