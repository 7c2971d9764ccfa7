#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "elm/mapping_space.hpp"
#include "elm/rng.hpp"

namespace elm {

struct GAConfig {
    int generations = 5;
    int population_size = 12;
    double mutation_prob = 0.8;
    double crossover_prob = 0.2;
    double bitflip_rate = 0.05;
    double exchange_rate = 0.2;
    std::uint64_t seed = 0;
    int max_repair_attempts = 32;

    /// Throws std::invalid_argument naming the first bad field.
    void validate() const;
};

/// Default population size per student depth: 12 for 4 layers, 20 for 6.
int default_population_size(int student_layers);

/// Outcome of one fitness evaluation. `failed` evaluations carry fitness 0.
struct Evaluation {
    double fitness = 0.0;
    std::vector<double> task_scores;
    bool failed = false;
    std::string note;
};

class FitnessEvaluator {
public:
    virtual ~FitnessEvaluator() = default;

    /// Must be deterministic in the gene and safe to call concurrently.
    virtual Evaluation evaluate(const Gene& gene, const SearchSpace& space) const = 0;

    /// Evaluates `genes` on up to `jobs` threads; results are in input order.
    virtual std::vector<Evaluation> evaluate_batch(std::span<const Gene> genes, const SearchSpace& space,
                                                   int jobs) const;

    virtual std::vector<std::string> task_names() const { return {}; }
};

/// Fitness memo keyed by raw gene bits, optionally persisted as TSV.
class FitnessCache {
public:
    FitnessCache() = default;
    /// Loads `path` if it exists; subsequent inserts are appended to it.
    explicit FitnessCache(std::filesystem::path path);

    std::optional<Evaluation> find(const Gene& gene) const;
    void insert(const Gene& gene, const Evaluation& eval);
    std::size_t size() const;
    std::vector<std::pair<Gene, Evaluation>> entries() const;

private:
    mutable std::mutex mutex_;
    std::map<std::string, Evaluation> entries_;
    std::filesystem::path path_;
};

class ScoredGene {
public:
    ScoredGene() = default;
    explicit ScoredGene(Gene gene) : gene_(std::move(gene)) {}
    ScoredGene(Gene gene, double fitness, std::vector<double> task_scores = {})
        : gene_(std::move(gene)), fitness_(fitness), task_scores_(std::move(task_scores)) {}

    const Gene& gene() const { return gene_; }
    bool evaluated() const { return fitness_.has_value(); }
    /// Throws std::logic_error if unevaluated.
    double fitness() const;
    const std::vector<double>& task_scores() const { return task_scores_; }

    /// Throws std::logic_error if fitness is already set.
    void set_fitness(double fitness, std::vector<double> task_scores = {});

private:
    Gene gene_;
    std::optional<double> fitness_;
    std::vector<double> task_scores_;
};

struct GenerationStats {
    double max = 0.0;
    double min = 0.0;
    double avg = 0.0;
    double std = 0.0;  // population standard deviation
};

struct Generation {
    int index = 0;
    std::vector<ScoredGene> members;
    GenerationStats stats;
    Gene best_gene;
};

GenerationStats compute_stats(std::span<const ScoredGene> members);

/// Highest fitness, ties broken by lexicographically smallest bits.
const ScoredGene& best_member(std::span<const ScoredGene> members);

/// Builds a generation from fully evaluated members, filling stats and best gene.
Generation make_generation(int index, std::vector<ScoredGene> members);

/// Draws S valid genes, each bit Bernoulli(0.5), rejecting invalid draws.
/// `on_draw`, if set, sees every raw draw including rejected ones.
std::vector<Gene> init_population(const SearchSpace& space, const GAConfig& config, Rng& rng,
                                  const std::function<void(const Gene&)>& on_draw = {});

/// Roulette weights proportional to V_s - min V; uniform when all are equal.
std::vector<double> selection_probabilities(std::span<const double> fitness);

/// Two independent roulette draws from an evaluated generation.
std::pair<Gene, Gene> select_pair(const Generation& generation, Rng& rng);

/// Swaps the k-bit groups selected by `swap_mask`; an invalid child falls back to its own parent.
std::pair<Gene, Gene> crossover_with_mask(const Gene& g1, const Gene& g2, const std::vector<bool>& swap_mask,
                                          const SearchSpace& space);

std::pair<Gene, Gene> crossover(const Gene& g1, const Gene& g2, const SearchSpace& space, double exchange_rate,
                                Rng& rng);

/// Independent bit flips; the whole mask is redrawn while the result is
/// invalid, up to `max_attempts` draws, after which `g` is returned.
Gene mutate(const Gene& g, const SearchSpace& space, double bitflip_rate, int max_attempts, Rng& rng);

std::vector<Gene> next_generation(const Generation& prev, const SearchSpace& space, const GAConfig& config,
                                  Rng& rng);

struct SearchOptions {
    std::filesystem::path checkpoint_path;  // empty: no checkpointing
    bool resume = false;
    int jobs = 1;
    FitnessCache* cache = nullptr;  // null: private in-memory cache
    std::optional<int> stop_after_generation;
    std::function<void(const Generation&)> on_generation;
};

struct SearchResult {
    std::vector<Generation> generations;
    ScoredGene best;
    std::size_t evaluations = 0;  // evaluator calls made by this invocation
    bool complete = false;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

/// Contents of a checkpoint file, read without checking it against a configuration.
struct CheckpointData {
    int teacher_layers = 0;
    int student_layers = 0;
    std::vector<Generation> generations;
    std::map<std::string, Evaluation> evaluations;  // keyed by gene bits
};

/// Throws CheckpointError on unreadable, foreign or version-mismatched files.
CheckpointData read_checkpoint_file(const std::filesystem::path& path);

SearchResult run_search(const SearchSpace& space, const GAConfig& config, const FitnessEvaluator& evaluator,
                        const SearchOptions& options = {});

}  // namespace elm
