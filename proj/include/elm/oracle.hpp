#pragma once

#include <cstdint>
#include <functional>

#include "elm/evolution.hpp"
#include "elm/mapping_space.hpp"

namespace elm::oracle {

/// Counts valid mappings by recursing over teacher-layer values directly,
/// without going through the gene codec.
std::uint64_t count_space_direct(ArchPair arch, std::uint64_t cap = kDefaultEnumerationCap);

struct ExhaustiveResult {
    LayerMapping best_mapping;
    Gene best_gene;
    double best_fitness = 0.0;
    std::uint64_t evaluated_count = 0;
};

/// Evaluates every valid mapping; ties go to the lexicographically smallest gene.
ExhaustiveResult exhaustive_search(const SearchSpace& space, const FitnessEvaluator& evaluator,
                                   std::uint64_t cap = kDefaultEnumerationCap);

/// Fitness = 1 - (positions where the decoded mapping differs from `target`) / M.
class PlantedEvaluator : public FitnessEvaluator {
public:
    explicit PlantedEvaluator(LayerMapping target) : target_(std::move(target)) {}
    Evaluation evaluate(const Gene& gene, const SearchSpace& space) const override;
    const LayerMapping& target() const { return target_; }

private:
    LayerMapping target_;
};

/// Wraps a plain function of the decoded mapping.
class FunctionEvaluator : public FitnessEvaluator {
public:
    explicit FunctionEvaluator(std::function<double(const LayerMapping&)> fn) : fn_(std::move(fn)) {}
    Evaluation evaluate(const Gene& gene, const SearchSpace& space) const override {
        return {fn_(decode(gene, space)), {}, false, {}};
    }

private:
    std::function<double(const LayerMapping&)> fn_;
};

/// Baseline: `budget` valid genes drawn uniformly at random (Bernoulli(0.5)
/// bits with rejection); returns the best, ties to the smallest bits.
ScoredGene random_search(const SearchSpace& space, const FitnessEvaluator& evaluator, int budget,
                         std::uint64_t seed);

}  // namespace elm::oracle
