#include "elm/oracle.hpp"

#include <algorithm>
#include <map>

namespace elm::oracle {

std::uint64_t count_space_direct(ArchPair arch, std::uint64_t cap) {
    const SearchSpace space(arch);
    const int m = arch.student_layers;
    const int n = arch.teacher_layers;
    // ways[last] = number of valid completions from the current position,
    // given the largest teacher layer used so far (0 if none).
    std::vector<std::uint64_t> ways(n + 1, 1);
    for (int pos = m - 1; pos >= 0; --pos) {
        const Interval& r = space.range(pos);
        std::vector<std::uint64_t> here(n + 1, 0);
        for (int last = 0; last <= n; ++last) {
            std::uint64_t total = space.none_allowed(pos) ? ways[last] : 0;
            for (int v = std::max(r.lo, last + 1); v <= r.hi; ++v) total += ways[v];
            here[last] = total;
        }
        ways = std::move(here);
    }
    if (ways[0] > cap) {
        throw EnumerationCapExceeded("search space of " + std::to_string(ways[0]) + " exceeds cap " +
                                     std::to_string(cap));
    }
    return ways[0];
}

ExhaustiveResult exhaustive_search(const SearchSpace& space, const FitnessEvaluator& evaluator,
                                   std::uint64_t cap) {
    ExhaustiveResult result;
    bool have = false;
    // Enumeration runs in lexicographic gene order, so a strict comparison keeps the smallest gene on ties.
    enumerate_space(
        space,
        [&](const LayerMapping& mapping, const Gene& gene) {
            const double f = evaluator.evaluate(gene, space).fitness;
            ++result.evaluated_count;
            if (!have || f > result.best_fitness) {
                have = true;
                result.best_fitness = f;
                result.best_mapping = mapping;
                result.best_gene = gene;
            }
        },
        cap);
    return result;
}

Evaluation PlantedEvaluator::evaluate(const Gene& gene, const SearchSpace& space) const {
    const LayerMapping mapping = decode(gene, space);
    if (mapping.size() != target_.size()) throw std::invalid_argument("planted target has the wrong length");
    int mismatches = 0;
    for (std::size_t i = 0; i < mapping.size(); ++i) mismatches += mapping[i] != target_[i];
    return {1.0 - static_cast<double>(mismatches) / static_cast<double>(mapping.size()), {}, false, {}};
}

ScoredGene random_search(const SearchSpace& space, const FitnessEvaluator& evaluator, int budget,
                         std::uint64_t seed) {
    GAConfig config;
    config.population_size = std::max(budget, 2);
    config.seed = seed;
    Rng rng(seed);
    auto genes = init_population(space, config, rng);
    genes.resize(budget);
    std::vector<ScoredGene> scored;
    for (auto& g : genes) {
        const double f = evaluator.evaluate(g, space).fitness;
        scored.emplace_back(std::move(g), f);
    }
    return best_member(scored);
}

}  // namespace elm::oracle
