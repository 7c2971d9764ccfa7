#include "elm/evolution.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace elm {

using nlohmann::json;

void GAConfig::validate() const {
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0,1]");
    };
    if (generations < 1) throw std::invalid_argument("generations must be positive");
    if (population_size < 2) throw std::invalid_argument("population_size must be at least 2");
    if (max_repair_attempts < 1) throw std::invalid_argument("max_repair_attempts must be positive");
    prob(mutation_prob, "mutation_prob");
    prob(crossover_prob, "crossover_prob");
    prob(bitflip_rate, "bitflip_rate");
    prob(exchange_rate, "exchange_rate");
}

int default_population_size(int student_layers) { return student_layers >= 6 ? 20 : 12; }

std::vector<Evaluation> FitnessEvaluator::evaluate_batch(std::span<const Gene> genes, const SearchSpace& space,
                                                         int jobs) const {
    std::vector<Evaluation> results(genes.size());
    std::vector<std::exception_ptr> errors(genes.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < genes.size(); i = next++) {
            try {
                results[i] = evaluate(genes[i], space);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::min<std::size_t>(std::max(jobs, 1), genes.size());
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return results;
}

namespace {

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string cache_line(const std::string& bits, const Evaluation& e) {
    std::string line = bits + '\t' + format_double(e.fitness) + '\t' + (e.failed ? "1" : "0") + '\t';
    for (std::size_t i = 0; i < e.task_scores.size(); ++i) {
        if (i) line += ',';
        line += format_double(e.task_scores[i]);
    }
    return line;
}

}  // namespace

FitnessCache::FitnessCache(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string bits, fitness, failed, scores;
        std::getline(fields, bits, '\t');
        std::getline(fields, fitness, '\t');
        std::getline(fields, failed, '\t');
        std::getline(fields, scores, '\t');
        try {
            Evaluation e;
            e.fitness = std::stod(fitness);
            e.failed = failed == "1";
            std::istringstream ss(scores);
            for (std::string s; std::getline(ss, s, ',');) e.task_scores.push_back(std::stod(s));
            entries_[Gene(bits).bits()] = std::move(e);
        } catch (const std::exception&) {
            throw std::runtime_error(path_.string() + ":" + std::to_string(lineno) + ": malformed cache entry");
        }
    }
}

std::optional<Evaluation> FitnessCache::find(const Gene& gene) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(gene.bits());
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void FitnessCache::insert(const Gene& gene, const Evaluation& eval) {
    std::lock_guard lock(mutex_);
    auto [it, inserted] = entries_.emplace(gene.bits(), eval);
    if (!inserted || path_.empty()) return;
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::app);
    out << cache_line(gene.bits(), eval) << '\n';
    if (!out) throw std::runtime_error("cannot append to fitness cache " + path_.string());
}

std::size_t FitnessCache::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

std::vector<std::pair<Gene, Evaluation>> FitnessCache::entries() const {
    std::lock_guard lock(mutex_);
    std::vector<std::pair<Gene, Evaluation>> out;
    out.reserve(entries_.size());
    for (const auto& [bits, e] : entries_) out.emplace_back(Gene(bits), e);
    return out;
}

double ScoredGene::fitness() const {
    if (!fitness_) throw std::logic_error("gene " + gene_.bits() + " has not been evaluated");
    return *fitness_;
}

void ScoredGene::set_fitness(double fitness, std::vector<double> task_scores) {
    if (fitness_) throw std::logic_error("fitness of gene " + gene_.bits() + " is already set");
    fitness_ = fitness;
    task_scores_ = std::move(task_scores);
}

GenerationStats compute_stats(std::span<const ScoredGene> members) {
    if (members.empty()) throw std::invalid_argument("compute_stats: empty generation");
    GenerationStats s;
    s.max = s.min = members.front().fitness();
    double sum = 0.0;
    for (const auto& m : members) {
        const double v = m.fitness();
        s.max = std::max(s.max, v);
        s.min = std::min(s.min, v);
        sum += v;
    }
    s.avg = sum / static_cast<double>(members.size());
    double ss = 0.0;
    for (const auto& m : members) ss += (m.fitness() - s.avg) * (m.fitness() - s.avg);
    s.std = std::sqrt(ss / static_cast<double>(members.size()));
    return s;
}

const ScoredGene& best_member(std::span<const ScoredGene> members) {
    if (members.empty()) throw std::invalid_argument("best_member: empty generation");
    const ScoredGene* best = &members.front();
    for (const auto& m : members) {
        if (m.fitness() > best->fitness() || (m.fitness() == best->fitness() && m.gene() < best->gene())) {
            best = &m;
        }
    }
    return *best;
}

Generation make_generation(int index, std::vector<ScoredGene> members) {
    Generation g;
    g.index = index;
    g.stats = compute_stats(members);
    g.best_gene = best_member(members).gene();
    g.members = std::move(members);
    return g;
}

namespace {

Gene random_gene(int length, Rng& rng) {
    std::string bits(static_cast<std::size_t>(length), '0');
    for (auto& b : bits) b = rng.bernoulli(0.5) ? '1' : '0';
    return Gene(std::move(bits));
}

}  // namespace

std::vector<Gene> init_population(const SearchSpace& space, const GAConfig& config, Rng& rng,
                                  const std::function<void(const Gene&)>& on_draw) {
    config.validate();
    const long long limit = static_cast<long long>(config.max_repair_attempts) * config.population_size;
    std::vector<Gene> population;
    population.reserve(config.population_size);
    long long consecutive_rejections = 0;
    while (static_cast<int>(population.size()) < config.population_size) {
        Gene g = random_gene(space.gene_length(), rng);
        if (on_draw) on_draw(g);
        if (is_valid(g, space)) {
            population.push_back(std::move(g));
            consecutive_rejections = 0;
        } else if (++consecutive_rejections >= limit) {
            throw std::runtime_error("init_population: " + std::to_string(limit) +
                                     " consecutive invalid draws; search space is too sparse");
        }
    }
    return population;
}

std::vector<double> selection_probabilities(std::span<const double> fitness) {
    if (fitness.empty()) throw std::invalid_argument("selection_probabilities: empty population");
    const double lowest = *std::min_element(fitness.begin(), fitness.end());
    std::vector<double> p(fitness.size());
    double total = 0.0;
    for (std::size_t i = 0; i < fitness.size(); ++i) {
        p[i] = fitness[i] - lowest;
        total += p[i];
    }
    if (total <= 0.0) {
        std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(p.size()));
    } else {
        for (auto& v : p) v /= total;
    }
    return p;
}

namespace {

std::size_t roulette(std::span<const double> probabilities, Rng& rng) {
    const double u = rng.uniform();
    double cumulative = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        if (probabilities[i] <= 0.0) continue;
        cumulative += probabilities[i];
        last_positive = i;
        if (u < cumulative) return i;
    }
    return last_positive;  // rounding: u landed past the final partial sum
}

}  // namespace

std::pair<Gene, Gene> select_pair(const Generation& generation, Rng& rng) {
    std::vector<double> fitness;
    fitness.reserve(generation.members.size());
    for (const auto& m : generation.members) fitness.push_back(m.fitness());
    const auto p = selection_probabilities(fitness);
    const std::size_t a = roulette(p, rng);
    const std::size_t b = roulette(p, rng);
    return {generation.members[a].gene(), generation.members[b].gene()};
}

std::pair<Gene, Gene> crossover_with_mask(const Gene& g1, const Gene& g2, const std::vector<bool>& swap_mask,
                                          const SearchSpace& space) {
    const int k = space.bits_per_position();
    Gene c1 = g1;
    Gene c2 = g2;
    for (int pos = 0; pos < space.student_layers(); ++pos) {
        if (!swap_mask.at(pos)) continue;
        c1.set_code(pos, k, g2.code(pos, k));
        c2.set_code(pos, k, g1.code(pos, k));
    }
    if (!is_valid(c1, space)) c1 = g1;
    if (!is_valid(c2, space)) c2 = g2;
    return {std::move(c1), std::move(c2)};
}

std::pair<Gene, Gene> crossover(const Gene& g1, const Gene& g2, const SearchSpace& space, double exchange_rate,
                                Rng& rng) {
    std::vector<bool> mask(space.student_layers());
    for (std::size_t pos = 0; pos < mask.size(); ++pos) mask[pos] = rng.bernoulli(exchange_rate);
    return crossover_with_mask(g1, g2, mask, space);
}

Gene mutate(const Gene& g, const SearchSpace& space, double bitflip_rate, int max_attempts, Rng& rng) {
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        Gene candidate = g;
        for (std::size_t i = 0; i < candidate.size(); ++i) {
            if (rng.bernoulli(bitflip_rate)) candidate.flip(i);
        }
        if (is_valid(candidate, space)) return candidate;
    }
    return g;
}

std::vector<Gene> next_generation(const Generation& prev, const SearchSpace& space, const GAConfig& config,
                                  Rng& rng) {
    std::vector<Gene> out;
    out.reserve(config.population_size + 1);
    while (static_cast<int>(out.size()) < config.population_size) {
        auto [g1, g2] = select_pair(prev, rng);
        if (rng.bernoulli(config.crossover_prob)) {
            std::tie(g1, g2) = crossover(g1, g2, space, config.exchange_rate, rng);
        }
        if (rng.bernoulli(config.mutation_prob)) {
            g1 = mutate(g1, space, config.bitflip_rate, config.max_repair_attempts, rng);
        }
        if (rng.bernoulli(config.mutation_prob)) {
            g2 = mutate(g2, space, config.bitflip_rate, config.max_repair_attempts, rng);
        }
        out.push_back(std::move(g1));
        out.push_back(std::move(g2));
    }
    out.resize(config.population_size);
    return out;
}

// ---------------------------------------------------------------------------
// Search loop and checkpointing

namespace {

json fingerprint(const SearchSpace& space, const GAConfig& c) {
    return json{{"teacher_layers", space.teacher_layers()},
                {"student_layers", space.student_layers()},
                {"generations", c.generations},
                {"population_size", c.population_size},
                {"mutation_prob", c.mutation_prob},
                {"crossover_prob", c.crossover_prob},
                {"bitflip_rate", c.bitflip_rate},
                {"exchange_rate", c.exchange_rate},
                {"seed", c.seed},
                {"max_repair_attempts", c.max_repair_attempts}};
}

json evaluation_json(const Evaluation& e) {
    json j{{"fitness", e.fitness}, {"task_scores", e.task_scores}, {"failed", e.failed}};
    if (!e.note.empty()) j["note"] = e.note;
    return j;
}

Evaluation evaluation_from_json(const json& j) {
    Evaluation e;
    e.fitness = j.at("fitness").get<double>();
    e.task_scores = j.at("task_scores").get<std::vector<double>>();
    e.failed = j.at("failed").get<bool>();
    e.note = j.value("note", std::string{});
    return e;
}

struct SearchState {
    std::vector<Generation> generations;
    std::map<std::string, Evaluation> seen;  // every gene placed in a generation
    Rng rng;
};

void write_checkpoint(const std::filesystem::path& path, const SearchSpace& space, const GAConfig& config,
                      const SearchState& state) {
    json gens = json::array();
    for (const auto& g : state.generations) {
        json members = json::array();
        for (const auto& m : g.members) members.push_back(m.gene().bits());
        gens.push_back({{"index", g.index}, {"genes", members}});
    }
    json cache = json::array();
    for (const auto& [bits, e] : state.seen) {
        json entry = evaluation_json(e);
        entry["gene"] = bits;
        cache.push_back(std::move(entry));
    }
    const json doc{{"format", "elm-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"config", fingerprint(space, config)},
                   {"generation", state.generations.empty() ? 0 : state.generations.back().index},
                   {"generations", gens},
                   {"fitness_cache", cache},
                   {"rng_state", state.rng.serialize()}};

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << doc.dump(1) << '\n';
        if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

json load_checkpoint_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw CheckpointError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
    }
    if (doc.value("format", "") != "elm-checkpoint") throw CheckpointError("not an elm checkpoint: " + path.string());
    if (doc.value("version", -1) != kCheckpointVersion) {
        throw CheckpointError("checkpoint version " + doc.value("version", json(-1)).dump() + " does not match " +
                              std::to_string(kCheckpointVersion));
    }
    return doc;
}

void restore_generations(const json& doc, std::map<std::string, Evaluation>& seen, std::vector<Generation>& out) {
    for (const auto& entry : doc.at("fitness_cache")) {
        seen[Gene(entry.at("gene").get<std::string>()).bits()] = evaluation_from_json(entry);
    }
    for (const auto& g : doc.at("generations")) {
        std::vector<ScoredGene> members;
        for (const auto& bits : g.at("genes")) {
            const auto& e = seen.at(bits.get<std::string>());
            members.emplace_back(Gene(bits.get<std::string>()), e.fitness, e.task_scores);
        }
        out.push_back(make_generation(g.at("index").get<int>(), std::move(members)));
    }
}

SearchState read_checkpoint(const std::filesystem::path& path, const SearchSpace& space, const GAConfig& config) {
    const json doc = load_checkpoint_json(path);
    if (doc.at("config") != fingerprint(space, config)) {
        throw CheckpointError("checkpoint " + path.string() + " was written with a different search configuration");
    }
    SearchState state{{}, {}, Rng::deserialize(doc.at("rng_state").get<std::string>())};
    restore_generations(doc, state.seen, state.generations);
    return state;
}

}  // namespace

CheckpointData read_checkpoint_file(const std::filesystem::path& path) {
    const json doc = load_checkpoint_json(path);
    CheckpointData data;
    try {
        data.teacher_layers = doc.at("config").at("teacher_layers").get<int>();
        data.student_layers = doc.at("config").at("student_layers").get<int>();
        restore_generations(doc, data.evaluations, data.generations);
    } catch (const json::exception& e) {
        throw CheckpointError("checkpoint " + path.string() + " is malformed: " + e.what());
    }
    return data;
}

SearchResult run_search(const SearchSpace& space, const GAConfig& config, const FitnessEvaluator& evaluator,
                        const SearchOptions& options) {
    config.validate();
    FitnessCache local_cache;
    FitnessCache& cache = options.cache ? *options.cache : local_cache;
    SearchResult result;

    auto evaluate_generation = [&](int index, const std::vector<Gene>& genes, SearchState& state) {
        std::vector<Gene> pending;
        for (const auto& g : genes) {
            if (!is_valid(g, space)) throw std::logic_error("invalid gene " + g.bits() + " entered a generation");
            if (state.seen.count(g.bits())) continue;
            if (auto hit = cache.find(g)) {
                state.seen[g.bits()] = *hit;
                continue;
            }
            if (std::find(pending.begin(), pending.end(), g) == pending.end()) pending.push_back(g);
        }
        if (!pending.empty()) {
            auto evals = evaluator.evaluate_batch(pending, space, options.jobs);
            result.evaluations += pending.size();
            for (std::size_t i = 0; i < pending.size(); ++i) {
                cache.insert(pending[i], evals[i]);
                state.seen[pending[i].bits()] = std::move(evals[i]);
            }
        }
        std::vector<ScoredGene> members;
        members.reserve(genes.size());
        for (const auto& g : genes) {
            const auto& e = state.seen.at(g.bits());
            members.emplace_back(g, e.fitness, e.task_scores);
        }
        state.generations.push_back(make_generation(index, std::move(members)));
        if (!options.checkpoint_path.empty()) write_checkpoint(options.checkpoint_path, space, config, state);
        if (options.on_generation) options.on_generation(state.generations.back());
    };

    SearchState state{{}, {}, Rng(config.seed)};
    if (options.resume && !options.checkpoint_path.empty() && std::filesystem::exists(options.checkpoint_path)) {
        state = read_checkpoint(options.checkpoint_path, space, config);
        for (const auto& [bits, e] : state.seen) cache.insert(Gene(bits), e);
    } else {
        evaluate_generation(1, init_population(space, config, state.rng), state);
    }

    while (static_cast<int>(state.generations.size()) < config.generations) {
        if (options.stop_after_generation && state.generations.back().index >= *options.stop_after_generation) {
            break;
        }
        const int index = state.generations.back().index + 1;
        auto genes = next_generation(state.generations.back(), space, config, state.rng);
        evaluate_generation(index, genes, state);
    }

    result.complete = static_cast<int>(state.generations.size()) >= config.generations;
    const auto& last = state.generations.back().members;
    result.best = best_member(last);
    result.generations = std::move(state.generations);
    return result;
}

}  // namespace elm
