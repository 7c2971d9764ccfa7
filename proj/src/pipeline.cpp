#include "elm/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <unistd.h>

#include "elm/oracle.hpp"
#include "elm/rng.hpp"
#include "elm/stats.hpp"

namespace elm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join_problems(const std::vector<std::string>& problems) {
    std::string out = "invalid configuration:";
    for (const auto& p : problems) out += "\n  " + p;
    return out;
}

// Reads one JSON object, recording type and range problems and any key it was not asked about.
class Section {
public:
    Section(const json* obj, std::string path, std::vector<std::string>& problems)
        : obj_(obj), path_(std::move(path)), problems_(problems) {
        if (obj_ && !obj_->is_object()) {
            problems_.push_back(name("") + ": expected an object");
            obj_ = nullptr;
        }
    }

    Section child(const char* key) {
        known_.insert(key);
        return Section(find(key), name(key), problems_);
    }

    void integer(const char* key, int& out, int min) {
        known_.insert(key);
        const json* v = find(key);
        if (!v) return;
        if (!v->is_number_integer()) return bad(key, "expected an integer");
        const auto x = v->get<long long>();
        if (x < min || x > 1'000'000'000) return bad(key, "must be at least " + std::to_string(min));
        out = static_cast<int>(x);
    }

    void u64(const char* key, std::uint64_t& out, bool* present = nullptr) {
        known_.insert(key);
        const json* v = find(key);
        if (!v) return;
        if (!v->is_number_unsigned()) return bad(key, "expected a non-negative integer");
        out = v->get<std::uint64_t>();
        if (present) *present = true;
    }

    // Accepts lo < x <= hi when `open_low`, else lo <= x <= hi.
    void real(const char* key, double& out, double lo, double hi, bool open_low = false) {
        known_.insert(key);
        const json* v = find(key);
        if (!v) return;
        if (!v->is_number()) return bad(key, "expected a number");
        const double x = v->get<double>();
        const bool low_ok = open_low ? x > lo : x >= lo;
        if (!low_ok || x > hi) {
            std::ostringstream msg;
            msg << "must be in " << (open_low ? "(" : "[") << lo << ", " << hi << "]";
            return bad(key, msg.str());
        }
        out = x;
    }

    void string(const char* key, std::string& out) {
        known_.insert(key);
        const json* v = find(key);
        if (!v) return;
        if (!v->is_string()) return bad(key, "expected a string");
        out = v->get<std::string>();
    }

    void finish() {
        if (!obj_) return;
        for (const auto& [key, value] : obj_->items()) {
            if (!known_.contains(key)) problems_.push_back(name(key) + ": unknown key");
        }
    }

private:
    const json* find(const std::string& key) const {
        if (!obj_) return nullptr;
        const auto it = obj_->find(key);
        return it == obj_->end() ? nullptr : &*it;
    }
    std::string name(const std::string& key) const {
        if (key.empty()) return path_.empty() ? "<root>" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }
    void bad(const std::string& key, const std::string& what) { problems_.push_back(name(key) + ": " + what); }

    const json* obj_;
    std::string path_;
    std::vector<std::string>& problems_;
    std::set<std::string> known_;
};

void read_shape(Section& s, ModelShape& shape) {
    s.integer("layers", shape.layers, 1);
    s.integer("hidden", shape.hidden, 1);
    s.integer("ffn", shape.ffn, 1);
    s.integer("heads", shape.heads, 1);
}

template <class F>
void capture(std::vector<std::string>& problems, F&& validate) {
    try {
        validate();
    } catch (const std::invalid_argument& e) {
        problems.push_back(e.what());
    }
}

std::string hex_digest(const json& j) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_string(j.dump())));
    return buf;
}

json shape_json(const ModelShape& s) {
    return {{"layers", s.layers}, {"hidden", s.hidden}, {"ffn", s.ffn}, {"heads", s.heads}};
}

void write_text(const fs::path& path, const std::string& text) {
    const fs::path tmp = fs::path(path) += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << text;
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("missing artifact: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join_problems(problems)), problems_(std::move(problems)) {}

nn::TransformerConfig RunConfig::teacher_config() const {
    return {teacher.layers, teacher.hidden,  teacher.ffn,       teacher.heads,
            corpus.vocab_size, corpus.seq_len, derive_seed(seed, 1)};
}

nn::TransformerConfig RunConfig::student_config() const {
    return {student.layers, student.hidden, student.ffn, student.heads, corpus.vocab_size, corpus.seq_len, 0};
}

std::uint64_t RunConfig::evaluator_seed() const { return derive_seed(seed, 6); }

RunConfig parse_run_config(const json& doc) {
    RunConfig c;
    std::vector<std::string> problems;
    if (!doc.is_object()) throw ConfigError({"<root>: expected an object"});
    Section root(&doc, "", problems);
    root.u64("seed", c.seed);
    root.string("output_dir", c.output_dir);
    {
        auto s = root.child("teacher");
        read_shape(s, c.teacher);
        s.string("snapshot", c.teacher_snapshot);
        s.finish();
    }
    {
        auto s = root.child("student");
        read_shape(s, c.student);
        s.finish();
    }
    {
        auto s = root.child("pretrain");
        s.integer("steps", c.pretrain.steps, 0);
        s.integer("batch_size", c.pretrain.batch_size, 1);
        s.real("learning_rate", c.pretrain.learning_rate, 0.0, 1.0, true);
        s.real("mask_prob", c.pretrain.mask_prob, 0.0, 1.0);
        s.real("warmup_fraction", c.pretrain.warmup_fraction, 0.0, 1.0);
        s.finish();
    }
    {
        auto s = root.child("corpus");
        s.integer("num_sequences", c.corpus.num_sequences, 1);
        s.integer("seq_len", c.corpus.seq_len, 8);
        s.integer("vocab_size", c.corpus.vocab_size, 8);
        s.integer("num_motifs", c.corpus.num_motifs, 2);
        s.integer("motif_len", c.corpus.motif_len, 2);
        s.real("motif_prob", c.corpus.motif_prob, 0.0, 1.0);
        s.finish();
    }
    {
        auto s = root.child("tasks");
        s.integer("train_size", c.tasks.train_size, 2);
        s.integer("dev_size", c.tasks.dev_size, 2);
        s.finish();
    }
    {
        auto s = root.child("ga");
        s.integer("generations", c.ga.generations, 1);
        s.integer("population_size", c.ga.population_size, 2);
        s.real("mutation_prob", c.ga.mutation_prob, 0.0, 1.0);
        s.real("crossover_prob", c.ga.crossover_prob, 0.0, 1.0);
        s.real("bitflip_rate", c.ga.bitflip_rate, 0.0, 1.0);
        s.real("exchange_rate", c.ga.exchange_rate, 0.0, 1.0);
        s.integer("max_repair_attempts", c.ga.max_repair_attempts, 1);
        s.u64("seed", c.ga.seed, &c.ga_seed_explicit);
        s.finish();
    }
    {
        auto s = root.child("distill");
        s.integer("steps", c.distill.steps, 1);
        s.integer("batch_size", c.distill.batch_size, 1);
        s.real("learning_rate", c.distill.learning_rate, 0.0, 1.0, true);
        s.real("warmup_fraction", c.distill.warmup_fraction, 0.0, 1.0);
        s.finish();
    }
    {
        auto s = root.child("finetune");
        s.integer("steps", c.finetune.steps, 0);
        s.integer("batch_size", c.finetune.batch_size, 1);
        s.real("learning_rate", c.finetune.learning_rate, 0.0, 1.0, true);
        s.real("warmup_fraction", c.finetune.warmup_fraction, 0.0, 1.0);
        s.finish();
    }
    {
        auto s = root.child("proxy");
        s.real("rho", c.rho, 0.0, 1.0, true);
        s.integer("rank_check", c.rank_check, 0);
        s.finish();
    }
    {
        auto s = root.child("evaluator");
        s.string("kind", c.evaluator);
        s.string("external_dir", c.external_dir);
        s.real("poll_seconds", c.poll_seconds, 0.0, 3600.0, true);
        s.finish();
    }
    root.finish();

    // Cross-field checks.
    if (c.evaluator != "proxy" && c.evaluator != "external") {
        problems.push_back("evaluator.kind: must be \"proxy\" or \"external\"");
    }
    if (c.evaluator == "external" && c.external_dir.empty()) {
        problems.push_back("evaluator.external_dir: required when evaluator.kind is \"external\"");
    }
    if (c.student.layers > c.teacher.layers) {
        problems.push_back("student.layers: " + std::to_string(c.student.layers) + " exceeds teacher.layers " +
                           std::to_string(c.teacher.layers));
    }
    if (c.student.heads != c.teacher.heads) problems.push_back("student.heads: must equal teacher.heads");
    if (c.teacher.hidden % c.teacher.heads != 0) problems.push_back("teacher.hidden: must be divisible by heads");
    if (c.student.hidden % c.student.heads != 0) problems.push_back("student.hidden: must be divisible by heads");
    if (!c.ga_seed_explicit) c.ga.seed = derive_seed(c.seed, 5);
    c.pretrain.seed = derive_seed(c.seed, 2);
    c.corpus.seed = derive_seed(c.seed, 3);
    c.tasks.seed = derive_seed(c.seed, 4);
    c.distill.seed = c.evaluator_seed();
    capture(problems, [&] { c.corpus.validate(); });
    capture(problems, [&] { c.ga.validate(); });

    if (!problems.empty()) throw ConfigError(std::move(problems));
    return c;
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError({"cannot open config file " + path.string()});
    json doc;
    try {
        doc = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError({path.string() + ": " + e.what()});
    }
    return parse_run_config(doc);
}

json to_json(const RunConfig& c) {
    json teacher = shape_json(c.teacher);
    if (!c.teacher_snapshot.empty()) teacher["snapshot"] = c.teacher_snapshot;
    return {
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"teacher", teacher},
        {"student", shape_json(c.student)},
        {"pretrain",
         {{"steps", c.pretrain.steps},
          {"batch_size", c.pretrain.batch_size},
          {"learning_rate", c.pretrain.learning_rate},
          {"mask_prob", c.pretrain.mask_prob},
          {"warmup_fraction", c.pretrain.warmup_fraction}}},
        {"corpus",
         {{"num_sequences", c.corpus.num_sequences},
          {"seq_len", c.corpus.seq_len},
          {"vocab_size", c.corpus.vocab_size},
          {"num_motifs", c.corpus.num_motifs},
          {"motif_len", c.corpus.motif_len},
          {"motif_prob", c.corpus.motif_prob}}},
        {"tasks", {{"train_size", c.tasks.train_size}, {"dev_size", c.tasks.dev_size}}},
        {"ga",
         {{"generations", c.ga.generations},
          {"population_size", c.ga.population_size},
          {"mutation_prob", c.ga.mutation_prob},
          {"crossover_prob", c.ga.crossover_prob},
          {"bitflip_rate", c.ga.bitflip_rate},
          {"exchange_rate", c.ga.exchange_rate},
          {"max_repair_attempts", c.ga.max_repair_attempts},
          {"seed", c.ga.seed}}},
        {"distill",
         {{"steps", c.distill.steps},
          {"batch_size", c.distill.batch_size},
          {"learning_rate", c.distill.learning_rate},
          {"warmup_fraction", c.distill.warmup_fraction}}},
        {"finetune",
         {{"steps", c.finetune.steps},
          {"batch_size", c.finetune.batch_size},
          {"learning_rate", c.finetune.learning_rate},
          {"warmup_fraction", c.finetune.warmup_fraction}}},
        {"proxy", {{"rho", c.rho}, {"rank_check", c.rank_check}}},
        {"evaluator", {{"kind", c.evaluator}, {"external_dir", c.external_dir}, {"poll_seconds", c.poll_seconds}}},
    };
}

std::string teacher_fingerprint(const RunConfig& c) {
    const json j = to_json(c);
    return hex_digest({{"kind", "teacher"},
                       {"seed", c.seed},
                       {"teacher", j["teacher"]},
                       {"pretrain", j["pretrain"]},
                       {"corpus", j["corpus"]}});
}

std::string evaluator_fingerprint(const RunConfig& c) {
    const json j = to_json(c);
    return hex_digest({{"kind", "fitness"},
                       {"version", kVersion},
                       {"teacher", teacher_fingerprint(c)},
                       {"student", j["student"]},
                       {"tasks", j["tasks"]},
                       {"distill", j["distill"]},
                       {"finetune", j["finetune"]},
                       {"rho", c.rho},
                       {"evaluator", j["evaluator"]}});
}

std::optional<fs::path> cache_dir_from_env() {
    const char* v = std::getenv("ELM_CACHE_DIR");
    if (!v || !*v) return std::nullopt;
    return fs::path(v);
}

Workbench open_workbench(const RunConfig& config, const fs::path& fallback_dir, std::ostream& log) {
    Workbench wb;
    wb.config = config;
    wb.corpus = std::make_shared<const proxy::SyntheticCorpus>(proxy::generate_corpus(config.corpus));
    wb.suite = std::make_shared<const proxy::ProxyTaskSuite>(proxy::build_tasks(*wb.corpus, config.tasks));

    const auto tc = config.teacher_config();
    if (!config.teacher_snapshot.empty()) {
        auto t = nn::load_snapshot(config.teacher_snapshot);
        if (t.config.layers != tc.layers || t.config.hidden != tc.hidden || t.config.heads != tc.heads ||
            t.config.vocab_size != tc.vocab_size || t.config.max_seq_len < tc.max_seq_len) {
            throw std::runtime_error("teacher snapshot " + config.teacher_snapshot +
                                     " does not match the configured teacher shape");
        }
        wb.teacher = std::make_shared<const nn::Encoder>(std::move(t));
        return wb;
    }
    const fs::path dir = cache_dir_from_env().value_or(fallback_dir);
    const fs::path path = dir / ("teacher_" + teacher_fingerprint(config) + ".elmw");
    if (fs::exists(path)) {
        log << "[elm] loading teacher " << path.string() << "\n";
        wb.teacher = std::make_shared<const nn::Encoder>(nn::load_snapshot(path));
        return wb;
    }
    log << "[elm] pretraining teacher (" << config.pretrain.steps << " steps)\n";
    auto teacher = distill::pretrain_teacher(tc, wb.corpus->sequences, config.pretrain);
    const double acc = distill::masked_accuracy(teacher, wb.corpus->sequences, config.pretrain.mask_prob,
                                                derive_seed(config.seed, 7));
    log << "[elm] teacher masked-token accuracy " << format_float(acc) << " (chance "
        << format_float(1.0 / config.corpus.vocab_size) << ")\n";
    fs::create_directories(dir);
    const fs::path tmp = fs::path(path) += ".tmp" + std::to_string(::getpid());
    nn::save_snapshot(teacher.encoder, tmp);
    fs::rename(tmp, path);
    wb.teacher = std::make_shared<const nn::Encoder>(std::move(teacher.encoder));
    return wb;
}

proxy::EvaluatorConfig evaluator_config(const RunConfig& config, double rho) {
    proxy::EvaluatorConfig ec;
    ec.student = config.student_config();
    ec.distill = config.distill;
    ec.finetune = config.finetune;
    ec.rho = rho;
    ec.seed = config.evaluator_seed();
    return ec;
}

std::string format_float(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

namespace {

std::string full_precision(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream in(line);
    for (std::string field; std::getline(in, field, '\t');) out.push_back(field);
    return out;
}

// Unique genes in order of first appearance, with the generation that introduced them.
std::vector<std::pair<Gene, int>> unique_genes(const std::vector<Generation>& generations) {
    std::vector<std::pair<Gene, int>> out;
    std::set<std::string> seen;
    for (const auto& g : generations) {
        for (const auto& m : g.members) {
            if (seen.insert(m.gene().bits()).second) out.emplace_back(m.gene(), g.index);
        }
    }
    return out;
}

void run_rank_check(const Workbench& wb, const SearchSpace& space, const std::vector<Generation>& generations,
                    int top, const fs::path& run_dir, int jobs, std::ostream& log) {
    std::vector<std::pair<Gene, double>> ranked;
    std::map<std::string, double> fitness;
    for (const auto& g : generations) {
        for (const auto& m : g.members) fitness[m.gene().bits()] = m.fitness();
    }
    for (const auto& [bits, f] : fitness) ranked.emplace_back(Gene(bits), f);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    ranked.resize(std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(top)));

    RunConfig full = wb.config;
    full.rho = 1.0;
    const fs::path cache_path =
        cache_dir_from_env().value_or(run_dir) / ("fitness_" + evaluator_fingerprint(full) + ".tsv");
    FitnessCache cache(cache_path);
    proxy::ProxyEvaluator evaluator(wb.teacher, wb.corpus, wb.suite, evaluator_config(full, 1.0));
    std::vector<Gene> pending;
    for (const auto& [g, f] : ranked) {
        if (!cache.find(g)) pending.push_back(g);
    }
    log << "[elm] rank check: " << ranked.size() << " genes on the full corpus (" << pending.size()
        << " to evaluate)\n";
    const auto evals = evaluator.evaluate_batch(pending, space, jobs);
    for (std::size_t i = 0; i < pending.size(); ++i) cache.insert(pending[i], evals[i]);

    std::ostringstream out;
    out << "gene\tmapping\tfitness_proxy\tfitness_full\n";
    for (const auto& [g, f] : ranked) {
        out << g.bits() << '\t' << decode(g, space).to_string() << '\t' << full_precision(f) << '\t'
            << full_precision(cache.find(g)->fitness) << '\n';
    }
    write_text(run_dir / "rank_eval.tsv", out.str());
}

}  // namespace

void write_report(const fs::path& run_dir) {
    const fs::path checkpoint = run_dir / "checkpoint.json";
    if (!fs::exists(run_dir / "run_info.json")) throw std::runtime_error("missing artifact: run_info.json");
    if (!fs::exists(checkpoint)) throw std::runtime_error("missing artifact: checkpoint.json");
    const json info = json::parse(read_text(run_dir / "run_info.json"));
    const auto data = read_checkpoint_file(checkpoint);
    if (data.generations.empty()) throw std::runtime_error("checkpoint holds no generations");
    const SearchSpace space = build_space({data.teacher_layers, data.student_layers});
    const int k = space.bits_per_position();
    const auto task_names = info.value("task_names", std::vector<std::string>{});
    const int total = info.value("generations", static_cast<int>(data.generations.size()));

    std::ostringstream stats;
    stats << "Gen,Max,Min,Avg,Std,BestGene\n";
    for (const auto& g : data.generations) {
        stats << g.index << ',' << format_float(g.stats.max) << ',' << format_float(g.stats.min) << ','
              << format_float(g.stats.avg) << ',' << format_float(g.stats.std) << ',' << g.best_gene.to_string(k)
              << '\n';
    }
    write_text(run_dir / "generation_stats.csv", stats.str());

    const auto genes = unique_genes(data.generations);
    std::ostringstream table;
    table << "Gene,Mapping,Fitness";
    for (const auto& t : task_names) table << ',' << t;
    table << ",Failed,FirstGeneration\n";
    for (const auto& [g, first] : genes) {
        const auto& e = data.evaluations.at(g.bits());
        table << g.to_string(k) << ",\"" << decode(g, space).to_string() << "\"," << format_float(e.fitness);
        for (std::size_t i = 0; i < task_names.size(); ++i) {
            table << ',' << (i < e.task_scores.size() ? format_float(e.task_scores[i]) : "");
        }
        table << ',' << (e.failed ? 1 : 0) << ',' << first << '\n';
    }
    write_text(run_dir / "genes.csv", table.str());

    const auto& best = best_member(data.generations.back().members);
    const auto best_mapping = decode(best.gene(), space).to_string();
    write_text(run_dir / "best_gene.txt", "gene=" + best.gene().to_string(k) + "\nmapping=" + best_mapping +
                                              "\nfitness=" + format_float(best.fitness()) + "\n");

    std::ostringstream report;
    report << "Layer-mapping search report\n\n";
    report << "version: " << info.value("version", std::string("?")) << "\n";
    report << "seed: " << info.value("seed", json(0)).dump() << "\n";
    report << "ga_seed: " << info.value("ga_seed", json(0)).dump() << "\n";
    report << "teacher_layers: " << data.teacher_layers << "\n";
    report << "student_layers: " << data.student_layers << "\n";
    report << "generations_completed: " << data.generations.size() << " of " << total << "\n";
    report << "unique_genes_evaluated: " << genes.size() << "\n";
    report << "failed_evaluations: "
           << std::count_if(genes.begin(), genes.end(),
                            [&](const auto& p) { return data.evaluations.at(p.first.bits()).failed; })
           << "\n\n";
    report << "best_gene: " << best.gene().to_string(k) << "\n";
    report << "best_mapping: " << best_mapping << "\n";
    report << "best_fitness: " << format_float(best.fitness()) << "\n";
    for (std::size_t i = 0; i < task_names.size() && i < best.task_scores().size(); ++i) {
        report << "  " << task_names[i] << ": " << format_float(best.task_scores()[i]) << "\n";
    }
    report << "\n" << stats.str();

    if (fs::exists(run_dir / "rank_eval.tsv")) {
        std::istringstream in(read_text(run_dir / "rank_eval.tsv"));
        std::string line;
        std::getline(in, line);
        std::vector<std::vector<std::string>> rows;
        std::vector<double> proxy_fit, full_fit;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto f = split_tabs(line);
            if (f.size() != 4) throw std::runtime_error("malformed rank_eval.tsv line: " + line);
            proxy_fit.push_back(std::stod(f[2]));
            full_fit.push_back(std::stod(f[3]));
            rows.push_back(std::move(f));
        }
        const auto rp = average_ranks(proxy_fit);
        const auto rf = average_ranks(full_fit);
        std::ostringstream rank;
        rank << "Gene,Mapping,FitnessProxy,FitnessFull,RankProxy,RankFull\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            rank << Gene(rows[i][0]).to_string(k) << ",\"" << rows[i][1] << "\"," << format_float(proxy_fit[i])
                 << ',' << format_float(full_fit[i]) << ',' << format_float(rp[i]) << ',' << format_float(rf[i])
                 << '\n';
        }
        write_text(run_dir / "rank_table.csv", rank.str());
        const double rho = rows.size() >= 2 ? spearman(proxy_fit, full_fit) : 0.0;
        write_text(run_dir / "rank_summary.csv", "Pairs,Spearman\n" + std::to_string(rows.size()) + "," +
                                                      format_float(rho) + "\n");
        report << "\nrank_preservation_pairs: " << rows.size() << "\n";
        report << "rank_preservation_spearman: " << format_float(rho) << "\n";
    }
    write_text(run_dir / "report.txt", report.str());
}

int cmd_search(const SearchCommand& cmd, std::ostream& out, std::ostream& err) {
    RunConfig config;
    try {
        config = load_run_config(cmd.config_path);
    } catch (const ConfigError& e) {
        err << e.what() << "\n";
        return 1;
    }
    if (cmd.rank_check) config.rank_check = *cmd.rank_check;
    if (cmd.jobs < 1) {
        err << "--jobs must be at least 1\n";
        return 1;
    }
    const fs::path run_dir = config.output_dir;
    try {
        fs::create_directories(run_dir);
        write_text(run_dir / "config.json", read_text(cmd.config_path));
        const SearchSpace space = build_space(config.arch());

        std::vector<std::string> task_names;
        for (auto kind : proxy::kAllTasks) task_names.push_back(proxy::task_name(kind));
        const json info{{"version", kVersion},
                        {"seed", config.seed},
                        {"ga_seed", config.ga.seed},
                        {"generations", config.ga.generations},
                        {"population_size", config.ga.population_size},
                        {"teacher_layers", config.teacher.layers},
                        {"student_layers", config.student.layers},
                        {"evaluator_fingerprint", evaluator_fingerprint(config)},
                        {"task_names", task_names},
                        {"resolved_config", to_json(config)}};
        write_text(run_dir / "run_info.json", info.dump(1) + "\n");

        std::optional<Workbench> wb;
        std::unique_ptr<FitnessEvaluator> evaluator;
        if (config.evaluator == "external") {
            evaluator = std::make_unique<proxy::ExternalEvaluator>(config.external_dir, config.evaluator_seed(),
                                                                   config.poll_seconds);
        } else {
            wb = open_workbench(config, run_dir, err);
            auto pe = std::make_unique<proxy::ProxyEvaluator>(wb->teacher, wb->corpus, wb->suite,
                                                              evaluator_config(config, config.rho));
            pe->set_loss_curve_dir(run_dir / "loss_curves");
            evaluator = std::move(pe);
        }

        const fs::path cache_path = cache_dir_from_env()
                                        ? *cache_dir_from_env() / ("fitness_" + evaluator_fingerprint(config) + ".tsv")
                                        : run_dir / "fitness_cache.tsv";
        FitnessCache cache(cache_path);
        const fs::path checkpoint = run_dir / "checkpoint.json";
        if (!cmd.resume) {
            fs::remove(checkpoint);
            for (const char* stale : {"rank_eval.tsv", "rank_table.csv", "rank_summary.csv"}) fs::remove(run_dir / stale);
        }

        SearchOptions options;
        options.checkpoint_path = checkpoint;
        options.resume = cmd.resume;
        options.jobs = cmd.jobs;
        options.cache = &cache;
        options.stop_after_generation = cmd.stop_after;
        const int k = space.bits_per_position();
        options.on_generation = [&](const Generation& g) {
            out << "generation " << g.index << ": max " << format_float(g.stats.max) << " min "
                << format_float(g.stats.min) << " avg " << format_float(g.stats.avg) << " std "
                << format_float(g.stats.std) << " best " << g.best_gene.to_string(k) << std::endl;
        };
        const auto result = run_search(space, config.ga, *evaluator, options);

        if (result.complete && config.rank_check > 0 && wb) {
            run_rank_check(*wb, space, result.generations, config.rank_check, run_dir, cmd.jobs, err);
        }
        write_report(run_dir);
        out << (result.complete ? "search complete" : "search stopped") << ": best " << result.best.gene().to_string(k)
            << " -> " << decode(result.best.gene(), space).to_string() << " fitness "
            << format_float(result.best.fitness()) << "\n";

        bool failed = false;
        for (const auto& g : result.generations) {
            for (const auto& m : g.members) {
                if (auto e = cache.find(m.gene()); e && e->failed) failed = true;
            }
        }
        if (failed) {
            err << "some evaluations failed; see genes.csv\n";
            return 3;
        }
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_distill(const DistillCommand& cmd, std::ostream& out, std::ostream& err) {
    RunConfig config;
    try {
        config = load_run_config(cmd.config_path);
    } catch (const ConfigError& e) {
        err << e.what() << "\n";
        return 1;
    }
    if (cmd.mapping.empty() == cmd.heuristic.empty()) {
        err << "exactly one of --mapping and --heuristic is required\n";
        return 1;
    }
    const double rho = cmd.rho.value_or(config.rho);
    if (!(rho > 0.0 && rho <= 1.0)) {
        err << "--rho must be in (0, 1]\n";
        return 1;
    }
    try {
        const SearchSpace space = build_space(config.arch());
        LayerMapping mapping;
        std::optional<Heuristic> heuristic;
        if (!cmd.mapping.empty()) {
            try {
                mapping = parse_mapping(cmd.mapping);
            } catch (const std::invalid_argument& e) {
                err << "invalid mapping: " << e.what() << "\n";
                return 1;
            }
            if (auto problem = validate_mapping(mapping, space)) {
                err << "invalid mapping: " << *problem << "\n";
                return 1;
            }
        } else {
            try {
                heuristic = parse_heuristic(cmd.heuristic);
            } catch (const std::invalid_argument& e) {
                err << e.what() << "\n";
                return 1;
            }
        }
        const fs::path out_dir = cmd.out_dir.empty() ? fs::path(config.output_dir) / "distill" : cmd.out_dir;
        fs::create_directories(out_dir);
        const auto wb = open_workbench(config, out_dir, err);
        std::vector<double> contribution;
        if (heuristic) {
            if (*heuristic == Heuristic::Contribution) {
                const std::size_t n = std::min<std::size_t>(256, wb.corpus->sequences.size());
                contribution = nn::layer_contribution(
                    *wb.teacher, std::span(wb.corpus->sequences).first(n));
            }
            mapping = heuristic_mapping(*heuristic, config.arch(), contribution);
        }

        proxy::ProxyEvaluator evaluator(wb.teacher, wb.corpus, wb.suite, evaluator_config(config, rho));
        const auto report = evaluator.evaluate_mapping(mapping);

        json manifest{{"version", kVersion},
                      {"mapping", mapping.to_string()},
                      {"source", heuristic ? "heuristic:" + std::string(heuristic_name(*heuristic)) : "mapping"},
                      {"rho", rho},
                      {"distill_steps", config.distill.steps},
                      {"fitness", report.scores.fitness},
                      {"failed", report.scores.failed},
                      {"evaluator_fingerprint", evaluator_fingerprint(config)},
                      {"resolved_config", to_json(config)}};
        if (!report.scores.note.empty()) manifest["note"] = report.scores.note;
        json scores = json::object();
        const auto names = evaluator.task_names();
        for (std::size_t i = 0; i < names.size(); ++i) scores[names[i]] = report.scores.per_task[i];
        manifest["task_scores"] = scores;
        if (!contribution.empty()) manifest["layer_contribution"] = contribution;
        if (!report.loss_curve.empty()) {
            const auto [first, last] = distill::decile_means(report.loss_curve);
            manifest["loss_first_decile"] = first;
            manifest["loss_last_decile"] = last;
            std::ostringstream curve;
            curve << "step,loss\n";
            for (std::size_t i = 0; i < report.loss_curve.size(); ++i) {
                curve << i << ',' << format_float(report.loss_curve[i]) << '\n';
            }
            write_text(out_dir / "loss_curve.csv", curve.str());
            manifest["loss_curve"] = "loss_curve.csv";
        }
        if (report.student) {
            nn::save_snapshot(*report.student, out_dir / "student.elmw");
            manifest["snapshot"] = "student.elmw";
        }
        write_text(out_dir / "manifest.json", manifest.dump(1) + "\n");
        out << "mapping " << mapping.to_string() << " fitness " << format_float(report.scores.fitness);
        for (std::size_t i = 0; i < names.size(); ++i) {
            out << ' ' << names[i] << '=' << format_float(report.scores.per_task[i]);
        }
        out << "\n";
        return report.scores.failed ? 3 : 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_enumerate(const EnumerateCommand& cmd, std::ostream& out, std::ostream& err) {
    if (cmd.student_layers > cmd.teacher_layers) {
        err << "error: student layers (" << cmd.student_layers << ") exceed teacher layers (" << cmd.teacher_layers
            << ")\n";
        return 1;
    }
    try {
        const SearchSpace space = build_space({cmd.teacher_layers, cmd.student_layers});
        const auto count = enumerate_space(
            space,
            [&](const LayerMapping& m, const Gene&) {
                if (cmd.list) out << m.to_string() << '\n';
            },
            cmd.cap);
        if (cmd.list) {
            err << count << " mappings\n";
        } else {
            out << count << '\n';
        }
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_report(const fs::path& run_dir, std::ostream& out, std::ostream& err) {
    try {
        write_report(run_dir);
        out << read_text(run_dir / "report.txt");
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_verify(std::ostream& out, std::ostream& err) {
    int failures = 0;
    auto check = [&](const std::string& name, bool ok, const std::string& detail = "") {
        out << (ok ? "PASS " : "FAIL ") << name << (ok || detail.empty() ? "" : ": " + detail) << "\n";
        failures += !ok;
    };
    try {
        const std::pair<ArchPair, std::uint64_t> counts[] = {
            {{12, 4}, 1048}, {{12, 6}, 9375}, {{24, 4}, 13892}, {{24, 6}, 380321}};
        for (const auto& [arch, expected] : counts) {
            const auto enumerated = enumerate_space(build_space(arch), [](const LayerMapping&, const Gene&) {});
            const auto direct = oracle::count_space_direct(arch);
            check("count (" + std::to_string(arch.student_layers) + "," + std::to_string(arch.teacher_layers) + ")",
                  enumerated == expected && direct == expected,
                  "enumerated " + std::to_string(enumerated) + ", direct " + std::to_string(direct) + ", expected " +
                      std::to_string(expected));
        }
        const std::pair<const char*, const char*> decodings[] = {
            {"000-000-010-101", "0,0,5,10"},           {"000-100-000-000-000-101", "0,5,0,0,0,10"},
            {"000-000-011-101", "0,0,6,10"},           {"000-000-100-101", "0,0,7,10"},
            {"000-000-011-000-000-101", "0,0,5,0,0,10"}};
        for (const auto& [gene, mapping] : decodings) {
            const Gene g = parse_gene(gene);
            const int layers = static_cast<int>(g.size() / 3);
            const auto got = decode(g, build_space({12, layers})).to_string();
            check(std::string("decode ") + gene, got == mapping, "got " + got);
        }
        const auto space = build_space({12, 4});
        bool round_trip = true;
        enumerate_space(space, [&](const LayerMapping& m, const Gene& g) {
            round_trip = round_trip && encode(m, space) == g && decode(g, space) == m;
        });
        check("codec round trip (4,12)", round_trip);

        const oracle::PlantedEvaluator planted(parse_mapping("0,0,5,10"));
        const auto best = oracle::exhaustive_search(space, planted);
        int maximal = 0;
        enumerate_space(space, [&](const LayerMapping&, const Gene& g) {
            maximal += planted.evaluate(g, space).fitness == best.best_fitness;
        });
        check("exhaustive search finds the planted optimum uniquely",
              best.best_mapping == parse_mapping("0,0,5,10") && maximal == 1);

        const std::vector<double> fitness{0.8, 0.6, 0.2};
        const auto p = selection_probabilities(fitness);
        check("roulette probabilities (0.8,0.6,0.2)",
              std::abs(p[0] - 0.6) < 1e-12 && std::abs(p[1] - 0.4) < 1e-12 && p[2] == 0.0);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    out << (failures == 0 ? "all checks passed" : std::to_string(failures) + " check(s) failed") << "\n";
    return failures == 0 ? 0 : 1;
}

}  // namespace elm
