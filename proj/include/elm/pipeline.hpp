#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "elm/distillation.hpp"
#include "elm/evolution.hpp"
#include "elm/proxy_tasks.hpp"

namespace elm {

inline constexpr const char* kVersion = "0.1.0";

/// Carries every problem found in a config file, one message per field.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::vector<std::string> problems);
    const std::vector<std::string>& problems() const { return problems_; }

private:
    std::vector<std::string> problems_;
};

struct ModelShape {
    int layers = 0;
    int hidden = 0;
    int ffn = 0;
    int heads = 0;
};

/// Everything that determines a run. Seeds of the individual stages are
/// derived from `seed`; only the GA seed may be set on its own.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string output_dir = "runs/default";

    ModelShape teacher{8, 32, 64, 2};
    std::string teacher_snapshot;  // load instead of pretraining when set
    distill::PretrainConfig pretrain;
    ModelShape student{4, 16, 32, 2};

    proxy::CorpusSpec corpus;
    proxy::TaskSpec tasks;
    GAConfig ga;
    bool ga_seed_explicit = false;
    distill::DistillConfig distill;
    proxy::FinetuneConfig finetune;
    double rho = 0.1;
    int rank_check = 0;  // top genes re-evaluated on the full corpus after a search

    std::string evaluator = "proxy";  // or "external"
    std::string external_dir;
    double poll_seconds = 0.5;

    nn::TransformerConfig teacher_config() const;
    nn::TransformerConfig student_config() const;
    ArchPair arch() const { return {teacher.layers, student.layers}; }
    std::uint64_t evaluator_seed() const;
};

/// Throws ConfigError listing unknown keys, wrong types and out-of-range values.
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

/// Fully resolved config, derived seeds included.
nlohmann::json to_json(const RunConfig& config);

/// Hex digests naming cached artifacts: the teacher depends on the corpus,
/// shape and pretraining; fitness additionally on the student, tasks and budgets.
std::string teacher_fingerprint(const RunConfig& config);
std::string evaluator_fingerprint(const RunConfig& config);

/// Value of ELM_CACHE_DIR, if set and non-empty.
std::optional<std::filesystem::path> cache_dir_from_env();

/// Corpus, tasks and teacher built from a config, shared by every subcommand.
struct Workbench {
    RunConfig config;
    std::shared_ptr<const proxy::SyntheticCorpus> corpus;
    std::shared_ptr<const proxy::ProxyTaskSuite> suite;
    std::shared_ptr<const nn::Encoder> teacher;
};

/// Loads a cached or configured teacher snapshot, else pretrains and caches one under `fallback_dir`.
Workbench open_workbench(const RunConfig& config, const std::filesystem::path& fallback_dir, std::ostream& log);

proxy::EvaluatorConfig evaluator_config(const RunConfig& config, double rho);

struct SearchCommand {
    std::filesystem::path config_path;
    bool resume = false;
    int jobs = 1;
    std::optional<int> stop_after;
    std::optional<int> rank_check;
};

struct DistillCommand {
    std::filesystem::path config_path;
    std::string mapping;    // "0,0,5,10"
    std::string heuristic;  // uniform | last-layer | contribution
    std::filesystem::path out_dir;
    std::optional<double> rho;
};

struct EnumerateCommand {
    int teacher_layers = 0;
    int student_layers = 0;
    bool list = false;
    std::uint64_t cap = kDefaultEnumerationCap;
};

// Exit codes: 0 success, 1 usage or input error, 3 some evaluation failed.
int cmd_search(const SearchCommand& cmd, std::ostream& out, std::ostream& err);
int cmd_distill(const DistillCommand& cmd, std::ostream& out, std::ostream& err);
int cmd_enumerate(const EnumerateCommand& cmd, std::ostream& out, std::ostream& err);
int cmd_report(const std::filesystem::path& run_dir, std::ostream& out, std::ostream& err);
int cmd_verify(std::ostream& out, std::ostream& err);

/// Regenerates stats, gene table, best gene, report and rank table from a run directory.
/// Throws std::runtime_error naming the first missing artifact.
void write_report(const std::filesystem::path& run_dir);

/// "%.6g"
std::string format_float(double v);

}  // namespace elm
