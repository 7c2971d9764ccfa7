#include <iostream>

#include <CLI11.hpp>

#include "elm/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Evolutionary layer-mapping search for transformer distillation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(elm::kVersion));

    elm::SearchCommand search;
    int rank_check = -1;
    auto* s = app.add_subcommand("search", "Run the genetic search with the proxy evaluator");
    s->add_option("--config", search.config_path, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    s->add_flag("--resume", search.resume, "Continue from the run directory's checkpoint");
    s->add_option("--jobs", search.jobs, "Concurrent gene evaluations")->check(CLI::PositiveNumber);
    s->add_option("--rank-check", rank_check, "Re-evaluate this many top genes on the full corpus");
    auto* stop = s->add_option("--stop-after", "Stop after this generation (testing aid)")->group("");

    elm::EnumerateCommand enumerate;
    auto* e = app.add_subcommand("enumerate", "Count or list every valid mapping");
    e->add_option("--teacher-layers", enumerate.teacher_layers, "Teacher depth N")->required()->check(CLI::PositiveNumber);
    e->add_option("--student-layers", enumerate.student_layers, "Student depth M")->required()->check(CLI::PositiveNumber);
    e->add_flag("--list", enumerate.list, "Print one mapping per line");
    e->add_option("--cap", enumerate.cap, "Abort if the space is larger than this");

    elm::DistillCommand distill;
    double rho = 0.0;
    auto* d = app.add_subcommand("distill", "Distill one mapping and fine-tune on the proxy tasks");
    d->add_option("--config", distill.config_path, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    auto* mapping = d->add_option("--mapping", distill.mapping, "Mapping such as 0,0,5,10 (0 = none)");
    auto* heuristic = d->add_option("--heuristic", distill.heuristic, "uniform | last-layer | contribution");
    mapping->excludes(heuristic);
    d->add_option("--out", distill.out_dir, "Output directory (default <output_dir>/distill)");
    auto* rho_opt = d->add_option("--rho", rho, "Corpus fraction (default from config)");

    std::string run_dir;
    auto* r = app.add_subcommand("report", "Rebuild CSV summaries of a run directory");
    r->add_option("--run-dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

    app.add_subcommand("verify", "Run the built-in oracle checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // --help and --version are "errors" with code 0; everything else is a usage error.
        return app.exit(e) == 0 ? 0 : 1;
    }

    if (*s) {
        if (*stop) search.stop_after = stop->as<int>();
        if (rank_check >= 0) search.rank_check = rank_check;
        return elm::cmd_search(search, std::cout, std::cerr);
    }
    if (*e) return elm::cmd_enumerate(enumerate, std::cout, std::cerr);
    if (*d) {
        if (*rho_opt) distill.rho = rho;
        return elm::cmd_distill(distill, std::cout, std::cerr);
    }
    if (*r) return elm::cmd_report(run_dir, std::cout, std::cerr);
    return elm::cmd_verify(std::cout, std::cerr);
}
