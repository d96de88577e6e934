#include "proper/pipeline.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

using namespace proper;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitConfig = 2;
constexpr int kExitPrereq = 3;
constexpr int kExitData = 4;

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw format_error("cannot open " + path + " for writing");
    out << text;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw prereq_error("missing file " + path);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    std::vector<std::string> ablations;
};

RunConfig resolve_run_config(const CommonOpts& opts) {
    RunConfig rc = run_config_from_file(opts.config_path);
    if (opts.seed)
        rc.pipeline.seed = *opts.seed;
    if (opts.jobs)
        rc.pipeline.jobs = *opts.jobs;
    if (!opts.out_dir.empty())
        rc.out_dir = opts.out_dir;
    if (!opts.ablations.empty()) {
        rc.pipeline.ablations.clear();
        for (const auto& name : opts.ablations)
            rc.pipeline.ablations.insert(ablation_from_name(name));
    }
    rc.pipeline.validate();
    return rc;
}

int cmd_gen(const std::string& spec_path, const std::string& out_dir,
            std::optional<std::uint64_t> seed) {
    SyntheticSpec spec = spec_from_json_file(spec_path);
    if (seed)
        spec.seed = *seed;
    spec.validate();
    Corpus corpus = generate(spec);
    std::filesystem::create_directories(out_dir);
    save_jsonl(out_dir + "/corpus.jsonl", corpus);
    save_group_labels_csv(out_dir + "/group_labels.csv", corpus);
    write_text(out_dir + "/spec.json", spec_to_json(spec));
    std::cout << "wrote " << corpus.users.size() << " users, " << corpus.total_records()
              << " records to " << out_dir << "\n";
    return kExitOk;
}

int cmd_train(const CommonOpts& opts, const std::string& stage) {
    RunConfig rc = resolve_run_config(opts);
    if (rc.pipeline.has(Ablation::end_to_end) && stage != "1" && stage != "all")
        throw config_error("end_to_end replaces stages 2 and 3; use --stage all");
    Corpus corpus = load_run_corpus(rc);

    PipelineState st;
    if (stage == "1" || stage == "all") {
        st = init_pipeline(rc.pipeline);
    } else {
        st = load_pipeline(rc.out_dir);
        st.config = rc.pipeline;
        if (stage == "2" && !st.stage1_done)
            throw prereq_error("stage 2 needs the stage-1 receipt in " + rc.out_dir +
                               "; run --stage 1 first");
        if (stage == "3" && !st.stage2_done)
            throw prereq_error("stage 3 needs the stage-2 receipt in " + rc.out_dir +
                               "; run --stage 2 first");
    }

    if (stage == "all")
        run_pipeline(st, corpus);
    else if (stage == "1")
        train_stage1(st, corpus);
    else if (stage == "2")
        train_stage2(st, corpus);
    else
        train_stage3(st, corpus);

    verify_freeze(st);
    save_pipeline(st, rc.out_dir);
    write_text(rc.out_dir + "/run_config.json", run_config_to_json(rc));
    std::cout << "stage " << stage << " complete; artifacts in " << rc.out_dir << "\n";
    return kExitOk;
}

RunConfig run_config_for_dir(const std::string& run_dir, const std::string& config_override) {
    if (!config_override.empty())
        return run_config_from_file(config_override);
    return run_config_from_json(read_text(run_dir + "/run_config.json"));
}

int cmd_eval(const std::string& run_dir, const std::string& config_override) {
    PipelineState st = load_pipeline(run_dir);
    RunConfig rc = run_config_for_dir(run_dir, config_override);
    Corpus corpus = load_run_corpus(rc);
    MetricReport report = evaluate_stages(st, corpus);
    std::string text = metric_report_json(report);
    write_text(run_dir + "/report.json", text);
    std::cout << text;
    return kExitOk;
}

int cmd_diag(const std::string& run_dir, const std::string& config_override) {
    PipelineState st = load_pipeline(run_dir);
    if (st.trace.empty())
        throw prereq_error("no routing trace in " + run_dir +
                           "; run training through stage 2 first");
    RunConfig rc = run_config_for_dir(run_dir, config_override);
    Corpus corpus = load_run_corpus(rc);
    std::map<std::string, int> labels;
    bool planted = true;
    for (const auto& ur : corpus.users) {
        if (ur.group_label < 0)
            planted = false;
        labels[ur.user_id] = ur.group_label;
    }
    DiagnosticsReport report = router_diagnostics(st.trace, st.user_embeddings,
                                                  planted ? &labels : nullptr, rc.pipeline.seed);
    std::string text = diagnostics_json(report);
    write_text(run_dir + "/diagnostics.json", text);
    write_user_omega_csv(run_dir + "/user_omega.csv", report);
    write_embeddings_csv(run_dir + "/embeddings.csv", st.user_embeddings);
    std::cout << text;
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"progressive three-stage LoRA personalization"};
    app.require_subcommand(1);

    std::string gen_spec, gen_out = "runs/data";
    std::optional<std::uint64_t> gen_seed;
    auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
    gen->add_option("--spec", gen_spec, "synthetic spec JSON")->required();
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--seed", gen_seed, "override the spec seed");

    CommonOpts topts;
    std::string stage = "all";
    auto* train = app.add_subcommand("train", "run pipeline stages");
    train->add_option("--config", topts.config_path, "run config JSON")->required();
    train->add_option("--stage", stage, "1, 2, 3, or all")
        ->check(CLI::IsMember({"1", "2", "3", "all"}));
    train->add_option("--ablation", topts.ablations, "ablation name (repeatable)");
    train->add_option("--jobs", topts.jobs, "stage-3 worker threads");
    train->add_option("--seed", topts.seed, "override the config seed");
    train->add_option("--out", topts.out_dir, "override the output directory");

    std::string eval_run, eval_config;
    auto* ev = app.add_subcommand("eval", "evaluate completed stages");
    ev->add_option("--run", eval_run, "run directory")->required();
    ev->add_option("--config", eval_config, "run config override");

    std::string diag_run, diag_config;
    auto* diag = app.add_subcommand("diag", "router and embedding diagnostics");
    diag->add_option("--run", diag_run, "run directory")->required();
    diag->add_option("--config", diag_config, "run config override");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen(gen_spec, gen_out, gen_seed);
        if (train->parsed())
            return cmd_train(topts, stage);
        if (ev->parsed())
            return cmd_eval(eval_run, eval_config);
        return cmd_diag(diag_run, diag_config);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const format_error& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const prereq_error& e) {
        std::cerr << "missing prerequisite: " << e.what() << "\n";
        return kExitPrereq;
    } catch (const data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
}
