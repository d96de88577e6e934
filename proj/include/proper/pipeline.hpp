#pragma once

#include "proper/backbone.hpp"
#include "proper/data.hpp"
#include "proper/eval.hpp"
#include "proper/routing.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace proper {

enum class Ablation {
    regular_router,
    no_constraint_loss,
    no_lora_aware_router,
    end_to_end,
    no_group_double_count,
};

const char* ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& name); // lists valid names on error

struct StageConfig {
    double lr = 2e-4;
    int epochs = 3;
    int r = 4;
    double alpha = 8.0;
    double dropout = 0.05;
    int batch = 1;
};

struct PipelineConfig {
    ModelConfig model;
    StageConfig stage1{3e-4, 3, 8, 16.0, 0.0, 2};
    StageConfig stage2{2e-4, 6, 4, 8.0, 0.05, 1};
    StageConfig stage3{1e-3, 20, 4, 8.0, 0.05, 1};
    int k = 3;
    double lambda_c = 0.1;
    std::int64_t d_user = 0; // 0: use model.d_model
    bool cosine_constraint = false;
    std::set<Ablation> ablations;
    int jobs = 1;
    std::uint64_t seed = 0;

    void validate() const;
    std::int64_t user_dim() const { return d_user > 0 ? d_user : model.d_model; }
    bool has(Ablation a) const { return ablations.count(a) > 0; }
    std::uint64_t checksum() const;
};

// "layer{L}.{proj}" key for adapter maps and artifact files
std::string attach_key(int layer, Proj p);

// per-user stage-3 parameters: one FFN adapter and one LoRA-aware router
// per attachment point
struct UserArtifact {
    std::map<std::string, LoraAdapter> adapters;
    std::map<std::string, Tensor> w_l;

    std::vector<Tensor> trainable_tensors() const;
    std::uint64_t checksum() const;
};

struct LossRow {
    int stage = 0;
    std::int64_t step = 0;
    std::string user;
    double ce = 0, lc = 0, total = 0;
};

struct PipelineState {
    PipelineConfig config;
    BackboneWeights base; // W_b, frozen random backbone
    BackboneWeights w_p;  // after the stage-1 merge
    BackboneWeights w_g;  // after the stage-2 merge
    bool stage1_done = false;
    bool stage2_done = false;
    bool stage3_done = false;

    ExpertBank bank;
    UserEmbeddingTable user_embeddings;
    RouterTrace trace{0.9};
    std::vector<std::vector<double>> merge_omega; // per layer, stage-2 merge weights

    std::map<std::string, UserArtifact> user_artifacts;
    std::vector<std::string> skipped_users;

    std::vector<MergeReceipt> stage1_receipts;
    std::vector<MergeReceipt> stage2_receipts;
    std::map<std::string, std::uint64_t> frozen_checksums;
    std::vector<LossRow> losses;
    std::map<std::string, double> stage_seconds; // wall clock, kept out of manifests
};

// ---- forward composition ---------------------------------------------------

// stage-1 style: one adapter per named projection, added where defined
AdapterHooks adapter_hooks(const std::map<std::string, LoraAdapter>& adapters, bool training,
                           Rng* rng);

// stage-2 style: user-aware routed MoE on the FFN projections of each layer.
// The router input is the layer's FFN input (the Gate/Up projection input);
// omega_out, when given, receives each layer's graph-connected omega.
AdapterHooks stage2_hooks(const ExpertBank& bank, const std::vector<Tensor>& user_emb_per_layer,
                          bool regular_router, bool training, Rng* rng,
                          std::vector<Tensor>* omega_out = nullptr);

// uniform literal 1/k routing for users without embeddings
AdapterHooks uniform_moe_hooks(const ExpertBank& bank, bool training, Rng* rng);

// stage-3 style: user adapter plus beta-routed frozen experts
AdapterHooks stage3_hooks(const ExpertBank& bank, const UserArtifact& artifact, bool training,
                          Rng* rng, const std::vector<double>* fixed_beta = nullptr,
                          bool include_group = true);

// masked CE: only the response bytes (plus EOS) of the example are scored
Tensor example_ce(const BackboneWeights& weights, const AdapterHooks& hooks,
                  const EncodedExample& ex);

UserArtifact init_user_artifact(const PipelineConfig& cfg, const std::string& user_id);

// ---- stages ----------------------------------------------------------------

PipelineState init_pipeline(const PipelineConfig& cfg);
void train_stage1(PipelineState& st, const Corpus& corpus);
void train_stage2(PipelineState& st, const Corpus& corpus);
void train_stage3(PipelineState& st, const Corpus& corpus);
// all stages in order, honoring the configured ablations
void run_pipeline(PipelineState& st, const Corpus& corpus);

// recomputes checksums of frozen artifacts against the recorded values
void verify_freeze(const PipelineState& st);

// held-out evaluation of every completed stage on the test users (all users
// when none are marked test); test users route with uniform omega at stage 2
MetricReport evaluate_stages(const PipelineState& st, const Corpus& corpus);

// ---- persistence -----------------------------------------------------------

void save_pipeline(const PipelineState& st, const std::string& dir);
PipelineState load_pipeline(const std::string& dir); // prereq_error when incomplete

// ---- run configuration -----------------------------------------------------

struct RunConfig {
    PipelineConfig pipeline;
    bool synthetic = true;
    SyntheticSpec data;
    std::string jsonl_path; // used when synthetic is false
    std::string out_dir = "runs/default";
};

RunConfig run_config_from_json(const std::string& text);
RunConfig run_config_from_file(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);

Corpus load_run_corpus(const RunConfig& cfg);

// full run + evaluation per configuration; "" names the unablated run
std::map<std::string, MetricReport> run_ablation(const RunConfig& cfg,
                                                 const std::vector<std::string>& names);

} // namespace proper
