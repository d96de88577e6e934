#pragma once

#include "proper/data.hpp"
#include "proper/routing.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace proper {

// ---- scalar metrics --------------------------------------------------------

double accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& golds);
// averages per-class F1 over the classes present in golds
double macro_f1(const std::vector<std::string>& preds, const std::vector<std::string>& golds);
double mae(const std::vector<double>& preds, const std::vector<double>& golds);
double rmse(const std::vector<double>& preds, const std::vector<double>& golds);

// F-measure variants on lowercased whitespace tokens; 0 when both are empty
double rouge1(const std::string& candidate, const std::string& reference);
double rougeL(const std::string& candidate, const std::string& reference);

// metric map for one task's predictions against gold responses
std::map<std::string, double> score_task(TaskKind task, const std::vector<std::string>& preds,
                                         const std::vector<std::string>& golds);

// ---- clustering ------------------------------------------------------------

struct KMeansResult {
    std::vector<int> assignment;
    std::vector<std::vector<double>> centroids;
    double inertia = 0.0;
};

// Lloyd iterations from random restarts; deterministic per seed, best inertia wins.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k, std::uint64_t seed,
                    int restarts = 10);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

// ---- reports ---------------------------------------------------------------

struct MetricReport {
    std::vector<std::string> stages;
    std::map<std::string, std::map<std::string, double>> per_stage;   // stage -> metric -> value
    std::map<std::string, std::map<std::string, double>> per_user_ce; // stage -> user -> ce
    std::uint64_t seed = 0;
    std::uint64_t config_checksum = 0;
    std::string rouge_variant = "f-measure, whitespace tokens, lowercase";
};

std::string metric_report_json(const MetricReport& report);

struct DiagnosticsReport {
    std::map<std::string, std::vector<double>> mean_omega; // per user, layer-averaged EMA
    double separation_mean = 0.0; // mean over user pairs of |omega_i . omega_j|
    double separation_sum = 0.0;  // same, summed
    std::map<std::string, int> cluster; // k-means over layer-averaged embeddings
    std::optional<double> ari;          // vs planted labels when given
    int k = 0;
};

DiagnosticsReport router_diagnostics(const RouterTrace& trace, const UserEmbeddingTable& embeddings,
                                     const std::map<std::string, int>* planted_labels,
                                     std::uint64_t seed = 0);

std::string diagnostics_json(const DiagnosticsReport& report);
void write_user_omega_csv(const std::string& path, const DiagnosticsReport& report);
void write_embeddings_csv(const std::string& path, const UserEmbeddingTable& embeddings);

} // namespace proper
