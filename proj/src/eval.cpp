#include "proper/eval.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

using nlohmann::json;

namespace proper {

namespace {

void require_same_length(std::size_t a, std::size_t b, const std::string& op) {
    if (a != b)
        throw contract_error(op + ": " + std::to_string(a) + " predictions vs " +
                             std::to_string(b) + " golds");
    if (a == 0)
        throw contract_error(op + ": empty input");
}

std::vector<std::string> tokenize(const std::string& text) {
    std::string lowered;
    lowered.reserve(text.size());
    for (char c : text)
        lowered.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    std::stringstream ss(lowered);
    std::vector<std::string> toks;
    std::string w;
    while (ss >> w)
        toks.push_back(w);
    return toks;
}

double f_measure(double overlap, double n_cand, double n_ref) {
    if (overlap <= 0.0 || n_cand <= 0.0 || n_ref <= 0.0)
        return 0.0;
    double p = overlap / n_cand, r = overlap / n_ref;
    return 2.0 * p * r / (p + r);
}

double parse_rating(const std::string& text) {
    for (char c : text)
        if (c >= '0' && c <= '9')
            return static_cast<double>(c - '0');
    return 3.0; // unparseable predictions score as the scale midpoint
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
}

} // namespace

double accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& golds) {
    require_same_length(preds.size(), golds.size(), "accuracy");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        hit += preds[i] == golds[i];
    return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double macro_f1(const std::vector<std::string>& preds, const std::vector<std::string>& golds) {
    require_same_length(preds.size(), golds.size(), "macro_f1");
    std::set<std::string> classes(golds.begin(), golds.end());
    double sum = 0;
    for (const auto& c : classes) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            bool p = preds[i] == c, g = golds[i] == c;
            tp += p && g;
            fp += p && !g;
            fn += !p && g;
        }
        sum += f_measure(tp, tp + fp, tp + fn);
    }
    return sum / static_cast<double>(classes.size());
}

double mae(const std::vector<double>& preds, const std::vector<double>& golds) {
    require_same_length(preds.size(), golds.size(), "mae");
    double s = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        s += std::fabs(preds[i] - golds[i]);
    return s / static_cast<double>(preds.size());
}

double rmse(const std::vector<double>& preds, const std::vector<double>& golds) {
    require_same_length(preds.size(), golds.size(), "rmse");
    double s = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        s += (preds[i] - golds[i]) * (preds[i] - golds[i]);
    return std::sqrt(s / static_cast<double>(preds.size()));
}

double rouge1(const std::string& candidate, const std::string& reference) {
    auto c = tokenize(candidate), r = tokenize(reference);
    std::map<std::string, int> ref_counts;
    for (const auto& w : r)
        ref_counts[w] += 1;
    double overlap = 0;
    for (const auto& w : c) {
        auto it = ref_counts.find(w);
        if (it != ref_counts.end() && it->second > 0) {
            overlap += 1;
            it->second -= 1;
        }
    }
    return f_measure(overlap, static_cast<double>(c.size()), static_cast<double>(r.size()));
}

double rougeL(const std::string& candidate, const std::string& reference) {
    auto c = tokenize(candidate), r = tokenize(reference);
    const std::size_t n = c.size(), m = r.size();
    std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j)
            cur[j] = c[i - 1] == r[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return f_measure(static_cast<double>(prev[m]), static_cast<double>(n),
                     static_cast<double>(m));
}

std::map<std::string, double> score_task(TaskKind task, const std::vector<std::string>& preds,
                                         const std::vector<std::string>& golds) {
    require_same_length(preds.size(), golds.size(), "score_task");
    std::map<std::string, double> out;
    switch (task) {
    case TaskKind::tagging:
        out["accuracy"] = accuracy(preds, golds);
        out["macro_f1"] = macro_f1(preds, golds);
        break;
    case TaskKind::rating: {
        std::vector<double> p, g;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            p.push_back(parse_rating(preds[i]));
            g.push_back(parse_rating(golds[i]));
        }
        out["mae"] = mae(p, g);
        out["rmse"] = rmse(p, g);
        break;
    }
    case TaskKind::paraphrase: {
        double r1 = 0, rl = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            r1 += rouge1(preds[i], golds[i]);
            rl += rougeL(preds[i], golds[i]);
        }
        out["rouge1"] = r1 / static_cast<double>(preds.size());
        out["rougeL"] = rl / static_cast<double>(preds.size());
        break;
    }
    }
    return out;
}

KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k, std::uint64_t seed,
                    int restarts) {
    if (points.empty())
        throw contract_error("kmeans: no points");
    if (k < 1)
        throw contract_error("kmeans: k must be positive");
    const std::size_t n = points.size(), d = points[0].size();
    for (const auto& p : points)
        if (p.size() != d)
            throw contract_error("kmeans: ragged points");

    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (int rs = 0; rs < restarts; ++rs) {
        Rng rng(mix_seed(seed, "kmeans." + std::to_string(rs)));
        std::vector<std::vector<double>> centroids;
        std::vector<std::size_t> picked;
        while (centroids.size() < static_cast<std::size_t>(k)) {
            std::size_t i = static_cast<std::size_t>(rng.next_below(n));
            if (std::find(picked.begin(), picked.end(), i) != picked.end() && picked.size() < n)
                continue;
            picked.push_back(i);
            centroids.push_back(points[i]);
        }
        std::vector<int> assign(n, 0);
        for (int iter = 0; iter < 100; ++iter) {
            bool changed = false;
            for (std::size_t i = 0; i < n; ++i) {
                int arg = 0;
                double bd = sq_dist(points[i], centroids[0]);
                for (int c = 1; c < k; ++c) {
                    double dist = sq_dist(points[i], centroids[static_cast<std::size_t>(c)]);
                    if (dist < bd) {
                        bd = dist;
                        arg = c;
                    }
                }
                if (assign[i] != arg) {
                    assign[i] = arg;
                    changed = true;
                }
            }
            std::vector<std::vector<double>> sums(static_cast<std::size_t>(k),
                                                  std::vector<double>(d, 0.0));
            std::vector<int> counts(static_cast<std::size_t>(k), 0);
            for (std::size_t i = 0; i < n; ++i) {
                counts[static_cast<std::size_t>(assign[i])] += 1;
                for (std::size_t j = 0; j < d; ++j)
                    sums[static_cast<std::size_t>(assign[i])][j] += points[i][j];
            }
            for (int c = 0; c < k; ++c)
                if (counts[static_cast<std::size_t>(c)] > 0)
                    for (std::size_t j = 0; j < d; ++j)
                        centroids[static_cast<std::size_t>(c)][j] =
                            sums[static_cast<std::size_t>(c)][j] /
                            counts[static_cast<std::size_t>(c)];
            if (!changed && iter > 0)
                break;
        }
        double inertia = 0;
        for (std::size_t i = 0; i < n; ++i)
            inertia += sq_dist(points[i], centroids[static_cast<std::size_t>(assign[i])]);
        if (inertia < best.inertia) {
            best.inertia = inertia;
            best.assignment = assign;
            best.centroids = centroids;
        }
    }
    return best;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size() || a.empty())
        throw contract_error("adjusted_rand_index: label vectors must match and be nonempty");
    std::map<std::pair<int, int>, double> contingency;
    std::map<int, double> rows, cols;
    for (std::size_t i = 0; i < a.size(); ++i) {
        contingency[{a[i], b[i]}] += 1;
        rows[a[i]] += 1;
        cols[b[i]] += 1;
    }
    auto choose2 = [](double x) { return x * (x - 1.0) / 2.0; };
    double idx = 0, row_sum = 0, col_sum = 0;
    for (const auto& [_, v] : contingency)
        idx += choose2(v);
    for (const auto& [_, v] : rows)
        row_sum += choose2(v);
    for (const auto& [_, v] : cols)
        col_sum += choose2(v);
    double total = choose2(static_cast<double>(a.size()));
    double expected = row_sum * col_sum / total;
    double max_idx = 0.5 * (row_sum + col_sum);
    if (std::fabs(max_idx - expected) < 1e-12)
        return 1.0; // both partitions trivial and identical in structure
    return (idx - expected) / (max_idx - expected);
}

std::string metric_report_json(const MetricReport& report) {
    json j;
    j["stages"] = report.stages;
    j["per_stage"] = report.per_stage;
    j["per_user_ce"] = report.per_user_ce;
    j["seed"] = report.seed;
    j["config_checksum"] = report.config_checksum;
    j["rouge_variant"] = report.rouge_variant;
    return j.dump(2) + "\n";
}

DiagnosticsReport router_diagnostics(const RouterTrace& trace, const UserEmbeddingTable& embeddings,
                                     const std::map<std::string, int>* planted_labels,
                                     std::uint64_t seed) {
    if (trace.empty())
        throw contract_error("router_diagnostics: empty trace");
    DiagnosticsReport report;
    auto users = trace.user_ids();
    for (const auto& id : users)
        report.mean_omega[id] = trace.mean_omega(id);
    report.k = static_cast<int>(report.mean_omega.begin()->second.size());

    double sum = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < users.size(); ++i)
        for (std::size_t j = i + 1; j < users.size(); ++j) {
            const auto& wi = report.mean_omega[users[i]];
            const auto& wj = report.mean_omega[users[j]];
            double dotv = 0;
            for (std::size_t t = 0; t < wi.size(); ++t)
                dotv += wi[t] * wj[t];
            sum += std::fabs(dotv);
            ++pairs;
        }
    report.separation_sum = sum;
    report.separation_mean = pairs ? sum / static_cast<double>(pairs) : 0.0;

    std::vector<std::string> missing;
    for (const auto& id : users)
        if (!embeddings.has(id))
            missing.push_back(id);
    if (!missing.empty()) {
        std::string list;
        for (const auto& id : missing)
            list += (list.empty() ? "" : ", ") + id;
        throw data_error("router_diagnostics: users without embeddings: " + list);
    }

    std::vector<std::vector<double>> points;
    for (const auto& id : users) {
        std::vector<double> mean(static_cast<std::size_t>(embeddings.d_user()), 0.0);
        for (int l = 0; l < embeddings.n_layers(); ++l) {
            const auto& e = embeddings.embedding(id, l);
            for (std::size_t i = 0; i < mean.size(); ++i)
                mean[i] += e.data()[i] / embeddings.n_layers();
        }
        points.push_back(std::move(mean));
    }
    auto km = kmeans(points, report.k, seed);
    for (std::size_t i = 0; i < users.size(); ++i)
        report.cluster[users[i]] = km.assignment[static_cast<std::size_t>(i)];

    if (planted_labels) {
        std::vector<std::string> unlabeled;
        for (const auto& id : users)
            if (!planted_labels->count(id))
                unlabeled.push_back(id);
        if (!unlabeled.empty()) {
            std::string list;
            for (const auto& id : unlabeled)
                list += (list.empty() ? "" : ", ") + id;
            throw data_error("router_diagnostics: users without planted labels: " + list);
        }
        // ARI of the mean-omega clustering, matching how group recovery is scored
        auto omega_km = kmeans([&] {
            std::vector<std::vector<double>> w;
            for (const auto& id : users)
                w.push_back(report.mean_omega[id]);
            return w;
        }(), report.k, seed);
        std::vector<int> planted;
        for (const auto& id : users)
            planted.push_back(planted_labels->at(id));
        report.ari = adjusted_rand_index(omega_km.assignment, planted);
    }
    return report;
}

std::string diagnostics_json(const DiagnosticsReport& report) {
    json j;
    j["k"] = report.k;
    j["separation_mean"] = report.separation_mean;
    j["separation_sum"] = report.separation_sum;
    j["mean_omega"] = report.mean_omega;
    j["cluster"] = report.cluster;
    if (report.ari)
        j["ari"] = *report.ari;
    return j.dump(2) + "\n";
}

void write_user_omega_csv(const std::string& path, const DiagnosticsReport& report) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw data_error("write_user_omega_csv: cannot write " + path);
    out << "user_id";
    for (int i = 0; i < report.k; ++i)
        out << ",omega" << i;
    out << "\n";
    char buf[32];
    for (const auto& [id, w] : report.mean_omega) {
        out << id;
        for (double v : w) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            out << "," << buf;
        }
        out << "\n";
    }
}

void write_embeddings_csv(const std::string& path, const UserEmbeddingTable& embeddings) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw data_error("write_embeddings_csv: cannot write " + path);
    out << "user_id,layer";
    for (std::int64_t i = 0; i < embeddings.d_user(); ++i)
        out << ",e" << i;
    out << "\n";
    char buf[32];
    for (const auto& id : embeddings.user_ids())
        for (int l = 0; l < embeddings.n_layers(); ++l) {
            out << id << "," << l;
            for (double v : embeddings.embedding(id, l).data()) {
                std::snprintf(buf, sizeof(buf), "%.17g", v);
                out << "," << buf;
            }
            out << "\n";
        }
}

} // namespace proper
