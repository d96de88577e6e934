#pragma once

#include "proper/common.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace proper {

enum class TaskKind { tagging, paraphrase, rating };
const char* task_name(TaskKind t);
TaskKind task_from_name(const std::string& name);

struct RecordEntry {
    std::string query;
    std::string response;

    bool operator==(const RecordEntry&) const = default;
};

struct UserRecord {
    std::string user_id;
    std::vector<RecordEntry> history;
    int group_label = -1; // planted ground truth; -1 for real data
    bool is_test = false;
};

struct Corpus {
    TaskKind task = TaskKind::paraphrase;
    std::vector<UserRecord> users;

    const UserRecord* find(const std::string& id) const;
    std::vector<std::string> user_ids() const;
    std::int64_t total_records() const;
};

struct SyntheticSpec {
    int n_groups = 3;
    int users_per_group = 8;
    int test_users_per_group = 2;
    int min_records = 6;
    int max_records = 10;
    bool pareto = false;
    double pareto_alpha = 0.5; // smaller is heavier-tailed
    int pareto_cap = 2000;
    double idiosyncrasy = 0.5; // [0,1]: probability a record carries the user quirk
    int style_words_per_group = 3;
    TaskKind task = TaskKind::paraphrase;
    std::uint64_t seed = 0;

    void validate() const;
};

SyntheticSpec spec_from_json(const std::string& text);
SyntheticSpec spec_from_json_file(const std::string& path);
std::string spec_to_json(const SyntheticSpec& spec);

// Deterministic per seed. Responses compose a population-wide format, a
// group-conditioned style word, and a user-conditioned quirk, so every stage
// has residual signal to capture.
Corpus generate(const SyntheticSpec& spec);

// The last history item is each user's evaluation query; everything before
// it is training data. The split is deterministic and disjoint by
// construction.
const RecordEntry& held_out(const UserRecord& user);
std::vector<RecordEntry> train_slice(const UserRecord& user);

// Byte-level encoding: query bytes, tab, response bytes, EOS. Logit rows
// [response_start-1, end-1) predict the response bytes plus EOS.
struct EncodedExample {
    std::vector<int> tokens;
    std::int64_t response_start = 0;
};
EncodedExample encode_example(const std::string& query, const std::string& response,
                              std::int64_t max_len);
std::string decode_tokens(const std::vector<int>& tokens);

// ---- JSONL interchange -----------------------------------------------------
// One object per line: {"user_id", "input", "output", "profile": [{"input",
// "output"}...], optional "group_label", "is_test", "task"}. input/output is
// the held-out pair; profile is the earlier history in order.

struct LineError {
    int line = 0;
    std::string message;
};

struct LoadReport {
    std::vector<LineError> errors;
};

Corpus load_jsonl(const std::string& path, LoadReport* report = nullptr);
void save_jsonl(const std::string& path, const Corpus& corpus);

// sidecar ground truth: header then "user_id,group_label" rows
void save_group_labels_csv(const std::string& path, const Corpus& corpus);

} // namespace proper
