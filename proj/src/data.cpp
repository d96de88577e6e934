#include "proper/data.hpp"
#include "proper/backbone.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

using nlohmann::json;

namespace proper {

const char* task_name(TaskKind t) {
    switch (t) {
    case TaskKind::tagging:
        return "tagging-classification";
    case TaskKind::paraphrase:
        return "paraphrase-generation";
    default:
        return "rating";
    }
}

TaskKind task_from_name(const std::string& name) {
    if (name == "tagging-classification")
        return TaskKind::tagging;
    if (name == "paraphrase-generation")
        return TaskKind::paraphrase;
    if (name == "rating")
        return TaskKind::rating;
    throw config_error("unknown task kind: " + name);
}

const UserRecord* Corpus::find(const std::string& id) const {
    for (const auto& u : users)
        if (u.user_id == id)
            return &u;
    return nullptr;
}

std::vector<std::string> Corpus::user_ids() const {
    std::vector<std::string> ids;
    for (const auto& u : users)
        ids.push_back(u.user_id);
    return ids;
}

std::int64_t Corpus::total_records() const {
    std::int64_t n = 0;
    for (const auto& u : users)
        n += static_cast<std::int64_t>(u.history.size());
    return n;
}

namespace {

// deterministic pool of distinct three-letter words
std::vector<std::string> word_pool() {
    static const std::string consonants = "bdfgklmnprstvz";
    static const std::string vowels = "aeiou";
    std::vector<std::string> pool;
    for (char c1 : consonants)
        for (char v : vowels)
            for (char c2 : consonants)
                pool.push_back(std::string{c1, v, c2});
    return pool;
}

constexpr int kNeutralWords = 16;

const char* task_prefix(TaskKind t) {
    switch (t) {
    case TaskKind::tagging:
        return "tag";
    case TaskKind::paraphrase:
        return "para";
    default:
        return "rate";
    }
}

} // namespace

void SyntheticSpec::validate() const {
    if (n_groups < 2)
        throw config_error("synthetic spec: n_groups must be >= 2, got " +
                           std::to_string(n_groups));
    if (users_per_group < 1)
        throw config_error("synthetic spec: users_per_group must be >= 1");
    if (test_users_per_group < 0 || test_users_per_group >= users_per_group)
        throw config_error("synthetic spec: test_users_per_group must leave at least one "
                           "training user per group");
    if (min_records < 2 || max_records < min_records)
        throw config_error("synthetic spec: need 2 <= min_records <= max_records");
    if (idiosyncrasy < 0.0 || idiosyncrasy > 1.0)
        throw config_error("synthetic spec: idiosyncrasy must lie in [0,1], got " +
                           std::to_string(idiosyncrasy));
    if (style_words_per_group < 1)
        throw config_error("synthetic spec: style_words_per_group must be >= 1");
    if (pareto && (pareto_alpha <= 0.0 || pareto_cap < max_records))
        throw config_error("synthetic spec: pareto_alpha must be positive and pareto_cap >= "
                           "max_records");
    std::size_t needed = static_cast<std::size_t>(kNeutralWords) +
                         static_cast<std::size_t>(n_groups) *
                             (static_cast<std::size_t>(style_words_per_group) + 2 +
                              static_cast<std::size_t>(users_per_group));
    if (needed > word_pool().size())
        throw config_error("synthetic spec: vocab too small for " + std::to_string(n_groups) +
                           " distinct group styles (" + std::to_string(needed) + " words needed)");
}

Corpus generate(const SyntheticSpec& spec) {
    spec.validate();
    auto pool = word_pool();
    std::size_t next = 0;
    auto take = [&](std::size_t n) {
        std::vector<std::string> words(pool.begin() + static_cast<std::ptrdiff_t>(next),
                                       pool.begin() + static_cast<std::ptrdiff_t>(next + n));
        next += n;
        return words;
    };
    auto neutral = take(kNeutralWords);
    std::vector<std::vector<std::string>> style(static_cast<std::size_t>(spec.n_groups));
    for (auto& s : style)
        s = take(static_cast<std::size_t>(spec.style_words_per_group));
    auto group_default = take(static_cast<std::size_t>(spec.n_groups));
    auto label = take(static_cast<std::size_t>(spec.n_groups));
    auto signature =
        take(static_cast<std::size_t>(spec.n_groups) * static_cast<std::size_t>(spec.users_per_group));

    Corpus corpus;
    corpus.task = spec.task;
    for (int g = 0; g < spec.n_groups; ++g) {
        for (int ui = 0; ui < spec.users_per_group; ++ui) {
            int idx = g * spec.users_per_group + ui;
            UserRecord user;
            char buf[16];
            std::snprintf(buf, sizeof(buf), "u%03d", idx);
            user.user_id = buf;
            user.group_label = g;
            user.is_test = ui >= spec.users_per_group - spec.test_users_per_group;

            Rng cnt(mix_seed(spec.seed, "count." + user.user_id));
            int n_records;
            if (spec.pareto) {
                double u = 1.0 - cnt.uniform(); // (0, 1]
                double x = spec.min_records * std::pow(u, -1.0 / spec.pareto_alpha);
                n_records = static_cast<int>(std::min<double>(x, spec.pareto_cap));
                n_records = std::max(n_records, spec.min_records);
            } else {
                n_records = spec.min_records +
                            static_cast<int>(cnt.next_below(
                                static_cast<std::uint64_t>(spec.max_records - spec.min_records + 1)));
            }

            for (int j = 0; j < n_records; ++j) {
                Rng rng(mix_seed(spec.seed, "rec." + user.user_id + "." + std::to_string(j)));
                RecordEntry rec;
                rec.query = task_prefix(spec.task);
                for (int w = 0; w < 2; ++w)
                    rec.query += " " + neutral[static_cast<std::size_t>(rng.next_below(neutral.size()))];
                bool quirky = rng.uniform() < spec.idiosyncrasy;
                switch (spec.task) {
                case TaskKind::paraphrase: {
                    const auto& sw = style[static_cast<std::size_t>(g)];
                    std::string s = sw[static_cast<std::size_t>(rng.next_below(sw.size()))];
                    std::string final_word = quirky ? signature[static_cast<std::size_t>(idx)]
                                                    : group_default[static_cast<std::size_t>(g)];
                    rec.response = "re " + s + " " + final_word;
                    break;
                }
                case TaskKind::tagging: {
                    int lab = g;
                    if (quirky && spec.n_groups > 1)
                        lab = (g + 1 + idx % (spec.n_groups - 1)) % spec.n_groups;
                    rec.response = label[static_cast<std::size_t>(lab)];
                    break;
                }
                case TaskKind::rating: {
                    int base = 1 + g % 5;
                    int value = base;
                    if (quirky)
                        value = std::clamp(base + (idx % 2 == 0 ? 1 : -1), 1, 5);
                    rec.response = std::to_string(value);
                    break;
                }
                }
                user.history.push_back(std::move(rec));
            }
            corpus.users.push_back(std::move(user));
        }
    }
    return corpus;
}

const RecordEntry& held_out(const UserRecord& user) {
    if (user.history.empty())
        throw data_error("held_out: user " + user.user_id + " has empty history");
    return user.history.back();
}

std::vector<RecordEntry> train_slice(const UserRecord& user) {
    if (user.history.empty())
        throw data_error("train_slice: user " + user.user_id + " has empty history");
    return {user.history.begin(), user.history.end() - 1};
}

EncodedExample encode_example(const std::string& query, const std::string& response,
                              std::int64_t max_len) {
    EncodedExample ex;
    auto push_text = [&](const std::string& s) {
        for (unsigned char c : s) {
            if (c == 0)
                throw data_error("encode_example: NUL byte collides with EOS");
            ex.tokens.push_back(static_cast<int>(c));
        }
    };
    push_text(query);
    ex.tokens.push_back('\t');
    ex.response_start = static_cast<std::int64_t>(ex.tokens.size());
    push_text(response);
    ex.tokens.push_back(kEosToken);
    if (static_cast<std::int64_t>(ex.tokens.size()) > max_len)
        throw data_error("encode_example: example of " + std::to_string(ex.tokens.size()) +
                         " tokens exceeds max length " + std::to_string(max_len));
    return ex;
}

std::string decode_tokens(const std::vector<int>& tokens) {
    std::string out;
    for (int t : tokens) {
        if (t == kEosToken)
            break;
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

// ---- spec JSON -------------------------------------------------------------

SyntheticSpec spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw config_error(std::string("synthetic spec: invalid JSON: ") + e.what());
    }
    SyntheticSpec spec;
    try {
        spec.n_groups = j.value("n_groups", spec.n_groups);
        spec.users_per_group = j.value("users_per_group", spec.users_per_group);
        spec.test_users_per_group = j.value("test_users_per_group", spec.test_users_per_group);
        spec.min_records = j.value("min_records", spec.min_records);
        spec.max_records = j.value("max_records", spec.max_records);
        spec.pareto = j.value("pareto", spec.pareto);
        spec.pareto_alpha = j.value("pareto_alpha", spec.pareto_alpha);
        spec.pareto_cap = j.value("pareto_cap", spec.pareto_cap);
        spec.idiosyncrasy = j.value("idiosyncrasy", spec.idiosyncrasy);
        spec.style_words_per_group = j.value("style_words_per_group", spec.style_words_per_group);
        if (j.contains("task"))
            spec.task = task_from_name(j.at("task").get<std::string>());
        spec.seed = j.value("seed", spec.seed);
    } catch (const json::exception& e) {
        throw config_error(std::string("synthetic spec: bad field type: ") + e.what());
    }
    spec.validate();
    return spec;
}

SyntheticSpec spec_from_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw config_error("synthetic spec: cannot read " + path);
    return spec_from_json(std::string(std::istreambuf_iterator<char>(in), {}));
}

std::string spec_to_json(const SyntheticSpec& spec) {
    json j;
    j["n_groups"] = spec.n_groups;
    j["users_per_group"] = spec.users_per_group;
    j["test_users_per_group"] = spec.test_users_per_group;
    j["min_records"] = spec.min_records;
    j["max_records"] = spec.max_records;
    j["pareto"] = spec.pareto;
    j["pareto_alpha"] = spec.pareto_alpha;
    j["pareto_cap"] = spec.pareto_cap;
    j["idiosyncrasy"] = spec.idiosyncrasy;
    j["style_words_per_group"] = spec.style_words_per_group;
    j["task"] = task_name(spec.task);
    j["seed"] = spec.seed;
    return j.dump(2) + "\n";
}

// ---- JSONL interchange -----------------------------------------------------

Corpus load_jsonl(const std::string& path, LoadReport* report) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw data_error("load_jsonl: cannot read " + path);
    Corpus corpus;
    LoadReport local;
    std::string line;
    int line_no = 0;
    bool task_set = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty())
            continue;
        try {
            json j = json::parse(line);
            if (!j.contains("user_id"))
                throw data_error("missing user_id");
            if (!j.contains("input") || !j.contains("output"))
                throw data_error("missing input/output");
            UserRecord user;
            user.user_id = j.at("user_id").get<std::string>();
            if (j.contains("profile"))
                for (const auto& p : j.at("profile"))
                    user.history.push_back(
                        {p.at("input").get<std::string>(), p.at("output").get<std::string>()});
            user.history.push_back(
                {j.at("input").get<std::string>(), j.at("output").get<std::string>()});
            user.group_label = j.value("group_label", -1);
            user.is_test = j.value("is_test", false);
            if (!task_set && j.contains("task")) {
                corpus.task = task_from_name(j.at("task").get<std::string>());
                task_set = true;
            }
            corpus.users.push_back(std::move(user));
        } catch (const std::exception& e) {
            local.errors.push_back({line_no, e.what()});
        }
    }
    if (report)
        *report = std::move(local);
    else if (!local.errors.empty())
        throw data_error("load_jsonl: line " + std::to_string(local.errors.front().line) + ": " +
                         local.errors.front().message);
    return corpus;
}

void save_jsonl(const std::string& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw data_error("save_jsonl: cannot write " + path);
    for (const auto& user : corpus.users) {
        const auto& eval = held_out(user);
        json j;
        j["user_id"] = user.user_id;
        j["input"] = eval.query;
        j["output"] = eval.response;
        json profile = json::array();
        for (std::size_t i = 0; i + 1 < user.history.size(); ++i)
            profile.push_back(
                {{"input", user.history[i].query}, {"output", user.history[i].response}});
        j["profile"] = profile;
        if (user.group_label >= 0)
            j["group_label"] = user.group_label;
        if (user.is_test)
            j["is_test"] = true;
        j["task"] = task_name(corpus.task);
        out << j.dump() << "\n";
    }
}

void save_group_labels_csv(const std::string& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw data_error("save_group_labels_csv: cannot write " + path);
    out << "user_id,group_label\n";
    for (const auto& user : corpus.users)
        out << user.user_id << "," << user.group_label << "\n";
}

} // namespace proper
