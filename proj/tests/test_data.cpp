#include "doctest.h"
#include "proper/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

using namespace proper;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
}

std::map<std::string, double> word_histogram(const UserRecord& user) {
    std::map<std::string, double> h;
    double total = 0;
    for (const auto& rec : user.history) {
        std::stringstream ss(rec.response);
        std::string w;
        while (ss >> w) {
            h[w] += 1.0;
            total += 1.0;
        }
    }
    for (auto& [_, v] : h)
        v /= total;
    return h;
}

double hist_dist(const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
    double d = 0;
    for (const auto& [k, v] : a) {
        auto it = b.find(k);
        double bv = it == b.end() ? 0.0 : it->second;
        d += (v - bv) * (v - bv);
    }
    for (const auto& [k, v] : b)
        if (!a.count(k))
            d += v * v;
    return d;
}

} // namespace

TEST_CASE("task names round trip") {
    for (TaskKind t : {TaskKind::tagging, TaskKind::paraphrase, TaskKind::rating})
        CHECK(task_from_name(task_name(t)) == t);
    CHECK_THROWS_AS(task_from_name("sonnet-writing"), config_error);
}

TEST_CASE("generation is deterministic and structured") {
    SyntheticSpec spec;
    spec.seed = 11;
    Corpus a = generate(spec);
    Corpus b = generate(spec);
    REQUIRE(a.users.size() == 24);
    for (std::size_t i = 0; i < a.users.size(); ++i) {
        CHECK(a.users[i].user_id == b.users[i].user_id);
        CHECK(a.users[i].group_label == b.users[i].group_label);
        CHECK(a.users[i].is_test == b.users[i].is_test);
        REQUIRE(a.users[i].history.size() == b.users[i].history.size());
        for (std::size_t j = 0; j < a.users[i].history.size(); ++j)
            CHECK(a.users[i].history[j] == b.users[i].history[j]);
    }

    int test_users = 0;
    for (const auto& u : a.users) {
        CHECK(u.history.size() >= static_cast<std::size_t>(spec.min_records));
        CHECK(u.history.size() <= static_cast<std::size_t>(spec.max_records));
        if (u.is_test)
            ++test_users;
        for (const auto& rec : u.history) {
            CHECK(rec.query.rfind("para ", 0) == 0);
            CHECK(rec.response.rfind("re ", 0) == 0);
        }
    }
    CHECK(test_users == spec.n_groups * spec.test_users_per_group);
}

TEST_CASE("zero idiosyncrasy users are interchangeable within a group") {
    SyntheticSpec spec;
    spec.idiosyncrasy = 0.0;
    spec.style_words_per_group = 1;
    spec.min_records = 4;
    spec.max_records = 4;
    spec.seed = 3;
    Corpus c = generate(spec);
    // one style word and no quirk collapses each group onto a single response
    std::map<int, std::string> group_response;
    for (const auto& u : c.users)
        for (const auto& rec : u.history) {
            auto it = group_response.find(u.group_label);
            if (it == group_response.end())
                group_response[u.group_label] = rec.response;
            else
                CHECK(it->second == rec.response);
        }
    CHECK(group_response.size() == 3);
}

TEST_CASE("groups are separable by nearest centroid on response histograms") {
    SyntheticSpec spec;
    spec.idiosyncrasy = 0.0;
    spec.seed = 19;
    Corpus c = generate(spec);

    std::map<int, std::map<std::string, double>> centroid;
    std::map<int, int> members;
    for (const auto& u : c.users) {
        auto h = word_histogram(u);
        for (const auto& [k, v] : h)
            centroid[u.group_label][k] += v;
        members[u.group_label] += 1;
    }
    for (auto& [g, h] : centroid)
        for (auto& [_, v] : h)
            v /= members[g];

    int correct = 0;
    for (const auto& u : c.users) {
        auto h = word_histogram(u);
        int best = -1;
        double best_d = 1e300;
        for (const auto& [g, ch] : centroid) {
            double d = hist_dist(h, ch);
            if (d < best_d) {
                best_d = d;
                best = g;
            }
        }
        if (best == u.group_label)
            ++correct;
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(c.users.size()) >= 0.95);
}

TEST_CASE("pareto option concentrates records") {
    SyntheticSpec spec;
    spec.pareto = true;
    spec.seed = 0;
    Corpus c = generate(spec);
    std::vector<std::int64_t> counts;
    std::int64_t total = 0;
    for (const auto& u : c.users) {
        counts.push_back(static_cast<std::int64_t>(u.history.size()));
        total += static_cast<std::int64_t>(u.history.size());
    }
    std::sort(counts.rbegin(), counts.rend());
    std::size_t top = (c.users.size() + 9) / 10; // ceil(10%)
    std::int64_t held = 0;
    for (std::size_t i = 0; i < top; ++i)
        held += counts[i];
    CHECK(static_cast<double>(held) / static_cast<double>(total) >= 0.6);
}

TEST_CASE("spec validation") {
    SyntheticSpec spec;
    spec.n_groups = 1;
    CHECK_THROWS_AS(generate(spec), config_error);

    SyntheticSpec idio;
    idio.idiosyncrasy = 1.5;
    CHECK_THROWS_AS(idio.validate(), config_error);

    SyntheticSpec big;
    big.n_groups = 20;
    big.users_per_group = 50;
    CHECK_THROWS_AS(big.validate(), config_error);

    SyntheticSpec testy;
    testy.test_users_per_group = testy.users_per_group;
    CHECK_THROWS_AS(testy.validate(), config_error);
}

TEST_CASE("held-out split is the last record and disjoint from training") {
    SyntheticSpec spec;
    spec.seed = 7;
    Corpus c = generate(spec);
    for (const auto& u : c.users) {
        const auto& eval = held_out(u);
        auto train = train_slice(u);
        CHECK(train.size() + 1 == u.history.size());
        CHECK(eval == u.history.back());
        for (std::size_t i = 0; i < train.size(); ++i)
            CHECK(train[i] == u.history[i]);
    }
    UserRecord empty;
    empty.user_id = "ghost";
    CHECK_THROWS_AS(held_out(empty), data_error);
    CHECK_THROWS_AS(train_slice(empty), data_error);
}

TEST_CASE("byte encoding") {
    auto ex = encode_example("ab", "c", 16);
    CHECK(ex.tokens == std::vector<int>{97, 98, 9, 99, 0});
    CHECK(ex.response_start == 3);
    CHECK(decode_tokens({99, 0, 55}) == "c");
    CHECK_THROWS_AS(encode_example("too long for the budget", "x", 8), data_error);
    CHECK_THROWS_AS(encode_example(std::string(1, '\0'), "x", 8), data_error);
}

TEST_CASE("jsonl round trip") {
    SyntheticSpec spec;
    spec.seed = 23;
    Corpus c = generate(spec);
    save_jsonl("corpus_rt.jsonl", c);
    LoadReport report;
    Corpus back = load_jsonl("corpus_rt.jsonl", &report);
    CHECK(report.errors.empty());
    CHECK(back.task == c.task);
    REQUIRE(back.users.size() == c.users.size());
    for (std::size_t i = 0; i < c.users.size(); ++i) {
        CHECK(back.users[i].user_id == c.users[i].user_id);
        CHECK(back.users[i].group_label == c.users[i].group_label);
        CHECK(back.users[i].is_test == c.users[i].is_test);
        REQUIRE(back.users[i].history.size() == c.users[i].history.size());
        for (std::size_t j = 0; j < c.users[i].history.size(); ++j)
            CHECK(back.users[i].history[j] == c.users[i].history[j]);
    }
    save_jsonl("corpus_rt2.jsonl", back);
    CHECK(read_file("corpus_rt.jsonl") == read_file("corpus_rt2.jsonl"));
    std::remove("corpus_rt.jsonl");
    std::remove("corpus_rt2.jsonl");
}

TEST_CASE("jsonl error handling") {
    {
        std::ofstream out("empty.jsonl", std::ios::binary);
    }
    LoadReport report;
    Corpus c = load_jsonl("empty.jsonl", &report);
    CHECK(c.users.empty());
    CHECK(report.errors.empty());
    std::remove("empty.jsonl");

    {
        std::ofstream out("bad.jsonl", std::ios::binary);
        out << R"({"user_id":"a","input":"q","output":"r"})" << "\n";
        out << R"({"input":"q","output":"r"})" << "\n";
        out << "not json at all\n";
        out << R"({"user_id":"b","input":"q2","output":"r2"})" << "\n";
    }
    Corpus partial = load_jsonl("bad.jsonl", &report);
    CHECK(partial.users.size() == 2);
    CHECK(partial.users[0].user_id == "a");
    CHECK(partial.users[1].user_id == "b");
    REQUIRE(report.errors.size() == 2);
    CHECK(report.errors[0].line == 2);
    CHECK(report.errors[1].line == 3);
    std::remove("bad.jsonl");

    CHECK_THROWS_AS(load_jsonl("no_such_file.jsonl"), data_error);
}

TEST_CASE("spec json round trip") {
    SyntheticSpec spec;
    spec.n_groups = 4;
    spec.users_per_group = 5;
    spec.idiosyncrasy = 0.25;
    spec.task = TaskKind::rating;
    spec.pareto = true;
    spec.seed = 99;
    SyntheticSpec back = spec_from_json(spec_to_json(spec));
    CHECK(back.n_groups == 4);
    CHECK(back.users_per_group == 5);
    CHECK(back.idiosyncrasy == 0.25);
    CHECK(back.task == TaskKind::rating);
    CHECK(back.pareto == spec.pareto);
    CHECK(back.seed == 99);

    CHECK_THROWS_AS(spec_from_json("{nope"), config_error);
    CHECK_THROWS_AS(spec_from_json(R"({"n_groups":"three"})"), config_error);
    CHECK_THROWS_AS(spec_from_json(R"({"n_groups":1})"), config_error);
}

TEST_CASE("labels sidecar") {
    SyntheticSpec spec;
    spec.n_groups = 2;
    spec.users_per_group = 2;
    spec.test_users_per_group = 1;
    spec.seed = 1;
    Corpus c = generate(spec);
    save_group_labels_csv("labels_test.csv", c);
    std::string got = read_file("labels_test.csv");
    CHECK(got == "user_id,group_label\nu000,0\nu001,0\nu002,1\nu003,1\n");
    std::remove("labels_test.csv");
}

TEST_CASE("tagging and rating tasks") {
    SyntheticSpec spec;
    spec.task = TaskKind::tagging;
    spec.idiosyncrasy = 0.0;
    spec.seed = 2;
    Corpus tags = generate(spec);
    std::map<int, std::string> group_label_word;
    for (const auto& u : tags.users)
        for (const auto& rec : u.history) {
            CHECK(rec.query.rfind("tag ", 0) == 0);
            auto it = group_label_word.find(u.group_label);
            if (it == group_label_word.end())
                group_label_word[u.group_label] = rec.response;
            else
                CHECK(it->second == rec.response);
        }
    CHECK(group_label_word.size() == 3);

    spec.task = TaskKind::rating;
    Corpus rate = generate(spec);
    for (const auto& u : rate.users)
        for (const auto& rec : u.history) {
            CHECK(rec.query.rfind("rate ", 0) == 0);
            REQUIRE(rec.response.size() == 1);
            int v = rec.response[0] - '0';
            CHECK(v >= 1);
            CHECK(v <= 5);
            CHECK(v == 1 + u.group_label % 5);
        }
}
