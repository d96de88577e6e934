#include "doctest.h"
#include "proper/routing.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

using namespace proper;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 11;
    c.d_model = 4;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 8;
    c.max_seq_len = 16;
    c.seed = 31;
    return c;
}

std::vector<double> softmax_ref(std::vector<double> v) {
    double mx = v[0];
    for (double x : v)
        mx = std::max(mx, x);
    double denom = 0;
    for (double& x : v) {
        x = std::exp(x - mx);
        denom += x;
    }
    for (double& x : v)
        x /= denom;
    return v;
}

} // namespace

TEST_CASE("user_aware_route uniform and closed form") {
    const std::int64_t d = 3, du = 2, k = 2;
    Tensor x = Tensor::from({1, d}, {0.4, -1.2, 0.7});
    Tensor u = Tensor::from({1, du}, {1.0, -0.5});

    Tensor w = user_aware_route(x, u, Tensor::zeros({d, k}), Tensor::zeros({du, k}));
    for (double v : w.data())
        CHECK(v == 0.5);

    // drive both inner softmaxes to [1, 0] so the outer logits are [2, 0]
    Tensor mg = Tensor::from({1, k}, {200.0, 0.0});
    Tensor mu = Tensor::from({du, k}, {200.0, 0.0, 0.0, 0.0});
    Tensor x1 = Tensor::from({1, 1}, {1.0});
    Tensor u1 = Tensor::from({1, du}, {1.0, 0.0});
    Tensor w2 = user_aware_route(x1, u1, mg, mu);
    double e2 = std::exp(2.0);
    CHECK(w2.at(0, 0) == doctest::Approx(e2 / (e2 + 1.0)).epsilon(1e-12));
    CHECK(w2.at(0, 1) == doctest::Approx(1.0 / (e2 + 1.0)).epsilon(1e-12));

    // regular variant is a single softmax of the text logits
    Tensor wr = user_aware_route(x1, u1, mg, mu, true);
    auto ref = softmax_ref({200.0, 0.0});
    CHECK(wr.at(0, 0) == doctest::Approx(ref[0]).epsilon(1e-15));

    CHECK_THROWS_AS(user_aware_route(x, Tensor::from({1, 3}, {1, 2, 3}),
                                     Tensor::zeros({d, k}), Tensor::zeros({du, k})),
                    shape_error);
}

TEST_CASE("user_aware_route equivariance and bounds") {
    const std::int64_t d = 5, du = 4, k = 3;
    Rng rng(7);
    Tensor x = Tensor::randn({4, d}, rng, 1.0);
    Tensor u = Tensor::randn({1, du}, rng, 1.0);
    Tensor mg = Tensor::randn({d, k}, rng, 2.0);
    Tensor mu = Tensor::randn({du, k}, rng, 2.0);
    Tensor w = user_aware_route(x, u, mg, mu);

    for (std::int64_t t = 0; t < w.dim(0); ++t) {
        double sum = 0;
        for (std::int64_t j = 0; j < k; ++j) {
            double v = w.at(t, j);
            CHECK(v > 0.0);
            // inner softmaxes bound each outer logit to (0, 2)
            CHECK(v >= 1.0 / (static_cast<double>(k) * std::exp(2.0)) - 1e-9);
            sum += v;
        }
        CHECK(std::fabs(sum - 1.0) < 1e-9);
    }

    // swap expert columns 0 and 2 in both routers
    auto swap_cols = [&](const Tensor& m) {
        Tensor out = m.detach();
        for (std::int64_t r = 0; r < m.dim(0); ++r) {
            out.data()[static_cast<std::size_t>(r * k + 0)] = m.at(r, 2);
            out.data()[static_cast<std::size_t>(r * k + 2)] = m.at(r, 0);
        }
        return out;
    };
    Tensor wp = user_aware_route(x, u, swap_cols(mg), swap_cols(mu));
    for (std::int64_t t = 0; t < w.dim(0); ++t) {
        CHECK(wp.at(t, 0) == doctest::Approx(w.at(t, 2)).epsilon(1e-12));
        CHECK(wp.at(t, 2) == doctest::Approx(w.at(t, 0)).epsilon(1e-12));
        CHECK(wp.at(t, 1) == doctest::Approx(w.at(t, 1)).epsilon(1e-12));
    }
}

TEST_CASE("moe_ffn_delta selection and dense oracle") {
    Rng rng(21);
    std::vector<LoraAdapter> experts;
    for (int i = 0; i < 2; ++i) {
        auto e = lora_init(3, 4, 1, 2.0, 50 + static_cast<std::uint64_t>(i));
        e.B = Tensor::randn({3, 1}, rng, 1.0, true);
        experts.push_back(e);
    }
    Tensor x = Tensor::randn({2, 3}, rng, 1.0);

    Tensor onehot = Tensor::from({2, 2}, {1, 0, 1, 0});
    Tensor sel = moe_ffn_delta(x, experts, onehot, false);
    Tensor solo = lora_delta(x, experts[0], false);
    CHECK(sel.data() == solo.data());

    std::vector<LoraAdapter> same{experts[0], experts[0]};
    Tensor wa = Tensor::from({2, 2}, {0.2, 0.8, 0.9, 0.1});
    Tensor wb = Tensor::from({2, 2}, {0.5, 0.5, 0.5, 0.5});
    Tensor oa = moe_ffn_delta(x, same, wa, false);
    Tensor ob = moe_ffn_delta(x, same, wb, false);
    for (std::size_t i = 0; i < oa.data().size(); ++i)
        CHECK(oa.data()[i] == doctest::Approx(ob.data()[i]).epsilon(1e-12));

    Tensor w37 = Tensor::from({2, 2}, {0.3, 0.7, 0.3, 0.7});
    Tensor got = moe_ffn_delta(x, experts, w37, false);
    for (std::int64_t t = 0; t < 2; ++t)
        for (std::int64_t j = 0; j < 4; ++j) {
            double want = 0;
            for (int m = 0; m < 2; ++m) {
                double xb = 0;
                for (std::int64_t i = 0; i < 3; ++i)
                    xb += x.at(t, i) * experts[static_cast<std::size_t>(m)].B.at(i, 0);
                want += w37.at(t, m) * 2.0 * xb * experts[static_cast<std::size_t>(m)].A.at(0, j);
            }
            CHECK(got.at(t, j) == doctest::Approx(want).epsilon(1e-10));
        }

    Tensor bad = Tensor::from({2, 3}, {1, 0, 0, 1, 0, 0});
    CHECK_THROWS_AS(moe_ffn_delta(x, experts, bad, false), contract_error);
}

TEST_CASE("router trace ema and validation") {
    RouterTrace trace(0.9);
    trace.update("u1", 0, {0.7, 0.3}, 1);
    CHECK(trace.stored("u1", 0) == std::vector<double>{0.7, 0.3});
    trace.update("u1", 0, {0.1, 0.9}, 2);
    CHECK(trace.stored("u1", 0)[0] == doctest::Approx(0.9 * 0.7 + 0.1 * 0.1).epsilon(1e-12));
    CHECK(trace.stored("u1", 0)[1] == doctest::Approx(0.9 * 0.3 + 0.1 * 0.9).epsilon(1e-12));

    CHECK_THROWS_AS(trace.update("u1", 0, {0.5, 0.6}, 3), contract_error);
    CHECK_THROWS_AS(trace.stored("nobody", 0), data_error);

    trace.update("u1", 1, {0.5, 0.5}, 4);
    auto mean = trace.mean_omega("u1");
    CHECK(mean.size() == 2);
    CHECK(mean[0] == doctest::Approx(0.5 * (trace.stored("u1", 0)[0] + 0.5)).epsilon(1e-12));

    trace.write_csv("trace_test.csv");
    std::ifstream f("trace_test.csv");
    std::string header;
    std::getline(f, header);
    CHECK(header == "step,user_id,layer,omega0,omega1");
    int lines = 0;
    std::string line;
    while (std::getline(f, line))
        ++lines;
    CHECK(lines == 3);
    std::remove("trace_test.csv");
}

TEST_CASE("constraint loss extremals") {
    RouterTrace empty(0.9);
    Tensor w = Tensor::from({5}, {0.2, 0.2, 0.2, 0.2, 0.2}, true);
    CHECK(constraint_loss(empty, "me", w, 0).item() == 0.0);

    RouterTrace ortho(0.9);
    ortho.update("other", 0, {0.0, 1.0}, 1);
    Tensor e1 = Tensor::from({2}, {1.0, 0.0}, true);
    CHECK(constraint_loss(ortho, "me", e1, 0).item() == 0.0);

    RouterTrace uni(0.9);
    for (int j = 0; j < 4; ++j)
        uni.update("u" + std::to_string(j), 0, {0.2, 0.2, 0.2, 0.2, 0.2}, j);
    // 4 stored users x (5 * 0.2^2) = 0.8
    CHECK(constraint_loss(uni, "me", w, 0).item() == 0.8);
    // the current user's own trace is excluded
    uni.update("me", 0, {0.2, 0.2, 0.2, 0.2, 0.2}, 9);
    CHECK(constraint_loss(uni, "me", w, 0).item() == 0.8);

    // overlap in any coordinate makes the loss strictly positive
    RouterTrace overlap(0.9);
    overlap.update("other", 0, {0.5, 0.5}, 1);
    Tensor mixed = Tensor::from({2}, {0.9, 0.1}, true);
    CHECK(constraint_loss(overlap, "me", mixed, 0).item() > 0.0);

    // gradients reach the live omega
    Tensor lc = constraint_loss(overlap, "me", mixed, 0);
    backward(lc);
    CHECK(mixed.has_grad());
    CHECK(mixed.grad()[0] != 0.0);

    // cosine variant of identical unit-overlap vectors gives 1 per pair
    RouterTrace same(0.9);
    same.update("other", 0, {0.5, 0.5}, 1);
    Tensor half = Tensor::from({2}, {0.5, 0.5}, true);
    CHECK(constraint_loss(same, "me", half, 0, true).item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("lora_aware_route uniform and closed form") {
    auto user = lora_init(2, 4, 1, 1.0, 5);
    Rng rng(3);
    Tensor x = Tensor::randn({3, 2}, rng, 1.0);

    // zero W_l or zero-delta adapter both give uniform beta
    Tensor b0 = lora_aware_route(x, user, Tensor::zeros({4, 2}));
    for (double v : b0.data())
        CHECK(v == 0.5);
    Tensor wl = Tensor::randn({4, 2}, rng, 1.0);
    Tensor b1 = lora_aware_route(x, user, wl);
    for (double v : b1.data())
        CHECK(v == 0.5);

    // h_u = [1,0,0,0] and W_l mapping it to logits [1,-1]
    LoraAdapter hand;
    hand.B = Tensor::from({2, 1}, {1, 0}, true);
    hand.A = Tensor::from({1, 4}, {1, 0, 0, 0}, true);
    hand.rank = 1;
    hand.alpha = 1.0;
    Tensor wl2 = Tensor::zeros({4, 2});
    wl2.data()[0] = 1.0;
    wl2.data()[1] = -1.0;
    Tensor xh = Tensor::from({1, 2}, {1.0, 0.0});
    Tensor beta = lora_aware_route(xh, hand, wl2);
    auto ref = softmax_ref({1.0, -1.0});
    CHECK(beta.at(0, 0) == doctest::Approx(ref[0]).epsilon(1e-12));
    CHECK(beta.at(0, 1) == doctest::Approx(ref[1]).epsilon(1e-12));

    CHECK_THROWS_AS(lora_aware_route(x, user, Tensor::zeros({3, 2})), shape_error);
}

TEST_CASE("stage3_ffn_delta composition") {
    Rng rng(41);
    std::vector<LoraAdapter> experts;
    for (int i = 0; i < 3; ++i) {
        auto e = lora_init(3, 4, 1, 2.0, 60 + static_cast<std::uint64_t>(i));
        e.B = Tensor::randn({3, 1}, rng, 1.0, false);
        e.B.set_requires_grad(false);
        e.A.set_requires_grad(false);
        experts.push_back(e);
    }
    Tensor x = Tensor::randn({2, 3}, rng, 1.0);
    Tensor wl = Tensor::randn({4, 3}, rng, 1.0, true);

    // zero user adapter routes uniformly: output is the mean expert delta
    auto zero_user = lora_init(3, 4, 2, 4.0, 70);
    Tensor got = stage3_ffn_delta(x, experts, zero_user, wl, false);
    Tensor mean = Tensor::zeros({2, 4});
    for (const auto& e : experts) {
        Tensor d = lora_delta(x, e, false);
        for (std::size_t i = 0; i < mean.data().size(); ++i)
            mean.data()[i] += d.data()[i] / 3.0;
    }
    for (std::size_t i = 0; i < got.data().size(); ++i)
        CHECK(got.data()[i] == doctest::Approx(mean.data()[i]).epsilon(1e-12));

    // zero experts leave the pure user delta
    auto user = lora_init(3, 4, 2, 4.0, 71);
    user.B = Tensor::randn({3, 2}, rng, 1.0, true);
    std::vector<LoraAdapter> zeros;
    for (int i = 0; i < 3; ++i)
        zeros.push_back(lora_init(3, 4, 1, 2.0, 80 + static_cast<std::uint64_t>(i)));
    Tensor pure = stage3_ffn_delta(x, zeros, user, wl, false);
    Tensor ud = lora_delta(x, user, false);
    CHECK(pure.data() == ud.data());

    // no_group_double_count drops the expert term entirely
    Tensor nogroup = stage3_ffn_delta(x, experts, user, wl, false, nullptr, nullptr, false);
    CHECK(nogroup.data() == ud.data());

    // fixed beta replaces the router
    std::vector<double> fb{0.2, 0.5, 0.3};
    Tensor fixed = stage3_ffn_delta(x, experts, user, wl, false, nullptr, &fb);
    Tensor want = ud.detach();
    for (int m = 0; m < 3; ++m) {
        Tensor d = lora_delta(x, experts[static_cast<std::size_t>(m)], false);
        for (std::size_t i = 0; i < want.data().size(); ++i)
            want.data()[i] += fb[static_cast<std::size_t>(m)] * d.data()[i];
    }
    for (std::size_t i = 0; i < fixed.data().size(); ++i)
        CHECK(fixed.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
}

TEST_CASE("stage3_ffn_delta dense materialization oracle") {
    Rng rng(43);
    const std::int64_t din = 3, dout = 4;
    std::vector<LoraAdapter> experts;
    for (int i = 0; i < 2; ++i) {
        auto e = lora_init(din, dout, 1, 2.0, 90 + static_cast<std::uint64_t>(i));
        e.B = Tensor::randn({din, 1}, rng, 1.0, false);
        experts.push_back(e);
    }
    auto user = lora_init(din, dout, 2, 4.0, 95);
    user.B = Tensor::randn({din, 2}, rng, 1.0, true);
    Tensor wl = Tensor::randn({dout, 2}, rng, 1.0, true);
    Tensor x = Tensor::randn({3, din}, rng, 1.0);

    Tensor got = stage3_ffn_delta(x, experts, user, wl, false);

    auto dense_of = [&](const LoraAdapter& a) {
        std::vector<std::vector<double>> w(static_cast<std::size_t>(din),
                                           std::vector<double>(static_cast<std::size_t>(dout), 0.0));
        double s = a.alpha / a.rank;
        for (std::int64_t i = 0; i < din; ++i)
            for (std::int64_t j = 0; j < dout; ++j)
                for (int r = 0; r < a.rank; ++r)
                    w[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +=
                        s * a.B.at(i, r) * a.A.at(r, j);
        return w;
    };
    auto user_w = dense_of(user);
    std::vector<std::vector<std::vector<double>>> expert_w;
    for (const auto& e : experts)
        expert_w.push_back(dense_of(e));

    double max_diff = 0;
    for (std::int64_t t = 0; t < x.dim(0); ++t) {
        // h_u then beta for this token, by straight-line arithmetic
        std::vector<double> hu(static_cast<std::size_t>(dout), 0.0);
        for (std::int64_t j = 0; j < dout; ++j)
            for (std::int64_t i = 0; i < din; ++i)
                hu[static_cast<std::size_t>(j)] +=
                    x.at(t, i) * user_w[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        std::vector<double> logits(2, 0.0);
        for (int m = 0; m < 2; ++m)
            for (std::int64_t j = 0; j < dout; ++j)
                logits[static_cast<std::size_t>(m)] += hu[static_cast<std::size_t>(j)] * wl.at(j, m);
        auto beta = softmax_ref(logits);

        // materialize the per-token dense update and multiply
        for (std::int64_t j = 0; j < dout; ++j) {
            double want = 0;
            for (std::int64_t i = 0; i < din; ++i) {
                double wij = user_w[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                for (int m = 0; m < 2; ++m)
                    wij += beta[static_cast<std::size_t>(m)] *
                           expert_w[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)]
                                   [static_cast<std::size_t>(j)];
                want += x.at(t, i) * wij;
            }
            max_diff = std::max(max_diff, std::fabs(got.at(t, j) - want));
        }
    }
    CHECK(max_diff < 1e-10);
}

TEST_CASE("stage3 gradient isolation") {
    auto cfg = tiny_config();
    auto bank = init_expert_bank(cfg, 3, 2, 4.0, cfg.d_model, 9);
    Rng rng(8);
    for (auto& layer : bank.layers)
        for (auto& slot : layer.experts)
            for (auto& e : slot)
                e.B = Tensor::randn(e.B.shape(), rng, 0.3, true);
    bank.set_requires_grad(false);
    std::uint64_t before = bank.checksum();

    const auto& experts = bank.layers[0].experts[0]; // layer 0 gate
    auto user = lora_init(cfg.d_model, cfg.d_ff, 2, 4.0, 12);
    user.B = Tensor::randn({cfg.d_model, 2}, rng, 0.5, true);
    Tensor wl = Tensor::randn({cfg.d_ff, 3}, rng, 0.1, true);
    Tensor x = Tensor::randn({4, cfg.d_model}, rng, 1.0);

    Tensor loss = sum_all(stage3_ffn_delta(x, experts, user, wl, false));
    backward(loss);

    CHECK(user.B.has_grad());
    CHECK(user.A.has_grad());
    CHECK(wl.has_grad());
    bool wl_nonzero = false;
    for (double g : wl.grad())
        wl_nonzero = wl_nonzero || g != 0.0;
    CHECK(wl_nonzero);

    for (const auto& t : bank.trainable_tensors())
        CHECK(!t.has_grad());
    CHECK(bank.checksum() == before);
}

TEST_CASE("expert bank init and round trip") {
    auto cfg = tiny_config();
    CHECK_THROWS_AS(init_expert_bank(cfg, 1, 2, 4.0, cfg.d_model, 0), contract_error);

    auto bank = init_expert_bank(cfg, 3, 2, 4.0, cfg.d_model, 123, 0.05);
    REQUIRE(bank.layers.size() == 2);
    for (const auto& layer : bank.layers)
        for (const auto& slot : layer.experts) {
            REQUIRE(slot.size() == 3);
            for (const auto& e : slot) {
                CHECK(e.rank == 2);
                CHECK(e.alpha == 4.0);
                CHECK(e.dropout_p == 0.05);
                CHECK(e.d_in() == slot[0].d_in());
                CHECK(e.d_out() == slot[0].d_out());
            }
        }
    CHECK(bank.layers[0].experts[0][0].d_out() == cfg.d_ff);
    CHECK(bank.layers[0].experts[2][0].d_in() == cfg.d_ff);

    auto bank2 = init_expert_bank(cfg, 3, 2, 4.0, cfg.d_model, 123, 0.05);
    CHECK(bank.checksum() == bank2.checksum());

    Rng rng(2);
    for (auto& layer : bank.layers)
        for (auto& slot : layer.experts)
            for (auto& e : slot)
                e.B = Tensor::randn(e.B.shape(), rng, 0.3, true);

    save_adapter_file("bank_rt_test", pack_expert_bank(bank));
    auto loaded = unpack_expert_bank(load_adapter_file("bank_rt_test"), 0.05);
    CHECK(loaded.k == bank.k);
    CHECK(loaded.d_user == bank.d_user);
    CHECK(loaded.checksum() == bank.checksum());
    std::remove("bank_rt_test.manifest");
    std::remove("bank_rt_test.bin");

    CHECK_THROWS_AS(ffn_slot(Proj::Wq), contract_error);
    CHECK(ffn_slot(Proj::Gate) == 0);
    CHECK(ffn_slot(Proj::Up) == 1);
    CHECK(ffn_slot(Proj::Down) == 2);
}

TEST_CASE("user embedding table") {
    UserEmbeddingTable table(6, 2);
    table.add_user("alice", 5);
    table.add_user("bob", 5);
    CHECK(table.has("alice"));
    CHECK(!table.has("carol"));
    CHECK(table.embedding("alice", 0).shape() == Shape{1, 6});
    CHECK(table.embedding("alice", 0).data() != table.embedding("alice", 1).data());
    CHECK(table.embedding("alice", 0).data() != table.embedding("bob", 0).data());
    CHECK_THROWS_AS(table.embedding("carol", 0), data_error);
    CHECK_THROWS_AS(table.embedding("alice", 7), index_error);
    CHECK_THROWS_AS(table.add_user("alice", 5), contract_error);

    UserEmbeddingTable again(6, 2);
    again.add_user("alice", 5);
    CHECK(again.embedding("alice", 0).data() == table.embedding("alice", 0).data());

    save_adapter_file("emb_rt_test", table.pack());
    auto loaded = UserEmbeddingTable::unpack(load_adapter_file("emb_rt_test"));
    CHECK(loaded.d_user() == 6);
    CHECK(loaded.n_layers() == 2);
    CHECK(loaded.checksum() == table.checksum());
    CHECK(loaded.user_ids() == std::vector<std::string>{"alice", "bob"});
    std::remove("emb_rt_test.manifest");
    std::remove("emb_rt_test.bin");
}

TEST_CASE("elementwise div and sqrt") {
    Tensor a = Tensor::from({3}, {1.0, 4.0, 9.0}, true);
    Tensor b = Tensor::from({3}, {2.0, 4.0, 3.0}, true);
    Tensor q = div(a, b);
    CHECK(q.data() == std::vector<double>{0.5, 1.0, 3.0});
    Tensor r = sqrt_val(a);
    CHECK(r.data() == std::vector<double>{1.0, 2.0, 3.0});

    backward(sum_all(q));
    CHECK(a.grad()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(b.grad()[1] == doctest::Approx(-4.0 / 16.0).epsilon(1e-12));

    Tensor a2 = Tensor::from({3}, {1.0, 4.0, 9.0}, true);
    backward(sum_all(sqrt_val(a2)));
    CHECK(a2.grad()[1] == doctest::Approx(0.25).epsilon(1e-12));

    CHECK_THROWS_AS(div(a, Tensor::zeros({2})), shape_error);
}
