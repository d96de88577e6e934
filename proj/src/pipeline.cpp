#include "proper/pipeline.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

using nlohmann::json;

namespace proper {

namespace {

constexpr Proj kAttnProjs[4] = {Proj::Wq, Proj::Wk, Proj::Wv, Proj::Wo};
constexpr Proj kFfnProjs[3] = {Proj::Gate, Proj::Up, Proj::Down};

Proj proj_from_name(const std::string& name) {
    for (Proj p : {Proj::Wq, Proj::Wk, Proj::Wv, Proj::Wo, Proj::Gate, Proj::Up, Proj::Down})
        if (name == proj_name(p))
            return p;
    throw format_error("unknown projection name " + name);
}

std::pair<int, Proj> parse_attach_key(const std::string& key) {
    auto dotpos = key.find('.');
    if (key.rfind("layer", 0) != 0 || dotpos == std::string::npos)
        throw format_error("bad attachment key " + key);
    int layer = static_cast<int>(std::stoll(key.substr(5, dotpos - 5)));
    return {layer, proj_from_name(key.substr(dotpos + 1))};
}

BackboneWeights clone_weights(const BackboneWeights& w) {
    BackboneWeights out = w;
    auto cp = [](Tensor& t) { t = t.detach(); };
    cp(out.token_embedding);
    cp(out.pos_embedding);
    for (auto& l : out.layers) {
        cp(l.wq);
        cp(l.wk);
        cp(l.wv);
        cp(l.wo);
        cp(l.w_gate);
        cp(l.w_up);
        cp(l.w_down);
        cp(l.norm_attn);
        cp(l.norm_ffn);
    }
    cp(out.final_norm);
    cp(out.head);
    return out;
}

void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.next_below(i)]);
}

struct TrainExample {
    std::string user;
    EncodedExample ex;
};

std::vector<TrainExample> collect_train_examples(const Corpus& corpus, std::int64_t max_len,
                                                 bool skip_test_users) {
    std::vector<TrainExample> out;
    for (const auto& ur : corpus.users) {
        if (skip_test_users && ur.is_test)
            continue;
        for (const auto& rec : train_slice(ur))
            out.push_back({ur.user_id, encode_example(rec.query, rec.response, max_len)});
    }
    return out;
}

AdapterHooks combine_hooks(AdapterHooks a, AdapterHooks b) {
    AdapterHooks h;
    h.delta = [a = std::move(a), b = std::move(b)](int layer, Proj p, const Tensor& x) -> Tensor {
        Tensor da = a.delta ? a.delta(layer, p, x) : Tensor();
        Tensor db = b.delta ? b.delta(layer, p, x) : Tensor();
        if (da.defined() && db.defined())
            return add(da, db);
        return da.defined() ? da : db;
    };
    return h;
}

void append_double(std::vector<double>& sink, double v) { sink.push_back(v); }

void append_stage(std::vector<double>& sink, const StageConfig& s) {
    append_double(sink, s.lr);
    append_double(sink, s.epochs);
    append_double(sink, s.r);
    append_double(sink, s.alpha);
    append_double(sink, s.dropout);
    append_double(sink, s.batch);
}

} // namespace

const char* ablation_name(Ablation a) {
    switch (a) {
    case Ablation::regular_router:
        return "regular_router";
    case Ablation::no_constraint_loss:
        return "no_constraint_loss";
    case Ablation::no_lora_aware_router:
        return "no_lora_aware_router";
    case Ablation::end_to_end:
        return "end_to_end";
    case Ablation::no_group_double_count:
        return "no_group_double_count";
    }
    return "?";
}

Ablation ablation_from_name(const std::string& name) {
    for (Ablation a : {Ablation::regular_router, Ablation::no_constraint_loss,
                       Ablation::no_lora_aware_router, Ablation::end_to_end,
                       Ablation::no_group_double_count})
        if (name == ablation_name(a))
            return a;
    throw config_error("unknown ablation \"" + name +
                       "\"; valid: regular_router, no_constraint_loss, no_lora_aware_router, "
                       "end_to_end, no_group_double_count");
}

void PipelineConfig::validate() const {
    model.validate();
    auto check_stage = [](const StageConfig& s, const char* name) {
        if (s.lr <= 0.0)
            throw config_error(std::string(name) + ": lr must be positive");
        if (s.epochs < 0)
            throw config_error(std::string(name) + ": epochs must be >= 0");
        if (s.r < 1)
            throw config_error(std::string(name) + ": rank must be >= 1");
        if (s.alpha <= 0.0)
            throw config_error(std::string(name) + ": alpha must be positive");
        if (s.dropout < 0.0 || s.dropout >= 1.0)
            throw config_error(std::string(name) + ": dropout must be in [0, 1)");
        if (s.batch < 1)
            throw config_error(std::string(name) + ": batch must be >= 1");
    };
    check_stage(stage1, "stage1");
    check_stage(stage2, "stage2");
    check_stage(stage3, "stage3");
    if (k < 2)
        throw config_error("k must be >= 2");
    if (lambda_c < 0.0)
        throw config_error("lambda_c must be >= 0");
    if (d_user < 0)
        throw config_error("d_user must be >= 0");
    if (jobs < 1)
        throw config_error("jobs must be >= 1");
    if (has(Ablation::end_to_end) &&
        (has(Ablation::no_lora_aware_router) || has(Ablation::no_group_double_count)))
        throw config_error("end_to_end replaces stages 2 and 3 and cannot combine with "
                           "stage-3 ablations");
}

std::uint64_t PipelineConfig::checksum() const {
    std::vector<double> v;
    append_double(v, static_cast<double>(model.vocab_size));
    append_double(v, static_cast<double>(model.d_model));
    append_double(v, static_cast<double>(model.n_layers));
    append_double(v, static_cast<double>(model.n_heads));
    append_double(v, static_cast<double>(model.d_ff));
    append_double(v, static_cast<double>(model.max_seq_len));
    append_double(v, static_cast<double>(model.seed));
    append_stage(v, stage1);
    append_stage(v, stage2);
    append_stage(v, stage3);
    append_double(v, k);
    append_double(v, lambda_c);
    append_double(v, static_cast<double>(d_user));
    append_double(v, cosine_constraint ? 1.0 : 0.0);
    for (Ablation a : {Ablation::regular_router, Ablation::no_constraint_loss,
                       Ablation::no_lora_aware_router, Ablation::end_to_end,
                       Ablation::no_group_double_count})
        append_double(v, has(a) ? 1.0 : 0.0);
    append_double(v, static_cast<double>(seed));
    return proper::checksum(v);
}

std::string attach_key(int layer, Proj p) {
    return "layer" + std::to_string(layer) + "." + proj_name(p);
}

std::vector<Tensor> UserArtifact::trainable_tensors() const {
    std::vector<Tensor> out;
    for (const auto& [_, a] : adapters) {
        out.push_back(a.B);
        out.push_back(a.A);
    }
    for (const auto& [_, t] : w_l)
        out.push_back(t);
    return out;
}

std::uint64_t UserArtifact::checksum() const {
    std::vector<double> all;
    for (const auto& t : trainable_tensors())
        all.insert(all.end(), t.data().begin(), t.data().end());
    return proper::checksum(all);
}

// ---- forward composition ---------------------------------------------------

AdapterHooks adapter_hooks(const std::map<std::string, LoraAdapter>& adapters, bool training,
                           Rng* rng) {
    AdapterHooks h;
    h.delta = [adapters, training, rng](int layer, Proj p, const Tensor& x) -> Tensor {
        auto it = adapters.find(attach_key(layer, p));
        if (it == adapters.end())
            return {};
        return lora_delta(x, it->second, training, rng);
    };
    return h;
}

AdapterHooks stage2_hooks(const ExpertBank& bank, const std::vector<Tensor>& user_emb_per_layer,
                          bool regular_router, bool training, Rng* rng,
                          std::vector<Tensor>* omega_out) {
    if (!regular_router && user_emb_per_layer.size() != bank.layers.size())
        throw contract_error("stage2_hooks: " + std::to_string(user_emb_per_layer.size()) +
                             " user embeddings for " + std::to_string(bank.layers.size()) +
                             " layers");
    auto cache = std::make_shared<std::vector<Tensor>>(bank.layers.size());
    AdapterHooks h;
    h.delta = [bank, user_emb_per_layer, regular_router, training, rng, cache,
               omega_out](int layer, Proj p, const Tensor& x) -> Tensor {
        if (proj_is_attention(p))
            return {};
        const auto& lw = bank.layers[static_cast<std::size_t>(layer)];
        int slot = ffn_slot(p);
        if (slot == 0) {
            // the layer's FFN input reaches the Gate hook first; the routing
            // weights computed here are reused by the Up and Down hooks
            Tensor u = regular_router ? Tensor() : user_emb_per_layer[static_cast<std::size_t>(layer)];
            Tensor omega = user_aware_route(x, u, lw.m_g, lw.m_u, regular_router);
            (*cache)[static_cast<std::size_t>(layer)] = omega;
            if (omega_out) {
                omega_out->resize(bank.layers.size());
                (*omega_out)[static_cast<std::size_t>(layer)] = omega;
            }
        }
        const Tensor& omega = (*cache)[static_cast<std::size_t>(layer)];
        if (!omega.defined())
            throw contract_error("stage2_hooks: no routing weights cached for layer " +
                                 std::to_string(layer));
        return moe_ffn_delta(x, lw.experts[static_cast<std::size_t>(slot)], omega, training, rng);
    };
    return h;
}

AdapterHooks uniform_moe_hooks(const ExpertBank& bank, bool training, Rng* rng) {
    AdapterHooks h;
    h.delta = [bank, training, rng](int layer, Proj p, const Tensor& x) -> Tensor {
        if (proj_is_attention(p))
            return {};
        const auto& lw = bank.layers[static_cast<std::size_t>(layer)];
        const std::int64_t k = bank.k;
        Tensor omega = Tensor::from(
            {x.dim(0), k},
            std::vector<double>(static_cast<std::size_t>(x.dim(0) * k), 1.0 / static_cast<double>(k)));
        return moe_ffn_delta(x, lw.experts[static_cast<std::size_t>(ffn_slot(p))], omega, training,
                             rng);
    };
    return h;
}

AdapterHooks stage3_hooks(const ExpertBank& bank, const UserArtifact& artifact, bool training,
                          Rng* rng, const std::vector<double>* fixed_beta, bool include_group) {
    std::optional<std::vector<double>> beta;
    if (fixed_beta)
        beta = *fixed_beta;
    AdapterHooks h;
    h.delta = [bank, artifact, training, rng, beta, include_group](int layer, Proj p,
                                                                   const Tensor& x) -> Tensor {
        if (proj_is_attention(p))
            return {};
        const auto& lw = bank.layers[static_cast<std::size_t>(layer)];
        std::string key = attach_key(layer, p);
        return stage3_ffn_delta(x, lw.experts[static_cast<std::size_t>(ffn_slot(p))],
                                artifact.adapters.at(key), artifact.w_l.at(key), training, rng,
                                beta ? &*beta : nullptr, include_group);
    };
    return h;
}

Tensor example_ce(const BackboneWeights& weights, const AdapterHooks& hooks,
                  const EncodedExample& ex) {
    const std::int64_t n = static_cast<std::int64_t>(ex.tokens.size());
    if (ex.response_start < 1 || ex.response_start >= n)
        throw contract_error("example_ce: response start " + std::to_string(ex.response_start) +
                             " out of range for " + std::to_string(n) + " tokens");
    Tensor logits = forward(ex.tokens, weights, hooks);
    std::vector<std::int64_t> rows;
    std::vector<int> targets;
    for (std::int64_t i = ex.response_start - 1; i < n - 1; ++i) {
        rows.push_back(i);
        targets.push_back(ex.tokens[static_cast<std::size_t>(i + 1)]);
    }
    return cross_entropy(gather_rows(logits, rows), targets);
}

UserArtifact init_user_artifact(const PipelineConfig& cfg, const std::string& user_id) {
    UserArtifact art;
    for (int l = 0; l < static_cast<int>(cfg.model.n_layers); ++l)
        for (Proj p : kFfnProjs) {
            std::string key = attach_key(l, p);
            std::string tag = "stage3." + user_id + "." + key;
            art.adapters[key] =
                lora_init(proj_d_in(p, cfg.model), proj_d_out(p, cfg.model), cfg.stage3.r,
                          cfg.stage3.alpha, mix_seed(cfg.seed, tag), cfg.stage3.dropout, key);
            Rng rng(mix_seed(cfg.seed, tag + ".w_l"));
            art.w_l[key] = Tensor::randn({proj_d_out(p, cfg.model), cfg.k}, rng, 0.02, true);
        }
    return art;
}

// ---- stages ----------------------------------------------------------------

PipelineState init_pipeline(const PipelineConfig& cfg) {
    cfg.validate();
    PipelineState st;
    st.config = cfg;
    ModelConfig mc = cfg.model;
    if (mc.seed == 0)
        mc.seed = mix_seed(cfg.seed, "backbone");
    st.base = init_backbone(mc);
    st.trace = RouterTrace(0.9);
    st.frozen_checksums["base"] = st.base.weights_checksum();
    return st;
}

namespace {

struct StageTimer {
    PipelineState& st;
    std::string name;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    ~StageTimer() {
        st.stage_seconds[name] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

} // namespace

void train_stage1(PipelineState& st, const Corpus& corpus) {
    StageTimer timer{st, "stage1"};
    const PipelineConfig& cfg = st.config;
    const StageConfig& s1 = cfg.stage1;

    auto examples = collect_train_examples(corpus, cfg.model.max_seq_len, false);
    if (examples.empty())
        throw config_error("stage 1: corpus has no training records");

    std::map<std::string, LoraAdapter> adapters;
    for (int l = 0; l < static_cast<int>(cfg.model.n_layers); ++l)
        for (Proj p : kAttnProjs) {
            std::string key = attach_key(l, p);
            adapters[key] = lora_init(proj_d_in(p, cfg.model), proj_d_out(p, cfg.model), s1.r,
                                      s1.alpha, mix_seed(cfg.seed, "stage1." + key), s1.dropout, key);
        }

    std::vector<Tensor> params;
    for (auto& [_, a] : adapters) {
        params.push_back(a.B);
        params.push_back(a.A);
    }
    AdamW opt(params, AdamConfig{.lr = s1.lr});
    Rng drop_rng(mix_seed(cfg.seed, "stage1.dropout"));
    Rng shuf_rng(mix_seed(cfg.seed, "stage1.shuffle"));
    AdapterHooks hooks = adapter_hooks(adapters, true, &drop_rng);

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;

    std::int64_t step = 0;
    for (int epoch = 0; epoch < s1.epochs; ++epoch) {
        shuffle_indices(order, shuf_rng);
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(s1.batch)) {
            std::size_t n = std::min(order.size() - b, static_cast<std::size_t>(s1.batch));
            Tensor loss;
            for (std::size_t i = 0; i < n; ++i) {
                Tensor ce = example_ce(st.base, hooks, examples[order[b + i]].ex);
                loss = loss.defined() ? add(loss, ce) : ce;
            }
            loss = scale(loss, 1.0 / static_cast<double>(n));
            opt.zero_grad();
            backward(loss);
            opt.step();
            ++step;
            double ce = loss.item();
            st.losses.push_back({1, step, "", ce, 0.0, ce});
        }
    }

    st.w_p = clone_weights(st.base);
    st.stage1_receipts.clear();
    for (const auto& [key, adapter] : adapters) {
        auto [layer, p] = parse_attach_key(key);
        MergeReceipt rec;
        st.w_p.proj(layer, p) = merge(st.base.proj(layer, p), adapter, &rec);
        rec.target = key;
        st.stage1_receipts.push_back(std::move(rec));
    }
    st.stage1_done = true;
    st.frozen_checksums["w_p"] = st.w_p.weights_checksum();
}

void train_stage2(PipelineState& st, const Corpus& corpus) {
    if (!st.stage1_done)
        throw prereq_error("stage 2 requires a completed stage 1");
    StageTimer timer{st, "stage2"};
    const PipelineConfig& cfg = st.config;
    const StageConfig& s2 = cfg.stage2;
    const bool regular = cfg.has(Ablation::regular_router);
    const bool use_constraint = !cfg.has(Ablation::no_constraint_loss);
    const int n_layers = static_cast<int>(cfg.model.n_layers);

    auto examples = collect_train_examples(corpus, cfg.model.max_seq_len, true);
    if (examples.empty())
        throw config_error("stage 2: no training records from non-test users");

    st.bank = init_expert_bank(cfg.model, cfg.k, s2.r, s2.alpha, cfg.user_dim(),
                               mix_seed(cfg.seed, "stage2"), s2.dropout);
    st.user_embeddings = UserEmbeddingTable(cfg.user_dim(), n_layers);
    for (const auto& ur : corpus.users)
        if (!ur.is_test)
            st.user_embeddings.add_user(ur.user_id, mix_seed(cfg.seed, "stage2"));
    st.trace = RouterTrace(0.9);

    std::vector<Tensor> params;
    for (auto& layer : st.bank.layers) {
        for (auto& slot : layer.experts)
            for (auto& e : slot) {
                params.push_back(e.B);
                params.push_back(e.A);
            }
        params.push_back(layer.m_g);
        if (!regular)
            params.push_back(layer.m_u);
    }
    if (!regular)
        for (auto& t : st.user_embeddings.trainable_tensors())
            params.push_back(t);
    AdamW opt(params, AdamConfig{.lr = s2.lr});
    Rng drop_rng(mix_seed(cfg.seed, "stage2.dropout"));
    Rng shuf_rng(mix_seed(cfg.seed, "stage2.shuffle"));

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;

    std::int64_t step = 0;
    for (int epoch = 0; epoch < s2.epochs; ++epoch) {
        shuffle_indices(order, shuf_rng);
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(s2.batch)) {
            std::size_t n = std::min(order.size() - b, static_cast<std::size_t>(s2.batch));
            Tensor loss;
            double ce_acc = 0.0, lc_acc = 0.0;
            std::string row_user = n == 1 ? examples[order[b]].user : "";
            for (std::size_t i = 0; i < n; ++i) {
                const auto& te = examples[order[b + i]];
                std::vector<Tensor> emb;
                if (!regular)
                    for (int l = 0; l < n_layers; ++l)
                        emb.push_back(st.user_embeddings.embedding(te.user, l));
                std::vector<Tensor> omegas;
                AdapterHooks hooks =
                    stage2_hooks(st.bank, emb, regular, true, &drop_rng, &omegas);
                Tensor ce = example_ce(st.w_p, hooks, te.ex);
                ce_acc += ce.item();

                Tensor total = ce;
                std::vector<Tensor> mean_omegas;
                for (int l = 0; l < n_layers; ++l)
                    mean_omegas.push_back(mean_rows(omegas[static_cast<std::size_t>(l)]));
                if (use_constraint && cfg.lambda_c > 0.0) {
                    Tensor lc;
                    for (int l = 0; l < n_layers; ++l) {
                        Tensor c = constraint_loss(st.trace, te.user, mean_omegas[static_cast<std::size_t>(l)],
                                                   l, cfg.cosine_constraint);
                        lc = lc.defined() ? add(lc, c) : c;
                    }
                    lc = scale(lc, 1.0 / static_cast<double>(n_layers));
                    lc_acc += lc.item();
                    total = add(total, scale(lc, cfg.lambda_c));
                }
                for (int l = 0; l < n_layers; ++l)
                    st.trace.update(te.user, l, mean_omegas[static_cast<std::size_t>(l)].data(),
                                    step + 1);
                loss = loss.defined() ? add(loss, total) : total;
            }
            loss = scale(loss, 1.0 / static_cast<double>(n));
            opt.zero_grad();
            backward(loss);
            opt.step();
            ++step;
            double nd = static_cast<double>(n);
            st.losses.push_back({2, step, row_user, ce_acc / nd, lc_acc / nd, loss.item()});
        }
    }

    // merge weights: the traced routing mass, averaged over the users seen
    st.merge_omega.assign(static_cast<std::size_t>(n_layers),
                          std::vector<double>(static_cast<std::size_t>(cfg.k),
                                              1.0 / static_cast<double>(cfg.k)));
    auto traced = st.trace.user_ids();
    if (!traced.empty())
        for (int l = 0; l < n_layers; ++l) {
            std::vector<double> mean(static_cast<std::size_t>(cfg.k), 0.0);
            for (const auto& uid : traced) {
                const auto& w = st.trace.stored(uid, l);
                for (std::size_t i = 0; i < mean.size(); ++i)
                    mean[i] += w[i];
            }
            for (double& m : mean)
                m /= static_cast<double>(traced.size());
            st.merge_omega[static_cast<std::size_t>(l)] = mean;
        }

    st.w_g = clone_weights(st.w_p);
    st.stage2_receipts.clear();
    for (int l = 0; l < n_layers; ++l)
        for (Proj p : kFfnProjs) {
            const auto& experts = st.bank.layers[static_cast<std::size_t>(l)]
                                      .experts[static_cast<std::size_t>(ffn_slot(p))];
            std::vector<std::pair<double, const LoraAdapter*>> weighted;
            for (std::size_t i = 0; i < experts.size(); ++i)
                weighted.emplace_back(st.merge_omega[static_cast<std::size_t>(l)][i], &experts[i]);
            MergeReceipt rec;
            st.w_g.proj(l, p) = weighted_merge(st.w_p.proj(l, p), weighted, &rec);
            rec.target = attach_key(l, p);
            st.stage2_receipts.push_back(std::move(rec));
        }

    st.stage2_done = true;
    st.frozen_checksums["w_g"] = st.w_g.weights_checksum();
    st.frozen_checksums["bank"] = st.bank.checksum();
    st.frozen_checksums["user_embeddings"] = st.user_embeddings.checksum();
}

namespace {

std::vector<double> stage3_fixed_beta(const PipelineState& st, const std::string& user) {
    if (st.trace.has(user))
        return st.trace.mean_omega(user);
    return std::vector<double>(static_cast<std::size_t>(st.config.k),
                               1.0 / static_cast<double>(st.config.k));
}

std::vector<LossRow> train_one_user(const PipelineState& st, const UserRecord& ur,
                                    UserArtifact& art_out) {
    const PipelineConfig& cfg = st.config;
    const StageConfig& s3 = cfg.stage3;
    UserArtifact art = init_user_artifact(cfg, ur.user_id);
    AdamW opt(art.trainable_tensors(), AdamConfig{.lr = s3.lr});
    Rng rng(mix_seed(cfg.seed, "stage3.rng." + ur.user_id));

    std::optional<std::vector<double>> beta;
    if (cfg.has(Ablation::no_lora_aware_router))
        beta = stage3_fixed_beta(st, ur.user_id);
    const bool include_group = !cfg.has(Ablation::no_group_double_count);
    AdapterHooks hooks =
        stage3_hooks(st.bank, art, true, &rng, beta ? &*beta : nullptr, include_group);

    std::vector<EncodedExample> examples;
    for (const auto& rec : train_slice(ur))
        examples.push_back(encode_example(rec.query, rec.response, cfg.model.max_seq_len));

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;

    std::vector<LossRow> rows;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < s3.epochs; ++epoch) {
        shuffle_indices(order, rng);
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(s3.batch)) {
            std::size_t n = std::min(order.size() - b, static_cast<std::size_t>(s3.batch));
            Tensor loss;
            for (std::size_t i = 0; i < n; ++i) {
                Tensor ce = example_ce(st.w_g, hooks, examples[order[b + i]]);
                loss = loss.defined() ? add(loss, ce) : ce;
            }
            loss = scale(loss, 1.0 / static_cast<double>(n));
            opt.zero_grad();
            backward(loss);
            opt.step();
            ++step;
            double ce = loss.item();
            rows.push_back({3, step, ur.user_id, ce, 0.0, ce});
        }
    }
    art_out = std::move(art);
    return rows;
}

} // namespace

void train_stage3(PipelineState& st, const Corpus& corpus) {
    if (!st.stage2_done)
        throw prereq_error("stage 3 requires a completed stage 2");
    StageTimer timer{st, "stage3"};
    st.bank.set_requires_grad(false);

    std::vector<const UserRecord*> jobs;
    st.skipped_users.clear();
    for (const auto& ur : corpus.users) {
        if (train_slice(ur).empty())
            st.skipped_users.push_back(ur.user_id);
        else
            jobs.push_back(&ur);
    }
    std::sort(st.skipped_users.begin(), st.skipped_users.end());

    std::map<std::string, UserArtifact> artifacts;
    std::map<std::string, std::vector<LossRow>> rows;
    if (st.config.jobs <= 1 || jobs.size() <= 1) {
        for (const UserRecord* ur : jobs) {
            UserArtifact art;
            rows[ur->user_id] = train_one_user(st, *ur, art);
            artifacts[ur->user_id] = std::move(art);
        }
    } else {
        std::mutex mu;
        std::atomic<std::size_t> next{0};
        std::exception_ptr first_error;
        auto worker = [&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= jobs.size())
                    return;
                try {
                    UserArtifact art;
                    auto r = train_one_user(st, *jobs[i], art);
                    std::lock_guard<std::mutex> lock(mu);
                    rows[jobs[i]->user_id] = std::move(r);
                    artifacts[jobs[i]->user_id] = std::move(art);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!first_error)
                        first_error = std::current_exception();
                    return;
                }
            }
        };
        std::vector<std::thread> pool;
        int n_threads = std::min<int>(st.config.jobs, static_cast<int>(jobs.size()));
        for (int t = 0; t < n_threads; ++t)
            pool.emplace_back(worker);
        for (auto& t : pool)
            t.join();
        if (first_error)
            std::rethrow_exception(first_error);
    }

    for (auto& [uid, art] : artifacts)
        st.user_artifacts[uid] = std::move(art);
    for (auto& [uid, r] : rows)
        st.losses.insert(st.losses.end(), r.begin(), r.end());
    st.stage3_done = true;
}

namespace {

// joint variant: the expert bank, routers, user embeddings, and per-user FFN
// adapters all train together against CE plus the routing constraint; there
// is no freeze boundary and no merge
void train_end_to_end(PipelineState& st, const Corpus& corpus) {
    StageTimer timer{st, "end_to_end"};
    const PipelineConfig& cfg = st.config;
    const StageConfig& s2 = cfg.stage2;
    const bool regular = cfg.has(Ablation::regular_router);
    const bool use_constraint = !cfg.has(Ablation::no_constraint_loss);
    const int n_layers = static_cast<int>(cfg.model.n_layers);

    auto examples = collect_train_examples(corpus, cfg.model.max_seq_len, false);
    if (examples.empty())
        throw config_error("end_to_end: corpus has no training records");

    st.bank = init_expert_bank(cfg.model, cfg.k, s2.r, s2.alpha, cfg.user_dim(),
                               mix_seed(cfg.seed, "stage2"), s2.dropout);
    st.user_embeddings = UserEmbeddingTable(cfg.user_dim(), n_layers);
    st.trace = RouterTrace(0.9);
    st.skipped_users.clear();
    for (const auto& ur : corpus.users) {
        st.user_embeddings.add_user(ur.user_id, mix_seed(cfg.seed, "stage2"));
        st.user_artifacts[ur.user_id] = init_user_artifact(cfg, ur.user_id);
    }

    std::vector<Tensor> params = st.bank.trainable_tensors();
    for (auto& t : st.user_embeddings.trainable_tensors())
        params.push_back(t);
    for (auto& [_, art] : st.user_artifacts)
        for (auto& [key, a] : art.adapters) {
            params.push_back(a.B);
            params.push_back(a.A);
        }
    AdamW opt(params, AdamConfig{.lr = s2.lr});
    Rng drop_rng(mix_seed(cfg.seed, "e2e.dropout"));
    Rng shuf_rng(mix_seed(cfg.seed, "e2e.shuffle"));

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;

    std::int64_t step = 0;
    for (int epoch = 0; epoch < s2.epochs; ++epoch) {
        shuffle_indices(order, shuf_rng);
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(s2.batch)) {
            std::size_t n = std::min(order.size() - b, static_cast<std::size_t>(s2.batch));
            Tensor loss;
            double ce_acc = 0.0, lc_acc = 0.0;
            std::string row_user = n == 1 ? examples[order[b]].user : "";
            for (std::size_t i = 0; i < n; ++i) {
                const auto& te = examples[order[b + i]];
                std::vector<Tensor> emb;
                if (!regular)
                    for (int l = 0; l < n_layers; ++l)
                        emb.push_back(st.user_embeddings.embedding(te.user, l));
                std::vector<Tensor> omegas;
                AdapterHooks hooks = combine_hooks(
                    stage2_hooks(st.bank, emb, regular, true, &drop_rng, &omegas),
                    adapter_hooks(st.user_artifacts.at(te.user).adapters, true, &drop_rng));
                Tensor ce = example_ce(st.w_p, hooks, te.ex);
                ce_acc += ce.item();
                Tensor total = ce;
                std::vector<Tensor> mean_omegas;
                for (int l = 0; l < n_layers; ++l)
                    mean_omegas.push_back(mean_rows(omegas[static_cast<std::size_t>(l)]));
                if (use_constraint && cfg.lambda_c > 0.0) {
                    Tensor lc;
                    for (int l = 0; l < n_layers; ++l) {
                        Tensor c = constraint_loss(st.trace, te.user,
                                                   mean_omegas[static_cast<std::size_t>(l)], l,
                                                   cfg.cosine_constraint);
                        lc = lc.defined() ? add(lc, c) : c;
                    }
                    lc = scale(lc, 1.0 / static_cast<double>(n_layers));
                    lc_acc += lc.item();
                    total = add(total, scale(lc, cfg.lambda_c));
                }
                for (int l = 0; l < n_layers; ++l)
                    st.trace.update(te.user, l, mean_omegas[static_cast<std::size_t>(l)].data(),
                                    step + 1);
                loss = loss.defined() ? add(loss, total) : total;
            }
            loss = scale(loss, 1.0 / static_cast<double>(n));
            opt.zero_grad();
            backward(loss);
            opt.step();
            ++step;
            double nd = static_cast<double>(n);
            st.losses.push_back({2, step, row_user, ce_acc / nd, lc_acc / nd, loss.item()});
        }
    }

    st.merge_omega.clear();
    st.w_g = clone_weights(st.w_p);
    st.stage2_done = true;
    st.stage3_done = true;
    st.frozen_checksums["w_g"] = st.w_g.weights_checksum();
    st.frozen_checksums["bank"] = st.bank.checksum();
    st.frozen_checksums["user_embeddings"] = st.user_embeddings.checksum();
}

} // namespace

void run_pipeline(PipelineState& st, const Corpus& corpus) {
    train_stage1(st, corpus);
    if (st.config.has(Ablation::end_to_end)) {
        train_end_to_end(st, corpus);
        return;
    }
    train_stage2(st, corpus);
    train_stage3(st, corpus);
}

void verify_freeze(const PipelineState& st) {
    auto check = [&](const std::string& key, std::uint64_t current) {
        auto it = st.frozen_checksums.find(key);
        if (it != st.frozen_checksums.end() && it->second != current)
            throw contract_error("freeze violated: " + key + " changed after it was frozen");
    };
    check("base", st.base.weights_checksum());
    if (st.stage1_done)
        check("w_p", st.w_p.weights_checksum());
    if (st.stage2_done) {
        check("w_g", st.w_g.weights_checksum());
        check("bank", st.bank.checksum());
        check("user_embeddings", st.user_embeddings.checksum());
    }
}

// ---- evaluation ------------------------------------------------------------

namespace {

std::string decode_response(const std::vector<int>& out, std::size_t prompt_len) {
    std::vector<int> resp;
    for (std::size_t i = prompt_len; i < out.size(); ++i) {
        if (out[i] == kEosToken)
            break;
        resp.push_back(out[i]);
    }
    return decode_tokens(resp);
}

} // namespace

MetricReport evaluate_stages(const PipelineState& st, const Corpus& corpus) {
    const PipelineConfig& cfg = st.config;
    // every user's last record is held out from all training stages, so the
    // evaluation pool is the full population: stage 2 sees seen-user routing
    // and cold users in one number
    std::vector<const UserRecord*> eval_users;
    for (const auto& ur : corpus.users)
        if (!ur.history.empty())
            eval_users.push_back(&ur);
    if (eval_users.empty())
        throw data_error("evaluate_stages: no users with history to evaluate");

    const bool e2e = cfg.has(Ablation::end_to_end);
    const bool regular = cfg.has(Ablation::regular_router);
    const int n_layers = static_cast<int>(cfg.model.n_layers);

    struct StageSetup {
        std::string name;
        const BackboneWeights* weights;
    };
    std::vector<StageSetup> setups;
    if (st.stage1_done)
        setups.push_back({"stage1", &st.w_p});
    if (st.stage2_done && !e2e)
        setups.push_back({"stage2", &st.w_p});
    if (st.stage3_done && !e2e)
        setups.push_back({"stage3", &st.w_g});
    if (st.stage2_done && e2e)
        setups.push_back({"end_to_end", &st.w_p});
    if (setups.empty())
        throw prereq_error("evaluate_stages: no completed stages");

    MetricReport report;
    report.seed = cfg.seed;
    report.config_checksum = cfg.checksum();
    for (const auto& setup : setups) {
        std::vector<std::string> preds, golds;
        double ce_sum = 0.0;
        std::size_t scored = 0;
        for (const UserRecord* ur : eval_users) {
            const std::string& uid = ur->user_id;
            AdapterHooks hooks;
            if (setup.name == "stage2") {
                if (regular) {
                    hooks = stage2_hooks(st.bank, {}, true, false, nullptr);
                } else {
                    // users unseen in stage 2 route with a zero embedding: the
                    // user term becomes exactly uniform and the text term is kept
                    std::vector<Tensor> emb;
                    for (int l = 0; l < n_layers; ++l)
                        emb.push_back(st.user_embeddings.has(uid)
                                          ? st.user_embeddings.embedding(uid, l)
                                          : Tensor::zeros({1, cfg.user_dim()}));
                    hooks = stage2_hooks(st.bank, emb, false, false, nullptr);
                }
            } else if (setup.name == "stage3") {
                auto it = st.user_artifacts.find(uid);
                if (it == st.user_artifacts.end())
                    continue;
                std::optional<std::vector<double>> beta;
                if (cfg.has(Ablation::no_lora_aware_router))
                    beta = stage3_fixed_beta(st, uid);
                hooks = stage3_hooks(st.bank, it->second, false, nullptr,
                                     beta ? &*beta : nullptr,
                                     !cfg.has(Ablation::no_group_double_count));
            } else if (setup.name == "end_to_end") {
                auto it = st.user_artifacts.find(uid);
                if (it == st.user_artifacts.end())
                    continue;
                std::vector<Tensor> emb;
                if (!regular)
                    for (int l = 0; l < n_layers; ++l)
                        emb.push_back(st.user_embeddings.embedding(uid, l));
                hooks = combine_hooks(stage2_hooks(st.bank, emb, regular, false, nullptr),
                                      adapter_hooks(it->second.adapters, false, nullptr));
            }

            const RecordEntry& rec = held_out(*ur);
            EncodedExample ex = encode_example(rec.query, rec.response, cfg.model.max_seq_len);
            double ce = example_ce(*setup.weights, hooks, ex).item();
            report.per_user_ce[setup.name][uid] = ce;
            ce_sum += ce;
            ++scored;

            std::vector<int> prompt(ex.tokens.begin(),
                                    ex.tokens.begin() + static_cast<std::ptrdiff_t>(ex.response_start));
            int max_new = static_cast<int>(cfg.model.max_seq_len) - static_cast<int>(prompt.size());
            auto out = greedy_decode(prompt, *setup.weights, hooks, max_new);
            preds.push_back(decode_response(out, prompt.size()));
            golds.push_back(rec.response);
        }
        if (scored == 0)
            continue;
        auto metrics = score_task(corpus.task, preds, golds);
        metrics["ce"] = ce_sum / static_cast<double>(scored);
        report.per_stage[setup.name] = std::move(metrics);
        report.stages.push_back(setup.name);
    }
    return report;
}

// ---- persistence -----------------------------------------------------------

namespace {

json stage_to_json(const StageConfig& s) {
    return json{{"lr", s.lr},       {"epochs", s.epochs},   {"r", s.r},
                {"alpha", s.alpha}, {"dropout", s.dropout}, {"batch", s.batch}};
}

StageConfig stage_from_json(const json& j, const StageConfig& defaults) {
    StageConfig s = defaults;
    s.lr = j.value("lr", s.lr);
    s.epochs = j.value("epochs", s.epochs);
    s.r = j.value("r", s.r);
    s.alpha = j.value("alpha", s.alpha);
    s.dropout = j.value("dropout", s.dropout);
    s.batch = j.value("batch", s.batch);
    return s;
}

json pipeline_config_to_json(const PipelineConfig& cfg) {
    json j;
    j["model"] = {{"vocab_size", cfg.model.vocab_size}, {"d_model", cfg.model.d_model},
                  {"n_layers", cfg.model.n_layers},     {"n_heads", cfg.model.n_heads},
                  {"d_ff", cfg.model.d_ff},             {"max_seq_len", cfg.model.max_seq_len},
                  {"seed", cfg.model.seed}};
    j["stage1"] = stage_to_json(cfg.stage1);
    j["stage2"] = stage_to_json(cfg.stage2);
    j["stage3"] = stage_to_json(cfg.stage3);
    j["k"] = cfg.k;
    j["lambda_c"] = cfg.lambda_c;
    j["d_user"] = cfg.d_user;
    j["cosine_constraint"] = cfg.cosine_constraint;
    std::vector<std::string> abl;
    for (Ablation a : cfg.ablations)
        abl.push_back(ablation_name(a));
    j["ablations"] = abl;
    j["jobs"] = cfg.jobs;
    j["seed"] = cfg.seed;
    return j;
}

PipelineConfig pipeline_config_from_json(const json& j) {
    PipelineConfig cfg;
    if (j.contains("model")) {
        const json& m = j.at("model");
        cfg.model.vocab_size = m.value("vocab_size", cfg.model.vocab_size);
        cfg.model.d_model = m.value("d_model", cfg.model.d_model);
        cfg.model.n_layers = m.value("n_layers", cfg.model.n_layers);
        cfg.model.n_heads = m.value("n_heads", cfg.model.n_heads);
        cfg.model.d_ff = m.value("d_ff", cfg.model.d_ff);
        cfg.model.max_seq_len = m.value("max_seq_len", cfg.model.max_seq_len);
        cfg.model.seed = m.value("seed", cfg.model.seed);
    }
    if (j.contains("stage1"))
        cfg.stage1 = stage_from_json(j.at("stage1"), cfg.stage1);
    if (j.contains("stage2"))
        cfg.stage2 = stage_from_json(j.at("stage2"), cfg.stage2);
    if (j.contains("stage3"))
        cfg.stage3 = stage_from_json(j.at("stage3"), cfg.stage3);
    cfg.k = j.value("k", cfg.k);
    cfg.lambda_c = j.value("lambda_c", cfg.lambda_c);
    cfg.d_user = j.value("d_user", cfg.d_user);
    cfg.cosine_constraint = j.value("cosine_constraint", cfg.cosine_constraint);
    if (j.contains("ablations"))
        for (const auto& name : j.at("ablations"))
            cfg.ablations.insert(ablation_from_name(name.get<std::string>()));
    cfg.jobs = j.value("jobs", cfg.jobs);
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

std::string fmt17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_losses_csv(const std::string& path, const std::vector<LossRow>& losses) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw format_error("cannot open " + path + " for writing");
    out << "stage,step,user_id,ce,constraint,total\n";
    for (const auto& row : losses)
        out << row.stage << "," << row.step << "," << row.user << "," << fmt17(row.ce) << ","
            << fmt17(row.lc) << "," << fmt17(row.total) << "\n";
}

std::vector<AdapterFileEntry> pack_user_artifacts(const std::map<std::string, UserArtifact>& arts) {
    std::vector<AdapterFileEntry> entries;
    auto push = [&](const std::string& name, const std::string& target, const Tensor& t, int rank,
                    double alpha) {
        AdapterFileEntry e;
        e.name = name;
        e.stage = 3;
        e.target = target;
        e.rank = rank;
        e.alpha = alpha;
        e.shape = t.shape();
        e.values = t.data();
        entries.push_back(std::move(e));
    };
    for (const auto& [uid, art] : arts) {
        if (uid.find('/') != std::string::npos)
            throw format_error("user id may not contain '/': " + uid);
        for (const auto& [key, a] : art.adapters) {
            push(uid + "/" + key + "/B", key, a.B, a.rank, a.alpha);
            push(uid + "/" + key + "/A", key, a.A, a.rank, a.alpha);
        }
        for (const auto& [key, t] : art.w_l)
            push(uid + "/" + key + "/w_l", key, t, 0, 0.0);
    }
    return entries;
}

std::map<std::string, UserArtifact> unpack_user_artifacts(
    const std::vector<AdapterFileEntry>& entries, double dropout_p) {
    std::map<std::string, UserArtifact> arts;
    for (const auto& e : entries) {
        auto p1 = e.name.find('/');
        auto p2 = e.name.rfind('/');
        if (p1 == std::string::npos || p2 == p1)
            throw format_error("unexpected artifact entry name " + e.name);
        std::string uid = e.name.substr(0, p1);
        std::string key = e.name.substr(p1 + 1, p2 - p1 - 1);
        std::string part = e.name.substr(p2 + 1);
        UserArtifact& art = arts[uid];
        if (part == "w_l") {
            art.w_l[key] = Tensor::from(e.shape, e.values, true);
        } else if (part == "B" || part == "A") {
            LoraAdapter& a = art.adapters[key];
            a.rank = e.rank;
            a.alpha = e.alpha;
            a.dropout_p = dropout_p;
            a.target = key;
            (part == "B" ? a.B : a.A) = Tensor::from(e.shape, e.values, true);
        } else {
            throw format_error("unexpected artifact entry name " + e.name);
        }
    }
    for (const auto& [uid, art] : arts)
        for (const auto& [key, a] : art.adapters)
            if (!a.B.defined() || !a.A.defined())
                throw format_error("incomplete artifact adapter " + uid + "/" + key);
    return arts;
}

json receipts_to_json(const std::vector<MergeReceipt>& receipts) {
    json arr = json::array();
    for (const auto& r : receipts)
        arr.push_back({{"target", r.target},
                       {"pre_checksum", r.pre_checksum},
                       {"post_checksum", r.post_checksum},
                       {"scale", r.scale}});
    return arr;
}

std::vector<MergeReceipt> receipts_from_json(const json& arr) {
    std::vector<MergeReceipt> out;
    for (const auto& j : arr) {
        MergeReceipt r;
        r.target = j.value("target", "");
        r.pre_checksum = j.value("pre_checksum", "");
        r.post_checksum = j.value("post_checksum", "");
        r.scale = j.value("scale", 0.0);
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace

void save_pipeline(const PipelineState& st, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    json man;
    man["config"] = pipeline_config_to_json(st.config);
    man["stage1_done"] = st.stage1_done;
    man["stage2_done"] = st.stage2_done;
    man["stage3_done"] = st.stage3_done;
    man["skipped_users"] = st.skipped_users;
    json frozen;
    for (const auto& [key, v] : st.frozen_checksums)
        frozen[key] = v;
    man["frozen_checksums"] = frozen;
    man["merge_omega"] = st.merge_omega;
    man["stage1_receipts"] = receipts_to_json(st.stage1_receipts);
    man["stage2_receipts"] = receipts_to_json(st.stage2_receipts);
    man["trace_decay"] = st.trace.decay();
    json ema;
    for (const auto& [uid, layers] : st.trace.snapshot()) {
        json lj;
        for (const auto& [layer, omega] : layers)
            lj[std::to_string(layer)] = omega;
        ema[uid] = lj;
    }
    man["trace_ema"] = ema;

    std::ofstream mf(dir + "/manifest.json", std::ios::binary);
    if (!mf)
        throw format_error("cannot open " + dir + "/manifest.json for writing");
    mf << man.dump(2) << "\n";

    save_checkpoint(dir + "/base", st.base);
    if (st.stage1_done)
        save_checkpoint(dir + "/w_p", st.w_p);
    if (st.stage2_done) {
        save_checkpoint(dir + "/w_g", st.w_g);
        save_adapter_file(dir + "/bank", pack_expert_bank(st.bank));
        save_adapter_file(dir + "/user_embeddings", st.user_embeddings.pack());
    }
    if (st.stage3_done)
        save_adapter_file(dir + "/user_artifacts", pack_user_artifacts(st.user_artifacts));

    write_losses_csv(dir + "/losses.csv", st.losses);
    st.trace.write_csv(dir + "/trace.csv");

    // the only file carrying wall-clock values; everything else is
    // byte-reproducible for a fixed config and seed
    json timings;
    for (const auto& [name, sec] : st.stage_seconds)
        timings[name] = sec;
    std::ofstream tf(dir + "/timings.json", std::ios::binary);
    tf << timings.dump(2) << "\n";
}

PipelineState load_pipeline(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf)
        throw prereq_error("load_pipeline: missing manifest " + dir + "/manifest.json");
    json man;
    try {
        man = json::parse(mf);
    } catch (const json::parse_error& e) {
        throw format_error("load_pipeline: bad manifest: " + std::string(e.what()));
    }

    PipelineState st;
    st.config = pipeline_config_from_json(man.at("config"));
    st.stage1_done = man.value("stage1_done", false);
    st.stage2_done = man.value("stage2_done", false);
    st.stage3_done = man.value("stage3_done", false);
    st.skipped_users = man.value("skipped_users", std::vector<std::string>{});
    if (man.contains("frozen_checksums"))
        for (const auto& [key, v] : man.at("frozen_checksums").items())
            st.frozen_checksums[key] = v.get<std::uint64_t>();
    if (man.contains("merge_omega"))
        st.merge_omega = man.at("merge_omega").get<std::vector<std::vector<double>>>();
    st.stage1_receipts = receipts_from_json(man.value("stage1_receipts", json::array()));
    st.stage2_receipts = receipts_from_json(man.value("stage2_receipts", json::array()));

    st.trace = RouterTrace(man.value("trace_decay", 0.9));
    if (man.contains("trace_ema")) {
        std::map<std::string, std::map<int, std::vector<double>>> ema;
        for (const auto& [uid, layers] : man.at("trace_ema").items())
            for (const auto& [layer, omega] : layers.items())
                ema[uid][std::stoi(layer)] = omega.get<std::vector<double>>();
        st.trace.restore(std::move(ema));
    }

    st.base = load_checkpoint(dir + "/base");
    if (st.stage1_done)
        st.w_p = load_checkpoint(dir + "/w_p");
    if (st.stage2_done) {
        st.w_g = load_checkpoint(dir + "/w_g");
        st.bank = unpack_expert_bank(load_adapter_file(dir + "/bank"), st.config.stage2.dropout);
        st.user_embeddings = UserEmbeddingTable::unpack(load_adapter_file(dir + "/user_embeddings"));
    }
    if (st.stage3_done)
        st.user_artifacts = unpack_user_artifacts(load_adapter_file(dir + "/user_artifacts"),
                                                  st.config.stage3.dropout);
    return st;
}

// ---- run configuration -----------------------------------------------------

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw format_error("run config: " + std::string(e.what()));
    }
    RunConfig cfg;
    if (j.contains("pipeline"))
        cfg.pipeline = pipeline_config_from_json(j.at("pipeline"));
    cfg.synthetic = j.value("synthetic", cfg.synthetic);
    if (j.contains("data"))
        cfg.data = spec_from_json(j.at("data").dump());
    cfg.jsonl_path = j.value("jsonl_path", cfg.jsonl_path);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    if (!cfg.synthetic && cfg.jsonl_path.empty())
        throw config_error("run config: jsonl_path required when synthetic is false");
    return cfg;
}

RunConfig run_config_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw config_error("run config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return run_config_from_json(ss.str());
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["pipeline"] = pipeline_config_to_json(cfg.pipeline);
    j["synthetic"] = cfg.synthetic;
    j["data"] = json::parse(spec_to_json(cfg.data));
    j["jsonl_path"] = cfg.jsonl_path;
    j["out_dir"] = cfg.out_dir;
    return j.dump(2) + "\n";
}

Corpus load_run_corpus(const RunConfig& cfg) {
    if (cfg.synthetic) {
        SyntheticSpec spec = cfg.data;
        if (spec.seed == 0)
            spec.seed = mix_seed(cfg.pipeline.seed, "data");
        return generate(spec);
    }
    return load_jsonl(cfg.jsonl_path);
}

std::map<std::string, MetricReport> run_ablation(const RunConfig& cfg,
                                                 const std::vector<std::string>& names) {
    std::vector<std::string> todo = names;
    if (todo.empty())
        todo.push_back("");
    Corpus corpus = load_run_corpus(cfg);
    std::map<std::string, MetricReport> out;
    for (const auto& name : todo) {
        RunConfig rc = cfg;
        rc.pipeline.ablations.clear();
        if (!name.empty())
            rc.pipeline.ablations.insert(ablation_from_name(name));
        rc.pipeline.validate();
        PipelineState st = init_pipeline(rc.pipeline);
        run_pipeline(st, corpus);
        verify_freeze(st);
        save_pipeline(st, rc.out_dir + "/" + (name.empty() ? "baseline" : name));
        out[name] = evaluate_stages(st, corpus);
    }
    return out;
}

} // namespace proper
