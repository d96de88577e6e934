#include "proper/routing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace proper {

namespace {

constexpr const char* kSlotNames[3] = {"gate", "up", "down"};

Proj slot_proj(int slot) {
    switch (slot) {
    case 0:
        return Proj::Gate;
    case 1:
        return Proj::Up;
    default:
        return Proj::Down;
    }
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, sep))
        out.push_back(part);
    return out;
}

void append_tensor(std::vector<double>& sink, const Tensor& t) {
    sink.insert(sink.end(), t.data().begin(), t.data().end());
}

void check_simplex(const std::vector<double>& v, const std::string& where, double tol) {
    double sum = 0.0;
    for (double x : v) {
        if (x < -tol)
            throw contract_error(where + ": negative router weight");
        sum += x;
    }
    if (std::fabs(sum - 1.0) > tol)
        throw contract_error(where + ": router weights sum to " + std::to_string(sum));
}

} // namespace

int ffn_slot(Proj p) {
    switch (p) {
    case Proj::Gate:
        return 0;
    case Proj::Up:
        return 1;
    case Proj::Down:
        return 2;
    default:
        throw contract_error(std::string("ffn_slot: ") + proj_name(p) +
                             " is not an FFN projection");
    }
}

std::vector<Tensor> ExpertBank::trainable_tensors() const {
    std::vector<Tensor> out;
    for (const auto& layer : layers) {
        for (const auto& slot : layer.experts)
            for (const auto& e : slot) {
                out.push_back(e.B);
                out.push_back(e.A);
            }
        out.push_back(layer.m_g);
        out.push_back(layer.m_u);
    }
    return out;
}

void ExpertBank::set_requires_grad(bool v) {
    for (auto& t : trainable_tensors())
        t.set_requires_grad(v);
}

std::uint64_t ExpertBank::checksum() const {
    std::vector<double> all;
    for (const auto& t : trainable_tensors())
        append_tensor(all, t);
    return proper::checksum(all);
}

ExpertBank init_expert_bank(const ModelConfig& cfg, int k, int r, double alpha,
                            std::int64_t d_user, std::uint64_t seed, double dropout_p) {
    if (k < 2)
        throw contract_error("init_expert_bank: k must be >= 2, got " + std::to_string(k));
    if (d_user < 1)
        throw contract_error("init_expert_bank: d_user must be positive");
    ExpertBank bank;
    bank.k = k;
    bank.d_user = d_user;
    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        ExpertBank::Layer layer;
        std::string prefix = "bank.layer" + std::to_string(l) + ".";
        for (int s = 0; s < 3; ++s) {
            Proj p = slot_proj(s);
            std::string target = "layer" + std::to_string(l) + "." + kSlotNames[s];
            for (int i = 0; i < k; ++i)
                layer.experts[static_cast<std::size_t>(s)].push_back(
                    lora_init(proj_d_in(p, cfg), proj_d_out(p, cfg), r, alpha,
                              mix_seed(seed, prefix + kSlotNames[s] + ".expert" +
                                                 std::to_string(i)),
                              dropout_p, target));
        }
        Rng rg(mix_seed(seed, prefix + "m_g"));
        layer.m_g = Tensor::randn({cfg.d_model, k}, rg, 0.02, true);
        Rng ru(mix_seed(seed, prefix + "m_u"));
        layer.m_u = Tensor::randn({d_user, k}, ru, 0.02, true);
        bank.layers.push_back(std::move(layer));
    }
    return bank;
}

std::vector<AdapterFileEntry> pack_expert_bank(const ExpertBank& bank) {
    std::vector<AdapterFileEntry> entries;
    auto push_tensor = [&](const std::string& name, const std::string& target,
                           const Tensor& t, int rank, double alpha) {
        AdapterFileEntry e;
        e.name = name;
        e.stage = 2;
        e.target = target;
        e.rank = rank;
        e.alpha = alpha;
        e.shape = t.shape();
        e.values = t.data();
        entries.push_back(std::move(e));
    };
    for (std::size_t l = 0; l < bank.layers.size(); ++l) {
        const auto& layer = bank.layers[l];
        std::string lp = "layer" + std::to_string(l) + ".";
        for (int s = 0; s < 3; ++s)
            for (std::size_t i = 0; i < layer.experts[static_cast<std::size_t>(s)].size(); ++i) {
                const auto& e = layer.experts[static_cast<std::size_t>(s)][i];
                std::string base = lp + kSlotNames[s] + ".expert" + std::to_string(i);
                push_tensor(base + ".B", e.target, e.B, e.rank, e.alpha);
                push_tensor(base + ".A", e.target, e.A, e.rank, e.alpha);
            }
        push_tensor(lp + "m_g", "router", layer.m_g, 0, 0.0);
        push_tensor(lp + "m_u", "router", layer.m_u, 0, 0.0);
    }
    return entries;
}

ExpertBank unpack_expert_bank(const std::vector<AdapterFileEntry>& entries, double dropout_p) {
    ExpertBank bank;
    std::int64_t n_layers = 0;
    for (const auto& e : entries) {
        auto parts = split(e.name, '.');
        if (parts.empty() || parts[0].rfind("layer", 0) != 0)
            throw format_error("unpack_expert_bank: unexpected entry name " + e.name);
        n_layers = std::max(n_layers, static_cast<std::int64_t>(std::stoll(parts[0].substr(5))) + 1);
    }
    bank.layers.resize(static_cast<std::size_t>(n_layers));

    std::map<std::string, LoraAdapter> partial; // keyed by layer.slot.expertN
    for (const auto& e : entries) {
        auto parts = split(e.name, '.');
        std::size_t l = static_cast<std::size_t>(std::stoll(parts[0].substr(5)));
        if (parts.size() == 2 && (parts[1] == "m_g" || parts[1] == "m_u")) {
            Tensor t = Tensor::from(e.shape, e.values, true);
            if (parts[1] == "m_g")
                bank.layers[l].m_g = t;
            else {
                bank.layers[l].m_u = t;
                bank.d_user = e.shape[0];
            }
            bank.k = static_cast<int>(e.shape[1]);
            continue;
        }
        if (parts.size() != 4)
            throw format_error("unpack_expert_bank: unexpected entry name " + e.name);
        std::string key = parts[0] + "." + parts[1] + "." + parts[2];
        auto& a = partial[key];
        a.rank = e.rank;
        a.alpha = e.alpha;
        a.dropout_p = dropout_p;
        a.target = e.target;
        if (parts[3] == "B")
            a.B = Tensor::from(e.shape, e.values, true);
        else if (parts[3] == "A")
            a.A = Tensor::from(e.shape, e.values, true);
        else
            throw format_error("unpack_expert_bank: unexpected entry name " + e.name);
    }
    for (auto& [key, a] : partial) {
        if (!a.B.defined() || !a.A.defined())
            throw format_error("unpack_expert_bank: incomplete adapter " + key);
        auto parts = split(key, '.');
        std::size_t l = static_cast<std::size_t>(std::stoll(parts[0].substr(5)));
        int slot = parts[1] == "gate" ? 0 : parts[1] == "up" ? 1 : 2;
        auto& vec = bank.layers[l].experts[static_cast<std::size_t>(slot)];
        std::size_t idx = static_cast<std::size_t>(std::stoll(parts[2].substr(6)));
        if (vec.size() <= idx)
            vec.resize(idx + 1);
        vec[idx] = a;
    }
    return bank;
}

void UserEmbeddingTable::add_user(const std::string& id, std::uint64_t seed) {
    if (table_.count(id))
        throw contract_error("add_user: duplicate user " + id);
    std::vector<Tensor> per_layer;
    for (int l = 0; l < n_layers_; ++l) {
        Rng rng(mix_seed(seed, "user_emb." + id + ".layer" + std::to_string(l)));
        per_layer.push_back(Tensor::randn({1, d_user_}, rng, 1.0, true));
    }
    table_[id] = std::move(per_layer);
}

const Tensor& UserEmbeddingTable::embedding(const std::string& id, int layer) const {
    auto it = table_.find(id);
    if (it == table_.end())
        throw data_error("user embedding lookup: unknown user " + id);
    if (layer < 0 || layer >= n_layers_)
        throw index_error("user embedding lookup: layer " + std::to_string(layer) +
                          " out of range");
    return it->second[static_cast<std::size_t>(layer)];
}

Tensor& UserEmbeddingTable::embedding(const std::string& id, int layer) {
    return const_cast<Tensor&>(static_cast<const UserEmbeddingTable*>(this)->embedding(id, layer));
}

std::vector<std::string> UserEmbeddingTable::user_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, _] : table_)
        ids.push_back(id);
    return ids;
}

std::vector<Tensor> UserEmbeddingTable::trainable_tensors() const {
    std::vector<Tensor> out;
    for (const auto& [_, per_layer] : table_)
        for (const auto& t : per_layer)
            out.push_back(t);
    return out;
}

std::uint64_t UserEmbeddingTable::checksum() const {
    std::vector<double> all;
    for (const auto& [_, per_layer] : table_)
        for (const auto& t : per_layer)
            append_tensor(all, t);
    return proper::checksum(all);
}

std::vector<AdapterFileEntry> UserEmbeddingTable::pack() const {
    std::vector<AdapterFileEntry> entries;
    for (const auto& [id, per_layer] : table_)
        for (std::size_t l = 0; l < per_layer.size(); ++l) {
            AdapterFileEntry e;
            e.name = "user_emb." + id + ".layer" + std::to_string(l);
            e.stage = 2;
            e.target = "user_embedding";
            e.shape = per_layer[l].shape();
            e.values = per_layer[l].data();
            entries.push_back(std::move(e));
        }
    return entries;
}

UserEmbeddingTable UserEmbeddingTable::unpack(const std::vector<AdapterFileEntry>& entries) {
    UserEmbeddingTable table;
    for (const auto& e : entries) {
        auto parts = split(e.name, '.');
        if (parts.size() != 3 || parts[0] != "user_emb" || parts[2].rfind("layer", 0) != 0)
            throw format_error("UserEmbeddingTable::unpack: unexpected entry name " + e.name);
        int layer = static_cast<int>(std::stoll(parts[2].substr(5)));
        table.d_user_ = e.shape[1];
        table.n_layers_ = std::max(table.n_layers_, layer + 1);
        auto& per_layer = table.table_[parts[1]];
        if (per_layer.size() <= static_cast<std::size_t>(layer))
            per_layer.resize(static_cast<std::size_t>(layer) + 1);
        per_layer[static_cast<std::size_t>(layer)] = Tensor::from(e.shape, e.values, true);
    }
    return table;
}

Tensor user_aware_route(const Tensor& x, const Tensor& u, const Tensor& m_g, const Tensor& m_u,
                        bool regular) {
    if (x.ndim() != 2 || x.dim(1) != m_g.dim(0))
        throw shape_error("user_aware_route: x " + shape_str(x.shape()) + " vs M_g " +
                          shape_str(m_g.shape()));
    Tensor sg = softmax(matmul(x, m_g));
    if (regular)
        return sg;
    if (u.ndim() != 2 || u.dim(0) != 1 || u.dim(1) != m_u.dim(0))
        throw shape_error("user_aware_route: u " + shape_str(u.shape()) + " vs M_u " +
                          shape_str(m_u.shape()));
    if (m_g.dim(1) != m_u.dim(1))
        throw shape_error("user_aware_route: router column counts differ");
    Tensor su = reshape(softmax(matmul(u, m_u)), {m_u.dim(1)});
    return softmax(add_rowvec(sg, su));
}

Tensor moe_ffn_delta(const Tensor& x, const std::vector<LoraAdapter>& experts,
                     const Tensor& omega, bool training, Rng* rng) {
    if (experts.empty())
        throw contract_error("moe_ffn_delta: empty expert list");
    if (omega.ndim() != 2 || omega.dim(1) != static_cast<std::int64_t>(experts.size()))
        throw contract_error("moe_ffn_delta: omega has " + std::to_string(omega.dim(1)) +
                             " columns for " + std::to_string(experts.size()) + " experts");
    if (omega.dim(0) != x.dim(0))
        throw contract_error("moe_ffn_delta: omega rows != tokens");
    Tensor out;
    for (std::size_t i = 0; i < experts.size(); ++i) {
        Tensor d = colwise_scale(lora_delta(x, experts[i], training, rng),
                                 column(omega, static_cast<std::int64_t>(i)));
        out = out.defined() ? add(out, d) : d;
    }
    return out;
}

void RouterTrace::update(const std::string& user, int layer, const std::vector<double>& omega,
                         std::int64_t step) {
    check_simplex(omega, "RouterTrace::update", 1e-6);
    auto& slot = ema_[user][layer];
    if (slot.empty()) {
        slot = omega;
    } else {
        if (slot.size() != omega.size())
            throw contract_error("RouterTrace::update: omega width changed");
        for (std::size_t i = 0; i < slot.size(); ++i)
            slot[i] = decay_ * slot[i] + (1.0 - decay_) * omega[i];
    }
    check_simplex(slot, "RouterTrace EMA", 1e-6);
    log_.push_back({step, user, layer, omega});
}

const std::vector<double>& RouterTrace::stored(const std::string& user, int layer) const {
    auto it = ema_.find(user);
    if (it == ema_.end())
        throw data_error("RouterTrace: no trace for user " + user);
    auto jt = it->second.find(layer);
    if (jt == it->second.end())
        throw data_error("RouterTrace: no trace for user " + user + " layer " +
                         std::to_string(layer));
    return jt->second;
}

std::vector<std::string> RouterTrace::user_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, _] : ema_)
        ids.push_back(id);
    return ids;
}

std::vector<double> RouterTrace::mean_omega(const std::string& user) const {
    auto it = ema_.find(user);
    if (it == ema_.end())
        throw data_error("RouterTrace: no trace for user " + user);
    std::vector<double> mean;
    for (const auto& [_, v] : it->second) {
        if (mean.empty())
            mean.assign(v.size(), 0.0);
        for (std::size_t i = 0; i < v.size(); ++i)
            mean[i] += v[i];
    }
    double n = static_cast<double>(it->second.size());
    for (double& m : mean)
        m /= n;
    return mean;
}

void RouterTrace::write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw format_error("RouterTrace::write_csv: cannot open " + path);
    std::size_t k = log_.empty() ? 0 : log_.front().omega.size();
    out << "step,user_id,layer";
    for (std::size_t i = 0; i < k; ++i)
        out << ",omega" << i;
    out << "\n";
    char buf[32];
    for (const auto& row : log_) {
        out << row.step << "," << row.user << "," << row.layer;
        for (double v : row.omega) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            out << "," << buf;
        }
        out << "\n";
    }
}

Tensor constraint_loss(const RouterTrace& trace, const std::string& current_user,
                       const Tensor& omega, int layer, bool cosine) {
    if (omega.ndim() != 1)
        throw contract_error("constraint_loss: omega must be 1-d");
    Tensor total = Tensor::zeros({1});
    for (const auto& user : trace.user_ids()) {
        if (user == current_user)
            continue;
        const auto& stored = trace.stored(user, layer);
        if (static_cast<std::int64_t>(stored.size()) != omega.dim(0))
            throw contract_error("constraint_loss: stored omega width mismatch for user " + user);
        Tensor other = Tensor::from({omega.dim(0)}, stored);
        Tensor s = dot(omega, other);
        if (cosine) {
            double other_norm = 0.0;
            for (double v : stored)
                other_norm += v * v;
            s = scale(s, 1.0 / std::sqrt(other_norm));
            s = div(s, sqrt_val(sum_all(mul(omega, omega))));
        }
        total = add(total, abs_val(s));
    }
    return total;
}

Tensor lora_aware_route(const Tensor& x, const LoraAdapter& user_adapter, const Tensor& w_l) {
    Tensor h_u = lora_delta(x, user_adapter, false);
    if (h_u.dim(1) != w_l.dim(0))
        throw shape_error("lora_aware_route: h_u " + shape_str(h_u.shape()) + " vs W_l " +
                          shape_str(w_l.shape()));
    return softmax(matmul(h_u, w_l));
}

Tensor stage3_ffn_delta(const Tensor& x, const std::vector<LoraAdapter>& experts,
                        const LoraAdapter& user_adapter, const Tensor& w_l, bool training,
                        Rng* rng, const std::vector<double>* fixed_beta, bool include_group) {
    Tensor out = lora_delta(x, user_adapter, training, rng);
    if (!include_group || experts.empty())
        return out;
    if (fixed_beta) {
        if (fixed_beta->size() != experts.size())
            throw contract_error("stage3_ffn_delta: fixed beta width mismatch");
        for (std::size_t m = 0; m < experts.size(); ++m)
            out = add(out, scale(lora_delta(x, experts[m], false), (*fixed_beta)[m]));
        return out;
    }
    if (w_l.dim(1) != static_cast<std::int64_t>(experts.size()))
        throw contract_error("stage3_ffn_delta: W_l has " + std::to_string(w_l.dim(1)) +
                             " columns for " + std::to_string(experts.size()) + " experts");
    Tensor beta = lora_aware_route(x, user_adapter, w_l);
    for (std::size_t m = 0; m < experts.size(); ++m)
        out = add(out, colwise_scale(lora_delta(x, experts[m], false),
                                     column(beta, static_cast<std::int64_t>(m))));
    return out;
}

} // namespace proper
