#pragma once

#include "proper/adapters.hpp"
#include "proper/backbone.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

namespace proper {

// Slot index of an FFN projection inside an ExpertBank layer (gate/up/down).
int ffn_slot(Proj p);

// k group experts per FFN projection per layer, plus one router pair per
// layer shared across that layer's three projections.
struct ExpertBank {
    struct Layer {
        std::array<std::vector<LoraAdapter>, 3> experts; // [gate, up, down]
        Tensor m_g;                                      // [d_model x k]
        Tensor m_u;                                      // [d_user x k]
    };

    int k = 0;
    std::int64_t d_user = 0;
    std::vector<Layer> layers;

    std::vector<Tensor> trainable_tensors() const;
    void set_requires_grad(bool v);
    std::uint64_t checksum() const;
};

ExpertBank init_expert_bank(const ModelConfig& cfg, int k, int r, double alpha,
                            std::int64_t d_user, std::uint64_t seed, double dropout_p = 0.0);

std::vector<AdapterFileEntry> pack_expert_bank(const ExpertBank& bank);
ExpertBank unpack_expert_bank(const std::vector<AdapterFileEntry>& entries,
                              double dropout_p = 0.0);

// One randomly initialized embedding per user per layer, shape [1 x d_user].
class UserEmbeddingTable {
  public:
    UserEmbeddingTable() = default;
    UserEmbeddingTable(std::int64_t d_user, int n_layers)
        : d_user_(d_user), n_layers_(n_layers) {}

    void add_user(const std::string& id, std::uint64_t seed);
    bool has(const std::string& id) const { return table_.count(id) > 0; }
    const Tensor& embedding(const std::string& id, int layer) const;
    Tensor& embedding(const std::string& id, int layer);

    std::int64_t d_user() const { return d_user_; }
    int n_layers() const { return n_layers_; }
    std::vector<std::string> user_ids() const;
    std::vector<Tensor> trainable_tensors() const;
    std::uint64_t checksum() const;

    std::vector<AdapterFileEntry> pack() const;
    static UserEmbeddingTable unpack(const std::vector<AdapterFileEntry>& entries);

  private:
    std::int64_t d_user_ = 0;
    int n_layers_ = 0;
    std::map<std::string, std::vector<Tensor>> table_;
};

// omega_t = softmax( softmax(x_t*M_g) + softmax(u*M_u) ), one row per token.
// regular=true drops the user term and the outer softmax: omega = softmax(x*M_g).
Tensor user_aware_route(const Tensor& x, const Tensor& u, const Tensor& m_g, const Tensor& m_u,
                        bool regular = false);

// sum_i omega[:,i] * lora_delta(x, expert_i); dense, all k experts evaluated.
Tensor moe_ffn_delta(const Tensor& x, const std::vector<LoraAdapter>& experts,
                     const Tensor& omega, bool training, Rng* rng = nullptr);

// Per-user EMA of router weights plus a step log for diagnostics. Stored
// vectors are plain doubles, so constraint_loss treats them as constants.
class RouterTrace {
  public:
    explicit RouterTrace(double decay = 0.9) : decay_(decay) {}

    void update(const std::string& user, int layer, const std::vector<double>& omega,
                std::int64_t step);
    bool has(const std::string& user) const { return ema_.count(user) > 0; }
    const std::vector<double>& stored(const std::string& user, int layer) const;
    std::vector<std::string> user_ids() const;
    // EMA averaged over the layers seen for this user
    std::vector<double> mean_omega(const std::string& user) const;
    double decay() const { return decay_; }
    bool empty() const { return ema_.empty(); }

    void write_csv(const std::string& path) const;

    // EMA state only; the step log is not part of the snapshot
    std::map<std::string, std::map<int, std::vector<double>>> snapshot() const { return ema_; }
    void restore(std::map<std::string, std::map<int, std::vector<double>>> ema) {
        ema_ = std::move(ema);
    }

  private:
    struct LogRow {
        std::int64_t step;
        std::string user;
        int layer;
        std::vector<double> omega;
    };

    double decay_;
    std::map<std::string, std::map<int, std::vector<double>>> ema_;
    std::vector<LogRow> log_;
};

// sum over other users j in the trace of |omega . stored_omega_j| at this
// layer; stored vectors are constants, so gradients reach only omega.
Tensor constraint_loss(const RouterTrace& trace, const std::string& current_user,
                       const Tensor& omega, int layer, bool cosine = false);

// beta = softmax( lora_delta(x, user_adapter, eval) * W_l ), one row per token.
Tensor lora_aware_route(const Tensor& x, const LoraAdapter& user_adapter, const Tensor& w_l);

// lora_delta(x, user_adapter) + sum_m beta[:,m] * expert_m delta. The caller
// freezes the bank; gradients then reach only the user adapter and w_l.
// fixed_beta replaces the routed beta (no_lora_aware_router ablation);
// include_group=false drops the expert term (no_group_double_count).
Tensor stage3_ffn_delta(const Tensor& x, const std::vector<LoraAdapter>& experts,
                        const LoraAdapter& user_adapter, const Tensor& w_l, bool training,
                        Rng* rng = nullptr, const std::vector<double>* fixed_beta = nullptr,
                        bool include_group = true);

} // namespace proper
