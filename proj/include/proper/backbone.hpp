#pragma once

#include "proper/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace proper {

// end-of-sequence marker in the fixed byte-level vocabulary
inline constexpr int kEosToken = 0;

struct ModelConfig {
    std::int64_t vocab_size = 256;
    std::int64_t d_model = 64;
    std::int64_t n_layers = 2;
    std::int64_t n_heads = 4;
    std::int64_t d_ff = 128;
    std::int64_t max_seq_len = 128;
    std::uint64_t seed = 0;

    void validate() const;
    std::int64_t head_dim() const { return d_model / n_heads; }
    // closed-form parameter count over all weight tensors
    std::int64_t param_count() const;
};

enum class Proj { Wq = 0, Wk, Wv, Wo, Gate, Up, Down };
const char* proj_name(Proj p);
bool proj_is_attention(Proj p);
std::int64_t proj_d_in(Proj p, const ModelConfig& cfg);
std::int64_t proj_d_out(Proj p, const ModelConfig& cfg);

struct LayerWeights {
    Tensor wq, wk, wv, wo;       // [d_model x d_model]
    Tensor w_gate, w_up, w_down; // SwiGLU FFN projections
    Tensor norm_attn, norm_ffn;  // RMS norm gains
};

struct BackboneWeights {
    ModelConfig config;
    Tensor token_embedding; // [vocab x d_model]
    Tensor pos_embedding;   // [max_seq_len x d_model]
    std::vector<LayerWeights> layers;
    Tensor final_norm;
    Tensor head; // [d_model x vocab]

    Tensor& proj(int layer, Proj p);
    const Tensor& proj(int layer, Proj p) const;

    // deterministic enumeration used by checkpoints and checksums
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
    std::uint64_t weights_checksum() const;
    void set_requires_grad(bool v);
};

BackboneWeights init_backbone(const ModelConfig& cfg);

// Adapter attachment surface. Called with the projection input x right before
// y = x*W; a defined return value is added to y. Hooks are how every
// LoRA/MoE variant attaches without forking the backbone.
struct AdapterHooks {
    std::function<Tensor(int layer, Proj p, const Tensor& x)> delta;
};

Tensor forward(const std::vector<int>& tokens, const BackboneWeights& weights,
               const AdapterHooks& hooks = {});

// down( silu(x*W_gate) (*) (x*W_up) )
Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up, const Tensor& w_down);

std::vector<int> greedy_decode(const std::vector<int>& prompt, const BackboneWeights& weights,
                               const AdapterHooks& hooks, int max_new);

// Weight checkpoint: <path>.manifest (text: name shape offset dtype) plus
// <path>.bin (little-endian float64, concatenated in manifest order).
void save_checkpoint(const std::string& path, const BackboneWeights& weights);
BackboneWeights load_checkpoint(const std::string& path);

} // namespace proper
