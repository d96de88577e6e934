#include "proper/backbone.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace proper {

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
        max_seq_len < 1)
        throw config_error("ModelConfig: all dimensions must be >= 1");
    if (d_model % n_heads != 0)
        throw config_error("ModelConfig: d_model " + std::to_string(d_model) +
                           " not divisible by n_heads " + std::to_string(n_heads));
}

std::int64_t ModelConfig::param_count() const {
    const std::int64_t per_layer = 4 * d_model * d_model // attention projections
                                   + 2 * d_model         // two norm gains
                                   + 2 * d_model * d_ff  // gate, up
                                   + d_ff * d_model;     // down
    return vocab_size * d_model    // token embedding
           + max_seq_len * d_model // positional embedding
           + n_layers * per_layer  //
           + d_model               // final norm
           + d_model * vocab_size; // output head
}

const char* proj_name(Proj p) {
    switch (p) {
    case Proj::Wq: return "wq";
    case Proj::Wk: return "wk";
    case Proj::Wv: return "wv";
    case Proj::Wo: return "wo";
    case Proj::Gate: return "gate";
    case Proj::Up: return "up";
    case Proj::Down: return "down";
    }
    return "?";
}

bool proj_is_attention(Proj p) {
    return p == Proj::Wq || p == Proj::Wk || p == Proj::Wv || p == Proj::Wo;
}

std::int64_t proj_d_in(Proj p, const ModelConfig& cfg) {
    return p == Proj::Down ? cfg.d_ff : cfg.d_model;
}

std::int64_t proj_d_out(Proj p, const ModelConfig& cfg) {
    return (p == Proj::Gate || p == Proj::Up) ? cfg.d_ff : cfg.d_model;
}

Tensor& BackboneWeights::proj(int layer, Proj p) {
    auto& l = layers[static_cast<std::size_t>(layer)];
    switch (p) {
    case Proj::Wq: return l.wq;
    case Proj::Wk: return l.wk;
    case Proj::Wv: return l.wv;
    case Proj::Wo: return l.wo;
    case Proj::Gate: return l.w_gate;
    case Proj::Up: return l.w_up;
    case Proj::Down: return l.w_down;
    }
    throw contract_error("proj: bad projection id");
}

const Tensor& BackboneWeights::proj(int layer, Proj p) const {
    return const_cast<BackboneWeights*>(this)->proj(layer, p);
}

std::vector<std::pair<std::string, Tensor>> BackboneWeights::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", token_embedding);
    out.emplace_back("pos_emb", pos_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        out.emplace_back(p + "wq", layers[l].wq);
        out.emplace_back(p + "wk", layers[l].wk);
        out.emplace_back(p + "wv", layers[l].wv);
        out.emplace_back(p + "wo", layers[l].wo);
        out.emplace_back(p + "gate", layers[l].w_gate);
        out.emplace_back(p + "up", layers[l].w_up);
        out.emplace_back(p + "down", layers[l].w_down);
        out.emplace_back(p + "norm_attn", layers[l].norm_attn);
        out.emplace_back(p + "norm_ffn", layers[l].norm_ffn);
    }
    out.emplace_back("final_norm", final_norm);
    out.emplace_back("head", head);
    return out;
}

std::uint64_t BackboneWeights::weights_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : named_tensors())
        h = h * 0x100000001b3ULL + checksum(t.data());
    return h;
}

void BackboneWeights::set_requires_grad(bool v) {
    for (auto& [name, t] : named_tensors())
        const_cast<Tensor&>(t).set_requires_grad(v);
}

BackboneWeights init_backbone(const ModelConfig& cfg) {
    cfg.validate();
    BackboneWeights w;
    w.config = cfg;
    auto mk = [&](const std::string& name, Shape shape, double stddev) {
        Rng rng(mix_seed(cfg.seed, "backbone." + name));
        return Tensor::randn(std::move(shape), rng, stddev);
    };
    const double din = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    w.token_embedding = mk("tok_emb", {cfg.vocab_size, cfg.d_model}, 1.0);
    w.pos_embedding = mk("pos_emb", {cfg.max_seq_len, cfg.d_model}, 1.0);
    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        LayerWeights lw;
        std::string p = "layer" + std::to_string(l) + ".";
        lw.wq = mk(p + "wq", {cfg.d_model, cfg.d_model}, din);
        lw.wk = mk(p + "wk", {cfg.d_model, cfg.d_model}, din);
        lw.wv = mk(p + "wv", {cfg.d_model, cfg.d_model}, din);
        // residual-path outputs start small to keep the random net stable
        lw.wo = mk(p + "wo", {cfg.d_model, cfg.d_model}, 0.02);
        lw.w_gate = mk(p + "gate", {cfg.d_model, cfg.d_ff}, din);
        lw.w_up = mk(p + "up", {cfg.d_model, cfg.d_ff}, din);
        lw.w_down = mk(p + "down", {cfg.d_ff, cfg.d_model}, 0.02);
        lw.norm_attn = Tensor::full({cfg.d_model}, 1.0);
        lw.norm_ffn = Tensor::full({cfg.d_model}, 1.0);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = Tensor::full({cfg.d_model}, 1.0);
    // the head needs enough scale that adapted hidden states can produce
    // confident logits through the frozen output path
    w.head = mk("head", {cfg.d_model, cfg.vocab_size}, din);
    return w;
}

namespace {

Tensor apply_proj(const Tensor& x, const Tensor& W, int layer, Proj p, const AdapterHooks& hooks) {
    Tensor y = matmul(x, W);
    if (hooks.delta) {
        Tensor d = hooks.delta(layer, p, x);
        if (d.defined())
            y = add(y, d);
    }
    return y;
}

} // namespace

Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up,
                  const Tensor& w_down) {
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

Tensor forward(const std::vector<int>& tokens, const BackboneWeights& weights,
               const AdapterHooks& hooks) {
    const ModelConfig& cfg = weights.config;
    const std::int64_t T = static_cast<std::int64_t>(tokens.size());
    if (T < 1)
        throw contract_error("forward: empty token sequence");
    if (T > cfg.max_seq_len)
        throw contract_error("forward: sequence length " + std::to_string(T) +
                             " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw index_error("forward: token id " + std::to_string(t) + " outside vocab");

    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i)
        positions[i] = static_cast<int>(i);
    Tensor h = add(embedding_rows(weights.token_embedding, tokens),
                   embedding_rows(weights.pos_embedding, positions));

    const std::int64_t dh = cfg.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = 0; l < static_cast<int>(cfg.n_layers); ++l) {
        const auto& lw = weights.layers[static_cast<std::size_t>(l)];
        Tensor xa = rmsnorm(h, lw.norm_attn);
        Tensor q = apply_proj(xa, lw.wq, l, Proj::Wq, hooks);
        Tensor k = apply_proj(xa, lw.wk, l, Proj::Wk, hooks);
        Tensor v = apply_proj(xa, lw.wv, l, Proj::Wv, hooks);
        std::vector<Tensor> heads;
        heads.reserve(static_cast<std::size_t>(cfg.n_heads));
        for (std::int64_t hd = 0; hd < cfg.n_heads; ++hd) {
            Tensor qh = slice_cols(q, hd * dh, dh);
            Tensor kh = slice_cols(k, hd * dh, dh);
            Tensor vh = slice_cols(v, hd * dh, dh);
            Tensor att = causal_softmax(scale(matmul(qh, transpose(kh)), att_scale));
            heads.push_back(matmul(att, vh));
        }
        Tensor attn_out = apply_proj(concat_cols(heads), lw.wo, l, Proj::Wo, hooks);
        h = add(h, attn_out);

        Tensor xf = rmsnorm(h, lw.norm_ffn);
        Tensor g = apply_proj(xf, lw.w_gate, l, Proj::Gate, hooks);
        Tensor u = apply_proj(xf, lw.w_up, l, Proj::Up, hooks);
        Tensor act = mul(silu(g), u);
        Tensor down = apply_proj(act, lw.w_down, l, Proj::Down, hooks);
        h = add(h, down);
    }
    return matmul(rmsnorm(h, weights.final_norm), weights.head);
}

std::vector<int> greedy_decode(const std::vector<int>& prompt, const BackboneWeights& weights,
                               const AdapterHooks& hooks, int max_new) {
    if (max_new < 0)
        throw contract_error("greedy_decode: max_new must be >= 0");
    std::vector<int> out = prompt;
    for (int i = 0; i < max_new; ++i) {
        if (static_cast<std::int64_t>(out.size()) >= weights.config.max_seq_len)
            break;
        Tensor logits = forward(out, weights, hooks);
        const std::int64_t T = logits.dim(0), V = logits.dim(1);
        const double* last = logits.data().data() + (T - 1) * V;
        int best = 0;
        for (std::int64_t vix = 1; vix < V; ++vix)
            if (last[vix] > last[best])
                best = static_cast<int>(vix);
        out.push_back(best);
        if (best == kEosToken)
            break;
    }
    return out;
}

// ---- checkpoint ------------------------------------------------------------

void save_checkpoint(const std::string& path, const BackboneWeights& weights) {
    std::ofstream man(path + ".manifest");
    std::ofstream bin(path + ".bin", std::ios::binary);
    if (!man || !bin)
        throw format_error("save_checkpoint: cannot open " + path + " for writing");
    const auto& c = weights.config;
    man << "config " << c.vocab_size << " " << c.d_model << " " << c.n_layers << " " << c.n_heads
        << " " << c.d_ff << " " << c.max_seq_len << " " << c.seed << "\n";
    std::int64_t offset = 0;
    for (const auto& [name, t] : weights.named_tensors()) {
        man << name << " ";
        for (std::size_t i = 0; i < t.shape().size(); ++i)
            man << (i ? "," : "") << t.shape()[i];
        man << " " << offset << " f64\n";
        bin.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.data().size() * sizeof(double)));
        offset += t.numel();
    }
}

BackboneWeights load_checkpoint(const std::string& path) {
    std::ifstream man(path + ".manifest");
    if (!man)
        throw format_error("load_checkpoint: missing manifest " + path + ".manifest");
    std::ifstream bin(path + ".bin", std::ios::binary);
    if (!bin)
        throw format_error("load_checkpoint: missing blob " + path + ".bin");

    std::string line;
    if (!std::getline(man, line))
        throw format_error("load_checkpoint: empty manifest");
    ModelConfig cfg;
    {
        std::istringstream is(line);
        std::string tag;
        is >> tag >> cfg.vocab_size >> cfg.d_model >> cfg.n_layers >> cfg.n_heads >> cfg.d_ff >>
            cfg.max_seq_len >> cfg.seed;
        if (tag != "config" || !is)
            throw format_error("load_checkpoint: bad config line: " + line);
    }
    BackboneWeights w = init_backbone(cfg);
    std::map<std::string, Tensor> by_name;
    for (auto& [name, t] : w.named_tensors())
        by_name.emplace(name, t);

    while (std::getline(man, line)) {
        if (line.empty())
            continue;
        std::istringstream is(line);
        std::string name, shape_s, dtype;
        std::int64_t offset = 0;
        is >> name >> shape_s >> offset >> dtype;
        if (!is || dtype != "f64")
            throw format_error("load_checkpoint: bad manifest line: " + line);
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw format_error("load_checkpoint: unknown tensor key " + name);
        Tensor t = it->second;
        bin.seekg(offset * static_cast<std::int64_t>(sizeof(double)));
        bin.read(reinterpret_cast<char*>(t.data().data()),
                 static_cast<std::streamsize>(t.data().size() * sizeof(double)));
        if (bin.gcount() != static_cast<std::streamsize>(t.data().size() * sizeof(double)))
            throw format_error("load_checkpoint: truncated blob at key " + name);
    }
    return w;
}

} // namespace proper
