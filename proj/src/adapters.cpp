#include "proper/adapters.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>

namespace proper {

using nlohmann::json;

LoraAdapter lora_init(std::int64_t d_in, std::int64_t d_out, int r, double alpha,
                      std::uint64_t seed, double dropout_p, std::string target) {
    if (r < 1)
        throw contract_error("lora_init: rank must be >= 1");
    if (r > std::min(d_in, d_out))
        throw contract_error("lora_init: rank " + std::to_string(r) + " exceeds min(d_in,d_out)=" +
                             std::to_string(std::min(d_in, d_out)));
    if (dropout_p < 0.0 || dropout_p >= 1.0)
        throw contract_error("lora_init: dropout_p must be in [0,1)");
    LoraAdapter a;
    Rng rng(mix_seed(seed, "lora_init"));
    const double bound = 1.0 / std::sqrt(static_cast<double>(r));
    a.B = Tensor::zeros({d_in, r}, true);
    a.A = Tensor::rand_uniform({r, d_out}, rng, -bound, bound, true);
    a.rank = r;
    a.alpha = alpha;
    a.dropout_p = dropout_p;
    a.target = std::move(target);
    return a;
}

Tensor lora_delta(const Tensor& x, const LoraAdapter& adapter, bool training, Rng* rng) {
    if (x.ndim() != 2 || x.dim(1) != adapter.d_in())
        throw shape_error("lora_delta: input " + shape_str(x.shape()) + " vs adapter d_in " +
                          std::to_string(adapter.d_in()));
    Tensor in = x;
    if (training && adapter.dropout_p > 0.0) {
        if (!rng)
            throw contract_error("lora_delta: training-mode dropout needs an rng");
        in = dropout(x, adapter.dropout_p, true, *rng);
    }
    const double s = adapter.alpha / static_cast<double>(adapter.rank);
    return scale(matmul(matmul(in, adapter.B), adapter.A), s);
}

Tensor merge(const Tensor& base, const LoraAdapter& adapter, MergeReceipt* receipt) {
    return weighted_merge(base, {{1.0, &adapter}}, receipt);
}

Tensor weighted_merge(const Tensor& base,
                      const std::vector<std::pair<double, const LoraAdapter*>>& adapters,
                      MergeReceipt* receipt) {
    if (base.ndim() != 2)
        throw shape_error("weighted_merge: base must be 2-d, got " + shape_str(base.shape()));
    Tensor out = base.detach();
    double scale_used = 0.0;
    for (const auto& [w, a] : adapters) {
        if (!std::isfinite(w))
            throw contract_error("weighted_merge: non-finite weight");
        if (a->d_in() != base.dim(0) || a->d_out() != base.dim(1))
            throw shape_error("weighted_merge: adapter [" + std::to_string(a->d_in()) + "x" +
                              std::to_string(a->d_out()) + "] vs base " + shape_str(base.shape()));
        const double s = w * a->alpha / static_cast<double>(a->rank);
        scale_used = a->alpha / static_cast<double>(a->rank);
        // dense accumulate of s * B*A
        const std::int64_t D = a->d_in(), R = a->rank, O = a->d_out();
        const double* B = a->B.data().data();
        const double* A = a->A.data().data();
        for (std::int64_t i = 0; i < D; ++i) {
            double* row = out.data().data() + i * O;
            for (std::int64_t r = 0; r < R; ++r) {
                const double b = s * B[i * R + r];
                const double* Ar = A + r * O;
                for (std::int64_t j = 0; j < O; ++j)
                    row[j] += b * Ar[j];
            }
        }
    }
    if (receipt) {
        receipt->target = adapters.empty() ? "" : adapters.front().second->target;
        receipt->pre_checksum = checksum_hex(base.data());
        receipt->post_checksum = checksum_hex(out.data());
        receipt->scale = scale_used;
    }
    return out;
}

// ---- file format -----------------------------------------------------------

namespace {

void write_f64_le(std::ofstream& os, const std::vector<double>& v) {
    // assumes little-endian host; all supported targets are
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

} // namespace

void save_adapter_file(const std::string& path, const std::vector<AdapterFileEntry>& entries) {
    std::ofstream man(path + ".manifest");
    std::ofstream bin(path + ".bin", std::ios::binary);
    if (!man || !bin)
        throw format_error("save_adapter_file: cannot open " + path + " for writing");
    std::int64_t offset = 0;
    for (const auto& e : entries) {
        json j;
        j["name"] = e.name;
        j["stage"] = e.stage;
        j["target"] = e.target;
        j["r"] = e.rank;
        j["alpha"] = e.alpha;
        j["shape"] = e.shape;
        j["offset"] = offset;
        man << j.dump() << "\n";
        if (shape_numel(e.shape) != static_cast<std::int64_t>(e.values.size()))
            throw format_error("save_adapter_file: entry " + e.name + " shape/value mismatch");
        write_f64_le(bin, e.values);
        offset += static_cast<std::int64_t>(e.values.size());
    }
}

std::vector<AdapterFileEntry> load_adapter_file(const std::string& path) {
    std::ifstream man(path + ".manifest");
    if (!man)
        throw format_error("load_adapter_file: missing manifest " + path + ".manifest");
    std::ifstream bin(path + ".bin", std::ios::binary);
    if (!bin)
        throw format_error("load_adapter_file: missing blob " + path + ".bin");

    std::vector<AdapterFileEntry> entries;
    std::string line;
    while (std::getline(man, line)) {
        if (line.empty())
            continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& ex) {
            throw format_error("load_adapter_file: bad manifest line: " + line);
        }
        AdapterFileEntry e;
        try {
            e.name = j.at("name").get<std::string>();
            e.stage = j.at("stage").get<int>();
            e.target = j.at("target").get<std::string>();
            e.rank = j.at("r").get<int>();
            e.alpha = j.at("alpha").get<double>();
            e.shape = j.at("shape").get<Shape>();
            std::int64_t offset = j.at("offset").get<std::int64_t>();
            std::int64_t n = shape_numel(e.shape);
            e.values.resize(static_cast<std::size_t>(n));
            bin.seekg(offset * static_cast<std::int64_t>(sizeof(double)));
            bin.read(reinterpret_cast<char*>(e.values.data()),
                     static_cast<std::streamsize>(n * sizeof(double)));
            if (bin.gcount() != static_cast<std::streamsize>(n * sizeof(double)))
                throw format_error("load_adapter_file: truncated blob at key " + e.name);
        } catch (const json::exception& ex) {
            throw format_error("load_adapter_file: malformed entry for key " +
                               (j.contains("name") ? j["name"].dump() : std::string("?")));
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

std::vector<AdapterFileEntry> pack_adapters(const std::map<std::string, LoraAdapter>& adapters,
                                            int stage) {
    std::vector<AdapterFileEntry> out;
    for (const auto& [key, a] : adapters) {
        AdapterFileEntry b;
        b.name = key + ".B";
        b.stage = stage;
        b.target = a.target;
        b.rank = a.rank;
        b.alpha = a.alpha;
        b.shape = a.B.shape();
        b.values = a.B.data();
        out.push_back(std::move(b));
        AdapterFileEntry av;
        av.name = key + ".A";
        av.stage = stage;
        av.target = a.target;
        av.rank = a.rank;
        av.alpha = a.alpha;
        av.shape = a.A.shape();
        av.values = a.A.data();
        out.push_back(std::move(av));
    }
    return out;
}

std::map<std::string, LoraAdapter> unpack_adapters(const std::vector<AdapterFileEntry>& entries,
                                                   double dropout_p) {
    std::map<std::string, LoraAdapter> out;
    for (const auto& e : entries) {
        bool is_b = e.name.size() > 2 && e.name.ends_with(".B");
        bool is_a = e.name.size() > 2 && e.name.ends_with(".A");
        if (!is_b && !is_a)
            continue;
        std::string key = e.name.substr(0, e.name.size() - 2);
        auto& a = out[key];
        a.rank = e.rank;
        a.alpha = e.alpha;
        a.target = e.target;
        a.dropout_p = dropout_p;
        Tensor t = Tensor::from(e.shape, e.values, true);
        if (is_b)
            a.B = t;
        else
            a.A = t;
    }
    for (const auto& [k, a] : out)
        if (!a.B.defined() || !a.A.defined())
            throw format_error("unpack_adapters: incomplete pair for key " + k);
    return out;
}

} // namespace proper
