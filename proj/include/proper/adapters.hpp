#pragma once

#include "proper/tensor.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace proper {

// Low-rank pair attached to one projection matrix. Activations are row
// vectors, so the delta applied to x*W is (alpha/r) * (x*B)*A with
// B:[d_in x r], A:[r x d_out].
struct LoraAdapter {
    Tensor B;
    Tensor A;
    int rank = 0;
    double alpha = 1.0;
    double dropout_p = 0.0;
    std::string target;

    std::int64_t d_in() const { return B.dim(0); }
    std::int64_t d_out() const { return A.dim(1); }
};

struct MergeReceipt {
    std::string target;
    std::string pre_checksum;
    std::string post_checksum;
    double scale = 0.0; // alpha/r actually applied
};

// A ~ small uniform, B = 0 so the initial delta is exactly zero.
LoraAdapter lora_init(std::int64_t d_in, std::int64_t d_out, int r, double alpha,
                      std::uint64_t seed, double dropout_p = 0.0, std::string target = "");

// (alpha/r) * ((x*B)*A); inverted dropout on x in training mode.
Tensor lora_delta(const Tensor& x, const LoraAdapter& adapter, bool training, Rng* rng = nullptr);

// base + (alpha/r) * B*A as a fresh tensor; base is untouched.
Tensor merge(const Tensor& base, const LoraAdapter& adapter, MergeReceipt* receipt = nullptr);

// base + sum_i w_i * (alpha_i/r_i) * B_i*A_i; empty list returns a copy of base.
Tensor weighted_merge(const Tensor& base,
                      const std::vector<std::pair<double, const LoraAdapter*>>& adapters,
                      MergeReceipt* receipt = nullptr);

// ---- adapter file format ---------------------------------------------------
// <path>.manifest : one JSON object per entry {name, stage, target, r, alpha,
// shape, offset}; <path>.bin : little-endian float64 blob in manifest order.

struct AdapterFileEntry {
    std::string name; // unique key, e.g. "stage2.layer0.gate.expert1.B"
    int stage = 0;
    std::string target;
    int rank = 0;
    double alpha = 0.0;
    Shape shape;
    std::vector<double> values;
};

void save_adapter_file(const std::string& path, const std::vector<AdapterFileEntry>& entries);
std::vector<AdapterFileEntry> load_adapter_file(const std::string& path);

// Convenience packers for a named set of adapters (keyed by attachment point).
std::vector<AdapterFileEntry> pack_adapters(const std::map<std::string, LoraAdapter>& adapters,
                                            int stage);
std::map<std::string, LoraAdapter> unpack_adapters(const std::vector<AdapterFileEntry>& entries,
                                                   double dropout_p = 0.0);

} // namespace proper
