#pragma once

#include "proper/common.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace proper {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// One node of the define-by-run tape. Tensors are thin handles onto nodes;
// the tape is the graph of parent links reachable from a loss node.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;     // empty until backward touches this node
    std::vector<double> grad_acc; // leaf accumulator across backward calls
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // accumulates into parents' grads using this node's grad
    std::function<void(TensorNode&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    void ensure_grad() {
        if (grad.empty())
            grad.assign(data.size(), 0.0);
    }
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);
    static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                               bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
    std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    double item() const;
    double at(std::int64_t r, std::int64_t c) const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<double>& grad() { return node_->grad; }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad() {
        node_->grad.clear();
        node_->grad_acc.clear();
    }

    // Fresh leaf with copied data and no history.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    bool all_finite() const;
    void check_finite(const std::string& where) const;

    std::shared_ptr<TensorNode> node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  private:
    std::shared_ptr<TensorNode> node_;
};

// ---- autodiff ops ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b); // elementwise
Tensor div(const Tensor& a, const Tensor& b); // elementwise
Tensor sqrt_val(const Tensor& a);             // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& a, const Tensor& v); // a:[R,C] + v:[C] per row
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& x, Shape shape); // same numel, gradient passthrough
Tensor softmax(const Tensor& x, int axis = -1);
Tensor causal_softmax(const Tensor& scores); // [T,T]; row t normalized over cols <= t
Tensor silu(const Tensor& x);
Tensor abs_val(const Tensor& x);
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& rows);
Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t len);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor column(const Tensor& x, std::int64_t j);          // [R,C] -> [R]
Tensor colwise_scale(const Tensor& x, const Tensor& s);  // rows of x scaled by s:[R]
Tensor mean_rows(const Tensor& x);                       // [R,C] -> [C]
Tensor sum_all(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b); // 1-d tensors -> scalar
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

// Reverse pass from a scalar loss. Leaf grads accumulate additively across
// calls; intermediate grads are rebuilt each call.
void backward(const Tensor& loss);

// ---- optimizer -------------------------------------------------------------

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t step = 0;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// One decoupled-weight-decay Adam update of `param` in place.
void adamw_step(std::vector<double>& param, const std::vector<double>& grad, AdamState& state,
                const AdamConfig& cfg);

class AdamW {
  public:
    explicit AdamW(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        states_.resize(params_.size());
    }
    void step();
    void zero_grad();
    const std::vector<Tensor>& params() const { return params_; }

  private:
    std::vector<Tensor> params_;
    std::vector<AdamState> states_;
    AdamConfig cfg_;
};

} // namespace proper
