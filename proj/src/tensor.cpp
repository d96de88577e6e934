#include "proper/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace proper {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i)
            os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        if (d <= 0)
            throw shape_error("non-positive dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

namespace {

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> data) {
    auto n = std::make_shared<TensorNode>();
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw shape_error("data length " + std::to_string(data.size()) + " does not match shape " +
                          shape_str(shape));
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

// Result node wiring: parents are only the grad-requiring inputs (the tape
// traversal set); fn is installed only when a gradient can flow.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<std::shared_ptr<TensorNode>> grad_parents,
                   std::function<void(TensorNode&)> fn) {
    auto n = make_node(std::move(shape), std::move(data));
    if (!grad_parents.empty()) {
        n->requires_grad = true;
        n->parents = std::move(grad_parents);
        n->backward_fn = std::move(fn);
    }
    return Tensor(n);
}

std::vector<std::shared_ptr<TensorNode>> grad_parents_of(std::initializer_list<Tensor> ts) {
    std::vector<std::shared_ptr<TensorNode>> out;
    for (const auto& t : ts)
        if (t.requires_grad())
            out.push_back(t.node());
    return out;
}

void require_2d(const Tensor& t, const char* what) {
    if (t.ndim() != 2)
        throw shape_error(std::string(what) + ": expected 2-d tensor, got " + shape_str(t.shape()));
}

} // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = make_node(shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), 0.0));
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = make_node(shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), value));
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    auto n = make_node(std::move(shape), std::move(data));
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : d)
        x = rng.normal() * stddev;
    return from(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : d)
        x = rng.uniform(lo, hi);
    return from(std::move(shape), std::move(d), requires_grad);
}

double Tensor::item() const {
    if (numel() != 1)
        throw contract_error("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::int64_t r, std::int64_t c) const {
    require_2d(*this, "at");
    return node_->data[static_cast<std::size_t>(r * dim(1) + c)];
}

Tensor Tensor::detach() const {
    auto n = make_node(node_->shape, node_->data);
    return Tensor(n);
}

bool Tensor::all_finite() const {
    for (double v : node_->data)
        if (!std::isfinite(v))
            return false;
    return true;
}

void Tensor::check_finite(const std::string& where) const {
    if (!all_finite())
        throw numeric_error(where + ": non-finite values in tensor " + shape_str(shape()));
}

// ---- ops -------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw shape_error("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.data()[i] + b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_result(a.shape(), std::move(out), grad_parents_of({a, b}), [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw shape_error("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.data()[i] - b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_result(a.shape(), std::move(out), grad_parents_of({a, b}), [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw shape_error("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.data()[i] * b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_result(a.shape(), std::move(out), grad_parents_of({a, b}), [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i] * an->data[i];
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw shape_error("div: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.data()[i] / b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_result(a.shape(), std::move(out), grad_parents_of({a, b}), [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] / bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] -= self.grad[i] * an->data[i] / (bn->data[i] * bn->data[i]);
        }
    });
}

Tensor sqrt_val(const Tensor& a) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::sqrt(a.data()[i]);
    auto an = a.node();
    return make_result(a.shape(), std::move(out), grad_parents_of({a}), [an](TensorNode& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * 0.5 / std::max(self.data[i], 1e-300);
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a.data()[i] * c;
    auto an = a.node();
    return make_result(a.shape(), std::move(out), grad_parents_of({a}), [an, c](TensorNode& self) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * c;
    });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    require_2d(a, "add_rowvec");
    if (v.ndim() != 1 || v.dim(0) != a.dim(1))
        throw shape_error("add_rowvec: " + shape_str(a.shape()) + " vs " + shape_str(v.shape()));
    std::int64_t R = a.dim(0), C = a.dim(1);
    std::vector<double> out(a.data().size());
    for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c)
            out[static_cast<std::size_t>(r * C + c)] =
                a.data()[static_cast<std::size_t>(r * C + c)] + v.data()[static_cast<std::size_t>(c)];
    auto an = a.node(), vn = v.node();
    return make_result(a.shape(), std::move(out), grad_parents_of({a, v}),
                       [an, vn, R, C](TensorNode& self) {
                           if (an->requires_grad) {
                               an->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   an->grad[i] += self.grad[i];
                           }
                           if (vn->requires_grad) {
                               vn->ensure_grad();
                               for (std::int64_t r = 0; r < R; ++r)
                                   for (std::int64_t c = 0; c < C; ++c)
                                       vn->grad[static_cast<std::size_t>(c)] +=
                                           self.grad[static_cast<std::size_t>(r * C + c)];
                           }
                       });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul lhs");
    require_2d(b, "matmul rhs");
    if (a.dim(1) != b.dim(0))
        throw shape_error("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    const std::int64_t M = a.dim(0), P = a.dim(1), N = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(M * N), 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::int64_t i = 0; i < M; ++i) {
        double* Ci = out.data() + i * N;
        const double* Ai = A + i * P;
        for (std::int64_t k = 0; k < P; ++k) {
            const double aik = Ai[k];
            const double* Bk = B + k * N;
            for (std::int64_t j = 0; j < N; ++j)
                Ci[j] += aik * Bk[j];
        }
    }
    auto an = a.node(), bn = b.node();
    return make_result({M, N}, std::move(out), grad_parents_of({a, b}),
                       [an, bn, M, P, N](TensorNode& self) {
                           const double* G = self.grad.data();
                           if (an->requires_grad) {
                               an->ensure_grad();
                               // dA = G * B^T
                               const double* B = bn->data.data();
                               for (std::int64_t i = 0; i < M; ++i)
                                   for (std::int64_t k = 0; k < P; ++k) {
                                       double s = 0.0;
                                       const double* Gi = G + i * N;
                                       const double* Bk = B + k * N;
                                       for (std::int64_t j = 0; j < N; ++j)
                                           s += Gi[j] * Bk[j];
                                       an->grad[static_cast<std::size_t>(i * P + k)] += s;
                                   }
                           }
                           if (bn->requires_grad) {
                               bn->ensure_grad();
                               // dB = A^T * G
                               const double* A = an->data.data();
                               for (std::int64_t i = 0; i < M; ++i) {
                                   const double* Ai = A + i * P;
                                   const double* Gi = G + i * N;
                                   for (std::int64_t k = 0; k < P; ++k) {
                                       const double aik = Ai[k];
                                       double* Bg = bn->grad.data() + k * N;
                                       for (std::int64_t j = 0; j < N; ++j)
                                           Bg[j] += aik * Gi[j];
                                   }
                               }
                           }
                       });
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    std::int64_t R = a.dim(0), C = a.dim(1);
    std::vector<double> out(a.data().size());
    for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c)
            out[static_cast<std::size_t>(c * R + r)] = a.data()[static_cast<std::size_t>(r * C + c)];
    auto an = a.node();
    return make_result({C, R}, std::move(out), grad_parents_of({a}), [an, R, C](TensorNode& self) {
        an->ensure_grad();
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c)
                an->grad[static_cast<std::size_t>(r * C + c)] +=
                    self.grad[static_cast<std::size_t>(c * R + r)];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw shape_error("reshape: numel mismatch " + shape_str(x.shape()) + " vs " +
                          shape_str(shape));
    auto xn = x.node();
    std::vector<double> out = x.data();
    return make_result(std::move(shape), std::move(out), grad_parents_of({x}), [xn](TensorNode& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i];
    });
}

namespace {

// softmax over contiguous rows of length n; writes probabilities into out
void softmax_rows(const double* in, double* out, std::int64_t rows, std::int64_t n) {
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = in + r * n;
        double* y = out + r * n;
        double mx = x[0];
        for (std::int64_t i = 1; i < n; ++i)
            mx = std::max(mx, x[i]);
        double sum = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            y[i] = std::exp(x[i] - mx);
            sum += y[i];
        }
        for (std::int64_t i = 0; i < n; ++i)
            y[i] /= sum;
    }
}

} // namespace

Tensor softmax(const Tensor& x, int axis) {
    x.check_finite("softmax");
    if (x.ndim() == 1) {
        if (axis != -1 && axis != 0)
            throw contract_error("softmax: invalid axis for 1-d tensor");
        std::vector<double> out(x.data().size());
        softmax_rows(x.data().data(), out.data(), 1, x.dim(0));
        auto xn = x.node();
        std::int64_t n = x.dim(0);
        return make_result(x.shape(), std::move(out), grad_parents_of({x}), [xn, n](TensorNode& self) {
            xn->ensure_grad();
            double dyy = 0.0;
            for (std::int64_t i = 0; i < n; ++i)
                dyy += self.grad[static_cast<std::size_t>(i)] * self.data[static_cast<std::size_t>(i)];
            for (std::int64_t i = 0; i < n; ++i)
                xn->grad[static_cast<std::size_t>(i)] +=
                    self.data[static_cast<std::size_t>(i)] *
                    (self.grad[static_cast<std::size_t>(i)] - dyy);
        });
    }
    require_2d(x, "softmax");
    if (axis == 0) {
        // normalize columns via transpose round trip; cheap at these sizes
        return transpose(softmax(transpose(x), -1));
    }
    if (axis != -1 && axis != 1)
        throw contract_error("softmax: invalid axis " + std::to_string(axis));
    std::int64_t R = x.dim(0), C = x.dim(1);
    std::vector<double> out(x.data().size());
    softmax_rows(x.data().data(), out.data(), R, C);
    auto xn = x.node();
    return make_result(x.shape(), std::move(out), grad_parents_of({x}), [xn, R, C](TensorNode& self) {
        xn->ensure_grad();
        for (std::int64_t r = 0; r < R; ++r) {
            const double* y = self.data.data() + r * C;
            const double* dy = self.grad.data() + r * C;
            double* dx = xn->grad.data() + r * C;
            double dyy = 0.0;
            for (std::int64_t c = 0; c < C; ++c)
                dyy += dy[c] * y[c];
            for (std::int64_t c = 0; c < C; ++c)
                dx[c] += y[c] * (dy[c] - dyy);
        }
    });
}

Tensor causal_softmax(const Tensor& scores) {
    require_2d(scores, "causal_softmax");
    if (scores.dim(0) != scores.dim(1))
        throw shape_error("causal_softmax: expected square scores, got " + shape_str(scores.shape()));
    const std::int64_t T = scores.dim(0);
    std::vector<double> out(scores.data().size(), 0.0);
    for (std::int64_t t = 0; t < T; ++t) {
        const double* x = scores.data().data() + t * T;
        double* y = out.data() + t * T;
        double mx = x[0];
        for (std::int64_t i = 1; i <= t; ++i)
            mx = std::max(mx, x[i]);
        double sum = 0.0;
        for (std::int64_t i = 0; i <= t; ++i) {
            y[i] = std::exp(x[i] - mx);
            sum += y[i];
        }
        for (std::int64_t i = 0; i <= t; ++i)
            y[i] /= sum;
    }
    auto sn = scores.node();
    return make_result(scores.shape(), std::move(out), grad_parents_of({scores}),
                       [sn, T](TensorNode& self) {
                           sn->ensure_grad();
                           for (std::int64_t t = 0; t < T; ++t) {
                               const double* y = self.data.data() + t * T;
                               const double* dy = self.grad.data() + t * T;
                               double* dx = sn->grad.data() + t * T;
                               double dyy = 0.0;
                               for (std::int64_t i = 0; i <= t; ++i)
                                   dyy += dy[i] * y[i];
                               for (std::int64_t i = 0; i <= t; ++i)
                                   dx[i] += y[i] * (dy[i] - dyy);
                           }
                       });
}

Tensor silu(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = x.data()[i];
        out[i] = v / (1.0 + std::exp(-v));
    }
    auto xn = x.node();
    return make_result(x.shape(), std::move(out), grad_parents_of({x}), [xn](TensorNode& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            double v = xn->data[i];
            double s = 1.0 / (1.0 + std::exp(-v));
            xn->grad[i] += self.grad[i] * s * (1.0 + v * (1.0 - s));
        }
    });
}

Tensor abs_val(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::fabs(x.data()[i]);
    auto xn = x.node();
    return make_result(x.shape(), std::move(out), grad_parents_of({x}), [xn](TensorNode& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            double v = xn->data[i];
            double sgn = (v > 0.0) ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
            xn->grad[i] += self.grad[i] * sgn;
        }
    });
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    require_2d(x, "rmsnorm");
    if (gain.ndim() != 1 || gain.dim(0) != x.dim(1))
        throw shape_error("rmsnorm: gain " + shape_str(gain.shape()) + " vs x " +
                          shape_str(x.shape()));
    const std::int64_t R = x.dim(0), D = x.dim(1);
    std::vector<double> out(x.data().size());
    std::vector<double> rms(static_cast<std::size_t>(R));
    for (std::int64_t r = 0; r < R; ++r) {
        const double* xr = x.data().data() + r * D;
        double ss = 0.0;
        for (std::int64_t i = 0; i < D; ++i)
            ss += xr[i] * xr[i];
        double rr = std::sqrt(ss / static_cast<double>(D) + eps);
        rms[static_cast<std::size_t>(r)] = rr;
        for (std::int64_t i = 0; i < D; ++i)
            out[static_cast<std::size_t>(r * D + i)] = xr[i] * gain.data()[static_cast<std::size_t>(i)] / rr;
    }
    auto xn = x.node(), gn = gain.node();
    return make_result(x.shape(), std::move(out), grad_parents_of({x, gain}),
                       [xn, gn, R, D, rms](TensorNode& self) {
                           for (std::int64_t r = 0; r < R; ++r) {
                               const double* xr = xn->data.data() + r * D;
                               const double* dy = self.grad.data() + r * D;
                               const double rr = rms[static_cast<std::size_t>(r)];
                               if (xn->requires_grad) {
                                   xn->ensure_grad();
                                   double s = 0.0;
                                   for (std::int64_t i = 0; i < D; ++i)
                                       s += dy[i] * gn->data[static_cast<std::size_t>(i)] * xr[i];
                                   double* dx = xn->grad.data() + r * D;
                                   for (std::int64_t i = 0; i < D; ++i)
                                       dx[i] += dy[i] * gn->data[static_cast<std::size_t>(i)] / rr -
                                                xr[i] * s / (static_cast<double>(D) * rr * rr * rr);
                               }
                               if (gn->requires_grad) {
                                   gn->ensure_grad();
                                   for (std::int64_t i = 0; i < D; ++i)
                                       gn->grad[static_cast<std::size_t>(i)] += dy[i] * xr[i] / rr;
                               }
                           }
                       });
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    require_2d(table, "embedding_rows");
    const std::int64_t V = table.dim(0), D = table.dim(1);
    std::vector<double> out(ids.size() * static_cast<std::size_t>(D));
    for (std::size_t t = 0; t < ids.size(); ++t) {
        int id = ids[t];
        if (id < 0 || id >= V)
            throw index_error("embedding_rows: id " + std::to_string(id) + " out of range [0," +
                              std::to_string(V) + ")");
        std::copy_n(table.data().data() + static_cast<std::int64_t>(id) * D, D,
                    out.data() + static_cast<std::int64_t>(t) * D);
    }
    auto tn = table.node();
    auto ids_copy = ids;
    return make_result({static_cast<std::int64_t>(ids.size()), D}, std::move(out),
                       grad_parents_of({table}), [tn, ids_copy, D](TensorNode& self) {
                           tn->ensure_grad();
                           for (std::size_t t = 0; t < ids_copy.size(); ++t) {
                               const double* dy = self.grad.data() + static_cast<std::int64_t>(t) * D;
                               double* dst = tn->grad.data() +
                                             static_cast<std::int64_t>(ids_copy[t]) * D;
                               for (std::int64_t i = 0; i < D; ++i)
                                   dst[i] += dy[i];
                           }
                       });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& rows) {
    require_2d(x, "gather_rows");
    const std::int64_t R = x.dim(0), C = x.dim(1);
    std::vector<double> out(rows.size() * static_cast<std::size_t>(C));
    for (std::size_t t = 0; t < rows.size(); ++t) {
        if (rows[t] < 0 || rows[t] >= R)
            throw index_error("gather_rows: row " + std::to_string(rows[t]) + " out of range");
        std::copy_n(x.data().data() + rows[t] * C, C, out.data() + static_cast<std::int64_t>(t) * C);
    }
    auto xn = x.node();
    auto rows_copy = rows;
    return make_result({static_cast<std::int64_t>(rows.size()), C}, std::move(out),
                       grad_parents_of({x}), [xn, rows_copy, C](TensorNode& self) {
                           xn->ensure_grad();
                           for (std::size_t t = 0; t < rows_copy.size(); ++t) {
                               const double* dy = self.grad.data() + static_cast<std::int64_t>(t) * C;
                               double* dst = xn->grad.data() + rows_copy[t] * C;
                               for (std::int64_t i = 0; i < C; ++i)
                                   dst[i] += dy[i];
                           }
                       });
}

Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t len) {
    require_2d(x, "slice_cols");
    const std::int64_t R = x.dim(0), C = x.dim(1);
    if (start < 0 || len < 1 || start + len > C)
        throw shape_error("slice_cols: range [" + std::to_string(start) + "," +
                          std::to_string(start + len) + ") outside width " + std::to_string(C));
    std::vector<double> out(static_cast<std::size_t>(R * len));
    for (std::int64_t r = 0; r < R; ++r)
        std::copy_n(x.data().data() + r * C + start, len, out.data() + r * len);
    auto xn = x.node();
    return make_result({R, len}, std::move(out), grad_parents_of({x}),
                       [xn, R, C, start, len](TensorNode& self) {
                           xn->ensure_grad();
                           for (std::int64_t r = 0; r < R; ++r)
                               for (std::int64_t c = 0; c < len; ++c)
                                   xn->grad[static_cast<std::size_t>(r * C + start + c)] +=
                                       self.grad[static_cast<std::size_t>(r * len + c)];
                       });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty())
        throw contract_error("concat_cols: empty list");
    const std::int64_t R = parts[0].dim(0);
    std::int64_t C = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        if (p.dim(0) != R)
            throw shape_error("concat_cols: row mismatch");
        C += p.dim(1);
    }
    std::vector<double> out(static_cast<std::size_t>(R * C));
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t W = p.dim(1);
        for (std::int64_t r = 0; r < R; ++r)
            std::copy_n(p.data().data() + r * W, W, out.data() + r * C + off);
        off += W;
    }
    std::vector<std::shared_ptr<TensorNode>> grad_parents;
    std::vector<std::pair<std::shared_ptr<TensorNode>, std::int64_t>> placed;
    off = 0;
    for (const auto& p : parts) {
        if (p.requires_grad()) {
            grad_parents.push_back(p.node());
            placed.emplace_back(p.node(), off);
        }
        off += p.dim(1);
    }
    return make_result({R, C}, std::move(out), std::move(grad_parents),
                       [placed, R, C](TensorNode& self) {
                           for (const auto& [pn, o] : placed) {
                               pn->ensure_grad();
                               const std::int64_t W = pn->shape[1];
                               for (std::int64_t r = 0; r < R; ++r)
                                   for (std::int64_t c = 0; c < W; ++c)
                                       pn->grad[static_cast<std::size_t>(r * W + c)] +=
                                           self.grad[static_cast<std::size_t>(r * C + o + c)];
                           }
                       });
}

Tensor column(const Tensor& x, std::int64_t j) {
    require_2d(x, "column");
    const std::int64_t R = x.dim(0), C = x.dim(1);
    if (j < 0 || j >= C)
        throw shape_error("column: index " + std::to_string(j) + " outside width " +
                          std::to_string(C));
    std::vector<double> out(static_cast<std::size_t>(R));
    for (std::int64_t r = 0; r < R; ++r)
        out[static_cast<std::size_t>(r)] = x.data()[static_cast<std::size_t>(r * C + j)];
    auto xn = x.node();
    return make_result({R}, std::move(out), grad_parents_of({x}), [xn, R, C, j](TensorNode& self) {
        xn->ensure_grad();
        for (std::int64_t r = 0; r < R; ++r)
            xn->grad[static_cast<std::size_t>(r * C + j)] += self.grad[static_cast<std::size_t>(r)];
    });
}

Tensor colwise_scale(const Tensor& x, const Tensor& s) {
    require_2d(x, "colwise_scale");
    if (s.ndim() != 1 || s.dim(0) != x.dim(0))
        throw shape_error("colwise_scale: scale " + shape_str(s.shape()) + " vs x " +
                          shape_str(x.shape()));
    const std::int64_t R = x.dim(0), C = x.dim(1);
    std::vector<double> out(x.data().size());
    for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c)
            out[static_cast<std::size_t>(r * C + c)] =
                x.data()[static_cast<std::size_t>(r * C + c)] * s.data()[static_cast<std::size_t>(r)];
    auto xn = x.node(), sn = s.node();
    return make_result(x.shape(), std::move(out), grad_parents_of({x, s}),
                       [xn, sn, R, C](TensorNode& self) {
                           if (xn->requires_grad) {
                               xn->ensure_grad();
                               for (std::int64_t r = 0; r < R; ++r)
                                   for (std::int64_t c = 0; c < C; ++c)
                                       xn->grad[static_cast<std::size_t>(r * C + c)] +=
                                           self.grad[static_cast<std::size_t>(r * C + c)] *
                                           sn->data[static_cast<std::size_t>(r)];
                           }
                           if (sn->requires_grad) {
                               sn->ensure_grad();
                               for (std::int64_t r = 0; r < R; ++r) {
                                   double acc = 0.0;
                                   for (std::int64_t c = 0; c < C; ++c)
                                       acc += self.grad[static_cast<std::size_t>(r * C + c)] *
                                              xn->data[static_cast<std::size_t>(r * C + c)];
                                   sn->grad[static_cast<std::size_t>(r)] += acc;
                               }
                           }
                       });
}

Tensor mean_rows(const Tensor& x) {
    require_2d(x, "mean_rows");
    const std::int64_t R = x.dim(0), C = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(C), 0.0);
    for (std::int64_t r = 0; r < R; ++r)
        for (std::int64_t c = 0; c < C; ++c)
            out[static_cast<std::size_t>(c)] += x.data()[static_cast<std::size_t>(r * C + c)];
    for (auto& v : out)
        v /= static_cast<double>(R);
    auto xn = x.node();
    return make_result({C}, std::move(out), grad_parents_of({x}), [xn, R, C](TensorNode& self) {
        xn->ensure_grad();
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c)
                xn->grad[static_cast<std::size_t>(r * C + c)] +=
                    self.grad[static_cast<std::size_t>(c)] / static_cast<double>(R);
    });
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data())
        s += v;
    auto xn = x.node();
    return make_result({1}, {s}, grad_parents_of({x}), [xn](TensorNode& self) {
        xn->ensure_grad();
        for (auto& g : xn->grad)
            g += self.grad[0];
    });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 1 || b.ndim() != 1 || a.dim(0) != b.dim(0))
        throw shape_error("dot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    // extended accumulator; keeps short dot products correctly rounded
    long double s = 0.0L;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        s += static_cast<long double>(a.data()[i]) * b.data()[i];
    auto an = a.node(), bn = b.node();
    return make_result({1}, {static_cast<double>(s)}, grad_parents_of({a, b}),
                       [an, bn](TensorNode& self) {
                           if (an->requires_grad) {
                               an->ensure_grad();
                               for (std::size_t i = 0; i < an->grad.size(); ++i)
                                   an->grad[i] += self.grad[0] * bn->data[i];
                           }
                           if (bn->requires_grad) {
                               bn->ensure_grad();
                               for (std::size_t i = 0; i < bn->grad.size(); ++i)
                                   bn->grad[i] += self.grad[0] * an->data[i];
                           }
                       });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    require_2d(logits, "cross_entropy");
    const std::int64_t T = logits.dim(0), V = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != T)
        throw contract_error("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(T) + " positions");
    if (T < 1)
        throw contract_error("cross_entropy: empty batch");
    std::vector<double> probs(logits.data().size());
    softmax_rows(logits.data().data(), probs.data(), T, V);
    double loss = 0.0;
    for (std::int64_t t = 0; t < T; ++t) {
        int y = targets[static_cast<std::size_t>(t)];
        if (y < 0 || y >= V)
            throw index_error("cross_entropy: target " + std::to_string(y) + " out of range [0," +
                              std::to_string(V) + ")");
        loss += -std::log(std::max(probs[static_cast<std::size_t>(t * V + y)], 1e-300));
    }
    loss /= static_cast<double>(T);
    auto ln = logits.node();
    auto tgt = targets;
    return make_result({1}, {loss}, grad_parents_of({logits}),
                       [ln, tgt, T, V, probs](TensorNode& self) {
                           ln->ensure_grad();
                           const double g = self.grad[0] / static_cast<double>(T);
                           for (std::int64_t t = 0; t < T; ++t) {
                               double* dst = ln->grad.data() + t * V;
                               const double* p = probs.data() + t * V;
                               for (std::int64_t v = 0; v < V; ++v)
                                   dst[v] += g * p[v];
                               dst[tgt[static_cast<std::size_t>(t)]] -= g;
                           }
                       });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw contract_error("dropout: p must be in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0)
        return x;
    std::vector<double> mask(x.data().size());
    const double keep = 1.0 / (1.0 - p);
    for (auto& m : mask)
        m = (rng.uniform() >= p) ? keep : 0.0;
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = x.data()[i] * mask[i];
    auto xn = x.node();
    return make_result(x.shape(), std::move(out), grad_parents_of({x}),
                       [xn, mask](TensorNode& self) {
                           xn->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                               xn->grad[i] += self.grad[i] * mask[i];
                       });
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw contract_error("backward: loss must be a scalar tensor");
    auto root = loss.node();
    if (!root->requires_grad)
        return;

    // iterative DFS postorder; reversed it gives a valid reverse-topological
    // visit order where each node is processed exactly once
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame {
        TensorNode* n;
        std::size_t next;
    };
    std::vector<Frame> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    // every visited node gets a fresh pass gradient; leaves fold the pass
    // result into a persistent accumulator afterwards, so repeating backward
    // without zeroing doubles leaf grads exactly
    for (TensorNode* n : order)
        n->grad.assign(n->data.size(), 0.0);
    root->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn)
            n->backward_fn(*n);
    }

    for (TensorNode* n : order) {
        if (!n->is_leaf())
            continue;
        if (n->grad_acc.empty()) {
            n->grad_acc = n->grad;
        } else {
            for (std::size_t i = 0; i < n->grad.size(); ++i)
                n->grad_acc[i] += n->grad[i];
        }
        n->grad = n->grad_acc;
    }
}

// ---- optimizer -------------------------------------------------------------

void adamw_step(std::vector<double>& param, const std::vector<double>& grad, AdamState& state,
                const AdamConfig& cfg) {
    if (param.size() != grad.size())
        throw contract_error("adamw_step: param/grad size mismatch, " + std::to_string(param.size()) +
                             " vs " + std::to_string(grad.size()));
    if (cfg.lr <= 0.0)
        throw contract_error("adamw_step: lr must be positive");
    if (state.m.empty())
        state.m.assign(param.size(), 0.0);
    if (state.v.empty())
        state.v.assign(param.size(), 0.0);
    if (state.m.size() != param.size() || state.v.size() != param.size())
        throw contract_error("adamw_step: state shaped unlike params");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        // decoupled weight decay
        param[i] -= cfg.lr * cfg.weight_decay * param[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

void AdamW::step() {
    static const std::vector<double> kZero;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.has_grad()) {
            // untouched params still advance bias-correction consistently
            std::vector<double> zeros(p.data().size(), 0.0);
            adamw_step(p.data(), zeros, states_[i], cfg_);
        } else {
            adamw_step(p.data(), p.grad(), states_[i], cfg_);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_)
        p.zero_grad();
}

} // namespace proper
