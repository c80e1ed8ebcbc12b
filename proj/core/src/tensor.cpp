#include "tscm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tscm {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

TensorNode& deref(const Tensor& t, const char* op) {
    if (!t.defined()) throw NumericError(std::string(op) + ": undefined tensor");
    return *t.node();
}

/// All tape-attached inputs must agree on the tape; returns it (or null).
Tape* resolve_tape(std::initializer_list<const Tensor*> inputs, const char* op) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
        Tape* tt = t->node()->tape;
        if (!tt) continue;
        if (tape && tape != tt)
            throw NumericError(std::string(op) + ": inputs recorded on different tapes");
        tape = tt;
    }
    return tape;
}

/// Builds a result node, records it when a tape is involved, and installs
/// the backprop closure only when gradient can actually flow.
Tensor make_result(std::vector<std::size_t> shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs, const char* op,
                   std::function<void(TensorNode&)> backprop) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    Tape* tape = resolve_tape(inputs, op);
    if (tape) {
        bool needs = false;
        for (const Tensor* t : inputs) needs = needs || t->node()->needs_grad;
        node->needs_grad = needs;
        for (const Tensor* t : inputs) node->parents.push_back(t->node_ptr());
        if (needs) node->backprop = std::move(backprop);
        tape->record(node);
    }
    return Tensor(std::move(node));
}

bool wants_grad(const TensorNode& n) { return n.needs_grad; }

void require_same_shape(const TensorNode& a, const TensorNode& b, const char* op) {
    if (a.shape != b.shape)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                             " vs " + shape_str(b.shape));
}

void require_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

// --- Tensor ---------------------------------------------------------------

Tensor Tensor::scalar(double v) { return from({}, {v}); }

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("Tensor::from: shape " + shape_str(shape) + " expects " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(data.size()));
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0));
}

const std::vector<std::size_t>& Tensor::shape() const { return deref(*this, "shape").shape; }
const std::vector<double>& Tensor::values() const { return deref(*this, "values").value; }
std::size_t Tensor::numel() const { return deref(*this, "numel").numel(); }

double Tensor::item() const {
    const TensorNode& n = deref(*this, "item");
    if (n.numel() != 1)
        throw DimensionError("item: tensor has " + std::to_string(n.numel()) + " elements");
    return n.value[0];
}

bool Tensor::on_tape() const { return deref(*this, "on_tape").tape != nullptr; }
bool Tensor::requires_grad() const { return deref(*this, "requires_grad").requires_grad; }

std::vector<double> Tensor::grad() const {
    const TensorNode& n = deref(*this, "grad");
    if (n.grad.size() == n.value.size()) return n.grad;
    return std::vector<double>(n.value.size(), 0.0);
}

// --- Tape -----------------------------------------------------------------

void Tape::record(const std::shared_ptr<TensorNode>& node) {
    node->tape = this;
    node->tape_index = nodes_.size();
    nodes_.push_back(node);
}

Tensor Tape::variable(std::vector<std::size_t> shape, std::vector<double> data) {
    Tensor t = Tensor::from(std::move(shape), std::move(data));
    t.node()->requires_grad = true;
    t.node()->needs_grad = true;
    record(t.node_ptr());
    return t;
}

Tensor Tape::variable(const Tensor& value) {
    return variable(value.shape(), value.values());
}

Tensor Tape::constant(std::vector<std::size_t> shape, std::vector<double> data) {
    Tensor t = Tensor::from(std::move(shape), std::move(data));
    record(t.node_ptr());
    return t;
}

Tensor Tape::constant(const Tensor& value) {
    return constant(value.shape(), value.values());
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.node()->tape == nullptr)
        throw NumericError("backward: loss is detached from any tape");
    if (loss.node()->tape != this)
        throw NumericError("backward: loss was recorded on a different tape");
    if (loss.numel() != 1)
        throw NumericError("backward: loss must be scalar, got shape " +
                           shape_str(loss.shape()));
    if (backward_done_)
        throw NumericError("backward: tape already consumed; call reset() first");
    backward_done_ = true;

    TensorNode* root = loss.node();
    root->ensure_grad();
    root->grad[0] = 1.0;
    for (std::size_t i = root->tape_index + 1; i-- > 0;) {
        TensorNode& n = *nodes_[i];
        if (!n.grad.empty() && n.backprop) n.backprop(n);
    }
}

void Tape::reset() {
    for (auto& n : nodes_) n->grad.clear();
    backward_done_ = false;
}

// --- elementwise / structural ops ------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    TensorNode& na = deref(a, "matmul");
    TensorNode& nb = deref(b, "matmul");
    if (na.shape.size() != 2 || nb.shape.size() != 2)
        throw DimensionError("matmul: expects matrices, got " + shape_str(na.shape) +
                             " and " + shape_str(nb.shape));
    const std::size_t m = na.shape[0], k = na.shape[1], k2 = nb.shape[0], n = nb.shape[1];
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(na.shape) +
                             " vs " + shape_str(nb.shape));
    std::vector<double> out(m * n, 0.0);
    const double* A = na.value.data();
    const double* B = nb.value.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double av = A[i * k + l];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[l * n + j];
        }
    return make_result({m, n}, std::move(out), {&a, &b}, "matmul", [m, k, n](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        const double* G = self.grad.data();
        if (wants_grad(pa)) {
            pa.ensure_grad();
            const double* B = pb.value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double g = G[i * n + j];
                    for (std::size_t l = 0; l < k; ++l) pa.grad[i * k + l] += g * B[l * n + j];
                }
        }
        if (wants_grad(pb)) {
            pb.ensure_grad();
            const double* A = pa.value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t l = 0; l < k; ++l) {
                    const double av = A[i * k + l];
                    for (std::size_t j = 0; j < n; ++j) pb.grad[l * n + j] += av * G[i * n + j];
                }
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    TensorNode& na = deref(a, "add");
    TensorNode& nb = deref(b, "add");
    require_same_shape(na, nb, "add");
    std::vector<double> out(na.value);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += nb.value[i];
    return make_result(na.shape, std::move(out), {&a, &b}, "add", [](TensorNode& self) {
        for (int p = 0; p < 2; ++p) {
            TensorNode& par = *self.parents[p];
            if (!wants_grad(par)) continue;
            par.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) par.grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    TensorNode& na = deref(a, "sub");
    TensorNode& nb = deref(b, "sub");
    require_same_shape(na, nb, "sub");
    std::vector<double> out(na.value);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= nb.value[i];
    return make_result(na.shape, std::move(out), {&a, &b}, "sub", [](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        if (wants_grad(pa)) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (wants_grad(pb)) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    TensorNode& na = deref(a, "mul");
    TensorNode& nb = deref(b, "mul");
    require_same_shape(na, nb, "mul");
    std::vector<double> out(na.value);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= nb.value[i];
    return make_result(na.shape, std::move(out), {&a, &b}, "mul", [](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        if (wants_grad(pa)) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pa.grad[i] += self.grad[i] * pb.value[i];
        }
        if (wants_grad(pb)) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pb.grad[i] += self.grad[i] * pa.value[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    TensorNode& na = deref(a, "scale");
    std::vector<double> out(na.value);
    for (double& v : out) v *= c;
    return make_result(na.shape, std::move(out), {&a}, "scale", [c](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        if (!wants_grad(pa)) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += c * self.grad[i];
    });
}

Tensor add_const(const Tensor& a, double c) {
    TensorNode& na = deref(a, "add_const");
    std::vector<double> out(na.value);
    for (double& v : out) v += c;
    return make_result(na.shape, std::move(out), {&a}, "add_const", [](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        if (!wants_grad(pa)) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    });
}

Tensor relu(const Tensor& a) {
    TensorNode& na = deref(a, "relu");
    Tape* tape = na.tape;
    if (tape) {
        for (double v : na.value) {
            if (std::abs(v) < Tape::kink_tolerance) tape->note_hinge_boundary();
            tape->note_relu_state(v > 0.0);
        }
    }
    std::vector<double> out(na.value);
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    return make_result(na.shape, std::move(out), {&a}, "relu", [](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        if (!wants_grad(pa)) return;
        pa.ensure_grad();
        // subgradient 0 at the kink
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (pa.value[i] > 0.0) pa.grad[i] += self.grad[i];
    });
}

Tensor sqrt_elem(const Tensor& a) {
    TensorNode& na = deref(a, "sqrt_elem");
    Tape* tape = na.tape;
    std::vector<double> out(na.value);
    for (double& v : out) {
        if (v < 0.0) throw NumericError("sqrt_elem: negative input");
        if (tape && v < Tape::kink_tolerance) tape->note_hinge_boundary();
        v = std::sqrt(v);
    }
    return make_result(na.shape, std::move(out), {&a}, "sqrt_elem", [](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        if (!wants_grad(pa)) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (self.value[i] > 0.0) pa.grad[i] += self.grad[i] * 0.5 / self.value[i];
    });
}

Tensor softmax_rows(const Tensor& x) {
    TensorNode& nx = deref(x, "softmax_rows");
    require_finite(nx.value, "softmax_rows");
    std::size_t rows, cols;
    if (nx.shape.size() == 2) {
        rows = nx.shape[0];
        cols = nx.shape[1];
    } else if (nx.shape.size() == 1) {
        rows = 1;
        cols = nx.shape[0];
    } else {
        throw DimensionError("softmax_rows: expects vector or matrix, got " +
                             shape_str(nx.shape));
    }
    if (cols == 0) throw DimensionError("softmax_rows: empty rows");
    std::vector<double> out(nx.value.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = nx.value.data() + r * cols;
        double* o = out.data() + r * cols;
        double mx = in[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (std::size_t j = 0; j < cols; ++j) o[j] /= sum;
    }
    return make_result(nx.shape, std::move(out), {&x}, "softmax_rows",
                       [rows, cols](TensorNode& self) {
                           TensorNode& pa = *self.parents[0];
                           if (!wants_grad(pa)) return;
                           pa.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* y = self.value.data() + r * cols;
                               const double* g = self.grad.data() + r * cols;
                               double dot = 0.0;
                               for (std::size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
                               for (std::size_t j = 0; j < cols; ++j)
                                   pa.grad[r * cols + j] += y[j] * (g[j] - dot);
                           }
                       });
}

namespace {
constexpr double kNormEps = 1e-12;

void l2_row_backward(const double* y, const double* g, double norm, double* out,
                     std::size_t n) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
    for (std::size_t j = 0; j < n; ++j) out[j] += (g[j] - y[j] * dot) / norm;
}
}  // namespace

Tensor l2_normalize(const Tensor& x) {
    TensorNode& nx = deref(x, "l2_normalize");
    double sq = 0.0;
    for (double v : nx.value) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!(norm > kNormEps))
        throw NumericError("l2_normalize: degenerate input, norm " + std::to_string(norm));
    std::vector<double> out(nx.value);
    for (double& v : out) v /= norm;
    return make_result(nx.shape, std::move(out), {&x}, "l2_normalize",
                       [norm](TensorNode& self) {
                           TensorNode& pa = *self.parents[0];
                           if (!wants_grad(pa)) return;
                           pa.ensure_grad();
                           l2_row_backward(self.value.data(), self.grad.data(), norm,
                                           pa.grad.data(), self.value.size());
                       });
}

Tensor l2_normalize_rows(const Tensor& x) {
    TensorNode& nx = deref(x, "l2_normalize_rows");
    if (nx.shape.size() != 2)
        throw DimensionError("l2_normalize_rows: expects a matrix, got " + shape_str(nx.shape));
    const std::size_t rows = nx.shape[0], cols = nx.shape[1];
    std::vector<double> out(nx.value);
    std::vector<double> norms(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (std::size_t j = 0; j < cols; ++j) sq += out[r * cols + j] * out[r * cols + j];
        norms[r] = std::sqrt(sq);
        if (norms[r] > kNormEps)
            for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] /= norms[r];
        else
            for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = 0.0;
    }
    return make_result(nx.shape, std::move(out), {&x}, "l2_normalize_rows",
                       [rows, cols, norms](TensorNode& self) {
                           TensorNode& pa = *self.parents[0];
                           if (!wants_grad(pa)) return;
                           pa.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                               if (norms[r] <= kNormEps) continue;
                               l2_row_backward(self.value.data() + r * cols,
                                               self.grad.data() + r * cols, norms[r],
                                               pa.grad.data() + r * cols, cols);
                           }
                       });
}

Tensor concat(const Tensor& a, const Tensor& b) {
    TensorNode& na = deref(a, "concat");
    TensorNode& nb = deref(b, "concat");
    if (na.shape.empty() || nb.shape.empty() || na.shape.size() != nb.shape.size())
        throw DimensionError("concat: rank mismatch " + shape_str(na.shape) + " vs " +
                             shape_str(nb.shape));
    for (std::size_t d = 0; d + 1 < na.shape.size(); ++d)
        if (na.shape[d] != nb.shape[d])
            throw DimensionError("concat: non-concatenated extents disagree, " +
                                 shape_str(na.shape) + " vs " + shape_str(nb.shape));
    const std::size_t wa = na.shape.back(), wb = nb.shape.back();
    const std::size_t outer = na.numel() / std::max<std::size_t>(wa, 1);
    std::vector<std::size_t> shape = na.shape;
    shape.back() = wa + wb;
    std::vector<double> out(outer * (wa + wb));
    for (std::size_t r = 0; r < outer; ++r) {
        std::copy_n(na.value.data() + r * wa, wa, out.data() + r * (wa + wb));
        std::copy_n(nb.value.data() + r * wb, wb, out.data() + r * (wa + wb) + wa);
    }
    return make_result(std::move(shape), std::move(out), {&a, &b}, "concat",
                       [outer, wa, wb](TensorNode& self) {
                           TensorNode& pa = *self.parents[0];
                           TensorNode& pb = *self.parents[1];
                           const std::size_t w = wa + wb;
                           if (wants_grad(pa)) {
                               pa.ensure_grad();
                               for (std::size_t r = 0; r < outer; ++r)
                                   for (std::size_t j = 0; j < wa; ++j)
                                       pa.grad[r * wa + j] += self.grad[r * w + j];
                           }
                           if (wants_grad(pb)) {
                               pb.ensure_grad();
                               for (std::size_t r = 0; r < outer; ++r)
                                   for (std::size_t j = 0; j < wb; ++j)
                                       pb.grad[r * wb + j] += self.grad[r * w + wa + j];
                           }
                       });
}

Tensor slice_last(const Tensor& a, std::size_t start, std::size_t len) {
    TensorNode& na = deref(a, "slice_last");
    if (na.shape.empty()) throw DimensionError("slice_last: scalar input");
    const std::size_t w = na.shape.back();
    if (start + len > w)
        throw DimensionError("slice_last: range [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") exceeds width " +
                             std::to_string(w));
    const std::size_t outer = na.numel() / std::max<std::size_t>(w, 1);
    std::vector<std::size_t> shape = na.shape;
    shape.back() = len;
    std::vector<double> out(outer * len);
    for (std::size_t r = 0; r < outer; ++r)
        std::copy_n(na.value.data() + r * w + start, len, out.data() + r * len);
    return make_result(std::move(shape), std::move(out), {&a}, "slice_last",
                       [outer, w, start, len](TensorNode& self) {
                           TensorNode& pa = *self.parents[0];
                           if (!wants_grad(pa)) return;
                           pa.ensure_grad();
                           for (std::size_t r = 0; r < outer; ++r)
                               for (std::size_t j = 0; j < len; ++j)
                                   pa.grad[r * w + start + j] += self.grad[r * len + j];
                       });
}

Tensor reduce_sum(const Tensor& a) {
    TensorNode& na = deref(a, "reduce_sum");
    double s = 0.0;
    for (double v : na.value) s += v;
    return make_result({}, {s}, {&a}, "reduce_sum", [](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        if (!wants_grad(pa)) return;
        pa.ensure_grad();
        const double g = self.grad[0];
        for (double& gv : pa.grad) gv += g;
    });
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    TensorNode& na = deref(a, "reshape");
    if (shape_numel(shape) != na.numel())
        throw DimensionError("reshape: " + shape_str(na.shape) + " to " + shape_str(shape) +
                             " changes element count");
    std::vector<double> out(na.value);
    return make_result(std::move(shape), std::move(out), {&a}, "reshape", [](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        if (!wants_grad(pa)) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    TensorNode& nm = deref(m, "add_rowvec");
    TensorNode& nv = deref(v, "add_rowvec");
    if (nm.shape.size() != 2 || nv.shape.size() != 1 || nm.shape[1] != nv.shape[0])
        throw DimensionError("add_rowvec: incompatible shapes " + shape_str(nm.shape) +
                             " and " + shape_str(nv.shape));
    const std::size_t rows = nm.shape[0], cols = nm.shape[1];
    std::vector<double> out(nm.value);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] += nv.value[j];
    return make_result(nm.shape, std::move(out), {&m, &v}, "add_rowvec",
                       [rows, cols](TensorNode& self) {
                           TensorNode& pm = *self.parents[0];
                           TensorNode& pv = *self.parents[1];
                           if (wants_grad(pm)) {
                               pm.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   pm.grad[i] += self.grad[i];
                           }
                           if (wants_grad(pv)) {
                               pv.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < cols; ++j)
                                       pv.grad[j] += self.grad[r * cols + j];
                           }
                       });
}

Tensor transpose(const Tensor& m) {
    TensorNode& nm = deref(m, "transpose");
    if (nm.shape.size() != 2)
        throw DimensionError("transpose: expects a matrix, got " + shape_str(nm.shape));
    const std::size_t rows = nm.shape[0], cols = nm.shape[1];
    std::vector<double> out(nm.value.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + r] = nm.value[r * cols + j];
    return make_result({cols, rows}, std::move(out), {&m}, "transpose",
                       [rows, cols](TensorNode& self) {
                           TensorNode& pa = *self.parents[0];
                           if (!wants_grad(pa)) return;
                           pa.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < cols; ++j)
                                   pa.grad[r * cols + j] += self.grad[j * rows + r];
                       });
}

Tensor scale_rows(const Tensor& m, const Tensor& v) {
    TensorNode& nm = deref(m, "scale_rows");
    TensorNode& nv = deref(v, "scale_rows");
    if (nm.shape.size() != 2 || nv.shape.size() != 1 || nm.shape[0] != nv.shape[0])
        throw DimensionError("scale_rows: incompatible shapes " + shape_str(nm.shape) +
                             " and " + shape_str(nv.shape));
    const std::size_t rows = nm.shape[0], cols = nm.shape[1];
    std::vector<double> out(nm.value);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] *= nv.value[r];
    return make_result(nm.shape, std::move(out), {&m, &v}, "scale_rows",
                       [rows, cols](TensorNode& self) {
                           TensorNode& pm = *self.parents[0];
                           TensorNode& pv = *self.parents[1];
                           if (wants_grad(pm)) {
                               pm.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < cols; ++j)
                                       pm.grad[r * cols + j] +=
                                           self.grad[r * cols + j] * pv.value[r];
                           }
                           if (wants_grad(pv)) {
                               pv.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   double s = 0.0;
                                   for (std::size_t j = 0; j < cols; ++j)
                                       s += self.grad[r * cols + j] * pm.value[r * cols + j];
                                   pv.grad[r] += s;
                               }
                           }
                       });
}

Tensor col_sums(const Tensor& m) {
    TensorNode& nm = deref(m, "col_sums");
    if (nm.shape.size() != 2)
        throw DimensionError("col_sums: expects a matrix, got " + shape_str(nm.shape));
    const std::size_t rows = nm.shape[0], cols = nm.shape[1];
    std::vector<double> out(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) out[j] += nm.value[r * cols + j];
    return make_result({cols}, std::move(out), {&m}, "col_sums",
                       [rows, cols](TensorNode& self) {
                           TensorNode& pa = *self.parents[0];
                           if (!wants_grad(pa)) return;
                           pa.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < cols; ++j)
                                   pa.grad[r * cols + j] += self.grad[j];
                       });
}

Tensor detach(const Tensor& a) {
    TensorNode& na = deref(a, "detach");
    return Tensor::from(na.shape, na.value);
}

// --- image ops --------------------------------------------------------------

Tensor conv2d_3x3(const Tensor& image, const Tensor& weights, const Tensor& bias) {
    TensorNode& ni = deref(image, "conv2d_3x3");
    TensorNode& nw = deref(weights, "conv2d_3x3");
    TensorNode& nb = deref(bias, "conv2d_3x3");
    if (ni.shape.size() != 3)
        throw DimensionError("conv2d_3x3: image must be CxHxW, got " + shape_str(ni.shape));
    if (nw.shape.size() != 4 || nw.shape[2] != 3 || nw.shape[3] != 3)
        throw DimensionError("conv2d_3x3: weights must be [out,in,3,3], got " +
                             shape_str(nw.shape));
    const std::size_t C = ni.shape[0], H = ni.shape[1], W = ni.shape[2];
    const std::size_t O = nw.shape[0];
    if (nw.shape[1] != C || nb.shape != std::vector<std::size_t>{O})
        throw DimensionError("conv2d_3x3: channel mismatch, image " + shape_str(ni.shape) +
                             ", weights " + shape_str(nw.shape) + ", bias " +
                             shape_str(nb.shape));
    std::vector<double> out(O * H * W);
    const double* in = ni.value.data();
    const double* w = nw.value.data();
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double acc = nb.value[o];
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t dy = 0; dy < 3; ++dy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + dy) - 1;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t dx = 0; dx < 3; ++dx) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + dx) - 1;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            acc += w[((o * C + c) * 3 + dy) * 3 + dx] *
                                   in[(c * H + iy) * W + ix];
                        }
                    }
                out[(o * H + y) * W + x] = acc;
            }
    return make_result({O, H, W}, std::move(out), {&image, &weights, &bias}, "conv2d_3x3",
                       [C, H, W, O](TensorNode& self) {
                           TensorNode& pi = *self.parents[0];
                           TensorNode& pw = *self.parents[1];
                           TensorNode& pb = *self.parents[2];
                           const bool gi = wants_grad(pi), gw = wants_grad(pw),
                                      gb = wants_grad(pb);
                           if (gi) pi.ensure_grad();
                           if (gw) pw.ensure_grad();
                           if (gb) pb.ensure_grad();
                           const double* G = self.grad.data();
                           for (std::size_t o = 0; o < O; ++o)
                               for (std::size_t y = 0; y < H; ++y)
                                   for (std::size_t x = 0; x < W; ++x) {
                                       const double g = G[(o * H + y) * W + x];
                                       if (g == 0.0) continue;
                                       if (gb) pb.grad[o] += g;
                                       if (!gi && !gw) continue;
                                       for (std::size_t c = 0; c < C; ++c)
                                           for (std::size_t dy = 0; dy < 3; ++dy) {
                                               const std::ptrdiff_t iy =
                                                   static_cast<std::ptrdiff_t>(y + dy) - 1;
                                               if (iy < 0 ||
                                                   iy >= static_cast<std::ptrdiff_t>(H))
                                                   continue;
                                               for (std::size_t dx = 0; dx < 3; ++dx) {
                                                   const std::ptrdiff_t ix =
                                                       static_cast<std::ptrdiff_t>(x + dx) - 1;
                                                   if (ix < 0 ||
                                                       ix >= static_cast<std::ptrdiff_t>(W))
                                                       continue;
                                                   const std::size_t wi =
                                                       ((o * C + c) * 3 + dy) * 3 + dx;
                                                   const std::size_t ii =
                                                       (c * H + iy) * W + ix;
                                                   if (gi)
                                                       pi.grad[ii] += g * pw.value[wi];
                                                   if (gw)
                                                       pw.grad[wi] += g * pi.value[ii];
                                               }
                                           }
                                   }
                       });
}

Tensor patch_tokens(const Tensor& image, std::size_t grid) {
    TensorNode& ni = deref(image, "patch_tokens");
    if (ni.shape.size() != 3)
        throw DimensionError("patch_tokens: image must be CxHxW, got " + shape_str(ni.shape));
    const std::size_t C = ni.shape[0], H = ni.shape[1], W = ni.shape[2];
    if (grid == 0 || H % grid != 0 || W % grid != 0)
        throw DimensionError("patch_tokens: grid " + std::to_string(grid) +
                             " does not divide " + shape_str(ni.shape));
    const std::size_t ph = H / grid, pw = W / grid, t = grid * grid;
    const double inv = 1.0 / static_cast<double>(ph * pw);
    std::vector<double> out(t * C, 0.0);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t tok = (y / ph) * grid + (x / pw);
                out[tok * C + c] += ni.value[(c * H + y) * W + x] * inv;
            }
    return make_result({t, C}, std::move(out), {&image}, "patch_tokens",
                       [C, H, W, grid, ph, pw, inv](TensorNode& self) {
                           TensorNode& pa = *self.parents[0];
                           if (!wants_grad(pa)) return;
                           pa.ensure_grad();
                           for (std::size_t c = 0; c < C; ++c)
                               for (std::size_t y = 0; y < H; ++y)
                                   for (std::size_t x = 0; x < W; ++x) {
                                       const std::size_t tok = (y / ph) * grid + (x / pw);
                                       pa.grad[(c * H + y) * W + x] +=
                                           self.grad[tok * C + c] * inv;
                                   }
                       });
}

Tensor global_mean_pool(const Tensor& image) {
    TensorNode& ni = deref(image, "global_mean_pool");
    if (ni.shape.size() != 3)
        throw DimensionError("global_mean_pool: image must be CxHxW, got " +
                             shape_str(ni.shape));
    const std::size_t C = ni.shape[0], HW = ni.shape[1] * ni.shape[2];
    const double inv = 1.0 / static_cast<double>(HW);
    std::vector<double> out(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < HW; ++i) s += ni.value[c * HW + i];
        out[c] = s * inv;
    }
    return make_result({C}, std::move(out), {&image}, "global_mean_pool",
                       [C, HW, inv](TensorNode& self) {
                           TensorNode& pa = *self.parents[0];
                           if (!wants_grad(pa)) return;
                           pa.ensure_grad();
                           for (std::size_t c = 0; c < C; ++c) {
                               const double g = self.grad[c] * inv;
                               for (std::size_t i = 0; i < HW; ++i) pa.grad[c * HW + i] += g;
                           }
                       });
}

}  // namespace tscm
