#pragma once

// Dense row-major tensors with a dynamic reverse-mode tape. Float by default,
// double for high-precision gradient checks. Ops never mutate their inputs;
// every differentiable op records a backward closure on the active tape.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "util.hpp"

namespace cedit {

namespace detail {
inline uint64_t next_tape_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
}

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream ss;
    ss << "[";
    for (size_t i = 0; i < s.size(); ++i) ss << (i ? "x" : "") << s[i];
    ss << "]";
    return ss.str();
}
}  // namespace detail

template <typename T>
struct GradSlotT {
    std::vector<T> value;
    size_t numel = 0;
    bool present = false;

    void ensure() {
        if (value.size() != numel) value.assign(numel, T(0));
    }
    void add(size_t i, T v) { value[i] += v; }
};

template <typename T>
class TapeT;

template <typename T>
class TensorT {
public:
    TensorT() : data_(std::make_shared<std::vector<T>>()) {}

    static TensorT zeros(std::vector<int> shape) {
        TensorT t;
        t.shape_ = std::move(shape);
        t.validate_shape();
        t.data_ = std::make_shared<std::vector<T>>(static_cast<size_t>(t.numel()), T(0));
        return t;
    }

    static TensorT full(std::vector<int> shape, T v) {
        TensorT t = zeros(std::move(shape));
        for (auto& x : *t.data_) x = v;
        t.check_finite("full");
        return t;
    }

    static TensorT from_data(std::vector<int> shape, std::vector<T> data) {
        TensorT t;
        t.shape_ = std::move(shape);
        t.validate_shape();
        if (static_cast<int64_t>(data.size()) != t.numel()) {
            fail(ErrorKind::dimension, "from_data: " + std::to_string(data.size()) +
                                           " values for shape " + detail::shape_str(t.shape_));
        }
        t.data_ = std::make_shared<std::vector<T>>(std::move(data));
        t.check_finite("from_data");
        return t;
    }

    static TensorT randn(std::vector<int> shape, Rng& rng, T stddev) {
        TensorT t = zeros(std::move(shape));
        for (auto& x : *t.data_) x = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const {
        int64_t n = 1;
        for (int d : shape_) n *= d;
        return shape_.empty() ? (data_->empty() ? 0 : 1) : n;
    }
    // 2-D views: rows = product of leading dims, cols = trailing dim.
    int cols() const { return shape_.empty() ? 1 : shape_.back(); }
    int64_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    const std::vector<T>& data() const { return *data_; }
    std::vector<T>& mutable_data() { return *data_; }
    const T* ptr() const { return data_->data(); }
    T* mutable_ptr() { return data_->data(); }
    T at(int64_t r, int64_t c) const { return (*data_)[static_cast<size_t>(r * cols() + c)]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool v) {
        requires_grad_ = v;
        if (v && !gslot_) {
            gslot_ = std::make_shared<GradSlotT<T>>();
            gslot_->numel = static_cast<size_t>(numel());
        }
    }

    // Populated gradient, or nullptr when no backward pass has reached this
    // tensor since the last zero_grad().
    const std::vector<T>* grad() const {
        return (gslot_ && gslot_->present) ? &gslot_->value : nullptr;
    }
    void zero_grad() {
        if (gslot_) {
            gslot_->value.assign(gslot_->numel, T(0));
            gslot_->present = false;
        }
    }

    TensorT clone() const {
        TensorT t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    void check_finite(const char* op) const {
        for (T v : *data_) {
            if (!std::isfinite(static_cast<double>(v))) {
                fail(ErrorKind::numeric, std::string(op) + ": non-finite value in tensor " +
                                             detail::shape_str(shape_));
            }
        }
    }

private:
    void validate_shape() const {
        for (int d : shape_) {
            if (d <= 0) fail(ErrorKind::dimension, "dimension sizes must be positive, got " +
                                                       detail::shape_str(shape_));
        }
    }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<T>> data_;
    std::shared_ptr<GradSlotT<T>> gslot_;
    bool requires_grad_ = false;

    // Linkage onto the active tape. Mutable so recording can attach leaf nodes
    // through const references; stale ids from old tapes are ignored.
    friend class TapeT<T>;
    mutable uint64_t tape_id_ = 0;
    mutable int node_ = -1;
};

template <typename T>
class TapeT {
public:
    struct Record {
        std::string op;
        std::vector<int> inputs;  // node ids, all < output by construction
        int output;
        std::function<void(const std::vector<T>&)> backward;
    };

    TapeT() : id_(detail::next_tape_id()) {}
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    uint64_t id() const { return id_; }
    size_t num_nodes() const { return slots_.size(); }
    const std::vector<Record>& records() const { return records_; }

    // Returns the node id for an op input: existing node, freshly registered
    // leaf, or -1 when the input does not participate in gradients.
    int input_node(const TensorT<T>& t) {
        if (!t.requires_grad_) return -1;
        if (t.tape_id_ == id_ && t.node_ >= 0) return t.node_;
        t.tape_id_ = id_;
        t.node_ = static_cast<int>(slots_.size());
        slots_.push_back(t.gslot_);
        return t.node_;
    }

    int out_node(TensorT<T>& t) {
        t.requires_grad_ = true;
        t.gslot_ = std::make_shared<GradSlotT<T>>();
        t.gslot_->numel = static_cast<size_t>(t.numel());
        t.tape_id_ = id_;
        t.node_ = static_cast<int>(slots_.size());
        slots_.push_back(t.gslot_);
        return t.node_;
    }

    void push(std::string op, std::vector<int> inputs, int output,
              std::function<void(const std::vector<T>&)> backward) {
        std::vector<int> in;
        for (int i : inputs) {
            if (i >= 0) in.push_back(i);
        }
        records_.push_back(Record{std::move(op), std::move(in), output, std::move(backward)});
    }

    std::shared_ptr<GradSlotT<T>> slot(int node) { return slots_[static_cast<size_t>(node)]; }

    // Reverse replay from `loss`, visiting only records reachable from it.
    // Gradients accumulate into each tensor's grad slot.
    void backward(const TensorT<T>& loss) {
        if (loss.tape_id_ != id_ || loss.node_ < 0) {
            fail(ErrorKind::invalid_argument, "backward: loss was not produced on this tape");
        }
        if (loss.numel() != 1) {
            fail(ErrorKind::invalid_argument, "backward: loss must be scalar, got " +
                                                  detail::shape_str(loss.shape()));
        }
        std::vector<char> needed(slots_.size(), 0);
        needed[static_cast<size_t>(loss.node_)] = 1;
        auto& ls = *slots_[static_cast<size_t>(loss.node_)];
        ls.ensure();
        ls.value[0] += T(1);
        ls.present = true;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (!needed[static_cast<size_t>(it->output)]) continue;
            auto& os = *slots_[static_cast<size_t>(it->output)];
            os.ensure();
            it->backward(os.value);
            for (int i : it->inputs) needed[static_cast<size_t>(i)] = 1;
        }
    }

private:
    uint64_t id_;
    std::vector<std::shared_ptr<GradSlotT<T>>> slots_;
    std::vector<Record> records_;
};

// ---------------------------------------------------------------------------
// Ops. Each takes an optional tape; passing nullptr runs pure inference.
// ---------------------------------------------------------------------------

template <typename T>
bool want_grad(const TapeT<T>* tape, std::initializer_list<const TensorT<T>*> ins) {
    if (!tape) return false;
    for (const TensorT<T>* t : ins) {
        if (t->requires_grad()) return true;
    }
    return false;
}

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        fail(ErrorKind::dimension, "matmul: incompatible shapes " +
                                       detail::shape_str(a.shape()) + " x " +
                                       detail::shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> out = TensorT<T>::zeros({m, n});
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.mutable_ptr();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* brow = pb + p * n;
            T* orow = po + i * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    out.check_finite("matmul");
    if (want_grad(tape, {&a, &b})) {
        int na = tape->input_node(a);
        int nb = tape->input_node(b);
        int no = tape->out_node(out);
        tape->push("matmul", {na, nb}, no,
                   [m, k, n, ad = std::make_shared<std::vector<T>>(a.data()),
                    bd = std::make_shared<std::vector<T>>(b.data()),
                    ga = na >= 0 ? tape->slot(na) : nullptr,
                    gb = nb >= 0 ? tape->slot(nb) : nullptr](const std::vector<T>& g) {
                       if (ga) {
                           ga->ensure();
                           // dA = G * B^T
                           for (int i = 0; i < m; ++i) {
                               for (int p = 0; p < k; ++p) {
                                   T acc = 0;
                                   const T* grow = g.data() + i * n;
                                   const T* brow = bd->data() + p * n;
                                   for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                   ga->value[static_cast<size_t>(i * k + p)] += acc;
                               }
                           }
                           ga->present = true;
                       }
                       if (gb) {
                           gb->ensure();
                           // dB = A^T * G
                           for (int p = 0; p < k; ++p) {
                               for (int i = 0; i < m; ++i) {
                                   const T av = (*ad)[static_cast<size_t>(i * k + p)];
                                   const T* grow = g.data() + i * n;
                                   T* brow = gb->value.data() + p * n;
                                   for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                               }
                           }
                           gb->present = true;
                       }
                   });
    }
    return out;
}

template <typename T>
TensorT<T> transpose2d(const TensorT<T>& a, TapeT<T>* tape = nullptr) {
    if (a.ndim() != 2) fail(ErrorKind::dimension, "transpose2d: need 2-D tensor");
    const int m = a.dim(0), n = a.dim(1);
    TensorT<T> out = TensorT<T>::zeros({n, m});
    const T* pa = a.ptr();
    T* po = out.mutable_ptr();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
    }
    if (want_grad(tape, {&a})) {
        int na = tape->input_node(a);
        int no = tape->out_node(out);
        tape->push("transpose2d", {na}, no,
                   [m, n, ga = tape->slot(na)](const std::vector<T>& g) {
                       ga->ensure();
                       for (int i = 0; i < m; ++i) {
                           for (int j = 0; j < n; ++j) {
                               ga->value[static_cast<size_t>(i * n + j)] += g[static_cast<size_t>(j * m + i)];
                           }
                       }
                       ga->present = true;
                   });
    }
    return out;
}

enum class BinOp { add, sub, mul };

template <typename T>
TensorT<T> binary_elementwise(BinOp op, const TensorT<T>& a, const TensorT<T>& b,
                              TapeT<T>* tape) {
    if (!a.same_shape(b)) {
        fail(ErrorKind::dimension, "elementwise: shape mismatch " +
                                       detail::shape_str(a.shape()) + " vs " +
                                       detail::shape_str(b.shape()));
    }
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.mutable_ptr();
    const size_t n = static_cast<size_t>(a.numel());
    switch (op) {
        case BinOp::add: for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
        case BinOp::sub: for (size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
        case BinOp::mul: for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
    }
    out.check_finite(op == BinOp::add ? "add" : op == BinOp::sub ? "sub" : "mul");
    if (want_grad(tape, {&a, &b})) {
        int na = tape->input_node(a);
        int nb = tape->input_node(b);
        int no = tape->out_node(out);
        auto ga = na >= 0 ? tape->slot(na) : nullptr;
        auto gb = nb >= 0 ? tape->slot(nb) : nullptr;
        std::shared_ptr<std::vector<T>> ad, bd;
        if (op == BinOp::mul) {
            ad = std::make_shared<std::vector<T>>(a.data());
            bd = std::make_shared<std::vector<T>>(b.data());
        }
        tape->push("elementwise", {na, nb}, no,
                   [op, ga, gb, ad, bd](const std::vector<T>& g) {
                       if (ga) {
                           ga->ensure();
                           for (size_t i = 0; i < g.size(); ++i) {
                               ga->value[i] += op == BinOp::mul ? g[i] * (*bd)[i] : g[i];
                           }
                           ga->present = true;
                       }
                       if (gb) {
                           gb->ensure();
                           for (size_t i = 0; i < g.size(); ++i) {
                               T v = op == BinOp::mul ? g[i] * (*ad)[i] : g[i];
                               gb->value[i] += op == BinOp::sub ? -v : v;
                           }
                           gb->present = true;
                       }
                   });
    }
    return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
    return binary_elementwise(BinOp::add, a, b, tape);
}
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
    return binary_elementwise(BinOp::sub, a, b, tape);
}
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
    return binary_elementwise(BinOp::mul, a, b, tape);
}

// y[..., j] = x[..., j] * v[j]; the vector broadcasts over the last dimension.
template <typename T>
TensorT<T> scale_by_vector(const TensorT<T>& x, const TensorT<T>& v, TapeT<T>* tape = nullptr) {
    if (v.ndim() != 1 || v.dim(0) != x.cols()) {
        fail(ErrorKind::dimension, "scale_by_vector: vector " + detail::shape_str(v.shape()) +
                                       " does not broadcast over " + detail::shape_str(x.shape()));
    }
    const int64_t rows = x.rows();
    const int n = x.cols();
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    const T* px = x.ptr();
    const T* pv = v.ptr();
    T* po = out.mutable_ptr();
    for (int64_t r = 0; r < rows; ++r) {
        for (int j = 0; j < n; ++j) po[r * n + j] = px[r * n + j] * pv[j];
    }
    out.check_finite("scale_by_vector");
    if (want_grad(tape, {&x, &v})) {
        int nx = tape->input_node(x);
        int nv = tape->input_node(v);
        int no = tape->out_node(out);
        tape->push("scale_by_vector", {nx, nv}, no,
                   [rows, n, gx = nx >= 0 ? tape->slot(nx) : nullptr,
                    gv = nv >= 0 ? tape->slot(nv) : nullptr,
                    xd = std::make_shared<std::vector<T>>(x.data()),
                    vd = std::make_shared<std::vector<T>>(v.data())](const std::vector<T>& g) {
                       if (gx) {
                           gx->ensure();
                           for (int64_t r = 0; r < rows; ++r) {
                               for (int j = 0; j < n; ++j) {
                                   gx->value[static_cast<size_t>(r * n + j)] +=
                                       g[static_cast<size_t>(r * n + j)] * (*vd)[static_cast<size_t>(j)];
                               }
                           }
                           gx->present = true;
                       }
                       if (gv) {
                           gv->ensure();
                           for (int64_t r = 0; r < rows; ++r) {
                               for (int j = 0; j < n; ++j) {
                                   gv->value[static_cast<size_t>(j)] +=
                                       g[static_cast<size_t>(r * n + j)] * (*xd)[static_cast<size_t>(r * n + j)];
                               }
                           }
                           gv->present = true;
                       }
                   });
    }
    return out;
}

template <typename T>
TensorT<T> scale_const(const TensorT<T>& x, T c, TapeT<T>* tape = nullptr) {
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    const size_t n = static_cast<size_t>(x.numel());
    for (size_t i = 0; i < n; ++i) po[i] = px[i] * c;
    out.check_finite("scale_const");
    if (want_grad(tape, {&x})) {
        int nx = tape->input_node(x);
        int no = tape->out_node(out);
        tape->push("scale_const", {nx}, no, [c, gx = tape->slot(nx)](const std::vector<T>& g) {
            gx->ensure();
            for (size_t i = 0; i < g.size(); ++i) gx->value[i] += c * g[i];
            gx->present = true;
        });
    }
    return out;
}

template <typename T>
TensorT<T> silu(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    const size_t n = static_cast<size_t>(x.numel());
    for (size_t i = 0; i < n; ++i) {
        T s = T(1) / (T(1) + std::exp(-px[i]));
        po[i] = px[i] * s;
    }
    out.check_finite("silu");
    if (want_grad(tape, {&x})) {
        int nx = tape->input_node(x);
        int no = tape->out_node(out);
        tape->push("silu", {nx}, no,
                   [gx = tape->slot(nx),
                    xd = std::make_shared<std::vector<T>>(x.data())](const std::vector<T>& g) {
                       gx->ensure();
                       for (size_t i = 0; i < g.size(); ++i) {
                           T xi = (*xd)[i];
                           T s = T(1) / (T(1) + std::exp(-xi));
                           gx->value[i] += g[i] * s * (T(1) + xi * (T(1) - s));
                       }
                       gx->present = true;
                   });
    }
    return out;
}

// Max-subtracted softmax over the trailing dimension of each row.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    const int64_t rows = x.rows();
    const int n = x.cols();
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = px + r * n;
        T* orow = po + r * n;
        T mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= sum;
    }
    out.check_finite("softmax_rows");
    if (want_grad(tape, {&x})) {
        int nx = tape->input_node(x);
        int no = tape->out_node(out);
        tape->push("softmax_rows", {nx}, no,
                   [rows, n, gx = tape->slot(nx),
                    yd = std::make_shared<std::vector<T>>(out.data())](const std::vector<T>& g) {
                       gx->ensure();
                       for (int64_t r = 0; r < rows; ++r) {
                           const T* y = yd->data() + r * n;
                           const T* gr = g.data() + r * n;
                           T dot = 0;
                           for (int j = 0; j < n; ++j) dot += gr[j] * y[j];
                           for (int j = 0; j < n; ++j) {
                               gx->value[static_cast<size_t>(r * n + j)] += y[j] * (gr[j] - dot);
                           }
                       }
                       gx->present = true;
                   });
    }
    return out;
}

// x / sqrt(mean(x^2) + eps) * weight, per trailing-dimension row.
template <typename T>
TensorT<T> rms_norm(const TensorT<T>& x, const TensorT<T>& weight, T eps,
                    TapeT<T>* tape = nullptr) {
    if (weight.ndim() != 1 || weight.dim(0) != x.cols()) {
        fail(ErrorKind::dimension, "rms_norm: weight " + detail::shape_str(weight.shape()) +
                                       " does not match trailing dim of " +
                                       detail::shape_str(x.shape()));
    }
    const int64_t rows = x.rows();
    const int n = x.cols();
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    std::vector<T> inv(static_cast<size_t>(rows));
    const T* px = x.ptr();
    const T* pw = weight.ptr();
    T* po = out.mutable_ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = px + r * n;
        T ms = 0;
        for (int j = 0; j < n; ++j) ms += row[j] * row[j];
        ms /= static_cast<T>(n);
        T iv = T(1) / std::sqrt(ms + eps);
        inv[static_cast<size_t>(r)] = iv;
        for (int j = 0; j < n; ++j) po[r * n + j] = row[j] * iv * pw[j];
    }
    out.check_finite("rms_norm");
    if (want_grad(tape, {&x, &weight})) {
        int nx = tape->input_node(x);
        int nw = tape->input_node(weight);
        int no = tape->out_node(out);
        tape->push("rms_norm", {nx, nw}, no,
                   [rows, n, gx = nx >= 0 ? tape->slot(nx) : nullptr,
                    gw = nw >= 0 ? tape->slot(nw) : nullptr,
                    xd = std::make_shared<std::vector<T>>(x.data()),
                    wd = std::make_shared<std::vector<T>>(weight.data()),
                    invd = std::make_shared<std::vector<T>>(std::move(inv))](const std::vector<T>& g) {
                       for (int64_t r = 0; r < rows; ++r) {
                           const T* row = xd->data() + r * n;
                           const T* gr = g.data() + r * n;
                           const T iv = (*invd)[static_cast<size_t>(r)];
                           if (gw) {
                               gw->ensure();
                               for (int j = 0; j < n; ++j) {
                                   gw->value[static_cast<size_t>(j)] += gr[j] * row[j] * iv;
                               }
                               gw->present = true;
                           }
                           if (gx) {
                               gx->ensure();
                               // gu_j = g_j * w_j; gx = iv*gu - iv^3/n * x * (gu . x)
                               T dot = 0;
                               for (int j = 0; j < n; ++j) dot += gr[j] * (*wd)[static_cast<size_t>(j)] * row[j];
                               const T c = iv * iv * iv * dot / static_cast<T>(n);
                               for (int j = 0; j < n; ++j) {
                                   gx->value[static_cast<size_t>(r * n + j)] +=
                                       iv * gr[j] * (*wd)[static_cast<size_t>(j)] - c * row[j];
                               }
                               gx->present = true;
                           }
                       }
                   });
    }
    return out;
}

// Mean negative log-likelihood over mask-selected rows of [T x V] logits.
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& mask, TapeT<T>* tape = nullptr) {
    if (logits.ndim() != 2) fail(ErrorKind::dimension, "cross_entropy: logits must be 2-D");
    const int rows = logits.dim(0);
    const int vocab = logits.dim(1);
    if (static_cast<int>(targets.size()) != rows || static_cast<int>(mask.size()) != rows) {
        fail(ErrorKind::dimension, "cross_entropy: targets/mask length must equal logit rows");
    }
    int m_count = 0;
    for (int r = 0; r < rows; ++r) {
        if (!mask[static_cast<size_t>(r)]) continue;
        if (targets[static_cast<size_t>(r)] < 0 || targets[static_cast<size_t>(r)] >= vocab) {
            fail(ErrorKind::invalid_argument, "cross_entropy: target id out of vocabulary");
        }
        ++m_count;
    }
    if (m_count == 0) fail(ErrorKind::invalid_argument, "cross_entropy: empty loss, all positions masked out");

    const T* pl = logits.ptr();
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(rows) * vocab, T(0));
    T loss = 0;
    for (int r = 0; r < rows; ++r) {
        if (!mask[static_cast<size_t>(r)]) continue;
        const T* row = pl + static_cast<int64_t>(r) * vocab;
        T mx = row[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        T* prow = probs->data() + static_cast<int64_t>(r) * vocab;
        for (int j = 0; j < vocab; ++j) {
            prow[j] = std::exp(row[j] - mx);
            sum += prow[j];
        }
        for (int j = 0; j < vocab; ++j) prow[j] /= sum;
        loss += -(row[targets[static_cast<size_t>(r)]] - mx - std::log(sum));
    }
    loss /= static_cast<T>(m_count);
    TensorT<T> out = TensorT<T>::from_data({1}, {loss});
    if (want_grad(tape, {&logits})) {
        int nl = tape->input_node(logits);
        int no = tape->out_node(out);
        tape->push("cross_entropy", {nl}, no,
                   [rows, vocab, m_count, targets, mask, probs,
                    gl = tape->slot(nl)](const std::vector<T>& g) {
                       gl->ensure();
                       const T scale = g[0] / static_cast<T>(m_count);
                       for (int r = 0; r < rows; ++r) {
                           if (!mask[static_cast<size_t>(r)]) continue;
                           const T* prow = probs->data() + static_cast<int64_t>(r) * vocab;
                           T* grow = gl->value.data() + static_cast<int64_t>(r) * vocab;
                           for (int j = 0; j < vocab; ++j) grow[j] += scale * prow[j];
                           grow[targets[static_cast<size_t>(r)]] -= scale;
                       }
                       gl->present = true;
                   });
    }
    return out;
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
    T s = 0;
    for (T v : x.data()) s += v;
    TensorT<T> out = TensorT<T>::from_data({1}, {s});
    if (want_grad(tape, {&x})) {
        int nx = tape->input_node(x);
        int no = tape->out_node(out);
        tape->push("sum_all", {nx}, no, [gx = tape->slot(nx)](const std::vector<T>& g) {
            gx->ensure();
            for (auto& v : gx->value) v += g[0];
            gx->present = true;
        });
    }
    return out;
}

template <typename T>
TensorT<T> slice_rows(const TensorT<T>& x, int r0, int r1, TapeT<T>* tape = nullptr) {
    if (x.ndim() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1) {
        fail(ErrorKind::dimension, "slice_rows: bad range [" + std::to_string(r0) + "," +
                                       std::to_string(r1) + ") for " + detail::shape_str(x.shape()));
    }
    const int n = x.dim(1);
    TensorT<T> out = TensorT<T>::zeros({r1 - r0, n});
    std::copy(x.ptr() + static_cast<int64_t>(r0) * n, x.ptr() + static_cast<int64_t>(r1) * n,
              out.mutable_ptr());
    if (want_grad(tape, {&x})) {
        int nx = tape->input_node(x);
        int no = tape->out_node(out);
        tape->push("slice_rows", {nx}, no,
                   [r0, r1, n, gx = tape->slot(nx)](const std::vector<T>& g) {
                       gx->ensure();
                       for (int r = r0; r < r1; ++r) {
                           for (int j = 0; j < n; ++j) {
                               gx->value[static_cast<size_t>(r) * n + j] +=
                                   g[static_cast<size_t>(r - r0) * n + j];
                           }
                       }
                       gx->present = true;
                   });
    }
    return out;
}

template <typename T>
TensorT<T> slice_cols(const TensorT<T>& x, int c0, int c1, TapeT<T>* tape = nullptr) {
    if (x.ndim() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1) {
        fail(ErrorKind::dimension, "slice_cols: bad range [" + std::to_string(c0) + "," +
                                       std::to_string(c1) + ") for " + detail::shape_str(x.shape()));
    }
    const int m = x.dim(0), n = x.dim(1), w = c1 - c0;
    TensorT<T> out = TensorT<T>::zeros({m, w});
    const T* px = x.ptr();
    T* po = out.mutable_ptr();
    for (int i = 0; i < m; ++i) {
        std::copy(px + static_cast<int64_t>(i) * n + c0, px + static_cast<int64_t>(i) * n + c1,
                  po + static_cast<int64_t>(i) * w);
    }
    if (want_grad(tape, {&x})) {
        int nx = tape->input_node(x);
        int no = tape->out_node(out);
        tape->push("slice_cols", {nx}, no,
                   [m, n, c0, w, gx = tape->slot(nx)](const std::vector<T>& g) {
                       gx->ensure();
                       for (int i = 0; i < m; ++i) {
                           for (int j = 0; j < w; ++j) {
                               gx->value[static_cast<size_t>(i) * n + c0 + j] +=
                                   g[static_cast<size_t>(i) * w + j];
                           }
                       }
                       gx->present = true;
                   });
    }
    return out;
}

template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts, TapeT<T>* tape = nullptr) {
    if (parts.empty()) fail(ErrorKind::invalid_argument, "concat_cols: no parts");
    const int m = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != m) {
            fail(ErrorKind::dimension, "concat_cols: parts must share the row count");
        }
        total += p.dim(1);
    }
    TensorT<T> out = TensorT<T>::zeros({m, total});
    T* po = out.mutable_ptr();
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        const T* pp = p.ptr();
        for (int i = 0; i < m; ++i) {
            std::copy(pp + static_cast<int64_t>(i) * w, pp + static_cast<int64_t>(i + 1) * w,
                      po + static_cast<int64_t>(i) * total + off);
        }
        off += w;
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        std::vector<int> in_nodes;
        struct Piece { int width; std::shared_ptr<GradSlotT<T>> slot; };
        auto pieces = std::make_shared<std::vector<Piece>>();
        for (const auto& p : parts) {
            int np = tape->input_node(p);
            if (np >= 0) in_nodes.push_back(np);
            pieces->push_back(Piece{p.dim(1), np >= 0 ? tape->slot(np) : nullptr});
        }
        int no = tape->out_node(out);
        tape->push("concat_cols", in_nodes, no,
                   [m, total, pieces](const std::vector<T>& g) {
                       int off = 0;
                       for (auto& piece : *pieces) {
                           if (piece.slot) {
                               piece.slot->ensure();
                               for (int i = 0; i < m; ++i) {
                                   for (int j = 0; j < piece.width; ++j) {
                                       piece.slot->value[static_cast<size_t>(i) * piece.width + j] +=
                                           g[static_cast<size_t>(i) * total + off + j];
                                   }
                               }
                               piece.slot->present = true;
                           }
                           off += piece.width;
                       }
                   });
    }
    return out;
}

// Row gather: out[i, :] = table[ids[i], :]. Gradient scatter-adds into rows.
template <typename T>
TensorT<T> embed_rows(const TensorT<T>& table, const std::vector<int>& ids,
                      TapeT<T>* tape = nullptr) {
    if (table.ndim() != 2) fail(ErrorKind::dimension, "embed_rows: table must be 2-D");
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= v) fail(ErrorKind::invalid_argument, "embed_rows: id out of range");
    }
    TensorT<T> out = TensorT<T>::zeros({static_cast<int>(ids.size()), d});
    const T* pt = table.ptr();
    T* po = out.mutable_ptr();
    for (size_t i = 0; i < ids.size(); ++i) {
        std::copy(pt + static_cast<int64_t>(ids[i]) * d, pt + static_cast<int64_t>(ids[i] + 1) * d,
                  po + static_cast<int64_t>(i) * d);
    }
    if (want_grad(tape, {&table})) {
        int nt = tape->input_node(table);
        int no = tape->out_node(out);
        tape->push("embed_rows", {nt}, no,
                   [ids, d, gt = tape->slot(nt)](const std::vector<T>& g) {
                       gt->ensure();
                       for (size_t i = 0; i < ids.size(); ++i) {
                           for (int j = 0; j < d; ++j) {
                               gt->value[static_cast<size_t>(ids[i]) * d + j] +=
                                   g[i * static_cast<size_t>(d) + j];
                           }
                       }
                       gt->present = true;
                   });
    }
    return out;
}

template <typename T>
void backward(const TensorT<T>& loss, TapeT<T>& tape) {
    tape.backward(loss);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamStateT {
    std::vector<std::vector<T>> m, v;
    int64_t step = 0;
};

struct AdamConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
void adam_step(const std::vector<TensorT<T>*>& params, AdamStateT<T>& state,
               const AdamConfig& cfg) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(static_cast<size_t>(params[i]->numel()), T(0));
            state.v[i].assign(static_cast<size_t>(params[i]->numel()), T(0));
        }
    }
    if (state.m.size() != params.size()) {
        fail(ErrorKind::dimension, "adam_step: state tracks a different parameter list");
    }
    state.step += 1;
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T bc1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(state.step)));
    const T bc2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(state.step)));
    for (size_t i = 0; i < params.size(); ++i) {
        TensorT<T>& p = *params[i];
        if (state.m[i].size() != static_cast<size_t>(p.numel())) {
            fail(ErrorKind::dimension, "adam_step: parameter shape changed");
        }
        const std::vector<T>* grad = p.grad();
        T* pd = p.mutable_ptr();
        for (size_t j = 0; j < state.m[i].size(); ++j) {
            const T g = grad ? (*grad)[j] : T(0);
            state.m[i][j] = b1 * state.m[i][j] + (T(1) - b1) * g;
            state.v[i][j] = b2 * state.v[i][j] + (T(1) - b2) * g * g;
            const T mhat = state.m[i][j] / bc1;
            const T vhat = state.v[i][j] / bc2;
            pd[j] -= static_cast<T>(cfg.lr) * mhat / (std::sqrt(vhat) + static_cast<T>(cfg.eps));
        }
        p.check_finite("adam_step");
    }
}

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;
using TapeF = TapeT<float>;
using TapeD = TapeT<double>;

}  // namespace cedit
