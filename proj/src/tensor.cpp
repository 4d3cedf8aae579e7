#include "top/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "top/errors.hpp"

namespace top {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

// Internal access to Tensor's node for the op implementations.
class OpHelper {
public:
    static const NodePtr& node(const Tensor& t) { return t.n_; }

    static Tensor wrap(NodePtr n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

    static NodePtr make(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        if (requires_grad) n->grad.assign(n->data.size(), 0.0);
        return n;
    }
};

namespace {

std::size_t shape_product(const std::vector<int>& shape) {
    std::size_t p = 1;
    for (int d : shape) p *= static_cast<std::size_t>(d);
    return p;
}

const NodePtr& node_of(const Tensor& t) { return OpHelper::node(t); }

void require_defined(const Tensor& t, const char* op) {
    if (!node_of(t)) throw ContractError(std::string(op) + ": undefined tensor");
}

// Result node for an op; the graph edge is recorded only when some input
// requires grad, so inference builds no tape at all.
NodePtr result_node(std::vector<int> shape, std::vector<double> data,
                    std::vector<NodePtr> parents) {
    bool rg = false;
    for (const auto& p : parents)
        if (p->requires_grad) rg = true;
    auto n = OpHelper::make(std::move(shape), std::move(data), rg);
    if (rg) n->parents = std::move(parents);
    return n;
}

}  // namespace

std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(std::vector<double> data, std::vector<int> shape, bool requires_grad) {
    if (shape_product(shape) != data.size())
        throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_string(shape));
    n_ = OpHelper::make(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    std::vector<double> data(shape_product(shape), value);
    return Tensor(std::move(data), std::move(shape), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor({value}, {1}, requires_grad);
}

const std::vector<int>& Tensor::shape() const {
    require_defined(*this, "shape");
    return n_->shape;
}

int Tensor::size() const {
    require_defined(*this, "size");
    return static_cast<int>(n_->data.size());
}

bool Tensor::requires_grad() const {
    require_defined(*this, "requires_grad");
    return n_->requires_grad;
}

const std::vector<double>& Tensor::data() const {
    require_defined(*this, "data");
    return n_->data;
}

std::vector<double>& Tensor::data() {
    require_defined(*this, "data");
    return n_->data;
}

const std::vector<double>& Tensor::grad() const {
    require_defined(*this, "grad");
    if (!n_->requires_grad) throw ContractError("grad: tensor does not require grad");
    return n_->grad;
}

double Tensor::item() const {
    require_defined(*this, "item");
    if (n_->data.size() != 1)
        throw ContractError("item: tensor has " + std::to_string(n_->data.size()) +
                            " elements, expected 1");
    return n_->data[0];
}

void Tensor::zero_grad() {
    require_defined(*this, "zero_grad");
    std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
}

int Tensor::argmax() const {
    require_defined(*this, "argmax");
    const auto& d = n_->data;
    if (d.empty()) throw ContractError("argmax: empty tensor");
    int best = 0;
    for (int i = 1; i < static_cast<int>(d.size()); ++i)
        if (d[i] > d[best]) best = i;
    return best;
}

void backward(const Tensor& loss) {
    const NodePtr& root = node_of(loss);
    if (!root) throw ContractError("backward: undefined tensor");
    if (root->data.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_string(root->shape));
    if (!root->requires_grad) throw ContractError("backward: loss does not require grad");

    // Iterative post-order DFS; the resulting list is topologically ordered
    // (inputs before consumers) and each node appears exactly once.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior (op-result) grads are scratch for this pass; leaf grads
    // accumulate across passes.
    for (Node* n : order)
        if (n->backward) std::fill(n->grad.begin(), n->grad.end(), 0.0);

    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward();
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (node_of(a)->shape != node_of(b)->shape)
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             shape_string(node_of(a)->shape) + " vs " +
                             shape_string(node_of(b)->shape));
}

using BinaryKernel = void (*)(const Node&, const Node&, Node&);

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_defined(a, "add");
    require_defined(b, "add");
    require_same_shape(a, b, "add");
    const NodePtr& an = node_of(a);
    const NodePtr& bn = node_of(b);
    std::vector<double> out(an->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] + bn->data[i];
    auto n = result_node(an->shape, std::move(out), {an, bn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, an, bn] {
            if (an->requires_grad)
                for (std::size_t i = 0; i < raw->grad.size(); ++i) an->grad[i] += raw->grad[i];
            if (bn->requires_grad)
                for (std::size_t i = 0; i < raw->grad.size(); ++i) bn->grad[i] += raw->grad[i];
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_defined(a, "sub");
    require_defined(b, "sub");
    require_same_shape(a, b, "sub");
    const NodePtr& an = node_of(a);
    const NodePtr& bn = node_of(b);
    std::vector<double> out(an->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] - bn->data[i];
    auto n = result_node(an->shape, std::move(out), {an, bn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, an, bn] {
            if (an->requires_grad)
                for (std::size_t i = 0; i < raw->grad.size(); ++i) an->grad[i] += raw->grad[i];
            if (bn->requires_grad)
                for (std::size_t i = 0; i < raw->grad.size(); ++i) bn->grad[i] -= raw->grad[i];
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_defined(a, "mul");
    require_defined(b, "mul");
    require_same_shape(a, b, "mul");
    const NodePtr& an = node_of(a);
    const NodePtr& bn = node_of(b);
    std::vector<double> out(an->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] * bn->data[i];
    auto n = result_node(an->shape, std::move(out), {an, bn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, an, bn] {
            if (an->requires_grad)
                for (std::size_t i = 0; i < raw->grad.size(); ++i)
                    an->grad[i] += raw->grad[i] * bn->data[i];
            if (bn->requires_grad)
                for (std::size_t i = 0; i < raw->grad.size(); ++i)
                    bn->grad[i] += raw->grad[i] * an->data[i];
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor add_scalar(const Tensor& a, double s) {
    require_defined(a, "add_scalar");
    const NodePtr& an = node_of(a);
    std::vector<double> out(an->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] + s;
    auto n = result_node(an->shape, std::move(out), {an});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, an] {
            for (std::size_t i = 0; i < raw->grad.size(); ++i) an->grad[i] += raw->grad[i];
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor mul_scalar(const Tensor& a, double s) {
    require_defined(a, "mul_scalar");
    const NodePtr& an = node_of(a);
    std::vector<double> out(an->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] * s;
    auto n = result_node(an->shape, std::move(out), {an});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, an, s] {
            for (std::size_t i = 0; i < raw->grad.size(); ++i) an->grad[i] += raw->grad[i] * s;
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor relu(const Tensor& x) {
    require_defined(x, "relu");
    const NodePtr& xn = node_of(x);
    std::vector<double> out(xn->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xn->data[i] > 0.0 ? xn->data[i] : 0.0;
    auto n = result_node(xn->shape, std::move(out), {xn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, xn] {
            for (std::size_t i = 0; i < raw->grad.size(); ++i)
                if (xn->data[i] > 0.0) xn->grad[i] += raw->grad[i];
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    require_defined(x, "clamp");
    if (lo > hi) throw ContractError("clamp: lo > hi");
    const NodePtr& xn = node_of(x);
    std::vector<double> out(xn->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(xn->data[i], lo, hi);
    auto n = result_node(xn->shape, std::move(out), {xn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, xn, lo, hi] {
            for (std::size_t i = 0; i < raw->grad.size(); ++i)
                if (xn->data[i] > lo && xn->data[i] < hi) xn->grad[i] += raw->grad[i];
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    require_defined(x, "reshape");
    const NodePtr& xn = node_of(x);
    if (shape_product(shape) != xn->data.size())
        throw DimensionError("reshape: cannot view " + shape_string(xn->shape) + " as " +
                             shape_string(shape));
    auto n = result_node(std::move(shape), xn->data, {xn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, xn] {
            for (std::size_t i = 0; i < raw->grad.size(); ++i) xn->grad[i] += raw->grad[i];
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor flatten(const Tensor& x) {
    require_defined(x, "flatten");
    return reshape(x, {1, x.size()});
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    const NodePtr& an = node_of(a);
    const NodePtr& bn = node_of(b);
    if (an->shape.size() != 2 || bn->shape.size() != 2 || an->shape[1] != bn->shape[0])
        throw DimensionError("matmul: incompatible shapes " + shape_string(an->shape) + " and " +
                             shape_string(bn->shape));
    const int r = an->shape[0], k = an->shape[1], c = bn->shape[1];
    std::vector<double> out(static_cast<std::size_t>(r) * c, 0.0);
    for (int i = 0; i < r; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = an->data[static_cast<std::size_t>(i) * k + p];
            const double* brow = &bn->data[static_cast<std::size_t>(p) * c];
            double* orow = &out[static_cast<std::size_t>(i) * c];
            for (int j = 0; j < c; ++j) orow[j] += av * brow[j];
        }
    auto n = result_node({r, c}, std::move(out), {an, bn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, an, bn, r, k, c] {
            if (an->requires_grad) {
                // dA = G . B^T
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) {
                        const double g = raw->grad[static_cast<std::size_t>(i) * c + j];
                        if (g == 0.0) continue;
                        const double* brow = &bn->data[j];
                        double* arow = &an->grad[static_cast<std::size_t>(i) * k];
                        for (int p = 0; p < k; ++p)
                            arow[p] += g * brow[static_cast<std::size_t>(p) * c];
                    }
            }
            if (bn->requires_grad) {
                // dB = A^T . G
                for (int i = 0; i < r; ++i)
                    for (int p = 0; p < k; ++p) {
                        const double av = an->data[static_cast<std::size_t>(i) * k + p];
                        if (av == 0.0) continue;
                        const double* grow = &raw->grad[static_cast<std::size_t>(i) * c];
                        double* bgrad = &bn->grad[static_cast<std::size_t>(p) * c];
                        for (int j = 0; j < c; ++j) bgrad[j] += av * grow[j];
                    }
            }
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor conv2d(const Tensor& x, const Tensor& w, int padding) {
    require_defined(x, "conv2d");
    require_defined(w, "conv2d");
    const NodePtr& xn = node_of(x);
    const NodePtr& wn = node_of(w);
    if (xn->shape.size() != 3)
        throw DimensionError("conv2d: input must be [C,H,W], got " + shape_string(xn->shape));
    if (wn->shape.size() != 4)
        throw DimensionError("conv2d: kernel must be [Cout,Cin,k,k], got " +
                             shape_string(wn->shape));
    const int cin = xn->shape[0], h = xn->shape[1], wdt = xn->shape[2];
    const int cout = wn->shape[0], kc = wn->shape[1], kh = wn->shape[2], kw = wn->shape[3];
    if (kc != cin)
        throw DimensionError("conv2d: channel mismatch, input " + shape_string(xn->shape) +
                             " vs kernel " + shape_string(wn->shape));
    if (kh != kw || kh % 2 == 0) throw ContractError("conv2d: kernel must be square with odd size");
    if (padding < 0) throw ContractError("conv2d: negative padding");
    const int oh = h + 2 * padding - kh + 1;
    const int ow = wdt + 2 * padding - kw + 1;
    if (oh <= 0 || ow <= 0)
        throw DimensionError("conv2d: kernel " + shape_string(wn->shape) +
                             " too large for input " + shape_string(xn->shape));

    // Cross-correlation with zero padding. Inner loop runs over contiguous
    // output/input columns.
    std::vector<double> out(static_cast<std::size_t>(cout) * oh * ow, 0.0);
    for (int co = 0; co < cout; ++co)
        for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    const double wv =
                        wn->data[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx];
                    if (wv == 0.0) continue;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy - padding + ky;
                        if (iy < 0 || iy >= h) continue;
                        const int x0 = std::max(0, padding - kx);
                        const int x1 = std::min(ow, wdt + padding - kx);
                        const double* xrow =
                            &xn->data[(static_cast<std::size_t>(ci) * h + iy) * wdt];
                        double* orow = &out[(static_cast<std::size_t>(co) * oh + oy) * ow];
                        for (int ox = x0; ox < x1; ++ox) orow[ox] += wv * xrow[ox - padding + kx];
                    }
                }

    auto n = result_node({cout, oh, ow}, std::move(out), {xn, wn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, xn, wn, cin, h, wdt, cout, kh, kw, oh, ow, padding] {
            for (int co = 0; co < cout; ++co)
                for (int ci = 0; ci < cin; ++ci)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const std::size_t widx =
                                ((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx;
                            const double wv = wn->data[widx];
                            double wgrad_acc = 0.0;
                            for (int oy = 0; oy < oh; ++oy) {
                                const int iy = oy - padding + ky;
                                if (iy < 0 || iy >= h) continue;
                                const int x0 = std::max(0, padding - kx);
                                const int x1 = std::min(ow, wdt + padding - kx);
                                const double* grow =
                                    &raw->grad[(static_cast<std::size_t>(co) * oh + oy) * ow];
                                const std::size_t xbase =
                                    (static_cast<std::size_t>(ci) * h + iy) * wdt;
                                if (xn->requires_grad) {
                                    double* xgrow = &xn->grad[xbase];
                                    for (int ox = x0; ox < x1; ++ox)
                                        xgrow[ox - padding + kx] += wv * grow[ox];
                                }
                                if (wn->requires_grad) {
                                    const double* xrow = &xn->data[xbase];
                                    for (int ox = x0; ox < x1; ++ox)
                                        wgrad_acc += grow[ox] * xrow[ox - padding + kx];
                                }
                            }
                            if (wn->requires_grad) wn->grad[widx] += wgrad_acc;
                        }
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, int padding) {
    require_defined(x, "depthwise_conv2d");
    require_defined(w, "depthwise_conv2d");
    const NodePtr& xn = node_of(x);
    const NodePtr& wn = node_of(w);
    if (xn->shape.size() != 3)
        throw DimensionError("depthwise_conv2d: input must be [C,H,W], got " +
                             shape_string(xn->shape));
    if (wn->shape.size() != 3 || wn->shape[0] != xn->shape[0])
        throw DimensionError("depthwise_conv2d: kernel must be [C,k,k] matching input " +
                             shape_string(xn->shape) + ", got " + shape_string(wn->shape));
    const int c = xn->shape[0], h = xn->shape[1], wdt = xn->shape[2];
    const int kh = wn->shape[1], kw = wn->shape[2];
    if (kh != kw || kh % 2 == 0)
        throw ContractError("depthwise_conv2d: kernel must be square with odd size");
    const int oh = h + 2 * padding - kh + 1;
    const int ow = wdt + 2 * padding - kw + 1;
    if (oh <= 0 || ow <= 0)
        throw DimensionError("depthwise_conv2d: kernel too large for input " +
                             shape_string(xn->shape));

    std::vector<double> out(static_cast<std::size_t>(c) * oh * ow, 0.0);
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const double wv =
                    wn->data[(static_cast<std::size_t>(ci) * kh + ky) * kw + kx];
                if (wv == 0.0) continue;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy - padding + ky;
                    if (iy < 0 || iy >= h) continue;
                    const int x0 = std::max(0, padding - kx);
                    const int x1 = std::min(ow, wdt + padding - kx);
                    const double* xrow = &xn->data[(static_cast<std::size_t>(ci) * h + iy) * wdt];
                    double* orow = &out[(static_cast<std::size_t>(ci) * oh + oy) * ow];
                    for (int ox = x0; ox < x1; ++ox) orow[ox] += wv * xrow[ox - padding + kx];
                }
            }

    auto n = result_node({c, oh, ow}, std::move(out), {xn, wn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, xn, wn, c, h, wdt, kh, kw, oh, ow, padding] {
            for (int ci = 0; ci < c; ++ci)
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        const std::size_t widx = (static_cast<std::size_t>(ci) * kh + ky) * kw + kx;
                        const double wv = wn->data[widx];
                        double wgrad_acc = 0.0;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy - padding + ky;
                            if (iy < 0 || iy >= h) continue;
                            const int x0 = std::max(0, padding - kx);
                            const int x1 = std::min(ow, wdt + padding - kx);
                            const double* grow =
                                &raw->grad[(static_cast<std::size_t>(ci) * oh + oy) * ow];
                            const std::size_t xbase = (static_cast<std::size_t>(ci) * h + iy) * wdt;
                            if (xn->requires_grad) {
                                double* xgrow = &xn->grad[xbase];
                                for (int ox = x0; ox < x1; ++ox)
                                    xgrow[ox - padding + kx] += wv * grow[ox];
                            }
                            if (wn->requires_grad) {
                                const double* xrow = &xn->data[xbase];
                                for (int ox = x0; ox < x1; ++ox)
                                    wgrad_acc += grow[ox] * xrow[ox - padding + kx];
                            }
                        }
                        if (wn->requires_grad) wn->grad[widx] += wgrad_acc;
                    }
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor maxpool2x2(const Tensor& x) {
    require_defined(x, "maxpool2x2");
    const NodePtr& xn = node_of(x);
    if (xn->shape.size() != 3)
        throw DimensionError("maxpool2x2: input must be [C,H,W], got " + shape_string(xn->shape));
    const int c = xn->shape[0], h = xn->shape[1], w = xn->shape[2];
    if (h < 2 || w < 2) throw DimensionError("maxpool2x2: spatial dims too small");
    const int oh = h / 2, ow = w / 2;
    std::vector<double> out(static_cast<std::size_t>(c) * oh * ow);
    auto argidx = std::make_shared<std::vector<std::size_t>>(out.size());
    for (int ci = 0; ci < c; ++ci)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                std::size_t best = 0;
                double bv = -1.0;
                bool first = true;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const std::size_t idx =
                            (static_cast<std::size_t>(ci) * h + (2 * oy + dy)) * w + (2 * ox + dx);
                        if (first || xn->data[idx] > bv) {
                            bv = xn->data[idx];
                            best = idx;
                            first = false;
                        }
                    }
                const std::size_t o = (static_cast<std::size_t>(ci) * oh + oy) * ow + ox;
                out[o] = bv;
                (*argidx)[o] = best;
            }
    auto n = result_node({c, oh, ow}, std::move(out), {xn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, xn, argidx] {
            for (std::size_t o = 0; o < raw->grad.size(); ++o)
                xn->grad[(*argidx)[o]] += raw->grad[o];
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor reduce_sum(const Tensor& x) {
    require_defined(x, "reduce_sum");
    const NodePtr& xn = node_of(x);
    double s = 0.0;
    for (double v : xn->data) s += v;
    auto n = result_node({1}, {s}, {xn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, xn] {
            const double g = raw->grad[0];
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor reduce_mean(const Tensor& x) {
    require_defined(x, "reduce_mean");
    const NodePtr& xn = node_of(x);
    if (xn->data.empty()) throw ContractError("reduce_mean: empty tensor");
    double s = 0.0;
    for (double v : xn->data) s += v;
    const double inv = 1.0 / static_cast<double>(xn->data.size());
    auto n = result_node({1}, {s * inv}, {xn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, xn, inv] {
            const double g = raw->grad[0] * inv;
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor softmax(const Tensor& logits) {
    require_defined(logits, "softmax");
    const NodePtr& xn = node_of(logits);
    if (xn->data.empty()) throw ContractError("softmax: empty tensor");
    const double m = *std::max_element(xn->data.begin(), xn->data.end());
    std::vector<double> out(xn->data.size());
    double z = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(xn->data[i] - m);
        z += out[i];
    }
    for (double& v : out) v /= z;
    auto n = result_node(xn->shape, std::move(out), {xn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, xn] {
            double dot = 0.0;
            for (std::size_t i = 0; i < raw->grad.size(); ++i) dot += raw->grad[i] * raw->data[i];
            for (std::size_t i = 0; i < raw->grad.size(); ++i)
                xn->grad[i] += raw->data[i] * (raw->grad[i] - dot);
        };
    }
    return OpHelper::wrap(std::move(n));
}

Tensor softmax_cross_entropy(const Tensor& logits, int target) {
    require_defined(logits, "softmax_cross_entropy");
    const NodePtr& xn = node_of(logits);
    const int m = static_cast<int>(xn->data.size());
    if (target < 0 || target >= m)
        throw ContractError("softmax_cross_entropy: target " + std::to_string(target) +
                            " out of range for " + std::to_string(m) + " classes");
    const double mx = *std::max_element(xn->data.begin(), xn->data.end());
    double z = 0.0;
    for (double v : xn->data) z += std::exp(v - mx);
    const double loss = std::log(z) - (xn->data[static_cast<std::size_t>(target)] - mx);
    auto n = result_node({1}, {loss}, {xn});
    if (n->requires_grad) {
        Node* raw = n.get();
        n->backward = [raw, xn, target, mx, z] {
            const double g = raw->grad[0];
            for (std::size_t i = 0; i < xn->grad.size(); ++i) {
                const double p = std::exp(xn->data[i] - mx) / z;
                xn->grad[i] += g * (p - (static_cast<int>(i) == target ? 1.0 : 0.0));
            }
        };
    }
    return OpHelper::wrap(std::move(n));
}

}  // namespace top
