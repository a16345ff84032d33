#include "oodx/tensor.hpp"

#include "oodx/error.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace oodx {

Index numel(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape s) : shape(std::move(s)), data(Eigen::VectorXd::Zero(numel(shape))) {}

Tensor::Tensor(Shape s, Eigen::VectorXd values) : shape(std::move(s)), data(std::move(values)) {
    if (numel(shape) != data.size())
        throw ConfigError("tensor shape " + shape_string(shape) + " does not match " +
                          std::to_string(data.size()) + " values");
}

Tensor::Tensor(Shape s, std::initializer_list<double> values)
    : Tensor(std::move(s), Eigen::Map<const Eigen::VectorXd>(values.begin(), static_cast<Index>(values.size()))) {}

Tensor Tensor::filled(Shape s, double value) {
    Tensor t(std::move(s));
    t.data.setConstant(value);
    return t;
}

namespace detail {

struct Node {
    Tensor value;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backprop;
    bool requires_grad = false;
    std::string name;

    Eigen::VectorXd& grad() {
        if (value.grad.size() != value.data.size()) value.grad = Eigen::VectorXd::Zero(value.data.size());
        return value.grad;
    }
};

}  // namespace detail

namespace {

thread_local bool grad_disabled = false;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

const Node& node_of(const Var& v) {
    if (!v.defined()) throw StateError("operation on an undefined variable");
    return *v.node();
}

// Creates the output node. `backprop` is kept only when some input needs a gradient.
Var make_result(Tensor value, std::vector<NodePtr> inputs, std::function<void(Node&)> backprop) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in->requires_grad;
    if (needs && !grad_disabled) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backprop = std::move(backprop);
    }
    return Var(std::move(node));
}

void require_rank(const Var& v, Index rank, const char* op) {
    if (node_of(v).value.rank() != rank)
        throw ConfigError(std::string(op) + ": expected rank-" + std::to_string(rank) + " input, got " +
                          shape_string(v.shape()));
}

}  // namespace

Var Var::parameter(Tensor value, std::string name) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->name = std::move(name);
    return Var(std::move(node));
}

Var Var::constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

const std::string& Var::name() const { return node_of(*this).name; }

const Tensor& Var::value() const { return node_of(*this).value; }

Tensor& Var::value() {
    if (!node_) throw StateError("access to an undefined variable");
    return node_->value;
}

double Var::item() const {
    const Tensor& t = value();
    if (t.size() != 1) throw InputError("item() on tensor of shape " + shape_string(t.shape));
    return t.data[0];
}

const Eigen::VectorXd& Var::grad() const {
    if (!node_) throw StateError("access to an undefined variable");
    return node_->grad();
}

void Var::zero_grad() {
    if (node_) node_->grad().setZero();
}

NoGradGuard::NoGradGuard() : previous_(grad_disabled) { grad_disabled = true; }
NoGradGuard::~NoGradGuard() { grad_disabled = previous_; }

Var conv2d(const Var& input, const Var& kernels, const Var& bias, Padding padding) {
    require_rank(input, 3, "conv2d");
    require_rank(kernels, 4, "conv2d");
    const Tensor& x = input.value();
    const Tensor& k = kernels.value();
    const Index channels = x.dim(0), height = x.dim(1), width = x.dim(2);
    const Index out_channels = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    if (k.dim(1) != channels || bias.value().size() != out_channels ||
        (padding == Padding::valid && (kh > height || kw > width)))
        throw ConfigError("conv2d: input " + shape_string(x.shape) + " incompatible with kernels " +
                          shape_string(k.shape) + " and bias " + shape_string(bias.shape()));

    const Index pad_top = padding == Padding::same ? (kh - 1) / 2 : 0;
    const Index pad_left = padding == Padding::same ? (kw - 1) / 2 : 0;
    const Index out_h = padding == Padding::same ? height : height - kh + 1;
    const Index out_w = padding == Padding::same ? width : width - kw + 1;
    const Index patch = channels * kh * kw;
    const Index pixels = out_h * out_w;

    // Row r = (c, i, j) of the patch, column = output pixel.
    auto cols = std::make_shared<Eigen::MatrixXd>(Eigen::MatrixXd::Zero(patch, pixels));
    for (Index c = 0; c < channels; ++c)
        for (Index i = 0; i < kh; ++i)
            for (Index j = 0; j < kw; ++j) {
                const Index row = (c * kh + i) * kw + j;
                for (Index oy = 0; oy < out_h; ++oy) {
                    const Index iy = oy + i - pad_top;
                    if (iy < 0 || iy >= height) continue;
                    for (Index ox = 0; ox < out_w; ++ox) {
                        const Index ix = ox + j - pad_left;
                        if (ix < 0 || ix >= width) continue;
                        (*cols)(row, oy * out_w + ox) = x.data[(c * height + iy) * width + ix];
                    }
                }
            }

    Eigen::Map<const RowMatrixXd> kmat(k.data.data(), out_channels, patch);
    RowMatrixXd out = kmat * (*cols);
    out.colwise() += bias.data();

    Tensor result({out_channels, out_h, out_w}, Eigen::Map<const Eigen::VectorXd>(out.data(), out.size()));
    return make_result(
        std::move(result), {input.node(), kernels.node(), bias.node()},
        [=](Node& self) {
            Node& in = *self.inputs[0];
            Node& ker = *self.inputs[1];
            Node& b = *self.inputs[2];
            Eigen::Map<const RowMatrixXd> g(self.value.grad.data(), out_channels, pixels);
            if (ker.requires_grad) {
                Eigen::Map<RowMatrixXd> dk(ker.grad().data(), out_channels, patch);
                dk.noalias() += g * cols->transpose();
            }
            if (b.requires_grad) b.grad() += g.rowwise().sum();
            if (in.requires_grad) {
                Eigen::Map<const RowMatrixXd> km(ker.value.data.data(), out_channels, patch);
                Eigen::MatrixXd dcols = km.transpose() * g;
                Eigen::VectorXd& dx = in.grad();
                for (Index c = 0; c < channels; ++c)
                    for (Index i = 0; i < kh; ++i)
                        for (Index j = 0; j < kw; ++j) {
                            const Index row = (c * kh + i) * kw + j;
                            for (Index oy = 0; oy < out_h; ++oy) {
                                const Index iy = oy + i - pad_top;
                                if (iy < 0 || iy >= height) continue;
                                for (Index ox = 0; ox < out_w; ++ox) {
                                    const Index ix = ox + j - pad_left;
                                    if (ix < 0 || ix >= width) continue;
                                    dx[(c * height + iy) * width + ix] += dcols(row, oy * out_w + ox);
                                }
                            }
                        }
            }
        });
}

Var maxpool2d(const Var& input, OddPooling odd) {
    require_rank(input, 3, "maxpool2d");
    const Tensor& x = input.value();
    const Index channels = x.dim(0), height = x.dim(1), width = x.dim(2);
    if (odd == OddPooling::error && (height % 2 != 0 || width % 2 != 0))
        throw InputError("maxpool2d: shape error, odd spatial dims in " + shape_string(x.shape));
    const Index out_h = (height + 1) / 2, out_w = (width + 1) / 2;

    Tensor result({channels, out_h, out_w});
    auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(result.size()));
    for (Index c = 0; c < channels; ++c)
        for (Index oy = 0; oy < out_h; ++oy)
            for (Index ox = 0; ox < out_w; ++ox) {
                Index best = -1;
                double best_value = -std::numeric_limits<double>::infinity();
                for (Index dy = 0; dy < 2; ++dy)
                    for (Index dx = 0; dx < 2; ++dx) {
                        const Index iy = 2 * oy + dy, ix = 2 * ox + dx;
                        if (iy >= height || ix >= width) continue;
                        const Index at = (c * height + iy) * width + ix;
                        if (best < 0 || x.data[at] > best_value) {
                            best = at;
                            best_value = x.data[at];
                        }
                    }
                const Index out_at = (c * out_h + oy) * out_w + ox;
                result.data[out_at] = best_value;
                (*argmax)[static_cast<std::size_t>(out_at)] = best;
            }

    return make_result(std::move(result), {input.node()}, [argmax](Node& self) {
        Eigen::VectorXd& dx = self.inputs[0]->grad();
        for (std::size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += self.value.grad[static_cast<Index>(i)];
    });
}

Var dense(const Var& input, const Var& weights, const Var& bias) {
    require_rank(input, 1, "dense");
    require_rank(weights, 2, "dense");
    const Tensor& w = weights.value();
    const Index rows = w.dim(0), cols = w.dim(1);
    if (cols != input.value().size() || bias.value().size() != rows)
        throw ConfigError("dense: input " + shape_string(input.shape()) + " incompatible with weights " +
                          shape_string(w.shape) + " and bias " + shape_string(bias.shape()));
    Eigen::Map<const RowMatrixXd> wm(w.data.data(), rows, cols);
    Tensor result({rows}, wm * input.data() + bias.data());
    return make_result(std::move(result), {input.node(), weights.node(), bias.node()}, [rows, cols](Node& self) {
        Node& in = *self.inputs[0];
        Node& wn = *self.inputs[1];
        Node& b = *self.inputs[2];
        const Eigen::VectorXd& g = self.value.grad;
        if (wn.requires_grad) {
            Eigen::Map<RowMatrixXd> dw(wn.grad().data(), rows, cols);
            dw.noalias() += g * in.value.data.transpose();
        }
        if (b.requires_grad) b.grad() += g;
        if (in.requires_grad) {
            Eigen::Map<const RowMatrixXd> wm2(wn.value.data.data(), rows, cols);
            in.grad().noalias() += wm2.transpose() * g;
        }
    });
}

Var relu(const Var& x) {
    Tensor result(x.shape(), x.data().cwiseMax(0.0));
    return make_result(std::move(result), {x.node()}, [](Node& self) {
        Node& in = *self.inputs[0];
        in.grad() += (in.value.data.array() > 0.0).select(self.value.grad, 0.0);
    });
}

Var flatten(const Var& x) {
    Tensor result({x.value().size()}, x.data());
    return make_result(std::move(result), {x.node()}, [](Node& self) { self.inputs[0]->grad() += self.value.grad; });
}

Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& logits) {
    if (logits.size() == 0) throw InputError("softmax of an empty vector");
    if (!logits.allFinite()) throw InputError("softmax: non-finite logits");
    Eigen::VectorXd e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
}

Var softmax(const Var& logits) {
    require_rank(logits, 1, "softmax");
    Tensor result(logits.shape(), softmax(logits.data()));
    return make_result(std::move(result), {logits.node()}, [](Node& self) {
        const Eigen::VectorXd& p = self.value.data;
        const Eigen::VectorXd& g = self.value.grad;
        self.inputs[0]->grad() += (p.array() * (g.array() - g.dot(p))).matrix();
    });
}

Var cross_entropy(const Var& probs, Index label) {
    require_rank(probs, 1, "cross_entropy");
    const Index k = probs.value().size();
    if (label < 0 || label >= k)
        throw InputError("cross_entropy: label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
    Tensor result({1}, {-std::log(probs.data()[label])});
    return make_result(std::move(result), {probs.node()}, [label](Node& self) {
        Node& in = *self.inputs[0];
        in.grad()[label] -= self.value.grad[0] / in.value.data[label];
    });
}

Var cross_entropy_logits(const Var& logits, Index label) {
    require_rank(logits, 1, "cross_entropy_logits");
    const Eigen::VectorXd& z = logits.data();
    if (label < 0 || label >= z.size())
        throw InputError("cross_entropy: label " + std::to_string(label) + " outside [0," +
                         std::to_string(z.size()) + ")");
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    Tensor result({1}, {lse - z[label]});
    return make_result(std::move(result), {logits.node()}, [label](Node& self) {
        Node& in = *self.inputs[0];
        Eigen::VectorXd d = softmax(in.value.data);
        d[label] -= 1.0;
        in.grad() += self.value.grad[0] * d;
    });
}

Var add(const Var& a, const Var& b) {
    if (a.shape() != b.shape())
        throw ConfigError("add: shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    Tensor result(a.shape(), a.data() + b.data());
    return make_result(std::move(result), {a.node(), b.node()}, [](Node& self) {
        for (auto& in : self.inputs)
            if (in->requires_grad) in->grad() += self.value.grad;
    });
}

Var scale(const Var& x, double factor) {
    Tensor result(x.shape(), factor * x.data());
    return make_result(std::move(result), {x.node()},
                       [factor](Node& self) { self.inputs[0]->grad() += factor * self.value.grad; });
}

Var sum(const Var& x) {
    Tensor result({1}, {x.data().sum()});
    return make_result(std::move(result), {x.node()},
                       [](Node& self) { self.inputs[0]->grad().array() += self.value.grad[0]; });
}

Var square(const Var& x) {
    Tensor result(x.shape(), x.data().array().square().matrix());
    return make_result(std::move(result), {x.node()}, [](Node& self) {
        Node& in = *self.inputs[0];
        in.grad() += (2.0 * in.value.data.array() * self.value.grad.array()).matrix();
    });
}

void backward(const Var& loss) {
    if (!loss.defined()) throw StateError("backward called before any forward pass was recorded");
    if (loss.value().size() != 1)
        throw InputError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
    if (!loss.requires_grad())
        throw StateError("backward: loss has no recorded graph reaching a trainable parameter");

    // Iterative post-order DFS gives a topological order (inputs before users).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order)
        if (n->backprop) n->grad().setZero();
    loss.node()->grad()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

}  // namespace oodx
