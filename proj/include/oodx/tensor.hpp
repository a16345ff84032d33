#pragma once

#include <Eigen/Core>

#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace oodx {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Index numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles with an optional same-shape gradient buffer.
///
/// `grad` is empty until something accumulates into it.
struct Tensor {
    Shape shape;
    Eigen::VectorXd data;
    Eigen::VectorXd grad;

    Tensor() = default;
    explicit Tensor(Shape s);
    Tensor(Shape s, Eigen::VectorXd values);
    Tensor(Shape s, std::initializer_list<double> values);

    static Tensor filled(Shape s, double value);

    Index size() const { return data.size(); }
    Index rank() const { return static_cast<Index>(shape.size()); }
    Index dim(Index axis) const { return shape.at(static_cast<std::size_t>(axis)); }
    bool has_grad() const { return grad.size() == data.size() && data.size() > 0; }

    double& operator[](Index i) { return data[i]; }
    double operator[](Index i) const { return data[i]; }
};

enum class Padding { valid, same };

/// What max-pooling does with an odd spatial extent.
enum class OddPooling { error, pad };

namespace detail {
struct Node;
}

/// Handle to a value in the autodiff graph.
///
/// Leaves are created with `Var::parameter` (trainable) or `Var::constant`.
/// Every op returns a fresh interior node that keeps its inputs alive until the
/// handle is dropped. Copies share the underlying node.
class Var {
public:
    Var() = default;

    static Var parameter(Tensor value, std::string name = {});
    static Var constant(Tensor value);

    bool defined() const { return node_ != nullptr; }
    bool requires_grad() const;
    const std::string& name() const;

    const Tensor& value() const;
    Tensor& value();
    const Shape& shape() const { return value().shape; }
    const Eigen::VectorXd& data() const { return value().data; }
    double item() const;

    /// Accumulated gradient; zero-filled if nothing has been accumulated yet.
    const Eigen::VectorXd& grad() const;
    void zero_grad();

    explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

/// While alive, ops on this thread skip graph recording (inference only).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Layers. Shapes use (channels, height, width) with no batch axis.

/// Cross-correlation: input [C,H,W], kernels [Co,C,kh,kw], bias [Co] -> [Co,H',W'].
Var conv2d(const Var& input, const Var& kernels, const Var& bias, Padding padding = Padding::valid);

/// 2x2 window, stride 2. Ties route the gradient to the first cell in row-major order.
Var maxpool2d(const Var& input, OddPooling odd = OddPooling::error);

/// weights [m,n] times input [n] plus bias [m].
Var dense(const Var& input, const Var& weights, const Var& bias);

Var relu(const Var& x);
Var flatten(const Var& x);
Var softmax(const Var& logits);

/// -log(probs[label]).
Var cross_entropy(const Var& probs, Index label);

/// Same value as cross_entropy(softmax(logits), label) via log-sum-exp.
Var cross_entropy_logits(const Var& logits, Index label);

Var add(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var sum(const Var& x);
Var square(const Var& x);

/// Reverse pass from a scalar node. Leaf gradients accumulate across calls.
void backward(const Var& loss);

/// Numerically stable softmax of a plain vector.
Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& logits);

}  // namespace oodx
