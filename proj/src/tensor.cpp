#include "moss/tensor.h"

#include <sstream>
#include <stdexcept>

namespace moss {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::runtime_error("tensor shape dimensions must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    std::size_t n = shape_numel(shape);
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(n, 0.0);
    t.impl_->requires_grad = requires_grad;
    if (requires_grad) t.impl_->grad.assign(n, 0.0);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw std::runtime_error("tensor data length does not match shape");
    Tensor t = zeros(std::move(shape), requires_grad);
    t.impl_->data = std::move(data);
    return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

double Tensor::item() const {
    if (size() != 1) throw std::runtime_error("item() requires a one-element tensor, got " + shape_str());
    return impl_->data[0];
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < impl_->shape.size(); ++i) {
        if (i) os << ',';
        os << impl_->shape[i];
    }
    os << ']';
    return os.str();
}

} // namespace moss
