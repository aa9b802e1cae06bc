#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

namespace moss {

// Dense row-major tensor of doubles, rank 1 or 2. Handles share storage;
// copying a Tensor aliases the same buffer. Gradient buffers exist only
// on tensors that require grad.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }

    const std::vector<int>& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    int rank() const { return static_cast<int>(impl_->shape.size()); }

    // 2-D view helpers: rank-1 tensors are treated as a single row.
    int rows() const { return rank() == 2 ? impl_->shape[0] : 1; }
    int cols() const { return rank() == 2 ? impl_->shape[1] : impl_->shape[0]; }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    double& at(int r, int c) {
        return impl_->data[static_cast<std::size_t>(r) * cols() + c];
    }
    double at(int r, int c) const {
        return impl_->data[static_cast<std::size_t>(r) * cols() + c];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) {
        impl_->requires_grad = v;
        if (v)
            impl_->grad.assign(impl_->data.size(), 0.0);
        else
            impl_->grad.clear();
    }
    double* grad() { return impl_->grad.data(); }
    const double* grad() const { return impl_->grad.data(); }
    std::vector<double>& grad_vec() { return impl_->grad; }
    const std::vector<double>& grad_vec() const { return impl_->grad; }

    void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

    double item() const;

    std::string shape_str() const;

    // Identity of the underlying buffer; used by the optimizer to match
    // gradients to parameters.
    const void* id() const { return impl_.get(); }

private:
    struct Impl {
        std::vector<int> shape;
        std::vector<double> data;
        std::vector<double> grad; // empty unless requires_grad
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

std::size_t shape_numel(const std::vector<int>& shape);

} // namespace moss
