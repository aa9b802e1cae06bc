#pragma once

#include <functional>
#include <vector>

#include "moss/tensor.h"

namespace moss {

// Records backward closures in forward order and replays them in
// reverse. Rebuilt every training step; owned by one training context.
class Tape {
public:
    void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

    // Seeds d(loss)/d(loss) = 1 and propagates through the recorded ops,
    // accumulating into the grad buffers of all requires-grad tensors.
    // The tape is cleared afterwards.
    void backward(Tensor& loss);

    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

private:
    std::vector<std::function<void()>> entries_;
};

} // namespace moss
