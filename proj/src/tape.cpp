#include "moss/tape.h"

#include <stdexcept>

namespace moss {

void Tape::backward(Tensor& loss) {
    if (loss.size() != 1)
        throw std::runtime_error("backward: loss must be scalar, got shape " +
                                 loss.shape_str());
    if (!loss.requires_grad())
        throw std::runtime_error("backward: loss does not require grad");
    if (entries_.empty())
        throw std::runtime_error("backward: tape is empty");
    loss.grad()[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
        (*it)();
    entries_.clear();
}

} // namespace moss
