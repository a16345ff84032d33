#pragma once

#include "oodx/tensor.hpp"

#include <string>
#include <vector>

namespace oodx {

/// One grayscale image of shape [1,H,W] with values in [0,1] and its class index.
struct LabeledImage {
    std::string id;
    Tensor image;
    Index label = 0;
};

using Dataset = std::vector<LabeledImage>;

}  // namespace oodx
